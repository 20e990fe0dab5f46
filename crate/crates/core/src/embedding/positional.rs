use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Sinusoidal encoding: `PE(t, 2k) = sin(t / 10000^(2k/H))`,
/// `PE(t, 2k+1) = cos(t / 10000^(2k/H))`.
pub fn positional_encoding(len: usize, width: usize) -> Result<Tensor> {
    if width == 0 || width % 2 == 1 {
        return Err(Error::Config(format!(
            "positional encoding width must be even and positive, got {width}"
        )));
    }
    let mut data = Vec::with_capacity(len * width);
    for t in 0..len {
        for k in 0..width / 2 {
            let angle = t as f64 / 10000f64.powf(2.0 * k as f64 / width as f64);
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Tensor::new(vec![len, width], data)
}
