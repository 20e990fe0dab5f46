use crate::dataset::joints::{LEFT_HIP, LEFT_SHOULDER, RIGHT_HIP, RIGHT_SHOULDER};
use crate::dataset::{Pose, PoseSequence};
use crate::error::{Error, Result};

fn midpoint(p: &Pose, a: usize, b: usize) -> [f64; 2] {
    [(p[a][0] + p[b][0]) / 2.0, (p[a][1] + p[b][1]) / 2.0]
}

/// Distance from the hip midpoint to the shoulder midpoint.
pub fn torso_length(p: &Pose) -> f64 {
    let h = midpoint(p, LEFT_HIP, RIGHT_HIP);
    let s = midpoint(p, LEFT_SHOULDER, RIGHT_SHOULDER);
    ((s[0] - h[0]).powi(2) + (s[1] - h[1]).powi(2)).sqrt()
}

/// Centers every frame on its hip midpoint and divides by the median
/// non-zero torso length of the whole video.
pub fn normalize_pose(seq: &PoseSequence) -> Result<PoseSequence> {
    let mut lengths: Vec<f64> = seq
        .frames
        .iter()
        .map(torso_length)
        .filter(|l| *l > 0.0)
        .collect();
    if lengths.is_empty() {
        return Err(Error::DegeneratePose(format!(
            "{}: torso length is zero in every frame",
            seq.video_id
        )));
    }
    lengths.sort_by(f64::total_cmp);
    let n = lengths.len();
    let scale = if n % 2 == 1 {
        lengths[n / 2]
    } else {
        (lengths[n / 2 - 1] + lengths[n / 2]) / 2.0
    };
    let frames = seq
        .frames
        .iter()
        .map(|p| {
            let c = midpoint(p, LEFT_HIP, RIGHT_HIP);
            let mut out = *p;
            for j in out.iter_mut() {
                *j = [(j[0] - c[0]) / scale, (j[1] - c[1]) / scale];
            }
            out
        })
        .collect();
    Ok(PoseSequence {
        video_id: seq.video_id.clone(),
        fps: seq.fps,
        frames,
    })
}

pub fn translate_sequence(seq: &PoseSequence, dx: f64, dy: f64) -> PoseSequence {
    map_coords(seq, |[x, y]| [x + dx, y + dy])
}

/// Uniform scaling by `factor` about `center`.
pub fn scale_sequence(seq: &PoseSequence, factor: f64, center: [f64; 2]) -> PoseSequence {
    map_coords(seq, |[x, y]| {
        [
            center[0] + (x - center[0]) * factor,
            center[1] + (y - center[1]) * factor,
        ]
    })
}

fn map_coords(seq: &PoseSequence, f: impl Fn([f64; 2]) -> [f64; 2]) -> PoseSequence {
    PoseSequence {
        video_id: seq.video_id.clone(),
        fps: seq.fps,
        frames: seq
            .frames
            .iter()
            .map(|p| {
                let mut out = *p;
                out.iter_mut().for_each(|j| *j = f(*j));
                out
            })
            .collect(),
    }
}
