//! Linear-chain CRF over `K` labels with virtual START (`K`) and STOP
//! (`K + 1`) states.
//!
//! For emissions `C` (`T × K`) and transitions `A` (`(K+2) × (K+2)`), a path
//! `y` scores `A[START, y₁] + Σ C[t, y_t] + Σ A[y_t, y_{t+1}] + A[y_T, STOP]`.
//! Everything here is generic in `K`; the BIEO grammar is just a particular
//! mask on `A`.

use crate::dataset::Tag;
use crate::error::{Error, Result};
use crate::numerics::{logsumexp, CustomOp, Graph, Parameter, Tensor, Var};

/// Score of a hard-forbidden transition.
pub const FORBIDDEN: f64 = -1e9;

/// Transitions at or below this are treated as forbidden when checking a
/// gold path.
const FORBIDDEN_THRESHOLD: f64 = FORBIDDEN / 2.0;

pub const NUM_LABELS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    k: usize,
    scores: Tensor,
    allowed: Vec<bool>,
}

impl TransitionMatrix {
    /// All transitions allowed, all scores zero.
    pub fn unconstrained(k: usize) -> Self {
        let n = k + 2;
        TransitionMatrix {
            k,
            scores: Tensor::zeros(&[n, n]),
            allowed: vec![true; n * n],
        }
    }

    /// BIEO grammar: O→O, O→B, B→I, I→I, I→E, E→O, START→{O,B},
    /// {O,E}→STOP. Allowed entries start at zero, the rest at [`FORBIDDEN`].
    pub fn grammar() -> Self {
        let k = NUM_LABELS;
        let n = k + 2;
        let (start, stop) = (k, k + 1);
        let (o, b, i, e) = (
            Tag::O.index(),
            Tag::B.index(),
            Tag::I.index(),
            Tag::E.index(),
        );
        let pairs = [
            (o, o),
            (o, b),
            (b, i),
            (i, i),
            (i, e),
            (e, o),
            (start, o),
            (start, b),
            (o, stop),
            (e, stop),
        ];
        let mut allowed = vec![false; n * n];
        for (from, to) in pairs {
            allowed[from * n + to] = true;
        }
        Self::from_parts(k, vec![0.0; n * n], allowed).expect("consistent sizes")
    }

    /// Builds a matrix whose forbidden entries are overwritten with
    /// [`FORBIDDEN`].
    pub fn from_parts(k: usize, scores: Vec<f64>, allowed: Vec<bool>) -> Result<Self> {
        let n = k + 2;
        if scores.len() != n * n || allowed.len() != n * n {
            return Err(Error::shape(
                "transition_matrix",
                format!("expected {n}x{n} entries"),
            ));
        }
        let mut scores = Tensor::matrix(n, n, scores)?;
        for (s, a) in scores.data_mut().iter_mut().zip(&allowed) {
            if !a {
                *s = FORBIDDEN;
            }
        }
        Ok(TransitionMatrix { k, scores, allowed })
    }

    pub fn labels(&self) -> usize {
        self.k
    }

    pub fn start(&self) -> usize {
        self.k
    }

    pub fn stop(&self) -> usize {
        self.k + 1
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn scores_mut(&mut self) -> &mut Tensor {
        &mut self.scores
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    /// Trainable parameter whose forbidden entries are frozen.
    pub fn to_parameter(&self, name: &str) -> Parameter {
        Parameter {
            name: name.to_string(),
            tensor: self.scores.clone(),
            trainable: true,
            frozen_entries: Some(self.allowed.iter().map(|a| !a).collect()),
        }
    }
}

/// Best path and its score.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelPath {
    pub labels: Vec<usize>,
    pub score: f64,
}

impl LabelPath {
    pub fn tags(&self) -> Vec<Tag> {
        self.labels
            .iter()
            .map(|&l| Tag::from_index(l).expect("label within K=4"))
            .collect()
    }
}

fn dims(c: &Tensor, a: &Tensor) -> (usize, usize, usize) {
    let t = c.rows();
    let k = c.cols();
    assert_eq!(
        a.shape(),
        &[k + 2, k + 2],
        "transition matrix must be (K+2)x(K+2)"
    );
    (t, k, k + 2)
}

pub fn crf_score(c: &Tensor, y: &[usize], a: &Tensor) -> f64 {
    let (t, k, n) = dims(c, a);
    assert_eq!(y.len(), t, "path length must equal emission rows");
    if t == 0 {
        return a.data()[k * n + k + 1];
    }
    let ad = a.data();
    let mut s = ad[k * n + y[0]] + ad[y[t - 1] * n + k + 1];
    for (i, &l) in y.iter().enumerate() {
        s += c.get(i, l);
        if i + 1 < t {
            s += ad[l * n + y[i + 1]];
        }
    }
    s
}

/// Log-space forward messages: `alpha[t][j]` covers frames `0..=t` ending in `j`.
fn forward(c: &Tensor, a: &Tensor) -> Vec<Vec<f64>> {
    let (t, k, n) = dims(c, a);
    let ad = a.data();
    let mut alpha = Vec::with_capacity(t);
    if t == 0 {
        return alpha;
    }
    alpha.push(
        (0..k)
            .map(|j| ad[k * n + j] + c.get(0, j))
            .collect::<Vec<_>>(),
    );
    let mut buf = vec![0.0; k];
    for step in 1..t {
        let prev = &alpha[step - 1];
        let next: Vec<f64> = (0..k)
            .map(|j| {
                for i in 0..k {
                    buf[i] = prev[i] + ad[i * n + j];
                }
                logsumexp(&buf) + c.get(step, j)
            })
            .collect();
        alpha.push(next);
    }
    alpha
}

/// Log-space backward messages: `beta[t][i]` covers frames after `t` given `y_t = i`.
fn backward(c: &Tensor, a: &Tensor) -> Vec<Vec<f64>> {
    let (t, k, n) = dims(c, a);
    let ad = a.data();
    let mut beta = vec![vec![0.0; k]; t];
    if t == 0 {
        return beta;
    }
    beta[t - 1] = (0..k).map(|i| ad[i * n + k + 1]).collect();
    let mut buf = vec![0.0; k];
    for step in (0..t - 1).rev() {
        for i in 0..k {
            for j in 0..k {
                buf[j] = ad[i * n + j] + c.get(step + 1, j) + beta[step + 1][j];
            }
            beta[step][i] = logsumexp(&buf);
        }
    }
    beta
}

fn log_partition_from(alpha: &[Vec<f64>], a: &Tensor, k: usize) -> f64 {
    let n = k + 2;
    let last = alpha.last().expect("non-empty");
    let terms: Vec<f64> = (0..k).map(|j| last[j] + a.data()[j * n + k + 1]).collect();
    logsumexp(&terms)
}

/// `log Σ_y exp(score(y))` over all `K^T` paths.
pub fn crf_log_partition(c: &Tensor, a: &Tensor) -> f64 {
    let (t, k, n) = dims(c, a);
    if t == 0 {
        return a.data()[k * n + k + 1];
    }
    log_partition_from(&forward(c, a), a, k)
}

/// Rejects gold paths through forbidden transitions: entries flagged in
/// `forbidden` when a mask is given, otherwise scores at or below half of
/// [`FORBIDDEN`].
fn check_gold(y: &[usize], c: &Tensor, a: &Tensor, forbidden: Option<&[bool]>) -> Result<()> {
    let (t, k, n) = dims(c, a);
    if y.len() != t || t == 0 {
        return Err(Error::Data(format!(
            "gold path has {} labels for {t} frames",
            y.len()
        )));
    }
    if let Some(bad) = y.iter().find(|l| **l >= k) {
        return Err(Error::Data(format!("label {bad} outside 0..{k}")));
    }
    let ad = a.data();
    let mut steps = vec![(k, y[0])];
    steps.extend(y.windows(2).map(|w| (w[0], w[1])));
    steps.push((y[t - 1], k + 1));
    let blocked = |i: usize| match forbidden {
        Some(mask) => mask[i],
        None => ad[i] <= FORBIDDEN_THRESHOLD,
    };
    if let Some((from, to)) = steps.into_iter().find(|(f, to)| blocked(f * n + to)) {
        return Err(Error::Data(format!(
            "gold path uses forbidden transition {from}->{to}"
        )));
    }
    Ok(())
}

/// Negative log-likelihood of `y` with gradients with respect to `C` and `A`.
struct NllParts {
    loss: f64,
    d_c: Vec<f64>,
    d_a: Vec<f64>,
}

fn nll_with_gradients(
    c: &Tensor,
    y: &[usize],
    a: &Tensor,
    forbidden: Option<&[bool]>,
) -> Result<NllParts> {
    check_gold(y, c, a, forbidden)?;
    let (t, k, n) = dims(c, a);
    let ad = a.data();
    let alpha = forward(c, a);
    let beta = backward(c, a);
    let log_z = log_partition_from(&alpha, a, k);
    let mut d_c = vec![0.0; t * k];
    let mut d_a = vec![0.0; n * n];
    for step in 0..t {
        for j in 0..k {
            d_c[step * k + j] = (alpha[step][j] + beta[step][j] - log_z).exp();
        }
    }
    for j in 0..k {
        d_a[k * n + j] = d_c[j];
        d_a[j * n + k + 1] = d_c[(t - 1) * k + j];
    }
    for step in 0..t.saturating_sub(1) {
        for i in 0..k {
            for j in 0..k {
                let lp =
                    alpha[step][i] + ad[i * n + j] + c.get(step + 1, j) + beta[step + 1][j] - log_z;
                d_a[i * n + j] += lp.exp();
            }
        }
    }
    for (step, &l) in y.iter().enumerate() {
        d_c[step * k + l] -= 1.0;
        if step + 1 < t {
            d_a[l * n + y[step + 1]] -= 1.0;
        }
    }
    d_a[k * n + y[0]] -= 1.0;
    d_a[y[t - 1] * n + k + 1] -= 1.0;
    Ok(NllParts {
        loss: log_z - crf_score(c, y, a),
        d_c,
        d_a,
    })
}

/// `log Z − score(y)`. Gold paths through forbidden transitions are data errors.
pub fn crf_nll(c: &Tensor, y: &[usize], a: &Tensor) -> Result<f64> {
    check_gold(y, c, a, None)?;
    Ok(crf_log_partition(c, a) - crf_score(c, y, a))
}

struct CrfNllOp {
    d_c: Vec<f64>,
    d_a: Vec<f64>,
}

impl CustomOp for CrfNllOp {
    fn name(&self) -> &'static str {
        "crf_nll"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        let g = grad_out[0];
        vec![
            Some(self.d_c.iter().map(|v| v * g).collect()),
            Some(self.d_a.iter().map(|v| v * g).collect()),
        ]
    }
}

/// Tape node for [`crf_nll`]; gradients are expected minus observed counts.
/// `forbidden` optionally names the hard-masked transition entries.
pub fn crf_nll_node(
    g: &mut Graph,
    emissions: Var,
    transitions: Var,
    gold: &[usize],
    forbidden: Option<&[bool]>,
) -> Result<Var> {
    let parts = nll_with_gradients(g.value(emissions), gold, g.value(transitions), forbidden)?;
    Ok(g.custom(
        &[emissions, transitions],
        Tensor::scalar(parts.loss),
        Box::new(CrfNllOp {
            d_c: parts.d_c,
            d_a: parts.d_a,
        }),
    ))
}

/// Highest-scoring path. Ties go to the lowest label index at every step.
pub fn viterbi_decode(c: &Tensor, a: &Tensor) -> LabelPath {
    let (t, k, n) = dims(c, a);
    if t == 0 {
        return LabelPath {
            labels: Vec::new(),
            score: a.data()[k * n + k + 1],
        };
    }
    let ad = a.data();
    let mut delta: Vec<f64> = (0..k).map(|j| ad[k * n + j] + c.get(0, j)).collect();
    let mut back = vec![vec![0usize; k]; t];
    for (step, bp) in back.iter_mut().enumerate().skip(1) {
        let next: Vec<f64> = (0..k)
            .map(|j| {
                let mut best = 0;
                let mut best_score = delta[0] + ad[j];
                for i in 1..k {
                    let s = delta[i] + ad[i * n + j];
                    if s > best_score {
                        best = i;
                        best_score = s;
                    }
                }
                bp[j] = best;
                best_score + c.get(step, j)
            })
            .collect();
        delta = next;
    }
    let mut last = 0;
    let mut score = delta[0] + ad[k + 1];
    for j in 1..k {
        let s = delta[j] + ad[j * n + k + 1];
        if s > score {
            last = j;
            score = s;
        }
    }
    let mut labels = vec![last; t];
    for step in (1..t).rev() {
        labels[step - 1] = back[step][labels[step]];
    }
    LabelPath { labels, score }
}
