//! Frame accuracy, macro F1, span matching with mean error percentage, and
//! edit distance.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{tags_to_intervals, tags_to_string, FlightSpan, Tag};
use crate::error::{Error, Result};

fn check_lengths(pred: &[Tag], gold: &[Tag]) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(Error::Data(format!(
            "prediction has {} frames, gold has {}",
            pred.len(),
            gold.len()
        )));
    }
    Ok(())
}

/// Percentage of frames whose labels agree.
pub fn frame_accuracy(pred: &[Tag], gold: &[Tag]) -> Result<f64> {
    check_lengths(pred, gold)?;
    if gold.is_empty() {
        return Ok(100.0);
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(100.0 * hits as f64 / gold.len() as f64)
}

/// Label confusion counts, `counts[gold][pred]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: [[usize; 4]; 4],
}

impl Confusion {
    pub fn add(&mut self, pred: &[Tag], gold: &[Tag]) -> Result<()> {
        check_lengths(pred, gold)?;
        for (p, g) in pred.iter().zip(gold) {
            self.counts[g.index()][p.index()] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> usize {
        (0..4).map(|i| self.counts[i][i]).sum()
    }

    /// Per-label F1, `None` for labels absent from both prediction and gold.
    pub fn f1_per_label(&self) -> [Option<f64>; 4] {
        let mut out = [None; 4];
        for (l, slot) in out.iter_mut().enumerate() {
            let tp = self.counts[l][l] as f64;
            let gold: usize = self.counts[l].iter().sum();
            let pred: usize = (0..4).map(|g| self.counts[g][l]).sum();
            if gold == 0 && pred == 0 {
                continue;
            }
            // F1 = 2TP / (2TP + FP + FN) = 2TP / (pred + gold)
            *slot = Some(2.0 * tp / (pred + gold) as f64);
        }
        out
    }

    /// Unweighted mean of the defined per-label F1 scores.
    pub fn macro_f1(&self) -> f64 {
        let present: Vec<f64> = self.f1_per_label().into_iter().flatten().collect();
        if present.is_empty() {
            return 1.0;
        }
        present.iter().sum::<f64>() / present.len() as f64
    }
}

pub fn macro_f1(pred: &[Tag], gold: &[Tag]) -> Result<f64> {
    let mut c = Confusion::default();
    c.add(pred, gold)?;
    Ok(c.macro_f1())
}

/// Inclusive frame overlap of two spans.
pub fn overlap(a: &FlightSpan, b: &FlightSpan) -> usize {
    a.overlap(b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanMatch {
    pub prediction: FlightSpan,
    pub gold: Option<FlightSpan>,
    pub overlap: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpanMatching {
    /// One entry per prediction, in prediction order.
    pub matches: Vec<SpanMatch>,
    pub unmatched_gold: Vec<FlightSpan>,
}

impl SpanMatching {
    pub fn matched(&self) -> impl Iterator<Item = (&FlightSpan, &FlightSpan)> {
        self.matches
            .iter()
            .filter_map(|m| m.gold.as_ref().map(|g| (&m.prediction, g)))
    }
}

/// One-to-one matching, greedy by overlap size. Ties go to the earlier gold
/// span, then the earlier prediction. Pairs need at least one shared frame.
pub fn match_spans(pred: &[FlightSpan], gold: &[FlightSpan]) -> SpanMatching {
    let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
    for (pi, p) in pred.iter().enumerate() {
        for (gi, g) in gold.iter().enumerate() {
            let o = p.overlap(g);
            if o > 0 {
                pairs.push((o, gi, pi));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_to: Vec<Option<(usize, usize)>> = vec![None; pred.len()];
    let mut gold_used = vec![false; gold.len()];
    for (o, gi, pi) in pairs {
        if pred_to[pi].is_none() && !gold_used[gi] {
            pred_to[pi] = Some((gi, o));
            gold_used[gi] = true;
        }
    }
    SpanMatching {
        matches: pred
            .iter()
            .zip(pred_to)
            .map(|(p, m)| SpanMatch {
                prediction: *p,
                gold: m.map(|(gi, _)| gold[gi]),
                overlap: m.map_or(0, |(_, o)| o),
            })
            .collect(),
        unmatched_gold: gold
            .iter()
            .zip(gold_used)
            .filter(|(_, u)| !u)
            .map(|(g, _)| *g)
            .collect(),
    }
}

/// Per-match relative error `|I_pred − I_gold| / I_gold × 100`, where `I` is
/// the I-frame count `end − start − 1` (span length minus take-off and
/// landing frames).
pub fn match_errors(matches: &[SpanMatch]) -> Vec<f64> {
    matches
        .iter()
        .filter_map(|m| {
            m.gold.map(|g| {
                let (p, a) = (m.prediction.i_frames() as f64, g.i_frames() as f64);
                (p - a).abs() / a * 100.0
            })
        })
        .collect()
}

/// Mean over overlapping predictions; `None` when nothing overlaps.
pub fn mean_error_percentage(matches: &[SpanMatch]) -> Option<f64> {
    let errs = match_errors(matches);
    (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Levenshtein distance with unit costs.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn tag_edit_distance(pred: &[Tag], gold: &[Tag]) -> Result<usize> {
    check_lengths(pred, gold)?;
    Ok(edit_distance(&tags_to_string(pred), &tags_to_string(gold)))
}

/// Mean per-video edit distance.
pub fn avg_edit_distance(videos: &[(Vec<Tag>, Vec<Tag>)]) -> Result<f64> {
    if videos.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0;
    for (p, g) in videos {
        total += tag_edit_distance(p, g)?;
    }
    Ok(total as f64 / videos.len() as f64)
}

/// One evaluated video.
#[derive(Debug, Clone)]
pub struct VideoPrediction {
    pub video_id: String,
    pub category: String,
    pub predicted: Vec<Tag>,
    pub gold: Vec<Tag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub video_id: String,
    pub category: String,
    pub frames: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub edit_distance: usize,
    pub predicted_spans: Vec<FlightSpan>,
    pub gold_spans: Vec<FlightSpan>,
    pub matches: Vec<SpanMatch>,
    pub mean_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Frame-weighted accuracy over all videos (%).
    pub accuracy: f64,
    /// Mean of the per-video accuracies (%).
    pub video_mean_accuracy: f64,
    pub macro_f1: f64,
    pub per_label_f1: [Option<f64>; 4],
    pub mean_error: Option<f64>,
    pub edit_distance: f64,
    /// Predictions that overlap a gold span (the denominator of `mean_error`).
    pub overlapping: usize,
    pub predictions: usize,
    pub gold_spans: usize,
    pub videos: usize,
    pub frames: usize,
    pub per_video: Vec<VideoMetrics>,
}

/// Computes every metric; macro F1 uses the confusion pooled over all frames.
pub fn evaluate(videos: &[VideoPrediction]) -> Result<MetricsReport> {
    let mut confusion = Confusion::default();
    let mut per_video = Vec::with_capacity(videos.len());
    let mut all_errors = Vec::new();
    let (mut predictions, mut gold_spans, mut edit_total) = (0, 0, 0usize);
    for v in videos {
        confusion.add(&v.predicted, &v.gold)?;
        let p = tags_to_intervals(&v.predicted);
        let g = tags_to_intervals(&v.gold);
        let matching = match_spans(&p, &g);
        let errs = match_errors(&matching.matches);
        all_errors.extend(&errs);
        predictions += p.len();
        gold_spans += g.len();
        let ed = tag_edit_distance(&v.predicted, &v.gold)?;
        edit_total += ed;
        per_video.push(VideoMetrics {
            video_id: v.video_id.clone(),
            category: v.category.clone(),
            frames: v.gold.len(),
            accuracy: frame_accuracy(&v.predicted, &v.gold)?,
            macro_f1: macro_f1(&v.predicted, &v.gold)?,
            edit_distance: ed,
            predicted_spans: p,
            gold_spans: g,
            mean_error: mean_error_percentage(&matching.matches),
            matches: matching.matches,
        });
    }
    let n = videos.len().max(1) as f64;
    let frames = confusion.total();
    Ok(MetricsReport {
        accuracy: if frames == 0 {
            100.0
        } else {
            100.0 * confusion.correct() as f64 / frames as f64
        },
        video_mean_accuracy: per_video.iter().map(|v| v.accuracy).sum::<f64>() / n,
        macro_f1: confusion.macro_f1(),
        per_label_f1: confusion.f1_per_label(),
        mean_error: (!all_errors.is_empty())
            .then(|| all_errors.iter().sum::<f64>() / all_errors.len() as f64),
        edit_distance: edit_total as f64 / n,
        overlapping: all_errors.len(),
        predictions,
        gold_spans,
        videos: videos.len(),
        frames,
        per_video,
    })
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.digits$}"))
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned text table of the headline metrics.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let rows = [
            ("Accuracy (%)", format!("{:.2}", self.accuracy)),
            ("Macro F1", format!("{:.3}", self.macro_f1)),
            ("Mean error (%)", fmt_opt(self.mean_error, 2)),
            ("Edit distance", format!("{:.3}", self.edit_distance)),
            (
                "Overlapping (N)",
                format!("{} / {}", self.overlapping, self.predictions),
            ),
            ("Videos", self.videos.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<16} {v:>12}");
        }
        s
    }
}

/// Rows × columns table of one metric, e.g. checkpoints × test sets.
pub fn grid_table(
    row_names: &[String],
    col_names: &[String],
    cells: &[Vec<Option<f64>>],
    digits: usize,
) -> String {
    let w0 = row_names.iter().map(String::len).max().unwrap_or(0).max(5);
    let wc = col_names.iter().map(String::len).max().unwrap_or(0).max(8);
    let mut s = format!("{:<w0$}", "");
    for c in col_names {
        let _ = write!(s, " {c:>wc$}");
    }
    s.push('\n');
    for (r, row) in row_names.iter().zip(cells) {
        let _ = write!(s, "{r:<w0$}");
        for v in row {
            let _ = write!(s, " {:>wc$}", fmt_opt(*v, digits));
        }
        s.push('\n');
    }
    s
}
