use crate::dataset::{Pose, PoseCandidate, PoseSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrackedSequence {
    pub sequence: PoseSequence,
    /// `true` where the frame had no candidates and the previous pose was reused.
    pub held: Vec<bool>,
    /// Index of the chosen candidate per frame (`None` when held).
    pub chosen: Vec<Option<usize>>,
}

fn distance(a: &Pose, b: &Pose) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Follows one skater through multi-person detections.
///
/// Frame 0 takes the most confident candidate; each later frame takes the
/// candidate nearest (Euclidean over all joint coordinates) to the previous
/// tracked pose. Ties go to the earlier candidate.
pub fn track_skater(
    frames: &[Vec<PoseCandidate>],
    video_id: &str,
    fps: f64,
) -> Result<TrackedSequence> {
    let first = frames.first().filter(|f| !f.is_empty()).ok_or_else(|| {
        Error::Tracking(format!("{video_id}: first frame has no pose candidates"))
    })?;
    let mut best = 0;
    for (i, c) in first.iter().enumerate() {
        if c.confidence > first[best].confidence {
            best = i;
        }
    }
    let mut poses = vec![first[best].coords()];
    let mut held = vec![false];
    let mut chosen = vec![Some(best)];
    for frame in &frames[1..] {
        let prev = *poses.last().expect("non-empty");
        let nearest = frame
            .iter()
            .map(|c| distance(&prev, &c.coords()))
            .enumerate()
            .fold(None, |acc: Option<(usize, f64)>, (i, d)| match acc {
                Some((_, bd)) if bd <= d => acc,
                _ => Some((i, d)),
            });
        match nearest {
            Some((i, _)) => {
                poses.push(frame[i].coords());
                held.push(false);
                chosen.push(Some(i));
            }
            None => {
                poses.push(prev);
                held.push(true);
                chosen.push(None);
            }
        }
    }
    Ok(TrackedSequence {
        sequence: PoseSequence::new(video_id, fps, poses)?,
        held,
        chosen,
    })
}
