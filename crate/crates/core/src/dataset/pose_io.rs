//! Multi-person pose-estimator output.
//!
//! Schema (JSON): a top-level array with one entry per video frame. Each
//! frame is an array of detected people (possibly empty). Each person is
//!
//! ```json
//! {"keypoints": [[x, y, score], ... 17 entries in COCO order], "score": 0.93}
//! ```
//!
//! `x`/`y` are pixel coordinates, the per-keypoint `score` and the person
//! `score` are confidences in `[0, 1]`. Other fields are ignored.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{Keypoint, PoseCandidate, NUM_JOINTS};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct RawCandidate {
    keypoints: Vec<[f64; 3]>,
    score: f64,
}

pub fn parse_pose_output(text: &str) -> Result<Vec<Vec<PoseCandidate>>> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        frame: 0,
        message: format!("not valid JSON: {e}"),
    })?;
    parse_pose_value(&value)
}

pub fn parse_pose_value(value: &Value) -> Result<Vec<Vec<PoseCandidate>>> {
    let frames = value.as_array().ok_or_else(|| Error::Parse {
        frame: 0,
        message: "top level must be an array of frames".into(),
    })?;
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| parse_frame(i, f))
        .collect()
}

fn parse_frame(frame: usize, value: &Value) -> Result<Vec<PoseCandidate>> {
    let cands = value.as_array().ok_or_else(|| Error::Parse {
        frame,
        message: "frame must be an array of candidates".into(),
    })?;
    cands
        .iter()
        .map(|c| {
            let raw: RawCandidate =
                serde_json::from_value(c.clone()).map_err(|e| Error::Parse {
                    frame,
                    message: e.to_string(),
                })?;
            to_candidate(frame, raw)
        })
        .collect()
}

fn to_candidate(frame: usize, raw: RawCandidate) -> Result<PoseCandidate> {
    let schema = |message: String| Error::Schema { frame, message };
    if raw.keypoints.len() != NUM_JOINTS {
        return Err(schema(format!(
            "expected {NUM_JOINTS} keypoints, got {}",
            raw.keypoints.len()
        )));
    }
    if !(0.0..=1.0).contains(&raw.score) {
        return Err(schema(format!(
            "candidate score {} outside [0, 1]",
            raw.score
        )));
    }
    let mut keypoints = [Keypoint {
        x: 0.0,
        y: 0.0,
        score: 0.0,
    }; NUM_JOINTS];
    for (j, [x, y, s]) in raw.keypoints.into_iter().enumerate() {
        if !x.is_finite() || !y.is_finite() {
            return Err(schema(format!("keypoint {j} has non-finite coordinates")));
        }
        if !(0.0..=1.0).contains(&s) {
            return Err(schema(format!("keypoint {j} score {s} outside [0, 1]")));
        }
        keypoints[j] = Keypoint { x, y, score: s };
    }
    Ok(PoseCandidate {
        keypoints,
        confidence: raw.score,
    })
}

/// Inverse of [`parse_pose_output`].
pub fn write_pose_output(frames: &[Vec<PoseCandidate>]) -> String {
    let raw: Vec<Vec<RawCandidate>> = frames
        .iter()
        .map(|f| {
            f.iter()
                .map(|c| RawCandidate {
                    keypoints: c.keypoints.iter().map(|k| [k.x, k.y, k.score]).collect(),
                    score: c.confidence,
                })
                .collect()
        })
        .collect();
    serde_json::to_string(&raw).expect("pose output serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn candidate_json(n: usize, score: f64, offset: f64) -> String {
        let kps: Vec<String> = (0..n)
            .map(|j| format!("[{}, {}, 0.9]", j as f64 + offset, offset))
            .collect();
        format!("{{\"keypoints\": [{}], \"score\": {score}}}", kps.join(","))
    }

    #[test]
    fn preserves_candidate_order() {
        let text = format!(
            "[[{}, {}]]",
            candidate_json(17, 0.9, 0.0),
            candidate_json(17, 0.4, 5.0)
        );
        let frames = parse_pose_output(&text).unwrap();
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].len(), 2);
        assert_eq!(frames[0][0].confidence, 0.9);
        assert_eq!(frames[0][1].confidence, 0.4);
        assert_eq!(frames[0][1].keypoints[3].x, 8.0);
    }

    #[test]
    fn empty_frame_is_empty_list() {
        let text = format!("[[{}], []]", candidate_json(17, 0.9, 0.0));
        let frames = parse_pose_output(&text).unwrap();
        assert_eq!(frames.len(), 2);
        assert!(frames[1].is_empty());
    }

    #[test]
    fn wrong_keypoint_count_names_frame() {
        let text = format!(
            "[[{}], [{}]]",
            candidate_json(17, 0.9, 0.0),
            candidate_json(16, 0.9, 0.0)
        );
        match parse_pose_output(&text) {
            Err(Error::Schema { frame, .. }) => assert_eq!(frame, 1),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_candidate_names_frame() {
        let text = format!("[[{}], [{{\"score\": 0.5}}]]", candidate_json(17, 0.9, 0.0));
        match parse_pose_output(&text) {
            Err(Error::Parse { frame, .. }) => assert_eq!(frame, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(parse_pose_output("[[{"), Err(Error::Parse { .. })));
    }

    #[test]
    fn write_then_parse_is_identity() {
        let text = format!(
            "[[{}, {}], []]",
            candidate_json(17, 0.9, 0.25),
            candidate_json(17, 0.1, 3.0)
        );
        let frames = parse_pose_output(&text).unwrap();
        assert_eq!(
            parse_pose_output(&write_pose_output(&frames)).unwrap(),
            frames
        );
    }
}
