//! Data model, pose-estimator ingestion, skater tracking, BIEO codec,
//! augmentation and the synthetic jump generator.

mod augment;
mod normalize;
mod pose_io;
pub mod synth;
mod tags;
mod tracking;

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment, DEFAULT_AUGMENT_STRIDE, MIN_CONTEXT};
pub use normalize::{normalize_pose, scale_sequence, torso_length, translate_sequence};
pub use pose_io::{parse_pose_output, parse_pose_value, write_pose_output};
pub use synth::{generate_synthetic, SynthConfig};
pub use tags::{air_time, i_count, intervals_to_tags, is_grammatical, tags_to_intervals};
pub use tracking::{track_skater, TrackedSequence};

pub const NUM_JOINTS: usize = 17;

/// COCO keypoint order.
pub mod joints {
    pub const NOSE: usize = 0;
    pub const LEFT_EYE: usize = 1;
    pub const RIGHT_EYE: usize = 2;
    pub const LEFT_EAR: usize = 3;
    pub const RIGHT_EAR: usize = 4;
    pub const LEFT_SHOULDER: usize = 5;
    pub const RIGHT_SHOULDER: usize = 6;
    pub const LEFT_ELBOW: usize = 7;
    pub const RIGHT_ELBOW: usize = 8;
    pub const LEFT_WRIST: usize = 9;
    pub const RIGHT_WRIST: usize = 10;
    pub const LEFT_HIP: usize = 11;
    pub const RIGHT_HIP: usize = 12;
    pub const LEFT_KNEE: usize = 13;
    pub const RIGHT_KNEE: usize = 14;
    pub const LEFT_ANKLE: usize = 15;
    pub const RIGHT_ANKLE: usize = 16;

    pub const NAMES: [&str; super::NUM_JOINTS] = [
        "nose",
        "left_eye",
        "right_eye",
        "left_ear",
        "right_ear",
        "left_shoulder",
        "right_shoulder",
        "left_elbow",
        "right_elbow",
        "left_wrist",
        "right_wrist",
        "left_hip",
        "right_hip",
        "left_knee",
        "right_knee",
        "left_ankle",
        "right_ankle",
    ];
}

/// One frame of the tracked skater: `[x, y]` pixels per COCO joint.
pub type Pose = [[f64; 2]; NUM_JOINTS];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// One detected person in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseCandidate {
    pub keypoints: [Keypoint; NUM_JOINTS],
    pub confidence: f64,
}

impl PoseCandidate {
    pub fn coords(&self) -> Pose {
        let mut p = [[0.0; 2]; NUM_JOINTS];
        for (dst, k) in p.iter_mut().zip(&self.keypoints) {
            *dst = [k.x, k.y];
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    pub video_id: String,
    pub fps: f64,
    pub frames: Vec<Pose>,
}

impl PoseSequence {
    pub fn new(video_id: impl Into<String>, fps: f64, frames: Vec<Pose>) -> Result<Self> {
        let video_id = video_id.into();
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::Data(format!(
                "{video_id}: fps must be positive, got {fps}"
            )));
        }
        if frames.is_empty() {
            return Err(Error::Data(format!("{video_id}: empty pose sequence")));
        }
        if frames.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("{video_id}: non-finite coordinate")));
        }
        Ok(PoseSequence {
            video_id,
            fps,
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Take-off (B) to landing (E) frame interval, inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FlightSpan {
    pub start: usize,
    pub end: usize,
}

impl FlightSpan {
    pub fn new(start: usize, end: usize) -> Self {
        FlightSpan { start, end }
    }

    /// Number of in-air (I) frames.
    pub fn i_frames(&self) -> usize {
        self.end.saturating_sub(self.start).saturating_sub(1)
    }

    pub fn overlap(&self, other: &FlightSpan) -> usize {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        if hi >= lo {
            hi - lo + 1
        } else {
            0
        }
    }
}

impl fmt::Display for FlightSpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.start, self.end)
    }
}

/// Checks span invariants: `end ≥ start + 2`, sorted, separated by at least
/// one O frame (the grammar has no E→B transition), and
/// (when `len` is given) every index inside the sequence.
pub fn validate_spans(spans: &[FlightSpan], len: Option<usize>) -> Result<()> {
    for (i, s) in spans.iter().enumerate() {
        if s.end < s.start + 2 {
            return Err(Error::InvalidSpan(format!(
                "{s}: a flight needs at least one in-air frame (end >= start + 2)"
            )));
        }
        if let Some(t) = len {
            if s.end >= t {
                return Err(Error::InvalidSpan(format!(
                    "{s} exceeds sequence length {t}"
                )));
            }
        }
        if i > 0 && spans[i - 1].end + 1 >= s.start {
            return Err(Error::InvalidSpan(format!(
                "{} and {s} overlap, touch, or are out of order",
                spans[i - 1]
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Tag {
    O = 0,
    B = 1,
    I = 2,
    E = 3,
}

impl Tag {
    pub const ALL: [Tag; 4] = [Tag::O, Tag::B, Tag::I, Tag::E];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Tag> {
        Tag::ALL.get(i).copied()
    }

    pub fn as_char(self) -> char {
        match self {
            Tag::O => 'O',
            Tag::B => 'B',
            Tag::I => 'I',
            Tag::E => 'E',
        }
    }

    pub fn from_char(c: char) -> Option<Tag> {
        match c {
            'O' => Some(Tag::O),
            'B' => Some(Tag::B),
            'I' => Some(Tag::I),
            'E' => Some(Tag::E),
            _ => None,
        }
    }
}

/// Parses a compact label string such as `"OOBIIEO"`.
pub fn parse_tags(s: &str) -> Result<Vec<Tag>> {
    s.chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| Tag::from_char(c).ok_or_else(|| Error::Data(format!("unknown tag {c:?}"))))
        .collect()
}

pub fn tags_to_string(tags: &[Tag]) -> String {
    tags.iter().map(|t| t.as_char()).collect()
}

/// A label sequence known to satisfy the O→B→I→E→O grammar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagSequence(Vec<Tag>);

impl TagSequence {
    pub fn new(tags: Vec<Tag>) -> Result<Self> {
        if !is_grammatical(&tags) {
            return Err(Error::Data(format!(
                "tag sequence violates the O->B->I->E->O grammar: {}",
                tags_to_string(&tags)
            )));
        }
        Ok(TagSequence(tags))
    }

    pub fn into_inner(self) -> Vec<Tag> {
        self.0
    }
}

impl std::ops::Deref for TagSequence {
    type Target = [Tag];

    fn deref(&self) -> &[Tag] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub category: String,
    pub pose: PoseSequence,
    pub flights: Vec<FlightSpan>,
}

impl VideoRecord {
    pub fn new(
        category: impl Into<String>,
        pose: PoseSequence,
        flights: Vec<FlightSpan>,
    ) -> Result<Self> {
        validate_spans(&flights, Some(pose.len()))
            .map_err(|e| Error::Data(format!("{}: {e}", pose.video_id)))?;
        Ok(VideoRecord {
            video_id: pose.video_id.clone(),
            category: category.into(),
            pose,
            flights,
        })
    }

    pub fn len(&self) -> usize {
        self.pose.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pose.is_empty()
    }

    pub fn fps(&self) -> f64 {
        self.pose.fps
    }

    pub fn tags(&self) -> TagSequence {
        intervals_to_tags(&self.flights, self.len()).expect("record spans are validated")
    }
}

#[derive(Serialize, Deserialize)]
struct RecordJson {
    video_id: String,
    category: String,
    fps: Option<f64>,
    frames: Vec<Pose>,
    #[serde(default)]
    flights: Vec<FlightSpan>,
}

impl VideoRecord {
    pub fn to_json_line(&self) -> String {
        let j = RecordJson {
            video_id: self.video_id.clone(),
            category: self.category.clone(),
            fps: Some(self.pose.fps),
            frames: self.pose.frames.clone(),
            flights: self.flights.clone(),
        };
        serde_json::to_string(&j).expect("records serialize")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let j: RecordJson = serde_json::from_str(line)?;
        let fps = j
            .fps
            .ok_or_else(|| Error::Data(format!("{}: missing fps metadata", j.video_id)))?;
        let pose = PoseSequence::new(j.video_id, fps, j.frames)?;
        VideoRecord::new(j.category, pose, j.flights)
    }
}

/// Reads a JSON Lines dataset; blank lines are skipped.
pub fn read_dataset(path: &Path) -> Result<Vec<VideoRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            VideoRecord::from_json_line(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, records: &[VideoRecord]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for r in records {
        writeln!(w, "{}", r.to_json_line()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose_at(x: f64) -> Pose {
        [[x, 1.0]; NUM_JOINTS]
    }

    #[test]
    fn span_validation() {
        assert!(validate_spans(&[FlightSpan::new(3, 5)], Some(10)).is_ok());
        assert!(validate_spans(&[FlightSpan::new(3, 4)], Some(10)).is_err());
        assert!(validate_spans(&[FlightSpan::new(3, 10)], Some(10)).is_err());
        assert!(validate_spans(&[FlightSpan::new(3, 6), FlightSpan::new(6, 9)], None).is_err());
        assert!(validate_spans(&[FlightSpan::new(3, 6), FlightSpan::new(7, 9)], None).is_err());
        assert!(validate_spans(&[FlightSpan::new(3, 6), FlightSpan::new(8, 10)], None).is_ok());
        assert!(validate_spans(&[FlightSpan::new(8, 12), FlightSpan::new(1, 4)], None).is_err());
    }

    #[test]
    fn overlap_arithmetic() {
        let gold = FlightSpan::new(31, 40);
        assert_eq!(FlightSpan::new(35, 45).overlap(&gold), 6);
        assert_eq!(gold.overlap(&gold), 10);
        assert_eq!(FlightSpan::new(50, 55).overlap(&gold), 0);
    }

    #[test]
    fn record_json_round_trip() {
        let seq = PoseSequence::new("001", 30.0, vec![pose_at(0.5); 12]).unwrap();
        let rec = VideoRecord::new("Axel", seq, vec![FlightSpan::new(2, 6)]).unwrap();
        let line = rec.to_json_line();
        assert!(line
            .starts_with("{\"video_id\":\"001\",\"category\":\"Axel\",\"fps\":30.0,\"frames\":"));
        assert_eq!(VideoRecord::from_json_line(&line).unwrap(), rec);
    }

    #[test]
    fn record_requires_fps() {
        let line = r#"{"video_id":"a","category":"x","frames":[]}"#;
        let err = VideoRecord::from_json_line(line).unwrap_err().to_string();
        assert!(err.contains("fps"), "{err}");
    }

    #[test]
    fn record_rejects_out_of_range_flight() {
        let seq = PoseSequence::new("v", 30.0, vec![pose_at(0.0); 5]).unwrap();
        assert!(VideoRecord::new("x", seq, vec![FlightSpan::new(2, 5)]).is_err());
    }

    #[test]
    fn tag_string_codec() {
        let t = parse_tags("OOBIE").unwrap();
        assert_eq!(t, vec![Tag::O, Tag::O, Tag::B, Tag::I, Tag::E]);
        assert_eq!(tags_to_string(&t), "OOBIE");
        assert!(parse_tags("OX").is_err());
        assert!(TagSequence::new(parse_tags("OBEO").unwrap()).is_err());
    }
}
