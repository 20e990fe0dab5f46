use crate::dataset::{FlightSpan, PoseSequence, VideoRecord};
use crate::error::{Error, Result};

/// Frames of context kept before the first take-off and after the last landing.
pub const MIN_CONTEXT: usize = 30;

pub const DEFAULT_AUGMENT_STRIDE: usize = 5;

fn offsets(available: usize, stride: usize) -> impl Iterator<Item = usize> {
    let max = available.saturating_sub(MIN_CONTEXT);
    (0..=max).step_by(stride)
}

/// Trimmed copies of `record`: every combination of left trim in
/// `{0, stride, …} ≤ first.start − 30` and right trim in
/// `{0, stride, …} ≤ T − 1 − last.end − 30`. Sides with less than 30 frames of
/// context are left untouched.
pub fn augment(record: &VideoRecord, stride: usize) -> Result<Vec<VideoRecord>> {
    if stride == 0 {
        return Err(Error::Config("augmentation stride must be positive".into()));
    }
    let (Some(first), Some(last)) = (record.flights.first(), record.flights.last()) else {
        return Err(Error::Data(format!(
            "{}: augmentation needs at least one flight",
            record.video_id
        )));
    };
    let t = record.len();
    let right_available = t - 1 - last.end;
    let mut out = Vec::new();
    for left in offsets(first.start, stride) {
        for right in offsets(right_available, stride) {
            let frames = record.pose.frames[left..t - right].to_vec();
            let flights = record
                .flights
                .iter()
                .map(|f| FlightSpan::new(f.start - left, f.end - left))
                .collect();
            let id = format!("{}.l{left}r{right}", record.video_id);
            let pose = PoseSequence::new(id, record.fps(), frames)?;
            out.push(VideoRecord::new(record.category.clone(), pose, flights)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Pose, Tag, NUM_JOINTS};

    fn record(t: usize, flights: &[(usize, usize)]) -> VideoRecord {
        let frames: Vec<Pose> = (0..t).map(|i| [[i as f64, 0.0]; NUM_JOINTS]).collect();
        let pose = PoseSequence::new("vid", 30.0, frames).unwrap();
        VideoRecord::new(
            "x",
            pose,
            flights
                .iter()
                .map(|(s, e)| FlightSpan::new(*s, *e))
                .collect(),
        )
        .unwrap()
    }

    /// Context on both sides and tag alignment, checked by scanning the tags.
    fn check_variant(orig: &VideoRecord, v: &VideoRecord) {
        let orig_tags = orig.tags();
        let left = v.pose.frames[0][0][0] as usize;
        assert_eq!(&orig_tags[left..left + v.len()], &v.tags()[..]);
        let tags = v.tags();
        let first_b = tags.iter().position(|t| *t == Tag::B).unwrap();
        let last_e = tags.iter().rposition(|t| *t == Tag::E).unwrap();
        let orig_first = orig.flights[0].start;
        let orig_after = orig.len() - 1 - orig.flights.last().unwrap().end;
        assert!(first_b >= MIN_CONTEXT.min(orig_first));
        assert!(tags.len() - 1 - last_e >= MIN_CONTEXT.min(orig_after));
    }

    #[test]
    fn counts_for_long_video() {
        let r = record(200, &[(100, 110)]);
        let v = augment(&r, 5).unwrap();
        assert_eq!(v.len(), 15 * 12);
        v.iter().for_each(|x| check_variant(&r, x));
        let max_left = v
            .iter()
            .map(|x| x.pose.frames[0][0][0] as usize)
            .max()
            .unwrap();
        assert_eq!(max_left, 70);
    }

    #[test]
    fn short_left_context_is_not_trimmed() {
        let r = record(120, &[(31, 40)]);
        let v = augment(&r, 5).unwrap();
        assert!(v.iter().all(|x| x.flights[0] == FlightSpan::new(31, 40)));
        // right side: 79 frames after landing -> offsets 0..=49 step 5
        assert_eq!(v.len(), 10);
        v.iter().for_each(|x| check_variant(&r, x));
    }

    #[test]
    fn multi_flight_and_tight_context() {
        let r = record(90, &[(10, 20), (40, 50), (70, 80)]);
        let v = augment(&r, 3).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].flights, r.flights);
    }

    #[test]
    fn requires_a_flight() {
        assert!(augment(&record(50, &[]), 5).is_err());
        assert!(augment(&record(50, &[(5, 9)]), 0).is_err());
    }
}
