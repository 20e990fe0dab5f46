use crate::dataset::{validate_spans, FlightSpan, Tag, TagSequence};
use crate::error::{Error, Result};

/// `true` when `tags` follows O→B→I→E→O: starts in {O, B}, ends in {O, E},
/// and every adjacent pair is one of OO, OB, BI, II, IE, EO.
pub fn is_grammatical(tags: &[Tag]) -> bool {
    use Tag::*;
    let Some(first) = tags.first() else {
        return true;
    };
    if !matches!(first, O | B) {
        return false;
    }
    if !matches!(tags[tags.len() - 1], O | E) {
        return false;
    }
    tags.windows(2).all(|w| {
        matches!(
            (w[0], w[1]),
            (O, O) | (O, B) | (B, I) | (I, I) | (I, E) | (E, O)
        )
    })
}

pub fn intervals_to_tags(flights: &[FlightSpan], len: usize) -> Result<TagSequence> {
    validate_spans(flights, Some(len))?;
    let mut tags = vec![Tag::O; len];
    for f in flights {
        tags[f.start] = Tag::B;
        tags[f.start + 1..f.end]
            .iter_mut()
            .for_each(|t| *t = Tag::I);
        tags[f.end] = Tag::E;
    }
    TagSequence::new(tags)
}

/// Every maximal run of non-O tags becomes one span, whatever the tags
/// inside it are.
pub fn tags_to_intervals(tags: &[Tag]) -> Vec<FlightSpan> {
    let mut out = Vec::new();
    let mut run_start = None;
    for (i, t) in tags.iter().enumerate() {
        match (t, run_start) {
            (Tag::O, Some(s)) => {
                out.push(FlightSpan::new(s, i - 1));
                run_start = None;
            }
            (Tag::O, None) => {}
            (_, None) => run_start = Some(i),
            (_, Some(_)) => {}
        }
    }
    if let Some(s) = run_start {
        out.push(FlightSpan::new(s, tags.len() - 1));
    }
    out
}

/// Number of I tags inside each span.
pub fn i_count(tags: &[Tag]) -> Vec<usize> {
    tags_to_intervals(tags)
        .iter()
        .map(|s| {
            tags[s.start..=s.end]
                .iter()
                .filter(|t| **t == Tag::I)
                .count()
        })
        .collect()
}

/// Air time in seconds for each flight: I-tag count divided by fps.
pub fn air_time(tags: &[Tag], fps: f64) -> Result<Vec<f64>> {
    if !(fps > 0.0) {
        return Err(Error::Data(format!("fps must be positive, got {fps}")));
    }
    Ok(i_count(tags).into_iter().map(|n| n as f64 / fps).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::parse_tags;
    use proptest::prelude::*;

    fn spans(v: &[(usize, usize)]) -> Vec<FlightSpan> {
        v.iter().map(|(s, e)| FlightSpan::new(*s, *e)).collect()
    }

    #[test]
    fn single_flight_layout() {
        let t = intervals_to_tags(&spans(&[(31, 40)]), 200).unwrap();
        for (i, tag) in t.iter().enumerate() {
            let want = match i {
                31 => Tag::B,
                32..=39 => Tag::I,
                40 => Tag::E,
                _ => Tag::O,
            };
            assert_eq!(*tag, want, "frame {i}");
        }
        assert_eq!(tags_to_intervals(&t), spans(&[(31, 40)]));
    }

    #[test]
    fn empty_and_two_flights() {
        let t = intervals_to_tags(&[], 50).unwrap();
        assert!(t.iter().all(|t| *t == Tag::O));
        assert!(tags_to_intervals(&t).is_empty());

        let t = intervals_to_tags(&spans(&[(5, 8), (20, 23)]), 30).unwrap();
        let expected = format!(
            "{}BIIE{}BIIE{}",
            "O".repeat(5),
            "O".repeat(11),
            "O".repeat(6)
        );
        assert_eq!(crate::dataset::tags_to_string(&t), expected);
    }

    #[test]
    fn rejects_bad_spans() {
        assert!(matches!(
            intervals_to_tags(&spans(&[(5, 6)]), 30),
            Err(Error::InvalidSpan(_))
        ));
        assert!(matches!(
            intervals_to_tags(&spans(&[(5, 9), (9, 12)]), 30),
            Err(Error::InvalidSpan(_))
        ));
    }

    #[test]
    fn ill_formed_run_is_one_span() {
        let t = parse_tags("OIIO").unwrap();
        assert_eq!(tags_to_intervals(&t), spans(&[(1, 2)]));
        // brute-force run scan
        let t = parse_tags("IEOBBOOIIIB").unwrap();
        assert_eq!(tags_to_intervals(&t), spans(&[(0, 1), (3, 4), (7, 10)]));
    }

    #[test]
    fn table_one_air_time() {
        let t = intervals_to_tags(&spans(&[(31, 40)]), 200).unwrap();
        let a = air_time(&t, 30.0).unwrap();
        assert_eq!(a.len(), 1);
        assert!((a[0] - 8.0 / 30.0).abs() < 1e-15);
        assert!((a[0] - 0.2667).abs() < 5e-5);

        let t = intervals_to_tags(&spans(&[(5, 8)]), 20).unwrap();
        assert!((air_time(&t, 30.0).unwrap()[0] - 0.0667).abs() < 5e-5);
        assert!(air_time(&[Tag::O; 10], 30.0).unwrap().is_empty());
        assert!(air_time(&[Tag::O; 10], 0.0).is_err());
    }

    #[test]
    fn grammar_checks() {
        for ok in ["", "O", "B IE", "OBIIEO", "BIEOBIE"] {
            assert!(is_grammatical(&parse_tags(ok).unwrap()), "{ok}");
        }
        for bad in ["I", "E", "OB", "OBEO", "OBIEBIE", "OBIO", "OIEO"] {
            assert!(!is_grammatical(&parse_tags(bad).unwrap()), "{bad}");
        }
    }

    /// Random valid span sets: (len, spans).
    pub(crate) fn arb_spans() -> impl Strategy<Value = (usize, Vec<FlightSpan>)> {
        (
            1usize..120,
            prop::collection::vec((1usize..6, 1usize..8), 0..5),
        )
            .prop_map(|(tail, parts)| {
                // the first flight may start at frame 0
                let mut pos = 0;
                let mut first = true;
                let mut out = Vec::new();
                for (gap, inner) in parts {
                    let start = if first { gap - 1 } else { pos + gap + 1 };
                    first = false;
                    let end = start + inner + 1;
                    out.push(FlightSpan::new(start, end));
                    pos = end;
                }
                (if out.is_empty() { tail } else { pos + tail }, out)
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn spans_round_trip((len, f) in arb_spans()) {
            let t = intervals_to_tags(&f, len).unwrap();
            prop_assert_eq!(tags_to_intervals(&t), f);
        }

        #[test]
        fn tags_round_trip((len, f) in arb_spans()) {
            let t = intervals_to_tags(&f, len).unwrap();
            let back = intervals_to_tags(&tags_to_intervals(&t), t.len()).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn air_time_matches_span_arithmetic((len, f) in arb_spans(), fps in 1.0f64..120.0) {
            let t = intervals_to_tags(&f, len).unwrap();
            let a = air_time(&t, fps).unwrap();
            prop_assert_eq!(a.len(), f.len());
            for (secs, s) in a.iter().zip(&f) {
                prop_assert_eq!(*secs, (s.end - s.start - 1) as f64 / fps);
            }
        }
    }
}
