use super::{ClassMap, FrameGrid, IptEvent};
use crate::{Error, Result};

/// Slack allowed when checking that an event fits inside the grid span.
const TIME_EPS: f64 = 1e-9;

fn frame_center(t: usize, frame_rate: f64) -> f64 {
    (t as f64 + 0.5) / frame_rate
}

/// Frames whose centre lies in `[onset, offset)`.
pub(crate) fn covered_frames(onset: f64, offset: f64, n_frames: usize, fr: f64) -> std::ops::Range<usize> {
    let lo_guess = ((onset * fr - 0.5).floor().max(0.0) as usize).min(n_frames);
    let mut lo = lo_guess.saturating_sub(1);
    while lo < n_frames && frame_center(lo, fr) < onset {
        lo += 1;
    }
    let mut hi = lo;
    while hi < n_frames && frame_center(hi, fr) < offset {
        hi += 1;
    }
    lo..hi
}

/// Turns events into per-frame targets.
///
/// A frame is active for class `c` when its centre lies in `[onset, offset)`
/// of an event labelled `c`; pitch bins follow the same rule. The onset target
/// is set on the first active frame of each event, so every onset frame also
/// carries its class. Events too short to cover a frame centre leave no trace.
pub fn rasterize(events: &[IptEvent], n_frames: usize, class_map: &ClassMap) -> Result<FrameGrid> {
    if n_frames == 0 {
        return Err(Error::Range("rasterize needs at least one frame".into()));
    }
    let fr = class_map.frame_rate;
    let span = n_frames as f64 / fr;
    let mut grid = FrameGrid::zeros(n_frames, class_map.n_ipt(), class_map.n_pitch(), fr);
    for ev in events {
        if ev.onset < 0.0 || ev.offset > span + TIME_EPS || ev.offset <= ev.onset {
            return Err(Error::Range(format!(
                "event [{}, {}) outside grid span [0, {span}]",
                ev.onset, ev.offset
            )));
        }
        if ev.label >= class_map.n_ipt() {
            return Err(Error::Range(format!(
                "event label {} outside [0, {})",
                ev.label,
                class_map.n_ipt()
            )));
        }
        let pitch_bin = match ev.pitch {
            Some(p) if class_map.pitch_enabled => Some(class_map.pitch_bin(p).ok_or_else(|| {
                Error::Range(format!(
                    "MIDI pitch {p} outside {:?}",
                    class_map.pitch_range
                ))
            })?),
            _ => None,
        };
        let frames = covered_frames(ev.onset, ev.offset, n_frames, fr);
        if frames.is_empty() {
            continue;
        }
        grid.onset[frames.start] = 1;
        for t in frames {
            grid.ipt[[t, ev.label]] = 1;
            if let Some(b) = pitch_bin {
                grid.pitch[[t, b]] = 1;
            }
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DatasetSchema, FRAME_RATE};
    use proptest::prelude::*;

    fn toy() -> ClassMap {
        DatasetSchema::Toy.class_map()
    }

    /// Reference rasterizer: tests every frame centre against every event.
    fn brute_force(events: &[IptEvent], n: usize, cm: &ClassMap) -> FrameGrid {
        let mut g = FrameGrid::zeros(n, cm.n_ipt(), cm.n_pitch(), cm.frame_rate);
        for ev in events {
            let mut first = None;
            for t in 0..n {
                let c = (t as f64 + 0.5) / cm.frame_rate;
                if c >= ev.onset && c < ev.offset {
                    first.get_or_insert(t);
                    g.ipt[[t, ev.label]] = 1;
                    if let Some(p) = ev.pitch {
                        g.pitch[[t, (p - cm.pitch_range.0) as usize]] = 1;
                    }
                }
            }
            if let Some(t) = first {
                g.onset[t] = 1;
            }
        }
        g
    }

    #[test]
    fn no_events_all_zero() {
        let g = rasterize(&[], 10, &toy()).unwrap();
        assert!(g.ipt.iter().all(|&v| v == 0));
        assert!(g.onset.iter().all(|&v| v == 0));
        assert_eq!(g.n_valid(), 10);
    }

    #[test]
    fn tenth_of_a_second_covers_seven_frames() {
        let ev = IptEvent::new(0, 0.0, 0.1, None).unwrap();
        let g = rasterize(&[ev], 75, &toy()).unwrap();
        let active: Vec<usize> = (0..75).filter(|&t| g.ipt[[t, 0]] == 1).collect();
        assert_eq!(active, (0..=6).collect::<Vec<_>>());
        assert_eq!(g.onset[0], 1);
        assert_eq!(g.onset.iter().map(|&v| v as usize).sum::<usize>(), 1);
    }

    #[test]
    fn overlapping_classes_share_frames() {
        let cm = toy();
        let events = [
            IptEvent::new(0, 0.0, 0.2, Some(72)).unwrap(),
            IptEvent::new(2, 0.1, 0.3, Some(76)).unwrap(),
        ];
        let g = rasterize(&events, 30, &cm).unwrap();
        assert_eq!(g, brute_force(&events, 30, &cm));
        let shared = (0..30).filter(|&t| g.ipt[[t, 0]] == 1 && g.ipt[[t, 2]] == 1).count();
        assert!(shared > 0);
    }

    #[test]
    fn out_of_span_is_range_error() {
        let ev = IptEvent::new(0, 0.0, 0.5, None).unwrap();
        assert!(matches!(rasterize(&[ev], 10, &toy()), Err(Error::Range(_))));
    }

    fn arb_events() -> impl Strategy<Value = Vec<IptEvent>> {
        prop::collection::vec((0usize..4, 0.0f64..1.9, 0.001f64..0.8, 72u8..=83), 0..8).prop_map(
            |v| {
                v.into_iter()
                    .map(|(c, on, d, p)| IptEvent::new(c, on, (on + d).min(2.0), Some(p)).unwrap())
                    .collect()
            },
        )
    }

    proptest! {
        #[test]
        fn matches_brute_force_and_keeps_invariants(events in arb_events()) {
            let cm = toy();
            let n = (2.0 * FRAME_RATE) as usize;
            let g = rasterize(&events, n, &cm).unwrap();
            prop_assert_eq!(&g, &brute_force(&events, n, &cm));
            prop_assert!(g.check_invariants(true).is_ok());
        }
    }
}
