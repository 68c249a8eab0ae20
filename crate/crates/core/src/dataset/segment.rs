use super::{rasterize, ClassMap, IptEvent, Sample};
use crate::encoder::{SAMPLE_RATE, SAMPLES_PER_FRAME, WINDOW_SAMPLES};
use crate::Result;

/// Events shorter than this after clipping are dropped.
const MIN_CLIPPED: f64 = 1e-6;

/// Number of leading frames backed by `real_samples` of audio.
pub fn valid_frames(real_samples: usize, n_frames: usize, frame_rate: f64) -> usize {
    let seconds = real_samples as f64 / SAMPLE_RATE as f64;
    ((seconds * frame_rate - 1e-9).ceil().max(0.0) as usize).min(n_frames)
}

/// Cuts a 24 kHz mono recording into consecutive non-overlapping 5 s
/// windows. The last window is zero-padded and its padded frames masked out.
/// Events are shifted into window-local time and clipped to the part of the
/// window the label grid covers; an event crossing a boundary yields one
/// piece per window.
pub fn segment(
    waveform: &[f32],
    events: &[IptEvent],
    source_id: &str,
    class_map: &ClassMap,
    n_frames: usize,
) -> Result<Vec<Sample>> {
    if waveform.len() < SAMPLES_PER_FRAME {
        log::warn!(
            "{source_id}: {} samples is shorter than one frame, skipping",
            waveform.len()
        );
        return Ok(Vec::new());
    }
    let fr = class_map.frame_rate;
    let grid_span = n_frames as f64 / fr;
    let window_seconds = WINDOW_SAMPLES as f64 / SAMPLE_RATE as f64;
    let n_windows = waveform.len().div_ceil(WINDOW_SAMPLES);

    let mut samples = Vec::with_capacity(n_windows);
    for k in 0..n_windows {
        let start = k * WINDOW_SAMPLES;
        let end = (start + WINDOW_SAMPLES).min(waveform.len());
        let mut chunk = waveform[start..end].to_vec();
        let real = chunk.len();
        chunk.resize(WINDOW_SAMPLES, 0.0);

        let offset = k as f64 * window_seconds;
        let limit = (real as f64 / SAMPLE_RATE as f64).min(grid_span);
        let local: Vec<IptEvent> = events
            .iter()
            .filter_map(|ev| {
                let on = (ev.onset - offset).max(0.0);
                let off = (ev.offset - offset).min(limit);
                (off - on > MIN_CLIPPED).then_some(IptEvent {
                    label: ev.label,
                    onset: on,
                    offset: off,
                    pitch: ev.pitch,
                })
            })
            .collect();

        let mut labels = rasterize(&local, n_frames, class_map)?;
        let n_valid = valid_frames(real, n_frames, fr);
        for t in n_valid..n_frames {
            labels.mask[t] = 0;
            labels.onset[t] = 0;
            labels.ipt.row_mut(t).fill(0);
            labels.pitch.row_mut(t).fill(0);
        }
        samples.push(Sample {
            waveform: chunk,
            labels,
            events: local,
            source_id: source_id.to_string(),
            window_offset: offset,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetSchema;
    use crate::encoder::frames_for_samples;

    fn n_frames() -> usize {
        frames_for_samples(WINDOW_SAMPLES)
    }

    #[test]
    fn twelve_seconds_makes_three_windows() {
        let cm = DatasetSchema::Toy.class_map();
        let wave = vec![0.1f32; 12 * SAMPLE_RATE as usize];
        let s = segment(&wave, &[], "r", &cm, n_frames()).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|x| x.waveform.len() == WINDOW_SAMPLES));
        assert_eq!(s[0].labels.n_valid(), n_frames());
        assert_eq!(s[1].labels.n_valid(), n_frames());
        assert_eq!(s[2].labels.n_valid(), 150);
        assert!(s[2].waveform[2 * SAMPLE_RATE as usize..].iter().all(|&v| v == 0.0));
        assert_eq!(s[2].window_offset, 10.0);
    }

    #[test]
    fn exact_window_is_fully_valid() {
        let cm = DatasetSchema::Toy.class_map();
        let wave = vec![0.0f32; WINDOW_SAMPLES];
        let s = segment(&wave, &[], "r", &cm, n_frames()).unwrap();
        assert_eq!(s.len(), 1);
        assert!(s[0].labels.mask.iter().all(|&m| m == 1));
    }

    #[test]
    fn boundary_event_splits_in_two() {
        let cm = DatasetSchema::Toy.class_map();
        let wave = vec![0.0f32; 2 * WINDOW_SAMPLES];
        let ev = IptEvent::new(1, 4.5, 5.5, Some(74)).unwrap();
        let s = segment(&wave, &[ev], "r", &cm, n_frames()).unwrap();
        assert_eq!(s[0].events.len(), 1);
        assert_eq!(s[1].events.len(), 1);
        assert!((s[0].events[0].onset - 4.5).abs() < 1e-12);
        assert!((s[0].events[0].offset - n_frames() as f64 / 75.0).abs() < 1e-12);
        assert_eq!(s[1].events[0].onset, 0.0);
        assert!((s[1].events[0].offset - 0.5).abs() < 1e-12);
        assert_eq!(s[1].labels.onset[0], 1);
    }

    #[test]
    fn too_short_gives_nothing() {
        let cm = DatasetSchema::Toy.class_map();
        assert!(segment(&[0.0; 100], &[], "r", &cm, n_frames()).unwrap().is_empty());
    }

    #[test]
    fn padded_region_has_no_labels() {
        let cm = DatasetSchema::Toy.class_map();
        let wave = vec![0.0f32; SAMPLE_RATE as usize];
        let ev = IptEvent::new(0, 0.5, 3.0, None).unwrap();
        let s = segment(&wave, &[ev], "r", &cm, n_frames()).unwrap();
        let g = &s[0].labels;
        assert_eq!(g.n_valid(), 75);
        assert!(g.check_invariants(true).is_ok());
        assert!((75..g.n_time()).all(|t| g.ipt[[t, 0]] == 0));
    }
}
