//! Turning posteriorgrams into binary frames and labelled events.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassMap, IptEvent};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub onset_threshold: f64,
    pub frame_threshold: f64,
    pub min_event_frames: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            onset_threshold: 0.5,
            frame_threshold: 0.5,
            min_event_frames: 1,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("decode.onset_threshold", self.onset_threshold),
            ("decode.frame_threshold", self.frame_threshold),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{k} must lie in (0, 1), got {v}")));
            }
        }
        if self.min_event_frames == 0 {
            return Err(Error::Config("decode.min_event_frames must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn binarize_onsets(onset: &[f64], threshold: f64) -> Vec<u8> {
    onset.iter().map(|&p| u8::from(p >= threshold)).collect()
}

pub fn decode_frames(y: ArrayView2<f64>, threshold: f64) -> Array2<u8> {
    y.mapv(|p| u8::from(p >= threshold))
}

fn push_event(out: &mut Vec<IptEvent>, c: usize, start: usize, end: usize, cfg: &DecodeConfig, fr: f64) {
    if end - start >= cfg.min_event_frames {
        out.push(IptEvent {
            label: c,
            onset: start as f64 / fr,
            offset: end as f64 / fr,
            pitch: None,
        });
    }
}

fn check_dims(y: &ArrayView2<f64>, onset_mask: &[u8]) -> Result<()> {
    if y.nrows() != onset_mask.len() {
        return Err(Error::Contract(format!(
            "{} activation frames but {} onset frames",
            y.nrows(),
            onset_mask.len()
        )));
    }
    Ok(())
}

fn sort(events: &mut [IptEvent]) {
    events.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.label.cmp(&b.label)));
}

/// Onset-gated decoding.
///
/// Per class, an event opens only on a frame that is both active and gated
/// by the onset mask, runs while the class stays active, and closes at the
/// first inactive frame. A gated frame inside a running event closes it and
/// opens a new one.
pub fn decode_events(y_ipt: ArrayView2<f64>, onset_mask: &[u8], cfg: &DecodeConfig, frame_rate: f64) -> Result<Vec<IptEvent>> {
    check_dims(&y_ipt, onset_mask)?;
    let mut out = Vec::new();
    for (c, col) in y_ipt.axis_iter(Axis(1)).enumerate() {
        let mut start: Option<usize> = None;
        for (t, &p) in col.iter().enumerate() {
            let active = p >= cfg.frame_threshold;
            let gate = onset_mask[t] != 0;
            start = match start {
                Some(s) if !active => {
                    push_event(&mut out, c, s, t, cfg, frame_rate);
                    None
                }
                Some(s) if gate => {
                    push_event(&mut out, c, s, t, cfg, frame_rate);
                    Some(t)
                }
                None if active && gate => Some(t),
                other => other,
            };
        }
        if let Some(s) = start {
            push_event(&mut out, c, s, col.len(), cfg, frame_rate);
        }
    }
    sort(&mut out);
    Ok(out)
}

/// Ungated decoding: every maximal run of active frames is an event.
pub fn decode_runs(y_ipt: ArrayView2<f64>, cfg: &DecodeConfig, frame_rate: f64) -> Vec<IptEvent> {
    let mut out = Vec::new();
    for (c, col) in y_ipt.axis_iter(Axis(1)).enumerate() {
        let mut start = None;
        for (t, &p) in col.iter().enumerate() {
            let active = p >= cfg.frame_threshold;
            match (start, active) {
                (None, true) => start = Some(t),
                (Some(s), false) => {
                    push_event(&mut out, c, s, t, cfg, frame_rate);
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            push_event(&mut out, c, s, col.len(), cfg, frame_rate);
        }
    }
    sort(&mut out);
    out
}

/// Sets each event's pitch to the argmax of the pitch posterior summed over its span.
pub fn assign_pitch(events: &mut [IptEvent], y_pitch: ArrayView2<f64>, class_map: &ClassMap, frame_rate: f64) {
    if !class_map.pitch_enabled {
        return;
    }
    let n = y_pitch.nrows();
    for e in events {
        let a = ((e.onset * frame_rate).round() as usize).min(n);
        let b = ((e.offset * frame_rate).round() as usize).clamp(a, n);
        if a == b {
            continue;
        }
        let sums = y_pitch.slice(ndarray::s![a..b, ..]).sum_axis(Axis(0));
        let best = argmax(sums.view());
        e.pitch = best.and_then(|i| class_map.midi_of_bin(i));
    }
}

fn argmax(v: ArrayView1<f64>) -> Option<usize> {
    v.iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, f64)>, (i, &x)| match acc {
            Some((_, m)) if m >= x => acc,
            _ => Some((i, x)),
        })
        .map(|(i, _)| i)
}

/// Posteriors of one recording, `(time, ·)`, restricted to valid frames.
#[derive(Debug, Clone)]
pub struct RecordingPosteriors {
    pub y_ipt: Array2<f64>,
    pub y_pitch: Option<Array2<f64>>,
    pub onset: Option<Vec<f64>>,
    pub frame_rate: f64,
}

/// Frame decisions and events of one recording.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub frames: Array2<u8>,
    pub events: Vec<IptEvent>,
}

/// Decodes one recording. With `gated`, events require the onset posterior.
pub fn decode_recording(
    post: &RecordingPosteriors,
    gated: bool,
    cfg: &DecodeConfig,
    class_map: &ClassMap,
) -> Result<Decoded> {
    let frames = decode_frames(post.y_ipt.view(), cfg.frame_threshold);
    let mut events = match (gated, &post.onset) {
        (true, Some(onset)) => {
            let mask = binarize_onsets(onset, cfg.onset_threshold);
            decode_events(post.y_ipt.view(), &mask, cfg, post.frame_rate)?
        }
        (true, None) => {
            return Err(Error::Contract("gated decoding needs an onset posterior".into()));
        }
        (false, _) => decode_runs(post.y_ipt.view(), cfg, post.frame_rate),
    };
    if let Some(yp) = &post.y_pitch {
        assign_pitch(&mut events, yp.view(), class_map, post.frame_rate);
    }
    Ok(Decoded { frames, events })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    const FR: f64 = 75.0;

    fn col(v: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap()
    }

    #[test]
    fn onset_threshold_is_inclusive() {
        assert_eq!(binarize_onsets(&[0.4, 0.5, 0.6], 0.5), vec![0, 1, 1]);
        assert_eq!(binarize_onsets(&[0.0; 3], 0.5), vec![0; 3]);
        assert_eq!(binarize_onsets(&[1.0; 3], 0.5), vec![1; 3]);
    }

    #[test]
    fn frame_threshold_is_inclusive() {
        let y = array![[0.5, 0.49], [0.0, 1.0]];
        assert_eq!(decode_frames(y.view(), 0.5), array![[1u8, 0], [0, 1]]);
    }

    #[test]
    fn ungated_blip_is_dropped() {
        let y = col(&[0.9, 0.9, 0.2, 0.9]);
        let ev = decode_events(y.view(), &[1, 0, 0, 0], &DecodeConfig::default(), FR).unwrap();
        assert_eq!(ev.len(), 1);
        assert_eq!((ev[0].label, ev[0].onset, ev[0].offset), (0, 0.0, 2.0 / FR));
    }

    #[test]
    fn closed_gate_gives_nothing() {
        let y = col(&[0.9; 6]);
        assert!(decode_events(y.view(), &[0; 6], &DecodeConfig::default(), FR).unwrap().is_empty());
    }

    #[test]
    fn re_onset_splits() {
        let y = col(&[0.9; 4]);
        let ev = decode_events(y.view(), &[1, 0, 1, 0], &DecodeConfig::default(), FR).unwrap();
        let spans: Vec<(f64, f64)> = ev.iter().map(|e| (e.onset, e.offset)).collect();
        assert_eq!(spans, vec![(0.0, 2.0 / FR), (2.0 / FR, 4.0 / FR)]);
    }

    #[test]
    fn runs_ignore_onsets() {
        let y = col(&[0.9, 0.9, 0.2, 0.9]);
        let ev = decode_runs(y.view(), &DecodeConfig::default(), FR);
        assert_eq!(ev.len(), 2);
        assert_eq!(ev[1].offset, 4.0 / FR);
    }

    #[test]
    fn min_event_frames_filters() {
        let y = col(&[0.9, 0.1, 0.9, 0.9, 0.1]);
        let cfg = DecodeConfig {
            min_event_frames: 2,
            ..Default::default()
        };
        let ev = decode_runs(y.view(), &cfg, FR);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].onset, 2.0 / FR);
    }

    #[test]
    fn length_mismatch_is_error() {
        let y = col(&[0.9; 3]);
        assert!(decode_events(y.view(), &[1, 0], &DecodeConfig::default(), FR).is_err());
    }

    #[test]
    fn pitch_from_span_argmax() {
        let cm = crate::dataset::DatasetSchema::Toy.class_map();
        let mut yp = Array2::zeros((4, cm.n_pitch()));
        yp[[1, 3]] = 0.9;
        yp[[2, 3]] = 0.8;
        yp[[3, 5]] = 1.0;
        let mut ev = vec![IptEvent::new(0, 1.0 / FR, 3.0 / FR, None).unwrap()];
        assign_pitch(&mut ev, yp.view(), &cm, FR);
        assert_eq!(ev[0].pitch, cm.midi_of_bin(3));
    }

    #[test]
    fn thresholds_validated() {
        let cfg = DecodeConfig {
            onset_threshold: 1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(DecodeConfig::default().validate().is_ok());
    }
}
