//! Windowed inference over whole recordings and evaluation against references.

use candle_core::{DType, Device, Tensor};
use ndarray::{s, Array2};

use super::model::Model;
use crate::dataset::corpus::Corpus;
use crate::dataset::{rasterize, valid_frames, IptEvent, Sample, SplitTag};
use crate::downstream::{to_array2, Mode, PosteriorSet};
use crate::encoder::{SAMPLES_PER_FRAME, WINDOW_SAMPLES};
use crate::metrics::{EvalReport, Evaluator};
use crate::postprocess::{decode_recording, DecodeConfig, Decoded, RecordingPosteriors};
use crate::{Error, Result};

/// Frames between consecutive window starts.
pub const WINDOW_STRIDE_FRAMES: usize = WINDOW_SAMPLES / SAMPLES_PER_FRAME;

/// Eval-mode posteriors of full windows, `(time, ·)` each.
pub fn predict_windows(model: &Model, windows: &[&[f32]], valid: &[usize], batch: usize) -> Result<Vec<PosteriorSet>> {
    let n_time = model.n_time();
    let mut out = Vec::with_capacity(windows.len());
    for (chunk, lens) in windows.chunks(batch.max(1)).zip(valid.chunks(batch.max(1))) {
        let stack = model.encode(chunk)?;
        let mask: Vec<f64> = lens
            .iter()
            .flat_map(|&n| (0..n_time).map(move |t| if t < n { 1.0 } else { 0.0 }))
            .collect();
        let mask = Tensor::from_vec(mask, (chunk.len(), n_time), &Device::Cpu)?.to_dtype(model.dtype())?;
        let post = model.forward_stack(&stack, Some(&mask), &mut Mode::Eval)?;
        for i in 0..chunk.len() {
            out.push(post.item(i)?);
        }
    }
    Ok(out)
}

fn to_rows(t: &Tensor) -> Result<Array2<f64>> {
    to_array2(&t.to_dtype(DType::F64)?)
}

/// Posteriors of one window restricted to its first `n` frames.
pub fn window_posteriors(post: &PosteriorSet, n: usize, frame_rate: f64) -> Result<RecordingPosteriors> {
    let cut = |a: Array2<f64>| a.slice(s![..n, ..]).to_owned();
    Ok(RecordingPosteriors {
        y_ipt: cut(to_rows(&post.y_ipt)?),
        y_pitch: post.y_pitch.as_ref().map(to_rows).transpose()?.map(cut),
        onset: post
            .onset
            .as_ref()
            .map(|o| -> Result<Vec<f64>> { Ok(to_rows(o)?.column(0).iter().take(n).copied().collect()) })
            .transpose()?,
        frame_rate,
    })
}

/// Runs a recording through consecutive windows and stitches the posteriors
/// on the recording's frame grid. Window `k` starts at frame
/// `k * WINDOW_STRIDE_FRAMES`; frames past the encoder's `n_time` repeat the
/// window's last output frame.
pub fn predict_recording(model: &Model, wave: &[f32], batch: usize) -> Result<RecordingPosteriors> {
    let fr = model.class_map().frame_rate;
    let n_windows = wave.len().div_ceil(WINDOW_SAMPLES).max(1);
    let total = valid_frames(wave.len(), n_windows * WINDOW_STRIDE_FRAMES, fr);
    let mut padded: Vec<Vec<f32>> = Vec::with_capacity(n_windows);
    let mut lens = Vec::with_capacity(n_windows);
    for k in 0..n_windows {
        let start = (k * WINDOW_SAMPLES).min(wave.len());
        let end = (start + WINDOW_SAMPLES).min(wave.len());
        let mut w = wave[start..end].to_vec();
        lens.push(valid_frames(w.len(), model.n_time(), fr));
        w.resize(WINDOW_SAMPLES, 0.0);
        padded.push(w);
    }
    let refs: Vec<&[f32]> = padded.iter().map(Vec::as_slice).collect();
    let posts = predict_windows(model, &refs, &lens, batch)?;

    let stitch = |get: &dyn Fn(&PosteriorSet) -> Option<Result<Array2<f64>>>| -> Result<Option<Array2<f64>>> {
        let mut out: Option<Array2<f64>> = None;
        for (k, p) in posts.iter().enumerate() {
            let Some(a) = get(p) else { return Ok(None) };
            let a = a?;
            let dst = out.get_or_insert_with(|| Array2::zeros((n_windows * WINDOW_STRIDE_FRAMES, a.ncols())));
            let base = k * WINDOW_STRIDE_FRAMES;
            for t in 0..WINDOW_STRIDE_FRAMES {
                let src = t.min(a.nrows() - 1);
                dst.row_mut(base + t).assign(&a.row(src));
            }
        }
        Ok(out.map(|a| a.slice(s![..total, ..]).to_owned()))
    };
    let y_ipt = stitch(&|p| Some(to_rows(&p.y_ipt)))?.ok_or_else(|| Error::Contract("no windows".into()))?;
    let y_pitch = stitch(&|p| p.y_pitch.as_ref().map(to_rows))?;
    let onset = stitch(&|p| p.onset.as_ref().map(to_rows))?.map(|a| a.column(0).to_vec());
    Ok(RecordingPosteriors {
        y_ipt,
        y_pitch,
        onset,
        frame_rate: fr,
    })
}

/// Decodes with the variant's own rule unless `gated` overrides it.
pub fn decode_for(model: &Model, post: &RecordingPosteriors, decode: &DecodeConfig, gated: Option<bool>) -> Result<Decoded> {
    let gated = gated.unwrap_or(model.variant().gated_decoding());
    decode_recording(post, gated, decode, model.class_map())
}

/// A recording with its reference events.
pub struct Recording {
    pub id: String,
    pub wave: Vec<f32>,
    pub events: Vec<IptEvent>,
}

pub fn evaluate_recordings(
    model: &Model,
    recordings: &[Recording],
    decode: &DecodeConfig,
    tolerance: f64,
    gated: Option<bool>,
) -> Result<EvalReport> {
    if recordings.is_empty() {
        return Err(Error::EmptySplit("evaluation".into()));
    }
    let cm = model.class_map();
    let mut ev = Evaluator::new(cm, tolerance)?;
    for rec in recordings {
        let post = predict_recording(model, &rec.wave, 8)?;
        let n = post.y_ipt.nrows();
        let reference = rasterize(&rec.events, n, cm)?;
        let d = decode_for(model, &post, decode, gated)?;
        ev.add(d.frames.view(), reference.ipt.view(), &vec![1u8; n], &d.events, &rec.events)?;
    }
    let mut report = ev.report();
    report.variant = Some(model.variant().to_string());
    Ok(report)
}

/// Window-level evaluation: each sample is scored on its valid frames
/// against its own window-local events.
pub fn evaluate_samples(
    model: &Model,
    samples: &[Sample],
    decode: &DecodeConfig,
    tolerance: f64,
    gated: Option<bool>,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptySplit("evaluation".into()));
    }
    let cm = model.class_map();
    let waves: Vec<&[f32]> = samples.iter().map(|s| s.waveform.as_slice()).collect();
    let lens: Vec<usize> = samples.iter().map(|s| s.labels.n_valid()).collect();
    let posts = predict_windows(model, &waves, &lens, 8)?;
    let mut ev = Evaluator::new(cm, tolerance)?;
    for ((s, p), &n) in samples.iter().zip(&posts).zip(&lens) {
        let rp = window_posteriors(p, n, cm.frame_rate)?;
        let d = decode_for(model, &rp, decode, gated)?;
        let reference = s.labels.ipt.slice(s![..n, ..]);
        ev.add(d.frames.view(), reference, &vec![1u8; n], &d.events, &s.events)?;
    }
    let mut report = ev.report();
    report.variant = Some(model.variant().to_string());
    Ok(report)
}

/// Scores a checkpoint on one split of a prepared corpus.
pub fn evaluate_checkpoint(
    model: &Model,
    corpus: &Corpus,
    fold: usize,
    split: SplitTag,
    decode: &DecodeConfig,
    tolerance: f64,
) -> Result<EvalReport> {
    if corpus.class_map != *model.class_map() {
        return Err(Error::Compatibility(format!(
            "checkpoint classes {:?} do not match corpus classes {:?}",
            model.class_map().ipt_names,
            corpus.class_map.ipt_names
        )));
    }
    let ids = corpus.split_ids(fold, split)?;
    if ids.is_empty() {
        return Err(Error::EmptySplit(format!("{split:?} of fold {fold}")));
    }
    let recordings = ids
        .iter()
        .map(|id| {
            let (wave, events) = corpus.load_recording(id)?;
            Ok(Recording {
                id: id.clone(),
                wave,
                events,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_recordings(model, &recordings, decode, tolerance, None)
}
