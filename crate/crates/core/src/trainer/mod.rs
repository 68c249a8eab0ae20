//! Finetuning: momentum SGD with a cosine schedule, global gradient-norm
//! clipping, per-epoch validation and best-checkpoint selection.

mod infer;
mod model;

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::corpus::Corpus;
use crate::dataset::{class_weights, FrameGrid, Sample, SplitTag};
use crate::downstream::Mode;
use crate::metrics::{frame_counts, Counts, Scores};
use crate::objective::{total_loss, LossBreakdown, LossWeights, Targets};
use crate::params::{ParamGroup, ParamStore};
use crate::postprocess::decode_frames;
use crate::{Error, Result};

pub use infer::{
    decode_for, evaluate_checkpoint, evaluate_recordings, evaluate_samples, predict_recording, predict_windows,
    window_posteriors, Recording, WINDOW_STRIDE_FRAMES,
};
pub use model::{CheckpointMeta, Model, ModelSpec, Precision, CHECKPOINT_META, CHECKPOINT_PARAMS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    pub epochs: usize,
    pub patience: usize,
    /// Stops after this many optimizer steps; the schedule spans exactly these steps.
    pub max_steps: Option<usize>,
    pub freeze_extractor: bool,
    pub fold: usize,
    /// Upper bound on memory used to cache encoder outputs of a frozen encoder.
    pub feature_cache_mb: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            momentum: 0.9,
            batch_size: 10,
            grad_clip_norm: 3.0,
            epochs: 50,
            patience: 10,
            max_steps: None,
            freeze_extractor: true,
            fold: 0,
            feature_cache_mb: 2048,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("train.momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.grad_clip_norm.is_nan() || self.grad_clip_norm <= 0.0 {
            return Err(Error::Config(format!("train.grad_clip_norm must be positive, got {}", self.grad_clip_norm)));
        }
        if self.epochs == 0 || self.max_steps == Some(0) {
            return Err(Error::Config("train.epochs and train.max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// `base · (1 + cos(π·step/total)) / 2`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let x = step as f64 / total.max(1) as f64;
    base * (1.0 + (std::f64::consts::PI * x).cos()) / 2.0
}

/// One parameter's gradient.
#[derive(Debug, Clone)]
pub struct GradEntry {
    pub name: String,
    pub group: ParamGroup,
    pub grad: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipReport {
    pub norm: f64,
    pub clipped_norm: f64,
    pub scale: f64,
    pub group_norms: BTreeMap<String, f64>,
}

fn sq_norm(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?)
}

/// Scales all gradients by `max_norm / g` when their global L2 norm `g`
/// exceeds `max_norm`.
pub fn clip_gradients(grads: &mut [GradEntry], max_norm: f64) -> Result<ClipReport> {
    let mut group_sq: BTreeMap<String, f64> = BTreeMap::new();
    for g in grads.iter() {
        let sq = sq_norm(&g.grad)?;
        if !sq.is_finite() {
            return Err(Error::NonFiniteGradient {
                group: g.group.as_str().to_string(),
            });
        }
        *group_sq.entry(g.group.as_str().to_string()).or_default() += sq;
    }
    let norm = group_sq.values().sum::<f64>().sqrt();
    let scale = if norm > max_norm { max_norm / norm } else { 1.0 };
    let mut clipped_sq = 0.0;
    for g in grads.iter_mut() {
        if scale != 1.0 {
            g.grad = (&g.grad * scale)?;
        }
        clipped_sq += sq_norm(&g.grad)?;
    }
    Ok(ClipReport {
        norm,
        clipped_norm: clipped_sq.sqrt(),
        scale,
        group_norms: group_sq.into_iter().map(|(k, v)| (k, v.sqrt())).collect(),
    })
}

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    velocity: HashMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, params: &ParamStore, grads: &[GradEntry], lr: f64) -> Result<()> {
        for g in grads {
            let p = params
                .get(&g.name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter `{}`", g.name)))?;
            let v = match self.velocity.get(&g.name) {
                Some(prev) => ((prev * self.momentum)? + &g.grad)?,
                None => g.grad.clone(),
            };
            p.var.set(&(p.var.as_tensor() - (&v * lr)?)?)?;
            self.velocity.insert(g.name.clone(), v);
        }
        Ok(())
    }
}

/// Training and validation windows.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl TrainData {
    pub fn from_corpus(corpus: &Corpus, fold: usize, n_time: usize) -> Result<Self> {
        let train = corpus.samples(&corpus.split_ids(fold, SplitTag::Train)?, n_time)?;
        let val = corpus.samples(&corpus.split_ids(fold, SplitTag::Val)?, n_time)?;
        Ok(TrainData { train, val })
    }
}

/// One JSON line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_ipt: f64,
    pub loss_pitch: f64,
    pub loss_onset: f64,
    pub grad_norm: f64,
    pub grad_norm_clipped: f64,
    pub group_grad_norms: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub val_frame_macro_f1: Option<f64>,
    pub val_frame_micro_f1: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps: usize,
    pub total_steps: usize,
    pub best_epoch: usize,
    pub best_val_macro_f1: Option<f64>,
    pub epochs: Vec<EpochLog>,
    pub class_weights: Vec<f64>,
}

/// Encoder outputs of a frozen encoder, computed once per sample.
struct FeatureCache {
    stacks: HashMap<usize, Tensor>,
    budget: usize,
    used: usize,
}

impl FeatureCache {
    fn new(enabled: bool, mb: usize) -> Self {
        FeatureCache {
            stacks: HashMap::new(),
            budget: if enabled { mb << 20 } else { 0 },
            used: 0,
        }
    }

    /// `(batch, layers, time, dim)` for the given sample indices.
    fn stacks(&mut self, model: &Model, samples: &[Sample], idx: &[usize]) -> Result<Tensor> {
        let missing: Vec<usize> = idx.iter().copied().filter(|i| !self.stacks.contains_key(i)).collect();
        let mut fresh: HashMap<usize, Tensor> = HashMap::new();
        if !missing.is_empty() {
            let waves: Vec<&[f32]> = missing.iter().map(|&i| samples[i].waveform.as_slice()).collect();
            let out = model.encode(&waves)?;
            for (k, &i) in missing.iter().enumerate() {
                fresh.insert(i, out.get(k)?);
            }
        }
        let parts: Vec<Tensor> = idx
            .iter()
            .map(|i| self.stacks.get(i).or_else(|| fresh.get(i)).cloned().expect("computed above"))
            .collect();
        for (i, t) in fresh {
            let bytes = t.elem_count() * t.dtype().size_in_bytes();
            if self.used + bytes <= self.budget {
                self.used += bytes;
                self.stacks.insert(i, t);
            }
        }
        Ok(Tensor::stack(&parts, 0)?)
    }
}

fn mask_of(grids: &[&FrameGrid], dtype: DType) -> Result<Tensor> {
    let t = grids[0].n_time();
    let v: Vec<f64> = grids.iter().flat_map(|g| g.mask.iter().map(|&m| f64::from(m))).collect();
    Ok(Tensor::from_vec(v, (grids.len(), t), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Frame scores over windows in eval mode, counted on valid frames.
pub fn frame_scores(model: &Model, samples: &[Sample], threshold: f64) -> Result<Scores> {
    let waves: Vec<&[f32]> = samples.iter().map(|s| s.waveform.as_slice()).collect();
    let lens: Vec<usize> = samples.iter().map(|s| s.labels.n_valid()).collect();
    let posts = predict_windows(model, &waves, &lens, 8)?;
    let mut counts = vec![Counts::default(); model.class_map().n_ipt()];
    for (s, p) in samples.iter().zip(&posts) {
        let y = crate::downstream::to_array2(&p.y_ipt.to_dtype(DType::F64)?)?;
        let pred = decode_frames(y.view(), threshold);
        let mask: Vec<u8> = s.labels.mask.to_vec();
        for (acc, c) in counts.iter_mut().zip(frame_counts(pred.view(), s.labels.ipt.view(), &mask)?) {
            acc.add(&c);
        }
    }
    Ok(Scores::from_counts(counts))
}

/// Everything a training run needs besides the data.
#[derive(Debug, Clone)]
pub struct TrainJob {
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub frame_threshold: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

/// Trains `model` in place, leaving it at the selected epoch's values, and
/// writes `checkpoint/` plus `train_log.jsonl` under `job.out_dir`.
pub fn train(model: &mut Model, data: &TrainData, job: &TrainJob) -> Result<TrainOutcome> {
    let cfg = &job.train;
    cfg.validate()?;
    job.loss.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let n_time = model.n_time();
    for s in data.train.iter().chain(&data.val) {
        if s.labels.n_time() != n_time {
            return Err(Error::Compatibility(format!(
                "{}: label grid has {} frames, encoder gives {n_time}",
                s.source_id,
                s.labels.n_time()
            )));
        }
    }
    std::fs::create_dir_all(&job.out_dir).map_err(|e| Error::io(&job.out_dir, e))?;
    let log_path = job.out_dir.join("train_log.jsonl");
    let mut log_file = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);

    let grids: Vec<FrameGrid> = data.train.iter().map(|s| s.labels.clone()).collect();
    let cw = class_weights(&grids);
    let pitch_enabled = model.class_map().pitch_enabled;
    let dtype = model.dtype();
    let trainable = model.trainable_groups();
    let params: Vec<(String, ParamGroup)> = model
        .params
        .iter()
        .filter(|(_, p)| trainable.contains(&p.group))
        .map(|(k, p)| (k.to_string(), p.group))
        .collect();

    let per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.max_steps.unwrap_or(cfg.epochs * per_epoch);
    let epochs = total_steps.div_ceil(per_epoch);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(job.seed.wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(job.seed.wrapping_add(2));
    let mut cache = FeatureCache::new(!model.encoder.has_trainable_params(), cfg.feature_cache_mb);
    let mut sgd = Sgd::new(cfg.momentum);
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    let mut step = 0usize;
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, HashMap<String, Tensor>)> = None;
    let mut since_best = 0usize;

    'outer: for epoch in 0..epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut epoch_steps = 0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            if step >= total_steps {
                break;
            }
            let batch_grids: Vec<&FrameGrid> = idx.iter().map(|&i| &data.train[i].labels).collect();
            let stack = cache.stacks(model, &data.train, idx)?;
            let mask = mask_of(&batch_grids, dtype)?;
            let targets = Targets::from_grids(&batch_grids, dtype, &Device::Cpu)?;
            let post = model.forward_stack(&stack, Some(&mask), &mut Mode::Train(&mut dropout_rng))?;
            let (loss, br): (Tensor, LossBreakdown) = total_loss(&post, &targets, &job.loss, &cw, pitch_enabled)?;
            if !br.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    samples: idx
                        .iter()
                        .map(|&i| format!("{}@{:.1}s", data.train[i].source_id, data.train[i].window_offset))
                        .collect(),
                });
            }
            let store = loss.backward()?;
            let mut grads: Vec<GradEntry> = Vec::with_capacity(params.len());
            for (name, group) in &params {
                let p = model.params.get(name).expect("listed above");
                let grad = match store.get(p.var.as_tensor()) {
                    Some(g) => g.clone(),
                    None => p.var.as_tensor().zeros_like()?,
                };
                grads.push(GradEntry {
                    name: name.clone(),
                    group: *group,
                    grad,
                });
            }
            let clip = clip_gradients(&mut grads, cfg.grad_clip_norm)?;
            let lr = cosine_lr(cfg.lr, step, total_steps);
            sgd.step(&model.params, &grads, lr)?;

            let entry = StepLog {
                step,
                epoch,
                lr,
                loss: br.total,
                loss_ipt: br.ipt,
                loss_pitch: br.pitch,
                loss_onset: br.onset,
                grad_norm: clip.norm,
                grad_norm_clipped: clip.clipped_norm,
                group_grad_norms: clip.group_norms,
            };
            writeln!(log_file, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(&log_path, e))?;
            loss_sum += br.total;
            epoch_steps += 1;
            step += 1;
        }

        let (macro_f1, micro_f1) = if data.val.is_empty() {
            (None, None)
        } else {
            let s = frame_scores(model, &data.val, job.frame_threshold)?;
            (Some(s.macro_), Some(s.micro))
        };
        let rec = EpochLog {
            epoch,
            steps: epoch_steps,
            mean_loss: loss_sum / epoch_steps.max(1) as f64,
            val_frame_macro_f1: macro_f1,
            val_frame_micro_f1: micro_f1,
        };
        log::info!(
            "epoch {epoch}: loss {:.4}, val macro-F1 {}",
            rec.mean_loss,
            macro_f1.map_or("n/a".to_string(), |f| format!("{f:.4}"))
        );
        history.push(rec);
        if let Some(f) = macro_f1 {
            if best.as_ref().is_none_or(|(b, _, _)| f > *b) {
                best = Some((f, epoch, model.params.snapshot()?));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    log::info!("early stop after epoch {epoch}");
                    break 'outer;
                }
            }
        }
        if step >= total_steps {
            break;
        }
    }
    log_file.flush().map_err(|e| Error::io(&log_path, e))?;

    let (best_val, best_epoch) = match best {
        Some((f, e, snap)) => {
            model.params.restore(&snap)?;
            (Some(f), e)
        }
        None => (None, history.len().saturating_sub(1)),
    };
    let checkpoint = job.out_dir.join("checkpoint");
    let outcome = TrainOutcome {
        checkpoint: checkpoint.clone(),
        log: log_path,
        steps: step,
        total_steps,
        best_epoch,
        best_val_macro_f1: best_val,
        epochs: history,
        class_weights: cw,
    };
    model.save(&checkpoint, &serde_json::json!({
        "steps": outcome.steps,
        "total_steps": outcome.total_steps,
        "best_epoch": outcome.best_epoch,
        "best_val_frame_macro_f1": outcome.best_val_macro_f1,
        "fold": cfg.fold,
        "seed": job.seed,
    }))?;
    Ok(outcome)
}

/// Parses a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<StepLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
