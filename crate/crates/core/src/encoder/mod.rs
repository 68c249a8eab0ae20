//! Frame-level audio encoders and the learnable weighted sum over their
//! layer outputs.
//!
//! Both backends map a 5 s, 24 kHz window to a stack of per-layer feature
//! sequences at 75 Hz. The stub is deterministic and parameter-free; the
//! pre-trained backend is a HuBERT-style convolutional extractor followed by
//! a transformer, loaded from a checkpoint directory.

mod backbone;
mod stub;

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor, D};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::params::{ParamGroup, ParamStore};
use crate::{Error, Result};

pub use backbone::{init_random_checkpoint, Backbone, BackboneConfig};
pub use stub::StubEncoder;

pub const SAMPLE_RATE: u32 = 24_000;
/// Five seconds at 24 kHz.
pub const WINDOW_SAMPLES: usize = 120_000;
/// Total stride of the convolutional extractor (24 kHz / 75 Hz).
pub const SAMPLES_PER_FRAME: usize = 320;
/// CNN output plus twelve transformer layers.
pub const N_LAYERS: usize = 13;
pub const FEATURE_DIM: usize = 768;

pub const CONV_KERNELS: [usize; 7] = [10, 3, 3, 3, 3, 2, 2];
pub const CONV_STRIDES: [usize; 7] = [5, 2, 2, 2, 2, 2, 2];

/// Env var naming the pre-trained checkpoint directory.
pub const ENCODER_DIR_ENV: &str = "IPT_ENCODER_DIR";

/// Output length of a stack of unpadded strided convolutions.
pub fn conv_output_len(mut n: usize, kernels: &[usize], strides: &[usize]) -> usize {
    for (&k, &s) in kernels.iter().zip(strides) {
        if n < k {
            return 0;
        }
        n = (n - k) / s + 1;
    }
    n
}

/// Frame count the standard extractor produces for `samples` input samples.
pub fn frames_for_samples(samples: usize) -> usize {
    conv_output_len(samples, &CONV_KERNELS, &CONV_STRIDES)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Stub,
    Pretrained,
}

/// Encoder section of the run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub backend: BackendKind,
    pub checkpoint_dir: Option<PathBuf>,
    /// Layer count of the stub (ignored by the pre-trained backend).
    pub stub_layers: usize,
    /// Feature width of the stub (ignored by the pre-trained backend).
    pub stub_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            backend: BackendKind::Stub,
            checkpoint_dir: None,
            stub_layers: N_LAYERS,
            stub_dim: FEATURE_DIM,
        }
    }
}

impl EncoderConfig {
    /// Checkpoint directory from the config, falling back to `IPT_ENCODER_DIR`.
    pub fn resolve_checkpoint_dir(&self) -> Result<PathBuf> {
        self.checkpoint_dir
            .clone()
            .or_else(|| std::env::var_os(ENCODER_DIR_ENV).map(PathBuf::from))
            .ok_or_else(|| {
                Error::Backend(format!(
                    "no pre-trained checkpoint configured: set `encoder.checkpoint_dir` or \
                     {ENCODER_DIR_ENV} to a directory holding config.json and \
                     model.safetensors (or pytorch_model.bin)"
                ))
            })
    }
}

/// Per-layer feature sequences of one window.
#[derive(Debug, Clone)]
pub struct LayerStack {
    /// `(n_layers, n_time, dim)`
    pub layers: Tensor,
    pub frame_rate: f64,
}

impl LayerStack {
    pub fn n_layers(&self) -> usize {
        self.layers.dims()[0]
    }

    pub fn n_time(&self) -> usize {
        self.layers.dims()[1]
    }

    pub fn dim(&self) -> usize {
        self.layers.dims()[2]
    }
}

/// Learnable layer-mixing weights, softmax-normalized before use.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub raw: Tensor,
}

impl LayerWeights {
    /// Registers zero-initialized raw weights (uniform mixture).
    pub fn new(params: &mut ParamStore, n_layers: usize) -> Result<Self> {
        let raw = params.zeros("layer_weights", ParamGroup::LayerWeights, &[n_layers])?;
        Ok(LayerWeights { raw })
    }

    pub fn from_raw(raw: Tensor) -> Self {
        LayerWeights { raw }
    }

    pub fn len(&self) -> usize {
        self.raw.dims1().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn normalized(&self) -> Result<Tensor> {
        Ok(candle_nn::ops::softmax(&self.raw, D::Minus1)?)
    }
}

/// Downstream input features, `(batch, n_time, dim)`.
#[derive(Debug, Clone)]
pub struct FeatureSeq {
    pub features: Tensor,
    pub frame_rate: f64,
}

/// `Σ_k softmax(raw)_k · layers[k]`.
///
/// `stack` is `(n_layers, n_time, dim)` or batched `(batch, n_layers, n_time, dim)`;
/// the result drops the layer axis.
pub fn weighted_sum(stack: &Tensor, weights: &LayerWeights) -> Result<Tensor> {
    let batched = match stack.rank() {
        3 => stack.unsqueeze(0)?,
        4 => stack.clone(),
        r => return Err(Error::Contract(format!("layer stack has rank {r}, expected 3 or 4"))),
    };
    let (b, l, t, d) = batched.dims4()?;
    if l != weights.len() {
        return Err(Error::Contract(format!(
            "layer stack has {l} layers but {} layer weights",
            weights.len()
        )));
    }
    let w = weights.normalized()?.to_dtype(batched.dtype())?;
    let mixed = batched
        .reshape((b, l, t * d))?
        .contiguous()?
        .apply_op2(&w, LayerMix)?
        .reshape((b, t, d))?;
    if stack.rank() == 3 {
        Ok(mixed.squeeze(0)?)
    } else {
        Ok(mixed)
    }
}

/// `(B, L, N) x (L) -> (B, N)` mixing op. Autodiff through a matmul would
/// also materialize the gradient of the (usually constant) stack; this op
/// only builds it when the stack is tracked.
struct LayerMix;

fn mix<T: Copy + std::ops::Mul<Output = T> + std::ops::AddAssign + Default>(
    stack: &[T],
    w: &[T],
    b: usize,
    n: usize,
) -> Vec<T> {
    let l = w.len();
    let mut out = vec![T::default(); b * n];
    for bi in 0..b {
        let dst = &mut out[bi * n..(bi + 1) * n];
        for (li, &wl) in w.iter().enumerate() {
            let src = &stack[(bi * l + li) * n..(bi * l + li + 1) * n];
            for (o, &x) in dst.iter_mut().zip(src) {
                *o += wl * x;
            }
        }
    }
    out
}

impl candle_core::CustomOp2 for LayerMix {
    fn name(&self) -> &'static str {
        "layer-mix"
    }

    fn cpu_fwd(
        &self,
        s1: &candle_core::CpuStorage,
        l1: &candle_core::Layout,
        s2: &candle_core::CpuStorage,
        l2: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::CpuStorage as S;
        let (b, l, n) = l1.shape().dims3()?;
        let (Some((a0, a1)), Some((w0, w1))) = (l1.contiguous_offsets(), l2.contiguous_offsets()) else {
            candle_core::bail!("layer-mix expects contiguous inputs")
        };
        if w1 - w0 != l {
            candle_core::bail!("layer-mix: {l} layers but {} weights", w1 - w0)
        }
        let out = match (s1, s2) {
            (S::F32(x), S::F32(w)) => S::F32(mix(&x[a0..a1], &w[w0..w1], b, n)),
            (S::F64(x), S::F64(w)) => S::F64(mix(&x[a0..a1], &w[w0..w1], b, n)),
            _ => candle_core::bail!("layer-mix supports matching f32 or f64 inputs"),
        };
        Ok((out, (b, n).into()))
    }

    fn bwd(
        &self,
        stack: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (b, l, _) = stack.dims3()?;
        let grad_w = stack.matmul(&grad.unsqueeze(2)?)?.reshape((b, l))?.sum(0)?;
        let grad_stack = if stack.track_op() {
            Some(grad.unsqueeze(1)?.broadcast_mul(&w.reshape((1, l, 1))?)?)
        } else {
            None
        };
        Ok((grad_stack, Some(grad_w)))
    }
}

/// An encoder backend.
#[derive(Debug)]
pub enum Encoder {
    Stub(StubEncoder),
    Pretrained(Box<Backbone>),
}

impl Encoder {
    /// Builds the configured backend; pre-trained weights are registered in `params`.
    pub fn from_config(
        cfg: &EncoderConfig,
        params: &mut ParamStore,
        seed: u64,
    ) -> Result<Self> {
        match cfg.backend {
            BackendKind::Stub => Ok(Encoder::Stub(StubEncoder::new(
                seed,
                cfg.stub_layers,
                cfg.stub_dim,
            ))),
            BackendKind::Pretrained => {
                let dir = cfg.resolve_checkpoint_dir()?;
                Ok(Encoder::Pretrained(Box::new(Backbone::load(&dir, params)?)))
            }
        }
    }

    pub fn kind(&self) -> BackendKind {
        match self {
            Encoder::Stub(_) => BackendKind::Stub,
            Encoder::Pretrained(_) => BackendKind::Pretrained,
        }
    }

    pub fn n_layers(&self) -> usize {
        match self {
            Encoder::Stub(s) => s.n_layers(),
            Encoder::Pretrained(b) => b.config().num_hidden_layers + 1,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Encoder::Stub(s) => s.dim(),
            Encoder::Pretrained(b) => b.config().hidden_size,
        }
    }

    /// Frames produced for a 5 s window.
    pub fn n_time(&self) -> usize {
        match self {
            Encoder::Stub(_) => frames_for_samples(WINDOW_SAMPLES),
            Encoder::Pretrained(b) => b.frames_for(WINDOW_SAMPLES),
        }
    }

    /// Whether any encoder parameters take gradient updates.
    pub fn has_trainable_params(&self) -> bool {
        match self {
            Encoder::Stub(_) => false,
            Encoder::Pretrained(b) => !b.fully_frozen(),
        }
    }

    /// Encodes one 5 s window.
    pub fn encode(&self, waveform: &[f32], dtype: DType, device: &Device) -> Result<LayerStack> {
        check_window(waveform.len())?;
        let wave = Tensor::from_slice(waveform, (1, waveform.len()), device)?;
        let layers = self.encode_batch(&wave, dtype)?.squeeze(0)?;
        Ok(LayerStack {
            layers,
            frame_rate: crate::dataset::FRAME_RATE,
        })
    }

    /// `(batch, WINDOW_SAMPLES)` f32 waveforms to `(batch, n_layers, n_time, dim)`.
    pub fn encode_batch(&self, waves: &Tensor, dtype: DType) -> Result<Tensor> {
        let (_, n) = waves.dims2()?;
        check_window(n)?;
        match self {
            Encoder::Stub(s) => s.encode_batch(waves, dtype),
            Encoder::Pretrained(b) => b.forward(waves),
        }
    }

    /// Excludes (or re-includes) the convolutional extractor from training.
    pub fn set_extractor_frozen(&mut self, frozen: bool) {
        match self {
            Encoder::Stub(_) => {
                log::debug!("stub encoder has no extractor parameters; freeze request ignored")
            }
            Encoder::Pretrained(b) => b.set_extractor_frozen(frozen),
        }
    }

    /// Freezes every encoder parameter (probing).
    pub fn set_all_frozen(&mut self, frozen: bool) {
        if let Encoder::Pretrained(b) = self {
            b.set_all_frozen(frozen);
        }
    }

    /// Encoder parameter groups that currently receive no updates.
    pub fn frozen_groups(&self) -> Vec<ParamGroup> {
        match self {
            Encoder::Stub(_) => Vec::new(),
            Encoder::Pretrained(b) => {
                let mut g = Vec::new();
                if b.extractor_frozen() {
                    g.push(ParamGroup::Extractor);
                }
                if b.fully_frozen() {
                    g.push(ParamGroup::Backbone);
                }
                g
            }
        }
    }
}

fn check_window(n: usize) -> Result<()> {
    if n != WINDOW_SAMPLES {
        return Err(Error::Contract(format!(
            "encoder input must be exactly {WINDOW_SAMPLES} samples, got {n}"
        )));
    }
    Ok(())
}

/// Draws standard-normal values.
pub(crate) fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
