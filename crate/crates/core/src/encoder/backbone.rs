//! HuBERT-style backbone (convolutional waveform extractor, positional
//! convolution, post-norm transformer) as used by MERT-v1 checkpoints.
//!
//! A checkpoint directory holds `config.json` and either `model.safetensors`
//! or `pytorch_model.bin`. Every weight becomes a trainable parameter; the
//! convolutional extractor is tagged [`ParamGroup::Extractor`] so it can be
//! frozen independently of the transformer.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{conv_output_len, normal_vec};
use crate::params::{ParamGroup, ParamStore};
use crate::{Error, Result};

const PARAM_PREFIX: &str = "backbone.";

fn default_conv_dim() -> Vec<usize> {
    vec![512; 7]
}
fn default_conv_kernel() -> Vec<usize> {
    super::CONV_KERNELS.to_vec()
}
fn default_conv_stride() -> Vec<usize> {
    super::CONV_STRIDES.to_vec()
}
fn default_true() -> bool {
    true
}
fn default_feat_norm() -> String {
    "group".into()
}
fn default_gelu() -> String {
    "gelu".into()
}
fn default_hidden() -> usize {
    768
}
fn default_layers() -> usize {
    12
}
fn default_heads() -> usize {
    12
}
fn default_intermediate() -> usize {
    3072
}
fn default_pos_k() -> usize {
    128
}
fn default_pos_g() -> usize {
    16
}
fn default_eps() -> f64 {
    1e-5
}
fn default_relax() -> f64 {
    -1.0
}

/// Subset of the Hugging Face config the forward pass depends on; other keys
/// are ignored. Defaults are those of MERT-v1-95M.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    #[serde(default = "default_conv_dim")]
    pub conv_dim: Vec<usize>,
    #[serde(default = "default_conv_kernel")]
    pub conv_kernel: Vec<usize>,
    #[serde(default = "default_conv_stride")]
    pub conv_stride: Vec<usize>,
    #[serde(default)]
    pub conv_bias: bool,
    #[serde(default = "default_feat_norm")]
    pub feat_extract_norm: String,
    #[serde(default = "default_gelu")]
    pub feat_extract_activation: String,
    #[serde(default = "default_true")]
    pub feat_proj_layer_norm: bool,
    #[serde(default = "default_hidden")]
    pub hidden_size: usize,
    #[serde(default = "default_layers")]
    pub num_hidden_layers: usize,
    #[serde(default = "default_heads")]
    pub num_attention_heads: usize,
    #[serde(default = "default_intermediate")]
    pub intermediate_size: usize,
    #[serde(default = "default_gelu")]
    pub hidden_act: String,
    #[serde(default = "default_pos_k")]
    pub num_conv_pos_embeddings: usize,
    #[serde(default = "default_pos_g")]
    pub num_conv_pos_embedding_groups: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    #[serde(default)]
    pub do_stable_layer_norm: bool,
    /// Zero-mean, unit-variance input normalization (the MERT processor default).
    #[serde(default = "default_true")]
    pub do_normalize: bool,
    #[serde(default)]
    pub feature_extractor_cqt: bool,
    #[serde(default)]
    pub deepnorm: bool,
    #[serde(default = "default_relax")]
    pub attention_relax: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl BackboneConfig {
    fn validate(&self) -> Result<()> {
        let n = self.conv_dim.len();
        if n == 0 || self.conv_kernel.len() != n || self.conv_stride.len() != n {
            return Err(Error::Backend(
                "conv_dim, conv_kernel and conv_stride must be non-empty and equally long".into(),
            ));
        }
        if !self.hidden_size.is_multiple_of(self.num_attention_heads) {
            return Err(Error::Backend(format!(
                "hidden_size {} not divisible by {} heads",
                self.hidden_size, self.num_attention_heads
            )));
        }
        if self.feature_extractor_cqt || self.deepnorm || self.attention_relax > 0.0 {
            return Err(Error::Backend(
                "checkpoint uses CQT input, DeepNorm or attention relaxation, which this \
                 backbone does not implement"
                    .into(),
            ));
        }
        if !matches!(self.feat_extract_norm.as_str(), "group" | "layer") {
            return Err(Error::Backend(format!(
                "unsupported feat_extract_norm `{}`",
                self.feat_extract_norm
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Act {
    Gelu,
    GeluTanh,
    Relu,
}

impl Act {
    fn parse(name: &str) -> Result<Self> {
        match name {
            "gelu" => Ok(Act::Gelu),
            "gelu_new" | "gelu_fast" | "gelu_pytorch_tanh" => Ok(Act::GeluTanh),
            "relu" => Ok(Act::Relu),
            other => Err(Error::Backend(format!("unsupported activation `{other}`"))),
        }
    }

    fn apply(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        match self {
            Act::Gelu => x.gelu_erf(),
            Act::GeluTanh => x.gelu(),
            Act::Relu => x.relu(),
        }
    }
}

#[derive(Debug, Clone)]
struct Norm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl Norm {
    /// Normalizes over the last axis.
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

#[derive(Debug, Clone)]
struct Dense {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Dense {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().expect("rank >= 1");
        let flat = x.reshape(((), last))?;
        let mut y = flat.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().expect("rank >= 1") = self.weight.dim(0)?;
        y.reshape(out_dims)
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    /// Group norm (one group per channel) or per-frame layer norm.
    norm: Option<(Norm, bool)>,
}

#[derive(Debug, Clone)]
struct PosConv {
    weight_g: Tensor,
    weight_v: Tensor,
    bias: Tensor,
    groups: usize,
    kernel: usize,
}

impl PosConv {
    /// `x` is `(batch, time, hidden)`.
    fn forward(&self, x: &Tensor, act: Act) -> candle_core::Result<Tensor> {
        // weight norm over every axis except the kernel axis
        let norm = self.weight_v.sqr()?.sum_keepdim((0, 1))?.sqrt()?;
        let w = self
            .weight_v
            .broadcast_div(&norm)?
            .broadcast_mul(&self.weight_g)?;
        let xt = x.transpose(1, 2)?.contiguous()?;
        let mut y = xt.conv1d(&w, self.kernel / 2, 1, 1, self.groups)?;
        y = y.broadcast_add(&self.bias.reshape((1, (), 1))?)?;
        if self.kernel.is_multiple_of(2) {
            let t = y.dim(2)?;
            y = y.narrow(2, 0, t - 1)?;
        }
        act.apply(&y)?.transpose(1, 2)?.contiguous()
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    q: Dense,
    k: Dense,
    v: Dense,
    out: Dense,
    attn_norm: Norm,
    ff_in: Dense,
    ff_out: Dense,
    final_norm: Norm,
}

/// The loaded backbone.
#[derive(Debug)]
pub struct Backbone {
    config: BackboneConfig,
    conv: Vec<ConvLayer>,
    conv_act: Act,
    proj_norm: Option<Norm>,
    projection: Dense,
    pos_conv: PosConv,
    encoder_norm: Norm,
    layers: Vec<EncoderLayer>,
    act: Act,
    extractor_frozen: bool,
    all_frozen: bool,
}

fn read_weights(dir: &Path) -> Result<HashMap<String, Tensor>> {
    let st = dir.join("model.safetensors");
    let bin = dir.join("pytorch_model.bin");
    let device = Device::Cpu;
    if st.exists() {
        Ok(candle_core::safetensors::load(&st, &device)?)
    } else if bin.exists() {
        Ok(candle_core::pickle::read_all(&bin)?.into_iter().collect())
    } else {
        Err(Error::Backend(format!(
            "{}: neither model.safetensors nor pytorch_model.bin found; download the \
             pre-trained checkpoint into this directory",
            dir.display()
        )))
    }
}

struct Loader<'a> {
    weights: HashMap<String, Tensor>,
    prefix: String,
    params: &'a mut ParamStore,
}

impl Loader<'_> {
    fn has(&self, name: &str) -> bool {
        self.weights.contains_key(&format!("{}{name}", self.prefix))
    }

    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let key = format!("{}{name}", self.prefix);
        let t = self
            .weights
            .remove(&key)
            .ok_or_else(|| Error::Backend(format!("checkpoint is missing `{key}`")))?;
        if t.dims() != shape {
            return Err(Error::Backend(format!(
                "`{key}` has shape {:?}, config implies {:?}",
                t.dims(),
                shape
            )));
        }
        let group = if name.starts_with("feature_extractor.") {
            ParamGroup::Extractor
        } else {
            ParamGroup::Backbone
        };
        self.params.insert(&format!("{PARAM_PREFIX}{name}"), group, &t)
    }

    fn dense(&mut self, name: &str, out: usize, inp: usize) -> Result<Dense> {
        Ok(Dense {
            weight: self.take(&format!("{name}.weight"), &[out, inp])?,
            bias: Some(self.take(&format!("{name}.bias"), &[out])?),
        })
    }

    fn norm(&mut self, name: &str, dim: usize, eps: f64) -> Result<Norm> {
        Ok(Norm {
            weight: self.take(&format!("{name}.weight"), &[dim])?,
            bias: self.take(&format!("{name}.bias"), &[dim])?,
            eps,
        })
    }
}

fn detect_prefix(weights: &HashMap<String, Tensor>) -> Result<String> {
    const ANCHOR: &str = "feature_extractor.conv_layers.0.conv.weight";
    weights
        .keys()
        .find_map(|k| k.strip_suffix(ANCHOR).map(str::to_string))
        .ok_or_else(|| {
            Error::Backend(format!(
                "checkpoint has no `{ANCHOR}`; not a HuBERT-style model"
            ))
        })
}

impl Backbone {
    /// Loads `config.json` plus weights from `dir` and registers the weights in `params`.
    pub fn load(dir: &Path, params: &mut ParamStore) -> Result<Self> {
        let cfg_path = dir.join("config.json");
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| {
            Error::Backend(format!(
                "cannot read {}: {e}; point `encoder.checkpoint_dir` (or IPT_ENCODER_DIR) at a \
                 pre-trained checkpoint directory",
                cfg_path.display()
            ))
        })?;
        let config: BackboneConfig = serde_json::from_str(&text)?;
        let weights = read_weights(dir)?;
        Self::from_weights(config, weights, params)
    }

    pub fn from_weights(
        config: BackboneConfig,
        weights: HashMap<String, Tensor>,
        params: &mut ParamStore,
    ) -> Result<Self> {
        config.validate()?;
        let prefix = detect_prefix(&weights)?;
        let mut ld = Loader {
            weights,
            prefix,
            params,
        };
        let eps = config.layer_norm_eps;
        let group_norm = config.feat_extract_norm == "group";

        let mut conv = Vec::new();
        let mut in_ch = 1;
        for (i, ((&ch, &k), &s)) in config
            .conv_dim
            .iter()
            .zip(&config.conv_kernel)
            .zip(&config.conv_stride)
            .enumerate()
        {
            let base = format!("feature_extractor.conv_layers.{i}");
            let weight = ld.take(&format!("{base}.conv.weight"), &[ch, in_ch, k])?;
            let bias = if config.conv_bias {
                Some(ld.take(&format!("{base}.conv.bias"), &[ch])?)
            } else {
                None
            };
            let norm = if (group_norm && i == 0) || !group_norm {
                Some((ld.norm(&format!("{base}.layer_norm"), ch, eps)?, group_norm))
            } else {
                None
            };
            conv.push(ConvLayer {
                weight,
                bias,
                stride: s,
                norm,
            });
            in_ch = ch;
        }

        let h = config.hidden_size;
        let proj_norm = if config.feat_proj_layer_norm {
            Some(ld.norm("feature_projection.layer_norm", in_ch, eps)?)
        } else {
            None
        };
        let projection = ld.dense("feature_projection.projection", h, in_ch)?;

        let (pk, pg) = (config.num_conv_pos_embeddings, config.num_conv_pos_embedding_groups);
        let pos = "encoder.pos_conv_embed.conv";
        let (g_name, v_name) = if ld.has(&format!("{pos}.weight_g")) {
            (format!("{pos}.weight_g"), format!("{pos}.weight_v"))
        } else {
            (
                format!("{pos}.parametrizations.weight.original0"),
                format!("{pos}.parametrizations.weight.original1"),
            )
        };
        let pos_conv = PosConv {
            weight_g: ld.take(&g_name, &[1, 1, pk])?,
            weight_v: ld.take(&v_name, &[h, h / pg, pk])?,
            bias: ld.take(&format!("{pos}.bias"), &[h])?,
            groups: pg,
            kernel: pk,
        };
        let encoder_norm = ld.norm("encoder.layer_norm", h, eps)?;

        let inter = config.intermediate_size;
        let mut layers = Vec::new();
        for i in 0..config.num_hidden_layers {
            let b = format!("encoder.layers.{i}");
            layers.push(EncoderLayer {
                q: ld.dense(&format!("{b}.attention.q_proj"), h, h)?,
                k: ld.dense(&format!("{b}.attention.k_proj"), h, h)?,
                v: ld.dense(&format!("{b}.attention.v_proj"), h, h)?,
                out: ld.dense(&format!("{b}.attention.out_proj"), h, h)?,
                attn_norm: ld.norm(&format!("{b}.layer_norm"), h, eps)?,
                ff_in: ld.dense(&format!("{b}.feed_forward.intermediate_dense"), inter, h)?,
                ff_out: ld.dense(&format!("{b}.feed_forward.output_dense"), h, inter)?,
                final_norm: ld.norm(&format!("{b}.final_layer_norm"), h, eps)?,
            });
        }
        let leftover: Vec<&String> = ld
            .weights
            .keys()
            .filter(|k| k.starts_with(&ld.prefix) && k.contains("encoder.layers."))
            .collect();
        if !leftover.is_empty() {
            log::warn!("{} unused transformer tensors in checkpoint", leftover.len());
        }

        Ok(Backbone {
            conv_act: Act::parse(&config.feat_extract_activation)?,
            act: Act::parse(&config.hidden_act)?,
            config,
            conv,
            proj_norm,
            projection,
            pos_conv,
            encoder_norm,
            layers,
            extractor_frozen: false,
            all_frozen: false,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn frames_for(&self, samples: usize) -> usize {
        conv_output_len(samples, &self.config.conv_kernel, &self.config.conv_stride)
    }

    pub fn set_extractor_frozen(&mut self, frozen: bool) {
        self.extractor_frozen = frozen;
    }

    pub fn set_all_frozen(&mut self, frozen: bool) {
        self.all_frozen = frozen;
    }

    pub fn extractor_frozen(&self) -> bool {
        self.extractor_frozen || self.all_frozen
    }

    pub fn fully_frozen(&self) -> bool {
        self.all_frozen
    }

    /// Writes the backbone parameters held in `params` as a checkpoint
    /// directory loadable by [`Backbone::load`].
    pub fn save(&self, params: &ParamStore, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tensors: HashMap<String, Tensor> = params
            .iter()
            .filter(|(_, p)| p.group.is_encoder())
            .filter_map(|(k, p)| {
                k.strip_prefix(PARAM_PREFIX)
                    .map(|name| (name.to_string(), p.var.as_tensor().clone()))
            })
            .collect();
        candle_core::safetensors::save(&tensors, dir.join("model.safetensors"))?;
        let cfg = dir.join("config.json");
        std::fs::write(&cfg, serde_json::to_string_pretty(&self.config)?)
            .map_err(|e| Error::io(&cfg, e))
    }

    fn extract(&self, waves: &Tensor) -> candle_core::Result<Tensor> {
        let mut x = waves.unsqueeze(1)?;
        for layer in &self.conv {
            x = x.conv1d(&layer.weight, 0, layer.stride, 1, 1)?;
            if let Some(b) = &layer.bias {
                x = x.broadcast_add(&b.reshape((1, (), 1))?)?;
            }
            if let Some((norm, per_channel)) = &layer.norm {
                x = if *per_channel {
                    // group norm with one group per channel: normalize over time
                    let g = Norm {
                        weight: norm.weight.reshape(((), 1))?,
                        bias: norm.bias.reshape(((), 1))?,
                        eps: norm.eps,
                    };
                    g.forward(&x)?
                } else {
                    norm.forward(&x.transpose(1, 2)?)?.transpose(1, 2)?
                };
            }
            x = self.conv_act.apply(&x)?;
        }
        x.transpose(1, 2)?.contiguous()
    }

    fn attention(&self, layer: &EncoderLayer, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, t, h) = x.dims3()?;
        let heads = self.config.num_attention_heads;
        let dh = h / heads;
        let split = |y: Tensor| -> candle_core::Result<Tensor> {
            y.reshape((b, t, heads, dh))?.transpose(1, 2)?.contiguous()
        };
        let q = split((layer.q.forward(x)? * (dh as f64).powf(-0.5))?)?;
        let k = split(layer.k.forward(x)?)?;
        let v = split(layer.v.forward(x)?)?;
        let scores = q.matmul(&k.t()?)?;
        let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let ctx = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, t, h))?;
        layer.out.forward(&ctx)
    }

    fn layer_forward(&self, layer: &EncoderLayer, x: &Tensor) -> candle_core::Result<Tensor> {
        if self.config.do_stable_layer_norm {
            let a = (x + self.attention(layer, &layer.attn_norm.forward(x)?)?)?;
            let f = layer
                .ff_out
                .forward(&self.act.apply(&layer.ff_in.forward(&layer.final_norm.forward(&a)?)?)?)?;
            a + f
        } else {
            let a = layer.attn_norm.forward(&(x + self.attention(layer, x)?)?)?;
            let f = layer.ff_out.forward(&self.act.apply(&layer.ff_in.forward(&a)?)?)?;
            layer.final_norm.forward(&(a + f)?)
        }
    }

    /// `(batch, samples)` to `(batch, num_hidden_layers + 1, n_time, hidden)`.
    pub fn forward(&self, waves: &Tensor) -> Result<Tensor> {
        let dtype = self.projection.weight.dtype();
        let mut w = waves.to_dtype(dtype)?;
        if self.config.do_normalize {
            let mean = w.mean_keepdim(1)?;
            let centered = w.broadcast_sub(&mean)?;
            let std = (centered.sqr()?.mean_keepdim(1)? + 1e-7)?.sqrt()?;
            w = centered.broadcast_div(&std)?;
        }
        let mut feats = self.extract(&w)?;
        if self.extractor_frozen() {
            feats = feats.detach();
        }
        if let Some(n) = &self.proj_norm {
            feats = n.forward(&feats)?;
        }
        let mut x = self.projection.forward(&feats)?;
        x = (&x + self.pos_conv.forward(&x, self.act)?)?;
        let mut hidden = Vec::with_capacity(self.layers.len() + 1);
        if !self.config.do_stable_layer_norm {
            x = self.encoder_norm.forward(&x)?;
        }
        for layer in &self.layers {
            hidden.push(x.clone());
            x = self.layer_forward(layer, &x)?;
        }
        if self.config.do_stable_layer_norm {
            x = self.encoder_norm.forward(&x)?;
        }
        hidden.push(x);
        let stacked = Tensor::stack(&hidden, 1)?;
        Ok(if self.all_frozen {
            stacked.detach()
        } else {
            stacked
        })
    }
}

/// Writes a randomly initialized checkpoint for `config` into `dir`.
/// Used for smoke tests of the loading and freezing paths.
pub fn init_random_checkpoint(dir: &Path, config: &BackboneConfig, seed: u64) -> Result<()> {
    config.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let device = Device::Cpu;
    let mut out: HashMap<String, Tensor> = HashMap::new();
    let mut rand = |name: String, shape: &[usize], scale: f32, out: &mut HashMap<String, Tensor>| -> Result<()> {
        let n = shape.iter().product();
        let v: Vec<f32> = normal_vec(&mut rng, n).into_iter().map(|x| x * scale).collect();
        out.insert(name, Tensor::from_vec(v, shape, &device)?);
        Ok(())
    };
    let ones = |name: String, dim: usize, out: &mut HashMap<String, Tensor>| -> Result<()> {
        out.insert(format!("{name}.weight"), Tensor::ones(dim, DType::F32, &device)?);
        out.insert(format!("{name}.bias"), Tensor::zeros(dim, DType::F32, &device)?);
        Ok(())
    };
    let group_norm = config.feat_extract_norm == "group";
    let mut in_ch = 1;
    for (i, (&ch, &k)) in config.conv_dim.iter().zip(&config.conv_kernel).enumerate() {
        let base = format!("feature_extractor.conv_layers.{i}");
        rand(format!("{base}.conv.weight"), &[ch, in_ch, k], (1.0 / (in_ch * k) as f32).sqrt(), &mut out)?;
        if config.conv_bias {
            out.insert(format!("{base}.conv.bias"), Tensor::zeros(ch, DType::F32, &device)?);
        }
        if !group_norm || i == 0 {
            ones(format!("{base}.layer_norm"), ch, &mut out)?;
        }
        in_ch = ch;
    }
    let h = config.hidden_size;
    let mut dense = |name: &str, o: usize, i: usize, out: &mut HashMap<String, Tensor>| -> Result<()> {
        rand(format!("{name}.weight"), &[o, i], (1.0 / i as f32).sqrt(), out)?;
        out.insert(format!("{name}.bias"), Tensor::zeros(o, DType::F32, &device)?);
        Ok(())
    };
    if config.feat_proj_layer_norm {
        ones("feature_projection.layer_norm".into(), in_ch, &mut out)?;
    }
    dense("feature_projection.projection", h, in_ch, &mut out)?;
    let (pk, pg) = (config.num_conv_pos_embeddings, config.num_conv_pos_embedding_groups);
    let pos = "encoder.pos_conv_embed.conv";
    let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let v: Vec<f32> = normal_vec(&mut rng2, h * (h / pg) * pk);
    out.insert(format!("{pos}.weight_v"), Tensor::from_vec(v, (h, h / pg, pk), &device)?);
    out.insert(format!("{pos}.weight_g"), Tensor::full(0.5f32, (1, 1, pk), &device)?);
    out.insert(format!("{pos}.bias"), Tensor::zeros(h, DType::F32, &device)?);
    ones("encoder.layer_norm".into(), h, &mut out)?;
    for l in 0..config.num_hidden_layers {
        let b = format!("encoder.layers.{l}");
        for p in ["q_proj", "k_proj", "v_proj", "out_proj"] {
            dense(&format!("{b}.attention.{p}"), h, h, &mut out)?;
        }
        ones(format!("{b}.layer_norm"), h, &mut out)?;
        dense(&format!("{b}.feed_forward.intermediate_dense"), config.intermediate_size, h, &mut out)?;
        dense(&format!("{b}.feed_forward.output_dense"), h, config.intermediate_size, &mut out)?;
        ones(format!("{b}.final_layer_norm"), h, &mut out)?;
    }
    candle_core::safetensors::save(&out, dir.join("model.safetensors"))?;
    let cfg = dir.join("config.json");
    std::fs::write(&cfg, serde_json::to_string_pretty(config)?).map_err(|e| Error::io(&cfg, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Encoder, WINDOW_SAMPLES};

    pub(crate) fn tiny() -> BackboneConfig {
        BackboneConfig {
            conv_dim: vec![8; 7],
            hidden_size: 16,
            num_hidden_layers: 2,
            num_attention_heads: 4,
            intermediate_size: 32,
            num_conv_pos_embeddings: 8,
            num_conv_pos_embedding_groups: 4,
            ..Default::default()
        }
    }

    #[test]
    fn default_config_matches_published_base_model() {
        let c = BackboneConfig::default();
        assert_eq!(c.hidden_size, 768);
        assert_eq!(c.num_hidden_layers, 12);
        assert_eq!(conv_output_len(WINDOW_SAMPLES, &c.conv_kernel, &c.conv_stride), 374);
    }

    #[test]
    fn tiny_checkpoint_loads_and_encodes() {
        let dir = tempfile::tempdir().unwrap();
        init_random_checkpoint(dir.path(), &tiny(), 3).unwrap();
        let mut params = ParamStore::new(DType::F32, Device::Cpu);
        let enc = Encoder::Pretrained(Box::new(Backbone::load(dir.path(), &mut params).unwrap()));
        assert_eq!(enc.n_layers(), 3);
        let wave: Vec<f32> = (0..WINDOW_SAMPLES).map(|i| ((i as f32) * 0.013).sin()).collect();
        let stack = enc.encode(&wave, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(stack.layers.dims(), &[3, 374, 16]);
        let v = stack.layers.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| x.is_finite()));
        let spread = v.iter().cloned().fold(f32::MIN, f32::max) - v.iter().cloned().fold(f32::MAX, f32::min);
        assert!(spread > 1e-3, "features are constant");
        assert!(params.groups().contains(&ParamGroup::Extractor));
    }

    #[test]
    fn missing_weights_is_backend_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("config.json"), "{}").unwrap();
        let mut params = ParamStore::new(DType::F32, Device::Cpu);
        let err = Backbone::load(dir.path(), &mut params).unwrap_err();
        assert!(matches!(err, Error::Backend(_)), "{err}");
    }

    #[test]
    fn save_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        init_random_checkpoint(dir.path(), &tiny(), 4).unwrap();
        let mut p1 = ParamStore::new(DType::F32, Device::Cpu);
        let b1 = Backbone::load(dir.path(), &mut p1).unwrap();
        let out = tempfile::tempdir().unwrap();
        b1.save(&p1, out.path()).unwrap();
        let mut p2 = ParamStore::new(DType::F32, Device::Cpu);
        Backbone::load(out.path(), &mut p2).unwrap();
        for g in [ParamGroup::Extractor, ParamGroup::Backbone] {
            assert_eq!(p1.checksum(g).unwrap(), p2.checksum(g).unwrap());
        }
    }
}
