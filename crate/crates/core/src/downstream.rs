//! Multi-task heads on top of the mixed encoder features.
//!
//! The full head has an onset branch and a factorized branch whose output
//! tensor `D (batch, time, n_ipt, n_pitch)` is summed along each axis into raw
//! IPT and pitch posteriorgrams. Each marginal is refined by a self-attention
//! block that also sees the (detached) onset posterior.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor, D};
use candle_nn::{Linear, Module};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ClassMap;
use crate::params::{ParamGroup, ParamStore};
use crate::{Error, Result};

/// Model variants of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Frozen encoder, single IPT head.
    #[serde(rename = "IPT_probing")]
    IptProbing,
    /// Finetuned encoder, single IPT head.
    #[serde(rename = "IPT_finetune")]
    IptFinetune,
    /// Factorized IPT/pitch head without onsets.
    #[serde(rename = "IPT+Pitch")]
    IptPitch,
    /// Full head, events decoded without the onset gate.
    #[serde(rename = "IPT+Pitch+Onset")]
    IptPitchOnset,
    /// Full head with onset-gated decoding.
    #[serde(rename = "MERTech")]
    MerTech,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::IptProbing,
        Variant::IptFinetune,
        Variant::IptPitch,
        Variant::IptPitchOnset,
        Variant::MerTech,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::IptProbing => "IPT_probing",
            Variant::IptFinetune => "IPT_finetune",
            Variant::IptPitch => "IPT+Pitch",
            Variant::IptPitchOnset => "IPT+Pitch+Onset",
            Variant::MerTech => "MERTech",
        }
    }

    pub fn has_onset(&self) -> bool {
        matches!(self, Variant::IptPitchOnset | Variant::MerTech)
    }

    pub fn has_pitch(&self) -> bool {
        matches!(self, Variant::IptPitch | Variant::IptPitchOnset | Variant::MerTech)
    }

    pub fn gated_decoding(&self) -> bool {
        matches!(self, Variant::MerTech)
    }

    pub fn freezes_encoder(&self) -> bool {
        matches!(self, Variant::IptProbing)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.as_str()).collect();
                Error::Config(format!("unknown variant `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

/// Head hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: usize,
    pub dropout: f64,
    pub attention_heads: usize,
    pub detach_onset: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: 512,
            dropout: 0.2,
            attention_heads: 4,
            detach_onset: true,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.attention_heads == 0 {
            return Err(Error::Config("model.hidden and model.attention_heads must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("model.dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Forward mode. Dropout masks are drawn from the supplied generator in training.
pub enum Mode<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

impl Mode<'_> {
    fn dropout(&mut self, x: &Tensor, p: f64) -> Result<Tensor> {
        match self {
            Mode::Eval => Ok(x.clone()),
            Mode::Train(_) if p == 0.0 => Ok(x.clone()),
            Mode::Train(rng) => {
                let scale = 1.0 / (1.0 - p);
                let keep: Vec<f64> = (0..x.elem_count())
                    .map(|_| if rng.random::<f64>() >= p { scale } else { 0.0 })
                    .collect();
                let m = Tensor::from_vec(keep, x.shape(), x.device())?.to_dtype(x.dtype())?;
                Ok((x * m)?)
            }
        }
    }
}

/// Applies `f` to `x` flattened to `(rows, last)` and restores the leading axes.
/// Plain 2-D matmuls are much cheaper than broadcast ones, backward included.
fn frame_wise(x: &Tensor, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let last = *dims.last().ok_or_else(|| Error::Contract("scalar input".into()))?;
    let y = f(&x.reshape(((), last))?)?;
    let mut out = dims;
    *out.last_mut().expect("non-empty") = y.dim(1)?;
    Ok(y.reshape(out)?)
}

/// `FC(dim→hidden) → dropout → ReLU → FC(hidden→out)`, applied per frame.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
    pub dropout: f64,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        dim: usize,
        hidden: usize,
        out: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Mlp {
            hidden: params.linear(&format!("{prefix}.hidden"), group, dim, hidden, rng)?,
            out: params.linear(&format!("{prefix}.out"), group, hidden, out, rng)?,
            dropout,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        frame_wise(x, |x2| {
            let h = self.hidden.forward(x2)?;
            let h = mode.dropout(&h, self.dropout)?.relu()?;
            Ok(self.out.forward(&h)?)
        })
    }
}

/// Onset posterior `(batch, time, 1)`.
#[derive(Debug, Clone)]
pub struct OnsetBranch {
    pub mlp: Mlp,
}

impl OnsetBranch {
    pub fn forward(&self, features: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.mlp.forward(features, mode)?)?)
    }
}

/// Raw factor tensor `(batch, time, n_ipt, n_pitch)`.
#[derive(Debug, Clone)]
pub struct FactorBranch {
    pub mlp: Mlp,
    pub n_ipt: usize,
    pub n_pitch: usize,
}

impl FactorBranch {
    pub fn forward(&self, features: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let flat = self.mlp.forward(features, mode)?;
        let (b, t, _) = flat.dims3()?;
        Ok(flat.reshape((b, t, self.n_ipt, self.n_pitch))?)
    }
}

/// Sums the factor tensor over pitch (IPT marginal) and over IPT (pitch marginal).
/// Accepts `(time, n_ipt, n_pitch)` or a leading batch axis.
pub fn marginalize(d: &Tensor) -> Result<(Tensor, Tensor)> {
    let r = d.rank();
    if r < 3 {
        return Err(Error::Contract(format!("factor tensor must have rank ≥ 3, got {r}")));
    }
    Ok((d.sum(r - 1)?, d.sum(r - 2)?))
}

/// Self-attention refinement of one marginal posteriorgram.
#[derive(Debug, Clone)]
pub struct Refiner {
    pub input: Linear,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub out: Linear,
    pub heads: usize,
    pub d_model: usize,
    pub with_onset: bool,
}

impl Refiner {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamStore,
        prefix: &str,
        k: usize,
        with_onset: bool,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let in_dim = k + usize::from(with_onset);
        let d_model = in_dim.div_ceil(heads) * heads;
        let g = ParamGroup::Refinement;
        Ok(Refiner {
            input: params.linear(&format!("{prefix}.input"), g, in_dim, d_model, rng)?,
            q: params.linear(&format!("{prefix}.q"), g, d_model, d_model, rng)?,
            k: params.linear(&format!("{prefix}.k"), g, d_model, d_model, rng)?,
            v: params.linear(&format!("{prefix}.v"), g, d_model, d_model, rng)?,
            o: params.linear(&format!("{prefix}.o"), g, d_model, d_model, rng)?,
            out: params.linear(&format!("{prefix}.out"), g, d_model, k, rng)?,
            heads,
            d_model,
            with_onset,
        })
    }

    /// `marginal (batch, time, K)`, `onset (batch, time, 1)`, optional key
    /// mask `(batch, time)` with 1 on valid frames. Returns `(batch, time, K)`
    /// probabilities.
    pub fn forward(
        &self,
        marginal: &Tensor,
        onset: Option<&Tensor>,
        detach_onset: bool,
        key_mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        let (b, t, _) = marginal.dims3()?;
        let x = match (self.with_onset, onset) {
            (true, Some(o)) => {
                let (ob, ot, _) = o.dims3()?;
                if (ob, ot) != (b, t) {
                    return Err(Error::Contract(format!(
                        "onset posterior is ({ob}, {ot}) but marginal is ({b}, {t})"
                    )));
                }
                let o = if detach_onset { o.detach() } else { o.clone() };
                Tensor::cat(&[marginal, &o], D::Minus1)?
            }
            (false, None) => marginal.clone(),
            (true, None) => return Err(Error::Contract("refiner expects an onset posterior".into())),
            (false, Some(_)) => return Err(Error::Contract("refiner was built without onset input".into())),
        };
        let x = frame_wise(&x, |x| Ok(self.input.forward(x)?))?;
        let h = (&x + self.attend(&x, key_mask)?)?;
        let y = frame_wise(&h, |h| Ok(self.out.forward(h)?))?;
        Ok(candle_nn::ops::sigmoid(&y)?)
    }

    fn attend(&self, x: &Tensor, key_mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, t, dm) = x.dims3()?;
        let dh = dm / self.heads;
        let split = |y: Tensor| -> Result<Tensor> {
            Ok(y.reshape((b, t, self.heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let lin = |l: &Linear| frame_wise(x, |x| Ok(l.forward(x)?));
        let q = split(lin(&self.q)?)?;
        let k = split(lin(&self.k)?)?;
        let v = split(lin(&self.v)?)?;
        let mut scores = (q.matmul(&k.t()?)? / (dh as f64).sqrt())?;
        if let Some(m) = key_mask {
            // -1e9 on padded keys
            let bias = ((m.to_dtype(x.dtype())? - 1.0)? * 1e9)?.reshape((b, 1, 1, t))?;
            scores = scores.broadcast_add(&bias)?;
        }
        let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let ctx = probs.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, t, dm))?;
        frame_wise(&ctx, |c| Ok(self.o.forward(c)?))
    }
}

/// Model outputs for a batch; every tensor is `(batch, time, ·)`.
#[derive(Debug, Clone)]
pub struct PosteriorSet {
    pub onset: Option<Tensor>,
    pub p_ipt: Option<Tensor>,
    pub p_pitch: Option<Tensor>,
    pub y_ipt: Tensor,
    pub y_pitch: Option<Tensor>,
}

impl PosteriorSet {
    pub fn n_time(&self) -> usize {
        self.y_ipt.dims()[1]
    }

    /// Batch item `i` with the batch axis removed.
    pub fn item(&self, i: usize) -> Result<PosteriorSet> {
        let pick = |t: &Tensor| -> Result<Tensor> { Ok(t.get(i)?) };
        Ok(PosteriorSet {
            onset: self.onset.as_ref().map(pick).transpose()?,
            p_ipt: self.p_ipt.as_ref().map(pick).transpose()?,
            p_pitch: self.p_pitch.as_ref().map(pick).transpose()?,
            y_ipt: pick(&self.y_ipt)?,
            y_pitch: self.y_pitch.as_ref().map(pick).transpose()?,
        })
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum Body {
    Single(Mlp),
    Factorized {
        onset: Option<OnsetBranch>,
        factor: FactorBranch,
        refine_pitch: Refiner,
        refine_ipt: Refiner,
    },
}

/// The downstream head of one variant.
#[derive(Debug, Clone)]
pub struct DownstreamHead {
    pub variant: Variant,
    pub config: HeadConfig,
    body: Body,
}

impl DownstreamHead {
    pub fn new(
        params: &mut ParamStore,
        variant: Variant,
        class_map: &ClassMap,
        dim: usize,
        config: HeadConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (n_ipt, n_pitch) = (class_map.n_ipt(), class_map.n_pitch());
        let body = if variant.has_pitch() {
            let onset = if variant.has_onset() {
                Some(OnsetBranch {
                    mlp: Mlp::new(params, "head.onset", ParamGroup::OnsetBranch, dim, config.hidden, 1, config.dropout, rng)?,
                })
            } else {
                None
            };
            let factor = FactorBranch {
                mlp: Mlp::new(
                    params,
                    "head.factor",
                    ParamGroup::FactorBranch,
                    dim,
                    config.hidden,
                    n_ipt * n_pitch,
                    config.dropout,
                    rng,
                )?,
                n_ipt,
                n_pitch,
            };
            let with_onset = onset.is_some();
            Body::Factorized {
                refine_pitch: Refiner::new(params, "head.refine_pitch", n_pitch, with_onset, config.attention_heads, rng)?,
                refine_ipt: Refiner::new(params, "head.refine_ipt", n_ipt, with_onset, config.attention_heads, rng)?,
                onset,
                factor,
            }
        } else {
            Body::Single(Mlp::new(params, "head.ipt", ParamGroup::IptHead, dim, config.hidden, n_ipt, config.dropout, rng)?)
        };
        Ok(DownstreamHead { variant, config, body })
    }

    /// `features (batch, time, dim)`; `key_mask (batch, time)` marks valid frames.
    pub fn forward(&self, features: &Tensor, key_mask: Option<&Tensor>, mode: &mut Mode) -> Result<PosteriorSet> {
        if features.rank() != 3 {
            return Err(Error::Contract(format!(
                "features must be (batch, time, dim), got {:?}",
                features.dims()
            )));
        }
        match &self.body {
            Body::Single(mlp) => Ok(PosteriorSet {
                onset: None,
                p_ipt: None,
                p_pitch: None,
                y_ipt: candle_nn::ops::sigmoid(&mlp.forward(features, mode)?)?,
                y_pitch: None,
            }),
            Body::Factorized {
                onset,
                factor,
                refine_pitch,
                refine_ipt,
            } => {
                let onset = onset.as_ref().map(|o| o.forward(features, mode)).transpose()?;
                let d = factor.forward(features, mode)?;
                let (p_ipt, p_pitch) = marginalize(&d)?;
                let detach = self.config.detach_onset;
                let y_pitch = refine_pitch.forward(&p_pitch, onset.as_ref(), detach, key_mask)?;
                let y_ipt = refine_ipt.forward(&p_ipt, onset.as_ref(), detach, key_mask)?;
                Ok(PosteriorSet {
                    onset,
                    p_ipt: Some(p_ipt),
                    p_pitch: Some(p_pitch),
                    y_ipt,
                    y_pitch: Some(y_pitch),
                })
            }
        }
    }

    /// The factor tensor alone, for inspection.
    pub fn factor(&self, features: &Tensor) -> Result<Option<Tensor>> {
        match &self.body {
            Body::Factorized { factor, .. } => Ok(Some(factor.forward(features, &mut Mode::Eval)?)),
            Body::Single(_) => Ok(None),
        }
    }
}

/// Converts a `(time, k)` tensor to row-major f64 values.
pub fn to_array2(t: &Tensor) -> Result<ndarray::Array2<f64>> {
    let (r, c) = t.dims2()?;
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(ndarray::Array2::from_shape_vec((r, c), v).expect("shape matches"))
}
