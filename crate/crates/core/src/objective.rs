//! Frame-level binary cross-entropy losses and their weighted combination.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataset::FrameGrid;
use crate::downstream::PosteriorSet;
use crate::{Error, Result};

/// Probabilities are clipped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_ipt: f64,
    pub lambda_pitch: f64,
    pub lambda_onset: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ipt: 1.0,
            lambda_pitch: 0.5,
            lambda_onset: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("loss.lambda_ipt", self.lambda_ipt),
            ("loss.lambda_pitch", self.lambda_pitch),
            ("loss.lambda_onset", self.lambda_onset),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{k} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-term loss values of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ipt: f64,
    pub pitch: f64,
    pub onset: f64,
}

/// Batched targets: `ipt (B,T,N_IPT)`, `pitch (B,T,N_pitch)`, `onset (B,T,1)`, `mask (B,T)`.
#[derive(Debug, Clone)]
pub struct Targets {
    pub ipt: Tensor,
    pub pitch: Tensor,
    pub onset: Tensor,
    pub mask: Tensor,
}

impl Targets {
    pub fn from_grids(grids: &[&FrameGrid], dtype: DType, device: &Device) -> Result<Self> {
        let first = grids.first().ok_or_else(|| Error::Contract("empty target batch".into()))?;
        let (t, ni) = first.ipt.dim();
        let np = first.pitch.ncols();
        let b = grids.len();
        let mut ipt = Vec::with_capacity(b * t * ni);
        let mut pitch = Vec::with_capacity(b * t * np);
        let mut onset = Vec::with_capacity(b * t);
        let mut mask = Vec::with_capacity(b * t);
        for g in grids {
            if g.ipt.dim() != (t, ni) || g.pitch.dim() != (t, np) {
                return Err(Error::Contract("frame grids in a batch differ in shape".into()));
            }
            ipt.extend(g.ipt.iter().map(|&x| f64::from(x)));
            pitch.extend(g.pitch.iter().map(|&x| f64::from(x)));
            onset.extend(g.onset.iter().map(|&x| f64::from(x)));
            mask.extend(g.mask.iter().map(|&x| f64::from(x)));
        }
        let mk = |v: Vec<f64>, shape: &[usize]| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
        };
        Ok(Targets {
            ipt: mk(ipt, &[b, t, ni])?,
            pitch: mk(pitch, &[b, t, np])?,
            onset: mk(onset, &[b, t, 1])?,
            mask: mk(mask, &[b, t])?,
        })
    }
}

fn masked_mean(elem: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let m = broadcast_mask(mask, elem)?;
    let count = m.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if count == 0.0 {
        log::warn!("loss over an empty mask; returning 0");
        return Ok(Tensor::zeros((), elem.dtype(), elem.device())?);
    }
    Ok(((elem * m)?.sum_all()? / count)?)
}

/// `mask` may omit trailing class axes of `like`.
fn broadcast_mask(mask: &Tensor, like: &Tensor) -> Result<Tensor> {
    let mut m = mask.to_dtype(like.dtype())?;
    while m.rank() < like.rank() {
        m = m.unsqueeze(m.rank())?;
    }
    Ok(m.broadcast_as(like.shape())?.contiguous()?)
}

fn check_shapes(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.dims() != target.dims() {
        return Err(Error::Contract(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.dims(),
            target.dims()
        )));
    }
    Ok(())
}

/// Per-element `-(w·y·ln p + (1-y)·ln(1-p))` with `w` broadcast over the last axis.
fn bce_terms(pred: &Tensor, target: &Tensor, pos_weight: Option<&Tensor>) -> Result<Tensor> {
    check_shapes(pred, target)?;
    let p = pred.clamp(EPS, 1.0 - EPS)?;
    let y = target.to_dtype(pred.dtype())?;
    let mut pos = (&y * p.log()?)?;
    if let Some(w) = pos_weight {
        pos = pos.broadcast_mul(w)?;
    }
    let neg = ((1.0 - &y)? * (1.0 - &p)?.log()?)?;
    Ok((pos + neg)?.neg()?)
}

/// Mean binary cross-entropy over masked elements.
pub fn bce(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    masked_mean(&bce_terms(pred, target, None)?, mask)
}

/// Binary cross-entropy with the positive term of class `c` scaled by `weights[c]`.
pub fn weighted_bce(pred: &Tensor, target: &Tensor, mask: &Tensor, weights: &[f64]) -> Result<Tensor> {
    let k = *pred.dims().last().unwrap_or(&0);
    if weights.len() != k {
        return Err(Error::Contract(format!(
            "{} class weights for {k} classes",
            weights.len()
        )));
    }
    let w = Tensor::from_slice(weights, k, pred.device())?.to_dtype(pred.dtype())?;
    masked_mean(&bce_terms(pred, target, Some(&w))?, mask)
}

/// `λ_ipt·weighted_bce(IPT) + λ_pitch·bce(pitch) + λ_onset·bce(onset)`.
///
/// Terms whose head output is absent (pitch and onset for single-head
/// variants, onset for the onset-free variant) or whose labels are disabled
/// (`pitch_enabled = false`) contribute 0.
pub fn total_loss(
    post: &PosteriorSet,
    targets: &Targets,
    weights: &LossWeights,
    class_weights: &[f64],
    pitch_enabled: bool,
) -> Result<(Tensor, LossBreakdown)> {
    let l_ipt = weighted_bce(&post.y_ipt, &targets.ipt, &targets.mask, class_weights)?;
    let mut total = (&l_ipt * weights.lambda_ipt)?;
    let mut br = LossBreakdown {
        ipt: scalar(&l_ipt)?,
        ..Default::default()
    };
    if let (Some(y_pitch), true) = (&post.y_pitch, pitch_enabled) {
        let l = bce(y_pitch, &targets.pitch, &targets.mask)?;
        br.pitch = scalar(&l)?;
        total = (total + (l * weights.lambda_pitch)?)?;
    }
    if let Some(onset) = &post.onset {
        let l = bce(onset, &targets.onset, &targets.mask)?;
        br.onset = scalar(&l)?;
        total = (total + (l * weights.lambda_onset)?)?;
    }
    br.total = scalar(&total)?;
    Ok((total, br))
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
