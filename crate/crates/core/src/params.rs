//! Named, grouped trainable parameters with seeded initialization.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::Linear;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Coarse parameter groups used for freezing, clipping diagnostics and checksums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Convolutional waveform feature extractor of the backbone.
    Extractor,
    /// Everything else in the backbone (projection, positional conv, transformer).
    Backbone,
    LayerWeights,
    OnsetBranch,
    FactorBranch,
    Refinement,
    IptHead,
}

impl ParamGroup {
    pub fn is_encoder(&self) -> bool {
        matches!(self, ParamGroup::Extractor | ParamGroup::Backbone)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ParamGroup::Extractor => "extractor",
            ParamGroup::Backbone => "backbone",
            ParamGroup::LayerWeights => "layer_weights",
            ParamGroup::OnsetBranch => "onset_branch",
            ParamGroup::FactorBranch => "factor_branch",
            ParamGroup::Refinement => "refinement",
            ParamGroup::IptHead => "ipt_head",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub group: ParamGroup,
    pub var: Var,
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        ParamStore {
            params: BTreeMap::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Registers `value` as a trainable variable and returns a tensor sharing its storage.
    pub fn insert(&mut self, name: &str, group: ParamGroup, value: &Tensor) -> Result<Tensor> {
        if self.params.contains_key(name) {
            return Err(Error::Contract(format!("parameter `{name}` registered twice")));
        }
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        let tensor = var.as_tensor().clone();
        self.params.insert(name.to_string(), Param { group, var });
        Ok(tensor)
    }

    pub fn uniform(
        &mut self,
        name: &str,
        group: ParamGroup,
        shape: &[usize],
        bound: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.insert(name, group, &t)
    }

    pub fn zeros(&mut self, name: &str, group: ParamGroup, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::zeros(shape, self.dtype, &self.device)?;
        self.insert(name, group, &t)
    }

    /// Fully connected layer with fan-in uniform weights and zero bias.
    pub fn linear(
        &mut self,
        prefix: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Linear> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = self.uniform(&format!("{prefix}.weight"), group, &[out_dim, in_dim], bound, rng)?;
        let b = self.zeros(&format!("{prefix}.bias"), group, &[out_dim])?;
        Ok(Linear::new(w, Some(b)))
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut g: Vec<ParamGroup> = self.params.values().map(|p| p.group).collect();
        g.sort();
        g.dedup();
        g
    }

    /// SHA-256 over the names and values of one group's parameters.
    pub fn checksum(&self, group: ParamGroup) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, p) in self.params.iter().filter(|(_, p)| p.group == group) {
            hasher.update(name.as_bytes());
            let values = p.var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Writes the selected groups to a safetensors file.
    pub fn save(&self, path: &Path, groups: &[ParamGroup]) -> Result<()> {
        let tensors: HashMap<String, Tensor> = self
            .params
            .iter()
            .filter(|(_, p)| groups.contains(&p.group))
            .map(|(k, p)| (k.clone(), p.var.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    /// Overwrites registered parameters with the values stored in `path`.
    /// Every tensor in the file must match a registered parameter's shape.
    pub fn load_values(&self, path: &Path) -> Result<usize> {
        let tensors = candle_core::safetensors::load(path, &self.device)?;
        for (name, value) in &tensors {
            let p = self.params.get(name).ok_or_else(|| {
                Error::Compatibility(format!("{}: unexpected parameter `{name}`", path.display()))
            })?;
            if p.var.shape() != value.shape() {
                return Err(Error::Compatibility(format!(
                    "{}: `{name}` has shape {:?}, model expects {:?}",
                    path.display(),
                    value.dims(),
                    p.var.dims()
                )));
            }
            p.var.set(&value.to_dtype(self.dtype)?)?;
        }
        Ok(tensors.len())
    }

    /// Deep copy with fresh storage, for snapshots.
    pub fn snapshot(&self) -> Result<HashMap<String, Tensor>> {
        self.params
            .iter()
            .map(|(k, p)| Ok((k.clone(), p.var.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, snapshot: &HashMap<String, Tensor>) -> Result<()> {
        for (k, t) in snapshot {
            if let Some(p) = self.params.get(k) {
                p.var.set(t)?;
            }
        }
        Ok(())
    }
}
