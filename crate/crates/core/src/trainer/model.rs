//! The assembled model (encoder, layer weights, head) and its checkpoint format.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ClassMap;
use crate::downstream::{DownstreamHead, HeadConfig, Mode, PosteriorSet, Variant};
use crate::encoder::{weighted_sum, Encoder, EncoderConfig, LayerWeights};
use crate::params::{ParamGroup, ParamStore};
use crate::{Error, Result};

pub const CHECKPOINT_META: &str = "checkpoint.json";
pub const CHECKPOINT_PARAMS: &str = "params.safetensors";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(&self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Everything needed to rebuild a model before its trained values are loaded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub class_map: ClassMap,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub freeze_extractor: bool,
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
}

impl ModelSpec {
    pub fn new(variant: Variant, class_map: ClassMap, seed: u64) -> Self {
        ModelSpec {
            variant,
            class_map,
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            freeze_extractor: true,
            seed,
            precision: Precision::F32,
        }
    }
}

#[derive(Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub layer_weights: LayerWeights,
    pub head: DownstreamHead,
}

impl Model {
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        spec.class_map.validate()?;
        let mut params = ParamStore::new(spec.precision.dtype(), Device::Cpu);
        let mut encoder = Encoder::from_config(&spec.encoder, &mut params, spec.seed)?;
        if spec.freeze_extractor {
            encoder.set_extractor_frozen(true);
        }
        if spec.variant.freezes_encoder() {
            encoder.set_all_frozen(true);
        }
        let layer_weights = LayerWeights::new(&mut params, encoder.n_layers())?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let head = DownstreamHead::new(
            &mut params,
            spec.variant,
            &spec.class_map,
            encoder.dim(),
            spec.head.clone(),
            &mut rng,
        )?;
        Ok(Model {
            spec: spec.clone(),
            params,
            encoder,
            layer_weights,
            head,
        })
    }

    pub fn variant(&self) -> Variant {
        self.spec.variant
    }

    pub fn class_map(&self) -> &ClassMap {
        &self.spec.class_map
    }

    pub fn n_time(&self) -> usize {
        self.encoder.n_time()
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Groups that receive updates during training.
    pub fn trainable_groups(&self) -> Vec<ParamGroup> {
        let frozen = self.encoder.frozen_groups();
        self.params.groups().into_iter().filter(|g| !frozen.contains(g)).collect()
    }

    /// `(batch, samples)` waveforms to `(batch, layers, time, dim)`.
    pub fn encode(&self, waves: &[&[f32]]) -> Result<Tensor> {
        let n = waves.first().map_or(0, |w| w.len());
        let flat: Vec<f32> = waves.iter().flat_map(|w| w.iter().copied()).collect();
        let t = Tensor::from_vec(flat, (waves.len(), n), &Device::Cpu)?;
        self.encoder.encode_batch(&t, self.dtype())
    }

    /// Head outputs from a layer stack; `mask (batch, time)` marks valid frames.
    pub fn forward_stack(&self, stack: &Tensor, mask: Option<&Tensor>, mode: &mut Mode) -> Result<PosteriorSet> {
        let feats = weighted_sum(stack, &self.layer_weights)?;
        self.head.forward(&feats, mask, mode)
    }

    /// Softmax-normalized layer weights.
    pub fn layer_weight_values(&self) -> Result<Vec<f64>> {
        Ok(self.layer_weights.normalized()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }

    pub fn save(&self, dir: &Path, summary: &serde_json::Value) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let groups = self.trainable_groups();
        self.params.save(&dir.join(CHECKPOINT_PARAMS), &groups)?;
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            spec: self.spec.clone(),
            n_time: self.n_time(),
            n_layers: self.encoder.n_layers(),
            dim: self.encoder.dim(),
            layer_weights: self.layer_weight_values()?,
            saved_groups: groups,
            summary: summary.clone(),
        };
        let path = dir.join(CHECKPOINT_META);
        std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta = CheckpointMeta::read(dir)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Compatibility(format!(
                "{}: checkpoint format {} is not supported",
                dir.display(),
                meta.format_version
            )));
        }
        let model = Model::build(&meta.spec)?;
        if (model.n_time(), model.encoder.n_layers(), model.encoder.dim()) != (meta.n_time, meta.n_layers, meta.dim) {
            return Err(Error::Compatibility(format!(
                "{}: checkpoint expects {} frames x {} layers x {} dims, encoder gives {} x {} x {}",
                dir.display(),
                meta.n_time,
                meta.n_layers,
                meta.dim,
                model.n_time(),
                model.encoder.n_layers(),
                model.encoder.dim()
            )));
        }
        model.params.load_values(&dir.join(CHECKPOINT_PARAMS))?;
        Ok(model)
    }
}

/// The JSON sidecar of a checkpoint directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub spec: ModelSpec,
    pub n_time: usize,
    pub n_layers: usize,
    pub dim: usize,
    pub layer_weights: Vec<f64>,
    pub saved_groups: Vec<ParamGroup>,
    pub summary: serde_json::Value,
}

impl CheckpointMeta {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(CHECKPOINT_META);
        if !path.exists() {
            return Err(Error::Config(format!("{} is not a checkpoint directory (no {CHECKPOINT_META})", dir.display())));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
