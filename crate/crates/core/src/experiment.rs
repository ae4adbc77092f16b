//! Deterministic model reconstruction and checkpoint persistence.
//!
//! A [`ModelSpec`] captures everything needed to rebuild a model bit-for-bit
//! (the pretrained weights are seeded or re-derived by the short supervised
//! run). Checkpoints therefore only need the trainable parameters θ_A + φ
//! plus the spec echo, which is what keeps per-task adapter files small.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterConfig;
use crate::baselines::{PeftMethod, StemInit};
use crate::data::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::model::{BuildSpec, Model, PretrainedInit};
use crate::tensor::{derive_seed, Element};
use crate::train::make_pretrained_vit;
use crate::upe::UpeConfig;
use crate::vit::VitConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub base_cfg: VitConfig,
    #[serde(default)]
    pub pretrained_init: PretrainedInit,
    pub method: PeftMethod,
    #[serde(default)]
    pub stem_init: StemInit,
    #[serde(default)]
    pub adapter: AdapterConfig,
    #[serde(default)]
    pub upe: Option<UpeConfig>,
    pub task: TaskKind,
    pub num_classes: usize,
    pub data_channels: usize,
    pub rgb_positions: [usize; 3],
    pub seed: u64,
}

impl ModelSpec {
    /// Rebuilds the model deterministically: same spec, same bits.
    pub fn build<E: Element>(&self) -> Result<Model<E>> {
        let pretrained = make_pretrained_vit::<E>(
            &self.base_cfg,
            self.pretrained_init,
            derive_seed(self.seed, "pretrained", &[]),
        )?;
        Model::build(BuildSpec {
            base_cfg: &self.base_cfg,
            pretrained: &pretrained,
            method: self.method,
            stem_init: self.stem_init,
            adapter: self.adapter.clone(),
            upe: self.upe.clone(),
            task: self.task,
            num_classes: self.num_classes,
            data_channels: self.data_channels,
            rgb_positions: self.rgb_positions,
            seed: self.seed,
        })
    }
}

fn meta_json(spec: &ModelSpec) -> String {
    serde_json::to_string(spec).expect("model spec serializes")
}

fn meta_from_json(json: &str) -> Result<ModelSpec> {
    serde_json::from_str(json).map_err(|e| Error::Format {
        offset: 0,
        message: format!("checkpoint meta: {e}"),
    })
}

/// Writes θ_A + φ plus the spec echo.
pub fn save_adapter_checkpoint<E: Element>(path: &Path, model: &Model<E>, spec: &ModelSpec) -> Result<()> {
    save_checkpoint(path, &meta_json(spec), &model.trainable_params())
}

/// Writes every parameter (θ_P included), for size comparisons and full
/// snapshots.
pub fn save_full_checkpoint<E: Element>(path: &Path, model: &Model<E>, spec: &ModelSpec) -> Result<()> {
    let mut all = crate::params::ParamSet::new();
    for (n, v) in model.vit.iter().chain(model.extra.iter()).chain(model.head.iter()) {
        all.insert(n, v.clone());
    }
    save_checkpoint(path, &meta_json(spec), &all)
}

/// Rebuilds the model from the embedded spec and applies the stored
/// parameters over it. Unknown names or shape mismatches are integrity
/// errors.
pub fn load_model_checkpoint<E: Element>(path: &Path) -> Result<(ModelSpec, Model<E>)> {
    let (meta, params) = load_checkpoint::<E>(path)?;
    let spec = meta_from_json(&meta)?;
    let mut model = spec.build::<E>()?;
    for (name, value) in params.iter() {
        let slot = model
            .param_mut(name)
            .ok_or_else(|| Error::Integrity(format!("checkpoint tensor {name:?} not in model")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Integrity(format!(
                "checkpoint tensor {name:?} has shape {:?}, model expects {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value.clone();
    }
    Ok((spec, model))
}
