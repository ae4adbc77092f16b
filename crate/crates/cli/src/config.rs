//! Experiment configuration: one TOML file per run, no positional science
//! parameters, unknown keys rejected. Validation reports every problem it
//! finds before the process exits.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use deflect_core::adapter::AdapterConfig;
use deflect_core::baselines::{PeftMethod, StemInit};
use deflect_core::data::synth::{generate_dataset, load_dataset, SyntheticTaskSpec};
use deflect_core::data::Dataset;
use deflect_core::experiment::ModelSpec;
use deflect_core::model::PretrainedInit;
use deflect_core::tensor::derive_seed;
use deflect_core::upe::UpeConfig;
use deflect_core::vit::VitConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory produced by `deflect generate` (or compatible layout).
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Inline synthetic task; generated on the fly.
    #[serde(default)]
    pub synthetic: Option<SyntheticTaskSpec>,
    /// Seed for inline generation.
    #[serde(default)]
    pub generator_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: VitConfig,
    #[serde(default)]
    pub pretrained: PretrainedInit,
    pub method: PeftMethod,
    #[serde(default)]
    pub stem_init: StemInit,
    #[serde(default)]
    pub adapter: AdapterConfig,
    /// Spectral embedding; defaults to the standard index recipe over the
    /// dataset's bands when the adapter method is selected.
    #[serde(default)]
    pub upe: Option<UpeConfig>,
    pub training: deflect_core::train::TrainConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| anyhow::anyhow!("config {}: {e}", path.display()))?;
        Ok(cfg)
    }

    /// Every validation problem, not just the first.
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if let Err(e) = self.model.validate() {
            errors.push(format!("[model] {e}"));
        }
        if let Err(e) = self.training.validate() {
            errors.push(format!("[training] {e}"));
        }
        if self.method == PeftMethod::Deflect {
            if let Err(e) = self.adapter.validate(self.model.depth) {
                errors.push(format!("[adapter] {e}"));
            }
            if let Some(upe) = &self.upe {
                if let Err(e) = upe.validate(self.model.embed_dim) {
                    errors.push(format!("[upe] {e}"));
                }
            }
        }
        match (&self.data.path, &self.data.synthetic) {
            (None, None) => errors.push("[data] set either path or synthetic".into()),
            (Some(_), Some(_)) => errors.push("[data] path and synthetic are mutually exclusive".into()),
            (None, Some(spec)) => {
                if let Err(e) = spec.validate() {
                    errors.push(format!("[data.synthetic] {e}"));
                }
                if spec.image_size != self.model.image_size {
                    errors.push(format!(
                        "[data.synthetic] image_size {} differs from model image_size {}",
                        spec.image_size, self.model.image_size
                    ));
                }
            }
            (Some(_), None) => {}
        }
        errors
    }

    pub fn load_data(&self) -> anyhow::Result<Dataset> {
        match (&self.data.path, &self.data.synthetic) {
            (Some(path), None) => Ok(load_dataset(path)?),
            (None, Some(spec)) => Ok(generate_dataset(spec, self.data.generator_seed)?),
            _ => anyhow::bail!("exactly one of data.path / data.synthetic must be set"),
        }
    }

    /// Model reconstruction spec for this experiment given the dataset's
    /// band layout.
    pub fn model_spec(&self, data: &Dataset) -> anyhow::Result<ModelSpec> {
        let sample = data
            .train
            .samples
            .first()
            .or_else(|| data.test.samples.first())
            .ok_or_else(|| anyhow::anyhow!("dataset has no samples"))?;
        let band_map = sample.image.band_map();
        let rgb_positions = [
            sample.image.band_channel("R")?,
            sample.image.band_channel("G")?,
            sample.image.band_channel("B")?,
        ];
        let upe = match (&self.upe, self.method) {
            (Some(u), _) => Some(u.clone()),
            (None, PeftMethod::Deflect) => {
                let mut bands: Vec<(usize, String)> =
                    band_map.iter().map(|(n, &c)| (c, n.clone())).collect();
                bands.sort();
                let names: Vec<String> = bands.into_iter().map(|(_, n)| n).collect();
                Some(UpeConfig::with_default_indices(&names, derive_seed(self.seed, "upe", &[])))
            }
            _ => None,
        };
        Ok(ModelSpec {
            base_cfg: self.model.clone(),
            pretrained_init: self.pretrained,
            method: self.method,
            stem_init: self.stem_init,
            adapter: self.adapter.clone(),
            upe,
            task: data.task,
            num_classes: data.num_classes,
            data_channels: sample.image.channels(),
            rgb_positions,
            seed: self.seed,
        })
    }
}
