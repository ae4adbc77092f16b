//! Assembly of encoder, adapters and task head into one trainable model.
//!
//! Every PEFT method shares the same pretrained RGB encoder weights. The
//! adapter path keeps the RGB stem and feeds extra bands through the
//! spectral embedding; the baselines replace the stem by a reinitialized
//! multispectral one and consume all channels directly.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{
    bind_uatt, init_uatt_params, uatt_param_shapes, AdapterConfig, BoundUattLayer, DeflectHook,
    NormSample,
};
use crate::baselines::{
    apply_lora, init_lora_params, is_bias_param, is_norm_param, lora_param_shapes,
    multispectral_stem_init, PeftMethod, StemInit,
};
use crate::data::{MultispectralImage, Sample, TaskKind};
use crate::error::{Error, Result};
use crate::params::{ParamSet, Partition};
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::{derive_seed, Element, TensorData};
use crate::upe::{
    bind_upe, init_upe_params, untangled_patch_embed, upe_param_shapes,
    BoundUpe, UpeConfig,
};
use crate::vit::{
    bind_vit, final_norm, linear, patch_embed, row_norms_f64, transport, BoundVit, LatentState,
    VitConfig,
};

/// How the desk-scale "pretrained" encoder weights are produced.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PretrainedInit {
    /// Seeded random initialization.
    #[default]
    Seeded,
    /// A short supervised run on synthetic RGB data before freezing.
    SyntheticSupervised {
        steps: usize,
    },
}

pub fn head_param_shapes(embed_dim: usize, num_classes: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        ("head.weight".to_string(), vec![embed_dim, num_classes]),
        ("head.bias".to_string(), vec![num_classes]),
    ]
}

pub fn init_head_params<E: Element>(
    embed_dim: usize,
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) -> ParamSet<E> {
    let mut head = ParamSet::new();
    head.insert("head.weight", TensorData::randn(vec![embed_dim, num_classes], 0.02, rng));
    head.insert("head.bias", TensorData::zeros(vec![num_classes]));
    head
}

/// A complete model: encoder parameters, method-specific extras, head, and
/// the partition into frozen θ_P, trainable θ_A and head φ.
#[derive(Debug, Clone)]
pub struct Model<E: Element> {
    /// Encoder configuration with `in_channels` reflecting the actual stem.
    pub vit_cfg: VitConfig,
    pub method: PeftMethod,
    pub adapter: AdapterConfig,
    pub upe: Option<UpeConfig>,
    /// Resolved adapted layers (adapter path only).
    pub adapted_layers: BTreeSet<usize>,
    pub vit: ParamSet<E>,
    pub extra: ParamSet<E>,
    pub head: ParamSet<E>,
    pub task: TaskKind,
    pub num_classes: usize,
    pub partition: Partition,
}

pub struct BuildSpec<'a, E: Element> {
    /// Pretrained RGB encoder configuration (in_channels = 3).
    pub base_cfg: &'a VitConfig,
    pub pretrained: &'a ParamSet<E>,
    pub method: PeftMethod,
    pub stem_init: StemInit,
    pub adapter: AdapterConfig,
    pub upe: Option<UpeConfig>,
    pub task: TaskKind,
    pub num_classes: usize,
    /// Channel count of the dataset images.
    pub data_channels: usize,
    /// Positions of R, G, B within the dataset images.
    pub rgb_positions: [usize; 3],
    /// Seed for adapter and head initialization.
    pub seed: u64,
}

impl<E: Element> Model<E> {
    pub fn build(spec: BuildSpec<'_, E>) -> Result<Model<E>> {
        spec.base_cfg.validate()?;
        if spec.base_cfg.in_channels != 3 {
            return Err(Error::Config("the pretrained stem must have 3 channels".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "model-init", &[]));

        let mut vit_cfg = spec.base_cfg.clone();
        let mut vit = spec.pretrained.clone();
        if spec.method.uses_multispectral_stem() {
            let expanded = multispectral_stem_init(
                spec.pretrained.expect("patch.weight"),
                vit_cfg.patch_size,
                spec.data_channels,
                spec.rgb_positions,
                spec.stem_init,
                &mut rng,
            )?;
            *vit.get_mut("patch.weight").unwrap() = expanded;
            vit_cfg.in_channels = spec.data_channels;
        }

        let mut extra = ParamSet::new();
        let mut adapted_layers = BTreeSet::new();
        let mut upe = spec.upe;
        match spec.method {
            PeftMethod::Lora { rank, targets } => {
                if rank == 0 {
                    return Err(Error::Config("lora rank must be positive".into()));
                }
                extra = init_lora_params(&vit_cfg, rank, targets, &mut rng);
                upe = None;
            }
            PeftMethod::Deflect => {
                spec.adapter.validate(vit_cfg.depth)?;
                adapted_layers = spec.adapter.resolve_layers(vit_cfg.depth)?;
                let upe_cfg = upe
                    .as_ref()
                    .ok_or_else(|| Error::Config("the adapter method needs a upe section".into()))?;
                upe_cfg.validate(vit_cfg.embed_dim)?;
                extra = init_uatt_params(&adapted_layers, spec.adapter.rank, vit_cfg.embed_dim, &mut rng);
                for (name, value) in init_upe_params::<E>(upe_cfg, vit_cfg.embed_dim, &mut rng).iter() {
                    extra.insert(name, value.clone());
                }
            }
            _ => {
                upe = None;
            }
        }

        let head = init_head_params(vit_cfg.embed_dim, spec.num_classes, &mut rng);

        let partition = build_partition(
            spec.method,
            vit.names().map(String::from),
            extra.names().map(String::from),
            head.names().map(String::from),
        );
        partition.validate(vit.names().chain(extra.names()).chain(head.names()))?;

        Ok(Model {
            vit_cfg,
            method: spec.method,
            adapter: spec.adapter,
            upe,
            adapted_layers,
            vit,
            extra,
            head,
            task: spec.task,
            num_classes: spec.num_classes,
            partition,
        })
    }

    /// All parameters in a stable order, for checkpoints and checksums.
    pub fn all_param_names(&self) -> impl Iterator<Item = &str> {
        self.vit.names().chain(self.extra.names()).chain(self.head.names())
    }

    pub fn param(&self, name: &str) -> Option<&TensorData<E>> {
        self.vit
            .get(name)
            .or_else(|| self.extra.get(name))
            .or_else(|| self.head.get(name))
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut TensorData<E>> {
        if self.vit.contains(name) {
            self.vit.get_mut(name)
        } else if self.extra.contains(name) {
            self.extra.get_mut(name)
        } else {
            self.head.get_mut(name)
        }
    }

    /// Trainable parameter names (θ_A ∪ φ) in deterministic order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.all_param_names()
            .filter(|n| self.partition.is_trainable(n))
            .map(String::from)
            .collect()
    }

    /// θ_A + φ as one set, the content of an adapter checkpoint.
    pub fn trainable_params(&self) -> ParamSet<E> {
        let mut out = ParamSet::new();
        for name in self.trainable_names() {
            out.insert(name.clone(), self.param(&name).expect("trainable name exists").clone());
        }
        out
    }

    pub fn frozen_checksum(&self) -> u64 {
        let mut all = ParamSet::new();
        for (n, v) in self.vit.iter().chain(self.extra.iter()).chain(self.head.iter()) {
            all.insert(n, v.clone());
        }
        all.checksum_of(&self.partition.theta_p)
    }

    pub fn bind(&self, g: &mut Graph<E>) -> Result<BoundModel> {
        let trainable = |name: &str| self.partition.is_trainable(name);
        let (mut vit, mut param_nodes) = bind_vit(g, &self.vit, &self.vit_cfg, &trainable);
        let mut uatt = BTreeMap::new();
        let mut upe_bound = None;
        match self.method {
            PeftMethod::Lora { targets, .. } => {
                let nodes = apply_lora(g, &mut vit, &self.extra, &self.vit_cfg, targets, &trainable)?;
                param_nodes.extend(nodes);
            }
            PeftMethod::Deflect => {
                let (bound, nodes) =
                    bind_uatt(g, &self.extra, &self.adapted_layers, self.adapter.rank, &trainable)?;
                uatt = bound;
                param_nodes.extend(nodes);
                let upe_cfg = self.upe.as_ref().expect("validated at build");
                let (bound, nodes) = bind_upe(g, &self.extra, upe_cfg, &trainable);
                upe_bound = bound;
                param_nodes.extend(nodes);
            }
            _ => {}
        }
        let head_w = g.leaf(self.head.expect("head.weight").clone(), trainable("head.weight"));
        let head_b = g.leaf(self.head.expect("head.bias").clone(), trainable("head.bias"));
        param_nodes.push(("head.weight".to_string(), head_w));
        param_nodes.push(("head.bias".to_string(), head_b));
        Ok(BoundModel { vit, uatt, upe: upe_bound, head_w, head_b, param_nodes })
    }

    /// One forward pass for one sample. Binds nothing; reuses the bound
    /// parameter nodes, so several samples can share one graph and their
    /// parameter gradients accumulate.
    pub fn forward(
        &self,
        g: &mut Graph<E>,
        bound: &BoundModel,
        sample: &Sample,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let img = &sample.image;
        let mut norm_samples = Vec::new();
        let (x, hook) = match self.method {
            PeftMethod::Deflect => {
                let upe_cfg = self.upe.as_ref().expect("validated at build");
                let pair = untangled_patch_embed(
                    g,
                    img,
                    &bound.vit,
                    &self.vit_cfg,
                    upe_cfg,
                    bound.upe.as_ref(),
                    sample.id,
                )?;
                let mut hook =
                    DeflectHook::new(&self.adapter, self.adapted_layers.clone(), pair.x_a, bound.uatt.clone());
                if self.adapter.reference_from_frozen_trajectory {
                    hook.frozen_reference_norms =
                        Some(self.frozen_reference_norms(g, &bound.vit, pair.x_p)?);
                }
                if opts.monitor_deflection {
                    hook.monitor = Some(Vec::new());
                }
                (pair.x_p, Some(hook))
            }
            _ => {
                let channels: Vec<usize> = if self.method.uses_multispectral_stem() {
                    if img.channels() != self.vit_cfg.in_channels {
                        return Err(Error::Config(format!(
                            "image has {} channels, stem expects {}",
                            img.channels(),
                            self.vit_cfg.in_channels
                        )));
                    }
                    (0..img.channels()).collect()
                } else {
                    crate::vit::rgb_channels(img)?.to_vec()
                };
                (patch_embed(g, img, &channels, &bound.vit, &self.vit_cfg)?, None)
            }
        };

        let mut hook = hook;
        let latent = transport(
            g,
            x,
            &bound.vit,
            &self.vit_cfg,
            hook.as_mut().map(|h| h as &mut dyn crate::vit::AttentionOverride<E>),
            opts.record_norms,
        )?;
        if let Some(h) = hook {
            if let Some(samples) = h.monitor {
                norm_samples = samples;
            }
        }

        let z_final = *latent.layer_inputs.last().expect("at least the input");
        let z_normed = final_norm(g, z_final, &bound.vit)?;
        let logits = match self.task {
            TaskKind::Classification => {
                let pooled = g.mean_rows(z_normed)?;
                linear(g, pooled, bound.head_w, bound.head_b)?
            }
            TaskKind::Segmentation => linear(g, z_normed, bound.head_w, bound.head_b)?,
        };
        Ok(ForwardOutput { logits, latent, norm_samples })
    }

    /// Per-layer per-token attention-displacement norms of the frozen
    /// encoder on x_P, used as deflection targets in frozen-trajectory mode.
    fn frozen_reference_norms(
        &self,
        g: &mut Graph<E>,
        vit: &BoundVit,
        x_p: NodeId,
    ) -> Result<BTreeMap<usize, TensorData<E>>> {
        let frozen = transport(g, x_p, vit, &self.vit_cfg, None, false)?;
        let mut norms = BTreeMap::new();
        for &layer in &self.adapted_layers {
            let delta = frozen.attn_displacements[layer - 1];
            let values = row_norms_f64(g.value(delta));
            norms.insert(layer, TensorData::from_f64_slice(vec![values.len()], &values)?);
        }
        Ok(norms)
    }
}

/// Graph-bound model parameters for one batch.
pub struct BoundModel {
    pub vit: BoundVit,
    pub uatt: BTreeMap<usize, BoundUattLayer>,
    pub upe: Option<BoundUpe>,
    pub head_w: NodeId,
    pub head_b: NodeId,
    /// Every bound leaf by name, for gradient collection.
    pub param_nodes: crate::vit::NamedNodes,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Record per-layer ‖Δ₁z‖ along the trajectory.
    pub record_norms: bool,
    /// Collect reference/deflected norm pairs at adapted layers.
    pub monitor_deflection: bool,
}

pub struct ForwardOutput {
    pub logits: NodeId,
    pub latent: LatentState,
    pub norm_samples: Vec<NormSample>,
}

fn build_partition(
    method: PeftMethod,
    vit_names: impl Iterator<Item = String>,
    extra_names: impl Iterator<Item = String>,
    head_names: impl Iterator<Item = String>,
) -> Partition {
    let mut partition = Partition {
        phi: head_names.collect(),
        ..Default::default()
    };
    for name in vit_names {
        let trainable = match method {
            PeftMethod::Full => true,
            PeftMethod::Bitfit => is_bias_param(&name),
            PeftMethod::Normtune => is_norm_param(&name),
            _ => false,
        };
        if trainable {
            partition.theta_a.insert(name);
        } else {
            partition.theta_p.insert(name);
        }
    }
    for name in extra_names {
        partition.theta_a.insert(name);
    }
    partition
}

/// Encoder-only shape listing and partition for a method, without
/// allocating any parameter values. This is the parameter-budget reporter:
/// tuned fractions of large configurations come straight from here.
/// Parameter names with their shapes, the unit of budget accounting.
pub type ShapeList = Vec<(String, Vec<usize>)>;

pub fn encoder_budget_shapes(
    cfg: &VitConfig,
    method: PeftMethod,
    adapter: &AdapterConfig,
    upe: Option<&UpeConfig>,
) -> Result<(ShapeList, Partition)> {
    let mut shapes = crate::vit::vit_param_shapes(cfg, cfg.in_channels);
    let mut extra_names = Vec::new();
    match method {
        PeftMethod::Lora { rank, targets } => {
            for (name, shape) in lora_param_shapes(cfg, rank, targets) {
                extra_names.push(name.clone());
                shapes.push((name, shape));
            }
        }
        PeftMethod::Deflect => {
            let layers = adapter.resolve_layers(cfg.depth)?;
            for (name, shape) in uatt_param_shapes(&layers, adapter.rank, cfg.embed_dim) {
                extra_names.push(name.clone());
                shapes.push((name, shape));
            }
            let upe_cfg =
                upe.ok_or_else(|| Error::Config("the adapter method needs a upe section".into()))?;
            for (name, shape) in upe_param_shapes(upe_cfg, cfg.embed_dim) {
                extra_names.push(name.clone());
                shapes.push((name, shape));
            }
        }
        _ => {}
    }
    let vit_names: Vec<String> = crate::vit::vit_param_shapes(cfg, cfg.in_channels)
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let partition = build_partition(
        method,
        vit_names.into_iter(),
        extra_names.into_iter(),
        std::iter::empty(),
    );
    Ok((shapes, partition))
}

// ── Pretrained weights ────────────────────────────────────────────────────

/// Multispectral image helper: predicted class map from per-patch logits by
/// nearest-neighbor upsampling.
pub fn upsample_patch_predictions(
    patch_argmax: &[usize],
    image_size: usize,
    patch_size: usize,
) -> Vec<u8> {
    let per_side = image_size / patch_size;
    let mut out = vec![0u8; image_size * image_size];
    for y in 0..image_size {
        for x in 0..image_size {
            let patch = (y / patch_size) * per_side + x / patch_size;
            out[y * image_size + x] = patch_argmax[patch] as u8;
        }
    }
    out
}

pub fn class_weights_for_label(
    label: &crate::data::Label,
    num_classes: usize,
    num_patches: usize,
    patch_size: usize,
    image: &MultispectralImage,
) -> Result<TensorData<f64>> {
    match label {
        crate::data::Label::Class(k) => {
            if *k >= num_classes {
                return Err(Error::Precondition(format!(
                    "label {k} outside 0..{num_classes}"
                )));
            }
            let mut w = TensorData::zeros(vec![1, num_classes]);
            w.data_mut()[*k] = 1.0;
            Ok(w)
        }
        crate::data::Label::Mask { height, width, data } => {
            if *height != image.height() || *width != image.width() {
                return Err(Error::Precondition("mask size differs from image size".into()));
            }
            // per-patch class histogram; IGNORE_INDEX pixels get no weight
            let per_side = image.width() / patch_size;
            let mut w = TensorData::zeros(vec![num_patches, num_classes]);
            for y in 0..*height {
                for x in 0..*width {
                    let k = data[y * width + x];
                    if k == crate::data::IGNORE_INDEX {
                        continue;
                    }
                    if k as usize >= num_classes {
                        return Err(Error::Precondition(format!(
                            "mask label {k} outside 0..{num_classes}"
                        )));
                    }
                    let patch = (y / patch_size) * per_side + x / patch_size;
                    w.data_mut()[patch * num_classes + k as usize] += 1.0;
                }
            }
            Ok(w)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_dataset, SyntheticTaskSpec};
    use crate::train::make_pretrained_vit;
    use crate::vit::VitConfig;

    fn base_cfg() -> VitConfig {
        VitConfig {
            image_size: 16,
            patch_size: 8,
            depth: 4,
            embed_dim: 16,
            num_heads: 2,
            mlp_ratio: 2.0,
            in_channels: 3,
        }
    }

    fn task() -> SyntheticTaskSpec {
        let mut t = SyntheticTaskSpec::default_classification();
        t.image_size = 16;
        t.train_size = 4;
        t.val_size = 2;
        t.test_size = 2;
        t
    }

    fn build(method: PeftMethod) -> Model<f64> {
        let cfg = base_cfg();
        let t = task();
        let pretrained = make_pretrained_vit::<f64>(&cfg, crate::model::PretrainedInit::Seeded, 1).unwrap();
        Model::build(BuildSpec {
            base_cfg: &cfg,
            pretrained: &pretrained,
            method,
            stem_init: StemInit::Repeat,
            adapter: AdapterConfig { adapted_layers: vec![2, 4], rank: Some(2), ..Default::default() },
            upe: Some(UpeConfig::with_default_indices(&t.bands, 1)),
            task: TaskKind::Classification,
            num_classes: t.num_classes,
            data_channels: t.channels(),
            rgb_positions: [0, 1, 2],
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn every_method_partition_is_disjoint_and_exhaustive() {
        for method in [
            PeftMethod::Frozen,
            PeftMethod::Full,
            PeftMethod::Lora { rank: 2, targets: Default::default() },
            PeftMethod::Bitfit,
            PeftMethod::Normtune,
            PeftMethod::Deflect,
        ] {
            let model = build(method);
            model
                .partition
                .validate(model.all_param_names())
                .unwrap_or_else(|e| panic!("{}: {e}", method.name()));
            // the head is always trainable, theta_a matches the method
            assert_eq!(model.partition.phi.len(), 2, "{}", method.name());
            match method {
                PeftMethod::Frozen => assert!(model.partition.theta_a.is_empty()),
                PeftMethod::Full => assert!(model.partition.theta_p.is_empty()),
                _ => assert!(!model.partition.theta_a.is_empty()),
            }
        }
    }

    #[test]
    fn selective_methods_mark_only_their_parameter_kind() {
        let bitfit = build(PeftMethod::Bitfit);
        assert!(bitfit.partition.theta_a.iter().all(|n| crate::baselines::is_bias_param(n)));
        let normtune = build(PeftMethod::Normtune);
        assert!(normtune.partition.theta_a.iter().all(|n| crate::baselines::is_norm_param(n)));
    }

    #[test]
    fn adapted_layer_count_matches_the_configured_set() {
        // depth-12 default layer set touches exactly four sublayers
        let cfg = VitConfig { depth: 12, ..base_cfg() };
        let t = task();
        let pretrained = make_pretrained_vit::<f64>(&cfg, PretrainedInit::Seeded, 2).unwrap();
        let model = Model::build(BuildSpec {
            base_cfg: &cfg,
            pretrained: &pretrained,
            method: PeftMethod::Deflect,
            stem_init: StemInit::Repeat,
            adapter: AdapterConfig::default(),
            upe: Some(UpeConfig::with_default_indices(&t.bands, 2)),
            task: TaskKind::Classification,
            num_classes: t.num_classes,
            data_channels: t.channels(),
            rgb_positions: [0, 1, 2],
            seed: 2,
        })
        .unwrap();
        assert_eq!(model.adapted_layers, [3, 5, 7, 11].into());
        let data = generate_dataset(&t, 3).unwrap();
        let mut g = Graph::new();
        let bound = model.bind(&mut g).unwrap();
        let out = model
            .forward(
                &mut g,
                &bound,
                &data.train.samples[0],
                &ForwardOptions { record_norms: false, monitor_deflection: true },
            )
            .unwrap();
        assert_eq!(out.norm_samples.len(), 4);
        assert_eq!(
            out.norm_samples.iter().map(|s| s.layer).collect::<Vec<_>>(),
            vec![3, 5, 7, 11]
        );
    }

    #[test]
    fn selective_methods_leave_weight_matrices_without_gradient() {
        let t = task();
        let data = generate_dataset(&t, 7).unwrap();
        let model = build(PeftMethod::Bitfit);
        let mut g = Graph::new();
        let bound = model.bind(&mut g).unwrap();
        let out = model
            .forward(&mut g, &bound, &data.train.samples[0], &ForwardOptions::default())
            .unwrap();
        let weights = class_weights_for_label(
            &data.train.samples[0].label,
            model.num_classes,
            model.vit_cfg.num_patches(),
            model.vit_cfg.patch_size,
            &data.train.samples[0].image,
        )
        .unwrap();
        let loss = g.cross_entropy(out.logits, &weights).unwrap();
        let grads = g.backward(loss).unwrap();
        for (name, node) in &bound.param_nodes {
            let is_weight = name.ends_with(".wq")
                || name.ends_with(".wk")
                || name.ends_with(".wv")
                || name.ends_with(".wo")
                || name.ends_with(".w1")
                || name.ends_with(".w2")
                || name == "patch.weight";
            if is_weight {
                assert!(grads.get(*node).is_none(), "{name} received a gradient");
            }
        }
        // bias parameters do receive gradients
        let bq = bound.param_nodes.iter().find(|(n, _)| n == "blocks.0.attn.bq").unwrap().1;
        assert!(grads.get(bq).is_some());
    }

    #[test]
    fn untrained_selective_methods_are_frozen_equivalent() {
        // with zero training steps the selective baselines compute exactly
        // the same function as full finetuning at initialization: identical
        // stem, identical parameters, no structural change
        let t = task();
        let data = generate_dataset(&t, 8).unwrap();
        let sample = &data.train.samples[0];
        let logits = |method: PeftMethod| -> Vec<f64> {
            let model = build(method);
            let mut g = Graph::new();
            let bound = model.bind(&mut g).unwrap();
            let out = model.forward(&mut g, &bound, sample, &ForwardOptions::default()).unwrap();
            g.value(out.logits).to_f64_vec()
        };
        let reference = logits(PeftMethod::Full);
        assert_eq!(logits(PeftMethod::Bitfit), reference);
        assert_eq!(logits(PeftMethod::Normtune), reference);
    }

    #[test]
    fn frozen_trajectory_reference_matches_literal_mode_when_untrained() {
        let t = task();
        let data = generate_dataset(&t, 4).unwrap();
        let sample = &data.train.samples[0];
        let logits = |frozen_ref: bool| -> Vec<f64> {
            let mut model = build(PeftMethod::Deflect);
            model.adapter.reference_from_frozen_trajectory = frozen_ref;
            let mut g = Graph::new();
            let bound = model.bind(&mut g).unwrap();
            let out = model.forward(&mut g, &bound, sample, &ForwardOptions::default()).unwrap();
            g.value(out.logits).to_f64_vec()
        };
        // with zero-initialized adapters both deflection targets coincide
        assert_eq!(logits(false), logits(true));
    }

    #[test]
    fn frozen_trajectory_reference_diverges_after_training_starts() {
        let t = task();
        let data = generate_dataset(&t, 5).unwrap();
        let sample = &data.train.samples[0];
        let logits = |frozen_ref: bool| -> Vec<f64> {
            let mut model = build(PeftMethod::Deflect);
            model.adapter.reference_from_frozen_trajectory = frozen_ref;
            // push the adapter off zero so the two reference modes see
            // different latent states at the second adapted layer
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
            for m in ["q", "k", "v"] {
                for l in [2usize, 4] {
                    let name = format!("uatt.{l}.{m}.b");
                    let shape = model.param(&name).unwrap().shape().to_vec();
                    *model.param_mut(&name).unwrap() = TensorData::randn(shape, 0.5, &mut rng);
                }
            }
            let mut g = Graph::new();
            let bound = model.bind(&mut g).unwrap();
            let out = model.forward(&mut g, &bound, sample, &ForwardOptions::default()).unwrap();
            g.value(out.logits).to_f64_vec()
        };
        let (literal, frozen) = (logits(false), logits(true));
        assert_ne!(literal, frozen);
    }
}
