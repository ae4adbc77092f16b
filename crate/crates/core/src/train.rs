//! Optimization loop, task heads, metrics and trajectory diagnostics.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{is_norm_param, PeftMethod, StemInit};
use crate::data::{Dataset, DatasetSplit, Label, Sample, TaskKind, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::model::{
    class_weights_for_label, upsample_patch_predictions, BuildSpec, ForwardOptions, Model,
    PretrainedInit,
};
use crate::params::ParamSet;
use crate::tensor::graph::Graph;
use crate::tensor::{derive_seed, Element, TensorData};
use crate::vit::{init_vit_params, VitConfig};

// ── Configuration ─────────────────────────────────────────────────────────

fn default_lr() -> f64 {
    1e-4
}

fn default_milestones() -> Vec<f64> {
    vec![0.6, 0.9]
}

fn default_decay() -> f64 {
    0.1
}

fn default_wd() -> f64 {
    0.01
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

fn default_batch() -> usize {
    8
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Schedule milestones as fractions of total steps, strictly increasing
    /// in (0, 1); the rate multiplies by `decay_factor` past each one.
    #[serde(default = "default_milestones")]
    pub milestones: Vec<f64>,
    #[serde(default = "default_decay")]
    pub decay_factor: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub seed: u64,
    /// Stop after this many optimizer steps regardless of epochs.
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Collect per-layer deflection norms each epoch (adapter runs only).
    #[serde(default)]
    pub record_displacement_norms: bool,
    /// Evaluate the validation split after each epoch.
    #[serde(default = "default_true")]
    pub eval_val: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: default_batch(),
            learning_rate: default_lr(),
            milestones: default_milestones(),
            decay_factor: default_decay(),
            weight_decay: default_wd(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            seed: 0,
            max_steps: None,
            record_displacement_norms: false,
            eval_val: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut prev = 0.0;
        for &m in &self.milestones {
            if m <= prev || m >= 1.0 {
                return Err(Error::Config(format!(
                    "milestones must be strictly increasing in (0,1), got {:?}",
                    self.milestones
                )));
            }
            prev = m;
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.learning_rate <= 0.0 || self.decay_factor <= 0.0 {
            return Err(Error::Config("learning_rate and decay_factor must be positive".into()));
        }
        Ok(())
    }
}

/// lr(t) = base · decay^{#{milestones ≤ t/T}} with t the completed steps.
pub fn lr_at(cfg: &TrainConfig, completed_steps: usize, total_steps: usize) -> f64 {
    let progress = completed_steps as f64 / total_steps.max(1) as f64;
    let passed = cfg.milestones.iter().filter(|&&m| m <= progress).count() as i32;
    cfg.learning_rate * cfg.decay_factor.powi(passed)
}

// ── Optimizer ─────────────────────────────────────────────────────────────

/// Adaptive-moment optimizer with decoupled weight decay. Moments are kept
/// in f64 regardless of model precision; decay applies to matrices only,
/// never to biases or layer-norm parameters.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: usize,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    fn decays(name: &str, shape: &[usize]) -> bool {
        shape.len() >= 2 && !is_norm_param(name)
    }

    /// One update over (name, gradient) pairs; order of `updates` drives the
    /// iteration, so runs are deterministic.
    pub fn apply<E: Element>(
        &mut self,
        model: &mut Model<E>,
        updates: &[(String, TensorData<E>)],
        lr: f64,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, grad) in updates {
            let param = model.param_mut(name).expect("update for unknown parameter");
            let n = param.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let wd = if Self::decays(name, param.shape()) { self.weight_decay } else { 0.0 };
            for i in 0..n {
                let g = grad.data()[i].to_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let p = param.data()[i].to_f64();
                let updated = p - lr * (mhat / (vhat.sqrt() + self.eps) + wd * p);
                param.data_mut()[i] = E::from_f64(updated);
            }
        }
    }
}

// ── Metrics ───────────────────────────────────────────────────────────────

/// Per-class F1 and IoU from a confusion matrix (rows = labels,
/// columns = predictions). Means run over classes present in the labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub confusion: Vec<Vec<usize>>,
    pub per_class_f1: Vec<f64>,
    pub mean_f1: f64,
    pub per_class_iou: Vec<f64>,
    pub mean_iou: f64,
    pub accuracy: f64,
}

impl Metrics {
    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Result<Metrics> {
        let k = confusion.len();
        let total: usize = confusion.iter().map(|r| r.iter().sum::<usize>()).sum();
        if total == 0 {
            return Err(Error::Precondition("metrics over an empty confusion matrix".into()));
        }
        let mut per_class_f1 = vec![0.0; k];
        let mut per_class_iou = vec![0.0; k];
        let mut sum_f1 = 0.0;
        let mut sum_iou = 0.0;
        let mut present = 0usize;
        let mut correct = 0usize;
        for c in 0..k {
            let tp = confusion[c][c];
            correct += tp;
            let fn_: usize = confusion[c].iter().sum::<usize>() - tp;
            let fp: usize = (0..k).map(|r| confusion[r][c]).sum::<usize>() - tp;
            let f1 = if 2 * tp + fp + fn_ > 0 {
                2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
            } else {
                0.0
            };
            let iou = if tp + fp + fn_ > 0 { tp as f64 / (tp + fp + fn_) as f64 } else { 0.0 };
            per_class_f1[c] = f1;
            per_class_iou[c] = iou;
            if tp + fn_ > 0 {
                present += 1;
                sum_f1 += f1;
                sum_iou += iou;
            }
        }
        Ok(Metrics {
            confusion,
            per_class_f1,
            per_class_iou,
            mean_f1: sum_f1 / present.max(1) as f64,
            mean_iou: sum_iou / present.max(1) as f64,
            accuracy: correct as f64 / total as f64,
        })
    }
}

fn argmax<E: Element>(row: &[E]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Prediction and metric accumulation for one sample into a confusion matrix.
fn accumulate_sample<E: Element>(
    model: &Model<E>,
    sample: &Sample,
    confusion: &mut [Vec<usize>],
) -> Result<()> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g)?;
    let out = model.forward(&mut g, &bound, sample, &ForwardOptions::default())?;
    let logits = g.value(out.logits);
    let k = confusion.len();
    match (&sample.label, model.task) {
        (Label::Class(class), TaskKind::Classification) => {
            if *class >= k {
                return Err(Error::Precondition(format!("label {class} outside 0..{k}")));
            }
            confusion[*class][argmax(logits.row(0))] += 1;
        }
        (Label::Mask { height, width, data }, TaskKind::Segmentation) => {
            let patch_preds: Vec<usize> =
                (0..logits.rows()).map(|i| argmax(logits.row(i))).collect();
            let upsampled =
                upsample_patch_predictions(&patch_preds, sample.image.height(), model.vit_cfg.patch_size);
            for y in 0..*height {
                for x in 0..*width {
                    let label = data[y * width + x];
                    if label == IGNORE_INDEX {
                        continue;
                    }
                    if label as usize >= k {
                        return Err(Error::Precondition(format!("mask label {label} outside 0..{k}")));
                    }
                    confusion[label as usize][upsampled[y * width + x] as usize] += 1;
                }
            }
        }
        _ => {
            return Err(Error::Config("sample label kind does not match the model task".into()));
        }
    }
    Ok(())
}

/// Evaluation over a split. Samples are independent, so they spread over
/// `threads` workers; the merged confusion matrix is order-independent.
pub fn evaluate<E: Element>(model: &Model<E>, split: &DatasetSplit, threads: usize) -> Result<Metrics> {
    if split.is_empty() {
        return Err(Error::Precondition("evaluation over an empty split".into()));
    }
    let k = model.num_classes;
    let threads = threads.max(1).min(split.len());
    let confusion = if threads == 1 {
        let mut confusion = vec![vec![0usize; k]; k];
        for sample in &split.samples {
            accumulate_sample(model, sample, &mut confusion)?;
        }
        confusion
    } else {
        let chunk = split.len().div_ceil(threads);
        let results: Vec<Result<Vec<Vec<usize>>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = split
                .samples
                .chunks(chunk)
                .map(|samples| {
                    scope.spawn(move || {
                        let mut confusion = vec![vec![0usize; k]; k];
                        for sample in samples {
                            accumulate_sample(model, sample, &mut confusion)?;
                        }
                        Ok(confusion)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        let mut confusion = vec![vec![0usize; k]; k];
        for r in results {
            let part = r?;
            for (acc, row) in confusion.iter_mut().zip(part) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
        }
        confusion
    };
    Metrics::from_confusion(confusion)
}

// ── Training ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_train_loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub val: Option<Metrics>,
    /// Mean deflected-displacement norm per adapted layer, when recording.
    pub displacement_norms: Option<Vec<(usize, f64)>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub total_steps: usize,
}

/// Minimizes cross-entropy over θ_A ∪ φ. θ_P never enters the optimizer;
/// the integrity tests additionally pin it down by checksum.
pub fn train<E: Element>(model: &mut Model<E>, data: &Dataset, cfg: &TrainConfig) -> Result<TrainHistory> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Precondition("training split is empty".into()));
    }
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let planned = cfg.epochs * steps_per_epoch;
    let total_steps = cfg.max_steps.map_or(planned, |m| m.min(planned));
    let trainable = model.trainable_names();
    let mut optimizer = AdamW::new(cfg);
    let mut history = TrainHistory { epochs: Vec::new(), total_steps };
    let opts = ForwardOptions {
        record_norms: false,
        monitor_deflection: cfg.record_displacement_norms,
    };
    let mut step = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle", &[epoch as u64]));
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        let mut lr_used = lr_at(cfg, step, total_steps);
        let mut norm_sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();

        for batch in order.chunks(cfg.batch_size) {
            if step >= total_steps {
                break 'epochs;
            }
            lr_used = lr_at(cfg, step, total_steps);
            let mut g = Graph::new();
            let bound = model.bind(&mut g)?;
            let mut loss_nodes = Vec::with_capacity(batch.len());
            let mut logit_lo = f64::INFINITY;
            let mut logit_hi = f64::NEG_INFINITY;
            for &idx in batch {
                let sample = &data.train.samples[idx];
                let out = match model.forward(&mut g, &bound, sample, &opts) {
                    Ok(out) => out,
                    Err(Error::Numeric(msg)) => {
                        return Err(Error::NanLoss {
                            step,
                            diagnostics: format!(
                                "{msg}; batch logits so far in [{logit_lo}, {logit_hi}], lr {lr_used}"
                            ),
                        })
                    }
                    Err(e) => return Err(e),
                };
                for v in g.value(out.logits).data() {
                    logit_lo = logit_lo.min(v.to_f64());
                    logit_hi = logit_hi.max(v.to_f64());
                }
                let weights = class_weights_for_label(
                    &sample.label,
                    model.num_classes,
                    model.vit_cfg.num_patches(),
                    model.vit_cfg.patch_size,
                    &sample.image,
                )?;
                let loss = match g.cross_entropy(out.logits, &weights) {
                    Ok(l) => l,
                    Err(Error::Numeric(msg)) => {
                        return Err(Error::NanLoss {
                            step,
                            diagnostics: format!(
                                "{msg}; batch logits in [{logit_lo}, {logit_hi}], lr {lr_used}"
                            ),
                        })
                    }
                    Err(e) => return Err(e),
                };
                loss_nodes.push(loss);
                for ns in &out.norm_samples {
                    let entry = norm_sums.entry(ns.layer).or_insert((0.0, 0));
                    entry.0 += ns.deflected_norms.iter().sum::<f64>();
                    entry.1 += ns.deflected_norms.len();
                }
            }
            let sum = loss_nodes[1..]
                .iter()
                .try_fold(loss_nodes[0], |acc, &l| g.add(acc, l))?;
            let loss = g.scale(sum, 1.0 / batch.len() as f64);
            let loss_value = g.value(loss).data()[0].to_f64();
            if !loss_value.is_finite() {
                return Err(Error::NanLoss {
                    step,
                    diagnostics: format!(
                        "loss {loss_value}; batch logits in [{logit_lo}, {logit_hi}], lr {lr_used}"
                    ),
                });
            }
            losses.push(loss_value);
            let grads = g.backward(loss)?;
            let node_of: HashMap<&str, crate::tensor::graph::NodeId> =
                bound.param_nodes.iter().map(|(n, id)| (n.as_str(), *id)).collect();
            let updates: Vec<(String, TensorData<E>)> = trainable
                .iter()
                .map(|name| {
                    let node = node_of[name.as_str()];
                    let shape = model.param(name).expect("trainable exists").shape().to_vec();
                    (name.clone(), grads.get_or_zeros(node, &shape))
                })
                .collect();
            optimizer.apply(model, &updates, lr_used);
            step += 1;
        }

        let val = if cfg.eval_val && !data.val.is_empty() {
            Some(evaluate(model, &data.val, 1)?)
        } else {
            None
        };
        history.epochs.push(EpochRecord {
            epoch,
            mean_train_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
            lr: lr_used,
            val,
            displacement_norms: cfg.record_displacement_norms.then(|| {
                norm_sums
                    .iter()
                    .map(|(&layer, &(sum, count))| (layer, sum / count.max(1) as f64))
                    .collect()
            }),
        });
    }
    Ok(history)
}

// ── Displacement-norm diagnostics ─────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerNormDiff {
    pub layer: usize,
    /// Mean |‖Δ₁z‖_adapted − ‖Δ₁z‖_reference| over tokens and probe images.
    pub mean_abs_diff: f64,
}

/// Compares per-layer attention-displacement norms of a model against a
/// reference model (typically the frozen encoder) on a probe set.
pub fn displacement_norm_report<E: Element>(
    adapted: &Model<E>,
    reference: &Model<E>,
    probe: &[Sample],
) -> Result<Vec<LayerNormDiff>> {
    if adapted.vit_cfg.depth != reference.vit_cfg.depth {
        return Err(Error::Config("probe models differ in depth".into()));
    }
    if probe.is_empty() {
        return Err(Error::Precondition("empty probe set".into()));
    }
    let depth = adapted.vit_cfg.depth;
    let mut sums = vec![0.0f64; depth];
    let mut counts = vec![0usize; depth];
    let opts = ForwardOptions { record_norms: true, monitor_deflection: false };
    for sample in probe {
        let norms_of = |model: &Model<E>| -> Result<Vec<Vec<f64>>> {
            let mut g = Graph::new();
            let bound = model.bind(&mut g)?;
            let out = model.forward(&mut g, &bound, sample, &opts)?;
            Ok(out.latent.displacement_norms.expect("recording requested"))
        };
        let a = norms_of(adapted)?;
        let r = norms_of(reference)?;
        for l in 0..depth {
            for (x, y) in a[l].iter().zip(&r[l]) {
                sums[l] += (x - y).abs();
                counts[l] += 1;
            }
        }
    }
    Ok((0..depth)
        .map(|l| LayerNormDiff { layer: l + 1, mean_abs_diff: sums[l] / counts[l].max(1) as f64 })
        .collect())
}

// ── Pretrained weights for desk-scale experiments ─────────────────────────

/// Synthetic RGB classification task used by the supervised pretraining
/// option; the two RGB-identical classes stay unlearnable, the others give
/// the encoder something to fit.
fn rgb_pretrain_spec(image_size: usize) -> crate::data::synth::SyntheticTaskSpec {
    let base = crate::data::synth::SyntheticTaskSpec::default_classification();
    crate::data::synth::SyntheticTaskSpec {
        task: TaskKind::Classification,
        num_classes: 4,
        image_size,
        bands: vec!["R".into(), "G".into(), "B".into()],
        class_spectra: base.class_spectra.iter().map(|s| s[..3].to_vec()).collect(),
        ambiguous_classes: vec![0, 1],
        noise_level: 0.05,
        texture_amplitude: 0.08,
        texture_scale: 4,
        blob_count: 0,
        train_size: 32,
        val_size: 8,
        test_size: 8,
    }
}

/// Desk-scale stand-in for a pretrained RGB encoder: either seeded random
/// weights or a short supervised run on synthetic RGB data.
pub fn make_pretrained_vit<E: Element>(
    cfg: &VitConfig,
    init: PretrainedInit,
    seed: u64,
) -> Result<ParamSet<E>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "pretrain-init", &[]));
    let params = init_vit_params::<E, _>(cfg, 3, &mut rng);
    match init {
        PretrainedInit::Seeded => Ok(params),
        PretrainedInit::SyntheticSupervised { steps } => {
            let spec = rgb_pretrain_spec(cfg.image_size);
            let data = crate::data::synth::generate_dataset(&spec, derive_seed(seed, "pretrain-data", &[]))?;
            let mut model = Model::build(BuildSpec {
                base_cfg: cfg,
                pretrained: &params,
                method: PeftMethod::Full,
                stem_init: StemInit::Repeat,
                adapter: Default::default(),
                upe: None,
                task: TaskKind::Classification,
                num_classes: spec.num_classes,
                data_channels: 3,
                rgb_positions: [0, 1, 2],
                seed: derive_seed(seed, "pretrain-model", &[]),
            })?;
            let tc = TrainConfig {
                epochs: steps, // capped by max_steps below
                batch_size: 8,
                learning_rate: 1e-3,
                max_steps: Some(steps),
                eval_val: false,
                seed: derive_seed(seed, "pretrain-train", &[]),
                ..Default::default()
            };
            train(&mut model, &data, &tc)?;
            Ok(model.vit)
        }
    }
}
