//! Runnable verification suites: algebraic identities, gradient checks,
//! displacement-norm behavior and parameter budgets. Each suite returns
//! per-check lines so callers can print one pass/fail row per check and
//! exit nonzero on any violated tolerance.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::{bind_uatt, init_uatt_params, uatt_score_terms, uatt_scores, AdapterConfig};
use crate::baselines::{entanglement_diagnostic, LoraTargets, PeftMethod, StemInit};
use crate::budget::{budget_report, method_budget, vit_large_analog, vit_large_upe};
use crate::data::synth::{generate_dataset, SyntheticTaskSpec};
use crate::data::TaskKind;
use crate::error::Result;
use crate::experiment::ModelSpec;
use crate::model::{class_weights_for_label, ForwardOptions, PretrainedInit};
use crate::tensor::graph::Graph;
use crate::tensor::{derive_seed, TensorData};
use crate::train::displacement_norm_report;
use crate::upe::UpeConfig;
use crate::vit::{bind_vit, init_vit_params, VitConfig};

#[derive(Debug, Clone)]
pub struct CheckLine {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub lines: Vec<CheckLine>,
}

impl SuiteReport {
    pub fn all_pass(&self) -> bool {
        self.lines.iter().all(|l| l.pass)
    }

    fn push(&mut self, name: impl Into<String>, pass: bool, detail: String) {
        self.lines.push(CheckLine { name: name.into(), pass, detail });
    }
}

// ── Algebra ───────────────────────────────────────────────────────────────

/// Low-rank score expansions and the untangled four-term decomposition,
/// checked at 1e-10 absolute in 64-bit over seeded random instances.
pub fn algebra_suite(seed: u64, instances: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport { suite: "algebra", lines: Vec::new() };
    let tol = 1e-10;

    let mut worst_emb = 0.0f64;
    let mut worst_full = 0.0f64;
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "entangle", &[i as u64]));
        let d = 8;
        let x_p = TensorData::<f64>::randn(vec![5, d], 1.0, &mut rng);
        let x_a = TensorData::<f64>::randn(vec![5, d], 1.0, &mut rng);
        let w = |rng: &mut ChaCha8Rng, s: f64| TensorData::<f64>::randn(vec![d, d], s, rng);
        let out = entanglement_diagnostic(
            &x_p,
            &x_a,
            &w(&mut rng, 0.5),
            &w(&mut rng, 0.5),
            &w(&mut rng, 0.15),
            &w(&mut rng, 0.15),
        )?;
        worst_emb = worst_emb.max(out.max_abs_err_embedding_expansion);
        worst_full = worst_full.max(out.max_abs_err_full_expansion);
    }
    report.push(
        "lora scores: direct equals four-term embedding expansion",
        worst_emb <= tol,
        format!("max |err| {worst_emb:.3e} over {instances} instances (tol {tol:.0e})"),
    );
    report.push(
        "lora scores: direct equals sixteen-term weight expansion",
        worst_full <= tol,
        format!("max |err| {worst_full:.3e} over {instances} instances (tol {tol:.0e})"),
    );

    let mut worst_uatt = 0.0f64;
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "uatt", &[i as u64]));
        let cfg = VitConfig {
            image_size: 8,
            patch_size: 4,
            depth: 1,
            embed_dim: 8,
            num_heads: 2,
            mlp_ratio: 2.0,
            in_channels: 3,
        };
        let params = init_vit_params::<f64, _>(&cfg, 3, &mut rng);
        let layers: BTreeSet<usize> = [1].into();
        let mut uatt_params = init_uatt_params::<f64, _>(&layers, Some(3), cfg.embed_dim, &mut rng);
        for m in ["q", "k", "v"] {
            *uatt_params.get_mut(&format!("uatt.1.{m}.b")).unwrap() =
                TensorData::randn(vec![3, cfg.embed_dim], 0.3, &mut rng);
        }
        let mut g = Graph::new();
        let (vit, _) = bind_vit(&mut g, &params, &cfg, &|_| false);
        let (uatt, _) = bind_uatt(&mut g, &uatt_params, &layers, Some(3), &|_| false)?;
        let z = g.constant(TensorData::randn(vec![4, cfg.embed_dim], 1.0, &mut rng));
        let x_a = g.constant(TensorData::randn(vec![4, cfg.embed_dim], 1.0, &mut rng));
        let combined = uatt_scores(&mut g, z, x_a, &vit.blocks[0], &uatt[&1], &cfg)?;
        let terms = uatt_score_terms(&mut g, z, x_a, &vit.blocks[0], &uatt[&1], &cfg)?;
        for (c, t) in combined.iter().zip(&terms) {
            let s01 = g.add(t[0], t[1])?;
            let s012 = g.add(s01, t[2])?;
            let total = g.add(s012, t[3])?;
            worst_uatt = worst_uatt.max(g.value(*c).max_abs_diff(g.value(total)));
        }
    }
    report.push(
        "untangled scores: four-term sum equals combined formulation",
        worst_uatt <= tol,
        format!("max |err| {worst_uatt:.3e} over {instances} instances (tol {tol:.0e})"),
    );
    Ok(report)
}

// ── Gradients ─────────────────────────────────────────────────────────────

/// Tiny adapted model whose every trainable parameter is checked against
/// central finite differences: width 16, 4 tokens, depth 4, two adapted
/// layers, rank 2, in 64-bit at 1e-4 relative.
pub fn tiny_gradient_model_spec(seed: u64) -> ModelSpec {
    let bands = SyntheticTaskSpec::default_classification().bands;
    ModelSpec {
        base_cfg: VitConfig {
            image_size: 16,
            patch_size: 8,
            depth: 4,
            embed_dim: 16,
            num_heads: 2,
            mlp_ratio: 2.0,
            in_channels: 3,
        },
        pretrained_init: PretrainedInit::Seeded,
        method: PeftMethod::Deflect,
        stem_init: StemInit::Repeat,
        adapter: AdapterConfig { adapted_layers: vec![2, 4], rank: Some(2), ..Default::default() },
        upe: Some(UpeConfig::with_default_indices(&bands, seed)),
        task: TaskKind::Classification,
        num_classes: 4,
        data_channels: bands.len(),
        rgb_positions: [0, 1, 2],
        seed,
    }
}

pub fn gradient_suite(seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport { suite: "gradients", lines: Vec::new() };
    let tol = 1e-4;
    let floor = 1e-5;
    let h = 1e-5;

    let spec = tiny_gradient_model_spec(seed);
    let mut model = spec.build::<f64>()?;
    // move off the zero-init fixed point so gradients flow into every
    // parameter, including the projection behind the low-rank factors
    let mut nudge_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "nudge", &[]));
    let names: Vec<String> = model.trainable_names();
    for name in &names {
        if name.ends_with(".b") {
            let shape = model.param(name).expect("exists").shape().to_vec();
            *model.param_mut(name).unwrap() = TensorData::randn(shape, 0.2, &mut nudge_rng);
        }
    }
    let mut task = SyntheticTaskSpec::default_classification();
    task.image_size = 16;
    task.train_size = 4;
    task.val_size = 1;
    task.test_size = 1;
    let data = generate_dataset(&task, derive_seed(seed, "gradient-data", &[]))?;
    let samples = &data.train.samples[..2];

    let loss_of = |model: &crate::model::Model<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let bound = model.bind(&mut g)?;
        let mut nodes = Vec::new();
        for sample in samples {
            let out = model.forward(&mut g, &bound, sample, &ForwardOptions::default())?;
            let weights = class_weights_for_label(
                &sample.label,
                model.num_classes,
                model.vit_cfg.num_patches(),
                model.vit_cfg.patch_size,
                &sample.image,
            )?;
            nodes.push(g.cross_entropy(out.logits, &weights)?);
        }
        let sum = g.add(nodes[0], nodes[1])?;
        let loss = g.scale(sum, 0.5);
        Ok(g.value(loss).data()[0])
    };

    // analytic gradients in one backward pass
    let analytic: Vec<(String, TensorData<f64>)> = {
        let mut g = Graph::new();
        let bound = model.bind(&mut g)?;
        let mut nodes = Vec::new();
        for sample in samples {
            let out = model.forward(&mut g, &bound, sample, &ForwardOptions::default())?;
            let weights = class_weights_for_label(
                &sample.label,
                model.num_classes,
                model.vit_cfg.num_patches(),
                model.vit_cfg.patch_size,
                &sample.image,
            )?;
            nodes.push(g.cross_entropy(out.logits, &weights)?);
        }
        let sum = g.add(nodes[0], nodes[1])?;
        let loss = g.scale(sum, 0.5);
        let grads = g.backward(loss)?;
        model
            .trainable_names()
            .iter()
            .map(|name| {
                let node = bound.param_nodes.iter().find(|(n, _)| n == name).expect("bound").1;
                let shape = model.param(name).expect("exists").shape().to_vec();
                (name.clone(), grads.get_or_zeros(node, &shape))
            })
            .collect()
    };

    for (name, grad) in analytic {
        let numel = model.param(&name).expect("exists").numel();
        let mut worst = 0.0f64;
        for i in 0..numel {
            let orig = model.param(&name).expect("exists").data()[i];
            model.param_mut(&name).unwrap().data_mut()[i] = orig + h;
            let plus = loss_of(&model)?;
            model.param_mut(&name).unwrap().data_mut()[i] = orig - h;
            let minus = loss_of(&model)?;
            model.param_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
        report.push(
            format!("d loss / d {name}"),
            worst <= tol,
            format!("max rel {worst:.3e} over {numel} entries (tol {tol:.0e})"),
        );
    }
    Ok(report)
}

// ── Norms ─────────────────────────────────────────────────────────────────

/// Displacement-norm behavior of an untrained adapted model: the trajectory
/// up to and including the first adapted layer keeps the frozen norms, and
/// the per-token deflection constraint holds at every adapted layer.
pub fn norms_suite(seed: u64) -> Result<SuiteReport> {
    let mut report = SuiteReport { suite: "norms", lines: Vec::new() };

    let mut task = SyntheticTaskSpec::default_classification();
    task.train_size = 4;
    task.val_size = 2;
    task.test_size = 8;
    let data = generate_dataset(&task, derive_seed(seed, "norms-data", &[]))?;

    let base_cfg = VitConfig {
        image_size: 32,
        patch_size: 8,
        depth: 12,
        embed_dim: 32,
        num_heads: 4,
        mlp_ratio: 2.0,
        in_channels: 3,
    };
    let deflect_spec = ModelSpec {
        base_cfg: base_cfg.clone(),
        pretrained_init: PretrainedInit::Seeded,
        method: PeftMethod::Deflect,
        stem_init: StemInit::Repeat,
        adapter: AdapterConfig { rank: Some(4), ..Default::default() },
        upe: Some(UpeConfig::with_default_indices(&task.bands, seed)),
        task: TaskKind::Classification,
        num_classes: 4,
        data_channels: task.channels(),
        rgb_positions: [0, 1, 2],
        seed,
    };
    let frozen_spec = ModelSpec {
        method: PeftMethod::Frozen,
        upe: None,
        adapter: AdapterConfig::default(),
        ..deflect_spec.clone()
    };
    let deflect = deflect_spec.build::<f64>()?;
    let frozen = frozen_spec.build::<f64>()?;

    let probe = &data.test.samples[..4];
    let rows = displacement_norm_report(&deflect, &frozen, probe)?;
    let first_adapted = *deflect.adapted_layers.iter().next().expect("layers");
    let early_worst = rows[..first_adapted]
        .iter()
        .map(|r| r.mean_abs_diff)
        .fold(0.0f64, f64::max);
    report.push(
        "untrained adapter: zero norm change through the first adapted layer",
        early_worst <= 1e-6,
        format!("max mean |Δnorm| {early_worst:.3e} over layers 1..={first_adapted} (tol 1e-6)"),
    );

    let mut worst_rel = 0.0f64;
    for sample in probe {
        let mut g = Graph::new();
        let bound = deflect.bind(&mut g)?;
        let out = deflect.forward(
            &mut g,
            &bound,
            sample,
            &ForwardOptions { record_norms: false, monitor_deflection: true },
        )?;
        for ns in &out.norm_samples {
            for (r, d) in ns.reference_norms.iter().zip(&ns.deflected_norms) {
                if *r > 0.0 {
                    worst_rel = worst_rel.max((d - r).abs() / r);
                }
            }
        }
    }
    report.push(
        "per-token deflection norm constraint",
        worst_rel <= 1e-5,
        format!("max rel |‖Δ̃‖-‖Δ‖|/‖Δ‖ {worst_rel:.3e} (tol 1e-5)"),
    );
    Ok(report)
}

// ── Budget ────────────────────────────────────────────────────────────────

/// Encoder tuned-parameter budgets of the ViT-Large analog against the
/// published windows, plus the full rank grid.
pub fn budget_suite() -> Result<SuiteReport> {
    let mut report = SuiteReport { suite: "budget", lines: Vec::new() };
    let cfg = vit_large_analog();
    let upe = vit_large_upe(0);
    let adapter_at = |rank: Option<usize>| AdapterConfig { rank, ..Default::default() };
    let pct = |method: PeftMethod, rank: Option<usize>| -> Result<f64> {
        Ok(method_budget(&cfg, method, &adapter_at(rank), Some(&upe))?.tuned_fraction() * 100.0)
    };

    let d16 = pct(PeftMethod::Deflect, Some(16))?;
    report.push(
        "deflect rank 16 in [0.15%, 0.30%]",
        (0.15..=0.30).contains(&d16),
        format!("{d16:.4}%"),
    );
    let d8 = pct(PeftMethod::Deflect, Some(8))?;
    let d32 = pct(PeftMethod::Deflect, Some(32))?;
    report.push(
        "deflect rank grid strictly increasing",
        d8 < d16 && d16 < d32,
        format!("{d8:.4}% < {d16:.4}% < {d32:.4}%"),
    );
    for (r, f, target) in [(8, d8, 0.15), (16, d16, 0.20), (32, d32, 0.28)] {
        report.push(
            format!("deflect rank {r} within ±0.08 pt of {target}%"),
            (f - target).abs() <= 0.08,
            format!("{f:.4}%"),
        );
    }
    let dense = pct(PeftMethod::Deflect, None)?;
    report.push(
        "dense adapter within ±0.5 pt of 4.1%",
        (dense - 4.1).abs() <= 0.5,
        format!("{dense:.4}%"),
    );
    let lora = pct(PeftMethod::Lora { rank: 16, targets: LoraTargets::AllLinear }, None)?;
    report.push("lora rank 16 in [1.8%, 2.4%]", (1.8..=2.4).contains(&lora), format!("{lora:.4}%"));
    let bitfit = pct(PeftMethod::Bitfit, None)?;
    report.push(
        "bitfit within 0.09% ± 0.03 pt",
        (bitfit - 0.09).abs() <= 0.03,
        format!("{bitfit:.4}%"),
    );
    let normtune = pct(PeftMethod::Normtune, None)?;
    report.push(
        "normtune within 0.03% ± 0.02 pt",
        (normtune - 0.03).abs() <= 0.02,
        format!("{normtune:.4}%"),
    );
    report.push(
        "tuned fractions ordered normtune < bitfit < deflect < lora",
        normtune < bitfit && bitfit < d16 && d16 < lora,
        format!("{normtune:.4}% < {bitfit:.4}% < {d16:.4}% < {lora:.4}%"),
    );
    Ok(report)
}

/// Formatted budget table, one row per method/rank.
pub fn budget_table() -> Result<Vec<String>> {
    let rows = budget_report(&vit_large_analog(), &vit_large_upe(0))?;
    Ok(rows
        .iter()
        .map(|r| {
            let rank = r.rank.map_or("dense/na".to_string(), |k| k.to_string());
            format!(
                "{:<9} rank {:<8} theta_a {:>10}  tuned {:>8.4}%",
                r.method,
                rank,
                r.theta_a,
                r.tuned_fraction * 100.0
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn algebra_suite_passes_at_tolerance() {
        let report = algebra_suite(7, 10).unwrap();
        assert!(report.all_pass(), "{:?}", report.lines);
        assert_eq!(report.lines.len(), 3);
    }

    #[test]
    fn norms_suite_passes_on_untrained_adapter() {
        let report = norms_suite(11).unwrap();
        assert!(report.all_pass(), "{:?}", report.lines);
    }

    #[test]
    fn budget_suite_passes_all_windows() {
        let report = budget_suite().unwrap();
        assert!(report.all_pass(), "{:?}", report.lines);
    }
}
