//! Tuned-parameter budget reporting.
//!
//! Fractions are |θ_A| / (|θ_P| + |θ_A|) over encoder parameters only (the
//! task head is excluded) and are computed from shape listings, so budgets
//! of large configurations cost nothing to evaluate.

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterConfig;
use crate::baselines::{LoraTargets, PeftMethod};
use crate::error::Result;
use crate::model::encoder_budget_shapes;
use crate::params::{count_parameters, ParamCounts};
use crate::upe::UpeConfig;
use crate::vit::VitConfig;

/// ViT-Large analog used by the budget reports: depth 24, width 1024,
/// 16 heads, MLP ratio 4, 224-pixel inputs with 16-pixel patches.
pub fn vit_large_analog() -> VitConfig {
    VitConfig {
        image_size: 224,
        patch_size: 16,
        depth: 24,
        embed_dim: 1024,
        num_heads: 16,
        mlp_ratio: 4.0,
        in_channels: 3,
    }
}

/// 13-band multispectral sensor analog (RGB + NIR + nine further bands).
/// With the default index recipe this yields 11 indices × 10 statistics, a
/// 110-wide raw spectral feature ahead of the shared projection.
pub fn multispectral_13band_names() -> Vec<String> {
    [
        "R", "G", "B", "NIR", "B01", "B05", "B06", "B07", "B8A", "B09", "B10", "B11", "B12",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Adapter budget configuration for the ViT-Large analog.
pub fn vit_large_upe(seed: u64) -> UpeConfig {
    UpeConfig::with_default_indices(&multispectral_13band_names(), seed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetRow {
    pub method: String,
    pub rank: Option<usize>,
    pub theta_p: usize,
    pub theta_a: usize,
    /// |θ_A| / (|θ_P| + |θ_A|), encoder only.
    pub tuned_fraction: f64,
}

impl BudgetRow {
    fn new(method: &str, rank: Option<usize>, counts: ParamCounts) -> Self {
        BudgetRow {
            method: method.to_string(),
            rank,
            theta_p: counts.theta_p,
            theta_a: counts.theta_a,
            tuned_fraction: counts.tuned_fraction(),
        }
    }
}

/// Encoder parameter counts of one method on one configuration.
pub fn method_budget(
    cfg: &VitConfig,
    method: PeftMethod,
    adapter: &AdapterConfig,
    upe: Option<&UpeConfig>,
) -> Result<ParamCounts> {
    let (shapes, partition) = encoder_budget_shapes(cfg, method, adapter, upe)?;
    count_parameters(&shapes, &partition)
}

/// The budget table across methods, plus the rank grid {8, 16, 32, dense}
/// for the adapter and the low-rank baseline.
pub fn budget_report(cfg: &VitConfig, upe: &UpeConfig) -> Result<Vec<BudgetRow>> {
    let mut rows = Vec::new();
    let adapter_at = |rank: Option<usize>| AdapterConfig { rank, ..Default::default() };

    rows.push(BudgetRow::new(
        "frozen",
        None,
        method_budget(cfg, PeftMethod::Frozen, &adapter_at(None), None)?,
    ));
    rows.push(BudgetRow::new(
        "normtune",
        None,
        method_budget(cfg, PeftMethod::Normtune, &adapter_at(None), None)?,
    ));
    rows.push(BudgetRow::new(
        "bitfit",
        None,
        method_budget(cfg, PeftMethod::Bitfit, &adapter_at(None), None)?,
    ));
    for rank in [8usize, 16, 32] {
        rows.push(BudgetRow::new(
            "deflect",
            Some(rank),
            method_budget(cfg, PeftMethod::Deflect, &adapter_at(Some(rank)), Some(upe))?,
        ));
        rows.push(BudgetRow::new(
            "lora",
            Some(rank),
            method_budget(
                cfg,
                PeftMethod::Lora { rank, targets: LoraTargets::AllLinear },
                &adapter_at(None),
                None,
            )?,
        ));
    }
    rows.push(BudgetRow::new(
        "deflect",
        None,
        method_budget(cfg, PeftMethod::Deflect, &adapter_at(None), Some(upe))?,
    ));
    rows.push(BudgetRow::new(
        "full",
        None,
        method_budget(cfg, PeftMethod::Full, &adapter_at(None), None)?,
    ));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fraction(method: PeftMethod, rank: Option<usize>) -> f64 {
        let cfg = vit_large_analog();
        let upe = vit_large_upe(0);
        let adapter = AdapterConfig { rank, ..Default::default() };
        method_budget(&cfg, method, &adapter, Some(&upe)).unwrap().tuned_fraction()
    }

    #[test]
    fn frozen_baseline_has_zero_tuned_fraction() {
        assert_eq!(fraction(PeftMethod::Frozen, None), 0.0);
    }

    #[test]
    fn full_finetuning_tunes_everything() {
        assert_eq!(fraction(PeftMethod::Full, None), 1.0);
    }

    #[test]
    fn vit_large_deflect_budget_sits_in_the_published_window() {
        let f = fraction(PeftMethod::Deflect, Some(16));
        assert!((0.0015..=0.0030).contains(&f), "rank-16 fraction {f}");
    }

    #[test]
    fn deflect_rank_grid_is_monotone_and_brackets_published_values() {
        let f8 = fraction(PeftMethod::Deflect, Some(8));
        let f16 = fraction(PeftMethod::Deflect, Some(16));
        let f32_ = fraction(PeftMethod::Deflect, Some(32));
        assert!(f8 < f16 && f16 < f32_);
        assert!((f8 * 100.0 - 0.15).abs() <= 0.08, "rank 8: {}", f8 * 100.0);
        assert!((f16 * 100.0 - 0.20).abs() <= 0.08, "rank 16: {}", f16 * 100.0);
        assert!((f32_ * 100.0 - 0.28).abs() <= 0.08, "rank 32: {}", f32_ * 100.0);
    }

    #[test]
    fn dense_adapter_budget_matches_low_rank_baseline_scale() {
        let dense = fraction(PeftMethod::Deflect, None);
        assert!((dense * 100.0 - 4.1).abs() <= 0.5, "dense: {}", dense * 100.0);
    }

    #[test]
    fn lora_bitfit_normtune_budgets_match_published_values() {
        let lora = fraction(PeftMethod::Lora { rank: 16, targets: LoraTargets::AllLinear }, None);
        assert!((0.018..=0.024).contains(&lora), "lora-16: {lora}");
        let bitfit = fraction(PeftMethod::Bitfit, None);
        assert!((bitfit * 100.0 - 0.09).abs() <= 0.03, "bitfit: {}", bitfit * 100.0);
        let normtune = fraction(PeftMethod::Normtune, None);
        assert!((normtune * 100.0 - 0.03).abs() <= 0.02, "normtune: {}", normtune * 100.0);
    }

    #[test]
    fn tuned_fractions_order_across_methods() {
        let normtune = fraction(PeftMethod::Normtune, None);
        let bitfit = fraction(PeftMethod::Bitfit, None);
        let deflect = fraction(PeftMethod::Deflect, Some(16));
        let lora = fraction(PeftMethod::Lora { rank: 16, targets: LoraTargets::AllLinear }, None);
        assert!(normtune < bitfit && bitfit < deflect && deflect < lora);
    }

    #[test]
    fn qkv_targeting_is_exposed_and_smaller() {
        let qkv = fraction(PeftMethod::Lora { rank: 16, targets: LoraTargets::Qkv }, None);
        let all = fraction(PeftMethod::Lora { rank: 16, targets: LoraTargets::AllLinear }, None);
        assert!(qkv < all);
    }

    #[test]
    fn report_covers_methods_and_ranks() {
        let rows = budget_report(&vit_large_analog(), &vit_large_upe(0)).unwrap();
        assert!(rows.iter().any(|r| r.method == "deflect" && r.rank == Some(8)));
        assert!(rows.iter().any(|r| r.method == "deflect" && r.rank.is_none()));
        assert!(rows.iter().any(|r| r.method == "lora" && r.rank == Some(32)));
        assert!(rows.iter().any(|r| r.method == "full"));
    }
}
