//! Parameter-efficient finetuning baselines and the score-entanglement
//! diagnostic that motivates the untangled design.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::{Element, TensorData};
use crate::vit::{BoundVit, VitConfig};

// ── Method selection ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTargets {
    /// Query, key and value matrices only.
    Qkv,
    /// Every linear layer: q, k, v, output projection and both MLP maps.
    /// This is the targeting whose tuned fractions line up with published
    /// LoRA budgets on ViT encoders, and the default here.
    #[default]
    AllLinear,
}

fn default_lora_rank() -> usize {
    16
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PeftMethod {
    /// Frozen encoder, trainable head only.
    Frozen,
    /// Full finetuning (the oracle).
    Full,
    Lora {
        #[serde(default = "default_lora_rank")]
        rank: usize,
        #[serde(default)]
        targets: LoraTargets,
    },
    Bitfit,
    Normtune,
    Deflect,
}

impl PeftMethod {
    pub fn name(&self) -> &'static str {
        match self {
            PeftMethod::Frozen => "frozen",
            PeftMethod::Full => "full",
            PeftMethod::Lora { .. } => "lora",
            PeftMethod::Bitfit => "bitfit",
            PeftMethod::Normtune => "normtune",
            PeftMethod::Deflect => "deflect",
        }
    }

    /// Whether the method consumes all spectral channels through a
    /// re-initialized stem (the adapter path keeps the RGB stem and handles
    /// extra bands through the spectral embedding instead).
    pub fn uses_multispectral_stem(&self) -> bool {
        matches!(
            self,
            PeftMethod::Full | PeftMethod::Lora { .. } | PeftMethod::Bitfit | PeftMethod::Normtune
        )
    }
}

// ── Name classification for selective methods ─────────────────────────────

/// Bias-like parameters: projection/MLP/stem biases and layer-norm shifts.
pub fn is_bias_param(name: &str) -> bool {
    name.ends_with(".bias")
        || name.ends_with(".beta")
        || name.ends_with(".bq")
        || name.ends_with(".bk")
        || name.ends_with(".bv")
        || name.ends_with(".bo")
        || name.ends_with(".b1")
        || name.ends_with(".b2")
}

/// Layer-norm scale and shift parameters.
pub fn is_norm_param(name: &str) -> bool {
    name.ends_with(".gamma") || name.ends_with(".beta")
}

// ── LoRA ──────────────────────────────────────────────────────────────────

/// Weight matrices a LoRA configuration wraps, with their shapes.
pub fn lora_target_matrices(cfg: &VitConfig, targets: LoraTargets) -> Vec<(String, usize, usize)> {
    let d = cfg.embed_dim;
    let h = cfg.mlp_hidden();
    let mut out = Vec::new();
    for l in 0..cfg.depth {
        for m in ["wq", "wk", "wv"] {
            out.push((format!("blocks.{l}.attn.{m}"), d, d));
        }
        if targets == LoraTargets::AllLinear {
            out.push((format!("blocks.{l}.attn.wo"), d, d));
            out.push((format!("blocks.{l}.mlp.w1"), d, h));
            out.push((format!("blocks.{l}.mlp.w2"), h, d));
        }
    }
    out
}

/// Shapes of the low-rank update factors: for a target W of shape
/// rows×cols, A is rows×r and B is r×cols, so ΔW = A·B has rank ≤ r.
pub fn lora_param_shapes(cfg: &VitConfig, rank: usize, targets: LoraTargets) -> Vec<(String, Vec<usize>)> {
    let mut shapes = Vec::new();
    for (target, rows, cols) in lora_target_matrices(cfg, targets) {
        shapes.push((format!("lora.{target}.a"), vec![rows, rank]));
        shapes.push((format!("lora.{target}.b"), vec![rank, cols]));
    }
    shapes
}

/// A Xavier, B zero: W̃ = W_P at initialization.
pub fn init_lora_params<E: Element, R: Rng>(
    cfg: &VitConfig,
    rank: usize,
    targets: LoraTargets,
    rng: &mut R,
) -> ParamSet<E> {
    let mut params = ParamSet::new();
    for (name, shape) in lora_param_shapes(cfg, rank, targets) {
        let value = if name.ends_with(".a") {
            TensorData::xavier_uniform(shape[0], shape[1], rng)
        } else {
            TensorData::zeros(shape)
        };
        params.insert(name, value);
    }
    params
}

/// Rewires a bound encoder so every targeted weight becomes W_P + A·B.
/// The pretrained leaves stay frozen; only the factors train.
pub fn apply_lora<E: Element>(
    g: &mut Graph<E>,
    vit: &mut BoundVit,
    lora_params: &ParamSet<E>,
    cfg: &VitConfig,
    targets: LoraTargets,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<crate::vit::NamedNodes> {
    let mut nodes = Vec::new();
    for l in 0..cfg.depth {
        let mut wrap = |g: &mut Graph<E>, target: String, w: NodeId| -> Result<NodeId> {
            let a_name = format!("lora.{target}.a");
            let b_name = format!("lora.{target}.b");
            let a = g.leaf(lora_params.expect(&a_name).clone(), trainable(&a_name));
            let b = g.leaf(lora_params.expect(&b_name).clone(), trainable(&b_name));
            nodes.push((a_name, a));
            nodes.push((b_name, b));
            let delta = g.matmul(a, b)?;
            g.add(w, delta)
        };
        let block = &mut vit.blocks[l];
        block.wq = wrap(g, format!("blocks.{l}.attn.wq"), block.wq)?;
        block.wk = wrap(g, format!("blocks.{l}.attn.wk"), block.wk)?;
        block.wv = wrap(g, format!("blocks.{l}.attn.wv"), block.wv)?;
        if targets == LoraTargets::AllLinear {
            block.wo = wrap(g, format!("blocks.{l}.attn.wo"), block.wo)?;
            block.w1 = wrap(g, format!("blocks.{l}.mlp.w1"), block.w1)?;
            block.w2 = wrap(g, format!("blocks.{l}.mlp.w2"), block.w2)?;
        }
    }
    Ok(nodes)
}

// ── Multispectral stem initialization ─────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemInit {
    /// Pretrained RGB weight blocks tiled cyclically over all channels.
    #[default]
    Repeat,
    /// R, G, B channels copy the pretrained blocks; every other channel is
    /// Xavier-random.
    RgbPlusRandom,
}

/// Expands a pretrained RGB stem weight [(3 p²) × d] to C channels.
/// Rows are grouped channel-major, matching the patch flattening layout.
/// `rgb_positions` are the image channels holding R, G and B, used by the
/// copy strategy.
pub fn multispectral_stem_init<E: Element, R: Rng>(
    rgb_weight: &TensorData<E>,
    patch_size: usize,
    channels: usize,
    rgb_positions: [usize; 3],
    strategy: StemInit,
    rng: &mut R,
) -> Result<TensorData<E>> {
    if channels < 3 {
        return Err(Error::Config(format!(
            "multispectral stem needs at least 3 channels, got {channels}"
        )));
    }
    let p2 = patch_size * patch_size;
    let d = rgb_weight.shape()[1];
    if rgb_weight.shape()[0] != 3 * p2 {
        return Err(Error::Config(format!(
            "RGB stem weight has {} rows, expected {}",
            rgb_weight.shape()[0],
            3 * p2
        )));
    }
    let mut out = TensorData::<E>::zeros(vec![channels * p2, d]);
    let copy_block = |out: &mut TensorData<E>, dst_ch: usize, src_ch: usize| {
        for r in 0..p2 {
            let src = (src_ch * p2 + r) * d;
            let dst = (dst_ch * p2 + r) * d;
            let (src_row, dst_row) = (rgb_weight.data()[src..src + d].to_vec(), dst);
            out.data_mut()[dst_row..dst_row + d].copy_from_slice(&src_row);
        }
    };
    match strategy {
        StemInit::Repeat => {
            for c in 0..channels {
                copy_block(&mut out, c, c % 3);
            }
        }
        StemInit::RgbPlusRandom => {
            let random = TensorData::<E>::xavier_uniform(channels * p2, d, rng);
            out.data_mut().copy_from_slice(random.data());
            for (src_ch, &dst_ch) in rgb_positions.iter().enumerate() {
                copy_block(&mut out, dst_ch, src_ch);
            }
        }
    }
    Ok(out)
}

// ── Entanglement diagnostic ───────────────────────────────────────────────
//
// With a low-rank update W̃ = W_P + ΔW acting on summed embeddings
// x = x_P + x_A, the attention scores mix every combination of embedding
// part and weight part. The diagnostic reproduces the two expansions of the
// direct score matrix and reports each term's magnitude: the cross terms
// are exactly what a shared projection cannot disentangle.

/// Frobenius norms of the four embedding-part terms (Eq-7-style expansion,
/// weights kept combined) and the sixteen fully expanded terms.
#[derive(Debug, Clone)]
pub struct EntanglementReport {
    /// |direct − Σ four embedding terms|, max over entries.
    pub max_abs_err_embedding_expansion: f64,
    /// |direct − Σ sixteen weight-expanded terms|, max over entries.
    pub max_abs_err_full_expansion: f64,
    /// ("xP·W̃q xP·W̃k", magnitude) for the 2×2 embedding grid.
    pub embedding_terms: Vec<(String, f64)>,
    /// ("xP·Wp xA·ΔW", magnitude) for the 2×2×2×2 grid.
    pub full_terms: Vec<(String, f64)>,
}

fn frobenius<E: Element>(t: &TensorData<E>) -> f64 {
    t.data().iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt()
}

/// Verifies the low-rank score expansions numerically on given embeddings
/// and weight splits, in 64-bit, single-head scaling 1/√d.
pub fn entanglement_diagnostic(
    x_p: &TensorData<f64>,
    x_a: &TensorData<f64>,
    w_p_q: &TensorData<f64>,
    w_p_k: &TensorData<f64>,
    dw_q: &TensorData<f64>,
    dw_k: &TensorData<f64>,
) -> Result<EntanglementReport> {
    let d = x_p.cols();
    let scale = 1.0 / (d as f64).sqrt();
    let mut g = Graph::<f64>::new();
    let xp = g.constant(x_p.clone());
    let xa = g.constant(x_a.clone());
    let wpq = g.constant(w_p_q.clone());
    let wpk = g.constant(w_p_k.clone());
    let dwq = g.constant(dw_q.clone());
    let dwk = g.constant(dw_k.clone());

    // direct: ((xP+xA)(Wp+ΔW)q) ((xP+xA)(Wp+ΔW)k)ᵀ / √d
    let x = g.add(xp, xa)?;
    let wq = g.add(wpq, dwq)?;
    let wk = g.add(wpk, dwk)?;
    let score = |g: &mut Graph<f64>, qi: NodeId, wq: NodeId, kj: NodeId, wk: NodeId| -> Result<NodeId> {
        let q = g.matmul(qi, wq)?;
        let k = g.matmul(kj, wk)?;
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        Ok(g.scale(s, scale))
    };
    let direct = score(&mut g, x, wq, x, wk)?;

    // embedding expansion: four terms with combined weights
    let emb_parts = [("xP", xp), ("xA", xa)];
    let mut embedding_terms = Vec::new();
    let mut emb_sum: Option<NodeId> = None;
    for (qi_name, qi) in emb_parts {
        for (kj_name, kj) in emb_parts {
            let term = score(&mut g, qi, wq, kj, wk)?;
            embedding_terms.push((format!("{qi_name}·W̃q {kj_name}·W̃k"), frobenius(g.value(term))));
            emb_sum = Some(match emb_sum {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
    }
    let emb_sum = emb_sum.expect("four terms");

    // full expansion: sixteen terms with weights split too
    let wq_parts = [("Wq", wpq), ("ΔWq", dwq)];
    let wk_parts = [("Wk", wpk), ("ΔWk", dwk)];
    let mut full_terms = Vec::new();
    let mut full_sum: Option<NodeId> = None;
    for (qi_name, qi) in emb_parts {
        for (wq_name, wqp) in wq_parts {
            for (kj_name, kj) in emb_parts {
                for (wk_name, wkp) in wk_parts {
                    let term = score(&mut g, qi, wqp, kj, wkp)?;
                    full_terms.push((
                        format!("{qi_name}·{wq_name} {kj_name}·{wk_name}"),
                        frobenius(g.value(term)),
                    ));
                    full_sum = Some(match full_sum {
                        Some(acc) => g.add(acc, term)?,
                        None => term,
                    });
                }
            }
        }
    }
    let full_sum = full_sum.expect("sixteen terms");

    Ok(EntanglementReport {
        max_abs_err_embedding_expansion: g.value(direct).max_abs_diff(g.value(emb_sum)),
        max_abs_err_full_expansion: g.value(direct).max_abs_diff(g.value(full_sum)),
        embedding_terms,
        full_terms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::{attention_displacement, bind_vit, init_vit_params};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> VitConfig {
        VitConfig {
            image_size: 8,
            patch_size: 4,
            depth: 2,
            embed_dim: 8,
            num_heads: 2,
            mlp_ratio: 2.0,
            in_channels: 3,
        }
    }

    #[test]
    fn zero_b_lora_forward_is_identical_to_frozen() {
        let cfg = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = init_vit_params::<f64, _>(&cfg, 3, &mut rng);
        let lora = init_lora_params::<f64, _>(&cfg, 4, LoraTargets::AllLinear, &mut rng);
        let z = TensorData::<f64>::randn(vec![4, 8], 1.0, &mut rng);

        let mut g = Graph::new();
        let (vit_frozen, _) = bind_vit(&mut g, &params, &cfg, &|_| false);
        let (mut vit_lora, _) = bind_vit(&mut g, &params, &cfg, &|_| false);
        apply_lora(&mut g, &mut vit_lora, &lora, &cfg, LoraTargets::AllLinear, &|_| true).unwrap();
        let zid = g.constant(z);
        let (a, _) = attention_displacement(&mut g, zid, &vit_frozen.blocks[0], &cfg).unwrap();
        let (b, _) = attention_displacement(&mut g, zid, &vit_lora.blocks[0], &cfg).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn lora_update_respects_the_rank_bound() {
        use nalgebra::DMatrix;
        let cfg = cfg();
        let r = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut lora = init_lora_params::<f64, _>(&cfg, r, LoraTargets::Qkv, &mut rng);
        *lora.get_mut("lora.blocks.0.attn.wq.b").unwrap() =
            TensorData::randn(vec![r, 8], 1.0, &mut rng);
        let mut g = Graph::<f64>::new();
        let a = g.constant(lora.expect("lora.blocks.0.attn.wq.a").clone());
        let b = g.constant(lora.expect("lora.blocks.0.attn.wq.b").clone());
        let delta = g.matmul(a, b).unwrap();
        let m = DMatrix::from_row_slice(8, 8, g.value(delta).data());
        let svd = m.svd(false, false);
        let mut sv: Vec<f64> = svd.singular_values.iter().cloned().collect();
        sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
        for &s in &sv[r..] {
            assert!(s < 1e-6 * sv[0]);
        }
    }

    #[test]
    fn merged_lora_weight_is_exactly_base_plus_product() {
        let cfg = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = init_vit_params::<f64, _>(&cfg, 3, &mut rng);
        let mut lora = init_lora_params::<f64, _>(&cfg, 4, LoraTargets::Qkv, &mut rng);
        *lora.get_mut("lora.blocks.1.attn.wk.b").unwrap() =
            TensorData::randn(vec![4, 8], 0.5, &mut rng);
        let mut g = Graph::new();
        let (mut vit, _) = bind_vit(&mut g, &params, &cfg, &|_| false);
        apply_lora(&mut g, &mut vit, &lora, &cfg, LoraTargets::Qkv, &|_| true).unwrap();
        // ‖W̃ − W_P − A·B‖ = 0 exactly
        let a = g.constant(lora.expect("lora.blocks.1.attn.wk.a").clone());
        let b = g.constant(lora.expect("lora.blocks.1.attn.wk.b").clone());
        let ab = g.matmul(a, b).unwrap();
        let base = g.constant(params.expect("blocks.1.attn.wk").clone());
        let expected = g.add(base, ab).unwrap();
        assert_eq!(g.value(vit.blocks[1].wk), g.value(expected));
    }

    #[test]
    fn bias_and_norm_name_classification() {
        assert!(is_bias_param("blocks.3.attn.bq"));
        assert!(is_bias_param("blocks.0.mlp.b2"));
        assert!(is_bias_param("patch.bias"));
        assert!(is_bias_param("blocks.1.norm2.beta"));
        assert!(!is_bias_param("blocks.1.norm2.gamma"));
        assert!(!is_bias_param("blocks.3.attn.wq"));
        assert!(!is_bias_param("patch.pos"));
        assert!(is_norm_param("final_norm.gamma"));
        assert!(is_norm_param("blocks.5.norm1.beta"));
        assert!(!is_norm_param("blocks.5.attn.bo"));
    }

    #[test]
    fn repeat_stem_tiles_rgb_blocks_cyclically() {
        let p = 2;
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rgb = TensorData::<f64>::randn(vec![3 * p * p, d], 1.0, &mut rng);
        let six = multispectral_stem_init(&rgb, p, 6, [0, 1, 2], StemInit::Repeat, &mut rng).unwrap();
        let p2 = p * p;
        for c in 0..6 {
            for r in 0..p2 {
                for j in 0..d {
                    assert_eq!(six.at2(c * p2 + r, j), rgb.at2((c % 3) * p2 + r, j));
                }
            }
        }
    }

    #[test]
    fn three_channel_stem_matches_either_strategy() {
        let p = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rgb = TensorData::<f64>::randn(vec![3 * p * p, 4], 1.0, &mut rng);
        let a = multispectral_stem_init(&rgb, p, 3, [0, 1, 2], StemInit::Repeat, &mut rng).unwrap();
        let b = multispectral_stem_init(&rgb, p, 3, [0, 1, 2], StemInit::RgbPlusRandom, &mut rng).unwrap();
        assert_eq!(&a, &rgb);
        assert_eq!(&b, &rgb);
    }

    #[test]
    fn fewer_than_three_channels_is_a_configuration_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rgb = TensorData::<f64>::randn(vec![12, 4], 1.0, &mut rng);
        assert!(matches!(
            multispectral_stem_init(&rgb, 2, 2, [0, 1, 2], StemInit::Repeat, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rgb_plus_random_masks_to_rgb_stem_on_zero_extra_bands() {
        // an image whose extra bands are all zero passes only through the
        // copied RGB blocks, so the 6-channel stem output equals the
        // 3-channel stem output
        let p = 2;
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rgb = TensorData::<f64>::randn(vec![3 * p * p, d], 1.0, &mut rng);
        let six = multispectral_stem_init(&rgb, p, 6, [0, 1, 2], StemInit::RgbPlusRandom, &mut rng).unwrap();
        // patch vector: channels 0..2 random reflectances, 3..5 zero
        let mut rng2 = ChaCha8Rng::seed_from_u64(8);
        let p2 = p * p;
        let mut full = vec![0.0f64; 6 * p2];
        for v in full.iter_mut().take(3 * p2) {
            *v = rng2.gen_range(0.0..1.0);
        }
        let rgb_vec = &full[..3 * p2];
        let project = |w: &TensorData<f64>, x: &[f64]| -> Vec<f64> {
            (0..d).map(|j| (0..x.len()).map(|i| x[i] * w.at2(i, j)).sum()).collect()
        };
        assert_eq!(project(&six, &full), project(&rgb, rgb_vec));
    }

    #[test]
    fn entanglement_cross_terms_vanish_without_spectral_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x_p = TensorData::<f64>::randn(vec![3, 6], 1.0, &mut rng);
        let x_a = TensorData::<f64>::zeros(vec![3, 6]);
        let w = |rng: &mut ChaCha8Rng| TensorData::<f64>::randn(vec![6, 6], 0.5, rng);
        let report = entanglement_diagnostic(&x_p, &x_a, &w(&mut rng), &w(&mut rng), &w(&mut rng), &w(&mut rng)).unwrap();
        for (name, mag) in &report.embedding_terms {
            if name.contains("xA") {
                assert_eq!(*mag, 0.0, "{name}");
            }
        }
        assert!(report.max_abs_err_embedding_expansion < 1e-12);
    }

    #[test]
    fn entanglement_reduces_to_pretrained_terms_without_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x_p = TensorData::<f64>::randn(vec![3, 6], 1.0, &mut rng);
        let x_a = TensorData::<f64>::randn(vec![3, 6], 1.0, &mut rng);
        let wq = TensorData::<f64>::randn(vec![6, 6], 0.5, &mut rng);
        let wk = TensorData::<f64>::randn(vec![6, 6], 0.5, &mut rng);
        let zero = TensorData::<f64>::zeros(vec![6, 6]);
        let report = entanglement_diagnostic(&x_p, &x_a, &wq, &wk, &zero, &zero).unwrap();
        let wp_terms: usize = report
            .full_terms
            .iter()
            .filter(|(name, mag)| !name.contains('Δ') && *mag > 0.0)
            .count();
        assert_eq!(wp_terms, 4);
        for (name, mag) in &report.full_terms {
            if name.contains('Δ') {
                assert_eq!(*mag, 0.0, "{name}");
            }
        }
    }

    #[test]
    fn entanglement_expansions_match_direct_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let x_p = TensorData::<f64>::randn(vec![4, 6], 1.0, &mut rng);
            let x_a = TensorData::<f64>::randn(vec![4, 6], 1.0, &mut rng);
            let w = |rng: &mut ChaCha8Rng, s: f64| TensorData::<f64>::randn(vec![6, 6], s, rng);
            let report = entanglement_diagnostic(
                &x_p,
                &x_a,
                &w(&mut rng, 0.5),
                &w(&mut rng, 0.5),
                &w(&mut rng, 0.1),
                &w(&mut rng, 0.1),
            )
            .unwrap();
            assert!(report.max_abs_err_embedding_expansion < 1e-10);
            assert!(report.max_abs_err_full_expansion < 1e-10);
            // the cross terms the shared projection cannot separate are real
            let cross: f64 = report
                .embedding_terms
                .iter()
                .filter(|(n, _)| n.contains("xP") && n.contains("xA"))
                .map(|(_, m)| *m)
                .sum();
            assert!(cross > 0.0);
        }
    }
}
