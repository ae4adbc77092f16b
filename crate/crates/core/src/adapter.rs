//! Untangled attention and norm-constrained embedding deflection.
//!
//! At each adapted layer the standard attention sublayer is replaced: new
//! query/key/value matrices W_A process the fixed spectral embedding x_A
//! alongside the frozen W_P acting on the current latent state, and the
//! resulting displacement is rescaled per token so its norm matches the
//! displacement the frozen parameters would have produced on the same
//! input. Training therefore changes the direction of each token's update,
//! never its magnitude, which preserves the geometry of the pretrained
//! latent space.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::{Element, TensorData};
use crate::vit::{
    attention_displacement, attention_from_qkv, head_scores, linear, row_norms_f64,
    AttentionOverride, BoundBlock, VitConfig,
};

fn default_eps() -> f64 {
    1e-8
}

fn default_rank() -> Option<usize> {
    Some(16)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    /// 1-based indices of adapted layers; empty selects the per-depth
    /// default (3,5,7,11 at depth 12; 7,11,15,23 at depth 24).
    #[serde(default)]
    pub adapted_layers: Vec<usize>,
    /// Low-rank dimension of the new matrices; `None` keeps them dense.
    #[serde(default = "default_rank")]
    pub rank: Option<usize>,
    #[serde(default = "default_eps")]
    pub epsilon_norm: f64,
    /// Stop gradients from flowing through the reference norm.
    #[serde(default)]
    pub detach_reference_norm: bool,
    /// Take reference norms from a frozen forward pass on x_P instead of
    /// re-evaluating the pretrained attention on the current latent state.
    #[serde(default)]
    pub reference_from_frozen_trajectory: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            adapted_layers: Vec::new(),
            rank: default_rank(),
            epsilon_norm: default_eps(),
            detach_reference_norm: false,
            reference_from_frozen_trajectory: false,
        }
    }
}

impl AdapterConfig {
    pub fn default_layers(depth: usize) -> Result<Vec<usize>> {
        match depth {
            12 => Ok(vec![3, 5, 7, 11]),
            24 => Ok(vec![7, 11, 15, 23]),
            _ => Err(Error::Config(format!(
                "no default adapted layers for depth {depth}; set adapted_layers explicitly"
            ))),
        }
    }

    /// Adapted-layer set, falling back to the per-depth default.
    pub fn resolve_layers(&self, depth: usize) -> Result<BTreeSet<usize>> {
        let layers = if self.adapted_layers.is_empty() {
            Self::default_layers(depth)?
        } else {
            self.adapted_layers.clone()
        };
        for &l in &layers {
            if l == 0 || l > depth {
                return Err(Error::Config(format!("adapted layer {l} outside 1..={depth}")));
            }
        }
        Ok(layers.into_iter().collect())
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        self.resolve_layers(depth)?;
        if self.epsilon_norm <= 0.0 {
            return Err(Error::Config("epsilon_norm must be positive".into()));
        }
        if self.rank == Some(0) {
            return Err(Error::Config("rank must be positive (or omitted for dense)".into()));
        }
        Ok(())
    }
}

// ── Adapter parameters ────────────────────────────────────────────────────

/// Shapes of the new attention matrices, per adapted layer and projection
/// kind. Low-rank pairs W = A·B with A d×r and B r×d; dense d×d otherwise.
pub fn uatt_param_shapes(
    layers: &BTreeSet<usize>,
    rank: Option<usize>,
    d: usize,
) -> Vec<(String, Vec<usize>)> {
    let mut shapes = Vec::new();
    for &l in layers {
        for m in ["q", "k", "v"] {
            match rank {
                Some(r) => {
                    shapes.push((format!("uatt.{l}.{m}.a"), vec![d, r]));
                    shapes.push((format!("uatt.{l}.{m}.b"), vec![r, d]));
                }
                None => shapes.push((format!("uatt.{l}.{m}.w"), vec![d, d])),
            }
        }
    }
    shapes
}

/// Low-rank factors start as Xavier A with zero B, dense matrices start at
/// zero; either way the adapted model is exactly the frozen model at step 0.
pub fn init_uatt_params<E: Element, R: Rng>(
    layers: &BTreeSet<usize>,
    rank: Option<usize>,
    d: usize,
    rng: &mut R,
) -> ParamSet<E> {
    let mut params = ParamSet::new();
    for (name, shape) in uatt_param_shapes(layers, rank, d) {
        let value = if name.ends_with(".a") {
            TensorData::xavier_uniform(shape[0], shape[1], rng)
        } else {
            TensorData::zeros(shape)
        };
        params.insert(name, value);
    }
    params
}

/// Effective new matrices of one adapted layer as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct BoundUattLayer {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
}

/// Binds adapter parameters and materializes W = A·B for low-rank layers.
pub fn bind_uatt<E: Element>(
    g: &mut Graph<E>,
    params: &ParamSet<E>,
    layers: &BTreeSet<usize>,
    rank: Option<usize>,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<(BTreeMap<usize, BoundUattLayer>, crate::vit::NamedNodes)> {
    let mut nodes = Vec::new();
    let mut bound = BTreeMap::new();
    for &l in layers {
        let mut effective = |g: &mut Graph<E>, m: &str| -> Result<NodeId> {
            match rank {
                Some(_) => {
                    let a_name = format!("uatt.{l}.{m}.a");
                    let b_name = format!("uatt.{l}.{m}.b");
                    let a = g.leaf(params.expect(&a_name).clone(), trainable(&a_name));
                    let b = g.leaf(params.expect(&b_name).clone(), trainable(&b_name));
                    nodes.push((a_name, a));
                    nodes.push((b_name, b));
                    g.matmul(a, b)
                }
                None => {
                    let w_name = format!("uatt.{l}.{m}.w");
                    let w = g.leaf(params.expect(&w_name).clone(), trainable(&w_name));
                    nodes.push((w_name, w));
                    Ok(w)
                }
            }
        };
        let layer = BoundUattLayer {
            wq: effective(g, "q")?,
            wk: effective(g, "k")?,
            wv: effective(g, "v")?,
        };
        bound.insert(l, layer);
    }
    Ok((bound, nodes))
}

// ── Untangled attention ───────────────────────────────────────────────────

/// Combined projections q̃ = z W_P + b_P + x_A W_A (and likewise for k, v).
/// The pretrained bias rides with the pretrained term, so zeroed W_A
/// reproduces the frozen projections bitwise.
fn uatt_qkv<E: Element>(
    g: &mut Graph<E>,
    z_norm: NodeId,
    x_a: NodeId,
    block: &BoundBlock,
    uatt: &BoundUattLayer,
) -> Result<(NodeId, NodeId, NodeId)> {
    if g.value(z_norm).shape() != g.value(x_a).shape() {
        return Err(Error::ShapeMismatch {
            op: "uatt",
            lhs: g.value(z_norm).shape().to_vec(),
            rhs: g.value(x_a).shape().to_vec(),
        });
    }
    let combine = |g: &mut Graph<E>, wp, bp, wa| -> Result<NodeId> {
        let pre = linear(g, z_norm, wp, bp)?;
        let aux = g.matmul(x_a, wa)?;
        g.add(pre, aux)
    };
    Ok((
        combine(g, block.wq, block.bq, uatt.wq)?,
        combine(g, block.wk, block.bk, uatt.wk)?,
        combine(g, block.wv, block.bv, uatt.wv)?,
    ))
}

/// Pre-softmax untangled scores per head, combined formulation.
pub fn uatt_scores<E: Element>(
    g: &mut Graph<E>,
    z_norm: NodeId,
    x_a: NodeId,
    block: &BoundBlock,
    uatt: &BoundUattLayer,
    cfg: &VitConfig,
) -> Result<Vec<NodeId>> {
    let (q, k, _) = uatt_qkv(g, z_norm, x_a, block, uatt)?;
    head_scores(g, q, k, cfg)
}

/// The same scores as the explicit four-term sum: RGB-to-RGB,
/// RGB-to-spectral, spectral-to-RGB and spectral-to-spectral products (the
/// pretrained biases ride with the RGB projections). Returns per head the
/// four n×n terms; their sum must match [`uatt_scores`].
pub fn uatt_score_terms<E: Element>(
    g: &mut Graph<E>,
    z_norm: NodeId,
    x_a: NodeId,
    block: &BoundBlock,
    uatt: &BoundUattLayer,
    cfg: &VitConfig,
) -> Result<Vec<[NodeId; 4]>> {
    let q_p = linear(g, z_norm, block.wq, block.bq)?;
    let k_p = linear(g, z_norm, block.wk, block.bk)?;
    let q_a = g.matmul(x_a, uatt.wq)?;
    let k_a = g.matmul(x_a, uatt.wk)?;
    let pp = head_scores(g, q_p, k_p, cfg)?;
    let pa = head_scores(g, q_p, k_a, cfg)?;
    let ap = head_scores(g, q_a, k_p, cfg)?;
    let aa = head_scores(g, q_a, k_a, cfg)?;
    Ok((0..cfg.num_heads).map(|h| [pp[h], pa[h], ap[h], aa[h]]).collect())
}

/// Raw (pre-deflection) untangled displacement D: softmax over the combined
/// scores, values z W_P^V + b_P^V + x_A W_A^V, heads concatenated and passed
/// through the pretrained output projection.
pub fn uatt_displacement<E: Element>(
    g: &mut Graph<E>,
    z_norm: NodeId,
    x_a: NodeId,
    block: &BoundBlock,
    uatt: &BoundUattLayer,
    cfg: &VitConfig,
) -> Result<NodeId> {
    let (q, k, v) = uatt_qkv(g, z_norm, x_a, block, uatt)?;
    Ok(attention_from_qkv(g, q, k, v, block.wo, block.bo, cfg)?.0)
}

// ── Deflection ────────────────────────────────────────────────────────────

/// Rescales each row of `displacement` to the norm of the matching
/// `reference` row: out_i = D_i · (‖ref_i‖ + eps) / (‖D_i‖ + eps).
///
/// The smoothing in both numerator and denominator keeps the map defined on
/// zero rows and makes D == reference an exact fixed point, so an adapter at
/// zero initialization reproduces the frozen sublayer bit for bit.
pub fn deflect<E: Element>(
    g: &mut Graph<E>,
    displacement: NodeId,
    reference: NodeId,
    eps: f64,
    detach_reference_norm: bool,
) -> Result<NodeId> {
    if g.value(displacement).shape() != g.value(reference).shape() {
        return Err(Error::ShapeMismatch {
            op: "deflect",
            lhs: g.value(displacement).shape().to_vec(),
            rhs: g.value(reference).shape().to_vec(),
        });
    }
    let mut ref_norm = g.l2_norm_rows(reference)?;
    if detach_reference_norm {
        ref_norm = g.detach(ref_norm);
    }
    deflect_to_norms(g, displacement, ref_norm, eps)
}

/// Deflection against precomputed per-token reference norms (the
/// frozen-trajectory mode).
pub fn deflect_to_norms<E: Element>(
    g: &mut Graph<E>,
    displacement: NodeId,
    reference_norms: NodeId,
    eps: f64,
) -> Result<NodeId> {
    let d_norm = g.l2_norm_rows(displacement)?;
    let num = g.add_scalar(reference_norms, eps);
    let den = g.add_scalar(d_norm, eps);
    let factor = g.div(num, den)?;
    g.mul_col_broadcast(displacement, factor)
}

// ── The adapted attention sublayer as a transport hook ────────────────────

/// Per-token norms observed at one adapted layer of one forward pass.
#[derive(Debug, Clone)]
pub struct NormSample {
    pub layer: usize,
    /// Norm targets ‖Δ₁z‖ from the reference path.
    pub reference_norms: Vec<f64>,
    /// Norms of the deflected displacement ‖Δ̃₁z‖.
    pub deflected_norms: Vec<f64>,
}

/// Attention override implementing the full adapted sublayer: reference
/// displacement with pretrained parameters on the same pre-norm input,
/// untangled displacement, then the norm-matching deflection.
pub struct DeflectHook<E: Element> {
    layers: BTreeSet<usize>,
    pub x_a: NodeId,
    pub uatt: BTreeMap<usize, BoundUattLayer>,
    pub epsilon_norm: f64,
    pub detach_reference_norm: bool,
    /// Per-layer frozen-trajectory reference norms; `None` re-evaluates the
    /// pretrained attention on the current latent state (the default).
    pub frozen_reference_norms: Option<BTreeMap<usize, TensorData<E>>>,
    /// Filled with per-layer norm observations when enabled.
    pub monitor: Option<Vec<NormSample>>,
}

impl<E: Element> DeflectHook<E> {
    pub fn new(
        adapter: &AdapterConfig,
        layers: BTreeSet<usize>,
        x_a: NodeId,
        uatt: BTreeMap<usize, BoundUattLayer>,
    ) -> Self {
        DeflectHook {
            layers,
            x_a,
            uatt,
            epsilon_norm: adapter.epsilon_norm,
            detach_reference_norm: adapter.detach_reference_norm,
            frozen_reference_norms: None,
            monitor: None,
        }
    }
}

impl<E: Element> AttentionOverride<E> for DeflectHook<E> {
    fn adapted_layers(&self) -> &BTreeSet<usize> {
        &self.layers
    }

    fn attention(
        &mut self,
        g: &mut Graph<E>,
        layer: usize,
        z_norm: NodeId,
        block: &BoundBlock,
        cfg: &VitConfig,
    ) -> Result<NodeId> {
        let uatt = *self
            .uatt
            .get(&layer)
            .ok_or_else(|| Error::Config(format!("no adapter parameters for layer {layer}")))?;
        let displacement = uatt_displacement(g, z_norm, self.x_a, block, &uatt, cfg)?;
        let (deflected, reference_norms) = match &self.frozen_reference_norms {
            Some(per_layer) => {
                let norms = per_layer.get(&layer).ok_or_else(|| {
                    Error::Config(format!("no frozen reference norms for layer {layer}"))
                })?;
                let norms_node = g.constant(norms.clone());
                let out = deflect_to_norms(g, displacement, norms_node, self.epsilon_norm)?;
                (out, norms.to_f64_vec())
            }
            None => {
                let (reference, _) = attention_displacement(g, z_norm, block, cfg)?;
                let out = deflect(g, displacement, reference, self.epsilon_norm, self.detach_reference_norm)?;
                (out, row_norms_f64(g.value(reference)))
            }
        };
        if let Some(samples) = self.monitor.as_mut() {
            samples.push(NormSample {
                layer,
                reference_norms,
                deflected_norms: row_norms_f64(g.value(deflected)),
            });
        }
        Ok(deflected)
    }
}
