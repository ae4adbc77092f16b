//! Untangled patch embedding.
//!
//! The RGB part x_P of a patch embedding comes from the pretrained stem; the
//! spectral part x_A summarizes the non-RGB radiometry of each patch by a
//! pixel-set encoding: sample a fraction of the patch's pixels, compute
//! per-pixel spectral indices, reduce each index to a fixed list of order
//! statistics, and project the concatenated statistics to the encoder width.
//! x_A is computed once per image, deterministically from the seed, and the
//! same rows feed every adapted layer.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MultispectralImage;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::graph::{Graph, NodeId};
use crate::tensor::{derive_seed, mean, quantile_linear, std_population, Element, TensorData};
use crate::vit::{self, BoundVit, VitConfig};

/// Guard added to index denominators.
pub const INDEX_DENOM_EPS: f64 = 1e-8;

// ── Statistics ────────────────────────────────────────────────────────────

/// One order statistic or moment of a sampled index distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Statistic {
    Mean,
    Std,
    Min,
    Max,
    Quantile(f64),
}

impl Statistic {
    /// Value of the statistic over an ascending-sorted slice. Evaluating on
    /// sorted data makes every statistic, including the summation-based
    /// ones, bitwise invariant to the pixel sampling order.
    pub fn apply_sorted(&self, sorted: &[f64]) -> f64 {
        match self {
            Statistic::Mean => mean(sorted),
            Statistic::Std => std_population(sorted),
            Statistic::Min => sorted[0],
            Statistic::Max => sorted[sorted.len() - 1],
            Statistic::Quantile(q) => quantile_linear(sorted, *q),
        }
    }
}

impl From<Statistic> for String {
    fn from(s: Statistic) -> String {
        match s {
            Statistic::Mean => "mean".into(),
            Statistic::Std => "std".into(),
            Statistic::Min => "min".into(),
            Statistic::Max => "max".into(),
            Statistic::Quantile(q) => format!("q{q}"),
        }
    }
}

impl TryFrom<String> for Statistic {
    type Error = Error;

    fn try_from(s: String) -> Result<Statistic> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(Statistic::Mean),
            "std" => Ok(Statistic::Std),
            "min" => Ok(Statistic::Min),
            "max" => Ok(Statistic::Max),
            "q1" => Ok(Statistic::Quantile(0.25)),
            "q3" => Ok(Statistic::Quantile(0.75)),
            q if q.starts_with('q') => {
                let level: f64 = q[1..]
                    .parse()
                    .map_err(|_| Error::Config(format!("bad statistic {s:?}")))?;
                if !(0.0..=1.0).contains(&level) {
                    return Err(Error::Config(format!("quantile level {level} outside [0,1]")));
                }
                Ok(Statistic::Quantile(level))
            }
            _ => Err(Error::Config(format!("unknown statistic {s:?}"))),
        }
    }
}

/// mean, std, min, max, Q1, Q3 and the 0.1/0.4/0.6/0.9 quantiles.
pub fn default_statistics() -> Vec<Statistic> {
    vec![
        Statistic::Mean,
        Statistic::Std,
        Statistic::Min,
        Statistic::Max,
        Statistic::Quantile(0.25),
        Statistic::Quantile(0.75),
        Statistic::Quantile(0.1),
        Statistic::Quantile(0.4),
        Statistic::Quantile(0.6),
        Statistic::Quantile(0.9),
    ]
}

// ── Spectral indices ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandTerm {
    pub band: String,
    pub coeff: f64,
}

/// A ratio of signed linear combinations of band reflectances. The
/// normalized-difference constructor covers NDVI-style indices, which stay
/// in [-1, 1] for nonnegative reflectances.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralIndexDef {
    pub name: String,
    pub numerator: Vec<BandTerm>,
    pub denominator: Vec<BandTerm>,
}

impl SpectralIndexDef {
    /// (a - b) / (a + b)
    pub fn normalized_difference(name: &str, plus: &str, minus: &str) -> Self {
        SpectralIndexDef {
            name: name.to_string(),
            numerator: vec![
                BandTerm { band: plus.into(), coeff: 1.0 },
                BandTerm { band: minus.into(), coeff: -1.0 },
            ],
            denominator: vec![
                BandTerm { band: plus.into(), coeff: 1.0 },
                BandTerm { band: minus.into(), coeff: 1.0 },
            ],
        }
    }

    /// NDVI = (NIR - R) / (NIR + R)
    pub fn ndvi() -> Self {
        Self::normalized_difference("NDVI", "NIR", "R")
    }

    /// NDTI = (R - G) / (R + G)
    pub fn ndti() -> Self {
        Self::normalized_difference("NDTI", "R", "G")
    }

    pub fn evaluate(&self, pixel: &[f32], band_map: &BTreeMap<String, usize>) -> Result<f64> {
        let term = |terms: &[BandTerm]| -> Result<f64> {
            let mut acc = 0.0;
            for t in terms {
                let ch = band_map
                    .get(&t.band)
                    .ok_or_else(|| Error::MissingBand(t.band.clone()))?;
                acc += t.coeff * pixel[*ch] as f64;
            }
            Ok(acc)
        };
        let num = term(&self.numerator)?;
        let den = term(&self.denominator)?;
        Ok(num / (den + INDEX_DENOM_EPS))
    }

    /// All bands the definition references.
    pub fn bands(&self) -> impl Iterator<Item = &str> {
        self.numerator
            .iter()
            .chain(self.denominator.iter())
            .map(|t| t.band.as_str())
    }
}

/// Default index list for a sensor: NDVI (when a NIR band exists), NDTI, and
/// one normalized difference against Red per remaining non-RGB band. No new
/// learnable patch embedder is introduced.
pub fn default_index_list(bands: &[String]) -> Vec<SpectralIndexDef> {
    let mut defs = Vec::new();
    if bands.iter().any(|b| b == "NIR") {
        defs.push(SpectralIndexDef::ndvi());
    }
    defs.push(SpectralIndexDef::ndti());
    for b in bands {
        if matches!(b.as_str(), "R" | "G" | "B" | "NIR") {
            continue;
        }
        defs.push(SpectralIndexDef::normalized_difference(&format!("ND_{b}"), b, "R"));
    }
    defs
}

// ── Configuration ─────────────────────────────────────────────────────────

fn default_fraction() -> f64 {
    0.10
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpeConfig {
    /// Fraction of pixels sampled per patch, in (0, 1].
    #[serde(default = "default_fraction")]
    pub sample_fraction: f64,
    pub indices: Vec<SpectralIndexDef>,
    #[serde(default = "default_statistics")]
    pub statistics: Vec<Statistic>,
    /// When false the raw statistics feed the encoder directly and their
    /// dimension must equal the embedding width.
    #[serde(default = "default_true")]
    pub use_projection: bool,
    #[serde(default)]
    pub seed: u64,
}

impl UpeConfig {
    pub fn with_default_indices(bands: &[String], seed: u64) -> Self {
        UpeConfig {
            sample_fraction: default_fraction(),
            indices: default_index_list(bands),
            statistics: default_statistics(),
            use_projection: true,
            seed,
        }
    }

    /// Width of a raw x_A row: |indices| × |statistics|.
    pub fn raw_dim(&self) -> usize {
        self.indices.len() * self.statistics.len()
    }

    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sample_fraction) || self.sample_fraction == 0.0 {
            return Err(Error::Config(format!(
                "sample_fraction {} outside (0, 1]",
                self.sample_fraction
            )));
        }
        if self.indices.is_empty() || self.statistics.is_empty() {
            return Err(Error::Config("index and statistics lists must be non-empty".into()));
        }
        if !self.use_projection && self.raw_dim() != embed_dim {
            return Err(Error::Config(format!(
                "without projection the raw dimension {} must equal the embedding width {embed_dim}",
                self.raw_dim()
            )));
        }
        Ok(())
    }
}

// ── Pixel-set encoding ────────────────────────────────────────────────────

/// Samples ⌈fraction · |pixels|⌉ pixels uniformly without replacement.
pub fn sample_pixel_set(
    pixels: &[Vec<f32>],
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f32>>> {
    if !(0.0..=1.0).contains(&fraction) || fraction == 0.0 {
        return Err(Error::Precondition(format!("fraction {fraction} outside (0, 1]")));
    }
    if pixels.is_empty() {
        return Err(Error::Precondition("patch has no pixels".into()));
    }
    let k = (fraction * pixels.len() as f64).ceil() as usize;
    let chosen = rand::seq::index::sample(rng, pixels.len(), k.min(pixels.len()));
    Ok(chosen.iter().map(|i| pixels[i].clone()).collect())
}

/// Per-pixel index values: one row per pixel, one column per definition.
pub fn compute_indices(
    pixels: &[Vec<f32>],
    defs: &[SpectralIndexDef],
    band_map: &BTreeMap<String, usize>,
) -> Result<Vec<Vec<f64>>> {
    pixels
        .iter()
        .map(|px| defs.iter().map(|d| d.evaluate(px, band_map)).collect())
        .collect()
}

/// Concatenated statistics, index-major: for each index column, every
/// configured statistic in order. Output length |defs| × |statistics|, which
/// makes the encoding invariant to patch size and pixel count.
pub fn compute_statistics(values: &[Vec<f64>], statistics: &[Statistic]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Precondition("statistics of an empty pixel set".into()));
    }
    let q = values[0].len();
    let mut out = Vec::with_capacity(q * statistics.len());
    for j in 0..q {
        let mut column: Vec<f64> = values.iter().map(|row| row[j]).collect();
        column.sort_by(|a, b| a.partial_cmp(b).expect("finite index values"));
        for s in statistics {
            out.push(s.apply_sorted(&column));
        }
    }
    Ok(out)
}

/// Raw x_A rows for every patch of an image: sample → indices → statistics.
/// The per-patch RNG derives from (seed, image id, patch index), so the
/// encoding is stable across epochs and identical at every adapted layer.
pub fn raw_spectral_features(
    img: &MultispectralImage,
    patch_size: usize,
    cfg: &UpeConfig,
    image_id: u64,
) -> Result<TensorData<f64>> {
    let per_side = img.width() / patch_size;
    let n = per_side * (img.height() / patch_size);
    let width = cfg.raw_dim();
    let mut data = Vec::with_capacity(n * width);
    for patch_idx in 0..n {
        let pixels = img.patch_pixels(patch_idx, patch_size);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            "pixel-set",
            &[image_id, patch_idx as u64],
        ));
        let sampled = sample_pixel_set(&pixels, cfg.sample_fraction, &mut rng)?;
        let indices = compute_indices(&sampled, &cfg.indices, img.band_map())?;
        data.extend(compute_statistics(&indices, &cfg.statistics)?);
    }
    TensorData::new(vec![n, width], data)
}

// ── Projection ────────────────────────────────────────────────────────────

/// Names and shapes of the shared spectral projection, part of θ_A.
pub fn upe_param_shapes(cfg: &UpeConfig, embed_dim: usize) -> Vec<(String, Vec<usize>)> {
    if !cfg.use_projection {
        return Vec::new();
    }
    vec![
        ("upe.proj.weight".to_string(), vec![cfg.raw_dim(), embed_dim]),
        ("upe.proj.bias".to_string(), vec![embed_dim]),
        ("upe.norm.gamma".to_string(), vec![embed_dim]),
        ("upe.norm.beta".to_string(), vec![embed_dim]),
    ]
}

/// Xavier-initialized projection followed by identity layer norm.
pub fn init_upe_params<E: Element>(
    cfg: &UpeConfig,
    embed_dim: usize,
    rng: &mut ChaCha8Rng,
) -> ParamSet<E> {
    let mut params = ParamSet::new();
    if cfg.use_projection {
        params.insert(
            "upe.proj.weight",
            TensorData::xavier_uniform(cfg.raw_dim(), embed_dim, rng),
        );
        params.insert("upe.proj.bias", TensorData::zeros(vec![embed_dim]));
        params.insert("upe.norm.gamma", TensorData::full(vec![embed_dim], E::ONE));
        params.insert("upe.norm.beta", TensorData::zeros(vec![embed_dim]));
    }
    params
}

#[derive(Debug, Clone, Copy)]
pub struct BoundUpe {
    pub proj_weight: NodeId,
    pub proj_bias: NodeId,
    pub norm_gamma: NodeId,
    pub norm_beta: NodeId,
}

pub fn bind_upe<E: Element>(
    g: &mut Graph<E>,
    params: &ParamSet<E>,
    cfg: &UpeConfig,
    trainable: &dyn Fn(&str) -> bool,
) -> (Option<BoundUpe>, crate::vit::NamedNodes) {
    if !cfg.use_projection {
        return (None, Vec::new());
    }
    let mut nodes = Vec::new();
    let mut bind = |g: &mut Graph<E>, name: &str| -> NodeId {
        let id = g.leaf(params.expect(name).clone(), trainable(name));
        nodes.push((name.to_string(), id));
        id
    };
    let bound = BoundUpe {
        proj_weight: bind(g, "upe.proj.weight"),
        proj_bias: bind(g, "upe.proj.bias"),
        norm_gamma: bind(g, "upe.norm.gamma"),
        norm_beta: bind(g, "upe.norm.beta"),
    };
    (Some(bound), nodes)
}

/// Projects raw statistics into the encoder width: linear → layer norm →
/// GELU, shared across all adapted layers. Without a projection the raw
/// rows pass through unchanged (their width must already match).
pub fn project_spectral<E: Element>(
    g: &mut Graph<E>,
    raw: NodeId,
    bound: Option<&BoundUpe>,
    embed_dim: usize,
) -> Result<NodeId> {
    match bound {
        Some(b) => {
            let lin = vit::linear(g, raw, b.proj_weight, b.proj_bias)?;
            let normed = g.layer_norm(lin, b.norm_gamma, b.norm_beta, vit::LN_EPS)?;
            Ok(g.gelu(normed))
        }
        None => {
            let width = g.value(raw).cols();
            if width != embed_dim {
                return Err(Error::Config(format!(
                    "projection disabled but raw width {width} differs from embedding width {embed_dim}"
                )));
            }
            Ok(raw)
        }
    }
}

/// Row-aligned pair (x_P, x_A) of one image.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingPair {
    pub x_p: NodeId,
    pub x_a: NodeId,
}

/// Full untangled patch embedding: x_P from the frozen RGB stem, x_A from
/// the pixel-set encoding of all bands plus the shared projection.
pub fn untangled_patch_embed<E: Element>(
    g: &mut Graph<E>,
    img: &MultispectralImage,
    vit_bound: &BoundVit,
    vit_cfg: &VitConfig,
    upe_cfg: &UpeConfig,
    upe_bound: Option<&BoundUpe>,
    image_id: u64,
) -> Result<EmbeddingPair> {
    let x_p = vit::patch_embed_rgb(g, img, vit_bound, vit_cfg)?;
    let raw = raw_spectral_features(img, vit_cfg.patch_size, upe_cfg, image_id)?;
    let raw_node = g.constant(raw.cast::<E>());
    let x_a = project_spectral(g, raw_node, upe_bound, vit_cfg.embed_dim)?;
    Ok(EmbeddingPair { x_p, x_a })
}
