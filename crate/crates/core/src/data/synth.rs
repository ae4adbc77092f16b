//! Synthetic multispectral datasets with controllable RGB ambiguity.
//!
//! The generator builds tasks where a configurable subset of classes shares
//! RGB statistics and is only separable through the non-RGB bands. The
//! stated separation guarantee for the default spec: a pixel-level
//! diagonal-Gaussian (quadratic) classifier on the non-RGB bands reaches at
//! least 95% accuracy, while the same classifier restricted to the RGB bands
//! stays within 0.15 of chance (1/K for K ambiguous classes) on the
//! ambiguous subset. Both checks run as tests against the oracles below.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::derive_seed;

use super::msi::{read_mask, read_msi, write_mask, write_msi};
use super::{Dataset, DatasetSplit, Label, MultispectralImage, Sample, TaskKind};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub task: TaskKind,
    pub num_classes: usize,
    pub image_size: usize,
    /// Band names in channel order; must contain R, G, B.
    pub bands: Vec<String>,
    /// Per class, per channel mean reflectance in [0, 1].
    pub class_spectra: Vec<Vec<f32>>,
    /// Classes sharing RGB statistics (separable only beyond RGB).
    pub ambiguous_classes: Vec<usize>,
    /// Std of i.i.d. per-pixel Gaussian noise.
    pub noise_level: f32,
    /// Amplitude of the smooth per-image brightness field.
    pub texture_amplitude: f32,
    /// Coarse cells per side of the brightness field; higher is rougher.
    pub texture_scale: usize,
    /// Seed points of the label map (segmentation only).
    pub blob_count: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("synthetic task needs at least two classes".into()));
        }
        if self.class_spectra.len() != self.num_classes {
            return Err(Error::Config(format!(
                "{} classes but {} spectra",
                self.num_classes,
                self.class_spectra.len()
            )));
        }
        for (k, s) in self.class_spectra.iter().enumerate() {
            if s.len() != self.bands.len() {
                return Err(Error::Config(format!(
                    "class {k} spectrum has {} entries for {} bands",
                    s.len(),
                    self.bands.len()
                )));
            }
        }
        for name in ["R", "G", "B"] {
            if !self.bands.iter().any(|b| b == name) {
                return Err(Error::Config(format!("band list lacks {name}")));
            }
        }
        if self.ambiguous_classes.len() < 2 {
            return Err(Error::Config(
                "at least two classes must share RGB statistics".into(),
            ));
        }
        if self.ambiguous_classes.iter().any(|&k| k >= self.num_classes) {
            return Err(Error::Config("ambiguous class index out of range".into()));
        }
        // the RGB-ambiguous property: shared RGB spectra within noise
        let rgb: Vec<usize> = ["R", "G", "B"]
            .iter()
            .map(|n| self.bands.iter().position(|b| b == n).expect("checked above"))
            .collect();
        let first = self.ambiguous_classes[0];
        for &k in &self.ambiguous_classes[1..] {
            for &c in &rgb {
                let diff = (self.class_spectra[first][c] - self.class_spectra[k][c]).abs();
                if diff > self.noise_level {
                    return Err(Error::Config(format!(
                        "classes {first} and {k} differ by {diff} in RGB band {c}, more than the noise level"
                    )));
                }
            }
        }
        if self.task == TaskKind::Segmentation && self.blob_count == 0 {
            return Err(Error::Config("segmentation needs blob_count >= 1".into()));
        }
        if self.train_size == 0 || self.val_size == 0 || self.test_size == 0 {
            return Err(Error::Config("all splits need at least one sample".into()));
        }
        Ok(())
    }

    pub fn band_map(&self) -> BTreeMap<String, usize> {
        self.bands.iter().enumerate().map(|(i, b)| (b.clone(), i)).collect()
    }

    pub fn channels(&self) -> usize {
        self.bands.len()
    }

    /// Default 4-class classification task, 9 bands, classes 0 and 1
    /// RGB-ambiguous. The six extra bands are paired so that classes 0 and 1
    /// also collide after any channel-summing stem reinitialization: X1+X4,
    /// X2+X5 and X3+X6 have equal per-class sums, while the individual bands
    /// separate the classes cleanly.
    pub fn default_classification() -> Self {
        SyntheticTaskSpec {
            task: TaskKind::Classification,
            num_classes: 4,
            image_size: 32,
            bands: ["R", "G", "B", "NIR", "X2", "X3", "X4", "X5", "X6"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            class_spectra: vec![
                //        R     G     B     NIR   X2    X3    X4    X5    X6
                vec![0.45, 0.45, 0.45, 0.70, 0.30, 0.55, 0.30, 0.50, 0.45],
                vec![0.45, 0.45, 0.45, 0.30, 0.50, 0.45, 0.70, 0.30, 0.55],
                vec![0.65, 0.35, 0.25, 0.50, 0.40, 0.50, 0.50, 0.40, 0.50],
                vec![0.25, 0.45, 0.65, 0.45, 0.45, 0.40, 0.55, 0.35, 0.60],
            ],
            ambiguous_classes: vec![0, 1],
            noise_level: 0.05,
            texture_amplitude: 0.08,
            texture_scale: 4,
            blob_count: 0,
            train_size: 96,
            val_size: 32,
            test_size: 64,
        }
    }

    /// Default 4-class segmentation task over the same spectra.
    pub fn default_segmentation() -> Self {
        let mut spec = Self::default_classification();
        spec.task = TaskKind::Segmentation;
        spec.blob_count = 5;
        spec.train_size = 48;
        spec.val_size = 16;
        spec.test_size = 32;
        spec
    }
}

// ── Generation ────────────────────────────────────────────────────────────

/// Smooth per-image brightness field: a coarse grid of uniform values,
/// bilinearly interpolated to full resolution.
fn value_noise_field(size: usize, cells: usize, amplitude: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let cells = cells.max(1);
    let grid: Vec<f32> = (0..(cells + 1) * (cells + 1))
        .map(|_| rng.gen_range(-1.0f32..=1.0))
        .collect();
    let mut field = vec![0.0f32; size * size];
    let step = size as f32 / cells as f32;
    for y in 0..size {
        for x in 0..size {
            let gy = (y as f32 / step).min(cells as f32 - 1e-6);
            let gx = (x as f32 / step).min(cells as f32 - 1e-6);
            let (iy, ix) = (gy as usize, gx as usize);
            let (fy, fx) = (gy - iy as f32, gx - ix as f32);
            let g = |yy: usize, xx: usize| grid[yy * (cells + 1) + xx];
            let top = g(iy, ix) * (1.0 - fx) + g(iy, ix + 1) * fx;
            let bot = g(iy + 1, ix) * (1.0 - fx) + g(iy + 1, ix + 1) * fx;
            field[y * size + x] = (top * (1.0 - fy) + bot * fy) * amplitude;
        }
    }
    field
}

/// Per-pixel class map from `blob_count` seed points: each pixel takes the
/// class of its nearest seed.
fn blob_label_map(size: usize, blob_count: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let seeds: Vec<(f32, f32, u8)> = (0..blob_count)
        .map(|i| {
            (
                rng.gen_range(0.0..size as f32),
                rng.gen_range(0.0..size as f32),
                // round-robin over classes so each map touches several of them
                ((i % num_classes) as u8 + rng.gen_range(0..num_classes) as u8) % num_classes as u8,
            )
        })
        .collect();
    let mut map = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut best = f32::MAX;
            let mut cls = 0u8;
            for &(sy, sx, c) in &seeds {
                let d = (y as f32 - sy).powi(2) + (x as f32 - sx).powi(2);
                if d < best {
                    best = d;
                    cls = c;
                }
            }
            map[y * size + x] = cls;
        }
    }
    map
}

fn render_image(
    spec: &SyntheticTaskSpec,
    labels: &[u8],
    rng: &mut ChaCha8Rng,
) -> Result<MultispectralImage> {
    let size = spec.image_size;
    let c = spec.channels();
    let texture = value_noise_field(size, spec.texture_scale, spec.texture_amplitude, rng);
    let mut data = vec![0.0f32; c * size * size];
    for ch in 0..c {
        for p in 0..size * size {
            let mean = spec.class_spectra[labels[p] as usize][ch];
            let noise = if spec.noise_level > 0.0 {
                let u1: f32 = rng.gen_range(f32::MIN_POSITIVE..1.0);
                let u2: f32 = rng.gen_range(0.0f32..1.0);
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos() * spec.noise_level
            } else {
                0.0
            };
            data[ch * size * size + p] = (mean + texture[p] + noise).clamp(0.0, 1.0);
        }
    }
    MultispectralImage::new(c, size, size, data, spec.band_map())
}

fn generate_split(spec: &SyntheticTaskSpec, seed: u64, split_idx: u64, size: usize) -> Result<DatasetSplit> {
    let mut samples = Vec::with_capacity(size);
    for i in 0..size {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, "sample", &[split_idx, i as u64]));
        let (labels, label) = match spec.task {
            TaskKind::Classification => {
                // round-robin keeps split label distributions identical
                let class = (i % spec.num_classes) as u8;
                let labels = vec![class; spec.image_size * spec.image_size];
                (labels, Label::Class(class as usize))
            }
            TaskKind::Segmentation => {
                let map = blob_label_map(spec.image_size, spec.blob_count, spec.num_classes, &mut rng);
                let label = Label::Mask {
                    height: spec.image_size,
                    width: spec.image_size,
                    data: map.clone(),
                };
                (map, label)
            }
        };
        let image = render_image(spec, &labels, &mut rng)?;
        samples.push(Sample { image, label, id: (split_idx << 32) | i as u64 });
    }
    Ok(DatasetSplit { samples })
}

/// Deterministic train/val/test generation from a task spec and seed.
pub fn generate_dataset(spec: &SyntheticTaskSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    Ok(Dataset {
        train: generate_split(spec, seed, 0, spec.train_size)?,
        val: generate_split(spec, seed, 1, spec.val_size)?,
        test: generate_split(spec, seed, 2, spec.test_size)?,
        num_classes: spec.num_classes,
        task: spec.task,
    })
}

// ── Separation oracles ────────────────────────────────────────────────────

/// Diagonal-covariance Gaussian classifier fit on per-pixel values of the
/// given channels; the quadratic decision rule behind the dataset's
/// separation guarantee.
pub struct QuadraticPixelClassifier {
    channels: Vec<usize>,
    means: Vec<Vec<f64>>,
    vars: Vec<Vec<f64>>,
    classes: Vec<usize>,
}

impl QuadraticPixelClassifier {
    pub fn fit(split: &DatasetSplit, channels: &[usize], classes: &[usize]) -> Self {
        let mut sums = vec![vec![0.0f64; channels.len()]; classes.len()];
        let mut sqs = vec![vec![0.0f64; channels.len()]; classes.len()];
        let mut counts = vec![0usize; classes.len()];
        for sample in &split.samples {
            let hw = sample.image.height() * sample.image.width();
            for p in 0..hw {
                let cls = pixel_class(sample, p);
                let Some(ci) = classes.iter().position(|&k| k == cls as usize) else {
                    continue;
                };
                counts[ci] += 1;
                for (j, &ch) in channels.iter().enumerate() {
                    let v = sample.image.channel(ch)[p] as f64;
                    sums[ci][j] += v;
                    sqs[ci][j] += v * v;
                }
            }
        }
        let means: Vec<Vec<f64>> = sums
            .iter()
            .zip(&counts)
            .map(|(s, &n)| s.iter().map(|v| v / n.max(1) as f64).collect())
            .collect();
        let vars = sqs
            .iter()
            .zip(&means)
            .zip(&counts)
            .map(|((sq, m), &n)| {
                sq.iter()
                    .zip(m)
                    .map(|(q, mu)| (q / n.max(1) as f64 - mu * mu).max(1e-6))
                    .collect()
            })
            .collect();
        QuadraticPixelClassifier { channels: channels.to_vec(), means, vars, classes: classes.to_vec() }
    }

    fn predict_pixel(&self, sample: &Sample, p: usize) -> usize {
        let mut best = f64::MIN;
        let mut arg = self.classes[0];
        for (ci, &k) in self.classes.iter().enumerate() {
            let mut ll = 0.0;
            for (j, &ch) in self.channels.iter().enumerate() {
                let v = sample.image.channel(ch)[p] as f64;
                let d = v - self.means[ci][j];
                ll -= d * d / (2.0 * self.vars[ci][j]) + 0.5 * self.vars[ci][j].ln();
            }
            if ll > best {
                best = ll;
                arg = k;
            }
        }
        arg
    }

    /// Pixel accuracy over samples whose class is in the fitted set.
    pub fn pixel_accuracy(&self, split: &DatasetSplit) -> f64 {
        let mut correct = 0usize;
        let mut total = 0usize;
        for sample in &split.samples {
            let hw = sample.image.height() * sample.image.width();
            for p in 0..hw {
                let cls = pixel_class(sample, p) as usize;
                if !self.classes.contains(&cls) {
                    continue;
                }
                total += 1;
                if self.predict_pixel(sample, p) == cls {
                    correct += 1;
                }
            }
        }
        correct as f64 / total.max(1) as f64
    }
}

fn pixel_class(sample: &Sample, p: usize) -> u8 {
    match &sample.label {
        Label::Class(k) => *k as u8,
        Label::Mask { data, .. } => data[p],
    }
}

/// Brute-force nearest-centroid classifier on per-image mean spectra of the
/// given channels. Independent of the model stack; used to certify that the
/// non-RGB bands carry the class signal.
pub fn nearest_centroid_image_accuracy(
    train: &DatasetSplit,
    test: &DatasetSplit,
    channels: &[usize],
    num_classes: usize,
) -> f64 {
    let feature = |sample: &Sample| -> Vec<f64> {
        let hw = (sample.image.height() * sample.image.width()) as f64;
        channels
            .iter()
            .map(|&ch| sample.image.channel(ch).iter().map(|&v| v as f64).sum::<f64>() / hw)
            .collect()
    };
    let mut centroids = vec![vec![0.0f64; channels.len()]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for s in &train.samples {
        if let Label::Class(k) = s.label {
            let f = feature(s);
            for (c, v) in centroids[k].iter_mut().zip(&f) {
                *c += v;
            }
            counts[k] += 1;
        }
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        for v in c.iter_mut() {
            *v /= n.max(1) as f64;
        }
    }
    let mut correct = 0usize;
    for s in &test.samples {
        let Label::Class(k) = s.label else { continue };
        let f = feature(s);
        let pred = (0..num_classes)
            .min_by(|&a, &b| {
                let da: f64 = centroids[a].iter().zip(&f).map(|(c, v)| (c - v) * (c - v)).sum();
                let db: f64 = centroids[b].iter().zip(&f).map(|(c, v)| (c - v) * (c - v)).sum();
                da.partial_cmp(&db).expect("finite distances")
            })
            .expect("at least one class");
        if pred == k {
            correct += 1;
        }
    }
    correct as f64 / test.samples.len().max(1) as f64
}

/// Channel indices not named R, G or B.
pub fn non_rgb_channels(spec: &SyntheticTaskSpec) -> Vec<usize> {
    spec.bands
        .iter()
        .enumerate()
        .filter(|(_, b)| !matches!(b.as_str(), "R" | "G" | "B"))
        .map(|(i, _)| i)
        .collect()
}

pub fn rgb_channel_indices(spec: &SyntheticTaskSpec) -> Vec<usize> {
    ["R", "G", "B"]
        .iter()
        .map(|n| spec.bands.iter().position(|b| b == n).expect("validated"))
        .collect()
}

// ── Directory layout ──────────────────────────────────────────────────────
//
// out/
//   dataset.json            task + class count + spec echo
//   train/ img_00000.msi [msk_00000.msk] ...
//   val/ ...  test/ ...
//   manifest.txt            one line per sample: split/path <tab> label

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    task: TaskKind,
    num_classes: usize,
}

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = DatasetMeta { task: dataset.task, num_classes: dataset.num_classes };
    fs::write(
        dir.join("dataset.json"),
        serde_json::to_string_pretty(&meta).expect("serializable meta"),
    )?;
    let mut manifest = String::new();
    for (split_name, split) in [("train", &dataset.train), ("val", &dataset.val), ("test", &dataset.test)] {
        let sub = dir.join(split_name);
        fs::create_dir_all(&sub)?;
        for (i, sample) in split.samples.iter().enumerate() {
            let img_rel = format!("{split_name}/img_{i:05}.msi");
            write_msi(&dir.join(&img_rel), &sample.image)?;
            match &sample.label {
                Label::Class(k) => {
                    manifest.push_str(&format!("{img_rel}\t{k}\n"));
                }
                Label::Mask { height, width, data } => {
                    let msk_rel = format!("{split_name}/msk_{i:05}.msk");
                    write_mask(&dir.join(&msk_rel), *height, *width, data)?;
                    manifest.push_str(&format!("{img_rel}\t{msk_rel}\n"));
                }
            }
        }
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join("dataset.json"))?)
        .map_err(|e| Error::Config(format!("dataset.json: {e}")))?;
    let manifest = fs::read_to_string(dir.join("manifest.txt"))?;
    let mut splits: BTreeMap<&str, Vec<Sample>> = BTreeMap::new();
    for (line_no, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (img_rel, label_str) = line.split_once('\t').ok_or_else(|| Error::Config(format!(
            "manifest line {}: expected <path>\\t<label>",
            line_no + 1
        )))?;
        let split_name = img_rel.split('/').next().unwrap_or("");
        let image = read_msi(&dir.join(img_rel))?;
        let label = match meta.task {
            TaskKind::Classification => Label::Class(label_str.parse().map_err(|_| {
                Error::Config(format!("manifest line {}: bad class {label_str:?}", line_no + 1))
            })?),
            TaskKind::Segmentation => {
                let (height, width, data) = read_mask(&dir.join(label_str))?;
                Label::Mask { height, width, data }
            }
        };
        let entry = splits.entry(match split_name {
            "train" => "train",
            "val" => "val",
            "test" => "test",
            other => {
                return Err(Error::Config(format!("manifest line {}: unknown split {other:?}", line_no + 1)))
            }
        });
        let samples = entry.or_default();
        let split_idx = match split_name {
            "train" => 0u64,
            "val" => 1,
            _ => 2,
        };
        let id = (split_idx << 32) | samples.len() as u64;
        samples.push(Sample { image, label, id });
    }
    Ok(Dataset {
        train: DatasetSplit { samples: splits.remove("train").unwrap_or_default() },
        val: DatasetSplit { samples: splits.remove("val").unwrap_or_default() },
        test: DatasetSplit { samples: splits.remove("test").unwrap_or_default() },
        num_classes: meta.num_classes,
        task: meta.task,
    })
}
