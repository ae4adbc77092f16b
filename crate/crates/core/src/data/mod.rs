//! Multispectral image container, datasets, binary formats and the
//! synthetic task generator.

pub mod checkpoint;
pub mod msi;
pub mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ignore value for unlabeled segmentation pixels.
pub const IGNORE_INDEX: u8 = 255;

/// A C×H×W reflectance cube with a named band map.
///
/// Data is stored channel-major (all of channel 0, then channel 1, ...),
/// each channel row-major. Reflectances are expected in [0, 1]; the
/// container enforces finiteness, generators enforce the range.
#[derive(Debug, Clone, PartialEq)]
pub struct MultispectralImage {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    band_map: BTreeMap<String, usize>,
}

impl MultispectralImage {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
        band_map: BTreeMap<String, usize>,
    ) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Config(format!(
                "image buffer holds {} values, {}x{}x{} needs {}",
                data.len(),
                channels,
                height,
                width,
                channels * height * width
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("image contains non-finite reflectances".into()));
        }
        let mut seen = vec![false; channels];
        for (name, &ch) in &band_map {
            if ch >= channels {
                return Err(Error::Config(format!(
                    "band {name:?} maps to channel {ch} of a {channels}-channel image"
                )));
            }
            if seen[ch] {
                return Err(Error::Config(format!(
                    "band map is not injective: channel {ch} has several names"
                )));
            }
            seen[ch] = true;
        }
        Ok(MultispectralImage { channels, height, width, data, band_map })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn band_map(&self) -> &BTreeMap<String, usize> {
        &self.band_map
    }

    pub fn at(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data[channel * self.height * self.width + y * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    /// Channel index of a named band.
    pub fn band_channel(&self, name: &str) -> Result<usize> {
        self.band_map
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingBand(name.to_string()))
    }

    /// Number of patches per side for a given patch size.
    pub fn grid_side(&self, patch_size: usize) -> usize {
        self.height / patch_size
    }

    /// All pixels of patch `idx` (row-major over the patch grid) as
    /// C-vectors, scanning the patch row-major.
    pub fn patch_pixels(&self, idx: usize, patch_size: usize) -> Vec<Vec<f32>> {
        let per_side = self.width / patch_size;
        let py = (idx / per_side) * patch_size;
        let px = (idx % per_side) * patch_size;
        let mut out = Vec::with_capacity(patch_size * patch_size);
        for dy in 0..patch_size {
            for dx in 0..patch_size {
                let pixel = (0..self.channels).map(|c| self.at(c, py + dy, px + dx)).collect();
                out.push(pixel);
            }
        }
        out
    }
}

/// Ground truth for one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    Class(usize),
    /// Per-pixel class map, row-major; [`IGNORE_INDEX`] marks unlabeled pixels.
    Mask { height: usize, width: usize, data: Vec<u8> },
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: MultispectralImage,
    pub label: Label,
    /// Stable identifier; seeds the per-image pixel sampling.
    pub id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Segmentation,
}

#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub samples: Vec<Sample>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub test: DatasetSplit,
    pub num_classes: usize,
    pub task: TaskKind,
}
