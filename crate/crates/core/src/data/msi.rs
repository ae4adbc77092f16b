//! Binary container for multispectral images.
//!
//! Layout, all integers little-endian:
//!   magic "MSI1" | u32 C | u32 H | u32 W | band table | f32 data
//! The band table is a u16 entry count (always C) followed by one
//! length-prefixed UTF-8 name per channel (u16 length; empty = unnamed).
//! Data is raw 32-bit floats, channel-major. Round-trips are bitwise exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::derive_seed;

use super::MultispectralImage;

pub const MSI_MAGIC: &[u8; 4] = b"MSI1";

pub fn encode_msi(img: &MultispectralImage) -> Vec<u8> {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let mut out = Vec::with_capacity(16 + c * h * w * 4);
    out.extend_from_slice(MSI_MAGIC);
    out.extend_from_slice(&(c as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    // channel -> name (empty when unnamed)
    let mut names = vec![String::new(); c];
    for (name, &ch) in img.band_map() {
        names[ch] = name.clone();
    }
    out.extend_from_slice(&(c as u16).to_le_bytes());
    for name in &names {
        let bytes = name.as_bytes();
        out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(bytes);
    }
    for &v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!(
                    "truncated while reading {what}: expected {} bytes, {} remain",
                    n,
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_msi(bytes: &[u8]) -> Result<MultispectralImage> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MSI_MAGIC {
        return Err(Error::Format { offset: 0, message: format!("bad magic {magic:?}, expected \"MSI1\"") });
    }
    let c = cur.u32("channel count")? as usize;
    let h = cur.u32("height")? as usize;
    let w = cur.u32("width")? as usize;
    let n_names = cur.u16("band table size")? as usize;
    if n_names != c {
        return Err(Error::Format {
            offset: cur.pos as u64 - 2,
            message: format!("band table has {n_names} entries for {c} channels"),
        });
    }
    let mut band_map = BTreeMap::new();
    for ch in 0..c {
        let len = cur.u16("band name length")? as usize;
        let raw = cur.take(len, "band name")?;
        let name = std::str::from_utf8(raw)
            .map_err(|_| Error::Format { offset: cur.pos as u64, message: "band name is not UTF-8".into() })?;
        if !name.is_empty() {
            band_map.insert(name.to_string(), ch);
        }
    }
    let payload = c * h * w * 4;
    let remaining = bytes.len() - cur.pos;
    if remaining != payload {
        return Err(Error::Format {
            offset: cur.pos as u64,
            message: format!("payload of {remaining} bytes, expected {payload} ({c}x{h}x{w} f32)"),
        });
    }
    let raw = cur.take(payload, "pixel data")?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    MultispectralImage::new(c, h, w, data, band_map)
}

pub fn write_msi(path: &Path, img: &MultispectralImage) -> Result<()> {
    let bytes = encode_msi(img);
    let tmp = path.with_extension("msi.tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_msi(path: &Path) -> Result<MultispectralImage> {
    let bytes = fs::read(path)?;
    decode_msi(&bytes)
}

// ── Segmentation masks ────────────────────────────────────────────────────
//
// Masks hold class ids, not reflectances, so they get their own minimal
// container: magic "MSK1" | u32 H | u32 W | raw u8 class data.

pub const MSK_MAGIC: &[u8; 4] = b"MSK1";

pub fn encode_mask(height: usize, width: usize, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + data.len());
    out.extend_from_slice(MSK_MAGIC);
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(data);
    out
}

pub fn decode_mask(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MSK_MAGIC {
        return Err(Error::Format { offset: 0, message: format!("bad magic {magic:?}, expected \"MSK1\"") });
    }
    let h = cur.u32("height")? as usize;
    let w = cur.u32("width")? as usize;
    let data = cur.take(h * w, "mask data")?.to_vec();
    if cur.pos != bytes.len() {
        return Err(Error::Format {
            offset: cur.pos as u64,
            message: format!("trailing {} bytes after mask payload", bytes.len() - cur.pos),
        });
    }
    Ok((h, w, data))
}

pub fn write_mask(path: &Path, height: usize, width: usize, data: &[u8]) -> Result<()> {
    let tmp = path.with_extension("msk.tmp");
    fs::write(&tmp, encode_mask(height, width, data))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    decode_mask(&bytes)
}

/// Deterministic random image, used by round-trip tests and benchmarks.
pub fn random_image(channels: usize, height: usize, width: usize, seed: u64) -> MultispectralImage {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, "random-image", &[]));
    let data = (0..channels * height * width).map(|_| rng.gen_range(0.0f32..=1.0)).collect();
    let mut band_map = BTreeMap::new();
    for (i, name) in ["R", "G", "B", "NIR", "SW1", "SW2"].iter().enumerate().take(channels) {
        band_map.insert(name.to_string(), i);
    }
    MultispectralImage::new(channels, height, width, data, band_map).expect("valid by construction")
}
