//! Dataset directory: `manifest.toml` plus one `pair_NNNNN.bin` per sample.
//!
//! A pair file holds, as little-endian `f32` in row-major order, the target
//! image, the prior image and the full-angle sinogram (`[detector][angle]`),
//! back to back.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{NormParams, PairedSample};
use crate::error::{Error, Result};
use crate::tomo::io::{decode_f32, encode_f32};
use crate::tomo::{AngleRange, Geometry, Image, Sinogram};

pub const MANIFEST_FILE: &str = "manifest.toml";
const FORMAT: &str = "pwd-lact-dataset/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub file: String,
    pub angle_range: AngleRange,
    pub norm: NormParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub count: usize,
    /// Distinct angle ranges, in first-seen order.
    pub angle_ranges: Vec<AngleRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<Geometry>,
    #[serde(default)]
    pub samples: Vec<SampleEntry>,
}

pub fn persist_dataset(samples: &[PairedSample], dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let geometry = samples.first().map(|s| s.sinogram.geometry().clone());
    let mut angle_ranges: Vec<AngleRange> = Vec::new();
    let mut entries = Vec::with_capacity(samples.len());
    for (k, s) in samples.iter().enumerate() {
        if Some(s.sinogram.geometry()) != geometry.as_ref() {
            return Err(Error::invalid(format!("sample {k} has a different geometry from sample 0")));
        }
        if !angle_ranges.contains(&s.angle_range) {
            angle_ranges.push(s.angle_range);
        }
        let file = format!("pair_{k:05}.bin");
        let mut bytes = Vec::new();
        encode_f32(s.target.data().iter().copied(), &mut bytes);
        encode_f32(s.prior.data().iter().copied(), &mut bytes);
        encode_f32(s.sinogram.data().iter().copied(), &mut bytes);
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(SampleEntry {
            file,
            angle_range: s.angle_range,
            norm: s.norm,
        });
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        count: samples.len(),
        angle_ranges,
        geometry,
        samples: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = toml::to_string(&manifest).map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(Error::format(&path, format!("unsupported format {:?}", manifest.format)));
    }
    if manifest.count != manifest.samples.len() {
        return Err(Error::format(
            &path,
            format!("count {} but {} sample entries", manifest.count, manifest.samples.len()),
        ));
    }
    if manifest.count > 0 && manifest.geometry.is_none() {
        return Err(Error::format(&path, "non-empty dataset without geometry"));
    }
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<PairedSample>> {
    let manifest = load_manifest(dir)?;
    let Some(geometry) = manifest.geometry else {
        return Ok(Vec::new());
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let geometry = geometry
        .validated()
        .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    let n = geometry.image_size();
    let (nd, na) = (geometry.n_detectors(), geometry.n_angles());
    let expected = 4 * (2 * n * n + nd * na);
    manifest
        .samples
        .iter()
        .map(|entry| {
            let path = dir.join(&entry.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() != expected {
                return Err(Error::format(
                    &path,
                    format!(
                        "payload has {} bytes, manifest geometry ({n}x{n} images, {nd}x{na} sinogram) needs {expected}",
                        bytes.len()
                    ),
                ));
            }
            let values = decode_f32(&bytes);
            let bad = |e: Error| Error::format(&path, e.to_string());
            let grid = |range: std::ops::Range<usize>, shape| {
                Array2::from_shape_vec(shape, values[range].to_vec()).expect("length checked")
            };
            let target = Image::new(grid(0..n * n, (n, n)), (-1.0, 1.0)).map_err(bad)?;
            let prior = Image::new(grid(n * n..2 * n * n, (n, n)), (-1.0, 1.0)).map_err(bad)?;
            let sinogram = Sinogram::new(grid(2 * n * n..values.len(), (nd, na)), geometry.clone()).map_err(bad)?;
            Ok(PairedSample {
                target,
                prior,
                angle_range: entry.angle_range,
                norm: entry.norm,
                sinogram,
            })
        })
        .collect()
}
