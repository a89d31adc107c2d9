//! Flat binary persistence for images and sinograms.
//!
//! Each array is written as little-endian `f32` values in row-major order
//! (`[row][col]` for images, `[detector][angle]` for sinograms) to `<path>`,
//! with a TOML sidecar at `<path>.toml` recording kind, shape, value range,
//! geometry and optional angular mask.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{AngularMask, Geometry, Image, Sinogram};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    kind: String,
    layout: String,
    shape: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value_range: Option<[f32; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    geometry: Option<Geometry>,
}

const LAYOUT: &str = "f32-le row-major";

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".toml");
    PathBuf::from(s)
}

pub(crate) fn encode_f32(values: impl IntoIterator<Item = f32>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn write_pair(path: &Path, data: &Array2<f32>, sidecar: &Sidecar) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut bytes = Vec::with_capacity(data.len() * 4);
    encode_f32(data.iter().copied(), &mut bytes);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let meta = toml::to_string(sidecar).map_err(|e| Error::format(path, e.to_string()))?;
    let side = sidecar_path(path);
    fs::write(&side, meta).map_err(|e| Error::io(side, e))
}

fn read_pair(path: &Path, kind: &str) -> Result<(Array2<f32>, Sidecar)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: Sidecar = toml::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
    if meta.kind != kind {
        return Err(Error::format(&side, format!("expected kind {kind:?}, found {:?}", meta.kind)));
    }
    if meta.layout != LAYOUT {
        return Err(Error::format(&side, format!("unsupported layout {:?}", meta.layout)));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let [rows, cols] = meta.shape;
    if bytes.len() != rows * cols * 4 {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, shape {rows}x{cols} needs {}", bytes.len(), rows * cols * 4),
        ));
    }
    let data = Array2::from_shape_vec((rows, cols), decode_f32(&bytes))
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok((data, meta))
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let (lo, hi) = image.value_range();
    let sidecar = Sidecar {
        kind: "image".into(),
        layout: LAYOUT.into(),
        shape: [image.size(), image.size()],
        value_range: Some([lo, hi]),
        mask: None,
        geometry: None,
    };
    write_pair(path, image.data(), &sidecar)
}

pub fn read_image(path: &Path) -> Result<Image> {
    let (data, meta) = read_pair(path, "image")?;
    let [lo, hi] = meta.value_range.unwrap_or([0.0, 1.0]);
    Image::new(data, (lo, hi)).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_sinogram(path: &Path, sinogram: &Sinogram, mask: Option<&AngularMask>) -> Result<()> {
    let sidecar = Sidecar {
        kind: "sinogram".into(),
        layout: LAYOUT.into(),
        shape: [sinogram.geometry().n_detectors(), sinogram.geometry().n_angles()],
        value_range: None,
        mask: mask.map(|m| m.flags().iter().map(|&f| f as u8).collect()),
        geometry: Some(sinogram.geometry().clone()),
    };
    write_pair(path, sinogram.data(), &sidecar)
}

pub fn read_sinogram(path: &Path) -> Result<(Sinogram, Option<AngularMask>)> {
    let (data, meta) = read_pair(path, "sinogram")?;
    let side = sidecar_path(path);
    let geometry = meta
        .geometry
        .ok_or_else(|| Error::format(&side, "sinogram sidecar lacks [geometry]"))?;
    // Deserialization bypasses the constructor.
    let geometry = geometry
        .validated()
        .map_err(|e| Error::format(&side, e.to_string()))?;
    let mask = meta
        .mask
        .map(|m| AngularMask::from_flags(m.into_iter().map(|f| f != 0).collect()))
        .transpose()
        .map_err(|e| Error::format(&side, e.to_string()))?;
    let sino = Sinogram::new(data, geometry).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((sino, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tomo::{make_mask, AngleRange};

    #[test]
    fn image_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.f32");
        let img = Image::new(Array2::from_shape_fn((8, 8), |(i, j)| i as f32 * 0.1 - j as f32), (-1.0, 1.0)).unwrap();
        write_image(&p, &img).unwrap();
        assert_eq!(read_image(&p).unwrap(), img);
        // Byte layout: row-major little endian.
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[4..8], &(-1.0f32).to_le_bytes());
    }

    #[test]
    fn sinogram_round_trip_with_mask() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sino.f32");
        let g = Geometry::uniform(8, 10).unwrap();
        let s = Sinogram::new(Array2::from_shape_fn((g.n_detectors(), 10), |(i, j)| (i * 10 + j) as f32), g.clone()).unwrap();
        let m = make_mask(&g, AngleRange::new(0.0, 90.0).unwrap()).unwrap();
        write_sinogram(&p, &s, Some(&m)).unwrap();
        let (s2, m2) = read_sinogram(&p).unwrap();
        assert_eq!(s2, s);
        assert_eq!(m2.unwrap(), m);
        // detector-major: second value is detector 0, angle 1
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[4..8], &1.0f32.to_le_bytes());
    }

    #[test]
    fn truncated_payload_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.f32");
        write_image(&p, &Image::zeros(4, (0.0, 1.0))).unwrap();
        fs::write(&p, [0u8; 12]).unwrap();
        let err = read_image(&p).unwrap_err().to_string();
        assert!(err.contains("img.f32"), "{err}");
    }
}
