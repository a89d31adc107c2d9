//! Per-image metric reports.
//!
//! On disk a report is a CSV table with header `index,psnr_db,ssim,seconds`
//! plus a TOML sidecar (`<path>.toml`) holding the label, data range and the
//! configuration snapshot. `psnr_db` is the literal `identical` when the
//! reconstruction equals its reference inside the field of view; `seconds` is
//! empty when timing was not measured.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tomo::io::sidecar_path;

pub const IDENTICAL: &str = "identical";
const FORMAT: &str = "pwd-lact-report/1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub mean_psnr: f64,
    pub std_psnr: f64,
    pub mean_ssim: f64,
    pub std_ssim: f64,
    /// `None` unless every image was timed.
    pub mean_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconReport {
    pub label: String,
    pub data_range: f64,
    pub config: toml::Table,
    pub images: Vec<ImageMetrics>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    if mean.is_infinite() {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

impl ReconReport {
    pub fn summary(&self) -> Summary {
        let (mean_psnr, std_psnr) = mean_std(self.images.iter().map(|m| m.psnr));
        let (mean_ssim, std_ssim) = mean_std(self.images.iter().map(|m| m.ssim));
        let times: Option<Vec<f64>> = self.images.iter().map(|m| m.seconds).collect();
        let mean_seconds = times
            .filter(|t| !t.is_empty())
            .map(|t| t.iter().sum::<f64>() / t.len() as f64);
        Summary {
            count: self.images.len(),
            mean_psnr,
            std_psnr,
            mean_ssim,
            std_ssim,
            mean_seconds,
        }
    }

    /// Writes the CSV table to `path` and the sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["index", "psnr_db", "ssim", "seconds"])
            .map_err(|e| csv_error(path, e))?;
        for (i, m) in self.images.iter().enumerate() {
            let psnr = if m.psnr == f64::INFINITY {
                IDENTICAL.to_string()
            } else {
                m.psnr.to_string()
            };
            let secs = m.seconds.map(|s| s.to_string()).unwrap_or_default();
            w.write_record([i.to_string(), psnr, m.ssim.to_string(), secs])
                .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;

        let s = self.summary();
        let meta = Meta {
            format: FORMAT.into(),
            label: self.label.clone(),
            data_range: self.data_range,
            region: "fov".into(),
            summary: Some(SummaryMeta {
                count: s.count,
                mean_psnr: finite_or_none(s.mean_psnr),
                std_psnr: finite_or_none(s.std_psnr),
                mean_ssim: finite_or_none(s.mean_ssim),
                std_ssim: finite_or_none(s.std_ssim),
                mean_seconds: s.mean_seconds,
            }),
            config: self.config.clone(),
        };
        let side = sidecar_path(path);
        let text = toml::to_string(&meta).map_err(|e| Error::format(&side, e.to_string()))?;
        fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: Meta = toml::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
        if meta.format != FORMAT {
            return Err(Error::format(&side, format!("unsupported format {:?}", meta.format)));
        }
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
        if header.iter().collect::<Vec<_>>() != ["index", "psnr_db", "ssim", "seconds"] {
            return Err(Error::format(path, format!("unexpected header {header:?}")));
        }
        let mut images = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            let bad = |what: &str| Error::format(path, format!("row {}: bad {what}", row + 1));
            let psnr = match &rec[1] {
                IDENTICAL => f64::INFINITY,
                v => v.parse().map_err(|_| bad("psnr_db"))?,
            };
            let ssim = rec[2].parse().map_err(|_| bad("ssim"))?;
            let seconds = match &rec[3] {
                "" => None,
                v => Some(v.parse().map_err(|_| bad("seconds"))?),
            };
            images.push(ImageMetrics { psnr, ssim, seconds });
        }
        Ok(Self {
            label: meta.label,
            data_range: meta.data_range,
            config: meta.config,
            images,
        })
    }
}

fn finite_or_none(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SummaryMeta {
    count: usize,
    mean_psnr: Option<f64>,
    std_psnr: Option<f64>,
    mean_ssim: Option<f64>,
    std_ssim: Option<f64>,
    mean_seconds: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    format: String,
    label: String,
    data_range: f64,
    region: String,
    // Informational only; recomputed on load.
    summary: Option<SummaryMeta>,
    config: toml::Table,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert_eq, proptest};

    fn report(images: Vec<ImageMetrics>) -> ReconReport {
        let mut config = toml::Table::new();
        config.insert("guidance_weight".into(), toml::Value::Float(0.05));
        ReconReport {
            label: "pwd".into(),
            data_range: 2.0,
            config,
            images,
        }
    }

    #[test]
    fn summary_of_single_image_is_that_image() {
        let r = report(vec![ImageMetrics {
            psnr: 20.0,
            ssim: 0.5,
            seconds: Some(1.5),
        }]);
        let s = r.summary();
        assert_eq!((s.mean_psnr, s.std_psnr, s.mean_ssim, s.mean_seconds), (20.0, 0.0, 0.5, Some(1.5)));
    }

    #[test]
    fn missing_time_drops_mean_seconds() {
        let m = ImageMetrics {
            psnr: 1.0,
            ssim: 0.0,
            seconds: None,
        };
        assert_eq!(report(vec![m, m]).summary().mean_seconds, None);
    }

    #[test]
    fn sentinel_survives_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let r = report(vec![ImageMetrics {
            psnr: f64::INFINITY,
            ssim: 1.0,
            seconds: None,
        }]);
        r.save(&path).unwrap();
        assert!(fs::read_to_string(&path).unwrap().contains(IDENTICAL));
        assert_eq!(ReconReport::load(&path).unwrap(), r);
    }

    #[test]
    fn load_names_broken_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        report(vec![]).save(&path).unwrap();
        fs::write(&path, "index,psnr_db,ssim,seconds\n0,abc,1,\n").unwrap();
        let err = ReconReport::load(&path).unwrap_err().to_string();
        assert!(err.contains("r.csv") && err.contains("psnr_db"), "{err}");
    }

    proptest! {
        #[test]
        fn round_trip_is_lossless(
            rows in proptest::collection::vec((-50.0f64..80.0, -1.0f64..=1.0, proptest::option::of(0.0f64..100.0)), 0..6)
        ) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("r.csv");
            let r = report(rows.into_iter().map(|(psnr, ssim, seconds)| ImageMetrics { psnr, ssim, seconds }).collect());
            r.save(&path).unwrap();
            prop_assert_eq!(ReconReport::load(&path).unwrap(), r);
        }
    }
}
