//! Image-quality metrics, reports and the ablation sweeps.
//!
//! Metrics are computed on normalised images (`[-1, 1]`, so the data range is
//! 2) and only inside the inscribed circular field of view.

mod ablate;
mod methods;
mod metrics;
mod report;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tomo::{fov_mask, Image};

pub use ablate::{ablate, AblationContext, AblationKind, AblationRow, AblationTable, ModelEntry};
pub use methods::{image_seed, reconstruct, Method, Reconstructions, TvSettings};
pub use metrics::{psnr, psnr_in, ssim, ssim_in, ssim_map, SSIM_SIGMA, SSIM_WINDOW};
pub use report::{ImageMetrics, ReconReport, Summary, IDENTICAL};

pub const DATA_RANGE: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: ReconReport,
    /// `|recon − ref|`, zero outside the field of view.
    pub residuals: Vec<Image>,
}

/// Scores each reconstruction against its reference inside the field of view.
pub fn evaluate(recons: &[Image], refs: &[Image], label: &str) -> Result<Evaluation> {
    if recons.len() != refs.len() {
        return Err(Error::invalid(format!(
            "{} reconstructions but {} references",
            recons.len(),
            refs.len()
        )));
    }
    let scored: Vec<(ImageMetrics, Image)> = recons
        .par_iter()
        .zip(refs)
        .map(|(r, t)| {
            let fov = fov_mask(t.size());
            let psnr = psnr_in(r, t, DATA_RANGE, Some(&fov))?;
            let ssim = ssim_in(r, t, DATA_RANGE, Some(&fov))?;
            let mut res = (r.data() - t.data()).mapv(f32::abs);
            res.zip_mut_with(&fov, |v, &inside| {
                if !inside {
                    *v = 0.0
                }
            });
            let metrics = ImageMetrics {
                psnr,
                ssim,
                seconds: None,
            };
            Ok((metrics, Image::new(res, (0.0, DATA_RANGE as f32))?))
        })
        .collect::<Result<_>>()?;
    let (images, residuals) = scored.into_iter().unzip();
    Ok(Evaluation {
        report: ReconReport {
            label: label.to_string(),
            data_range: DATA_RANGE,
            config: toml::Table::new(),
            images,
        },
        residuals,
    })
}

impl Evaluation {
    /// Attaches per-image wall-clock times.
    pub fn with_seconds(mut self, seconds: Option<&[f64]>) -> Result<Self> {
        if let Some(secs) = seconds {
            if secs.len() != self.report.images.len() {
                return Err(Error::invalid(format!(
                    "{} timings for {} images",
                    secs.len(),
                    self.report.images.len()
                )));
            }
            for (m, &s) in self.report.images.iter_mut().zip(secs) {
                m.seconds = Some(s);
            }
        }
        Ok(self)
    }
}
