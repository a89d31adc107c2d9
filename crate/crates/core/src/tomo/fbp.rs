use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{fov_mask, Image, Sinogram};
use crate::error::{Error, Result};

/// Reconstruction filter applied to each projection before back-projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Filter {
    /// Band-limited ramp (Ram-Lak).
    #[default]
    RamLak,
    /// Ram-Lak apodized with a Hann window.
    Hann,
}

impl FromStr for Filter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ram-lak" => Ok(Filter::RamLak),
            "hann" => Ok(Filter::Hann),
            other => Err(Error::invalid(format!(
                "unknown filter {other:?} (expected \"ram-lak\" or \"hann\")"
            ))),
        }
    }
}

impl std::fmt::Display for Filter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Filter::RamLak => "ram-lak",
            Filter::Hann => "hann",
        })
    }
}

/// Frequency response of the discrete ramp filter on a zero-padded grid.
///
/// Built from the spatial Ram-Lak kernel so the DC term is correct.
fn frequency_response(len: usize, spacing: f64, filter: Filter) -> Vec<f64> {
    let mut kernel = vec![Complex64::new(0.0, 0.0); len];
    let pi2 = std::f64::consts::PI * std::f64::consts::PI;
    kernel[0].re = 1.0 / (4.0 * spacing * spacing);
    for k in 1..=len / 2 {
        if k % 2 == 1 {
            let v = -1.0 / (pi2 * (k * k) as f64 * spacing * spacing);
            kernel[k].re = v;
            kernel[len - k].re = v;
        }
    }
    FftPlanner::new().plan_fft_forward(len).process(&mut kernel);
    kernel
        .iter()
        .enumerate()
        .map(|(k, h)| {
            let f = k.min(len - k) as f64 / len as f64;
            let window = match filter {
                Filter::RamLak => 1.0,
                Filter::Hann => 0.5 * (1.0 + (2.0 * std::f64::consts::PI * f).cos()),
            };
            h.re * spacing * window
        })
        .collect()
}

/// Filtered back-projection for a geometry sampled over the full circle.
///
/// Angular weight is `π / n_angles`; masked-out columns simply contribute
/// nothing, so the operator is linear in the sinogram. Pixels outside the
/// inscribed circular field of view are set to zero.
pub fn fbp(sinogram: &Sinogram, filter: Filter) -> Result<Image> {
    let geometry = sinogram.geometry();
    let n = geometry.image_size();
    let n_det = geometry.n_detectors();
    let n_ang = geometry.n_angles();
    let padded = (2 * n_det).next_power_of_two();
    let response = frequency_response(padded, geometry.detector_spacing(), filter);

    let mut planner = FftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(padded);
    let inverse = planner.plan_fft_inverse(padded);
    let filtered: Vec<Vec<f64>> = (0..n_ang)
        .map(|k| {
            let mut buf = vec![Complex64::new(0.0, 0.0); padded];
            for (j, b) in buf.iter_mut().take(n_det).enumerate() {
                b.re = sinogram.data()[[j, k]] as f64;
            }
            forward.process(&mut buf);
            for (b, h) in buf.iter_mut().zip(&response) {
                *b *= *h;
            }
            inverse.process(&mut buf);
            buf.iter().take(n_det).map(|c| c.re / padded as f64).collect()
        })
        .collect();

    let trig: Vec<(f64, f64)> = geometry
        .angles()
        .iter()
        .map(|a| {
            let t = a.to_radians();
            (t.cos(), t.sin())
        })
        .collect();
    let centre = (n as f64 - 1.0) / 2.0;
    let det_centre = (n_det as f64 - 1.0) / 2.0;
    let inv_spacing = 1.0 / geometry.detector_spacing();
    let weight = std::f64::consts::PI / n_ang as f64;
    let fov = fov_mask(n);

    let rows: Vec<Vec<f32>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let y = centre - i as f64;
            (0..n)
                .map(|j| {
                    if !fov[[i, j]] {
                        return 0.0;
                    }
                    let x = j as f64 - centre;
                    let mut acc = 0.0;
                    for (q, &(cos, sin)) in filtered.iter().zip(&trig) {
                        let pos = (x * cos + y * sin) * inv_spacing + det_centre;
                        let p0 = pos.floor();
                        let f = pos - p0;
                        let p0 = p0 as isize;
                        if p0 >= 0 && (p0 as usize) < n_det {
                            acc += (1.0 - f) * q[p0 as usize];
                        }
                        if p0 + 1 >= 0 && ((p0 + 1) as usize) < n_det {
                            acc += f * q[(p0 + 1) as usize];
                        }
                    }
                    let v = (acc * weight) as f32;
                    if v.is_finite() { v } else { 0.0 }
                })
                .collect()
        })
        .collect();

    let data = Array2::from_shape_fn((n, n), |(i, j)| rows[i][j]);
    Ok(Image::from_raw(data, (0.0, 1.0)))
}
