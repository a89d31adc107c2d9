use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};

use super::{apply_mask, backproject, radon, AngularMask, Geometry, Image, Sinogram};
use crate::error::{Error, Result};

/// Settings for the TV-regularized least-squares baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TvOptions {
    pub lambda: f64,
    pub n_iters: usize,
    pub step: f64,
    /// `ε` in the smoothed isotropic TV `Σ sqrt(|∇x|² + ε²)`.
    pub smoothing: f64,
    /// Project iterates onto `x >= 0`.
    pub nonnegative: bool,
}

impl TvOptions {
    pub fn new(lambda: f64, n_iters: usize, step: f64) -> Self {
        Self {
            lambda,
            n_iters,
            step,
            smoothing: 1e-2,
            nonnegative: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TvOutput {
    pub image: Image,
    /// Objective at the initial point and after every iteration.
    pub objective: Vec<f64>,
}

/// Projected gradient descent on `½‖M⊙(Ax) − M⊙y‖² + λ·TV(x)` from `x = 0`.
///
/// Runs exactly `n_iters` iterations.
pub fn tv_recon(
    sinogram: &Sinogram,
    mask: &AngularMask,
    lambda: f64,
    n_iters: usize,
    step: f64,
) -> Result<Image> {
    let n = sinogram.geometry().image_size();
    let init = Image::zeros(n, (0.0, 1.0));
    tv_recon_from(&init, sinogram, mask, &TvOptions::new(lambda, n_iters, step)).map(|o| o.image)
}

/// As [`tv_recon`] but from an arbitrary starting image, returning the
/// objective trace.
pub fn tv_recon_from(
    init: &Image,
    sinogram: &Sinogram,
    mask: &AngularMask,
    opts: &TvOptions,
) -> Result<TvOutput> {
    let geometry = sinogram.geometry();
    init.check_size(geometry.image_size())?;
    if opts.n_iters == 0 {
        return Err(Error::invalid("tv_recon needs n_iters >= 1"));
    }
    if !(opts.step > 0.0 && opts.step.is_finite()) {
        return Err(Error::invalid(format!("tv_recon step must be positive, got {}", opts.step)));
    }
    if !(opts.lambda >= 0.0 && opts.lambda.is_finite()) {
        return Err(Error::invalid(format!("tv_recon lambda must be >= 0, got {}", opts.lambda)));
    }
    if !(opts.smoothing > 0.0) {
        return Err(Error::invalid("tv_recon smoothing must be positive"));
    }
    let y = apply_mask(sinogram, mask)?;
    let mut x = init.data().mapv(f64::from);
    let mut objective = Vec::with_capacity(opts.n_iters + 1);

    for iteration in 0..=opts.n_iters {
        let current = Image::from_raw(x.mapv(|v| v as f32), (0.0, 1.0));
        let ax = apply_mask(&radon(&current, geometry)?, mask)?;
        let residual = Sinogram::new(ax.data() - y.data(), geometry.clone())?;
        let fidelity: f64 = residual.data().iter().map(|&r| 0.5 * (r as f64).powi(2)).sum();
        let (tv, tv_grad) = smoothed_tv(&x, opts.smoothing);
        let value = fidelity + opts.lambda * tv;
        if !value.is_finite() || value > 1e30 {
            return Err(Error::Diverged {
                step: opts.step,
                iteration,
            });
        }
        objective.push(value);
        if iteration == opts.n_iters {
            break;
        }
        let data_grad = backproject(&residual);
        Zip::from(&mut x)
            .and(data_grad.data())
            .and(&tv_grad)
            .for_each(|x, &g, &t| {
                *x -= opts.step * (g as f64 + opts.lambda * t);
                if opts.nonnegative && *x < 0.0 {
                    *x = 0.0;
                }
            });
    }

    Ok(TvOutput {
        image: Image::from_raw(x.mapv(|v| v as f32), (0.0, 1.0)),
        objective,
    })
}

/// Smoothed isotropic TV with forward differences (Neumann boundary) and its
/// gradient.
fn smoothed_tv(x: &Array2<f64>, eps: f64) -> (f64, Array2<f64>) {
    let (h, w) = x.dim();
    let mut grad = Array2::zeros((h, w));
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            let dx = if i + 1 < h { x[[i + 1, j]] - x[[i, j]] } else { 0.0 };
            let dy = if j + 1 < w { x[[i, j + 1]] - x[[i, j]] } else { 0.0 };
            let norm = (dx * dx + dy * dy + eps * eps).sqrt();
            total += norm;
            let (gx, gy) = (dx / norm, dy / norm);
            grad[[i, j]] -= gx + gy;
            if i + 1 < h {
                grad[[i + 1, j]] += gx;
            }
            if j + 1 < w {
                grad[[i, j + 1]] += gy;
            }
        }
    }
    (total, grad)
}

/// Power-iteration estimate of the largest eigenvalue of `AᵀMA`.
///
/// A gradient step of `1 / (L + 8λ/ε)` keeps [`tv_recon`] monotone.
pub fn estimate_lipschitz(geometry: &Geometry, mask: &AngularMask, iters: usize) -> Result<f64> {
    let n = geometry.image_size();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v = Array2::from_shape_fn((n, n), |_| rng.random::<f64>());
    let mut lambda = 0.0;
    for _ in 0..iters.max(1) {
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.mapv_inplace(|a| a / norm);
        let img = Image::from_raw(v.mapv(|a| a as f32), (0.0, 1.0));
        let av = apply_mask(&radon(&img, geometry)?, mask)?;
        let atav = backproject(&av).into_data().mapv(f64::from);
        lambda = atav.iter().zip(v.iter()).map(|(a, b)| a * b).sum::<f64>();
        v = atav;
    }
    Ok(lambda)
}
