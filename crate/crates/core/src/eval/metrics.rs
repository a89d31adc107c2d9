use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tomo::Image;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    if a.size() != b.size() {
        return Err(Error::shape(
            format!("{0}x{0}", a.size()),
            format!("{0}x{0}", b.size()),
        ));
    }
    Ok(())
}

fn check_range(data_range: f64) -> Result<()> {
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(Error::invalid(format!("data_range must be positive, got {data_range}")));
    }
    Ok(())
}

/// PSNR in dB over the pixels where `region` is true (all pixels if `None`).
/// Identical images give `f64::INFINITY`.
pub fn psnr_in(a: &Image, b: &Image, data_range: f64, region: Option<&Array2<bool>>) -> Result<f64> {
    check_pair(a, b)?;
    check_range(data_range)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (idx, (&x, &y)) in a.data().indexed_iter().zip(b.data()).map(|((i, x), y)| (i, (x, y))) {
        if region.is_none_or(|r| r[idx]) {
            sum += ((x - y) as f64).powi(2);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("PSNR region is empty"));
    }
    if sum == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / (sum / count as f64)).log10())
}

pub fn psnr(a: &Image, b: &Image, data_range: f64) -> Result<f64> {
    psnr_in(a, b, data_range, None)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (k, v) in w.iter_mut().enumerate() {
        let d = k as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    w.map(|v| v / total)
}

/// Separable Gaussian filtering over fully contained windows only.
fn filter_valid(x: &Array2<f64>, g: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = x.dim();
    let (ho, wo) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let rows: Array2<f64> = Array2::from_shape_fn((h, wo), |(i, j)| (0..SSIM_WINDOW).map(|k| g[k] * x[[i, j + k]]).sum::<f64>());
    Array2::from_shape_fn((ho, wo), |(i, j)| (0..SSIM_WINDOW).map(|k| g[k] * rows[[i + k, j]]).sum())
}

/// Local SSIM for every valid 7×7 window; entry `(i, j)` is centred on pixel
/// `(i + 3, j + 3)`.
pub fn ssim_map(a: &Image, b: &Image, data_range: f64) -> Result<Array2<f64>> {
    check_pair(a, b)?;
    check_range(data_range)?;
    if a.size() < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {0}x{0}",
            a.size()
        )));
    }
    let g = gaussian_window();
    let x = a.data().mapv(f64::from);
    let y = b.data().mapv(f64::from);
    let mx = filter_valid(&x, &g);
    let my = filter_valid(&y, &g);
    let xx = filter_valid(&(&x * &x), &g);
    let yy = filter_valid(&(&y * &y), &g);
    let xy = filter_valid(&(&x * &y), &g);
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    Ok(Array2::from_shape_fn(mx.dim(), |idx| {
        let (ma, mb) = (mx[idx], my[idx]);
        let va = xx[idx] - ma * ma;
        let vb = yy[idx] - mb * mb;
        let cov = xy[idx] - ma * mb;
        ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
    }))
}

/// Mean local SSIM over windows centred inside `region` (all if `None`).
pub fn ssim_in(a: &Image, b: &Image, data_range: f64, region: Option<&Array2<bool>>) -> Result<f64> {
    let map = ssim_map(a, b, data_range)?;
    let off = SSIM_WINDOW / 2;
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((i, j), &v) in map.indexed_iter() {
        if region.is_none_or(|r| r[[i + off, j + off]]) {
            sum += v;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("SSIM region contains no window centre"));
    }
    Ok(sum / count as f64)
}

pub fn ssim(a: &Image, b: &Image, data_range: f64) -> Result<f64> {
    ssim_in(a, b, data_range, None)
}
