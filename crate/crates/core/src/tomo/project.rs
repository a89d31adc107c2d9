use ndarray::Array2;
use rayon::prelude::*;

use super::{Geometry, Image, Sinogram};
use crate::error::Result;

/// Spacing of the sample points along each ray, in pixels.
const RAY_STEP: f64 = 0.5;

/// Bilinear footprint of a point: up to four `(row, col, weight)` taps.
#[inline]
fn bilinear_taps(n: usize, x: f64, y: f64) -> impl Iterator<Item = (usize, usize, f64)> {
    let c = (n as f64 - 1.0) / 2.0;
    let row = c - y;
    let col = x + c;
    let r0 = row.floor();
    let c0 = col.floor();
    let fr = row - r0;
    let fc = col - c0;
    let (r0, c0) = (r0 as isize, c0 as isize);
    let n = n as isize;
    [
        (r0, c0, (1.0 - fr) * (1.0 - fc)),
        (r0, c0 + 1, (1.0 - fr) * fc),
        (r0 + 1, c0, fr * (1.0 - fc)),
        (r0 + 1, c0 + 1, fr * fc),
    ]
    .into_iter()
    .filter(move |&(r, c, _)| r >= 0 && r < n && c >= 0 && c < n)
    .map(|(r, c, w)| (r as usize, c as usize, w))
}

/// Sample positions `(x, y)` along the ray `(angle, detector)`.
///
/// The grid is symmetric about the foot point of the ray and clipped to the
/// disk circumscribing the image, so the same offsets are visited at every
/// angle.
fn ray_points(geometry: &Geometry, cos: f64, sin: f64, j: usize) -> impl Iterator<Item = (f64, f64)> {
    let s = geometry.detector_offset(j);
    let radius = geometry.image_size() as f64 / std::f64::consts::SQRT_2 + 1.0;
    let half = if s.abs() < radius {
        ((radius * radius - s * s).sqrt() / RAY_STEP).floor() as i64
    } else {
        -1
    };
    (-half..=half).map(move |k| {
        let tau = k as f64 * RAY_STEP;
        (s * cos - tau * sin, s * sin + tau * cos)
    })
}

fn trig(angle_deg: f64) -> (f64, f64) {
    let t = angle_deg.to_radians();
    (t.cos(), t.sin())
}

/// Discrete line integrals of `image` along every `(angle, detector)` ray.
///
/// Rays are sampled every half pixel with bilinear interpolation; pixels
/// outside the grid read as zero. The operator is linear in the image.
pub fn radon(image: &Image, geometry: &Geometry) -> Result<Sinogram> {
    image.check_size(geometry.image_size())?;
    let n = geometry.image_size();
    let img = image.data();
    let columns: Vec<Vec<f32>> = geometry
        .angles()
        .par_iter()
        .map(|&angle| {
            let (cos, sin) = trig(angle);
            (0..geometry.n_detectors())
                .map(|j| {
                    let mut acc = 0.0f64;
                    for (x, y) in ray_points(geometry, cos, sin, j) {
                        for (r, c, w) in bilinear_taps(n, x, y) {
                            acc += w * img[[r, c]] as f64;
                        }
                    }
                    (acc * RAY_STEP) as f32
                })
                .collect()
        })
        .collect();
    let mut data = Array2::zeros((geometry.n_detectors(), geometry.n_angles()));
    for (k, col) in columns.iter().enumerate() {
        for (j, &v) in col.iter().enumerate() {
            data[[j, k]] = v;
        }
    }
    Sinogram::new(data, geometry.clone())
}

/// Unfiltered back-projection: the exact adjoint of [`radon`].
///
/// Accumulation runs sequentially over angles so the result does not depend
/// on the thread count.
pub fn backproject(sinogram: &Sinogram) -> Image {
    let geometry = sinogram.geometry();
    let n = geometry.image_size();
    let mut acc = Array2::<f64>::zeros((n, n));
    for (k, &angle) in geometry.angles().iter().enumerate() {
        let (cos, sin) = trig(angle);
        for j in 0..geometry.n_detectors() {
            let v = sinogram.data()[[j, k]] as f64 * RAY_STEP;
            if v == 0.0 {
                continue;
            }
            for (x, y) in ray_points(geometry, cos, sin, j) {
                for (r, c, w) in bilinear_taps(n, x, y) {
                    acc[[r, c]] += w * v;
                }
            }
        }
    }
    Image::from_raw(acc.mapv(|v| v as f32), (0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    fn random_image(n: usize, seed: u64) -> Image {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Image::new(Array2::from_shape_fn((n, n), |_| rng.random::<f32>()), (0.0, 1.0)).unwrap()
    }

    fn random_sinogram(g: &Geometry, seed: u64) -> Sinogram {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = Array2::from_shape_fn((g.n_detectors(), g.n_angles()), |_| {
            rng.random::<f32>() - 0.5
        });
        Sinogram::new(data, g.clone()).unwrap()
    }

    #[test]
    fn zero_image_gives_zero_sinogram() {
        let g = Geometry::uniform(32, 30).unwrap();
        let y = radon(&Image::zeros(32, (0.0, 1.0)), &g).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn radon_rejects_wrong_size() {
        let g = Geometry::uniform(32, 30).unwrap();
        assert!(radon(&Image::zeros(16, (0.0, 1.0)), &g).is_err());
    }

    #[test]
    fn adjoint_consistency() {
        let g = Geometry::uniform(24, 36).unwrap();
        let x = random_image(24, 1);
        let y = random_sinogram(&g, 2);
        let ax = radon(&x, &g).unwrap();
        let aty = backproject(&y);
        let lhs: f64 = ax.data().iter().zip(y.data()).map(|(a, b)| *a as f64 * *b as f64).sum();
        let rhs: f64 = x.data().iter().zip(aty.data()).map(|(a, b)| *a as f64 * *b as f64).sum();
        assert!((lhs - rhs).abs() <= 1e-4 * lhs.abs().max(rhs.abs()), "{lhs} vs {rhs}");
    }

    /// Smooth radially symmetric bump `(1 - r²/R²)²` sampled at pixel centres.
    fn bump(n: usize, radius: f64) -> Image {
        let c = (n as f64 - 1.0) / 2.0;
        Image::new(
            Array2::from_shape_fn((n, n), |(i, j)| {
                let r2 = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / (radius * radius);
                if r2 < 1.0 { ((1.0 - r2) * (1.0 - r2)) as f32 } else { 0.0 }
            }),
            (0.0, 1.0),
        )
        .unwrap()
    }

    /// Independent oracle: the closed-form line integral of the continuous bump,
    /// `∫ (1 - (s² + τ²)/R²)² dτ = (16/15) R (1 - s²/R²)^{5/2}`.
    fn bump_line_integral(s: f64, radius: f64) -> f64 {
        let u = 1.0 - (s * s) / (radius * radius);
        if u <= 0.0 { 0.0 } else { 16.0 / 15.0 * radius * u.powf(2.5) }
    }

    #[test]
    fn symmetric_object_projects_identically_at_every_angle() {
        let n = 64;
        let radius = 24.0;
        let g = Geometry::uniform(n, 360).unwrap();
        let y = radon(&bump(n, radius), &g).unwrap();
        let peak = y.data().iter().cloned().fold(0.0f32, f32::max) as f64;
        let first = y.data().column(0).to_owned();
        let mut worst = 0.0f64;
        for col in y.data().columns() {
            for (a, b) in col.iter().zip(first.iter()) {
                worst = worst.max((a - b).abs() as f64);
            }
        }
        assert!(worst < 1e-3 * peak, "max deviation {worst} vs peak {peak}");

        // Two angles against the analytic ray sums.
        for k in [0usize, 37] {
            for j in 0..g.n_detectors() {
                let s = g.detector_offset(j);
                let exact = bump_line_integral(s, radius);
                let got = y.data()[[j, k]] as f64;
                assert!((got - exact).abs() < 5e-3 * peak, "angle {k} det {j}: {got} vs {exact}");
            }
        }
    }
}
