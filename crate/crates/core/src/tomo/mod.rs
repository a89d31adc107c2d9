//! Discrete parallel-beam tomography.
//!
//! Coordinates: pixel `(row, col)` of an `n × n` image has its centre at
//! `x = col - (n-1)/2`, `y = (n-1)/2 - row` (pixel units, y pointing up).
//! A ray at angle `θ` and detector offset `s` is the line
//! `s·(cos θ, sin θ) + τ·(-sin θ, cos θ)`. Sinograms are stored
//! detector-major: `data[[detector, angle]]`.

mod fbp;
pub mod io;
mod project;
mod tv;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fbp::{fbp, Filter};
pub use project::{backproject, radon};
pub use tv::{estimate_lipschitz, tv_recon, tv_recon_from, TvOptions, TvOutput};

/// Acquisition geometry for a square image and a parallel-beam detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    image_size: usize,
    n_detectors: usize,
    angles: Vec<f64>,
    detector_spacing: f64,
}

impl Geometry {
    pub fn new(
        image_size: usize,
        n_detectors: usize,
        angles: Vec<f64>,
        detector_spacing: f64,
    ) -> Result<Self> {
        if image_size == 0 {
            return Err(Error::invalid("image_size must be positive"));
        }
        if !(detector_spacing > 0.0 && detector_spacing.is_finite()) {
            return Err(Error::invalid(format!(
                "detector_spacing must be positive, got {detector_spacing}"
            )));
        }
        let needed = image_size as f64 * std::f64::consts::SQRT_2;
        if (n_detectors as f64) * detector_spacing < needed {
            return Err(Error::invalid(format!(
                "{n_detectors} detectors at spacing {detector_spacing} do not cover an image of size {image_size} (need {needed:.1} pixels)"
            )));
        }
        if angles.is_empty() {
            return Err(Error::invalid("geometry needs at least one angle"));
        }
        if let Some(a) = angles.iter().find(|a| !(0.0..360.0).contains(*a)) {
            return Err(Error::invalid(format!("angle {a} outside [0, 360)")));
        }
        if angles.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("angles must be strictly increasing"));
        }
        Ok(Self {
            image_size,
            n_detectors,
            angles,
            detector_spacing,
        })
    }

    /// `n_angles` equally spaced views over `[0°, 360°)` and the smallest odd
    /// detector count that covers the image diagonal at unit spacing.
    pub fn uniform(image_size: usize, n_angles: usize) -> Result<Self> {
        if n_angles == 0 {
            return Err(Error::invalid("n_angles must be positive"));
        }
        let step = 360.0 / n_angles as f64;
        let angles = (0..n_angles).map(|k| k as f64 * step).collect();
        let mut n_det = (image_size as f64 * std::f64::consts::SQRT_2).ceil() as usize;
        if n_det.is_multiple_of(2) {
            n_det += 1;
        }
        Self::new(image_size, n_det, angles, 1.0)
    }

    /// Re-checks the invariants, e.g. after deserialisation.
    pub fn validated(self) -> Result<Self> {
        Self::new(self.image_size, self.n_detectors, self.angles, self.detector_spacing)
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn n_detectors(&self) -> usize {
        self.n_detectors
    }

    pub fn n_angles(&self) -> usize {
        self.angles.len()
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn detector_spacing(&self) -> f64 {
        self.detector_spacing
    }

    /// Signed offset of detector bin `j` from the rotation centre, in pixels.
    pub(crate) fn detector_offset(&self, j: usize) -> f64 {
        (j as f64 - (self.n_detectors as f64 - 1.0) / 2.0) * self.detector_spacing
    }
}

/// A square scalar field with a declared intensity range.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array2<f32>,
    value_range: (f32, f32),
}

impl Image {
    pub fn new(data: Array2<f32>, value_range: (f32, f32)) -> Result<Self> {
        let (h, w) = data.dim();
        if h != w || h == 0 {
            return Err(Error::shape("non-empty square grid", format!("{h}x{w}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image contains non-finite values"));
        }
        if !(value_range.0 < value_range.1) {
            return Err(Error::invalid(format!(
                "value range must satisfy min < max, got {value_range:?}"
            )));
        }
        Ok(Self { data, value_range })
    }

    pub fn zeros(size: usize, value_range: (f32, f32)) -> Self {
        Self {
            data: Array2::zeros((size, size)),
            value_range,
        }
    }

    pub(crate) fn from_raw(data: Array2<f32>, value_range: (f32, f32)) -> Self {
        debug_assert_eq!(data.nrows(), data.ncols());
        Self { data, value_range }
    }

    pub fn size(&self) -> usize {
        self.data.nrows()
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f32> {
        self.data
    }

    pub fn value_range(&self) -> (f32, f32) {
        self.value_range
    }

    pub fn with_value_range(mut self, value_range: (f32, f32)) -> Self {
        self.value_range = value_range;
        self
    }

    pub(crate) fn check_size(&self, size: usize) -> Result<()> {
        if self.size() != size {
            return Err(Error::shape(
                format!("{size}x{size} image"),
                format!("{0}x{0}", self.size()),
            ));
        }
        Ok(())
    }
}

/// Line integrals indexed by `[detector, angle]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    data: Array2<f32>,
    geometry: Geometry,
}

impl Sinogram {
    pub fn new(data: Array2<f32>, geometry: Geometry) -> Result<Self> {
        let expected = (geometry.n_detectors(), geometry.n_angles());
        if data.dim() != expected {
            return Err(Error::shape(
                format!("{}x{} sinogram", expected.0, expected.1),
                format!("{}x{}", data.nrows(), data.ncols()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("sinogram contains non-finite values"));
        }
        Ok(Self { data, geometry })
    }

    pub fn zeros(geometry: Geometry) -> Self {
        Self {
            data: Array2::zeros((geometry.n_detectors(), geometry.n_angles())),
            geometry,
        }
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<f32> {
        &mut self.data
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }
}

/// Closed interval of projection angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleRange {
    pub start: f64,
    pub end: f64,
}

impl AngleRange {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) || start < 0.0 || end > 360.0 {
            return Err(Error::invalid(format!(
                "angle range [{start}, {end}] must lie within [0, 360]"
            )));
        }
        if end < start {
            return Err(Error::invalid(format!("empty angle range [{start}, {end}]")));
        }
        Ok(Self { start, end })
    }

    pub fn full() -> Self {
        Self {
            start: 0.0,
            end: 360.0,
        }
    }

    pub fn span(&self) -> f64 {
        self.end - self.start
    }

    pub fn contains(&self, angle: f64) -> bool {
        angle >= self.start && angle <= self.end
    }
}

impl std::fmt::Display for AngleRange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}]", self.start, self.end)
    }
}

/// Per-angle availability flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AngularMask {
    flags: Vec<bool>,
}

impl AngularMask {
    pub fn from_flags(flags: Vec<bool>) -> Result<Self> {
        if !flags.iter().any(|&f| f) {
            return Err(Error::invalid("angular mask keeps no angle"));
        }
        Ok(Self { flags })
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    /// The flipped mask, `1 - M`. Errors when `M` keeps every angle.
    pub fn complement(&self) -> Result<Self> {
        Self::from_flags(self.flags.iter().map(|f| !f).collect())
    }
}

/// Flags every angle of `geometry` that lies inside the closed `range`.
pub fn make_mask(geometry: &Geometry, range: AngleRange) -> Result<AngularMask> {
    let flags: Vec<bool> = geometry.angles().iter().map(|&a| range.contains(a)).collect();
    AngularMask::from_flags(flags).map_err(|_| {
        Error::invalid(format!("angle range {range} selects no projection angle"))
    })
}

/// Zeroes the sinogram columns of masked-out angles.
pub fn apply_mask(sinogram: &Sinogram, mask: &AngularMask) -> Result<Sinogram> {
    if mask.len() != sinogram.geometry().n_angles() {
        return Err(Error::shape(
            format!("mask of length {}", sinogram.geometry().n_angles()),
            format!("length {}", mask.len()),
        ));
    }
    let mut out = sinogram.clone();
    for (mut col, &keep) in out.data.columns_mut().into_iter().zip(mask.flags()) {
        if !keep {
            col.fill(0.0);
        }
    }
    Ok(out)
}

/// Pixels whose centres lie inside the circle inscribed in the image square.
pub fn fov_mask(size: usize) -> Array2<bool> {
    let c = (size as f64 - 1.0) / 2.0;
    let r2 = (size as f64 / 2.0).powi(2);
    Array2::from_shape_fn((size, size), |(i, j)| {
        let (y, x) = (i as f64 - c, j as f64 - c);
        x * x + y * y <= r2
    })
}

/// Adds zero-mean Gaussian noise with standard deviation `sigma` to every bin.
pub fn add_noise(sinogram: &Sinogram, sigma: f64, seed: u64) -> Result<Sinogram> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("noise sigma must be >= 0, got {sigma}")));
    }
    let mut out = sinogram.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for v in out.data.iter_mut() {
        *v += normal.sample(&mut rng) as f32;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_geometry_covers_diagonal() {
        let g = Geometry::uniform(128, 360).unwrap();
        assert_eq!(g.n_angles(), 360);
        assert!(g.n_detectors() as f64 >= 128.0 * 2f64.sqrt());
        assert_eq!(g.n_detectors() % 2, 1);
        assert_eq!(g.angles()[1], 1.0);
    }

    #[test]
    fn geometry_rejects_bad_input() {
        assert!(Geometry::new(64, 10, vec![0.0], 1.0).is_err());
        assert!(Geometry::new(64, 91, vec![10.0, 5.0], 1.0).is_err());
        assert!(Geometry::new(64, 91, vec![0.0, 360.0], 1.0).is_err());
        assert!(Geometry::new(64, 91, vec![], 1.0).is_err());
    }

    #[test]
    fn mask_counts_closed_interval() {
        let g = Geometry::uniform(32, 360).unwrap();
        let m90 = make_mask(&g, AngleRange::new(0.0, 90.0).unwrap()).unwrap();
        assert_eq!(m90.count(), 91);
        let m120 = make_mask(&g, AngleRange::new(0.0, 120.0).unwrap()).unwrap();
        assert_eq!(m120.count(), 121);
        let full = make_mask(&g, AngleRange::full()).unwrap();
        assert_eq!(full.count(), 360);
    }

    #[test]
    fn mask_rejects_empty_interval() {
        assert!(AngleRange::new(90.0, 10.0).is_err());
        assert!(AngleRange::new(-1.0, 10.0).is_err());
        let g = Geometry::uniform(32, 4).unwrap();
        // Falls between 0° and 90°, selects nothing.
        assert!(make_mask(&g, AngleRange::new(10.0, 20.0).unwrap()).is_err());
    }

    fn ramp_sinogram(g: &Geometry) -> Sinogram {
        let data = Array2::from_shape_fn((g.n_detectors(), g.n_angles()), |(i, j)| {
            (i * 7 + j * 3) as f32 * 0.01 + 1.0
        });
        Sinogram::new(data, g.clone()).unwrap()
    }

    #[test]
    fn apply_mask_identity_and_single_column() {
        let g = Geometry::uniform(16, 12).unwrap();
        let y = ramp_sinogram(&g);
        let ones = AngularMask::from_flags(vec![true; 12]).unwrap();
        assert_eq!(apply_mask(&y, &ones).unwrap(), y);

        let mut flags = vec![false; 12];
        flags[5] = true;
        let one = AngularMask::from_flags(flags).unwrap();
        let masked = apply_mask(&y, &one).unwrap();
        let nonzero_cols = masked
            .data()
            .columns()
            .into_iter()
            .filter(|c| c.iter().any(|&v| v != 0.0))
            .count();
        assert_eq!(nonzero_cols, 1);
    }

    #[test]
    fn complementary_masks_partition_and_idempotent() {
        let g = Geometry::uniform(16, 12).unwrap();
        let y = ramp_sinogram(&g);
        let m = AngularMask::from_flags((0..12).map(|k| k % 3 == 0).collect()).unwrap();
        let a = apply_mask(&y, &m).unwrap();
        let b = apply_mask(&y, &m.complement().unwrap()).unwrap();
        assert_eq!(&(a.data() + b.data()), y.data());
        assert_eq!(apply_mask(&a, &m).unwrap(), a);
    }

    #[test]
    fn apply_mask_rejects_length_mismatch() {
        let g = Geometry::uniform(16, 12).unwrap();
        let y = ramp_sinogram(&g);
        let m = AngularMask::from_flags(vec![true; 11]).unwrap();
        assert!(matches!(apply_mask(&y, &m), Err(Error::Shape { .. })));
    }

    #[test]
    fn noise_is_seeded() {
        let g = Geometry::uniform(16, 12).unwrap();
        let y = ramp_sinogram(&g);
        let a = add_noise(&y, 0.1, 3).unwrap();
        let b = add_noise(&y, 0.1, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, y);
        assert_eq!(add_noise(&y, 0.0, 3).unwrap(), y);
    }
}
