//! Synthetic phantoms and paired (full-angle target, limited-angle prior)
//! datasets.

mod phantom;
mod store;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tomo::{
    add_noise, apply_mask, fbp, make_mask, radon, AngleRange, AngularMask, Filter, Geometry, Image,
    Sinogram,
};

pub use phantom::{
    dental_layout, generate_phantom, rasterize, Blend, DentalLayout, Ellipse, PhantomKind,
    PhantomSpec,
};
pub use store::{load_dataset, persist_dataset, Manifest, SampleEntry, MANIFEST_FILE};

/// Global affine intensity map `x ↦ (x − shift) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub shift: f32,
    pub scale: f32,
}

impl NormParams {
    /// The map sending `[lo, hi]` onto `[-1, 1]`.
    pub fn from_range((lo, hi): (f32, f32)) -> Result<Self> {
        if !(hi > lo && lo.is_finite() && hi.is_finite()) {
            return Err(Error::invalid(format!("cannot normalise degenerate range [{lo}, {hi}]")));
        }
        Ok(Self {
            shift: 0.5 * (lo + hi),
            scale: 0.5 * (hi - lo),
        })
    }

    pub fn normalize(&self, image: &Image) -> Image {
        let data = image.data().mapv(|v| (v - self.shift) / self.scale);
        Image::new(data, (-1.0, 1.0)).expect("affine map of a finite image")
    }

    pub fn denormalize(&self, image: &Image) -> Image {
        let data = image.data().mapv(|v| v * self.scale + self.shift);
        let range = (self.shift - self.scale, self.shift + self.scale);
        Image::new(data, range).expect("affine map of a finite image")
    }
}

/// A (target, prior) training or test pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    /// Normalised FBP of the full-angle sinogram.
    pub target: Image,
    /// Normalised FBP of the same sinogram after angular masking.
    pub prior: Image,
    pub angle_range: AngleRange,
    pub norm: NormParams,
    /// The full-angle (possibly noisy) sinogram both images derive from.
    pub sinogram: Sinogram,
}

impl PairedSample {
    pub fn mask(&self) -> Result<AngularMask> {
        make_mask(self.sinogram.geometry(), self.angle_range)
    }

    /// Recomputes the prior from the stored sinogram and angle range.
    pub fn rederive_prior(&self) -> Result<Image> {
        let masked = apply_mask(&self.sinogram, &self.mask()?)?;
        Ok(self.norm.normalize(&fbp(&masked, Filter::RamLak)?))
    }
}

/// Simulates one acquisition of `phantom` and reconstructs the pair.
pub fn build_pair(
    phantom: &Image,
    geometry: &Geometry,
    angle_range: AngleRange,
    noise_sigma: f64,
    seed: u64,
) -> Result<PairedSample> {
    phantom.check_size(geometry.image_size())?;
    let clean = radon(phantom, geometry)?;
    let sinogram = if noise_sigma > 0.0 {
        add_noise(&clean, noise_sigma, seed)?
    } else if noise_sigma == 0.0 {
        clean
    } else {
        return Err(Error::invalid(format!("noise_sigma must be >= 0, got {noise_sigma}")));
    };
    let full = fbp(&sinogram, Filter::RamLak)?;
    let norm = NormParams::from_range(full.value_range())?;
    let mask = make_mask(geometry, angle_range)?;
    let limited = fbp(&apply_mask(&sinogram, &mask)?, Filter::RamLak)?;
    Ok(PairedSample {
        target: norm.normalize(&full),
        prior: norm.normalize(&limited),
        angle_range,
        norm,
        sinogram,
    })
}

/// Recipe for a synthetic train/test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: PhantomKind,
    pub image_size: usize,
    pub n_angles: usize,
    pub angle_ranges: Vec<AngleRange>,
    /// Phantoms per split; each is paired with every angle range.
    pub n_train: usize,
    pub n_test: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<PairedSample>,
    pub test: Vec<PairedSample>,
}

/// Phantom seed for sample `index` of a split; train and test never collide.
fn phantom_seed(seed: u64, test: bool, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(((test as u64) << 40) | index as u64)
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.angle_ranges.is_empty() {
        return Err(Error::invalid("dataset needs at least one angle range"));
    }
    let geometry = Geometry::uniform(spec.image_size, spec.n_angles)?;
    let split = |test: bool, count: usize| -> Result<Vec<PairedSample>> {
        let jobs: Vec<(usize, AngleRange)> = (0..count)
            .flat_map(|i| spec.angle_ranges.iter().map(move |&r| (i, r)))
            .collect();
        jobs.into_par_iter()
            .map(|(i, range)| {
                let seed = phantom_seed(spec.seed, test, i);
                let phantom = generate_phantom(&PhantomSpec::new(spec.kind, spec.image_size, seed))?;
                build_pair(&phantom, &geometry, range, spec.noise_sigma, seed)
            })
            .collect()
    };
    Ok(Dataset {
        train: split(false, spec.n_train)?,
        test: split(true, spec.n_test)?,
    })
}
