use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PairedSample;
use crate::diffusion::{Denoiser, NoiseSchedule};
use crate::error::Result;
use crate::sampler::{sample, SampleConfig};
use crate::tomo::{apply_mask, estimate_lipschitz, tv_recon, Image};

/// Settings for the TV baseline; the step size is `1 / L` with `L` estimated
/// per angular mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TvSettings {
    pub lambda: f64,
    pub n_iters: usize,
}

impl Default for TvSettings {
    fn default() -> Self {
        Self {
            lambda: 0.02,
            n_iters: 100,
        }
    }
}

#[derive(Clone, Copy)]
pub enum Method<'a> {
    /// The limited-angle FBP prior itself.
    Fbp,
    Tv(TvSettings),
    Diffusion {
        model: &'a dyn Denoiser,
        schedule: &'a NoiseSchedule,
        config: SampleConfig,
    },
}

impl Method<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Fbp => "fbp",
            Method::Tv(_) => "tv",
            Method::Diffusion { config, .. } if config.guidance_weight == 0.0 => "ddim",
            Method::Diffusion { .. } => "pwd",
        }
    }
}

/// Noise seed for test image `index` under sampling seed `seed`.
pub fn image_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0xD6E8_FEB8_6659_FD93) ^ (index as u64).wrapping_add(0x632B_E59B_D9B4_E019)
}

#[derive(Debug, Clone)]
pub struct Reconstructions {
    /// Normalised to `[-1, 1]` like the dataset targets.
    pub images: Vec<Image>,
    /// Wall-clock seconds per image, `None` when run in parallel.
    pub seconds: Option<Vec<f64>>,
}

/// Reconstructs every test sample. Sequential runs time each image on its
/// own; parallel runs report no timings.
pub fn reconstruct(method: &Method, samples: &[PairedSample], parallel: bool) -> Result<Reconstructions> {
    let lipschitz = match method {
        Method::Tv(_) => lipschitz_table(samples)?,
        _ => HashMap::new(),
    };
    let one = |(i, s): (usize, &PairedSample)| -> Result<(Image, f64)> {
        let start = Instant::now();
        let img = reconstruct_one(method, i, s, &lipschitz)?;
        Ok((img, start.elapsed().as_secs_f64()))
    };
    let out: Vec<(Image, f64)> = if parallel {
        samples.par_iter().enumerate().map(one).collect::<Result<_>>()?
    } else {
        samples.iter().enumerate().map(one).collect::<Result<_>>()?
    };
    let (images, secs): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    Ok(Reconstructions {
        images,
        seconds: (!parallel).then_some(secs),
    })
}

type RangeKey = (u64, u64);

fn range_key(s: &PairedSample) -> RangeKey {
    (s.angle_range.start.to_bits(), s.angle_range.end.to_bits())
}

fn lipschitz_table(samples: &[PairedSample]) -> Result<HashMap<RangeKey, f64>> {
    let mut table = HashMap::new();
    for s in samples {
        if let std::collections::hash_map::Entry::Vacant(e) = table.entry(range_key(s)) {
            e.insert(estimate_lipschitz(s.sinogram.geometry(), &s.mask()?, 30)?);
        }
    }
    Ok(table)
}

fn reconstruct_one(
    method: &Method,
    index: usize,
    s: &PairedSample,
    lipschitz: &HashMap<RangeKey, f64>,
) -> Result<Image> {
    match *method {
        Method::Fbp => Ok(s.prior.clone()),
        Method::Tv(tv) => {
            let mask = s.mask()?;
            let l = lipschitz[&range_key(s)];
            let raw = tv_recon(&apply_mask(&s.sinogram, &mask)?, &mask, tv.lambda, tv.n_iters, 1.0 / l)?;
            Ok(s.norm.normalize(&raw))
        }
        Method::Diffusion {
            model,
            schedule,
            config,
        } => {
            let cfg = SampleConfig {
                seed: image_seed(config.seed, index),
                ..config
            };
            sample(model, &s.prior, schedule, &cfg)
        }
    }
}
