//! Noise schedule, forward diffusion, the conditional denoiser and its
//! training loop.

mod checkpoint;
mod schedule;
mod train;
mod unet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::PairedSample;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::tomo::Image;

pub use checkpoint::{Checkpoint, CODE_VERSION};
pub use schedule::{forward_diffuse, make_schedule, NoiseSchedule, ScheduleParams};
pub use train::{train, TrainConfig, TrainOutput};
pub use unet::{timestep_embedding, UNet, UNetConfig};

/// A noise predictor `ε_θ(x_t, c, t)`.
///
/// `x_t` and `c` are `[n, 1, h, w]`; `t` holds one timestep per sample.
pub trait Denoiser: Sync {
    fn predict(&self, x_t: &Tensor, c: &Tensor, t: &[usize]) -> Result<Tensor>;

    /// The `T` the model was trained with, when known.
    fn schedule_len(&self) -> Option<usize> {
        None
    }
}

/// Stacks equally sized images into an `[n, 1, h, w]` tensor.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    let mut size = None;
    for img in images {
        let s = img.size();
        if *size.get_or_insert(s) != s {
            return Err(Error::shape(format!("{}x{0}", size.unwrap()), format!("{s}x{s}")));
        }
        data.extend(img.data().iter().copied());
        n += 1;
    }
    let s = size.ok_or_else(|| Error::invalid("cannot stack an empty image list"))?;
    Ok(Tensor::from_vec([n, 1, s, s], data))
}

/// Sample `k` of an `[n, 1, h, h]` tensor as an image.
pub fn unstack_image(t: &Tensor, k: usize, value_range: (f32, f32)) -> Result<Image> {
    let (h, w) = (t.h(), t.w());
    let data = ndarray::Array2::from_shape_vec((h, w), t.sample(k).to_vec())
        .map_err(|e| Error::invalid(e.to_string()))?;
    Image::new(data, value_range)
}

/// One noisy training batch: `x_t = √ᾱ_t·target + √(1−ᾱ_t)·ε`, conditioned on the prior.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyBatch {
    pub x_t: Tensor,
    pub c: Tensor,
    pub t: Vec<usize>,
    pub eps: Tensor,
}

/// Draws, per sample in order, `t ~ U{1..T}` and then `ε ~ N(0, I)` from a
/// ChaCha8 stream seeded by `seed`.
pub fn draw_noise(n: usize, h: usize, w: usize, s: &NoiseSchedule, seed: u64) -> (Vec<usize>, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ts = Vec::with_capacity(n);
    let mut eps = Vec::with_capacity(n * h * w);
    for _ in 0..n {
        ts.push(rng.random_range(1..=s.len()));
        eps.extend((0..h * w).map(|_| rng.sample::<f32, _>(StandardNormal)));
    }
    (ts, Tensor::from_vec([n, 1, h, w], eps))
}

pub fn noisy_batch<'a>(
    samples: impl IntoIterator<Item = &'a PairedSample>,
    s: &NoiseSchedule,
    seed: u64,
) -> Result<NoisyBatch> {
    let samples: Vec<&PairedSample> = samples.into_iter().collect();
    if samples.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let x0 = stack_images(samples.iter().map(|p| &p.target))?;
    let c = stack_images(samples.iter().map(|p| &p.prior))?;
    let [n, _, h, w] = x0.shape();
    let (t, eps) = draw_noise(n, h, w, s, seed);
    let mut x_t = Tensor::zeros(x0.shape());
    let hw = h * w;
    for k in 0..n {
        let (a, b) = (s.alpha_bar(t[k]).sqrt() as f32, (1.0 - s.alpha_bar(t[k])).sqrt() as f32);
        for i in 0..hw {
            x_t.data_mut()[k * hw + i] = a * x0.data()[k * hw + i] + b * eps.data()[k * hw + i];
        }
    }
    Ok(NoisyBatch { x_t, c, t, eps })
}

/// Mean squared error between `ε_θ(x_t, c, t)` and the drawn `ε`.
pub fn loss(model: &dyn Denoiser, batch: &[PairedSample], s: &NoiseSchedule, seed: u64) -> Result<f64> {
    let b = noisy_batch(batch, s, seed)?;
    let pred = model.predict(&b.x_t, &b.c, &b.t)?;
    if pred.shape() != b.eps.shape() {
        return Err(Error::shape(format!("{:?}", b.eps.shape()), format!("{:?}", pred.shape())));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(b.eps.data())
        .map(|(p, e)| ((p - e) as f64).powi(2))
        .sum();
    Ok(sum / pred.numel() as f64)
}
