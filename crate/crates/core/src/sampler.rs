//! Guided DDIM sampling and the unguided baseline (`w = 0`).

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{stack_images, Checkpoint, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::tomo::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub n_steps: usize,
    pub guidance_weight: f64,
    pub seed: u64,
    pub eta: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            n_steps: 50,
            guidance_weight: 0.05,
            seed: 0,
            eta: 0.0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.n_steps == 0 || self.n_steps > schedule.len() {
            return Err(Error::invalid(format!(
                "n_steps must be in [1, {}], got {}",
                schedule.len(),
                self.n_steps
            )));
        }
        check_weight(self.guidance_weight)?;
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid(format!("eta must be >= 0, got {}", self.eta)));
        }
        Ok(())
    }
}

fn check_weight(w: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::invalid(format!("guidance weight must be in [0, 1], got {w}")));
    }
    Ok(())
}

/// Decreasing timesteps `t_K > … > t_1 >= 1`; the terminal state `t = 0` is implicit.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub timesteps: Vec<usize>,
    /// Guided clean estimate after each step, when recorded.
    pub snapshots: Vec<Image>,
}

impl Trajectory {
    /// `t_i = ⌊i·T/K⌋` for `i = K, …, 1`.
    pub fn uniform(total: usize, n_steps: usize) -> Result<Self> {
        if n_steps == 0 || n_steps > total {
            return Err(Error::invalid(format!("n_steps must be in [1, {total}], got {n_steps}")));
        }
        Ok(Self {
            timesteps: (1..=n_steps).rev().map(|i| i * total / n_steps).collect(),
            snapshots: Vec::new(),
        })
    }

    /// Pairs `(t, t_prev)` ending with `(t_1, 0)`.
    pub fn steps(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.timesteps
            .iter()
            .enumerate()
            .map(|(k, &t)| (t, self.timesteps.get(k + 1).copied().unwrap_or(0)))
    }
}

fn check_same(a: &Array2<f32>, b: &Array2<f32>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    Ok(())
}

/// `x0* = (x_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`.
pub fn predict_x0(x_t: &Image, eps_hat: &Array2<f32>, t: usize, s: &NoiseSchedule) -> Result<Image> {
    if t == 0 || t > s.len() {
        return Err(Error::invalid(format!("timestep {t} outside [1, {}]", s.len())));
    }
    check_same(x_t.data(), eps_hat)?;
    let ab = s.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = Zip::from(x_t.data())
        .and(eps_hat)
        .map_collect(|&x, &e| ((x as f64 - b * e as f64) / a) as f32);
    Image::new(data, x_t.value_range())
}

/// `x_g = (1 − w)·x0* + w·c`.
pub fn guide(x0_star: &Image, c: &Image, w: f64) -> Result<Image> {
    check_weight(w)?;
    check_same(x0_star.data(), c.data())?;
    let data = Zip::from(x0_star.data())
        .and(c.data())
        .map_collect(|&x, &p| ((1.0 - w) * x as f64 + w * p as f64) as f32);
    Image::new(data, c.value_range())
}

/// One guided DDIM update from `t` to `t_prev` (`t_prev = 0` is the clean state).
#[allow(clippy::too_many_arguments)]
pub fn ddim_step(
    x_t: &Image,
    eps_hat: &Array2<f32>,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
    c: &Image,
    w: f64,
    eta: f64,
    rng: &mut impl Rng,
) -> Result<Image> {
    if t <= t_prev {
        return Err(Error::invalid(format!("timesteps must decrease, got {t} -> {t_prev}")));
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!("eta must be >= 0, got {eta}")));
    }
    let x_g = guide(&predict_x0(x_t, eps_hat, t, s)?, c, w)?;
    if t_prev == 0 {
        return Ok(x_g);
    }
    let (ab, ab_prev) = (s.alpha_bar(t), s.alpha_bar(t_prev));
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let a = ab_prev.sqrt();
    let mut data = Zip::from(x_g.data())
        .and(eps_hat)
        .map_collect(|&x, &e| a * x as f64 + dir * e as f64);
    if sigma > 0.0 {
        for v in data.iter_mut() {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Image::new(data.mapv(|v| v as f32), x_t.value_range())
}

fn schedule_matches(model: &dyn Denoiser, s: &NoiseSchedule) -> Result<()> {
    if let Some(total) = model.schedule_len() {
        if total != s.len() {
            return Err(Error::invalid(format!(
                "model was trained with T = {total} but the schedule has T = {}",
                s.len()
            )));
        }
    }
    Ok(())
}

/// Reconstructs one image from its prior `c`.
pub fn sample(model: &dyn Denoiser, c: &Image, s: &NoiseSchedule, cfg: &SampleConfig) -> Result<Image> {
    Ok(sample_batch(model, std::slice::from_ref(c), s, cfg, &[cfg.seed])?.remove(0))
}

/// Like [`sample`] but also returns the trajectory with per-step snapshots.
pub fn sample_trajectory(
    model: &dyn Denoiser,
    c: &Image,
    s: &NoiseSchedule,
    cfg: &SampleConfig,
) -> Result<(Image, Trajectory)> {
    let mut traj = Trajectory::uniform(s.len(), cfg.n_steps)?;
    let mut out = run(model, std::slice::from_ref(c), s, cfg, &[cfg.seed], Some(&mut traj))?;
    Ok((out.remove(0), traj))
}

/// Samples several priors together, one denoiser call per step for the whole
/// batch. Image `k` uses its own noise stream seeded by `seeds[k]`, so results
/// do not depend on how images are grouped.
pub fn sample_batch(
    model: &dyn Denoiser,
    priors: &[Image],
    s: &NoiseSchedule,
    cfg: &SampleConfig,
    seeds: &[u64],
) -> Result<Vec<Image>> {
    run(model, priors, s, cfg, seeds, None)
}

fn run(
    model: &dyn Denoiser,
    priors: &[Image],
    s: &NoiseSchedule,
    cfg: &SampleConfig,
    seeds: &[u64],
    mut record: Option<&mut Trajectory>,
) -> Result<Vec<Image>> {
    cfg.validate(s)?;
    schedule_matches(model, s)?;
    if priors.is_empty() || priors.len() != seeds.len() {
        return Err(Error::invalid(format!(
            "{} priors and {} seeds given",
            priors.len(),
            seeds.len()
        )));
    }
    let traj = Trajectory::uniform(s.len(), cfg.n_steps)?;
    let c_tensor = stack_images(priors)?;
    let n = priors[0].size();
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&sd| ChaCha8Rng::seed_from_u64(sd)).collect();
    let mut xs: Vec<Image> = rngs
        .iter_mut()
        .map(|rng| {
            let data = Array2::from_shape_simple_fn((n, n), || rng.sample::<f32, _>(StandardNormal));
            Image::new(data, (-1.0, 1.0))
        })
        .collect::<Result<_>>()?;

    for (t, t_prev) in traj.steps() {
        let x_tensor = stack_images(&xs)?;
        let eps = model.predict(&x_tensor, &c_tensor, &vec![t; xs.len()])?;
        for (k, x) in xs.iter_mut().enumerate() {
            let e = Array2::from_shape_vec((n, n), eps.sample(k).to_vec()).map_err(|e| Error::invalid(e.to_string()))?;
            *x = ddim_step(x, &e, t, t_prev, s, &priors[k], cfg.guidance_weight, cfg.eta, &mut rngs[k])?;
        }
        if let Some(traj) = record.as_deref_mut() {
            let e = Array2::from_shape_vec((n, n), eps.sample(0).to_vec()).map_err(|e| Error::invalid(e.to_string()))?;
            let x0 = predict_x0(&Image::new(x_tensor_sample(&x_tensor, 0, n), (-1.0, 1.0))?, &e, t, s)?;
            traj.snapshots.push(guide(&x0, &priors[0], cfg.guidance_weight)?);
        }
    }
    xs.into_iter()
        .map(|x| Image::new(x.data().mapv(|v| v.clamp(-1.0, 1.0)), (-1.0, 1.0)))
        .collect()
}

fn x_tensor_sample(t: &Tensor, k: usize, n: usize) -> Array2<f32> {
    Array2::from_shape_vec((n, n), t.sample(k).to_vec()).expect("square sample")
}

impl Denoiser for Checkpoint {
    fn predict(&self, x_t: &Tensor, c: &Tensor, t: &[usize]) -> Result<Tensor> {
        self.model.predict(x_t, c, t)
    }

    fn schedule_len(&self) -> Option<usize> {
        Some(self.config.schedule.steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;

    fn img(seed: u64, n: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(Array2::from_shape_simple_fn((n, n), || rng.random_range(-0.9..0.9)), (-1.0, 1.0)).unwrap()
    }

    /// Predicts `ε* = (x_t − √ᾱ_t·x0)/√(1−ᾱ_t)` for a known `x0`.
    struct Oracle {
        x0: Tensor,
        s: NoiseSchedule,
    }
    impl Denoiser for Oracle {
        fn predict(&self, x_t: &Tensor, _: &Tensor, t: &[usize]) -> Result<Tensor> {
            let hw = x_t.h() * x_t.w();
            let mut out = Tensor::zeros(x_t.shape());
            for k in 0..x_t.n() {
                let ab = self.s.alpha_bar(t[k]);
                for i in 0..hw {
                    let v = (x_t.data()[k * hw + i] as f64 - ab.sqrt() * self.x0.data()[k * hw + i] as f64)
                        / (1.0 - ab).sqrt();
                    out.data_mut()[k * hw + i] = v as f32;
                }
            }
            Ok(out)
        }
    }

    struct Wild;
    impl Denoiser for Wild {
        fn predict(&self, x_t: &Tensor, c: &Tensor, t: &[usize]) -> Result<Tensor> {
            let mut out = x_t.clone();
            for (o, cv) in out.data_mut().iter_mut().zip(c.data()) {
                *o = (*o * 3.0 + cv).sin() * t[0] as f32;
            }
            Ok(out)
        }
    }

    #[test]
    fn trajectory_is_uniform_and_decreasing() {
        let t = Trajectory::uniform(1000, 50).unwrap();
        assert_eq!(t.timesteps.len(), 50);
        assert_eq!((t.timesteps[0], t.timesteps[49]), (1000, 20));
        assert!(t.timesteps.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(Trajectory::uniform(7, 7).unwrap().timesteps, vec![7, 6, 5, 4, 3, 2, 1]);
        assert_eq!(Trajectory::uniform(10, 3).unwrap().steps().collect::<Vec<_>>(), vec![(10, 6), (6, 3), (3, 0)]);
        assert!(Trajectory::uniform(10, 0).is_err());
        assert!(Trajectory::uniform(10, 11).is_err());
    }

    #[test]
    fn predict_x0_cases() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let (x, x0) = (img(1, 8), img(2, 8));
        let t = 400;
        let ab = s.alpha_bar(t);
        let plain = predict_x0(&x, &Array2::zeros((8, 8)), t, &s).unwrap();
        assert!(plain.data().iter().zip(x.data()).all(|(p, v)| (p - (*v as f64 / ab.sqrt()) as f32).abs() < 1e-6));
        let eps = Zip::from(x.data())
            .and(x0.data())
            .map_collect(|&a, &b| ((a as f64 - ab.sqrt() * b as f64) / (1.0 - ab).sqrt()) as f32);
        let back = predict_x0(&x, &eps, t, &s).unwrap();
        assert!(back.data().iter().zip(x0.data()).all(|(a, b)| (a - b).abs() < 1e-5));
        assert!(predict_x0(&x, &eps, 0, &s).is_err());
        assert!(predict_x0(&x, &eps, 1001, &s).is_err());

        let noise = img(3, 8);
        let xt = crate::diffusion::forward_diffuse(&x0, 10, noise.data(), &s).unwrap();
        let back = predict_x0(&xt, noise.data(), 10, &s).unwrap();
        assert!(back.data().iter().zip(x0.data()).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn guide_limits() {
        let (x, c) = (img(1, 6), img(2, 6));
        assert_eq!(guide(&x, &c, 0.0).unwrap().data(), x.data());
        assert_eq!(guide(&x, &c, 1.0).unwrap().data(), c.data());
        let mid = guide(&x, &c, 0.5).unwrap();
        assert!(Zip::from(mid.data()).and(x.data()).and(c.data()).all(|&m, &a, &b| (m - 0.5 * (a + b)).abs() < 1e-7));
        assert!(guide(&x, &c, 1.5).is_err());
        assert!(guide(&x, &img(2, 4), 0.5).is_err());
    }

    #[test]
    fn guidance_contracts_toward_prior() {
        let (x, c) = (img(5, 8), img(6, 8));
        let dist = |a: &Image| -> f64 {
            a.data().iter().zip(c.data()).map(|(u, v)| ((u - v) as f64).powi(2)).sum::<f64>().sqrt()
        };
        for w in [0.0, 0.05, 0.3, 0.9, 1.0] {
            let g = guide(&x, &c, w).unwrap();
            assert!((dist(&g) - (1.0 - w) * dist(&x)).abs() <= 1e-6 * dist(&x), "w = {w}");
        }
    }

    #[test]
    fn guide_is_quadratic_energy_minimiser() {
        for &(x0, c, w) in &[(0.3f32, -0.5f32, 0.05), (-0.8, 0.9, 0.5), (0.1, 0.7, 0.9), (0.6, 0.2, 0.25)] {
            let wp = w / (1.0 - w);
            let g = guide(
                &Image::new(Array2::from_elem((1, 1), x0), (-1.0, 1.0)).unwrap(),
                &Image::new(Array2::from_elem((1, 1), c), (-1.0, 1.0)).unwrap(),
                w,
            )
            .unwrap()
            .data()[[0, 0]] as f64;
            let res = 1e-5;
            let best = (0..=200_000)
                .map(|k| -1.0 + k as f64 * res)
                .min_by(|a, b| {
                    let e = |x: f64| (x - x0 as f64).powi(2) + wp * (x - c as f64).powi(2);
                    e(*a).total_cmp(&e(*b))
                })
                .unwrap();
            assert!((best - g).abs() <= res, "x0 {x0} c {c} w {w}: grid {best} vs guide {g}");
        }
    }

    #[test]
    fn terminal_step_returns_guided_estimate() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let (x, c, e) = (img(1, 8), img(2, 8), img(3, 8));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for w in [0.0, 0.05, 1.0] {
            let step = ddim_step(&x, e.data(), 20, 0, &s, &c, w, 0.0, &mut rng).unwrap();
            let expect = guide(&predict_x0(&x, e.data(), 20, &s).unwrap(), &c, w).unwrap();
            assert_eq!(step, expect);
        }
        assert!(ddim_step(&x, e.data(), 20, 20, &s, &c, 0.0, 0.0, &mut rng).is_err());
        assert!(ddim_step(&x, e.data(), 20, 30, &s, &c, 0.0, 0.0, &mut rng).is_err());
    }

    #[test]
    fn unguided_step_is_plain_ddim() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let (x, c, e) = (img(1, 8), img(2, 8), img(3, 8));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (t, tp) = (500, 480);
        let out = ddim_step(&x, e.data(), t, tp, &s, &c, 0.0, 0.0, &mut rng).unwrap();
        let (ab, abp) = (s.alpha_bar(t), s.alpha_bar(tp));
        for ((&o, &xv), &ev) in out.data().iter().zip(x.data()).zip(e.data()) {
            let x0 = (xv as f64 - (1.0 - ab).sqrt() * ev as f64) / ab.sqrt();
            let want = abp.sqrt() * x0 + (1.0 - abp).sqrt() * ev as f64;
            assert!((o as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn stochastic_step_uses_fresh_noise() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let (x, c, e) = (img(1, 8), img(2, 8), img(3, 8));
        let a = ddim_step(&x, e.data(), 500, 300, &s, &c, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let b = ddim_step(&x, e.data(), 500, 300, &s, &c, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let d = ddim_step(&x, e.data(), 500, 300, &s, &c, 0.0, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_ne!(a, b);
        assert_ne!(a, d);
    }

    #[test]
    fn oracle_denoiser_recovers_target() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let x0 = img(9, 16);
        let oracle = Oracle {
            x0: stack_images([&x0]).unwrap(),
            s: s.clone(),
        };
        for steps in [3, 50] {
            let cfg = SampleConfig {
                n_steps: steps,
                guidance_weight: 0.0,
                seed: 4,
                eta: 0.0,
            };
            let out = sample(&oracle, &img(10, 16), &s, &cfg).unwrap();
            let err = out.data().iter().zip(x0.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(err < 1e-5, "{steps} steps: {err}");
        }
    }

    #[test]
    fn full_guidance_returns_prior() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let c = img(2, 16);
        let cfg = SampleConfig {
            n_steps: 10,
            guidance_weight: 1.0,
            seed: 1,
            eta: 0.0,
        };
        assert_eq!(sample(&Wild, &c, &s, &cfg).unwrap(), c);
    }

    #[test]
    fn deterministic_and_batch_invariant() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let (c1, c2) = (img(2, 16), img(3, 16));
        let cfg = SampleConfig {
            n_steps: 5,
            guidance_weight: 0.05,
            seed: 7,
            eta: 0.0,
        };
        let a = sample(&Wild, &c1, &s, &cfg).unwrap();
        assert_eq!(a, sample(&Wild, &c1, &s, &cfg).unwrap());
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let both = sample_batch(&Wild, &[c1.clone(), c2], &s, &cfg, &[7, 8]).unwrap();
        assert_eq!(both[0], a);
        let (_, traj) = sample_trajectory(&Wild, &c1, &s, &cfg).unwrap();
        assert_eq!(traj.snapshots.len(), 5);
        assert_eq!(traj.timesteps, vec![100, 80, 60, 40, 20]);
    }

    #[test]
    fn rejects_bad_configs() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let c = img(2, 16);
        for cfg in [
            SampleConfig { n_steps: 0, ..Default::default() },
            SampleConfig { n_steps: 101, ..Default::default() },
            SampleConfig { guidance_weight: -0.1, ..Default::default() },
            SampleConfig { eta: -1.0, ..Default::default() },
        ] {
            assert!(sample(&Wild, &c, &s, &cfg).is_err());
        }
    }
}
