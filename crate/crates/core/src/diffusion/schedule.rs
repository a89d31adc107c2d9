use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tomo::Image;

/// Linear-β DDPM schedule. Index 0 of `alpha_bar` is the clean state.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    params: ScheduleParams,
}

/// What is needed to rebuild a [`NoiseSchedule`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("schedule needs T >= 1"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_min <= beta_max < 1, got beta_min = {beta_min}, beta_max = {beta_max}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|k| {
            if steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * k as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    for b in &beta {
        let last = *alpha_bar.last().unwrap();
        alpha_bar.push(last * (1.0 - b));
    }
    Ok(NoiseSchedule {
        beta,
        alpha_bar,
        params: ScheduleParams {
            steps,
            beta_min,
            beta_max,
        },
    })
}

impl NoiseSchedule {
    pub fn from_params(p: ScheduleParams) -> Result<Self> {
        make_schedule(p.steps, p.beta_min, p.beta_max)
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    /// `T`.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// `β_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// `ᾱ_t` for `0 <= t <= T`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub(crate) fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::invalid(format!("timestep {t} outside [1, {}]", self.len())));
        }
        Ok(())
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn forward_diffuse(x0: &Image, t: usize, eps: &ndarray::Array2<f32>, s: &NoiseSchedule) -> Result<Image> {
    s.check_t(t)?;
    if eps.dim() != x0.data().dim() {
        return Err(Error::shape(format!("{:?}", x0.data().dim()), format!("{:?}", eps.dim())));
    }
    let (a, b) = (s.alpha_bar(t).sqrt() as f32, (1.0 - s.alpha_bar(t)).sqrt() as f32);
    let data = ndarray::Zip::from(x0.data()).and(eps).map_collect(|&x, &e| a * x + b * e);
    Image::new(data, x0.value_range())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn hand_computed_products() {
        let s = make_schedule(1, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-12);
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-12);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-12);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn default_schedule_is_monotone() {
        let p = ScheduleParams::default();
        let s = NoiseSchedule::from_params(p).unwrap();
        assert_eq!(s.len(), 1000);
        assert!((s.beta(1) - 1e-4).abs() < 1e-15 && (s.beta(1000) - 0.02).abs() < 1e-15);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            if t > 1 {
                assert!(s.beta(t) > s.beta(t - 1));
            }
        }
        assert!(s.alpha_bar(1000) < s.alpha_bar(1) && s.alpha_bar(1) < 1.0);
    }

    #[test]
    fn rejects_invalid_ranges() {
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn diffuse_limits() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let x0 = Image::new(Array2::from_shape_fn((4, 4), |(i, j)| (i as f32 - j as f32) / 4.0), (-1.0, 1.0)).unwrap();
        let eps = Array2::from_shape_fn((4, 4), |(i, j)| (i * 4 + j) as f32 / 8.0 - 1.0);
        let t = 37;
        let (a, b) = (s.alpha_bar(t).sqrt() as f32, (1.0 - s.alpha_bar(t)).sqrt() as f32);
        let only_signal = forward_diffuse(&x0, t, &Array2::zeros((4, 4)), &s).unwrap();
        assert_eq!(only_signal.data(), &x0.data().mapv(|v| a * v));
        let only_noise = forward_diffuse(&Image::zeros(4, (-1.0, 1.0)), t, &eps, &s).unwrap();
        assert_eq!(only_noise.data(), &eps.mapv(|v| b * v));
        assert!(forward_diffuse(&x0, 0, &eps, &s).is_err());
        assert!(forward_diffuse(&x0, 101, &eps, &s).is_err());
        assert!(forward_diffuse(&x0, 5, &Array2::zeros((3, 4)), &s).is_err());
    }

    #[test]
    fn monte_carlo_marginals() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let t = 300;
        let x0v = 0.6f32;
        let x0 = Image::new(Array2::from_elem((1, 1), x0v), (-1.0, 1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                let e: f32 = StandardNormal.sample(&mut rng);
                forward_diffuse(&x0, t, &Array2::from_elem((1, 1), e), &s).unwrap().data()[[0, 0]] as f64
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let (mu, sigma2) = (s.alpha_bar(t).sqrt() * x0v as f64, 1.0 - s.alpha_bar(t));
        let se_mean = (sigma2 / n as f64).sqrt();
        let se_var = sigma2 * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - mu).abs() < 3.0 * se_mean, "mean {mean} vs {mu}");
        assert!((var - sigma2).abs() < 3.0 * se_var, "var {var} vs {sigma2}");
    }
}
