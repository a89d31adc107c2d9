use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{noisy_batch, Checkpoint, NoiseSchedule, ScheduleParams, UNet, UNetConfig};
use crate::data::PairedSample;
use crate::error::{Error, Result};
use crate::nn::{Adam, Graph};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Optimiser steps.
    pub steps: usize,
    pub schedule: ScheduleParams,
    pub model: UNetConfig,
    /// Seeds initialisation, batch order and the per-step noise draws.
    pub seed: u64,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 8,
            steps: 2000,
            schedule: ScheduleParams::default(),
            model: UNetConfig::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        NoiseSchedule::from_params(self.schedule)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    /// Batch loss at every step.
    pub losses: Vec<f64>,
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0xD6E8_FEB8_6659_FD93)
}

/// Adam on the noise-prediction loss. Batches are drawn without replacement
/// from a fresh seeded permutation each epoch.
///
/// `on_step(step, loss)` is called after every update. When `checkpoint_dir`
/// is given and `checkpoint_every > 0`, intermediate checkpoints are written
/// there as `step_NNNNNN.ckpt`.
pub fn train(
    dataset: &[PairedSample],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutput> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let schedule = NoiseSchedule::from_params(cfg.schedule)?;
    let mut model = UNet::new(cfg.model, cfg.seed)?;
    let mut adam = Adam::new(model.params(), cfg.learning_rate as f32);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut picked = Vec::with_capacity(cfg.batch_size);
        while picked.len() < cfg.batch_size.min(dataset.len()) {
            if cursor == order.len() {
                order = (0..dataset.len()).collect();
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            picked.push(&dataset[order[cursor]]);
            cursor += 1;
        }
        let batch = noisy_batch(picked, &schedule, step_seed(cfg.seed, step))?;
        let mut g = Graph::new();
        let pred = model.forward(&mut g, &batch.x_t, &batch.c, &batch.t)?;
        let target = g.input(batch.eps);
        let loss_var = g.mse(pred, target);
        let loss = g.value(loss_var).data()[0] as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let grads = g.backward(loss_var, model.params());
        drop(g);
        adam.step(model.params_mut(), &grads);
        losses.push(loss);
        on_step(step, loss);

        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
                let ckpt = Checkpoint::new(*cfg, step + 1, model.clone());
                ckpt.save(&dir.join(format!("step_{:06}.ckpt", step + 1)))?;
            }
        }
    }
    Ok(TrainOutput {
        checkpoint: Checkpoint::new(*cfg, cfg.steps, model),
        losses,
    })
}
