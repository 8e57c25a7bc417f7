//! Masked-reconstruction pre-training loop.
//!
//! Every step draws a fresh batch of synthetic volumes and a fresh mask
//! pyramid per element, averages the per-element gradients in a fixed order
//! and applies one AdamW update under a cosine schedule.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdamW, CosineSchedule};
use crate::error::Error;
use crate::model::HybridModel;
use crate::real::Real;
use crate::synth::{gen_volume, SyntheticVolumeSpec};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub mask_ratio: f64,
    pub mask_seed: u64,
    pub data_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            lr: 1e-4,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            mask_ratio: 0.75,
            mask_seed: 0,
            data_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based.
    pub step: usize,
    pub lr: f64,
    /// Batch-mean masked MSE before the update.
    pub loss: f64,
}

/// Seeds for the volumes and masks of one step.
pub fn step_seeds(cfg: &TrainConfig, step: usize) -> Vec<(u64, u64)> {
    let mut data = ChaCha8Rng::seed_from_u64(cfg.data_seed);
    let mut mask = ChaCha8Rng::seed_from_u64(cfg.mask_seed);
    data.set_stream(step as u64);
    mask.set_stream(step as u64);
    (0..cfg.batch_size).map(|_| (data.gen(), mask.gen())).collect()
}

/// Runs `cfg.steps` updates on `model`, reporting each step to `on_step`;
/// an error from the callback stops training.
pub fn train<T: Real, E: From<Error>>(
    model: &mut HybridModel<T>,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord) -> core::result::Result<(), E>,
) -> core::result::Result<Vec<StepRecord>, E> {
    if cfg.batch_size == 0 {
        return Err(Error::invalid("train", "batch size must be positive").into());
    }
    let mut opt = AdamW::<T>::new((T::lit(cfg.betas.0), T::lit(cfg.betas.1)), T::lit(cfg.weight_decay));
    let schedule = CosineSchedule { base_lr: cfg.lr, total_steps: cfg.steps };
    let grid = model.config().volume;
    let scale = T::one() / T::from_usize(cfg.batch_size);
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let lr = schedule.lr_at(step);
        model.params_mut().zero_grad();
        let mut total = T::zero();
        for (data_seed, mask_seed) in step_seeds(cfg, step) {
            let volume = gen_volume::<T>(&SyntheticVolumeSpec::new(grid, data_seed));
            let pyramid = model.sample_pyramid(cfg.mask_ratio, mask_seed)?;
            let (loss, grads) = model.loss_and_grads(&volume, &pyramid)?;
            model.params_mut().accumulate_scaled(&grads, scale)?;
            total += loss;
        }
        let rec = StepRecord { step: step + 1, lr, loss: (total * scale).as_f64() };
        opt.step(model.params_mut(), T::lit(lr))?;
        on_step(&rec)?;
        records.push(rec);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::Grid3;
    use crate::model::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig { volume: Grid3::cube(8), model_dim: 8, depth: 1, state_dim: 4, cnn_width: 4, decoder_width: 8, ..ModelConfig::default() }
    }

    #[test]
    fn deterministic_records() {
        let cfg = TrainConfig { steps: 3, batch_size: 2, lr: 1e-3, ..TrainConfig::default() };
        let run = || {
            let mut m = HybridModel::<f64>::new(tiny(), 1).unwrap();
            train(&mut m, &cfg, |_| Ok::<_, Error>(())).unwrap()
        };
        let a = run();
        assert_eq!(a.len(), 3);
        assert_eq!(a, run());
        assert_eq!(a[0].lr, 1e-3);
    }

    #[test]
    fn zero_steps_leave_params_alone() {
        let mut m = HybridModel::<f64>::new(tiny(), 2).unwrap();
        let before = m.params().clone();
        let cfg = TrainConfig { steps: 0, ..TrainConfig::default() };
        assert!(train(&mut m, &cfg, |_| Ok::<_, Error>(())).unwrap().is_empty());
        assert_eq!(m.params(), &before);
    }

    #[test]
    fn batches_change_between_steps() {
        let cfg = TrainConfig::default();
        assert_ne!(step_seeds(&cfg, 0), step_seeds(&cfg, 1));
        assert_eq!(step_seeds(&cfg, 4), step_seeds(&cfg, 4));
    }

    #[test]
    fn a_prime_stays_negative() {
        let mut m = HybridModel::<f64>::new(tiny(), 3).unwrap();
        let cfg = TrainConfig { steps: 3, batch_size: 1, lr: 5.0, ..TrainConfig::default() };
        train(&mut m, &cfg, |_| Ok::<_, Error>(())).unwrap();
        let id = m.params().find("decoder.toki.a_prime").unwrap();
        assert!(m.params().get(id).data().iter().all(|&v| v <= -crate::model::A_PRIME_MARGIN));
    }
}
