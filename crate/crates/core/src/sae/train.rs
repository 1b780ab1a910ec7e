// SPDX-License-Identifier: MIT OR Apache-2.0

//! SAE training loop.

use std::fmt::Write as _;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use super::loss::loss_and_grads;
use super::optim::{Adam, LrSchedule};
use super::{init_sae, normalize_rows, SaeModel, Variant};
use crate::activation_store::{iterate_batches, ActivationDataset, TokenFilter};
use crate::error::{Error, Result};

/// Activation level a feature must exceed to count as firing.
pub const FIRING_THRESHOLD: f32 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub expansion_factor: usize,
    pub learning_rate: f32,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub variant: Variant,
    pub ghost_grads: bool,
    /// Tokens without firing after which a feature counts as dead.
    pub ghost_window_tokens: usize,
    pub token_filter: TokenFilter,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            expansion_factor: 64,
            learning_rate: 4e-4,
            warmup_steps: 200,
            total_steps: 2000,
            batch_size: 4096,
            variant: Variant::TopK { k: 64 },
            ghost_grads: true,
            ghost_window_tokens: 200_000,
            token_filter: TokenFilter::All,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(Error::invalid(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.batch_size == 0 || self.expansion_factor == 0 {
            return Err(Error::invalid("batch_size and expansion_factor must be positive"));
        }
        match self.variant {
            Variant::TopK { k: 0 } => Err(Error::invalid("TopK k must be positive")),
            Variant::Vanilla { l1_coeff } if !(l1_coeff >= 0.0) => {
                Err(Error::invalid("l1_coeff must be non-negative"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f32,
    pub mse: f64,
    pub l1: f64,
    pub ghost: f64,
    pub total: f64,
    pub live_features: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,mse,l1,ghost,total,live_features\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.step, r.lr, r.mse, r.l1, r.ghost, r.total, r.live_features
            );
        }
        out
    }
}

/// Trains an SAE on the tokens of `dataset` selected by the config's filter.
///
/// Single-threaded and deterministic for a given dataset and config. Each
/// step removes the radial component of every decoder-row gradient, applies
/// Adam, and renormalises decoder rows to unit length.
pub fn train(dataset: &ActivationDataset, config: &TrainConfig) -> Result<(SaeModel, TrainLog)> {
    config.validate()?;
    if dataset.n_samples() == 0 {
        return Err(Error::EmptySelection("training dataset has no samples".into()));
    }
    let mut sae = init_sae(dataset.d_model(), config.expansion_factor, config.variant, config.seed)?;
    let schedule = LrSchedule {
        peak: config.learning_rate,
        warmup: config.warmup_steps,
        total: config.total_steps,
    };
    let mut adam = Adam::new(&sae.params);
    let d_sae = sae.d_sae();
    let mut since_fired = vec![0usize; d_sae];
    let mut log = TrainLog::default();

    let mut epoch = 0u64;
    let mut batches = iterate_batches(
        dataset,
        config.batch_size,
        config.seed.wrapping_add(epoch),
        config.token_filter,
    )?;
    for step in 1..=config.total_steps {
        let batch = match batches.next() {
            Some(b) => b,
            None => {
                epoch += 1;
                batches = iterate_batches(
                    dataset,
                    config.batch_size,
                    config.seed.wrapping_add(epoch),
                    config.token_filter,
                )?;
                batches.next().expect("non-empty epoch")
            }
        };

        let dead: Vec<bool> = since_fired
            .iter()
            .map(|&n| n >= config.ghost_window_tokens)
            .collect();
        let use_ghost = config.ghost_grads && dead.iter().any(|&d| d);
        let (parts, mut grads, fwd) = loss_and_grads(
            &sae.params,
            &sae.variant,
            batch.view(),
            use_ghost.then_some(dead.as_slice()),
            None,
        );
        if !parts.total.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: parts.total,
            });
        }

        // Tangent-space projection of decoder-row gradients.
        for (mut g, w) in grads
            .w_dec
            .outer_iter_mut()
            .zip(sae.params.w_dec.outer_iter())
        {
            let radial = g.dot(&w);
            g.scaled_add(-radial, &w);
        }
        let lr = schedule.at(step);
        adam.step(&mut sae.params, &grads, lr);
        normalize_rows(&mut sae.params.w_dec);

        let rows = batch.nrows();
        for (j, col) in fwd.f.axis_iter(Axis(1)).enumerate() {
            if col.iter().any(|&v| v > FIRING_THRESHOLD) {
                since_fired[j] = 0;
            } else {
                since_fired[j] = since_fired[j].saturating_add(rows);
            }
        }
        let live = since_fired
            .iter()
            .filter(|&&n| n < config.ghost_window_tokens)
            .count();
        log.records.push(StepRecord {
            step,
            lr,
            mse: parts.mse,
            l1: parts.l1,
            ghost: parts.ghost,
            total: parts.total,
            live_features: live,
        });
    }
    Ok((sae, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation_store::{synth_dictionary_dataset, SynthDictSpec};

    fn small_data() -> ActivationDataset {
        synth_dictionary_dataset(&SynthDictSpec {
            n_true_features: 16,
            d_model: 8,
            tokens_per_sample: 5,
            n_samples: 40,
            active_per_token: 2,
            noise_sigma: 0.01,
            seed: 3,
        })
        .unwrap()
        .0
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            expansion_factor: 4,
            learning_rate: 3e-3,
            warmup_steps: 10,
            total_steps: 60,
            batch_size: 32,
            variant: Variant::TopK { k: 2 },
            ghost_window_tokens: 500,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn log_has_one_record_per_step_and_decoder_stays_unit() {
        let (sae, log) = train(&small_data(), &cfg()).unwrap();
        assert_eq!(log.records.len(), 60);
        assert!(sae.max_decoder_norm_error() < 1e-5);
        assert_eq!(log.to_csv().lines().count(), 61);
        let first = log.records[0].mse;
        let last = log.records[59].mse;
        assert!(last < first, "mse did not decrease: {first} -> {last}");
    }

    #[test]
    fn training_is_deterministic() {
        let data = small_data();
        let (a, la) = train(&data, &cfg()).unwrap();
        let (b, lb) = train(&data, &cfg()).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        c.warmup_steps = 60;
        assert!(train(&small_data(), &c).is_err());
        let mut c = cfg();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut data = small_data();
        data.activations[[0, 0, 0]] = 1e30;
        let mut c = cfg();
        c.variant = Variant::Vanilla { l1_coeff: 1e-3 };
        c.batch_size = 1000;
        let err = train(&data, &c).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn ghost_grads_run_when_features_die() {
        let mut c = cfg();
        c.ghost_window_tokens = 32;
        c.total_steps = 40;
        let (_, log) = train(&small_data(), &c).unwrap();
        assert!(log.records.iter().any(|r| r.ghost > 0.0));
    }
}
