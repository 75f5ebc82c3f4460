//! The optimizer loop: Adam with an inverse-square-root learning-rate
//! schedule, length-aware batch packing, periodic checkpoints, and
//! divergence handling that preserves the last good parameters.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::util::derive_seed;

use super::model::{
    dropout_seed, init_model, loss_and_gradients_inner, TransformerConfig, TranslationModel,
    UnitPair,
};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.98;
const ADAM_EPS: f64 = 1e-9;

/// Examples are shuffled each epoch, then sorted by length inside windows
/// of this many examples so batches hold similar-sized sentences without
/// fixing the global order.
const SORT_WINDOW: usize = 256;

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    /// Multiplier on the inverse-square-root schedule.
    pub peak_lr_factor: f64,
    pub warmup_steps: usize,
    /// Soft cap on source plus target units per optimizer step.
    pub batch_tokens: usize,
    pub total_steps: usize,
    pub checkpoint_every: usize,
    pub label_smoothing: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            peak_lr_factor: 0.2,
            warmup_steps: 400,
            batch_tokens: 1024,
            total_steps: 2000,
            checkpoint_every: 500,
            label_smoothing: 0.1,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr_factor.is_finite() && self.peak_lr_factor > 0.0) {
            return Err(Error::Config("peak_lr_factor must be positive".into()));
        }
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        if self.batch_tokens == 0 {
            return Err(Error::Config("batch_tokens must be positive".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if self.checkpoint_every == 0 || self.checkpoint_every > self.total_steps {
            return Err(Error::Config(
                "checkpoint_every must lie in 1..=total_steps".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Learning rate at a 1-based step: factor * d^-0.5 * min(step^-0.5,
/// step * warmup^-1.5). Rises linearly through the warmup, then decays
/// as the inverse square root of the step.
pub fn learning_rate(config: &TrainingConfig, model_dim: usize, step: usize) -> f64 {
    let s = step as f64;
    let w = config.warmup_steps as f64;
    config.peak_lr_factor * (model_dim as f64).powf(-0.5) * (s.powf(-0.5)).min(s * w.powf(-1.5))
}

/// Groups example indices into batches for one epoch: a seeded shuffle,
/// a length sort inside fixed windows, then greedy packing until adding
/// another example would exceed `batch_tokens`. Every batch holds at
/// least one example, and every index appears exactly once.
pub(super) fn plan_batches(weights: &[usize], batch_tokens: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    for window in order.chunks_mut(SORT_WINDOW) {
        window.sort_by_key(|&i| (weights[i], i));
    }
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut used = 0usize;
    for i in order {
        if !current.is_empty() && used + weights[i] > batch_tokens {
            batches.push(std::mem::take(&mut current));
            used = 0;
        }
        used += weights[i];
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// A snapshot of the parameters after a given optimizer step.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: usize,
    pub model: TranslationModel,
}

/// What a training run produced.
#[derive(Debug)]
pub struct TrainOutcome {
    /// Snapshots at every `checkpoint_every` steps plus the final step,
    /// in step order without duplicates.
    pub checkpoints: Vec<Checkpoint>,
    /// Training loss per optimizer step, 1-based steps.
    pub losses: Vec<(usize, f64)>,
    /// Last step whose update was applied.
    pub final_step: usize,
    /// Set when the loss left the finite range at this step; the last
    /// checkpoint then holds the parameters from just before it.
    pub diverged_at: Option<usize>,
}

struct Adam {
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl Adam {
    fn new() -> Self {
        Adam { m: BTreeMap::new(), v: BTreeMap::new() }
    }

    fn update(
        &mut self,
        params: &mut BTreeMap<String, Array2<f64>>,
        grads: &BTreeMap<String, Array2<f64>>,
        lr: f64,
        step: usize,
    ) {
        let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
        for (name, g) in grads {
            let m = self.m.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
            let p = params.get_mut(name).expect("gradient for unknown parameter");
            for ((p, (m, v)), &g) in
                p.iter_mut().zip(m.iter_mut().zip(v.iter_mut())).zip(g.iter())
            {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Trains a model on unit pairs. With `init` the run continues from an
/// existing model (its configuration must match); otherwise parameters are
/// freshly initialized from the run seed. The run is bit-reproducible:
/// batching, initialization, and dropout noise all derive from
/// `train_config.seed`, and nothing depends on wall-clock or thread count.
///
/// A non-finite loss at step s ends the run early with `diverged_at =
/// Some(s)` and the step s-1 parameters as the last checkpoint.
pub fn train(
    pairs: &[UnitPair],
    model_config: &TransformerConfig,
    train_config: &TrainingConfig,
    subword_fingerprint: u64,
    init: Option<TranslationModel>,
) -> Result<TrainOutcome> {
    model_config.validate()?;
    train_config.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyData("training requires at least one sentence pair".into()));
    }
    for (src, tgt) in pairs {
        let worst = (src.len() + 1).max(tgt.len() + 1);
        if worst > model_config.max_positions {
            return Err(Error::Length { len: worst, max: model_config.max_positions });
        }
    }

    let mut model = match init {
        Some(m) => {
            if m.config != *model_config {
                return Err(Error::Config(
                    "initial model does not match the requested architecture".into(),
                ));
            }
            if m.subword_fingerprint != subword_fingerprint {
                return Err(Error::Config(
                    "initial model was built for a different subword inventory".into(),
                ));
            }
            m
        }
        None => init_model(model_config, subword_fingerprint, derive_seed(train_config.seed, 0))?,
    };

    let weights: Vec<usize> = pairs.iter().map(|(s, t)| s.len() + t.len() + 2).collect();
    let mut adam = Adam::new();
    let mut checkpoints: Vec<Checkpoint> = Vec::new();
    let mut losses = Vec::with_capacity(train_config.total_steps);
    let mut step = 0usize;
    let dropout_on = model_config.dropout > 0.0;

    'epochs: for epoch in 0.. {
        let plan = plan_batches(
            &weights,
            train_config.batch_tokens,
            derive_seed(train_config.seed, 1 + epoch),
        );
        for batch_indices in plan {
            step += 1;
            let batch: Vec<UnitPair> =
                batch_indices.iter().map(|&i| pairs[i].clone()).collect();
            let seeds: Vec<u64> = (0..batch.len())
                .map(|i| dropout_seed(train_config.seed, step, i))
                .collect();
            let result = loss_and_gradients_inner(
                &model,
                &batch,
                train_config.label_smoothing,
                dropout_on.then_some(seeds.as_slice()),
            );
            let (loss, grads) = match result {
                Ok(ok) => ok,
                Err(Error::Numeric(reason)) => {
                    log::warn!("stopping at step {step}: {reason}");
                    if checkpoints.last().map(|c| c.step) != Some(step - 1) {
                        checkpoints.push(Checkpoint { step: step - 1, model });
                    }
                    return Ok(TrainOutcome {
                        checkpoints,
                        losses,
                        final_step: step - 1,
                        diverged_at: Some(step),
                    });
                }
                Err(e) => return Err(e),
            };
            losses.push((step, loss));
            let lr = learning_rate(train_config, model_config.model_dim, step);
            adam.update(&mut model.params, &grads, lr, step);
            if step % train_config.checkpoint_every == 0 {
                checkpoints.push(Checkpoint { step, model: model.clone() });
            }
            if step == train_config.total_steps {
                break 'epochs;
            }
        }
    }
    if checkpoints.last().map(|c| c.step) != Some(step) {
        checkpoints.push(Checkpoint { step, model });
    }
    Ok(TrainOutcome { checkpoints, losses, final_step: step, diverged_at: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subword::VARIETY_B_ID;

    fn tiny_config() -> TransformerConfig {
        TransformerConfig {
            num_layers: 1,
            model_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            dropout: 0.1,
            max_positions: 72,
            vocab_size: 12,
            share_embeddings: true,
        }
    }

    fn tiny_pairs() -> Vec<UnitPair> {
        vec![
            (vec![6, 7], vec![8, 9]),
            (vec![7, 8], vec![9, 10]),
            (vec![8, 9, 10], vec![6]),
            (vec![VARIETY_B_ID, 6, 10], vec![11, 7]),
        ]
    }

    #[test]
    fn training_config_validation() {
        assert!(TrainingConfig::default().validate().is_ok());
        let bad = [
            TrainingConfig { peak_lr_factor: 0.0, ..Default::default() },
            TrainingConfig { warmup_steps: 0, ..Default::default() },
            TrainingConfig { batch_tokens: 0, ..Default::default() },
            TrainingConfig { total_steps: 0, ..Default::default() },
            TrainingConfig { checkpoint_every: 2001, ..Default::default() },
            TrainingConfig { label_smoothing: -0.1, ..Default::default() },
        ];
        for b in bad {
            assert!(matches!(b.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn learning_rate_warms_up_then_decays() {
        let cfg = TrainingConfig { warmup_steps: 100, ..Default::default() };
        let lr = |s| learning_rate(&cfg, 64, s);
        assert!(lr(1) < lr(50) && lr(50) < lr(100));
        assert!(lr(100) > lr(400) && lr(400) > lr(1600));
        // Peak value at the warmup boundary.
        let expected = 0.2 * 64f64.powf(-0.5) * 100f64.powf(-0.5);
        assert!((lr(100) - expected).abs() < 1e-12);
        // Linear in the warmup phase.
        assert!((lr(50) - expected * 0.5).abs() < 1e-12);
    }

    #[test]
    fn batch_plan_partitions_all_examples() {
        let weights: Vec<usize> = (0..300).map(|i| 4 + (i * 7) % 20).collect();
        let plan = plan_batches(&weights, 64, 9);
        let mut seen: Vec<usize> = plan.iter().flatten().copied().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..300).collect::<Vec<_>>());
        for batch in &plan {
            assert!(!batch.is_empty());
            let tokens: usize = batch.iter().map(|&i| weights[i]).sum();
            assert!(batch.len() == 1 || tokens <= 64, "overfull batch: {tokens}");
        }
        assert_eq!(plan, plan_batches(&weights, 64, 9));
        assert_ne!(plan, plan_batches(&weights, 64, 10));
        // An example wider than the cap still travels alone.
        let plan = plan_batches(&[100, 3, 100], 64, 0);
        assert_eq!(plan.iter().map(Vec::len).sum::<usize>(), 3);
    }

    #[test]
    fn training_reduces_loss_and_checkpoints_on_schedule() {
        let out = train(
            &tiny_pairs(),
            &tiny_config(),
            &TrainingConfig {
                total_steps: 120,
                checkpoint_every: 50,
                warmup_steps: 40,
                batch_tokens: 64,
                ..Default::default()
            },
            77,
            None,
        )
        .unwrap();
        assert_eq!(out.final_step, 120);
        assert_eq!(out.diverged_at, None);
        assert_eq!(out.checkpoints.iter().map(|c| c.step).collect::<Vec<_>>(), vec![50, 100, 120]);
        assert_eq!(out.losses.len(), 120);
        let first = out.losses[0].1;
        let last = out.losses.last().unwrap().1;
        assert!(last < first, "loss did not fall: {first} -> {last}");
        assert_eq!(out.checkpoints[2].model.subword_fingerprint, 77);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let cfg = TrainingConfig {
            total_steps: 30,
            checkpoint_every: 30,
            batch_tokens: 48,
            ..Default::default()
        };
        let a = train(&tiny_pairs(), &tiny_config(), &cfg, 0, None).unwrap();
        let b = train(&tiny_pairs(), &tiny_config(), &cfg, 0, None).unwrap();
        assert_eq!(a.losses, b.losses);
        let (ma, mb) = (&a.checkpoints[0].model, &b.checkpoints[0].model);
        for (name, m) in &ma.params {
            assert_eq!(m, &mb.params[name], "{name} differs between identical runs");
        }
        // A different seed changes the trajectory.
        let c = train(
            &tiny_pairs(),
            &tiny_config(),
            &TrainingConfig { seed: 1, ..cfg },
            0,
            None,
        )
        .unwrap();
        assert_ne!(a.losses, c.losses);
    }

    #[test]
    fn divergence_preserves_the_last_good_model() {
        let mut poisoned = init_model(&tiny_config(), 0, 1).unwrap();
        poisoned.params.get_mut("embed").unwrap()[[6, 0]] = f64::INFINITY;
        let reference = poisoned.clone();
        let out = train(
            &tiny_pairs(),
            &tiny_config(),
            &TrainingConfig { total_steps: 10, checkpoint_every: 5, ..Default::default() },
            0,
            Some(poisoned),
        )
        .unwrap();
        assert_eq!(out.diverged_at, Some(1));
        assert_eq!(out.final_step, 0);
        assert_eq!(out.checkpoints.len(), 1);
        assert_eq!(out.checkpoints[0].step, 0);
        // The retained model is exactly the pre-step state.
        for (name, m) in &reference.params {
            assert_eq!(m, &out.checkpoints[0].model.params[name]);
        }
        assert!(out.losses.is_empty());
    }

    #[test]
    fn continuation_requires_a_matching_architecture() {
        let other = init_model(
            &TransformerConfig { model_dim: 32, ffn_dim: 64, ..tiny_config() },
            0,
            1,
        )
        .unwrap();
        let err = train(
            &tiny_pairs(),
            &tiny_config(),
            &TrainingConfig { total_steps: 5, checkpoint_every: 5, ..Default::default() },
            0,
            Some(other),
        );
        assert!(matches!(err, Err(Error::Config(_))));
        let wrong_subword = init_model(&tiny_config(), 999, 1).unwrap();
        let err = train(
            &tiny_pairs(),
            &tiny_config(),
            &TrainingConfig { total_steps: 5, checkpoint_every: 5, ..Default::default() },
            0,
            Some(wrong_subword),
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn training_rejects_oversized_sentences() {
        let pairs = vec![(vec![6u32; 80], vec![7u32, 8])];
        let err = train(
            &pairs,
            &tiny_config(),
            &TrainingConfig { total_steps: 1, checkpoint_every: 1, ..Default::default() },
            0,
            None,
        );
        assert!(matches!(err, Err(Error::Length { len: 81, max: 72 })));
    }
}
