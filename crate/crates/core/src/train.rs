//! Natural training and PGD-based min-max adversarial training.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::KeyValues;
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::nn::{Model, TrainingMode};
use crate::tensor::{ops, Tape, Tensor};

/// Examples per independent PGD tape. Fixed so results do not depend on the
/// thread count.
const PGD_CHUNK: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PgdConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
}

impl PgdConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        PgdConfig {
            epsilon,
            steps: 40,
            step_size: 0.01,
            random_start: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(invalid!("epsilon {} outside [0, 1)", self.epsilon));
        }
        if self.steps == 0 {
            return Err(invalid!("pgd_steps must be at least 1"));
        }
        if !(self.step_size > 0.0) {
            return Err(invalid!("pgd_step_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub adversarial: Option<PgdConfig>,
    /// Epochs over which the PGD radius ramps linearly from 0 to `epsilon`, batch by batch.
    pub epsilon_warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 50,
            learning_rate: 1e-4,
            optimizer: Optimizer::adam(),
            seed: 0,
            adversarial: None,
            epsilon_warmup_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid!("batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(invalid!("learning_rate must be non-negative"));
        }
        if let Some(adv) = &self.adversarial {
            adv.validate()?;
        }
        Ok(())
    }

    /// Reads `key = value` pairs; unknown keys are rejected.
    pub fn from_key_values(kv: &KeyValues) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        kv.check_known(&[
            "epochs",
            "batch_size",
            "learning_rate",
            "optimizer",
            "seed",
            "adversarial",
            "epsilon",
            "pgd_steps",
            "pgd_step_size",
            "random_start",
            "epsilon_warmup_epochs",
        ])?;
        if let Some(v) = kv.value("epochs")? {
            cfg.epochs = v;
        }
        if let Some(v) = kv.value("batch_size")? {
            cfg.batch_size = v;
        }
        if let Some(v) = kv.value("learning_rate")? {
            cfg.learning_rate = v;
        }
        if let Some(v) = kv.value("seed")? {
            cfg.seed = v;
        }
        if let Some(v) = kv.value("epsilon_warmup_epochs")? {
            cfg.epsilon_warmup_epochs = v;
        }
        match kv.get("optimizer") {
            None | Some("adam") => {}
            Some("sgd") => cfg.optimizer = Optimizer::Sgd,
            Some(other) => return Err(invalid!("unknown optimizer '{}'", other)),
        }
        if kv.value::<bool>("adversarial")?.unwrap_or(false) {
            let mut pgd = PgdConfig::with_epsilon(kv.value("epsilon")?.unwrap_or(0.3));
            if let Some(v) = kv.value("pgd_steps")? {
                pgd.steps = v;
            }
            if let Some(v) = kv.value("pgd_step_size")? {
                pgd.step_size = v;
            }
            if let Some(v) = kv.value("random_start")? {
                pgd.random_start = v;
            }
            cfg.adversarial = Some(pgd);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Accuracy on the batches the optimizer saw (adversarial ones when training adversarially).
    pub batch_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub final_train_accuracy: f64,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn project(v: f64, center: f64, epsilon: f64) -> f64 {
    v.clamp(center - epsilon, center + epsilon).clamp(-0.5, 0.5)
}

/// Projected gradient ascent on the cross-entropy inside the L∞ ball of
/// radius `epsilon` around `x`, intersected with the valid pixel range.
pub fn pgd_perturb(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    cfg: &PgdConfig,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    cfg.validate()?;
    if x.ndim() != 4 || x.batch_len() != labels.len() {
        return Err(crate::error::dim_err!(
            "batch {:?} does not match {} labels",
            x.shape(),
            labels.len()
        ));
    }
    let mut adv = x.clone();
    if cfg.random_start {
        for (a, &c) in adv.data_mut().iter_mut().zip(x.data()) {
            *a = (c + rng.gen_range(-1.0..=1.0) * cfg.epsilon).clamp(-0.5, 0.5);
        }
    }
    let n = x.batch_len();
    let sample = x.sample_len();
    let sample_shape = x.shape().to_vec();
    for _ in 0..cfg.steps {
        let chunks: Vec<(usize, usize)> = (0..n)
            .step_by(PGD_CHUNK)
            .map(|s| (s, (s + PGD_CHUNK).min(n)))
            .collect();
        let grads = chunks
            .par_iter()
            .map(|&(s, e)| {
                let mut shape = sample_shape.clone();
                shape[0] = e - s;
                let part = Tensor::new(shape, adv.data()[s * sample..e * sample].to_vec())?;
                model.input_gradient(&part, &labels[s..e]).map(|(_, g)| g)
            })
            .collect::<Result<Vec<_>>>()?;
        for ((s, _), g) in chunks.iter().zip(grads) {
            let base = s * sample;
            for (j, gv) in g.data().iter().enumerate() {
                let i = base + j;
                let stepped = adv.data()[i] + cfg.step_size * sign(*gv);
                adv.data_mut()[i] = project(stepped, x.data()[i], cfg.epsilon);
            }
        }
    }
    Ok(adv)
}

struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    fn new(kind: Optimizer, lr: f64, model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model.parameters().map(|t| vec![0.0; t.len()]).collect();
        OptimizerState {
            kind,
            lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn apply(&mut self, model: &mut Model, grads: &[Tensor]) {
        self.step += 1;
        for (k, (param, g)) in model.parameters_mut().zip(grads).enumerate() {
            match self.kind {
                Optimizer::Sgd => {
                    for (p, gv) in param.data_mut().iter_mut().zip(g.data()) {
                        *p -= self.lr * gv;
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.step);
                    let c2 = 1.0 - beta2.powi(self.step);
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for (j, (p, gv)) in param.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gv;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gv * gv;
                        let mhat = m[j] / c1;
                        let vhat = v[j] / c2;
                        *p -= self.lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Loss, logits and parameter gradients of one batch.
fn batch_gradients(model: &Model, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let params = model.record_params(&mut tape, true);
    let input = tape.leaf(x.clone(), false);
    let logits = model.record_forward(&mut tape, input, &params)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let mut grads = tape.backward(loss)?;
    let mut out = Vec::new();
    for (w, b) in params.into_iter().flatten() {
        out.push(grads.take(w).expect("weight grad"));
        out.push(grads.take(b).expect("bias grad"));
    }
    Ok((tape.value(loss).item(), tape.value(logits).clone(), out))
}

fn run_training(mut model: Model, dataset: &Dataset, config: &TrainConfig) -> Result<(Model, TrainLog)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(invalid!("cannot train on an empty dataset"));
    }
    // Separate streams keep the batch order independent of PGD sampling.
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pgd_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_96d);
    let mut opt = OptimizerState::new(config.optimizer, config.learning_rate, &model);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let batches_per_epoch = dataset.len().div_ceil(config.batch_size);
    let warmup_batches = config.epsilon_warmup_epochs * batches_per_epoch;
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for batch in order.chunks(config.batch_size) {
            let sub = dataset.select(batch)?;
            let mut x = sub.images().clone();
            if let Some(pgd) = &config.adversarial {
                let mut pgd = *pgd;
                if step < warmup_batches {
                    pgd.epsilon *= step as f64 / warmup_batches as f64;
                }
                x = pgd_perturb(&model, &x, sub.labels(), &pgd, &mut pgd_rng)?;
            }
            step += 1;
            let (loss, logits, grads) = batch_gradients(&model, &x, sub.labels())?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            loss_sum += loss * batch.len() as f64;
            correct += (0..batch.len())
                .filter(|&i| ops::argmax(logits.sample(i)) == sub.labels()[i])
                .count();
            seen += batch.len();
            opt.apply(&mut model, &grads);
        }
        let entry = EpochLog {
            epoch,
            mean_loss: loss_sum / seen as f64,
            batch_accuracy: correct as f64 / seen as f64,
        };
        log::info!(
            "epoch {}: loss {:.4}, batch accuracy {:.4}",
            entry.epoch,
            entry.mean_loss,
            entry.batch_accuracy
        );
        epochs.push(entry);
    }
    model.mode = match config.adversarial {
        Some(p) => TrainingMode::Adversarial { epsilon: p.epsilon },
        None => TrainingMode::Natural,
    };
    let final_train_accuracy = evaluate_accuracy(&model, dataset)?;
    Ok((model, TrainLog { epochs, final_train_accuracy }))
}

pub fn train_natural(model: Model, dataset: &Dataset, config: &TrainConfig) -> Result<(Model, TrainLog)> {
    let config = TrainConfig {
        adversarial: None,
        ..config.clone()
    };
    run_training(model, dataset, &config)
}

/// Min-max training: every batch is replaced by its PGD adversary before the
/// parameter update.
pub fn train_adversarial(model: Model, dataset: &Dataset, config: &TrainConfig) -> Result<(Model, TrainLog)> {
    if config.adversarial.is_none() {
        return Err(invalid!("adversarial training needs a PGD configuration"));
    }
    run_training(model, dataset, config)
}

/// Predicted classes for every example, in batches.
pub fn predict_all(model: &Model, images: &Tensor) -> Result<Vec<usize>> {
    let n = images.batch_len();
    let idx: Vec<usize> = (0..n).collect();
    let parts = idx
        .par_chunks(100)
        .map(|chunk| model.predict(&images.select(chunk)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}

pub fn evaluate_accuracy(model: &Model, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let pred = predict_all(model, dataset.images())?;
    let correct = pred.iter().zip(dataset.labels()).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::nn::{Init, SmallCnnConfig};

    fn tiny_model(seed: u64) -> Model {
        let cfg = SmallCnnConfig {
            conv_channels: vec![2],
            fc_widths: vec![8],
            padding: 0,
            ..SmallCnnConfig::mnist()
        };
        Model::small_cnn(&cfg, Init::seeded(seed)).unwrap()
    }

    #[test]
    fn zero_steps_rejected() {
        let m = tiny_model(0);
        let x = Tensor::zeros(&[1, 1, 28, 28]);
        let cfg = PgdConfig {
            steps: 0,
            ..PgdConfig::with_epsilon(0.1)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(pgd_perturb(&m, &x, &[0], &cfg, &mut rng).is_err());
    }

    #[test]
    fn single_step_is_fgsm() {
        let m = tiny_model(1);
        let d = synthetic_blobs(1, 3, 0).unwrap();
        let cfg = PgdConfig {
            epsilon: 0.1,
            steps: 1,
            step_size: 0.05,
            random_start: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let adv = pgd_perturb(&m, d.images(), d.labels(), &cfg, &mut rng).unwrap();
        let (_, g) = m.input_gradient(d.images(), d.labels()).unwrap();
        for ((a, x), gv) in adv.data().iter().zip(d.images().data()).zip(g.data()) {
            let expect = (x + 0.05 * sign(*gv)).clamp(x - 0.1, x + 0.1).clamp(-0.5, 0.5);
            assert_eq!(*a, expect);
        }
    }

    #[test]
    fn constant_model_leaves_input_unchanged() {
        let m = Model::small_cnn(&SmallCnnConfig::desk(), Init::Zeros).unwrap();
        let d = synthetic_blobs(1, 2, 0).unwrap();
        let cfg = PgdConfig {
            random_start: false,
            ..PgdConfig::with_epsilon(0.3)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let adv = pgd_perturb(&m, d.images(), d.labels(), &cfg, &mut rng).unwrap();
        assert_eq!(&adv, d.images());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let d = synthetic_blobs(4, 2, 0).unwrap();
        let m = tiny_model(2);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let (trained, _) = train_natural(m.clone(), &d, &cfg).unwrap();
        assert!(trained.parameters().zip(m.parameters()).all(|(a, b)| a == b));
    }

    #[test]
    fn adversarial_without_config_rejected() {
        let d = synthetic_blobs(2, 2, 0).unwrap();
        assert!(train_adversarial(tiny_model(0), &d, &TrainConfig::default()).is_err());
    }

    #[test]
    fn accuracy_hand_count() {
        let d = synthetic_blobs(1, 10, 5).unwrap();
        let m = Model::small_cnn(&SmallCnnConfig::desk(), Init::Zeros).unwrap();
        // All-equal logits predict class 0, which is 1 of the 10 examples.
        assert_eq!(evaluate_accuracy(&m, &d).unwrap(), 0.1);
    }

    #[test]
    fn config_from_key_values() {
        let kv = KeyValues::parse("epochs = 3\nadversarial = true\nepsilon = 0.1\noptimizer = sgd\n").unwrap();
        let cfg = TrainConfig::from_key_values(&kv).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.optimizer, Optimizer::Sgd);
        assert_eq!(cfg.adversarial.unwrap().epsilon, 0.1);
        let bad = KeyValues::parse("epoch = 3\n").unwrap();
        assert!(TrainConfig::from_key_values(&bad).is_err());
    }
}
