//! Minimal-distortion untargeted L∞ attacks.
//!
//! [`cw_linf_attack`] follows the Carlini–Wagner L∞ scheme: a tanh
//! change of variables keeps pixels in `[−0.5, 0.5]`, and an over-τ hinge
//! penalty is tightened geometrically while a margin loss keeps the example
//! misclassified. It is run from two starting points (Gaussian noise around
//! the original, and a blank gray image) and the smallest successful
//! distortion wins. [`pgd_min_distortion`] is an independent cross-check
//! that binary-searches the smallest PGD radius that flips the label.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::nn::Model;
use crate::tensor::{ops, Tensor};
use crate::train::{pgd_perturb, predict_all, PgdConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    /// Position of the example in the attacked dataset.
    pub index: usize,
    pub true_label: usize,
    pub original: Tensor,
    pub adversarial: Tensor,
    pub linf_distortion: f64,
    pub l2_distortion: f64,
    pub original_pred: usize,
    pub adversarial_pred: usize,
    pub converged: bool,
}

impl AttackResult {
    /// Builds a result, recomputing distortions and predictions from the images.
    pub fn new(
        model: &Model,
        index: usize,
        true_label: usize,
        original: Tensor,
        adversarial: Tensor,
        converged: bool,
    ) -> Result<AttackResult> {
        let preds = model.predict(&Tensor::stack(&original.shape()[1..], &[original.data(), adversarial.data()])?)?;
        let linf = original.max_abs_diff(&adversarial);
        let l2 = original
            .data()
            .iter()
            .zip(adversarial.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        Ok(AttackResult {
            index,
            true_label,
            original,
            adversarial,
            linf_distortion: linf,
            l2_distortion: l2,
            original_pred: preds[0],
            adversarial_pred: preds[1],
            converged: converged && preds[1] != true_label,
        })
    }
}

/// Misclassification with L∞ distortion strictly below `threshold`.
pub fn attack_success(result: &AttackResult, threshold: f64) -> bool {
    result.converged && result.adversarial_pred != result.true_label && result.linf_distortion < threshold
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CwInit {
    /// Original image plus clipped Gaussian noise.
    GaussianNoise,
    /// All pixels at 0, the middle of the range.
    BlankGray,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CwOptions {
    /// Gradient steps per (τ, c) pair.
    pub max_iterations: usize,
    pub learning_rate: f64,
    pub initial_const: f64,
    pub const_factor: f64,
    /// How many times c may grow before a τ level is declared failed.
    pub max_const_doublings: usize,
    pub tau_decay: f64,
    /// τ levels stop below this value.
    pub min_tau: f64,
    pub kappa: f64,
    pub noise_std: f64,
    pub inits: Vec<CwInit>,
    pub seed: u64,
}

impl Default for CwOptions {
    fn default() -> Self {
        CwOptions {
            max_iterations: 1000,
            learning_rate: 5e-3,
            initial_const: 1.0,
            const_factor: 2.0,
            max_const_doublings: 5,
            tau_decay: 0.9,
            min_tau: 1.0 / 256.0,
            kappa: 0.0,
            noise_std: 0.2,
            inits: vec![CwInit::GaussianNoise, CwInit::BlankGray],
            seed: 0,
        }
    }
}

impl CwOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(invalid!("max_iterations must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.initial_const > 0.0 && self.const_factor > 1.0) {
            return Err(invalid!("learning rate and constants must be positive, const_factor > 1"));
        }
        if !(self.tau_decay > 0.0 && self.tau_decay < 1.0) {
            return Err(invalid!("tau_decay must lie in (0, 1)"));
        }
        if self.inits.is_empty() {
            return Err(invalid!("at least one initialization scheme is required"));
        }
        Ok(())
    }
}

const TANH_SCALE: f64 = 1.999_999;

fn to_tanh_space(v: f64) -> f64 {
    (v * TANH_SCALE).atanh()
}

/// Minimal Adam on a flat vector.
struct Adam {
    lr: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(lr: f64, n: usize) -> Self {
        Adam {
            lr,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let (c1, c2) = (1.0 - B1.powi(self.t), 1.0 - B2.powi(self.t));
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// Margin `Z_true − max_{j≠true} Z_j` and the runner-up class.
fn margin(logits: &[f64], label: usize) -> (f64, usize) {
    let mut other = usize::MAX;
    for (j, &z) in logits.iter().enumerate() {
        if j != label && (other == usize::MAX || z > logits[other]) {
            other = j;
        }
    }
    (logits[label] - logits[other], other)
}

/// One τ level: gradient descent on `c·f + Σ max(0, |x' − x| − τ)` from
/// `start`, growing `c` on failure. Returns the first image that is
/// misclassified with (almost) every coordinate inside τ.
fn cw_tau_level(
    model: &Model,
    x: &Tensor,
    label: usize,
    start: &Tensor,
    tau: f64,
    mut c: f64,
    opts: &CwOptions,
) -> Result<Option<(Tensor, f64)>> {
    let n = x.len();
    let base: Vec<f64> = start.data().iter().map(|&v| to_tanh_space(v)).collect();
    let mut modifier = vec![0.0; n];
    let mut adam = Adam::new(opts.learning_rate, n);
    let mut img = start.clone();
    let mut grad = vec![0.0; n];
    for _ in 0..=opts.max_const_doublings {
        for _ in 0..opts.max_iterations {
            for i in 0..n {
                img.data_mut()[i] = (base[i] + modifier[i]).tanh() / 2.0;
            }
            let mut active = false;
            let mut f = 0.0;
            let (logits, dlogit) = model.logits_and_input_gradient(&img, |z| {
                let (m, other) = margin(z.sample(0), label);
                let mut seed = Tensor::zeros(z.shape());
                if m > -opts.kappa {
                    active = true;
                    f = m;
                    seed.data_mut()[label] = 1.0;
                    seed.data_mut()[other] = -1.0;
                } else {
                    f = -opts.kappa;
                }
                seed
            })?;
            let mut penalty = 0.0;
            for i in 0..n {
                let d = img.data()[i] - x.data()[i];
                let over = d.abs() - tau;
                let mut g = if active { c * dlogit.data()[i] } else { 0.0 };
                if over > 0.0 {
                    penalty += over;
                    g += d.signum();
                }
                let t = 2.0 * img.data()[i];
                grad[i] = g * (1.0 - t * t) / 2.0;
            }
            let loss = c * f.max(0.0) + penalty;
            if loss < 1e-4 * c && ops::argmax(logits.sample(0)) != label {
                return Ok(Some((img, c)));
            }
            adam.step(&mut modifier, &grad);
        }
        c *= opts.const_factor;
    }
    Ok(None)
}

fn cw_from_start(model: &Model, x: &Tensor, label: usize, start: Tensor, opts: &CwOptions) -> Result<Option<Tensor>> {
    let mut prev = start;
    let mut tau = 1.0;
    let mut c = opts.initial_const;
    let mut best: Option<Tensor> = None;
    while tau > opts.min_tau {
        let Some((adv, c_used)) = cw_tau_level(model, x, label, &prev, tau, c, opts)? else {
            break;
        };
        c = c_used;
        let actual = adv.max_abs_diff(x);
        if best.as_ref().map_or(true, |b| actual < b.max_abs_diff(x)) {
            best = Some(adv.clone());
        }
        if actual < tau {
            tau = actual;
        }
        tau *= opts.tau_decay;
        prev = adv;
    }
    Ok(best)
}

/// Carlini–Wagner L∞ attack on a single example `[1×C×H×W]`.
pub fn cw_linf_attack(model: &Model, x: &Tensor, label: usize, index: usize, opts: &CwOptions) -> Result<AttackResult> {
    opts.validate()?;
    if x.batch_len() != 1 {
        return Err(invalid!("attack one example at a time, got batch {}", x.batch_len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(index as u64);
    let noise = Normal::new(0.0, opts.noise_std.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut best: Option<Tensor> = None;
    for init in &opts.inits {
        let start = match init {
            CwInit::GaussianNoise => {
                let data = x.data().iter().map(|v| (v + noise.sample(&mut rng)).clamp(-0.5, 0.5)).collect();
                Tensor::new(x.shape().to_vec(), data)?
            }
            CwInit::BlankGray => Tensor::zeros(x.shape()),
        };
        if let Some(adv) = cw_from_start(model, x, label, start, opts)? {
            if best.as_ref().map_or(true, |b| adv.max_abs_diff(x) < b.max_abs_diff(x)) {
                best = Some(adv);
            }
        }
    }
    let converged = best.is_some();
    let adversarial = best.unwrap_or_else(|| x.clone());
    AttackResult::new(model, index, label, x.clone(), adversarial, converged)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PgdSearchOptions {
    pub eps_lo: f64,
    pub eps_hi: f64,
    pub tol: f64,
    pub steps: usize,
    /// Per-step size as a multiple of `ε / steps`.
    pub step_scale: f64,
    pub random_start: bool,
    pub seed: u64,
}

impl Default for PgdSearchOptions {
    fn default() -> Self {
        PgdSearchOptions {
            eps_lo: 0.0,
            eps_hi: 0.5,
            tol: 1e-3,
            steps: 40,
            step_scale: 2.5,
            random_start: false,
            seed: 0,
        }
    }
}

/// Smallest PGD radius in `[eps_lo, eps_hi]` (to within `tol`) that flips the label.
pub fn pgd_min_distortion(
    model: &Model,
    x: &Tensor,
    label: usize,
    index: usize,
    opts: &PgdSearchOptions,
) -> Result<AttackResult> {
    if !(opts.eps_lo < opts.eps_hi) {
        return Err(invalid!("eps_lo {} must be below eps_hi {}", opts.eps_lo, opts.eps_hi));
    }
    if !(opts.tol > 0.0) {
        return Err(invalid!("tol must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(index as u64);
    let probe = |eps: f64, rng: &mut ChaCha8Rng| -> Result<Option<Tensor>> {
        let cfg = PgdConfig {
            epsilon: eps,
            steps: opts.steps,
            step_size: (opts.step_scale * eps / opts.steps as f64).max(f64::MIN_POSITIVE),
            random_start: opts.random_start,
        };
        let adv = pgd_perturb(model, x, &[label], &cfg, rng)?;
        Ok((model.predict(&adv)?[0] != label).then_some(adv))
    };
    let (mut lo, mut hi) = (opts.eps_lo, opts.eps_hi);
    let Some(mut best) = probe(hi, &mut rng)? else {
        return AttackResult::new(model, index, label, x.clone(), x.clone(), false);
    };
    while hi - lo > opts.tol {
        let mid = 0.5 * (lo + hi);
        match probe(mid, &mut rng)? {
            Some(adv) => {
                hi = mid;
                best = adv;
            }
            None => lo = mid,
        }
    }
    AttackResult::new(model, index, label, x.clone(), best, true)
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttackMethod {
    CarliniWagner(CwOptions),
    PgdSearch(PgdSearchOptions),
}

impl AttackMethod {
    pub fn run(&self, model: &Model, x: &Tensor, label: usize, index: usize) -> Result<AttackResult> {
        match self {
            AttackMethod::CarliniWagner(o) => cw_linf_attack(model, x, label, index, o),
            AttackMethod::PgdSearch(o) => pgd_min_distortion(model, x, label, index, o),
        }
    }
}

/// Outcome of attacking every correctly classified example of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub evaluated: usize,
    /// Results for correctly classified examples, ordered by dataset index.
    pub results: Vec<AttackResult>,
    pub thresholds: Vec<f64>,
    /// Success rate per threshold over the attacked examples; `None` when
    /// nothing was attackable.
    pub success_rates: Vec<Option<f64>>,
}

impl SuiteReport {
    pub fn attacked(&self) -> usize {
        self.results.len()
    }

    pub fn is_empty(&self) -> bool {
        self.results.is_empty()
    }

    pub fn success_rate(results: &[AttackResult], threshold: f64) -> Option<f64> {
        if results.is_empty() {
            return None;
        }
        let hits = results.iter().filter(|r| attack_success(r, threshold)).count();
        Some(hits as f64 / results.len() as f64)
    }

    /// Per-example rows: index, true_label, orig_pred, adv_pred, linf, l2, converged.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        let mut body = String::from("index,true_label,orig_pred,adv_pred,linf,l2,converged\n");
        for r in &self.results {
            body += &format!(
                "{},{},{},{},{},{},{}\n",
                r.index, r.true_label, r.original_pred, r.adversarial_pred, r.linf_distortion, r.l2_distortion, r.converged
            );
        }
        f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Attacks every correctly classified example and reports success per threshold.
pub fn attack_suite(model: &Model, dataset: &Dataset, thresholds: &[f64], method: &AttackMethod) -> Result<SuiteReport> {
    let preds = predict_all(model, dataset.images())?;
    let correct: Vec<usize> = (0..dataset.len()).filter(|&i| preds[i] == dataset.labels()[i]).collect();
    let results = correct
        .par_iter()
        .map(|&i| {
            let x = dataset.images().select(&[i])?;
            method.run(model, &x, dataset.labels()[i], i)
        })
        .collect::<Result<Vec<_>>>()?;
    if results.is_empty() {
        log::warn!("no attackable examples: every example is misclassified");
    }
    let success_rates = thresholds.iter().map(|&t| SuiteReport::success_rate(&results, t)).collect();
    Ok(SuiteReport {
        evaluated: dataset.len(),
        results,
        thresholds: thresholds.to_vec(),
        success_rates,
    })
}
