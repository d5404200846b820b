//! Flow Filter objectives: class-weighted likelihood, cluster balancedness
//! with a momentum posterior estimate, and pairwise purity.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{DlsaError, Result};
use crate::flow::FlowStack;
use crate::gmm::{sample_loglik_on_tape, GaussianMixtureLatent};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Floor applied inside every logarithm of a probability.
pub const PROB_EPS: f64 = 1e-12;

/// Per-class sample weights `ω_i = n_i^{−q} / Σ_j n_j^{−q}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights<T> {
    weights: Vec<T>,
    q: f64,
}

/// Weights for classes with the given training counts. Every count must be
/// at least 1; `q = 0` gives uniform weights.
pub fn class_weights<T: Scalar>(counts: &[usize], q: f64) -> Result<ClassWeights<T>> {
    if let Some(i) = counts.iter().position(|&n| n == 0) {
        return Err(DlsaError::contract(format!("class {i} has no training samples")));
    }
    ClassWeights::from_present_counts(counts, q)
}

impl<T: Scalar> ClassWeights<T> {
    /// Like [`class_weights`] but classes with zero count get weight 0 and
    /// the normalisation runs over the classes that are present.
    pub fn from_present_counts(counts: &[usize], q: f64) -> Result<Self> {
        if !(q >= 0.0 && q.is_finite()) {
            return Err(DlsaError::contract(format!("weight exponent q must be ≥ 0, got {q}")));
        }
        if counts.iter().all(|&n| n == 0) {
            return Err(DlsaError::contract("no class has training samples"));
        }
        // n^{-q} relative to the smallest present count keeps the terms ≤ 1
        let n_min = counts.iter().copied().filter(|&n| n > 0).min().expect("some count > 0") as f64;
        let raw: Vec<f64> = counts
            .iter()
            .map(|&n| if n == 0 { 0.0 } else { (n as f64 / n_min).powf(-q) })
            .collect();
        let total: f64 = raw.iter().sum();
        Ok(ClassWeights {
            weights: raw.iter().map(|w| T::of(w / total)).collect(),
            q,
        })
    }

    pub fn as_slice(&self) -> &[T] {
        &self.weights
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    /// Per-sample weight column for a batch of labels.
    pub fn column(&self, labels: &[usize]) -> Result<Matrix<T>> {
        let mut col = Vec::with_capacity(labels.len());
        for &y in labels {
            let w = self.weights.get(y).ok_or_else(|| {
                DlsaError::contract(format!("label {y} outside 0..{}", self.weights.len()))
            })?;
            col.push(*w);
        }
        Ok(Matrix::col_vector(&col))
    }

    /// Copy with every weight multiplied by `c`.
    pub fn scaled(&self, c: T) -> Self {
        ClassWeights {
            weights: self.weights.iter().map(|&w| w * c).collect(),
            q: self.q,
        }
    }
}

/// Records `−Σ_b ω(y_b) · loglik_b` given per-sample log-likelihoods (B×1).
pub fn mle_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    loglik: Var,
    labels: &[usize],
    weights: &ClassWeights<T>,
) -> Result<Var> {
    if labels.is_empty() {
        return Err(DlsaError::contract("likelihood loss of an empty batch"));
    }
    let w = tape.constant(weights.column(labels)?);
    let weighted = tape.mul(loglik, w)?;
    let s = tape.sum(weighted);
    Ok(tape.neg(s))
}

/// Weighted negative log-likelihood of a batch under `flow` and `mixture`.
pub fn mle_loss<T: Scalar>(
    x: &Matrix<T>,
    labels: &[usize],
    weights: &ClassWeights<T>,
    flow: &FlowStack<T>,
    mixture: &GaussianMixtureLatent<T>,
) -> Result<T> {
    if x.rows() != labels.len() {
        return Err(DlsaError::dim(
            "mle_loss",
            format!("{} rows but {} labels", x.rows(), labels.len()),
        ));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (ll, _, _) = sample_loglik_on_tape(&mut tape, flow, mixture, xv)?;
    let loss = mle_loss_on_tape(&mut tape, ll, labels, weights)?;
    Ok(tape.scalar(loss))
}

fn check_probability<T: Scalar>(p: &[T], what: &str) -> Result<()> {
    let tol = T::of(1e-9);
    if p.iter().any(|&v| v < -tol || !v.is_finite()) {
        return Err(DlsaError::contract(format!("{what} has a negative or non-finite entry")));
    }
    let s = p.iter().fold(T::zero(), |s, &v| s + v);
    if (s - T::one()).abs() > tol {
        return Err(DlsaError::contract(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

/// Exponentially decayed running mean of batch posteriors with bias
/// correction `p̃_t / (1 − η^t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMomentum<T> {
    estimate: Vec<T>,
    decay: f64,
    step: u32,
}

impl<T: Scalar> PosteriorMomentum<T> {
    pub fn new(k: usize, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(DlsaError::contract(format!("momentum decay must lie in (0, 1), got {decay}")));
        }
        Ok(PosteriorMomentum {
            estimate: vec![T::zero(); k],
            decay,
            step: 0,
        })
    }

    pub fn step(&self) -> u32 {
        self.step
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    /// Raw (uncorrected) running estimate `p̃_t`.
    pub fn raw(&self) -> &[T] {
        &self.estimate
    }

    /// `(gain, history)` such that the next corrected estimate for batch mean
    /// `p` is `gain·p + history`.
    fn next_coefficients(&self) -> (T, Vec<T>) {
        let t = self.step + 1;
        let bias = 1.0 - self.decay.powi(t as i32);
        let gain = T::of((1.0 - self.decay) / bias);
        let hist = T::of(self.decay / bias);
        (gain, self.estimate.iter().map(|&p| p * hist).collect())
    }

    /// Records the next corrected estimate on the tape from the current batch
    /// mean (1×K). History enters as a constant.
    pub fn corrected_on_tape(&self, tape: &mut Tape<T>, batch_mean: Var) -> Result<Var> {
        let k = tape.value(batch_mean).cols();
        if k != self.estimate.len() {
            return Err(DlsaError::dim(
                "update_posterior_estimate",
                format!("batch posterior has {k} clusters, estimator tracks {}", self.estimate.len()),
            ));
        }
        let (gain, hist) = self.next_coefficients();
        let scaled = tape.scale(batch_mean, gain);
        let hist = tape.constant(Matrix::row_vector(&hist));
        tape.add(scaled, hist)
    }

    /// Folds a batch mean into the running estimate without validation.
    pub fn commit(&mut self, batch_mean: &[T]) {
        let eta = T::of(self.decay);
        let one_minus = T::of(1.0 - self.decay);
        for (p, &b) in self.estimate.iter_mut().zip(batch_mean) {
            *p = eta * *p + one_minus * b;
        }
        self.step += 1;
    }

    /// Advances the estimator by one batch and returns the bias-corrected estimate.
    pub fn update_posterior_estimate(&mut self, batch_mean: &[T]) -> Result<Vec<T>> {
        if batch_mean.len() != self.estimate.len() {
            return Err(DlsaError::dim(
                "update_posterior_estimate",
                format!("batch posterior has {} clusters, estimator tracks {}", batch_mean.len(), self.estimate.len()),
            ));
        }
        check_probability(batch_mean, "batch posterior")?;
        let (gain, hist) = self.next_coefficients();
        let corrected = batch_mean.iter().zip(&hist).map(|(&p, &h)| gain * p + h).collect();
        self.commit(batch_mean);
        Ok(corrected)
    }
}

/// Records `Σ_k p_k log max(p_k, ε)` for a 1×K probability row.
pub fn balance_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, p: Var) -> Var {
    let logp = tape.log_clamped(p, T::of(PROB_EPS));
    let prod = tape.mul(p, logp).expect("same shape");
    tape.sum(prod)
}

/// Negative entropy of a cluster distribution; `−log K` iff uniform.
pub fn balance_loss<T: Scalar>(p: &[T]) -> T {
    let eps = T::of(PROB_EPS);
    p.iter().fold(T::zero(), |s, &v| s + v * v.max(eps).ln())
}

/// Draws `count` index pairs with different labels: two distinct classes
/// uniformly among those present, then one sample uniformly within each.
/// Returns no pairs when fewer than two classes are present.
pub fn sample_purity_pairs(labels: &[usize], rng: &mut impl Rng, count: usize) -> Vec<(usize, usize)> {
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = by_class.into_values().collect();
    let m = groups.len();
    if m < 2 {
        return Vec::new();
    }
    (0..count)
        .map(|_| {
            let a = rng.random_range(0..m);
            let mut b = rng.random_range(0..m - 1);
            if b >= a {
                b += 1;
            }
            let i = groups[a][rng.random_range(0..groups[a].len())];
            let j = groups[b][rng.random_range(0..groups[b].len())];
            (i, j)
        })
        .collect()
}

/// Records the mean over pairs of `Σ_k P(k|x_i) log max(P(k|x_j), ε)` from a
/// B×K posterior. An empty pair list contributes a constant 0.
pub fn purity_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, posterior: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    if pairs.is_empty() {
        return Ok(tape.constant(Matrix::zeros(1, 1)));
    }
    let (left, right): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    let pi = tape.gather_rows(posterior, left)?;
    let pj = tape.gather_rows(posterior, right)?;
    let log_pj = tape.log_clamped(pj, T::of(PROB_EPS));
    let prod = tape.mul(pi, log_pj)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, T::one() / T::of_usize(pairs.len())))
}

/// Tape-free purity loss over explicit posterior pairs.
pub fn purity_loss<T: Scalar>(posteriors_i: &[Vec<T>], posteriors_j: &[Vec<T>]) -> Result<T> {
    if posteriors_i.len() != posteriors_j.len() {
        return Err(DlsaError::dim(
            "purity_loss",
            format!("{} left posteriors, {} right", posteriors_i.len(), posteriors_j.len()),
        ));
    }
    if posteriors_i.is_empty() {
        return Ok(T::zero());
    }
    let eps = T::of(PROB_EPS);
    let mut total = T::zero();
    for (pi, pj) in posteriors_i.iter().zip(posteriors_j) {
        if pi.len() != pj.len() {
            return Err(DlsaError::dim("purity_loss", "paired posteriors differ in length"));
        }
        total += pi.iter().zip(pj).fold(T::zero(), |s, (&a, &b)| s + a * b.max(eps).ln());
    }
    Ok(total / T::of_usize(posteriors_i.len()))
}

/// `λ_bal` and `λ_pure` of the total objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub balance: f64,
    pub purity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            balance: 1.0,
            purity: 0.02,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("λ_bal", self.balance), ("λ_pure", self.purity)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DlsaError::contract(format!("{name} must be a non-negative real, got {v}")));
            }
        }
        Ok(())
    }
}

/// Records `L_MLE + λ_bal·L_bal + λ_pure·L_pure`; a zero weight drops its term.
pub fn total_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    mle: Var,
    balance: Var,
    purity: Var,
    lambdas: LossWeights,
) -> Result<Var> {
    lambdas.validate()?;
    let mut total = mle;
    if lambdas.balance != 0.0 {
        let b = tape.scale(balance, T::of(lambdas.balance));
        total = tape.add(total, b)?;
    }
    if lambdas.purity != 0.0 {
        let p = tape.scale(purity, T::of(lambdas.purity));
        total = tape.add(total, p)?;
    }
    Ok(total)
}

/// Tape-free counterpart of [`total_loss_on_tape`].
pub fn total_loss<T: Scalar>(mle: T, balance: T, purity: T, lambdas: LossWeights) -> Result<T> {
    lambdas.validate()?;
    let mut total = mle;
    if lambdas.balance != 0.0 {
        total += balance * T::of(lambdas.balance);
    }
    if lambdas.purity != 0.0 {
        total += purity * T::of(lambdas.purity);
    }
    Ok(total)
}

/// Handles to every term of one recorded Flow Filter objective.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveTerms {
    pub total: Var,
    pub mle: Var,
    pub balance: Var,
    pub purity: Var,
    /// Batch mean posterior (1×K), to be committed to the momentum estimator.
    pub batch_posterior: Var,
}

/// Everything besides the model needed to evaluate the objective on a batch.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveInputs<'a, T> {
    pub x: &'a Matrix<T>,
    pub labels: &'a [usize],
    pub weights: &'a ClassWeights<T>,
    pub momentum: &'a PosteriorMomentum<T>,
    pub pairs: &'a [(usize, usize)],
    pub lambdas: LossWeights,
}

/// Records the full Flow Filter objective for one batch.
pub fn filter_objective_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    flow: &FlowStack<T>,
    mixture: &GaussianMixtureLatent<T>,
    inputs: &ObjectiveInputs<'_, T>,
) -> Result<ObjectiveTerms> {
    let xv = tape.constant(inputs.x.clone());
    let (ll, comps, _) = sample_loglik_on_tape(tape, flow, mixture, xv)?;
    let mle = mle_loss_on_tape(tape, ll, inputs.labels, inputs.weights)?;
    let post = tape.softmax_rows(comps)?;
    let batch_posterior = tape.mean_over_rows(post)?;
    let corrected = inputs.momentum.corrected_on_tape(tape, batch_posterior)?;
    let balance = balance_loss_on_tape(tape, corrected);
    let purity = purity_loss_on_tape(tape, post, inputs.pairs)?;
    let total = total_loss_on_tape(tape, mle, balance, purity, inputs.lambdas)?;
    Ok(ObjectiveTerms {
        total,
        mle,
        balance,
        purity,
        batch_posterior,
    })
}
