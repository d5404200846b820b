//! Training: SGD with heavy-ball momentum, the Flow Filter objective loop,
//! likelihood-threshold calibration and the classifier fitting loops.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{HasParameters, Parameter, Tape, Var};
use crate::classifier::{cross_entropy_on_tape, ClusterAidedClassifier, ResidualClassifier, ResidualKind};
use crate::data::FeatureDataset;
use crate::error::{DlsaError, Result};
use crate::flow::{build_flow, default_hidden, FlowStack};
use crate::gmm::{batch_density, init_centers, GaussianMixtureLatent};
use crate::losses::{
    filter_objective_on_tape, sample_purity_pairs, ClassWeights, LossWeights, ObjectiveInputs, PosteriorMomentum,
};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Hyperparameters of the stage classifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub residual_kind: ResidualKind,
    /// Train the residual classifier on every training sample instead of the residual subset.
    pub residual_on_full_set: bool,
    pub cosine_scale: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            epochs: 30,
            learning_rate: 0.1,
            batch_size: 256,
            momentum: 0.9,
            residual_kind: ResidualKind::BalSoftmax,
            residual_on_full_set: false,
            cosine_scale: 16.0,
        }
    }
}

/// Hyperparameters of one Flow Filter and its classifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lambda_bal: f64,
    pub lambda_pure: f64,
    /// Class-weight exponent; 0 gives unweighted likelihood.
    pub q: f64,
    /// Decay of the momentum posterior estimate.
    pub eta: f64,
    pub clusters: usize,
    pub filter_fraction: f64,
    pub flow_blocks: usize,
    /// MADE hidden width; defaults to `max(64, 4·D)`.
    pub hidden: Option<usize>,
    /// Mixture centre scale σ; defaults to the dimension-based rule.
    pub center_scale: Option<f64>,
    pub classifier: ClassifierConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.2,
            momentum: 0.9,
            batch_size: 1024,
            epochs: 50,
            seed: 0,
            lambda_bal: 1.0,
            lambda_pure: 0.02,
            q: 2.0,
            eta: 0.7,
            clusters: 500,
            filter_fraction: 0.3,
            flow_blocks: 2,
            hidden: None,
            center_scale: None,
            classifier: ClassifierConfig::default(),
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(DlsaError::Config(msg()))
    }
}

impl TrainConfig {
    pub fn lambdas(&self) -> LossWeights {
        LossWeights {
            balance: self.lambda_bal,
            purity: self.lambda_pure,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        let unit = |v: f64| (0.0..1.0).contains(&v);
        check(positive(self.learning_rate), || format!("learning_rate must be positive, got {}", self.learning_rate))?;
        check(unit(self.momentum), || format!("momentum must lie in [0, 1), got {}", self.momentum))?;
        check(self.batch_size > 0, || "batch_size must be positive".into())?;
        check(self.lambda_bal >= 0.0 && self.lambda_bal.is_finite(), || "lambda_bal must be ≥ 0".into())?;
        check(self.lambda_pure >= 0.0 && self.lambda_pure.is_finite(), || "lambda_pure must be ≥ 0".into())?;
        check(self.q >= 0.0 && self.q.is_finite(), || format!("q must be ≥ 0, got {}", self.q))?;
        check(self.eta > 0.0 && self.eta < 1.0, || format!("eta must lie in (0, 1), got {}", self.eta))?;
        check(self.clusters >= 2, || format!("clusters must be ≥ 2, got {}", self.clusters))?;
        check(self.filter_fraction > 0.0 && self.filter_fraction < 1.0, || {
            format!("filter_fraction must lie in (0, 1), got {}", self.filter_fraction)
        })?;
        check(self.flow_blocks > 0, || "flow_blocks must be positive".into())?;
        if let Some(s) = self.center_scale {
            check(positive(s), || format!("center_scale must be positive, got {s}"))?;
        }
        let c = &self.classifier;
        check(positive(c.learning_rate), || "classifier.learning_rate must be positive".into())?;
        check(unit(c.momentum), || "classifier.momentum must lie in [0, 1)".into())?;
        check(c.batch_size > 0, || "classifier.batch_size must be positive".into())?;
        check(positive(c.cosine_scale), || "classifier.cosine_scale must be positive".into())?;
        Ok(())
    }
}

/// Independent child seed for a named sub-task, via a SplitMix64 step.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Plain SGD with heavy-ball momentum: `v ← μv + g`, `θ ← θ − ηv`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    lr: T,
    momentum: T,
    velocity: Vec<Matrix<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr: T::of(lr),
            momentum: T::of(momentum),
            velocity: Vec::new(),
        }
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, params: &mut [&mut Parameter<T>]) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Matrix::zeros(p.value().rows(), p.value().cols())).collect();
        }
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            let grad = p.grad().as_slice().to_vec();
            for (vi, g) in v.as_mut_slice().iter_mut().zip(grad) {
                *vi = self.momentum * *vi + g;
            }
            for (w, vi) in p.value_mut().as_mut_slice().iter_mut().zip(v.as_slice()) {
                *w -= self.lr * *vi;
            }
            p.zero_grad();
        }
    }
}

/// `α` such that the `⌈ρN⌉` largest log-likelihoods are `≥ α`.
pub fn calibrate_threshold<T: Scalar>(logliks: &[T], rho: f64) -> Result<T> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(DlsaError::contract(format!("filter fraction must lie in (0, 1), got {rho}")));
    }
    if logliks.is_empty() {
        return Err(DlsaError::contract("threshold of an empty log-likelihood set"));
    }
    if logliks.iter().any(|v| v.is_nan()) {
        return Err(DlsaError::Numeric("NaN log-likelihood during calibration".into()));
    }
    let n = logliks.len();
    let m = ((rho * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut sorted = logliks.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    Ok(sorted[n - m])
}

/// One row of the Flow Filter training trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// 0 is the objective at initialisation.
    pub epoch: usize,
    /// Weighted negative log-likelihood summed over the epoch's samples.
    pub mle: f64,
    /// Mean balance term over the epoch's steps.
    pub balance: f64,
    /// Mean purity term over the epoch's steps.
    pub purity: f64,
    pub total: f64,
}

/// Trace rows as CSV with header `epoch,L_MLE,L_bal,L_pure,total`.
pub fn trace_csv(trace: &[LossRecord]) -> String {
    let mut out = String::from("epoch,L_MLE,L_bal,L_pure,total\n");
    for r in trace {
        out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.mle, r.balance, r.purity, r.total));
    }
    out
}

/// A calibrated Flow Filter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedFilter<T> {
    pub flow: FlowStack<T>,
    pub mixture: GaussianMixtureLatent<T>,
    /// Log-likelihood threshold α; samples at or above it are well clustered.
    pub threshold: T,
    /// `(cluster, label)` of every filtered training sample.
    pub assignments: Vec<(usize, usize)>,
}

impl<T: Scalar> TrainedFilter<T> {
    /// Whether each row of `x` passes the threshold.
    pub fn accepts(&self, x: &Matrix<T>) -> Result<Vec<bool>> {
        Ok(batch_density(&self.flow, &self.mixture, x)?
            .loglik
            .iter()
            .map(|&l| l >= self.threshold)
            .collect())
    }
}

/// Output of [`train_flow_filter`].
#[derive(Debug, Clone)]
pub struct FilterFit<T> {
    pub filter: TrainedFilter<T>,
    /// Per training sample: log-likelihood ≥ α.
    pub filtered: Vec<bool>,
    /// Per training sample: most probable cluster.
    pub clusters: Vec<usize>,
    pub loglik: Vec<T>,
    pub trace: Vec<LossRecord>,
}

struct FilterState<T> {
    flow: FlowStack<T>,
    mixture: GaussianMixtureLatent<T>,
    weights: ClassWeights<T>,
    momentum: PosteriorMomentum<T>,
}

fn diverged(epoch: usize, detail: impl std::fmt::Display) -> DlsaError {
    DlsaError::Training(format!(
        "training diverged in epoch {epoch} ({detail}); last finite epoch {}",
        epoch.saturating_sub(1)
    ))
}

/// Trains a Flow Filter on `data` and calibrates its threshold.
pub fn train_flow_filter<T: Scalar>(data: &FeatureDataset, cfg: &TrainConfig) -> Result<FilterFit<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(DlsaError::contract("cannot train a Flow Filter on an empty dataset"));
    }
    let counts = data.counts();
    if counts.iter().filter(|&&n| n > 0).count() < 2 {
        return Err(DlsaError::contract("Flow Filter training needs at least 2 classes present"));
    }
    let d = data.dim();
    let hidden = cfg.hidden.unwrap_or_else(|| default_hidden(d));
    let x: Matrix<T> = data.features_matrix();
    let labels = data.labels();
    let mut st = FilterState {
        flow: build_flow(d, cfg.flow_blocks, hidden, derive_seed(cfg.seed, 1))?,
        mixture: init_centers(cfg.clusters, d, cfg.center_scale, derive_seed(cfg.seed, 2))?,
        weights: ClassWeights::from_present_counts(&counts, cfg.q)?,
        momentum: PosteriorMomentum::new(cfg.clusters, cfg.eta)?,
    };
    let mut rng = crate::seeded_rng(derive_seed(cfg.seed, 3));
    let lambdas = cfg.lambdas();

    let pairs = sample_purity_pairs(labels, &mut rng, labels.len());
    let inputs = ObjectiveInputs {
        x: &x,
        labels,
        weights: &st.weights,
        momentum: &st.momentum,
        pairs: &pairs,
        lambdas,
    };
    let mut tape = Tape::new();
    let t = filter_objective_on_tape(&mut tape, &st.flow, &st.mixture, &inputs).map_err(|e| diverged(0, e))?;
    let mut trace = vec![LossRecord {
        epoch: 0,
        mle: tape.scalar(t.mle).widen(),
        balance: tape.scalar(t.balance).widen(),
        purity: tape.scalar(t.purity).widen(),
        total: tape.scalar(t.total).widen(),
    }];

    let mut sgd = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0f64; 3];
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let pairs = sample_purity_pairs(&yb, &mut rng, yb.len());
            let inputs = ObjectiveInputs {
                x: &xb,
                labels: &yb,
                weights: &st.weights,
                momentum: &st.momentum,
                pairs: &pairs,
                lambdas,
            };
            let mut tape = Tape::new();
            let terms =
                filter_objective_on_tape(&mut tape, &st.flow, &st.mixture, &inputs).map_err(|e| diverged(epoch, e))?;
            let total = tape.scalar(terms.total);
            if !total.is_finite() {
                return Err(diverged(epoch, "non-finite loss"));
            }
            sums[0] += tape.scalar(terms.mle).widen();
            sums[1] += tape.scalar(terms.balance).widen();
            sums[2] += tape.scalar(terms.purity).widen();
            steps += 1;
            let batch_mean = tape.value(terms.batch_posterior).as_slice().to_vec();
            tape.backward(terms.total, &mut st.flow.parameters_mut())?;
            sgd.step(&mut st.flow.parameters_mut());
            st.momentum.commit(&batch_mean);
        }
        let (bal, pure) = (sums[1] / steps as f64, sums[2] / steps as f64);
        trace.push(LossRecord {
            epoch,
            mle: sums[0],
            balance: bal,
            purity: pure,
            total: sums[0] + lambdas.balance * bal + lambdas.purity * pure,
        });
    }

    let dens = batch_density(&st.flow, &st.mixture, &x).map_err(|e| diverged(cfg.epochs, e))?;
    let threshold = calibrate_threshold(&dens.loglik, cfg.filter_fraction)?;
    let clusters = dens.clusters();
    let filtered: Vec<bool> = dens.loglik.iter().map(|&l| l >= threshold).collect();
    let assignments = (0..data.len()).filter(|&i| filtered[i]).map(|i| (clusters[i], labels[i])).collect();
    Ok(FilterFit {
        filter: TrainedFilter {
            flow: st.flow,
            mixture: st.mixture,
            threshold,
            assignments,
        },
        filtered,
        clusters,
        loglik: dens.loglik,
        trace,
    })
}

/// Minibatch SGD over `n` samples; returns the sample-weighted mean loss per epoch.
fn fit_minibatch<T, M, F>(model: &mut M, n: usize, cfg: &ClassifierConfig, seed: u64, mut batch_loss: F) -> Result<Vec<f64>>
where
    T: Scalar,
    M: HasParameters<T>,
    F: FnMut(&mut Tape<T>, &M, &[usize]) -> Result<Var>,
{
    let mut rng = crate::seeded_rng(seed);
    let mut sgd = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let loss = batch_loss(&mut tape, model, chunk)?;
            let v = tape.scalar(loss);
            if !v.is_finite() {
                return Err(diverged(epoch, "non-finite classifier loss"));
            }
            total += v.widen() * chunk.len() as f64;
            tape.backward(loss, &mut model.parameters_mut())?;
            sgd.step(&mut model.parameters_mut());
        }
        trace.push(total / n as f64);
    }
    Ok(trace)
}

/// Fits the cluster-aided classifier on `(x, z, prior)` triples.
pub fn train_cluster_classifier<T: Scalar>(
    x: &Matrix<T>,
    z: &Matrix<T>,
    prior: &Matrix<T>,
    labels: &[usize],
    classes: usize,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<(ClusterAidedClassifier<T>, Vec<f64>)> {
    if labels.is_empty() {
        return Err(DlsaError::Config(
            "filtered set is empty; increase the filter fraction".into(),
        ));
    }
    if x.rows() != labels.len() || z.shape() != x.shape() || prior.shape() != (labels.len(), classes) {
        return Err(DlsaError::dim(
            "train_cluster_classifier",
            format!("x {:?}, z {:?}, prior {:?}, {} labels", x.shape(), z.shape(), prior.shape(), labels.len()),
        ));
    }
    let mut model = ClusterAidedClassifier::zeros(x.cols(), classes);
    let trace = fit_minibatch(&mut model, labels.len(), cfg, seed, |tape, m, idx| {
        let xv = tape.constant(x.select_rows(idx));
        let zv = tape.constant(z.select_rows(idx));
        let pv = tape.constant(prior.select_rows(idx));
        let logits = m.logits_on_tape(tape, xv, zv, pv)?;
        let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        cross_entropy_on_tape(tape, logits, &yb)
    })?;
    Ok((model, trace))
}

/// Output of [`train_residual_classifier`].
#[derive(Debug, Clone)]
pub struct ResidualFit<T> {
    pub classifier: ResidualClassifier<T>,
    pub trace: Vec<f64>,
    /// Classes absent from the training subset; balanced softmax used count 1 for them.
    pub missing_classes: Vec<usize>,
}

/// Fits a residual classifier of `kind` with counts taken from `labels`.
pub fn train_residual_classifier<T: Scalar>(
    x: &Matrix<T>,
    labels: &[usize],
    classes: usize,
    kind: ResidualKind,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<ResidualFit<T>> {
    if labels.is_empty() {
        return Err(DlsaError::Config("residual training set is empty".into()));
    }
    if x.rows() != labels.len() {
        return Err(DlsaError::dim(
            "train_residual_classifier",
            format!("{} rows but {} labels", x.rows(), labels.len()),
        ));
    }
    let mut counts = vec![0usize; classes];
    for &y in labels {
        *counts
            .get_mut(y)
            .ok_or_else(|| DlsaError::contract(format!("label {y} outside 0..{classes}")))? += 1;
    }
    let missing_classes = (0..classes).filter(|&c| counts[c] == 0).collect();
    let mut model = ResidualClassifier::new(kind, x.cols(), &counts, cfg.cosine_scale, derive_seed(seed, 1));
    let trace = fit_minibatch(&mut model, labels.len(), cfg, derive_seed(seed, 2), |tape, m, idx| {
        let xv = tape.constant(x.select_rows(idx));
        let logits = m.logits_on_tape(tape, xv, true)?;
        let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        cross_entropy_on_tape(tape, logits, &yb)
    })?;
    Ok(ResidualFit {
        classifier: model,
        trace,
        missing_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_examples() {
        let ll: Vec<f64> = (1..=10).map(|v| v as f64).collect();
        let a = calibrate_threshold(&ll, 0.3).unwrap();
        assert_eq!(a, 8.0);
        assert_eq!(ll.iter().filter(|&&v| v >= a).count(), 3);
        let a = calibrate_threshold(&ll, 1e-9).unwrap();
        assert!(ll.iter().filter(|&&v| v >= a).count() <= 1);
        assert!(calibrate_threshold(&ll, 1.0).is_err());
        assert!(calibrate_threshold::<f64>(&[], 0.3).is_err());
    }

    #[test]
    fn sgd_momentum_update() {
        let mut p = Parameter::new(crate::autodiff::ParamId(0), Matrix::row_vector(&[1.0f64]));
        let mut sgd = Sgd::new(0.5, 0.9);
        p.grad_mut().as_mut_slice()[0] = 2.0;
        sgd.step(&mut [&mut p]);
        assert_eq!(p.value().as_slice()[0], 0.0);
        assert_eq!(p.grad().as_slice()[0], 0.0);
        p.grad_mut().as_mut_slice()[0] = 1.0;
        sgd.step(&mut [&mut p]);
        assert!((p.value().as_slice()[0] + 0.5 * (0.9 * 2.0 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!((cfg.clusters, cfg.filter_fraction, cfg.q, cfg.eta), (500, 0.3, 2.0, 0.7));
        let parsed: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!(parsed.epochs, 3);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
        let bad = TrainConfig {
            filter_fraction: 1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(DlsaError::Config(_))));
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(0, 1), derive_seed(0, 2));
        assert_ne!(derive_seed(1, 1), derive_seed(0, 1));
        assert_eq!(derive_seed(5, 9), derive_seed(5, 9));
    }
}
