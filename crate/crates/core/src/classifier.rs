//! Classification heads: the cluster-aided classifier used inside each stage
//! and the residual classifier that handles samples no stage accepts.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{HasParameters, ParamId, Parameter, Tape, Var};
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{DlsaError, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

const NORM_EPS: f64 = 1e-12;

/// Records the mean softmax cross-entropy of `logits` (B×C) against `labels`.
pub fn cross_entropy_on_tape<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, c) = tape.value(logits).shape();
    if labels.len() != b {
        return Err(DlsaError::dim("cross_entropy", format!("{b} rows but {} labels", labels.len())));
    }
    let mut onehot = Matrix::zeros(b, c);
    for (r, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(DlsaError::contract(format!("label {y} outside 0..{c}")));
        }
        onehot[(r, y)] = T::one();
    }
    let lse = tape.logsumexp_rows(logits)?;
    let mask = tape.constant(onehot);
    let picked = tape.mul(logits, mask)?;
    let picked = tape.sum_rows(picked);
    let nll = tape.sub(lse, picked)?;
    tape.mean(nll)
}

fn softmax_matrix<T: Scalar>(tape: &mut Tape<T>, logits: Var) -> Result<Matrix<T>> {
    let p = tape.softmax_rows(logits)?;
    Ok(tape.value(p).clone())
}

/// `softmax(W_f·[x, z] + b_f + W_p·prior + b_p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAidedClassifier<T> {
    dim: usize,
    classes: usize,
    w_feat: Parameter<T>,
    b_feat: Parameter<T>,
    w_prior: Parameter<T>,
    b_prior: Parameter<T>,
}

impl<T: Scalar> ClusterAidedClassifier<T> {
    /// Both heads zero-initialised, so the initial output is uniform.
    pub fn zeros(dim: usize, classes: usize) -> Self {
        ClusterAidedClassifier {
            dim,
            classes,
            w_feat: Parameter::new(ParamId(0), Matrix::zeros(classes, 2 * dim)),
            b_feat: Parameter::new(ParamId(1), Matrix::zeros(1, classes)),
            w_prior: Parameter::new(ParamId(2), Matrix::zeros(classes, classes)),
            b_prior: Parameter::new(ParamId(3), Matrix::zeros(1, classes)),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature_weight_mut(&mut self) -> &mut Matrix<T> {
        self.w_feat.value_mut()
    }

    pub fn feature_bias_mut(&mut self) -> &mut Matrix<T> {
        self.b_feat.value_mut()
    }

    pub fn prior_weight_mut(&mut self) -> &mut Matrix<T> {
        self.w_prior.value_mut()
    }

    pub fn prior_bias_mut(&mut self) -> &mut Matrix<T> {
        self.b_prior.value_mut()
    }

    /// Records logits for `x: B×D`, `z: B×D`, `prior: B×C`.
    pub fn logits_on_tape(&self, tape: &mut Tape<T>, x: Var, z: Var, prior: Var) -> Result<Var> {
        let xz = tape.concat_cols(x, z)?;
        let (wf, bf) = (tape.param(&self.w_feat), tape.param(&self.b_feat));
        let feat = tape.affine(xz, wf, Some(bf))?;
        let (wp, bp) = (tape.param(&self.w_prior), tape.param(&self.b_prior));
        let pri = tape.affine(prior, wp, Some(bp))?;
        tape.add(feat, pri)
    }

    /// Class probabilities, one row per sample.
    pub fn predict_proba(&self, x: &Matrix<T>, z: &Matrix<T>, prior: &Matrix<T>) -> Result<Matrix<T>> {
        if x.shape() != z.shape() || x.rows() != prior.rows() {
            return Err(DlsaError::dim(
                "cluster_aided_predict",
                format!("x {:?}, z {:?}, prior {:?}", x.shape(), z.shape(), prior.shape()),
            ));
        }
        let mut tape = Tape::new();
        let (xv, zv, pv) = (tape.constant(x.clone()), tape.constant(z.clone()), tape.constant(prior.clone()));
        let logits = self.logits_on_tape(&mut tape, xv, zv, pv)?;
        softmax_matrix(&mut tape, logits)
    }

    pub(crate) fn write_to(&self, w: &mut ByteWriter) {
        for p in self.parameters() {
            w.matrix(p.value());
        }
    }

    pub(crate) fn read_from(r: &mut ByteReader<'_>, dim: usize, classes: usize) -> Result<Self> {
        let mut c = Self::zeros(dim, classes);
        for p in c.parameters_mut() {
            let (rows, cols) = p.value().shape();
            *p.value_mut() = r.matrix(rows, cols)?;
        }
        Ok(c)
    }
}

impl<T: Scalar> HasParameters<T> for ClusterAidedClassifier<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        vec![&self.w_feat, &self.b_feat, &self.w_prior, &self.b_prior]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.w_feat, &mut self.b_feat, &mut self.w_prior, &mut self.b_prior]
    }
}

/// Head used for samples that no stage accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualKind {
    Linear,
    #[default]
    BalSoftmax,
    Cosine,
}

impl ResidualKind {
    pub fn code(self) -> u8 {
        match self {
            ResidualKind::Linear => 0,
            ResidualKind::BalSoftmax => 1,
            ResidualKind::Cosine => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ResidualKind::Linear),
            1 => Some(ResidualKind::BalSoftmax),
            2 => Some(ResidualKind::Cosine),
            _ => None,
        }
    }
}

impl fmt::Display for ResidualKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResidualKind::Linear => "linear",
            ResidualKind::BalSoftmax => "balsoftmax",
            ResidualKind::Cosine => "cosine",
        })
    }
}

impl FromStr for ResidualKind {
    type Err = DlsaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ResidualKind::Linear),
            "balsoftmax" => Ok(ResidualKind::BalSoftmax),
            "cosine" => Ok(ResidualKind::Cosine),
            other => Err(DlsaError::Config(format!(
                "unknown classifier kind {other:?}; expected linear, balsoftmax or cosine"
            ))),
        }
    }
}

/// Linear, balanced-softmax or cosine classifier over raw features.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualClassifier<T> {
    kind: ResidualKind,
    dim: usize,
    classes: usize,
    weight: Parameter<T>,
    bias: Parameter<T>,
    /// `log n_j` offsets applied to balanced-softmax logits during training.
    log_counts: Vec<T>,
    scale: T,
}

impl<T: Scalar> ResidualClassifier<T> {
    /// `counts[j]` is the training count of class `j`; zero counts are
    /// treated as 1. Linear kinds start at zero; cosine starts from small
    /// random class embeddings since a zero row has no direction.
    pub fn new(kind: ResidualKind, dim: usize, counts: &[usize], cosine_scale: f64, seed: u64) -> Self {
        let classes = counts.len();
        let mut weight = Matrix::zeros(classes, dim);
        if kind == ResidualKind::Cosine {
            let mut rng = crate::seeded_rng(seed);
            let normal = Normal::new(0.0, 0.01).expect("valid std");
            for v in weight.as_mut_slice() {
                *v = T::of(normal.sample(&mut rng));
            }
        }
        ResidualClassifier {
            kind,
            dim,
            classes,
            weight: Parameter::new(ParamId(0), weight),
            bias: Parameter::new(ParamId(1), Matrix::zeros(1, classes)),
            log_counts: counts.iter().map(|&n| T::of((n.max(1) as f64).ln())).collect(),
            scale: T::of(cosine_scale),
        }
    }

    pub fn kind(&self) -> ResidualKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn weight_mut(&mut self) -> &mut Matrix<T> {
        self.weight.value_mut()
    }

    pub fn bias_mut(&mut self) -> &mut Matrix<T> {
        self.bias.value_mut()
    }

    /// Records logits for `x: B×D`. With `training`, balanced softmax adds
    /// its `log n_j` offsets.
    pub fn logits_on_tape(&self, tape: &mut Tape<T>, x: Var, training: bool) -> Result<Var> {
        let w = tape.param(&self.weight);
        match self.kind {
            ResidualKind::Linear | ResidualKind::BalSoftmax => {
                let b = tape.param(&self.bias);
                let logits = tape.affine(x, w, Some(b))?;
                if training && self.kind == ResidualKind::BalSoftmax {
                    let offs = tape.constant(Matrix::row_vector(&self.log_counts));
                    tape.add_row(logits, offs)
                } else {
                    Ok(logits)
                }
            }
            ResidualKind::Cosine => {
                let eps = T::of(NORM_EPS);
                let xn = tape.normalize_rows(x, eps);
                let wn = tape.normalize_rows(w, eps);
                let cos = tape.affine(xn, wn, None)?;
                Ok(tape.scale(cos, self.scale))
            }
        }
    }

    /// Inference-time class probabilities.
    pub fn predict_proba(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.dim {
            return Err(DlsaError::dim(
                "residual_predict",
                format!("features have {} columns, classifier expects {}", x.cols(), self.dim),
            ));
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let logits = self.logits_on_tape(&mut tape, xv, false)?;
        softmax_matrix(&mut tape, logits)
    }

    pub(crate) fn write_to(&self, w: &mut ByteWriter) {
        w.u8(self.kind.code());
        w.f64(self.scale.widen());
        w.reals(&self.log_counts);
        w.matrix(self.weight.value());
        w.matrix(self.bias.value());
    }

    pub(crate) fn read_from(r: &mut ByteReader<'_>, dim: usize, classes: usize) -> Result<Self> {
        let at = r.offset();
        let kind = ResidualKind::from_code(r.u8()?)
            .ok_or_else(|| DlsaError::format(at, "unknown residual classifier kind"))?;
        let scale = T::of(r.f64()?);
        let log_counts = r.reals(classes)?;
        let weight = r.matrix(classes, dim)?;
        let bias = r.matrix(1, classes)?;
        Ok(ResidualClassifier {
            kind,
            dim,
            classes,
            weight: Parameter::new(ParamId(0), weight),
            bias: Parameter::new(ParamId(1), bias),
            log_counts,
            scale,
        })
    }
}

impl<T: Scalar> HasParameters<T> for ResidualClassifier<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        vec![&self.weight, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}
