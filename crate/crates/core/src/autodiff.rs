//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records primitive operations as they are evaluated. Calling
//! [`Tape::backward`] on a scalar (1×1) node walks the tape in reverse and
//! accumulates `∂output/∂θ` into every [`Parameter`] that took part in the
//! computation. Nodes are appended in evaluation order, so the reverse walk
//! reaches a node only after every consumer of it has been processed.
//!
//! Reductions always scan rows (and then columns) left to right, which keeps
//! forward values and gradients bit-identical between runs.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{DlsaError, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Stable identifier of a trainable parameter, unique within one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub u32);

/// Trainable tensor together with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    id: ParamId,
    value: Matrix<T>,
    grad: Matrix<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(id: ParamId, value: Matrix<T>) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Parameter { id, value, grad }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn value(&self) -> &Matrix<T> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Matrix<T> {
        &mut self.value
    }

    pub fn grad(&self) -> &Matrix<T> {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut Matrix<T> {
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Anything that owns trainable parameters in a fixed, stable order.
pub trait HasParameters<T> {
    fn parameters(&self) -> Vec<&Parameter<T>>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>>;
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MaskedAffine {
        x: Var,
        w: Var,
        b: Option<Var>,
        mask: Option<Arc<Matrix<T>>>,
    },
    Tanh(Var),
    Exp(Var),
    Log { a: Var, eps: T },
    Scale(Var, T),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a (B×K) + col (B×1)` broadcast across columns.
    AddCol(Var, Var),
    /// `a (B×K) + row (1×K)` broadcast across rows.
    AddRow(Var, Var),
    /// Sum over columns, B×K → B×1.
    SumRows(Var),
    /// Mean over rows, B×K → 1×K.
    MeanOverRows(Var),
    Sum(Var),
    Mean(Var),
    LogSumExpRows(Var),
    SoftmaxRows(Var),
    Concat(Var, Var),
    GatherCols(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    NormalizeRows { a: Var, eps: T },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Matrix<T>,
}

/// Recording of one forward evaluation.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Matrix<T>, b: &Matrix<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(DlsaError::dim(
            op,
            format!("lhs is {:?}, rhs is {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.as_slice()[0]
    }

    fn push(&mut self, op: Op<T>, value: Matrix<T>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn param(&mut self, p: &Parameter<T>) -> Var {
        self.push(Op::Param(p.id), p.value.clone())
    }

    /// `x · (W ⊙ mask)ᵀ + b` with `x: B×in`, `W: out×in`, `b: 1×out`.
    pub fn masked_affine(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        mask: Option<Arc<Matrix<T>>>,
    ) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.cols() != wv.cols() {
            return Err(DlsaError::dim(
                "masked_affine",
                format!(
                    "input has {} columns but weight expects {} inputs",
                    xv.cols(),
                    wv.cols()
                ),
            ));
        }
        if let Some(m) = &mask {
            if m.shape() != wv.shape() {
                return Err(DlsaError::dim(
                    "masked_affine",
                    format!("mask is {:?} but weight is {:?}", m.shape(), wv.shape()),
                ));
            }
        }
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != (1, wv.rows()) {
                return Err(DlsaError::dim(
                    "masked_affine",
                    format!("bias is {:?}, expected (1, {})", bv.shape(), wv.rows()),
                ));
            }
        }
        let eff = effective_weight(wv, mask.as_deref());
        let (batch, outs) = (xv.rows(), wv.rows());
        let mut out = Matrix::zeros(batch, outs);
        for r in 0..batch {
            let xr = xv.row(r);
            for o in 0..outs {
                let mut acc = match b {
                    Some(b) => self.value(b).as_slice()[o],
                    None => T::zero(),
                };
                for (xi, wi) in xr.iter().zip(eff.row(o)) {
                    acc += *xi * *wi;
                }
                out[(r, o)] = acc;
            }
        }
        Ok(self.push(Op::MaskedAffine { x, w, b, mask }, out))
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.masked_affine(x, w, b, None)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.push(Op::Tanh(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push(Op::Exp(a), v)
    }

    /// `log(max(a, eps))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, eps: T) -> Var {
        let v = self.value(a).map(|x| x.max(eps).ln());
        self.push(Op::Log { a, eps }, v)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Matrix<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(op, av, bv)?;
        let data = av
            .as_slice()
            .iter()
            .zip(bv.as_slice())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Matrix::from_vec(av.rows(), av.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.shape() != (av.rows(), 1) {
            return Err(DlsaError::dim(
                "add_col",
                format!("column is {:?}, expected ({}, 1)", cv.shape(), av.rows()),
            ));
        }
        let mut out = av.clone();
        for r in 0..av.rows() {
            let c = cv.as_slice()[r];
            out.row_mut(r).iter_mut().for_each(|x| *x += c);
        }
        Ok(self.push(Op::AddCol(a, col), out))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.shape() != (1, av.cols()) {
            return Err(DlsaError::dim(
                "add_row",
                format!("row is {:?}, expected (1, {})", rv.shape(), av.cols()),
            ));
        }
        let mut out = av.clone();
        for r in 0..av.rows() {
            for (x, &y) in out.row_mut(r).iter_mut().zip(rv.as_slice()) {
                *x += y;
            }
        }
        Ok(self.push(Op::AddRow(a, row), out))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let sums: Vec<T> = (0..av.rows())
            .map(|r| av.row(r).iter().fold(T::zero(), |s, &x| s + x))
            .collect();
        let v = Matrix::col_vector(&sums);
        self.push(Op::SumRows(a), v)
    }

    pub fn mean_over_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rows() == 0 {
            return Err(DlsaError::contract("mean over an empty batch"));
        }
        let mut acc = vec![T::zero(); av.cols()];
        for r in 0..av.rows() {
            for (s, &x) in acc.iter_mut().zip(av.row(r)) {
                *s += x;
            }
        }
        let n = T::of_usize(av.rows());
        acc.iter_mut().for_each(|s| *s /= n);
        let v = Matrix::row_vector(&acc);
        Ok(self.push(Op::MeanOverRows(a), v))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).as_slice().iter().fold(T::zero(), |s, &x| s + x);
        self.push(Op::Sum(a), Matrix::filled(1, 1, s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(DlsaError::contract("mean of an empty matrix"));
        }
        let s = av.as_slice().iter().fold(T::zero(), |s, &x| s + x) / T::of_usize(av.len());
        Ok(self.push(Op::Mean(a), Matrix::filled(1, 1, s)))
    }

    /// Row-wise `max + log Σ exp(v − max)`, B×K → B×1.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let mut out = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            out.push(logsumexp(av.row(r))?);
        }
        let v = Matrix::col_vector(&out);
        Ok(self.push(Op::LogSumExpRows(a), v))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let mut out = Matrix::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            softmax_into(av.row(r), out.row_mut(r))?;
        }
        Ok(self.push(Op::SoftmaxRows(a), out))
    }

    /// Column-wise concatenation `[a, b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(DlsaError::dim(
                "concat_cols",
                format!("lhs has {} rows, rhs has {}", av.rows(), bv.rows()),
            ));
        }
        let cols = av.cols() + bv.cols();
        let mut data = Vec::with_capacity(av.rows() * cols);
        for r in 0..av.rows() {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let v = Matrix::from_vec(av.rows(), cols, data)?;
        Ok(self.push(Op::Concat(a, b), v))
    }

    /// Output column `j` is input column `idx[j]`.
    pub fn gather_cols(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.cols()) {
            return Err(DlsaError::dim(
                "gather_cols",
                format!("column {bad} out of range for {} columns", av.cols()),
            ));
        }
        let mut out = Matrix::zeros(av.rows(), idx.len());
        for r in 0..av.rows() {
            let src = av.row(r);
            for (dst, &i) in out.row_mut(r).iter_mut().zip(&idx) {
                *dst = src[i];
            }
        }
        Ok(self.push(Op::GatherCols(a, idx), out))
    }

    /// Output row `j` is input row `idx[j]`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.rows()) {
            return Err(DlsaError::dim(
                "gather_rows",
                format!("row {bad} out of range for {} rows", av.rows()),
            ));
        }
        let v = av.select_rows(&idx);
        Ok(self.push(Op::GatherRows(a, idx), v))
    }

    /// Each row divided by `sqrt(‖row‖² + eps)`.
    pub fn normalize_rows(&mut self, a: Var, eps: T) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..av.rows() {
            let norm = row_norm(av.row(r), eps);
            out.row_mut(r).iter_mut().for_each(|x| *x /= norm);
        }
        self.push(Op::NormalizeRows { a, eps }, out)
    }

    /// Accumulates `∂output/∂θ` into the gradient of every parameter in
    /// `params` that was recorded on this tape. Parameters recorded on the
    /// tape but absent from `params` are treated as frozen.
    pub fn backward(&mut self, output: Var, params: &mut [&mut Parameter<T>]) -> Result<()> {
        if self.consumed {
            return Err(DlsaError::State("backward called on a consumed tape".into()));
        }
        if self.value(output).shape() != (1, 1) {
            return Err(DlsaError::contract(format!(
                "backward needs a scalar output, got {:?}",
                self.value(output).shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Matrix<T>>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(Matrix::filled(1, 1, T::one()));

        let lookup: HashMap<ParamId, usize> =
            params.iter().enumerate().map(|(i, p)| (p.id, i)).collect();

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    if let Some(&slot) = lookup.get(id) {
                        params[slot].grad.add_assign(&g);
                    }
                }
                Op::MaskedAffine { x, w, b, mask } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    let eff = effective_weight(wv, mask.as_deref());
                    let (batch, outs, ins) = (xv.rows(), wv.rows(), wv.cols());
                    let mut dx = Matrix::zeros(batch, ins);
                    for r in 0..batch {
                        let gr = g.row(r);
                        let dxr = dx.row_mut(r);
                        for o in 0..outs {
                            let go = gr[o];
                            for (d, &wv) in dxr.iter_mut().zip(eff.row(o)) {
                                *d += go * wv;
                            }
                        }
                    }
                    let mut dw = Matrix::zeros(outs, ins);
                    for o in 0..outs {
                        let dwo = dw.row_mut(o);
                        for r in 0..batch {
                            let go = g[(r, o)];
                            for (d, &xi) in dwo.iter_mut().zip(xv.row(r)) {
                                *d += go * xi;
                            }
                        }
                    }
                    if let Some(m) = mask.as_deref() {
                        for (d, &mk) in dw.as_mut_slice().iter_mut().zip(m.as_slice()) {
                            *d *= mk;
                        }
                    }
                    if let Some(b) = b {
                        let mut db = vec![T::zero(); outs];
                        for r in 0..batch {
                            for (d, &go) in db.iter_mut().zip(g.row(r)) {
                                *d += go;
                            }
                        }
                        accumulate(&mut grads, *b, Matrix::row_vector(&db));
                    }
                    let (x, w) = (*x, *w);
                    accumulate(&mut grads, x, dx);
                    accumulate(&mut grads, w, dw);
                }
                Op::Tanh(a) => {
                    let d = zip(&g, &node.value, |gi, y| gi * (T::one() - y * y));
                    accumulate(&mut grads, *a, d);
                }
                Op::Exp(a) => {
                    let d = zip(&g, &node.value, |gi, y| gi * y);
                    accumulate(&mut grads, *a, d);
                }
                Op::Log { a, eps } => {
                    let eps = *eps;
                    let d = zip(&g, &self.nodes[a.0].value, |gi, x| {
                        if x > eps {
                            gi / x
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads, *a, d);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.map(|gi| gi * c));
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads, b, g.map(|gi| -gi));
                    accumulate(&mut grads, a, g);
                }
                Op::Mul(a, b) => {
                    let da = zip(&g, &self.nodes[b.0].value, |gi, y| gi * y);
                    let db = zip(&g, &self.nodes[a.0].value, |gi, x| gi * x);
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads, a, da);
                    accumulate(&mut grads, b, db);
                }
                Op::AddCol(a, col) => {
                    let sums: Vec<T> = (0..g.rows())
                        .map(|r| g.row(r).iter().fold(T::zero(), |s, &x| s + x))
                        .collect();
                    let (a, col) = (*a, *col);
                    accumulate(&mut grads, col, Matrix::col_vector(&sums));
                    accumulate(&mut grads, a, g);
                }
                Op::AddRow(a, row) => {
                    let mut sums = vec![T::zero(); g.cols()];
                    for r in 0..g.rows() {
                        for (s, &x) in sums.iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                    let (a, row) = (*a, *row);
                    accumulate(&mut grads, row, Matrix::row_vector(&sums));
                    accumulate(&mut grads, a, g);
                }
                Op::SumRows(a) => {
                    let av = &self.nodes[a.0].value;
                    let mut d = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        let gr = g.as_slice()[r];
                        d.row_mut(r).iter_mut().for_each(|x| *x = gr);
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::MeanOverRows(a) => {
                    let av = &self.nodes[a.0].value;
                    let n = T::of_usize(av.rows());
                    let mut d = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        for (x, &gi) in d.row_mut(r).iter_mut().zip(g.as_slice()) {
                            *x = gi / n;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let av = &self.nodes[a.0].value;
                    let d = Matrix::filled(av.rows(), av.cols(), g.as_slice()[0]);
                    accumulate(&mut grads, *a, d);
                }
                Op::Mean(a) => {
                    let av = &self.nodes[a.0].value;
                    let gi = g.as_slice()[0] / T::of_usize(av.len());
                    accumulate(&mut grads, *a, Matrix::filled(av.rows(), av.cols(), gi));
                }
                Op::LogSumExpRows(a) => {
                    let av = &self.nodes[a.0].value;
                    let mut d = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        let lse = node.value.as_slice()[r];
                        let gr = g.as_slice()[r];
                        for (dx, &x) in d.row_mut(r).iter_mut().zip(av.row(r)) {
                            *dx = gr * (x - lse).exp();
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&yi, &gi)| s + yi * gi);
                        for ((dx, &yi), &gi) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *dx = yi * (gi - dot);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Concat(a, b) => {
                    let split = self.nodes[a.0].value.cols();
                    let mut da = Matrix::zeros(g.rows(), split);
                    let mut db = Matrix::zeros(g.rows(), g.cols() - split);
                    for r in 0..g.rows() {
                        let (l, rt) = g.row(r).split_at(split);
                        da.row_mut(r).copy_from_slice(l);
                        db.row_mut(r).copy_from_slice(rt);
                    }
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads, a, da);
                    accumulate(&mut grads, b, db);
                }
                Op::GatherCols(a, idx) => {
                    let av = &self.nodes[a.0].value;
                    let mut d = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let dr = d.row_mut(r);
                        for (j, &i) in idx.iter().enumerate() {
                            dr[i] += gr[j];
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::GatherRows(a, idx) => {
                    let av = &self.nodes[a.0].value;
                    let mut d = Matrix::zeros(av.rows(), av.cols());
                    for (j, &i) in idx.iter().enumerate() {
                        for (dx, &gi) in d.row_mut(i).iter_mut().zip(g.row(j)) {
                            *dx += gi;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::NormalizeRows { a, eps } => {
                    let av = &self.nodes[a.0].value;
                    let y = &node.value;
                    let mut d = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        let norm = row_norm(av.row(r), *eps);
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&yi, &gi)| s + yi * gi);
                        for ((dx, &yi), &gi) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *dx = (gi - yi * dot) / norm;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
            }
        }
        self.nodes.clear();
        Ok(())
    }
}

fn effective_weight<T: Scalar>(w: &Matrix<T>, mask: Option<&Matrix<T>>) -> Matrix<T> {
    match mask {
        None => w.clone(),
        Some(m) => {
            let data = w
                .as_slice()
                .iter()
                .zip(m.as_slice())
                .map(|(&a, &b)| a * b)
                .collect();
            Matrix::from_vec(w.rows(), w.cols(), data).expect("mask shape checked on record")
        }
    }
}

fn zip<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, f: impl Fn(T, T) -> T) -> Matrix<T> {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("operands share a shape")
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn row_norm<T: Scalar>(row: &[T], eps: T) -> T {
    (row.iter().fold(T::zero(), |s, &x| s + x * x) + eps).sqrt()
}

/// Numerically stable `log Σ exp(v)`.
pub fn logsumexp<T: Scalar>(v: &[T]) -> Result<T> {
    if v.is_empty() {
        return Err(DlsaError::contract("logsumexp of an empty vector"));
    }
    if v.iter().any(|x| x.is_nan()) {
        return Err(DlsaError::Numeric("logsumexp input contains NaN".into()));
    }
    let m = v.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    if m.is_infinite() {
        return Ok(m);
    }
    let s = v.iter().fold(T::zero(), |s, &x| s + (x - m).exp());
    Ok(m + s.ln())
}

/// Stable softmax of `v` written into `out`. Normalises by the shifted sum
/// rather than subtracting `logsumexp`, which loses digits for large logits.
pub fn softmax_into<T: Scalar>(v: &[T], out: &mut [T]) -> Result<()> {
    if v.is_empty() {
        return Err(DlsaError::contract("softmax of an empty vector"));
    }
    if v.iter().any(|x| x.is_nan()) {
        return Err(DlsaError::Numeric("softmax input contains NaN".into()));
    }
    let m = v.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    if m.is_infinite() {
        return Err(DlsaError::Numeric("softmax input has no finite maximum".into()));
    }
    let mut s = T::zero();
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (x - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
    Ok(())
}

/// Outcome of [`finite_difference_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter id, flat element index) of the worst entry.
    pub worst: Option<(ParamId, usize)>,
    pub entries_checked: usize,
}

/// Compares the analytic gradients already stored in `model`'s parameters
/// with central finite differences `(f(θ+h) − f(θ−h)) / 2h` of `loss`.
///
/// Relative error is `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
pub fn finite_difference_check<T, M, F>(
    model: &mut M,
    h: T,
    floor: T,
    mut loss: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    M: HasParameters<T>,
    F: FnMut(&M) -> Result<T>,
{
    let shapes: Vec<(ParamId, usize)> = model
        .parameters()
        .iter()
        .map(|p| (p.id(), p.value().len()))
        .collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        entries_checked: 0,
    };
    let two_h = h + h;
    for (slot, &(id, len)) in shapes.iter().enumerate() {
        for e in 0..len {
            let original = model.parameters()[slot].value().as_slice()[e];
            model.parameters_mut()[slot].value_mut().as_mut_slice()[e] = original + h;
            let plus = loss(model)?;
            model.parameters_mut()[slot].value_mut().as_mut_slice()[e] = original - h;
            let minus = loss(model)?;
            model.parameters_mut()[slot].value_mut().as_mut_slice()[e] = original;

            let numeric = (plus - minus) / two_h;
            let analytic = model.parameters()[slot].grad().as_slice()[e];
            let denom = analytic.abs().max(numeric.abs()).max(floor);
            let rel = ((analytic - numeric).abs() / denom).widen();
            report.entries_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((id, e));
            }
        }
    }
    Ok(report)
}
