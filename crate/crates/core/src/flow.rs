//! Masked autoregressive flow.
//!
//! Each block is a MADE network producing a shift `μ(x)` and a log-scale
//! `α(x)` where output `i` only sees inputs `< i`. The density direction
//! (features → latent) runs in one parallel pass per block:
//!
//! ```text
//! u_i = (x_i − μ_i(x)) · exp(−α_i(x)),   log|det J| += −Σ_i α_i(x)
//! ```
//!
//! with coordinates visited in a per-block order (identity, reversal, …).
//! Sampling (latent → features) inverts each block one coordinate at a time.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{HasParameters, ParamId, Parameter, Tape, Var};
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{DlsaError, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Bound of the smooth clamp `α = B·tanh(a/B)` applied to raw log-scales.
pub const ALPHA_BOUND: f64 = 5.0;

/// Default MADE hidden width for a `dim`-dimensional flow.
pub fn default_hidden(dim: usize) -> usize {
    64.max(4 * dim)
}

/// One MADE network: a masked hidden layer with tanh and two masked heads.
#[derive(Debug, Clone, PartialEq)]
pub struct MadeNetwork<T> {
    dim: usize,
    hidden: usize,
    hidden_degrees: Vec<usize>,
    mask_in: Arc<Matrix<T>>,
    mask_out: Arc<Matrix<T>>,
    w_in: Parameter<T>,
    b_in: Parameter<T>,
    w_mu: Parameter<T>,
    b_mu: Parameter<T>,
    w_alpha: Parameter<T>,
    b_alpha: Parameter<T>,
}

/// Degree of hidden unit `h`; inputs and outputs carry degrees `1..=dim`.
fn hidden_degree(h: usize, dim: usize) -> usize {
    if dim < 2 {
        1
    } else {
        h % (dim - 1) + 1
    }
}

fn masks<T: Scalar>(dim: usize, degrees: &[usize]) -> (Matrix<T>, Matrix<T>) {
    let hidden = degrees.len();
    let mut mask_in = Matrix::zeros(hidden, dim);
    let mut mask_out = Matrix::zeros(dim, hidden);
    for (h, &m) in degrees.iter().enumerate() {
        for i in 0..dim {
            if m > i {
                mask_in[(h, i)] = T::one();
            }
            if i + 1 > m {
                mask_out[(i, h)] = T::one();
            }
        }
    }
    (mask_in, mask_out)
}

impl<T: Scalar> MadeNetwork<T> {
    /// Random input layer, zero heads (the block starts as the identity).
    /// Parameter ids are `first_id..first_id + 6`.
    pub fn new(dim: usize, hidden: usize, first_id: u32, rng: &mut impl Rng) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(DlsaError::contract("MADE needs dim ≥ 1 and hidden ≥ 1"));
        }
        let degrees: Vec<usize> = (0..hidden).map(|h| hidden_degree(h, dim)).collect();
        let std = 1.0 / (dim as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let w_in = Matrix::from_vec(
            hidden,
            dim,
            (0..hidden * dim).map(|_| T::of(normal.sample(rng))).collect(),
        )?;
        Self::from_parts(
            dim,
            degrees,
            first_id,
            [
                w_in,
                Matrix::zeros(1, hidden),
                Matrix::zeros(dim, hidden),
                Matrix::zeros(1, dim),
                Matrix::zeros(dim, hidden),
                Matrix::zeros(1, dim),
            ],
        )
    }

    fn from_parts(dim: usize, hidden_degrees: Vec<usize>, first_id: u32, w: [Matrix<T>; 6]) -> Result<Self> {
        let hidden = hidden_degrees.len();
        let expected = [(hidden, dim), (1, hidden), (dim, hidden), (1, dim), (dim, hidden), (1, dim)];
        for (m, e) in w.iter().zip(expected) {
            if m.shape() != e {
                return Err(DlsaError::dim(
                    "MadeNetwork",
                    format!("weight is {:?}, expected {:?}", m.shape(), e),
                ));
            }
        }
        if let Some(&bad) = hidden_degrees.iter().find(|&&m| m == 0 || m > dim.max(1)) {
            return Err(DlsaError::contract(format!("hidden degree {bad} outside 1..={dim}")));
        }
        let (mask_in, mask_out) = masks(dim, &hidden_degrees);
        let [w_in, b_in, w_mu, b_mu, w_alpha, b_alpha] = w;
        let p = |k: u32, m| Parameter::new(ParamId(first_id + k), m);
        Ok(MadeNetwork {
            dim,
            hidden,
            hidden_degrees,
            mask_in: Arc::new(mask_in),
            mask_out: Arc::new(mask_out),
            w_in: p(0, w_in),
            b_in: p(1, b_in),
            w_mu: p(2, w_mu),
            b_mu: p(3, b_mu),
            w_alpha: p(4, w_alpha),
            b_alpha: p(5, b_alpha),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn hidden_degrees(&self) -> &[usize] {
        &self.hidden_degrees
    }

    pub fn input_mask(&self) -> &Matrix<T> {
        &self.mask_in
    }

    pub fn output_mask(&self) -> &Matrix<T> {
        &self.mask_out
    }

    pub fn input_weight_mut(&mut self) -> &mut Matrix<T> {
        self.w_in.value_mut()
    }

    pub fn mu_weight_mut(&mut self) -> &mut Matrix<T> {
        self.w_mu.value_mut()
    }

    pub fn mu_bias_mut(&mut self) -> &mut Matrix<T> {
        self.b_mu.value_mut()
    }

    pub fn alpha_weight_mut(&mut self) -> &mut Matrix<T> {
        self.w_alpha.value_mut()
    }

    pub fn alpha_bias_mut(&mut self) -> &mut Matrix<T> {
        self.b_alpha.value_mut()
    }

    /// Records `(μ(x), α(x))` for a batch on the tape.
    pub fn shift_and_log_scale(&self, tape: &mut Tape<T>, x: Var) -> Result<(Var, Var)> {
        let w_in = tape.param(&self.w_in);
        let b_in = tape.param(&self.b_in);
        let pre = tape.masked_affine(x, w_in, Some(b_in), Some(self.mask_in.clone()))?;
        let h = tape.tanh(pre);
        let w_mu = tape.param(&self.w_mu);
        let b_mu = tape.param(&self.b_mu);
        let mu = tape.masked_affine(h, w_mu, Some(b_mu), Some(self.mask_out.clone()))?;
        let w_alpha = tape.param(&self.w_alpha);
        let b_alpha = tape.param(&self.b_alpha);
        let raw = tape.masked_affine(h, w_alpha, Some(b_alpha), Some(self.mask_out.clone()))?;
        let bound = T::of(ALPHA_BOUND);
        let squashed = tape.scale(raw, T::one() / bound);
        let squashed = tape.tanh(squashed);
        let alpha = tape.scale(squashed, bound);
        Ok((mu, alpha))
    }

    /// Tape-free `(μ, α)` for one row, mirroring [`Self::shift_and_log_scale`].
    fn shift_and_log_scale_row(&self, x: &[T]) -> (Vec<T>, Vec<T>) {
        let w_in = self.w_in.value();
        let b_in = self.b_in.value().as_slice();
        let mut h = vec![T::zero(); self.hidden];
        for (j, hj) in h.iter_mut().enumerate() {
            let mut acc = b_in[j];
            for (i, &xi) in x.iter().enumerate() {
                acc += xi * (w_in[(j, i)] * self.mask_in[(j, i)]);
            }
            *hj = acc.tanh();
        }
        let head = |w: &Parameter<T>, b: &Parameter<T>| -> Vec<T> {
            (0..self.dim)
                .map(|o| {
                    let mut acc = b.value().as_slice()[o];
                    for (j, &hj) in h.iter().enumerate() {
                        acc += hj * (w.value()[(o, j)] * self.mask_out[(o, j)]);
                    }
                    acc
                })
                .collect()
        };
        let mu = head(&self.w_mu, &self.b_mu);
        let bound = T::of(ALPHA_BOUND);
        let alpha = head(&self.w_alpha, &self.b_alpha)
            .into_iter()
            .map(|a| (a * (T::one() / bound)).tanh() * bound)
            .collect();
        (mu, alpha)
    }

    /// Solves `u_i = (x_i − μ_i(x)) e^{−α_i(x)}` for `x`, one coordinate at a time.
    fn invert_row(&self, u: &[T]) -> Vec<T> {
        let mut x = vec![T::zero(); self.dim];
        for i in 0..self.dim {
            let (mu, alpha) = self.shift_and_log_scale_row(&x);
            x[i] = u[i] * alpha[i].exp() + mu[i];
        }
        x
    }

    fn write_to(&self, w: &mut ByteWriter) {
        for &d in &self.hidden_degrees {
            w.len_u32(d);
        }
        for p in self.parameters() {
            w.matrix(p.value());
        }
    }

    fn read_from(r: &mut ByteReader<'_>, dim: usize, hidden: usize, first_id: u32) -> Result<Self> {
        let at = r.offset();
        let degrees = (0..hidden).map(|_| r.usize32()).collect::<Result<Vec<_>>>()?;
        let w = [
            r.matrix(hidden, dim)?,
            r.matrix(1, hidden)?,
            r.matrix(dim, hidden)?,
            r.matrix(1, dim)?,
            r.matrix(dim, hidden)?,
            r.matrix(1, dim)?,
        ];
        Self::from_parts(dim, degrees, first_id, w)
            .map_err(|e| DlsaError::format(at, format!("invalid MADE block: {e}")))
    }
}

impl<T: Scalar> HasParameters<T> for MadeNetwork<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        vec![&self.w_in, &self.b_in, &self.w_mu, &self.b_mu, &self.w_alpha, &self.b_alpha]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        vec![
            &mut self.w_in,
            &mut self.b_in,
            &mut self.w_mu,
            &mut self.b_mu,
            &mut self.w_alpha,
            &mut self.b_alpha,
        ]
    }
}

/// One flow block: a MADE transform applied in a permuted coordinate order.
///
/// The block reads coordinates as `x[permutation[0]], x[permutation[1]], …`,
/// so the permutation fixes its autoregressive ordering; outputs are written
/// back to the original coordinate positions.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowBlock<T> {
    pub made: MadeNetwork<T>,
    pub permutation: Vec<usize>,
}

impl<T> FlowBlock<T> {
    pub fn inverse_permutation(&self) -> Vec<usize> {
        let mut inv = vec![0; self.permutation.len()];
        for (j, &src) in self.permutation.iter().enumerate() {
            inv[src] = j;
        }
        inv
    }
}

/// Ordered stack of MAF blocks mapping features to latent codes and back.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStack<T> {
    dim: usize,
    blocks: Vec<FlowBlock<T>>,
}

fn is_permutation(p: &[usize], n: usize) -> bool {
    if p.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    for &i in p {
        if i >= n || seen[i] {
            return false;
        }
        seen[i] = true;
    }
    true
}

/// Builds a `blocks`-deep MAF on `dim` features. Every block starts as the
/// identity map; permutations alternate between identity and reversal.
pub fn build_flow<T: Scalar>(dim: usize, blocks: usize, hidden: usize, seed: u64) -> Result<FlowStack<T>> {
    if dim < 2 {
        return Err(DlsaError::contract(format!("flow dimension must be ≥ 2, got {dim}")));
    }
    if blocks == 0 {
        return Err(DlsaError::contract("flow needs at least one block"));
    }
    if hidden < dim {
        return Err(DlsaError::contract(format!(
            "hidden width {hidden} smaller than dimension {dim}"
        )));
    }
    FlowStack::with_alternating_permutations(dim, blocks, hidden, seed)
}

impl<T: Scalar> FlowStack<T> {
    /// Same construction as [`build_flow`] without the `dim ≥ 2` requirement;
    /// a one-dimensional flow reduces to a learned affine map.
    pub fn with_alternating_permutations(dim: usize, blocks: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut rng = crate::seeded_rng(seed);
        let mut out = Vec::with_capacity(blocks);
        for b in 0..blocks {
            let made = MadeNetwork::new(dim, hidden, 6 * b as u32, &mut rng)?;
            let permutation = if b % 2 == 0 {
                (0..dim).collect()
            } else {
                (0..dim).rev().collect()
            };
            out.push(FlowBlock { made, permutation });
        }
        Self::from_blocks(out)
    }

    pub fn from_blocks(blocks: Vec<FlowBlock<T>>) -> Result<Self> {
        let Some(first) = blocks.first() else {
            return Err(DlsaError::contract("flow needs at least one block"));
        };
        let dim = first.made.dim();
        for (i, b) in blocks.iter().enumerate() {
            if b.made.dim() != dim {
                return Err(DlsaError::dim(
                    "FlowStack::from_blocks",
                    format!("block {i} has dimension {}, expected {dim}", b.made.dim()),
                ));
            }
            if !is_permutation(&b.permutation, dim) {
                return Err(DlsaError::contract(format!("block {i} permutation is not a bijection")));
            }
        }
        Ok(FlowStack { dim, blocks })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[FlowBlock<T>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [FlowBlock<T>] {
        &mut self.blocks
    }

    /// Records the density direction on the tape; returns `(z: B×D, logdet: B×1)`.
    pub fn inverse_on_tape(&self, tape: &mut Tape<T>, x: Var) -> Result<(Var, Var)> {
        let cols = tape.value(x).cols();
        if cols != self.dim {
            return Err(DlsaError::dim(
                "inverse_with_logdet",
                format!("input has {cols} columns, flow expects {}", self.dim),
            ));
        }
        if !tape.value(x).all_finite() {
            return Err(DlsaError::Numeric("flow input contains non-finite values".into()));
        }
        let mut cur = x;
        let mut logdet: Option<Var> = None;
        for (i, block) in self.blocks.iter().enumerate() {
            let ordered = tape.gather_cols(cur, block.permutation.clone())?;
            let (mu, alpha) = block.made.shift_and_log_scale(tape, ordered)?;
            let centred = tape.sub(ordered, mu)?;
            let neg_alpha = tape.neg(alpha);
            let inv_scale = tape.exp(neg_alpha);
            let u = tape.mul(centred, inv_scale)?;
            let block_logdet = tape.sum_rows(neg_alpha);
            logdet = Some(match logdet {
                None => block_logdet,
                Some(acc) => tape.add(acc, block_logdet)?,
            });
            cur = tape.gather_cols(u, block.inverse_permutation())?;
            if !tape.value(cur).all_finite() {
                return Err(DlsaError::Numeric(format!("non-finite latent after flow block {i}")));
            }
        }
        Ok((cur, logdet.expect("at least one block")))
    }

    /// Maps features to latent codes, returning `(z, log|det ∂z/∂x|)` per row.
    pub fn inverse_with_logdet(&self, x: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (z, logdet) = self.inverse_on_tape(&mut tape, xv)?;
        Ok((tape.value(z).clone(), tape.value(logdet).as_slice().to_vec()))
    }

    /// Maps latent codes back to features.
    pub fn forward(&self, z: &Matrix<T>) -> Result<Matrix<T>> {
        if z.cols() != self.dim {
            return Err(DlsaError::dim(
                "forward",
                format!("latent has {} columns, flow expects {}", z.cols(), self.dim),
            ));
        }
        if !z.all_finite() {
            return Err(DlsaError::Numeric("latent input contains non-finite values".into()));
        }
        let mut out = z.clone();
        for r in 0..z.rows() {
            let mut cur = z.row(r).to_vec();
            for (i, block) in self.blocks.iter().enumerate().rev() {
                let u: Vec<T> = block.permutation.iter().map(|&src| cur[src]).collect();
                let ordered = block.made.invert_row(&u);
                for (j, &src) in block.permutation.iter().enumerate() {
                    cur[src] = ordered[j];
                }
                if cur.iter().any(|v| !v.is_finite()) {
                    return Err(DlsaError::Numeric(format!("non-finite value inverting flow block {i}")));
                }
            }
            out.row_mut(r).copy_from_slice(&cur);
        }
        Ok(out)
    }

    pub(crate) fn write_to(&self, w: &mut ByteWriter) {
        w.len_u32(self.blocks.len());
        w.len_u32(self.blocks[0].made.hidden());
        for b in &self.blocks {
            for &p in &b.permutation {
                w.len_u32(p);
            }
            b.made.write_to(w);
        }
    }

    pub(crate) fn read_from(r: &mut ByteReader<'_>, dim: usize) -> Result<Self> {
        let at = r.offset();
        let n_blocks = r.usize32()?;
        let hidden = r.usize32()?;
        if n_blocks == 0 || hidden == 0 {
            return Err(DlsaError::format(at, "flow with zero blocks or zero hidden width"));
        }
        let mut blocks = Vec::with_capacity(n_blocks);
        for b in 0..n_blocks {
            let permutation = (0..dim).map(|_| r.usize32()).collect::<Result<Vec<_>>>()?;
            let made = MadeNetwork::read_from(r, dim, hidden, 6 * b as u32)?;
            blocks.push(FlowBlock { made, permutation });
        }
        Self::from_blocks(blocks).map_err(|e| DlsaError::format(at, e.to_string()))
    }
}

impl<T: Scalar> HasParameters<T> for FlowStack<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        self.blocks.iter().flat_map(|b| b.made.parameters()).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.blocks.iter_mut().flat_map(|b| b.made.parameters_mut()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randomize(flow: &mut FlowStack<f64>, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in flow.parameters_mut() {
            for v in p.value_mut().as_mut_slice() {
                *v = rng.random_range(-scale..scale);
            }
        }
    }

    fn random_batch(rows: usize, dim: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(rows, dim, (0..rows * dim).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn fresh_flow_is_identity() {
        let flow = build_flow::<f64>(5, 2, 20, 1).unwrap();
        let x = random_batch(7, 5, 2);
        let (z, logdet) = flow.inverse_with_logdet(&x).unwrap();
        assert_eq!(z, x);
        assert!(logdet.iter().all(|&l| l == 0.0));
        assert_eq!(flow.forward(&x).unwrap(), x);
    }

    #[test]
    fn construction_rules() {
        let flow = build_flow::<f64>(4, 3, 16, 0).unwrap();
        assert_eq!(flow.blocks()[0].permutation, vec![0, 1, 2, 3]);
        assert_eq!(flow.blocks()[1].permutation, vec![3, 2, 1, 0]);
        assert_eq!(flow.blocks()[2].permutation, vec![0, 1, 2, 3]);
        assert!(matches!(build_flow::<f64>(1, 1, 4, 0), Err(DlsaError::Contract(_))));
        assert!(build_flow::<f64>(4, 0, 16, 0).is_err());
        assert!(build_flow::<f64>(4, 1, 3, 0).is_err());
        let ids: Vec<u32> = flow.parameters().iter().map(|p| p.id().0).collect();
        assert_eq!(ids, (0..18).collect::<Vec<_>>());
    }

    #[test]
    fn masks_follow_degree_rule() {
        let made = MadeNetwork::<f64>::new(8, 64, 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // every output i is connected (through some hidden unit) to every input j < i and no other
        for i in 0..8 {
            for j in 0..8 {
                let path = (0..64).any(|h| made.output_mask()[(i, h)] == 1.0 && made.input_mask()[(h, j)] == 1.0);
                assert_eq!(path, j < i, "output {i}, input {j}");
            }
        }
    }

    #[test]
    fn autoregressive_property_by_perturbation() {
        let dim = 8;
        let mut flow = build_flow::<f64>(dim, 2, 64, 9).unwrap();
        randomize(&mut flow, 4, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for block in flow.blocks() {
            for _ in 0..20 {
                let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
                let (mu0, a0) = block.made.shift_and_log_scale_row(&x);
                for j in 0..dim {
                    let mut xp = x.clone();
                    xp[j] += 0.75;
                    let (mu1, a1) = block.made.shift_and_log_scale_row(&xp);
                    for i in 0..=j {
                        assert_eq!(mu0[i], mu1[i], "μ_{i} moved when x_{j} changed");
                        assert_eq!(a0[i], a1[i], "α_{i} moved when x_{j} changed");
                    }
                    // the perturbation reaches at least one later output
                    if j + 1 < dim {
                        assert!((j + 1..dim).any(|i| mu0[i] != mu1[i] || a0[i] != a1[i]));
                    }
                }
            }
        }
    }

    #[test]
    fn tape_and_row_paths_agree() {
        let mut flow = build_flow::<f64>(6, 1, 24, 3).unwrap();
        randomize(&mut flow, 8, 0.4);
        let x = random_batch(3, 6, 1);
        let made = &flow.blocks()[0].made;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (mu, alpha) = made.shift_and_log_scale(&mut tape, xv).unwrap();
        for r in 0..3 {
            let (m, a) = made.shift_and_log_scale_row(x.row(r));
            for i in 0..6 {
                assert!((tape.value(mu)[(r, i)] - m[i]).abs() < 1e-13);
                assert!((tape.value(alpha)[(r, i)] - a[i]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn constant_log_scale_gives_linear_logdet() {
        let dim = 6;
        let mut flow = build_flow::<f64>(dim, 1, 24, 0).unwrap();
        let c = 0.8;
        // raw head output b with B·tanh(b/B) = c
        let raw = ALPHA_BOUND * (c / ALPHA_BOUND).atanh();
        flow.blocks_mut()[0].made.alpha_bias_mut().fill(raw);
        let x = random_batch(4, dim, 5);
        let (_, logdet) = flow.inverse_with_logdet(&x).unwrap();
        for l in logdet {
            assert!((l - (-(dim as f64) * c)).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_random_weights() {
        let mut flow = build_flow::<f64>(5, 3, 20, 2).unwrap();
        randomize(&mut flow, 21, 0.6);
        let x = random_batch(50, 5, 6);
        let (z, _) = flow.inverse_with_logdet(&x).unwrap();
        let back = flow.forward(&z).unwrap();
        for (a, b) in back.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn round_trip_at_clamp_boundary() {
        let mut flow = build_flow::<f64>(4, 2, 16, 2).unwrap();
        randomize(&mut flow, 3, 0.3);
        for b in flow.blocks_mut() {
            // saturate the α clamp
            b.made.alpha_bias_mut().fill(60.0);
        }
        let x = random_batch(20, 4, 9);
        let (z, logdet) = flow.inverse_with_logdet(&x).unwrap();
        for l in &logdet {
            assert!((l + 2.0 * 4.0 * ALPHA_BOUND).abs() < 1e-3);
        }
        let back = flow.forward(&z).unwrap();
        for (a, b) in back.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn dimension_and_finiteness_errors() {
        let flow = build_flow::<f64>(3, 1, 8, 0).unwrap();
        assert!(matches!(
            flow.inverse_with_logdet(&Matrix::zeros(2, 4)),
            Err(DlsaError::Dimension { .. })
        ));
        let mut x = Matrix::zeros(1, 3);
        x[(0, 1)] = f64::NAN;
        assert!(matches!(flow.inverse_with_logdet(&x), Err(DlsaError::Numeric(_))));
        assert!(matches!(flow.forward(&x), Err(DlsaError::Numeric(_))));
    }

    #[test]
    fn serialization_round_trip() {
        let mut flow = build_flow::<f64>(4, 2, 16, 2).unwrap();
        randomize(&mut flow, 1, 1.0);
        let mut w = ByteWriter::new();
        flow.write_to(&mut w);
        let bytes = w.into_inner();
        let mut r = ByteReader::new(&bytes, 0);
        let back = FlowStack::<f64>::read_from(&mut r, 4).unwrap();
        r.expect_end().unwrap();
        assert_eq!(back, flow);
    }
}
