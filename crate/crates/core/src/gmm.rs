//! Fixed unit-covariance Gaussian mixture on the latent space.
//!
//! Components are `N(μ_k, I)` with a uniform prior `1/K`; the centres are
//! drawn once from `N(0, σ²)` and never trained. All densities stay in log
//! space.

use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{DlsaError, Result};
use crate::flow::FlowStack;
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// `√(3 / 2D)`: puts two random centres about three unit standard deviations
/// apart on average, since `E‖μ_p − μ_q‖² = 2Dσ²`.
pub fn auto_center_scale(dim: usize) -> f64 {
    (3.0 / (2.0 * dim as f64)).sqrt()
}

/// Centre scale used when the configuration does not set one: `0.05` for
/// 1024-dimensional features, [`auto_center_scale`] otherwise.
pub fn default_center_scale(dim: usize) -> f64 {
    if dim == 1024 {
        0.05
    } else {
        auto_center_scale(dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixtureLatent<T> {
    centers: Matrix<T>,
    /// `−½‖μ_k‖² − D/2·log 2π`, cached as a 1×K row.
    offsets: Matrix<T>,
    sigma: f64,
}

/// Draws `k` centres in `dim` dimensions, each coordinate i.i.d. `N(0, σ²)`.
/// `sigma = None` selects [`auto_center_scale`].
pub fn init_centers<T: Scalar>(k: usize, dim: usize, sigma: Option<f64>, seed: u64) -> Result<GaussianMixtureLatent<T>> {
    if k < 2 {
        return Err(DlsaError::contract(format!("need at least 2 clusters, got {k}")));
    }
    if dim == 0 {
        return Err(DlsaError::contract("latent dimension must be ≥ 1"));
    }
    let sigma = sigma.unwrap_or_else(|| auto_center_scale(dim));
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(DlsaError::contract(format!("centre scale must be positive, got {sigma}")));
    }
    let normal = Normal::new(0.0, sigma).expect("positive finite sigma");
    let mut rng = crate::seeded_rng(seed);
    let data = (0..k * dim).map(|_| T::of(normal.sample(&mut rng))).collect();
    let mut g = GaussianMixtureLatent::from_centers(Matrix::from_vec(k, dim, data)?)?;
    g.sigma = sigma;
    Ok(g)
}

impl<T: Scalar> GaussianMixtureLatent<T> {
    /// Mixture with explicit centres (one per row). Any `K ≥ 1` is accepted.
    pub fn from_centers(centers: Matrix<T>) -> Result<Self> {
        if centers.rows() == 0 || centers.cols() == 0 {
            return Err(DlsaError::contract("mixture needs at least one non-empty centre"));
        }
        if !centers.all_finite() {
            return Err(DlsaError::Numeric("non-finite mixture centre".into()));
        }
        let half_log_2pi = T::of(0.5 * (2.0 * std::f64::consts::PI).ln()) * T::of_usize(centers.cols());
        let offsets: Vec<T> = (0..centers.rows())
            .map(|k| {
                let sq = centers.row(k).iter().fold(T::zero(), |s, &m| s + m * m);
                -(sq * T::of(0.5)) - half_log_2pi
            })
            .collect();
        Ok(GaussianMixtureLatent {
            offsets: Matrix::row_vector(&offsets),
            centers,
            sigma: f64::NAN,
        })
    }

    pub fn k(&self) -> usize {
        self.centers.rows()
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }

    pub fn centers(&self) -> &Matrix<T> {
        &self.centers
    }

    /// Scale the centres were drawn with (NaN for hand-set centres).
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Records `log N(z | μ_k, I)` for every row and component, B×K.
    pub fn log_components_on_tape(&self, tape: &mut Tape<T>, z: Var) -> Result<Var> {
        let cols = tape.value(z).cols();
        if cols != self.dim() {
            return Err(DlsaError::dim(
                "latent_logpdf",
                format!("latent has {cols} columns, mixture expects {}", self.dim()),
            ));
        }
        let centers = tape.constant(self.centers.clone());
        let offsets = tape.constant(self.offsets.clone());
        let cross = tape.affine(z, centers, Some(offsets))?;
        let sq = tape.mul(z, z)?;
        let sq = tape.sum_rows(sq);
        let half_sq = tape.scale(sq, -T::of(0.5));
        tape.add_col(cross, half_sq)
    }

    /// Records `log P(z) = logsumexp_k log N(z | μ_k, I) − log K`, B×1.
    pub fn log_density_on_tape(&self, tape: &mut Tape<T>, components: Var) -> Result<Var> {
        let lse = tape.logsumexp_rows(components)?;
        let rows = tape.value(lse).rows();
        let log_k = tape.constant(Matrix::filled(rows, 1, -T::of_usize(self.k()).ln()));
        tape.add(lse, log_k)
    }

    fn one_row(&self, z: &[T]) -> Result<(Tape<T>, Var)> {
        if z.len() != self.dim() {
            return Err(DlsaError::dim(
                "latent_logpdf",
                format!("latent has length {}, mixture expects {}", z.len(), self.dim()),
            ));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(DlsaError::Numeric("latent vector contains non-finite values".into()));
        }
        let mut tape = Tape::new();
        let zv = tape.constant(Matrix::row_vector(z));
        let comps = self.log_components_on_tape(&mut tape, zv)?;
        Ok((tape, comps))
    }

    /// `log P(z)` under the uniform-prior mixture.
    pub fn latent_logpdf(&self, z: &[T]) -> Result<T> {
        let (mut tape, comps) = self.one_row(z)?;
        let ll = self.log_density_on_tape(&mut tape, comps)?;
        Ok(tape.scalar(ll))
    }

    /// Cluster responsibilities `P(h = k | z)`.
    pub fn posterior(&self, z: &[T]) -> Result<Vec<T>> {
        let (mut tape, comps) = self.one_row(z)?;
        let post = tape.softmax_rows(comps)?;
        Ok(tape.value(post).as_slice().to_vec())
    }

    /// Most responsible cluster, ties broken toward the lowest index.
    pub fn predict_cluster(&self, z: &[T]) -> Result<usize> {
        Ok(argmax(&self.posterior(z)?))
    }

    pub(crate) fn write_to(&self, w: &mut ByteWriter) {
        w.f64(self.sigma);
        w.matrix(&self.centers);
    }

    pub(crate) fn read_from(r: &mut ByteReader<'_>, k: usize, dim: usize) -> Result<Self> {
        let sigma = r.f64()?;
        let at = r.offset();
        let centers = r.matrix(k, dim)?;
        let mut g = Self::from_centers(centers).map_err(|e| DlsaError::format(at, e.to_string()))?;
        g.sigma = sigma;
        Ok(g)
    }
}

/// Index of the first maximal entry.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-sample quantities of a flow + mixture pair over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchDensity<T> {
    /// `log P(x)`, one per row.
    pub loglik: Vec<T>,
    pub latent: Matrix<T>,
    /// `P(h = k | x)`, B×K.
    pub posterior: Matrix<T>,
}

impl<T: Scalar> BatchDensity<T> {
    pub fn clusters(&self) -> Vec<usize> {
        (0..self.posterior.rows()).map(|r| argmax(self.posterior.row(r))).collect()
    }
}

/// Records `log P(x) = log P(g⁻¹(x)) + log|det J(g⁻¹)(x)|` for a batch.
/// Returns `(loglik: B×1, latent components: B×K, z: B×D)`.
pub fn sample_loglik_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    flow: &FlowStack<T>,
    mixture: &GaussianMixtureLatent<T>,
    x: Var,
) -> Result<(Var, Var, Var)> {
    let (z, logdet) = flow.inverse_on_tape(tape, x)?;
    let comps = mixture.log_components_on_tape(tape, z)?;
    let latent_ll = mixture.log_density_on_tape(tape, comps)?;
    let ll = tape.add(latent_ll, logdet)?;
    Ok((ll, comps, z))
}

/// Log-likelihood, latent code and posterior for every row of `x`.
///
/// Row results do not depend on which other rows share the batch.
pub fn batch_density<T: Scalar>(
    flow: &FlowStack<T>,
    mixture: &GaussianMixtureLatent<T>,
    x: &Matrix<T>,
) -> Result<BatchDensity<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (ll, comps, z) = sample_loglik_on_tape(&mut tape, flow, mixture, xv)?;
    let post = tape.softmax_rows(comps)?;
    Ok(BatchDensity {
        loglik: tape.value(ll).as_slice().to_vec(),
        latent: tape.value(z).clone(),
        posterior: tape.value(post).clone(),
    })
}

/// `log P(x)` for a single feature vector.
pub fn sample_loglik<T: Scalar>(flow: &FlowStack<T>, mixture: &GaussianMixtureLatent<T>, x: &[T]) -> Result<T> {
    let d = batch_density(flow, mixture, &Matrix::row_vector(x))?;
    Ok(d.loglik[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::build_flow;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

    fn mixture(rows: &[Vec<f64>]) -> GaussianMixtureLatent<f64> {
        GaussianMixtureLatent::from_centers(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn init_centers_rules() {
        let a = init_centers::<f64>(4, 3, Some(0.5), 7).unwrap();
        let b = init_centers::<f64>(4, 3, Some(0.5), 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_centers::<f64>(4, 3, Some(0.5), 8).unwrap());
        assert!(matches!(init_centers::<f64>(4, 3, Some(0.0), 7), Err(DlsaError::Contract(_))));
        assert!(init_centers::<f64>(4, 3, Some(-1.0), 7).is_err());
        assert!(init_centers::<f64>(1, 3, None, 7).is_err());
        assert_eq!(default_center_scale(1024), 0.05);
        assert!((auto_center_scale(1024) - 0.038_273_277_230_987_16).abs() < 1e-15);
        let auto = init_centers::<f64>(3, 1024, None, 1).unwrap();
        assert_eq!(auto.sigma(), auto_center_scale(1024));
    }

    #[test]
    fn center_sample_scale_matches_sigma() {
        let g = init_centers::<f64>(50, 200, Some(0.05), 3).unwrap();
        let var = g.centers().as_slice().iter().map(|v| v * v).sum::<f64>() / 10_000.0;
        assert!((var.sqrt() - 0.05).abs() < 0.002);
    }

    #[test]
    fn single_component_mode() {
        let g = mixture(&[vec![0.3, -1.2, 2.0]]);
        let lp = g.latent_logpdf(&[0.3, -1.2, 2.0]).unwrap();
        assert!((lp - (-3.0 * HALF_LOG_2PI)).abs() < 1e-12);
    }

    #[test]
    fn symmetric_point_between_two_centers() {
        let g = mixture(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let z = [0.0, 0.7];
        let comp = -2.0 * HALF_LOG_2PI - 0.5 * (1.0 + 0.49);
        assert!((g.latent_logpdf(&z).unwrap() - comp).abs() < 1e-12);
        for p in g.posterior(&z).unwrap() {
            assert!((p - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn three_centers_naive_sum() {
        let centers = [vec![1.0, 2.0], vec![-0.5, 0.25], vec![3.0, -1.0]];
        let g = mixture(&centers);
        let naive: f64 = centers
            .iter()
            .map(|c| {
                let d2 = c[0] * c[0] + c[1] * c[1];
                (-(d2 / 2.0)).exp() / (2.0 * std::f64::consts::PI)
            })
            .sum::<f64>()
            / 3.0;
        assert!((g.latent_logpdf(&[0.0, 0.0]).unwrap() - naive.ln()).abs() < 1e-12);
    }

    #[test]
    fn posterior_far_centers_ratio() {
        let g = mixture(&[vec![0.0, 0.0], vec![10.0, 0.0], vec![0.0, 12.0]]);
        let p = g.posterior(&[0.0, 0.0]).unwrap();
        let (e1, e2) = ((-50.0f64).exp(), (-72.0f64).exp());
        let denom = 1.0 + e1 + e2;
        assert!((p[0] - 1.0 / denom).abs() < 1e-20);
        assert!((p[1] - e1 / denom).abs() <= 1e-12 * e1);
        assert!((p[2] - e2 / denom).abs() <= 1e-12 * e2);
    }

    #[test]
    fn tie_breaks_low_and_nearest_center_rule() {
        let g = mixture(&[vec![5.0, 5.0], vec![1.0, 0.0], vec![9.0, 9.0], vec![7.0, 7.0], vec![-1.0, 0.0]]);
        assert_eq!(g.predict_cluster(&[0.0, 0.0]).unwrap(), 1);
        assert_eq!(g.predict_cluster(&[9.0, 9.0]).unwrap(), 2);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = init_centers::<f64>(4, 2, Some(1.5), 2).unwrap();
        for _ in 0..500 {
            let z = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
            let nearest = (0..4)
                .map(|k| {
                    let c = g.centers().row(k);
                    (z[0] - c[0]).powi(2) + (z[1] - c[1]).powi(2)
                })
                .enumerate()
                .fold((0, f64::INFINITY), |b, (k, d)| if d < b.1 { (k, d) } else { b })
                .0;
            assert_eq!(g.predict_cluster(&z).unwrap(), nearest);
        }
    }

    #[test]
    fn dimension_errors() {
        let g = mixture(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        assert!(matches!(g.latent_logpdf(&[0.0]), Err(DlsaError::Dimension { .. })));
        assert!(g.posterior(&[0.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn stable_far_from_centers() {
        let g = init_centers::<f64>(8, 64, None, 4).unwrap();
        let z = vec![1e3 / 8.0; 64];
        assert!(g.latent_logpdf(&z).unwrap().is_finite());
        let p = g.posterior(&z).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_flow_loglik_equals_latent() {
        let flow = build_flow::<f64>(3, 2, 12, 0).unwrap();
        let g = mixture(&[vec![0.5, 0.5, 0.5]]);
        assert!((sample_loglik(&flow, &g, &[0.5, 0.5, 0.5]).unwrap() + 3.0 * HALF_LOG_2PI).abs() < 1e-12);
        let g = init_centers::<f64>(5, 3, None, 1).unwrap();
        let x = [0.2, -1.1, 0.4];
        assert_eq!(sample_loglik(&flow, &g, &x).unwrap(), g.latent_logpdf(&x).unwrap());
    }

    #[test]
    fn batch_rows_independent_of_neighbours() {
        let mut flow = build_flow::<f64>(4, 2, 16, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in crate::autodiff::HasParameters::parameters_mut(&mut flow) {
            for v in p.value_mut().as_mut_slice() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
        let g = init_centers::<f64>(6, 4, None, 1).unwrap();
        let x = Matrix::from_vec(5, 4, (0..20).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let all = batch_density(&flow, &g, &x).unwrap();
        for r in 0..5 {
            let one = sample_loglik(&flow, &g, x.row(r)).unwrap();
            assert_eq!(one.to_bits(), all.loglik[r].to_bits());
        }
    }
}
