//! Kernels, Gram matrices and Gaussian-process draws over training inputs.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Covariance function of the latent decision process.
///
/// `Linear` is `variance * <x, y> + bias`, the covariance induced by a
/// Gaussian prior `w ~ N(0, variance I)`, `b ~ N(0, bias)` on a linear
/// discriminant. The defaults (1, 0) give the plain dot product.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelSpec {
    Linear { variance: f64, bias: f64 },
    Rbf { gamma: f64 },
}

impl KernelSpec {
    pub fn linear() -> Self {
        KernelSpec::Linear {
            variance: 1.0,
            bias: 0.0,
        }
    }

    pub fn rbf(gamma: f64) -> Self {
        KernelSpec::Rbf { gamma }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Linear { variance, bias } => {
                if !(variance > 0.0 && variance.is_finite()) || !(bias >= 0.0 && bias.is_finite()) {
                    return Err(Error::config("linear kernel needs variance > 0 and bias >= 0"));
                }
            }
            KernelSpec::Rbf { gamma } => {
                if !(gamma > 0.0 && gamma.is_finite()) {
                    return Err(Error::config("rbf kernel needs gamma > 0"));
                }
            }
        }
        Ok(())
    }

    /// Kernel value without the dimension check.
    #[inline]
    pub fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        match *self {
            KernelSpec::Linear { variance, bias } => {
                variance * x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() + bias
            }
            KernelSpec::Rbf { gamma } => {
                let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                (-gamma * d2).exp()
            }
        }
    }
}

pub fn kernel_eval(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension {
            expected: x.len(),
            got: y.len(),
        });
    }
    Ok(spec.eval_unchecked(x, y))
}

/// First jitter tried after a plain factorization fails.
pub const JITTER_START: f64 = 1e-10;
/// Largest jitter before giving up.
pub const JITTER_MAX: f64 = 1e-2;
/// Smallest accepted squared pivot, relative to the largest diagonal entry.
const PIVOT_FLOOR: f64 = 1e-13;

/// Kernel matrix over the training inputs plus a lower Cholesky factor of
/// `values + jitter * I`.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    values: DMatrix<f64>,
    jitter: f64,
    factor: DMatrix<f64>,
}

impl GramMatrix {
    /// Factorizes a symmetric matrix, escalating the diagonal jitter by
    /// decades from [`JITTER_START`] until the factorization is usable.
    pub fn from_values(values: DMatrix<f64>) -> Result<Self> {
        if !values.is_square() || values.nrows() == 0 {
            return Err(Error::degenerate("gram matrix must be square and nonempty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                stage: "gram",
                step: 0,
            });
        }
        let n = values.nrows();
        let scale = (0..n).map(|i| values[(i, i)].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let mut jitter = 0.0;
        loop {
            let mut shifted = values.clone();
            for i in 0..n {
                shifted[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(shifted) {
                let factor = chol.unpack();
                let min_pivot = (0..n).map(|i| factor[(i, i)].powi(2)).fold(f64::INFINITY, f64::min);
                if min_pivot >= PIVOT_FLOOR * scale {
                    return Ok(GramMatrix {
                        values,
                        jitter,
                        factor,
                    });
                }
            }
            jitter = if jitter == 0.0 { JITTER_START } else { jitter * 10.0 };
            if jitter > JITTER_MAX * (1.0 + 1e-9) {
                return Err(Error::NotPositiveDefinite { jitter: JITTER_MAX });
            }
        }
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Lower-triangular `L` with `L Lᵀ = values + jitter I`.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    /// `values * v` into `out`.
    pub fn mul_into(&self, v: &[f64], out: &mut [f64]) {
        let n = self.len();
        out.iter_mut().for_each(|o| *o = 0.0);
        for (j, &vj) in v.iter().enumerate() {
            if vj == 0.0 {
                continue;
            }
            let col = self.values.column(j);
            for i in 0..n {
                out[i] += col[i] * vj;
            }
        }
    }
}

/// Gram matrix of `spec` over the dataset's feature vectors.
pub fn gram(spec: &KernelSpec, ds: &Dataset) -> Result<GramMatrix> {
    gram_from_points(spec, &ds.points())
}

pub fn gram_from_points(spec: &KernelSpec, points: &[&[f64]]) -> Result<GramMatrix> {
    spec.validate()?;
    let n = points.len();
    let mut values = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let k = spec.eval_unchecked(points[i], points[j]);
            values[(i, j)] = k;
            values[(j, i)] = k;
        }
    }
    GramMatrix::from_values(values)
}

/// `vᵀ K v` on the unjittered values.
pub fn quadratic_form(g: &GramMatrix, v: &[f64]) -> Result<f64> {
    if v.len() != g.len() {
        return Err(Error::Dimension {
            expected: g.len(),
            got: v.len(),
        });
    }
    let v = DVector::from_column_slice(v);
    Ok(v.dot(&(&g.values * &v)))
}

/// One draw of `mean + L z`, `z` standard normal.
pub fn sample_gp<R: rand::Rng + ?Sized>(g: &GramMatrix, mean: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if mean.len() != g.len() {
        return Err(Error::Dimension {
            expected: g.len(),
            got: mean.len(),
        });
    }
    let mut z = vec![0.0; g.len()];
    let mut out = vec![0.0; g.len()];
    sample_gp_into(g, mean, rng, &mut z, &mut out);
    Ok(out)
}

/// Buffer-reusing variant of [`sample_gp`] for inner loops.
pub(crate) fn sample_gp_into<R: rand::Rng + ?Sized>(
    g: &GramMatrix,
    mean: &[f64],
    rng: &mut R,
    z: &mut [f64],
    out: &mut [f64],
) {
    let n = g.len();
    for zi in z.iter_mut() {
        *zi = rng.sample(StandardNormal);
    }
    out.copy_from_slice(mean);
    for (j, &zj) in z.iter().enumerate() {
        let col = g.factor.column(j);
        for i in j..n {
            out[i] += col[i] * zj;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Label;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_points(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::from_seed(seed);
        (0..n).map(|_| (0..dim).map(|_| r.random_range(-2.0..2.0)).collect()).collect()
    }

    #[test]
    fn kernel_values() {
        let rbf = KernelSpec::rbf(1.0);
        assert_eq!(kernel_eval(&rbf, &[0.3, -1.0], &[0.3, -1.0]).unwrap(), 1.0);
        let v = kernel_eval(&rbf, &[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((v - 0.367_879_441_171_442_3).abs() < 1e-15);
        assert_eq!(kernel_eval(&KernelSpec::linear(), &[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert!(matches!(
            kernel_eval(&rbf, &[1.0], &[1.0, 2.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn linear_prior_variances() {
        let k = KernelSpec::Linear {
            variance: 0.5,
            bias: 2.0,
        };
        assert_eq!(kernel_eval(&k, &[1.0, 2.0], &[3.0, 4.0]).unwrap(), 7.5);
        assert!(KernelSpec::rbf(0.0).validate().is_err());
    }

    #[test]
    fn rbf_gram_has_unit_diagonal() {
        let pts = random_points(15, 3, 1);
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let g = gram_from_points(&KernelSpec::rbf(0.7), &refs).unwrap();
        for i in 0..15 {
            assert_eq!(g.get(i, i), 1.0);
            for j in 0..15 {
                assert_eq!(g.get(i, j), g.get(j, i));
            }
        }
    }

    #[test]
    fn one_point_linear() {
        let ds = Dataset::from_parts(vec![vec![2.0]], vec![Label::Pos]).unwrap();
        let g = gram(&KernelSpec::linear(), &ds).unwrap();
        assert_eq!(g.values().as_slice(), &[4.0]);
        assert_eq!(g.jitter(), 0.0);
    }

    #[test]
    fn duplicates_need_jitter() {
        let pts = [vec![0.0, 1.0], vec![0.0, 1.0], vec![2.0, -1.0]];
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let g = gram_from_points(&KernelSpec::rbf(1.0), &refs).unwrap();
        assert!(g.jitter() > 0.0);
        assert!(g.jitter() <= JITTER_MAX);
        assert_factor_reproduces(&g);
    }

    #[test]
    fn rank_deficient_linear_gram_is_repaired() {
        let pts = random_points(40, 2, 5);
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let g = gram_from_points(&KernelSpec::linear(), &refs).unwrap();
        assert!(g.jitter() > 0.0);
        assert_factor_reproduces(&g);
    }

    #[test]
    fn hopeless_matrix_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 5.0, 5.0, 1.0]);
        assert!(matches!(
            GramMatrix::from_values(m),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    fn assert_factor_reproduces(g: &GramMatrix) {
        let l = g.factor();
        let mut target = g.values().clone();
        for i in 0..g.len() {
            target[(i, i)] += g.jitter();
        }
        let rel = (l * l.transpose() - &target).norm() / target.norm();
        assert!(rel < 1e-8, "relative reconstruction error {rel}");
    }

    #[test]
    fn quadratic_form_cases() {
        let g = GramMatrix::from_values(DMatrix::from_element(1, 1, 4.0)).unwrap();
        assert_eq!(quadratic_form(&g, &[3.0]).unwrap(), 36.0);
        assert_eq!(quadratic_form(&g, &[0.0]).unwrap(), 0.0);
        assert!(quadratic_form(&g, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn quadratic_form_matches_double_loop() {
        let pts = random_points(12, 2, 9);
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let g = gram_from_points(&KernelSpec::rbf(0.4), &refs).unwrap();
        let mut r = rng::from_seed(10);
        let v: Vec<f64> = (0..12).map(|_| r.random_range(-3.0..3.0)).collect();
        let mut naive = 0.0;
        for i in 0..12 {
            for j in 0..12 {
                naive += v[i] * g.get(i, j) * v[j];
            }
        }
        let q = quadratic_form(&g, &v).unwrap();
        assert!((q - naive).abs() <= 1e-10 * naive.abs().max(1.0));
    }

    #[test]
    fn gp_draw_moments() {
        let pts = random_points(4, 2, 21);
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let g = gram_from_points(&KernelSpec::rbf(0.5), &refs).unwrap();
        let mean = [1.0, -2.0, 0.5, 3.0];
        let mut r = rng::from_seed(22);
        let n = 50_000;
        let draws: Vec<Vec<f64>> = (0..n).map(|_| sample_gp(&g, &mean, &mut r).unwrap()).collect();
        let avg: Vec<f64> = (0..4).map(|i| draws.iter().map(|d| d[i]).sum::<f64>() / n as f64).collect();
        for i in 0..4 {
            let tol = 4.0 * (g.get(i, i) / n as f64).sqrt();
            assert!((avg[i] - mean[i]).abs() < tol);
        }
        let mut cov = DMatrix::zeros(4, 4);
        for d in &draws {
            for i in 0..4 {
                for j in 0..4 {
                    cov[(i, j)] += (d[i] - avg[i]) * (d[j] - avg[j]);
                }
            }
        }
        cov /= (n - 1) as f64;
        let mut target = g.values().clone();
        for i in 0..4 {
            target[(i, i)] += g.jitter();
        }
        let rel = (cov - &target).norm() / target.norm();
        assert!(rel < 0.05, "covariance error {rel}");
    }

    #[test]
    fn gp_draw_is_deterministic() {
        let g = GramMatrix::from_values(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])).unwrap();
        let a = sample_gp(&g, &[0.0, 0.0], &mut rng::from_seed(4)).unwrap();
        let b = sample_gp(&g, &[0.0, 0.0], &mut rng::from_seed(4)).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn rbf_values_in_unit_interval(x in proptest::collection::vec(-50.0f64..50.0, 3), y in proptest::collection::vec(-50.0f64..50.0, 3), gamma in 1e-3f64..1e3) {
            let v = kernel_eval(&KernelSpec::rbf(gamma), &x, &y).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn jittered_gram_is_psd(seed: u64, v in proptest::collection::vec(-5.0f64..5.0, 8)) {
            let pts = random_points(8, 2, seed);
            let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
            let g = gram_from_points(&KernelSpec::rbf(2.0), &refs).unwrap();
            let q = quadratic_form(&g, &v).unwrap() + g.jitter() * v.iter().map(|a| a * a).sum::<f64>();
            prop_assert!(q >= -1e-8 * v.iter().map(|a| a * a).sum::<f64>());
        }
    }
}
