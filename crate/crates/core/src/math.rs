//! Numerical kernels shared by every filter: Gaussian densities and draws,
//! log-domain weight normalization, systematic resampling and weighted moments.

use nalgebra::{DMatrix, DVector};
use std::f64::consts::PI;

use crate::error::{FilterError, Result};
use crate::rng::RngStream;

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Relative asymmetry tolerated in a covariance matrix.
pub const SYMMETRY_TOLERANCE: f64 = 1e-9;

/// Relative diagonal jitter applied once when a factorization fails.
pub const CHOLESKY_JITTER: f64 = 1e-9;

/// Wraps an angle to `(-pi, pi]`.
#[inline]
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Lower-triangular Cholesky factor of a covariance matrix.
///
/// `new` requires a positive definite matrix and is used for densities.
/// `semidefinite` accepts rank-deficient PSD matrices (zero pivots produce
/// zero columns) and is used for sampling, where a singular covariance such
/// as a white-acceleration process noise is common.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    dim: usize,
    lower: Vec<f64>,
    log_det: f64,
    rank_deficient: bool,
    jittered: bool,
}

impl CholeskyFactor {
    pub fn new(cov: &Matrix) -> Result<Self> {
        Self::factor(cov, false)
    }

    pub fn semidefinite(cov: &Matrix) -> Result<Self> {
        Self::factor(cov, true)
    }

    fn factor(cov: &Matrix, semidefinite: bool) -> Result<Self> {
        let n = cov.nrows();
        if cov.ncols() != n {
            return Err(FilterError::DimensionMismatch {
                expected: n,
                actual: cov.ncols(),
            });
        }
        check_symmetric(cov)?;
        let mut a: Vec<f64> = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                a.push(cov[(i, j)]);
            }
        }
        if let Some(f) = Self::try_factor(&a, n, semidefinite) {
            return Ok(f);
        }
        let trace: f64 = (0..n).map(|i| a[i * n + i]).sum();
        let jitter = CHOLESKY_JITTER * trace / n.max(1) as f64;
        if jitter > 0.0 && jitter.is_finite() {
            for i in 0..n {
                a[i * n + i] += jitter;
            }
            if let Some(mut f) = Self::try_factor(&a, n, semidefinite) {
                f.jittered = true;
                return Ok(f);
            }
        }
        Err(FilterError::NonPositiveDefinite)
    }

    fn try_factor(a: &[f64], n: usize, semidefinite: bool) -> Option<Self> {
        if a.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
        let tol = 1e-12 * scale;
        let mut l = vec![0.0; n * n];
        let mut log_det = 0.0;
        let mut deficient = false;
        for i in 0..n {
            for j in 0..=i {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if s > tol || (!semidefinite && s > 0.0) {
                        let d = s.sqrt();
                        l[i * n + i] = d;
                        log_det += 2.0 * d.ln();
                    } else if semidefinite && s >= -1e-9 * scale.max(f64::MIN_POSITIVE) {
                        l[i * n + i] = 0.0;
                        deficient = true;
                    } else {
                        return None;
                    }
                } else {
                    let d = l[j * n + j];
                    if d > 0.0 {
                        l[i * n + j] = s / d;
                    } else if s.abs() <= 1e-9 * scale.max(f64::MIN_POSITIVE) {
                        l[i * n + j] = 0.0;
                    } else {
                        return None;
                    }
                }
            }
        }
        Some(Self {
            dim: n,
            lower: l,
            log_det: if deficient { f64::NEG_INFINITY } else { log_det },
            rank_deficient: deficient,
            jittered: false,
        })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `log det(cov)`; `-inf` for a rank-deficient factor.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn is_rank_deficient(&self) -> bool {
        self.rank_deficient
    }

    /// Whether diagonal jitter was needed to factor the matrix.
    pub fn jittered(&self) -> bool {
        self.jittered
    }

    pub fn lower(&self) -> Matrix {
        Matrix::from_row_slice(self.dim, self.dim, &self.lower)
    }

    /// `r^T cov^-1 r` by forward substitution.
    #[inline]
    pub fn mahalanobis_sq(&self, residual: &[f64]) -> f64 {
        debug_assert_eq!(residual.len(), self.dim);
        let n = self.dim;
        let mut y = [0.0f64; 8];
        let mut acc = 0.0;
        if n <= 8 {
            for i in 0..n {
                let mut s = residual[i];
                for k in 0..i {
                    s -= self.lower[i * n + k] * y[k];
                }
                let v = s / self.lower[i * n + i];
                y[i] = v;
                acc += v * v;
            }
        } else {
            let mut y = vec![0.0; n];
            for i in 0..n {
                let mut s = residual[i];
                for k in 0..i {
                    s -= self.lower[i * n + k] * y[k];
                }
                let v = s / self.lower[i * n + i];
                y[i] = v;
                acc += v * v;
            }
        }
        acc
    }

    /// Gaussian log-density of `residual` under `N(0, cov)`.
    #[inline]
    pub fn log_density(&self, residual: &[f64]) -> f64 {
        -0.5 * (self.dim as f64 * LN_2PI + self.log_det + self.mahalanobis_sq(residual))
    }

    /// Writes `mean + L u` into `out`, drawing `u` from `rng` in index order.
    #[inline]
    pub fn sample_into(&self, mean: &[f64], rng: &mut RngStream, out: &mut [f64]) {
        let n = self.dim;
        let mut u = [0.0f64; 8];
        assert!(n <= 8, "sample_into supports dimensions up to 8");
        for v in u.iter_mut().take(n) {
            *v = rng.standard_normal();
        }
        for i in 0..n {
            let mut s = mean[i];
            for (k, uk) in u.iter().enumerate().take(i + 1) {
                s += self.lower[i * n + k] * uk;
            }
            out[i] = s;
        }
    }
}

fn check_symmetric(cov: &Matrix) -> Result<()> {
    let n = cov.nrows();
    let scale = cov.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            worst = worst.max((cov[(i, j)] - cov[(j, i)]).abs());
        }
    }
    if worst > SYMMETRY_TOLERANCE * scale {
        Err(FilterError::NotSymmetric(worst))
    } else {
        Ok(())
    }
}

/// `log N(residual; 0, cov)`.
pub fn gaussian_logpdf(residual: &Vector, cov: &Matrix) -> Result<f64> {
    if residual.len() != cov.nrows() {
        return Err(FilterError::DimensionMismatch {
            expected: cov.nrows(),
            actual: residual.len(),
        });
    }
    let f = CholeskyFactor::new(cov)?;
    Ok(f.log_density(residual.as_slice()))
}

/// One draw from `N(mean, cov)`; `cov` may be singular.
pub fn sample_gaussian(mean: &Vector, cov: &Matrix, rng: &mut RngStream) -> Result<Vector> {
    if mean.len() != cov.nrows() {
        return Err(FilterError::DimensionMismatch {
            expected: cov.nrows(),
            actual: mean.len(),
        });
    }
    let f = CholeskyFactor::semidefinite(cov)?;
    let mut out = Vector::zeros(mean.len());
    f.sample_into(mean.as_slice(), rng, out.as_mut_slice());
    Ok(out)
}

/// Natural-log particle weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LogWeights {
    values: Vec<f64>,
    normalized: bool,
}

impl LogWeights {
    pub fn uniform(n: usize) -> Self {
        let v = -(n as f64).ln();
        Self {
            values: vec![v; n],
            normalized: true,
        }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        self.normalized = false;
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Linear-scale weights `exp(values)`.
    pub fn probabilities(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.exp()).collect()
    }
}

/// Log-sum-exp normalization. NaN entries count as zero weight.
pub fn normalize_logweights(w: &LogWeights) -> Result<LogWeights> {
    let max = w
        .values
        .iter()
        .filter(|v| !v.is_nan())
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if max == f64::NEG_INFINITY {
        return Err(FilterError::AllWeightsDegenerate);
    }
    if max == f64::INFINITY {
        let count = w.values.iter().filter(|&&v| v == f64::INFINITY).count();
        let share = -(count as f64).ln();
        let values = w
            .values
            .iter()
            .map(|&v| if v == f64::INFINITY { share } else { f64::NEG_INFINITY })
            .collect();
        return Ok(LogWeights {
            values,
            normalized: true,
        });
    }
    let sum: f64 = w
        .values
        .iter()
        .map(|&v| if v.is_nan() { 0.0 } else { (v - max).exp() })
        .sum();
    let log_norm = max + sum.ln();
    let values = w
        .values
        .iter()
        .map(|&v| if v.is_nan() { f64::NEG_INFINITY } else { v - log_norm })
        .collect();
    Ok(LogWeights {
        values,
        normalized: true,
    })
}

/// Systematic resampling: ancestor indices for the positions `(j + u0) / n_out`.
pub fn systematic_resample(weights: &[f64], n_out: usize, u0: f64) -> Result<Vec<usize>> {
    if weights.is_empty() || n_out == 0 {
        return Err(FilterError::EmptyInput);
    }
    if !(0.0..1.0).contains(&u0) {
        return Err(FilterError::InvalidWeights(format!("u0 = {u0} outside [0, 1)")));
    }
    if let Some(bad) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
        return Err(FilterError::InvalidWeights(format!("weight {bad}")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(FilterError::InvalidWeights(format!("weights sum to {total}")));
    }
    let mut cumulative = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights {
        acc += w;
        cumulative.push(acc / total);
    }
    let last = weights.len() - 1;
    cumulative[last] = 1.0;

    let mut out = Vec::with_capacity(n_out);
    let mut i = 0;
    let step = 1.0 / n_out as f64;
    for j in 0..n_out {
        let pos = (j as f64 + u0) * step;
        while i < last && cumulative[i] <= pos {
            i += 1;
        }
        out.push(i);
    }
    Ok(out)
}

/// `1 / sum(w_i^2)` for normalized linear weights.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Weighted mean and scatter `sum w_i (x_i - m)(x_i - m)^T`.
pub fn weighted_moments(particles: &[Vector], weights: &[f64]) -> Result<(Vector, Matrix)> {
    if particles.is_empty() {
        return Err(FilterError::EmptyInput);
    }
    if particles.len() != weights.len() {
        return Err(FilterError::LengthMismatch {
            expected: particles.len(),
            actual: weights.len(),
        });
    }
    let dim = particles[0].len();
    let mut flat = Vec::with_capacity(dim * particles.len());
    for p in particles {
        if p.len() != dim {
            return Err(FilterError::DimensionMismatch {
                expected: dim,
                actual: p.len(),
            });
        }
        flat.extend_from_slice(p.as_slice());
    }
    Ok(moments_flat(&flat, dim, Some(weights)))
}

/// Moments of row-major particles; `None` weights means uniform `1/N`.
pub(crate) fn moments_flat(data: &[f64], dim: usize, weights: Option<&[f64]>) -> (Vector, Matrix) {
    let n = data.len() / dim;
    let uniform = 1.0 / n as f64;
    let w = |i: usize| weights.map_or(uniform, |w| w[i]);
    let mut mean = Vector::zeros(dim);
    for (i, row) in data.chunks_exact(dim).enumerate() {
        let wi = w(i);
        for (m, x) in mean.iter_mut().zip(row) {
            *m += wi * x;
        }
    }
    let mut cov = Matrix::zeros(dim, dim);
    let mut d = vec![0.0; dim];
    for (i, row) in data.chunks_exact(dim).enumerate() {
        let wi = w(i);
        for k in 0..dim {
            d[k] = row[k] - mean[k];
        }
        for r in 0..dim {
            for c in r..dim {
                cov[(r, c)] += wi * d[r] * d[c];
            }
        }
    }
    for r in 0..dim {
        for c in 0..r {
            cov[(r, c)] = cov[(c, r)];
        }
    }
    (mean, cov)
}
