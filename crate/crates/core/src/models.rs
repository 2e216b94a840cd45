//! Motion and range-bearing measurement models for the two tracking scenarios.

use std::f64::consts::PI;

use crate::error::{FilterError, Result};
use crate::math::{wrap_angle, CholeskyFactor, Matrix, Vector};

/// Turn rates below this magnitude (rad/s) use the series expansion of the turn matrix.
pub const TURN_RATE_EPS: f64 = 1e-6;

/// Discrete-time kinematic model. States are `[x, vx, y, vy]` or `[x, vx, y, vy, omega]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MotionModel {
    /// Constant velocity with white-acceleration noise of intensity `q` (m^2/s^4).
    LinearCV { dt: f64, q: f64 },
    /// Coordinated turn with turn rate as the fifth state. `q1` drives the
    /// position/velocity blocks, `q2` (rad^2/s^3) the turn rate.
    CoordinatedTurn { dt: f64, q1: f64, q2: f64 },
}

impl MotionModel {
    pub fn dim(&self) -> usize {
        match self {
            MotionModel::LinearCV { .. } => 4,
            MotionModel::CoordinatedTurn { .. } => 5,
        }
    }

    pub fn dt(&self) -> f64 {
        match *self {
            MotionModel::LinearCV { dt, .. } | MotionModel::CoordinatedTurn { dt, .. } => dt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (dt, qs) = match *self {
            MotionModel::LinearCV { dt, q } => (dt, [q, 0.0]),
            MotionModel::CoordinatedTurn { dt, q1, q2 } => (dt, [q1, q2]),
        };
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(FilterError::InvalidConfig(format!("T_s must be positive, got {dt}")));
        }
        if qs.iter().any(|q| !(*q >= 0.0 && q.is_finite())) {
            return Err(FilterError::InvalidConfig(
                "process noise parameters must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Noise-free transition `f(x)` on raw slices. `x` and `out` must have length `dim()`.
    #[inline]
    pub fn transition_into(&self, x: &[f64], out: &mut [f64]) {
        match *self {
            MotionModel::LinearCV { dt, .. } => {
                out[0] = x[0] + dt * x[1];
                out[1] = x[1];
                out[2] = x[2] + dt * x[3];
                out[3] = x[3];
            }
            MotionModel::CoordinatedTurn { dt, .. } => {
                let omega = x[4];
                let wt = omega * dt;
                let (sin_wt, cos_wt) = wt.sin_cos();
                let (s, c) = if omega.abs() < TURN_RATE_EPS {
                    (dt * (1.0 - wt * wt / 6.0), 0.5 * wt * dt)
                } else {
                    (sin_wt / omega, (1.0 - cos_wt) / omega)
                };
                let (vx, vy) = (x[1], x[3]);
                out[0] = x[0] + s * vx - c * vy;
                out[1] = cos_wt * vx - sin_wt * vy;
                out[2] = x[2] + c * vx + s * vy;
                out[3] = sin_wt * vx + cos_wt * vy;
                out[4] = omega;
            }
        }
    }

    pub fn transition(&self, x: &Vector) -> Result<Vector> {
        if x.len() != self.dim() {
            return Err(FilterError::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        let mut out = Vector::zeros(self.dim());
        self.transition_into(x.as_slice(), out.as_mut_slice());
        Ok(out)
    }

    /// Process-noise covariance `Q_v`. The kinematic blocks are rank one, so `Q_v` is singular.
    pub fn process_noise_cov(&self) -> Matrix {
        let n = self.dim();
        let dt = self.dt();
        let q = match *self {
            MotionModel::LinearCV { q, .. } => q,
            MotionModel::CoordinatedTurn { q1, .. } => q1,
        };
        let mut m = Matrix::zeros(n, n);
        let block = [
            q * dt.powi(4) / 4.0,
            q * dt.powi(3) / 2.0,
            q * dt.powi(2),
        ];
        for b in [0, 2] {
            m[(b, b)] = block[0];
            m[(b, b + 1)] = block[1];
            m[(b + 1, b)] = block[1];
            m[(b + 1, b + 1)] = block[2];
        }
        if let MotionModel::CoordinatedTurn { q2, .. } = *self {
            m[(4, 4)] = q2 * dt;
        }
        m
    }
}

/// Noise-free range and bearing of the position in `x[0], x[2]`; no origin check.
#[inline]
pub fn measure_slice(x: &[f64]) -> [f64; 2] {
    let (px, py) = (x[0], x[2]);
    [(px * px + py * py).sqrt(), py.atan2(px)]
}

/// `h(x) = [sqrt(x^2 + y^2), atan2(y, x)]` with the bearing in `(-pi, pi]`.
pub fn measure(x: &Vector) -> Result<Vector> {
    if x.len() < 4 {
        return Err(FilterError::DimensionMismatch {
            expected: 4,
            actual: x.len(),
        });
    }
    if x[0] == 0.0 && x[2] == 0.0 {
        return Err(FilterError::OriginSingularity);
    }
    let [r, b] = measure_slice(x.as_slice());
    // atan2 returns -pi for (-x, -0.0)
    let b = if b == -PI { PI } else { b };
    Ok(Vector::from_vec(vec![r, b]))
}

/// Range/bearing residual `z - h` with the bearing wrapped.
#[inline]
pub fn residual(z: &[f64], h: &[f64]) -> [f64; 2] {
    [z[0] - h[0], wrap_angle(z[1] - h[1])]
}

/// Range-bearing sensor with covariance `Q = intensity * diag(sigma_r^2, sigma_zeta^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorModel {
    sigma_r: f64,
    sigma_zeta: f64,
    intensity: f64,
    cov: Matrix,
    factor: CholeskyFactor,
}

impl SensorModel {
    pub fn new(sigma_r: f64, sigma_zeta: f64, intensity: f64) -> Result<Self> {
        if !(sigma_r > 0.0 && sigma_zeta > 0.0) {
            return Err(FilterError::InvalidConfig(
                "sensor standard deviations must be positive".into(),
            ));
        }
        if !(intensity > 0.0 && intensity.is_finite()) {
            return Err(FilterError::InvalidConfig(format!(
                "noise intensity must be positive, got {intensity}"
            )));
        }
        let cov = Matrix::from_diagonal(&Vector::from_vec(vec![
            intensity * sigma_r * sigma_r,
            intensity * sigma_zeta * sigma_zeta,
        ]));
        let factor = CholeskyFactor::new(&cov)?;
        Ok(Self {
            sigma_r,
            sigma_zeta,
            intensity,
            cov,
            factor,
        })
    }

    pub fn intensity(&self) -> f64 {
        self.intensity
    }

    /// Base covariance `B_w`.
    pub fn base_cov(&self) -> Matrix {
        Matrix::from_diagonal(&Vector::from_vec(vec![
            self.sigma_r * self.sigma_r,
            self.sigma_zeta * self.sigma_zeta,
        ]))
    }

    /// Measurement-noise covariance `Q_w = intensity * B_w`.
    pub fn cov(&self) -> &Matrix {
        &self.cov
    }

    pub fn factor(&self) -> &CholeskyFactor {
        &self.factor
    }

    /// `log p(z | x)` for a state slice.
    #[inline]
    pub fn log_likelihood(&self, z: &[f64], x: &[f64]) -> f64 {
        let r = residual(z, &measure_slice(x));
        self.factor.log_density(&r)
    }

    /// Noisy measurement `h(x) + L u` from standard-normal draws `u`.
    pub fn corrupt(&self, h: &[f64], u: [f64; 2]) -> [f64; 2] {
        let l = self.factor.lower();
        let r = h[0] + l[(0, 0)] * u[0];
        let b = h[1] + l[(1, 0)] * u[0] + l[(1, 1)] * u[1];
        [r, wrap_angle(b)]
    }
}

/// Source and primary sensors sharing `B_w` with intensities `I*_w` and `I_w`.
pub fn make_sensor_pair(
    i_source: f64,
    i_primary: f64,
    sigma_r: f64,
    sigma_zeta: f64,
) -> Result<(SensorModel, SensorModel)> {
    Ok((
        SensorModel::new(sigma_r, sigma_zeta, i_source)?,
        SensorModel::new(sigma_r, sigma_zeta, i_primary)?,
    ))
}
