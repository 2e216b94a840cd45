//! Sigma-point Gaussian filters (unscented and third-degree cubature) with an
//! optional transfer update applied as a sequential pseudo-measurement.

use crate::error::{FilterError, Result};
use crate::math::{wrap_angle, CholeskyFactor, Matrix, Vector};
use crate::models::{measure_slice, MotionModel, SensorModel};
use crate::particle::StateGaussian;
use crate::transfer::TransferPacket;

/// Point-placement rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaRule {
    /// Julier's unscented transform with `alpha = 1`, `beta = 0`: `2n + 1` points.
    Unscented { kappa: f64 },
    /// Third-degree spherical-radial cubature: `2n` equally weighted points.
    Cubature3,
}

/// Deterministic points with mean and covariance weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaPointSet {
    pub points: Vec<Vector>,
    pub weights_mean: Vec<f64>,
    pub weights_cov: Vec<f64>,
}

impl SigmaPointSet {
    pub fn generate(rule: SigmaRule, mean: &Vector, cov: &Matrix) -> Result<Self> {
        let n = mean.len();
        let l = CholeskyFactor::semidefinite(cov)?.lower();
        let (scale, mut points, mut w) = match rule {
            SigmaRule::Unscented { kappa } => {
                if !(n as f64 + kappa > 0.0) {
                    return Err(FilterError::InvalidConfig(format!(
                        "unscented kappa {kappa} requires n + kappa > 0"
                    )));
                }
                let lambda = n as f64 + kappa;
                (
                    lambda.sqrt(),
                    vec![mean.clone()],
                    vec![kappa / lambda],
                )
            }
            SigmaRule::Cubature3 => ((n as f64).sqrt(), Vec::new(), Vec::new()),
        };
        let wi = match rule {
            SigmaRule::Unscented { kappa } => 0.5 / (n as f64 + kappa),
            SigmaRule::Cubature3 => 0.5 / n as f64,
        };
        for j in 0..n {
            let col = l.column(j) * scale;
            points.push(mean + &col);
            w.push(wi);
        }
        for j in 0..n {
            let col = l.column(j) * scale;
            points.push(mean - &col);
            w.push(wi);
        }
        Ok(Self {
            points,
            weights_cov: w.clone(),
            weights_mean: w,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Weighted mean and covariance of the points.
    pub fn moments(&self) -> (Vector, Matrix) {
        let n = self.points[0].len();
        let mut mean = Vector::zeros(n);
        for (p, w) in self.points.iter().zip(&self.weights_mean) {
            mean += p * *w;
        }
        let mut cov = Matrix::zeros(n, n);
        for (p, w) in self.points.iter().zip(&self.weights_cov) {
            let d = p - &mean;
            cov += &d * d.transpose() * *w;
        }
        (mean, cov)
    }
}

/// Measurement function used by the sigma-point update.
pub trait ObservationModel {
    fn dim(&self) -> usize;
    fn observe(&self, x: &Vector) -> Vector;
    /// `a - b`, wrapping angular components.
    fn difference(&self, a: &Vector, b: &Vector) -> Vector;
}

/// `h(x) = [range, bearing]` of the position.
#[derive(Debug, Clone, Copy, Default)]
pub struct RangeBearing;

impl ObservationModel for RangeBearing {
    fn dim(&self) -> usize {
        2
    }

    fn observe(&self, x: &Vector) -> Vector {
        Vector::from_row_slice(&measure_slice(x.as_slice()))
    }

    fn difference(&self, a: &Vector, b: &Vector) -> Vector {
        Vector::from_vec(vec![a[0] - b[0], wrap_angle(a[1] - b[1])])
    }
}

/// `h(x) = H x`.
#[derive(Debug, Clone)]
pub struct LinearObservation {
    pub h: Matrix,
}

impl ObservationModel for LinearObservation {
    fn dim(&self) -> usize {
        self.h.nrows()
    }

    fn observe(&self, x: &Vector) -> Vector {
        &self.h * x
    }

    fn difference(&self, a: &Vector, b: &Vector) -> Vector {
        a - b
    }
}

/// Mean, covariance and point rule of a sigma-point filter.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFilterState {
    pub mean: Vector,
    pub cov: Matrix,
    pub rule: SigmaRule,
}

impl GaussianFilterState {
    pub fn new(prior: &StateGaussian, rule: SigmaRule) -> Self {
        Self {
            mean: prior.mean.clone(),
            cov: prior.cov.clone(),
            rule,
        }
    }

    pub fn summary(&self) -> StateGaussian {
        StateGaussian {
            mean: self.mean.clone(),
            cov: self.cov.clone(),
        }
    }
}

fn symmetrize(m: &mut Matrix) {
    let t = m.transpose();
    *m = (&*m + t) * 0.5;
}

/// Time update through the transition, plus `q_v`.
pub fn gf_predict(
    s: &GaussianFilterState,
    model: &MotionModel,
    q_v: &Matrix,
) -> Result<GaussianFilterState> {
    let mut pts = SigmaPointSet::generate(s.rule, &s.mean, &s.cov)?;
    for p in pts.points.iter_mut() {
        *p = model.transition(p)?;
    }
    let (mean, mut cov) = pts.moments();
    cov += q_v;
    symmetrize(&mut cov);
    Ok(GaussianFilterState {
        mean,
        cov,
        rule: s.rule,
    })
}

/// Predicted observation mean, its covariance (without noise) and the state cross-covariance.
fn observation_moments(
    pts: &SigmaPointSet,
    h: &dyn ObservationModel,
) -> (Vector, Matrix, Matrix) {
    let zs: Vec<Vector> = pts.points.iter().map(|p| h.observe(p)).collect();
    let reference = zs[0].clone();
    let m = h.dim();
    let mut offset = Vector::zeros(m);
    for (z, w) in zs.iter().zip(&pts.weights_mean) {
        offset += h.difference(z, &reference) * *w;
    }
    let z_mean = h.difference(&(&reference + &offset), &Vector::zeros(m));
    let n = pts.points[0].len();
    let mut x_mean = Vector::zeros(n);
    for (p, w) in pts.points.iter().zip(&pts.weights_mean) {
        x_mean += p * *w;
    }
    let mut s = Matrix::zeros(m, m);
    let mut c = Matrix::zeros(n, m);
    for ((p, z), w) in pts.points.iter().zip(&zs).zip(&pts.weights_cov) {
        let dz = h.difference(z, &z_mean);
        let dx = p - &x_mean;
        s += &dz * dz.transpose() * *w;
        c += &dx * dz.transpose() * *w;
    }
    (z_mean, s, c)
}

/// Measurement update with wrapped innovation and a Joseph-form covariance.
pub fn gf_update(
    s: &GaussianFilterState,
    z: &Vector,
    h: &dyn ObservationModel,
    r: &Matrix,
) -> Result<GaussianFilterState> {
    let pts = SigmaPointSet::generate(s.rule, &s.mean, &s.cov)?;
    let (z_pred, p_zz, p_xz) = observation_moments(&pts, h);
    let innovation_cov = &p_zz + r;
    let s_inv = innovation_cov
        .clone()
        .cholesky()
        .ok_or(FilterError::NonPositiveDefinite)?
        .inverse();
    let gain = &p_xz * &s_inv;
    let innovation = h.difference(z, &z_pred);
    let mean = &s.mean + &gain * innovation;
    let n = s.mean.len();
    // statistical linearization H = C^T P^-1 with residual noise S - H P H^T
    let cov = match s.cov.clone().cholesky() {
        Some(p_chol) => {
            let h_lin = p_xz.transpose() * p_chol.inverse();
            let mut r_eff = &innovation_cov - &h_lin * &s.cov * h_lin.transpose();
            symmetrize(&mut r_eff);
            let a = Matrix::identity(n, n) - &gain * &h_lin;
            &a * &s.cov * a.transpose() + &gain * r_eff * gain.transpose()
        }
        None => &s.cov - &gain * &innovation_cov * gain.transpose(),
    };
    let mut cov = cov;
    symmetrize(&mut cov);
    Ok(GaussianFilterState {
        mean,
        cov,
        rule: s.rule,
    })
}

/// Transfer update: `gf_update` with the packet mean as pseudo-measurement and its covariance as noise.
pub fn gf_tl_update(
    s: &GaussianFilterState,
    packet: &TransferPacket,
    h: &dyn ObservationModel,
) -> Result<GaussianFilterState> {
    gf_update(s, &packet.eta_mean, h, &packet.eta_cov)
}

/// One-step predicted-observation moments plus `q_star`, tagged for `for_step`.
pub fn source_gf_packet(
    s: &GaussianFilterState,
    model: &MotionModel,
    q_v: &Matrix,
    h: &dyn ObservationModel,
    q_star: &Matrix,
    for_step: usize,
) -> Result<TransferPacket> {
    let predicted = gf_predict(s, model, q_v)?;
    let pts = SigmaPointSet::generate(s.rule, &predicted.mean, &predicted.cov)?;
    let (z_mean, mut p_zz, _) = observation_moments(&pts, h);
    p_zz += q_star;
    symmetrize(&mut p_zz);
    Ok(TransferPacket {
        eta_mean: z_mean,
        eta_cov: p_zz,
        for_step,
    })
}

/// Sigma-point filter for range-bearing measurements.
#[derive(Debug, Clone)]
pub struct GaussianFilter {
    state: GaussianFilterState,
    model: MotionModel,
    q_v: Matrix,
    sensor: SensorModel,
    step: usize,
}

impl GaussianFilter {
    pub fn new(
        prior: &StateGaussian,
        rule: SigmaRule,
        model: MotionModel,
        sensor: SensorModel,
    ) -> Self {
        Self {
            state: GaussianFilterState::new(prior, rule),
            q_v: model.process_noise_cov(),
            model,
            sensor,
            step: 0,
        }
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn state(&self) -> &GaussianFilterState {
        &self.state
    }

    /// Predict, optional transfer update, then measurement update.
    pub fn step(&mut self, z: &[f64], packet: Option<&TransferPacket>) -> Result<StateGaussian> {
        let k = self.step + 1;
        if let Some(p) = packet {
            if p.for_step != k {
                return Err(FilterError::StaleTransferPacket {
                    packet_step: p.for_step,
                    filter_step: k,
                });
            }
        }
        let mut s = gf_predict(&self.state, &self.model, &self.q_v)?;
        if let Some(p) = packet {
            s = gf_tl_update(&s, p, &RangeBearing)?;
        }
        s = gf_update(&s, &Vector::from_row_slice(z), &RangeBearing, self.sensor.cov())?;
        self.state = s;
        self.step = k;
        Ok(self.state.summary())
    }

    /// Measurement step followed by the packet for the next step.
    pub fn source_step(&mut self, z_star: &[f64]) -> Result<(StateGaussian, TransferPacket)> {
        let est = self.step(z_star, None)?;
        let packet = source_gf_packet(
            &self.state,
            &self.model,
            &self.q_v,
            &RangeBearing,
            self.sensor.cov(),
            self.step + 1,
        )?;
        Ok((est, packet))
    }
}
