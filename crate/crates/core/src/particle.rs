//! Sequential importance resampling (SIR) particle filter.

use crate::error::{FilterError, Result};
use crate::math::{
    effective_sample_size, moments_flat, normalize_logweights, systematic_resample,
    CholeskyFactor, LogWeights, Matrix, Vector,
};
use crate::models::{MotionModel, SensorModel};
use crate::rng::RngStream;

/// Gaussian summary of a posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGaussian {
    pub mean: Vector,
    pub cov: Matrix,
}

impl StateGaussian {
    pub fn new(mean: Vector, cov: Matrix) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(FilterError::DimensionMismatch {
                expected: mean.len(),
                actual: cov.nrows(),
            });
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `N_s` weighted particles stored row-major in one buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    dim: usize,
    states: Vec<f64>,
    scratch: Vec<f64>,
    logw: LogWeights,
    step: usize,
    degenerate_events: usize,
    last_ess: Option<f64>,
}

impl ParticleSet {
    /// Draws `n` particles i.i.d. from `prior` with uniform weights, at step 0.
    pub fn init(prior: &StateGaussian, n: usize, rng: &mut RngStream) -> Result<Self> {
        if n == 0 {
            return Err(FilterError::EmptyInput);
        }
        let dim = prior.dim();
        let factor = CholeskyFactor::semidefinite(&prior.cov)?;
        let mut states = vec![0.0; n * dim];
        for row in states.chunks_exact_mut(dim) {
            factor.sample_into(prior.mean.as_slice(), rng, row);
        }
        Ok(Self::from_flat(dim, states))
    }

    pub fn from_states(states: &[Vector]) -> Result<Self> {
        let first = states.first().ok_or(FilterError::EmptyInput)?;
        let dim = first.len();
        let mut flat = Vec::with_capacity(dim * states.len());
        for s in states {
            if s.len() != dim {
                return Err(FilterError::DimensionMismatch {
                    expected: dim,
                    actual: s.len(),
                });
            }
            flat.extend_from_slice(s.as_slice());
        }
        Ok(Self::from_flat(dim, flat))
    }

    fn from_flat(dim: usize, states: Vec<f64>) -> Self {
        let n = states.len() / dim;
        Self {
            dim,
            scratch: vec![0.0; states.len()],
            states,
            logw: LogWeights::uniform(n),
            step: 0,
            degenerate_events: 0,
            last_ess: None,
        }
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Time index of the particles; 0 before the first prediction.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn log_weights(&self) -> &LogWeights {
        &self.logw
    }

    /// Times the weights collapsed to all `-inf`/NaN and were reset to uniform.
    pub fn degenerate_events(&self) -> usize {
        self.degenerate_events
    }

    /// Effective sample size measured just before the latest resample.
    pub fn last_ess(&self) -> Option<f64> {
        self.last_ess
    }

    /// Draws every particle from the transition prior `N(f(x), Q_v)` and advances the step.
    pub fn predict(&mut self, model: &MotionModel, noise: &CholeskyFactor, rng: &mut RngStream) {
        let dim = self.dim;
        let mut mean = [0.0f64; 8];
        for row in self.states.chunks_exact_mut(dim) {
            model.transition_into(row, &mut mean[..dim]);
            noise.sample_into(&mean[..dim], rng, row);
        }
        self.step += 1;
    }

    /// Adds `loglik(x_i)` to each log-weight without normalizing.
    #[inline]
    pub fn accumulate<F: Fn(&[f64]) -> f64>(&mut self, loglik: F) {
        let dim = self.dim;
        let states = &self.states;
        for (w, row) in self.logw.values_mut().iter_mut().zip(states.chunks_exact(dim)) {
            *w += loglik(row);
        }
    }

    /// Adds two log-likelihood terms per particle, first `.0` then `.1`; the
    /// result equals two `accumulate` passes bit for bit.
    #[inline]
    pub fn accumulate_pair<F: Fn(&[f64]) -> (f64, f64)>(&mut self, loglik: F) {
        let dim = self.dim;
        let states = &self.states;
        for (w, row) in self.logw.values_mut().iter_mut().zip(states.chunks_exact(dim)) {
            let (a, b) = loglik(row);
            *w += a;
            *w += b;
        }
    }

    /// Normalizes the log-weights, resetting to uniform if they are all degenerate.
    pub fn normalize(&mut self) -> Result<()> {
        match normalize_logweights(&self.logw) {
            Ok(w) => {
                self.logw = w;
                Ok(())
            }
            Err(FilterError::AllWeightsDegenerate) => {
                self.degenerate_events += 1;
                self.logw = LogWeights::uniform(self.len());
                Ok(())
            }
            Err(e) => Err(e),
        }
    }

    /// Measurement update `w_i *= p(z | x_i)` followed by normalization.
    pub fn update_measurement(&mut self, z: &[f64], sensor: &SensorModel) -> Result<()> {
        self.accumulate(|x| sensor.log_likelihood(z, x));
        self.normalize()
    }

    /// Systematic resampling with one uniform offset drawn from `rng`; weights become uniform.
    pub fn resample(&mut self, rng: &mut RngStream) -> Result<()> {
        if !self.logw.is_normalized() {
            self.normalize()?;
        }
        let p = self.logw.probabilities();
        self.last_ess = Some(effective_sample_size(&p));
        let n = self.len();
        let u0 = rng.uniform();
        let ancestors = systematic_resample(&p, n, u0)?;
        let dim = self.dim;
        for (dst, &a) in self.scratch.chunks_exact_mut(dim).zip(&ancestors) {
            dst.copy_from_slice(&self.states[a * dim..(a + 1) * dim]);
        }
        std::mem::swap(&mut self.states, &mut self.scratch);
        self.logw = LogWeights::uniform(n);
        Ok(())
    }

    /// Weighted mean and `scatter + q_add`.
    pub fn summarize(&self, q_add: &Matrix) -> StateGaussian {
        let (mean, scatter) = if self.logw.is_normalized() && self.is_uniform() {
            moments_flat(&self.states, self.dim, None)
        } else {
            let w = normalize_logweights(&self.logw)
                .map(|w| w.probabilities())
                .unwrap_or_else(|_| vec![1.0 / self.len() as f64; self.len()]);
            moments_flat(&self.states, self.dim, Some(&w))
        };
        StateGaussian {
            mean,
            cov: scatter + q_add,
        }
    }

    fn is_uniform(&self) -> bool {
        let v = self.logw.values();
        v.iter().all(|x| *x == v[0])
    }
}

/// Motion model and process noise shared by the particle filters.
#[derive(Debug, Clone, PartialEq)]
pub struct Dynamics {
    pub model: MotionModel,
    pub q_v: Matrix,
    pub q_v_factor: CholeskyFactor,
}

impl Dynamics {
    pub fn new(model: MotionModel) -> Result<Self> {
        model.validate()?;
        let q_v = model.process_noise_cov();
        let q_v_factor = CholeskyFactor::semidefinite(&q_v)?;
        Ok(Self {
            model,
            q_v,
            q_v_factor,
        })
    }
}

/// One SIR step: predict, weight by `z`, resample, summarize with `Q_v` added.
pub fn sir_step(
    ps: &mut ParticleSet,
    z: &[f64],
    dynamics: &Dynamics,
    sensor: &SensorModel,
    rng: &mut RngStream,
) -> Result<StateGaussian> {
    ps.predict(&dynamics.model, &dynamics.q_v_factor, rng);
    ps.update_measurement(z, sensor)?;
    ps.resample(rng)?;
    Ok(ps.summarize(&dynamics.q_v))
}

/// Isolated SIR particle filter owning its particles and random stream.
#[derive(Debug, Clone)]
pub struct SirFilter {
    pub(crate) dynamics: Dynamics,
    pub(crate) sensor: SensorModel,
    pub(crate) particles: ParticleSet,
    pub(crate) rng: RngStream,
}

impl SirFilter {
    pub fn new(
        dynamics: Dynamics,
        sensor: SensorModel,
        prior: &StateGaussian,
        n_particles: usize,
        mut rng: RngStream,
    ) -> Result<Self> {
        let particles = ParticleSet::init(prior, n_particles, &mut rng)?;
        Ok(Self {
            dynamics,
            sensor,
            particles,
            rng,
        })
    }

    pub fn step(&mut self, z: &[f64]) -> Result<StateGaussian> {
        sir_step(&mut self.particles, z, &self.dynamics, &self.sensor, &mut self.rng)
    }

    pub fn particles(&self) -> &ParticleSet {
        &self.particles
    }

    pub fn sensor(&self) -> &SensorModel {
        &self.sensor
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{gaussian_logpdf, weighted_moments};
    use crate::models::measure_slice;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn cv() -> Dynamics {
        Dynamics::new(MotionModel::LinearCV { dt: 1.0, q: 0.1 }).unwrap()
    }

    fn sensor(i: f64) -> SensorModel {
        SensorModel::new(10.0, 10f64.sqrt() * 1e-3, i).unwrap()
    }

    fn prior() -> StateGaussian {
        StateGaussian::new(
            Vector::from_vec(vec![100.0, 10.0, 100.0, 10.0]),
            Matrix::from_diagonal(&Vector::from_vec(vec![50.0, 1.0, 50.0, 1.0])),
        )
        .unwrap()
    }

    #[test]
    fn init_zero_cov_and_single() {
        let p = StateGaussian::new(prior().mean, Matrix::zeros(4, 4)).unwrap();
        let ps = ParticleSet::init(&p, 7, &mut RngStream::from_seed(1)).unwrap();
        for i in 0..7 {
            assert_eq!(ps.particle(i), p.mean.as_slice());
        }
        let one = ParticleSet::init(&prior(), 1, &mut RngStream::from_seed(2)).unwrap();
        assert_eq!(one.len(), 1);
        assert_ne!(one.particle(0), prior().mean.as_slice());
        assert!(ParticleSet::init(&prior(), 0, &mut RngStream::from_seed(2)).is_err());
    }

    #[test]
    fn init_sample_mean_clt() {
        let n = 100_000;
        let pr = prior();
        let ps = ParticleSet::init(&pr, n, &mut RngStream::from_seed(3)).unwrap();
        let (m, _) = moments_flat(ps.states(), 4, None);
        for k in 0..4 {
            let sd = pr.cov[(k, k)].sqrt();
            assert!((m[k] - pr.mean[k]).abs() < 3.0 * sd / (n as f64).sqrt());
        }
    }

    #[test]
    fn predict_noiseless_and_step_counter() {
        let dynamics = Dynamics::new(MotionModel::LinearCV { dt: 1.0, q: 0.0 }).unwrap();
        let mut ps = ParticleSet::init(&prior(), 20, &mut RngStream::from_seed(4)).unwrap();
        let before = ps.clone();
        ps.predict(&dynamics.model, &dynamics.q_v_factor, &mut RngStream::from_seed(5));
        assert_eq!(ps.step(), 1);
        for i in 0..20 {
            let x = before.particle(i);
            let y = ps.particle(i);
            assert_eq!(y, &[x[0] + x[1], x[1], x[2] + x[3], x[3]]);
        }
    }

    #[test]
    fn predict_grows_cloud_by_noise() {
        // dt = 0 makes the transition the identity here; noise covariance I
        let n = 50_000;
        let zero = StateGaussian::new(Vector::zeros(4), Matrix::zeros(4, 4)).unwrap();
        let mut ps = ParticleSet::init(&zero, n, &mut RngStream::from_seed(6)).unwrap();
        let model = MotionModel::LinearCV { dt: 0.0, q: 0.0 };
        let f = CholeskyFactor::new(&Matrix::identity(4, 4)).unwrap();
        ps.predict(&model, &f, &mut RngStream::from_seed(7));
        let (_, c) = moments_flat(ps.states(), 4, None);
        for r in 0..4 {
            for s in 0..4 {
                let target = if r == s { 1.0 } else { 0.0 };
                assert!((c[(r, s)] - target).abs() < 0.03);
            }
        }
    }

    #[test]
    fn identical_particles_stay_uniform() {
        let x = Vector::from_vec(vec![100.0, 1.0, 50.0, 1.0]);
        let mut ps = ParticleSet::from_states(&vec![x; 5]).unwrap();
        ps.update_measurement(&[120.0, 0.4], &sensor(4.0)).unwrap();
        for p in ps.log_weights().probabilities() {
            assert_relative_eq!(p, 0.2, epsilon = 1e-15);
        }
    }

    #[test]
    fn two_particle_likelihood_ratio() {
        let a = Vector::from_vec(vec![100.0, 0.0, 100.0, 0.0]);
        let b = Vector::from_vec(vec![103.0, 0.0, 98.0, 0.0]);
        let z = measure_slice(a.as_slice());
        let s = SensorModel::new(1.0, 1e-3, 1.0).unwrap();
        let mut ps = ParticleSet::from_states(&[a.clone(), b.clone()]).unwrap();
        ps.update_measurement(&z, &s).unwrap();
        let p = ps.log_weights().probabilities();
        // oracle from independent density evaluations
        let zb = measure_slice(b.as_slice());
        let la = gaussian_logpdf(&Vector::zeros(2), s.cov()).unwrap();
        let lb = gaussian_logpdf(
            &Vector::from_vec(vec![z[0] - zb[0], z[1] - zb[1]]),
            s.cov(),
        )
        .unwrap();
        let oracle = 1.0 / (1.0 + (lb - la).exp());
        assert_relative_eq!(p[0], oracle, epsilon = 1e-12);
        assert!(p[0] > 1.0 - 1e-6);
    }

    #[test]
    fn bearing_wrap_in_likelihood() {
        let s = sensor(1.0);
        let x = [100.0 * (-PI + 0.01f64).cos(), 0.0, 100.0 * (-PI + 0.01f64).sin(), 0.0];
        let z = [100.0, PI - 0.01];
        let l = s.log_likelihood(&z, &x);
        let direct = gaussian_logpdf(&Vector::from_vec(vec![0.0, -0.02]), s.cov()).unwrap();
        assert_relative_eq!(l, direct, epsilon = 1e-9);
    }

    #[test]
    fn dropping_normalizer_leaves_weights_unchanged() {
        let mut rng = RngStream::from_seed(8);
        let mut ps = ParticleSet::init(&prior(), 200, &mut rng).unwrap();
        let mut bare = ps.clone();
        let s = sensor(4.0);
        let z = [150.0, 0.8];
        ps.update_measurement(&z, &s).unwrap();
        let f = s.factor();
        bare.accumulate(|x| {
            let r = crate::models::residual(&z, &measure_slice(x));
            -0.5 * f.mahalanobis_sq(&r)
        });
        bare.normalize().unwrap();
        for (a, b) in ps
            .log_weights()
            .probabilities()
            .iter()
            .zip(bare.log_weights().probabilities())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_examples() {
        let pts: Vec<Vector> = (0..6).map(|i| Vector::from_vec(vec![i as f64, 0.0])).collect();
        let mut ps = ParticleSet::from_states(&pts).unwrap();
        ps.resample(&mut RngStream::from_seed(9)).unwrap();
        for i in 0..6 {
            assert!(pts.iter().any(|p| p.as_slice() == ps.particle(i)));
        }
        assert_relative_eq!(ps.last_ess().unwrap(), 6.0, epsilon = 1e-9);

        let mut ps = ParticleSet::from_states(&pts).unwrap();
        ps.logw = LogWeights::from_values(
            std::iter::once(0.0)
                .chain(std::iter::repeat(f64::NEG_INFINITY).take(5))
                .collect(),
        );
        ps.normalize().unwrap();
        ps.resample(&mut RngStream::from_seed(10)).unwrap();
        for i in 0..6 {
            assert_eq!(ps.particle(i), pts[0].as_slice());
        }
        assert!(ps.log_weights().values().iter().all(|&v| v == -(6f64).ln()));
    }

    #[test]
    fn ess_diagnostic_formula() {
        let pts: Vec<Vector> = (0..3).map(|i| Vector::from_vec(vec![i as f64])).collect();
        let mut ps = ParticleSet::from_states(&pts).unwrap();
        let w = [0.5f64, 0.3, 0.2];
        ps.logw = LogWeights::from_values(w.iter().map(|x| x.ln()).collect());
        ps.normalize().unwrap();
        ps.resample(&mut RngStream::from_seed(1)).unwrap();
        let oracle = 1.0 / w.iter().map(|x| x * x).sum::<f64>();
        assert_relative_eq!(ps.last_ess().unwrap(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_weights_reset() {
        let pts: Vec<Vector> = (0..4).map(|i| Vector::from_vec(vec![i as f64])).collect();
        let mut ps = ParticleSet::from_states(&pts).unwrap();
        ps.accumulate(|_| f64::NAN);
        ps.normalize().unwrap();
        assert_eq!(ps.degenerate_events(), 1);
        assert!(ps.log_weights().probabilities().iter().all(|p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn summarize_examples() {
        let q_v = cv().q_v;
        let x = Vector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let ps = ParticleSet::from_states(&vec![x.clone(); 3]).unwrap();
        let g = ps.summarize(&q_v);
        assert_eq!(g.mean, x);
        assert_eq!(g.cov, q_v);

        let two = [
            Vector::from_vec(vec![-2.0, 0.0, 4.0, 1.0]),
            Vector::from_vec(vec![2.0, 0.0, 6.0, 3.0]),
        ];
        let g = ParticleSet::from_states(&two).unwrap().summarize(&Matrix::zeros(4, 4));
        assert_eq!(g.mean.as_slice(), &[0.0, 0.0, 5.0, 2.0]);

        let ps = ParticleSet::init(&prior(), 40, &mut RngStream::from_seed(11)).unwrap();
        let pts: Vec<Vector> = (0..40).map(|i| Vector::from_row_slice(ps.particle(i))).collect();
        let (m, c) = weighted_moments(&pts, &[1.0 / 40.0; 40]).unwrap();
        let g = ps.summarize(&q_v);
        assert!((g.mean - m).amax() < 1e-12);
        assert!((g.cov - (c + &q_v)).amax() < 1e-10);
    }

    #[test]
    fn noiseless_tracking_is_exact() {
        let dyn0 = Dynamics::new(MotionModel::LinearCV { dt: 1.0, q: 0.0 }).unwrap();
        let s = SensorModel::new(10.0, 1e-3, 1e-12).unwrap();
        let x0 = prior().mean;
        let exact = StateGaussian::new(x0.clone(), Matrix::zeros(4, 4)).unwrap();
        let mut f = SirFilter::new(dyn0.clone(), s, &exact, 50, RngStream::from_seed(12)).unwrap();
        let mut x = x0;
        for _ in 0..20 {
            x = dyn0.model.transition(&x).unwrap();
            let z = measure_slice(x.as_slice());
            let g = f.step(&z).unwrap();
            assert!((g.mean[0] - x[0]).abs() < 1e-9 && (g.mean[2] - x[2]).abs() < 1e-9);
        }
    }

    #[test]
    fn seeded_step_is_deterministic() {
        let run = || {
            let mut f =
                SirFilter::new(cv(), sensor(4.0), &prior(), 300, RngStream::from_seed(13)).unwrap();
            let mut out = Vec::new();
            for k in 1..=5 {
                let z = [141.0 + 14.0 * k as f64, PI / 4.0];
                out.push(f.step(&z).unwrap());
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn posterior_cov_floor_is_q_add() {
        let mut f = SirFilter::new(cv(), sensor(4.0), &prior(), 100, RngStream::from_seed(14)).unwrap();
        let g = f.step(&[150.0, 0.8]).unwrap();
        let min_q = cv().q_v.symmetric_eigen().eigenvalues.min();
        let min_g = g.cov.symmetric_eigen().eigenvalues.min();
        assert!(min_g >= min_q - 1e-10);
    }
}
