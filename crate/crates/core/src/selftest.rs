//! Oracle checks runnable from the command line.

use std::f64::consts::PI;

use crate::gaussian::{gf_predict, gf_update, GaussianFilterState, LinearObservation, SigmaRule};
use crate::harness::{parse_filter_list, run_experiment_with, ExperimentOptions, ScenarioConfig};
use crate::math::{
    gaussian_logpdf, normalize_logweights, systematic_resample, weighted_moments, wrap_angle,
    CholeskyFactor, LogWeights, Matrix, Vector,
};
use crate::models::{make_sensor_pair, measure, measure_slice, residual, MotionModel};
use crate::particle::{sir_step, Dynamics, ParticleSet, StateGaussian};
use crate::rng::RngStream;
use crate::transfer::{primary_step, TransferPacket};

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<String, String>) -> Check {
    match f() {
        Ok(detail) => Check {
            name,
            passed: true,
            detail,
        },
        Err(detail) => Check {
            name,
            passed: false,
            detail,
        },
    }
}

fn close(a: f64, b: f64, tol: f64, what: &str) -> Result<String, String> {
    if (a - b).abs() <= tol {
        Ok(format!("{what}: {a:.12} vs {b:.12}"))
    } else {
        Err(format!("{what}: {a:.12} vs {b:.12} (tol {tol:e})"))
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

pub fn run_all() -> Vec<Check> {
    vec![
        check("logpdf identity", || {
            let v = gaussian_logpdf(&Vector::zeros(2), &Matrix::identity(2, 2)).map_err(e2s)?;
            close(v, -(2.0 * PI).ln(), 1e-12, "log N(0; 0, I)")
        }),
        check("logpdf scalar oracle", || {
            let v = gaussian_logpdf(&Vector::from_vec(vec![2.0]), &Matrix::from_element(1, 1, 4.0))
                .map_err(e2s)?;
            let oracle = (1.0 / (8.0 * PI).sqrt() * (-0.5f64).exp()).ln();
            close(v, oracle, 1e-12, "log N(2; 0, 4)")
        }),
        check("normalize log weights", || {
            let p = normalize_logweights(&LogWeights::from_values(vec![0.0, 3f64.ln()]))
                .map_err(e2s)?
                .probabilities();
            close(p[1], 0.75, 1e-15, "w[1]")
        }),
        check("systematic resampling positions", || {
            let idx = systematic_resample(&[0.5, 0.5], 4, 0.1).map_err(e2s)?;
            if idx == [0, 0, 1, 1] {
                Ok(format!("{idx:?}"))
            } else {
                Err(format!("{idx:?}"))
            }
        }),
        check("weighted moments", || {
            let pts = [Vector::from_vec(vec![-1.0]), Vector::from_vec(vec![1.0])];
            let (m, c) = weighted_moments(&pts, &[0.5, 0.5]).map_err(e2s)?;
            close(m[0], 0.0, 1e-15, "mean")?;
            close(c[(0, 0)], 1.0, 1e-15, "variance")
        }),
        check("coordinated turn closed form", || {
            let m = MotionModel::CoordinatedTurn { dt: 1.0, q1: 0.0, q2: 0.0 };
            let out = m
                .transition(&Vector::from_vec(vec![0.0, 1.0, 0.0, 0.0, PI / 2.0]))
                .map_err(e2s)?;
            close(out[0], 2.0 / PI, 1e-12, "x")?;
            close(out[2], 2.0 / PI, 1e-12, "y")
        }),
        check("range-bearing at scenario 2 start", || {
            let h = measure(&Vector::from_vec(vec![1000.0, 300.0, 1000.0, 0.0, 0.0])).map_err(e2s)?;
            close(h[0], 1414.21356, 1e-5, "range")?;
            close(h[1], PI / 4.0, 1e-12, "bearing")
        }),
        check("bearing wrap at +-pi", || {
            let r = residual(&[0.0, PI - 0.01], &[0.0, -PI + 0.01]);
            close(r[1], -0.02, 1e-12, "wrapped residual")?;
            close(wrap_angle(-PI), PI, 0.0, "wrap(-pi)")
        }),
        check("sensor pair covariances", || {
            let (s, p) = make_sensor_pair(1.0, 4.0, 10.0, 10f64.sqrt() * 1e-3).map_err(e2s)?;
            close(s.cov()[(1, 1)], 1e-5, 1e-18, "source bearing variance")?;
            close(p.cov()[(0, 0)], 400.0, 1e-12, "primary range variance")
        }),
        check("no-packet step equals SIR step", || {
            let d = Dynamics::new(MotionModel::LinearCV { dt: 1.0, q: 0.1 }).map_err(e2s)?;
            let (_, s) = make_sensor_pair(1.0, 4.0, 10.0, 10f64.sqrt() * 1e-3).map_err(e2s)?;
            let prior = StateGaussian::new(
                Vector::from_vec(vec![100.0, 10.0, 100.0, 10.0]),
                Matrix::from_diagonal(&Vector::from_vec(vec![50.0, 1.0, 50.0, 1.0])),
            )
            .map_err(e2s)?;
            let mut a = ParticleSet::init(&prior, 200, &mut RngStream::from_seed(1)).map_err(e2s)?;
            let mut b = a.clone();
            let mut ra = RngStream::from_seed(2);
            let mut rb = ra.clone();
            let ga = primary_step(&mut a, &[155.0, 0.78], None, &d, &s, &mut ra).map_err(e2s)?;
            let gb = sir_step(&mut b, &[155.0, 0.78], &d, &s, &mut rb).map_err(e2s)?;
            if ga == gb && a == b {
                Ok("bit-identical".into())
            } else {
                Err("outputs differ".into())
            }
        }),
        check("dual-likelihood weight ratio", || {
            let (_, s) = make_sensor_pair(1.0, 4.0, 10.0, 10f64.sqrt() * 1e-3).map_err(e2s)?;
            let xs = [
                Vector::from_vec(vec![100.0, 0.0, 100.0, 0.0]),
                Vector::from_vec(vec![108.0, 0.0, 96.0, 0.0]),
            ];
            let packet = TransferPacket::new([144.0, 0.77], [[110.0, 0.0], [0.0, 2e-5]], 1);
            let z = [139.0, 0.8];
            let mut ps = ParticleSet::from_states(&xs).map_err(e2s)?;
            let f = CholeskyFactor::new(&packet.eta_cov).map_err(e2s)?;
            let eta = [packet.eta_mean[0], packet.eta_mean[1]];
            ps.accumulate(|x| f.log_density(&residual(&eta, &measure_slice(x))));
            ps.accumulate(|x| s.log_likelihood(&z, x));
            let w = ps.log_weights().values();
            let lik = |x: &Vector| -> Result<f64, String> {
                let h = measure_slice(x.as_slice());
                let r1 = Vector::from_row_slice(&residual(&eta, &h));
                let r2 = Vector::from_row_slice(&residual(&z, &h));
                Ok(gaussian_logpdf(&r1, &packet.eta_cov).map_err(e2s)?
                    + gaussian_logpdf(&r2, s.cov()).map_err(e2s)?)
            };
            close(w[0] - w[1], lik(&xs[0])? - lik(&xs[1])?, 1e-10, "log ratio")
        }),
        check("sigma-point filters on linear model", || {
            let model = MotionModel::LinearCV { dt: 1.0, q: 0.1 };
            let q = model.process_noise_cov();
            let obs = LinearObservation {
                h: Matrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
            };
            let r = Matrix::identity(2, 2) * 100.0;
            let z = Vector::from_vec(vec![112.0, 108.0]);
            let mean = Vector::from_vec(vec![100.0, 10.0, 100.0, 10.0]);
            let cov = Matrix::from_diagonal(&Vector::from_vec(vec![50.0, 1.0, 50.0, 1.0]));
            let f = Matrix::from_row_slice(
                4,
                4,
                &[1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            );
            let pm = &f * &mean;
            let pp = &f * &cov * f.transpose() + &q;
            let s = &obs.h * &pp * obs.h.transpose() + &r;
            let k = &pp * obs.h.transpose() * s.try_inverse().ok_or("singular S")?;
            let km = &pm + &k * (&z - &obs.h * &pm);
            let mut worst = 0.0f64;
            for rule in [SigmaRule::Unscented { kappa: 2.0 }, SigmaRule::Cubature3] {
                let st = GaussianFilterState {
                    mean: mean.clone(),
                    cov: cov.clone(),
                    rule,
                };
                let u = gf_update(&gf_predict(&st, &model, &q).map_err(e2s)?, &z, &obs, &r)
                    .map_err(e2s)?;
                worst = worst.max((u.mean - &km).amax());
            }
            close(worst, 0.0, 1e-8, "max deviation from Kalman")
        }),
        check("packet replay reproduces RMSE", || {
            let cfg = ScenarioConfig {
                steps: 8,
                mc: 2,
                master_seed: Some(3),
                filters: parse_filter_list("tl-pf:64,tl-ukf").map_err(e2s)?,
                ..ScenarioConfig::s2()
            };
            let live = run_experiment_with(
                &cfg,
                &ExperimentOptions {
                    record_packets: true,
                    ..Default::default()
                },
            )
            .map_err(e2s)?;
            let replay = run_experiment_with(
                &cfg,
                &ExperimentOptions {
                    replay: live.packets.clone(),
                    ..Default::default()
                },
            )
            .map_err(e2s)?;
            let mut worst = 0.0f64;
            for (a, b) in live.cells.iter().zip(&replay.cells) {
                for (x, y) in a.metrics.rmse_per_step.iter().zip(&b.metrics.rmse_per_step) {
                    worst = worst.max((x - y).abs());
                }
            }
            close(worst, 0.0, 1e-9, "max RMSE difference")
        }),
    ]
}
