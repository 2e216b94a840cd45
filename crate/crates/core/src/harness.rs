//! Scenario generation, Monte-Carlo execution and RMSE/timing metrics.
//!
//! Every run owns its random streams, so runs can execute on any thread in
//! any order. Results are reduced in run-index order, which keeps the
//! output independent of the thread count.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{FilterError, Result};
use crate::gaussian::{GaussianFilter, SigmaRule};
use crate::math::{sample_gaussian, Matrix, Vector};
use crate::models::{measure, MotionModel, SensorModel};
use crate::particle::{Dynamics, SirFilter, StateGaussian};
use crate::rng::{RngStream, StreamPurpose};
use crate::transfer::{PacketLog, PacketNoiseMode, SourcePf, TlPf, TransferPacket};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Linear constant-velocity target.
    S1,
    /// Coordinated-turn target with unknown turn rate.
    S2,
}

impl FromStr for Scenario {
    type Err = FilterError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S1" | "s1" => Ok(Scenario::S1),
            "S2" | "s2" => Ok(Scenario::S2),
            _ => Err(FilterError::InvalidConfig(format!("unknown scenario '{s}'"))),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::S1 => "S1",
            Scenario::S2 => "S2",
        })
    }
}

/// Where a state comes from at `k = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// The configured `x0`.
    Nominal,
    /// A per-run draw from `N(x0, P0)`.
    Sampled,
}

impl FromStr for InitMode {
    type Err = FilterError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nominal" => Ok(InitMode::Nominal),
            "sampled" => Ok(InitMode::Sampled),
            _ => Err(FilterError::InvalidConfig(format!(
                "init mode must be nominal or sampled, got '{s}'"
            ))),
        }
    }
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitMode::Nominal => "nominal",
            InitMode::Sampled => "sampled",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FilterFamily {
    Pf { particles: usize },
    Ukf,
    Ckf3,
}

/// A filter in the roster: family plus whether it consumes transfer packets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FilterSpec {
    pub family: FilterFamily,
    pub transfer: bool,
}

impl FilterSpec {
    /// Family identifier without the transfer prefix, e.g. `pf:3000`.
    pub fn family_id(&self) -> String {
        match self.family {
            FilterFamily::Pf { particles } => format!("pf:{particles}"),
            FilterFamily::Ukf => "ukf".into(),
            FilterFamily::Ckf3 => "ckf3".into(),
        }
    }

    pub fn id(&self) -> String {
        if self.transfer {
            format!("tl-{}", self.family_id())
        } else {
            self.family_id()
        }
    }

    pub fn particles(&self) -> Option<usize> {
        match self.family {
            FilterFamily::Pf { particles } => Some(particles),
            _ => None,
        }
    }

    /// The same family without transfer.
    pub fn isolated(&self) -> FilterSpec {
        FilterSpec {
            family: self.family,
            transfer: false,
        }
    }
}

impl FromStr for FilterSpec {
    type Err = FilterError;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (transfer, rest) = match s.strip_prefix("tl-") {
            Some(r) => (true, r),
            None => (false, s),
        };
        let family = match rest.split_once(':') {
            Some(("pf", n)) => {
                let particles: usize = n
                    .parse()
                    .map_err(|_| FilterError::InvalidConfig(format!("bad particle count in '{s}'")))?;
                if particles == 0 {
                    return Err(FilterError::InvalidConfig(format!("'{s}' needs at least one particle")));
                }
                FilterFamily::Pf { particles }
            }
            None if rest == "pf" => FilterFamily::Pf { particles: 3000 },
            None if rest == "ukf" => FilterFamily::Ukf,
            None if rest == "ckf3" => FilterFamily::Ckf3,
            _ => return Err(FilterError::InvalidConfig(format!("unknown filter '{s}'"))),
        };
        Ok(FilterSpec { family, transfer })
    }
}

impl fmt::Display for FilterSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

/// Parses a comma-separated roster such as `pf:3000,tl-pf:3000,ukf`.
pub fn parse_filter_list(s: &str) -> Result<Vec<FilterSpec>> {
    let list: Vec<FilterSpec> = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if list.is_empty() {
        return Err(FilterError::InvalidConfig("filter list is empty".into()));
    }
    Ok(list)
}

/// Everything that defines an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    /// Number of filter steps `K`.
    pub steps: usize,
    pub dt: f64,
    /// Kinematic process-noise intensity (`q` in S1, `q1` in S2).
    pub q1: f64,
    /// Turn-rate process-noise intensity (S2 only).
    pub q2: f64,
    pub sigma_r: f64,
    pub sigma_zeta: f64,
    pub i_source: f64,
    /// Primary intensities; more than one value makes a sweep.
    pub i_primary: Vec<f64>,
    pub x0: Vector,
    pub p0: Matrix,
    pub filters: Vec<FilterSpec>,
    pub mc: usize,
    pub master_seed: Option<u64>,
    pub packet_noise_mode: PacketNoiseMode,
    pub ukf_kappa: f64,
    pub truth_init: InitMode,
    pub truth_process_noise: bool,
    pub filter_init: InitMode,
}

impl ScenarioConfig {
    pub fn s1() -> Self {
        Self {
            scenario: Scenario::S1,
            steps: 100,
            dt: 1.0,
            q1: 0.1,
            q2: 0.0,
            sigma_r: 10.0,
            sigma_zeta: 10f64.sqrt() * 1e-3,
            i_source: 1.0,
            i_primary: vec![4.0],
            x0: Vector::from_vec(vec![100.0, 10.0, 100.0, 10.0]),
            p0: Matrix::from_diagonal(&Vector::from_vec(vec![50.0, 1.0, 50.0, 1.0])),
            filters: parse_filter_list("pf:3000,tl-pf:3000").expect("static roster"),
            mc: 500,
            master_seed: None,
            packet_noise_mode: PacketNoiseMode::Verbatim,
            ukf_kappa: 2.0,
            truth_init: InitMode::Nominal,
            truth_process_noise: false,
            filter_init: InitMode::Sampled,
        }
    }

    pub fn s2() -> Self {
        Self {
            scenario: Scenario::S2,
            q2: 1.75e-2,
            x0: Vector::from_vec(vec![1000.0, 300.0, 1000.0, 0.0, -3f64.to_radians()]),
            p0: Matrix::from_diagonal(&Vector::from_vec(vec![100.0, 10.0, 100.0, 10.0, 0.1])),
            ..Self::s1()
        }
    }

    pub fn defaults(scenario: Scenario) -> Self {
        match scenario {
            Scenario::S1 => Self::s1(),
            Scenario::S2 => Self::s2(),
        }
    }

    pub fn motion_model(&self) -> MotionModel {
        match self.scenario {
            Scenario::S1 => MotionModel::LinearCV {
                dt: self.dt,
                q: self.q1,
            },
            Scenario::S2 => MotionModel::CoordinatedTurn {
                dt: self.dt,
                q1: self.q1,
                q2: self.q2,
            },
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.master_seed
            .ok_or_else(|| FilterError::InvalidConfig("missing seed".into()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FilterError::InvalidConfig(m));
        if self.steps == 0 {
            return bad("K must be at least 1".into());
        }
        if self.mc == 0 {
            return bad("mc must be at least 1".into());
        }
        if self.mc >= 1 << 24 {
            return bad("mc must be below 2^24".into());
        }
        self.motion_model().validate()?;
        if !(self.sigma_r > 0.0 && self.sigma_zeta > 0.0) {
            return bad("sigma_r and sigma_zeta must be positive".into());
        }
        if !(self.i_source > 0.0 && self.i_source.is_finite()) {
            return bad(format!("I_star must be positive, got {}", self.i_source));
        }
        if self.i_primary.is_empty() {
            return bad("I_w needs at least one value".into());
        }
        if let Some(i) = self.i_primary.iter().find(|i| !(**i > 0.0 && i.is_finite())) {
            return bad(format!("I_w must be positive, got {i}"));
        }
        let n = self.motion_model().dim();
        if self.x0.len() != n || self.p0.nrows() != n || self.p0.ncols() != n {
            return bad(format!("x0 and P0 must have dimension {n} for {}", self.scenario));
        }
        if self.filters.is_empty() {
            return bad("filter list is empty".into());
        }
        if !(self.ukf_kappa + n as f64 > 0.0) {
            return bad("ukf_kappa must exceed -n".into());
        }
        self.seed()?;
        crate::math::CholeskyFactor::semidefinite(&self.p0)
            .map_err(|_| FilterError::InvalidConfig("P0 must be symmetric PSD".into()))?;
        Ok(())
    }

    /// Distinct TL filters, whose sources run once per Monte-Carlo run.
    fn transfer_specs(&self) -> Vec<FilterSpec> {
        let mut out: Vec<FilterSpec> = Vec::new();
        for f in &self.filters {
            if f.transfer && !out.contains(f) {
                out.push(*f);
            }
        }
        out
    }
}

/// Draws the truth trajectory `x_0..x_K`.
pub fn generate_truth(config: &ScenarioConfig, rng: &mut RngStream) -> Result<Vec<Vector>> {
    let model = config.motion_model();
    let q_v = model.process_noise_cov();
    let mut x = match config.truth_init {
        InitMode::Nominal => config.x0.clone(),
        InitMode::Sampled => sample_gaussian(&config.x0, &config.p0, rng)?,
    };
    let mut out = Vec::with_capacity(config.steps + 1);
    out.push(x.clone());
    for _ in 0..config.steps {
        x = model.transition(&x)?;
        if config.truth_process_noise {
            x = sample_gaussian(&x, &q_v, rng)?;
        }
        out.push(x.clone());
    }
    Ok(out)
}

/// Standard-normal pairs driving the measurement noise of steps `1..=steps`.
pub fn measurement_normals(steps: usize, rng: &mut RngStream) -> Vec<[f64; 2]> {
    (0..steps)
        .map(|_| [rng.standard_normal(), rng.standard_normal()])
        .collect()
}

/// `h(x_k) + L u_k` for `k = 1..K`, with `L` the sensor's noise factor.
pub fn measurements_from_normals(
    truth: &[Vector],
    sensor: &SensorModel,
    normals: &[[f64; 2]],
) -> Result<Vec<[f64; 2]>> {
    if truth.len() != normals.len() + 1 {
        return Err(FilterError::LengthMismatch {
            expected: truth.len().saturating_sub(1),
            actual: normals.len(),
        });
    }
    truth[1..]
        .iter()
        .zip(normals)
        .map(|(x, u)| {
            let h = measure(x)?;
            Ok(sensor.corrupt(h.as_slice(), *u))
        })
        .collect()
}

/// Noisy measurements of `truth[1..]`.
pub fn generate_measurements(
    truth: &[Vector],
    sensor: &SensorModel,
    rng: &mut RngStream,
) -> Result<Vec<[f64; 2]>> {
    let normals = measurement_normals(truth.len().saturating_sub(1), rng);
    measurements_from_normals(truth, sensor, &normals)
}

/// `RMSE(k) = sqrt(mean_m |p_true - p_est|^2)`; outer index is the run.
pub fn rmse_per_step(true_pos: &[Vec<[f64; 2]>], est_pos: &[Vec<[f64; 2]>]) -> Result<Vec<f64>> {
    if true_pos.len() != est_pos.len() {
        return Err(FilterError::LengthMismatch {
            expected: true_pos.len(),
            actual: est_pos.len(),
        });
    }
    let first = true_pos.first().ok_or(FilterError::EmptyInput)?;
    let k = first.len();
    let mut acc = vec![0.0; k];
    for (t, e) in true_pos.iter().zip(est_pos) {
        if t.len() != k || e.len() != k {
            return Err(FilterError::LengthMismatch {
                expected: k,
                actual: if t.len() != k { t.len() } else { e.len() },
            });
        }
        for (a, (pt, pe)) in acc.iter_mut().zip(t.iter().zip(e)) {
            *a += (pt[0] - pe[0]).powi(2) + (pt[1] - pe[1]).powi(2);
        }
    }
    let m = true_pos.len() as f64;
    Ok(acc.into_iter().map(|s| (s / m).sqrt()).collect())
}

/// Mean of the per-step RMSE series.
pub fn overall_rmse(rmse: &[f64]) -> f64 {
    rmse.iter().sum::<f64>() / rmse.len() as f64
}

/// Isolated minus transfer RMSE.
pub fn delta_rmse(isolated: f64, tl: f64) -> f64 {
    isolated - tl
}

/// `|I_w - I*_w|`.
pub fn delta_intensity(i_w: f64, i_star: f64) -> f64 {
    (i_w - i_star).abs()
}

/// Aggregated results of one filter at one primary intensity.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    /// RMSE at `k = 1..K` (m).
    pub rmse_per_step: Vec<f64>,
    pub overall_rmse: f64,
    /// Mean over runs of the per-run mean step time (ms).
    pub time_per_step_ms: f64,
    /// Median over runs of the per-run mean step time (ms).
    pub time_per_step_median_ms: f64,
    pub degenerate_weight_events: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub filter: FilterSpec,
    pub i_w: f64,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub cells: Vec<CellResult>,
    /// Source packets per run, when recording was requested.
    pub packets: Option<PacketLog>,
}

impl ExperimentResult {
    pub fn cell(&self, filter_id: &str, i_w: f64) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.filter.id() == filter_id && c.i_w == i_w)
    }

    /// `(delta_I_w, family id, isolated - TL overall RMSE)` for every TL filter with an isolated twin.
    pub fn deltas(&self, i_star: f64) -> Vec<(f64, String, f64)> {
        let mut out = Vec::new();
        for c in self.cells.iter().filter(|c| c.filter.transfer) {
            if let Some(iso) = self
                .cells
                .iter()
                .find(|o| o.filter == c.filter.isolated() && o.i_w == c.i_w)
            {
                out.push((
                    delta_intensity(c.i_w, i_star),
                    c.filter.family_id(),
                    delta_rmse(iso.metrics.overall_rmse, c.metrics.overall_rmse),
                ));
            }
        }
        out
    }
}

/// Execution knobs that do not change the numbers.
#[derive(Debug, Clone, Default)]
pub struct ExperimentOptions {
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
    /// Source packets to use instead of running the source filters.
    pub replay: Option<PacketLog>,
    /// Return the source packets of every run.
    pub record_packets: bool,
}

#[derive(Debug, Clone, Default)]
struct CellAccum {
    sq_err: Vec<f64>,
    step_ms: f64,
    degenerate: usize,
}

struct RunOutcome {
    cells: Vec<CellAccum>,
    packets: Vec<(String, Vec<TransferPacket>)>,
}

fn pf_slot(n: usize) -> u32 {
    u32::try_from(n).unwrap_or(u32::MAX)
}

/// Per-run sources of randomness and the shared data every filter sees.
struct RunData {
    truth: Vec<Vector>,
    z_source: Vec<[f64; 2]>,
    primary_normals: Vec<[f64; 2]>,
    prior: StateGaussian,
}

fn run_data(config: &ScenarioConfig, seed: u64, run: usize) -> Result<RunData> {
    let run = run as u64;
    let mut truth_rng = RngStream::derive(seed, run, StreamPurpose::Truth);
    let truth = generate_truth(config, &mut truth_rng)?;
    let source = SensorModel::new(config.sigma_r, config.sigma_zeta, config.i_source)?;
    let mut src_rng = RngStream::derive(seed, run, StreamPurpose::SourceMeasurement);
    let z_source = generate_measurements(&truth, &source, &mut src_rng)?;
    let mut pri_rng = RngStream::derive(seed, run, StreamPurpose::PrimaryMeasurement);
    let primary_normals = measurement_normals(config.steps, &mut pri_rng);
    let mean = match config.filter_init {
        InitMode::Nominal => config.x0.clone(),
        InitMode::Sampled => {
            let mut r = RngStream::derive(seed, run, StreamPurpose::InitialEstimate);
            sample_gaussian(&config.x0, &config.p0, &mut r)?
        }
    };
    Ok(RunData {
        truth,
        z_source,
        primary_normals,
        prior: StateGaussian::new(mean, config.p0.clone())?,
    })
}

/// Packets from the source filter paired with `spec`, one per source step.
pub fn source_packets(
    config: &ScenarioConfig,
    spec: &FilterSpec,
    run: usize,
    prior: &StateGaussian,
    z_source: &[[f64; 2]],
) -> Result<Vec<TransferPacket>> {
    let seed = config.seed()?;
    let model = config.motion_model();
    let sensor = SensorModel::new(config.sigma_r, config.sigma_zeta, config.i_source)?;
    let mut out = Vec::with_capacity(z_source.len());
    match spec.family {
        FilterFamily::Pf { particles } => {
            let rng = RngStream::derive(seed, run as u64, StreamPurpose::SourceFilter(pf_slot(particles)));
            let inner = SirFilter::new(Dynamics::new(model)?, sensor, prior, particles, rng)?;
            let mut src = SourcePf::new(inner, config.packet_noise_mode);
            for z in z_source {
                out.push(src.step(z)?.packet);
            }
        }
        FilterFamily::Ukf | FilterFamily::Ckf3 => {
            let mut f = GaussianFilter::new(prior, sigma_rule(config, spec), model, sensor);
            for z in z_source {
                out.push(f.source_step(z)?.1);
            }
        }
    }
    Ok(out)
}

fn sigma_rule(config: &ScenarioConfig, spec: &FilterSpec) -> SigmaRule {
    match spec.family {
        FilterFamily::Ckf3 => SigmaRule::Cubature3,
        _ => SigmaRule::Unscented {
            kappa: config.ukf_kappa,
        },
    }
}

/// Runs one primary filter over the series; returns per-step position errors squared.
fn run_primary(
    config: &ScenarioConfig,
    spec: &FilterSpec,
    run: usize,
    data: &RunData,
    z: &[[f64; 2]],
    sensor: &SensorModel,
    packets: Option<&[TransferPacket]>,
) -> Result<CellAccum> {
    let seed = config.seed()?;
    let model = config.motion_model();
    let k_total = z.len();
    let mut sq_err = Vec::with_capacity(k_total);
    let mut elapsed = 0.0f64;
    let mut degenerate = 0;
    let packet_for = |k: usize| -> Option<&TransferPacket> {
        match packets {
            Some(p) if k >= 2 => p.get(k - 2),
            _ => None,
        }
    };
    let mut record = |k: usize, est: &StateGaussian| {
        let x = &data.truth[k];
        sq_err.push((x[0] - est.mean[0]).powi(2) + (x[2] - est.mean[2]).powi(2));
    };
    match spec.family {
        FilterFamily::Pf { particles } => {
            let rng = RngStream::derive(seed, run as u64, StreamPurpose::PrimaryFilter(pf_slot(particles)));
            let inner = SirFilter::new(Dynamics::new(model)?, sensor.clone(), &data.prior, particles, rng)?;
            let mut f = TlPf::new(inner);
            for (i, zk) in z.iter().enumerate() {
                let k = i + 1;
                let p = packet_for(k);
                let t = Instant::now();
                let est = f.step(zk, p)?;
                elapsed += t.elapsed().as_secs_f64();
                record(k, &est);
            }
            degenerate = f.particles().degenerate_events();
        }
        FilterFamily::Ukf | FilterFamily::Ckf3 => {
            let mut f = GaussianFilter::new(&data.prior, sigma_rule(config, spec), model, sensor.clone());
            for (i, zk) in z.iter().enumerate() {
                let k = i + 1;
                let p = packet_for(k);
                let t = Instant::now();
                let est = f.step(zk, p)?;
                elapsed += t.elapsed().as_secs_f64();
                record(k, &est);
            }
        }
    }
    Ok(CellAccum {
        sq_err,
        step_ms: 1e3 * elapsed / k_total as f64,
        degenerate,
    })
}

fn run_one(config: &ScenarioConfig, run: usize, opts: &ExperimentOptions) -> Result<RunOutcome> {
    let seed = config.seed()?;
    let data = run_data(config, seed, run)?;
    let mut packets: Vec<(String, Vec<TransferPacket>)> = Vec::new();
    for spec in config.transfer_specs() {
        let id = spec.id();
        let series = match &opts.replay {
            Some(log) => {
                let p = log.get(&(run, id.clone())).ok_or_else(|| {
                    FilterError::InvalidConfig(format!("replay file has no packets for run {run} {id}"))
                })?;
                if p.len() != config.steps {
                    return Err(FilterError::InvalidConfig(format!(
                        "replay file has {} packets for run {run} {id}, expected {}",
                        p.len(),
                        config.steps
                    )));
                }
                p.clone()
            }
            None => source_packets(config, &spec, run, &data.prior, &data.z_source)?,
        };
        packets.push((id, series));
    }
    let mut cells = Vec::with_capacity(config.i_primary.len() * config.filters.len());
    for &i_w in &config.i_primary {
        let sensor = SensorModel::new(config.sigma_r, config.sigma_zeta, i_w)?;
        let z = measurements_from_normals(&data.truth, &sensor, &data.primary_normals)?;
        for spec in &config.filters {
            let p = if spec.transfer {
                let id = spec.id();
                packets.iter().find(|(i, _)| *i == id).map(|(_, s)| s.as_slice())
            } else {
                None
            };
            cells.push(run_primary(config, spec, run, &data, &z, &sensor, p)?);
        }
    }
    if !opts.record_packets {
        packets.clear();
    }
    Ok(RunOutcome { cells, packets })
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs the experiment with default options.
pub fn run_experiment(config: &ScenarioConfig) -> Result<ExperimentResult> {
    run_experiment_with(config, &ExperimentOptions::default())
}

pub fn run_experiment_with(
    config: &ScenarioConfig,
    opts: &ExperimentOptions,
) -> Result<ExperimentResult> {
    config.validate()?;
    let work = || -> Result<Vec<RunOutcome>> {
        (0..config.mc)
            .into_par_iter()
            .map(|run| run_one(config, run, opts))
            .collect()
    };
    let outcomes = match opts.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| FilterError::InvalidConfig(format!("thread pool: {e}")))?
            .install(work)?,
        None => work()?,
    };

    let mut cells = Vec::new();
    let mc = config.mc as f64;
    let mut idx = 0;
    for &i_w in &config.i_primary {
        for spec in &config.filters {
            let mut acc = vec![0.0; config.steps];
            let mut times = Vec::with_capacity(config.mc);
            let mut degenerate = 0;
            for o in &outcomes {
                let c = &o.cells[idx];
                for (a, e) in acc.iter_mut().zip(&c.sq_err) {
                    *a += e;
                }
                times.push(c.step_ms);
                degenerate += c.degenerate;
            }
            let rmse: Vec<f64> = acc.iter().map(|s| (s / mc).sqrt()).collect();
            let mean_time = times.iter().sum::<f64>() / mc;
            cells.push(CellResult {
                filter: *spec,
                i_w,
                metrics: RunMetrics {
                    overall_rmse: overall_rmse(&rmse),
                    rmse_per_step: rmse,
                    time_per_step_ms: mean_time,
                    time_per_step_median_ms: median(&mut times),
                    degenerate_weight_events: degenerate,
                },
            });
            idx += 1;
        }
    }
    let packets = opts.record_packets.then(|| {
        let mut log = PacketLog::new();
        for (run, o) in outcomes.into_iter().enumerate() {
            for (id, p) in o.packets {
                log.insert((run, id), p);
            }
        }
        log
    });
    Ok(ExperimentResult { cells, packets })
}

/// Source packets of every run for the TL filters in the roster.
pub fn collect_packets(config: &ScenarioConfig, threads: Option<usize>) -> Result<PacketLog> {
    config.validate()?;
    let seed = config.seed()?;
    let specs = config.transfer_specs();
    if specs.is_empty() {
        return Err(FilterError::InvalidConfig(
            "no transfer filters in the roster; nothing to dump".into(),
        ));
    }
    let work = || -> Result<Vec<Vec<(String, Vec<TransferPacket>)>>> {
        (0..config.mc)
            .into_par_iter()
            .map(|run| {
                let data = run_data(config, seed, run)?;
                specs
                    .iter()
                    .map(|s| Ok((s.id(), source_packets(config, s, run, &data.prior, &data.z_source)?)))
                    .collect()
            })
            .collect()
    };
    let per_run = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| FilterError::InvalidConfig(format!("thread pool: {e}")))?
            .install(work)?,
        None => work()?,
    };
    let mut log = PacketLog::new();
    for (run, series) in per_run.into_iter().enumerate() {
        for (id, p) in series {
            log.insert((run, id), p);
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny(scenario: Scenario) -> ScenarioConfig {
        ScenarioConfig {
            steps: 10,
            mc: 3,
            master_seed: Some(1),
            filters: parse_filter_list("pf:100,tl-pf:100").unwrap(),
            ..ScenarioConfig::defaults(scenario)
        }
    }

    #[test]
    fn filter_ids_round_trip() {
        for s in ["pf:3000", "tl-pf:3000", "ukf", "tl-ukf", "ckf3", "tl-ckf3"] {
            assert_eq!(s.parse::<FilterSpec>().unwrap().id(), s);
        }
        assert!("pf:0".parse::<FilterSpec>().is_err());
        assert!("ekf".parse::<FilterSpec>().is_err());
        assert_eq!(parse_filter_list("pf:10, tl-ukf").unwrap().len(), 2);
    }

    #[test]
    fn truth_noiseless_cv_and_length() {
        let mut c = ScenarioConfig::s1();
        c.truth_init = InitMode::Nominal;
        c.truth_process_noise = false;
        let t = generate_truth(&c, &mut RngStream::from_seed(1)).unwrap();
        assert_eq!(t.len(), 101);
        for k in 1..t.len() {
            assert_relative_eq!(t[k][0] - t[k - 1][0], c.dt * t[k - 1][1], epsilon = 1e-9);
            assert_relative_eq!(t[k][2] - t[k - 1][2], c.dt * t[k - 1][3], epsilon = 1e-9);
        }
    }

    #[test]
    fn truth_s2_is_circular_arc() {
        let c = ScenarioConfig::s2();
        let t = generate_truth(&c, &mut RngStream::from_seed(1)).unwrap();
        let w = c.x0[4];
        let (vx, vy) = (c.x0[1], c.x0[3]);
        // closed-form constant-turn position at time t
        for (k, x) in t.iter().enumerate() {
            let tk = k as f64 * c.dt;
            let px = c.x0[0] + ((w * tk).sin() * vx - (1.0 - (w * tk).cos()) * vy) / w;
            let py = c.x0[2] + ((1.0 - (w * tk).cos()) * vx + (w * tk).sin() * vy) / w;
            assert!((x[0] - px).abs() < 1e-6 && (x[2] - py).abs() < 1e-6, "k = {k}");
            let speed = (x[1] * x[1] + x[3] * x[3]).sqrt();
            assert_relative_eq!(speed, 300.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn truth_sampled_protocol_varies() {
        let mut c = ScenarioConfig::s2();
        c.truth_init = InitMode::Sampled;
        c.truth_process_noise = true;
        let a = generate_truth(&c, &mut RngStream::from_seed(1)).unwrap();
        let b = generate_truth(&c, &mut RngStream::from_seed(2)).unwrap();
        assert_ne!(a[0], b[0]);
        assert_ne!(a[0], c.x0);
    }

    #[test]
    fn measurements_zero_intensity_and_moments() {
        let c = ScenarioConfig::s1();
        let t = generate_truth(&c, &mut RngStream::from_seed(1)).unwrap();
        // unit range deviation keeps the noise std at 1e-6 m
        let s = SensorModel::new(1.0, c.sigma_zeta, 1e-12).unwrap();
        let z = generate_measurements(&t, &s, &mut RngStream::from_seed(2)).unwrap();
        assert_eq!(z.len(), 100);
        for (zk, x) in z.iter().zip(&t[1..]) {
            let h = measure(x).unwrap();
            assert!((zk[0] - h[0]).abs() < 1e-5 && (zk[1] - h[1]).abs() < 1e-5);
        }

        let s = SensorModel::new(c.sigma_r, c.sigma_zeta, 4.0).unwrap();
        let x = Vector::from_vec(vec![1000.0, 0.0, 1000.0, 0.0]);
        let truth = vec![x.clone(); 100_001];
        let z = generate_measurements(&truth, &s, &mut RngStream::from_seed(3)).unwrap();
        let h = measure(&x).unwrap();
        let n = z.len() as f64;
        let vr = z.iter().map(|v| (v[0] - h[0]).powi(2)).sum::<f64>() / n;
        let vb = z.iter().map(|v| (v[1] - h[1]).powi(2)).sum::<f64>() / n;
        assert!((vr / s.cov()[(0, 0)] - 1.0).abs() < 0.05);
        assert!((vb / s.cov()[(1, 1)] - 1.0).abs() < 0.05);
    }

    #[test]
    fn sensor_streams_uncorrelated() {
        let seed = 5;
        let a = measurement_normals(10_000, &mut RngStream::derive(seed, 0, StreamPurpose::SourceMeasurement));
        let b = measurement_normals(10_000, &mut RngStream::derive(seed, 0, StreamPurpose::PrimaryMeasurement));
        for comp in 0..2 {
            let n = a.len() as f64;
            let ma = a.iter().map(|v| v[comp]).sum::<f64>() / n;
            let mb = b.iter().map(|v| v[comp]).sum::<f64>() / n;
            let cov = a.iter().zip(&b).map(|(x, y)| (x[comp] - ma) * (y[comp] - mb)).sum::<f64>() / n;
            let sa = (a.iter().map(|v| (v[comp] - ma).powi(2)).sum::<f64>() / n).sqrt();
            let sb = (b.iter().map(|v| (v[comp] - mb).powi(2)).sum::<f64>() / n).sqrt();
            assert!((cov / (sa * sb)).abs() < 0.02);
        }
    }

    #[test]
    fn rmse_examples() {
        let truth = vec![vec![[1.0, 2.0], [3.0, 4.0]]];
        assert_eq!(rmse_per_step(&truth, &truth).unwrap(), vec![0.0, 0.0]);
        let est = vec![vec![[4.0, 6.0], [6.0, 8.0]]];
        assert_eq!(rmse_per_step(&truth, &est).unwrap(), vec![5.0, 5.0]);
        let t2 = vec![vec![[0.0, 0.0]], vec![[0.0, 0.0]]];
        let e2 = vec![vec![[0.0, 0.0]], vec![[0.0, 2.0]]];
        assert_relative_eq!(rmse_per_step(&t2, &e2).unwrap()[0], 2f64.sqrt(), epsilon = 1e-15);
        assert!(matches!(
            rmse_per_step(&t2, &e2[..1]),
            Err(FilterError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn overall_and_delta_examples() {
        assert_eq!(overall_rmse(&[3.5; 7]), 3.5);
        assert_eq!(overall_rmse(&[1.0, 3.0]), 2.0);
        assert_relative_eq!(delta_rmse(16.74, 14.33), 2.41, epsilon = 1e-12);
        assert_eq!(delta_rmse(5.0, 5.0), 0.0);
        assert_eq!(delta_intensity(8.0, 1.0), 7.0);
    }

    #[test]
    fn single_filter_single_row() {
        let c = ScenarioConfig {
            mc: 1,
            filters: parse_filter_list("pf:50").unwrap(),
            ..tiny(Scenario::S1)
        };
        let r = run_experiment(&c).unwrap();
        assert_eq!(r.cells.len(), 1);
        assert_eq!(r.cells[0].metrics.rmse_per_step.len(), 10);
    }

    #[test]
    fn experiment_is_deterministic() {
        let c = ScenarioConfig {
            filters: parse_filter_list("pf:80,tl-pf:80,ukf,tl-ukf,ckf3,tl-ckf3").unwrap(),
            i_primary: vec![1.0, 4.0],
            ..tiny(Scenario::S2)
        };
        let strip = |r: ExperimentResult| {
            r.cells
                .into_iter()
                .map(|c| (c.filter, c.i_w, c.metrics.rmse_per_step))
                .collect::<Vec<_>>()
        };
        let a = strip(run_experiment(&c).unwrap());
        let one = ExperimentOptions {
            threads: Some(1),
            ..Default::default()
        };
        let three = ExperimentOptions {
            threads: Some(3),
            ..Default::default()
        };
        let b = strip(run_experiment_with(&c, &one).unwrap());
        let d = strip(run_experiment_with(&c, &three).unwrap());
        assert_eq!(a, b);
        assert_eq!(a, d);
        assert_eq!(a.len(), 12);
    }

    #[test]
    fn first_and_isolated_steps_share_random_numbers() {
        // the isolated and TL particle filters coincide until the first packet
        let c = tiny(Scenario::S1);
        let r = run_experiment(&c).unwrap();
        let iso = &r.cell("pf:100", 4.0).unwrap().metrics.rmse_per_step;
        let tl = &r.cell("tl-pf:100", 4.0).unwrap().metrics.rmse_per_step;
        assert_eq!(iso[0], tl[0]);
        assert_ne!(iso[1], tl[1]);
    }

    #[test]
    fn replay_matches_live_run() {
        let c = tiny(Scenario::S2);
        let rec = ExperimentOptions {
            record_packets: true,
            ..Default::default()
        };
        let live = run_experiment_with(&c, &rec).unwrap();
        let log = live.packets.clone().unwrap();
        assert_eq!(log, collect_packets(&c, None).unwrap());
        let replay = ExperimentOptions {
            replay: Some(log),
            ..Default::default()
        };
        let back = run_experiment_with(&c, &replay).unwrap();
        for (a, b) in live.cells.iter().zip(&back.cells) {
            assert_eq!(a.metrics.rmse_per_step, b.metrics.rmse_per_step);
        }
    }

    #[test]
    fn replay_missing_run_is_validation_error() {
        let c = tiny(Scenario::S1);
        let opts = ExperimentOptions {
            replay: Some(PacketLog::new()),
            ..Default::default()
        };
        let e = run_experiment_with(&c, &opts).unwrap_err();
        assert!(e.is_validation());
    }

    #[test]
    fn validation_errors() {
        let mut c = tiny(Scenario::S1);
        c.i_primary = vec![0.0];
        assert!(matches!(c.validate(), Err(FilterError::InvalidConfig(_))));
        let mut c = tiny(Scenario::S1);
        c.master_seed = None;
        assert!(c.validate().is_err());
        let mut c = tiny(Scenario::S2);
        c.x0 = Vector::zeros(4);
        assert!(c.validate().is_err());
    }

    #[test]
    fn deltas_pair_tl_with_isolated() {
        let c = ScenarioConfig {
            i_primary: vec![1.0, 4.0],
            ..tiny(Scenario::S1)
        };
        let r = run_experiment(&c).unwrap();
        let d = r.deltas(1.0);
        assert_eq!(d.len(), 2);
        assert_eq!(d[0].0, 0.0);
        assert_eq!(d[1].0, 3.0);
        assert_eq!(d[1].1, "pf:100");
    }
}
