//! Transfer-learning particle filter: the source filter exports a Gaussian
//! summary of its one-step-ahead predicted observation, and the primary
//! filter uses it as an extra likelihood factor.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use crate::error::{FilterError, Result};
use crate::math::{wrap_angle, CholeskyFactor, Matrix, Vector};
use crate::models::{measure_slice, residual, SensorModel};
use crate::particle::{sir_step, Dynamics, ParticleSet, SirFilter, StateGaussian};
use crate::rng::RngStream;

/// Predicted-observation summary shipped from source to primary.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferPacket {
    /// Predicted range (m) and bearing (rad).
    pub eta_mean: Vector,
    pub eta_cov: Matrix,
    /// Primary step this packet is meant for.
    pub for_step: usize,
}

impl TransferPacket {
    pub fn new(eta_mean: [f64; 2], eta_cov: [[f64; 2]; 2], for_step: usize) -> Self {
        Self {
            eta_mean: Vector::from_row_slice(&eta_mean),
            eta_cov: Matrix::from_row_slice(2, 2, &[eta_cov[0][0], eta_cov[0][1], eta_cov[1][0], eta_cov[1][1]]),
            for_step,
        }
    }

    /// Text record `k, eta_r, eta_zeta, P11, P12, P22`.
    pub fn to_record(&self) -> String {
        format!(
            "{}, {}, {}, {}, {}, {}",
            self.for_step,
            self.eta_mean[0],
            self.eta_mean[1],
            self.eta_cov[(0, 0)],
            self.eta_cov[(0, 1)],
            self.eta_cov[(1, 1)]
        )
    }

    pub fn from_record(line: &str, line_no: usize) -> Result<Self> {
        let bad = |reason: String| FilterError::PacketFormat {
            line: line_no,
            reason,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 6 {
            return Err(bad(format!("expected 6 fields, found {}", fields.len())));
        }
        let k: usize = fields[0]
            .parse()
            .map_err(|_| bad(format!("bad step index '{}'", fields[0])))?;
        let mut v = [0.0f64; 5];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| bad(format!("bad number '{f}'")))?;
            if !slot.is_finite() {
                return Err(bad(format!("non-finite value '{f}'")));
            }
        }
        Ok(Self::new([v[0], v[1]], [[v[2], v[3]], [v[3], v[4]]], k))
    }
}

/// Equally weighted predicted-observation particles behind a packet.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedObservationCloud {
    pub eta: Vec<[f64; 2]>,
}

impl PredictedObservationCloud {
    /// Mean and scatter, with bearings averaged as deviations from the first particle.
    pub fn moments(&self) -> ([f64; 2], [[f64; 2]; 2]) {
        let n = self.eta.len() as f64;
        let reference = self.eta[0][1];
        let mut mr = 0.0;
        let mut md = 0.0;
        for e in &self.eta {
            mr += e[0];
            md += wrap_angle(e[1] - reference);
        }
        mr /= n;
        md /= n;
        let (mut s00, mut s01, mut s11) = (0.0, 0.0, 0.0);
        for e in &self.eta {
            let dr = e[0] - mr;
            let db = wrap_angle(e[1] - reference) - md;
            s00 += dr * dr;
            s01 += dr * db;
            s11 += db * db;
        }
        (
            [mr, wrap_angle(reference + md)],
            [[s00 / n, s01 / n], [s01 / n, s11 / n]],
        )
    }
}

/// How predicted observations are formed from lookahead state particles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PacketNoiseMode {
    /// `eta_i ~ N(h(x_i), Q*_w)`, and `Q*_w` is also added to the packet covariance.
    #[default]
    Verbatim,
    /// `eta_i = h(x_i)`; `Q*_w` enters only through the packet covariance.
    Analytic,
}

impl std::str::FromStr for PacketNoiseMode {
    type Err = FilterError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "verbatim" => Ok(Self::Verbatim),
            "analytic" => Ok(Self::Analytic),
            _ => Err(FilterError::InvalidConfig(format!(
                "packet_noise_mode must be verbatim or analytic, got '{s}'"
            ))),
        }
    }
}

impl std::fmt::Display for PacketNoiseMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Verbatim => "verbatim",
            Self::Analytic => "analytic",
        })
    }
}

/// Output of one source step.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceOutput {
    pub estimate: StateGaussian,
    pub packet: TransferPacket,
    pub cloud: PredictedObservationCloud,
}

/// SIR step on `z_star`, then a lookahead draw producing the packet for step `k + 1`.
/// The lookahead works on a copy; `ps` holds the step-`k` posterior afterwards.
pub fn source_step(
    ps: &mut ParticleSet,
    z_star: &[f64],
    dynamics: &Dynamics,
    sensor_star: &SensorModel,
    mode: PacketNoiseMode,
    rng: &mut RngStream,
) -> Result<SourceOutput> {
    let estimate = sir_step(ps, z_star, dynamics, sensor_star, rng)?;
    let dim = ps.dim();
    let mut mean = [0.0f64; 8];
    let mut next = [0.0f64; 8];
    let mut eta = Vec::with_capacity(ps.len());
    let obs = sensor_star.factor();
    for i in 0..ps.len() {
        dynamics.model.transition_into(ps.particle(i), &mut mean[..dim]);
        dynamics.q_v_factor.sample_into(&mean[..dim], rng, &mut next[..dim]);
        let h = measure_slice(&next[..dim]);
        let e = match mode {
            PacketNoiseMode::Verbatim => {
                let mut out = [0.0; 2];
                obs.sample_into(&h, rng, &mut out);
                out
            }
            PacketNoiseMode::Analytic => h,
        };
        eta.push(e);
    }
    let cloud = PredictedObservationCloud { eta };
    let (m, s) = cloud.moments();
    let q = sensor_star.cov();
    let cov = [
        [s[0][0] + q[(0, 0)], s[0][1] + q[(0, 1)]],
        [s[1][0] + q[(1, 0)], s[1][1] + q[(1, 1)]],
    ];
    Ok(SourceOutput {
        estimate,
        packet: TransferPacket::new(m, cov, ps.step() + 1),
        cloud,
    })
}

/// Primary step. Without a packet this is exactly `sir_step`, including random draws.
pub fn primary_step(
    ps: &mut ParticleSet,
    z: &[f64],
    packet: Option<&TransferPacket>,
    dynamics: &Dynamics,
    sensor: &SensorModel,
    rng: &mut RngStream,
) -> Result<StateGaussian> {
    let Some(packet) = packet else {
        return sir_step(ps, z, dynamics, sensor, rng);
    };
    let k = ps.step() + 1;
    if packet.for_step != k {
        return Err(FilterError::StaleTransferPacket {
            packet_step: packet.for_step,
            filter_step: k,
        });
    }
    let eta_factor = CholeskyFactor::new(&packet.eta_cov)?;
    let eta = [packet.eta_mean[0], packet.eta_mean[1]];
    ps.predict(&dynamics.model, &dynamics.q_v_factor, rng);
    let z_factor = sensor.factor();
    ps.accumulate_pair(|x| {
        let h = measure_slice(x);
        (
            eta_factor.log_density(&residual(&eta, &h)),
            z_factor.log_density(&residual(z, &h)),
        )
    });
    ps.normalize()?;
    ps.resample(rng)?;
    Ok(ps.summarize(&dynamics.q_v))
}

/// One-slot queue holding the packet for the next primary step.
#[derive(Debug, Clone, Default)]
pub struct PacketSlot {
    slot: Option<TransferPacket>,
}

impl PacketSlot {
    pub fn push(&mut self, packet: TransferPacket) {
        self.slot = Some(packet);
    }

    /// Removes the held packet for primary step `step`; a packet tagged for another step is an error.
    pub fn take_for(&mut self, step: usize) -> Result<Option<TransferPacket>> {
        match self.slot.take() {
            None => Ok(None),
            Some(p) if p.for_step == step => Ok(Some(p)),
            Some(p) => Err(FilterError::StaleTransferPacket {
                packet_step: p.for_step,
                filter_step: step,
            }),
        }
    }
}

/// Source-side particle filter.
#[derive(Debug, Clone)]
pub struct SourcePf {
    inner: SirFilter,
    mode: PacketNoiseMode,
}

impl SourcePf {
    pub fn new(inner: SirFilter, mode: PacketNoiseMode) -> Self {
        Self { inner, mode }
    }

    pub fn step(&mut self, z_star: &[f64]) -> Result<SourceOutput> {
        let f = &mut self.inner;
        source_step(&mut f.particles, z_star, &f.dynamics, &f.sensor, self.mode, &mut f.rng)
    }

    pub fn particles(&self) -> &ParticleSet {
        self.inner.particles()
    }
}

/// Primary-side particle filter consuming packets.
#[derive(Debug, Clone)]
pub struct TlPf {
    inner: SirFilter,
}

impl TlPf {
    pub fn new(inner: SirFilter) -> Self {
        Self { inner }
    }

    pub fn step(&mut self, z: &[f64], packet: Option<&TransferPacket>) -> Result<StateGaussian> {
        let f = &mut self.inner;
        primary_step(&mut f.particles, z, packet, &f.dynamics, &f.sensor, &mut f.rng)
    }

    pub fn particles(&self) -> &ParticleSet {
        self.inner.particles()
    }
}

/// Estimates and packets of a dual-tracker run.
#[derive(Debug, Clone, PartialEq)]
pub struct DualOutput {
    pub source: Vec<StateGaussian>,
    pub primary: Vec<StateGaussian>,
    /// Packet produced at each source step (the last one is never consumed).
    pub packets: Vec<TransferPacket>,
}

/// Runs the source/primary pipeline over aligned measurement series. Step `k` of
/// the primary consumes the packet produced at source step `k - 1`.
pub fn run_dual(
    source: &mut SourcePf,
    primary: &mut TlPf,
    z_source: &[[f64; 2]],
    z_primary: &[[f64; 2]],
) -> Result<DualOutput> {
    if z_source.len() != z_primary.len() {
        return Err(FilterError::LengthMismatch {
            expected: z_source.len(),
            actual: z_primary.len(),
        });
    }
    let mut slot = PacketSlot::default();
    let mut out = DualOutput {
        source: Vec::with_capacity(z_source.len()),
        primary: Vec::with_capacity(z_source.len()),
        packets: Vec::with_capacity(z_source.len()),
    };
    for (zs, zp) in z_source.iter().zip(z_primary) {
        let k = primary.particles().step() + 1;
        let packet = slot.take_for(k)?;
        out.primary.push(primary.step(zp, packet.as_ref())?);
        let s = source.step(zs)?;
        out.source.push(s.estimate);
        slot.push(s.packet.clone());
        out.packets.push(s.packet);
    }
    Ok(out)
}

/// Packet series keyed by `(run, filter id)`.
pub type PacketLog = BTreeMap<(usize, String), Vec<TransferPacket>>;

/// Writes packets as `# run <m> <filter_id>` headers followed by one record per line.
pub fn write_packets<W: Write>(mut w: W, log: &PacketLog) -> Result<()> {
    writeln!(w, "# k, eta_r, eta_zeta, P11, P12, P22")?;
    for ((run, id), packets) in log {
        writeln!(w, "# run {run} {id}")?;
        for p in packets {
            writeln!(w, "{}", p.to_record())?;
        }
    }
    Ok(())
}

pub fn read_packets<R: BufRead>(r: R) -> Result<PacketLog> {
    let mut log = PacketLog::new();
    let mut current: Option<(usize, String)> = None;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if let Some(rest) = t.strip_prefix('#') {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            if parts.first() == Some(&"run") {
                if parts.len() != 3 {
                    return Err(FilterError::PacketFormat {
                        line: line_no,
                        reason: "run header must be '# run <m> <filter_id>'".into(),
                    });
                }
                let run = parts[1].parse().map_err(|_| FilterError::PacketFormat {
                    line: line_no,
                    reason: format!("bad run index '{}'", parts[1]),
                })?;
                let key = (run, parts[2].to_string());
                log.entry(key.clone()).or_default();
                current = Some(key);
            }
            continue;
        }
        let key = current.as_ref().ok_or_else(|| FilterError::PacketFormat {
            line: line_no,
            reason: "packet record before any run header".into(),
        })?;
        let p = TransferPacket::from_record(t, line_no)?;
        log.get_mut(key).expect("header inserted").push(p);
    }
    Ok(log)
}
