//! Seeded random streams.
//!
//! Every stream is a ChaCha8 keystream keyed by the master seed and selected
//! by a 64-bit stream id built from `(run, purpose)`. ChaCha is counter based,
//! so streams with different ids never overlap and can be created in any
//! order on any thread.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// What a stream is used for inside one Monte-Carlo run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamPurpose {
    /// Initial-state and process-noise draws of the ground truth.
    Truth,
    /// Randomized initial estimate shared by every filter of a run.
    InitialEstimate,
    /// Measurement noise of the source (low-noise) sensor.
    SourceMeasurement,
    /// Measurement noise of the primary (high-noise) sensor.
    PrimaryMeasurement,
    /// Internal draws of a source-side filter, keyed by a filter slot.
    SourceFilter(u32),
    /// Internal draws of a primary-side filter, keyed by a filter slot.
    PrimaryFilter(u32),
}

impl StreamPurpose {
    fn code(self) -> u64 {
        match self {
            StreamPurpose::Truth => 1,
            StreamPurpose::InitialEstimate => 2,
            StreamPurpose::SourceMeasurement => 3,
            StreamPurpose::PrimaryMeasurement => 4,
            StreamPurpose::SourceFilter(slot) => (1 << 32) | slot as u64,
            StreamPurpose::PrimaryFilter(slot) => (2 << 32) | slot as u64,
        }
    }
}

/// An independent, reproducible random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    inner: ChaCha8Rng,
}

impl RngStream {
    /// Stream for `(run, purpose)` under `master_seed`. Runs are limited to 2^24.
    pub fn derive(master_seed: u64, run: u64, purpose: StreamPurpose) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(master_seed);
        inner.set_stream((run << 40) ^ purpose.code());
        Self { inner }
    }

    /// Stand-alone stream, for tests and one-off use.
    pub fn from_seed(seed: u64) -> Self {
        Self::derive(seed, 0, StreamPurpose::Truth)
    }

    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform draw in `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
