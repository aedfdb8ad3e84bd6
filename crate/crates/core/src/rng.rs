//! Seeded random streams.
//!
//! Every consumer draws from its own ChaCha stream keyed by the run seed, so
//! changing how many values one consumer draws never shifts another's.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::num::Scalar;
use crate::tensor::Tensor;

/// Named consumers of randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    /// Noise used to place the conditioning frames at their initial levels.
    InitNoise,
    /// Pure-noise frames appended to the window.
    AppendNoise,
    /// Training-time epsilon draws.
    TrainEps,
    /// Training noise-level draws (random and disturbance schedules).
    ScheduleLevels,
    /// Window start positions for training batches.
    BatchWindow,
    /// Synthetic data generation.
    Data,
    /// Parameter initialization.
    ParamInit,
    /// Anything used only by tooling (benchmarks, grad checks).
    Aux,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::InitNoise => 1,
            Stream::AppendNoise => 2,
            Stream::TrainEps => 3,
            Stream::ScheduleLevels => 4,
            Stream::BatchWindow => 5,
            Stream::Data => 6,
            Stream::ParamInit => 7,
            Stream::Aux => 8,
        }
    }
}

/// Root of all randomness for one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStreams {
    seed: u64,
}

impl SeedStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, stream: Stream) -> ChaCha8Rng {
        self.substream(stream, 0)
    }

    /// A further split of `stream`, e.g. one per bench thread.
    pub fn substream(&self, stream: Stream, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(stream.id());
        rng
    }
}

pub fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Tensor of i.i.d. N(0, 1) draws.
pub fn normal_tensor<T: Scalar, R: rand::Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(standard_normal(rng))).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape and data agree")
}
