//! AWGN forward and feedback channels.
//!
//! Randomness comes from ChaCha8 keyed by a 64-bit seed; the 64-bit stream
//! selector picks an independent substream. Each Monte Carlo trial owns two
//! substreams, one per direction, so trials can run on any number of
//! threads without changing a single sample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::model::SystemParams;

/// Source of independent standard normal samples.
pub trait GaussianSource {
    fn standard_normal(&mut self) -> f64;
}

/// Link direction, the low bit of a trial's substream id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward = 0,
    Feedback = 1,
}

/// `(trial << 1) | direction`.
pub fn substream_id(trial: u64, direction: Direction) -> u64 {
    debug_assert!(trial < 1 << 63, "trial index {trial} does not fit a substream id");
    (trial << 1) | direction as u64
}

/// Reproducible Gaussian stream identified by `(seed, stream_id)`.
#[derive(Clone, Debug)]
pub struct NoiseStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { seed, stream_id, rng }
    }

    pub fn for_trial(seed: u64, trial: u64, direction: Direction) -> Self {
        Self::new(seed, substream_id(trial, direction))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }
}

impl GaussianSource for NoiseStream {
    fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }
}

/// Test double that never adds noise.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroNoise;

impl GaussianSource for ZeroNoise {
    fn standard_normal(&mut self) -> f64 {
        0.0
    }
}

/// Forward channel: `y = x + w_f`, `w_f ~ N(0, σ_f²)`.
pub fn transmit<G: GaussianSource>(x: f64, params: &SystemParams, stream: &mut G) -> f64 {
    x + params.sigma_f2().sqrt() * stream.standard_normal()
}

/// Feedback channel: `z = y + w_b`, `w_b ~ N(0, σ_b²)`. Noiseless feedback
/// returns `y` unchanged and consumes no sample.
pub fn feedback<G: GaussianSource>(y: f64, params: &SystemParams, stream: &mut G) -> f64 {
    if params.sigma_b2() == 0.0 {
        return y;
    }
    y + params.sigma_b2().sqrt() * stream.standard_normal()
}
