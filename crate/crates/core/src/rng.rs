//! Counter-based random numbers.
//!
//! Every draw is a pure function of `(key, counter, stream)`, so any
//! partitioning of the gate loop into blocks or threads sees the same
//! numbers. The mixer is the SplitMix64 finalizer applied to a Weyl
//! sequence position, which is the SplitMix64 generator evaluated at an
//! arbitrary index.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Number of independent streams addressable per counter value.
const STREAMS: u64 = 16;

#[inline(always)]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and an index.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    mix64(mix64(seed ^ 0x5DEE_CE66_D1CE_4E5B).wrapping_add(index.wrapping_mul(GOLDEN)))
}

/// Named stream identifiers used by the gate simulator.
pub mod stream {
    pub const PHOTON_NUMBER: u64 = 0;
    pub const PHOTON_FIRE: u64 = 1;
    pub const DARK: u64 = 2;
    pub const AFTERPULSE: u64 = 3;
    pub const CHARGE_A: u64 = 4;
    pub const CHARGE_B: u64 = 5;
    pub const JITTER_A: u64 = 6;
    pub const JITTER_B: u64 = 7;
    pub const NOISE_A: u64 = 8;
    pub const NOISE_B: u64 = 9;
    pub const AFTERPULSE_CHARGE_A: u64 = 10;
    pub const AFTERPULSE_CHARGE_B: u64 = 11;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self { key: mix64(seed) }
    }

    #[inline(always)]
    pub fn bits(&self, counter: u64, stream: u64) -> u64 {
        debug_assert!(stream < STREAMS);
        let pos = counter
            .wrapping_mul(STREAMS)
            .wrapping_add(stream)
            .wrapping_add(1);
        mix64(self.key.wrapping_add(pos.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1).
    #[inline(always)]
    pub fn uniform(&self, counter: u64, stream: u64) -> f64 {
        (self.bits(counter, stream) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal from two streams via Box-Muller.
    #[inline]
    pub fn normal(&self, counter: u64, stream_a: u64, stream_b: u64) -> f64 {
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform(counter, stream_a);
        let u2 = self.uniform(counter, stream_b);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Poisson variate by CDF inversion; intended for small means.
    pub fn poisson(&self, counter: u64, stream: u64, mean: f64) -> u32 {
        if mean <= 0.0 {
            return 0;
        }
        let u = self.uniform(counter, stream);
        let mut p = (-mean).exp();
        let mut cdf = p;
        let mut k = 0u32;
        while u >= cdf && k < 10_000 {
            k += 1;
            p *= mean / k as f64;
            cdf += p;
            if p == 0.0 {
                break;
            }
        }
        k
    }
}
