//! Deterministic counter-based random number generator.
//!
//! The stream is a splitmix64 mix of `seed + n * GAMMA` for a running
//! counter `n`, so identical seeds give identical samples on every
//! platform and the generator can be forked cheaply for independent
//! substreams. No platform RNG is ever consulted.

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// Counter-based RNG (splitmix64 output function).
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    counter: u64,
    /// Spare Gaussian sample from the last Box-Muller pair.
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            counter: 0,
            spare_normal: None,
        }
    }

    /// Independent substream derived from this generator's seed and a label.
    pub fn fork(&self, label: u64) -> Rng {
        let mixed = mix(self.seed ^ label.wrapping_mul(GAMMA).wrapping_add(0x1f12_3bb5));
        Rng::new(mixed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.seed.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [0, n). Rejection-free modulo is fine here: n is always
    /// tiny compared to 2^64 so the bias is far below anything observable.
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller, one sample at a time.
    pub fn next_standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] so the log never sees zero.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        self.spare_normal = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    /// Sample N(mu, sigma^2) truncated to [lo, hi] by rejection.
    pub fn next_trunc_normal(&mut self, mu: f64, sigma: f64, lo: f64, hi: f64) -> Result<f64> {
        if lo >= hi {
            return Err(CoreError::Parameter(alloc::format!(
                "truncation bounds must satisfy lo < hi, got [{lo}, {hi}]"
            )));
        }
        if sigma <= 0.0 {
            return Err(CoreError::Parameter(alloc::format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        loop {
            let z = mu + sigma * self.next_standard_normal();
            if z >= lo && z <= hi {
                return Ok(z);
            }
        }
    }

    pub fn next_scalar_normal<F: Scalar>(&mut self) -> F {
        F::from_f64(self.next_standard_normal())
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, data: &mut [T]) {
        for i in (1..data.len()).rev() {
            let j = self.next_below(i + 1);
            data.swap(i, j);
        }
    }
}

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
