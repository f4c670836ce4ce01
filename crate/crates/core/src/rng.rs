//! Counter-based random number generation.
//!
//! Every random object in the library is derived from a `(master_seed,
//! stream, substream)` triple through a splitmix64-style mixer, so the
//! randomness consumed by path `p` of stream `s` depends only on those keys
//! and never on scheduling or worker count. Distinct streams (Brownian
//! increments, delay realizations, candidate draws) share no state.

/// Stream tag for Brownian increment generation.
pub const STREAM_BROWNIAN: u64 = 0x01;
/// Stream tag for random delay realizations (independent of the noise).
pub const STREAM_DELAY: u64 = 0x02;
/// Stream tag for coefficient probing.
pub const STREAM_PROBE: u64 = 0x03;
/// Stream tag for candidate controls in inequality checks.
pub const STREAM_CANDIDATE: u64 = 0x04;
/// Stream tag for random perturbation directions in certificates.
pub const STREAM_PERTURBATION: u64 = 0x05;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic counter-based generator; one instance per (stream, path).
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
    spare_normal: Option<f64>,
}

impl CounterRng {
    /// Derives the generator key from `(master_seed, stream, substream)`.
    /// Identical triples give identical sequences.
    pub fn from_stream(master_seed: u64, stream: u64, substream: u64) -> Self {
        let k0 = splitmix(master_seed);
        let k1 = splitmix(k0 ^ stream.wrapping_mul(0xD134_2543_DE82_EF95));
        let key = splitmix(k1 ^ substream.wrapping_mul(0x2545_F491_4F6C_DD1D));
        Self {
            key,
            counter: 0,
            spare_normal: None,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let out = splitmix(self.key ^ self.counter.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        self.counter = self.counter.wrapping_add(1);
        out
    }

    /// Uniform draw in the open interval (0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        // 53-bit mantissa, offset by half a unit so 0 is never produced
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
    }

    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw via Box-Muller; the spare is cached per instance.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let mag = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare_normal = Some(mag * s);
        mag * c
    }

    /// Exponential draw with the given rate.
    pub fn exponential(&mut self, rate: f64) -> f64 {
        -self.uniform().ln() / rate
    }
}
