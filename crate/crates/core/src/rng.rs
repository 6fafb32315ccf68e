//! SplitMix64 pseudo-random generator.
//!
//! Deliberately tiny and language-independent so that synthetic fixtures can
//! be reproduced bit-exactly outside this crate. The sequence is the standard
//! SplitMix64 of Steele, Lea and Flood: the state advances by the golden-ratio
//! increment `0x9E3779B97F4A7C15` and each output is the finalized mix of the
//! new state.

/// SplitMix64 generator state.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Next raw 64-bit output.
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform double in `[0, 1)`: the top 53 bits scaled by 2^-53.
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform double in `[-1, 1)`.
    pub fn next_sym(&mut self) -> f64 {
        2.0 * self.next_unit() - 1.0
    }
}
