//! Deterministic pseudo-random numbers.
//!
//! A single fully specified generator (SplitMix64) backs scene sampling,
//! weight init, and noise, so every run is reproducible bit-for-bit from a
//! `u64` seed on any platform. Floating-point draws use only the top 53 bits
//! and basic arithmetic; the Gaussian approximation sums twelve uniforms
//! instead of calling into platform `libm` transcendentals whose last-bit
//! behaviour can differ across targets.

/// SplitMix64 stream.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Next raw 64-bit output.
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    ///
    /// Plain modulo; the bias is below 2^-50 for every `n` used here.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below: empty range");
        self.next_u64() % n
    }

    /// Uniform integer in `[lo, hi]` inclusive.
    pub fn int_in(&mut self, lo: u64, hi: u64) -> u64 {
        assert!(lo <= hi, "int_in: lo {} exceeds hi {}", lo, hi);
        lo + self.below(hi - lo + 1)
    }

    /// Approximately standard normal: sum of 12 uniforms minus 6
    /// (Irwin-Hall). Mean 0, variance 1, support [-6, 6].
    pub fn gauss(&mut self) -> f64 {
        let mut acc = 0.0;
        for _ in 0..12 {
            acc += self.next_f64();
        }
        acc - 6.0
    }

    /// Fresh generator whose seed is drawn from this one. Used to give each
    /// scene or parameter block an independent stream.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }
}
