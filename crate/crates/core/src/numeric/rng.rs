/// SplitMix64 generator. The output stream is part of the weight and
/// sequence file contract, so it must never change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rng64 {
    state: u64,
}

impl Rng64 {
    pub const fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Next draw mapped through [`uniform_weight`].
    pub fn next_weight(&mut self) -> f64 {
        uniform_weight(self.next())
    }
}

/// Maps the top 24 bits of `raw` onto `[-0.1, 0.1)`.
///
/// Evaluated in f64; 32-bit consumers round the result once.
pub fn uniform_weight(raw: u64) -> f64 {
    let u = (raw >> 40) as f64;
    (u / 16_777_216.0) * 0.2 - 0.1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_stream_from_zero() {
        // Published SplitMix64 outputs for seed 0.
        let mut rng = Rng64::new(0);
        assert_eq!(rng.next(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(rng.next(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(rng.next(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn uniform_weight_bounds() {
        assert_eq!(uniform_weight(0), -0.1);
        assert_eq!(uniform_weight(1 << 63), 0.0);
        assert_eq!(uniform_weight((1 << 63) | 0xFF_FFFF_FFFF), 0.0);
        let top = uniform_weight(u64::MAX);
        assert!((top - (0.1 - 0.2 / 16_777_216.0)).abs() < 1e-16);
        assert!(top < 0.1);
    }
}
