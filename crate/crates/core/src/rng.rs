//! Deterministic pseudorandom numbers.
//!
//! The generator is SplitMix64 (Steele, Lea & Flood 2014): a 64-bit counter
//! advanced by the golden-ratio increment, finalized with two xor-shift
//! multiplies. It is fixed here so that identical seeds produce identical
//! sequences on every platform, which dataset synthesis, weight init and
//! dropout all rely on.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// SplitMix64 generator. Single-owner; clone or re-seed to branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn seed(seed: u64) -> Rng {
        Rng { state: seed }
    }

    /// Decorrelated stream for item `index` under a base seed. Used where
    /// per-item draws must not depend on processing order or thread count.
    pub fn stream(seed: u64, index: u64) -> Rng {
        Rng {
            state: mix64(seed ^ index.wrapping_add(1).wrapping_mul(GOLDEN)),
        }
    }

    /// Raw state, for checkpointing.
    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn restore(state: u64) -> Rng {
        Rng { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    /// Uniform draw in [0,1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in [lo, hi). Panics if lo >= hi; use `uniform_tensor`
    /// for the checked variant.
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        assert!(lo < hi, "range requires lo < hi");
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform unbiased-enough integer in [0, n) via 128-bit multiply-shift.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Tensor of i.i.d. uniform draws in [lo, hi), advancing the state.
    pub fn uniform_tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
        if lo >= hi {
            return Err(Error::Arg(format!("uniform bounds require lo < hi, got [{lo}, {hi})")));
        }
        let mut t = Tensor::filled(shape, 0.0)?;
        for x in t.data_mut() {
            *x = lo + (hi - lo) * self.next_f64();
        }
        Ok(t)
    }
}
