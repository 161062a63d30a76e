//! Counter-based random numbers.
//!
//! Every random draw in the crate comes from [`CounterRng`], a keyed
//! SplitMix64 counter generator:
//!
//! ```text
//! mix(z)   = z ^= z >> 30; z *= 0xbf58476d1ce4e5b9;
//!            z ^= z >> 27; z *= 0x94d049bb133111eb;
//!            z ^ (z >> 31)                       (all arithmetic mod 2^64)
//! key      = fold of mix(key ^ mix(label + GOLDEN)) over the stream labels,
//!            starting from key = mix(seed)
//! draw(i)  = mix(key + (i + 1) * GOLDEN),        GOLDEN = 0x9e3779b97f4a7c15
//! uniform  = (draw >> 11) * 2^-53                in [0, 1)
//! normal   = Box-Muller on two consecutive uniforms, cosine branch only
//! ```
//!
//! Because draw `i` depends only on `(seed, stream labels, i)`, independent
//! streams (per trial, per channel, per fold, per epoch) can be generated in
//! any order and reproduced in any language. The algorithm is part of the
//! on-disk reproducibility contract and must not change.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
pub fn mix(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a stream key from a seed and a path of stream labels.
pub fn stream_key(seed: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(mix(seed), |key, &l| mix(key ^ mix(l.wrapping_add(GOLDEN))))
}

#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64, labels: &[u64]) -> Self {
        Self {
            key: stream_key(seed, labels),
            counter: 0,
        }
    }

    /// Value at an absolute counter position, without advancing.
    #[inline]
    pub fn at(&self, index: u64) -> u64 {
        mix(self
            .key
            .wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN)))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let v = self.at(self.counter);
        self.counter += 1;
        v
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform at an absolute position; used where draws are indexed by element.
    #[inline]
    pub fn uniform_at(&self, index: u64) -> f64 {
        (self.at(index) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Integer in `0..n` (multiply-shift, no modulo bias worth mentioning at n < 2^32).
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
