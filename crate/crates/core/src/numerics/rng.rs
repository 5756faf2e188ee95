use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{NumericsError, Result};

/// Seeded, splittable random stream.
///
/// A stream is identified by a 32-byte key derived from the root seed and the
/// chain of labels used to reach it. Child streams depend only on the parent's
/// key and the label, never on how many values the parent has drawn.
#[derive(Debug, Clone)]
pub struct RngStream {
    key: [u8; 32],
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"cbcnn-root");
        h.update(seed.to_le_bytes());
        Self::from_key(h.finalize().into())
    }

    fn from_key(key: [u8; 32]) -> Self {
        Self {
            key,
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn child(&self, label: &str) -> Self {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
        Self::from_key(h.finalize().into())
    }

    /// Child stream keyed by a label and an index, e.g. `("fold", 3)`.
    pub fn child_indexed(&self, label: &str, index: usize) -> Self {
        self.child(&format!("{label}#{index}"))
    }

    /// Uniform draw in `[0, 1)` with 53 bits of resolution.
    pub fn unit(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> Result<f64> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(NumericsError::EmptyRange { lo, hi });
        }
        let v = lo + (hi - lo) * self.unit();
        Ok(if v >= hi { hi.next_down().max(lo) } else { v })
    }

    /// Uniform index in `0..n` without modulo bias. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.rng.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal draw (Box-Muller, cosine branch only).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.unit();
        let u2 = self.unit();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = RngStream::new(7);
        let mut b = RngStream::new(7);
        for _ in 0..1000 {
            assert_eq!(a.uniform(0.0, 1.0).unwrap().to_bits(), b.uniform(0.0, 1.0).unwrap().to_bits());
        }
        let mut c = RngStream::new(8);
        assert_ne!(a.unit(), c.unit());
    }

    #[test]
    fn million_draws_reproducible() {
        let mut a = RngStream::new(123);
        let mut b = RngStream::new(123);
        assert!((0..1_000_000).all(|_| a.next_u64() == b.next_u64()));
    }

    #[test]
    fn child_independent_of_parent_draws() {
        let parent = RngStream::new(1);
        let mut used = parent.clone();
        for _ in 0..57 {
            used.unit();
        }
        let mut c1 = parent.child("smote");
        let mut c2 = used.child("smote");
        assert_eq!(c1.next_u64(), c2.next_u64());
        let mut other = parent.child("init");
        assert_ne!(parent.child("smote").next_u64(), other.next_u64());
    }

    #[test]
    fn uniform_range_and_mean() {
        let mut r = RngStream::new(3);
        let mut sum = 0.0;
        for _ in 0..100_000 {
            let v = r.uniform(0.0, 1.0).unwrap();
            assert!((0.0..1.0).contains(&v));
            sum += v;
        }
        assert!((sum / 1e5 - 0.5).abs() < 0.01);
    }

    #[test]
    fn tiny_interval_contains_result() {
        let mut r = RngStream::new(4);
        let hi = 1.0;
        let lo = hi - 1e-12;
        for _ in 0..1000 {
            let v = r.uniform(lo, hi).unwrap();
            assert!(v >= lo && v < hi);
        }
        let lo = hi.next_down();
        for _ in 0..100 {
            assert_eq!(r.uniform(lo, hi).unwrap(), lo);
        }
    }

    #[test]
    fn empty_range_rejected() {
        let mut r = RngStream::new(0);
        assert!(matches!(r.uniform(1.0, 1.0), Err(NumericsError::EmptyRange { .. })));
        assert!(r.uniform(2.0, 1.0).is_err());
    }

    #[test]
    fn below_is_in_range() {
        let mut r = RngStream::new(9);
        let mut seen = [false; 5];
        for _ in 0..200 {
            seen[r.below(5)] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
