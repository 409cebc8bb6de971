//! Exact binomial coefficients and k-subset utilities.

use alloc::vec::Vec;

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use rand::Rng;

/// Exact `C(n, k)`; zero when `k > n`.
pub fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        // acc * (n - i) is always divisible by (i + 1) after the multiply.
        acc *= n - i;
        acc /= i + 1;
    }
    acc
}

/// `C(n, k)` as `f64` (may round; `inf` on overflow).
pub fn binomial_f64(n: u64, k: u64) -> f64 {
    binomial(n, k).to_f64().unwrap_or(f64::INFINITY)
}

/// `C(n, k)` as `u64` when it fits.
pub fn binomial_u64(n: u64, k: u64) -> Option<u64> {
    binomial(n, k).to_u64()
}

/// `log2` of a big integer (`-inf` for zero).
pub fn log2_big(x: &BigUint) -> f64 {
    let bits = x.bits();
    if bits == 0 {
        return f64::NEG_INFINITY;
    }
    if bits <= 63 {
        return (x.to_u64().unwrap() as f64).log2();
    }
    let shift = bits - 53;
    let top: BigUint = x >> shift;
    (top.to_u64().unwrap() as f64).log2() + shift as f64
}

/// `log2 C(n, k)` via the log-gamma function; an independent route to
/// cross-check [`log2_big`] of [`binomial`].
pub fn log2_binomial_lgamma(n: u64, k: u64) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    let ln = crate::stats::ln_gamma(n as f64 + 1.0)
        - crate::stats::ln_gamma(k as f64 + 1.0)
        - crate::stats::ln_gamma((n - k) as f64 + 1.0);
    ln / core::f64::consts::LN_2
}

/// Lexicographic iterator over the k-subsets of `{0, .., n-1}`.
#[derive(Debug, Clone)]
pub struct Subsets {
    n: usize,
    current: Option<Vec<usize>>,
}

impl Subsets {
    pub fn new(n: usize, k: usize) -> Self {
        let current = if k <= n { Some((0..k).collect()) } else { None };
        Self { n, current }
    }
}

impl Iterator for Subsets {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let cur = self.current.take()?;
        let k = cur.len();
        let mut nxt = cur.clone();
        let mut i = k;
        loop {
            if i == 0 {
                break;
            }
            i -= 1;
            if nxt[i] < self.n - k + i {
                nxt[i] += 1;
                for j in (i + 1)..k {
                    nxt[j] = nxt[j - 1] + 1;
                }
                self.current = Some(nxt);
                return Some(cur);
            }
        }
        // `cur` was the last subset (or k == 0).
        Some(cur)
    }
}

/// Uniform random k-subset of `{0, .., n-1}`, sorted (Floyd's algorithm).
pub fn random_subset<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n);
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    for j in (n - k)..n {
        let t = rng.random_range(0..=j);
        match chosen.binary_search(&t) {
            Ok(_) => {
                let pos = chosen.binary_search(&j).unwrap_err();
                chosen.insert(pos, j);
            }
            Err(pos) => chosen.insert(pos, t),
        }
    }
    chosen
}

/// `|a ∩ b|` for sorted, distinct index lists.
pub fn intersection_size(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            core::cmp::Ordering::Less => i += 1,
            core::cmp::Ordering::Greater => j += 1,
            core::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// `|a Δ b|` for sorted, distinct index lists.
pub fn symmetric_difference_size(a: &[usize], b: &[usize]) -> usize {
    a.len() + b.len() - 2 * intersection_size(a, b)
}
