//! Seed derivation and Gaussian sampling.
//!
//! All randomness in the toolkit flows from one root seed through named
//! substreams, so any stage (data, model init, training, attacks,
//! likelihood) can be reproduced in isolation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// Derives a child seed from `(root, label, index)` with FNV-1a. The hash
/// is stable across platforms and releases; changing it invalidates every
/// recorded experiment.
pub fn derive_seed(root: u64, label: &str, index: u64) -> u64 {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut h = OFFSET;
    for b in root
        .to_le_bytes()
        .iter()
        .chain(label.as_bytes())
        .chain(index.to_le_bytes().iter())
    {
        h ^= *b as u64;
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// Fresh deterministic generator for a named substream.
pub fn substream(root: u64, label: &str, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(root, label, index))
}

/// One standard normal draw (Box-Muller; the second variate is discarded).
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fills `out` with i.i.d. standard normals, consuming variates pairwise.
pub fn fill_standard_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    let mut i = 0;
    while i < out.len() {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        out[i] = r * theta.cos();
        if i + 1 < out.len() {
            out[i + 1] = r * theta.sin();
        }
        i += 2;
    }
}

/// Convenience: a fresh standard-normal vector of length `n`.
pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    fill_standard_normal(rng, &mut v);
    v
}
