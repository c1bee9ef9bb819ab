//! Seed derivation and Gaussian sampling.
//!
//! Every stochastic path in the crate derives its generator from a root seed
//! through [`mix_seed`], so rollouts and training runs are reproducible and
//! independent of agent iteration order.

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// splitmix64 step, the standard seed-mixing finalizer.
fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a root seed and a list of stream labels.
pub fn mix_seed(root: u64, labels: &[u64]) -> u64 {
    let mut s = splitmix64(root);
    for &l in labels {
        s = splitmix64(s ^ l.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    s
}

/// A deterministic generator for the stream identified by `labels` under `root`.
pub fn stream_rng(root: u64, labels: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(root, labels))
}

/// One standard normal draw via Box-Muller (two uniforms per call).
pub fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // u1 in (0, 1] so the log is finite.
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Fills a buffer with i.i.d. standard normals.
pub fn fill_standard_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out {
        *v = sample_standard_normal(rng);
    }
}
