//! Counter-based random streams.
//!
//! Parallel stages (trajectory starts, per-step map choices) must produce
//! bit-identical results no matter how work is split across threads, so
//! nothing here carries mutable generator state. Every draw is a pure
//! function of `(seed, domain, index, counter)`: a short chain of
//! splitmix64 finalizer rounds with strong avalanche. Two draws collide
//! only if all four key words collide.
//!
//! Sequential stages (the annealing inner loop) instead seed a stateful
//! [`rand_chacha::ChaCha8Rng`] from [`derive_seed`], keeping their draw
//! order explicit while still hanging off the one user-facing seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Labels one independent family of random draws.
///
/// Adding a variant never perturbs existing families because the
/// discriminant participates in the hash.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    /// Initial chaos-game point for each trajectory.
    TrajectoryStart = 1,
    /// Map index chosen at each chaos-game step.
    MapChoice = 2,
    /// Initial parameter vector for an optimization run.
    ParamInit = 3,
    /// Random fractal codes for an evaluation suite.
    SuiteCode = 4,
    /// Zoomed view windows sampled for evaluation.
    EvalView = 5,
    /// Simulated-annealing candidate perturbations.
    Annealing = 6,
}

/// Finalizer from splitmix64: bijective on `u64` with full avalanche.
#[inline]
pub const fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One uniform `u64` from the stream `(seed, domain, index)` at position
/// `counter`.
#[inline]
pub fn draw_u64(seed: u64, domain: Domain, index: u64, counter: u64) -> u64 {
    // Absorb each key word through its own finalizer round; the odd
    // constant separates rounds so permuted keys land in distinct states.
    const PHI: u64 = 0x9e37_79b9_7f4a_7c15;
    let mut h = mix64(seed ^ PHI);
    h = mix64(h ^ (domain as u64).wrapping_mul(PHI));
    h = mix64(h ^ index.wrapping_add(PHI));
    mix64(h ^ counter.wrapping_mul(PHI))
}

/// One uniform `f64` in `[0, 1)` from the given stream position.
#[inline]
pub fn draw_unit(seed: u64, domain: Domain, index: u64, counter: u64) -> f64 {
    // Top 53 bits → the full set of representable doubles in [0,1).
    (draw_u64(seed, domain, index, counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// One uniform `f64` in `[lo, hi)`.
#[inline]
pub fn draw_range(seed: u64, domain: Domain, index: u64, counter: u64, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * draw_unit(seed, domain, index, counter)
}

/// Derives a child seed for a stage that runs its own stateful generator.
pub fn derive_seed(seed: u64, domain: Domain, index: u64) -> u64 {
    draw_u64(seed, domain, index, 0)
}

/// Stateful generator for inherently sequential stages, seeded from the
/// same key space as the counter streams.
pub fn sequential_rng(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, domain, index))
}
