//! Deterministic randomness with random access.
//!
//! Every draw is produced by hashing a `(seed, index)` pair through the
//! splitmix64 finalizer, so draw `i` of a stream can be computed without
//! generating draws `0..i-1`. Consumers key the index on structural
//! coordinates (path, step, component), which makes each path's data
//! independent of how many paths are requested and bitwise reproducible
//! under any parallel schedule.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const SEED_SALT: u64 = 0xD1B5_4A32_D192_ED03;

#[inline(always)]
fn finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Output `index` of the splitmix64 stream started at `seed`.
#[inline(always)]
pub(crate) fn draw_u64(seed: u64, index: u64) -> u64 {
    finalize(seed.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN)))
}

/// Uniform draw in the open interval (0, 1) with 53 significant bits.
/// Never returns 0 or 1, so quantile transforms stay finite.
#[inline(always)]
pub(crate) fn draw_uniform(seed: u64, index: u64) -> f64 {
    let bits = draw_u64(seed, index) >> 11;
    (bits as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
}

/// Standard normal draw via the inverse CDF. Deterministic: no rejection
/// loop, exactly one uniform consumed per normal.
#[inline]
pub(crate) fn draw_normal(seed: u64, index: u64) -> f64 {
    normal_quantile(draw_uniform(seed, index))
}

/// Standard normal quantile function, accurate to double precision.
pub(crate) fn normal_quantile(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(p)
}

/// Derives an independent stream seed from a base seed and a stream tag.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    finalize(seed ^ finalize(stream.wrapping_mul(GOLDEN) ^ SEED_SALT))
}

/// Small sequential generator for probe draws (validation checks, convexity
/// probes). Same hash core as the path generator, separate keying.
pub struct ProbeRng {
    seed: u64,
    counter: u64,
}

impl ProbeRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed: derive_seed(seed, 0x50524F4245), // "PROBE"
            counter: 0,
        }
    }

    pub fn uniform(&mut self) -> f64 {
        let u = draw_uniform(self.seed, self.counter);
        self.counter += 1;
        u
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        normal_quantile(self.uniform())
    }

    /// Uniform index in `0..n` (widening multiply, no modulo bias).
    pub fn index(&mut self, n: usize) -> usize {
        let u = draw_u64(self.seed, self.counter);
        self.counter += 1;
        ((u as u128 * n as u128) >> 64) as usize
    }

    /// Random point in the interior of the probability simplex.
    pub fn simplex(&mut self, m: usize) -> Vec<f64> {
        let mut w: Vec<f64> = (0..m).map(|_| -self.uniform().ln()).collect();
        let sum: f64 = w.iter().sum();
        for x in &mut w {
            *x /= sum;
        }
        w
    }
}
