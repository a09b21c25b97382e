//! Seeded, splittable random streams with portable draws.
//!
//! Every random decision in the crate flows through [`StreamRng`], a ChaCha8
//! generator keyed from a master seed plus a derivation path. ChaCha is a
//! counter-based integer-only generator, so identical (seed, path) pairs
//! produce identical streams on every platform. Gaussian draws use an
//! inverse-CDF transform built from arithmetic and a self-contained `ln`,
//! which keeps them bit-identical across platforms as well (libm `ln` is not
//! guaranteed to round the same everywhere).

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One derived random stream.
#[derive(Clone, Debug)]
pub struct StreamRng {
    inner: ChaCha8Rng,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl StreamRng {
    /// Derive an independent stream from a master seed and a path of tags.
    /// Different paths give statistically independent streams.
    pub fn derive(master: u64, path: &[u64]) -> Self {
        let mut state = master ^ 0x6a09_e667_f3bc_c908;
        let mut absorb = splitmix64(&mut state);
        for &p in path {
            state ^= p.wrapping_mul(0x9e37_79b9_7f4a_7c15);
            absorb ^= splitmix64(&mut state);
        }
        state ^= absorb;
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        StreamRng {
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.uniform() * (hi - lo)
    }

    /// Uniform integer in [0, n). Rejection sampling, unbiased.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Uniform integer in [lo, hi] inclusive.
    pub fn int_in(&mut self, lo: i64, hi: i64) -> i64 {
        assert!(lo <= hi);
        let span = (hi - lo) as u64 + 1;
        lo + self.below(span as usize) as i64
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal draw via the inverse CDF.
    pub fn normal(&mut self) -> f64 {
        let mut u = self.uniform();
        if u <= 0.0 {
            u = f64::from_bits(1); // smallest positive, keeps ln finite
        }
        inverse_normal_cdf(u)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.below(i + 1);
            slice.swap(i, j);
        }
    }

    /// Categorical draw from unnormalized weights.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut r = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            r -= w;
            if r < 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }
}

/// Natural logarithm from exponent extraction plus an atanh series.
/// Pure +,-,*,/ arithmetic, so results are identical on every IEEE-754
/// platform. Relative error is at the last-ulp level for normal inputs.
pub fn portable_ln(x: f64) -> f64 {
    assert!(x > 0.0 && x.is_finite(), "portable_ln domain: {x}");
    const LN2: f64 = std::f64::consts::LN_2;
    let mut x = x;
    let mut extra = 0.0f64;
    // scale subnormals into the normal range
    if x < f64::MIN_POSITIVE {
        x *= (1u64 << 54) as f64;
        extra = -54.0 * LN2;
    }
    let bits = x.to_bits();
    let mut e = ((bits >> 52) & 0x7ff) as i64 - 1023;
    let mut m = f64::from_bits((bits & 0x000f_ffff_ffff_ffff) | (1023u64 << 52)); // [1, 2)
    if m > std::f64::consts::SQRT_2 {
        m *= 0.5;
        e += 1;
    }
    // ln(m) = 2 atanh(t), t = (m-1)/(m+1), |t| <= 0.1716
    let t = (m - 1.0) / (m + 1.0);
    let t2 = t * t;
    let mut series = 1.0 / 23.0;
    for k in (0..11).rev() {
        series = series * t2 + 1.0 / (2 * k + 1) as f64;
    }
    2.0 * t * series + e as f64 * LN2 + extra
}

/// Acklam's rational approximation to the standard normal inverse CDF.
/// Relative error below 1.2e-9 over (0, 1), more than enough for noise
/// synthesis, and deterministic because the tail `ln` is [`portable_ln`].
pub fn inverse_normal_cdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "inverse_normal_cdf domain: {p}");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * portable_ln(p)).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * portable_ln(1.0 - p)).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_path_same_stream() {
        let mut a = StreamRng::derive(42, &[1, 2, 3]);
        let mut b = StreamRng::derive(42, &[1, 2, 3]);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_paths_diverge() {
        let mut a = StreamRng::derive(42, &[1, 2, 3]);
        let mut b = StreamRng::derive(42, &[1, 2, 4]);
        let same = (0..32).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn path_extension_diverges_from_prefix() {
        let mut a = StreamRng::derive(7, &[]);
        let mut b = StreamRng::derive(7, &[0]);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn portable_ln_matches_std() {
        let mut rng = StreamRng::derive(1, &[9]);
        for _ in 0..10_000 {
            let x = rng.uniform_in(-300.0, 300.0).exp2();
            let got = portable_ln(x);
            let want = x.ln();
            let rel = (got - want).abs() / want.abs().max(1e-300);
            assert!(rel < 1e-15, "ln({x}) = {got}, std {want}");
        }
        assert_eq!(portable_ln(1.0), 0.0);
        let sub = f64::from_bits(12345); // subnormal
        let rel = (portable_ln(sub) - sub.ln()).abs() / sub.ln().abs();
        assert!(rel < 1e-15);
    }

    #[test]
    fn inverse_cdf_round_trips_known_points() {
        // N(0,1) quantiles from standard tables
        let cases = [
            (0.5, 0.0),
            (0.841344746068543, 1.0),
            (0.977249868051821, 2.0),
            (0.00134989803163009, -3.0),
            (0.999999713348428, 5.0),
        ];
        for (p, z) in cases {
            assert!(
                (inverse_normal_cdf(p) - z).abs() < 2e-8,
                "p={p} gave {}",
                inverse_normal_cdf(p)
            );
        }
    }

    #[test]
    fn normal_moments() {
        let mut rng = StreamRng::derive(11, &[4]);
        let n = 200_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let z = rng.normal();
            sum += z;
            sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn below_is_in_range_and_covers() {
        let mut rng = StreamRng::derive(3, &[1]);
        let mut seen = [false; 7];
        for _ in 0..1000 {
            seen[rng.below(7)] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
