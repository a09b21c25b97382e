//! RF-to-B-mode conversion: per-column envelope detection by rectified
//! moving RMS, then logarithmic compression into [0, 1].

use crate::grid::Grid;
use crate::rng::portable_ln;

/// Envelope + compression settings.
#[derive(Clone, Copy, Debug)]
pub struct BModeParams {
    /// Moving-RMS window length in samples (odd, centered). The window is
    /// truncated at the column ends and the divisor shrinks with it.
    pub window: usize,
    /// Log-compression strength: y = ln(1 + alpha x) / ln(1 + alpha).
    pub alpha: f64,
}

impl Default for BModeParams {
    fn default() -> Self {
        BModeParams {
            window: 7,
            alpha: 100.0,
        }
    }
}

/// Convert one RF frame (signed amplitudes, rows = axial samples) into a
/// B-mode image with values in [0, 1].
pub fn rf_to_bmode(rf: &Grid, params: &BModeParams) -> Grid {
    let (h, w) = (rf.height(), rf.width());
    let half = params.window / 2;
    let norm = 1.0 / portable_ln(1.0 + params.alpha);
    let mut out = Grid::zeros(h, w);

    // prefix sums of rf^2 per column make each window O(1)
    let mut sq_prefix = vec![0.0f64; h + 1];
    for x in 0..w {
        for y in 0..h {
            let v = rf.get(y, x);
            sq_prefix[y + 1] = sq_prefix[y] + v * v;
        }
        for y in 0..h {
            let lo = y.saturating_sub(half);
            let hi = (y + half + 1).min(h);
            let mean_sq = (sq_prefix[hi] - sq_prefix[lo]) / (hi - lo) as f64;
            let envelope = mean_sq.sqrt();
            let compressed = if envelope > 0.0 {
                portable_ln(1.0 + params.alpha * envelope) * norm
            } else {
                0.0
            };
            out.set(y, x, compressed.clamp(0.0, 1.0));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rf_gives_zero_bmode() {
        let rf = Grid::zeros(32, 8);
        let bm = rf_to_bmode(&rf, &BModeParams::default());
        assert!(bm.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sinusoid_envelope_matches_rms() {
        // frequency 2/7 cycles per sample: a 7-sample window covers an
        // exact number of half periods, so the moving RMS equals A/sqrt(2)
        let (h, w) = (64, 4);
        let amplitude = 0.5;
        let mut rf = Grid::zeros(h, w);
        for x in 0..w {
            for y in 0..h {
                let phase = 2.0 * std::f64::consts::PI * (2.0 / 7.0) * y as f64;
                rf.set(y, x, amplitude * phase.sin());
            }
        }
        // reproduce only the envelope stage: invert the compression
        let params = BModeParams::default();
        let bm = rf_to_bmode(&rf, &params);
        let expected = amplitude / 2.0_f64.sqrt();
        for x in 0..w {
            for y in 3..h - 3 {
                let env = ((1.0 + params.alpha).powf(bm.get(y, x)) - 1.0) / params.alpha;
                let rel = (env - expected).abs() / expected;
                assert!(rel < 0.05, "row {y}: envelope {env} vs {expected}");
            }
        }
    }

    #[test]
    fn scaling_rf_up_increases_bmode_where_nonzero() {
        let mut rf = Grid::zeros(16, 3);
        let mut rng = crate::rng::StreamRng::derive(9, &[1]);
        for v in rf.values_mut() {
            *v = rng.uniform_in(-0.2, 0.2);
        }
        let mut rf2 = rf.clone();
        for v in rf2.values_mut() {
            *v *= 2.0;
        }
        let params = BModeParams::default();
        let a = rf_to_bmode(&rf, &params);
        let b = rf_to_bmode(&rf2, &params);
        for (x, y) in a.values().iter().zip(b.values()) {
            if *x > 0.0 {
                assert!(y > x, "{y} !> {x}");
            }
        }
    }
}
