//! Weak/strong cine-series augmentation.
//!
//! The weak branch translates the first frame; the strong branch averages
//! the remaining frames and pushes the result through a fixed corruption
//! chain: translation, brightness jitter, multiplicative speckle, salt and
//! pepper, line cuts, pixel cuts, final clamp. Geometry runs first so masks
//! follow their image through exactly one transform; photometric ops never
//! touch masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::phantom::Cineloop;
use crate::rng::StreamRng;

// per-op stream tags
const TAG_TRANSLATE_WEAK: u64 = 1;
const TAG_TRANSLATE_STRONG: u64 = 2;
const TAG_BRIGHTNESS: u64 = 3;
const TAG_SPECKLE: u64 = 4;
const TAG_SALT_PEPPER: u64 = 5;
const TAG_LINE_CUTS: u64 = 6;
const TAG_PIXEL_CUTS: u64 = 7;

/// Magnitudes of the augmentation chain. All rates and fractions live in
/// [0,1]; zero disables an op exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Max translation per axis as a fraction of that axis.
    pub translate_max: f64,
    /// Multiplicative brightness jitter; factor drawn in [1-d, 1+d].
    pub brightness_delta: f64,
    /// Std of the multiplicative Gaussian speckle noise.
    pub speckle_sigma: f64,
    /// Per-pixel probability of being forced to 0 or 1 (half each).
    pub salt_pepper_rate: f64,
    /// Max number of whole rows/columns zeroed.
    pub line_cuts: usize,
    /// Per-pixel zeroing probability.
    pub pixel_cut_rate: f64,
    /// Use the weak branch's translation draw for the strong branch too.
    pub share_translation: bool,
    /// Base seed for standalone use; training derives its own streams.
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            translate_max: 0.10,
            brightness_delta: 0.2,
            speckle_sigma: 0.15,
            salt_pepper_rate: 0.01,
            line_cuts: 4,
            pixel_cut_rate: 0.005,
            share_translation: false,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("translate_max", self.translate_max),
            ("brightness_delta", self.brightness_delta),
            ("speckle_sigma", self.speckle_sigma),
            ("salt_pepper_rate", self.salt_pepper_rate),
            ("pixel_cut_rate", self.pixel_cut_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} {v} outside [0,1]")));
            }
        }
        Ok(())
    }

    /// Identity chain: every op disabled.
    pub fn identity() -> Self {
        AugmentConfig {
            translate_max: 0.0,
            brightness_delta: 0.0,
            speckle_sigma: 0.0,
            salt_pepper_rate: 0.0,
            line_cuts: 0,
            pixel_cut_rate: 0.0,
            share_translation: false,
            seed: 0,
        }
    }
}

/// Record of one applied op, for run manifests and replay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AppliedOp {
    Translate { dy: i64, dx: i64 },
    Brightness { factor: f64 },
    Speckle { sigma: f64 },
    SaltPepper { rate: f64 },
    LineCuts { rows: Vec<usize>, cols: Vec<usize> },
    PixelCuts { rate: f64 },
}

/// The two views plus transform-consistent masks and the op log.
#[derive(Clone, Debug)]
pub struct AugmentedPair {
    pub x_weak: Grid,
    pub x_strong: Grid,
    pub needle_w: Mask,
    pub prostate_w: Mask,
    pub needle_s: Mask,
    pub prostate_s: Mask,
    pub log: Vec<AppliedOp>,
}

/// Element-wise mean of frames 2..T (everything after the first frame).
pub fn temporal_average(cine: &Cineloop) -> Result<Grid> {
    mean_frames(cine, 1, cine.frame_count())
}

fn mean_frames(cine: &Cineloop, from: usize, to: usize) -> Result<Grid> {
    if from >= to {
        return Err(Error::Domain {
            op: "temporal_average",
            details: "no frames to average".into(),
        });
    }
    let (h, w) = (cine.height(), cine.width());
    let mut acc = vec![0.0f64; h * w];
    for t in from..to {
        for (a, &v) in acc.iter_mut().zip(cine.frame(t)) {
            *a += v as f64;
        }
    }
    let n = (to - from) as f64;
    for a in &mut acc {
        *a /= n;
    }
    Grid::from_vec(h, w, acc)
}

fn draw_translation(h: usize, w: usize, translate_max: f64, rng: &mut StreamRng) -> (i64, i64) {
    // disabled entirely when the fraction cannot move a full pixel
    if (translate_max * h.min(w) as f64).floor() < 1.0 {
        return (0, 0);
    }
    let max_dy = (translate_max * h as f64).floor() as i64;
    let max_dx = (translate_max * w as f64).floor() as i64;
    (rng.int_in(-max_dy, max_dy), rng.int_in(-max_dx, max_dx))
}

fn apply_translation(
    image: &Grid,
    needle: &Mask,
    prostate: &Mask,
    shift: (i64, i64),
) -> (Grid, Mask, Mask) {
    if shift == (0, 0) {
        return (image.clone(), needle.clone(), prostate.clone());
    }
    (
        image.translate(shift.0, shift.1),
        needle.translate(shift.0, shift.1),
        prostate.translate(shift.0, shift.1),
    )
}

/// Weak branch: an integer-pixel random translation of the first frame,
/// with the identical shift applied to both masks.
pub fn weak_augment(
    frame0: &Grid,
    needle: &Mask,
    prostate: &Mask,
    config: &AugmentConfig,
    stream_seed: u64,
) -> (Grid, Mask, Mask, Vec<AppliedOp>) {
    let mut rng = StreamRng::derive(stream_seed, &[config.seed, TAG_TRANSLATE_WEAK]);
    let shift = draw_translation(frame0.height(), frame0.width(), config.translate_max, &mut rng);
    let (img, n, p) = apply_translation(frame0, needle, prostate, shift);
    let log = vec![AppliedOp::Translate {
        dy: shift.0,
        dx: shift.1,
    }];
    (img, n, p, log)
}

/// Strong branch corruption chain over the temporally averaged frame.
/// `forced_translation` reuses the weak branch's draw when translation
/// sharing is on.
pub fn strong_augment(
    avg_frame: &Grid,
    needle: &Mask,
    prostate: &Mask,
    config: &AugmentConfig,
    stream_seed: u64,
    forced_translation: Option<(i64, i64)>,
) -> (Grid, Mask, Mask, Vec<AppliedOp>) {
    let (h, w) = (avg_frame.height(), avg_frame.width());
    let mut log = Vec::new();

    // 1. geometric: translation, mask-consistent
    let shift = forced_translation.unwrap_or_else(|| {
        let mut rng = StreamRng::derive(stream_seed, &[config.seed, TAG_TRANSLATE_STRONG]);
        draw_translation(h, w, config.translate_max, &mut rng)
    });
    let (mut img, n, p) = apply_translation(avg_frame, needle, prostate, shift);
    log.push(AppliedOp::Translate {
        dy: shift.0,
        dx: shift.1,
    });

    // 2. brightness
    if config.brightness_delta > 0.0 {
        let mut rng = StreamRng::derive(stream_seed, &[config.seed, TAG_BRIGHTNESS]);
        let factor = rng.uniform_in(1.0 - config.brightness_delta, 1.0 + config.brightness_delta);
        for v in img.values_mut() {
            *v *= factor;
        }
        log.push(AppliedOp::Brightness { factor });
    }

    // 3. multiplicative speckle
    if config.speckle_sigma > 0.0 {
        let mut rng = StreamRng::derive(stream_seed, &[config.seed, TAG_SPECKLE]);
        for v in img.values_mut() {
            *v *= 1.0 + config.speckle_sigma * rng.normal();
        }
        log.push(AppliedOp::Speckle {
            sigma: config.speckle_sigma,
        });
    }

    // 4. salt and pepper
    if config.salt_pepper_rate > 0.0 {
        let mut rng = StreamRng::derive(stream_seed, &[config.seed, TAG_SALT_PEPPER]);
        let half = config.salt_pepper_rate / 2.0;
        for v in img.values_mut() {
            let u = rng.uniform();
            if u < half {
                *v = 0.0;
            } else if u < config.salt_pepper_rate {
                *v = 1.0;
            }
        }
        log.push(AppliedOp::SaltPepper {
            rate: config.salt_pepper_rate,
        });
    }

    // 5. line cuts
    if config.line_cuts > 0 {
        let mut rng = StreamRng::derive(stream_seed, &[config.seed, TAG_LINE_CUTS]);
        let n_lines = rng.below(config.line_cuts + 1);
        let mut rows = Vec::new();
        let mut cols = Vec::new();
        for _ in 0..n_lines {
            if rng.bernoulli(0.5) {
                let r = rng.below(h);
                for x in 0..w {
                    img.set(r, x, 0.0);
                }
                rows.push(r);
            } else {
                let c = rng.below(w);
                for y in 0..h {
                    img.set(y, c, 0.0);
                }
                cols.push(c);
            }
        }
        log.push(AppliedOp::LineCuts { rows, cols });
    }

    // 6. pixel cuts
    if config.pixel_cut_rate > 0.0 {
        let mut rng = StreamRng::derive(stream_seed, &[config.seed, TAG_PIXEL_CUTS]);
        for v in img.values_mut() {
            if rng.uniform() < config.pixel_cut_rate {
                *v = 0.0;
            }
        }
        log.push(AppliedOp::PixelCuts {
            rate: config.pixel_cut_rate,
        });
    }

    // 7. final clamp
    for v in img.values_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    (img, n, p, log)
}

/// Build the weak/strong pair for one cineloop. `strong_source` selects
/// what feeds the corruption chain: the temporal average (cine mode) or
/// frame 0 again (plain weak/strong mode).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StrongSource {
    TemporalAverage,
    Frame0,
}

pub fn make_pair(
    cine: &Cineloop,
    config: &AugmentConfig,
    strong_source: StrongSource,
    stream_seed: u64,
) -> Result<AugmentedPair> {
    config.validate()?;
    let frame0 = cine.frame_grid(0);
    let (x_weak, needle_w, prostate_w, mut log) =
        weak_augment(&frame0, &cine.needle, &cine.prostate, config, stream_seed);

    let strong_input = match strong_source {
        StrongSource::TemporalAverage => temporal_average(cine)?,
        StrongSource::Frame0 => frame0,
    };
    let forced = if config.share_translation {
        match log[0] {
            AppliedOp::Translate { dy, dx } => Some((dy, dx)),
            _ => None,
        }
    } else {
        None
    };
    let (x_strong, needle_s, prostate_s, strong_log) = strong_augment(
        &strong_input,
        &cine.needle,
        &cine.prostate,
        config,
        stream_seed,
        forced,
    );
    log.extend(strong_log);

    Ok(AugmentedPair {
        x_weak,
        x_strong,
        needle_w,
        prostate_w,
        needle_s,
        prostate_s,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_core, PhantomConfig};

    fn test_cine() -> Cineloop {
        let config = PhantomConfig {
            height: 32,
            width: 32,
            frames: 16,
            ..PhantomConfig::default()
        };
        generate_core(&config, 0, 0).unwrap().0
    }

    #[test]
    fn average_of_identical_frames_is_that_frame() {
        let cine = test_cine();
        let (h, w) = (cine.height(), cine.width());
        let frame = cine.frame(0).to_vec();
        let mut frames = Vec::new();
        for _ in 0..4 {
            frames.extend_from_slice(&frame);
        }
        let same = Cineloop::new(
            4,
            h,
            w,
            frames,
            cine.needle.clone(),
            cine.prostate.clone(),
            cine.lesion.clone(),
        )
        .unwrap();
        let avg = temporal_average(&same).unwrap();
        for (a, &f) in avg.values().iter().zip(cine.frame(0)) {
            assert!((a - f as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn average_of_zeros_and_ones_is_half() {
        let (h, w) = (8, 8);
        let mut needle = Mask::new(h, w);
        let mut prostate = Mask::new(h, w);
        needle.set(4, 4, true);
        prostate.set(4, 4, true);
        // frame0 is ignored by the average; frames 1 and 2 are 0s and 1s
        let mut frames = vec![0.3f32; h * w];
        frames.extend(vec![0.0f32; h * w]);
        frames.extend(vec![1.0f32; h * w]);
        let cine = Cineloop::new(3, h, w, frames, needle, prostate, Mask::new(h, w)).unwrap();
        let avg = temporal_average(&cine).unwrap();
        assert!(avg.values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn average_matches_naive_sum_oracle() {
        let cine = test_cine();
        let avg = temporal_average(&cine).unwrap();
        let (h, w) = (cine.height(), cine.width());
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0;
                for t in 1..cine.frame_count() {
                    sum += cine.frame(t)[y * w + x] as f64;
                }
                let want = sum / (cine.frame_count() - 1) as f64;
                assert!((avg.get(y, x) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weak_zero_translation_is_identity() {
        let cine = test_cine();
        let frame0 = cine.frame_grid(0);
        let config = AugmentConfig {
            translate_max: 0.0,
            ..AugmentConfig::default()
        };
        let (img, n, p, _) = weak_augment(&frame0, &cine.needle, &cine.prostate, &config, 7);
        assert_eq!(img, frame0);
        assert_eq!(n, cine.needle);
        assert_eq!(p, cine.prostate);
    }

    #[test]
    fn weak_translation_moves_masks_with_image() {
        let cine = test_cine();
        let frame0 = cine.frame_grid(0);
        let config = AugmentConfig::default();
        for seed in 0..20 {
            let (img, n, p, log) =
                weak_augment(&frame0, &cine.needle, &cine.prostate, &config, seed);
            let AppliedOp::Translate { dy, dx } = log[0] else {
                panic!("first op must be translation")
            };
            assert_eq!(img, frame0.translate(dy, dx));
            assert_eq!(n, cine.needle.translate(dy, dx));
            assert_eq!(p, cine.prostate.translate(dy, dx));
            assert!(n.count() <= cine.needle.count());
        }
    }

    #[test]
    fn strong_identity_chain_is_exact() {
        let cine = test_cine();
        let avg = temporal_average(&cine).unwrap();
        let config = AugmentConfig::identity();
        let (img, n, p, _) =
            strong_augment(&avg, &cine.needle, &cine.prostate, &config, 3, None);
        assert_eq!(img, avg);
        assert_eq!(n, cine.needle);
        assert_eq!(p, cine.prostate);
    }

    #[test]
    fn full_salt_pepper_forces_binary_pixels() {
        let cine = test_cine();
        let avg = temporal_average(&cine).unwrap();
        let config = AugmentConfig {
            translate_max: 0.0,
            brightness_delta: 0.0,
            speckle_sigma: 0.0,
            salt_pepper_rate: 1.0,
            line_cuts: 0,
            pixel_cut_rate: 0.0,
            ..AugmentConfig::default()
        };
        let (img, ..) = strong_augment(&avg, &cine.needle, &cine.prostate, &config, 11, None);
        assert!(img.values().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn strong_chain_is_deterministic_per_seed() {
        let cine = test_cine();
        let config = AugmentConfig::default();
        let a = make_pair(&cine, &config, StrongSource::TemporalAverage, 7).unwrap();
        let b = make_pair(&cine, &config, StrongSource::TemporalAverage, 7).unwrap();
        assert_eq!(a.x_strong, b.x_strong);
        assert_eq!(a.x_weak, b.x_weak);
        assert_eq!(a.log, b.log);
        let c = make_pair(&cine, &config, StrongSource::TemporalAverage, 8).unwrap();
        assert_ne!(a.x_strong, c.x_strong);
    }

    #[test]
    fn photometric_ops_never_touch_masks() {
        let cine = test_cine();
        let config = AugmentConfig {
            translate_max: 0.0, // geometry off, photometric on
            ..AugmentConfig::default()
        };
        for seed in 0..10 {
            let pair = make_pair(&cine, &config, StrongSource::TemporalAverage, seed).unwrap();
            assert_eq!(pair.needle_s, cine.needle);
            assert_eq!(pair.prostate_s, cine.prostate);
        }
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let cine = test_cine();
        let config = AugmentConfig {
            brightness_delta: 1.0,
            speckle_sigma: 1.0,
            ..AugmentConfig::default()
        };
        for seed in 0..10 {
            let pair = make_pair(&cine, &config, StrongSource::TemporalAverage, seed).unwrap();
            assert!(pair
                .x_strong
                .values()
                .iter()
                .all(|&v| (0.0..=1.0).contains(&v)));
            assert!(pair.x_weak.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn shared_translation_aligns_branches() {
        let cine = test_cine();
        let config = AugmentConfig {
            share_translation: true,
            brightness_delta: 0.0,
            speckle_sigma: 0.0,
            salt_pepper_rate: 0.0,
            line_cuts: 0,
            pixel_cut_rate: 0.0,
            ..AugmentConfig::default()
        };
        for seed in 0..10 {
            let pair = make_pair(&cine, &config, StrongSource::Frame0, seed).unwrap();
            assert_eq!(pair.needle_w, pair.needle_s);
            assert_eq!(pair.x_weak, pair.x_strong);
        }
    }
}
