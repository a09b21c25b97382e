//! Synthetic cineloop phantom: speckle tissue with ground-truth lesions,
//! needle/prostate masks and pathology-style involvement labels.
//!
//! Cancer is a textural signal here, not a drawn boundary: lesion pixels get
//! elevated mean echogenicity and extra amplitude jitter, and everything is
//! rendered through the same RF -> B-mode chain as normal tissue.

pub mod bmode;
pub mod dataset;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::rng::StreamRng;

pub use bmode::{rf_to_bmode, BModeParams};
pub use dataset::{read_dataset, write_dataset, Dataset, DatasetWriter};

// stream purpose tags
const TAG_PLAN: u64 = 1;
const TAG_CENTER: u64 = 2;
const TAG_GEOMETRY: u64 = 3;
const TAG_TEXTURE: u64 = 4;
const TAG_GRADE: u64 = 5;

/// Acquisition center tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Center {
    A,
    B,
}

/// Pathology label of a core.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Cancer,
}

/// Coarse Gleason-score bucket.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradeBucket {
    Benign,
    GS7,
    GS8,
    GS9,
    GS10,
}

/// Metadata for one biopsy core.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoreRecord {
    pub patient_id: u64,
    pub center: Center,
    pub core_id: u64,
    pub label: Label,
    pub involvement: f64,
    pub grade_bucket: GradeBucket,
    pub path: String,
}

impl CoreRecord {
    pub fn is_cancer(&self) -> bool {
        self.label == Label::Cancer
    }
}

/// One cineloop: T stacked B-mode frames plus masks. Frames are stored as
/// f32 so the on-disk format round-trips bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Cineloop {
    t: usize,
    h: usize,
    w: usize,
    frames: Vec<f32>,
    pub needle: Mask,
    pub prostate: Mask,
    pub lesion: Mask,
}

impl Cineloop {
    pub fn new(
        t: usize,
        h: usize,
        w: usize,
        frames: Vec<f32>,
        needle: Mask,
        prostate: Mask,
        lesion: Mask,
    ) -> Result<Self> {
        if t < 2 {
            return Err(Error::InvalidConfig(format!("cineloop needs T >= 2, got {t}")));
        }
        if frames.len() != t * h * w {
            return Err(Error::ShapeMismatch {
                op: "cineloop",
                details: format!(
                    "{}x{}x{} needs {} values, got {}",
                    t,
                    h,
                    w,
                    t * h * w,
                    frames.len()
                ),
            });
        }
        for m in [&needle, &prostate, &lesion] {
            if m.height() != h || m.width() != w {
                return Err(Error::ShapeMismatch {
                    op: "cineloop",
                    details: format!("mask {}x{} vs frames {}x{}", m.height(), m.width(), h, w),
                });
            }
        }
        if let Some(&bad) = frames.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain {
                op: "cineloop",
                details: format!("frame value {bad} outside [0,1]"),
            });
        }
        if needle.and(&prostate)?.count() == 0 {
            return Err(Error::EmptyRegion);
        }
        Ok(Cineloop {
            t,
            h,
            w,
            frames,
            needle,
            prostate,
            lesion,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.t
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.frames[i * self.h * self.w..(i + 1) * self.h * self.w]
    }

    pub fn frames_flat(&self) -> &[f32] {
        &self.frames
    }

    pub fn frame_grid(&self, i: usize) -> Grid {
        Grid::from_vec(self.h, self.w, self.frame(i).iter().map(|&v| v as f64).collect())
            .expect("frame dims are consistent")
    }
}

/// Everything the generator needs; JSON keys mirror the field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    /// Frames per cineloop (T). At full acquisition scale this is 200; the
    /// desk-scale default keeps temporal averaging meaningful in minutes.
    pub frames: usize,
    pub patients: usize,
    pub cores_per_patient: usize,
    pub benign_fraction: f64,
    /// Relative weights of GS7/GS8/GS9/GS10 among cancer cores.
    pub grade_mix: [f64; 4],
    pub min_involvement: f64,
    /// Echogenicity multiplier of lesion tissue.
    pub lesion_contrast: f64,
    pub background_sigma: f64,
    pub tissue_sigma: f64,
    pub base_amp_jitter: f64,
    pub lesion_amp_jitter: f64,
    /// Speckle gain of center B relative to center A.
    pub center_b_gain: f64,
    pub envelope_window: usize,
    pub log_alpha: f64,
    pub master_seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            height: 96,
            width: 96,
            frames: 16,
            patients: 20,
            cores_per_patient: 10,
            benign_fraction: 0.80,
            grade_mix: [286.0, 87.0, 56.0, 12.0],
            min_involvement: 0.05,
            lesion_contrast: 1.8,
            background_sigma: 0.15,
            tissue_sigma: 0.30,
            base_amp_jitter: 0.10,
            lesion_amp_jitter: 0.35,
            center_b_gain: 1.08,
            envelope_window: 7,
            log_alpha: 100.0,
            master_seed: 42,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.height < 16 || self.width < 16 {
            return fail(format!("image {}x{} too small (min 16)", self.height, self.width));
        }
        if !(2..=200).contains(&self.frames) {
            return fail(format!("frames must be in [2,200], got {}", self.frames));
        }
        if self.patients == 0 || self.cores_per_patient == 0 {
            return fail("patients and cores_per_patient must be positive".into());
        }
        if !(self.benign_fraction > 0.0 && self.benign_fraction < 1.0) {
            return fail(format!(
                "benign_fraction must be in (0,1), got {}",
                self.benign_fraction
            ));
        }
        if self.grade_mix.iter().any(|&v| v < 0.0) || self.grade_mix.iter().sum::<f64>() <= 0.0 {
            return fail("grade_mix weights must be nonnegative with positive sum".into());
        }
        if !(self.min_involvement > 0.0 && self.min_involvement < 1.0) {
            return fail(format!(
                "min_involvement must be in (0,1), got {}",
                self.min_involvement
            ));
        }
        if self.lesion_contrast <= 1.0 {
            return fail("lesion_contrast must exceed 1".into());
        }
        if self.envelope_window == 0 || self.envelope_window % 2 == 0 {
            return fail(format!(
                "envelope_window must be odd, got {}",
                self.envelope_window
            ));
        }
        if self.log_alpha <= 0.0 {
            return fail("log_alpha must be positive".into());
        }
        Ok(())
    }

    fn bmode_params(&self) -> BModeParams {
        BModeParams {
            window: self.envelope_window,
            alpha: self.log_alpha,
        }
    }
}

/// Lesion fraction of the needle-prostate intersection: |lesion ∩ N ∩ P| /
/// |N ∩ P|, counted in integers before the single final division.
pub fn compute_involvement(lesion: &Mask, needle: &Mask, prostate: &Mask) -> Result<f64> {
    let region = needle.and(prostate)?;
    let denom = region.count();
    if denom == 0 {
        return Err(Error::EmptyRegion);
    }
    let num = region
        .values()
        .iter()
        .zip(lesion.values())
        .filter(|(&r, &l)| r && l)
        .count();
    Ok(num as f64 / denom as f64)
}

/// Which cores of a patient carry cancer. Deterministic in (config,
/// patient); the fractional remainder of `(1-benign) * cores` is dithered
/// per patient so dataset-level fractions converge to the configured one.
fn cancer_slots(config: &PhantomConfig, patient_seed: u64) -> Vec<bool> {
    let mut rng = StreamRng::derive(config.master_seed, &[patient_seed, TAG_PLAN]);
    let expect = (1.0 - config.benign_fraction) * config.cores_per_patient as f64;
    let mut n_cancer = expect.floor() as usize;
    if rng.bernoulli(expect.fract()) {
        n_cancer += 1;
    }
    n_cancer = n_cancer.min(config.cores_per_patient);
    let mut slots: Vec<usize> = (0..config.cores_per_patient).collect();
    rng.shuffle(&mut slots);
    let mut out = vec![false; config.cores_per_patient];
    for &s in &slots[..n_cancer] {
        out[s] = true;
    }
    out
}

fn patient_center(config: &PhantomConfig, patient_seed: u64) -> Center {
    let mut rng = StreamRng::derive(config.master_seed, &[patient_seed, TAG_CENTER]);
    // two-center split roughly matching a 131/180 case mix
    if rng.bernoulli(131.0 / 311.0) {
        Center::A
    } else {
        Center::B
    }
}

struct Geometry {
    needle: Mask,
    prostate: Mask,
    lesion: Mask,
    involvement: f64,
}

/// Ellipse interior test on pixel centers.
fn ellipse_mask(h: usize, w: usize, cy: f64, cx: f64, ry: f64, rx: f64) -> Mask {
    let mut m = Mask::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let dy = (y as f64 - cy) / ry;
            let dx = (x as f64 - cx) / rx;
            if dy * dy + dx * dx <= 1.0 {
                m.set(y, x, true);
            }
        }
    }
    m
}

/// Rotated ellipse aligned to a unit direction d; r_par is the semi-axis
/// along d, r_perp across it.
fn rotated_ellipse(
    h: usize,
    w: usize,
    cy: f64,
    cx: f64,
    d: (f64, f64),
    r_par: f64,
    r_perp: f64,
) -> Mask {
    let mut m = Mask::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let vy = y as f64 - cy;
            let vx = x as f64 - cx;
            let s = vy * d.0 + vx * d.1;
            let t = -vy * d.1 + vx * d.0;
            if (s / r_par).powi(2) + (t / r_perp).powi(2) <= 1.0 {
                m.set(y, x, true);
            }
        }
    }
    m
}

fn draw_geometry(config: &PhantomConfig, rng: &mut StreamRng, cancer: bool) -> Option<Geometry> {
    let (h, w) = (config.height, config.width);
    let (hf, wf) = (h as f64, w as f64);

    // prostate ellipse covering 30-60% of the image, fully inside it
    let mut prostate = None;
    let mut center = (0.0, 0.0);
    let mut semis = (0.0, 0.0);
    for _ in 0..50 {
        let coverage = rng.uniform_in(0.35, 0.55);
        let aspect = rng.uniform_in(0.75, 1.3);
        let area = coverage * hf * wf / std::f64::consts::PI;
        let ry = (area * aspect).sqrt();
        let rx = area / ry;
        if ry > 0.45 * hf || rx > 0.45 * wf {
            continue;
        }
        let cy = hf / 2.0 + rng.uniform_in(-0.03, 0.03) * hf;
        let cx = wf / 2.0 + rng.uniform_in(-0.03, 0.03) * wf;
        center = (cy, cx);
        semis = (ry, rx);
        prostate = Some(ellipse_mask(h, w, cy, cx, ry, rx));
        break;
    }
    let prostate = prostate?;

    // oblique needle corridor through a point near the prostate center
    let width = rng.int_in(2, 4) as f64;
    let angle = rng.uniform_in(20.0, 55.0).to_radians();
    let dir = (angle.cos(), angle.sin()); // (dy, dx), unit length
    let py = center.0 + rng.uniform_in(-0.12, 0.12) * semis.0;
    let px = center.1 + rng.uniform_in(-0.12, 0.12) * semis.1;
    let mut needle = Mask::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let dist = (-dir.1 * (y as f64 - py) + dir.0 * (x as f64 - px)).abs();
            if dist < width / 2.0 {
                needle.set(y, x, true);
            }
        }
    }

    let region = needle.and(&prostate).ok()?;
    if region.count() == 0 {
        return None;
    }

    let mut lesion = Mask::new(h, w);
    if cancer {
        // span of the corridor inside the prostate, as projections onto dir
        let (mut s_min, mut s_max) = (f64::INFINITY, f64::NEG_INFINITY);
        for y in 0..h {
            for x in 0..w {
                if region.get(y, x) {
                    let s = dir.0 * (y as f64 - py) + dir.1 * (x as f64 - px);
                    s_min = s_min.min(s);
                    s_max = s_max.max(s);
                }
            }
        }
        let span = (s_max - s_min).max(1.0);

        // size the primary lesion so it covers roughly `target` of the
        // corridor; the recorded involvement is recomputed from the final
        // masks either way
        let target = rng.uniform_in(0.12, 0.92);
        let s_center = s_min + rng.uniform_in(0.2, 0.8) * span;
        let ly = py + dir.0 * s_center;
        let lx = px + dir.1 * s_center;
        let r_par = (target * span / 2.0 * 1.15).max(2.0);
        let r_perp = (r_par * rng.uniform_in(0.35, 0.9)).max(width / 2.0 + 1.5);
        lesion = rotated_ellipse(h, w, ly, lx, dir, r_par, r_perp);

        // up to two satellite blobs elsewhere in the gland
        let extra = rng.below(3);
        for _ in 0..extra {
            for _ in 0..20 {
                let by = rng.uniform_in(center.0 - semis.0, center.0 + semis.0);
                let bx = rng.uniform_in(center.1 - semis.1, center.1 + semis.1);
                let inside = ((by - center.0) / semis.0).powi(2)
                    + ((bx - center.1) / semis.1).powi(2)
                    <= 0.8;
                if inside {
                    let ry = rng.uniform_in(2.5, 7.0);
                    let rx = rng.uniform_in(2.5, 7.0);
                    let blob = ellipse_mask(h, w, by, bx, ry, rx);
                    for y in 0..h {
                        for x in 0..w {
                            if blob.get(y, x) {
                                lesion.set(y, x, true);
                            }
                        }
                    }
                    break;
                }
            }
        }

        // cancer lives inside the gland
        lesion = lesion.and(&prostate).ok()?;
    }

    let involvement = compute_involvement(&lesion, &needle, &prostate).ok()?;
    if cancer && involvement < config.min_involvement {
        return None;
    }

    Some(Geometry {
        needle,
        prostate,
        lesion,
        involvement,
    })
}

/// Render T frames of RF speckle for a fixed geometry and convert each to
/// B-mode. Tissue is quasi-static: frames differ only by fresh speckle
/// draws and at most one pixel of jitter.
fn render_frames(
    config: &PhantomConfig,
    geo: &Geometry,
    center: Center,
    rng: &mut StreamRng,
) -> Vec<f32> {
    let (h, w) = (config.height, config.width);
    let gain = match center {
        Center::A => 1.0,
        Center::B => config.center_b_gain,
    };

    let mut sigma = vec![0.0f64; h * w];
    let mut jitter_amp = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let s = if geo.lesion.get(y, x) {
                config.tissue_sigma * config.lesion_contrast
            } else if geo.prostate.get(y, x) {
                config.tissue_sigma
            } else {
                config.background_sigma
            };
            sigma[i] = s * gain;
            jitter_amp[i] = if geo.lesion.get(y, x) {
                config.lesion_amp_jitter
            } else {
                config.base_amp_jitter
            };
        }
    }

    let params = config.bmode_params();
    let mut frames = Vec::with_capacity(config.frames * h * w);
    let mut rf = Grid::zeros(h, w);
    for _ in 0..config.frames {
        let dy = rng.int_in(-1, 1);
        let dx = rng.int_in(-1, 1);
        for y in 0..h {
            let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
            for x in 0..w {
                let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                let i = sy * w + sx;
                let amp = sigma[i] * (1.0 + jitter_amp[i] * rng.normal());
                rf.set(y, x, amp * rng.normal());
            }
        }
        let bm = rf_to_bmode(&rf, &params);
        frames.extend(bm.values().iter().map(|&v| v as f32));
    }
    frames
}

/// Generate one core. A pure function of (config, patient_seed,
/// core_index); the patient id doubles as its seed.
pub fn generate_core(
    config: &PhantomConfig,
    patient_seed: u64,
    core_index: usize,
) -> Result<(Cineloop, CoreRecord)> {
    config.validate()?;
    if core_index >= config.cores_per_patient {
        return Err(Error::InvalidConfig(format!(
            "core_index {core_index} out of range for {} cores per patient",
            config.cores_per_patient
        )));
    }
    let cancer = cancer_slots(config, patient_seed)[core_index];
    let center = patient_center(config, patient_seed);
    let core = core_index as u64;

    const ATTEMPTS: usize = 100;
    let mut geo = None;
    for attempt in 0..ATTEMPTS {
        let mut rng = StreamRng::derive(
            config.master_seed,
            &[patient_seed, core, TAG_GEOMETRY, attempt as u64],
        );
        if let Some(g) = draw_geometry(config, &mut rng, cancer) {
            geo = Some(g);
            break;
        }
    }
    let geo = geo.ok_or_else(|| Error::DegenerateGeometry {
        attempts: ATTEMPTS,
        what: format!("patient {patient_seed} core {core_index}"),
    })?;

    let mut tex_rng = StreamRng::derive(config.master_seed, &[patient_seed, core, TAG_TEXTURE]);
    let frames = render_frames(config, &geo, center, &mut tex_rng);

    let grade_bucket = if cancer {
        let mut rng = StreamRng::derive(config.master_seed, &[patient_seed, core, TAG_GRADE]);
        match rng.categorical(&config.grade_mix) {
            0 => GradeBucket::GS7,
            1 => GradeBucket::GS8,
            2 => GradeBucket::GS9,
            _ => GradeBucket::GS10,
        }
    } else {
        GradeBucket::Benign
    };

    let core_id = patient_seed * config.cores_per_patient as u64 + core;
    let record = CoreRecord {
        patient_id: patient_seed,
        center,
        core_id,
        label: if cancer { Label::Cancer } else { Label::Benign },
        involvement: geo.involvement,
        grade_bucket,
        path: format!("cores/p{patient_seed:04}_c{core:02}.usc"),
    };
    let cineloop = Cineloop::new(
        config.frames,
        config.height,
        config.width,
        frames,
        geo.needle,
        geo.prostate,
        geo.lesion,
    )?;
    Ok((cineloop, record))
}

/// Generate every core of one patient.
pub fn generate_patient(
    config: &PhantomConfig,
    patient_seed: u64,
) -> Result<Vec<(Cineloop, CoreRecord)>> {
    (0..config.cores_per_patient)
        .map(|i| generate_core(config, patient_seed, i))
        .collect()
}

/// Generate the whole dataset, parallel over patients, ordered by patient.
pub fn generate_dataset(config: &PhantomConfig) -> Result<Vec<(Cineloop, CoreRecord)>> {
    use rayon::prelude::*;
    config.validate()?;
    let per_patient: Vec<Result<Vec<_>>> = (0..config.patients as u64)
        .into_par_iter()
        .map(|p| generate_patient(config, p))
        .collect();
    let mut out = Vec::with_capacity(config.patients * config.cores_per_patient);
    for r in per_patient {
        out.extend(r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> PhantomConfig {
        PhantomConfig {
            height: 32,
            width: 32,
            frames: 2,
            patients: 4,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn benign_core_has_zero_involvement_and_no_lesion() {
        let config = small_config();
        for p in 0..4u64 {
            let slots = cancer_slots(&config, p);
            if let Some(core) = slots.iter().position(|&c| !c) {
                let (cine, rec) = generate_core(&config, p, core).unwrap();
                assert_eq!(rec.label, Label::Benign);
                assert_eq!(rec.involvement, 0.0);
                assert_eq!(rec.grade_bucket, GradeBucket::Benign);
                assert_eq!(cine.lesion.count(), 0);
                return;
            }
        }
        panic!("no benign core found in 4 patients");
    }

    #[test]
    fn involvement_matches_masks_exactly() {
        let config = small_config();
        for p in 0..4u64 {
            for c in 0..config.cores_per_patient {
                let (cine, rec) = generate_core(&config, p, c).unwrap();
                let inv = compute_involvement(&cine.lesion, &cine.needle, &cine.prostate).unwrap();
                assert_eq!(rec.involvement, inv);
                if rec.label == Label::Cancer {
                    assert!(inv >= config.min_involvement);
                }
            }
        }
    }

    #[test]
    fn generation_is_bit_identical() {
        let config = PhantomConfig {
            master_seed: 42,
            ..small_config()
        };
        let (a, ra) = generate_core(&config, 1, 3).unwrap();
        let (b, rb) = generate_core(&config, 1, 3).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
    }

    #[test]
    fn frames_in_unit_range_and_masks_consistent() {
        let config = small_config();
        let (cine, _) = generate_core(&config, 2, 5).unwrap();
        assert!(cine.frames_flat().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(cine.needle.and(&cine.prostate).unwrap().count() > 0);
    }

    #[test]
    fn prostate_covers_30_to_60_percent() {
        let config = small_config();
        for p in 0..3u64 {
            let (cine, _) = generate_core(&config, p, 0).unwrap();
            let frac = cine.prostate.count() as f64 / (32.0 * 32.0);
            assert!((0.30..=0.60).contains(&frac), "coverage {frac}");
        }
    }

    #[test]
    fn involvement_examples() {
        let mut needle = Mask::new(4, 4);
        let mut prostate = Mask::new(4, 4);
        for y in 0..4 {
            needle.set(y, 1, true);
            for x in 0..4 {
                prostate.set(y, x, true);
            }
        }
        // lesion covers all of the corridor
        let lesion = needle.clone();
        assert_eq!(compute_involvement(&lesion, &needle, &prostate).unwrap(), 1.0);
        // lesion misses it entirely
        let mut away = Mask::new(4, 4);
        away.set(0, 3, true);
        assert_eq!(compute_involvement(&away, &needle, &prostate).unwrap(), 0.0);
        // empty intersection errors
        let empty = Mask::new(4, 4);
        assert!(matches!(
            compute_involvement(&lesion, &empty, &prostate),
            Err(Error::EmptyRegion)
        ));
    }

    #[test]
    fn quarter_involvement_from_counts() {
        // |N ∩ P| = 40, |lesion ∩ N ∩ P| = 10 -> 0.25
        let mut needle = Mask::new(10, 10);
        let mut prostate = Mask::new(10, 10);
        let mut lesion = Mask::new(10, 10);
        for y in 0..10 {
            for x in 0..4 {
                needle.set(y, x, true);
                prostate.set(y, x, true);
            }
        }
        for y in 0..5 {
            for x in 0..2 {
                lesion.set(y, x, true);
            }
        }
        assert_eq!(compute_involvement(&lesion, &needle, &prostate).unwrap(), 0.25);
    }

    #[test]
    fn dataset_label_and_grade_proportions() {
        let config = PhantomConfig {
            patients: 50,
            height: 32,
            width: 32,
            frames: 2,
            ..PhantomConfig::default()
        };
        let cores = generate_dataset(&config).unwrap();
        assert_eq!(cores.len(), 500);
        let benign = cores.iter().filter(|(_, r)| r.label == Label::Benign).count();
        let frac = benign as f64 / cores.len() as f64;
        assert!((frac - 0.80).abs() <= 0.03, "benign fraction {frac}");

        let cancers: Vec<_> = cores.iter().filter(|(_, r)| r.is_cancer()).collect();
        let total = cancers.len() as f64;
        let expected = [286.0 / 441.0, 87.0 / 441.0, 56.0 / 441.0, 12.0 / 441.0];
        for (i, bucket) in [GradeBucket::GS7, GradeBucket::GS8, GradeBucket::GS9, GradeBucket::GS10]
            .iter()
            .enumerate()
        {
            let got =
                cancers.iter().filter(|(_, r)| r.grade_bucket == *bucket).count() as f64 / total;
            assert!(
                (got - expected[i]).abs() <= 0.05,
                "{bucket:?}: {got} vs {}",
                expected[i]
            );
        }
    }

    #[test]
    fn lesions_brighten_their_pixels() {
        // the learnable signal: lesion pixels should be brighter on average
        // than non-lesion prostate tissue
        let config = small_config();
        let mut checked = 0;
        for p in 0..4u64 {
            for c in 0..config.cores_per_patient {
                let (cine, rec) = generate_core(&config, p, c).unwrap();
                if !rec.is_cancer() {
                    continue;
                }
                let frame = cine.frame_grid(0);
                let (mut les_sum, mut les_n) = (0.0, 0);
                let (mut tis_sum, mut tis_n) = (0.0, 0);
                for y in 0..cine.height() {
                    for x in 0..cine.width() {
                        if cine.lesion.get(y, x) {
                            les_sum += frame.get(y, x);
                            les_n += 1;
                        } else if cine.prostate.get(y, x) {
                            tis_sum += frame.get(y, x);
                            tis_n += 1;
                        }
                    }
                }
                assert!(les_n > 0 && tis_n > 0);
                assert!(
                    les_sum / les_n as f64 > tis_sum / tis_n as f64 + 0.02,
                    "lesion not brighter for patient {p} core {c}"
                );
                checked += 1;
            }
        }
        assert!(checked >= 4, "only {checked} cancer cores in sample");
    }
}
