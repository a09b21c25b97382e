//! Encoder-decoder segmentation network, shared-weight dual forward pass,
//! thresholded prediction fusion and core-level scoring.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::rng::StreamRng;
use crate::tape::{NodeId, Tape};

/// Network hyperparameters. The encoder halves the resolution once per
/// stage after the first; the decoder mirrors it with nearest upsampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegNetConfig {
    #[serde(default = "default_size")]
    pub height: usize,
    #[serde(default = "default_size")]
    pub width: usize,
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_size() -> usize {
    96
}

fn default_channels() -> Vec<usize> {
    vec![8, 16, 32]
}

fn default_kernel() -> usize {
    3
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            height: default_size(),
            width: default_size(),
            channels: default_channels(),
            kernel_size: default_kernel(),
            seed: 0,
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::InvalidConfig("channels must be nonempty".into()));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(Error::InvalidConfig(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        let div = 1usize << (self.channels.len() - 1);
        if self.height % div != 0 || self.width % div != 0 {
            return Err(Error::InvalidConfig(format!(
                "{}x{} input not divisible by {} for {} stages",
                self.height,
                self.width,
                div,
                self.channels.len()
            )));
        }
        if self.height / div < self.kernel_size || self.width / div < self.kernel_size {
            return Err(Error::InvalidConfig(
                "deepest stage smaller than the kernel".into(),
            ));
        }
        Ok(())
    }

    fn stages(&self) -> usize {
        self.channels.len() - 1
    }
}

/// One named parameter tensor.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Param {
    fn len(&self) -> usize {
        self.values.len()
    }
}

/// The segmentation network: a flat list of parameters in declaration
/// order plus the config that fixes their shapes.
#[derive(Clone, Debug)]
pub struct SegNet {
    config: SegNetConfig,
    params: Vec<Param>,
}

impl SegNet {
    /// He-style init for hidden convs, zero init for the output head so a
    /// fresh net predicts exactly 0.5 everywhere.
    pub fn new(config: SegNetConfig) -> Result<Self> {
        config.validate()?;
        let k = config.kernel_size;
        let mut params = Vec::new();
        let mut add_conv = |name: &str, c_out: usize, c_in: usize, ks: usize, zero: bool| {
            let fan_in = c_in * ks * ks;
            let std = (2.0 / fan_in as f64).sqrt();
            let mut rng = StreamRng::derive(config.seed, &[0x6e65_74, params.len() as u64]);
            let values = if zero {
                vec![0.0; c_out * c_in * ks * ks]
            } else {
                (0..c_out * c_in * ks * ks).map(|_| rng.normal() * std).collect()
            };
            params.push(Param {
                name: format!("{name}.weight"),
                shape: vec![c_out, c_in, ks, ks],
                values,
            });
            params.push(Param {
                name: format!("{name}.bias"),
                shape: vec![c_out],
                values: vec![0.0; c_out],
            });
        };

        let ch = &config.channels;
        add_conv("enc0", ch[0], 1, k, false);
        for i in 1..ch.len() {
            add_conv(&format!("enc{i}"), ch[i], ch[i - 1], k, false);
        }
        for i in (0..ch.len() - 1).rev() {
            add_conv(&format!("dec{i}"), ch[i], ch[i + 1], k, false);
        }
        add_conv("head", 1, ch[0], 1, true);

        Ok(SegNet { config, params })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Put every parameter on the tape once; both branches of a dual
    /// forward pass reuse these leaves, so their gradients accumulate
    /// into the one shared parameter set.
    pub fn register(&self, tape: &mut Tape) -> TapeNet {
        let ids = self
            .params
            .iter()
            .map(|p| tape.leaf_from(p.shape.clone(), p.values.clone()))
            .collect();
        TapeNet {
            ids,
            config: self.config.clone(),
        }
    }
}

/// A network registered on a tape.
pub struct TapeNet {
    ids: Vec<NodeId>,
    config: SegNetConfig,
}

impl TapeNet {
    pub fn param_ids(&self) -> &[NodeId] {
        &self.ids
    }

    /// Full encoder-decoder pass; returns the sigmoid probability map node
    /// of shape [1, H, W].
    ///
    /// The image is standardized to zero mean and unit variance before the
    /// first conv. B-mode values cluster tightly around their DC level, and
    /// without centering the filters spend most of their capacity fighting
    /// that offset instead of learning texture.
    pub fn forward(&self, tape: &mut Tape, image: &Grid) -> Result<NodeId> {
        let cfg = &self.config;
        if image.height() != cfg.height || image.width() != cfg.width {
            return Err(Error::ShapeMismatch {
                op: "forward_seg",
                details: format!(
                    "image {}x{} does not match net {}x{}",
                    image.height(),
                    image.width(),
                    cfg.height,
                    cfg.width
                ),
            });
        }
        let mut p = self.ids.iter().copied();
        let mut next = || (p.next().unwrap(), p.next().unwrap());

        let n = (image.height() * image.width()) as f64;
        let mean = image.values().iter().sum::<f64>() / n;
        let var = image.values().iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let scale = 1.0 / (var.sqrt() + 1e-6);
        let standardized: Vec<f64> = image.values().iter().map(|&v| (v - mean) * scale).collect();

        let mut x = tape.leaf_from(vec![1, image.height(), image.width()], standardized);
        // encoder: full-resolution stage then stride-2 stages
        let (w, b) = next();
        x = tape.conv2d(x, w, 1)?;
        x = tape.bias_add(x, b)?;
        x = tape.relu(x);
        for _ in 0..cfg.stages() {
            let (w, b) = next();
            x = tape.conv2d(x, w, 2)?;
            x = tape.bias_add(x, b)?;
            x = tape.relu(x);
        }
        // decoder: nearest 2x then conv per stage
        for _ in 0..cfg.stages() {
            let (w, b) = next();
            x = tape.upsample_nearest_2x(x)?;
            x = tape.conv2d(x, w, 1)?;
            x = tape.bias_add(x, b)?;
            x = tape.relu(x);
        }
        let (w, b) = next();
        x = tape.conv2d(x, w, 1)?;
        x = tape.bias_add(x, b)?;
        Ok(tape.sigmoid(x))
    }
}

/// One forward pass of a freshly registered net.
pub fn forward_seg(net: &SegNet, tape: &mut Tape, image: &Grid) -> Result<NodeId> {
    net.register(tape).forward(tape, image)
}

/// Shared-weight dual pass over a weak and a strong view. Both outputs sit
/// on the same tape, so backward adds the two branch gradients together.
pub fn dual_forward(
    net: &SegNet,
    tape: &mut Tape,
    x_weak: &Grid,
    x_strong: &Grid,
) -> Result<(NodeId, NodeId, TapeNet)> {
    let reg = net.register(tape);
    let pw = reg.forward(tape, x_weak)?;
    let ps = reg.forward(tape, x_strong)?;
    Ok((pw, ps, reg))
}

/// Where a prediction map came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Weak,
    Strong,
    Fused,
}

/// Per-pixel cancer probability map.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMap {
    pub values: Grid,
    pub provenance: Provenance,
}

/// Fusion hyperparameters. `gamma_w + gamma_s = 1` is enforced at
/// construction; `gamma_s` is stored as `1 - gamma_w` so the invariant is
/// exact in floating point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFusionParams", into = "RawFusionParams")]
pub struct FusionParams {
    tau: f64,
    gamma_w: f64,
    gamma_s: f64,
}

#[derive(Serialize, Deserialize)]
struct RawFusionParams {
    tau: f64,
    gamma_w: f64,
    gamma_s: f64,
}

impl From<FusionParams> for RawFusionParams {
    fn from(fp: FusionParams) -> Self {
        RawFusionParams {
            tau: fp.tau,
            gamma_w: fp.gamma_w,
            gamma_s: fp.gamma_s,
        }
    }
}

impl TryFrom<RawFusionParams> for FusionParams {
    type Error = Error;

    fn try_from(raw: RawFusionParams) -> Result<Self> {
        FusionParams::new(raw.tau, raw.gamma_w, raw.gamma_s)
    }
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams {
            tau: 0.2,
            gamma_w: 0.5,
            gamma_s: 0.5,
        }
    }
}

impl FusionParams {
    pub fn new(tau: f64, gamma_w: f64, gamma_s: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidConfig(format!("tau {tau} outside [0,1]")));
        }
        if !(0.0..=1.0).contains(&gamma_w) || !(0.0..=1.0).contains(&gamma_s) {
            return Err(Error::InvalidConfig(format!(
                "gamma_w {gamma_w} / gamma_s {gamma_s} outside [0,1]"
            )));
        }
        if (gamma_w + gamma_s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "gamma_w + gamma_s must be 1, got {}",
                gamma_w + gamma_s
            )));
        }
        Ok(FusionParams {
            tau,
            gamma_w,
            gamma_s: 1.0 - gamma_w,
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn gamma_w(&self) -> f64 {
        self.gamma_w
    }

    pub fn gamma_s(&self) -> f64 {
        self.gamma_s
    }
}

fn indicator_over_tau(values: &[f64], tau: f64) -> Vec<f64> {
    values
        .iter()
        .map(|&v| if v > tau { 1.0 } else { 0.0 })
        .collect()
}

/// Thresholded weighted fusion of the weak and strong maps, recorded on the
/// tape. The indicator `pw > tau` (strict) is a constant during backprop:
/// gradients flow through retained weak pixels and all strong pixels.
pub fn fuse_on_tape(tape: &mut Tape, pw: NodeId, ps: NodeId, fp: &FusionParams) -> Result<NodeId> {
    if tape.shape(pw) != tape.shape(ps) {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            details: format!("{:?} vs {:?}", tape.shape(pw), tape.shape(ps)),
        });
    }
    let mask_vals = indicator_over_tau(tape.value(pw), fp.tau);
    let shape = tape.shape(pw).to_vec();
    let mask = tape.leaf_from(shape, mask_vals);
    let kept = tape.elementwise_mul(pw, mask)?;
    let wterm = tape.scalar_mul(kept, fp.gamma_w);
    let sterm = tape.scalar_mul(ps, fp.gamma_s);
    tape.add(wterm, sterm)
}

/// Map-level fusion for inference paths. Same arithmetic as
/// [`fuse_on_tape`], without the tape.
pub fn fuse(pw: &PredictionMap, ps: &PredictionMap, fp: &FusionParams) -> Result<PredictionMap> {
    let (h, w) = (pw.values.height(), pw.values.width());
    if h != ps.values.height() || w != ps.values.width() {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            details: format!(
                "{}x{} vs {}x{}",
                h,
                w,
                ps.values.height(),
                ps.values.width()
            ),
        });
    }
    let values = pw
        .values
        .values()
        .iter()
        .zip(ps.values.values())
        .map(|(&a, &b)| {
            let keep = if a > fp.tau { 1.0 } else { 0.0 };
            fp.gamma_w * (a * keep) + fp.gamma_s * b
        })
        .collect();
    Ok(PredictionMap {
        values: Grid::from_vec(h, w, values)?,
        provenance: Provenance::Fused,
    })
}

/// Mean activation over a region; the core-level pseudo-probability of
/// cancer used by every metric.
pub fn core_score(map: &Grid, region: &Mask) -> Result<f64> {
    if map.height() != region.height() || map.width() != region.width() {
        return Err(Error::ShapeMismatch {
            op: "core_score",
            details: format!(
                "map {}x{} vs region {}x{}",
                map.height(),
                map.width(),
                region.height(),
                region.width()
            ),
        });
    }
    let cnt = region.count();
    if cnt == 0 {
        return Err(Error::EmptyRegion);
    }
    let sum: f64 = map
        .values()
        .iter()
        .zip(region.values())
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .sum();
    Ok(sum / cnt as f64)
}

// ---- checkpoint io ----

const CHECKPOINT_MAGIC: &[u8; 4] = b"SEGN";
const CHECKPOINT_VERSION: u32 = 1;

/// Write a checkpoint: magic, version, length-prefixed config JSON, then
/// all parameter values as little-endian f64 in declaration order.
pub fn save_checkpoint(net: &SegNet, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(net.config()).expect("config serializes");
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    for p in net.params() {
        for v in &p.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<SegNet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |offset: u64, what: &str| Error::BadFormat {
        path: path.to_path_buf(),
        offset,
        what: what.into(),
    };
    if bytes.len() < 12 {
        return Err(bad(bytes.len() as u64, "truncated header"));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(bad(0, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(4, &format!("unsupported version {version}")));
    }
    let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + json_len {
        return Err(bad(12, "truncated config"));
    }
    let config: SegNetConfig = serde_json::from_slice(&bytes[12..12 + json_len])
        .map_err(|e| bad(12, &format!("config does not parse: {e}")))?;
    let mut net = SegNet::new(config)?;
    let mut off = 12 + json_len;
    for i in 0..net.params.len() {
        let n = net.params[i].len();
        if bytes.len() < off + 8 * n {
            return Err(bad(off as u64, "truncated parameters"));
        }
        for j in 0..n {
            net.params[i].values[j] =
                f64::from_le_bytes(bytes[off + 8 * j..off + 8 * j + 8].try_into().unwrap());
        }
        off += 8 * n;
    }
    if off != bytes.len() {
        return Err(bad(off as u64, "trailing bytes"));
    }
    Ok(net)
}

/// Load and insist the stored config equals the expected one.
pub fn load_checkpoint_matching(path: &Path, expected: &SegNetConfig) -> Result<SegNet> {
    let net = load_checkpoint(path)?;
    if net.config() != expected {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint {:?} was written with a different net config",
            path
        )));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SegNetConfig {
        SegNetConfig {
            height: 16,
            width: 16,
            seed: 0,
            ..SegNetConfig::default()
        }
    }

    fn ramp_image(h: usize, w: usize) -> Grid {
        let mut g = Grid::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                g.set(y, x, ((y * w + x) % 17) as f64 / 17.0);
            }
        }
        g
    }

    #[test]
    fn default_net_is_small_and_shape_preserving() {
        let net = SegNet::new(SegNetConfig::default()).unwrap();
        assert!(net.param_count() < 200_000, "{} params", net.param_count());
        let mut tape = Tape::new();
        let out = forward_seg(&net, &mut tape, &ramp_image(96, 96)).unwrap();
        assert_eq!(tape.shape(out), &[1, 96, 96]);
    }

    #[test]
    fn outputs_strictly_inside_unit_interval() {
        let net = SegNet::new(small_config()).unwrap();
        let mut tape = Tape::new();
        let out = forward_seg(&net, &mut tape, &ramp_image(16, 16)).unwrap();
        assert!(tape.value(out).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_head_outputs_exactly_half() {
        // head weights and bias are zero-initialized
        let net = SegNet::new(small_config()).unwrap();
        let mut tape = Tape::new();
        let out = forward_seg(&net, &mut tape, &ramp_image(16, 16)).unwrap();
        assert!(tape.value(out).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn fixed_seed_forward_is_bit_identical() {
        let run = || {
            let net = SegNet::new(small_config()).unwrap();
            let mut tape = Tape::new();
            let out = forward_seg(&net, &mut tape, &ramp_image(16, 16)).unwrap();
            tape.value(out).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn identical_inputs_give_identical_branches() {
        let net = SegNet::new(small_config()).unwrap();
        let img = ramp_image(16, 16);
        let mut tape = Tape::new();
        let (pw, ps, _) = dual_forward(&net, &mut tape, &img, &img).unwrap();
        assert_eq!(tape.value(pw), tape.value(ps));
    }

    #[test]
    fn fusion_hand_arithmetic() {
        let fp = FusionParams::new(0.5, 0.6, 0.4).unwrap();
        let pw = PredictionMap {
            values: Grid::from_vec(1, 1, vec![0.7]).unwrap(),
            provenance: Provenance::Weak,
        };
        let ps = PredictionMap {
            values: Grid::from_vec(1, 1, vec![0.2]).unwrap(),
            provenance: Provenance::Strong,
        };
        let fused = fuse(&pw, &ps, &fp).unwrap();
        assert!((fused.values.get(0, 0) - 0.50).abs() < 1e-15);

        let pw_low = PredictionMap {
            values: Grid::from_vec(1, 1, vec![0.3]).unwrap(),
            provenance: Provenance::Weak,
        };
        let fused = fuse(&pw_low, &ps, &fp).unwrap();
        assert!((fused.values.get(0, 0) - 0.08).abs() < 1e-15);
    }

    #[test]
    fn gamma_w_zero_returns_strong_branch() {
        let fp = FusionParams::new(0.7, 0.0, 1.0).unwrap();
        let pw = PredictionMap {
            values: Grid::from_vec(1, 3, vec![0.9, 0.1, 0.5]).unwrap(),
            provenance: Provenance::Weak,
        };
        let ps = PredictionMap {
            values: Grid::from_vec(1, 3, vec![0.3, 0.6, 0.2]).unwrap(),
            provenance: Provenance::Strong,
        };
        let fused = fuse(&pw, &ps, &fp).unwrap();
        assert_eq!(fused.values.values(), ps.values.values());
    }

    #[test]
    fn invalid_gammas_rejected() {
        assert!(FusionParams::new(0.2, 0.6, 0.6).is_err());
        assert!(FusionParams::new(0.2, 0.5, 0.4).is_err());
        assert!(FusionParams::new(1.5, 0.5, 0.5).is_err());
        let err: std::result::Result<FusionParams, _> =
            serde_json::from_str(r#"{"tau":0.2,"gamma_w":0.9,"gamma_s":0.9}"#);
        assert!(err.is_err());
    }

    #[test]
    fn tape_fusion_matches_map_fusion() {
        let mut rng = crate::rng::StreamRng::derive(5, &[1]);
        let vals_w: Vec<f64> = (0..64).map(|_| rng.uniform()).collect();
        let vals_s: Vec<f64> = (0..64).map(|_| rng.uniform()).collect();
        let fp = FusionParams::default();

        let mut tape = Tape::new();
        let pw = tape.leaf_from(vec![1, 8, 8], vals_w.clone());
        let ps = tape.leaf_from(vec![1, 8, 8], vals_s.clone());
        let fused = fuse_on_tape(&mut tape, pw, ps, &fp).unwrap();

        let map_w = PredictionMap {
            values: Grid::from_vec(8, 8, vals_w).unwrap(),
            provenance: Provenance::Weak,
        };
        let map_s = PredictionMap {
            values: Grid::from_vec(8, 8, vals_s).unwrap(),
            provenance: Provenance::Strong,
        };
        let map_fused = fuse(&map_w, &map_s, &fp).unwrap();
        assert_eq!(tape.value(fused), map_fused.values.values());
    }

    #[test]
    fn core_score_examples() {
        let map = Grid::filled(4, 4, 0.7);
        let mut region = Mask::new(4, 4);
        region.set(1, 1, true);
        region.set(2, 2, true);
        assert!((core_score(&map, &region).unwrap() - 0.7).abs() < 1e-15);

        let mut map2 = Grid::zeros(4, 4);
        map2.set(1, 1, 0.2);
        map2.set(2, 2, 0.8);
        assert!((core_score(&map2, &region).unwrap() - 0.5).abs() < 1e-15);

        assert!(matches!(
            core_score(&map, &Mask::new(4, 4)),
            Err(Error::EmptyRegion)
        ));
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.segn");
        let net = SegNet::new(small_config()).unwrap();
        save_checkpoint(&net, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config(), net.config());
        for (a, b) in net.params().iter().zip(back.params()) {
            assert_eq!(a.values, b.values);
            assert_eq!(a.shape, b.shape);
        }
    }

    #[test]
    fn checkpoint_bad_magic_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.segn");
        std::fs::write(&path, b"NOPE____________").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");

        let good = dir.path().join("good.segn");
        let net = SegNet::new(small_config()).unwrap();
        save_checkpoint(&net, &good).unwrap();
        let other = SegNetConfig {
            height: 32,
            width: 32,
            ..SegNetConfig::default()
        };
        assert!(matches!(
            load_checkpoint_matching(&good, &other),
            Err(Error::ConfigMismatch(_))
        ));
    }
}
