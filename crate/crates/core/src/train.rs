//! Involvement-aware supervision: region construction, the iMSE and MaskCE
//! losses, the optimizer, and the training loop wiring phantom -> augment
//! -> model -> loss -> step.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{make_pair, AppliedOp, AugmentConfig, StrongSource};
use crate::error::{Error, Result};
use crate::eval::{auroc, FoldAssignment, ScoredCore};
use crate::grid::{Grid, Mask};
use crate::model::{
    core_score, dual_forward, fuse_on_tape, FusionParams, SegNet, SegNetConfig,
};
use crate::phantom::{Cineloop, CoreRecord};
use crate::rng::StreamRng;
use crate::tape::{NodeId, Tape};

const TAG_INIT: u64 = 0x11;
const TAG_ORDER: u64 = 0x22;
const TAG_AUG: u64 = 0x33;

/// The loss/score support: needle ∩ prostate.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionR {
    pub mask: Mask,
    pub pixel_count: usize,
}

/// Element-wise AND of the needle and prostate masks; errors when empty.
pub fn region_mask(needle: &Mask, prostate: &Mask) -> Result<RegionR> {
    let mask = needle.and(prostate)?;
    let pixel_count = mask.count();
    if pixel_count == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok(RegionR { mask, pixel_count })
}

/// Which algebraic form of the involvement loss to use. They share
/// gradients up to constants; the restricted per-pixel form is the default
/// because it constrains spatial spread, not just the regional mean.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImseForm {
    /// (1/|R|) sum over R of (y - inv)^2
    #[default]
    Restricted,
    /// (1/|R|) sum over all pixels of (y * 1_R - inv)^2; adds the constant
    /// inv^2 per out-of-region pixel, gradients unchanged
    Displayed,
    /// (mean_R(y) - inv)^2
    ProseMean,
}

/// Involvement-aware squared-error loss on the tape.
pub fn loss_imse(
    tape: &mut Tape,
    y_hat: NodeId,
    region: &RegionR,
    involvement: f64,
    form: ImseForm,
) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&involvement) {
        return Err(Error::Domain {
            op: "loss_imse",
            details: format!("involvement {involvement} outside [0,1]"),
        });
    }
    let shape = tape.shape(y_hat).to_vec();
    let numel: usize = shape.iter().product();
    match form {
        ImseForm::Restricted => {
            let neg = tape.leaf_from(shape, vec![-involvement; numel]);
            let diff = tape.add(y_hat, neg)?;
            let sq = tape.elementwise_mul(diff, diff)?;
            tape.masked_mean(sq, &region.mask)
        }
        ImseForm::Displayed => {
            let ind: Vec<f64> = region
                .mask
                .values()
                .iter()
                .map(|&m| if m { 1.0 } else { 0.0 })
                .collect();
            let ind = tape.leaf_from(shape.clone(), ind);
            let zeroed = tape.elementwise_mul(y_hat, ind)?;
            let neg = tape.leaf_from(shape, vec![-involvement; numel]);
            let diff = tape.add(zeroed, neg)?;
            let sq = tape.elementwise_mul(diff, diff)?;
            let full = Mask::full(region.mask.height(), region.mask.width());
            let mean_all = tape.masked_mean(sq, &full)?;
            Ok(tape.scalar_mul(mean_all, numel as f64 / region.pixel_count as f64))
        }
        ImseForm::ProseMean => {
            let mean_r = tape.masked_mean(y_hat, &region.mask)?;
            let neg = tape.leaf_from(vec![1], vec![-involvement]);
            let diff = tape.add(mean_r, neg)?;
            tape.elementwise_mul(diff, diff)
        }
    }
}

/// Masked binary cross-entropy baseline loss; the positive label means any
/// cancer involvement at all.
pub fn loss_maskce(tape: &mut Tape, y_hat: NodeId, region: &RegionR, label: bool) -> Result<NodeId> {
    const EPS: f64 = 1e-7;
    let clamped = tape.clamp(y_hat, EPS, 1.0 - EPS)?;
    let term = if label {
        tape.ln(clamped)?
    } else {
        let shape = tape.shape(y_hat).to_vec();
        let numel: usize = shape.iter().product();
        let negated = tape.scalar_mul(clamped, -1.0);
        let ones = tape.leaf_from(shape, vec![1.0; numel]);
        let one_minus = tape.add(negated, ones)?;
        tape.ln(one_minus)?
    };
    let mean = tape.masked_mean(term, &region.mask)?;
    Ok(tape.scalar_mul(mean, -1.0))
}

/// Adaptive per-parameter step sizes with bias correction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

pub struct Adam {
    params: AdamParams,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(params: AdamParams, net: &SegNet) -> Self {
        let m = net.params().iter().map(|p| vec![0.0; p.values.len()]).collect();
        let v = net.params().iter().map(|p| vec![0.0; p.values.len()]).collect();
        Adam { params, m, v, t: 0 }
    }

    pub fn step(&mut self, net: &mut SegNet, grads: &[Vec<f64>]) {
        self.t += 1;
        let b1c = 1.0 - self.params.beta1.powi(self.t as i32);
        let b2c = 1.0 - self.params.beta2.powi(self.t as i32);
        for (pi, param) in net.params_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[pi], &mut self.v[pi]);
            for (j, theta) in param.values.iter_mut().enumerate() {
                let g = grads[pi][j];
                m[j] = self.params.beta1 * m[j] + (1.0 - self.params.beta1) * g;
                v[j] = self.params.beta2 * v[j] + (1.0 - self.params.beta2) * g * g;
                let m_hat = m[j] / b1c;
                let v_hat = v[j] / b2c;
                *theta -= self.params.learning_rate * m_hat / (v_hat.sqrt() + self.params.epsilon);
            }
        }
    }
}

/// Which views feed the network each step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugMode {
    /// Frame 0, no augmentation, single branch.
    None,
    /// Translated frame 0, single branch.
    Translate,
    /// Weak/strong pair, both views built from frame 0.
    WeakStrong,
    /// Weak/strong pair with the strong view built from the temporal
    /// average of frames 2..T: the full cine recipe.
    Cine,
}

impl AugMode {
    pub fn is_dual(self) -> bool {
        matches!(self, AugMode::WeakStrong | AugMode::Cine)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Imse,
    Maskce,
}

/// Full training recipe, serialized as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub imse_form: ImseForm,
    pub mode: AugMode,
    pub fusion: FusionParams,
    pub augment: AugmentConfig,
    pub channels: Vec<usize>,
    pub kernel_size: usize,
    pub optimizer: AdamParams,
    pub batch_size: usize,
    pub epochs: usize,
    pub folds: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Imse,
            imse_form: ImseForm::default(),
            mode: AugMode::Cine,
            fusion: FusionParams::default(),
            augment: AugmentConfig::default(),
            channels: vec![8, 16, 32],
            kernel_size: 3,
            optimizer: AdamParams::default(),
            batch_size: 4,
            epochs: 30,
            folds: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.folds < 2 {
            return Err(Error::InvalidConfig("folds must be at least 2".into()));
        }
        if self.channels.is_empty() {
            return Err(Error::InvalidConfig("channels must be nonempty".into()));
        }
        self.augment.validate()
    }

    pub fn net_config(&self, height: usize, width: usize, fold: usize) -> SegNetConfig {
        let seed = StreamRng::derive(self.seed, &[fold as u64, TAG_INIT]).next_u64();
        SegNetConfig {
            height,
            width,
            channels: self.channels.clone(),
            kernel_size: self.kernel_size,
            seed,
        }
    }
}

/// Per-epoch record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auroc: Option<f64>,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
}

/// Augment draws for one training step, kept for the run audit log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AugmentLogEntry {
    pub epoch: usize,
    pub core_id: u64,
    pub ops: Vec<AppliedOp>,
}

pub struct FoldRun {
    pub net: SegNet,
    pub history: TrainHistory,
    pub augment_log: Vec<AugmentLogEntry>,
}

struct StepOutput {
    loss: f64,
    grads: Vec<Vec<f64>>,
    ops: Vec<AppliedOp>,
}

fn step_core(
    net: &SegNet,
    cine: &Cineloop,
    record: &CoreRecord,
    config: &TrainConfig,
    aug_seed: u64,
) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let frame0 = cine.frame_grid(0);

    let (pred, region, ops, reg) = match config.mode {
        AugMode::None => {
            let region = region_mask(&cine.needle, &cine.prostate)?;
            let reg = net.register(&mut tape);
            let out = reg.forward(&mut tape, &frame0)?;
            (out, region, Vec::new(), reg)
        }
        AugMode::Translate => {
            let (img, n, p, ops) = crate::augment::weak_augment(
                &frame0,
                &cine.needle,
                &cine.prostate,
                &config.augment,
                aug_seed,
            );
            // a translation that pushed the whole region off-image would
            // leave the loss unsupported; fall back to the untranslated view
            let (img, region) = match region_mask(&n, &p) {
                Ok(r) => (img, r),
                Err(_) => (frame0.clone(), region_mask(&cine.needle, &cine.prostate)?),
            };
            let reg = net.register(&mut tape);
            let out = reg.forward(&mut tape, &img)?;
            (out, region, ops, reg)
        }
        AugMode::WeakStrong | AugMode::Cine => {
            let source = if config.mode == AugMode::Cine {
                StrongSource::TemporalAverage
            } else {
                StrongSource::Frame0
            };
            let pair = make_pair(cine, &config.augment, source, aug_seed)?;
            let region = match region_mask(&pair.needle_w, &pair.prostate_w) {
                Ok(r) => r,
                Err(_) => region_mask(&cine.needle, &cine.prostate)?,
            };
            let (pw, ps, reg) = dual_forward(net, &mut tape, &pair.x_weak, &pair.x_strong)?;
            let fused = fuse_on_tape(&mut tape, pw, ps, &config.fusion)?;
            (fused, region, pair.log, reg)
        }
    };

    let loss_node = match config.loss {
        LossKind::Imse => loss_imse(&mut tape, pred, &region, record.involvement, config.imse_form)?,
        LossKind::Maskce => loss_maskce(&mut tape, pred, &region, record.is_cancer())?,
    };
    let loss = tape.tensor(loss_node).item()?;
    let grads = tape.backward(loss_node)?;
    let grad_vecs = reg
        .param_ids()
        .iter()
        .zip(net.params())
        .map(|(&id, p)| grads.wrt(id, p.values.len()))
        .collect();
    Ok(StepOutput {
        loss,
        grads: grad_vecs,
        ops,
    })
}

/// Deterministic inference pass matching the training recipe: the weak view
/// is the raw first frame, the strong view the raw temporal average, no
/// random corruption.
pub fn eval_forward(
    net: &SegNet,
    cine: &Cineloop,
    mode: AugMode,
    fusion: &FusionParams,
) -> Result<Grid> {
    let mut tape = Tape::new();
    let frame0 = cine.frame_grid(0);
    let out = match mode {
        AugMode::None | AugMode::Translate => {
            let reg = net.register(&mut tape);
            reg.forward(&mut tape, &frame0)?
        }
        AugMode::WeakStrong => {
            let (pw, ps, _) = dual_forward(net, &mut tape, &frame0, &frame0)?;
            fuse_on_tape(&mut tape, pw, ps, fusion)?
        }
        AugMode::Cine => {
            let avg = temporal_average_or_frame0(cine)?;
            let (pw, ps, _) = dual_forward(net, &mut tape, &frame0, &avg)?;
            fuse_on_tape(&mut tape, pw, ps, fusion)?
        }
    };
    tape.tensor(out).to_grid()
}

fn temporal_average_or_frame0(cine: &Cineloop) -> Result<Grid> {
    crate::augment::temporal_average(cine)
}

/// Score one core with the deterministic inference pass.
pub fn score_core(
    net: &SegNet,
    cine: &Cineloop,
    record: &CoreRecord,
    mode: AugMode,
    fusion: &FusionParams,
) -> Result<ScoredCore> {
    let map = eval_forward(net, cine, mode, fusion)?;
    let region = region_mask(&cine.needle, &cine.prostate)?;
    let score = core_score(&map, &region.mask)?;
    Ok(ScoredCore {
        record: record.clone(),
        score,
    })
}

/// Train one fold. Deterministic in (cores, folds, held_out, config): the
/// epoch order, augmentation streams and batch reduction order are all
/// derived from the config seed.
pub fn train_fold(
    cores: &[(Cineloop, CoreRecord)],
    folds: &FoldAssignment,
    held_out: usize,
    config: &TrainConfig,
) -> Result<FoldRun> {
    config.validate()?;
    if cores.is_empty() {
        return Err(Error::InvalidConfig("dataset is empty".into()));
    }
    if config.mode == AugMode::Cine {
        if let Some((c, r)) = cores.iter().find(|(c, _)| c.frame_count() < 2) {
            return Err(Error::InvalidConfig(format!(
                "cine mode needs T >= 2, core {} has T = {}",
                r.core_id,
                c.frame_count()
            )));
        }
    }
    let (h, w) = (cores[0].0.height(), cores[0].0.width());
    let train_idx: Vec<usize> = (0..cores.len())
        .filter(|&i| folds.fold_of(cores[i].1.patient_id) != Some(held_out))
        .collect();
    let val_idx: Vec<usize> = (0..cores.len())
        .filter(|&i| folds.fold_of(cores[i].1.patient_id) == Some(held_out))
        .collect();
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "fold {held_out} leaves an empty train or validation set"
        )));
    }

    let mut net = SegNet::new(config.net_config(h, w, held_out))?;
    let mut adam = Adam::new(config.optimizer, &net);
    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
    };
    let mut augment_log = Vec::new();
    let mut best: Option<(f64, SegNet)> = None;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut order = train_idx.clone();
        let mut order_rng =
            StreamRng::derive(config.seed, &[held_out as u64, epoch as u64, TAG_ORDER]);
        order_rng.shuffle(&mut order);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let outputs: Vec<Result<StepOutput>> = batch
                .par_iter()
                .map(|&i| {
                    let (cine, record) = &cores[i];
                    let aug_seed = StreamRng::derive(
                        config.seed,
                        &[held_out as u64, epoch as u64, record.core_id, TAG_AUG],
                    )
                    .next_u64();
                    step_core(&net, cine, record, config, aug_seed)
                })
                .collect();

            // fixed-order reduction keeps f64 sums thread-count independent
            let mut grad_sum: Vec<Vec<f64>> = net
                .params()
                .iter()
                .map(|p| vec![0.0; p.values.len()])
                .collect();
            for (&i, out) in batch.iter().zip(outputs) {
                let out = out?;
                let record = &cores[i].1;
                if !out.loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        core_id: record.core_id,
                    });
                }
                epoch_loss += out.loss;
                for (acc, g) in grad_sum.iter_mut().zip(&out.grads) {
                    for (a, &v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
                augment_log.push(AugmentLogEntry {
                    epoch,
                    core_id: record.core_id,
                    ops: out.ops,
                });
            }
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grad_sum {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
            adam.step(&mut net, &grad_sum);
        }
        let train_loss = epoch_loss / train_idx.len() as f64;

        let scored: Vec<ScoredCore> = val_idx
            .par_iter()
            .map(|&i| score_core(&net, &cores[i].0, &cores[i].1, config.mode, &config.fusion))
            .collect::<Result<_>>()?;
        let val_auroc = auroc(&scored).ok();

        let improved = match (&best, val_auroc) {
            (None, Some(v)) => Some(v),
            (Some((b, _)), Some(v)) if v > *b => Some(v),
            _ => None,
        };
        if let Some(v) = improved {
            best = Some((v, net.clone()));
            history.best_epoch = epoch;
        }
        history.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_auroc,
            wall_secs: started.elapsed().as_secs_f64(),
        });
    }

    let net = best.map(|(_, n)| n).unwrap_or(net);
    Ok(FoldRun {
        net,
        history,
        augment_log,
    })
}

/// Train every fold in sequence.
pub fn train_all(
    cores: &[(Cineloop, CoreRecord)],
    folds: &FoldAssignment,
    config: &TrainConfig,
) -> Result<Vec<FoldRun>> {
    (0..folds.fold_count())
        .map(|k| train_fold(cores, folds, k, config))
        .collect()
}
