//! Core-level evaluation: AUROC, involvement-stratified subsets, balanced
//! accuracy, sensitivity at fixed specificity, patient-grouped k-fold
//! splitting and per-run aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FusionParams, SegNet};
use crate::phantom::{Cineloop, CoreRecord};
use crate::rng::StreamRng;
use crate::train::{score_core, AugMode};

/// One core with its model score. Positive class means any involvement.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoredCore {
    pub record: CoreRecord,
    pub score: f64,
}

impl ScoredCore {
    pub fn is_positive(&self) -> bool {
        self.record.involvement > 0.0
    }
}

fn split_classes(scored: &[ScoredCore]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for s in scored {
        if s.is_positive() {
            pos.push(s.score);
        } else {
            neg.push(s.score);
        }
    }
    if pos.is_empty() {
        return Err(Error::SingleClass { missing: "cancer" });
    }
    if neg.is_empty() {
        return Err(Error::SingleClass { missing: "benign" });
    }
    Ok((pos, neg))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (the Mann-Whitney statistic), computed by average
/// ranks in O(n log n).
pub fn auroc(scored: &[ScoredCore]) -> Result<f64> {
    let (pos, neg) = split_classes(scored)?;
    let (p, n) = (pos.len(), neg.len());
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // rank sum of positives with average ranks over tie groups
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks are 1-based; ties share the mean rank of the group
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (p * (p + 1)) as f64 / 2.0;
    Ok(u / (p as f64 * n as f64))
}

/// Sensitivity at the smallest threshold reaching the target specificity.
/// Scores at or below the threshold count as predicted-negative.
pub fn sensitivity_at_specificity(scored: &[ScoredCore], target_spec: f64) -> Result<f64> {
    if !(target_spec > 0.0 && target_spec < 1.0) {
        return Err(Error::Domain {
            op: "sensitivity_at_specificity",
            details: format!("target specificity {target_spec} outside (0,1)"),
        });
    }
    let (pos, mut neg) = split_classes(scored)?;
    neg.sort_by(f64::total_cmp);
    // need at least ceil(target * N) negatives at or below the threshold;
    // the epsilon guards float products like 0.6 * 5 landing above 3
    let needed = ((target_spec * neg.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let threshold = neg[needed - 1];
    let hits = pos.iter().filter(|&&s| s > threshold).count();
    Ok(hits as f64 / pos.len() as f64)
}

/// (sensitivity + specificity) / 2 with scores above the threshold
/// predicted positive.
pub fn balanced_accuracy(scored: &[ScoredCore], threshold: f64) -> Result<f64> {
    let (pos, neg) = split_classes(scored)?;
    let sens = pos.iter().filter(|&&s| s > threshold).count() as f64 / pos.len() as f64;
    let spec = neg.iter().filter(|&&s| s <= threshold).count() as f64 / neg.len() as f64;
    Ok((sens + spec) / 2.0)
}

/// Threshold maximizing Youden's J (sens + spec - 1) on validation scores,
/// ties broken toward the lower threshold.
pub fn choose_threshold(scored: &[ScoredCore]) -> Result<f64> {
    let (pos, neg) = split_classes(scored)?;
    let mut candidates: Vec<f64> = scored.iter().map(|s| s.score).collect();
    candidates.push(f64::NEG_INFINITY);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY); // (J, threshold)
    for &t in &candidates {
        let sens = pos.iter().filter(|&&s| s > t).count() as f64 / pos.len() as f64;
        let spec = neg.iter().filter(|&&s| s <= t).count() as f64 / neg.len() as f64;
        let j = sens + spec - 1.0;
        if j > best.0 {
            best = (j, t);
        }
    }
    Ok(best.1)
}

/// Keep all benign cores plus cancer cores with involvement strictly above
/// 0.35.
pub fn high_involvement_subset(scored: &[ScoredCore]) -> Vec<ScoredCore> {
    scored
        .iter()
        .filter(|s| !s.is_positive() || s.record.involvement > 0.35)
        .cloned()
        .collect()
}

/// Patient-level fold assignment: all of a patient's cores share its fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    folds: BTreeMap<u64, usize>,
    k: usize,
}

impl FoldAssignment {
    pub fn fold_of(&self, patient_id: u64) -> Option<usize> {
        self.folds.get(&patient_id).copied()
    }

    pub fn fold_count(&self) -> usize {
        self.k
    }

    pub fn patients_in(&self, fold: usize) -> Vec<u64> {
        self.folds
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(&p, _)| p)
            .collect()
    }
}

/// Shuffle patients by seed, deal them round-robin into k folds.
pub fn kfold_split(patients: &[u64], k: usize, seed: u64) -> Result<FoldAssignment> {
    let mut unique: Vec<u64> = patients.to_vec();
    unique.sort_unstable();
    unique.dedup();
    if k == 0 || k > unique.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot split {} patients into {} folds",
            unique.len(),
            k
        )));
    }
    let mut rng = StreamRng::derive(seed, &[0x6b66_6f6c_64]);
    rng.shuffle(&mut unique);
    let folds = unique
        .iter()
        .enumerate()
        .map(|(i, &p)| (p, i % k))
        .collect();
    Ok(FoldAssignment { folds, k })
}

/// Metrics of one fold; a metric is None when its fold's held-out set has a
/// single class.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub cores: usize,
    pub auroc: Option<f64>,
    pub auroc_high_inv: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub threshold: Option<f64>,
    pub sens_at_20_spec: Option<f64>,
    pub sens_at_40_spec: Option<f64>,
    pub sens_at_60_spec: Option<f64>,
}

/// Mean/std aggregate of the per-fold metrics (population std over the
/// folds where the metric exists).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AggMetrics {
    pub auroc: Option<f64>,
    pub auroc_high_inv: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub sens_at_20_spec: Option<f64>,
    pub sens_at_40_spec: Option<f64>,
    pub sens_at_60_spec: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_fold: Vec<FoldMetrics>,
    pub mean: AggMetrics,
    pub std: AggMetrics,
    pub warnings: Vec<String>,
}

fn agg<F>(per_fold: &[FoldMetrics], pick: F) -> (Option<f64>, Option<f64>)
where
    F: Fn(&FoldMetrics) -> Option<f64>,
{
    let values: Vec<f64> = per_fold.iter().filter_map(&pick).collect();
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

/// Score one fold's held-out cores and compute its metric row.
pub fn fold_metrics(fold: usize, scored: &[ScoredCore], warnings: &mut Vec<String>) -> FoldMetrics {
    let mut warn = |what: &str, e: &Error| {
        warnings.push(format!("fold {fold}: {what} unavailable ({e})"));
    };
    let auroc_v = match auroc(scored) {
        Ok(v) => Some(v),
        Err(e) => {
            warn("auroc", &e);
            None
        }
    };
    let subset = high_involvement_subset(scored);
    let auroc_hi = match auroc(&subset) {
        Ok(v) => Some(v),
        Err(e) => {
            warn("auroc_high_inv", &e);
            None
        }
    };
    let (threshold, bal_acc) = match choose_threshold(scored) {
        Ok(t) => (
            Some(t),
            Some(balanced_accuracy(scored, t).expect("classes checked by choose_threshold")),
        ),
        Err(e) => {
            warn("balanced_accuracy", &e);
            (None, None)
        }
    };
    let sens = |target: f64, name: &str, warnings: &mut Vec<String>| match sensitivity_at_specificity(
        scored, target,
    ) {
        Ok(v) => Some(v),
        Err(e) => {
            warnings.push(format!("fold {fold}: {name} unavailable ({e})"));
            None
        }
    };
    let s20 = sens(0.20, "sens_at_20_spec", warnings);
    let s40 = sens(0.40, "sens_at_40_spec", warnings);
    let s60 = sens(0.60, "sens_at_60_spec", warnings);
    FoldMetrics {
        fold,
        cores: scored.len(),
        auroc: auroc_v,
        auroc_high_inv: auroc_hi,
        balanced_accuracy: bal_acc,
        threshold,
        sens_at_20_spec: s20,
        sens_at_40_spec: s40,
        sens_at_60_spec: s60,
    }
}

/// Aggregate per-fold rows into the final report.
pub fn aggregate_report(per_fold: Vec<FoldMetrics>, warnings: Vec<String>) -> MetricsReport {
    let (mean_auroc, std_auroc) = agg(&per_fold, |f| f.auroc);
    let (mean_hi, std_hi) = agg(&per_fold, |f| f.auroc_high_inv);
    let (mean_ba, std_ba) = agg(&per_fold, |f| f.balanced_accuracy);
    let (mean_s20, std_s20) = agg(&per_fold, |f| f.sens_at_20_spec);
    let (mean_s40, std_s40) = agg(&per_fold, |f| f.sens_at_40_spec);
    let (mean_s60, std_s60) = agg(&per_fold, |f| f.sens_at_60_spec);
    MetricsReport {
        per_fold,
        mean: AggMetrics {
            auroc: mean_auroc,
            auroc_high_inv: mean_hi,
            balanced_accuracy: mean_ba,
            sens_at_20_spec: mean_s20,
            sens_at_40_spec: mean_s40,
            sens_at_60_spec: mean_s60,
        },
        std: AggMetrics {
            auroc: std_auroc,
            auroc_high_inv: std_hi,
            balanced_accuracy: std_ba,
            sens_at_20_spec: std_s20,
            sens_at_40_spec: std_s40,
            sens_at_60_spec: std_s60,
        },
        warnings,
    }
}

/// Score every fold's held-out cores with that fold's checkpoint and
/// aggregate. `nets[k]` must be the checkpoint of fold k.
pub fn evaluate_run(
    nets: &[SegNet],
    cores: &[(Cineloop, CoreRecord)],
    folds: &FoldAssignment,
    mode: AugMode,
    fusion: &FusionParams,
) -> Result<MetricsReport> {
    use rayon::prelude::*;
    if nets.len() != folds.fold_count() {
        return Err(Error::InvalidConfig(format!(
            "{} checkpoints for {} folds",
            nets.len(),
            folds.fold_count()
        )));
    }
    let mut warnings = Vec::new();
    let mut per_fold = Vec::new();
    for k in 0..folds.fold_count() {
        let held: Vec<&(Cineloop, CoreRecord)> = cores
            .iter()
            .filter(|(_, r)| folds.fold_of(r.patient_id) == Some(k))
            .collect();
        let scored: Vec<ScoredCore> = held
            .par_iter()
            .map(|(c, r)| score_core(&nets[k], c, r, mode, fusion))
            .collect::<Result<_>>()?;
        per_fold.push(fold_metrics(k, &scored, &mut warnings));
    }
    Ok(aggregate_report(per_fold, warnings))
}

fn fmt_cell(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:.3}", v),
        None => "-".into(),
    }
}

fn fmt_mean_std(mean: Option<f64>, std: Option<f64>) -> String {
    match (mean, std) {
        (Some(m), Some(s)) => format!("{:.3} ± {:.3}", m, s),
        _ => "-".into(),
    }
}

/// Plain-text table with one row per fold plus the aggregate row. Columns
/// follow the usual reporting layout: AUROC, AUROC on the high-involvement
/// subset, balanced accuracy, and sensitivity at 20/40/60% specificity.
pub fn render_table(report: &MetricsReport) -> String {
    let headers = [
        "Fold",
        "AUROC",
        "AUROC(inv>0.35)",
        "Bal.Acc.",
        "Sens@20Spe",
        "Sens@40Spe",
        "Sens@60Spe",
    ];
    let mut rows: Vec<Vec<String>> = Vec::new();
    for f in &report.per_fold {
        rows.push(vec![
            format!("{}", f.fold),
            fmt_cell(f.auroc),
            fmt_cell(f.auroc_high_inv),
            fmt_cell(f.balanced_accuracy),
            fmt_cell(f.sens_at_20_spec),
            fmt_cell(f.sens_at_40_spec),
            fmt_cell(f.sens_at_60_spec),
        ]);
    }
    rows.push(vec![
        "mean±std".into(),
        fmt_mean_std(report.mean.auroc, report.std.auroc),
        fmt_mean_std(report.mean.auroc_high_inv, report.std.auroc_high_inv),
        fmt_mean_std(report.mean.balanced_accuracy, report.std.balanced_accuracy),
        fmt_mean_std(report.mean.sens_at_20_spec, report.std.sens_at_20_spec),
        fmt_mean_std(report.mean.sens_at_40_spec, report.std.sens_at_40_spec),
        fmt_mean_std(report.mean.sens_at_60_spec, report.std.sens_at_60_spec),
    ]);

    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let fmt_row = |cells: &[String], widths: &[usize]| -> String {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{:>width$}", c, width = widths[i]))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let header_cells: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
    out.push_str(&fmt_row(&header_cells, &widths));
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for row in &rows {
        out.push_str(&fmt_row(row, &widths));
        out.push('\n');
    }
    out
}
