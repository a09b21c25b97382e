//! The four subcommands: gen, train, eval, heatmap.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context, Result};

use cineseg_core::eval::{evaluate_run, kfold_split, render_table, FoldAssignment};
use cineseg_core::model::{core_score, load_checkpoint_matching, save_checkpoint, SegNet};
use cineseg_core::phantom::{generate_patient, read_dataset, DatasetWriter, Label, PhantomConfig};
use cineseg_core::train::{eval_forward, region_mask, train_fold, TrainConfig};
use cineseg_core::{Error as CoreError, Grid};

use crate::manifest::{DirLock, ManifestBuilder};
use crate::pgm::{region_outline, write_pgm};
use crate::CliError;

fn parse_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<(T, Vec<u8>), CliError> {
    let bytes = fs::read(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(CliError::Usage)?;
    let parsed = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Usage(anyhow!("config {} does not parse: {e}", path.display())))?;
    Ok((parsed, bytes))
}

fn usage_if_invalid(r: cineseg_core::Result<()>) -> Result<(), CliError> {
    r.map_err(|e| match e {
        CoreError::InvalidConfig(_) => CliError::Usage(anyhow!(e)),
        other => CliError::Runtime(anyhow!(other)),
    })
}

/// Generate a dataset directory from a phantom config.
pub fn cmd_gen(config_path: &Path, out: &Path) -> Result<(), CliError> {
    let (config, bytes): (PhantomConfig, _) = parse_config(config_path)?;
    usage_if_invalid(config.validate())?;
    let _lock = DirLock::acquire(out).map_err(CliError::Runtime)?;
    let manifest = ManifestBuilder::start(&bytes).seed("master_seed", config.master_seed);

    let mut writer = DatasetWriter::create(out).map_err(|e| CliError::Runtime(anyhow!(e)))?;
    let mut benign = 0usize;
    let mut cancer = 0usize;
    // patients stream to disk one at a time; generation inside a patient is
    // already deterministic, so order is fixed regardless of thread count
    for patient in 0..config.patients as u64 {
        let cores = generate_patient(&config, patient).map_err(|e| CliError::Runtime(anyhow!(e)))?;
        for (cine, record) in cores {
            match record.label {
                Label::Benign => benign += 1,
                Label::Cancer => cancer += 1,
            }
            writer.add(record, &cine).map_err(|e| CliError::Runtime(anyhow!(e)))?;
        }
    }
    let ds = writer.finish().map_err(|e| CliError::Runtime(anyhow!(e)))?;
    manifest
        .finish(out, vec!["cores.jsonl".into(), "cores/".into()])
        .map_err(CliError::Runtime)?;
    println!(
        "generated {} cores from {} patients ({} benign / {} cancer) in {}",
        ds.records.len(),
        config.patients,
        benign,
        cancer,
        out.display()
    );
    Ok(())
}

fn load_dataset_cores(
    data: &Path,
) -> Result<Vec<(cineseg_core::phantom::Cineloop, cineseg_core::phantom::CoreRecord)>, CliError> {
    let ds = read_dataset(data).map_err(|e| CliError::Runtime(anyhow!(e)))?;
    let cines = ds.load_all().map_err(|e| CliError::Runtime(anyhow!(e)))?;
    Ok(cines.into_iter().zip(ds.records.iter().cloned()).collect())
}

/// Train one model per fold, writing checkpoints, histories and logs.
pub fn cmd_train(data: &Path, config_path: &Path, out: &Path) -> Result<(), CliError> {
    let (config, bytes): (TrainConfig, _) = parse_config(config_path)?;
    usage_if_invalid(config.validate())?;
    let _lock = DirLock::acquire(out).map_err(CliError::Runtime)?;
    let manifest = ManifestBuilder::start(&bytes).seed("seed", config.seed);

    let cores = load_dataset_cores(data)?;
    let patients: Vec<u64> = {
        let mut p: Vec<u64> = cores.iter().map(|(_, r)| r.patient_id).collect();
        p.sort_unstable();
        p.dedup();
        p
    };
    let folds = kfold_split(&patients, config.folds, config.seed)
        .map_err(|e| CliError::Usage(anyhow!(e)))?;

    fs::write(
        out.join("config.json"),
        serde_json::to_string_pretty(&config).expect("config serializes"),
    )
    .map_err(|e| CliError::Runtime(anyhow!(e)))?;
    fs::write(
        out.join("folds.json"),
        serde_json::to_string_pretty(&folds).expect("folds serialize"),
    )
    .map_err(|e| CliError::Runtime(anyhow!(e)))?;

    let mut artifacts = vec!["config.json".into(), "folds.json".into()];
    for k in 0..folds.fold_count() {
        let run = train_fold(&cores, &folds, k, &config).map_err(|e| CliError::Runtime(anyhow!(e)))?;
        let fold_dir = out.join(format!("fold_{k}"));
        fs::create_dir_all(&fold_dir).map_err(|e| CliError::Runtime(anyhow!(e)))?;
        save_checkpoint(&run.net, &fold_dir.join("checkpoint.segn"))
            .map_err(|e| CliError::Runtime(anyhow!(e)))?;
        fs::write(
            fold_dir.join("history.json"),
            serde_json::to_string_pretty(&run.history).expect("history serializes"),
        )
        .map_err(|e| CliError::Runtime(anyhow!(e)))?;
        let mut log = String::new();
        for entry in &run.augment_log {
            log.push_str(&serde_json::to_string(entry).expect("log entry serializes"));
            log.push('\n');
        }
        fs::write(fold_dir.join("augment_log.jsonl"), log)
            .map_err(|e| CliError::Runtime(anyhow!(e)))?;

        let best = run
            .history
            .epochs
            .get(run.history.best_epoch)
            .and_then(|e| e.val_auroc);
        println!(
            "fold {k}: best epoch {} val AUROC {}",
            run.history.best_epoch,
            best.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into())
        );
        artifacts.push(format!("fold_{k}/checkpoint.segn"));
        artifacts.push(format!("fold_{k}/history.json"));
        artifacts.push(format!("fold_{k}/augment_log.jsonl"));
    }
    manifest.finish(out, artifacts).map_err(CliError::Runtime)?;
    Ok(())
}

fn load_run(
    data: &Path,
    run: &Path,
) -> Result<
    (
        Vec<(cineseg_core::phantom::Cineloop, cineseg_core::phantom::CoreRecord)>,
        FoldAssignment,
        TrainConfig,
        Vec<SegNet>,
    ),
    CliError,
> {
    let (config, _): (TrainConfig, _) = parse_config(&run.join("config.json"))?;
    let folds_bytes = fs::read(run.join("folds.json"))
        .with_context(|| format!("reading {}/folds.json", run.display()))
        .map_err(CliError::Runtime)?;
    let folds: FoldAssignment = serde_json::from_slice(&folds_bytes)
        .map_err(|e| CliError::Runtime(anyhow!("folds.json does not parse: {e}")))?;
    let cores = load_dataset_cores(data)?;
    let (h, w) = (cores[0].0.height(), cores[0].0.width());
    let mut nets = Vec::new();
    for k in 0..folds.fold_count() {
        let path = run.join(format!("fold_{k}")).join("checkpoint.segn");
        if !path.is_file() {
            return Err(CliError::Runtime(anyhow!(
                "missing checkpoint for fold {k}: {}",
                path.display()
            )));
        }
        let net = load_checkpoint_matching(&path, &config.net_config(h, w, k))
            .map_err(|e| CliError::Runtime(anyhow!(e)))?;
        nets.push(net);
    }
    Ok((cores, folds, config, nets))
}

/// Score every fold's held-out cores and write the metrics report.
pub fn cmd_eval(data: &Path, run: &Path) -> Result<(), CliError> {
    let (cores, folds, config, nets) = load_run(data, run)?;
    let report = evaluate_run(&nets, &cores, &folds, config.mode, &config.fusion)
        .map_err(|e| CliError::Runtime(anyhow!(e)))?;

    let eval_dir = run.join("eval");
    let _lock = DirLock::acquire(&eval_dir).map_err(CliError::Runtime)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(eval_dir.join("metrics.json"), &json).map_err(|e| CliError::Runtime(anyhow!(e)))?;
    let table = render_table(&report);
    fs::write(eval_dir.join("metrics.txt"), &table).map_err(|e| CliError::Runtime(anyhow!(e)))?;
    let config_bytes = fs::read(run.join("config.json")).map_err(|e| CliError::Runtime(anyhow!(e)))?;
    ManifestBuilder::start(&config_bytes)
        .finish(&eval_dir, vec!["metrics.json".into(), "metrics.txt".into()])
        .map_err(CliError::Runtime)?;
    println!("{table}");
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

/// Render the fused prediction map of one core as PGM, next to a companion
/// image outlining the needle-prostate region.
pub fn cmd_heatmap(data: &Path, run: &Path, core_id: u64, out: &Path) -> Result<(), CliError> {
    let (cores, folds, config, nets) = load_run(data, run)?;
    let (cine, record) = cores
        .iter()
        .find(|(_, r)| r.core_id == core_id)
        .ok_or_else(|| CliError::Usage(anyhow!(CoreError::UnknownCore(core_id))))?;
    let fold = folds
        .fold_of(record.patient_id)
        .ok_or_else(|| CliError::Runtime(anyhow!("patient {} has no fold", record.patient_id)))?;

    let map: Grid = eval_forward(&nets[fold], cine, config.mode, &config.fusion)
        .map_err(|e| CliError::Runtime(anyhow!(e)))?;
    write_pgm(&map, out).map_err(CliError::Runtime)?;

    let region = region_mask(&cine.needle, &cine.prostate).map_err(|e| CliError::Runtime(anyhow!(e)))?;
    let outline_path = companion_path(out);
    write_pgm(&region_outline(&region.mask), &outline_path).map_err(CliError::Runtime)?;

    let score = core_score(&map, &region.mask).map_err(|e| CliError::Runtime(anyhow!(e)))?;
    println!(
        "core {core_id} (fold {fold}): core_score {:.4}, true involvement {:.4}",
        score, record.involvement
    );
    println!("heatmap {}", out.display());
    println!("region outline {}", outline_path.display());
    Ok(())
}

/// foo.pgm -> foo.region.pgm
pub fn companion_path(out: &Path) -> std::path::PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("heatmap");
    out.with_file_name(format!("{stem}.region.pgm"))
}
