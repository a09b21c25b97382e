//! Isolate which axis stalls learning: image size vs augmentation mode.
//! cargo test -p cineseg-core --test probe5 -- --ignored --nocapture

use std::time::Instant;

use cineseg_core::eval::kfold_split;
use cineseg_core::phantom::{generate_dataset, PhantomConfig};
use cineseg_core::train::{train_fold, AugMode, TrainConfig};

fn run_case(h: usize, w: usize, mode: AugMode, epochs: usize, lr: f64) {
    let phantom = PhantomConfig {
        height: h,
        width: w,
        frames: 8,
        patients: 20,
        ..PhantomConfig::default()
    };
    let cores = generate_dataset(&phantom).unwrap();
    let patients: Vec<u64> = (0..phantom.patients as u64).collect();
    let mut config = TrainConfig {
        mode,
        epochs,
        seed: 1,
        ..TrainConfig::default()
    };
    config.optimizer.learning_rate = lr;
    let folds = kfold_split(&patients, config.folds, config.seed).unwrap();
    let t = Instant::now();
    let run = train_fold(&cores, &folds, 0, &config).unwrap();
    let aurocs: Vec<String> = run
        .history
        .epochs
        .iter()
        .map(|e| format!("{:.2}", e.val_auroc.unwrap_or(f64::NAN)))
        .collect();
    let losses: Vec<String> = run
        .history
        .epochs
        .iter()
        .map(|e| format!("{:.3}", e.train_loss))
        .collect();
    println!(
        "{h}x{w} {mode:?} lr {lr:.0e}: {:.0}s\n  aurocs [{}]\n  losses [{}]",
        t.elapsed().as_secs_f64(),
        aurocs.join(" "),
        losses.join(" ")
    );
}

#[test]
#[ignore]
fn probe_size_vs_mode() {
    run_case(96, 96, AugMode::None, 12, 1e-3);
    run_case(48, 48, AugMode::Cine, 16, 1e-3);
}
