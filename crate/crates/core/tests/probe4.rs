//! Hyperparameter grid for the smoke recipe.
//! cargo test -p cineseg-core --test probe4 -- --ignored --nocapture

use std::time::Instant;

use cineseg_core::eval::kfold_split;
use cineseg_core::model::FusionParams;
use cineseg_core::phantom::{generate_dataset, PhantomConfig};
use cineseg_core::train::{train_fold, TrainConfig};

#[test]
#[ignore]
fn probe_grid() {
    let phantom = PhantomConfig::default();
    let cores = generate_dataset(&phantom).unwrap();
    let patients: Vec<u64> = (0..phantom.patients as u64).collect();

    for (lr, tau) in [(1e-3, 0.05), (2e-3, 0.05), (2e-3, 0.2), (3e-3, 0.05)] {
        let mut config = TrainConfig {
            epochs: 12,
            seed: 1,
            ..TrainConfig::default()
        };
        config.optimizer.learning_rate = lr;
        config.fusion = FusionParams::new(tau, 0.5, 0.5).unwrap();
        let folds = kfold_split(&patients, config.folds, config.seed).unwrap();
        let t = Instant::now();
        let run = train_fold(&cores, &folds, 0, &config).unwrap();
        let aurocs: Vec<String> = run
            .history
            .epochs
            .iter()
            .map(|e| format!("{:.2}", e.val_auroc.unwrap_or(f64::NAN)))
            .collect();
        println!(
            "lr {lr:.0e} tau {tau}: {:.0}s  best_epoch {}  aurocs [{}]",
            t.elapsed().as_secs_f64(),
            run.history.best_epoch,
            aurocs.join(" ")
        );
    }
}
