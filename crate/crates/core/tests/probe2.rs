//! Diagnostic: simplest recipe (single branch, no augmentation), watch
//! score vs involvement. Run:
//! cargo test -p cineseg-core --test probe2 -- --ignored --nocapture

use cineseg_core::eval::kfold_split;
use cineseg_core::phantom::{generate_dataset, PhantomConfig};
use cineseg_core::train::{score_core, train_fold, AugMode, TrainConfig};

#[test]
#[ignore]
fn probe_simplest_mode() {
    let phantom = PhantomConfig {
        height: 48,
        width: 48,
        frames: 4,
        patients: 10,
        ..PhantomConfig::default()
    };
    let cores = generate_dataset(&phantom).unwrap();
    let mut config = TrainConfig {
        mode: AugMode::None,
        epochs: 15,
        seed: 1,
        folds: 5,
        ..TrainConfig::default()
    };
    config.optimizer.learning_rate = 1e-3;
    let patients: Vec<u64> = (0..phantom.patients as u64).collect();
    let folds = kfold_split(&patients, config.folds, config.seed).unwrap();
    let run = train_fold(&cores, &folds, 0, &config).unwrap();
    for e in &run.history.epochs {
        println!(
            "epoch {:2}  loss {:.5}  val_auroc {:?}",
            e.epoch, e.train_loss, e.val_auroc
        );
    }
    println!("--- final scores on fold-0 cores (inv, score) ---");
    for (cine, rec) in &cores {
        if folds.fold_of(rec.patient_id) == Some(0) {
            let s = score_core(&run.net, cine, rec, config.mode, &config.fusion).unwrap();
            println!("inv {:.3}  score {:.4}", rec.involvement, s.score);
        }
    }
}
