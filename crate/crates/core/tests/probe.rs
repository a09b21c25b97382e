//! Manual probe for training-speed and learnability tuning. Run with:
//! cargo test -p cineseg-core --test probe -- --ignored --nocapture

use std::time::Instant;

use cineseg_core::eval::kfold_split;
use cineseg_core::phantom::{generate_dataset, PhantomConfig};
use cineseg_core::train::{train_fold, TrainConfig};

#[test]
#[ignore]
fn probe_one_fold() {
    let phantom = PhantomConfig::default();
    let t0 = Instant::now();
    let cores = generate_dataset(&phantom).unwrap();
    println!("generated {} cores in {:.1}s", cores.len(), t0.elapsed().as_secs_f64());

    let config = TrainConfig {
        epochs: 12,
        seed: 1,
        ..TrainConfig::default()
    };
    let patients: Vec<u64> = (0..phantom.patients as u64).collect();
    let folds = kfold_split(&patients, config.folds, config.seed).unwrap();
    let t1 = Instant::now();
    let run = train_fold(&cores, &folds, 0, &config).unwrap();
    println!("fold 0 trained in {:.1}s", t1.elapsed().as_secs_f64());
    for e in &run.history.epochs {
        println!(
            "epoch {:2}  loss {:.5}  val_auroc {:?}  {:.1}s",
            e.epoch, e.train_loss, e.val_auroc, e.wall_secs
        );
    }
}
