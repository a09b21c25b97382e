//! Criterion benchmarks over the pipeline's hot paths: network forward and
//! backward passes, the strong augmentation chain, phantom generation and
//! the AUROC reduction.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use cineseg_core::augment::{make_pair, AugmentConfig, StrongSource};
use cineseg_core::eval::{auroc, ScoredCore};
use cineseg_core::grid::Mask;
use cineseg_core::model::{SegNet, SegNetConfig};
use cineseg_core::phantom::{generate_core, CoreRecord, PhantomConfig};
use cineseg_core::rng::StreamRng;
use cineseg_core::tape::Tape;
use cineseg_core::train::{loss_imse, region_mask, ImseForm};

fn bench_forward_backward(c: &mut Criterion) {
    let net = SegNet::new(SegNetConfig::default()).unwrap();
    let phantom = PhantomConfig::default();
    let (cine, _) = generate_core(&phantom, 0, 0).unwrap();
    let frame = cine.frame_grid(0);
    let region = region_mask(&cine.needle, &cine.prostate).unwrap();

    c.bench_function("forward_96x96", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let reg = net.register(&mut tape);
            reg.forward(&mut tape, &frame).unwrap()
        })
    });

    c.bench_function("forward_backward_96x96", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let reg = net.register(&mut tape);
            let out = reg.forward(&mut tape, &frame).unwrap();
            let loss = loss_imse(&mut tape, out, &region, 0.4, ImseForm::Restricted).unwrap();
            tape.backward(loss).unwrap()
        })
    });
}

fn bench_augment(c: &mut Criterion) {
    let phantom = PhantomConfig::default();
    let (cine, _) = generate_core(&phantom, 0, 0).unwrap();
    let config = AugmentConfig::default();
    let mut seed = 0u64;
    c.bench_function("augment_pair_cine_96x96", |b| {
        b.iter(|| {
            seed = seed.wrapping_add(1);
            make_pair(&cine, &config, StrongSource::TemporalAverage, seed).unwrap()
        })
    });
}

fn bench_phantom(c: &mut Criterion) {
    let config = PhantomConfig::default();
    let mut core = 0usize;
    c.bench_function("generate_core_96x96x16", |b| {
        b.iter(|| {
            core = (core + 1) % config.cores_per_patient;
            generate_core(&config, 3, core).unwrap()
        })
    });
}

fn bench_auroc(c: &mut Criterion) {
    use cineseg_core::phantom::{Center, GradeBucket, Label};
    let mut rng = StreamRng::derive(1, &[1]);
    let scored: Vec<ScoredCore> = (0..10_000)
        .map(|i| {
            let cancer = rng.bernoulli(0.2);
            ScoredCore {
                record: CoreRecord {
                    patient_id: i,
                    center: Center::A,
                    core_id: i,
                    label: if cancer { Label::Cancer } else { Label::Benign },
                    involvement: if cancer { 0.5 } else { 0.0 },
                    grade_bucket: if cancer { GradeBucket::GS7 } else { GradeBucket::Benign },
                    path: String::new(),
                },
                score: rng.uniform(),
            }
        })
        .collect();
    c.bench_function("auroc_10k", |b| {
        b.iter_batched(|| scored.clone(), |s| auroc(&s).unwrap(), BatchSize::LargeInput)
    });
}

fn bench_masked_mean(c: &mut Criterion) {
    let mut rng = StreamRng::derive(2, &[2]);
    let vals: Vec<f64> = (0..96 * 96).map(|_| rng.uniform()).collect();
    let bits: Vec<bool> = (0..96 * 96).map(|_| rng.bernoulli(0.1)).collect();
    let mask = Mask::from_vec(96, 96, bits).unwrap();
    c.bench_function("masked_mean_96x96", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let x = tape.leaf_from(vec![96, 96], vals.clone());
            tape.masked_mean(x, &mask).unwrap()
        })
    });
}

criterion_group!(
    benches,
    bench_forward_backward,
    bench_augment,
    bench_phantom,
    bench_auroc,
    bench_masked_mean
);
criterion_main!(benches);
