use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use selfdistill::autodiff::Tape;
use selfdistill::config::{ClassWeighting, TrainConfig};
use selfdistill::data::{generate_dataset, GeneratorConfig, Split};
use selfdistill::engine::{train_member, MemberJob, PreparedData, Targets};
use selfdistill::model::{ensemble_predict, ArchConfig, Mode, MultitaskModel};
use selfdistill::uncertainty::decompose_uncertainty;

fn tape_step(c: &mut Criterion) {
    let ds = generate_dataset(&GeneratorConfig::small(600), 1).unwrap();
    let model = MultitaskModel::init(&ArchConfig::new(ds.dim), 0).unwrap();
    let positions: Vec<usize> = ds.indices(Split::Train).into_iter().take(48).collect();
    let x = ds.features(&positions).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    c.bench_function("forward_backward_batch48", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let params = model.register(&mut tape);
            let xv = tape.constant(x.clone());
            let out = model
                .forward_on_tape(&mut tape, &params, xv, &mut Mode::Train(&mut rng))
                .unwrap();
            let loss = tape.mean(out.expr_probs).unwrap();
            black_box(tape.backward(loss).unwrap());
        })
    });
}

fn training_epoch(c: &mut Criterion) {
    let ds = generate_dataset(&GeneratorConfig::small(600), 2).unwrap();
    let data = PreparedData::new(&ds, ClassWeighting::Computed).unwrap();
    let hyper = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let model = MultitaskModel::init(&ArchConfig::new(ds.dim), 0).unwrap();
    let job = MemberJob {
        generation: 0,
        member: 0,
        seed: 7,
    };
    let mut group = c.benchmark_group("train_member");
    group.sample_size(20);
    group.bench_function("one_epoch_n600", |b| {
        b.iter_batched(
            || model.clone(),
            |m| black_box(train_member(m, &data, Targets::Hard, &hyper, job).unwrap()),
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let ds = generate_dataset(&GeneratorConfig::small(3000), 3).unwrap();
    let arch = ArchConfig::new(ds.dim);
    let members: Vec<MultitaskModel> = (0..5).map(|s| MultitaskModel::init(&arch, s).unwrap()).collect();
    let val = ds.features(&ds.indices(Split::Val)).unwrap();
    c.bench_function("ensemble_predict_t5_val600", |b| {
        b.iter(|| black_box(ensemble_predict(&members, &val).unwrap()))
    });

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows: Vec<Vec<f64>> = (0..5)
        .map(|_| {
            let raw: Vec<f64> = (0..7).map(|_| rng.gen::<f64>() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
        .collect();
    c.bench_function("decompose_t5_k7", |b| {
        b.iter(|| black_box(decompose_uncertainty(&rows).unwrap()))
    });
}

criterion_group!(benches, tape_step, training_epoch, evaluation);
criterion_main!(benches);
