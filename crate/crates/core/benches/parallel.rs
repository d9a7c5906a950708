//! Sequential vs rayon execution of the per-example work.
//!
//! `cargo bench -p xlrc-core --bench parallel`. With `--no-default-features`
//! both variants run on one thread.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use xlrc_core::encoder::EncoderConfig;
use xlrc_core::exec::Exec;
use xlrc_core::fusion::FusionConfig;
use xlrc_core::gradcheck::{random_configs, run_suite};
use xlrc_core::model::ModelConfig;
use xlrc_core::synth::{generate, SynthConfig};
use xlrc_core::train::{init_model, parse_hparams, prepare_stage, StageData};

const EXECS: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn batch_gradients(c: &mut Criterion) {
    let corpus = generate(&SynthConfig::default());
    let stage = StageData {
        label: "train".into(),
        examples: corpus.train,
        hparams: parse_hparams("100,1,32,64").unwrap(),
        multilingual: true,
    };
    let base = ModelConfig::new(EncoderConfig::default(), FusionConfig::default());
    let mut model = init_model(std::slice::from_ref(&stage), &base, 0).unwrap();
    let batch = prepare_stage(&mut model, &stage.examples, &stage.hparams, true, 0).unwrap();

    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for (name, exec) in EXECS {
        group.bench_with_input(BenchmarkId::new(name, batch.len()), &exec, |b, &exec| {
            b.iter(|| model.batch_gradients(&batch, exec).unwrap())
        });
    }
    group.finish();
}

fn gradcheck_suite(c: &mut Criterion) {
    let configs = random_configs(8, 0);
    let mut group = c.benchmark_group("gradcheck_suite");
    group.sample_size(10);
    for (name, exec) in EXECS {
        group.bench_with_input(BenchmarkId::new(name, configs.len()), &exec, |b, &exec| {
            b.iter(|| run_suite(&configs, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, batch_gradients, gradcheck_suite);
criterion_main!(benches);
