//! Sequential vs rayon execution of the three data-parallel hot paths:
//! demonstration collection, the generator's per-sequence gradients, and
//! closed-loop evaluation. Build with `--no-default-features` to see the
//! fallback path (where `Parallel` degrades to sequential).

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nmir_core::dataset::collect_dataset;
use nmir_core::env::EnvSpec;
use nmir_core::generator::{GeneratorDims, GeneratorHyper, GeneratorModel, GeneratorTrainer};
use nmir_core::policy::PolicyParams;
use nmir_core::runtime::{eval_modes, EvalConfig, ScanMode};
use nmir_core::scan::ScanConfig;
use nmir_core::Exec;

const MODES: [Exec; 2] = [Exec::Sequential, Exec::Parallel];

fn collection(c: &mut Criterion) {
    let spec = EnvSpec::t_maze(5);
    let cfg = ScanConfig::default();
    let mut g = c.benchmark_group("collect_64_episodes");
    for exec in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| collect_dataset(&spec, 64, &cfg, black_box(1), exec).unwrap())
        });
    }
    g.finish();
}

fn generator_step(c: &mut Criterion) {
    let spec = EnvSpec::t_maze(5);
    let cfg = ScanConfig::new(4, 4, 3, 8).unwrap();
    let ds = collect_dataset(&spec, 16, &cfg, 1, Exec::Sequential).unwrap();
    let mut g = c.benchmark_group("generator_step_batch16");
    g.sample_size(20);
    for exec in MODES {
        let hyper = GeneratorHyper {
            batch_size: 16,
            exec,
            dims: GeneratorDims {
                hidden: 32,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut trainer = GeneratorTrainer::new(&ds, hyper).unwrap();
        g.bench_function(BenchmarkId::from_parameter(format!("{exec:?}")), |b| {
            b.iter(|| trainer.step().unwrap())
        });
    }
    g.finish();
}

fn evaluation(c: &mut Criterion) {
    let spec = EnvSpec::t_maze(5);
    let cfg = ScanConfig::new(4, 4, 3, 8).unwrap();
    let dims = GeneratorDims {
        hidden: 32,
        ..Default::default()
    };
    let gen = GeneratorModel::new(cfg, spec.obs_dim(), dims, 0).unwrap();
    let pol = PolicyParams::new(cfg, spec.obs_dim(), spec.n_actions(), 64, 0).unwrap();
    let mut g = c.benchmark_group("eval_generated_32_episodes");
    g.sample_size(10);
    for exec in MODES {
        let ec = EvalConfig {
            episodes: 32,
            max_steps: 12,
            exec,
            ..Default::default()
        };
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &ec, |b, ec| {
            b.iter(|| eval_modes(Some(&gen), &pol, &spec, ec, &[ScanMode::Generated]).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, collection, generator_step, evaluation);
criterion_main!(benches);
