use std::path::Path;

use nmir_core::archive::{
    decode_rollout, encode_rollout, load_dataset, load_generator, load_policy, save_dataset, save_generator,
    save_policy,
};
use nmir_core::dataset::{collect_dataset, Dataset};
use nmir_core::env::EnvSpec;
use nmir_core::generator::{GeneratorDims, GeneratorHyper, GeneratorTrainer};
use nmir_core::policy::{PolicyHyper, PolicyTrainer};
use nmir_core::runtime::{rollout, RolloutConfig, ScanMode};
use nmir_core::scan::ScanConfig;
use nmir_core::Exec;

const CFG: ScanConfig = ScanConfig {
    height: 4,
    width: 4,
    channels: 3,
    levels: 8,
};

fn dataset(seed: u64) -> Dataset {
    collect_dataset(&EnvSpec::t_maze(3), 10, &CFG, seed, Exec::Parallel).unwrap()
}

fn bits(store: &nmir_core::numerics::ParamStore) -> Vec<u64> {
    store.values().iter().flat_map(|t| t.data().iter().map(|x| x.to_bits())).collect()
}

#[test]
fn same_seed_gives_identical_dataset_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.nmir"), dir.path().join("b.nmir"));
    save_dataset(&dataset(5), &a).unwrap();
    save_dataset(&collect_dataset(&EnvSpec::t_maze(3), 10, &CFG, 5, Exec::Sequential).unwrap(), &b).unwrap();
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    let back = load_dataset(&a).unwrap();
    assert_eq!(back, dataset(5));
    save_dataset(&back, &b).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
}

fn gen_hyper() -> GeneratorHyper {
    GeneratorHyper {
        dims: GeneratorDims {
            embed: 4,
            hidden: 8,
            context: 4,
            encoder_hidden: 8,
        },
        batch_size: 8,
        heldout_fraction: 0.0,
        seed: 9,
        ..Default::default()
    }
}

#[test]
fn generator_resume_from_file_is_bit_exact() {
    let ds = dataset(1);
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("gen.nmir");

    let mut straight = GeneratorTrainer::new(&ds, gen_hyper()).unwrap();
    for _ in 0..10 {
        straight.step().unwrap();
    }

    let mut first = GeneratorTrainer::new(&ds, gen_hyper()).unwrap();
    for _ in 0..5 {
        first.step().unwrap();
    }
    save_generator(&ckpt, &first.model, Some(&first.opt), 9).unwrap();
    let (model, opt) = load_generator(&ckpt).unwrap();
    assert_eq!(bits(model.params()), bits(first.model.params()));
    let mut second = GeneratorTrainer::resume(&ds, gen_hyper(), model, opt.unwrap()).unwrap();
    for _ in 0..5 {
        second.step().unwrap();
    }
    assert_eq!(bits(second.model.params()), bits(straight.model.params()));
    assert_eq!(second.step().unwrap().to_bits(), straight.step().unwrap().to_bits());

    // Re-saving the same state reproduces the same bytes.
    let again = dir.path().join("gen2.nmir");
    save_generator(&ckpt, &second.model, Some(&second.opt), 9).unwrap();
    save_generator(&again, &straight.model, Some(&straight.opt), 9).unwrap();
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn policy_resume_from_file_is_bit_exact() {
    let ds = dataset(2);
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("pol.nmir");
    let hyper = PolicyHyper {
        hidden: 16,
        batch_size: 8,
        heldout_fraction: 0.0,
        ..Default::default()
    };

    let mut straight = PolicyTrainer::new(&ds, hyper).unwrap();
    for _ in 0..10 {
        straight.step().unwrap();
    }
    let mut first = PolicyTrainer::new(&ds, hyper).unwrap();
    for _ in 0..5 {
        first.step().unwrap();
    }
    save_policy(&ckpt, &first.policy, Some(&first.opt), 0).unwrap();
    let (policy, opt) = load_policy(&ckpt).unwrap();
    let mut second = PolicyTrainer::resume(&ds, hyper, policy, opt.unwrap()).unwrap();
    for _ in 0..5 {
        second.step().unwrap();
    }
    assert_eq!(bits(second.policy.params()), bits(straight.policy.params()));
    assert_eq!(second.step().unwrap().to_bits(), straight.step().unwrap().to_bits());
}

fn trace_bytes(dir: &Path, seed: u64) -> Vec<u8> {
    let ds = dataset(3);
    let mut gen = GeneratorTrainer::new(&ds, gen_hyper()).unwrap();
    gen.run(1).unwrap();
    let hyper = PolicyHyper {
        hidden: 16,
        ..Default::default()
    };
    let mut pol = PolicyTrainer::new(&ds, hyper).unwrap();
    pol.run(2).unwrap();
    // Go through files so the trace reflects reloaded models.
    let (g, p) = (dir.join("g.nmir"), dir.join("p.nmir"));
    save_generator(&g, &gen.model, None, 0).unwrap();
    save_policy(&p, &pol.policy, None, 0).unwrap();
    let gen = load_generator(&g).unwrap().0;
    let pol = load_policy(&p).unwrap().0;
    let mut cfg = RolloutConfig::new(ScanMode::Generated, seed);
    cfg.max_steps = 12;
    let r = rollout(Some(&gen), &pol, &EnvSpec::t_maze(3), &cfg).unwrap();
    let bytes = encode_rollout(&r, &CFG, seed).unwrap();
    assert_eq!(decode_rollout(&bytes).unwrap().1, r);
    bytes
}

#[test]
fn same_seed_gives_identical_rollout_traces() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(trace_bytes(dir.path(), 4), trace_bytes(dir.path(), 4));
}
