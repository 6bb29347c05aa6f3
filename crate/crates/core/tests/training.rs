use cpr::benchmark::{self, Benchmark};
use cpr::checkpoint;
use cpr::eval::{prepare_seed, ProtocolConfig};
use cpr::model::{CprModel, ANCHORS, TEXT_W, VISUAL_BANK};
use cpr::trainer::{train, TrainConfig};
use cpr::{CprError, Exec};

/// Total loss at steps 1 and 50 of the benchmark run, per seed.
const LOSS_TRACE: [(u64, f64, f64); 5] = [
    (1, 1.2986266499779624, 1.0832796936303097),
    (2, 1.7976260967458155, 0.6394588006178733),
    (3, 1.5453113081465442, 0.2892874865926769),
    (4, 1.941564233105559, 0.17488223666292874),
    (5, 2.4837684907389646, 0.0544132604340021),
];

fn trained(
    cfg: &ProtocolConfig,
    bench: &Benchmark,
    seed: u64,
    exec: Exec,
) -> (CprModel, CprModel, cpr::trainer::TrainState) {
    let (mut model, data) = prepare_seed(cfg, &bench.data(), seed).unwrap();
    let init = model.clone();
    let state = train(&mut model, &data, &TrainConfig { seed, ..cfg.train }, exec).unwrap();
    (init, model, state)
}

fn rel_close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * b.abs().max(1.0)
}

#[test]
fn loss_falls_on_every_benchmark_seed() {
    let bench = Benchmark::new(1).unwrap();
    let cfg = benchmark::config();
    for (seed, first, fiftieth) in LOSS_TRACE {
        let (_, _, state) = trained(&cfg, &bench, seed, Exec::available());
        assert_eq!(state.trace.len(), 250);
        let (a, b) = (state.trace[0].total, state.trace[49].total);
        assert!(b < a, "seed {seed}: {a} -> {b}");
        assert!(rel_close(a, first) && rel_close(b, fiftieth), "seed {seed}: {a} {b}");
        let check = state.online_check.expect("online check ran");
        assert!(check.passed());
    }
}

#[test]
fn zero_epochs_leave_the_initialization() {
    let bench = Benchmark::new(1).unwrap();
    let mut cfg = benchmark::config();
    cfg.train.epochs = 0;
    let (init, model, state) = trained(&cfg, &bench, 2, Exec::Sequential);
    assert!(state.trace.is_empty());
    assert!(init.store.bit_eq(&model.store));
}

#[test]
fn sequential_and_parallel_training_agree_bitwise() {
    let bench = Benchmark::new(1).unwrap();
    let mut cfg = benchmark::config();
    cfg.train.epochs = 4;
    let (_, a, sa) = trained(&cfg, &bench, 3, Exec::Sequential);
    let (_, b, sb) = trained(&cfg, &bench, 3, Exec::Parallel);
    assert!(a.store.bit_eq(&b.store));
    assert_eq!(sa.trace, sb.trace);
}

#[test]
fn training_only_moves_trainable_tensors() {
    let bench = Benchmark::new(1).unwrap();
    let mut cfg = benchmark::config();
    cfg.train.epochs = 2;
    let (init, model, _) = trained(&cfg, &bench, 1, Exec::available());
    for name in [TEXT_W, VISUAL_BANK, ANCHORS] {
        let id = init.store.find(name).unwrap();
        assert!(init.store.get(id).bit_eq(model.store.get(id)), "{name} moved");
    }
    let moved = init
        .store
        .trainable_ids()
        .filter(|&id| !init.store.get(id).bit_eq(model.store.get(id)))
        .count();
    assert_eq!(moved, init.store.trainable_ids().count());
}

#[test]
fn checkpoint_file_round_trip_predicts_identically() {
    let bench = Benchmark::new(1).unwrap();
    let mut cfg = benchmark::config();
    cfg.train.epochs = 2;
    let (_, model, _) = trained(&cfg, &bench, 1, Exec::available());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.cpr1");
    model.save(&path).unwrap();
    let back = CprModel::load(&path).unwrap();
    assert_eq!(back.variant(), model.variant());
    assert_eq!(back.tau(), model.tau());
    let classes: Vec<usize> = (0..10).collect();
    let q = bench.test.features();
    assert_eq!(
        back.predict(q, &classes, None, Exec::Sequential).unwrap(),
        model.predict(q, &classes, None, Exec::Sequential).unwrap()
    );
    let bytes = std::fs::read(&path).unwrap();
    model.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
}

#[test]
fn corrupt_checkpoint_names_the_tensor() {
    let bench = Benchmark::new(1).unwrap();
    let (model, _) = prepare_seed(&benchmark::config(), &bench.data(), 1).unwrap();
    let bytes = checkpoint::encode(&checkpoint::from_store(&model.store));
    // Cut inside the payload of the second tensor.
    let first_len = 4 + 4 + TEXT_W.len() + 8 + 10 * 64 * 4;
    let cut = first_len + 4 + VISUAL_BANK.len() + 8 + 100;
    match checkpoint::decode(&bytes[..cut]) {
        Err(CprError::Checkpoint { tensor, .. }) => assert_eq!(tensor, VISUAL_BANK),
        other => panic!("unexpected {other:?}"),
    }
    let mut nan = bytes.clone();
    let at = 4 + 4 + TEXT_W.len() + 8;
    nan[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    match checkpoint::decode(&nan) {
        Err(CprError::Checkpoint { tensor, message }) => {
            assert_eq!(tensor, TEXT_W);
            assert!(message.contains("non-finite"));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn invalid_training_config_is_a_usage_error() {
    let bench = Benchmark::new(1).unwrap();
    let cfg = benchmark::config();
    let (mut model, data) = prepare_seed(&cfg, &bench.data(), 1).unwrap();
    let bad = TrainConfig {
        base_lr: -1.0,
        ..cfg.train
    };
    let err = train(&mut model, &data, &bad, Exec::Sequential).unwrap_err();
    assert!(err.is_usage(), "{err}");
}
