use cpr::dataio::{
    load_emb, read_emb, sample_episode, write_emb, EmbeddingSet, SplitSpec, SynthGenerator, SynthParams,
};
use cpr::model::zero_shot_predictions;
use cpr::numerics::Tensor2;
use cpr::CprError;
use proptest::prelude::*;
use sha2::{Digest, Sha256};

const THREE_SHA256: &str = "649fbf69d44178ab15ddc8f4587877039db9d8ba5a7e74869ef3c0438e9f4424";
const THREE_PATH: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/three.emb");

fn benchmark_generator() -> SynthGenerator {
    SynthGenerator::new(SynthParams {
        classes: 10,
        dim: 64,
        shift: 1.0,
        spread: 0.3,
        seed: 1,
    })
    .unwrap()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn three_record_fixture_parses() {
    let bytes = std::fs::read(THREE_PATH).unwrap();
    assert_eq!(hex(&Sha256::digest(&bytes)), THREE_SHA256);
    let set = read_emb(THREE_PATH).unwrap();
    assert_eq!((set.len(), set.dim()), (3, 4));
    assert_eq!(set.labels(), Some(&[0, 1, 1][..]));
    assert_eq!(set.class_names(), ["cat", "dog"]);
    assert_eq!(set.feature(2), [3.0, 0.0, -4.0, 0.0]);
    assert_eq!(set.to_bytes(), bytes);
}

#[test]
fn loader_normalizes_fixture_rows() {
    let set = load_emb(THREE_PATH).unwrap();
    assert!(set.is_normalized());
    let want = [
        [1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
        [0.6, 0.0, -0.8, 0.0],
    ];
    for (i, row) in want.iter().enumerate() {
        for (g, w) in set.feature(i).iter().zip(row) {
            assert!((g - w).abs() < 1e-15);
        }
    }
}

#[test]
fn out_of_range_label_names_record_and_offset() {
    let f = Tensor2::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let mut bytes = EmbeddingSet::new(f, Some(vec![0, 2]), names).unwrap().to_bytes();
    // 21-byte header, 2x2 f32 features, then labels.
    let second_label = 21 + 16 + 4;
    bytes[second_label..second_label + 4].copy_from_slice(&7u32.to_le_bytes());
    match EmbeddingSet::from_bytes(&bytes) {
        Err(CprError::Format { offset, message }) => {
            assert_eq!(offset, second_label as u64);
            assert!(message.contains("record 1"), "{message}");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn truncated_and_bad_magic_files_are_rejected() {
    let bytes = std::fs::read(THREE_PATH).unwrap();
    for cut in [3, 10, 21, 40, bytes.len() - 1] {
        assert!(
            matches!(EmbeddingSet::from_bytes(&bytes[..cut]), Err(CprError::Format { .. })),
            "cut {cut}"
        );
    }
    let mut bad = bytes.clone();
    bad[3] = b'2';
    assert!(matches!(
        EmbeddingSet::from_bytes(&bad),
        Err(CprError::Format { offset: 0, .. })
    ));
}

#[test]
fn file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let set = benchmark_generator().sample(3, 0).unwrap();
    let path = dir.path().join("s.emb");
    write_emb(&path, &set).unwrap();
    let back = read_emb(&path).unwrap();
    assert!(back.features().bit_eq(set.features()));
    assert_eq!(back.labels(), set.labels());
}

#[test]
fn true_means_classify_the_benchmark_well() {
    let gen = benchmark_generator();
    let q = gen.sample(100, 1).unwrap();
    let labels = q.labels().unwrap();
    let correct = |w: &Tensor2| {
        let p = zero_shot_predictions(q.features(), w).unwrap();
        p.iter().zip(labels).filter(|(a, b)| a == b).count()
    };
    assert_eq!(q.len(), 1000);
    assert_eq!(correct(gen.means()), 951);
    assert_eq!(correct(gen.text().unwrap().features()), 730);
}

#[test]
fn synthetic_generation_is_deterministic() {
    let a = benchmark_generator().sample(5, 0).unwrap();
    let b = benchmark_generator().sample(5, 0).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    let c = benchmark_generator().sample(5, 1).unwrap();
    assert_ne!(a.to_bytes(), c.to_bytes());
}

#[test]
fn zero_spread_samples_equal_their_mean() {
    let gen = SynthGenerator::new(SynthParams {
        classes: 3,
        dim: 8,
        shift: 0.5,
        spread: 0.0,
        seed: 4,
    })
    .unwrap();
    let s = gen.sample(4, 0).unwrap();
    for i in 0..s.len() {
        let mean = gen.means().row(s.label(i).unwrap());
        for (x, m) in s.feature(i).iter().zip(mean) {
            assert_eq!(*x, f64::from(*m as f32));
        }
    }
}

#[test]
fn negative_spread_is_a_config_error() {
    let err = SynthGenerator::new(SynthParams {
        classes: 3,
        dim: 8,
        shift: 0.0,
        spread: -1.0,
        seed: 1,
    })
    .unwrap_err();
    assert!(err.is_usage(), "{err}");
}

#[test]
fn episodes_have_exact_counts_and_respect_splits() {
    let set = benchmark_generator().sample(20, 0).unwrap();
    let split = SplitSpec::halves(10).unwrap();
    for seed in 0..10 {
        let ep = sample_episode(&set, Some(&split), 4, seed).unwrap();
        assert_eq!(ep.classes, split.base());
        for (j, idx) in ep.support.iter().enumerate() {
            assert_eq!(idx.len(), 4);
            assert!(idx.iter().all(|&i| set.label(i) == Some(ep.classes[j])));
            assert!(idx.iter().all(|i| !ep.query.contains(i)));
        }
        assert_eq!(ep, sample_episode(&set, Some(&split), 4, seed).unwrap());
    }
    let one = sample_episode(&set.clone(), None, 1, 3).unwrap();
    assert_eq!(one.labeled_support().len(), 10);
}

#[test]
fn too_few_samples_names_the_class() {
    let set = benchmark_generator().sample(10, 0).unwrap();
    match sample_episode(&set, None, 16, 1) {
        Err(CprError::InsufficientData(msg)) => assert!(msg.contains("class_000"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bytes_round_trip(
        n in 1usize..6,
        d in 1usize..5,
        c in 1usize..4,
        seed in any::<u64>(),
        with_labels in any::<bool>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * d).map(|_| f64::from(rng.random_range(-4.0f32..4.0))).collect();
        let labels = with_labels.then(|| (0..n).map(|_| rng.random_range(0..c)).collect());
        let names = (0..c).map(|i| format!("k{i}é")).collect();
        let set = EmbeddingSet::new(Tensor2::from_vec(n, d, data).unwrap(), labels, names).unwrap();
        let bytes = set.to_bytes();
        let back = EmbeddingSet::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert!(back.features().bit_eq(set.features()));
    }

    #[test]
    fn normalization_is_idempotent(seed in any::<u64>()) {
        let gen = SynthGenerator::new(SynthParams { classes: 3, dim: 6, shift: 0.2, spread: 2.0, seed }).unwrap();
        let once = gen.sample(2, 0).unwrap().normalized().unwrap();
        let twice = once.normalized().unwrap();
        for (a, b) in once.features().data().iter().zip(twice.features().data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
