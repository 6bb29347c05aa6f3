//! Kernels and losses against 50-digit references from `fixtures/gen_reference.py`.

use cpr::losses::cls_loss;
use cpr::numerics::{softmax_rows, Tensor2};
use cpr::prototypes::zero_shot_predict;
use serde::Deserialize;

#[derive(Deserialize)]
struct Reference {
    softmax: Vec<SoftmaxCase>,
    zero_shot: ZeroShot,
    cls_loss: ClsLoss,
}

#[derive(Deserialize)]
struct SoftmaxCase {
    row: Vec<f64>,
    tau: f64,
    probs: Vec<f64>,
}

#[derive(Deserialize)]
struct ZeroShot {
    w: Vec<Vec<f64>>,
    tau: f64,
    cases: Vec<ZeroShotCase>,
}

#[derive(Deserialize)]
struct ZeroShotCase {
    z: Vec<f64>,
    probs: Vec<f64>,
}

#[derive(Deserialize)]
struct ClsLoss {
    tau: f64,
    cases: Vec<ClsCase>,
}

#[derive(Deserialize)]
struct ClsCase {
    z: Vec<f64>,
    p: Vec<Vec<f64>>,
    label: usize,
    loss: f64,
}

fn reference() -> Reference {
    let text = include_str!("fixtures/reference.json");
    serde_json::from_str(text).expect("reference fixture parses")
}

#[test]
fn softmax_matches_high_precision() {
    let r = reference();
    assert_eq!(r.softmax.len(), 100);
    for (i, case) in r.softmax.iter().enumerate() {
        let got = softmax_rows(&Tensor2::row_vector(&case.row), case.tau).unwrap();
        for (g, want) in got.row(0).iter().zip(&case.probs) {
            assert!((g - want).abs() <= 1e-12, "row {i}: {g} vs {want}");
        }
    }
}

#[test]
fn zero_shot_probabilities_match_high_precision() {
    let r = reference();
    let w = Tensor2::from_rows(&r.zero_shot.w).unwrap();
    assert_eq!(w.rows(), 5);
    for (i, case) in r.zero_shot.cases.iter().enumerate() {
        let got = zero_shot_predict(&case.z, &w, r.zero_shot.tau).unwrap();
        for (g, want) in got.iter().zip(&case.probs) {
            assert!((g - want).abs() <= 1e-10, "case {i}: {g} vs {want}");
        }
    }
}

#[test]
fn cls_loss_matches_high_precision() {
    let r = reference();
    for (i, case) in r.cls_loss.cases.iter().enumerate() {
        let p = Tensor2::from_rows(&case.p).unwrap();
        let got = cls_loss(&case.z, &p, case.label, r.cls_loss.tau).unwrap();
        assert!((got - case.loss).abs() <= 1e-10, "case {i}: {got} vs {}", case.loss);
    }
}
