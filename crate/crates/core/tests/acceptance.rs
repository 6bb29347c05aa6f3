//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so that criteria execute one after another
//! and their wall-clock budgets are measured without interference. The
//! process fails when any criterion fails for a reason not listed in
//! [`KNOWN_TABLE_DEFECTS`]; set `CPR_ACCEPTANCE_STRICT=1` to fail on those too.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use cpr::benchmark::{self, Benchmark};
use cpr::coadapter::Variant;
use cpr::eval::{harmonic_mean, prepare_seed, run_protocol, run_seed, TextMode};
use cpr::losses::{cls_loss, consistency_loss, total_loss, AnchorEmbeddings, LossWeights};
use cpr::model::{zero_shot_predictions, Batch};
use cpr::nnr::{knn, rectify_raw, UnlabeledPool};
use cpr::numerics::kernels::normalize_rows;
use cpr::numerics::{perturb_trainable, FdOptions, Graph, Tensor2};
use cpr::trainer::CheckProblem;
use cpr::Exec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRADCHECK_BUDGET: Duration = Duration::from_secs(30);
const END_TO_END_BUDGET: Duration = Duration::from_secs(60);
const MIN_GAIN_POINTS: f64 = 5.0;
const H_TOLERANCE: f64 = 0.01;
const CONSISTENCY_SAMPLES: usize = 10_000;
const LOG_C_TOLERANCE: f64 = 1e-12;

/// Published rows whose H disagrees with their own Base/New by more than the
/// tolerance: (dataset, method).
const KNOWN_TABLE_DEFECTS: [(&str, &str); 1] = [("FGVCAircraft", "CoOp")];

struct Outcome {
    passed: bool,
    known: bool,
    detail: String,
}

impl Outcome {
    fn check(passed: bool, detail: String) -> Self {
        Self {
            passed,
            known: false,
            detail,
        }
    }
}

type Criterion = (&'static str, fn() -> Result<Outcome, String>);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn unit_rows(rows: usize, cols: usize, seed: u64) -> Tensor2 {
    normalize_rows(&Tensor2::randn(rows, cols, 1.0, &mut rng(seed))).unwrap()
}

fn gradient_fidelity() -> Result<Outcome, String> {
    let start = Instant::now();
    let problem = CheckProblem::default();
    let report = problem.run(FdOptions::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let names: Vec<&str> = report.tensors.iter().map(|t| t.name.as_str()).collect();
    let covered = names.contains(&"prompt.ctx")
        && ["visual", "textual"].iter().all(|b| {
            ["fq", "fk", "fv", "ffn0.w1", "ffn1.w2", "norm.gamma", "norm.beta"]
                .iter()
                .all(|t| names.contains(&format!("coadapter.{b}.{t}").as_str()))
        });
    Ok(Outcome::check(
        report.passed() && covered && elapsed < GRADCHECK_BUDGET,
        format!(
            "{} tensors at d={}, C={}, M={}, h={}; max rel error {:.2e} (limit {:.0e}); {:.1}s (limit {}s)",
            report.tensors.len(),
            problem.dim,
            problem.classes,
            problem.context_len,
            problem.hidden,
            report.worst(),
            report.threshold,
            elapsed.as_secs_f64(),
            GRADCHECK_BUDGET.as_secs()
        ),
    ))
}

fn zero_shot_equivalence() -> Result<Outcome, String> {
    let bench = Benchmark::new(1).map_err(|e| e.to_string())?;
    let queries = unit_rows(1000, benchmark::DIM, 99);
    let classes: Vec<usize> = (0..benchmark::CLASSES).collect();
    let mut mismatches = 0;
    for text in [TextMode::Frozen, TextMode::Prompt { context_len: 16 }] {
        let mut cfg = benchmark::config();
        cfg.text = text;
        let (model, _) = prepare_seed(&cfg, &bench.data(), 1).map_err(|e| e.to_string())?;
        let got = model
            .predict(&queries, &classes, None, Exec::available())
            .map_err(|e| e.to_string())?;
        let want = zero_shot_predictions(&queries, &model.text_w(&classes).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        mismatches += got.iter().zip(&want).filter(|(a, b)| a != b).count();
    }
    Ok(Outcome::check(
        mismatches == 0,
        format!("{mismatches} argmax mismatches over 1000 queries, frozen and prompt text"),
    ))
}

fn nnr_identities() -> Result<Outcome, String> {
    let pool_rows = unit_rows(1000, 32, 5);
    let pool = UnlabeledPool::new(pool_rows.clone(), None).map_err(|e| e.to_string())?;
    let queries = unit_rows(50, 32, 6);
    let mut knn_mismatch = 0;
    let mut identity_fail = 0;
    for (qi, q) in queries.iter_rows().enumerate() {
        let mut all: Vec<(f64, usize)> = pool_rows
            .iter_rows()
            .enumerate()
            .map(|(i, r)| (r.iter().zip(q).map(|(a, b)| a * b).sum(), i))
            .collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let brute: Vec<usize> = all.iter().take(5).map(|&(_, i)| i).collect();
        let got = knn(q, &pool, 5, 0.0).map_err(|e| e.to_string())?;
        knn_mismatch += usize::from(got != brute);

        let proto = Tensor2::randn(1, 32, 1.0 + qi as f64, &mut rng(qi as u64)).into_vec();
        let neighbors: Vec<&[f64]> = got.iter().map(|&i| pool.row(i)).collect();
        let unchanged = rectify_raw(&proto, &neighbors, 1.0).map_err(|e| e.to_string())? == proto;
        let nearest = knn(&proto, &pool, 1, 0.0).map_err(|e| e.to_string())?[0];
        let replaced = rectify_raw(&proto, &[pool.row(nearest)], 0.0).map_err(|e| e.to_string())? == pool.row(nearest);
        identity_fail += usize::from(!(unchanged && replaced));
    }
    Ok(Outcome::check(
        knn_mismatch == 0 && identity_fail == 0,
        format!(
            "kNN vs full sort: {knn_mismatch}/50 queries differ over 1000 points; alpha=1 and alpha=0,k=1 identities: {identity_fail}/50 fail"
        ),
    ))
}

fn harmonic_means() -> Result<Outcome, String> {
    let table = include_str!("fixtures/base_to_new_table.csv");
    let mut total = 0;
    let mut bad = Vec::new();
    for line in table.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let num = |i: usize| f[i].parse::<f64>().map_err(|e| format!("{line}: {e}"));
        let (base, new, published) = (num(2)?, num(3)?, num(4)?);
        let h = harmonic_mean(base, new).map_err(|e| e.to_string())?;
        total += 1;
        if (h - published).abs() > H_TOLERANCE + 1e-9 {
            bad.push((f[0].to_string(), f[1].to_string(), base, new, h, published));
        }
    }
    let known = !bad.is_empty()
        && bad
            .iter()
            .all(|(d, m, ..)| KNOWN_TABLE_DEFECTS.contains(&(d.as_str(), m.as_str())));
    let listing: Vec<String> = bad
        .iter()
        .map(|(d, m, b, n, h, p)| format!("{d}/{m} {b:.2}/{n:.2} -> {h:.3} vs published {p:.2}"))
        .collect();
    Ok(Outcome {
        passed: total == 84 && bad.is_empty(),
        known: total == 84 && known,
        detail: format!(
            "{}/{total} entries within ±{H_TOLERANCE}{}",
            total - bad.len(),
            if listing.is_empty() {
                String::new()
            } else {
                format!("; off: {}", listing.join(", "))
            }
        ),
    })
}

fn loss_identities() -> Result<Outcome, String> {
    let mut r = rng(17);
    let mut cons_out = 0;
    for _ in 0..CONSISTENCY_SAMPLES {
        let c = r.random_range(1..8);
        let d = r.random_range(2..10);
        let p = Tensor2::randn(c, d, r.random_range(0.01..10.0), &mut r);
        let g = AnchorEmbeddings::new(&Tensor2::randn(c, d, 1.0, &mut r)).map_err(|e| e.to_string())?;
        let l = consistency_loss(&p, &g).map_err(|e| e.to_string())?;
        cons_out += usize::from(!(0.0..=2.0).contains(&l));
    }

    let bench = Benchmark::new(1).map_err(|e| e.to_string())?;
    let (mut model, data) = prepare_seed(&benchmark::config(), &bench.data(), 1).map_err(|e| e.to_string())?;
    perturb_trainable(&mut model.store, 0.1, 3);
    let idx: Vec<usize> = (0..data.features.rows()).step_by(7).collect();
    let batch = Batch {
        features: data.features.select_rows(&idx),
        labels: idx.iter().map(|&i| data.labels[i]).collect(),
        classes: &data.classes,
    };
    let weights = LossWeights {
        lambda: 0.0,
        tau: model.tau(),
    };
    let mut g = Graph::new();
    let nodes = model
        .arch
        .batch_graph(&mut g, &model.store, &batch, &weights, None)
        .map_err(|e| e.to_string())?;
    let graph_exact = g.scalar(nodes.total) == g.scalar(nodes.cls) && g.scalar(nodes.cons) > 0.0;
    let scalar_exact = (0..1000).all(|_| {
        let (cls, cons) = (r.random_range(0.0..50.0), r.random_range(0.0..2.0));
        total_loss(cls, cons, 0.0) == cls
    });

    let mut worst_log_c: f64 = 0.0;
    for c in 1..=50 {
        let z = Tensor2::randn(1, 8, 1.0, &mut r).into_vec();
        let p = Tensor2::from_rows(&vec![z.clone(); c]).map_err(|e| e.to_string())?;
        let l = cls_loss(&z, &p, c / 2, 0.01).map_err(|e| e.to_string())?;
        worst_log_c = worst_log_c.max((l - (c as f64).ln()).abs());
    }
    Ok(Outcome::check(
        cons_out == 0 && graph_exact && scalar_exact && worst_log_c <= LOG_C_TOLERANCE,
        format!(
            "lambda=0 total==cls exact: {}; consistency outside [0,2]: {cons_out}/{CONSISTENCY_SAMPLES}; |equal-logit cls - ln C| max {worst_log_c:.1e} (limit {LOG_C_TOLERANCE:.0e})",
            graph_exact && scalar_exact
        ),
    ))
}

fn synthetic_end_to_end() -> Result<Outcome, String> {
    let start = Instant::now();
    let bench = Benchmark::new(1).map_err(|e| e.to_string())?;
    let mut cfg = benchmark::config();
    let mut zero_shot = 0.0;
    let mut acc = Vec::new();
    for v in Variant::ALL {
        cfg.model.variant = v;
        let report = run_protocol(&cfg, &bench.data(), Exec::available()).map_err(|e| e.to_string())?;
        zero_shot = report.zero_shot.accuracy_base;
        acc.push((v, report.cpr.accuracy_base, report.cpr_nnr.accuracy_base));
    }
    let elapsed = start.elapsed();
    let dual = acc[0].2;
    let gain = dual - zero_shot;
    let ordered = acc[1..].iter().all(|&(_, _, a)| dual >= a);
    let listing: Vec<String> = acc
        .iter()
        .map(|(v, plain, nnr)| format!("{v} {plain:.2}/{nnr:.2}"))
        .collect();
    Ok(Outcome::check(
        gain >= MIN_GAIN_POINTS && ordered && elapsed < END_TO_END_BUDGET,
        format!(
            "zero-shot {zero_shot:.2}; CPR without/with NNR: {}; dual gain {gain:+.2} (min +{MIN_GAIN_POINTS}); dual >= singles: {ordered}; {:.1}s (limit {}s)",
            listing.join(", "),
            elapsed.as_secs_f64(),
            END_TO_END_BUDGET.as_secs()
        ),
    ))
}

fn determinism() -> Result<Outcome, String> {
    let bench = Benchmark::new(1).map_err(|e| e.to_string())?;
    let cfg = benchmark::config();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut artifacts = Vec::new();
    for (i, exec) in [Exec::available(), Exec::available(), Exec::Sequential]
        .into_iter()
        .enumerate()
    {
        let (model, run) = run_seed(&cfg, &bench.data(), 3, exec).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("run{i}.cpr1"));
        model.save(&path).map_err(|e| e.to_string())?;
        let ckpt = std::fs::read(&path).map_err(|e| e.to_string())?;
        let trace = serde_json::to_vec(&run.trace).map_err(|e| e.to_string())?;
        let metrics = serde_json::to_vec(&(&run.cpr, &run.cpr_nnr)).map_err(|e| e.to_string())?;
        artifacts.push((ckpt, trace, metrics));
    }
    let same = |a: usize, b: usize| artifacts[a] == artifacts[b];
    Ok(Outcome::check(
        same(0, 1) && same(0, 2),
        format!(
            "checkpoint, loss trace and metrics bit-identical across repeated runs: {}; sequential matches parallel: {}",
            same(0, 1),
            same(0, 2)
        ),
    ))
}

fn main() -> ExitCode {
    let strict = std::env::var("CPR_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let criteria: [Criterion; 7] = [
        ("gradient fidelity", gradient_fidelity),
        ("zero-shot equivalence at initialization", zero_shot_equivalence),
        ("NNR identities and exact kNN", nnr_identities),
        ("harmonic-mean reproduction", harmonic_means),
        ("loss identities", loss_identities),
        ("synthetic end-to-end", synthetic_end_to_end),
        ("determinism", determinism),
    ];
    let (mut passed, mut known, mut fatal) = (0, 0, 0);
    for (name, run) in criteria {
        let outcome = run().unwrap_or_else(|e| Outcome::check(false, format!("error: {e}")));
        let tag = if outcome.passed { "PASS" } else { "FAIL" };
        let note = if !outcome.passed && outcome.known {
            " [known defect in the published table]"
        } else {
            ""
        };
        println!("{tag} {name}: {}{note}", outcome.detail);
        match (outcome.passed, outcome.known) {
            (true, _) => passed += 1,
            (false, true) if !strict => known += 1,
            _ => fatal += 1,
        }
    }
    println!("acceptance: {passed} passed, {} failed ({known} known)", 7 - passed);
    if fatal == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
