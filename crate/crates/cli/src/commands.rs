use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cpr::dataio::{
    load_emb, write_emb, DatasetManifest, EmbeddingSet, SplitJson, SplitSpec, SynthGenerator, SynthParams,
};
use cpr::eval::{
    ablation_sweep, class_groups, evaluate_model, evaluate_zero_shot, run_seed, Accuracies, Mode, ProtocolConfig,
    ProtocolData, QuerySet, TextMode,
};
use cpr::model::CprModel;
use cpr::nnr::NnrConfig;
use cpr::numerics::{FdOptions, Tensor2};
use cpr::trainer::{CheckProblem, TraceEntry};
use cpr::{CprError, Exec};
use serde::Serialize;

use crate::run_manifest::RunManifest;
use crate::{AblateArgs, ConfigArgs, EvalArgs, GradcheckArgs, SynthArgs, TrainArgs, UsageError, VerifyArgs, Workdir};

pub const CHECKPOINT: &str = "checkpoint.cpr1";
pub const TRACE: &str = "trace.json";
pub const SUMMARY: &str = "summary.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_JSON: &str = "ablation.json";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Everything a dataset manifest points to, loaded and normalized.
struct Dataset {
    train: EmbeddingSet,
    test: EmbeddingSet,
    text: Tensor2,
    anchors: Option<Tensor2>,
    split: Option<SplitSpec>,
    /// Manifest plus every file it references, for digests.
    inputs: Vec<PathBuf>,
}

impl Dataset {
    fn load(manifest_path: &Path, anchors_override: Option<&Path>) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let text_path = manifest.text.clone().ok_or_else(|| {
            CprError::InsufficientData(format!("{} has no `text` embeddings entry", manifest_path.display()))
        })?;
        let train = load_emb(&manifest.train)?;
        let test = load_emb(&manifest.test)?;
        let text = load_emb(&text_path)?.features().clone();
        let anchors_path = anchors_override.map(Path::to_path_buf).or(manifest.anchors.clone());
        let anchors = anchors_path
            .as_ref()
            .map(load_emb)
            .transpose()?
            .map(|s| s.features().clone());
        let split = manifest.split_spec(train.num_classes())?;
        let mut inputs = vec![manifest_path.to_path_buf(), manifest.train, manifest.test, text_path];
        inputs.extend(anchors_path);
        Ok(Self {
            train,
            test,
            text,
            anchors,
            split,
            inputs,
        })
    }

    fn protocol(&self) -> ProtocolData<'_> {
        ProtocolData {
            train: &self.train,
            test: &self.test,
            text: &self.text,
            anchors: self.anchors.as_ref(),
            split: self.split.as_ref(),
        }
    }
}

impl ConfigArgs {
    fn protocol_config(&self, seeds: Vec<u64>) -> Result<ProtocolConfig> {
        let mut cfg = ProtocolConfig::defaults(self.mode);
        cfg.shots = self.shots;
        cfg.seeds = seeds;
        if let Some(l) = self.lambda {
            cfg.train.weights.lambda = l;
        }
        cfg.train.nnr.alpha = self.alpha;
        cfg.train.nnr.k = self.k_neighbors;
        cfg.train.epochs = self.epochs;
        if let Some(lr) = self.lr {
            cfg.train.base_lr = lr;
        }
        cfg.model.variant = self.variant;
        cfg.text = match (self.frozen_w, self.context_len) {
            (true, Some(_)) => {
                return Err(UsageError("--context-len has no effect together with --frozen-w".into()).into())
            }
            (true, None) => TextMode::Frozen,
            (false, len) => TextMode::Prompt {
                context_len: len.unwrap_or(self.mode.default_context_len()),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn synth(args: &SynthArgs, wd: &Workdir) -> Result<()> {
    let out = wd.resolve(&args.out);
    let gen = SynthGenerator::new(SynthParams {
        classes: args.classes,
        dim: args.dim,
        shift: args.shift,
        spread: args.spread,
        seed: args.seed,
    })?;
    create_dir(&out)?;
    let files = [
        ("train.emb", gen.sample(args.train_per_class, 0)?),
        ("test.emb", gen.sample(args.test_per_class, 1)?),
        ("text.emb", gen.text()?),
    ];
    for (name, set) in &files {
        write_emb(out.join(name), set)?;
    }
    let split = SplitSpec::halves(args.classes)?;
    let manifest = DatasetManifest {
        train: "train.emb".into(),
        test: "test.emb".into(),
        anchors: None,
        text: Some("text.emb".into()),
        split: Some(SplitJson {
            base: split.base().to_vec(),
            new: split.new_classes().to_vec(),
        }),
    };
    let manifest_path = out.join("manifest.json");
    manifest.save(&manifest_path)?;

    #[derive(Serialize)]
    struct SynthConfig {
        classes: usize,
        dim: usize,
        spread: f64,
        shift: f64,
        train_per_class: usize,
        test_per_class: usize,
        seed: u64,
    }
    let config = SynthConfig {
        classes: args.classes,
        dim: args.dim,
        spread: args.spread,
        shift: args.shift,
        train_per_class: args.train_per_class,
        test_per_class: args.test_per_class,
        seed: args.seed,
    };
    let mut run = RunManifest::new("synth", &config, &[], vec![args.seed])?;
    run.artifacts = files.iter().map(|(n, _)| out.join(n)).collect();
    run.artifacts.push(manifest_path.clone());
    run.write(&out)?;
    println!(
        "wrote {} classes x {} dims ({} train, {} test per class) to {}",
        args.classes,
        args.dim,
        args.train_per_class,
        args.test_per_class,
        manifest_path.display()
    );
    Ok(())
}

fn describe(a: &Accuracies) -> String {
    match (a.new, a.hmean) {
        (Some(n), Some(h)) => format!("base {:.2}  new {n:.2}  H {h:.2}", a.base),
        _ => format!("{:.2}", a.base),
    }
}

pub fn train(args: &TrainArgs, wd: &Workdir) -> Result<()> {
    let c = &args.config;
    let anchors = c.anchors.as_ref().map(|p| wd.resolve(p));
    let data = Dataset::load(&wd.resolve(&c.data), anchors.as_deref())?;
    let cfg = c.protocol_config(vec![args.seed])?;
    let (model, run) = run_seed(&cfg, &data.protocol(), args.seed, Exec::available())?;

    let out = wd.resolve(&args.out);
    create_dir(&out)?;
    let ckpt = out.join(CHECKPOINT);
    model.save(&ckpt)?;

    #[derive(Serialize)]
    struct Trace<'a> {
        seed: u64,
        steps: &'a [TraceEntry],
    }
    write_json(
        &out.join(TRACE),
        &Trace {
            seed: args.seed,
            steps: &run.trace,
        },
    )?;

    #[derive(Serialize)]
    struct Summary<'a> {
        seed: u64,
        zero_shot: &'a Accuracies,
        cpr: &'a Accuracies,
        cpr_nnr: &'a Accuracies,
    }
    write_json(
        &out.join(SUMMARY),
        &Summary {
            seed: args.seed,
            zero_shot: &run.zero_shot,
            cpr: &run.cpr,
            cpr_nnr: &run.cpr_nnr,
        },
    )?;

    let mut manifest = RunManifest::new("train", &cfg, &data.inputs, vec![args.seed])?;
    manifest.artifacts = vec![ckpt.clone(), out.join(TRACE), out.join(SUMMARY)];
    manifest.write(&out)?;

    println!("steps       {}", run.trace.len());
    if let (Some(first), Some(last)) = (run.trace.first(), run.trace.last()) {
        println!("loss        {:.4} -> {:.4}", first.total, last.total);
    }
    println!("zero-shot   {}", describe(&run.zero_shot));
    println!("cpr         {}", describe(&run.cpr));
    println!("cpr+nnr     {}", describe(&run.cpr_nnr));
    println!("checkpoint  {}", ckpt.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalReport<'a> {
    checkpoint: &'a Path,
    mode: Mode,
    nnr: Option<NnrConfig>,
    zero_shot: &'a Accuracies,
    cpr: &'a Accuracies,
}

fn metrics_csv(rows: &[(&str, &Accuracies)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "base_acc", "new_acc", "hmean"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (name, a) in rows {
        w.write_record([name.to_string(), a.base.to_string(), opt(a.new), opt(a.hmean)])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn eval(args: &EvalArgs, wd: &Workdir) -> Result<()> {
    let ckpt = wd.resolve(&args.checkpoint);
    let model = CprModel::load(&ckpt)?;
    let data = Dataset::load(&wd.resolve(&args.data), None)?;
    let nnr = NnrConfig {
        alpha: args.alpha,
        k: args.k_neighbors,
        ..NnrConfig::default()
    };
    nnr.validate()?;
    let split = match args.mode {
        Mode::FewShot => None,
        Mode::Base2New => Some(
            data.split
                .as_ref()
                .ok_or_else(|| CprError::Split("base2new evaluation needs a split in the manifest".into()))?,
        ),
    };
    if data.test.num_classes() != model.num_classes() || data.text.rows() != model.num_classes() {
        return Err(CprError::shape(format!(
            "checkpoint has {} classes, test set {}, text embeddings {}",
            model.num_classes(),
            data.test.num_classes(),
            data.text.rows()
        ))
        .into());
    }
    let groups = class_groups(data.test.num_classes(), split)
        .iter()
        .map(|c| QuerySet::new(&data.test, c))
        .collect::<cpr::Result<Vec<_>>>()?;
    let zero_shot = evaluate_zero_shot(&data.text, &groups)?;
    let outcome = evaluate_model(&model, &groups, &nnr, Exec::available())?;
    let use_nnr = !args.no_nnr;
    let cpr = if use_nnr {
        &outcome.with_nnr
    } else {
        &outcome.without_nnr
    };

    let out = wd.resolve(&args.out);
    create_dir(&out)?;
    let report = EvalReport {
        checkpoint: &ckpt,
        mode: args.mode,
        nnr: use_nnr.then_some(nnr),
        zero_shot: &zero_shot,
        cpr,
    };
    write_json(&out.join(METRICS_JSON), &report)?;
    let csv_path = out.join(METRICS_CSV);
    fs::write(&csv_path, metrics_csv(&[("zero-shot", &zero_shot), ("cpr", cpr)])?)
        .with_context(|| format!("writing {}", csv_path.display()))?;

    let mut inputs = vec![ckpt.clone()];
    inputs.extend(data.inputs.iter().cloned());
    let mut manifest = RunManifest::new("eval", &report, &inputs, Vec::new())?;
    manifest.artifacts = vec![out.join(METRICS_JSON), csv_path];
    manifest.write(&out)?;

    println!("zero-shot   {}", describe(&zero_shot));
    println!("{:<11} {}", if use_nnr { "cpr+nnr" } else { "cpr" }, describe(cpr));
    Ok(())
}

pub fn ablate(args: &AblateArgs, wd: &Workdir) -> Result<()> {
    let c = &args.config;
    let anchors = c.anchors.as_ref().map(|p| wd.resolve(p));
    let data = Dataset::load(&wd.resolve(&c.data), anchors.as_deref())?;
    let mut cfg = c.protocol_config(args.seeds.clone())?;
    cfg.report_nnr = !args.report_plain;
    let report = ablation_sweep(args.axis, &args.grid, &cfg, &data.protocol(), Exec::available())?;

    let out = wd.resolve(&args.out);
    create_dir(&out)?;
    let (csv_path, json_path) = (out.join(ABLATION_CSV), out.join(ABLATION_JSON));
    report.write(&csv_path, &json_path)?;

    #[derive(Serialize)]
    struct AblateConfig<'a> {
        axis: cpr::eval::Axis,
        grid: &'a [String],
        base: &'a ProtocolConfig,
    }
    let config = AblateConfig {
        axis: args.axis,
        grid: &args.grid,
        base: &cfg,
    };
    let mut manifest = RunManifest::new("ablate", &config, &data.inputs, args.seeds.clone())?;
    manifest.artifacts = vec![csv_path.clone(), json_path];
    manifest.write(&out)?;

    for row in report.rows() {
        let extra = match (row.new_acc, row.hmean) {
            (Some(n), Some(h)) => format!("  new {n:.2}  H {h:.2}"),
            _ => String::new(),
        };
        println!("{}={:<8} base {:.2}{extra}", row.axis, row.value, row.base_acc);
    }
    println!("table       {}", csv_path.display());
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs, wd: &Workdir) -> Result<()> {
    let problem = CheckProblem {
        dim: args.dim,
        classes: args.classes,
        context_len: args.context_len,
        hidden: args.hidden,
        samples_per_class: args.samples_per_class,
        perturb: args.perturb,
        nnr_in_loss: args.nnr_in_loss,
        seed: args.seed,
    };
    let opts = FdOptions {
        sample: args.coords.map(|n| (n, args.seed)),
        ..FdOptions::default()
    };
    let report = problem.run(opts)?;
    for t in &report.tensors {
        println!(
            "{:<28} {:>6} coords  max rel err {:.2e}  {}",
            t.name,
            t.coords_checked,
            t.max_rel_error,
            if t.passed { "ok" } else { "FAIL" }
        );
    }
    if let Some(path) = &args.out {
        let path = wd.resolve(path);
        if let Some(dir) = path.parent() {
            create_dir(dir)?;
        }
        #[derive(Serialize)]
        struct Out<'a> {
            problem: &'a CheckProblem,
            passed: bool,
            report: &'a cpr::numerics::GradCheckReport,
        }
        write_json(
            &path,
            &Out {
                problem: &problem,
                passed: report.passed(),
                report: &report,
            },
        )?;
    }
    if let Some(worst) = report
        .tensors
        .iter()
        .filter(|t| !t.passed)
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    {
        return Err(CprError::GradientMismatch {
            tensor: worst.name.clone(),
            rel_error: worst.max_rel_error,
        }
        .into());
    }
    println!(
        "all {} tensors within {:e} (worst {:.2e})",
        report.tensors.len(),
        report.threshold,
        report.worst()
    );
    Ok(())
}

pub fn verify(args: &VerifyArgs, wd: &Workdir) -> Result<()> {
    let manifest = RunManifest::load(&wd.resolve(&args.manifest))?;
    let changed = manifest.changed_inputs()?;
    if !changed.is_empty() {
        let names: Vec<String> = changed.iter().map(|i| i.path.display().to_string()).collect();
        anyhow::bail!("inputs changed since the run: {}", names.join(", "));
    }
    println!("{} inputs match their recorded digests", manifest.inputs.len());
    Ok(())
}
