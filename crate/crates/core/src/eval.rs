//! Accuracy metrics, the few-shot and base-to-new protocols, and ablation
//! sweeps.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::coadapter::Variant;
use crate::dataio::{sample_episode, EmbeddingSet, SplitSpec};
use crate::error::{CprError, Result};
use crate::losses::{LAMBDA_BASE2NEW, LAMBDA_FEWSHOT};
use crate::model::{zero_shot_predictions, CprModel, ModelConfig, TextInit};
use crate::nnr::{NnrConfig, UnlabeledPool};
use crate::numerics::kernels::{matmul_nt, softmax_rows};
use crate::numerics::Tensor2;
use crate::parallel::Exec;
use crate::promptenc::{DEFAULT_CONTEXT_BASE2NEW, DEFAULT_CONTEXT_FEWSHOT};
use crate::prototypes::visual_prototypes;
use crate::trainer::{train, TraceEntry, TrainConfig, TrainData};

pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];
pub const CSV_HEADER: [&str; 7] = ["axis", "value", "seed", "base_acc", "new_acc", "hmean", "nnr"];

/// Percentage of positions where `predictions` equals `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(CprError::config(format!(
            "accuracy needs equal nonempty inputs, got {} predictions and {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// `2 * base * new / (base + new)`.
pub fn harmonic_mean(base: f64, new: f64) -> Result<f64> {
    if !(base + new > 0.0) {
        return Err(CprError::UndefinedMetric(format!(
            "harmonic mean of {base} and {new} (sum must be positive)"
        )));
    }
    Ok(2.0 * base * new / (base + new))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Mode {
    #[default]
    #[serde(rename = "fewshot")]
    FewShot,
    #[serde(rename = "base2new")]
    Base2New,
}

impl Mode {
    pub fn default_lambda(self) -> f64 {
        match self {
            Mode::FewShot => LAMBDA_FEWSHOT,
            Mode::Base2New => LAMBDA_BASE2NEW,
        }
    }

    pub fn default_context_len(self) -> usize {
        match self {
            Mode::FewShot => DEFAULT_CONTEXT_FEWSHOT,
            Mode::Base2New => DEFAULT_CONTEXT_BASE2NEW,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::FewShot => "fewshot",
            Mode::Base2New => "base2new",
        })
    }
}

impl FromStr for Mode {
    type Err = CprError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fewshot" => Ok(Mode::FewShot),
            "base2new" => Ok(Mode::Base2New),
            other => Err(CprError::config(format!(
                "unknown mode `{other}` (expected fewshot or base2new)"
            ))),
        }
    }
}

/// How the textual prototypes are produced from the text embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum TextMode {
    /// Text rows are W itself.
    Frozen,
    /// Text rows are class tokens for the prompt encoder.
    Prompt { context_len: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub mode: Mode,
    pub shots: usize,
    pub seeds: Vec<u64>,
    pub text: TextMode,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Which numbers the sweep tables report; both are always computed.
    pub report_nnr: bool,
}

impl ProtocolConfig {
    pub fn defaults(mode: Mode) -> Self {
        let mut train = TrainConfig::default();
        train.weights.lambda = mode.default_lambda();
        Self {
            mode,
            shots: 16,
            seeds: DEFAULT_SEEDS.to_vec(),
            text: TextMode::Prompt {
                context_len: mode.default_context_len(),
            },
            model: ModelConfig::default(),
            train,
            report_nnr: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CprError::config("at least one seed is required"));
        }
        if self.shots == 0 {
            return Err(CprError::config("shots must be at least 1"));
        }
        if self.model.tau != self.train.weights.tau {
            return Err(CprError::config("model and loss temperatures differ"));
        }
        self.train.validate()
    }
}

/// Inputs shared by every seed of a protocol run.
#[derive(Debug, Clone, Copy)]
pub struct ProtocolData<'a> {
    /// Labeled, normalized training features.
    pub train: &'a EmbeddingSet,
    /// Labeled, normalized evaluation features.
    pub test: &'a EmbeddingSet,
    /// One row per class: W itself or prompt class tokens.
    pub text: &'a Tensor2,
    pub anchors: Option<&'a Tensor2>,
    pub split: Option<&'a SplitSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub accuracy: f64,
    pub count: usize,
}

/// Accuracies of one evaluation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracies {
    pub base: f64,
    pub new: Option<f64>,
    pub hmean: Option<f64>,
    pub per_class: Vec<ClassAccuracy>,
}

/// Seed-averaged accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy_base: f64,
    pub accuracy_new: Option<f64>,
    pub harmonic_mean: Option<f64>,
    pub per_class: Vec<ClassAccuracy>,
    pub shots: usize,
    pub seeds: Vec<u64>,
}

impl Metrics {
    pub fn average(runs: &[&Accuracies], shots: usize, seeds: &[u64]) -> Result<Self> {
        let n = runs.len() as f64;
        let first = runs.first().ok_or_else(|| CprError::config("no runs to average"))?;
        let base = runs.iter().map(|r| r.base).sum::<f64>() / n;
        let new = first
            .new
            .map(|_| runs.iter().map(|r| r.new.unwrap_or(0.0)).sum::<f64>() / n);
        let per_class = first
            .per_class
            .iter()
            .enumerate()
            .map(|(i, c)| ClassAccuracy {
                class: c.class,
                accuracy: runs.iter().map(|r| r.per_class[i].accuracy).sum::<f64>() / n,
                count: c.count,
            })
            .collect();
        Ok(Self {
            accuracy_base: base,
            accuracy_new: new,
            harmonic_mean: new.map(|nw| harmonic_mean(base, nw)).transpose()?,
            per_class,
            shots,
            seeds: seeds.to_vec(),
        })
    }
}

/// Test samples of a class group with labels as positions into `classes`.
#[derive(Debug, Clone)]
pub struct QuerySet {
    pub classes: Vec<usize>,
    pub features: Tensor2,
    pub labels: Vec<usize>,
}

impl QuerySet {
    pub fn new(test: &EmbeddingSet, classes: &[usize]) -> Result<Self> {
        let labels = test.require_labels("evaluation")?;
        let mut pos = vec![usize::MAX; test.num_classes()];
        for (j, &c) in classes.iter().enumerate() {
            if c >= pos.len() {
                return Err(CprError::Index(format!("class {c} of {}", pos.len())));
            }
            pos[c] = j;
        }
        let idx: Vec<usize> = (0..test.len()).filter(|&i| pos[labels[i]] != usize::MAX).collect();
        if idx.is_empty() {
            return Err(CprError::InsufficientData(
                "no test samples for the evaluated classes".into(),
            ));
        }
        Ok(Self {
            classes: classes.to_vec(),
            features: test.features().select_rows(&idx),
            labels: idx.iter().map(|&i| pos[labels[i]]).collect(),
        })
    }

    /// Unlabeled pool over the queries, scored by zero-shot confidence
    /// against `w`.
    pub fn pool(&self, w: &Tensor2, tau: f64) -> Result<UnlabeledPool> {
        let probs = softmax_rows(&matmul_nt(&self.features, w)?, tau)?;
        let conf = probs
            .iter_rows()
            .map(|r| r.iter().cloned().fold(0.0, f64::max))
            .collect();
        UnlabeledPool::new(self.features.clone(), Some(conf))
    }
}

/// Class groups evaluated: all episode classes, or base then new.
pub fn class_groups(num_classes: usize, split: Option<&SplitSpec>) -> Vec<Vec<usize>> {
    match split {
        Some(s) => vec![s.base().to_vec(), s.new_classes().to_vec()],
        None => vec![(0..num_classes).collect()],
    }
}

fn accuracies_for(groups: &[QuerySet], preds: &[Vec<usize>]) -> Result<Accuracies> {
    let mut accs = Vec::with_capacity(groups.len());
    let mut per_class = Vec::new();
    for (q, p) in groups.iter().zip(preds) {
        accs.push(accuracy(p, &q.labels)?);
        for (j, &c) in q.classes.iter().enumerate() {
            let members: Vec<usize> = (0..q.labels.len()).filter(|&i| q.labels[i] == j).collect();
            let correct = members.iter().filter(|&&i| p[i] == j).count();
            per_class.push(ClassAccuracy {
                class: c,
                accuracy: if members.is_empty() {
                    0.0
                } else {
                    100.0 * correct as f64 / members.len() as f64
                },
                count: members.len(),
            });
        }
    }
    let new = accs.get(1).copied();
    Ok(Accuracies {
        base: accs[0],
        new,
        hmean: new.map(|n| harmonic_mean(accs[0], n)).transpose()?,
        per_class,
    })
}

/// Both evaluations of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub without_nnr: Accuracies,
    pub with_nnr: Accuracies,
}

pub fn evaluate_model(model: &CprModel, groups: &[QuerySet], nnr: &NnrConfig, exec: Exec) -> Result<EvalOutcome> {
    let mut plain = Vec::with_capacity(groups.len());
    let mut rect = Vec::with_capacity(groups.len());
    for q in groups {
        plain.push(model.predict(&q.features, &q.classes, None, exec)?);
        let pool = q.pool(&model.text_w(&q.classes)?, model.tau())?;
        rect.push(model.predict(&q.features, &q.classes, Some((&pool, nnr)), exec)?);
    }
    Ok(EvalOutcome {
        without_nnr: accuracies_for(groups, &plain)?,
        with_nnr: accuracies_for(groups, &rect)?,
    })
}

/// Cosine zero-shot accuracy with the given per-class text rows.
pub fn evaluate_zero_shot(w_all: &Tensor2, groups: &[QuerySet]) -> Result<Accuracies> {
    let preds = groups
        .iter()
        .map(|q| zero_shot_predictions(&q.features, &w_all.select_rows(&q.classes)))
        .collect::<Result<Vec<_>>>()?;
    accuracies_for(groups, &preds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub zero_shot: Accuracies,
    pub cpr: Accuracies,
    pub cpr_nnr: Accuracies,
    pub trace: Vec<TraceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub config: ProtocolConfig,
    pub runs: Vec<SeedRun>,
    pub zero_shot: Metrics,
    pub cpr: Metrics,
    pub cpr_nnr: Metrics,
}

impl ProtocolReport {
    /// The numbers a sweep table reports for this run.
    pub fn reported(&self) -> &Metrics {
        if self.config.report_nnr {
            &self.cpr_nnr
        } else {
            &self.cpr
        }
    }
}

/// Support, visual bank and fresh model for one seed.
pub fn prepare_seed(cfg: &ProtocolConfig, data: &ProtocolData<'_>, seed: u64) -> Result<(CprModel, TrainData)> {
    let split = match cfg.mode {
        Mode::FewShot => None,
        Mode::Base2New => Some(
            data.split
                .ok_or_else(|| CprError::Split("base-to-new mode needs a base/new split".into()))?,
        ),
    };
    let episode = sample_episode(data.train, split, cfg.shots, seed)?;
    if let (Some(s), Some(labels)) = (split, data.train.labels()) {
        let leaked = episode
            .support
            .iter()
            .flatten()
            .any(|&i| s.new_classes().contains(&labels[i]));
        assert!(!leaked, "new-class sample in the support set");
    }
    let groups: Vec<Vec<&[f64]>> = episode
        .support
        .iter()
        .map(|idx| idx.iter().map(|&i| data.train.feature(i)).collect())
        .collect();
    let visual = visual_prototypes(&groups)?;
    let text = match cfg.text {
        TextMode::Frozen => TextInit::Frozen(data.text.clone()),
        TextMode::Prompt { context_len } => TextInit::Prompt {
            class_tokens: data.text.clone(),
            context_len,
        },
    };
    let model_cfg = ModelConfig { seed, ..cfg.model };
    let model = CprModel::new(text, visual, data.anchors.cloned(), &model_cfg)?;
    let support = episode.labeled_support();
    let idx: Vec<usize> = support.iter().map(|&(i, _)| i).collect();
    let nnr_pool = if cfg.train.nnr.apply_during_training {
        Some(UnlabeledPool::new(
            data.train.features().select_rows(&episode.unlabeled_pool),
            None,
        )?)
    } else {
        None
    };
    let train_data = TrainData {
        features: data.train.features().select_rows(&idx),
        labels: support.iter().map(|&(_, l)| l).collect(),
        classes: episode.classes,
        nnr_pool,
    };
    Ok((model, train_data))
}

/// Trains and evaluates one seed.
pub fn run_seed(cfg: &ProtocolConfig, data: &ProtocolData<'_>, seed: u64, exec: Exec) -> Result<(CprModel, SeedRun)> {
    let (mut model, train_data) = prepare_seed(cfg, data, seed)?;
    let groups = class_groups(
        data.test.num_classes(),
        data.split.filter(|_| cfg.mode == Mode::Base2New),
    )
    .iter()
    .map(|c| QuerySet::new(data.test, c))
    .collect::<Result<Vec<_>>>()?;
    let all: Vec<usize> = (0..model.num_classes()).collect();
    let zero_shot = evaluate_zero_shot(&model.text_w(&all)?, &groups)?;
    let train_cfg = TrainConfig { seed, ..cfg.train };
    let state = train(&mut model, &train_data, &train_cfg, exec)?;
    let out = evaluate_model(&model, &groups, &cfg.train.nnr, exec)?;
    Ok((
        model,
        SeedRun {
            seed,
            zero_shot,
            cpr: out.without_nnr,
            cpr_nnr: out.with_nnr,
            trace: state.trace,
        },
    ))
}

/// Runs every seed and averages.
pub fn run_protocol(cfg: &ProtocolConfig, data: &ProtocolData<'_>, exec: Exec) -> Result<ProtocolReport> {
    cfg.validate()?;
    if data.text.rows() != data.train.num_classes() || data.test.num_classes() != data.train.num_classes() {
        return Err(CprError::config(format!(
            "class counts differ: train {}, test {}, text {}",
            data.train.num_classes(),
            data.test.num_classes(),
            data.text.rows()
        )));
    }
    let runs: Vec<SeedRun> = exec
        .try_map(&cfg.seeds, |&s| run_seed(cfg, data, s, exec))?
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    let avg = |f: fn(&SeedRun) -> &Accuracies| -> Result<Metrics> {
        Metrics::average(&runs.iter().map(f).collect::<Vec<_>>(), cfg.shots, &cfg.seeds)
    };
    Ok(ProtocolReport {
        zero_shot: avg(|r| &r.zero_shot)?,
        cpr: avg(|r| &r.cpr)?,
        cpr_nnr: avg(|r| &r.cpr_nnr)?,
        runs,
        config: cfg.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Lambda,
    Alpha,
    K,
    Variant,
    Shots,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Lambda => "lambda",
            Axis::Alpha => "alpha",
            Axis::K => "k",
            Axis::Variant => "variant",
            Axis::Shots => "shots",
        })
    }
}

impl FromStr for Axis {
    type Err = CprError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(Axis::Lambda),
            "alpha" => Ok(Axis::Alpha),
            "k" => Ok(Axis::K),
            "variant" => Ok(Axis::Variant),
            "shots" => Ok(Axis::Shots),
            other => Err(CprError::config(format!(
                "unknown axis `{other}` (expected lambda, alpha, k, variant or shots)"
            ))),
        }
    }
}

fn parse_value<T: FromStr>(axis: Axis, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| CprError::config(format!("invalid {axis} grid value `{value}`")))
}

impl Axis {
    /// Returns `base` with this axis set to `value`.
    pub fn apply(self, base: &ProtocolConfig, value: &str) -> Result<ProtocolConfig> {
        let mut cfg = base.clone();
        match self {
            Axis::Lambda => cfg.train.weights.lambda = parse_value(self, value)?,
            Axis::Alpha => cfg.train.nnr.alpha = parse_value(self, value)?,
            Axis::K => cfg.train.nnr.k = parse_value(self, value)?,
            Axis::Variant => cfg.model.variant = value.trim().parse::<Variant>()?,
            Axis::Shots => cfg.shots = parse_value(self, value)?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One CSV line: a grid point averaged over the seeds listed in `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub seed: String,
    pub base_acc: f64,
    pub new_acc: Option<f64>,
    pub hmean: Option<f64>,
    pub nnr: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub value: String,
    pub report: ProtocolReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: Axis,
    pub base_config: ProtocolConfig,
    pub points: Vec<AblationPoint>,
}

impl AblationReport {
    pub fn rows(&self) -> Vec<AblationRow> {
        self.points
            .iter()
            .map(|p| {
                let m = p.report.reported();
                AblationRow {
                    axis: self.axis.to_string(),
                    value: p.value.clone(),
                    seed: m.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";"),
                    base_acc: m.accuracy_base,
                    new_acc: m.accuracy_new,
                    hmean: m.harmonic_mean,
                    nnr: p.report.config.report_nnr,
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        rows_to_csv(&self.rows())
    }

    pub fn write(&self, csv_path: impl AsRef<Path>, json_path: impl AsRef<Path>) -> Result<()> {
        let (csv_path, json_path) = (csv_path.as_ref(), json_path.as_ref());
        std::fs::write(csv_path, self.to_csv()?).map_err(|e| CprError::io(csv_path, e))?;
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(json_path, json).map_err(|e| CprError::io(json_path, e))
    }
}

pub fn rows_to_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let csv_err = |e: csv::Error| CprError::config(format!("CSV encoding failed: {e}"));
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CprError::config(format!("CSV encoding failed: {e}")))?;
    String::from_utf8(bytes).map_err(|e| CprError::config(format!("CSV encoding failed: {e}")))
}

/// One full protocol per grid value, with the seeds of `base` at every point.
pub fn ablation_sweep(
    axis: Axis,
    grid: &[String],
    base: &ProtocolConfig,
    data: &ProtocolData<'_>,
    exec: Exec,
) -> Result<AblationReport> {
    if grid.is_empty() {
        return Err(CprError::config("ablation grid is empty"));
    }
    let configs = grid.iter().map(|v| axis.apply(base, v)).collect::<Result<Vec<_>>>()?;
    let reports = exec.try_map(&configs, |c| run_protocol(c, data, exec))?;
    Ok(AblationReport {
        axis,
        base_config: base.clone(),
        points: grid
            .iter()
            .zip(reports)
            .map(|(v, report)| AblationPoint {
                value: v.trim().to_string(),
                report,
            })
            .collect(),
    })
}
