//! Experiment orchestration: multi-seed runs, loss-weight sweeps and reports.
//!
//! A run directory holds `config.toml` (the resolved config), `logs/` (one
//! JSON object per epoch), `checkpoints/`, `predictions/` and the result
//! bundle with its markdown report.

mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::align::extract_edits;
use crate::codec::{InfusionPart, SettingSpec, SubwordTokenizer, Tokenizer, TokenizerKind};
use crate::corpus::{adjacent_evidence, load_corpus, random_evidence, ErrorTypeRegistry, ExplainedSample};
use crate::error::{Error, Result};
use crate::exec::map_indexed;
use crate::infer::{predict, DecodeConfig, PredictionRecord};
use crate::metrics::{evaluate, EvalReport, EvalScope};
use crate::model::checkpoint::Checkpoint;
use crate::model::{prepare_example, train, LossConfig, Model, ModelConfig, TrainConfig, TrainingLog};

pub use report::{render_report, render_sweep, Report};

/// Where the evidence fed to training comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceSource {
    #[default]
    GroundTruth,
    /// As many source words as the gold evidence, drawn uniformly.
    Random,
    /// Words within a few tokens of the correction.
    Adjacent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusPaths {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: Option<PathBuf>,
    /// One label per line.
    pub labels: PathBuf,
}

impl Default for CorpusPaths {
    fn default() -> Self {
        CorpusPaths {
            train: "train.jsonl".into(),
            dev: "dev.jsonl".into(),
            test: None,
            labels: "labels.txt".into(),
        }
    }
}

/// One declarative experiment: setting, every model/loss/decoding knob and
/// the seeds to average over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub corpus: CorpusPaths,
    pub setting: SettingSpec,
    pub evidence_source: EvidenceSource,
    pub tokenizer: TokenizerKind,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub training: TrainConfig,
    pub decode: DecodeConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            corpus: CorpusPaths::default(),
            setting: SettingSpec::baseline(),
            evidence_source: EvidenceSource::GroundTruth,
            tokenizer: TokenizerKind::Whitespace,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            training: TrainConfig {
                lr: 3e-4,
                ..TrainConfig::default()
            },
            decode: DecodeConfig::default(),
            seeds: vec![1, 2, 3],
            output_dir: "runs".into(),
        }
    }
}

impl ExperimentConfig {
    /// Small model and schedule that train from scratch on the synthetic
    /// corpus in about a minute per seed on one CPU core.
    pub fn desk(name: &str, setting: SettingSpec) -> Self {
        ExperimentConfig {
            name: name.into(),
            setting,
            model: ModelConfig {
                d_model: 64,
                encoder_layers: 1,
                decoder_layers: 1,
                heads: 4,
                ff_dim: 128,
                ..ModelConfig::default()
            },
            training: TrainConfig {
                epochs: 12,
                batch_size: 32,
                lr: 3e-3,
                warmup_steps: 100,
                ..TrainConfig::default()
            },
            decode: DecodeConfig {
                max_len: 48,
                ..DecodeConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.setting.validate()?;
        self.loss.validate()?;
        self.training.validate()?;
        self.decode.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let consumes = self.setting.infuses(InfusionPart::Evidence) || self.setting.emits_explanation();
        if self.evidence_source != EvidenceSource::GroundTruth && !consumes {
            return Err(Error::Config(format!(
                "evidence source {:?} needs a setting that uses evidence, not {}",
                self.evidence_source,
                self.setting.name()
            )));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Whether reports carry the explanation block.
    pub fn scope(&self) -> EvalScope {
        EvalScope {
            correction: self.setting.emits_correction(),
            explanation: self.setting.emits_explanation() || self.model.tagging,
        }
    }
}

/// In-memory corpora of an experiment.
#[derive(Debug, Clone)]
pub struct Corpora {
    pub train: Vec<ExplainedSample>,
    pub dev: Vec<ExplainedSample>,
    pub test: Option<Vec<ExplainedSample>>,
    pub registry: ErrorTypeRegistry,
}

impl Corpora {
    pub fn load(paths: &CorpusPaths) -> Result<Self> {
        let registry = ErrorTypeRegistry::load(&paths.labels)?;
        Ok(Corpora {
            train: load_corpus(&paths.train, &registry)?,
            dev: load_corpus(&paths.dev, &registry)?,
            test: paths.test.as_ref().map(|p| load_corpus(p, &registry)).transpose()?,
            registry,
        })
    }

    /// Unit vocabulary over every training sentence.
    pub fn tokenizer(&self, kind: TokenizerKind) -> Tokenizer {
        let words = self
            .train
            .iter()
            .flat_map(|s| s.source.iter().chain(&s.target))
            .map(String::as_str);
        Tokenizer::fit(kind, words, self.registry.len())
    }
}

fn mix(seed: u64, index: usize) -> u64 {
    (seed ^ 0x5851_F42D_4C95_7F2D).wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Replaces gold evidence with synthesized evidence; ground truth is returned
/// unchanged. Samples without evidence keep none.
pub fn synthesize_evidence(corpus: &[ExplainedSample], source: EvidenceSource, seed: u64) -> Result<Vec<ExplainedSample>> {
    if source == EvidenceSource::GroundTruth {
        return Ok(corpus.to_vec());
    }
    corpus
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let ev = match source {
                EvidenceSource::GroundTruth => unreachable!(),
                EvidenceSource::Random => random_evidence(s, mix(seed, i))?,
                EvidenceSource::Adjacent => {
                    let span = extract_edits(&s.source, &s.target)
                        .first()
                        .map(|e| e.start..e.end.max(e.start))
                        .unwrap_or(0..0);
                    adjacent_evidence(s, span, mix(seed, i))
                }
            };
            Ok(s.with_evidence(ev))
        })
        .collect()
}

/// Metric name to value, with rates in `[0, 1]` and counts as plain numbers.
pub type Metrics = BTreeMap<String, f64>;

pub fn flatten_metrics(report: &EvalReport, preds: &[PredictionRecord]) -> Metrics {
    let mut m = Metrics::new();
    if let Some(c) = &report.correction {
        m.insert("cor_p".into(), c.p);
        m.insert("cor_r".into(), c.r);
        m.insert("cor_f05".into(), c.f05);
        m.insert("cor_tp".into(), c.counts.tp as f64);
        m.insert("cor_fp".into(), c.counts.fp as f64);
        m.insert("cor_fn".into(), c.counts.fn_ as f64);
        m.insert("cor_predicted".into(), c.counts.predicted() as f64);
    }
    if let Some(e) = &report.explanation {
        m.insert("exp_p".into(), e.p);
        m.insert("exp_r".into(), e.r);
        m.insert("exp_f1".into(), e.f1);
        m.insert("exp_f05".into(), e.f05);
        m.insert("exp_tp".into(), e.counts.tp as f64);
        m.insert("exp_fp".into(), e.counts.fp as f64);
        m.insert("exp_fn".into(), e.counts.fn_ as f64);
        m.insert("exp_predicted".into(), e.counts.predicted() as f64);
    }
    if let Some(a) = report.type_accuracy {
        m.insert("type_acc".into(), a);
    }
    if !preds.is_empty() {
        let n = preds.len() as f64;
        m.insert("well_formed".into(), preds.iter().filter(|p| p.well_formed).count() as f64 / n);
        m.insert("truncated".into(), preds.iter().filter(|p| p.truncated).count() as f64);
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SeedOutcome {
    Ok {
        dev: Metrics,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test: Option<Metrics>,
        best_epoch: Option<usize>,
        train_seconds: f64,
    },
    Failed {
        error: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    #[serde(flatten)]
    pub outcome: SeedOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(MeanStd { mean, std, n })
    }
}

/// Per-metric mean and spread over the successful seeds.
pub fn aggregate<'a>(per_seed: impl IntoIterator<Item = &'a Metrics>) -> BTreeMap<String, MeanStd> {
    let mut cols: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for m in per_seed {
        for (k, &v) in m {
            cols.entry(k.clone()).or_default().push(v);
        }
    }
    cols.into_iter().filter_map(|(k, v)| MeanStd::of(&v).map(|s| (k, s))).collect()
}

/// Everything a run produces apart from the heavy artifacts on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultBundle {
    pub name: String,
    pub setting: String,
    pub evidence_source: EvidenceSource,
    pub config: ExperimentConfig,
    pub seeds: Vec<SeedResult>,
    pub dev: BTreeMap<String, MeanStd>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub test: BTreeMap<String, MeanStd>,
}

impl ResultBundle {
    pub fn succeeded(&self) -> usize {
        self.seeds.iter().filter(|s| matches!(s.outcome, SeedOutcome::Ok { .. })).count()
    }

    pub fn dev_mean(&self, metric: &str) -> Option<f64> {
        self.dev.get(metric).map(|m| m.mean)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn write_predictions(path: &Path, preds: &[PredictionRecord]) -> Result<()> {
    let mut text = String::new();
    for p in preds {
        text += &serde_json::to_string(p)?;
        text.push('\n');
    }
    write_file(path, &text)
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: k + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Trained model plus everything needed to decode with it.
pub struct Trained {
    pub model: Model,
    pub tokenizer: Tokenizer,
    pub log: TrainingLog,
}

/// Trains one model for `seed` (model init, shuffling, dropout and evidence
/// synthesis all derive from it).
pub fn train_seed(cfg: &ExperimentConfig, corpora: &Corpora, seed: u64) -> Result<Trained> {
    let tokenizer = corpora.tokenizer(cfg.tokenizer);
    let train_samples = synthesize_evidence(&corpora.train, cfg.evidence_source, seed)?;
    let prep = |set: &[ExplainedSample]| -> Result<Vec<_>> {
        map_indexed(cfg.training.exec, set, |_, s| prepare_example(s, &cfg.setting, &tokenizer))
            .into_iter()
            .collect()
    };
    let train_ex = prep(&train_samples)?;
    let dev_ex = prep(&corpora.dev)?;
    let mut model = Model::new(ModelConfig {
        vocab_size: tokenizer.vocab_size(),
        type_count: corpora.registry.len(),
        seed,
        ..cfg.model.clone()
    })?;
    let tc = TrainConfig {
        seed,
        ..cfg.training.clone()
    };
    let log = train(&mut model, &train_ex, &dev_ex, &cfg.loss, &tc, |_, _| BTreeMap::new())?;
    Ok(Trained { model, tokenizer, log })
}

/// Decodes and scores one split.
pub fn evaluate_split(
    cfg: &ExperimentConfig,
    trained: &Trained,
    gold: &[ExplainedSample],
    registry: &ErrorTypeRegistry,
) -> Result<(Vec<PredictionRecord>, EvalReport)> {
    let preds = predict(
        &trained.model,
        gold,
        &cfg.setting,
        &cfg.decode,
        &trained.tokenizer,
        registry,
        cfg.training.exec,
    );
    let report = evaluate(&preds, gold, &trained.tokenizer, registry, cfg.scope())?;
    Ok((preds, report))
}

fn run_seed(cfg: &ExperimentConfig, corpora: &Corpora, seed: u64, out: Option<&Path>) -> Result<SeedOutcome> {
    let started = Instant::now();
    let trained = train_seed(cfg, corpora, seed)?;
    let train_seconds = started.elapsed().as_secs_f64();
    let (dev_preds, dev_report) = evaluate_split(cfg, &trained, &corpora.dev, &corpora.registry)?;
    let test = corpora
        .test
        .as_ref()
        .map(|t| evaluate_split(cfg, &trained, t, &corpora.registry))
        .transpose()?;
    if let Some(dir) = out {
        let mut log = String::new();
        for e in &trained.log.epochs {
            log += &serde_json::to_string(e)?;
            log.push('\n');
        }
        write_file(&dir.join(format!("logs/seed_{seed}.jsonl")), &log)?;
        let ckpt = Checkpoint::new(
            &trained.model,
            cfg.setting.clone(),
            cfg.loss,
            trained.tokenizer.clone(),
            corpora.registry.clone(),
        );
        fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
        ckpt.save(dir.join(format!("checkpoints/seed_{seed}.json")))?;
        write_predictions(&dir.join(format!("predictions/dev_seed_{seed}.jsonl")), &dev_preds)?;
        write_file(
            &dir.join(format!("reports/dev_seed_{seed}.json")),
            &serde_json::to_string_pretty(&flatten_metrics(&dev_report, &dev_preds))?,
        )?;
        if let Some((preds, report)) = &test {
            write_predictions(&dir.join(format!("predictions/test_seed_{seed}.jsonl")), preds)?;
            write_file(
                &dir.join(format!("reports/test_seed_{seed}.json")),
                &serde_json::to_string_pretty(&flatten_metrics(report, preds))?,
            )?;
        }
    }
    Ok(SeedOutcome::Ok {
        dev: flatten_metrics(&dev_report, &dev_preds),
        test: test.map(|(p, r)| flatten_metrics(&r, &p)),
        best_epoch: trained.log.best_epoch,
        train_seconds,
    })
}

/// Trains and evaluates one model per seed. A failing seed is recorded and
/// left out of the aggregate. With `out`, artifacts are written under it.
pub fn run_experiment_on(cfg: &ExperimentConfig, corpora: &Corpora, out: Option<&Path>) -> Result<ResultBundle> {
    cfg.validate()?;
    if let Some(dir) = out {
        write_file(&dir.join("config.toml"), &cfg.to_toml()?)?;
    }
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let outcome = run_seed(cfg, corpora, seed, out).unwrap_or_else(|e| {
            log::warn!("{} seed {seed} failed: {e}", cfg.name);
            SeedOutcome::Failed { error: e.to_string() }
        });
        seeds.push(SeedResult { seed, outcome });
    }
    let ok = || {
        seeds.iter().filter_map(|s| match &s.outcome {
            SeedOutcome::Ok { dev, test, .. } => Some((dev, test)),
            SeedOutcome::Failed { .. } => None,
        })
    };
    let dev = aggregate(ok().map(|(d, _)| d));
    let test = aggregate(ok().filter_map(|(_, t)| t.as_ref()));
    let bundle = ResultBundle {
        name: cfg.name.clone(),
        setting: cfg.setting.name(),
        evidence_source: cfg.evidence_source,
        config: cfg.clone(),
        seeds,
        dev,
        test,
    };
    if let Some(dir) = out {
        write_file(&dir.join("bundle.json"), &serde_json::to_string_pretty(&bundle)?)?;
        let rep = render_report(std::slice::from_ref(&bundle));
        write_file(&dir.join("report.md"), &rep.markdown)?;
    }
    Ok(bundle)
}

/// Loads the corpora named in `cfg` and runs under
/// `cfg.output_dir / cfg.name`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultBundle> {
    let corpora = Corpora::load(&cfg.corpus)?;
    run_experiment_on(cfg, &corpora, Some(&cfg.output_dir.join(&cfg.name)))
}

/// Loss weight varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Lambda,
    Gamma,
}

impl SweepParam {
    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepParam::Lambda => vec![0.5, 1.0, 1.5, 2.0],
            SweepParam::Gamma => vec![0.5, 0.8, 1.0, 1.5, 2.0],
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Gamma => "gamma",
        }
    }

    fn apply(self, cfg: &mut ExperimentConfig, v: f64) {
        match self {
            SweepParam::Lambda => cfg.loss.lambda = v,
            SweepParam::Gamma => cfg.loss.gamma = v,
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" | "λ" => Ok(SweepParam::Lambda),
            "gamma" | "γ" => Ok(SweepParam::Gamma),
            _ => Err(Error::Config(format!("unknown sweep parameter {s:?} (lambda or gamma)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    /// `None` when the cell could not run at all (e.g. invalid value).
    pub bundle: Option<ResultBundle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
}

/// One experiment per value of `param`; a failing cell is recorded in its
/// row and the sweep goes on.
pub fn run_sweep_on(
    base: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
    corpora: &Corpora,
    out: Option<&Path>,
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let rows = values
        .iter()
        .map(|&v| {
            let mut cfg = base.clone();
            param.apply(&mut cfg, v);
            cfg.name = format!("{}_{}_{v}", base.name, param.symbol());
            let dir = out.map(|d| d.join(&cfg.name));
            match run_experiment_on(&cfg, corpora, dir.as_deref()) {
                Ok(b) => SweepRow {
                    value: v,
                    bundle: Some(b),
                    error: None,
                },
                Err(e) => SweepRow {
                    value: v,
                    bundle: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let table = SweepTable { param, rows };
    if let Some(dir) = out {
        write_file(&dir.join("sweep.json"), &serde_json::to_string_pretty(&table)?)?;
        write_file(&dir.join("sweep.md"), &render_sweep(&table))?;
    }
    Ok(table)
}

pub fn run_sweep(base: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<SweepTable> {
    let corpora = Corpora::load(&base.corpus)?;
    let dir = base.output_dir.join(format!("{}_{}_sweep", base.name, param.symbol()));
    run_sweep_on(base, param, values, &corpora, Some(&dir))
}
