use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gecx_core::align::extract_edits;
use gecx_core::codec::{Tokenizer, TokenizerKind};
use gecx_core::corpus::{compute_stats, gen_synthetic_corpus, load_corpus, write_corpus, ErrorTypeRegistry, SynthConfig};
use gecx_core::denoise::{denoise_corpus, load_references, DEFAULT_THRESHOLD};
use gecx_core::exec::ExecMode;
use gecx_core::harness::{
    load_predictions, render_report, run_experiment, run_sweep, write_predictions, ExperimentConfig, ResultBundle,
    SweepParam,
};
use gecx_core::infer::{predict, DecodeConfig, Strategy};
use gecx_core::metrics::{evaluate, EvalScope};
use gecx_core::model::checkpoint::Checkpoint;

#[derive(Parser)]
#[command(name = "gecx", version, about = "Explainable grammatical error correction workbench")]
struct Cli {
    /// Run per-sample work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print corpus statistics.
    Stats {
        corpus: PathBuf,
        #[command(flatten)]
        labels: LabelsArg,
        /// Emit JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Re-apply every correction except each sample's own error.
    Denoise {
        expect: PathBuf,
        refs: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        labels: LabelsArg,
        /// Minimum similarity for a reference to match.
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Write a seeded synthetic corpus and its labels file.
    SynthCorpus {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        size: usize,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train and evaluate one model per configured seed.
    Train { config: PathBuf },
    /// Decode a corpus with a checkpoint.
    Predict {
        checkpoint: PathBuf,
        corpus: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Score predictions against a gold corpus.
    Evaluate {
        pred: PathBuf,
        gold: PathBuf,
        #[command(flatten)]
        labels: LabelsArg,
        /// Take the subword tokenizer from this checkpoint; otherwise
        /// evidence is scored on whole words.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "explanation_only")]
        correction_only: bool,
        #[arg(long)]
        explanation_only: bool,
        #[arg(long)]
        json: bool,
    },
    /// Run one experiment per value of a loss weight.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values; defaults depend on the parameter.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Compare result bundles (bundle.json files or run directories).
    Report {
        #[arg(required = true)]
        bundles: Vec<PathBuf>,
        /// Directory for report.md and report.json.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct LabelsArg {
    /// Labels file; defaults to labels.txt next to the corpus.
    #[arg(long)]
    labels: Option<PathBuf>,
}

impl LabelsArg {
    fn load(&self, corpus: &Path) -> Result<ErrorTypeRegistry> {
        let path = self.labels.clone().unwrap_or_else(|| sibling(corpus, "labels.txt"));
        ErrorTypeRegistry::load(&path).with_context(|| format!("loading labels from {}", path.display()))
    }
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    greedy: bool,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    /// Only restrict symbol classes, not their order.
    #[arg(long)]
    unconstrained: bool,
}

impl DecodeArgs {
    fn config(&self) -> DecodeConfig {
        DecodeConfig {
            strategy: if self.greedy { Strategy::Greedy } else { Strategy::Beam },
            beam_size: self.beam,
            max_len: self.max_len,
            constrained: !self.unconstrained,
            ..DecodeConfig::default()
        }
    }
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let exec = if cli.sequential { ExecMode::Sequential } else { ExecMode::Parallel };
    match cli.cmd {
        Cmd::Stats { corpus, labels, json } => {
            let registry = labels.load(&corpus)?;
            let samples = load_corpus(&corpus, &registry)?;
            let s = compute_stats(&samples, extract_edits);
            if json {
                println!("{}", serde_json::to_string_pretty(&s)?);
            } else {
                println!("| Sentences | With evidence | Words/sent | Edits/sent | Evidence/sent |");
                println!("|---|---|---|---|---|");
                println!(
                    "| {} | {} ({:.2}%) | {:.2} | {:.2} | {:.2} |",
                    s.sentence_count,
                    s.with_evidence_count,
                    s.with_evidence_pct,
                    s.words_per_sentence,
                    s.edits_per_sentence,
                    s.evidence_per_sentence
                );
            }
        }
        Cmd::Denoise { expect, refs, out, labels, threshold } => {
            let registry = labels.load(&expect)?;
            let samples = load_corpus(&expect, &registry)?;
            let refs = load_references(&refs)?;
            if refs.is_empty() {
                bail!("reference file is empty");
            }
            let (denoised, report) = denoise_corpus(&samples, &refs, threshold, exec);
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            write_corpus(&out, &denoised, &registry)?;
            write_text(&sibling(&out, "denoise_report.json"), &serde_json::to_string_pretty(&report)?)?;
            let s = &report.summary;
            println!(
                "changed {}/{} ({:.2}%), dropped evidence in {}, no match {}, conflicts {}, multi-error {}",
                s.changed, s.total, s.changed_pct, s.dropped_evidence_samples, s.no_match, s.conflicts, s.multi_error
            );
        }
        Cmd::SynthCorpus { seed, size, out } => {
            let cfg = SynthConfig::default();
            let samples = gen_synthetic_corpus(seed, size, &cfg)?;
            let registry = cfg.registry()?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            write_corpus(&out, &samples, &registry)?;
            registry.save(sibling(&out, "labels.txt"))?;
            println!("wrote {} samples to {}", samples.len(), out.display());
        }
        Cmd::Train { config } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if cli.sequential {
                cfg.training.exec = ExecMode::Sequential;
            }
            let bundle = run_experiment(&cfg)?;
            println!("{}", render_report(std::slice::from_ref(&bundle)).markdown);
            println!("run directory: {}", cfg.output_dir.join(&cfg.name).display());
        }
        Cmd::Predict { checkpoint, corpus, out, decode } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let model = ckpt.to_model()?;
            let samples = load_corpus(&corpus, &ckpt.registry)?;
            let cfg = decode.config();
            cfg.validate()?;
            let preds = predict(&model, &samples, &ckpt.spec, &cfg, &ckpt.tokenizer, &ckpt.registry, exec);
            let failed = preds.iter().filter(|p| p.error.is_some()).count();
            match out {
                Some(path) => {
                    write_predictions(&path, &preds)?;
                    println!("wrote {} predictions ({failed} failed) to {}", preds.len(), path.display());
                }
                None => {
                    for p in &preds {
                        println!("{}", serde_json::to_string(p)?);
                    }
                }
            }
        }
        Cmd::Evaluate {
            pred,
            gold,
            labels,
            checkpoint,
            correction_only,
            explanation_only,
            json,
        } => {
            let registry = labels.load(&gold)?;
            let gold = load_corpus(&gold, &registry)?;
            let mut preds = load_predictions(&pred)?;
            let tok = match checkpoint {
                Some(p) => Checkpoint::load(p)?.tokenizer,
                None => {
                    preds.iter_mut().for_each(|p| p.evidence_units.clear());
                    let words = gold.iter().flat_map(|s| s.source.iter().chain(&s.target)).map(String::as_str);
                    Tokenizer::fit(TokenizerKind::Whitespace, words, registry.len())
                }
            };
            let scope = EvalScope {
                correction: !explanation_only,
                explanation: !correction_only,
            };
            let report = evaluate(&preds, &gold, &tok, &registry, scope)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.to_markdown());
            }
        }
        Cmd::Sweep { config, param, values } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if cli.sequential {
                cfg.training.exec = ExecMode::Sequential;
            }
            let values = if values.is_empty() { param.default_values() } else { values };
            let table = run_sweep(&cfg, param, &values)?;
            print!("{}", gecx_core::harness::render_sweep(&table));
        }
        Cmd::Report { bundles, out } => {
            let loaded: Vec<ResultBundle> = bundles
                .iter()
                .map(|p| {
                    let file = if p.is_dir() { p.join("bundle.json") } else { p.clone() };
                    ResultBundle::load(&file).with_context(|| format!("loading {}", file.display()))
                })
                .collect::<Result<_>>()?;
            let report = render_report(&loaded);
            if let Some(dir) = out {
                write_text(&dir.join("report.md"), &report.markdown)?;
                write_text(&dir.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
            }
            print!("{}", report.markdown);
        }
    }
    Ok(())
}
