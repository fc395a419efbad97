use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use lateral_core::corpus::{load_corpus_with, load_theses, save_theses, LoadOptions, Split};
use lateral_core::evaluation::{diff_reports, hit_rate_benchmark, load_predictions, score, EvalError};
use lateral_core::providers::{CachedGenerator, GenerationParams, Generator, ProviderError, ResponseCache};
use lateral_core::retrieval::{build_index, RetrievalConfig, RetrievalError, RetrievalVariant, ShotSelector, VectorIndex};
use lateral_core::runner::{
    export_finetune, generate_theses, load_matrix, run_experiment, run_matrix, ExperimentConfig, FinetuneFormat,
    Providers, RunContext, SHOT_SPLIT,
};

const EXIT_CONFIG: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_PROVIDER: u8 = 3;

/// Riddle experiments: prompting strategies, few-shot retrieval and scoring.
#[derive(Parser, Debug)]
#[command(name = "lateral", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate a corpus, print its statistics and optionally persist the shot index
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
        /// Accept incomplete reconstruction groups (reported as warnings)
        #[arg(long)]
        allow_partial_groups: bool,
        /// Write the train-split vector index here
        #[arg(long)]
        index: Option<PathBuf>,
        /// Model id whose embedder builds the index
        #[arg(long, default_value = "mock:echo-option")]
        model_id: String,
    },
    /// Run one experiment config
    Run {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reuse an index written by `ingest`
        #[arg(long)]
        index: Option<PathBuf>,
    },
    /// Run every [[run]] in a matrix file and print the summary table
    Matrix {
        file: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate one thesis per option; resumes from an existing output file
    Theses {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long)]
        model_id: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        parallelism: usize,
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
    },
    /// Export theses as instruction-tuning JSON Lines
    ExportFinetune {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        theses: PathBuf,
        /// Only riddles of this split (default: all)
        #[arg(long)]
        split: Option<Split>,
        #[arg(long, value_enum, default_value_t = Format::Completion)]
        format: Format,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a predictions file
    Score {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Print JSON instead of a table
        #[arg(long)]
        json: bool,
        /// Compare against another predictions file (deltas are this minus baseline)
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Flag deltas larger than this
        #[arg(long, default_value_t = 0.05)]
        threshold: f64,
    },
    /// Grouped hit-rate benchmark of a retrieval pipeline on the train split
    BenchRetrieval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value_t = Variant::Ordinary)]
        variant: Variant,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Only the first N riddles act as queries
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value = "mock:echo-option")]
        model_id: String,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Completion,
    Chat,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Variant {
    Ordinary,
    Ranked,
    Fusion,
}

impl From<Variant> for RetrievalVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Ordinary => RetrievalVariant::Ordinary,
            Variant::Ranked => RetrievalVariant::Ranked,
            Variant::Fusion => RetrievalVariant::Fusion,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(e) = cause.downcast_ref::<lateral_core::runner::Error>() {
            return e.exit_code() as u8;
        }
        if cause.downcast_ref::<ProviderError>().is_some() {
            return EXIT_PROVIDER;
        }
        if let Some(RetrievalError::Config(_)) = cause.downcast_ref::<RetrievalError>() {
            return EXIT_CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<EvalError>() {
            return match e {
                EvalError::Retrieval(RetrievalError::Config(_)) => EXIT_CONFIG,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

fn partial() -> LoadOptions {
    LoadOptions {
        allow_partial_groups: true,
    }
}

fn write(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Ingest {
            corpus,
            allow_partial_groups,
            index,
            model_id,
        } => {
            let opts = LoadOptions { allow_partial_groups };
            let (corpus, warnings) = load_corpus_with(&corpus, &opts)?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            let stats = corpus.stats()?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
            println!("checksum: {}", corpus.checksum());
            if let Some(path) = index {
                let providers = Providers::for_model(&model_id)?;
                let built = build_index(&corpus, SHOT_SPLIT, &*providers.embedder)?;
                built.save(&path)?;
                println!("index: {} entries -> {}", built.len(), path.display());
            }
        }
        Command::Run { config, out, index } => {
            let config = ExperimentConfig::load(&config)?;
            let ctx = RunContext::new();
            if let Some(path) = index {
                let (corpus, _) = load_corpus_with(&config.paths.corpus, &partial())?;
                let providers = ctx.providers(&config.provider.model_id)?;
                ctx.add_index(VectorIndex::load(&path, &providers.embedder.tag(), &corpus.checksum())?);
            }
            let record = run_experiment(&config, &ctx, Some(&out))?;
            match &record.report {
                Some(report) => print!("{}", report.to_table()),
                None => println!("split {} is unlabeled; predictions written", config.split),
            }
            println!(
                "fingerprint {}  requests {}  backend calls {}  -> {}",
                &record.fingerprint[..12],
                record.calls.generator_requests,
                record.calls.backend_generator_calls,
                out.display()
            );
            if record.provider_failures > 0 {
                eprintln!("{} riddles abstained after provider failures", record.provider_failures);
                return Ok(ExitCode::from(EXIT_PROVIDER));
            }
        }
        Command::Matrix { file, out } => {
            let configs = load_matrix(&file)?;
            let summary = run_matrix(&configs, &RunContext::new(), Some(&out))?;
            print!("{}", summary.to_table());
            if summary.failures() > 0 {
                eprintln!("{} of {} runs failed", summary.failures(), summary.rows.len());
                return Ok(ExitCode::from(EXIT_DATA));
            }
        }
        Command::Theses {
            corpus,
            split,
            model_id,
            out,
            cache,
            parallelism,
            temperature,
        } => {
            let (corpus, _) = load_corpus_with(&corpus, &partial())?;
            let existing = if out.exists() { load_theses(&out)? } else { Vec::new() };
            let providers = Providers::for_model(&model_id)?;
            let generator: Box<dyn Generator> = match cache {
                Some(path) => Box::new(CachedGenerator::new(
                    providers.generator.clone(),
                    Arc::new(ResponseCache::open(&path)?),
                )),
                None => Box::new(providers.generator.clone()),
            };
            let params = GenerationParams {
                temperature,
                ..GenerationParams::new(model_id)
            };
            let run = generate_theses(&corpus, split, &*generator, &params, existing, parallelism)?;
            save_theses(&run.records, &out)?;
            println!(
                "{} theses ({} requested now) -> {}",
                run.records.len(),
                run.generator_calls,
                out.display()
            );
            if !run.failures.is_empty() {
                eprintln!("{} pairs failed; rerun to retry them", run.failures.len());
                return Ok(ExitCode::from(EXIT_PROVIDER));
            }
        }
        Command::ExportFinetune {
            corpus,
            theses,
            split,
            format,
            out,
        } => {
            let (corpus, _) = load_corpus_with(&corpus, &partial())?;
            let theses = load_theses(&theses)?;
            let format = match format {
                Format::Completion => FinetuneFormat::Completion,
                Format::Chat => FinetuneFormat::Chat,
            };
            let body = export_finetune(&theses, &corpus, split, format)?;
            write(&out, &body)?;
            println!("{} records -> {}", body.lines().count(), out.display());
        }
        Command::Score {
            corpus,
            predictions,
            split,
            json,
            baseline,
            threshold,
        } => {
            let (corpus, _) = load_corpus_with(&corpus, &partial())?;
            let report = score(&load_predictions(&predictions)?, &corpus, split)?;
            if json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.to_table());
            }
            if let Some(path) = baseline {
                let base = score(&load_predictions(&path)?, &corpus, split)?;
                let deltas = diff_reports(&report, &base, threshold)?;
                if json {
                    println!("{}", serde_json::to_string_pretty(&deltas)?);
                } else {
                    for d in deltas {
                        let delta = d.delta.map_or("-".to_owned(), |v| format!("{v:+.3}"));
                        println!("{:<10} {:>8}{}", d.metric, delta, if d.flagged { "  *" } else { "" });
                    }
                }
            }
        }
        Command::BenchRetrieval {
            corpus,
            variant,
            k,
            limit,
            model_id,
            json,
        } => {
            if k == 0 {
                bail!(lateral_core::runner::Error::Config("k must be at least 1".into()));
            }
            let (corpus, _) = load_corpus_with(&corpus, &partial())?;
            let providers = Providers::for_model(&model_id)?;
            let index = build_index(&corpus, SHOT_SPLIT, &*providers.embedder)?;
            let params = GenerationParams::new(model_id);
            let config = RetrievalConfig::new(variant.into());
            let selector = ShotSelector {
                index: &index,
                embedder: &*providers.embedder,
                reranker: &*providers.reranker,
                generator: &*providers.generator,
                params: &params,
                config: &config,
            };
            let report = hit_rate_benchmark(&selector, &corpus, k, limit)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!(
                    "{:?} k={} queries={} hit_rate={:.4}",
                    report.variant,
                    report.k,
                    report.per_query.len(),
                    report.hit_rate
                );
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
