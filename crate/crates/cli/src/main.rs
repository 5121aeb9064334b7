//! Single entry point for the training engine: synthetic-data generation,
//! training, evaluation, multi-run suites, embedding/analysis, and the
//! gradient self-check.
//!
//! The config file is the source of truth; flags are targeted overrides.
//! Every run writes a resolved-config echo next to its outputs. Exit codes:
//! 0 success, 2 config error, 3 data error, 4 numeric failure, 5 self-check
//! failure.

use clap::{Parser, Subcommand};
use dann_core::analysis::{domain_gap, export_embedding, extract_features, tsne, TsneConfig};
use dann_core::checkpoint;
use dann_core::data::{generate_synthetic, Manifest, Split, SynthConfig};
use dann_core::engine::{evaluate, run_suite, train, RunConfig, TrainMode};
use dann_core::model::DannConfig;
use dann_core::tensor::{Precision, Scalar};
use dann_core::Error as CoreError;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_CHECK: u8 = 5;

#[derive(Parser)]
#[command(
    name = "dann",
    version,
    about = "Domain-adversarial training on two-domain patch data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-domain patch set (images + manifest + stats).
    Synth {
        /// Output directory for images/, manifest.csv, manifest.stats.json.
        #[arg(long)]
        out: PathBuf,
        /// TOML file holding a synth config; defaults to the benchmark set.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Patches per class per domain.
        #[arg(long)]
        patches: Option<usize>,
        #[arg(long)]
        patch_size: Option<usize>,
    },
    /// Train one model from a run config.
    Train {
        /// TOML run config; defaults to the desk-scale benchmark config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<TrainMode>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, value_parser = parse_precision)]
        precision: Option<Precision>,
    },
    /// Evaluate a checkpoint on a manifest split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Write the metrics JSON here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train several runs with independent seeds and aggregate accuracies.
    Suite {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<TrainMode>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, value_parser = parse_precision)]
        precision: Option<Precision>,
    },
    /// Extract stem features and export them (optionally t-SNE embedded).
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Output TSV path.
        #[arg(long)]
        out: PathBuf,
        /// Restrict to one split; omit for all records.
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
        /// Run exact t-SNE; otherwise export raw features.
        #[arg(long)]
        tsne: bool,
        #[arg(long, default_value_t = 30.0)]
        perplexity: f64,
        #[arg(long, default_value_t = 1000)]
        iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Quantify domain separability of stem features (5-NN, 5-fold CV).
    Gap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite and report the worst error.
    Gradcheck {
        #[arg(long, default_value_t = 1234)]
        seed: u64,
    },
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    match s {
        "dann" => Ok(TrainMode::Dann),
        "baseline" => Ok(TrainMode::Baseline),
        other => Err(format!("unknown mode '{other}' (expected dann|baseline)")),
    }
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(format!("unknown precision '{other}' (expected f32|f64)")),
    }
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: CoreError| e.to_string())
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::Config(_)) => EXIT_CONFIG,
        Some(CoreError::NonFiniteLoss { .. }) | Some(CoreError::NumericDomain { .. }) => {
            EXIT_NUMERIC
        }
        Some(CoreError::ShapeMismatch { .. })
        | Some(CoreError::InvalidShape { .. })
        | Some(CoreError::NonScalarBackward { .. }) => EXIT_CONFIG,
        Some(_) => EXIT_DATA,
        None => EXIT_CONFIG,
    }
}

fn category_for(code: u8) -> &'static str {
    match code {
        EXIT_CONFIG => "config-error",
        EXIT_DATA => "data-error",
        EXIT_NUMERIC => "numeric-failure",
        EXIT_CHECK => "check-failure",
        _ => "error",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            let code = exit_code_for(&err);
            eprintln!("{}: {err}", category_for(code));
            ExitCode::from(code)
        }
    }
}

/// The desk-scale run configuration used when no config file is given:
/// 64 px patches, the benchmark synthetic set, 3 cycles of 5 epochs.
fn desk_default_run_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = DannConfig {
        patch_size: 64,
        ..DannConfig::default()
    };
    cfg.data.synth = Some(SynthConfig::benchmark(0));
    cfg
}

fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| CoreError::Config(format!("{}: {e}", path.display())).into())
}

fn load_run_config(
    config: Option<&Path>,
    seed: Option<u64>,
    mode: Option<TrainMode>,
    out_dir: Option<PathBuf>,
    precision: Option<Precision>,
) -> anyhow::Result<RunConfig> {
    let mut cfg: RunConfig = match config {
        Some(path) => load_toml(path)?,
        None => desk_default_run_config(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(mode) = mode {
        cfg.mode = mode;
    }
    if let Some(dir) = out_dir {
        cfg.out_dir = Some(dir);
    }
    if let Some(p) = precision {
        cfg.precision = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_resolved_config<T: serde::Serialize>(dir: &Path, cfg: &T) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("resolved_config.toml"),
        toml::to_string_pretty(cfg).map_err(|e| CoreError::Config(e.to_string()))?,
    )
    .map_err(CoreError::from)?;
    Ok(())
}

fn dispatch(command: Command) -> anyhow::Result<u8> {
    match command {
        Command::Synth {
            out,
            config,
            seed,
            patches,
            patch_size,
        } => {
            let mut cfg: SynthConfig = match config {
                Some(path) => load_toml(&path)?,
                None => SynthConfig::benchmark(0),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(p) = patches {
                cfg.per_class_per_domain = p;
            }
            if let Some(s) = patch_size {
                cfg.patch_size = s;
            }
            let manifest = generate_synthetic(&cfg)?;
            manifest.materialize(&out)?;
            write_resolved_config(&out, &cfg)?;
            println!(
                "wrote {} patches ({} px) to {}",
                manifest.records.len(),
                cfg.patch_size,
                out.display()
            );
            Ok(0)
        }
        Command::Train {
            config,
            seed,
            mode,
            out_dir,
            precision,
        } => {
            let cfg = load_run_config(config.as_deref(), seed, mode, out_dir, precision)?;
            match cfg.precision {
                Precision::F32 => run_train::<f32>(&cfg),
                Precision::F64 => run_train::<f64>(&cfg),
            }
        }
        Command::Eval {
            checkpoint,
            manifest,
            split,
            out,
        } => {
            let manifest = Manifest::load_csv(&manifest)?;
            let metrics = match checkpoint::peek_precision(&checkpoint)? {
                Precision::F32 => {
                    let loaded = checkpoint::load::<f32>(&checkpoint)?;
                    evaluate(&loaded.model, &manifest, split)?
                }
                Precision::F64 => {
                    let loaded = checkpoint::load::<f64>(&checkpoint)?;
                    evaluate(&loaded.model, &manifest, split)?
                }
            };
            let report = serde_json::json!({
                "checkpoint": checkpoint,
                "split": split.to_string(),
                "metrics": metrics,
            });
            let text = serde_json::to_string_pretty(&report).map_err(CoreError::from)?;
            println!("{text}");
            if let Some(path) = out {
                std::fs::write(path, text).map_err(CoreError::from)?;
            }
            Ok(0)
        }
        Command::Suite {
            config,
            runs,
            seed,
            mode,
            out_dir,
            precision,
        } => {
            let cfg = load_run_config(config.as_deref(), seed, mode, out_dir, precision)?;
            let summary = match cfg.precision {
                Precision::F32 => run_suite::<f32>(&cfg, runs)?,
                Precision::F64 => run_suite::<f64>(&cfg, runs)?,
            };
            let mode_name = match cfg.mode {
                TrainMode::Dann => "dann",
                TrainMode::Baseline => "baseline",
            };
            let text = serde_json::to_string_pretty(&summary).map_err(CoreError::from)?;
            println!("{text}");
            if let Some(dir) = &cfg.out_dir {
                write_resolved_config(dir, &cfg)?;
                std::fs::write(dir.join(format!("suite_summary_{mode_name}.json")), &text)
                    .map_err(CoreError::from)?;
            }
            Ok(0)
        }
        Command::Embed {
            checkpoint,
            manifest,
            out,
            split,
            tsne: run_tsne,
            perplexity,
            iterations,
            seed,
        } => {
            let manifest = Manifest::load_csv(&manifest)?;
            let embedding = match checkpoint::peek_precision(&checkpoint)? {
                Precision::F32 => {
                    let loaded = checkpoint::load::<f32>(&checkpoint)?;
                    extract_features(&loaded.model, &manifest, split)?
                }
                Precision::F64 => {
                    let loaded = checkpoint::load::<f64>(&checkpoint)?;
                    extract_features(&loaded.model, &manifest, split)?
                }
            };
            if run_tsne {
                let cfg = TsneConfig {
                    perplexity,
                    iterations,
                    seed,
                    ..TsneConfig::default()
                };
                let output = tsne(&embedding, &cfg)?;
                export_embedding(&out, &output.coords, &embedding.meta)?;
                println!(
                    "embedded {} points; final KL {:.4}; wrote {}",
                    embedding.len(),
                    output.kl_trace.last().map(|&(_, kl)| kl).unwrap_or(f64::NAN),
                    out.display()
                );
            } else {
                export_features(&out, &embedding)?;
                println!("wrote {} feature rows to {}", embedding.len(), out.display());
            }
            Ok(0)
        }
        Command::Gap {
            checkpoint,
            manifest,
            split,
            out,
        } => {
            let manifest = Manifest::load_csv(&manifest)?;
            let embedding = match checkpoint::peek_precision(&checkpoint)? {
                Precision::F32 => {
                    let loaded = checkpoint::load::<f32>(&checkpoint)?;
                    extract_features(&loaded.model, &manifest, split)?
                }
                Precision::F64 => {
                    let loaded = checkpoint::load::<f64>(&checkpoint)?;
                    extract_features(&loaded.model, &manifest, split)?
                }
            };
            let report = domain_gap(&embedding)?;
            let text = serde_json::to_string_pretty(&report).map_err(CoreError::from)?;
            println!("{text}");
            if let Some(path) = out {
                std::fs::write(path, text).map_err(CoreError::from)?;
            }
            Ok(0)
        }
        Command::Gradcheck { seed } => {
            let report = dann_core::gradcheck::run_full_suite(seed)?;
            for case in &report.cases {
                println!(
                    "{:24} max rel error {:.3e}  {}",
                    case.name,
                    case.max_rel_error,
                    if case.passed { "ok" } else { "FAIL" }
                );
            }
            println!(
                "max relative error {:.6e} (tolerance {:.0e})",
                report.max_rel_error, report.tolerance
            );
            if report.passed {
                Ok(0)
            } else {
                Ok(EXIT_CHECK)
            }
        }
    }
}

fn run_train<T: Scalar>(cfg: &RunConfig) -> anyhow::Result<u8> {
    let manifest = cfg.prepare_manifest()?;
    if let Some(dir) = &cfg.out_dir {
        write_resolved_config(dir, cfg)?;
    }
    let outcome = train::<T>(cfg, &manifest)?;
    let eval = evaluate(&outcome.model, &manifest, Split::Test)?;
    let summary = serde_json::json!({
        "final_eval": eval,
        "epochs": outcome.metrics.records.len(),
        "zero_source_batches": outcome.zero_source_batches,
        "final_checkpoint": outcome.final_checkpoint,
    });
    let text = serde_json::to_string_pretty(&summary).map_err(CoreError::from)?;
    println!("{text}");
    if let Some(dir) = &cfg.out_dir {
        std::fs::write(dir.join("summary.json"), &text).map_err(CoreError::from)?;
    }
    Ok(0)
}

/// Raw feature export: `f0..f{d-1}  dataset  y_C  y_D` per row.
fn export_features(path: &Path, embedding: &dann_core::analysis::EmbeddingSet) -> anyhow::Result<()> {
    let mut out = String::new();
    for j in 0..embedding.dim {
        out.push_str(&format!("f{j}\t"));
    }
    out.push_str("dataset\ty_C\ty_D\n");
    for (i, meta) in embedding.meta.iter().enumerate() {
        for v in embedding.row(i) {
            out.push_str(&format!("{v}\t"));
        }
        out.push_str(&format!("{}\t{}\t{}\n", meta.dataset, meta.y_c, meta.y_d));
    }
    std::fs::write(path, out).map_err(CoreError::from)?;
    Ok(())
}
