use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use condensenext_core::analysis::{count_costs_with, reduction_percent, CostReport, FlopConvention};
use condensenext_core::arch::{build, ModelSpec, Variant};
use condensenext_core::checkpoint::{read_checkpoint, write_checkpoint, CheckpointMeta};
use condensenext_core::data::{class_histogram, load_dir, subset, ImageRecord, Normalization};
use condensenext_core::train::{evaluate, train, LossKind, TrainConfig, TrainData, TrainEvent, TrainingReport};
use condensenext_core::Error;
use serde_json::json;

#[derive(Parser)]
#[command(name = "condensenext", version, about = "Train, evaluate and analyze CondenseNet-style models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Baseline,
    Condensenext,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Baseline => Variant::Baseline,
            VariantArg::Condensenext => Variant::CondenseNeXt,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    CbFocal,
    CrossEntropy,
}

#[derive(Subcommand)]
enum Command {
    /// Print per-layer FLOP and parameter counts plus the reduction over the baseline.
    Analyze {
        /// Overrides the config's variant; condensenext when neither is given.
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        /// Model description file of `key = value` lines.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
        /// Count a multiply-accumulate as two FLOPs.
        #[arg(long)]
        mac2: bool,
    },
    /// Train on CIFAR-10 binary batches and write a checkpoint and report.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Stratified training subset size.
        #[arg(long)]
        subset: Option<usize>,
        /// Validation subset size; defaults to the training subset size.
        #[arg(long)]
        val_subset: Option<usize>,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Report path; defaults to `<out>.report.txt`.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Overrides the config's variant; condensenext when neither is given.
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, value_enum, default_value = "cb-focal")]
        loss: LossArg,
        #[arg(long)]
        no_augment: bool,
        /// Leave optimizer velocities out of the checkpoint.
        #[arg(long)]
        weights_only: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Top-1 accuracy of a checkpoint on the test batch.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        subset: Option<usize>,
        #[arg(long, default_value_t = 100)]
        batch_size: usize,
    },
    /// Convert a training report to a JSON summary.
    ExportReport {
        #[arg(long)]
        input: PathBuf,
        /// Written to stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load_spec(config: Option<&Path>, variant: Option<VariantArg>) -> condensenext_core::Result<ModelSpec> {
    let spec = match config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
            ModelSpec::from_config(&text)?
        }
        None => ModelSpec::cifar(Variant::CondenseNeXt),
    };
    Ok(match variant {
        Some(v) => spec.with_variant(v.into()),
        None => spec,
    })
}

/// Costs of the deployed model, i.e. after every condensing stage.
fn cost(spec: &ModelSpec, convention: FlopConvention) -> condensenext_core::Result<CostReport> {
    let mut graph = build(spec, 0)?;
    graph.condense_all()?;
    Ok(count_costs_with(&graph, convention))
}

/// Stdout writer that tolerates a closed pipe (`analyze | head`).
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn analyze(variant: Option<VariantArg>, config: Option<&Path>, format: Format, mac2: bool) -> condensenext_core::Result<()> {
    let spec = load_spec(config, variant)?;
    let convention = if mac2 { FlopConvention::Mac2 } else { FlopConvention::Mac1 };
    let report = cost(&spec, convention)?;
    let base = cost(&spec.with_variant(Variant::Baseline), convention)?;
    let flops = reduction_percent(base.total_flops, report.total_flops);
    let params = reduction_percent(base.total_params, report.total_params);
    match format {
        Format::Table => {
            emit(&format!(
                "{}reduction vs baseline: {flops:.2}% FLOPs, {params:.2}% params (baseline {} flops, {} params)\n",
                report.to_table(),
                base.total_flops,
                base.total_params
            ));
        }
        Format::Json => {
            let doc = json!({
                "report": report,
                "baseline": { "total_flops": base.total_flops, "total_params": base.total_params },
                "reduction_percent": {
                    "flops": (flops * 100.0).round() / 100.0,
                    "params": (params * 100.0).round() / 100.0,
                },
            });
            emit(&(serde_json::to_string_pretty(&doc).expect("json") + "\n"));
        }
    }
    Ok(())
}

fn pick(records: Vec<ImageRecord>, n: Option<usize>, seed: u64) -> condensenext_core::Result<Vec<ImageRecord>> {
    match n {
        Some(n) if n < records.len() => Ok(subset(&records, n, seed)?.into_iter().map(|i| records[i].clone()).collect()),
        _ => Ok(records),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_train(
    data: &Path,
    n: Option<usize>,
    val_n: Option<usize>,
    cfg: TrainConfig,
    out: &Path,
    report_path: Option<PathBuf>,
    spec: ModelSpec,
    weights_only: bool,
    quiet: bool,
) -> condensenext_core::Result<()> {
    cfg.validate()?;
    spec.validate()?;
    let splits = load_dir(data)?;
    let train_set = pick(splits.train, n, cfg.seed)?;
    let val_set = pick(splits.test, val_n.or(n), cfg.seed)?;
    let norm = Normalization::default();
    let mut graph = build(&spec, cfg.seed)?;
    eprintln!(
        "training {} on {} images, validating on {}, {} epochs",
        spec.variant,
        train_set.len(),
        val_set.len(),
        cfg.epochs
    );
    let outcome = train(
        &mut graph,
        &cfg,
        &TrainData {
            train: &train_set,
            val: &val_set,
            norm,
        },
        |ev, _| {
            if quiet {
                return;
            }
            match ev {
                TrainEvent::Condensed(e) => eprintln!("{}", e.to_line()),
                TrainEvent::Epoch(r) => eprintln!(
                    "epoch {} lr {:.5} train loss {:.4} acc {:.4} val loss {:.4} acc {:.4}",
                    r.epoch, r.lr, r.train_loss, r.train_acc, r.val_loss, r.val_acc
                ),
                TrainEvent::Step { .. } => {}
            }
        },
    )?;
    let meta = CheckpointMeta {
        norm,
        class_counts: class_histogram(&train_set).to_vec(),
        epoch: cfg.epochs,
    };
    let size = write_checkpoint(out, &graph, &meta, (!weights_only).then_some(&outcome.optimizer))?;
    let report_path = report_path.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".report.txt");
        PathBuf::from(p)
    });
    fs::write(&report_path, outcome.report.to_text())?;
    println!("checkpoint: {} ({size} bytes)", out.display());
    println!("report: {}", report_path.display());
    Ok(())
}

fn run_eval(model: &Path, data: &Path, n: Option<usize>, batch_size: usize) -> condensenext_core::Result<()> {
    let ckpt = read_checkpoint(model)?;
    let test = pick(load_dir(data)?.test, n, 0)?;
    let r = evaluate(&ckpt.graph, &test, &ckpt.meta.norm, batch_size)?;
    println!("top1: {:.4} ({}/{})", r.accuracy, r.correct, r.total);
    Ok(())
}

fn export_report(input: &Path, output: Option<&Path>) -> condensenext_core::Result<()> {
    let text = fs::read_to_string(input).map_err(|e| Error::Data(format!("cannot read {}: {e}", input.display())))?;
    let json = TrainingReport::parse(&text)?.summary()?.to_json();
    match output {
        Some(p) => fs::write(p, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}

fn run(cli: Cli) -> condensenext_core::Result<()> {
    match cli.command {
        Command::Analyze {
            variant,
            config,
            format,
            mac2,
        } => analyze(variant, config.as_deref(), format, mac2),
        Command::Train {
            data,
            subset,
            val_subset,
            epochs,
            seed,
            out,
            report,
            variant,
            config,
            batch_size,
            lr,
            loss,
            no_augment,
            weights_only,
            quiet,
        } => {
            let defaults = TrainConfig::default();
            let cfg = TrainConfig {
                epochs,
                seed,
                batch_size,
                base_lr: lr,
                augment: !no_augment,
                loss: match loss {
                    LossArg::CbFocal => defaults.loss,
                    LossArg::CrossEntropy => LossKind::CrossEntropy,
                },
                ..defaults
            };
            // Reject bad flags before touching the data directory.
            cfg.validate()?;
            let spec = load_spec(config.as_deref(), variant)?;
            run_train(&data, subset, val_subset, cfg, &out, report, spec, weights_only, quiet)
        }
        Command::Eval {
            model,
            data,
            subset,
            batch_size,
        } => run_eval(&model, &data, subset, batch_size),
        Command::ExportReport { input, output } => export_report(&input, output.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 1 })
        }
    }
}
