use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use urbanseg::checkpoint::load_checkpoint;
use urbanseg::config::{
    load_correspondence, load_layer_config, load_train_config, schema_by_name,
};
use urbanseg::pipeline::{self, Ctx};
use urbanseg::ply::PlyReadOptions;
use urbanseg::CliError;
use urbanseg_core::network::{LayerConfig, TrainConfig};

/// Urban point-cloud semantic segmentation pipeline.
#[derive(Parser)]
#[command(name = "urbanseg", version, about)]
struct Cli {
    /// Worker threads for tile-parallel stages (never changes results).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Emit machine-readable JSON log lines instead of plain text.
    #[arg(long, global = true)]
    log_json: bool,
    /// Suppress progress logging.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled urban scene as binary PLY.
    Synth(SynthArgs),
    /// Convert between PLY and PCB1 cloud bundles.
    Convert(ConvertArgs),
    /// Tile a cloud and build fixed-size network batches.
    Preprocess(PreprocessArgs),
    /// Train a segmentation model on preprocessed batches.
    Train(TrainArgs),
    /// Initialize a target-schema model from a source checkpoint.
    Transfer(TransferArgs),
    /// Label a cloud with a trained model.
    Predict(PredictArgs),
    /// Apply an ordered cleanup-filter pipeline to a labeled cloud.
    Postprocess(PostprocessArgs),
    /// Compare a predicted cloud against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Scene spec JSON; defaults apply when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Override the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Generate the eight-class pre-training scene instead of the
    /// five-class target scene.
    #[arg(long)]
    source: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Label property search order for PLY input.
    #[arg(long = "label-property")]
    label_properties: Vec<String>,
    /// Schema name stamped on the loaded cloud.
    #[arg(long, default_value = "urban5")]
    schema: String,
    /// Class-map JSON applied to the labels during conversion.
    #[arg(long, conflicts_with = "builtin_class_map")]
    class_map: Option<PathBuf>,
    /// Built-in remap table, e.g. `sensaturban13:urban5`.
    #[arg(long)]
    builtin_class_map: Option<String>,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Model config JSON (graph parameters must match later training).
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long, default_value_t = 4096)]
    n_points: usize,
    #[arg(long, default_value_t = 250.0)]
    tile_size: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "urban5")]
    schema: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Preprocessed training batch directory.
    #[arg(long)]
    batches: PathBuf,
    /// Preprocessed validation batch directory.
    #[arg(long)]
    val_batches: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// CSV training history (epoch, train_loss, val_miou).
    #[arg(long)]
    history: Option<PathBuf>,
    /// Model config JSON; defaults to the batch manifest's config.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Train config JSON; flags below override its values.
    #[arg(long)]
    train_config: Option<PathBuf>,
    /// Checkpoint to fine-tune from (e.g. a transfer-initialized model).
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Update only the classification head.
    #[arg(long)]
    freeze_backbone: bool,
}

#[derive(Args)]
struct TransferArgs {
    /// Source checkpoint whose backbone is reused.
    #[arg(long)]
    source: PathBuf,
    #[arg(long, default_value = "urban5")]
    target_schema: String,
    /// JSON `{target_class_name: source_class_name}` head-copy map.
    #[arg(long)]
    correspondence: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4096)]
    n_points: usize,
    #[arg(long, default_value_t = 250.0)]
    tile_size: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PostprocessArgs {
    #[arg(long)]
    input: PathBuf,
    /// Ordered filter pipeline JSON.
    #[arg(long)]
    rules: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-step filter report JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value = "urban5")]
    schema: String,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Metrics report JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the per-class Acc/IoU/F1 table.
    #[arg(long)]
    table: bool,
    #[arg(long, default_value = "urban5")]
    schema: String,
}

fn run(cli: Cli) -> urbanseg::Result<()> {
    let ctx = Ctx {
        threads: cli.threads,
        log_json: cli.log_json,
        quiet: cli.quiet,
    };
    match cli.command {
        Command::Synth(args) => {
            let spec = pipeline::scene_spec_from(args.spec.as_deref(), args.seed)?;
            pipeline::run_synth(&ctx, &spec, args.source, &args.out)
        }
        Command::Convert(args) => {
            let mut opts = PlyReadOptions {
                schema_name: args.schema,
                ..PlyReadOptions::default()
            };
            if !args.label_properties.is_empty() {
                opts.label_properties = args.label_properties;
            }
            let class_map = match (&args.class_map, &args.builtin_class_map) {
                (Some(path), _) => Some(urbanseg::config::load_class_map(path)?),
                (None, Some(pair)) => {
                    let (source, target) = pair.split_once(':').ok_or_else(|| {
                        CliError::format(format!("`{pair}` is not of the form source:target"))
                    })?;
                    Some(urbanseg::config::builtin_class_map(source, target).ok_or_else(
                        || {
                            CliError::Validation(urbanseg_core::Error::InvalidParam {
                                name: "builtin_class_map",
                                reason: format!("no built-in table for `{pair}`"),
                            })
                        },
                    )?)
                }
                (None, None) => None,
            };
            pipeline::run_convert(&ctx, &args.input, &args.out, &opts, class_map.as_ref())
        }
        Command::Preprocess(args) => {
            let config = match &args.model_config {
                Some(path) => load_layer_config(path)?,
                None => LayerConfig::default(),
            };
            let opts = PlyReadOptions {
                schema_name: args.schema,
                ..PlyReadOptions::default()
            };
            pipeline::run_preprocess(
                &ctx,
                &args.input,
                &args.out_dir,
                &opts,
                &config,
                args.n_points,
                args.tile_size,
                args.seed,
            )
            .map(|_| ())
        }
        Command::Train(args) => {
            let model_config = match &args.model_config {
                Some(path) => Some(load_layer_config(path)?),
                None => None,
            };
            let mut train_config = match &args.train_config {
                Some(path) => load_train_config(path)?,
                None => TrainConfig::default(),
            };
            if let Some(epochs) = args.epochs {
                train_config.epochs = epochs;
            }
            if let Some(lr) = args.lr {
                train_config.adam.lr = lr;
            }
            if let Some(patience) = args.patience {
                train_config.patience = patience;
            }
            if let Some(seed) = args.seed {
                train_config.seed = seed;
            }
            if args.freeze_backbone {
                train_config.freeze_backbone = true;
            }
            pipeline::run_train(
                &ctx,
                &args.batches,
                &args.val_batches,
                model_config,
                &train_config,
                args.init.as_deref(),
                &args.out,
                args.history.as_deref(),
            )
            .map(|_| ())
        }
        Command::Transfer(args) => {
            let correspondence: Option<BTreeMap<usize, usize>> = match &args.correspondence {
                Some(path) => {
                    let target = schema_by_name(&args.target_schema).ok_or_else(|| {
                        CliError::Validation(urbanseg_core::Error::InvalidParam {
                            name: "target_schema",
                            reason: format!("unknown schema `{}`", args.target_schema),
                        })
                    })?;
                    let (source_params, _) = load_checkpoint(&args.source)?;
                    Some(load_correspondence(path, &target, &source_params.schema)?)
                }
                None => None,
            };
            pipeline::run_transfer(
                &ctx,
                &args.source,
                &args.target_schema,
                correspondence.as_ref(),
                args.seed,
                &args.out,
            )
        }
        Command::Predict(args) => pipeline::run_predict(
            &ctx,
            &args.model,
            &args.input,
            &args.out,
            args.n_points,
            args.tile_size,
            args.seed,
        ),
        Command::Postprocess(args) => pipeline::run_postprocess(
            &ctx,
            &args.input,
            &args.rules,
            &args.out,
            args.report.as_deref(),
            &args.schema,
        )
        .map(|_| ()),
        Command::Evaluate(args) => {
            let output = pipeline::run_evaluate(
                &ctx,
                &args.pred,
                &args.truth,
                args.out.as_deref(),
                &args.schema,
            )?;
            if args.table {
                print!("{}", output.report.render_table(&output.class_names));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("urbanseg: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
