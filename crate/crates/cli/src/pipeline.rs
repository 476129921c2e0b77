//! Subcommand implementations shared by the binary and the test suite.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use urbanseg_core::cloud::{remap_labels, ClassSchema, PointCloud};
use urbanseg_core::metrics::{compute_report, ConfusionMatrix, MetricsReport};
use urbanseg_core::network::{
    argmax_class, forward, LayerConfig, Mode, ModelParams, TrainConfig,
};
use urbanseg_core::postprocess::{
    build_ground_model, height_filter, height_variation_filter, morphological_label_filter,
    radius_outlier_removal, statistical_outlier_removal, voxel_downsample, FilterReport,
    HeightRule, RuleAction,
};
use urbanseg_core::preprocess::{coverage_batches, make_batch, tile, tile_seed, Batch};
use urbanseg_core::synth::{generate_scene, generate_source_scene, SceneSpec};
use urbanseg_core::transfer::init_from_source;
use urbanseg_core::KdTree;

use crate::bundle::{batch_from_bundle, batch_to_bundle, cloud_from_bundle, cloud_to_bundle, ArrayBundle};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Provenance};
use crate::config::{class_id, load_postprocess, schema_by_name, ActionSpec, PostprocessFile, StepSpec};
use crate::error::{CliError, Result};
use crate::manifest::{fnv1a64_hex, RunManifest};
use crate::par::par_map;
use crate::ply::{read_ply, write_ply, PlyFormat, PlyReadOptions};

/// Execution context shared by all subcommands.
#[derive(Debug, Clone, Copy)]
pub struct Ctx {
    pub threads: usize,
    pub log_json: bool,
    pub quiet: bool,
}

impl Default for Ctx {
    fn default() -> Self {
        Ctx {
            threads: 1,
            log_json: false,
            quiet: false,
        }
    }
}

impl Ctx {
    pub fn log(&self, event: &str, detail: &str) {
        if self.quiet {
            return;
        }
        if self.log_json {
            println!(
                "{}",
                serde_json::json!({ "event": event, "detail": detail })
            );
        } else {
            println!("[{event}] {detail}");
        }
    }
}

fn resolve_schema(name: &str) -> Result<ClassSchema> {
    schema_by_name(name).ok_or_else(|| {
        urbanseg_core::Error::InvalidParam {
            name: "schema",
            reason: format!("unknown schema name `{name}`"),
        }
        .into()
    })
}

fn check_finite(cloud: &PointCloud) -> Result<()> {
    for (i, p) in cloud.positions.iter().enumerate() {
        if !p.iter().all(|c| c.is_finite()) {
            return Err(urbanseg_core::Error::NonFiniteCoordinate { index: i }.into());
        }
    }
    Ok(())
}

/// `synth`: generate a labeled scene and write it as binary PLY.
pub fn run_synth(ctx: &Ctx, spec: &SceneSpec, source: bool, out: &Path) -> Result<()> {
    let cloud = if source {
        generate_source_scene(spec)?
    } else {
        generate_scene(spec)?
    };
    write_ply(out, &cloud, PlyFormat::BinaryLittleEndian)?;
    let mut manifest = RunManifest::new("synth", serde_json::to_value(spec)?);
    manifest.seed("scene", spec.seed);
    manifest.output(out)?;
    manifest.write_for(out)?;
    ctx.log(
        "synth",
        &format!("{} points ({}) -> {}", cloud.len(), cloud.schema_name, out.display()),
    );
    Ok(())
}

/// `convert`: PLY <-> PCB1, chosen by file extensions, with optional label
/// remapping through a [`urbanseg_core::ClassMap`] on the way.
pub fn run_convert(
    ctx: &Ctx,
    input: &Path,
    out: &Path,
    opts: &PlyReadOptions,
    class_map: Option<&urbanseg_core::ClassMap>,
) -> Result<()> {
    let in_ext = input.extension().and_then(|e| e.to_str()).unwrap_or("");
    let out_ext = out.extension().and_then(|e| e.to_str()).unwrap_or("");
    let mut cloud = match in_ext {
        "ply" => read_ply(input, opts)?,
        "pcb" => cloud_from_bundle(&ArrayBundle::read(input)?, &opts.schema_name)?,
        other => {
            return Err(CliError::format(format!(
                "unsupported input extension `{other}`; use .ply or .pcb"
            )))
        }
    };
    if let Some(map) = class_map {
        cloud = remap_labels(&cloud, map).map_err(CliError::Validation)?;
    }
    match out_ext {
        "ply" => write_ply(out, &cloud, PlyFormat::BinaryLittleEndian)?,
        "pcb" => cloud_to_bundle(&cloud)?.write(out)?,
        other => {
            return Err(CliError::format(format!(
                "unsupported output extension `{other}`; use .ply or .pcb"
            )))
        }
    }
    let mut manifest = RunManifest::new(
        "convert",
        serde_json::json!({
            "input": input.display().to_string(),
            "class_map": class_map.map(|m| format!("{} -> {}", m.source_schema, m.target_schema)),
        }),
    );
    manifest.input(input)?;
    manifest.output(out)?;
    manifest.write_for(out)?;
    ctx.log("convert", &format!("{} -> {}", input.display(), out.display()));
    Ok(())
}

/// One batch file of a preprocessed set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchEntry {
    pub file: String,
    pub tile: (i64, i64),
    pub seed: u64,
    pub tile_points: usize,
    pub fnv1a64: String,
}

/// `manifest.json` of a preprocessed batch directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchSetManifest {
    pub tool: String,
    pub command: String,
    pub schema: String,
    pub config: LayerConfig,
    pub n_points: usize,
    pub tile_size: f64,
    pub seed: u64,
    pub input_path: String,
    pub input_fnv1a64: String,
    pub batches: Vec<BatchEntry>,
}

/// `preprocess`: tile a cloud and build one network-ready batch per tile.
pub fn run_preprocess(
    ctx: &Ctx,
    input: &Path,
    out_dir: &Path,
    opts: &PlyReadOptions,
    config: &LayerConfig,
    n_points: usize,
    tile_size: f64,
    seed: u64,
) -> Result<BatchSetManifest> {
    let raw = std::fs::read(input)?;
    let cloud = crate::ply::read_ply_bytes(&raw, opts)?;
    if cloud.is_empty() {
        return Err(urbanseg_core::Error::EmptyInput("preprocess input").into());
    }
    check_finite(&cloud)?;
    std::fs::create_dir_all(out_dir)?;
    let grid = tile(&cloud, tile_size)?;
    let tiles: Vec<((i64, i64), Vec<u32>)> = grid
        .tiles
        .iter()
        .map(|(k, v)| (*k, v.clone()))
        .collect();
    let batches: Vec<Result<Batch>> = par_map(&tiles, ctx.threads, |index, (tile_id, members)| {
        let tile_cloud = cloud.select(members);
        make_batch(
            &tile_cloud,
            Some(members),
            config,
            n_points,
            *tile_id,
            tile_seed(seed, index as u64),
        )
        .map_err(Into::into)
    });

    let mut entries = Vec::new();
    for (index, batch) in batches.into_iter().enumerate() {
        let batch = batch?;
        let file = format!(
            "batch_{index:04}_tile_{}_{}.pcb",
            batch.tile.0, batch.tile.1
        );
        let bytes = batch_to_bundle(&batch)?.to_bytes();
        std::fs::write(out_dir.join(&file), &bytes)?;
        entries.push(BatchEntry {
            file,
            tile: batch.tile,
            seed: batch.seed,
            tile_points: tiles[index].1.len(),
            fnv1a64: fnv1a64_hex(&bytes),
        });
    }

    let manifest = BatchSetManifest {
        tool: format!("urbanseg {}", env!("CARGO_PKG_VERSION")),
        command: "preprocess".into(),
        schema: opts.schema_name.clone(),
        config: config.clone(),
        n_points,
        tile_size,
        seed,
        input_path: input.display().to_string(),
        input_fnv1a64: fnv1a64_hex(&raw),
        batches: entries,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(out_dir.join("manifest.json"), text)?;
    ctx.log(
        "preprocess",
        &format!(
            "{} points -> {} batches of {n_points} in {}",
            cloud.len(),
            manifest.batches.len(),
            out_dir.display()
        ),
    );
    Ok(manifest)
}

/// Load a preprocessed batch directory.
pub fn load_batch_set(dir: &Path) -> Result<(BatchSetManifest, Vec<Batch>)> {
    let manifest: BatchSetManifest =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    let mut batches = Vec::with_capacity(manifest.batches.len());
    for entry in &manifest.batches {
        let bundle = ArrayBundle::read(&dir.join(&entry.file))?;
        batches.push(batch_from_bundle(&bundle, &manifest.schema)?);
    }
    Ok((manifest, batches))
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_val_miou: f64,
    pub history: Vec<urbanseg_core::network::EpochRecord>,
}

/// `train`: batch gradient descent with early stopping; writes the best
/// checkpoint and a CSV history.
#[allow(clippy::too_many_arguments)]
pub fn run_train(
    ctx: &Ctx,
    train_dir: &Path,
    val_dir: &Path,
    model_config: Option<LayerConfig>,
    train_config: &TrainConfig,
    init: Option<&Path>,
    out: &Path,
    history_path: Option<&Path>,
) -> Result<TrainSummary> {
    let (train_manifest, train_batches) = load_batch_set(train_dir)?;
    let (_val_manifest, val_batches) = load_batch_set(val_dir)?;

    let mut params = match init {
        Some(ckpt) => {
            let (params, _) = load_checkpoint(ckpt)?;
            if params.schema.name != train_manifest.schema {
                return Err(urbanseg_core::Error::SchemaMismatch {
                    expected: train_manifest.schema.clone(),
                    found: params.schema.name.clone(),
                }
                .into());
            }
            params
        }
        None => {
            let config = model_config.unwrap_or_else(|| train_manifest.config.clone());
            let schema = resolve_schema(&train_manifest.schema)?;
            ModelParams::init(config, schema, train_config.seed)?
        }
    };

    let history = urbanseg_core::network::train(
        &mut params,
        &train_batches,
        &val_batches,
        train_config,
    )?;
    let best = history
        .iter()
        .map(|r| r.val_miou)
        .fold(f64::NEG_INFINITY, f64::max);

    let provenance = Provenance {
        tool: format!("urbanseg {}", env!("CARGO_PKG_VERSION")),
        seed: Some(train_config.seed),
        epochs_trained: Some(history.len() as u32),
        source: init.map(|p| p.display().to_string()),
        note: None,
    };
    save_checkpoint(&params, &provenance, out)?;

    if let Some(path) = history_path {
        let mut csv = String::from("epoch,train_loss,val_miou\n");
        for r in &history {
            csv.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_miou));
        }
        std::fs::write(path, csv)?;
    }

    let mut manifest = RunManifest::new(
        "train",
        serde_json::json!({
            "train_dir": train_dir.display().to_string(),
            "val_dir": val_dir.display().to_string(),
            "train_config": train_config,
            "init": init.map(|p| p.display().to_string()),
        }),
    );
    manifest.seed("train", train_config.seed);
    manifest.input(&train_dir.join("manifest.json"))?;
    manifest.input(&val_dir.join("manifest.json"))?;
    manifest.output(out)?;
    if let Some(path) = history_path {
        manifest.output(path)?;
    }
    manifest.write_for(out)?;

    ctx.log(
        "train",
        &format!(
            "{} epochs, best val mIoU {:.4} -> {}",
            history.len(),
            best,
            out.display()
        ),
    );
    Ok(TrainSummary {
        epochs_run: history.len(),
        best_val_miou: best,
        history,
    })
}

/// `transfer`: initialize a target-schema model from a source checkpoint.
pub fn run_transfer(
    ctx: &Ctx,
    source: &Path,
    target_schema: &str,
    correspondence: Option<&BTreeMap<usize, usize>>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let (source_params, _) = load_checkpoint(source)?;
    let schema = resolve_schema(target_schema)?;
    let params = init_from_source(&source_params, &schema, correspondence, seed)?;
    let provenance = Provenance {
        tool: format!("urbanseg {}", env!("CARGO_PKG_VERSION")),
        seed: Some(seed),
        epochs_trained: None,
        source: Some(source.display().to_string()),
        note: Some("transfer-initialized head".into()),
    };
    save_checkpoint(&params, &provenance, out)?;
    let mut manifest = RunManifest::new(
        "transfer",
        serde_json::json!({
            "source": source.display().to_string(),
            "target_schema": target_schema,
            "correspondence": correspondence,
        }),
    );
    manifest.seed("head_init", seed);
    manifest.input(source)?;
    manifest.output(out)?;
    manifest.write_for(out)?;
    ctx.log(
        "transfer",
        &format!("{} -> {} ({target_schema})", source.display(), out.display()),
    );
    Ok(())
}

/// Label a cloud with a trained model, tile-parallel. Matches
/// `urbanseg_core::network::predict_labels` output exactly.
pub fn predict_cloud(
    ctx: &Ctx,
    cloud: &PointCloud,
    params: &ModelParams,
    n_points: usize,
    tile_size: f64,
    seed: u64,
) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(urbanseg_core::Error::EmptyInput("predict input").into());
    }
    params.validate_shapes().map_err(CliError::Validation)?;
    let grid = tile(cloud, tile_size)?;
    let tiles: Vec<((i64, i64), Vec<u32>)> =
        grid.tiles.iter().map(|(k, v)| (*k, v.clone())).collect();
    let per_tile: Vec<Result<Vec<(u32, u8)>>> =
        par_map(&tiles, ctx.threads, |index, (tile_id, members)| {
            let tile_cloud = cloud.select(members);
            let batches = coverage_batches(
                &tile_cloud,
                members,
                &params.config,
                n_points,
                *tile_id,
                tile_seed(seed, index as u64),
            )?;
            let mut assignments = Vec::new();
            for batch in &batches {
                let logits = forward(params, batch, Mode::Eval, 0)?;
                for (row, &src) in batch.source_indices.iter().enumerate() {
                    assignments.push((src, argmax_class(logits.row(row))));
                }
            }
            Ok(assignments)
        });
    let mut labels = vec![0u8; cloud.len()];
    for tile_result in per_tile {
        for (src, label) in tile_result? {
            labels[src as usize] = label;
        }
    }
    let mut out = cloud.clone();
    out.labels = Some(labels);
    out.schema_name = params.schema.name.clone();
    Ok(out)
}

/// `predict`: read, label, write.
pub fn run_predict(
    ctx: &Ctx,
    model: &Path,
    input: &Path,
    out: &Path,
    n_points: usize,
    tile_size: f64,
    seed: u64,
) -> Result<()> {
    let (params, _) = load_checkpoint(model)?;
    let cloud = read_ply(input, &PlyReadOptions::default())?;
    check_finite(&cloud)?;
    let labeled = predict_cloud(ctx, &cloud, &params, n_points, tile_size, seed)?;
    write_ply(out, &labeled, PlyFormat::BinaryLittleEndian)?;
    let mut manifest = RunManifest::new(
        "predict",
        serde_json::json!({
            "model": model.display().to_string(),
            "n_points": n_points,
            "tile_size": tile_size,
        }),
    );
    manifest.seed("predict", seed);
    manifest.input(model)?;
    manifest.input(input)?;
    manifest.output(out)?;
    manifest.write_for(out)?;
    ctx.log(
        "predict",
        &format!("{} points -> {}", labeled.len(), out.display()),
    );
    Ok(())
}

/// Outcome of one postprocessing step.
#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    pub op: String,
    pub report: FilterReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct PostprocessReport {
    pub schema: String,
    pub points_in: usize,
    pub points_out: usize,
    pub steps: Vec<StepReport>,
}

/// Apply an ordered postprocess pipeline to a labeled cloud.
pub fn apply_postprocess(
    cloud: &PointCloud,
    file: &PostprocessFile,
    schema: &ClassSchema,
) -> Result<(PointCloud, PostprocessReport)> {
    let mut current = cloud.clone();
    let mut steps = Vec::new();
    for step in &file.steps {
        let (next, op, report) = match step {
            StepSpec::StatisticalOutlierRemoval { k, std_ratio } => {
                let (next, report) = statistical_outlier_removal(&current, *k, *std_ratio)?;
                (next, "statistical_outlier_removal", report)
            }
            StepSpec::RadiusOutlierRemoval {
                radius,
                min_neighbors,
            } => {
                let (next, report) = radius_outlier_removal(&current, *radius, *min_neighbors)?;
                (next, "radius_outlier_removal", report)
            }
            StepSpec::VoxelDownsample { voxel_size } => {
                let (next, report) = voxel_downsample(&current, *voxel_size)?;
                (next, "voxel_downsample", report)
            }
            StepSpec::Morphology {
                mode,
                class,
                threshold,
                k,
            } => {
                let class = class_id(schema, class)?;
                let tree = KdTree::build(&current.positions)?;
                let graph = tree.knn_graph(*k, false)?;
                let (next, report) =
                    morphological_label_filter(&current, &graph, *mode, class, *threshold)?;
                (next, "morphology", report)
            }
            StepSpec::HeightFilter {
                cell_size,
                percentile,
                rules,
            } => {
                let ground = build_ground_model(&current, *cell_size, *percentile)?;
                let mut resolved = Vec::with_capacity(rules.len());
                for rule in rules {
                    resolved.push(HeightRule {
                        class: class_id(schema, &rule.class)?,
                        min_height: rule.min_height,
                        max_height: rule.max_height,
                        action: match &rule.action {
                            ActionSpec::Relabel(target) => {
                                RuleAction::RelabelTo(class_id(schema, target)?)
                            }
                            ActionSpec::Remove => RuleAction::Remove,
                        },
                    });
                }
                let (next, report) = height_filter(&current, &ground, &resolved)?;
                (next, "height_filter", report)
            }
            StepSpec::LocalHeightVariationFilter {
                radius,
                min_variation,
                class,
                action,
            } => {
                let target_class = class_id(schema, class)?;
                let action = match action {
                    ActionSpec::Relabel(name) => RuleAction::RelabelTo(class_id(schema, name)?),
                    ActionSpec::Remove => RuleAction::Remove,
                };
                let (next, report) = height_variation_filter(
                    &current,
                    *radius,
                    *min_variation,
                    target_class,
                    action,
                )?;
                (next, "local_height_variation_filter", report)
            }
        };
        steps.push(StepReport {
            op: op.to_string(),
            report,
        });
        current = next;
    }
    let report = PostprocessReport {
        schema: schema.name.clone(),
        points_in: cloud.len(),
        points_out: current.len(),
        steps,
    };
    Ok((current, report))
}

/// `postprocess`: ordered filter pipeline from a JSON rule file.
pub fn run_postprocess(
    ctx: &Ctx,
    input: &Path,
    rules: &Path,
    out: &Path,
    report_path: Option<&Path>,
    schema_name: &str,
) -> Result<PostprocessReport> {
    let schema = resolve_schema(schema_name)?;
    let cloud = read_ply(
        input,
        &PlyReadOptions {
            schema_name: schema_name.to_string(),
            ..PlyReadOptions::default()
        },
    )?;
    check_finite(&cloud)?;
    let file = load_postprocess(rules)?;
    let (filtered, report) = apply_postprocess(&cloud, &file, &schema)?;
    write_ply(out, &filtered, PlyFormat::BinaryLittleEndian)?;
    if let Some(path) = report_path {
        let mut text = serde_json::to_string_pretty(&report)?;
        text.push('\n');
        std::fs::write(path, text)?;
    }
    let mut manifest = RunManifest::new(
        "postprocess",
        serde_json::json!({
            "rules": rules.display().to_string(),
            "schema": schema_name,
        }),
    );
    manifest.input(input)?;
    manifest.input(rules)?;
    manifest.output(out)?;
    if let Some(path) = report_path {
        manifest.output(path)?;
    }
    manifest.write_for(out)?;
    ctx.log(
        "postprocess",
        &format!(
            "{} -> {} points in {} steps",
            report.points_in,
            report.points_out,
            report.steps.len()
        ),
    );
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluationOutput {
    pub schema: String,
    pub class_names: Vec<String>,
    pub report: MetricsReport,
}

/// `evaluate`: per-class IoU/Acc/F1 of a prediction against ground truth.
pub fn run_evaluate(
    ctx: &Ctx,
    pred: &Path,
    truth: &Path,
    out: Option<&Path>,
    schema_name: &str,
) -> Result<EvaluationOutput> {
    let schema = resolve_schema(schema_name)?;
    let opts = PlyReadOptions {
        schema_name: schema_name.to_string(),
        ..PlyReadOptions::default()
    };
    let pred_cloud = read_ply(pred, &opts)?;
    let truth_cloud = read_ply(truth, &opts)?;
    if pred_cloud.len() != truth_cloud.len() {
        return Err(urbanseg_core::Error::ShapeMismatch(format!(
            "prediction has {} points, ground truth {}",
            pred_cloud.len(),
            truth_cloud.len()
        ))
        .into());
    }
    let pred_labels = pred_cloud.labels().map_err(CliError::Validation)?;
    let truth_labels = truth_cloud.labels().map_err(CliError::Validation)?;
    let mut cm = ConfusionMatrix::new(schema.len());
    cm.accumulate(truth_labels, pred_labels)?;
    let report = compute_report(&cm)?;
    let output = EvaluationOutput {
        schema: schema.name.clone(),
        class_names: schema.class_names.clone(),
        report,
    };
    if let Some(path) = out {
        let mut text = serde_json::to_string_pretty(&output)?;
        text.push('\n');
        std::fs::write(path, text)?;
        let mut manifest = RunManifest::new(
            "evaluate",
            serde_json::json!({ "schema": schema_name }),
        );
        manifest.input(pred)?;
        manifest.input(truth)?;
        manifest.output(path)?;
        manifest.write_for(path)?;
    }
    ctx.log(
        "evaluate",
        &format!(
            "overall accuracy {:.4}, mean IoU {:?}",
            output.report.overall_accuracy, output.report.mean_iou
        ),
    );
    Ok(output)
}

/// Expand a scene spec path (or default) plus overrides into a spec.
pub fn scene_spec_from(path: Option<&Path>, seed: Option<u64>) -> Result<SceneSpec> {
    let mut spec = match path {
        Some(p) => crate::config::load_scene_spec(p)?,
        None => SceneSpec::default(),
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    Ok(spec)
}

/// Convenience used by tests: preprocess an in-memory cloud without going
/// through a PLY file first.
pub fn preprocess_cloud(
    ctx: &Ctx,
    cloud: &PointCloud,
    out_dir: &Path,
    config: &LayerConfig,
    n_points: usize,
    tile_size: f64,
    seed: u64,
) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let ply_path = out_dir.join("input.ply");
    write_ply(&ply_path, cloud, PlyFormat::BinaryLittleEndian)?;
    let opts = PlyReadOptions {
        schema_name: cloud.schema_name.clone(),
        ..PlyReadOptions::default()
    };
    run_preprocess(
        ctx, &ply_path, out_dir, &opts, config, n_points, tile_size, seed,
    )?;
    Ok(out_dir.to_path_buf())
}
