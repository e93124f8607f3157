//! Command-line front end: dataset synthesis, experiment runs, threshold
//! sweeps, significance tests, and the reference-table recomputation.
//!
//! Exit code 0 on success; on failure a machine-readable JSON error goes to
//! stderr and the exit code is nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fusway::dataset::{DatasetReader, DatasetWriter};
use fusway::fixtures;
use fusway::pipeline::{generate_pool, run_experiment, RunConfig};
use fusway::report::write_report_dir;
use fusway::scene::ClassTaxonomy;
use fusway::vit::save_checkpoint;
use fusway::{Error, Result};

#[derive(Parser)]
#[command(name = "fusway", version, about = "Audio-visual fusion pipeline for rail defect detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a scene dataset (manifest.json + FWT1 tensors).
    Synth(SynthArgs),
    /// Run the experiment: fuse, train, evaluate both variants.
    Run(RunArgs),
    /// Accuracy-vs-IoU sweep over a custom threshold list.
    Sweep(SweepArgs),
    /// Unpaired t-test over a per-fold accuracy CSV (folds.csv shape).
    Ttest(TtestArgs),
    /// Recompute the reference result tables and report per-cell deltas.
    Fixtures,
}

#[derive(Args)]
struct CommonConfig {
    /// JSON file with a full RunConfig; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; every randomized step derives from it.
    #[arg(long)]
    seed: u64,
    /// Number of scenes.
    #[arg(long)]
    scenes: Option<usize>,
    /// Visual ambiguity between Rupture and Nothing, in [0, 1].
    #[arg(long)]
    ambiguity: Option<f64>,
    /// Class mixture as comma-separated weights, e.g. 0.37,0.14,0.49.
    #[arg(long, value_delimiter = ',')]
    mixture: Option<Vec<f64>>,
    /// Detector layer preset (7, 16, or 19).
    #[arg(long)]
    layer: Option<u32>,
    /// Detector miss rate in [0, 1].
    #[arg(long)]
    miss_rate: Option<f64>,
    /// Expected spurious detections per scene.
    #[arg(long)]
    fp_rate: Option<f64>,
    /// Corner jitter sigma in pixels.
    #[arg(long)]
    jitter: Option<f64>,
    /// Confidence gate for detections.
    #[arg(long)]
    prob_threshold: Option<f64>,
    /// IoU grid, comma separated.
    #[arg(long, value_delimiter = ',')]
    iou: Option<Vec<f64>>,
    /// Training epochs cap.
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Transformer embedding width.
    #[arg(long)]
    embed: Option<usize>,
    /// Transformer depth.
    #[arg(long)]
    depth: Option<usize>,
    /// Validation fraction per fold.
    #[arg(long)]
    val_fraction: Option<f64>,
}

impl CommonConfig {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
            None => RunConfig::standard_benchmark(self.seed),
        };
        cfg.seed = self.seed;
        cfg.vit.seed = self.seed;
        if let Some(v) = self.scenes {
            cfg.scenes = v;
        }
        if let Some(v) = self.ambiguity {
            cfg.scene_gen.ambiguity = v;
        }
        if let Some(v) = &self.mixture {
            cfg.scene_gen.class_mixture = v.clone();
        }
        if let Some(v) = self.layer {
            cfg.scene_gen.layer = fusway::scene::LayerConfig::preset(v)?;
        }
        if let Some(v) = self.miss_rate {
            cfg.detector.miss_rate = v;
        }
        if let Some(v) = self.fp_rate {
            cfg.detector.false_positive_rate = v;
        }
        if let Some(v) = self.jitter {
            cfg.detector.localization_jitter = v;
        }
        if let Some(v) = self.prob_threshold {
            cfg.prob_threshold = v;
        }
        if let Some(v) = &self.iou {
            cfg.iou_grid = v.clone();
        }
        if let Some(v) = self.epochs {
            cfg.vit.max_epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.vit.learning_rate = v;
        }
        if let Some(v) = self.embed {
            cfg.vit.embed_dim = v;
        }
        if let Some(v) = self.depth {
            cfg.vit.depth = v;
        }
        if let Some(v) = self.val_fraction {
            cfg.val_fraction = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: CommonConfig,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonConfig,
    /// Dataset directory from `synth`; omitted means generate in memory.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Report output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of random re-splits (>= 2 adds folds.csv and ttest.json).
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonConfig,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Sweep thresholds, comma separated (defaults to the config grid).
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
}

#[derive(Args)]
struct TtestArgs {
    /// Per-fold accuracy CSV in the folds.csv shape.
    #[arg(long)]
    folds: PathBuf,
    /// Output JSON path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let payload = serde_json::json!({
                "error": e.to_string(),
                "kind": error_kind(&e),
            });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::ShapeMismatch(_) => "shape_mismatch",
        Error::InvalidBox(_) => "invalid_box",
        Error::InvalidWindow(_) => "invalid_window",
        Error::UnknownClass(_) => "unknown_class",
        Error::InvalidConfig(_) => "invalid_config",
        Error::DatasetFormat(_) => "dataset_format",
        Error::PlacementFailed(_) => "placement_failed",
        Error::TrainingDiverged(_) => "training_diverged",
        Error::DegenerateStatistic(_) => "degenerate_statistic",
        Error::EmptyDataset => "empty_dataset",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Ttest(args) => cmd_ttest(args),
        Command::Fixtures => cmd_fixtures(),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let config = args.common.build()?;
    let taxonomy = ClassTaxonomy::rail();
    let mut writer = DatasetWriter::create(&args.out, taxonomy.clone())?;
    writer.set_provenance(serde_json::json!({
        "seed": config.seed,
        "scenes": config.scenes,
        "scene_gen": config.scene_gen,
        "audio": config.audio,
    }));
    for id in 0..config.scenes as u64 {
        let mut scene = fusway::scene::generate_scene(&config.scene_gen, &taxonomy, config.seed, id)?;
        scene.events = fusway::audio::synth_scene_events(&scene, &taxonomy, &config.audio, config.seed)?;
        writer.add_scene(&scene)?;
    }
    writer.finish()?;
    println!("wrote {} scenes to {}", config.scenes, args.out.display());
    Ok(())
}

fn load_pool(
    dataset: &Option<PathBuf>,
    config: &mut RunConfig,
    taxonomy: &mut ClassTaxonomy,
) -> Result<Vec<fusway::scene::Scene>> {
    match dataset {
        Some(dir) => {
            let reader = DatasetReader::open(dir)?;
            *taxonomy = reader.taxonomy.clone();
            config.scene_gen.layer = reader.layer;
            config.scene_gen.duration = reader.duration;
            config.scenes = reader.len();
            (0..reader.len()).map(|i| reader.load_scene(i)).collect()
        }
        None => generate_pool(config, taxonomy),
    }
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut config = args.common.build()?;
    if let Some(folds) = args.folds {
        config.folds = folds;
    }
    let mut taxonomy = ClassTaxonomy::rail();
    let pool = load_pool(&args.dataset, &mut config, &mut taxonomy)?;
    let report = run_experiment(&config, &taxonomy, &pool)?;
    write_report_dir(&report, &taxonomy, &args.out)?;

    // Persist fold 0's trained model for reuse/inspection.
    let model = retrain_fold_zero(&config, &taxonomy, &pool)?;
    save_checkpoint(&model, &args.out.join("model.ckpt"))?;

    for row in &report.significance {
        if let Some(t) = row.ttest {
            println!(
                "IoU {:.2}: image {:.4} vs fused {:.4}  (t = {:.4}, p = {:.3e})",
                row.iou, row.image_mean, row.fused_mean, t.t, t.p
            );
        }
    }
    if report.significance.is_empty() {
        let grid = &report.folds[0].grid;
        for i in 0..grid.image.len() {
            println!(
                "IoU {:.2}: image {:.4} vs fused {:.4}",
                grid.image[i].iou,
                grid.overall_accuracy(false, i),
                grid.overall_accuracy(true, i)
            );
        }
    }
    println!("report written to {}", args.out.display());
    Ok(())
}

/// Re-derives fold 0's model for checkpointing (training is deterministic,
/// so this reproduces the reported fold exactly).
fn retrain_fold_zero(
    config: &RunConfig,
    taxonomy: &ClassTaxonomy,
    pool: &[fusway::scene::Scene],
) -> Result<fusway::vit::ViTModel> {
    use fusway::eval::zfold_split;
    use fusway::pipeline::{prepare_scene, training_samples, PreparedScene};
    let prepared: Vec<PreparedScene> = pool
        .iter()
        .map(|s| prepare_scene(s, taxonomy, &config.detector, config.seed))
        .collect::<Result<_>>()?;
    let z = config.folds.max(2);
    let split = &zfold_split(prepared.len(), z, config.val_fraction, config.seed)?[0];
    let train_scenes: Vec<&PreparedScene> = split.train.iter().map(|&i| &prepared[i]).collect();
    let val_scenes: Vec<&PreparedScene> = split.val.iter().map(|&i| &prepared[i]).collect();
    let train_set = training_samples(&train_scenes, taxonomy, config.label_iou, config.prob_threshold)?;
    let val_set = training_samples(&val_scenes, taxonomy, config.label_iou, config.prob_threshold)?;
    let mut vit_cfg = config.vit.clone();
    vit_cfg.seed = config.seed;
    let mut model = fusway::vit::ViTModel::new(
        vit_cfg,
        taxonomy.len(),
        config.scene_gen.layer.height,
        config.scene_gen.layer.width,
    )?;
    fusway::vit::train(&mut model, &train_set, &val_set)?;
    Ok(model)
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let mut config = args.common.build()?;
    if let Some(thresholds) = args.thresholds {
        config.iou_grid = thresholds;
    }
    config.folds = 1;
    config.validate()?;
    let mut taxonomy = ClassTaxonomy::rail();
    let pool = load_pool(&args.dataset, &mut config, &mut taxonomy)?;
    let report = run_experiment(&config, &taxonomy, &pool)?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("sweep.csv"), fusway::report::sweep_csv(&report, 0))?;
    std::fs::write(args.out.join("sweep.svg"), fusway::report::sweep_svg(&report, 0))?;
    println!("sweep written to {}", args.out.display());
    Ok(())
}

fn cmd_ttest(args: TtestArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.folds)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::DatasetFormat("empty folds csv".into()))?;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.len() < 3 || columns[0] != "fold" {
        return Err(Error::DatasetFormat(
            "expected header: fold,image@<iou>...,fused@<iou>...".into(),
        ));
    }
    let mut series: Vec<Vec<f64>> = vec![Vec::new(); columns.len() - 1];
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.is_empty() || cells[0] == "Mean" || cells[0] == "StD" {
            continue;
        }
        for (i, cell) in cells.iter().skip(1).enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::DatasetFormat(format!("bad number {cell}")))?;
            series[i].push(v);
        }
    }
    let n_pairs = (columns.len() - 1) / 2;
    let mut rows = Vec::new();
    for i in 0..n_pairs {
        let image_col = &series[i];
        let fused_col = &series[i + n_pairs];
        let result = fusway::eval::unpaired_ttest(fused_col, image_col)?;
        let (mi, si) = fusway::eval::mean_std(image_col);
        let (mf, sf) = fusway::eval::mean_std(fused_col);
        rows.push(serde_json::json!({
            "pair": [columns[1 + i], columns[1 + i + n_pairs]],
            "t": result.t,
            "p": result.p,
            "df": result.df,
            "mean_image": mi,
            "std_image": si,
            "mean_fused": mf,
            "std_fused": sf,
        }));
    }
    let out = serde_json::to_string_pretty(&rows)? + "\n";
    match &args.out {
        Some(path) => std::fs::write(path, out)?,
        None => print!("{out}"),
    }
    Ok(())
}

fn cmd_fixtures() -> Result<()> {
    let cells = fixtures::check_metric_tables();
    let mut failures = 0usize;
    for cell in &cells {
        match cell.status {
            fixtures::CellStatus::Ok => {}
            fixtures::CellStatus::KnownDiscrepancy => {
                println!(
                    "KNOWN-DISCREPANCY {} {} {}: computed {:.4}, printed {:.4}",
                    cell.table, cell.column, cell.metric, cell.computed, cell.printed
                );
            }
            fixtures::CellStatus::Mismatch => {
                failures += 1;
                println!(
                    "FAIL {} {} {}: computed {:.4}, printed {:.4} (delta {:.2e})",
                    cell.table, cell.column, cell.metric, cell.computed, cell.printed, cell.delta
                );
            }
        }
    }
    let ok = cells
        .iter()
        .filter(|c| c.status == fixtures::CellStatus::Ok)
        .count();
    println!("metric cells: {ok} ok, {failures} failed, 1 known discrepancy");

    for r in fixtures::check_ttests() {
        let t_ok = (r.t - r.printed_t).abs() < 0.01;
        println!(
            "{} t-test IoU {}: t = {:.4} (printed {:.4}), p = {:.4e} (printed {:.4e})",
            if t_ok { "OK" } else { "FAIL" },
            r.iou,
            r.t,
            r.printed_t,
            r.p,
            r.printed_p
        );
        if !t_ok {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(Error::DegenerateStatistic(format!(
            "{failures} fixture cells failed"
        )));
    }
    Ok(())
}
