//! `owvis` command line: synthetic data generation, split construction,
//! open-world training, evaluation, and visualization.
//!
//! Exit codes: 0 success, 1 validation/configuration error, 2 runtime
//! error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use owvis_core::config::RunConfig;
use owvis_core::data_model::{load_annotations, save_annotations, ClassRegistry, Dataset};
use owvis_core::error::Error;
use owvis_core::eval::{save_predictions, EvalConfig};
use owvis_core::model::Model;
use owvis_core::nn::{save_checkpoint, CheckpointHeader};
use owvis_core::openworld_protocol::{
    evaluate_task, incremental_step, select_exemplars, train_task, ExemplarStore, MetricsLogger,
};
use owvis_core::splits::{build_split, split_stats, validate_split, SplitConfig, TaskSplit};
use owvis_core::synthdata::{generate, SynthConfig};
use owvis_core::viz::visualize_video;

#[derive(Parser)]
#[command(name = "owvis", about = "Open-world video instance segmentation toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic shape-video dataset.
    SynthGen(SynthGenArgs),
    /// Build open-world two-task splits from an annotation file.
    SplitBuild(SplitBuildArgs),
    /// Train task 1, or incrementally train task 2 from a task-1 checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or a prediction file) on a task's test videos.
    Eval(EvalArgs),
    /// Emit objectness heatmaps and prediction overlays for one video.
    Visualize(VisualizeArgs),
}

#[derive(Args)]
struct SynthGenArgs {
    /// Synthetic-config JSON; omit for the desk-scale default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override for the desk-scale default config.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitBuildArgs {
    #[arg(long)]
    annotations: PathBuf,
    /// Split-config JSON: a single config or an array of them.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run-config JSON; omit for the desk-scale default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path config overrides, e.g. `--set schedule.task1_epochs=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::desk(0),
        };
        for kv in &self.sets {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg = cfg.with_override(key, value)?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// 1 trains from scratch; 2 incrementally extends a task-1 checkpoint.
    #[arg(long)]
    task: u8,
    /// Task-1 checkpoint (required for --task 2).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Exemplar store for replay (defaults to `exemplars.json` next to the
    /// checkpoint).
    #[arg(long)]
    exemplars: Option<PathBuf>,
    /// Skip exemplar replay finetuning (forgetting ablation).
    #[arg(long)]
    no_replay: bool,
    /// Output root; overrides the config and OWVIS_OUT_ROOT.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    task: u8,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluate a prediction file instead of running a checkpoint.
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VisualizeArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    video: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are not errors
            if e.use_stderr() {
                eprintln!("{e}");
                std::process::exit(1);
            }
            println!("{e}");
            std::process::exit(0);
        }
    };
    let result = match cli.command {
        Command::SynthGen(args) => cmd_synth_gen(args),
        Command::SplitBuild(args) => cmd_split_build(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Visualize(args) => cmd_visualize(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run_dir(out: &Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    let root = out
        .clone()
        .or_else(|| cfg.data.output_dir.as_ref().map(PathBuf::from))
        .or_else(|| std::env::var_os("OWVIS_OUT_ROOT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("owvis-runs"));
    root.join(format!("run-{}", cfg.fingerprint()))
}

fn cmd_synth_gen(args: SynthGenArgs) -> Result<(), Error> {
    let config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<SynthConfig>(&text)
                .map_err(|e| Error::SynthConfig(format!("bad config: {e}")))?
        }
        None => SynthConfig::desk_default(args.seed),
    };
    let dataset = generate(&config, &args.out)?;
    println!(
        "generated {} videos / {} instance tracks under {}",
        dataset.videos.len(),
        dataset.num_instances(),
        args.out.display()
    );
    Ok(())
}

fn cmd_split_build(args: SplitBuildArgs) -> Result<(), Error> {
    let dataset = load_annotations(&args.annotations)?;
    let text = std::fs::read_to_string(&args.config).map_err(|e| Error::io(&args.config, e))?;
    let configs: Vec<SplitConfig> = if text.trim_start().starts_with('[') {
        serde_json::from_str(&text).map_err(|e| Error::SplitConfig(format!("bad config: {e}")))?
    } else {
        vec![serde_json::from_str(&text).map_err(|e| Error::SplitConfig(format!("bad config: {e}")))?]
    };
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    for config in &configs {
        let split = build_split(&dataset, config)?;
        let report = validate_split(&split, &dataset);
        if !report.is_clean() {
            return Err(Error::SplitConstruction(format!(
                "split {} failed validation: {:?}",
                split.split_name, report.violations
            )));
        }
        let path = args.out.join(format!("{}.json", split.split_name));
        split.save(&path)?;
        println!("wrote {}", path.display());
        for row in split_stats(&split, &dataset) {
            println!(
                "  task {}: train {} videos / {} instances, known-test {}, unknown-test {}",
                row.task, row.train_videos, row.train_instances, row.known_test_videos, row.unknown_test_videos
            );
        }
        if !report.suppressed_future_class_instances.is_empty() {
            println!(
                "  {} future-class instances in train videos will be suppressed from supervision",
                report.suppressed_future_class_instances.len()
            );
        }
    }
    Ok(())
}

fn registry_for_task(split: &TaskSplit, task: u8) -> Result<ClassRegistry, Error> {
    ClassRegistry::new(split.task(task as usize).known_category_ids.clone())
}

fn check_fingerprint(header: &CheckpointHeader, cfg: &RunConfig) -> Result<(), Error> {
    if header.config_fingerprint != cfg.fingerprint() {
        return Err(Error::FingerprintMismatch {
            checkpoint: header.config_fingerprint.clone(),
            current: cfg.fingerprint(),
        });
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let cfg = args.config.load()?;
    let dataset = load_annotations(&args.annotations)?;
    let split = TaskSplit::load(&args.split)?;
    let dir = run_dir(&args.out, &cfg);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    cfg.save(&dir.join("config.json"))?;

    match args.task {
        1 => {
            let registry = registry_for_task(&split, 1)?;
            let mut model = Model::new(&cfg.model, registry.num_known(), cfg.seed);
            let mut logger = MetricsLogger::to_file(&dir.join("metrics-task1.jsonl"))?;
            train_task(
                &mut model,
                &dataset,
                &split.task(1).train_videos,
                &registry,
                &cfg,
                cfg.schedule.task1_epochs,
                &mut logger,
                Some(&dir),
            )?;
            let header = CheckpointHeader {
                config_fingerprint: cfg.fingerprint(),
                schedule_fingerprint: cfg.schedule_fingerprint(),
                known_ids: registry.known_ids().to_vec(),
                task: 1,
            };
            save_checkpoint(&dir.join("task1.ckpt"), &header, &model.store)?;

            let exemplars = select_exemplars(
                &dataset,
                &split.task(1).train_videos,
                &registry,
                cfg.schedule.exemplars_per_class,
                cfg.seed,
            );
            exemplars.save(&dir.join("exemplars.json"))?;
            save_annotations(
                &exemplars.as_dataset(&dataset, &registry),
                &dir.join("exemplars-annotations.json"),
            )?;
            println!("task-1 training done; checkpoint at {}", dir.join("task1.ckpt").display());
        }
        2 => {
            let ckpt_path = args
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::Config("--task 2 requires --checkpoint".into()))?;
            let (header, mut model) = Model::load(ckpt_path, &cfg.model)?;
            check_fingerprint(&header, &cfg)?;
            let registry_old = ClassRegistry::new(header.known_ids.clone())?;
            let registry_new = registry_for_task(&split, 2)?;
            let exemplars = if args.no_replay {
                None
            } else {
                let path = args
                    .exemplars
                    .clone()
                    .unwrap_or_else(|| ckpt_path.parent().unwrap_or(Path::new(".")).join("exemplars.json"));
                Some(ExemplarStore::load(&path)?)
            };
            let mut logger = MetricsLogger::to_file(&dir.join("metrics-task2.jsonl"))?;
            incremental_step(
                &mut model,
                &dataset,
                &split.task(2).train_videos,
                &registry_old,
                &registry_new,
                exemplars.as_ref(),
                &cfg,
                &mut logger,
                Some(&dir),
            )?;
            let header = CheckpointHeader {
                config_fingerprint: cfg.fingerprint(),
                schedule_fingerprint: cfg.schedule_fingerprint(),
                known_ids: registry_new.known_ids().to_vec(),
                task: 2,
            };
            save_checkpoint(&dir.join("task2.ckpt"), &header, &model.store)?;
            println!("task-2 training done; checkpoint at {}", dir.join("task2.ckpt").display());
        }
        other => return Err(Error::Config(format!("--task must be 1 or 2, got {other}"))),
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let cfg = args.config.load()?;
    let dataset = load_annotations(&args.annotations)?;
    let split = TaskSplit::load(&args.split)?;
    if !(1..=2).contains(&args.task) {
        return Err(Error::Config(format!("--task must be 1 or 2, got {}", args.task)));
    }
    let registry = registry_for_task(&split, args.task)?;
    let dir = run_dir(&args.out, &cfg);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let eval_cfg = EvalConfig::default();

    let report = if let Some(pred_path) = &args.predictions {
        let all = owvis_core::eval::load_predictions(pred_path)?;
        evaluate_prediction_file(&dataset, &split, args.task, &registry, &cfg, &eval_cfg, &all)?
    } else {
        let ckpt_path = args
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::Config("eval needs --checkpoint or --predictions".into()))?;
        let (header, model) = Model::load(ckpt_path, &cfg.model)?;
        check_fingerprint(&header, &cfg)?;
        if header.known_ids != registry.known_ids() {
            return Err(Error::Config(format!(
                "checkpoint knows {:?} but task {} expects {:?}",
                header.known_ids,
                args.task,
                registry.known_ids()
            )));
        }
        let out = evaluate_task(&model, &dataset, &split, args.task, &registry, &cfg, &eval_cfg)?;
        let mut merged = out.known_predictions.clone();
        for (vid, tracks) in out.unknown_predictions {
            merged.entry(vid).or_default().extend(tracks);
        }
        save_predictions(&merged, &dir.join(format!("predictions-task{}.json", args.task)))?;
        out.report
    };

    let report_json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(dir.join(format!("report-task{}.json", args.task)), report_json)
        .map_err(|e| Error::io(&dir, e))?;
    let table = report.to_table();
    std::fs::write(dir.join(format!("report-task{}.txt", args.task)), &table)
        .map_err(|e| Error::io(&dir, e))?;
    print!("{table}");
    Ok(())
}

/// Evaluate an externally produced prediction file against a task's test
/// videos.
fn evaluate_prediction_file(
    dataset: &Dataset,
    split: &TaskSplit,
    task: u8,
    registry: &ClassRegistry,
    cfg: &RunConfig,
    eval_cfg: &EvalConfig,
    all_predictions: &BTreeMap<u64, Vec<owvis_core::data_model::InstanceTrack>>,
) -> Result<owvis_core::eval::EvalReport, Error> {
    use owvis_core::data_model::UNKNOWN_LABEL;
    use owvis_core::eval::{build_report, evaluate_known, evaluate_unknown, relabel_unknown};

    let part = split.task(task as usize);
    let mut known_preds = BTreeMap::new();
    let mut known_gts = BTreeMap::new();
    for vid in &part.known_test_videos {
        let preds = all_predictions
            .get(vid)
            .map(|t| t.iter().filter(|p| p.category_id != UNKNOWN_LABEL).cloned().collect())
            .unwrap_or_default();
        known_preds.insert(*vid, preds);
        known_gts.insert(
            *vid,
            dataset.tracks(*vid).iter().filter(|t| registry.is_known(t.category_id)).cloned().collect(),
        );
    }
    let per_class = evaluate_known(&known_preds, &known_gts, registry.known_ids(), eval_cfg)?;

    let unknown = if part.unknown_test_videos.is_empty() {
        None
    } else {
        let mut unknown_preds = BTreeMap::new();
        let mut future_gts = BTreeMap::new();
        for vid in &part.unknown_test_videos {
            let preds = all_predictions
                .get(vid)
                .map(|t| t.iter().filter(|p| p.category_id == UNKNOWN_LABEL).cloned().collect())
                .unwrap_or_default();
            unknown_preds.insert(*vid, preds);
            future_gts.insert(
                *vid,
                dataset
                    .tracks(*vid)
                    .iter()
                    .filter(|t| !registry.is_known(t.category_id))
                    .cloned()
                    .collect(),
            );
        }
        let future_gts = relabel_unknown(&future_gts);
        Some(evaluate_unknown(&unknown_preds, &future_gts, eval_cfg)?)
    };
    Ok(build_report(task, &per_class, unknown, &split.task(1).known_category_ids, &cfg.fingerprint()))
}

fn cmd_visualize(args: VisualizeArgs) -> Result<(), Error> {
    let cfg = args.config.load()?;
    let dataset = load_annotations(&args.annotations)?;
    let (header, model) = Model::load(&args.checkpoint, &cfg.model)?;
    check_fingerprint(&header, &cfg)?;
    let registry = ClassRegistry::new(header.known_ids.clone())?;
    let dir = run_dir(&args.out, &cfg).join(format!("viz-video{:04}", args.video));
    visualize_video(&model, &dataset, args.video, &registry, &cfg, &dir)?;
    println!("wrote panels under {}", dir.display());
    Ok(())
}
