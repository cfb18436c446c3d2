//! `leafnet` command-line front end.
//!
//! Exit codes: 0 success, 2 bad arguments or configuration, 3 dataset or
//! checkpoint failure, 4 training aborted.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, Parser, Subcommand};
use thiserror::Error;

use crate::data::synth::{synth_dataset, SynthSpec};
use crate::data::{load_split, scan_dataset, write_pdimg_tree, Dataset, DatasetManifest, SplitTag};
use crate::metrics::{comparison_csv, render_comparison, EvalReport};
use crate::model::{HeadSpec, InputSpec, ModelGraph, Preset, TrainablePolicy};
use crate::optim::CosineSchedule;
use crate::rng::{derive_seed, str_word};
use crate::tensor::{DType, Element};
use crate::train::checkpoint::{load_checkpoint, read_metadata, save_checkpoint};
use crate::train::{evaluate, history_csv, train, TrainConfig, TrainError, TrainResult};
use config::{parse_assignment, parse_config, training_config, training_defaults, CliConfig};

pub const THREADS_ENV: &str = "LEAFNET_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Aborted(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Aborted(_) => 4,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn from_train(e: TrainError) -> CliError {
    match e {
        TrainError::NonFiniteLoss { .. } => CliError::Aborted(e.to_string()),
        TrainError::InvalidConfig(_) | TrainError::Model(_) => CliError::Usage(e.to_string()),
        TrainError::Data(_)
        | TrainError::EmptyDataset(_)
        | TrainError::LabelOutOfRange { .. }
        | TrainError::Checkpoint(_) => CliError::Data(e.to_string()),
        _ => CliError::Aborted(e.to_string()),
    }
}

#[derive(Debug, Parser)]
#[command(name = "leafnet", version, about = "Train, fine-tune and evaluate residual CNN leaf classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// key = value file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override any config key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// List the classes and image counts of a dataset tree
    Scan {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train from random initialization
    Train {
        /// Dataset root containing train/<class>/ (and optionally test/<class>/)
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_name = "mini|resnet50")]
        preset: Option<String>,
        /// Checkpoint to write
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Replace the head of a trained model and fine-tune its last layers
    Finetune {
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Backbone layer entries to unfreeze, counted from the end; the new head always trains
        #[arg(long, value_name = "K")]
        unfreeze_last: Option<usize>,
        /// Class count of the new head (defaults to the dataset's)
        #[arg(long, value_name = "K")]
        head: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score a checkpoint on the test split and write a JSON report
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Tabulate evaluation reports side by side
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
        /// Also write the table as CSV
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write the cosine learning-rate curve as step,lr CSV
    Schedule {
        #[arg(long)]
        lr0: f64,
        #[arg(long, default_value_t = 0.0)]
        min_lr: f64,
        #[arg(long)]
        steps: u64,
        /// Defaults to standard output
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a procedural dataset as a PDIMG tree
    Synth {
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Rotates class orientations and hues to make a related task
        #[arg(long, default_value_t = 0.0)]
        shift: f64,
        /// Test images per class (default: a quarter of --per-class, at least 4)
        #[arg(long)]
        test_per_class: Option<usize>,
    },
}

/// Runs one command and returns the process exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = thread_pool().and_then(|pool| pool.install(|| dispatch(cli.command)));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn thread_pool() -> CliResult<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| usage(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| CliError::Aborted(e.to_string()))
}

fn subcommand_usage(name: &str) -> String {
    let mut cmd = Cli::command();
    cmd.build();
    let usage = cmd
        .find_subcommand_mut(name)
        .map(|c| c.render_usage().to_string())
        .unwrap_or_default();
    format!("{usage}\n\nFor more information, try 'leafnet {name} --help'.")
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::Scan { data } => cmd_scan(&data),
        Command::Train {
            data,
            preset,
            out,
            run,
        } => {
            let mut flags = vec![];
            push_flag(&mut flags, "data", data.map(|p| p.display().to_string()));
            push_flag(&mut flags, "preset", preset);
            push_flag(&mut flags, "out", out.map(|p| p.display().to_string()));
            let c = resolve("train", train_defaults(), &run, flags)?;
            cmd_train(&c)
        }
        Command::Finetune {
            base,
            data,
            unfreeze_last,
            head,
            out,
            run,
        } => {
            let mut flags = vec![];
            push_flag(&mut flags, "base", base.map(|p| p.display().to_string()));
            push_flag(&mut flags, "data", data.map(|p| p.display().to_string()));
            push_flag(&mut flags, "unfreeze_last", unfreeze_last.map(|k| k.to_string()));
            push_flag(&mut flags, "head", head.map(|k| k.to_string()));
            push_flag(&mut flags, "out", out.map(|p| p.display().to_string()));
            let c = resolve("finetune", finetune_defaults(), &run, flags)?;
            cmd_finetune(&c)
        }
        Command::Evaluate { ckpt, data, report } => cmd_evaluate(&ckpt, &data, &report),
        Command::Compare { reports, csv } => cmd_compare(&reports, csv.as_deref()),
        Command::Schedule {
            lr0,
            min_lr,
            steps,
            out,
        } => cmd_schedule(lr0, min_lr, steps, out.as_deref()),
        Command::Synth {
            classes,
            per_class,
            size,
            out,
            seed,
            shift,
            test_per_class,
        } => {
            let spec = SynthSpec {
                shift,
                ..SynthSpec::new(classes, per_class, size, seed)
            };
            cmd_synth(&spec, test_per_class.unwrap_or((per_class / 4).max(4)), &out)
        }
    }
}

fn push_flag(flags: &mut Vec<(String, String)>, key: &str, value: Option<String>) {
    if let Some(v) = value {
        flags.push((key.to_string(), v));
    }
}

fn train_defaults() -> Vec<(&'static str, String)> {
    let mut d = vec![
        ("data", String::new()),
        ("out", String::new()),
        ("preset", "mini".to_string()),
        ("image_size", "auto".to_string()),
        ("head", "custom".to_string()),
        ("dtype", "f32".to_string()),
    ];
    d.extend(training_defaults(&TrainConfig::baseline()));
    d
}

fn finetune_defaults() -> Vec<(&'static str, String)> {
    let mut d = vec![
        ("base", String::new()),
        ("data", String::new()),
        ("out", String::new()),
        ("unfreeze_last", String::new()),
        ("head", "auto".to_string()),
    ];
    d.extend(training_defaults(&TrainConfig::fine_tune()));
    d
}

fn resolve(
    command: &'static str,
    defaults: Vec<(&'static str, String)>,
    run: &RunArgs,
    mut flags: Vec<(String, String)>,
) -> CliResult<CliConfig> {
    let file = match &run.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
            parse_config(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => vec![],
    };
    for s in &run.set {
        flags.push(parse_assignment(s).map_err(usage)?);
    }
    if let Some(seed) = run.seed {
        flags.push(("seed".into(), seed.to_string()));
    }
    let c = CliConfig::resolve(command, &defaults, &file, &flags).map_err(usage)?;
    let required: &[&str] = match command {
        "train" => &["data", "out"],
        _ => &["base", "data", "out", "unfreeze_last"],
    };
    for key in required {
        if c.text(key).is_none() {
            return Err(usage(format!(
                "missing --{}\n\n{}",
                key.replace('_', "-"),
                subcommand_usage(command)
            )));
        }
    }
    Ok(c)
}

fn echo_config(c: &CliConfig) {
    for (k, v) in c.entries() {
        eprintln!("[{}] {k} = {v}", c.command());
    }
}

/// Sibling artifact paths of a checkpoint: `<stem>.run.cfg`, `<stem>.history.csv`.
pub fn artifact_paths(ckpt: &Path) -> (PathBuf, PathBuf) {
    (ckpt.with_extension("run.cfg"), ckpt.with_extension("history.csv"))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| data_err(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| data_err(format!("cannot write {}: {e}", path.display())))
}

fn scan(root: &Path) -> CliResult<DatasetManifest> {
    let m = scan_dataset(root).map_err(data_err)?;
    for (path, why) in &m.rejected {
        eprintln!("skipping {}: {why}", path.display());
    }
    Ok(m)
}

fn load(manifest: &DatasetManifest, tag: SplitTag, size: (usize, usize)) -> CliResult<Dataset> {
    if manifest.split(tag).is_none() {
        return Err(data_err(format!(
            "{} has no {}/ split",
            manifest.root.display(),
            tag.dir_name()
        )));
    }
    load_split(manifest, tag, size.0, size.1).map_err(data_err)
}

fn cmd_scan(root: &Path) -> CliResult {
    let m = scan(root)?;
    println!("{} classes", m.class_names.len());
    for split in &m.splits {
        println!("{}: {} images", split.tag.dir_name(), split.entries.len());
    }
    for (k, name) in m.class_names.iter().enumerate() {
        let counts: Vec<String> = m
            .splits
            .iter()
            .map(|s| format!("{}={}", s.tag.dir_name(), s.counts[k]))
            .collect();
        println!("  {name}: {}", counts.join(" "));
    }
    Ok(())
}

fn parse_dtype(s: &str) -> CliResult<DType> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(usage(format!("unknown dtype '{other}' (f32, f64)"))),
    }
}

fn cmd_train(c: &CliConfig) -> CliResult {
    match parse_dtype(c.raw("dtype"))? {
        DType::F32 => train_typed::<f32>(c),
        DType::F64 => train_typed::<f64>(c),
    }
}

fn default_image_size(preset: Preset) -> usize {
    match preset {
        Preset::Resnet50 => 224,
        Preset::Mini | Preset::Identity => 32,
    }
}

fn train_typed<T: Element>(c: &CliConfig) -> CliResult {
    let preset: Preset = c.get("preset").map_err(usage)?;
    let size = match c.raw("image_size") {
        "auto" => default_image_size(preset),
        _ => c.get("image_size").map_err(usage)?,
    };
    let cfg = training_config(c).map_err(usage)?;
    let head = c.raw("head");
    if head != "custom" && head != "linear" {
        return Err(usage(format!("unknown head '{head}' (custom, linear)")));
    }
    let out = PathBuf::from(c.raw("out"));
    echo_config(c);

    let manifest = scan(Path::new(c.raw("data")))?;
    let data = load(&manifest, SplitTag::Train, (size, size))?;
    let mut model = ModelGraph::<T>::build_backbone(preset, InputSpec::new(3, size, size), cfg.seed).map_err(usage)?;
    match head {
        "custom" => model.attach_head(&HeadSpec::with_classes(data.classes())),
        _ => model.attach_linear_head(data.classes()),
    }
    .map_err(usage)?;
    run_training(c, model, &data, &cfg, &out).map(|_| ())
}

fn run_training<T: Element>(
    c: &CliConfig,
    model: ModelGraph<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    out: &Path,
) -> CliResult<TrainResult<T>> {
    let (manifest_path, history_path) = artifact_paths(out);
    write_file(&manifest_path, c.render())?;
    let summary = model.parameter_summary();
    eprintln!(
        "[{}] {} images, {} classes, {} parameters ({} trainable)",
        c.command(),
        data.len(),
        data.classes(),
        summary.total,
        summary.trainable
    );
    let result = train(model, data, cfg).map_err(from_train)?;
    for r in &result.history {
        eprintln!(
            "epoch {:>3}  train_loss {:.4}  train_acc {:.4}  val_loss {:.4}  val_acc {:.4}  lr {:.3e}  {:.1}s",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.lr, r.wall_time_s
        );
    }
    write_file(&history_path, history_csv(&result.history))?;
    save_checkpoint(&result.checkpoint(data.class_names.clone()), out).map_err(data_err)?;
    eprintln!("wrote {}", out.display());
    Ok(result)
}

fn cmd_finetune(c: &CliConfig) -> CliResult {
    let base = Path::new(c.raw("base"));
    let meta = read_metadata(base).map_err(|e| data_err(format!("incompatible base checkpoint {}: {e}", base.display())))?;
    match meta.dtype {
        DType::F32 => finetune_typed::<f32>(c),
        DType::F64 => finetune_typed::<f64>(c),
    }
}

fn finetune_typed<T: Element>(c: &CliConfig) -> CliResult {
    let base = Path::new(c.raw("base"));
    let k: usize = c.get("unfreeze_last").map_err(usage)?;
    let classes: Option<usize> = match c.raw("head") {
        "auto" => None,
        _ => Some(c.get("head").map_err(usage)?),
    };
    let cfg = training_config(c).map_err(usage)?;
    let out = PathBuf::from(c.raw("out"));
    echo_config(c);

    let ck = load_checkpoint::<T>(base)
        .map_err(|e| data_err(format!("incompatible base checkpoint {}: {e}", base.display())))?;
    let mut model = ck.model;
    if model.has_head() {
        model.remove_head().map_err(data_err)?;
    }
    let backbone_entries = model.layer_entries().len();
    if k > backbone_entries {
        return Err(usage(format!(
            "--unfreeze-last {k} exceeds the {backbone_entries} backbone layer entries"
        )));
    }
    let input = model.architecture().input;
    let manifest = scan(Path::new(c.raw("data")))?;
    let data = load(&manifest, SplitTag::Train, (input.height, input.width))?;
    let classes = classes.unwrap_or(data.classes());
    if classes != data.classes() {
        return Err(usage(format!(
            "--head {classes} does not match the dataset's {} classes",
            data.classes()
        )));
    }
    model.attach_head(&HeadSpec::with_classes(classes)).map_err(usage)?;
    let head_entries = model.head_entry_count();
    model
        .set_trainable(TrainablePolicy::UnfreezeLastK(k + head_entries))
        .map_err(usage)?;
    let result = run_training(c, model, &data, &cfg, &out)?;
    if let (Some(first), Some(best)) = (
        result.history.first(),
        result.history.iter().map(|r| r.val_acc).reduce(f64::max),
    ) {
        eprintln!("val_acc: epoch 1 {:.4}, best {best:.4}", first.val_acc);
    }
    Ok(())
}

fn cmd_evaluate(ckpt: &Path, root: &Path, report_path: &Path) -> CliResult {
    let meta = read_metadata(ckpt).map_err(|e| data_err(format!("{}: {e}", ckpt.display())))?;
    let report = match meta.dtype {
        DType::F32 => evaluate_typed::<f32>(ckpt, root)?,
        DType::F64 => evaluate_typed::<f64>(ckpt, root)?,
    };
    write_file(report_path, report.to_json())?;
    print!("{}", render_comparison(std::slice::from_ref(&report)).map_err(data_err)?);
    Ok(())
}

fn evaluate_typed<T: Element>(ckpt: &Path, root: &Path) -> CliResult<EvalReport> {
    let ck = load_checkpoint::<T>(ckpt).map_err(|e| data_err(format!("{}: {e}", ckpt.display())))?;
    let mut model = ck.model;
    if !model.has_head() {
        return Err(data_err(format!("{} has no classification head", ckpt.display())));
    }
    let input = model.architecture().input;
    let manifest = scan(root)?;
    let data = load(&manifest, SplitTag::Test, (input.height, input.width))?;
    if !ck.class_names.is_empty() && ck.class_names != data.class_names {
        return Err(data_err(format!(
            "dataset classes {:?} differ from the checkpoint's {:?}",
            data.class_names, ck.class_names
        )));
    }
    let model_id = ckpt.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
    let dataset_id = format!(
        "{}/test",
        root.file_name().map_or("data".into(), |s| s.to_string_lossy().into_owned())
    );
    evaluate(&mut model, &data, &model_id, &dataset_id).map_err(|e| match e {
        TrainError::Tensor(_) | TrainError::Model(_) => CliError::Aborted(e.to_string()),
        other => data_err(other),
    })
}

fn cmd_compare(paths: &[PathBuf], csv: Option<&Path>) -> CliResult {
    let reports = paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| data_err(format!("cannot read {}: {e}", p.display())))?;
            EvalReport::from_json(&text).map_err(|e| data_err(format!("{}: {e}", p.display())))
        })
        .collect::<CliResult<Vec<_>>>()?;
    print!("{}", render_comparison(&reports).map_err(data_err)?);
    if let Some(path) = csv {
        write_file(path, comparison_csv(&reports).map_err(data_err)?)?;
    }
    Ok(())
}

/// `step,lr` rows for `t = 0..=steps`.
pub fn schedule_csv(lr0: f64, min_lr: f64, steps: u64) -> Result<String, String> {
    if !(lr0.is_finite() && min_lr.is_finite() && 0.0 <= min_lr && min_lr <= lr0) {
        return Err(format!("need 0 <= min_lr <= lr0, got lr0 {lr0}, min_lr {min_lr}"));
    }
    if steps == 0 {
        return Err("steps must be at least 1".into());
    }
    let s = CosineSchedule {
        lr0,
        lr_min: min_lr,
        total_steps: steps,
    };
    let mut out = String::from("step,lr\n");
    for t in 0..=steps {
        out.push_str(&format!("{t},{}\n", s.lr(t)));
    }
    Ok(out)
}

fn cmd_schedule(lr0: f64, min_lr: f64, steps: u64, out: Option<&Path>) -> CliResult {
    let csv = schedule_csv(lr0, min_lr, steps).map_err(usage)?;
    match out {
        Some(path) => write_file(path, csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn cmd_synth(spec: &SynthSpec, test_per_class: usize, out: &Path) -> CliResult {
    let train = synth_dataset(spec).map_err(usage)?;
    let test_spec = SynthSpec {
        per_class: test_per_class,
        seed: derive_seed(&[spec.seed, str_word("test")]),
        ..*spec
    };
    let test = synth_dataset(&test_spec).map_err(usage)?;
    write_pdimg_tree(&train, out, SplitTag::Train).map_err(data_err)?;
    write_pdimg_tree(&test, out, SplitTag::Test).map_err(data_err)?;
    eprintln!(
        "wrote {} train and {} test images to {}",
        train.len(),
        test.len(),
        out.display()
    );
    Ok(())
}
