//! Command-line entry point.
//!
//! Every command flag is shorthand for a config key (see `--help` of each
//! command); flags are applied after the config file and environment overrides.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::checkpoint;
use crate::config::Config;
use crate::data::{generate_dataset, load_coco, verify_manifest, Domain, Image};
use crate::eval::{evaluate, export_maps, format_table, throughput, EvalOptions, EvalReport};
use crate::losses::{default_probability_grid, gradient_table, write_gradient_csv, UdaMode};
use crate::model::{build_model, DetectorParams};
use crate::tensor::{DType, Scalar};
use crate::train::{derive_seed, train_to_dir};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }

    fn missing(key: &str, flag: &str) -> Self {
        CliError::Usage(format!("missing required setting {key} (pass {flag} or set it in the config file)"))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_FAILURE,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "udadet", version, about = "Center-point object detector with unsupervised domain adaptation")]
pub struct Cli {
    /// TOML config file; keys not given fall back to built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for data generation, initialisation and shuffling (run.seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Require bit-reproducible execution (run.deterministic).
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Override any config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the labeled source, unlabeled target and labeled target-test splits.
    GenerateData(GenerateArgs),
    /// Train a detector (baseline, em or msl).
    Train(TrainArgs),
    /// Compute AP per class, mAP and heatmap statistics on a labeled manifest.
    Evaluate(EvaluateArgs),
    /// Write heatmap and entropy-map PNGs for the first images of a manifest.
    ExportMaps(ExportArgs),
    /// Write the entropy vs max-squares gradient profile CSV.
    AnalyzeGradients(GradientArgs),
    /// Measure single-image forward + decode speed.
    Throughput(ThroughputArgs),
    /// Print a comparison table from evaluation reports.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// data.out_dir
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// data.source_count
    #[arg(long)]
    pub source_count: Option<usize>,
    /// data.target_count
    #[arg(long)]
    pub target_count: Option<usize>,
    /// data.test_count
    #[arg(long)]
    pub test_count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// train.source: labeled source manifest
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// train.target: target manifest (labels ignored)
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// train.out_dir
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// train.mode
    #[arg(long)]
    pub mode: Option<UdaMode>,
    /// train.epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// train.resume: training checkpoint to continue from
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// eval.checkpoint
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// eval.testset: labeled manifest
    #[arg(long)]
    pub testset: Option<PathBuf>,
    /// eval.report: JSON output path
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// eval.checkpoint
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// eval.testset: manifest whose images are rendered
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// eval.export_dir
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// eval.export_limit
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradientArgs {
    /// eval.gradients_csv
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ThroughputArgs {
    /// eval.checkpoint; a freshly initialised model is timed when absent
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// eval.throughput_iterations
    #[arg(long)]
    pub iterations: Option<usize>,
    /// eval.report: JSON output path
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Evaluation reports as `label=path` or `path` (label = parent directory name).
    #[arg(required = true)]
    pub reports: Vec<String>,
    /// Also write the table to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn quoted(p: &Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

fn push_path(out: &mut Vec<String>, key: &str, v: &Option<PathBuf>) {
    if let Some(p) = v {
        out.push(format!("{key}={}", quoted(p)));
    }
}

fn push_num<V: std::fmt::Display>(out: &mut Vec<String>, key: &str, v: Option<V>) {
    if let Some(x) = v {
        out.push(format!("{key}={x}"));
    }
}

/// Command flags rewritten as config assignments.
fn flag_assignments(cli: &Cli) -> Vec<String> {
    let mut a = Vec::new();
    push_num(&mut a, "run.seed", cli.seed);
    if cli.deterministic {
        a.push("run.deterministic=true".into());
    }
    match &cli.command {
        Command::GenerateData(g) => {
            push_path(&mut a, "data.out_dir", &g.out);
            push_num(&mut a, "data.source_count", g.source_count);
            push_num(&mut a, "data.target_count", g.target_count);
            push_num(&mut a, "data.test_count", g.test_count);
        }
        Command::Train(t) => {
            push_path(&mut a, "train.source", &t.source);
            push_path(&mut a, "train.target", &t.target);
            push_path(&mut a, "train.out_dir", &t.out);
            push_path(&mut a, "train.resume", &t.resume);
            if let Some(m) = t.mode {
                a.push(format!("train.mode=\"{m}\""));
            }
            push_num(&mut a, "train.epochs", t.epochs);
        }
        Command::Evaluate(e) => {
            push_path(&mut a, "eval.checkpoint", &e.checkpoint);
            push_path(&mut a, "eval.testset", &e.testset);
            push_path(&mut a, "eval.report", &e.out);
        }
        Command::ExportMaps(e) => {
            push_path(&mut a, "eval.checkpoint", &e.checkpoint);
            push_path(&mut a, "eval.testset", &e.images);
            push_path(&mut a, "eval.export_dir", &e.out);
            push_num(&mut a, "eval.export_limit", e.limit);
        }
        Command::AnalyzeGradients(g) => push_path(&mut a, "eval.gradients_csv", &g.out),
        Command::Throughput(t) => {
            push_path(&mut a, "eval.checkpoint", &t.checkpoint);
            push_num(&mut a, "eval.throughput_iterations", t.iterations);
            push_path(&mut a, "eval.report", &t.out);
        }
        Command::Compare(_) => {}
    }
    a
}

/// Writes `<dir>/<command>.config.toml` with the fully resolved configuration.
fn snapshot(cfg: &Config, dir: &Path, command: &str) -> Result<(), CliError> {
    let dir = if dir.as_os_str().is_empty() { Path::new(".") } else { dir };
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    let path = dir.join(format!("{command}.config.toml"));
    fs::write(&path, cfg.to_toml_string()).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn parent_dir(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn load_params<T: Scalar>(path: &Path) -> Result<DetectorParams<T>, CliError> {
    let ckpt = checkpoint::load::<T>(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(ckpt.params)
}

fn cmd_generate(cfg: &Config) -> Result<(), CliError> {
    let d = &cfg.data;
    let seed = cfg.run.seed;
    let splits = [
        ("source", Domain::Source, d.source_count, seed, true),
        ("target", Domain::Target, d.target_count, derive_seed(seed, &[1]), false),
        ("test", Domain::Target, d.test_count, derive_seed(seed, &[2]), true),
    ];
    for (split, domain, count, split_seed, labeled) in splits {
        let dir = d.out_dir.join(split);
        let m = generate_dataset(&d.scene, domain, count, split_seed, labeled, split, &dir).map_err(CliError::runtime)?;
        println!("{split}: {} images, {} boxes -> {}", m.len(), m.num_annotations(), dir.display());
    }
    snapshot(cfg, &d.out_dir, "generate-data")
}

fn cmd_train<T: Scalar>(cfg: &Config) -> Result<(), CliError> {
    let t = &cfg.train;
    let source_path = t.source.as_ref().ok_or_else(|| CliError::missing("train.source", "--source"))?;
    if t.mode != UdaMode::Baseline && t.target.is_none() {
        return Err(CliError::missing("train.target", "--target"));
    }
    let source = load_coco(source_path).map_err(CliError::runtime)?;
    verify_manifest(&source).map_err(CliError::runtime)?;
    let target = match (&t.target, t.mode) {
        (Some(p), m) if m != UdaMode::Baseline => {
            let m = load_coco(p).map_err(CliError::runtime)?;
            verify_manifest(&m).map_err(CliError::runtime)?;
            Some(m)
        }
        _ => None,
    };
    snapshot(cfg, &t.out_dir, "train")?;
    let summary = train_to_dir::<T>(cfg, &source, target.as_ref(), &t.out_dir, t.resume.as_deref()).map_err(CliError::runtime)?;
    println!(
        "trained {} epochs / {} steps; checkpoint {}; metrics {}",
        summary.epochs,
        summary.steps,
        summary.final_checkpoint.display(),
        summary.metrics.display()
    );
    if let Some(row) = summary.last {
        println!("final L_det {:.5} L_total {:.5}", row.report.l_det, row.report.l_total);
    }
    Ok(())
}

fn eval_options(cfg: &Config) -> EvalOptions {
    EvalOptions {
        decode: cfg.decode,
        iou_threshold: cfg.eval.iou_threshold,
        min_overlap: cfg.codec.min_overlap,
        batch_size: cfg.eval.batch_size,
    }
}

fn cmd_evaluate<T: Scalar>(cfg: &Config) -> Result<(), CliError> {
    let e = &cfg.eval;
    let ckpt = e.checkpoint.as_ref().ok_or_else(|| CliError::missing("eval.checkpoint", "--checkpoint"))?;
    let testset = e.testset.as_ref().ok_or_else(|| CliError::missing("eval.testset", "--testset"))?;
    let params = load_params::<T>(ckpt)?;
    let manifest = load_coco(testset).map_err(CliError::runtime)?;
    let report = evaluate(&params, &manifest, &eval_options(cfg)).map_err(CliError::runtime)?;
    let label = ckpt.parent().and_then(Path::file_name).map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    print!("{}", format_table(&[(label, report.clone())]));
    println!(
        "mean heatmap: predicted {:.6}, ground truth {:.6}; mean entropy {:.6}; {:.1} images/s",
        report.mean_heatmap_predicted, report.mean_heatmap_ground_truth, report.mean_entropy, report.images_per_second
    );
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    match &e.report {
        Some(path) => {
            write_text(path, &json)?;
            snapshot(cfg, &parent_dir(path), "evaluate")?;
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_export<T: Scalar>(cfg: &Config) -> Result<(), CliError> {
    let e = &cfg.eval;
    let ckpt = e.checkpoint.as_ref().ok_or_else(|| CliError::missing("eval.checkpoint", "--checkpoint"))?;
    let manifest_path = e.testset.as_ref().ok_or_else(|| CliError::missing("eval.testset", "--images"))?;
    let params = load_params::<T>(ckpt)?;
    let manifest = load_coco(manifest_path).map_err(CliError::runtime)?;
    let mut images = Vec::new();
    for rec in manifest.images.iter().take(e.export_limit) {
        let name = Path::new(&rec.file_name).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| rec.id.to_string());
        images.push((name, Image::load_png(&rec.path).map_err(CliError::runtime)?));
    }
    let files = export_maps(&params, &images, &e.export_dir).map_err(CliError::runtime)?;
    println!("wrote {} files to {}", files.len(), e.export_dir.display());
    snapshot(cfg, &e.export_dir, "export-maps")
}

fn cmd_gradients(cfg: &Config) -> Result<(), CliError> {
    let rows = gradient_table(&default_probability_grid()).map_err(CliError::runtime)?;
    let mut buf = Vec::new();
    write_gradient_csv(&rows, &mut buf).map_err(CliError::runtime)?;
    let path = &cfg.eval.gradients_csv;
    write_text(path, std::str::from_utf8(&buf).expect("ascii csv"))?;
    if let Some(r) = rows.iter().find(|r| (r.p - 0.99).abs() < 1e-12) {
        println!(
            "p = 0.99: |d entropy/dp| = {:.4}, |d msl/dp| = {:.4}, ratio {:.3}",
            r.grad_entropy,
            r.grad_msl,
            r.grad_entropy / r.grad_msl
        );
    }
    println!("wrote {} rows to {}", rows.len(), path.display());
    snapshot(cfg, &parent_dir(path), "analyze-gradients")
}

fn cmd_throughput<T: Scalar>(cfg: &Config) -> Result<(), CliError> {
    let e = &cfg.eval;
    let params = match &e.checkpoint {
        Some(p) => load_params::<T>(p)?,
        None => build_model::<T>(&cfg.model, cfg.data.scene.num_classes(), cfg.run.seed).map_err(CliError::runtime)?,
    };
    let (h, w) = (cfg.data.scene.height, cfg.data.scene.width);
    let report = throughput(&params, h, w, e.throughput_iterations, e.throughput_warmup, &cfg.decode).map_err(|e| CliError::Usage(e.to_string()))?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{json}");
    if let Some(path) = &e.report {
        write_text(path, &json)?;
        snapshot(cfg, &parent_dir(path), "throughput")?;
    }
    Ok(())
}

fn cmd_compare(args: &CompareArgs) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for spec in &args.reports {
        let (label, path) = match spec.split_once('=') {
            Some((l, p)) => (l.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let label = p.parent().and_then(Path::file_name).map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| spec.clone());
                (label, p)
            }
        };
        let text = fs::read_to_string(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        let report: EvalReport = serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        rows.push((label, report));
    }
    let mut text = format_table(&rows);
    text.push('\n');
    let w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max("method".len());
    text.push_str(&format!("{:<w$} {:>12} {:>12} {:>12}\n", "method", "heatmap", "gt heatmap", "entropy"));
    for (label, r) in &rows {
        text.push_str(&format!(
            "{label:<w$} {:>12.6} {:>12.6} {:>12.6}\n",
            r.mean_heatmap_predicted, r.mean_heatmap_ground_truth, r.mean_entropy
        ));
    }
    print!("{text}");
    if let Some(out) = &args.out {
        write_text(out, &text)?;
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    if let Command::Compare(args) = &cli.command {
        return cmd_compare(args);
    }
    let cfg = Config::resolve(cli.config.as_deref(), &[cli.set.clone(), flag_assignments(cli)].concat()).map_err(|e| CliError::Usage(e.to_string()))?;
    macro_rules! typed {
        ($f:ident) => {
            match cfg.run.dtype {
                DType::F32 => $f::<f32>(&cfg),
                DType::F64 => $f::<f64>(&cfg),
            }
        };
    }
    match &cli.command {
        Command::GenerateData(_) => cmd_generate(&cfg),
        Command::Train(_) => typed!(cmd_train),
        Command::Evaluate(_) => typed!(cmd_evaluate),
        Command::ExportMaps(_) => typed!(cmd_export),
        Command::AnalyzeGradients(_) => cmd_gradients(&cfg),
        Command::Throughput(_) => typed!(cmd_throughput),
        Command::Compare(_) => unreachable!("handled above"),
    }
}

/// Parses `args` (including the program name) and runs the command. Returns the
/// process exit code: 0 success, 1 usage error, 2 runtime failure.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                eprintln!("run `udadet --help` for usage");
            }
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn help_exits_zero_and_unknown_flag_one() {
        assert_eq!(run(["udadet", "--help"]), EXIT_OK);
        assert_eq!(run(["udadet", "train", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["udadet"]), EXIT_USAGE);
    }

    #[test]
    fn train_without_source_is_usage_error() {
        let cli = Cli::try_parse_from(["udadet", "train"]).unwrap();
        match dispatch(&cli) {
            Err(CliError::Usage(msg)) => assert!(msg.contains("train.source"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn flags_become_assignments() {
        let cli = Cli::try_parse_from(["udadet", "--seed", "4", "train", "--mode", "em", "--epochs", "3", "--source", "a b/x.json"]).unwrap();
        let cfg = Config::resolve_with_env(None, &[], &flag_assignments(&cli)).unwrap();
        assert_eq!(cfg.run.seed, 4);
        assert_eq!(cfg.train.mode, UdaMode::Em);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.source, Some(PathBuf::from("a b/x.json")));
    }
}
