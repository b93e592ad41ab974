//! The `probe` command line: simulate, train, run, compare and inspect.
//!
//! Exit codes are a stable contract. 0 means success, 1 a usage or
//! validation problem, 2 a runtime or data problem.

pub mod report;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use probe_core::dataset::{missing_files, read_dataset, Dataset};
use probe_core::frontend::{prepare_sequence, run_prepared, run_sequence, EstimatorMode, ModeKind, PipelineConfig, SequenceRun};
use probe_core::model::{ProbeModel, RmseMode};
use probe_core::simulator::{generate, write_simulation, SimSpec};
use probe_core::training::{fit_model, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::report::{ComparisonReport, DiagnosticsReport, InspectReport, MetricsReport, ModeResult};

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn exit_code(&self) -> u8 {
        self.code
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<probe_core::Error> for CliError {
    fn from(e: probe_core::Error) -> Self {
        if e.is_data_error() {
            Self::runtime(e.to_string())
        } else {
            Self::usage(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn io_error(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "probe", version, about = "Stereo visual-inertial odometry with a learned feature quality model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Nominal,
    Aggressive,
    Probe,
}

impl From<ModeArg> for ModeKind {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Nominal => ModeKind::Nominal,
            ModeArg::Aggressive => ModeKind::Aggressive,
            ModeArg::Probe => ModeKind::Probe,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum RmseModeArg {
    PerStep,
    Windowed,
    FullPath,
    LoopClosure,
}

impl From<RmseModeArg> for RmseMode {
    fn from(m: RmseModeArg) -> Self {
        match m {
            RmseModeArg::PerStep => RmseMode::PerStep,
            RmseModeArg::Windowed => RmseMode::Windowed,
            RmseModeArg::FullPath => RmseMode::FullPath,
            RmseModeArg::LoopClosure => RmseMode::LoopClosure,
        }
    }
}

/// Settings shared by every command that runs the pipeline.
#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    /// JSON file with `pipeline` and `training` sections. Flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Cosine prefilter threshold in degrees.
    #[arg(long, global = true)]
    pub prefilter_deg: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from a JSON spec.
    Simulate {
        /// Simulation spec (JSON).
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the spec.
        #[arg(long)]
        seed: Option<u64>,
        /// Write predictors.csv instead of rendered images.
        #[arg(long)]
        predictors_only: bool,
    },
    /// Fit a model on a dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Model file to write. The report goes next to it.
        #[arg(long)]
        out: PathBuf,
        /// Traversals of the training path.
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        k_candidates: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        gamma_candidates: Option<Vec<f64>>,
        /// Chosen from the ground truth when omitted.
        #[arg(long, value_enum)]
        rmse_mode: Option<RmseModeArg>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Estimate a trajectory with one mode.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Required for probe mode.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Run all three modes and tabulate their errors.
    Compare {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Summarize a model file.
    Inspect {
        #[arg(long)]
        model: PathBuf,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
}

/// Layout of the `--config` file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub pipeline: PipelineConfig,
    pub training: TrainConfig,
}

impl ConfigFile {
    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }
}

fn resolve(args: &PipelineArgs) -> CliResult<ConfigFile> {
    let mut cfg = match &args.config {
        Some(path) => ConfigFile::read(path)?,
        None => ConfigFile::default(),
    };
    if let Some(seed) = args.seed {
        cfg.pipeline.seed = seed;
    }
    if let Some(deg) = args.prefilter_deg {
        cfg.pipeline.prefilter_deg = deg;
    }
    cfg.pipeline.validate()?;
    cfg.training.validate()?;
    Ok(cfg)
}

fn load_dataset(dir: &Path) -> CliResult<Dataset> {
    if !dir.is_dir() {
        return Err(CliError::usage(format!("{}: dataset directory does not exist", dir.display())));
    }
    let missing = missing_files(dir);
    if !missing.is_empty() {
        let names: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
        return Err(CliError::runtime(format!("{}: missing {}", dir.display(), names.join(", "))));
    }
    Ok(read_dataset(dir)?)
}

fn load_model(path: &Path, pipeline: &PipelineConfig) -> CliResult<ProbeModel> {
    if !path.is_file() {
        return Err(CliError::usage(format!("{}: model file does not exist", path.display())));
    }
    Ok(ProbeModel::load_checked(path, &pipeline.predictors)?)
}

/// Writes through a sibling temporary file so readers never see a partial
/// output.
fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| io_error(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_error(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("report types serialize");
    bytes.push(b'\n');
    bytes
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

/// Runs one parsed command, writing human-readable output to `out`.
pub fn execute(cli: &Cli, out: &mut impl Write) -> CliResult<()> {
    match &cli.command {
        Command::Simulate {
            spec,
            out: dir,
            seed,
            predictors_only,
        } => cmd_simulate(spec, dir, *seed, *predictors_only, out),
        Command::Train {
            dataset,
            out: model_path,
            iterations,
            k_candidates,
            gamma_candidates,
            rmse_mode,
            pipeline,
        } => {
            let mut cfg = resolve(pipeline)?;
            if let Some(l) = iterations {
                cfg.training.iterations = *l;
            }
            if let Some(k) = k_candidates {
                cfg.training.k_candidates = k.clone();
            }
            if let Some(g) = gamma_candidates {
                cfg.training.gamma_candidates = g.clone();
            }
            if let Some(m) = rmse_mode {
                cfg.training.mode = Some((*m).into());
            }
            cfg.training.validate()?;
            cmd_train(dataset, model_path, &cfg, out)
        }
        Command::Run {
            dataset,
            mode,
            model,
            out: dir,
            pipeline,
        } => {
            if *mode == ModeArg::Probe && model.is_none() {
                return Err(CliError::usage("probe mode needs --model"));
            }
            let cfg = resolve(pipeline)?;
            cmd_run(dataset, (*mode).into(), model.as_deref(), dir, &cfg.pipeline, out)
        }
        Command::Compare {
            dataset,
            model,
            out: dir,
            pipeline,
        } => {
            let cfg = resolve(pipeline)?;
            cmd_compare(dataset, model, dir.as_deref(), &cfg.pipeline, out).map(|_| ())
        }
        Command::Inspect { model, json } => cmd_inspect(model, *json, out),
    }
}

pub fn cmd_simulate(spec_path: &Path, dir: &Path, seed: Option<u64>, predictors_only: bool, out: &mut impl Write) -> CliResult<()> {
    let text = fs::read_to_string(spec_path).map_err(|e| io_error(spec_path, e))?;
    let mut spec: SimSpec = serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", spec_path.display())))?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let sim = generate(&spec)?;
    create_dir(dir)?;
    write_simulation(dir, &sim, !predictors_only, &PipelineConfig::default().predictors)?;
    writeln!(out, "wrote {} frames to {}", sim.dataset.frames.len(), dir.display()).map_err(|e| CliError::runtime(e.to_string()))?;
    Ok(())
}

pub fn cmd_train(dataset_dir: &Path, model_path: &Path, cfg: &ConfigFile, out: &mut impl Write) -> CliResult<()> {
    let dataset = load_dataset(dataset_dir)?;
    let (model, report) = fit_model(&dataset, &cfg.training, &cfg.pipeline)?;
    if let Some(parent) = model_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_atomic(model_path, &model.to_bytes())?;
    let report_path = model_path.with_extension("report.json");
    write_atomic(&report_path, &to_json(&report))?;
    writeln!(
        out,
        "trained {} mode: K = {}, gamma = {}, alpha_bar = {:.6} m, {} samples",
        report.mode, report.k, report.gamma, report.alpha_bar, report.theta_size
    )
    .map_err(|e| CliError::runtime(e.to_string()))?;
    Ok(())
}

fn write_run(dir: &Path, dataset: &Dataset, run: &SequenceRun) -> CliResult<()> {
    create_dir(dir)?;

    let mut traj = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::runtime(e.to_string());
    traj.write_record(["t", "x", "y", "z"]).map_err(csv_err)?;
    for (t, p) in run.times.iter().zip(run.positions()) {
        traj.write_record([t.to_string(), p.x.to_string(), p.y.to_string(), p.z.to_string()]).map_err(csv_err)?;
    }
    let traj = traj.into_inner().map_err(|e| CliError::runtime(e.to_string()))?;
    write_atomic(&dir.join("trajectory.csv"), &traj)?;

    let metrics = MetricsReport::new(dataset, run);
    let mut errors = csv::Writer::from_writer(Vec::new());
    errors.write_record(["frame", "t", "error"]).map_err(csv_err)?;
    for (k, e) in metrics.errors.iter().enumerate() {
        if let Some(e) = e {
            errors.write_record([k.to_string(), dataset.frame_time(k).to_string(), e.to_string()]).map_err(csv_err)?;
        }
    }
    let errors = errors.into_inner().map_err(|e| CliError::runtime(e.to_string()))?;
    write_atomic(&dir.join("errors.csv"), &errors)?;

    write_atomic(&dir.join("metrics.json"), &to_json(&metrics))?;
    let diagnostics = DiagnosticsReport {
        summary: run.diagnostics_summary(),
        pairs: run.diagnostics.clone(),
    };
    write_atomic(&dir.join("diagnostics.json"), &to_json(&diagnostics))
}

pub fn cmd_run(dataset_dir: &Path, mode: ModeKind, model_path: Option<&Path>, dir: &Path, pipeline: &PipelineConfig, out: &mut impl Write) -> CliResult<()> {
    let dataset = load_dataset(dataset_dir)?;
    let model = model_path.map(|p| load_model(p, pipeline)).transpose()?;
    let run = run_sequence(&dataset, EstimatorMode::from_kind(mode, model.as_ref())?, pipeline)?;
    write_run(dir, &dataset, &run)?;
    let metrics = run.metrics(&dataset);
    let w = |e: std::io::Error| CliError::runtime(e.to_string());
    match &metrics {
        Some(m) => writeln!(out, "{}: ARMSE {:.4} m, final error {:.4} m", mode.as_str(), m.armse, m.final_error).map_err(w)?,
        None => writeln!(out, "{}: loop closure error {:.4} m", mode.as_str(), run.loop_closure_error()).map_err(w)?,
    }
    if let Some(f) = &run.failure {
        return Err(CliError::runtime(format!("estimation failed at frame {}: {}", f.frame, f.message)));
    }
    Ok(())
}

/// Runs the three modes over one set of prepared pairs and tabulates them.
pub fn compare(dataset: &Dataset, model: &ProbeModel, pipeline: &PipelineConfig) -> CliResult<ComparisonReport> {
    pipeline.validate()?;
    let prepared = prepare_sequence(dataset, pipeline, true)?;
    let run = |kind: ModeKind| -> CliResult<SequenceRun> {
        let mode = EstimatorMode::from_kind(kind, Some(model))?;
        Ok(run_prepared(dataset, &prepared, mode, pipeline))
    };
    let nominal = run(ModeKind::Nominal)?;
    let aggressive = run(ModeKind::Aggressive)?;
    let probe = run(ModeKind::Probe)?;
    let (length, source) = report::trial_length(dataset, &nominal);
    Ok(ComparisonReport {
        trial: dataset.name.clone(),
        path_length: report::round4(length),
        path_length_source: source,
        nominal: ModeResult::new(dataset, &nominal),
        aggressive: ModeResult::new(dataset, &aggressive),
        probe: ModeResult::new(dataset, &probe),
    })
}

pub fn cmd_compare(dataset_dir: &Path, model_path: &Path, dir: Option<&Path>, pipeline: &PipelineConfig, out: &mut impl Write) -> CliResult<ComparisonReport> {
    let dataset = load_dataset(dataset_dir)?;
    let model = load_model(model_path, pipeline)?;
    let report = compare(&dataset, &model, pipeline)?;
    let table = report.to_table();
    out.write_all(table.as_bytes()).map_err(|e| CliError::runtime(e.to_string()))?;
    if let Some(dir) = dir {
        create_dir(dir)?;
        write_atomic(&dir.join("comparison.json"), &to_json(&report))?;
        write_atomic(&dir.join("comparison.txt"), table.as_bytes())?;
    }
    Ok(report)
}

pub fn cmd_inspect(model_path: &Path, json: bool, out: &mut impl Write) -> CliResult<()> {
    let model = load_model(model_path, &PipelineConfig::default())?;
    let report = InspectReport::new(&model);
    let text = if json { String::from_utf8(to_json(&report)).expect("JSON is UTF-8") } else { report.to_text() };
    out.write_all(text.as_bytes()).map_err(|e| CliError::runtime(e.to_string()))
}
