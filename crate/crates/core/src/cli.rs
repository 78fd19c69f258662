//! Command-line front end: `generate`, `train`, `fit-adjoint`, `sweep`,
//! `report` and `check`.
//!
//! Exit codes: 0 on success, 1 for usage, configuration or input errors,
//! 2 for numerical aborts.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adjoint::{
    initial_guess, lbfgs_fit, AdjointError, AdjointProblem, FitResult, FitStatus, LbfgsConfig,
    RegWeights, INITIAL_DIFFUSION,
};
use crate::diagnostics::{
    rel_error, render_matrix, run_sweep, Aggregate, Cell, ResidualReport, RunOutcome, SweepRow,
    SweepTable, RESIDUAL_TIMES,
};
use crate::grid::{
    classify_voxels, load_dataset, normalize_series, sample_pde_points, save_dataset, Domain,
    GridError, SnapshotSeries, VoxelMask,
};
use crate::net::{init_glorot, Checkpoint, InputNormalization, NetError, NetworkConfig};
use crate::pinn::{
    even_checkpoints, observations, train, DiffusionMode, DiffusionParam, LossSpec, LrSchedule,
    PinnError, Refinement, TrainConfig, TrainInputs, TrainOutcome,
};
use crate::synth::{add_noise, make_synthetic, make_synthetic_with, varying_boundary, SynthError};

pub mod check;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Net(#[from] NetError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical(_) => 2,
            _ => 1,
        }
    }
}

impl From<PinnError> for CliError {
    fn from(e: PinnError) -> Self {
        match e {
            PinnError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            PinnError::Net(NetError::NonFiniteGradient { .. }) => CliError::Numerical(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::NonConvergence { .. } => CliError::Numerical(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<AdjointError> for CliError {
    fn from(e: AdjointError) -> Self {
        match e {
            AdjointError::Synth(s) => s.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSettings {
    pub mode: DiffusionMode,
    /// Starting coefficient in mm^2/h; the mode's default when absent.
    pub initial: Option<f64>,
}

impl Default for DiffusionSettings {
    fn default() -> Self {
        Self {
            mode: DiffusionMode::Bounded,
            initial: None,
        }
    }
}

impl DiffusionSettings {
    pub fn param(&self) -> Result<DiffusionParam> {
        match self.initial {
            None => Ok(DiffusionParam::initial(self.mode)),
            Some(d) => DiffusionParam::with_value(self.mode, d).ok_or_else(|| {
                CliError::Config(format!("initial coefficient {d} outside the bounded range"))
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub data_batch: usize,
    pub pde_batch: usize,
    /// Size of the initial collocation set.
    pub n_pde: usize,
    pub schedule: LrSchedule,
    pub refinement: Refinement,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 20_000,
            data_batch: 10_000,
            pde_batch: 50_000,
            n_pde: 1_000_000,
            schedule: LrSchedule::Exponential {
                start: 1e-3,
                end: 1e-4,
            },
            refinement: Refinement::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdjointSettings {
    pub reg: RegWeights,
    pub dt: f64,
    /// Defaults to the last snapshot time over `dt`.
    pub n_steps: Option<usize>,
    pub initial_diffusion: f64,
    pub lbfgs: LbfgsConfig,
}

impl Default for AdjointSettings {
    fn default() -> Self {
        Self {
            reg: RegWeights::new(1e-6, 0.01, 0.0),
            dt: 1.0,
            n_steps: None,
            initial_diffusion: INITIAL_DIFFUSION,
            lbfgs: LbfgsConfig::default(),
        }
    }
}

/// Everything a `train`, `fit-adjoint` or `sweep` run reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub network: NetworkConfig,
    pub diffusion: DiffusionSettings,
    pub loss: LossSpec,
    pub train: TrainSettings,
    pub adjoint: AdjointSettings,
    /// Ground-truth coefficient for relative errors, when known.
    pub reference_diffusion: Option<f64>,
    pub residual_times: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            output: None,
            seeds: vec![0],
            network: NetworkConfig::default(),
            diffusion: DiffusionSettings::default(),
            loss: LossSpec::default(),
            train: TrainSettings::default(),
            adjoint: AdjointSettings::default(),
            reference_diffusion: None,
            residual_times: RESIDUAL_TIMES,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seed list is empty".into()));
        }
        if self.train.n_pde == 0 {
            return Err(CliError::Config("n_pde must be positive".into()));
        }
        if self.residual_times == 0 {
            return Err(CliError::Config("residual_times must be positive".into()));
        }
        self.loss.validate()?;
        self.train_config(0).validate()?;
        self.diffusion.param()?;
        self.adjoint.reg.validate()?;
        if let Some(d) = self.reference_diffusion {
            if !(d > 0.0) {
                return Err(CliError::Config(format!("reference coefficient {d}")));
            }
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            data_batch: self.train.data_batch,
            pde_batch: self.train.pde_batch,
            schedule: self.train.schedule,
            seed,
            refinement: self.train.refinement.clone(),
        }
    }

    pub fn sha256(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Named starting points for common runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// `p = 2`, exponential decay 1e-3 to 1e-4.
    Clean,
    /// `p = 1` with RAR at nine evenly spaced checkpoints.
    Rar,
    /// `p = 1` with RAE at nine evenly spaced checkpoints.
    Rae,
}

pub fn preset(p: Preset) -> RunConfig {
    let mut cfg = RunConfig::default();
    match p {
        Preset::Clean => {}
        Preset::Rar | Preset::Rae => {
            cfg.loss = LossSpec::new(1.0, 1);
            let checkpoints = even_checkpoints(cfg.train.epochs, 9);
            let add = cfg.train.n_pde / 10;
            cfg.train.refinement = if p == Preset::Rar {
                Refinement::Rar {
                    checkpoints,
                    add,
                    candidates: None,
                }
            } else {
                Refinement::Rae {
                    checkpoints,
                    add,
                    candidates: None,
                }
            };
        }
    }
    cfg
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    // enum-valued sections are replaced wholesale
                    Some(slot) if slot.is_object() && v.is_object() && !is_enum_like(slot, &v) => {
                        merge(slot, v)
                    }
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Externally tagged enum values are single-key objects whose key differs.
fn is_enum_like(base: &Value, overlay: &Value) -> bool {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            b.len() == 1 && o.len() == 1 && b.keys().next() != o.keys().next()
        }
        _ => false,
    }
}

fn parse_scalar(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

/// Applies `path.to.key=value`; the value is JSON when it parses as JSON.
pub fn apply_set(config: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {assignment:?}")))?;
    let keys: Vec<&str> = path.split('.').collect();
    let mut slot = config;
    for key in &keys[..keys.len() - 1] {
        slot = slot
            .as_object_mut()
            .and_then(|m| m.get_mut(*key))
            .ok_or_else(|| CliError::Config(format!("unknown key {path:?}")))?;
    }
    let last = keys[keys.len() - 1];
    let obj = slot
        .as_object_mut()
        .ok_or_else(|| CliError::Config(format!("{path:?} is not inside a section")))?;
    let value = parse_scalar(raw);
    if obj.len() == 1 && !obj.contains_key(last) && value.is_object() {
        // switching an enum variant
        obj.clear();
    }
    obj.insert(last.to_string(), value);
    Ok(())
}

/// Resolves a run configuration from preset, file and `--set` overrides, in
/// that order, and validates it.
pub fn load_config(base: Option<Preset>, file: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let start = base.map(preset).unwrap_or_default();
    let mut value = serde_json::to_value(&start).expect("config serializes");
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
        let overlay: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
        if !overlay.is_object() {
            return Err(CliError::Config("top level must be an object".into()));
        }
        merge(&mut value, overlay);
    }
    for s in sets {
        apply_set(&mut value, s)?;
    }
    let cfg: RunConfig = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_sha256: Option<String>,
    seeds: Vec<u64>,
    artifacts: Vec<String>,
}

fn write_manifest(
    dir: &Path,
    command: &str,
    config: Option<&RunConfig>,
    seeds: Vec<u64>,
    artifacts: Vec<String>,
) -> Result<()> {
    let m = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        config_sha256: config.map(RunConfig::sha256),
        seeds,
        artifacts,
    };
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    write_file(&dir.join("manifest.json"), text.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(format!("writing {}", path.display())))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))
}

#[derive(Debug, Parser)]
#[command(name = "diffident", version, about = "Diffusion coefficient estimation from concentration snapshots")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a synthetic dataset on a built-in or given mask.
    Generate(GenerateArgs),
    /// Train a PINN on a dataset for every configured seed.
    Train(RunArgs),
    /// Fit the boundary-control model by L-BFGS.
    FitAdjoint(FitArgs),
    /// Train over the cartesian product of config variations.
    Sweep(SweepArgs),
    /// Render a results table from a sweep CSV.
    Report(ReportArgs),
    /// Run the finite-difference and analytic self-checks.
    Check(CheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Shape {
    Ball,
    Shell,
    CubeCavity,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum, default_value = "ball")]
    pub shape: Shape,
    /// Ball or outer shell radius in voxels.
    #[arg(long, default_value_t = 12)]
    pub radius: usize,
    /// Inner shell radius in voxels.
    #[arg(long, default_value_t = 6)]
    pub inner: usize,
    /// Cube edge in voxels.
    #[arg(long, default_value_t = 24)]
    pub size: usize,
    /// Cavity edge in voxels.
    #[arg(long, default_value_t = 8)]
    pub cavity: usize,
    /// Voxel edge in mm.
    #[arg(long, default_value_t = 1.0)]
    pub spacing: f64,
    /// Reuse the mask of an existing dataset instead of a built-in shape.
    #[arg(long)]
    pub mask_from: Option<PathBuf>,
    #[arg(long, default_value_t = 0.36)]
    pub d0: f64,
    /// Noise level; a noisy copy is written when positive.
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Solver time step in hours.
    #[arg(long, default_value_t = 0.25)]
    pub dt: f64,
    #[arg(long, value_delimiter = ',', default_value = "0,7,24,46")]
    pub times: Vec<f64>,
    /// Boundary values that vary along the boundary.
    #[arg(long)]
    pub heterogeneous: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.epochs=500`.
    #[arg(long = "set")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegGrid {
    /// alpha = 1e-6, beta in {0.001, 0.01, 0.1}, gamma in {0, 0.01, 1}.
    Clean,
    /// alpha = 1e-6, beta in {0, 0.01, 0.1}, gamma in {0, 0.01}.
    Noisy,
}

pub fn reg_grid(grid: RegGrid) -> Vec<RegWeights> {
    let (betas, gammas): (&[f64], &[f64]) = match grid {
        RegGrid::Clean => (&[0.001, 0.01, 0.1], &[0.0, 0.01, 1.0]),
        RegGrid::Noisy => (&[0.0, 0.01, 0.1], &[0.0, 0.01]),
    };
    betas
        .iter()
        .flat_map(|&b| gammas.iter().map(move |&g| RegWeights::new(1e-6, b, g)))
        .collect()
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Fit every cell of a regularization grid instead of the configured weights.
    #[arg(long, value_enum)]
    pub grid: Option<RegGrid>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// `key=v1,v2,...`; repeat for a cartesian product.
    #[arg(long = "vary")]
    pub vary: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CellFormat {
    /// Mean rel. error with mean residual norm.
    Residual,
    /// Mean rel. error with its standard deviation.
    Std,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub rows: String,
    #[arg(long)]
    pub cols: String,
    #[arg(long, value_enum, default_value = "residual")]
    pub format: CellFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Deliberately corrupts the network gradient; the check must then fail.
    #[arg(long, hide = true)]
    pub perturb_gradient: bool,
}

/// Caps the global thread pool from `DIFFIDENT_THREADS`.
pub fn init_threads() {
    if let Some(n) = std::env::var("DIFFIDENT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            e.print().ok();
            return code;
        }
    };
    init_threads();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Generate(a) => cmd_generate(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::FitAdjoint(a) => cmd_fit_adjoint(&a).map(|_| ()),
        Command::Sweep(a) => cmd_sweep(&a).map(|_| ()),
        Command::Report(a) => cmd_report(&a).map(|_| ()),
        Command::Check(a) => cmd_check(&a),
    }
}

fn build_mask(a: &GenerateArgs) -> Result<VoxelMask> {
    if let Some(path) = &a.mask_from {
        return Ok(load_dataset(path)?.0);
    }
    Ok(match a.shape {
        Shape::Ball => VoxelMask::ball(a.radius, a.spacing)?,
        Shape::Shell => VoxelMask::shell(a.radius, a.inner, a.spacing)?,
        Shape::CubeCavity => VoxelMask::cube_with_cavity(a.size, a.cavity, a.spacing)?,
    })
}

/// Writes `clean.dat` and, for positive noise, `noisy.dat`; returns the paths.
pub fn cmd_generate(a: &GenerateArgs) -> Result<Vec<PathBuf>> {
    let mask = build_mask(a)?;
    let domain = classify_voxels(&mask)?;
    let series = if a.heterogeneous {
        let t_final = a.times.last().copied().unwrap_or(0.0);
        make_synthetic_with(&domain, a.d0, &a.times, a.dt, |x, t| varying_boundary(x, t, t_final))?
    } else {
        make_synthetic(&domain, a.d0, &a.times, a.dt)?
    };
    create_dir(&a.out)?;
    let mut written = vec![a.out.join("clean.dat")];
    save_dataset(&written[0], &mask, &series)?;
    if a.sigma > 0.0 {
        let noisy = add_noise(&series, a.sigma, a.seed)?;
        written.push(a.out.join("noisy.dat"));
        save_dataset(&written[1], &mask, &noisy)?;
    }
    let names = written
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    write_manifest(&a.out, "generate", None, vec![a.seed], names)?;
    Ok(written)
}

/// Dataset with values scaled into `[0, 1]` and its classified mask.
pub struct PreparedData {
    pub domain: Domain,
    pub series: SnapshotSeries,
}

pub fn prepare(path: &Path) -> Result<PreparedData> {
    if !path.exists() {
        return Err(CliError::Usage(format!("dataset {} not found", path.display())));
    }
    let (mask, series) = load_dataset(path)?;
    let domain = classify_voxels(&mask)?;
    let series = normalize_series(&series)?;
    Ok(PreparedData { domain, series })
}

/// Three independent streams from one run seed: network init, collocation
/// sampling and training.
pub fn derive_seeds(seed: u64) -> [u64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [rng.random(), rng.random(), rng.random()]
}

/// One complete PINN run on prepared data.
pub fn run_training(data: &PreparedData, cfg: &RunConfig, seed: u64) -> Result<(TrainOutcome, ResidualReport)> {
    let t_final = data.series.final_time();
    let [init_seed, sample_seed, train_seed] = derive_seeds(seed);
    let norm = InputNormalization::new(data.domain.bounding_box(), t_final);
    let params = init_glorot(cfg.network, norm, init_seed)?;
    let points = sample_pde_points(&data.domain, cfg.train.n_pde, t_final, sample_seed)?;
    let obs = observations(&data.domain, &data.series);
    let inputs = TrainInputs {
        domain: &data.domain,
        observations: &obs,
        t_final,
    };
    let outcome = train(
        params,
        cfg.diffusion.param()?,
        &inputs,
        points,
        &cfg.loss,
        &cfg.train_config(train_seed),
    )?;
    let report = ResidualReport::compute(
        &outcome.params,
        &outcome.diffusion,
        &data.domain,
        data.series.timepoints(),
        cfg.residual_times,
    );
    Ok((outcome, report))
}

fn resolve_paths(cfg: &RunConfig, a: &RunArgs) -> Result<(PathBuf, PathBuf)> {
    let dataset = a
        .dataset
        .clone()
        .or_else(|| cfg.dataset.clone())
        .ok_or_else(|| CliError::Usage("no dataset given".into()))?;
    let out = a
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| CliError::Usage("no output directory given".into()))?;
    Ok((dataset, out))
}

#[derive(Debug, Serialize)]
struct TrainResult {
    seed: u64,
    diffusion: f64,
    rel_err_pct: Option<f64>,
    residual_norm: f64,
    n_pde: usize,
}

pub fn cmd_train(a: &RunArgs) -> Result<Vec<(u64, f64)>> {
    let cfg = load_config(a.preset, a.config.as_deref(), &a.set)?;
    let (dataset, out) = resolve_paths(&cfg, a)?;
    let data = prepare(&dataset)?;
    create_dir(&out)?;
    let mut results = Vec::new();
    let mut artifacts = Vec::new();
    for &seed in &cfg.seeds {
        let (outcome, report) = run_training(&data, &cfg, seed)?;
        let mut log = format!("{}\n", crate::pinn::EpochRecord::CSV_HEADER);
        for r in &outcome.log {
            log.push_str(&r.csv_row());
            log.push('\n');
        }
        let names = [
            format!("epochs_seed{seed}.csv"),
            format!("checkpoint_seed{seed}.bin"),
            format!("residual_seed{seed}.csv"),
        ];
        write_file(&out.join(&names[0]), log.as_bytes())?;
        let ck = Checkpoint {
            params: outcome.params.clone(),
            diffusion: outcome.diffusion,
            seed,
            epoch: cfg.train.epochs,
        };
        ck.save(&out.join(&names[1]))?;
        let mut buf = Vec::new();
        report.write_csv(&mut buf).expect("in-memory write");
        write_file(&out.join(&names[2]), &buf)?;
        artifacts.extend(names);
        let d = outcome.diffusion.value();
        if let Some(e) = outcome.nonpositive_epoch {
            eprintln!("warning: seed {seed}: coefficient became nonpositive at epoch {e}");
        }
        println!("seed {seed}: D = {d:.6} mm^2/h, residual = {:.3e}", report.final_norm);
        results.push(TrainResult {
            seed,
            diffusion: d,
            rel_err_pct: cfg.reference_diffusion.map(|r| rel_error(d, r).expect("validated")),
            residual_norm: report.final_norm,
            n_pde: outcome.pde_points.len(),
        });
    }
    let text = serde_json::to_string_pretty(&results).expect("results serialize");
    write_file(&out.join("result.json"), text.as_bytes())?;
    artifacts.push("result.json".into());
    write_manifest(&out, "train", Some(&cfg), cfg.seeds.clone(), artifacts)?;
    Ok(results.iter().map(|r| (r.seed, r.diffusion)).collect())
}

/// One boundary-control fit on prepared data.
pub fn run_adjoint(data: &PreparedData, cfg: &RunConfig, reg: &RegWeights) -> Result<FitResult> {
    let s = &cfg.adjoint;
    let t_final = data.series.final_time();
    let n_steps = s.n_steps.unwrap_or_else(|| (t_final / s.dt).round() as usize);
    let problem = AdjointProblem::new(&data.domain, &data.series, s.dt, n_steps)?;
    let g = initial_guess(&data.domain, &data.series, s.dt, n_steps)?;
    Ok(lbfgs_fit(&problem, reg, s.initial_diffusion, g, &s.lbfgs)?)
}

#[derive(Serialize)]
struct RegCell {
    alpha: f64,
    beta: f64,
    gamma: f64,
}

pub fn cmd_fit_adjoint(a: &FitArgs) -> Result<SweepTable> {
    let cfg = load_config(a.run.preset, a.run.config.as_deref(), &a.run.set)?;
    let (dataset, out) = resolve_paths(&cfg, &a.run)?;
    let data = prepare(&dataset)?;
    create_dir(&out)?;
    let regs = match a.grid {
        Some(g) => reg_grid(g)
            .into_iter()
            .map(|r| RegWeights {
                surface: cfg.adjoint.reg.surface,
                ..r
            })
            .collect(),
        None => vec![cfg.adjoint.reg],
    };
    let cells: Vec<(RegCell, u64)> = regs
        .iter()
        .map(|r| {
            (
                RegCell {
                    alpha: r.alpha,
                    beta: r.beta,
                    gamma: r.gamma,
                },
                0,
            )
        })
        .collect();
    let reference = cfg.reference_diffusion;
    let table = run_sweep(&cells, a.jobs, |cell, _| {
        let reg = RegWeights {
            alpha: cell.alpha,
            beta: cell.beta,
            gamma: cell.gamma,
            surface: cfg.adjoint.reg.surface,
        };
        let fit = run_adjoint(&data, &cfg, &reg).map_err(|e| e.to_string())?;
        let mut csv = format!("{}\n", crate::adjoint::IterationRecord::CSV_HEADER);
        for r in &fit.trace {
            csv.push_str(&r.csv_row());
            csv.push('\n');
        }
        let name = format!("convergence_a{}_b{}_g{}.csv", cell.alpha, cell.beta, cell.gamma);
        fs::write(out.join(name), csv).map_err(|e| e.to_string())?;
        if fit.status == FitStatus::LineSearchFailed {
            return Err(format!("line search failed at D = {}", fit.diffusion));
        }
        Ok(RunOutcome {
            diffusion: fit.diffusion,
            rel_error: reference.map_or(f64::NAN, |r| rel_error(fit.diffusion, r).unwrap_or(f64::NAN)),
            residual: fit.trace.last().map_or(f64::NAN, |r| r.misfit),
        })
    })
    .map_err(|e| CliError::Config(e.to_string()))?;
    let mut buf = Vec::new();
    table.write_csv(&mut buf).expect("in-memory write");
    write_file(&out.join("results.csv"), &buf)?;
    for row in &table.rows {
        let label: Vec<String> = row.config.iter().map(|(k, v)| format!("{k}={v}")).collect();
        match &row.outcome {
            Some(o) => println!("{}: D = {:.6}, rel. error {:.1}%", label.join(" "), o.diffusion, o.rel_error),
            None => println!("{}: x ({})", label.join(" "), row.message.as_deref().unwrap_or("")),
        }
    }
    write_manifest(&out, "fit-adjoint", Some(&cfg), vec![], vec!["results.csv".into()])?;
    Ok(table)
}

/// Splits `v1,v2,...` at top-level commas so JSON arrays stay intact.
fn split_values(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for ch in text.chars() {
        match ch {
            '[' | '{' => depth += 1,
            ']' | '}' => depth -= 1,
            ',' if depth == 0 => {
                out.push(std::mem::take(&mut cur));
                continue;
            }
            _ => {}
        }
        cur.push(ch);
    }
    out.push(cur);
    out
}

/// Every combination of the `key=v1,v2` variations, first key slowest.
pub fn expand_variations(vary: &[String]) -> Result<Vec<Vec<(String, String)>>> {
    let mut combos: Vec<Vec<(String, String)>> = vec![vec![]];
    for v in vary {
        let (key, values) = v
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--vary expects key=v1,v2, got {v:?}")))?;
        let values = split_values(values);
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |val| {
                    let mut c = c.clone();
                    c.push((key.to_string(), val.clone()));
                    c
                })
            })
            .collect();
    }
    Ok(combos)
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<SweepTable> {
    let base = load_config(a.run.preset, a.run.config.as_deref(), &a.run.set)?;
    let (dataset, out) = resolve_paths(&base, &a.run)?;
    let data = prepare(&dataset)?;
    create_dir(&out)?;
    let combos = expand_variations(&a.vary)?;
    let mut cells = Vec::new();
    for combo in &combos {
        let sets: Vec<String> = a
            .run
            .set
            .iter()
            .cloned()
            .chain(combo.iter().map(|(k, v)| format!("{k}={v}")))
            .collect();
        let cfg = load_config(a.run.preset, a.run.config.as_deref(), &sets)?;
        let label: BTreeMap<String, Value> = combo.iter().map(|(k, v)| (k.clone(), parse_scalar(v))).collect();
        for &seed in &cfg.seeds {
            cells.push(((label.clone(), cfg.clone()), seed));
        }
    }
    let labelled: Vec<(Labelled, u64)> = cells
        .into_iter()
        .map(|((label, cfg), seed)| (Labelled { label, cfg }, seed))
        .collect();
    let table = run_sweep(&labelled, a.jobs, |cell, seed| {
        let (outcome, report) = run_training(&data, &cell.cfg, seed).map_err(|e| e.to_string())?;
        let d = outcome.diffusion.value();
        Ok(RunOutcome {
            diffusion: d,
            rel_error: cell
                .cfg
                .reference_diffusion
                .map_or(f64::NAN, |r| rel_error(d, r).unwrap_or(f64::NAN)),
            residual: report.final_norm,
        })
    })
    .map_err(|e| CliError::Config(e.to_string()))?;
    let mut buf = Vec::new();
    table.write_csv(&mut buf).expect("in-memory write");
    write_file(&out.join("results.csv"), &buf)?;
    let mut artifacts = vec!["results.csv".to_string()];
    if a.vary.len() == 2 {
        let keys: Vec<String> = a.vary.iter().map(|v| v.split_once('=').unwrap().0.to_string()).collect();
        let text = matrix_from_rows(&table.rows, &keys[0], &keys[1], CellFormat::Residual);
        write_file(&out.join("table.txt"), text.as_bytes())?;
        print!("{text}");
        artifacts.push("table.txt".into());
    }
    write_manifest(&out, "sweep", Some(&base), base.seeds.clone(), artifacts)?;
    Ok(table)
}

struct Labelled {
    label: BTreeMap<String, Value>,
    cfg: RunConfig,
}

impl Serialize for Labelled {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.label.serialize(s)
    }
}

fn lookup<'r>(row: &'r SweepRow, key: &str) -> Option<&'r str> {
    row.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

/// Groups rows by two config keys and renders one aggregated cell per group.
pub fn matrix_from_rows(rows: &[SweepRow], row_key: &str, col_key: &str, format: CellFormat) -> String {
    let mut row_labels: Vec<String> = Vec::new();
    let mut col_labels: Vec<String> = Vec::new();
    for r in rows {
        let (Some(a), Some(b)) = (lookup(r, row_key), lookup(r, col_key)) else {
            continue;
        };
        if !row_labels.iter().any(|x| x == a) {
            row_labels.push(a.to_string());
        }
        if !col_labels.iter().any(|x| x == b) {
            col_labels.push(b.to_string());
        }
    }
    let body: Vec<(String, Vec<String>)> = row_labels
        .iter()
        .map(|ra| {
            let cells = col_labels
                .iter()
                .map(|cb| {
                    let group: Vec<&SweepRow> = rows
                        .iter()
                        .filter(|r| lookup(r, row_key) == Some(ra) && lookup(r, col_key) == Some(cb))
                        .collect();
                    let cell = Cell::from_rows(&group);
                    match format {
                        CellFormat::Residual => cell.with_residual(),
                        CellFormat::Std => cell.with_std(),
                    }
                })
                .collect();
            (ra.clone(), cells)
        })
        .collect();
    render_matrix(&format!("{row_key} \\ {col_key}"), &col_labels, &body)
}

/// Reads a results CSV written by `sweep` or `fit-adjoint`.
pub fn read_results(path: &Path) -> Result<Vec<SweepRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::Config(e.to_string()))?
        .clone();
    let fixed = ["seed", "D", "rel_err_pct", "residual_norm", "status"];
    let n_cfg = headers.len().saturating_sub(fixed.len());
    if headers.iter().skip(n_cfg).ne(fixed.iter().copied()) {
        return Err(CliError::Config(format!("{} is not a results table", path.display())));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| CliError::Config(e.to_string()))?;
        let num = |i: usize| rec[i].parse::<f64>().ok();
        let config = (0..n_cfg).map(|i| (headers[i].to_string(), rec[i].to_string())).collect();
        let seed = rec[n_cfg].parse().map_err(|_| CliError::Config(format!("bad seed {:?}", &rec[n_cfg])))?;
        let outcome = if &rec[n_cfg + 4] == "x" {
            None
        } else {
            Some(RunOutcome {
                diffusion: num(n_cfg + 1).unwrap_or(f64::NAN),
                rel_error: num(n_cfg + 2).unwrap_or(f64::NAN),
                residual: num(n_cfg + 3).unwrap_or(f64::NAN),
            })
        };
        rows.push(SweepRow {
            config,
            seed,
            outcome,
            message: None,
        });
    }
    Ok(rows)
}

pub fn cmd_report(a: &ReportArgs) -> Result<String> {
    let rows = read_results(&a.results)?;
    let text = matrix_from_rows(&rows, &a.rows, &a.cols, a.format);
    if let Some(out) = &a.out {
        write_file(out, text.as_bytes())?;
    }
    print!("{text}");
    Ok(text)
}

pub fn cmd_check(a: &CheckArgs) -> Result<()> {
    let results = check::run_checks(a.seed, a.perturb_gradient);
    let mut stdout = std::io::stdout().lock();
    for r in &results {
        writeln!(stdout, "{r}").ok();
    }
    if results.iter().all(|r| r.passed) {
        Ok(())
    } else {
        Err(CliError::Numerical("self-check failed".into()))
    }
}

/// Mean and sample std of the relative errors of successful rows.
pub fn error_summary(rows: &[SweepRow]) -> Option<Aggregate> {
    let errs: Vec<f64> = rows.iter().filter_map(|r| r.outcome.map(|o| o.rel_error)).collect();
    crate::diagnostics::aggregate(&errs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_overrides_and_rejects_unknown_keys() {
        let cfg = load_config(None, None, &["train.epochs=12".into(), "loss.exponent=1".into()]).unwrap();
        assert_eq!(cfg.train.epochs, 12);
        assert_eq!(cfg.loss.exponent, 1);
        assert!(load_config(None, None, &["train.epoch=12".into()]).is_err());
        assert!(load_config(None, None, &["bogus=1".into()]).is_err());
        assert!(load_config(None, None, &["loss.exponent=3".into()]).is_err());
        let e = load_config(None, None, &["train.epochs".into()]).unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn enum_sections_switch_variant() {
        let cfg = load_config(None, None, &[r#"train.schedule={"constant":{"rate":0.001}}"#.into()]).unwrap();
        assert_eq!(cfg.train.schedule, LrSchedule::Constant { rate: 0.001 });
        let cfg = load_config(None, None, &["diffusion.mode=\"identity\"".into()]).unwrap();
        assert_eq!(cfg.diffusion.mode, DiffusionMode::Identity);
    }

    #[test]
    fn config_file_merges_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"train": {"epochs": 3}, "seeds": [1, 2]}"#).unwrap();
        let cfg = load_config(None, Some(&path), &[]).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.data_batch, 10_000);
        assert_eq!(cfg.seeds, vec![1, 2]);
        fs::write(&path, r#"{"train": {"epoch": 3}}"#).unwrap();
        assert!(load_config(None, Some(&path), &[]).is_err());
    }

    #[test]
    fn rar_preset_grows_by_checkpoint_count() {
        let cfg = preset(Preset::Rar);
        match cfg.train.refinement {
            Refinement::Rar { checkpoints, add, .. } => {
                assert_eq!(checkpoints.len(), 9);
                assert_eq!(add, cfg.train.n_pde / 10);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn variations_expand_in_order() {
        let c = expand_variations(&["a=1,2".into(), "b=[1,2],x".into()]).unwrap();
        assert_eq!(c.len(), 4);
        assert_eq!(c[1], vec![("a".into(), "1".into()), ("b".into(), "x".into())]);
        assert_eq!(c[2][1].1, "[1,2]");
    }

    #[test]
    fn grids() {
        assert_eq!(reg_grid(RegGrid::Clean).len(), 9);
        assert_eq!(reg_grid(RegGrid::Noisy).len(), 6);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["diffident", "frobnicate"]), 1);
        assert_eq!(run(["diffident", "train"]), 1);
        assert_eq!(run(["diffident", "train", "--dataset", "/nonexistent/x.dat", "--out", "/tmp/x"]), 1);
    }
}
