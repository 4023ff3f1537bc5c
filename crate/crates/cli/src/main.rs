//! `sparsebif`: generate surrogate data, train reduced-order models, predict
//! and analyse.
//!
//! Exit codes: 0 success, 2 configuration or invalid input, 3 IO or file
//! format, 4 numerical failure, 5 divergence.

mod config;
mod dataset;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use sparsebif::analysis::{bifurcation_diagram, psd, qoi, DiagramSource, RomSweep};
use sparsebif::datagen::{generate_dataset, SnapshotSet};
use sparsebif::formats::{encode_snap, json_error, write_csv};
use sparsebif::numkit::{Matrix, Rng, TimeGrid};
use sparsebif::rom::{load_model, predict_latent, save_model, save_model_external, RomModel, ROM_FORMAT};
use sparsebif::sindy::{equations_to_json, equations_to_text, LibrarySpec, SindyModel};
use sparsebif::Error;

use config::{parse_mode, parse_qoi, RunConfig};

/// Error carrying its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }

    pub fn context(mut self, path: &Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidInput(_) | Error::Config(_) => 2,
            Error::Format { .. } | Error::Version { .. } | Error::Io(_) => 3,
            Error::NumericalFailure(_) | Error::OutOfRange { .. } | Error::TrainingAborted { .. } => 4,
            Error::DivergedTrajectory { .. } => 5,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<config::ConfigError> for Failure {
    fn from(e: config::ConfigError) -> Self {
        Failure::config(e.0)
    }
}

type CliResult = Result<(), Failure>;

#[derive(Parser)]
#[command(name = "sparsebif", version, about = "Sparse latent models of parameterized dynamics via nested POD and a SINDy autoencoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the surrogate system and write one SBIF file per parameter plus manifest.json.
    Generate(GenerateArgs),
    /// Fit the nested POD, the autoencoder and the latent model; prints `epoch,loss` lines.
    Train(TrainArgs),
    /// Integrate the latent model from an initial state and decode to full order.
    Predict(PredictArgs),
    /// Bifurcation diagram as CSV with columns `mu,value,diverged` (value is NaN where diverged).
    Diagram(DiagramArgs),
    /// Power spectral density of a QoI series as CSV with columns `frequency,power`.
    Spectrum(SpectrumArgs),
    /// Print the identified latent equations.
    Equations(EquationsArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to io.data_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Allow writing into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory; defaults to io.data_dir.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Model file to write; defaults to io.model.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Store the POD modes in this SBIF file (relative to the model) instead of inline.
    #[arg(long)]
    basis_file: Option<String>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    mu: f64,
    #[arg(long, allow_hyphen_values = true)]
    t0: f64,
    #[arg(long = "t-end", allow_hyphen_values = true)]
    t_end: f64,
    #[arg(long)]
    dt: f64,
    /// Initial state: a file of numbers (CSV/whitespace, or a one-row SBIF), or
    /// `from-data` to take the snapshot at t0 of the nearest training parameter.
    #[arg(long)]
    x0: String,
    /// Dataset directory, required with `--x0 from-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Writes PREFIX.sbif (full order) and PREFIX.latent.csv (`t,z0,z1,...`).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DiagramArgs {
    /// Run configuration supplying defaults from io.data_dir and analysis.*.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory. Alone it gives the data diagram; with --model it
    /// supplies the parameters and initial states.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// `point_value:FIELD:INDEX`, `field_l2norm:FIELD` or `kinetic_energy`.
    #[arg(long)]
    qoi: Option<String>,
    /// `final_value` (default) or `amplitude`.
    #[arg(long)]
    mode: Option<String>,
    /// Trailing fraction used by `amplitude` (default 0.25).
    #[arg(long)]
    window: Option<f64>,
    /// Model start time; defaults to the start of the training window.
    #[arg(long, allow_hyphen_values = true)]
    t0: Option<f64>,
    /// Model end time; defaults to the dataset's final time.
    #[arg(long = "t-end", allow_hyphen_values = true)]
    t_end: Option<f64>,
    /// Model step; defaults to the training resample step.
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SpectrumArgs {
    /// Run configuration supplying defaults from io.data_dir and analysis.signal.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// QoI whose time series is transformed.
    #[arg(long)]
    signal: Option<String>,
    /// Trajectory index; defaults to the last one.
    #[arg(long, conflicts_with = "mu")]
    index: Option<usize>,
    /// Use the trajectory with the nearest parameter.
    #[arg(long, allow_hyphen_values = true)]
    mu: Option<f64>,
    /// Discard samples before this time.
    #[arg(long, allow_hyphen_values = true)]
    from: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EquationsArgs {
    /// A model file, or a `sparsebif-equations-v1` document.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    json: bool,
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::io(format!("{}: {e}", path.display()))
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, Failure> {
    std::fs::File::create(path).map(std::io::BufWriter::new).map_err(|e| io_err(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn config_path(flag: Option<PathBuf>, cfg: &RunConfig, key: &str) -> Result<PathBuf, Failure> {
    match flag {
        Some(p) => Ok(p),
        None => Ok(PathBuf::from(cfg.str(key).map_err(|_| {
            Failure::config(format!("no path given on the command line and {key} is not set in the config"))
        })?)),
    }
}

fn cmd_generate(args: GenerateArgs) -> CliResult {
    let cfg = RunConfig::load(&args.config)?;
    let system = cfg.system()?;
    let layout = cfg.layout()?;
    let map = cfg.lift_map(&system, &layout)?;
    let grid = cfg.time_grid()?;
    let params = cfg.params()?;
    let seed = cfg.int_opt("grid.seed").unwrap_or(0);
    let stop_tol = cfg.num_opt("grid.stop_tol");
    let out = config_path(args.out, &cfg, "io.data_dir")?;
    let set = generate_dataset(&system, &params, grid, &map, &layout, &Rng::new(seed), stop_tol)?;
    dataset::prepare_out_dir(&out, args.force)?;
    let created = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
    dataset::write_dataset(&set, Some(cfg.int_opt("system.lift_seed").unwrap_or(0)), &out, created)?;
    eprintln!("wrote {} trajectories to {}", set.len(), out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> CliResult {
    let cfg = RunConfig::load(&args.config)?;
    let offline = cfg.offline()?;
    let data = config_path(args.data, &cfg, "io.data_dir")?;
    let model_path = config_path(args.model, &cfg, "io.model")?;
    let set = dataset::read_dataset(&data)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let fitted = sparsebif::rom::offline_fit_with_progress(&set, &offline, |epoch, loss| {
        let _ = writeln!(out, "{},{loss}", epoch + 1);
    });
    let model = match fitted {
        Ok(m) => m,
        Err(Error::TrainingAborted { epoch, reason, checkpoint }) => {
            let path = with_suffix(&model_path, ".checkpoint.json");
            let text = serde_json::to_string_pretty(&*checkpoint).expect("checkpoint serializes");
            std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
            return Err(Failure {
                code: 4,
                message: format!("training aborted at epoch {}: {reason}; checkpoint written to {}", epoch + 1, path.display()),
            });
        }
        Err(e) => return Err(e.into()),
    };
    match &args.basis_file {
        Some(rel) => save_model_external(&model, &model_path, rel),
        None => save_model(&model, &model_path),
    }
    .map_err(|e| Failure::from(e).context(&model_path))?;
    let r = &model.provenance.report;
    eprintln!(
        "reconstruction error {:.3e}, latent residual {:.3e} -> {:.3e}, N_pod = {}",
        r.reconstruction_rel_error,
        r.latent_rms_before_refit,
        r.latent_rms_after_refit,
        model.pod_basis.rank()
    );
    Ok(())
}

fn read_vector(path: &Path) -> Result<Vec<f64>, Failure> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.starts_with(sparsebif::formats::SNAP_MAGIC) {
        let m = sparsebif::formats::decode_snap(&bytes).map_err(|e| Failure::from(e).context(path))?;
        if m.rows() != 1 {
            return Err(Failure::config(format!("{}: initial state must have one row, found {}", path.display(), m.rows())));
        }
        return Ok(m.row(0).to_vec());
    }
    let text = String::from_utf8(bytes).map_err(|_| Failure::io(format!("{}: not UTF-8 text", path.display())))?;
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| Failure::config(format!("{}: {s:?} is not a number", path.display()))))
        .collect()
}

fn nearest(params: &[f64], mu: f64) -> usize {
    params
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - mu).abs().total_cmp(&(b.1 - mu).abs()))
        .map(|(i, _)| i)
        .expect("nonempty params")
}

fn snapshot_at(set: &SnapshotSet, m: usize, t: f64) -> Result<Vec<f64>, Failure> {
    let grid = set.grid();
    let k = ((t - grid.t0()) / grid.dt()).round();
    if !(k >= 0.0 && (k as usize) < grid.count()) {
        return Err(Failure::config(format!(
            "t0 = {t} lies outside the dataset grid [{}, {}]",
            grid.t0(),
            grid.t_end()
        )));
    }
    Ok(set.trajectories()[m].row(k as usize).to_vec())
}

fn write_latent_csv(path: &Path, grid: &TimeGrid, latent: &Matrix) -> CliResult {
    let mut header = vec!["t".to_string()];
    header.extend((0..latent.cols()).map(|k| format!("z{k}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = (0..latent.rows()).map(|i| {
        let mut row = vec![grid.time(i)];
        row.extend_from_slice(latent.row(i));
        row
    });
    write_csv(create(path)?, &header, rows).map_err(|e| Failure::from(e).context(path))
}

fn cmd_predict(args: PredictArgs) -> CliResult {
    let model = load_model(&args.model).map_err(|e| Failure::from(e).context(&args.model))?;
    let x0 = if args.x0 == "from-data" {
        let dir = args.data.as_ref().ok_or_else(|| Failure::config("--x0 from-data needs --data"))?;
        let set = dataset::read_dataset(dir)?;
        let m = nearest(set.params(), args.mu);
        if set.params()[m] != args.mu {
            eprintln!("note: initial state taken from the trajectory at mu = {}", set.params()[m]);
        }
        snapshot_at(&set, m, args.t0)?
    } else {
        read_vector(Path::new(&args.x0))?
    };
    if !model.in_param_range(args.mu) {
        let (lo, hi) = model.param_range;
        eprintln!("warning: mu = {} is outside the training range [{lo}, {hi}]", args.mu);
    }
    let grid = TimeGrid::spanning(args.t0, args.t_end, args.dt)?;
    let full_path = with_suffix(&args.out, ".sbif");
    let latent_path = with_suffix(&args.out, ".latent.csv");
    match predict_latent(&model, &x0, args.mu, grid) {
        Ok(latent) => {
            let full = model.decode_latent(&latent)?;
            std::fs::write(&full_path, encode_snap(&full)).map_err(|e| io_err(&full_path, e))?;
            write_latent_csv(&latent_path, &grid, &latent)
        }
        Err(Error::DivergedTrajectory { last_valid, partial }) => {
            let full = model.decode_latent(&partial)?;
            let fp = with_suffix(&full_path, ".partial");
            std::fs::write(&fp, encode_snap(&full)).map_err(|e| io_err(&fp, e))?;
            write_latent_csv(&with_suffix(&latent_path, ".partial"), &grid, &partial)?;
            Err(Failure {
                code: 5,
                message: format!(
                    "trajectory diverged after sample {last_valid} (t = {}); partial outputs kept with .partial suffix",
                    grid.time(last_valid)
                ),
            })
        }
        Err(e) => Err(e.into()),
    }
}

/// Command-line value, else the config entry, else `default`.
fn setting(flag: Option<String>, cfg: Option<&RunConfig>, key: &str, flag_name: &str, default: Option<&str>) -> Result<String, Failure> {
    flag.or_else(|| cfg.and_then(|c| c.str_opt(key)).map(str::to_string))
        .or_else(|| default.map(str::to_string))
        .ok_or_else(|| Failure::config(format!("{flag_name} is required (or set {key} in a --config file)")))
}

fn optional_config(path: &Option<PathBuf>) -> Result<Option<RunConfig>, Failure> {
    path.as_deref().map(RunConfig::load).transpose()
}

fn data_dir(flag: Option<PathBuf>, cfg: Option<&RunConfig>) -> Result<PathBuf, Failure> {
    let dir = setting(flag.map(|p| p.to_string_lossy().into_owned()), cfg, "io.data_dir", "--data", None)?;
    Ok(PathBuf::from(dir))
}

fn cmd_diagram(args: DiagramArgs) -> CliResult {
    let cfg = optional_config(&args.config)?;
    let cfg = cfg.as_ref();
    let set = dataset::read_dataset(&data_dir(args.data, cfg)?)?;
    let spec = parse_qoi(&setting(args.qoi, cfg, "analysis.qoi", "--qoi", None)?)?;
    let window = args.window.or_else(|| cfg.and_then(|c| c.num_opt("analysis.amplitude_window")));
    let mode = parse_mode(&setting(args.mode, cfg, "analysis.mode", "--mode", Some("final_value"))?, window)?;
    let diagram = match &args.model {
        None => bifurcation_diagram(DiagramSource::Data(&set), set.layout(), &spec, mode)?,
        Some(path) => {
            let model: RomModel = load_model(path).map_err(|e| Failure::from(e).context(path))?;
            let t0 = args.t0.unwrap_or(model.train_window.0);
            let x0 = (0..set.len()).map(|m| snapshot_at(&set, m, t0)).collect::<Result<Vec<_>, _>>()?;
            let sweep = RomSweep {
                params: set.params().to_vec(),
                x0,
                t0,
                t_end: args.t_end.unwrap_or(set.grid().t_end()),
                dt: args.dt.unwrap_or(model.resample_dt),
            };
            bifurcation_diagram(DiagramSource::Model(&model, &sweep), set.layout(), &spec, mode)?
        }
    };
    let n_div = diagram.diverged.iter().filter(|&&d| d).count();
    if n_div > 0 {
        eprintln!("warning: {n_div} of {} trajectories diverged", diagram.params.len());
    }
    diagram.write_csv(create(&args.out)?).map_err(|e| Failure::from(e).context(&args.out))
}

fn cmd_spectrum(args: SpectrumArgs) -> CliResult {
    let cfg = optional_config(&args.config)?;
    let cfg = cfg.as_ref();
    let set = dataset::read_dataset(&data_dir(args.data, cfg)?)?;
    let spec = parse_qoi(&setting(args.signal, cfg, "analysis.signal", "--signal", None)?)?;
    let m = match (args.index, args.mu) {
        (Some(i), _) if i < set.len() => i,
        (Some(i), _) => return Err(Failure::config(format!("--index {i} out of range (dataset has {})", set.len()))),
        (None, Some(mu)) => nearest(set.params(), mu),
        (None, None) => set.len() - 1,
    };
    let grid = set.grid();
    let last = set.last_recorded()[m];
    let series = qoi(&set.trajectories()[m].row_range(0, last + 1), &spec, set.layout())?;
    let start = match args.from {
        Some(t) => (((t - grid.t0()) / grid.dt()).ceil().max(0.0) as usize).min(series.len()),
        None => 0,
    };
    let spectrum = psd(&series[start..], grid.dt())?;
    eprintln!("mu = {}: peak at frequency {}", set.params()[m], spectrum.peak_frequency());
    spectrum.write_csv(create(&args.out)?).map_err(|e| Failure::from(e).context(&args.out))
}

pub const EQUATIONS_FORMAT: &str = "sparsebif-equations-v1";

/// Hand-written latent model: `coefficients` has one row per library term
/// and one column per latent variable.
#[derive(Deserialize)]
struct EquationsFile {
    format: String,
    library: LibrarySpec,
    #[serde(default)]
    threshold: f64,
    coefficients: Vec<Vec<f64>>,
}

fn load_equations(path: &Path) -> Result<SindyModel, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    #[derive(Deserialize)]
    struct Tag {
        format: Option<String>,
    }
    let tag: Tag = serde_json::from_str(&text).map_err(|e| Failure::from(json_error(&text, e)).context(path))?;
    if tag.format.as_deref() == Some(EQUATIONS_FORMAT) {
        let file: EquationsFile = serde_json::from_str(&text).map_err(|e| Failure::from(json_error(&text, e)).context(path))?;
        debug_assert_eq!(file.format, EQUATIONS_FORMAT);
        let rows = file.coefficients.len();
        let cols = file.coefficients.first().map_or(0, Vec::len);
        if file.coefficients.iter().any(|r| r.len() != cols) {
            return Err(Failure::io(format!("{}: coefficient rows differ in length", path.display())));
        }
        let xi = Matrix::from_vec(rows, cols, file.coefficients.concat())?;
        return Ok(SindyModel::new(file.library, xi, file.threshold)?);
    }
    let model = sparsebif::rom::parse_model(&text, path.parent()).map_err(|e| Failure::from(e).context(path))?;
    debug_assert!(tag.format.as_deref() == Some(ROM_FORMAT));
    Ok(model.latent_model)
}

fn cmd_equations(args: EquationsArgs) -> CliResult {
    let model = load_equations(&args.model)?;
    if args.json {
        println!("{}", equations_to_json(&model));
    } else {
        println!("{}", equations_to_text(&model));
    }
    Ok(())
}

fn configure_threads() -> CliResult {
    let Ok(v) = std::env::var("SPARSEBIF_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Failure::config(format!("SPARSEBIF_THREADS must be a nonnegative integer, got {v:?}")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::config(format!("cannot size the thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    configure_threads()?;
    match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Diagram(a) => cmd_diagram(a),
        Command::Spectrum(a) => cmd_spectrum(a),
        Command::Equations(a) => cmd_equations(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
