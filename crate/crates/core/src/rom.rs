//! End-to-end reduced-order model.
//!
//! Offline: restrict to a time window, nested POD, projection, per-column
//! scaling, spline resampling, finite-difference derivatives, per-trajectory
//! prefix split, joint autoencoder training, then a separate ensemble STLSQ
//! fit on the encoded training rows.
//!
//! Online: `z₀ = φ(scale(Vᵀx₀))`, RK4 on `ż = θ(z; μ)Ξ`, then
//! `xᵢ = V·unscale(ψ(zᵢ))`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autoenc::{forward, forward_one, train_with_progress, LossWeights, MlpParams, TrainConfig, TrainingData};
use crate::datagen::SnapshotSet;
use crate::error::{invalid, Error, Result};
use crate::formats::{self, Hasher};
use crate::numkit::{central_diff, natural_cubic_spline, rk4_integrate, Matrix, TimeGrid};
use crate::pod::{apply_scaler, fit_scaler, nested_pod, project, PodBasis, Scaler, TruncationRule};
use crate::sindy::{build_library, ensemble_stlsq, EnsembleConfig, LibrarySpec, SindyModel};

pub const ROM_FORMAT: &str = "sparsebif-rom-v1";
const ROM_FORMAT_PREFIX: &str = "sparsebif-rom-";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineConfig {
    pub local_rule: TruncationRule,
    pub global_rule: TruncationRule,
    /// Time interval used for fitting; `None` keeps the whole grid.
    pub time_window: Option<(f64, f64)>,
    pub resample_dt: f64,
    pub train_fraction: f64,
    /// Hidden widths of the encoder; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub train: TrainConfig,
    pub loss: LossWeights,
    /// Library for both the joint training and the latent refit.
    pub library: LibrarySpec,
    pub threshold: f64,
    pub ridge: f64,
    pub max_iter: usize,
    pub ensemble: EnsembleConfig,
}

impl OfflineConfig {
    /// Checks the configuration on its own, before any heavy work.
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if !(self.resample_dt > 0.0) {
            return cfg("resample_dt must be positive".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return cfg(format!("train_fraction must lie in (0, 1], got {}", self.train_fraction));
        }
        if self.latent_dim == 0 {
            return cfg("latent dimension must be at least 1".into());
        }
        if self.library.state_dim != self.latent_dim {
            return cfg(format!(
                "library state dimension {} does not match latent dimension {}",
                self.library.state_dim, self.latent_dim
            ));
        }
        if self.library.param_dim > 1 {
            return cfg("at most one parameter is supported".into());
        }
        if self.hidden.contains(&0) {
            return cfg("hidden layer widths must be positive".into());
        }
        if let Some((lo, hi)) = self.time_window {
            if !(hi > lo) {
                return cfg(format!("time window [{lo}, {hi}] is empty"));
            }
        }
        for r in [self.local_rule, self.global_rule] {
            r.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        self.library.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.loss.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.threshold >= 0.0) || !(self.ridge >= 0.0) {
            return cfg("threshold and ridge must be nonnegative".into());
        }
        Ok(())
    }
}

/// Diagnostics recorded at fit time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// `‖x − ψ(φ(x))‖_F / ‖x‖_F` over the scaled training coefficients.
    pub reconstruction_rel_error: f64,
    /// RMS of `ż − θ(z; μ)Ξ` on the encoded training rows with the jointly trained Ξ.
    pub latent_rms_before_refit: f64,
    /// Same residual with the refit Ξ.
    pub latent_rms_after_refit: f64,
    pub train_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of parameters, grid and trajectory payloads.
    pub dataset_hash: String,
    pub dataset_seed: Option<u64>,
    pub config: OfflineConfig,
    #[serde(with = "crate::formats::b64")]
    pub loss_history: Vec<f64>,
    pub report: FitReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RomModel {
    pub pod_basis: PodBasis,
    pub scaler: Scaler,
    pub encoder: MlpParams,
    pub decoder: MlpParams,
    pub latent_model: SindyModel,
    pub train_window: (f64, f64),
    pub train_fraction: f64,
    pub resample_dt: f64,
    /// Smallest and largest training parameter.
    pub param_range: (f64, f64),
    pub provenance: Provenance,
}

impl RomModel {
    pub fn n_h(&self) -> usize {
        self.pod_basis.n_h()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    /// Checks the chain `N_h → N_pod → n → N_pod → N_h`.
    pub fn check_dimensions(&self) -> Result<()> {
        let n_pod = self.pod_basis.rank();
        let n = self.encoder.output_dim();
        let ok = self.scaler.dim() == n_pod
            && self.scaler.passthrough().len() == n_pod
            && self.scaler.std().len() == n_pod
            && self.encoder.input_dim() == n_pod
            && self.decoder.input_dim() == n
            && self.decoder.output_dim() == n_pod
            && self.latent_model.state_dim() == n
            && self.latent_model.xi.shape() == (self.latent_model.spec.n_terms(), n);
        if ok {
            Ok(())
        } else {
            Err(invalid("model dimensions do not chain N_h -> N_pod -> n -> N_pod -> N_h"))
        }
    }

    /// `φ(scale(Vᵀx))` for one full-order state.
    pub fn encode_state(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_h() {
            return Err(invalid(format!(
                "state has length {} but the model expects {}",
                x.len(),
                self.n_h()
            )));
        }
        let mut c = self.pod_basis.modes().t_matvec(x);
        self.scaler.apply_row(&mut c);
        forward_one(&self.encoder, &c)
    }

    /// `V·unscale(ψ(z))` for every row of `z`.
    pub fn decode_latent(&self, z: &Matrix) -> Result<Matrix> {
        let mut c = forward(&self.decoder, z)?;
        let modes = self.pod_basis.modes();
        let mut out = Matrix::zeros(z.rows(), self.n_h());
        for i in 0..c.rows() {
            self.scaler.invert_row(c.row_mut(i));
            let ci = c.row(i);
            let row = out.row_mut(i);
            for (k, o) in row.iter_mut().enumerate() {
                *o = crate::numkit::dot(modes.row(k), ci);
            }
        }
        Ok(out)
    }

    pub fn in_param_range(&self, mu: f64) -> bool {
        mu >= self.param_range.0 && mu <= self.param_range.1
    }
}

/// Window, basis, scaled coefficients and derivatives on the resampled grid.
struct Prepared {
    grid: TimeGrid,
    coeffs: Vec<Matrix>,
    derivs: Vec<Matrix>,
    n_train: usize,
}

fn window_rows(grid: TimeGrid, window: (f64, f64)) -> Result<(usize, usize)> {
    let (lo, hi) = window;
    let slack = 1e-9 * grid.dt();
    let times = grid.times();
    let first = times.iter().position(|&t| t >= lo - slack);
    let last = times.iter().rposition(|&t| t <= hi + slack);
    match (first, last) {
        (Some(a), Some(b)) if b >= a + 2 => Ok((a, b)),
        _ => Err(Error::Config(format!(
            "time window [{lo}, {hi}] holds fewer than 3 samples of the data grid [{}, {}]",
            grid.t0(),
            grid.t_end()
        ))),
    }
}

fn restrict(set: &SnapshotSet, first: usize, last: usize) -> Result<SnapshotSet> {
    let grid = TimeGrid::new(set.grid().time(first), set.grid().dt(), last - first + 1)?;
    let trajs = set.trajectories().iter().map(|t| t.row_range(first, last + 1)).collect();
    let stops = set
        .last_recorded()
        .iter()
        .map(|&s| s.clamp(first, last) - first)
        .collect();
    SnapshotSet::new(set.params().to_vec(), grid, trajs, stops, set.layout().clone(), set.meta().cloned())
}

fn resample_grid(window: (f64, f64), dt: f64) -> Result<TimeGrid> {
    let steps = ((window.1 - window.0) / dt * (1.0 + 1e-12)).floor() as usize;
    TimeGrid::new(window.0, dt, steps + 1)
}

/// Projects, scales, resamples and differentiates every trajectory.
fn prepare(
    windowed: &SnapshotSet,
    basis: &PodBasis,
    scaler: Option<&Scaler>,
    resample_dt: f64,
    train_fraction: f64,
) -> Result<(Prepared, Scaler)> {
    let grid = windowed.grid();
    let window = (grid.t0(), grid.t_end());
    let raw: Vec<Matrix> = windowed
        .trajectories()
        .iter()
        .map(|t| project(basis, t))
        .collect::<Result<_>>()?;
    let scaler = match scaler {
        Some(s) => s.clone(),
        None => {
            // fit on the training prefix of every trajectory
            let t_split = window.0 + train_fraction * (window.1 - window.0);
            let rows: Vec<usize> = (0..grid.count()).filter(|&i| grid.time(i) <= t_split + 1e-9 * grid.dt()).collect();
            let blocks: Vec<Matrix> = raw.iter().map(|c| c.select_rows(&rows)).collect();
            fit_scaler(&Matrix::vstack(&blocks.iter().collect::<Vec<_>>())?)?
        }
    };
    let target = resample_grid(window, resample_dt)?;
    if target.count() < 3 {
        return Err(Error::Config("resampled window holds fewer than 3 samples".into()));
    }
    let mut coeffs = Vec::with_capacity(raw.len());
    let mut derivs = Vec::with_capacity(raw.len());
    for c in &raw {
        let scaled = apply_scaler(&scaler, c)?;
        let spline = natural_cubic_spline(grid, &scaled)?;
        let resampled = spline.resample(target)?;
        derivs.push(central_diff(&resampled, target.dt())?);
        coeffs.push(resampled);
    }
    let n_train = ((train_fraction * target.count() as f64).round() as usize).clamp(1, target.count());
    Ok((
        Prepared {
            grid: target,
            coeffs,
            derivs,
            n_train,
        },
        scaler,
    ))
}

fn dataset_hash(set: &SnapshotSet) -> String {
    let mut h = Hasher::new();
    h.f64s(set.params());
    let g = set.grid();
    h.f64s(&[g.t0(), g.dt()]);
    h.bytes(&(g.count() as u64).to_le_bytes());
    for t in set.trajectories() {
        h.f64s(t.as_slice());
    }
    h.finish()
}

fn latent_rms(z: &Matrix, zdot: &Matrix, mu: &[f64], model: &SindyModel) -> Result<f64> {
    let theta = build_library(z, mu, &model.spec)?;
    let pred = theta.matmul(&model.xi)?;
    let err = zdot.sub(&pred)?.frobenius_norm();
    Ok(err / ((zdot.rows() * zdot.cols()) as f64).sqrt())
}

/// Encoded training rows and their finite-difference derivatives.
struct LatentRows {
    z: Matrix,
    zdot: Matrix,
    mu: Vec<f64>,
}

fn encode_training_rows(prep: &Prepared, params: &[f64], encoder: &MlpParams) -> Result<LatentRows> {
    let mut zs = Vec::new();
    let mut zds = Vec::new();
    let mut mu = Vec::new();
    for (c, &m) in prep.coeffs.iter().zip(params) {
        let z = forward(encoder, c)?;
        let zd = central_diff(&z, prep.grid.dt())?;
        zs.push(z.row_range(0, prep.n_train));
        zds.push(zd.row_range(0, prep.n_train));
        mu.extend(std::iter::repeat(m).take(prep.n_train));
    }
    Ok(LatentRows {
        z: Matrix::vstack(&zs.iter().collect::<Vec<_>>())?,
        zdot: Matrix::vstack(&zds.iter().collect::<Vec<_>>())?,
        mu,
    })
}

fn fit_latent(rows: &LatentRows, spec: &LibrarySpec, tau: f64, ridge: f64, max_iter: usize, cfg: &EnsembleConfig) -> Result<SindyModel> {
    let theta = build_library(&rows.z, &rows.mu, spec)?;
    let fit = ensemble_stlsq(&theta, &rows.zdot, tau, ridge, max_iter, cfg)?;
    let mut model = SindyModel::new(spec.clone(), fit.xi, tau)?;
    for k in fit.empty_columns {
        model.notes.push(format!("z{k}: every coefficient fell below the threshold"));
    }
    Ok(model)
}

pub fn offline_fit(set: &SnapshotSet, cfg: &OfflineConfig) -> Result<RomModel> {
    offline_fit_with_progress(set, cfg, |_, _| {})
}

/// [`offline_fit`] reporting `(epoch, loss)` after each training epoch.
pub fn offline_fit_with_progress(
    set: &SnapshotSet,
    cfg: &OfflineConfig,
    on_epoch: impl FnMut(usize, f64),
) -> Result<RomModel> {
    cfg.validate()?;
    let window = cfg.time_window.unwrap_or((set.grid().t0(), set.grid().t_end()));
    let (first, last) = window_rows(set.grid(), window)?;
    let windowed = restrict(set, first, last)?;
    let basis = nested_pod(&windowed, cfg.local_rule, cfg.global_rule)?;
    let (prep, scaler) = prepare(&windowed, &basis, None, cfg.resample_dt, cfg.train_fraction)?;

    let mut xs = Vec::new();
    let mut xds = Vec::new();
    let mut mu = Vec::new();
    for ((c, d), &m) in prep.coeffs.iter().zip(&prep.derivs).zip(set.params()) {
        xs.push(c.row_range(0, prep.n_train));
        xds.push(d.row_range(0, prep.n_train));
        mu.extend(std::iter::repeat(m).take(prep.n_train));
    }
    let data = TrainingData {
        x: Matrix::vstack(&xs.iter().collect::<Vec<_>>())?,
        xdot: Matrix::vstack(&xds.iter().collect::<Vec<_>>())?,
        mu,
    };
    let ae = train_with_progress(&data, &cfg.hidden, cfg.latent_dim, &cfg.library, cfg.loss, &cfg.train, on_epoch)?;

    let recon = forward(&ae.decoder, &forward(&ae.encoder, &data.x)?)?;
    let reconstruction_rel_error = data.x.sub(&recon)?.frobenius_norm() / data.x.frobenius_norm().max(f64::MIN_POSITIVE);

    let rows = encode_training_rows(&prep, set.params(), &ae.encoder)?;
    let joint = SindyModel::new(cfg.library.clone(), ae.xi.clone(), 0.0)?;
    let latent_model = fit_latent(&rows, &cfg.library, cfg.threshold, cfg.ridge, cfg.max_iter, &cfg.ensemble)?;
    let report = FitReport {
        reconstruction_rel_error,
        latent_rms_before_refit: latent_rms(&rows.z, &rows.zdot, &rows.mu, &joint)?,
        latent_rms_after_refit: latent_rms(&rows.z, &rows.zdot, &rows.mu, &latent_model)?,
        train_rows: data.x.rows(),
    };
    let params = set.params();
    let model = RomModel {
        pod_basis: basis,
        scaler,
        encoder: ae.encoder,
        decoder: ae.decoder,
        latent_model,
        train_window: (windowed.grid().t0(), windowed.grid().t_end()),
        train_fraction: cfg.train_fraction,
        resample_dt: cfg.resample_dt,
        param_range: (params[0], params[params.len() - 1]),
        provenance: Provenance {
            dataset_hash: dataset_hash(set),
            dataset_seed: set.meta().map(|m| m.seed),
            config: cfg.clone(),
            loss_history: ae.loss_history,
            report,
        },
    };
    model.check_dimensions()?;
    Ok(model)
}

/// Refits the latent SINDy model on data re-encoded with the frozen networks.
pub fn refit_latent_sindy(
    model: &RomModel,
    set: &SnapshotSet,
    spec: &LibrarySpec,
    tau: f64,
    cfg: &EnsembleConfig,
) -> Result<RomModel> {
    if spec.state_dim != model.latent_dim() {
        return Err(Error::Config(format!(
            "library state dimension {} does not match latent dimension {}",
            spec.state_dim,
            model.latent_dim()
        )));
    }
    if set.n_h() != model.n_h() {
        return Err(invalid("dataset and model disagree on N_h"));
    }
    let (first, last) = window_rows(set.grid(), model.train_window)?;
    let windowed = restrict(set, first, last)?;
    let (prep, _) = prepare(&windowed, &model.pod_basis, Some(&model.scaler), model.resample_dt, model.train_fraction)?;
    let rows = encode_training_rows(&prep, set.params(), &model.encoder)?;
    let before = latent_rms(&rows.z, &rows.zdot, &rows.mu, &model.latent_model).ok();
    let c = &model.provenance.config;
    let latent_model = fit_latent(&rows, spec, tau, c.ridge, c.max_iter, cfg)?;
    let mut out = model.clone();
    if let Some(b) = before {
        out.provenance.report.latent_rms_before_refit = b;
    }
    out.provenance.report.latent_rms_after_refit = latent_rms(&rows.z, &rows.zdot, &rows.mu, &latent_model)?;
    out.latent_model = latent_model;
    Ok(out)
}

/// Online-phase output on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub grid: TimeGrid,
    pub latent: Matrix,
    pub full: Matrix,
}

/// Encodes `x0` and integrates the latent model on `grid`.
///
/// On divergence the error carries the latent rows computed so far.
pub fn predict_latent(model: &RomModel, x0: &[f64], mu: f64, grid: TimeGrid) -> Result<Matrix> {
    let z0 = model.encode_state(x0)?;
    let rhs = model.latent_model.rhs();
    rk4_integrate(|_, z, m: &f64, out| rhs(z, *m, out), &z0, grid, &mu)
}

/// Encodes `x0`, integrates the latent model from `t0` to `t_end` with step
/// `dt`, and decodes every step back to the full-order space.
///
/// On divergence the error carries the decoded rows computed so far.
pub fn online_predict(model: &RomModel, x0: &[f64], mu: f64, t0: f64, t_end: f64, dt: f64) -> Result<Prediction> {
    let grid = TimeGrid::spanning(t0, t_end, dt)?;
    let latent = match predict_latent(model, x0, mu, grid) {
        Ok(l) => l,
        Err(Error::DivergedTrajectory { last_valid, partial }) => {
            return Err(Error::DivergedTrajectory {
                last_valid,
                partial: Box::new(model.decode_latent(&partial)?),
            })
        }
        Err(e) => return Err(e),
    };
    let full = model.decode_latent(&latent)?;
    Ok(Prediction { grid, latent, full })
}

/// Pointer from a model file to an externally stored POD basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalBasis {
    /// Path relative to the model file.
    pub path: String,
    pub sha256: String,
}

#[derive(Serialize, Deserialize)]
struct RomFile {
    format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    external_basis: Option<ExternalBasis>,
    model: RomModel,
}

#[derive(Deserialize)]
struct FormatTag {
    format: Option<String>,
}

/// Writes the model as a single JSON document.
pub fn save_model(model: &RomModel, path: &Path) -> Result<()> {
    let file = RomFile {
        format: ROM_FORMAT.to_string(),
        external_basis: None,
        model: model.clone(),
    };
    let text = serde_json::to_string_pretty(&file).map_err(|e| invalid(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Writes the model JSON with the POD modes in a separate SBIF file at
/// `basis_rel` (relative to the model's directory).
pub fn save_model_external(model: &RomModel, path: &Path, basis_rel: &str) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let bytes = formats::encode_snap(model.pod_basis.modes());
    std::fs::write(dir.join(basis_rel), &bytes)?;
    let mut stripped = model.clone();
    let b = &model.pod_basis;
    stripped.pod_basis = PodBasis::from_parts(
        Matrix::zeros(b.n_h(), 0),
        b.singular_values().to_vec(),
        b.level(),
        b.local_ranks().to_vec(),
    )?;
    let file = RomFile {
        format: ROM_FORMAT.to_string(),
        external_basis: Some(ExternalBasis {
            path: basis_rel.to_string(),
            sha256: formats::sha256_hex(&bytes),
        }),
        model: stripped,
    };
    let text = serde_json::to_string_pretty(&file).map_err(|e| invalid(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Parses a model document. External bases are resolved against `dir`.
pub fn parse_model(text: &str, dir: Option<&Path>) -> Result<RomModel> {
    let tag: FormatTag = serde_json::from_str(text).map_err(|e| formats::json_error(text, e))?;
    match tag.format.as_deref() {
        Some(ROM_FORMAT) => {}
        Some(f) if f.starts_with(ROM_FORMAT_PREFIX) => {
            return Err(Error::Version {
                found: f.to_string(),
                expected: ROM_FORMAT.to_string(),
            })
        }
        _ => {
            return Err(Error::Format {
                offset: 0,
                message: "missing \"sparsebif-rom\" format tag".into(),
            })
        }
    }
    let file: RomFile = serde_json::from_str(text).map_err(|e| formats::json_error(text, e))?;
    let mut model = file.model;
    if let Some(ext) = file.external_basis {
        let dir = dir.unwrap_or_else(|| Path::new("."));
        let bytes = std::fs::read(dir.join(&ext.path))?;
        if formats::sha256_hex(&bytes) != ext.sha256 {
            return Err(Error::Format {
                offset: 0,
                message: format!("external basis {} does not match its recorded hash", ext.path),
            });
        }
        let modes = formats::decode_snap(&bytes)?;
        let b = &model.pod_basis;
        model.pod_basis = PodBasis::from_parts(modes, b.singular_values().to_vec(), b.level(), b.local_ranks().to_vec())?;
    }
    model.check_dimensions().map_err(|e| Error::Format {
        offset: 0,
        message: e.to_string(),
    })?;
    Ok(model)
}

pub fn load_model(path: &Path) -> Result<RomModel> {
    let bytes = std::fs::read(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Format {
        offset: e.valid_up_to() as u64,
        message: "model file is not valid UTF-8".into(),
    })?;
    parse_model(text, path.parent())
}
