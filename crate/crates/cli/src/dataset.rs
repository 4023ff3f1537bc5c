//! Snapshot directories: one SBIF file per parameter plus `manifest.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sparsebif::datagen::{DatasetMeta, FieldLayout, FomSystem, SnapshotSet};
use sparsebif::formats::{encode_snap, json_error, read_snap};
use sparsebif::numkit::TimeGrid;

use crate::Failure;

pub const MANIFEST: &str = "manifest.json";
pub const DATA_FORMAT: &str = "sparsebif-data-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    /// RFC 3339 creation time; the only field that differs between reruns.
    pub created: String,
    pub system: Option<FomSystem>,
    pub params: Vec<f64>,
    pub grid: TimeGrid,
    pub layout: FieldLayout,
    pub seed: Option<u64>,
    pub lift_seed: Option<u64>,
    pub nonlinear_gain: Option<f64>,
    pub stop_tol: Option<f64>,
    /// Last integrated (non-padded) row per parameter.
    pub stop_indices: Vec<usize>,
    pub files: Vec<String>,
}

fn file_name(m: usize) -> String {
    format!("mu_{m:03}.sbif")
}

/// Refuses to write into a non-empty directory unless `force` is set.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<(), Failure> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(|e| Failure::io(format!("{}: {e}", dir.display())))?;
        if entries.next().is_some() && !force {
            return Err(Failure::io(format!(
                "{} exists and is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    } else {
        std::fs::create_dir_all(dir).map_err(|e| Failure::io(format!("{}: {e}", dir.display())))?;
    }
    Ok(())
}

pub fn write_dataset(set: &SnapshotSet, lift_seed: Option<u64>, dir: &Path, created: String) -> Result<Manifest, Failure> {
    let files: Vec<String> = (0..set.len()).map(file_name).collect();
    for (name, traj) in files.iter().zip(set.trajectories()) {
        let path = dir.join(name);
        std::fs::write(&path, encode_snap(traj)).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    }
    let meta = set.meta();
    let manifest = Manifest {
        format: DATA_FORMAT.to_string(),
        created,
        system: meta.map(|m| m.system),
        params: set.params().to_vec(),
        grid: set.grid(),
        layout: set.layout().clone(),
        seed: meta.map(|m| m.seed),
        lift_seed,
        nonlinear_gain: meta.map(|m| m.nonlinear_gain),
        stop_tol: meta.and_then(|m| m.stop_tol),
        stop_indices: set.last_recorded().to_vec(),
        files,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = dir.join(MANIFEST);
    std::fs::write(&path, text + "\n").map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, Failure> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Failure::from(json_error(&text, e)).context(&path))?;
    if manifest.format != DATA_FORMAT {
        return Err(Failure::io(format!(
            "{}: unsupported data format {:?} (expected {DATA_FORMAT:?})",
            path.display(),
            manifest.format
        )));
    }
    if manifest.files.len() != manifest.params.len() {
        return Err(Failure::io(format!("{}: files and params differ in length", path.display())));
    }
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<SnapshotSet, Failure> {
    let manifest = read_manifest(dir)?;
    let mut trajectories = Vec::with_capacity(manifest.files.len());
    for name in &manifest.files {
        let path: PathBuf = dir.join(name);
        trajectories.push(read_snap(&path).map_err(|e| Failure::from(e).context(&path))?);
    }
    let meta = match (manifest.system, manifest.seed) {
        (Some(system), Some(seed)) => Some(DatasetMeta {
            system,
            seed,
            nonlinear_gain: manifest.nonlinear_gain.unwrap_or(0.0),
            stop_tol: manifest.stop_tol,
        }),
        _ => None,
    };
    SnapshotSet::new(
        manifest.params,
        manifest.grid,
        trajectories,
        manifest.stop_indices,
        manifest.layout,
        meta,
    )
    .map_err(|e| Failure::io(format!("{}: inconsistent dataset: {e}", dir.display())))
}
