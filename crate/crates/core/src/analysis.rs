//! Bifurcation diagnostics on full-order trajectories and scalar signals.

use std::io::Write;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::datagen::{FieldLayout, SnapshotSet};
use crate::error::{invalid, Error, Result};
use crate::formats::write_csv;
use crate::numkit::Matrix;
use crate::rom::{online_predict, RomModel};

/// Scalar quantity of interest extracted from one full-order state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QoiSpec {
    PointValue {
        field: String,
        index: usize,
    },
    /// `sqrt(Σ wⱼ xⱼ²)` over one field.
    FieldL2norm {
        field: String,
        #[serde(default)]
        weights: Option<Vec<f64>>,
    },
    /// `½ Σ wⱼ uⱼ²` over the listed fields; an empty list selects every
    /// field whose name starts with `u`.
    KineticEnergy {
        #[serde(default)]
        fields: Vec<String>,
        #[serde(default)]
        weights: Option<Vec<f64>>,
    },
}

/// Resolved index ranges and weights of a [`QoiSpec`].
struct Resolved {
    ranges: Vec<std::ops::Range<usize>>,
    weights: Option<Vec<f64>>,
}

fn resolve(spec: &QoiSpec, layout: &FieldLayout) -> Result<Resolved> {
    let check_weights = |w: &Option<Vec<f64>>, len: usize| -> Result<()> {
        match w {
            Some(w) if w.len() != len => Err(invalid(format!("{} weights for {len} entries", w.len()))),
            Some(w) if w.iter().any(|v| !v.is_finite() || *v < 0.0) => Err(invalid("weights must be finite and nonnegative")),
            _ => Ok(()),
        }
    };
    match spec {
        QoiSpec::PointValue { field, index } => {
            let f = layout.get(field)?;
            if *index >= f.len {
                return Err(invalid(format!("index {index} outside field {field} of length {}", f.len)));
            }
            Ok(Resolved {
                ranges: vec![f.start + index..f.start + index + 1],
                weights: None,
            })
        }
        QoiSpec::FieldL2norm { field, weights } => {
            let f = layout.get(field)?;
            check_weights(weights, f.len)?;
            Ok(Resolved {
                ranges: vec![f.range()],
                weights: weights.clone(),
            })
        }
        QoiSpec::KineticEnergy { fields, weights } => {
            let ranges: Vec<_> = if fields.is_empty() {
                layout.fields().iter().filter(|f| f.name.starts_with('u')).map(|f| f.range()).collect()
            } else {
                fields.iter().map(|n| layout.get(n).map(|f| f.range())).collect::<Result<_>>()?
            };
            if ranges.is_empty() {
                return Err(invalid("layout has no velocity fields"));
            }
            check_weights(weights, ranges.iter().map(|r| r.len()).sum())?;
            Ok(Resolved {
                ranges,
                weights: weights.clone(),
            })
        }
    }
}

fn weighted_square_sum(x: &[f64], ranges: &[std::ops::Range<usize>], weights: Option<&[f64]>) -> f64 {
    let values = ranges.iter().flat_map(|r| x[r.clone()].iter());
    match weights {
        Some(w) => values.zip(w).map(|(v, w)| w * v * v).sum(),
        None => values.map(|v| v * v).sum(),
    }
}

/// `E(tᵢ) = ½ Σⱼ wⱼ uⱼ(tᵢ)²` over the given column ranges of `traj`.
pub fn kinetic_energy(traj: &Matrix, velocity: &[std::ops::Range<usize>], weights: Option<&[f64]>) -> Result<Vec<f64>> {
    if velocity.iter().any(|r| r.end > traj.cols() || r.start > r.end) {
        return Err(invalid("velocity slice outside the state"));
    }
    let len: usize = velocity.iter().map(|r| r.len()).sum();
    if let Some(w) = weights {
        if w.len() != len {
            return Err(invalid(format!("{} weights for {len} velocity entries", w.len())));
        }
    }
    Ok(traj.row_iter().map(|x| 0.5 * weighted_square_sum(x, velocity, weights)).collect())
}

/// Per-row quantity of interest.
pub fn qoi(traj: &Matrix, spec: &QoiSpec, layout: &FieldLayout) -> Result<Vec<f64>> {
    if traj.cols() != layout.total_len() {
        return Err(invalid(format!(
            "trajectory width {} does not match layout width {}",
            traj.cols(),
            layout.total_len()
        )));
    }
    let r = resolve(spec, layout)?;
    let w = r.weights.as_deref();
    Ok(traj
        .row_iter()
        .map(|x| match spec {
            QoiSpec::PointValue { .. } => x[r.ranges[0].start],
            QoiSpec::FieldL2norm { .. } => weighted_square_sum(x, &r.ranges, w).sqrt(),
            QoiSpec::KineticEnergy { .. } => 0.5 * weighted_square_sum(x, &r.ranges, w),
        })
        .collect())
}

/// `max − min` of the series.
pub fn amplitude(e: &[f64]) -> f64 {
    let (lo, hi) = e
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if e.is_empty() {
        0.0
    } else {
        hi - lo
    }
}

/// Trailing `fraction` of a series (at least one sample).
pub fn trailing(e: &[f64], fraction: f64) -> &[f64] {
    let keep = ((e.len() as f64 * fraction).ceil() as usize).clamp(1.min(e.len()), e.len());
    &e[e.len() - keep..]
}

pub const DEFAULT_AMPLITUDE_WINDOW: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DiagramMode {
    FinalValue,
    /// Amplitude over the trailing `window` fraction of each series.
    Amplitude { window: f64 },
}

impl DiagramMode {
    pub fn amplitude() -> Self {
        DiagramMode::Amplitude {
            window: DEFAULT_AMPLITUDE_WINDOW,
        }
    }
}

/// Initial states and horizon for sweeping a model over parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RomSweep {
    pub params: Vec<f64>,
    /// One initial state per parameter, or a single state shared by all.
    pub x0: Vec<Vec<f64>>,
    pub t0: f64,
    pub t_end: f64,
    pub dt: f64,
}

pub enum DiagramSource<'a> {
    Data(&'a SnapshotSet),
    Model(&'a RomModel, &'a RomSweep),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagram {
    pub params: Vec<f64>,
    /// `None` where the trajectory diverged.
    pub values: Vec<Option<f64>>,
    pub diverged: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch_labels: Option<Vec<String>>,
}

impl Diagram {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let rows = self.params.iter().zip(&self.values).zip(&self.diverged).map(|((&p, v), &d)| {
            vec![p, v.unwrap_or(f64::NAN), if d { 1.0 } else { 0.0 }]
        });
        write_csv(w, &["mu", "value", "diverged"], rows)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("diagram serializes")
    }
}

fn reduce(series: &[f64], mode: DiagramMode) -> f64 {
    match mode {
        DiagramMode::FinalValue => *series.last().expect("nonempty series"),
        DiagramMode::Amplitude { window } => amplitude(trailing(series, window)),
    }
}

pub fn bifurcation_diagram(
    source: DiagramSource<'_>,
    layout: &FieldLayout,
    spec: &QoiSpec,
    mode: DiagramMode,
) -> Result<Diagram> {
    if let DiagramMode::Amplitude { window } = mode {
        if !(window > 0.0 && window <= 1.0) {
            return Err(invalid(format!("amplitude window must lie in (0, 1], got {window}")));
        }
    }
    resolve(spec, layout)?;
    match source {
        DiagramSource::Data(set) => {
            if set.is_empty() {
                return Err(invalid("empty snapshot set"));
            }
            let values = set
                .trajectories()
                .iter()
                .zip(set.last_recorded())
                .map(|(t, &last)| {
                    let s = qoi(&t.row_range(0, last + 1), spec, layout)?;
                    Ok(Some(reduce(&s, mode)))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Diagram {
                params: set.params().to_vec(),
                diverged: vec![false; values.len()],
                values,
                branch_labels: None,
            })
        }
        DiagramSource::Model(model, sweep) => {
            if sweep.params.is_empty() {
                return Err(invalid("parameter grid is empty"));
            }
            if sweep.x0.len() != 1 && sweep.x0.len() != sweep.params.len() {
                return Err(invalid("need one initial state or one per parameter"));
            }
            let values = sweep
                .params
                .par_iter()
                .enumerate()
                .map(|(i, &mu)| {
                    let x0 = &sweep.x0[if sweep.x0.len() == 1 { 0 } else { i }];
                    match online_predict(model, x0, mu, sweep.t0, sweep.t_end, sweep.dt) {
                        Ok(p) => Ok(Some(reduce(&qoi(&p.full, spec, layout)?, mode))),
                        Err(Error::DivergedTrajectory { .. }) => Ok(None),
                        Err(e) => Err(e),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Diagram {
                params: sweep.params.clone(),
                diverged: values.iter().map(Option::is_none).collect(),
                values,
                branch_labels: None,
            })
        }
    }
}

/// One-sided power spectral density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub frequencies: Vec<f64>,
    pub power: Vec<f64>,
    pub dt: f64,
    pub window_length: usize,
}

impl Spectrum {
    /// Frequency of the strongest bin above DC.
    pub fn peak_frequency(&self) -> f64 {
        let k = (1..self.power.len())
            .max_by(|&a, &b| self.power[a].total_cmp(&self.power[b]))
            .unwrap_or(0);
        self.frequencies[k]
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let rows = self.frequencies.iter().zip(&self.power).map(|(&f, &p)| vec![f, p]);
        write_csv(w, &["frequency", "power"], rows)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spectrum serializes")
    }
}

/// `|X_k|²/N` for `k = 0..=N/2`, interior bins doubled, at `k/(N·dt)`.
pub fn psd(signal: &[f64], dt: f64) -> Result<Spectrum> {
    let n = signal.len();
    if n < 4 {
        return Err(invalid(format!("power spectrum needs at least 4 samples, got {n}")));
    }
    if !(dt > 0.0) {
        return Err(invalid("dt must be positive"));
    }
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&x| Complex::new(x, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let half = n / 2;
    let power = (0..=half)
        .map(|k| {
            let p = buf[k].norm_sqr() / n as f64;
            let mirrored = k != 0 && !(n % 2 == 0 && k == half);
            if mirrored {
                2.0 * p
            } else {
                p
            }
        })
        .collect();
    Ok(Spectrum {
        frequencies: (0..=half).map(|k| k as f64 / (n as f64 * dt)).collect(),
        power,
        dt,
        window_length: n,
    })
}

/// Row `i` is `[s(i), s(i+lag), …, s(i+(m−1)·lag)]`.
pub fn delay_embed(signal: &[f64], lag: usize, m: usize) -> Result<Matrix> {
    if lag == 0 || m == 0 {
        return Err(invalid("lag and embedding dimension must be positive"));
    }
    let span = (m - 1) * lag;
    if signal.len() <= span {
        return Err(invalid(format!(
            "signal of length {} is too short for lag {lag} and dimension {m}",
            signal.len()
        )));
    }
    Ok(Matrix::from_fn(signal.len() - span, m, |i, j| signal[i + j * lag]))
}

/// First `n` with `‖x^{n+1} − x^n‖ / ‖x^n‖ < tol`; rows with zero norm are skipped.
pub fn steady_state_time(traj: &Matrix, tol: f64) -> Option<usize> {
    (0..traj.rows().saturating_sub(1)).find(|&n| {
        let a = traj.row(n);
        let norm = crate::numkit::norm2(a);
        if norm == 0.0 {
            return false;
        }
        let diff: f64 = a.iter().zip(traj.row(n + 1)).map(|(x, y)| (y - x) * (y - x)).sum();
        diff.sqrt() / norm < tol
    })
}
