//! Run configuration files.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! # comment
//! section.key = 1.5e-3
//! section.key = "text"
//! section.key = [8, 4]
//! ```
//!
//! Sections are `system`, `grid`, `pod`, `ae`, `sindy`, `analysis` and `io`.
//! Unknown keys, duplicate keys and values of the wrong kind are rejected.
//! Booleans are written `true`/`false`, with or without quotes.

use std::collections::BTreeMap;
use std::path::Path;

use sparsebif::analysis::{DiagramMode, QoiSpec};
use sparsebif::autoenc::{LossWeights, TrainConfig};
use sparsebif::datagen::{linspace, FieldLayout, FomSystem, LiftMap, SystemKind};
use sparsebif::numkit::{Rng, TimeGrid};
use sparsebif::pod::TruncationRule;
use sparsebif::rom::OfflineConfig;
use sparsebif::sindy::{Aggregation, EnsembleConfig, LibrarySpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Str,
    Num,
    Int,
    Bool,
    Array,
}

const KEYS: &[(&str, Kind)] = &[
    ("system.kind", Kind::Str),
    ("system.mu_star", Kind::Num),
    ("system.omega", Kind::Num),
    ("system.transverse_dims", Kind::Int),
    ("system.transverse_rate", Kind::Num),
    ("system.n_h", Kind::Int),
    ("system.lift_gain", Kind::Num),
    ("system.lift_seed", Kind::Int),
    ("grid.t0", Kind::Num),
    ("grid.dt", Kind::Num),
    ("grid.t_end", Kind::Num),
    ("grid.mu", Kind::Array),
    ("grid.mu_min", Kind::Num),
    ("grid.mu_max", Kind::Num),
    ("grid.mu_count", Kind::Int),
    ("grid.seed", Kind::Int),
    ("grid.stop_tol", Kind::Num),
    ("pod.local_energy_tol", Kind::Num),
    ("pod.local_rank", Kind::Int),
    ("pod.global_energy_tol", Kind::Num),
    ("pod.global_rank", Kind::Int),
    ("ae.hidden", Kind::Array),
    ("ae.latent_dim", Kind::Int),
    ("ae.epochs", Kind::Int),
    ("ae.learning_rate", Kind::Num),
    ("ae.batch_size", Kind::Int),
    ("ae.seed", Kind::Int),
    ("ae.shuffle", Kind::Bool),
    ("ae.lambda1", Kind::Num),
    ("ae.lambda2", Kind::Num),
    ("ae.lambda3", Kind::Num),
    ("ae.time_window", Kind::Array),
    ("ae.resample_dt", Kind::Num),
    ("ae.train_fraction", Kind::Num),
    ("sindy.state_degree", Kind::Int),
    ("sindy.param_degree", Kind::Int),
    ("sindy.include_bias", Kind::Bool),
    ("sindy.threshold", Kind::Num),
    ("sindy.ridge", Kind::Num),
    ("sindy.max_iter", Kind::Int),
    ("sindy.ensemble_models", Kind::Int),
    ("sindy.sample_fraction", Kind::Num),
    ("sindy.library_drop", Kind::Int),
    ("sindy.aggregation", Kind::Str),
    ("sindy.seed", Kind::Int),
    ("analysis.qoi", Kind::Str),
    ("analysis.mode", Kind::Str),
    ("analysis.amplitude_window", Kind::Num),
    ("analysis.signal", Kind::Str),
    ("io.data_dir", Kind::Str),
    ("io.model", Kind::Str),
];

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Str(String),
    Num(f64),
    Array(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

fn err<T>(msg: impl Into<String>) -> Result<T> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    entries: BTreeMap<String, Value>,
}

fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

fn parse_value(raw: &str) -> std::result::Result<Value, String> {
    if let Some(rest) = raw.strip_prefix('"') {
        return match rest.strip_suffix('"') {
            Some(s) if !s.contains('"') => Ok(Value::Str(s.to_string())),
            _ => Err(format!("unterminated string {raw}")),
        };
    }
    if let Some(rest) = raw.strip_prefix('[') {
        let inner = rest.strip_suffix(']').ok_or_else(|| format!("unterminated array {raw}"))?;
        if inner.trim().is_empty() {
            return Ok(Value::Array(vec![]));
        }
        return inner
            .split(',')
            .map(|c| c.trim().parse::<f64>().map_err(|_| format!("array entry {:?} is not a number", c.trim())))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(Value::Array);
    }
    if raw == "true" || raw == "false" {
        return Ok(Value::Str(raw.to_string()));
    }
    raw.parse::<f64>()
        .map(Value::Num)
        .map_err(|_| format!("cannot parse value {raw:?} (strings need quotes)"))
}

fn check_kind(key: &str, kind: Kind, v: &Value) -> std::result::Result<(), String> {
    let ok = match (kind, v) {
        (Kind::Str, Value::Str(_)) => true,
        (Kind::Bool, Value::Str(s)) => s == "true" || s == "false",
        (Kind::Num, Value::Num(x)) => x.is_finite(),
        (Kind::Int, Value::Num(x)) => *x >= 0.0 && x.fract() == 0.0 && *x <= 9.007_199_254_740_992e15,
        (Kind::Array, Value::Array(a)) => a.iter().all(|x| x.is_finite()),
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        let want = match kind {
            Kind::Str => "a quoted string",
            Kind::Num => "a finite number",
            Kind::Int => "a nonnegative integer",
            Kind::Bool => "true or false",
            Kind::Array => "an array of numbers",
        };
        Err(format!("{key} must be {want}"))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = strip_comment(line).trim();
            if line.is_empty() {
                continue;
            }
            let at = |m: String| ConfigError(format!("line {}: {m}", n + 1));
            let (key, raw) = line.split_once('=').ok_or_else(|| at("expected `section.key = value`".into()))?;
            let key = key.trim();
            let kind = KEYS
                .iter()
                .find(|(k, _)| *k == key)
                .map(|&(_, kind)| kind)
                .ok_or_else(|| at(format!("unknown key {key:?}")))?;
            let value = parse_value(raw.trim()).map_err(at)?;
            check_kind(key, kind, &value).map_err(at)?;
            if entries.insert(key.to_string(), value).is_some() {
                return Err(at(format!("duplicate key {key:?}")));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> std::result::Result<Self, crate::Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::Failure::io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| crate::Failure::config(format!("{}: {e}", path.display())))
    }

    pub fn has(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn missing<T>(key: &str) -> Result<T> {
        err(format!("missing required key {key}"))
    }

    pub fn str_opt(&self, key: &str) -> Option<&str> {
        match self.entries.get(key) {
            Some(Value::Str(s)) => Some(s),
            _ => None,
        }
    }

    pub fn str(&self, key: &str) -> Result<&str> {
        self.str_opt(key).map_or_else(|| Self::missing(key), Ok)
    }

    pub fn num_opt(&self, key: &str) -> Option<f64> {
        match self.entries.get(key) {
            Some(Value::Num(x)) => Some(*x),
            _ => None,
        }
    }

    pub fn num(&self, key: &str) -> Result<f64> {
        self.num_opt(key).map_or_else(|| Self::missing(key), Ok)
    }

    pub fn int_opt(&self, key: &str) -> Option<u64> {
        self.num_opt(key).map(|x| x as u64)
    }

    pub fn int(&self, key: &str) -> Result<u64> {
        self.int_opt(key).map_or_else(|| Self::missing(key), Ok)
    }

    pub fn bool_or(&self, key: &str, default: bool) -> bool {
        self.str_opt(key).map_or(default, |s| s == "true")
    }

    pub fn array(&self, key: &str) -> Result<&[f64]> {
        match self.entries.get(key) {
            Some(Value::Array(a)) => Ok(a),
            _ => Self::missing(key),
        }
    }

    pub fn system(&self) -> Result<FomSystem> {
        let kind = self.str("system.kind")?;
        let mut sys = match kind {
            "pitchfork" => FomSystem::pitchfork(self.num("system.mu_star")?),
            "hopf" => FomSystem::hopf(self.num("system.mu_star")?, self.num_opt("system.omega").unwrap_or(1.0)),
            "lorenz" => FomSystem::lorenz(),
            other => return err(format!("system.kind must be pitchfork, hopf or lorenz, got {other:?}")),
        };
        if sys.kind != SystemKind::Lorenz || self.has("system.transverse_dims") {
            let dims = self.int_opt("system.transverse_dims").map_or(sys.transverse_dims, |d| d as usize);
            let rate = self.num_opt("system.transverse_rate").unwrap_or(sys.transverse_rate);
            sys = sys.with_transverse(dims, rate);
        }
        sys.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(sys)
    }

    pub fn layout(&self) -> Result<FieldLayout> {
        FieldLayout::flow(self.int("system.n_h")? as usize).map_err(|e| ConfigError(e.to_string()))
    }

    pub fn lift_map(&self, system: &FomSystem, layout: &FieldLayout) -> Result<LiftMap> {
        let gain = self.num_opt("system.lift_gain").unwrap_or(0.0);
        let seed = self.int_opt("system.lift_seed").unwrap_or(0);
        LiftMap::random(layout, system.dim(), gain, &mut Rng::new(seed)).map_err(|e| ConfigError(e.to_string()))
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        let t0 = self.num_opt("grid.t0").unwrap_or(0.0);
        TimeGrid::spanning(t0, self.num("grid.t_end")?, self.num("grid.dt")?).map_err(|e| ConfigError(e.to_string()))
    }

    pub fn params(&self) -> Result<Vec<f64>> {
        if self.has("grid.mu") {
            if self.has("grid.mu_min") || self.has("grid.mu_max") || self.has("grid.mu_count") {
                return err("give either grid.mu or grid.mu_min/mu_max/mu_count, not both");
            }
            let mu = self.array("grid.mu")?.to_vec();
            if mu.is_empty() {
                return err("grid.mu is empty");
            }
            return Ok(mu);
        }
        let count = self.int("grid.mu_count")? as usize;
        if count == 0 {
            return err("grid.mu_count must be positive");
        }
        Ok(linspace(self.num("grid.mu_min")?, self.num("grid.mu_max")?, count))
    }

    fn rule(&self, level: &str) -> Result<TruncationRule> {
        let tol = format!("pod.{level}_energy_tol");
        let rank = format!("pod.{level}_rank");
        match (self.num_opt(&tol), self.int_opt(&rank)) {
            (Some(d), None) => Ok(TruncationRule::EnergyTol(d)),
            (None, Some(r)) => Ok(TruncationRule::FixedRank(r as usize)),
            (Some(_), Some(_)) => err(format!("give either {tol} or {rank}, not both")),
            (None, None) => err(format!("missing required key {tol} or {rank}")),
        }
    }

    pub fn offline(&self) -> Result<OfflineConfig> {
        let hidden = self
            .array("ae.hidden")?
            .iter()
            .map(|&w| {
                if w >= 1.0 && w.fract() == 0.0 {
                    Ok(w as usize)
                } else {
                    err(format!("ae.hidden entries must be positive integers, got {w}"))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let latent_dim = self.int("ae.latent_dim")? as usize;
        let time_window = match self.entries.get("ae.time_window") {
            None => None,
            Some(Value::Array(w)) if w.len() == 2 => Some((w[0], w[1])),
            Some(_) => return err("ae.time_window must hold exactly two numbers"),
        };
        let has_param = self.params().map(|p| p.len() > 1).unwrap_or(true);
        let library = LibrarySpec::new(
            latent_dim,
            usize::from(has_param),
            self.int("sindy.state_degree")? as u32,
            if has_param { self.int_opt("sindy.param_degree").unwrap_or(1) as u32 } else { 0 },
            self.bool_or("sindy.include_bias", true),
        )
        .map_err(|e| ConfigError(e.to_string()))?;
        let aggregation = match self.str_opt("sindy.aggregation").unwrap_or("median") {
            "median" => Aggregation::Median,
            "mean" => Aggregation::Mean,
            other => return err(format!("sindy.aggregation must be median or mean, got {other:?}")),
        };
        let defaults = EnsembleConfig::default();
        let ensemble = EnsembleConfig {
            n_models: self.int_opt("sindy.ensemble_models").map_or(1, |v| v as usize),
            sample_fraction: self.num_opt("sindy.sample_fraction").unwrap_or(1.0),
            library_drop_count: self.int_opt("sindy.library_drop").map_or(0, |v| v as usize),
            aggregation,
            seed: self.int_opt("sindy.seed").unwrap_or(defaults.seed),
        };
        let cfg = OfflineConfig {
            local_rule: self.rule("local")?,
            global_rule: self.rule("global")?,
            time_window,
            resample_dt: self.num("ae.resample_dt")?,
            train_fraction: self.num_opt("ae.train_fraction").unwrap_or(0.9),
            hidden,
            latent_dim,
            train: TrainConfig {
                epochs: self.int("ae.epochs")? as usize,
                learning_rate: self.num("ae.learning_rate")?,
                batch_size: self.int("ae.batch_size")? as usize,
                seed: self.int_opt("ae.seed").unwrap_or(0),
                shuffle: self.bool_or("ae.shuffle", true),
            },
            loss: LossWeights {
                lambda1: self.num("ae.lambda1")?,
                lambda2: self.num("ae.lambda2")?,
                lambda3: self.num("ae.lambda3")?,
            },
            library,
            threshold: self.num("sindy.threshold")?,
            ridge: self.num_opt("sindy.ridge").unwrap_or(0.0),
            max_iter: self.int_opt("sindy.max_iter").map_or(10, |v| v as usize),
            ensemble,
        };
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }
}

/// `point_value:FIELD:INDEX`, `field_l2norm:FIELD` or `kinetic_energy`.
pub fn parse_qoi(text: &str) -> Result<QoiSpec> {
    let parts: Vec<&str> = text.split(':').collect();
    match parts.as_slice() {
        ["point_value", field, index] => Ok(QoiSpec::PointValue {
            field: field.to_string(),
            index: index.parse().map_err(|_| ConfigError(format!("bad point index {index:?}")))?,
        }),
        ["field_l2norm", field] => Ok(QoiSpec::FieldL2norm {
            field: field.to_string(),
            weights: None,
        }),
        ["kinetic_energy"] => Ok(QoiSpec::KineticEnergy {
            fields: vec![],
            weights: None,
        }),
        ["kinetic_energy", fields] => Ok(QoiSpec::KineticEnergy {
            fields: fields.split(',').map(str::to_string).collect(),
            weights: None,
        }),
        _ => err(format!(
            "unrecognised QoI {text:?}; use point_value:FIELD:INDEX, field_l2norm:FIELD or kinetic_energy"
        )),
    }
}

/// `final_value` or `amplitude`, the latter over the trailing `window` fraction.
pub fn parse_mode(text: &str, window: Option<f64>) -> Result<DiagramMode> {
    match text {
        "final_value" => Ok(DiagramMode::FinalValue),
        "amplitude" => Ok(window.map_or_else(DiagramMode::amplitude, |w| DiagramMode::Amplitude { window: w })),
        other => err(format!("mode must be final_value or amplitude, got {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_value_kinds() {
        let c = RunConfig::parse(
            "# header\nsystem.kind = \"pitchfork\"  # trailing\nsystem.mu_star = 0.96\nae.hidden = [8, 4]\nae.shuffle = false\n\n",
        )
        .unwrap();
        assert_eq!(c.str("system.kind").unwrap(), "pitchfork");
        assert_eq!(c.num("system.mu_star").unwrap(), 0.96);
        assert_eq!(c.array("ae.hidden").unwrap(), &[8.0, 4.0]);
        assert!(!c.bool_or("ae.shuffle", true));
    }

    #[test]
    fn rejects_bad_entries() {
        for (text, needle) in [
            ("system.colour = 3", "unknown key"),
            ("system.kind = pitchfork", "strings need quotes"),
            ("ae.epochs = 2.5", "nonnegative integer"),
            ("ae.epochs = 2\nae.epochs = 3", "duplicate"),
            ("ae.hidden = [1, x]", "not a number"),
            ("just words", "expected"),
            ("system.kind = \"hopf", "unterminated"),
        ] {
            let e = RunConfig::parse(text).unwrap_err();
            assert!(e.0.contains(needle), "{text}: {e}");
            assert!(e.0.starts_with("line "), "{e}");
        }
    }

    #[test]
    fn hash_inside_string_is_kept() {
        let c = RunConfig::parse("io.model = \"a#b.json\"").unwrap();
        assert_eq!(c.str("io.model").unwrap(), "a#b.json");
    }

    #[test]
    fn qoi_and_mode_strings() {
        assert_eq!(
            parse_qoi("point_value:u2:7").unwrap(),
            QoiSpec::PointValue { field: "u2".into(), index: 7 }
        );
        assert!(matches!(parse_qoi("field_l2norm:u2").unwrap(), QoiSpec::FieldL2norm { .. }));
        assert!(parse_qoi("energy").is_err());
        assert_eq!(parse_mode("amplitude", Some(0.5)).unwrap(), DiagramMode::Amplitude { window: 0.5 });
        assert!(parse_mode("max", None).is_err());
    }

    #[test]
    fn missing_keys_are_reported() {
        let c = RunConfig::parse("system.kind = \"hopf\"").unwrap();
        assert!(c.system().unwrap_err().0.contains("system.mu_star"));
        let both = RunConfig::parse("pod.local_rank = 3\npod.local_energy_tol = 1e-6").unwrap();
        assert!(both.rule("local").is_err());
    }
}
