//! Flat `section.key = value` run configuration.
//!
//! ```text
//! # reference run
//! model.mu = 0.06
//! model.sigma = 0.2
//! grid.n_s = 1200
//! sim.n_paths = 100000
//! ```
//!
//! `#` starts a comment anywhere on a line. Unknown keys are rejected so that
//! typos do not silently fall back to defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::lattice::{GridConfig, LatticeError};
use crate::model::{ModelError, ModelParams};
use crate::primal::PrimalConfig;
use crate::simulate::SimConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file not found: {}", .path.display())]
    NotFound { path: PathBuf },
    #[error("cannot read {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: expected `section.key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("cannot parse `{key}` from `{raw}`")]
    Parse { key: String, raw: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("{0}")]
    Invalid(String),
}

const MODEL_KEYS: [&str; 6] = ["mu", "sigma", "delta", "p", "alpha", "T"];
const KNOWN_KEYS: &[&str] = &[
    "grid.n_s",
    "grid.n_tau",
    "grid.s_min",
    "grid.s_max",
    "grid.right_boundary",
    "primal.n_omega",
    "primal.lower_factor",
    "primal.upper_factor",
    "primal.cross_check_tol",
    "sim.n_paths",
    "sim.dt",
    "sim.seed",
    "sim.x0",
    "sim.z0",
    "sim.t0",
    "sim.antithetic",
    "sim.record_paths",
    "sim.table_points",
    "output.dir",
    "sweep.alphas",
];

/// Parses `section.key = value` lines into an ordered map.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let syntax = || ConfigError::Syntax {
            line: idx + 1,
            text: raw.trim().to_string(),
        };
        let (key, value) = line.split_once('=').ok_or_else(syntax)?;
        let (key, value) = (key.trim(), value.trim());
        let valid_key = key
            .split_once('.')
            .is_some_and(|(s, k)| !s.is_empty() && !k.is_empty())
            && !key.contains(char::is_whitespace);
        if !valid_key || value.is_empty() {
            return Err(syntax());
        }
        if map.insert(key.to_string(), value.to_string()).is_some() {
            return Err(ConfigError::Duplicate {
                line: idx + 1,
                key: key.to_string(),
            });
        }
    }
    Ok(map)
}

/// Everything one command-line run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub params: ModelParams,
    pub grid: GridConfig,
    pub primal: PrimalConfig,
    pub sim: Option<SimConfig>,
    pub output_dir: PathBuf,
    /// Drawdown fractions for `sweep-alpha` when none are given on the
    /// command line.
    pub sweep_alphas: Vec<f64>,
}

fn parse<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T, ConfigError> {
    raw.parse().map_err(|_| ConfigError::Parse {
        key: key.to_string(),
        raw: raw.to_string(),
    })
}

/// Comma separated list of reals, e.g. `0.3,0.6`.
pub fn parse_list(key: &str, raw: &str) -> Result<Vec<f64>, ConfigError> {
    raw.split(',')
        .map(|x| parse::<f64>(key, x.trim()))
        .collect()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => ConfigError::NotFound {
                path: path.to_path_buf(),
            },
            _ => ConfigError::Io {
                path: path.to_path_buf(),
                source: e,
            },
        })?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let map = parse_key_values(text)?;
        for key in map.keys() {
            let model = key
                .strip_prefix("model.")
                .is_some_and(|k| MODEL_KEYS.contains(&k));
            if !model && !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
        }
        let model: BTreeMap<String, String> = map
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("model.").map(|k| (k.to_string(), v.clone())))
            .collect();
        let params = ModelParams::from_key_values(&model)?;

        let get = |k: &str| map.get(k).map(String::as_str);
        let mut grid = GridConfig::default();
        if let Some(v) = get("grid.n_s") {
            grid.n_s = parse("grid.n_s", v)?;
        }
        if let Some(v) = get("grid.n_tau") {
            grid.n_tau = parse("grid.n_tau", v)?;
        }
        if let Some(v) = get("grid.s_min") {
            grid.s_min = Some(parse("grid.s_min", v)?);
        }
        if let Some(v) = get("grid.s_max") {
            grid.s_max = Some(parse("grid.s_max", v)?);
        }
        if let Some(v) = get("grid.right_boundary") {
            grid.right_boundary = v.parse()?;
        }

        let mut primal = PrimalConfig::default();
        if let Some(v) = get("primal.n_omega") {
            primal.n_omega = parse("primal.n_omega", v)?;
        }
        if let Some(v) = get("primal.lower_factor") {
            primal.lower_factor = parse("primal.lower_factor", v)?;
        }
        if let Some(v) = get("primal.upper_factor") {
            primal.upper_factor = parse("primal.upper_factor", v)?;
        }
        if let Some(v) = get("primal.cross_check_tol") {
            primal.cross_check_tol = parse("primal.cross_check_tol", v)?;
        }

        let sim = if map.keys().any(|k| k.starts_with("sim.")) {
            let mut s = SimConfig::default();
            if let Some(v) = get("sim.n_paths") {
                s.n_paths = parse("sim.n_paths", v)?;
            }
            if let Some(v) = get("sim.dt") {
                s.dt = parse("sim.dt", v)?;
            }
            if let Some(v) = get("sim.seed") {
                s.seed = parse("sim.seed", v)?;
            }
            if let Some(v) = get("sim.x0") {
                s.x0 = parse("sim.x0", v)?;
            }
            if let Some(v) = get("sim.z0") {
                s.z0 = parse("sim.z0", v)?;
            }
            if let Some(v) = get("sim.t0") {
                s.t0 = parse("sim.t0", v)?;
            }
            if let Some(v) = get("sim.antithetic") {
                s.antithetic = parse("sim.antithetic", v)?;
            }
            if let Some(v) = get("sim.record_paths") {
                s.record_paths = parse("sim.record_paths", v)?;
            }
            if let Some(v) = get("sim.table_points") {
                s.table_points = parse("sim.table_points", v)?;
            }
            Some(s)
        } else {
            None
        };

        let output_dir = PathBuf::from(get("output.dir").unwrap_or("out"));
        let sweep_alphas = match get("sweep.alphas") {
            Some(v) => parse_list("sweep.alphas", v)?,
            None => vec![0.3, 0.6],
        };
        Ok(Self {
            params,
            grid,
            primal,
            sim,
            output_dir,
            sweep_alphas,
        })
    }

    /// One-line summary of parameters and grid for output metadata.
    pub fn metadata(&self) -> String {
        let g = &self.grid;
        format!(
            "{} n_s={} n_tau={} right_boundary={}",
            self.params, g.n_s, g.n_tau, g.right_boundary
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# reference
model.mu = 0.06
model.sigma = 0.2   # volatility
model.delta = 0.6
model.p = 0.5
model.alpha = 0.5
model.T = 1

grid.n_s = 300
grid.n_tau = 100
sim.n_paths = 1000
sim.x0 = 1.2
";

    #[test]
    fn parses_sample() {
        let cfg = RunConfig::from_text(SAMPLE).unwrap();
        assert_eq!(cfg.params, ModelParams::reference());
        assert_eq!((cfg.grid.n_s, cfg.grid.n_tau), (300, 100));
        let sim = cfg.sim.unwrap();
        assert_eq!(sim.n_paths, 1000);
        assert_eq!(sim.x0, 1.2);
        assert_eq!(sim.dt, 1e-3);
        assert_eq!(cfg.output_dir, PathBuf::from("out"));
        assert_eq!(cfg.sweep_alphas, vec![0.3, 0.6]);
    }

    #[test]
    fn rejects_malformed_lines() {
        for bad in ["model.mu 0.06", "mu = 0.06", "model. = 1", "model.mu ="] {
            assert!(
                matches!(
                    parse_key_values(bad),
                    Err(ConfigError::Syntax { line: 1, .. })
                ),
                "{bad}"
            );
        }
        assert!(matches!(
            parse_key_values("a.b = 1\na.b = 2"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
    }

    #[test]
    fn rejects_unknown_and_missing() {
        let typo = SAMPLE.replace("grid.n_s", "grid.ns");
        assert!(matches!(
            RunConfig::from_text(&typo),
            Err(ConfigError::UnknownKey(k)) if k == "grid.ns"
        ));
        let missing = SAMPLE.replace("model.delta = 0.6", "");
        assert!(matches!(
            RunConfig::from_text(&missing),
            Err(ConfigError::Model(ModelError::Missing("delta")))
        ));
        let bad = SAMPLE.replace("grid.n_tau = 100", "grid.n_tau = many");
        assert!(matches!(
            RunConfig::from_text(&bad),
            Err(ConfigError::Parse { .. })
        ));
    }

    #[test]
    fn missing_file() {
        let err = RunConfig::load(Path::new("/nonexistent/run.cfg")).unwrap_err();
        assert!(matches!(err, ConfigError::NotFound { .. }));
        assert!(err.to_string().contains("/nonexistent/run.cfg"));
    }
}
