//! Experiment selection and parameter resolution.
//!
//! Parameters arrive from two places: an optional `key = value` config file
//! and command-line flags. Flags always win. [`RawConfig`] holds the merged,
//! still-unchecked values; [`resolve`] applies per-experiment defaults and
//! validation and produces the frozen [`ExperimentConfig`] that is echoed
//! verbatim into every report.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The experiments the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// Monte Carlo accept rate of a registry toy against its closed form.
    Soundness,
    /// Parallel attack success versus copy count on the encrypted-parity
    /// family, against the claimed decay floor.
    AttackCurve,
    /// Exact identity sweep over random skewed instances.
    SkewedExact,
    /// Cut-certificate sweep: displaced mass, divergence chain, and the
    /// small-event transfer bound on random instances.
    SmoothklCert,
    /// Maximal-deviation exceedance rates of the shipped martingale
    /// families against the closed-form bounds.
    Martingale,
    /// Tail bounds (Hoeffding, variance-shaped, scaled-Bernoulli) and the
    /// smooth-sampling identity.
    Concentration,
    /// Slow-resampling diagnostics: the bad-threshold probability and the
    /// bounding-function transport gap, reported without a claimed
    /// constant.
    BadT,
}

impl ExperimentKind {
    /// All experiments, in the order used by enumeration-style tooling.
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::Soundness,
        ExperimentKind::AttackCurve,
        ExperimentKind::SkewedExact,
        ExperimentKind::SmoothklCert,
        ExperimentKind::Martingale,
        ExperimentKind::Concentration,
        ExperimentKind::BadT,
    ];

    /// Stable kebab-case name (the CLI subcommand and CSV column value).
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Soundness => "soundness",
            ExperimentKind::AttackCurve => "attack-curve",
            ExperimentKind::SkewedExact => "skewed-exact",
            ExperimentKind::SmoothklCert => "smoothkl-cert",
            ExperimentKind::Martingale => "martingale",
            ExperimentKind::Concentration => "concentration",
            ExperimentKind::BadT => "bad-t",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ConfigError::UnknownExperiment(s.to_string()))
    }
}

/// Report serialization format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    /// Pretty-printed JSON document.
    Json,
    /// One CSV row per metric.
    Csv,
}

impl FromStr for ReportFormat {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(ConfigError::UnknownFormat(other.to_string())),
        }
    }
}

/// Configuration problems surfaced before any experiment runs.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown experiment {0:?} (expected one of soundness, attack-curve, skewed-exact, smoothkl-cert, martingale, concentration, bad-t)")]
    UnknownExperiment(String),
    #[error("unknown report format {0:?} (expected json or csv)")]
    UnknownFormat(String),
    #[error("cannot read config file {path}: {source}")]
    FileRead {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config file {path}, line {line}: {reason}")]
    FileSyntax { path: PathBuf, line: usize, reason: String },
    #[error("invalid value for {key}: {reason}")]
    BadValue { key: &'static str, reason: String },
    #[error("{experiment} requires {key}")]
    Missing { experiment: ExperimentKind, key: &'static str },
    #[error("unknown toy {0:?} (expected always-accept:<rounds>, coin-guess:<arity>, rt-coin-guess:<arity>, or repeat-coin-guess:<arity>:<copies>)")]
    UnknownToy(String),
    #[error("toy spec {spec:?}: {reason}")]
    BadToy { spec: String, reason: String },
}

/// Unvalidated parameter bag: every field optional, later sources losing to
/// earlier ones via [`RawConfig::or`].
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    pub m: Option<usize>,
    pub n: Option<Vec<usize>>,
    pub eps: Option<f64>,
    pub delta: Option<f64>,
    pub trials: Option<usize>,
    pub lambda: Option<Vec<f64>>,
    pub t: Option<Vec<f64>>,
    pub toy: Option<String>,
    pub instance: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub format: Option<ReportFormat>,
}

impl RawConfig {
    /// Merges two sources: `self` wins wherever it has a value.
    pub fn or(self, fallback: RawConfig) -> RawConfig {
        RawConfig {
            m: self.m.or(fallback.m),
            n: self.n.or(fallback.n),
            eps: self.eps.or(fallback.eps),
            delta: self.delta.or(fallback.delta),
            trials: self.trials.or(fallback.trials),
            lambda: self.lambda.or(fallback.lambda),
            t: self.t.or(fallback.t),
            toy: self.toy.or(fallback.toy),
            instance: self.instance.or(fallback.instance),
            seed: self.seed.or(fallback.seed),
            out: self.out.or(fallback.out),
            format: self.format.or(fallback.format),
        }
    }

    /// Parses a flat `key = value` file. `#` starts a comment; blank lines
    /// are skipped; list values are comma-separated. Unknown keys are
    /// rejected so typos cannot silently fall back to defaults.
    pub fn from_file(path: &Path) -> Result<RawConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::FileRead {
            path: path.to_path_buf(),
            source,
        })?;
        let mut raw = RawConfig::default();
        for (idx, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |reason: String| ConfigError::FileSyntax {
                path: path.to_path_buf(),
                line: idx + 1,
                reason,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| syntax("expected key = value".to_string()))?;
            let (key, value) = (key.trim(), value.trim());
            if value.is_empty() {
                return Err(syntax(format!("empty value for {key}")));
            }
            let parse_err =
                |reason: String| syntax(format!("bad value {value:?} for {key}: {reason}"));
            match key {
                "m" => raw.m = Some(value.parse().map_err(|e| parse_err(format!("{e}")))?),
                "n" => raw.n = Some(parse_list(value).map_err(parse_err)?),
                "eps" => raw.eps = Some(value.parse().map_err(|e| parse_err(format!("{e}")))?),
                "delta" => raw.delta = Some(value.parse().map_err(|e| parse_err(format!("{e}")))?),
                "trials" => {
                    raw.trials = Some(value.parse().map_err(|e| parse_err(format!("{e}")))?)
                }
                "lambda" => raw.lambda = Some(parse_list(value).map_err(parse_err)?),
                "t" => raw.t = Some(parse_list(value).map_err(parse_err)?),
                "toy" => raw.toy = Some(value.to_string()),
                "instance" => raw.instance = Some(PathBuf::from(value)),
                "seed" => raw.seed = Some(value.parse().map_err(|e| parse_err(format!("{e}")))?),
                "out" => raw.out = Some(PathBuf::from(value)),
                "format" => raw.format = Some(value.parse::<ReportFormat>().map_err(|e| parse_err(format!("{e}")))?),
                other => return Err(syntax(format!("unknown key {other:?}"))),
            }
        }
        Ok(raw)
    }
}

fn parse_list<T: FromStr>(value: &str) -> Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    value
        .split(',')
        .map(|part| part.trim().parse::<T>().map_err(|e| format!("{e}")))
        .collect()
}

/// Fully resolved experiment parameters: what actually ran, echoed into the
/// report so results are reproducible from the report alone. The worker
/// count is deliberately absent — it may never influence results, so it is
/// passed separately to the runner and kept out of the reproducibility
/// record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Rounds per protocol copy (attack-curve).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    /// Copy counts to sweep (attack-curve).
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub n: Vec<usize>,
    /// Dilution parameter of the encrypted-parity family (attack-curve).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    /// Termination-event density override; echoed for provenance, used by
    /// experiments that simulate a continuation law.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Monte Carlo trials, or instance count for exact sweeps.
    pub trials: usize,
    /// Exceedance thresholds (martingale).
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub lambda: Vec<f64>,
    /// Slow-resampling thresholds (bad-t).
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub t: Vec<f64>,
    /// Toy protocol spec from the registry (soundness).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub toy: Option<String>,
    /// Instance file overriding the random instance stream (exact sweeps).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instance: Option<PathBuf>,
    /// Master seed; every trial derives its own stream from it.
    pub seed: u64,
    /// Report destination (stdout when absent).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Report serialization format.
    pub format: ReportFormat,
}

const DEFAULT_LAMBDA: [f64; 3] = [0.05, 0.1, 0.25];
const DEFAULT_T: [f64; 4] = [2.0, 4.0, 8.0, 16.0];

fn default_trials(kind: ExperimentKind) -> usize {
    match kind {
        ExperimentKind::Soundness
        | ExperimentKind::AttackCurve
        | ExperimentKind::Martingale
        | ExperimentKind::Concentration => 100_000,
        ExperimentKind::SkewedExact | ExperimentKind::SmoothklCert => 100,
        ExperimentKind::BadT => 40,
    }
}

/// Applies defaults and validates the merged raw values for one experiment.
pub fn resolve(kind: ExperimentKind, raw: RawConfig) -> Result<ExperimentConfig, ConfigError> {
    let trials = raw.trials.unwrap_or_else(|| default_trials(kind));
    if trials == 0 {
        return Err(ConfigError::BadValue { key: "trials", reason: "must be at least 1".into() });
    }
    let lambda = raw.lambda.unwrap_or_else(|| DEFAULT_LAMBDA.to_vec());
    let t = raw.t.unwrap_or_else(|| DEFAULT_T.to_vec());
    if let Some(d) = raw.delta {
        if !(d > 0.0 && d <= 1.0) {
            return Err(ConfigError::BadValue {
                key: "delta",
                reason: format!("{d} is outside (0, 1]"),
            });
        }
    }
    for &v in &t {
        if !(v > 0.0 && v.is_finite()) {
            return Err(ConfigError::BadValue {
                key: "t",
                reason: format!("threshold {v} must be positive and finite"),
            });
        }
    }

    let mut cfg = ExperimentConfig {
        experiment: kind,
        m: raw.m,
        n: raw.n.unwrap_or_default(),
        eps: raw.eps,
        delta: raw.delta,
        trials,
        lambda,
        t,
        toy: raw.toy,
        instance: raw.instance,
        seed: raw.seed.unwrap_or(7),
        out: raw.out,
        format: raw.format.unwrap_or(ReportFormat::Json),
    };

    match kind {
        ExperimentKind::Soundness => {
            if cfg.toy.is_none() {
                cfg.toy = Some("always-accept:2".to_string());
            }
            // Eagerly validate the spec so errors surface before the run.
            crate::toys::build_toy(cfg.toy.as_deref().expect("just defaulted"))?;
        }
        ExperimentKind::AttackCurve => {
            let m = cfg.m.ok_or(ConfigError::Missing { experiment: kind, key: "m" })?;
            if m < 2 {
                return Err(ConfigError::BadValue {
                    key: "m",
                    reason: "the family needs at least two rounds".into(),
                });
            }
            let eps = cfg.eps.ok_or(ConfigError::Missing { experiment: kind, key: "eps" })?;
            if !(eps > 0.0 && eps <= 1.0 / 3.0 + 1e-12) {
                return Err(ConfigError::BadValue {
                    key: "eps",
                    reason: format!("{eps} is outside (0, 1/3]"),
                });
            }
            let scaled = (1.0 - 3.0 * eps) * 1000.0;
            if (scaled - scaled.round()).abs() >= 1e-6 {
                return Err(ConfigError::BadValue {
                    key: "eps",
                    reason: "1 - 3 eps must be a multiple of 1/1000".into(),
                });
            }
            if cfg.n.is_empty() {
                return Err(ConfigError::Missing { experiment: kind, key: "n" });
            }
            if let Some(&bad) = cfg.n.iter().find(|&&n| n < 2) {
                return Err(ConfigError::BadValue {
                    key: "n",
                    reason: format!("copy count {bad} must be at least 2"),
                });
            }
        }
        ExperimentKind::Martingale => {
            if cfg.trials < 1000 {
                return Err(ConfigError::BadValue {
                    key: "trials",
                    reason: "exceedance estimation needs at least 1000 trials".into(),
                });
            }
            if cfg.lambda.is_empty() {
                return Err(ConfigError::Missing { experiment: kind, key: "lambda" });
            }
            for &l in &cfg.lambda {
                if !(l > 0.0 && l <= 0.25) {
                    return Err(ConfigError::BadValue {
                        key: "lambda",
                        reason: format!("threshold {l} is outside (0, 1/4]"),
                    });
                }
            }
        }
        ExperimentKind::SkewedExact
        | ExperimentKind::SmoothklCert
        | ExperimentKind::Concentration
        | ExperimentKind::BadT => {}
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().expect("temp file");
        f.write_all(contents.as_bytes()).expect("write");
        f
    }

    #[test]
    fn file_values_parse_and_flags_win() {
        let f = write_temp(
            "# attack sweep\n\
             m = 4\n\
             n = 20, 40\n\
             eps = 0.1\n\
             trials = 5000\n\
             seed = 11\n\
             format = csv\n",
        );
        let file = RawConfig::from_file(f.path()).expect("parse");
        let flags = RawConfig { trials: Some(777), ..RawConfig::default() };
        let cfg = resolve(ExperimentKind::AttackCurve, flags.or(file)).expect("resolve");
        assert_eq!(cfg.m, Some(4));
        assert_eq!(cfg.n, vec![20, 40]);
        assert_eq!(cfg.trials, 777, "flag beats file");
        assert_eq!(cfg.seed, 11, "file beats default");
        assert_eq!(cfg.format, ReportFormat::Csv);
    }

    #[test]
    fn unknown_keys_and_bad_lists_are_rejected() {
        let f = write_temp("bogus = 3\n");
        assert!(matches!(
            RawConfig::from_file(f.path()),
            Err(ConfigError::FileSyntax { line: 1, .. })
        ));
        let f = write_temp("n = 20, forty\n");
        assert!(matches!(
            RawConfig::from_file(f.path()),
            Err(ConfigError::FileSyntax { line: 1, .. })
        ));
    }

    #[test]
    fn per_experiment_requirements_enforced() {
        let raw = RawConfig::default();
        assert!(matches!(
            resolve(ExperimentKind::AttackCurve, raw.clone()),
            Err(ConfigError::Missing { key: "m", .. })
        ));
        let raw = RawConfig {
            m: Some(4),
            eps: Some(0.21),
            n: Some(vec![4]),
            ..RawConfig::default()
        };
        // 1 - 3 * 0.21 = 0.37: representable, so this resolves.
        assert!(resolve(ExperimentKind::AttackCurve, raw).is_ok());
        let raw = RawConfig { m: Some(4), eps: Some(0.4), n: Some(vec![4]), ..RawConfig::default() };
        assert!(matches!(
            resolve(ExperimentKind::AttackCurve, raw),
            Err(ConfigError::BadValue { key: "eps", .. })
        ));
        let raw = RawConfig { lambda: Some(vec![0.3]), ..RawConfig::default() };
        assert!(matches!(
            resolve(ExperimentKind::Martingale, raw),
            Err(ConfigError::BadValue { key: "lambda", .. })
        ));
        let raw = RawConfig { trials: Some(10), ..RawConfig::default() };
        assert!(matches!(
            resolve(ExperimentKind::Martingale, raw),
            Err(ConfigError::BadValue { key: "trials", .. })
        ));
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = resolve(ExperimentKind::Soundness, RawConfig::default()).expect("resolve");
        assert_eq!(cfg.trials, 100_000);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.toy.as_deref(), Some("always-accept:2"));
        assert_eq!(cfg.lambda, vec![0.05, 0.1, 0.25]);
        assert_eq!(cfg.t, vec![2.0, 4.0, 8.0, 16.0]);
        assert_eq!(cfg.format, ReportFormat::Json);
        let cfg = resolve(ExperimentKind::BadT, RawConfig::default()).expect("resolve");
        assert_eq!(cfg.trials, 40);
    }

    #[test]
    fn experiment_names_round_trip() {
        for kind in ExperimentKind::ALL {
            assert_eq!(kind.as_str().parse::<ExperimentKind>().unwrap(), kind);
        }
        assert!("sondness".parse::<ExperimentKind>().is_err());
    }
}
