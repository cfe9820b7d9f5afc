//! Experiment runners.
//!
//! [`run_experiment`] dispatches a resolved [`ExperimentConfig`] to one of
//! the seven runners and assembles the report. Every runner follows the
//! same reproducibility contract:
//!
//! - each trial or instance draws its own generator from
//!   `(master seed, experiment-scoped label, index)`, so results are
//!   independent of scheduling;
//! - parallel results are either collected in index order and folded
//!   sequentially, or combined with exact integer addition;
//! - the worker count is a runner argument, never part of the config, and
//!   must not change any reported value.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use amplab_core::concentration::ConcentrationError;
use amplab_core::dist::DistError;
use amplab_core::divergence::DivergenceError;
use amplab_core::martingale::{self, MartingaleError};
use amplab_core::skewed::{random_instance, BaseModel, DenseFamily, InstanceOptions, SkewedError};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, ExperimentKind};
use crate::instance::InstanceError;
use crate::report::{ExperimentReport, MetricRecord, ReportError, SCHEMA_VERSION};

mod attack_curve;
mod bad_t;
mod concentration_sweep;
mod martingale_sweep;
mod skewed_exact;
mod smoothkl;
mod soundness;

pub use martingale_sweep::shipped_families;

/// Counter map for cap hits, concessions, and skipped work.
pub type Caps = BTreeMap<String, u64>;

/// Metric list plus counters: what a runner produces.
pub type RunnerOutput = (Vec<MetricRecord>, Caps);

/// Error raised by an underlying laboratory module, tagged with the
/// experiment that triggered it.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Skewed(#[from] SkewedError),
    #[error(transparent)]
    Martingale(#[from] MartingaleError),
    #[error(transparent)]
    Concentration(#[from] ConcentrationError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

/// Anything that can stop an experiment run.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error("experiment {experiment}: {source}")]
    Module {
        experiment: ExperimentKind,
        #[source]
        source: CoreError,
    },
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("writing {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Tags a module error with its experiment.
fn in_experiment<E: Into<CoreError>>(
    experiment: ExperimentKind,
) -> impl Fn(E) -> HarnessError {
    move |source| HarnessError::Module { experiment, source: source.into() }
}

/// Runs one experiment on a dedicated thread pool with `workers` threads
/// (0 = one per logical CPU). The report is identical for every worker
/// count except for `runtime_ms`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    workers: usize,
) -> Result<ExperimentReport, HarnessError> {
    let started = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;
    let (metrics, caps) = pool.install(|| match cfg.experiment {
        ExperimentKind::Soundness => soundness::run(cfg),
        ExperimentKind::AttackCurve => attack_curve::run(cfg),
        ExperimentKind::SkewedExact => skewed_exact::run(cfg),
        ExperimentKind::SmoothklCert => smoothkl::run(cfg),
        ExperimentKind::Martingale => martingale_sweep::run(cfg),
        ExperimentKind::Concentration => concentration_sweep::run(cfg),
        ExperimentKind::BadT => bad_t::run(cfg),
    })?;
    let report = ExperimentReport {
        config: cfg.clone(),
        metrics,
        caps,
        runtime_ms: started.elapsed().as_millis() as u64,
        schema: SCHEMA_VERSION.to_string(),
    };
    report.check_finite()?;
    Ok(report)
}

/// Two-sided sampling radius for a `[0, 1]`-valued mean at failure
/// probability 0.003 (the reporting default).
pub(crate) fn hoeffding_ci(trials: usize) -> f64 {
    martingale::hoeffding_radius(1.0, trials)
}

/// Bernstein-flavored three-sigma radius for a Bernoulli proportion:
/// `3 sqrt(p (1 - p) / trials) + 3 / trials`. Much tighter than the
/// Hoeffding radius for rare events, which is what the attack floor
/// comparison needs.
pub(crate) fn bernoulli_ci3(p_hat: f64, trials: usize) -> f64 {
    let t = trials as f64;
    3.0 * (p_hat * (1.0 - p_hat) / t).sqrt() + 3.0 / t
}

/// The seeded random-instance stream shared by the exact sweeps: instance
/// `k` alternates the early-stop family restriction and makes every tenth
/// instance a full winning event, so degenerate and general shapes both
/// appear. An `--instance` file replaces the stream with that single
/// instance.
pub(crate) fn instance_stream(
    cfg: &ExperimentConfig,
    scope: &str,
) -> Result<Vec<(BaseModel, DenseFamily, bool)>, HarnessError> {
    if let Some(path) = &cfg.instance {
        let (base, fam) = crate::instance::load_instance(path)?;
        let full_w = base.w_mass() >= 1.0 - 1e-12;
        return Ok(vec![(base, fam, full_w)]);
    }
    Ok((0..cfg.trials as u64)
        .map(|k| {
            let mut rng = amplab_core::seeding::trial_rng(cfg.seed, scope, k);
            let opts = InstanceOptions {
                max_rows: 3,
                max_cols: 3,
                full_w: k % 10 == 9,
                termination_only: k % 2 == 1,
            };
            let (base, fam) = random_instance(&mut rng, &opts);
            (base, fam, opts.full_w)
        })
        .collect())
}

/// Per-trial generator in the given scope.
pub(crate) fn trial_rng(seed: u64, scope: &str, trial: u64) -> ChaCha8Rng {
    amplab_core::seeding::trial_rng(seed, scope, trial)
}

/// Formats a threshold for a metric name: trailing zeros trimmed by the
/// shortest-round-trip float formatter.
pub(crate) fn fmt_param(v: f64) -> String {
    let s = format!("{v:?}");
    s.strip_suffix(".0").map(str::to_string).unwrap_or(s)
}

/// Folds the running maximum of an error quantity.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct MaxErr(pub f64);

impl MaxErr {
    pub fn push(&mut self, v: f64) {
        if v > self.0 {
            self.0 = v;
        }
    }
}

/// Exact-identity metric: passes iff the accumulated error stays within
/// `tol`.
pub(crate) fn identity_metric(
    name: &str,
    err: f64,
    tol: f64,
    bound_ref: &str,
) -> MetricRecord {
    MetricRecord::upper_bounded(name, err, [err, err], tol, bound_ref, 0.0)
}
