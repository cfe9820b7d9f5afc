//! Exceedance rates of the shipped martingale families against the
//! closed-form maximal-deviation bounds.
//!
//! Each `(family, threshold)` cell estimates the probability that the
//! path's running maximum deviation exceeds the threshold, then compares it
//! against the ratio bound evaluated at the estimated score plus its own
//! sampling radius (the bound is linear in the score, so this is the
//! conservative evaluation), plus the exceedance sampling radius. Ratio
//! families with a drift/noise split also get the pair-form bound.

use amplab_core::martingale::{empirical_exceedance, lemma_bound, prop_bound, MartingaleGenerator};
use rayon::prelude::*;

use super::{fmt_param, in_experiment, Caps, HarnessError, RunnerOutput};
use crate::config::{ExperimentConfig, ExperimentKind};
use crate::report::MetricRecord;

/// The families the sweep ships: a constant path, two i.i.d. multiplicative
/// walks, two survival-weight families, two drifting ratio families, and a
/// rare-jump family.
pub fn shipped_families() -> Vec<MartingaleGenerator> {
    vec![
        MartingaleGenerator::constant(10),
        MartingaleGenerator::iid_symmetric(50, 0.05),
        MartingaleGenerator::iid_symmetric(50, 0.005),
        MartingaleGenerator::survival_weight(4, 4),
        MartingaleGenerator::survival_weight(10, 10),
        MartingaleGenerator::drift_ratio(30),
        MartingaleGenerator::drift_ratio(60),
        MartingaleGenerator::rare_jump(6),
    ]
}

/// Rebuilds family `idx` of [`shipped_families`]; generators are built
/// inside each parallel task so the closure stays `Send`.
fn family(idx: usize) -> MartingaleGenerator {
    shipped_families().swap_remove(idx)
}

pub(super) fn run(cfg: &ExperimentConfig) -> Result<RunnerOutput, HarnessError> {
    let family_count = shipped_families().len();
    let cells: Vec<(usize, f64)> = (0..family_count)
        .flat_map(|i| cfg.lambda.iter().map(move |&l| (i, l)))
        .collect();

    let err = in_experiment(ExperimentKind::Martingale);
    let estimates = cells
        .par_iter()
        .map(|&(idx, lambda)| {
            let gen = family(idx);
            let est = empirical_exceedance(&gen, lambda, cfg.trials, cfg.seed)?;
            Ok((gen.label().to_string(), lambda, est))
        })
        .collect::<Result<Vec<_>, amplab_core::martingale::MartingaleError>>()
        .map_err(&err)?;

    let mut metrics = Vec::new();
    for (label, lambda, est) in estimates {
        let ci = [est.p_hat - est.p_ci, est.p_hat + est.p_ci];
        let bound = lemma_bound(est.mu_hat + est.mu_ci, lambda).map_err(&err)? + est.p_ci;
        metrics.push(MetricRecord::upper_bounded(
            format!("exceed[{label}][lambda={}]", fmt_param(lambda)),
            est.p_hat,
            ci,
            bound,
            "martingale::lemma_bound(mu_hat + mu_ci) + sampling radius",
            0.0,
        ));
        if let (Some(pair_hat), Some(pair_ci)) = (est.pair_hat, est.pair_ci) {
            let pair_bound = prop_bound(pair_hat + pair_ci, lambda).map_err(&err)? + est.p_ci;
            metrics.push(MetricRecord::upper_bounded(
                format!("exceed-pair[{label}][lambda={}]", fmt_param(lambda)),
                est.p_hat,
                ci,
                pair_bound,
                "martingale::prop_bound(pair_hat + pair_ci) + sampling radius",
                0.0,
            ));
        }
    }
    Ok((metrics, Caps::new()))
}
