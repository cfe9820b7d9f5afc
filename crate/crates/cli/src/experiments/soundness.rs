//! Monte Carlo accept rate of a registry toy against its closed form.

use amplab_core::protocol::run_protocol;
use rayon::prelude::*;

use super::{hoeffding_ci, trial_rng, Caps, HarnessError, RunnerOutput};
use crate::config::ExperimentConfig;
use crate::report::{MetricRecord, Verdict};
use crate::toys::build_toy;

pub(super) fn run(cfg: &ExperimentConfig) -> Result<RunnerOutput, HarnessError> {
    let toy = build_toy(cfg.toy.as_deref().expect("resolved config carries a toy"))?;
    let scope = format!("soundness/{}", toy.spec);
    let trials = cfg.trials;
    let wins: u64 = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(cfg.seed, &scope, t);
            u64::from(run_protocol(&toy.verifier, toy.prover.as_ref(), &mut rng).accepted)
        })
        .sum();
    let p_hat = wins as f64 / trials as f64;
    let radius = hoeffding_ci(trials);
    let metric = MetricRecord {
        name: "accept-rate".to_string(),
        estimate: p_hat,
        ci: [p_hat - radius, p_hat + radius],
        bound: Some(toy.exact),
        bound_ref: Some(format!("closed-form accept probability of toy {}", toy.spec)),
        verdict: if (p_hat - toy.exact).abs() <= radius { Verdict::Pass } else { Verdict::Fail },
    };
    Ok((vec![metric], Caps::new()))
}
