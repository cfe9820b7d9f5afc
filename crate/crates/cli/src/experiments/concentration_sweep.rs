//! Tail-bound domination checks and the smooth-sampling identity.
//!
//! Three Monte Carlo sub-experiments check that measured tail masses stay
//! below the closed-form bounds (after granting the sampling radius), and
//! an exact sweep over random finite tuple distributions checks the
//! smooth-sampling identity and its inequality form.

use amplab_core::concentration::{
    hoeffding_bound, scaled_bernoulli_bound, smooth_sampling_check, variance_bound,
};
use amplab_core::dist::{product, EventPredicate, FinitePmf};
use rand::Rng;
use rayon::prelude::*;

use super::{
    bernoulli_ci3, fmt_param, identity_metric, in_experiment, trial_rng, Caps, HarnessError,
    MaxErr, RunnerOutput,
};
use crate::config::{ExperimentConfig, ExperimentKind};
use crate::report::MetricRecord;

/// Deviation grid for the additive Hoeffding check.
const HOEFFDING_T: [f64; 3] = [2.0, 5.0, 10.0];
/// Deviation grid for the variance-shaped check.
const VARIANCE_T: [f64; 3] = [4.0, 8.0, 12.0];
/// Relative-deviation grid for the scaled-Bernoulli check.
const GAMMA_GRID: [f64; 3] = [0.5, 0.75, 1.0];
/// Instances for the smooth-sampling sweep.
const SMOOTH_INSTANCES: u64 = 100;
/// Identity tolerance, relative to `max(1, rhs)`.
const SMOOTH_TOL: f64 = 1e-9;

pub(super) fn run(cfg: &ExperimentConfig) -> Result<RunnerOutput, HarnessError> {
    let err = in_experiment(ExperimentKind::Concentration);
    let trials = cfg.trials;
    let mut metrics = Vec::new();
    let mut caps = Caps::new();

    // Sum of 100 uniform [0, 1] summands: upper tail of the deviation from
    // the mean 50.
    let uniform_sums: Vec<u64> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(cfg.seed, "concentration/hoeffding", t);
            let sum: f64 = (0..100).map(|_| rng.gen::<f64>()).sum();
            let dev = sum - 50.0;
            HOEFFDING_T
                .iter()
                .enumerate()
                .map(|(i, &t)| u64::from(dev >= t) << i)
                .sum()
        })
        .collect();
    for (i, &t) in HOEFFDING_T.iter().enumerate() {
        let hits = uniform_sums.iter().filter(|&&bits| bits >> i & 1 == 1).count();
        let p_hat = hits as f64 / trials as f64;
        let radius = bernoulli_ci3(p_hat, trials);
        let bound = hoeffding_bound(&[(0.0, 1.0); 100], t, false).map_err(&err)?;
        metrics.push(MetricRecord::upper_bounded(
            format!("hoeffding[t={}]", fmt_param(t)),
            p_hat,
            [p_hat - radius, p_hat + radius],
            bound,
            "concentration::hoeffding_bound, one-sided",
            radius,
        ));
    }

    // Weighted indicator sum: 30 Bernoulli(0.2) summands with weights
    // cycling through {0.5, 1, 2}; two-sided deviation from the mean 7.
    let weights: Vec<f64> = (0..30).map(|i| [0.5, 1.0, 2.0][i % 3]).collect();
    let probs = vec![0.2; 30];
    let mean: f64 = weights.iter().map(|w| 0.2 * w).sum();
    let weights_ref = &weights;
    let weighted_devs: Vec<u64> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(cfg.seed, "concentration/variance", t);
            let x: f64 =
                weights_ref.iter().map(|&w| if rng.gen_bool(0.2) { w } else { 0.0 }).sum();
            let dev = (x - mean).abs();
            VARIANCE_T
                .iter()
                .enumerate()
                .map(|(i, &t)| u64::from(dev >= t) << i)
                .sum()
        })
        .collect();
    for (i, &t) in VARIANCE_T.iter().enumerate() {
        let hits = weighted_devs.iter().filter(|&&bits| bits >> i & 1 == 1).count();
        let p_hat = hits as f64 / trials as f64;
        let radius = bernoulli_ci3(p_hat, trials);
        let bound = variance_bound(&weights, &probs, t).map_err(&err)?;
        metrics.push(MetricRecord::upper_bounded(
            format!("variance[t={}]", fmt_param(t)),
            p_hat,
            [p_hat - radius, p_hat + radius],
            bound,
            "concentration::variance_bound",
            radius,
        ));
    }

    // Inverse-probability sampling of 40 unit summands kept with
    // probability 1/2: relative deviation of the sampled sum from its mean
    // 40.
    let relative_devs: Vec<u64> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(cfg.seed, "concentration/scaled", t);
            let z: f64 = (0..40).map(|_| if rng.gen_bool(0.5) { 2.0 } else { 0.0 }).sum();
            let rel = (z / 40.0 - 1.0).abs();
            GAMMA_GRID
                .iter()
                .enumerate()
                .map(|(i, &g)| u64::from(rel >= g) << i)
                .sum()
        })
        .collect();
    for (i, &gamma) in GAMMA_GRID.iter().enumerate() {
        let hits = relative_devs.iter().filter(|&&bits| bits >> i & 1 == 1).count();
        let p_hat = hits as f64 / trials as f64;
        let radius = bernoulli_ci3(p_hat, trials);
        let bound = scaled_bernoulli_bound(1.0, 0.5, 40.0, 40, gamma).map_err(&err)?;
        metrics.push(MetricRecord::upper_bounded(
            format!("scaled-bernoulli[gamma={}]", fmt_param(gamma)),
            p_hat,
            [p_hat - radius, p_hat + radius],
            bound,
            "concentration::scaled_bernoulli_bound",
            radius,
        ));
    }

    // Smooth sampling: random tuple distributions with a random event,
    // grouped by coordinate prefixes of each length. Where the event is
    // reachable from every positive-mass prefix the two sides must agree
    // exactly; everywhere the left side must not exceed the right.
    let mut identity_err = MaxErr::default();
    let mut inequality_err = MaxErr::default();
    let mut unreachable = 0u64;
    let smooth_results = (0..SMOOTH_INSTANCES)
        .into_par_iter()
        .map(|k| {
            let mut rng = trial_rng(cfg.seed, "concentration/smooth", k);
            let (dist, event) = random_tuple_instance(&mut rng);
            let mut per_instance = Vec::with_capacity(3);
            for len in 0..3usize {
                let check = smooth_sampling_check(&dist, &event, |x: &Vec<u8>| {
                    x[..len].to_vec()
                })?;
                per_instance.push(check);
            }
            Ok(per_instance)
        })
        .collect::<Result<Vec<_>, amplab_core::concentration::ConcentrationError>>()
        .map_err(&err)?;
    for per_instance in smooth_results {
        for check in per_instance {
            let scale = check.rhs.max(1.0);
            inequality_err.push((check.lhs - check.rhs).max(0.0) / scale);
            if check.reachable_everywhere {
                identity_err.push((check.lhs - check.rhs).abs() / scale);
            } else {
                unreachable += 1;
            }
        }
    }
    metrics.push(identity_metric(
        "smooth-identity-err",
        identity_err.0,
        SMOOTH_TOL,
        "concentration::smooth_sampling_check identity (relative)",
    ));
    metrics.push(identity_metric(
        "smooth-inequality-violation",
        inequality_err.0,
        SMOOTH_TOL,
        "concentration::smooth_sampling_check inequality (relative)",
    ));
    if unreachable > 0 {
        caps.insert("smooth-unreachable-groupings".to_string(), unreachable);
    }

    Ok((metrics, caps))
}

/// Random product distribution over `u8` triples (coordinate arities 2 or
/// 3, integer weights) with a nonempty random event.
fn random_tuple_instance(
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (FinitePmf<Vec<u8>>, EventPredicate<Vec<u8>>) {
    let parts: Vec<FinitePmf<u8>> = (0..3)
        .map(|_| {
            let arity = rng.gen_range(2..=3u8);
            FinitePmf::from_weights(
                (0..arity).map(|v| (v, rng.gen_range(1..=9) as f64)),
            )
            .expect("positive weights")
        })
        .collect();
    let dist = product(&parts);
    loop {
        let kept: std::collections::BTreeSet<Vec<u8>> = dist
            .outcomes()
            .filter(|_| rng.gen_bool(0.6))
            .cloned()
            .collect();
        if kept.is_empty() {
            continue;
        }
        let event = EventPredicate::new("random-subset", move |x: &Vec<u8>| kept.contains(x));
        return (dist, event);
    }
}
