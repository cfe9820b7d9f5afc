//! Concentration bounds for slowly evolving nonnegative martingales.
//!
//! A nonnegative martingale `Y_0 = 1, Y_1, ..., Y_n` is slowly evolving when
//! the expected total ratio score `E[sum_i min(|R_i|, R_i^2)]` is small, where
//! `R_i = Y_i / Y_{i-1} - 1` is the multiplicative increment (taken as 0 once
//! the chain is absorbed at 0). Two computable bound shapes are provided:
//!
//! * [`lemma_bound`]: `Pr[exists i: |Y_i - 1| >= lambda] <= 23 mu / lambda^2`
//!   with `mu = E[sum_i min(|R_i|, R_i^2)]`, for `lambda in (0, 1/4]`.
//! * [`prop_bound`]: for chains `Y_i = Y_{i-1} (1 + Z_i) / (1 + T_i)` where
//!   `T_i` is determined by the history, the same exceedance probability is
//!   at most `150 e / lambda^2` with
//!   `e = E[sum_i min(|Z_i|, Z_i^2) + min(|T_i|, T_i^2)]`.
//!
//! [`empirical_exceedance`] estimates both sides of these inequalities by
//! Monte Carlo with deterministic per-trial seeding, so each shipped
//! generator family can be checked against the bounds. Bounds larger than 1
//! are vacuous but still returned as-is; callers decide how to report them.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::seeding;

/// Largest admissible deviation threshold for the bound functions.
pub const LAMBDA_MAX: f64 = 0.25;
/// Multiplier in the ratio-score exceedance bound.
pub const RATIO_BOUND_FACTOR: f64 = 23.0;
/// Multiplier in the paired-score exceedance bound.
pub const PAIR_BOUND_FACTOR: f64 = 150.0;
/// Minimum trial count accepted by [`empirical_exceedance`].
pub const MIN_TRIALS: usize = 1_000;
/// Two-sided failure probability used for the Hoeffding confidence radii.
const CI_FAILURE_PROB: f64 = 0.003;

/// Errors from the martingale bound and estimation routines.
#[derive(Debug, Error)]
pub enum MartingaleError {
    /// The deviation threshold must lie in `(0, 1/4]`.
    #[error("deviation threshold must lie in (0, {LAMBDA_MAX}], got {0}")]
    LambdaOutOfRange(f64),
    /// The estimator needs enough trials for its confidence radii to mean anything.
    #[error("at least {min} trials required, got {got}")]
    TooFewTrials { min: usize, got: usize },
}

/// Per-step score `min(|r|, r^2)` of a multiplicative increment.
fn step_score(r: f64) -> f64 {
    r.abs().min(r * r)
}

/// Multiplicative increment `next/prev - 1`, with the absorbed-at-zero
/// convention: once the chain sits at 0 the increment is 0.
fn ratio_increment(prev: f64, next: f64) -> f64 {
    if prev == 0.0 {
        debug_assert!(next == 0.0, "nonnegative martingale cannot leave 0");
        0.0
    } else {
        next / prev - 1.0
    }
}

/// One sampled trajectory `Y_0 = 1, ..., Y_n`, with optional per-step
/// `(Z_i, T_i)` ratio pairs for families of the form
/// `Y_i = Y_{i-1} (1 + Z_i) / (1 + T_i)`.
#[derive(Debug, Clone)]
pub struct MartingalePath {
    /// Trajectory values; `y[0] = 1` and every entry is nonnegative.
    pub y: Vec<f64>,
    /// Per-step `(Z_i, T_i)` pairs when the family exposes them; `T_i` must be
    /// a deterministic function of the history up to step `i - 1`.
    pub zt: Option<Vec<(f64, f64)>>,
}

impl MartingalePath {
    /// Multiplicative increments `R_i = Y_i / Y_{i-1} - 1` (0 after absorption).
    pub fn ratios(&self) -> Vec<f64> {
        self.y.windows(2).map(|w| ratio_increment(w[0], w[1])).collect()
    }

    /// Total ratio score `sum_i min(|R_i|, R_i^2)`.
    pub fn increment_score(&self) -> f64 {
        self.y
            .windows(2)
            .map(|w| step_score(ratio_increment(w[0], w[1])))
            .sum()
    }

    /// Total paired score `sum_i min(|Z_i|, Z_i^2) + min(|T_i|, T_i^2)`, when
    /// the family exposes `(Z_i, T_i)` pairs.
    pub fn pair_score(&self) -> Option<f64> {
        self.zt
            .as_ref()
            .map(|zt| zt.iter().map(|&(z, t)| step_score(z) + step_score(t)).sum())
    }

    /// Whether the trajectory ever strays from 1 by at least `lambda`.
    pub fn exceeds(&self, lambda: f64) -> bool {
        self.y[1..].iter().any(|&v| (v - 1.0).abs() >= lambda)
    }
}

type SamplePathFn = dyn Fn(&mut ChaCha8Rng) -> MartingalePath + Send + Sync;

/// A family of nonnegative martingales started at 1, sampled whole-path.
///
/// `score_bound` must dominate every per-step score the family can produce,
/// both `min(|R_i|, R_i^2)` and (if exposed) `min(|Z_i|, Z_i^2) + min(|T_i|,
/// T_i^2)`; it calibrates the Hoeffding confidence radii of the estimator.
#[derive(Clone)]
pub struct MartingaleGenerator {
    label: String,
    length: usize,
    score_bound: f64,
    sample: Arc<SamplePathFn>,
}

impl MartingaleGenerator {
    /// Wraps a sampling closure. The closure must return paths with
    /// `y.len() == length + 1`, `y[0] = 1`, all entries nonnegative, and a
    /// `zt` vector of exactly `length` pairs when it exposes one.
    pub fn new<F>(label: impl Into<String>, length: usize, score_bound: f64, sample: F) -> Self
    where
        F: Fn(&mut ChaCha8Rng) -> MartingalePath + Send + Sync + 'static,
    {
        Self {
            label: label.into(),
            length,
            score_bound,
            sample: Arc::new(sample),
        }
    }

    /// Family label; also the seeding scope of [`empirical_exceedance`].
    pub fn label(&self) -> &str {
        &self.label
    }

    /// Number of steps per trajectory.
    pub fn length(&self) -> usize {
        self.length
    }

    /// Declared per-step score bound.
    pub fn score_bound(&self) -> f64 {
        self.score_bound
    }

    /// Samples one trajectory, checking the path contract in debug builds.
    pub fn sample_path(&self, rng: &mut ChaCha8Rng) -> MartingalePath {
        let path = (self.sample)(rng);
        debug_assert_eq!(path.y.len(), self.length + 1);
        debug_assert_eq!(path.y[0], 1.0);
        debug_assert!(path.y.iter().all(|v| v.is_finite() && *v >= 0.0));
        if let Some(zt) = &path.zt {
            debug_assert_eq!(zt.len(), self.length);
        }
        path
    }

    /// The constant trajectory `Y_i = 1`; zero score, zero exceedance.
    pub fn constant(length: usize) -> Self {
        Self::new(format!("constant-n{length}"), length, 0.0, move |_| MartingalePath {
            y: vec![1.0; length + 1],
            zt: None,
        })
    }

    /// Independent symmetric multiplicative steps `Y_i = Y_{i-1} (1 +/- step)`
    /// with equal probability; `step` must lie in `(0, 1)`.
    pub fn iid_symmetric(length: usize, step: f64) -> Self {
        assert!(step > 0.0 && step < 1.0, "step size must lie in (0, 1)");
        Self::new(
            format!("iid-symmetric-{step}-n{length}"),
            length,
            step_score(step),
            move |rng| {
                let mut y = Vec::with_capacity(length + 1);
                y.push(1.0);
                for _ in 0..length {
                    let r = if rng.gen_bool(0.5) { step } else { -step };
                    y.push(y[y.len() - 1] * (1.0 + r));
                }
                MartingalePath { y, zt: None }
            },
        )
    }

    /// Survival weight of a per-step killing process: each live step either
    /// kills the chain (probability `1/m`, the value drops to 0 and stays
    /// there) or multiplies it by `m/(m-1)`. Models the inverse survival
    /// probability of a process stopped with chance `1/m` per step.
    pub fn survival_weight(m: usize, length: usize) -> Self {
        assert!(m >= 2, "killing modulus must be at least 2");
        let growth = m as f64 / (m as f64 - 1.0);
        Self::new(
            format!("survival-weight-m{m}-n{length}"),
            length,
            1.0,
            move |rng| {
                let mut y = Vec::with_capacity(length + 1);
                y.push(1.0);
                for _ in 0..length {
                    let prev = y[y.len() - 1];
                    let next = if prev == 0.0 {
                        0.0
                    } else if rng.gen_bool(1.0 / m as f64) {
                        0.0
                    } else {
                        prev * growth
                    };
                    y.push(next);
                }
                MartingalePath { y, zt: None }
            },
        )
    }

    /// Ratio-form family `Y_i = Y_{i-1} (1 + Z_i) / (1 + T_i)` exposing the
    /// `(Z_i, T_i)` pairs. `T_i` is a deterministic function of the history
    /// (`+0.03` when the chain sits at or above 1, `-0.03` below) and
    /// `Z_i = T_i +/- 0.05` with equal probability, so `E[Z_i | history] =
    /// T_i` and the chain is an exact martingale.
    pub fn drift_ratio(length: usize) -> Self {
        const DRIFT: f64 = 0.03;
        const NOISE: f64 = 0.05;
        let per_step = step_score(DRIFT + NOISE) + step_score(DRIFT);
        Self::new(format!("drift-ratio-n{length}"), length, per_step, move |rng| {
            let mut y = Vec::with_capacity(length + 1);
            let mut zt = Vec::with_capacity(length);
            y.push(1.0);
            for _ in 0..length {
                let prev = y[y.len() - 1];
                let t = if prev >= 1.0 { DRIFT } else { -DRIFT };
                let z = if rng.gen_bool(0.5) { t + NOISE } else { t - NOISE };
                y.push(prev * (1.0 + z) / (1.0 + t));
                zt.push((z, t));
            }
            MartingalePath { y, zt: Some(zt) }
        })
    }

    /// Stress family with rare large jumps compensated by frequent small
    /// losses: `R_i = +3` with probability `1/16`, else `R_i = -0.2`. The
    /// per-step score is large whenever a jump fires, probing the bound in
    /// the regime where truncating increments would bite.
    pub fn rare_jump(length: usize) -> Self {
        const JUMP: f64 = 3.0;
        const LOSS: f64 = -0.2;
        const JUMP_PROB: f64 = 0.0625;
        Self::new(
            format!("rare-jump-n{length}"),
            length,
            step_score(JUMP),
            move |rng| {
                let mut y = Vec::with_capacity(length + 1);
                y.push(1.0);
                for _ in 0..length {
                    let r = if rng.gen_bool(JUMP_PROB) { JUMP } else { LOSS };
                    y.push(y[y.len() - 1] * (1.0 + r));
                }
                MartingalePath { y, zt: None }
            },
        )
    }
}

/// Exceedance bound `23 mu / lambda^2` from the expected total ratio score.
///
/// `mu` must be a (true or empirical) value of `E[sum_i min(|R_i|, R_i^2)]`
/// and `lambda` must lie in `(0, 1/4]`. Values above 1 are returned as-is.
pub fn lemma_bound(mu: f64, lambda: f64) -> Result<f64, MartingaleError> {
    check_lambda(lambda)?;
    Ok(RATIO_BOUND_FACTOR * mu / (lambda * lambda))
}

/// Exceedance bound `150 e / lambda^2` for ratio-form chains, from the
/// expected total paired score `e = E[sum_i min(|Z_i|, Z_i^2) + min(|T_i|,
/// T_i^2)]`. `lambda` must lie in `(0, 1/4]`; values above 1 are returned
/// as-is.
pub fn prop_bound(esum: f64, lambda: f64) -> Result<f64, MartingaleError> {
    check_lambda(lambda)?;
    Ok(PAIR_BOUND_FACTOR * esum / (lambda * lambda))
}

fn check_lambda(lambda: f64) -> Result<(), MartingaleError> {
    if !(lambda > 0.0 && lambda <= LAMBDA_MAX) {
        return Err(MartingaleError::LambdaOutOfRange(lambda));
    }
    Ok(())
}

/// Monte Carlo estimates of the two sides of the exceedance inequality.
#[derive(Debug, Clone, PartialEq)]
pub struct ExceedanceEstimate {
    /// Fraction of trials whose trajectory strayed from 1 by at least lambda.
    pub p_hat: f64,
    /// Hoeffding confidence radius for `p_hat` (failure probability 0.003).
    pub p_ci: f64,
    /// Mean total ratio score across trials.
    pub mu_hat: f64,
    /// Hoeffding confidence radius for `mu_hat`.
    pub mu_ci: f64,
    /// Mean total paired score, for families exposing `(Z_i, T_i)`.
    pub pair_hat: Option<f64>,
    /// Hoeffding confidence radius for `pair_hat`.
    pub pair_ci: Option<f64>,
    /// Number of trials behind the estimates.
    pub trials: usize,
}

/// Two-sided Hoeffding confidence radius for a mean of `trials` values each
/// confined to an interval of width `range`.
pub fn hoeffding_radius(range: f64, trials: usize) -> f64 {
    if range == 0.0 {
        0.0
    } else {
        range * ((2.0 / CI_FAILURE_PROB).ln() / (2.0 * trials as f64)).sqrt()
    }
}

/// Estimates `Pr[exists i: |Y_i - 1| >= lambda]` together with the mean
/// total scores that feed [`lemma_bound`] and [`prop_bound`].
///
/// Each trial draws its own generator from `(master_seed, family label,
/// trial index)`, so the result is deterministic in `master_seed` and
/// independent of evaluation order. Requires `trials >= 1000` and a positive
/// finite `lambda` (the threshold here may exceed 1/4; only the bound
/// functions restrict it).
pub fn empirical_exceedance(
    gen: &MartingaleGenerator,
    lambda: f64,
    trials: usize,
    master_seed: u64,
) -> Result<ExceedanceEstimate, MartingaleError> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(MartingaleError::LambdaOutOfRange(lambda));
    }
    if trials < MIN_TRIALS {
        return Err(MartingaleError::TooFewTrials { min: MIN_TRIALS, got: trials });
    }
    let mut exceed_count = 0usize;
    let mut mu_sum = 0.0f64;
    let mut pair_sum: Option<f64> = None;
    for trial in 0..trials {
        let mut rng = seeding::trial_rng(master_seed, gen.label(), trial as u64);
        let path = gen.sample_path(&mut rng);
        if path.exceeds(lambda) {
            exceed_count += 1;
        }
        mu_sum += path.increment_score();
        if let Some(score) = path.pair_score() {
            *pair_sum.get_or_insert(0.0) += score;
        }
    }
    let n = trials as f64;
    let score_range = gen.length() as f64 * gen.score_bound();
    Ok(ExceedanceEstimate {
        p_hat: exceed_count as f64 / n,
        p_ci: hoeffding_radius(1.0, trials),
        mu_hat: mu_sum / n,
        mu_ci: hoeffding_radius(score_range, trials),
        pair_hat: pair_sum.map(|s| s / n),
        pair_ci: pair_sum.map(|_| hoeffding_radius(score_range, trials)),
        trials,
    })
}
