//! Closed-form concentration bounds and the exact smooth-sampling identity.
//!
//! Each bound returns a probability clamped to [0, 1]; a vacuous bound is
//! reported as 1 rather than hidden. The formulas are the exact shapes used
//! by the measurement-ledger analysis, so tests can compare Monte Carlo
//! exceedance rates against them without re-deriving constants.

use thiserror::Error;

use crate::dist::{DistError, EventPredicate, FinitePmf};

#[derive(Debug, Error)]
pub enum ConcentrationError {
    #[error("range [{a}, {b}] is empty")]
    InvalidRange { a: f64, b: f64 },
    #[error("deviation {t} must be nonnegative")]
    NegativeDeviation { t: f64 },
    #[error("parameter {name} = {value} outside its domain")]
    BadParameter { name: &'static str, value: f64 },
    #[error("weights and probabilities must have equal, nonzero length")]
    LengthMismatch,
    #[error(transparent)]
    Dist(#[from] DistError),
}

fn clamp_prob(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Tail bound for a sum of independent bounded summands: with `X_i` in
/// `[a_i, b_i]`, `Pr[X - E[X] >= t] <= exp(-2 t^2 / sum (b_i - a_i)^2)`;
/// the two-sided version doubles the bound. Degenerate summands (all ranges
/// single points) give probability 0 for `t > 0` and 1 for `t = 0`.
pub fn hoeffding_bound(
    ranges: &[(f64, f64)],
    t: f64,
    two_sided: bool,
) -> Result<f64, ConcentrationError> {
    if t < 0.0 || t.is_nan() {
        return Err(ConcentrationError::NegativeDeviation { t });
    }
    let mut denom = 0.0;
    for &(a, b) in ranges {
        if !(a <= b) {
            return Err(ConcentrationError::InvalidRange { a, b });
        }
        denom += (b - a) * (b - a);
    }
    if denom == 0.0 {
        return Ok(if t > 0.0 { 0.0 } else { 1.0 });
    }
    let one_sided = (-2.0 * t * t / denom).exp();
    Ok(clamp_prob(if two_sided { 2.0 * one_sided } else { one_sided }))
}

/// Variance-shaped tail bound for a positively weighted sum of independent
/// indicator variables: with `X = sum b_i X_i`, `X_i ~ Bern(p_i)`,
/// `v = sum b_i^2 p_i` and `b = max b_i`,
/// `Pr[|X - E[X]| >= t] <= 2 exp(-t^2 / (2 (v + b t / 3)))`.
pub fn variance_bound(weights: &[f64], probs: &[f64], t: f64) -> Result<f64, ConcentrationError> {
    if weights.is_empty() || weights.len() != probs.len() {
        return Err(ConcentrationError::LengthMismatch);
    }
    if t < 0.0 || t.is_nan() {
        return Err(ConcentrationError::NegativeDeviation { t });
    }
    let mut v = 0.0;
    let mut b = 0.0f64;
    for (&w, &p) in weights.iter().zip(probs) {
        if !(w > 0.0) || !w.is_finite() {
            return Err(ConcentrationError::BadParameter { name: "weight", value: w });
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(ConcentrationError::BadParameter { name: "prob", value: p });
        }
        v += w * w * p;
        b = b.max(w);
    }
    let denom = 2.0 * (v + b * t / 3.0);
    if denom == 0.0 {
        // v = 0 and t = 0: the sum is 0 with probability 1.
        return Ok(1.0);
    }
    Ok(clamp_prob(2.0 * (-t * t / denom).exp()))
}

/// Tail bound for inverse-probability-weighted sparse sampling: each bounded
/// summand `L_i` (`|L_i| <= ell`) is replaced by `(L_i / p_i) Bern(p_i)`,
/// and the relative error `|Z / mu - 1|` of the sampled sum `Z` around the
/// true mean `mu` satisfies, for `gamma` in [0, 1],
/// `Pr[|Z/mu - 1| >= gamma] <= 4 exp(-p mu^2 gamma^2 / (5 ell^2 n))` with
/// `p = min_i p_i`.
pub fn scaled_bernoulli_bound(
    ell: f64,
    p_min: f64,
    mu: f64,
    n: usize,
    gamma: f64,
) -> Result<f64, ConcentrationError> {
    if !(ell > 0.0) || !ell.is_finite() {
        return Err(ConcentrationError::BadParameter { name: "ell", value: ell });
    }
    if !(p_min > 0.0 && p_min <= 1.0) {
        return Err(ConcentrationError::BadParameter { name: "p_min", value: p_min });
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(ConcentrationError::BadParameter { name: "gamma", value: gamma });
    }
    if n == 0 {
        return Err(ConcentrationError::BadParameter { name: "n", value: 0.0 });
    }
    if !mu.is_finite() {
        return Err(ConcentrationError::BadParameter { name: "mu", value: mu });
    }
    let exponent = -p_min * mu * mu * gamma * gamma / (5.0 * ell * ell * n as f64);
    Ok(clamp_prob(4.0 * exponent.exp()))
}

/// Both sides of the smooth-sampling identity for one prefix grouping.
#[derive(Clone, Copy, Debug)]
pub struct SmoothSamplingCheck {
    /// `E_{k ~ P_{K|W}}[ 1 / P[W | K = k] ]`.
    pub lhs: f64,
    /// `1 / P[W]`.
    pub rhs: f64,
    /// Whether every positive-mass prefix group can still reach the event.
    /// The identity `lhs = rhs` holds exactly iff this is true; in general
    /// only `lhs <= rhs` holds (prefixes from which the event is impossible
    /// are invisible to the conditional expectation but contribute to
    /// `1 / P[W]`).
    pub reachable_everywhere: bool,
}

/// Evaluates the smooth-sampling identity: grouping outcomes by a prefix map
/// `key`, the conditional expectation `E_{k ~ P_{K|W}}[ 1 / P[W | K = k] ]`
/// equals `1 / P[W]` whenever the event has positive conditional probability
/// from every positive-mass prefix, and never exceeds it.
pub fn smooth_sampling_check<T, K: Clone + Ord>(
    dist: &FinitePmf<T>,
    event: &EventPredicate<T>,
    key: impl Fn(&T) -> K,
) -> Result<SmoothSamplingCheck, ConcentrationError> {
    let p_w = dist.prob_of(event);
    if p_w <= 0.0 {
        return Err(ConcentrationError::Dist(DistError::ZeroProbabilityEvent {
            label: event.label().to_string(),
        }));
    }
    // Group masses: total and event-restricted, per key value.
    let mut totals: std::collections::BTreeMap<K, (f64, f64)> = std::collections::BTreeMap::new();
    for (x, w) in dist.iter() {
        let entry = totals.entry(key(x)).or_insert((0.0, 0.0));
        entry.0 += w;
        if event.holds(x) {
            entry.1 += w;
        }
    }
    let mut lhs = 0.0;
    let mut reachable_everywhere = true;
    for (_, (mass, event_mass)) in totals {
        if event_mass > 0.0 {
            let weight_under_conditional = event_mass / p_w;
            let conditional_event_prob = event_mass / mass;
            lhs += weight_under_conditional / conditional_event_prob;
        } else if mass > 0.0 {
            reachable_everywhere = false;
        }
    }
    Ok(SmoothSamplingCheck { lhs, rhs: 1.0 / p_w, reachable_everywhere })
}
