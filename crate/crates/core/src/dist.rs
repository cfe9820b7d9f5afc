//! Exact finite probability distributions.
//!
//! Everything downstream (divergence certificates, skewed conditioned
//! distributions, protocol analysis) works by exhaustive enumeration over
//! small outcome spaces, so the representation favours exactness and
//! auditability over scale: a distribution is a sorted association list of
//! `(outcome, f64 mass)` pairs. Zero-mass outcomes are retained on purpose;
//! they carry the universe a distribution lives on, which conditioning and
//! support checks care about.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

/// Absolute slack allowed between a mass total and 1 after normalization.
pub const MASS_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DistError {
    #[error("distribution needs at least one outcome")]
    EmptyDistribution,
    #[error("negative weight {weight} for an outcome")]
    NegativeWeight { weight: f64 },
    #[error("weight {weight} is not a finite number")]
    NonFiniteWeight { weight: f64 },
    #[error("weights sum to zero, nothing to normalize")]
    ZeroTotalMass,
    #[error("conditioning event {label:?} has probability zero")]
    ZeroProbabilityEvent { label: String },
    #[error("probability {p} outside [0, 1]")]
    ProbabilityOutOfRange { p: f64 },
    #[error("coordinate {index} out of range for arity {arity}")]
    CoordinateOutOfRange { index: usize, arity: usize },
    #[error("joint outcome has arity {found}, expected {expected}")]
    ArityMismatch { expected: usize, found: usize },
}

/// A named boolean predicate over outcomes. The label travels into error
/// messages so a failed conditioning names the event that was empty.
pub struct EventPredicate<T: ?Sized> {
    label: String,
    pred: Arc<dyn Fn(&T) -> bool + Send + Sync>,
}

impl<T: ?Sized> Clone for EventPredicate<T> {
    fn clone(&self) -> Self {
        Self { label: self.label.clone(), pred: Arc::clone(&self.pred) }
    }
}

impl<T: ?Sized> fmt::Debug for EventPredicate<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EventPredicate").field("label", &self.label).finish()
    }
}

impl<T: ?Sized> EventPredicate<T> {
    pub fn new(label: impl Into<String>, pred: impl Fn(&T) -> bool + Send + Sync + 'static) -> Self {
        Self { label: label.into(), pred: Arc::new(pred) }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn holds(&self, x: &T) -> bool {
        (self.pred)(x)
    }

    /// Conjunction of two events; the label concatenates both.
    pub fn and(&self, other: &Self) -> Self
    where
        T: 'static,
    {
        let a = Arc::clone(&self.pred);
        let b = Arc::clone(&other.pred);
        Self {
            label: format!("{} & {}", self.label, other.label),
            pred: Arc::new(move |x| a(x) && b(x)),
        }
    }

    pub fn not(&self) -> Self
    where
        T: 'static,
    {
        let p = Arc::clone(&self.pred);
        Self { label: format!("not {}", self.label), pred: Arc::new(move |x| !p(x)) }
    }
}

/// Coordinate names for structured (tuple-shaped) outcomes, so joint
/// distributions can be marginalized by name instead of bare position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointIndex {
    names: Vec<String>,
}

impl JointIndex {
    pub fn new(names: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self { names: names.into_iter().map(Into::into).collect() }
    }

    pub fn arity(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Positions of the given names, for feeding into [`marginalize`].
    pub fn positions(&self, names: &[&str]) -> Result<Vec<usize>, DistError> {
        names
            .iter()
            .map(|n| {
                self.position(n).ok_or(DistError::CoordinateOutOfRange {
                    index: usize::MAX,
                    arity: self.names.len(),
                })
            })
            .collect()
    }
}

/// An exact distribution over finitely many totally ordered outcomes.
///
/// Invariants: entries are sorted by outcome, outcomes are distinct, masses
/// are finite and nonnegative, and masses sum to 1 within [`MASS_TOLERANCE`].
/// Zero-mass entries are legal and preserved.
#[derive(Clone, Debug, PartialEq)]
pub struct FinitePmf<T> {
    entries: Vec<(T, f64)>,
}

impl<T> FinitePmf<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn support_len(&self) -> usize {
        self.entries.iter().filter(|&&(_, w)| w > 0.0).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&T, f64)> {
        self.entries.iter().map(|(x, w)| (x, *w))
    }

    /// Outcomes with strictly positive mass.
    pub fn support(&self) -> impl Iterator<Item = &T> {
        self.entries.iter().filter(|&&(_, w)| w > 0.0).map(|(x, _)| x)
    }

    /// All outcomes in the universe, including zero-mass ones.
    pub fn outcomes(&self) -> impl Iterator<Item = &T> {
        self.entries.iter().map(|(x, _)| x)
    }

    /// Expectation of a real-valued function.
    pub fn expect(&self, f: impl Fn(&T) -> f64) -> f64 {
        self.entries.iter().map(|(x, w)| w * f(x)).sum()
    }

    /// Probability of an event.
    pub fn prob_of(&self, event: &EventPredicate<T>) -> f64 {
        self.entries.iter().filter(|(x, _)| event.holds(x)).map(|&(_, w)| w).sum()
    }

    /// Inverse-CDF sampling. Zero-mass outcomes are never returned.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &T {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last_positive: Option<&T> = None;
        for (x, w) in &self.entries {
            if *w > 0.0 {
                acc += w;
                last_positive = Some(x);
                if u < acc {
                    return x;
                }
            }
        }
        last_positive.expect("pmf invariant: some outcome has positive mass")
    }

    /// Deterministic pushforward; colliding images merge their mass.
    pub fn map<U: Ord>(&self, f: impl Fn(&T) -> U) -> FinitePmf<U> {
        let mut entries: Vec<(U, f64)> = self.entries.iter().map(|(x, w)| (f(x), *w)).collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let mut merged: Vec<(U, f64)> = Vec::with_capacity(entries.len());
        for (x, w) in entries {
            match merged.last_mut() {
                Some((prev, acc)) if *prev == x => *acc += w,
                _ => merged.push((x, w)),
            }
        }
        FinitePmf { entries: merged }
    }

    /// Randomized pushforward through a kernel: the law of `k(X)` sampled
    /// fresh, i.e. sum_x P(x) * k(x).
    pub fn push_kernel<U: Ord>(&self, k: impl Fn(&T) -> FinitePmf<U>) -> FinitePmf<U> {
        let mut weighted: Vec<(U, f64)> = Vec::new();
        for (x, w) in &self.entries {
            if *w == 0.0 {
                continue;
            }
            for (y, q) in k(x).entries {
                weighted.push((y, w * q));
            }
        }
        weighted.sort_by(|a, b| a.0.cmp(&b.0));
        let mut merged: Vec<(U, f64)> = Vec::with_capacity(weighted.len());
        for (x, w) in weighted {
            match merged.last_mut() {
                Some((prev, acc)) if *prev == x => *acc += w,
                _ => merged.push((x, w)),
            }
        }
        FinitePmf { entries: merged }
    }
}

impl<T: Ord> FinitePmf<T> {
    /// Builds a pmf from possibly repeated, unnormalized weights. Repeated
    /// outcomes have their weights summed before normalization.
    pub fn from_weights(weights: impl IntoIterator<Item = (T, f64)>) -> Result<Self, DistError> {
        let mut entries: Vec<(T, f64)> = weights.into_iter().collect();
        if entries.is_empty() {
            return Err(DistError::EmptyDistribution);
        }
        for &(_, w) in &entries {
            if !w.is_finite() {
                return Err(DistError::NonFiniteWeight { weight: w });
            }
            if w < 0.0 {
                return Err(DistError::NegativeWeight { weight: w });
            }
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let mut merged: Vec<(T, f64)> = Vec::with_capacity(entries.len());
        for (x, w) in entries {
            match merged.last_mut() {
                Some((prev, acc)) if *prev == x => *acc += w,
                _ => merged.push((x, w)),
            }
        }
        let total: f64 = merged.iter().map(|&(_, w)| w).sum();
        if total <= 0.0 {
            return Err(DistError::ZeroTotalMass);
        }
        for (_, w) in &mut merged {
            *w /= total;
        }
        Ok(Self { entries: merged })
    }

    /// Point mass on a single outcome.
    pub fn delta(x: T) -> Self {
        Self { entries: vec![(x, 1.0)] }
    }

    /// Uniform distribution over the given outcomes (duplicates merge, which
    /// would change their relative mass, so callers pass distinct outcomes).
    pub fn uniform(outcomes: impl IntoIterator<Item = T>) -> Result<Self, DistError> {
        let items: Vec<T> = outcomes.into_iter().collect();
        let n = items.len();
        Self::from_weights(items.into_iter().map(|x| (x, 1.0 / n as f64)))
    }

    /// Two-point distribution: `x1` with probability `p1`, else `x0`.
    pub fn two_point(x0: T, x1: T, p1: f64) -> Result<Self, DistError> {
        if !(0.0..=1.0).contains(&p1) {
            return Err(DistError::ProbabilityOutOfRange { p: p1 });
        }
        Self::from_weights([(x0, 1.0 - p1), (x1, p1)])
    }

    /// Probability of one outcome; 0 for outcomes outside the universe.
    pub fn prob(&self, x: &T) -> f64 {
        match self.entries.binary_search_by(|(y, _)| y.cmp(x)) {
            Ok(i) => self.entries[i].1,
            Err(_) => 0.0,
        }
    }

    pub fn contains(&self, x: &T) -> bool {
        self.entries.binary_search_by(|(y, _)| y.cmp(x)).is_ok()
    }
}

impl<T: Clone + Ord> FinitePmf<T> {
    /// Renormalized restriction to the outcomes satisfying `event`.
    pub fn condition(&self, event: &EventPredicate<T>) -> Result<Self, DistError> {
        let kept: Vec<(T, f64)> =
            self.entries.iter().filter(|(x, _)| event.holds(x)).cloned().collect();
        let mass: f64 = kept.iter().map(|&(_, w)| w).sum();
        if kept.is_empty() || mass <= 0.0 {
            return Err(DistError::ZeroProbabilityEvent { label: event.label().to_string() });
        }
        Ok(Self { entries: kept.into_iter().map(|(x, w)| (x, w / mass)).collect() })
    }
}

/// Product distribution over tuples; factor order is preserved. A product of
/// zero factors is the point mass on the empty tuple.
pub fn product<T: Clone + Ord>(parts: &[FinitePmf<T>]) -> FinitePmf<Vec<T>> {
    let mut acc: Vec<(Vec<T>, f64)> = vec![(Vec::new(), 1.0)];
    for part in parts {
        let mut next = Vec::with_capacity(acc.len() * part.len());
        for (prefix, w) in &acc {
            for (x, q) in part.iter() {
                let mut tuple = prefix.clone();
                tuple.push(x.clone());
                next.push((tuple, w * q));
            }
        }
        acc = next;
    }
    // Tuples built from sorted distinct factors are distinct and already in
    // lexicographic order, matching the sortedness invariant.
    FinitePmf { entries: acc }
}

/// Marginal of a joint tuple distribution onto the coordinates in `keep`
/// (in the order given, so this also permutes).
pub fn marginalize<T: Clone + Ord>(
    joint: &FinitePmf<Vec<T>>,
    keep: &[usize],
) -> Result<FinitePmf<Vec<T>>, DistError> {
    let arity = match joint.outcomes().next() {
        Some(first) => first.len(),
        None => return Err(DistError::EmptyDistribution),
    };
    for outcome in joint.outcomes() {
        if outcome.len() != arity {
            return Err(DistError::ArityMismatch { expected: arity, found: outcome.len() });
        }
    }
    for &i in keep {
        if i >= arity {
            return Err(DistError::CoordinateOutOfRange { index: i, arity });
        }
    }
    Ok(joint.map(|tuple| keep.iter().map(|&i| tuple[i].clone()).collect::<Vec<T>>()))
}

/// Total variation distance, `0.5 * sum_x |P(x) - Q(x)|` over the union of
/// both universes. Always in [0, 1].
pub fn total_variation<T: Ord>(p: &FinitePmf<T>, q: &FinitePmf<T>) -> f64 {
    let mut i = 0;
    let mut j = 0;
    let mut sum = 0.0;
    while i < p.entries.len() || j < q.entries.len() {
        let ord = match (p.entries.get(i), q.entries.get(j)) {
            (Some((x, _)), Some((y, _))) => x.cmp(y),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => break,
        };
        match ord {
            std::cmp::Ordering::Less => {
                sum += p.entries[i].1;
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                sum += q.entries[j].1;
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                sum += (p.entries[i].1 - q.entries[j].1).abs();
                i += 1;
                j += 1;
            }
        }
    }
    0.5 * sum
}

/// Empirical distribution of a sample list (each sample weighted equally).
pub fn empirical<T: Clone + Ord>(samples: impl IntoIterator<Item = T>) -> Result<FinitePmf<T>, DistError> {
    FinitePmf::from_weights(samples.into_iter().map(|x| (x, 1.0)))
}
