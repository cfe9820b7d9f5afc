//! KL divergence, conditional divergence, and smooth-divergence
//! certificates over exact finite distributions.
//!
//! A smooth-divergence certificate witnesses an upper bound on a relaxed,
//! asymmetric divergence: a pair of randomized "cut" maps, each required to
//! either fix its input or escape outside the shared universe, such that the
//! divergence of the pushed-forward distributions is small even when the raw
//! divergence is infinite. The P-side map is allowed to displace at most
//! `alpha` probability mass; the Q-side map may displace freely.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::iter::Sum;
use std::ops::Add;

use thiserror::Error;

use crate::dist::FinitePmf;

#[derive(Debug, Error)]
pub enum DivergenceError {
    #[error("probability {p} outside [0, 1]")]
    ProbabilityOutOfRange { p: f64 },
    #[error("{map} map has no image for an outcome in the universe: {detail}")]
    MissingImage { map: &'static str, detail: String },
    #[error("{map} map sends {detail} to a different universe element with positive probability")]
    SupportViolation { map: &'static str, detail: String },
}

/// A nonnegative extended real (nats). Divergences are either finite sums of
/// `p * ln(p/q)` terms or positive infinity; NaN is a bug, not a value.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct ExtReal(f64);

impl ExtReal {
    pub const ZERO: ExtReal = ExtReal(0.0);
    pub const INFINITY: ExtReal = ExtReal(f64::INFINITY);

    /// Wraps a computed value in nats. Tiny negative values from float
    /// cancellation are legal inputs for comparisons but are not masked:
    /// callers see exactly what was computed.
    pub fn nats(v: f64) -> Self {
        debug_assert!(!v.is_nan(), "divergence produced NaN");
        Self(v)
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_finite(self) -> bool {
        self.0.is_finite()
    }

    pub fn is_infinite(self) -> bool {
        self.0.is_infinite()
    }

    /// Multiplies by a nonnegative finite factor, with the convention
    /// `0 * inf = 0` (a zero-probability branch contributes nothing).
    pub fn scale(self, c: f64) -> ExtReal {
        debug_assert!(c >= 0.0 && c.is_finite(), "scale factor must be nonnegative finite");
        if c == 0.0 {
            ExtReal::ZERO
        } else {
            ExtReal(self.0 * c)
        }
    }
}

impl fmt::Display for ExtReal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_infinite() {
            write!(f, "inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl Add for ExtReal {
    type Output = ExtReal;
    fn add(self, rhs: ExtReal) -> ExtReal {
        ExtReal(self.0 + rhs.0)
    }
}

impl Sum for ExtReal {
    fn sum<I: Iterator<Item = ExtReal>>(iter: I) -> ExtReal {
        iter.fold(ExtReal::ZERO, Add::add)
    }
}

/// `D(P || Q) = sum_x P(x) ln(P(x)/Q(x))` with `0 ln(0/0) = 0`; infinite as
/// soon as some outcome has `P(x) > 0 = Q(x)`.
pub fn kl<T: Ord>(p: &FinitePmf<T>, q: &FinitePmf<T>) -> ExtReal {
    let mut sum = 0.0;
    for (x, px) in p.iter() {
        if px == 0.0 {
            continue;
        }
        let qx = q.prob(x);
        if qx == 0.0 {
            return ExtReal::INFINITY;
        }
        sum += px * (px / qx).ln();
    }
    ExtReal::nats(sum)
}

/// Conditional divergence `D(P_{V|K} || Q_{V|K} | P_K)` where both joints are
/// split into a conditioning part `K` and a value part `V` by `split`.
///
/// Infinite when some `K`-value with positive `P` mass has zero `Q` mass
/// (the `Q` conditional is undefined exactly where it is needed).
pub fn conditional_kl_by<T, K: Clone + Ord, V: Clone + Ord>(
    p: &FinitePmf<T>,
    q: &FinitePmf<T>,
    split: impl Fn(&T) -> (K, V),
) -> ExtReal {
    let group = |dist: &FinitePmf<T>| {
        let mut by_k: BTreeMap<K, Vec<(V, f64)>> = BTreeMap::new();
        for (x, w) in dist.iter() {
            let (k, v) = split(x);
            by_k.entry(k).or_default().push((v, w));
        }
        by_k
    };
    let p_groups = group(p);
    let q_groups = group(q);

    let mut total = 0.0;
    for (k, p_slice) in &p_groups {
        let pk: f64 = p_slice.iter().map(|&(_, w)| w).sum();
        if pk == 0.0 {
            continue;
        }
        let Some(q_slice) = q_groups.get(k) else {
            return ExtReal::INFINITY;
        };
        let qk: f64 = q_slice.iter().map(|&(_, w)| w).sum();
        if qk == 0.0 {
            return ExtReal::INFINITY;
        }
        let p_cond = FinitePmf::from_weights(p_slice.iter().cloned())
            .expect("positive group mass");
        let q_cond = FinitePmf::from_weights(q_slice.iter().cloned())
            .expect("positive group mass");
        let d = kl(&p_cond, &q_cond);
        if d.is_infinite() {
            return ExtReal::INFINITY;
        }
        total += pk * d.value();
    }
    ExtReal::nats(total)
}

/// Conditional divergence for pair-shaped joints.
pub fn conditional_kl<K: Clone + Ord, V: Clone + Ord>(
    joint_p: &FinitePmf<(K, V)>,
    joint_q: &FinitePmf<(K, V)>,
) -> ExtReal {
    conditional_kl_by(joint_p, joint_q, |kv| kv.clone())
}

/// Divergence between `Bern(p)` and `Bern(q)`.
pub fn bern_kl(p: f64, q: f64) -> Result<ExtReal, DivergenceError> {
    for v in [p, q] {
        if !(0.0..=1.0).contains(&v) || v.is_nan() {
            return Err(DivergenceError::ProbabilityOutOfRange { p: v });
        }
    }
    let term = |a: f64, b: f64| -> f64 {
        if a == 0.0 {
            0.0
        } else if b == 0.0 {
            f64::INFINITY
        } else {
            a * (a / b).ln()
        }
    };
    let sum = term(p, q) + term(1.0 - p, 1.0 - q);
    Ok(if sum.is_infinite() { ExtReal::INFINITY } else { ExtReal::nats(sum) })
}

/// Image of a cut map: either an element of the original universe or an
/// escape symbol from a disjoint namespace. Keeping escapes in their own
/// enum arm makes "image collides with a universe element" unrepresentable
/// for escapes; only `Value` images need a runtime support check.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Image<T> {
    Value(T),
    Sentinel(u64),
}

/// A randomized map from `T` to distributions over `U`, given extensionally
/// on a finite domain.
#[derive(Clone, Debug)]
pub struct Kernel<T, U> {
    entries: BTreeMap<T, FinitePmf<U>>,
}

impl<T: Clone + Ord, U: Clone + Ord> Kernel<T, U> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn from_fn(
        domain: impl IntoIterator<Item = T>,
        f: impl Fn(&T) -> FinitePmf<U>,
    ) -> Self {
        let mut entries = BTreeMap::new();
        for x in domain {
            let image = f(&x);
            entries.insert(x, image);
        }
        Self { entries }
    }

    pub fn insert(&mut self, x: T, image: FinitePmf<U>) {
        self.entries.insert(x, image);
    }

    pub fn get(&self, x: &T) -> Option<&FinitePmf<U>> {
        self.entries.get(x)
    }

    pub fn domain(&self) -> impl Iterator<Item = &T> {
        self.entries.keys()
    }
}

impl<T: Clone + Ord, U: Clone + Ord> Default for Kernel<T, U> {
    fn default() -> Self {
        Self::new()
    }
}

/// A cut map: randomized map from the universe into itself-or-escapes.
pub type CutMap<T> = Kernel<T, Image<T>>;

/// The two cut maps of a smooth-divergence certificate.
#[derive(Clone, Debug)]
pub struct CutPair<T> {
    pub f_p: CutMap<T>,
    pub f_q: CutMap<T>,
}

impl<T: Clone + Ord> CutPair<T> {
    /// The trivial pair fixing every point: alpha 0, divergence unchanged.
    pub fn identity(universe: impl IntoIterator<Item = T>) -> Self {
        let points: Vec<T> = universe.into_iter().collect();
        let id = Kernel::from_fn(points.clone(), |x| FinitePmf::delta(Image::Value(x.clone())));
        Self { f_p: id.clone(), f_q: id }
    }
}

/// Evaluated certificate: the P-side displaced `alpha` mass, and the pushed
/// distributions have divergence `div`. Any `beta > div` upper-bounds the
/// `alpha`-smooth divergence of the original pair.
#[derive(Clone, Copy, Debug)]
pub struct SmoothCert {
    pub alpha: f64,
    pub div: ExtReal,
}

fn validate_side<T: Clone + Ord + fmt::Debug>(
    map: &CutMap<T>,
    universe: &BTreeSet<T>,
    name: &'static str,
) -> Result<(), DivergenceError> {
    for x in universe {
        let image = map.get(x).ok_or_else(|| DivergenceError::MissingImage {
            map: name,
            detail: format!("{x:?}"),
        })?;
        for (img, w) in image.iter() {
            if w > 0.0 {
                if let Image::Value(v) = img {
                    if v != x && universe.contains(v) {
                        return Err(DivergenceError::SupportViolation {
                            map: name,
                            detail: format!("{x:?} -> {v:?}"),
                        });
                    }
                }
            }
        }
    }
    Ok(())
}

fn shared_universe<T: Clone + Ord>(p: &FinitePmf<T>, q: &FinitePmf<T>) -> BTreeSet<T> {
    p.outcomes().chain(q.outcomes()).cloned().collect()
}

/// Checks the cut pair is total and support-respecting on the joint universe
/// of `p` and `q`, then evaluates it: `alpha` is the P-side displaced mass,
/// `div` the divergence of the two pushforwards.
pub fn smooth_cert_eval<T: Clone + Ord + fmt::Debug>(
    p: &FinitePmf<T>,
    q: &FinitePmf<T>,
    pair: &CutPair<T>,
) -> Result<SmoothCert, DivergenceError> {
    let universe = shared_universe(p, q);
    validate_side(&pair.f_p, &universe, "P-side cut")?;
    validate_side(&pair.f_q, &universe, "Q-side cut")?;

    let alpha = p.expect(|x| {
        let image = pair.f_p.get(x).expect("validated total");
        1.0 - image.prob(&Image::Value(x.clone()))
    });

    let pushed_p = p.push_kernel(|x| pair.f_p.get(x).expect("validated total").clone());
    let pushed_q = q.push_kernel(|x| pair.f_q.get(x).expect("validated total").clone());
    Ok(SmoothCert { alpha, div: kl(&pushed_p, &pushed_q) })
}

/// The small-event transfer bound: a certificate with parameters
/// `(alpha, div)` forces `Q[E] <= 2 * max(alpha + P[E], 4 * div)` for every
/// event `E`. Returns the right-hand side (infinite when `div` is).
pub fn small_event_bound(cert: &SmoothCert, p_event: f64) -> f64 {
    2.0 * (cert.alpha + p_event).max(4.0 * cert.div.value())
}

/// Result of transporting a certificate through a post-processing kernel.
#[derive(Clone, Debug)]
pub struct TransportedCut<U> {
    /// Cut pair for the processed distributions.
    pub pair: CutPair<U>,
    /// The processed left distribution `H(P)`.
    pub p_image: FinitePmf<U>,
    /// The processed right distribution `H(Q)`.
    pub q_image: FinitePmf<U>,
}

/// Data processing for smooth divergence: given a certificate pair for
/// `(P, Q)` and a randomized post-processing map `H`, builds a pair for
/// `(H(P), H(Q))` with exactly the same displaced mass and no larger
/// divergence.
///
/// The constructed map on the image side, at a point `y`, samples a preimage
/// `x` from the conditional law of `X` given `H(X) = y`, applies the
/// original cut map to `x`, and replaces the fixpoint image by `y`. Original
/// escape images survive unchanged; `Value` images landing outside the
/// original universe (legal: they escape it) are renamed to fresh shared
/// escape symbols so they cannot collide with image-universe elements.
pub fn smooth_dp_transport<T, U>(
    p: &FinitePmf<T>,
    q: &FinitePmf<T>,
    pair: &CutPair<T>,
    h: &Kernel<T, U>,
) -> Result<TransportedCut<U>, DivergenceError>
where
    T: Clone + Ord + fmt::Debug,
    U: Clone + Ord + fmt::Debug,
{
    let universe = shared_universe(p, q);
    validate_side(&pair.f_p, &universe, "P-side cut")?;
    validate_side(&pair.f_q, &universe, "Q-side cut")?;
    for x in &universe {
        if h.get(x).is_none() {
            return Err(DivergenceError::MissingImage {
                map: "post-processing",
                detail: format!("{x:?}"),
            });
        }
    }

    // Escape-symbol bookkeeping shared by both transported maps: keep used
    // sentinel ids, assign fresh ids to out-of-universe Value images.
    let mut used_ids: BTreeSet<u64> = BTreeSet::new();
    let mut escapes: BTreeSet<T> = BTreeSet::new();
    for map in [&pair.f_p, &pair.f_q] {
        for x in &universe {
            for (img, _) in map.get(x).expect("validated total").iter() {
                match img {
                    Image::Sentinel(id) => {
                        used_ids.insert(*id);
                    }
                    Image::Value(v) => {
                        if !universe.contains(v) {
                            escapes.insert(v.clone());
                        }
                    }
                }
            }
        }
    }
    let base_id = used_ids.iter().next_back().map_or(0, |id| id + 1);
    let escape_id: BTreeMap<&T, u64> =
        escapes.iter().enumerate().map(|(i, v)| (v, base_id + i as u64)).collect();

    let image_universe: BTreeSet<U> = universe
        .iter()
        .flat_map(|x| h.get(x).expect("checked total").outcomes().cloned().collect::<Vec<U>>())
        .collect();

    let lift = |img: &Image<T>, x: &T, y: &U| -> Image<U> {
        match img {
            Image::Value(v) if v == x => Image::Value(y.clone()),
            Image::Value(v) => Image::Sentinel(escape_id[v]),
            Image::Sentinel(id) => Image::Sentinel(*id),
        }
    };

    let build_side = |dist: &FinitePmf<T>, side: &CutMap<T>| -> CutMap<U> {
        let mut out: CutMap<U> = Kernel::new();
        for y in &image_universe {
            let total: f64 = universe
                .iter()
                .map(|x| dist.prob(x) * h.get(x).expect("total").prob(y))
                .sum();
            let image = if total == 0.0 {
                FinitePmf::delta(Image::Value(y.clone()))
            } else {
                let mut weights: Vec<(Image<U>, f64)> = Vec::new();
                for x in &universe {
                    let c = dist.prob(x) * h.get(x).expect("total").prob(y);
                    if c == 0.0 {
                        continue;
                    }
                    for (img, w) in side.get(x).expect("total").iter() {
                        weights.push((lift(img, x, y), c * w / total));
                    }
                }
                FinitePmf::from_weights(weights).expect("mixture has unit mass")
            };
            out.insert(y.clone(), image);
        }
        out
    };

    let transported = CutPair {
        f_p: build_side(p, &pair.f_p),
        f_q: build_side(q, &pair.f_q),
    };
    let p_image = p.push_kernel(|x| h.get(x).expect("total").clone());
    let q_image = q.push_kernel(|x| h.get(x).expect("total").clone());
    Ok(TransportedCut { pair: transported, p_image, q_image })
}
