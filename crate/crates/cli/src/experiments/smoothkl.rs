//! Smooth-divergence certificate checks on a stream of random instances.
//!
//! For each instance the cut certificate is built once, then audited three
//! ways: its smoothing budget is recomputed from scratch out of public
//! ledger data, its divergence is compared against the per-round terms
//! that are supposed to dominate it, and the small-event transfer bound is
//! stress-tested against exact event masses of the skewed law.

use std::collections::{BTreeMap, BTreeSet};

use amplab_core::dist::FinitePmf;
use amplab_core::divergence::{small_event_bound, ExtReal, SmoothCert};
use amplab_core::skewed::{
    build_fcut_certificate, event_indicator_rows, ideal_pmf, skewed_pmf_exact, weight_ledger,
    BaseModel, DenseFamily, Matrix, Row, RoundLedger, SkewedError, GAMMA_CAP, GOOD_FRACTION,
};
use rand::Rng;
use rayon::prelude::*;

use super::{
    identity_metric, in_experiment, instance_stream, trial_rng, Caps, CoreError, HarnessError,
    MaxErr, RunnerOutput,
};
use crate::config::{ExperimentConfig, ExperimentKind};
use crate::report::MetricRecord;

/// Tolerance for inequality checks: pure floating-point slack.
const TOL: f64 = 1e-9;
/// Tolerance for the recomputed smoothing budget, which repeats the same
/// arithmetic and should agree to the last bit.
const ALPHA_TOL: f64 = 1e-12;
/// Comparison padding used by the ledger's own threshold tests.
const CMP_EPS: f64 = 1e-9;
/// Universe size up to which every event subset is enumerated.
const EXHAUSTIVE_ATOMS: usize = 12;
/// Random events tried per instance above that size.
const SAMPLED_EVENTS: u64 = 1000;

/// Audit results for one instance.
struct InstanceOut {
    alpha: f64,
    div: ExtReal,
    alpha_err: f64,
    chain_violation: f64,
    chain_infinite: bool,
    transfer_violation: f64,
}

pub(super) fn run(cfg: &ExperimentConfig) -> Result<RunnerOutput, HarnessError> {
    let err = in_experiment(ExperimentKind::SmoothklCert);
    let instances = instance_stream(cfg, "smoothkl/instance")?;
    let outs: Vec<InstanceOut> = instances
        .par_iter()
        .enumerate()
        .map(|(idx, (base, fam, _))| analyze(cfg.seed, idx as u64, base, fam))
        .collect::<Result<_, CoreError>>()
        .map_err(&err)?;

    let mut alpha_err = MaxErr::default();
    let mut chain = MaxErr::default();
    let mut transfer = MaxErr::default();
    let mut alpha_max = MaxErr::default();
    let mut alpha_sum = 0.0;
    let mut div_max = MaxErr::default();
    let mut div_sum = 0.0;
    let mut div_finite = 0u64;
    let mut div_infinite = 0u64;
    let mut chain_infinite = 0u64;
    for out in &outs {
        alpha_err.push(out.alpha_err);
        chain.push(out.chain_violation);
        transfer.push(out.transfer_violation);
        alpha_max.push(out.alpha);
        alpha_sum += out.alpha;
        if out.div.is_finite() {
            div_max.push(out.div.value());
            div_sum += out.div.value();
            div_finite += 1;
        } else {
            div_infinite += 1;
        }
        if out.chain_infinite {
            chain_infinite += 1;
        }
    }

    let mut metrics = vec![
        identity_metric(
            "alpha-identity-err",
            alpha_err.0,
            ALPHA_TOL,
            "certificate smoothing budget equals the survival deficit recomputed from ledgers",
        ),
        identity_metric(
            "chain-violation",
            chain.0,
            TOL,
            "certificate divergence is dominated by the sum of its per-round terms",
        ),
        identity_metric(
            "transfer-violation",
            transfer.0,
            TOL,
            "divergence::small_event_bound caps every skewed event mass via the certificate",
        ),
    ];
    let count = outs.len() as f64;
    if !outs.is_empty() {
        metrics.push(MetricRecord::report_only("alpha-max", alpha_max.0, [alpha_max.0; 2]));
        let mean = alpha_sum / count;
        metrics.push(MetricRecord::report_only("alpha-mean", mean, [mean; 2]));
    }
    if div_finite > 0 {
        metrics.push(MetricRecord::report_only("div-max", div_max.0, [div_max.0; 2]));
        let mean = div_sum / div_finite as f64;
        metrics.push(MetricRecord::report_only("div-mean", mean, [mean; 2]));
    }
    let mut caps = Caps::new();
    if div_infinite > 0 {
        caps.insert("div-infinite".to_string(), div_infinite);
    }
    if chain_infinite > 0 {
        caps.insert("chain-infinite-mismatch".to_string(), chain_infinite);
    }
    Ok((metrics, caps))
}

/// Per-history quantities needed by the budget recomputation.
struct PrefixAudit {
    led: RoundLedger,
    /// Ideal probability that the centered measurement stays in range.
    t_mass: f64,
    /// Skewed probability that the column index stays good.
    tb: f64,
}

fn analyze(
    seed: u64,
    idx: u64,
    base: &BaseModel,
    fam: &DenseFamily,
) -> Result<InstanceOut, CoreError> {
    let (m, n) = (base.rows(), base.cols());
    let cert = build_fcut_certificate(base, fam)?;
    let q_joint = skewed_pmf_exact(base, fam)?;
    let ideal = ideal_pmf(base);

    // Recompute the smoothing budget: the ideal mass that survives every
    // round's acceptance test and continuation coin, using only public
    // ledger data and the exact skewed pmf.
    let mut cache: BTreeMap<Vec<Row>, PrefixAudit> = BTreeMap::new();
    let mut survive = 0.0;
    for (x, mass) in ideal.iter() {
        if mass <= 0.0 {
            continue;
        }
        let ys = event_indicator_rows(fam, x);
        let mut accepted = true;
        let mut prob = mass;
        for i in 0..m {
            let info = audit_at(&mut cache, base, fam, &q_joint, &x[..i])?;
            let g = info.led.s_set.len() as f64 >= GOOD_FRACTION * n as f64 - CMP_EPS;
            let t = matches!(info.led.gamma(&x[i], &ys[i]), Some(v) if v.abs() <= GAMMA_CAP + CMP_EPS);
            let t_prime = info.t_mass >= 1.0 - 1.0 / n as f64 - CMP_EPS;
            accepted = accepted && g && t && t_prime;
            let bit = if accepted { info.tb } else { 0.0 };
            prob *= bit.clamp(0.0, 1.0);
            if prob == 0.0 {
                break;
            }
        }
        survive += prob;
    }
    let alpha_err = (cert.alpha - (1.0 - survive)).abs();

    // The divergence must be dominated by the sum of the per-round terms.
    let term_sum = cert.round_terms.iter().fold(ExtReal::ZERO, |acc, &t| acc + t);
    let (chain_violation, chain_infinite) = match (cert.div.is_finite(), term_sum.is_finite()) {
        (true, true) => ((cert.div.value() - term_sum.value()).max(0.0), false),
        (true, false) => (0.0, false),
        (false, true) => (1.0, true),
        (false, false) => (0.0, false),
    };

    // Transfer: for every event over the matrix universe, the skewed mass
    // is capped by the small-event bound evaluated at the ideal mass.
    let q_x = FinitePmf::from_weights(q_joint.iter().map(|(jx, w)| (jx.1.clone(), w)))?;
    let mut atoms: Vec<(f64, f64)> = Vec::new();
    let mut seen: BTreeSet<&Matrix> = BTreeSet::new();
    for (x, w) in ideal.iter() {
        if w > 0.0 {
            atoms.push((w, q_x.prob(x)));
            seen.insert(x);
        }
    }
    for (x, w) in q_x.iter() {
        if w > 0.0 && !seen.contains(x) {
            atoms.push((0.0, w));
        }
    }
    let smooth = SmoothCert { alpha: cert.alpha, div: cert.div };
    let mut transfer = MaxErr::default();
    let mut check_event = |mask_holds: &dyn Fn(usize) -> bool| {
        let mut p_e = 0.0;
        let mut q_e = 0.0;
        for (i, &(p, q)) in atoms.iter().enumerate() {
            if mask_holds(i) {
                p_e += p;
                q_e += q;
            }
        }
        transfer.push((q_e - small_event_bound(&smooth, p_e)).max(0.0));
    };
    if atoms.len() <= EXHAUSTIVE_ATOMS {
        for mask in 0u64..1 << atoms.len() {
            check_event(&|i| mask >> i & 1 == 1);
        }
    } else {
        let scope = format!("smoothkl/events/{idx}");
        for k in 0..SAMPLED_EVENTS {
            let mut rng = trial_rng(seed, &scope, k);
            let keep: Vec<bool> = (0..atoms.len()).map(|_| rng.gen_bool(0.5)).collect();
            check_event(&|i| keep[i]);
        }
    }

    Ok(InstanceOut {
        alpha: cert.alpha,
        div: cert.div,
        alpha_err,
        chain_violation,
        chain_infinite,
        transfer_violation: transfer.0,
    })
}

/// Mirrors the matrix-extension test of the exact ledgers.
fn matches_prefix(x: &Matrix, prefix: &[Row]) -> bool {
    x.len() >= prefix.len() && x[..prefix.len()] == *prefix
}

/// Cached per-history audit data: the public round ledger plus the in-range
/// probability and continuation-coin probability at that history, computed
/// with the same arithmetic the certificate uses.
fn audit_at<'c>(
    cache: &'c mut BTreeMap<Vec<Row>, PrefixAudit>,
    base: &BaseModel,
    fam: &DenseFamily,
    q_joint: &FinitePmf<(usize, Matrix)>,
    prefix: &[Row],
) -> Result<&'c PrefixAudit, SkewedError> {
    if !cache.contains_key(prefix) {
        let led = weight_ledger(base, fam, prefix)?;
        let ideal = ideal_pmf(base);
        let i = prefix.len();
        let prefix_mass: f64 = ideal
            .iter()
            .filter(|(z, _)| matches_prefix(z, prefix))
            .map(|(_, w)| w)
            .sum();
        let t_mass: f64 = ideal
            .iter()
            .filter(|(z, w)| {
                *w > 0.0 && matches_prefix(z, prefix) && {
                    let yz = event_indicator_rows(fam, z);
                    matches!(led.gamma(&z[i], &yz[i]), Some(v) if v.abs() <= GAMMA_CAP + CMP_EPS)
                }
            })
            .map(|(_, w)| w)
            .sum::<f64>()
            / prefix_mass;
        let mut num = 0.0;
        let mut den = 0.0;
        for (jx, w) in q_joint.iter() {
            let (j, z) = (&jx.0, &jx.1);
            if w > 0.0 && matches_prefix(z, prefix) {
                if led.g_prev.contains(j) {
                    den += w;
                }
                if led.s_set.contains(j) && led.x_sets[*j].contains(&z[i][*j]) {
                    num += w;
                }
            }
        }
        let tb = if den > 0.0 { num / den } else { 0.0 };
        cache.insert(prefix.to_vec(), PrefixAudit { led, t_mass, tb });
    }
    Ok(&cache[prefix])
}
