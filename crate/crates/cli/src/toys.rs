//! Registry of toy protocols with closed-form accept probabilities.
//!
//! A toy spec is a colon-separated string, e.g. `rt-coin-guess:4`. Each
//! registry entry bundles a verifier, a prover to run against it, and the
//! exact accept probability of that pairing, so the soundness experiment can
//! compare a Monte Carlo estimate against truth.

use std::sync::Arc;

use amplab_core::protocol::{
    always_accept_verifier, blind_prover, coin_guessing_verifier, echo_prover, parallel_repeat,
    random_terminating_wrap, Prover, TupleProver, VerifierSpec,
};

use crate::config::ConfigError;

/// A runnable toy: verifier, prover, and the exact accept probability.
pub struct Toy {
    /// Normalized spec string.
    pub spec: String,
    pub verifier: VerifierSpec,
    pub prover: Arc<dyn Prover + Send + Sync>,
    /// Exact accept probability of `prover` against `verifier`.
    pub exact: f64,
}

fn parse_field<T: std::str::FromStr>(
    spec: &str,
    field: &str,
    value: &str,
) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| ConfigError::BadToy {
        spec: spec.to_string(),
        reason: format!("{field} {value:?}: {e}"),
    })
}

/// Builds a toy from its spec string.
///
/// - `always-accept:<rounds>`: every transcript accepts; exact 1.
/// - `coin-guess:<arity>`: the verifier announces a secret coin and the
///   prover guesses 0 blindly; exact `1/arity`.
/// - `rt-coin-guess:<arity>`: the same toy behind the halt-early wrapper
///   (two inner rounds, so each of the two wrapped rounds halts with
///   probability 1/2); exact `3/4 + 1/(4 arity)`.
/// - `repeat-coin-guess:<arity>:<copies>`: independent parallel copies of
///   the guessing toy; exact `(1/arity)^copies`.
pub fn build_toy(spec: &str) -> Result<Toy, ConfigError> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = |reason: &str| ConfigError::BadToy { spec: spec.to_string(), reason: reason.into() };
    match parts.as_slice() {
        ["always-accept", rounds] => {
            let rounds: usize = parse_field(spec, "rounds", rounds)?;
            if rounds == 0 {
                return Err(bad("rounds must be at least 1"));
            }
            Ok(Toy {
                spec: spec.to_string(),
                verifier: always_accept_verifier(rounds),
                prover: Arc::new(echo_prover()),
                exact: 1.0,
            })
        }
        ["coin-guess", arity] => {
            let arity: u16 = parse_field(spec, "arity", arity)?;
            if arity < 2 {
                return Err(bad("arity must be at least 2"));
            }
            Ok(Toy {
                spec: spec.to_string(),
                verifier: coin_guessing_verifier(arity),
                prover: Arc::new(blind_prover(vec![0])),
                exact: 1.0 / arity as f64,
            })
        }
        ["rt-coin-guess", arity] => {
            let arity: u16 = parse_field(spec, "arity", arity)?;
            if arity < 2 {
                return Err(bad("arity must be at least 2"));
            }
            let wrapped = random_terminating_wrap(&coin_guessing_verifier(arity));
            // The wrapper halts and accepts with probability 1/2 after
            // round 0 and another (1/2)(1/2) at the trailing round; the
            // remaining 1/4 falls through to the blind guess.
            let exact = 0.75 + 0.25 / arity as f64;
            Ok(Toy {
                spec: spec.to_string(),
                verifier: wrapped,
                prover: Arc::new(blind_prover(vec![0])),
                exact,
            })
        }
        ["repeat-coin-guess", arity, copies] => {
            let arity: u16 = parse_field(spec, "arity", arity)?;
            let copies: usize = parse_field(spec, "copies", copies)?;
            if arity < 2 {
                return Err(bad("arity must be at least 2"));
            }
            if copies == 0 {
                return Err(bad("copies must be at least 1"));
            }
            let verifier = parallel_repeat(&coin_guessing_verifier(arity), copies);
            let blinds: Vec<Box<dyn Prover + Send + Sync>> = (0..copies)
                .map(|_| Box::new(blind_prover(vec![0])) as Box<dyn Prover + Send + Sync>)
                .collect();
            Ok(Toy {
                spec: spec.to_string(),
                verifier,
                prover: Arc::new(TupleProver::new(blinds)),
                exact: (1.0 / arity as f64).powi(copies as i32),
            })
        }
        _ => Err(ConfigError::UnknownToy(spec.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use amplab_core::protocol::run_protocol;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn measured(toy: &Toy, trials: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut wins = 0usize;
        for _ in 0..trials {
            if run_protocol(&toy.verifier, toy.prover.as_ref(), &mut rng).accepted {
                wins += 1;
            }
        }
        wins as f64 / trials as f64
    }

    #[test]
    fn registry_exact_values_match_simulation() {
        let trials = 40_000;
        for (spec, seed) in [
            ("always-accept:3", 1u64),
            ("coin-guess:4", 2),
            ("rt-coin-guess:2", 3),
            ("repeat-coin-guess:2:3", 4),
        ] {
            let toy = build_toy(spec).expect("valid spec");
            let p = measured(&toy, trials, seed);
            let sigma = (toy.exact * (1.0 - toy.exact) / trials as f64).sqrt();
            let band = 3.0 * sigma + 3.0 / trials as f64;
            assert!(
                (p - toy.exact).abs() <= band,
                "{spec}: measured {p}, exact {} (band {band})",
                toy.exact
            );
        }
    }

    #[test]
    fn malformed_specs_are_rejected() {
        for spec in [
            "always-accept",
            "always-accept:0",
            "coin-guess:1",
            "coin-guess:x",
            "rt-coin-guess:1",
            "repeat-coin-guess:2",
            "repeat-coin-guess:2:0",
            "no-such-toy:3",
        ] {
            assert!(build_toy(spec).is_err(), "{spec} should be rejected");
        }
    }
}
