//! Exact-analysis and simulation toolkit for studying how soundness error
//! decays under parallel repetition of random-terminating interactive
//! arguments.
//!
//! The crate is organized bottom-up:
//!
//! - [`dist`]: exact finite probability distributions (the substrate for
//!   every "enumerate and compare" check in the crate).
//! - [`divergence`]: KL divergence, conditional divergence, and smooth-KL
//!   certificates built from explicit cut maps.
//! - [`skewed`]: the skewed conditioned distribution over a coin matrix with
//!   one distinguished column, its weight/measurement ledgers, and the cut
//!   certificate bounding its smooth divergence from the ideal distribution.
//! - [`martingale`]: ratio-martingale generators and maximal-deviation
//!   bounds, with Monte Carlo exceedance estimators.
//! - [`concentration`]: closed-form tail bounds (Hoeffding, variance-shaped,
//!   scaled-Bernoulli) and the exact smooth-sampling identity.
//! - [`protocol`]: finite interactive protocols with explicit coin schemas,
//!   the random-terminating wrapper, parallel repetition, and the
//!   termination-event continuation simulator.
//! - [`attack`]: the embedding attack that reduces a single wrapped verifier
//!   to an emulated n-fold interaction, plus its grouped variant.
//! - [`counterexample`]: the encrypted-commitment protocol family whose
//!   parallel repetition resists amplification, with an idealized PKE oracle
//!   and the exact closed-form attack analysis.
//! - [`seeding`]: stable per-trial seed derivation for reproducible parallel
//!   Monte Carlo.

pub mod concentration;
pub mod counterexample;
pub mod dist;
pub mod divergence;
pub mod martingale;
pub mod protocol;
pub mod seeding;
pub mod skewed;

pub mod attack;
