//! Embedding attacks: playing one real verifier as a uniformly chosen
//! column of an emulated many-verifier interaction.
//!
//! The attacker holds an oracle prover for the `n * ell`-fold parallel
//! protocol. It embeds the real verifier at a uniform column index `j`,
//! drawn once per execution, and emulates the remaining columns itself. In
//! each round it resamples the emulated columns' coins from the current
//! round onward, together with a simulated continuation of the real column
//! (a forced halt-accept at the next round), until every copy of the
//! emulation accepts; the oracle's reply for column `j` in the accepted
//! emulation is then forwarded to the real verifier.
//!
//! Rejection sampling against the all-accept check makes the joint law of
//! `(j, final coin matrix)` exactly the skewed distribution of
//! [`crate::skewed`] for the base model over the verifier's coin blocks,
//! the oracle's winning event, and the halt-event family; the tests compare
//! the empirical law against the enumerated pmf. The strategy reads only
//! the real verifier's messages and its own randomness, never the
//! verifier's coins: the one channel to the real column's future is the
//! simulated halt, which accepts by construction.
//!
//! The grouped variant partitions the columns into `ell` groups that win or
//! lose independently and runs one rejection loop per group and round,
//! trading a product of acceptance probabilities for a sum of their
//! inverses.

use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dist::EventPredicate;
use crate::protocol::{
    encode_block, inner_outcome, run_protocol, Coin, Msg, Prover, SimulatorHandle, Transcript,
    VerifierAction, VerifierSpec,
};
use crate::skewed::{ideal_pmf, skewed_pmf_exact, BaseModel, DenseFamily, Matrix, SkewedError};

/// Recovers the real verifier's coin blocks from its observed messages.
///
/// Only needed for layouts whose final message round has no halt symbol
/// left to condition on: there the emulation must evaluate the real
/// column's verdict directly. The result must determine every coin the
/// verifier's steps and verdict read on the no-halt path; hidden coins that
/// cannot influence the remaining interaction may be filled arbitrarily.
pub type ColumnReconstructor = Arc<dyn Fn(&[Msg]) -> Vec<Vec<Coin>> + Send + Sync>;

/// Parameters of the embedding attack.
#[derive(Clone)]
pub struct AttackConfig {
    /// Columns per group.
    pub n: usize,
    /// Round (coin block) count of the attacked verifier; validated against
    /// the simulator handle's verifier.
    pub m: usize,
    /// Attempt cap for each rejection loop (one loop per round and group).
    /// A capped loop is recorded and the run counts as a loss.
    pub k_max: usize,
    /// Number of independently winnable groups.
    pub ell: usize,
    reconstruct: Option<ColumnReconstructor>,
}

impl AttackConfig {
    /// Single-group config with the default attempt cap of 10000.
    pub fn new(n: usize, m: usize) -> Self {
        assert!(n >= 1, "need at least one column per group");
        assert!(m >= 1, "need at least one round");
        Self { n, m, k_max: 10_000, ell: 1, reconstruct: None }
    }

    /// Replaces the attempt cap.
    pub fn with_k_max(mut self, k_max: usize) -> Self {
        assert!(k_max >= 1, "the attempt cap must be positive");
        self.k_max = k_max;
        self
    }

    /// Splits the emulation into `ell` groups of `n` columns each.
    pub fn with_groups(mut self, ell: usize) -> Self {
        assert!(ell >= 1, "need at least one group");
        self.ell = ell;
        self
    }

    /// Installs the column reconstructor for open final rounds.
    pub fn with_reconstructor(
        mut self,
        f: impl Fn(&[Msg]) -> Vec<Vec<Coin>> + Send + Sync + 'static,
    ) -> Self {
        self.reconstruct = Some(Arc::new(f));
        self
    }

    /// Total number of emulated columns.
    pub fn columns(&self) -> usize {
        self.n * self.ell
    }
}

/// Outcome of one attack execution.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedRecord {
    /// The embedded column index, uniform over all columns.
    pub j: usize,
    /// Final coin blocks per column: entry `j` holds the real verifier's
    /// actual coins, every other entry the last accepted emulated values.
    pub columns: Vec<Vec<Vec<Coin>>>,
    /// Attempt counts, indexed by played round, then group.
    pub attempts: Vec<Vec<usize>>,
    /// Which rejection loops exhausted the attempt cap.
    pub cap_hits: Vec<Vec<bool>>,
    /// Whether any loop was capped.
    pub capped: bool,
    /// Strict win: the real verifier accepted and no loop was capped.
    pub won: bool,
    /// The real single-verifier interaction.
    pub transcript: Transcript,
}

impl EmbedRecord {
    /// Encodes the final columns as a row-major symbol matrix, one row per
    /// coin block.
    pub fn coin_matrix(&self, spec: &VerifierSpec) -> Matrix {
        (0..spec.rounds())
            .map(|b| {
                self.columns
                    .iter()
                    .map(|col| encode_block(&col[b], &spec.coin_schema()[b]))
                    .collect()
            })
            .collect()
    }

    /// Total attempts across all rounds and groups.
    pub fn total_attempts(&self) -> usize {
        self.attempts.iter().flatten().sum()
    }
}

#[derive(Clone)]
struct EmbedState {
    j: usize,
    cols: Vec<Vec<Vec<Coin>>>,
    attempts: Vec<Vec<usize>>,
    cap_hits: Vec<Vec<bool>>,
    capped: bool,
}

impl EmbedState {
    fn empty() -> Self {
        Self { j: 0, cols: Vec::new(), attempts: Vec::new(), cap_hits: Vec::new(), capped: false }
    }

    fn fresh(spec: &VerifierSpec, total: usize, j: usize) -> Self {
        let blank: Vec<Vec<Coin>> =
            spec.coin_schema().iter().map(|d| vec![0; d.arities.len()]).collect();
        Self {
            j,
            cols: vec![blank; total],
            attempts: Vec::new(),
            cap_hits: Vec::new(),
            capped: false,
        }
    }
}

/// How one column participates in a lockstep emulation.
enum ColRole<'a> {
    /// The real verifier's column: its observed messages, then either a
    /// simulated halt-accept (`coins` is `None`) or, in an open final
    /// round, a reconstructed coin column that plays to the verdict.
    Real { msgs: &'a [Msg], coins: Option<Vec<Vec<Coin>>> },
    /// An emulated column driven by explicit coins.
    Emulated { coins: &'a [Vec<Coin>] },
}

struct Emulation {
    accept: Vec<bool>,
    replies: Vec<Vec<Msg>>,
}

/// Runs every column against the oracle in lockstep and evaluates each
/// column's acceptance. Emulated columns replay the verifier's steps on
/// their coins; the real column contributes its observed messages and then
/// `Done` slots. Oracle replies are recorded per live column.
fn emulate_lockstep(
    spec: &VerifierSpec,
    roles: &[ColRole<'_>],
    oracle: &dyn Prover,
    rng: &mut ChaCha8Rng,
) -> Emulation {
    let total = roles.len();
    let mut history: Vec<Msg> = Vec::new();
    let mut replies: Vec<Vec<Msg>> = vec![Vec::new(); total];
    let mut halted: Vec<bool> = vec![false; total];
    for r in 0..spec.rounds() {
        let mut slots: Vec<Msg> = Vec::with_capacity(total);
        for (c, role) in roles.iter().enumerate() {
            let slot = match role {
                ColRole::Real { msgs, .. } => {
                    if r < msgs.len() {
                        msgs[r].clone()
                    } else {
                        Msg::Done
                    }
                }
                ColRole::Emulated { coins } => {
                    if halted[c] {
                        Msg::Done
                    } else {
                        match spec.step_at(r, &coins[..=r], &replies[c]) {
                            VerifierAction::Send(m) => m,
                            VerifierAction::Accept | VerifierAction::Reject => {
                                halted[c] = true;
                                Msg::Done
                            }
                        }
                    }
                }
            };
            slots.push(slot);
        }
        let live: Vec<bool> = slots.iter().map(|s| !matches!(s, Msg::Done)).collect();
        if live.iter().all(|l| !l) {
            break;
        }
        history.push(Msg::Tuple(slots));
        let reply = oracle.next_message(&history, rng);
        let parts = match reply {
            Msg::Tuple(p) => p,
            other => panic!("the oracle must reply one slot per column, got {other:?}"),
        };
        assert_eq!(parts.len(), total, "oracle reply must have one slot per column");
        for (c, part) in parts.into_iter().enumerate() {
            if live[c] {
                replies[c].push(part);
            }
        }
    }
    let accept = roles
        .iter()
        .enumerate()
        .map(|(c, role)| match role {
            // A simulated halt always accepts.
            ColRole::Real { coins: None, .. } => true,
            ColRole::Real { coins: Some(cs), .. } => inner_outcome(spec, cs, &replies[c]),
            ColRole::Emulated { coins } => inner_outcome(spec, coins, &replies[c]),
        })
        .collect();
    Emulation { accept, replies }
}

/// The embedding attacker: a single-verifier prover strategy.
///
/// Inputs are the real verifier's messages and the strategy's own
/// randomness; the real verifier's coins are never read. Per-execution
/// state (embedded index, committed emulated columns, attempt counts) lives
/// behind a mutex and resets whenever a first-round message arrives, so one
/// instance can be reused across runs; [`run_embedded`] extracts the state
/// after a run.
pub struct EmbedProver {
    spec: VerifierSpec,
    oracle: Arc<dyn Prover + Send + Sync>,
    cfg: AttackConfig,
    state: Mutex<EmbedState>,
}

impl EmbedProver {
    /// The attacked verifier.
    pub fn verifier(&self) -> &VerifierSpec {
        &self.spec
    }

    /// Pairs the last execution's state with the real transcript. The
    /// embedded column is replaced by the verifier's actual coins, and the
    /// run is a win only if the verifier accepted and no loop was capped.
    pub fn record(&self, transcript: Transcript) -> EmbedRecord {
        let st = self.state.lock().expect("attack state poisoned").clone();
        let mut columns = st.cols;
        assert!(!columns.is_empty(), "no execution recorded yet");
        columns[st.j] = transcript.coins.clone();
        let won = transcript.accepted && !st.capped;
        EmbedRecord {
            j: st.j,
            columns,
            attempts: st.attempts,
            cap_hits: st.cap_hits,
            capped: st.capped,
            won,
            transcript,
        }
    }

    /// Redraws the candidate blocks of group `q`'s emulated columns from
    /// `round` onward.
    fn draw_group_candidate(
        &self,
        st: &mut EmbedState,
        q: usize,
        round: usize,
        rng: &mut ChaCha8Rng,
    ) {
        let lo = q * self.cfg.n;
        for c in lo..lo + self.cfg.n {
            if c == st.j {
                continue;
            }
            for b in round..self.spec.rounds() {
                st.cols[c][b] =
                    self.spec.coin_schema()[b].arities.iter().map(|&a| rng.gen_range(0..a)).collect();
            }
        }
    }

    /// One full emulation for the current candidate columns. While a halt
    /// symbol remains ahead of `round`, the real column is conditioned on
    /// halting next round; in an open final round its coins are
    /// reconstructed from the observed messages instead.
    fn emulate(
        &self,
        st: &EmbedState,
        real_msgs: &[Msg],
        round: usize,
        rng: &mut ChaCha8Rng,
    ) -> Emulation {
        let roles: Vec<ColRole<'_>> = st
            .cols
            .iter()
            .enumerate()
            .map(|(c, coins)| {
                if c == st.j {
                    let coins = if round + 1 == self.spec.rounds() {
                        let rec = self.cfg.reconstruct.as_ref().expect(
                            "no halt symbol remains to condition on; an open final round needs a column reconstructor",
                        );
                        Some(rec(real_msgs))
                    } else {
                        None
                    };
                    ColRole::Real { msgs: real_msgs, coins }
                } else {
                    ColRole::Emulated { coins }
                }
            })
            .collect();
        emulate_lockstep(&self.spec, &roles, self.oracle.as_ref(), rng)
    }
}

impl Prover for EmbedProver {
    fn next_message(&self, history: &[Msg], rng: &mut ChaCha8Rng) -> Msg {
        assert!(!history.is_empty(), "the history includes the current message");
        let i = history.len() - 1;
        let mut st = self.state.lock().expect("attack state poisoned");
        if i == 0 {
            let total = self.cfg.columns();
            *st = EmbedState::fresh(&self.spec, total, rng.gen_range(0..total));
        }
        assert_eq!(st.attempts.len(), i, "rounds must arrive in order");
        st.attempts.push(vec![0; self.cfg.ell]);
        st.cap_hits.push(vec![false; self.cfg.ell]);
        let q_j = st.j / self.cfg.n;
        let mut reply = Msg::empty();
        for q in 0..self.cfg.ell {
            let mut accepted = false;
            let mut last_reply = Msg::empty();
            for _ in 0..self.cfg.k_max {
                st.attempts[i][q] += 1;
                self.draw_group_candidate(&mut st, q, i, rng);
                let emu = self.emulate(&st, history, i, rng);
                let lo = q * self.cfg.n;
                let group_accepts = (lo..lo + self.cfg.n).all(|c| emu.accept[c]);
                if q == q_j {
                    last_reply = emu.replies[st.j][i].clone();
                }
                if group_accepts {
                    accepted = true;
                    break;
                }
            }
            if accepted {
                if q == q_j {
                    reply = last_reply;
                }
            } else {
                st.cap_hits[i][q] = true;
                st.capped = true;
                if q == q_j {
                    reply = last_reply;
                }
            }
        }
        reply
    }
}

/// Builds the single-group embedding attacker (`ell == 1`): a uniform
/// embedded index, and per round one rejection loop that resamples the
/// other columns' remaining coins together with the simulated continuation
/// until all copies accept.
pub fn embed_attack(
    oracle: Arc<dyn Prover + Send + Sync>,
    sim: &SimulatorHandle,
    cfg: AttackConfig,
) -> EmbedProver {
    assert_eq!(cfg.ell, 1, "use grouped_embed_attack for more than one group");
    grouped_embed_attack(oracle, sim, cfg)
}

/// Builds the grouped embedding attacker: one rejection loop per group and
/// round, resampling only that group's columns. Groups must win or lose
/// independently: the oracle's replies to a group's copies may depend only
/// on that group's slots.
pub fn grouped_embed_attack(
    oracle: Arc<dyn Prover + Send + Sync>,
    sim: &SimulatorHandle,
    cfg: AttackConfig,
) -> EmbedProver {
    let spec = sim.verifier().clone();
    assert_eq!(cfg.m, spec.rounds(), "config round count must match the attacked verifier");
    EmbedProver { spec, oracle, cfg, state: Mutex::new(EmbedState::empty()) }
}

/// Runs one full attack execution against a fresh real verifier instance
/// and returns the assembled record.
pub fn run_embedded(
    oracle: Arc<dyn Prover + Send + Sync>,
    sim: &SimulatorHandle,
    cfg: AttackConfig,
    rng: &mut ChaCha8Rng,
) -> EmbedRecord {
    let attacker = grouped_embed_attack(oracle, sim, cfg);
    let transcript = run_protocol(attacker.verifier(), &attacker, rng);
    attacker.record(transcript)
}

/// Exact transport diagnostic for an event under the skewed law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapReport {
    /// Mass of the event under the skewed matrix law.
    pub q_prob: f64,
    /// Mass of the event under the ideal (winning-conditioned) law.
    pub ideal_prob: f64,
    /// Smallest `gamma >= 0` with `q_prob <= 2 * ideal_prob + gamma`.
    pub gamma_needed: f64,
}

/// Computes the event's skewed and ideal masses by exact enumeration and
/// the slack needed for the factor-two transport between them.
pub fn bounding_function_gap(
    base: &BaseModel,
    fam: &DenseFamily,
    event: &EventPredicate<Matrix>,
) -> Result<GapReport, SkewedError> {
    let q = skewed_pmf_exact(base, fam)?;
    let lifted = {
        let ev = event.clone();
        EventPredicate::new(event.label().to_string(), move |jx: &(usize, Matrix)| ev.holds(&jx.1))
    };
    let q_prob = q.prob_of(&lifted);
    let ideal_prob = ideal_pmf(base).prob_of(event);
    let gamma_needed = (q_prob - 2.0 * ideal_prob).max(0.0);
    Ok(GapReport { q_prob, ideal_prob, gamma_needed })
}
