//! Round-based interactive-protocol engine.
//!
//! A verifier is a deterministic state machine over pre-addressed coins: the
//! coin layout is a fixed sequence of per-round blocks, each block a vector
//! of bounded symbols, so a full execution's coins encode as one column of a
//! coin matrix and protocol runs embed into the exact machinery in
//! [`crate::skewed`]. The module provides:
//!
//! * [`run_protocol`] / [`run_protocol_with_coins`]: play a verifier against
//!   a prover, with malformed prover messages turning into a recorded
//!   rejection rather than a panic;
//! * [`random_terminating_wrap`]: the early-stop transform that tosses a
//!   probability-`1/m` halt coin at the end of every round and accepts on a
//!   hit, with the halt coins placed in the next round's block so the
//!   induced event family is a prefix family;
//! * [`parallel_repeat`]: `n` lockstep copies with independent coin columns,
//!   accepting iff every copy accepts;
//! * [`rt_simulator`]: the continuation sampler conditioned on "the next
//!   halt coin hits", realizing the dense-event simulator for wrapped
//!   verifiers;
//! * [`estimate_soundness`]: Monte Carlo accept-rate estimation with a
//!   two-sided Hoeffding interval;
//! * bridges into the coin-matrix formalism: [`coin_base_model`],
//!   [`rt_dense_family`], [`encode_block`] / [`decode_block`].

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dist::{product, EventPredicate, FinitePmf};
use crate::martingale::hoeffding_radius;
use crate::skewed::{BaseModel, CellEvent, DenseFamily, Matrix, Sym};

/// One coin symbol.
pub type Coin = u16;

/// Coin layout of one round: the arity of each symbol in the block (a
/// symbol with arity `a` is uniform over `0..a`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoinDecl {
    /// Per-symbol arities; may be empty (a coin-free round).
    pub arities: Vec<u16>,
}

impl CoinDecl {
    /// Block with the given arities.
    pub fn new(arities: Vec<u16>) -> Self {
        Self { arities }
    }

    /// Number of distinct blocks (product of the arities).
    pub fn cardinality(&self) -> usize {
        self.arities.iter().map(|&a| a as usize).product()
    }
}

/// A protocol message.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Msg {
    /// A flat vector of bounded symbols.
    Symbols(Vec<u16>),
    /// One slot per copy of a repeated protocol.
    Tuple(Vec<Msg>),
    /// Placeholder for a copy that has already halted; matches any shape.
    Done,
}

impl Msg {
    /// The empty symbol message.
    pub fn empty() -> Self {
        Msg::Symbols(Vec::new())
    }
}

/// Declared shape of the prover's reply in one round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MsgShape {
    /// Exactly `len` symbols, each below `arity`.
    Symbols {
        /// Exclusive symbol bound.
        arity: u16,
        /// Required length.
        len: usize,
    },
    /// One shape per copy slot.
    Tuple(Vec<MsgShape>),
}

impl MsgShape {
    /// The empty reply shape.
    pub fn empty() -> Self {
        MsgShape::Symbols { arity: 1, len: 0 }
    }

    /// Whether `msg` fits this shape. [`Msg::Done`] fits everywhere: it is
    /// the verifier-controlled placeholder for halted copies.
    pub fn matches(&self, msg: &Msg) -> bool {
        match (self, msg) {
            (_, Msg::Done) => true,
            (MsgShape::Symbols { arity, len }, Msg::Symbols(v)) => {
                v.len() == *len && v.iter().all(|s| s < arity)
            }
            (MsgShape::Tuple(shapes), Msg::Tuple(slots)) => {
                shapes.len() == slots.len()
                    && shapes.iter().zip(slots).all(|(sh, sl)| sh.matches(sl))
            }
            _ => false,
        }
    }
}

/// What the verifier does when activated in a round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VerifierAction {
    /// Send a message and wait for the prover's reply.
    Send(Msg),
    /// Accept and halt immediately.
    Accept,
    /// Reject and halt immediately.
    Reject,
}

type StepFn = Arc<dyn Fn(usize, &[Vec<Coin>], &[Msg]) -> VerifierAction + Send + Sync>;
type VerdictFn = Arc<dyn Fn(&[Vec<Coin>], &[Msg], &[Msg]) -> bool + Send + Sync>;

/// A verifier: fixed coin layout, a deterministic per-round step, and a
/// deterministic verdict on full transcripts.
///
/// The step receives the 0-based round index, the coin blocks drawn so far
/// (rounds `0..=round`), and the prover messages so far; it must be a pure
/// function of those inputs. The verdict receives all coin blocks, the
/// verifier's sent messages, and the prover's messages.
#[derive(Clone)]
pub struct VerifierSpec {
    name: String,
    rounds: usize,
    coin_schema: Vec<CoinDecl>,
    reply_shapes: Vec<MsgShape>,
    step: StepFn,
    verdict: VerdictFn,
}

impl VerifierSpec {
    /// Builds a verifier; the schema and reply-shape lists must both have
    /// one entry per round and every arity must be positive.
    pub fn new(
        name: impl Into<String>,
        coin_schema: Vec<CoinDecl>,
        reply_shapes: Vec<MsgShape>,
        step: impl Fn(usize, &[Vec<Coin>], &[Msg]) -> VerifierAction + Send + Sync + 'static,
        verdict: impl Fn(&[Vec<Coin>], &[Msg], &[Msg]) -> bool + Send + Sync + 'static,
    ) -> Self {
        let rounds = coin_schema.len();
        assert!(rounds >= 1, "a verifier needs at least one round");
        assert_eq!(reply_shapes.len(), rounds, "one reply shape per round");
        assert!(
            coin_schema.iter().all(|d| d.arities.iter().all(|&a| a >= 1)),
            "coin arities must be positive"
        );
        Self {
            name: name.into(),
            rounds,
            coin_schema,
            reply_shapes,
            step: Arc::new(step),
            verdict: Arc::new(verdict),
        }
    }

    /// Human-readable name.
    pub fn name(&self) -> &str {
        &self.name
    }

    /// Number of rounds.
    pub fn rounds(&self) -> usize {
        self.rounds
    }

    /// Per-round coin layout.
    pub fn coin_schema(&self) -> &[CoinDecl] {
        &self.coin_schema
    }

    /// Per-round reply shapes.
    pub fn reply_shapes(&self) -> &[MsgShape] {
        &self.reply_shapes
    }

    /// Draws a full, position-fixed coin assignment.
    pub fn draw_coins(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<Coin>> {
        self.coin_schema
            .iter()
            .map(|d| d.arities.iter().map(|&a| rng.gen_range(0..a)).collect())
            .collect()
    }

    /// Invokes the per-round step function directly, for emulations that
    /// replay a copy outside [`run_protocol`].
    pub(crate) fn step_at(
        &self,
        round: usize,
        coins: &[Vec<Coin>],
        prover_msgs: &[Msg],
    ) -> VerifierAction {
        (self.step)(round, coins, prover_msgs)
    }
}

/// A prover strategy: a next-message function of the verifier messages seen
/// so far and the prover's own randomness. Implementations must be pure in
/// `(history, rng stream)`; deterministic provers ignore the stream.
pub trait Prover {
    /// Reply to the latest verifier message (`history` includes it).
    fn next_message(&self, history: &[Msg], rng: &mut ChaCha8Rng) -> Msg;
}

/// Deterministic prover built from a pure function of the message history.
#[derive(Clone)]
pub struct DetProver {
    f: Arc<dyn Fn(&[Msg]) -> Msg + Send + Sync>,
}

impl DetProver {
    /// Wraps the next-message function.
    pub fn new(f: impl Fn(&[Msg]) -> Msg + Send + Sync + 'static) -> Self {
        Self { f: Arc::new(f) }
    }
}

impl Prover for DetProver {
    fn next_message(&self, history: &[Msg], _rng: &mut ChaCha8Rng) -> Msg {
        (self.f)(history)
    }
}

/// Prover that echoes the verifier's latest message back.
pub fn echo_prover() -> DetProver {
    DetProver::new(|history| history.last().cloned().unwrap_or_else(Msg::empty))
}

/// Prover that ignores the verifier and always answers `guess` in the first
/// round, then empty messages.
pub fn blind_prover(guess: Vec<u16>) -> DetProver {
    DetProver::new(move |history| {
        if history.len() == 1 {
            Msg::Symbols(guess.clone())
        } else {
            Msg::empty()
        }
    })
}

/// Combines per-copy provers into one prover for a repeated protocol: each
/// copy sees only its own slot of the tuple history, and halted copies
/// (marked [`Msg::Done`]) are answered with [`Msg::Done`] without being
/// queried.
pub struct TupleProver {
    copies: Vec<Box<dyn Prover + Send + Sync>>,
}

impl TupleProver {
    /// Wraps the per-copy provers.
    pub fn new(copies: Vec<Box<dyn Prover + Send + Sync>>) -> Self {
        Self { copies }
    }
}

impl Prover for TupleProver {
    fn next_message(&self, history: &[Msg], rng: &mut ChaCha8Rng) -> Msg {
        let n = self.copies.len();
        let mut slots = Vec::with_capacity(n);
        for (k, copy) in self.copies.iter().enumerate() {
            // Project this copy's history: stop at its first Done slot.
            let mut proj = Vec::new();
            let mut live = true;
            for msg in history {
                match msg {
                    Msg::Tuple(parts) if parts.len() == n => match &parts[k] {
                        Msg::Done => {
                            live = false;
                            break;
                        }
                        other => proj.push(other.clone()),
                    },
                    other => proj.push(other.clone()),
                }
            }
            if live {
                slots.push(copy.next_message(&proj, rng));
            } else {
                slots.push(Msg::Done);
            }
        }
        Msg::Tuple(slots)
    }
}

/// Record of one protocol execution.
///
/// All coin blocks are always present, even past an early halt: coins are
/// position-fixed and drawn up front, so executions stay in bijection with
/// full coin assignments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript {
    /// Every round's coin block.
    pub coins: Vec<Vec<Coin>>,
    /// Verifier messages, one per round actually played with a send.
    pub verifier_msgs: Vec<Msg>,
    /// Prover replies, aligned with `verifier_msgs`.
    pub prover_msgs: Vec<Msg>,
    /// Final decision.
    pub accepted: bool,
    /// Round whose step halted the interaction, if any halted before the
    /// post-interaction verdict.
    pub halted_round: Option<usize>,
    /// Diagnostic for a prover message that failed its declared shape; the
    /// interaction rejects.
    pub fault: Option<String>,
}

/// A partially played execution: rounds `0..coins.len()` have been played.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartialView {
    /// Coin blocks of the played rounds.
    pub coins: Vec<Vec<Coin>>,
    /// Verifier messages of the played rounds.
    pub verifier_msgs: Vec<Msg>,
    /// Prover replies of the played rounds.
    pub prover_msgs: Vec<Msg>,
}

/// Plays the protocol on a fixed coin assignment. Deterministic provers
/// make this a pure function of the coins (replay equality).
pub fn run_protocol_with_coins(
    v: &VerifierSpec,
    p: &dyn Prover,
    coins: Vec<Vec<Coin>>,
    rng: &mut ChaCha8Rng,
) -> Transcript {
    assert_eq!(coins.len(), v.rounds, "one coin block per round");
    let mut t = Transcript {
        coins,
        verifier_msgs: Vec::new(),
        prover_msgs: Vec::new(),
        accepted: false,
        halted_round: None,
        fault: None,
    };
    for round in 0..v.rounds {
        let action = (v.step)(round, &t.coins[..=round], &t.prover_msgs);
        match action {
            VerifierAction::Accept => {
                t.accepted = true;
                t.halted_round = Some(round);
                return t;
            }
            VerifierAction::Reject => {
                t.accepted = false;
                t.halted_round = Some(round);
                return t;
            }
            VerifierAction::Send(msg) => {
                t.verifier_msgs.push(msg);
                let reply = p.next_message(&t.verifier_msgs, rng);
                if !v.reply_shapes[round].matches(&reply) {
                    t.accepted = false;
                    t.halted_round = Some(round);
                    t.fault = Some(format!(
                        "round {round} reply does not match its declared shape"
                    ));
                    return t;
                }
                t.prover_msgs.push(reply);
            }
        }
    }
    t.accepted = (v.verdict)(&t.coins, &t.verifier_msgs, &t.prover_msgs);
    t
}

/// Plays the protocol with fresh coins.
pub fn run_protocol(v: &VerifierSpec, p: &dyn Prover, rng: &mut ChaCha8Rng) -> Transcript {
    let coins = v.draw_coins(rng);
    run_protocol_with_coins(v, p, coins, rng)
}

/// Plays only the first `rounds` rounds, returning the partial view, or
/// `None` if the verifier halted (or faulted the prover) inside the prefix.
pub fn run_protocol_prefix(
    v: &VerifierSpec,
    p: &dyn Prover,
    rounds: usize,
    rng: &mut ChaCha8Rng,
) -> Option<PartialView> {
    assert!(rounds <= v.rounds);
    let mut view =
        PartialView { coins: Vec::new(), verifier_msgs: Vec::new(), prover_msgs: Vec::new() };
    for round in 0..rounds {
        view.coins.push(
            v.coin_schema[round].arities.iter().map(|&a| rng.gen_range(0..a)).collect(),
        );
        match (v.step)(round, &view.coins, &view.prover_msgs) {
            VerifierAction::Send(msg) => {
                view.verifier_msgs.push(msg);
                let reply = p.next_message(&view.verifier_msgs, rng);
                if !v.reply_shapes[round].matches(&reply) {
                    return None;
                }
                view.prover_msgs.push(reply);
            }
            _ => return None,
        }
    }
    Some(view)
}

/// Accept-rate estimate with a symmetric Hoeffding interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoundnessEstimate {
    /// Fraction of accepting runs.
    pub p_hat: f64,
    /// Two-sided 99.7% confidence radius.
    pub ci: f64,
    /// Number of runs.
    pub trials: usize,
}

/// Monte Carlo accept-rate estimate over fresh-coin executions.
pub fn estimate_soundness(
    v: &VerifierSpec,
    p: &dyn Prover,
    trials: usize,
    rng: &mut ChaCha8Rng,
) -> SoundnessEstimate {
    assert!(trials >= 1_000, "estimate needs at least 1000 trials");
    let mut hits = 0usize;
    for _ in 0..trials {
        if run_protocol(v, p, rng).accepted {
            hits += 1;
        }
    }
    SoundnessEstimate {
        p_hat: hits as f64 / trials as f64,
        ci: hoeffding_radius(1.0, trials),
        trials,
    }
}

/// Replays the inner verifier on projected coins and messages, returning
/// its decision: an early step verdict or the final verdict function.
pub(crate) fn inner_outcome(v: &VerifierSpec, coins: &[Vec<Coin>], prover_msgs: &[Msg]) -> bool {
    let mut vms: Vec<Msg> = Vec::new();
    for round in 0..v.rounds {
        match (v.step)(round, &coins[..=round], &prover_msgs[..round.min(prover_msgs.len())]) {
            VerifierAction::Accept => return true,
            VerifierAction::Reject => return false,
            VerifierAction::Send(m) => vms.push(m),
        }
    }
    (v.verdict)(coins, &vms, prover_msgs)
}

/// The early-stop transform: after every round of `v` the wrapped verifier
/// consults a fresh uniform halt symbol (arity `m`, halting on symbol 0, so
/// the halt probability is exactly `1/m`) and accepts immediately on a hit.
///
/// The symbol deciding the halt after round `i` is stored at the front of
/// block `i + 1`, and one trailing block holds the final halt symbol, so the
/// wrapped verifier has `m + 1` blocks and its halt events form a prefix
/// family ([`rt_dense_family`]). Requires `m >= 2`.
pub fn random_terminating_wrap(v: &VerifierSpec) -> VerifierSpec {
    let m = v.rounds;
    assert!(m >= 2, "the early-stop transform needs at least two rounds");
    let halt_arity = m as u16;
    let mut schema = Vec::with_capacity(m + 1);
    let mut shapes = Vec::with_capacity(m + 1);
    for (b, decl) in v.coin_schema.iter().enumerate() {
        let mut arities = if b == 0 { Vec::new() } else { vec![halt_arity] };
        arities.extend_from_slice(&decl.arities);
        schema.push(CoinDecl::new(arities));
        shapes.push(v.reply_shapes[b].clone());
    }
    schema.push(CoinDecl::new(vec![halt_arity]));
    shapes.push(MsgShape::empty());

    let step_v = v.clone();
    let step = move |round: usize, blocks: &[Vec<Coin>], pms: &[Msg]| -> VerifierAction {
        if round >= 1 && blocks[round][0] == 0 {
            return VerifierAction::Accept;
        }
        if round == m {
            // Final halt symbol missed: settle with the inner verdict.
            return if inner_outcome(&step_v, &strip_halt_symbols(blocks, m), pms) {
                VerifierAction::Accept
            } else {
                VerifierAction::Reject
            };
        }
        (step_v.step)(round, &strip_halt_symbols(blocks, m), pms)
    };

    let verdict_v = v.clone();
    let verdict = move |blocks: &[Vec<Coin>], _vms: &[Msg], pms: &[Msg]| -> bool {
        // Unreachable in normal play (the last round's step always halts);
        // kept faithful for robustness.
        inner_outcome(&verdict_v, &strip_halt_symbols(blocks, verdict_v.rounds), pms)
    };

    VerifierSpec::new(format!("rt({})", v.name), schema, shapes, step, verdict)
}

/// Drops the leading halt symbol from blocks `1..m`, recovering the inner
/// verifier's coin layout.
fn strip_halt_symbols(blocks: &[Vec<Coin>], m: usize) -> Vec<Vec<Coin>> {
    blocks
        .iter()
        .take(m)
        .enumerate()
        .map(|(b, block)| if b == 0 { block.clone() } else { block[1..].to_vec() })
        .collect()
}

/// Round at which a wrapped verifier's halt symbol first hits on the given
/// coins, if any: `Some(b)` means the verifier accepts at its round `b`
/// (equivalently, right after round `b - 1` of the inner protocol).
pub fn rt_halt_round(coins: &[Vec<Coin>]) -> Option<usize> {
    (1..coins.len()).find(|&b| coins[b][0] == 0)
}

/// `n` lockstep copies with independent coins; messages are per-copy
/// tuples, halted copies are marked [`Msg::Done`], and the combined verdict
/// accepts iff every copy accepts.
pub fn parallel_repeat(v: &VerifierSpec, n: usize) -> VerifierSpec {
    assert!(n >= 1, "repetition needs at least one copy");
    let schema: Vec<CoinDecl> = v
        .coin_schema
        .iter()
        .map(|d| CoinDecl::new(d.arities.repeat(n)))
        .collect();
    let shapes: Vec<MsgShape> = v
        .reply_shapes
        .iter()
        .map(|sh| MsgShape::Tuple(vec![sh.clone(); n]))
        .collect();

    let step_v = v.clone();
    let step = move |round: usize, blocks: &[Vec<Coin>], pms: &[Msg]| -> VerifierAction {
        let states = copy_states(&step_v, n, round, blocks, pms);
        let mut slots = Vec::with_capacity(n);
        let mut any_live = false;
        for st in states {
            match st {
                CopyState::Rejected => return VerifierAction::Reject,
                CopyState::Accepted => slots.push(Msg::Done),
                CopyState::Sends(m) => {
                    any_live = true;
                    slots.push(m);
                }
            }
        }
        if any_live {
            VerifierAction::Send(Msg::Tuple(slots))
        } else {
            // Every copy halted with an accept.
            VerifierAction::Accept
        }
    };

    let verdict_v = v.clone();
    let verdict = move |blocks: &[Vec<Coin>], _vms: &[Msg], pms: &[Msg]| -> bool {
        (0..n).all(|k| copy_outcome(&verdict_v, n, k, blocks, pms))
    };

    VerifierSpec::new(format!("{}^{n}", v.name), schema, shapes, step, verdict)
}

enum CopyState {
    Sends(Msg),
    Accepted,
    Rejected,
}

fn copy_coins(v: &VerifierSpec, n: usize, k: usize, blocks: &[Vec<Coin>]) -> Vec<Vec<Coin>> {
    blocks
        .iter()
        .enumerate()
        .map(|(b, block)| {
            let w = v.coin_schema[b].arities.len();
            debug_assert_eq!(block.len(), w * n);
            block[k * w..(k + 1) * w].to_vec()
        })
        .collect()
}

fn copy_msgs(n: usize, k: usize, pms: &[Msg]) -> Vec<Msg> {
    let mut out = Vec::new();
    for msg in pms {
        match msg {
            Msg::Tuple(parts) if parts.len() == n => match &parts[k] {
                Msg::Done => break,
                other => out.push(other.clone()),
            },
            other => out.push(other.clone()),
        }
    }
    out
}

/// Replays copy `k` through the start of `round`, returning what its step
/// does now (or the halt it reached earlier).
fn copy_states(
    v: &VerifierSpec,
    n: usize,
    round: usize,
    blocks: &[Vec<Coin>],
    pms: &[Msg],
) -> Vec<CopyState> {
    (0..n)
        .map(|k| {
            let coins = copy_coins(v, n, k, blocks);
            let msgs = copy_msgs(n, k, pms);
            for r in 0..=round {
                match (v.step)(r, &coins[..=r], &msgs[..r.min(msgs.len())]) {
                    VerifierAction::Accept => return CopyState::Accepted,
                    VerifierAction::Reject => return CopyState::Rejected,
                    VerifierAction::Send(m) => {
                        if r == round {
                            return CopyState::Sends(m);
                        }
                    }
                }
            }
            unreachable!("loop returns at round `round`")
        })
        .collect()
}

/// Final decision of copy `k` on a completed repeated transcript.
fn copy_outcome(v: &VerifierSpec, n: usize, k: usize, blocks: &[Vec<Coin>], pms: &[Msg]) -> bool {
    inner_outcome(v, &copy_coins(v, n, k, blocks), &copy_msgs(n, k, pms))
}

/// Per-copy verdicts of a repeated protocol's transcript.
pub fn repeat_copy_verdicts(inner: &VerifierSpec, n: usize, t: &Transcript) -> Vec<bool> {
    (0..n).map(|k| copy_outcome(inner, n, k, &t.coins, &t.prover_msgs)).collect()
}

/// Packs one coin block into a single bounded symbol (mixed radix, first
/// symbol in the lowest digit). Panics if the block cardinality exceeds the
/// symbol range.
pub fn encode_block(block: &[Coin], decl: &CoinDecl) -> Sym {
    assert_eq!(block.len(), decl.arities.len());
    assert!(decl.cardinality() <= u16::MAX as usize + 1, "block cardinality too large");
    let mut idx: usize = 0;
    let mut scale: usize = 1;
    for (c, &a) in block.iter().zip(&decl.arities) {
        debug_assert!(*c < a);
        idx += *c as usize * scale;
        scale *= a as usize;
    }
    idx as Sym
}

/// Inverse of [`encode_block`].
pub fn decode_block(sym: Sym, decl: &CoinDecl) -> Vec<Coin> {
    let mut rest = sym as usize;
    let out: Vec<Coin> = decl
        .arities
        .iter()
        .map(|&a| {
            let c = (rest % a as usize) as Coin;
            rest /= a as usize;
            c
        })
        .collect();
    debug_assert_eq!(rest, 0, "symbol out of range for the block");
    out
}

/// Coin-matrix model of `n` independent executions of `v`: one row per coin
/// block (encoded as a single symbol), one column per execution, cells
/// uniform, conditioned on `w`.
pub fn coin_base_model(
    v: &VerifierSpec,
    n: usize,
    w: EventPredicate<Matrix>,
) -> Result<BaseModel, crate::skewed::SkewedError> {
    let parts: Vec<FinitePmf<Sym>> = v
        .coin_schema
        .iter()
        .map(|d| {
            let card = d.cardinality();
            assert!(card <= u16::MAX as usize + 1, "block cardinality too large");
            FinitePmf::uniform(0..card as Sym).expect("blocks are nonempty")
        })
        .collect();
    let column = product(&parts);
    BaseModel::new(vec![column; n], w)
}

/// Matrix column `j` decoded back into one execution's coin blocks.
pub fn coins_from_column(v: &VerifierSpec, x: &Matrix, j: usize) -> Vec<Vec<Coin>> {
    x.iter()
        .enumerate()
        .map(|(b, row)| decode_block(row[j], &v.coin_schema[b]))
        .collect()
}

/// Concatenates all columns of a coin matrix into the coin blocks of the
/// `n`-fold repetition of `v`.
pub fn coins_from_matrix(v: &VerifierSpec, x: &Matrix) -> Vec<Vec<Coin>> {
    let n = x.first().map_or(0, |r| r.len());
    x.iter()
        .enumerate()
        .map(|(b, row)| {
            let mut block = Vec::new();
            for j in 0..n {
                block.extend(decode_block(row[j], &v.coin_schema[b]));
            }
            block
        })
        .collect()
}

/// The halt-event family of a wrapped verifier over `n` coin columns: the
/// round-`i` event reads the halt symbol at the front of block `i + 1` and
/// asks for a hit; the final row is the full event. Passes the density
/// check with constant density `1/m` on the halt rows.
pub fn rt_dense_family(wrapped: &VerifierSpec, n: usize) -> DenseFamily {
    let blocks = wrapped.rounds();
    let m_inner = blocks - 1;
    let grid: Vec<Vec<CellEvent>> = (0..blocks)
        .map(|i| {
            (0..n)
                .map(|_| {
                    if i + 1 < blocks {
                        let decl = &wrapped.coin_schema()[i + 1];
                        let hits = (0..decl.cardinality())
                            .filter(|s| s % m_inner == 0)
                            .map(|s| s as Sym)
                            .collect();
                        CellEvent::RowIn { row: i + 1, values: hits }
                    } else {
                        CellEvent::Full
                    }
                })
                .collect()
        })
        .collect();
    DenseFamily::from_cells(grid)
}

/// Continuation sampler for a wrapped verifier, conditioned on the event
/// "the next halt symbol hits": it forces that symbol, draws the remaining
/// coins fresh, and replays the protocol, which then accepts at the next
/// round.
pub struct SimulatorHandle {
    wrapped: VerifierSpec,
    delta: f64,
}

impl SimulatorHandle {
    /// Handle for a verifier whose blocks past the first start with a halt
    /// symbol that hits (value 0) with probability `delta`. Prefer
    /// [`rt_simulator`] for verifiers produced by [`random_terminating_wrap`];
    /// this constructor also admits hand-built layouts with the same leading
    /// halt-symbol convention.
    pub fn new(verifier: &VerifierSpec, delta: f64) -> Self {
        assert!(delta > 0.0 && delta <= 1.0, "delta must lie in (0, 1]");
        SimulatorHandle { wrapped: verifier.clone(), delta }
    }

    /// The verifier this handle simulates.
    pub fn verifier(&self) -> &VerifierSpec {
        &self.wrapped
    }

    /// Density of the conditioning event (one uniform halt symbol).
    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Whether a full coin assignment lies in the conditioning event for a
    /// view that played `rounds` rounds.
    pub fn event_holds(&self, coins: &[Vec<Coin>], rounds: usize) -> bool {
        coins[rounds][0] == 0
    }

    /// Completes a partial view: remaining blocks are drawn fresh, the next
    /// halt symbol is forced to hit, and the protocol is replayed (the
    /// prover must be deterministic for the replayed prefix to match the
    /// view). The result always accepts at round `view.coins.len()`.
    /// Requires at least one played round (the first block carries no halt
    /// symbol).
    pub fn simulate(
        &self,
        view: &PartialView,
        p: &dyn Prover,
        rng: &mut ChaCha8Rng,
    ) -> Transcript {
        let played = view.coins.len();
        assert!(played >= 1, "the first block carries no halt symbol");
        assert!(played < self.wrapped.rounds(), "view is already complete");
        let mut coins = view.coins.clone();
        for b in played..self.wrapped.rounds() {
            coins.push(
                self.wrapped.coin_schema()[b]
                    .arities
                    .iter()
                    .map(|&a| rng.gen_range(0..a))
                    .collect(),
            );
        }
        coins[played][0] = 0;
        let t = run_protocol_with_coins(&self.wrapped, p, coins, rng);
        debug_assert!(t.accepted && t.halted_round == Some(played));
        t
    }
}

/// Builds the continuation sampler for a verifier produced by
/// [`random_terminating_wrap`].
pub fn rt_simulator(wrapped: &VerifierSpec) -> SimulatorHandle {
    let m_inner = wrapped.rounds() - 1;
    assert!(m_inner >= 2, "not a wrapped verifier layout");
    SimulatorHandle { wrapped: wrapped.clone(), delta: 1.0 / m_inner as f64 }
}

/// Toy verifier that always accepts after `rounds` empty exchanges.
pub fn always_accept_verifier(rounds: usize) -> VerifierSpec {
    VerifierSpec::new(
        "always-accept",
        vec![CoinDecl::new(Vec::new()); rounds],
        vec![MsgShape::empty(); rounds],
        |_, _, _| VerifierAction::Send(Msg::empty()),
        |_, _, _| true,
    )
}

/// Two-round coin-guessing toy: the verifier announces a uniform symbol
/// below `arity` in round one and expects the prover to repeat it; round
/// two is an empty exchange. [`echo_prover`] always wins; a blind prover
/// wins with probability `1/arity`.
pub fn coin_guessing_verifier(arity: u16) -> VerifierSpec {
    assert!(arity >= 2);
    VerifierSpec::new(
        format!("coin-guessing({arity})"),
        vec![CoinDecl::new(vec![arity]), CoinDecl::new(Vec::new())],
        vec![MsgShape::Symbols { arity, len: 1 }, MsgShape::empty()],
        |round, coins, _| {
            if round == 0 {
                VerifierAction::Send(Msg::Symbols(vec![coins[0][0]]))
            } else {
                VerifierAction::Send(Msg::empty())
            }
        },
        |coins, _, pms| pms.first() == Some(&Msg::Symbols(vec![coins[0][0]])),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skewed::validate_density;
    use rand::SeedableRng;

    fn rng64(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Every coin assignment of `v`, as block vectors.
    fn all_coin_assignments(v: &VerifierSpec) -> Vec<Vec<Vec<Coin>>> {
        let mut out: Vec<Vec<Vec<Coin>>> = vec![Vec::new()];
        for decl in v.coin_schema() {
            let mut blocks: Vec<Vec<Coin>> = vec![Vec::new()];
            for &a in &decl.arities {
                blocks = blocks
                    .into_iter()
                    .flat_map(|b| {
                        (0..a).map(move |c| {
                            let mut b2 = b.clone();
                            b2.push(c);
                            b2
                        })
                    })
                    .collect();
            }
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    blocks.iter().map(move |b| {
                        let mut p2 = prefix.clone();
                        p2.push(b.clone());
                        p2
                    })
                })
                .collect();
        }
        out
    }

    /// Two-round variant of the coin-guessing toy whose second-round step
    /// rejects a wrong guess immediately instead of waiting for the verdict.
    fn impatient_coin_guessing() -> VerifierSpec {
        VerifierSpec::new(
            "impatient-coin-guessing",
            vec![CoinDecl::new(vec![2]), CoinDecl::new(Vec::new())],
            vec![MsgShape::Symbols { arity: 2, len: 1 }, MsgShape::empty()],
            |round, coins, pms| {
                if round == 0 {
                    VerifierAction::Send(Msg::Symbols(vec![coins[0][0]]))
                } else if pms[0] == Msg::Symbols(vec![coins[0][0]]) {
                    VerifierAction::Send(Msg::empty())
                } else {
                    VerifierAction::Reject
                }
            },
            |coins, _, pms| pms.first() == Some(&Msg::Symbols(vec![coins[0][0]])),
        )
    }

    #[test]
    fn always_accept_verifier_accepts_every_run() {
        let v = always_accept_verifier(3);
        let p = blind_prover(Vec::new());
        let mut rng = rng64(1);
        for _ in 0..50 {
            let t = run_protocol(&v, &p, &mut rng);
            assert!(t.accepted);
            assert_eq!(t.halted_round, None);
            assert_eq!(t.verifier_msgs.len(), 3);
        }
        let est = estimate_soundness(&v, &p, 1_000, &mut rng);
        assert_eq!(est.p_hat, 1.0);
        assert!(est.ci > 0.0);
    }

    #[test]
    fn echo_prover_always_wins_coin_guessing() {
        let v = coin_guessing_verifier(2);
        let p = echo_prover();
        let mut rng = rng64(2);
        for _ in 0..500 {
            assert!(run_protocol(&v, &p, &mut rng).accepted);
        }
    }

    #[test]
    fn blind_prover_wins_coin_guessing_half_the_time() {
        let v = coin_guessing_verifier(2);
        let p = blind_prover(vec![0]);
        let mut rng = rng64(3);
        let trials = 100_000;
        let est = estimate_soundness(&v, &p, trials, &mut rng);
        // Three binomial standard deviations around the exact rate 1/2.
        let band = 3.0 * (0.25 / trials as f64).sqrt();
        assert!(
            (est.p_hat - 0.5).abs() <= band,
            "blind rate {} outside 0.5 +- {band}",
            est.p_hat
        );
    }

    #[test]
    fn malformed_reply_is_recorded_and_rejected() {
        let v = coin_guessing_verifier(2);
        // Replies two symbols where one is declared.
        let p = DetProver::new(|_| Msg::Symbols(vec![0, 0]));
        let t = run_protocol(&v, &p, &mut rng64(4));
        assert!(!t.accepted);
        assert_eq!(t.halted_round, Some(0));
        assert!(t.fault.as_deref().unwrap_or("").contains("round 0"));

        // Out-of-alphabet symbol.
        let p = DetProver::new(|_| Msg::Symbols(vec![7]));
        let t = run_protocol(&v, &p, &mut rng64(5));
        assert!(!t.accepted && t.fault.is_some());
    }

    #[test]
    fn deterministic_runs_replay_identically() {
        let inner = coin_guessing_verifier(2);
        let v = parallel_repeat(&random_terminating_wrap(&inner), 2);
        for seed in 0..100 {
            let p = TupleProver::new(vec![
                Box::new(echo_prover()),
                Box::new(blind_prover(vec![0])),
            ]);
            let t1 = run_protocol(&v, &p, &mut rng64(seed));
            let t2 = run_protocol_with_coins(&v, &p, t1.coins.clone(), &mut rng64(9999));
            assert_eq!(t1, t2, "replay with the same coins must be identical");
        }
    }

    #[test]
    fn wrap_layout_adds_one_block_and_halt_symbols() {
        let v = coin_guessing_verifier(2);
        let w = random_terminating_wrap(&v);
        assert_eq!(w.rounds(), 3);
        let arities: Vec<Vec<u16>> =
            w.coin_schema().iter().map(|d| d.arities.clone()).collect();
        assert_eq!(arities, vec![vec![2], vec![2], vec![2]]);
    }

    #[test]
    fn wrap_halt_distribution_by_exact_enumeration() {
        let v = coin_guessing_verifier(2);
        let w = random_terminating_wrap(&v);
        let echo = echo_prover();
        let blind = blind_prover(vec![0]);
        let mut halt_at_1 = 0;
        let mut halt_at_2 = 0;
        let mut no_halt = 0;
        let mut echo_accepts = 0;
        let mut blind_accepts = 0;
        let assignments = all_coin_assignments(&w);
        assert_eq!(assignments.len(), 8);
        for coins in &assignments {
            match rt_halt_round(coins) {
                Some(1) => halt_at_1 += 1,
                Some(2) => halt_at_2 += 1,
                Some(_) => unreachable!(),
                None => no_halt += 1,
            }
            let te = run_protocol_with_coins(&w, &echo, coins.clone(), &mut rng64(0));
            let tb = run_protocol_with_coins(&w, &blind, coins.clone(), &mut rng64(0));
            if let Some(b) = rt_halt_round(coins) {
                assert!(te.accepted && te.halted_round == Some(b));
                assert!(tb.accepted && tb.halted_round == Some(b));
            }
            echo_accepts += te.accepted as usize;
            blind_accepts += tb.accepted as usize;
        }
        // Halt after round 0 with probability 1/2, after round 1 with 1/4,
        // never with (1 - 1/m)^m = 1/4.
        assert_eq!((halt_at_1, halt_at_2, no_halt), (4, 2, 2));
        assert_eq!(echo_accepts, 8, "the honest prover always wins the wrap");
        // Blind: accepts on any halt plus the correct-guess quarter of the rest.
        assert_eq!(blind_accepts, 7);
    }

    #[test]
    fn wrap_soundness_estimate_matches_enumeration() {
        let v = coin_guessing_verifier(2);
        let w = random_terminating_wrap(&v);
        let p = blind_prover(vec![0]);
        let est = estimate_soundness(&w, &p, 100_000, &mut rng64(6));
        assert!(
            (est.p_hat - 7.0 / 8.0).abs() <= est.ci,
            "estimate {} +- {} misses the exact rate 7/8",
            est.p_hat,
            est.ci
        );
    }

    #[test]
    fn wrap_propagates_inner_early_rejection() {
        let w = random_terminating_wrap(&impatient_coin_guessing());
        let blind = blind_prover(vec![0]);
        let mut accepts = 0;
        for coins in all_coin_assignments(&w) {
            accepts += run_protocol_with_coins(&w, &blind, coins, &mut rng64(0)).accepted
                as usize;
        }
        // A wrong guess now dies at round 1 before the final halt symbol can
        // rescue it: accept iff halt-at-1 (4 cases) or correct guess (2).
        assert_eq!(accepts, 6);
    }

    #[test]
    fn single_copy_repetition_is_behaviorally_identical() {
        let v = coin_guessing_verifier(2);
        let r = parallel_repeat(&v, 1);
        for coins in all_coin_assignments(&v) {
            for guess in [0u16, 1] {
                let plain = run_protocol_with_coins(
                    &v,
                    &blind_prover(vec![guess]),
                    coins.clone(),
                    &mut rng64(0),
                );
                let tup = TupleProver::new(vec![Box::new(blind_prover(vec![guess]))]);
                let repeated =
                    run_protocol_with_coins(&r, &tup, coins.clone(), &mut rng64(0));
                assert_eq!(plain.accepted, repeated.accepted);
                assert_eq!(repeat_copy_verdicts(&v, 1, &repeated), vec![plain.accepted]);
            }
        }
    }

    #[test]
    fn tenfold_blind_success_is_two_to_the_minus_ten() {
        let n = 10;
        let v = coin_guessing_verifier(2);
        let r = parallel_repeat(&v, n);
        // Exact: enumerate all 2^10 coin columns; only the all-zero one lets
        // ten blind zero-guessers win.
        let mut wins = 0;
        for coins in all_coin_assignments(&r) {
            let p = TupleProver::new(
                (0..n).map(|_| Box::new(blind_prover(vec![0])) as _).collect(),
            );
            wins += run_protocol_with_coins(&r, &p, coins, &mut rng64(0)).accepted as usize;
        }
        assert_eq!(wins, 1);

        // Sampled cross-check at 1e5 runs within three binomial sigmas.
        let p = TupleProver::new(
            (0..n).map(|_| Box::new(blind_prover(vec![0])) as _).collect(),
        );
        let trials = 100_000usize;
        let mut rng = rng64(7);
        let mut hits = 0;
        for _ in 0..trials {
            hits += run_protocol(&r, &p, &mut rng).accepted as usize;
        }
        let rate = hits as f64 / trials as f64;
        let exact = (0.5f64).powi(n as i32);
        let band = 3.0 * (exact * (1.0 - exact) / trials as f64).sqrt();
        assert!(
            (rate - exact).abs() <= band,
            "tenfold blind rate {rate} outside {exact} +- {band}"
        );
    }

    #[test]
    fn per_copy_verdicts_are_exposed() {
        let v = coin_guessing_verifier(2);
        let r = parallel_repeat(&v, 3);
        for coins in all_coin_assignments(&r) {
            let p = TupleProver::new(vec![
                Box::new(echo_prover()),
                Box::new(blind_prover(vec![0])),
                Box::new(echo_prover()),
            ]);
            let t = run_protocol_with_coins(&r, &p, coins.clone(), &mut rng64(0));
            let verdicts = repeat_copy_verdicts(&v, 3, &t);
            assert_eq!(verdicts[0], true);
            assert_eq!(verdicts[1], coins[0][1] == 0, "blind copy wins iff its coin is 0");
            assert_eq!(verdicts[2], true);
            assert_eq!(t.accepted, verdicts.iter().all(|&b| b));
        }
    }

    #[test]
    fn halted_copies_are_marked_done_in_lockstep() {
        let inner = coin_guessing_verifier(2);
        let w = random_terminating_wrap(&inner);
        let r = parallel_repeat(&w, 2);
        let p = TupleProver::new(vec![Box::new(echo_prover()), Box::new(echo_prover())]);
        // Copy 0 halts at round 1 (its halt symbol hits), copy 1 never halts.
        let coins = vec![vec![0, 0], vec![0, 1], vec![1, 1]];
        let t = run_protocol_with_coins(&r, &p, coins, &mut rng64(0));
        assert_eq!(
            t.verifier_msgs[1],
            Msg::Tuple(vec![Msg::Done, Msg::Symbols(Vec::new())]),
            "halted copy is a Done slot, live copy still plays"
        );
        assert_eq!(
            t.prover_msgs[1],
            Msg::Tuple(vec![Msg::Done, Msg::Symbols(Vec::new())]),
            "the combined prover answers Done without querying the halted copy"
        );
        // Copy 1 settles by the inner verdict at the final round; both accept.
        assert_eq!(repeat_copy_verdicts(&w, 2, &t), vec![true, true]);
        assert!(t.accepted);
        assert_eq!(t.halted_round, Some(2), "all copies settled at the last round");
    }

    #[test]
    fn simulator_always_accepts_at_the_next_round() {
        let w = random_terminating_wrap(&coin_guessing_verifier(2));
        let sim = rt_simulator(&w);
        assert!((sim.delta() - 0.5).abs() < 1e-15);
        let p = echo_prover();
        let mut rng = rng64(8);
        for _ in 0..200 {
            let view = run_protocol_prefix(&w, &p, 1, &mut rng).expect("round 0 never halts");
            let t = sim.simulate(&view, &p, &mut rng);
            assert!(t.accepted);
            assert_eq!(t.halted_round, Some(1));
            assert!(sim.event_holds(&t.coins, 1));
            assert_eq!(t.coins[0], view.coins[0], "the view prefix is preserved");
        }
    }

    #[test]
    fn simulator_matches_the_exact_conditional_law() {
        let w = random_terminating_wrap(&coin_guessing_verifier(2));
        let sim = rt_simulator(&w);
        let p = echo_prover();
        let mut rng = rng64(9);
        let view = run_protocol_prefix(&w, &p, 1, &mut rng).unwrap();
        // Conditioned on the round-1 halt symbol hitting, the continuation
        // law is: block 1 = [0], block 2 uniform.
        let exact = FinitePmf::from_weights(vec![
            (vec![vec![0u16], vec![0u16]], 0.5),
            (vec![vec![0u16], vec![1u16]], 0.5),
        ])
        .unwrap();
        let sims = 100_000;
        let draws = (0..sims).map(|_| {
            let t = sim.simulate(&view, &p, &mut rng);
            t.coins[1..].to_vec()
        });
        let emp = crate::dist::empirical(draws).unwrap();
        let tv = crate::dist::total_variation(&exact, &emp);
        assert!(tv <= 0.02, "continuation TV {tv} exceeds 0.02");
    }

    #[test]
    fn simulator_event_density_is_one_over_m() {
        let w = random_terminating_wrap(&coin_guessing_verifier(2));
        let sim = rt_simulator(&w);
        let mut rng = rng64(10);
        let trials = 20_000;
        let mut hits = 0;
        for _ in 0..trials {
            let coins = w.draw_coins(&mut rng);
            hits += sim.event_holds(&coins, 1) as usize;
        }
        let rate = hits as f64 / trials as f64;
        let band = 3.0 * (0.25 / trials as f64).sqrt();
        assert!((rate - 0.5).abs() <= band, "halt density {rate} outside 0.5 +- {band}");
    }

    #[test]
    fn wrapped_halt_family_passes_the_density_check() {
        // Two-round inner protocol: halt density 1/2.
        let w2 = random_terminating_wrap(&coin_guessing_verifier(2));
        let base = coin_base_model(&w2, 2, full_event_matrix()).unwrap();
        let fam = rt_dense_family(&w2, 2);
        let report = validate_density(&base, &fam).unwrap();
        assert!(report.prefix_flag, "halt events must be a prefix family");
        assert!((report.delta_min - 0.5).abs() < 1e-12);
        for (i, row) in report.delta_grid.iter().enumerate() {
            let want = if i + 1 < w2.rounds() { 0.5 } else { 1.0 };
            for &d in row {
                assert!((d - want).abs() < 1e-12, "row {i} density {d}, want {want}");
            }
        }

        // Three-round inner protocol: halt density 1/3.
        let w3 = random_terminating_wrap(&always_accept_verifier(3));
        let base = coin_base_model(&w3, 2, full_event_matrix()).unwrap();
        let fam = rt_dense_family(&w3, 2);
        let report = validate_density(&base, &fam).unwrap();
        assert!(report.prefix_flag);
        assert!((report.delta_min - 1.0 / 3.0).abs() < 1e-12);
    }

    fn full_event_matrix() -> EventPredicate<Matrix> {
        crate::skewed::full_event()
    }

    #[test]
    fn block_encoding_round_trips() {
        let decls = [
            CoinDecl::new(vec![]),
            CoinDecl::new(vec![2]),
            CoinDecl::new(vec![2, 3]),
            CoinDecl::new(vec![4, 2, 3]),
        ];
        for decl in &decls {
            for sym in 0..decl.cardinality() as Sym {
                let block = decode_block(sym, decl);
                assert_eq!(block.len(), decl.arities.len());
                assert!(block.iter().zip(&decl.arities).all(|(c, a)| c < a));
                assert_eq!(encode_block(&block, decl), sym);
            }
        }
    }

    #[test]
    fn matrix_coins_round_trip_through_columns() {
        let w = random_terminating_wrap(&coin_guessing_verifier(4));
        let mut rng = rng64(11);
        // Build a random two-column coin matrix by encoding drawn blocks.
        let cols: Vec<Vec<Vec<Coin>>> = (0..2).map(|_| w.draw_coins(&mut rng)).collect();
        let x: Matrix = (0..w.rounds())
            .map(|b| {
                (0..2)
                    .map(|j| encode_block(&cols[j][b], &w.coin_schema()[b]))
                    .collect()
            })
            .collect();
        for (j, expect) in cols.iter().enumerate() {
            assert_eq!(&coins_from_column(&w, &x, j), expect);
        }
        let merged = coins_from_matrix(&w, &x);
        for b in 0..w.rounds() {
            let mut want = cols[0][b].clone();
            want.extend_from_slice(&cols[1][b]);
            assert_eq!(merged[b], want);
        }
    }

    #[test]
    fn prefix_runs_stop_at_halts() {
        let w = random_terminating_wrap(&coin_guessing_verifier(2));
        let p = echo_prover();
        let mut some_halted = false;
        let mut some_survived = false;
        for seed in 0..50 {
            match run_protocol_prefix(&w, &p, 2, &mut rng64(seed)) {
                Some(view) => {
                    some_survived = true;
                    assert_eq!(view.coins.len(), 2);
                    assert_eq!(view.prover_msgs.len(), 2);
                    assert_ne!(view.coins[1][0], 0, "a surviving view missed the halt");
                }
                None => some_halted = true,
            }
        }
        assert!(some_halted && some_survived);
    }
}
