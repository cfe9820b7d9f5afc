//! Skewed conditional-resampling distributions over coin matrices.
//!
//! The base object is a distribution `U` over `m x n` matrices with
//! independent columns together with a positive-probability event `W`; the
//! ideal distribution is `Idl = U | W`. Given a dense event family
//! `E = {E[i][j]}` (each event local to column `j`, with constant conditional
//! density), the skewed distribution `Q` over `(J, X)` draws a column index
//! `J` uniformly and then builds the matrix row by row: the `J` entry of row
//! `i` is drawn from `U`'s conditional, and the rest of the row is drawn from
//! the ideal conditioned on the history, the fresh entry, and `E[i][J]`.
//!
//! The module computes, all by exact enumeration:
//!
//! * the ideal and skewed pmfs and matching sequential samplers;
//! * the per-round weight ledger (importance ratios `omega`, per-symbol
//!   ratios `beta`, conditional densities `tdelta`, the capped symbol sets,
//!   and the good-column sets) with the posterior identity
//!   `Q[J = j | X_{<i}] = omega_{i,j} / sum_t omega_{i,t}`;
//! * the centered per-round measurement `gamma_i` and the good-event flags;
//! * a cut certificate: an exact smooth-divergence witness built from bit
//!   extensions of the ideal and skewed laws, truncated at the first
//!   failed round;
//! * the per-round divergence budget `d_i` and diagnostics (ratio ledgers,
//!   multiplicative chains, and the slow-conditional probability `p_t`).

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dist::{product, DistError, EventPredicate, FinitePmf};
use crate::divergence::{kl, ExtReal};

/// Symbol stored in one matrix cell.
pub type Sym = u16;
/// One matrix row (`n` symbols).
pub type Row = Vec<Sym>;
/// A full `m x n` coin matrix, row major.
pub type Matrix = Vec<Row>;

/// Per-symbol ratio cap defining the capped symbol sets.
pub const BETA_CAP: f64 = 1.1;
/// Fraction of the nominal density a conditional density must retain.
pub const DELTA_SLACK: f64 = 0.9;
/// Half-width of the admissible window around 1 for the weights.
pub const OMEGA_SLACK: f64 = 0.1;
/// Fraction of columns (and of capped-symbol mass) that must stay good.
pub const GOOD_FRACTION: f64 = 0.9;
/// Cap on the centered measurement in the per-round flag.
pub const GAMMA_CAP: f64 = 0.5;
/// Padding applied to threshold comparisons to absorb float noise.
const CMP_EPS: f64 = 1e-9;
/// Tolerance for the constant-density check across fixings.
const DENSITY_TOL: f64 = 1e-9;

/// Errors from construction, validation, and the exact operations.
#[derive(Debug, Error)]
pub enum SkewedError {
    /// Columns must be nonempty and agree on the number of rows.
    #[error("columns must be nonempty with equal-length outcome vectors")]
    MalformedColumns,
    /// An event grid does not match the model dimensions.
    #[error("event grid must be {expect_rows}x{expect_cols}, got {rows}x{cols}")]
    GridShape { expect_rows: usize, expect_cols: usize, rows: usize, cols: usize },
    /// A row or indicator argument does not have `n` entries.
    #[error("row argument must have {expect} entries, got {got}")]
    RowShape { expect: usize, got: usize },
    /// The family is not dense: an event escapes its column, its conditional
    /// density varies with the fixing, is zero, or the prefix claim fails.
    #[error("density violation at row {row}, col {col}: {detail}")]
    DensityViolation { row: usize, col: usize, detail: String },
    /// A conditioning event required by the skewed construction has zero
    /// ideal probability on a history that is reached with positive
    /// probability. Symptom of an inconsistent `(U, W, E)` triple.
    #[error("conditioning event has zero ideal probability at row {row}, col {col}: {detail}")]
    UnreachableConditioning { row: usize, col: usize, detail: String },
    /// A history argument has zero probability under the ideal distribution.
    #[error("prefix of {rows} rows lies outside the ideal support")]
    PrefixOutsideSupport { rows: usize },
    /// The good-column set is empty, so the centered measurement is undefined.
    #[error("good-column set is empty at round {round}")]
    EmptyGoodSet { round: usize },
    /// The rejection sampler ran out of attempts.
    #[error("rejection sampler exceeded {cap} attempts at row {row}")]
    CapExceeded { cap: usize, row: usize },
    /// The slow-conditional threshold must be positive.
    #[error("threshold must be positive and finite, got {0}")]
    BadThreshold(f64),
    /// Underlying distribution error (zero-probability event, bad weights).
    #[error(transparent)]
    Dist(#[from] DistError),
}

fn extends(x: &Matrix, prefix: &[Row]) -> bool {
    x.len() >= prefix.len() && x[..prefix.len()] == *prefix
}

fn column_prefix(rows: &[Row], j: usize) -> Vec<Sym> {
    rows.iter().map(|r| r[j]).collect()
}

/// Base model: independent-column matrix distribution `U` plus the
/// conditioning event `W` with `U[W] > 0`.
#[derive(Clone)]
pub struct BaseModel {
    m: usize,
    n: usize,
    columns: Vec<FinitePmf<Vec<Sym>>>,
    w: EventPredicate<Matrix>,
    u_joint: FinitePmf<Matrix>,
    ideal: FinitePmf<Matrix>,
}

impl BaseModel {
    /// Builds the model, materializing the joint and ideal pmfs.
    ///
    /// Fails when columns are ragged or empty, or when `W` has zero mass
    /// under the column product.
    pub fn new(
        columns: Vec<FinitePmf<Vec<Sym>>>,
        w: EventPredicate<Matrix>,
    ) -> Result<Self, SkewedError> {
        let m = columns
            .first()
            .and_then(|c| c.outcomes().next())
            .map(|v| v.len())
            .ok_or(SkewedError::MalformedColumns)?;
        if m == 0 || columns.iter().any(|c| c.outcomes().any(|v| v.len() != m)) {
            return Err(SkewedError::MalformedColumns);
        }
        let n = columns.len();
        let u_joint = product(&columns).map(|cols| {
            (0..m).map(|i| cols.iter().map(|c| c[i]).collect::<Row>()).collect::<Matrix>()
        });
        let ideal = u_joint.condition(&w)?;
        Ok(Self { m, n, columns, w, u_joint, ideal })
    }

    /// Number of rows.
    pub fn rows(&self) -> usize {
        self.m
    }

    /// Number of columns.
    pub fn cols(&self) -> usize {
        self.n
    }

    /// Per-column pmfs over length-`m` symbol vectors.
    pub fn columns(&self) -> &[FinitePmf<Vec<Sym>>] {
        &self.columns
    }

    /// The conditioning event.
    pub fn w(&self) -> &EventPredicate<Matrix> {
        &self.w
    }

    /// The joint matrix distribution (product of the columns).
    pub fn u_joint(&self) -> &FinitePmf<Matrix> {
        &self.u_joint
    }

    /// Probability of `W` under the column product.
    pub fn w_mass(&self) -> f64 {
        self.u_joint.prob_of(&self.w)
    }

    /// Mass of matrices satisfying `f` under the joint distribution.
    fn u_mass_where(&self, f: impl Fn(&Matrix) -> bool) -> f64 {
        self.u_joint.iter().filter(|(x, _)| f(x)).map(|(_, w)| w).sum()
    }

    /// Mass of matrices satisfying `f` under the ideal distribution.
    fn ideal_mass_where(&self, f: impl Fn(&Matrix) -> bool) -> f64 {
        self.ideal.iter().filter(|(x, _)| f(x)).map(|(_, w)| w).sum()
    }

    /// `U`'s conditional law of the cell at `(prefix.len(), j)` given the
    /// column-`j` history, as normalized `(symbol, probability)` pairs with
    /// positive probabilities only.
    fn u_cell_conditional(&self, j: usize, col_prefix: &[Sym]) -> Vec<(Sym, f64)> {
        let mut groups: BTreeMap<Sym, f64> = BTreeMap::new();
        let mut total = 0.0;
        for (col, w) in self.columns[j].iter() {
            if w > 0.0 && col[..col_prefix.len()] == *col_prefix {
                *groups.entry(col[col_prefix.len()]).or_insert(0.0) += w;
                total += w;
            }
        }
        groups
            .into_iter()
            .filter(|(_, w)| *w > 0.0)
            .map(|(v, w)| (v, w / total))
            .collect()
    }

    /// `Idl[X at (prefix.len(), j) = v | history = prefix]`.
    fn ideal_cell_conditional(&self, prefix: &[Row], j: usize, v: Sym) -> f64 {
        let i = prefix.len();
        let denom = self.ideal_mass_where(|x| extends(x, prefix));
        if denom == 0.0 {
            return f64::NAN;
        }
        self.ideal_mass_where(|x| extends(x, prefix) && x[i][j] == v) / denom
    }
}

/// Convenience: uniform independent cells over `{0, .., arity - 1}`.
pub fn uniform_columns(m: usize, n: usize, arity: Sym) -> Vec<FinitePmf<Vec<Sym>>> {
    let cell: Vec<Sym> = (0..arity).collect();
    let parts: Vec<FinitePmf<Sym>> = (0..m)
        .map(|_| FinitePmf::uniform(cell.iter().copied()).expect("nonempty cell alphabet"))
        .collect();
    (0..n).map(|_| product(&parts)).collect()
}

/// The always-true conditioning event.
pub fn full_event() -> EventPredicate<Matrix> {
    EventPredicate::new("full", |_| true)
}

/// Cell-level event template used by the dense-family builders: either the
/// full event or "the symbol of this column at an absolute row lies in a set".
#[derive(Debug, Clone)]
pub enum CellEvent {
    /// Always true (density 1).
    Full,
    /// `x[row][j]` lies in `values` (for the column `j` owning the event).
    RowIn {
        /// Absolute 0-based row index read by the event.
        row: usize,
        /// Admissible symbols.
        values: BTreeSet<Sym>,
    },
}

/// A grid of per-round, per-column events, each local to its column.
#[derive(Clone)]
pub struct DenseFamily {
    events: Vec<Vec<EventPredicate<Matrix>>>,
    prefix_flag: bool,
}

impl DenseFamily {
    /// Wraps a raw event grid. `prefix_flag` is the caller's claim that the
    /// event at grid row `i` is determined by column rows `0..=i+1`;
    /// [`validate_density`] brute-forces the claim.
    pub fn new(events: Vec<Vec<EventPredicate<Matrix>>>, prefix_flag: bool) -> Self {
        Self { events, prefix_flag }
    }

    /// Builds a family from cell-event templates.
    pub fn from_cells(grid: Vec<Vec<CellEvent>>) -> Self {
        let mut prefix = true;
        let events = grid
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .enumerate()
                    .map(|(j, cell)| match cell {
                        CellEvent::Full => EventPredicate::new(format!("full[{i},{j}]"), |_| true),
                        CellEvent::RowIn { row, values } => {
                            if *row > i + 1 {
                                prefix = false;
                            }
                            let (row, values) = (*row, values.clone());
                            EventPredicate::new(
                                format!("cell[{row},{j}] in set (event {i},{j})"),
                                move |x: &Matrix| values.contains(&x[row][j]),
                            )
                        }
                    })
                    .collect()
            })
            .collect();
        Self { events, prefix_flag: prefix }
    }

    /// The all-full family (every event has density 1).
    pub fn full(m: usize, n: usize) -> Self {
        Self::from_cells(vec![vec![CellEvent::Full; n]; m])
    }

    /// Early-stop style family: the round-`i` event reads the next row of
    /// the same column and asks for symbol 0; the last row is full.
    pub fn termination(m: usize, n: usize) -> Self {
        let grid = (0..m)
            .map(|i| {
                (0..n)
                    .map(|_| {
                        if i + 1 < m {
                            CellEvent::RowIn { row: i + 1, values: BTreeSet::from([0]) }
                        } else {
                            CellEvent::Full
                        }
                    })
                    .collect()
            })
            .collect();
        Self::from_cells(grid)
    }

    /// Grid rows.
    pub fn rows(&self) -> usize {
        self.events.len()
    }

    /// Grid columns.
    pub fn cols(&self) -> usize {
        self.events.first().map_or(0, |r| r.len())
    }

    /// The event at grid position `(i, j)` (0-based).
    pub fn event(&self, i: usize, j: usize) -> &EventPredicate<Matrix> {
        &self.events[i][j]
    }

    /// Whether the family claims the prefix property.
    pub fn prefix_flag(&self) -> bool {
        self.prefix_flag
    }
}

/// Output of [`validate_density`].
#[derive(Debug, Clone)]
pub struct DensityReport {
    /// Constant conditional density of each event.
    pub delta_grid: Vec<Vec<f64>>,
    /// Minimum of the grid.
    pub delta_min: f64,
    /// Echo of the validated prefix claim.
    pub prefix_flag: bool,
}

/// Checks that the family is dense for the model: every event is local to
/// its column, its conditional density given any positive-mass fixing of the
/// column rows up to the event's own row is one constant, that constant is
/// positive, and (when claimed) the event is determined by the column rows
/// up to one past its own.
pub fn validate_density(base: &BaseModel, fam: &DenseFamily) -> Result<DensityReport, SkewedError> {
    let (m, n) = (base.rows(), base.cols());
    if fam.rows() != m || fam.events.iter().any(|r| r.len() != n) {
        return Err(SkewedError::GridShape {
            expect_rows: m,
            expect_cols: n,
            rows: fam.rows(),
            cols: fam.events.first().map_or(0, |r| r.len()),
        });
    }
    let mut delta_grid = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let ev = fam.event(i, j);
            // Column locality: the event value may depend only on column j.
            let mut by_col: BTreeMap<Vec<Sym>, bool> = BTreeMap::new();
            for x in base.u_joint.outcomes() {
                let col = column_prefix(x, j);
                let val = ev.holds(x);
                if *by_col.entry(col).or_insert(val) != val {
                    return Err(SkewedError::DensityViolation {
                        row: i,
                        col: j,
                        detail: format!("event depends on a column other than {j}"),
                    });
                }
            }
            // Prefix claim: determined by column rows 0..=i+1.
            if fam.prefix_flag {
                let cut = (i + 2).min(m);
                let mut by_prefix: BTreeMap<Vec<Sym>, bool> = BTreeMap::new();
                for (col, val) in &by_col {
                    let key = col[..cut].to_vec();
                    if *by_prefix.entry(key).or_insert(*val) != *val {
                        return Err(SkewedError::DensityViolation {
                            row: i,
                            col: j,
                            detail: format!(
                                "event is not determined by the first {cut} rows of column {j}"
                            ),
                        });
                    }
                }
            }
            // Constant conditional density over positive-mass fixings of the
            // column rows 0..=i.
            let mut fixing_mass: BTreeMap<Vec<Sym>, (f64, f64)> = BTreeMap::new();
            for (col, w) in base.columns[j].iter() {
                if w <= 0.0 {
                    continue;
                }
                let key = col[..=i].to_vec();
                let hit = *by_col.get(col).expect("column value seen in locality pass");
                let e = fixing_mass.entry(key).or_insert((0.0, 0.0));
                e.0 += w;
                if hit {
                    e.1 += w;
                }
            }
            let mut delta: Option<f64> = None;
            for (total, hit) in fixing_mass.values() {
                let ratio = hit / total;
                match delta {
                    None => delta = Some(ratio),
                    Some(d) if (d - ratio).abs() > DENSITY_TOL => {
                        return Err(SkewedError::DensityViolation {
                            row: i,
                            col: j,
                            detail: format!(
                                "conditional density varies with the fixing ({d} vs {ratio})"
                            ),
                        });
                    }
                    _ => {}
                }
            }
            let d = delta.unwrap_or(0.0);
            if d <= 0.0 {
                return Err(SkewedError::DensityViolation {
                    row: i,
                    col: j,
                    detail: "event has zero conditional density".into(),
                });
            }
            delta_grid[i][j] = d;
        }
    }
    let delta_min = delta_grid.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    Ok(DensityReport { delta_grid, delta_min, prefix_flag: fam.prefix_flag })
}

/// The ideal distribution `U | W` over matrices.
pub fn ideal_pmf(base: &BaseModel) -> &FinitePmf<Matrix> {
    &base.ideal
}

/// Indicator rows of the family's events on a full matrix:
/// `out[i][j] = 1` iff the event at `(i, j)` holds.
pub fn event_indicator_rows(fam: &DenseFamily, x: &Matrix) -> Vec<Vec<bool>> {
    fam.events
        .iter()
        .map(|row| row.iter().map(|ev| ev.holds(x)).collect())
        .collect()
}

fn skewed_branch(
    base: &BaseModel,
    fam: &DenseFamily,
    j: usize,
    prefix: &mut Vec<Row>,
    p: f64,
    out: &mut Vec<((usize, Matrix), f64)>,
) -> Result<(), SkewedError> {
    let i = prefix.len();
    if i == base.rows() {
        out.push(((j, prefix.clone()), p / base.cols() as f64));
        return Ok(());
    }
    let ev = fam.event(i, j);
    for (v, pu) in base.u_cell_conditional(j, &column_prefix(prefix, j)) {
        // Law of the rest of row i: ideal conditioned on the history, the
        // fresh cell, and the round event.
        let slab = |x: &Matrix| extends(x, prefix) && x[i][j] == v && ev.holds(x);
        let slab_mass = base.ideal_mass_where(slab);
        if slab_mass == 0.0 {
            return Err(SkewedError::UnreachableConditioning {
                row: i,
                col: j,
                detail: format!(
                    "no ideal continuation matches the history, symbol {v}, and the round event"
                ),
            });
        }
        let mut groups: BTreeMap<Row, f64> = BTreeMap::new();
        for (x, w) in base.ideal.iter() {
            if w > 0.0 && slab(x) {
                *groups.entry(x[i].clone()).or_insert(0.0) += w;
            }
        }
        for (row, w) in groups {
            let p_next = p * pu * (w / slab_mass);
            if p_next > 0.0 {
                prefix.push(row);
                skewed_branch(base, fam, j, prefix, p_next, out)?;
                prefix.pop();
            }
        }
    }
    Ok(())
}

/// Exact pmf of the skewed distribution over `(column index, matrix)`.
pub fn skewed_pmf_exact(
    base: &BaseModel,
    fam: &DenseFamily,
) -> Result<FinitePmf<(usize, Matrix)>, SkewedError> {
    validate_density(base, fam)?;
    let mut out = Vec::new();
    for j in 0..base.cols() {
        let mut prefix = Vec::with_capacity(base.rows());
        skewed_branch(base, fam, j, &mut prefix, 1.0, &mut out)?;
    }
    Ok(FinitePmf::from_weights(out)?)
}

fn weighted_choice<'a, T, R: Rng + ?Sized>(rng: &mut R, pairs: &'a [(T, f64)]) -> &'a T {
    let total: f64 = pairs.iter().map(|(_, w)| w).sum();
    let mut u = rng.gen::<f64>() * total;
    for (v, w) in pairs {
        u -= w;
        if u <= 0.0 {
            return v;
        }
    }
    &pairs.last().expect("nonempty choice list").0
}

/// Draws one `(column index, matrix)` pair by the sequential rule, using
/// exact conditioning at every step. Distributed as [`skewed_pmf_exact`].
pub fn skewed_sample(
    base: &BaseModel,
    fam: &DenseFamily,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, Matrix), SkewedError> {
    let j = rng.gen_range(0..base.cols());
    let mut rows: Vec<Row> = Vec::with_capacity(base.rows());
    for i in 0..base.rows() {
        let cell = base.u_cell_conditional(j, &column_prefix(&rows, j));
        let v = *weighted_choice(rng, &cell);
        let ev = fam.event(i, j);
        let slab = |x: &Matrix| extends(x, &rows) && x[i][j] == v && ev.holds(x);
        let mut groups: BTreeMap<Row, f64> = BTreeMap::new();
        let mut slab_mass = 0.0;
        for (x, w) in base.ideal.iter() {
            if w > 0.0 && slab(x) {
                *groups.entry(x[i].clone()).or_insert(0.0) += w;
                slab_mass += w;
            }
        }
        if slab_mass == 0.0 {
            return Err(SkewedError::UnreachableConditioning {
                row: i,
                col: j,
                detail: format!(
                    "no ideal continuation matches the history, symbol {v}, and the round event"
                ),
            });
        }
        let pairs: Vec<(Row, f64)> = groups.into_iter().collect();
        rows.push(weighted_choice(rng, &pairs).clone());
    }
    Ok((j, rows))
}

/// Rejection-sampling variant of [`skewed_sample`] for instances too large
/// to condition exactly: the rest of each row is obtained by resampling a
/// full continuation from `U` until it satisfies both `W` and the round
/// event, up to `cap` attempts per row.
pub fn skewed_sample_rejection(
    base: &BaseModel,
    fam: &DenseFamily,
    rng: &mut ChaCha8Rng,
    cap: usize,
) -> Result<(usize, Matrix), SkewedError> {
    let j = rng.gen_range(0..base.cols());
    let (m, n) = (base.rows(), base.cols());
    let mut rows: Vec<Row> = Vec::with_capacity(m);
    for i in 0..m {
        let cell = base.u_cell_conditional(j, &column_prefix(&rows, j));
        let v = *weighted_choice(rng, &cell);
        let ev = fam.event(i, j);
        let mut accepted: Option<Row> = None;
        for _ in 0..cap {
            // Draw a full continuation from U given the history and the
            // fresh cell, column by column.
            let mut candidate: Matrix = rows.clone();
            candidate.extend(vec![vec![0; n]; m - i]);
            let mut ok = true;
            for t in 0..n {
                let mut fixed = column_prefix(&rows, t);
                if t == j {
                    fixed.push(v);
                }
                let tail: Vec<(Vec<Sym>, f64)> = base.columns[t]
                    .iter()
                    .filter(|(col, w)| *w > 0.0 && col[..fixed.len()] == *fixed)
                    .map(|(col, w)| (col[fixed.len()..].to_vec(), w))
                    .collect();
                if tail.is_empty() {
                    ok = false;
                    break;
                }
                let chosen = weighted_choice(rng, &tail).clone();
                for (offset, sym) in fixed[rows.len()..].iter().chain(chosen.iter()).enumerate() {
                    candidate[i + offset][t] = *sym;
                }
            }
            if ok && base.w.holds(&candidate) && ev.holds(&candidate) {
                accepted = Some(candidate[i].clone());
                break;
            }
        }
        match accepted {
            Some(row) => rows.push(row),
            None => return Err(SkewedError::CapExceeded { cap, row: i }),
        }
    }
    Ok((j, rows))
}

/// Exact per-round measurement ledger at a fixed history.
#[derive(Debug, Clone)]
pub struct RoundLedger {
    /// 1-based round index `i` (the history has `i - 1` rows).
    pub round: usize,
    /// Raw importance ratios: per column, the product over past rows of
    /// `U`'s cell conditional over the ideal's.
    pub omega_prime: Vec<f64>,
    /// Normalized weights with the event-ratio correction; these are
    /// proportional to the skewed posterior of the column index.
    pub omega: Vec<f64>,
    /// Conditional density of this round's event given the history.
    pub tdelta: Vec<f64>,
    /// Nominal (fixing-independent) density of this round's event.
    pub delta: Vec<f64>,
    /// Per-symbol ratio of `U`'s cell conditional to the event-conditioned
    /// ideal cell conditional, over the positive-mass symbols of `U`.
    pub beta: Vec<BTreeMap<Sym, f64>>,
    /// Symbols whose ratio stays at most [`BETA_CAP`].
    pub x_sets: Vec<BTreeSet<Sym>>,
    /// Mass of the capped symbol set under `U`'s cell conditional.
    pub x_mass: Vec<f64>,
    /// Columns whose density, weight, and capped mass are all in range.
    pub j_set: BTreeSet<usize>,
    /// Columns that stayed good through every earlier round.
    pub g_prev: BTreeSet<usize>,
    /// `g_prev` intersected with `j_set`: the candidates for this round.
    pub s_set: BTreeSet<usize>,
}

impl RoundLedger {
    /// Capped ratio: the per-symbol ratio if the symbol is in the capped
    /// set, else 0.
    pub fn beta_prime(&self, j: usize, sym: Sym) -> f64 {
        if self.x_sets[j].contains(&sym) {
            self.beta[j].get(&sym).copied().unwrap_or(0.0)
        } else {
            0.0
        }
    }

    /// Centered measurement at one `(row, indicator)` outcome, or `None`
    /// when the candidate set is empty.
    pub fn gamma(&self, x_i: &Row, y_i: &[bool]) -> Option<f64> {
        if self.s_set.is_empty() {
            return None;
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for &j in &self.s_set {
            if y_i[j] {
                num += self.omega[j] * self.beta_prime(j, x_i[j]) / self.tdelta[j];
            }
            den += self.omega[j] * self.x_mass[j];
        }
        Some(num / den - 1.0)
    }
}

/// Ledger slices for rounds `1..=upto` along the given history rows.
/// Slice `i` uses the first `i - 1` rows; `upto` may be `rows.len() + 1`.
fn ledger_path(
    base: &BaseModel,
    fam: &DenseFamily,
    report: &DensityReport,
    rows: &[Row],
    upto: usize,
) -> Result<Vec<RoundLedger>, SkewedError> {
    let n = base.cols();
    let mut out = Vec::with_capacity(upto);
    let mut good: BTreeSet<usize> = (0..n).collect();
    for i in 1..=upto {
        let prefix = &rows[..i - 1];
        let prefix_mass = base.ideal_mass_where(|x| extends(x, prefix));
        if prefix_mass == 0.0 {
            return Err(SkewedError::PrefixOutsideSupport { rows: i - 1 });
        }
        let mut omega_prime = vec![1.0; n];
        let mut correction = vec![1.0; n];
        for s in 0..i - 1 {
            let past = &rows[..s];
            let past_rowful = &rows[..=s];
            for j in 0..n {
                let v = rows[s][j];
                let u_cond = base
                    .u_cell_conditional(j, &column_prefix(past, j))
                    .into_iter()
                    .find(|(sym, _)| *sym == v)
                    .map_or(0.0, |(_, w)| w);
                let i_cond = base.ideal_cell_conditional(past, j, v);
                omega_prime[j] *= u_cond / i_cond;
                let ev = fam.event(s, j);
                let past_mass = base.ideal_mass_where(|x| extends(x, past));
                let e_less = base.ideal_mass_where(|x| extends(x, past) && ev.holds(x)) / past_mass;
                let cell_mass =
                    base.ideal_mass_where(|x| extends(x, past) && x[s][j] == v);
                let e_cell = base
                    .ideal_mass_where(|x| extends(x, past) && x[s][j] == v && ev.holds(x))
                    / cell_mass;
                let row_mass = base.ideal_mass_where(|x| extends(x, past_rowful));
                let e_row = base
                    .ideal_mass_where(|x| extends(x, past_rowful) && ev.holds(x))
                    / row_mass;
                correction[j] *= (e_less / e_cell) * (e_row / e_less);
            }
        }
        let omega_prime_sum: f64 = omega_prime.iter().sum();
        let mut omega = vec![0.0; n];
        let mut tdelta = vec![0.0; n];
        let mut beta = vec![BTreeMap::new(); n];
        let mut x_sets = vec![BTreeSet::new(); n];
        let mut x_mass = vec![0.0; n];
        for j in 0..n {
            omega[j] = n as f64 * omega_prime[j] / omega_prime_sum * correction[j];
            let ev = fam.event(i - 1, j);
            let e_mass = base.ideal_mass_where(|x| extends(x, prefix) && ev.holds(x));
            tdelta[j] = e_mass / prefix_mass;
            for (v, pu) in base.u_cell_conditional(j, &column_prefix(prefix, j)) {
                let num = base
                    .ideal_mass_where(|x| extends(x, prefix) && x[i - 1][j] == v && ev.holds(x));
                let b = if e_mass > 0.0 && num > 0.0 { pu / (num / e_mass) } else { f64::INFINITY };
                beta[j].insert(v, b);
                if b <= BETA_CAP + CMP_EPS {
                    x_sets[j].insert(v);
                    x_mass[j] += pu;
                }
            }
        }
        let j_set: BTreeSet<usize> = (0..n)
            .filter(|&j| {
                tdelta[j] >= DELTA_SLACK * report.delta_grid[i - 1][j] - CMP_EPS
                    && (omega[j] - 1.0).abs() <= OMEGA_SLACK + CMP_EPS
                    && x_mass[j] >= GOOD_FRACTION - CMP_EPS
            })
            .collect();
        let g_prev = good.clone();
        let s_set: BTreeSet<usize> = g_prev.intersection(&j_set).copied().collect();
        let slice = RoundLedger {
            round: i,
            omega_prime,
            omega,
            tdelta,
            delta: report.delta_grid[i - 1].clone(),
            beta,
            x_sets,
            x_mass,
            j_set,
            g_prev,
            s_set,
        };
        if i <= rows.len() {
            good = slice
                .s_set
                .iter()
                .copied()
                .filter(|&j| slice.x_sets[j].contains(&rows[i - 1][j]))
                .collect();
        }
        out.push(slice);
    }
    Ok(out)
}

/// Exact measurement ledger for round `prefix.len() + 1` at the given
/// history. The history must have positive ideal probability.
pub fn weight_ledger(
    base: &BaseModel,
    fam: &DenseFamily,
    prefix: &[Row],
) -> Result<RoundLedger, SkewedError> {
    let report = validate_density(base, fam)?;
    let mut path = ledger_path(base, fam, &report, prefix, prefix.len() + 1)?;
    Ok(path.pop().expect("requested round is always produced"))
}

/// Centered measurement `gamma` for round `prefix.len() + 1` at one
/// `(row, indicator-row)` outcome. Errors when the candidate column set is
/// empty (the measurement is undefined there).
pub fn gamma_eval(
    base: &BaseModel,
    fam: &DenseFamily,
    prefix: &[Row],
    x_i: &Row,
    y_i: &[bool],
) -> Result<f64, SkewedError> {
    let n = base.cols();
    if x_i.len() != n {
        return Err(SkewedError::RowShape { expect: n, got: x_i.len() });
    }
    if y_i.len() != n {
        return Err(SkewedError::RowShape { expect: n, got: y_i.len() });
    }
    let ledger = weight_ledger(base, fam, prefix)?;
    ledger
        .gamma(x_i, y_i)
        .ok_or(SkewedError::EmptyGoodSet { round: prefix.len() + 1 })
}

/// Per-round good-event evaluations on one matrix.
#[derive(Debug, Clone)]
pub struct EventFlags {
    /// Candidate-set size stayed at the required fraction of the columns.
    pub g: Vec<bool>,
    /// The centered measurement stayed within [`GAMMA_CAP`] on this matrix.
    pub t: Vec<bool>,
    /// The ideal probability of the `t` flag given the history is at least
    /// `1 - 1/n`.
    pub t_prime: Vec<bool>,
    /// Conjunction `g && t && t_prime`.
    pub a: Vec<bool>,
    /// Whether the designated column stayed good, when one was supplied.
    pub b: Option<Vec<bool>>,
    /// Sampled continuation coin (one with the exact skewed probability
    /// that the column index stays good given the history).
    pub tb: Vec<bool>,
    /// Exact success probability behind each `tb` coin.
    pub tb_prob: Vec<f64>,
    /// Conjunction `a && tb`.
    pub c: Vec<bool>,
}

/// Skewed probability that the column index stays good through round
/// `prefix.len() + 1` given the history and that it stayed good so far.
fn tb_prob_from(
    q_joint: &FinitePmf<(usize, Matrix)>,
    slice: &RoundLedger,
    prefix: &[Row],
) -> f64 {
    let i = prefix.len();
    let mut num = 0.0;
    let mut den = 0.0;
    for ((j, x), w) in q_joint.iter() {
        if w > 0.0 && extends(x, prefix) {
            if slice.g_prev.contains(j) {
                den += w;
            }
            if slice.s_set.contains(j) && slice.x_sets[*j].contains(&x[i][*j]) {
                num += w;
            }
        }
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Exact skewed probability `Q[column stays good at round prefix.len() + 1 |
/// history, stayed good so far]`; 0 when the conditioning has zero mass.
pub fn tb_probability(
    base: &BaseModel,
    fam: &DenseFamily,
    prefix: &[Row],
) -> Result<f64, SkewedError> {
    let report = validate_density(base, fam)?;
    let q_joint = skewed_pmf_exact(base, fam)?;
    let path = ledger_path(base, fam, &report, prefix, prefix.len() + 1)?;
    Ok(tb_prob_from(&q_joint, path.last().expect("slice produced"), prefix))
}

fn flags_impl(
    base: &BaseModel,
    fam: &DenseFamily,
    x: &Matrix,
    tracked: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<EventFlags, SkewedError> {
    let (m, n) = (base.rows(), base.cols());
    let report = validate_density(base, fam)?;
    let q_joint = skewed_pmf_exact(base, fam)?;
    let path = ledger_path(base, fam, &report, x, m)?;
    let ys = event_indicator_rows(fam, x);
    let mut flags = EventFlags {
        g: Vec::new(),
        t: Vec::new(),
        t_prime: Vec::new(),
        a: Vec::new(),
        b: tracked.map(|_| Vec::new()),
        tb: Vec::new(),
        tb_prob: Vec::new(),
        c: Vec::new(),
    };
    let mut tracked_good = true;
    for i in 1..=m {
        let slice = &path[i - 1];
        let prefix = &x[..i - 1];
        let g = slice.s_set.len() as f64 >= GOOD_FRACTION * n as f64 - CMP_EPS;
        // An undefined measurement (empty candidate set) cannot certify the
        // in-range flag; it counts as false. `g` is false there as well.
        let t = matches!(slice.gamma(&x[i - 1], &ys[i - 1]), Some(v) if v.abs() <= GAMMA_CAP + CMP_EPS);
        let prefix_mass = base.ideal_mass_where(|z| extends(z, prefix));
        let t_mass: f64 = base
            .ideal
            .iter()
            .filter(|(z, w)| {
                *w > 0.0 && extends(z, prefix) && {
                    let yz = event_indicator_rows(fam, z);
                    matches!(slice.gamma(&z[i - 1], &yz[i - 1]), Some(v) if v.abs() <= GAMMA_CAP + CMP_EPS)
                }
            })
            .map(|(_, w)| w)
            .sum::<f64>()
            / prefix_mass;
        let t_prime = t_mass >= 1.0 - 1.0 / n as f64 - CMP_EPS;
        let a = g && t && t_prime;
        let tb_p = tb_prob_from(&q_joint, slice, prefix);
        let tb = rng.gen_bool(tb_p.clamp(0.0, 1.0));
        flags.g.push(g);
        flags.t.push(t);
        flags.t_prime.push(t_prime);
        flags.a.push(a);
        flags.tb.push(tb);
        flags.tb_prob.push(tb_p);
        flags.c.push(a && tb);
        if let (Some(j), Some(b)) = (tracked, flags.b.as_mut()) {
            tracked_good = tracked_good
                && slice.s_set.contains(&j)
                && slice.x_sets[j].contains(&x[i - 1][j]);
            b.push(tracked_good);
        }
    }
    Ok(flags)
}

/// Evaluates the per-round good events on a matrix with positive ideal
/// probability, drawing the continuation coins from `rng`.
pub fn event_flags(
    base: &BaseModel,
    fam: &DenseFamily,
    x: &Matrix,
    rng: &mut ChaCha8Rng,
) -> Result<EventFlags, SkewedError> {
    flags_impl(base, fam, x, None, rng)
}

/// [`event_flags`] plus the per-round indicator that a designated column
/// stays good.
pub fn event_flags_with_column(
    base: &BaseModel,
    fam: &DenseFamily,
    x: &Matrix,
    j: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EventFlags, SkewedError> {
    flags_impl(base, fam, x, Some(j), rng)
}

/// Token of the bit-extended, possibly truncated transcripts used by the
/// cut certificate.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum CutTok {
    /// Round-acceptance bit.
    Flag(bool),
    /// A matrix row.
    Row(Row),
    /// Padding symbol outside the row universe, emitted after the first
    /// failed round.
    Stop,
}

/// Exact smooth-divergence witness between the ideal and skewed matrix laws.
#[derive(Debug, Clone)]
pub struct FcutCertificate {
    /// Probability, under the ideal extension, that some round bit fails;
    /// this is the smoothing budget of the witness.
    pub alpha: f64,
    /// Divergence between the truncated extensions.
    pub div: ExtReal,
    /// Per-round conditional divergences; their sum dominates `div`.
    pub round_terms: Vec<ExtReal>,
    /// Truncated ideal-side extension.
    pub cut_p: FinitePmf<Vec<CutTok>>,
    /// Truncated skewed-side extension.
    pub cut_q: FinitePmf<Vec<CutTok>>,
}

/// Per-history quantities cached while building the certificate.
struct PrefixInfo {
    slice: RoundLedger,
    /// Ideal probability that the measurement flag holds given the history.
    t_mass: f64,
    tb_prob: f64,
}

struct CertCtx<'a> {
    base: &'a BaseModel,
    fam: &'a DenseFamily,
    report: DensityReport,
    q_joint: FinitePmf<(usize, Matrix)>,
    infos: BTreeMap<Vec<Row>, PrefixInfo>,
    accepts: BTreeMap<Matrix, Vec<bool>>,
}

impl<'a> CertCtx<'a> {
    fn info(&mut self, prefix: &[Row]) -> Result<&PrefixInfo, SkewedError> {
        if !self.infos.contains_key(prefix) {
            let path =
                ledger_path(self.base, self.fam, &self.report, prefix, prefix.len() + 1)?;
            let slice = path.into_iter().last().expect("slice produced");
            let idl_mass = self.base.ideal_mass_where(|z| extends(z, prefix));
            let i = prefix.len();
            let t_mass: f64 = self
                .base
                .ideal
                .iter()
                .filter(|(z, w)| {
                    *w > 0.0 && extends(z, prefix) && {
                        let yz = event_indicator_rows(self.fam, z);
                        matches!(slice.gamma(&z[i], &yz[i]), Some(v) if v.abs() <= GAMMA_CAP + CMP_EPS)
                    }
                })
                .map(|(_, w)| w)
                .sum::<f64>()
                / idl_mass;
            let tb_prob = tb_prob_from(&self.q_joint, &slice, prefix);
            self.infos
                .insert(prefix.to_vec(), PrefixInfo { slice, t_mass, tb_prob });
        }
        Ok(self.infos.get(prefix).expect("just inserted"))
    }

    /// Deterministic per-round acceptance bits of one matrix: round `i` is
    /// accepted when the candidate set is large, the measurement is in
    /// range, and the in-range probability given the history is high.
    fn accept_bits(&mut self, x: &Matrix) -> Result<Vec<bool>, SkewedError> {
        if let Some(bits) = self.accepts.get(x) {
            return Ok(bits.clone());
        }
        let (m, n) = (self.base.rows(), self.base.cols());
        let ys = event_indicator_rows(self.fam, x);
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let info = self.info(&x[..i])?;
            let g = info.slice.s_set.len() as f64 >= GOOD_FRACTION * n as f64 - CMP_EPS;
            let t = matches!(info.slice.gamma(&x[i], &ys[i]), Some(v) if v.abs() <= GAMMA_CAP + CMP_EPS);
            let t_prime = info.t_mass >= 1.0 - 1.0 / n as f64 - CMP_EPS;
            out.push(g && t && t_prime);
        }
        self.accepts.insert(x.clone(), out.clone());
        Ok(out)
    }

    /// Good-column set after one more round along `x`: the candidates of
    /// the round whose slice is at history `x[..i]`, kept when their own
    /// cell lands in the capped set.
    fn good_set_at(&mut self, x: &Matrix, i: usize) -> Result<BTreeSet<usize>, SkewedError> {
        let info = self.info(&x[..i])?;
        Ok(info
            .slice
            .s_set
            .iter()
            .copied()
            .filter(|&j| info.slice.x_sets[j].contains(&x[i][j]))
            .collect())
    }
}

fn cut_sequence(x: &Matrix, upto_fail: Option<usize>) -> Vec<CutTok> {
    let m = x.len();
    let mut seq = Vec::with_capacity(2 * m);
    match upto_fail {
        None => {
            for row in x.iter().take(m) {
                seq.push(CutTok::Flag(true));
                seq.push(CutTok::Row(row.clone()));
            }
        }
        Some(i) => {
            debug_assert!(i < m);
            for row in x.iter().take(i) {
                seq.push(CutTok::Flag(true));
                seq.push(CutTok::Row(row.clone()));
            }
            seq.push(CutTok::Flag(false));
            seq.extend(std::iter::repeat(CutTok::Stop).take(2 * (m - i) - 1));
        }
    }
    seq
}

/// Adds to `cut` and `groups` the truncated extension of one matrix whose
/// per-round acceptance bits have probabilities `bits`.
fn accumulate_extension(
    x: &Matrix,
    mass: f64,
    bits: &[f64],
    cut: &mut BTreeMap<Vec<CutTok>, f64>,
    groups: &mut [BTreeMap<Vec<Row>, BTreeMap<Row, f64>>],
) -> f64 {
    let m = x.len();
    let mut prefix_prob = mass;
    for i in 0..m {
        let p = bits[i].clamp(0.0, 1.0);
        let fail = prefix_prob * (1.0 - p);
        if fail > 0.0 {
            *cut.entry(cut_sequence(x, Some(i))).or_insert(0.0) += fail;
        }
        prefix_prob *= p;
        if prefix_prob > 0.0 {
            *groups[i]
                .entry(x[..i].to_vec())
                .or_insert_with(BTreeMap::new)
                .entry(x[i].clone())
                .or_insert(0.0) += prefix_prob;
        }
        if prefix_prob == 0.0 {
            break;
        }
    }
    if prefix_prob > 0.0 {
        *cut.entry(cut_sequence(x, None)).or_insert(0.0) += prefix_prob;
    }
    prefix_prob
}

/// Builds the cut certificate: bit extensions of the ideal and skewed laws
/// whose round-`i` bit succeeds with the cross probabilities required for
/// the truncated transcripts to witness the smooth-divergence bound, plus
/// the per-round conditional divergences that dominate it.
pub fn build_fcut_certificate(
    base: &BaseModel,
    fam: &DenseFamily,
) -> Result<FcutCertificate, SkewedError> {
    let m = base.rows();
    let report = validate_density(base, fam)?;
    let q_joint = skewed_pmf_exact(base, fam)?;
    let q_x: FinitePmf<Matrix> = q_joint.map(|(_, x)| x.clone());
    let mut ctx = CertCtx {
        base,
        fam,
        report,
        q_joint,
        infos: BTreeMap::new(),
        accepts: BTreeMap::new(),
    };

    let mut cut_p: BTreeMap<Vec<CutTok>, f64> = BTreeMap::new();
    let mut cut_q: BTreeMap<Vec<CutTok>, f64> = BTreeMap::new();
    let mut p_groups: Vec<BTreeMap<Vec<Row>, BTreeMap<Row, f64>>> = vec![BTreeMap::new(); m];
    let mut q_groups: Vec<BTreeMap<Vec<Row>, BTreeMap<Row, f64>>> = vec![BTreeMap::new(); m];
    let mut survive = 0.0;

    // Ideal-side extension: the round-i bit needs this matrix to be accepted
    // through round i and the skewed law to keep its column good given the
    // same history.
    let ideal_entries: Vec<(Matrix, f64)> = base
        .ideal
        .iter()
        .filter(|(_, w)| *w > 0.0)
        .map(|(x, w)| (x.clone(), w))
        .collect();
    for (x, mass) in &ideal_entries {
        let accept = ctx.accept_bits(x)?;
        let mut bits = Vec::with_capacity(m);
        let mut acc_so_far = true;
        for i in 0..m {
            acc_so_far = acc_so_far && accept[i];
            let tb = ctx.info(&x[..i])?.tb_prob;
            bits.push(if acc_so_far { tb } else { 0.0 });
        }
        survive += accumulate_extension(x, *mass, &bits, &mut cut_p, &mut p_groups);
    }
    let alpha = 1.0 - survive;

    // Skewed-side extension: the round-i bit needs the ideal acceptance
    // probability given the history and this matrix's column to stay good.
    for (x, mass) in q_x.iter() {
        if mass <= 0.0 {
            continue;
        }
        let mut bits = Vec::with_capacity(m);
        let mut defined = true;
        let mut good_prev: Option<BTreeSet<usize>> = None;
        for i in 0..m {
            if !defined || ctx.base.ideal_mass_where(|z| extends(z, &x[..i])) == 0.0 {
                defined = false;
                bits.push(0.0);
                continue;
            }
            let good_i = ctx.good_set_at(x, i)?;
            // Ideal probability of acceptance at round i given the history
            // and acceptance so far.
            let mut num = 0.0;
            let mut den = 0.0;
            for (z, w) in ideal_entries.iter() {
                if extends(z, &x[..i]) {
                    let accept = ctx.accept_bits(z)?;
                    if accept[..i].iter().all(|&b| b) {
                        den += w;
                        if accept[i] {
                            num += w;
                        }
                    }
                }
            }
            let pa = if den > 0.0 { num / den } else { 0.0 };
            // Skewed probability that the column stays good at round i given
            // the full matrix and good-so-far.
            let num_q: f64 = good_i.iter().map(|j| ctx.q_joint.prob(&(*j, x.clone()))).sum();
            let den_q: f64 = match &good_prev {
                None => q_x.prob(x),
                Some(g) => g.iter().map(|j| ctx.q_joint.prob(&(*j, x.clone()))).sum(),
            };
            let qb = if den_q > 0.0 { num_q / den_q } else { 0.0 };
            bits.push(pa * qb);
            good_prev = Some(good_i);
        }
        accumulate_extension(x, mass, &bits, &mut cut_q, &mut q_groups);
    }

    let cut_p = FinitePmf::from_weights(cut_p)?;
    let cut_q = FinitePmf::from_weights(cut_q)?;
    let div = kl(&cut_p, &cut_q);

    let mut round_terms = Vec::with_capacity(m);
    for i in 0..m {
        let total_p: f64 =
            p_groups[i].values().flat_map(|g| g.values()).sum();
        if total_p == 0.0 {
            round_terms.push(ExtReal::ZERO);
            continue;
        }
        let mut term = ExtReal::ZERO;
        for (prefix, rows_p) in &p_groups[i] {
            let group_mass: f64 = rows_p.values().sum();
            let p_pmf = FinitePmf::from_weights(
                rows_p.iter().map(|(r, w)| (r.clone(), *w)),
            )?;
            let d = match q_groups[i].get(prefix) {
                Some(rows_q) => {
                    let q_pmf = FinitePmf::from_weights(
                        rows_q.iter().map(|(r, w)| (r.clone(), *w)),
                    )?;
                    kl(&p_pmf, &q_pmf)
                }
                None => ExtReal::INFINITY,
            };
            term = term + d.scale(group_mass / total_p);
        }
        round_terms.push(term);
    }

    Ok(FcutCertificate { alpha, div, round_terms, cut_p, cut_q })
}

/// Per-round divergence budget: `d_i` is the conditional divergence of the
/// ideal `(row, indicator-row)` law from the unconditioned one, averaged
/// over ideal histories; returns `(per-round, total)`.
pub fn divergence_budget(
    base: &BaseModel,
    fam: &DenseFamily,
) -> Result<(Vec<f64>, f64), SkewedError> {
    validate_density(base, fam)?;
    let m = base.rows();
    let mut per_round = Vec::with_capacity(m);
    for i in 0..m {
        // Group the ideal mass by history.
        let mut prefixes: BTreeMap<Vec<Row>, f64> = BTreeMap::new();
        for (x, w) in base.ideal.iter() {
            if w > 0.0 {
                *prefixes.entry(x[..i].to_vec()).or_insert(0.0) += w;
            }
        }
        let mut d_i = 0.0;
        for (prefix, prefix_mass) in prefixes {
            let pair_of = |x: &Matrix| {
                let ys = event_indicator_rows(fam, x);
                (x[i].clone(), ys[i].clone())
            };
            let idl_pairs: Vec<((Row, Vec<bool>), f64)> = base
                .ideal
                .iter()
                .filter(|(x, w)| *w > 0.0 && extends(x, &prefix))
                .map(|(x, w)| (pair_of(x), w))
                .collect();
            let u_pairs: Vec<((Row, Vec<bool>), f64)> = base
                .u_joint
                .iter()
                .filter(|(x, w)| *w > 0.0 && extends(x, &prefix))
                .map(|(x, w)| (pair_of(x), w))
                .collect();
            let p = FinitePmf::from_weights(idl_pairs)?;
            let q = FinitePmf::from_weights(u_pairs)?;
            d_i += prefix_mass * kl(&p, &q).value();
        }
        per_round.push(d_i);
    }
    let total = per_round.iter().sum();
    Ok((per_round, total))
}

/// Ratio diagnostics along one matrix: per-cell and per-row density ratios
/// and the multiplicative chains they drive.
#[derive(Debug, Clone)]
pub struct ExtLedger {
    /// `U`-to-ideal cell-conditional ratio minus 1.
    pub alpha: Vec<Vec<f64>>,
    /// History-conditional density over nominal density, minus 1.
    pub rho: Vec<Vec<f64>>,
    /// Row-conditional density over nominal density, minus 1.
    pub tau: Vec<Vec<f64>>,
    /// Cell-conditional density over nominal density, minus 1.
    pub xi: Vec<Vec<f64>>,
    /// Chain of cell-conditional over history-conditional density ratios.
    pub u_seq: Vec<Vec<f64>>,
    /// Chain of row-conditional over history-conditional density ratios.
    pub v_seq: Vec<Vec<f64>>,
    /// Normalized raw importance weights (columns times raw weight over
    /// their sum).
    pub r_seq: Vec<Vec<f64>>,
}

/// Computes the ratio diagnostics at a matrix with positive ideal mass.
pub fn ext_ledger(
    base: &BaseModel,
    fam: &DenseFamily,
    x: &Matrix,
) -> Result<ExtLedger, SkewedError> {
    let report = validate_density(base, fam)?;
    if base.ideal.prob(x) == 0.0 {
        return Err(SkewedError::PrefixOutsideSupport { rows: base.rows() });
    }
    let (m, n) = (base.rows(), base.cols());
    let mut led = ExtLedger {
        alpha: vec![vec![0.0; n]; m],
        rho: vec![vec![0.0; n]; m],
        tau: vec![vec![0.0; n]; m],
        xi: vec![vec![0.0; n]; m],
        u_seq: vec![vec![1.0; n]; m],
        v_seq: vec![vec![1.0; n]; m],
        r_seq: vec![vec![1.0; n]; m],
    };
    for i in 0..m {
        let prefix = &x[..i];
        let rowful = &x[..=i];
        let prefix_mass = base.ideal_mass_where(|z| extends(z, prefix));
        let rowful_mass = base.ideal_mass_where(|z| extends(z, rowful));
        for j in 0..n {
            let v = x[i][j];
            let delta = report.delta_grid[i][j];
            let ev = fam.event(i, j);
            let u_cond = base
                .u_cell_conditional(j, &column_prefix(prefix, j))
                .into_iter()
                .find(|(sym, _)| *sym == v)
                .map_or(0.0, |(_, w)| w);
            let i_cond = base.ideal_cell_conditional(prefix, j, v);
            led.alpha[i][j] = u_cond / i_cond - 1.0;
            let e_less =
                base.ideal_mass_where(|z| extends(z, prefix) && ev.holds(z)) / prefix_mass;
            let cell_mass = base.ideal_mass_where(|z| extends(z, prefix) && z[i][j] == v);
            let e_cell = base
                .ideal_mass_where(|z| extends(z, prefix) && z[i][j] == v && ev.holds(z))
                / cell_mass;
            let e_row =
                base.ideal_mass_where(|z| extends(z, rowful) && ev.holds(z)) / rowful_mass;
            led.rho[i][j] = e_less / delta - 1.0;
            led.tau[i][j] = e_row / delta - 1.0;
            led.xi[i][j] = e_cell / delta - 1.0;
            let u_prev = if i == 0 { 1.0 } else { led.u_seq[i - 1][j] };
            let v_prev = if i == 0 { 1.0 } else { led.v_seq[i - 1][j] };
            led.u_seq[i][j] = u_prev * e_cell / e_less;
            led.v_seq[i][j] = v_prev * e_row / e_less;
        }
        // Normalized raw importance weights at this round.
        let mut omega_prime = vec![1.0; n];
        for s in 0..i {
            let past = &x[..s];
            for (j, op) in omega_prime.iter_mut().enumerate() {
                let v = x[s][j];
                let u_cond = base
                    .u_cell_conditional(j, &column_prefix(past, j))
                    .into_iter()
                    .find(|(sym, _)| *sym == v)
                    .map_or(0.0, |(_, w)| w);
                *op *= u_cond / base.ideal_cell_conditional(past, j, v);
            }
        }
        let sum: f64 = omega_prime.iter().sum();
        for j in 0..n {
            led.r_seq[i][j] = n as f64 * omega_prime[j] / sum;
        }
    }
    Ok(led)
}

/// Probability, over an ideal matrix and a skewed posterior column index,
/// that some round's event-conditioned `W` probability falls below
/// `U[W] / t`: the chance a conditional-resampling loop becomes slow.
pub fn bad_t_probability(
    base: &BaseModel,
    fam: &DenseFamily,
    t: f64,
) -> Result<f64, SkewedError> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(SkewedError::BadThreshold(t));
    }
    let q_joint = skewed_pmf_exact(base, fam)?;
    let w_mass = base.w_mass();
    let threshold = w_mass / t;
    let mut p_t = 0.0;
    for (x, mass) in base.ideal.iter() {
        if mass <= 0.0 {
            continue;
        }
        let q_x: f64 = (0..base.cols()).map(|j| q_joint.prob(&(j, x.clone()))).sum();
        if q_x == 0.0 {
            return Err(SkewedError::UnreachableConditioning {
                row: 0,
                col: 0,
                detail: "matrix has positive ideal mass but zero skewed mass".into(),
            });
        }
        for j in 0..base.cols() {
            let qj = q_joint.prob(&(j, x.clone()));
            if qj == 0.0 {
                continue;
            }
            let mut bad = false;
            for i in 0..base.rows() {
                let prefix = &x[..i];
                let v = x[i][j];
                let ev = fam.event(i, j);
                let slab = |z: &Matrix| extends(z, prefix) && z[i][j] == v && ev.holds(z);
                let denom = base.u_mass_where(&slab);
                if denom == 0.0 {
                    return Err(SkewedError::UnreachableConditioning {
                        row: i,
                        col: j,
                        detail: "skewed-reachable state with an empty resampling target".into(),
                    });
                }
                let cond = base.u_mass_where(|z| slab(z) && base.w.holds(z)) / denom;
                if cond < threshold {
                    bad = true;
                    break;
                }
            }
            if bad {
                p_t += mass * qj / q_x;
            }
        }
    }
    Ok(p_t)
}

/// Superset of knobs for [`random_instance`].
#[derive(Debug, Clone)]
pub struct InstanceOptions {
    /// Maximum number of rows (at least 1).
    pub max_rows: usize,
    /// Maximum number of columns (at least 1).
    pub max_cols: usize,
    /// Force `W` to be the full event.
    pub full_w: bool,
    /// Restrict the family to the early-stop shape (next-row symbol 0).
    pub termination_only: bool,
}

impl Default for InstanceOptions {
    fn default() -> Self {
        Self { max_rows: 3, max_cols: 3, full_w: false, termination_only: false }
    }
}

/// Draws a random binary-cell instance (independent Bernoulli cells, random
/// `W` with mass at least 0.1, random dense family), retrying until the
/// skewed pmf is well-defined. Deterministic in the rng stream.
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    opts: &InstanceOptions,
) -> (BaseModel, DenseFamily) {
    loop {
        let m = rng.gen_range(1..=opts.max_rows.max(1));
        let n = rng.gen_range(1..=opts.max_cols.max(1));
        let columns: Vec<FinitePmf<Vec<Sym>>> = (0..n)
            .map(|_| {
                let parts: Vec<FinitePmf<Sym>> = (0..m)
                    .map(|_| {
                        let p = rng.gen_range(0.25..=0.75);
                        FinitePmf::two_point(0, 1, p).expect("probability in range")
                    })
                    .collect();
                product(&parts)
            })
            .collect();
        let w = if opts.full_w {
            full_event()
        } else {
            let keep_prob = if rng.gen_bool(0.5) { 0.9 } else { 0.6 };
            let universe: Vec<Matrix> = product(&columns)
                .map(|cols| {
                    (0..m)
                        .map(|i| cols.iter().map(|c| c[i]).collect::<Row>())
                        .collect::<Matrix>()
                })
                .outcomes()
                .cloned()
                .collect();
            let kept: BTreeSet<Matrix> = universe
                .into_iter()
                .filter(|_| rng.gen_bool(keep_prob))
                .collect();
            EventPredicate::new("random-subset", move |x: &Matrix| kept.contains(x))
        };
        let base = match BaseModel::new(columns, w) {
            Ok(b) => b,
            Err(_) => continue,
        };
        if base.w_mass() < 0.1 {
            continue;
        }
        let grid: Vec<Vec<CellEvent>> = (0..m)
            .map(|i| {
                (0..n)
                    .map(|_| {
                        if i + 1 >= m {
                            return CellEvent::Full;
                        }
                        if opts.termination_only {
                            return CellEvent::RowIn { row: i + 1, values: BTreeSet::from([0]) };
                        }
                        match rng.gen_range(0..10) {
                            0..=5 => CellEvent::RowIn { row: i + 1, values: BTreeSet::from([0]) },
                            6..=7 => {
                                let vals = if rng.gen_bool(0.5) {
                                    BTreeSet::from([1])
                                } else {
                                    BTreeSet::from([0, 1])
                                };
                                CellEvent::RowIn { row: i + 1, values: vals }
                            }
                            8 if i + 2 < m => {
                                CellEvent::RowIn { row: i + 2, values: BTreeSet::from([0]) }
                            }
                            _ => CellEvent::Full,
                        }
                    })
                    .collect()
            })
            .collect();
        let fam = DenseFamily::from_cells(grid);
        if validate_density(&base, &fam).is_err() {
            continue;
        }
        if skewed_pmf_exact(&base, &fam).is_ok() {
            return (base, fam);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::total_variation;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn rng64(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Uniform binary cells, one row, two columns, conditioned on equality.
    fn cells_agree() -> (BaseModel, DenseFamily) {
        let base = BaseModel::new(
            uniform_columns(1, 2, 2),
            EventPredicate::new("cells agree", |x: &Matrix| x[0][0] == x[0][1]),
        )
        .expect("valid model");
        let fam = DenseFamily::termination(1, 2);
        (base, fam)
    }

    /// Uniform binary cells, two rows, two columns, conditioned on equal
    /// column sums, with the early-stop family. The skewed law itself is
    /// ill-defined here (a fresh cell can force an impossible column sum);
    /// the pair still exercises the ledger and validation paths.
    fn sums_equal() -> (BaseModel, DenseFamily) {
        let base = BaseModel::new(
            uniform_columns(2, 2, 2),
            EventPredicate::new("column sums equal", |x: &Matrix| {
                x[0][0] + x[1][0] == x[0][1] + x[1][1]
            }),
        )
        .expect("valid model");
        let fam = DenseFamily::termination(2, 2);
        (base, fam)
    }

    /// Uniform binary cells, two rows, two columns, conditioned on the
    /// second row containing a one, with the early-stop family. Every
    /// history, fresh symbol, and round event stays reachable, so the
    /// skewed law is well defined.
    fn second_row_has_one() -> (BaseModel, DenseFamily) {
        let base = BaseModel::new(
            uniform_columns(2, 2, 2),
            EventPredicate::new("second row has a one", |x: &Matrix| {
                x[1][0] == 1 || x[1][1] == 1
            }),
        )
        .expect("valid model");
        let fam = DenseFamily::termination(2, 2);
        (base, fam)
    }

    fn q_column_marginal(q: &FinitePmf<(usize, Matrix)>, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for ((j, _), w) in q.iter() {
            out[*j] += w;
        }
        out
    }

    #[test]
    fn single_round_pmf_matches_hand_enumeration() {
        let (base, fam) = cells_agree();
        let q = skewed_pmf_exact(&base, &fam).expect("well defined");
        assert_eq!(q.support_len(), 4);
        for j in 0..2 {
            for v in 0..2u16 {
                let x = vec![vec![v, v]];
                assert!((q.prob(&(j, x)) - 0.25).abs() < 1e-12);
            }
        }
        let q_x: FinitePmf<Matrix> = q.map(|(_, x)| x.clone());
        assert!(total_variation(&q_x, ideal_pmf(&base)) < 1e-12);
    }

    #[test]
    fn literal_sparse_event_yields_unreachable_conditioning() {
        let base = BaseModel::new(
            uniform_columns(1, 2, 2),
            EventPredicate::new("first cell is one", |x: &Matrix| x[0][0] == 1),
        )
        .expect("valid model");
        let fam = DenseFamily::termination(1, 2);
        let err = skewed_pmf_exact(&base, &fam).unwrap_err();
        assert!(matches!(err, SkewedError::UnreachableConditioning { row: 0, col: 0, .. }));
    }

    #[test]
    fn two_round_ideal_matches_hand_count() {
        let (base, _) = sums_equal();
        let ideal = ideal_pmf(&base);
        assert_eq!(ideal.support_len(), 6);
        for (_, w) in ideal.iter().filter(|(_, w)| *w > 0.0) {
            assert!((w - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_round_budget_hits_its_cap_exactly() {
        let (base, fam) = cells_agree();
        let (per_round, total) = divergence_budget(&base, &fam).expect("well defined");
        assert_eq!(per_round.len(), 1);
        assert!((total - std::f64::consts::LN_2).abs() < 1e-12);
        let cap = base.rows() as f64 * (1.0 / base.w_mass()).ln();
        assert!(total <= cap + 1e-9);
    }

    #[test]
    fn round_one_weights_are_unit() {
        let (base, fam) = sums_equal();
        let led = weight_ledger(&base, &fam, &[]).expect("well defined");
        assert_eq!(led.round, 1);
        for j in 0..2 {
            assert!((led.omega[j] - 1.0).abs() < 1e-12);
            assert!((led.omega_prime[j] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ledger_rejects_prefix_outside_support() {
        let (base, fam) = cells_agree();
        let err = weight_ledger(&base, &fam, &[vec![0, 1]]).unwrap_err();
        assert!(matches!(err, SkewedError::PrefixOutsideSupport { rows: 1 }));
    }

    #[test]
    fn empty_candidate_set_is_an_error() {
        let base = BaseModel::new(
            uniform_columns(2, 1, 2),
            EventPredicate::new("some one", |x: &Matrix| x[1][0] == 1 || x[0][0] == 1),
        )
        .expect("valid model");
        let fam = DenseFamily::termination(2, 1);
        // The early-stop event asks for a zero in row 1, but the ideal
        // leaves it probability 1/3 < 0.9 * (1/2): every column is filtered.
        let err = gamma_eval(&base, &fam, &[], &vec![0], &[true]).unwrap_err();
        assert!(matches!(err, SkewedError::EmptyGoodSet { round: 1 }));
        // The same tension makes the skewed law itself ill-defined here.
        let err = skewed_pmf_exact(&base, &fam).unwrap_err();
        assert!(matches!(err, SkewedError::UnreachableConditioning { row: 0, col: 0, .. }));
    }

    #[test]
    fn full_conditioning_with_full_family_is_degenerate() {
        let base = BaseModel::new(uniform_columns(2, 2, 2), full_event()).expect("valid model");
        let fam = DenseFamily::full(2, 2);
        let q = skewed_pmf_exact(&base, &fam).expect("well defined");
        // The skewed law collapses to (uniform index) x (base law).
        for ((_, x), w) in q.iter() {
            assert!((w - 0.5 * base.u_joint().prob(x)).abs() < 1e-12);
        }
        let x = vec![vec![0, 1], vec![1, 0]];
        let led = weight_ledger(&base, &fam, &x[..1]).expect("well defined");
        for j in 0..2 {
            assert!((led.omega[j] - 1.0).abs() < 1e-12);
            assert!((led.tdelta[j] - 1.0).abs() < 1e-12);
            assert!((led.x_mass[j] - 1.0).abs() < 1e-12);
        }
        let g = gamma_eval(&base, &fam, &x[..1], &x[1], &[true, true]).expect("defined");
        assert!(g.abs() < 1e-12);
        let (_, total) = divergence_budget(&base, &fam).expect("well defined");
        assert!(total.abs() < 1e-12);
        let cert = build_fcut_certificate(&base, &fam).expect("well defined");
        assert!(cert.alpha.abs() < 1e-12);
        assert!(cert.div.value().abs() < 1e-12);
        let led = ext_ledger(&base, &fam, &x).expect("well defined");
        for i in 0..2 {
            for j in 0..2 {
                assert!(led.alpha[i][j].abs() < 1e-12);
                assert!(led.rho[i][j].abs() < 1e-12);
                assert!((led.u_seq[i][j] - 1.0).abs() < 1e-12);
                assert!((led.v_seq[i][j] - 1.0).abs() < 1e-12);
                assert!((led.r_seq[i][j] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_conditioning_with_early_stop_family_moves_the_measurement() {
        let base = BaseModel::new(uniform_columns(3, 2, 2), full_event()).expect("valid model");
        let fam = DenseFamily::termination(3, 2);
        // Weights and densities stay flat: the event reads the next row,
        // which is independent of everything the ledger conditions on.
        let x = vec![vec![0, 1], vec![0, 0], vec![1, 1]];
        let led = weight_ledger(&base, &fam, &x[..1]).expect("well defined");
        for j in 0..2 {
            assert!((led.omega[j] - 1.0).abs() < 1e-12);
            assert!((led.tdelta[j] - 0.5).abs() < 1e-12);
        }
        let led = weight_ledger(&base, &fam, &x[..2]).expect("well defined");
        for j in 0..2 {
            assert!((led.omega[j] - 1.0).abs() < 1e-12);
            assert!((led.tdelta[j] - 1.0).abs() < 1e-12, "last round event is full");
        }
        // The measurement itself is nonzero pointwise: row 2 is all zeros,
        // so both round-1 events hold and gamma_1 = +1.
        let ys = event_indicator_rows(&fam, &x);
        let g1 = gamma_eval(&base, &fam, &[], &x[0], &ys[0]).expect("defined");
        assert!((g1 - 1.0).abs() < 1e-12);
        // No conditioning means no divergence budget is spent.
        let (_, total) = divergence_budget(&base, &fam).expect("well defined");
        assert!(total.abs() < 1e-12);
        // Rounds 1 and 2 each pass only when the next row has exactly one
        // zero (probability 1/2 each), so the cut mass is exactly 3/4.
        let cert = build_fcut_certificate(&base, &fam).expect("well defined");
        assert!((cert.alpha - 0.75).abs() < 1e-12);
        let sum: ExtReal = cert.round_terms.iter().copied().sum();
        assert!(
            cert.div.value() <= sum.value() + 1e-9,
            "div {} exceeds round sum {}",
            cert.div,
            sum
        );
    }

    #[test]
    fn slow_conditional_probability_matches_hand_values() {
        let base = BaseModel::new(
            uniform_columns(1, 2, 2),
            EventPredicate::new("not both zero", |x: &Matrix| x[0][0] == 1 || x[0][1] == 1),
        )
        .expect("valid model");
        let fam = DenseFamily::full(1, 2);
        // With threshold factor 1 the slow pairs are exactly the two where
        // the resampled column drew its zero symbol: probability 4/9.
        let p = bad_t_probability(&base, &fam, 1.0).expect("well defined");
        assert!((p - 4.0 / 9.0).abs() < 1e-12);
        assert_eq!(bad_t_probability(&base, &fam, 2.0).expect("well defined"), 0.0);
        assert!((bad_t_probability(&base, &fam, 0.5).expect("well defined") - 1.0).abs() < 1e-12);
        assert!(matches!(
            bad_t_probability(&base, &fam, 0.0),
            Err(SkewedError::BadThreshold(_))
        ));
        assert!(matches!(
            bad_t_probability(&base, &fam, f64::INFINITY),
            Err(SkewedError::BadThreshold(_))
        ));
    }

    #[test]
    fn slow_conditional_probability_is_monotone_in_the_threshold() {
        let mut rng = rng64(07_03);
        for _ in 0..6 {
            let (base, fam) = random_instance(&mut rng, &InstanceOptions::default());
            let mut prev = 1.0_f64;
            for t in [0.5, 1.0, 2.0, 8.0, 1e6] {
                let p = bad_t_probability(&base, &fam, t).expect("well defined");
                assert!(p <= prev + 1e-12, "p_t must shrink as t grows");
                assert!((0.0..=1.0 + 1e-12).contains(&p));
                prev = p;
            }
        }
    }

    #[test]
    fn density_validation_rejects_bad_families() {
        let (base, _) = sums_equal();
        // Wrong grid shape.
        let fam = DenseFamily::termination(3, 2);
        assert!(matches!(
            validate_density(&base, &fam),
            Err(SkewedError::GridShape { expect_rows: 2, expect_cols: 2, rows: 3, .. })
        ));
        // Event that reads a foreign column.
        let events = vec![
            vec![
                EventPredicate::new("foreign", |x: &Matrix| x[0][1] == 0),
                EventPredicate::new("full", |_: &Matrix| true),
            ],
            vec![
                EventPredicate::new("full", |_: &Matrix| true),
                EventPredicate::new("full", |_: &Matrix| true),
            ],
        ];
        let fam = DenseFamily::new(events, false);
        assert!(matches!(
            validate_density(&base, &fam),
            Err(SkewedError::DensityViolation { row: 0, col: 0, .. })
        ));
        // Event determined by the fixing itself: density varies (0 or 1).
        let grid = vec![
            vec![CellEvent::Full, CellEvent::Full],
            vec![CellEvent::RowIn { row: 0, values: BTreeSet::from([0]) }, CellEvent::Full],
        ];
        let fam = DenseFamily::from_cells(grid);
        assert!(matches!(
            validate_density(&base, &fam),
            Err(SkewedError::DensityViolation { row: 1, col: 0, .. })
        ));
        // Empty admissible set: zero density.
        let grid = vec![
            vec![CellEvent::RowIn { row: 1, values: BTreeSet::new() }, CellEvent::Full],
            vec![CellEvent::Full, CellEvent::Full],
        ];
        let fam = DenseFamily::from_cells(grid);
        assert!(matches!(
            validate_density(&base, &fam),
            Err(SkewedError::DensityViolation { row: 0, col: 0, .. })
        ));
    }

    #[test]
    fn early_stop_family_reports_its_densities() {
        let (base, fam) = sums_equal();
        let report = validate_density(&base, &fam).expect("dense");
        assert!(report.prefix_flag);
        for j in 0..2 {
            assert!((report.delta_grid[0][j] - 0.5).abs() < 1e-12);
            assert!((report.delta_grid[1][j] - 1.0).abs() < 1e-12);
        }
        assert!((report.delta_min - 0.5).abs() < 1e-12);
    }

    #[test]
    fn skipping_a_row_clears_the_prefix_flag() {
        let grid = vec![
            vec![CellEvent::RowIn { row: 2, values: BTreeSet::from([0]) }],
            vec![CellEvent::Full],
            vec![CellEvent::Full],
        ];
        let fam = DenseFamily::from_cells(grid);
        assert!(!fam.prefix_flag());
        let base = BaseModel::new(uniform_columns(3, 1, 2), full_event()).expect("valid model");
        let report = validate_density(&base, &fam).expect("dense");
        assert!(!report.prefix_flag);
        assert!((report.delta_grid[0][0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn exact_sampler_matches_the_exact_pmf() {
        let (base, fam) = second_row_has_one();
        let q = skewed_pmf_exact(&base, &fam).expect("well defined");
        let mut rng = rng64(11);
        let samples: Vec<(usize, Matrix)> = (0..40_000)
            .map(|_| skewed_sample(&base, &fam, &mut rng).expect("well defined"))
            .collect();
        let emp = crate::dist::empirical(samples).expect("nonempty");
        // Compare over the exact support (the empirical law may miss points).
        let mut tv = 0.0;
        for (k, w) in q.iter() {
            tv += (w - emp.prob(k)).abs();
        }
        assert!(tv / 2.0 < 0.02, "tv {}", tv / 2.0);
    }

    #[test]
    fn rejection_sampler_matches_the_exact_pmf() {
        let (base, fam) = second_row_has_one();
        let q = skewed_pmf_exact(&base, &fam).expect("well defined");
        let mut rng = rng64(13);
        let samples: Vec<(usize, Matrix)> = (0..40_000)
            .map(|_| skewed_sample_rejection(&base, &fam, &mut rng, 10_000).expect("in cap"))
            .collect();
        let emp = crate::dist::empirical(samples).expect("nonempty");
        let mut tv = 0.0;
        for (k, w) in q.iter() {
            tv += (w - emp.prob(k)).abs();
        }
        assert!(tv / 2.0 < 0.02, "tv {}", tv / 2.0);
    }

    /// Distinct ideal-positive histories of each length below `m`.
    fn ideal_prefixes(base: &BaseModel) -> Vec<Vec<Row>> {
        let mut out: BTreeSet<Vec<Row>> = BTreeSet::new();
        for (x, w) in ideal_pmf(base).iter() {
            if w > 0.0 {
                for i in 0..base.rows() {
                    out.insert(x[..i].to_vec());
                }
            }
        }
        out.into_iter().collect()
    }

    /// Columns that stayed good through all rounds covered by `prefix`.
    fn good_after(base: &BaseModel, fam: &DenseFamily, prefix: &[Row]) -> BTreeSet<usize> {
        if prefix.is_empty() {
            return (0..base.cols()).collect();
        }
        let slice = weight_ledger(base, fam, &prefix[..prefix.len() - 1]).expect("on support");
        slice
            .s_set
            .iter()
            .copied()
            .filter(|&j| slice.x_sets[j].contains(&prefix[prefix.len() - 1][j]))
            .collect()
    }

    #[test]
    fn skewed_support_lies_inside_ideal_support_with_uniform_index() {
        let mut rng = rng64(23);
        for _ in 0..8 {
            let (base, fam) = random_instance(&mut rng, &InstanceOptions::default());
            let q = skewed_pmf_exact(&base, &fam).expect("generator retries until defined");
            let marg = q_column_marginal(&q, base.cols());
            for p in marg {
                assert!((p - 1.0 / base.cols() as f64).abs() < 1e-9);
            }
            for ((_, x), w) in q.iter() {
                if w > 0.0 {
                    assert!(ideal_pmf(&base).prob(x) > 0.0);
                }
            }
        }
    }

    #[test]
    fn posterior_of_the_index_matches_normalized_weights() {
        let mut rng = rng64(29);
        for _ in 0..5 {
            let (base, fam) = random_instance(&mut rng, &InstanceOptions::default());
            let q = skewed_pmf_exact(&base, &fam).expect("defined");
            let n = base.cols();
            for prefix in ideal_prefixes(&base) {
                let mut per_j = vec![0.0; n];
                let mut total = 0.0;
                for ((j, x), w) in q.iter() {
                    if w > 0.0 && extends(x, &prefix) {
                        per_j[*j] += w;
                        total += w;
                    }
                }
                if total == 0.0 {
                    continue;
                }
                let led = weight_ledger(&base, &fam, &prefix).expect("on support");
                let omega_sum: f64 = led.omega.iter().sum();
                for j in 0..n {
                    assert!(
                        (per_j[j] / total - led.omega[j] / omega_sum).abs() < 1e-9,
                        "posterior mismatch at round {}: {} vs {}",
                        led.round,
                        per_j[j] / total,
                        led.omega[j] / omega_sum
                    );
                }
            }
        }
    }

    #[test]
    fn measurement_is_exactly_centered_under_the_ideal_law() {
        let mut rng = rng64(31);
        for _ in 0..6 {
            let (base, fam) = random_instance(&mut rng, &InstanceOptions::default());
            let report = validate_density(&base, &fam).expect("dense");
            let ideal = ideal_pmf(&base).clone();
            for prefix in ideal_prefixes(&base) {
                let led = weight_ledger(&base, &fam, &prefix).expect("on support");
                if led.s_set.is_empty() {
                    continue;
                }
                let i = prefix.len();
                let mut mean = 0.0;
                let mut mass = 0.0;
                for (x, w) in ideal.iter() {
                    if w > 0.0 && extends(x, &prefix) {
                        let ys = event_indicator_rows(&fam, x);
                        let g = led.gamma(&x[i], &ys[i]).expect("candidates nonempty");
                        assert!(g >= -1.0 - 1e-9, "measurement below its floor");
                        assert!(
                            g <= 2.0 / report.delta_min + 1e-9,
                            "measurement above its cap: {g}"
                        );
                        mean += w * g;
                        mass += w;
                    }
                }
                assert!((mean / mass).abs() < 1e-9, "uncentered: {}", mean / mass);
            }
        }
    }

    #[test]
    fn continuation_probability_obeys_the_tower_property() {
        let mut rng = rng64(37);
        for _ in 0..3 {
            let (base, fam) = random_instance(&mut rng, &InstanceOptions::default());
            let q = skewed_pmf_exact(&base, &fam).expect("defined");
            let m = base.rows();
            for i in 1..=m {
                // Right side: mass that stays good through round i.
                let mut rhs = 0.0;
                for ((j, x), w) in q.iter() {
                    if w > 0.0 && good_after(&base, &fam, &x[..i]).contains(j) {
                        rhs += w;
                    }
                }
                // Left side: per-history good-so-far mass times the exact
                // continuation probability.
                let mut histories: BTreeSet<Vec<Row>> = BTreeSet::new();
                for ((_, x), w) in q.iter() {
                    if w > 0.0 {
                        histories.insert(x[..i - 1].to_vec());
                    }
                }
                let mut lhs = 0.0;
                for p in histories {
                    let good_prev = good_after(&base, &fam, &p);
                    let mut stay = 0.0;
                    for ((j, x), w) in q.iter() {
                        if w > 0.0 && extends(x, &p) && good_prev.contains(j) {
                            stay += w;
                        }
                    }
                    lhs += stay * tb_probability(&base, &fam, &p).expect("on support");
                }
                assert!((lhs - rhs).abs() < 1e-9, "tower gap at round {i}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn event_flags_are_internally_consistent() {
        let mut rng = rng64(41);
        let (base, fam) = random_instance(&mut rng, &InstanceOptions::default());
        let m = base.rows();
        let xs: Vec<Matrix> = ideal_pmf(&base)
            .support()
            .take(3)
            .cloned()
            .collect();
        for x in &xs {
            let mut coin_rng = rng64(401);
            let flags = event_flags_with_column(&base, &fam, x, 0, &mut coin_rng).expect("defined");
            for v in [&flags.g, &flags.t, &flags.t_prime, &flags.a, &flags.tb, &flags.c] {
                assert_eq!(v.len(), m);
            }
            assert_eq!(flags.tb_prob.len(), m);
            let b = flags.b.as_ref().expect("tracked column requested");
            assert_eq!(b.len(), m);
            for i in 0..m {
                assert_eq!(flags.a[i], flags.g[i] && flags.t[i] && flags.t_prime[i]);
                assert_eq!(flags.c[i], flags.a[i] && flags.tb[i]);
                assert!((0.0..=1.0 + 1e-12).contains(&flags.tb_prob[i]));
                if i > 0 {
                    assert!(b[i] <= b[i - 1], "good-column flag cannot recover");
                }
            }
            // The deterministic parts do not depend on the coin stream.
            let mut other_rng = rng64(999);
            let again = event_flags(&base, &fam, x, &mut other_rng).expect("defined");
            assert_eq!(flags.g, again.g);
            assert_eq!(flags.t, again.t);
            assert_eq!(flags.t_prime, again.t_prime);
            assert_eq!(flags.a, again.a);
            assert_eq!(flags.tb_prob, again.tb_prob);
        }
    }

    #[test]
    fn divergence_budget_respects_its_caps() {
        let mut rng = rng64(43);
        for _ in 0..8 {
            let (base, fam) = random_instance(&mut rng, &InstanceOptions::default());
            let (per_round, total) = divergence_budget(&base, &fam).expect("defined");
            assert_eq!(per_round.len(), base.rows());
            for d in &per_round {
                assert!(*d >= -1e-12, "negative round budget {d}");
            }
            let log_inv_w = (1.0 / base.w_mass()).ln();
            assert!(
                total <= base.rows() as f64 * log_inv_w + 1e-9,
                "budget {total} exceeds the round-count cap"
            );
            if fam.prefix_flag() {
                assert!(
                    total <= 2.0 * log_inv_w + 1e-9,
                    "budget {total} exceeds the two-round cap {}",
                    2.0 * log_inv_w
                );
            }
        }
    }

    #[test]
    fn cut_certificate_is_a_valid_smooth_witness() {
        use crate::divergence::{small_event_bound, SmoothCert};
        let mut rng = rng64(47);
        for _ in 0..4 {
            let (base, fam) = random_instance(&mut rng, &InstanceOptions::default());
            let cert = build_fcut_certificate(&base, &fam).expect("defined");
            assert!((-1e-12..=1.0 + 1e-12).contains(&cert.alpha));
            // The smoothing budget equals the truncated-transcript mass.
            let bot_mass: f64 = cert
                .cut_p
                .iter()
                .filter(|(seq, _)| seq.iter().any(|t| matches!(t, CutTok::Flag(false))))
                .map(|(_, w)| w)
                .sum();
            assert!((bot_mass - cert.alpha).abs() < 1e-9);
            // The divergence never exceeds the per-round budget.
            let sum: ExtReal = cert.round_terms.iter().copied().sum();
            if sum.is_finite() {
                assert!(
                    cert.div.value() <= sum.value() + 1e-9,
                    "div {} exceeds round sum {}",
                    cert.div,
                    sum
                );
            }
            // Small-event transport: the skewed mass of any event is bounded
            // through (alpha, div) and its ideal mass.
            let q_x: FinitePmf<Matrix> =
                skewed_pmf_exact(&base, &fam).expect("defined").map(|(_, x)| x.clone());
            let witness = SmoothCert { alpha: cert.alpha.max(0.0), div: cert.div };
            for (x, qm) in q_x.iter() {
                let bound = small_event_bound(&witness, ideal_pmf(&base).prob(x));
                assert!(qm <= bound + 1e-9, "transport violated: {qm} > {bound}");
            }
        }
    }

    #[test]
    fn ratio_chains_satisfy_their_recurrences() {
        let mut rng = rng64(53);
        for _ in 0..2 {
            let (base, fam) = random_instance(&mut rng, &InstanceOptions::default());
            let xs: Vec<Matrix> = ideal_pmf(&base).support().take(12).cloned().collect();
            for x in &xs {
                let led = ext_ledger(&base, &fam, x).expect("on support");
                for i in 0..base.rows() {
                    for j in 0..base.cols() {
                        let (u_prev, v_prev) = if i == 0 {
                            (1.0, 1.0)
                        } else {
                            (led.u_seq[i - 1][j], led.v_seq[i - 1][j])
                        };
                        let xi = led.xi[i][j];
                        let rho = led.rho[i][j];
                        let tau = led.tau[i][j];
                        let u_step = u_prev * (1.0 + xi) / (1.0 + rho);
                        let v_step = v_prev * (1.0 + tau) / (1.0 + rho);
                        if u_step.is_finite() && led.u_seq[i][j].is_finite() {
                            assert!((led.u_seq[i][j] - u_step).abs() < 1e-9);
                        }
                        if v_step.is_finite() && led.v_seq[i][j].is_finite() {
                            assert!((led.v_seq[i][j] - v_step).abs() < 1e-9);
                        }
                        // The normalized weights factor through the chains.
                        let wl = weight_ledger(&base, &fam, &x[..i]).expect("on support");
                        let expect = led.r_seq[i][j] * v_prev / u_prev;
                        if expect.is_finite() && wl.omega[j].is_finite() {
                            assert!(
                                (wl.omega[j] - expect).abs() < 1e-9,
                                "omega {} vs chain {}",
                                wl.omega[j],
                                expect
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn ratio_chains_are_ideal_martingales() {
        let mut rng = rng64(59);
        for _ in 0..3 {
            let (base, fam) = random_instance(&mut rng, &InstanceOptions::default());
            let ideal = ideal_pmf(&base).clone();
            let mass = |f: &dyn Fn(&Matrix) -> bool| -> f64 {
                ideal.iter().filter(|(x, _)| f(x)).map(|(_, w)| w).sum()
            };
            for prefix in ideal_prefixes(&base) {
                let i = prefix.len();
                let pm = mass(&|x: &Matrix| extends(x, &prefix));
                for j in 0..base.cols() {
                    let ev = fam.event(i, j);
                    let dt = mass(&|x: &Matrix| extends(x, &prefix) && ev.holds(x)) / pm;
                    if dt == 0.0 {
                        continue;
                    }
                    // One-step mean of the cell-conditional chain factor.
                    let mut cells: BTreeSet<Sym> = BTreeSet::new();
                    for (x, w) in ideal.iter() {
                        if w > 0.0 && extends(x, &prefix) {
                            cells.insert(x[i][j]);
                        }
                    }
                    let mut mean_u = 0.0;
                    for v in cells {
                        let cm = mass(&|x: &Matrix| extends(x, &prefix) && x[i][j] == v);
                        let ce =
                            mass(&|x: &Matrix| extends(x, &prefix) && x[i][j] == v && ev.holds(x));
                        mean_u += (cm / pm) * (ce / cm) / dt;
                    }
                    assert!((mean_u - 1.0).abs() < 1e-9, "cell chain drifts: {mean_u}");
                    // One-step mean of the row-conditional chain factor.
                    let mut rows: BTreeSet<Row> = BTreeSet::new();
                    for (x, w) in ideal.iter() {
                        if w > 0.0 && extends(x, &prefix) {
                            rows.insert(x[i].clone());
                        }
                    }
                    let mut mean_v = 0.0;
                    for r in rows {
                        let mut full = prefix.clone();
                        full.push(r);
                        let rm = mass(&|x: &Matrix| extends(x, &full));
                        let re = mass(&|x: &Matrix| extends(x, &full) && ev.holds(x));
                        mean_v += (rm / pm) * (re / rm) / dt;
                    }
                    assert!((mean_v - 1.0).abs() < 1e-9, "row chain drifts: {mean_v}");
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        /// Random instances keep the structural identities: a uniform index
        /// marginal, unit first-round weights, and budgets within caps.
        #[test]
        fn random_instances_keep_structural_identities(seed in any::<u64>()) {
            let mut rng = rng64(seed);
            let (base, fam) = random_instance(&mut rng, &InstanceOptions::default());
            let q = skewed_pmf_exact(&base, &fam).expect("generator retries until defined");
            let n = base.cols();
            for p in q_column_marginal(&q, n) {
                prop_assert!((p - 1.0 / n as f64).abs() < 1e-9);
            }
            let led = weight_ledger(&base, &fam, &[]).expect("empty history");
            for j in 0..n {
                prop_assert!((led.omega[j] - 1.0).abs() < 1e-12);
                prop_assert!((led.omega_prime[j] - 1.0).abs() < 1e-12);
            }
            let (_, total) = divergence_budget(&base, &fam).expect("defined");
            let cap = base.rows() as f64 * (1.0 / base.w_mass()).ln();
            prop_assert!(total <= cap + 1e-9);
            if fam.prefix_flag() {
                prop_assert!(total <= 2.0 * (1.0 / base.w_mass()).ln() + 1e-9);
            }
        }
    }

    #[test]
    fn rejection_sampler_reports_an_exhausted_cap() {
        let (base, fam) = second_row_has_one();
        let mut rng = rng64(17);
        let err = skewed_sample_rejection(&base, &fam, &mut rng, 0).unwrap_err();
        assert!(matches!(err, SkewedError::CapExceeded { cap: 0, row: 0 }));
    }
}
