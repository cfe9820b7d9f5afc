//! Instance-file parser for the exact sweeps.
//!
//! An instance file pins down one `(column distributions, winning event,
//! event family)` triple so a sweep can run on a hand-chosen instance
//! instead of the seeded random stream. The format is line-oriented; `#`
//! starts a comment anywhere and blank lines are skipped:
//!
//! ```text
//! 2 2                      # header: rows (m) then columns (n)
//! col 0: 0,0 0.25  0,1 0.25  1,0 0.25  1,1 0.25
//! col 1: 0,0 0.5   1,1 0.5
//! W first-cell 0           # or: full | parity-even | col-sums-equal
//! family random-termination
//! ```
//!
//! A column line lists `outcome weight` pairs; an outcome is the column
//! read top to bottom, its symbols joined by commas. Weights are
//! normalized. The `family` line is one of:
//!
//! - `random-termination`: round `i` of every column asks for symbol 0 in
//!   the next row (the last round is the full event);
//! - `full`: every event holds;
//! - `next-row <m*n tokens>`: row-major grid of tokens, each either `full`
//!   or a string of digits naming the admissible next-row symbols (the last
//!   grid row must be `full`, having no next row to read).

use std::collections::BTreeSet;
use std::path::Path;

use amplab_core::dist::{EventPredicate, FinitePmf};
use amplab_core::skewed::{
    full_event, BaseModel, CellEvent, DenseFamily, Matrix, SkewedError, Sym,
};
use thiserror::Error;

/// Parse/validation failures for instance files.
#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("cannot read instance file {path}: {source}")]
    Read {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("instance line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("instance is incomplete: {0}")]
    Incomplete(String),
    #[error("instance rejected by the model: {0}")]
    Model(#[from] SkewedError),
}

/// Reads and parses an instance file.
pub fn load_instance(path: &Path) -> Result<(BaseModel, DenseFamily), InstanceError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| InstanceError::Read { path: path.to_path_buf(), source })?;
    parse_instance(&text)
}

/// Parses instance text. See the module docs for the format.
pub fn parse_instance(text: &str) -> Result<(BaseModel, DenseFamily), InstanceError> {
    let mut header: Option<(usize, usize)> = None;
    let mut columns: Vec<Option<FinitePmf<Vec<Sym>>>> = Vec::new();
    let mut w: Option<EventPredicate<Matrix>> = None;
    let mut family: Option<DenseFamily> = None;

    for (idx, raw_line) in text.lines().enumerate() {
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let syntax =
            |reason: String| InstanceError::Syntax { line: idx + 1, reason };
        let Some((m, n)) = header else {
            let mut parts = line.split_whitespace();
            let m: usize = parts
                .next()
                .ok_or_else(|| syntax("expected `m n` header".into()))?
                .parse()
                .map_err(|e| syntax(format!("bad row count: {e}")))?;
            let n: usize = parts
                .next()
                .ok_or_else(|| syntax("header needs a column count".into()))?
                .parse()
                .map_err(|e| syntax(format!("bad column count: {e}")))?;
            if parts.next().is_some() {
                return Err(syntax("header has trailing tokens".into()));
            }
            if m == 0 || n == 0 {
                return Err(syntax("row and column counts must be positive".into()));
            }
            header = Some((m, n));
            columns = vec![None; n];
            continue;
        };

        if let Some(rest) = line.strip_prefix("col") {
            let (j_text, body) = rest
                .split_once(':')
                .ok_or_else(|| syntax("expected `col <j>: outcome weight ...`".into()))?;
            let j: usize = j_text
                .trim()
                .parse()
                .map_err(|e| syntax(format!("bad column index: {e}")))?;
            if j >= n {
                return Err(syntax(format!("column index {j} out of range (n = {n})")));
            }
            if columns[j].is_some() {
                return Err(syntax(format!("column {j} is defined twice")));
            }
            let tokens: Vec<&str> = body.split_whitespace().collect();
            if tokens.is_empty() || tokens.len() % 2 != 0 {
                return Err(syntax("column body must be `outcome weight` pairs".into()));
            }
            let mut weights = Vec::with_capacity(tokens.len() / 2);
            for pair in tokens.chunks(2) {
                let outcome: Vec<Sym> = pair[0]
                    .split(',')
                    .map(|s| s.parse::<Sym>().map_err(|e| format!("symbol {s:?}: {e}")))
                    .collect::<Result<_, _>>()
                    .map_err(syntax)?;
                if outcome.len() != m {
                    return Err(syntax(format!(
                        "outcome {:?} has {} symbols, expected {m}",
                        pair[0],
                        outcome.len()
                    )));
                }
                let weight: f64 = pair[1]
                    .parse()
                    .map_err(|e| syntax(format!("weight {:?}: {e}", pair[1])))?;
                weights.push((outcome, weight));
            }
            let pmf = FinitePmf::from_weights(weights)
                .map_err(|e| syntax(format!("column {j}: {e}")))?;
            columns[j] = Some(pmf);
            continue;
        }

        if let Some(rest) = line.strip_prefix("W ") {
            if w.is_some() {
                return Err(syntax("the winning event is defined twice".into()));
            }
            w = Some(parse_event(rest.trim(), m).map_err(syntax)?);
            continue;
        }

        if let Some(rest) = line.strip_prefix("family ") {
            if family.is_some() {
                return Err(syntax("the family is defined twice".into()));
            }
            family = Some(parse_family(rest.trim(), m, n).map_err(syntax)?);
            continue;
        }

        return Err(syntax(format!("unrecognized line {line:?}")));
    }

    let (m, n) = header.ok_or_else(|| InstanceError::Incomplete("missing header".into()))?;
    let _ = m;
    let columns: Vec<FinitePmf<Vec<Sym>>> = columns
        .into_iter()
        .enumerate()
        .map(|(j, c)| c.ok_or_else(|| InstanceError::Incomplete(format!("column {j} not defined"))))
        .collect::<Result<_, _>>()?;
    debug_assert_eq!(columns.len(), n);
    let w = w.ok_or_else(|| InstanceError::Incomplete("missing `W` line".into()))?;
    let family =
        family.ok_or_else(|| InstanceError::Incomplete("missing `family` line".into()))?;
    let base = BaseModel::new(columns, w)?;
    Ok((base, family))
}

fn parse_event(spec: &str, _m: usize) -> Result<EventPredicate<Matrix>, String> {
    let mut parts = spec.split_whitespace();
    let name = parts.next().ok_or("empty event spec")?;
    match name {
        "full" => Ok(full_event()),
        "first-cell" => {
            let v: Sym = parts
                .next()
                .ok_or("first-cell needs a symbol")?
                .parse()
                .map_err(|e| format!("first-cell symbol: {e}"))?;
            Ok(EventPredicate::new(format!("first-cell {v}"), move |x: &Matrix| x[0][0] == v))
        }
        "parity-even" => Ok(EventPredicate::new("parity-even", |x: &Matrix| {
            x.iter().flatten().map(|&s| s as u64).sum::<u64>() % 2 == 0
        })),
        "col-sums-equal" => Ok(EventPredicate::new("col-sums-equal", |x: &Matrix| {
            let n = x.first().map_or(0, |r| r.len());
            let sum = |j: usize| x.iter().map(|r| r[j] as u64).sum::<u64>();
            (1..n).all(|j| sum(j) == sum(0))
        })),
        other => Err(format!(
            "unknown event {other:?} (expected full, first-cell, parity-even, col-sums-equal)"
        )),
    }
}

fn parse_family(spec: &str, m: usize, n: usize) -> Result<DenseFamily, String> {
    let mut parts = spec.split_whitespace();
    let name = parts.next().ok_or("empty family spec")?;
    match name {
        "random-termination" => Ok(DenseFamily::termination(m, n)),
        "full" => Ok(DenseFamily::full(m, n)),
        "next-row" => {
            let tokens: Vec<&str> = parts.collect();
            if tokens.len() != m * n {
                return Err(format!("next-row needs {} tokens, got {}", m * n, tokens.len()));
            }
            let mut grid = Vec::with_capacity(m);
            for i in 0..m {
                let mut row = Vec::with_capacity(n);
                for j in 0..n {
                    let tok = tokens[i * n + j];
                    if tok == "full" {
                        row.push(CellEvent::Full);
                        continue;
                    }
                    if i + 1 >= m {
                        return Err(format!(
                            "grid row {i} has no next row; token {tok:?} must be `full`"
                        ));
                    }
                    let values: BTreeSet<Sym> = tok
                        .chars()
                        .map(|c| {
                            c.to_digit(10)
                                .map(|d| d as Sym)
                                .ok_or_else(|| format!("token {tok:?}: symbols are digits"))
                        })
                        .collect::<Result<_, _>>()?;
                    if values.is_empty() {
                        return Err(format!("token {tok:?} names no symbols"));
                    }
                    row.push(CellEvent::RowIn { row: i + 1, values });
                }
                grid.push(row);
            }
            Ok(DenseFamily::from_cells(grid))
        }
        other => Err(format!(
            "unknown family {other:?} (expected random-termination, full, next-row)"
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use amplab_core::skewed::{skewed_pmf_exact, validate_density};

    const GOOD: &str = "\
# hand instance
2 2
col 0: 0,0 0.25 0,1 0.25 1,0 0.25 1,1 0.25
col 1: 0,0 0.25 0,1 0.25 1,0 0.25 1,1 0.25
W full
family random-termination
";

    #[test]
    fn well_formed_instance_parses_and_runs() {
        let (base, fam) = parse_instance(GOOD).expect("parse");
        assert_eq!(base.rows(), 2);
        assert_eq!(base.cols(), 2);
        assert!((base.w_mass() - 1.0).abs() < 1e-12);
        let report = validate_density(&base, &fam).expect("admissible");
        assert!(report.prefix_flag);
        assert!((report.delta_min - 0.5).abs() < 1e-12);
        skewed_pmf_exact(&base, &fam).expect("well-defined");
    }

    #[test]
    fn event_and_family_variants_parse() {
        let text = "\
2 2
col 0: 0,0 1 0,1 1 1,0 1 1,1 1
col 1: 0,0 1 0,1 1 1,0 1 1,1 1
W first-cell 0
family next-row 01 0 full full
";
        let (base, fam) = parse_instance(text).expect("parse");
        assert!((base.w_mass() - 0.5).abs() < 1e-12);
        assert_eq!(fam.rows(), 2);
        assert!(fam.prefix_flag());
        // Event (0, 0) admits both next-row symbols, event (0, 1) only 0.
        let x = vec![vec![0, 0], vec![1, 1]];
        assert!(fam.event(0, 0).holds(&x));
        assert!(!fam.event(0, 1).holds(&x));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let text = "2 2\ncol 0: 0,0 1\ncol 0: 0,0 1\n";
        match parse_instance(text) {
            Err(InstanceError::Syntax { line: 3, reason }) => {
                assert!(reason.contains("twice"), "{reason}")
            }
            other => panic!("expected a line-3 syntax error, got {other:?}"),
        }
        let text = "2 2\ncol 0: 0 1\n";
        match parse_instance(text) {
            Err(InstanceError::Syntax { line: 2, reason }) => {
                assert!(reason.contains("expected 2"), "{reason}")
            }
            other => panic!("expected a shape error, got {other:?}"),
        }
        let text = "2 1\ncol 0: 0,0 1 1,1 1\nfamily next-row 0 0\nW full\n";
        match parse_instance(text) {
            Err(InstanceError::Syntax { line: 3, reason }) => {
                assert!(reason.contains("full"), "{reason}")
            }
            other => panic!("expected last-row token error, got {other:?}"),
        }
    }

    #[test]
    fn missing_sections_are_reported() {
        assert!(matches!(
            parse_instance("2 1\ncol 0: 0,0 1\nW full\n"),
            Err(InstanceError::Incomplete(msg)) if msg.contains("family")
        ));
        assert!(matches!(
            parse_instance("2 2\ncol 0: 0,0 1\nW full\nfamily full\n"),
            Err(InstanceError::Incomplete(msg)) if msg.contains("column 1")
        ));
    }
}
