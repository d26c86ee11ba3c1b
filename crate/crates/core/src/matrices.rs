//! Target matrices: parameters, the randomized sparse sampler, invariant
//! checking and the COO text format.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::dense::{fmt_f64, RowMatrix};
use crate::error::{Error, Result};
use crate::seed;

/// Row sums must equal one within this absolute tolerance.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Relative slack applied to the within-row ratio bound, so that a row
/// normalized from raw values `{1, gamma}` is not rejected over one ulp.
const RATIO_REL_TOL: f64 = 1e-12;

/// Approximation problem parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ApproxParams {
    pub l: usize,
    pub k: usize,
    pub gamma: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub causal: bool,
}

impl ApproxParams {
    pub fn new(l: usize, k: usize, gamma: f64, eps1: f64, eps2: f64, causal: bool) -> Result<Self> {
        let p = Self {
            l,
            k,
            gamma,
            eps1,
            eps2,
            causal,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.l <= 1 {
            bad.push(format!("L must be > 1, got {}", self.l));
        }
        if self.k < 1 || self.k > self.l {
            bad.push(format!("k must satisfy 1 <= k <= L, got k={} L={}", self.k, self.l));
        }
        if !(self.gamma >= 1.0 && self.gamma.is_finite()) {
            bad.push(format!("gamma must be a finite real >= 1, got {}", self.gamma));
        }
        if !(self.eps1 > 0.0 && self.eps1 < 1.0) {
            bad.push(format!("eps1 must lie in (0, 1), got {}", self.eps1));
        }
        if !(self.eps2 > 0.0 && self.eps2 < std::f64::consts::SQRT_2) {
            bad.push(format!("eps2 must lie in (0, sqrt 2), got {}", self.eps2));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidParams(bad.join("; ")))
        }
    }

    pub fn with_l(mut self, l: usize) -> Self {
        self.l = l;
        self
    }
}

/// Sparse right-stochastic target matrix, stored as per-row lists of
/// `(column, value)` sorted by column. Values are strictly positive; absent
/// positions are zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseStochasticMatrix {
    l: usize,
    rows: Vec<Vec<(usize, f64)>>,
    causal: bool,
}

impl SparseStochasticMatrix {
    /// Builds a matrix from a coordinate list. Checks structure only
    /// (bounds, duplicates, positivity, causal support); use [`validate`]
    /// for the stochastic/sparsity invariants.
    pub fn from_entries(
        l: usize,
        entries: impl IntoIterator<Item = (usize, usize, f64)>,
        causal: bool,
    ) -> Result<Self> {
        let mut rows = vec![Vec::new(); l];
        for (i, j, v) in entries {
            if i >= l || j >= l {
                return Err(Error::Dimension(format!(
                    "entry ({i}, {j}) outside a {l}x{l} matrix"
                )));
            }
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParams(format!(
                    "entry ({i}, {j}) must be a positive finite value, got {v}"
                )));
            }
            if causal && j > i {
                return Err(Error::InvalidParams(format!(
                    "entry ({i}, {j}) lies above the diagonal of a causal matrix"
                )));
            }
            rows[i].push((j, v));
        }
        for (i, row) in rows.iter_mut().enumerate() {
            row.sort_by_key(|&(j, _)| j);
            if let Some(w) = row.windows(2).find(|w| w[0].0 == w[1].0) {
                return Err(Error::InvalidParams(format!(
                    "duplicate entry ({i}, {})",
                    w[0].0
                )));
            }
        }
        Ok(Self { l, rows, causal })
    }

    pub fn identity(l: usize) -> Self {
        Self {
            l,
            rows: (0..l).map(|i| vec![(i, 1.0)]).collect(),
            causal: false,
        }
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn is_causal(&self) -> bool {
        self.causal
    }

    /// Marks the matrix causal. Fails if any entry lies above the diagonal.
    pub fn into_causal(mut self) -> Result<Self> {
        for (i, row) in self.rows.iter().enumerate() {
            if let Some(&(j, _)) = row.iter().find(|&&(j, _)| j > i) {
                return Err(Error::InvalidParams(format!(
                    "entry ({i}, {j}) lies above the diagonal of a causal matrix"
                )));
            }
        }
        self.causal = true;
        Ok(self)
    }

    /// Nonzeros of row `i` as `(column, value)`, sorted by column.
    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i]
            .binary_search_by_key(&j, |&(c, _)| c)
            .map(|p| self.rows[i][p].1)
            .unwrap_or(0.0)
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// Entries in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().map(move |&(j, v)| (i, j, v)))
    }

    pub fn to_dense(&self) -> RowMatrix {
        let mut m = RowMatrix::zeros(self.l, self.l);
        for (i, j, v) in self.entries() {
            m[(i, j)] = v;
        }
        m
    }
}

/// Samples a target matrix with the two-pass greedy procedure.
///
/// Random stream order: row permutation (non-causal only), column
/// permutation, then one coin flip per inserted entry. Pass one visits
/// permuted rows outer / permuted columns inner, pass two permuted columns
/// outer / permuted rows inner. A position is filled unless that would push
/// its row or column above `k` nonzeros. Raw values are `1` or `gamma`;
/// rows are normalized to sum to one afterwards.
///
/// Causal matrices only consider positions with `column <= row` and visit
/// rows in ascending order, which guarantees every row receives an entry.
pub fn generate(params: &ApproxParams, seed: u64) -> Result<SparseStochasticMatrix> {
    params.validate()?;
    let (l, k) = (params.l, params.k);
    let mut rng = seed::rng(seed);

    let mut row_order: Vec<usize> = (0..l).collect();
    if !params.causal {
        row_order.shuffle(&mut rng);
    }
    let mut col_order: Vec<usize> = (0..l).collect();
    col_order.shuffle(&mut rng);

    let mut filled = vec![false; l * l];
    let mut row_count = vec![0usize; l];
    let mut col_count = vec![0usize; l];
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); l];

    let mut visit = |r: usize, c: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        if (params.causal && c > r) || filled[r * l + c] || row_count[r] >= k || col_count[c] >= k {
            return;
        }
        let v = if rng.random_bool(0.5) { params.gamma } else { 1.0 };
        filled[r * l + c] = true;
        row_count[r] += 1;
        col_count[c] += 1;
        rows[r].push((c, v));
    };

    for &r in &row_order {
        for &c in &col_order {
            visit(r, c, &mut rng);
        }
    }
    for &c in &col_order {
        for &r in &row_order {
            visit(r, c, &mut rng);
        }
    }

    for (i, row) in rows.iter_mut().enumerate() {
        if row.is_empty() {
            return Err(Error::EmptyRow { row: i });
        }
        row.sort_by_key(|&(j, _)| j);
        let total: f64 = row.iter().map(|&(_, v)| v).sum();
        for e in row.iter_mut() {
            e.1 /= total;
        }
    }

    Ok(SparseStochasticMatrix {
        l,
        rows,
        causal: params.causal,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Dimension { expected: usize, found: usize },
    EmptyRow { row: usize },
    RowSum { row: usize, sum: f64 },
    RowNonzeros { row: usize, count: usize },
    ColNonzeros { col: usize, count: usize },
    Variation { row: usize, j1: usize, j2: usize, ratio: f64 },
    Causal { row: usize, col: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Violation::Dimension { expected, found } => {
                write!(f, "dimension {found} does not match L = {expected}")
            }
            Violation::EmptyRow { row } => write!(f, "row {row} has no nonzeros"),
            Violation::RowSum { row, sum } => write!(f, "row {row} sums to {sum}"),
            Violation::RowNonzeros { row, count } => {
                write!(f, "row {row} has {count} nonzeros")
            }
            Violation::ColNonzeros { col, count } => {
                write!(f, "column {col} has {count} nonzeros")
            }
            Violation::Variation { row, j1, j2, ratio } => {
                write!(f, "row {row}: A[{j1}]/A[{j2}] = {ratio} outside [1/gamma, gamma]")
            }
            Violation::Causal { row, col } => {
                write!(f, "entry ({row}, {col}) above the diagonal")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every target-matrix invariant against `params`.
pub fn validate(a: &SparseStochasticMatrix, params: &ApproxParams) -> ValidationReport {
    let mut violations = Vec::new();
    if a.l != params.l {
        violations.push(Violation::Dimension {
            expected: params.l,
            found: a.l,
        });
    }
    let mut col_count = vec![0usize; a.l];
    for (i, row) in a.rows.iter().enumerate() {
        if row.is_empty() {
            violations.push(Violation::EmptyRow { row: i });
            continue;
        }
        let sum: f64 = row.iter().map(|&(_, v)| v).sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            violations.push(Violation::RowSum { row: i, sum });
        }
        if row.len() > params.k {
            violations.push(Violation::RowNonzeros {
                row: i,
                count: row.len(),
            });
        }
        let bound = params.gamma * (1.0 + RATIO_REL_TOL);
        // max/min over the row is the only pair that can break the bound
        let (jmax, vmax) = row.iter().copied().fold(row[0], |b, e| if e.1 > b.1 { e } else { b });
        let (jmin, vmin) = row.iter().copied().fold(row[0], |b, e| if e.1 < b.1 { e } else { b });
        if vmax / vmin > bound {
            violations.push(Violation::Variation {
                row: i,
                j1: jmax,
                j2: jmin,
                ratio: vmax / vmin,
            });
        }
        for &(j, _) in row {
            col_count[j] += 1;
            if (params.causal || a.causal) && j > i {
                violations.push(Violation::Causal { row: i, col: j });
            }
        }
    }
    for (j, &count) in col_count.iter().enumerate() {
        if count > params.k {
            violations.push(Violation::ColNonzeros { col: j, count });
        }
    }
    ValidationReport { violations }
}

/// Per-row minimum nonzero value.
pub fn min_nonzero_rows(a: &SparseStochasticMatrix) -> Result<Vec<f64>> {
    a.rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .map(|&(_, v)| v)
                .reduce(f64::min)
                .ok_or(Error::EmptyRow { row: i })
        })
        .collect()
}

/// Header line of a COO file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CooHeader {
    pub l: usize,
    pub k: usize,
    pub gamma: f64,
    pub causal: bool,
}

impl CooHeader {
    pub fn from_params(p: &ApproxParams) -> Self {
        Self {
            l: p.l,
            k: p.k,
            gamma: p.gamma,
            causal: p.causal,
        }
    }
}

/// Writes `a` as `L k gamma causal` followed by `i j value` lines in
/// row-major order.
pub fn write_coo(a: &SparseStochasticMatrix, header: &CooHeader, path: &Path) -> Result<()> {
    if header.l != a.l {
        return Err(Error::Dimension(format!(
            "header declares L = {} but matrix has L = {}",
            header.l, a.l
        )));
    }
    let mut out = String::with_capacity(48 * (a.nnz() + 1));
    out.push_str(&format!(
        "{} {} {} {}\n",
        header.l,
        header.k,
        header.gamma,
        u8::from(header.causal)
    ));
    for (i, j, v) in a.entries() {
        out.push_str(&format!("{i} {j} {}\n", fmt_f64(v)));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_coo(path: &Path) -> Result<(SparseStochasticMatrix, CooHeader)> {
    let text = fs::read_to_string(path)?;
    parse_coo(&text, path)
}

fn parse_coo(text: &str, path: &Path) -> Result<(SparseStochasticMatrix, CooHeader)> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(n, s)| (n + 1, s.trim()))
        .filter(|(_, s)| !s.is_empty());

    let (hline, h) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "missing header"))?;
    let fields: Vec<&str> = h.split_whitespace().collect();
    if fields.len() != 4 {
        return Err(Error::parse(path, hline, "header must be `L k gamma causal`"));
    }
    let bad = |what: &str| Error::parse(path, hline, format!("malformed header field `{what}`"));
    let header = CooHeader {
        l: fields[0].parse().map_err(|_| bad("L"))?,
        k: fields[1].parse().map_err(|_| bad("k"))?,
        gamma: fields[2].parse().map_err(|_| bad("gamma"))?,
        causal: match fields[3] {
            "0" => false,
            "1" => true,
            _ => return Err(bad("causal")),
        },
    };

    let l = header.l;
    let mut seen = std::collections::HashSet::new();
    let mut entries = Vec::new();
    for (n, s) in lines {
        let f: Vec<&str> = s.split_whitespace().collect();
        if f.len() != 3 {
            return Err(Error::parse(path, n, "entry must be `i j value`"));
        }
        let i: usize = f[0]
            .parse()
            .map_err(|_| Error::parse(path, n, "bad row index"))?;
        let j: usize = f[1]
            .parse()
            .map_err(|_| Error::parse(path, n, "bad column index"))?;
        let v: f64 = f[2]
            .parse()
            .map_err(|_| Error::parse(path, n, "bad value"))?;
        if i >= l || j >= l {
            return Err(Error::parse(path, n, format!("index ({i}, {j}) out of range for L = {l}")));
        }
        if !seen.insert((i, j)) {
            return Err(Error::parse(path, n, format!("duplicate coordinate ({i}, {j})")));
        }
        if header.causal && j > i {
            return Err(Error::parse(
                path,
                n,
                format!("entry ({i}, {j}) above the diagonal in a causal file"),
            ));
        }
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::parse(path, n, format!("value {v} is not positive")));
        }
        entries.push((i, j, v));
    }
    let a = SparseStochasticMatrix::from_entries(l, entries, header.causal)?;
    Ok((a, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(l: usize, k: usize, gamma: f64, causal: bool) -> ApproxParams {
        ApproxParams::new(l, k, gamma, 0.15, 0.5, causal).unwrap()
    }

    #[test]
    fn k1_rows_are_single_ones() {
        for seed in 0..5 {
            let a = generate(&params(4, 1, 3.0, false), seed).unwrap();
            let mut cols = vec![0; 4];
            for i in 0..4 {
                assert_eq!(a.row(i).len(), 1);
                assert_eq!(a.row(i)[0].1, 1.0);
                cols[a.row(i)[0].0] += 1;
            }
            assert!(cols.iter().all(|&c| c <= 1));
        }
    }

    #[test]
    fn l512_k2_gamma2() {
        let p = params(512, 2, 2.0, false);
        let a = generate(&p, 7).unwrap();
        assert!(validate(&a, &p).passed());
        for i in 0..512 {
            let row = a.row(i);
            let sum: f64 = row.iter().map(|e| e.1).sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            for &(_, x) in row {
                for &(_, y) in row {
                    let r = x / y;
                    assert!(
                        [0.5, 1.0, 2.0].iter().any(|t| (r - t).abs() < 1e-12),
                        "ratio {r}"
                    );
                }
            }
        }
    }

    #[test]
    fn causal_first_row_is_forced() {
        let a = generate(&params(3, 1, 1.0, true), 11).unwrap();
        assert_eq!(a.row(0), &[(0, 1.0)]);
        assert!(a.is_causal());
    }

    #[test]
    fn causal_generation_never_leaves_an_empty_row() {
        for seed in 0..50 {
            for (l, k) in [(2, 1), (5, 1), (9, 2), (33, 3)] {
                let p = params(l, k, 2.0, true);
                let a = generate(&p, seed).unwrap();
                let rep = validate(&a, &p);
                assert!(rep.passed(), "{:?}", rep.violations);
            }
        }
    }

    #[test]
    fn validate_examples() {
        let id = SparseStochasticMatrix::identity(5);
        assert!(validate(&id, &params(5, 1, 1.0, false)).passed());

        let skewed = SparseStochasticMatrix::from_entries(
            3,
            [(0, 0, 0.7), (0, 1, 0.3), (1, 1, 1.0), (2, 2, 1.0)],
            false,
        )
        .unwrap();
        let rep = validate(&skewed, &params(3, 2, 2.0, false));
        assert!(matches!(
            rep.violations.as_slice(),
            [Violation::Variation { row: 0, j1: 0, j2: 1, .. }]
        ));

        let short = SparseStochasticMatrix::from_entries(
            2,
            [(0, 0, 0.9), (1, 1, 1.0)],
            false,
        )
        .unwrap();
        let rep = validate(&short, &params(2, 1, 1.0, false));
        assert!(matches!(rep.violations.as_slice(), [Violation::RowSum { row: 0, .. }]));
    }

    #[test]
    fn validate_counts_columns() {
        let a = SparseStochasticMatrix::from_entries(
            2,
            [(0, 0, 1.0), (1, 0, 1.0)],
            false,
        )
        .unwrap();
        let rep = validate(&a, &params(2, 1, 1.0, false));
        assert_eq!(rep.violations, vec![Violation::ColNonzeros { col: 0, count: 2 }]);
    }

    #[test]
    fn min_nonzero_examples() {
        let id = SparseStochasticMatrix::identity(4);
        assert_eq!(min_nonzero_rows(&id).unwrap(), vec![1.0; 4]);

        let a = SparseStochasticMatrix::from_entries(
            2,
            [(0, 0, 2.0 / 3.0), (0, 1, 1.0 / 3.0), (1, 1, 1.0)],
            false,
        )
        .unwrap();
        assert_eq!(min_nonzero_rows(&a).unwrap()[0], 1.0 / 3.0);

        let empty = SparseStochasticMatrix::from_entries(2, [(0, 0, 1.0)], false).unwrap();
        assert!(matches!(min_nonzero_rows(&empty), Err(Error::EmptyRow { row: 1 })));
    }

    #[test]
    fn min_nonzero_of_generated_lies_in_pattern_range() {
        // normalized patterns {1}, {1,1}, {1,g}, {g,g} give minima 1, 1/2, 1/(1+g), 1/2
        let p = params(512, 2, 2.0, false);
        let a = generate(&p, 3).unwrap();
        for v in min_nonzero_rows(&a).unwrap() {
            assert!((1.0 / 3.0 - 1e-15..=1.0).contains(&v), "{v}");
        }
    }

    #[test]
    fn coo_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.coo");
        let p = params(16, 3, 2.5, false);
        let a = generate(&p, 5).unwrap();
        write_coo(&a, &CooHeader::from_params(&p), &path).unwrap();
        let (b, h) = read_coo(&path).unwrap();
        assert_eq!(a, b);
        assert_eq!(h, CooHeader::from_params(&p));
    }

    #[test]
    fn coo_rejects_bad_files() {
        let p = Path::new("mem.coo");
        let cases = [
            ("3 1 1\n0 0 1\n", "header"),
            ("3 1 1 0\n0 0 1\n0 0 1\n", "duplicate"),
            ("3 1 1 1\n0 0 1\n0 2 1\n", "above the diagonal"),
            ("3 1 1 0\n3 0 1\n", "out of range"),
            ("3 1 1 0\n0 0 -1\n", "not positive"),
            ("x 1 1 0\n", "`L`"),
        ];
        for (text, needle) in cases {
            let err = parse_coo(text, p).unwrap_err().to_string();
            assert!(err.contains(needle), "{text:?}: {err}");
        }
    }

    #[test]
    fn params_reject_out_of_range() {
        assert!(ApproxParams::new(1, 1, 1.0, 0.1, 0.1, false).is_err());
        assert!(ApproxParams::new(4, 0, 1.0, 0.1, 0.1, false).is_err());
        assert!(ApproxParams::new(4, 5, 1.0, 0.1, 0.1, false).is_err());
        assert!(ApproxParams::new(4, 1, 0.9, 0.1, 0.1, false).is_err());
        assert!(ApproxParams::new(4, 1, 1.0, 1.0, 0.1, false).is_err());
        assert!(ApproxParams::new(4, 1, 1.0, 0.1, 1.5, false).is_err());
    }
}
