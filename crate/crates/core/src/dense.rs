//! Row-major dense storage for square result matrices (logits, attention
//! maps) plus the glue to and from `faer` matrices used for the heavy
//! linear algebra.

use std::fmt::Write as _;
use std::path::Path;

use faer::{Mat, MatRef};

use crate::error::{Error, Result};

/// Dense row-major `f64` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct RowMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RowMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major buffer has wrong length");
        Self { rows, cols, data }
    }

    /// Copies `m` into row-major order.
    pub fn from_faer(m: MatRef<'_, f64>) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }

    /// Builds the row-major matrix whose rows are the columns of `t`.
    /// This is the cheap direction: each column of a `faer` matrix is contiguous.
    pub fn from_faer_transposed(t: MatRef<'_, f64>) -> Self {
        let (rows, cols) = (t.ncols(), t.nrows());
        let mut data = Vec::with_capacity(rows * cols);
        for j in 0..rows {
            data.extend(t.col(j).iter().copied());
        }
        Self { rows, cols, data }
    }

    pub fn to_faer(&self) -> Mat<f64> {
        Mat::from_fn(self.rows, self.cols, |i, j| self[(i, j)])
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn rows_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs_diff(&self, other: &RowMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for RowMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for RowMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Largest absolute entry of `a - b`.
pub fn max_abs_diff(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> f64 {
    assert_eq!((a.nrows(), a.ncols()), (b.nrows(), b.ncols()));
    let mut worst = 0.0f64;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            worst = worst.max((a[(i, j)] - b[(i, j)]).abs());
        }
    }
    worst
}

/// Formats a float with 17 significant digits, the precision used by every
/// text format in this crate.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Appends a labelled matrix block: `name rows cols` then one line per row.
pub fn write_block(out: &mut String, name: &str, m: MatRef<'_, f64>) {
    let _ = writeln!(out, "{name} {} {}", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        let line: Vec<String> = (0..m.ncols()).map(|j| fmt_f64(m[(i, j)])).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
}

/// Parses one block written by [`write_block`]: its name and contents.
pub fn parse_block(text: &str, path: &Path) -> Result<(String, RowMatrix)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, head) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "empty matrix file"))?;
    let parts: Vec<&str> = head.split_whitespace().collect();
    let dims = match parts.as_slice() {
        [name, r, c] => r.parse::<usize>().ok().zip(c.parse::<usize>().ok()).map(|d| (name, d)),
        _ => None,
    };
    let Some((name, (rows, cols))) = dims else {
        return Err(Error::parse(path, 1, "expected `name rows cols`"));
    };
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let (no, line) = lines
            .next()
            .ok_or_else(|| Error::parse(path, rows + 1, "too few rows"))?;
        let before = data.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::parse(path, no + 1, format!("bad number `{tok}`")))?;
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(Error::parse(path, no + 1, format!("expected {cols} values")));
        }
    }
    Ok((name.to_string(), RowMatrix::from_rows(rows, cols, data)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_copy_matches_direct() {
        let m = Mat::from_fn(3, 5, |i, j| (i * 10 + j) as f64);
        let direct = RowMatrix::from_faer(m.as_ref());
        let via_t = RowMatrix::from_faer_transposed(m.transpose());
        assert_eq!(direct, via_t);
        assert_eq!(direct.row(2), &[20.0, 21.0, 22.0, 23.0, 24.0]);
    }

    #[test]
    fn seventeen_digits_round_trip() {
        for v in [1.0, 1.0 / 3.0, 2.0f64.sqrt(), 1e-300, 12345.678901234567] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v);
        }
        assert!(fmt_f64(1.0).starts_with("1.0"));
    }

    #[test]
    fn block_round_trip() {
        let m = Mat::from_fn(2, 3, |i, j| (i as f64 + 1.0) / (j as f64 + 3.0));
        let mut text = String::new();
        write_block(&mut text, "M", m.as_ref());
        let (name, back) = parse_block(&text, Path::new("m.txt")).unwrap();
        assert_eq!(name, "M");
        assert_eq!(back, RowMatrix::from_faer(m.as_ref()));
        assert!(parse_block("M 2 2\n1 2\n3\n", Path::new("x")).is_err());
        assert!(parse_block("M 2 2\n1 2\n", Path::new("x")).is_err());
        assert!(parse_block("", Path::new("x")).is_err());
    }
}
