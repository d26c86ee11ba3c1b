//! Max-pooled, clipped grayscale renderings of square matrices as ASCII PGM.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::attention::AttentionMatrix;
use crate::dense::RowMatrix;
use crate::error::{Error, Result};
use crate::matrices::SparseStochasticMatrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSpec {
    pub pool: usize,
    pub clip: f64,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self { pool: 8, clip: 0.05 }
    }
}

impl RenderSpec {
    pub fn validate(&self, l: usize) -> Result<()> {
        if self.pool == 0 || l % self.pool != 0 {
            return Err(Error::InvalidParams(format!(
                "pool window {} must be >= 1 and divide L = {l}",
                self.pool
            )));
        }
        if !(self.clip > 0.0 && self.clip <= 1.0) {
            return Err(Error::InvalidParams(format!(
                "clip must lie in (0, 1], got {}",
                self.clip
            )));
        }
        Ok(())
    }
}

/// Anything that can be viewed as a dense square matrix for rendering.
pub trait Heatmap {
    fn to_dense(&self) -> RowMatrix;
}

impl Heatmap for RowMatrix {
    fn to_dense(&self) -> RowMatrix {
        self.clone()
    }
}

impl Heatmap for AttentionMatrix {
    fn to_dense(&self) -> RowMatrix {
        self.m.clone()
    }
}

impl Heatmap for SparseStochasticMatrix {
    fn to_dense(&self) -> RowMatrix {
        SparseStochasticMatrix::to_dense(self)
    }
}

/// Maximum over each `pool × pool` block.
pub fn max_pool(m: &RowMatrix, pool: usize) -> Result<RowMatrix> {
    let l = m.nrows();
    if m.ncols() != l {
        return Err(Error::Dimension("max pooling expects a square matrix".into()));
    }
    if pool == 0 || l % pool != 0 {
        return Err(Error::InvalidParams(format!(
            "pool window {pool} must be >= 1 and divide L = {l}"
        )));
    }
    let n = l / pool;
    let mut out = RowMatrix::from_fn(n, n, |_, _| f64::NEG_INFINITY);
    for i in 0..l {
        let row = m.row(i);
        let dst = out.row_mut(i / pool);
        for (j, &v) in row.iter().enumerate() {
            let slot = &mut dst[j / pool];
            *slot = slot.max(v);
        }
    }
    Ok(out)
}

/// Pixel values `round(255 · min(block_max, clip) / clip)`.
pub fn render_pixels(m: &impl Heatmap, spec: &RenderSpec) -> Result<Vec<Vec<u8>>> {
    let dense = m.to_dense();
    spec.validate(dense.nrows())?;
    let pooled = max_pool(&dense, spec.pool)?;
    Ok(pooled
        .rows_iter()
        .map(|row| {
            row.iter()
                .map(|&v| (255.0 * v.clamp(0.0, spec.clip) / spec.clip).round() as u8)
                .collect()
        })
        .collect())
}

/// Plain (P2) PGM text with maxval 255.
pub fn pgm_text(pixels: &[Vec<u8>]) -> String {
    let h = pixels.len();
    let w = pixels.first().map_or(0, Vec::len);
    let mut out = format!("P2\n{w} {h}\n255\n");
    for row in pixels {
        let line: Vec<String> = row.iter().map(u8::to_string).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

pub fn render_pgm(m: &impl Heatmap, spec: &RenderSpec, out_path: &Path) -> Result<()> {
    let pixels = render_pixels(m, spec)?;
    fs::write(out_path, pgm_text(&pixels))?;
    Ok(())
}

/// Parses a P2 image written by [`pgm_text`].
pub fn parse_pgm(text: &str) -> Result<Vec<Vec<u8>>> {
    let bad = |msg: &str| Error::InvalidParams(format!("malformed PGM: {msg}"));
    let mut tokens = text.split_whitespace();
    if tokens.next() != Some("P2") {
        return Err(bad("missing P2 magic"));
    }
    let mut num = |what: &str| -> Result<usize> {
        tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(what))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    let mut rows = Vec::with_capacity(h);
    for _ in 0..h {
        let row = (0..w)
            .map(|_| num("pixel").and_then(|v| u8::try_from(v).map_err(|_| bad("pixel"))))
            .collect::<Result<Vec<u8>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Fraction of pooled rows where the argmax block of `candidate` is one of
/// the maximal blocks of `reference`. Ties in `candidate` resolve to the
/// lowest column.
pub fn pooled_argmax_agreement(reference: &RowMatrix, candidate: &RowMatrix) -> f64 {
    assert_eq!(reference.nrows(), candidate.nrows());
    let n = reference.nrows();
    let hits = (0..n)
        .filter(|&u| {
            let c = candidate.row(u);
            let arg = (0..c.len()).fold(0, |b, v| if c[v] > c[b] { v } else { b });
            let r = reference.row(u);
            let best = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            r[arg] == best
        })
        .count();
    hits as f64 / n as f64
}
