//! From a target matrix to attention inputs.
//!
//! `A` is mapped to the shifted log matrix `B` (zero where `A` is zero,
//! `log A_ij - log minnz_i - log eps1 + eps2` elsewhere), `B` is factored as
//! `D Vᵀ` with `D = UΣ`, both factors are compressed by a Haar-random
//! Stiefel matrix `Y` into `X1 = sqrt(2L/d) D Y` and `X2 = sqrt(2L/d) V Y`,
//! and finally laid out as `X = [X1 | X2 | 0]` together with the fixed
//! selector weights `W_Q`, `W_K`.

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatRef, Par};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dense::{write_block, RowMatrix};
use crate::error::{Error, Result};
use crate::matrices::{min_nonzero_rows, SparseStochasticMatrix};
use crate::seed;

/// The shifted log matrix `B` together with the per-row minimum nonzero of `A`.
#[derive(Clone, Debug)]
pub struct LogGapMatrix {
    pub b: Mat<f64>,
    pub min_nz: Vec<f64>,
    pub eps1: f64,
    pub eps2: f64,
}

impl LogGapMatrix {
    pub fn l(&self) -> usize {
        self.b.nrows()
    }
}

pub fn build_log_gap(a: &SparseStochasticMatrix, eps1: f64, eps2: f64) -> Result<LogGapMatrix> {
    if !(eps1 > 0.0 && eps1 < 1.0) || !(eps2 > 0.0) {
        return Err(Error::InvalidParams(format!(
            "need 0 < eps1 < 1 and eps2 > 0, got eps1={eps1} eps2={eps2}"
        )));
    }
    let min_nz = min_nonzero_rows(a)?;
    let l = a.l();
    let shift = eps2 - eps1.ln();
    let mut b = Mat::zeros(l, l);
    for (i, j, v) in a.entries() {
        b[(i, j)] = v.ln() - min_nz[i].ln() + shift;
    }
    Ok(LogGapMatrix {
        b,
        min_nz,
        eps1,
        eps2,
    })
}

/// `C = eps1 · exp(-eps2) · diag(minnz) · exp(B)`, elementwise exponent.
///
/// At nonzeros of `A` the factors cancel algebraically; in floating point
/// the result is within a few ulp, so positions where `B` is nonzero are
/// overwritten with `A` itself.
pub fn reconstruct_c(bm: &LogGapMatrix, a: &SparseStochasticMatrix) -> RowMatrix {
    let l = bm.l();
    let scale = bm.eps1 * (-bm.eps2).exp();
    let mut c = RowMatrix::from_fn(l, l, |i, j| scale * bm.min_nz[i] * bm.b[(i, j)].exp());
    for (i, j, v) in a.entries() {
        c[(i, j)] = v;
    }
    c
}

/// `B = D Vᵀ` with `D = UΣ`.
#[derive(Clone, Debug)]
pub struct Factorization {
    pub d: Mat<f64>,
    pub v: Mat<f64>,
    pub sigma: Vec<f64>,
}

impl Factorization {
    pub fn l(&self) -> usize {
        self.v.nrows()
    }

    pub fn reconstruct(&self) -> Mat<f64> {
        &self.d * self.v.transpose()
    }
}

/// Full dense SVD of `B`. Zero singular values are kept; the matching
/// columns of `D` are then zero.
pub fn svd_factor(bm: &LogGapMatrix) -> Result<Factorization> {
    let l = bm.l();
    if bm.b.col_iter().any(|c| c.iter().any(|x| !x.is_finite())) {
        return Err(Error::InvalidParams("B has non-finite entries".into()));
    }
    let svd = bm.b.svd().map_err(|e| Error::SvdNoConvergence {
        n: l,
        detail: format!("{e:?}"),
    })?;
    let sigma: Vec<f64> = svd.S().column_vector().iter().copied().collect();
    let u = svd.U();
    let d = Mat::from_fn(l, l, |i, j| u[(i, j)] * sigma[j]);
    Ok(Factorization {
        d,
        v: svd.V().to_owned(),
        sigma,
    })
}

/// `L × (d/2)` matrix with orthonormal columns, Haar distributed.
#[derive(Clone, Debug)]
pub struct StiefelSample {
    pub y: Mat<f64>,
    pub seed: u64,
}

/// Q factor of a standard Gaussian `l × half_d` matrix (filled row-major from
/// the seeded stream), with column `j` multiplied by `sign(R_jj)` so that the
/// result is Haar distributed. A zero diagonal counts as positive.
pub fn sample_stiefel(l: usize, half_d: usize, seed: u64) -> Result<StiefelSample> {
    if half_d == 0 || half_d > l {
        return Err(Error::Dimension(format!(
            "Stiefel sample needs 1 <= d/2 <= L, got d/2={half_d} L={l}"
        )));
    }
    let mut rng = seed::rng(seed);
    let mut g = Mat::<f64>::zeros(l, half_d);
    for i in 0..l {
        for j in 0..half_d {
            g[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let qr = g.qr();
    let mut y = qr.compute_thin_Q();
    let r = qr.thin_R();
    for j in 0..half_d {
        if r[(j, j)] < 0.0 {
            y.col_mut(j).iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(StiefelSample { y, seed })
}

/// The compressed factors `X1`, `X2` of width `d/2`.
#[derive(Clone, Debug)]
pub struct ProjectionPair {
    pub x1: Mat<f64>,
    pub x2: Mat<f64>,
    pub d: usize,
}

impl ProjectionPair {
    /// `X1 X2ᵀ` in row-major form.
    pub fn logits(&self) -> RowMatrix {
        // (X2 X1ᵀ) column i is row i of X1 X2ᵀ
        let l = self.x1.nrows();
        let mut zt = Mat::<f64>::zeros(l, l);
        matmul(
            zt.as_mut(),
            Accum::Replace,
            self.x2.as_ref(),
            self.x1.transpose(),
            1.0,
            Par::Seq,
        );
        RowMatrix::from_faer_transposed(zt.as_ref())
    }
}

fn scaled_product(a: MatRef<'_, f64>, b: MatRef<'_, f64>, alpha: f64) -> Mat<f64> {
    let mut out = Mat::zeros(a.nrows(), b.ncols());
    matmul(out.as_mut(), Accum::Replace, a, b, alpha, Par::Seq);
    out
}

pub fn compress(f: &Factorization, y: &StiefelSample, d: usize) -> Result<ProjectionPair> {
    let l = f.l();
    if d == 0 || d % 2 != 0 {
        return Err(Error::Dimension(format!("d must be a positive even integer, got {d}")));
    }
    if y.y.nrows() != l || y.y.ncols() != d / 2 {
        return Err(Error::Dimension(format!(
            "Stiefel sample is {}x{}, expected {l}x{}",
            y.y.nrows(),
            y.y.ncols(),
            d / 2
        )));
    }
    let c = (2.0 * l as f64 / d as f64).sqrt();
    Ok(ProjectionPair {
        x1: scaled_product(f.d.as_ref(), y.y.as_ref(), c),
        x2: scaled_product(f.v.as_ref(), y.y.as_ref(), c),
        d,
    })
}

/// Attention inputs `X = [X1 | X2 | 0]`, `W_Q = [I_d | 0]ᵀ`,
/// `W_K = [Ω_d | 0]ᵀ` where `Ω_d` has `I_{d/2}` in its top-right block.
#[derive(Clone, Debug)]
pub struct AttentionInputs {
    pub x: Mat<f64>,
    pub wq: Mat<f64>,
    pub wk: Mat<f64>,
    pub d: usize,
    pub d_hid: usize,
}

/// `W_Q` for width `d` inside hidden size `d_hid`. Independent of the target.
pub fn query_weights(d: usize, d_hid: usize) -> Mat<f64> {
    Mat::from_fn(d_hid, d, |r, c| if r == c { 1.0 } else { 0.0 })
}

/// `W_K` for width `d` inside hidden size `d_hid`. Independent of the target.
pub fn key_weights(d: usize, d_hid: usize) -> Mat<f64> {
    let h = d / 2;
    // W_Kᵀ = [Ω_d | 0] with Ω_d[r, h + r] = 1 for r < h
    Mat::from_fn(d_hid, d, |r, c| if c < h && r == c + h { 1.0 } else { 0.0 })
}

pub fn assemble(p: &ProjectionPair, d_hid: usize) -> Result<AttentionInputs> {
    let (l, h) = (p.x1.nrows(), p.x1.ncols());
    let d = p.d;
    if 2 * h != d || p.x2.nrows() != l || p.x2.ncols() != h {
        return Err(Error::Dimension("projection pair shapes are inconsistent".into()));
    }
    if d_hid < d || d_hid > 2 * l {
        return Err(Error::Dimension(format!(
            "need d <= d_hid <= 2L, got d={d} d_hid={d_hid} L={l}"
        )));
    }
    let x = Mat::from_fn(l, d_hid, |i, c| {
        if c < h {
            p.x1[(i, c)]
        } else if c < d {
            p.x2[(i, c - h)]
        } else {
            0.0
        }
    });
    Ok(AttentionInputs {
        x,
        wq: query_weights(d, d_hid),
        wk: key_weights(d, d_hid),
        d,
        d_hid,
    })
}

impl AttentionInputs {
    pub fn l(&self) -> usize {
        self.x.nrows()
    }

    /// Plain-text dump: `L d d_hid`, then the `X`, `W_Q`, `W_K` blocks.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {} {}\n", self.l(), self.d, self.d_hid);
        write_block(&mut out, "X", self.x.as_ref());
        write_block(&mut out, "WQ", self.wq.as_ref());
        write_block(&mut out, "WK", self.wk.as_ref());
        out
    }
}

/// Everything needed to draw projections for a fixed target: `B` and its
/// factorization.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub log_gap: LogGapMatrix,
    pub factors: Factorization,
}

impl Pipeline {
    pub fn new(a: &SparseStochasticMatrix, eps1: f64, eps2: f64) -> Result<Self> {
        let log_gap = build_log_gap(a, eps1, eps2)?;
        let factors = svd_factor(&log_gap)?;
        Ok(Self { log_gap, factors })
    }

    pub fn l(&self) -> usize {
        self.log_gap.l()
    }

    /// One projection draw of width `d` from `seed`.
    pub fn project(&self, d: usize, seed: u64) -> Result<ProjectionPair> {
        if d == 0 || d % 2 != 0 {
            return Err(Error::Dimension(format!("d must be a positive even integer, got {d}")));
        }
        let y = sample_stiefel(self.l(), d / 2, seed)?;
        compress(&self.factors, &y, d)
    }
}

/// Spectral-norm bound `k · max(log(gamma/eps1) + eps2, 1)` on `σ₁(B)`.
pub fn sigma_bound(k: usize, gamma: f64, eps1: f64, eps2: f64) -> f64 {
    k as f64 * ((gamma / eps1).ln() + eps2).max(1.0)
}
