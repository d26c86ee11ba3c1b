//! Logits and row-normalized attention matrices.

use std::sync::Arc;

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, Par};

use crate::construct::AttentionInputs;
use crate::dense::RowMatrix;
use crate::registry::{Named, Registry};

/// The pre-exponential argument `X W_Q W_Kᵀ Xᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMatrix(pub RowMatrix);

impl LogitMatrix {
    pub fn l(&self) -> usize {
        self.0.nrows()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix {
    pub m: RowMatrix,
    pub causal: bool,
}

impl AttentionMatrix {
    pub fn l(&self) -> usize {
        self.m.nrows()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.m.row(i)
    }
}

/// `Z = (X W_Q)(X W_K)ᵀ`, which costs `O(L² d)` instead of `O(L² d_hid)`.
pub fn logits(ai: &AttentionInputs) -> LogitMatrix {
    let q = &ai.x * &ai.wq;
    let k = &ai.x * &ai.wk;
    let l = ai.l();
    let mut zt = Mat::<f64>::zeros(l, l);
    matmul(zt.as_mut(), Accum::Replace, k.as_ref(), q.transpose(), 1.0, Par::Seq);
    LogitMatrix(RowMatrix::from_faer_transposed(zt.as_ref()))
}

/// Max-subtracted softmax of `src` into `dst`.
fn softmax_into(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    let inv = 1.0 / total;
    dst.iter_mut().for_each(|d| *d *= inv);
}

/// Row-wise softmax.
pub fn sam(z: &LogitMatrix) -> AttentionMatrix {
    let l = z.l();
    let mut m = RowMatrix::zeros(l, l);
    for i in 0..l {
        softmax_into(z.row(i), m.row_mut(i));
    }
    AttentionMatrix { m, causal: false }
}

/// Row `i` is the softmax of `Z[i, ..=i]`; entries right of the diagonal
/// stay exactly zero.
pub fn csam(z: &LogitMatrix) -> AttentionMatrix {
    let l = z.l();
    let mut m = RowMatrix::zeros(l, l);
    for i in 0..l {
        softmax_into(&z.row(i)[..=i], &mut m.row_mut(i)[..=i]);
    }
    AttentionMatrix { m, causal: true }
}

/// A normalization of logits into an attention matrix.
pub trait AttentionKernel: Named + Send + Sync {
    fn causal(&self) -> bool;
    fn apply(&self, z: &LogitMatrix) -> AttentionMatrix;
}

pub struct Full;
pub struct Causal;

impl Named for Full {
    fn name(&self) -> &'static str {
        "sam"
    }
}

impl AttentionKernel for Full {
    fn causal(&self) -> bool {
        false
    }

    fn apply(&self, z: &LogitMatrix) -> AttentionMatrix {
        sam(z)
    }
}

impl Named for Causal {
    fn name(&self) -> &'static str {
        "csam"
    }
}

impl AttentionKernel for Causal {
    fn causal(&self) -> bool {
        true
    }

    fn apply(&self, z: &LogitMatrix) -> AttentionMatrix {
        csam(z)
    }
}

pub fn kernels() -> Registry<dyn AttentionKernel> {
    Registry::<dyn AttentionKernel>::new("attention kernel")
        .with(Arc::new(Full))
        .with(Arc::new(Causal))
}

/// The kernel matching a target's causality.
pub fn kernel_for(causal: bool) -> Arc<dyn AttentionKernel> {
    if causal {
        Arc::new(Causal)
    } else {
        Arc::new(Full)
    }
}
