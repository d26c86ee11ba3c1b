//! Dot-product concentration under random projections: orthogonal rows of
//! fixed length versus i.i.d. Gaussian rows.
//!
//! For a projection `R` with `m` rows of scale `sigma`, the statistic
//! `(Rx)ᵀ(Ry) / (m sigma²)` is an unbiased estimate of `xᵀy`. The benchmark
//! measures how often it deviates by at least `eps·|x|·|y|` and compares that
//! with the tail bound of each mode.

use std::fmt;
use std::sync::Arc;

use faer::Mat;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::construct::sample_stiefel;
use crate::error::{Error, Result};
use crate::registry::{Named, Registry};
use crate::seed::{self, hash64};

/// A random projection family.
pub trait Projector: Named + Send + Sync {
    /// An `m × p` projection matrix.
    fn sample(&self, p: usize, m: usize, sigma: f64, seed: u64) -> Result<Mat<f64>>;

    /// Upper bound on `P[|stat - xᵀy| >= eps |x||y|]`.
    fn tail_bound(&self, p: usize, m: usize, eps: f64) -> f64;
}

/// Rows are `sigma·sqrt(p)` times the rows of `Yᵀ` for a Haar Stiefel
/// `Y ∈ R^{p×m}`: exactly orthogonal, each of length `sigma·sqrt(p)`.
pub struct Orthogonal;

/// Rows are independent `sigma·N(0, I_p)`.
pub struct Iid;

impl Named for Orthogonal {
    fn name(&self) -> &'static str {
        "orthogonal"
    }
}

impl Projector for Orthogonal {
    fn sample(&self, p: usize, m: usize, sigma: f64, seed: u64) -> Result<Mat<f64>> {
        let y = sample_stiefel(p, m, seed)?.y;
        let scale = sigma * (p as f64).sqrt();
        Ok(Mat::from_fn(m, p, |r, c| scale * y[(c, r)]))
    }

    fn tail_bound(&self, p: usize, m: usize, eps: f64) -> f64 {
        (2.0 - 2.0 / (p as f64 + 2.0)) * (-(m as f64) * eps * eps / 8.0).exp()
    }
}

impl Named for Iid {
    fn name(&self) -> &'static str {
        "iid"
    }
}

impl Projector for Iid {
    fn sample(&self, p: usize, m: usize, sigma: f64, seed: u64) -> Result<Mat<f64>> {
        let mut rng = seed::rng(seed);
        let mut r = Mat::zeros(m, p);
        for i in 0..m {
            for j in 0..p {
                r[(i, j)] = sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(r)
    }

    fn tail_bound(&self, _p: usize, m: usize, eps: f64) -> f64 {
        2.0 * (-(m as f64) * eps * eps / 8.0).exp()
    }
}

pub fn projectors() -> Registry<dyn Projector> {
    Registry::<dyn Projector>::new("projection mode")
        .with(Arc::new(Orthogonal))
        .with(Arc::new(Iid))
}

#[derive(Clone)]
pub struct JltParams {
    pub p: usize,
    pub m: usize,
    pub sigma: f64,
    pub mode: Arc<dyn Projector>,
    pub epsilon: f64,
    pub n_samples: usize,
}

impl fmt::Debug for JltParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("JltParams")
            .field("p", &self.p)
            .field("m", &self.m)
            .field("sigma", &self.sigma)
            .field("mode", &self.mode.name())
            .field("epsilon", &self.epsilon)
            .field("n_samples", &self.n_samples)
            .finish()
    }
}

impl JltParams {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.m > self.p {
            return Err(Error::InvalidParams(format!(
                "need 1 <= m <= p, got m={} p={}",
                self.m, self.p
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidParams(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidParams(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if self.n_samples == 0 {
            return Err(Error::InvalidParams("n_samples must be >= 1".into()));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `(Rx)ᵀ(Ry) / (m sigma²)` for one projection drawn from `seed`.
pub fn project_pair(x: &[f64], y: &[f64], params: &JltParams, seed: u64) -> Result<f64> {
    if x.len() != params.p || y.len() != params.p {
        return Err(Error::Dimension(format!(
            "vectors have lengths {} and {}, expected p = {}",
            x.len(),
            y.len(),
            params.p
        )));
    }
    let r = params.mode.sample(params.p, params.m, params.sigma, seed)?;
    let mut acc = 0.0;
    for i in 0..params.m {
        let row = r.row(i);
        let (mut rx, mut ry) = (0.0, 0.0);
        for (j, &v) in row.iter().enumerate() {
            rx += v * x[j];
            ry += v * y[j];
        }
        acc += rx * ry;
    }
    Ok(acc / (params.m as f64 * params.sigma * params.sigma))
}

/// The statistic for samples `0..n_samples`; sample `s` uses seed
/// `hash64(seed, [s])`.
pub fn sample_statistics(x: &[f64], y: &[f64], params: &JltParams, seed: u64) -> Result<Vec<f64>> {
    params.validate()?;
    (0..params.n_samples as u64)
        .into_par_iter()
        .map(|s| project_pair(x, y, params, hash64(seed, &[s])))
        .collect()
}

fn exceed_fraction(stats: &[f64], x: &[f64], y: &[f64], eps: f64) -> f64 {
    let truth = dot(x, y);
    let thresh = eps * norm(x) * norm(y);
    let hits = stats.iter().filter(|&&s| (s - truth).abs() >= thresh).count();
    hits as f64 / stats.len() as f64
}

/// Empirical `P[|stat - xᵀy| >= eps |x||y|]`.
pub fn tail_estimate(x: &[f64], y: &[f64], params: &JltParams, seed: u64) -> Result<f64> {
    let stats = sample_statistics(x, y, params, seed)?;
    Ok(exceed_fraction(&stats, x, y, params.epsilon))
}

pub fn theoretical_tail(p: usize, m: usize, epsilon: f64, mode: &dyn Projector) -> f64 {
    mode.tail_bound(p, m, epsilon)
}

/// Binomial standard error of a proportion `prob` estimated from `n` samples.
pub fn proportion_se(prob: f64, n: usize) -> f64 {
    let p = prob.clamp(0.0, 1.0);
    (p * (1.0 - p) / n as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub p: usize,
    pub m: usize,
    pub epsilon: f64,
    pub mode: String,
    pub empirical_tail: f64,
    pub theoretical_tail: f64,
    pub n_samples: usize,
}

impl BenchRow {
    /// Empirical tail within three standard errors of the bound.
    pub fn within_bound(&self) -> bool {
        self.empirical_tail
            <= self.theoretical_tail + 3.0 * proportion_se(self.theoretical_tail, self.n_samples)
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub p_grid: Vec<usize>,
    pub m_grid: Vec<usize>,
    pub eps_grid: Vec<f64>,
    pub modes: Vec<String>,
    pub sigma: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            p_grid: vec![128, 256],
            m_grid: vec![8, 16, 32, 64],
            eps_grid: vec![0.1, 0.25, 0.5],
            modes: vec!["orthogonal".into(), "iid".into()],
            sigma: 1.0,
            n_samples: 10_000,
            seed: 0,
        }
    }
}

/// Fixed Gaussian test vectors for dimension `p`.
pub fn bench_vectors(p: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = seed::rng(hash64(seed, &[p as u64, 0x7ec]));
    let x = (0..p).map(|_| rng.sample(StandardNormal)).collect();
    let y = (0..p).map(|_| rng.sample(StandardNormal)).collect();
    (x, y)
}

/// Runs the `(p, m, mode, eps)` grid. Samples are shared across `eps`.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.n_samples == 0 {
        return Err(Error::InvalidParams("n_samples must be >= 1".into()));
    }
    if let Some(e) = cfg.eps_grid.iter().find(|&&e| !(e > 0.0 && e < 1.0)) {
        return Err(Error::InvalidParams(format!("epsilon must lie in (0, 1), got {e}")));
    }
    let registry = projectors();
    let modes = cfg
        .modes
        .iter()
        .map(|m| registry.get(m))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for &p in &cfg.p_grid {
        let (x, y) = bench_vectors(p, cfg.seed);
        for &m in &cfg.m_grid {
            if m > p {
                return Err(Error::InvalidParams(format!("m = {m} exceeds p = {p}")));
            }
            for mode in &modes {
                let params = JltParams {
                    p,
                    m,
                    sigma: cfg.sigma,
                    mode: mode.clone(),
                    epsilon: 0.5,
                    n_samples: cfg.n_samples,
                };
                let stats = sample_statistics(&x, &y, &params, hash64(cfg.seed, &[p as u64, m as u64]))?;
                for &eps in &cfg.eps_grid {
                    rows.push(BenchRow {
                        p,
                        m,
                        epsilon: eps,
                        mode: mode.name().to_string(),
                        empirical_tail: exceed_fraction(&stats, &x, &y, eps),
                        theoretical_tail: mode.tail_bound(p, m, eps),
                        n_samples: cfg.n_samples,
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn write_bench_csv(rows: &[BenchRow], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Paired comparison of squared estimation error, orthogonal minus i.i.d.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct MseComparison {
    pub mse_orthogonal: f64,
    pub mse_iid: f64,
    /// Mean of the per-seed differences and its standard error.
    pub mean_diff: f64,
    pub se_diff: f64,
}

pub fn paired_mse(
    x: &[f64],
    y: &[f64],
    p: usize,
    m: usize,
    n: usize,
    seed: u64,
) -> Result<MseComparison> {
    let truth = dot(x, y);
    let mk = |mode: Arc<dyn Projector>| JltParams {
        p,
        m,
        sigma: 1.0,
        mode,
        epsilon: 0.5,
        n_samples: n,
    };
    let so = sample_statistics(x, y, &mk(Arc::new(Orthogonal)), seed)?;
    let si = sample_statistics(x, y, &mk(Arc::new(Iid)), seed)?;
    let diffs: Vec<f64> = so
        .iter()
        .zip(&si)
        .map(|(o, i)| (o - truth).powi(2) - (i - truth).powi(2))
        .collect();
    let nf = n as f64;
    let mean = diffs.iter().sum::<f64>() / nf;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (nf - 1.0).max(1.0);
    Ok(MseComparison {
        mse_orthogonal: so.iter().map(|s| (s - truth).powi(2)).sum::<f64>() / nf,
        mse_iid: si.iter().map(|s| (s - truth).powi(2)).sum::<f64>() / nf,
        mean_diff: mean,
        se_diff: (var / nf).sqrt(),
    })
}
