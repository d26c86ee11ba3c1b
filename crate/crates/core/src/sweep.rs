//! Width-search experiment harness.
//!
//! For each sequence length `L` and trial, a fresh target `A` is sampled and
//! the attention width `d` is increased along an ascending grid. At each
//! width up to `round(q·L)` projections are drawn; the first width with a
//! passing draw is `d_min`. Records stream into a CSV that doubles as a
//! resume log.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::LogitMatrix;
use crate::construct::Pipeline;
use crate::error::{Error, Result};
use crate::matrices::{generate, ApproxParams, SparseStochasticMatrix};
use crate::seed::hash64;
use crate::verify::{check_conditions, ApproxReport};

pub const CSV_HEADER: &str = "L,trial,q,d_min,theoretical_d,redraws_used,seed";

/// Right-hand side of the width bound:
/// `32 eps2⁻² k² max(log gamma - log eps1 + eps2, 1)² (2 log L + log(L-1) + log 2)`.
pub fn theoretical_d(params: &ApproxParams, l: usize) -> f64 {
    let lf = l as f64;
    let spread = (params.gamma.ln() - params.eps1.ln() + params.eps2).max(1.0);
    let k = params.k as f64;
    32.0 / (params.eps2 * params.eps2)
        * k
        * k
        * spread
        * spread
        * (2.0 * lf.ln() + (lf - 1.0).ln() + 2f64.ln())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    /// Problem parameters; `params.l` is overridden per grid point.
    pub params: ApproxParams,
    pub l_grid: Vec<usize>,
    pub d_lower: usize,
    pub d_upper: usize,
    pub d_points: usize,
    pub q: f64,
    pub trials_per_l: usize,
    pub master_seed: u64,
    /// Only used by [`q_sweep`].
    pub q_values: Vec<f64>,
}

impl SweepConfig {
    /// `d_points` values evenly spaced over `[d_lower, d_upper]` (both
    /// inclusive), each rounded to the nearest even integer, deduplicated.
    pub fn d_grid(&self) -> Vec<usize> {
        let (lo, hi) = (self.d_lower as f64, self.d_upper as f64);
        let n = self.d_points;
        let mut grid: Vec<usize> = (0..n)
            .map(|i| {
                let x = if n == 1 {
                    lo
                } else {
                    lo + (hi - lo) * i as f64 / (n - 1) as f64
                };
                2 * ((x / 2.0).round() as usize)
            })
            .filter(|&d| d >= 2)
            .collect();
        grid.dedup();
        grid
    }

    /// The grid restricted to widths realizable at length `l` (`d <= 2L`).
    pub fn d_grid_for(&self, l: usize) -> Vec<usize> {
        self.d_grid().into_iter().filter(|&d| d <= 2 * l).collect()
    }

    pub fn redraws(&self, l: usize) -> u64 {
        redraw_count(self.q, l)
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.l_grid.is_empty() {
            bad.push("L_grid must list at least one length".to_string());
        }
        if let Some(&l) = self.l_grid.iter().min() {
            if let Err(e) = self.params.with_l(l).validate() {
                bad.push(e.to_string());
            }
        } else if let Err(e) = self.params.validate() {
            bad.push(e.to_string());
        }
        if self.d_lower > self.d_upper {
            bad.push(format!(
                "d_lower ({}) must not exceed d_upper ({})",
                self.d_lower, self.d_upper
            ));
        }
        if self.d_points == 0 {
            bad.push("d_points must be >= 1".into());
        }
        if !(self.q > 0.0 && self.q.is_finite()) {
            bad.push(format!("q must be positive, got {}", self.q));
        }
        if self.trials_per_l == 0 {
            bad.push("trials_per_L must be >= 1".into());
        }
        if self.q_values.iter().any(|&q| !(q > 0.0 && q.is_finite())) {
            bad.push("q_values must all be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    /// Parses flat `key = value` lines; `#` starts a comment and lists are
    /// comma-separated. Every problem is reported, not just the first.
    pub fn parse(text: &str) -> Result<Self> {
        let mut errors = Vec::new();
        let mut raw: Vec<(String, String, usize)> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => raw.push((k.trim().to_string(), v.trim().to_string(), n + 1)),
                None => errors.push(format!("line {}: expected `key = value`", n + 1)),
            }
        }

        fn one<T: std::str::FromStr>(
            raw: &[(String, String, usize)],
            errors: &mut Vec<String>,
            key: &str,
            default: Option<T>,
        ) -> Option<T> {
            match raw.iter().rev().find(|(k, _, _)| k == key) {
                Some((_, v, n)) => match v.parse() {
                    Ok(x) => Some(x),
                    Err(_) => {
                        errors.push(format!("line {n}: `{key}`: cannot parse `{v}`"));
                        None
                    }
                },
                None if default.is_some() => default,
                None => {
                    errors.push(format!("missing required key `{key}`"));
                    None
                }
            }
        }

        fn list<T: std::str::FromStr>(
            raw: &[(String, String, usize)],
            errors: &mut Vec<String>,
            key: &str,
            required: bool,
        ) -> Option<Vec<T>> {
            match raw.iter().rev().find(|(k, _, _)| k == key) {
                Some((_, v, n)) => v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<T>())
                    .collect::<std::result::Result<Vec<T>, _>>()
                    .map_err(|_| errors.push(format!("line {n}: `{key}`: cannot parse list `{v}`")))
                    .ok(),
                None if required => {
                    errors.push(format!("missing required key `{key}`"));
                    None
                }
                None => Some(Vec::new()),
            }
        }

        const KNOWN: [&str; 14] = [
            "L_grid",
            "k",
            "gamma",
            "eps1",
            "eps2",
            "causal",
            "d_lower",
            "d_upper",
            "d_points",
            "q",
            "trials_per_L",
            "master_seed",
            "q_values",
            "L",
        ];
        for (k, _, n) in &raw {
            if !KNOWN.contains(&k.as_str()) {
                errors.push(format!("line {n}: unknown key `{k}`"));
            }
        }

        let l_grid = list::<usize>(&raw, &mut errors, "L_grid", true);
        let k = one::<usize>(&raw, &mut errors, "k", None);
        let gamma = one::<f64>(&raw, &mut errors, "gamma", None);
        let eps1 = one::<f64>(&raw, &mut errors, "eps1", None);
        let eps2 = one::<f64>(&raw, &mut errors, "eps2", None);
        let causal = match raw.iter().rev().find(|(k, _, _)| k == "causal") {
            None => Some(false),
            Some((_, v, n)) => match v.as_str() {
                "1" | "true" => Some(true),
                "0" | "false" => Some(false),
                _ => {
                    errors.push(format!("line {n}: `causal`: expected 0/1/true/false, got `{v}`"));
                    None
                }
            },
        };
        let d_lower = one::<usize>(&raw, &mut errors, "d_lower", None);
        let d_upper = one::<usize>(&raw, &mut errors, "d_upper", None);
        let d_points = one::<usize>(&raw, &mut errors, "d_points", Some(30));
        let q = one::<f64>(&raw, &mut errors, "q", Some(1.0));
        let trials = one::<usize>(&raw, &mut errors, "trials_per_L", Some(5));
        let master_seed = one::<u64>(&raw, &mut errors, "master_seed", Some(0));
        let q_values = list::<f64>(&raw, &mut errors, "q_values", false);

        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        let l_grid = l_grid.unwrap();
        let cfg = SweepConfig {
            params: ApproxParams {
                l: l_grid.first().copied().unwrap_or(0),
                k: k.unwrap(),
                gamma: gamma.unwrap(),
                eps1: eps1.unwrap(),
                eps2: eps2.unwrap(),
                causal: causal.unwrap(),
            },
            l_grid,
            d_lower: d_lower.unwrap(),
            d_upper: d_upper.unwrap(),
            d_points: d_points.unwrap(),
            q: q.unwrap(),
            trials_per_l: trials.unwrap(),
            master_seed: master_seed.unwrap(),
            q_values: q_values.unwrap(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

/// `round(q·L)`, at least one.
pub fn redraw_count(q: f64, l: usize) -> u64 {
    ((q * l as f64).round() as u64).max(1)
}

/// Seed of projection draw `t` at width `d` for a record seeded with `seed`.
pub fn redraw_seed(seed: u64, d: usize, t: u64) -> u64 {
    hash64(seed, &[d as u64, t])
}

/// Seed of the `(L, trial)` record; it seeds both the target sampler and,
/// via [`redraw_seed`], every projection draw.
pub fn record_seed(master_seed: u64, l: usize, trial: usize) -> u64 {
    hash64(master_seed, &[l as u64, trial as u64])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRecord {
    pub l: usize,
    pub trial: usize,
    pub q: f64,
    /// `None` when no grid width produced a passing draw.
    pub d_min: Option<usize>,
    pub theoretical_d: f64,
    pub redraws_used: u64,
    pub seed: u64,
}

impl SweepRecord {
    fn key(&self) -> RecordKey {
        RecordKey::new(self.l, self.trial, self.q)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RecordKey {
    l: usize,
    trial: usize,
    q_bits: u64,
}

impl RecordKey {
    pub fn new(l: usize, trial: usize, q: f64) -> Self {
        Self {
            l,
            trial,
            q_bits: q.to_bits(),
        }
    }
}

/// Draws projection `t` at width `d` and checks it.
pub fn evaluate_draw(
    pipe: &Pipeline,
    a: &SparseStochasticMatrix,
    params: &ApproxParams,
    d: usize,
    seed: u64,
) -> Result<ApproxReport> {
    let pair = pipe.project(d, seed)?;
    let z = LogitMatrix(pair.logits());
    Ok(check_conditions(&z, a, params.eps1, params.eps2, params.causal))
}

/// Index of the first passing draw among `0..n` at width `d`.
///
/// Draws are evaluated in parallel batches of the pool size; the smallest
/// passing index wins, so the answer does not depend on scheduling.
pub fn first_passing_draw(
    pipe: &Pipeline,
    a: &SparseStochasticMatrix,
    params: &ApproxParams,
    d: usize,
    seed: u64,
    n: u64,
) -> Result<Option<u64>> {
    let batch = rayon::current_num_threads().max(1) as u64;
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        let outcomes: Vec<Result<bool>> = (start..end)
            .into_par_iter()
            .map(|t| evaluate_draw(pipe, a, params, d, redraw_seed(seed, d, t)).map(|r| r.passed))
            .collect();
        for (t, ok) in (start..end).zip(outcomes) {
            if ok? {
                return Ok(Some(t));
            }
        }
        start = end;
    }
    Ok(None)
}

/// Walks the ascending width grid until some draw passes.
pub fn find_dmin(
    a: &SparseStochasticMatrix,
    cfg: &SweepConfig,
    trial: usize,
    seed: u64,
) -> Result<SweepRecord> {
    let l = a.l();
    let params = cfg.params.with_l(l);
    let pipe = Pipeline::new(a, params.eps1, params.eps2)?;
    let n = cfg.redraws(l);
    let mut redraws_used = 0;
    let mut d_min = None;
    for d in cfg.d_grid_for(l) {
        match first_passing_draw(&pipe, a, &params, d, seed, n)? {
            Some(t) => {
                redraws_used += t + 1;
                d_min = Some(d);
                break;
            }
            None => redraws_used += n,
        }
    }
    Ok(SweepRecord {
        l,
        trial,
        q: cfg.q,
        d_min,
        theoretical_d: theoretical_d(&params, l),
        redraws_used,
        seed,
    })
}

/// Recomputes the passing draw of a found record: `(draw index, report)`.
pub fn replay(cfg: &SweepConfig, record: &SweepRecord) -> Result<Option<(u64, ApproxReport)>> {
    let Some(d) = record.d_min else {
        return Ok(None);
    };
    let params = cfg.params.with_l(record.l);
    let a = generate(&params, record.seed)?;
    let pipe = Pipeline::new(&a, params.eps1, params.eps2)?;
    let n = redraw_count(record.q, record.l);
    match first_passing_draw(&pipe, &a, &params, d, record.seed, n)? {
        Some(t) => {
            let rep = evaluate_draw(&pipe, &a, &params, d, redraw_seed(record.seed, d, t))?;
            Ok(Some((t, rep)))
        }
        None => Ok(None),
    }
}

/// Destination for finished records; also answers which records exist.
pub trait RecordSink {
    fn contains(&self, key: &RecordKey) -> bool;
    fn push(&mut self, record: &SweepRecord) -> Result<()>;
}

#[derive(Debug, Default)]
pub struct MemorySink {
    pub records: Vec<SweepRecord>,
}

impl RecordSink for MemorySink {
    fn contains(&self, key: &RecordKey) -> bool {
        self.records.iter().any(|r| &r.key() == key)
    }

    fn push(&mut self, record: &SweepRecord) -> Result<()> {
        self.records.push(record.clone());
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    #[serde(rename = "L")]
    l: usize,
    trial: usize,
    q: f64,
    d_min: i64,
    theoretical_d: f64,
    redraws_used: u64,
    seed: u64,
}

impl From<&SweepRecord> for CsvRow {
    fn from(r: &SweepRecord) -> Self {
        CsvRow {
            l: r.l,
            trial: r.trial,
            q: r.q,
            d_min: r.d_min.map_or(-1, |d| d as i64),
            theoretical_d: r.theoretical_d,
            redraws_used: r.redraws_used,
            seed: r.seed,
        }
    }
}

impl From<CsvRow> for SweepRecord {
    fn from(r: CsvRow) -> Self {
        SweepRecord {
            l: r.l,
            trial: r.trial,
            q: r.q,
            d_min: usize::try_from(r.d_min).ok(),
            theoretical_d: r.theoretical_d,
            redraws_used: r.redraws_used,
            seed: r.seed,
        }
    }
}

/// Append-only CSV of records. Opening an existing file loads the
/// completed keys and drops a trailing partial line left by an interrupted
/// run.
pub struct CsvSink {
    path: PathBuf,
    done: HashSet<RecordKey>,
    file: File,
}

impl CsvSink {
    pub fn open(path: &Path) -> Result<Self> {
        let mut done = HashSet::new();
        let existing = fs::read_to_string(path).unwrap_or_default();
        let complete = match existing.rfind('\n') {
            Some(p) => &existing[..=p],
            None => "",
        };
        if complete.len() != existing.len() {
            fs::write(path, complete)?;
        }
        if complete.trim().is_empty() {
            fs::write(path, format!("{CSV_HEADER}\n"))?;
        } else {
            for rec in read_records_str(complete)? {
                done.insert(rec.key());
            }
        }
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            done,
            file,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl RecordSink for CsvSink {
    fn contains(&self, key: &RecordKey) -> bool {
        self.done.contains(key)
    }

    fn push(&mut self, record: &SweepRecord) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(Vec::new());
        w.serialize(CsvRow::from(record))?;
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        self.file.write_all(&bytes)?;
        self.file.flush()?;
        self.done.insert(record.key());
        Ok(())
    }
}

fn read_records_str(text: &str) -> Result<Vec<SweepRecord>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    rdr.deserialize::<CsvRow>()
        .map(|r| r.map(SweepRecord::from).map_err(Error::from))
        .collect()
}

pub fn read_records(path: &Path) -> Result<Vec<SweepRecord>> {
    read_records_str(&fs::read_to_string(path)?)
}

#[derive(Debug)]
pub struct SweepFailure {
    pub l: usize,
    pub trial: usize,
    pub error: Error,
}

#[derive(Debug, Default)]
pub struct SweepOutcome {
    /// Records produced by this run; records already in the sink are skipped.
    pub records: Vec<SweepRecord>,
    pub failures: Vec<SweepFailure>,
}

fn sweep_impl(cfg: &SweepConfig, q_values: &[f64], sink: &mut dyn RecordSink) -> Result<SweepOutcome> {
    cfg.validate()?;
    let mut outcome = SweepOutcome::default();
    for &l in &cfg.l_grid {
        for trial in 0..cfg.trials_per_l {
            let pending: Vec<f64> = q_values
                .iter()
                .copied()
                .filter(|&q| !sink.contains(&RecordKey::new(l, trial, q)))
                .collect();
            if pending.is_empty() {
                continue;
            }
            let seed = record_seed(cfg.master_seed, l, trial);
            let a = match generate(&cfg.params.with_l(l), seed) {
                Ok(a) => a,
                Err(error) => {
                    outcome.failures.push(SweepFailure { l, trial, error });
                    continue;
                }
            };
            for q in pending {
                let run_cfg = SweepConfig { q, ..cfg.clone() };
                match find_dmin(&a, &run_cfg, trial, seed) {
                    Ok(rec) => {
                        sink.push(&rec)?;
                        outcome.records.push(rec);
                    }
                    Err(error) => outcome.failures.push(SweepFailure { l, trial, error }),
                }
            }
        }
    }
    Ok(outcome)
}

/// One record per `(L, trial)` at the configured `q`.
pub fn run_sweep(cfg: &SweepConfig, sink: &mut dyn RecordSink) -> Result<SweepOutcome> {
    sweep_impl(cfg, &[cfg.q], sink)
}

/// One record per `(L, trial, q)`; the targets and draw seeds are shared
/// across `q`, so larger `q` only extends the sequence of draws.
pub fn q_sweep(cfg: &SweepConfig, q_values: &[f64], sink: &mut dyn RecordSink) -> Result<SweepOutcome> {
    if q_values.is_empty() {
        return Err(Error::Config(vec!["q_values must not be empty".into()]));
    }
    sweep_impl(cfg, q_values, sink)
}

/// Least-squares fit `d_min = a + b·ln L`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogFit {
    pub a: f64,
    pub b: f64,
    /// Coefficient of determination; 1.0 when `d_min` has zero variance.
    pub r2: f64,
}

pub fn log_fit(records: &[SweepRecord]) -> Result<LogFit> {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| r.d_min.map(|d| ((r.l as f64).ln(), d as f64)))
        .collect();
    let mut ls: Vec<usize> = records.iter().filter(|r| r.d_min.is_some()).map(|r| r.l).collect();
    ls.sort_unstable();
    ls.dedup();
    if ls.len() < 2 {
        return Err(Error::InvalidParams(format!(
            "log fit needs found d_min at >= 2 distinct L, got {}",
            ls.len()
        )));
    }
    Ok(fit_points(&pts))
}

/// Ordinary least squares of `y` on `x` over `(x, y)` points.
fn fit_points(pts: &[(f64, f64)]) -> LogFit {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let ss_res: f64 = pts.iter().map(|p| (p.1 - a - b * p.0).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    LogFit { a, b, r2 }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(l_grid: Vec<usize>) -> SweepConfig {
        SweepConfig {
            params: ApproxParams::new(64, 1, 1.0, 0.15, 1.41, false).unwrap(),
            l_grid,
            d_lower: 4,
            d_upper: 128,
            d_points: 12,
            q: 1.0,
            trials_per_l: 1,
            master_seed: 3,
            q_values: vec![],
        }
    }

    #[test]
    fn theoretical_d_at_512() {
        let p = ApproxParams::new(512, 1, 1.0, 0.15, 1.41, false).unwrap();
        let lf = 512f64;
        let oracle = 32.0 / 1.41f64.powi(2)
            * (0.0 - 0.15f64.ln() + 1.41).powi(2)
            * (2.0 * lf.ln() + 511f64.ln() + 2f64.ln());
        let got = theoretical_d(&p, 512);
        assert!((got - oracle).abs() / oracle < 1e-12);
        assert!((got - 3416.263_799_439_743).abs() < 1e-8);
    }

    #[test]
    fn theoretical_d_clamps_and_scales() {
        // log(1) - log(eps1) + eps2 = 1 exactly when eps1 = exp(eps2 - 1)
        let eps2: f64 = 0.5;
        let p = ApproxParams::new(8, 1, 1.0, (eps2 - 1.0).exp(), eps2, false).unwrap();
        let lf = 8f64;
        let want = 32.0 / (eps2 * eps2) * (2.0 * lf.ln() + 7f64.ln() + 2f64.ln());
        assert!((theoretical_d(&p, 8) - want).abs() / want < 1e-12);

        let f = |l: f64| 2.0 * l.ln() + (l - 1.0).ln() + 2f64.ln();
        let ratio = theoretical_d(&p, 1024) / theoretical_d(&p, 512);
        assert!((ratio - f(1024.0) / f(512.0)).abs() < 1e-12);
    }

    #[test]
    fn d_grid_is_even_inclusive_and_ascending() {
        let mut c = cfg(vec![512]);
        c.d_lower = 200;
        c.d_upper = 600;
        c.d_points = 30;
        let g = c.d_grid();
        assert_eq!(g.first(), Some(&200));
        assert_eq!(g.last(), Some(&600));
        assert_eq!(g.len(), 30);
        assert!(g.iter().all(|d| d % 2 == 0));
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert!(c.d_grid_for(128).iter().all(|&d| d <= 256));
    }

    #[test]
    fn redraw_rounding() {
        assert_eq!(redraw_count(0.1, 512), 51);
        assert_eq!(redraw_count(1.0, 512), 512);
        assert_eq!(redraw_count(0.001, 10), 1);
    }

    #[test]
    fn full_width_grid_always_finds() {
        let mut c = cfg(vec![16]);
        c.d_lower = 32;
        c.d_upper = 32;
        c.d_points = 1;
        let a = generate(&c.params.with_l(16), 1).unwrap();
        let rec = find_dmin(&a, &c, 0, 9).unwrap();
        assert_eq!(rec.d_min, Some(32));
        assert_eq!(rec.redraws_used, 1);
    }

    #[test]
    fn tiny_grid_is_not_found() {
        let mut c = cfg(vec![128]);
        c.d_lower = 2;
        c.d_upper = 4;
        c.d_points = 2;
        c.q = 0.1;
        let a = generate(&c.params.with_l(128), 1).unwrap();
        let rec = find_dmin(&a, &c, 0, 9).unwrap();
        assert_eq!(rec.d_min, None);
        assert_eq!(rec.redraws_used, 2 * 13);
    }

    #[test]
    fn sweep_cardinality_and_determinism() {
        let mut c = cfg(vec![32, 48]);
        c.trials_per_l = 2;
        let mut s1 = MemorySink::default();
        let out = run_sweep(&c, &mut s1).unwrap();
        assert_eq!(out.records.len(), 4);
        assert!(out.failures.is_empty());
        let mut s2 = MemorySink::default();
        run_sweep(&c, &mut s2).unwrap();
        assert_eq!(s1.records, s2.records);
        for r in &s1.records {
            let fresh = theoretical_d(&c.params.with_l(r.l), r.l);
            assert!((r.theoretical_d - fresh).abs() / fresh < 1e-9);
            if r.d_min.is_some() {
                let (_, rep) = replay(&c, r).unwrap().expect("replay passes");
                assert!(rep.passed);
            }
        }
    }

    #[test]
    fn q_sweep_tags_records() {
        let c = cfg(vec![32]);
        let mut sink = MemorySink::default();
        let out = q_sweep(&c, &[0.1, 1.0, 5.0], &mut sink).unwrap();
        let qs: Vec<f64> = out.records.iter().map(|r| r.q).collect();
        assert_eq!(qs, vec![0.1, 1.0, 5.0]);
        // shared draw sequence: more draws can only find a width sooner
        let d: Vec<usize> = out.records.iter().map(|r| r.d_min.unwrap()).collect();
        assert!(d[2] <= d[1] && d[1] <= d[0]);
    }

    #[test]
    fn csv_resume_skips_completed_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        let mut c = cfg(vec![24, 32]);
        c.trials_per_l = 2;

        let full = {
            let mut sink = CsvSink::open(&path).unwrap();
            run_sweep(&c, &mut sink).unwrap();
            fs::read_to_string(&path).unwrap()
        };
        assert!(full.starts_with(CSV_HEADER));
        assert_eq!(full.lines().count(), 5);

        // simulate an interruption: keep two records plus half of the third
        let lines: Vec<&str> = full.lines().collect();
        let partial = format!("{}\n{}\n{}\n{}", lines[0], lines[1], lines[2], &lines[3][..5]);
        fs::write(&path, partial).unwrap();
        let mut sink = CsvSink::open(&path).unwrap();
        let out = run_sweep(&c, &mut sink).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(fs::read_to_string(&path).unwrap(), full);

        let mut sink = CsvSink::open(&path).unwrap();
        assert!(run_sweep(&c, &mut sink).unwrap().records.is_empty());
        assert_eq!(read_records(&path).unwrap().len(), 4);
    }

    #[test]
    fn not_found_serializes_as_minus_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nf.csv");
        let rec = SweepRecord {
            l: 8,
            trial: 0,
            q: 1.0,
            d_min: None,
            theoretical_d: 1.5,
            redraws_used: 3,
            seed: 42,
        };
        let mut sink = CsvSink::open(&path).unwrap();
        sink.push(&rec).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().nth(1), Some("8,0,1.0,-1,1.5,3,42"));
        assert_eq!(read_records(&path).unwrap(), vec![rec]);
    }

    #[test]
    fn log_fit_examples() {
        let mk = |l: usize, d: usize| SweepRecord {
            l,
            trial: 0,
            q: 1.0,
            d_min: Some(d),
            theoretical_d: 1.0,
            redraws_used: 1,
            seed: 0,
        };
        let exact: Vec<(f64, f64)> = [8f64, 64.0, 512.0]
            .iter()
            .map(|&l| (l.ln(), 10.0 + 3.0 * l.ln()))
            .collect();
        let fit = fit_points(&exact);
        assert!((fit.a - 10.0).abs() < 1e-9 && (fit.b - 3.0).abs() < 1e-9);
        assert!((fit.r2 - 1.0).abs() < 1e-12);

        let flat = vec![mk(64, 100), mk(128, 100), mk(256, 100)];
        let fit = log_fit(&flat).unwrap();
        assert_eq!((fit.b, fit.r2), (0.0, 1.0));

        assert!(log_fit(&[mk(64, 10), mk(64, 12)]).is_err());
        let mut nf = mk(128, 0);
        nf.d_min = None;
        assert!(log_fit(&[mk(64, 10), nf]).is_err());
    }

    #[test]
    fn config_parsing() {
        let text = "\
# k = 1 grid
L_grid = 512, 768, 1024
k = 1
gamma = 1.0
eps1 = 0.15
eps2 = 1.41
d_lower = 200
d_upper = 600
d_points = 30
master_seed = 7
";
        let c = SweepConfig::parse(text).unwrap();
        assert_eq!(c.l_grid, vec![512, 768, 1024]);
        assert_eq!((c.q, c.trials_per_l), (1.0, 5));
        let g = c.d_grid();
        assert_eq!((g[0], g[g.len() - 1], g.len()), (200, 600, 30));

        let err = SweepConfig::parse("L_grid = 8\nk = x\nbogus = 1\ngamma = 1\n")
            .unwrap_err()
            .to_string();
        for needle in ["`k`", "unknown key `bogus`", "missing required key `eps1`", "`d_upper`"] {
            assert!(err.contains(needle), "{needle} in {err}");
        }

        let err = SweepConfig::parse(&text.replace("512, 768, 1024", "")).unwrap_err();
        assert!(err.to_string().contains("L_grid must list"), "{err}");
    }
}
