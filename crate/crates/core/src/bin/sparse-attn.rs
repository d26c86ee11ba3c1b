use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use sparse_attn::attention::{self, kernel_for};
use sparse_attn::concentration::{run_bench, write_bench_csv, BenchConfig};
use sparse_attn::construct::{assemble, Pipeline};
use sparse_attn::dense::{parse_block, write_block, RowMatrix};
use sparse_attn::matrices::{generate, read_coo, validate, write_coo, ApproxParams, CooHeader};
use sparse_attn::render::{render_pgm, Heatmap, RenderSpec};
use sparse_attn::sweep::{log_fit, q_sweep, redraw_count, redraw_seed, run_sweep, CsvSink, SweepConfig, SweepOutcome};
use sparse_attn::verify::{checkers, ApproxReport};
use sparse_attn::{Error, Result};

/// Overrides the worker thread count; defaults to the available parallelism.
const THREADS_ENV: &str = "SPARSE_ATTN_THREADS";

#[derive(Parser)]
#[command(name = "sparse-attn", version, about = "Approximate sparse stochastic matrices with self-attention")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a random sparse stochastic target and write it as COO.
    Generate(GenerateArgs),
    /// Build attention inputs for a target and verify the approximation.
    Approx(ApproxArgs),
    /// Find the smallest passing width over a grid of sequence lengths.
    Sweep(SweepArgs),
    /// Like `sweep`, once per value in the config's `q_values`.
    Qsweep(SweepArgs),
    /// Render a matrix as a max-pooled, clipped PGM image.
    Render(RenderArgs),
    /// Benchmark dot-product concentration of random projections.
    JltBench(JltArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long = "L")]
    l: usize,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    /// Lower-triangular support.
    #[arg(long)]
    causal: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ApproxArgs {
    /// COO target; causality is taken from its header.
    #[arg(long)]
    input: PathBuf,
    /// Projection width, a positive even integer.
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 0.15)]
    eps1: f64,
    #[arg(long, default_value_t = 1.41)]
    eps2: f64,
    /// Redraw budget is round(q·L), at least one.
    #[arg(long, default_value_t = 1.0)]
    q: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Hidden width of X; defaults to d.
    #[arg(long)]
    dhid: Option<usize>,
    /// Condition checker: `log` or `direct`.
    #[arg(long, default_value = "log")]
    checker: String,
    /// JSON report path; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the logits of the last evaluated draw.
    #[arg(long)]
    logits_out: Option<PathBuf>,
    /// Write the attention matrix of the last evaluated draw.
    #[arg(long)]
    m_out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// `key = value` config file.
    config: PathBuf,
    /// CSV output; existing rows are kept and skipped.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    /// COO target or a dense matrix written by `approx --m-out`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 8)]
    pool: usize,
    #[arg(long, default_value_t = 0.05)]
    clip: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct JltArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [128, 256])]
    p: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [8, 16, 32, 64])]
    m: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.25, 0.5])]
    eps: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = ["orthogonal".to_string(), "iid".to_string()])]
    modes: Vec<String>,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 10_000)]
    n_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV path; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct ApproxOutput {
    /// Index of the passing redraw, if any.
    redraw_index: Option<u64>,
    redraws_tried: u64,
    l: usize,
    d: usize,
    d_hid: usize,
    eps1: f64,
    eps2: f64,
    seed: u64,
    draw_seed: u64,
    checker: String,
    causal: bool,
    #[serde(flatten)]
    report: ApproxReport,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    faer::set_global_parallelism(faer::Par::Seq);
    let res = match cli.cmd {
        Cmd::Generate(a) => cmd_generate(a),
        Cmd::Approx(a) => cmd_approx(a),
        Cmd::Sweep(a) => cmd_sweep(a, false),
        Cmd::Qsweep(a) => cmd_sweep(a, true),
        Cmd::Render(a) => cmd_render(a),
        Cmd::JltBench(a) => cmd_jlt(a),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidParams(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidParams(e.to_string()))
}

fn cmd_generate(a: GenerateArgs) -> Result<ExitCode> {
    // eps1/eps2 do not affect generation; any valid pair will do.
    let params = ApproxParams::new(a.l, a.k, a.gamma, 0.5, 1.0, a.causal)?;
    let m = generate(&params, a.seed)?;
    let report = validate(&m, &params);
    if !report.passed() {
        for v in &report.violations {
            eprintln!("violation: {v}");
        }
        return Ok(ExitCode::from(2));
    }
    write_coo(&m, &CooHeader::from_params(&params), &a.out)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_approx(a: ApproxArgs) -> Result<ExitCode> {
    if a.d == 0 || a.d % 2 != 0 {
        return Err(Error::InvalidParams(format!("--d must be a positive even integer, got {}", a.d)));
    }
    if !(a.q > 0.0 && a.q.is_finite()) {
        return Err(Error::InvalidParams(format!("--q must be positive, got {}", a.q)));
    }
    let checker = checkers().get(&a.checker)?;
    let (target, header) = read_coo(&a.input)?;
    let l = target.l();
    ApproxParams::new(l, header.k, header.gamma, a.eps1, a.eps2, header.causal)?;
    let d_hid = a.dhid.unwrap_or(a.d);
    if a.d > 2 * l || d_hid < a.d || d_hid > 2 * l {
        return Err(Error::InvalidParams(format!(
            "need d <= d_hid <= 2L, got d={} d_hid={d_hid} L={l}",
            a.d
        )));
    }
    let pipe = Pipeline::new(&target, a.eps1, a.eps2)?;
    let n = redraw_count(a.q, l);
    let mut last = None;
    for t in 0..n {
        let draw_seed = redraw_seed(a.seed, a.d, t);
        let inputs = assemble(&pipe.project(a.d, draw_seed)?, d_hid)?;
        let z = attention::logits(&inputs);
        let report = checker.check(&z, &target, a.eps1, a.eps2, header.causal);
        let passed = report.passed;
        last = Some((t, draw_seed, z, report));
        if passed {
            break;
        }
    }
    let (t, draw_seed, z, report) = last.expect("at least one redraw");
    let out = ApproxOutput {
        redraw_index: report.passed.then_some(t),
        redraws_tried: t + 1,
        l,
        d: a.d,
        d_hid,
        eps1: a.eps1,
        eps2: a.eps2,
        seed: a.seed,
        draw_seed,
        checker: a.checker.clone(),
        causal: header.causal,
        report,
    };
    let json = serde_json::to_string_pretty(&out)?;
    match &a.out {
        Some(p) => fs::write(p, json + "\n")?,
        None => println!("{json}"),
    }
    if let Some(p) = &a.logits_out {
        dump(p, "Z", &z.0)?;
    }
    if let Some(p) = &a.m_out {
        dump(p, "M", &kernel_for(header.causal).apply(&z).m)?;
    }
    Ok(if out.report.passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn dump(path: &Path, name: &str, m: &RowMatrix) -> Result<()> {
    let mut text = String::new();
    write_block(&mut text, name, m.to_faer().as_ref());
    fs::write(path, text)?;
    Ok(())
}

fn cmd_sweep(a: SweepArgs, by_q: bool) -> Result<ExitCode> {
    let cfg = SweepConfig::from_file(&a.config)?;
    let mut sink = CsvSink::open(&a.out)?;
    let outcome: SweepOutcome = if by_q {
        q_sweep(&cfg, &cfg.q_values, &mut sink)?
    } else {
        run_sweep(&cfg, &mut sink)?
    };
    eprintln!("{} new record(s) written to {}", outcome.records.len(), a.out.display());
    if let Ok(fit) = log_fit(&outcome.records) {
        eprintln!("fit d_min = {:.3} + {:.3}·log L (r² = {:.3})", fit.a, fit.b, fit.r2);
    }
    for f in &outcome.failures {
        eprintln!("failed L={} trial={}: {}", f.l, f.trial, f.error);
    }
    Ok(if outcome.failures.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

/// Loads either a COO target or a dense block, told apart by the first token.
fn load_heatmap(path: &Path) -> Result<RowMatrix> {
    let text = fs::read_to_string(path)?;
    let first = text.split_whitespace().next().unwrap_or("");
    if first.parse::<usize>().is_ok() {
        Ok(read_coo(path)?.0.to_dense())
    } else {
        Ok(parse_block(&text, path)?.1)
    }
}

fn cmd_render(a: RenderArgs) -> Result<ExitCode> {
    let m = load_heatmap(&a.input)?;
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!("{}x{} matrix is not square", m.nrows(), m.ncols())));
    }
    render_pgm(&m.to_dense(), &RenderSpec { pool: a.pool, clip: a.clip }, &a.out)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_jlt(a: JltArgs) -> Result<ExitCode> {
    let cfg = BenchConfig {
        p_grid: a.p,
        m_grid: a.m,
        eps_grid: a.eps,
        modes: a.modes,
        sigma: a.sigma,
        n_samples: a.n_samples,
        seed: a.seed,
    };
    let rows = run_bench(&cfg)?;
    match &a.out {
        Some(p) => write_bench_csv(&rows, fs::File::create(p)?)?,
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            write_bench_csv(&rows, &mut lock)?;
            lock.flush()?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
