//! `adl`: verification suites, compression runs, bound calculators, the
//! shattering demo and bracketed-string counts.
//!
//! Exit codes: 0 when every check passes, 1 for usage, I/O or input
//! errors, 2 when a check fails. `ADL_THREADS` sets the worker count.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adl_core::codec::{count_bracketed, MAX_ENUM_LENGTH};
use adl_core::compressor::bounds::BoundInputs;
use adl_core::compressor::pipeline::check_persisted;
use adl_core::compressor::{
    adl_theoretical, covering_log_size, generalization_bound, run_compression, CompressionPlan, CompressorConfig, NetworkCompressor,
    NetworkSpec, RunOptions, SampleSet, TaylorBudget,
};
use adl_core::numerics::RngStream;
use adl_core::shattering::{run_shatter_demo, ShatterConfig, DEFAULT_B};
use adl_core::suites::{run_suite, Check, Suite};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

const THREADS_ENV: &str = "ADL_THREADS";

#[derive(Parser, Debug)]
#[command(name = "adl", version, about = "Approximate description length toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a named invariant suite.
    Verify(VerifyArgs),
    /// Compress a network on a sample set and report bits and variance.
    Compress(CompressArgs),
    /// Covering-number and generalization bounds for a network class.
    Bound(BoundArgs),
    /// Fit shattering quadratics and realize them as ReLU networks.
    Shatter(ShatterArgs),
    /// Exact counts of bracketed strings up to a length.
    EnumBrackets(EnumArgs),
}

#[derive(Args, Debug, Serialize)]
struct VerifyArgs {
    #[arg(long, value_parser = parse_suite)]
    suite: Suite,
    /// Monte-Carlo trials per check (suite default if omitted).
    #[arg(long)]
    trials: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON report path (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the checks as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum BudgetArg {
    Tight,
    Conservative,
}

#[derive(Args, Debug, Serialize)]
struct CompressArgs {
    /// Network JSON.
    #[arg(long)]
    net: PathBuf,
    /// Sample CSV with header x0,x1,...
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    draws: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Draws whose codes are kept and decoded again.
    #[arg(long, default_value_t = 2)]
    persist: u64,
    #[arg(long, value_enum, default_value_t = BudgetArg::Tight)]
    budget: BudgetArg,
    #[arg(long)]
    node_cap: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct BoundArgs {
    #[arg(long)]
    net: PathBuf,
    /// Sample size.
    #[arg(long)]
    m: usize,
    /// Lipschitz constant of the loss.
    #[arg(long = "lipschitz")]
    lipschitz: f64,
    /// Bound on the loss.
    #[arg(long = "loss-bound")]
    loss_bound: f64,
    #[arg(long)]
    delta: f64,
    /// Scale of the covering number.
    #[arg(long, default_value_t = 1.0)]
    eps: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct ShatterArgs {
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Number of points (defaults to ⌊dk/(8 ln d)⌋).
    #[arg(long = "points", visible_alias = "count")]
    points: Option<usize>,
    #[arg(long, default_value_t = 100)]
    labelings: usize,
    #[arg(long, default_value_t = DEFAULT_B)]
    b: f64,
    #[arg(long, default_value_t = 10)]
    relu_checks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the first ReLU network in the network JSON format.
    #[arg(long)]
    dump_net: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct EnumArgs {
    #[arg(long)]
    n: usize,
    /// CSV output path (stdout if omitted).
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    Suite::from_name(s).map_err(|_| {
        let names: Vec<_> = Suite::ALL.iter().map(|s| s.name()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

/// Every report carries the tool version and the exact configuration.
#[derive(Serialize)]
struct Envelope<'a, C: Serialize, R: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config: &'a C,
    report: R,
}

enum Failure {
    Usage(String),
    Assertion(String),
}

impl From<adl_core::Error> for Failure {
    fn from(e: adl_core::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn write_report<C: Serialize, R: Serialize>(command: &str, config: &C, report: R, out: Option<&Path>) -> Outcome {
    let env = Envelope { tool: "adl", version: env!("CARGO_PKG_VERSION"), command, config, report };
    let text = serde_json::to_string_pretty(&env).map_err(|e| Failure::Usage(e.to_string()))?;
    match out {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => writeln!(std::io::stdout().lock(), "{text}")?,
    }
    Ok(())
}

/// Columns `parameter, measured, bound, se, pass`.
fn checks_csv(checks: &[Check]) -> Result<String, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Failure::Usage(e.to_string());
    w.write_record(["parameter", "measured", "bound", "se", "pass"]).map_err(err)?;
    for c in checks {
        w.write_record([
            c.name.clone(),
            format!("{:?}", c.measured),
            format!("{:?}", c.bound),
            format!("{:?}", c.standard_error),
            c.passed.to_string(),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

fn verify(a: &VerifyArgs) -> Outcome {
    let rep = run_suite(a.suite, a.trials, a.seed)?;
    if let Some(p) = &a.csv {
        std::fs::write(p, checks_csv(&rep.checks)?)?;
    }
    let failed: Vec<String> = rep.checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
    let passed = rep.passed;
    let total = rep.checks.len();
    write_report("verify", a, &rep, a.out.as_deref())?;
    eprintln!("suite {}: {}/{} checks passed", a.suite.name(), total - failed.len(), total);
    if passed {
        Ok(())
    } else {
        Err(Failure::Assertion(format!("failed checks: {}", failed.join("; "))))
    }
}

#[derive(Serialize)]
struct TheoreticalOnly {
    points: usize,
    theoretical: adl_core::compressor::AdlBudget,
}

fn compress(a: &CompressArgs) -> Outcome {
    let net = NetworkSpec::from_json_path(&a.net)?;
    let samples = SampleSet::from_csv_path(&a.data)?;
    if a.draws == 0 {
        let theoretical = adl_theoretical(&net, samples.len());
        eprintln!("theoretical only: n_s = {:.4e}, n = {:.4e}", theoretical.n_s, theoretical.n);
        return write_report("compress", a, TheoreticalOnly { points: samples.len(), theoretical }, a.out.as_deref());
    }
    let mut config = CompressorConfig {
        budget: match a.budget {
            BudgetArg::Tight => TaylorBudget::Tight,
            BudgetArg::Conservative => TaylorBudget::Conservative,
        },
        ..CompressorConfig::default()
    };
    if let Some(cap) = a.node_cap {
        config.node_cap = cap;
    }
    let c = NetworkCompressor::new(&net, &samples, &config)?;
    let opts = RunOptions { draws: a.draws, persist: a.persist.min(a.draws), ..RunOptions::default() };
    let (rep, _) = run_compression(&c, &opts, &RngStream::new(a.seed))?;
    let rebuilt = CompressionPlan::from_seed(&net.class, &samples, &config, &rep.seed)?;
    let mismatched = check_persisted(&rebuilt, &rep.persisted)?;
    let (unbiased, variance_ok) = match &rep.variance {
        Some(v) => (v.mean_within(4.0), v.variance_within(rep.sigma_claim.max(1.0), 4.0)),
        None => (true, true),
    };
    eprintln!(
        "mean code bits {:.1} (theoretical n {:.4e}, ratio {:.3e}); seed bits {}; unbiased {}; variance check {}; persisted draws reproduced {}/{}",
        rep.bits.expected_random_bits,
        rep.theoretical.n,
        rep.code_ratio,
        rep.seed_bits,
        pass_word(unbiased),
        pass_word(variance_ok),
        rep.persisted.len() - mismatched.len(),
        rep.persisted.len()
    );
    write_report("compress", a, &rep, a.out.as_deref())?;
    if unbiased && variance_ok && mismatched.is_empty() {
        Ok(())
    } else {
        Err(Failure::Assertion("compression checks failed".into()))
    }
}

fn pass_word(b: bool) -> &'static str {
    if b {
        "pass"
    } else {
        "FAIL"
    }
}

#[derive(Serialize)]
struct BoundReport {
    adl: adl_core::compressor::AdlBudget,
    log_covering: f64,
    expected_representativeness: f64,
    high_probability_representativeness: f64,
    convention: &'static str,
}

fn bound(a: &BoundArgs) -> Outcome {
    let net = NetworkSpec::from_json_path(&a.net)?;
    let d = net.class.output_dim();
    let adl = adl_theoretical(&net, a.m);
    let inputs = BoundInputs { lipschitz: a.lipschitz, loss_bound: a.loss_bound, m: a.m, d, delta: a.delta };
    let g = generalization_bound(&adl, &inputs)?;
    let log_covering = covering_log_size(adl.n_s, adl.n, a.eps, a.m, d)?;
    eprintln!(
        "n_s = {:.6e}, n = {:.6e}, log N = {:.6e}, E rep <= {:.6e}, rep <= {:.6e} w.p. 1 - {}",
        adl.n_s, adl.n, log_covering, g.expected_rep, g.high_prob_rep, a.delta
    );
    let rep = BoundReport {
        adl,
        log_covering,
        expected_representativeness: g.expected_rep,
        high_probability_representativeness: g.high_prob_rep,
        convention: adl_core::compressor::bounds::CONVENTION,
    };
    write_report("bound", a, rep, a.out.as_deref())
}

fn shatter(a: &ShatterArgs) -> Outcome {
    let cfg = ShatterConfig {
        d: a.d,
        k: a.k,
        count: a.points,
        b: a.b,
        labelings: a.labelings,
        relu_checks: a.relu_checks,
        ..ShatterConfig::default()
    };
    let rep = run_shatter_demo(&cfg, &RngStream::new(a.seed))?;
    if let Some(p) = &a.dump_net {
        match &rep.first_network {
            Some(n) => std::fs::write(p, n.to_json() + "\n")?,
            None => return Err(Failure::Usage("no ReLU network was constructed".into())),
        }
    }
    eprintln!(
        "D = {}: {}/{} labelings feasible; {}/{} ReLU realizations separate the points",
        rep.count,
        rep.feasible_count,
        rep.labelings_tried,
        rep.relu_passed(),
        rep.relu_net_norms.len()
    );
    let relu_ok = rep.relu_passed() == rep.relu_net_norms.len();
    write_report("shatter", a, &rep, a.out.as_deref())?;
    if relu_ok {
        Ok(())
    } else {
        Err(Failure::Assertion("a ReLU realization failed to separate the points".into()))
    }
}

fn enum_brackets(a: &EnumArgs) -> Outcome {
    if !(1..=MAX_ENUM_LENGTH).contains(&a.n) {
        return Err(Failure::Usage(format!("n must lie in 1..={MAX_ENUM_LENGTH}")));
    }
    let mut checks = Vec::new();
    for n in 1..=a.n {
        let c = count_bracketed(n)?;
        checks.push(Check::exact(n.to_string(), c as f64, 32f64.powi(n as i32)));
    }
    let text = checks_csv(&checks)?;
    match &a.csv {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    if checks.iter().all(|c| c.passed) {
        Ok(())
    } else {
        Err(Failure::Assertion("a count exceeds 32^n".into()))
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::Usage(e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Verify(a) => verify(a),
        Command::Compress(a) => compress(a),
        Command::Bound(a) => bound(a),
        Command::Shatter(a) => shatter(a),
        Command::EnumBrackets(a) => enum_brackets(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Assertion(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(2)
        }
    }
}
