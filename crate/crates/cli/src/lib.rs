//! Pipeline steps behind the `redesign` binary. Each step reads the artifacts
//! of the previous ones from the output directory and writes its own.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use redesign_core::config::RunConfig;
use redesign_core::design_cycle::MarginVector;
use redesign_core::error::{Error, Result};
use redesign_core::gp::ErrorModel;
use redesign_core::margins::{tradeoff_sweep, MarginOptProblem, TradeoffPoint};
use redesign_core::output::{
    read_json, write_futures_csv, write_histograms_csv, write_json, write_summary_csv, write_tradeoff_csv, RunMeta,
};
use redesign_core::rbdo::{ConservativeMode, ConservativeValues};
use redesign_core::uq::{assemble_report, simulate_futures, validate_approximation, ApproximationCheck, UqReport};

pub const OUT_ENV: &str = "REDESIGN_OUT";

pub const MODEL_FILE: &str = "model.json";
pub const CONSERVATIVE_FILE: &str = "conservative.json";
pub const TRADEOFF_FILE: &str = "tradeoff.json";
pub const TRADEOFF_CSV: &str = "tradeoff.csv";
pub const FUTURES_CSV: &str = "futures.csv";
pub const UQ_FILE: &str = "uq_report.json";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const HISTOGRAMS_CSV: &str = "histograms.csv";
pub const REPORT_TXT: &str = "report.txt";

#[derive(Debug, Parser)]
#[command(name = "redesign", version, about = "Safety-margin design with a simulated future test and redesign")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: CommonArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Build the DOE and fit the discrepancy model.
    Fit,
    /// Conservative aleatory values from RBDO or percentiles.
    Conservative,
    /// Margin optimization for each redesign-probability cap.
    Optimize,
    /// Two-level propagation at one margin vector.
    Uq,
    /// Summary tables and histogram data from the propagation.
    Report,
    /// All of the above in order.
    RunAll,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Problem configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; defaults to `out`.
    #[arg(long, global = true, env = OUT_ENV)]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Futures per evaluation for `optimize`, or in total for `uq`.
    #[arg(long, global = true)]
    pub m: Option<usize>,
    /// Redesign-probability caps, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub caps: Option<Vec<f64>>,
    /// Margin vector k_ini,k_lb,k_ub,k_re for `uq`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub k: Option<Vec<f64>>,
}

/// Effective configuration and output location of one invocation.
#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: RunConfig,
    pub meta: RunMeta,
    pub out: PathBuf,
    pub margins_m: usize,
    pub uq_m: usize,
    pub caps: Vec<f64>,
    pub k: Option<MarginVector>,
}

impl Context {
    pub fn new(args: &CommonArgs, command: Command) -> Result<Self> {
        let path = args.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = RunConfig::from_toml(&text)?;
        if let Some(seed) = args.seed {
            cfg.seed = seed;
        }
        if let Some(m) = args.m {
            if matches!(command, Command::Optimize | Command::RunAll) {
                cfg.margins.futures = m;
            }
            if matches!(command, Command::Uq | Command::RunAll) {
                cfg.uq.futures = m;
            }
        }
        if let Some(caps) = &args.caps {
            cfg.margins.caps = caps.clone();
        }
        if let Some(k) = &args.k {
            let k: [f64; 4] = k
                .as_slice()
                .try_into()
                .map_err(|_| Error::Config(format!("--k takes 4 values, got {}", k.len())))?;
            cfg.uq.k = Some(k);
        }
        cfg.validate()?;
        let out = args.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        let k = cfg.uq.k.map(|k| MarginVector::from_slice(&k)).transpose()?;
        Ok(Context {
            meta: RunMeta::new(&cfg),
            margins_m: cfg.margins.futures,
            uq_m: cfg.uq.futures,
            caps: cfg.margins.caps.clone(),
            k,
            cfg,
            out,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(jobs) = cli.opts.jobs {
        if jobs == 0 {
            return Err(Error::Config("--jobs must be positive".into()));
        }
        // a pool already built (for instance by an earlier call) is fine
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let ctx = Context::new(&cli.opts, cli.command)?;
    fs::create_dir_all(&ctx.out)?;
    match cli.command {
        Command::Fit => cmd_fit(&ctx).map(|_| ()),
        Command::Conservative => cmd_conservative(&ctx).map(|_| ()),
        Command::Optimize => cmd_optimize(&ctx).map(|_| ()),
        Command::Uq => cmd_uq(&ctx).map(|_| ()),
        Command::Report => cmd_report(&ctx),
        Command::RunAll => {
            cmd_fit(&ctx)?;
            cmd_conservative(&ctx)?;
            cmd_optimize(&ctx)?;
            cmd_uq(&ctx)?;
            cmd_report(&ctx)
        }
    }
}

pub fn cmd_fit(ctx: &Context) -> Result<ErrorModel> {
    let problem = ctx.cfg.problem()?;
    let model = ctx.cfg.fit_model(&problem)?;
    write_json(&ctx.path(MODEL_FILE), "error_model", &ctx.meta, &model)?;
    Ok(model)
}

fn load_model(ctx: &Context) -> Result<ErrorModel> {
    Ok(read_json(&ctx.path(MODEL_FILE), "error_model")?.1)
}

pub fn cmd_conservative(ctx: &Context) -> Result<ConservativeValues> {
    let problem = ctx.cfg.problem()?;
    let model = match ctx.cfg.conservative.mode {
        ConservativeMode::RbdoMpp => Some(load_model(ctx)?),
        ConservativeMode::Percentile { .. } => None,
    };
    let values = ctx.cfg.conservative.compute(&problem, model.as_ref())?;
    write_json(&ctx.path(CONSERVATIVE_FILE), "conservative_values", &ctx.meta, &values)?;
    Ok(values)
}

fn load_conservative(ctx: &Context) -> Result<ConservativeValues> {
    Ok(read_json(&ctx.path(CONSERVATIVE_FILE), "conservative_values")?.1)
}

/// One row of the persisted sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub cap: f64,
    pub point: Option<TradeoffPoint>,
    pub error: Option<String>,
}

pub fn cmd_optimize(ctx: &Context) -> Result<Vec<SweepEntry>> {
    let problem = ctx.cfg.problem()?;
    let model = load_model(ctx)?;
    let u_cons = load_conservative(ctx)?;
    let mut opt = MarginOptProblem::new(&problem, &model, &u_cons, ctx.caps[0], ctx.margins_m, ctx.cfg.seed)?;
    opt.design = ctx.cfg.design;
    opt.objective_samples = ctx.cfg.margins.objective_samples;
    opt.cmaes = redesign_core::optim::cmaes::CmaesOptions { seed: ctx.cfg.seed, ..ctx.cfg.margins.cmaes };
    let sweep = tradeoff_sweep(&opt, &ctx.caps)?;
    let entries: Vec<SweepEntry> = sweep
        .into_iter()
        .map(|(cap, r)| match r {
            Ok(p) => SweepEntry { cap, point: Some(p), error: None },
            Err(e) => SweepEntry { cap, point: None, error: Some(e.to_string()) },
        })
        .collect();
    write_json(&ctx.path(TRADEOFF_FILE), "tradeoff", &ctx.meta, &entries)?;
    let rows: Vec<(f64, std::result::Result<TradeoffPoint, String>)> = entries
        .iter()
        .map(|e| (e.cap, e.point.clone().ok_or_else(|| e.error.clone().unwrap_or_default())))
        .collect();
    write_tradeoff_csv(create(&ctx.path(TRADEOFF_CSV))?, &ctx.meta, &rows)?;
    Ok(entries)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UqArtifact {
    pub report: UqReport,
    pub approximation: ApproximationCheck,
}

/// The margin vector to propagate: `--k`, then `uq.k`, then the sweep entry
/// for `uq.cap`.
fn uq_margins(ctx: &Context) -> Result<MarginVector> {
    if let Some(k) = ctx.k {
        return Ok(k);
    }
    let (_, entries): (RunMeta, Vec<SweepEntry>) = read_json(&ctx.path(TRADEOFF_FILE), "tradeoff")?;
    let cap = ctx.cfg.uq.cap;
    let entry = entries
        .iter()
        .find(|e| (e.cap - cap).abs() < 1e-12)
        .ok_or_else(|| Error::Config(format!("no tradeoff entry for cap {cap}; set uq.k or pass --k")))?;
    match &entry.point {
        Some(p) => Ok(p.k),
        None => Err(Error::Infeasible(format!(
            "margin optimization failed for cap {cap}: {}",
            entry.error.clone().unwrap_or_default()
        ))),
    }
}

pub fn cmd_uq(ctx: &Context) -> Result<UqArtifact> {
    let problem = ctx.cfg.problem()?;
    let model = load_model(ctx)?;
    let u_cons = load_conservative(ctx)?;
    let k = uq_margins(ctx)?;
    let batch = simulate_futures(&model, &problem, &u_cons.u_cons, &k, ctx.uq_m, ctx.cfg.seed, &ctx.cfg.design)?;
    let done: Vec<_> = batch.records.iter().filter_map(|r| r.as_ref().ok().cloned()).collect();
    write_futures_csv(create(&ctx.path(FUTURES_CSV))?, &ctx.meta, &done)?;
    let report = assemble_report(&batch, &problem, &k, ctx.cfg.seed)?;
    let approximation = validate_approximation(&report, &k);
    let artifact = UqArtifact { report, approximation };
    write_json(&ctx.path(UQ_FILE), "uq_report", &ctx.meta, &artifact)?;
    Ok(artifact)
}

pub fn cmd_report(ctx: &Context) -> Result<()> {
    let (_, art): (RunMeta, UqArtifact) = read_json(&ctx.path(UQ_FILE), "uq_report")?;
    let r = &art.report;
    write_summary_csv(create(&ctx.path(SUMMARY_CSV))?, &ctx.meta, &r.summaries)?;
    write_histograms_csv(create(&ctx.path(HISTOGRAMS_CSV))?, &ctx.meta, &r.histograms)?;

    let mut w = create(&ctx.path(REPORT_TXT))?;
    writeln!(w, "config_sha256 = {}", ctx.meta.config_sha256)?;
    writeln!(w, "seed = {}", ctx.meta.seed)?;
    writeln!(w, "version = {}", ctx.meta.version)?;
    writeln!(w, "futures = {}", r.futures)?;
    if r.futures == 0 {
        writeln!(w, "status = empty")?;
        w.flush()?;
        return Ok(());
    }
    let k = r.k.as_array();
    writeln!(w, "k = [{}, {}, {}, {}]", k[0], k[1], k[2], k[3])?;
    writeln!(w, "x_ini = {:?}", r.x_ini)?;
    writeln!(w, "aborted = {}", r.aborted.len())?;
    writeln!(w, "degenerate = {}", r.degenerate)?;
    writeln!(w, "pf_fallbacks = {}", r.fallbacks)?;
    writeln!(w, "redesign_fraction = {:?} [{:?}, {:?}]", r.redesign_fraction.estimate, r.redesign_fraction.lower, r.redesign_fraction.upper)?;
    writeln!(w, "exceedance = {:?} [{:?}, {:?}]", r.exceedance.estimate, r.exceedance.lower, r.exceedance.upper)?;
    let a = &art.approximation;
    writeln!(w, "exceedance_closed_form = {:?}", a.analytic)?;
    match (&a.skipped, a.gap) {
        (Some(reason), _) => writeln!(w, "approximation_gap = skipped ({reason})")?,
        (None, Some(gap)) => writeln!(w, "approximation_gap = {gap:?} (closed form inside interval: {})", a.analytic_in_ci == Some(true))?,
        _ => {}
    }
    let corr = |c: Option<f64>| c.map_or("undefined".to_string(), |v| format!("{v:?}"));
    writeln!(w, "margin_beta_correlation = {}", corr(r.margin_beta_correlation))?;
    writeln!(w, "test_margin_beta_correlation = {}", corr(r.test_margin_beta_correlation))?;
    writeln!(w, "mean_mpp_uhat = {:?}", r.mean_mpp_uhat)?;
    for g in &r.summaries {
        if let Some(s) = &g.objective_change {
            writeln!(w, "objective_change.{} = {:?} (n = {})", g.group, s.mean, s.count)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Process exit code for an error: 2 for configuration and input problems,
/// 1 for numerical failures.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_config() {
        2
    } else {
        1
    }
}
