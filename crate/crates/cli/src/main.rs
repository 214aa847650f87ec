use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use caprec::lasso::{CvRule, CvScheme};
use caprec::simulation::{
    find_scenario, run_scenario, sample_observed_seeded, scenario_catalog, true_psi, McConfig,
    McReport,
};
use caprec::{run_estimators, EstimatorKind, EstimatorOptions, Scenario};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

mod input;
mod report;

use input::{read_table, Format, ParseError};

/// Capture-recapture estimation of population size.
#[derive(Parser, Debug)]
#[command(name = "caprec", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate the capture probability and population size from a data file.
    Estimate(EstimateArgs),
    /// Run a Monte Carlo study on a catalog scenario or a scenario file.
    Simulate(SimulateArgs),
    /// List the built-in scenarios.
    Catalog(CatalogArgs),
    /// Convert a data file, or a draw from a scenario, to cell counts or records.
    Export(ExportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum AssumeArg {
    Linear,
    Indep,
    Condindep,
    Loglinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Npmle,
    Lasso,
    Tmle,
    LassoCv,
    TmleCv,
    M0,
    Mt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SchemeArg {
    Records,
    Cells,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum RuleArg {
    Min,
    OneSe,
}

#[derive(Args, Debug)]
struct TuningArgs {
    /// Multiplier applied to lambda at each undersmoothing step.
    #[arg(long)]
    shrink: Option<f64>,
    /// Units split into cross-validation folds.
    #[arg(long, value_enum)]
    cv_scheme: Option<SchemeArg>,
    /// Rule picking lambda from the cross-validation curve.
    #[arg(long, value_enum)]
    cv_rule: Option<RuleArg>,
    /// Constant C in the targeting stop rule sigma/(max(log n, C) sqrt n).
    #[arg(long)]
    tmle_c: Option<f64>,
    /// Targeting stops once |epsilon| falls to this value.
    #[arg(long)]
    tmle_delta: Option<f64>,
}

impl TuningArgs {
    fn apply(&self, opts: &mut EstimatorOptions) -> Result<()> {
        if let Some(s) = self.shrink {
            if !(s > 0.0 && s < 1.0) {
                bail!(usage(format!("--shrink must lie in (0, 1), got {s}")));
            }
            opts.lasso.shrink = s;
        }
        if let Some(s) = self.cv_scheme {
            opts.lasso.scheme = match s {
                SchemeArg::Records => CvScheme::Records,
                SchemeArg::Cells => CvScheme::Cells,
            };
        }
        if let Some(r) = self.cv_rule {
            opts.lasso.rule = match r {
                RuleArg::Min => CvRule::Min,
                RuleArg::OneSe => CvRule::OneSe,
            };
        }
        if let Some(c) = self.tmle_c {
            if !(c > 0.0) {
                bail!(usage(format!("--tmle-c must be positive, got {c}")));
            }
            opts.tmle.c_const = c;
        }
        if let Some(d) = self.tmle_delta {
            if !(d > 0.0) {
                bail!(usage(format!("--tmle-delta must be positive, got {d}")));
            }
            opts.tmle.delta = d;
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
struct EstimateArgs {
    /// Records CSV (`s1,...,sK`) or cells CSV (`pattern,count`).
    #[arg(long, short)]
    input: PathBuf,
    /// Input layout; detected from the header when omitted.
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Identification assumptions to apply.
    #[arg(long, value_enum, value_delimiter = ',',
          default_values_t = [AssumeArg::Linear, AssumeArg::Indep, AssumeArg::Condindep, AssumeArg::Loglinear])]
    assume: Vec<AssumeArg>,
    /// Estimators run under the log-linear assumption.
    #[arg(long, value_enum, value_delimiter = ',',
          default_values_t = [VariantArg::Npmle, VariantArg::Lasso, VariantArg::Tmle, VariantArg::M0, VariantArg::Mt])]
    loglinear_variant: Vec<VariantArg>,
    /// Samples assumed independent, as `j1,j2`.
    #[arg(long, value_delimiter = ',')]
    pair: Option<Vec<usize>>,
    /// Samples assumed independent given all others missed, as `j,m`.
    #[arg(long, value_delimiter = ',')]
    cond: Option<Vec<usize>>,
    /// Confidence level of the Wald intervals.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Seed for the cross-validation fold assignment.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    tuning: TuningArgs,
    /// Also write the JSON report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the JSON report instead of the table.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Catalog key (see `caprec catalog`) or path to a TOML/JSON scenario file.
    scenario: String,
    /// Replicates per sample size; the scenario's own count when omitted.
    #[arg(long)]
    reps: Option<usize>,
    /// Sample sizes, comma separated.
    #[arg(long = "n", value_delimiter = ',')]
    sample_sizes: Option<Vec<u64>>,
    /// Master seed; replicate streams are derived from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Estimators to score, overriding the scenario's list.
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<EstimatorKind>>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[command(flatten)]
    tuning: TuningArgs,
    /// Include every replicate's estimate in the JSON output.
    #[arg(long)]
    keep_draws: bool,
    /// Write the metrics as JSON to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the metrics as CSV (one row per estimator and n) to this file.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Print JSON instead of the summary table.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FamilyArg {
    AdditiveLinear,
    LogLinear,
    SequentialConditional,
}

#[derive(Args, Debug)]
struct CatalogArgs {
    /// Only list scenarios of this family.
    #[arg(long, value_enum)]
    family: Option<FamilyArg>,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Data file to convert.
    #[arg(
        long,
        short,
        conflicts_with = "scenario",
        required_unless_present = "scenario"
    )]
    input: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Draw a synthetic table from this catalog scenario instead.
    #[arg(long, requires = "n")]
    scenario: Option<String>,
    /// Number of observed individuals to draw.
    #[arg(long)]
    n: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Layout to write.
    #[arg(long, value_enum, default_value_t = Format::Cells)]
    to: Format,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Bad invocation or input; maps to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> UsageError {
    UsageError(msg.into())
}

fn pair_arg(name: &str, v: &Option<Vec<usize>>, default: (usize, usize)) -> Result<(usize, usize)> {
    match v.as_deref() {
        None => Ok(default),
        Some([a, b]) => Ok((*a, *b)),
        Some(other) => bail!(usage(format!(
            "{name} takes two samples, got {}",
            other.len()
        ))),
    }
}

fn estimate_kinds(args: &EstimateArgs, k: usize) -> Result<Vec<EstimatorKind>> {
    let (j1, j2) = pair_arg("--pair", &args.pair, EstimatorKind::DEFAULT_PAIR)?;
    let default_cond = if k >= 3 {
        EstimatorKind::DEFAULT_COND
    } else {
        (1, 2)
    };
    let (j, m) = pair_arg("--cond", &args.cond, default_cond)?;
    for (name, a, b) in [("--pair", j1, j2), ("--cond", j, m)] {
        if a == b || a == 0 || b == 0 || a > k || b > k {
            bail!(usage(format!(
                "{name} {a},{b}: need two distinct samples in 1..={k}"
            )));
        }
    }
    if args.assume.is_empty() {
        bail!(usage("select at least one assumption"));
    }
    let mut kinds = Vec::new();
    let mut push = |kind| {
        if !kinds.contains(&kind) {
            kinds.push(kind)
        }
    };
    for a in &args.assume {
        match a {
            AssumeArg::Linear => push(EstimatorKind::Linear),
            AssumeArg::Indep => push(EstimatorKind::Independence { j1, j2 }),
            AssumeArg::Condindep => push(EstimatorKind::CondIndependence { j, m }),
            AssumeArg::Loglinear => {
                for v in &args.loglinear_variant {
                    push(match v {
                        VariantArg::Npmle => EstimatorKind::Npmle,
                        VariantArg::Lasso => EstimatorKind::Lasso,
                        VariantArg::Tmle => EstimatorKind::Tmle,
                        VariantArg::LassoCv => EstimatorKind::LassoCv,
                        VariantArg::TmleCv => EstimatorKind::TmleCv,
                        VariantArg::M0 => EstimatorKind::M0,
                        VariantArg::Mt => EstimatorKind::Mt,
                    })
                }
            }
        }
    }
    Ok(kinds)
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        bail!(usage(format!("--level must lie in (0, 1), got {level}")));
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(())
}

fn cmd_estimate(args: &EstimateArgs) -> Result<bool> {
    check_level(args.level)?;
    let (table, format) = read_table(&args.input, args.format)?;
    let kinds = estimate_kinds(args, table.k())?;
    let mut opts = EstimatorOptions {
        level: args.level,
        ..EstimatorOptions::default()
    };
    opts.lasso.seed = args.seed;
    args.tuning.apply(&mut opts)?;

    let rows = run_estimators(&table, &kinds, &opts)
        .into_iter()
        .map(|(kind, r)| report::row(kind, table.n(), r))
        .collect();
    let rep = report::Report {
        schema: report::SCHEMA_ID,
        input: report::input_summary(&args.input.display().to_string(), format, &table),
        level: args.level,
        seed: args.seed,
        rows,
    };
    if let Some(out) = &args.out {
        write_json(out, &rep)?;
    }
    let stdout = io::stdout();
    let mut w = stdout.lock();
    if args.json {
        serde_json::to_writer_pretty(&mut w, &rep)?;
        writeln!(w)?;
    } else {
        w.write_all(report::render_table(&rep).as_bytes())?;
    }
    Ok(rep.any_succeeded())
}

fn catalog_listing() -> String {
    scenario_catalog()
        .iter()
        .map(|s| s.key.clone())
        .collect::<Vec<_>>()
        .join(", ")
}

fn load_scenario(name: &str) -> Result<Scenario> {
    let path = Path::new(name);
    if path.is_file() {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {name}"))?;
        let parsed = if name.ends_with(".json") {
            Scenario::from_json(&text)
        } else {
            Scenario::from_toml(&text)
        };
        return parsed.map_err(|e| usage(e.to_string()).into());
    }
    find_scenario(name).map_err(|_| {
        usage(format!(
            "unknown scenario `{name}`; catalog keys: {}",
            catalog_listing()
        ))
        .into()
    })
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("CAPREC_THREADS") {
        Ok(v) if !v.trim().is_empty() => match v.trim().parse::<usize>() {
            Ok(t) if t > 0 => Ok(Some(t)),
            _ => bail!(usage(format!(
                "CAPREC_THREADS must be a positive integer, got `{v}`"
            ))),
        },
        _ => Ok(None),
    }
}

fn render_metrics(rep: &McReport) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "scenario {} (true psi {:.4}, seed {})",
        rep.scenario, rep.psi_true, rep.seed
    )
    .unwrap();
    writeln!(
        out,
        "{:<15} {:>6} {:>6} {:>6} {:>8} {:>8} {:>7} {:>8} {:>8}",
        "estimator", "n", "reps", "fail", "mean", "bias", "cover%", "var.ratio", "ci.width"
    )
    .unwrap();
    for m in &rep.metrics {
        writeln!(
            out,
            "{:<15} {:>6} {:>6} {:>6} {:>8.4} {:>8.4} {:>7.1} {:>8.3} {:>8.4}",
            m.estimator.to_string(),
            m.n,
            m.reps,
            m.failures,
            m.mean_psi,
            m.bias,
            100.0 * m.coverage,
            m.var_ratio,
            m.ci_hi_mean - m.ci_lo_mean
        )
        .unwrap();
    }
    out
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    check_level(args.level)?;
    let mut scenario = load_scenario(&args.scenario)?;
    if let Some(e) = &args.estimators {
        scenario.estimators = e.clone();
    }
    let mut cfg = McConfig::for_scenario(&scenario);
    if let Some(r) = args.reps {
        cfg.reps = r;
    }
    if let Some(n) = &args.sample_sizes {
        cfg.sample_sizes = n.clone();
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.options.level = args.level;
    args.tuning.apply(&mut cfg.options)?;
    cfg.threads = threads_from_env()?;
    cfg.keep_draws = args.keep_draws;
    let rep = run_scenario(&scenario, &cfg).map_err(|e| match e {
        caprec::Error::InvalidArgument(_) | caprec::Error::InvalidDgp(_) => {
            anyhow::Error::new(usage(e.to_string()))
        }
        other => other.into(),
    })?;

    if let Some(path) = &args.out {
        write_json(path, &rep)?;
    }
    if let Some(path) = &args.csv {
        let mut w = csv::Writer::from_path(path)
            .with_context(|| format!("cannot create {}", path.display()))?;
        for m in &rep.metrics {
            w.serialize(m)?;
        }
        w.flush()?;
    }
    let stdout = io::stdout();
    let mut w = stdout.lock();
    if args.json {
        serde_json::to_writer_pretty(&mut w, &rep)?;
        writeln!(w)?;
    } else {
        w.write_all(render_metrics(&rep).as_bytes())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CatalogEntry<'a> {
    key: &'a str,
    title: &'a str,
    family: &'static str,
    k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    psi0: Option<f64>,
    true_psi: f64,
    estimators: Vec<String>,
    dgp: &'a caprec::Dgp,
}

fn cmd_catalog(args: &CatalogArgs) -> Result<()> {
    let all = scenario_catalog();
    let wanted = args.family.map(|f| match f {
        FamilyArg::AdditiveLinear => "additive_linear",
        FamilyArg::LogLinear => "log_linear",
        FamilyArg::SequentialConditional => "sequential_conditional",
    });
    let mut entries = Vec::new();
    for s in all
        .iter()
        .filter(|s| wanted.is_none_or(|f| s.dgp.family() == f))
    {
        entries.push(CatalogEntry {
            key: &s.key,
            title: &s.title,
            family: s.dgp.family(),
            k: s.dgp.k(),
            psi0: s.psi0,
            true_psi: true_psi(&s.full_dist()?),
            estimators: s.estimators.iter().map(|e| e.to_string()).collect(),
            dgp: &s.dgp,
        });
    }
    let stdout = io::stdout();
    let mut w = stdout.lock();
    if args.json {
        serde_json::to_writer_pretty(&mut w, &entries)?;
        writeln!(w)?;
        return Ok(());
    }
    writeln!(
        w,
        "{:<6} {:<23} {:>2} {:>7}  title",
        "key", "family", "K", "psi0"
    )?;
    for e in &entries {
        writeln!(
            w,
            "{:<6} {:<23} {:>2} {:>7.4}  {}",
            e.key, e.family, e.k, e.true_psi, e.title
        )?;
    }
    Ok(())
}

fn cmd_export(args: &ExportArgs) -> Result<()> {
    let table = match (&args.input, &args.scenario) {
        (Some(path), _) => read_table(path, args.format)?.0,
        (None, Some(key)) => {
            let s = load_scenario(key)?;
            let n = args
                .n
                .filter(|n| *n > 0)
                .ok_or_else(|| usage("--n must be positive"))?;
            sample_observed_seeded(&s.full_dist()?, n, args.seed)
        }
        (None, None) => bail!(usage("give --input or --scenario")),
    };
    let sink: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    };
    match args.to {
        Format::Cells => input::write_cells(&table, sink)?,
        Format::Records => input::write_records(&table, sink)?,
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() || err.downcast_ref::<ParseError>().is_some() {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Estimate(a) => cmd_estimate(a).and_then(|ok| {
            if ok {
                Ok(())
            } else {
                bail!("no estimator succeeded")
            }
        }),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Catalog(a) => cmd_catalog(a),
        Command::Export(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        // Output piped into `head` and the like.
        Err(e)
            if e.chain().any(|c| {
                c.downcast_ref::<std::io::Error>()
                    .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
            }) =>
        {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
