//! Command-line entry point and output formats.

use std::ffi::OsString;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::chain::{
    chain_expectation, delta_ww_window_sum, delta_ww_window_sum_closed,
    first_collision_probabilities, sandwich_check, ChainSpec,
};
use crate::mc::{self, ExperimentConfig, SweepRow, SweepSpec, SweepTable, CSV_COLUMNS};
use crate::net::{Architecture, WeightDistribution};
use crate::oracle::{self, Convention, OracleCap};
use crate::theory;
use crate::{Error, Result};

/// Environment variable that overrides `--threads`.
pub const THREADS_ENV: &str = "NTKLAB_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "ntklab",
    version,
    about = "Neural tangent kernel laboratory for deep ReLU networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Evaluate the closed-form means and envelopes.
    Theory(TheoryArgs),
    /// Monte Carlo estimate of kernel moments.
    Mc(RunArgs),
    /// Monte Carlo estimate of the one-step kernel update.
    Update(RunArgs),
    /// Exact moments by path enumeration.
    Oracle(ExactArgs),
    /// Two-path chain expectation and its elementary bounds.
    Dp(ExactArgs),
    /// Run a list or grid of experiments.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Clone)]
struct ArchArgs {
    /// Experiment config JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n0: Option<usize>,
    /// Hidden widths, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["width", "depth"])]
    hidden: Option<Vec<usize>>,
    /// Equal hidden width; use with --depth.
    #[arg(long, requires = "depth")]
    width: Option<usize>,
    /// Number of weight layers; use with --width.
    #[arg(long, requires = "width")]
    depth: Option<usize>,
    #[arg(long)]
    dist: Option<WeightDistribution>,
    /// Input vector, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x: Option<Vec<f64>>,
    /// Squared norm of the default all-ones-direction input.
    #[arg(long)]
    xnorm2: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args, Debug, Clone)]
struct OutputArgs {
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Args, Debug, Clone)]
struct TheoryArgs {
    #[command(flatten)]
    arch: ArchArgs,
    /// Multiplicative band around envelope centrals.
    #[arg(long, default_value_t = theory::DEFAULT_BAND)]
    band: f64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    target: Option<f64>,
    #[arg(long)]
    convention: Option<Convention>,
    #[arg(long)]
    shards: Option<usize>,
    /// Also compute the exact mean when enumeration is feasible.
    #[arg(long)]
    oracle: bool,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug, Clone)]
struct ExactArgs {
    #[command(flatten)]
    arch: ArchArgs,
    /// Cap on tuple transitions per layer.
    #[arg(long)]
    max_transitions: Option<u128>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args, Debug, Clone)]
struct SweepArgs {
    /// Sweep JSON with `experiments` and/or `grid`.
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    threads: Option<usize>,
    #[command(flatten)]
    output: OutputArgs,
}

/// Parse `argv` (program name first), run the subcommand and return the exit
/// code: 0 on success, 1 on invalid input, 2 on an internal failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_internal() {
                2
            } else {
                1
            }
        }
    }
}

fn execute(command: Command) -> Result<i32> {
    let started = Instant::now();
    match command {
        Command::Theory(a) => cmd_theory(&a, started),
        Command::Mc(a) => cmd_run(&a, false, started),
        Command::Update(a) => cmd_run(&a, true, started),
        Command::Oracle(a) => cmd_oracle(&a, started),
        Command::Dp(a) => cmd_dp(&a, started),
        Command::Sweep(a) => cmd_sweep(&a, started),
    }
}

// ---------------------------------------------------------------------------
// Configuration

fn base_config(a: &ArchArgs) -> Result<ExperimentConfig> {
    let mut c = match &a.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => {
            let n0 =
                a.n0.ok_or_else(|| Error::InvalidArgument("--n0 or --config is required".into()))?;
            ExperimentConfig::new(n0, Vec::new())
        }
    };
    if let Some(n0) = a.n0 {
        c.n0 = n0;
    }
    if let Some(h) = &a.hidden {
        c.hidden = h.clone();
    }
    if let (Some(w), Some(d)) = (a.width, a.depth) {
        if d == 0 {
            return Err(Error::InvalidArgument("--depth must be at least 1".into()));
        }
        c.hidden = vec![w; d - 1];
    }
    if let Some(dist) = a.dist {
        c.dist = dist;
    }
    if let Some(x) = &a.x {
        c.x = Some(x.clone());
    }
    if let Some(v) = a.xnorm2 {
        c.xnorm2 = Some(v);
        if a.x.is_none() {
            c.x = None;
        }
    }
    Ok(c)
}

fn env_threads() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) if !v.trim().is_empty() => v.trim().parse().map(Some).map_err(|_| {
            Error::InvalidArgument(format!("{THREADS_ENV}={v} is not a thread count"))
        }),
        _ => Ok(None),
    }
}

fn resolve_threads(flag: Option<usize>, config: Option<usize>) -> Result<Option<usize>> {
    Ok(env_threads()?.or(flag).or(config))
}

fn run_config(a: &RunArgs, update: bool) -> Result<ExperimentConfig> {
    let mut c = base_config(&a.arch)?;
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.trials {
        c.trials = v;
    }
    if let Some(v) = a.lambda {
        c.lambda = v;
    }
    if let Some(v) = a.target {
        c.target = v;
    }
    if let Some(v) = a.convention {
        c.convention = v;
    }
    if let Some(v) = a.shards {
        c.shards = v;
    }
    c.oracle |= a.oracle;
    c.update |= update;
    c.threads = resolve_threads(a.threads, c.threads)?;
    c.validate()?;
    Ok(c)
}

// ---------------------------------------------------------------------------
// Output

fn manifest(command: &str, config: Value, seed: Option<u64>, started: Instant) -> Value {
    json!({
        "tool": "ntklab",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": config,
        "seed": seed,
        "wall_time_s": started.elapsed().as_secs_f64(),
    })
}

fn emit(output: &OutputArgs, text: &str) -> Result<()> {
    match &output.out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn emit_json(output: &OutputArgs, mut manifest: Value, result: impl Serialize) -> Result<()> {
    manifest["result"] = serde_json::to_value(result)?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    emit(output, &text)
}

/// CSV text with the manifest as a leading `#` comment line.
fn csv_text(manifest: &Value, header: &[&str], records: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in records {
        w.write_record(r)?;
    }
    let body = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    let mut text = format!("# {}\n", serde_json::to_string(manifest)?);
    text.push_str(&String::from_utf8(body).expect("csv output is utf-8"));
    Ok(text)
}

fn json_only(output: &OutputArgs, command: &str) -> Result<()> {
    if output.format == Some(Format::Csv) {
        return Err(Error::InvalidArgument(format!(
            "{command} only writes JSON"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Subcommands

#[derive(Serialize)]
struct TheoryRow {
    formula: String,
    central: f64,
    lower: f64,
    upper: f64,
}

impl TheoryRow {
    fn exact(formula: &str, v: f64) -> Self {
        Self {
            formula: formula.to_string(),
            central: v,
            lower: v,
            upper: v,
        }
    }

    fn envelope(formula: &str, e: &theory::EnvelopeResult) -> Self {
        Self {
            formula: formula.to_string(),
            central: e.central,
            lower: e.lower,
            upper: e.upper,
        }
    }
}

fn theory_rows(arch: &Architecture, xnorm2: f64, band: f64) -> Vec<TheoryRow> {
    let beta = theory::beta_summary(arch);
    let mean = theory::mean_kernel(arch, xnorm2);
    let kb = theory::mean_kb(arch);
    let second = theory::second_moment_envelope_with_band(arch, xnorm2, band);
    let ratio = theory::EnvelopeResult::new(second.central / (mean * mean), band, second.source);
    let mut rows = vec![
        TheoryRow::exact("mean_K", mean),
        TheoryRow::exact("mean_Kw", theory::mean_kw(arch, xnorm2)),
        TheoryRow::exact("mean_Kb_paper", kb.paper),
        TheoryRow::exact("mean_Kb_corrected", kb.corrected),
        TheoryRow::exact("beta_paper", beta.beta_paper),
        TheoryRow::exact("beta_hidden", beta.beta_hidden),
        TheoryRow::envelope("second_moment_K", &second),
        TheoryRow::envelope("ratio_K2", &ratio),
        TheoryRow::envelope(
            "update_ratio",
            &theory::update_envelope_with_band(arch, xnorm2, band),
        ),
    ];
    for (c, e) in theory::component_envelopes_with_band(arch, xnorm2, band) {
        rows.push(TheoryRow::envelope(c.name(), &e));
    }
    rows
}

fn widths_label(arch: &Architecture) -> String {
    arch.hidden_widths()
        .iter()
        .map(|n| n.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

fn cmd_theory(a: &TheoryArgs, started: Instant) -> Result<i32> {
    if !(a.band >= 1.0 && a.band.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "--band {} must be at least 1",
            a.band
        )));
    }
    let c = base_config(&a.arch)?;
    let arch = c.architecture()?;
    let xnorm2: f64 = c.input()?.iter().map(|v| v * v).sum();
    let rows = theory_rows(&arch, xnorm2, a.band);
    for r in &rows {
        for v in [r.central, r.lower, r.upper] {
            if !v.is_finite() {
                return Err(Error::NonFinite(r.formula.clone()));
            }
        }
    }
    let m = manifest("theory", serde_json::to_value(&c)?, None, started);
    match a.output.format.unwrap_or(Format::Csv) {
        Format::Json => emit_json(
            &a.output,
            m,
            json!({ "d": arch.depth(), "n0": arch.input_width(), "widths": widths_label(&arch),
                    "xnorm2": xnorm2, "rows": rows }),
        )?,
        Format::Csv => {
            let header = [
                "d", "n0", "widths", "xnorm2", "formula", "central", "lower", "upper",
            ];
            let records: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        arch.depth().to_string(),
                        arch.input_width().to_string(),
                        widths_label(&arch),
                        mc::format_float(xnorm2),
                        r.formula.clone(),
                        mc::format_float(r.central),
                        mc::format_float(r.lower),
                        mc::format_float(r.upper),
                    ]
                })
                .collect();
            emit(&a.output, &csv_text(&m, &header, &records)?)?;
        }
    }
    if a.output.out.is_some() {
        println!("mean_K = {}", rows[0].central);
    }
    Ok(0)
}

fn cmd_run(a: &RunArgs, update: bool, started: Instant) -> Result<i32> {
    let c = run_config(a, update)?;
    let id = c.id.clone().unwrap_or_else(|| "exp0".to_string());
    let oracle_mean = if c.oracle {
        match mc::oracle_mean(&c) {
            Ok(v) => Some(v),
            Err(Error::EnumerationCap { .. }) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let (row, report) = if update {
        let r = mc::run_update_experiment(&c)?;
        let row = SweepRow::from_reports(id, &r.kernel, Some(&r), oracle_mean)?;
        (row, serde_json::to_value(&r)?)
    } else {
        let r = mc::run_kernel_experiment(&c)?;
        let row = SweepRow::from_reports(id, &r, None, oracle_mean)?;
        (row, serde_json::to_value(&r)?)
    };
    let command = if update { "update" } else { "mc" };
    let m = manifest(command, serde_json::to_value(&c)?, Some(c.seed), started);
    match a.output.format.unwrap_or(Format::Csv) {
        Format::Json => emit_json(&a.output, m, json!({ "row": row, "report": report }))?,
        Format::Csv => emit(&a.output, &csv_text(&m, &CSV_COLUMNS, &[row.record()])?)?,
    }
    Ok(0)
}

fn exact_config(a: &ExactArgs) -> Result<(ExperimentConfig, Architecture, Vec<f64>, OracleCap)> {
    let c = base_config(&a.arch)?;
    let arch = c.architecture()?;
    let x = c.input()?;
    let mut cap = OracleCap::default();
    if let Some(t) = a.max_transitions {
        cap.max_layer_transitions = t;
    }
    Ok((c, arch, x, cap))
}

fn cmd_oracle(a: &ExactArgs, started: Instant) -> Result<i32> {
    json_only(&a.output, "oracle")?;
    let (c, arch, x, cap) = exact_config(a)?;
    let mu4 = oracle::mu4_exact(c.dist);
    let breakdowns = oracle::exact_breakdowns(&arch, &x, &mu4, &cap)?;
    let m = manifest("oracle", serde_json::to_value(&c)?, None, started);
    emit_json(
        &a.output,
        m,
        json!({
            "x": x,
            "dist": c.dist,
            "corrected": breakdowns[0],
            "paper": breakdowns[1],
            "update_mean_over_lambda": {
                "corrected": oracle::to_f64(&breakdowns[0].update_mean_over_lambda()),
                "paper": oracle::to_f64(&breakdowns[1].update_mean_over_lambda()),
            },
        }),
    )?;
    Ok(0)
}

fn cmd_dp(a: &ExactArgs, started: Instant) -> Result<i32> {
    json_only(&a.output, "dp")?;
    let (c, arch, x, _) = exact_config(a)?;
    let spec = ChainSpec::from_architecture(&arch, &x, c.dist)?;
    let sandwich = sandwich_check(&spec)?;
    let chain = chain_expectation(&spec);
    let window_sum = delta_ww_window_sum(&spec);
    let window_closed = delta_ww_window_sum_closed(&spec);
    let d = spec.depth();
    let first_collision = if d >= 2 {
        first_collision_probabilities(&spec, 1, d)?
    } else {
        Vec::new()
    };
    for (name, v) in [
        ("chain value", sandwich.value),
        ("lower bound", sandwich.lower),
        ("upper bound", sandwich.upper),
        ("window sum", window_sum),
        ("closed window sum", window_closed),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    let m = manifest("dp", serde_json::to_value(&c)?, None, started);
    emit_json(
        &a.output,
        m,
        json!({
            "spec": spec,
            "lower": sandwich.lower,
            "value": sandwich.value,
            "upper": sandwich.upper,
            "trace": chain.trace,
            "first_collision": first_collision,
            "delta_ww_window_sum": window_sum,
            "delta_ww_window_sum_closed": window_closed,
        }),
    )?;
    Ok(0)
}

fn cmd_sweep(a: &SweepArgs, started: Instant) -> Result<i32> {
    let spec: SweepSpec = serde_json::from_str(&std::fs::read_to_string(&a.grid)?)?;
    let configs = spec.expand()?;
    let threads = resolve_threads(a.threads, None)?;
    let table: SweepTable = mc::run_sweep(&configs, threads)?;
    for f in &table.failures {
        eprintln!(
            "experiment {} ({}) failed: {}",
            f.index, f.experiment_id, f.error
        );
    }
    let m = manifest("sweep", serde_json::to_value(&spec)?, None, started);
    match a.output.format.unwrap_or(Format::Csv) {
        Format::Json => emit_json(&a.output, m, &table)?,
        Format::Csv => {
            let records: Vec<Vec<String>> = table.rows.iter().map(SweepRow::record).collect();
            emit(&a.output, &csv_text(&m, &CSV_COLUMNS, &records)?)?;
        }
    }
    if table.failures.iter().any(|f| f.internal) {
        return Ok(2);
    }
    Ok(0)
}
