//! Reproducible Monte Carlo estimation of kernel and update moments.
//!
//! Trial `t` draws its network from ChaCha8 stream `t` of the experiment's
//! base seed, so every trial is a pure function of `(seed, t)`. Trials are
//! split into contiguous shards; each shard is accumulated sequentially and
//! the shards are merged in index order, which makes every report
//! independent of the number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::net::{Architecture, NetworkParams, WeightDistribution};
use crate::ntk::{kernel_on_diagonal, sgd_update_kernel};
use crate::oracle::{self, Convention, OracleCap};
use crate::stats::{jackknife, MomentAccumulator, RatioEstimate, ShardTotals};
use crate::theory::{beta_summary, mean_kernel, second_moment_envelope, BetaSummary};
use crate::{Error, Result};

fn default_trials() -> u64 {
    10_000
}

fn default_seed() -> u64 {
    42
}

fn default_lambda() -> f64 {
    1e-3
}

fn default_shards() -> usize {
    32
}

/// Confidence level of reported intervals.
pub const CONFIDENCE: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub n0: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub dist: WeightDistribution,
    /// Explicit input. Takes precedence over `xnorm2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<f64>>,
    /// Squared norm of the all-ones-direction input; defaults to `n0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xnorm2: Option<f64>,
    #[serde(default = "default_trials")]
    pub trials: u64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub target: f64,
    #[serde(default = "default_shards")]
    pub shards: usize,
    /// Worker threads; `None` uses every logical core.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Also run the one-step SGD update.
    #[serde(default)]
    pub update: bool,
    /// Also compute the exact mean by path enumeration when within the cap.
    #[serde(default)]
    pub oracle: bool,
    #[serde(default)]
    pub convention: Convention,
}

impl ExperimentConfig {
    pub fn new(n0: usize, hidden: Vec<usize>) -> Self {
        Self {
            id: None,
            n0,
            hidden,
            dist: WeightDistribution::Normal,
            x: None,
            xnorm2: None,
            trials: default_trials(),
            seed: default_seed(),
            lambda: default_lambda(),
            target: 0.0,
            shards: default_shards(),
            threads: None,
            update: false,
            oracle: false,
            convention: Convention::Corrected,
        }
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::new(self.n0, self.hidden.clone())
    }

    /// The input vector: `x` if given, otherwise all ones scaled to `xnorm2`.
    pub fn input(&self) -> Result<Vec<f64>> {
        if let Some(x) = &self.x {
            if x.len() != self.n0 {
                return Err(Error::InputShape {
                    expected: self.n0,
                    got: x.len(),
                });
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig("x contains a non-finite entry".into()));
            }
            return Ok(x.clone());
        }
        let norm2 = self.xnorm2.unwrap_or(self.n0 as f64);
        if !(norm2 >= 0.0 && norm2.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "xnorm2 = {norm2} must be finite and >= 0"
            )));
        }
        let v = (norm2 / self.n0 as f64).sqrt();
        Ok(vec![v; self.n0])
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture()?;
        self.input()?;
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be at least 1".into()));
        }
        if self.shards == 0 {
            return Err(Error::InvalidConfig("shards must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::InvalidConfig("threads must be at least 1".into()));
        }
        if self.update && !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda = {} must be positive for update experiments",
                self.lambda
            )));
        }
        if !self.target.is_finite() {
            return Err(Error::InvalidConfig("target must be finite".into()));
        }
        Ok(())
    }
}

/// ChaCha8 generator for trial `t` of an experiment seeded with `seed`.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// Half-open trial ranges of each shard.
fn shard_ranges(trials: u64, shards: usize) -> Vec<(u64, u64)> {
    let s = shards as u128;
    let t = trials as u128;
    (0..s)
        .map(|i| ((i * t / s) as u64, ((i + 1) * t / s) as u64))
        .collect()
}

pub(crate) fn build_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    b.build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start thread pool: {e}")))
}

fn merge_all(parts: &[MomentAccumulator]) -> Result<MomentAccumulator> {
    let mut it = parts.iter();
    let first = it.next().expect("at least one shard").clone();
    it.try_fold(first, |acc, p| acc.merge(p))
}

fn check_finite(label: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(label.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Kernel experiments

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentReport {
    pub config: ExperimentConfig,
    pub beta: BetaSummary,
    pub trials: u64,
    pub k: MomentAccumulator,
    pub kw: MomentAccumulator,
    pub kb: MomentAccumulator,
    /// Samples of `K^2`.
    pub k2: MomentAccumulator,
    /// Samples of `K_w K_b`.
    pub kw_kb: MomentAccumulator,
    /// `E[K^2] / E[K]^2`.
    pub ratio: RatioEstimate,
}

#[derive(Clone)]
struct KernelShard {
    k: MomentAccumulator,
    kw: MomentAccumulator,
    kb: MomentAccumulator,
    k2: MomentAccumulator,
    kw_kb: MomentAccumulator,
    totals: ShardTotals,
}

impl KernelShard {
    fn new() -> Self {
        Self {
            k: MomentAccumulator::new("K"),
            kw: MomentAccumulator::new("Kw"),
            kb: MomentAccumulator::new("Kb"),
            k2: MomentAccumulator::new("K^2"),
            kw_kb: MomentAccumulator::new("KwKb"),
            totals: ShardTotals::new(2),
        }
    }

    fn push(&mut self, k: f64, kw: f64, kb: f64) {
        self.k.push(k);
        self.kw.push(kw);
        self.kb.push(kb);
        self.k2.push(k * k);
        self.kw_kb.push(kw * kb);
        self.totals.count += 1.0;
        self.totals.sums[0] += k;
        self.totals.sums[1] += k * k;
    }
}

fn second_moment_ratio(t: &ShardTotals) -> f64 {
    let m1 = t.sums[0] / t.count;
    let m2 = t.sums[1] / t.count;
    m2 / (m1 * m1)
}

fn kernel_report(config: &ExperimentConfig, shards: Vec<KernelShard>) -> Result<MomentReport> {
    let arch = config.architecture()?;
    let pick = |f: fn(&KernelShard) -> &MomentAccumulator| -> Result<MomentAccumulator> {
        merge_all(&shards.iter().map(|s| f(s).clone()).collect::<Vec<_>>())
    };
    let k = pick(|s| &s.k)?;
    let totals: Vec<ShardTotals> = shards.iter().map(|s| s.totals.clone()).collect();
    let ratio = jackknife(&totals, CONFIDENCE, second_moment_ratio);
    check_finite("mean of K", k.mean())?;
    check_finite("kernel ratio", ratio.point)?;
    Ok(MomentReport {
        config: config.clone(),
        beta: beta_summary(&arch),
        trials: k.count(),
        kw: pick(|s| &s.kw)?,
        kb: pick(|s| &s.kb)?,
        k2: pick(|s| &s.k2)?,
        kw_kb: pick(|s| &s.kw_kb)?,
        k,
        ratio,
    })
}

fn kernel_shard(
    arch: &Architecture,
    dist: WeightDistribution,
    x: &[f64],
    seed: u64,
    range: (u64, u64),
) -> Result<KernelShard> {
    let mut shard = KernelShard::new();
    let mut params = NetworkParams::zeros(arch);
    for t in range.0..range.1 {
        let mut rng = trial_rng(seed, t);
        params.resample(dist, &mut rng);
        let s = kernel_on_diagonal(&params, x)?;
        shard.push(s.k, s.kw, s.kb);
    }
    Ok(shard)
}

/// Run on the current rayon pool.
fn kernel_in_pool(config: &ExperimentConfig) -> Result<MomentReport> {
    config.validate()?;
    let arch = config.architecture()?;
    let x = config.input()?;
    let shards = shard_ranges(config.trials, config.shards)
        .into_par_iter()
        .map(|r| kernel_shard(&arch, config.dist, &x, config.seed, r))
        .collect::<Result<Vec<_>>>()?;
    kernel_report(config, shards)
}

pub fn run_kernel_experiment(config: &ExperimentConfig) -> Result<MomentReport> {
    config.validate()?;
    build_pool(config.threads)?.install(|| kernel_in_pool(config))
}

// ---------------------------------------------------------------------------
// Update experiments

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeltaReport {
    pub config: ExperimentConfig,
    pub kernel: MomentReport,
    pub delta_k: MomentAccumulator,
    pub delta_k_lin: MomentAccumulator,
    pub q: MomentAccumulator,
    pub q_ww: MomentAccumulator,
    pub q_wb: MomentAccumulator,
    pub q_bb: MomentAccumulator,
    pub abs_q_ww: MomentAccumulator,
    pub abs_q_bb: MomentAccumulator,
    /// `q_ww (N - target)`.
    pub delta_ww: MomentAccumulator,
    /// `q_wb (N - target)`.
    pub delta_wb: MomentAccumulator,
    pub flips: u64,
    pub flip_rate: f64,
    /// `|E[Delta K_lin]| / E[K]`.
    pub ratio: RatioEstimate,
}

#[derive(Clone)]
struct DeltaShard {
    kernel: KernelShard,
    accs: [MomentAccumulator; 10],
    flips: u64,
    totals: ShardTotals,
}

const DELTA_LABELS: [&str; 10] = [
    "dK", "dK_lin", "q", "q_ww", "q_wb", "q_bb", "|q_ww|", "|q_bb|", "Delta_ww", "Delta_wb",
];

fn update_shard(
    config: &ExperimentConfig,
    arch: &Architecture,
    x: &[f64],
    range: (u64, u64),
) -> Result<DeltaShard> {
    let mut shard = DeltaShard {
        kernel: KernelShard::new(),
        accs: DELTA_LABELS.map(MomentAccumulator::new),
        flips: 0,
        totals: ShardTotals::new(2),
    };
    let mut params = NetworkParams::zeros(arch);
    for t in range.0..range.1 {
        let mut rng = trial_rng(config.seed, t);
        params.resample(config.dist, &mut rng);
        let s = sgd_update_kernel(&params, x, config.target, config.lambda)?;
        shard.kernel.push(s.before.k, s.before.kw, s.before.kb);
        let values = [
            s.delta_k,
            s.delta_k_lin,
            s.quad.q,
            s.quad.ww,
            s.quad.wb,
            s.quad.bb,
            s.quad.ww.abs(),
            s.quad.bb.abs(),
            s.delta_ww(),
            s.delta_wb(),
        ];
        for (acc, v) in shard.accs.iter_mut().zip(values) {
            acc.push(v);
        }
        shard.flips += u64::from(s.pattern_flipped);
        shard.totals.count += 1.0;
        shard.totals.sums[0] += s.delta_k_lin;
        shard.totals.sums[1] += s.before.k;
    }
    Ok(shard)
}

fn update_in_pool(config: &ExperimentConfig) -> Result<DeltaReport> {
    config.validate()?;
    if !config.update {
        let mut c = config.clone();
        c.update = true;
        c.validate()?;
    }
    let arch = config.architecture()?;
    let x = config.input()?;
    let shards = shard_ranges(config.trials, config.shards)
        .into_par_iter()
        .map(|r| update_shard(config, &arch, &x, r))
        .collect::<Result<Vec<_>>>()?;
    let kernel = kernel_report(config, shards.iter().map(|s| s.kernel.clone()).collect())?;
    let merged: Vec<MomentAccumulator> = (0..DELTA_LABELS.len())
        .map(|i| merge_all(&shards.iter().map(|s| s.accs[i].clone()).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    let totals: Vec<ShardTotals> = shards.iter().map(|s| s.totals.clone()).collect();
    let ratio = jackknife(&totals, CONFIDENCE, |t| {
        (t.sums[0] / t.count).abs() / (t.sums[1] / t.count)
    });
    let flips: u64 = shards.iter().map(|s| s.flips).sum();
    for acc in &merged {
        check_finite(acc.label(), acc.mean())?;
    }
    let [delta_k, delta_k_lin, q, q_ww, q_wb, q_bb, abs_q_ww, abs_q_bb, delta_ww, delta_wb]: [MomentAccumulator; 10] =
        merged.try_into().expect("ten accumulators");
    Ok(DeltaReport {
        config: config.clone(),
        flip_rate: flips as f64 / kernel.trials as f64,
        kernel,
        delta_k,
        delta_k_lin,
        q,
        q_ww,
        q_wb,
        q_bb,
        abs_q_ww,
        abs_q_bb,
        delta_ww,
        delta_wb,
        flips,
        ratio,
    })
}

pub fn run_update_experiment(config: &ExperimentConfig) -> Result<DeltaReport> {
    config.validate()?;
    build_pool(config.threads)?.install(|| update_in_pool(config))
}

// ---------------------------------------------------------------------------
// Sweeps

/// Cartesian grid of equal-width architectures sharing every other setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub n0: Vec<usize>,
    pub width: Vec<usize>,
    pub depth: Vec<usize>,
    #[serde(default = "default_grid_dists")]
    pub dist: Vec<WeightDistribution>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xnorm2: Option<f64>,
    #[serde(default = "default_trials")]
    pub trials: u64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub target: f64,
    #[serde(default = "default_shards")]
    pub shards: usize,
    #[serde(default)]
    pub update: bool,
    #[serde(default)]
    pub oracle: bool,
    #[serde(default)]
    pub convention: Convention,
}

fn default_grid_dists() -> Vec<WeightDistribution> {
    vec![WeightDistribution::Normal]
}

/// Sweep file: an explicit experiment list, a grid, or both.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub experiments: Vec<ExperimentConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Grid>,
}

impl SweepSpec {
    /// Explicit experiments first, then the grid in `n0, dist, width, depth`
    /// order.
    pub fn expand(&self) -> Result<Vec<ExperimentConfig>> {
        let mut out = self.experiments.clone();
        if let Some(g) = &self.grid {
            for &n0 in &g.n0 {
                for &dist in &g.dist {
                    for &width in &g.width {
                        for &depth in &g.depth {
                            if depth == 0 {
                                return Err(Error::InvalidConfig("grid depth must be >= 1".into()));
                            }
                            let mut c = ExperimentConfig::new(n0, vec![width; depth - 1]);
                            c.id = Some(format!("n0={n0}/{}/n={width}/d={depth}", dist.name()));
                            c.dist = dist;
                            c.xnorm2 = g.xnorm2;
                            c.trials = g.trials;
                            c.seed = g.seed;
                            c.lambda = g.lambda;
                            c.target = g.target;
                            c.shards = g.shards;
                            c.update = g.update;
                            c.oracle = g.oracle;
                            c.convention = g.convention;
                            out.push(c);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// One output row; `None` cells are written empty.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub experiment_id: String,
    pub d: usize,
    pub n0: usize,
    pub widths: String,
    pub dist: String,
    pub beta_paper: f64,
    pub beta_hidden: f64,
    pub trials: u64,
    pub mean_k: f64,
    pub se_mean_k: f64,
    pub mean_kw: f64,
    pub mean_kb: f64,
    pub mean_k2: f64,
    pub se_k2: f64,
    pub ratio: f64,
    pub ratio_ci_lo: f64,
    pub ratio_ci_hi: f64,
    pub mean_dk: Option<f64>,
    pub mean_dk_lin: Option<f64>,
    pub flip_rate: Option<f64>,
    pub theory_mean: f64,
    pub theory_ratio_central: f64,
    pub oracle_mean: Option<f64>,
}

pub const CSV_COLUMNS: [&str; 23] = [
    "experiment_id",
    "d",
    "n0",
    "widths",
    "dist",
    "beta_paper",
    "beta_hidden",
    "trials",
    "mean_K",
    "se_mean_K",
    "mean_Kw",
    "mean_Kb",
    "mean_K2",
    "se_K2",
    "ratio",
    "ratio_ci_lo",
    "ratio_ci_hi",
    "mean_dK",
    "mean_dK_lin",
    "flip_rate",
    "theory_mean",
    "theory_ratio_central",
    "oracle_mean",
];

/// Floats with 17 significant digits, which round-trip exactly.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

impl SweepRow {
    pub fn from_reports(
        id: String,
        kernel: &MomentReport,
        update: Option<&DeltaReport>,
        oracle_mean: Option<f64>,
    ) -> Result<Self> {
        let config = &kernel.config;
        let arch = config.architecture()?;
        let x = config.input()?;
        let xnorm2: f64 = x.iter().map(|v| v * v).sum();
        let theory_mean = mean_kernel(&arch, xnorm2);
        let row = SweepRow {
            experiment_id: id,
            d: arch.depth(),
            n0: arch.input_width(),
            widths: arch
                .hidden_widths()
                .iter()
                .map(|n| n.to_string())
                .collect::<Vec<_>>()
                .join(";"),
            dist: config.dist.name().to_string(),
            beta_paper: kernel.beta.beta_paper,
            beta_hidden: kernel.beta.beta_hidden,
            trials: kernel.trials,
            mean_k: kernel.k.mean(),
            se_mean_k: kernel.k.se_mean(),
            mean_kw: kernel.kw.mean(),
            mean_kb: kernel.kb.mean(),
            mean_k2: kernel.k2.mean(),
            se_k2: kernel.k2.se_mean(),
            ratio: kernel.ratio.point,
            ratio_ci_lo: kernel.ratio.ci_lo,
            ratio_ci_hi: kernel.ratio.ci_hi,
            mean_dk: update.map(|u| u.delta_k.mean()),
            mean_dk_lin: update.map(|u| u.delta_k_lin.mean()),
            flip_rate: update.map(|u| u.flip_rate),
            theory_mean,
            theory_ratio_central: second_moment_envelope(&arch, xnorm2).central
                / (theory_mean * theory_mean),
            oracle_mean,
        };
        row.check_finite()?;
        Ok(row)
    }

    fn numeric_cells(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("beta_paper", Some(self.beta_paper)),
            ("beta_hidden", Some(self.beta_hidden)),
            ("mean_K", Some(self.mean_k)),
            ("se_mean_K", Some(self.se_mean_k)),
            ("mean_Kw", Some(self.mean_kw)),
            ("mean_Kb", Some(self.mean_kb)),
            ("mean_K2", Some(self.mean_k2)),
            ("se_K2", Some(self.se_k2)),
            ("ratio", Some(self.ratio)),
            ("ratio_ci_lo", Some(self.ratio_ci_lo)),
            ("ratio_ci_hi", Some(self.ratio_ci_hi)),
            ("mean_dK", self.mean_dk),
            ("mean_dK_lin", self.mean_dk_lin),
            ("flip_rate", self.flip_rate),
            ("theory_mean", Some(self.theory_mean)),
            ("theory_ratio_central", Some(self.theory_ratio_central)),
            ("oracle_mean", self.oracle_mean),
        ]
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in self.numeric_cells() {
            if let Some(v) = v {
                check_finite(name, v)?;
            }
        }
        Ok(())
    }

    /// Cells in [`CSV_COLUMNS`] order.
    pub fn record(&self) -> Vec<String> {
        let f = |v: f64| format_float(v);
        let opt = |v: Option<f64>| v.map(format_float).unwrap_or_default();
        vec![
            self.experiment_id.clone(),
            self.d.to_string(),
            self.n0.to_string(),
            self.widths.clone(),
            self.dist.clone(),
            f(self.beta_paper),
            f(self.beta_hidden),
            self.trials.to_string(),
            f(self.mean_k),
            f(self.se_mean_k),
            f(self.mean_kw),
            f(self.mean_kb),
            f(self.mean_k2),
            f(self.se_k2),
            f(self.ratio),
            f(self.ratio_ci_lo),
            f(self.ratio_ci_hi),
            opt(self.mean_dk),
            opt(self.mean_dk_lin),
            opt(self.flip_rate),
            f(self.theory_mean),
            f(self.theory_ratio_central),
            opt(self.oracle_mean),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepFailure {
    pub index: usize,
    pub experiment_id: String,
    pub error: String,
    /// Internal assertion failure rather than invalid input.
    pub internal: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub failures: Vec<SweepFailure>,
}

/// Exact `E[K]` when the enumeration fits under the default cap.
pub fn oracle_mean(config: &ExperimentConfig) -> Result<f64> {
    let arch = config.architecture()?;
    let x = config.input()?;
    let m = oracle::exact_kernel_mean(&arch, &x, config.convention, &OracleCap::default())?;
    Ok(oracle::to_f64(&m))
}

fn run_row(index: usize, config: &ExperimentConfig) -> Result<SweepRow> {
    let id = config.id.clone().unwrap_or_else(|| format!("exp{index}"));
    let (kernel, update) = if config.update {
        let u = update_in_pool(config)?;
        (u.kernel.clone(), Some(u))
    } else {
        (kernel_in_pool(config)?, None)
    };
    let oracle = if config.oracle {
        match oracle_mean(config) {
            Ok(v) => Some(v),
            Err(Error::EnumerationCap { .. }) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    SweepRow::from_reports(id, &kernel, update.as_ref(), oracle)
}

/// Run every config (in parallel across and within configs) on a pool with
/// `threads` workers. Failed configs are recorded and skipped.
pub fn run_sweep(configs: &[ExperimentConfig], threads: Option<usize>) -> Result<SweepTable> {
    let pool = build_pool(threads)?;
    let results: Vec<Result<SweepRow>> = pool.install(|| {
        configs
            .par_iter()
            .enumerate()
            .map(|(i, c)| run_row(i, c))
            .collect()
    });
    let mut table = SweepTable::default();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(row) => table.rows.push(row),
            Err(e) => table.failures.push(SweepFailure {
                index: i,
                experiment_id: configs[i].id.clone().unwrap_or_else(|| format!("exp{i}")),
                error: e.to_string(),
                internal: e.is_internal(),
            }),
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n0: usize, hidden: Vec<usize>, trials: u64) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(n0, hidden);
        c.trials = trials;
        c
    }

    #[test]
    fn shards_cover_trials() {
        let r = shard_ranges(10, 4);
        assert_eq!(r, vec![(0, 2), (2, 5), (5, 7), (7, 10)]);
        let r = shard_ranges(3, 8);
        assert_eq!(r.iter().map(|(a, b)| b - a).sum::<u64>(), 3);
    }

    #[test]
    fn single_linear_layer_is_deterministic() {
        let mut c = cfg(3, vec![], 200);
        c.xnorm2 = Some(6.0);
        c.threads = Some(2);
        let r = run_kernel_experiment(&c).unwrap();
        assert!((r.k.mean() - 3.0).abs() < 1e-12);
        assert!(r.k.variance() < 1e-24);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let mut c = cfg(3, vec![5, 5], 500);
        c.threads = Some(1);
        let a = run_kernel_experiment(&c).unwrap();
        c.threads = Some(3);
        let b = run_kernel_experiment(&c).unwrap();
        assert_eq!(a.k, b.k);
        assert_eq!(a.ratio, b.ratio);
    }

    #[test]
    fn linear_model_has_no_update() {
        let mut c = cfg(2, vec![], 50);
        c.update = true;
        let r = run_update_experiment(&c).unwrap();
        assert_eq!(r.q.mean(), 0.0);
        assert_eq!(r.delta_k_lin.mean(), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(2, vec![3], 0).validate().is_err());
        let mut c = cfg(2, vec![3], 10);
        c.x = Some(vec![1.0]);
        assert!(c.validate().is_err());
        let mut c = cfg(2, vec![3], 10);
        c.update = true;
        c.lambda = 0.0;
        assert!(c.validate().is_err());
        let c: std::result::Result<ExperimentConfig, _> =
            serde_json::from_str(r#"{"n0": 2, "bogus": 1}"#);
        assert!(c.is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let c: ExperimentConfig =
            serde_json::from_str(r#"{"n0":4,"hidden":[16,16,16],"dist":"uniform","xnorm2":2.5}"#)
                .unwrap();
        let again: ExperimentConfig =
            serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.trials, 10_000);
        assert_eq!(c.seed, 42);
    }

    #[test]
    fn grid_expansion() {
        let s: SweepSpec =
            serde_json::from_str(r#"{"grid":{"n0":[4],"width":[8,16],"depth":[2,3,4]}}"#).unwrap();
        let v = s.expand().unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v[5].hidden, vec![16, 16, 16]);
        let empty: SweepSpec =
            serde_json::from_str(r#"{"grid":{"n0":[],"width":[8],"depth":[2]}}"#).unwrap();
        assert!(empty.expand().unwrap().is_empty());
    }

    #[test]
    fn sweep_records_failures_and_keeps_going() {
        let good = cfg(2, vec![3], 20);
        let bad = cfg(2, vec![3], 0);
        let t = run_sweep(&[good.clone(), bad, good], Some(1)).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.failures.len(), 1);
        assert_eq!(t.failures[0].index, 1);
        assert_eq!(t.rows[0].record().len(), CSV_COLUMNS.len());
    }
}
