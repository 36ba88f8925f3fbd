//! Configuration-driven runs: the split-versus-cross-fit benchmark, the diagnostic
//! suites and policy-value evaluation. Each run computes everything in memory and
//! only then writes its artifacts, so a failing run leaves no partial output.
//!
//! Every random stream is derived from `master_seed` by integer tags and every
//! parallel map collects in input order, so outputs do not depend on thread count.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridge::{
    deconfounded_summary, fit_bridge_crossfit, prepare_crossfit, prepare_split, Bridge, BridgeArtifact, BridgeEstimate,
    PreparedFit, RefMeasure, Stage2Settings, TensorGrid,
};
use crate::diagnostics::{
    oracle_gap_check, pseudo_comparator, risk_identity_check, risk_report, stage1_terms, ComparatorSettings, McSizes,
    OracleGapReport, Population, RiskIdentityReport, RiskReport, StageOneReport, DIAGNOSTICS_SCHEMA_VERSION,
};
use crate::error::{config_err, Error, Result};
use crate::nuisance::{Nuisance, NuisanceSettings};
use crate::points::PointSet;
use crate::policy::{policy_value, rollout_value, BridgeSet, LogisticPolicy, QuadratureSettings, ValueReport};
use crate::rng::{derive_seed, tags};
use crate::stats::{median, McEstimate};
use crate::synthetic::{
    do_transition_oracle, extract_cmr, observed, sample_dataset, CmrKind, Episode, EpisodeRecord, ExactBridge,
    FiniteLatentPomdp, FiniteLatentSpec, GaussianPomdp, LatentModel, ObservedEpisode, PomdpSpec,
};

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;
pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const VALUE_REPORT_FILE: &str = "value_report.json";
pub const BRIDGES_FILE: &str = "bridges.json";
pub const EPISODES_FILE: &str = "episodes.jsonl";

/// Share of benchmark rows that may be skipped before the run counts as failed.
pub const MAX_SKIPPED_FRACTION: f64 = 0.2;

/// Stream tags local to the runners (kept apart from the library tags).
mod stream {
    pub const BENCHMARK: u64 = 101;
    pub const TRUTH: u64 = 102;
    pub const POLICY: u64 = 103;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Benchmark,
    Diagnostics,
    PolicyValue,
}

/// Simulator selection. `kind` picks the model; the other keys are its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DgpConfig {
    Gaussian(PomdpSpec),
    Finite(FiniteLatentSpec),
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self::Gaussian(PomdpSpec::default())
    }
}

/// A validated simulator.
#[derive(Clone, Debug)]
pub enum Dgp {
    Gaussian(GaussianPomdp),
    Finite(FiniteLatentPomdp),
}

impl Dgp {
    pub fn model(&self) -> &dyn LatentModel {
        match self {
            Dgp::Gaussian(m) => m,
            Dgp::Finite(m) => m,
        }
    }

    /// Closed-form bridges for every stage, when the model admits them.
    pub fn exact_bridges(&self) -> Result<BridgeSet> {
        fn build<M: LatentModel + Clone + 'static>(m: &M) -> Result<BridgeSet> {
            let t = m.horizon();
            let reward = ExactBridge::new(m, CmrKind::Reward)?;
            let transition = ExactBridge::new(m, CmrKind::Transition)?;
            Ok(BridgeSet {
                reward: (0..t).map(|_| Box::new(reward.clone()) as Box<dyn Bridge>).collect(),
                transition: (1..t).map(|_| Box::new(transition.clone()) as Box<dyn Bridge>).collect(),
            })
        }
        match self {
            Dgp::Gaussian(m) => build(m),
            Dgp::Finite(m) => build(m),
        }
    }
}

impl DgpConfig {
    pub fn build(&self) -> Result<Dgp> {
        Ok(match self {
            DgpConfig::Gaussian(s) => Dgp::Gaussian(GaussianPomdp::new(s.clone())?),
            DgpConfig::Finite(s) => Dgp::Finite(FiniteLatentPomdp::new(s.clone())?),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuisanceMode {
    /// The cross-fitted nuisance estimates.
    #[default]
    Fitted,
    /// The simulator's exact laws in place of every nuisance estimate.
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub n: usize,
    pub folds: usize,
    pub lambda: f64,
    /// Independent datasets; each gets the full set of checks.
    pub seeds: usize,
    pub mode: NuisanceMode,
    pub mc: McSizes,
    pub comparator: ComparatorSettings,
    /// Share of seeds that must pass for a check to pass.
    pub pass_rate: f64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            n: 480,
            folds: 4,
            lambda: 1e-3,
            seeds: 10,
            mode: NuisanceMode::Fitted,
            mc: McSizes::default(),
            comparator: ComparatorSettings::default(),
            pass_rate: 0.9,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeSource {
    /// Cross-fit every bridge on a fresh logged sample.
    #[default]
    Fit,
    /// The simulator's closed-form bridges.
    Exact,
    /// Bridges saved by an earlier fitting run.
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyValueConfig {
    pub bridges: BridgeSource,
    /// Required with `bridges = "file"`; relative paths resolve against the config file.
    pub bridge_file: Option<PathBuf>,
    /// JSON [`LogisticPolicy`]; the uniform random policy when absent.
    pub policy_file: Option<PathBuf>,
    /// Logged episodes for fitting and for the measurement sample.
    pub n: usize,
    pub folds: usize,
    pub lambda: f64,
    /// Simulator rollouts of the policy reported next to the estimate (0 skips them).
    pub rollouts: usize,
    /// Integration grids; derived from the logged observations when absent.
    pub quadrature: Option<QuadratureSettings>,
}

impl Default for PolicyValueConfig {
    fn default() -> Self {
        Self {
            bridges: BridgeSource::Fit,
            bridge_file: None,
            policy_file: None,
            n: 1000,
            folds: 5,
            lambda: 1e-3,
            rollouts: 200_000,
            quadrature: None,
        }
    }
}

/// Everything a run needs. Read from TOML; every key is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub sample_sizes: Vec<usize>,
    pub folds: usize,
    pub m_per_fold: usize,
    pub dictionary_cap: usize,
    pub box_trim: f64,
    pub lambda_grid: Vec<f64>,
    pub replications: usize,
    /// Points per axis of the quadrature grid of the deconfounded summary.
    pub summary_grid_points: usize,
    /// Rollouts per action for the interventional truth.
    pub oracle_mc: usize,
    pub nuisance: NuisanceSettings,
    pub dgp: DgpConfig,
    pub diagnostics: DiagnosticsConfig,
    pub policy_value: PolicyValueConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let s2 = Stage2Settings::default();
        Self {
            task: Task::Benchmark,
            master_seed: 20_240_601,
            output_dir: PathBuf::from("results"),
            sample_sizes: vec![120, 240, 480, 960, 1920],
            folds: 5,
            m_per_fold: s2.m_per_fold,
            dictionary_cap: s2.dictionary_cap,
            box_trim: s2.box_trim,
            lambda_grid: vec![1e-4, 1e-3],
            replications: 20,
            summary_grid_points: 12,
            oracle_mc: 1_000_000,
            nuisance: NuisanceSettings::default(),
            dgp: DgpConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
            policy_value: PolicyValueConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a TOML config. Relative paths inside it resolve against its directory.
    pub fn from_toml_str(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text)?;
        if let Some(base) = base {
            let pv = &mut cfg.policy_value;
            for p in [&mut pv.bridge_file, &mut pv.policy_file].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, path.parent())
    }

    pub fn stage2(&self) -> Stage2Settings {
        Stage2Settings { m_per_fold: self.m_per_fold, dictionary_cap: self.dictionary_cap, box_trim: self.box_trim }
    }

    /// Checks every setting that a run reads; nothing is computed before this passes.
    pub fn validate(&self) -> Result<Dgp> {
        let dgp = self.dgp.build()?;
        if self.folds < 2 {
            return config_err("folds must be at least 2");
        }
        if self.m_per_fold < 1 || self.dictionary_cap < 1 {
            return config_err("m_per_fold and dictionary_cap must be positive");
        }
        if !(0.0..0.5).contains(&self.box_trim) {
            return config_err("box_trim must lie in [0, 0.5)");
        }
        let rule = self.nuisance.lambda1;
        if !(rule.scale > 0.0 && rule.scale.is_finite() && rule.exponent.is_finite()) {
            return config_err("nuisance.lambda1 needs a positive scale and a finite exponent");
        }
        if self.summary_grid_points < 8 {
            return config_err("summary_grid_points must be at least 8");
        }
        match self.task {
            Task::Benchmark => {
                if self.sample_sizes.is_empty() {
                    return config_err("sample_sizes must not be empty");
                }
                if self.replications < 1 {
                    return config_err("replications must be at least 1");
                }
                check_lambdas(&self.lambda_grid)?;
                if self.oracle_mc < 2 {
                    return config_err("oracle_mc must be at least 2");
                }
                if dgp.model().horizon() < 2 {
                    return config_err("the benchmark needs horizon at least 2");
                }
                let unit = lcm(self.folds, 2);
                for &n in &self.sample_sizes {
                    if n / unit * unit < 4 * unit {
                        return config_err(format!("sample size {n} is too small for {} folds", self.folds));
                    }
                }
            }
            Task::Diagnostics => {
                let d = &self.diagnostics;
                if d.folds < 2 || d.n < 4 * d.folds {
                    return config_err("diagnostics need folds ≥ 2 and n ≥ 4·folds");
                }
                if d.seeds < 1 || !(0.0..=1.0).contains(&d.pass_rate) {
                    return config_err("diagnostics need seeds ≥ 1 and pass_rate in [0, 1]");
                }
                check_lambdas(&[d.lambda])?;
                d.mc.check()?;
                if dgp.model().horizon() < 2 {
                    return config_err("the diagnostics need horizon at least 2");
                }
            }
            Task::PolicyValue => {
                let p = &self.policy_value;
                if p.n < 2 {
                    return config_err("policy_value.n must be at least 2");
                }
                if p.bridges == BridgeSource::Fit {
                    if p.folds < 2 || p.n < 4 * p.folds {
                        return config_err("fitting needs folds ≥ 2 and n ≥ 4·folds");
                    }
                    check_lambdas(&[p.lambda])?;
                }
                if p.bridges == BridgeSource::File && p.bridge_file.is_none() {
                    return config_err("bridges = \"file\" needs bridge_file");
                }
            }
        }
        Ok(dgp)
    }
}

fn check_lambdas(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
        return config_err("regularization values must be positive and finite");
    }
    Ok(())
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Switches shared by all runners.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Also write one logged dataset with its hidden states.
    pub debug_latents: bool,
}

fn measurements(eps: &[ObservedEpisode]) -> Result<PointSet> {
    PointSet::from_rows(&eps.iter().map(|e| e.m.clone()).collect::<Vec<_>>())
}

fn hull(fit: &PreparedFit) -> Result<RefMeasure> {
    let measures = &fit.system.measures;
    measures[1..].iter().try_fold(measures[0].clone(), |acc, m| acc.hull(m))
}

fn episodes_jsonl(eps: &[Episode]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for e in eps {
        serde_json::to_writer(&mut out, &EpisodeRecord::new(e, true))?;
        out.push(b'\n');
    }
    Ok(out)
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

/// Writes named files into `dir`, creating it first.
fn write_files(dir: &Path, files: &[(&str, &[u8])]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, bytes) in files {
        let mut f = fs::File::create(dir.join(name))?;
        f.write_all(bytes)?;
    }
    Ok(())
}

// ---------------------------------------------------------------- benchmark

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Split,
    Crossfit,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::Split, Method::Crossfit];

    pub fn name(self) -> &'static str {
        match self {
            Method::Split => "split",
            Method::Crossfit => "crossfit",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Method::Split => 0,
            Method::Crossfit => 1,
        }
    }
}

/// One row of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    #[serde(rename = "N")]
    pub n: usize,
    /// Seed of the replication's logged dataset (shared by both methods).
    pub seed: u64,
    pub lambda: f64,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skip {
    pub method: Method,
    #[serde(rename = "N")]
    pub n: usize,
    pub replication: usize,
    /// Affected λ values (all of them when the Stage I fit failed).
    pub lambdas: Vec<f64>,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: Method,
    #[serde(rename = "N")]
    pub n: usize,
    pub lambda: f64,
    pub count: usize,
    pub mean: f64,
    pub stderr: f64,
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub schema_version: u32,
    pub master_seed: u64,
    /// Sample sizes after trimming to multiples of the fold count.
    pub sample_sizes: Vec<usize>,
    pub replications: usize,
    pub lambda_grid: Vec<f64>,
    /// Interventional E[Y_2 | do(U_1 = u)] for u = 0, 1.
    pub truth: [McEstimate; 2],
    pub cells: Vec<CellSummary>,
    pub skipped: Vec<Skip>,
    pub skipped_rows: usize,
    pub total_rows: usize,
}

pub struct BenchmarkOutput {
    pub rows: Vec<ResultRow>,
    pub summary: BenchmarkSummary,
    debug_episodes: Option<Vec<u8>>,
}

impl BenchmarkOutput {
    pub fn skipped_fraction(&self) -> f64 {
        self.summary.skipped_rows as f64 / self.summary.total_rows.max(1) as f64
    }

    pub fn csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        if self.rows.is_empty() {
            w.write_record(["method", "N", "seed", "lambda", "mse"])?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let csv = self.csv_bytes()?;
        let summary = json_bytes(&self.summary)?;
        let mut files: Vec<(&str, &[u8])> = vec![(RESULTS_FILE, &csv), (SUMMARY_FILE, &summary)];
        if let Some(e) = &self.debug_episodes {
            files.push((EPISODES_FILE, e));
        }
        write_files(dir, &files)
    }
}

/// Sample size actually used for `n`: the largest multiple of lcm(K, 2) not above it.
pub fn trimmed_size(n: usize, folds: usize) -> usize {
    let unit = lcm(folds, 2);
    n / unit * unit
}

/// Outcome of one method on one dataset: squared errors per λ index, and the λ
/// indices that failed numerically with the last failure message.
struct UnitResult {
    scored: Vec<(usize, f64)>,
    failed: Vec<usize>,
    reason: String,
}

/// Fits one method on one dataset and scores every λ. A numerical failure of the
/// Stage I fit fails every λ; configuration errors abort the run.
fn benchmark_unit(
    cfg: &ExperimentConfig,
    data: &crate::synthetic::CmrDataset,
    ms: &PointSet,
    truth: &[McEstimate; 2],
    method: Method,
    seed: u64,
) -> Result<UnitResult> {
    let prepared = match method {
        Method::Split => prepare_split(data, &cfg.nuisance, &cfg.stage2(), seed),
        Method::Crossfit => prepare_crossfit(data, cfg.folds, &cfg.nuisance, &cfg.stage2(), seed),
    };
    let fit = match prepared {
        Ok(f) => f,
        Err(e) if e.is_config() => return Err(e),
        Err(e) => {
            return Ok(UnitResult {
                scored: vec![],
                failed: (0..cfg.lambda_grid.len()).collect(),
                reason: e.to_string(),
            })
        }
    };
    let nu = hull(&fit)?;
    let grid = TensorGrid::over_box(&nu.lower, &nu.upper, cfg.summary_grid_points)?;
    let mut out = UnitResult { scored: vec![], failed: vec![], reason: String::new() };
    for (li, &lambda) in cfg.lambda_grid.iter().enumerate() {
        let scored = fit_bridge_crossfit(&fit.system, lambda).and_then(|b| {
            let mut mse = 0.0;
            for u in 0..2u8 {
                let s = deconfounded_summary(&b, ms, u, &grid)?;
                mse += (s - truth[usize::from(u)].mean).powi(2) / 2.0;
            }
            Ok(mse)
        });
        match scored {
            Ok(mse) => out.scored.push((li, mse)),
            Err(e) if e.is_config() => return Err(e),
            Err(e) => {
                out.failed.push(li);
                out.reason = e.to_string();
            }
        }
    }
    Ok(out)
}

/// Split versus cross-fit on the stage-1 transition bridge. For every sample size
/// and replication one dataset is drawn and both estimators are fit on it; each is
/// scored by the mean over u ∈ {0, 1} of the squared error of the deconfounded
/// summary against the interventional truth.
pub fn run_benchmark(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<BenchmarkOutput> {
    let dgp = cfg.validate()?;
    let model = dgp.model();
    let sizes: Vec<usize> = cfg
        .sample_sizes
        .iter()
        .map(|&n| {
            let t = trimmed_size(n, cfg.folds);
            if t != n {
                warn!("sample size {n} trimmed to {t} (multiple of {})", lcm(cfg.folds, 2));
            }
            t
        })
        .collect();
    let truth_seed = derive_seed(cfg.master_seed, &[stream::TRUTH]);
    let truth = [
        do_transition_oracle(model, 0, cfg.oracle_mc, derive_seed(truth_seed, &[0]))?,
        do_transition_oracle(model, 1, cfg.oracle_mc, derive_seed(truth_seed, &[1]))?,
    ];
    info!("interventional truth: {:.5} / {:.5}", truth[0].mean, truth[1].mean);

    let units: Vec<(usize, usize)> = sizes.iter().flat_map(|&n| (0..cfg.replications).map(move |r| (n, r))).collect();
    let base = derive_seed(cfg.master_seed, &[stream::BENCHMARK]);
    type UnitOut = (usize, usize, u64, Vec<(Method, UnitResult)>);
    let results: Vec<UnitOut> = units
        .par_iter()
        .map(|&(n, rep)| -> Result<UnitOut> {
            let data_seed = derive_seed(base, &[tags::DATASET, n as u64, rep as u64]);
            let eps = observed(&sample_dataset(model, n, data_seed));
            let data = extract_cmr(&eps, 1, CmrKind::Transition)?;
            let ms = measurements(&eps)?;
            let mut per_method = Vec::new();
            for method in Method::ALL {
                let seed = derive_seed(base, &[n as u64, method.tag(), rep as u64]);
                per_method.push((method, benchmark_unit(cfg, &data, &ms, &truth, method, seed)?));
            }
            info!("N = {n}, replication {rep} done");
            Ok((n, rep, data_seed, per_method))
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (n, rep, seed, per_method) in results {
        for (method, res) in per_method {
            for (li, mse) in res.scored {
                rows.push(ResultRow { method, n, seed, lambda: cfg.lambda_grid[li], mse });
            }
            if !res.failed.is_empty() {
                warn!("skipping {} at N = {n}, replication {rep}: {}", method.name(), res.reason);
                let lambdas = res.failed.iter().map(|&l| cfg.lambda_grid[l]).collect();
                skipped.push(Skip { method, n, replication: rep, lambdas, reason: res.reason });
            }
        }
    }
    let skipped_rows: usize = skipped.iter().map(|s| s.lambdas.len()).sum();
    let total_rows = units.len() * 2 * cfg.lambda_grid.len();

    let mut cells = Vec::new();
    for method in Method::ALL {
        for &n in &sizes {
            for &lambda in &cfg.lambda_grid {
                let v: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.method == method && r.n == n && r.lambda == lambda)
                    .map(|r| r.mse)
                    .collect();
                if v.is_empty() {
                    continue;
                }
                let est = McEstimate::from_samples(&v);
                cells.push(CellSummary {
                    method,
                    n,
                    lambda,
                    count: v.len(),
                    mean: est.mean,
                    stderr: est.stderr,
                    median: median(&v),
                });
            }
        }
    }
    let debug_episodes = if opts.debug_latents {
        let seed = derive_seed(base, &[tags::DATASET, sizes[0] as u64, 0]);
        Some(episodes_jsonl(&sample_dataset(model, sizes[0], seed))?)
    } else {
        None
    };
    Ok(BenchmarkOutput {
        rows,
        summary: BenchmarkSummary {
            schema_version: SUMMARY_SCHEMA_VERSION,
            master_seed: cfg.master_seed,
            sample_sizes: sizes,
            replications: cfg.replications,
            lambda_grid: cfg.lambda_grid.clone(),
            truth,
            cells,
            skipped,
            skipped_rows,
            total_rows,
        },
        debug_episodes,
    })
}

// -------------------------------------------------------------- diagnostics

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedDiagnostics {
    pub index: usize,
    pub dataset_seed: u64,
    pub risk: RiskReport,
    pub risk_identity: Vec<RiskIdentityReport>,
    pub stage1: Vec<StageOneReport>,
    pub gap: OracleGapReport,
    pub comparator_norm_sq: f64,
}

impl SeedDiagnostics {
    pub fn risk_identity_pass(&self) -> bool {
        self.risk_identity.iter().all(|r| r.pass)
    }

    pub fn cross_pass(&self) -> bool {
        self.stage1.iter().all(|r| r.cross_pass)
    }

    pub fn drift_pass(&self) -> bool {
        self.stage1.iter().all(|r| r.drift_pass)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckTally {
    pub name: String,
    pub passes: usize,
    pub seeds: usize,
    pub required: usize,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsOutput {
    pub schema_version: u32,
    pub master_seed: u64,
    pub n: usize,
    pub folds: usize,
    pub lambda: f64,
    pub mode: NuisanceMode,
    pub seeds: Vec<SeedDiagnostics>,
    pub checks: Vec<CheckTally>,
    pub all_pass: bool,
    #[serde(skip)]
    debug_episodes: Option<Vec<u8>>,
}

impl DiagnosticsOutput {
    pub fn check(&self, name: &str) -> Option<&CheckTally> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let report = json_bytes(self)?;
        let mut files: Vec<(&str, &[u8])> = vec![(DIAGNOSTICS_FILE, &report)];
        if let Some(e) = &self.debug_episodes {
            files.push((EPISODES_FILE, e));
        }
        write_files(dir, &files)
    }
}

fn diagnose_seed(cfg: &ExperimentConfig, model: &dyn LatentModel, index: usize) -> Result<SeedDiagnostics> {
    let d = &cfg.diagnostics;
    let base = derive_seed(cfg.master_seed, &[tags::DIAGNOSTICS, index as u64]);
    let dataset_seed = derive_seed(base, &[tags::DATASET]);
    let eps = observed(&sample_dataset(model, d.n, dataset_seed));
    let data = extract_cmr(&eps, 1, CmrKind::Transition)?;
    let fit = prepare_crossfit(&data, d.folds, &cfg.nuisance, &cfg.stage2(), derive_seed(base, &[1]))?;
    let b = fit_bridge_crossfit(&fit.system, d.lambda)?;
    let pop = Population {
        model,
        stage: 1,
        kind: CmrKind::Transition,
        measure: hull(&fit)?,
        kernel_w: fit.system.basis.kernel_w,
    };
    let oracle = pop.oracle();
    let nuisance = |k: usize| -> &dyn Nuisance {
        match d.mode {
            NuisanceMode::Fitted => &fit.nuisances[k],
            NuisanceMode::Oracle => &oracle,
        }
    };
    let risk = risk_report(&b, &fit, &pop, &d.mc, derive_seed(base, &[2]))?;
    let mut risk_identity = Vec::new();
    let mut stage1 = Vec::new();
    for (k, _) in fit.nuisances.iter().enumerate() {
        risk_identity.push(risk_identity_check(&b, nuisance(k), k, &pop, &d.mc, derive_seed(base, &[3, k as u64]))?);
        stage1.push(stage1_terms(&b, nuisance(k), k, &pop, &d.mc, derive_seed(base, &[4, k as u64]))?);
    }
    let comparator: BridgeEstimate =
        pseudo_comparator(&pop, d.n, &d.comparator, fit.system.kernel_z, d.lambda, derive_seed(base, &[5]))?;
    let gap = oracle_gap_check(&b, &comparator, &fit.system, &pop, &d.mc, derive_seed(base, &[6]))?;
    info!("diagnostics seed {index} done");
    Ok(SeedDiagnostics {
        index,
        dataset_seed,
        risk,
        risk_identity,
        stage1,
        gap,
        comparator_norm_sq: comparator.rkhs_norm_sq,
    })
}

/// The foldwise identity, the stage-one inequalities and the comparator checks on
/// `diagnostics.seeds` independent datasets of the stage-1 transition bridge.
pub fn run_diagnostics(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<DiagnosticsOutput> {
    let dgp = cfg.validate()?;
    let model = dgp.model();
    let d = &cfg.diagnostics;
    let seeds: Vec<SeedDiagnostics> =
        (0..d.seeds).into_par_iter().map(|i| diagnose_seed(cfg, model, i)).collect::<Result<_>>()?;
    let required = (d.pass_rate * d.seeds as f64 - 1e-9).ceil() as usize;
    let tally = |name: &str, f: &dyn Fn(&SeedDiagnostics) -> bool| {
        let passes = seeds.iter().filter(|s| f(s)).count();
        CheckTally { name: name.into(), passes, seeds: d.seeds, required, pass: passes >= required }
    };
    let checks = vec![
        tally("risk_identity", &|s| s.risk_identity_pass()),
        tally("cross_term_bound", &|s| s.cross_pass()),
        tally("drift_bound", &|s| s.drift_pass()),
        tally("minimality", &|s| s.gap.minimal),
        tally("two_point_bound", &|s| s.gap.pass),
    ];
    let all_pass = checks.iter().all(|c| c.pass);
    let debug_episodes = if opts.debug_latents {
        let base = derive_seed(cfg.master_seed, &[tags::DIAGNOSTICS, 0]);
        Some(episodes_jsonl(&sample_dataset(model, d.n, derive_seed(base, &[tags::DATASET])))?)
    } else {
        None
    };
    Ok(DiagnosticsOutput {
        schema_version: DIAGNOSTICS_SCHEMA_VERSION,
        master_seed: cfg.master_seed,
        n: d.n,
        folds: d.folds,
        lambda: d.lambda,
        mode: d.mode,
        seeds,
        checks,
        all_pass,
        debug_episodes,
    })
}

// ------------------------------------------------------------- policy value

/// Bridges of every stage in their on-disk form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeFile {
    pub schema_version: u32,
    pub reward: Vec<BridgeArtifact>,
    pub transition: Vec<BridgeArtifact>,
}

impl BridgeFile {
    pub fn into_set(self) -> Result<BridgeSet> {
        let load = |v: Vec<BridgeArtifact>| -> Result<Vec<Box<dyn Bridge>>> {
            v.into_iter().map(|a| Ok(Box::new(BridgeEstimate::from_artifact(a)?) as Box<dyn Bridge>)).collect()
        };
        Ok(BridgeSet { reward: load(self.reward)?, transition: load(self.transition)? })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyValueOutput {
    pub schema_version: u32,
    pub master_seed: u64,
    pub bridges: BridgeSource,
    pub policy: LogisticPolicy,
    pub report: ValueReport,
    /// V̂ with every grid spacing halved.
    pub refined_value: f64,
    /// |refined − V̂| / max(|V̂|, 1e-12).
    pub refinement_change: f64,
    /// Simulator rollouts of the same policy, when requested.
    pub rollout: Option<McEstimate>,
    #[serde(skip)]
    fitted: Option<BridgeFile>,
    #[serde(skip)]
    debug_episodes: Option<Vec<u8>>,
}

impl PolicyValueOutput {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let report = json_bytes(self)?;
        let bridges = self.fitted.as_ref().map(json_bytes).transpose()?;
        let mut files: Vec<(&str, &[u8])> = vec![(VALUE_REPORT_FILE, &report)];
        if let Some(b) = &bridges {
            files.push((BRIDGES_FILE, b));
        }
        if let Some(e) = &self.debug_episodes {
            files.push((EPISODES_FILE, e));
        }
        write_files(dir, &files)
    }
}

/// Default integration box: the range of every logged observation and measurement
/// coordinate, widened by a quarter of that range on both sides.
fn default_quadrature(eps: &[ObservedEpisode], obs_dim: usize) -> QuadratureSettings {
    let mut lo = vec![f64::INFINITY; obs_dim];
    let mut hi = vec![f64::NEG_INFINITY; obs_dim];
    for e in eps {
        for y in e.y.iter().chain(std::iter::once(&e.m)) {
            for (k, v) in y.iter().enumerate() {
                lo[k] = lo[k].min(*v);
                hi[k] = hi[k].max(*v);
            }
        }
    }
    for k in 0..obs_dim {
        let pad = 0.25 * (hi[k] - lo[k]).max(1e-6);
        lo[k] -= pad;
        hi[k] += pad;
    }
    QuadratureSettings::new(lo, hi, 41)
}

fn fit_all_bridges(cfg: &ExperimentConfig, eps: &[ObservedEpisode], horizon: usize) -> Result<BridgeFile> {
    let p = &cfg.policy_value;
    let base = derive_seed(cfg.master_seed, &[stream::POLICY, 1]);
    let jobs: Vec<(CmrKind, usize)> =
        (1..=horizon).map(|t| (CmrKind::Reward, t)).chain((1..horizon).map(|t| (CmrKind::Transition, t))).collect();
    let fitted: Vec<BridgeArtifact> = jobs
        .par_iter()
        .map(|&(kind, t)| -> Result<BridgeArtifact> {
            let data = extract_cmr(eps, t, kind)?;
            let tag = if kind == CmrKind::Reward { 0 } else { 1 };
            let fit =
                prepare_crossfit(&data, p.folds, &cfg.nuisance, &cfg.stage2(), derive_seed(base, &[tag, t as u64]))?;
            Ok(fit_bridge_crossfit(&fit.system, p.lambda)?.to_artifact())
        })
        .collect::<Result<_>>()?;
    let (reward, transition) = fitted.split_at(horizon);
    Ok(BridgeFile { schema_version: SUMMARY_SCHEMA_VERSION, reward: reward.to_vec(), transition: transition.to_vec() })
}

fn missing_bridges(msg: String) -> Error {
    Error::Config(format!("bridges unavailable: {msg}"))
}

/// V̂(π) from fitted, exact or stored bridges, with a grid-refinement check and
/// optional simulator rollouts of the same policy.
pub fn run_policy_value(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<PolicyValueOutput> {
    let dgp = cfg.validate()?;
    let model = dgp.model();
    let p = &cfg.policy_value;
    let horizon = model.horizon();
    let policy = match &p.policy_file {
        Some(path) => LogisticPolicy::from_json_file(path)
            .map_err(|e| Error::Config(format!("cannot load policy {}: {e}", path.display())))?,
        None => LogisticPolicy::constant(horizon, 0.5),
    };
    policy.validate(model.obs_dim())?;
    if policy.stages.len() > horizon {
        return config_err(format!("the policy has {} stages but the model only {horizon}", policy.stages.len()));
    }
    let bridge_set = match (p.bridges, &p.bridge_file) {
        (BridgeSource::File, Some(path)) => {
            let text = fs::read_to_string(path).map_err(|e| missing_bridges(format!("{}: {e}", path.display())))?;
            let file: BridgeFile = serde_json::from_str(&text).map_err(|e| missing_bridges(e.to_string()))?;
            Some(file.into_set().map_err(|e| missing_bridges(e.to_string()))?)
        }
        (BridgeSource::Exact, _) => Some(dgp.exact_bridges().map_err(|e| missing_bridges(e.to_string()))?),
        _ => None,
    };
    let data_seed = derive_seed(cfg.master_seed, &[stream::POLICY, 0]);
    let raw = sample_dataset(model, p.n, data_seed);
    let eps = observed(&raw);
    let (bridges, fitted) = match bridge_set {
        Some(b) => (b, None),
        None => {
            let file = fit_all_bridges(cfg, &eps, policy.stages.len())?;
            (file.clone().into_set()?, Some(file))
        }
    };
    if bridges.horizon() < policy.stages.len() {
        return Err(missing_bridges(format!(
            "{} reward bridges for a {}-stage policy",
            bridges.horizon(),
            policy.stages.len()
        )));
    }
    let quadrature = p.quadrature.clone().unwrap_or_else(|| default_quadrature(&eps, model.obs_dim()));
    let ms = measurements(&eps)?;
    let report = policy_value(&bridges, &policy, &quadrature, &ms)?;
    let refined = policy_value(&bridges, &policy, &quadrature.refined(), &ms)?;
    let refinement_change = (refined.value - report.value).abs() / report.value.abs().max(1e-12);
    let rollout = if p.rollouts > 0 {
        let seed = derive_seed(cfg.master_seed, &[stream::POLICY, tags::ROLLOUT]);
        Some(rollout_value(model, &policy, p.rollouts, seed)?.value)
    } else {
        None
    };
    let debug_episodes = if opts.debug_latents { Some(episodes_jsonl(&raw)?) } else { None };
    Ok(PolicyValueOutput {
        schema_version: SUMMARY_SCHEMA_VERSION,
        master_seed: cfg.master_seed,
        bridges: p.bridges,
        policy,
        refined_value: refined.value,
        refinement_change,
        report,
        rollout,
        fitted,
        debug_episodes,
    })
}
