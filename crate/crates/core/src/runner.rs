//! Configuration-driven runs: refinement traces, splitting estimates, the
//! naive baseline and adversarial comparisons, written as CSV and JSON.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::DistributionConfig;
use crate::mcmc::{diagnostics_to_csv, mcmc_tree_estimate, MCMCConfig};
use crate::problems::{
    adversarial_by_id, as_unnormalized, naive_mc, oracle_value, parse_adversarial_id, problem_by_id,
    resolve_distribution, AdversarialId, NaiveMcResult, ProblemSpec,
};
use crate::refinement::{bounds_trace, deterministic_bounds, refine_budgeted, trace_to_csv, BoundPair};
use crate::splitting::{splitting_tree_estimate, EstimateReport};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
const DEFAULT_ALPHA: f64 = 0.05;
const ORACLE_RESOLUTION: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Refine,
    EstimateExact,
    EstimateMcmc,
    Baseline,
    Adversarial,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Refine => "refine",
            Mode::EstimateExact => "estimate-exact",
            Mode::EstimateMcmc => "estimate-mcmc",
            Mode::Baseline => "baseline",
            Mode::Adversarial => "adversarial",
        }
    }

    fn is_stochastic(self) -> bool {
        matches!(self, Mode::EstimateExact | Mode::EstimateMcmc | Mode::Baseline)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: String,
    pub mode: Mode,
    /// Budget of calls to `g`; the sample size in baseline mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(rename = "N", default, skip_serializing_if = "Option::is_none")]
    pub big_n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Replaces the problem's law of `X`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distribution: Option<DistributionConfig>,
    /// Write per-vertex chain diagnostics in MCMC mode.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub diagnostics: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Validation {
    pub violations: Vec<String>,
    pub warnings: Vec<String>,
}

impl Validation {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Runtime(_) => 3,
        }
    }
}

impl From<crate::error::Error> for RunError {
    fn from(e: crate::error::Error) -> Self {
        RunError::Runtime(e.to_string())
    }
}

/// Dimension of a registered problem, decided from its id alone.
pub fn problem_dim(id: &str) -> Option<usize> {
    match id {
        "toy1d" => Some(1),
        "halfspace-d2" => Some(2),
        _ => match parse_adversarial_id(id)? {
            AdversarialId::HighDim { dim: 2, j } if (1..=20).contains(&j) => Some(2),
            AdversarialId::OneDim(n) if (1..=60).contains(&n) => Some(1),
            _ => None,
        },
    }
}

/// Parses a JSON config, reporting syntax errors with their line.
pub fn parse_config(text: &str) -> Result<RunConfig, String> {
    serde_json::from_str(text).map_err(|e| {
        let line = e.line();
        let context = text.lines().nth(line.saturating_sub(1)).unwrap_or("").trim_end();
        format!("line {line}, column {}: {e}\n  {line} | {context}", e.column())
    })
}

/// Schema and cross-field checks; never calls `g`.
pub fn validate_config(config: &RunConfig) -> Validation {
    let mut v = Validation::default();
    let mode = config.mode;
    let dim = problem_dim(&config.problem);
    if dim.is_none() {
        v.violations.push(format!("unknown problem id {:?}", config.problem));
    }

    let needs_n = mode != Mode::Adversarial;
    let needs_big_n = matches!(mode, Mode::EstimateExact | Mode::EstimateMcmc);
    let needs_t = mode == Mode::EstimateMcmc;
    if needs_n && config.n.is_none() {
        v.violations.push("n required".into());
    }
    if needs_big_n {
        match config.big_n {
            None => v.violations.push("N required".into()),
            Some(0) => v.violations.push("N must be at least 1".into()),
            Some(_) => {}
        }
    }
    if needs_t && config.t.is_none() {
        v.violations.push("t required".into());
    }
    if mode.is_stochastic() && config.seed.is_none() {
        v.violations.push("seed required".into());
    }
    if let Some(alpha) = config.alpha {
        if !(alpha > 0.0 && alpha < 1.0) {
            v.violations.push(format!("alpha must lie in (0, 1), got {alpha}"));
        }
    }

    let m = mode.name();
    if !needs_n && config.n.is_some() {
        v.warnings.push(format!("n ignored in {m} mode"));
    }
    if !needs_big_n && config.big_n.is_some() {
        v.warnings.push(format!("N ignored in {m} mode"));
    }
    if !needs_t && config.t.is_some() {
        v.warnings.push(format!("t ignored in {m} mode"));
    }
    if !needs_big_n && config.alpha.is_some() {
        v.warnings.push(format!("alpha ignored in {m} mode"));
    }
    if !mode.is_stochastic() && config.seed.is_some() {
        v.warnings.push(format!("seed ignored in {m} mode"));
    }
    if mode != Mode::EstimateMcmc && config.diagnostics {
        v.warnings.push(format!("diagnostics ignored in {m} mode"));
    }

    if mode == Mode::Adversarial && parse_adversarial_id(&config.problem).is_none() {
        v.violations
            .push("adversarial mode needs an adversarial-d2-j<j> or adversarial-1d-n<n> problem".into());
    }
    if let Some(dist) = &config.distribution {
        if mode == Mode::Adversarial {
            v.violations.push("adversarial mode uses its own uniform law".into());
        }
        match dist {
            DistributionConfig::CustomLogdensity { .. } if mode != Mode::EstimateMcmc => v
                .violations
                .push("custom_logdensity needs estimate-mcmc mode".into()),
            DistributionConfig::TruncatedNormalProduct { mean, std } => {
                if let Some(d) = dim {
                    if mean.len() != d || std.len() != d {
                        v.violations
                            .push(format!("distribution needs {d} means and {d} standard deviations"));
                    }
                }
                if std.iter().any(|s| !(*s > 0.0 && s.is_finite())) || mean.iter().any(|x| !x.is_finite()) {
                    v.violations.push("truncated normal needs finite means and positive std".into());
                }
            }
            _ => {}
        }
    }
    v
}

/// Reads and validates a config file.
pub fn validate_file(path: &Path) -> Result<(RunConfig, Validation), RunError> {
    let text = fs::read_to_string(path).map_err(|e| RunError::Config(format!("cannot read {}: {e}", path.display())))?;
    let config = parse_config(&text).map_err(RunError::Config)?;
    let validation = validate_config(&config);
    Ok((config, validation))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdversarialReport {
    pub points: usize,
    pub identical_trees: bool,
    pub base_bounds: BoundPair,
    pub perturbed_bounds: BoundPair,
    pub base_failure_mass: f64,
    pub perturbed_failure_mass: f64,
    pub failure_mass_lower_bound: f64,
    pub margin: f64,
    pub separated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub library_version: String,
    pub g_calls: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundPair>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimate: Option<EstimateReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<NaiveMcResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adversarial: Option<AdversarialReport>,
    pub wall_clock_seconds: f64,
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), RunError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| RunError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> Result<String, RunError> {
    serde_json::to_string_pretty(value)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| RunError::Runtime(e.to_string()))
}

fn load_problem(config: &RunConfig) -> Result<ProblemSpec, RunError> {
    let problem = problem_by_id(&config.problem).map_err(|e| RunError::Config(e.to_string()))?;
    match &config.distribution {
        Some(DistributionConfig::CustomLogdensity { .. }) | None => Ok(problem),
        Some(dist) => {
            let measure = dist.build_product(problem.dim()).map_err(|e| RunError::Config(e.to_string()))?;
            problem.with_measure(measure).map_err(|e| RunError::Config(e.to_string()))
        }
    }
}

/// Executes a validated run, writing its outputs under `output` (or the
/// config's own output directory).
pub fn run(config: &RunConfig, output: Option<&Path>) -> Result<RunReport, RunError> {
    let validation = validate_config(config);
    if !validation.is_ok() {
        return Err(RunError::Config(validation.violations.join("; ")));
    }
    let dir = output
        .map(Path::to_path_buf)
        .or_else(|| config.output.clone())
        .ok_or_else(|| RunError::Config("output directory required (config output or --output)".into()))?;
    fs::create_dir_all(&dir).map_err(|e| RunError::Runtime(format!("cannot create {}: {e}", dir.display())))?;

    let started = Instant::now();
    let mut report = RunReport {
        config: config.clone(),
        library_version: VERSION.to_string(),
        g_calls: 0,
        eval_count: None,
        bounds: None,
        estimate: None,
        baseline: None,
        adversarial: None,
        wall_clock_seconds: 0.0,
    };
    let alpha = config.alpha.unwrap_or(DEFAULT_ALPHA);

    match config.mode {
        Mode::Refine | Mode::EstimateExact | Mode::EstimateMcmc => {
            let problem = load_problem(config)?;
            let n = config.n.unwrap_or(0);
            let refined = refine_budgeted(&problem, n)?;
            report.eval_count = Some(refined.eval_count);
            if problem.measure().capabilities().exact_probability {
                let trace = bounds_trace(&problem, &refined)?;
                write(&dir, "bounds.csv", &trace_to_csv(&trace))?;
                report.bounds = Some(deterministic_bounds(&refined.tree, problem.measure())?);
            }
            let big_n = config.big_n.unwrap_or(1);
            let seed = config.seed.unwrap_or(0);
            let estimate = match config.mode {
                Mode::EstimateExact => {
                    Some(splitting_tree_estimate(&refined.tree, problem.measure(), big_n, seed, alpha)?.report())
                }
                Mode::EstimateMcmc => {
                    let density = match &config.distribution {
                        Some(dist @ DistributionConfig::CustomLogdensity { .. }) => {
                            resolve_distribution(dist, problem.dim())?
                        }
                        _ => as_unnormalized(problem.measure()),
                    };
                    let mcmc = MCMCConfig {
                        steps: config.t.unwrap_or(crate::mcmc::DEFAULT_STEPS),
                        chains: big_n,
                        seed,
                        diagnostics: config.diagnostics,
                    };
                    let est = mcmc_tree_estimate(&refined.tree, &density, &mcmc, alpha)?;
                    if config.diagnostics {
                        write(&dir, "diagnostics.csv", &diagnostics_to_csv(&est.diagnostics))?;
                    }
                    Some(est.estimate.report())
                }
                _ => None,
            };
            if let Some(est) = &estimate {
                write(&dir, "estimate.json", &to_json(est)?)?;
            }
            report.estimate = estimate;
            report.g_calls = problem.call_count();
        }
        Mode::Baseline => {
            let problem = load_problem(config)?;
            let result = naive_mc(&problem, config.n.unwrap_or(0), config.seed.unwrap_or(0))?;
            report.baseline = Some(result);
            report.g_calls = problem.call_count();
        }
        Mode::Adversarial => {
            let instance = adversarial_by_id(&config.problem).map_err(|e| RunError::Config(e.to_string()))?;
            let n = instance.points.len();
            let base_run = refine_budgeted(&instance.base, n)?;
            let perturbed_run = refine_budgeted(&instance.perturbed, n)?;
            write(&dir, "bounds.csv", &trace_to_csv(&bounds_trace(&instance.perturbed, &perturbed_run)?))?;
            let base_mass = oracle_value(&instance.base, ORACLE_RESOLUTION)?;
            let perturbed_mass = oracle_value(&instance.perturbed, ORACLE_RESOLUTION)?;
            let perturbed_bounds = deterministic_bounds(&perturbed_run.tree, instance.perturbed.measure())?;
            report.eval_count = Some(perturbed_run.eval_count);
            report.bounds = Some(perturbed_bounds);
            report.adversarial = Some(AdversarialReport {
                points: n,
                identical_trees: base_run.tree.same_shape(&perturbed_run.tree),
                base_bounds: deterministic_bounds(&base_run.tree, instance.base.measure())?,
                perturbed_bounds,
                base_failure_mass: base_mass,
                perturbed_failure_mass: perturbed_mass,
                failure_mass_lower_bound: instance.failure_mass_lower_bound,
                margin: instance.margin,
                separated: perturbed_mass - base_mass >= instance.margin,
            });
            report.g_calls = instance.perturbed.call_count();
        }
    }

    report.wall_clock_seconds = started.elapsed().as_secs_f64();
    write(&dir, "report.json", &to_json(&report)?)?;
    Ok(report)
}
