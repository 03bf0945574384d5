//! Independent Metropolis–Hastings sampling of `X` restricted to a dyadic cube.
//!
//! Proposals are uniform on the cube, so only an unnormalized density is
//! needed. Chain `i` at a vertex owns ChaCha stream `i` under the same key as
//! the exact sampler. Its randomness is laid out in slots of `d + 1` uniforms
//! (a proposal, then the acceptance uniform): the initial state uses slot `t`
//! and step `k` uses slot `t - 1 - k`, so the last proposal reads slot 0, the
//! very uniforms the exact sampler turns into its draw. Under a uniform
//! density every proposal is accepted and both samplers agree bit for bit.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::distributions::{Marginal, Points, UnnormalizedDensity};
use crate::dyadic_tree::{decode_cube, DyadicCube, LabeledTree, VertexAddress};
use crate::error::{Error, Result};
use crate::rng;
use crate::splitting::{estimate_tree, ConditionalSampler, StatsMap, TreeEstimate, VertexSampleStats};

pub const DEFAULT_STEPS: usize = 25;
const PROBE_PROPOSALS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MCMCConfig {
    /// Transitions `t` per chain.
    pub steps: usize,
    /// Chains `N` per vertex.
    pub chains: usize,
    pub seed: u64,
    pub diagnostics: bool,
}

impl MCMCConfig {
    pub fn new(chains: usize, seed: u64) -> Self {
        Self {
            steps: DEFAULT_STEPS,
            chains,
            seed,
            diagnostics: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::InvalidArgument("number of chains N must be at least 1".into()));
        }
        Ok(())
    }
}

fn point_in(cube: &DyadicCube, uniforms: &[f64], out: &mut [f64]) {
    for (axis, (x, &u)) in out.iter_mut().zip(uniforms).enumerate() {
        let (a, b) = cube.axis_interval(axis);
        *x = Marginal::Uniform.quantile_in(a, b, u);
    }
}

/// Metropolis acceptance test `U ≤ f̃(x') / f̃(x)` on the log scale.
fn accepts(log_current: f64, log_proposal: f64, u: f64) -> bool {
    u.ln() <= log_proposal - log_current
}

/// One independent-Metropolis transition from `current` inside `cube`.
pub fn mh_step<D, R>(current: &[f64], cube: &DyadicCube, density: &D, rng: &mut R) -> Result<Vec<f64>>
where
    D: UnnormalizedDensity + ?Sized,
    R: Rng + ?Sized,
{
    let log_current = density.log_density(current);
    if log_current == f64::NEG_INFINITY || log_current.is_nan() {
        return Err(Error::InvalidChainState);
    }
    let uniforms: Vec<f64> = (0..cube.dim()).map(|_| rng.random()).collect();
    let mut proposal = vec![0.0; cube.dim()];
    point_in(cube, &uniforms, &mut proposal);
    let u: f64 = rng.random();
    if accepts(log_current, density.log_density(&proposal), u) {
        Ok(proposal)
    } else {
        Ok(current.to_vec())
    }
}

/// Terminal states of `N` chains at one vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainBatch {
    pub parent: VertexAddress,
    pub states: Points,
    /// Accepted proposals over all proposals; 1 when `t = 0`.
    pub acceptance_rate: f64,
    /// Estimate of the minorization constant `β = inf g/f`: mean over max of
    /// the proposal densities.
    pub beta_hat: f64,
}

struct ChainOutcome {
    state: Vec<f64>,
    accepted: usize,
    // running max and sum of exp(log f - max) over proposals
    log_max: f64,
    scaled_sum: f64,
}

fn run_chain<D: UnnormalizedDensity + ?Sized>(
    key: &[u8; 32],
    chain: usize,
    cube: &DyadicCube,
    density: &D,
    steps: usize,
) -> Result<ChainOutcome> {
    let dim = cube.dim();
    let slot = dim + 1;
    let mut stream = rng::stream_from_key(key, chain as u64);
    let uniforms: Vec<f64> = (0..slot * (steps + 1)).map(|_| stream.random()).collect();
    let slot_at = |s: usize| &uniforms[s * slot..(s + 1) * slot];

    let mut state = vec![0.0; dim];
    point_in(cube, &slot_at(steps)[..dim], &mut state);
    let mut log_state = density.log_density(&state);
    let mut proposal = vec![0.0; dim];
    let mut outcome = ChainOutcome {
        state: Vec::new(),
        accepted: 0,
        log_max: f64::NEG_INFINITY,
        scaled_sum: 0.0,
    };
    for k in 0..steps {
        let s = slot_at(steps - 1 - k);
        point_in(cube, &s[..dim], &mut proposal);
        let log_proposal = density.log_density(&proposal);
        if log_proposal.is_nan() {
            return Err(Error::InvalidChainState);
        }
        if log_proposal > outcome.log_max {
            outcome.scaled_sum *= (outcome.log_max - log_proposal).exp();
            outcome.log_max = log_proposal;
        }
        if log_proposal > f64::NEG_INFINITY {
            outcome.scaled_sum += (log_proposal - outcome.log_max).exp();
        }
        // a state outside the support moves to the first proposal inside it
        let accept = if log_state == f64::NEG_INFINITY {
            log_proposal > f64::NEG_INFINITY
        } else {
            accepts(log_state, log_proposal, s[dim])
        };
        if accept {
            std::mem::swap(&mut state, &mut proposal);
            log_state = log_proposal;
            outcome.accepted += 1;
        }
    }
    outcome.state = state;
    Ok(outcome)
}

fn probe_support<D: UnnormalizedDensity + ?Sized>(
    parent: &VertexAddress,
    cube: &DyadicCube,
    density: &D,
    seed: u64,
) -> Result<()> {
    let mut stream = rng::vertex_stream(seed, rng::tag::MH_PROBE, parent, 0);
    let mut x = vec![0.0; cube.dim()];
    let mut u = vec![0.0; cube.dim()];
    for _ in 0..PROBE_PROPOSALS {
        u.iter_mut().for_each(|c| *c = stream.random());
        point_in(cube, &u, &mut x);
        if density.log_density(&x) > f64::NEG_INFINITY {
            return Ok(());
        }
    }
    Err(Error::DegenerateDensity(parent.clone()))
}

/// `N` independent chains started uniformly on `Q(parent)` and run `t` steps.
pub fn run_chain_batch<D: UnnormalizedDensity + ?Sized>(
    parent: &VertexAddress,
    density: &D,
    config: &MCMCConfig,
) -> Result<ChainBatch> {
    config.validate()?;
    let cube = decode_cube(parent, density.dim())?;
    let key = rng::derive_key(config.seed, rng::tag::CONDITIONAL_SAMPLE, parent);
    let outcomes: Vec<ChainOutcome> = (0..config.chains)
        .into_par_iter()
        .map(|i| run_chain(&key, i, &cube, density, config.steps))
        .collect::<Result<_>>()?;

    let all_outside = outcomes
        .iter()
        .all(|o| density.log_density(&o.state) == f64::NEG_INFINITY);
    if all_outside {
        probe_support(parent, &cube, density, config.seed)?;
    }

    let mut states = Points::with_capacity(cube.dim(), config.chains);
    let mut accepted = 0;
    let mut log_max = f64::NEG_INFINITY;
    for o in &outcomes {
        states.push(&o.state);
        accepted += o.accepted;
        log_max = log_max.max(o.log_max);
    }
    let proposals = config.chains * config.steps;
    let beta_hat = if proposals == 0 || log_max == f64::NEG_INFINITY {
        1.0
    } else {
        let total: f64 = outcomes.iter().map(|o| o.scaled_sum * (o.log_max - log_max).exp()).sum();
        total / proposals as f64
    };
    Ok(ChainBatch {
        parent: parent.clone(),
        states,
        acceptance_rate: if proposals == 0 {
            1.0
        } else {
            accepted as f64 / proposals as f64
        },
        beta_hat,
    })
}

/// Conditional sampler backed by `t`-step chains.
pub struct MetropolisSampler<'a, D: UnnormalizedDensity + ?Sized> {
    pub density: &'a D,
    pub steps: usize,
}

impl<D: UnnormalizedDensity + ?Sized> ConditionalSampler for MetropolisSampler<'_, D> {
    fn dim(&self) -> usize {
        self.density.dim()
    }

    fn sample(&self, parent: &VertexAddress, count: usize, seed: u64) -> Result<Points> {
        let config = MCMCConfig {
            steps: self.steps,
            chains: count,
            seed,
            diagnostics: false,
        };
        Ok(run_chain_batch(parent, self.density, &config)?.states)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainDiagnostics {
    pub path: VertexAddress,
    pub acceptance_rate: f64,
    pub beta_hat_estimate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McmcTreeEstimate {
    pub estimate: TreeEstimate,
    pub diagnostics: Vec<ChainDiagnostics>,
}

/// Hatted estimates `p̂⁻, p̂⁺` with plug-in deviations and CI. Only the
/// density is used; `g` is never called.
pub fn mcmc_tree_estimate<D: UnnormalizedDensity + ?Sized>(
    tree: &LabeledTree,
    density: &D,
    config: &MCMCConfig,
    alpha: f64,
) -> Result<McmcTreeEstimate> {
    config.validate()?;
    if density.dim() != tree.dim() {
        return Err(Error::InvalidArgument(format!(
            "density has dimension {}, tree has {}",
            density.dim(),
            tree.dim()
        )));
    }
    let batches: Vec<ChainBatch> = tree
        .internal_vertices()
        .into_par_iter()
        .map(|v| {
            run_chain_batch(&v, density, config).map_err(|e| Error::Sampler {
                vertex: v.clone(),
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let mut stats = StatsMap::new();
    let mut diagnostics = Vec::with_capacity(batches.len());
    for b in &batches {
        stats.insert(b.parent.clone(), VertexSampleStats::from_points(&b.parent, &b.states)?);
        diagnostics.push(ChainDiagnostics {
            path: b.parent.clone(),
            acceptance_rate: b.acceptance_rate,
            beta_hat_estimate: b.beta_hat,
        });
    }
    diagnostics.sort_by(|a, b| a.path.breadth_key().cmp(&b.path.breadth_key()));
    Ok(McmcTreeEstimate {
        estimate: estimate_tree(tree, stats, config.chains, alpha)?,
        diagnostics,
    })
}

pub fn diagnostics_to_csv(rows: &[ChainDiagnostics]) -> String {
    let mut out = String::from("path,acceptance_rate,beta_hat_estimate\n");
    for r in rows {
        out.push_str(&format!("\"{}\",{},{}\n", r.path, r.acceptance_rate, r.beta_hat_estimate));
    }
    out
}
