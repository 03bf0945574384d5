//! Built-in problems, adversarial perturbations, the naive Monte Carlo
//! baseline and a brute-force probability oracle.

use std::collections::HashSet;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::distributions::{DistributionConfig, Marginal, MeasureModel, UnnormalizedDensity};
use crate::dyadic_tree::{DyadicCube, VertexAddress};
use crate::error::{Error, Result};
use crate::refinement::refine_budgeted;
use crate::rng;

pub type GFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// Constants entering the convergence-rate statements.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct KnownConstants {
    /// Level-set constant `M`.
    pub m: Option<f64>,
    /// `C = M L`.
    pub c: Option<f64>,
    /// `K = sup f_X`.
    pub k: Option<f64>,
}

/// A limit-state function `g`, threshold `T` and law of `X` on `[0,1]^d`.
pub struct ProblemSpec {
    id: String,
    dim: usize,
    g: Arc<GFn>,
    calls: AtomicU64,
    lipschitz: f64,
    threshold: f64,
    measure: MeasureModel,
    constants: KnownConstants,
    p_oracle: Option<f64>,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("id", &self.id)
            .field("dim", &self.dim)
            .field("lipschitz", &self.lipschitz)
            .field("threshold", &self.threshold)
            .field("measure", &self.measure)
            .field("calls", &self.call_count())
            .finish()
    }
}

impl ProblemSpec {
    pub fn new<F>(id: &str, dim: usize, g: F, lipschitz: f64, threshold: f64, measure: MeasureModel) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self::from_arc(id, dim, Arc::new(g), lipschitz, threshold, measure)
    }

    pub fn from_arc(
        id: &str,
        dim: usize,
        g: Arc<GFn>,
        lipschitz: f64,
        threshold: f64,
        measure: MeasureModel,
    ) -> Self {
        Self {
            id: id.to_string(),
            dim,
            g,
            calls: AtomicU64::new(0),
            lipschitz,
            threshold,
            measure,
            constants: KnownConstants::default(),
            p_oracle: None,
        }
    }

    pub fn with_constants(mut self, constants: KnownConstants) -> Self {
        self.constants = constants;
        self
    }

    pub fn with_p_oracle(mut self, p: f64) -> Self {
        self.p_oracle = Some(p);
        self
    }

    /// Same `g`, `L` and `T` under another law, with a fresh call counter.
    pub fn with_measure(&self, measure: MeasureModel) -> Result<Self> {
        if measure.dim() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "law has dimension {}, problem has {}",
                measure.dim(),
                self.dim
            )));
        }
        Ok(Self {
            id: self.id.clone(),
            dim: self.dim,
            g: self.g.clone(),
            calls: AtomicU64::new(0),
            lipschitz: self.lipschitz,
            threshold: self.threshold,
            measure,
            constants: KnownConstants {
                k: None,
                ..self.constants
            },
            p_oracle: None,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn measure(&self) -> &MeasureModel {
        &self.measure
    }

    pub fn constants(&self) -> KnownConstants {
        self.constants
    }

    pub fn p_oracle(&self) -> Option<f64> {
        self.p_oracle
    }

    pub fn g(&self) -> Arc<GFn> {
        self.g.clone()
    }

    /// `g(x)`, counted.
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        self.calls.fetch_add(1, Ordering::Relaxed);
        (self.g)(x)
    }

    /// `g(x)` without touching the counter; for oracles and diagnostics.
    pub fn evaluate_uncounted(&self, x: &[f64]) -> f64 {
        (self.g)(x)
    }

    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

pub const TOY_LIPSCHITZ: f64 = 1.61;
pub const TOY_THRESHOLD: f64 = 1.3;
pub const TOY_MEAN: f64 = 0.2;
pub const TOY_STD: f64 = 0.2;
/// Published value of the toy failure probability.
pub const TOY_REFERENCE_P: f64 = 2.08e-3;

pub fn toy_g(x: f64) -> f64 {
    (0.8 * x - 0.3) + (-11.534 * x.powf(1.95)).exp() + (-2.0 * (x - 0.9).powi(2)).exp()
}

/// Unnormalized toy log-density `-(25/2)(x - 1/5)^2`.
pub fn toy_log_density(x: f64) -> f64 {
    -12.5 * (x - TOY_MEAN).powi(2)
}

pub fn toy_1d() -> ProblemSpec {
    let measure = MeasureModel::product(vec![Marginal::TruncatedNormal {
        mean: TOY_MEAN,
        std: TOY_STD,
    }])
    .expect("toy law is valid");
    let k = measure.density_sup();
    ProblemSpec::new("toy1d", 1, |x| toy_g(x[0]), TOY_LIPSCHITZ, TOY_THRESHOLD, measure)
        .with_constants(KnownConstants { m: None, c: Some(2.0), k })
        .with_p_oracle(TOY_REFERENCE_P)
}

/// `g(x) = -x^1`, `T = -1/2`, `X` uniform on the unit square.
pub fn halfspace_d2() -> ProblemSpec {
    ProblemSpec::new("halfspace-d2", 2, |x| -x[0], 1.0, -0.5, MeasureModel::uniform(2))
        .with_constants(KnownConstants {
            m: Some(1.0),
            c: Some(1.0),
            k: Some(1.0),
        })
        .with_p_oracle(0.5)
}

pub const ADVERSARIAL_LIPSCHITZ_HIGH_D: f64 = 3.0;
pub const ADVERSARIAL_LIPSCHITZ_1D: f64 = 5.0;

/// `g(x) = -x^1`, `T = 0`, uniform `X`, declared with the Lipschitz constant of
/// the perturbed functions so both produce the same labels.
pub fn adversarial_base(dim: usize) -> Result<ProblemSpec> {
    if dim < 1 {
        return Err(Error::InvalidArgument("dimension must be at least 1".into()));
    }
    let l = if dim == 1 {
        ADVERSARIAL_LIPSCHITZ_1D
    } else {
        ADVERSARIAL_LIPSCHITZ_HIGH_D
    };
    Ok(ProblemSpec::new(&format!("adversarial-base-d{dim}"), dim, |x| -x[0], l, 0.0, MeasureModel::uniform(dim))
        .with_p_oracle(0.0))
}

/// A perturbation of the base half-space problem that agrees with it at
/// every supplied point but has positive failure mass.
#[derive(Debug)]
pub struct AdversarialInstance {
    pub base: ProblemSpec,
    pub perturbed: ProblemSpec,
    pub points: Vec<Vec<f64>>,
    /// Cubes carrying a bump; a single interval in dimension one.
    pub bump_cubes: Vec<DyadicCube>,
    /// Guaranteed `P(g̃(X) > 0)`.
    pub failure_mass_lower_bound: f64,
    /// `c n^(-1/(d-1))`, or `2^(-n)/5` in dimension one.
    pub margin: f64,
}

fn check_points(points: &[Vec<f64>], dim: usize) -> Result<()> {
    for p in points {
        if p.len() != dim {
            return Err(Error::InvalidArgument(format!("point {p:?} is not {dim}-dimensional")));
        }
        if p.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidArgument(format!("point {p:?} lies outside the unit cube")));
        }
    }
    Ok(())
}

/// Bumps `2 h_Q` on every depth-`j` cube of the face `x^1 = 0` that holds
/// none of the `n = 2^(j(d-1)-1)` points.
pub fn adversarial_high_d(points: &[Vec<f64>], j: usize) -> Result<AdversarialInstance> {
    let dim = points.first().map(Vec::len).unwrap_or(0);
    if dim < 2 {
        return Err(Error::InvalidArgument("high-dimensional construction needs d >= 2".into()));
    }
    check_points(points, dim)?;
    let exponent = j * (dim - 1);
    if j == 0 || exponent > 40 {
        return Err(Error::InvalidArgument(format!("depth j = {j} out of range")));
    }
    let n = 1usize << (exponent - 1);
    if points.len() != n {
        return Err(Error::InvalidArgument(format!(
            "expected 2^(j(d-1)-1) = {n} points, got {}",
            points.len()
        )));
    }

    let side = 1u64 << j;
    let face_cubes = (0..(1u64 << exponent)).map(|mut m| {
        let mut index = vec![0u64; dim];
        for slot in index.iter_mut().skip(1) {
            *slot = m % side;
            m /= side;
        }
        index
    });
    let bumps: Vec<Vec<u64>> = face_cubes
        .filter(|index| {
            let cube = cube_at(j, index);
            !points.iter().any(|p| cube.contains_half_open(p))
        })
        .collect();
    assert!(bumps.len() >= n, "pigeonhole: {} free face cubes for {n} points", bumps.len());

    let bump_set: Arc<HashSet<Vec<u64>>> = Arc::new(bumps.iter().cloned().collect());
    let g = {
        let bump_set = bump_set.clone();
        move |x: &[f64]| {
            // bumps only live in the first column along axis 1
            if x[0] * side as f64 >= 1.0 {
                return -x[0];
            }
            let index: Vec<u64> = x.iter().map(|&c| ((c * side as f64).floor() as u64).min(side - 1)).collect();
            let bump = if bump_set.contains(&index) {
                2.0 * cube_at(j, &index).inner_distance(x)
            } else {
                0.0
            };
            -x[0] + bump
        }
    };

    let d = dim as f64;
    let per_cube = 3f64.powf(-d) * (-(d * j as f64)).exp2();
    let c = 3f64.powf(-d) * (-d / (d - 1.0)).exp2();
    Ok(AdversarialInstance {
        base: adversarial_base(dim)?,
        perturbed: ProblemSpec::new(
            &format!("adversarial-d{dim}-j{j}"),
            dim,
            g,
            ADVERSARIAL_LIPSCHITZ_HIGH_D,
            0.0,
            MeasureModel::uniform(dim),
        ),
        points: points.to_vec(),
        bump_cubes: bumps.iter().map(|index| cube_at(j, index)).collect(),
        failure_mass_lower_bound: bumps.len() as f64 * per_cube,
        margin: c * (n as f64).powf(-1.0 / (d - 1.0)),
    })
}

fn cube_at(depth: usize, index: &[u64]) -> DyadicCube {
    let mut cube = DyadicCube::unit(index.len());
    for level in (0..depth).rev() {
        let child = index
            .iter()
            .enumerate()
            .map(|(axis, &m)| (((m >> level) & 1) as u32) << axis)
            .sum::<u32>();
        cube = cube.child(child + 1);
    }
    cube
}

/// The intervals `I_1 = [1/2, 1], I_i = [2^-i, 2^-(i-1)), I_(n+1) = [0, 2^-n)`.
pub fn dyadic_shells(n: usize) -> Vec<(f64, f64)> {
    let mut shells: Vec<(f64, f64)> = (1..=n).map(|i| ((-(i as f64)).exp2(), (-(i as f64 - 1.0)).exp2())).collect();
    shells.push((0.0, (-(n as f64)).exp2()));
    shells
}

/// Bump `4 h_J` on the first shell `J` free of the `n` points.
pub fn adversarial_1d(points: &[f64], n: usize) -> Result<AdversarialInstance> {
    if points.len() != n {
        return Err(Error::InvalidArgument(format!("expected {n} points, got {}", points.len())));
    }
    if n == 0 || n > 60 {
        return Err(Error::InvalidArgument(format!("n = {n} out of range")));
    }
    let pts: Vec<Vec<f64>> = points.iter().map(|&x| vec![x]).collect();
    check_points(&pts, 1)?;
    let shells = dyadic_shells(n);
    let holds = |(a, b): (f64, f64), x: f64| a <= x && (x < b || (b == 1.0 && x == 1.0));
    let (a, b) = shells
        .iter()
        .copied()
        .find(|&s| !points.iter().any(|&x| holds(s, x)))
        .expect("n + 1 shells cannot all hold one of n points");

    let g = move |x: &[f64]| -x[0] + 4.0 * (x[0] - a).min(b - x[0]).max(0.0);
    let width = b - a;
    let depth = (-width.log2()).round() as usize;
    let cube = cube_at(depth, &[(a / width).round() as u64]);
    Ok(AdversarialInstance {
        base: adversarial_base(1)?,
        perturbed: ProblemSpec::new(
            &format!("adversarial-1d-n{n}"),
            1,
            g,
            ADVERSARIAL_LIPSCHITZ_1D,
            0.0,
            MeasureModel::uniform(1),
        ),
        points: pts,
        bump_cubes: vec![cube],
        failure_mass_lower_bound: shell_failure_mass(a, width),
        margin: (-(n as f64)).exp2() / 5.0,
    })
}

/// Length of `{x ∈ [a, a + w] : 4 min(x - a, a + w - x) > x}`.
fn shell_failure_mass(a: f64, w: f64) -> f64 {
    let b = a + w;
    // rising side: 4(x - a) > x  ⇔  x > 4a/3; falling side: 4(b - x) > x  ⇔  x < 4b/5
    let lo = 4.0 * a / 3.0;
    let hi = 4.0 * b / 5.0;
    (hi - lo).max(0.0)
}

/// The evaluation points of a budget-`n` refinement of the base problem.
pub fn refinement_points(problem: &ProblemSpec, n: usize) -> Result<Vec<Vec<f64>>> {
    let run = refine_budgeted(problem, n)?;
    run.eval_log
        .iter()
        .map(|(addr, _)| Ok(crate::dyadic_tree::decode_cube(addr, problem.dim())?.center()))
        .collect()
}

/// Instance `adversarial-d<d>-j<j>` built against the base refinement.
pub fn adversarial_high_d_from_refinement(dim: usize, j: usize) -> Result<AdversarialInstance> {
    if dim < 2 {
        return Err(Error::InvalidArgument("high-dimensional construction needs d >= 2".into()));
    }
    let exponent = j * (dim - 1);
    if j == 0 || exponent > 40 {
        return Err(Error::InvalidArgument(format!("depth j = {j} out of range")));
    }
    let base = adversarial_base(dim)?;
    let points = refinement_points(&base, 1usize << (exponent - 1))?;
    adversarial_high_d(&points, j)
}

/// Instance `adversarial-1d-n<n>` built against the base refinement.
pub fn adversarial_1d_from_refinement(n: usize) -> Result<AdversarialInstance> {
    let base = adversarial_base(1)?;
    let points: Vec<f64> = refinement_points(&base, n)?.into_iter().map(|p| p[0]).collect();
    adversarial_1d(&points, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NaiveMcResult {
    pub n: usize,
    pub hits: usize,
    pub estimate: f64,
    /// Binomial standard error `sqrt(p_n (1 - p_n) / n)`.
    pub std_error: f64,
}

/// `p_n = (1/n) Σ 1{g(X_i) > T}` with `n` counted calls.
pub fn naive_mc(problem: &ProblemSpec, n: usize, seed: u64) -> Result<NaiveMcResult> {
    let draws = problem.measure().exact_conditional_sample(
        &VertexAddress::root(),
        n,
        rng::sub_seed(seed, rng::tag::NAIVE_MC, 0),
    )?;
    let hits = draws.iter().filter(|x| problem.evaluate(x) > problem.threshold()).count();
    let estimate = if n == 0 { 0.0 } else { hits as f64 / n as f64 };
    let std_error = if n == 0 {
        0.0
    } else {
        (estimate * (1.0 - estimate) / n as f64).sqrt()
    };
    Ok(NaiveMcResult {
        n,
        hits,
        estimate,
        std_error,
    })
}

pub const ORACLE_REL_TOL: f64 = 1e-6;
pub const ORACLE_MAX_CELLS: u64 = 1 << 24;
const ORACLE_MAX_DIM: usize = 3;

/// Composite midpoint rule for `P(g(X) > T)` on a `resolution^d` grid,
/// doubling the resolution until two successive values agree to
/// `ORACLE_REL_TOL`. Calls to `g` are not counted.
///
/// An indicator integrand lets two grids agree exactly while both are off
/// by a whole boundary cell, so agreement also needs the mass of cells
/// with `|g(mid) - T| <= L h / 2` (the only ones that can straddle the
/// boundary) to be below the same relative tolerance.
pub fn oracle_integrate(problem: &ProblemSpec, resolution: usize) -> Result<f64> {
    let dim = problem.dim();
    if dim > ORACLE_MAX_DIM {
        return Err(Error::InvalidArgument(format!("oracle supports d <= {ORACLE_MAX_DIM}")));
    }
    let marginals = problem.measure().marginals().ok_or(Error::Capability("exact_probability"))?;
    let mut res = resolution.max(1) as u64;
    let (mut last, _) = grid_probability(problem, &marginals, res);
    let mut previous = f64::NAN;
    loop {
        let next_res = res * 2;
        if next_res.pow(dim as u32) > ORACLE_MAX_CELLS {
            return Err(Error::OracleNotConverged {
                last,
                previous,
                cells: res.pow(dim as u32),
            });
        }
        let (current, straddle) = grid_probability(problem, &marginals, next_res);
        let scale = current.abs().max(last.abs());
        if (current - last).abs() <= ORACLE_REL_TOL * scale && straddle <= ORACLE_REL_TOL * scale {
            return Ok(current);
        }
        previous = last;
        last = current;
        res = next_res;
    }
}

/// Oracle value, falling back on the last iterate when the cap is reached.
pub fn oracle_value(problem: &ProblemSpec, resolution: usize) -> Result<f64> {
    match oracle_integrate(problem, resolution) {
        Err(Error::OracleNotConverged { last, .. }) => Ok(last),
        other => other,
    }
}

/// Midpoint value and the normalized mass of cells that may straddle the
/// failure boundary.
fn grid_probability(problem: &ProblemSpec, marginals: &[Marginal], res: u64) -> (f64, f64) {
    let dim = marginals.len();
    let h = 1.0 / res as f64;
    let reach = problem.lipschitz() * h / 2.0;
    let axis_weights: Vec<Vec<f64>> = marginals
        .iter()
        .map(|m| (0..res).map(|i| m.density((i as f64 + 0.5) * h)).collect())
        .collect();
    let cells = res.pow(dim as u32);
    const BLOCK: u64 = 1 << 14;
    let blocks = cells.div_ceil(BLOCK);
    let partial: Vec<(f64, f64, f64)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut hit = 0.0;
            let mut straddle = 0.0;
            let mut total = 0.0;
            let mut x = vec![0.0f64; dim];
            for cell in b * BLOCK..((b + 1) * BLOCK).min(cells) {
                let mut rest = cell;
                let mut w = 1.0;
                for (axis, xi) in x.iter_mut().enumerate() {
                    let i = rest % res;
                    rest /= res;
                    *xi = (i as f64 + 0.5) * h;
                    w *= axis_weights[axis][i as usize];
                }
                total += w;
                let excess = problem.evaluate_uncounted(&x) - problem.threshold();
                if excess > 0.0 {
                    hit += w;
                }
                if excess.abs() <= reach {
                    straddle += w;
                }
            }
            (hit, straddle, total)
        })
        .collect();
    let (hit, straddle, total) =
        partial.iter().fold((0.0, 0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1, acc.2 + p.2));
    if total > 0.0 {
        (hit / total, straddle / total)
    } else {
        (0.0, 0.0)
    }
}

/// Largest `|g(x) - g(y)| / ‖x - y‖_∞` over `pairs` random pairs.
pub fn lipschitz_check(problem: &ProblemSpec, pairs: usize, seed: u64) -> f64 {
    let dim = problem.dim();
    let mut r = rng::vertex_stream(seed, "lipschitz-check", &VertexAddress::root(), 0);
    let mut x = vec![0.0f64; dim];
    let mut y = vec![0.0f64; dim];
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        x.iter_mut().for_each(|c| *c = r.random());
        y.iter_mut().for_each(|c| *c = r.random());
        let dist = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if dist > 0.0 {
            let ratio = (problem.evaluate_uncounted(&x) - problem.evaluate_uncounted(&y)).abs() / dist;
            worst = worst.max(ratio);
        }
    }
    worst
}

/// Registered problem ids, with parametrized families shown as patterns.
pub fn list_problems() -> Vec<(&'static str, &'static str)> {
    vec![
        ("toy1d", "one-dimensional toy problem, truncated normal law, T = 1.3"),
        ("halfspace-d2", "g(x) = -x1, T = -1/2, uniform law on the unit square"),
        ("adversarial-d2-j<j>", "perturbed half-space built against a budget 2^(j-1) refinement"),
        ("adversarial-1d-n<n>", "perturbed half-line built against a budget n refinement"),
    ]
}

/// Parses `adversarial-d<d>-j<j>` or `adversarial-1d-n<n>`.
pub fn parse_adversarial_id(id: &str) -> Option<AdversarialId> {
    let rest = id.strip_prefix("adversarial-")?;
    if let Some(n) = rest.strip_prefix("1d-n") {
        return n.parse().ok().map(AdversarialId::OneDim);
    }
    let rest = rest.strip_prefix('d')?;
    let (d, j) = rest.split_once("-j")?;
    Some(AdversarialId::HighDim {
        dim: d.parse().ok()?,
        j: j.parse().ok()?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdversarialId {
    HighDim { dim: usize, j: usize },
    OneDim(usize),
}

pub fn adversarial_by_id(id: &str) -> Result<AdversarialInstance> {
    match parse_adversarial_id(id) {
        Some(AdversarialId::HighDim { dim: 2, j }) => adversarial_high_d_from_refinement(2, j),
        Some(AdversarialId::OneDim(n)) => adversarial_1d_from_refinement(n),
        _ => Err(Error::InvalidArgument(format!("unknown problem id {id:?}"))),
    }
}

/// Looks up a registered problem. Adversarial ids resolve to the perturbed function.
pub fn problem_by_id(id: &str) -> Result<ProblemSpec> {
    match id {
        "toy1d" => Ok(toy_1d()),
        "halfspace-d2" => Ok(halfspace_d2()),
        _ => adversarial_by_id(id).map(|inst| inst.perturbed),
    }
}

/// Resolves a law description for a problem, including the registered
/// unnormalized densities.
pub fn resolve_distribution(config: &DistributionConfig, dim: usize) -> Result<MeasureModel> {
    match config {
        DistributionConfig::CustomLogdensity { problem } => custom_log_density(problem, dim),
        other => other.build_product(dim),
    }
}

fn custom_log_density(name: &str, dim: usize) -> Result<MeasureModel> {
    match (name, dim) {
        ("toy1d", 1) => {
            let k = toy_1d().measure().density_sup();
            Ok(MeasureModel::unnormalized(1, "toy1d", |x| toy_log_density(x[0]), k))
        }
        ("uniform", d) => Ok(MeasureModel::unnormalized(d, "uniform", |_| 0.0, Some(1.0))),
        _ => Err(Error::InvalidArgument(format!(
            "no registered log-density {name:?} in dimension {dim}"
        ))),
    }
}

/// `f_X` known only up to a constant, forgetting any exact capabilities.
pub fn as_unnormalized(measure: &MeasureModel) -> MeasureModel {
    let inner = measure.clone();
    MeasureModel::unnormalized(
        measure.dim(),
        "unnormalized",
        move |x| inner.log_density(x),
        measure.density_sup(),
    )
}
