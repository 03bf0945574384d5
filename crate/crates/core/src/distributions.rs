//! Laws of `X` on `[0,1]^d`.
//!
//! Product laws know their cube probabilities exactly (up to quadrature
//! round-off) and sample conditionally by per-axis inverse CDF. General laws
//! expose only an unnormalized log-density, which is what the Metropolis
//! sampler needs.

use std::collections::HashMap;
use std::f64::consts::SQRT_2;
use std::fmt;
use std::sync::{Arc, RwLock};

use rand::Rng;
use serde::{Deserialize, Serialize};
use libm::erfc;
use statrs::function::erf::erfc_inv;

use crate::dyadic_tree::{decode_cube, DyadicCube, VertexAddress};
use crate::error::{Error, Result};
use crate::quadrature;
use crate::rng;

/// Relative tolerance of every marginal mass.
pub const MASS_REL_TOL: f64 = 1e-12;

/// Unnormalized density of a law on `[0,1]^d`, in log scale.
pub trait UnnormalizedDensity: Send + Sync {
    fn dim(&self) -> usize;

    /// `ln f̃(x)`; `-inf` where the density vanishes.
    fn log_density(&self, x: &[f64]) -> f64;
}

/// Points stored row-major, `dim` coordinates each.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Points {
    dim: usize,
    coords: Vec<f64>,
}

impl Points {
    pub fn with_capacity(dim: usize, count: usize) -> Self {
        Self {
            dim,
            coords: Vec::with_capacity(dim * count),
        }
    }

    pub fn from_flat(dim: usize, coords: Vec<f64>) -> Self {
        assert!(dim > 0 && coords.len() % dim == 0, "coordinate count must be a multiple of dim");
        Self { dim, coords }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.coords.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn push(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.dim);
        self.coords.extend_from_slice(x);
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.coords.chunks_exact(self.dim.max(1))
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }
}

/// One-dimensional factor of a product law, restricted to `[0,1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Marginal {
    Uniform,
    /// Normal law with the given mean and standard deviation, truncated to `[0,1]`.
    TruncatedNormal { mean: f64, std: f64 },
}

impl Marginal {
    pub fn density(&self, x: f64) -> f64 {
        match *self {
            Marginal::Uniform => 1.0,
            Marginal::TruncatedNormal { mean, std } => {
                let z = (x - mean) / std;
                (-0.5 * z * z).exp()
            }
        }
    }

    pub fn log_density(&self, x: f64) -> f64 {
        match *self {
            Marginal::Uniform => 0.0,
            Marginal::TruncatedNormal { mean, std } => {
                let z = (x - mean) / std;
                -0.5 * z * z
            }
        }
    }

    /// Largest unnormalized density value on `[0,1]`.
    pub fn max_density(&self) -> f64 {
        match *self {
            Marginal::Uniform => 1.0,
            Marginal::TruncatedNormal { mean, .. } => self.density(mean.clamp(0.0, 1.0)),
        }
    }

    /// Closed-form unnormalized mass of `[a, b]` through `erfc`.
    pub fn closed_form_mass(&self, a: f64, b: f64) -> f64 {
        match *self {
            Marginal::Uniform => b - a,
            Marginal::TruncatedNormal { mean, std } => {
                let scale = std * (std::f64::consts::PI / 2.0).sqrt();
                let (za, zb) = ((a - mean) / std, (b - mean) / std);
                if za >= 0.0 {
                    scale * (erfc(za / SQRT_2) - erfc(zb / SQRT_2))
                } else if zb <= 0.0 {
                    scale * (erfc(-zb / SQRT_2) - erfc(-za / SQRT_2))
                } else {
                    scale * (2.0 - erfc(zb / SQRT_2) - erfc(-za / SQRT_2))
                }
            }
        }
    }

    /// Inverse CDF of the law restricted to `[a, b]`, evaluated at `u ∈ [0,1)`.
    pub fn quantile_in(&self, a: f64, b: f64, u: f64) -> f64 {
        match *self {
            Marginal::Uniform => a + (b - a) * u,
            Marginal::TruncatedNormal { mean, std } => {
                let (za, zb) = ((a - mean) / std, (b - mean) / std);
                // Work in whichever tail keeps the CDF increments well conditioned.
                let z = if za >= 0.0 {
                    let (sa, sb) = (erfc(za / SQRT_2), erfc(zb / SQRT_2));
                    if !(sa > sb) {
                        return self.bisect_quantile(a, b, u);
                    }
                    upper_tail_inverse(sa - u * (sa - sb))
                } else {
                    let (fa, fb) = (erfc(-za / SQRT_2), erfc(-zb / SQRT_2));
                    if !(fb > fa) {
                        return self.bisect_quantile(a, b, u);
                    }
                    -upper_tail_inverse(fa + u * (fb - fa))
                };
                (mean + std * z).clamp(a, b)
            }
        }
    }

    /// Quantile by bisection on quadrature masses; used when the analytic
    /// increments underflow.
    fn bisect_quantile(&self, a: f64, b: f64, u: f64) -> f64 {
        let f = |x: f64| self.density(x);
        let total = quadrature::integrate(f, a, b, MASS_REL_TOL);
        if !(total > 0.0) {
            return a + (b - a) * u;
        }
        let target = u * total;
        let (mut lo, mut hi) = (a, b);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if quadrature::integrate(f, a, mid, MASS_REL_TOL) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Solves `erfc(z / √2) = target` for `z`, polishing the initial inverse with
/// one Newton step against the accurate `erfc`.
fn upper_tail_inverse(target: f64) -> f64 {
    let z = SQRT_2 * erfc_inv(target);
    let slope = (2.0 / std::f64::consts::PI).sqrt() * (-0.5 * z * z).exp();
    if slope > 0.0 && z.is_finite() {
        z + (erfc(z / SQRT_2) - target) / slope
    } else {
        z
    }
}

/// A marginal plus its cache of dyadic-interval masses.
struct MarginalModel {
    law: Marginal,
    /// Unnormalized mass of `[m 2^-j, (m+1) 2^-j]`, keyed by `(j, m)`.
    masses: RwLock<HashMap<(usize, u64), f64>>,
}

impl MarginalModel {
    fn new(law: Marginal) -> Self {
        Self {
            law,
            masses: RwLock::new(HashMap::new()),
        }
    }

    fn dyadic_mass(&self, depth: usize, m: u64) -> f64 {
        if let Some(&v) = self.masses.read().expect("mass cache poisoned").get(&(depth, m)) {
            return v;
        }
        let scale = (-(depth as f64)).exp2();
        let (a, b) = (m as f64 * scale, (m + 1) as f64 * scale);
        let v = match self.law {
            Marginal::Uniform => b - a,
            law => quadrature::integrate(|x| law.density(x), a, b, MASS_REL_TOL),
        };
        self.masses
            .write()
            .expect("mass cache poisoned")
            .insert((depth, m), v);
        v
    }

    fn normalizer(&self) -> f64 {
        self.dyadic_mass(0, 0)
    }
}

impl fmt::Debug for MarginalModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MarginalModel").field("law", &self.law).finish()
    }
}

type LogDensityFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

#[derive(Clone)]
enum ModelKind {
    Product(Arc<Vec<MarginalModel>>),
    Unnormalized {
        log_density: Arc<LogDensityFn>,
        sup_bound: Option<f64>,
        name: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Capabilities {
    pub exact_probability: bool,
    pub exact_conditional_sampling: bool,
    pub unnormalized_density: bool,
}

/// Description of the law of `X`.
#[derive(Clone)]
pub struct MeasureModel {
    dim: usize,
    kind: ModelKind,
}

impl fmt::Debug for MeasureModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ModelKind::Product(m) => f
                .debug_struct("MeasureModel")
                .field("dim", &self.dim)
                .field("marginals", &m.iter().map(|mm| mm.law).collect::<Vec<_>>())
                .finish(),
            ModelKind::Unnormalized { name, sup_bound, .. } => f
                .debug_struct("MeasureModel")
                .field("dim", &self.dim)
                .field("custom", name)
                .field("sup_bound", sup_bound)
                .finish(),
        }
    }
}

impl MeasureModel {
    pub fn uniform(dim: usize) -> Self {
        Self::product(vec![Marginal::Uniform; dim]).expect("uniform marginals are valid")
    }

    pub fn product(marginals: Vec<Marginal>) -> Result<Self> {
        if marginals.is_empty() {
            return Err(Error::InvalidArgument("product law needs at least one marginal".into()));
        }
        for m in &marginals {
            if let Marginal::TruncatedNormal { mean, std } = *m {
                if !(mean.is_finite() && std.is_finite() && std > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "truncated normal needs finite mean and positive std, got ({mean}, {std})"
                    )));
                }
            }
        }
        Ok(Self {
            dim: marginals.len(),
            kind: ModelKind::Product(Arc::new(marginals.into_iter().map(MarginalModel::new).collect())),
        })
    }

    pub fn truncated_normal_product(mean: &[f64], std: &[f64]) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::InvalidArgument(format!(
                "mean has {} entries but std has {}",
                mean.len(),
                std.len()
            )));
        }
        Self::product(
            mean.iter()
                .zip(std)
                .map(|(&mean, &std)| Marginal::TruncatedNormal { mean, std })
                .collect(),
        )
    }

    /// Law known only through an unnormalized log-density; `sup_bound`, if
    /// given, bounds the normalized density.
    pub fn unnormalized<F>(dim: usize, name: &str, log_density: F, sup_bound: Option<f64>) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self {
            dim,
            kind: ModelKind::Unnormalized {
                log_density: Arc::new(log_density),
                sup_bound,
                name: name.to_string(),
            },
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capabilities(&self) -> Capabilities {
        let exact = matches!(self.kind, ModelKind::Product(_));
        Capabilities {
            exact_probability: exact,
            exact_conditional_sampling: exact,
            unnormalized_density: true,
        }
    }

    pub fn marginals(&self) -> Option<Vec<Marginal>> {
        match &self.kind {
            ModelKind::Product(m) => Some(m.iter().map(|mm| mm.law).collect()),
            ModelKind::Unnormalized { .. } => None,
        }
    }

    fn product_marginals(&self, capability: &'static str) -> Result<&[MarginalModel]> {
        match &self.kind {
            ModelKind::Product(m) => Ok(m),
            ModelKind::Unnormalized { .. } => Err(Error::Capability(capability)),
        }
    }

    /// `K`, the supremum of the normalized density, when it is known.
    pub fn density_sup(&self) -> Option<f64> {
        match &self.kind {
            ModelKind::Product(m) => Some(m.iter().map(|mm| mm.law.max_density() / mm.normalizer()).product()),
            ModelKind::Unnormalized { sup_bound, .. } => *sup_bound,
        }
    }

    /// `P(X ∈ Q)`.
    pub fn cube_probability(&self, cube: &DyadicCube) -> Result<f64> {
        let marginals = self.product_marginals("exact_probability")?;
        check_dim(self.dim, cube.dim())?;
        let p = marginals
            .iter()
            .zip(cube.grid_index())
            .map(|(mm, &m)| mm.dyadic_mass(cube.depth(), m) / mm.normalizer())
            .product::<f64>();
        Ok(p.clamp(0.0, 1.0))
    }

    pub fn vertex_probability(&self, addr: &VertexAddress) -> Result<f64> {
        self.cube_probability(&decode_cube(addr, self.dim)?)
    }

    /// `q(v) = P(X ∈ Q(v) | X ∈ Q(parent))` for every child `v`, in index order.
    pub fn conditional_child_probabilities(&self, parent: &VertexAddress) -> Result<Vec<f64>> {
        let marginals = self.product_marginals("exact_probability")?;
        let cube = decode_cube(parent, self.dim)?;
        // per-axis split of the parent mass into lower and upper halves
        let mut halves = Vec::with_capacity(self.dim);
        for (mm, &m) in marginals.iter().zip(cube.grid_index()) {
            let lower = mm.dyadic_mass(cube.depth() + 1, 2 * m);
            let upper = mm.dyadic_mass(cube.depth() + 1, 2 * m + 1);
            let total = lower + upper;
            if !(total > 0.0) {
                return Err(Error::DegenerateConditioning(parent.clone()));
            }
            halves.push((lower / total, upper / total));
        }
        Ok((0..(1u32 << self.dim))
            .map(|offset| {
                halves
                    .iter()
                    .enumerate()
                    .map(|(axis, &(lo, hi))| if (offset >> axis) & 1 == 1 { hi } else { lo })
                    .product()
            })
            .collect())
    }

    /// `count` i.i.d. draws from the law of `X` given `X ∈ Q(parent)`.
    ///
    /// Draw `i` uses its own stream under the (seed, parent) key and consumes
    /// the first `dim` uniforms of that stream, one per axis.
    pub fn exact_conditional_sample(&self, parent: &VertexAddress, count: usize, seed: u64) -> Result<Points> {
        let marginals = self.product_marginals("exact_conditional_sampling")?;
        let cube = decode_cube(parent, self.dim)?;
        if self.cube_probability(&cube)? <= 0.0 {
            return Err(Error::DegenerateConditioning(parent.clone()));
        }
        let key = rng::derive_key(seed, rng::tag::CONDITIONAL_SAMPLE, parent);
        let bounds: Vec<(f64, f64)> = (0..self.dim).map(|axis| cube.axis_interval(axis)).collect();
        let mut points = Points::with_capacity(self.dim, count);
        let mut x = vec![0.0; self.dim];
        for i in 0..count {
            let mut stream = rng::stream_from_key(&key, i as u64);
            for (axis, mm) in marginals.iter().enumerate() {
                let u: f64 = stream.random();
                let (a, b) = bounds[axis];
                x[axis] = mm.law.quantile_in(a, b, u);
            }
            points.push(&x);
        }
        Ok(points)
    }
}

impl UnnormalizedDensity for MeasureModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        if x.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return f64::NEG_INFINITY;
        }
        match &self.kind {
            ModelKind::Product(m) => m.iter().zip(x).map(|(mm, &xi)| mm.law.log_density(xi)).sum(),
            ModelKind::Unnormalized { log_density, .. } => log_density(x),
        }
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("dimension mismatch: model has {expected}, cube has {got}")))
    }
}

/// JSON description of a law, as it appears in run configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistributionConfig {
    Uniform,
    TruncatedNormalProduct { mean: Vec<f64>, std: Vec<f64> },
    /// Unnormalized log-density of a built-in problem, usable only by MCMC.
    CustomLogdensity { problem: String },
}

impl DistributionConfig {
    /// Builds a product model; custom densities are resolved by the problem registry.
    pub fn build_product(&self, dim: usize) -> Result<MeasureModel> {
        match self {
            DistributionConfig::Uniform => Ok(MeasureModel::uniform(dim)),
            DistributionConfig::TruncatedNormalProduct { mean, std } => {
                if mean.len() != dim {
                    return Err(Error::InvalidArgument(format!(
                        "distribution has {} axes, problem has {dim}",
                        mean.len()
                    )));
                }
                MeasureModel::truncated_normal_product(mean, std)
            }
            DistributionConfig::CustomLogdensity { .. } => Err(Error::InvalidArgument(
                "custom_logdensity is resolved through the problem registry".into(),
            )),
        }
    }
}
