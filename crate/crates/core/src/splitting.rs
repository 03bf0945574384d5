//! Multilevel splitting estimates of leaf-set probabilities.
//!
//! At every split vertex one `N`-sample from the conditional law classifies
//! all `2^d` children at once, giving `q_N(v) = C_N^v / N`. A leaf estimate is
//! the product of `q_N` along its ancestor path.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::distributions::{MeasureModel, Points};
use crate::dyadic_tree::{decode_cube, Label, LabeledTree, VertexAddress};
use crate::error::{Error, Result};

/// Child counts of one shared `N`-sample drawn in `Q(parent)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VertexSampleStats {
    pub parent: VertexAddress,
    pub n: usize,
    /// `C_N^v` for children `1..=2^d`, in index order.
    pub counts: Vec<u64>,
}

impl VertexSampleStats {
    /// Classifies `points` among the children of `parent`, using half-open cells.
    pub fn from_points(parent: &VertexAddress, points: &Points) -> Result<Self> {
        let cube = decode_cube(parent, points.dim())?;
        let mut counts = vec![0u64; 1 << points.dim()];
        for x in points.iter() {
            counts[cube.child_index_of(x) as usize - 1] += 1;
        }
        Ok(Self {
            parent: parent.clone(),
            n: points.len(),
            counts,
        })
    }

    /// `q_N(child)` for a child index in `1..=2^d`.
    pub fn q(&self, child_index: u32) -> f64 {
        self.counts[child_index as usize - 1] as f64 / self.n as f64
    }
}

pub type StatsMap = BTreeMap<VertexAddress, VertexSampleStats>;

/// Draws from the law of `X` conditioned on a dyadic cube.
pub trait ConditionalSampler: Sync {
    fn dim(&self) -> usize;
    fn sample(&self, parent: &VertexAddress, count: usize, seed: u64) -> Result<Points>;
}

impl ConditionalSampler for MeasureModel {
    fn dim(&self) -> usize {
        MeasureModel::dim(self)
    }

    fn sample(&self, parent: &VertexAddress, count: usize, seed: u64) -> Result<Points> {
        self.exact_conditional_sample(parent, count, seed)
    }
}

/// One stats record per split vertex of `tree`.
pub fn collect_vertex_stats<S: ConditionalSampler + ?Sized>(
    tree: &LabeledTree,
    sampler: &S,
    n: usize,
    seed: u64,
) -> Result<StatsMap> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample size N must be at least 1".into()));
    }
    if sampler.dim() != tree.dim() {
        return Err(Error::InvalidArgument(format!(
            "sampler has dimension {}, tree has {}",
            sampler.dim(),
            tree.dim()
        )));
    }
    tree.internal_vertices()
        .into_par_iter()
        .map(|v| {
            let points = sampler.sample(&v, n, seed).map_err(|e| Error::Sampler {
                vertex: v.clone(),
                source: Box::new(e),
            })?;
            Ok((v.clone(), VertexSampleStats::from_points(&v, &points)?))
        })
        .collect()
}

/// Conditional child probabilities `q(v)`, keyed by the child `v`.
pub type QMap = BTreeMap<VertexAddress, f64>;

/// `q_N(v)` for every child of every vertex with stats.
pub fn empirical_q(stats: &StatsMap) -> QMap {
    let mut q = QMap::new();
    for s in stats.values() {
        for i in 1..=s.counts.len() as u32 {
            q.insert(s.parent.child(i), s.q(i));
        }
    }
    q
}

/// Exact `q(v)` for every non-root vertex of `tree`.
pub fn exact_q(tree: &LabeledTree, measure: &MeasureModel) -> Result<QMap> {
    let mut q = QMap::new();
    for parent in tree.internal_vertices() {
        for (i, p) in measure.conditional_child_probabilities(&parent)?.into_iter().enumerate() {
            q.insert(parent.child(i as u32 + 1), p);
        }
    }
    Ok(q)
}

fn q_at(q: &QMap, v: &VertexAddress) -> Result<f64> {
    q.get(v)
        .copied()
        .ok_or_else(|| Error::IncompleteTree(v.parent().unwrap_or_else(VertexAddress::root)))
}

/// `p(u) = Π_{v ∈ a(u)} q(v)`.
pub fn leaf_probability(q: &QMap, u: &VertexAddress) -> Result<f64> {
    u.ancestors().iter().try_fold(1.0, |acc, v| Ok(acc * q_at(q, v)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeafEstimate {
    pub leaf: VertexAddress,
    pub p: f64,
    /// Some `q` on the path is zero; the leaf contributes 0 and is left out
    /// of the variance.
    pub zero_path: bool,
}

/// `p(S) = Σ_{u ∈ S} p(u)` and the per-leaf terms.
pub fn leaf_set_estimate(q: &QMap, leaves: &[VertexAddress]) -> Result<(f64, Vec<LeafEstimate>)> {
    let mut per_leaf = Vec::with_capacity(leaves.len());
    for u in leaves {
        let mut p = 1.0;
        let mut zero_path = false;
        for v in u.ancestors() {
            let qv = q_at(q, &v)?;
            zero_path |= qv == 0.0;
            p *= qv;
        }
        per_leaf.push(LeafEstimate {
            leaf: u.clone(),
            p,
            zero_path,
        });
    }
    let total = per_leaf.iter().map(|e| e.p).sum::<f64>().clamp(0.0, 1.0);
    Ok((total, per_leaf))
}

/// Leaves of `S` whose ancestor path has no zero `q`.
pub fn prune_zero_paths(q: &QMap, leaves: &[VertexAddress]) -> Result<Vec<VertexAddress>> {
    let mut kept = Vec::with_capacity(leaves.len());
    for u in leaves {
        let mut zero = false;
        for v in u.ancestors() {
            zero |= q_at(q, &v)? == 0.0;
        }
        if !zero {
            kept.push(u.clone());
        }
    }
    Ok(kept)
}

fn odds_against(q: &QMap, v: &VertexAddress, leaf: &VertexAddress) -> Result<f64> {
    let qv = q_at(q, v)?;
    if qv <= 0.0 {
        return Err(Error::ZeroProbabilityPath(leaf.clone()));
    }
    Ok((1.0 - qv) / qv)
}

/// Asymptotic variance `σ²` of `√N (p_N(S) - p(S))`.
///
/// Evaluated as `Σ_v r(v) P_S(v)² - ((Σ p)² - Σ p²)` with `r = (1 - q)/q` and
/// `P_S(v)` the mass of the leaves of `S` below `v`, which regroups the
/// double sum over leaf pairs by common ancestor.
pub fn asymptotic_variance(q: &QMap, leaves: &[VertexAddress]) -> Result<f64> {
    if leaves.is_empty() {
        return Ok(0.0);
    }
    let mut below: BTreeMap<VertexAddress, (f64, VertexAddress)> = BTreeMap::new();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for u in leaves {
        let p = leaf_probability(q, u)?;
        sum += p;
        sum_sq += p * p;
        for v in u.ancestors() {
            below.entry(v).or_insert((0.0, u.clone())).0 += p;
        }
    }
    let mut tree_term = 0.0;
    for (v, (mass, witness)) in &below {
        tree_term += odds_against(q, v, witness)? * mass * mass;
    }
    Ok((tree_term - (sum * sum - sum_sq)).max(0.0))
}

/// Same quantity from the pairwise double sum over leaves; quadratic in `|S|`.
pub fn asymptotic_variance_pairwise(q: &QMap, leaves: &[VertexAddress]) -> Result<f64> {
    let path_odds = |u: &VertexAddress, depth: usize| -> Result<f64> {
        u.ancestors()
            .iter()
            .take(depth)
            .try_fold(0.0, |acc, v| Ok(acc + odds_against(q, v, u)?))
    };
    let p: Vec<f64> = leaves.iter().map(|u| leaf_probability(q, u)).collect::<Result<_>>()?;
    let mut sigma2 = 0.0;
    for (i, u) in leaves.iter().enumerate() {
        sigma2 += p[i] * p[i] * path_odds(u, u.depth())?;
        for (k, w) in leaves.iter().enumerate() {
            if k != i {
                sigma2 += p[i] * p[k] * (path_odds(u, u.meet_depth(w))? - 1.0);
            }
        }
    }
    Ok(sigma2.max(0.0))
}

/// `Φ^{-1}(1 - α/2)`.
pub fn normal_quantile(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let normal = Normal::standard();
    Ok(normal.inverse_cdf(1.0 - alpha / 2.0))
}

/// `[m, M] = [p⁻ - z σ⁻/√N, p⁺ + z σ⁺/√N] ∩ [0, 1]`.
pub fn confidence_interval(
    lower_est: f64,
    upper_est: f64,
    sigma_lower: f64,
    sigma_upper: f64,
    n: usize,
    alpha: f64,
) -> Result<(f64, f64)> {
    if sigma_lower < 0.0 || sigma_upper < 0.0 || sigma_lower.is_nan() || sigma_upper.is_nan() {
        return Err(Error::InvalidArgument("standard deviations must be non-negative".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("sample size N must be at least 1".into()));
    }
    let z = normal_quantile(alpha)?;
    let root_n = (n as f64).sqrt();
    let m = (lower_est - z * sigma_lower / root_n).clamp(0.0, 1.0);
    let big_m = (upper_est + z * sigma_upper / root_n).clamp(0.0, 1.0);
    Ok((m, big_m))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplittingEstimate {
    pub leaves: Vec<VertexAddress>,
    pub estimate: f64,
    pub per_leaf: Vec<LeafEstimate>,
    /// Plug-in `σ_N²`, over the leaves with no zero `q_N` on their path.
    pub variance: f64,
    pub n: usize,
}

impl SplittingEstimate {
    pub fn from_q(q: &QMap, leaves: Vec<VertexAddress>, n: usize) -> Result<Self> {
        let (estimate, per_leaf) = leaf_set_estimate(q, &leaves)?;
        let variance = asymptotic_variance(q, &prune_zero_paths(q, &leaves)?)?;
        Ok(Self {
            leaves,
            estimate,
            per_leaf,
            variance,
            n,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Estimates for `S = I` and `S = I ∪ U` from one set of vertex stats.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeEstimate {
    pub lower: SplittingEstimate,
    pub upper: SplittingEstimate,
    pub alpha: f64,
    pub ci: (f64, f64),
    pub stats: StatsMap,
}

/// The inside leaves and the inside-or-uncertain leaves of a tree.
pub fn bracket_leaf_sets(tree: &LabeledTree) -> (Vec<VertexAddress>, Vec<VertexAddress>) {
    let lower: Vec<VertexAddress> = tree.leaves_labeled(Label::I);
    let upper: Vec<VertexAddress> = tree
        .leaves()
        .filter(|(_, r)| r.label != Label::O)
        .map(|(a, _)| a.clone())
        .collect();
    (lower, upper)
}

pub fn estimate_tree(tree: &LabeledTree, stats: StatsMap, n: usize, alpha: f64) -> Result<TreeEstimate> {
    for v in tree.internal_vertices() {
        if !stats.contains_key(&v) {
            return Err(Error::IncompleteTree(v));
        }
    }
    let q = empirical_q(&stats);
    let (lower_set, upper_set) = bracket_leaf_sets(tree);
    let lower = SplittingEstimate::from_q(&q, lower_set, n)?;
    let upper = SplittingEstimate::from_q(&q, upper_set, n)?;
    let ci = confidence_interval(lower.estimate, upper.estimate, lower.sigma(), upper.sigma(), n, alpha)?;
    Ok(TreeEstimate {
        lower,
        upper,
        alpha,
        ci,
        stats,
    })
}

/// Sample, count and estimate with a given conditional sampler.
pub fn splitting_tree_estimate<S: ConditionalSampler + ?Sized>(
    tree: &LabeledTree,
    sampler: &S,
    n: usize,
    seed: u64,
    alpha: f64,
) -> Result<TreeEstimate> {
    let stats = collect_vertex_stats(tree, sampler, n, seed)?;
    estimate_tree(tree, stats, n, alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VertexReport {
    pub path: Vec<u32>,
    #[serde(rename = "qN")]
    pub q_n: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub p_lower_hat: f64,
    pub p_upper_hat: f64,
    pub sigma_lower: f64,
    pub sigma_upper: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub alpha: f64,
    pub ci: [f64; 2],
    pub per_vertex: Vec<VertexReport>,
}

impl TreeEstimate {
    pub fn report(&self) -> EstimateReport {
        let mut per_vertex: Vec<VertexReport> = self
            .stats
            .values()
            .flat_map(|s| {
                (1..=s.counts.len() as u32).map(move |i| VertexReport {
                    path: s.parent.child(i).path().to_vec(),
                    q_n: s.q(i),
                    count: s.counts[i as usize - 1],
                })
            })
            .collect();
        per_vertex.sort_by(|a, b| (a.path.len(), &a.path).cmp(&(b.path.len(), &b.path)));
        EstimateReport {
            p_lower_hat: self.lower.estimate,
            p_upper_hat: self.upper.estimate,
            sigma_lower: self.lower.sigma(),
            sigma_upper: self.upper.sigma(),
            n: self.lower.n,
            alpha: self.alpha,
            ci: [self.ci.0, self.ci.1],
            per_vertex,
        }
    }
}
