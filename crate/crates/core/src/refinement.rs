//! Breadth-first construction of the labeled trees `Λ(k)` and their
//! budget-limited variants `Λ_n`, plus the certified bounds they induce.
//!
//! Every uncertain leaf of `Λ(k)` is split into its `2^d` children and each
//! child is labeled from one evaluation of `g` at its center. Under a budget
//! that runs out inside a level, children are evaluated in lexicographic
//! address order; children left unevaluated are kept as uncertain leaves so
//! the bounds stay valid.

use serde::Serialize;

use crate::distributions::MeasureModel;
use crate::dyadic_tree::{classify, decode_cube, Label, LabeledTree, VertexAddress, VertexRecord, MAX_DEPTH};
use crate::error::{Error, Result};
use crate::problems::ProblemSpec;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RefineOptions {
    /// Evaluate `g` at the center of `Ω` and label the root from it. Only
    /// useful to diagnose `p ∈ {0, 1}`; costs one call.
    pub evaluate_root: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementResult {
    pub tree: LabeledTree,
    /// Number of calls to `g` made to build the tree.
    pub eval_count: usize,
    /// Evaluated vertices and the value of `g` at their centers, in call order.
    pub eval_log: Vec<(VertexAddress, f64)>,
    /// `|U(j)|` for every fully built level `j`.
    pub uncertain_per_level: Vec<usize>,
    /// Depth `k` of the last fully built level, so that `n_k ≤ n`.
    pub complete_depth: usize,
    /// No uncertain leaf remains; the bounds are exact.
    pub exhausted: bool,
}

/// Certified bracket `p⁻ ≤ p ≤ p⁺`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundPair {
    pub lower: f64,
    pub upper: f64,
    pub gap: f64,
}

impl BoundPair {
    pub fn new(lower: f64, upper: f64) -> Self {
        let lower = lower.clamp(0.0, 1.0);
        let upper = upper.clamp(lower, 1.0);
        Self {
            lower,
            upper,
            gap: upper - lower,
        }
    }

    pub fn brackets(&self, p: f64) -> bool {
        self.lower <= p && p <= self.upper
    }
}

/// Incrementally grows a labeled tree from evaluations, keeping it
/// `2^d`-regular: evaluating one child materializes its siblings as
/// unevaluated uncertain leaves.
#[derive(Debug, Clone)]
pub struct TreeBuilder {
    tree: LabeledTree,
    lipschitz: f64,
    threshold: f64,
}

impl TreeBuilder {
    pub fn new(dim: usize, lipschitz: f64, threshold: f64) -> Self {
        Self {
            tree: LabeledTree::root_only(dim),
            lipschitz,
            threshold,
        }
    }

    pub fn tree(&self) -> &LabeledTree {
        &self.tree
    }

    pub fn into_tree(self) -> LabeledTree {
        self.tree
    }

    /// Records `g(c_Q(addr)) = value` and labels the vertex.
    pub fn record(&mut self, addr: &VertexAddress, value: f64) -> Result<Label> {
        let label = classify(value, self.threshold, self.lipschitz, addr.depth()).map_err(|e| match e {
            Error::Evaluation { value, .. } => Error::Evaluation {
                path: addr.path().to_vec(),
                value,
            },
            other => other,
        })?;
        let record = VertexRecord {
            label,
            g_value: Some(value),
        };
        if let Some(parent) = addr.parent() {
            if !self.tree.contains(&parent) {
                return Err(Error::InvalidArgument(format!("{addr} evaluated before its parent")));
            }
            if !self.tree.is_internal(&parent) {
                for sibling in parent.children(self.tree.dim()) {
                    self.tree.insert(
                        sibling,
                        VertexRecord {
                            label: Label::U,
                            g_value: None,
                        },
                    );
                }
            }
            self.tree.set_record(addr, record);
        } else {
            self.tree.set_record(addr, record);
        }
        Ok(label)
    }
}

/// Rebuilds the tree produced by a sequence of evaluations.
pub fn replay_tree(
    dim: usize,
    lipschitz: f64,
    threshold: f64,
    eval_log: &[(VertexAddress, f64)],
) -> Result<LabeledTree> {
    let mut builder = TreeBuilder::new(dim, lipschitz, threshold);
    for (addr, value) in eval_log {
        builder.record(addr, *value)?;
    }
    Ok(builder.into_tree())
}

struct Refiner<'a> {
    problem: &'a ProblemSpec,
    builder: TreeBuilder,
    log: Vec<(VertexAddress, f64)>,
    uncertain_per_level: Vec<usize>,
    depth: usize,
    exhausted: bool,
}

impl<'a> Refiner<'a> {
    fn new(problem: &'a ProblemSpec) -> Result<Self> {
        let l = problem.lipschitz();
        if !(l > 0.0 && l.is_finite()) {
            return Err(Error::InvalidArgument(format!("Lipschitz constant must be positive and finite, got {l}")));
        }
        Ok(Self {
            problem,
            builder: TreeBuilder::new(problem.dim(), l, problem.threshold()),
            log: Vec::new(),
            uncertain_per_level: Vec::new(),
            depth: 0,
            exhausted: false,
        })
    }

    fn abort(&self, source: Error) -> Error {
        Error::RefinementAborted {
            source: Box::new(source),
            eval_log: self.log.clone(),
        }
    }

    fn evaluate(&mut self, addr: &VertexAddress) -> Result<Label> {
        let cube = decode_cube(addr, self.problem.dim())?;
        let value = self.problem.evaluate(&cube.center());
        if !value.is_finite() {
            return Err(self.abort(Error::Evaluation {
                path: addr.path().to_vec(),
                value,
            }));
        }
        self.log.push((addr.clone(), value));
        self.builder.record(addr, value).map_err(|e| self.abort(e))
    }

    fn evaluate_root(&mut self) -> Result<()> {
        if self.evaluate(&VertexAddress::root())? != Label::U {
            self.exhausted = true;
        }
        Ok(())
    }

    fn uncertain_frontier(&self) -> Vec<VertexAddress> {
        self.builder
            .tree()
            .leaves()
            .filter(|(a, r)| r.label == Label::U && a.depth() == self.depth)
            .map(|(a, _)| a.clone())
            .collect()
    }

    /// Builds the next level with at most `budget` evaluations. Returns
    /// `true` when the level was completed.
    fn next_level(&mut self, budget: usize) -> Result<bool> {
        let frontier = self.uncertain_frontier();
        if self.uncertain_per_level.len() == self.depth {
            self.uncertain_per_level.push(frontier.len());
        }
        if frontier.is_empty() {
            self.exhausted = true;
            return Ok(false);
        }
        if budget == 0 {
            return Ok(false);
        }
        if self.depth + 1 > MAX_DEPTH {
            return Err(self.abort(Error::DepthLimit { limit: MAX_DEPTH }));
        }
        let dim = self.problem.dim();
        let mut spent = 0;
        for leaf in &frontier {
            for child in leaf.children(dim) {
                if spent == budget {
                    return Ok(false);
                }
                self.evaluate(&child)?;
                spent += 1;
            }
        }
        self.depth += 1;
        Ok(true)
    }

    fn finish(mut self) -> RefinementResult {
        if self.uncertain_per_level.len() == self.depth {
            let frontier = self.uncertain_frontier().len();
            self.uncertain_per_level.push(frontier);
            if frontier == 0 {
                self.exhausted = true;
            }
        }
        RefinementResult {
            eval_count: self.log.len(),
            eval_log: self.log,
            tree: self.builder.into_tree(),
            uncertain_per_level: self.uncertain_per_level,
            complete_depth: self.depth,
            exhausted: self.exhausted,
        }
    }

    fn snapshot(&self) -> RefinementResult {
        Refiner {
            problem: self.problem,
            builder: self.builder.clone(),
            log: self.log.clone(),
            uncertain_per_level: self.uncertain_per_level.clone(),
            depth: self.depth,
            exhausted: self.exhausted,
        }
        .finish()
    }
}

/// `Λ(0), …, Λ(k_max)`.
pub fn refine_full(problem: &ProblemSpec, k_max: usize) -> Result<Vec<RefinementResult>> {
    refine_full_with(problem, k_max, RefineOptions::default())
}

pub fn refine_full_with(problem: &ProblemSpec, k_max: usize, options: RefineOptions) -> Result<Vec<RefinementResult>> {
    let mut refiner = Refiner::new(problem)?;
    if options.evaluate_root {
        refiner.evaluate_root()?;
    }
    let mut out = Vec::with_capacity(k_max + 1);
    out.push(refiner.snapshot());
    for _ in 0..k_max {
        if !refiner.exhausted {
            refiner.next_level(usize::MAX)?;
        }
        out.push(refiner.snapshot());
    }
    Ok(out)
}

/// `Λ_n`: the tree reachable with exactly `n` calls to `g` (fewer if the
/// refinement runs out of uncertain leaves).
pub fn refine_budgeted(problem: &ProblemSpec, n: usize) -> Result<RefinementResult> {
    refine_budgeted_with(problem, n, RefineOptions::default())
}

pub fn refine_budgeted_with(problem: &ProblemSpec, n: usize, options: RefineOptions) -> Result<RefinementResult> {
    let mut refiner = Refiner::new(problem)?;
    if options.evaluate_root && n > 0 {
        refiner.evaluate_root()?;
    }
    while !refiner.exhausted {
        let remaining = n - refiner.log.len();
        if !refiner.next_level(remaining)? {
            break;
        }
    }
    Ok(refiner.finish())
}

/// `p⁻ = Σ_{I leaves} P(X ∈ Q)` and `p⁺ = p⁻ + Σ_{U leaves} P(X ∈ Q)`.
///
/// `p⁺` is computed as `1 - Σ_{O leaves} P(X ∈ Q)`. Splitting a leaf only adds
/// terms to the two sums, so both bounds are monotone in floating point too.
pub fn deterministic_bounds(tree: &LabeledTree, measure: &MeasureModel) -> Result<BoundPair> {
    if !measure.capabilities().exact_probability {
        return Err(Error::Capability("exact_probability"));
    }
    let mut inside = 0.0;
    let mut outside = 0.0;
    for (addr, record) in tree.leaves() {
        match record.label {
            Label::I => inside += measure.vertex_probability(addr)?,
            Label::O => outside += measure.vertex_probability(addr)?,
            Label::U => {}
        }
    }
    Ok(BoundPair::new(inside, 1.0 - outside))
}

/// Worst-case number of calls needed to build `Λ(k)` for level-set constant `c`:
/// `2ck` when `d = 1`, `4c 2^((d-1)k)` otherwise.
pub fn theoretical_eval_bound(dim: usize, c: f64, k: usize) -> Result<f64> {
    if dim < 1 {
        return Err(Error::InvalidArgument("dimension must be at least 1".into()));
    }
    if dim == 1 {
        Ok(2.0 * c * k as f64)
    } else {
        Ok(4.0 * c * (((dim - 1) * k) as f64).exp2())
    }
}

/// Worst-case bracket width after `n` calls:
/// `2cK 2^(-n/(2c))` when `d = 1`, `8 c^(d/(d-1)) K n^(-1/(d-1))` otherwise.
pub fn theoretical_gap_bound(dim: usize, c: f64, k_sup: f64, n: usize) -> Result<f64> {
    if dim < 1 {
        return Err(Error::InvalidArgument("dimension must be at least 1".into()));
    }
    let n = n as f64;
    if dim == 1 {
        Ok(2.0 * c * k_sup * (-n / (2.0 * c)).exp2())
    } else {
        let e = (dim - 1) as f64;
        Ok(8.0 * c.powf(dim as f64 / e) * k_sup * n.powf(-1.0 / e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub n: usize,
    pub p_lower: f64,
    pub p_upper: f64,
    pub gap: f64,
}

/// Bounds after each prefix of the evaluation log, one row per change.
pub fn bounds_trace(problem: &ProblemSpec, result: &RefinementResult) -> Result<Vec<TraceRow>> {
    let measure = problem.measure();
    let mut builder = TreeBuilder::new(problem.dim(), problem.lipschitz(), problem.threshold());
    let mut rows = Vec::new();
    let push = |n: usize, tree: &LabeledTree, rows: &mut Vec<TraceRow>| -> Result<()> {
        let b = deterministic_bounds(tree, measure)?;
        let changed = rows
            .last()
            .is_none_or(|r: &TraceRow| r.p_lower != b.lower || r.p_upper != b.upper);
        if changed {
            rows.push(TraceRow {
                n,
                p_lower: b.lower,
                p_upper: b.upper,
                gap: b.gap,
            });
        }
        Ok(())
    };
    push(0, builder.tree(), &mut rows)?;
    for (i, (addr, value)) in result.eval_log.iter().enumerate() {
        builder.record(addr, *value)?;
        push(i + 1, builder.tree(), &mut rows)?;
    }
    Ok(rows)
}

pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("n,p_lower,p_upper,gap\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.n, r.p_lower, r.p_upper, r.gap));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{halfspace_d2, toy_1d, ProblemSpec};

    fn addr(path: &[u32]) -> VertexAddress {
        VertexAddress::from_path_unchecked(path.to_vec())
    }

    #[test]
    fn toy_first_level() {
        let toy = toy_1d();
        let levels = refine_full(&toy, 1).unwrap();
        let l1 = &levels[1];
        assert_eq!(l1.eval_count, 2);
        assert_eq!(l1.eval_log[0].0, addr(&[1]));
        assert_eq!(l1.eval_log[1].0, addr(&[2]));
        assert_eq!(l1.tree.label(&addr(&[1])), Some(Label::O));
        assert_eq!(l1.tree.label(&addr(&[2])), Some(Label::U));
        assert_eq!(toy.call_count(), 2);
    }

    #[test]
    fn toy_fourth_level_leaves() {
        let toy = toy_1d();
        let l4 = refine_full(&toy, 4).unwrap().pop().unwrap();
        assert_eq!(l4.tree.label(&addr(&[2, 2, 1, 1])), Some(Label::U));
        assert_eq!(l4.tree.label(&addr(&[2, 2, 1, 2])), Some(Label::I));
        assert!(!l4.tree.is_internal(&addr(&[2, 2, 1, 1])));
        // last two evaluations are at 25/32 and 27/32
        let tail: Vec<_> = l4.eval_log[l4.eval_count - 2..].iter().map(|(a, _)| a.clone()).collect();
        assert_eq!(tail, vec![addr(&[2, 2, 1, 1]), addr(&[2, 2, 1, 2])]);
        l4.tree.check_structure().unwrap();
    }

    #[test]
    fn toy_fourth_level_bounds() {
        let toy = toy_1d();
        let l4 = refine_full(&toy, 4).unwrap().pop().unwrap();
        let b = deterministic_bounds(&l4.tree, toy.measure()).unwrap();
        assert!((b.lower - 1.3e-3).abs() < 0.05e-3, "{b:?}");
        assert!((b.gap - 2.2e-3).abs() < 0.05e-3, "{b:?}");
        // p⁺(4) = P(X ≥ 12/16)
        let tail = toy.measure().vertex_probability(&addr(&[2, 2])).unwrap();
        assert!((b.upper - tail).abs() < 1e-15);
    }

    #[test]
    fn root_only_bounds() {
        let tree = LabeledTree::root_only(2);
        let b = deterministic_bounds(&tree, &MeasureModel::uniform(2)).unwrap();
        assert_eq!((b.lower, b.upper), (0.0, 1.0));
    }

    #[test]
    fn zero_budget_is_root_only() {
        let toy = toy_1d();
        let r = refine_budgeted(&toy, 0).unwrap();
        assert_eq!(r.tree.len(), 1);
        assert_eq!(r.eval_count, 0);
        assert_eq!(toy.call_count(), 0);
    }

    #[test]
    fn budget_at_level_boundaries_matches_full_trees() {
        let toy = toy_1d();
        let levels = refine_full(&toy, 8).unwrap();
        for level in &levels {
            let r = refine_budgeted(&toy_1d(), level.eval_count).unwrap();
            assert!(r.tree.same_shape(&level.tree), "n = {}", level.eval_count);
        }
    }

    #[test]
    fn halfspace_level_three_gap_counts_uncertain_leaves() {
        let p = halfspace_d2();
        let l3 = refine_full(&p, 3).unwrap().pop().unwrap();
        let b = deterministic_bounds(&l3.tree, p.measure()).unwrap();
        let u = l3.tree.leaves_labeled(Label::U).len();
        assert!(b.brackets(0.5));
        assert!((b.gap - u as f64 * (-6f64).exp2()).abs() < 1e-15);
        // two columns of 8 cubes touch the line x1 = 1/2
        assert_eq!(u, 16);
    }

    #[test]
    fn partial_level_keeps_unevaluated_children_uncertain() {
        let p = halfspace_d2();
        // level one costs 4 calls, level two 16
        let r = refine_budgeted(&p, 6).unwrap();
        assert_eq!(r.eval_count, 6);
        assert_eq!(r.complete_depth, 1);
        r.tree.check_structure().unwrap();
        let second_level: Vec<_> = r.tree.iter().filter(|(a, _)| a.depth() == 2).collect();
        assert_eq!(second_level.len(), 4);
        assert_eq!(second_level.iter().filter(|(_, rec)| rec.g_value.is_some()).count(), 2);
        assert!(second_level
            .iter()
            .filter(|(_, rec)| rec.g_value.is_none())
            .all(|(_, rec)| rec.label == Label::U));
    }

    #[test]
    fn exhausted_refinement_stops_spending() {
        // g ≡ 2 > T = 0: every child of the root is inside at depth 1
        let p = ProblemSpec::new("flat", 1, |_| 2.0, 1.0, 0.0, MeasureModel::uniform(1));
        let levels = refine_full(&p, 3).unwrap();
        assert_eq!(levels[1].eval_count, 2);
        assert!(levels[1].exhausted);
        assert_eq!(levels[3].eval_count, 2);
        assert!(levels[3].tree.same_shape(&levels[1].tree));
        let r = refine_budgeted(&p, 50).unwrap();
        assert_eq!(r.eval_count, 2);
        let b = deterministic_bounds(&r.tree, p.measure()).unwrap();
        assert_eq!((b.lower, b.upper), (1.0, 1.0));
    }

    #[test]
    fn root_evaluation_option() {
        let p = ProblemSpec::new("flat", 1, |_| 2.0, 1.0, 0.0, MeasureModel::uniform(1));
        let r = refine_budgeted_with(&p, 10, RefineOptions { evaluate_root: true }).unwrap();
        assert_eq!(r.eval_count, 1);
        assert_eq!(r.tree.label(&VertexAddress::root()), Some(Label::I));
        let b = deterministic_bounds(&r.tree, p.measure()).unwrap();
        assert_eq!((b.lower, b.upper), (1.0, 1.0));
    }

    #[test]
    fn non_finite_g_aborts_with_log() {
        let p = ProblemSpec::new(
            "nan",
            1,
            |x| if x[0] > 0.6 { f64::NAN } else { 0.0 },
            1.0,
            0.0,
            MeasureModel::uniform(1),
        );
        match refine_budgeted(&p, 10) {
            Err(Error::RefinementAborted { source, eval_log }) => {
                assert!(matches!(*source, Error::Evaluation { .. }));
                assert_eq!(eval_log.len(), 1);
                assert_eq!(eval_log[0].0, addr(&[1]));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn replay_reproduces_tree() {
        let toy = toy_1d();
        let r = refine_budgeted(&toy, 21).unwrap();
        let tree = replay_tree(1, toy.lipschitz(), toy.threshold(), &r.eval_log).unwrap();
        assert_eq!(tree, r.tree);
    }

    #[test]
    fn eval_bound_formula() {
        assert_eq!(theoretical_eval_bound(1, 1.0, 0).unwrap(), 0.0);
        assert_eq!(theoretical_eval_bound(2, 1.0, 3).unwrap(), 32.0);
        assert_eq!(theoretical_eval_bound(1, 2.0, 5).unwrap(), 20.0);
        assert!(theoretical_eval_bound(0, 1.0, 1).is_err());
    }

    #[test]
    fn unnormalized_measure_cannot_bound() {
        let tree = LabeledTree::root_only(1);
        let m = MeasureModel::unnormalized(1, "flat", |_| 0.0, None);
        assert!(matches!(deterministic_bounds(&tree, &m), Err(Error::Capability(_))));
    }

    #[test]
    fn trace_rows_change_monotonically() {
        let toy = toy_1d();
        let r = refine_budgeted(&toy, 35).unwrap();
        let rows = bounds_trace(&toy, &r).unwrap();
        assert_eq!(rows[0].n, 0);
        assert_eq!((rows[0].p_lower, rows[0].p_upper), (0.0, 1.0));
        for w in rows.windows(2) {
            assert!(w[1].n > w[0].n);
            assert!(w[1].p_lower >= w[0].p_lower);
            assert!(w[1].p_upper <= w[0].p_upper, "{w:?}");
        }
        let csv = trace_to_csv(&rows);
        assert!(csv.starts_with("n,p_lower,p_upper,gap\n0,0,1,1\n"));
    }

    #[test]
    fn uncertain_counts_match_tree() {
        let p = halfspace_d2();
        let r = refine_full(&p, 4).unwrap().pop().unwrap();
        // root, then two columns of 2^j cubes at depth j
        assert_eq!(r.uncertain_per_level, vec![1, 4, 8, 16, 32]);
    }
}
