mod common;

use std::collections::HashMap;

use certibound::distributions::MeasureModel;
use certibound::dyadic_tree::{LabeledTree, VertexAddress};
use certibound::problems::toy_1d;
use certibound::refinement::{deterministic_bounds, refine_budgeted, refine_full};
use certibound::rng::sub_seed;
use certibound::splitting::{
    asymptotic_variance, bracket_leaf_sets, collect_vertex_stats, empirical_q, leaf_set_estimate, QMap,
    SplittingEstimate, VertexSampleStats,
};
use proptest::prelude::*;

const SEED: u64 = 77;

fn toy_tree(k: usize) -> LabeledTree {
    refine_full(&toy_1d(), k).unwrap().pop().unwrap().tree
}

fn leaf_mass(leaves: &[VertexAddress]) -> f64 {
    leaves
        .iter()
        .map(|u| {
            let (a, b) = common::interval_of(u.path());
            common::toy_mass(a, b)
        })
        .sum()
}

/// Empirical covariance of `C/N` at the root against `Γ/N`.
fn check_root_covariance(measure: &MeasureModel, q: &[f64]) {
    let (n, reps) = (100usize, 40_000u64);
    let m = q.len();
    let root = VertexAddress::root();
    let samples: Vec<Vec<f64>> = (0..reps)
        .map(|r| {
            let points = measure.exact_conditional_sample(&root, n, sub_seed(SEED, "covariance", r)).unwrap();
            let stats = VertexSampleStats::from_points(&root, &points).unwrap();
            (1..=m as u32).map(|i| stats.q(i)).collect()
        })
        .collect();
    let mean: Vec<f64> = (0..m).map(|i| samples.iter().map(|s| s[i]).sum::<f64>() / reps as f64).collect();
    for i in 0..m {
        for j in 0..m {
            let gamma = if i == j { q[i] } else { 0.0 } - q[i] * q[j];
            if gamma.abs() < 0.01 {
                continue;
            }
            let cov = samples.iter().map(|s| (s[i] - mean[i]) * (s[j] - mean[j])).sum::<f64>() / (reps - 1) as f64;
            let expected = gamma / n as f64;
            assert!(
                ((cov - expected) / expected).abs() <= 0.10,
                "entry ({i}, {j}): {cov} vs {expected}"
            );
        }
    }
}

#[test]
fn multinomial_covariance_uniform_square() {
    check_root_covariance(&MeasureModel::uniform(2), &[0.25; 4]);
}

#[test]
fn multinomial_covariance_toy_root() {
    let lower = common::toy_mass(0.0, 0.5);
    check_root_covariance(toy_1d().measure(), &[lower, 1.0 - lower]);
}

#[test]
fn sibling_counts_partition_every_sample() {
    let tree = toy_tree(6);
    let stats = collect_vertex_stats(&tree, toy_1d().measure(), 1000, SEED).unwrap();
    let q = empirical_q(&stats);
    for (parent, s) in &stats {
        assert_eq!(s.counts.iter().sum::<u64>(), 1000);
        let total: f64 = (1..=2).map(|i| q[&parent.child(i)]).sum();
        assert!((total - 1.0).abs() <= 2.0 * f64::EPSILON, "{parent}: {total}");
    }
}

#[test]
fn unbiased_on_depth_three_tree() {
    let tree = toy_tree(3);
    let leaves: Vec<VertexAddress> = tree.leaves().map(|(u, _)| u.clone()).collect();
    let (_, upper_set) = bracket_leaf_sets(&tree);
    let odd: Vec<VertexAddress> = leaves.iter().filter(|u| u.last_index() == Some(2)).cloned().collect();
    let reps = 10_000u64;
    let n = 100;
    for set in [upper_set, odd] {
        let target = leaf_mass(&set);
        let values: Vec<f64> = (0..reps)
            .map(|r| {
                let stats = collect_vertex_stats(&tree, toy_1d().measure(), n, sub_seed(SEED, "unbiased", r)).unwrap();
                leaf_set_estimate(&empirical_q(&stats), &set).unwrap().0
            })
            .collect();
        let (mean, var) = common::mean_and_var(&values);
        let band = 3.0 * var.sqrt() / (reps as f64).sqrt();
        assert!((mean - target).abs() <= band, "mean {mean} vs {target} (band {band})");
    }
}

#[test]
fn upper_set_estimate_at_step_four() {
    let toy = toy_1d();
    let tree = toy_tree(4);
    let upper_bound = deterministic_bounds(&tree, toy.measure()).unwrap().upper;
    let (_, upper_set) = bracket_leaf_sets(&tree);
    let n = 100_000;
    let stats = collect_vertex_stats(&tree, toy.measure(), n, SEED).unwrap();
    let est = SplittingEstimate::from_q(&empirical_q(&stats), upper_set, n).unwrap();
    let band = 4.0 * est.sigma() / (n as f64).sqrt();
    assert!((upper_bound - 3.5042e-3).abs() < 1e-7);
    assert!((est.estimate - upper_bound).abs() <= band, "{} vs {upper_bound} (band {band})", est.estimate);
}

#[test]
fn standardized_estimates_look_normal() {
    let toy = toy_1d();
    let tree = refine_budgeted(&toy, 35).unwrap().tree;
    let (_, upper_set) = bracket_leaf_sets(&tree);
    let target = leaf_mass(&upper_set);
    let n = 2000;
    let reps = 2000u64;
    let mut inside = 0;
    let mut sigma = 0.0;
    for r in 0..reps {
        let stats = collect_vertex_stats(&tree, toy.measure(), n, sub_seed(SEED, "normality", r)).unwrap();
        let est = SplittingEstimate::from_q(&empirical_q(&stats), upper_set.clone(), n).unwrap();
        if r == 0 {
            let exact = certibound::splitting::exact_q(&tree, toy.measure()).unwrap();
            sigma = asymptotic_variance(&exact, &upper_set).unwrap().sqrt();
        }
        if ((est.estimate - target) * (n as f64).sqrt() / sigma).abs() <= 1.959964 {
            inside += 1;
        }
    }
    let frac = inside as f64 / reps as f64;
    // binomial sd at 0.95 over 2000 draws is about 0.005
    assert!((frac - 0.95).abs() <= 0.02, "fraction within 1.96 sd: {frac}");
}

fn random_q(tree: &LabeledTree, weights: &[f64]) -> QMap {
    let mut q = QMap::new();
    for (i, v) in tree.internal_vertices().iter().enumerate() {
        let a = weights[(2 * i) % weights.len()];
        let b = weights[(2 * i + 1) % weights.len()];
        q.insert(v.child(1), a / (a + b));
        q.insert(v.child(2), b / (a + b));
    }
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn variance_matches_delta_method(n in 1usize..40, weights in prop::collection::vec(0.05f64..1.0, 8..32), pick in prop::collection::vec(any::<bool>(), 64)) {
        let tree = refine_budgeted(&toy_1d(), n).unwrap().tree;
        let q = random_q(&tree, &weights);
        let all: Vec<VertexAddress> = tree.leaves().map(|(u, _)| u.clone()).collect();
        let leaves: Vec<VertexAddress> = all.iter().enumerate().filter(|(i, _)| pick[i % pick.len()]).map(|(_, u)| u.clone()).collect();
        let internal: Vec<Vec<u32>> = tree.internal_vertices().iter().map(|v| v.path().to_vec()).collect();
        let qh: HashMap<Vec<u32>, f64> = q.iter().map(|(k, v)| (k.path().to_vec(), *v)).collect();
        let leaf_paths: Vec<Vec<u32>> = leaves.iter().map(|u| u.path().to_vec()).collect();
        let reference = common::delta_method_variance(&internal, 2, &qh, &leaf_paths);
        let lib = asymptotic_variance(&q, &leaves).unwrap();
        prop_assert!((lib - reference).abs() <= 1e-12 + 1e-9 * reference.abs(), "{lib} vs {reference}");
    }
}
