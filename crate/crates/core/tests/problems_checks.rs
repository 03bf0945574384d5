mod common;

use certibound::problems::{
    adversarial_1d_from_refinement, adversarial_by_id, adversarial_high_d_from_refinement, halfspace_d2,
    lipschitz_check, naive_mc, oracle_value, problem_by_id, toy_1d, ProblemSpec, TOY_REFERENCE_P,
};
use certibound::refinement::refine_budgeted;

/// Fraction of a `cells^d` midpoint grid over `[lo, lo + side]^d` where `g > T`,
/// times the volume.
fn grid_failure_volume(problem: &ProblemSpec, lo: &[f64], side: f64, cells: usize) -> f64 {
    let h = side / cells as f64;
    let dim = lo.len();
    let total = cells.pow(dim as u32);
    let mut hits = 0usize;
    let mut x = vec![0.0; dim];
    for m in 0..total {
        let mut rest = m;
        for (axis, xi) in x.iter_mut().enumerate() {
            *xi = lo[axis] + ((rest % cells) as f64 + 0.5) * h;
            rest /= cells;
        }
        if problem.evaluate_uncounted(&x) > problem.threshold() {
            hits += 1;
        }
    }
    hits as f64 / total as f64 * side.powi(dim as i32)
}

#[test]
fn per_cube_failure_volume_in_two_dimensions() {
    let inst = adversarial_high_d_from_refinement(2, 3).unwrap();
    let guaranteed = 3f64.powi(-2) * 2f64.powi(-6);
    for cube in &inst.bump_cubes {
        let s = cube.side();
        // {2 h_Q(x) > x^1} inside a face cube: x^1 < 2s/3, and a band of
        // width s - x^1 along the other axis
        let exact = (s * s - (s / 3.0).powi(2)) / 2.0;
        let measured = grid_failure_volume(&inst.perturbed, &cube.lower_corner(), s, 600);
        assert!((measured - exact).abs() <= 1e-2 * exact, "{measured} vs {exact}");
        assert!(measured >= guaranteed, "{measured} < {guaranteed}");
    }
}

#[test]
fn one_dimensional_failure_mass_on_a_fine_grid() {
    let n = 6;
    let inst = adversarial_1d_from_refinement(n).unwrap();
    let mass = grid_failure_volume(&inst.perturbed, &[0.0], 1.0, 1_000_000);
    assert!(mass >= (-(n as f64)).exp2() / 5.0, "mass {mass}");
    assert!((mass - inst.failure_mass_lower_bound).abs() <= 2e-6);
}

#[test]
fn adversarial_instances_agree_on_refinement_points() {
    for inst in [adversarial_high_d_from_refinement(2, 4).unwrap(), adversarial_1d_from_refinement(6).unwrap()] {
        for x in &inst.points {
            assert_eq!(inst.base.evaluate_uncounted(x), inst.perturbed.evaluate_uncounted(x));
        }
    }
}

#[test]
fn naive_mc_at_one_million_samples() {
    let n = 1_000_000;
    let result = naive_mc(&toy_1d(), n, 9).unwrap();
    let p = TOY_REFERENCE_P;
    let band = 4.0 * (p * (1.0 - p) / n as f64).sqrt();
    assert!((result.estimate - p).abs() <= band, "{} vs {p}", result.estimate);
}

#[test]
fn declared_lipschitz_constants_hold() {
    let problems = vec![
        toy_1d(),
        halfspace_d2(),
        adversarial_by_id("adversarial-d2-j4").unwrap().perturbed,
        adversarial_by_id("adversarial-1d-n6").unwrap().perturbed,
        adversarial_by_id("adversarial-1d-n6").unwrap().base,
    ];
    for problem in &problems {
        let worst = lipschitz_check(problem, 1_000_000, 4);
        assert!(worst <= problem.lipschitz(), "{}: {worst} > {}", problem.id(), problem.lipschitz());
    }
    // close pairs probe the steepest local slopes
    for problem in &problems {
        let d = problem.dim();
        let steps: usize = if d == 1 { 200_000 } else { 700 };
        let h = 1.0 / steps as f64;
        let eps = 1e-7;
        let total = steps.pow(d as u32);
        for m in 0..total {
            let mut rest = m;
            let x: Vec<f64> = (0..d)
                .map(|_| {
                    let c = ((rest % steps) as f64 + 0.5) * h;
                    rest /= steps;
                    c
                })
                .collect();
            for axis in 0..d {
                let mut y = x.clone();
                y[axis] = (y[axis] + eps).min(1.0);
                let dist = y[axis] - x[axis];
                let ratio = (problem.evaluate_uncounted(&x) - problem.evaluate_uncounted(&y)).abs() / dist;
                assert!(ratio <= problem.lipschitz() * (1.0 + 1e-6), "{} at {x:?}: {ratio}", problem.id());
            }
        }
    }
}

#[test]
fn call_counters_track_only_counted_evaluations() {
    let toy = problem_by_id("toy1d").unwrap();
    toy.evaluate_uncounted(&[0.3]);
    assert_eq!(toy.call_count(), 0);
    toy.evaluate(&[0.3]);
    assert_eq!(toy.call_count(), 1);
    let fresh = problem_by_id("toy1d").unwrap();
    let run = refine_budgeted(&fresh, 35).unwrap();
    assert_eq!(fresh.call_count(), run.eval_count as u64);
    oracle_value(&fresh, 64).unwrap();
    assert_eq!(fresh.call_count(), 35);
}

#[test]
fn oracle_agrees_with_closed_forms() {
    let toy = oracle_value(&toy_1d(), 64).unwrap();
    let exact = common::toy_p_exact();
    assert!((toy - exact).abs() <= 1e-6 * exact, "{toy} vs {exact}");
    assert!((oracle_value(&halfspace_d2(), 64).unwrap() - 0.5).abs() <= 1e-12);
}
