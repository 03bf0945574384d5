//! Reference computations written independently of the library.
#![allow(dead_code)]

use std::collections::HashMap;

const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Toy limit-state function, term by term.
pub fn toy_g(x: f64) -> f64 {
    let linear = 0.8 * x - 0.3;
    let spike = if x == 0.0 { 1.0 } else { (-11.534 * (1.95 * x.ln()).exp()).exp() };
    let bump = (-2.0 * (0.9 - x) * (0.9 - x)).exp();
    linear + spike + bump
}

fn upper_tail(z: f64) -> f64 {
    0.5 * libm::erfc(z / SQRT_2)
}

/// `P(X ∈ [a, b])` for `N(1/5, 1/25)` restricted to `[0, 1]`.
pub fn toy_mass(a: f64, b: f64) -> f64 {
    let z = |x: f64| (x - 0.2) / 0.2;
    (upper_tail(z(a)) - upper_tail(z(b))) / (upper_tail(z(0.0)) - upper_tail(z(1.0)))
}

/// Sup of the normalized toy density.
pub fn toy_density_sup() -> f64 {
    let normalizer = 0.2 * (2.0 * std::f64::consts::PI).sqrt() * (upper_tail(-1.0) - upper_tail(4.0));
    1.0 / normalizer
}

/// The crossing `g(x*) = 1.3` in the failure tail, by bisection.
pub fn toy_crossing() -> f64 {
    let (mut lo, mut hi) = (0.7, 0.9);
    assert!(toy_g(lo) < 1.3 && toy_g(hi) > 1.3);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if toy_g(mid) > 1.3 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `P(g(X) > 1.3) = P(X > x*)`; the failure set is `(x*, 1]`.
pub fn toy_p_exact() -> f64 {
    // g - T is negative on [0, x*) on a fine grid
    for i in 0..10_000 {
        let x = i as f64 / 10_000.0 * toy_crossing();
        assert!(toy_g(x) < 1.3, "second crossing near {x}");
    }
    toy_mass(toy_crossing(), 1.0)
}

/// Interval of a 1-D Neveu path.
pub fn interval_of(path: &[u32]) -> (f64, f64) {
    let (mut a, mut w) = (0.0, 1.0);
    for &i in path {
        w /= 2.0;
        if i == 2 {
            a += w;
        }
    }
    (a, a + w)
}

/// Exact conditional child probability for a 1-D toy vertex.
pub fn toy_q(path: &[u32]) -> f64 {
    let (a, b) = interval_of(path);
    let (pa, pb) = interval_of(&path[..path.len() - 1]);
    toy_mass(a, b) / toy_mass(pa, pb)
}

/// Delta-method variance `Σ_w ∇_w F Γ_w ∇_w F^T` of `F(q) = Σ_{u ∈ S} Π q`,
/// with the multinomial matrices `Γ_w = diag(q) - q q^T` written out.
pub fn delta_method_variance(
    internal: &[Vec<u32>],
    arity: u32,
    q: &HashMap<Vec<u32>, f64>,
    leaves: &[Vec<u32>],
) -> f64 {
    let p = |u: &Vec<u32>| (1..=u.len()).map(|k| q[&u[..k].to_vec()]).product::<f64>();
    let mut total = 0.0;
    for w in internal {
        let children: Vec<Vec<u32>> = (1..=arity)
            .map(|i| {
                let mut c = w.clone();
                c.push(i);
                c
            })
            .collect();
        let qs: Vec<f64> = children.iter().map(|c| q[c]).collect();
        let m = qs.len();
        let mut gamma = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in 0..m {
                gamma[i][j] = if i == j { qs[i] } else { 0.0 } - qs[i] * qs[j];
            }
        }
        let grad: Vec<f64> = children
            .iter()
            .zip(&qs)
            .map(|(c, &qc)| {
                leaves
                    .iter()
                    .filter(|u| u.len() >= c.len() && u[..c.len()] == c[..])
                    .map(|u| p(u) / qc)
                    .sum()
            })
            .collect();
        for i in 0..m {
            for j in 0..m {
                total += grad[i] * gamma[i][j] * grad[j];
            }
        }
    }
    total
}

pub fn mean_and_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}
