//! Gauss–Legendre rules on [0, 1].

use std::f64::consts::PI;
use std::sync::OnceLock;

pub(crate) const MAX_ORDER: usize = 10;

/// Nodes and weights of the `n`-point Gauss–Legendre rule mapped to [0, 1].
///
/// Weights sum to one.
pub(crate) fn unit_rule(n: usize) -> &'static [(f64, f64)] {
    static RULES: OnceLock<Vec<Vec<(f64, f64)>>> = OnceLock::new();
    assert!((1..=MAX_ORDER).contains(&n), "Gauss order {n} not tabulated");
    let rules = RULES.get_or_init(|| (1..=MAX_ORDER).map(legendre_rule).collect());
    &rules[n - 1]
}

fn legendre_rule(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        // Tricomi initial guess, then Newton on P_n.
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((0.5 * (1.0 - x), 0.5 * w));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let nf = n as f64;
    (p1, nf * (x * p1 - p0) / (x * x - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_one_and_integrate_monomials() {
        for n in 1..=MAX_ORDER {
            let rule = unit_rule(n);
            let total: f64 = rule.iter().map(|&(_, w)| w).sum();
            assert!((total - 1.0).abs() < 1e-14);
            for k in 0..(2 * n) {
                let q: f64 = rule.iter().map(|&(x, w)| w * x.powi(k as i32)).sum();
                let exact = 1.0 / (k as f64 + 1.0);
                assert!((q - exact).abs() < 1e-13, "n={n} k={k}: {q} vs {exact}");
            }
        }
    }

    #[test]
    fn nodes_symmetric() {
        let rule = unit_rule(5);
        for i in 0..5 {
            assert!((rule[i].0 + rule[4 - i].0 - 1.0).abs() < 1e-15);
        }
    }
}
