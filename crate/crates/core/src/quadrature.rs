//! Gauss–Legendre rules on `[0, 1]`, tensor-product cubature on unit cubes and
//! the Gauss-point count rule for the stiffness assembly.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 64;

/// `n`-point Gauss–Legendre rule mapped to `[0, 1]`.
#[derive(Debug, Clone)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussRule {
    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// Legendre polynomial `P_n(x)` and its derivative.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

fn compute_rule(n: usize) -> GaussRule {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
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
        if d.is_finite() {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // x is the i-th largest root; its mirror is the i-th smallest.
        nodes[i] = 0.5 * (1.0 - x);
        nodes[n - 1 - i] = 0.5 * (1.0 + x);
        weights[i] = 0.5 * w;
        weights[n - 1 - i] = 0.5 * w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.5;
    }
    GaussRule { nodes, weights }
}

fn table() -> &'static [GaussRule] {
    static TABLE: OnceLock<Vec<GaussRule>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0..=MAX_ORDER)
            .map(|n| {
                if n == 0 {
                    GaussRule {
                        nodes: vec![],
                        weights: vec![],
                    }
                } else {
                    compute_rule(n)
                }
            })
            .collect()
    })
}

/// Cached Gauss–Legendre rule with `n` points on `[0, 1]`.
pub fn gauss_rule(n: usize) -> Result<&'static GaussRule> {
    if n == 0 || n > MAX_ORDER {
        return Err(Error::InvalidOrder(n));
    }
    Ok(&table()[n])
}

/// Tensor-product Gauss quadrature over `[0,1]^k`, `k = orders.len() <= 6`.
///
/// Nodes are visited in lexicographic order with the last axis fastest.
pub fn tensor_integrate(mut f: impl FnMut(&[f64]) -> f64, orders: &[usize]) -> Result<f64> {
    let k = orders.len();
    if k == 0 || k > 6 {
        return Err(Error::InvalidParameter(format!("tensor dimension {k} outside 1..=6")));
    }
    let rules = orders.iter().map(|&n| gauss_rule(n)).collect::<Result<Vec<_>>>()?;
    let mut idx = vec![0usize; k];
    let mut x = vec![0.0; k];
    let mut sum = 0.0;
    loop {
        let mut w = 1.0;
        for d in 0..k {
            x[d] = rules[d].nodes[idx[d]];
            w *= rules[d].weights[idx[d]];
        }
        let v = f(&x);
        if !v.is_finite() {
            return Err(Error::IntegrandError {
                node: x.clone(),
                value: v,
            });
        }
        sum += w * v;
        let mut d = k;
        loop {
            if d == 0 {
                return Ok(sum);
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < rules[d].n() {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Default Bernstein parameter for order selection.
pub const DEFAULT_RHO: f64 = 0.75;

/// Gauss orders for touching tetrahedron pairs (`n1`) and tetrahedron–panel
/// pairs (`n2`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderPlan {
    pub n1: usize,
    pub n2: usize,
    pub rho1: f64,
    pub rho2: f64,
    /// Smoothness index the orders were derived from; `None` for fixed orders.
    pub l: Option<f64>,
}

impl OrderPlan {
    pub fn fixed(n1: usize, n2: usize) -> Self {
        OrderPlan {
            n1,
            n2,
            rho1: DEFAULT_RHO,
            rho2: DEFAULT_RHO,
            l: None,
        }
    }
}

/// Smallest orders with `n1 >= (3+l+s)|ln h| / (2 ln 2ρ1)` and
/// `n2 >= (2+l+s)|ln h| / (2 ln 2ρ2)`, clamped to `[2, 64]`.
pub fn order_plan(h: f64, l: f64, s: f64, rho1: f64, rho2: f64) -> Result<OrderPlan> {
    if !(h > 0.0 && h < 1.0) {
        return Err(Error::InvalidParameter(format!("h = {h} not in (0,1)")));
    }
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::InvalidParameter(format!("s = {s} not in (0,1)")));
    }
    if !(l > s) {
        return Err(Error::InvalidParameter(format!("l = {l} must exceed s = {s}")));
    }
    if !(rho1 > 0.5 && rho2 > 0.5) {
        return Err(Error::InvalidParameter(format!(
            "rho1 = {rho1}, rho2 = {rho2} must exceed 1/2"
        )));
    }
    let lh = h.ln().abs();
    let b1 = 0.5 * (3.0 + l + s) * lh / (2.0 * rho1).ln();
    let b2 = 0.5 * (2.0 + l + s) * lh / (2.0 * rho2).ln();
    let clamp = |b: f64| (b.ceil() as usize).clamp(2, MAX_ORDER);
    Ok(OrderPlan {
        n1: clamp(b1),
        n2: clamp(b2),
        rho1,
        rho2,
        l: Some(l),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midpoint_and_two_point_rules() {
        let r = gauss_rule(1).unwrap();
        assert_eq!(r.nodes, vec![0.5]);
        assert_eq!(r.weights, vec![1.0]);
        let r = gauss_rule(2).unwrap();
        let s3 = 3f64.sqrt();
        assert!((r.nodes[0] - (3.0 - s3) / 6.0).abs() < 1e-15);
        assert!((r.nodes[1] - (3.0 + s3) / 6.0).abs() < 1e-15);
        assert!((r.weights[0] - 0.5).abs() < 1e-15);
        assert!((r.integrate(|x| x.powi(3)) - 0.25).abs() <= 1e-15);
    }

    #[test]
    fn rules_are_normalized_and_sorted() {
        for n in 1..=MAX_ORDER {
            let r = gauss_rule(n).unwrap();
            let sum: f64 = r.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-14, "n={n}");
            assert!(r.nodes.windows(2).all(|w| w[0] < w[1]), "n={n}");
            assert!(r.nodes[0] > 0.0 && r.nodes[n - 1] < 1.0);
        }
    }

    #[test]
    fn degree_exactness_boundary() {
        for n in 1..=20 {
            let r = gauss_rule(n).unwrap();
            for p in 0..=(2 * n - 1) {
                let exact = 1.0 / (p as f64 + 1.0);
                let got = r.integrate(|x| x.powi(p as i32));
                assert!((got - exact).abs() <= 5.0 * f64::EPSILON, "n={n} p={p}");
            }
            if n <= 8 {
                let p = 2 * n;
                let err = (r.integrate(|x| x.powi(p as i32)) - 1.0 / (p as f64 + 1.0)).abs();
                assert!(err > 1e-10, "n={n} unexpectedly exact for degree {p}");
            }
        }
    }

    #[test]
    fn order_out_of_range() {
        assert!(matches!(gauss_rule(0), Err(Error::InvalidOrder(0))));
        assert!(matches!(gauss_rule(65), Err(Error::InvalidOrder(65))));
    }

    #[test]
    fn tensor_examples() {
        let one = tensor_integrate(|_| 1.0, &[3, 4, 5]).unwrap();
        assert!((one - 1.0).abs() < 1e-14);
        let prod = tensor_integrate(|x| x[0] * x[1] * x[2], &[2, 2, 2]).unwrap();
        assert!((prod - 0.125).abs() < 1e-15);
        let e = tensor_integrate(|x| (x[0] + x[1]).exp(), &[8, 8]).unwrap();
        let exact = (std::f64::consts::E - 1.0).powi(2);
        assert!((e - exact).abs() < 1e-12);
    }

    #[test]
    fn tensor_reports_nan_node() {
        let err = tensor_integrate(|x| if x[0] > 0.5 { f64::NAN } else { 1.0 }, &[2]).unwrap_err();
        match err {
            Error::IntegrandError { node, .. } => assert!(node[0] > 0.5),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn order_plan_examples() {
        let p = order_plan(0.1, 1.0, 0.5, 0.75, 0.75).unwrap();
        assert_eq!(p.n1, 13);
        assert_eq!(p.n2, 10);
        let q = order_plan(0.05, 1.0, 0.5, 0.75, 0.75).unwrap();
        assert!(q.n1 > p.n1);
        assert!(order_plan(1.5, 1.0, 0.5, 0.75, 0.75).is_err());
        assert!(order_plan(0.1, 0.4, 0.5, 0.75, 0.75).is_err());
        assert!(order_plan(0.1, 1.0, 0.5, 0.5, 0.75).is_err());
    }

    #[test]
    fn order_plan_satisfies_bounds() {
        for &h in &[0.9, 0.5, 0.2, 0.1, 0.03] {
            for &s in &[0.2, 0.5, 0.8] {
                let l = 1.0;
                let p = order_plan(h, l, s, 0.75, 0.9).unwrap();
                let b1 = 0.5 * (3.0 + l + s) * h.ln().abs() / 1.5f64.ln();
                let b2 = 0.5 * (2.0 + l + s) * h.ln().abs() / 1.8f64.ln();
                assert!(p.n1 as f64 >= b1 && p.n2 as f64 >= b2);
                assert!(p.n1 >= 2 && p.n2 >= 2);
            }
        }
    }
}
