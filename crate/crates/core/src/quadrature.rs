//! Gauss–Legendre quadrature for cumulative hazards.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Nodes and weights on `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule<T> {
    pub nodes: Vec<T>,
    pub weights: Vec<T>,
}

impl<T: Real> QuadratureRule<T> {
    /// `n`-point Gauss–Legendre rule (exact for polynomials of degree `2n - 1`).
    pub fn gauss_legendre(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("quadrature needs at least one node".into()));
        }
        let (nodes, weights) = gauss_legendre_f64(n);
        Ok(Self {
            nodes: nodes.into_iter().map(T::lit).collect(),
            weights: weights.into_iter().map(T::lit).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes and weights mapped to `[a, b]`.
    pub fn on_interval(&self, a: T, b: T) -> impl Iterator<Item = (T, T)> + '_ {
        let half = (b - a) * T::lit(0.5);
        let mid = (a + b) * T::lit(0.5);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&x, &w)| (mid + half * x, half * w))
    }

    pub fn integrate<F: FnMut(T) -> T>(&self, a: T, b: T, mut f: F) -> T {
        self.on_interval(a, b)
            .fold(T::zero(), |acc, (x, w)| acc + w * f(x))
    }
}

fn gauss_legendre_f64(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        // Chebyshev-like initial guess, refined by Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
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
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// `(P_n(x), P_n'(x))` via the three-term recurrence.
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
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn weights_sum_to_two_and_nodes_increase() {
        for n in 1..=20 {
            let r = QuadratureRule::<f64>::gauss_legendre(n).unwrap();
            assert_abs_diff_eq!(r.weights.iter().sum::<f64>(), 2.0, epsilon = 1e-13);
            assert!(r.nodes.windows(2).all(|w| w[0] < w[1]));
            assert!(r.nodes.iter().all(|x| x.abs() < 1.0));
            assert!(r.weights.iter().all(|w| *w > 0.0));
        }
        assert!(QuadratureRule::<f64>::gauss_legendre(0).is_err());
    }

    #[test]
    fn exact_for_polynomials() {
        let r = QuadratureRule::<f64>::gauss_legendre(7).unwrap();
        // degree 13 monomial on [0, 2]
        let v = r.integrate(0.0, 2.0, |x| x.powi(13));
        assert_abs_diff_eq!(v, 2f64.powi(14) / 14.0, epsilon = 1e-9);
        let t = 50.0;
        let v = r.integrate(0.0, t, |u| u + 1.0);
        assert_abs_diff_eq!(v, t * t / 2.0 + t, epsilon = 1e-10);
    }

    #[test]
    fn known_three_point_rule() {
        let r = QuadratureRule::<f64>::gauss_legendre(3).unwrap();
        assert_abs_diff_eq!(r.nodes[2], (0.6f64).sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(r.weights[1], 8.0 / 9.0, epsilon = 1e-15);
    }
}
