//! Gauss–Legendre rules.

use crate::error::{Error, Result};

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[0, 1]`, nodes ascending.
pub fn gauss_legendre_unit(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let (x, w) = gauss_legendre(n)?;
    Ok((
        x.iter().map(|v| 0.5 * (v + 1.0)).collect(),
        w.iter().map(|v| 0.5 * v).collect(),
    ))
}

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`, nodes ascending.
pub fn gauss_legendre(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n < 2 {
        return Err(Error::Config(format!(
            "quadrature needs at least 2 nodes, got {n}"
        )));
    }
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Chebyshev-type initial guess for the i-th largest root.
        let mut r = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, r);
            dp = d;
            let step = p / d;
            r -= step;
            if step.abs() <= 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, r);
        dp = if d != 0.0 { d } else { dp };
        let wi = 2.0 / ((1.0 - r * r) * dp * dp);
        x[i] = -r;
        x[n - 1 - i] = r;
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    Ok((x, w))
}

/// `(P_n(x), P_n'(x))` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
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

    #[test]
    fn two_point_rule() {
        let (x, w) = gauss_legendre(2).unwrap();
        let r = 1.0 / 3f64.sqrt();
        assert!((x[0] + r).abs() < 1e-15 && (x[1] - r).abs() < 1e-15);
        assert!((w[0] - 1.0).abs() < 1e-15 && (w[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn exact_on_polynomials_up_to_degree_2n_minus_1() {
        for n in [2usize, 3, 5, 16, 32] {
            let (x, w) = gauss_legendre_unit(n).unwrap();
            for deg in 0..(2 * n) {
                let q: f64 = x.iter().zip(&w).map(|(a, b)| b * a.powi(deg as i32)).sum();
                let exact = 1.0 / (deg as f64 + 1.0);
                assert!((q - exact).abs() < 1e-13, "n={n} deg={deg} q={q}");
            }
        }
    }

    #[test]
    fn nodes_ascending_inside_unit_interval() {
        let (x, w) = gauss_legendre_unit(16).unwrap();
        assert!(x.windows(2).all(|p| p[0] < p[1]));
        assert!(x[0] > 0.0 && x[15] < 1.0);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn smooth_integrand() {
        let (x, w) = gauss_legendre_unit(16).unwrap();
        let q: f64 = x.iter().zip(&w).map(|(a, b)| b * a.exp()).sum();
        assert!((q - (1f64.exp() - 1.0)).abs() < 1e-14);
    }

    #[test]
    fn rejects_single_node() {
        assert!(gauss_legendre(1).is_err());
    }
}
