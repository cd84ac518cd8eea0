//! Small numerical toolbox shared by the estimators: BFGS minimization with
//! backtracking line search, golden-section search and Gauss-Hermite rules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_inf_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iterations: usize,
    pub rel_obj_tol: f64,
    pub grad_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            rel_obj_tol: 1e-10,
            grad_tol: 1e-8,
        }
    }
}

/// Minimize `f` (value and gradient) from `x0` by BFGS with Armijo
/// backtracking. Accepted steps never increase the objective.
pub fn bfgs<F>(mut f: F, x0: &[f64], opts: BfgsOptions) -> OptimResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let (mut fx, g0) = f(x.as_slice());
    let mut g = DVector::from_vec(g0);
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut converged = false;
    let mut iter = 0;

    while iter < opts.max_iterations {
        iter += 1;
        if g.amax() < opts.grad_tol {
            converged = true;
            break;
        }
        let mut dir = -(&h_inv * &g);
        if dir.dot(&g) >= 0.0 {
            // curvature update went bad; reset to steepest descent
            h_inv = DMatrix::identity(n, n);
            dir = -g.clone();
        }

        let slope = dir.dot(&g);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let x_new = &x + &dir * step;
            let (f_new, g_new) = f(x_new.as_slice());
            if f_new.is_finite() && f_new <= fx + 1e-4 * step * slope {
                accepted = Some((x_new, f_new, DVector::from_vec(g_new)));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            // line search failed; treat as converged at best iterate
            break;
        };

        let s = &x_new - &x;
        let yk = &g_new - &g;
        let sy = s.dot(&yk);
        if sy > 1e-12 {
            // BFGS inverse update
            let rho = 1.0 / sy;
            let hy = &h_inv * &yk;
            let yhy = yk.dot(&hy);
            let ss = &s * s.transpose();
            let hys = &hy * s.transpose();
            h_inv = &h_inv + ss * (rho * (1.0 + rho * yhy)) - (&hys + hys.transpose()) * rho;
        }

        let rel_change = (fx - f_new).abs() / fx.abs().max(1.0);
        x = x_new;
        g = g_new;
        fx = f_new;
        if rel_change < opts.rel_obj_tol {
            converged = true;
            break;
        }
    }

    OptimResult {
        x: x.as_slice().to_vec(),
        value: fx,
        grad_inf_norm: g.amax(),
        iterations: iter,
        converged,
    }
}

/// Golden-section minimization of a univariate function on `[lo, hi]`.
pub fn golden_section<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, tol: f64) -> f64 {
    let inv_phi = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a) > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Gauss-Hermite nodes and weights for weight function exp(-x^2), computed
/// from the eigen-decomposition of the Jacobi matrix.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        jac[(k - 1, k)] = b;
        jac[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let node = eig.eigenvalues[i];
            let w = std::f64::consts::PI.sqrt() * eig.eigenvectors[(0, i)].powi(2);
            (node, w)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Central finite-difference gradient, used as an independent oracle in tests.
pub fn finite_difference_gradient<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for k in 0..x.len() {
        let h = step * (1.0 + x[k].abs());
        xp[k] = x[k] + h;
        let fp = f(&xp);
        xp[k] = x[k] - h;
        let fm = f(&xp);
        xp[k] = x[k];
        g[k] = (fp - fm) / (2.0 * h);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bfgs_minimizes_rosenbrock() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ];
            (v, g)
        };
        let res = bfgs(f, &[-1.2, 1.0], BfgsOptions::default());
        assert!(res.converged);
        assert!((res.x[0] - 1.0).abs() < 1e-5);
        assert!((res.x[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn golden_section_finds_quadratic_min() {
        let m = golden_section(|x| (x - 0.3).powi(2), 0.0, 1.0, 1e-10);
        assert!((m - 0.3).abs() < 1e-8);
    }

    #[test]
    fn gauss_hermite_moments() {
        // integral x^k exp(-x^2) dx for k = 0, 2, 4
        for n in [5, 9, 15] {
            let (nodes, weights) = gauss_hermite(n);
            let m0: f64 = weights.iter().sum();
            let m2: f64 = nodes.iter().zip(&weights).map(|(x, w)| w * x * x).sum();
            let m4: f64 = nodes.iter().zip(&weights).map(|(x, w)| w * x.powi(4)).sum();
            let sqrt_pi = std::f64::consts::PI.sqrt();
            assert!((m0 - sqrt_pi).abs() < 1e-12);
            assert!((m2 - 0.5 * sqrt_pi).abs() < 1e-12);
            assert!((m4 - 0.75 * sqrt_pi).abs() < 1e-11);
        }
    }
}
