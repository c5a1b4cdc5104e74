//! Gradient descent with Armijo backtracking over one variable block.
//!
//! Used by every descent-based solver: latent and image blocks of the MAP
//! method, range search, decoder adaptation, and least squares. Objective
//! and gradient callbacks may return non-finite values; the line search
//! treats them as failed trials, so numerical blow-ups surface as a
//! `stalled` outcome instead of a panic.

use ndarray::{Array, Dimension};

const ARMIJO_C: f64 = 1e-4;
const SHRINK: f64 = 0.5;
const INITIAL_STEP: f64 = 1.0;
const MAX_SHRINKS: usize = 50;

#[derive(Debug, Clone, Copy)]
pub struct DescentOptions {
    pub max_iters: usize,
    /// Stop once the relative objective decrease of a step drops below
    /// this; 0 disables early stopping.
    pub tol: f64,
}

#[derive(Debug, Clone)]
pub struct DescentOutcome<D: Dimension> {
    pub x: Array<f64, D>,
    /// Objective at the start plus after every accepted step.
    pub trace: Vec<f64>,
    pub iterations: usize,
    /// The line search failed ([`MAX_SHRINKS`] rejections) or a gradient
    /// went non-finite.
    pub stalled: bool,
}

/// Minimizes `f` from `x0` by steepest descent with backtracking: step
/// acceptance requires f(x − t·g) ≤ f(x) − c·t·‖g‖², halving t from 1
/// until it holds. A zero gradient counts as converged.
pub fn backtracking_descent<D: Dimension>(
    f: impl Fn(&Array<f64, D>) -> f64,
    grad: impl Fn(&Array<f64, D>) -> Array<f64, D>,
    x0: Array<f64, D>,
    opts: &DescentOptions,
) -> DescentOutcome<D> {
    let mut x = x0;
    let mut fx = f(&x);
    let mut trace = vec![fx];
    if !fx.is_finite() {
        return DescentOutcome { x, trace, iterations: 0, stalled: true };
    }
    for iter in 0..opts.max_iters {
        let g = grad(&x);
        let gnorm2: f64 = g.iter().map(|v| v * v).sum();
        if !gnorm2.is_finite() {
            return DescentOutcome { x, trace, iterations: iter, stalled: true };
        }
        if gnorm2 == 0.0 {
            return DescentOutcome { x, trace, iterations: iter, stalled: false };
        }
        let mut t = INITIAL_STEP;
        let mut accepted = None;
        for _ in 0..=MAX_SHRINKS {
            let candidate = &x - &(t * &g);
            let fc = f(&candidate);
            if fc.is_finite() && fc <= fx - ARMIJO_C * t * gnorm2 {
                accepted = Some((candidate, fc));
                break;
            }
            t *= SHRINK;
        }
        let Some((next, fnext)) = accepted else {
            return DescentOutcome { x, trace, iterations: iter, stalled: true };
        };
        let decrease = fx - fnext;
        x = next;
        fx = fnext;
        trace.push(fx);
        if decrease < opts.tol * fx.abs().max(1e-12) {
            return DescentOutcome { x, trace, iterations: iter + 1, stalled: false };
        }
    }
    DescentOutcome { x, trace, iterations: opts.max_iters, stalled: false }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array1};

    #[test]
    fn quadratic_converges() {
        let out = backtracking_descent(
            |x: &Array1<f64>| 0.5 * x.iter().map(|v| v * v).sum::<f64>(),
            |x| x.clone(),
            Array1::ones(6),
            &DescentOptions { max_iters: 50, tol: 0.0 },
        );
        assert!(!out.stalled);
        assert!(out.x.iter().all(|v| v.abs() < 1e-6), "end point {:?}", out.x);
        assert!(out.iterations <= 50);
    }

    #[test]
    fn trace_is_monotone() {
        let out = backtracking_descent(
            |x: &Array1<f64>| {
                let (a, b) = (x[0], x[1]);
                (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
            },
            |x| {
                let (a, b) = (x[0], x[1]);
                arr1(&[
                    -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                    200.0 * (b - a * a),
                ])
            },
            arr1(&[-1.2, 1.0]),
            &DescentOptions { max_iters: 500, tol: 0.0 },
        );
        for w in out.trace.windows(2) {
            assert!(w[1] <= w[0], "objective rose from {} to {}", w[0], w[1]);
        }
    }

    #[test]
    fn rosenbrock_benchmark() {
        let f = |x: &Array1<f64>| {
            let (a, b) = (x[0], x[1]);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        };
        let out = backtracking_descent(
            f,
            |x| {
                let (a, b) = (x[0], x[1]);
                arr1(&[
                    -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                    200.0 * (b - a * a),
                ])
            },
            arr1(&[-1.2, 1.0]),
            &DescentOptions { max_iters: 10_000, tol: 0.0 },
        );
        assert!(
            f(&out.x) < 1e-4,
            "Rosenbrock ended at {:?} with f = {}",
            out.x,
            f(&out.x)
        );
    }

    #[test]
    fn inconsistent_gradient_stalls() {
        // A "gradient" pointing uphill can never satisfy Armijo.
        let out = backtracking_descent(
            |x: &Array1<f64>| x.iter().map(|v| v * v).sum::<f64>(),
            |x| -2.0 * x,
            Array1::ones(3),
            &DescentOptions { max_iters: 10, tol: 0.0 },
        );
        assert!(out.stalled);
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn non_finite_objective_stalls_immediately() {
        let out = backtracking_descent(
            |_: &Array1<f64>| f64::NAN,
            |x| x.clone(),
            Array1::ones(2),
            &DescentOptions { max_iters: 10, tol: 0.0 },
        );
        assert!(out.stalled);
        assert_eq!(out.iterations, 0);
    }
}
