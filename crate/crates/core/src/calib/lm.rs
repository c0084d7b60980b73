//! Levenberg–Marquardt over parameter states that live on a manifold
//! (rotations are updated multiplicatively, so the state is not a flat
//! vector; the problem supplies a retraction).

use nalgebra::{DMatrix, DVector};

/// A nonlinear least-squares problem `min ½‖r(x)‖²`.
pub trait Problem {
    type State: Clone;
    fn residuals(&self, state: &Self::State) -> DVector<f64>;
    /// Jacobian of the residuals with respect to the local increment
    /// accepted by [`Problem::retract`].
    fn jacobian(&self, state: &Self::State) -> DMatrix<f64>;
    fn retract(&self, state: &Self::State, delta: &DVector<f64>) -> Self::State;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmConfig {
    pub initial_lambda: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub max_iterations: usize,
    /// Stop when an accepted step changes the cost by less than this fraction.
    pub cost_tolerance: f64,
    /// Stop when the step norm drops below this value.
    pub step_tolerance: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            initial_lambda: 1e-3,
            lambda_up: 10.0,
            lambda_down: 10.0,
            max_iterations: 200,
            cost_tolerance: 1e-12,
            step_tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmReport {
    pub iterations: usize,
    pub converged: bool,
    /// Sum of squared residuals after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

impl LmReport {
    pub fn final_cost(&self) -> f64 {
        *self.cost_history.last().expect("history holds the initial cost")
    }
}

const LAMBDA_MAX: f64 = 1e16;

/// Runs Marquardt-damped Gauss–Newton: each iteration solves
/// `(JᵀJ + λ·diag(JᵀJ)) δ = −Jᵀr`, accepts the step only if the cost
/// drops, and rescales λ accordingly.
pub fn levenberg_marquardt<P: Problem>(problem: &P, start: P::State, cfg: &LmConfig) -> (P::State, LmReport) {
    let mut state = start;
    let mut r = problem.residuals(&state);
    let mut cost = r.norm_squared();
    let mut lambda = cfg.initial_lambda;
    let mut report = LmReport { iterations: 0, converged: false, cost_history: vec![cost] };
    if cost == 0.0 {
        report.converged = true;
        return (state, report);
    }
    while report.iterations < cfg.max_iterations {
        report.iterations += 1;
        let j = problem.jacobian(&state);
        let jtj = j.transpose() * &j;
        let g = j.transpose() * &r;
        let diag_floor = jtj.diagonal().max() * 1e-15;
        let mut accepted = false;
        while lambda <= LAMBDA_MAX {
            let mut a = jtj.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += lambda * jtj[(i, i)].max(diag_floor);
            }
            let Some(delta) = a.cholesky().map(|c| -c.solve(&g)) else {
                lambda *= cfg.lambda_up;
                continue;
            };
            let candidate = problem.retract(&state, &delta);
            let r_new = problem.residuals(&candidate);
            let cost_new = r_new.norm_squared();
            if cost_new.is_finite() && cost_new < cost {
                let rel = (cost - cost_new) / cost;
                state = candidate;
                r = r_new;
                cost = cost_new;
                report.cost_history.push(cost);
                lambda = (lambda / cfg.lambda_down).max(1e-15);
                accepted = true;
                if rel < cfg.cost_tolerance || delta.norm() < cfg.step_tolerance || cost == 0.0 {
                    report.converged = true;
                    return (state, report);
                }
                break;
            }
            if delta.norm() < cfg.step_tolerance {
                report.converged = true;
                return (state, report);
            }
            lambda *= cfg.lambda_up;
        }
        if !accepted {
            // No damping level decreases the cost: the current state is a
            // minimum to working precision.
            report.converged = true;
            return (state, report);
        }
    }
    (state, report)
}

/// Central finite-difference Jacobian through the problem's retraction,
/// used to check analytic Jacobians.
pub fn numeric_jacobian<P: Problem>(problem: &P, state: &P::State, n_params: usize, h: f64) -> DMatrix<f64> {
    let r0 = problem.residuals(state);
    let mut j = DMatrix::zeros(r0.len(), n_params);
    for k in 0..n_params {
        let mut d = DVector::zeros(n_params);
        d[k] = h;
        let plus = problem.residuals(&problem.retract(state, &d));
        d[k] = -h;
        let minus = problem.residuals(&problem.retract(state, &d));
        j.set_column(k, &((plus - minus) / (2.0 * h)));
    }
    j
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Rosenbrock as residuals (1 − x, 10(y − x²)).
    struct Rosenbrock;

    impl Problem for Rosenbrock {
        type State = DVector<f64>;
        fn residuals(&self, s: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![1.0 - s[0], 10.0 * (s[1] - s[0] * s[0])])
        }
        fn jacobian(&self, s: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, -20.0 * s[0], 10.0])
        }
        fn retract(&self, s: &DVector<f64>, d: &DVector<f64>) -> DVector<f64> {
            s + d
        }
    }

    #[test]
    fn solves_rosenbrock_with_monotone_cost() {
        let (x, rep) = levenberg_marquardt(&Rosenbrock, DVector::from_vec(vec![-1.2, 1.0]), &LmConfig::default());
        assert!(rep.converged);
        assert!((x[0] - 1.0).abs() < 1e-8 && (x[1] - 1.0).abs() < 1e-8);
        assert!(rep.cost_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let cfg = LmConfig { max_iterations: 2, ..LmConfig::default() };
        let (_, rep) = levenberg_marquardt(&Rosenbrock, DVector::from_vec(vec![-1.2, 1.0]), &cfg);
        assert!(!rep.converged);
        assert_eq!(rep.iterations, 2);
    }

    #[test]
    fn numeric_jacobian_agrees() {
        let s = DVector::from_vec(vec![0.3, -0.7]);
        let n = numeric_jacobian(&Rosenbrock, &s, 2, 1e-6);
        assert!((n - Rosenbrock.jacobian(&s)).abs().max() < 1e-6);
    }
}
