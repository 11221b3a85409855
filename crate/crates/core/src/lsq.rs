//! Levenberg–Marquardt for dense nonlinear least squares.
//!
//! Minimizes `‖r(x)‖²` for a residual map `r: Rⁿ → Rᵐ`, `m ≥ n`. The normal
//! equations are damped Marquardt-style, `(JᵀJ + λ diag(JᵀJ)) δ = -Jᵀr`, with
//! λ divided by 10 after an accepted step and multiplied by 10 after a
//! rejected one. Without an analytic Jacobian, forward differences with step
//! `max(1e-7, 1e-7 |xᵢ|)` are used.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::scalar::{lit, to_f64, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LsqError {
    #[error("residual is NaN or infinite at parameters {params:?}")]
    NonFiniteResidual { params: Vec<f64> },
    #[error("problem declares {expected} {what} but got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{residuals} residuals cannot determine {params} parameters")]
    Underdetermined { params: usize, residuals: usize },
}

/// A least-squares objective.
pub trait LsqProblem<T: Real> {
    fn num_params(&self) -> usize;
    fn num_residuals(&self) -> usize;
    fn residuals(&self, x: &DVector<T>) -> DVector<T>;

    /// Analytic Jacobian `∂r/∂x` (m x n), if available.
    fn jacobian(&self, _x: &DVector<T>) -> Option<DMatrix<T>> {
        None
    }
}

/// Adapts a residual closure into an [`LsqProblem`].
pub struct FnProblem<F> {
    params: usize,
    residuals: usize,
    f: F,
}

impl<F> FnProblem<F> {
    pub fn new(params: usize, residuals: usize, f: F) -> Self {
        Self {
            params,
            residuals,
            f,
        }
    }
}

impl<T: Real, F: Fn(&DVector<T>) -> DVector<T>> LsqProblem<T> for FnProblem<F> {
    fn num_params(&self) -> usize {
        self.params
    }

    fn num_residuals(&self) -> usize {
        self.residuals
    }

    fn residuals(&self, x: &DVector<T>) -> DVector<T> {
        (self.f)(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmOptions<T: Real> {
    /// Stop when `‖Jᵀr‖∞` falls below this.
    pub gradient_tol: T,
    /// Stop when `‖δ‖ ≤ step_tol (‖x‖ + step_tol)`.
    pub step_tol: T,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub cost_tol: T,
    /// Bound on trial steps (accepted or rejected).
    pub max_iterations: usize,
    pub initial_damping: T,
}

impl<T: Real> Default for LmOptions<T> {
    fn default() -> Self {
        Self {
            gradient_tol: lit(1e-10),
            step_tol: lit(1e-12),
            cost_tol: lit(1e-15),
            max_iterations: 200,
            initial_damping: lit(1e-3),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientTol,
    StepTol,
    CostTol,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport<T: Real> {
    pub solution: DVector<T>,
    pub initial_cost: T,
    /// Sum of squared residuals at `solution`.
    pub final_cost: T,
    pub iterations: usize,
    pub converged: bool,
    pub termination: Termination,
    /// `‖Jᵀr‖∞` at the solution.
    pub gradient_norm: T,
}

fn check_finite<T: Real>(r: &DVector<T>, x: &DVector<T>) -> Result<(), LsqError> {
    if r.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LsqError::NonFiniteResidual {
            params: x.iter().map(|v| to_f64(*v)).collect(),
        })
    }
}

/// Forward-difference step for parameter value `x`.
fn fd_step<T: Real>(x: T) -> T {
    let floor = lit::<T>(1e-7).max(T::default_epsilon().sqrt());
    floor.max(floor * x.abs())
}

/// Forward-difference Jacobian of `problem` at `x`, reusing `r0 = r(x)`.
pub fn finite_difference_jacobian<T: Real, P: LsqProblem<T> + ?Sized>(
    problem: &P,
    x: &DVector<T>,
    r0: &DVector<T>,
) -> DMatrix<T> {
    let mut jac = DMatrix::zeros(r0.len(), x.len());
    let mut probe = x.clone();
    for j in 0..x.len() {
        let h = fd_step(x[j]);
        probe[j] = x[j] + h;
        let step = probe[j] - x[j];
        let r = problem.residuals(&probe);
        jac.column_mut(j).copy_from(&((r - r0) / step));
        probe[j] = x[j];
    }
    jac
}

/// Largest per-column relative difference between the analytic Jacobian and
/// forward differences, or `None` when the problem has no analytic Jacobian.
pub fn jacobian_relative_error<T: Real, P: LsqProblem<T> + ?Sized>(
    problem: &P,
    x: &DVector<T>,
) -> Option<T> {
    let analytic = problem.jacobian(x)?;
    let r0 = problem.residuals(x);
    let numeric = finite_difference_jacobian(problem, x, &r0);
    let tiny: T = lit(1e-12);
    Some(
        analytic
            .column_iter()
            .zip(numeric.column_iter())
            .map(|(a, n)| (a - n).norm() / a.norm().max(tiny))
            .fold(T::zero(), |acc, e| acc.max(e)),
    )
}

fn evaluate_jacobian<T: Real, P: LsqProblem<T> + ?Sized>(
    problem: &P,
    x: &DVector<T>,
    r: &DVector<T>,
) -> DMatrix<T> {
    problem
        .jacobian(x)
        .unwrap_or_else(|| finite_difference_jacobian(problem, x, r))
}

/// Runs Levenberg–Marquardt from `x0`.
pub fn solve_lm<T: Real, P: LsqProblem<T> + ?Sized>(
    problem: &P,
    x0: &DVector<T>,
    opts: &LmOptions<T>,
) -> Result<SolveReport<T>, LsqError> {
    let (n, m) = (problem.num_params(), problem.num_residuals());
    if x0.len() != n {
        return Err(LsqError::DimensionMismatch {
            what: "parameters",
            expected: n,
            actual: x0.len(),
        });
    }
    if m < n {
        return Err(LsqError::Underdetermined {
            params: n,
            residuals: m,
        });
    }

    let mut x = x0.clone();
    let mut r = problem.residuals(&x);
    if r.len() != m {
        return Err(LsqError::DimensionMismatch {
            what: "residuals",
            expected: m,
            actual: r.len(),
        });
    }
    check_finite(&r, &x)?;
    let initial_cost = r.norm_squared();
    let mut cost = initial_cost;
    let mut jac = evaluate_jacobian(problem, &x, &r);
    let mut lambda = opts.initial_damping;
    let mut iterations = 0;

    let finish = |x: DVector<T>, cost: T, gradient: T, iterations: usize, termination| {
        Ok(SolveReport {
            solution: x,
            initial_cost,
            final_cost: cost,
            iterations,
            converged: termination != Termination::MaxIter,
            termination,
            gradient_norm: gradient,
        })
    };

    loop {
        let gradient = jac.tr_mul(&r);
        let gradient_norm = gradient.amax();
        if gradient_norm < opts.gradient_tol {
            return finish(x, cost, gradient_norm, iterations, Termination::GradientTol);
        }

        let normal = jac.tr_mul(&jac);
        let scale = normal.diagonal().map(|d| d.max(lit(1e-12)));

        // Inner loop: raise damping until a step lowers the cost.
        loop {
            if iterations >= opts.max_iterations {
                return finish(x, cost, gradient_norm, iterations, Termination::MaxIter);
            }
            iterations += 1;

            let mut damped = normal.clone();
            for i in 0..n {
                damped[(i, i)] += lambda * scale[i];
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= lit(10.0);
                continue;
            };
            let step = chol.solve(&(-&gradient));

            if step.norm() <= opts.step_tol * (x.norm() + opts.step_tol) {
                return finish(x, cost, gradient_norm, iterations, Termination::StepTol);
            }

            let candidate = &x + &step;
            let r_new = problem.residuals(&candidate);
            check_finite(&r_new, &candidate)?;
            let cost_new = r_new.norm_squared();

            if cost_new < cost {
                let decrease = cost - cost_new;
                x = candidate;
                r = r_new;
                lambda = (lambda / lit(10.0)).max(lit(1e-12));
                let small_decrease = decrease <= opts.cost_tol * cost;
                cost = cost_new;
                jac = evaluate_jacobian(problem, &x, &r);
                if small_decrease {
                    let gradient_norm = jac.tr_mul(&r).amax();
                    return finish(x, cost, gradient_norm, iterations, Termination::CostTol);
                }
                break;
            }
            lambda *= lit(10.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    struct Rosenbrock;

    impl LsqProblem<f64> for Rosenbrock {
        fn num_params(&self) -> usize {
            2
        }
        fn num_residuals(&self) -> usize {
            2
        }
        fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]])
        }
        fn jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
            Some(DMatrix::from_row_slice(2, 2, &[-20.0 * x[0], 10.0, -1.0, 0.0]))
        }
    }

    fn linear_problem(seed: u64, m: usize, n: usize) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let b = DVector::from_fn(m, |_, _| rng.random_range(-5.0..5.0));
        (a, b)
    }

    struct Linear {
        a: DMatrix<f64>,
        b: DVector<f64>,
    }

    impl LsqProblem<f64> for Linear {
        fn num_params(&self) -> usize {
            self.a.ncols()
        }
        fn num_residuals(&self) -> usize {
            self.a.nrows()
        }
        fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
            &self.a * x - &self.b
        }
        fn jacobian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
            Some(self.a.clone())
        }
    }

    #[test]
    fn linear_problem_matches_normal_equations() {
        for seed in 0..10 {
            let (a, b) = linear_problem(seed, 12, 4);
            let normal = (a.transpose() * &a).cholesky().unwrap().solve(&(a.transpose() * &b));
            let exact = Linear { a: a.clone(), b: b.clone() };
            let report = solve_lm(&exact, &DVector::zeros(4), &LmOptions::default()).unwrap();
            assert!(report.converged);
            assert!((&report.solution - &normal).amax() < 1e-8, "{report:?}");

            // Forward differences carry ~1e-8 Jacobian error, which shifts
            // the fixed point by about that much.
            let fd = FnProblem::new(4, 12, |x: &DVector<f64>| &a * x - &b);
            let report = solve_lm(&fd, &DVector::zeros(4), &LmOptions::default()).unwrap();
            assert!(report.converged);
            assert!((&report.solution - &normal).amax() < 1e-6);
        }
    }

    #[test]
    fn zero_residual_at_start() {
        let problem = FnProblem::new(2, 3, |x: &DVector<f64>| {
            DVector::from_vec(vec![x[0] - 1.0, x[1] + 2.0, x[0] + x[1] + 1.0])
        });
        let x0 = DVector::from_vec(vec![1.0, -2.0]);
        let report = solve_lm(&problem, &x0, &LmOptions::default()).unwrap();
        assert!(report.converged);
        assert!(report.iterations <= 1);
        assert_eq!(report.solution, x0);
        assert_eq!(report.final_cost, 0.0);
    }

    #[test]
    fn rosenbrock_converges_to_one_one() {
        let x0 = DVector::from_vec(vec![-1.2, 1.0]);
        for analytic in [true, false] {
            let report = if analytic {
                solve_lm(&Rosenbrock, &x0, &LmOptions::default()).unwrap()
            } else {
                let fd = FnProblem::new(2, 2, |x: &DVector<f64>| Rosenbrock.residuals(x));
                solve_lm(&fd, &x0, &LmOptions::default()).unwrap()
            };
            assert!(report.converged, "{report:?}");
            assert!((report.solution[0] - 1.0).abs() < 1e-6);
            assert!((report.solution[1] - 1.0).abs() < 1e-6);
            // Stationary point: the gradient of the cost vanishes there.
            let j = Rosenbrock.jacobian(&report.solution).unwrap();
            let g = j.transpose() * Rosenbrock.residuals(&report.solution);
            assert!(g.amax() < 1e-6);
        }
    }

    #[test]
    fn rosenbrock_jacobian_check() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x = DVector::from_vec(vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]);
            let err = jacobian_relative_error(&Rosenbrock, &x).unwrap();
            assert!(err < 1e-5, "{err}");
        }
    }

    #[test]
    fn accepted_steps_never_increase_cost() {
        use std::cell::RefCell;
        let accepted = RefCell::new(Vec::new());
        let problem = FnProblem::new(2, 2, |x: &DVector<f64>| {
            let r = Rosenbrock.residuals(x);
            accepted.borrow_mut().push(r.norm_squared());
            r
        });
        let report = solve_lm(&problem, &DVector::from_vec(vec![-1.2, 1.0]), &LmOptions::default()).unwrap();
        assert!(report.final_cost <= report.initial_cost);
        // Track the running minimum of evaluated costs: the reported cost
        // must equal it, i.e. no accepted step ever went uphill.
        let best = accepted.borrow().iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(report.final_cost <= best + 1e-300);
    }

    #[test]
    fn non_finite_residual_is_reported() {
        let problem = FnProblem::new(1, 1, |x: &DVector<f64>| DVector::from_vec(vec![(x[0] - 3.0).ln()]));
        let err = solve_lm(&problem, &DVector::from_vec(vec![4.0]), &LmOptions::default());
        // ln is finite above 3 but LM steps toward the root and beyond.
        match err {
            Err(LsqError::NonFiniteResidual { params }) => assert_eq!(params.len(), 1),
            Ok(report) => assert_relative_eq!(report.solution[0], 4.0, epsilon = 1e-6),
            Err(other) => panic!("unexpected {other}"),
        }
        let bad = FnProblem::new(1, 1, |_: &DVector<f64>| DVector::from_vec(vec![f64::NAN]));
        assert!(matches!(
            solve_lm(&bad, &DVector::from_vec(vec![0.0]), &LmOptions::default()),
            Err(LsqError::NonFiniteResidual { .. })
        ));
    }

    #[test]
    fn max_iterations_is_not_converged() {
        let opts = LmOptions {
            max_iterations: 2,
            ..LmOptions::default()
        };
        let report = solve_lm(&Rosenbrock, &DVector::from_vec(vec![-1.2, 1.0]), &opts).unwrap();
        assert_eq!(report.termination, Termination::MaxIter);
        assert!(!report.converged);
    }

    #[test]
    fn shape_errors() {
        let problem = FnProblem::new(3, 2, |x: &DVector<f64>| x.rows(0, 2).into_owned());
        assert!(matches!(
            solve_lm(&problem, &DVector::zeros(3), &LmOptions::default()),
            Err(LsqError::Underdetermined { .. })
        ));
        assert!(matches!(
            solve_lm(&Rosenbrock, &DVector::zeros(3), &LmOptions::default()),
            Err(LsqError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn deterministic_reports() {
        let x0 = DVector::from_vec(vec![-1.2, 1.0]);
        let fd = FnProblem::new(2, 2, |x: &DVector<f64>| Rosenbrock.residuals(x));
        let a = solve_lm(&fd, &x0, &LmOptions::default()).unwrap();
        let b = solve_lm(&fd, &x0, &LmOptions::default()).unwrap();
        assert_eq!(a, b);
    }
}
