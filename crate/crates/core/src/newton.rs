//! Damped Newton–Raphson for smooth concave objectives.

use crate::error::{Error, Result};
use crate::linalg::SquareMatrix;
use crate::scalar::Real;

/// Value, gradient and Hessian at one point.
#[derive(Debug, Clone)]
pub struct Evaluation<T> {
    pub value: T,
    pub gradient: Vec<T>,
    pub hessian: SquareMatrix<T>,
}

/// A concave objective to maximize. `None` means the point is outside the
/// parameter domain.
pub trait Objective<T: Real> {
    fn dim(&self) -> usize;
    fn value(&self, x: &[T]) -> Option<T>;
    fn evaluate(&self, x: &[T]) -> Option<Evaluation<T>>;
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions<T> {
    /// Convergence threshold on the gradient max-norm.
    pub grad_tol: T,
    pub max_iter: usize,
    /// Iterates whose max-norm exceeds this are treated as divergence to infinity.
    pub max_norm: T,
}

impl<T: Real> Default for NewtonOptions<T> {
    fn default() -> Self {
        Self {
            grad_tol: T::lit(1e-8),
            max_iter: 100,
            max_norm: T::lit(1e3),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonOutcome<T> {
    pub x: Vec<T>,
    pub value: T,
    pub gradient: Vec<T>,
    pub hessian: SquareMatrix<T>,
    pub grad_norm: T,
    pub iterations: usize,
    pub converged: bool,
}

pub fn max_norm<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, x| m.max(x.abs()))
}

/// Solves `(-H) d = g`, adding a growing ridge when `-H` is not numerically
/// positive definite.
pub fn newton_direction<T: Real>(hessian: &SquareMatrix<T>, gradient: &[T]) -> Option<Vec<T>> {
    let neg = hessian.scaled(-T::one());
    if let Some(d) = neg.solve_spd(gradient) {
        return Some(d);
    }
    let scale = neg
        .diagonal()
        .iter()
        .fold(T::zero(), |m, v| m.max(v.abs()))
        .max(T::epsilon());
    let mut ridge = scale * T::lit(1e-10);
    for _ in 0..24 {
        let mut damped = neg.clone();
        for i in 0..damped.dim() {
            damped[(i, i)] = damped[(i, i)] + ridge;
        }
        if let Some(d) = damped.solve_spd(gradient) {
            return Some(d);
        }
        ridge = ridge * T::lit(10.0);
    }
    None
}

/// Maximizes `objective` from `init` with step-halving; accepted steps never
/// decrease the objective.
pub fn newton_maximize<T: Real, O: Objective<T> + ?Sized>(
    objective: &O,
    init: &[T],
    opts: &NewtonOptions<T>,
) -> Result<NewtonOutcome<T>> {
    let mut x = init.to_vec();
    let mut ev = objective.evaluate(&x).ok_or(Error::Domain {
        what: "Newton starting point",
        value: f64::NAN,
    })?;
    if !ev.value.is_finite() {
        return Err(Error::NonFinite {
            what: "objective at starting point",
        });
    }
    let mut iterations = 0;
    let mut converged = false;
    loop {
        let gnorm = max_norm(&ev.gradient);
        if gnorm <= opts.grad_tol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        let dir = newton_direction(&ev.hessian, &ev.gradient).ok_or(Error::NotIdentified)?;
        let predicted: T = ev
            .gradient
            .iter()
            .zip(&dir)
            .fold(T::zero(), |acc, (&g, &d)| acc + g * d);
        let noise = T::lit(64.0) * T::epsilon() * (ev.value.abs() + T::one());
        let mut step = T::one();
        let mut accepted = None;
        if predicted <= noise {
            // the gain is below rounding of the value; trust the quadratic model
            let cand: Vec<T> = x.iter().zip(&dir).map(|(&a, &d)| a + d).collect();
            if objective
                .value(&cand)
                .is_some_and(|v| v.is_finite() && v >= ev.value - noise)
            {
                accepted = Some(cand);
            }
        }
        if accepted.is_none() {
            for _ in 0..60 {
                let cand: Vec<T> = x.iter().zip(&dir).map(|(&a, &d)| a + step * d).collect();
                if let Some(v) = objective.value(&cand) {
                    if v.is_finite() && v >= ev.value {
                        accepted = Some(cand);
                        break;
                    }
                }
                step = step * T::lit(0.5);
            }
        }
        iterations += 1;
        let Some(next) = accepted else { break };
        if max_norm(&next) > opts.max_norm {
            return Err(Error::Separation);
        }
        let next_ev = objective.evaluate(&next).ok_or(Error::NonFinite {
            what: "objective after Newton step",
        })?;
        let stalled = next == x;
        x = next;
        ev = next_ev;
        if stalled {
            converged = max_norm(&ev.gradient) <= opts.grad_tol;
            break;
        }
    }
    let grad_norm = max_norm(&ev.gradient);
    Ok(NewtonOutcome {
        x,
        value: ev.value,
        gradient: ev.gradient,
        hessian: ev.hessian,
        grad_norm,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// -(x-1)^2 - 2(y+3)^2 + xy/2
    struct Quadratic;

    impl Objective<f64> for Quadratic {
        fn dim(&self) -> usize {
            2
        }
        fn value(&self, x: &[f64]) -> Option<f64> {
            Some(-(x[0] - 1.0).powi(2) - 2.0 * (x[1] + 3.0).powi(2) + 0.5 * x[0] * x[1])
        }
        fn evaluate(&self, x: &[f64]) -> Option<Evaluation<f64>> {
            Some(Evaluation {
                value: self.value(x)?,
                gradient: vec![-2.0 * (x[0] - 1.0) + 0.5 * x[1], -4.0 * (x[1] + 3.0) + 0.5 * x[0]],
                hessian: SquareMatrix::from_rows(&[vec![-2.0, 0.5], vec![0.5, -4.0]]),
            })
        }
    }

    /// -exp(x) - exp(-x) + log-barrier domain x > -5
    struct Bounded;

    impl Objective<f64> for Bounded {
        fn dim(&self) -> usize {
            1
        }
        fn value(&self, x: &[f64]) -> Option<f64> {
            (x[0] > -5.0).then(|| -(x[0] - 2.0).exp() - (2.0 - x[0]).exp())
        }
        fn evaluate(&self, x: &[f64]) -> Option<Evaluation<f64>> {
            let v = self.value(x)?;
            let g = -(x[0] - 2.0).exp() + (2.0 - x[0]).exp();
            let h = -(x[0] - 2.0).exp() - (2.0 - x[0]).exp();
            Some(Evaluation {
                value: v,
                gradient: vec![g],
                hessian: SquareMatrix::from_rows(&[vec![h]]),
            })
        }
    }

    #[test]
    fn quadratic_in_one_step() {
        let out = newton_maximize(&Quadratic, &[10.0, 10.0], &NewtonOptions::default()).unwrap();
        assert!(out.converged);
        assert!(out.iterations <= 2);
        let g = Quadratic.evaluate(&out.x).unwrap().gradient;
        assert!(max_norm(&g) < 1e-10);
    }

    #[test]
    fn nonquadratic_converges_monotonically() {
        let out = newton_maximize(&Bounded, &[-4.0], &NewtonOptions::default()).unwrap();
        assert!(out.converged);
        assert!((out.x[0] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn invalid_start_is_an_error() {
        assert!(newton_maximize(&Bounded, &[-6.0], &NewtonOptions::default()).is_err());
    }
}
