//! Weighted conditional logistic regression over matched choice sets.
//!
//! Serves both as the single-state step selection fitter (unit weights) and
//! as the per-state M-step of the hidden-state EM (smoothed state
//! probabilities as weights).

use crate::error::{Error, Result};
use crate::linalg::SquareMatrix;
use crate::model::ChoiceSet;
use crate::newton::{max_norm, newton_direction, newton_maximize, Evaluation, NewtonOptions, Objective};
use crate::scalar::Real;

/// Sets whose weight falls below this are skipped entirely.
pub const MIN_WEIGHT: f64 = 1e-12;

/// Choice sets plus one nonnegative weight per set.
#[derive(Debug, Clone)]
pub struct ClogitProblem<'a, T> {
    pub choice_sets: &'a [ChoiceSet<T>],
    pub weights: Vec<T>,
}

impl<'a, T: Real> ClogitProblem<'a, T> {
    pub fn new(choice_sets: &'a [ChoiceSet<T>], weights: Vec<T>) -> Result<Self> {
        if weights.len() != choice_sets.len() {
            return Err(Error::DimensionMismatch {
                what: "clogit weights",
                expected: choice_sets.len(),
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !(*w >= T::zero()) || !w.is_finite()) {
            return Err(Error::Domain {
                what: "clogit weight",
                value: f64::NAN,
            });
        }
        let dim = choice_sets.first().map_or(0, ChoiceSet::dim);
        if let Some(bad) = choice_sets.iter().find(|cs| cs.dim() != dim) {
            return Err(Error::DimensionMismatch {
                what: "choice-set covariates",
                expected: dim,
                got: bad.dim(),
            });
        }
        Ok(Self { choice_sets, weights })
    }

    pub fn unweighted(choice_sets: &'a [ChoiceSet<T>]) -> Self {
        Self {
            choice_sets,
            weights: vec![T::one(); choice_sets.len()],
        }
    }

    pub fn dim(&self) -> usize {
        self.choice_sets.first().map_or(0, ChoiceSet::dim)
    }

    fn active(&self) -> impl Iterator<Item = (&ChoiceSet<T>, T)> + '_ {
        let min = T::lit(MIN_WEIGHT);
        self.choice_sets
            .iter()
            .zip(self.weights.iter().copied())
            .filter(move |(_, w)| *w >= min)
    }
}

/// Contrast predictors `(x_j - x_0)^T beta + o_j - o_0` for every control.
fn contrast_predictors_into<T: Real>(cs: &ChoiceSet<T>, beta: &[T], out: &mut Vec<T>) {
    out.clear();
    let dim = cs.dim();
    if dim == 0 {
        out.extend_from_slice(cs.offset_contrasts());
        return;
    }
    out.extend(
        cs.contrasts()
            .chunks_exact(dim)
            .zip(cs.offset_contrasts())
            .map(|(d, &o)| d.iter().zip(beta).fold(o, |acc, (&a, &b)| acc + a * b)),
    );
}

/// `-ln(1 + Σ_j exp(c_j))` with the maximum factored out.
fn neg_log_one_plus_sum_exp<T: Real>(c: &[T]) -> T {
    let top = c.iter().copied().fold(T::zero(), T::max);
    let total = c.iter().fold((-top).exp(), |acc, &v| acc + (v - top).exp());
    -(top + total.ln())
}

/// Log-probability that the observed alternative (index 0) is chosen.
pub fn clogit_logprob<T: Real>(cs: &ChoiceSet<T>, beta: &[T]) -> T {
    let mut c = Vec::with_capacity(cs.n_alternatives());
    contrast_predictors_into(cs, beta, &mut c);
    neg_log_one_plus_sum_exp(&c)
}

/// Weighted log-likelihood only.
pub fn clogit_value<T: Real>(problem: &ClogitProblem<'_, T>, beta: &[T]) -> T {
    let mut c = Vec::new();
    let mut total = T::zero();
    for (cs, w) in problem.active() {
        contrast_predictors_into(cs, beta, &mut c);
        total = total + w * neg_log_one_plus_sum_exp(&c);
    }
    total
}

/// Weighted log-likelihood, gradient `Σ w (x_0 - E[x])` and Hessian `-Σ w Cov[x]`.
pub fn clogit_objective<T: Real>(problem: &ClogitProblem<'_, T>, beta: &[T]) -> Evaluation<T> {
    let r = problem.dim();
    let mut value = T::zero();
    let mut gradient = vec![T::zero(); r];
    let mut hessian = SquareMatrix::zeros(r);
    let mut c = Vec::new();
    let mut mean = vec![T::zero(); r];
    // upper triangle of the second moment, packed row by row
    let mut second = vec![T::zero(); r * (r + 1) / 2];
    for (cs, w) in problem.active() {
        contrast_predictors_into(cs, beta, &mut c);
        let top = c.iter().copied().fold(T::zero(), T::max);
        mean.iter_mut().for_each(|v| *v = T::zero());
        second.iter_mut().for_each(|v| *v = T::zero());
        let mut total = (-top).exp();
        for (d, &cj) in cs.contrasts().chunks_exact(r.max(1)).zip(&c) {
            let p = (cj - top).exp();
            total = total + p;
            let mut idx = 0;
            for a in 0..r {
                let pa = p * d[a];
                mean[a] = mean[a] + pa;
                for &db in &d[a..r] {
                    second[idx] = second[idx] + pa * db;
                    idx += 1;
                }
            }
        }
        let inv = total.recip();
        value = value - w * (top + total.ln());
        for m in mean.iter_mut() {
            *m = *m * inv;
        }
        let mut idx = 0;
        for a in 0..r {
            gradient[a] = gradient[a] - w * mean[a];
            for b in a..r {
                let cov = second[idx] * inv - mean[a] * mean[b];
                hessian[(a, b)] = hessian[(a, b)] - w * cov;
                idx += 1;
            }
        }
    }
    for a in 0..r {
        for b in 0..a {
            hessian[(a, b)] = hessian[(b, a)];
        }
    }
    Evaluation {
        value,
        gradient,
        hessian,
    }
}

impl<T: Real> Objective<T> for ClogitProblem<'_, T> {
    fn dim(&self) -> usize {
        ClogitProblem::dim(self)
    }

    fn value(&self, x: &[T]) -> Option<T> {
        let v = clogit_value(self, x);
        v.is_finite().then_some(v)
    }

    fn evaluate(&self, x: &[T]) -> Option<Evaluation<T>> {
        let ev = clogit_objective(self, x);
        ev.value.is_finite().then_some(ev)
    }
}

#[derive(Debug, Clone)]
pub struct ClogitFit<T> {
    pub beta: Vec<T>,
    pub value: T,
    pub converged: bool,
    pub grad_norm: T,
    pub iterations: usize,
    /// Hessian of the weighted log-likelihood at `beta`.
    pub hessian: SquareMatrix<T>,
}

/// Errors with [`Error::NotIdentified`] when the pooled within-set covariate
/// covariance (the negative Hessian at zero) is singular.
pub fn check_identified<T: Real>(problem: &ClogitProblem<'_, T>) -> Result<()> {
    let r = problem.dim();
    let info = clogit_objective(problem, &vec![T::zero(); r]).hessian.scaled(-T::one());
    let ev = info.symmetric_eigenvalues();
    let max = ev.last().copied().unwrap_or(T::zero());
    let min = ev.first().copied().unwrap_or(T::zero());
    if !(max > T::zero()) || min <= max * T::lit(1e-10) {
        return Err(Error::NotIdentified);
    }
    Ok(())
}

/// Maximizes the weighted conditional-logit likelihood.
pub fn clogit_fit<T: Real>(problem: &ClogitProblem<'_, T>, init: Option<&[T]>) -> Result<ClogitFit<T>> {
    check_identified(problem)?;
    clogit_fit_unchecked(problem, init)
}

/// [`clogit_fit`] without the identification check; used for warm-started
/// M-steps where the check was done once up front.
pub fn clogit_fit_unchecked<T: Real>(problem: &ClogitProblem<'_, T>, init: Option<&[T]>) -> Result<ClogitFit<T>> {
    let r = problem.dim();
    let start = match init {
        Some(b) if b.len() == r => b.to_vec(),
        Some(b) => {
            return Err(Error::DimensionMismatch {
                what: "clogit initial beta",
                expected: r,
                got: b.len(),
            })
        }
        None => vec![T::zero(); r],
    };
    let out = newton_maximize(problem, &start, &NewtonOptions::default())?;
    if out.converged && is_drifting(problem, &out.hessian, &out.gradient) {
        return Err(Error::Separation);
    }
    Ok(ClogitFit {
        beta: out.x,
        value: out.value,
        converged: out.converged,
        grad_norm: max_norm(&out.gradient),
        iterations: out.iterations,
        hessian: out.hessian,
    })
}

/// A vanishing gradient at finite coefficients can still be an optimum at
/// infinity: the curvature shrinks as fast as the gradient. Detect it by the
/// size of the next Newton step measured on the linear-predictor scale.
fn is_drifting<T: Real>(problem: &ClogitProblem<'_, T>, hessian: &SquareMatrix<T>, gradient: &[T]) -> bool {
    if gradient.iter().all(|g| *g == T::zero()) {
        return false;
    }
    let Some(dir) = newton_direction(hessian, gradient) else {
        return true;
    };
    let threshold = T::lit(1e-3);
    let r = dir.len().max(1);
    problem.active().any(|(cs, _)| {
        cs.contrasts()
            .chunks_exact(r)
            .any(|d| d.iter().zip(&dir).fold(T::zero(), |acc, (&a, &b)| acc + a * b).abs() > threshold)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Alternative;

    fn set(t: usize, rows: &[&[f64]]) -> ChoiceSet<f64> {
        let alts = rows
            .iter()
            .map(|r| Alternative {
                angle: 0.0,
                distance: 1.0,
                covariates: r.to_vec(),
                offset: 0.0,
            })
            .collect();
        ChoiceSet::new(t, alts).unwrap()
    }

    #[test]
    fn uniform_choice_at_zero_beta() {
        let cs = set(0, &[&[1.0], &[2.0], &[3.0], &[4.0], &[5.0]]);
        assert!((clogit_logprob(&cs, &[0.0]) - (0.2f64).ln()).abs() < 1e-15);
    }

    #[test]
    fn direct_arithmetic() {
        let cs = set(0, &[&[1.0], &[0.0], &[0.0]]);
        assert!((clogit_logprob(&cs, &[2f64.ln()]) - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn symmetric_covariates_have_zero_gradient_at_origin() {
        let sets = vec![
            set(0, &[&[0.0, 0.0], &[1.0, -2.0], &[-1.0, 2.0]]),
            set(1, &[&[0.0, 0.0], &[0.5, 0.3], &[-0.5, -0.3]]),
        ];
        let p = ClogitProblem::unweighted(&sets);
        let ev = clogit_objective(&p, &[0.0, 0.0]);
        assert!(max_norm(&ev.gradient) < 1e-15);
    }

    #[test]
    fn single_discriminating_set_is_separation() {
        let sets = vec![
            set(0, &[&[1.0], &[0.0]]),
            set(1, &[&[0.0], &[1.0], &[0.5]]),
            set(2, &[&[0.2], &[0.1]]),
        ];
        let p = ClogitProblem::new(&sets, vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(clogit_fit(&p, None), Err(Error::Separation)));
    }

    #[test]
    fn constant_covariate_is_not_identified() {
        let sets = vec![set(0, &[&[1.0, 3.0], &[0.0, 3.0]]), set(1, &[&[0.0, 2.0], &[1.0, 2.0]])];
        let p = ClogitProblem::unweighted(&sets);
        assert!(matches!(clogit_fit(&p, None), Err(Error::NotIdentified)));
    }

    #[test]
    fn weights_scaling_keeps_argmax() {
        let sets = vec![
            set(0, &[&[1.0], &[0.0], &[0.3]]),
            set(1, &[&[0.0], &[1.0], &[0.2]]),
            set(2, &[&[0.7], &[0.1], &[0.9]]),
        ];
        let full = clogit_fit(&ClogitProblem::new(&sets, vec![1.0, 1.0, 1.0]).unwrap(), None).unwrap();
        let half = clogit_fit(&ClogitProblem::new(&sets, vec![0.5, 0.5, 0.5]).unwrap(), None).unwrap();
        assert!(full.converged && half.converged);
        assert!((full.beta[0] - half.beta[0]).abs() < 1e-8);
    }

    #[test]
    fn mismatched_weights_rejected() {
        let sets = vec![set(0, &[&[1.0], &[0.0]])];
        assert!(ClogitProblem::new(&sets, vec![]).is_err());
        assert!(ClogitProblem::new(&sets, vec![-1.0]).is_err());
    }
}
