//! Forward filtering, backward smoothing and the transition update for a
//! hidden Markov chain with a non-emitting initial state `S_0`.

use serde::Serialize;

use crate::clogit::clogit_logprob;
use crate::error::{Error, Result};
use crate::linalg::SquareMatrix;
use crate::model::{ChoiceSet, HmmParams};
use crate::scalar::Real;

/// Per-time, per-state log emission probabilities, row-major `T × K`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmissionMatrix<T> {
    n_times: usize,
    n_states: usize,
    log: Vec<T>,
}

impl<T: Real> EmissionMatrix<T> {
    pub fn from_log(n_times: usize, n_states: usize, log: Vec<T>) -> Result<Self> {
        if log.len() != n_times * n_states {
            return Err(Error::DimensionMismatch {
                what: "emission matrix",
                expected: n_times * n_states,
                got: log.len(),
            });
        }
        if log.iter().any(|v| v.is_nan() || *v == T::infinity()) {
            return Err(Error::NonFinite { what: "log emissions" });
        }
        Ok(Self { n_times, n_states, log })
    }

    /// Conditional-logit probabilities of the observed step per state.
    pub fn from_choice_sets(choice_sets: &[ChoiceSet<T>], betas: &[Vec<T>]) -> Result<Self> {
        let k = betas.len();
        for b in betas {
            if let Some(cs) = choice_sets.first() {
                if b.len() != cs.dim() {
                    return Err(Error::DimensionMismatch {
                        what: "state coefficients",
                        expected: cs.dim(),
                        got: b.len(),
                    });
                }
            }
        }
        let mut log = Vec::with_capacity(choice_sets.len() * k);
        for cs in choice_sets {
            for b in betas {
                log.push(clogit_logprob(cs, b));
            }
        }
        Self::from_log(choice_sets.len(), k, log)
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn log_row(&self, t: usize) -> &[T] {
        &self.log[t * self.n_states..(t + 1) * self.n_states]
    }

    pub fn prob(&self, t: usize, k: usize) -> T {
        self.log[t * self.n_states + k].exp()
    }
}

/// Filtered, predictive, smoothed and pairwise state probabilities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PosteriorBundle<T> {
    /// `P(S_t | F_t)`.
    pub filtered: Vec<Vec<T>>,
    /// `P(S_t | F_{t-1})`; the first row is `π_0ᵀ P`.
    pub predictive: Vec<Vec<T>>,
    /// `P(S_t | F_T)`.
    pub smoothed: Vec<Vec<T>>,
    /// `pairwise[t][h][k] = P(S_{t-1} = h, S_t = k | F_T)`; entry 0 pairs the
    /// non-emitting `S_0` with the first observed step.
    pub pairwise: Vec<SquareMatrix<T>>,
    /// `P(S_0 | F_T)`.
    pub initial_smoothed: Vec<T>,
    pub loglik: T,
}

/// Forward-backward pass in scaled form.
pub fn filter_smooth<T: Real>(em: &EmissionMatrix<T>, hmm: &HmmParams<T>) -> Result<PosteriorBundle<T>> {
    let k = hmm.n_states();
    if em.n_states() != k {
        return Err(Error::DimensionMismatch {
            what: "emission states",
            expected: k,
            got: em.n_states(),
        });
    }
    let n = em.n_times();
    let p = &hmm.transition;
    let propagate = |row: &[T]| -> Vec<T> {
        (0..k)
            .map(|l| (0..k).fold(T::zero(), |acc, h| acc + row[h] * p[(h, l)]))
            .collect()
    };
    let mut filtered = Vec::with_capacity(n);
    let mut predictive = Vec::with_capacity(n);
    let mut loglik = T::zero();
    let mut pred = propagate(&hmm.initial);
    for t in 0..n {
        let logs = em.log_row(t);
        let top = logs.iter().copied().fold(T::neg_infinity(), T::max);
        if top == T::neg_infinity() {
            return Err(Error::NumericalUnderflow { t });
        }
        let mut w: Vec<T> = pred.iter().zip(logs).map(|(&q, &l)| q * (l - top).exp()).collect();
        let c: T = w.iter().copied().sum();
        if !(c > T::zero()) || !c.is_finite() {
            return Err(Error::NumericalUnderflow { t });
        }
        loglik = loglik + top + c.ln();
        w.iter_mut().for_each(|v| *v = *v / c);
        let next = propagate(&w);
        predictive.push(std::mem::replace(&mut pred, next));
        filtered.push(w);
    }

    let mut smoothed = vec![vec![T::zero(); k]; n];
    if n > 0 {
        smoothed[n - 1] = filtered[n - 1].clone();
    }
    let mut ratio = vec![T::zero(); k];
    let mut pairwise = Vec::with_capacity(n);
    for t in (0..n).rev() {
        for l in 0..k {
            ratio[l] = if predictive[t][l] > T::zero() {
                smoothed[t][l] / predictive[t][l]
            } else {
                T::zero()
            };
        }
        let prev: &[T] = if t == 0 { &hmm.initial } else { &filtered[t - 1] };
        let mut pair = SquareMatrix::zeros(k);
        let mut back = vec![T::zero(); k];
        for h in 0..k {
            for l in 0..k {
                let v = prev[h] * p[(h, l)] * ratio[l];
                pair[(h, l)] = v;
                back[h] = back[h] + v;
            }
        }
        pairwise.push(pair);
        if t > 0 {
            smoothed[t - 1] = back;
        } else {
            pairwise.reverse();
            let initial_smoothed = back;
            return Ok(PosteriorBundle {
                filtered,
                predictive,
                smoothed,
                pairwise,
                initial_smoothed,
                loglik,
            });
        }
    }
    Ok(PosteriorBundle {
        filtered,
        predictive,
        smoothed,
        pairwise,
        initial_smoothed: hmm.initial.clone(),
        loglik,
    })
}

/// Occupancy below which a state's transition row is not re-estimated.
pub const DEGENERATE_OCCUPANCY: f64 = 1e-8;

/// Closed-form transition update `π_hk = Σ_t pair[t][h][k] / Σ_t Σ_l pair[t][h][l]`.
/// Rows of states with negligible occupancy keep their previous values and
/// are reported.
pub fn update_transition<T: Real>(
    bundle: &PosteriorBundle<T>,
    previous: &SquareMatrix<T>,
) -> (SquareMatrix<T>, Vec<usize>) {
    let k = previous.dim();
    let mut num = SquareMatrix::zeros(k);
    for pair in &bundle.pairwise {
        for h in 0..k {
            for l in 0..k {
                num[(h, l)] = num[(h, l)] + pair[(h, l)];
            }
        }
    }
    let mut out = SquareMatrix::zeros(k);
    let mut degenerate = Vec::new();
    for h in 0..k {
        let den: T = num.row(h).iter().copied().sum();
        if !(den >= T::lit(DEGENERATE_OCCUPANCY)) {
            degenerate.push(h);
            for l in 0..k {
                out[(h, l)] = previous[(h, l)];
            }
            continue;
        }
        for l in 0..k {
            out[(h, l)] = num[(h, l)] / den;
        }
    }
    (out, degenerate)
}

/// Most probable state per step from the smoothed probabilities; ties go to
/// the lower index.
pub fn decode_states<T: Real>(bundle: &PosteriorBundle<T>) -> Vec<(usize, T)> {
    bundle
        .smoothed
        .iter()
        .map(|row| {
            row.iter().enumerate().fold(
                (0, T::neg_infinity()),
                |best, (k, &p)| if p > best.1 { (k, p) } else { best },
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hmm2() -> HmmParams<f64> {
        HmmParams::with_uniform_initial(SquareMatrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]])).unwrap()
    }

    #[test]
    fn single_state_is_trivial() {
        let em = EmissionMatrix::<f64>::from_log(3, 1, vec![-1.0, -2.0, -0.5]).unwrap();
        let hmm = HmmParams::new(SquareMatrix::identity(1), vec![1.0]).unwrap();
        let b = filter_smooth(&em, &hmm).unwrap();
        assert!((b.loglik + 3.5).abs() < 1e-14);
        assert!(b.smoothed.iter().all(|r| (r[0] - 1.0).abs() < 1e-15));
    }

    #[test]
    fn frozen_chain() {
        let em = EmissionMatrix::<f64>::from_log(4, 2, vec![-1.0, -0.1, -2.0, -0.3, -0.2, -4.0, -1.0, -1.0]).unwrap();
        let hmm = HmmParams::new(SquareMatrix::identity(2), vec![1.0, 0.0]).unwrap();
        let b = filter_smooth(&em, &hmm).unwrap();
        assert!(b.smoothed.iter().all(|r| (r[0] - 1.0).abs() < 1e-15));
    }

    #[test]
    fn pairwise_marginalizes_to_smoothed() {
        let em =
            EmissionMatrix::from_log(5, 2, vec![-1.0, -0.1, -2.0, -0.3, -0.2, -4.0, -1.0, -1.0, -0.7, -0.9]).unwrap();
        let b = filter_smooth(&em, &hmm2()).unwrap();
        for (t, pair) in b.pairwise.iter().enumerate() {
            for k in 0..2 {
                let col = pair[(0, k)] + pair[(1, k)];
                assert!((col - b.smoothed[t][k]).abs() < 1e-12);
            }
        }
        let row0 = b.pairwise[0][(0, 0)] + b.pairwise[0][(0, 1)];
        assert!((row0 - b.initial_smoothed[0]).abs() < 1e-12);
    }

    #[test]
    fn transition_update_examples() {
        let k = 2;
        let mut pair = SquareMatrix::<f64>::zeros(k);
        pair[(0, 0)] = 1.0;
        let bundle = PosteriorBundle {
            filtered: vec![],
            predictive: vec![],
            smoothed: vec![],
            pairwise: vec![pair.clone(), pair],
            initial_smoothed: vec![1.0, 0.0],
            loglik: 0.0,
        };
        let (tr, deg) = update_transition(&bundle, &SquareMatrix::from_rows(&[vec![0.5, 0.5], vec![0.3, 0.7]]));
        assert_eq!(tr.row(0), &[1.0, 0.0]);
        assert_eq!(tr.row(1), &[0.3, 0.7]);
        assert_eq!(deg, vec![1]);
    }

    #[test]
    fn decode_ties_go_low() {
        let bundle = PosteriorBundle {
            filtered: vec![],
            predictive: vec![],
            smoothed: vec![vec![0.9, 0.1], vec![0.5, 0.5], vec![0.2, 0.8]],
            pairwise: vec![],
            initial_smoothed: vec![],
            loglik: 0.0,
        };
        let d = decode_states(&bundle);
        assert_eq!(d, vec![(0, 0.9), (0, 0.5), (1, 0.8)]);
    }
}
