//! Expectation–maximization for multi-state step selection models, with
//! short-run/long-run multistart, canonical state ordering and
//! numerical-Hessian standard errors.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bcrw::{BcrwObjective, BcrwSteps};
use crate::clogit::{clogit_fit, clogit_logprob, ClogitProblem};
use crate::error::{Error, Result};
use crate::hmm::{filter_smooth, update_transition, EmissionMatrix, PosteriorBundle};
use crate::linalg::SquareMatrix;
use crate::model::{ChoiceSet, FitResult, HmmParams, Point, StateParams, StdErrors, Trajectory};
use crate::newton::{newton_maximize, NewtonOptions};
use crate::rng::stream_rng;
use crate::sampler::{CovariateFormula, CovariateTerm, SamplingScheme};
use crate::scalar::Real;

/// A per-state emission law that the EM can evaluate and re-fit.
pub trait EmissionModel<T: Real>: Sync {
    /// Number of observed steps.
    fn n_times(&self) -> usize;
    /// Number of coefficients per state.
    fn dim(&self) -> usize;
    /// Log emission probability of every step under `beta`.
    fn log_emissions(&self, beta: &[T], out: &mut [T]) -> Result<()>;
    /// Single-state fit with unit weights.
    fn pooled_fit(&self) -> Result<Vec<T>>;
    /// Weighted maximization started from `init`, at most `max_iter` Newton steps.
    fn m_step(&self, weights: &[T], init: &[T], max_iter: usize) -> Result<Vec<T>>;
    /// Moves a randomized start into the parameter domain.
    fn project(&self, _beta: &mut [T]) {}
}

/// Conditional-logit emissions over matched choice sets.
#[derive(Debug, Clone, Copy)]
pub struct SsfModel<'a, T> {
    pub choice_sets: &'a [ChoiceSet<T>],
}

impl<'a, T: Real> SsfModel<'a, T> {
    pub fn new(choice_sets: &'a [ChoiceSet<T>]) -> Result<Self> {
        ClogitProblem::new(choice_sets, vec![T::one(); choice_sets.len()])?;
        Ok(Self { choice_sets })
    }
}

impl<T: Real> EmissionModel<T> for SsfModel<'_, T> {
    fn n_times(&self) -> usize {
        self.choice_sets.len()
    }

    fn dim(&self) -> usize {
        self.choice_sets.first().map_or(0, ChoiceSet::dim)
    }

    fn log_emissions(&self, beta: &[T], out: &mut [T]) -> Result<()> {
        if beta.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "state coefficients",
                expected: self.dim(),
                got: beta.len(),
            });
        }
        out.par_iter_mut()
            .zip(self.choice_sets.par_iter())
            .for_each(|(o, cs)| *o = clogit_logprob(cs, beta));
        Ok(())
    }

    fn pooled_fit(&self) -> Result<Vec<T>> {
        Ok(clogit_fit(&ClogitProblem::unweighted(self.choice_sets), None)?.beta)
    }

    fn m_step(&self, weights: &[T], init: &[T], max_iter: usize) -> Result<Vec<T>> {
        let problem = ClogitProblem::new(self.choice_sets, weights.to_vec())?;
        Ok(newton_maximize(
            &problem,
            init,
            &NewtonOptions {
                max_iter,
                ..NewtonOptions::default()
            },
        )?
        .x)
    }
}

/// Direct gamma × consensus von Mises emissions.
#[derive(Debug, Clone)]
pub struct BcrwModel<T> {
    pub steps: BcrwSteps<T>,
}

impl<T: Real> BcrwModel<T> {
    pub fn new(trajectory: &Trajectory<T>, targets: &[Point<T>]) -> Self {
        Self {
            steps: BcrwSteps::from_trajectory(trajectory, targets),
        }
    }

    fn objective_start(&self, weights: &[T]) -> Vec<T> {
        let w: T = weights.iter().copied().sum();
        let mut start = vec![T::zero(); self.steps.dim()];
        let mut ones = vec![T::zero(); self.steps.len()];
        // distances are recovered from the log-densities at (0, 1): log f = -d - ln 2π - ln I0(0)
        let probe: Vec<T> = std::iter::once(T::zero())
            .chain(std::iter::once(T::one()))
            .chain(std::iter::repeat_n(T::zero(), self.steps.dim() - 2))
            .collect();
        let _ = self.steps.log_densities(&probe, &mut ones);
        let log_two_pi = (T::PI() + T::PI()).ln();
        let (mut m1, mut m2) = (T::zero(), T::zero());
        for (l, &wt) in ones.iter().zip(weights) {
            let d = -(*l + log_two_pi);
            m1 = m1 + wt * d;
            m2 = m2 + wt * d * d;
        }
        let mean = m1 / w;
        let var = (m2 / w - mean * mean).max(T::epsilon() * mean * mean);
        let shape = mean * mean / var;
        start[0] = (shape - T::one()).max(T::lit(-0.9));
        start[1] = mean / var;
        start
    }
}

impl<T: Real> EmissionModel<T> for BcrwModel<T> {
    fn n_times(&self) -> usize {
        self.steps.len()
    }

    fn dim(&self) -> usize {
        self.steps.dim()
    }

    fn log_emissions(&self, beta: &[T], out: &mut [T]) -> Result<()> {
        if beta.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "state coefficients",
                expected: self.dim(),
                got: beta.len(),
            });
        }
        self.steps.log_densities(beta, out).ok_or(Error::InvalidNaturalParams {
            eta1: beta[0].to_f64_lossy(),
            eta2: beta[1].to_f64_lossy(),
        })
    }

    fn pooled_fit(&self) -> Result<Vec<T>> {
        let w = vec![T::one(); self.steps.len()];
        let start = self.objective_start(&w);
        Ok(newton_maximize(
            &BcrwObjective {
                steps: &self.steps,
                weights: &w,
            },
            &start,
            &NewtonOptions::default(),
        )?
        .x)
    }

    fn m_step(&self, weights: &[T], init: &[T], max_iter: usize) -> Result<Vec<T>> {
        let opts = NewtonOptions {
            max_iter,
            ..NewtonOptions::default()
        };
        Ok(newton_maximize(
            &BcrwObjective {
                steps: &self.steps,
                weights,
            },
            init,
            &opts,
        )?
        .x)
    }

    fn project(&self, beta: &mut [T]) {
        beta[0] = beta[0].max(T::lit(-0.9));
        beta[1] = beta[1].max(T::lit(1e-3));
    }
}

/// How fitted states are labelled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum StateOrdering<T> {
    /// Keep the labels the optimizer produced.
    None,
    /// Ascending mean step length `(η_1 + 1) / η_2`, with `eta_shift` added
    /// to the fitted distance coefficients first.
    MeanDistance {
        log_distance: usize,
        neg_distance: usize,
        eta_shift: [T; 2],
    },
    /// Ascending value of one coefficient.
    Coefficient { index: usize },
}

impl<T: Real> StateOrdering<T> {
    /// Mean-distance ordering when the formula carries both distance terms,
    /// otherwise by the single distance coefficient present, otherwise none.
    pub fn for_formula(formula: &CovariateFormula, scheme: &SamplingScheme<T>) -> Self {
        if let Some((log_distance, neg_distance)) = formula.distance_indices() {
            let eta_shift = scheme.tilt().unwrap_or([T::zero(), T::zero()]);
            return Self::MeanDistance {
                log_distance,
                neg_distance,
                eta_shift,
            };
        }
        match formula
            .index_of(&CovariateTerm::LogDistance)
            .or_else(|| formula.index_of(&CovariateTerm::NegDistance))
        {
            Some(index) => Self::Coefficient { index },
            None => Self::None,
        }
    }

    /// Mean-distance ordering for the BCRW coefficient layout.
    pub fn bcrw() -> Self {
        Self::MeanDistance {
            log_distance: 0,
            neg_distance: 1,
            eta_shift: [T::zero(), T::zero()],
        }
    }

    fn key(&self, beta: &[T]) -> T {
        match *self {
            Self::None => T::zero(),
            Self::MeanDistance {
                log_distance,
                neg_distance,
                eta_shift,
            } => {
                let rate = beta[neg_distance] + eta_shift[1];
                if rate > T::zero() {
                    (beta[log_distance] + eta_shift[0] + T::one()) / rate
                } else {
                    T::infinity()
                }
            }
            Self::Coefficient { index } => beta[index],
        }
    }

    /// `order[i]` is the old label of new state `i`.
    pub fn order(&self, betas: &[Vec<T>]) -> Vec<usize> {
        let mut order: Vec<usize> = (0..betas.len()).collect();
        if !matches!(self, Self::None) {
            let keys: Vec<T> = betas.iter().map(|b| self.key(b)).collect();
            order.sort_by(|&a, &b| keys[a].partial_cmp(&keys[b]).unwrap_or(std::cmp::Ordering::Equal));
        }
        order
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig<T> {
    pub n_states: usize,
    pub n_short_runs: usize,
    pub short_iters: usize,
    pub long_max_iters: usize,
    /// Newton steps per state in each M-step of a short run.
    pub short_m_step_iters: usize,
    /// Newton steps per state in each M-step of the long run.
    pub long_m_step_iters: usize,
    /// Relative log-likelihood change that ends a run.
    pub tol: T,
    pub seed: u64,
    pub ordering: StateOrdering<T>,
    /// Initial-state law; uniform when absent.
    pub initial: Option<Vec<T>>,
    pub std_errors: bool,
}

impl<T: Real> Default for EmConfig<T> {
    fn default() -> Self {
        Self {
            n_states: 2,
            n_short_runs: 20,
            short_iters: 10,
            long_max_iters: 500,
            short_m_step_iters: 1,
            long_m_step_iters: 100,
            tol: T::lit(1e-8),
            seed: 0,
            ordering: StateOrdering::None,
            initial: None,
            std_errors: false,
        }
    }
}

impl<T: Real> EmConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 {
            return Err(Error::Config("n_states must be at least 1".into()));
        }
        if self.short_m_step_iters == 0 || self.long_m_step_iters == 0 {
            return Err(Error::Config("M-step iteration counts must be positive".into()));
        }
        if !(self.tol > T::zero()) {
            return Err(Error::Config("tol must be positive".into()));
        }
        if let Some(init) = &self.initial {
            HmmParams::new(SquareMatrix::identity(self.n_states), init.clone())?;
        }
        Ok(())
    }

    fn initial_law(&self) -> Vec<T> {
        self.initial
            .clone()
            .unwrap_or_else(|| vec![T::from_usize_lossy(self.n_states).recip(); self.n_states])
    }
}

/// Stream label for multistart perturbations.
pub const MULTISTART_STREAM: &str = "multistart";

#[derive(Debug, Clone)]
struct EmState<T> {
    betas: Vec<Vec<T>>,
    transition: SquareMatrix<T>,
}

#[derive(Debug, Clone)]
struct RunOutcome<T> {
    state: EmState<T>,
    bundle: PosteriorBundle<T>,
    trace: Vec<T>,
    iterations: usize,
    converged: bool,
    degenerate: Vec<usize>,
}

fn emission_matrix<T: Real, M: EmissionModel<T> + ?Sized>(model: &M, betas: &[Vec<T>]) -> Result<EmissionMatrix<T>> {
    let n = model.n_times();
    let k = betas.len();
    let cols = betas
        .iter()
        .map(|b| {
            let mut col = vec![T::zero(); n];
            model.log_emissions(b, &mut col)?;
            Ok(col)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut log = Vec::with_capacity(n * k);
    for t in 0..n {
        log.extend(cols.iter().map(|c| c[t]));
    }
    EmissionMatrix::from_log(n, k, log)
}

/// Observed-data log-likelihood of the multi-state model.
pub fn observed_loglik<T: Real, M: EmissionModel<T> + ?Sized>(
    model: &M,
    betas: &[Vec<T>],
    hmm: &HmmParams<T>,
) -> Result<T> {
    Ok(filter_smooth(&emission_matrix(model, betas)?, hmm)?.loglik)
}

/// Posterior state probabilities under fixed parameters.
pub fn posterior<T: Real, M: EmissionModel<T> + ?Sized>(
    model: &M,
    betas: &[Vec<T>],
    hmm: &HmmParams<T>,
) -> Result<PosteriorBundle<T>> {
    filter_smooth(&emission_matrix(model, betas)?, hmm)
}

#[derive(Debug, Clone, Copy)]
struct RunLimits<T> {
    max_iter: usize,
    m_step_iters: usize,
    tol: T,
}

fn run_em<T: Real, M: EmissionModel<T> + ?Sized>(
    model: &M,
    start: EmState<T>,
    initial: &[T],
    limits: RunLimits<T>,
) -> Result<RunOutcome<T>> {
    let RunLimits {
        max_iter,
        m_step_iters,
        tol,
    } = limits;
    let mut state = start;
    let mut trace: Vec<T> = Vec::new();
    let mut degenerate = Vec::new();
    let mut iterations = 0;
    loop {
        let hmm = HmmParams {
            transition: state.transition.clone(),
            initial: initial.to_vec(),
        };
        let bundle = posterior(model, &state.betas, &hmm)?;
        let ll = bundle.loglik;
        let converged = trace
            .last()
            .is_some_and(|&prev: &T| (ll - prev).abs() <= tol * prev.abs());
        trace.push(ll);
        if converged || iterations >= max_iter {
            return Ok(RunOutcome {
                state,
                bundle,
                trace,
                iterations,
                converged,
                degenerate,
            });
        }
        let (transition, deg) = update_transition(&bundle, &state.transition);
        degenerate = deg;
        let k = state.betas.len();
        let betas = (0..k)
            .into_par_iter()
            .map(|s| {
                let w: Vec<T> = bundle.smoothed.iter().map(|row| row[s]).collect();
                let total: T = w.iter().copied().sum();
                if total < T::lit(crate::hmm::DEGENERATE_OCCUPANCY) {
                    return Ok(state.betas[s].clone());
                }
                model.m_step(&w, &state.betas[s], m_step_iters)
            })
            .collect::<Result<Vec<_>>>()?;
        state = EmState { betas, transition };
        iterations += 1;
    }
}

fn random_start<T: Real, M: EmissionModel<T> + ?Sized>(
    model: &M,
    pooled: &[T],
    k: usize,
    seed: u64,
    run: usize,
) -> EmState<T> {
    let mut rng = stream_rng(seed, MULTISTART_STREAM, run as u64);
    let betas = (0..k)
        .map(|_| {
            let mut b: Vec<T> = pooled.iter().map(|&v| v * T::lit(0.5 + rng.random::<f64>())).collect();
            model.project(&mut b);
            b
        })
        .collect();
    let mut transition = SquareMatrix::zeros(k);
    for h in 0..k {
        // flat Dirichlet row from normalized unit exponentials
        let draws: Vec<f64> = (0..k).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let total: f64 = draws.iter().sum();
        for (l, d) in draws.iter().enumerate() {
            transition[(h, l)] = T::lit(d / total);
        }
    }
    EmState { betas, transition }
}

/// Fits the multi-state model: randomized short runs around the pooled
/// single-state fit, then one long run from the best of them.
pub fn em_fit<T: Real, M: EmissionModel<T> + ?Sized>(model: &M, config: &EmConfig<T>) -> Result<FitResult<T>> {
    config.validate()?;
    let k = config.n_states;
    let initial = config.initial_law();
    let pooled = model.pooled_fit()?;
    let mut short_run_traces = Vec::new();
    let short = RunLimits {
        max_iter: config.short_iters,
        m_step_iters: config.short_m_step_iters,
        tol: config.tol,
    };
    let best_start = if k == 1 {
        EmState {
            betas: vec![pooled],
            transition: SquareMatrix::identity(1),
        }
    } else {
        let runs = config.n_short_runs.max(1);
        let outcomes: Vec<Result<RunOutcome<T>>> = (0..runs)
            .into_par_iter()
            .map(|r| run_em(model, random_start(model, &pooled, k, config.seed, r), &initial, short))
            .collect();
        let mut best: Option<RunOutcome<T>> = None;
        let mut last_err = None;
        for out in outcomes {
            match out {
                Ok(o) => {
                    short_run_traces.push(o.trace.clone());
                    if best.as_ref().is_none_or(|b| o.bundle.loglik > b.bundle.loglik) {
                        best = Some(o);
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
        match best {
            Some(b) => b.state,
            None => {
                return Err(Error::AllRunsFailed {
                    attempts: runs,
                    last: last_err.map(|e| e.to_string()).unwrap_or_default(),
                });
            }
        }
    };
    finish(model, config, best_start, short_run_traces)
}

/// Long EM run started from the given parameters, without multistart.
pub fn em_continue<T: Real, M: EmissionModel<T> + ?Sized>(
    model: &M,
    betas: &[Vec<T>],
    transition: &SquareMatrix<T>,
    config: &EmConfig<T>,
) -> Result<FitResult<T>> {
    config.validate()?;
    if betas.len() != config.n_states || transition.dim() != config.n_states {
        return Err(Error::DimensionMismatch {
            what: "starting states",
            expected: config.n_states,
            got: betas.len(),
        });
    }
    HmmParams::with_uniform_initial(transition.clone())?;
    finish(
        model,
        config,
        EmState {
            betas: betas.to_vec(),
            transition: transition.clone(),
        },
        Vec::new(),
    )
}

fn finish<T: Real, M: EmissionModel<T> + ?Sized>(
    model: &M,
    config: &EmConfig<T>,
    start: EmState<T>,
    short_run_traces: Vec<Vec<T>>,
) -> Result<FitResult<T>> {
    let k = config.n_states;
    let initial = config.initial_law();
    let long = RunLimits {
        max_iter: config.long_max_iters,
        m_step_iters: config.long_m_step_iters,
        tol: config.tol,
    };
    let out = run_em(model, start, &initial, long)?;
    let order = config.ordering.order(&out.state.betas);
    let betas: Vec<Vec<T>> = order.iter().map(|&o| out.state.betas[o].clone()).collect();
    let hmm = HmmParams {
        transition: out.state.transition.clone(),
        initial: initial.clone(),
    }
    .permuted(&order);
    let smooth_probs = out
        .bundle
        .smoothed
        .iter()
        .map(|row| order.iter().map(|&o| row[o]).collect())
        .collect();
    let inverse: Vec<usize> = (0..k)
        .map(|old| order.iter().position(|&o| o == old).unwrap_or(old))
        .collect();
    let degenerate_states = out.degenerate.iter().map(|&d| inverse[d]).collect();
    let std_errors = if config.std_errors {
        Some(standard_errors(model, &betas, &hmm)?)
    } else {
        None
    };
    Ok(FitResult {
        state_params: betas.into_iter().map(StateParams::new).collect(),
        hmm,
        std_errors,
        loglik: out.bundle.loglik,
        smooth_probs,
        n_em_iterations: out.iterations,
        converged: out.converged,
        loglik_trace: out.trace,
        short_run_traces,
        degenerate_states,
    })
}

/// Multi-state step selection fit over prepared choice sets.
pub fn fit_ssf<T: Real>(choice_sets: &[ChoiceSet<T>], config: &EmConfig<T>) -> Result<FitResult<T>> {
    em_fit(&SsfModel::new(choice_sets)?, config)
}

/// Multi-state BCRW fitted by direct likelihood, coefficients
/// `(η_1, η_2, κ_0, …, κ_p)` per state.
pub fn fit_bcrw_direct<T: Real>(
    trajectory: &Trajectory<T>,
    targets: &[Point<T>],
    config: &EmConfig<T>,
) -> Result<FitResult<T>> {
    em_fit(&BcrwModel::new(trajectory, targets), config)
}

fn pack<T: Real>(betas: &[Vec<T>], transition: &SquareMatrix<T>) -> Vec<T> {
    let k = betas.len();
    let tiny = T::min_positive_value();
    let mut theta: Vec<T> = betas.iter().flatten().copied().collect();
    for h in 0..k {
        let diag = transition[(h, h)].max(tiny);
        for l in (0..k).filter(|&l| l != h) {
            theta.push((transition[(h, l)].max(tiny) / diag).ln());
        }
    }
    theta
}

fn unpack<T: Real>(theta: &[T], k: usize, r: usize) -> (Vec<Vec<T>>, SquareMatrix<T>) {
    let betas = (0..k).map(|s| theta[s * r..(s + 1) * r].to_vec()).collect();
    let mut transition = SquareMatrix::zeros(k);
    let mut idx = k * r;
    for h in 0..k {
        let mut logits = vec![T::zero(); k];
        for (l, v) in logits.iter_mut().enumerate() {
            if l != h {
                *v = theta[idx];
                idx += 1;
            }
        }
        let top = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = logits.iter().map(|&a| (a - top).exp()).collect();
        let s: T = e.iter().copied().sum();
        for l in 0..k {
            transition[(h, l)] = e[l] / s;
        }
    }
    (betas, transition)
}

/// Step used for the central differences on coordinate `x`.
pub fn hessian_step<T: Real>(x: T) -> T {
    T::lit(1e-5).max(T::lit(1e-5) * x.abs())
}

/// Central-difference Hessian of `f` at `x`.
pub fn numerical_hessian<T: Real, F>(f: F, x: &[T]) -> Result<SquareMatrix<T>>
where
    F: Fn(&[T]) -> Result<T> + Sync,
{
    let n = x.len();
    let f0 = f(x)?;
    let steps: Vec<T> = x.iter().map(|&v| hessian_step(v)).collect();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let eval = |shifts: &[(usize, T)]| -> Result<T> {
        let mut y = x.to_vec();
        for &(i, d) in shifts {
            y[i] = y[i] + d;
        }
        f(&y)
    };
    let entries = pairs
        .par_iter()
        .map(|&(i, j)| {
            let (hi, hj) = (steps[i], steps[j]);
            if i == j {
                let up = eval(&[(i, hi)])?;
                let dn = eval(&[(i, -hi)])?;
                Ok((up - f0 - f0 + dn) / (hi * hi))
            } else {
                let pp = eval(&[(i, hi), (j, hj)])?;
                let pm = eval(&[(i, hi), (j, -hj)])?;
                let mp = eval(&[(i, -hi), (j, hj)])?;
                let mm = eval(&[(i, -hi), (j, -hj)])?;
                Ok((pp - pm - mp + mm) / (T::lit(4.0) * hi * hj))
            }
        })
        .collect::<Result<Vec<T>>>()?;
    let mut h = SquareMatrix::zeros(n);
    for (&(i, j), v) in pairs.iter().zip(entries) {
        h[(i, j)] = v;
        h[(j, i)] = v;
    }
    Ok(h)
}

/// Covariance from a negative Hessian. Returns the covariance restricted to
/// well-determined directions plus a per-coordinate flag that is `false`
/// where a non-positive eigen-direction loads on the coordinate.
pub fn covariance_from_information<T: Real>(info: &SquareMatrix<T>) -> (SquareMatrix<T>, Vec<bool>, bool) {
    let n = info.dim();
    let (vals, vecs) = info.symmetric_eigen();
    let max = vals.iter().copied().fold(T::zero(), T::max);
    let threshold = max * T::lit(1e-12);
    let mut ok = vec![true; n];
    let mut cov = SquareMatrix::zeros(n);
    let mut pd = max > T::zero();
    for (c, &lambda) in vals.iter().enumerate() {
        let v: Vec<T> = (0..n).map(|i| vecs[(i, c)]).collect();
        if lambda > threshold {
            cov.add_outer(lambda.recip(), &v);
        } else {
            pd = false;
            for i in 0..n {
                if v[i] * v[i] > T::lit(1e-6) {
                    ok[i] = false;
                }
            }
        }
    }
    (cov, ok, pd)
}

/// Standard errors from the numerical Hessian of the observed
/// log-likelihood in `(β, transition logits)` coordinates; transition SEs are
/// mapped back to the probability scale by the delta method.
pub fn standard_errors<T: Real, M: EmissionModel<T> + ?Sized>(
    model: &M,
    betas: &[Vec<T>],
    hmm: &HmmParams<T>,
) -> Result<StdErrors<T>> {
    let k = betas.len();
    let r = model.dim();
    let theta = pack(betas, &hmm.transition);
    let f = |th: &[T]| -> Result<T> {
        let (b, tr) = unpack(th, k, r);
        observed_loglik(
            model,
            &b,
            &HmmParams {
                transition: tr,
                initial: hmm.initial.clone(),
            },
        )
    };
    let hessian = numerical_hessian(f, &theta)?;
    let (cov, ok, positive_definite) = covariance_from_information(&hessian.scaled(-T::one()));
    let se = |i: usize| -> Option<T> { (ok[i] && cov[(i, i)] > T::zero()).then(|| cov[(i, i)].sqrt()) };
    let beta = (0..k).map(|s| (0..r).map(|c| se(s * r + c)).collect()).collect();
    let mut transition = vec![vec![None; k]; k];
    let mut base = k * r;
    for h in 0..k {
        // logit coordinates of row h, in column order skipping h
        let cols: Vec<usize> = (0..k).filter(|&l| l != h).collect();
        let idx: Vec<usize> = (0..cols.len()).map(|m| base + m).collect();
        base += cols.len();
        if idx.iter().any(|&i| !ok[i]) {
            continue;
        }
        let p = hmm.transition.row(h);
        for l in 0..k {
            let jac: Vec<T> = cols
                .iter()
                .map(|&m| p[l] * (if l == m { T::one() } else { T::zero() } - p[m]))
                .collect();
            let mut var = T::zero();
            for (a, &ia) in idx.iter().enumerate() {
                for (b, &ib) in idx.iter().enumerate() {
                    var = var + jac[a] * jac[b] * cov[(ia, ib)];
                }
            }
            transition[h][l] = (var >= T::zero()).then(|| var.sqrt());
        }
    }
    Ok(StdErrors {
        beta,
        transition,
        positive_definite,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_unpack_round_trip() {
        let betas: Vec<Vec<f64>> = vec![vec![1.0, 2.0], vec![-1.0, 0.5]];
        let tr = SquareMatrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]);
        let theta = pack(&betas, &tr);
        assert_eq!(theta.len(), 6);
        let (b, t) = unpack(&theta, 2, 2);
        assert_eq!(b, betas);
        for i in 0..2 {
            for j in 0..2 {
                assert!((t[(i, j)] - tr[(i, j)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn numerical_hessian_of_quadratic() {
        let f = |x: &[f64]| -> Result<f64> { Ok(-x[0] * x[0] - 3.0 * x[0] * x[1] - 2.0 * x[1] * x[1]) };
        let h = numerical_hessian(f, &[0.3, -1.2]).unwrap();
        assert!((h[(0, 0)] + 2.0).abs() < 1e-4);
        assert!((h[(0, 1)] + 3.0).abs() < 1e-4);
        assert!((h[(1, 1)] + 4.0).abs() < 1e-4);
    }

    #[test]
    fn singular_information_withholds_loaded_coordinates() {
        let info = SquareMatrix::<f64>::from_rows(&[vec![2.0, 0.0, 0.0], vec![0.0, 1.0, 1.0], vec![0.0, 1.0, 1.0]]);
        let (cov, ok, pd) = covariance_from_information(&info);
        assert!(!pd);
        assert_eq!(ok, vec![true, false, false]);
        assert!((cov[(0, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ordering_by_mean_distance() {
        let o = StateOrdering::MeanDistance {
            log_distance: 0,
            neg_distance: 1,
            eta_shift: [0.0, 1.0],
        };
        // means (4+1)/(0.43+1) = 3.5 and (0+1)/(1+1) = 0.5
        assert_eq!(o.order(&[vec![4.0, 0.43], vec![0.0, 1.0]]), vec![1, 0]);
        assert_eq!(
            StateOrdering::<f64>::None.order(&[vec![4.0, 0.43], vec![0.0, 1.0]]),
            vec![0, 1]
        );
    }
}
