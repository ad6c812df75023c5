//! Replicated simulation studies and single-trajectory estimator comparisons.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bcrw::{simulate_trajectory, BcrwScenario};
use crate::em::{fit_bcrw_direct, fit_ssf, EmConfig, StateOrdering};
use crate::error::{Error, Result};
use crate::model::{FitResult, LandscapeGrid, NamedTarget, Point, Trajectory};
use crate::rng::{stream_rng, stream_seed};
use crate::sampler::{build_choice_sets, correct_coefficients, CovariateFormula, SamplingScheme};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Multi-state step selection over sampled controls.
    Ssf,
    /// Multi-state BCRW by direct likelihood.
    BcrwDirect,
}

impl Estimator {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Ssf => "ssf",
            Self::BcrwDirect => "bcrw_direct",
        }
    }
}

/// Scheme label used for estimators that do not sample controls.
pub const DIRECT_SCHEME: &str = "direct";

/// Maximum share of failed replicates before a study is flagged.
pub const MAX_FAILURE_SHARE: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct StudyConfig<T> {
    pub scenario: BcrwScenario<T>,
    pub n_replicates: usize,
    pub n_controls: usize,
    pub schemes: Vec<SamplingScheme<T>>,
    pub estimators: Vec<Estimator>,
    pub seed: u64,
    /// Template for every fit; ordering and seed are set per fit.
    pub em: EmConfig<T>,
}

impl<T: Real> StudyConfig<T> {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if self.n_replicates < 2 {
            return Err(Error::Config("a study needs at least 2 replicates".into()));
        }
        if self.n_controls == 0 {
            return Err(Error::Config("n_controls must be at least 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("no estimators selected".into()));
        }
        if self.estimators.contains(&Estimator::Ssf) && self.schemes.is_empty() {
            return Err(Error::Config(
                "the SSF estimator needs at least one sampling scheme".into(),
            ));
        }
        for s in &self.schemes {
            s.validate()?;
        }
        self.em.validate()?;
        if self.em.n_states != self.scenario.n_states() {
            return Err(Error::Config(format!(
                "em.n_states is {} but the scenario has {} states",
                self.em.n_states,
                self.scenario.n_states()
            )));
        }
        Ok(())
    }
}

/// Names `target1, target2, …` for the scenario targets.
pub fn target_names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("target{i}")).collect()
}

/// Landscape carrying only the scenario targets.
pub fn scenario_landscape<T: Real>(targets: &[Point<T>]) -> LandscapeGrid<T> {
    let named = target_names(targets.len())
        .into_iter()
        .zip(targets)
        .map(|(name, p)| NamedTarget { name, x: p.x, y: p.y })
        .collect();
    LandscapeGrid::targets_only(named)
}

/// Parameter names: off-diagonal transitions `pi[h->k]` then
/// `state{s}.{covariate}` per state, states numbered from 1.
pub fn parameter_names(n_states: usize, covariates: &[String]) -> Vec<String> {
    let mut names = Vec::new();
    for h in 0..n_states {
        for k in (0..n_states).filter(|&k| k != h) {
            names.push(format!("pi[{}->{}]", h + 1, k + 1));
        }
    }
    for s in 0..n_states {
        names.extend(covariates.iter().map(|c| format!("state{}.{c}", s + 1)));
    }
    names
}

/// Flattens a fit in the layout of [`parameter_names`], relabelling so that
/// output state `i` is fitted state `from_fitted[i]`.
pub fn flatten_fit<T: Real>(fit: &FitResult<T>, from_fitted: &[usize]) -> Vec<T> {
    let k = from_fitted.len();
    let mut out = Vec::new();
    for h in 0..k {
        for l in (0..k).filter(|&l| l != h) {
            out.push(fit.hmm.transition[(from_fitted[h], from_fitted[l])]);
        }
    }
    for &s in from_fitted {
        out.extend_from_slice(&fit.state_params[s].beta);
    }
    out
}

/// Standard errors in the layout of [`parameter_names`].
pub fn flatten_std_errors<T: Real>(fit: &FitResult<T>, from_fitted: &[usize]) -> Vec<Option<T>> {
    let k = from_fitted.len();
    let r = fit.state_params.first().map_or(0, |p| p.beta.len());
    let Some(se) = &fit.std_errors else {
        return vec![None; k * (k - 1) + k * r];
    };
    let mut out = Vec::new();
    for h in 0..k {
        for l in (0..k).filter(|&l| l != h) {
            out.push(se.transition[from_fitted[h]][from_fitted[l]]);
        }
    }
    for &s in from_fitted {
        out.extend_from_slice(&se.beta[s]);
    }
    out
}

/// True parameter vector of a scenario in the layout of [`parameter_names`].
pub fn scenario_truth<T: Real>(scenario: &BcrwScenario<T>) -> Vec<T> {
    let k = scenario.n_states();
    let mut out = Vec::new();
    for h in 0..k {
        for l in (0..k).filter(|&l| l != h) {
            out.push(scenario.hmm.transition[(h, l)]);
        }
    }
    for st in &scenario.states {
        out.extend(st.coefficients());
    }
    out
}

/// `truth_of_canonical[i]` is the true state sharing rank `i` in ascending
/// mean step length; `from_fitted[t]` inverts it for relabelling fits.
fn alignment<T: Real>(scenario: &BcrwScenario<T>) -> Vec<usize> {
    let means = scenario.mean_distances();
    let mut order: Vec<usize> = (0..means.len()).collect();
    order.sort_by(|&a, &b| means[a].partial_cmp(&means[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut from_fitted = vec![0; order.len()];
    for (canonical, &truth) in order.iter().enumerate() {
        from_fitted[truth] = canonical;
    }
    from_fitted
}

/// One fit of one replicate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateOutcome<T> {
    pub replicate: usize,
    pub n_steps: usize,
    pub truncated: bool,
    /// Estimates aligned to the true state labels; `None` when the fit failed.
    pub estimates: Option<Vec<T>>,
    pub error: Option<String>,
    pub converged: bool,
    pub loglik_trace: Vec<T>,
    pub short_run_traces: Vec<Vec<T>>,
}

/// Results for one (scheme, estimator) pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyCell<T> {
    pub scheme: String,
    pub estimator: Estimator,
    pub bias: Vec<T>,
    pub sd: Vec<T>,
    pub n_ok: usize,
    pub n_failed: usize,
    /// More than [`MAX_FAILURE_SHARE`] of the replicates failed.
    pub excessive_failures: bool,
    pub replicates: Vec<ReplicateOutcome<T>>,
}

impl<T: Real> StudyCell<T> {
    /// Successful estimates in replicate order.
    pub fn estimates(&self) -> Vec<&[T]> {
        self.replicates.iter().filter_map(|r| r.estimates.as_deref()).collect()
    }

    pub fn total_abs_bias(&self) -> T {
        self.bias.iter().map(|b| b.abs()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyReport<T> {
    pub parameters: Vec<String>,
    pub truth: Vec<T>,
    pub n_replicates: usize,
    pub n_controls: usize,
    pub seed: u64,
    pub cells: Vec<StudyCell<T>>,
    pub footer: String,
}

/// Mean deviation from `truth` (divisor `N`) and spread around the
/// replicate mean (divisor `N - 1`), per coordinate.
pub fn bias_and_sd<T: Real>(estimates: &[&[T]], truth: &[T]) -> (Vec<T>, Vec<T>) {
    let n = estimates.len();
    let p = truth.len();
    if n == 0 {
        return (vec![T::nan(); p], vec![T::nan(); p]);
    }
    let nf = T::from_usize_lossy(n);
    let mut bias = vec![T::zero(); p];
    let mut sd = vec![T::zero(); p];
    for i in 0..p {
        let mean = estimates.iter().map(|e| e[i]).sum::<T>() / nf;
        bias[i] = estimates.iter().map(|e| e[i] - truth[i]).sum::<T>() / nf;
        sd[i] = if n > 1 {
            (estimates.iter().map(|e| (e[i] - mean) * (e[i] - mean)).sum::<T>() / T::from_usize_lossy(n - 1)).sqrt()
        } else {
            T::nan()
        };
    }
    (bias, sd)
}

/// Stream label for trajectory simulation.
pub const SIMULATE_STREAM: &str = "simulate";

fn cell_keys<T: Real>(config: &StudyConfig<T>) -> Vec<(Option<SamplingScheme<T>>, Estimator)> {
    let mut keys = Vec::new();
    for &e in &config.estimators {
        match e {
            Estimator::Ssf => keys.extend(config.schemes.iter().map(|s| (Some(*s), e))),
            Estimator::BcrwDirect => keys.push((None, e)),
        }
    }
    keys
}

fn scheme_label<T: Real>(scheme: &Option<SamplingScheme<T>>) -> String {
    scheme
        .as_ref()
        .map_or_else(|| DIRECT_SCHEME.to_owned(), |s| s.label().to_owned())
}

/// Fits one trajectory with one estimator; estimates use canonical labels.
fn fit_one<T: Real>(
    trajectory: &Trajectory<T>,
    targets: &[Point<T>],
    scheme: Option<&SamplingScheme<T>>,
    n_controls: usize,
    em: &EmConfig<T>,
    controls_seed: u64,
) -> Result<FitResult<T>> {
    match scheme {
        Some(scheme) => {
            let landscape = scenario_landscape(targets);
            let formula = CovariateFormula::bcrw(&target_names(targets.len()), scheme.offset_rule());
            let sets = build_choice_sets(
                trajectory,
                scheme,
                n_controls,
                &formula,
                Some(&landscape),
                controls_seed,
            )?;
            let cfg = EmConfig {
                ordering: StateOrdering::for_formula(&formula, scheme),
                ..em.clone()
            };
            let mut fit = fit_ssf(&sets, &cfg)?;
            if let (Some(tilt), Some(idx)) = (scheme.tilt(), formula.distance_indices()) {
                let mut betas: Vec<Vec<T>> = fit.state_params.iter().map(|p| p.beta.clone()).collect();
                correct_coefficients(&mut betas, idx, tilt);
                for (p, b) in fit.state_params.iter_mut().zip(betas) {
                    p.beta = b;
                }
            }
            Ok(fit)
        }
        None => {
            let cfg = EmConfig {
                ordering: StateOrdering::bcrw(),
                ..em.clone()
            };
            fit_bcrw_direct(trajectory, targets, &cfg)
        }
    }
}

/// Runs the replicated study. Replicates run in parallel on independent
/// random streams; failed fits are recorded and excluded, never retried.
pub fn run_study<T: Real>(config: &StudyConfig<T>) -> Result<StudyReport<T>> {
    config.validate()?;
    let scenario = &config.scenario;
    let k = scenario.n_states();
    let keys = cell_keys(config);
    let from_fitted = alignment(scenario);
    let per_replicate: Vec<Vec<ReplicateOutcome<T>>> = (0..config.n_replicates)
        .into_par_iter()
        .map(|rep| {
            let mut rng = stream_rng(config.seed, SIMULATE_STREAM, rep as u64);
            let sim = simulate_trajectory(&mut rng, scenario);
            keys.iter()
                .map(|(scheme, _)| {
                    let label = scheme_label(scheme);
                    let path = match &sim {
                        Ok(p) => p,
                        Err(e) => return failed(rep, 0, false, e.to_string()),
                    };
                    let em = EmConfig {
                        seed: stream_seed(config.seed, &format!("multistart/{label}"), rep as u64),
                        ..config.em.clone()
                    };
                    let controls_seed = stream_seed(config.seed, &format!("controls/{label}"), rep as u64);
                    match fit_one(
                        &path.trajectory,
                        &scenario.targets,
                        scheme.as_ref(),
                        config.n_controls,
                        &em,
                        controls_seed,
                    ) {
                        Ok(fit) => ReplicateOutcome {
                            replicate: rep,
                            n_steps: path.trajectory.n_steps(),
                            truncated: path.truncated,
                            estimates: Some(flatten_fit(&fit, &from_fitted)),
                            error: None,
                            converged: fit.converged,
                            loglik_trace: fit.loglik_trace,
                            short_run_traces: fit.short_run_traces,
                        },
                        Err(e) => failed(rep, path.trajectory.n_steps(), path.truncated, e.to_string()),
                    }
                })
                .collect()
        })
        .collect();

    let truth = scenario_truth(scenario);
    let covariates = CovariateFormula::bcrw(&target_names(scenario.targets.len()), crate::sampler::OffsetRule::Zero)
        .names::<T>(None);
    let cells = keys
        .iter()
        .enumerate()
        .map(|(c, (scheme, estimator))| {
            let replicates: Vec<ReplicateOutcome<T>> = per_replicate.iter().map(|r| r[c].clone()).collect();
            let ok: Vec<&[T]> = replicates.iter().filter_map(|r| r.estimates.as_deref()).collect();
            let (bias, sd) = bias_and_sd(&ok, &truth);
            let n_ok = ok.len();
            let n_failed = replicates.len() - n_ok;
            StudyCell {
                scheme: scheme_label(scheme),
                estimator: *estimator,
                bias,
                sd,
                n_ok,
                n_failed,
                excessive_failures: (n_failed as f64) > MAX_FAILURE_SHARE * config.n_replicates as f64,
                replicates,
            }
        })
        .collect();
    Ok(StudyReport {
        parameters: parameter_names(k, &covariates),
        truth,
        n_replicates: config.n_replicates,
        n_controls: config.n_controls,
        seed: config.seed,
        cells,
        footer: "bias uses divisor n_ok, sd divisor n_ok - 1; Monte Carlo standard error of a bias entry is sd / sqrt(n_ok) \
                 (tolerance band bias +/- 3 sd / sqrt(n_ok)); replicates failing to fit are excluded and counted"
            .to_owned(),
    })
}

fn failed<T>(replicate: usize, n_steps: usize, truncated: bool, error: String) -> ReplicateOutcome<T> {
    ReplicateOutcome {
        replicate,
        n_steps,
        truncated,
        estimates: None,
        error: Some(error),
        converged: false,
        loglik_trace: Vec::new(),
        short_run_traces: Vec::new(),
    }
}

impl<T: Real> StudyReport<T> {
    /// Any cell lost more than the allowed share of replicates.
    pub fn has_excessive_failures(&self) -> bool {
        self.cells.iter().any(|c| c.excessive_failures)
    }

    pub fn cell(&self, scheme: &str, estimator: Estimator) -> Option<&StudyCell<T>> {
        self.cells
            .iter()
            .find(|c| c.scheme == scheme && c.estimator == estimator)
    }

    /// `parameter,scheme,estimator,bias,sd,n_ok`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["parameter", "scheme", "estimator", "bias", "sd", "n_ok"])?;
        for cell in &self.cells {
            for (i, name) in self.parameters.iter().enumerate() {
                w.write_record([
                    name.clone(),
                    cell.scheme.clone(),
                    cell.estimator.label().to_owned(),
                    cell.bias[i].to_string(),
                    cell.sd[i].to_string(),
                    cell.n_ok.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// One estimator column of an equivalence table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceColumn<T> {
    pub label: String,
    pub estimates: Vec<T>,
    pub std_errors: Vec<Option<T>>,
    pub loglik_trace: Vec<T>,
    pub short_run_traces: Vec<Vec<T>>,
}

/// Side-by-side estimates of the same trajectory; states use the canonical
/// ascending-mean-distance labels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport<T> {
    pub parameters: Vec<String>,
    pub n_controls: usize,
    pub columns: Vec<EquivalenceColumn<T>>,
}

impl<T: Real> EquivalenceReport<T> {
    pub fn column(&self, label: &str) -> Option<&EquivalenceColumn<T>> {
        self.columns.iter().find(|c| c.label == label)
    }

    /// `parameter,<label>,<label>_se,…`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["parameter".to_owned()];
        for c in &self.columns {
            header.push(c.label.clone());
            header.push(format!("{}_se", c.label));
        }
        w.write_record(&header)?;
        for (i, name) in self.parameters.iter().enumerate() {
            let mut row = vec![name.clone()];
            for c in &self.columns {
                row.push(c.estimates[i].to_string());
                row.push(c.std_errors[i].map_or_else(String::new, |v| v.to_string()));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fits one trajectory by direct BCRW likelihood and by the step selection
/// model under every scheme (distance terms corrected for parametric
/// sampling), with standard errors.
pub fn equivalence_report<T: Real>(
    trajectory: &Trajectory<T>,
    targets: &[Point<T>],
    n_controls: usize,
    schemes: &[SamplingScheme<T>],
    em: &EmConfig<T>,
    seed: u64,
) -> Result<EquivalenceReport<T>> {
    let em = EmConfig {
        std_errors: true,
        ..em.clone()
    };
    let identity: Vec<usize> = (0..em.n_states).collect();
    let mut runs: Vec<(String, Option<SamplingScheme<T>>)> = vec![(Estimator::BcrwDirect.label().to_owned(), None)];
    runs.extend(schemes.iter().map(|s| (format!("ssf_{}", s.label()), Some(*s))));
    let columns = runs
        .into_par_iter()
        .map(|(label, scheme)| {
            let cfg = EmConfig {
                seed: stream_seed(seed, &format!("multistart/{label}"), 0),
                ..em.clone()
            };
            let controls_seed = stream_seed(seed, &format!("controls/{label}"), 0);
            let fit = fit_one(trajectory, targets, scheme.as_ref(), n_controls, &cfg, controls_seed)?;
            Ok(EquivalenceColumn {
                label,
                estimates: flatten_fit(&fit, &identity),
                std_errors: flatten_std_errors(&fit, &identity),
                loglik_trace: fit.loglik_trace,
                short_run_traces: fit.short_run_traces,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let covariates =
        CovariateFormula::bcrw(&target_names(targets.len()), crate::sampler::OffsetRule::Zero).names::<T>(None);
    Ok(EquivalenceReport {
        parameters: parameter_names(em.n_states, &covariates),
        n_controls,
        columns,
    })
}
