//! Multi-state biased correlated random walk: simulation and the direct
//! per-step likelihood (gamma step length times consensus von Mises heading).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::circular::{consensus_vector, uniform_angle, vonmises_logpdf, vonmises_sample};
use crate::distance::{gamma_logpdf, gamma_sample, gamma_to_natural, GammaParams};
use crate::error::{Error, Result};
use crate::linalg::SquareMatrix;
use crate::model::{polar_steps, HmmParams, Point, Trajectory};
use crate::newton::{Evaluation, Objective};
use crate::scalar::Real;
use crate::special::{bessel_ratio, digamma, ln_gamma, log_bessel_i0, trigamma};

/// Movement parameters of one hidden state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcrwState<T> {
    /// `(κ_0, κ_1, …, κ_p)`: persistence then one weight per target.
    pub kappas: Vec<T>,
    pub gamma: GammaParams<T>,
}

impl<T: Real> BcrwState<T> {
    /// Coefficients in step-selection order `(η_1, η_2, κ_0, …, κ_p)`.
    pub fn coefficients(&self) -> Vec<T> {
        let eta = gamma_to_natural(self.gamma);
        let mut out = vec![eta[0], eta[1]];
        out.extend_from_slice(&self.kappas);
        out
    }
}

/// Axis-aligned box from which the start point is drawn uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StartRegion<T> {
    pub min: Point<T>,
    pub max: Point<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BcrwScenario<T> {
    pub hmm: HmmParams<T>,
    pub states: Vec<BcrwState<T>>,
    pub targets: Vec<Point<T>>,
    pub start_region: StartRegion<T>,
    pub stop_radius: T,
    pub max_steps: usize,
}

/// Side of the square map used by [`BcrwScenario::table1`]; the single target
/// sits at its centre and walks start in a 10×10 box at the south-west corner.
pub const TABLE1_MAP_SIDE: f64 = 1400.0;
pub const DEFAULT_MAX_STEPS: usize = 5000;

impl<T: Real> BcrwScenario<T> {
    pub fn new(
        hmm: HmmParams<T>,
        states: Vec<BcrwState<T>>,
        targets: Vec<Point<T>>,
        start_region: StartRegion<T>,
        stop_radius: T,
        max_steps: usize,
    ) -> Result<Self> {
        let s = Self {
            hmm,
            states,
            targets,
            start_region,
            stop_radius,
            max_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.hmm.validate()?;
        if self.states.len() != self.hmm.n_states() {
            return Err(Error::DimensionMismatch {
                what: "scenario states",
                expected: self.hmm.n_states(),
                got: self.states.len(),
            });
        }
        for st in &self.states {
            if st.kappas.len() != self.targets.len() + 1 {
                return Err(Error::DimensionMismatch {
                    what: "state kappas",
                    expected: self.targets.len() + 1,
                    got: st.kappas.len(),
                });
            }
            GammaParams::new(st.gamma.shape, st.gamma.scale)?;
        }
        if !(self.stop_radius > T::zero()) {
            return Err(Error::Domain {
                what: "stop_radius",
                value: self.stop_radius.to_f64_lossy(),
            });
        }
        if self.max_steps == 0 {
            return Err(Error::Domain {
                what: "max_steps",
                value: self.max_steps as f64,
            });
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    /// Two-state scenario: persistent, strongly attracted long steps (state 1)
    /// and persistent, mildly repelled short steps (state 2).
    pub fn table1() -> Self {
        let side = T::lit(TABLE1_MAP_SIDE);
        let half = side * T::lit(0.5);
        let states = vec![
            BcrwState {
                kappas: vec![T::lit(20.0), T::lit(15.0)],
                gamma: GammaParams {
                    shape: T::lit(5.0),
                    scale: T::lit(0.7),
                },
            },
            BcrwState {
                kappas: vec![T::lit(10.0), T::lit(-2.0)],
                gamma: GammaParams {
                    shape: T::one(),
                    scale: T::lit(0.5),
                },
            },
        ];
        Self {
            hmm: HmmParams::two_state(T::lit(0.1), T::lit(0.2)).expect("valid chain"),
            states,
            targets: vec![Point::new(half, half)],
            start_region: StartRegion {
                min: Point::new(T::zero(), T::zero()),
                max: Point::new(T::lit(10.0), T::lit(10.0)),
            },
            stop_radius: T::lit(30.0),
            max_steps: DEFAULT_MAX_STEPS,
        }
    }

    /// Mean step length per state.
    pub fn mean_distances(&self) -> Vec<T> {
        self.states.iter().map(|s| s.gamma.mean()).collect()
    }
}

fn sample_categorical<T: Real, R: Rng + ?Sized>(rng: &mut R, probs: &[T]) -> usize {
    let u = T::lit(rng.random::<f64>());
    let mut acc = T::zero();
    for (i, &p) in probs.iter().enumerate() {
        acc = acc + p;
        if u < acc {
            return i;
        }
    }
    // rounding: fall back to the last state with positive mass
    probs.iter().rposition(|p| *p > T::zero()).unwrap_or(0)
}

/// Markov chain of length `len + 1` started from `hmm.initial`.
pub fn simulate_state_chain<T: Real, R: Rng + ?Sized>(rng: &mut R, hmm: &HmmParams<T>, len: usize) -> Vec<usize> {
    let mut states = Vec::with_capacity(len + 1);
    let mut s = sample_categorical(rng, &hmm.initial);
    states.push(s);
    for _ in 0..len {
        s = sample_categorical(rng, hmm.transition.row(s));
        states.push(s);
    }
    states
}

/// A simulated walk and the hidden state of every step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulatedPath<T> {
    pub trajectory: Trajectory<T>,
    /// `states[t]` governs the step from `points[t]` to `points[t + 1]`.
    pub states: Vec<usize>,
    /// The walk hit `max_steps` before reaching a target.
    pub truncated: bool,
}

/// Simulates one walk: at each step the heading is von Mises around the
/// consensus of the previous heading and the bearings to the targets (taken
/// from the current point), and the length is gamma; the walk stops within
/// `stop_radius` of any target or after `max_steps` steps.
pub fn simulate_trajectory<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    scenario: &BcrwScenario<T>,
) -> Result<SimulatedPath<T>> {
    scenario.validate()?;
    let region = scenario.start_region;
    let ux = T::lit(rng.random::<f64>());
    let uy = T::lit(rng.random::<f64>());
    let mut here = Point::new(
        region.min.x + ux * (region.max.x - region.min.x),
        region.min.y + uy * (region.max.y - region.min.y),
    );
    let mut points = vec![here];
    let mut states = Vec::new();
    let mut heading: T = uniform_angle(rng);
    let mut state = sample_categorical(rng, &scenario.hmm.initial);
    let mut bearings = vec![T::zero(); scenario.targets.len()];
    let mut reached = false;
    for step in 0..scenario.max_steps {
        if step > 0 {
            state = sample_categorical(rng, scenario.hmm.transition.row(state));
        }
        let params = &scenario.states[state];
        for (b, target) in bearings.iter_mut().zip(&scenario.targets) {
            *b = here.bearing_to(target);
        }
        let consensus = consensus_vector(heading, &bearings, &params.kappas);
        let angle = vonmises_sample(rng, consensus.mean_direction, consensus.concentration);
        let mut dist = gamma_sample(rng, params.gamma);
        while !(dist > T::zero()) {
            dist = gamma_sample(rng, params.gamma);
        }
        here = here.step(angle, dist);
        points.push(here);
        states.push(state);
        heading = angle;
        if scenario
            .targets
            .iter()
            .any(|t| here.distance_to(t) <= scenario.stop_radius)
        {
            reached = true;
            break;
        }
    }
    let trajectory = polar_steps(points)?;
    Ok(SimulatedPath {
        trajectory,
        states,
        truncated: !reached,
    })
}

/// Log-density of one observed step under one state: gamma log-density of
/// the length plus the consensus von Mises log-density of the heading.
pub fn bcrw_step_loglik<T: Real>(
    angle: T,
    distance: T,
    prev_angle: T,
    target_bearings: &[T],
    kappas: &[T],
    gamma: GammaParams<T>,
) -> T {
    let c = consensus_vector(prev_angle, target_bearings, kappas);
    gamma_logpdf(distance, gamma) + vonmises_logpdf(angle, c.mean_direction, c.concentration)
}

/// Observed steps prepared for direct BCRW likelihood evaluation.
///
/// Step `t` of the fitted series is trajectory step `t + 1`; the first step
/// only provides the previous heading. Coefficients are ordered
/// `(η_1, η_2, κ_0, κ_1, …, κ_p)`.
#[derive(Debug, Clone)]
pub struct BcrwSteps<T> {
    n_dirs: usize,
    log_dist: Vec<T>,
    dist: Vec<T>,
    /// Per step, `cos(φ_t - ψ_i)` for the previous heading and every target bearing.
    cosines: Vec<T>,
    /// Per step, unit vectors `(cos ψ_i, sin ψ_i)` flattened.
    units: Vec<T>,
}

impl<T: Real> BcrwSteps<T> {
    pub fn from_trajectory(trajectory: &Trajectory<T>, targets: &[Point<T>]) -> Self {
        let n_dirs = targets.len() + 1;
        let n = trajectory.n_steps().saturating_sub(1);
        let mut steps = Self {
            n_dirs,
            log_dist: Vec::with_capacity(n),
            dist: Vec::with_capacity(n),
            cosines: Vec::with_capacity(n * n_dirs),
            units: Vec::with_capacity(2 * n * n_dirs),
        };
        let angles = trajectory.angles();
        let dists = trajectory.distances();
        let points = trajectory.points();
        for t in 1..trajectory.n_steps() {
            let phi = angles[t];
            steps.log_dist.push(dists[t].ln());
            steps.dist.push(dists[t]);
            let dirs = std::iter::once(angles[t - 1]).chain(targets.iter().map(|p| points[t].bearing_to(p)));
            for psi in dirs {
                steps.cosines.push((phi - psi).cos());
                let (s, c) = psi.sin_cos();
                steps.units.push(c);
                steps.units.push(s);
            }
        }
        steps
    }

    pub fn len(&self) -> usize {
        self.dist.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dist.is_empty()
    }

    /// `2 + n_targets + 1`.
    pub fn dim(&self) -> usize {
        2 + self.n_dirs
    }

    fn consensus(&self, t: usize, kappas: &[T]) -> (T, T) {
        let u = &self.units[2 * t * self.n_dirs..2 * (t + 1) * self.n_dirs];
        let mut vx = T::zero();
        let mut vy = T::zero();
        for (i, &k) in kappas.iter().enumerate() {
            vx = vx + k * u[2 * i];
            vy = vy + k * u[2 * i + 1];
        }
        (vx, vy)
    }

    /// Per-step log-likelihoods under `beta`; `None` outside the gamma domain.
    pub fn log_densities(&self, beta: &[T], out: &mut [T]) -> Option<()> {
        let (eta1, eta2) = (beta[0], beta[1]);
        if !(eta1 > -T::one() && eta2 > T::zero()) {
            return None;
        }
        let shape = eta1 + T::one();
        let log_partition = ln_gamma(shape) - shape * eta2.ln();
        let kappas = &beta[2..];
        let log_two_pi = (T::PI() + T::PI()).ln();
        for (t, o) in out.iter_mut().enumerate() {
            let (vx, vy) = self.consensus(t, kappas);
            let cos = &self.cosines[t * self.n_dirs..(t + 1) * self.n_dirs];
            let dot = cos.iter().zip(kappas).fold(T::zero(), |acc, (&c, &k)| acc + c * k);
            *o = eta1 * self.log_dist[t] - eta2 * self.dist[t] - log_partition + dot
                - log_two_pi
                - log_bessel_i0(vx.hypot(vy));
        }
        Some(())
    }
}

/// Weighted direct-likelihood objective for one state.
pub struct BcrwObjective<'a, T> {
    pub steps: &'a BcrwSteps<T>,
    pub weights: &'a [T],
}

impl<T: Real> Objective<T> for BcrwObjective<'_, T> {
    fn dim(&self) -> usize {
        self.steps.dim()
    }

    fn value(&self, x: &[T]) -> Option<T> {
        let mut ll = vec![T::zero(); self.steps.len()];
        self.steps.log_densities(x, &mut ll)?;
        let v = ll.iter().zip(self.weights).fold(T::zero(), |acc, (&l, &w)| acc + w * l);
        v.is_finite().then_some(v)
    }

    fn evaluate(&self, x: &[T]) -> Option<Evaluation<T>> {
        let value = self.value(x)?;
        let steps = self.steps;
        let dim = steps.dim();
        let nd = steps.n_dirs;
        let (eta1, eta2) = (x[0], x[1]);
        let shape = eta1 + T::one();
        let kappas = &x[2..];
        let mut gradient = vec![T::zero(); dim];
        let mut hessian = SquareMatrix::zeros(dim);
        let wsum: T = self.weights.iter().copied().sum();
        let (psi, tri) = (digamma(shape), trigamma(shape));
        let mut sum_wlog = T::zero();
        let mut sum_wd = T::zero();
        for t in 0..steps.len() {
            let w = self.weights[t];
            sum_wlog = sum_wlog + w * steps.log_dist[t];
            sum_wd = sum_wd + w * steps.dist[t];
        }
        gradient[0] = sum_wlog - wsum * (psi - eta2.ln());
        gradient[1] = -sum_wd + wsum * shape / eta2;
        hessian[(0, 0)] = -wsum * tri;
        hessian[(0, 1)] = wsum / eta2;
        hessian[(1, 0)] = wsum / eta2;
        hessian[(1, 1)] = -wsum * shape / (eta2 * eta2);

        let half = T::lit(0.5);
        let mut proj = vec![T::zero(); nd];
        let mut perp = vec![T::zero(); nd];
        for t in 0..steps.len() {
            let w = self.weights[t];
            if w == T::zero() {
                continue;
            }
            let (vx, vy) = steps.consensus(t, kappas);
            let len = vx.hypot(vy);
            let u = &steps.units[2 * t * nd..2 * (t + 1) * nd];
            let cos = &steps.cosines[t * nd..(t + 1) * nd];
            // d ln I0(|V|) / dV = A(|V|) V/|V|; curvature A' along V and A/|V| across it
            let (ex, ey, a_over_len, a_prime) = if len > T::lit(1e-8) {
                let a = bessel_ratio(len);
                (vx / len, vy / len, a / len, T::one() - a / len - a * a)
            } else {
                (T::one(), T::zero(), half, half)
            };
            let a_len = if len > T::lit(1e-8) {
                a_over_len * len
            } else {
                T::zero()
            };
            for i in 0..nd {
                proj[i] = u[2 * i] * ex + u[2 * i + 1] * ey;
                perp[i] = -u[2 * i] * ey + u[2 * i + 1] * ex;
                let grad_lse = if len > T::lit(1e-8) {
                    a_len * proj[i]
                } else {
                    half * (u[2 * i] * vx + u[2 * i + 1] * vy)
                };
                gradient[2 + i] = gradient[2 + i] + w * (cos[i] - grad_lse);
            }
            for i in 0..nd {
                for j in 0..nd {
                    let curv = a_prime * proj[i] * proj[j] + a_over_len * perp[i] * perp[j];
                    hessian[(2 + i, 2 + j)] = hessian[(2 + i, 2 + j)] - w * curv;
                }
            }
        }
        Some(Evaluation {
            value,
            gradient,
            hessian,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use std::f64::consts::PI;

    #[test]
    fn single_state_chain_is_constant() {
        let hmm = HmmParams::new(SquareMatrix::identity(1), vec![1.0]).unwrap();
        let mut rng = stream_rng(1, "t", 0);
        assert!(simulate_state_chain(&mut rng, &hmm, 50).iter().all(|&s| s == 0));
    }

    #[test]
    fn absorbing_chain_stays_put() {
        let hmm = HmmParams::new(SquareMatrix::identity(2), vec![1.0, 0.0]).unwrap();
        let mut rng = stream_rng(2, "t", 0);
        let chain = simulate_state_chain(&mut rng, &hmm, 100);
        assert_eq!(chain.len(), 101);
        assert!(chain.iter().all(|&s| s == 0));
    }

    #[test]
    fn step_loglik_uniform_unit_exponential() {
        let g = GammaParams::new(1.0, 1.0).unwrap();
        let v = bcrw_step_loglik(0.7, 1.0, -2.0, &[1.0], &[0.0, 0.0], g);
        assert!((v - (-1.0 - (2.0 * PI).ln())).abs() < 1e-14);
    }

    #[test]
    fn step_loglik_mode_in_heading() {
        let s = BcrwScenario::<f64>::table1();
        let st = &s.states[0];
        let c = consensus_vector(0.3, &[1.1], &st.kappas);
        let at_mode = bcrw_step_loglik(c.mean_direction, 3.5, 0.3, &[1.1], &st.kappas, st.gamma);
        let off = bcrw_step_loglik(c.mean_direction + 0.5, 3.5, 0.3, &[1.1], &st.kappas, st.gamma);
        assert!(at_mode > off);
    }

    #[test]
    fn prepared_steps_match_pointwise_loglik() {
        let s = BcrwScenario::<f64>::table1();
        let mut rng = stream_rng(3, "sim", 0);
        let path = simulate_trajectory(&mut rng, &s).unwrap();
        let steps = BcrwSteps::from_trajectory(&path.trajectory, &s.targets);
        let beta = s.states[1].coefficients();
        let mut ll = vec![0.0; steps.len()];
        steps.log_densities(&beta, &mut ll).unwrap();
        let tr = &path.trajectory;
        for t in [1usize, 5, 17] {
            let bearing = tr.points()[t].bearing_to(&s.targets[0]);
            let direct = bcrw_step_loglik(
                tr.angles()[t],
                tr.distances()[t],
                tr.angles()[t - 1],
                &[bearing],
                &s.states[1].kappas,
                s.states[1].gamma,
            );
            assert!((ll[t - 1] - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let s = BcrwScenario::<f64>::table1();
        let mut rng = stream_rng(4, "sim", 0);
        let path = simulate_trajectory(&mut rng, &s).unwrap();
        let steps = BcrwSteps::from_trajectory(&path.trajectory, &s.targets);
        let weights: Vec<f64> = (0..steps.len()).map(|t| 0.2 + 0.6 * ((t % 7) as f64 / 7.0)).collect();
        let obj = BcrwObjective {
            steps: &steps,
            weights: &weights,
        };
        for beta in [
            vec![2.0, 1.0, 5.0, 3.0],
            vec![0.5, 2.5, 0.0, 0.0],
            vec![3.0, 1.2, 15.0, -4.0],
        ] {
            let ev = obj.evaluate(&beta).unwrap();
            for i in 0..4 {
                let h = 1e-6;
                let mut up = beta.clone();
                up[i] += h;
                let mut dn = beta.clone();
                dn[i] -= h;
                let fd = (obj.value(&up).unwrap() - obj.value(&dn).unwrap()) / (2.0 * h);
                assert!(
                    (fd - ev.gradient[i]).abs() <= 1e-5 * (1.0 + fd.abs()),
                    "beta={beta:?} i={i} fd={fd} g={}",
                    ev.gradient[i]
                );
                let fdh: Vec<f64> = {
                    let gu = obj.evaluate(&up).unwrap().gradient;
                    let gd = obj.evaluate(&dn).unwrap().gradient;
                    gu.iter().zip(&gd).map(|(a, b)| (a - b) / (2.0 * h)).collect()
                };
                for j in 0..4 {
                    assert!(
                        (fdh[j] - ev.hessian[(j, i)]).abs() <= 1e-4 * (1.0 + fdh[j].abs()),
                        "H[{j},{i}]"
                    );
                }
            }
        }
    }

    #[test]
    fn walk_reaches_target_or_flags_truncation() {
        let mut s = BcrwScenario::<f64>::table1();
        s.max_steps = 5;
        let mut rng = stream_rng(5, "sim", 0);
        let path = simulate_trajectory(&mut rng, &s).unwrap();
        assert!(path.truncated);
        assert_eq!(path.trajectory.n_steps(), 5);
        assert_eq!(path.states.len(), 5);
    }
}
