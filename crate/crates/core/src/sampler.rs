//! Matched control sampling and covariate assembly.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circular::wrap_angle;
use crate::distance::{gamma_sample, natural_to_gamma, ExpFamily, GammaFamily};
use crate::error::{Error, Result};
use crate::model::{Alternative, ChoiceSet, LandscapeGrid, Point, Trajectory};
use crate::rng::stream_rng;
use crate::scalar::Real;

/// How control step lengths are drawn. Control headings are always uniform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplingScheme<T> {
    /// Lengths uniform on `[0, max_distance]`.
    Uniform { max_distance: T },
    /// Lengths from the gamma family with natural parameter `eta`.
    Parametric { eta: [T; 2] },
}

impl<T: Real> SamplingScheme<T> {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Uniform { max_distance } if !(max_distance > T::zero()) || !max_distance.is_finite() => {
                Err(Error::Domain {
                    what: "uniform max_distance",
                    value: max_distance.to_f64_lossy(),
                })
            }
            Self::Parametric { eta } => natural_to_gamma(eta).map(|_| ()),
            _ => Ok(()),
        }
    }

    /// Short label used in reports.
    pub fn label(&self) -> &'static str {
        match self {
            Self::Uniform { .. } => "uniform",
            Self::Parametric { .. } => "parametric",
        }
    }

    /// Offset rule implied by the scheme.
    pub fn offset_rule(&self) -> OffsetRule {
        match self {
            Self::Uniform { .. } => OffsetRule::LogBaseMeasure,
            Self::Parametric { .. } => OffsetRule::Zero,
        }
    }

    /// Natural-parameter tilt to add back to fitted distance coefficients.
    pub fn tilt(&self) -> Option<[T; 2]> {
        match *self {
            Self::Uniform { .. } => None,
            Self::Parametric { eta } => Some(eta),
        }
    }
}

/// One column of the covariate vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateTerm {
    LogDistance,
    NegDistance,
    CosPersistence,
    /// Cosine between the alternative's heading and the bearing to a named target.
    CosTarget(String),
    /// One-hot land-cover class at the alternative's endpoint.
    LandcoverIndicator(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetRule {
    LogBaseMeasure,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateFormula {
    pub terms: Vec<CovariateTerm>,
    pub offset: OffsetRule,
}

impl CovariateFormula {
    pub fn new(terms: Vec<CovariateTerm>, offset: OffsetRule) -> Self {
        Self { terms, offset }
    }

    /// `(log h, -h, cos persistence, cos target_1, …)` for the given targets.
    pub fn bcrw<S: AsRef<str>>(target_names: &[S], offset: OffsetRule) -> Self {
        let mut terms = vec![
            CovariateTerm::LogDistance,
            CovariateTerm::NegDistance,
            CovariateTerm::CosPersistence,
        ];
        terms.extend(
            target_names
                .iter()
                .map(|n| CovariateTerm::CosTarget(n.as_ref().to_owned())),
        );
        Self { terms, offset }
    }

    pub fn dim(&self) -> usize {
        self.terms.len()
    }

    pub fn index_of(&self, term: &CovariateTerm) -> Option<usize> {
        self.terms.iter().position(|t| t == term)
    }

    /// Columns of `(log h, -h)` if both are present.
    pub fn distance_indices(&self) -> Option<(usize, usize)> {
        Some((
            self.index_of(&CovariateTerm::LogDistance)?,
            self.index_of(&CovariateTerm::NegDistance)?,
        ))
    }

    pub fn needs_grid(&self) -> bool {
        self.terms
            .iter()
            .any(|t| matches!(t, CovariateTerm::LandcoverIndicator(_)))
    }

    pub fn needs_landscape(&self) -> bool {
        self.needs_grid() || self.terms.iter().any(|t| matches!(t, CovariateTerm::CosTarget(_)))
    }

    /// Column names, using the landscape legend for land-cover classes.
    pub fn names<T: Real>(&self, landscape: Option<&LandscapeGrid<T>>) -> Vec<String> {
        self.terms
            .iter()
            .map(|t| match t {
                CovariateTerm::LogDistance => "log_distance".to_owned(),
                CovariateTerm::NegDistance => "neg_distance".to_owned(),
                CovariateTerm::CosPersistence => "cos_persistence".to_owned(),
                CovariateTerm::CosTarget(name) => format!("cos_target_{name}"),
                CovariateTerm::LandcoverIndicator(code) => match landscape.and_then(|l| l.legend.get(code)) {
                    Some(name) => format!("landcover_{name}"),
                    None => format!("landcover_{code}"),
                },
            })
            .collect()
    }
}

/// Draws `j` control steps `(angle, distance)`; zero lengths are redrawn.
pub fn sample_controls<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    scheme: &SamplingScheme<T>,
    j: usize,
) -> Result<Vec<(T, T)>> {
    scheme.validate()?;
    let gamma = match *scheme {
        SamplingScheme::Parametric { eta } => Some(natural_to_gamma(eta)?),
        SamplingScheme::Uniform { .. } => None,
    };
    let two_pi = T::PI() + T::PI();
    let mut out = Vec::with_capacity(j);
    for _ in 0..j {
        let angle = wrap_angle(T::PI() - two_pi * T::lit(rng.random::<f64>()));
        let distance = loop {
            let d = match (scheme, gamma) {
                (SamplingScheme::Uniform { max_distance }, _) => *max_distance * T::lit(rng.random::<f64>()),
                (_, Some(g)) => gamma_sample(rng, g),
                _ => unreachable!(),
            };
            if d > T::zero() {
                break d;
            }
        };
        out.push((angle, distance));
    }
    Ok(out)
}

/// Assembles the choice set at one time step; alternative 0 is the observed
/// step. Target bearings are taken from `origin` and shared by all
/// alternatives. Controls whose endpoint falls off the land-cover grid are
/// dropped; an observed endpoint off the grid is an error.
#[allow(clippy::too_many_arguments)]
pub fn build_choice_set<T: Real>(
    time_index: usize,
    observed: (T, T),
    controls: &[(T, T)],
    prev_angle: T,
    origin: Point<T>,
    landscape: Option<&LandscapeGrid<T>>,
    formula: &CovariateFormula,
) -> Result<ChoiceSet<T>> {
    if formula.needs_landscape() && landscape.is_none() {
        return Err(Error::MissingLandscape("formula uses targets or land cover".into()));
    }
    let mut bearings = Vec::with_capacity(formula.dim());
    for term in &formula.terms {
        if let CovariateTerm::CosTarget(name) = term {
            let target = landscape
                .and_then(|l| l.target(name))
                .ok_or_else(|| Error::UnknownTarget(name.clone()))?;
            bearings.push(origin.bearing_to(&target));
        }
    }
    let use_grid = formula.needs_grid();
    let mut alternatives = Vec::with_capacity(controls.len() + 1);
    for (j, &(angle, distance)) in std::iter::once(&observed).chain(controls).enumerate() {
        let class = if use_grid {
            let end = origin.step(angle, distance);
            match landscape.and_then(|l| l.class_at(&end)) {
                Some(c) => Some(c),
                None if j == 0 => {
                    return Err(Error::OutOfGrid {
                        t: time_index,
                        x: end.x.to_f64_lossy(),
                        y: end.y.to_f64_lossy(),
                    })
                }
                None => continue,
            }
        } else {
            None
        };
        let mut covariates = Vec::with_capacity(formula.dim());
        let mut target_idx = 0;
        for term in &formula.terms {
            covariates.push(match term {
                CovariateTerm::LogDistance => distance.ln(),
                CovariateTerm::NegDistance => -distance,
                CovariateTerm::CosPersistence => (angle - prev_angle).cos(),
                CovariateTerm::CosTarget(_) => {
                    target_idx += 1;
                    (angle - bearings[target_idx - 1]).cos()
                }
                CovariateTerm::LandcoverIndicator(code) => {
                    if class == Some(*code) {
                        T::one()
                    } else {
                        T::zero()
                    }
                }
            });
        }
        let offset = match formula.offset {
            OffsetRule::LogBaseMeasure => GammaFamily.log_base_measure(distance),
            OffsetRule::Zero => T::zero(),
        };
        alternatives.push(Alternative {
            angle,
            distance,
            covariates,
            offset,
        });
    }
    ChoiceSet::new(time_index, alternatives)
}

/// Stream label for the controls of one time step.
pub const CONTROLS_STREAM: &str = "controls";

/// Builds one choice set per step `t = 1, …, T-1` (step 0 only supplies the
/// previous heading). Each time step draws from its own RNG stream derived
/// from `seed`, so results do not depend on scheduling.
pub fn build_choice_sets<T: Real>(
    trajectory: &Trajectory<T>,
    scheme: &SamplingScheme<T>,
    j: usize,
    formula: &CovariateFormula,
    landscape: Option<&LandscapeGrid<T>>,
    seed: u64,
) -> Result<Vec<ChoiceSet<T>>> {
    scheme.validate()?;
    if j == 0 {
        return Err(Error::Domain {
            what: "number of controls",
            value: 0.0,
        });
    }
    if let SamplingScheme::Uniform { max_distance } = *scheme {
        let longest = trajectory.distances().iter().copied().fold(T::zero(), T::max);
        if max_distance < longest {
            return Err(Error::UniformRangeTooSmall {
                m: max_distance.to_f64_lossy(),
                max_distance: longest.to_f64_lossy(),
            });
        }
    }
    let angles = trajectory.angles();
    let distances = trajectory.distances();
    let points = trajectory.points();
    (1..trajectory.n_steps())
        .into_par_iter()
        .map(|t| {
            let mut rng = stream_rng(seed, CONTROLS_STREAM, t as u64);
            let controls = sample_controls(&mut rng, scheme, j)?;
            build_choice_set(
                t,
                (angles[t], distances[t]),
                &controls,
                angles[t - 1],
                points[t],
                landscape,
                formula,
            )
        })
        .collect()
}

/// Adds the control-sampling tilt back to the distance coefficients of every
/// state; other coefficients are untouched.
pub fn correct_parametric_bias<T: Real>(eta_ssf: &[[T; 2]], eta_tilde: [T; 2]) -> Vec<[T; 2]> {
    eta_ssf
        .iter()
        .map(|e| [e[0] + eta_tilde[0], e[1] + eta_tilde[1]])
        .collect()
}

/// Applies [`correct_parametric_bias`] in place to full coefficient vectors.
pub fn correct_coefficients<T: Real>(betas: &mut [Vec<T>], distance_indices: (usize, usize), eta_tilde: [T; 2]) {
    let (i1, i2) = distance_indices;
    let eta: Vec<[T; 2]> = betas.iter().map(|b| [b[i1], b[i2]]).collect();
    for (b, c) in betas.iter_mut().zip(correct_parametric_bias(&eta, eta_tilde)) {
        b[i1] = c[0];
        b[i2] = c[1];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NamedTarget;
    use std::f64::consts::PI;

    fn target_landscape() -> LandscapeGrid<f64> {
        LandscapeGrid::targets_only(vec![NamedTarget {
            name: "c".into(),
            x: 10.0,
            y: 0.0,
        }])
    }

    #[test]
    fn uniform_mean() {
        let mut rng = stream_rng(1, "t", 0);
        let xs = sample_controls(&mut rng, &SamplingScheme::Uniform { max_distance: 15.0 }, 100_000).unwrap();
        let m = xs.iter().map(|c| c.1).sum::<f64>() / xs.len() as f64;
        assert!((m - 7.5).abs() < 0.05);
        assert!(xs.iter().all(|c| c.0 > -PI && c.0 <= PI));
    }

    #[test]
    fn parametric_mean() {
        let mut rng = stream_rng(2, "t", 0);
        let xs = sample_controls(&mut rng, &SamplingScheme::Parametric { eta: [0.0, 1.0] }, 100_000).unwrap();
        let m = xs.iter().map(|c| c.1).sum::<f64>() / xs.len() as f64;
        assert!((m - 1.0).abs() < 0.02);
    }

    #[test]
    fn observed_covariates() {
        let f = CovariateFormula::bcrw(&["c"], OffsetRule::LogBaseMeasure);
        let l = target_landscape();
        let cs = build_choice_set(1, (0.0, 1.0), &[(PI, 2.0)], 0.0, Point::new(0.0, 0.0), Some(&l), &f).unwrap();
        assert_eq!(cs.covariates(0), &[0.0, -1.0, 1.0, 1.0]);
        let c1 = cs.covariates(1);
        assert!((c1[3] + 1.0).abs() < 1e-15);
        assert!(cs.offsets().iter().all(|o| *o == 0.0));
    }

    #[test]
    fn missing_target_is_an_error() {
        let f = CovariateFormula::bcrw(&["nowhere"], OffsetRule::Zero);
        let l = target_landscape();
        let r = build_choice_set(1, (0.0, 1.0), &[], 0.0, Point::new(0.0, 0.0), Some(&l), &f);
        assert!(matches!(r, Err(Error::UnknownTarget(_))));
        let r = build_choice_set(1, (0.0, 1.0), &[], 0.0, Point::new(0.0, 0.0), None, &f);
        assert!(matches!(r, Err(Error::MissingLandscape(_))));
    }

    #[test]
    fn bias_correction_examples() {
        let out = correct_parametric_bias::<f64>(&[[4.0, 0.43]], [0.0, 1.0]);
        assert!((out[0][0] - 4.0).abs() < 1e-15 && (out[0][1] - 1.43).abs() < 1e-12);
        assert_eq!(correct_parametric_bias(&[[4.0, 0.43]], [0.0, 0.0]), vec![[4.0, 0.43]]);
        assert_eq!(correct_parametric_bias(&[[0.0, 1.0]], [0.0, 1.0]), vec![[0.0, 2.0]]);
    }

    #[test]
    fn range_check() {
        let tr = Trajectory::from_steps(Point::new(0.0, 0.0), &[0.0, 0.5, 1.0], &[1.0, 20.0, 1.0]).unwrap();
        let f = CovariateFormula::new(vec![CovariateTerm::LogDistance], OffsetRule::LogBaseMeasure);
        let r = build_choice_sets(&tr, &SamplingScheme::Uniform { max_distance: 15.0 }, 5, &f, None, 1);
        assert!(matches!(r, Err(Error::UniformRangeTooSmall { .. })));
    }
}
