//! Domain records shared by the simulator, the control sampler and the fitters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::circular::wrap_angle;
use crate::error::{Error, Result};
use crate::linalg::SquareMatrix;
use crate::scalar::Real;

/// Planar location in distance units.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point<T> {
    pub x: T,
    pub y: T,
}

impl<T: Real> Point<T> {
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// Bearing from `self` to `other`, in (-π, π].
    pub fn bearing_to(&self, other: &Self) -> T {
        wrap_angle((other.y - self.y).atan2(other.x - self.x))
    }

    pub fn distance_to(&self, other: &Self) -> T {
        (other.x - self.x).hypot(other.y - self.y)
    }

    /// The point reached by moving `distance` along `angle`.
    pub fn step(&self, angle: T, distance: T) -> Self {
        Self {
            x: self.x + distance * angle.cos(),
            y: self.y + distance * angle.sin(),
        }
    }

    pub fn rotated(&self, alpha: T) -> Self {
        let (s, c) = alpha.sin_cos();
        Self {
            x: c * self.x - s * self.y,
            y: s * self.x + c * self.y,
        }
    }
}

/// Ordered locations plus the polar decomposition of every step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory<T> {
    points: Vec<Point<T>>,
    angles: Vec<T>,
    distances: Vec<T>,
}

/// Splits consecutive points into motion angles and step lengths.
pub fn derive_steps<T: Real>(points: Vec<Point<T>>) -> Result<Trajectory<T>> {
    if points.len() < 3 {
        return Err(Error::TooFewPoints {
            needed: 3,
            got: points.len(),
        });
    }
    polar_steps(points)
}

/// As [`derive_steps`] but accepts a single step; used for truncated simulations.
pub(crate) fn polar_steps<T: Real>(points: Vec<Point<T>>) -> Result<Trajectory<T>> {
    if points.len() < 2 {
        return Err(Error::TooFewPoints {
            needed: 2,
            got: points.len(),
        });
    }
    if points.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite {
            what: "trajectory coordinates",
        });
    }
    let mut angles = Vec::with_capacity(points.len() - 1);
    let mut distances = Vec::with_capacity(points.len() - 1);
    for (index, w) in points.windows(2).enumerate() {
        let d = w[0].distance_to(&w[1]);
        if d <= T::zero() {
            return Err(Error::DuplicateConsecutivePoints { index });
        }
        angles.push(w[0].bearing_to(&w[1]));
        distances.push(d);
    }
    Ok(Trajectory {
        points,
        angles,
        distances,
    })
}

impl<T: Real> Trajectory<T> {
    /// Rebuilds the locations from a start point and per-step polar coordinates.
    pub fn from_steps(start: Point<T>, angles: &[T], distances: &[T]) -> Result<Self> {
        if angles.len() != distances.len() {
            return Err(Error::DimensionMismatch {
                what: "step angles/distances",
                expected: angles.len(),
                got: distances.len(),
            });
        }
        let mut points = Vec::with_capacity(angles.len() + 1);
        points.push(start);
        let mut cur = start;
        for (&a, &d) in angles.iter().zip(distances) {
            cur = cur.step(a, d);
            points.push(cur);
        }
        derive_steps(points)
    }

    pub fn points(&self) -> &[Point<T>] {
        &self.points
    }

    /// Motion angle of step `t` (from `points[t]` to `points[t + 1]`).
    pub fn angles(&self) -> &[T] {
        &self.angles
    }

    pub fn distances(&self) -> &[T] {
        &self.distances
    }

    pub fn n_steps(&self) -> usize {
        self.angles.len()
    }
}

/// One alternative of a choice set, used when assembling sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Alternative<T> {
    pub angle: T,
    pub distance: T,
    pub covariates: Vec<T>,
    pub offset: T,
}

/// Observed step (alternative 0) plus its matched controls.
///
/// Covariates are stored row-major, one row of length `dim` per alternative.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChoiceSet<T> {
    time_index: usize,
    dim: usize,
    angles: Vec<T>,
    distances: Vec<T>,
    covariates: Vec<T>,
    offsets: Vec<T>,
    /// `x_j - x_0` for `j >= 1`, row-major.
    #[serde(skip)]
    contrasts: Vec<T>,
    /// `offset_j - offset_0` for `j >= 1`.
    #[serde(skip)]
    offset_contrasts: Vec<T>,
}

impl<T: Real> ChoiceSet<T> {
    pub fn new(time_index: usize, alternatives: Vec<Alternative<T>>) -> Result<Self> {
        let first = alternatives
            .first()
            .ok_or_else(|| Error::Format("choice set without alternatives".into()))?;
        let dim = first.covariates.len();
        let n = alternatives.len();
        let mut set = Self {
            time_index,
            dim,
            angles: Vec::with_capacity(n),
            distances: Vec::with_capacity(n),
            covariates: Vec::with_capacity(n * dim),
            offsets: Vec::with_capacity(n),
            contrasts: Vec::with_capacity(n.saturating_sub(1) * dim),
            offset_contrasts: Vec::with_capacity(n.saturating_sub(1)),
        };
        for alt in alternatives {
            if alt.covariates.len() != dim {
                return Err(Error::DimensionMismatch {
                    what: "choice-set covariates",
                    expected: dim,
                    got: alt.covariates.len(),
                });
            }
            if !(alt.distance > T::zero()) {
                return Err(Error::Domain {
                    what: "alternative distance",
                    value: alt.distance.to_f64_lossy(),
                });
            }
            if alt.covariates.iter().any(|v| !v.is_finite()) || !alt.offset.is_finite() {
                return Err(Error::NonFinite {
                    what: "choice-set covariates",
                });
            }
            set.angles.push(wrap_angle(alt.angle));
            set.distances.push(alt.distance);
            set.covariates.extend(alt.covariates);
            set.offsets.push(alt.offset);
        }
        set.rebuild_contrasts();
        Ok(set)
    }

    fn rebuild_contrasts(&mut self) {
        let n = self.offsets.len();
        self.contrasts.clear();
        self.offset_contrasts.clear();
        for j in 1..n {
            for c in 0..self.dim {
                self.contrasts
                    .push(self.covariates[j * self.dim + c] - self.covariates[c]);
            }
            self.offset_contrasts.push(self.offsets[j] - self.offsets[0]);
        }
    }

    /// Covariates of the controls relative to the observed step, row-major.
    pub fn contrasts(&self) -> &[T] {
        &self.contrasts
    }

    /// Offsets of the controls relative to the observed step.
    pub fn offset_contrasts(&self) -> &[T] {
        &self.offset_contrasts
    }

    pub fn time_index(&self) -> usize {
        self.time_index
    }

    /// Covariate dimension `r`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `J + 1`.
    pub fn n_alternatives(&self) -> usize {
        self.angles.len()
    }

    pub fn covariates(&self, j: usize) -> &[T] {
        &self.covariates[j * self.dim..(j + 1) * self.dim]
    }

    pub fn covariate_matrix(&self) -> &[T] {
        &self.covariates
    }

    pub fn offsets(&self) -> &[T] {
        &self.offsets
    }

    pub fn angles(&self) -> &[T] {
        &self.angles
    }

    pub fn distances(&self) -> &[T] {
        &self.distances
    }

    /// Linear predictors `x_j^T beta + offset_j` into `out`.
    pub fn linear_predictors_into(&self, beta: &[T], out: &mut Vec<T>) {
        out.clear();
        if self.dim == 0 {
            out.extend_from_slice(&self.offsets);
            return;
        }
        out.extend(
            self.covariates
                .chunks_exact(self.dim)
                .zip(&self.offsets)
                .map(|(x, &o)| x.iter().zip(beta).fold(o, |acc, (&a, &b)| acc + a * b)),
        );
    }

    /// Same set with `delta` added to covariate `column` of every alternative.
    pub fn with_shifted_covariate(&self, column: usize, delta: T) -> Self {
        let mut out = self.clone();
        for row in out.covariates.chunks_exact_mut(self.dim) {
            row[column] = row[column] + delta;
        }
        out.rebuild_contrasts();
        out
    }
}

/// Coefficient vector of one hidden state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateParams<T> {
    pub beta: Vec<T>,
}

impl<T> StateParams<T> {
    pub fn new(beta: Vec<T>) -> Self {
        Self { beta }
    }
}

/// Transition matrix and initial distribution of the hidden chain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HmmParams<T> {
    pub transition: SquareMatrix<T>,
    pub initial: Vec<T>,
}

impl<T: Real> HmmParams<T> {
    pub fn new(transition: SquareMatrix<T>, initial: Vec<T>) -> Result<Self> {
        let hmm = Self { transition, initial };
        hmm.validate()?;
        Ok(hmm)
    }

    /// Uniform initial distribution.
    pub fn with_uniform_initial(transition: SquareMatrix<T>) -> Result<Self> {
        let k = transition.dim();
        Self::new(transition, vec![T::from_usize_lossy(k).recip(); k])
    }

    /// Two-state chain parameterized by switching probabilities
    /// `q1 = P(1 -> 2)` and `q2 = P(2 -> 1)`, started from its stationary law.
    pub fn two_state(q1: T, q2: T) -> Result<Self> {
        let one = T::one();
        let transition = SquareMatrix::from_rows(&[vec![one - q1, q1], vec![q2, one - q2]]);
        let initial = vec![q2 / (q1 + q2), q1 / (q1 + q2)];
        Self::new(transition, initial)
    }

    pub fn n_states(&self) -> usize {
        self.initial.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.initial.len();
        if k == 0 {
            return Err(Error::InvalidHmm("no states".into()));
        }
        if self.transition.dim() != k {
            return Err(Error::InvalidHmm(format!(
                "transition is {0}x{0} but initial has {k} entries",
                self.transition.dim()
            )));
        }
        let tol = T::lit(1e-12).max(T::epsilon() * T::lit(64.0));
        let check = |row: &[T], what: &str| -> Result<()> {
            if row.iter().any(|&p| !(p >= T::zero() && p <= T::one())) {
                return Err(Error::InvalidHmm(format!("{what} has entries outside [0, 1]")));
            }
            let s: T = row.iter().copied().sum();
            if (s - T::one()).abs() > tol {
                return Err(Error::InvalidHmm(format!("{what} sums to {s}")));
            }
            Ok(())
        };
        for h in 0..k {
            check(self.transition.row(h), &format!("transition row {h}"))?;
        }
        check(&self.initial, "initial distribution")
    }

    /// Stationary distribution (left Perron vector) by power iteration.
    pub fn stationary(&self) -> Vec<T> {
        let k = self.n_states();
        let mut v = vec![T::from_usize_lossy(k).recip(); k];
        for _ in 0..10_000 {
            let mut next = vec![T::zero(); k];
            for h in 0..k {
                for j in 0..k {
                    next[j] = next[j] + v[h] * self.transition[(h, j)];
                }
            }
            let diff = next.iter().zip(&v).fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()));
            v = next;
            if diff < T::epsilon() {
                break;
            }
        }
        v
    }

    /// Relabels states: new state `i` is old state `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let k = order.len();
        let mut transition = SquareMatrix::zeros(k);
        for (i, &oi) in order.iter().enumerate() {
            for (j, &oj) in order.iter().enumerate() {
                transition[(i, j)] = self.transition[(oi, oj)];
            }
        }
        Self {
            transition,
            initial: order.iter().map(|&o| self.initial[o]).collect(),
        }
    }
}

/// An attraction (or repulsion) point in the landscape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTarget<T> {
    pub name: String,
    pub x: T,
    pub y: T,
}

impl<T: Real> NamedTarget<T> {
    pub fn point(&self) -> Point<T> {
        Point::new(self.x, self.y)
    }
}

/// Raster of land-cover codes plus named targets.
///
/// `origin` is the south-west corner of the grid; `classes` is stored
/// row-major starting from the north-west cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LandscapeGrid<T> {
    pub origin: Point<T>,
    pub cell_size: T,
    pub n_rows: usize,
    pub n_cols: usize,
    pub classes: Vec<u8>,
    pub legend: BTreeMap<u8, String>,
    pub targets: Vec<NamedTarget<T>>,
}

impl<T: Real> LandscapeGrid<T> {
    pub fn new(
        origin: Point<T>,
        cell_size: T,
        n_rows: usize,
        n_cols: usize,
        classes: Vec<u8>,
        legend: BTreeMap<u8, String>,
        targets: Vec<NamedTarget<T>>,
    ) -> Result<Self> {
        if !(cell_size > T::zero()) || !cell_size.is_finite() {
            return Err(Error::Domain {
                what: "cell_size",
                value: cell_size.to_f64_lossy(),
            });
        }
        if classes.len() != n_rows * n_cols {
            return Err(Error::DimensionMismatch {
                what: "landscape classes",
                expected: n_rows * n_cols,
                got: classes.len(),
            });
        }
        Ok(Self {
            origin,
            cell_size,
            n_rows,
            n_cols,
            classes,
            legend,
            targets,
        })
    }

    /// A landscape that carries only targets (no land-cover raster).
    pub fn targets_only(targets: Vec<NamedTarget<T>>) -> Self {
        Self {
            origin: Point::new(T::zero(), T::zero()),
            cell_size: T::one(),
            n_rows: 0,
            n_cols: 0,
            classes: Vec::new(),
            legend: BTreeMap::new(),
            targets,
        }
    }

    /// Land-cover code under `p`, or `None` outside the raster.
    pub fn class_at(&self, p: &Point<T>) -> Option<u8> {
        let cx = ((p.x - self.origin.x) / self.cell_size).floor();
        let cy = ((p.y - self.origin.y) / self.cell_size).floor();
        if !(cx >= T::zero() && cy >= T::zero()) {
            return None;
        }
        let col = cx.to_usize()?;
        let row_from_south = cy.to_usize()?;
        if col >= self.n_cols || row_from_south >= self.n_rows {
            return None;
        }
        let row = self.n_rows - 1 - row_from_south;
        Some(self.classes[row * self.n_cols + col])
    }

    pub fn target(&self, name: &str) -> Option<Point<T>> {
        self.targets.iter().find(|t| t.name == name).map(NamedTarget::point)
    }

    pub fn class_code(&self, name: &str) -> Option<u8> {
        self.legend.iter().find(|(_, v)| v.as_str() == name).map(|(&k, _)| k)
    }
}

/// Standard errors of a fitted model. `None` marks coordinates withheld
/// because the negative Hessian was not positive definite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StdErrors<T> {
    /// Per state, per coefficient.
    pub beta: Vec<Vec<Option<T>>>,
    /// Per transition entry, probability scale (delta method through the logit map).
    pub transition: Vec<Vec<Option<T>>>,
    pub positive_definite: bool,
}

/// Output of the multi-state fitter.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult<T> {
    pub state_params: Vec<StateParams<T>>,
    pub hmm: HmmParams<T>,
    pub std_errors: Option<StdErrors<T>>,
    pub loglik: T,
    /// One row per choice set; columns are states.
    pub smooth_probs: Vec<Vec<T>>,
    pub n_em_iterations: usize,
    pub converged: bool,
    /// Observed log-likelihood after every E-step of the final run.
    pub loglik_trace: Vec<T>,
    /// Log-likelihood traces of the discarded short runs.
    pub short_run_traces: Vec<Vec<T>>,
    /// States whose transition row could not be updated in the last M-step.
    pub degenerate_states: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, SQRT_2};

    fn pts(v: &[(f64, f64)]) -> Vec<Point<f64>> {
        v.iter().map(|&(x, y)| Point::new(x, y)).collect()
    }

    #[test]
    fn axis_aligned_unit_steps() {
        let tr = derive_steps(pts(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0)])).unwrap();
        assert_eq!(tr.angles(), &[0.0, FRAC_PI_2]);
        assert_eq!(tr.distances(), &[1.0, 1.0]);
    }

    #[test]
    fn collinear_diagonal_steps() {
        let tr = derive_steps(pts(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)])).unwrap();
        for (&a, &d) in tr.angles().iter().zip(tr.distances()) {
            assert!((a - FRAC_PI_4).abs() < 1e-15);
            assert!((d - SQRT_2).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_step_is_rejected() {
        let err = derive_steps(pts(&[(0.0, 0.0), (0.0, 0.0), (1.0, 0.0)])).unwrap_err();
        assert!(matches!(err, Error::DuplicateConsecutivePoints { index: 0 }));
        assert!(matches!(
            derive_steps(pts(&[(0.0, 0.0), (1.0, 0.0)])),
            Err(Error::TooFewPoints { .. })
        ));
    }

    #[test]
    fn westward_step_is_pi() {
        let tr = derive_steps(pts(&[(0.0, 0.0), (-1.0, 0.0), (-1.0, -1.0)])).unwrap();
        assert_eq!(tr.angles()[0], std::f64::consts::PI);
        assert!((tr.angles()[1] + FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn hmm_validation() {
        let bad = SquareMatrix::from_rows(&[vec![0.5, 0.6], vec![0.2, 0.8]]);
        assert!(HmmParams::with_uniform_initial(bad).is_err());
        let hmm = HmmParams::two_state(0.1_f64, 0.2).unwrap();
        let st = hmm.stationary();
        assert!((st[0] - 2.0 / 3.0).abs() < 1e-12);
        let swapped = hmm.permuted(&[1, 0]);
        assert_eq!(swapped.transition[(0, 1)], 0.2);
    }

    #[test]
    fn grid_lookup_north_west_origin_rows() {
        // 2 rows x 3 cols; first CSV row is the northern one.
        let grid = LandscapeGrid::new(
            Point::new(0.0, 0.0),
            10.0,
            2,
            3,
            vec![1, 2, 3, 4, 5, 6],
            BTreeMap::new(),
            vec![],
        )
        .unwrap();
        assert_eq!(grid.class_at(&Point::new(5.0, 15.0)), Some(1));
        assert_eq!(grid.class_at(&Point::new(25.0, 5.0)), Some(6));
        assert_eq!(grid.class_at(&Point::new(-0.1, 5.0)), None);
        assert_eq!(grid.class_at(&Point::new(5.0, 20.0)), None);
        assert!(LandscapeGrid::new(Point::new(0.0, 0.0), 0.0, 0, 0, vec![], BTreeMap::new(), vec![]).is_err());
    }
}
