//! Exponential-family step-length laws. The gamma family is the one
//! instance implemented; its natural parameters are `(shape - 1, 1 / scale)`
//! with sufficient statistics `(ln d, -d)` and unit base measure.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::special::{gamma_p, ln_gamma};

/// Descriptor of an exponential family `b(d) exp{η·T(d) - A(η)}` on `d > 0`.
pub trait ExpFamily<T: Real> {
    /// Dimension of the natural parameter.
    fn dim(&self) -> usize;
    fn sufficient_stats(&self, d: T) -> Vec<T>;
    fn log_base_measure(&self, d: T) -> T;
    /// Log-partition function; errors outside the natural parameter space.
    fn log_partition(&self, eta: &[T]) -> Result<T>;

    fn log_density(&self, d: T, eta: &[T]) -> Result<T> {
        let stats = self.sufficient_stats(d);
        let dot = stats.iter().zip(eta).fold(T::zero(), |acc, (&s, &e)| acc + s * e);
        Ok(self.log_base_measure(d) + dot - self.log_partition(eta)?)
    }
}

/// Gamma distances: `T(d) = (ln d, -d)`, `ln b(d) = 0`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GammaFamily;

impl<T: Real> ExpFamily<T> for GammaFamily {
    fn dim(&self) -> usize {
        2
    }

    fn sufficient_stats(&self, d: T) -> Vec<T> {
        vec![d.ln(), -d]
    }

    fn log_base_measure(&self, _d: T) -> T {
        T::zero()
    }

    fn log_partition(&self, eta: &[T]) -> Result<T> {
        let g = natural_to_gamma([eta[0], eta[1]])?;
        Ok(ln_gamma(g.shape) + g.shape * g.scale.ln())
    }
}

/// Shape/scale parameterization; the rate is `1 / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaParams<T> {
    pub shape: T,
    pub scale: T,
}

impl<T: Real> GammaParams<T> {
    pub fn new(shape: T, scale: T) -> Result<Self> {
        if !(shape > T::zero()) || !shape.is_finite() {
            return Err(Error::Domain {
                what: "gamma shape",
                value: shape.to_f64_lossy(),
            });
        }
        if !(scale > T::zero()) || !scale.is_finite() {
            return Err(Error::Domain {
                what: "gamma scale",
                value: scale.to_f64_lossy(),
            });
        }
        Ok(Self { shape, scale })
    }

    pub fn mean(&self) -> T {
        self.shape * self.scale
    }

    pub fn variance(&self) -> T {
        self.shape * self.scale * self.scale
    }
}

pub fn gamma_to_natural<T: Real>(g: GammaParams<T>) -> [T; 2] {
    [g.shape - T::one(), g.scale.recip()]
}

pub fn natural_to_gamma<T: Real>(eta: [T; 2]) -> Result<GammaParams<T>> {
    if !(eta[0] > -T::one()) || !(eta[1] > T::zero()) || !eta[0].is_finite() || !eta[1].is_finite() {
        return Err(Error::InvalidNaturalParams {
            eta1: eta[0].to_f64_lossy(),
            eta2: eta[1].to_f64_lossy(),
        });
    }
    Ok(GammaParams {
        shape: eta[0] + T::one(),
        scale: eta[1].recip(),
    })
}

/// Log density through the exponential-family decomposition.
pub fn gamma_logpdf<T: Real>(d: T, g: GammaParams<T>) -> T {
    let eta = gamma_to_natural(g);
    let log_partition = ln_gamma(g.shape) + g.shape * g.scale.ln();
    eta[0] * d.ln() - eta[1] * d - log_partition
}

pub fn gamma_cdf<T: Real>(d: T, g: GammaParams<T>) -> T {
    gamma_p(g.shape, d / g.scale)
}

/// Marsaglia–Tsang squeeze sampler, with the `u^{1/shape}` boost for shape < 1.
pub fn gamma_sample<T: Real, R: Rng + ?Sized>(rng: &mut R, g: GammaParams<T>) -> T {
    let one = T::one();
    let (shape, boost) = if g.shape < one {
        let u: f64 = rng.random();
        (g.shape + one, Some(T::lit(u).powf(g.shape.recip())))
    } else {
        (g.shape, None)
    };
    let d = shape - T::lit(1.0 / 3.0);
    let c = (T::lit(9.0) * d).sqrt().recip();
    let draw = loop {
        let x = T::lit(rng.sample::<f64, _>(StandardNormal));
        let v = one + c * x;
        if v <= T::zero() {
            continue;
        }
        let v = v * v * v;
        let u = T::lit(rng.random::<f64>());
        let x2 = x * x;
        if u < one - T::lit(0.0331) * x2 * x2 {
            break d * v;
        }
        if u > T::zero() && u.ln() < T::lit(0.5) * x2 + d * (one - v + v.ln()) {
            break d * v;
        }
    };
    let draw = match boost {
        Some(b) => draw * b,
        None => draw,
    };
    draw * g.scale
}

/// Quantile by bisection on the regularized incomplete gamma function.
pub fn gamma_quantile<T: Real>(p: T, g: GammaParams<T>) -> Result<T> {
    if !(p > T::zero() && p < T::one()) {
        return Err(Error::Domain {
            what: "quantile probability",
            value: p.to_f64_lossy(),
        });
    }
    let mut lo = T::zero();
    let mut hi = g.mean().max(g.scale);
    let mut guard = 0;
    while gamma_cdf(hi, g) < p {
        lo = hi;
        hi = hi + hi;
        guard += 1;
        if guard > 2000 {
            return Err(Error::Overflow {
                what: "gamma_quantile bracket",
                argument: p.to_f64_lossy(),
            });
        }
    }
    for _ in 0..400 {
        let mid = T::lit(0.5) * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if gamma_cdf(mid, g) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(T::lit(0.5) * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn g(shape: f64, scale: f64) -> GammaParams<f64> {
        GammaParams::new(shape, scale).unwrap()
    }

    #[test]
    fn natural_parameter_examples() {
        let e = gamma_to_natural(g(5.0, 0.7));
        assert_eq!(e[0], 4.0);
        assert!((e[1] - 10.0 / 7.0).abs() < 1e-15);
        assert_eq!(gamma_to_natural(g(1.0, 0.5)), [0.0, 2.0]);
        assert_eq!(gamma_to_natural(g(1.0, 1.0)), [0.0, 1.0]);
        let back = natural_to_gamma::<f64>([4.0, 10.0 / 7.0]).unwrap();
        assert_eq!(back.shape, 5.0);
        assert!((back.scale - 0.7).abs() < 1e-15);
        assert_eq!(natural_to_gamma([0.0, 1.0]).unwrap(), g(1.0, 1.0));
        assert!(matches!(
            natural_to_gamma([-1.2, 1.0]),
            Err(Error::InvalidNaturalParams { .. })
        ));
        assert!(natural_to_gamma([0.0, 0.0]).is_err());
    }

    #[test]
    fn logpdf_examples() {
        assert!((gamma_logpdf(1.0, g(1.0, 1.0)) + 1.0).abs() < 1e-15);
        let (d, a, s) = (3.5_f64, 5.0_f64, 0.7_f64);
        let direct = (a - 1.0) * d.ln() - d / s - 24f64.ln() - a * s.ln();
        assert!((gamma_logpdf(d, g(a, s)) - direct).abs() < 1e-12);
        let fam = GammaFamily.log_density(d, &[4.0, 1.0 / 0.7]).unwrap();
        assert!((fam - direct).abs() < 1e-12);
    }

    #[test]
    fn quantile_examples() {
        let med = gamma_quantile(0.5, g(1.0, 1.0)).unwrap();
        assert!((med - 2f64.ln()).abs() < 1e-12);
        assert!(gamma_quantile(0.999, g(5.0, 0.7)).unwrap() <= 15.0);
        assert!(gamma_quantile(0.999, g(1.0, 0.5)).unwrap() <= 15.0);
        assert!(gamma_quantile(1.0, g(1.0, 1.0)).is_err());
    }

    #[test]
    fn sampler_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| gamma_sample(&mut rng, g(5.0, 0.7))).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 3.5).abs() < 0.03, "mean {mean}");
        assert!((var - 2.45).abs() < 0.1, "var {var}");
        let small: f64 = (0..n).map(|_| gamma_sample(&mut rng, g(0.5, 2.0))).sum::<f64>() / n as f64;
        assert!((small - 1.0).abs() < 0.03, "shape<1 mean {small}");
    }
}
