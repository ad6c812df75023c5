//! Special functions: log-gamma and its derivatives, the regularized lower
//! incomplete gamma function, and modified Bessel functions of orders 0 and 1.

use crate::error::Error;
use crate::scalar::Real;

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Argument above which the Bessel functions switch from the power series
/// to the large-argument asymptotic expansion.
pub const BESSEL_SERIES_LIMIT: f64 = 15.0;

/// `ln Γ(x)` for `x > 0` (Lanczos approximation, reflection below 1/2).
pub fn ln_gamma<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    if x < half {
        let pi = T::PI();
        return (pi / (pi * x).sin().abs()).ln() - ln_gamma(T::one() - x);
    }
    let x = x - T::one();
    let mut acc = T::lit(LANCZOS[0]);
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        acc = acc + T::lit(c) / (x + T::from_usize_lossy(i));
    }
    let t = x + T::lit(LANCZOS_G) + half;
    half * (T::lit(2.0) * T::PI()).ln() + (x + half) * t.ln() - t + acc.ln()
}

/// Digamma function `ψ(x)` for `x > 0`.
pub fn digamma<T: Real>(mut x: T) -> T {
    let mut acc = T::zero();
    let shift = T::lit(10.0);
    while x < shift {
        acc = acc - x.recip();
        x = x + T::one();
    }
    let inv = x.recip();
    let inv2 = inv * inv;
    let series = inv2
        * (T::lit(1.0 / 12.0)
            - inv2
                * (T::lit(1.0 / 120.0)
                    - inv2 * (T::lit(1.0 / 252.0) - inv2 * (T::lit(1.0 / 240.0) - inv2 * T::lit(1.0 / 132.0)))));
    acc + x.ln() - T::lit(0.5) * inv - series
}

/// Trigamma function `ψ'(x)` for `x > 0`.
pub fn trigamma<T: Real>(mut x: T) -> T {
    let mut acc = T::zero();
    let shift = T::lit(10.0);
    while x < shift {
        acc = acc + (x * x).recip();
        x = x + T::one();
    }
    let inv = x.recip();
    let inv2 = inv * inv;
    let series = inv
        + T::lit(0.5) * inv2
        + inv
            * inv2
            * (T::lit(1.0 / 6.0)
                - inv2
                    * (T::lit(1.0 / 30.0)
                        - inv2 * (T::lit(1.0 / 42.0) - inv2 * (T::lit(1.0 / 30.0) - inv2 * T::lit(5.0 / 66.0)))));
    acc + series
}

/// Regularized lower incomplete gamma function `P(a, x)`.
///
/// Series expansion for `x < a + 1`, Lentz continued fraction for the
/// complement otherwise.
pub fn gamma_p<T: Real>(a: T, x: T) -> T {
    if x <= T::zero() {
        return T::zero();
    }
    let eps = T::epsilon();
    let log_prefactor = -x + a * x.ln() - ln_gamma(a);
    if x < a + T::one() {
        let mut ap = a;
        let mut del = a.recip();
        let mut sum = del;
        for _ in 0..10_000 {
            ap = ap + T::one();
            del = del * x / ap;
            sum = sum + del;
            if del.abs() < sum.abs() * eps {
                break;
            }
        }
        (sum.ln() + log_prefactor).exp().min(T::one())
    } else {
        let tiny = T::min_positive_value() / eps;
        let mut b = x + T::one() - a;
        let mut c = tiny.recip();
        let mut d = b.recip();
        let mut h = d;
        for i in 1..10_000 {
            let fi = T::from_usize_lossy(i);
            let an = -fi * (fi - a);
            b = b + T::lit(2.0);
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = d.recip();
            let del = d * c;
            h = h * del;
            if (del - T::one()).abs() < eps {
                break;
            }
        }
        T::one() - (log_prefactor + h.ln()).exp()
    }
}

fn bessel_series<T: Real>(x: T, order_one: bool) -> T {
    let q = x * x * T::lit(0.25);
    let mut term = if order_one { x * T::lit(0.5) } else { T::one() };
    let mut sum = term;
    let offset = if order_one { 1 } else { 0 };
    for m in 1..500 {
        let fm = T::from_usize_lossy(m);
        term = term * q / (fm * T::from_usize_lossy(m + offset));
        sum = sum + term;
        if term <= sum * T::epsilon() {
            break;
        }
    }
    sum
}

/// `ln(I_ν(x) · sqrt(2πx) · e^{-x})` via the asymptotic expansion.
fn bessel_asymptotic_log_scaled<T: Real>(x: T, order_one: bool) -> T {
    let mu = if order_one { T::lit(4.0) } else { T::zero() };
    let eight_x = T::lit(8.0) * x;
    let mut term = T::one();
    let mut sum = T::one();
    for k in 1..200 {
        let odd = T::from_usize_lossy(2 * k - 1);
        let next = term * (odd * odd - mu) / (T::from_usize_lossy(k) * eight_x);
        if next.abs() >= term.abs() {
            break;
        }
        term = next;
        sum = sum + term;
        if term.abs() < sum.abs() * T::epsilon() {
            break;
        }
    }
    sum.ln()
}

fn log_bessel<T: Real>(x: T, order_one: bool) -> T {
    let x = x.abs();
    if x <= T::lit(BESSEL_SERIES_LIMIT) {
        if order_one && x == T::zero() {
            return T::neg_infinity();
        }
        bessel_series(x, order_one).ln()
    } else {
        x - T::lit(0.5) * (T::lit(2.0) * T::PI() * x).ln() + bessel_asymptotic_log_scaled(x, order_one)
    }
}

/// `ln I_0(x)`; finite for every finite argument.
pub fn log_bessel_i0<T: Real>(x: T) -> T {
    log_bessel(x, false)
}

/// `ln I_1(x)` for `x ≥ 0` (`-inf` at zero).
pub fn log_bessel_i1<T: Real>(x: T) -> T {
    log_bessel(x, true)
}

/// Modified Bessel function of the first kind, order 0.
///
/// Errors with [`Error::Overflow`] when the value is not representable;
/// use [`log_bessel_i0`] for large arguments.
pub fn bessel_i0<T: Real>(x: T) -> Result<T, Error> {
    if x < T::zero() || !x.is_finite() {
        return Err(Error::Domain {
            what: "bessel_i0 argument",
            value: x.to_f64_lossy(),
        });
    }
    let v = log_bessel_i0(x).exp();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Overflow {
            what: "bessel_i0",
            argument: x.to_f64_lossy(),
        })
    }
}

/// Mean resultant length of a von Mises distribution: `I_1(κ) / I_0(κ)`.
pub fn bessel_ratio<T: Real>(kappa: T) -> T {
    let k = kappa.abs();
    if k == T::zero() {
        return T::zero();
    }
    (log_bessel_i1(k) - log_bessel_i0(k)).exp()
}
