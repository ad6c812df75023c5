//! Circular statistics: angle wrapping, the consensus direction vector and
//! the von Mises distribution.

use rand::Rng;
use serde::Serialize;

use crate::scalar::Real;
use crate::special::log_bessel_i0;

/// Mean direction and concentration of a consensus von Mises model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Consensus<T> {
    pub mean_direction: T,
    pub concentration: T,
}

/// Maps any finite angle into (-π, π].
pub fn wrap_angle<T: Real>(a: T) -> T {
    let pi = T::PI();
    let two_pi = pi + pi;
    let mut r = a - two_pi * (a / two_pi).floor();
    // r is in [0, 2π) up to rounding.
    if r > pi {
        r = r - two_pi;
    }
    if r <= -pi {
        r = r + two_pi;
    }
    r
}

/// Direction and length of `κ_0 u(prev) + Σ κ_i u(θ_i)` where `u(a) = (cos a, sin a)`.
///
/// `kappas[0]` pairs with `prev_direction`, `kappas[i]` with `target_directions[i - 1]`.
/// Negative kappas encode repulsion.
pub fn consensus_vector<T: Real>(prev_direction: T, target_directions: &[T], kappas: &[T]) -> Consensus<T> {
    assert_eq!(
        kappas.len(),
        target_directions.len() + 1,
        "need one kappa per direction"
    );
    let (s0, c0) = prev_direction.sin_cos();
    let mut vx = kappas[0] * c0;
    let mut vy = kappas[0] * s0;
    for (&theta, &k) in target_directions.iter().zip(&kappas[1..]) {
        let (s, c) = theta.sin_cos();
        vx = vx + k * c;
        vy = vy + k * s;
    }
    let concentration = vx.hypot(vy);
    let mean_direction = if concentration == T::zero() {
        T::zero()
    } else {
        wrap_angle(vy.atan2(vx))
    };
    Consensus {
        mean_direction,
        concentration,
    }
}

/// `κ cos(φ - μ) - ln 2π - ln I_0(κ)`.
pub fn vonmises_logpdf<T: Real>(phi: T, mu: T, kappa: T) -> T {
    let two_pi = T::PI() + T::PI();
    kappa * (phi - mu).cos() - two_pi.ln() - log_bessel_i0(kappa)
}

/// Uniform draw on (-π, π].
pub fn uniform_angle<T: Real, R: Rng + ?Sized>(rng: &mut R) -> T {
    let u: f64 = rng.random();
    T::PI() - T::lit(2.0 * u) * T::PI()
}

/// Von Mises draw by the Best–Fisher (1979) wrapped-Cauchy rejection scheme.
pub fn vonmises_sample<T: Real, R: Rng + ?Sized>(rng: &mut R, mu: T, kappa: T) -> T {
    if !(kappa > T::lit(1e-9)) {
        return uniform_angle(rng);
    }
    let one = T::one();
    let two = T::lit(2.0);
    let tau = one + (one + T::lit(4.0) * kappa * kappa).sqrt();
    let rho = (tau - (two * tau).sqrt()) / (two * kappa);
    let r = (one + rho * rho) / (two * rho);
    loop {
        let u1 = T::lit(rng.random::<f64>());
        let u2 = T::lit(rng.random::<f64>());
        let z = (T::PI() * u1).cos();
        let f = (one + r * z) / (r + z);
        let c = kappa * (r - f);
        let accept = c * (two - c) - u2 > T::zero() || (u2 > T::zero() && (c / u2).ln() + one - c >= T::zero());
        if accept {
            let u3: f64 = rng.random();
            let dev = f.max(-one).min(one).acos();
            let theta = if u3 < 0.5 { mu - dev } else { mu + dev };
            return wrap_angle(theta);
        }
    }
}
