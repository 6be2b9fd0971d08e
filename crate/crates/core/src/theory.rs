//! The analytic pipeline behind the Gaussian limit: scalar root-finders,
//! the characteristic ODE system of the deletion chain's fluid limit, its
//! conserved integrals, the explicit mean functions f1/f2 with analytic
//! gradients, the covariance quadrature psi, and the assembly of the
//! limiting covariance matrices for both random digraph models.
//!
//! Scaled coordinates: w = (alpha, beta_i, beta_o, gamma) are the
//! densities (nu, nu_i, nu_o, mu)/n. The "well" is the open region
//! beta_i, beta_o > 0, beta_i + beta_o < alpha, gamma/(alpha - beta_i) > 1,
//! gamma/(alpha - beta_o) > 1 in which the chain's trajectory stays with
//! high probability until the very end.

use serde::Serialize;

use crate::enumerate::{moments_scaled, Moments};
use crate::{Error, Result};

// ---------------------------------------------------------------------
// scalar functions

/// ell(z) = z/(1 - e^{-z}), the mean of a Poisson(z) conditioned to be
/// positive; ell(0) = 1, strictly increasing.
pub fn ell(z: f64) -> f64 {
    if z.abs() < 1e-4 {
        // 1 + z/2 + z^2/12 - z^4/720; truncation < 1e-26 here
        1.0 + z / 2.0 + z * z / 12.0 - z.powi(4) / 720.0
    } else {
        z / (-libm::expm1(-z))
    }
}

/// Derivative of [`ell`]; series near 0 avoids the 0/0 cancellation.
pub fn ell_prime(z: f64) -> f64 {
    if z.abs() < 1e-4 {
        0.5 + z / 6.0 - z.powi(3) / 180.0
    } else {
        let em = -libm::expm1(-z); // 1 - e^{-z}
        let ez = (-z).exp();
        (em - z * ez) / (em * em)
    }
}

/// The unique positive root of ell(z) = eta, to absolute accuracy 1e-12.
pub fn z_root(eta: f64) -> Result<f64> {
    if !(eta > 1.0) {
        return Err(Error::Domain(format!(
            "z_root needs eta > 1, got {eta}"
        )));
    }
    if !eta.is_finite() {
        return Err(Error::Domain("z_root needs finite eta".into()));
    }
    // ell(z) >= 1 + z/2, so hi is already an upper bracket
    let mut lo = 0.0f64;
    let mut hi = 2.0 * (eta - 1.0);
    debug_assert!(ell(hi) >= eta);
    let mut z = hi;
    for _ in 0..200 {
        let f = ell(z) - eta;
        if f.abs() <= 1e-13 * eta.max(1.0) {
            return Ok(z);
        }
        if f > 0.0 {
            hi = z;
        } else {
            lo = z;
        }
        let step = f / ell_prime(z);
        let mut next = z - step;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - z).abs() <= f64::EPSILON * z.abs() {
            return Ok(next);
        }
        z = next;
    }
    Err(Error::Numerical(format!("z_root stalled at eta = {eta}")))
}

/// The survival root: the unique root in (0, 1) of 1 - theta = e^{-c theta}
/// for c > 1, to absolute accuracy 1e-12.
pub fn theta(c: f64) -> Result<f64> {
    if !(c > 1.0) {
        return Err(Error::Domain(format!("theta needs c > 1, got {c}")));
    }
    let f = |t: f64| 1.0 - t - (-c * t).exp();
    // f > 0 on (0, theta), f < 0 on (theta, 1]; scan down from the
    // small-c expansion theta ~ 2(c-1) until f is positive
    let mut t = (2.0 * (c - 1.0)).min(1.0);
    while f(t) <= 0.0 {
        t *= 0.5;
        if t < 1e-300 {
            return Err(Error::Numerical(format!(
                "theta bracket collapsed at c = {c}"
            )));
        }
    }
    let mut lo = t;
    let mut hi = 1.0;
    let mut x = t;
    for _ in 0..200 {
        let fx = f(x);
        if fx > 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let fp = -1.0 + c * (-c * x).exp();
        let mut next = x - fx / fp;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= 1e-15 * (1.0 + x) {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

/// d theta/dc by implicit differentiation of 1 - theta = e^{-c theta}:
/// theta' = theta (1 - theta) / (1 - c (1 - theta)).
pub fn theta_prime(c: f64) -> Result<f64> {
    let th = theta(c)?;
    Ok(th * (1.0 - th) / (1.0 - c * (1.0 - th)))
}

// ---------------------------------------------------------------------
// the scaled state

/// Scaled state densities (vertices, zero-in, zero-out, arcs)/n.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WVector {
    pub alpha: f64,
    pub beta_i: f64,
    pub beta_o: f64,
    pub gamma: f64,
}

impl WVector {
    pub fn new(alpha: f64, beta_i: f64, beta_o: f64, gamma: f64) -> Self {
        WVector { alpha, beta_i, beta_o, gamma }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.alpha, self.beta_i, self.beta_o, self.gamma]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        WVector { alpha: a[0], beta_i: a[1], beta_o: a[2], gamma: a[3] }
    }
}

/// The likely scaled state right after the isolated-vertex cleanup of a
/// random digraph with arc density c: a fraction e^{-2c} of vertices is
/// isolated, e^{-c}(1 - e^{-c}) has only the in-side or only the out-side.
pub fn likely_initial(c: f64) -> WVector {
    let e = (-c).exp();
    WVector {
        alpha: -libm::expm1(-2.0 * c),
        beta_i: e * (1.0 - e),
        beta_o: e * (1.0 - e),
        gamma: c,
    }
}

/// Membership in the open well where trajectories live.
pub fn in_well(w: &WVector) -> bool {
    in_well_eps(w, 0.0)
}

/// Membership with margin: betas at least eps, slack eps in the linear
/// constraint, both ell-ratios at least 1 + eps.
pub fn in_well_eps(w: &WVector, eps: f64) -> bool {
    let d_i = w.alpha - w.beta_i;
    let d_o = w.alpha - w.beta_o;
    w.beta_i > eps
        && w.beta_o > eps
        && w.beta_i + w.beta_o < w.alpha - eps
        && d_i > 0.0
        && d_o > 0.0
        && w.gamma / d_i > 1.0 + eps
        && w.gamma / d_o > 1.0 + eps
}

/// The roots (z_i, z_o) with ell(z_i) = gamma/(alpha - beta_i) and
/// ell(z_o) = gamma/(alpha - beta_o).
pub fn z_pair(w: &WVector) -> Result<(f64, f64)> {
    let d_i = w.alpha - w.beta_i;
    let d_o = w.alpha - w.beta_o;
    if d_i <= 0.0 || d_o <= 0.0 {
        return Err(Error::Domain("z_pair needs alpha > beta_i, beta_o".into()));
    }
    Ok((z_root(w.gamma / d_i)?, z_root(w.gamma / d_o)?))
}

/// The two conserved integrals of the characteristic flow:
/// I1 = gamma (alpha - beta_i - beta_o)/((alpha - beta_i)(alpha - beta_o)),
/// I2 = z_i z_o / gamma.
pub fn integrals(w: &WVector) -> Result<(f64, f64)> {
    if !in_well(w) {
        return Err(Error::Domain(format!("integrals: not in the well: {w:?}")));
    }
    let (z_i, z_o) = z_pair(w)?;
    let d_i = w.alpha - w.beta_i;
    let d_o = w.alpha - w.beta_o;
    let i1 = w.gamma * (w.alpha - w.beta_i - w.beta_o) / (d_i * d_o);
    let i2 = z_i * z_o / w.gamma;
    Ok((i1, i2))
}

// ---------------------------------------------------------------------
// the characteristic ODE

/// Right-hand side of the characteristic system, in closed form. Equals
/// the scaled one-step drift (-E[a+b], E[r_i - a], E[r_o - b], -E[k]).
pub fn ode_rhs(w: &WVector) -> Result<[f64; 4]> {
    let (z_i, z_o) = z_pair(w)?;
    let (a, bi, bo, g) = (w.alpha, w.beta_i, w.beta_o, w.gamma);
    let bs = bi + bo;
    if bs <= 0.0 {
        return Err(Error::Domain("ode_rhs needs beta_i + beta_o > 0".into()));
    }
    let d_i = a - bi;
    let d_o = a - bo;
    let s = a - bi - bo;
    if s <= 0.0 {
        return Err(Error::Domain("ode_rhs needs alpha - beta_i - beta_o > 0".into()));
    }
    let (ei, eo) = ((-z_i).exp(), (-z_o).exp());
    let dd = d_i * d_o;
    let da = -1.0 - bi * bo * g * (ei + eo) / (bs * dd);
    let dbi = bi / bs * (g * s * ei / dd - 1.0 - bo * g * eo / dd);
    let dbo = bo / bs * (g * s * eo / dd - 1.0 - bi * g * ei / dd);
    let dg = -g / bs * (bo / d_i + bi / d_o);
    Ok([da, dbi, dbo, dg])
}

/// Time derivatives of (z_i, z_o) along the flow:
/// dz_i/dt = -beta_i z_i/((beta_i + beta_o)(alpha - beta_o)), mirrored.
pub fn z_speed(w: &WVector) -> Result<(f64, f64)> {
    let (z_i, z_o) = z_pair(w)?;
    let bs = w.beta_i + w.beta_o;
    if bs <= 0.0 {
        return Err(Error::Domain("z_speed needs beta_i + beta_o > 0".into()));
    }
    Ok((
        -w.beta_i * z_i / (bs * (w.alpha - w.beta_o)),
        -w.beta_o * z_o / (bs * (w.alpha - w.beta_i)),
    ))
}

// Fehlberg 4(5) embedded pair; returns (5th-order step, error estimate).
fn rkf45_step<const N: usize>(
    y: &[f64; N],
    h: f64,
    f: &mut dyn FnMut(&[f64; N]) -> Result<[f64; N]>,
) -> Result<([f64; N], f64)> {
    let lc = |y: &[f64; N], terms: &[(f64, &[f64; N])]| {
        let mut out = *y;
        for (c, k) in terms {
            for i in 0..N {
                out[i] += h * c * k[i];
            }
        }
        out
    };
    let k1 = f(y)?;
    let k2 = f(&lc(y, &[(0.25, &k1)]))?;
    let k3 = f(&lc(y, &[(3.0 / 32.0, &k1), (9.0 / 32.0, &k2)]))?;
    let k4 = f(&lc(
        y,
        &[
            (1932.0 / 2197.0, &k1),
            (-7200.0 / 2197.0, &k2),
            (7296.0 / 2197.0, &k3),
        ],
    ))?;
    let k5 = f(&lc(
        y,
        &[
            (439.0 / 216.0, &k1),
            (-8.0, &k2),
            (3680.0 / 513.0, &k3),
            (-845.0 / 4104.0, &k4),
        ],
    ))?;
    let k6 = f(&lc(
        y,
        &[
            (-8.0 / 27.0, &k1),
            (2.0, &k2),
            (-3544.0 / 2565.0, &k3),
            (1859.0 / 4104.0, &k4),
            (-11.0 / 40.0, &k5),
        ],
    ))?;
    let mut y5 = *y;
    let mut err = 0.0f64;
    for i in 0..N {
        let v5 = h
            * (16.0 / 135.0 * k1[i]
                + 6656.0 / 12825.0 * k3[i]
                + 28561.0 / 56430.0 * k4[i]
                - 9.0 / 50.0 * k5[i]
                + 2.0 / 55.0 * k6[i]);
        let v4 = h
            * (25.0 / 216.0 * k1[i]
                + 1408.0 / 2565.0 * k3[i]
                + 2197.0 / 4104.0 * k4[i]
                - 0.2 * k5[i]);
        y5[i] += v5;
        err = err.max((v5 - v4).abs());
    }
    Ok((y5, err))
}

/// A computed characteristic trajectory with its endpoint and the
/// conservation/monotonicity diagnostics gathered along the way.
#[derive(Debug, Clone, Serialize)]
pub struct CharTrajectory {
    pub w0: WVector,
    /// Accepted integration points as (t, state).
    pub points: Vec<(f64, WVector)>,
    /// Terminal state with the beta components zeroed.
    pub endpoint: WVector,
    pub t_end: f64,
    /// z_i at the stop; the flow was driven down to z_star + guard.
    pub z_end: f64,
    /// z_root of I1(w0): the z_i value the endpoint must reach.
    pub z_star: f64,
    /// beta_i + beta_o at the stop, before zeroing.
    pub beta_residual: f64,
    pub steps: usize,
    pub rejected: usize,
    /// Max |I1 - I1(w0)|, |I2 - I2(w0)|, |f1 - f1(w0)|, |f2 - f2(w0)|
    /// over accepted points.
    pub drift: [f64; 4],
}

impl CharTrajectory {
    /// (max I1 deviation, max I2 deviation) along the trajectory.
    pub fn conservation_residuals(&self) -> (f64, f64) {
        (self.drift[0], self.drift[1])
    }
}

/// Default stop tolerance on beta_i + beta_o.
pub const DEFAULT_BETA_TOL: f64 = 1e-10;
// t-phase hands over to the z_i-parameterized endgame below this beta sum.
const SWITCH_BETA: f64 = 0.02;
// stay this far above z_star; the flow is regular there but the quantities
// feeding psi's 1/beta_i factor are best kept strictly positive
const Z_GUARD: f64 = 1e-12;

/// Integrates the characteristic system from `w0` until the zero-degree
/// densities vanish: adaptive Fehlberg in t through the bulk, then in the
/// monotone variable z_i through the endgame, stopping at
/// beta_i + beta_o < tol. Monitors conservation and monotonicity.
pub fn integrate_characteristic(w0: &WVector, tol: f64) -> Result<CharTrajectory> {
    if !in_well(w0) {
        return Err(Error::Domain(format!("w0 outside the well: {w0:?}")));
    }
    let (i1_0, i2_0) = integrals(w0)?;
    if i1_0 <= 1.0 || i2_0 <= 1.0 {
        return Err(Error::Domain(format!(
            "integrals must exceed 1, got I1 = {i1_0}, I2 = {i2_0}"
        )));
    }
    let (f1_0, f2_0) = f_mean(w0)?;
    let z_star = z_root(i1_0)?;
    let step_tol = tol.min(1e-9) * 1e-2;

    let mut drift = [0.0f64; 4];
    let mut points: Vec<(f64, WVector)> = vec![(0.0, *w0)];
    let mut steps = 0usize;
    let mut rejected = 0usize;

    let record = |t: f64,
                      w: &WVector,
                      prev: &WVector,
                      drift: &mut [f64; 4],
                      points: &mut Vec<(f64, WVector)>|
     -> Result<()> {
        let slack = 1e-11 * (1.0 + w.alpha.abs() + w.gamma.abs());
        let (pw, nw) = (prev.as_array(), w.as_array());
        for i in 0..4 {
            if nw[i] > pw[i] + slack {
                return Err(Error::Numerical(format!(
                    "coordinate {i} increased along the trajectory at t = {t}"
                )));
            }
        }
        if let Ok((i1, i2)) = integrals(w) {
            drift[0] = drift[0].max((i1 - i1_0).abs());
            drift[1] = drift[1].max((i2 - i2_0).abs());
        }
        if let Ok((f1, f2)) = f_mean(w) {
            drift[2] = drift[2].max((f1 - f1_0).abs());
            drift[3] = drift[3].max((f2 - f2_0).abs());
        }
        points.push((t, *w));
        Ok(())
    };

    // phase 1: t as the independent variable
    let mut w = *w0;
    let mut t = 0.0f64;
    let mut h = 1e-3;
    let mut f_t = |y: &[f64; 4]| -> Result<[f64; 4]> {
        let wv = WVector::from_array(*y);
        if !in_well(&wv) {
            return Err(Error::Domain("left the well".into()));
        }
        ode_rhs(&wv)
    };
    while w.beta_i + w.beta_o >= SWITCH_BETA {
        if steps + rejected > 200_000 {
            return Err(Error::Numerical("step budget exhausted (t phase)".into()));
        }
        match rkf45_step(&w.as_array(), h, &mut f_t) {
            Ok((y, err)) => {
                let scale = step_tol * (1.0 + y.iter().fold(0.0f64, |m, v| m.max(v.abs())));
                if err <= scale {
                    let next = WVector::from_array(y);
                    t += h;
                    record(t, &next, &w, &mut drift, &mut points)?;
                    w = next;
                    steps += 1;
                    let grow = if err > 0.0 {
                        (0.9 * (scale / err).powf(0.2)).clamp(0.2, 5.0)
                    } else {
                        5.0
                    };
                    h *= grow;
                } else {
                    rejected += 1;
                    h *= (0.9 * (scale / err).powf(0.2)).clamp(0.1, 0.9);
                }
            }
            Err(_) => {
                rejected += 1;
                h *= 0.5;
                if h < 1e-16 {
                    return Err(Error::Numerical(
                        "step size collapsed before the switch".into(),
                    ));
                }
            }
        }
    }

    // phase 2: z_i as the independent variable, down to z_star
    // y = [alpha, beta_i, beta_o, gamma, t]
    let mut f_z = |y: &[f64; 5]| -> Result<[f64; 5]> {
        let wv = WVector::new(y[0], y[1], y[2], y[3]);
        if wv.beta_i <= 0.0 || wv.beta_o <= 0.0 {
            return Err(Error::Domain("beta crossed zero".into()));
        }
        let rhs = ode_rhs(&wv)?;
        let (dzi, _) = z_speed(&wv)?;
        if !(dzi < 0.0) {
            return Err(Error::Domain("z_i not decreasing".into()));
        }
        Ok([rhs[0] / dzi, rhs[1] / dzi, rhs[2] / dzi, rhs[3] / dzi, 1.0 / dzi])
    };
    let (mut z, _) = z_pair(&w)?;
    let z_lo = z_star + Z_GUARD;
    let mut y = [w.alpha, w.beta_i, w.beta_o, w.gamma, t];
    let mut hz = -((z - z_lo) / 64.0).max(1e-12);
    while y[1] + y[2] >= tol && z > z_lo {
        if steps + rejected > 400_000 {
            return Err(Error::Numerical("step budget exhausted (z phase)".into()));
        }
        if z + hz < z_lo {
            hz = z_lo - z;
        }
        match rkf45_step(&y, hz, &mut f_z) {
            Ok((y_new, err)) => {
                let scale = step_tol
                    * (1.0 + y_new.iter().fold(0.0f64, |m, v| m.max(v.abs())));
                if err <= scale {
                    let next = WVector::new(y_new[0], y_new[1], y_new[2], y_new[3]);
                    let prev = WVector::new(y[0], y[1], y[2], y[3]);
                    record(y_new[4], &next, &prev, &mut drift, &mut points)?;
                    z += hz;
                    y = y_new;
                    steps += 1;
                    let grow = if err > 0.0 {
                        (0.9 * (scale / err).powf(0.2)).clamp(0.2, 5.0)
                    } else {
                        5.0
                    };
                    hz = (hz * grow).max(z_lo - z);
                } else {
                    rejected += 1;
                    hz *= (0.9 * (scale / err).powf(0.2)).clamp(0.1, 0.9);
                }
            }
            Err(_) => {
                rejected += 1;
                hz *= 0.5;
                if hz.abs() < 1e-18 {
                    return Err(Error::Numerical(
                        "step size collapsed near the endpoint".into(),
                    ));
                }
            }
        }
    }

    Ok(CharTrajectory {
        w0: *w0,
        points,
        endpoint: WVector::new(y[0], 0.0, 0.0, y[3]),
        t_end: y[4],
        z_end: z,
        z_star,
        beta_residual: y[1] + y[2],
        steps,
        rejected,
        drift,
    })
}

// ---------------------------------------------------------------------
// the mean functions and their gradients

/// The limit means: f1 = u^2 P/(v_i v_o) and f2 = u^2 gamma/(v_i v_o)
/// with u = z(I1), v_i = z(gamma/(alpha - beta_i)), v_o mirrored, and
/// P = (alpha - beta_i)(alpha - beta_o)/(alpha - beta_i - beta_o).
/// At beta_i = beta_o = 0 they collapse to (alpha, gamma).
pub fn f_mean(w: &WVector) -> Result<(f64, f64)> {
    let d_i = w.alpha - w.beta_i;
    let d_o = w.alpha - w.beta_o;
    let s = w.alpha - w.beta_i - w.beta_o;
    if w.beta_i < 0.0 || w.beta_o < 0.0 || s <= 0.0 || d_i <= 0.0 || d_o <= 0.0 {
        return Err(Error::Domain(format!("f_mean outside domain: {w:?}")));
    }
    let u = z_root(w.gamma * s / (d_i * d_o))?;
    let v_i = z_root(w.gamma / d_i)?;
    let v_o = z_root(w.gamma / d_o)?;
    let p = d_i * d_o / s;
    let pre = u * u / (v_i * v_o);
    Ok((pre * p, pre * w.gamma))
}

/// Analytic gradients of f1 and f2 in (alpha, beta_i, beta_o, gamma),
/// assembled by implicit differentiation with z'(eta) = 1/ell'(z(eta)).
pub fn grad_f(w: &WVector) -> Result<([f64; 4], [f64; 4])> {
    let d_i = w.alpha - w.beta_i;
    let d_o = w.alpha - w.beta_o;
    let s = w.alpha - w.beta_i - w.beta_o;
    let g = w.gamma;
    if w.beta_i < 0.0 || w.beta_o < 0.0 || s <= 0.0 {
        return Err(Error::Domain(format!("grad_f outside domain: {w:?}")));
    }
    let u = z_root(g * s / (d_i * d_o))?;
    let v_i = z_root(g / d_i)?;
    let v_o = z_root(g / d_o)?;
    let p = d_i * d_o / s;
    let dd = d_i * d_o;

    // eta gradients
    let eta_u = [
        g * (dd - s * (d_i + d_o)) / (dd * dd),
        -g * w.beta_o / (d_i * d_i * d_o),
        -g * w.beta_i / (d_o * d_o * d_i),
        s / dd,
    ];
    let eta_i = [-g / (d_i * d_i), g / (d_i * d_i), 0.0, 1.0 / d_i];
    let eta_o = [-g / (d_o * d_o), 0.0, g / (d_o * d_o), 1.0 / d_o];
    // z gradients by the inverse-function rule
    let (lu, li, lo) = (ell_prime(u), ell_prime(v_i), ell_prime(v_o));
    let du: Vec<f64> = eta_u.iter().map(|e| e / lu).collect();
    let dvi: Vec<f64> = eta_i.iter().map(|e| e / li).collect();
    let dvo: Vec<f64> = eta_o.iter().map(|e| e / lo).collect();
    let dp = [
        (d_i + d_o) / s - dd / (s * s),
        -d_o / s + dd / (s * s),
        -d_i / s + dd / (s * s),
        0.0,
    ];

    let f1 = u * u * p / (v_i * v_o);
    let f2 = u * u * g / (v_i * v_o);
    let mut g1 = [0.0f64; 4];
    let mut g2 = [0.0f64; 4];
    for x in 0..4 {
        let common = 2.0 * du[x] / u - dvi[x] / v_i - dvo[x] / v_o;
        g1[x] = f1 * (common + dp[x] / p);
        g2[x] = f2 * (common + if x == 3 { 1.0 / g } else { 0.0 });
    }
    Ok((g1, g2))
}

/// Analytic gradients of the conserved integrals I1, I2.
pub fn grad_integrals(w: &WVector) -> Result<([f64; 4], [f64; 4])> {
    let d_i = w.alpha - w.beta_i;
    let d_o = w.alpha - w.beta_o;
    let s = w.alpha - w.beta_i - w.beta_o;
    let g = w.gamma;
    if s <= 0.0 || d_i <= 0.0 || d_o <= 0.0 {
        return Err(Error::Domain(format!("grad_integrals outside domain: {w:?}")));
    }
    let dd = d_i * d_o;
    let gi1 = [
        g * (dd - s * (d_i + d_o)) / (dd * dd),
        -g * w.beta_o / (d_i * d_i * d_o),
        -g * w.beta_i / (d_o * d_o * d_i),
        s / dd,
    ];
    let (z_i, z_o) = z_pair(w)?;
    let eta_i = [-g / (d_i * d_i), g / (d_i * d_i), 0.0, 1.0 / d_i];
    let eta_o = [-g / (d_o * d_o), 0.0, g / (d_o * d_o), 1.0 / d_o];
    let (li, lo) = (ell_prime(z_i), ell_prime(z_o));
    let mut gi2 = [0.0f64; 4];
    for x in 0..4 {
        let dzi = eta_i[x] / li;
        let dzo = eta_o[x] / lo;
        gi2[x] = (dzi * z_o + z_i * dzo) / g
            - if x == 3 { z_i * z_o / (g * g) } else { 0.0 };
    }
    Ok((gi1, gi2))
}

// ---------------------------------------------------------------------
// the covariance quadrature

/// Second-moment matrix M = E[A A^T] of the projected one-step increment
/// A = (a + b, r_i - a, r_o - b, k) under the limiting kernel at scaled
/// state w.
pub fn delta_second_moments(w: &WVector) -> Result<[[f64; 4]; 4]> {
    let m: Moments = moments_scaled(w.alpha, w.beta_i, w.beta_o, w.gamma)?;
    let m11 = m.a2 + 2.0 * m.ab + m.b2;
    let m12 = m.ar_i + m.br_i - m.a2 - m.ab;
    let m13 = m.ar_o + m.br_o - m.ab - m.b2;
    let m14 = m.ak + m.bk;
    let m22 = m.r_i2 - 2.0 * m.ar_i + m.a2;
    let m23 = m.r_ir_o - m.br_i - m.ar_o + m.ab;
    let m24 = m.r_ik - m.ak;
    let m33 = m.r_o2 - 2.0 * m.br_o + m.b2;
    let m34 = m.r_ok - m.bk;
    let m44 = m.k2;
    Ok([
        [m11, m12, m13, m14],
        [m12, m22, m23, m24],
        [m13, m23, m33, m34],
        [m14, m24, m34, m44],
    ])
}

/// The local covariance-production matrix Psi(w): Psi_{jk} =
/// E[(Delta w . grad f_j)(Delta w . grad f_k)] assembled from the
/// second moments and the analytic gradients.
pub fn psi_local(w: &WVector) -> Result<[[f64; 2]; 2]> {
    let m = delta_second_moments(w)?;
    let (g1, g2) = grad_f(w)?;
    // increment signs: Delta(alpha, beta_i, beta_o, gamma) =
    // (-(a+b), r_i - a, r_o - b, -k)
    let c1 = [-g1[0], g1[1], g1[2], -g1[3]];
    let c2 = [-g2[0], g2[1], g2[2], -g2[3]];
    let quad = |x: &[f64; 4], y: &[f64; 4]| {
        let mut s = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                s += x[i] * m[i][j] * y[j];
            }
        }
        s
    };
    let p11 = quad(&c1, &c1);
    let p12 = quad(&c1, &c2);
    let p22 = quad(&c2, &c2);
    Ok([[p11, p12], [p12, p22]])
}

/// The time-to-z_i conversion factor: dt = -dz_i/|dz_i/dt|, so the psi
/// integrand in z_i carries (beta_i + beta_o)(alpha - beta_o)/(beta_i z_i).
pub fn psi_z_factor(w: &WVector, z_i: f64) -> f64 {
    (w.beta_i + w.beta_o) * (w.alpha - w.beta_o) / (w.beta_i * z_i)
}

// 16-point Gauss-Legendre abscissas (positive half) and weights
const GL_X: [f64; 8] = [
    0.0950125098376374,
    0.2816035507792589,
    0.4580167776572274,
    0.6178762444026438,
    0.7554044083550030,
    0.8656312023878318,
    0.9445750230732326,
    0.9894009349916499,
];
const GL_W: [f64; 8] = [
    0.1894506104550685,
    0.1826034150449236,
    0.1691565193950025,
    0.1495959888165767,
    0.1246289712555339,
    0.0951585116824928,
    0.0622535239386479,
    0.0271524594117541,
];

/// Result of the adaptive psi quadrature.
#[derive(Debug, Clone, Serialize)]
pub struct PsiQuadrature {
    pub matrix: [[f64; 2]; 2],
    /// Panels in the final pass.
    pub panels: usize,
    /// Max entry change between the last two panel doublings.
    pub residual: f64,
}

// One quadrature pass: panels * 16 Gauss-Legendre nodes over [z_lo, z_hi],
// with w at each node supplied by `eval` (called in descending z order).
fn psi_pass(
    z_lo: f64,
    z_hi: f64,
    panels: usize,
    eval: &mut dyn FnMut(f64) -> Result<WVector>,
) -> Result<[[f64; 2]; 2]> {
    let width = (z_hi - z_lo) / panels as f64;
    let mut acc = [[0.0f64; 2]; 2];
    for p in (0..panels).rev() {
        let a = z_lo + p as f64 * width;
        let mid = a + 0.5 * width;
        let half = 0.5 * width;
        // descending nodes within the panel
        for idx in 0..16 {
            let (x, wgt) = if idx < 8 {
                (GL_X[7 - idx], GL_W[7 - idx])
            } else {
                (-GL_X[idx - 8], GL_W[idx - 8])
            };
            let z = mid + half * x;
            let w = eval(z)?;
            let psi = psi_local(&w)?;
            let factor = psi_z_factor(&w, z);
            for i in 0..2 {
                for j in 0..2 {
                    acc[i][j] += wgt * half * psi[i][j] * factor;
                }
            }
        }
    }
    Ok(acc)
}

// Builds an evaluator that tracks the characteristic through descending
// z_i values by resumable adaptive integration.
fn ode_evaluator(w0: WVector) -> Result<impl FnMut(f64) -> Result<WVector>> {
    let (z0, _) = z_pair(&w0)?;
    let mut y = w0.as_array();
    let mut z = z0;
    let mut hz = -1e-4f64;
    let mut f_z = move |y: &[f64; 4]| -> Result<[f64; 4]> {
        let wv = WVector::from_array(*y);
        if wv.beta_i <= 0.0 || wv.beta_o <= 0.0 {
            return Err(Error::Domain("beta crossed zero".into()));
        }
        let rhs = ode_rhs(&wv)?;
        let (dzi, _) = z_speed(&wv)?;
        if !(dzi < 0.0) {
            return Err(Error::Domain("z_i not decreasing".into()));
        }
        Ok([rhs[0] / dzi, rhs[1] / dzi, rhs[2] / dzi, rhs[3] / dzi])
    };
    Ok(move |z_target: f64| -> Result<WVector> {
        if z_target > z + 1e-12 {
            return Err(Error::InvalidArgument(
                "psi evaluator must be driven with descending z".into(),
            ));
        }
        let mut guard = 0usize;
        while z - z_target > 1e-14 {
            guard += 1;
            if guard > 200_000 {
                return Err(Error::Numerical("psi ODE stalled".into()));
            }
            if z + hz < z_target {
                hz = z_target - z;
            }
            match rkf45_step(&y, hz, &mut f_z) {
                Ok((y_new, err)) => {
                    let scale =
                        1e-11 * (1.0 + y_new.iter().fold(0.0f64, |m, v| m.max(v.abs())));
                    if err <= scale {
                        y = y_new;
                        z += hz;
                        let grow = if err > 0.0 {
                            (0.9 * (scale / err).powf(0.2)).clamp(0.2, 5.0)
                        } else {
                            5.0
                        };
                        hz *= grow;
                    } else {
                        hz *= (0.9 * (scale / err).powf(0.2)).clamp(0.1, 0.9);
                    }
                }
                Err(_) => {
                    hz *= 0.5;
                    if hz.abs() < 1e-18 {
                        return Err(Error::Numerical("psi ODE step collapsed".into()));
                    }
                }
            }
        }
        Ok(WVector::from_array(y))
    })
}

fn psi_converge(
    z_lo: f64,
    z_hi: f64,
    make_eval: &mut dyn FnMut() -> Result<Box<dyn FnMut(f64) -> Result<WVector>>>,
) -> Result<PsiQuadrature> {
    if z_hi - z_lo <= 1e-12 {
        return Ok(PsiQuadrature { matrix: [[0.0; 2]; 2], panels: 0, residual: 0.0 });
    }
    let mut panels = 8usize;
    let mut prev = psi_pass(z_lo, z_hi, panels, &mut *make_eval()?)?;
    loop {
        panels *= 2;
        let cur = psi_pass(z_lo, z_hi, panels, &mut *make_eval()?)?;
        let mut residual = 0.0f64;
        let mut scale = 1.0f64;
        for i in 0..2 {
            for j in 0..2 {
                residual = residual.max((cur[i][j] - prev[i][j]).abs());
                scale = scale.max(cur[i][j].abs());
            }
        }
        if residual <= 1e-9 * scale {
            return Ok(PsiQuadrature { matrix: cur, panels, residual });
        }
        if panels >= 512 {
            return Err(Error::Numerical(format!(
                "psi quadrature failed to converge: residual {residual} at {panels} panels"
            )));
        }
        prev = cur;
    }
}

/// The accumulated covariance matrix psi(w0): the integral of Psi along
/// the characteristic from w0 to its endpoint, computed in the z_i
/// variable with panel-doubled Gauss-Legendre quadrature.
pub fn psi_matrix_full(w0: &WVector) -> Result<PsiQuadrature> {
    if !in_well(w0) {
        return Err(Error::Domain(format!("w0 outside the well: {w0:?}")));
    }
    let (i1, _) = integrals(w0)?;
    let z_star = z_root(i1)?;
    let (z0, _) = z_pair(w0)?;
    let z_lo = z_star + 1e-9;
    let w0 = *w0;
    psi_converge(z_lo, z0, &mut || {
        let e = ode_evaluator(w0)?;
        Ok(Box::new(e) as Box<dyn FnMut(f64) -> Result<WVector>>)
    })
}

/// [`psi_matrix_full`] without the diagnostics.
pub fn psi_matrix(w0: &WVector) -> Result<[[f64; 2]; 2]> {
    Ok(psi_matrix_full(w0)?.matrix)
}

/// psi at the symmetric start, with the trajectory taken from the closed
/// form instead of the ODE. Oracle for [`psi_matrix`].
pub fn psi_matrix_symmetric(c: f64) -> Result<PsiQuadrature> {
    let th = theta(c)?;
    let z_lo = c * th + 1e-9;
    psi_converge(z_lo, c, &mut || {
        Ok(Box::new(move |z: f64| symmetric_trajectory(c, z))
            as Box<dyn FnMut(f64) -> Result<WVector>>)
    })
}

// ---------------------------------------------------------------------
// closed forms at the symmetric start

/// The closed-form point of the characteristic from the likely initial
/// state, parameterized by z = z_i = z_o in [c theta(c), c]:
/// gamma = z^2/c, alpha - beta = z(1 - e^{-z})/c,
/// alpha - 2 beta = (1 - e^{-z})^2.
pub fn symmetric_trajectory(c: f64, z: f64) -> Result<WVector> {
    if !(c > 1.0) {
        return Err(Error::Domain("symmetric_trajectory needs c > 1".into()));
    }
    let th = theta(c)?;
    if z < c * th - 1e-12 || z > c + 1e-12 {
        return Err(Error::Domain(format!(
            "z = {z} outside [c theta, c] = [{}, {c}]",
            c * th
        )));
    }
    let e = -libm::expm1(-z); // 1 - e^{-z}
    let gamma = z * z / c;
    let d = z * e / c; // alpha - beta
    let beta = d - e * e; // from alpha - 2 beta = e^2
    let alpha = 2.0 * d - e * e;
    Ok(WVector { alpha, beta_i: beta, beta_o: beta, gamma })
}

// ---------------------------------------------------------------------
// limiting matrices

/// Covariance of the scaled post-cleanup state (nu, nu_i, nu_o)/sqrt(n)
/// for arc density c, obtained by inverting the precision form
///
///   x' R x = c^2 [(x - x_i)^2 + (x - x_o)^2] / ((1 - e^{-c})^3 Var Z)
///          + x^2 e^{2c} + (x - x_i - x_o)^2 / (1 - e^{-c})^2
///          + (x_i^2 + x_o^2) / (e^{-c} - e^{-2c})
///
/// where Z is the c-truncated Poisson degree. The (2,3)-exchange symmetry
/// of R splits the inversion into a 2x2 symmetric block and the scalar
/// f + h on the antisymmetric direction (0, 1, -1).
pub fn k_matrix(c: f64) -> Result<[[f64; 3]; 3]> {
    if !(c > 1.0) {
        return Err(Error::Domain("k_matrix needs c > 1".into()));
    }
    let x = (-c).exp();
    // c^2 / ((1-x)^3 Var Z) with Var Z = c (1 - x - c x) / (1 - x)^2
    let f = c / ((1.0 - x) * (1.0 - (1.0 + c) * x));
    let u = (2.0 * c).exp();
    let g = 1.0 / ((1.0 - x) * (1.0 - x));
    let h = 1.0 / (x * (1.0 - x));
    // symmetric block [[2f+u+g, -2(f+g)], [-(f+g), f+2g+h]] on (x, x_i + x_o)
    let det = (2.0 * f + u + g) * (f + 2.0 * g + h) - 2.0 * (f + g) * (f + g);
    let k11 = (f + 2.0 * g + h) / det;
    let k12 = (f + g) / det;
    let s = 0.5 * (2.0 * f + u + g) / det;
    let d = 0.5 / (f + h);
    Ok([
        [k11, k12, k12],
        [k12, s + d, s - d],
        [k12, s - d, s + d],
    ])
}

/// The three limiting 2x2 covariance matrices: `b` for the fixed-arc
/// model, `btilde` for the (size, excess) coordinates, and `b_np` for the
/// Bernoulli model with its extra arc-count variance.
#[derive(Debug, Clone, Serialize)]
pub struct BMatrices {
    pub b: [[f64; 2]; 2],
    pub btilde: [[f64; 2]; 2],
    pub b_np: [[f64; 2]; 2],
    /// psi(w') as used in the assembly.
    pub psi: PsiQuadrature,
    /// 2x3 Jacobian of (f1, f2) in (alpha, beta_i, beta_o) at w'.
    pub jac: [[f64; 3]; 2],
    pub k: [[f64; 3]; 3],
}

/// Assembles B = psi(w') + J K J^T, the congruence Btilde = T^T B T with
/// T = [[1, -1], [0, 1]], and B_np = B + c mu' mu'^T where mu' is the
/// c-derivative of the limit mean (theta^2, c theta^2).
pub fn b_matrices_full(c: f64) -> Result<BMatrices> {
    let w = likely_initial(c);
    let psi = psi_matrix_full(&w)?;
    let (g1, g2) = grad_f(&w)?;
    let jac = [[g1[0], g1[1], g1[2]], [g2[0], g2[1], g2[2]]];
    let k = k_matrix(c)?;
    // B = psi + J K J^T
    let mut b = psi.matrix;
    for p in 0..2 {
        for q in 0..2 {
            let mut s = 0.0;
            for x in 0..3 {
                for y in 0..3 {
                    s += jac[p][x] * k[x][y] * jac[q][y];
                }
            }
            b[p][q] += s;
        }
    }
    // symmetrize against rounding
    let off = 0.5 * (b[0][1] + b[1][0]);
    b[0][1] = off;
    b[1][0] = off;
    let btilde = [
        [b[0][0], b[0][1] - b[0][0]],
        [b[0][1] - b[0][0], b[0][0] + b[1][1] - 2.0 * b[0][1]],
    ];
    let th = theta(c)?;
    let tp = theta_prime(c)?;
    let mu_p = [2.0 * th * tp, th * th + 2.0 * c * th * tp];
    let mut b_np = b;
    for p in 0..2 {
        for q in 0..2 {
            b_np[p][q] += c * mu_p[p] * mu_p[q];
        }
    }
    Ok(BMatrices { b, btilde, b_np, psi, jac, k })
}

/// The (B, Btilde, B_np) triple of [`b_matrices_full`].
pub fn b_matrices(c: f64) -> Result<([[f64; 2]; 2], [[f64; 2]; 2], [[f64; 2]; 2])> {
    let full = b_matrices_full(c)?;
    Ok((full.b, full.btilde, full.b_np))
}

// ---------------------------------------------------------------------
// the assembled report

#[derive(Debug, Clone, Serialize)]
pub struct TheoryDiagnostics {
    pub ode_steps: usize,
    pub ode_rejected: usize,
    pub quadrature_panels: usize,
    pub quadrature_residual: f64,
    pub conservation_i1: f64,
    pub conservation_i2: f64,
    pub conservation_f1: f64,
    pub conservation_f2: f64,
    pub endpoint_alpha: f64,
    pub endpoint_gamma: f64,
    /// |alpha_T - f1(w')| and |gamma_T - f2(w')|.
    pub endpoint_alpha_err: f64,
    pub endpoint_gamma_err: f64,
}

/// One row of the near-critical expansion check at c = 1 + eps.
#[derive(Debug, Clone, Serialize)]
pub struct EpsRow {
    pub eps: f64,
    /// Btilde_11/eps (limit 40).
    pub btilde11_over_eps: f64,
    /// Btilde_12/eps^2 (limit 60).
    pub btilde12_over_eps2: f64,
    /// Btilde_22/eps^3 (limit 272/3).
    pub btilde22_over_eps3: f64,
}

/// Everything the theory pipeline produces for one arc density.
#[derive(Debug, Clone, Serialize)]
pub struct TheoryReport {
    pub schema: String,
    pub c: f64,
    pub theta: f64,
    /// Limit means (theta^2, c theta^2) of the scaled core/giant sizes.
    pub mean: [f64; 2],
    pub psi: [[f64; 2]; 2],
    pub b: [[f64; 2]; 2],
    pub btilde: [[f64; 2]; 2],
    pub b_np: [[f64; 2]; 2],
    pub k: [[f64; 3]; 3],
    pub diagnostics: TheoryDiagnostics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_series: Option<Vec<EpsRow>>,
}

/// Runs the full pipeline at arc density c: trajectory diagnostics, psi,
/// the covariance assembly, and optionally the near-critical expansion
/// ratios at c = 1 + eps for each requested eps.
pub fn theory_report(c: f64, eps_grid: Option<&[f64]>) -> Result<TheoryReport> {
    let th = theta(c)?;
    let w = likely_initial(c);
    let traj = integrate_characteristic(&w, DEFAULT_BETA_TOL)?;
    let (f1, f2) = f_mean(&w)?;
    let full = b_matrices_full(c)?;
    let diagnostics = TheoryDiagnostics {
        ode_steps: traj.steps,
        ode_rejected: traj.rejected,
        quadrature_panels: full.psi.panels,
        quadrature_residual: full.psi.residual,
        conservation_i1: traj.drift[0],
        conservation_i2: traj.drift[1],
        conservation_f1: traj.drift[2],
        conservation_f2: traj.drift[3],
        endpoint_alpha: traj.endpoint.alpha,
        endpoint_gamma: traj.endpoint.gamma,
        endpoint_alpha_err: (traj.endpoint.alpha - f1).abs(),
        endpoint_gamma_err: (traj.endpoint.gamma - f2).abs(),
    };
    let eps_series = match eps_grid {
        None => None,
        Some(grid) => {
            let mut rows = Vec::with_capacity(grid.len());
            for &eps in grid {
                let (_, bt, _) = b_matrices(1.0 + eps)?;
                rows.push(EpsRow {
                    eps,
                    btilde11_over_eps: bt[0][0] / eps,
                    btilde12_over_eps2: bt[0][1] / (eps * eps),
                    btilde22_over_eps3: bt[1][1] / (eps * eps * eps),
                });
            }
            Some(rows)
        }
    };
    Ok(TheoryReport {
        schema: "1".into(),
        c,
        theta: th,
        mean: [th * th, c * th * th],
        psi: full.psi.matrix,
        b: full.b,
        btilde: full.btilde,
        b_np: full.b_np,
        k: full.k,
        diagnostics,
        eps_series,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ell_basics() {
        assert_eq!(ell(0.0), 1.0);
        // the series branch must agree with the direct formula at the seam
        let z = 0.9999e-4;
        let direct = z / (-libm::expm1(-z));
        assert!((ell(z) - direct).abs() < 1e-12);
        assert!((ell(1.0) - 1.0 / (1.0 - (-1.0f64).exp())).abs() < 1e-14);
        let mut prev = ell(0.0);
        for i in 1..100 {
            let v = ell(i as f64 * 0.1);
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn ell_prime_matches_finite_differences() {
        for z in [1e-6, 5e-5, 1e-3, 0.1, 1.0, 3.0, 10.0] {
            let h = 1e-6 * (1.0 + z);
            let fd = (ell(z + h) - ell(z - h)) / (2.0 * h);
            assert!(
                (ell_prime(z) - fd).abs() < 1e-8 * (1.0 + fd.abs()),
                "z = {z}: {} vs {fd}",
                ell_prime(z)
            );
        }
    }

    #[test]
    fn z_root_identities() {
        for c in [1.5f64, 2.0, 3.0] {
            let eta = c / (-libm::expm1(-c));
            let z = z_root(eta).unwrap();
            assert!((z - c).abs() < 1e-10, "c = {c}: z = {z}");
        }
        for z in [0.1f64, 1.0, 5.0] {
            let back = z_root(ell(z)).unwrap();
            assert!((back - z).abs() < 1e-10);
        }
        assert!(z_root(1.0).is_err());
        assert!(z_root(0.5).is_err());
        assert!(z_root(f64::NAN).is_err());
    }

    #[test]
    fn theta_values() {
        let t2 = theta(2.0).unwrap();
        assert!((t2 - 0.7968121300200202).abs() < 1e-12);
        assert!((1.0 - t2 - (-2.0 * t2).exp()).abs() < 1e-14);
        // near-critical expansion theta ~ 2 eps
        let eps = 1e-4;
        let t = theta(1.0 + eps).unwrap();
        assert!((t / (2.0 * eps) - 1.0).abs() < 1e-3);
        // c large: theta -> 1; the true root 1 - e^{-50} sits below one
        // f64 ulp of 1, so only the documented 1e-12 accuracy is promised
        assert!(theta(50.0).unwrap() > 1.0 - 1e-12);
        assert!(theta(1.0).is_err());
        assert!(theta(0.5).is_err());
    }

    #[test]
    fn theta_prime_matches_finite_differences() {
        for c in [1.2f64, 2.0, 3.0] {
            let h = 1e-6;
            let fd = (theta(c + h).unwrap() - theta(c - h).unwrap()) / (2.0 * h);
            let an = theta_prime(c).unwrap();
            assert!((an - fd).abs() < 1e-7 * (1.0 + fd.abs()), "c = {c}");
        }
    }

    #[test]
    fn likely_initial_integrals_equal_c() {
        for c in [1.2f64, 2.0, 3.0] {
            let w = likely_initial(c);
            assert!(in_well(&w), "c = {c}");
            let (i1, i2) = integrals(&w).unwrap();
            assert!((i1 - c).abs() < 1e-10, "c = {c}: I1 = {i1}");
            assert!((i2 - c).abs() < 1e-10, "c = {c}: I2 = {i2}");
        }
    }

    #[test]
    fn integrals_reject_outside_well() {
        let w = WVector::new(1.0, 0.6, 0.6, 2.0); // beta sum exceeds alpha
        assert!(integrals(&w).is_err());
    }

    #[test]
    fn symmetric_trajectory_endpoints() {
        for c in [1.2f64, 2.0, 3.0] {
            let w0 = likely_initial(c);
            let at_start = symmetric_trajectory(c, c).unwrap();
            for (x, y) in w0.as_array().iter().zip(at_start.as_array().iter()) {
                assert!((x - y).abs() < 1e-12, "c = {c}");
            }
            let th = theta(c).unwrap();
            let end = symmetric_trajectory(c, c * th).unwrap();
            assert!(end.beta_i.abs() < 1e-10, "c = {c}: beta {}", end.beta_i);
            assert!((end.alpha - th * th).abs() < 1e-10);
            assert!((end.gamma - c * th * th).abs() < 1e-10);
        }
        assert!(symmetric_trajectory(2.0, 3.0).is_err());
        assert!(symmetric_trajectory(2.0, 0.5).is_err());
    }

    #[test]
    fn symmetric_trajectory_conserves_integrals() {
        let c = 2.0;
        let th = theta(c).unwrap();
        for i in 1..20 {
            let z = c * th + (c - c * th) * i as f64 / 20.0;
            let w = symmetric_trajectory(c, z).unwrap();
            let (i1, i2) = integrals(&w).unwrap();
            assert!((i1 - c).abs() < 1e-9, "z = {z}: I1 = {i1}");
            assert!((i2 - c).abs() < 1e-9, "z = {z}: I2 = {i2}");
        }
    }

    #[test]
    fn ode_rhs_matches_moment_drift() {
        let points = [
            likely_initial(2.0),
            likely_initial(1.3),
            WVector::new(0.9, 0.1, 0.15, 1.7),
            WVector::new(0.8, 0.05, 0.02, 1.4),
        ];
        for w in points {
            assert!(in_well(&w), "{w:?}");
            let rhs = ode_rhs(&w).unwrap();
            let m =
                moments_scaled(w.alpha, w.beta_i, w.beta_o, w.gamma).unwrap();
            let drift = [-(m.a + m.b), m.r_i - m.a, m.r_o - m.b, -m.k];
            for i in 0..4 {
                assert!(
                    (rhs[i] - drift[i]).abs() < 1e-12,
                    "{w:?} component {i}: {} vs {}",
                    rhs[i],
                    drift[i]
                );
            }
        }
    }

    #[test]
    fn symmetric_rhs_is_symmetric() {
        let w = likely_initial(2.0);
        let rhs = ode_rhs(&w).unwrap();
        assert!((rhs[1] - rhs[2]).abs() < 1e-14);
    }

    #[test]
    fn z_speed_matches_chain_rule() {
        for w in [likely_initial(2.0), WVector::new(0.9, 0.1, 0.15, 1.7)] {
            let (z_i, z_o) = z_pair(&w).unwrap();
            let rhs = ode_rhs(&w).unwrap();
            let d_i = w.alpha - w.beta_i;
            let d_o = w.alpha - w.beta_o;
            // ell(z_i) = gamma/d_i, so ell'(z_i) z_i' = (gamma' d_i - gamma d_i')/d_i^2
            let chain_i =
                (rhs[3] * d_i - w.gamma * (rhs[0] - rhs[1])) / (d_i * d_i) / ell_prime(z_i);
            let chain_o =
                (rhs[3] * d_o - w.gamma * (rhs[0] - rhs[2])) / (d_o * d_o) / ell_prime(z_o);
            let (dzi, dzo) = z_speed(&w).unwrap();
            assert!((dzi - chain_i).abs() < 1e-10, "{w:?}: {dzi} vs {chain_i}");
            assert!((dzo - chain_o).abs() < 1e-10, "{w:?}: {dzo} vs {chain_o}");
        }
    }

    #[test]
    fn characteristic_reaches_the_symmetric_endpoint() {
        let c = 2.0;
        let th = theta(c).unwrap();
        let traj =
            integrate_characteristic(&likely_initial(c), DEFAULT_BETA_TOL).unwrap();
        assert!(
            (traj.endpoint.alpha - th * th).abs() < 1e-6,
            "alpha_T = {}, theta^2 = {}",
            traj.endpoint.alpha,
            th * th
        );
        assert!((traj.endpoint.gamma - c * th * th).abs() < 1e-6);
        assert!(traj.drift[0] < 1e-8 && traj.drift[1] < 1e-8);
        assert!(traj.drift[2] < 1e-8 && traj.drift[3] < 1e-8);
        assert!(traj.beta_residual < 1e-9);
        // t never decreases and coordinates never increase
        for pair in traj.points.windows(2) {
            assert!(pair[1].0 >= pair[0].0);
        }
    }

    #[test]
    fn characteristic_interior_matches_closed_form() {
        let c = 2.0;
        let traj =
            integrate_characteristic(&likely_initial(c), DEFAULT_BETA_TOL).unwrap();
        // compare at the z_i of several interior points
        for (_, w) in traj.points.iter().step_by(traj.points.len() / 7) {
            if !in_well(w) {
                continue;
            }
            let (z_i, _) = z_pair(w).unwrap();
            if z_i < c * theta(c).unwrap() + 1e-6 {
                continue;
            }
            let closed = symmetric_trajectory(c, z_i).unwrap();
            for (a, b) in w.as_array().iter().zip(closed.as_array().iter()) {
                assert!((a - b).abs() < 1e-7, "z = {z_i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn f_mean_boundary_and_start() {
        // boundary: f collapses to (alpha, gamma)
        let w = WVector::new(0.7, 0.0, 0.0, 1.5);
        let (f1, f2) = f_mean(&w).unwrap();
        assert!((f1 - 0.7).abs() < 1e-12);
        assert!((f2 - 1.5).abs() < 1e-12);
        for c in [1.5f64, 2.0, 3.0] {
            let th = theta(c).unwrap();
            let (f1, f2) = f_mean(&likely_initial(c)).unwrap();
            assert!((f1 - th * th).abs() < 1e-10, "c = {c}: f1 = {f1}");
            assert!((f2 - c * th * th).abs() < 1e-10, "c = {c}: f2 = {f2}");
        }
    }

    #[test]
    fn grad_f_matches_finite_differences() {
        for c in [1.5f64, 2.0, 3.0] {
            let w = likely_initial(c);
            let (g1, g2) = grad_f(&w).unwrap();
            let h = 1e-6;
            for x in 0..4 {
                let mut wp = w.as_array();
                let mut wm = w.as_array();
                wp[x] += h;
                wm[x] -= h;
                let fp = f_mean(&WVector::from_array(wp)).unwrap();
                let fm = f_mean(&WVector::from_array(wm)).unwrap();
                let fd1 = (fp.0 - fm.0) / (2.0 * h);
                let fd2 = (fp.1 - fm.1) / (2.0 * h);
                assert!(
                    (g1[x] - fd1).abs() <= 1e-6 * (1.0 + fd1.abs()),
                    "c = {c} x = {x}: {} vs {fd1}",
                    g1[x]
                );
                assert!(
                    (g2[x] - fd2).abs() <= 1e-6 * (1.0 + fd2.abs()),
                    "c = {c} x = {x}: {} vs {fd2}",
                    g2[x]
                );
            }
        }
    }

    #[test]
    fn pde_residual_vanishes() {
        let points = [
            likely_initial(1.5),
            likely_initial(2.0),
            WVector::new(0.9, 0.1, 0.15, 1.7),
            WVector::new(0.8, 0.05, 0.02, 1.4),
        ];
        for w in points {
            let rhs = ode_rhs(&w).unwrap();
            let (g1, g2) = grad_f(&w).unwrap();
            let r1: f64 = (0..4).map(|i| rhs[i] * g1[i]).sum();
            let r2: f64 = (0..4).map(|i| rhs[i] * g2[i]).sum();
            assert!(r1.abs() < 1e-9, "{w:?}: residual {r1}");
            assert!(r2.abs() < 1e-9, "{w:?}: residual {r2}");
        }
    }

    #[test]
    fn integral_gradients_are_orthogonal_to_flow() {
        let points = [
            likely_initial(2.0),
            WVector::new(0.9, 0.1, 0.15, 1.7),
            WVector::new(0.8, 0.05, 0.02, 1.4),
        ];
        for w in points {
            let rhs = ode_rhs(&w).unwrap();
            let (gi1, gi2) = grad_integrals(&w).unwrap();
            let r1: f64 = (0..4).map(|i| rhs[i] * gi1[i]).sum();
            let r2: f64 = (0..4).map(|i| rhs[i] * gi2[i]).sum();
            assert!(r1.abs() < 1e-10, "{w:?}: I1 residual {r1}");
            assert!(r2.abs() < 1e-10, "{w:?}: I2 residual {r2}");
        }
    }

    #[test]
    fn psi_is_psd_and_converged() {
        let q = psi_matrix_full(&likely_initial(2.0)).unwrap();
        let m = q.matrix;
        assert!((m[0][1] - m[1][0]).abs() < 1e-12);
        assert!(m[0][0] >= 0.0 && m[1][1] >= 0.0);
        assert!(m[0][0] * m[1][1] - m[0][1] * m[0][1] >= -1e-12);
        assert!(q.residual < 1e-6);
    }

    #[test]
    fn psi_ode_matches_symmetric_oracle() {
        let a = psi_matrix_full(&likely_initial(2.0)).unwrap().matrix;
        let b = psi_matrix_symmetric(2.0).unwrap().matrix;
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (a[i][j] - b[i][j]).abs() < 1e-7,
                    "entry ({i},{j}): {} vs {}",
                    a[i][j],
                    b[i][j]
                );
            }
        }
    }

    #[test]
    fn psi_near_critical_scale() {
        let eps = 0.01;
        let m = psi_matrix(&likely_initial(1.0 + eps)).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let ratio = m[i][j] / eps;
                assert!(
                    (ratio - 40.0).abs() < 40.0 * 0.12,
                    "entry ({i},{j}): psi/eps = {ratio}"
                );
            }
        }
    }

    #[test]
    fn psi_local_is_psd_along_trajectory() {
        let c = 2.0;
        let th = theta(c).unwrap();
        for i in 1..10 {
            let z = c * th + (c - c * th) * i as f64 / 10.0;
            let w = symmetric_trajectory(c, z).unwrap();
            let p = psi_local(&w).unwrap();
            assert!(p[0][0] >= 0.0 && p[1][1] >= 0.0);
            assert!(p[0][0] * p[1][1] - p[0][1] * p[0][1] >= -1e-12);
        }
    }

    #[test]
    fn k_matrix_shape_and_psd() {
        for c in [1.2f64, 1.5, 2.0, 3.0, 5.0] {
            let k = k_matrix(c).unwrap();
            assert_eq!(k[0][1], k[0][2]);
            assert_eq!(k[1][1], k[2][2]);
            assert_eq!(k[1][2], k[2][1]);
            // eigenvalues via the exchange symmetry: (0,1,-1) is an
            // eigenvector; the rest reduces to a 2x2 block
            let e1 = k[1][1] - k[1][2];
            let tr = k[0][0] + k[1][1] + k[1][2];
            let det_term = (k[0][0] - k[1][1] - k[1][2]).powi(2)
                + 8.0 * k[0][1] * k[0][1];
            let e2 = 0.5 * (tr - det_term.sqrt());
            assert!(e1 >= -1e-12, "c = {c}: eig {e1}");
            assert!(e2 >= -1e-12, "c = {c}: eig {e2}");
        }
        assert!(k_matrix(1.0).is_err());
    }

    /// Independent derivation of K: write nu = sum (1 - i_v o_v),
    /// nu_i = sum (i_v - i_v o_v), nu_o likewise, with i_v, o_v the
    /// no-in-arc / no-out-arc indicators in the fixed-arc model. Joint
    /// absence probabilities are products C(N-k,m)/C(N,m); expanding to
    /// order 1/n gives P(k = an+b absent) = e^{-ac}(1 - eps(a,b)/n) with
    /// eps(a,b) = c(a+b) + a c^2/2 + a^2 c/2, and the covariance of the
    /// sums per vertex follows from the pair overlaps |I_u|, |I_u u O_v|
    /// etc. The result must agree with the precision-form inverse exactly.
    #[test]
    fn k_matrix_matches_indicator_moment_limit() {
        for c in [1.2f64, 1.5, 2.0, 3.0, 5.0] {
            let x = (-c).exp();
            let (x2, x3, x4) = (x * x, x * x * x, x * x * x * x);
            let e1 = (c * c + c) / 2.0; // eps(1,-1): one in-neighborhood
            let e2 = c * c + 2.0 * c; // eps(2,-2): i_v and o_v together
            let e3 = (3.0 * c * c + 7.0 * c) / 2.0; // eps(3,-4)
            let e4 = 2.0 * c * c + 6.0 * c; // eps(4,-6): all arcs at u, v
            let common = 2.0 * x3 * e3 - x4 * e4
                + 2.0 * (x - x2) * (x * e1 - x2 * e2);
            let k11 = x2 * (1.0 - x2) - 2.0 * c * x4;
            let k12 = x3 * (1.0 - x) + x3 * (e3 - e1 - e2) - x4 * (e4 - 2.0 * e2);
            let k22 = (x - x2) * (1.0 - x + x2) - x2 * e2 + common;
            // eps(2,-3): I_u and O_v share the position v -> u
            let k23 = -(x - x2) * (x - x2) - x2 * (c * c + c) + common;
            let k = k_matrix(c).unwrap();
            let pins = [(k[0][0], k11), (k[0][1], k12), (k[1][1], k22), (k[1][2], k23)];
            for (got, want) in pins {
                assert!(
                    (got - want).abs() <= 1e-12 * want.abs().max(1e-3),
                    "c = {c}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn b_matrices_shape() {
        let full = b_matrices_full(2.0).unwrap();
        let (b, bt, bnp) = (full.b, full.btilde, full.b_np);
        // congruence is exact
        assert_eq!(bt[0][0], b[0][0]);
        assert_eq!(bt[0][1], b[0][1] - b[0][0]);
        assert_eq!(bt[1][1], b[0][0] + b[1][1] - 2.0 * b[0][1]);
        // B_np - B is PSD rank one
        let d = [
            [bnp[0][0] - b[0][0], bnp[0][1] - b[0][1]],
            [bnp[1][0] - b[1][0], bnp[1][1] - b[1][1]],
        ];
        assert!(d[0][0] > 0.0 && d[1][1] > 0.0);
        assert!((d[0][0] * d[1][1] - d[0][1] * d[0][1]).abs() < 1e-12);
        // B itself is a covariance matrix
        assert!(b[0][0] > 0.0 && b[1][1] > 0.0);
        assert!(b[0][0] * b[1][1] - b[0][1] * b[0][1] > 0.0);
    }

    #[test]
    fn near_critical_btilde_ratio() {
        let (_, bt, _) = b_matrices(1.01).unwrap();
        let r = bt[0][0] / 0.01;
        assert!(r > 30.0 && r < 50.0, "Btilde11/eps = {r}");
    }

    #[test]
    fn report_assembles() {
        let rep = theory_report(2.0, None).unwrap();
        assert_eq!(rep.schema, "1");
        assert!((rep.theta - 0.7968121300200202).abs() < 1e-10);
        assert!((rep.mean[0] - rep.theta * rep.theta).abs() < 1e-15);
        assert!(rep.diagnostics.endpoint_alpha_err < 1e-6);
        assert!(rep.diagnostics.endpoint_gamma_err < 1e-6);
        assert!(rep.diagnostics.conservation_i1 < 1e-8);
        assert!(rep.eps_series.is_none());
    }
}
