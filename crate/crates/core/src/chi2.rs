//! Central and noncentral chi-square machinery for threshold setting and
//! minimum-detectable-error computation.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use crate::error::{Error, Result};

/// Remaining Poisson mass allowed on either side of the mixture.
const POISSON_TAIL: f64 = 1e-15;
const MAX_ITER: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionThreshold {
    pub dof: u32,
    pub alpha: f64,
    pub t: f64,
}

impl DetectionThreshold {
    pub fn new(alpha: f64, dof: u32) -> Result<Self> {
        Ok(Self { dof, alpha, t: chi2_isf(alpha, dof)? })
    }
}

/// Upper tail `P(X > x)` of a central chi-square.
pub fn chi2_sf(x: f64, dof: u32) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if dof == 0 {
        return 0.0;
    }
    gamma_ur(0.5 * dof as f64, 0.5 * x)
}

pub fn chi2_cdf(x: f64, dof: u32) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if dof == 0 {
        return 1.0;
    }
    gamma_lr(0.5 * dof as f64, 0.5 * x)
}

pub fn chi2_pdf(x: f64, dof: u32) -> f64 {
    if x <= 0.0 || dof == 0 {
        return 0.0;
    }
    let a = 0.5 * dof as f64;
    ((a - 1.0) * x.ln() - 0.5 * x - a * std::f64::consts::LN_2 - ln_gamma(a)).exp()
}

/// Threshold `T` with `chi2_sf(T, dof) = alpha`.
///
/// Bracketed Newton iteration on `ln sf`, falling back to bisection whenever
/// a step leaves the bracket.
pub fn chi2_isf(alpha: f64, dof: u32) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "false-alarm probability must lie in (0, 1), got {alpha}"
        )));
    }
    if dof == 0 {
        return Err(Error::InvalidArgument("chi-square needs dof >= 1".into()));
    }
    let target = alpha.ln();
    let mut lo = 0.0;
    let mut hi = 2.0 * dof as f64 + 2.0;
    while chi2_sf(hi, dof) > alpha {
        lo = hi;
        hi *= 2.0;
    }
    let mut t = 0.5 * (lo + hi);
    for _ in 0..MAX_ITER {
        let sf = chi2_sf(t, dof);
        let g = sf.ln() - target;
        if g.abs() < 1e-14 {
            return Ok(t);
        }
        if g > 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
        let pdf = chi2_pdf(t, dof);
        let newton = if pdf > 0.0 && sf > 0.0 { t + g * sf / pdf } else { f64::NAN };
        t = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
    }
    Ok(t)
}

/// CDF of the noncentral chi-square and its derivative with respect to the
/// noncentrality, from the Poisson mixture of central chi-square CDFs.
pub fn nc_chi2_cdf_with_derivative(x: f64, dof: u32, lambda: f64) -> (f64, f64) {
    if x <= 0.0 {
        return (0.0, 0.0);
    }
    let a = 0.5 * dof as f64;
    let y = 0.5 * x;
    let ly = y.ln();
    // log of y^s e^-y / Gamma(s+1), the gap between P(s, y) and P(s+1, y)
    let log_gap = |s: f64| s * ly - y - ln_gamma(s + 1.0);
    if lambda <= 0.0 {
        let d = if dof == 0 { 0.0 } else { log_gap(a).exp() };
        return (chi2_cdf(x, dof), -0.5 * d);
    }
    let mu = 0.5 * lambda;
    let lmu = mu.ln();

    let mode = mu.floor();
    let lw_mode = -mu + mode * lmu - ln_gamma(mode + 1.0);
    let mode = mode as usize;

    // lower end: walk down while the tail bound is still significant
    let mut jlo = mode;
    let mut lw = lw_mode;
    while jlo > 0 {
        let ratio = jlo as f64 / mu;
        let tail = if ratio < 1.0 { lw.exp() * ratio / (1.0 - ratio) } else { f64::INFINITY };
        if tail < POISSON_TAIL {
            break;
        }
        lw += (jlo as f64).ln() - lmu;
        jlo -= 1;
    }
    let lw_lo = lw;

    // upper end
    let mut jhi = mode;
    let mut lw = lw_mode;
    loop {
        let ratio = mu / (jhi as f64 + 1.0);
        let next = lw + lmu - (jhi as f64 + 1.0).ln();
        if ratio < 1.0 && next.exp() / (1.0 - ratio) < POISSON_TAIL {
            break;
        }
        lw = next;
        jhi += 1;
    }

    // P(a + j, y) for j from jhi down to jlo, by the stable downward recurrence
    let s_top = a + jhi as f64;
    let mut p = if s_top > 0.0 { gamma_lr(s_top, y) } else { 1.0 };
    let mut lw = lw_lo + {
        // log weight at jhi relative to jlo
        let mut acc = 0.0;
        for j in jlo + 1..=jhi {
            acc += lmu - (j as f64).ln();
        }
        acc
    };
    let mut lgap = log_gap(s_top);
    let mut cdf = 0.0;
    let mut dcdf = 0.0;
    let mut j = jhi;
    loop {
        let w = lw.exp();
        let gap = if dof == 0 && j == 0 { 0.0 } else { lgap.exp() };
        cdf += w * p;
        dcdf += w * gap;
        if j == jlo {
            break;
        }
        // step to j - 1
        let s = a + j as f64;
        lgap += s.ln() - ly;
        p += lgap.exp();
        lw += (j as f64).ln() - lmu;
        j -= 1;
    }
    (cdf.min(1.0), -0.5 * dcdf)
}

pub fn nc_chi2_cdf(x: f64, dof: u32, lambda: f64) -> f64 {
    nc_chi2_cdf_with_derivative(x, dof, lambda).0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Noncentrality {
    pub lambda: f64,
    /// Set when even a fault-free statistic stays below the threshold with
    /// probability `<= p_md`; `lambda` is then 0.
    pub at_boundary: bool,
}

/// Noncentrality at which `P(t < threshold) = p_md`.
pub fn solve_noncentrality(threshold: f64, dof: u32, p_md: f64) -> Result<Noncentrality> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "detection threshold must be positive, got {threshold}"
        )));
    }
    if !(p_md > 0.0 && p_md < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "missed-detection probability must lie in (0, 1), got {p_md}"
        )));
    }
    let f0 = nc_chi2_cdf(threshold, dof, 0.0);
    if p_md >= f0 {
        return Ok(Noncentrality { lambda: 0.0, at_boundary: true });
    }
    let target = p_md.ln();
    let mut lo = 0.0;
    let mut hi = threshold.max(1.0);
    while nc_chi2_cdf(threshold, dof, hi) > p_md {
        lo = hi;
        hi *= 2.0;
    }
    let mut lambda = 0.5 * (lo + hi);
    for _ in 0..MAX_ITER {
        let (f, df) = nc_chi2_cdf_with_derivative(threshold, dof, lambda);
        let g = f.ln() - target;
        if g.abs() < 1e-13 {
            break;
        }
        if g > 0.0 {
            lo = lambda;
        } else {
            hi = lambda;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
        let newton = if f > 0.0 && df < 0.0 { lambda - g * f / df } else { f64::NAN };
        lambda = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
    }
    Ok(Noncentrality { lambda, at_boundary: false })
}
