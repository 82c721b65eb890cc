//! Prior probabilities of the LoS, NLoS and blockage conditions for every
//! (service point, sample point) pair, and the derived measurement status
//! probabilities consumed by the event enumeration.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::dem::{self, DemGrid};
use crate::error::{Error, Result};
use crate::point::{Point2, Point3};
use crate::scenario::Scenario;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Standard normal CDF.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z * FRAC_1_SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// Carrier frequency, Hz.
    pub f_c: f64,
    /// Path loss exponent without a direct path.
    pub alpha_n: f64,
    /// Shadowing standard deviation, dB.
    pub sigma_n: f64,
    /// User transmit power, dBm.
    pub p_tu: f64,
    /// Noise power, dBm.
    pub p_n0: f64,
    /// Detection threshold on the reflected-signal SNR, dB.
    pub snr_min: f64,
    /// Terrain uncertainty standard deviation, m.
    pub sigma_h: f64,
    pub c: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            f_c: 1.5e9,
            alpha_n: 3.4,
            sigma_n: 1.4,
            p_tu: 20.0,
            p_n0: -104.0,
            snr_min: 0.0,
            sigma_h: 1.0,
            c: SPEED_OF_LIGHT,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Error::Scenario {
            field: format!("channel.{field}"),
            msg: msg.into(),
        };
        if !(self.sigma_n > 0.0) {
            return Err(bad("sigma_n_db", "must be > 0"));
        }
        if !(self.sigma_h > 0.0) {
            return Err(bad("sigma_h_m", "must be > 0"));
        }
        if !(self.f_c > 0.0) {
            return Err(bad("fc_hz", "must be > 0"));
        }
        if !(self.c > 0.0) {
            return Err(bad("c", "must be > 0"));
        }
        Ok(())
    }
}

/// Probability that the sight line clears the terrain once the Gaussian
/// terrain uncertainty is added to `margin`.
pub fn p_los(margin: f64, sigma_h: f64) -> f64 {
    std_normal_cdf(margin / sigma_h)
}

/// Free-space loss at 1 m, dB.
pub fn reference_path_loss(params: &ChannelParams) -> f64 {
    20.0 * (4.0 * PI * params.f_c / params.c).log10()
}

/// Largest shadowing value (dB) for which a reflected signal is still detected.
pub fn psi_max(params: &ChannelParams, distance_3d: f64) -> Result<f64> {
    if !(distance_3d > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "3-D distance must be positive, got {distance_3d}"
        )));
    }
    Ok((params.p_tu - params.p_n0 - params.snr_min)
        - (reference_path_loss(params) + 10.0 * params.alpha_n * distance_3d.log10()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionProbs {
    pub p_los: f64,
    pub p_nlos: f64,
    pub p_block: f64,
}

pub fn condition_probs(margin: f64, distance_3d: f64, params: &ChannelParams) -> Result<ConditionProbs> {
    let psi = psi_max(params, distance_3d)?;
    let z = margin / params.sigma_h;
    let p_los = std_normal_cdf(z);
    let no_los = std_normal_cdf(-z);
    let detect = std_normal_cdf(psi / params.sigma_n);
    let p_nlos = no_los * detect;
    let p_block = no_los * std_normal_cdf(-psi / params.sigma_n);
    Ok(ConditionProbs { p_los, p_nlos, p_block })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatusProbs {
    pub p_obtain: f64,
    /// `None` when the measurement can never be obtained.
    pub p_fail_given_obtain: Option<f64>,
    pub p_normal_given_obtain: Option<f64>,
}

pub fn status_probs(cond: &ConditionProbs, p_if: f64) -> StatusProbs {
    let p_fail = cond.p_los * p_if + cond.p_nlos;
    let p_normal = cond.p_los * (1.0 - p_if);
    let p_obtain = cond.p_los + cond.p_nlos;
    if p_obtain > 0.0 {
        StatusProbs {
            p_obtain,
            p_fail_given_obtain: Some(p_fail / p_obtain),
            p_normal_given_obtain: Some(p_normal / p_obtain),
        }
    } else {
        StatusProbs {
            p_obtain: 0.0,
            p_fail_given_obtain: None,
            p_normal_given_obtain: None,
        }
    }
}

/// All probabilities for one (SP, sample point) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairProbs {
    pub p_los: f64,
    pub p_nlos: f64,
    pub p_block: f64,
    pub p_obtain: f64,
    /// Zero when the SP is never observed.
    pub p_fail_given_obtain: f64,
    pub p_normal_given_obtain: f64,
    pub observable: bool,
    pub margin: f64,
    pub distance_3d: f64,
}

impl PairProbs {
    pub fn from_conditions(cond: ConditionProbs, p_if: f64, margin: f64, distance_3d: f64) -> Self {
        let st = status_probs(&cond, p_if);
        Self {
            p_los: cond.p_los,
            p_nlos: cond.p_nlos,
            p_block: cond.p_block,
            p_obtain: st.p_obtain,
            p_fail_given_obtain: st.p_fail_given_obtain.unwrap_or(0.0),
            p_normal_given_obtain: st.p_normal_given_obtain.unwrap_or(0.0),
            observable: st.p_fail_given_obtain.is_some(),
            margin,
            distance_3d,
        }
    }
}

/// K x M table indexed by SP `k` and sample point `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationTable {
    k: usize,
    m: usize,
    entries: Vec<PairProbs>,
}

impl PropagationTable {
    /// `entries` are sample-major: all K SPs of sample 0, then sample 1, ...
    pub fn from_entries(k: usize, m: usize, entries: Vec<PairProbs>) -> Result<Self> {
        if entries.len() != k * m {
            return Err(Error::InvalidArgument(format!(
                "table needs {} entries, got {}",
                k * m,
                entries.len()
            )));
        }
        Ok(Self { k, m, entries })
    }

    pub fn num_sps(&self) -> usize {
        self.k
    }

    pub fn num_samples(&self) -> usize {
        self.m
    }

    pub fn get(&self, k: usize, m: usize) -> &PairProbs {
        &self.entries[m * self.k + k]
    }

    /// All SPs for sample `m`.
    pub fn sample(&self, m: usize) -> &[PairProbs] {
        &self.entries[m * self.k..(m + 1) * self.k]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,m,p_los,p_nlos,p_block\n");
        for m in 0..self.m {
            for k in 0..self.k {
                let e = self.get(k, m);
                let _ = writeln!(out, "{k},{m},{},{},{}", e.p_los, e.p_nlos, e.p_block);
            }
        }
        out
    }
}

/// Probabilities for one SP seen from one user location.
pub fn pair_probs(
    grid: &DemGrid,
    sp: Point3,
    user: Point3,
    step: f64,
    exclusion_radius: f64,
    channel: &ChannelParams,
    p_if: f64,
) -> Result<PairProbs> {
    let profile = dem::profile_between(grid, sp, user, step, exclusion_radius)?;
    let margin = dem::min_height_margin(&profile)?;
    let distance = sp.distance(&user);
    let cond = condition_probs(margin, distance, channel)?;
    Ok(PairProbs::from_conditions(cond, p_if, margin, distance))
}

/// Probabilities of every SP seen from the sample at `pos`.
pub fn sample_row(
    grid: &DemGrid,
    scenario: &Scenario,
    sps: &[Point3],
    pos: Point2,
) -> Result<Vec<PairProbs>> {
    let step = scenario.profile_step.unwrap_or_else(|| dem::default_profile_step(grid.cell_size()));
    let ground = grid.elevation_at(pos.x, pos.y)?;
    let user = pos.with_z(ground + scenario.device_height);
    sps.iter()
        .map(|sp| {
            pair_probs(
                grid,
                *sp,
                user,
                step,
                scenario.exclusion_radius,
                &scenario.channel,
                scenario.twr.p_if,
            )
        })
        .collect()
}

pub fn build_table(grid: &DemGrid, scenario: &Scenario) -> Result<PropagationTable> {
    let sps = scenario.sp_positions();
    let samples = scenario.sample_grid();
    let rows: Vec<Vec<PairProbs>> = samples
        .par_iter()
        .map(|s| sample_row(grid, scenario, &sps, s.pos))
        .collect::<Result<Vec<_>>>()?;
    PropagationTable::from_entries(sps.len(), samples.len(), rows.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Simpson quadrature of the standard normal density, independent of erfc.
    fn normal_cdf_quad(z: f64) -> f64 {
        let lo = -12.0;
        if z <= lo {
            return 0.0;
        }
        let n = 20_000;
        let h = (z - lo) / n as f64;
        let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
        let mut s = pdf(lo) + pdf(z);
        for i in 1..n {
            let x = lo + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(x);
        }
        s * h / 3.0
    }

    #[test]
    fn p_los_values() {
        assert_eq!(p_los(0.0, 1.0), 0.5);
        assert!((p_los(1.0, 1.0) - normal_cdf_quad(1.0)).abs() < 1e-10);
        assert!((p_los(1.0, 1.0) - 0.841345).abs() < 1e-6);
        assert!((p_los(-3.0, 1.0) - (1.0 - normal_cdf_quad(3.0))).abs() < 1e-10);
        assert!((p_los(-3.0, 1.0) - 0.001350).abs() < 1e-6);
    }

    #[test]
    fn reference_loss() {
        let p = ChannelParams::default();
        assert!((reference_path_loss(&p) - 35.97).abs() < 0.01);
        let doubled = ChannelParams { f_c: 3.0e9, ..p };
        let d = reference_path_loss(&doubled) - reference_path_loss(&p);
        assert!((d - 20.0 * 2f64.log10()).abs() < 1e-12);
        let unit = ChannelParams { f_c: SPEED_OF_LIGHT / (4.0 * PI), ..p };
        assert!(reference_path_loss(&unit).abs() < 1e-12);
    }

    #[test]
    fn psi_max_values() {
        let p = ChannelParams::default();
        let psi = psi_max(&p, 412.3).unwrap();
        assert!((psi - (-0.89)).abs() < 0.05, "{psi}");
        let strict = ChannelParams { snr_min: 10.0, ..p };
        assert!((psi_max(&strict, 412.3).unwrap() - (psi - 10.0)).abs() < 1e-12);
        let far = psi_max(&p, 4123.0).unwrap();
        assert!((psi - far - 10.0 * p.alpha_n).abs() < 1e-9);
        assert!(psi_max(&p, 0.0).is_err());
    }

    #[test]
    fn condition_probs_examples() {
        let p = ChannelParams::default();
        let c = condition_probs(f64::INFINITY, 412.3, &p).unwrap();
        assert_eq!((c.p_los, c.p_nlos, c.p_block), (1.0, 0.0, 0.0));

        let c = condition_probs(0.0, 412.3, &p).unwrap();
        let psi = psi_max(&p, 412.3).unwrap();
        assert_eq!(c.p_los, 0.5);
        assert!((c.p_nlos - 0.5 * normal_cdf_quad(psi / 1.4)).abs() < 1e-9);
        assert!((c.p_nlos - 0.131).abs() < 0.005, "{}", c.p_nlos);
        assert!((c.p_block - 0.369).abs() < 0.005, "{}", c.p_block);
    }

    #[test]
    fn status_probs_examples() {
        let c = ConditionProbs { p_los: 0.7, p_nlos: 0.0, p_block: 0.3 };
        let s = status_probs(&c, 0.0);
        assert_eq!(s.p_fail_given_obtain, Some(0.0));

        let c = ConditionProbs { p_los: 0.8, p_nlos: 0.1, p_block: 0.1 };
        let s = status_probs(&c, 1e-6);
        let f = s.p_fail_given_obtain.unwrap();
        assert!((f - (0.8e-6 + 0.1) / 0.9).abs() < 1e-15);
        assert!((f - 0.111112).abs() < 1e-6);
        assert!((f + s.p_normal_given_obtain.unwrap() - 1.0).abs() < 1e-12);

        let c = ConditionProbs { p_los: 0.0, p_nlos: 0.0, p_block: 1.0 };
        let s = status_probs(&c, 1e-6);
        assert_eq!(s.p_fail_given_obtain, None);
        let pp = PairProbs::from_conditions(c, 1e-6, -100.0, 400.0);
        assert!(!pp.observable);
    }

    #[test]
    fn nlos_step_with_tiny_shadowing() {
        let base = ChannelParams { sigma_n: 1e-6, ..Default::default() };
        let d = 412.3;
        let psi0 = psi_max(&base, d).unwrap();
        for (target, expect) in [(1.0, 1.0), (-1.0, 0.0)] {
            // shift snr_min so psi_max lands on +-1 dB
            let p = ChannelParams { snr_min: base.snr_min + psi0 - target, ..base };
            assert!((psi_max(&p, d).unwrap() - target).abs() < 1e-9);
            let c = condition_probs(0.3, d, &p).unwrap();
            assert!((c.p_nlos - (1.0 - c.p_los) * expect).abs() < 1e-9);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(2000))]
            #[test]
            fn triple_sums_to_one(margin in -50.0..50.0f64, d in 1.0..5000.0f64,
                                  sigma_h in 0.1..10.0f64, snr in -20.0..20.0f64) {
                let p = ChannelParams { sigma_h, snr_min: snr, ..Default::default() };
                let c = condition_probs(margin, d, &p).unwrap();
                prop_assert!((c.p_los + c.p_nlos + c.p_block - 1.0).abs() <= 1e-12);
                for v in [c.p_los, c.p_nlos, c.p_block] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                prop_assert!(c.p_nlos <= 1.0 - c.p_los + 1e-15);
            }

            #[test]
            fn conditionals_sum_to_one(p_los in 0.0..1.0f64, split in 0.0..1.0f64, p_if in 0.0..1.0f64) {
                let p_nlos = (1.0 - p_los) * split;
                let c = ConditionProbs { p_los, p_nlos, p_block: 1.0 - p_los - p_nlos };
                let s = status_probs(&c, p_if);
                if s.p_obtain > 0.0 {
                    let sum = s.p_fail_given_obtain.unwrap() + s.p_normal_given_obtain.unwrap();
                    prop_assert!((sum - 1.0).abs() <= 1e-12);
                }
            }
        }
    }
}
