//! Two-way ranging error model: clock-drift noise, fault biases and
//! measurement synthesis for simulation.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::point::Point3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwrParams {
    /// Response delay, seconds.
    pub tau_d: f64,
    /// Crystal tolerance of the user oscillator (10 ppm = 1e-5).
    pub o_u: f64,
    /// Prior probability of an internal fault.
    pub p_if: f64,
}

impl Default for TwrParams {
    fn default() -> Self {
        Self { tau_d: 5e-3, o_u: 10e-6, p_if: 1e-6 }
    }
}

impl TwrParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Error::Scenario {
            field: format!("twr.{field}"),
            msg: msg.into(),
        };
        if !(self.tau_d > 0.0) {
            return Err(bad("tau_d_s", "must be > 0"));
        }
        if !(self.o_u >= 0.0) {
            return Err(bad("o_u_ppm", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.p_if) {
            return Err(bad("p_if", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Standard deviation (m) of the clock-drift ranging error, reading the
/// crystal tolerance as a 3-sigma bound.
pub fn clock_noise_sigma(params: &TwrParams, c: f64) -> f64 {
    c * params.tau_d * params.o_u / 6.0
}

pub fn true_range(sp: &Point3, user: &Point3) -> f64 {
    sp.distance(user)
}

/// One range measurement: truth plus Gaussian clock noise plus `fault_bias`.
pub fn synthesize_measurement<R: Rng + ?Sized>(
    range: f64,
    sigma_c: f64,
    fault_bias: f64,
    rng: &mut R,
) -> f64 {
    let n: f64 = if sigma_c > 0.0 {
        sigma_c * Distribution::<f64>::sample(&StandardNormal, rng)
    } else {
        0.0
    };
    range + n + fault_bias
}

/// Clock and timestamp errors for one simulated exchange.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ExchangeErrors {
    /// User clock drift relative to a perfect clock.
    pub delta_u: f64,
    /// UAV clock drift; negligible in the nominal model.
    pub delta_b: f64,
    /// User time-of-arrival error, s.
    pub e_u: f64,
    /// UAV time-of-arrival error, s.
    pub e_b: f64,
    /// Initial user clock offset, s. Cancels in the estimate.
    pub clock_bias: f64,
}

/// Plays the request/response timestamps through both clocks and returns the
/// time-of-flight estimation error in seconds.
pub fn simulate_twr_exchange(
    range: f64,
    params: &TwrParams,
    errs: &ExchangeErrors,
    c: f64,
) -> Result<f64> {
    if !(1.0 + errs.delta_u > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "user clock drift must exceed -1, got {}",
            errs.delta_u
        )));
    }
    let tof = range / c;
    let t_b_send = 0.0;
    let t_u_recv = t_b_send + errs.clock_bias + tof * (1.0 + errs.delta_u) + errs.e_u;
    let t_u_send = t_u_recv + params.tau_d;
    let t_b_recv = t_b_send
        + 2.0 * tof * (1.0 + errs.delta_b)
        + (errs.e_u + params.tau_d) * (1.0 + errs.delta_b) / (1.0 + errs.delta_u)
        + errs.e_b;
    let tof_hat = 0.5 * ((t_b_recv - t_b_send) - (t_u_send - t_u_recv));
    Ok(tof_hat - tof)
}

/// First-order error with the UAV drift neglected.
pub fn approx_tof_error(params: &TwrParams, errs: &ExchangeErrors) -> f64 {
    -params.tau_d * errs.delta_u / 2.0 + errs.e_u / 2.0 + errs.e_b / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BiasModel {
    /// One bias in meters per faulty SP, in the order of `faulty_sp_indices`.
    FixedVector { biases: Vec<f64> },
    /// Uniform on `[min, max]`, strictly positive.
    NlosPositive { min: f64, max: f64 },
    /// Uniform magnitude on `[min, max]` with a random sign.
    Internal { min: f64, max: f64 },
}

impl BiasModel {
    pub fn default_nlos() -> Self {
        BiasModel::NlosPositive { min: 50.0, max: 500.0 }
    }

    pub fn default_internal() -> Self {
        BiasModel::Internal { min: 50.0, max: 500.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            BiasModel::FixedVector { biases } => {
                if biases.iter().any(|b| !b.is_finite()) {
                    return Err(Error::InvalidArgument("fixed biases must be finite".into()));
                }
            }
            BiasModel::NlosPositive { min, max } => {
                if !(*min > 0.0 && max >= min) {
                    return Err(Error::InvalidArgument(
                        "NLoS biases need 0 < min <= max".into(),
                    ));
                }
            }
            BiasModel::Internal { min, max } => {
                if !(*min >= 0.0 && max >= min) {
                    return Err(Error::InvalidArgument(
                        "internal-fault biases need 0 <= min <= max".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Draws the bias for the `slot`-th faulty SP.
    pub fn draw<R: Rng + ?Sized>(&self, slot: usize, rng: &mut R) -> f64 {
        match self {
            BiasModel::FixedVector { biases } => biases.get(slot).copied().unwrap_or(0.0),
            BiasModel::NlosPositive { min, max } => uniform(*min, *max, rng),
            BiasModel::Internal { min, max } => {
                let mag = uniform(*min, *max, rng);
                if rng.random_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            }
        }
    }
}

fn uniform<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub faulty_sp_indices: Vec<usize>,
    pub bias_model: BiasModel,
}

impl FaultSpec {
    pub fn validate(&self) -> Result<()> {
        self.bias_model.validate()?;
        if let BiasModel::FixedVector { biases } = &self.bias_model {
            if biases.len() != self.faulty_sp_indices.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} fixed biases for {} faulty SPs",
                    biases.len(),
                    self.faulty_sp_indices.len()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propagation::SPEED_OF_LIGHT;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigma_c_table_values() {
        let p = TwrParams::default();
        let s = clock_noise_sigma(&p, SPEED_OF_LIGHT);
        assert!((s - 2.498).abs() < 1e-3, "{s}");
        assert_eq!(clock_noise_sigma(&TwrParams { o_u: 0.0, ..p }, SPEED_OF_LIGHT), 0.0);
        let doubled = clock_noise_sigma(&TwrParams { tau_d: 2.0 * p.tau_d, ..p }, SPEED_OF_LIGHT);
        assert_eq!(doubled, 2.0 * s);
        let rescaled =
            clock_noise_sigma(&TwrParams { tau_d: 4.0 * p.tau_d, o_u: p.o_u / 4.0, ..p }, SPEED_OF_LIGHT);
        assert!((rescaled - s).abs() <= 1e-12 * s);
    }

    #[test]
    fn ranges() {
        let a = Point3::new(1.0, 2.0, 3.0);
        assert_eq!(true_range(&a, &a), 0.0);
        let r = true_range(&Point3::new(400.0, 0.0, 100.0), &Point3::new(0.0, 0.0, 1.5));
        assert!((r - 411.95).abs() < 0.01);
        let c = Point3::new(0.0, 0.0, 1.5);
        let e = true_range(&Point3::new(400.0, 0.0, 100.0), &c);
        let w = true_range(&Point3::new(-400.0, 0.0, 100.0), &c);
        assert_eq!(e, w);
    }

    #[test]
    fn noiseless_and_biased_measurements() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(synthesize_measurement(400.0, 0.0, 0.0, &mut rng), 400.0);
        assert_eq!(synthesize_measurement(400.0, 0.0, 200.0, &mut rng), 600.0);
    }

    #[test]
    fn measurement_noise_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let xs: Vec<f64> =
            (0..n).map(|_| synthesize_measurement(0.0, 2.498, 0.0, &mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt();
        assert!((2.45..=2.55).contains(&sd), "{sd}");
    }

    #[test]
    fn exchange_ideal_and_drifting() {
        let p = TwrParams::default();
        let ideal = simulate_twr_exchange(400.0, &p, &ExchangeErrors::default(), SPEED_OF_LIGHT).unwrap();
        assert!(ideal.abs() < 1e-18);

        let errs = ExchangeErrors { delta_u: 1e-5, ..Default::default() };
        let e = simulate_twr_exchange(400.0, &p, &errs, SPEED_OF_LIGHT).unwrap();
        let closed = -p.tau_d * 1e-5 / 2.0 / (1.0 + 1e-5);
        assert!((e - closed).abs() < 1e-15, "{e} vs {closed}");
        assert!((e - (-2.49998e-8)).abs() < 1e-12);

        let with_bias = ExchangeErrors { clock_bias: 0.123, ..errs };
        let e2 = simulate_twr_exchange(400.0, &p, &with_bias, SPEED_OF_LIGHT).unwrap();
        assert!((e2 - e).abs() < 1e-14);
    }

    #[test]
    fn approximation_tracks_exact_error() {
        let p = TwrParams::default();
        for i in -20..=20 {
            if i == 0 {
                continue;
            }
            let delta_u = i as f64 * 0.5e-6;
            let errs = ExchangeErrors { delta_u, ..Default::default() };
            let exact = simulate_twr_exchange(400.0, &p, &errs, SPEED_OF_LIGHT).unwrap();
            let approx = approx_tof_error(&p, &errs);
            assert!((exact - approx).abs() < 1e-4 * approx.abs(), "{delta_u}");
        }
    }

    #[test]
    fn invalid_drift() {
        let errs = ExchangeErrors { delta_u: -1.0, ..Default::default() };
        assert!(simulate_twr_exchange(1.0, &TwrParams::default(), &errs, SPEED_OF_LIGHT).is_err());
    }

    #[test]
    fn bias_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nlos = BiasModel::default_nlos();
        assert!((0..1000).all(|_| nlos.draw(0, &mut rng) >= 50.0));
        let internal = BiasModel::default_internal();
        let draws: Vec<f64> = (0..1000).map(|_| internal.draw(0, &mut rng)).collect();
        assert!(draws.iter().any(|b| *b < 0.0) && draws.iter().any(|b| *b > 0.0));
        assert!(draws.iter().all(|b| (50.0..=500.0).contains(&b.abs())));
        assert!(BiasModel::NlosPositive { min: 0.0, max: 1.0 }.validate().is_err());
        let spec = FaultSpec {
            faulty_sp_indices: vec![1, 2],
            bias_model: BiasModel::FixedVector { biases: vec![1.0] },
        };
        assert!(spec.validate().is_err());
    }
}
