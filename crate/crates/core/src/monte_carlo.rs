//! Stochastic end-to-end check of a prediction: draw propagation conditions,
//! synthesize ranges, run the receiver's decision rule and tally outcomes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{AllocationPlan, MaskRule};
use crate::chi2::chi2_isf;
use crate::dem::DemGrid;
use crate::error::{Error, Result};
use crate::events::{mask_indices, EventClass, MAX_SPS};
use crate::geometry::{build_geometry_masked, ls_solve, Axis};
use crate::mde::event_mde;
use crate::point::{Point2, Point3};
use crate::propagation::{sample_row, PairProbs};
use crate::report::KeyValueReport;
use crate::scenario::Scenario;
use crate::twr::{simulate_twr_exchange, synthesize_measurement, BiasModel, ExchangeErrors, FaultSpec};

/// Two-sided normal quantile of the reported confidence intervals.
const CI_Z: f64 = 1.959963984540054;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Truth {
    Sample { index: usize },
    Point { x: f64, y: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConditionSampling {
    /// LoS/NLoS/blocked drawn from the propagation probabilities at the truth.
    #[default]
    Table,
    /// SPs in `visible_mask` are received, those also in `nlos_mask` via NLoS.
    Forced { visible_mask: u32, nlos_mask: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// Gaussian clock noise with the scenario's sigma.
    #[default]
    Gaussian,
    /// Full timestamp exchange with the user drift drawn at a 3-sigma bound of
    /// the crystal tolerance.
    TimingChain,
}

/// Injects the worst fault of `fault_sps` scaled to the predicted MDE of the
/// forced visibility pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCaseFault {
    pub fault_sps: Vec<usize>,
    pub axis: Axis,
    pub md_budget: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    pub trials: usize,
    pub seed: u64,
    pub truth: Truth,
    pub conditions: ConditionSampling,
    /// Extra bias added to the listed SPs whenever they are received.
    pub fault: Option<FaultSpec>,
    pub worst_case: Option<WorstCaseFault>,
    /// Draw internal faults on LoS links with the scenario's probability.
    pub internal_faults: bool,
    pub nlos_bias: BiasModel,
    pub internal_bias: BiasModel,
    pub noise: NoiseModel,
    pub sigma_c: Option<f64>,
    /// Test every detection-capable pattern at this conditional false-alarm
    /// rate instead of the plan's thresholds.
    pub conditional_fa: Option<f64>,
    /// Keep one record per trial in the report.
    pub record_trials: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            trials: 10_000,
            seed: 0,
            truth: Truth::Sample { index: 0 },
            conditions: ConditionSampling::Table,
            fault: None,
            worst_case: None,
            internal_faults: true,
            nlos_bias: BiasModel::default_nlos(),
            internal_bias: BiasModel::default_internal(),
            noise: NoiseModel::Gaussian,
            sigma_c: None,
            conditional_fa: None,
            record_trials: false,
        }
    }
}

impl McConfig {
    pub fn validate(&self, num_sps: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.trials == 0 {
            return bad("trials must be > 0".into());
        }
        if let ConditionSampling::Forced { visible_mask, nlos_mask } = self.conditions {
            if num_sps < 32 && visible_mask >> num_sps != 0 {
                return bad(format!("visible mask {visible_mask:#b} names SPs beyond {num_sps}"));
            }
            if nlos_mask & !visible_mask != 0 {
                return bad("NLoS SPs must be visible".into());
            }
        }
        if let Some(f) = &self.fault {
            f.validate()?;
            if let Some(k) = f.faulty_sp_indices.iter().find(|k| **k >= num_sps) {
                return bad(format!("faulty SP {k} out of range"));
            }
        }
        if let Some(w) = &self.worst_case {
            if !matches!(self.conditions, ConditionSampling::Forced { .. }) {
                return bad("worst-case injection needs forced conditions".into());
            }
            if !(w.md_budget > 0.0 && w.md_budget < 1.0) {
                return bad(format!("md_budget must lie in (0, 1), got {}", w.md_budget));
            }
        }
        if let Some(s) = self.sigma_c {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("sigma_c override must be positive, got {s}"));
            }
        }
        if let Some(a) = self.conditional_fa {
            if !(a > 0.0 && a < 1.0) {
                return bad(format!("conditional_fa must lie in (0, 1), got {a}"));
            }
        }
        self.nlos_bias.validate()?;
        self.internal_bias.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    NoService,
    /// Alarm without a test: positioning-only or excluded pattern.
    RuleAlarm,
    Pass,
    Alarm,
    /// Solver failure; treated as an alarm.
    Diverged,
}

impl Decision {
    pub fn alarmed(self) -> bool {
        matches!(self, Decision::RuleAlarm | Decision::Alarm | Decision::Diverged)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub mask: u32,
    pub faulty: bool,
    pub decision: Decision,
    /// NaN when no solve ran.
    pub t_ls: f64,
    pub err_x: f64,
    pub err_y: f64,
}

/// Binomial proportion with a Wilson score interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub count: usize,
    pub n: usize,
    pub rate: f64,
    pub lo: f64,
    pub hi: f64,
}

impl RateEstimate {
    pub fn new(count: usize, n: usize) -> Self {
        if n == 0 {
            return Self { count, n, rate: f64::NAN, lo: 0.0, hi: 1.0 };
        }
        let nf = n as f64;
        let p = count as f64 / nf;
        let z2 = CI_Z * CI_Z;
        let den = 1.0 + z2 / nf;
        let mid = (p + z2 / (2.0 * nf)) / den;
        let half = CI_Z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / den;
        let lo = if count == 0 { 0.0 } else { (mid - half).max(0.0) };
        let hi = if count == n { 1.0 } else { (mid + half).min(1.0) };
        Self { count, n, rate: p, lo, hi }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub q50: f64,
    pub q95: f64,
    pub max: f64,
}

impl ErrorStats {
    pub fn from_samples(v: &[f64]) -> Self {
        let n = v.len();
        if n == 0 {
            return Self { n, mean: f64::NAN, std: f64::NAN, q50: f64::NAN, q95: f64::NAN, max: f64::NAN };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        Self { n, mean, std: var.sqrt(), q50: quantile(&s, 0.5), q95: quantile(&s, 0.95), max: s[n - 1] }
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternTally {
    pub mask: u32,
    pub class: EventClass,
    pub trials: usize,
    pub no_service: usize,
    pub alarms: usize,
    pub normal_trials: usize,
    pub false_alarms: usize,
    pub faulty_trials: usize,
    pub misses: usize,
    /// Missed faults whose horizontal error exceeds the alert requirement.
    pub hazardous_misses: usize,
    pub diverged: usize,
    /// Horizontal position error over solved trials, m.
    pub error: ErrorStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub seed: u64,
    pub trials: usize,
    pub truth: Point2,
    pub sigma_c: f64,
    /// Injected worst-case biases in meters, by SP.
    pub injected: Option<Vec<f64>>,
    pub patterns: Vec<PatternTally>,
    pub false_alarm: RateEstimate,
    pub missed_detection: RateEstimate,
    pub hazardous_miss: RateEstimate,
    pub no_service: RateEstimate,
    pub trial_records: Option<Vec<TrialRecord>>,
}

impl McReport {
    pub fn summary(&self) -> KeyValueReport {
        let mut r = KeyValueReport::new();
        r.push("seed", self.seed)
            .push("trials", self.trials)
            .push_f64("truth_x_m", self.truth.x)
            .push_f64("truth_y_m", self.truth.y)
            .push_f64("sigma_c_m", self.sigma_c);
        for (key, est) in [
            ("false_alarm", &self.false_alarm),
            ("missed_detection", &self.missed_detection),
            ("hazardous_miss", &self.hazardous_miss),
            ("no_service", &self.no_service),
        ] {
            r.push(&format!("{key}_count"), est.count)
                .push(&format!("{key}_of"), est.n)
                .push_f64(&format!("{key}_rate"), est.rate)
                .push_f64(&format!("{key}_ci_lo"), est.lo)
                .push_f64(&format!("{key}_ci_hi"), est.hi);
        }
        if let Some(b) = &self.injected {
            let list: Vec<String> = b.iter().map(|v| format!("{v}")).collect();
            r.push("injected_bias_m", list.join(" "));
        }
        r
    }

    pub fn patterns_csv(&self) -> String {
        let mut out = String::from(
            "mask,class,trials,no_service,alarms,normal_trials,false_alarms,faulty_trials,misses,hazardous_misses,diverged,err_mean,err_std,err_q50,err_q95,err_max\n",
        );
        let f = crate::report::fmt_f64;
        for p in &self.patterns {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                p.mask,
                p.class.label(),
                p.trials,
                p.no_service,
                p.alarms,
                p.normal_trials,
                p.false_alarms,
                p.faulty_trials,
                p.misses,
                p.hazardous_misses,
                p.diverged,
                f(p.error.mean),
                f(p.error.std),
                f(p.error.q50),
                f(p.error.q95),
                f(p.error.max)
            );
        }
        out
    }
}

/// Kolmogorov-Smirnov distance between the sample and `cdf`.
pub fn ks_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter().enumerate().fold(0.0, |d, (i, &x)| {
        let f = cdf(x);
        f64::max(d, ((i as f64 + 1.0) / n - f).max(f - i as f64 / n))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Condition {
    Los,
    Nlos,
    Blocked,
}

/// Fixed per-run inputs.
struct Setup<'a> {
    scenario: &'a Scenario,
    plan: &'a AllocationPlan,
    config: &'a McConfig,
    sps: Vec<Point3>,
    user: Point3,
    probs: Vec<PairProbs>,
    sigma_c: f64,
    injected: Option<Vec<f64>>,
    rules: BTreeMap<u32, MaskRule>,
}

impl Setup<'_> {
    fn rule(&self, mask: u32) -> MaskRule {
        self.rules.get(&mask).copied().unwrap_or_else(|| self.plan.rule_for(mask))
    }

    fn conditions<R: Rng>(&self, rng: &mut R) -> Vec<Condition> {
        match self.config.conditions {
            ConditionSampling::Table => self
                .probs
                .iter()
                .map(|p| {
                    let u: f64 = rng.random();
                    if u < p.p_los {
                        Condition::Los
                    } else if u < p.p_los + p.p_nlos {
                        Condition::Nlos
                    } else {
                        Condition::Blocked
                    }
                })
                .collect(),
            ConditionSampling::Forced { visible_mask, nlos_mask } => (0..self.sps.len())
                .map(|k| {
                    if nlos_mask >> k & 1 == 1 {
                        Condition::Nlos
                    } else if visible_mask >> k & 1 == 1 {
                        Condition::Los
                    } else {
                        Condition::Blocked
                    }
                })
                .collect(),
        }
    }

    fn noise<R: Rng>(&self, range: f64, rng: &mut R) -> Result<f64> {
        match self.config.noise {
            NoiseModel::Gaussian => Ok(synthesize_measurement(range, self.sigma_c, 0.0, rng)),
            NoiseModel::TimingChain => {
                let c = self.scenario.channel.c;
                let z: f64 = Distribution::<f64>::sample(&StandardNormal, rng);
                let errs = ExchangeErrors { delta_u: z * self.scenario.twr.o_u / 3.0, ..Default::default() };
                Ok(range + c * simulate_twr_exchange(range, &self.scenario.twr, &errs, c)?)
            }
        }
    }

    fn trial(&self, trial: u64) -> Result<TrialRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(trial);
        let conds = self.conditions(&mut rng);
        let mut mask = 0u32;
        let mut bias = vec![0.0; self.sps.len()];
        let mut faulty = false;
        for (k, c) in conds.iter().enumerate() {
            match c {
                Condition::Blocked => continue,
                Condition::Nlos => {
                    bias[k] += self.config.nlos_bias.draw(0, &mut rng);
                    faulty = true;
                }
                Condition::Los => {
                    if self.config.internal_faults && rng.random_bool(self.scenario.twr.p_if) {
                        bias[k] += self.config.internal_bias.draw(0, &mut rng);
                        faulty = true;
                    }
                }
            }
            mask |= 1 << k;
        }
        if let Some(f) = &self.config.fault {
            for (slot, &k) in f.faulty_sp_indices.iter().enumerate() {
                if mask >> k & 1 == 1 {
                    bias[k] += f.bias_model.draw(slot, &mut rng);
                    faulty = true;
                }
            }
        }
        if let Some(inj) = &self.injected {
            for (k, b) in inj.iter().enumerate() {
                if *b != 0.0 && mask >> k & 1 == 1 {
                    bias[k] += b;
                    faulty = true;
                }
            }
        }
        let mut record =
            TrialRecord { mask, faulty, decision: Decision::NoService, t_ls: f64::NAN, err_x: f64::NAN, err_y: f64::NAN };
        let (threshold, _) = match self.rule(mask) {
            MaskRule::NoService => return Ok(record),
            MaskRule::Alarm => {
                record.decision = Decision::RuleAlarm;
                return Ok(record);
            }
            MaskRule::Test { threshold, dof } => (threshold, dof),
        };
        let idx: Vec<usize> = mask_indices(mask).collect();
        let sps: Vec<Point3> = idx.iter().map(|&k| self.sps[k]).collect();
        let mut meas = Vec::with_capacity(idx.len());
        for &k in &idx {
            let range = self.sps[k].distance(&self.user);
            meas.push(self.noise(range, &mut rng)? + bias[k]);
        }
        match ls_solve(&meas, &sps, self.user.z, self.sigma_c, self.scenario.center) {
            Ok(sol) => {
                record.t_ls = sol.t_ls;
                record.err_x = sol.estimate.x - self.user.x;
                record.err_y = sol.estimate.y - self.user.y;
                record.decision = if sol.t_ls > threshold { Decision::Alarm } else { Decision::Pass };
            }
            Err(Error::Divergence { .. }) | Err(Error::SingularGeometry(_)) => {
                record.decision = Decision::Diverged;
            }
            Err(e) => return Err(e),
        }
        Ok(record)
    }
}

fn truth_point(scenario: &Scenario, truth: Truth) -> Result<Point2> {
    match truth {
        Truth::Point { x, y } => Ok(Point2::new(x, y)),
        Truth::Sample { index } => scenario
            .sample_grid()
            .get(index)
            .map(|s| s.pos)
            .ok_or_else(|| Error::InvalidArgument(format!("sample index {index} out of range"))),
    }
}

/// Runs `config.trials` independent trials at the truth point.
pub fn run_trials(scenario: &Scenario, dem: &DemGrid, plan: &AllocationPlan, config: &McConfig) -> Result<McReport> {
    scenario.validate()?;
    let k = scenario.num_sps();
    if plan.num_sps != k || k > MAX_SPS {
        return Err(Error::InvalidArgument(format!(
            "plan covers {} SPs but the scenario has {k}",
            plan.num_sps
        )));
    }
    config.validate(k)?;
    let truth = truth_point(scenario, config.truth)?;
    let sps = scenario.sp_positions();
    let user = truth.with_z(dem.elevation_at(truth.x, truth.y)? + scenario.device_height);
    let probs = match config.conditions {
        ConditionSampling::Table => sample_row(dem, scenario, &sps, truth)?,
        ConditionSampling::Forced { .. } => Vec::new(),
    };
    let sigma_c = config.sigma_c.unwrap_or_else(|| scenario.sigma_c());

    let mut rules = BTreeMap::new();
    if let Some(alpha) = config.conditional_fa {
        for mask in 1u32..(1 << k) {
            let a = mask.count_ones() as usize;
            if EventClass::of(a) == EventClass::Det {
                if let Some(dof) = plan.convention.dof(a) {
                    rules.insert(mask, MaskRule::Test { threshold: chi2_isf(alpha, dof)?, dof });
                }
            }
        }
    }
    let mut setup = Setup { scenario, plan, config, sps, user, probs, sigma_c, injected: None, rules };

    if let (Some(w), ConditionSampling::Forced { visible_mask, .. }) = (&config.worst_case, config.conditions) {
        let MaskRule::Test { threshold, dof } = setup.rule(visible_mask) else {
            return Err(Error::InvalidArgument(format!(
                "visibility pattern {visible_mask:#b} is not tested, nothing to inject"
            )));
        };
        let geom = build_geometry_masked(&setup.sps, visible_mask, user, sigma_c)?;
        let mde = event_mde(&geom, &w.fault_sps, threshold, dof, w.md_budget, w.axis)?;
        if !mde.eta.is_finite() {
            return Err(Error::InvalidArgument("worst-case fault is undetectable".into()));
        }
        let mut biases = vec![0.0; k];
        for (row, &sp) in geom.available.iter().enumerate() {
            biases[sp] = mde.worst_fault[row] * sigma_c;
        }
        setup.injected = Some(biases);
    }

    let records = (0..config.trials as u64)
        .into_par_iter()
        .map(|t| setup.trial(t))
        .collect::<Result<Vec<TrialRecord>>>()?;
    Ok(tally(&setup, truth, records))
}

fn tally(setup: &Setup, truth: Point2, records: Vec<TrialRecord>) -> McReport {
    let eta_req = setup.scenario.requirements.eta_req;
    let mut by_mask: BTreeMap<u32, (PatternTally, Vec<f64>)> = BTreeMap::new();
    for r in &records {
        let (t, errs) = by_mask.entry(r.mask).or_insert_with(|| {
            (
                PatternTally {
                    mask: r.mask,
                    class: EventClass::of(r.mask.count_ones() as usize),
                    trials: 0,
                    no_service: 0,
                    alarms: 0,
                    normal_trials: 0,
                    false_alarms: 0,
                    faulty_trials: 0,
                    misses: 0,
                    hazardous_misses: 0,
                    diverged: 0,
                    error: ErrorStats::from_samples(&[]),
                },
                Vec::new(),
            )
        });
        t.trials += 1;
        let err = r.err_x.hypot(r.err_y);
        match r.decision {
            Decision::NoService => {
                t.no_service += 1;
                continue;
            }
            Decision::Diverged => t.diverged += 1,
            _ => {}
        }
        if !err.is_nan() {
            errs.push(err);
        }
        let alarmed = r.decision.alarmed();
        t.alarms += alarmed as usize;
        if r.faulty {
            t.faulty_trials += 1;
            if !alarmed {
                t.misses += 1;
                t.hazardous_misses += (err > eta_req) as usize;
            }
        } else {
            t.normal_trials += 1;
            t.false_alarms += alarmed as usize;
        }
    }
    let patterns: Vec<PatternTally> = by_mask
        .into_values()
        .map(|(mut t, errs)| {
            t.error = ErrorStats::from_samples(&errs);
            t
        })
        .collect();
    let sum = |f: fn(&PatternTally) -> usize| patterns.iter().map(f).sum::<usize>();
    let n = records.len();
    McReport {
        seed: setup.config.seed,
        trials: n,
        truth,
        sigma_c: setup.sigma_c,
        injected: setup.injected.clone(),
        false_alarm: RateEstimate::new(sum(|p| p.false_alarms), sum(|p| p.normal_trials)),
        missed_detection: RateEstimate::new(sum(|p| p.misses), sum(|p| p.faulty_trials)),
        hazardous_miss: RateEstimate::new(sum(|p| p.hazardous_misses), sum(|p| p.faulty_trials)),
        no_service: RateEstimate::new(sum(|p| p.no_service), n),
        patterns,
        trial_records: setup.config.record_trials.then_some(records),
    }
}
