//! Worst-case fault directions, failure slopes and minimum detectable errors,
//! aggregated into a per-sample reliability map.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{plan_sample, AllocationPlan};
use crate::chi2::solve_noncentrality;
use crate::dem::DemGrid;
use crate::error::{Error, Result};
use crate::events::mask_indices;
use crate::geometry::{build_geometry_masked, Axis, NormalizedGeometry};
use crate::point::Point3;
use crate::propagation::{sample_row, PairProbs};
use crate::report::{fmt_f64, lenient_f64, parse_f64, KeyValueReport};
use crate::scenario::Scenario;

/// Relative Cholesky pivot below which the fault subspace is treated as
/// reaching the null space of the residual projector.
const PIVOT_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct SlopeResult {
    /// Largest failure slope, m².
    pub slope: f64,
    /// Maximizing fault direction over the geometry's rows, unscaled.
    pub direction: DVector<f64>,
    /// The fault set can bias the position without moving the statistic.
    pub unbounded: bool,
}

/// Rows of `geom` holding the SPs in `fault_sps`.
fn fault_rows(geom: &NormalizedGeometry, fault_sps: &[usize]) -> Result<Vec<usize>> {
    if fault_sps.is_empty() {
        return Err(Error::InvalidArgument("fault set must not be empty".into()));
    }
    fault_sps
        .iter()
        .map(|k| {
            geom.available.iter().position(|a| a == k).ok_or_else(|| {
                Error::InvalidArgument(format!("faulty SP {k} is not in the observation set"))
            })
        })
        .collect()
}

/// Supremum over faults supported on `fault_sps` of
/// `(s_dᵀb)² / (bᵀ P_r b)`, with its maximizer.
pub fn worst_slope(geom: &NormalizedGeometry, fault_sps: &[usize], axis: Axis) -> Result<SlopeResult> {
    let rows = fault_rows(geom, fault_sps)?;
    let f = rows.len();
    let s = geom.extraction(axis);
    let m = DMatrix::from_fn(f, f, |i, j| geom.p_r[(rows[i], rows[j])]);
    let v = DVector::from_fn(f, |i, _| s[rows[i]]);
    let scale = (0..f).map(|i| m[(i, i)]).fold(0.0, f64::max);
    let chol = Cholesky::new(m).filter(|c| {
        let l = c.l_dirty();
        scale > 0.0 && (0..f).all(|i| l[(i, i)] * l[(i, i)] > PIVOT_FLOOR * scale)
    });
    let Some(chol) = chol else {
        return Ok(SlopeResult {
            slope: f64::INFINITY,
            direction: DVector::zeros(geom.len()),
            unbounded: true,
        });
    };
    let z = chol.solve(&v);
    let slope = v.dot(&z).max(0.0);
    let mut direction = DVector::zeros(geom.len());
    for (i, &r) in rows.iter().enumerate() {
        direction[r] = z[i];
    }
    Ok(SlopeResult { slope, direction, unbounded: false })
}

/// Failure slope of a given fault vector; `None` when it leaves the
/// statistic untouched.
pub fn slope_of(geom: &NormalizedGeometry, b: &DVector<f64>, axis: Axis) -> Option<f64> {
    let den = b.dot(&(&geom.p_r * b));
    (den > 0.0).then(|| geom.extraction(axis).dot(b).powi(2) / den)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionMde {
    pub slope: f64,
    pub lambda: f64,
    pub eta: f64,
    /// Worst fault scaled so that `bᵀ P_r b = lambda`, normalized units.
    pub worst_fault: DVector<f64>,
}

/// Minimum detectable error along `axis` for one failure event.
pub fn event_mde(
    geom: &NormalizedGeometry,
    fault_sps: &[usize],
    threshold: f64,
    dof: u32,
    md_budget: f64,
    axis: Axis,
) -> Result<DirectionMde> {
    let lambda = solve_noncentrality(threshold, dof, md_budget)?.lambda;
    Ok(mde_from_slope(worst_slope(geom, fault_sps, axis)?, lambda))
}

fn mde_from_slope(sr: SlopeResult, lambda: f64) -> DirectionMde {
    if sr.unbounded {
        return DirectionMde { slope: f64::INFINITY, lambda, eta: f64::INFINITY, worst_fault: sr.direction };
    }
    let eta = (sr.slope * lambda).sqrt();
    let worst_fault = if sr.slope > 0.0 {
        sr.direction * (lambda / sr.slope).sqrt()
    } else {
        sr.direction
    };
    DirectionMde { slope: sr.slope, lambda, eta, worst_fault }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointStatus {
    /// At least one failure event was evaluated; all finite.
    Ok,
    /// Detection events exist but none of their failure events needs a budget.
    FailureFree,
    /// Some failure event cannot be detected at any size.
    Unbounded,
    /// No detection-capable event is considered.
    Unavailable,
    /// Positioning-only events alone exceed the false-alarm requirement.
    Infeasible,
}

impl PointStatus {
    pub fn label(self) -> &'static str {
        match self {
            PointStatus::Ok => "ok",
            PointStatus::FailureFree => "failure_free",
            PointStatus::Unbounded => "unbounded",
            PointStatus::Unavailable => "unavailable",
            PointStatus::Infeasible => "infeasible",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Ok, Self::FailureFree, Self::Unbounded, Self::Unavailable, Self::Infeasible]
            .into_iter()
            .find(|p| p.label() == s)
    }

    /// Whether the point contributes to the overall maximum.
    pub fn has_value(self) -> bool {
        matches!(self, PointStatus::Ok | PointStatus::FailureFree | PointStatus::Unbounded)
    }
}

/// Per-failure-event result, kept for audits and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct EventMde {
    pub m: usize,
    pub obs_mask: u32,
    pub fault_mask: u32,
    pub x: DirectionMde,
    pub y: DirectionMde,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub m: usize,
    pub x: f64,
    pub y: f64,
    pub col: i64,
    pub row: i64,
    #[serde(with = "lenient_f64")]
    pub eta_x: f64,
    #[serde(with = "lenient_f64")]
    pub eta_y: f64,
    #[serde(with = "lenient_f64")]
    pub eta: f64,
    pub status: PointStatus,
    /// Largest number of missing SPs over considered observation events.
    pub max_unavailable: usize,
    /// Largest number of faulty SPs over considered failure events.
    pub max_faults: usize,
    pub excluded_failure_mass: f64,
}

/// Evaluates every considered failure event of one sample point.
pub fn predict_sample_events(
    plan: &AllocationPlan,
    sps: &[Point3],
    user: Point3,
    sigma_c: f64,
) -> Result<Vec<EventMde>> {
    let mut lambdas: HashMap<(u32, u64, u64), f64> = HashMap::new();
    let mut out = Vec::new();
    for ev in &plan.events {
        if ev.md.considered.is_empty() {
            continue;
        }
        let geom = build_geometry_masked(sps, ev.event.mask, user, sigma_c)?;
        let budget = ev.md.considered[0].md_budget_x;
        let key = (ev.dof, ev.threshold.to_bits(), budget.to_bits());
        let lambda = match lambdas.get(&key) {
            Some(&l) => l,
            None => {
                let l = solve_noncentrality(ev.threshold, ev.dof, budget)?.lambda;
                lambdas.insert(key, l);
                l
            }
        };
        for f in &ev.md.considered {
            let faults: Vec<usize> = mask_indices(f.event.fault_mask).collect();
            let x = mde_from_slope(worst_slope(&geom, &faults, Axis::X)?, lambda);
            let y = mde_from_slope(worst_slope(&geom, &faults, Axis::Y)?, lambda);
            out.push(EventMde { m: plan.m, obs_mask: ev.event.mask, fault_mask: f.event.fault_mask, x, y });
        }
    }
    Ok(out)
}

/// Largest MDE per axis over the considered failure events of one sample.
pub fn predict_sample(
    plan: &AllocationPlan,
    sps: &[Point3],
    user: Point3,
    sigma_c: f64,
) -> Result<(f64, f64, PointStatus)> {
    if plan.infeasible {
        return Ok((f64::INFINITY, f64::INFINITY, PointStatus::Infeasible));
    }
    if plan.events.is_empty() {
        return Ok((f64::INFINITY, f64::INFINITY, PointStatus::Unavailable));
    }
    let events = predict_sample_events(plan, sps, user, sigma_c)?;
    let exhausted = plan.events.iter().any(|e| e.md.budget_exhausted);
    let mut eta_x: f64 = if exhausted { f64::INFINITY } else { 0.0 };
    let mut eta_y = eta_x;
    for e in &events {
        eta_x = eta_x.max(e.x.eta);
        eta_y = eta_y.max(e.y.eta);
    }
    let status = if eta_x.is_infinite() || eta_y.is_infinite() {
        PointStatus::Unbounded
    } else if events.is_empty() {
        PointStatus::FailureFree
    } else {
        PointStatus::Ok
    };
    Ok((eta_x, eta_y, status))
}

fn vote_extents(plan: &AllocationPlan) -> (usize, usize) {
    if plan.events.is_empty() {
        return (plan.num_sps.saturating_sub(3), 0);
    }
    let max_u = plan.events.iter().map(|e| plan.num_sps - e.event.available).max().unwrap_or(0);
    let max_f = plan
        .events
        .iter()
        .flat_map(|e| e.md.considered.iter().map(|f| f.event.faults))
        .max()
        .unwrap_or(0);
    (max_u, max_f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityMap {
    pub scenario_hash: String,
    pub num_sps: usize,
    pub sigma_c: f64,
    pub eta_req: f64,
    pub eta_t: f64,
    #[serde(with = "lenient_f64")]
    pub eta_star: f64,
    /// Index of the sample holding `eta_star`, if any sample has a value.
    pub eta_star_m: Option<usize>,
    pub points: Vec<PointResult>,
}

#[derive(Serialize)]
struct SignedMap<'a> {
    map: &'a ReliabilityMap,
    digest: String,
}

#[derive(Deserialize)]
struct SignedMapRaw {
    map: Box<serde_json::value::RawValue>,
    digest: String,
}

impl ReliabilityMap {
    pub fn from_points(scenario: &Scenario, points: Vec<PointResult>) -> Self {
        let mut eta_star = f64::NAN;
        let mut eta_star_m = None;
        for p in points.iter().filter(|p| p.status.has_value()) {
            if eta_star_m.is_none() || p.eta > eta_star {
                eta_star = p.eta;
                eta_star_m = Some(p.m);
            }
        }
        Self {
            scenario_hash: scenario.content_hash(),
            num_sps: scenario.num_sps(),
            sigma_c: scenario.sigma_c(),
            eta_req: scenario.requirements.eta_req,
            eta_t: scenario.requirements.eta_t,
            eta_star,
            eta_star_m,
            points,
        }
    }

    pub fn requirement_met(&self) -> bool {
        self.eta_star_m.is_some() && self.eta_star <= self.eta_req
    }

    pub fn count(&self, status: PointStatus) -> usize {
        self.points.iter().filter(|p| p.status == status).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("m,x,y,eta_x,eta_y,eta,status\n");
        for p in &self.points {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                p.m,
                p.x,
                p.y,
                fmt_f64(p.eta_x),
                fmt_f64(p.eta_y),
                fmt_f64(p.eta),
                p.status.label()
            );
        }
        out
    }

    pub fn summary(&self) -> KeyValueReport {
        let mut r = KeyValueReport::new();
        r.push("scenario_hash", &self.scenario_hash)
            .push("samples", self.points.len())
            .push("sps", self.num_sps)
            .push_f64("sigma_c_m", self.sigma_c)
            .push_f64("eta_star_m", self.eta_star)
            .push("eta_star_index", self.eta_star_m.map_or(String::new(), |m| m.to_string()))
            .push_f64("eta_req_m", self.eta_req)
            .push_f64("eta_t_m", self.eta_t)
            .push("requirement_met", self.requirement_met())
            .push("points_ok", self.count(PointStatus::Ok))
            .push("points_failure_free", self.count(PointStatus::FailureFree))
            .push("points_unbounded", self.count(PointStatus::Unbounded))
            .push("points_unavailable", self.count(PointStatus::Unavailable))
            .push("points_infeasible", self.count(PointStatus::Infeasible))
            .push_f64(
                "max_excluded_failure_mass",
                self.points.iter().map(|p| p.excluded_failure_mass).fold(0.0, f64::max),
            );
        r
    }

    fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("map serializes");
        crate::report::sha256_hex(&bytes)
    }

    /// JSON document carrying a digest of its own payload.
    pub fn to_signed_json(&self) -> String {
        serde_json::to_string(&SignedMap { map: self, digest: self.digest() }).expect("map serializes")
    }

    pub fn from_signed_json(text: &str) -> Result<Self> {
        let signed: SignedMapRaw = serde_json::from_str(text)?;
        // the digest covers the payload bytes as written
        let actual = crate::report::sha256_hex(signed.map.get().as_bytes());
        if actual != signed.digest {
            return Err(Error::Integrity(format!(
                "map digest {actual} does not match recorded {}",
                signed.digest
            )));
        }
        Ok(serde_json::from_str(signed.map.get())?)
    }

    /// Per-point values from the CSV export.
    pub fn parse_csv_points(text: &str) -> Result<Vec<(usize, f64, f64, f64, PointStatus)>> {
        let bad = |line: usize, msg: &str| Error::InvalidArgument(format!("map CSV line {line}: {msg}"));
        text.lines()
            .enumerate()
            .skip(1)
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                let cells: Vec<&str> = l.split(',').collect();
                if cells.len() != 7 {
                    return Err(bad(i + 1, "expected 7 columns"));
                }
                let m = cells[0].parse().map_err(|_| bad(i + 1, "bad index"))?;
                let f = |c: &str| parse_f64(c).ok_or_else(|| bad(i + 1, "bad number"));
                let status = PointStatus::parse(cells[6]).ok_or_else(|| bad(i + 1, "bad status"))?;
                Ok((m, f(cells[3])?, f(cells[4])?, f(cells[5])?, status))
            })
            .collect()
    }
}

/// Everything computed for one sample point.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub probs: Vec<PairProbs>,
    pub plan: AllocationPlan,
    pub point: PointResult,
}

/// Propagation, allocation and MDE for every sample point, in sample order.
/// `progress` counts finished samples.
pub fn evaluate_samples(
    scenario: &Scenario,
    dem: &DemGrid,
    progress: Option<&AtomicUsize>,
) -> Result<Vec<SampleOutcome>> {
    scenario.validate()?;
    let sps = scenario.sp_positions();
    let sigma_c = scenario.sigma_c();
    let req = &scenario.requirements;
    scenario
        .sample_grid()
        .par_iter()
        .map(|s| {
            let probs = sample_row(dem, scenario, &sps, s.pos)?;
            let plan = plan_sample(s.index, &probs, req.p_fa, req.p_md, scenario.dof_convention)?;
            let user = s.pos.with_z(dem.elevation_at(s.pos.x, s.pos.y)? + scenario.device_height);
            let (eta_x, eta_y, status) = predict_sample(&plan, &sps, user, sigma_c)?;
            let (max_unavailable, max_faults) = vote_extents(&plan);
            let point = PointResult {
                m: s.index,
                x: s.pos.x,
                y: s.pos.y,
                col: s.col,
                row: s.row,
                eta_x,
                eta_y,
                eta: eta_x.max(eta_y),
                status,
                max_unavailable,
                max_faults,
                excluded_failure_mass: plan.excluded_failure_mass(),
            };
            if let Some(p) = progress {
                p.fetch_add(1, Ordering::Relaxed);
            }
            Ok(SampleOutcome { probs, plan, point })
        })
        .collect()
}

pub fn predict_map(scenario: &Scenario, dem: &DemGrid) -> Result<ReliabilityMap> {
    predict_map_with_progress(scenario, dem, None)
}

pub fn predict_map_with_progress(
    scenario: &Scenario,
    dem: &DemGrid,
    progress: Option<&AtomicUsize>,
) -> Result<ReliabilityMap> {
    let outcomes = evaluate_samples(scenario, dem, progress)?;
    Ok(ReliabilityMap::from_points(scenario, outcomes.into_iter().map(|o| o.point).collect()))
}
