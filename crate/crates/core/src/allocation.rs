//! Splitting the false-alarm and missed-detection requirements across
//! observation and failure events of one sample point, and the detection
//! thresholds that follow.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::chi2::chi2_isf;
use crate::error::Result;
use crate::events::{
    enumerate_observation_events, failure_events_for, fill_priors, EventClass, FailureEvent,
    ObservationEvent,
};
use crate::geometry::DofConvention;
use crate::propagation::PairProbs;

/// Conditional rates are kept inside `(RATE_EPS, 1 - RATE_EPS)`.
pub const RATE_EPS: f64 = 1e-15;

fn clamp_rate(p: f64) -> f64 {
    p.clamp(RATE_EPS, 1.0 - RATE_EPS)
}

/// Position of the first item whose running sum reaches `need`, or
/// `values.len()` when the total stays short of it.
pub fn cutoff_index(values: &[f64], need: f64) -> usize {
    let mut acc = 0.0;
    for (i, v) in values.iter().enumerate() {
        acc += v;
        if acc >= need {
            return i;
        }
    }
    values.len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaEvent {
    pub event: ObservationEvent,
    pub dof: u32,
    pub conditional_fa: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaAllocation {
    /// Positioning-only mass already meets or exceeds the requirement.
    pub infeasible: bool,
    /// 1-based rank of the first considered event in ascending normal prior.
    pub g_star: usize,
    /// Excluded detection events, always alarming.
    pub excluded: Vec<ObservationEvent>,
    pub excluded_fa_mass: f64,
    pub considered: Vec<FaEvent>,
}

/// False-alarm allocation over detection-capable events.
pub fn allocate_fa(
    det_events: &[ObservationEvent],
    po_mass: f64,
    p_fa_req: f64,
    convention: DofConvention,
) -> Result<FaAllocation> {
    let need = p_fa_req - po_mass;
    let mut sorted: Vec<ObservationEvent> = det_events.to_vec();
    sorted.sort_by(|a, b| a.normal_prior.total_cmp(&b.normal_prior).then(a.mask.cmp(&b.mask)));
    if need <= 0.0 {
        return Ok(FaAllocation {
            infeasible: true,
            g_star: sorted.len() + 1,
            excluded_fa_mass: sorted.iter().map(|e| e.normal_prior).sum(),
            excluded: sorted,
            considered: Vec::new(),
        });
    }
    let normals: Vec<f64> = sorted.iter().map(|e| e.normal_prior).collect();
    let mut cut = cutoff_index(&normals, need);
    let mut excluded_mass: f64 = normals[..cut].iter().sum();
    let mut rest: f64 = normals[cut..].iter().sum();
    let remaining = need - excluded_mass;
    if cut < sorted.len() && remaining >= rest {
        // the share would reach 1: these events alarm unconditionally as well
        cut = sorted.len();
        excluded_mass += rest;
        rest = 0.0;
    }
    let share = if rest > 0.0 { clamp_rate(remaining / rest) } else { 1.0 };
    let considered = sorted[cut..]
        .iter()
        .map(|ev| {
            let dof = convention
                .dof(ev.available)
                .expect("detection events keep at least one degree of freedom");
            Ok(FaEvent { event: *ev, dof, conditional_fa: share, threshold: chi2_isf(share, dof)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FaAllocation {
        infeasible: false,
        g_star: cut + 1,
        excluded: sorted[..cut].to_vec(),
        excluded_fa_mass: excluded_mass,
        considered,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MdFailure {
    pub event: FailureEvent,
    pub conditional_md: f64,
    pub md_budget_x: f64,
    pub md_budget_y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdAllocation {
    pub event_budget: f64,
    pub failure_mass: f64,
    /// 1-based rank of the first considered failure event in ascending prior.
    pub q_star: usize,
    pub excluded: Vec<FailureEvent>,
    pub excluded_mass: f64,
    /// Failure events remain but no budget is left for them.
    pub budget_exhausted: bool,
    pub considered: Vec<MdFailure>,
}

/// Splits one observation event's MD budget among its failure events.
pub fn allocate_md_within(event_budget: f64, failures: &[FailureEvent]) -> MdAllocation {
    let mut sorted = failures.to_vec();
    sorted.sort_by(|a, b| a.prior.total_cmp(&b.prior).then(a.fault_mask.cmp(&b.fault_mask)));
    let failure_mass: f64 = sorted.iter().map(|f| f.prior).sum();
    if failure_mass <= 0.0 {
        return MdAllocation {
            event_budget,
            failure_mass,
            q_star: sorted.len() + 1,
            excluded_mass: 0.0,
            excluded: sorted,
            budget_exhausted: false,
            considered: Vec::new(),
        };
    }
    let priors: Vec<f64> = sorted.iter().map(|f| f.prior).collect();
    let cut = cutoff_index(&priors, event_budget);
    let excluded_mass: f64 = priors[..cut].iter().sum();
    let rest: f64 = priors[cut..].iter().sum();
    let remaining = event_budget - excluded_mass;
    let budget_exhausted = cut < sorted.len() && remaining <= 0.0;
    let considered = if budget_exhausted {
        Vec::new()
    } else {
        let share = clamp_rate(remaining / rest);
        sorted[cut..]
            .iter()
            .map(|f| MdFailure {
                event: *f,
                conditional_md: share,
                md_budget_x: 0.5 * share,
                md_budget_y: 0.5 * share,
            })
            .collect()
    };
    MdAllocation {
        event_budget,
        failure_mass,
        q_star: cut + 1,
        excluded: sorted[..cut].to_vec(),
        excluded_mass,
        budget_exhausted,
        considered,
    }
}

/// MD allocation over considered events, proportional to failure mass.
pub fn allocate_md(
    considered: &[ObservationEvent],
    failures: &[Vec<FailureEvent>],
    p_md_req: f64,
) -> Vec<MdAllocation> {
    let masses: Vec<f64> = considered.iter().map(|e| (e.prior - e.normal_prior).max(0.0)).collect();
    let total: f64 = masses.iter().sum();
    masses
        .iter()
        .zip(failures)
        .map(|(&mass, fails)| {
            let budget = if total > 0.0 { p_md_req * mass / total } else { 0.0 };
            allocate_md_within(budget, fails)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedEvent {
    pub event: ObservationEvent,
    pub dof: u32,
    pub conditional_fa: f64,
    pub threshold: f64,
    pub md: MdAllocation,
}

/// What a receiver does when a given visibility pattern occurs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MaskRule {
    NoService,
    Alarm,
    Test { threshold: f64, dof: u32 },
}

/// Full FA/MD allocation for one sample point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub m: usize,
    pub num_sps: usize,
    pub p_fa_req: f64,
    pub p_md_req: f64,
    pub convention: DofConvention,
    pub su_mass: f64,
    pub po_mass: f64,
    pub infeasible: bool,
    pub g_star: usize,
    pub excluded_fa_mass: f64,
    pub excluded: Vec<ObservationEvent>,
    pub events: Vec<PlannedEvent>,
}

impl AllocationPlan {
    pub fn rule_for(&self, mask: u32) -> MaskRule {
        match EventClass::of(mask.count_ones() as usize) {
            EventClass::Su => MaskRule::NoService,
            EventClass::Po => MaskRule::Alarm,
            EventClass::Det => self
                .events
                .iter()
                .find(|e| e.event.mask == mask)
                .map_or(MaskRule::Alarm, |e| MaskRule::Test { threshold: e.threshold, dof: e.dof }),
        }
    }

    /// FA mass spent: considered shares, excluded events and positioning-only events.
    pub fn fa_total(&self) -> f64 {
        let considered: f64 =
            self.events.iter().map(|e| e.conditional_fa * e.event.normal_prior).sum();
        considered + self.excluded_fa_mass + self.po_mass
    }

    /// MD mass spent: considered conditional rates plus excluded failure mass.
    pub fn md_total(&self) -> f64 {
        self.events
            .iter()
            .map(|e| {
                let kept: f64 = e.md.considered.iter().map(|f| f.conditional_md * f.event.prior).sum();
                kept + e.md.excluded_mass
            })
            .sum()
    }

    pub fn excluded_failure_mass(&self) -> f64 {
        self.events.iter().map(|e| e.md.excluded_mass).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("m,event_mask,class,status,threshold,conditional_fa,failure_mask,md_budget_x\n");
        for e in &self.excluded {
            let _ = writeln!(out, "{},{},{},excluded,,1,,", self.m, e.mask, e.class.label());
        }
        for e in &self.events {
            let head = format!(
                "{},{},{},considered,{},{}",
                self.m,
                e.event.mask,
                e.event.class.label(),
                e.threshold,
                e.conditional_fa
            );
            for f in &e.md.excluded {
                let _ = writeln!(out, "{head},{},1", f.fault_mask);
            }
            for f in &e.md.considered {
                let _ = writeln!(out, "{head},{},{}", f.event.fault_mask, f.md_budget_x);
            }
        }
        out
    }
}

/// Runs both allocations for the per-SP probabilities of sample `m`.
pub fn plan_sample(
    m: usize,
    probs: &[PairProbs],
    p_fa_req: f64,
    p_md_req: f64,
    convention: DofConvention,
) -> Result<AllocationPlan> {
    let mut events = enumerate_observation_events(probs.len())?;
    fill_priors(&mut events, probs);
    let mass = |cls| events.iter().filter(|e| e.class == cls).map(|e| e.prior).sum::<f64>();
    let su_mass = mass(EventClass::Su);
    let po_mass = mass(EventClass::Po);
    let det: Vec<ObservationEvent> =
        events.iter().filter(|e| e.class == EventClass::Det).copied().collect();
    let fa = allocate_fa(&det, po_mass, p_fa_req, convention)?;
    let considered: Vec<ObservationEvent> = fa.considered.iter().map(|e| e.event).collect();
    let failures: Vec<Vec<FailureEvent>> =
        considered.iter().map(|e| failure_events_for(e, probs)).collect();
    let md = allocate_md(&considered, &failures, p_md_req);
    let planned = fa
        .considered
        .into_iter()
        .zip(md)
        .map(|(f, md)| PlannedEvent {
            event: f.event,
            dof: f.dof,
            conditional_fa: f.conditional_fa,
            threshold: f.threshold,
            md,
        })
        .collect();
    Ok(AllocationPlan {
        m,
        num_sps: probs.len(),
        p_fa_req,
        p_md_req,
        convention,
        su_mass,
        po_mass,
        infeasible: fa.infeasible,
        g_star: fa.g_star,
        excluded_fa_mass: fa.excluded_fa_mass,
        excluded: fa.excluded,
        events: planned,
    })
}
