//! Observation events (which SPs yield a range) and failure events (which of
//! the obtained ranges are biased), with their prior probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::propagation::{PairProbs, PropagationTable};

pub const MAX_SPS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EventClass {
    /// Too few ranges for a position.
    Su,
    /// Exactly enough ranges for a position, none to spare for detection.
    Po,
    /// Redundant ranges; residual-based detection applies.
    Det,
}

impl EventClass {
    pub fn of(available: usize) -> Self {
        match available {
            0..=2 => EventClass::Su,
            3 => EventClass::Po,
            _ => EventClass::Det,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            EventClass::Su => "SU",
            EventClass::Po => "PO",
            EventClass::Det => "DET",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationEvent {
    pub mask: u32,
    pub available: usize,
    pub class: EventClass,
    pub prior: f64,
    /// Prior of this pattern with every obtained range fault-free.
    pub normal_prior: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureEvent {
    pub parent_mask: u32,
    pub fault_mask: u32,
    pub faults: usize,
    pub prior: f64,
}

/// Indices of the set bits of `mask`, ascending.
pub fn mask_indices(mask: u32) -> impl Iterator<Item = usize> {
    (0..32).filter(move |k| mask >> k & 1 == 1)
}

/// All `2^k` visibility patterns, priors zeroed.
pub fn enumerate_observation_events(k: usize) -> Result<Vec<ObservationEvent>> {
    if k == 0 || k > MAX_SPS {
        return Err(Error::InvalidArgument(format!(
            "number of SPs must lie in 1..={MAX_SPS}, got {k}"
        )));
    }
    Ok((0..1u32 << k)
        .map(|mask| {
            let available = mask.count_ones() as usize;
            ObservationEvent {
                mask,
                available,
                class: EventClass::of(available),
                prior: 0.0,
                normal_prior: 0.0,
            }
        })
        .collect())
}

/// Fills priors from the per-SP probabilities of one sample point.
pub fn fill_priors(events: &mut [ObservationEvent], probs: &[PairProbs]) {
    for ev in events.iter_mut() {
        let mut prior = 1.0;
        let mut normal = 1.0;
        for (k, p) in probs.iter().enumerate() {
            if ev.mask >> k & 1 == 1 {
                prior *= p.p_obtain;
                normal *= p.p_normal_given_obtain;
            } else {
                prior *= p.p_block;
            }
        }
        ev.prior = prior;
        ev.normal_prior = prior * normal;
    }
}

pub fn event_priors(events: &mut [ObservationEvent], table: &PropagationTable, m: usize) {
    fill_priors(events, table.sample(m));
}

/// Every nonempty fault pattern inside `obs`, ascending by fault mask.
pub fn failure_events_for(obs: &ObservationEvent, probs: &[PairProbs]) -> Vec<FailureEvent> {
    let mut out = Vec::with_capacity((1usize << obs.available) - 1);
    let mut sub = obs.mask;
    while sub != 0 {
        let mut prior = obs.prior;
        for k in mask_indices(obs.mask) {
            prior *= if sub >> k & 1 == 1 {
                probs[k].p_fail_given_obtain
            } else {
                probs[k].p_normal_given_obtain
            };
        }
        out.push(FailureEvent {
            parent_mask: obs.mask,
            fault_mask: sub,
            faults: sub.count_ones() as usize,
            prior,
        });
        sub = (sub - 1) & obs.mask;
    }
    out.reverse();
    out
}

pub fn enumerate_failure_events(
    obs: &ObservationEvent,
    table: &PropagationTable,
    m: usize,
) -> Vec<FailureEvent> {
    failure_events_for(obs, table.sample(m))
}
