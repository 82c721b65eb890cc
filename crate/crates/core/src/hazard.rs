//! Hazardous-area identification, 8-connected segmentation and the voting
//! cause analysis that points at the service points to move.

use std::collections::HashMap;
use std::fmt::Write as _;

use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};

use crate::dem::DemGrid;
use crate::error::{Error, Result};
use crate::mde::{PointResult, PointStatus, ReliabilityMap};
use crate::propagation::{sample_row, PairProbs};
use crate::scenario::Scenario;

/// Whether each point is hazardous at threshold `eta_t`. Points without a
/// usable prediction are always hazardous.
pub fn identify(points: &[PointResult], eta_t: f64) -> Vec<bool> {
    points
        .iter()
        .map(|p| match p.status {
            PointStatus::Unavailable | PointStatus::Infeasible => true,
            _ => p.eta > eta_t,
        })
        .collect()
}

/// Maximal 8-connected groups of lattice cells, as indices into `cells`.
/// Groups are ordered by their smallest index, members ascending.
pub fn segment(cells: &[(i64, i64)]) -> Vec<Vec<usize>> {
    let lookup: HashMap<(i64, i64), usize> = cells.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut uf = UnionFind::<usize>::new(cells.len());
    for (i, &(c, r)) in cells.iter().enumerate() {
        // half of the neighborhood suffices since union is symmetric
        for (dc, dr) in [(1, 0), (-1, 1), (0, 1), (1, 1)] {
            if let Some(&j) = lookup.get(&(c + dc, r + dr)) {
                uf.union(i, j);
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot: HashMap<usize, usize> = HashMap::new();
    for i in 0..cells.len() {
        let root = uf.find(i);
        let g = *slot.entry(root).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    groups
}

/// Per-point inputs to the vote.
#[derive(Debug, Clone, PartialEq)]
pub struct VoterInput {
    pub eta_x: f64,
    pub eta_y: f64,
    pub max_unavailable: usize,
    pub max_faults: usize,
    pub p_block: Vec<f64>,
    pub p_fail_given_obtain: Vec<f64>,
}

impl VoterInput {
    pub fn new(point: &PointResult, probs: &[PairProbs]) -> Self {
        Self {
            eta_x: point.eta_x,
            eta_y: point.eta_y,
            max_unavailable: point.max_unavailable,
            max_faults: point.max_faults,
            p_block: probs.iter().map(|p| p.p_block).collect(),
            p_fail_given_obtain: probs.iter().map(|p| p.p_fail_given_obtain).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteVectors {
    pub u_x: Vec<f64>,
    pub f_x: Vec<f64>,
    pub u_y: Vec<f64>,
    pub f_y: Vec<f64>,
}

impl VoteVectors {
    fn zeros(k: usize) -> Self {
        Self { u_x: vec![0.0; k], f_x: vec![0.0; k], u_y: vec![0.0; k], f_y: vec![0.0; k] }
    }

    pub fn rows(&self) -> [(&'static str, &[f64]); 4] {
        [("v_U_x", &self.u_x), ("v_F|O_x", &self.f_x), ("v_U_y", &self.u_y), ("v_F|O_y", &self.f_y)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardArea {
    pub id: usize,
    /// Sample indices.
    pub members: Vec<usize>,
    pub raw: VoteVectors,
    /// Raw votes rounded half up.
    pub binary: VoteVectors,
    /// Sum of normalized point weights per direction (1 or 0).
    pub weight_sum_x: f64,
    pub weight_sum_y: f64,
    /// Members with an infinite MDE on either axis, voting with a capped excess.
    pub capped_points: usize,
}

/// Squared excess over `eta_t`; infinite values count as an excess of `eta_t`.
fn excess(eta: f64, eta_t: f64) -> f64 {
    if eta.is_infinite() {
        eta_t * eta_t
    } else if eta > eta_t {
        (eta - eta_t).powi(2)
    } else {
        0.0
    }
}

/// Indices of the `n` largest values, ties to the lower index.
fn top_indices(values: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

fn round_half_up(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x + 0.5).floor()).collect()
}

/// Voting over the members of one area.
pub fn vote(id: usize, members: Vec<usize>, voters: &[VoterInput], eta_t: f64) -> HazardArea {
    let k = voters.first().map_or(0, |v| v.p_block.len());
    let mut raw = VoteVectors::zeros(k);
    let capped_points = voters.iter().filter(|v| v.eta_x.is_infinite() || v.eta_y.is_infinite()).count();
    let mut weight_sum = [0.0; 2];
    let picks: [fn(&VoterInput) -> f64; 2] = [|v| v.eta_x, |v| v.eta_y];
    for (d, pick) in picks.into_iter().enumerate() {
        let ex: Vec<f64> = voters.iter().map(|v| excess(pick(v), eta_t)).collect();
        let total: f64 = ex.iter().sum();
        if total <= 0.0 {
            continue;
        }
        for (v, &e) in voters.iter().zip(&ex) {
            if e <= 0.0 {
                continue;
            }
            let w = e / total;
            weight_sum[d] += w;
            let (u, f) = if d == 0 { (&mut raw.u_x, &mut raw.f_x) } else { (&mut raw.u_y, &mut raw.f_y) };
            for sp in top_indices(&v.p_block, v.max_unavailable) {
                u[sp] += w;
            }
            for sp in top_indices(&v.p_fail_given_obtain, v.max_faults) {
                f[sp] += w;
            }
        }
    }
    let binary = VoteVectors {
        u_x: round_half_up(&raw.u_x),
        f_x: round_half_up(&raw.f_x),
        u_y: round_half_up(&raw.u_y),
        f_y: round_half_up(&raw.f_y),
    };
    HazardArea {
        id,
        members,
        raw,
        binary,
        weight_sum_x: weight_sum[0],
        weight_sum_y: weight_sum[1],
        capped_points,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardReport {
    pub scenario_hash: String,
    pub eta_t: f64,
    pub num_sps: usize,
    pub hazardous_points: usize,
    pub areas: Vec<HazardArea>,
}

impl HazardReport {
    /// Voting tables, one block of four rows per area.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("area,vector");
        for k in 1..=self.num_sps {
            let _ = write!(out, ",SP{k}");
        }
        out.push('\n');
        for a in &self.areas {
            for (name, row) in a.binary.rows() {
                let _ = write!(out, "{},{name}", a.id);
                for v in row {
                    let _ = write!(out, ",{}", *v as u8);
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn guidance(&self) -> String {
        if self.areas.is_empty() {
            return "no hazardous areas\n".into();
        }
        let list = |row: &[f64]| {
            let sps: Vec<String> =
                row.iter().enumerate().filter(|(_, v)| **v >= 1.0).map(|(k, _)| format!("SP{}", k + 1)).collect();
            if sps.is_empty() {
                "none".to_string()
            } else {
                sps.join(" ")
            }
        };
        let mut out = String::new();
        for a in &self.areas {
            let _ = writeln!(out, "area {} ({} points)", a.id, a.members.len());
            let _ = writeln!(out, "  low visibility, x: {}", list(&a.binary.u_x));
            let _ = writeln!(out, "  high conditional failure, x: {}", list(&a.binary.f_x));
            let _ = writeln!(out, "  low visibility, y: {}", list(&a.binary.u_y));
            let _ = writeln!(out, "  high conditional failure, y: {}", list(&a.binary.f_y));
            if a.capped_points > 0 {
                let _ = writeln!(out, "  points with unbounded error (capped weight): {}", a.capped_points);
            }
        }
        out
    }
}

/// Identification, segmentation and voting given per-point probabilities.
pub fn analyze_points(
    points: &[PointResult],
    probs: impl Fn(usize) -> Result<Vec<PairProbs>>,
    eta_t: f64,
    scenario_hash: &str,
    num_sps: usize,
) -> Result<HazardReport> {
    let flags = identify(points, eta_t);
    let hazardous: Vec<&PointResult> = points.iter().zip(&flags).filter(|(_, f)| **f).map(|(p, _)| p).collect();
    let cells: Vec<(i64, i64)> = hazardous.iter().map(|p| (p.col, p.row)).collect();
    let mut areas = Vec::new();
    for (i, group) in segment(&cells).into_iter().enumerate() {
        let voters = group
            .iter()
            .map(|&j| Ok(VoterInput::new(hazardous[j], &probs(hazardous[j].m)?)))
            .collect::<Result<Vec<_>>>()?;
        let members = group.iter().map(|&j| hazardous[j].m).collect();
        areas.push(vote(i + 1, members, &voters, eta_t));
    }
    Ok(HazardReport {
        scenario_hash: scenario_hash.to_string(),
        eta_t,
        num_sps,
        hazardous_points: hazardous.len(),
        areas,
    })
}

/// Cause analysis of a map produced from `scenario`.
pub fn analyze(scenario: &Scenario, dem: &DemGrid, map: &ReliabilityMap) -> Result<HazardReport> {
    let hash = scenario.content_hash();
    if map.scenario_hash != hash {
        return Err(Error::Integrity(format!(
            "map was computed for scenario {} but {} was given",
            map.scenario_hash, hash
        )));
    }
    let sps = scenario.sp_positions();
    let grid = scenario.sample_grid();
    analyze_points(
        &map.points,
        |m| sample_row(dem, scenario, &sps, grid[m].pos),
        scenario.requirements.eta_t,
        &hash,
        scenario.num_sps(),
    )
}
