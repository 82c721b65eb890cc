//! File-based commands. The HTTP service calls the same functions, so both
//! front ends write identical bytes for identical inputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicUsize;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use uavrel_core::allocation::plan_sample;
use uavrel_core::dem::{load_dem, DemGrid};
use uavrel_core::hazard::{analyze, HazardReport};
use uavrel_core::mde::{predict_map_with_progress, ReliabilityMap};
use uavrel_core::monte_carlo::{run_trials, McConfig, McReport, Truth};
use uavrel_core::propagation::sample_row;
use uavrel_core::scenario::{load_scenario, synth_dem, Scenario, SynthDemSpec, TerrainKind};
use uavrel_core::Point2;

pub const RELIABILITY_CSV: &str = "reliability.csv";
pub const SUMMARY_TXT: &str = "summary.txt";
pub const MAP_JSON: &str = "map.json";
pub const HAZARD_CSV: &str = "hazard.csv";
pub const HAZARD_JSON: &str = "hazard.json";
pub const GUIDANCE_TXT: &str = "guidance.txt";
pub const MC_SUMMARY_TXT: &str = "mc_summary.txt";
pub const MC_PATTERNS_CSV: &str = "mc_patterns.csv";
pub const MC_REPORT_JSON: &str = "mc_report.json";

/// Requirement met.
pub const EXIT_PASS: u8 = 0;
pub const EXIT_ERROR: u8 = 1;
/// Map computed but the worst MDE exceeds the alert requirement.
pub const EXIT_UNMET: u8 = 2;

pub fn read_scenario(path: &Path) -> Result<Scenario> {
    load_scenario(path).with_context(|| format!("loading scenario {}", path.display()))
}

pub fn read_dem(path: &Path, scenario: &Scenario) -> Result<DemGrid> {
    load_dem(path, Some(&scenario.required_extent(0.0)))
        .with_context(|| format!("loading DEM {}", path.display()))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn exit_code(map: &ReliabilityMap) -> u8 {
    if map.requirement_met() {
        EXIT_PASS
    } else {
        EXIT_UNMET
    }
}

/// Computes the reliability map and writes the CSV, summary and signed map.
pub fn predict_to_dir(
    scenario: &Scenario,
    dem: &DemGrid,
    out: &Path,
    progress: Option<&AtomicUsize>,
) -> Result<ReliabilityMap> {
    let map = predict_map_with_progress(scenario, dem, progress)?;
    create_dir(out)?;
    write(out, RELIABILITY_CSV, &map.to_csv())?;
    write(out, SUMMARY_TXT, &map.summary().render())?;
    write(out, MAP_JSON, &map.to_signed_json())?;
    Ok(map)
}

pub fn read_map(path: &Path) -> Result<ReliabilityMap> {
    let text = fs::read_to_string(path).with_context(|| format!("reading map {}", path.display()))?;
    ReliabilityMap::from_signed_json(&text).with_context(|| format!("map {}", path.display()))
}

/// Hazard identification and voting; writes the tables and guidance text.
pub fn enhance_to_dir(scenario: &Scenario, dem: &DemGrid, map: &ReliabilityMap, out: &Path) -> Result<HazardReport> {
    let report = analyze(scenario, dem, map)?;
    create_dir(out)?;
    write(out, HAZARD_CSV, &report.to_csv())?;
    write(out, HAZARD_JSON, &serde_json::to_string_pretty(&report)?)?;
    write(out, GUIDANCE_TXT, &report.guidance())?;
    Ok(report)
}

pub fn truth_position(scenario: &Scenario, truth: Truth) -> Result<(usize, Point2)> {
    let grid = scenario.sample_grid();
    match truth {
        Truth::Sample { index } => match grid.get(index) {
            Some(s) => Ok((index, s.pos)),
            None => bail!("sample index {index} out of range (0..{})", grid.len()),
        },
        Truth::Point { x, y } => {
            let p = Point2::new(x, y);
            let nearest = grid
                .iter()
                .min_by(|a, b| a.pos.distance(&p).total_cmp(&b.pos.distance(&p)))
                .map_or(0, |s| s.index);
            Ok((nearest, p))
        }
    }
}

/// Allocation plan at the truth position, then the configured trials.
pub fn simulate(scenario: &Scenario, dem: &DemGrid, config: &McConfig) -> Result<McReport> {
    scenario.validate()?;
    let (m, pos) = truth_position(scenario, config.truth)?;
    let probs = sample_row(dem, scenario, &scenario.sp_positions(), pos)?;
    let req = &scenario.requirements;
    let plan = plan_sample(m, &probs, req.p_fa, req.p_md, scenario.dof_convention)?;
    Ok(run_trials(scenario, dem, &plan, config)?)
}

pub fn simulate_to_dir(scenario: &Scenario, dem: &DemGrid, config: &McConfig, out: &Path) -> Result<McReport> {
    let report = simulate(scenario, dem, config)?;
    create_dir(out)?;
    write(out, MC_SUMMARY_TXT, &report.summary().render())?;
    write(out, MC_PATTERNS_CSV, &report.patterns_csv())?;
    write(out, MC_REPORT_JSON, &serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Terrain request: either a full grid spec or a terrain shape fitted to a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TerrainRequest {
    Grid(SynthDemSpec),
    Shape(TerrainKind),
}

pub fn synth_dem_to_file(
    request: TerrainRequest,
    scenario: Option<&Scenario>,
    cell_size: f64,
    seed: Option<u64>,
    out: &Path,
) -> Result<DemGrid> {
    let mut spec = match (request, scenario) {
        (TerrainRequest::Grid(spec), _) => spec,
        (TerrainRequest::Shape(kind), Some(s)) => SynthDemSpec::for_scenario(kind, s, cell_size),
        (TerrainRequest::Shape(_), None) => bail!("a terrain shape without center and extent needs --scenario"),
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let grid = synth_dem(&spec)?;
    grid.write_to(out).with_context(|| format!("writing {}", out.display()))?;
    Ok(grid)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
