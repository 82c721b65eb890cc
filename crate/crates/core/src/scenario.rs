//! Mission scenario: uncertainty area, service-point ring, channel and
//! ranging parameters, requirements, plus synthetic terrain for tests.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dem::{DemGrid, Extent};
use crate::error::{Error, Result};
use crate::events::MAX_SPS;
use crate::geometry::DofConvention;
use crate::point::{Point2, Point3};
use crate::propagation::{ChannelParams, SPEED_OF_LIGHT};
use crate::twr::{clock_noise_sigma, TwrParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Requirements {
    /// Tolerable position error per axis, m.
    pub eta_req: f64,
    pub p_fa: f64,
    pub p_md: f64,
    /// Hazard threshold, m; kept below `eta_req`.
    pub eta_t: f64,
}

impl Default for Requirements {
    fn default() -> Self {
        Self { eta_req: 20.0, p_fa: 1e-4, p_md: 1e-6, eta_t: 18.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub center: Point2,
    pub r_un: f64,
    pub spacing: f64,
    pub d_min: f64,
    pub h_b: f64,
    /// Counterclockwise from east, degrees.
    pub sp_angles_deg: Vec<f64>,
    pub channel: ChannelParams,
    pub twr: TwrParams,
    pub requirements: Requirements,
    pub exclusion_radius: f64,
    pub device_height: f64,
    pub dof_convention: DofConvention,
    /// Overrides the terrain-profile step derived from the DEM cell size.
    pub profile_step: Option<f64>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            center: Point2::new(0.0, 0.0),
            r_un: 200.0,
            spacing: 10.0,
            d_min: 400.0,
            h_b: 100.0,
            sp_angles_deg: (0..8).map(|k| 45.0 * k as f64).collect(),
            channel: ChannelParams::default(),
            twr: TwrParams::default(),
            requirements: Requirements::default(),
            exclusion_radius: 20.0,
            device_height: 1.5,
            dof_convention: DofConvention::default(),
            profile_step: None,
        }
    }
}

/// One lattice point of the uncertainty area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplePoint {
    pub index: usize,
    pub pos: Point2,
    /// Lattice offsets from the center in units of the spacing.
    pub col: i64,
    pub row: i64,
}

/// Lattice points within `r_un` of `center`, ordered by row (south to north)
/// then column (west to east).
pub fn sample_grid(center: Point2, r_un: f64, spacing: f64) -> Vec<SamplePoint> {
    let n = (r_un / spacing + 1e-9).floor() as i64;
    let r2 = (r_un / spacing).powi(2) * (1.0 + 1e-12) + 1e-12;
    let mut out = Vec::new();
    for row in -n..=n {
        for col in -n..=n {
            if ((row * row + col * col) as f64) <= r2 {
                out.push(SamplePoint {
                    index: out.len(),
                    pos: Point2::new(center.x + col as f64 * spacing, center.y + row as f64 * spacing),
                    col,
                    row,
                });
            }
        }
    }
    out
}

impl Scenario {
    pub fn num_sps(&self) -> usize {
        self.sp_angles_deg.len()
    }

    pub fn sigma_c(&self) -> f64 {
        clock_noise_sigma(&self.twr, self.channel.c)
    }

    pub fn sample_grid(&self) -> Vec<SamplePoint> {
        sample_grid(self.center, self.r_un, self.spacing)
    }

    pub fn sp_positions(&self) -> Vec<Point3> {
        self.sp_angles_deg
            .iter()
            .map(|deg| {
                let a = deg.to_radians();
                Point3::new(
                    self.center.x + self.d_min * a.cos(),
                    self.center.y + self.d_min * a.sin(),
                    self.h_b,
                )
            })
            .collect()
    }

    /// Square around the center reaching `margin` beyond the SP ring.
    pub fn required_extent(&self, margin: f64) -> Extent {
        let half = self.d_min.max(self.r_un) + margin;
        Extent {
            min_x: self.center.x - half,
            min_y: self.center.y - half,
            max_x: self.center.x + half,
            max_y: self.center.y + half,
        }
    }

    pub fn with_rotation(&self, degrees: f64) -> Self {
        let mut s = self.clone();
        for a in &mut s.sp_angles_deg {
            *a += degrees;
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Scenario { field: field.into(), msg });
        let finite = [
            ("scenario.center", self.center.x + self.center.y),
            ("scenario.h_b", self.h_b),
            ("model.device_height_m", self.device_height),
        ];
        for (field, v) in finite {
            if !v.is_finite() {
                return bad(field, "must be finite".into());
            }
        }
        if !(self.r_un > 0.0) {
            return bad("scenario.r_un", format!("must be > 0, got {}", self.r_un));
        }
        if !(self.spacing > 0.0) {
            return bad("scenario.spacing", format!("must be > 0, got {}", self.spacing));
        }
        if !(self.d_min > 0.0) {
            return bad("scenario.d_min", format!("must be > 0, got {}", self.d_min));
        }
        let k = self.num_sps();
        if k == 0 || k > MAX_SPS {
            return bad("scenario.sp_angles_deg", format!("needs 1..={MAX_SPS} angles, got {k}"));
        }
        if let Some(i) = self.sp_angles_deg.iter().position(|a| !a.is_finite()) {
            return bad(&format!("scenario.sp_angles_deg[{i}]"), "must be finite".into());
        }
        self.channel.validate()?;
        self.twr.validate()?;
        let r = &self.requirements;
        if !(r.eta_req > 0.0) {
            return bad("requirements.eta_req_m", format!("must be > 0, got {}", r.eta_req));
        }
        if !(r.eta_t > 0.0 && r.eta_t < r.eta_req) {
            return bad(
                "requirements.eta_t_m",
                format!("must lie in (0, eta_req_m = {}), got {}", r.eta_req, r.eta_t),
            );
        }
        if !(r.p_fa > 0.0 && r.p_fa < 1.0) {
            return bad("requirements.p_fa", format!("must lie in (0, 1), got {}", r.p_fa));
        }
        if !(r.p_md > 0.0 && r.p_md < 1.0) {
            return bad("requirements.p_md", format!("must lie in (0, 1), got {}", r.p_md));
        }
        if !(self.exclusion_radius >= 0.0) {
            return bad("model.exclusion_radius_m", "must be >= 0".into());
        }
        if let Some(step) = self.profile_step {
            if !(step > 0.0) {
                return bad("model.profile_step_m", format!("must be > 0, got {step}"));
            }
        }
        Ok(())
    }

    pub fn to_file(&self) -> ScenarioFile {
        ScenarioFile {
            scenario: GeometrySection {
                center: self.center,
                r_un: self.r_un,
                spacing: self.spacing,
                d_min: self.d_min,
                h_b: self.h_b,
                sp_angles_deg: self.sp_angles_deg.clone(),
            },
            channel: ChannelSection {
                fc_hz: self.channel.f_c,
                alpha_n: self.channel.alpha_n,
                sigma_n_db: self.channel.sigma_n,
                pt_u_dbm: self.channel.p_tu,
                pn0_dbm: self.channel.p_n0,
                snr_min_db: self.channel.snr_min,
                sigma_h_m: self.channel.sigma_h,
                speed_of_light: self.channel.c,
            },
            twr: TwrSection {
                tau_d_s: self.twr.tau_d,
                o_u_ppm: self.twr.o_u * 1e6,
                p_if: self.twr.p_if,
            },
            requirements: RequirementsSection {
                eta_req_m: self.requirements.eta_req,
                p_fa: self.requirements.p_fa,
                p_md: self.requirements.p_md,
                eta_t_m: self.requirements.eta_t,
            },
            model: ModelSection {
                exclusion_radius_m: self.exclusion_radius,
                device_height_m: self.device_height,
                dof_convention: self.dof_convention,
                profile_step_m: self.profile_step,
            },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("scenario serializes")
    }

    /// SHA-256 of the compact canonical JSON form.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_vec(&self.to_file()).expect("scenario serializes");
        crate::report::sha256_hex(&canonical)
    }
}

/// On-disk JSON layout. Omitted sections and fields take the default mission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioFile {
    pub scenario: GeometrySection,
    pub channel: ChannelSection,
    pub twr: TwrSection,
    pub requirements: RequirementsSection,
    pub model: ModelSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometrySection {
    pub center: Point2,
    pub r_un: f64,
    pub spacing: f64,
    pub d_min: f64,
    pub h_b: f64,
    pub sp_angles_deg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSection {
    pub fc_hz: f64,
    pub alpha_n: f64,
    pub sigma_n_db: f64,
    pub pt_u_dbm: f64,
    pub pn0_dbm: f64,
    pub snr_min_db: f64,
    pub sigma_h_m: f64,
    pub speed_of_light: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwrSection {
    pub tau_d_s: f64,
    pub o_u_ppm: f64,
    pub p_if: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RequirementsSection {
    pub eta_req_m: f64,
    pub p_fa: f64,
    pub p_md: f64,
    pub eta_t_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub exclusion_radius_m: f64,
    pub device_height_m: f64,
    pub dof_convention: DofConvention,
    pub profile_step_m: Option<f64>,
}

impl Default for ScenarioFile {
    fn default() -> Self {
        Scenario::default().to_file()
    }
}

macro_rules! section_default {
    ($ty:ident, $field:ident) => {
        impl Default for $ty {
            fn default() -> Self {
                ScenarioFile::default().$field
            }
        }
    };
}

section_default!(GeometrySection, scenario);
section_default!(ChannelSection, channel);
section_default!(TwrSection, twr);
section_default!(RequirementsSection, requirements);
section_default!(ModelSection, model);

impl ScenarioFile {
    pub fn into_scenario(self) -> Result<Scenario> {
        let s = Scenario {
            center: self.scenario.center,
            r_un: self.scenario.r_un,
            spacing: self.scenario.spacing,
            d_min: self.scenario.d_min,
            h_b: self.scenario.h_b,
            sp_angles_deg: self.scenario.sp_angles_deg,
            channel: ChannelParams {
                f_c: self.channel.fc_hz,
                alpha_n: self.channel.alpha_n,
                sigma_n: self.channel.sigma_n_db,
                p_tu: self.channel.pt_u_dbm,
                p_n0: self.channel.pn0_dbm,
                snr_min: self.channel.snr_min_db,
                sigma_h: self.channel.sigma_h_m,
                c: self.channel.speed_of_light,
            },
            twr: TwrParams {
                tau_d: self.twr.tau_d_s,
                o_u: self.twr.o_u_ppm / 1e6,
                p_if: self.twr.p_if,
            },
            requirements: Requirements {
                eta_req: self.requirements.eta_req_m,
                p_fa: self.requirements.p_fa,
                p_md: self.requirements.p_md,
                eta_t: self.requirements.eta_t_m,
            },
            exclusion_radius: self.model.exclusion_radius_m,
            device_height: self.model.device_height_m,
            dof_convention: self.model.dof_convention,
            profile_step: self.model.profile_step_m,
        };
        s.validate()?;
        Ok(s)
    }
}

/// Parses and validates a JSON scenario. An empty document yields the
/// default mission.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let file: ScenarioFile = if text.trim().is_empty() {
        ScenarioFile::default()
    } else {
        serde_json::from_str(text).map_err(|e| Error::Scenario {
            field: "document".into(),
            msg: e.to_string(),
        })?
    };
    file.into_scenario()
}

pub fn load_scenario(path: &std::path::Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    parse_scenario(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TerrainKind {
    Flat {
        height: f64,
    },
    Plane {
        base: f64,
        /// Rise per meter eastward and northward.
        slope_x: f64,
        slope_y: f64,
    },
    GaussianHills {
        count: usize,
        max_height: f64,
        min_sigma: f64,
        max_sigma: f64,
    },
    /// Flat floor along a line through the center, flanked by two ridges.
    Valley {
        floor_width: f64,
        ridge_height: f64,
        ridge_width: f64,
        /// Direction of the valley axis, degrees counterclockwise from east.
        axis_deg: f64,
    },
    /// Straight ridge crossing the ray at `angle_deg` at `distance` from the center.
    Wall {
        height: f64,
        thickness: f64,
        length: f64,
        distance: f64,
        angle_deg: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDemSpec {
    #[serde(flatten)]
    pub kind: TerrainKind,
    pub center: Point2,
    /// Half side of the square grid, m.
    pub half_extent: f64,
    pub cell_size: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SynthDemSpec {
    /// Square grid covering the scenario's SP ring with 100 m to spare.
    pub fn for_scenario(kind: TerrainKind, scenario: &Scenario, cell_size: f64) -> Self {
        Self {
            kind,
            center: scenario.center,
            half_extent: scenario.d_min.max(scenario.r_un) + 100.0,
            cell_size,
            seed: 0,
        }
    }
}

/// Smooth bump of unit height and support `[-width/2, width/2]`.
fn raised_cosine(offset: f64, width: f64) -> f64 {
    if offset.abs() >= 0.5 * width {
        0.0
    } else {
        (PI * offset / width).cos().powi(2)
    }
}

pub fn synth_dem(spec: &SynthDemSpec) -> Result<DemGrid> {
    if !(spec.cell_size > 0.0 && spec.half_extent > 0.0) {
        return Err(Error::InvalidArgument("synthetic DEM needs positive size and cell".into()));
    }
    let n = (2.0 * spec.half_extent / spec.cell_size).ceil() as usize + 1;
    let origin_x = spec.center.x - 0.5 * n as f64 * spec.cell_size;
    let origin_y = spec.center.y - 0.5 * n as f64 * spec.cell_size;
    let (cx, cy) = (spec.center.x, spec.center.y);
    match &spec.kind {
        TerrainKind::Flat { height } => DemGrid::from_fn(origin_x, origin_y, spec.cell_size, n, n, |_, _| *height),
        TerrainKind::Plane { base, slope_x, slope_y } => {
            DemGrid::from_fn(origin_x, origin_y, spec.cell_size, n, n, |x, y| {
                base + slope_x * (x - cx) + slope_y * (y - cy)
            })
        }
        TerrainKind::GaussianHills { count, max_height, min_sigma, max_sigma } => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let half = spec.half_extent;
            let hills: Vec<(f64, f64, f64, f64)> = (0..*count)
                .map(|_| {
                    let x = cx + rng.random_range(-half..=half);
                    let y = cy + rng.random_range(-half..=half);
                    let h = max_height * rng.random_range(0.3..=1.0);
                    let s = if max_sigma > min_sigma {
                        rng.random_range(*min_sigma..=*max_sigma)
                    } else {
                        *min_sigma
                    };
                    (x, y, h, s)
                })
                .collect();
            DemGrid::from_fn(origin_x, origin_y, spec.cell_size, n, n, |x, y| {
                hills
                    .iter()
                    .map(|&(hx, hy, h, s)| {
                        h * (-((x - hx).powi(2) + (y - hy).powi(2)) / (2.0 * s * s)).exp()
                    })
                    .sum()
            })
        }
        TerrainKind::Valley { floor_width, ridge_height, ridge_width, axis_deg } => {
            let a = axis_deg.to_radians();
            let (nx, ny) = (-a.sin(), a.cos());
            let crest = 0.5 * floor_width + 0.5 * ridge_width;
            DemGrid::from_fn(origin_x, origin_y, spec.cell_size, n, n, |x, y| {
                let across = ((x - cx) * nx + (y - cy) * ny).abs();
                ridge_height * raised_cosine(across - crest, *ridge_width)
            })
        }
        TerrainKind::Wall { height, thickness, length, distance, angle_deg } => {
            let a = angle_deg.to_radians();
            let (ux, uy) = (a.cos(), a.sin());
            DemGrid::from_fn(origin_x, origin_y, spec.cell_size, n, n, |x, y| {
                let along_ray = (x - cx) * ux + (y - cy) * uy;
                let along_wall = -(x - cx) * uy + (y - cy) * ux;
                if along_wall.abs() > 0.5 * length {
                    0.0
                } else {
                    height * raised_cosine(along_ray - distance, *thickness)
                }
            })
        }
    }
}

/// `sigma_c` for the default ranging parameters, m.
pub fn default_sigma_c() -> f64 {
    clock_noise_sigma(&TwrParams::default(), SPEED_OF_LIGHT)
}
