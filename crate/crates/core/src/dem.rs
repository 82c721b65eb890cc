//! Elevation raster and terrain profiles between a service point and a user.
//!
//! Grids use the ESRI ASCII layout: the origin is the lower-left corner of
//! the lower-left cell, rows are stored north first, and every value sits at
//! its cell center. Heights between centers are bilinearly interpolated, so
//! the queryable hull is the rectangle spanned by the outermost cell centers.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::point::Point3;

/// Tolerance used when deciding whether a query sits on the hull boundary.
const HULL_EPS: f64 = 1e-9;

const DEFAULT_NODATA: f64 = -9999.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DemGrid {
    origin_x: f64,
    origin_y: f64,
    cell_size: f64,
    n_rows: usize,
    n_cols: usize,
    elevation: Vec<f64>,
    nodata_value: f64,
}

/// Axis-aligned rectangle in planar meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl DemGrid {
    /// Builds a grid from row-major values, northern row first.
    pub fn new(
        origin_x: f64,
        origin_y: f64,
        cell_size: f64,
        n_rows: usize,
        n_cols: usize,
        elevation: Vec<f64>,
        nodata_value: f64,
    ) -> Result<Self> {
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "cell size must be positive, got {cell_size}"
            )));
        }
        if n_rows == 0 || n_cols == 0 {
            return Err(Error::InvalidArgument("grid must have at least one cell".into()));
        }
        if elevation.len() != n_rows * n_cols {
            return Err(Error::InvalidArgument(format!(
                "expected {} values for a {n_rows}x{n_cols} grid, got {}",
                n_rows * n_cols,
                elevation.len()
            )));
        }
        Ok(Self {
            origin_x,
            origin_y,
            cell_size,
            n_rows,
            n_cols,
            elevation,
            nodata_value,
        })
    }

    /// Samples `f(x, y)` at every cell center.
    pub fn from_fn(
        origin_x: f64,
        origin_y: f64,
        cell_size: f64,
        n_rows: usize,
        n_cols: usize,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(n_rows * n_cols);
        for row in 0..n_rows {
            let y = origin_y + (n_rows - row) as f64 * cell_size - 0.5 * cell_size;
            for col in 0..n_cols {
                let x = origin_x + (col as f64 + 0.5) * cell_size;
                values.push(f(x, y));
            }
        }
        Self::new(origin_x, origin_y, cell_size, n_rows, n_cols, values, DEFAULT_NODATA)
    }

    pub fn origin_x(&self) -> f64 {
        self.origin_x
    }

    pub fn origin_y(&self) -> f64 {
        self.origin_y
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nodata_value(&self) -> f64 {
        self.nodata_value
    }

    pub fn values(&self) -> &[f64] {
        &self.elevation
    }

    /// Raw cell value, `row` counted from the north edge.
    pub fn cell(&self, row: usize, col: usize) -> f64 {
        self.elevation[row * self.n_cols + col]
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin_x + (col as f64 + 0.5) * self.cell_size,
            self.origin_y + (self.n_rows - row) as f64 * self.cell_size - 0.5 * self.cell_size,
        )
    }

    fn is_nodata(&self, v: f64) -> bool {
        v.is_nan() || v == self.nodata_value
    }

    /// Rectangle spanned by the outermost cell centers.
    pub fn hull(&self) -> Extent {
        let half = 0.5 * self.cell_size;
        Extent {
            min_x: self.origin_x + half,
            min_y: self.origin_y + half,
            max_x: self.origin_x + self.n_cols as f64 * self.cell_size - half,
            max_y: self.origin_y + self.n_rows as f64 * self.cell_size - half,
        }
    }

    /// Bilinear interpolation of the four cell centers around `(x, y)`.
    pub fn elevation_at(&self, x: f64, y: f64) -> Result<f64> {
        let fc = (x - self.origin_x) / self.cell_size - 0.5;
        // fractional row counted from the south edge
        let fr = (y - self.origin_y) / self.cell_size - 0.5;
        let max_c = (self.n_cols - 1) as f64;
        let max_r = (self.n_rows - 1) as f64;
        if !(fc >= -HULL_EPS && fc <= max_c + HULL_EPS && fr >= -HULL_EPS && fr <= max_r + HULL_EPS)
        {
            return Err(Error::OutOfHull { x, y });
        }
        let fc = fc.clamp(0.0, max_c);
        let fr = fr.clamp(0.0, max_r);
        let c0 = (fc.floor() as usize).min(self.n_cols.saturating_sub(2));
        let s0 = (fr.floor() as usize).min(self.n_rows.saturating_sub(2));
        let c1 = (c0 + 1).min(self.n_cols - 1);
        let s1 = (s0 + 1).min(self.n_rows - 1);
        let tx = if c1 == c0 { 0.0 } else { fc - c0 as f64 };
        let ty = if s1 == s0 { 0.0 } else { fr - s0 as f64 };

        let north_row = |s: usize| self.n_rows - 1 - s;
        let corners = [
            (north_row(s0), c0, (1.0 - tx) * (1.0 - ty)),
            (north_row(s0), c1, tx * (1.0 - ty)),
            (north_row(s1), c0, (1.0 - tx) * ty),
            (north_row(s1), c1, tx * ty),
        ];
        let mut z = 0.0;
        for (row, col, w) in corners {
            if w == 0.0 {
                continue;
            }
            let v = self.cell(row, col);
            if self.is_nodata(v) {
                return Err(Error::NoData { x, y });
            }
            z += w * v;
        }
        Ok(z)
    }

    /// Fails if `extent` leaves the hull or touches a nodata cell.
    pub fn check_extent(&self, extent: &Extent) -> Result<()> {
        let hull = self.hull();
        for (x, y) in [
            (extent.min_x, extent.min_y),
            (extent.max_x, extent.max_y),
        ] {
            if x < hull.min_x - HULL_EPS
                || x > hull.max_x + HULL_EPS
                || y < hull.min_y - HULL_EPS
                || y > hull.max_y + HULL_EPS
            {
                return Err(Error::OutOfHull { x, y });
            }
        }
        let cs = self.cell_size;
        for row in 0..self.n_rows {
            for col in 0..self.n_cols {
                let (x, y) = self.cell_center(row, col);
                let near = x >= extent.min_x - cs
                    && x <= extent.max_x + cs
                    && y >= extent.min_y - cs
                    && y <= extent.max_y + cs;
                if near && self.is_nodata(self.cell(row, col)) {
                    return Err(Error::NoData { x, y });
                }
            }
        }
        Ok(())
    }

    /// Parses an ESRI ASCII grid.
    pub fn parse_ascii(text: &str) -> Result<Self> {
        let mut ncols = None;
        let mut nrows = None;
        let mut xll = None;
        let mut yll = None;
        let mut centered = (false, false);
        let mut cellsize = None;
        let mut nodata = DEFAULT_NODATA;

        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).peekable();
        while let Some((idx, line)) = lines.peek().copied() {
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or_default().to_ascii_lowercase();
            if key.parse::<f64>().is_ok() {
                break;
            }
            let value = parts.next().ok_or_else(|| Error::DemParse {
                line: idx + 1,
                msg: format!("header key `{key}` has no value"),
            })?;
            let num = |v: &str| -> Result<f64> {
                v.parse::<f64>().map_err(|_| Error::DemParse {
                    line: idx + 1,
                    msg: format!("bad number `{v}` for `{key}`"),
                })
            };
            let count = |v: &str| -> Result<usize> {
                v.parse::<usize>().map_err(|_| Error::DemParse {
                    line: idx + 1,
                    msg: format!("bad count `{v}` for `{key}`"),
                })
            };
            match key.as_str() {
                "ncols" => ncols = Some(count(value)?),
                "nrows" => nrows = Some(count(value)?),
                "xllcorner" => xll = Some(num(value)?),
                "yllcorner" => yll = Some(num(value)?),
                "xllcenter" => {
                    xll = Some(num(value)?);
                    centered.0 = true;
                }
                "yllcenter" => {
                    yll = Some(num(value)?);
                    centered.1 = true;
                }
                "cellsize" => cellsize = Some(num(value)?),
                "nodata_value" => nodata = num(value)?,
                _ => {
                    return Err(Error::DemParse {
                        line: idx + 1,
                        msg: format!("unknown header key `{key}`"),
                    })
                }
            }
            lines.next();
        }

        let missing = |k: &str| Error::DemParse {
            line: 0,
            msg: format!("missing header key `{k}`"),
        };
        let ncols = ncols.ok_or_else(|| missing("ncols"))?;
        let nrows = nrows.ok_or_else(|| missing("nrows"))?;
        let cellsize = cellsize.ok_or_else(|| missing("cellsize"))?;
        let mut xll = xll.ok_or_else(|| missing("xllcorner"))?;
        let mut yll = yll.ok_or_else(|| missing("yllcorner"))?;
        if centered.0 {
            xll -= 0.5 * cellsize;
        }
        if centered.1 {
            yll -= 0.5 * cellsize;
        }

        let mut values = Vec::with_capacity(ncols * nrows);
        let mut rows_read = 0;
        for (idx, line) in lines {
            let before = values.len();
            for tok in line.split_whitespace() {
                values.push(tok.parse::<f64>().map_err(|_| Error::DemParse {
                    line: idx + 1,
                    msg: format!("bad elevation `{tok}`"),
                })?);
            }
            let n = values.len() - before;
            if n != ncols {
                return Err(Error::DemParse {
                    line: idx + 1,
                    msg: format!("row has {n} values, header says ncols = {ncols}"),
                });
            }
            rows_read += 1;
        }
        if rows_read != nrows {
            return Err(Error::DemParse {
                line: 0,
                msg: format!("found {rows_read} rows, header says nrows = {nrows}"),
            });
        }
        Self::new(xll, yll, cellsize, nrows, ncols, values, nodata).map_err(|e| Error::DemParse {
            line: 0,
            msg: e.to_string(),
        })
    }

    /// Serializes to ESRI ASCII; values use the shortest round-trip
    /// representation so `parse_ascii(write_ascii(g)) == g` bit for bit.
    pub fn write_ascii(&self) -> String {
        let mut out = String::with_capacity(self.elevation.len() * 8 + 128);
        let _ = writeln!(out, "ncols {}", self.n_cols);
        let _ = writeln!(out, "nrows {}", self.n_rows);
        let _ = writeln!(out, "xllcorner {}", self.origin_x);
        let _ = writeln!(out, "yllcorner {}", self.origin_y);
        let _ = writeln!(out, "cellsize {}", self.cell_size);
        let _ = writeln!(out, "NODATA_value {}", self.nodata_value);
        for row in self.elevation.chunks(self.n_cols) {
            let mut first = true;
            for v in row {
                if !first {
                    out.push(' ');
                }
                first = false;
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.write_ascii())?;
        Ok(())
    }
}

/// Reads a DEM file; with `extent`, nodata inside it is rejected.
pub fn load_dem(path: &Path, extent: Option<&Extent>) -> Result<DemGrid> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    let grid = DemGrid::parse_ascii(&text)?;
    if let Some(ext) = extent {
        grid.check_extent(ext)?;
    }
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfileSample {
    /// Horizontal distance from the user end, meters.
    pub offset: f64,
    pub ground: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerrainProfile {
    pub samples: Vec<ProfileSample>,
    pub sp: Point3,
    pub user: Point3,
}

/// Profile resolution used by the prediction pipeline.
pub fn default_profile_step(cell_size: f64) -> f64 {
    (cell_size / 2.0).min(5.0)
}

/// Samples the ground at a fixed horizontal step from the user towards the
/// service point, dropping everything closer than `exclusion_radius`.
pub fn profile_between(
    grid: &DemGrid,
    sp: Point3,
    user: Point3,
    step: f64,
    exclusion_radius: f64,
) -> Result<TerrainProfile> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("profile step must be positive, got {step}")));
    }
    let length = user.horizontal_distance(&sp);
    let n = (length / step * (1.0 + 1e-12)).floor() as usize;
    let mut samples = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let offset = k as f64 * step;
        if offset < exclusion_radius - HULL_EPS {
            continue;
        }
        let t = if length > 0.0 { offset / length } else { 0.0 };
        let x = user.x + (sp.x - user.x) * t;
        let y = user.y + (sp.y - user.y) * t;
        samples.push(ProfileSample {
            offset,
            ground: grid.elevation_at(x, y)?,
        });
    }
    Ok(TerrainProfile { samples, sp, user })
}

/// Smallest clearance between the straight user-SP sight line and the ground.
pub fn min_height_margin(profile: &TerrainProfile) -> Result<f64> {
    let length = profile.user.horizontal_distance(&profile.sp);
    let (zu, zs) = (profile.user.z, profile.sp.z);
    profile
        .samples
        .iter()
        .map(|s| {
            let line = if length > 0.0 {
                zu + (zs - zu) * (s.offset / length)
            } else {
                zu
            };
            line - s.ground
        })
        .min_by(f64::total_cmp)
        .ok_or(Error::EmptyProfile)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(n: usize, cs: f64, z: f64) -> DemGrid {
        DemGrid::from_fn(-(n as f64) * cs / 2.0, -(n as f64) * cs / 2.0, cs, n, n, |_, _| z).unwrap()
    }

    #[test]
    fn load_small_zero_grid() {
        let g = DemGrid::parse_ascii(
            "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n0 0\n0 0\n",
        )
        .unwrap();
        assert_eq!(g.values(), &[0.0; 4]);
        assert_eq!((g.n_rows(), g.n_cols()), (2, 2));
    }

    #[test]
    fn short_row_is_rejected() {
        let err = DemGrid::parse_ascii(
            "ncols 3\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2 3\n4 5\n",
        )
        .unwrap_err();
        assert!(matches!(err, Error::DemParse { line: 7, .. }), "{err}");
    }

    #[test]
    fn missing_header_and_row_count() {
        assert!(DemGrid::parse_ascii("ncols 1\nnrows 1\nxllcorner 0\n1\n").is_err());
        assert!(DemGrid::parse_ascii(
            "ncols 1\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n1\n"
        )
        .is_err());
    }

    #[test]
    fn center_queries_and_midpoints() {
        // row 0 is north: the southern row holds 0 and 10
        let g = DemGrid::new(0.0, 0.0, 10.0, 2, 2, vec![0.0, 10.0, 0.0, 10.0], -9999.0).unwrap();
        assert_eq!(g.elevation_at(5.0, 5.0).unwrap(), 0.0);
        assert_eq!(g.elevation_at(15.0, 15.0).unwrap(), 10.0);
        assert_eq!(g.elevation_at(10.0, 5.0).unwrap(), 5.0);
        assert!(matches!(g.elevation_at(0.0, 5.0), Err(Error::OutOfHull { .. })));
    }

    #[test]
    fn row_order_is_north_first() {
        let g = DemGrid::new(0.0, 0.0, 1.0, 2, 1, vec![7.0, 3.0], -9999.0).unwrap();
        assert_eq!(g.elevation_at(0.5, 1.5).unwrap(), 7.0);
        assert_eq!(g.elevation_at(0.5, 0.5).unwrap(), 3.0);
    }

    #[test]
    fn nodata_is_reported() {
        let g = DemGrid::new(0.0, 0.0, 1.0, 2, 2, vec![0.0, -9999.0, 0.0, 0.0], -9999.0).unwrap();
        assert!(matches!(g.elevation_at(1.0, 1.0), Err(Error::NoData { .. })));
        assert_eq!(g.elevation_at(0.5, 0.5).unwrap(), 0.0);
        let ext = Extent { min_x: 0.5, min_y: 0.5, max_x: 1.5, max_y: 1.5 };
        assert!(matches!(g.check_extent(&ext), Err(Error::NoData { .. })));
    }

    #[test]
    fn flat_profile_offsets() {
        let g = flat(200, 5.0, 0.0);
        let user = Point3::new(0.0, 0.0, 1.5);
        let sp = Point3::new(400.0, 0.0, 100.0);
        let p = profile_between(&g, sp, user, 5.0, 20.0).unwrap();
        let offsets: Vec<f64> = p.samples.iter().map(|s| s.offset).collect();
        let expected: Vec<f64> = (4..=80).map(|k| k as f64 * 5.0).collect();
        assert_eq!(offsets, expected);
        assert!(p.samples.iter().all(|s| s.ground == 0.0));

        let full = profile_between(&g, sp, user, 5.0, 0.0).unwrap();
        let kept: Vec<f64> =
            full.samples.iter().map(|s| s.offset).filter(|&o| o >= 20.0).collect();
        assert_eq!(kept, offsets);
    }

    #[test]
    fn flat_margin_closed_form() {
        let g = flat(200, 5.0, 0.0);
        let p = profile_between(
            &g,
            Point3::new(400.0, 0.0, 100.0),
            Point3::new(0.0, 0.0, 1.5),
            5.0,
            20.0,
        )
        .unwrap();
        let m = min_height_margin(&p).unwrap();
        assert!((m - 6.425).abs() < 1e-12, "{m}");
    }

    #[test]
    fn touching_obstacle_gives_zero_margin() {
        let user = Point3::new(0.0, 0.0, 1.5);
        let sp = Point3::new(400.0, 0.0, 100.0);
        let line_at_200 = 1.5 + 98.5 * 0.5;
        let p = TerrainProfile {
            samples: vec![
                ProfileSample { offset: 100.0, ground: 0.0 },
                ProfileSample { offset: 200.0, ground: line_at_200 },
            ],
            sp,
            user,
        };
        assert_eq!(min_height_margin(&p).unwrap(), 0.0);
    }

    #[test]
    fn empty_profile_errors() {
        let g = flat(20, 5.0, 0.0);
        let p = profile_between(
            &g,
            Point3::new(10.0, 0.0, 100.0),
            Point3::new(0.0, 0.0, 1.5),
            5.0,
            20.0,
        )
        .unwrap();
        assert!(matches!(min_height_margin(&p), Err(Error::EmptyProfile)));
    }

    #[test]
    fn segment_leaving_hull_errors() {
        let g = flat(20, 5.0, 0.0);
        let r = profile_between(
            &g,
            Point3::new(400.0, 0.0, 100.0),
            Point3::new(0.0, 0.0, 1.5),
            5.0,
            20.0,
        );
        assert!(matches!(r, Err(Error::OutOfHull { .. })));
    }

    #[test]
    fn default_step_rule() {
        assert_eq!(default_profile_step(30.0), 5.0);
        assert_eq!(default_profile_step(4.0), 2.0);
    }
}
