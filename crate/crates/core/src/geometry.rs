//! Normalized least-squares geometry over a subset of service points, the
//! iterated range solver and the residual test statistic.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::point::{Point2, Point3};

/// Ratio of the eigenvalues of `HᵀH` below which the geometry is rank deficient.
const CONDITION_FLOOR: f64 = 1e-12;

const MAX_ITERATIONS: usize = 50;
const STEP_TOLERANCE: f64 = 1e-6;
const GROWING_STEPS_LIMIT: usize = 5;

/// Degrees of freedom assigned to the residual statistic of `A` measurements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DofConvention {
    /// `A - 2`, the rank of the residual projector for two unknowns.
    #[default]
    ResidualRank,
    /// `A - 3`, counting one extra unknown.
    ExtraUnknown,
}

impl DofConvention {
    /// `None` when the statistic has no degrees of freedom left.
    pub fn dof(self, available: usize) -> Option<u32> {
        let lost = match self {
            DofConvention::ResidualRank => 2,
            DofConvention::ExtraUnknown => 3,
        };
        (available > lost).then(|| (available - lost) as u32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedGeometry {
    /// Indices of the contributing SPs, ascending.
    pub available: Vec<usize>,
    /// A x 2 Jacobian divided by `sigma_c`.
    pub h: DMatrix<f64>,
    /// 2 x A pseudo-inverse of `h`.
    pub g: DMatrix<f64>,
    pub s_x: DVector<f64>,
    pub s_y: DVector<f64>,
    /// A x A projector onto the residual space.
    pub p_r: DMatrix<f64>,
    pub sigma_c: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
}

impl NormalizedGeometry {
    pub fn len(&self) -> usize {
        self.available.len()
    }

    pub fn is_empty(&self) -> bool {
        self.available.is_empty()
    }

    pub fn dof(&self, convention: DofConvention) -> Option<u32> {
        convention.dof(self.len())
    }

    pub fn extraction(&self, axis: Axis) -> &DVector<f64> {
        match axis {
            Axis::X => &self.s_x,
            Axis::Y => &self.s_y,
        }
    }

    /// `‖P_r l‖²` for a measurement vector already divided by `sigma_c`.
    pub fn residual_statistic(&self, normalized: &DVector<f64>) -> f64 {
        (&self.p_r * normalized).norm_squared()
    }
}

/// Geometry of all `sps` linearized at `user`.
pub fn build_geometry(sps: &[Point3], user: Point3, sigma_c: f64) -> Result<NormalizedGeometry> {
    let available: Vec<usize> = (0..sps.len()).collect();
    geometry_for(sps, available, user, sigma_c)
}

/// Geometry of the SPs whose bits are set in `mask`.
pub fn build_geometry_masked(
    sps: &[Point3],
    mask: u32,
    user: Point3,
    sigma_c: f64,
) -> Result<NormalizedGeometry> {
    let available: Vec<usize> = (0..sps.len()).filter(|k| mask >> k & 1 == 1).collect();
    geometry_for(sps, available, user, sigma_c)
}

fn jacobian(sps: &[Point3], available: &[usize], user: Point3) -> Result<DMatrix<f64>> {
    let mut h = DMatrix::zeros(available.len(), 2);
    for (row, &k) in available.iter().enumerate() {
        let sp = sps[k];
        if sp.horizontal_distance(&user) < 1e-9 {
            return Err(Error::SingularGeometry(format!(
                "SP {k} sits directly above the linearization point"
            )));
        }
        let l = sp.distance(&user);
        h[(row, 0)] = (user.x - sp.x) / l;
        h[(row, 1)] = (user.y - sp.y) / l;
    }
    Ok(h)
}

/// `(AᵀA)⁻¹` for an A x 2 matrix, rejecting near rank-deficient cases.
fn normal_inverse(h: &DMatrix<f64>) -> Result<Matrix2<f64>> {
    let n: Matrix2<f64> = {
        let m = h.transpose() * h;
        Matrix2::new(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)])
    };
    let tr = n.trace();
    let det = n.determinant();
    let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
    let (big, small) = (0.5 * tr + disc, 0.5 * tr - disc);
    if !(big > 0.0) || small <= CONDITION_FLOOR * big {
        return Err(Error::SingularGeometry("Jacobian has rank below 2".into()));
    }
    n.try_inverse()
        .ok_or_else(|| Error::SingularGeometry("normal matrix is not invertible".into()))
}

fn geometry_for(
    sps: &[Point3],
    available: Vec<usize>,
    user: Point3,
    sigma_c: f64,
) -> Result<NormalizedGeometry> {
    if !(sigma_c > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma_c must be positive, got {sigma_c}")));
    }
    if available.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "least squares needs at least 3 ranges, got {}",
            available.len()
        )));
    }
    let h = jacobian(sps, &available, user)? / sigma_c;
    let inv = normal_inverse(&h)?;
    let inv = DMatrix::from_column_slice(2, 2, inv.as_slice());
    let g = inv * h.transpose();
    let a = available.len();
    let p_r = DMatrix::identity(a, a) - &h * &g;
    let s_x = g.row(0).transpose();
    let s_y = g.row(1).transpose();
    Ok(NormalizedGeometry { available, h, g, s_x, s_y, p_r, sigma_c })
}

/// `(var_x, var_y)` of the fault-free position error, m².
pub fn error_stats(geom: &NormalizedGeometry) -> (f64, f64) {
    (geom.s_x.norm_squared(), geom.s_y.norm_squared())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsSolution {
    pub estimate: Point2,
    pub iterations: usize,
    pub converged: bool,
    /// Measurement minus predicted range over `sigma_c`.
    pub residuals: Vec<f64>,
    pub t_ls: f64,
}

/// Gauss-Newton solution of the horizontal position from ranges to `sps`
/// with the user altitude known.
pub fn ls_solve(
    measurements: &[f64],
    sps: &[Point3],
    user_altitude: f64,
    sigma_c: f64,
    initial_guess: Point2,
) -> Result<LsSolution> {
    if measurements.len() != sps.len() {
        return Err(Error::InvalidArgument(format!(
            "{} measurements for {} SPs",
            measurements.len(),
            sps.len()
        )));
    }
    if sps.len() < 3 {
        return Err(Error::InvalidArgument("least squares needs at least 3 ranges".into()));
    }
    if !(sigma_c > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma_c must be positive, got {sigma_c}")));
    }
    let all: Vec<usize> = (0..sps.len()).collect();
    let mut u = Vector2::new(initial_guess.x, initial_guess.y);
    let mut last_step = f64::INFINITY;
    let mut growing = 0;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_ITERATIONS {
        let user = Point3::new(u.x, u.y, user_altitude);
        let h = jacobian(sps, &all, user)?;
        let inv = normal_inverse(&h)?;
        let mut rhs = Vector2::zeros();
        for (row, sp) in sps.iter().enumerate() {
            let r = measurements[row] - sp.distance(&user);
            rhs.x += h[(row, 0)] * r;
            rhs.y += h[(row, 1)] * r;
        }
        let step = inv * rhs;
        u += step;
        iterations += 1;
        let norm = step.norm();
        if !norm.is_finite() {
            return Err(Error::Divergence { iterations });
        }
        if norm < STEP_TOLERANCE {
            converged = true;
            break;
        }
        if norm > last_step {
            growing += 1;
            if growing >= GROWING_STEPS_LIMIT {
                return Err(Error::Divergence { iterations });
            }
        } else {
            growing = 0;
        }
        last_step = norm;
    }
    let user = Point3::new(u.x, u.y, user_altitude);
    let residuals: Vec<f64> = sps
        .iter()
        .zip(measurements)
        .map(|(sp, m)| (m - sp.distance(&user)) / sigma_c)
        .collect();
    let t_ls = residuals.iter().map(|r| r * r).sum();
    Ok(LsSolution { estimate: Point2::new(u.x, u.y), iterations, converged, residuals, t_ls })
}
