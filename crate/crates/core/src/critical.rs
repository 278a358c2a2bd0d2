//! Critical-point machinery for the projected normal equations.
//!
//! Angle conventions: `Theta[k][j] = angle(w_j, w_k)` and
//! `Theta*[k][j] = angle(w_j, w*_k)`. Rows of the `K^2 x K` systems are
//! ordered lexicographically by `(j, j')`, so the diagonal constraint
//! `(j, j)` sits at row `j * K + j` (zero-based).
//!
//! Projecting the population gradient of `w_j` onto `e_j'` gives
//!
//! ```text
//! 2 pi * grad_j . e_j' = (M wbar)_(j,j') - (M* wbar*)_(j,j')
//! ```
//!
//! which is the identity the tests check against [`multi_relu_grad`].

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::analytic::multi_relu_grad;
use crate::error::{Error, Result};
use crate::geometry::{
    orthonormalize, rotation_fixing_subspace, unit_angle, AngleMatrix, DenseVector, UnitVector,
    WeightSet,
};

/// Condition number above which a reduced system is reported as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

/// Half-width of the band around cone boundaries that is excluded from sign
/// checks.
pub const BOUNDARY_BAND: f64 = 1e-9;

/// `h(theta) = (pi - theta) cos(theta) + sin(theta)` on `[0, pi]`.
pub fn h(theta: f64) -> Result<f64> {
    if !(0.0..=PI).contains(&theta) {
        return Err(Error::domain(format!(
            "h needs theta in [0, pi], got {theta}"
        )));
    }
    Ok(h_unchecked(theta))
}

fn h_unchecked(theta: f64) -> f64 {
    (PI - theta) * theta.cos() + theta.sin()
}

/// The `K^2 x K` systems `M`, `M*` and their diagonal-constraint rows.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalSystem {
    pub m: DMatrix<f64>,
    pub m_star: DMatrix<f64>,
    pub mr: DMatrix<f64>,
    pub mr_star: DMatrix<f64>,
    pub theta: AngleMatrix,
    pub theta_star: AngleMatrix,
}

impl NormalSystem {
    pub fn k(&self) -> usize {
        self.theta.size()
    }

    pub fn row_index(&self, j: usize, jp: usize) -> usize {
        j * self.k() + jp
    }
}

/// Entry `m_{jj',k}` given the student's self angles and the angles between
/// `w_j`, `w_j'` and the magnitude-carrying vector `k`.
fn m_entry(theta_kj: f64, theta_kjp: f64, theta_jjp: f64) -> f64 {
    (PI - theta_kj) * theta_kjp.cos() + theta_kj.sin() * theta_jjp.cos()
}

pub fn assemble_normal_system(w: &WeightSet, w_star: &WeightSet) -> Result<NormalSystem> {
    let k = w.len();
    Error::check_dim(k, w_star.len())?;
    Error::check_dim(w.dim(), w_star.dim())?;
    let theta = w.self_angles();
    let theta_star = w.cross_angles(w_star);
    Ok(system_from_angles(theta, theta_star))
}

/// Build the system from angle matrices alone.
pub fn system_from_angles(theta: AngleMatrix, theta_star: AngleMatrix) -> NormalSystem {
    let k = theta.size();
    let mut m = DMatrix::zeros(k * k, k);
    let mut m_star = DMatrix::zeros(k * k, k);
    for j in 0..k {
        for jp in 0..k {
            let row = j * k + jp;
            let theta_jjp = theta.get(jp, j);
            for kk in 0..k {
                m[(row, kk)] = m_entry(theta.get(kk, j), theta.get(kk, jp), theta_jjp);
                m_star[(row, kk)] =
                    m_entry(theta_star.get(kk, j), theta_star.get(kk, jp), theta_jjp);
            }
        }
    }
    let mr = DMatrix::from_fn(k, k, |j, kk| h_unchecked(theta.get(kk, j)));
    let mr_star = DMatrix::from_fn(k, k, |j, kk| h_unchecked(theta_star.get(kk, j)));
    NormalSystem {
        m,
        m_star,
        mr,
        mr_star,
        theta,
        theta_star,
    }
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum ReducedSolution {
    Solved {
        magnitudes: Vec<f64>,
        condition: f64,
        /// Indices whose solved magnitude is `<= 0`; a non-empty list rules
        /// out a critical point at these angles.
        non_positive: Vec<usize>,
    },
    Singular {
        condition: f64,
    },
}

impl ReducedSolution {
    pub fn magnitudes(&self) -> Option<&[f64]> {
        match self {
            ReducedSolution::Solved { magnitudes, .. } => Some(magnitudes),
            ReducedSolution::Singular { .. } => None,
        }
    }

    pub fn condition(&self) -> f64 {
        match self {
            ReducedSolution::Solved { condition, .. } | ReducedSolution::Singular { condition } => {
                *condition
            }
        }
    }
}

/// Solve `Mr wbar = Mr* wbar*` for the student magnitudes.
pub fn solve_reduced_magnitudes(sys: &NormalSystem, wbar_star: &[f64]) -> Result<ReducedSolution> {
    Error::check_dim(sys.k(), wbar_star.len())?;
    if wbar_star.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::domain("teacher magnitudes must be positive"));
    }
    let condition = condition_number(&sys.mr);
    if !(condition <= SINGULAR_CONDITION) {
        return Ok(ReducedSolution::Singular { condition });
    }
    let rhs = &sys.mr_star * DVector::from_column_slice(wbar_star);
    let Some(sol) = sys.mr.clone().lu().solve(&rhs) else {
        return Ok(ReducedSolution::Singular { condition });
    };
    let magnitudes: Vec<f64> = sol.iter().copied().collect();
    let non_positive = magnitudes
        .iter()
        .enumerate()
        .filter(|(_, &m)| m <= 0.0)
        .map(|(i, _)| i)
        .collect();
    Ok(ReducedSolution::Solved {
        magnitudes,
        condition,
        non_positive,
    })
}

/// `max_j |grad_j|`; zero exactly at critical points.
pub fn grad_norm_residual(w: &WeightSet, w_star: &WeightSet) -> Result<f64> {
    Ok(multi_relu_grad(w, w_star)?
        .iter()
        .map(DenseVector::norm)
        .fold(0.0, f64::max))
}

/// `L_{jj'}` from angles only: `theta_star[l] = angle(e*, e_l)` and the
/// student self-angle matrix.
pub fn l_from_angles(j: usize, jp: usize, theta_star: &[f64], theta: &AngleMatrix) -> Result<f64> {
    let k = theta.size();
    Error::check_dim(k, theta_star.len())?;
    if j >= k || jp >= k {
        return Err(Error::domain(format!(
            "index ({j}, {jp}) out of range for K = {k}"
        )));
    }
    let mr = DMatrix::from_fn(k, k, |a, b| h_unchecked(theta.get(b, a)));
    let condition = condition_number(&mr);
    if !(condition <= SINGULAR_CONDITION) {
        return Err(Error::Singular { condition });
    }
    let v = DVector::from_iterator(k, theta_star.iter().map(|&t| h_unchecked(t)));
    let theta_jjp = theta.get(jp, j);
    let m_col = DVector::from_fn(k, |kk, _| {
        m_entry(theta.get(kk, j), theta.get(kk, jp), theta_jjp)
    });
    let m_star = m_entry(theta_star[j], theta_star[jp], theta_jjp);
    // v^T Mr^{-1} m  ==  (Mr^{-T} v)^T m
    let y = mr
        .transpose()
        .lu()
        .solve(&v)
        .ok_or(Error::Singular { condition })?;
    Ok(m_star - y.dot(&m_col))
}

/// `L_{jj'}(e*, {e_l})`.
pub fn l_function(j: usize, jp: usize, e_star: &UnitVector, dirs: &[UnitVector]) -> Result<f64> {
    for e in dirs {
        Error::check_dim(e_star.dim(), e.dim())?;
    }
    let theta = AngleMatrix::from_fn(dirs.len(), |a, b| {
        if a == b {
            0.0
        } else {
            unit_angle(&dirs[b], &dirs[a])
        }
    });
    let theta_star: Vec<f64> = dirs.iter().map(|e| unit_angle(e_star, e)).collect();
    l_from_angles(j, jp, &theta_star, &theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConeLabel {
    Interior,
    Exterior,
    Boundary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConeClassification {
    pub label: ConeLabel,
    /// `min(c1, c2)` where `e* = c1 e1 + c2 e2`.
    pub margin: f64,
}

/// Classify `e*` against `Cone(e1, e2)`; all three must share a plane.
pub fn cone_membership_2d(
    e_star: &UnitVector,
    e1: &UnitVector,
    e2: &UnitVector,
) -> Result<ConeClassification> {
    Error::check_dim(e_star.dim(), e1.dim())?;
    Error::check_dim(e_star.dim(), e2.dim())?;
    let (a, b, c) = (e1.as_vector(), e2.as_vector(), e_star.as_vector());
    let g12 = a.dot(b);
    let det = 1.0 - g12 * g12;
    if det <= 1e-12 {
        return Err(Error::domain("cone generators are collinear"));
    }
    let (p1, p2) = (a.dot(c), b.dot(c));
    let c1 = (p1 - g12 * p2) / det;
    let c2 = (p2 - g12 * p1) / det;
    let residual = c.add_scaled(-c1, a).add_scaled(-c2, b).norm();
    if residual > BOUNDARY_BAND {
        return Err(Error::domain(format!(
            "e* is not in span(e1, e2) (residual {residual:e})"
        )));
    }
    Ok(classify(c1, c2))
}

fn classify(c1: f64, c2: f64) -> ConeClassification {
    let margin = c1.min(c2);
    let label = if margin.abs() <= BOUNDARY_BAND {
        ConeLabel::Boundary
    } else if margin > 0.0 {
        ConeLabel::Interior
    } else {
        ConeLabel::Exterior
    };
    ConeClassification { label, margin }
}

/// One evaluated cell of the `(theta12, phi)` grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScanCell {
    pub theta12: f64,
    pub phi: f64,
    pub l12: f64,
    pub l21: f64,
    pub cone: ConeLabel,
}

impl ScanCell {
    /// Sign disagreement with the cone classification; boundary cells never
    /// count.
    pub fn is_violation(&self) -> bool {
        match self.cone {
            ConeLabel::Interior => !(self.l12 > 0.0 && self.l21 > 0.0),
            ConeLabel::Exterior => !(self.l12 < 0.0 && self.l21 < 0.0),
            ConeLabel::Boundary => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanReport {
    pub grid_theta12: usize,
    pub grid_phi: usize,
    pub cells: usize,
    pub boundary_cells: usize,
    pub counterexamples: usize,
    /// Largest `max(|L12|, |L21|)` over boundary cells.
    pub max_boundary_abs_l: f64,
    /// Smallest `min(L12, L21)` in the interior and `min(-L12, -L21)` in the
    /// exterior; positive when every cell agrees with the cone.
    pub worst_margin: f64,
    /// First few violating cells, in grid order.
    pub examples: Vec<ScanCell>,
}

/// Grid point `i` of `grid` in the open interval `(0, pi)`.
pub fn scan_theta12(i: usize, grid: usize) -> f64 {
    PI * (i + 1) as f64 / (grid + 1) as f64
}

/// Grid point `i` of `grid` in `[0, 2 pi)`.
pub fn scan_phi(i: usize, grid: usize) -> f64 {
    2.0 * PI * i as f64 / grid as f64
}

/// Evaluate `L12`, `L21` and the cone label for `e1 = (1, 0)`,
/// `e2 = (cos theta12, sin theta12)`, `e* = (cos phi, sin phi)`.
pub fn scan_cell(theta12: f64, phi: f64) -> Result<ScanCell> {
    let e1 = UnitVector::planar(0.0);
    let e2 = UnitVector::planar(theta12);
    let e_star = UnitVector::planar(phi);
    let theta = AngleMatrix::from_fn(2, |a, b| if a == b { 0.0 } else { theta12 });
    let theta_star = [unit_angle(&e_star, &e1), unit_angle(&e_star, &e2)];
    let l12 = l_from_angles(0, 1, &theta_star, &theta)?;
    let l21 = l_from_angles(1, 0, &theta_star, &theta)?;
    // e* = c1 e1 + c2 e2 solved in closed form in the plane.
    let s = theta12.sin();
    let c2 = phi.sin() / s;
    let c1 = phi.cos() - c2 * theta12.cos();
    Ok(ScanCell {
        theta12,
        phi,
        l12,
        l21,
        cone: classify(c1, c2).label,
    })
}

/// Exhaustive check that `sign(L12)` and `sign(L21)` follow cone membership
/// on a `grid_theta12 x grid_phi` grid. Deterministic.
pub fn scan_conjecture_2d(grid_phi: usize, grid_theta12: usize) -> Result<ScanReport> {
    scan_conjecture_2d_with(grid_phi, grid_theta12, |_| {})
}

/// Like [`scan_conjecture_2d`], also handing every row of cells (one per
/// `theta12`, in order) to `sink`.
pub fn scan_conjecture_2d_with(
    grid_phi: usize,
    grid_theta12: usize,
    mut sink: impl FnMut(&[ScanCell]),
) -> Result<ScanReport> {
    if grid_phi < 10 || grid_theta12 < 10 {
        return Err(Error::domain(
            "scan grids must have at least 10 points per axis",
        ));
    }
    const MAX_EXAMPLES: usize = 16;
    let mut report = ScanReport {
        grid_theta12,
        grid_phi,
        cells: 0,
        boundary_cells: 0,
        counterexamples: 0,
        max_boundary_abs_l: 0.0,
        worst_margin: f64::INFINITY,
        examples: Vec::new(),
    };
    // Rows in parallel, folded in grid order so the report is reproducible.
    const CHUNK: usize = 64;
    for start in (0..grid_theta12).step_by(CHUNK) {
        let end = (start + CHUNK).min(grid_theta12);
        let rows: Vec<Vec<ScanCell>> = (start..end)
            .into_par_iter()
            .map(|i| {
                let t = scan_theta12(i, grid_theta12);
                (0..grid_phi)
                    .map(|p| scan_cell(t, scan_phi(p, grid_phi)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        for row in &rows {
            for cell in row {
                report.cells += 1;
                match cell.cone {
                    ConeLabel::Boundary => {
                        report.boundary_cells += 1;
                        report.max_boundary_abs_l = report
                            .max_boundary_abs_l
                            .max(cell.l12.abs())
                            .max(cell.l21.abs());
                    }
                    ConeLabel::Interior => {
                        report.worst_margin = report.worst_margin.min(cell.l12.min(cell.l21));
                    }
                    ConeLabel::Exterior => {
                        report.worst_margin = report.worst_margin.min((-cell.l12).min(-cell.l21));
                    }
                }
                if cell.is_violation() {
                    report.counterexamples += 1;
                    if report.examples.len() < MAX_EXAMPLES {
                        report.examples.push(*cell);
                    }
                }
            }
            sink(row);
        }
    }
    Ok(report)
}

/// Collinear critical point for `K = 2`: both student weights on the
/// bisector of the teacher pair, with total magnitude
/// `s = h(psi / 2) (|w*1| + |w*2|) / pi` split as `(split s, (1 - split) s)`.
///
/// The perpendicular part of the gradient only cancels when the two teacher
/// norms agree, so unequal norms are rejected.
pub fn collinear_saddle_k2(
    w1_star: &DenseVector,
    w2_star: &DenseVector,
    split: f64,
) -> Result<WeightSet> {
    if !(split > 0.0 && split < 1.0) {
        return Err(Error::domain(format!(
            "split must lie in (0, 1), got {split}"
        )));
    }
    orthonormalize(&[w1_star.clone(), w2_star.clone()])?;
    let (n1, n2) = (w1_star.norm(), w2_star.norm());
    if (n1 - n2).abs() > 1e-12 * n1.max(n2) {
        return Err(Error::domain(
            "collinear saddle needs equal teacher norms (bisector is not critical otherwise)",
        ));
    }
    let u1 = UnitVector::normalize(w1_star)?;
    let u2 = UnitVector::normalize(w2_star)?;
    let psi = unit_angle(&u1, &u2);
    let bisector = UnitVector::normalize(&(u1.as_vector() + u2.as_vector()))?;
    let total = h_unchecked(psi / 2.0) * (n1 + n2) / PI;
    WeightSet::new(vec![
        bisector.as_vector().scale(split * total),
        bisector.as_vector().scale((1.0 - split) * total),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OrbitCheck {
    pub residual_before: f64,
    pub residual_after: f64,
    /// `max_j |R w_j - w_j|`.
    pub displacement: f64,
}

/// Rotate the student by an orthogonal map that fixes the teacher span and
/// compare gradient residuals before and after.
pub fn orbit_invariance_check(
    w: &WeightSet,
    w_star: &WeightSet,
    plane_angle: f64,
) -> Result<OrbitCheck> {
    let r = rotation_fixing_subspace(w_star.vectors(), w.dim(), plane_angle)?;
    let rotated = w.transform(&r)?;
    let displacement = w
        .vectors()
        .iter()
        .zip(rotated.vectors())
        .map(|(a, b)| a.distance(b))
        .fold(0.0, f64::max);
    Ok(OrbitCheck {
        residual_before: grad_norm_residual(w, w_star)?,
        residual_after: grad_norm_residual(&rotated, w_star)?,
        displacement,
    })
}
