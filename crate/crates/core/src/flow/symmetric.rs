//! Two-dimensional dynamics of the cyclic-symmetric student
//! `[x, y, ..., y]` (and its shifts) against an orthonormal teacher.
//!
//! With `alpha = (x^2 + (K-1) y^2)^(-1/2)`, `cos theta = alpha x`,
//! `cos phi* = alpha y` and `cos phi = alpha^2 (2xy + (K-2) y^2)`, the
//! descent direction scaled by `2 pi` is
//!
//! ```text
//! gx = -(pi - phi) S - theta - phi (x - 1) + C x
//! gy = -(pi - phi) S - (phi* - phi) - phi y + C y
//! S  = x - 1 + (K-1) y
//! C  = (K-1)(alpha sin phi* - sin phi) + alpha sin theta
//! ```

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::csv::CsvBuffer;
use crate::error::{Error, Result};
use crate::geometry::{angle_from_cos, WeightSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SymmetricState {
    pub x: f64,
    pub y: f64,
    pub k: usize,
    pub alpha: f64,
    pub theta: f64,
    pub phi: f64,
    pub phi_star: f64,
}

impl SymmetricState {
    pub fn new(x: f64, y: f64, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::domain(format!(
                "symmetric dynamics need K >= 2, got {k}"
            )));
        }
        if !(x.is_finite() && y.is_finite()) {
            return Err(Error::domain("state must be finite"));
        }
        if x == 0.0 && y == 0.0 {
            return Err(Error::domain("the origin has no defined gradient"));
        }
        let km1 = (k - 1) as f64;
        let alpha = 1.0 / (x * x + km1 * y * y).sqrt();
        let cos_phi = alpha * alpha * (2.0 * x * y + (k as f64 - 2.0) * y * y);
        Ok(SymmetricState {
            x,
            y,
            k,
            alpha,
            theta: angle_from_cos(alpha * x),
            phi: angle_from_cos(cos_phi),
            phi_star: angle_from_cos(alpha * y),
        })
    }
}

/// Descent direction `(gx, gy)`, scaled by `2 pi` relative to the
/// per-sample flow.
pub fn symmetric_2d_grad(s: &SymmetricState) -> (f64, f64) {
    let SymmetricState {
        x,
        y,
        k,
        alpha,
        theta,
        phi,
        phi_star,
    } = *s;
    let km1 = (k - 1) as f64;
    let big_s = x - 1.0 + km1 * y;
    let c = km1 * (alpha * phi_star.sin() - phi.sin()) + alpha * theta.sin();
    let gx = -(PI - phi) * big_s - theta - phi * (x - 1.0) + c * x;
    // Written as a difference from gx so that x == y gives gx == gy exactly.
    let gy = gx - ((phi_star - theta) + (x - y) * (c - phi));
    (gx, gy)
}

/// Student rows are cyclic shifts of `[x, y, ..., y]`; the teacher is the
/// standard basis of `R^K`.
pub fn embed_symmetric(x: f64, y: f64, k: usize) -> Result<(WeightSet, WeightSet)> {
    SymmetricState::new(x, y, k)?;
    let rows: Vec<Vec<f64>> = (0..k)
        .map(|j| (0..k).map(|i| if i == j { x } else { y }).collect())
        .collect();
    Ok((WeightSet::from_rows(&rows)?, WeightSet::orthonormal(k, k)))
}

/// Diagonal fixed point `(pi - arccos(1/sqrt K) + sqrt(K-1)) / (pi K)`.
pub fn saddle_value(k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::domain(format!("saddle value needs K >= 2, got {k}")));
    }
    let kf = k as f64;
    Ok(((kf - 1.0).sqrt() - (1.0 / kf.sqrt()).acos() + PI) / (PI * kf))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BetaParam {
    pub beta: f64,
    pub eps: f64,
}

/// `beta = sqrt(K - (K-1)(alpha eps)^2)` with `eps = x - y`; needs
/// `x > y >= 0`.
pub fn beta_reparam(x: f64, y: f64, k: usize) -> Result<BetaParam> {
    if !(x > y && y >= 0.0) {
        return Err(Error::domain(format!("need x > y >= 0, got ({x}, {y})")));
    }
    let s = SymmetricState::new(x, y, k)?;
    let eps = x - y;
    let b2 = s.alpha * eps;
    let beta = (k as f64 - (k as f64 - 1.0) * b2 * b2).max(0.0).sqrt();
    Ok(BetaParam { beta, eps })
}

pub fn beta_inverse(p: BetaParam, k: usize) -> Result<(f64, f64)> {
    if k < 2 {
        return Err(Error::domain(format!("need K >= 2, got {k}")));
    }
    let kf = k as f64;
    if !(p.beta >= 1.0 - 1e-12 && p.beta <= kf.sqrt()) || !(p.eps > 0.0) {
        return Err(Error::domain(format!(
            "need beta in [1, sqrt K] and eps > 0, got ({}, {})",
            p.beta, p.eps
        )));
    }
    let b2 = ((kf - p.beta * p.beta) / (kf - 1.0)).max(0.0).sqrt();
    let alpha = b2 / p.eps;
    Ok((
        (p.beta + (kf - 1.0) * b2) / (kf * alpha),
        (p.beta - b2) / (kf * alpha),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymmetricTerminal {
    Optimum,
    Saddle,
    /// Converged to a fixed point that is neither `(1, 0)` nor the saddle.
    Stationary,
    MaxSteps,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricTrajectory {
    pub k: usize,
    pub times: Vec<f64>,
    pub points: Vec<(f64, f64)>,
    pub terminal: SymmetricTerminal,
    pub steps: usize,
    /// First step within `near` of `(1, 0)`.
    pub steps_to_optimum: Option<usize>,
}

impl SymmetricTrajectory {
    pub fn last(&self) -> (f64, f64) {
        *self
            .points
            .last()
            .expect("trajectory holds the start point")
    }

    /// Columns `t, x, y`.
    pub fn to_csv(&self) -> String {
        let mut out = CsvBuffer::with_header(&["t", "x", "y"]);
        for (t, (x, y)) in self.times.iter().zip(&self.points) {
            out.number_row(&[*t, *x, *y]);
        }
        out.into_string()
    }
}

fn rate(x: f64, y: f64, k: usize) -> Result<(f64, f64)> {
    let (gx, gy) = symmetric_2d_grad(&SymmetricState::new(x, y, k)?);
    Ok((gx / (2.0 * PI), gy / (2.0 * PI)))
}

/// Distance from a point that classifies an end point as the optimum or
/// the saddle.
pub const FIXED_POINT_RADIUS: f64 = 1e-3;

/// RK4 integration of the 2D dynamics at the per-sample time scale, so
/// times agree with the embedded `K`-node flow. Stops once the rate norm
/// drops below `tol`.
pub fn symmetric_flow(
    x0: f64,
    y0: f64,
    k: usize,
    step: f64,
    max_steps: usize,
    tol: f64,
) -> Result<SymmetricTrajectory> {
    if !(step > 0.0) || !(tol > 0.0) {
        return Err(Error::domain("step and tol must be positive"));
    }
    let saddle = saddle_value(k)?;
    let (mut x, mut y) = (x0, y0);
    let mut g = rate(x, y, k)?;
    let near = |x: f64, y: f64, px: f64, py: f64| (x - px).hypot(y - py) < FIXED_POINT_RADIUS;
    let mut tr = SymmetricTrajectory {
        k,
        times: vec![0.0],
        points: vec![(x, y)],
        terminal: SymmetricTerminal::MaxSteps,
        steps: 0,
        steps_to_optimum: near(x, y, 1.0, 0.0).then_some(0),
    };
    let mut step_count = 0;
    while g.0.hypot(g.1) >= tol && step_count < max_steps {
        let k1 = g;
        let k2 = rate(x + 0.5 * step * k1.0, y + 0.5 * step * k1.1, k)?;
        let k3 = rate(x + 0.5 * step * k2.0, y + 0.5 * step * k2.1, k)?;
        let k4 = rate(x + step * k3.0, y + step * k3.1, k)?;
        x += step / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        y += step / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        step_count += 1;
        g = rate(x, y, k)?;
        tr.times.push(step_count as f64 * step);
        tr.points.push((x, y));
        if tr.steps_to_optimum.is_none() && near(x, y, 1.0, 0.0) {
            tr.steps_to_optimum = Some(step_count);
        }
    }
    tr.steps = step_count;
    if g.0.hypot(g.1) < tol {
        tr.terminal = if near(x, y, 1.0, 0.0) {
            SymmetricTerminal::Optimum
        } else if near(x, y, saddle, saddle) {
            SymmetricTerminal::Saddle
        } else {
            SymmetricTerminal::Stationary
        };
    }
    Ok(tr)
}
