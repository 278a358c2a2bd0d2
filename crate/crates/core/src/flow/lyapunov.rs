//! Single-node Lyapunov certificate and the random-initialization basin
//! experiment.

use std::f64::consts::PI;

use nalgebra::Matrix2;
use rayon::prelude::*;
use serde::Serialize;

use super::{flow, FlowParams, Terminal};
use crate::analytic::single_relu_grad;
use crate::error::{Error, Result};
use crate::geometry::{angle, DenseVector, WeightSet, NORM_FLOOR};
use crate::sampling::{uniform_in_ball, RngSeed};

/// `V = 1/2 |w - w*|^2` and its rate `dV/dt = -(w - w*) . grad` along the
/// flow.
pub fn lyapunov_value_and_rate(w: &DenseVector, w_star: &DenseVector) -> Result<(f64, f64)> {
    let grad = single_relu_grad(w, w_star)?;
    let diff = w - w_star;
    Ok((0.5 * diff.dot(&diff), -diff.dot(&grad)))
}

/// Bilinear form with `dV/dt = -y^T M y / (2 pi)` for `y = (|w*|, |w|)`
/// under the per-sample gradient. Only defined on `[0, pi/2]`.
pub fn lyapunov_form_matrix(theta: f64) -> Result<Matrix2<f64>> {
    if !(0.0..=PI / 2.0).contains(&theta) {
        return Err(Error::domain(format!(
            "certificate matrix needs theta in [0, pi/2], got {theta}"
        )));
    }
    let off = -(2.0 * PI - theta) * theta.cos() - theta.sin();
    Ok(0.5
        * Matrix2::new(
            (2.0 * theta).sin() + 2.0 * PI - 2.0 * theta,
            off,
            off,
            2.0 * PI,
        ))
}

/// Radius of the initialization ball: `eps * sqrt(2 pi / (d + 1)) * |w*|`.
pub fn sampling_radius(d: usize, epsilon: f64, wstar_norm: f64) -> Result<f64> {
    if d == 0 {
        return Err(Error::domain("dimension must be at least 1"));
    }
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::domain(format!(
            "epsilon must lie in (0, 1], got {epsilon}"
        )));
    }
    if !(wstar_norm > 0.0) {
        return Err(Error::domain("teacher norm must be positive"));
    }
    Ok(epsilon * (2.0 * PI / (d as f64 + 1.0)).sqrt() * wstar_norm)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BasinReport {
    pub success_count: usize,
    pub trials: usize,
    pub fraction: f64,
    pub radius: f64,
    /// `(1 - eps) / 2`.
    pub lower_bound: f64,
    /// Three binomial standard deviations at `p = lower_bound`.
    pub allowance: f64,
    pub passed: bool,
    pub terminal_counts: TerminalCounts,
    #[serde(skip)]
    pub records: Vec<BasinTrial>,
}

/// One basin trial: the initial point and where the flow ended.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BasinTrial {
    pub trial: usize,
    pub init_norm: f64,
    /// Angle between `w0` and `w*`.
    pub init_angle: f64,
    pub terminal: Terminal,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TerminalCounts {
    pub converged_to_target: usize,
    pub converged_to_point: usize,
    pub max_steps: usize,
    pub diverged: usize,
}

impl TerminalCounts {
    pub fn add(&mut self, t: Terminal) {
        match t {
            Terminal::ConvergedToTarget => self.converged_to_target += 1,
            Terminal::ConvergedToPoint => self.converged_to_point += 1,
            Terminal::MaxSteps => self.max_steps += 1,
            Terminal::Diverged => self.diverged += 1,
        }
    }
}

/// Draw `w0` uniformly from the ball of radius [`sampling_radius`], run the
/// single-node flow and count runs that reach `w*`. Trial `i` uses the
/// stream `seed.derive(i)`, so the result does not depend on scheduling.
pub fn basin_experiment(
    d: usize,
    epsilon: f64,
    wstar: &DenseVector,
    trials: usize,
    seed: RngSeed,
    params: &FlowParams,
) -> Result<BasinReport> {
    Error::check_dim(d, wstar.dim())?;
    if trials < 100 {
        return Err(Error::domain(format!(
            "need at least 100 trials, got {trials}"
        )));
    }
    let radius = sampling_radius(d, epsilon, wstar.norm())?;
    let teacher = WeightSet::new(vec![wstar.clone()])?;
    let records: Vec<BasinTrial> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed.derive(i as u64).rng();
            let w0 = loop {
                let w = uniform_in_ball(&mut rng, d, radius);
                if w.norm() >= NORM_FLOOR {
                    break w;
                }
            };
            let init_norm = w0.norm();
            let init_angle = angle(&w0, wstar)?;
            let tr = flow(&WeightSet::new(vec![w0])?, &teacher, &[1.0], &[1.0], params)?;
            Ok(BasinTrial {
                trial: i,
                init_norm,
                init_angle,
                terminal: tr.terminal,
                steps: tr.steps,
            })
        })
        .collect::<Result<_>>()?;
    let mut counts = TerminalCounts::default();
    for r in &records {
        counts.add(r.terminal);
    }
    let success_count = counts.converged_to_target;
    let lower_bound = (1.0 - epsilon) / 2.0;
    let allowance = 3.0 * (lower_bound * (1.0 - lower_bound) / trials as f64).sqrt();
    let fraction = success_count as f64 / trials as f64;
    Ok(BasinReport {
        success_count,
        trials,
        fraction,
        radius,
        lower_bound,
        allowance,
        passed: fraction >= lower_bound - allowance,
        terminal_counts: counts,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{direction_at_angle, gaussian_vector, random_direction};

    #[test]
    fn at_optimum_value_and_rate_vanish() {
        let w = DenseVector::new(vec![0.3, 0.4, -1.2]).unwrap();
        assert_eq!(lyapunov_value_and_rate(&w, &w).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn form_matrix_at_zero_is_semidefinite() {
        let m = lyapunov_form_matrix(0.0).unwrap();
        let expected = PI * Matrix2::new(1.0, -1.0, -1.0, 1.0);
        assert!((m - expected).amax() < 1e-14);
        assert!((m * nalgebra::Vector2::new(1.0, 1.0)).amax() < 1e-14);
        assert!(lyapunov_form_matrix(PI / 2.0).unwrap().determinant() > 0.0);
        assert!(lyapunov_form_matrix(PI / 2.0 + 1e-9).is_err());
        assert!(lyapunov_form_matrix(-1e-9).is_err());
    }

    #[test]
    fn form_matrix_positive_definite_on_grid() {
        for i in 1..=1000 {
            let m = lyapunov_form_matrix(PI / 2.0 * i as f64 / 1000.0).unwrap();
            assert!(m[(0, 0)] > 0.0 && m[(1, 1)] > 0.0 && m.determinant() > 0.0);
        }
    }

    #[test]
    fn bilinear_form_matches_rate() {
        let mut rng = RngSeed::new(31).rng();
        for _ in 0..200 {
            let d = 5;
            let ws = gaussian_vector(&mut rng, d);
            let u = crate::geometry::UnitVector::normalize(&ws).unwrap();
            let theta: f64 = rand::Rng::random_range(&mut rng, 0.0..PI / 2.0);
            let e = direction_at_angle(&mut rng, &u, theta);
            let w = e
                .as_vector()
                .scale(rand::Rng::random_range(&mut rng, 0.1..3.0));
            let t = angle(&w, &ws).unwrap();
            let y = nalgebra::Vector2::new(ws.norm(), w.norm());
            let form = -(y.transpose() * lyapunov_form_matrix(t).unwrap() * y)[0] / (2.0 * PI);
            let (_, rate) = lyapunov_value_and_rate(&w, &ws).unwrap();
            assert!((form - rate).abs() < 1e-10, "{form} vs {rate}");
            assert!(rate < 0.0);
        }
    }

    #[test]
    fn boundary_sphere_orthogonal_point_descends() {
        let ws = DenseVector::new(vec![1.0, 0.0, 0.0]).unwrap();
        let w = DenseVector::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert!(lyapunov_value_and_rate(&w, &ws).unwrap().1 < 0.0);
    }

    #[test]
    fn radius_examples() {
        assert!((sampling_radius(1, 1.0, 1.0).unwrap() - PI.sqrt()).abs() < 1e-15);
        assert!((sampling_radius(99, 0.1, 1.0).unwrap() - 0.025_066_282_746_310_0).abs() < 1e-12);
        let r: Vec<f64> = (1..50)
            .map(|d| sampling_radius(d, 0.5, 2.0).unwrap())
            .collect();
        assert!(r.windows(2).all(|p| p[1] < p[0]));
        assert!(sampling_radius(0, 0.5, 1.0).is_err());
        assert!(sampling_radius(3, 0.0, 1.0).is_err());
    }

    #[test]
    fn basin_small_run_is_deterministic_and_passes() {
        let mut rng = RngSeed::new(32).rng();
        let ws = random_direction(&mut rng, 4).as_vector().clone();
        let params = FlowParams::default();
        let a = basin_experiment(4, 0.5, &ws, 100, RngSeed::new(7), &params).unwrap();
        let b = basin_experiment(4, 0.5, &ws, 100, RngSeed::new(7), &params).unwrap();
        assert_eq!(a, b);
        assert!(a.passed);
        assert!(basin_experiment(4, 0.5, &ws, 99, RngSeed::new(7), &params).is_err());
        let loose = basin_experiment(4, 1.0, &ws, 100, RngSeed::new(8), &params).unwrap();
        assert_eq!(loose.lower_bound, 0.0);
        assert!(loose.passed);
    }
}
