//! Gradient flow `dW/dt = -grad J(W)` on the analytic population gradient.

pub mod lyapunov;
pub mod symmetric;

use serde::{Deserialize, Serialize};

use crate::analytic::weighted_multi_relu_grad;
use crate::csv::CsvBuffer;
use crate::error::{Error, Result};
use crate::geometry::{DenseVector, WeightSet, NORM_FLOOR};

pub use lyapunov::{
    basin_experiment, lyapunov_form_matrix, lyapunov_value_and_rate, sampling_radius, BasinReport,
    BasinTrial, TerminalCounts,
};
pub use symmetric::{
    beta_inverse, beta_reparam, embed_symmetric, saddle_value, symmetric_2d_grad, symmetric_flow,
    BetaParam, SymmetricState, SymmetricTerminal, SymmetricTrajectory,
};

/// Any weight norm above this counts as divergence.
pub const DIVERGENCE_NORM: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    pub step: f64,
    pub max_steps: usize,
    /// Stop once `max_j |grad_j| < tol`.
    pub tol: f64,
    pub method: Integrator,
    /// Relative distance to a (permuted) teacher that counts as reaching it.
    pub target_tol: f64,
    /// Keep every `record_every`-th state (the last state is always kept).
    pub record_every: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            step: 0.1,
            max_steps: 100_000,
            tol: 1e-8,
            method: Integrator::Rk4,
            target_tol: 1e-3,
            record_every: 1,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::domain(format!(
                "step must be positive, got {}",
                self.step
            )));
        }
        if !(self.tol > 0.0) || !(self.target_tol > 0.0) {
            return Err(Error::domain("tolerances must be positive"));
        }
        if self.record_every == 0 {
            return Err(Error::domain("record_every must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    ConvergedToTarget,
    ConvergedToPoint,
    MaxSteps,
    Diverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<WeightSet>,
    pub grad_norms: Vec<f64>,
    /// `1/2 |w - w*|^2` per recorded state, single-node runs only.
    pub lyapunov: Option<Vec<f64>>,
    pub terminal: Terminal,
    pub steps: usize,
    /// `perm[j]` is the teacher index matched to student `j` when the run
    /// ends close to a permuted teacher.
    pub matched_permutation: Option<Vec<usize>>,
    /// Smallest over admissible permutations of the largest relative
    /// distance `|w_j - w*_perm(j)| / |w*_perm(j)|` at the final state.
    pub target_distance: f64,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectorySummary {
    pub terminal: Terminal,
    pub steps: usize,
    pub final_time: f64,
    pub final_grad_norm: f64,
    pub target_distance: f64,
    pub matched_permutation: Option<Vec<usize>>,
    pub note: Option<String>,
}

impl Trajectory {
    pub fn final_state(&self) -> &WeightSet {
        self.states
            .last()
            .expect("trajectory holds the initial state")
    }

    pub fn summary(&self) -> TrajectorySummary {
        TrajectorySummary {
            terminal: self.terminal,
            steps: self.steps,
            final_time: *self.times.last().unwrap_or(&0.0),
            final_grad_norm: *self.grad_norms.last().unwrap_or(&f64::NAN),
            target_distance: self.target_distance,
            matched_permutation: self.matched_permutation.clone(),
            note: self.note.clone(),
        }
    }

    /// Columns `t, w{j}_{i}..., grad_norm[, V]`.
    pub fn to_csv(&self) -> String {
        let first = &self.states[0];
        let mut header = vec!["t".to_string()];
        for j in 0..first.len() {
            for i in 0..first.dim() {
                header.push(format!("w{j}_{i}"));
            }
        }
        header.push("grad_norm".into());
        if self.lyapunov.is_some() {
            header.push("V".into());
        }
        let mut out = CsvBuffer::with_header(&header);
        for (idx, state) in self.states.iter().enumerate() {
            let mut row = vec![self.times[idx]];
            row.extend(state.flatten());
            row.push(self.grad_norms[idx]);
            if let Some(v) = &self.lyapunov {
                row.push(v[idx]);
            }
            out.number_row(&row);
        }
        out.into_string()
    }
}

/// Weighted gradient with a divergence check on the raw vectors.
fn grads_at(
    vectors: &[DenseVector],
    w_star: &WeightSet,
    a: &[f64],
    a_star: &[f64],
) -> std::result::Result<Vec<DenseVector>, String> {
    for (j, v) in vectors.iter().enumerate() {
        let n = v.norm();
        if !n.is_finite() || n > DIVERGENCE_NORM {
            return Err(format!("weight {j} norm {n:e} exceeds {DIVERGENCE_NORM:e}"));
        }
        if n < NORM_FLOOR {
            return Err(format!(
                "weight {j} reached the origin (norm {n:e}), where the gradient is discontinuous"
            ));
        }
    }
    let w = WeightSet::new(vectors.to_vec()).map_err(|e| e.to_string())?;
    weighted_multi_relu_grad(&w, w_star, a, a_star).map_err(|e| e.to_string())
}

fn max_norm(g: &[DenseVector]) -> f64 {
    g.iter().map(DenseVector::norm).fold(0.0, f64::max)
}

fn axpy(x: &[DenseVector], c: f64, dir: &[DenseVector]) -> Vec<DenseVector> {
    x.iter().zip(dir).map(|(a, b)| a.add_scaled(c, b)).collect()
}

/// Match the student to a permutation of the teacher, only allowing
/// permutations that keep top weights equal (`a[j] == a*[perm[j]]`).
/// Exhaustive for `K <= 8`, greedy beyond.
pub fn match_target(
    w: &WeightSet,
    w_star: &WeightSet,
    a: &[f64],
    a_star: &[f64],
) -> (f64, Option<Vec<usize>>) {
    let k = w.len();
    let cost = |j: usize, t: usize| {
        if a[j] != a_star[t] {
            f64::INFINITY
        } else {
            w.vector(j).distance(w_star.vector(t)) / w_star.norms()[t]
        }
    };
    if k <= 8 {
        let mut best = (f64::INFINITY, None);
        let mut perm: Vec<usize> = (0..k).collect();
        permute(&mut perm, 0, &mut |p| {
            let c = (0..k).map(|j| cost(j, p[j])).fold(0.0, f64::max);
            if c < best.0 {
                best = (c, Some(p.to_vec()));
            }
        });
        best
    } else {
        let mut used = vec![false; k];
        let mut perm = vec![0; k];
        let mut worst: f64 = 0.0;
        for j in 0..k {
            let (t, c) = (0..k)
                .filter(|&t| !used[t])
                .map(|t| (t, cost(j, t)))
                .min_by(|x, y| x.1.total_cmp(&y.1))
                .expect("one teacher left per student");
            used[t] = true;
            perm[j] = t;
            worst = worst.max(c);
        }
        if worst.is_finite() {
            (worst, Some(perm))
        } else {
            (worst, None)
        }
    }
}

fn permute(p: &mut [usize], i: usize, visit: &mut impl FnMut(&[usize])) {
    if i == p.len() {
        visit(p);
        return;
    }
    for s in i..p.len() {
        p.swap(i, s);
        permute(p, i + 1, visit);
        p.swap(i, s);
    }
}

/// Integrate the population-gradient flow with fixed top weights.
///
/// Each run is single-threaded and deterministic.
pub fn flow(
    w0: &WeightSet,
    w_star: &WeightSet,
    a: &[f64],
    a_star: &[f64],
    params: &FlowParams,
) -> Result<Trajectory> {
    params.validate()?;
    let k = w0.len();
    Error::check_dim(k, w_star.len())?;
    Error::check_dim(w0.dim(), w_star.dim())?;
    Error::check_dim(k, a.len())?;
    Error::check_dim(k, a_star.len())?;
    let single = k == 1;
    let v_of = |x: &[DenseVector]| 0.5 * x[0].distance(w_star.vector(0)).powi(2);

    let mut x: Vec<DenseVector> = w0.vectors().to_vec();
    let mut g = grads_at(&x, w_star, a, a_star).map_err(Error::Domain)?;
    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![w0.clone()],
        grad_norms: vec![max_norm(&g)],
        lyapunov: single.then(|| vec![v_of(&x)]),
        terminal: Terminal::MaxSteps,
        steps: 0,
        matched_permutation: None,
        target_distance: f64::NAN,
        note: None,
    };
    let h = params.step;
    let mut last_recorded = 0;
    let mut step = 0;
    let mut done = max_norm(&g) < params.tol;
    while !done && step < params.max_steps {
        let next = match params.method {
            Integrator::Euler => Ok(axpy(&x, -h, &g)),
            Integrator::Rk4 => rk4_step(&x, &g, h, w_star, a, a_star),
        };
        let next = match next {
            Ok(n) => n,
            Err(msg) => {
                traj.terminal = Terminal::Diverged;
                traj.note = Some(msg);
                break;
            }
        };
        step += 1;
        match grads_at(&next, w_star, a, a_star) {
            Ok(ng) => {
                x = next;
                g = ng;
            }
            Err(msg) => {
                traj.terminal = Terminal::Diverged;
                traj.note = Some(msg);
                break;
            }
        }
        done = max_norm(&g) < params.tol;
        if done || step % params.record_every == 0 {
            record(&mut traj, &x, &g, step as f64 * h, single.then(|| v_of(&x)));
            last_recorded = step;
        }
    }
    traj.steps = step;
    if last_recorded != step && traj.terminal != Terminal::Diverged {
        record(&mut traj, &x, &g, step as f64 * h, single.then(|| v_of(&x)));
    }
    let final_set = WeightSet::new(x.clone()).ok();
    if let Some(ws) = &final_set {
        let (dist, perm) = match_target(ws, w_star, a, a_star);
        traj.target_distance = dist;
        if done {
            if dist < params.target_tol {
                traj.terminal = Terminal::ConvergedToTarget;
                traj.matched_permutation = perm;
            } else {
                traj.terminal = Terminal::ConvergedToPoint;
            }
        }
    }
    Ok(traj)
}

fn record(traj: &mut Trajectory, x: &[DenseVector], g: &[DenseVector], t: f64, v: Option<f64>) {
    traj.times.push(t);
    traj.states
        .push(WeightSet::new(x.to_vec()).expect("state passed the norm checks"));
    traj.grad_norms.push(max_norm(g));
    if let (Some(vs), Some(v)) = (traj.lyapunov.as_mut(), v) {
        vs.push(v);
    }
}

fn rk4_step(
    x: &[DenseVector],
    k1: &[DenseVector],
    h: f64,
    w_star: &WeightSet,
    a: &[f64],
    a_star: &[f64],
) -> std::result::Result<Vec<DenseVector>, String> {
    let k2 = grads_at(&axpy(x, -0.5 * h, k1), w_star, a, a_star)?;
    let k3 = grads_at(&axpy(x, -0.5 * h, &k2), w_star, a, a_star)?;
    let k4 = grads_at(&axpy(x, -h, &k3), w_star, a, a_star)?;
    Ok((0..x.len())
        .map(|j| {
            let incr = k1[j]
                .add_scaled(2.0, &k2[j])
                .add_scaled(2.0, &k3[j])
                .add_scaled(1.0, &k4[j]);
            x[j].add_scaled(-h / 6.0, &incr)
        })
        .collect())
}
