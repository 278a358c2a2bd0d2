use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use super::config::*;
use super::{Check, Comparison, Outcome};
use crate::critical::{scan_conjecture_2d_with, ScanCell};
use crate::csv::{number, CsvBuffer};
use crate::empirical::{empirical_grad, error_vs_angle_profile, formula_trials, FormulaTrial};
use crate::error::{Error, Result};
use crate::flow::{
    basin_experiment, flow, saddle_value, symmetric_2d_grad, symmetric_flow, FlowParams,
    SymmetricState, SymmetricTerminal, Terminal, TerminalCounts,
};
use crate::geometry::{DenseVector, WeightSet, NORM_FLOOR};
use crate::multilayer::{
    finite_difference_gradient, gradient_inflow, relative_gradient_error, LayeredNet,
};
use crate::sampling::{
    gaussian_batch, gaussian_vector, random_direction, uniform_in_ball, InputDistribution, RngSeed,
};

pub(crate) fn dispatch(params: &ExperimentParams, seed: RngSeed) -> Result<Outcome> {
    match params {
        ExperimentParams::VerifyFormula(p) => verify_formula(p, seed),
        ExperimentParams::ErrorVsAngle(p) => error_vs_angle(p, seed),
        ExperimentParams::UniformCheck(p) => uniform_check(p, seed),
        ExperimentParams::ScanL12(p) => scan_l12(p),
        ExperimentParams::FlowSingle(p) => flow_single(p, seed),
        ExperimentParams::Basin(p) => basin(p, seed),
        ExperimentParams::SymmetricField(p) => symmetric_field(p),
        ExperimentParams::SymmetricTrajectories(p) => symmetric_trajectories(p),
        ExperimentParams::NoisyInit(p) => noisy_init(p, seed),
        ExperimentParams::FixedTopWeights(p) => fixed_top_weights(p, seed),
        ExperimentParams::MultilayerCheck(p) => multilayer_check(p, seed),
    }
}

fn int(v: usize) -> String {
    v.to_string()
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn terminal_name(t: Terminal) -> &'static str {
    match t {
        Terminal::ConvergedToTarget => "converged_to_target",
        Terminal::ConvergedToPoint => "converged_to_point",
        Terminal::MaxSteps => "max_steps",
        Terminal::Diverged => "diverged",
    }
}

fn draw_thetas(seed: RngSeed, pairs: usize, theta_max: f64) -> Vec<f64> {
    let mut rng = seed.rng();
    (0..pairs)
        .map(|_| rng.random_range(0.0..=theta_max))
        .collect()
}

#[derive(Serialize)]
struct SizeStats {
    n: usize,
    mean_error: f64,
    max_error: f64,
    mean_scale: f64,
}

fn size_stats(trials: &[FormulaTrial], sizes: &[usize]) -> Vec<SizeStats> {
    sizes
        .iter()
        .map(|&n| {
            let at: Vec<&FormulaTrial> = trials.iter().filter(|t| t.n == n).collect();
            let errs: Vec<f64> = at.iter().map(|t| t.rel_error).collect();
            let scales: Vec<f64> = at.iter().map(|t| t.scale).collect();
            SizeStats {
                n,
                mean_error: mean(&errs),
                max_error: errs.iter().copied().fold(0.0, f64::max),
                mean_scale: mean(&scales),
            }
        })
        .collect()
}

fn trials_csv(trials: &[FormulaTrial]) -> String {
    let mut out =
        CsvBuffer::with_header(&["pair", "theta", "n", "rel_error", "scale", "scaled_error"]);
    for t in trials {
        out.text_row(&[
            int(t.pair),
            number(t.theta),
            int(t.n),
            number(t.rel_error),
            number(t.scale),
            number(t.scaled_error),
        ]);
    }
    out.into_string()
}

/// Largest ratio of consecutive mean errors; below 1 when the mean error
/// strictly decreases with the sample size.
fn decrease_ratio(stats: &[SizeStats]) -> f64 {
    stats
        .windows(2)
        .map(|w| w[1].mean_error / w[0].mean_error)
        .fold(0.0, f64::max)
}

fn verify_formula(p: &FormulaParams, seed: RngSeed) -> Result<Outcome> {
    let thetas = draw_thetas(seed.derive(0), p.pairs, p.theta_max);
    let trials = formula_trials(
        InputDistribution::Gaussian,
        p.d,
        &p.sample_sizes,
        &thetas,
        seed.derive(1),
    )?;
    let stats = size_stats(&trials, &p.sample_sizes);
    let last = stats.last().expect("validated non-empty");
    let mut checks = vec![Check::new(
        "max_error_at_largest_n",
        last.max_error,
        Comparison::Less,
        p.max_error,
    )];
    if stats.len() > 1 {
        checks.push(Check::new(
            "mean_error_decrease_ratio",
            decrease_ratio(&stats),
            Comparison::Less,
            1.0,
        ));
    }
    Ok(Outcome {
        summary: json!({ "by_sample_size": stats }),
        checks,
        csv: trials_csv(&trials),
    })
}

fn uniform_check(p: &UniformParams, seed: RngSeed) -> Result<Outcome> {
    let dist = InputDistribution::UniformCentered;
    let thetas = draw_thetas(seed.derive(0), p.pairs, p.theta_max);
    let trials = formula_trials(dist, p.d, &p.sample_sizes, &thetas, seed.derive(1))?;
    let stats = size_stats(&trials, &p.sample_sizes);
    let last = stats.last().expect("validated non-empty");
    let mut checks = vec![Check::new(
        "scale_deviation_at_largest_n",
        (last.mean_scale - 1.0).abs(),
        Comparison::AtMost,
        p.scale_tol,
    )];
    if stats.len() > 1 {
        checks.push(Check::new(
            "mean_error_decrease_ratio",
            decrease_ratio(&stats),
            Comparison::Less,
            1.0,
        ));
    }
    Ok(Outcome {
        summary: json!({
            "input_variance": dist.variance(),
            "unscaled_fit_at_largest_n": last.mean_scale * dist.variance(),
            "by_sample_size": stats,
        }),
        checks,
        csv: trials_csv(&trials),
    })
}

fn error_vs_angle(p: &ErrorVsAngleParams, seed: RngSeed) -> Result<Outcome> {
    let bins = error_vs_angle_profile(p.d, p.n, p.bins, p.pairs_per_bin, seed)?;
    let mut out = CsvBuffer::with_header(&[
        "theta_lo",
        "theta_hi",
        "mean_err",
        "max_err",
        "pairs",
        "undefined",
    ]);
    for b in &bins {
        out.text_row(&[
            number(b.theta_lo),
            number(b.theta_hi),
            number(b.mean_err),
            number(b.max_err),
            int(b.pairs),
            int(b.undefined),
        ]);
    }
    let defined: Vec<f64> = bins
        .iter()
        .map(|b| b.mean_err)
        .filter(|e| e.is_finite())
        .collect();
    let growth = match (defined.first(), defined.last()) {
        (Some(a), Some(b)) => b / a,
        _ => f64::NAN,
    };
    Ok(Outcome {
        summary: json!({
            "bins": bins,
            "undefined_pairs": bins.iter().map(|b| b.undefined).sum::<usize>(),
        }),
        checks: vec![Check::new(
            "last_to_first_bin_error_ratio",
            growth,
            Comparison::Greater,
            1.0,
        )],
        csv: out.into_string(),
    })
}

fn cone_name(c: &ScanCell) -> String {
    serde_json::to_value(c.cone)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn scan_l12(p: &ScanParams) -> Result<Outcome> {
    let mut out = CsvBuffer::with_header(&["theta12", "phi", "l12", "l21", "cone"]);
    let mut row = 0;
    let report = scan_conjecture_2d_with(p.grid_phi, p.grid_theta12, |cells| {
        if row % p.csv_stride == 0 {
            for c in cells.iter().step_by(p.csv_stride) {
                out.text_row(&[
                    number(c.theta12),
                    number(c.phi),
                    number(c.l12),
                    number(c.l21),
                    cone_name(c),
                ]);
            }
        }
        row += 1;
    })?;
    Ok(Outcome {
        checks: vec![Check::new(
            "counterexamples",
            report.counterexamples as f64,
            Comparison::AtMost,
            0.0,
        )],
        summary: serde_json::to_value(&report).expect("scan reports serialize"),
        csv: out.into_string(),
    })
}

fn flow_single(p: &FlowSingleParams, seed: RngSeed) -> Result<Outcome> {
    let runs: Vec<_> = (0..p.runs)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed.derive(r as u64).rng();
            let wstar = gaussian_vector(&mut rng, p.d);
            let w0 = loop {
                let w = wstar.add_scaled(1.0, &uniform_in_ball(&mut rng, p.d, wstar.norm()));
                if w.norm() >= NORM_FLOOR {
                    break w;
                }
            };
            let teacher = WeightSet::new(vec![wstar])?;
            flow(
                &WeightSet::new(vec![w0])?,
                &teacher,
                &[1.0],
                &[1.0],
                &p.flow,
            )
        })
        .collect::<Result<_>>()?;
    let mut header = vec!["run".to_string(), "t".to_string()];
    header.extend((0..p.d).map(|i| format!("w_{i}")));
    header.extend(["grad_norm".to_string(), "V".to_string()]);
    let mut out = CsvBuffer::with_header(&header);
    let mut counts = TerminalCounts::default();
    let mut monotone = 0;
    for (r, tr) in runs.iter().enumerate() {
        counts.add(tr.terminal);
        let v = tr.lyapunov.as_ref().expect("single-node runs record V");
        if v.windows(2).all(|w| w[1] <= w[0]) {
            monotone += 1;
        }
        for (i, state) in tr.states.iter().enumerate() {
            let mut cells = vec![int(r), number(tr.times[i])];
            cells.extend(state.vector(0).as_slice().iter().map(|&x| number(x)));
            cells.push(number(tr.grad_norms[i]));
            cells.push(number(v[i]));
            out.text_row(&cells);
        }
    }
    let runs_f = p.runs as f64;
    Ok(Outcome {
        summary: json!({
            "terminal_counts": counts,
            "lyapunov_nonincreasing_runs": monotone,
            "mean_steps": mean(&runs.iter().map(|t| t.steps as f64).collect::<Vec<_>>()),
        }),
        checks: vec![
            Check::new(
                "converged_runs",
                counts.converged_to_target as f64,
                Comparison::AtLeast,
                runs_f,
            ),
            Check::new(
                "lyapunov_nonincreasing_runs",
                monotone as f64,
                Comparison::AtLeast,
                runs_f,
            ),
        ],
        csv: out.into_string(),
    })
}

fn basin(p: &BasinParams, seed: RngSeed) -> Result<Outcome> {
    let wstar = random_direction(&mut seed.derive(0).rng(), p.d)
        .as_vector()
        .clone();
    let report = basin_experiment(p.d, p.epsilon, &wstar, p.trials, seed.derive(1), &p.flow)?;
    let mut out =
        CsvBuffer::with_header(&["trial", "init_norm", "init_angle", "terminal", "steps"]);
    for r in &report.records {
        out.text_row(&[
            int(r.trial),
            number(r.init_norm),
            number(r.init_angle),
            terminal_name(r.terminal).to_string(),
            int(r.steps),
        ]);
    }
    Ok(Outcome {
        checks: vec![Check::new(
            "success_fraction",
            report.fraction,
            Comparison::AtLeast,
            report.lower_bound - report.allowance,
        )],
        summary: serde_json::to_value(&report).expect("basin reports serialize"),
        csv: out.into_string(),
    })
}

/// `(x, y, gx, gy, kind)` rows of the 2D symmetric field on a `grid x grid`
/// lattice over `bounds`, skipping the origin, followed by one row at the
/// optimum `(1, 0)` and one at the saddle `(s, s)`.
pub fn emit_vector_field(k: usize, grid: usize, bounds: FieldBounds) -> Result<String> {
    if grid < 8 {
        return Err(Error::domain(format!(
            "vector field grid must be at least 8, got {grid}"
        )));
    }
    let s = saddle_value(k)?;
    let mut out = CsvBuffer::with_header(&["x", "y", "gx", "gy", "kind"]);
    let mut push = |x: f64, y: f64, kind: &str| -> Result<()> {
        let (gx, gy) = symmetric_2d_grad(&SymmetricState::new(x, y, k)?);
        out.text_row(&[
            number(x),
            number(y),
            number(gx),
            number(gy),
            kind.to_string(),
        ]);
        Ok(())
    };
    let at = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (grid - 1) as f64;
    for i in 0..grid {
        for j in 0..grid {
            let (x, y) = (
                at(bounds.x_min, bounds.x_max, i),
                at(bounds.y_min, bounds.y_max, j),
            );
            if x == 0.0 && y == 0.0 {
                continue;
            }
            push(x, y, "grid")?;
        }
    }
    push(1.0, 0.0, "optimum")?;
    push(s, s, "saddle")?;
    Ok(out.into_string())
}

fn symmetric_field(p: &SymmetricFieldParams) -> Result<Outcome> {
    let csv = emit_vector_field(p.k, p.grid, p.bounds)?;
    let s = saddle_value(p.k)?;
    let norm_at = |x: f64, y: f64| -> Result<f64> {
        let (gx, gy) = symmetric_2d_grad(&SymmetricState::new(x, y, p.k)?);
        Ok(gx.hypot(gy))
    };
    let opt = norm_at(1.0, 0.0)?;
    let sad = norm_at(s, s)?;
    Ok(Outcome {
        summary: json!({ "saddle_value": s, "optimum_grad_norm": opt, "saddle_grad_norm": sad }),
        checks: vec![
            Check::new("optimum_grad_norm", opt, Comparison::AtMost, 1e-8),
            Check::new("saddle_grad_norm", sad, Comparison::AtMost, 1e-8),
        ],
        csv,
    })
}

fn symmetric_trajectories(p: &SymmetricTrajectoriesParams) -> Result<Outcome> {
    let trajs =
        p.ks.par_iter()
            .map(|&k| symmetric_flow(p.x0, p.y0, k, p.step, p.max_steps, p.tol))
            .collect::<Result<Vec<_>>>()?;
    let mut out = CsvBuffer::with_header(&["k", "t", "x", "y"]);
    let mut per_k = Vec::new();
    for tr in &trajs {
        let last = tr.points.len() - 1;
        for (i, (t, (x, y))) in tr.times.iter().zip(&tr.points).enumerate() {
            if i % p.record_every == 0 || i == last {
                out.text_row(&[int(tr.k), number(*t), number(*x), number(*y)]);
            }
        }
        let (x, y) = tr.last();
        per_k.push(json!({
            "k": tr.k,
            "terminal": tr.terminal,
            "steps": tr.steps,
            "steps_to_optimum": tr.steps_to_optimum,
            "final_x": x,
            "final_y": y,
            "max_y": tr.points.iter().map(|q| q.1).fold(f64::NEG_INFINITY, f64::max),
        }));
    }
    let optimum = trajs
        .iter()
        .filter(|t| t.terminal == SymmetricTerminal::Optimum)
        .count();
    let mut by_k: Vec<(usize, Option<usize>)> =
        trajs.iter().map(|t| (t.k, t.steps_to_optimum)).collect();
    by_k.sort_by_key(|e| e.0);
    let missing = by_k.iter().filter(|e| e.1.is_none()).count();
    let unordered = by_k
        .windows(2)
        .filter(|w| !matches!((w[0].1, w[1].1), (Some(a), Some(b)) if b < a))
        .count();
    let violations = missing + unordered;
    Ok(Outcome {
        summary: json!({ "trajectories": per_k }),
        checks: vec![
            Check::new(
                "optimum_runs",
                optimum as f64,
                Comparison::AtLeast,
                trajs.len() as f64,
            ),
            Check::new(
                "steps_ordering_violations",
                violations as f64,
                Comparison::AtMost,
                0.0,
            ),
        ],
        csv: out.into_string(),
    })
}

fn noisy_start(
    rng: &mut impl Rng,
    teacher: &WeightSet,
    scale: f64,
    noise: f64,
) -> Result<WeightSet> {
    let sigma = scale * noise;
    let vectors = teacher
        .vectors()
        .iter()
        .map(|w| {
            let xi: Vec<f64> = (0..w.dim())
                .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Ok(w.scale(scale).add_scaled(1.0, &DenseVector::new(xi)?))
        })
        .collect::<Result<_>>()?;
    WeightSet::new(vectors)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FixedTopRun {
    pub run: usize,
    pub terminal: Terminal,
    pub steps: usize,
    pub target_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatternResult {
    pub a: Vec<f64>,
    pub all_positive: bool,
    pub converged: usize,
    pub runs: usize,
    /// Over converged runs only.
    pub mean_steps: f64,
    pub terminal_counts: TerminalCounts,
    pub records: Vec<FixedTopRun>,
}

fn run_batch(
    teacher: &WeightSet,
    a: &[f64],
    runs: usize,
    noise: f64,
    init_scale: f64,
    params: &FlowParams,
    seed: RngSeed,
) -> Result<PatternResult> {
    let records: Vec<FixedTopRun> = (0..runs)
        .into_par_iter()
        .map(|r| {
            let w0 = noisy_start(&mut seed.derive(r as u64).rng(), teacher, init_scale, noise)?;
            let tr = flow(&w0, teacher, a, a, params)?;
            Ok(FixedTopRun {
                run: r,
                terminal: tr.terminal,
                steps: tr.steps,
                target_distance: tr.target_distance,
            })
        })
        .collect::<Result<_>>()?;
    let mut counts = TerminalCounts::default();
    records.iter().for_each(|r| counts.add(r.terminal));
    let steps: Vec<f64> = records
        .iter()
        .filter(|r| r.terminal == Terminal::ConvergedToTarget)
        .map(|r| r.steps as f64)
        .collect();
    Ok(PatternResult {
        a: a.to_vec(),
        all_positive: a.iter().all(|&v| v > 0.0),
        converged: counts.converged_to_target,
        runs,
        mean_steps: mean(&steps),
        terminal_counts: counts,
        records,
    })
}

/// Weighted flows with `a = a*` fixed for each pattern in `a_values`, an
/// orthonormal `K x d` teacher and `W0 = init_scale * W* + noise`. Run `r`
/// uses the same initial point under every pattern.
#[allow(clippy::too_many_arguments)]
pub fn fixed_top_weights_experiment(
    k: usize,
    d: usize,
    a_values: &[Vec<f64>],
    runs: usize,
    noise: f64,
    init_scale: f64,
    params: &FlowParams,
    seed: RngSeed,
) -> Result<Vec<PatternResult>> {
    if a_values.is_empty() {
        return Err(Error::domain("need at least one top-weight pattern"));
    }
    if d < k {
        return Err(Error::domain(format!(
            "orthonormal teacher needs d >= K, got d={d}, K={k}"
        )));
    }
    let teacher = WeightSet::orthonormal(k, d);
    a_values
        .iter()
        .map(|a| {
            Error::check_dim(k, a.len())?;
            run_batch(&teacher, a, runs, noise, init_scale, params, seed)
        })
        .collect()
}

fn runs_csv(out: &mut CsvBuffer, label: String, records: &[FixedTopRun]) {
    for r in records {
        out.text_row(&[
            label.clone(),
            int(r.run),
            terminal_name(r.terminal).to_string(),
            int(r.steps),
            number(r.target_distance),
        ]);
    }
}

fn noisy_init(p: &NoisyInitParams, seed: RngSeed) -> Result<Outcome> {
    let teacher = WeightSet::orthonormal(p.k, p.d);
    let ones = vec![1.0; p.k];
    let results = p
        .noise_levels
        .iter()
        .enumerate()
        .map(|(i, &noise)| {
            run_batch(
                &teacher,
                &ones,
                p.runs,
                noise,
                p.init_scale,
                &p.flow,
                seed.derive(i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = CsvBuffer::with_header(&["noise", "run", "terminal", "steps", "target_distance"]);
    let mut summary = Vec::new();
    for (noise, res) in p.noise_levels.iter().zip(&results) {
        runs_csv(&mut out, number(*noise), &res.records);
        summary.push(json!({
            "noise": noise,
            "converged": res.converged,
            "runs": res.runs,
            "mean_steps": res.mean_steps,
            "terminal_counts": res.terminal_counts,
        }));
    }
    let worst = results
        .iter()
        .map(|r| r.converged as f64 / r.runs as f64)
        .fold(f64::INFINITY, f64::min);
    Ok(Outcome {
        summary: json!({ "by_noise": summary }),
        checks: vec![Check::new(
            "min_converged_fraction",
            worst,
            Comparison::AtLeast,
            p.min_converged_fraction,
        )],
        csv: out.into_string(),
    })
}

fn pattern_label(a: &[f64]) -> String {
    a.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

fn fixed_top_weights(p: &FixedTopWeightsParams, seed: RngSeed) -> Result<Outcome> {
    let results = fixed_top_weights_experiment(
        p.k,
        p.d,
        &p.a_values,
        p.runs,
        p.noise,
        p.init_scale,
        &p.flow,
        seed,
    )?;
    let mut out = CsvBuffer::with_header(&["a", "run", "terminal", "steps", "target_distance"]);
    for res in &results {
        runs_csv(&mut out, pattern_label(&res.a), &res.records);
    }
    let frac = |r: &PatternResult| r.converged as f64 / r.runs as f64;
    let mut checks = Vec::new();
    let positive: Vec<&PatternResult> = results.iter().filter(|r| r.all_positive).collect();
    let mixed: Vec<&PatternResult> = results.iter().filter(|r| !r.all_positive).collect();
    if !positive.is_empty() {
        let worst = positive
            .iter()
            .map(|r| frac(r))
            .fold(f64::INFINITY, f64::min);
        checks.push(Check::new(
            "positive_min_converged_fraction",
            worst,
            Comparison::AtLeast,
            1.0,
        ));
    }
    if !mixed.is_empty() {
        let best = mixed.iter().map(|r| frac(r)).fold(0.0, f64::max);
        checks.push(Check::new(
            "mixed_max_converged_fraction",
            best,
            Comparison::AtMost,
            0.0,
        ));
    }
    // Constant positive patterns, ordered by their common value.
    let mut constant: Vec<(f64, f64)> = positive
        .iter()
        .filter(|r| r.a.windows(2).all(|w| w[0] == w[1]))
        .map(|r| (r.a[0], r.mean_steps))
        .collect();
    constant.sort_by(|x, y| x.0.total_cmp(&y.0));
    if constant.len() > 1 {
        let violations = constant.windows(2).filter(|w| !(w[1].1 < w[0].1)).count();
        checks.push(Check::new(
            "larger_a_slower_violations",
            violations as f64,
            Comparison::AtMost,
            0.0,
        ));
    }
    Ok(Outcome {
        summary: json!({
            "patterns": results
                .iter()
                .map(|r| json!({
                    "a": r.a,
                    "all_positive": r.all_positive,
                    "converged": r.converged,
                    "runs": r.runs,
                    "mean_steps": r.mean_steps,
                    "terminal_counts": r.terminal_counts,
                }))
                .collect::<Vec<_>>(),
        }),
        checks,
        csv: out.into_string(),
    })
}

fn columns(m: &nalgebra::DMatrix<f64>) -> Result<WeightSet> {
    WeightSet::new(
        (0..m.ncols())
            .map(|j| DenseVector::new(m.column(j).iter().copied().collect()))
            .collect::<Result<_>>()?,
    )
}

fn multilayer_check(p: &MultilayerParams, seed: RngSeed) -> Result<Outcome> {
    let errors: Vec<(Vec<usize>, f64)> = (0..p.nets)
        .into_par_iter()
        .map(|i| {
            let s = seed.derive(i as u64);
            let mut rng = s.derive(0).rng();
            let widths: Vec<usize> = (0..p.depth)
                .map(|_| rng.random_range(1..=p.max_width))
                .collect();
            let student = LayeredNet::gaussian(&mut rng, p.d, &widths)?;
            let teacher = LayeredNet::gaussian(&mut rng, p.d, &widths)?;
            let x = gaussian_batch(p.n, p.d, s.derive(1))?;
            let an = gradient_inflow(&student, &teacher, &x)?;
            let fd = finite_difference_gradient(&student, &teacher, &x, p.h)?;
            Ok((widths, relative_gradient_error(&an, &fd)))
        })
        .collect::<Result<_>>()?;
    let mut mismatches = 0;
    for i in 0..p.depth1_nets {
        let s = seed.derive((p.nets + i) as u64);
        let mut rng = s.derive(0).rng();
        let width = rng.random_range(1..=p.max_width);
        let student = LayeredNet::gaussian(&mut rng, p.d, &[width])?;
        let teacher = LayeredNet::gaussian(&mut rng, p.d, &[width])?;
        let x = gaussian_batch(p.n, p.d, s.derive(1))?;
        let deep = gradient_inflow(&student, &teacher, &x)?;
        let ones = vec![1.0; width];
        let two = empirical_grad(
            &x,
            &columns(student.layer(0))?,
            &columns(teacher.layer(0))?,
            &ones,
            &ones,
        )?;
        let same = (0..width).all(|j| {
            deep[0]
                .column(j)
                .iter()
                .copied()
                .collect::<Vec<_>>()
                .as_slice()
                == two[j].as_slice()
        });
        if !same {
            mismatches += 1;
        }
    }
    let mut out = CsvBuffer::with_header(&["net", "widths", "rel_error"]);
    for (i, (w, e)) in errors.iter().enumerate() {
        let label = w
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(";");
        out.text_row(&[int(i), label, number(*e)]);
    }
    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let mut checks = vec![Check::new(
        "max_rel_error",
        worst,
        Comparison::Less,
        p.max_rel_error,
    )];
    if p.depth1_nets > 0 {
        checks.push(Check::new(
            "depth1_mismatches",
            mismatches as f64,
            Comparison::AtMost,
            0.0,
        ));
    }
    Ok(Outcome {
        summary: json!({
            "max_rel_error": worst,
            "mean_rel_error": mean(&errors.iter().map(|e| e.1).collect::<Vec<_>>()),
            "depth1_nets": p.depth1_nets,
            "depth1_mismatches": mismatches,
        }),
        checks,
        csv: out.into_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{execute, ExperimentConfig, ExperimentKind};
    use serde_json::Value;

    fn quick(
        kind: ExperimentKind,
        overrides: &[(&str, Value)],
    ) -> crate::experiments::ExperimentReport {
        let o: Vec<(String, Value)> = overrides
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect();
        execute(&ExperimentConfig::build(kind, None, &o).unwrap()).unwrap()
    }

    #[test]
    fn vector_field_rows() {
        let b = FieldBounds {
            x_min: 0.0,
            x_max: 1.0,
            y_min: 0.0,
            y_max: 1.0,
        };
        let csv = emit_vector_field(3, 8, b).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "x,y,gx,gy,kind");
        assert_eq!(lines.len(), 1 + 63 + 2);
        assert!(!lines[1].starts_with("0.0000000000000000e0,0.0000000000000000e0"));
        assert!(lines[lines.len() - 2].ends_with("optimum"));
        assert_eq!(csv, emit_vector_field(3, 8, b).unwrap());
        assert!(emit_vector_field(3, 7, b).is_err());
    }

    #[test]
    fn small_runs_pass() {
        let cases: Vec<(ExperimentKind, Vec<(&str, Value)>)> = vec![
            (
                ExperimentKind::VerifyFormula,
                vec![
                    ("d", json!(10)),
                    ("sample_sizes", json!([500, 50000])),
                    ("pairs", json!(5)),
                    ("max_error", json!(0.2)),
                ],
            ),
            (
                ExperimentKind::UniformCheck,
                vec![
                    ("d", json!(10)),
                    ("sample_sizes", json!([500, 50000])),
                    ("pairs", json!(5)),
                    ("scale_tol", json!(0.1)),
                ],
            ),
            (
                ExperimentKind::ErrorVsAngle,
                vec![
                    ("d", json!(10)),
                    ("n", json!(2000)),
                    ("bins", json!(6)),
                    ("pairs_per_bin", json!(4)),
                ],
            ),
            (
                ExperimentKind::ScanL12,
                vec![("grid_theta12", json!(40)), ("grid_phi", json!(40))],
            ),
            (
                ExperimentKind::FlowSingle,
                vec![("d", json!(4)), ("runs", json!(6))],
            ),
            (
                ExperimentKind::Basin,
                vec![("d", json!(4)), ("trials", json!(100))],
            ),
            (ExperimentKind::SymmetricField, vec![("grid", json!(9))]),
            (
                ExperimentKind::SymmetricTrajectories,
                vec![("ks", json!([2, 5]))],
            ),
            (
                ExperimentKind::NoisyInit,
                vec![
                    ("k", json!(3)),
                    ("d", json!(3)),
                    ("runs", json!(2)),
                    ("noise_levels", json!([0.0, 0.5])),
                ],
            ),
            (
                ExperimentKind::MultilayerCheck,
                vec![("nets", json!(3)), ("depth1_nets", json!(2))],
            ),
        ];
        for (kind, o) in cases {
            let r = quick(kind, &o);
            assert!(r.passed, "{kind}: {:?}", r.checks);
            assert!(r.csv.lines().count() > 1, "{kind}");
        }
    }

    #[test]
    fn fixed_top_weights_reports_each_pattern() {
        let r = fixed_top_weights_experiment(
            2,
            2,
            &[vec![1.0, 1.0], vec![2.0, 2.0]],
            2,
            0.5,
            1e-3,
            &FlowParams::default(),
            RngSeed::new(4),
        )
        .unwrap();
        assert_eq!(r.len(), 2);
        assert!(r.iter().all(|p| p.converged == 2));
        assert!(r[1].mean_steps < r[0].mean_steps);
        assert!(fixed_top_weights_experiment(
            2,
            2,
            &[],
            2,
            0.5,
            1e-3,
            &FlowParams::default(),
            RngSeed::new(4)
        )
        .is_err());
    }
}
