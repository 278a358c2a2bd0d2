//! Finite-sample estimators that serve as the sampling oracle for the
//! closed forms in [`crate::analytic`].
//!
//! All averages are per sample (`1/n`), matching the analytic module.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::Serialize;

use crate::analytic::pg_function;
use crate::error::{Error, Result};
use crate::geometry::{dot, DenseVector, UnitVector, WeightSet};
use crate::sampling::{
    direction_at_angle, for_each_row, gaussian_batch, random_direction, InputDistribution, RngSeed,
    SampleBatch,
};

/// `diag(X w > 0)` stored as one bit per sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatingMask(Vec<bool>);

impl GatingMask {
    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn count_on(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }
}

/// Gating mask with the strict convention `x.w > 0` (ties are off).
pub fn gating(x: &SampleBatch, w: &DenseVector) -> Result<GatingMask> {
    Error::check_dim(x.dim(), w.dim())?;
    Ok(GatingMask(
        x.rows().map(|r| dot(r, w.as_slice()) > 0.0).collect(),
    ))
}

/// `relu(X w)` for every sample.
pub fn relu_outputs(x: &SampleBatch, w: &DenseVector) -> Result<Vec<f64>> {
    Error::check_dim(x.dim(), w.dim())?;
    Ok(x.rows().map(|r| dot(r, w.as_slice()).max(0.0)).collect())
}

/// `(1/n) X^T D(e) D(w) X w`.
pub fn empirical_pg(x: &SampleBatch, e: &UnitVector, w: &DenseVector) -> Result<DenseVector> {
    Error::check_dim(x.dim(), e.dim())?;
    Error::check_dim(x.dim(), w.dim())?;
    let mut acc = vec![0.0; x.dim()];
    for r in x.rows() {
        let xw = dot(r, w.as_slice());
        if xw > 0.0 && dot(r, e.as_slice()) > 0.0 {
            for (a, xi) in acc.iter_mut().zip(r) {
                *a += xi * xw;
            }
        }
    }
    let n = x.n() as f64;
    Ok(DenseVector::from_vec_unchecked(
        acc.into_iter().map(|a| a / n).collect(),
    ))
}

/// [`empirical_pg`] on `batch(distribution, n, d, seed)`, drawing rows on
/// the fly; memory is `O(d)`. Bitwise equal to the materialized version.
pub fn empirical_pg_streamed(
    distribution: InputDistribution,
    n: usize,
    seed: RngSeed,
    e: &UnitVector,
    w: &DenseVector,
) -> Result<DenseVector> {
    Error::check_dim(e.dim(), w.dim())?;
    let mut acc = vec![0.0; w.dim()];
    for_each_row(distribution, n, w.dim(), seed, |r| {
        let xw = dot(r, w.as_slice());
        if xw > 0.0 && dot(r, e.as_slice()) > 0.0 {
            for (a, xi) in acc.iter_mut().zip(r) {
                *a += xi * xw;
            }
        }
    })?;
    let n = n as f64;
    Ok(DenseVector::from_vec_unchecked(
        acc.into_iter().map(|a| a / n).collect(),
    ))
}

/// One `(e, w)` pair checked against a sampled estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FormulaTrial {
    pub pair: usize,
    pub theta: f64,
    pub n: usize,
    /// `|s2 analytic - empirical| / |empirical|` with `s2` the input
    /// variance (1 for Gaussian inputs).
    pub rel_error: f64,
    /// Best global scale `c` on the (variance-scaled) analytic side and the
    /// error after it.
    pub scale: f64,
    pub scaled_error: f64,
}

/// Compare the closed form against sampled estimates for `thetas.len()`
/// random pairs at every sample size in `ns`.
///
/// Pair `i` draws its directions from `seed.derive(i)` (the same pair at
/// every `n`) and its inputs from `seed.derive(i).derive(n)`. Unit-norm `w`.
pub fn formula_trials(
    distribution: InputDistribution,
    d: usize,
    ns: &[usize],
    thetas: &[f64],
    seed: RngSeed,
) -> Result<Vec<FormulaTrial>> {
    if d < 2 {
        return Err(Error::domain("formula check needs d >= 2"));
    }
    let per_pair: Vec<Vec<FormulaTrial>> = thetas
        .par_iter()
        .enumerate()
        .map(|(i, &theta)| {
            let pair_seed = seed.derive(i as u64);
            let mut rng = pair_seed.rng();
            let w_hat = random_direction(&mut rng, d);
            let e = direction_at_angle(&mut rng, &w_hat, theta);
            let w = w_hat.as_vector().clone();
            let analytic = pg_function(&e, &w)?.vector.scale(distribution.variance());
            ns.iter()
                .map(|&n| {
                    let emp =
                        empirical_pg_streamed(distribution, n, pair_seed.derive(n as u64), &e, &w)?;
                    let (scale, scaled_error) = scaled_relative_error(&analytic, &emp)?;
                    Ok(FormulaTrial {
                        pair: i,
                        theta,
                        n,
                        rel_error: relative_rms_error(&analytic, &emp)?,
                        scale,
                        scaled_error,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_pair.into_iter().flatten().collect())
}

fn network_outputs(x: &SampleBatch, w: &WeightSet, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.n()];
    for (wj, aj) in w.vectors().iter().zip(a) {
        for (o, r) in out.iter_mut().zip(x.rows()) {
            *o += aj * dot(r, wj.as_slice()).max(0.0);
        }
    }
    out
}

fn check_grad_shapes(
    x: &SampleBatch,
    w: &WeightSet,
    w_star: &WeightSet,
    a: &[f64],
    a_star: &[f64],
) -> Result<()> {
    let k = w.len();
    Error::check_dim(k, w_star.len())?;
    Error::check_dim(x.dim(), w.dim())?;
    Error::check_dim(x.dim(), w_star.dim())?;
    Error::check_dim(k, a.len())?;
    Error::check_dim(k, a_star.len())
}

/// `(1/n) * 1/2 * |g(X; W*, a*) - g(X; W, a)|^2`.
pub fn empirical_loss(
    x: &SampleBatch,
    w: &WeightSet,
    w_star: &WeightSet,
    a: &[f64],
    a_star: &[f64],
) -> Result<f64> {
    check_grad_shapes(x, w, w_star, a, a_star)?;
    let g = network_outputs(x, w, a);
    let gs = network_outputs(x, w_star, a_star);
    let sq: f64 = g.iter().zip(&gs).map(|(p, q)| (p - q) * (p - q)).sum();
    Ok(0.5 * sq / x.n() as f64)
}

/// Finite-sample gradient of [`empirical_loss`] with respect to every
/// student weight: `a_j (1/n) X^T D(w_j) (g(X; W, a) - g(X; W*, a*))`.
///
/// Equals `a_j [sum_k a_k F(e_j, w_k) - sum_k a*_k F(e_j, w*_k)]` with `F`
/// from [`empirical_pg`].
pub fn empirical_grad(
    x: &SampleBatch,
    w: &WeightSet,
    w_star: &WeightSet,
    a: &[f64],
    a_star: &[f64],
) -> Result<Vec<DenseVector>> {
    check_grad_shapes(x, w, w_star, a, a_star)?;
    let g = network_outputs(x, w, a);
    let gs = network_outputs(x, w_star, a_star);
    let residual: Vec<f64> = g.iter().zip(&gs).map(|(p, q)| p - q).collect();
    let n = x.n() as f64;
    Ok(w.vectors()
        .iter()
        .zip(a)
        .map(|(wj, aj)| {
            let mut acc = vec![0.0; x.dim()];
            for (r, res) in x.rows().zip(&residual) {
                if dot(r, wj.as_slice()) > 0.0 {
                    for (ac, xi) in acc.iter_mut().zip(r) {
                        *ac += xi * res;
                    }
                }
            }
            DenseVector::from_vec_unchecked(acc.into_iter().map(|v| aj * v / n).collect())
        })
        .collect())
}

/// `|analytic - empirical| / |empirical|`.
pub fn relative_rms_error(analytic: &DenseVector, empirical: &DenseVector) -> Result<f64> {
    Error::check_dim(analytic.dim(), empirical.dim())?;
    let denom = empirical.norm();
    if denom == 0.0 {
        return Err(Error::domain(
            "relative error against a zero empirical vector",
        ));
    }
    Ok(analytic.distance(empirical) / denom)
}

/// Relative error after fitting the best global scale `c` to the analytic
/// prediction: returns `(c, |c * analytic - empirical| / |empirical|)`.
pub fn scaled_relative_error(
    analytic: &DenseVector,
    empirical: &DenseVector,
) -> Result<(f64, f64)> {
    Error::check_dim(analytic.dim(), empirical.dim())?;
    let aa = analytic.dot(analytic);
    if aa == 0.0 {
        return Err(Error::domain("cannot fit a scale to a zero prediction"));
    }
    let c = analytic.dot(empirical) / aa;
    Ok((c, relative_rms_error(&analytic.scale(c), empirical)?))
}

/// Error statistics for one angle bin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AngleBin {
    pub theta_lo: f64,
    pub theta_hi: f64,
    pub mean_err: f64,
    pub max_err: f64,
    /// Pairs evaluated.
    pub pairs: usize,
    /// Pairs whose empirical estimate was exactly zero (no overlapping
    /// activations), for which the relative error is undefined.
    pub undefined: usize,
}

/// Relative error of the closed form against a fresh Gaussian batch, binned
/// by `theta = angle(e, w)` over `[0, pi]`.
///
/// Each bin draws its own batch from `rng.derive(bin)`; within a bin the
/// angles are stratified and `e = cos(theta) w_hat + sin(theta) w_perp`.
pub fn error_vs_angle_profile(
    d: usize,
    n: usize,
    bins: usize,
    pairs_per_bin: usize,
    rng: RngSeed,
) -> Result<Vec<AngleBin>> {
    if bins < 2 {
        return Err(Error::domain("error profile needs at least 2 bins"));
    }
    if d < 2 {
        return Err(Error::domain("error profile needs d >= 2"));
    }
    if pairs_per_bin == 0 {
        return Err(Error::domain(
            "error profile needs at least one pair per bin",
        ));
    }
    let width = PI / bins as f64;
    (0..bins)
        .into_par_iter()
        .map(|b| {
            let seed = rng.derive(b as u64);
            let x = gaussian_batch(n, d, seed.derive(0))?;
            let mut pair_rng = seed.derive(1).rng();
            let lo = b as f64 * width;
            let mut errs = Vec::with_capacity(pairs_per_bin);
            let mut undefined = 0;
            for i in 0..pairs_per_bin {
                let theta = lo + (i as f64 + 0.5) / pairs_per_bin as f64 * width;
                let w_hat = random_direction(&mut pair_rng, d);
                let e = direction_at_angle(&mut pair_rng, &w_hat, theta);
                let w = w_hat.as_vector().clone();
                let analytic = pg_function(&e, &w)?.vector;
                let emp = empirical_pg(&x, &e, &w)?;
                match relative_rms_error(&analytic, &emp) {
                    Ok(err) => errs.push(err),
                    Err(_) => undefined += 1,
                }
            }
            let mean_err = if errs.is_empty() {
                f64::NAN
            } else {
                errs.iter().sum::<f64>() / errs.len() as f64
            };
            Ok(AngleBin {
                theta_lo: lo,
                theta_hi: lo + width,
                mean_err,
                max_err: errs.iter().copied().fold(0.0, f64::max),
                pairs: pairs_per_bin,
                undefined,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{multi_relu_grad, single_relu_grad};
    use crate::sampling::{gaussian_vector, InputDistribution};

    fn v(x: &[f64]) -> DenseVector {
        DenseVector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn gating_depends_on_direction_only() {
        let x = gaussian_batch(1000, 3, RngSeed::new(1)).unwrap();
        let w = v(&[0.3, -1.0, 0.2]);
        assert_eq!(gating(&x, &w).unwrap(), gating(&x, &w.scale(2.0)).unwrap());
    }

    #[test]
    fn gating_tie_is_off() {
        let x = SampleBatch::from_rows(&[vec![1.0, -1.0]], InputDistribution::Gaussian).unwrap();
        assert_eq!(gating(&x, &v(&[1.0, 1.0])).unwrap().bits(), &[false]);
    }

    #[test]
    fn gating_fraction_is_half() {
        let x = gaussian_batch(1_000_000, 4, RngSeed::new(2)).unwrap();
        let frac = gating(&x, &v(&[1.0, 2.0, -0.5, 0.1])).unwrap().count_on() as f64 / 1e6;
        assert!((frac - 0.5).abs() < 0.002, "{frac}");
    }

    #[test]
    fn gating_dimension_mismatch() {
        let x = gaussian_batch(10, 3, RngSeed::new(2)).unwrap();
        assert!(gating(&x, &v(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn relu_equals_mask_times_projection() {
        let x = gaussian_batch(500, 5, RngSeed::new(3)).unwrap();
        let w = v(&[0.5, -0.1, 1.0, 0.0, 2.0]);
        let mask = gating(&x, &w).unwrap();
        let proj = x.project(w.as_slice());
        let relu = relu_outputs(&x, &w).unwrap();
        for ((r, m), p) in relu.iter().zip(mask.bits()).zip(&proj) {
            assert_eq!(*r, if *m { *p } else { 0.0 });
        }
    }

    #[test]
    fn empirical_pg_aligned_matches_half_w() {
        let x = gaussian_batch(1_000_000, 4, RngSeed::new(4)).unwrap();
        let w = v(&[1.0, -0.5, 0.25, 2.0]);
        let e = UnitVector::normalize(&w).unwrap();
        let emp = empirical_pg(&x, &e, &w).unwrap();
        assert!(relative_rms_error(&w.scale(0.5), &emp).unwrap() < 0.01);
    }

    #[test]
    fn empirical_pg_orthogonal_matches_closed_form() {
        let x = gaussian_batch(1_000_000, 2, RngSeed::new(5)).unwrap();
        let w = v(&[1.0, 0.0]);
        let e = UnitVector::normalize(&v(&[0.0, 1.0])).unwrap();
        let expected = w
            .scale(PI / 2.0)
            .add_scaled(w.norm(), e.as_vector())
            .scale(1.0 / (2.0 * PI));
        let emp = empirical_pg(&x, &e, &w).unwrap();
        assert!(relative_rms_error(&expected, &emp).unwrap() < 0.015);
    }

    #[test]
    fn empirical_pg_no_overlap_is_zero() {
        let x = SampleBatch::from_rows(
            &[vec![1.0], vec![-2.0], vec![0.5]],
            InputDistribution::Gaussian,
        )
        .unwrap();
        let w = v(&[1.0]);
        let e = UnitVector::normalize(&v(&[-1.0])).unwrap();
        assert_eq!(empirical_pg(&x, &e, &w).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn empirical_pg_linear_in_norm() {
        let x = gaussian_batch(2000, 3, RngSeed::new(6)).unwrap();
        let w = v(&[0.2, 1.0, -0.4]);
        let e = UnitVector::normalize(&v(&[1.0, 0.5, 0.0])).unwrap();
        let base = empirical_pg(&x, &e, &w).unwrap();
        let scaled = empirical_pg(&x, &e, &w.scale(3.5)).unwrap();
        assert!(scaled.distance(&base.scale(3.5)) < 1e-12);
    }

    #[test]
    fn mc_matches_closed_form_pg_planar() {
        // n = 1e6 Gaussian oracle for d=2, w=(1,0), e=(0,1).
        let x = gaussian_batch(1_000_000, 2, RngSeed::new(7)).unwrap();
        let e = UnitVector::normalize(&v(&[0.0, 1.0])).unwrap();
        let w = v(&[1.0, 0.0]);
        let emp = empirical_pg(&x, &e, &w).unwrap();
        let analytic = pg_function(&e, &w).unwrap().vector;
        assert!(relative_rms_error(&analytic, &emp).unwrap() < 0.01);
    }

    #[test]
    fn empirical_grad_zero_at_teacher() {
        let x = gaussian_batch(1000, 3, RngSeed::new(8)).unwrap();
        let t = WeightSet::from_rows(&[vec![1.0, 0.0, 0.3], vec![0.0, -1.0, 1.0]]).unwrap();
        let a = [1.5, -0.5];
        for g in empirical_grad(&x, &t, &t, &a, &a).unwrap() {
            assert!(g.max_abs() < 1e-12);
        }
    }

    #[test]
    fn empirical_grad_assembles_from_pg_terms() {
        let x = gaussian_batch(3000, 4, RngSeed::new(9)).unwrap();
        let mut rng = RngSeed::new(10).rng();
        let w = WeightSet::new((0..3).map(|_| gaussian_vector(&mut rng, 4)).collect()).unwrap();
        let t = WeightSet::new((0..3).map(|_| gaussian_vector(&mut rng, 4)).collect()).unwrap();
        let a = [0.7, 1.3, -0.4];
        let a_star = [1.0, 0.5, 2.0];
        let grads = empirical_grad(&x, &w, &t, &a, &a_star).unwrap();
        for j in 0..3 {
            let e = w.direction(j);
            let mut acc = DenseVector::zeros(4);
            for k in 0..3 {
                acc = acc.add_scaled(a[k], &empirical_pg(&x, &e, w.vector(k)).unwrap());
                acc = acc.add_scaled(-a_star[k], &empirical_pg(&x, &e, t.vector(k)).unwrap());
            }
            assert!(grads[j].distance(&acc.scale(a[j])) < 1e-12);
        }
    }

    #[test]
    fn empirical_grad_k1_matches_single_relu_closed_form() {
        let x = gaussian_batch(1_000_000, 3, RngSeed::new(11)).unwrap();
        let w = v(&[0.8, 0.3, -0.5]);
        let ws = v(&[0.2, 1.0, 0.4]);
        let emp = empirical_grad(
            &x,
            &WeightSet::new(vec![w.clone()]).unwrap(),
            &WeightSet::new(vec![ws.clone()]).unwrap(),
            &[1.0],
            &[1.0],
        )
        .unwrap();
        let analytic = single_relu_grad(&w, &ws).unwrap();
        assert!(relative_rms_error(&analytic, &emp[0]).unwrap() < 0.01);
    }

    #[test]
    fn empirical_grad_matches_finite_differences() {
        let d = 6;
        let k = 3;
        let x = gaussian_batch(20_000, d, RngSeed::new(12)).unwrap();
        let mut rng = RngSeed::new(13).rng();
        let w = WeightSet::new((0..k).map(|_| gaussian_vector(&mut rng, d)).collect()).unwrap();
        let t = WeightSet::new((0..k).map(|_| gaussian_vector(&mut rng, d)).collect()).unwrap();
        let a = vec![1.0; k];
        let grads = empirical_grad(&x, &w, &t, &a, &a).unwrap();
        for j in 0..k {
            let h = 1e-5 * (1.0 + w.vector(j).norm());
            for i in 0..d {
                let bump = |s: f64| {
                    let mut rows: Vec<Vec<f64>> =
                        w.vectors().iter().map(|v| v.as_slice().to_vec()).collect();
                    rows[j][i] += s;
                    empirical_loss(&x, &WeightSet::from_rows(&rows).unwrap(), &t, &a, &a).unwrap()
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                assert!(
                    (fd - grads[j][i]).abs() < 1e-4,
                    "j={j} i={i}: {fd} vs {}",
                    grads[j][i]
                );
            }
        }
    }

    #[test]
    fn weighted_closed_form_matches_mc() {
        use crate::analytic::weighted_multi_relu_grad;
        let x = gaussian_batch(1_000_000, 4, RngSeed::new(14)).unwrap();
        let w =
            WeightSet::from_rows(&[vec![0.9, 0.2, -0.3, 0.1], vec![-0.1, 0.7, 0.4, 0.5]]).unwrap();
        let t = WeightSet::orthonormal(2, 4);
        let (a, a_star) = ([1.5, 0.5], [1.0, 2.0]);
        let emp = empirical_grad(&x, &w, &t, &a, &a_star).unwrap();
        let analytic = weighted_multi_relu_grad(&w, &t, &a, &a_star).unwrap();
        for (p, q) in analytic.iter().zip(&emp) {
            assert!(relative_rms_error(p, q).unwrap() < 0.01);
        }
        let plain_emp = empirical_grad(&x, &w, &t, &[1.0, 1.0], &[1.0, 1.0]).unwrap();
        for (p, q) in multi_relu_grad(&w, &t).unwrap().iter().zip(&plain_emp) {
            assert!(relative_rms_error(p, q).unwrap() < 0.01);
        }
    }

    #[test]
    fn relative_error_examples() {
        let e = v(&[1.0, 2.0]);
        assert_eq!(relative_rms_error(&e, &e).unwrap(), 0.0);
        assert!((relative_rms_error(&e.scale(2.0), &e).unwrap() - 1.0).abs() < 1e-15);
        assert!(relative_rms_error(&e, &v(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn scaled_error_ignores_global_scale() {
        let e = v(&[1.0, 2.0, -1.0]);
        let (c, err) = scaled_relative_error(&e.scale(12.0), &e).unwrap();
        assert!((c - 1.0 / 12.0).abs() < 1e-15 && err < 1e-15);
    }

    #[test]
    fn profile_error_grows_toward_pi() {
        let bins = error_vs_angle_profile(100, 10_000, 10, 50, RngSeed::new(15)).unwrap();
        assert!(bins.iter().all(|b| b.max_err >= 0.0));
        assert!(bins[0].mean_err < bins[9].mean_err);
        let again = error_vs_angle_profile(100, 10_000, 10, 50, RngSeed::new(15)).unwrap();
        assert_eq!(bins, again);
        assert!(error_vs_angle_profile(10, 100, 1, 5, RngSeed::new(0)).is_err());
    }

    #[test]
    fn streamed_estimate_is_bitwise_equal() {
        let mut rng = RngSeed::new(16).rng();
        let e = random_direction(&mut rng, 5);
        let w = gaussian_vector(&mut rng, 5);
        for dist in [
            InputDistribution::Gaussian,
            InputDistribution::UniformCentered,
        ] {
            let s = RngSeed::new(17);
            let x = crate::sampling::batch(dist, 2000, 5, s).unwrap();
            assert_eq!(
                empirical_pg_streamed(dist, 2000, s, &e, &w).unwrap(),
                empirical_pg(&x, &e, &w).unwrap()
            );
        }
    }

    #[test]
    fn formula_error_shrinks_with_n() {
        let thetas: Vec<f64> = (0..10).map(|i| i as f64 * 0.15).collect();
        let trials = formula_trials(
            InputDistribution::Gaussian,
            20,
            &[1_000, 100_000],
            &thetas,
            RngSeed::new(18),
        )
        .unwrap();
        let mean = |n| {
            let v: Vec<f64> = trials
                .iter()
                .filter(|t| t.n == n)
                .map(|t| t.rel_error)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(100_000) < mean(1_000) / 5.0);
        assert_eq!(trials.len(), 20);
    }
}
