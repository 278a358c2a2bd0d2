//! Closed-form population gradients under spherical Gaussian input.
//!
//! Everything here uses the per-sample convention: values are expectations
//! of a single sample's contribution, so the usual factor `N` (batch size) is
//! divided out.
//!
//! The building block is the population gating function
//!
//! ```text
//! E[F(e, w)] = E[x 1{e.x > 0} 1{w.x > 0} (w.x)]
//!            = ((pi - theta) w + |w| sin(theta) e) / (2 pi),   theta = angle(e, w)
//! ```
//!
//! made of a *mass* term along `w` and an *asymmetric* term along `e`.
//!
//! ## Fixed top weights
//!
//! For `g(x) = sum_j a_j relu(w_j . x)` and loss `1/2 (g*(x) - g(x))^2` the
//! gradient with respect to `w_j` is `a_j 1{w_j . x > 0} x (g(x) - g*(x))`.
//! Because `g` is linear in the ReLU outputs, its expectation is
//!
//! ```text
//! grad_j = a_j [ sum_k a_k E[F(e_j, w_k)] - sum_k a*_k E[F(e_j, w*_k)] ]
//! ```
//!
//! which reduces to the unit-weight gradient when `a = a* = 1`. This identity
//! is checked only against the Monte-Carlo estimator in `empirical`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::{angle, unit_angle, DenseVector, UnitVector, WeightSet, NORM_FLOOR};

/// Expected gating product with its two components exposed.
#[derive(Debug, Clone, PartialEq)]
pub struct PgResult {
    pub vector: DenseVector,
    /// `(pi - theta) / (2 pi)`, multiplies `w`.
    pub mass_coeff: f64,
    /// `|w| sin(theta) / (2 pi)`, multiplies `e`.
    pub asym_coeff: f64,
    pub theta: f64,
}

/// Population gating function `E[F(e, w)]`.
pub fn pg_function(e: &UnitVector, w: &DenseVector) -> Result<PgResult> {
    Error::check_dim(e.dim(), w.dim())?;
    let wn = w.norm();
    if wn < NORM_FLOOR {
        return Err(Error::domain("pg_function at the origin"));
    }
    let theta = angle(e.as_vector(), w)?;
    Ok(pg_parts(e, w, wn, theta))
}

fn pg_parts(e: &UnitVector, w: &DenseVector, wn: f64, theta: f64) -> PgResult {
    let mass_coeff = (PI - theta) / (2.0 * PI);
    let asym_coeff = wn * theta.sin() / (2.0 * PI);
    let vector = w.scale(mass_coeff).add_scaled(asym_coeff, e.as_vector());
    PgResult {
        vector,
        mass_coeff,
        asym_coeff,
        theta,
    }
}

/// Population gradient for a single ReLU student against a single teacher.
pub fn single_relu_grad(w: &DenseVector, w_star: &DenseVector) -> Result<DenseVector> {
    Error::check_dim(w.dim(), w_star.dim())?;
    let (wn, sn) = (w.norm(), w_star.norm());
    if wn < NORM_FLOOR || sn < NORM_FLOOR {
        return Err(Error::domain(
            "single_relu_grad needs both norms above the floor",
        ));
    }
    let theta = angle(w, w_star)?;
    let linear = (w - w_star).scale(0.5);
    let correction = w_star
        .scale(theta)
        .add_scaled(-(sn / wn) * theta.sin(), w)
        .scale(1.0 / (2.0 * PI));
    Ok(&linear + &correction)
}

/// Population gradient of every student weight for unit top weights.
pub fn multi_relu_grad(w: &WeightSet, w_star: &WeightSet) -> Result<Vec<DenseVector>> {
    let k = w.len();
    weighted_multi_relu_grad(w, w_star, &vec![1.0; k], &vec![1.0; k])
}

/// Population gradient with fixed top weights `a` (student) and `a*`
/// (teacher).
pub fn weighted_multi_relu_grad(
    w: &WeightSet,
    w_star: &WeightSet,
    a: &[f64],
    a_star: &[f64],
) -> Result<Vec<DenseVector>> {
    let k = w.len();
    Error::check_dim(k, w_star.len())?;
    Error::check_dim(w.dim(), w_star.dim())?;
    Error::check_dim(k, a.len())?;
    Error::check_dim(k, a_star.len())?;

    let student_dirs = w.directions();
    let teacher_dirs = w_star.directions();
    let grads = (0..k)
        .map(|j| {
            let e = &student_dirs[j];
            let mut acc = DenseVector::zeros(w.dim());
            for kk in 0..k {
                let own = student_pg(e, j, kk, w, &student_dirs);
                acc = acc.add_scaled(a[kk], &own);
                let theta = unit_angle(e, &teacher_dirs[kk]);
                let teach = pg_parts(e, w_star.vector(kk), w_star.norms()[kk], theta).vector;
                acc = acc.add_scaled(-a_star[kk], &teach);
            }
            acc.scale(a[j])
        })
        .collect();
    Ok(grads)
}

// F(e_j, w_k): the self term (k == j) is exactly w_j / 2.
fn student_pg(
    e: &UnitVector,
    j: usize,
    kk: usize,
    w: &WeightSet,
    dirs: &[UnitVector],
) -> DenseVector {
    if kk == j {
        w.vector(j).scale(0.5)
    } else {
        let theta = unit_angle(e, &dirs[kk]);
        pg_parts(e, w.vector(kk), w.norms()[kk], theta).vector
    }
}

/// Angular profile `E[F(e, w)] = A(theta) w + |w| B(theta) e` of an isotropic
/// input law, per sample. Valid kernels satisfy `A(0) = 1/2`, `A(pi) = 0`
/// and `B(0) = B(pi) = 0`.
pub trait IsotropicKernel {
    fn mass(&self, theta: f64) -> f64;
    fn asymmetric(&self, theta: f64) -> f64;

    /// Check the boundary values to `tol`.
    fn validate(&self, tol: f64) -> Result<()> {
        let checks = [
            ("A(0)", self.mass(0.0), 0.5),
            ("A(pi)", self.mass(PI), 0.0),
            ("B(0)", self.asymmetric(0.0), 0.0),
            ("B(pi)", self.asymmetric(PI), 0.0),
        ];
        for (name, got, want) in checks {
            if (got - want).abs() > tol {
                return Err(Error::domain(format!(
                    "kernel {name} = {got}, expected {want}"
                )));
            }
        }
        Ok(())
    }
}

/// The spherical Gaussian kernel: `A = (pi - theta)/2pi`, `B = sin(theta)/2pi`.
#[derive(Debug, Clone, Copy, Default)]
pub struct GaussianKernel;

impl IsotropicKernel for GaussianKernel {
    fn mass(&self, theta: f64) -> f64 {
        (PI - theta) / (2.0 * PI)
    }

    fn asymmetric(&self, theta: f64) -> f64 {
        theta.sin() / (2.0 * PI)
    }
}

pub fn isotropic_pg<K: IsotropicKernel + ?Sized>(
    kernel: &K,
    e: &UnitVector,
    w: &DenseVector,
) -> Result<DenseVector> {
    Error::check_dim(e.dim(), w.dim())?;
    let wn = w.norm();
    if wn < NORM_FLOOR {
        return Err(Error::domain("isotropic_pg at the origin"));
    }
    let theta = angle(e.as_vector(), w)?;
    Ok(w.scale(kernel.mass(theta))
        .add_scaled(wn * kernel.asymmetric(theta), e.as_vector()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{gaussian_vector, random_direction, RngSeed};
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> DenseVector {
        DenseVector::new(x.to_vec()).unwrap()
    }

    fn unit(x: &[f64]) -> UnitVector {
        UnitVector::normalize(&v(x)).unwrap()
    }

    #[test]
    fn pg_aligned_is_half_w() {
        let w = v(&[1.0, -2.0, 0.5]);
        let r = pg_function(&UnitVector::normalize(&w).unwrap(), &w).unwrap();
        assert!(r.vector.distance(&w.scale(0.5)) < 1e-15);
        assert_eq!(r.asym_coeff, 0.0);
    }

    #[test]
    fn pg_antialigned_is_zero() {
        let w = v(&[1.0, -2.0, 0.5]);
        let r = pg_function(&UnitVector::normalize(&-&w).unwrap(), &w).unwrap();
        assert!(r.vector.max_abs() < 1e-15);
    }

    #[test]
    fn pg_orthogonal_planar_value() {
        let r = pg_function(&unit(&[0.0, 1.0]), &v(&[1.0, 0.0])).unwrap();
        assert!((r.vector[0] - 0.25).abs() < 1e-15);
        assert!((r.vector[1] - 1.0 / (2.0 * PI)).abs() < 1e-15);
    }

    #[test]
    fn pg_errors() {
        assert!(matches!(
            pg_function(&unit(&[0.0, 1.0]), &v(&[1.0, 0.0, 0.0])),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(pg_function(&unit(&[0.0, 1.0]), &v(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn single_grad_at_optimum_and_opposite() {
        let ws = v(&[0.3, -1.0, 2.0]);
        assert!(single_relu_grad(&ws, &ws).unwrap().max_abs() < 1e-15);
        let g = single_relu_grad(&-&ws, &ws).unwrap();
        assert!(g.distance(&ws.scale(-0.5)) < 1e-15);
    }

    #[test]
    fn single_grad_floor_violation() {
        assert!(single_relu_grad(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn multi_grad_zero_at_teacher() {
        let t = WeightSet::from_rows(&[vec![1.0, 0.2, 0.0], vec![-0.3, 1.0, 0.5]]).unwrap();
        for g in multi_relu_grad(&t, &t).unwrap() {
            assert!(g.max_abs() < 1e-15);
        }
    }

    #[test]
    fn weighted_reduces_and_checks_lengths() {
        let w = WeightSet::from_rows(&[vec![1.0, 0.5], vec![-0.2, 0.7]]).unwrap();
        let t = WeightSet::orthonormal(2, 2);
        let plain = multi_relu_grad(&w, &t).unwrap();
        let weighted = weighted_multi_relu_grad(&w, &t, &[1.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(plain, weighted);
        let same = weighted_multi_relu_grad(&t, &t, &[2.0, -1.0], &[2.0, -1.0]).unwrap();
        assert!(same.iter().all(|g| g.max_abs() < 1e-15));
        assert!(weighted_multi_relu_grad(&w, &t, &[1.0], &[1.0, 1.0]).is_err());
        let t3 = WeightSet::orthonormal(3, 3);
        assert!(multi_relu_grad(&w, &t3).is_err());
    }

    #[test]
    fn kernel_boundaries() {
        GaussianKernel.validate(1e-15).unwrap();
        struct Bad;
        impl IsotropicKernel for Bad {
            fn mass(&self, _: f64) -> f64 {
                0.4
            }
            fn asymmetric(&self, _: f64) -> f64 {
                0.0
            }
        }
        assert!(Bad.validate(1e-9).is_err());
    }

    #[test]
    fn isotropic_boundary_values() {
        let w = v(&[0.5, 2.0, -1.0]);
        let e0 = UnitVector::normalize(&w).unwrap();
        let at0 = isotropic_pg(&GaussianKernel, &e0, &w).unwrap();
        assert!(at0.distance(&w.scale(0.5)) < 1e-15);
        let epi = UnitVector::normalize(&-&w).unwrap();
        assert!(isotropic_pg(&GaussianKernel, &epi, &w).unwrap().max_abs() < 1e-15);
    }

    fn random_orthogonal_matrix(seed: u64, d: usize) -> DMatrix<f64> {
        let mut rng = RngSeed::new(seed).rng();
        let m = DMatrix::from_fn(d, d, |_, _| gaussian_vector(&mut rng, 1)[0]);
        m.qr().q()
    }

    proptest! {
        #[test]
        fn decomposition_reconstructs(seed in any::<u64>()) {
            let mut rng = RngSeed::new(seed).rng();
            let e = random_direction(&mut rng, 6);
            let w = gaussian_vector(&mut rng, 6);
            let r = pg_function(&e, &w).unwrap();
            let rebuilt = w.scale(r.mass_coeff).add_scaled(r.asym_coeff, e.as_vector());
            prop_assert!(rebuilt.distance(&r.vector) <= 1e-12 * r.vector.norm().max(1e-300));
            let iso = isotropic_pg(&GaussianKernel, &e, &w).unwrap();
            prop_assert!(iso.distance(&r.vector) <= 1e-12 * w.norm());
        }

        #[test]
        fn positively_homogeneous(seed in any::<u64>(), c in 0.01f64..100.0) {
            let mut rng = RngSeed::new(seed).rng();
            let e = random_direction(&mut rng, 5);
            let w = gaussian_vector(&mut rng, 5);
            let base = pg_function(&e, &w).unwrap().vector;
            let scaled = pg_function(&e, &w.scale(c)).unwrap().vector;
            prop_assert!(scaled.distance(&base.scale(c)) <= 1e-12 * c * w.norm());
        }

        #[test]
        fn rotation_equivariant(seed in any::<u64>()) {
            let mut rng = RngSeed::new(seed).rng();
            let e = random_direction(&mut rng, 4);
            let w = gaussian_vector(&mut rng, 4);
            let r = random_orthogonal_matrix(seed ^ 0xabc, 4);
            let re = UnitVector::normalize(&e.as_vector().transform(&r)).unwrap();
            let lhs = pg_function(&re, &w.transform(&r)).unwrap().vector;
            let rhs = pg_function(&e, &w).unwrap().vector.transform(&r);
            prop_assert!(lhs.distance(&rhs) <= 1e-10 * (1.0 + w.norm()));
        }

        #[test]
        fn k1_multi_equals_single(seed in any::<u64>()) {
            let mut rng = RngSeed::new(seed).rng();
            let w = gaussian_vector(&mut rng, 7);
            let ws = gaussian_vector(&mut rng, 7);
            let single = single_relu_grad(&w, &ws).unwrap();
            let multi = multi_relu_grad(
                &WeightSet::new(vec![w.clone()]).unwrap(),
                &WeightSet::new(vec![ws.clone()]).unwrap(),
            ).unwrap();
            prop_assert!(multi[0].distance(&single) <= 1e-12 * (1.0 + w.norm() + ws.norm()));
        }
    }
}
