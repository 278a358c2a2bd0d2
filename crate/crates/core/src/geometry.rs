//! Vectors, angles and orthogonal transforms shared by every other module.
//!
//! All angles are radians. Weight vectors may not sit at the origin: the
//! population gradient is discontinuous there, so [`WeightSet`] refuses any
//! vector whose norm is below [`NORM_FLOOR`].

use std::f64::consts::PI;
use std::ops::{Add, Index, Mul, Neg, Sub};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest weight norm accepted anywhere in the library.
pub const NORM_FLOOR: f64 = 1e-12;

/// Relative pivot threshold used to decide rank during Gram-Schmidt.
const RANK_PIVOT_TOL: f64 = 1e-10;

/// A finite vector in `R^d`, `d >= 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::domain("vector dimension must be at least 1"));
        }
        if let Some(i) = entries.iter().position(|x| !x.is_finite()) {
            return Err(Error::domain(format!("entry {i} is not finite")));
        }
        Ok(DenseVector(entries))
    }

    pub fn zeros(d: usize) -> Self {
        assert!(d >= 1, "vector dimension must be at least 1");
        DenseVector(vec![0.0; d])
    }

    /// The `i`-th standard basis vector of `R^d`.
    pub fn basis(d: usize, i: usize) -> Self {
        let mut v = Self::zeros(d);
        v.0[i] = 1.0;
        v
    }

    pub(crate) fn from_vec_unchecked(entries: Vec<f64>) -> Self {
        debug_assert!(!entries.is_empty());
        DenseVector(entries)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &DenseVector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, c: f64) -> DenseVector {
        DenseVector(self.0.iter().map(|x| c * x).collect())
    }

    /// `self + c * other`
    pub fn add_scaled(&self, c: f64, other: &DenseVector) -> DenseVector {
        debug_assert_eq!(self.dim(), other.dim());
        DenseVector(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| a + c * b)
                .collect(),
        )
    }

    pub fn distance(&self, other: &DenseVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Apply a `d x d` matrix.
    pub fn transform(&self, m: &DMatrix<f64>) -> DenseVector {
        assert_eq!(m.ncols(), self.dim());
        DenseVector(
            (0..m.nrows())
                .map(|r| (0..m.ncols()).map(|c| m[(r, c)] * self.0[c]).sum())
                .collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl TryFrom<Vec<f64>> for DenseVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        DenseVector::new(v)
    }
}

impl From<DenseVector> for Vec<f64> {
    fn from(v: DenseVector) -> Self {
        v.0
    }
}

impl Index<usize> for DenseVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl Add for &DenseVector {
    type Output = DenseVector;

    fn add(self, rhs: &DenseVector) -> DenseVector {
        self.add_scaled(1.0, rhs)
    }
}

impl Sub for &DenseVector {
    type Output = DenseVector;

    fn sub(self, rhs: &DenseVector) -> DenseVector {
        self.add_scaled(-1.0, rhs)
    }
}

impl Mul<f64> for &DenseVector {
    type Output = DenseVector;

    fn mul(self, c: f64) -> DenseVector {
        self.scale(c)
    }
}

impl Neg for &DenseVector {
    type Output = DenseVector;

    fn neg(self) -> DenseVector {
        self.scale(-1.0)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A direction: a vector with unit Euclidean norm (to 1e-12).
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVector(DenseVector);

impl UnitVector {
    const NORM_TOL: f64 = 1e-12;

    /// Normalize `v`; fails on vectors below the norm floor.
    pub fn normalize(v: &DenseVector) -> Result<Self> {
        let n = v.norm();
        if n < NORM_FLOOR {
            return Err(Error::domain(format!(
                "cannot normalize vector with norm {n:e}"
            )));
        }
        Ok(UnitVector(v.scale(1.0 / n)))
    }

    /// Wrap an already-normalized vector, checking the norm.
    pub fn new(v: DenseVector) -> Result<Self> {
        let n = v.norm();
        if (n - 1.0).abs() > Self::NORM_TOL {
            return Err(Error::domain(format!("|norm - 1| = {:e}", (n - 1.0).abs())));
        }
        Ok(UnitVector(v))
    }

    /// Unit vector `(cos phi, sin phi)` in the plane.
    pub fn planar(phi: f64) -> Self {
        UnitVector(DenseVector(vec![phi.cos(), phi.sin()]))
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn as_vector(&self) -> &DenseVector {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

/// Angle in `[0, pi]` between two nonzero vectors.
pub fn angle(u: &DenseVector, v: &DenseVector) -> Result<f64> {
    Error::check_dim(u.dim(), v.dim())?;
    let nu = u.norm();
    let nv = v.norm();
    if nu < NORM_FLOOR || nv < NORM_FLOOR {
        return Err(Error::domain("angle with a zero-norm vector"));
    }
    Ok(angle_from_cos(u.dot(v) / (nu * nv)))
}

/// Angle between two unit vectors.
pub fn unit_angle(u: &UnitVector, v: &UnitVector) -> f64 {
    angle_from_cos(u.as_vector().dot(v.as_vector()))
}

pub(crate) fn angle_from_cos(c: f64) -> f64 {
    c.clamp(-1.0, 1.0).acos()
}

/// `K x K` matrix of angles in radians.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AngleMatrix {
    k: usize,
    theta: Vec<f64>,
}

impl AngleMatrix {
    pub fn from_fn(k: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut theta = Vec::with_capacity(k * k);
        for i in 0..k {
            for j in 0..k {
                theta.push(f(i, j));
            }
        }
        AngleMatrix { k, theta }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::domain("angle matrix must be square"));
        }
        if rows.iter().flatten().any(|t| !(0.0..=PI).contains(t)) {
            return Err(Error::domain("angles must lie in [0, pi]"));
        }
        Ok(AngleMatrix {
            k,
            theta: rows.concat(),
        })
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.theta[i * self.k + j]
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (0..self.k).all(|i| (0..self.k).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }
}

/// Ordered set of `K` weight vectors (a student or a teacher layer).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    vectors: Vec<DenseVector>,
    norms: Vec<f64>,
}

impl WeightSet {
    pub fn new(vectors: Vec<DenseVector>) -> Result<Self> {
        let Some(first) = vectors.first() else {
            return Err(Error::domain("weight set must hold at least one vector"));
        };
        let d = first.dim();
        for v in &vectors {
            Error::check_dim(d, v.dim())?;
        }
        let norms: Vec<f64> = vectors.iter().map(DenseVector::norm).collect();
        if let Some(j) = norms.iter().position(|&n| n < NORM_FLOOR) {
            return Err(Error::domain(format!(
                "weight {j} has norm {:e}, below the floor {NORM_FLOOR:e}",
                norms[j]
            )));
        }
        Ok(WeightSet { vectors, norms })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let vectors = rows
            .iter()
            .map(|r| DenseVector::new(r.clone()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(vectors)
    }

    /// Standard orthonormal basis `e_1, ..., e_k` of `R^d`.
    pub fn orthonormal(k: usize, d: usize) -> Self {
        assert!(k <= d, "need k <= d for an orthonormal set");
        Self::new((0..k).map(|i| DenseVector::basis(d, i)).collect())
            .expect("basis vectors have unit norm")
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].dim()
    }

    pub fn vectors(&self) -> &[DenseVector] {
        &self.vectors
    }

    pub fn vector(&self, j: usize) -> &DenseVector {
        &self.vectors[j]
    }

    /// Cached norms `[|w_1|, ..., |w_K|]`.
    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn direction(&self, j: usize) -> UnitVector {
        UnitVector(self.vectors[j].scale(1.0 / self.norms[j]))
    }

    pub fn directions(&self) -> Vec<UnitVector> {
        (0..self.len()).map(|j| self.direction(j)).collect()
    }

    /// `Theta[i][j] = angle(w_j, w_i)`.
    pub fn self_angles(&self) -> AngleMatrix {
        let dirs = self.directions();
        AngleMatrix::from_fn(self.len(), |i, j| {
            if i == j {
                0.0
            } else {
                unit_angle(&dirs[j], &dirs[i])
            }
        })
    }

    /// `Theta*[k][j] = angle(w_j, w*_k)` where `self` is the student.
    pub fn cross_angles(&self, teacher: &WeightSet) -> AngleMatrix {
        let dirs = self.directions();
        let tdirs = teacher.directions();
        let k = self.len();
        assert_eq!(k, teacher.len());
        AngleMatrix::from_fn(k, |kk, j| unit_angle(&dirs[j], &tdirs[kk]))
    }

    pub fn map(&self, f: impl Fn(&DenseVector) -> DenseVector) -> Result<WeightSet> {
        WeightSet::new(self.vectors.iter().map(f).collect())
    }

    pub fn transform(&self, m: &DMatrix<f64>) -> Result<WeightSet> {
        self.map(|v| v.transform(m))
    }

    /// All weights flattened row by row.
    pub fn flatten(&self) -> Vec<f64> {
        self.vectors
            .iter()
            .flat_map(|v| v.as_slice().iter().copied())
            .collect()
    }

    pub fn into_vectors(self) -> Vec<DenseVector> {
        self.vectors
    }
}

/// Modified Gram-Schmidt with one re-orthogonalization pass.
///
/// Returns the orthonormalized vectors, or a domain error when a pivot drops
/// below `1e-10` times the largest input norm.
pub fn orthonormalize(vectors: &[DenseVector]) -> Result<Vec<DenseVector>> {
    let scale = vectors.iter().map(DenseVector::norm).fold(0.0, f64::max);
    if scale < NORM_FLOOR {
        return Err(Error::domain("basis is numerically zero"));
    }
    let mut out: Vec<DenseVector> = Vec::with_capacity(vectors.len());
    for (i, v) in vectors.iter().enumerate() {
        let mut r = v.clone();
        for _pass in 0..2 {
            for q in &out {
                r = r.add_scaled(-q.dot(&r), q);
            }
        }
        let pivot = r.norm();
        if pivot <= RANK_PIVOT_TOL * scale {
            return Err(Error::domain(format!(
                "basis is rank deficient at vector {i} (pivot {pivot:e})"
            )));
        }
        out.push(r.scale(1.0 / pivot));
    }
    Ok(out)
}

/// Orthogonal `d x d` matrix that fixes `span(basis)` pointwise and rotates
/// the first two complement directions by `plane_angle`.
pub fn rotation_fixing_subspace(
    basis: &[DenseVector],
    d: usize,
    plane_angle: f64,
) -> Result<DMatrix<f64>> {
    let k = basis.len();
    if d < k + 2 {
        return Err(Error::Capability(format!(
            "need d >= K + 2 to rotate outside a {k}-dim subspace, got d = {d}"
        )));
    }
    for b in basis {
        Error::check_dim(d, b.dim())?;
    }
    let frame = orthonormalize(basis)?;
    let complement = complete_frame(&frame, d);
    let (u, v) = (&complement[0], &complement[1]);

    let (s, c) = plane_angle.sin_cos();
    let mut r = DMatrix::<f64>::identity(d, d);
    for i in 0..d {
        for j in 0..d {
            r[(i, j)] += (c - 1.0) * (u[i] * u[j] + v[i] * v[j]) + s * (v[i] * u[j] - u[i] * v[j]);
        }
    }
    Ok(r)
}

/// Extend an orthonormal set to a full orthonormal frame of `R^d`, returning
/// only the added complement vectors.
fn complete_frame(frame: &[DenseVector], d: usize) -> Vec<DenseVector> {
    let mut all: Vec<DenseVector> = frame.to_vec();
    let mut complement = Vec::with_capacity(d - frame.len());
    while all.len() < d {
        // Standard basis vector with the largest residual against the frame.
        let best = (0..d)
            .map(|i| {
                let mut r = DenseVector::basis(d, i);
                for _pass in 0..2 {
                    for q in &all {
                        r = r.add_scaled(-q.dot(&r), q);
                    }
                }
                r
            })
            .max_by(|a, b| a.norm().total_cmp(&b.norm()))
            .expect("d >= 1");
        let q = best.scale(1.0 / best.norm());
        all.push(q.clone());
        complement.push(q);
    }
    complement
}
