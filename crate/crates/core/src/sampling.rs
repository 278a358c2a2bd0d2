//! Seeded random streams and input batches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DenseVector, UnitVector};

/// A `(seed, stream_id)` pair selecting one independent ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngSeed {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngSeed {
    pub fn new(seed: u64) -> Self {
        RngSeed { seed, stream_id: 0 }
    }

    pub fn with_stream(seed: u64, stream_id: u64) -> Self {
        RngSeed { seed, stream_id }
    }

    /// Child stream for trial `index`; the same parent and index always give
    /// the same child, independent of scheduling.
    pub fn derive(&self, index: u64) -> RngSeed {
        RngSeed {
            seed: self.seed,
            stream_id: splitmix64(splitmix64(self.seed ^ self.stream_id.rotate_left(32)) ^ index),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputDistribution {
    Gaussian,
    UniformCentered,
}

impl InputDistribution {
    /// Per-coordinate variance.
    pub fn variance(self) -> f64 {
        match self {
            InputDistribution::Gaussian => 1.0,
            InputDistribution::UniformCentered => 1.0 / 12.0,
        }
    }
}

/// `n x d` input matrix, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    data: Vec<f64>,
    n: usize,
    d: usize,
    distribution: InputDistribution,
    provenance: Option<RngSeed>,
}

impl SampleBatch {
    /// Wrap explicit rows (used for hand-built batches in tests and tools).
    pub fn from_rows(rows: &[Vec<f64>], distribution: InputDistribution) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::domain("batch must hold at least one sample"));
        }
        let d = rows[0].len();
        if d == 0 {
            return Err(Error::domain("sample dimension must be at least 1"));
        }
        for r in rows {
            Error::check_dim(d, r.len())?;
        }
        let data = rows.concat();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::domain("batch entries must be finite"));
        }
        Ok(SampleBatch {
            data,
            n,
            d,
            distribution,
            provenance: None,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn distribution(&self) -> InputDistribution {
        self.distribution
    }

    pub fn provenance(&self) -> Option<RngSeed> {
        self.provenance
    }

    pub fn row(&self, l: usize) -> &[f64] {
        &self.data[l * self.d..(l + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `X w` for every sample.
    pub fn project(&self, w: &[f64]) -> Vec<f64> {
        self.rows().map(|x| crate::geometry::dot(x, w)).collect()
    }

    /// Same rows in a different order.
    pub fn permuted(&self, order: &[usize]) -> SampleBatch {
        assert_eq!(order.len(), self.n);
        let mut data = Vec::with_capacity(self.data.len());
        for &l in order {
            data.extend_from_slice(self.row(l));
        }
        SampleBatch {
            data,
            ..self.clone()
        }
    }
}

fn check_shape(n: usize, d: usize) -> Result<()> {
    if n == 0 || d == 0 {
        return Err(Error::domain(format!(
            "batch shape must be positive, got {n} x {d}"
        )));
    }
    Ok(())
}

/// i.i.d. `N(0, 1)` entries.
pub fn gaussian_batch(n: usize, d: usize, seed: RngSeed) -> Result<SampleBatch> {
    check_shape(n, d)?;
    let mut rng = seed.rng();
    let data: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    Ok(SampleBatch {
        data,
        n,
        d,
        distribution: InputDistribution::Gaussian,
        provenance: Some(seed),
    })
}

/// i.i.d. entries uniform on `[-1/2, 1/2]`.
pub fn uniform_centered_batch(n: usize, d: usize, seed: RngSeed) -> Result<SampleBatch> {
    check_shape(n, d)?;
    let mut rng = seed.rng();
    let law = Uniform::new_inclusive(-0.5, 0.5).expect("valid bounds");
    let data: Vec<f64> = (0..n * d).map(|_| law.sample(&mut rng)).collect();
    Ok(SampleBatch {
        data,
        n,
        d,
        distribution: InputDistribution::UniformCentered,
        provenance: Some(seed),
    })
}

pub fn batch(
    distribution: InputDistribution,
    n: usize,
    d: usize,
    seed: RngSeed,
) -> Result<SampleBatch> {
    match distribution {
        InputDistribution::Gaussian => gaussian_batch(n, d, seed),
        InputDistribution::UniformCentered => uniform_centered_batch(n, d, seed),
    }
}

/// Visit the rows of `batch(distribution, n, d, seed)` one at a time,
/// without materializing the batch. Rows come out identical to the
/// materialized version.
pub fn for_each_row(
    distribution: InputDistribution,
    n: usize,
    d: usize,
    seed: RngSeed,
    mut f: impl FnMut(&[f64]),
) -> Result<()> {
    check_shape(n, d)?;
    let mut rng = seed.rng();
    let mut row = vec![0.0; d];
    let law = Uniform::new_inclusive(-0.5, 0.5).expect("valid bounds");
    for _ in 0..n {
        for v in row.iter_mut() {
            *v = match distribution {
                InputDistribution::Gaussian => rng.sample(StandardNormal),
                InputDistribution::UniformCentered => law.sample(&mut rng),
            };
        }
        f(&row);
    }
    Ok(())
}

pub fn gaussian_vector<R: Rng + ?Sized>(rng: &mut R, d: usize) -> DenseVector {
    DenseVector::from_vec_unchecked((0..d).map(|_| rng.sample(StandardNormal)).collect())
}

/// Uniformly distributed direction on the unit sphere.
pub fn random_direction<R: Rng + ?Sized>(rng: &mut R, d: usize) -> UnitVector {
    loop {
        let g = gaussian_vector(rng, d);
        if let Ok(u) = UnitVector::normalize(&g) {
            return u;
        }
    }
}

/// Uniform sample from the ball `{w : |w| <= r}` in `R^d`.
pub fn uniform_in_ball<R: Rng + ?Sized>(rng: &mut R, d: usize, r: f64) -> DenseVector {
    let dir = random_direction(rng, d);
    let u: f64 = rng.random();
    dir.as_vector().scale(r * u.powf(1.0 / d as f64))
}

/// Unit vector orthogonal to `u`, uniformly distributed in that complement.
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, u: &UnitVector) -> UnitVector {
    assert!(u.dim() >= 2, "no orthogonal complement in 1-D");
    loop {
        let g = gaussian_vector(rng, u.dim());
        let r = g.add_scaled(-g.dot(u.as_vector()), u.as_vector());
        if let Ok(o) = UnitVector::normalize(&r) {
            if r.norm() > 1e-6 {
                return o;
            }
        }
    }
}

/// Unit vector at exactly angle `theta` from `u`.
pub fn direction_at_angle<R: Rng + ?Sized>(rng: &mut R, u: &UnitVector, theta: f64) -> UnitVector {
    let perp = random_orthogonal(rng, u);
    let v = u
        .as_vector()
        .scale(theta.cos())
        .add_scaled(theta.sin(), perp.as_vector());
    UnitVector::normalize(&v).expect("combination of orthonormal pair is unit length")
}
