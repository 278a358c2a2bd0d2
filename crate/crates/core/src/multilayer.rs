//! Finite-sample gradients of deep bias-free ReLU teacher-student networks
//! through the top-down inflow recursion.
//!
//! Layer `c` maps its input `X_c` (the post-activation output of layer
//! `c - 1`, or the raw batch for `c = 0`) through `W^(c)` (`fan_in x
//! fan_out`) and a ReLU. The network output is the sum of the top layer's
//! units. With `Q_j = 1` on the top layer and
//!
//! ```text
//! Q_k = sum_j w_kj D_j Q_j        (k in layer c, j in layer c + 1)
//! ```
//!
//! the gradient of `1/(2n) |g - g*|^2` for node `j` of layer `c` is
//! `(1/n) X_c^T D_j Q_j sum_j' (Q_j' u_j' - Q*_j' u*_j')`. Gating and `Q`
//! are kept as length-`n` vectors, never as `n x n` diagonals.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::sampling::SampleBatch;

#[derive(Debug, Clone, PartialEq)]
pub struct LayeredNet {
    layers: Vec<DMatrix<f64>>,
}

impl LayeredNet {
    pub fn new(layers: Vec<DMatrix<f64>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::domain("network needs at least one layer"));
        }
        for (c, w) in layers.iter().enumerate() {
            if w.nrows() == 0 || w.ncols() == 0 {
                return Err(Error::domain(format!("layer {c} has an empty dimension")));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::domain(format!("layer {c} has non-finite weights")));
            }
            if c > 0 {
                Error::check_dim(layers[c - 1].ncols(), w.nrows())?;
            }
        }
        Ok(LayeredNet { layers })
    }

    /// Gaussian weights scaled by `1 / sqrt(fan_in)`.
    pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, d: usize, widths: &[usize]) -> Result<Self> {
        let mut fan_in = d;
        let mut layers = Vec::with_capacity(widths.len());
        for &w in widths {
            let scale = 1.0 / (fan_in.max(1) as f64).sqrt();
            layers.push(DMatrix::from_fn(fan_in, w, |_, _| {
                scale * rng.sample::<f64, _>(StandardNormal)
            }));
            fan_in = w;
        }
        LayeredNet::new(layers)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].nrows()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|w| w.ncols()).collect()
    }

    pub fn layers(&self) -> &[DMatrix<f64>] {
        &self.layers
    }

    pub fn layer(&self, c: usize) -> &DMatrix<f64> {
        &self.layers[c]
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|w| w.len()).sum()
    }

    /// Copy with one weight replaced.
    pub fn with_weight(&self, c: usize, i: usize, j: usize, value: f64) -> LayeredNet {
        let mut out = self.clone();
        out.layers[c][(i, j)] = value;
        out
    }

    fn same_architecture(&self, other: &LayeredNet) -> Result<()> {
        if self.input_dim() != other.input_dim() || self.widths() != other.widths() {
            return Err(Error::domain(format!(
                "architectures differ: {}x{:?} vs {}x{:?}",
                self.input_dim(),
                self.widths(),
                other.input_dim(),
                other.widths()
            )));
        }
        Ok(())
    }
}

/// One layer of a forward pass; every vector has one entry per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPass {
    pub pre: Vec<Vec<f64>>,
    pub gate: Vec<Vec<bool>>,
    pub out: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub n: usize,
    pub layers: Vec<LayerPass>,
}

impl ForwardPass {
    /// `g(x)`, the sum of the top units.
    pub fn output(&self) -> Vec<f64> {
        let top = self.layers.last().expect("at least one layer");
        let mut g = vec![0.0; self.n];
        for u in &top.out {
            for (gl, ul) in g.iter_mut().zip(u) {
                *gl += ul;
            }
        }
        g
    }
}

/// Input of layer `c` for sample `l`, feature `i`.
fn layer_input<'a>(
    x: &'a SampleBatch,
    pass: &'a [LayerPass],
    c: usize,
) -> impl Fn(usize, usize) -> f64 + 'a {
    move |l, i| {
        if c == 0 {
            x.row(l)[i]
        } else {
            pass[c - 1].out[i][l]
        }
    }
}

fn run_forward(
    net: &LayeredNet,
    x: &SampleBatch,
    frozen: Option<&ForwardPass>,
) -> Result<ForwardPass> {
    Error::check_dim(net.input_dim(), x.dim())?;
    let n = x.n();
    let mut layers: Vec<LayerPass> = Vec::with_capacity(net.depth());
    for (c, w) in net.layers().iter().enumerate() {
        let mut pass = LayerPass {
            pre: Vec::with_capacity(w.ncols()),
            gate: Vec::with_capacity(w.ncols()),
            out: Vec::with_capacity(w.ncols()),
        };
        {
            let input = layer_input(x, &layers, c);
            for j in 0..w.ncols() {
                let pre: Vec<f64> = (0..n)
                    .map(|l| {
                        let mut s = 0.0;
                        for i in 0..w.nrows() {
                            s += input(l, i) * w[(i, j)];
                        }
                        s
                    })
                    .collect();
                let gate: Vec<bool> = match frozen {
                    Some(f) => f.layers[c].gate[j].clone(),
                    None => pre.iter().map(|&p| p > 0.0).collect(),
                };
                let out = pre
                    .iter()
                    .zip(&gate)
                    .map(|(&p, &on)| if on { p } else { 0.0 })
                    .collect();
                pass.pre.push(pre);
                pass.gate.push(gate);
                pass.out.push(out);
            }
        }
        layers.push(pass);
    }
    Ok(ForwardPass { n, layers })
}

/// ReLU forward pass keeping every node's pre-activation and gate.
pub fn forward(net: &LayeredNet, x: &SampleBatch) -> Result<ForwardPass> {
    run_forward(net, x, None)
}

/// Per-node gating `D` and inflow `Q`, indexed `[layer][node][sample]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeDiagonals {
    pub d: Vec<Vec<Vec<bool>>>,
    pub q: Vec<Vec<Vec<f64>>>,
}

/// Top-down `Q` recursion for one network.
pub fn inflow(net: &LayeredNet, pass: &ForwardPass) -> NodeDiagonals {
    let depth = net.depth();
    let n = pass.n;
    let mut q: Vec<Vec<Vec<f64>>> = vec![Vec::new(); depth];
    q[depth - 1] = vec![vec![1.0; n]; net.widths()[depth - 1]];
    for c in (0..depth - 1).rev() {
        let above = net.layer(c + 1);
        let gates = &pass.layers[c + 1].gate;
        q[c] = (0..above.nrows())
            .map(|k| {
                let mut acc = vec![0.0; n];
                for j in 0..above.ncols() {
                    let wkj = above[(k, j)];
                    for l in 0..n {
                        if gates[j][l] {
                            acc[l] += wkj * q[c + 1][j][l];
                        }
                    }
                }
                acc
            })
            .collect();
    }
    NodeDiagonals {
        d: pass.layers.iter().map(|p| p.gate.clone()).collect(),
        q,
    }
}

/// `sum_j Q_j u_j` over layer `c`; equals `g` for every `c`.
pub fn layer_output(diag: &NodeDiagonals, pass: &ForwardPass, c: usize) -> Vec<f64> {
    let mut g = vec![0.0; pass.n];
    for (qj, uj) in diag.q[c].iter().zip(&pass.layers[c].out) {
        for l in 0..pass.n {
            g[l] += qj[l] * uj[l];
        }
    }
    g
}

/// Gradients of `1/(2n) |g(X) - g*(X)|^2` for every weight matrix, same
/// shapes as the layers.
pub fn gradient_inflow(
    student: &LayeredNet,
    teacher: &LayeredNet,
    x: &SampleBatch,
) -> Result<Vec<DMatrix<f64>>> {
    student.same_architecture(teacher)?;
    let pass = forward(student, x)?;
    let pass_star = forward(teacher, x)?;
    let diag = inflow(student, &pass);
    let diag_star = inflow(teacher, &pass_star);
    let n = x.n();
    let nf = n as f64;
    Ok((0..student.depth())
        .map(|c| {
            let g = layer_output(&diag, &pass, c);
            let gs = layer_output(&diag_star, &pass_star, c);
            let residual: Vec<f64> = g.iter().zip(&gs).map(|(p, q)| p - q).collect();
            let w = student.layer(c);
            let input = layer_input(x, &pass.layers, c);
            let mut grad = DMatrix::zeros(w.nrows(), w.ncols());
            for j in 0..w.ncols() {
                let mut acc = vec![0.0; w.nrows()];
                for l in 0..n {
                    if diag.d[c][j][l] {
                        let s = diag.q[c][j][l] * residual[l];
                        for (i, a) in acc.iter_mut().enumerate() {
                            *a += input(l, i) * s;
                        }
                    }
                }
                for (i, a) in acc.into_iter().enumerate() {
                    grad[(i, j)] = a / nf;
                }
            }
            grad
        })
        .collect())
}

/// `1/(2n) |g - g*|^2`; with `masks`, the student's gates are taken from
/// that pass instead of recomputed.
pub fn layered_loss(
    student: &LayeredNet,
    teacher: &LayeredNet,
    x: &SampleBatch,
    masks: Option<&ForwardPass>,
) -> Result<f64> {
    student.same_architecture(teacher)?;
    let g = run_forward(student, x, masks)?.output();
    let gs = forward(teacher, x)?.output();
    let sq: f64 = g.iter().zip(&gs).map(|(p, q)| (p - q) * (p - q)).sum();
    Ok(0.5 * sq / x.n() as f64)
}

/// Central differences of [`layered_loss`] with the student's gates frozen
/// at the unperturbed point.
pub fn finite_difference_gradient(
    student: &LayeredNet,
    teacher: &LayeredNet,
    x: &SampleBatch,
    h: f64,
) -> Result<Vec<DMatrix<f64>>> {
    if !(h > 0.0) {
        return Err(Error::domain("finite-difference step must be positive"));
    }
    let masks = forward(student, x)?;
    student
        .layers()
        .iter()
        .enumerate()
        .map(|(c, w)| {
            let mut out = DMatrix::zeros(w.nrows(), w.ncols());
            for i in 0..w.nrows() {
                for j in 0..w.ncols() {
                    let v = w[(i, j)];
                    let up = layered_loss(
                        &student.with_weight(c, i, j, v + h),
                        teacher,
                        x,
                        Some(&masks),
                    )?;
                    let dn = layered_loss(
                        &student.with_weight(c, i, j, v - h),
                        teacher,
                        x,
                        Some(&masks),
                    )?;
                    out[(i, j)] = (up - dn) / (2.0 * h);
                }
            }
            Ok(out)
        })
        .collect()
}

/// `|a - b|_2 / |b|_2` across all layers.
pub fn relative_gradient_error(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        num += (x - y).norm_squared();
        den += y.norm_squared();
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::empirical::{empirical_grad, relu_outputs};
    use crate::geometry::{DenseVector, WeightSet};
    use crate::sampling::{gaussian_batch, InputDistribution, RngSeed};

    fn net(seed: u64, d: usize, widths: &[usize]) -> LayeredNet {
        LayeredNet::gaussian(&mut RngSeed::new(seed).rng(), d, widths).unwrap()
    }

    #[test]
    fn construction_checks() {
        assert!(LayeredNet::new(vec![]).is_err());
        assert!(LayeredNet::new(vec![DMatrix::zeros(3, 2), DMatrix::zeros(3, 1)]).is_err());
        assert!(LayeredNet::new(vec![DMatrix::from_element(2, 1, f64::NAN)]).is_err());
        let n = net(1, 5, &[4, 3, 2]);
        assert_eq!(
            (n.depth(), n.input_dim(), n.num_params()),
            (3, 5, 20 + 12 + 6)
        );
    }

    #[test]
    fn single_node_forward_is_relu() {
        let x = gaussian_batch(50, 3, RngSeed::new(2)).unwrap();
        let w = DenseVector::new(vec![0.5, -1.0, 2.0]).unwrap();
        let n = LayeredNet::new(vec![DMatrix::from_column_slice(3, 1, w.as_slice())]).unwrap();
        let pass = forward(&n, &x).unwrap();
        assert_eq!(pass.layers[0].out[0], relu_outputs(&x, &w).unwrap());
        for l in 0..50 {
            let p = pass.layers[0].pre[0][l];
            let on = if pass.layers[0].gate[0][l] { 1.0 } else { 0.0 };
            assert_eq!(pass.layers[0].out[0][l], on * p);
        }
    }

    #[test]
    fn zero_row_and_homogeneity() {
        let x = SampleBatch::from_rows(
            &[vec![0.0; 4], vec![1.0, -0.3, 0.2, 0.7]],
            InputDistribution::Gaussian,
        )
        .unwrap();
        let a = net(3, 4, &[3, 2]);
        let pass = forward(&a, &x).unwrap();
        for layer in &pass.layers {
            for u in &layer.out {
                assert_eq!(u[0], 0.0);
            }
        }
        let mut doubled = a.layers().to_vec();
        doubled[0] *= 2.0;
        let b = LayeredNet::new(doubled).unwrap();
        let pb = forward(&b, &x).unwrap();
        for (u, v) in pass.layers[0].out.iter().zip(&pb.layers[0].out) {
            for (p, q) in u.iter().zip(v) {
                assert!((2.0 * p - q).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn student_equal_teacher_has_zero_gradient() {
        let a = net(4, 5, &[4, 3, 2]);
        let x = gaussian_batch(64, 5, RngSeed::new(5)).unwrap();
        for g in gradient_inflow(&a, &a, &x).unwrap() {
            assert!(g.amax() <= 1e-12);
        }
    }

    #[test]
    fn architecture_mismatch() {
        let x = gaussian_batch(8, 5, RngSeed::new(6)).unwrap();
        assert!(gradient_inflow(&net(1, 5, &[3, 2]), &net(2, 5, &[2, 2]), &x).is_err());
        assert!(gradient_inflow(&net(1, 4, &[3]), &net(2, 4, &[3]), &x).is_err());
    }

    #[test]
    fn depth_one_equals_two_layer_empirical_gradient() {
        let x = gaussian_batch(300, 4, RngSeed::new(7)).unwrap();
        let s = net(8, 4, &[3]);
        let t = net(9, 4, &[3]);
        let grads = gradient_inflow(&s, &t, &x).unwrap();
        let cols = |m: &DMatrix<f64>| {
            WeightSet::new(
                (0..m.ncols())
                    .map(|j| DenseVector::new(m.column(j).iter().copied().collect()).unwrap())
                    .collect(),
            )
            .unwrap()
        };
        let two = empirical_grad(
            &x,
            &cols(s.layer(0)),
            &cols(t.layer(0)),
            &[1.0; 3],
            &[1.0; 3],
        )
        .unwrap();
        for j in 0..3 {
            let col: Vec<f64> = grads[0].column(j).iter().copied().collect();
            assert_eq!(col.as_slice(), two[j].as_slice());
        }
    }

    #[test]
    fn recursion_matches_path_expansion() {
        let s = net(10, 3, &[4, 3, 2]);
        let x = gaussian_batch(40, 3, RngSeed::new(11)).unwrap();
        let pass = forward(&s, &x).unwrap();
        let diag = inflow(&s, &pass);
        let (w1, w2) = (s.layer(1), s.layer(2));
        let d = |c: usize, j: usize, l: usize| if pass.layers[c].gate[j][l] { 1.0 } else { 0.0 };
        for k in 0..4 {
            for l in 0..40 {
                let mut expanded = 0.0;
                for j in 0..3 {
                    for i in 0..2 {
                        expanded += w1[(k, j)] * d(1, j, l) * w2[(j, i)] * d(2, i, l);
                    }
                }
                assert!((diag.q[0][k][l] - expanded).abs() < 1e-12);
            }
        }
        assert!(diag.q[2].iter().all(|q| q.iter().all(|&v| v == 1.0)));
        let g = pass.output();
        for c in 0..3 {
            for (a, b) in layer_output(&diag, &pass, c).iter().zip(&g) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sample_order_invariance() {
        let s = net(12, 5, &[4, 3, 2]);
        let t = net(13, 5, &[4, 3, 2]);
        let x = gaussian_batch(128, 5, RngSeed::new(14)).unwrap();
        let order: Vec<usize> = (0..128).rev().collect();
        let a = gradient_inflow(&s, &t, &x).unwrap();
        let b = gradient_inflow(&s, &t, &x.permuted(&order)).unwrap();
        assert!(relative_gradient_error(&a, &b) < 1e-12);
    }

    #[test]
    fn matches_frozen_mask_finite_differences() {
        for seed in 0..5 {
            let s = net(100 + seed, 5, &[4, 3, 2]);
            let t = net(200 + seed, 5, &[4, 3, 2]);
            let x = gaussian_batch(256, 5, RngSeed::new(300 + seed)).unwrap();
            let an = gradient_inflow(&s, &t, &x).unwrap();
            let fd = finite_difference_gradient(&s, &t, &x, 1e-5).unwrap();
            assert!(relative_gradient_error(&fd, &an) < 1e-4);
        }
    }

    #[test]
    fn kink_sample_gives_one_sided_derivative() {
        // Sample orthogonal to the single first-layer weight: gate is off.
        let w = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let s = LayeredNet::new(vec![w]).unwrap();
        let t = LayeredNet::new(vec![DMatrix::from_column_slice(2, 1, &[0.0, 1.0])]).unwrap();
        let x = SampleBatch::from_rows(&[vec![0.0, 1.0]], InputDistribution::Gaussian).unwrap();
        let g = gradient_inflow(&s, &t, &x).unwrap();
        assert_eq!(g[0][(1, 0)], 0.0);
        let h = 1e-6;
        let base = layered_loss(&s, &t, &x, None).unwrap();
        let left = layered_loss(&s.with_weight(0, 1, 0, -h), &t, &x, None).unwrap();
        let right = layered_loss(&s.with_weight(0, 1, 0, h), &t, &x, None).unwrap();
        assert!(((base - left) / h).abs() < 1e-12);
        assert!(((right - base) / h + 1.0).abs() < 1e-5);
    }
}
