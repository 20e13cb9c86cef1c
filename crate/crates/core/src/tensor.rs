//! Dense row-major `f64` tensors and the handful of exact kernels the fusion
//! engine is built from.
//!
//! There is no broadcasting: every shape mismatch is an error. Modes passed
//! to the n-mode products are zero-based.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: mode {mode} out of range for rank {rank}")]
    Mode { op: &'static str, mode: usize, rank: usize },
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense tensor of 64-bit reals in row-major order.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || len != data.len() {
            return Err(TensorError::InvalidShape { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    /// Panics on an invalid shape; for internal use where extents come from
    /// validated dims.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; len])
    }

    pub fn ones(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![1.0; len])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "vector must have at least one element");
        Self::from_parts(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for n in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[n] = strides[n + 1] * self.shape[n + 1];
        }
        strides
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(self.strides())
            .zip(&self.shape)
            .map(|((&i, s), &extent)| {
                assert!(i < extent, "index {i} out of bounds for extent {extent}");
                i * s
            })
            .sum()
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    fn expect_rank(&self, op: &'static str, expected: usize) -> Result<()> {
        if self.rank() != expected {
            return Err(TensorError::Rank {
                op,
                expected,
                shape: self.shape.clone(),
            });
        }
        Ok(())
    }
}

/// Elementwise product of two equal-shape tensors.
pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op: "hadamard",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_parts(a.shape.clone(), data))
}

/// `out[j] = Σ_i m[j,i] · x[i]`.
pub fn matvec(m: &Tensor, x: &Tensor) -> Result<Tensor> {
    m.expect_rank("matvec", 2)?;
    x.expect_rank("matvec", 1)?;
    if m.shape[1] != x.shape[0] {
        return Err(TensorError::ShapeMismatch {
            op: "matvec",
            left: m.shape.clone(),
            right: x.shape.clone(),
        });
    }
    let mut out = vec![0.0; m.shape[0]];
    matvec_into(&m.data, m.shape[1], &x.data, &mut out);
    Ok(Tensor::from_parts(vec![m.shape[0]], out))
}

/// `out[j,k] = a[j] · b[k]`.
pub fn outer(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank("outer", 1)?;
    b.expect_rank("outer", 1)?;
    let mut data = Vec::with_capacity(a.len() * b.len());
    for &x in &a.data {
        data.extend(b.data.iter().map(|&y| x * y));
    }
    Ok(Tensor::from_parts(vec![a.len(), b.len()], data))
}

/// Contract mode `mode` of `t` with the vector `z`; the result has rank one
/// lower (a rank-1 input collapses to a length-1 vector).
pub fn n_mode_product(t: &Tensor, z: &Tensor, mode: usize) -> Result<Tensor> {
    z.expect_rank("n_mode_product", 1)?;
    if mode >= t.rank() {
        return Err(TensorError::Mode {
            op: "n_mode_product",
            mode,
            rank: t.rank(),
        });
    }
    if t.shape[mode] != z.len() {
        return Err(TensorError::ShapeMismatch {
            op: "n_mode_product",
            left: t.shape.clone(),
            right: z.shape.clone(),
        });
    }
    let (outer_n, extent, inner_n) = split_at_mode(&t.shape, mode);
    let mut out = vec![0.0; outer_n * inner_n];
    for o in 0..outer_n {
        for (i, &zi) in z.data.iter().enumerate() {
            let src = &t.data[(o * extent + i) * inner_n..][..inner_n];
            let dst = &mut out[o * inner_n..][..inner_n];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s * zi;
            }
        }
    }
    let mut shape: Vec<usize> = t.shape.clone();
    shape.remove(mode);
    if shape.is_empty() {
        shape.push(1);
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Multiply mode `mode` of `t` by `w` (J × I_mode); the extent I_mode is
/// replaced with J.
pub fn n_mode_product_mat(t: &Tensor, w: &Tensor, mode: usize) -> Result<Tensor> {
    w.expect_rank("n_mode_product_mat", 2)?;
    if mode >= t.rank() {
        return Err(TensorError::Mode {
            op: "n_mode_product_mat",
            mode,
            rank: t.rank(),
        });
    }
    if t.shape[mode] != w.shape[1] {
        return Err(TensorError::ShapeMismatch {
            op: "n_mode_product_mat",
            left: t.shape.clone(),
            right: w.shape.clone(),
        });
    }
    let (outer_n, extent, inner_n) = split_at_mode(&t.shape, mode);
    let rows = w.shape[0];
    let mut out = vec![0.0; outer_n * rows * inner_n];
    for o in 0..outer_n {
        for j in 0..rows {
            let dst = &mut out[(o * rows + j) * inner_n..][..inner_n];
            for i in 0..extent {
                let wji = w.data[j * extent + i];
                let src = &t.data[(o * extent + i) * inner_n..][..inner_n];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s * wji;
                }
            }
        }
    }
    let mut shape = t.shape.clone();
    shape[mode] = rows;
    Ok(Tensor::from_parts(shape, out))
}

fn split_at_mode(shape: &[usize], mode: usize) -> (usize, usize, usize) {
    let outer_n = shape[..mode].iter().product();
    let inner_n = shape[mode + 1..].iter().product();
    (outer_n, shape[mode], inner_n)
}

// Slice kernels shared by the graph engine's hot loops.

pub(crate) fn matvec_into(m: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    for (row, o) in m.chunks_exact(cols).zip(out.iter_mut()) {
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// `out[i] += Σ_j m[j,i] · y[j]`.
pub(crate) fn matvec_t_acc(m: &[f64], cols: usize, y: &[f64], out: &mut [f64]) {
    for (row, &yj) in m.chunks_exact(cols).zip(y) {
        if yj == 0.0 {
            continue;
        }
        for (o, &a) in out.iter_mut().zip(row) {
            *o += a * yj;
        }
    }
}

/// `g[j,i] += a[j] · b[i]`.
pub(crate) fn outer_acc(a: &[f64], b: &[f64], g: &mut [f64]) {
    for (row, &aj) in g.chunks_exact_mut(b.len()).zip(a) {
        for (o, &bi) in row.iter_mut().zip(b) {
            *o += aj * bi;
        }
    }
}

pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

/// Unary activations available to branches, post-fusion layers and squashes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    LeakyRelu { slope: f64 },
    Selu,
    Sigmoid,
    Tanh,
}

impl Activation {
    /// The five candidates, in grid order.
    pub const ALL: [Activation; 5] = [
        Activation::Identity,
        Activation::LeakyRelu {
            slope: DEFAULT_LEAKY_SLOPE,
        },
        Activation::Selu,
        Activation::Sigmoid,
        Activation::Tanh,
    ];

    pub fn leaky_relu() -> Self {
        Activation::LeakyRelu {
            slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::LeakyRelu { .. } => "lrelu",
            Activation::Selu => "selu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "identity" => Activation::Identity,
            "lrelu" => Activation::leaky_relu(),
            "selu" => Activation::Selu,
            "sigmoid" => Activation::Sigmoid,
            "tanh" => Activation::Tanh,
            _ => return None,
        })
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Activation::Identity => x,
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Selu => {
                if x >= 0.0 {
                    SELU_LAMBDA * x
                } else {
                    SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// f'(x). Leaky ReLU at exactly zero returns the slope.
    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            Activation::Identity => 1.0,
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Selu => {
                if x >= 0.0 {
                    SELU_LAMBDA
                } else {
                    SELU_LAMBDA * SELU_ALPHA * x.exp()
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn apply_activation(kind: Activation, x: &Tensor) -> Tensor {
    match kind {
        Activation::Identity => x.clone(),
        _ => x.map(|v| kind.eval(v)),
    }
}

/// Elementwise `f'(x) · upstream`.
pub fn activation_grad(kind: Activation, x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if x.shape != upstream.shape {
        return Err(TensorError::ShapeMismatch {
            op: "activation_grad",
            left: x.shape.clone(),
            right: upstream.shape.clone(),
        });
    }
    let data = x
        .data
        .iter()
        .zip(&upstream.data)
        .map(|(&xi, &u)| kind.derivative(xi) * u)
        .collect();
    Ok(Tensor::from_parts(x.shape.clone(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let len = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn hadamard_examples() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![3.0, 4.0]);
        assert_eq!(hadamard(&a, &b).unwrap().data(), &[3.0, 8.0]);
        assert_eq!(hadamard(&a, &Tensor::ones(&[2])).unwrap(), a);
        let err = hadamard(&a, &Tensor::ones(&[3])).unwrap_err();
        assert!(err.to_string().contains("[2]") && err.to_string().contains("[3]"));
    }

    #[test]
    fn hadamard_matches_loop_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&[5], &mut rng);
        let b = random(&[5], &mut rng);
        let h = hadamard(&a, &b).unwrap();
        for i in 0..5 {
            assert_eq!(h.data()[i].to_bits(), (a.data()[i] * b.data()[i]).to_bits());
        }
        // commutative, exact
        assert_eq!(hadamard(&b, &a).unwrap(), h);
    }

    #[test]
    fn matvec_examples() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        assert_eq!(matvec(&Tensor::identity(3), &x).unwrap(), x);
        let m = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = matvec(&m, &Tensor::vector(vec![1.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0]);
        assert!(matvec(&m, &x).is_err());
    }

    #[test]
    fn matvec_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let m = random(&[4, 6], &mut rng);
            let x = random(&[6], &mut rng);
            let y = matvec(&m, &x).unwrap();
            for j in 0..4 {
                let mut s = 0.0;
                for i in 0..6 {
                    s += m.get(&[j, i]) * x.get(&[i]);
                }
                assert!(rel_err(y.get(&[j]), s) <= 1e-12);
            }
        }
    }

    #[test]
    fn outer_examples() {
        let o = outer(&Tensor::vector(vec![1.0, 2.0]), &Tensor::vector(vec![3.0, 4.0])).unwrap();
        assert_eq!(o.shape(), &[2, 2]);
        assert_eq!(o.data(), &[3.0, 4.0, 6.0, 8.0]);
        let a = Tensor::vector(vec![5.0, 6.0, 7.0]);
        let col = outer(&a, &Tensor::vector(vec![1.0])).unwrap();
        assert_eq!(col.shape(), &[3, 1]);
        assert_eq!(col.data(), a.data());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&[3], &mut rng);
        let b = random(&[5], &mut rng);
        let o = outer(&a, &b).unwrap();
        for j in 0..3 {
            for k in 0..5 {
                assert_eq!(o.get(&[j, k]), a.get(&[j]) * b.get(&[k]));
            }
        }
    }

    #[test]
    fn n_mode_examples() {
        let t = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = n_mode_product(&t, &Tensor::vector(vec![1.0, 0.0]), 0).unwrap();
        assert_eq!(r.data(), &[1.0, 2.0]);
        let r = n_mode_product(&t, &Tensor::vector(vec![1.0, 1.0]), 0).unwrap();
        assert_eq!(r.data(), &[4.0, 6.0]);
        assert!(matches!(
            n_mode_product(&t, &Tensor::vector(vec![1.0, 1.0]), 2),
            Err(TensorError::Mode { .. })
        ));
        assert!(n_mode_product(&t, &Tensor::vector(vec![1.0]), 1).is_err());
    }

    #[test]
    fn n_mode_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let t = random(&[3, 4, 2], &mut rng);
            let z = random(&[4], &mut rng);
            let r = n_mode_product(&t, &z, 1).unwrap();
            assert_eq!(r.shape(), &[3, 2]);
            for a in 0..3 {
                for c in 0..2 {
                    let mut s = 0.0;
                    for b in 0..4 {
                        s += t.get(&[a, b, c]) * z.get(&[b]);
                    }
                    assert!(rel_err(r.get(&[a, c]), s) <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn n_mode_equals_unfolding_matvec() {
        // mode-n unfolding: rows indexed by i_n, columns by the remaining
        // indices in row-major order; T ×_n z = z^T · unfold_n(T).
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for mode in 0..3 {
            let t = random(&[3, 4, 5], &mut rng);
            let extent = t.shape()[mode];
            let z = random(&[extent], &mut rng);
            let rest: Vec<usize> = (0..3).filter(|&m| m != mode).collect();
            let (e0, e1) = (t.shape()[rest[0]], t.shape()[rest[1]]);
            let mut unfolded_t = vec![0.0; e0 * e1 * extent];
            for a in 0..e0 {
                for b in 0..e1 {
                    for i in 0..extent {
                        let mut idx = [0; 3];
                        idx[mode] = i;
                        idx[rest[0]] = a;
                        idx[rest[1]] = b;
                        unfolded_t[(a * e1 + b) * extent + i] = t.get(&idx);
                    }
                }
            }
            let m = Tensor::matrix(e0 * e1, extent, unfolded_t).unwrap();
            let expect = matvec(&m, &z).unwrap();
            let got = n_mode_product(&t, &z, mode).unwrap();
            for (g, e) in got.data().iter().zip(expect.data()) {
                assert!(rel_err(*g, *e) <= 1e-12);
            }
        }
    }

    #[test]
    fn mode_products_commute() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let t = random(&[4, 3, 5], &mut rng);
            let a = random(&[4], &mut rng);
            let b = random(&[3], &mut rng);
            let first = n_mode_product(&n_mode_product(&t, &a, 0).unwrap(), &b, 0).unwrap();
            let second = n_mode_product(&n_mode_product(&t, &b, 1).unwrap(), &a, 0).unwrap();
            for (x, y) in first.data().iter().zip(second.data()) {
                assert!(rel_err(*x, *y) <= 1e-12);
            }
        }
    }

    #[test]
    fn n_mode_mat_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let t = random(&[2, 3, 4], &mut rng);
        assert_eq!(n_mode_product_mat(&t, &Tensor::identity(3), 1).unwrap(), t);

        let z = random(&[3], &mut rng);
        let row = Tensor::matrix(1, 3, z.data().to_vec()).unwrap();
        let via_mat = n_mode_product_mat(&t, &row, 1).unwrap();
        let via_vec = n_mode_product(&t, &z, 1).unwrap();
        assert_eq!(via_mat.shape(), &[2, 1, 4]);
        assert_eq!(via_mat.data(), via_vec.data());

        let w = random(&[5, 3], &mut rng);
        let r = n_mode_product_mat(&t, &w, 1).unwrap();
        assert_eq!(r.shape(), &[2, 5, 4]);
        for a in 0..2 {
            for j in 0..5 {
                for c in 0..4 {
                    let mut s = 0.0;
                    for i in 0..3 {
                        s += t.get(&[a, i, c]) * w.get(&[j, i]);
                    }
                    assert!(rel_err(r.get(&[a, j, c]), s) <= 1e-12);
                }
            }
        }
        assert!(n_mode_product_mat(&t, &w, 0).is_err());
    }

    #[test]
    fn activation_values() {
        assert_eq!(Activation::Sigmoid.eval(0.0), 0.5);
        assert_eq!(Activation::Tanh.eval(0.0), 0.0);
        assert_eq!(Activation::Selu.eval(1.0), 1.0507009873554805);
        assert_eq!(Activation::leaky_relu().eval(-2.0), -0.02);
        let x = Tensor::vector(vec![-1.5, 0.0, 2.25]);
        let id = apply_activation(Activation::Identity, &x);
        assert!(id.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn activation_grad_examples() {
        let x = Tensor::vector(vec![0.0, 3.0]);
        let u = Tensor::vector(vec![1.0, -2.0]);
        assert_eq!(activation_grad(Activation::Identity, &x, &u).unwrap(), u);
        let g = activation_grad(
            Activation::Sigmoid,
            &Tensor::vector(vec![0.0]),
            &Tensor::vector(vec![1.0]),
        )
        .unwrap();
        assert_eq!(g.data(), &[0.25]);
        assert_eq!(Activation::leaky_relu().derivative(0.0), DEFAULT_LEAKY_SLOPE);
    }

    #[test]
    fn activation_grad_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let h = 1e-6;
        for kind in Activation::ALL {
            for _ in 0..20 {
                let mut x: f64 = rng.random_range(-3.0..3.0);
                if x.abs() < 1e-3 {
                    x += 0.5;
                }
                let fd = (kind.eval(x + h) - kind.eval(x - h)) / (2.0 * h);
                assert!((kind.derivative(x) - fd).abs() <= 1e-6, "{kind} at {x}");
            }
        }
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![1.0]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        let t = Tensor::new(vec![2, 3, 4], vec![0.0; 24]).unwrap();
        assert_eq!(t.strides(), vec![12, 4, 1]);
        assert_eq!(t.offset(&[1, 2, 3]), 23);
    }
}
