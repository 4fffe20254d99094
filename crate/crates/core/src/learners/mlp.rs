//! Multilayer perceptron with tanh hidden layers, a linear output layer and
//! exact reverse-mode gradients.
//!
//! Parameters live in one flat vector. Layer `l` stores its weight matrix
//! `in x out` row-major followed by its `out` biases, so the parameter count is
//! `sum((in + 1) * out)`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MlpError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("an mlp needs at least an input and an output size, all >= 1")]
    BadLayers,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    pub params: Vec<f64>,
}

/// Activations saved by a batched forward pass, input first.
pub struct MlpCache {
    acts: Vec<Array2<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().unwrap()
    }
}

/// Hidden activation. `(e^2x - 1) / (e^2x + 1)` is several times cheaper
/// than libm's `tanh` and within a few ulps in absolute terms.
fn tanh(x: f64) -> f64 {
    if x.abs() > 20.0 {
        return x.signum();
    }
    let e = (2.0 * x).exp();
    (e - 1.0) / (e + 1.0)
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Result<Self, MlpError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(MlpError::BadLayers);
        }
        Ok(Mlp { sizes: sizes.to_vec(), params: vec![0.0; param_count(sizes)] })
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self, MlpError> {
        let mut net = Mlp::zeros(sizes)?;
        let mut off = 0;
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let n = (w[0] + 1) * w[1];
            for p in &mut net.params[off..off + n] {
                *p = rng.random_range(-bound..bound);
            }
            off += n;
        }
        Ok(net)
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self, MlpError> {
        let mut net = Mlp::zeros(sizes)?;
        if params.len() != net.params.len() {
            return Err(MlpError::ShapeMismatch { expected: net.params.len(), got: params.len() });
        }
        net.params = params;
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut off = 0;
        self.sizes.windows(2).map(move |w| {
            let start = off;
            off += (w[0] + 1) * w[1];
            (start, w[0], w[1])
        })
    }

    fn weights(&self, off: usize, i: usize, o: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let w = ArrayView2::from_shape((i, o), &self.params[off..off + i * o]).unwrap();
        let b = ArrayView1::from(&self.params[off + i * o..off + (i + 1) * o]);
        (w, b)
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, MlpError> {
        if input.len() != self.input_dim() {
            return Err(MlpError::ShapeMismatch { expected: self.input_dim(), got: input.len() });
        }
        let x = ArrayView2::from_shape((1, input.len()), input).unwrap();
        Ok(self.forward_batch(x).output().row(0).to_vec())
    }

    /// Batched forward pass; rows are samples.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> MlpCache {
        assert_eq!(x.ncols(), self.input_dim(), "mlp input width");
        let n_layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(x.to_owned());
        for (l, (off, i, o)) in self.layers().enumerate() {
            let (w, b) = self.weights(off, i, o);
            let mut z = acts[l].dot(&w);
            z += &b;
            if l + 1 < n_layers {
                z.mapv_inplace(tanh);
            }
            acts.push(z);
        }
        MlpCache { acts }
    }

    /// Backpropagates `upstream = dL/d(output)` through a cached pass.
    ///
    /// When `grad` is given, parameter gradients are accumulated into it.
    /// Returns `dL/d(input)` when `want_input` is set.
    pub fn backward(
        &self,
        cache: &MlpCache,
        upstream: ArrayView2<f64>,
        mut grad: Option<&mut [f64]>,
        want_input: bool,
    ) -> Option<Array2<f64>> {
        let layers: Vec<_> = self.layers().collect();
        let mut delta = upstream.to_owned();
        for (l, &(off, i, o)) in layers.iter().enumerate().rev() {
            let a_prev = &cache.acts[l];
            if let Some(g) = grad.as_deref_mut() {
                let (gw, gb) = g[off..off + (i + 1) * o].split_at_mut(i * o);
                let mut gw = ArrayViewMut2::from_shape((i, o), gw).unwrap();
                general_mat_mul(1.0, &a_prev.t(), &delta, 1.0, &mut gw);
                let mut gb = ArrayViewMut1::from(gb);
                gb += &delta.sum_axis(Axis(0));
            }
            if l == 0 && !want_input {
                return None;
            }
            let (w, _) = self.weights(off, i, o);
            let mut d_prev = delta.dot(&w.t());
            if l > 0 {
                // tanh' = 1 - a^2
                ndarray::Zip::from(&mut d_prev).and(a_prev).for_each(|d, &a| *d *= 1.0 - a * a);
            }
            delta = d_prev;
        }
        Some(delta)
    }

    /// Gradient of `output . upstream` with respect to every parameter.
    pub fn gradient(&self, input: &[f64], upstream: &[f64]) -> Result<Vec<f64>, MlpError> {
        if input.len() != self.input_dim() {
            return Err(MlpError::ShapeMismatch { expected: self.input_dim(), got: input.len() });
        }
        if upstream.len() != self.output_dim() {
            return Err(MlpError::ShapeMismatch { expected: self.output_dim(), got: upstream.len() });
        }
        let x = ArrayView2::from_shape((1, input.len()), input).unwrap();
        let up = ArrayView2::from_shape((1, upstream.len()), upstream).unwrap();
        let cache = self.forward_batch(x);
        let mut g = vec![0.0; self.param_count()];
        self.backward(&cache, up, Some(&mut g), false);
        Ok(g)
    }

    /// A single linear layer computing the identity map.
    pub fn identity(dim: usize) -> Self {
        let mut net = Mlp::zeros(&[dim, dim]).unwrap();
        for k in 0..dim {
            net.params[k * dim + k] = 1.0;
        }
        net
    }
}

/// Stacks equal-length rows into a matrix.
pub fn rows_to_matrix(rows: &[&[f64]]) -> Array2<f64> {
    let cols = rows.first().map_or(0, |r| r.len());
    let mut m = Array2::zeros((rows.len(), cols));
    for (mut dst, src) in m.rows_mut().into_iter().zip(rows) {
        dst.assign(&ArrayView1::from(*src));
    }
    m
}

pub fn column(v: Vec<f64>) -> Array1<f64> {
    Array1::from(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    /// Independent scalar forward pass over the same flat layout.
    fn naive_forward(sizes: &[usize], p: &[f64], x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let mut off = 0;
        for (l, w) in sizes.windows(2).enumerate() {
            let (i, o) = (w[0], w[1]);
            let mut z = vec![0.0; o];
            for (j, zj) in z.iter_mut().enumerate() {
                let mut s = p[off + i * o + j];
                for (k, ak) in a.iter().enumerate() {
                    s += ak * p[off + k * o + j];
                }
                *zj = if l + 2 < sizes.len() { s.tanh() } else { s };
            }
            off += (i + 1) * o;
            a = z;
        }
        a
    }

    #[test]
    fn param_count_formula() {
        let net = Mlp::zeros(&[3, 5, 2]).unwrap();
        assert_eq!(net.param_count(), 4 * 5 + 6 * 2);
        assert_eq!(Mlp::zeros(&[3]), Err(MlpError::BadLayers));
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let net = Mlp::zeros(&[4, 8, 3]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_layer() {
        let net = Mlp::identity(3);
        assert_eq!(net.forward(&[0.25, -7.0, 3.5]).unwrap(), vec![0.25, -7.0, 3.5]);
    }

    #[test]
    fn shape_mismatch() {
        let net = Mlp::zeros(&[2, 2]).unwrap();
        assert_eq!(net.forward(&[1.0]), Err(MlpError::ShapeMismatch { expected: 2, got: 1 }));
        assert_eq!(net.gradient(&[1.0, 2.0], &[1.0]), Err(MlpError::ShapeMismatch { expected: 2, got: 1 }));
    }

    #[test]
    fn forward_matches_naive_recomputation() {
        let mut rng = seed::rng(&[1]);
        for sizes in [vec![3, 7, 2], vec![5, 4, 4, 1], vec![2, 3]] {
            let net = Mlp::init(&sizes, &mut rng).unwrap();
            for _ in 0..10 {
                let x: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
                let got = net.forward(&x).unwrap();
                let want = naive_forward(&sizes, &net.params, &x);
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() <= 1e-12 * (1.0 + w.abs()));
                }
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = seed::rng(&[2]);
        let h = 1e-5;
        for trial in 0..20 {
            let sizes = [3, 6, 5, 2];
            let net = Mlp::init(&sizes, &mut rng).unwrap();
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
            let up: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = net.gradient(&x, &up).unwrap();
            let f = |p: &[f64]| -> f64 {
                naive_forward(&sizes, p, &x).iter().zip(&up).map(|(a, b)| a * b).sum()
            };
            let mut p = net.params.clone();
            let mut max_rel = 0.0f64;
            for k in 0..p.len() {
                let orig = p[k];
                p[k] = orig + h;
                let fp = f(&p);
                p[k] = orig - h;
                let fm = f(&p);
                p[k] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let rel = (fd - g[k]).abs() / (fd.abs() + g[k].abs()).max(1e-7);
                max_rel = max_rel.max(rel);
            }
            assert!(max_rel <= 1e-6, "trial {trial}: rel err {max_rel}");
        }
    }

    #[test]
    fn zero_upstream_and_linearity() {
        let mut rng = seed::rng(&[3]);
        let net = Mlp::init(&[4, 5, 3], &mut rng).unwrap();
        let x = [0.1, -0.2, 0.3, 0.9];
        assert!(net.gradient(&x, &[0.0; 3]).unwrap().iter().all(|g| *g == 0.0));
        let g1 = net.gradient(&x, &[0.5, -1.0, 2.0]).unwrap();
        let g3 = net.gradient(&x, &[1.5, -3.0, 6.0]).unwrap();
        for (a, b) in g1.iter().zip(&g3) {
            assert!((3.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn input_gradient_matches_differences() {
        let mut rng = seed::rng(&[4]);
        let net = Mlp::init(&[3, 8, 2], &mut rng).unwrap();
        let x = vec![0.3, -0.4, 0.8];
        let up = [0.7, -1.3];
        let cache = net.forward_batch(ArrayView2::from_shape((1, 3), &x).unwrap());
        let dx = net.backward(&cache, ArrayView2::from_shape((1, 2), &up).unwrap(), None, true).unwrap();
        for k in 0..3 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += 1e-5;
            xm[k] -= 1e-5;
            let f = |v: &[f64]| net.forward(v).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();
            let fd = (f(&xp) - f(&xm)) / 2e-5;
            assert!((fd - dx[[0, k]]).abs() < 1e-8);
        }
    }
}
