//! Dense layers with hand-written backward passes and the parameter
//! flattening shared by the optimizer, the checkpoint format and the
//! gradient checks.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

/// Anything holding learnable tensors. Visitation order is the canonical
/// parameter order used by flat vectors and checkpoints.
pub trait Params {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, d| n += d.len());
        n
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit("", &mut |_, _, d| out.extend_from_slice(d));
        out
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        self.visit_mut("", &mut |_, d| {
            d.copy_from_slice(&flat[at..at + d.len()]);
            at += d.len();
        });
        assert_eq!(at, flat.len(), "flat parameter length mismatch");
    }

    /// Names and flat offsets of every tensor, in visitation order.
    fn layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        let mut at = 0;
        self.visit("", &mut |name, shape, d| {
            out.push((name.to_string(), shape.to_vec(), at));
            at += d.len();
        });
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn visit2(
    prefix: &str,
    name: &str,
    a: &Array2<f64>,
    f: &mut dyn FnMut(&str, &[usize], &[f64]),
) {
    f(
        &join(prefix, name),
        a.shape(),
        a.as_slice().expect("parameters are contiguous"),
    );
}

pub(crate) fn visit1(
    prefix: &str,
    name: &str,
    a: &Array1<f64>,
    f: &mut dyn FnMut(&str, &[usize], &[f64]),
) {
    f(
        &join(prefix, name),
        a.shape(),
        a.as_slice().expect("parameters are contiguous"),
    );
}

/// Affine map `y = x W + b` with `W` stored as (in, out).
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    /// Uniform(-1/sqrt(in), 1/sqrt(in)) weights, zero bias.
    pub fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        Linear {
            weight: Array2::from_shape_fn((input, output), |_| dist.sample(rng)),
            bias: Array1::zeros(output),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn zeros_like(&self) -> Self {
        Linear::zeros(self.in_dim(), self.out_dim())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn forward_vec(&self, x: ArrayView1<f64>) -> Array1<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns dL/dx.
    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        grad: &mut Linear,
    ) -> Array2<f64> {
        grad.weight += &x.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }

    pub fn backward_vec(
        &self,
        x: ArrayView1<f64>,
        dy: ArrayView1<f64>,
        grad: &mut Linear,
    ) -> Array1<f64> {
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                grad.weight.row_mut(i).scaled_add(xi, &dy);
            }
        }
        grad.bias += &dy;
        self.weight.dot(&dy)
    }
}

impl Params for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit2(prefix, "weight", &self.weight, f);
        visit1(prefix, "bias", &self.bias, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "weight"), self.weight.as_slice_mut().unwrap());
        f(&join(prefix, "bias"), self.bias.as_slice_mut().unwrap());
    }
}

/// Numerically stable in-place softmax of a slice.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn l2_norm(x: ArrayView1<f64>) -> f64 {
    x.dot(&x).sqrt()
}

/// Backward of `u = x / |x|`: returns dL/dx given dL/du, u and |x|.
pub fn normalize_backward(u: ArrayView1<f64>, norm: f64, du: ArrayView1<f64>) -> Array1<f64> {
    let proj = u.dot(&du);
    (&du - &(&u * proj)) / norm
}
