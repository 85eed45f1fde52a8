//! One-layer multi-head attention with exposed per-head weight maps.
//!
//! A single parameter set serves self-attention, cross-attention and the
//! query-key swapped pair. Backward accepts gradients on the output tokens,
//! on the post-softmax weights and on the pre-softmax logits, which is what
//! the attention-level transport regularizer needs.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{softmax_in_place, Linear, Params};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub model_dim: usize,
}

impl AttentionConfig {
    pub fn new(num_heads: usize, model_dim: usize) -> Result<Self> {
        if num_heads == 0 || model_dim == 0 || model_dim % num_heads != 0 {
            return Err(Error::Config(format!(
                "model dim {model_dim} must be a positive multiple of num_heads {num_heads}"
            )));
        }
        Ok(AttentionConfig {
            num_heads,
            model_dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl AttentionParams {
    pub fn init<R: Rng>(dim: usize, rng: &mut R) -> Self {
        AttentionParams {
            query: Linear::init(dim, dim, rng),
            key: Linear::init(dim, dim, rng),
            value: Linear::init(dim, dim, rng),
            output: Linear::init(dim, dim, rng),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        AttentionParams {
            query: Linear::zeros(dim, dim),
            key: Linear::zeros(dim, dim),
            value: Linear::zeros(dim, dim),
            output: Linear::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.query.in_dim()
    }
}

impl Params for AttentionParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.query.visit(&crate::nn::join(prefix, "query"), f);
        self.key.visit(&crate::nn::join(prefix, "key"), f);
        self.value.visit(&crate::nn::join(prefix, "value"), f);
        self.output.visit(&crate::nn::join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.query.visit_mut(&crate::nn::join(prefix, "query"), f);
        self.key.visit_mut(&crate::nn::join(prefix, "key"), f);
        self.value.visit_mut(&crate::nn::join(prefix, "value"), f);
        self.output.visit_mut(&crate::nn::join(prefix, "output"), f);
    }
}

#[derive(Clone, Debug)]
pub struct AttentionResult {
    /// Attended tokens, (T_q, D).
    pub output: Array2<f64>,
    /// Post-softmax weights, (heads, T_q, T_k).
    pub weights: Array3<f64>,
    /// Scaled pre-softmax scores QK^T / sqrt(d_k), (heads, T_q, T_k).
    pub logits: Array3<f64>,
}

impl AttentionResult {
    /// Row 0 of the output: the attended class token.
    pub fn class_token(&self) -> ndarray::ArrayView1<'_, f64> {
        self.output.row(0)
    }

    pub fn head_mean_weights(&self) -> Array2<f64> {
        self.weights.mean_axis(Axis(0)).expect("at least one head")
    }
}

/// Intermediates kept from the forward pass for backward.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    query_tokens: Array2<f64>,
    kv_tokens: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    context: Array2<f64>,
}

fn check_dims(
    query_tokens: ArrayView2<f64>,
    kv_tokens: ArrayView2<f64>,
    params: &AttentionParams,
    config: &AttentionConfig,
) -> Result<()> {
    let d = config.model_dim;
    if params.dim() != d {
        return Err(Error::Shape(format!(
            "attention params have width {}, config says {d}",
            params.dim()
        )));
    }
    if query_tokens.ncols() != d || kv_tokens.ncols() != d {
        return Err(Error::Shape(format!(
            "token widths {} / {} do not match model dim {d}",
            query_tokens.ncols(),
            kv_tokens.ncols()
        )));
    }
    if query_tokens.nrows() == 0 || kv_tokens.nrows() == 0 {
        return Err(Error::Shape("empty token sequence".into()));
    }
    Ok(())
}

pub fn forward_traced(
    query_tokens: ArrayView2<f64>,
    kv_tokens: ArrayView2<f64>,
    params: &AttentionParams,
    config: &AttentionConfig,
) -> Result<(AttentionResult, AttentionTrace)> {
    check_dims(query_tokens, kv_tokens, params, config)?;
    let heads = config.num_heads;
    let dk = config.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let (tq, tk) = (query_tokens.nrows(), kv_tokens.nrows());

    let q = params.query.forward(query_tokens);
    let k = params.key.forward(kv_tokens);
    let v = params.value.forward(kv_tokens);

    let mut logits = Array3::zeros((heads, tq, tk));
    let mut weights = Array3::zeros((heads, tq, tk));
    let mut context = Array2::zeros((tq, config.model_dim));
    for h in 0..heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        let mut w = scores.clone();
        for mut row in w.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("row-major"));
        }
        context.slice_mut(cols).assign(&w.dot(&v.slice(cols)));
        logits.index_axis_mut(Axis(0), h).assign(&scores);
        weights.index_axis_mut(Axis(0), h).assign(&w);
    }
    let output = params.output.forward(context.view());

    Ok((
        AttentionResult {
            output,
            weights,
            logits,
        },
        AttentionTrace {
            query_tokens: query_tokens.to_owned(),
            kv_tokens: kv_tokens.to_owned(),
            q,
            k,
            v,
            context,
        },
    ))
}

/// softmax(QK^T / sqrt(d_k)) V per head, heads concatenated, then the
/// output projection.
pub fn multi_head_attention(
    query_tokens: ArrayView2<f64>,
    kv_tokens: ArrayView2<f64>,
    params: &AttentionParams,
    config: &AttentionConfig,
) -> Result<AttentionResult> {
    forward_traced(query_tokens, kv_tokens, params, config).map(|(r, _)| r)
}

pub fn self_attend(
    tokens: ArrayView2<f64>,
    params: &AttentionParams,
    config: &AttentionConfig,
) -> Result<AttentionResult> {
    multi_head_attention(tokens, tokens, params, config)
}

/// Cross-attention with query-key swapping. The first result queries with
/// `tokens_1` and attends over `tokens_2`; the second is the reverse.
pub fn cross_attend_swapped(
    tokens_1: ArrayView2<f64>,
    tokens_2: ArrayView2<f64>,
    params: &AttentionParams,
    config: &AttentionConfig,
) -> Result<(AttentionResult, AttentionResult)> {
    let first = multi_head_attention(tokens_1, tokens_2, params, config)?;
    let second = multi_head_attention(tokens_2, tokens_1, params, config)?;
    Ok((first, second))
}

/// Upstream gradients for one attention call. Any of them may be absent.
#[derive(Default)]
pub struct AttentionGrads<'a> {
    pub output: Option<ArrayView2<'a, f64>>,
    pub weights: Option<&'a Array3<f64>>,
    pub logits: Option<&'a Array3<f64>>,
}

/// Accumulates dL/dparams into `grad`. Token inputs are frozen backbone
/// outputs, so no input gradient is produced.
pub fn backward(
    params: &AttentionParams,
    config: &AttentionConfig,
    result: &AttentionResult,
    trace: &AttentionTrace,
    upstream: AttentionGrads<'_>,
    grad: &mut AttentionParams,
) {
    let heads = config.num_heads;
    let dk = config.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let (tq, tk) = (trace.q.nrows(), trace.k.nrows());
    let d = config.model_dim;

    let d_context = match upstream.output {
        Some(d_out) => params
            .output
            .backward(trace.context.view(), d_out, &mut grad.output),
        None => Array2::zeros((tq, d)),
    };

    let mut dq = Array2::zeros((tq, d));
    let mut dk_mat = Array2::zeros((tk, d));
    let mut dv = Array2::zeros((tk, d));
    for h in 0..heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let w = result.weights.index_axis(Axis(0), h);
        let dctx = d_context.slice(cols);

        let mut dw = dctx.dot(&trace.v.slice(cols).t());
        if let Some(extra) = upstream.weights {
            dw += &extra.index_axis(Axis(0), h);
        }
        dv.slice_mut(cols).assign(&w.t().dot(&dctx));

        let mut ds = Array2::zeros((tq, tk));
        for i in 0..tq {
            let wr = w.row(i);
            let dwr = dw.row(i);
            let inner = wr.dot(&dwr);
            for j in 0..tk {
                ds[[i, j]] = wr[j] * (dwr[j] - inner);
            }
        }
        if let Some(extra) = upstream.logits {
            ds += &extra.index_axis(Axis(0), h);
        }
        ds *= scale;
        dq.slice_mut(cols).assign(&ds.dot(&trace.k.slice(cols)));
        dk_mat
            .slice_mut(cols)
            .assign(&ds.t().dot(&trace.q.slice(cols)));
    }

    params
        .query
        .backward(trace.query_tokens.view(), dq.view(), &mut grad.query);
    params
        .key
        .backward(trace.kv_tokens.view(), dk_mat.view(), &mut grad.key);
    params
        .value
        .backward(trace.kv_tokens.view(), dv.view(), &mut grad.value);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed_rng;
    use ndarray::array;
    use rand_distr::{Distribution, StandardNormal};

    fn random_tokens(t: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = keyed_rng(seed, "tokens", &[]);
        Array2::from_shape_fn((t, d), |_| StandardNormal.sample(&mut rng))
    }

    fn identity_linear(d: usize) -> Linear {
        Linear {
            weight: Array2::eye(d),
            bias: ndarray::Array1::zeros(d),
        }
    }

    #[test]
    fn rejects_bad_config() {
        assert!(AttentionConfig::new(3, 64).is_err());
        assert!(AttentionConfig::new(0, 64).is_err());
        assert_eq!(AttentionConfig::new(4, 64).unwrap().head_dim(), 16);
    }

    #[test]
    fn singleton_weight_is_one() {
        let cfg = AttentionConfig::new(2, 4).unwrap();
        let params = AttentionParams::init(4, &mut keyed_rng(1, "p", &[]));
        let q = random_tokens(1, 4, 2);
        let kv = random_tokens(1, 4, 3);
        let r = multi_head_attention(q.view(), kv.view(), &params, &cfg).unwrap();
        assert!(r.weights.iter().all(|&w| w == 1.0));
        let projected = params
            .output
            .forward(params.value.forward(kv.view()).view());
        for (a, b) in r.output.iter().zip(projected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_logits_give_uniform_rows() {
        let cfg = AttentionConfig::new(1, 3).unwrap();
        let mut params = AttentionParams::init(3, &mut keyed_rng(4, "p", &[]));
        params.query = Linear::zeros(3, 3);
        let q = random_tokens(2, 3, 5);
        let kv = random_tokens(4, 3, 6);
        let r = multi_head_attention(q.view(), kv.view(), &params, &cfg).unwrap();
        for &w in r.weights.iter() {
            assert!((w - 0.25).abs() < 1e-15);
        }
        let mean_value = params.value.forward(kv.view()).mean_axis(Axis(0)).unwrap();
        let expected = params.output.forward_vec(mean_value.view());
        for row in r.output.rows() {
            for (a, b) in row.iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_by_three_matches_scalar_recomputation() {
        // Single head, d = 2, identity Q/K/O projections and a hand-set V.
        let cfg = AttentionConfig::new(1, 2).unwrap();
        let params = AttentionParams {
            query: identity_linear(2),
            key: identity_linear(2),
            value: Linear {
                weight: array![[2.0, 0.0], [1.0, -1.0]],
                bias: array![0.0, 1.0],
            },
            output: identity_linear(2),
        };
        let q = array![[1.0, 0.0], [0.5, 2.0]];
        let kv = array![[1.0, 1.0], [0.0, -1.0], [2.0, 0.5]];
        let r = multi_head_attention(q.view(), kv.view(), &params, &cfg).unwrap();

        // Oracle: plain loops over scalars.
        let scale = 1.0 / 2f64.sqrt();
        let vals: Vec<[f64; 2]> = (0..3)
            .map(|j| {
                let (x0, x1) = (kv[[j, 0]], kv[[j, 1]]);
                [2.0 * x0 + 1.0 * x1, -x1 + 1.0]
            })
            .collect();
        for i in 0..2 {
            let logits: Vec<f64> = (0..3)
                .map(|j| (q[[i, 0]] * kv[[j, 0]] + q[[i, 1]] * kv[[j, 1]]) * scale)
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let w: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
            for j in 0..3 {
                assert!((r.weights[[0, i, j]] - w[j]).abs() < 1e-12);
                assert!((r.logits[[0, i, j]] - logits[j]).abs() < 1e-12);
            }
            for c in 0..2 {
                let out: f64 = (0..3).map(|j| w[j] * vals[j][c]).sum();
                assert!((r.output[[i, c]] - out).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn self_attend_is_mha_with_same_input() {
        let cfg = AttentionConfig::new(2, 8).unwrap();
        let params = AttentionParams::init(8, &mut keyed_rng(9, "p", &[]));
        let t = random_tokens(5, 8, 10);
        let a = self_attend(t.view(), &params, &cfg).unwrap();
        let b = multi_head_attention(t.view(), t.view(), &params, &cfg).unwrap();
        assert_eq!(a.output, b.output);
        assert_eq!(a.weights.shape(), &[2, 5, 5]);
    }

    #[test]
    fn swapping_arguments_swaps_results() {
        let cfg = AttentionConfig::new(2, 8).unwrap();
        let params = AttentionParams::init(8, &mut keyed_rng(11, "p", &[]));
        let t1 = random_tokens(5, 8, 12);
        let t2 = random_tokens(5, 8, 13);
        let (a1, a2) = cross_attend_swapped(t1.view(), t2.view(), &params, &cfg).unwrap();
        let (b1, b2) = cross_attend_swapped(t2.view(), t1.view(), &params, &cfg).unwrap();
        assert_eq!(a1.output, b2.output);
        assert_eq!(a2.output, b1.output);
        assert_eq!(a1.weights, b2.weights);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let cfg = AttentionConfig::new(2, 8).unwrap();
        let params = AttentionParams::init(8, &mut keyed_rng(1, "p", &[]));
        let t1 = random_tokens(3, 8, 1);
        let t2 = random_tokens(3, 6, 1);
        assert!(matches!(
            multi_head_attention(t1.view(), t2.view(), &params, &cfg),
            Err(Error::Shape(_))
        ));
    }
}
