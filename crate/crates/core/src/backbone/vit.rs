//! A frozen pre-norm vision transformer in single precision.

use half::{bf16, f16};
use ndarray::{s, Array1, Array2, Array3, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use safetensors::{Dtype, SafeTensors};

use super::BackboneConfig;
use crate::error::{Error, Result};

/// Dense layer stored input-major, `y = x W + b`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Dense {
    fn random<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f32).sqrt();
        Dense {
            weight: Array2::from_shape_fn((input, output), |_| rng.gen_range(-bound..bound)),
            bias: Array1::zeros(output),
        }
    }

    fn apply(&self, x: ArrayView2<f32>) -> Array2<f32> {
        x.dot(&self.weight) + &self.bias
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub weight: Array1<f32>,
    pub bias: Array1<f32>,
    pub eps: f32,
}

impl LayerNorm {
    fn identity(dim: usize, eps: f32) -> Self {
        LayerNorm {
            weight: Array1::ones(dim),
            bias: Array1::zeros(dim),
            eps,
        }
    }

    fn apply(&self, x: ArrayView2<f32>) -> Array2<f32> {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            let n = row.len() as f32;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
            let inv = 1.0 / (var + self.eps).sqrt();
            for ((v, w), b) in row.iter_mut().zip(&self.weight).zip(&self.bias) {
                *v = (*v - mean) * inv * w + b;
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub qkv: Dense,
    pub proj: Dense,
    pub norm2: LayerNorm,
    pub fc1: Dense,
    pub fc2: Dense,
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x / std::f32::consts::SQRT_2))
}

impl Block {
    fn apply(&self, x: &Array2<f32>, heads: usize) -> Array2<f32> {
        let (t, d) = x.dim();
        let dh = d / heads;
        let qkv = self.qkv.apply(self.norm1.apply(x.view()).view());
        let scale = 1.0 / (dh as f32).sqrt();
        let mut mixed = Array2::<f32>::zeros((t, d));
        for h in 0..heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut scores = q.dot(&k.t()) * scale;
            for mut row in scores.rows_mut() {
                let m = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
                row.mapv_inplace(|v| (v - m).exp());
                let z = row.sum();
                row /= z;
            }
            mixed
                .slice_mut(s![.., h * dh..(h + 1) * dh])
                .assign(&scores.dot(&v));
        }
        let x = x + &self.proj.apply(mixed.view());
        let mut hidden = self.fc1.apply(self.norm2.apply(x.view()).view());
        hidden.mapv_inplace(gelu);
        &x + &self.fc2.apply(hidden.view())
    }
}

#[derive(Clone, Debug)]
pub struct VisionTransformer {
    /// Patch projection, `(3 * p * p, D)`, patch vectors flattened as
    /// channel, row, column.
    pub patch: Dense,
    pub cls_token: Array1<f32>,
    pub pos_embed: Array2<f32>,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub heads: usize,
    pub patch_size: usize,
}

fn decode(dtype: Dtype, data: &[u8], name: &str) -> Result<Vec<f32>> {
    let out = match dtype {
        Dtype::F32 => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Dtype::F64 => data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")) as f32)
            .collect(),
        Dtype::F16 => data
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        Dtype::BF16 => data
            .chunks_exact(2)
            .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        other => {
            return Err(Error::Weights(format!(
                "{name}: unsupported dtype {other:?}"
            )))
        }
    };
    Ok(out)
}

struct WeightFile<'a> {
    st: SafeTensors<'a>,
}

impl WeightFile<'_> {
    fn get(&self, name: &str, want: &[usize]) -> Result<Vec<f32>> {
        let view = self
            .st
            .tensor(name)
            .map_err(|_| Error::Weights(format!("missing tensor {name}")))?;
        if view.shape() != want {
            return Err(Error::Shape(format!(
                "{name}: weights have shape {:?}, config implies {want:?}",
                view.shape()
            )));
        }
        decode(view.dtype(), view.data(), name)
    }

    /// Torch linear weights are `(out, in)`; they are stored transposed.
    fn linear(&self, prefix: &str, input: usize, output: usize) -> Result<Dense> {
        let w = self.get(&format!("{prefix}.weight"), &[output, input])?;
        let b = self.get(&format!("{prefix}.bias"), &[output])?;
        let weight = Array2::from_shape_vec((output, input), w)
            .expect("checked shape")
            .reversed_axes();
        Ok(Dense {
            weight: weight.as_standard_layout().to_owned(),
            bias: Array1::from(b),
        })
    }

    fn norm(&self, prefix: &str, dim: usize, eps: f32) -> Result<LayerNorm> {
        Ok(LayerNorm {
            weight: Array1::from(self.get(&format!("{prefix}.weight"), &[dim])?),
            bias: Array1::from(self.get(&format!("{prefix}.bias"), &[dim])?),
            eps,
        })
    }
}

impl VisionTransformer {
    pub fn random<R: Rng>(config: &BackboneConfig, rng: &mut R) -> Self {
        let (d, p) = (config.dim, config.patch_size as usize);
        let small = Normal::new(0.0f32, 0.02).expect("valid std");
        let eps = config.layer_norm_eps;
        let patch = Dense::random(3 * p * p, d, rng);
        let cls_token = Array1::from_shape_fn(d, |_| small.sample(rng));
        let pos_embed = Array2::from_shape_fn((config.num_tokens(), d), |_| small.sample(rng));
        let blocks = (0..config.depth)
            .map(|_| Block {
                norm1: LayerNorm::identity(d, eps),
                qkv: Dense::random(d, 3 * d, rng),
                proj: Dense::random(d, d, rng),
                norm2: LayerNorm::identity(d, eps),
                fc1: Dense::random(d, config.mlp_ratio * d, rng),
                fc2: Dense::random(config.mlp_ratio * d, d, rng),
            })
            .collect();
        VisionTransformer {
            patch,
            cls_token,
            pos_embed,
            blocks,
            norm: LayerNorm::identity(d, eps),
            heads: config.heads,
            patch_size: p,
        }
    }

    /// Loads timm parameter names (`patch_embed.proj.weight`,
    /// `blocks.0.attn.qkv.weight`, ...).
    pub fn from_safetensors(bytes: &[u8], config: &BackboneConfig) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Weights(e.to_string()))?;
        let extra = format!("blocks.{}.", config.depth);
        if st.names().iter().any(|n| n.starts_with(&extra)) {
            return Err(Error::Shape(format!(
                "weight file has more than the configured {} blocks",
                config.depth
            )));
        }
        let w = WeightFile { st };
        let (d, p, eps) = (
            config.dim,
            config.patch_size as usize,
            config.layer_norm_eps,
        );
        let hidden = config.mlp_ratio * d;

        let patch_w = w.get("patch_embed.proj.weight", &[d, 3, p, p])?;
        let patch_w = Array2::from_shape_vec((d, 3 * p * p), patch_w)
            .expect("checked shape")
            .reversed_axes();
        let patch = Dense {
            weight: patch_w.as_standard_layout().to_owned(),
            bias: Array1::from(w.get("patch_embed.proj.bias", &[d])?),
        };
        let cls_token = Array1::from(w.get("cls_token", &[1, 1, d])?);
        let tokens = config.num_tokens();
        let pos = w.get("pos_embed", &[1, tokens, d])?;
        let pos_embed = Array2::from_shape_vec((tokens, d), pos).expect("checked shape");
        let blocks = (0..config.depth)
            .map(|i| {
                Ok(Block {
                    norm1: w.norm(&format!("blocks.{i}.norm1"), d, eps)?,
                    qkv: w.linear(&format!("blocks.{i}.attn.qkv"), d, 3 * d)?,
                    proj: w.linear(&format!("blocks.{i}.attn.proj"), d, d)?,
                    norm2: w.norm(&format!("blocks.{i}.norm2"), d, eps)?,
                    fc1: w.linear(&format!("blocks.{i}.mlp.fc1"), d, hidden)?,
                    fc2: w.linear(&format!("blocks.{i}.mlp.fc2"), hidden, d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(VisionTransformer {
            patch,
            cls_token,
            pos_embed,
            blocks,
            norm: w.norm("norm", d, eps)?,
            heads: config.heads,
            patch_size: p,
        })
    }

    /// Encodes a normalized `(3, S, S)` image into `(1 + P, D)` tokens.
    pub fn encode(&self, image: &Array3<f32>) -> Array2<f32> {
        let (_, height, width) = image.dim();
        let p = self.patch_size;
        let (gh, gw) = (height / p, width / p);
        let mut patches = Array2::<f32>::zeros((gh * gw, 3 * p * p));
        for gy in 0..gh {
            for gx in 0..gw {
                let block = image.slice(s![.., gy * p..(gy + 1) * p, gx * p..(gx + 1) * p]);
                for (dst, src) in patches.row_mut(gy * gw + gx).iter_mut().zip(block.iter()) {
                    *dst = *src;
                }
            }
        }
        let embedded = self.patch.apply(patches.view());
        let mut x = Array2::<f32>::zeros((1 + gh * gw, self.cls_token.len()));
        x.row_mut(0).assign(&self.cls_token);
        x.slice_mut(s![1.., ..]).assign(&embedded);
        x += &self.pos_embed;
        for block in &self.blocks {
            x = block.apply(&x, self.heads);
        }
        self.norm.apply(x.view())
    }
}
