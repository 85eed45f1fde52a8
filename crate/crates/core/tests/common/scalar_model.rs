//! Loop-by-loop recomputation of the training objective's cross-entropy
//! terms, written independently of the library's array code.

use ade::attention::AttentionParams;
use ade::embedding::{Embedder, Pair};
use ade::model::{AttentionMode, Model};
use ade::nn::Linear;

pub type Tokens = Vec<Vec<f64>>;

fn affine(x: &[f64], l: &Linear) -> Vec<f64> {
    let (n_in, n_out) = l.weight.dim();
    assert_eq!(x.len(), n_in);
    (0..n_out)
        .map(|o| l.bias[o] + (0..n_in).map(|i| x[i] * l.weight[[i, o]]).sum::<f64>())
        .collect()
}

/// Output row 0 of attention with `query` as queries and `kv` as keys and
/// values.
pub fn attention_row0(query: &Tokens, kv: &Tokens, p: &AttentionParams, heads: usize) -> Vec<f64> {
    let d = query[0].len();
    let dk = d / heads;
    let q0 = affine(&query[0], &p.query);
    let keys: Vec<Vec<f64>> = kv.iter().map(|t| affine(t, &p.key)).collect();
    let values: Vec<Vec<f64>> = kv.iter().map(|t| affine(t, &p.value)).collect();
    let mut context = vec![0.0; d];
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        let scores: Vec<f64> = keys
            .iter()
            .map(|k| cols.clone().map(|c| q0[c] * k[c]).sum::<f64>() / (dk as f64).sqrt())
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            for c in cols.clone() {
                context[c] += e / z * values[j][c];
            }
        }
    }
    affine(&context, &p.output)
}

fn mlp(e: &Embedder, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = affine(x, &e.hidden)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    affine(&h, &e.out)
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// -log softmax(cos(e, proto_k) / tau)[label].
pub fn cosine_ce(e: &[f64], protos: &[Vec<f64>], label: usize, tau: f64) -> f64 {
    let ue = unit(e);
    let logits: Vec<f64> = protos
        .iter()
        .map(|p| unit(p).iter().zip(&ue).map(|(a, b)| a * b).sum::<f64>() / tau)
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

pub struct ScalarTriple {
    pub target: Tokens,
    pub attr_partner: Tokens,
    pub obj_partner: Tokens,
    pub attr: usize,
    pub obj: usize,
    pub comp: usize,
}

/// Sum of the five cross-entropies for one triple.
pub fn five_ce(
    model: &Model,
    mode: AttentionMode,
    heads: usize,
    tau: f64,
    t: &ScalarTriple,
    candidates: &[Pair],
) -> [f64; 5] {
    let (z, za, zo) = (&t.target, &t.attr_partner, &t.obj_partner);
    let att = |q: &Tokens, kv: &Tokens, p: &AttentionParams| -> Vec<f64> {
        match mode {
            AttentionMode::None => q[0].clone(),
            AttentionMode::SelfOnly => attention_row0(q, q, p, heads),
            AttentionMode::Cross => attention_row0(q, kv, p, heads),
        }
    };
    let va = att(z, za, &model.attr_attn);
    let va2 = att(za, z, &model.attr_attn);
    let vo = att(z, zo, &model.obj_attn);
    let vo2 = att(zo, z, &model.obj_attn);
    let vc = match mode {
        AttentionMode::None => z[0].clone(),
        _ => attention_row0(z, z, &model.comp_attn, heads),
    };
    let rows =
        |a: &ndarray::Array2<f64>| a.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
    let attr_protos = rows(&model.table.attr_vectors);
    let obj_protos = rows(&model.table.obj_vectors);
    let comp_protos: Vec<Vec<f64>> = candidates
        .iter()
        .map(|p| {
            let mut x = attr_protos[p.attr].clone();
            x.extend_from_slice(&obj_protos[p.obj]);
            affine(&x, &model.composer.linear)
        })
        .collect();
    [
        cosine_ce(&mlp(&model.attr_emb, &va), &attr_protos, t.attr, tau),
        cosine_ce(&mlp(&model.attr_emb, &va2), &attr_protos, t.attr, tau),
        cosine_ce(&mlp(&model.obj_emb, &vo), &obj_protos, t.obj, tau),
        cosine_ce(&mlp(&model.obj_emb, &vo2), &obj_protos, t.obj, tau),
        cosine_ce(&mlp(&model.comp_emb, &vc), &comp_protos, t.comp, tau),
    ]
}
