//! The full disentangling model: three attention branches, three embedders,
//! the composition layer and the concept prototype tables, with the
//! five-term cross-entropy plus transport regularizer objective.

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{
    self, AttentionConfig, AttentionGrads, AttentionParams, AttentionResult, AttentionTrace,
};
use crate::embedding::{
    cosine_scores, Composer, ConceptVocabulary, Embedder, EmbeddingTable, Pair, WordVectors,
};
use crate::emd::{attention_emd_with, AttentionTransport, EmdInput, RegTerms, Solver};
use crate::error::{Error, Result};
use crate::nn::{join, Params};
use crate::rng::keyed_rng;

/// Which attention the attribute and object branches use during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Backbone class token straight into the embedders.
    None,
    /// Self-attention in every branch.
    #[serde(rename = "self")]
    SelfOnly,
    /// Query-key swapped cross-attention for the attribute and object
    /// branches, self-attention for the composition branch.
    #[default]
    Cross,
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttentionMode::None),
            "self" => Ok(AttentionMode::SelfOnly),
            "cross" => Ok(AttentionMode::Cross),
            other => Err(Error::Config(format!(
                "unknown attention mode {other:?} (none|self|cross)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub heads: usize,
    pub word_dim: usize,
    /// Embedder hidden width; the feature width when unset.
    pub hidden_dim: Option<usize>,
    pub temperature: f64,
    pub attention: AttentionMode,
    pub emd_input: EmdInput,
    pub solver: Solver,
    pub word_vectors: Option<std::path::PathBuf>,
    pub train_prototypes: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            heads: 4,
            word_dim: 32,
            hidden_dim: None,
            temperature: 0.05,
            attention: AttentionMode::Cross,
            emd_input: EmdInput::Weights,
            solver: Solver::Exact,
            word_vectors: None,
            train_prototypes: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub attr_attn: AttentionParams,
    pub obj_attn: AttentionParams,
    pub comp_attn: AttentionParams,
    pub attr_emb: Embedder,
    pub obj_emb: Embedder,
    pub comp_emb: Embedder,
    pub composer: Composer,
    pub table: EmbeddingTable,
}

impl Params for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.attr_attn.visit(&join(prefix, "attr_attn"), f);
        self.obj_attn.visit(&join(prefix, "obj_attn"), f);
        self.comp_attn.visit(&join(prefix, "comp_attn"), f);
        self.attr_emb.visit(&join(prefix, "attr_emb"), f);
        self.obj_emb.visit(&join(prefix, "obj_emb"), f);
        self.comp_emb.visit(&join(prefix, "comp_emb"), f);
        self.composer.visit(&join(prefix, "composer"), f);
        self.table.visit(&join(prefix, "table"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.attr_attn.visit_mut(&join(prefix, "attr_attn"), f);
        self.obj_attn.visit_mut(&join(prefix, "obj_attn"), f);
        self.comp_attn.visit_mut(&join(prefix, "comp_attn"), f);
        self.attr_emb.visit_mut(&join(prefix, "attr_emb"), f);
        self.obj_emb.visit_mut(&join(prefix, "obj_emb"), f);
        self.comp_emb.visit_mut(&join(prefix, "comp_emb"), f);
        self.composer.visit_mut(&join(prefix, "composer"), f);
        self.table.visit_mut(&join(prefix, "table"), f);
    }
}

impl Model {
    pub fn init(
        config: &ModelConfig,
        feature_dim: usize,
        vocab: &ConceptVocabulary,
    ) -> Result<Self> {
        AttentionConfig::new(config.heads, feature_dim)?;
        if config.word_dim == 0 {
            return Err(Error::Config("word_dim must be positive".into()));
        }
        let hidden = config.hidden_dim.unwrap_or(feature_dim);
        let w = config.word_dim;
        let rng = |group: u64| keyed_rng(config.seed, "init", &[group]);
        let table = match &config.word_vectors {
            Some(path) => {
                let vectors = WordVectors::load(path)?;
                if vectors.dim != w {
                    return Err(Error::Config(format!(
                        "word vectors have width {}, word_dim is {w}",
                        vectors.dim
                    )));
                }
                EmbeddingTable::from_word_vectors(vocab, &vectors, &mut rng(7))?
            }
            None => {
                EmbeddingTable::random(vocab.num_attributes(), vocab.num_objects(), w, &mut rng(7))
            }
        };
        Ok(Model {
            attr_attn: AttentionParams::init(feature_dim, &mut rng(0)),
            obj_attn: AttentionParams::init(feature_dim, &mut rng(1)),
            comp_attn: AttentionParams::init(feature_dim, &mut rng(2)),
            attr_emb: Embedder::init(feature_dim, hidden, w, &mut rng(3)),
            obj_emb: Embedder::init(feature_dim, hidden, w, &mut rng(4)),
            comp_emb: Embedder::init(feature_dim, hidden, w, &mut rng(5)),
            composer: Composer::init(w, &mut rng(6)),
            table,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, d| d.fill(0.0));
        z
    }

    pub fn feature_dim(&self) -> usize {
        self.attr_attn.dim()
    }

    pub fn word_dim(&self) -> usize {
        self.table.dim()
    }

    /// Composition prototypes for `pairs`, one row each.
    pub fn composition_prototypes(&self, pairs: &[Pair]) -> Array2<f64> {
        self.composer.compose_all(&self.table, pairs)
    }

    /// Inference features `(v_a, v_o, v_c)`: every branch self-attends over
    /// the single input and the class-token row is read out.
    pub fn features(
        &self,
        tokens: ArrayView2<f64>,
        config: &ModelConfig,
    ) -> Result<[Array1<f64>; 3]> {
        if tokens.ncols() != self.feature_dim() {
            return Err(Error::Shape(format!(
                "tokens have width {}, model expects {}",
                tokens.ncols(),
                self.feature_dim()
            )));
        }
        if config.attention == AttentionMode::None {
            let cls = tokens.row(0).to_owned();
            return Ok([cls.clone(), cls.clone(), cls]);
        }
        let att = AttentionConfig::new(config.heads, self.feature_dim())?;
        let read = |p: &AttentionParams| -> Result<Array1<f64>> {
            Ok(attention::self_attend(tokens, p, &att)?
                .class_token()
                .to_owned())
        };
        Ok([
            read(&self.attr_attn)?,
            read(&self.obj_attn)?,
            read(&self.comp_attn)?,
        ])
    }

    /// Embedded features `(pi_a(v_a), pi_o(v_o), pi_c(v_c))`.
    pub fn embed(&self, tokens: ArrayView2<f64>, config: &ModelConfig) -> Result<[Array1<f64>; 3]> {
        let [va, vo, vc] = self.features(tokens, config)?;
        Ok([
            self.attr_emb.forward(va.view()),
            self.obj_emb.forward(vo.view()),
            self.comp_emb.forward(vc.view()),
        ])
    }
}

/// One training row: target tokens with its attribute-sharing and
/// object-sharing partners, and the target labels.
#[derive(Clone, Copy, Debug)]
pub struct Triple<'a> {
    pub target: ArrayView2<'a, f64>,
    pub attr_partner: ArrayView2<'a, f64>,
    pub obj_partner: ArrayView2<'a, f64>,
    pub attr: usize,
    pub obj: usize,
    /// Index of the target composition among the training candidates.
    pub comp: usize,
}

/// Batch-mean loss components. `total` is their sum with the regularizer
/// weighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub attr: f64,
    pub attr_prime: f64,
    pub obj: f64,
    pub obj_prime: f64,
    pub com: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn ce(&self) -> f64 {
        self.attr + self.attr_prime + self.obj + self.obj_prime + self.com
    }

    pub fn is_finite(&self) -> bool {
        [
            self.attr,
            self.attr_prime,
            self.obj,
            self.obj_prime,
            self.com,
            self.reg,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Transport plans of one triple, in `RegTerms` field order:
/// attr-on-attr, attr-on-obj, obj-on-attr, obj-on-obj.
pub type TriplePlans = [Array2<f64>; 4];

#[derive(Clone, Debug)]
pub struct ObjectiveOptions<'a> {
    pub reg_weight: f64,
    /// Plans to hold fixed instead of solving; used by gradient checks.
    pub fixed_plans: Option<&'a [TriplePlans]>,
    pub compute_grad: bool,
}

#[derive(Clone, Debug)]
pub struct Objective {
    pub loss: LossBreakdown,
    pub reg_terms: Vec<RegTerms>,
    pub plans: Vec<Option<TriplePlans>>,
    pub grad: Option<Model>,
}

struct Branch {
    result: AttentionResult,
    trace: AttentionTrace,
}

fn attend(
    params: &AttentionParams,
    config: &AttentionConfig,
    q: ArrayView2<f64>,
    kv: ArrayView2<f64>,
) -> Result<Branch> {
    let (result, trace) = attention::forward_traced(q, kv, params, config)?;
    Ok(Branch { result, trace })
}

struct TripleOut {
    ce: [f64; 5],
    reg: RegTerms,
    plans: Option<TriplePlans>,
}

/// Cross-entropy through one embedder and prototype set. Returns the loss,
/// dL/d feature, and adds dL/d prototypes into `d_protos`.
#[allow(clippy::too_many_arguments)]
fn probe(
    embedder: &Embedder,
    feature: &Array1<f64>,
    prototypes: ArrayView2<f64>,
    label: usize,
    temperature: f64,
    scale: f64,
    grad: Option<(&mut Embedder, &mut Array2<f64>)>,
) -> Result<(f64, Option<Array1<f64>>)> {
    let (embedded, trace) = embedder.forward_traced(feature.view());
    let scores = cosine_scores(embedded.view(), prototypes, temperature)?;
    let ce = scores.cross_entropy(label);
    let Some((g_emb, d_protos)) = grad else {
        return Ok((ce, None));
    };
    let (d_e, d_p) = scores.backward(scores.ce_grad(label, scale).view());
    *d_protos += &d_p;
    Ok((ce, Some(embedder.backward(&trace, d_e.view(), g_emb))))
}

fn row0_grad(t: usize, d: usize, dv: Option<Array1<f64>>) -> Option<Array2<f64>> {
    dv.map(|dv| {
        let mut g = Array2::zeros((t, d));
        g.row_mut(0).assign(&dv);
        g
    })
}

/// Per-chunk gradient accumulators.
struct Acc {
    model: Model,
    d_attr_protos: Array2<f64>,
    d_obj_protos: Array2<f64>,
    d_comp_protos: Array2<f64>,
}

#[derive(Clone, Copy)]
enum Head {
    Attr,
    Obj,
    Comp,
}

impl Acc {
    fn head(&mut self, head: Head) -> (&mut Embedder, &mut Array2<f64>) {
        match head {
            Head::Attr => (&mut self.model.attr_emb, &mut self.d_attr_protos),
            Head::Obj => (&mut self.model.obj_emb, &mut self.d_obj_protos),
            Head::Comp => (&mut self.model.comp_emb, &mut self.d_comp_protos),
        }
    }
}

impl Model {
    #[allow(clippy::too_many_arguments)]
    fn triple(
        &self,
        config: &ModelConfig,
        att: &AttentionConfig,
        t: &Triple,
        comp_protos: &Array2<f64>,
        opts: &ObjectiveOptions,
        fixed: Option<&TriplePlans>,
        scale: f64,
        mut acc: Option<&mut Acc>,
    ) -> Result<TripleOut> {
        let (z, za, zo) = (t.target, t.attr_partner, t.obj_partner);
        let d = self.feature_dim();
        let tau = config.temperature;
        let use_reg = config.attention == AttentionMode::Cross && opts.reg_weight != 0.0;

        // Attention branches. In `None` mode the class tokens are used as is.
        let (a1, a2, o1, o2, c) = match config.attention {
            AttentionMode::None => (None, None, None, None, None),
            AttentionMode::SelfOnly => (
                Some(attend(&self.attr_attn, att, z, z)?),
                Some(attend(&self.attr_attn, att, za, za)?),
                Some(attend(&self.obj_attn, att, z, z)?),
                Some(attend(&self.obj_attn, att, zo, zo)?),
                Some(attend(&self.comp_attn, att, z, z)?),
            ),
            AttentionMode::Cross => (
                Some(attend(&self.attr_attn, att, z, za)?),
                Some(attend(&self.attr_attn, att, za, z)?),
                Some(attend(&self.obj_attn, att, z, zo)?),
                Some(attend(&self.obj_attn, att, zo, z)?),
                Some(attend(&self.comp_attn, att, z, z)?),
            ),
        };
        let cls = |b: &Option<Branch>, tokens: ArrayView2<f64>| match b {
            Some(b) => b.result.class_token().to_owned(),
            None => tokens.row(0).to_owned(),
        };
        let (va, va2, vo, vo2, vc) = (
            cls(&a1, z),
            cls(&a2, za),
            cls(&o1, z),
            cls(&o2, zo),
            cls(&c, z),
        );

        // Five cross-entropies.
        let table = &self.table;
        let (l_a, d_va) = probe(
            &self.attr_emb,
            &va,
            table.attr_vectors.view(),
            t.attr,
            tau,
            scale,
            acc.as_deref_mut().map(|a| a.head(Head::Attr)),
        )?;
        let (l_a2, d_va2) = probe(
            &self.attr_emb,
            &va2,
            table.attr_vectors.view(),
            t.attr,
            tau,
            scale,
            acc.as_deref_mut().map(|a| a.head(Head::Attr)),
        )?;
        let (l_o, d_vo) = probe(
            &self.obj_emb,
            &vo,
            table.obj_vectors.view(),
            t.obj,
            tau,
            scale,
            acc.as_deref_mut().map(|a| a.head(Head::Obj)),
        )?;
        let (l_o2, d_vo2) = probe(
            &self.obj_emb,
            &vo2,
            table.obj_vectors.view(),
            t.obj,
            tau,
            scale,
            acc.as_deref_mut().map(|a| a.head(Head::Obj)),
        )?;
        let (l_c, d_vc) = probe(
            &self.comp_emb,
            &vc,
            comp_protos.view(),
            t.comp,
            tau,
            scale,
            acc.as_deref_mut().map(|a| a.head(Head::Comp)),
        )?;

        // Transport regularizer on the swapped pairs.
        let mut reg = RegTerms::default();
        let mut plans = None;
        let mut reg_grads: [Option<(ndarray::Array3<f64>, ndarray::Array3<f64>)>; 4] =
            [None, None, None, None];
        let mut wrong: Option<(Branch, Branch, Branch, Branch)> = None;
        if use_reg {
            let (a1r, a2r, o1r, o2r) = (
                &a1.as_ref().expect("cross mode").result,
                &a2.as_ref().expect("cross mode").result,
                &o1.as_ref().expect("cross mode").result,
                &o2.as_ref().expect("cross mode").result,
            );
            let ao1 = attend(&self.attr_attn, att, z, zo)?;
            let ao2 = attend(&self.attr_attn, att, zo, z)?;
            let oa1 = attend(&self.obj_attn, att, z, za)?;
            let oa2 = attend(&self.obj_attn, att, za, z)?;
            let pairs: [(&AttentionResult, &AttentionResult, f64); 4] = [
                (a1r, a2r, -1.0),
                (&ao1.result, &ao2.result, 1.0),
                (&oa1.result, &oa2.result, 1.0),
                (o1r, o2r, -1.0),
            ];
            let mut sims = [0.0; 4];
            let mut flows: Vec<Array2<f64>> = Vec::with_capacity(4);
            for (k, (first, second, sign)) in pairs.iter().enumerate() {
                let transport = match fixed {
                    Some(p) => {
                        AttentionTransport::with_flow(first, second, config.emd_input, &p[k])?
                    }
                    None => attention_emd_with(first, second, config.emd_input, &config.solver)?,
                };
                sims[k] = transport.similarity;
                if acc.is_some() {
                    reg_grads[k] = Some(transport.backward(sign * opts.reg_weight * scale));
                }
                flows.push(transport.plan.flow);
            }
            reg = RegTerms {
                attr_on_attr: sims[0],
                attr_on_obj: sims[1],
                obj_on_attr: sims[2],
                obj_on_obj: sims[3],
            };
            let mut it = flows.into_iter();
            plans = Some([
                it.next().expect("4 flows"),
                it.next().expect("4 flows"),
                it.next().expect("4 flows"),
                it.next().expect("4 flows"),
            ]);
            wrong = Some((ao1, ao2, oa1, oa2));
        }

        // Attention backward.
        if let Some(acc) = acc {
            let logits_mode = config.emd_input == EmdInput::Logits;
            let back = |params: &AttentionParams,
                        grad: &mut AttentionParams,
                        branch: &Option<Branch>,
                        d_out: Option<Array2<f64>>,
                        d_map: Option<&ndarray::Array3<f64>>| {
                let Some(b) = branch else { return };
                let upstream = AttentionGrads {
                    output: d_out.as_ref().map(|g| g.view()),
                    weights: if logits_mode { None } else { d_map },
                    logits: if logits_mode { d_map } else { None },
                };
                attention::backward(params, att, &b.result, &b.trace, upstream, grad);
            };
            let (tz, tza, tzo) = (z.nrows(), za.nrows(), zo.nrows());
            let g_aa = reg_grads[0].take();
            let g_ao = reg_grads[1].take();
            let g_oa = reg_grads[2].take();
            let g_oo = reg_grads[3].take();
            let m = &mut acc.model;
            back(
                &self.attr_attn,
                &mut m.attr_attn,
                &a1,
                row0_grad(tz, d, d_va),
                g_aa.as_ref().map(|g| &g.0),
            );
            back(
                &self.attr_attn,
                &mut m.attr_attn,
                &a2,
                row0_grad(tza, d, d_va2),
                g_aa.as_ref().map(|g| &g.1),
            );
            back(
                &self.obj_attn,
                &mut m.obj_attn,
                &o1,
                row0_grad(tz, d, d_vo),
                g_oo.as_ref().map(|g| &g.0),
            );
            back(
                &self.obj_attn,
                &mut m.obj_attn,
                &o2,
                row0_grad(tzo, d, d_vo2),
                g_oo.as_ref().map(|g| &g.1),
            );
            back(
                &self.comp_attn,
                &mut m.comp_attn,
                &c,
                row0_grad(tz, d, d_vc),
                None,
            );
            if let Some((ao1, ao2, oa1, oa2)) = wrong {
                let (ao, oa) = (g_ao.expect("reg grads"), g_oa.expect("reg grads"));
                back(
                    &self.attr_attn,
                    &mut m.attr_attn,
                    &Some(ao1),
                    None,
                    Some(&ao.0),
                );
                back(
                    &self.attr_attn,
                    &mut m.attr_attn,
                    &Some(ao2),
                    None,
                    Some(&ao.1),
                );
                back(
                    &self.obj_attn,
                    &mut m.obj_attn,
                    &Some(oa1),
                    None,
                    Some(&oa.0),
                );
                back(
                    &self.obj_attn,
                    &mut m.obj_attn,
                    &Some(oa2),
                    None,
                    Some(&oa.1),
                );
            }
        }

        Ok(TripleOut {
            ce: [l_a, l_a2, l_o, l_o2, l_c],
            reg,
            plans,
        })
    }

    /// Batch objective: mean of the five cross-entropies plus
    /// `reg_weight` times the mean regularizer, with its gradient.
    ///
    /// Rows are processed in fixed-size chunks whose partial sums are
    /// combined in index order, so the result does not depend on the
    /// number of worker threads.
    pub fn objective(
        &self,
        config: &ModelConfig,
        batch: &[Triple],
        candidates: &[Pair],
        opts: &ObjectiveOptions,
    ) -> Result<Objective> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        if opts.reg_weight != 0.0 && config.attention != AttentionMode::Cross {
            return Err(Error::Config(
                "the transport regularizer needs cross attention".into(),
            ));
        }
        if let Some(f) = opts.fixed_plans {
            if f.len() != batch.len() {
                return Err(Error::Shape(format!(
                    "{} fixed plans for {} rows",
                    f.len(),
                    batch.len()
                )));
            }
        }
        let att = AttentionConfig::new(config.heads, self.feature_dim())?;
        let comp_protos = self.composition_prototypes(candidates);
        let scale = 1.0 / batch.len() as f64;
        const CHUNK: usize = 4;

        let new_acc = || Acc {
            model: self.zeros_like(),
            d_attr_protos: Array2::zeros(self.table.attr_vectors.dim()),
            d_obj_protos: Array2::zeros(self.table.obj_vectors.dim()),
            d_comp_protos: Array2::zeros(comp_protos.dim()),
        };
        type ChunkOut = (Vec<TripleOut>, Option<Acc>);
        let chunks: Vec<ChunkOut> = batch
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(ci, rows)| -> Result<ChunkOut> {
                let mut acc = opts.compute_grad.then(new_acc);
                let mut outs = Vec::with_capacity(rows.len());
                for (k, t) in rows.iter().enumerate() {
                    let fixed = opts.fixed_plans.map(|f| &f[ci * CHUNK + k]);
                    outs.push(self.triple(
                        config,
                        &att,
                        t,
                        &comp_protos,
                        opts,
                        fixed,
                        scale,
                        acc.as_mut(),
                    )?);
                }
                Ok((outs, acc))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut loss = LossBreakdown::default();
        let mut reg_terms = Vec::with_capacity(batch.len());
        let mut plans = Vec::with_capacity(batch.len());
        let mut total: Option<Acc> = None;
        for (outs, acc) in chunks {
            for o in outs {
                loss.attr += o.ce[0];
                loss.attr_prime += o.ce[1];
                loss.obj += o.ce[2];
                loss.obj_prime += o.ce[3];
                loss.com += o.ce[4];
                loss.reg += crate::emd::regularization_loss(&o.reg);
                reg_terms.push(o.reg);
                plans.push(o.plans);
            }
            if let Some(acc) = acc {
                match total.as_mut() {
                    None => total = Some(acc),
                    Some(t) => {
                        let flat = acc.model.to_flat();
                        let mut sum = t.model.to_flat();
                        sum.iter_mut().zip(&flat).for_each(|(s, v)| *s += v);
                        t.model.set_flat(&sum);
                        t.d_attr_protos += &acc.d_attr_protos;
                        t.d_obj_protos += &acc.d_obj_protos;
                        t.d_comp_protos += &acc.d_comp_protos;
                    }
                }
            }
        }
        for v in [
            &mut loss.attr,
            &mut loss.attr_prime,
            &mut loss.obj,
            &mut loss.obj_prime,
            &mut loss.com,
            &mut loss.reg,
        ] {
            *v *= scale;
        }
        loss.total = loss.ce() + opts.reg_weight * loss.reg;

        let grad = total.map(|acc| {
            let mut g = acc.model;
            g.table.attr_vectors += &acc.d_attr_protos;
            g.table.obj_vectors += &acc.d_obj_protos;
            let mut composer_grad = Composer::zeros(self.word_dim());
            self.composer.compose_all_backward(
                &self.table,
                candidates,
                acc.d_comp_protos.view(),
                &mut composer_grad,
                &mut g.table,
            );
            g.composer = composer_grad;
            if !config.train_prototypes {
                g.table.attr_vectors.fill(0.0);
                g.table.obj_vectors.fill(0.0);
            }
            g
        });
        Ok(Objective {
            loss,
            reg_terms,
            plans,
            grad,
        })
    }
}
