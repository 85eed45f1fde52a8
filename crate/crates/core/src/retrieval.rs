//! Exact nearest-neighbour retrieval between images and compositions in the
//! embedded spaces.

use std::cmp::Ordering;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::Pair;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::l2_norm;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Concept {
    Attribute,
    Object,
}

impl std::str::FromStr for Concept {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attribute" | "attr" => Ok(Concept::Attribute),
            "object" | "obj" => Ok(Concept::Object),
            other => Err(Error::Config(format!(
                "unknown concept {other:?}; expected attribute or object"
            ))),
        }
    }
}

fn unit(v: ArrayView1<f64>) -> Result<Array1<f64>> {
    let n = l2_norm(v);
    if !(n > 1e-12) {
        return Err(Error::Degenerate("zero-norm feature".into()));
    }
    Ok(&v / n)
}

/// L2-normalized embedded features of a set of images, one row each.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureIndex {
    pub ids: Vec<String>,
    pub pairs: Vec<Pair>,
    pub comp: Array2<f64>,
    pub attr: Array2<f64>,
    pub obj: Array2<f64>,
}

/// Unit-norm `(attr, obj, comp)` embeddings of one image.
pub fn image_features(
    model: &Model,
    config: &ModelConfig,
    tokens: ArrayView2<f64>,
) -> Result<[Array1<f64>; 3]> {
    let [a, o, c] = model.embed(tokens, config)?;
    Ok([unit(a.view())?, unit(o.view())?, unit(c.view())?])
}

impl FeatureIndex {
    pub fn build(
        model: &Model,
        config: &ModelConfig,
        ids: Vec<String>,
        pairs: Vec<Pair>,
        tokens: &[Array2<f64>],
    ) -> Result<Self> {
        if ids.len() != tokens.len() || pairs.len() != tokens.len() {
            return Err(Error::Shape(
                "ids, pairs and tokens differ in length".into(),
            ));
        }
        let feats = tokens
            .par_iter()
            .map(|t| image_features(model, config, t.view()))
            .collect::<Result<Vec<_>>>()?;
        let w = model.word_dim();
        let stack = |k: usize| {
            let mut m = Array2::zeros((feats.len(), w));
            for (mut row, f) in m.rows_mut().into_iter().zip(&feats) {
                row.assign(&f[k]);
            }
            m
        };
        Ok(FeatureIndex {
            attr: stack(0),
            obj: stack(1),
            comp: stack(2),
            ids,
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn space(&self, concept: Concept) -> &Array2<f64> {
        match concept {
            Concept::Attribute => &self.attr,
            Concept::Object => &self.obj,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit<T> {
    pub item: T,
    /// Cosine similarity in [-1, 1].
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranking<T> {
    pub hits: Vec<Hit<T>>,
    /// Fewer than the requested number were available.
    pub truncated: bool,
}

/// The `k` rows of `matrix` most similar to `query`, descending, ties by key.
fn top_k<T: Clone + Ord>(
    matrix: &Array2<f64>,
    keys: &[T],
    query: ArrayView1<f64>,
    k: usize,
) -> Result<Ranking<T>> {
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    let sims = matrix.dot(&query).mapv(|s| s.clamp(-1.0, 1.0));
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| {
        sims[b]
            .partial_cmp(&sims[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| keys[a].cmp(&keys[b]))
    });
    let truncated = k > keys.len();
    if truncated {
        log::warn!("asked for {k} results, only {} available", keys.len());
    }
    Ok(Ranking {
        hits: order
            .into_iter()
            .take(k)
            .map(|i| Hit {
                item: keys[i].clone(),
                similarity: sims[i],
            })
            .collect(),
        truncated,
    })
}

/// Images whose composition feature is closest to the composed text
/// embedding of `pair`.
pub fn text_to_image(
    model: &Model,
    pair: Pair,
    k: usize,
    index: &FeatureIndex,
) -> Result<Ranking<String>> {
    if pair.attr >= model.table.attr_vectors.nrows() || pair.obj >= model.table.obj_vectors.nrows()
    {
        return Err(Error::Config(format!("{pair:?} is outside the vocabulary")));
    }
    let text = model.composition_prototypes(&[pair]);
    let q = unit(text.row(0))?;
    top_k(&index.comp, &index.ids, q.view(), k)
}

/// Compositions among `pairs` whose composed text embedding is closest to
/// the image's composition feature.
pub fn image_to_text(
    model: &Model,
    config: &ModelConfig,
    tokens: ArrayView2<f64>,
    pairs: &[Pair],
    k: usize,
) -> Result<Ranking<Pair>> {
    if pairs.is_empty() {
        return Err(Error::Config("no candidate compositions".into()));
    }
    let mut text = model.composition_prototypes(pairs);
    for mut row in text.rows_mut() {
        let u = unit(row.view())?;
        row.assign(&u);
    }
    let [_, _, c] = image_features(model, config, tokens)?;
    top_k(&text, pairs, c.view(), k)
}

/// Indexed images nearest to the query image in one concept's feature space.
pub fn concept_retrieve(
    model: &Model,
    config: &ModelConfig,
    tokens: ArrayView2<f64>,
    concept: Concept,
    k: usize,
    index: &FeatureIndex,
) -> Result<Ranking<String>> {
    let [a, o, _] = image_features(model, config, tokens)?;
    let q = match concept {
        Concept::Attribute => a,
        Concept::Object => o,
    };
    top_k(index.space(concept), &index.ids, q.view(), k)
}

/// Fraction of `hits` whose indexed composition satisfies `relevant`.
pub fn precision(
    hits: &[Hit<String>],
    index: &FeatureIndex,
    relevant: impl Fn(Pair) -> bool,
) -> f64 {
    if hits.is_empty() {
        return 0.0;
    }
    let good = hits
        .iter()
        .filter(|h| {
            index
                .ids
                .iter()
                .position(|id| *id == h.item)
                .is_some_and(|i| relevant(index.pairs[i]))
        })
        .count();
    good as f64 / hits.len() as f64
}
