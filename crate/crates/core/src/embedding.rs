//! Concept vocabularies, word-vector prototypes, the linear composition
//! function, MLP embedders and the temperature-scaled cosine classifier.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, l2_norm, log_sum_exp, normalize_backward, visit2, Linear, Params};

/// An (attribute, object) composition, by vocabulary index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pair {
    pub attr: usize,
    pub obj: usize,
}

impl Pair {
    pub fn new(attr: usize, obj: usize) -> Self {
        Pair { attr, obj }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptVocabulary {
    pub attributes: Vec<String>,
    pub objects: Vec<String>,
}

impl ConceptVocabulary {
    pub fn new(attributes: Vec<String>, objects: Vec<String>) -> Result<Self> {
        for (kind, names) in [("attribute", &attributes), ("object", &objects)] {
            if names.is_empty() {
                return Err(Error::Manifest(format!("empty {kind} vocabulary")));
            }
            let mut seen = std::collections::HashSet::new();
            for n in names {
                if !seen.insert(n) {
                    return Err(Error::Manifest(format!("duplicate {kind} name {n:?}")));
                }
            }
        }
        Ok(ConceptVocabulary {
            attributes,
            objects,
        })
    }

    pub fn num_attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a == name)
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o == name)
    }

    /// Every attribute-object combination, attribute-major.
    pub fn open_world_pairs(&self) -> Vec<Pair> {
        (0..self.num_attributes())
            .flat_map(|a| (0..self.num_objects()).map(move |o| Pair::new(a, o)))
            .collect()
    }

    pub fn pair_name(&self, pair: Pair) -> String {
        format!("{} {}", self.attributes[pair.attr], self.objects[pair.obj])
    }

    pub fn contains(&self, pair: Pair) -> bool {
        pair.attr < self.num_attributes() && pair.obj < self.num_objects()
    }
}

/// Learnable word-vector prototypes for attributes and objects.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub attr_vectors: Array2<f64>,
    pub obj_vectors: Array2<f64>,
}

impl EmbeddingTable {
    pub fn random<R: Rng>(num_attrs: usize, num_objs: usize, dim: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 0.1).expect("valid sigma");
        EmbeddingTable {
            attr_vectors: Array2::from_shape_fn((num_attrs, dim), |_| normal.sample(rng)),
            obj_vectors: Array2::from_shape_fn((num_objs, dim), |_| normal.sample(rng)),
        }
    }

    pub fn zeros(num_attrs: usize, num_objs: usize, dim: usize) -> Self {
        EmbeddingTable {
            attr_vectors: Array2::zeros((num_attrs, dim)),
            obj_vectors: Array2::zeros((num_objs, dim)),
        }
    }

    /// Initializes from a word-vector file. Names are split on whitespace,
    /// `_` and `-` and their vectors averaged; names with no known word fall
    /// back to seeded Gaussian vectors.
    pub fn from_word_vectors<R: Rng>(
        vocab: &ConceptVocabulary,
        vectors: &WordVectors,
        rng: &mut R,
    ) -> Result<Self> {
        let mut table = EmbeddingTable::random(
            vocab.num_attributes(),
            vocab.num_objects(),
            vectors.dim,
            rng,
        );
        for (names, rows) in [
            (&vocab.attributes, &mut table.attr_vectors),
            (&vocab.objects, &mut table.obj_vectors),
        ] {
            for (i, name) in names.iter().enumerate() {
                if let Some(v) = vectors.embed_phrase(name) {
                    rows.row_mut(i).assign(&v);
                }
            }
        }
        Ok(table)
    }

    pub fn dim(&self) -> usize {
        self.attr_vectors.ncols()
    }
}

impl Params for EmbeddingTable {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit2(prefix, "attr_vectors", &self.attr_vectors, f);
        visit2(prefix, "obj_vectors", &self.obj_vectors, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(
            &join(prefix, "attr_vectors"),
            self.attr_vectors.as_slice_mut().unwrap(),
        );
        f(
            &join(prefix, "obj_vectors"),
            self.obj_vectors.as_slice_mut().unwrap(),
        );
    }
}

/// Word vectors read from a whitespace-separated text file: one
/// `token v1 ... vD` per line.
#[derive(Clone, Debug)]
pub struct WordVectors {
    pub dim: usize,
    pub vectors: HashMap<String, Vec<f64>>,
}

impl WordVectors {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut dim = 0;
        let mut vectors = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let values = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Config(format!("word vectors line {}: {e}", lineno + 1)))?;
            if dim == 0 {
                dim = values.len();
            }
            if values.len() != dim || dim == 0 {
                return Err(Error::Shape(format!(
                    "word vectors line {} has {} values, expected {dim}",
                    lineno + 1,
                    values.len()
                )));
            }
            vectors.insert(token.to_lowercase(), values);
        }
        if dim == 0 {
            return Err(Error::Config("empty word-vector file".into()));
        }
        Ok(WordVectors { dim, vectors })
    }

    pub fn embed_phrase(&self, phrase: &str) -> Option<Array1<f64>> {
        let words: Vec<String> = phrase
            .split(|c: char| c.is_whitespace() || c == '_' || c == '-')
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect();
        if let Some(v) = self.vectors.get(&phrase.to_lowercase()) {
            return Some(Array1::from(v.clone()));
        }
        let known: Vec<&Vec<f64>> = words.iter().filter_map(|w| self.vectors.get(w)).collect();
        if known.is_empty() {
            log::warn!("no word vector for {phrase:?}; using a random prototype");
            return None;
        }
        if words.len() > 1 {
            log::warn!("averaging {} word vectors for {phrase:?}", known.len());
        }
        let mut acc = Array1::zeros(self.dim);
        for v in &known {
            acc += &ArrayView1::from(v.as_slice());
        }
        Some(acc / known.len() as f64)
    }
}

/// Two-layer perceptron, feature dim -> hidden -> word dim, ReLU between.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedder {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub struct EmbedderTrace {
    input: Array1<f64>,
    hidden_pre: Array1<f64>,
    hidden: Array1<f64>,
}

impl Embedder {
    pub fn init<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Embedder {
            hidden: Linear::init(input, hidden, rng),
            out: Linear::init(hidden, output, rng),
        }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Embedder {
            hidden: Linear::zeros(input, hidden),
            out: Linear::zeros(hidden, output),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out.out_dim()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.forward_traced(x).0
    }

    pub fn forward_traced(&self, x: ArrayView1<f64>) -> (Array1<f64>, EmbedderTrace) {
        let hidden_pre = self.hidden.forward_vec(x);
        let hidden = hidden_pre.mapv(|h| h.max(0.0));
        let out = self.out.forward_vec(hidden.view());
        (
            out,
            EmbedderTrace {
                input: x.to_owned(),
                hidden_pre,
                hidden,
            },
        )
    }

    /// Accumulates parameter gradients and returns dL/dx.
    pub fn backward(
        &self,
        trace: &EmbedderTrace,
        d_out: ArrayView1<f64>,
        grad: &mut Embedder,
    ) -> Array1<f64> {
        let d_hidden = self
            .out
            .backward_vec(trace.hidden.view(), d_out, &mut grad.out);
        let d_pre = Array1::from_shape_fn(d_hidden.len(), |i| {
            if trace.hidden_pre[i] > 0.0 {
                d_hidden[i]
            } else {
                0.0
            }
        });
        self.hidden
            .backward_vec(trace.input.view(), d_pre.view(), &mut grad.hidden)
    }
}

impl Params for Embedder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// The composition function: one linear layer over `[attr; obj]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Composer {
    pub linear: Linear,
}

impl Composer {
    pub fn init<R: Rng>(word_dim: usize, rng: &mut R) -> Self {
        Composer {
            linear: Linear::init(2 * word_dim, word_dim, rng),
        }
    }

    pub fn zeros(word_dim: usize) -> Self {
        Composer {
            linear: Linear::zeros(2 * word_dim, word_dim),
        }
    }

    pub fn word_dim(&self) -> usize {
        self.linear.out_dim()
    }

    pub fn compose(
        &self,
        attr_vec: ArrayView1<f64>,
        obj_vec: ArrayView1<f64>,
    ) -> Result<Array1<f64>> {
        let w = self.word_dim();
        if attr_vec.len() != w || obj_vec.len() != w {
            return Err(Error::Shape(format!(
                "compose expects width {w}, got {} and {}",
                attr_vec.len(),
                obj_vec.len()
            )));
        }
        let mut x = Array1::zeros(2 * w);
        x.slice_mut(ndarray::s![..w]).assign(&attr_vec);
        x.slice_mut(ndarray::s![w..]).assign(&obj_vec);
        Ok(self.linear.forward_vec(x.view()))
    }

    fn stacked_inputs(&self, table: &EmbeddingTable, pairs: &[Pair]) -> Array2<f64> {
        let w = self.word_dim();
        let mut x = Array2::zeros((pairs.len(), 2 * w));
        for (r, p) in pairs.iter().enumerate() {
            x.slice_mut(ndarray::s![r, ..w])
                .assign(&table.attr_vectors.row(p.attr));
            x.slice_mut(ndarray::s![r, w..])
                .assign(&table.obj_vectors.row(p.obj));
        }
        x
    }

    /// Composition prototypes, one row per candidate pair.
    pub fn compose_all(&self, table: &EmbeddingTable, pairs: &[Pair]) -> Array2<f64> {
        let x = self.stacked_inputs(table, pairs);
        self.linear.forward(x.view())
    }

    pub fn compose_all_backward(
        &self,
        table: &EmbeddingTable,
        pairs: &[Pair],
        d_protos: ArrayView2<f64>,
        grad: &mut Composer,
        table_grad: &mut EmbeddingTable,
    ) {
        let w = self.word_dim();
        let x = self.stacked_inputs(table, pairs);
        let dx = self.linear.backward(x.view(), d_protos, &mut grad.linear);
        for (r, p) in pairs.iter().enumerate() {
            let mut a = table_grad.attr_vectors.row_mut(p.attr);
            a += &dx.slice(ndarray::s![r, ..w]);
            let mut o = table_grad.obj_vectors.row_mut(p.obj);
            o += &dx.slice(ndarray::s![r, w..]);
        }
    }
}

impl Params for Composer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.linear.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.linear.visit_mut(prefix, f);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub temperature: f64,
}

impl ProbeConfig {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(ProbeConfig { temperature })
    }
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { temperature: 0.05 }
    }
}

const MIN_NORM: f64 = 1e-12;

/// Cosine logits between an embedded feature and a prototype matrix.
#[derive(Clone, Debug)]
pub struct CosineScores {
    /// cos / tau per prototype.
    pub logits: Array1<f64>,
    pub probs: Array1<f64>,
    unit_feature: Array1<f64>,
    feature_norm: f64,
    unit_protos: Array2<f64>,
    proto_norms: Array1<f64>,
    temperature: f64,
}

pub fn cosine_scores(
    embedded: ArrayView1<f64>,
    prototypes: ArrayView2<f64>,
    temperature: f64,
) -> Result<CosineScores> {
    if prototypes.nrows() == 0 {
        return Err(Error::Shape("no prototypes".into()));
    }
    if prototypes.ncols() != embedded.len() {
        return Err(Error::Shape(format!(
            "feature width {} vs prototype width {}",
            embedded.len(),
            prototypes.ncols()
        )));
    }
    let feature_norm = l2_norm(embedded);
    if !(feature_norm > MIN_NORM) {
        return Err(Error::Degenerate("zero-norm embedded feature".into()));
    }
    let unit_feature = &embedded / feature_norm;
    let proto_norms = Array1::from_iter(prototypes.rows().into_iter().map(|r| l2_norm(r)));
    if let Some(i) = proto_norms.iter().position(|n| !(*n > MIN_NORM)) {
        return Err(Error::Degenerate(format!("prototype {i} has zero norm")));
    }
    let mut unit_protos = prototypes.to_owned();
    for (mut row, n) in unit_protos.rows_mut().into_iter().zip(proto_norms.iter()) {
        row /= *n;
    }
    let logits = unit_protos.dot(&unit_feature) / temperature;
    let lse = log_sum_exp(logits.as_slice().unwrap());
    let probs = logits.mapv(|l| (l - lse).exp());
    Ok(CosineScores {
        logits,
        probs,
        unit_feature,
        feature_norm,
        unit_protos,
        proto_norms,
        temperature,
    })
}

impl CosineScores {
    /// -log p[label] via log-sum-exp.
    pub fn cross_entropy(&self, label: usize) -> f64 {
        cross_entropy_from_logits(self.logits.view(), label)
    }

    /// Given dL/dlogits, returns (dL/d embedded feature, dL/d prototypes).
    pub fn backward(&self, d_logits: ArrayView1<f64>) -> (Array1<f64>, Array2<f64>) {
        let scaled = &d_logits / self.temperature;
        let d_unit_feature = self.unit_protos.t().dot(&scaled);
        let d_feature = normalize_backward(
            self.unit_feature.view(),
            self.feature_norm,
            d_unit_feature.view(),
        );
        let mut d_protos = Array2::zeros(self.unit_protos.dim());
        for (i, mut row) in d_protos.rows_mut().into_iter().enumerate() {
            let d_unit = &self.unit_feature * scaled[i];
            row.assign(&normalize_backward(
                self.unit_protos.row(i),
                self.proto_norms[i],
                d_unit.view(),
            ));
        }
        (d_feature, d_protos)
    }

    /// dL/dlogits of the cross-entropy at `label`, scaled by `weight`.
    pub fn ce_grad(&self, label: usize, weight: f64) -> Array1<f64> {
        let mut d = &self.probs * weight;
        d[label] -= weight;
        d
    }
}

/// Class distribution of `embedder(feature)` against L2-normalized
/// prototypes at temperature `tau`.
pub fn class_probabilities(
    feature: ArrayView1<f64>,
    embedder: &Embedder,
    prototypes: ArrayView2<f64>,
    probe: &ProbeConfig,
) -> Result<Array1<f64>> {
    let embedded = embedder.forward(feature);
    Ok(cosine_scores(embedded.view(), prototypes, probe.temperature)?.probs)
}

/// `-log p[label]`; a zero probability is clamped to the smallest positive
/// float rather than taking `ln 0`.
pub fn cross_entropy(probabilities: ArrayView1<f64>, label: usize) -> Result<f64> {
    let p = *probabilities.get(label).ok_or_else(|| {
        Error::Shape(format!(
            "label {label} out of range {}",
            probabilities.len()
        ))
    })?;
    Ok(-p.max(f64::MIN_POSITIVE).ln())
}

pub fn cross_entropy_from_logits(logits: ArrayView1<f64>, label: usize) -> f64 {
    log_sum_exp(logits.as_slice().expect("contiguous")) - logits[label]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed_rng;
    use ndarray::array;

    fn identity_embedder(d: usize) -> Embedder {
        Embedder {
            hidden: Linear {
                weight: Array2::eye(d),
                bias: Array1::zeros(d),
            },
            out: Linear {
                weight: Array2::eye(d),
                bias: Array1::zeros(d),
            },
        }
    }

    #[test]
    fn compose_linearity() {
        let mut rng = keyed_rng(1, "c", &[]);
        let zero = Composer::zeros(3);
        let u = array![1.0, -2.0, 0.5];
        let v = array![0.3, 0.1, 4.0];
        assert_eq!(
            zero.compose(u.view(), v.view()).unwrap(),
            Array1::<f64>::zeros(3)
        );

        let psi = Composer::init(3, &mut rng);
        let k = 2.5;
        let base = psi.compose(u.view(), v.view()).unwrap();
        let scaled = psi.compose((&u * k).view(), (&v * k).view()).unwrap();
        for (a, b) in scaled.iter().zip(base.iter()) {
            assert!((a - k * b).abs() < 1e-12);
        }

        let mut select = Composer::zeros(3);
        for i in 0..3 {
            select.linear.weight[[i, i]] = 1.0;
        }
        assert_eq!(select.compose(u.view(), v.view()).unwrap(), u);
        assert!(select.compose(u.view(), array![1.0].view()).is_err());
    }

    #[test]
    fn singleton_and_symmetric_probabilities() {
        let e = identity_embedder(2);
        let probe = ProbeConfig::default();
        let p = class_probabilities(
            array![0.3, 0.9].view(),
            &e,
            array![[1.0, 2.0]].view(),
            &probe,
        )
        .unwrap();
        assert_eq!(p, array![1.0]);
        let p = class_probabilities(
            array![1.0, 1.0].view(),
            &e,
            array![[1.0, 0.0], [0.0, 1.0]].view(),
            &probe,
        )
        .unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn hand_set_cosines_match_scalar_softmax() {
        // Unit feature along x; prototypes at cosines 0.9, 0.1, -0.5.
        let cosines = [0.9f64, 0.1, -0.5];
        let protos = Array2::from_shape_fn((3, 2), |(i, j)| {
            let c = cosines[i];
            if j == 0 {
                c
            } else {
                (1.0 - c * c).sqrt()
            }
        });
        let tau = 0.1;
        let e = identity_embedder(2);
        let probe = ProbeConfig::new(tau).unwrap();
        let p = class_probabilities(array![1.0, 0.0].view(), &e, protos.view(), &probe).unwrap();

        // Oracle: plain scalar softmax.
        let ex: Vec<f64> = cosines.iter().map(|c| (c / tau).exp()).collect();
        let z: f64 = ex.iter().sum();
        for i in 0..3 {
            assert!((p[i] - ex[i] / z).abs() < 1e-12);
        }
        let ce = cross_entropy(p.view(), 1).unwrap();
        assert!((ce - -(ex[1] / z).ln()).abs() < 1e-10);
        let scores = cosine_scores(array![1.0, 0.0].view(), protos.view(), tau).unwrap();
        assert!((scores.cross_entropy(1) - -(ex[1] / z).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_edges() {
        assert_eq!(cross_entropy(array![0.0, 1.0].view(), 1).unwrap(), 0.0);
        let n = 7;
        let uniform = Array1::from_elem(n, 1.0 / n as f64);
        assert!((cross_entropy(uniform.view(), 3).unwrap() - (n as f64).ln()).abs() < 1e-12);
        assert!(cross_entropy(array![0.0, 1.0].view(), 0)
            .unwrap()
            .is_finite());
        assert!(cross_entropy(array![1.0].view(), 3).is_err());
        // Very confident logits still give a finite loss.
        assert!(cross_entropy_from_logits(array![1000.0, -1000.0].view(), 1).is_finite());
    }

    #[test]
    fn zero_norm_is_degenerate() {
        let e = Embedder::zeros(2, 2, 2);
        let r = class_probabilities(
            array![1.0, 1.0].view(),
            &e,
            array![[1.0, 0.0]].view(),
            &ProbeConfig::default(),
        );
        assert!(matches!(r, Err(Error::Degenerate(_))));
        assert!(ProbeConfig::new(0.0).is_err());
    }

    #[test]
    fn word_vectors_average_multiword() {
        let wv = WordVectors::parse("red 1 0\nbus 0 2\nfake_fur 9 9\nfake 2 2\n").unwrap();
        assert_eq!(wv.embed_phrase("red").unwrap(), array![1.0, 0.0]);
        assert_eq!(wv.embed_phrase("Red bus").unwrap(), array![0.5, 1.0]);
        assert_eq!(wv.embed_phrase("fake_fur").unwrap(), array![9.0, 9.0]);
        assert!(wv.embed_phrase("unknown").is_none());
        assert!(WordVectors::parse("a 1 2\nb 1\n").is_err());

        let vocab =
            ConceptVocabulary::new(vec!["red".into(), "zzz".into()], vec!["bus".into()]).unwrap();
        let t =
            EmbeddingTable::from_word_vectors(&vocab, &wv, &mut keyed_rng(0, "w", &[])).unwrap();
        assert_eq!(t.attr_vectors.row(0), array![1.0, 0.0]);
        assert_eq!(t.obj_vectors.row(0), array![0.0, 2.0]);
    }

    #[test]
    fn vocabulary_rules() {
        assert!(ConceptVocabulary::new(vec!["a".into(), "a".into()], vec!["o".into()]).is_err());
        let v = ConceptVocabulary::new(
            vec!["a".into(), "b".into()],
            vec!["x".into(), "y".into(), "z".into()],
        )
        .unwrap();
        assert_eq!(v.open_world_pairs().len(), 6);
        assert_eq!(v.open_world_pairs()[4], Pair::new(1, 1));
    }
}
