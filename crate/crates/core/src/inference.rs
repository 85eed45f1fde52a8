//! Test-time scoring. Every branch self-attends over the single input, and
//! the composition distribution is blended with the product of the
//! independent attribute and object distributions.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::TokenStore;
use crate::data::{CandidateSet, Dataset, ImageRecord, Split, World};
use crate::embedding::{cosine_scores, Pair};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, Evaluation};
use crate::model::{Model, ModelConfig};

/// Blend weights tried during validation: 0.0, 0.1, ..., 1.0.
pub const BETA_GRID: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Per-image distributions before blending.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentScores {
    /// Cosine logits over the candidate compositions.
    pub comp_logits: Array1<f64>,
    pub comp: Array1<f64>,
    pub attr: Array1<f64>,
    pub obj: Array1<f64>,
}

impl ComponentScores {
    /// `p(c) + beta * p(a(c)) * p(o(c))` for each candidate.
    pub fn blend(&self, pairs: &[Pair], beta: f64) -> Array1<f64> {
        Array1::from_iter(
            pairs
                .iter()
                .zip(self.comp.iter())
                .map(|(p, pc)| pc + beta * self.attr[p.attr] * self.obj[p.obj]),
        )
    }

    /// The blend minus its smallest concept term, which is the same for
    /// every candidate and so changes no ranking. Adding the bare term
    /// absorbs composition probabilities far below it (they reach 1e-18 at
    /// low temperature) into ties; shifted, a uniform concept term adds
    /// exactly zero.
    pub fn ranking(&self, pairs: &[Pair], beta: f64) -> Array1<f64> {
        let concept: Vec<f64> = pairs
            .iter()
            .map(|p| self.attr[p.attr] * self.obj[p.obj])
            .collect();
        let floor = concept.iter().cloned().fold(f64::INFINITY, f64::min);
        Array1::from_iter(
            self.comp
                .iter()
                .zip(concept)
                .map(|(pc, pa)| pc + beta * (pa - floor)),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionScores {
    pub blended: Array1<f64>,
    pub components: ComponentScores,
    pub beta: f64,
    /// Candidate index of the highest blended score.
    pub prediction: usize,
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(scores: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

/// Scores images against a fixed candidate set. Composition prototypes are
/// computed once.
pub struct Scorer<'a> {
    model: &'a Model,
    config: &'a ModelConfig,
    pairs: &'a [Pair],
    comp_protos: Array2<f64>,
}

impl<'a> Scorer<'a> {
    pub fn new(
        model: &'a Model,
        config: &'a ModelConfig,
        candidates: &'a CandidateSet,
    ) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::Evaluation("empty candidate set".into()));
        }
        Ok(Scorer {
            model,
            config,
            pairs: &candidates.pairs,
            comp_protos: model.composition_prototypes(&candidates.pairs),
        })
    }

    pub fn components(&self, tokens: ArrayView2<f64>) -> Result<ComponentScores> {
        let [ea, eo, ec] = self.model.embed(tokens, self.config)?;
        let tau = self.config.temperature;
        let table = &self.model.table;
        let comp = cosine_scores(ec.view(), self.comp_protos.view(), tau)?;
        let attr = cosine_scores(ea.view(), table.attr_vectors.view(), tau)?;
        let obj = cosine_scores(eo.view(), table.obj_vectors.view(), tau)?;
        Ok(ComponentScores {
            comp_logits: comp.logits,
            comp: comp.probs,
            attr: attr.probs,
            obj: obj.probs,
        })
    }

    pub fn predict(&self, tokens: ArrayView2<f64>, beta: f64) -> Result<PredictionScores> {
        let components = self.components(tokens)?;
        let blended = components.blend(self.pairs, beta);
        Ok(PredictionScores {
            prediction: argmax(components.ranking(self.pairs, beta).view()),
            blended,
            components,
            beta,
        })
    }
}

/// Scores one image over `candidates` with blend weight `beta`.
pub fn predict(
    tokens: ArrayView2<f64>,
    model: &Model,
    config: &ModelConfig,
    candidates: &CandidateSet,
    beta: f64,
) -> Result<PredictionScores> {
    Scorer::new(model, config, candidates)?.predict(tokens, beta)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScores {
    pub id: String,
    /// Candidate index of the ground-truth composition.
    pub truth: usize,
    pub attr: usize,
    pub obj: usize,
    pub components: ComponentScores,
}

/// Component scores of a set of labelled images over one candidate set.
#[derive(Clone, Debug)]
pub struct ScoreTable {
    pub candidates: CandidateSet,
    pub images: Vec<ImageScores>,
}

impl ScoreTable {
    /// Ranking scores of the blend, one row per image.
    pub fn blended(&self, beta: f64) -> Array2<f64> {
        let c = self.candidates.len();
        let mut out = Array2::zeros((self.images.len(), c));
        for (mut row, img) in out.rows_mut().into_iter().zip(&self.images) {
            row.assign(&img.components.ranking(&self.candidates.pairs, beta));
        }
        out
    }

    pub fn truth(&self) -> Vec<usize> {
        self.images.iter().map(|i| i.truth).collect()
    }
}

/// Scores `records` (whose tokens are `tokens`, aligned) over `candidates`.
pub fn score_images(
    model: &Model,
    config: &ModelConfig,
    candidates: &CandidateSet,
    records: &[&ImageRecord],
    tokens: &[Array2<f64>],
) -> Result<ScoreTable> {
    if records.len() != tokens.len() {
        return Err(Error::Shape(format!(
            "{} records with {} token sequences",
            records.len(),
            tokens.len()
        )));
    }
    let scorer = Scorer::new(model, config, candidates)?;
    let images = records
        .par_iter()
        .zip(tokens.par_iter())
        .map(|(r, t)| {
            let truth = candidates.index_of(r.pair()).ok_or_else(|| {
                Error::Evaluation(format!("{}: composition is not a candidate", r.id))
            })?;
            Ok(ImageScores {
                id: r.id.clone(),
                truth,
                attr: r.attr,
                obj: r.obj,
                components: scorer.components(t.view())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreTable {
        candidates: candidates.clone(),
        images,
    })
}

/// Scores every image of `split` against that split's candidates in `world`.
pub fn score_split(
    model: &Model,
    config: &ModelConfig,
    dataset: &Dataset,
    store: &TokenStore,
    split: Split,
    world: World,
) -> Result<ScoreTable> {
    let records: Vec<&ImageRecord> = dataset.split_records(split).map(|(_, r)| r).collect();
    let tokens = store.gather(records.iter().map(|r| r.id.as_str()))?;
    let candidates = dataset.split.candidates(&dataset.vocab, world, split);
    score_images(model, config, &candidates, &records, &tokens)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaPoint {
    pub beta: f64,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaSelection {
    pub beta: f64,
    pub grid: Vec<BetaPoint>,
}

/// Runs the full protocol at every grid value and keeps the highest AUC;
/// the smallest beta wins ties.
pub fn select_beta(table: &ScoreTable) -> Result<BetaSelection> {
    let evals: Vec<Evaluation> = BETA_GRID
        .par_iter()
        .map(|&b| evaluate(table, b))
        .collect::<Result<_>>()?;
    let grid: Vec<BetaPoint> = BETA_GRID
        .iter()
        .zip(&evals)
        .map(|(&beta, e)| BetaPoint {
            beta,
            auc: e.report.auc,
        })
        .collect();
    let mut best = grid[0];
    for p in &grid[1..] {
        if p.auc > best.auc {
            best = *p;
        }
    }
    Ok(BetaSelection {
        beta: best.beta,
        grid,
    })
}

#[derive(Serialize, Deserialize)]
struct DumpHeader {
    attributes: Vec<String>,
    objects: Vec<String>,
    /// `[attribute index, object index]` per candidate.
    pairs: Vec<[usize; 2]>,
    names: Vec<String>,
    unseen: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct DumpLine {
    id: String,
    truth: usize,
    attr: usize,
    obj: usize,
    beta: f64,
    prediction: usize,
    blended: Vec<f64>,
    comp: Vec<f64>,
    comp_logits: Vec<f64>,
    attr_probs: Vec<f64>,
    obj_probs: Vec<f64>,
}

/// Candidate list written next to a score dump.
pub fn dump_header_path(dump: &Path) -> PathBuf {
    dump.with_extension("candidates.json")
}

/// Writes one JSON object per image to `path` and the candidate list to
/// [`dump_header_path`].
pub fn write_score_dump(
    table: &ScoreTable,
    attributes: &[String],
    objects: &[String],
    beta: f64,
    path: &Path,
) -> Result<()> {
    let c = &table.candidates;
    let header = DumpHeader {
        attributes: attributes.to_vec(),
        objects: objects.to_vec(),
        pairs: c.pairs.iter().map(|p| [p.attr, p.obj]).collect(),
        names: c
            .pairs
            .iter()
            .map(|p| format!("{} {}", attributes[p.attr], objects[p.obj]))
            .collect(),
        unseen: c.unseen.clone(),
    };
    let hp = dump_header_path(path);
    std::fs::write(&hp, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(&hp, e))?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for img in &table.images {
        let blended = img.components.blend(&c.pairs, beta);
        let line = DumpLine {
            id: img.id.clone(),
            truth: img.truth,
            attr: img.attr,
            obj: img.obj,
            beta,
            prediction: argmax(img.components.ranking(&c.pairs, beta).view()),
            blended: blended.to_vec(),
            comp: img.components.comp.to_vec(),
            comp_logits: img.components.comp_logits.to_vec(),
            attr_probs: img.components.attr.to_vec(),
            obj_probs: img.components.obj.to_vec(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a dump written by [`write_score_dump`] back into a table and the
/// beta it was blended with.
pub fn read_score_dump(path: &Path) -> Result<(ScoreTable, f64)> {
    let hp = dump_header_path(path);
    let text = std::fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let header: DumpHeader = serde_json::from_str(&text)?;
    let pairs: Vec<Pair> = header
        .pairs
        .iter()
        .map(|[a, o]| Pair::new(*a, *o))
        .collect();
    if header.unseen.len() != pairs.len() {
        return Err(Error::Evaluation(
            "candidate flags do not match pairs".into(),
        ));
    }
    let seen = pairs
        .iter()
        .zip(&header.unseen)
        .filter(|(_, u)| !**u)
        .map(|(p, _)| *p)
        .collect();
    let candidates = CandidateSet::new(pairs, &seen);
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut images = Vec::new();
    let mut beta = 0.0;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let d: DumpLine = serde_json::from_str(&line)?;
        if d.comp.len() != candidates.len() || d.truth >= candidates.len() {
            return Err(Error::Evaluation(format!("{}: malformed score row", d.id)));
        }
        beta = d.beta;
        images.push(ImageScores {
            id: d.id,
            truth: d.truth,
            attr: d.attr,
            obj: d.obj,
            components: ComponentScores {
                comp_logits: d.comp_logits.into(),
                comp: d.comp.into(),
                attr: d.attr_probs.into(),
                obj: d.obj_probs.into(),
            },
        });
    }
    Ok((ScoreTable { candidates, images }, beta))
}
