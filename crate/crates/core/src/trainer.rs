//! Training loop: concept-sharing triples, the regularized objective, Adam
//! updates, per-epoch validation and checkpoints.
//!
//! Checkpoint layout, integers little-endian:
//!
//! ```text
//! magic     8 bytes  "ADECKPT1"
//! hash     32 bytes  SHA-256 of the header JSON
//! epoch     u64      completed epochs
//! step      u64      optimizer steps taken
//! len       u32      header JSON length
//! header    len bytes
//! n         u64      parameter count
//! params    n x f64
//! t         u64      Adam step count
//! m, v      2 x n x f64
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, TokenStore};
use crate::data::sampler::{PairSample, PairSampler};
use crate::data::{CandidateSet, Dataset, Split, World};
use crate::embedding::ConceptVocabulary;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, MetricsReport};
use crate::inference::score_images;
use crate::model::{LossBreakdown, Model, ModelConfig, ObjectiveOptions, Triple};
use crate::nn::Params;
use crate::rng::keyed_rng;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ADECKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: u64,
    /// Drives shuffling and partner sampling.
    pub seed: u64,
    pub reg_weight: f64,
    /// Blend weight used for validation during training.
    pub beta: f64,
    /// Also keep `epoch-N.ckpt` every this many epochs; 0 keeps only the
    /// best and last checkpoints.
    pub checkpoint_every: u64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            reg_weight: 1.0,
            beta: 1.0,
            checkpoint_every: 0,
            weight_decay: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{what} is out of range")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate");
        }
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        if !(self.reg_weight >= 0.0 && self.reg_weight.is_finite()) {
            return bad("reg_weight");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay");
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2)) {
            return bad("adam betas");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps");
        }
        Ok(())
    }
}

/// Adam moments over the flattened parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
}

/// Tokens of every record, the partner sampler and the training candidates.
pub struct TrainData<'a> {
    pub dataset: &'a Dataset,
    pub tokens: Vec<Array2<f64>>,
    pub sampler: PairSampler,
    pub candidates: CandidateSet,
}

impl<'a> TrainData<'a> {
    pub fn new(dataset: &'a Dataset, store: &TokenStore) -> Result<Self> {
        let tokens = store.gather(dataset.records.iter().map(|r| r.id.as_str()))?;
        let sampler = PairSampler::new(dataset);
        if sampler.train_indices().is_empty() {
            return Err(Error::Dataset("no training images".into()));
        }
        Ok(TrainData {
            dataset,
            tokens,
            sampler,
            candidates: dataset
                .split
                .candidates(&dataset.vocab, World::Closed, Split::Train),
        })
    }

    /// Minibatches of one epoch: a keyed shuffle of the training images,
    /// each paired with keyed partners.
    pub fn epoch_batches(&self, epoch: u64, seed: u64, batch_size: usize) -> Vec<Vec<PairSample>> {
        let mut order = self.sampler.train_indices().to_vec();
        order.shuffle(&mut keyed_rng(seed, "shuffle", &[epoch]));
        order
            .chunks(batch_size)
            .map(|c| {
                c.iter()
                    .map(|&t| self.sampler.sample(t, epoch, seed))
                    .collect()
            })
            .collect()
    }

    /// Validation scores of `model` in the closed world.
    pub fn validate(
        &self,
        model: &Model,
        config: &ModelConfig,
        beta: f64,
    ) -> Result<MetricsReport> {
        let idx: Vec<usize> = self
            .dataset
            .split_records(Split::Val)
            .map(|(i, _)| i)
            .collect();
        let records: Vec<_> = idx.iter().map(|&i| &self.dataset.records[i]).collect();
        let tokens: Vec<Array2<f64>> = idx.iter().map(|&i| self.tokens[i].clone()).collect();
        let candidates =
            self.dataset
                .split
                .candidates(&self.dataset.vocab, World::Closed, Split::Val);
        let table = score_images(model, config, &candidates, &records, &tokens)?;
        Ok(evaluate(&table, beta)?.report)
    }
}

/// Everything that fixes the shape and meaning of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub backbone: BackboneConfig,
    pub attributes: Vec<String>,
    pub objects: Vec<String>,
    pub feature_dim: usize,
}

impl CheckpointConfig {
    pub fn vocabulary(&self) -> Result<ConceptVocabulary> {
        ConceptVocabulary::new(self.attributes.clone(), self.objects.clone())
    }

    pub fn hash(&self) -> Result<[u8; 32]> {
        Ok(Sha256::digest(serde_json::to_vec(self)?).into())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub epoch: u64,
    pub step: u64,
    pub params: Vec<f64>,
    pub adam: Adam,
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.config)?;
        let mut out = Vec::with_capacity(96 + header.len() + 24 * self.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&Sha256::digest(&header));
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        put_f64s(&mut out, &self.params);
        out.extend_from_slice(&self.adam.t.to_le_bytes());
        put_f64s(&mut out, &self.adam.m);
        put_f64s(&mut out, &self.adam.v);
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let hash: [u8; 32] = c.take(32)?.try_into().expect("32 bytes");
        let epoch = c.u64()?;
        let step = c.u64()?;
        let len = u32::from_le_bytes(c.take(4)?.try_into().expect("4 bytes")) as usize;
        let header = c.take(len)?;
        let digest: [u8; 32] = Sha256::digest(header).into();
        if digest != hash {
            return Err(Error::Checkpoint("header does not match its hash".into()));
        }
        let config: CheckpointConfig = serde_json::from_slice(header)?;
        let n = c.u64()? as usize;
        let params = c.f64s(n)?;
        let t = c.u64()?;
        let m = c.f64s(n)?;
        let v = c.f64s(n)?;
        if c.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            config,
            epoch,
            step,
            params,
            adam: Adam { m, v, t },
        })
    }

    /// Writes through a temporary file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = PathBuf::from(format!("{}.tmp", path.display()));
        std::fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&buf)
    }

    /// Rebuilds the model. Word vectors are not reread; their values are
    /// part of the stored parameters.
    pub fn model(&self) -> Result<Model> {
        let mut skeleton = self.config.model.clone();
        skeleton.word_vectors = None;
        let mut model = Model::init(
            &skeleton,
            self.config.feature_dim,
            &self.config.vocabulary()?,
        )?;
        if model.num_params() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} stored parameters, model has {}",
                self.params.len(),
                model.num_params()
            )));
        }
        model.set_flat(&self.params);
        Ok(model)
    }
}

/// Metrics of one epoch, one line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub step: u64,
    pub train: LossBreakdown,
    pub val: MetricsReport,
    pub best: bool,
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: u64,
    pub best_auc: f64,
    pub best_model: Model,
}

pub struct Trainer {
    pub model: Model,
    pub model_config: ModelConfig,
    pub config: TrainConfig,
    pub backbone: BackboneConfig,
    pub vocab: ConceptVocabulary,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: u64,
    pub step: u64,
    decay: Vec<bool>,
}

fn decay_mask(model: &Model, config: &ModelConfig) -> Vec<bool> {
    let mut mask = Vec::with_capacity(model.num_params());
    model.visit("", &mut |name, _, data| {
        let frozen = !config.train_prototypes && name.starts_with("table.");
        mask.extend(std::iter::repeat_n(!frozen, data.len()));
    });
    mask
}

impl Trainer {
    pub fn new(
        model_config: ModelConfig,
        config: TrainConfig,
        backbone: BackboneConfig,
        vocab: ConceptVocabulary,
    ) -> Result<Self> {
        config.validate()?;
        if config.reg_weight != 0.0 && model_config.attention != crate::model::AttentionMode::Cross
        {
            return Err(Error::Config(
                "reg_weight must be 0 unless attention is cross".into(),
            ));
        }
        let model = Model::init(&model_config, backbone.dim, &vocab)?;
        let adam = Adam::new(model.num_params());
        let decay = decay_mask(&model, &model_config);
        Ok(Trainer {
            model,
            model_config,
            config,
            backbone,
            vocab,
            adam,
            epoch: 0,
            step: 0,
            decay,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = ckpt.model()?;
        let decay = decay_mask(&model, &ckpt.config.model);
        Ok(Trainer {
            model,
            model_config: ckpt.config.model.clone(),
            config: ckpt.config.train.clone(),
            backbone: ckpt.config.backbone.clone(),
            vocab: ckpt.config.vocabulary()?,
            adam: ckpt.adam.clone(),
            epoch: ckpt.epoch,
            step: ckpt.step,
            decay,
        })
    }

    pub fn checkpoint_config(&self) -> CheckpointConfig {
        CheckpointConfig {
            model: self.model_config.clone(),
            train: self.config.clone(),
            backbone: self.backbone.clone(),
            attributes: self.vocab.attributes.clone(),
            objects: self.vocab.objects.clone(),
            feature_dim: self.model.feature_dim(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.checkpoint_of(&self.model)
    }

    fn checkpoint_of(&self, model: &Model) -> Checkpoint {
        Checkpoint {
            config: self.checkpoint_config(),
            epoch: self.epoch,
            step: self.step,
            params: model.to_flat(),
            adam: self.adam.clone(),
        }
    }

    /// One optimizer update on `samples`.
    pub fn train_step(
        &mut self,
        data: &TrainData,
        samples: &[PairSample],
    ) -> Result<LossBreakdown> {
        let mut bad = None;
        self.model.visit("", &mut |name, _, d| {
            if bad.is_none() && d.iter().any(|v| !v.is_finite()) {
                bad = Some(name.to_string());
            }
        });
        if let Some(name) = bad {
            return Err(Error::NonFinite {
                step: self.step + 1,
                detail: format!("parameter {name} is not finite"),
            });
        }
        let records = &data.dataset.records;
        let batch = samples
            .iter()
            .map(|s| {
                let r = &records[s.target];
                let comp = data.candidates.index_of(r.pair()).ok_or_else(|| {
                    Error::Dataset(format!("{}: not a training composition", r.id))
                })?;
                Ok(Triple {
                    target: data.tokens[s.target].view(),
                    attr_partner: data.tokens[s.attr_partner].view(),
                    obj_partner: data.tokens[s.obj_partner].view(),
                    attr: r.attr,
                    obj: r.obj,
                    comp,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let opts = ObjectiveOptions {
            reg_weight: self.config.reg_weight,
            fixed_plans: None,
            compute_grad: true,
        };
        let out =
            self.model
                .objective(&self.model_config, &batch, &data.candidates.pairs, &opts)?;
        let mut grad = out.grad.expect("gradient requested").to_flat();
        let ids = || {
            samples
                .iter()
                .map(|s| records[s.target].id.as_str())
                .collect::<Vec<_>>()
                .join(",")
        };
        if !out.loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                step: self.step + 1,
                detail: format!("losses {:?}; batch [{}]", out.loss, ids()),
            });
        }
        let mut params = self.model.to_flat();
        if self.config.weight_decay > 0.0 {
            for ((g, p), on) in grad.iter_mut().zip(&params).zip(&self.decay) {
                if *on {
                    *g += self.config.weight_decay * p;
                }
            }
        }
        self.adam.step(&mut params, &grad, &self.config);
        self.model.set_flat(&params);
        self.step += 1;
        Ok(out.loss)
    }

    /// One pass over the training images; returns step-averaged losses.
    pub fn run_epoch(&mut self, data: &TrainData) -> Result<LossBreakdown> {
        let batches = data.epoch_batches(self.epoch, self.config.seed, self.config.batch_size);
        let mut mean = LossBreakdown::default();
        for b in &batches {
            let l = self.train_step(data, b)?;
            mean.attr += l.attr;
            mean.attr_prime += l.attr_prime;
            mean.obj += l.obj;
            mean.obj_prime += l.obj_prime;
            mean.com += l.com;
            mean.reg += l.reg;
            mean.total += l.total;
        }
        let n = batches.len() as f64;
        for v in [
            &mut mean.attr,
            &mut mean.attr_prime,
            &mut mean.obj,
            &mut mean.obj_prime,
            &mut mean.com,
            &mut mean.reg,
            &mut mean.total,
        ] {
            *v /= n;
        }
        self.epoch += 1;
        Ok(mean)
    }

    /// Trains up to `config.epochs`, validating after every epoch. With an
    /// output directory, appends to `metrics.jsonl` and writes `best.ckpt`,
    /// `last.ckpt` and any periodic checkpoints there.
    pub fn fit(&mut self, data: &TrainData, out_dir: Option<&Path>) -> Result<FitReport> {
        let mut best: Option<(u64, f64, Model)> = None;
        let mut log = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("metrics.jsonl");
                // On resume, keep the log up to this checkpoint and pick up
                // the best epoch recorded so far.
                let mut kept = Vec::new();
                if self.epoch > 0 && path.exists() {
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    for line in text.lines().filter(|l| !l.trim().is_empty()) {
                        let r: EpochRecord = serde_json::from_str(line)?;
                        if r.epoch > self.epoch {
                            break;
                        }
                        if r.best {
                            best = Some((r.epoch, r.val.auc, self.model.clone()));
                        }
                        kept.extend_from_slice(line.as_bytes());
                        kept.push(b'\n');
                    }
                    let best_ckpt = dir.join("best.ckpt");
                    if let (Some(b), true) = (best.as_mut(), best_ckpt.exists()) {
                        b.2 = Checkpoint::load(&best_ckpt)?.model()?;
                    }
                }
                let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                f.write_all(&kept).map_err(|e| Error::io(&path, e))?;
                Some((f, path))
            }
            None => None,
        };
        let mut history = Vec::new();
        while self.epoch < self.config.epochs {
            let train = self.run_epoch(data)?;
            let val = data.validate(&self.model, &self.model_config, self.config.beta)?;
            let is_best = best.as_ref().is_none_or(|(_, auc, _)| val.auc > *auc);
            if is_best {
                best = Some((self.epoch, val.auc, self.model.clone()));
            }
            let record = EpochRecord {
                epoch: self.epoch,
                step: self.step,
                train,
                val,
                best: is_best,
            };
            log::info!(
                "epoch {} loss {:.4} val auc {:.2} hm {:.2}",
                record.epoch,
                record.train.total,
                record.val.auc,
                record.val.best_hm
            );
            if let (Some((f, path)), Some(dir)) = (log.as_mut(), out_dir) {
                let mut line = serde_json::to_vec(&record)?;
                line.push(b'\n');
                f.write_all(&line).map_err(|e| Error::io(&*path, e))?;
                if is_best {
                    self.checkpoint().save(&dir.join("best.ckpt"))?;
                }
                if self.config.checkpoint_every > 0
                    && self.epoch % self.config.checkpoint_every == 0
                {
                    self.checkpoint()
                        .save(&dir.join(format!("epoch-{}.ckpt", self.epoch)))?;
                }
            }
            history.push(record);
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(&dir.join("last.ckpt"))?;
        }
        let (best_epoch, best_auc, best_model) = match best {
            Some(b) => b,
            None => (self.epoch, f64::NAN, self.model.clone()),
        };
        Ok(FitReport {
            history,
            best_epoch,
            best_auc,
            best_model,
        })
    }
}
