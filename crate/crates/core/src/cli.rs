//! Command-line entry points. Every command resolves a [`RunConfig`] from
//! an optional TOML file plus flags and writes it next to its outputs.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use image::{imageops, RgbImage};
use serde::{Deserialize, Serialize};

use crate::backbone::{cache_tokens, Backbone, BackboneConfig, CacheReport, TokenStore};
use crate::data::synth::{generate_synthetic, SynthConfig};
use crate::data::{load_manifest, Dataset, ImageRecord, Split, World};
use crate::emd::Solver;
use crate::error::{Error, Result};
use crate::evaluation::{curve_csv, curves_svg, evaluate, EvaluationCurve, MetricsReport};
use crate::inference::{score_split, select_beta, write_score_dump, BetaSelection};
use crate::model::ModelConfig;
use crate::retrieval::{
    concept_retrieve, image_to_text, text_to_image, Concept, FeatureIndex, Hit, Ranking,
};
use crate::trainer::{Checkpoint, FitReport, TrainConfig, TrainData, Trainer};

/// Default output root when neither a flag nor the config names one.
pub const OUTPUT_ENV: &str = "ADE_OUTPUT_ROOT";

/// `auto` selects the blend weight on the validation split.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum BetaChoice {
    #[default]
    Auto,
    Fixed(f64),
}

impl std::str::FromStr for BetaChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(BetaChoice::Auto);
        }
        match s.parse::<f64>() {
            Ok(b) if b >= 0.0 && b.is_finite() => Ok(BetaChoice::Fixed(b)),
            _ => Err(Error::Config(format!(
                "beta must be auto or a non-negative number, got {s:?}"
            ))),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BetaRepr {
    Number(f64),
    Text(String),
}

impl Serialize for BetaChoice {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BetaChoice::Auto => BetaRepr::Text("auto".into()),
            BetaChoice::Fixed(b) => BetaRepr::Number(*b),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for BetaChoice {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match BetaRepr::deserialize(d)? {
            BetaRepr::Number(b) => Ok(BetaChoice::Fixed(b)),
            BetaRepr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    pub world: World,
    pub beta: BetaChoice,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: Split::Test,
            world: World::Closed,
            beta: BetaChoice::Auto,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieveConfig {
    pub k: usize,
    /// Split whose images form the searchable index.
    pub index_split: Split,
}

impl Default for RetrieveConfig {
    fn default() -> Self {
        RetrieveConfig {
            k: 5,
            index_split: Split::Train,
        }
    }
}

/// Everything a command needs, merged from file and flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides the seeds of the synth, model and train sections.
    pub seed: Option<u64>,
    pub manifest: Option<PathBuf>,
    /// Token cache; defaults to `tokens.bin` beside the manifest.
    pub store: Option<PathBuf>,
    pub synth: SynthConfig,
    pub backbone: BackboneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub retrieve: RetrieveConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Propagates the root seed into each section.
    pub fn resolve(mut self) -> Self {
        if let Some(s) = self.seed {
            self.synth.seed = s;
            self.model.seed = s;
            self.train.seed = s;
        }
        self
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    fn manifest(&self) -> Result<&Path> {
        self.manifest
            .as_deref()
            .ok_or_else(|| Error::Config("no manifest given (--manifest)".into()))
    }

    pub fn store_path(&self) -> Result<PathBuf> {
        match &self.store {
            Some(p) => Ok(p.clone()),
            None => Ok(self
                .manifest()?
                .parent()
                .unwrap_or(Path::new("."))
                .join("tokens.bin")),
        }
    }
}

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Parser, Debug)]
#[command(
    name = "ade",
    version,
    about = "Attention-based concept disentanglement for compositional zero-shot learning"
)]
pub struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic color-by-shape dataset.
    Synth(SynthArgs),
    /// Encode every manifest image into the token cache.
    Cache(CacheArgs),
    /// Train a model and keep the best validation checkpoint.
    Train(TrainArgs),
    /// Score a split and compute the calibrated accuracy curve.
    Eval(EvalArgs),
    /// Text-to-image, image-to-text and concept retrieval.
    Retrieve(RetrieveArgs),
    /// Plot unseen-seen curves from one or more eval outputs.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of colors (attributes).
    #[arg(long)]
    pub colors: Option<usize>,
    /// Number of shapes (objects).
    #[arg(long)]
    pub shapes: Option<usize>,
    /// Training images per seen pair.
    #[arg(long)]
    pub train_per_pair: Option<usize>,
    /// Validation and test images per pair.
    #[arg(long)]
    pub eval_per_pair: Option<usize>,
    /// Fraction of pairs withheld from training.
    #[arg(long = "unseen-frac")]
    pub unseen_fraction: Option<f64>,
    /// Image side in pixels.
    #[arg(long)]
    pub image_size: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct CacheArgs {
    /// Dataset manifest (JSON lines).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Token cache; defaults to `tokens.bin` beside the manifest.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// safetensors ViT weights; switches the backbone to external mode.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset manifest (JSON lines).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Token cache; defaults to `tokens.bin` beside the manifest.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// safetensors ViT weights the cache was built with.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    /// Weight of the transport regularizer.
    #[arg(long)]
    pub reg_weight: Option<f64>,
    /// none, self or cross.
    #[arg(long)]
    pub attention: Option<String>,
    /// Transport solver for the regularizer.
    #[arg(long, value_enum)]
    pub solver: Option<SolverArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from the run directory's last checkpoint.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SolverArg {
    Exact,
    Sinkhorn,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Checkpoint file; defaults to the run's best checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Split to score.
    #[arg(long)]
    pub split: Option<SplitArg>,
    /// closed or open.
    #[arg(long)]
    pub world: Option<String>,
    /// auto or a fixed value.
    #[arg(long)]
    pub beta: Option<String>,
    /// Output directory; defaults to `<run>/eval-<split>-<world>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrieveMode {
    T2i,
    I2t,
    Concept,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Checkpoint file; defaults to the run's best checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: RetrieveMode,
    /// Composition for t2i, as "attribute object".
    #[arg(long)]
    pub query: Option<String>,
    /// Query image id for i2t and concept.
    #[arg(long)]
    pub image: Option<String>,
    /// attribute or object, for concept mode.
    #[arg(long)]
    pub concept: Option<String>,
    /// Number of hits.
    #[arg(long)]
    pub k: Option<usize>,
    /// JSON report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Contact sheet of retrieved images (PNG).
    #[arg(long)]
    pub sheet: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// metrics.json files written by `eval`.
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    /// Legend entries, one per input; file stems otherwise.
    #[arg(long = "label")]
    pub labels: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn base_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_weights(cfg: &mut RunConfig, weights: Option<PathBuf>) {
    if let Some(w) = weights {
        cfg.backbone = BackboneConfig {
            seed: cfg.backbone.seed,
            ..BackboneConfig::vit_base_16(w)
        };
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = base_config(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => {
            set(&mut cfg.synth.colors, a.colors);
            set(&mut cfg.synth.shapes, a.shapes);
            set(&mut cfg.synth.train_per_pair, a.train_per_pair);
            set(&mut cfg.synth.eval_per_pair, a.eval_per_pair);
            set(&mut cfg.synth.unseen_fraction, a.unseen_fraction);
            set(&mut cfg.synth.image_size, a.image_size);
            cfg.seed = a.seed.or(cfg.seed);
            let cfg = cfg.resolve();
            let out = a.out.unwrap_or_else(|| output_root().join("synth"));
            let manifest = cmd_synth(&cfg, &out)?;
            println!("{}", manifest.display());
        }
        Command::Cache(a) => {
            cfg.manifest = a.manifest.or(cfg.manifest);
            cfg.store = a.store.or(cfg.store);
            set_weights(&mut cfg, a.weights);
            let cfg = cfg.resolve();
            let (store, report) = cmd_cache(&cfg)?;
            println!(
                "{} entries ({} encoded, {} reused)",
                store.len(),
                report.encoded,
                report.reused
            );
        }
        Command::Train(a) => {
            cfg.manifest = a.manifest.or(cfg.manifest);
            cfg.store = a.store.or(cfg.store);
            set_weights(&mut cfg, a.weights);
            set(&mut cfg.train.epochs, a.epochs);
            set(&mut cfg.train.batch_size, a.batch_size);
            set(&mut cfg.train.learning_rate, a.learning_rate);
            set(&mut cfg.train.reg_weight, a.reg_weight);
            if let Some(m) = a.attention {
                cfg.model.attention = m.parse()?;
            }
            match a.solver {
                Some(SolverArg::Exact) => cfg.model.solver = Solver::Exact,
                Some(SolverArg::Sinkhorn) => cfg.model.solver = Solver::sinkhorn_default(),
                None => {}
            }
            cfg.seed = a.seed.or(cfg.seed);
            let cfg = cfg.resolve();
            let out = a
                .out
                .unwrap_or_else(|| output_root().join(format!("run-seed{}", cfg.train.seed)));
            let report = cmd_train(&cfg, &out, a.resume)?;
            println!(
                "best val AUC {:.2} at epoch {} ({})",
                report.best_auc,
                report.best_epoch,
                out.join("best.ckpt").display()
            );
        }
        Command::Eval(a) => {
            if let Some(run) = &a.run {
                let saved = run.join("resolved.toml");
                if cli.config.is_none() && saved.exists() {
                    cfg = RunConfig::load(&saved)?;
                }
            }
            cfg.manifest = a.manifest.or(cfg.manifest);
            cfg.store = a.store.or(cfg.store);
            if let Some(s) = a.split {
                cfg.eval.split = match s {
                    SplitArg::Val => Split::Val,
                    SplitArg::Test => Split::Test,
                };
            }
            if let Some(w) = a.world {
                cfg.eval.world = w.parse()?;
            }
            if let Some(b) = a.beta {
                cfg.eval.beta = b.parse()?;
            }
            let cfg = cfg.resolve();
            let ckpt = checkpoint_path(a.checkpoint, a.run.as_deref())?;
            let out = match (a.out, &a.run) {
                (Some(o), _) => o,
                (None, Some(run)) => run.join(format!(
                    "eval-{}-{}",
                    cfg.eval.split,
                    world_name(cfg.eval.world)
                )),
                (None, None) => output_root().join("eval"),
            };
            let summary = cmd_eval(&cfg, &ckpt, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary.report)?);
        }
        Command::Retrieve(a) => {
            if let Some(run) = &a.run {
                let saved = run.join("resolved.toml");
                if cli.config.is_none() && saved.exists() {
                    cfg = RunConfig::load(&saved)?;
                }
            }
            cfg.manifest = a.manifest.or(cfg.manifest);
            cfg.store = a.store.or(cfg.store);
            set(&mut cfg.retrieve.k, a.k);
            let cfg = cfg.resolve();
            let ckpt = checkpoint_path(a.checkpoint, a.run.as_deref())?;
            let query = RetrieveQuery {
                mode: a.mode,
                composition: a.query,
                image: a.image,
                concept: a.concept.as_deref().map(str::parse).transpose()?,
            };
            let report = cmd_retrieve(&cfg, &ckpt, &query, a.sheet.as_deref())?;
            let json = serde_json::to_string_pretty(&report)?;
            match a.out {
                Some(path) => {
                    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
                    cfg.write(&sibling(&path, "resolved.toml"))?;
                }
                None => println!("{json}"),
            }
        }
        Command::Plot(a) => {
            cmd_plot(&a.inputs, &a.labels, &a.out)?;
            cfg.write(&sibling(&a.out, "resolved.toml"))?;
        }
    }
    Ok(())
}

fn world_name(w: World) -> &'static str {
    match w {
        World::Closed => "closed",
        World::Open => "open",
    }
}

/// `<stem>.<suffix>` beside `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn checkpoint_path(explicit: Option<PathBuf>, run: Option<&Path>) -> Result<PathBuf> {
    explicit
        .or_else(|| run.map(|r| r.join("best.ckpt")))
        .ok_or_else(|| Error::Config("give --run or --checkpoint".into()))
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let (_, manifest) = generate_synthetic(&cfg.synth, out)?;
    cfg.write(&out.join("resolved.toml"))?;
    Ok(manifest)
}

fn load_data(cfg: &RunConfig) -> Result<(Dataset, TokenStore, CacheReport)> {
    let dataset = load_manifest(cfg.manifest()?)?;
    let backbone = Backbone::new(cfg.backbone.clone())?;
    let (store, report) = cache_tokens(&dataset.records, &backbone, &cfg.store_path()?)?;
    Ok((dataset, store, report))
}

pub fn cmd_cache(cfg: &RunConfig) -> Result<(TokenStore, CacheReport)> {
    let (_, store, report) = load_data(cfg)?;
    Ok((store, report))
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, resume: bool) -> Result<FitReport> {
    let (dataset, store, report) = load_data(cfg)?;
    log::info!(
        "token cache: {} encoded, {} reused",
        report.encoded,
        report.reused
    );
    let mut trainer = if resume {
        let ckpt = Checkpoint::load(&out.join("last.ckpt"))?;
        let mut t = Trainer::from_checkpoint(&ckpt)?;
        t.config.epochs = cfg.train.epochs;
        t
    } else {
        Trainer::new(
            cfg.model.clone(),
            cfg.train.clone(),
            cfg.backbone.clone(),
            dataset.vocab.clone(),
        )?
    };
    if trainer.vocab != dataset.vocab {
        return Err(Error::Checkpoint(
            "checkpoint vocabulary differs from the manifest".into(),
        ));
    }
    cfg.write(&out.join("resolved.toml"))?;
    let data = TrainData::new(&dataset, &store)?;
    trainer.fit(&data, Some(out))
}

/// Contents of an eval output's `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub split: Split,
    pub world: World,
    pub beta: f64,
    pub beta_selection: Option<BetaSelection>,
    pub candidates: usize,
    pub images: usize,
    pub report: MetricsReport,
    pub curve: EvaluationCurve,
}

fn load_model(
    cfg: &RunConfig,
    ckpt: &Path,
) -> Result<(Checkpoint, crate::model::Model, Dataset, TokenStore)> {
    let checkpoint = Checkpoint::load(ckpt)?;
    let model = checkpoint.model()?;
    let run_cfg = RunConfig {
        backbone: checkpoint.config.backbone.clone(),
        ..cfg.clone()
    };
    let (dataset, store, _) = load_data(&run_cfg)?;
    if dataset.vocab != checkpoint.config.vocabulary()? {
        return Err(Error::Checkpoint(
            "checkpoint vocabulary differs from the manifest".into(),
        ));
    }
    Ok((checkpoint, model, dataset, store))
}

pub fn cmd_eval(cfg: &RunConfig, ckpt: &Path, out: &Path) -> Result<EvalSummary> {
    let (checkpoint, model, dataset, store) = load_model(cfg, ckpt)?;
    let mc = &checkpoint.config.model;
    let (split, world) = (cfg.eval.split, cfg.eval.world);
    let (beta, selection) = match cfg.eval.beta {
        BetaChoice::Fixed(b) => (b, None),
        BetaChoice::Auto => {
            let val = score_split(&model, mc, &dataset, &store, Split::Val, world)?;
            let sel = select_beta(&val)?;
            (sel.beta, Some(sel))
        }
    };
    let table = score_split(&model, mc, &dataset, &store, split, world)?;
    let evaluation = evaluate(&table, beta)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let summary = EvalSummary {
        split,
        world,
        beta,
        beta_selection: selection,
        candidates: table.candidates.len(),
        images: table.images.len(),
        report: evaluation.report,
        curve: evaluation.curve,
    };
    let write = |name: &str, text: String| -> Result<()> {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("metrics.json", serde_json::to_string_pretty(&summary)?)?;
    write("curve.csv", curve_csv(&summary.curve))?;
    write(
        "curve.svg",
        curves_svg(&[(format!("{split} {}", world_name(world)), &summary.curve)])?,
    )?;
    write_score_dump(
        &table,
        &dataset.vocab.attributes,
        &dataset.vocab.objects,
        beta,
        &out.join("scores.jsonl"),
    )?;
    cfg.write(&out.join("resolved.toml"))?;
    Ok(summary)
}

pub struct RetrieveQuery {
    pub mode: RetrieveMode,
    pub composition: Option<String>,
    pub image: Option<String>,
    pub concept: Option<Concept>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RetrievalHit {
    pub rank: usize,
    pub label: String,
    pub similarity: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RetrieveReport {
    pub mode: RetrieveMode,
    pub query: String,
    pub k: usize,
    pub truncated: bool,
    pub hits: Vec<RetrievalHit>,
}

fn parse_composition(dataset: &Dataset, text: &str) -> Result<crate::embedding::Pair> {
    let mut parts = text.split_whitespace();
    let (Some(a), Some(o), None) = (parts.next(), parts.next(), parts.next()) else {
        return Err(Error::Config(format!(
            "composition {text:?} must be \"attribute object\""
        )));
    };
    let attr = dataset
        .vocab
        .attribute_index(a)
        .ok_or_else(|| Error::Config(format!("unknown attribute {a:?}")))?;
    let obj = dataset
        .vocab
        .object_index(o)
        .ok_or_else(|| Error::Config(format!("unknown object {o:?}")))?;
    Ok(crate::embedding::Pair::new(attr, obj))
}

pub fn cmd_retrieve(
    cfg: &RunConfig,
    ckpt: &Path,
    query: &RetrieveQuery,
    sheet: Option<&Path>,
) -> Result<RetrieveReport> {
    let (checkpoint, model, dataset, store) = load_model(cfg, ckpt)?;
    let mc = &checkpoint.config.model;
    let k = cfg.retrieve.k;
    let image_tokens =
        |id: &str| -> Result<ndarray::Array2<f64>> { store.gather([id]).map(|mut v| v.remove(0)) };
    let needs_image = || {
        query
            .image
            .as_deref()
            .ok_or_else(|| Error::Config("--image is required for this mode".into()))
    };
    let build_index = || -> Result<FeatureIndex> {
        let records: Vec<&ImageRecord> = dataset
            .split_records(cfg.retrieve.index_split)
            .map(|(_, r)| r)
            .collect();
        let tokens = store.gather(records.iter().map(|r| r.id.as_str()))?;
        FeatureIndex::build(
            &model,
            mc,
            records.iter().map(|r| r.id.clone()).collect(),
            records.iter().map(|r| r.pair()).collect(),
            &tokens,
        )
    };
    let image_hits = |r: Ranking<String>| -> Vec<RetrievalHit> {
        r.hits
            .into_iter()
            .enumerate()
            .map(|(i, Hit { item, similarity })| RetrievalHit {
                rank: i + 1,
                label: item,
                similarity,
            })
            .collect()
    };
    let (description, truncated, hits) = match query.mode {
        RetrieveMode::T2i => {
            let text = query
                .composition
                .as_deref()
                .ok_or_else(|| Error::Config("--query is required for t2i".into()))?;
            let pair = parse_composition(&dataset, text)?;
            let r = text_to_image(&model, pair, k, &build_index()?)?;
            (text.to_string(), r.truncated, image_hits(r))
        }
        RetrieveMode::Concept => {
            let id = needs_image()?;
            let concept = query
                .concept
                .ok_or_else(|| Error::Config("--concept is required for concept mode".into()))?;
            let r = concept_retrieve(
                &model,
                mc,
                image_tokens(id)?.view(),
                concept,
                k,
                &build_index()?,
            )?;
            (format!("{id} ({concept:?})"), r.truncated, image_hits(r))
        }
        RetrieveMode::I2t => {
            let id = needs_image()?;
            let candidates = dataset
                .split
                .candidates(&dataset.vocab, World::Open, Split::Test);
            let r = image_to_text(&model, mc, image_tokens(id)?.view(), &candidates.pairs, k)?;
            let hits = r
                .hits
                .iter()
                .enumerate()
                .map(|(i, h)| RetrievalHit {
                    rank: i + 1,
                    label: dataset.vocab.pair_name(h.item),
                    similarity: h.similarity,
                })
                .collect();
            (id.to_string(), r.truncated, hits)
        }
    };
    if let Some(path) = sheet {
        let ids: Vec<&str> = match query.mode {
            RetrieveMode::I2t => query.image.iter().map(String::as_str).collect(),
            _ => query
                .image
                .iter()
                .map(String::as_str)
                .chain(hits.iter().map(|h| h.label.as_str()))
                .collect(),
        };
        contact_sheet(&dataset, &ids, path)?;
    }
    Ok(RetrieveReport {
        mode: query.mode,
        query: description,
        k,
        truncated,
        hits,
    })
}

/// One row of thumbnails, in order.
fn contact_sheet(dataset: &Dataset, ids: &[&str], path: &Path) -> Result<()> {
    const CELL: u32 = 96;
    let mut sheet = RgbImage::from_pixel(
        CELL * ids.len().max(1) as u32,
        CELL,
        image::Rgb([255, 255, 255]),
    );
    for (i, id) in ids.iter().enumerate() {
        let idx = dataset
            .index_of_id(id)
            .ok_or_else(|| Error::Dataset(format!("unknown image id {id:?}")))?;
        let img = crate::backbone::load_image(&dataset.records[idx].path)?;
        let thumb = imageops::resize(&img, CELL, CELL, imageops::FilterType::Nearest);
        imageops::replace(&mut sheet, &thumb, i as i64 * CELL as i64, 0);
    }
    sheet.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn cmd_plot(inputs: &[PathBuf], labels: &[String], out: &Path) -> Result<()> {
    if !labels.is_empty() && labels.len() != inputs.len() {
        return Err(Error::Config(format!(
            "{} labels for {} inputs",
            labels.len(),
            inputs.len()
        )));
    }
    let mut curves = Vec::new();
    for (i, p) in inputs.iter().enumerate() {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let summary: EvalSummary = serde_json::from_str(&text)?;
        if summary.curve.points.is_empty() {
            return Err(Error::Evaluation(format!("{}: empty curve", p.display())));
        }
        let label = labels.get(i).cloned().unwrap_or_else(|| {
            p.parent()
                .and_then(|d| d.file_name())
                .or(p.file_stem())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        });
        curves.push((label, summary.curve));
    }
    let series: Vec<(String, &EvaluationCurve)> =
        curves.iter().map(|(l, c)| (l.clone(), c)).collect();
    let svg = curves_svg(&series)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(out, svg).map_err(|e| Error::io(out, e))
}
