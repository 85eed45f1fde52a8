//! Dataset manifests and split semantics.
//!
//! A dataset is a JSON-lines manifest, one image per line:
//!
//! ```text
//! {"id": "train-0001", "path": "images/train/0001.png", "attribute": "red", "object": "circle", "split": "train"}
//! ```
//!
//! plus a sidecar `<manifest stem>.split.json` declaring the vocabulary and
//! the unseen pairs of the validation and test splits:
//!
//! ```text
//! {"attributes": ["red", ...], "objects": ["circle", ...],
//!  "val_unseen": [["red", "square"], ...], "test_unseen": [["blue", "circle"], ...]}
//! ```
//!
//! Seen pairs are exactly the pairs of the training images. Paths are
//! relative to the manifest directory.

pub mod sampler;
pub mod synth;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding::{ConceptVocabulary, Pair};
use crate::error::{Error, Result};

pub use sampler::{PairSample, PairSampler};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum World {
    #[default]
    Closed,
    Open,
}

impl std::str::FromStr for World {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed" => Ok(World::Closed),
            "open" => Ok(World::Open),
            other => Err(Error::Config(format!(
                "unknown world {other:?} (closed|open)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRecord {
    pub id: String,
    pub path: PathBuf,
    pub attr: usize,
    pub obj: usize,
    pub split: Split,
}

impl ImageRecord {
    pub fn pair(&self) -> Pair {
        Pair::new(self.attr, self.obj)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestLine {
    pub id: String,
    pub path: String,
    pub attribute: String,
    pub object: String,
    pub split: Split,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitFile {
    pub attributes: Vec<String>,
    pub objects: Vec<String>,
    #[serde(default)]
    pub val_unseen: Vec<[String; 2]>,
    #[serde(default)]
    pub test_unseen: Vec<[String; 2]>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub seen: BTreeSet<Pair>,
    pub val_unseen: BTreeSet<Pair>,
    pub test_unseen: BTreeSet<Pair>,
}

/// Candidate compositions for one evaluation, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub pairs: Vec<Pair>,
    /// `true` where the pair is not a training (seen) pair.
    pub unseen: Vec<bool>,
    index: HashMap<Pair, usize>,
}

impl CandidateSet {
    pub fn new(pairs: Vec<Pair>, seen: &BTreeSet<Pair>) -> Self {
        let unseen = pairs.iter().map(|p| !seen.contains(p)).collect();
        let index = pairs.iter().enumerate().map(|(i, p)| (*p, i)).collect();
        CandidateSet {
            pairs,
            unseen,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn index_of(&self, pair: Pair) -> Option<usize> {
        self.index.get(&pair).copied()
    }
}

impl SplitSpec {
    pub fn unseen_for(&self, split: Split) -> BTreeSet<Pair> {
        match split {
            Split::Train => self.val_unseen.union(&self.test_unseen).copied().collect(),
            Split::Val => self.val_unseen.clone(),
            Split::Test => self.test_unseen.clone(),
        }
    }

    /// Closed world: seen pairs plus the split's unseen pairs (every listed
    /// unseen pair for training). Open world: the full product.
    pub fn candidates(
        &self,
        vocab: &ConceptVocabulary,
        world: World,
        split: Split,
    ) -> CandidateSet {
        let pairs = match world {
            World::Open => vocab.open_world_pairs(),
            World::Closed => self.seen.union(&self.unseen_for(split)).copied().collect(),
        };
        CandidateSet::new(pairs, &self.seen)
    }

    fn validate(&self) -> Result<()> {
        for (name, set) in [("val", &self.val_unseen), ("test", &self.test_unseen)] {
            if let Some(p) = set.intersection(&self.seen).next() {
                return Err(Error::Manifest(format!(
                    "{name} unseen pair {p:?} is also a training pair"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<ImageRecord>,
    pub vocab: ConceptVocabulary,
    pub split: SplitSpec,
    pub root: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DatasetStats {
    pub attributes: usize,
    pub objects: usize,
    pub seen_pairs: usize,
    pub train_images: usize,
    pub val_seen_pairs: usize,
    pub val_unseen_pairs: usize,
    pub val_images: usize,
    pub test_seen_pairs: usize,
    pub test_unseen_pairs: usize,
    pub test_images: usize,
}

impl Dataset {
    pub fn split_records(&self, split: Split) -> impl Iterator<Item = (usize, &ImageRecord)> {
        self.records
            .iter()
            .enumerate()
            .filter(move |(_, r)| r.split == split)
    }

    pub fn index_of_id(&self, id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.id == id)
    }

    pub fn stats(&self) -> DatasetStats {
        let pairs_of = |split: Split, unseen: bool| {
            self.split_records(split)
                .map(|(_, r)| r.pair())
                .filter(|p| self.split.seen.contains(p) != unseen)
                .collect::<HashSet<_>>()
                .len()
        };
        DatasetStats {
            attributes: self.vocab.num_attributes(),
            objects: self.vocab.num_objects(),
            seen_pairs: self.split.seen.len(),
            train_images: self.split_records(Split::Train).count(),
            val_seen_pairs: pairs_of(Split::Val, false),
            val_unseen_pairs: pairs_of(Split::Val, true),
            val_images: self.split_records(Split::Val).count(),
            test_seen_pairs: pairs_of(Split::Test, false),
            test_unseen_pairs: pairs_of(Split::Test, true),
            test_images: self.split_records(Split::Test).count(),
        }
    }
}

pub fn split_file_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("split.json")
}

/// Loads and validates a manifest and its split sidecar.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let sidecar_path = split_file_path(path);
    let sidecar_text =
        std::fs::read_to_string(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
    let sidecar: SplitFile = serde_json::from_str(&sidecar_text)
        .map_err(|e| Error::Manifest(format!("{}: {e}", sidecar_path.display())))?;
    let lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str::<ManifestLine>(l)
                .map_err(|e| Error::Manifest(format!("{} line {}: {e}", path.display(), n + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    build_dataset(lines, sidecar, root)
}

pub fn build_dataset(
    lines: Vec<ManifestLine>,
    sidecar: SplitFile,
    root: PathBuf,
) -> Result<Dataset> {
    let vocab = ConceptVocabulary::new(sidecar.attributes.clone(), sidecar.objects.clone())?;
    let attr = |name: &str| {
        vocab
            .attribute_index(name)
            .ok_or_else(|| Error::Manifest(format!("unknown attribute {name:?}")))
    };
    let obj = |name: &str| {
        vocab
            .object_index(name)
            .ok_or_else(|| Error::Manifest(format!("unknown object {name:?}")))
    };
    let pairs = |list: &[[String; 2]]| -> Result<BTreeSet<Pair>> {
        list.iter()
            .map(|[a, o]| Ok(Pair::new(attr(a)?, obj(o)?)))
            .collect()
    };
    let val_unseen = pairs(&sidecar.val_unseen)?;
    let test_unseen = pairs(&sidecar.test_unseen)?;

    let mut ids = HashSet::new();
    let mut records = Vec::with_capacity(lines.len());
    for line in lines {
        if !ids.insert(line.id.clone()) {
            return Err(Error::Manifest(format!("duplicate id {:?}", line.id)));
        }
        records.push(ImageRecord {
            path: root.join(&line.path),
            attr: attr(&line.attribute)?,
            obj: obj(&line.object)?,
            split: line.split,
            id: line.id,
        });
    }
    let seen: BTreeSet<Pair> = records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| r.pair())
        .collect();
    let split = SplitSpec {
        seen,
        val_unseen,
        test_unseen,
    };
    split.validate()?;

    for r in &records {
        let p = r.pair();
        let ok = match r.split {
            Split::Train => true,
            Split::Val => split.seen.contains(&p) || split.val_unseen.contains(&p),
            Split::Test => split.seen.contains(&p) || split.test_unseen.contains(&p),
        };
        if !ok {
            return Err(Error::Manifest(format!(
                "{} image {:?} has pair ({}) that is neither seen nor a declared unseen pair",
                r.split,
                r.id,
                vocab.pair_name(p)
            )));
        }
    }
    if split.val_unseen.is_empty() && split.test_unseen.is_empty() {
        log::warn!("no unseen pairs declared; closed world reduces to seen-only classification");
    }
    let dataset = Dataset {
        records,
        vocab,
        split,
        root,
    };
    log::info!("loaded dataset: {:?}", dataset.stats());
    Ok(dataset)
}

/// Writes `dataset` as a manifest plus sidecar. Paths are stored relative to
/// the manifest directory.
pub fn write_manifest(dataset: &Dataset, path: &Path) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut out = String::new();
    for r in &dataset.records {
        let rel = r.path.strip_prefix(dir).unwrap_or(&r.path);
        let line = ManifestLine {
            id: r.id.clone(),
            path: rel.to_string_lossy().replace('\\', "/"),
            attribute: dataset.vocab.attributes[r.attr].clone(),
            object: dataset.vocab.objects[r.obj].clone(),
            split: r.split,
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
    let names = |set: &BTreeSet<Pair>| {
        set.iter()
            .map(|p| {
                [
                    dataset.vocab.attributes[p.attr].clone(),
                    dataset.vocab.objects[p.obj].clone(),
                ]
            })
            .collect::<Vec<_>>()
    };
    let sidecar = SplitFile {
        attributes: dataset.vocab.attributes.clone(),
        objects: dataset.vocab.objects.clone(),
        val_unseen: names(&dataset.split.val_unseen),
        test_unseen: names(&dataset.split.test_unseen),
    };
    let sidecar_path = split_file_path(path);
    std::fs::write(
        &sidecar_path,
        serde_json::to_string_pretty(&sidecar)? + "\n",
    )
    .map_err(|e| Error::io(&sidecar_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, a: &str, o: &str, split: Split) -> ManifestLine {
        ManifestLine {
            id: id.into(),
            path: format!("{id}.png"),
            attribute: a.into(),
            object: o.into(),
            split,
        }
    }

    fn sidecar(val: &[[&str; 2]], test: &[[&str; 2]]) -> SplitFile {
        let conv = |l: &[[&str; 2]]| {
            l.iter()
                .map(|[a, o]| [a.to_string(), o.to_string()])
                .collect()
        };
        SplitFile {
            attributes: vec!["red".into(), "blue".into()],
            objects: vec!["bus".into(), "wall".into()],
            val_unseen: conv(val),
            test_unseen: conv(test),
        }
    }

    #[test]
    fn train_image_with_unseen_pair_is_rejected() {
        let lines = vec![
            line("a", "red", "bus", Split::Train),
            line("b", "blue", "wall", Split::Train),
        ];
        let err =
            build_dataset(lines, sidecar(&[["blue", "wall"]], &[]), PathBuf::new()).unwrap_err();
        assert!(matches!(err, Error::Manifest(_)));
    }

    #[test]
    fn duplicate_ids_and_unknown_names() {
        let dup = vec![
            line("a", "red", "bus", Split::Train),
            line("a", "blue", "wall", Split::Train),
        ];
        assert!(build_dataset(dup, sidecar(&[], &[]), PathBuf::new()).is_err());
        let unknown = vec![line("a", "green", "bus", Split::Train)];
        assert!(build_dataset(unknown, sidecar(&[], &[]), PathBuf::new()).is_err());
    }

    #[test]
    fn empty_unseen_sets_are_accepted() {
        let lines = vec![
            line("a", "red", "bus", Split::Train),
            line("b", "blue", "wall", Split::Train),
            line("c", "red", "bus", Split::Test),
        ];
        let ds = build_dataset(lines, sidecar(&[], &[]), PathBuf::new()).unwrap();
        let c = ds.split.candidates(&ds.vocab, World::Closed, Split::Test);
        assert_eq!(c.len(), 2);
        assert!(c.unseen.iter().all(|u| !u));
    }

    #[test]
    fn candidate_sets() {
        let lines = vec![
            line("a", "red", "bus", Split::Train),
            line("b", "blue", "wall", Split::Train),
            line("c", "red", "wall", Split::Val),
            line("d", "blue", "bus", Split::Test),
        ];
        let ds = build_dataset(
            lines,
            sidecar(&[["red", "wall"]], &[["blue", "bus"]]),
            PathBuf::new(),
        )
        .unwrap();
        let val = ds.split.candidates(&ds.vocab, World::Closed, Split::Val);
        assert_eq!(val.len(), 3);
        assert_eq!(val.unseen.iter().filter(|u| **u).count(), 1);
        let open = ds.split.candidates(&ds.vocab, World::Open, Split::Val);
        assert_eq!(open.len(), 4);
        assert_eq!(open.unseen.iter().filter(|u| **u).count(), 2);
        let train = ds.split.candidates(&ds.vocab, World::Closed, Split::Train);
        assert_eq!(train.len(), 4);
        let stats = ds.stats();
        assert_eq!(
            (
                stats.seen_pairs,
                stats.val_unseen_pairs,
                stats.test_unseen_pairs
            ),
            (2, 1, 1)
        );
    }

    #[test]
    fn zappos_shaped_manifest_counts() {
        // 16 attributes x 12 objects with 83 seen pairs, 15/15 val and 18/18 test.
        let attrs: Vec<String> = (0..16).map(|i| format!("a{i}")).collect();
        let objs: Vec<String> = (0..12).map(|i| format!("o{i}")).collect();
        let all: Vec<(usize, usize)> = (0..16).flat_map(|a| (0..12).map(move |o| (a, o))).collect();
        // Deterministic interleaving so every attribute and object stays seen.
        let seen: Vec<(usize, usize)> = all
            .iter()
            .copied()
            .filter(|(a, o)| (a * 5 + o * 7) % 7 < 3)
            .take(83)
            .collect();
        assert_eq!(seen.len(), 83);
        let rest: Vec<(usize, usize)> = all.iter().copied().filter(|p| !seen.contains(p)).collect();
        let (val_u, test_u) = (&rest[..15], &rest[15..33]);
        let mut lines = Vec::new();
        for (k, &(a, o)) in seen.iter().enumerate() {
            lines.push(line(&format!("tr{k}"), &attrs[a], &objs[o], Split::Train));
        }
        for (k, &(a, o)) in seen.iter().take(15).chain(val_u).enumerate() {
            lines.push(line(&format!("va{k}"), &attrs[a], &objs[o], Split::Val));
        }
        for (k, &(a, o)) in seen.iter().take(18).chain(test_u).enumerate() {
            lines.push(line(&format!("te{k}"), &attrs[a], &objs[o], Split::Test));
        }
        let names = |l: &[(usize, usize)]| {
            l.iter()
                .map(|&(a, o)| [attrs[a].clone(), objs[o].clone()])
                .collect()
        };
        let side = SplitFile {
            attributes: attrs.clone(),
            objects: objs.clone(),
            val_unseen: names(val_u),
            test_unseen: names(test_u),
        };
        let ds = build_dataset(lines, side, PathBuf::new()).unwrap();
        let s = ds.stats();
        assert_eq!((s.attributes, s.objects, s.seen_pairs), (16, 12, 83));
        assert_eq!((s.val_seen_pairs, s.val_unseen_pairs), (15, 15));
        assert_eq!((s.test_seen_pairs, s.test_unseen_pairs), (18, 18));
        assert_eq!(
            ds.split
                .candidates(&ds.vocab, World::Open, Split::Test)
                .len(),
            192
        );
    }
}
