//! Procedural colored-shapes dataset.
//!
//! Every image is a single filled shape on a noisy background. The color is
//! the attribute and the shape is the object. A seeded subset of
//! color-shape pairs is withheld from training and split between the
//! validation and test sets.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{write_manifest, Dataset, ImageRecord, Split, SplitSpec};
use crate::embedding::{ConceptVocabulary, Pair};
use crate::error::{Error, Result};
use crate::rng::keyed_rng;

pub const COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [215, 40, 40]),
    ("green", [40, 170, 60]),
    ("blue", [45, 75, 215]),
    ("yellow", [230, 210, 35]),
    ("magenta", [200, 45, 200]),
    ("cyan", [35, 200, 210]),
    ("orange", [240, 130, 20]),
    ("white", [245, 245, 245]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
    Ring,
    Bar,
    Star,
}

pub const SHAPES: [Shape; 8] = [
    Shape::Circle,
    Shape::Square,
    Shape::Triangle,
    Shape::Diamond,
    Shape::Cross,
    Shape::Ring,
    Shape::Bar,
    Shape::Star,
];

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Diamond => "diamond",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
            Shape::Bar => "bar",
            Shape::Star => "star",
        }
    }

    /// Whether offset `(dx, dy)` from the center, in units of the shape
    /// radius, lies inside the shape.
    fn contains(self, dx: f64, dy: f64) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        match self {
            Shape::Circle => dx * dx + dy * dy <= 1.0,
            Shape::Square => ax <= 0.8 && ay <= 0.8,
            Shape::Triangle => (-1.0..=0.8).contains(&dy) && ax <= (dy + 1.0) * 0.55,
            Shape::Diamond => ax + ay <= 1.0,
            Shape::Cross => (ax <= 0.3 && ay <= 1.0) || (ay <= 0.3 && ax <= 1.0),
            Shape::Ring => {
                let r2 = dx * dx + dy * dy;
                (0.3..=1.0).contains(&r2)
            }
            Shape::Bar => ax <= 1.0 && ay <= 0.35,
            Shape::Star => {
                let r = (dx * dx + dy * dy).sqrt();
                let theta = dy.atan2(dx);
                r <= 0.45 + 0.55 * (2.5 * theta).cos().abs().powi(3)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub colors: usize,
    pub shapes: usize,
    pub train_per_pair: usize,
    pub eval_per_pair: usize,
    pub unseen_fraction: f64,
    pub image_size: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            colors: 6,
            shapes: 5,
            train_per_pair: 20,
            eval_per_pair: 8,
            unseen_fraction: 0.2,
            image_size: 32,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.colors < 2 || self.shapes < 2 {
            return Err(Error::Config(
                "synthetic data needs at least 2 colors and 2 shapes".into(),
            ));
        }
        if self.colors > COLORS.len() || self.shapes > SHAPES.len() {
            return Err(Error::Config(format!(
                "at most {} colors and {} shapes are available",
                COLORS.len(),
                SHAPES.len()
            )));
        }
        if !(0.0..1.0).contains(&self.unseen_fraction) {
            return Err(Error::Config("unseen fraction must lie in [0, 1)".into()));
        }
        if self.train_per_pair == 0 || self.image_size < 8 {
            return Err(Error::Config(
                "need at least one training image per pair and 8 px images".into(),
            ));
        }
        Ok(())
    }
}

/// Picks the unseen pairs. Pairs are visited in a seeded order and withheld
/// only when their attribute and object keep at least one seen pair.
pub fn choose_unseen(vocab: &ConceptVocabulary, fraction: f64, seed: u64) -> Result<Vec<Pair>> {
    let mut pairs = vocab.open_world_pairs();
    let target = (fraction * pairs.len() as f64).round() as usize;
    let mut rng = keyed_rng(seed, "holdout", &[]);
    pairs.shuffle(&mut rng);
    let mut attr_left = vec![vocab.num_objects(); vocab.num_attributes()];
    let mut obj_left = vec![vocab.num_attributes(); vocab.num_objects()];
    let mut unseen = Vec::with_capacity(target);
    for p in pairs {
        if unseen.len() == target {
            break;
        }
        if attr_left[p.attr] > 1 && obj_left[p.obj] > 1 {
            attr_left[p.attr] -= 1;
            obj_left[p.obj] -= 1;
            unseen.push(p);
        }
    }
    if unseen.len() < target {
        return Err(Error::Dataset(format!(
            "unseen fraction {fraction} would leave an attribute or object without a seen pair"
        )));
    }
    Ok(unseen)
}

fn render(shape: Shape, color: [u8; 3], size: u32, rng: &mut impl Rng) -> RgbImage {
    let s = size as f64;
    let radius = s * rng.gen_range(0.26..0.36);
    let margin = radius + 1.0;
    let cx = rng.gen_range(margin..(s - margin).max(margin + 1e-9));
    let cy = rng.gen_range(margin..(s - margin).max(margin + 1e-9));
    let angle: f64 = rng.gen_range(-0.2..0.2);
    let (sin, cos) = angle.sin_cos();
    let jitter = |c: u8, rng: &mut dyn rand::RngCore| {
        (c as f64 + rng.gen_range(-18.0..18.0)).clamp(0.0, 255.0)
    };
    let fg: [f64; 3] = [
        jitter(color[0], rng),
        jitter(color[1], rng),
        jitter(color[2], rng),
    ];
    let base: f64 = rng.gen_range(60.0..150.0);
    let tint: [f64; 3] = [
        rng.gen_range(-12.0..12.0),
        rng.gen_range(-12.0..12.0),
        rng.gen_range(-12.0..12.0),
    ];
    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let dx = (x as f64 + 0.5 - cx) / radius;
            let dy = (y as f64 + 0.5 - cy) / radius;
            let (rx, ry) = (cos * dx + sin * dy, -sin * dx + cos * dy);
            let inside = shape.contains(rx, ry);
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = if inside { fg[c] } else { base + tint[c] };
                px[c] = (v + rng.gen_range(-6.0..6.0)).clamp(0.0, 255.0).round() as u8;
            }
            img.put_pixel(x, y, Rgb(px));
        }
    }
    img
}

/// Renders the dataset under `out_dir` and writes `out_dir/manifest.jsonl`.
pub fn generate_synthetic(config: &SynthConfig, out_dir: &Path) -> Result<(Dataset, PathBuf)> {
    config.validate()?;
    let attributes: Vec<String> = COLORS[..config.colors]
        .iter()
        .map(|(n, _)| n.to_string())
        .collect();
    let objects: Vec<String> = SHAPES[..config.shapes]
        .iter()
        .map(|s| s.name().to_string())
        .collect();
    let vocab = ConceptVocabulary::new(attributes, objects)?;
    let unseen = choose_unseen(&vocab, config.unseen_fraction, config.seed)?;
    let val_count = unseen.len().div_ceil(2);
    let val_unseen: BTreeSet<Pair> = unseen[..val_count].iter().copied().collect();
    let test_unseen: BTreeSet<Pair> = unseen[val_count..].iter().copied().collect();
    let seen: BTreeSet<Pair> = vocab
        .open_world_pairs()
        .into_iter()
        .filter(|p| !val_unseen.contains(p) && !test_unseen.contains(p))
        .collect();

    let mut jobs: Vec<(Split, Pair, usize)> = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        for p in vocab.open_world_pairs() {
            let count = match split {
                Split::Train if seen.contains(&p) => config.train_per_pair,
                Split::Val if seen.contains(&p) || val_unseen.contains(&p) => config.eval_per_pair,
                Split::Test if seen.contains(&p) || test_unseen.contains(&p) => {
                    config.eval_per_pair
                }
                _ => 0,
            };
            jobs.extend((0..count).map(|k| (split, p, k)));
        }
    }

    for split in [Split::Train, Split::Val, Split::Test] {
        let dir = out_dir.join("images").join(split.to_string());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    use rayon::prelude::*;
    let records = jobs
        .par_iter()
        .map(|&(split, p, k)| {
            let key = [split as u64, p.attr as u64, p.obj as u64, k as u64];
            let mut rng = keyed_rng(config.seed, "render", &key);
            let img = render(SHAPES[p.obj], COLORS[p.attr].1, config.image_size, &mut rng);
            let stem = format!(
                "{}_{}_{k:03}",
                vocab.attributes[p.attr], vocab.objects[p.obj]
            );
            let path = out_dir
                .join("images")
                .join(split.to_string())
                .join(format!("{stem}.png"));
            img.save(&path).map_err(|e| Error::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
            Ok(ImageRecord {
                id: format!("{split}-{stem}"),
                path,
                attr: p.attr,
                obj: p.obj,
                split,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let dataset = Dataset {
        records,
        vocab,
        split: SplitSpec {
            seen,
            val_unseen,
            test_unseen,
        },
        root: out_dir.to_path_buf(),
    };
    let manifest = out_dir.join("manifest.jsonl");
    write_manifest(&dataset, &manifest)?;
    log::info!("generated synthetic dataset: {:?}", dataset.stats());
    Ok((dataset, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn holdout_keeps_every_concept_seen() {
        let vocab = ConceptVocabulary::new(
            COLORS[..6].iter().map(|c| c.0.to_string()).collect(),
            SHAPES[..5].iter().map(|s| s.name().to_string()).collect(),
        )
        .unwrap();
        for seed in 0..20 {
            let unseen = choose_unseen(&vocab, 0.2, seed).unwrap();
            assert_eq!(unseen.len(), 6);
            for a in 0..6 {
                assert!((0..5).any(|o| !unseen.contains(&Pair::new(a, o))));
            }
            for o in 0..5 {
                assert!((0..6).any(|a| !unseen.contains(&Pair::new(a, o))));
            }
        }
    }

    #[test]
    fn excessive_holdout_is_an_error() {
        let vocab =
            ConceptVocabulary::new(vec!["a".into(), "b".into()], vec!["x".into(), "y".into()])
                .unwrap();
        assert!(choose_unseen(&vocab, 0.5, 0).is_ok());
        assert!(matches!(
            choose_unseen(&vocab, 0.75, 0),
            Err(Error::Dataset(_))
        ));
    }

    #[test]
    fn shapes_are_distinct_masks() {
        let grid: Vec<(f64, f64)> = (0..21)
            .flat_map(|y| (0..21).map(move |x| (x as f64 / 10.0 - 1.0, y as f64 / 10.0 - 1.0)))
            .collect();
        let masks: Vec<Vec<bool>> = SHAPES
            .iter()
            .map(|s| grid.iter().map(|&(x, y)| s.contains(x, y)).collect())
            .collect();
        for i in 0..masks.len() {
            assert!(
                masks[i].iter().filter(|b| **b).count() > 20,
                "{:?} too small",
                SHAPES[i]
            );
            for j in 0..i {
                let diff = masks[i]
                    .iter()
                    .zip(&masks[j])
                    .filter(|(a, b)| a != b)
                    .count();
                assert!(diff > 20, "{:?} vs {:?}", SHAPES[i], SHAPES[j]);
            }
        }
    }
}
