//! Frozen image encoders and the on-disk token cache.
//!
//! Two encoders share one code path: a seeded random toy transformer for
//! desk-scale runs, and a pretrained transformer loaded from a safetensors
//! file with timm parameter names. Both emit `(1 + P, D)` token matrices with
//! the class token at row 0.

pub mod store;
pub mod vit;

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::RgbImage;
use ndarray::{Array2, Array3, ArrayView1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::keyed_rng;

pub use store::{cache_tokens, CacheReport, TokenStore};
pub use vit::VisionTransformer;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneMode {
    #[default]
    Toy,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub mode: BackboneMode,
    /// safetensors file, external mode only.
    pub weights: Option<PathBuf>,
    pub image_size: u32,
    pub patch_size: u32,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub layer_norm_eps: f32,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            mode: BackboneMode::Toy,
            weights: None,
            image_size: 32,
            patch_size: 8,
            dim: 64,
            heads: 4,
            depth: 2,
            mlp_ratio: 4,
            layer_norm_eps: 1e-6,
            mean: [0.5, 0.5, 0.5],
            std: [0.25, 0.25, 0.25],
            seed: 0,
        }
    }
}

impl BackboneConfig {
    /// ViT-B/16 at 224 px with ImageNet normalization.
    pub fn vit_base_16(weights: PathBuf) -> Self {
        BackboneConfig {
            mode: BackboneMode::External,
            weights: Some(weights),
            image_size: 224,
            patch_size: 16,
            dim: 768,
            heads: 12,
            depth: 12,
            mlp_ratio: 4,
            layer_norm_eps: 1e-6,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
            seed: 0,
        }
    }

    pub fn num_patches(&self) -> usize {
        let side = (self.image_size / self.patch_size) as usize;
        side * side
    }

    pub fn num_tokens(&self) -> usize {
        1 + self.num_patches()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.std.iter().any(|s| *s <= 0.0) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        if self.mode == BackboneMode::External && self.weights.is_none() {
            return Err(Error::Config(
                "external backbone mode needs a weights path".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of every field that affects the
    /// tokens. In external mode the weight file contents replace its path.
    pub fn content_hash(&self) -> Result<[u8; 32]> {
        let mut canonical = self.clone();
        let weights = canonical.weights.take();
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&canonical)?);
        if self.mode == BackboneMode::External {
            let path = weights.ok_or_else(|| {
                Error::Config("external backbone mode needs a weights path".into())
            })?;
            let bytes = std::fs::read(&path).map_err(|_| Error::MissingWeights(path.clone()))?;
            hasher.update(Sha256::digest(&bytes));
        }
        Ok(hasher.finalize().into())
    }
}

/// Decoded and normalized input, `(3, S, S)`.
pub fn preprocess(image: &RgbImage, config: &BackboneConfig) -> Array3<f32> {
    let s = config.image_size;
    let resized;
    let img = if image.dimensions() == (s, s) {
        image
    } else {
        resized = image::imageops::resize(image, s, s, FilterType::Triangle);
        &resized
    };
    let n = s as usize;
    Array3::from_shape_fn((3, n, n), |(c, y, x)| {
        let v = img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0;
        (v - config.mean[c]) / config.std[c]
    })
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    Ok(img.to_rgb8())
}

/// A frozen encoder. Nothing here receives gradients.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    vit: VisionTransformer,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let vit = match config.mode {
            BackboneMode::Toy => {
                let mut rng = keyed_rng(config.seed, "backbone", &[]);
                VisionTransformer::random(&config, &mut rng)
            }
            BackboneMode::External => {
                let path = config.weights.clone().expect("validated");
                let bytes =
                    std::fs::read(&path).map_err(|_| Error::MissingWeights(path.clone()))?;
                VisionTransformer::from_safetensors(&bytes, &config)?
            }
        };
        Ok(Backbone { config, vit })
    }

    pub fn encode_image(&self, image: &RgbImage) -> TokenSequence {
        TokenSequence {
            tokens: self.vit.encode(&preprocess(image, &self.config)),
        }
    }

    pub fn encode_path(&self, path: &Path) -> Result<TokenSequence> {
        Ok(self.encode_image(&load_image(path)?))
    }
}

/// Frozen tokens of one image; row 0 is the class token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Array2<f32>,
}

impl TokenSequence {
    pub fn new(tokens: Array2<f32>) -> Result<Self> {
        if tokens.nrows() < 2 {
            return Err(Error::Shape(format!(
                "need a class token and at least one patch, got {} rows",
                tokens.nrows()
            )));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("token sequence has non-finite entries".into()));
        }
        Ok(TokenSequence { tokens })
    }

    pub fn class_token(&self) -> ArrayView1<'_, f32> {
        self.tokens.row(0)
    }

    pub fn num_patches(&self) -> usize {
        self.tokens.nrows() - 1
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.tokens.mapv(f64::from)
    }
}
