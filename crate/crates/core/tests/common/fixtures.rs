//! Small seeded synthetic datasets with cached toy-backbone tokens.

use std::path::Path;

use ade::backbone::{cache_tokens, Backbone, BackboneConfig, TokenStore};
use ade::data::synth::{generate_synthetic, SynthConfig};
use ade::data::Dataset;

/// 3 colors x 3 shapes, a handful of images per pair.
pub fn tiny_synth() -> SynthConfig {
    SynthConfig {
        colors: 3,
        shapes: 3,
        train_per_pair: 4,
        eval_per_pair: 3,
        unseen_fraction: 0.25,
        seed: 5,
        ..SynthConfig::default()
    }
}

pub fn synth_with_tokens(config: &SynthConfig, dir: &Path) -> (Dataset, TokenStore) {
    let (dataset, _) = generate_synthetic(config, dir).unwrap();
    let backbone = Backbone::new(BackboneConfig::default()).unwrap();
    let (store, _) = cache_tokens(&dataset.records, &backbone, &dir.join("tokens.bin")).unwrap();
    (dataset, store)
}

/// Widened tokens of one cached image.
pub fn tokens_of(store: &TokenStore, id: &str) -> ndarray::Array2<f64> {
    store.gather([id]).unwrap().remove(0)
}
