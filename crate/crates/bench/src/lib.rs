//! Shared fixtures for the criterion benches.

use regcap_core::data::manifest::Modality;
use regcap_core::data::synth::caption;
use regcap_core::decoder::EmbeddingTable;
use regcap_core::metrics::EvalPair;
use regcap_core::model::{CaptionModel, ModelConfig};
use regcap_core::{Rng, Tensor};

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Untrained toy captioner over a vocabulary of `vocab` ids.
pub fn toy_model(vocab: usize, seed: u64) -> CaptionModel {
    let cfg = ModelConfig::toy(vocab);
    let table = EmbeddingTable::random(vocab, cfg.decoder.model_dim, seed);
    CaptionModel::init(cfg, &table, seed).expect("toy config is valid")
}

/// `n` synthetic caption pairs where roughly half the hypotheses name the
/// wrong shape or position.
pub fn caption_pairs(n: usize, seed: u64) -> Vec<EvalPair> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|i| {
            let m = Modality::ALL[rng.below(3)];
            let (shape, pos) = (rng.below(4), rng.below(4));
            let reference = caption(m, shape, pos, rng.below(3));
            let hypothesis = if rng.bernoulli(0.5) {
                reference.clone()
            } else {
                caption(m, (shape + 1) % 4, rng.below(4), 0)
            };
            EvalPair::new(i.to_string(), &hypothesis, &reference, m)
        })
        .collect()
}
