//! Manifest ingestion, article-level splits, images, captions and batching.

pub mod image;
pub mod manifest;
pub mod split;
pub mod synth;
pub mod text;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};
use image::{augment, preprocess_image, read_pnm, stack_images, AugmentConfig, ImageBuffer};
use manifest::{load_manifest, Modality, Split};
use split::{assign_splits, SplitAudit, SplitRatios};
use text::{clean_caption, tokenize, Encoded, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub manifest: PathBuf,
    pub vocab: PathBuf,
    pub image_size: usize,
    pub max_len: usize,
    pub ratios: SplitRatios,
    pub split_seed: u64,
    pub strict: bool,
    pub augment: AugmentConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.jsonl"),
            vocab: PathBuf::from("vocab.txt"),
            image_size: 224,
            max_len: text::MAX_LEN,
            ratios: SplitRatios::default(),
            split_seed: 42,
            strict: false,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    /// Position in the manifest.
    pub index: usize,
    pub image: ImageBuffer,
    pub caption: String,
    pub tokens: Encoded,
    pub modality: Modality,
    pub article_id: String,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub vocab: Vocab,
    pub audit: SplitAudit,
    /// Dropped lines and captions, human readable.
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|x| x.split == s).collect()
    }
}

pub fn load_dataset(cfg: &DataConfig) -> Result<Dataset> {
    let vocab = Vocab::load(&cfg.vocab)?;
    let m = load_manifest(&cfg.manifest, cfg.strict)?;
    let mut warnings: Vec<String> = m
        .rejected
        .iter()
        .map(|r| format!("manifest line {}: {}", r.line, r.reason))
        .collect();
    let mut entries = Vec::with_capacity(m.entries.len());
    for (i, mut e) in m.entries.into_iter().enumerate() {
        match clean_caption(&e.caption) {
            Some(c) => {
                e.caption = c;
                entries.push((i, e));
            }
            None => warnings.push(format!("entry {i}: caption empty after cleaning, dropped")),
        }
    }
    let mut plain: Vec<_> = entries.iter().map(|(_, e)| e.clone()).collect();
    let audit = assign_splits(&mut plain, &cfg.ratios, cfg.split_seed)?;
    let mut samples = Vec::with_capacity(plain.len());
    for ((index, _), e) in entries.iter().zip(plain) {
        let image = read_pnm(&e.resolve_image(&m.base_dir))?;
        samples.push(Sample {
            index: *index,
            image,
            tokens: tokenize(&e.caption, &vocab, cfg.max_len)?,
            caption: e.caption,
            modality: e.modality,
            article_id: e.article_id,
            split: e.split.expect("assigned"),
        });
    }
    Ok(Dataset {
        samples,
        vocab,
        audit,
        warnings,
    })
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 3, S, S]`
    pub images: Tensor,
    /// Rows trimmed to the longest caption in the batch.
    pub tokens: Vec<Vec<usize>>,
}

/// Builds a batch; augmentation applies only when `augment` is given.
pub fn make_batch(
    samples: &[&Sample],
    image_size: usize,
    mut augment_with: Option<(&AugmentConfig, &mut Rng)>,
) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let mut images = Vec::with_capacity(samples.len());
    for s in samples {
        let img = match augment_with.as_mut() {
            Some((cfg, rng)) => augment(&s.image, rng, cfg),
            None => s.image.clone(),
        };
        images.push(preprocess_image(&img, image_size)?);
    }
    let t = samples.iter().map(|s| s.tokens.length).max().unwrap_or(2);
    Ok(Batch {
        images: stack_images(&images)?,
        tokens: samples.iter().map(|s| s.tokens.ids[..t].to_vec()).collect(),
    })
}
