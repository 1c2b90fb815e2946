//! Synthetic "shapes as findings" corpus: one bright shape in one quadrant of
//! a modality-specific background, with a templated caption naming both.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::{write_pnm, ImageBuffer};
use super::manifest::{write_manifest, ManifestEntry, Modality, Split};
use super::text::Vocab;
use crate::error::{Error, Result};
use crate::tensor::Rng;

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const POSITIONS: [&str; 4] = ["upper left", "upper right", "lower left", "lower right"];

const FILLER: &[&str] = &[
    "no",
    "other",
    "abnormality",
    "is",
    "seen",
    "and",
    "the",
    "surrounding",
    "tissue",
    "appears",
    "within",
    "normal",
    "limits",
    "for",
    "this",
    "study",
    "with",
    "stable",
    "appearance",
    "overall",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub image_size: usize,
    /// Images pre-assigned to each split, in train/val/test order.
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// CT / MRI / XRAY proportions.
    pub modality_mix: [f64; 3],
    pub images_per_article: usize,
    /// Mean number of filler words appended to each caption (uniform on
    /// `0..=2·n`). The template itself is 11 words.
    pub extra_words: usize,
    /// Leave splits unassigned so the split policy decides.
    pub unassigned: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            image_size: 32,
            train: 200,
            val: 50,
            test: 50,
            modality_mix: [0.4, 0.3, 0.3],
            images_per_article: 2,
            extra_words: 0,
            unassigned: false,
        }
    }
}

impl SynthConfig {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthItem {
    pub image: ImageBuffer,
    pub entry: ManifestEntry,
    pub shape: usize,
    pub position: usize,
}

pub fn modality_word(m: Modality) -> &'static str {
    match m {
        Modality::Ct => "ct",
        Modality::Mri => "mri",
        Modality::Xray => "xray",
        Modality::Other => "other",
    }
}

/// Modality is encoded in texture rather than brightness alone: patch
/// embeddings are layer-normalised, which hides a flat patch's intensity.
fn background(m: Modality, x: usize, y: usize, size: usize, rng: &mut Rng) -> f64 {
    let t = (x + y) as f64 / (2 * size) as f64;
    let (base, texture) = match m {
        Modality::Ct => (40.0, if (x / 2 + y / 2).is_multiple_of(2) { 18.0 } else { -18.0 }),
        Modality::Mri => (70.0 + 30.0 * t, if (y / 2).is_multiple_of(2) { 18.0 } else { -18.0 }),
        Modality::Xray => (
            30.0 + 40.0 * (y as f64 / size as f64),
            if (x / 2).is_multiple_of(2) { 18.0 } else { -18.0 },
        ),
        Modality::Other => (50.0, 0.0),
    };
    base + texture + rng.uniform_range(-3.0, 3.0)
}

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        // apex up, base at +r
        2 => dy <= r && dy >= -r && dx.abs() <= (dy + r) / 2.0,
        _ => (dx.abs() <= r * 0.3 && dy.abs() <= r) || (dy.abs() <= r * 0.3 && dx.abs() <= r),
    }
}

pub fn render(size: usize, modality: Modality, shape: usize, position: usize, rng: &mut Rng) -> ImageBuffer {
    let half = size as f64 / 2.0;
    let r = size as f64 * 0.17 + rng.uniform_range(-0.5, 0.5);
    let jitter = size as f64 * 0.05;
    let cx = if position.is_multiple_of(2) {
        half / 2.0
    } else {
        half * 1.5
    } + rng.uniform_range(-jitter, jitter)
        - 0.5;
    let cy = if position < 2 { half / 2.0 } else { half * 1.5 } + rng.uniform_range(-jitter, jitter) - 0.5;
    let intensity = rng.uniform_range(200.0, 240.0);
    let mut img = ImageBuffer::filled(size, size, 1, 0);
    for y in 0..size {
        for x in 0..size {
            let v = if inside(shape, x as f64 - cx, y as f64 - cy, r) {
                intensity + rng.uniform_range(-3.0, 3.0)
            } else {
                background(modality, x, y, size, rng)
            };
            img.set(x, y, 0, v.round().clamp(0.0, 255.0) as u8);
        }
    }
    img
}

pub fn caption(modality: Modality, shape: usize, position: usize, extra: usize) -> String {
    let mut words = vec![
        modality_word(modality).to_string(),
        "scan".into(),
        "showing".into(),
        "a".into(),
        SHAPES[shape].into(),
        "lesion".into(),
        "in".into(),
        "the".into(),
        POSITIONS[position].into(),
        "region".into(),
    ];
    words.extend(FILLER.iter().cycle().take(extra).map(|s| s.to_string()));
    words.join(" ")
}

fn pick_modality(mix: &[f64; 3], u: f64) -> Modality {
    if u < mix[0] {
        Modality::Ct
    } else if u < mix[0] + mix[1] {
        Modality::Mri
    } else {
        Modality::Xray
    }
}

/// Deterministic in `cfg.seed`.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthItem>> {
    if cfg.images_per_article == 0 || cfg.image_size < 8 {
        return Err(Error::Config(
            "synthetic corpus needs images_per_article ≥ 1 and image_size ≥ 8".into(),
        ));
    }
    let sum: f64 = cfg.modality_mix.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("modality mix must sum to 1, got {sum}")));
    }
    let mut rng = Rng::new(cfg.seed);
    let total = cfg.total();
    // Exact quotas for the modality mix, shuffled.
    let mut mods: Vec<Modality> = (0..total)
        .map(|i| pick_modality(&cfg.modality_mix, (i as f64 + 0.5) / total as f64))
        .collect();
    rng.shuffle(&mut mods);

    let mut items = Vec::with_capacity(total);
    for (i, &m) in mods.iter().enumerate() {
        let split = if i < cfg.train {
            Split::Train
        } else if i < cfg.train + cfg.val {
            Split::Val
        } else {
            Split::Test
        };
        // Articles never straddle a split boundary.
        let local = match split {
            Split::Train => i,
            Split::Val => i - cfg.train,
            Split::Test => i - cfg.train - cfg.val,
        };
        let article_id = format!("SYN{}-{}-{}", cfg.seed, split, local / cfg.images_per_article);
        let shape = rng.below(SHAPES.len());
        let position = rng.below(POSITIONS.len());
        let extra = if cfg.extra_words == 0 {
            0
        } else {
            rng.below(2 * cfg.extra_words + 1)
        };
        let image = render(cfg.image_size, m, shape, position, &mut rng);
        items.push(SynthItem {
            image,
            entry: ManifestEntry {
                image_path: PathBuf::from(format!("images/{i:05}.pgm")),
                caption: caption(m, shape, position, extra),
                article_id,
                modality: m,
                split: (!cfg.unassigned).then_some(split),
            },
            shape,
            position,
        });
    }
    Ok(items)
}

#[derive(Clone, Debug)]
pub struct SynthPaths {
    pub manifest: PathBuf,
    pub vocab: PathBuf,
}

/// Writes `images/*.pgm`, `manifest.jsonl` and `vocab.txt` under `dir`.
pub fn write_corpus(dir: &Path, cfg: &SynthConfig) -> Result<SynthPaths> {
    let items = generate(cfg)?;
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    for it in &items {
        write_pnm(&dir.join(&it.entry.image_path), &it.image)?;
    }
    let entries: Vec<ManifestEntry> = items.iter().map(|i| i.entry.clone()).collect();
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&manifest, &entries)?;
    let vocab = Vocab::from_corpus(entries.iter().map(|e| e.caption.as_str()), &[])?;
    let vocab_path = dir.join("vocab.txt");
    vocab.save(&vocab_path)?;
    Ok(SynthPaths {
        manifest,
        vocab: vocab_path,
    })
}

/// Index of the single shape word in `caption`, if exactly one appears.
pub fn shape_in_caption(caption: &str) -> Option<usize> {
    let found: Vec<usize> = SHAPES
        .iter()
        .enumerate()
        .filter(|(_, s)| caption.split_whitespace().any(|w| w == **s))
        .map(|(i, _)| i)
        .collect();
    match found.as_slice() {
        [one] => Some(*one),
        _ => None,
    }
}
