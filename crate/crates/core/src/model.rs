//! The full captioner: encoder → regional attention → decoder.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::beam::{beam_search, DecodeConfig, Hypothesis, StepModel};
use crate::checkpoint;
use crate::decoder::{self, DecoderConfig, EmbeddingTable, EMBEDDING};
use crate::encoder::{self, EncoderConfig, FeatureGrid};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Session};
use crate::regional::{self, RegionalAttentionOutput, RegionalConfig};
use crate::tensor::{Rng, Tensor, Var};

/// Stream id for parameter initialisation, kept apart from data streams.
pub const INIT_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub regional: RegionalConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            encoder: EncoderConfig::toy(),
            regional: RegionalConfig::toy(),
            decoder: DecoderConfig::toy(vocab_size),
        }
    }

    /// 224px Swin-B geometry, C=1024 → D=768, K=29.
    pub fn full(vocab_size: usize) -> Self {
        Self {
            encoder: EncoderConfig::swin_base(),
            regional: RegionalConfig::full(),
            decoder: DecoderConfig::full(vocab_size),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.regional.in_dim != self.encoder.output_channels() {
            return Err(Error::Config(format!(
                "regional.in_dim {} must equal encoder output channels {}",
                self.regional.in_dim,
                self.encoder.output_channels()
            )));
        }
        if self.regional.out_dim != self.decoder.model_dim {
            return Err(Error::Config(format!(
                "regional.out_dim {} must equal decoder.model_dim {}",
                self.regional.out_dim, self.decoder.model_dim
            )));
        }
        self.regional.validate(self.encoder.num_regions())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub grid: FeatureGrid,
    pub regional: RegionalAttentionOutput,
}

/// Image batch `[B, 3, S, S]` to decoder memory.
pub fn forward_memory(sess: &mut Session, cfg: &ModelConfig, images: Var) -> Result<ForwardOutput> {
    let grid = encoder::encode_image(sess, images, &cfg.encoder)?;
    let regional = regional::regional_forward(sess, &grid, &cfg.regional)?;
    Ok(ForwardOutput { grid, regional })
}

/// Teacher-forced mean token cross-entropy. Each row of `tokens` is a full
/// `BOS … EOS PAD…` sequence; positions whose target is `pad_id` are ignored.
pub fn caption_loss(
    sess: &mut Session,
    cfg: &ModelConfig,
    images: &Tensor,
    tokens: &[Vec<usize>],
    pad_id: usize,
) -> Result<Var> {
    let t = tokens.first().map_or(0, Vec::len);
    if t < 2 || tokens.iter().any(|r| r.len() != t) {
        return Err(Error::Shape("training rows must share a length of at least 2".into()));
    }
    if images.shape().first() != Some(&tokens.len()) {
        return Err(Error::Shape(format!(
            "{} token rows for image batch {:?}",
            tokens.len(),
            images.shape()
        )));
    }
    let img = sess.tape.constant(images.clone());
    let out = forward_memory(sess, cfg, img)?;
    let inputs: Vec<Vec<usize>> = tokens.iter().map(|r| r[..t - 1].to_vec()).collect();
    let targets: Vec<usize> = tokens.iter().flat_map(|r| r[1..].iter().copied()).collect();
    let logits = decoder::decode_logits(sess, &inputs, out.regional.pooled, &cfg.decoder)?;
    sess.tape.cross_entropy(logits, &targets, pad_id)
}

/// Eval-mode encoder output for a batch.
#[derive(Clone, Debug)]
pub struct EncodedImages {
    /// `[B, K, D]`
    pub memory: Tensor,
    /// `[B, N]`
    pub alpha: Tensor,
    pub grid_height: usize,
    pub grid_width: usize,
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub hypotheses: Vec<Hypothesis>,
    /// Row-major `grid_height × grid_width` region weights.
    pub alpha: Vec<f64>,
    pub grid_height: usize,
    pub grid_width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl CaptionModel {
    pub fn init(config: ModelConfig, table: &EmbeddingTable, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::with_stream(seed, INIT_STREAM);
        let mut params = ParamStore::new();
        encoder::init_params(&config.encoder, &mut rng, &mut params)?;
        regional::init_params(&config.regional, &mut rng, &mut params);
        decoder::init_params(&config.decoder, table, &mut rng, &mut params)?;
        Ok(Self { config, params })
    }

    pub fn set_embeddings_frozen(&mut self, frozen: bool) {
        self.params.set_frozen(EMBEDDING, frozen);
    }

    pub fn encode(&self, images: &Tensor) -> Result<EncodedImages> {
        let mut sess = Session::eval(&self.params);
        let img = sess.tape.constant(images.clone());
        let out = forward_memory(&mut sess, &self.config, img)?;
        Ok(EncodedImages {
            memory: sess.tape.value(out.regional.pooled).clone(),
            alpha: sess.tape.value(out.regional.alpha).clone(),
            grid_height: out.grid.height,
            grid_width: out.grid.width,
        })
    }

    /// Eval-mode loss (no dropout).
    pub fn eval_loss(&self, images: &Tensor, tokens: &[Vec<usize>], pad_id: usize) -> Result<f64> {
        let mut sess = Session::eval(&self.params);
        let loss = caption_loss(&mut sess, &self.config, images, tokens, pad_id)?;
        sess.tape.value(loss).item()
    }

    /// Beam-decodes one image `[1, 3, S, S]`; hypotheses come best first.
    pub fn generate(&self, image: &Tensor, cfg: &DecodeConfig) -> Result<Generated> {
        if image.shape().first() != Some(&1) {
            return Err(Error::Shape(format!(
                "generate takes a single image [1, 3, S, S], got {:?}",
                image.shape()
            )));
        }
        let enc = self.encode(image)?;
        let stepper = self.stepper(enc.memory)?;
        Ok(Generated {
            hypotheses: beam_search(&stepper, cfg)?,
            alpha: enc.alpha.data().to_vec(),
            grid_height: enc.grid_height,
            grid_width: enc.grid_width,
        })
    }

    pub fn stepper(&self, memory: Tensor) -> Result<CaptionStepper<'_>> {
        let s = memory.shape();
        if s.len() != 3 || s[0] != 1 {
            return Err(Error::Shape(format!("stepper needs memory [1, K, D], got {:?}", s)));
        }
        Ok(CaptionStepper { model: self, memory })
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({
            "model": self.config,
            "extra": extra,
        });
        checkpoint::save(path, &self.params, meta)
    }

    /// Loads a checkpoint, using the architecture recorded in its header.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (params, header) = checkpoint::load(path)?;
        let config: ModelConfig = serde_json::from_value(header.metadata["model"].clone())
            .map_err(|e| Error::Load(format!("{}: bad model config: {e}", path.display())))?;
        let model = Self { config, params };
        model.check_architecture(&model.config)?;
        Ok((model, header.metadata["extra"].clone()))
    }

    /// Loads a checkpoint and verifies it fits `expected`.
    pub fn load_for(path: &Path, expected: &ModelConfig) -> Result<(Self, serde_json::Value)> {
        let (model, extra) = Self::load(path)?;
        model.check_architecture(expected)?;
        Ok((model, extra))
    }

    /// Every parameter a fresh `config` model would have must be present with
    /// the same shape.
    pub fn check_architecture(&self, config: &ModelConfig) -> Result<()> {
        let table = EmbeddingTable {
            matrix: Tensor::zeros(&[config.decoder.vocab_size, config.decoder.model_dim]),
            frozen: true,
            provenance: String::new(),
        };
        let fresh = Self::init(config.clone(), &table, 0)?;
        let mut problems = Vec::new();
        for (name, shape) in fresh.params.shapes() {
            match self.params.get(&name) {
                Ok(t) if t.shape() == shape.as_slice() => {}
                Ok(t) => problems.push(format!("{name}: checkpoint {:?} vs model {:?}", t.shape(), shape)),
                Err(_) => problems.push(format!("{name}: missing (model {:?})", shape)),
            }
        }
        for name in self.params.names() {
            if !fresh.params.contains(name) {
                problems.push(format!("{name}: unexpected in checkpoint"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Load(format!(
                "checkpoint does not fit the architecture: {}",
                problems.join("; ")
            )))
        }
    }
}

/// One image's memory bound to the decoder for step-wise generation.
pub struct CaptionStepper<'a> {
    model: &'a CaptionModel,
    memory: Tensor,
}

impl StepModel for CaptionStepper<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config.decoder.vocab_size
    }

    fn next_token_logprobs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let s = self.memory.shape();
        let (k, d) = (s[1], s[2]);
        let b = prefixes.len();
        let mem = Tensor::from_fn(&[b, k, d], |i| self.memory.data()[i % (k * d)]);
        let lp = decoder::next_token_logprobs(&self.model.params, &self.model.config.decoder, prefixes, &mem)?;
        let v = self.vocab_size();
        Ok(lp.data().chunks(v).map(<[f64]>::to_vec).collect())
    }
}
