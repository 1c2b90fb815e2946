//! Causal transformer decoder with cross-attention over pooled image tokens.
//!
//! Post-norm layers in the BART arrangement: masked self-attention, encoder
//! cross-attention, GELU feed-forward, each wrapped in a residual and a layer
//! norm. Token embeddings live in a swappable [`EmbeddingTable`] that can be
//! frozen; the output projection is tied to it unless configured otherwise.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Session, INIT_STD};
use crate::tensor::{Rng, Tensor, Var};

pub const EMBEDDING: &str = "dec.embed";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub tie_output_to_embedding: bool,
    pub freeze_embeddings: bool,
    /// Epoch from which a frozen embedding table becomes trainable. `None`
    /// keeps it frozen for the whole run.
    pub unfreeze_embeddings_at: Option<usize>,
}

impl DecoderConfig {
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            model_dim: 32,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            max_positions: 128,
            tie_output_to_embedding: true,
            freeze_embeddings: true,
            unfreeze_embeddings_at: None,
        }
    }

    /// BART-base widths with a 768-d embedding.
    pub fn full(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            model_dim: 768,
            layers: 6,
            heads: 12,
            ffn_dim: 3072,
            max_positions: 128,
            tie_output_to_embedding: true,
            freeze_embeddings: true,
            unfreeze_embeddings_at: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.model_dim == 0 || self.max_positions == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide model_dim {}",
                self.heads, self.model_dim
            )));
        }
        Ok(())
    }

    /// Whether the embedding table is excluded from updates in `epoch` (0-based).
    pub fn embeddings_frozen_at(&self, epoch: usize) -> bool {
        self.freeze_embeddings && self.unfreeze_embeddings_at.is_none_or(|e| epoch < e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub matrix: Tensor,
    pub frozen: bool,
    pub provenance: String,
}

impl EmbeddingTable {
    /// Rows drawn from N(0, 1/D), deterministic in `seed`.
    pub fn random(vocab: usize, dim: usize, seed: u64) -> Self {
        let mut rng = Rng::with_stream(seed, 0xE3B);
        let std = 1.0 / (dim as f64).sqrt();
        Self {
            matrix: Tensor::from_fn(&[vocab, dim], |_| rng.normal() * std),
            frozen: true,
            provenance: "random".to_string(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    /// Embedding row of a token id.
    pub fn row(&self, id: usize) -> &[f64] {
        let d = self.dim();
        &self.matrix.data()[id * d..(id + 1) * d]
    }
}

/// Reads a `[V, D]` table from a tensor file (first tensor, or one named
/// `embedding`).
pub fn load_embedding_table(path: &Path, expected_vocab: usize, expected_dim: usize) -> Result<EmbeddingTable> {
    let (store, _) = checkpoint::load(path)?;
    let matrix = match store.get("embedding") {
        Ok(t) => t.clone(),
        Err(_) => store
            .iter()
            .next()
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Load(format!("{} holds no tensors", path.display())))?,
    };
    if matrix.shape() != [expected_vocab, expected_dim] {
        return Err(Error::Load(format!(
            "embedding table {} has shape {:?}, expected [{expected_vocab}, {expected_dim}]",
            path.display(),
            matrix.shape()
        )));
    }
    Ok(EmbeddingTable {
        matrix,
        frozen: true,
        provenance: path.display().to_string(),
    })
}

/// Loads `path` when given and present, otherwise falls back to a seeded
/// random table.
pub fn embedding_table_or_random(path: Option<&Path>, vocab: usize, dim: usize, seed: u64) -> Result<EmbeddingTable> {
    match path {
        Some(p) if p.exists() => load_embedding_table(p, vocab, dim),
        _ => Ok(EmbeddingTable::random(vocab, dim, seed)),
    }
}

pub fn init_params(cfg: &DecoderConfig, table: &EmbeddingTable, rng: &mut Rng, store: &mut ParamStore) -> Result<()> {
    cfg.validate()?;
    if table.matrix.shape() != [cfg.vocab_size, cfg.model_dim] {
        return Err(Error::Load(format!(
            "embedding table shape {:?}, decoder expects [{}, {}]",
            table.matrix.shape(),
            cfg.vocab_size,
            cfg.model_dim
        )));
    }
    let d = cfg.model_dim;
    store.insert(EMBEDDING, table.matrix.clone());
    store.set_frozen(EMBEDDING, cfg.freeze_embeddings && table.frozen);
    store.insert(
        "dec.pos",
        Tensor::from_fn(&[cfg.max_positions, d], |_| rng.truncated_normal(INIT_STD)),
    );
    store.init_layer_norm("dec.embed_norm", d);
    for l in 0..cfg.layers {
        for part in ["self", "cross"] {
            for proj in ["q", "k", "v", "o"] {
                store.init_linear(rng, &format!("dec.l{l}.{part}.{proj}"), d, d, true);
            }
        }
        store.init_layer_norm(&format!("dec.l{l}.norm1"), d);
        store.init_layer_norm(&format!("dec.l{l}.norm2"), d);
        store.init_linear(rng, &format!("dec.l{l}.fc1"), d, cfg.ffn_dim, true);
        store.init_linear(rng, &format!("dec.l{l}.fc2"), cfg.ffn_dim, d, true);
        store.init_layer_norm(&format!("dec.l{l}.norm3"), d);
    }
    if !cfg.tie_output_to_embedding {
        store.init_linear(rng, "dec.out", d, cfg.vocab_size, false);
    }
    Ok(())
}

/// Scaled dot-product multi-head attention, `q_in: [B, Tq, D]`,
/// `kv_in: [B, Tk, D]`; `mask: [Tq, Tk]` is added to the logits.
fn multi_head_attention(
    sess: &mut Session,
    q_in: Var,
    kv_in: Var,
    heads: usize,
    mask: Option<&Tensor>,
    name: &str,
) -> Result<Var> {
    let qs = sess.tape.shape(q_in).to_vec();
    let ks = sess.tape.shape(kv_in).to_vec();
    let (b, tq, d) = (qs[0], qs[1], qs[2]);
    let tk = ks[1];
    let dh = d / heads;
    let q = sess.linear(q_in, &format!("{name}.q"))?;
    let k = sess.linear(kv_in, &format!("{name}.k"))?;
    let v = sess.linear(kv_in, &format!("{name}.v"))?;
    let t = &mut sess.tape;
    let split = |t: &mut crate::tensor::Tape, x: Var, len: usize| -> Result<Var> {
        let x = t.reshape(x, &[b, len, heads, dh])?;
        t.permute(x, &[0, 2, 1, 3])
    };
    let q = split(t, q, tq)?;
    let k = split(t, k, tk)?;
    let v = split(t, v, tk)?;
    let kt = t.transpose(k)?;
    let scores = t.matmul(q, kt)?;
    let mut scores = t.scale(scores, 1.0 / (dh as f64).sqrt());
    if let Some(mask) = mask {
        let m = t.constant(mask.clone());
        scores = t.add(scores, m)?;
    }
    let attn = t.softmax(scores, 3)?;
    let out = t.matmul(attn, v)?;
    let out = t.permute(out, &[0, 2, 1, 3])?;
    let out = t.reshape(out, &[b, tq, d])?;
    sess.linear(out, &format!("{name}.o"))
}

fn causal_mask(t: usize) -> Tensor {
    Tensor::from_fn(&[t, t], |i| if i % t > i / t { f64::NEG_INFINITY } else { 0.0 })
}

/// Teacher-forced logits `[B, T, V]` for equal-length token rows.
pub fn decode_logits(sess: &mut Session, tokens: &[Vec<usize>], memory: Var, cfg: &DecoderConfig) -> Result<Var> {
    let b = tokens.len();
    let t = tokens.first().map_or(0, Vec::len);
    if b == 0 || t == 0 {
        return Err(Error::Shape("decoder needs at least one token".into()));
    }
    if tokens.iter().any(|row| row.len() != t) {
        return Err(Error::Shape("decoder rows must have equal length".into()));
    }
    if t > cfg.max_positions {
        return Err(Error::Shape(format!(
            "sequence length {t} exceeds max_positions {}",
            cfg.max_positions
        )));
    }
    let ms = sess.tape.shape(memory).to_vec();
    if ms.len() != 3 || ms[0] != b || ms[2] != cfg.model_dim {
        return Err(Error::Shape(format!(
            "decoder memory {:?} does not match batch {b} and width {}",
            ms, cfg.model_dim
        )));
    }
    let flat: Vec<usize> = tokens.iter().flatten().copied().collect();
    if let Some(&bad) = flat.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Index(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let d = cfg.model_dim;
    let table = sess.param(EMBEDDING)?;
    let pos = sess.param("dec.pos")?;
    let tp = &mut sess.tape;
    let x = tp.index_select(table, 0, &flat)?;
    let x = tp.reshape(x, &[b, t, d])?;
    let positions: Vec<usize> = (0..t).collect();
    let p = tp.index_select(pos, 0, &positions)?;
    let x = tp.add(x, p)?;
    let mut x = sess.layer_norm(x, "dec.embed_norm")?;

    let mask = causal_mask(t);
    for l in 0..cfg.layers {
        let h = multi_head_attention(sess, x, x, cfg.heads, Some(&mask), &format!("dec.l{l}.self"))?;
        let h = sess.tape.add(x, h)?;
        x = sess.layer_norm(h, &format!("dec.l{l}.norm1"))?;

        let h = multi_head_attention(sess, x, memory, cfg.heads, None, &format!("dec.l{l}.cross"))?;
        let h = sess.tape.add(x, h)?;
        x = sess.layer_norm(h, &format!("dec.l{l}.norm2"))?;

        let h = sess.linear(x, &format!("dec.l{l}.fc1"))?;
        let h = sess.tape.gelu(h);
        let h = sess.linear(h, &format!("dec.l{l}.fc2"))?;
        let h = sess.tape.add(x, h)?;
        x = sess.layer_norm(h, &format!("dec.l{l}.norm3"))?;
    }

    if cfg.tie_output_to_embedding {
        let et = sess.tape.transpose(table)?;
        sess.tape.matmul(x, et)
    } else {
        sess.linear(x, "dec.out")
    }
}

/// Log-probabilities `[B, V]` of the token following each prefix.
pub fn next_token_logprobs(
    params: &ParamStore,
    cfg: &DecoderConfig,
    prefixes: &[Vec<usize>],
    memory: &Tensor,
) -> Result<Tensor> {
    if prefixes.iter().any(Vec::is_empty) {
        return Err(Error::Contract("prefix must start with BOS".into()));
    }
    let mut sess = Session::eval(params);
    let mem = sess.tape.constant(memory.clone());
    let logits = decode_logits(&mut sess, prefixes, mem, cfg)?;
    let t = prefixes[0].len();
    let last = sess.tape.index_select(logits, 1, &[t - 1])?;
    let last = sess.tape.reshape(last, &[prefixes.len(), cfg.vocab_size])?;
    let lp = sess.tape.log_softmax(last, 1)?;
    Ok(sess.tape.value(lp).clone())
}
