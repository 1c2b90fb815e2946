//! Greedy-matching embedding score over static word vectors.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ensure_nonempty, EvalPair};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WordEmbeddings {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl WordEmbeddings {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn insert(&mut self, word: impl Into<String>, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::Shape(format!(
                "embedding of length {} in a {}-d table",
                v.len(),
                self.dim
            )));
        }
        self.vectors.insert(word.into(), v);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    /// Text format: `word v1 v2 ... vd` per line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table: Option<Self> = None;
        for (i, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            let Some(word) = it.next() else { continue };
            let v = it
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Data(format!("embedding line {}: {e}", i + 1)))?;
            let t = table.get_or_insert_with(|| Self::new(v.len()));
            t.insert(word, v)
                .map_err(|e| Error::Data(format!("embedding line {}: {e}", i + 1)))?;
        }
        table.ok_or_else(|| Error::Data("empty embedding table".into()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedResult {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_pair: Vec<f64>,
    /// Distinct tokens scored with a zero vector.
    pub oov: Vec<String>,
    pub warnings: Vec<String>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Identical tokens have similarity 1 even when out of vocabulary.
fn similarity(a: &str, b: &str, emb: &WordEmbeddings) -> f64 {
    if a == b {
        return 1.0;
    }
    match (emb.get(a), emb.get(b)) {
        (Some(x), Some(y)) => cosine(x, y),
        _ => 0.0,
    }
}

fn greedy(from: &[String], to: &[String], emb: &WordEmbeddings) -> f64 {
    from.iter()
        .map(|a| {
            to.iter()
                .map(|b| similarity(a, b, emb))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum::<f64>()
        / from.len() as f64
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        (2.0 * p * r / (p + r)).clamp(-1.0, 1.0)
    }
}

/// Returns (precision, recall, f1); an empty side scores 0.
pub fn embed_pair(hyp: &[String], reference: &[String], emb: &WordEmbeddings) -> (f64, f64, f64) {
    if hyp.is_empty() || reference.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let p = greedy(hyp, reference, emb);
    let r = greedy(reference, hyp, emb);
    (p, r, f1(p, r))
}

pub fn embed_score(pairs: &[EvalPair], emb: &WordEmbeddings) -> Result<EmbedResult> {
    ensure_nonempty(pairs, "embed_f1")?;
    let mut oov = BTreeSet::new();
    let mut warnings = Vec::new();
    let (mut sp, mut sr) = (0.0, 0.0);
    let mut per_pair = Vec::with_capacity(pairs.len());
    for p in pairs {
        for w in p.hypothesis.iter().chain(&p.reference) {
            if emb.get(w).is_none() {
                oov.insert(w.clone());
            }
        }
        if p.hypothesis.is_empty() || p.reference.is_empty() {
            warnings.push(format!("pair `{}`: empty side scored 0", p.id));
        }
        let (pp, rr, ff) = embed_pair(&p.hypothesis, &p.reference, emb);
        sp += pp;
        sr += rr;
        per_pair.push(ff);
    }
    let n = pairs.len() as f64;
    Ok(EmbedResult {
        precision: sp / n,
        recall: sr / n,
        f1: per_pair.iter().sum::<f64>() / n,
        per_pair,
        oov: oov.into_iter().collect(),
        warnings,
    })
}
