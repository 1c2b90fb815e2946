//! CIDEr-D: tf-idf n-gram cosine with clipped hypothesis weights and a
//! Gaussian length penalty. Document frequencies come from the references.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ensure_nonempty, ngram_counts, EvalPair};
use crate::error::Result;

pub const MAX_N: usize = 4;
pub const SIGMA: f64 = 6.0;
pub const SCALE: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CiderResult {
    pub score: f64,
    pub per_pair: Vec<f64>,
    pub warnings: Vec<String>,
}

type Weights<'a> = Vec<BTreeMap<&'a [String], f64>>;

fn tfidf<'a>(tokens: &'a [String], df: &[BTreeMap<&[String], usize>], log_n: f64) -> (Weights<'a>, Vec<f64>) {
    let mut vecs = Vec::with_capacity(MAX_N);
    let mut norms = Vec::with_capacity(MAX_N);
    for n in 1..=MAX_N {
        let mut v = BTreeMap::new();
        let mut sq = 0.0;
        for (g, c) in ngram_counts(tokens, n) {
            let d = df[n - 1].get(g).copied().unwrap_or(0).max(1) as f64;
            let w = c as f64 * (log_n - d.ln());
            sq += w * w;
            v.insert(g, w);
        }
        vecs.push(v);
        norms.push(sq.sqrt());
    }
    (vecs, norms)
}

pub fn cider(pairs: &[EvalPair]) -> Result<CiderResult> {
    ensure_nonempty(pairs, "cider")?;
    let mut warnings = Vec::new();
    if pairs.len() < 2 {
        warnings.push("single-document corpus: every idf weight is zero".into());
    }
    let mut df: Vec<BTreeMap<&[String], usize>> = vec![BTreeMap::new(); MAX_N];
    for p in pairs {
        for (n, d) in df.iter_mut().enumerate() {
            for g in ngram_counts(&p.reference, n + 1).into_keys() {
                *d.entry(g).or_insert(0) += 1;
            }
        }
    }
    let log_n = (pairs.len() as f64).ln();
    let per_pair: Vec<f64> = pairs
        .iter()
        .map(|p| {
            let (hv, hn) = tfidf(&p.hypothesis, &df, log_n);
            let (rv, rn) = tfidf(&p.reference, &df, log_n);
            let delta = p.hypothesis.len() as f64 - p.reference.len() as f64;
            let penalty = (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp();
            let mut total = 0.0;
            for n in 0..MAX_N {
                let mut val = 0.0;
                for (g, &h) in &hv[n] {
                    if let Some(&r) = rv[n].get(g) {
                        val += h.min(r) * r;
                    }
                }
                if hn[n] != 0.0 && rn[n] != 0.0 {
                    val /= hn[n] * rn[n];
                }
                total += val * penalty;
            }
            SCALE * total / MAX_N as f64
        })
        .collect();
    let score = per_pair.iter().sum::<f64>() / per_pair.len() as f64;
    Ok(CiderResult {
        score,
        per_pair,
        warnings,
    })
}
