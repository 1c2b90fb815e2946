use serde::{Deserialize, Serialize};

use super::{ensure_nonempty, ngram_counts, EvalPair};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuDetail {
    pub score: f64,
    /// Modified precisions p_1..p_N; add-one smoothed for n ≥ 2.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

/// Clipped matches and hypothesis n-gram total for one pair.
fn clipped(hyp: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let mut matches = 0;
    let mut total = 0;
    for (g, &c) in &h {
        let rc = r.get(g).copied().unwrap_or(0);
        let m = c.min(rc);
        debug_assert!(m <= rc, "clipped count exceeds reference count");
        matches += m;
        total += c;
    }
    (matches, total)
}

fn combine(matches: &[usize], totals: &[usize], hyp_len: usize, ref_len: usize) -> BleuDetail {
    let precisions: Vec<f64> = matches
        .iter()
        .zip(totals)
        .enumerate()
        .map(|(i, (&m, &t))| {
            if i == 0 {
                if t == 0 {
                    0.0
                } else {
                    m as f64 / t as f64
                }
            } else {
                (m as f64 + 1.0) / (t as f64 + 1.0)
            }
        })
        .collect();
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let score = if precisions.contains(&0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / precisions.len() as f64;
        brevity_penalty * log_mean.exp()
    };
    BleuDetail {
        score,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    }
}

fn accumulate<'a>(pairs: impl Iterator<Item = (&'a [String], &'a [String])>, max_n: usize) -> BleuDetail {
    let mut matches = vec![0; max_n];
    let mut totals = vec![0; max_n];
    let (mut hl, mut rl) = (0, 0);
    for (h, r) in pairs {
        hl += h.len();
        rl += r.len();
        for n in 1..=max_n {
            let (m, t) = clipped(h, r, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
    }
    combine(&matches, &totals, hl, rl)
}

/// Corpus BLEU: clipped counts and lengths are summed over the corpus before
/// the geometric mean and brevity penalty.
pub fn bleu(pairs: &[EvalPair], max_n: usize) -> Result<BleuDetail> {
    ensure_nonempty(pairs, "bleu")?;
    Ok(accumulate(
        pairs.iter().map(|p| (p.hypothesis.as_slice(), p.reference.as_slice())),
        max_n.max(1),
    ))
}

pub fn sentence_bleu(hyp: &[String], reference: &[String], max_n: usize) -> f64 {
    accumulate(std::iter::once((hyp, reference)), max_n.max(1)).score
}
