//! METEOR without stemming or WordNet: unigram alignment on exact (or
//! user-declared synonym) matches, recall-weighted F-mean and a
//! fragmentation penalty.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{ensure_nonempty, normalize, EvalPair};
use crate::error::{Error, Result};

pub const ALPHA: f64 = 0.9;
pub const GAMMA: f64 = 0.5;
pub const BETA: f64 = 3.0;

/// Synonym groups, one per line, whitespace separated. Every word maps to
/// the first word of its group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Synonyms {
    canonical: HashMap<String, String>,
}

impl Synonyms {
    pub fn parse(text: &str) -> Self {
        let mut canonical = HashMap::new();
        for line in text.lines() {
            let words = normalize(line);
            if let Some(head) = words.first() {
                for w in &words {
                    canonical.entry(w.clone()).or_insert_with(|| head.clone());
                }
            }
        }
        Self { canonical }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }

    fn canon<'a>(&'a self, w: &'a str) -> &'a str {
        self.canonical.get(w).map_or(w, String::as_str)
    }
}

/// Aligns hypothesis words left to right. Among equal candidates the one
/// extending the previous match is preferred, which keeps chunks long.
pub fn align(hyp: &[String], reference: &[String], synonyms: Option<&Synonyms>) -> Vec<(usize, usize)> {
    let canon = |w: &str| -> String { synonyms.map_or(w, |s| s.canon(w)).to_string() };
    let ref_c: Vec<String> = reference.iter().map(|w| canon(w)).collect();
    let mut used = vec![false; reference.len()];
    let mut out: Vec<(usize, usize)> = Vec::new();
    for (i, w) in hyp.iter().enumerate() {
        let w = canon(w);
        let next = out.last().map(|&(_, j)| j + 1);
        let pick = next
            .filter(|&j| j < ref_c.len() && !used[j] && ref_c[j] == w)
            .or_else(|| (0..ref_c.len()).find(|&j| !used[j] && ref_c[j] == w));
        if let Some(j) = pick {
            used[j] = true;
            out.push((i, j));
        }
    }
    out
}

pub fn chunks(alignment: &[(usize, usize)]) -> usize {
    alignment
        .iter()
        .enumerate()
        .filter(|(k, &(i, j))| *k == 0 || alignment[k - 1] != (i - 1, j.wrapping_sub(1)))
        .count()
}

pub fn meteor_pair(hyp: &[String], reference: &[String], synonyms: Option<&Synonyms>) -> f64 {
    let a = align(hyp, reference, synonyms);
    let m = a.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = p * r / (ALPHA * p + (1.0 - ALPHA) * r);
    let penalty = GAMMA * (chunks(&a) as f64 / m as f64).powf(BETA);
    f_mean * (1.0 - penalty)
}

/// Mean of per-pair scores.
pub fn meteor_lite(pairs: &[EvalPair], synonyms: Option<&Synonyms>) -> Result<f64> {
    ensure_nonempty(pairs, "meteor")?;
    Ok(pairs
        .iter()
        .map(|p| meteor_pair(&p.hypothesis, &p.reference, synonyms))
        .sum::<f64>()
        / pairs.len() as f64)
}
