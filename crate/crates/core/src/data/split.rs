//! Article-level splitting: every image of an article lands in one split.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::manifest::{ManifestEntry, Split};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|x| !x.is_finite() || *x < 0.0) || ((r.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios must be non-negative and sum to 1, got {r:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitAudit {
    pub entries: BTreeMap<Split, usize>,
    pub articles: BTreeMap<Split, usize>,
    /// Articles seen in more than one split; empty on a clean audit.
    pub violations: Vec<String>,
}

/// Uniform value in [0, 1) from `sha256(seed_le ‖ article_id)`.
pub fn article_hash(article_id: &str, seed: u64) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(article_id.as_bytes());
    let d = h.finalize();
    let x = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    (x >> 11) as f64 / (1u64 << 53) as f64
}

pub fn bucket(u: f64, ratios: &SplitRatios) -> Split {
    if u < ratios.train {
        Split::Train
    } else if u < ratios.train + ratios.val {
        Split::Val
    } else {
        Split::Test
    }
}

fn leakage(article: &str, splits: &BTreeSet<Split>) -> Error {
    let names: Vec<&str> = splits.iter().map(|s| s.as_str()).collect();
    Error::Leakage {
        article: article.to_string(),
        splits: names.join(" and "),
    }
}

/// Fills every entry's split. Pre-assigned splits are honoured for the whole
/// article; conflicting pre-assignments are a leakage error.
pub fn assign_splits(entries: &mut [ManifestEntry], ratios: &SplitRatios, seed: u64) -> Result<SplitAudit> {
    ratios.validate()?;
    let mut fixed: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
    for e in entries.iter() {
        if let Some(s) = e.split {
            fixed.entry(e.article_id.as_str()).or_default().insert(s);
        }
    }
    if let Some((a, s)) = fixed.iter().find(|(_, s)| s.len() > 1) {
        return Err(leakage(a, s));
    }
    let fixed: BTreeMap<String, Split> = fixed
        .into_iter()
        .map(|(a, s)| (a.to_string(), *s.iter().next().expect("non-empty")))
        .collect();
    for e in entries.iter_mut() {
        let s = fixed
            .get(&e.article_id)
            .copied()
            .unwrap_or_else(|| bucket(article_hash(&e.article_id, seed), ratios));
        e.split = Some(s);
    }
    audit_splits(entries)
}

/// Counts entries and articles per split; errors on the first article that
/// spans splits or on an unassigned entry.
pub fn audit_splits(entries: &[ManifestEntry]) -> Result<SplitAudit> {
    let mut by_article: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
    let mut audit = SplitAudit::default();
    for e in entries {
        let s = e.split.ok_or_else(|| {
            Error::Data(format!(
                "entry {} of article `{}` has no split",
                e.image_path.display(),
                e.article_id
            ))
        })?;
        *audit.entries.entry(s).or_default() += 1;
        by_article.entry(e.article_id.as_str()).or_default().insert(s);
    }
    for (a, splits) in &by_article {
        for s in splits {
            *audit.articles.entry(*s).or_default() += 1;
        }
        if splits.len() > 1 {
            audit.violations.push(a.to_string());
        }
    }
    if let Some(a) = audit.violations.first() {
        return Err(leakage(a, &by_article[a.as_str()]));
    }
    Ok(audit)
}
