//! Caption metrics, paired significance tests and evaluation reports.
//!
//! Every metric works on normalised word tokens (see [`normalize`]) with a
//! single reference per hypothesis. All reductions run in a fixed order, so
//! identical inputs give bit-identical scores.

pub mod bleu;
pub mod cider;
pub mod embed;
pub mod meteor;
pub mod report;
pub mod rouge;
pub mod significance;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::manifest::Modality;
use crate::error::{Error, Result};

pub use bleu::{bleu, sentence_bleu, BleuDetail};
pub use cider::{cider, CiderResult};
pub use embed::{embed_score, WordEmbeddings};
pub use meteor::{meteor_lite, meteor_pair, Synonyms};
pub use report::{stratify, EvalReport, MetricScores, Stratum};
pub use rouge::{lcs_len, rouge_l, rouge_l_pair};
pub use significance::{paired_test, PairedTest, TestMethod};

/// Lowercase, punctuation to whitespace, whitespace collapsed.
pub fn normalize(text: &str) -> Vec<String> {
    text.chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub id: String,
    pub hypothesis: Vec<String>,
    pub reference: Vec<String>,
    pub modality: Modality,
}

impl EvalPair {
    pub fn new(id: impl Into<String>, hypothesis: &str, reference: &str, modality: Modality) -> Self {
        Self {
            id: id.into(),
            hypothesis: normalize(hypothesis),
            reference: normalize(reference),
            modality,
        }
    }
}

/// One line of the evaluation JSONL input.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub hypothesis: String,
    pub reference: String,
    #[serde(default = "other_tag")]
    pub modality: String,
}

fn other_tag() -> String {
    "OTHER".into()
}

/// Parses evaluation records; unknown modality tags become `OTHER` with a warning.
pub fn parse_eval_jsonl(text: &str) -> Result<(Vec<EvalPair>, Vec<String>)> {
    let mut pairs = Vec::new();
    let mut warnings = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: EvalRecord =
            serde_json::from_str(line).map_err(|e| Error::Data(format!("evaluation line {}: {e}", i + 1)))?;
        let modality = Modality::parse(&rec.modality).unwrap_or_else(|| {
            warnings.push(format!(
                "line {}: unknown modality `{}` mapped to OTHER",
                i + 1,
                rec.modality
            ));
            Modality::Other
        });
        pairs.push(EvalPair::new(rec.id, &rec.hypothesis, &rec.reference, modality));
    }
    Ok((pairs, warnings))
}

pub fn load_eval_jsonl(path: &Path) -> Result<(Vec<EvalPair>, Vec<String>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_eval_jsonl(&text)
}

pub(crate) fn ensure_nonempty(pairs: &[EvalPair], metric: &str) -> Result<()> {
    if pairs.is_empty() {
        Err(Error::Metric(format!("{metric} of an empty corpus")))
    } else {
        Ok(())
    }
}

/// Counts of all n-grams of exactly length `n`, in a deterministic order.
pub(crate) fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut out = BTreeMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default)]
pub struct MetricOptions<'a> {
    pub embeddings: Option<&'a WordEmbeddings>,
    pub synonyms: Option<&'a Synonyms>,
}

/// Metric names, in report order.
pub const METRICS: [&str; 5] = ["bleu", "rouge_l", "cider", "meteor", "embed_f1"];

/// Per-pair scores for `metric`, the inputs to a paired test. BLEU uses the
/// smoothed sentence-level variant; CIDEr uses the whole corpus for IDF.
pub fn per_item(metric: &str, pairs: &[EvalPair], opts: &MetricOptions) -> Result<Vec<f64>> {
    ensure_nonempty(pairs, metric)?;
    Ok(match metric {
        "bleu" => pairs
            .iter()
            .map(|p| sentence_bleu(&p.hypothesis, &p.reference, 4))
            .collect(),
        "rouge_l" => pairs
            .iter()
            .map(|p| rouge_l_pair(&p.hypothesis, &p.reference))
            .collect(),
        "cider" => cider(pairs)?.per_pair,
        "meteor" => pairs
            .iter()
            .map(|p| meteor_pair(&p.hypothesis, &p.reference, opts.synonyms))
            .collect(),
        "embed_f1" => {
            let emb = opts
                .embeddings
                .ok_or_else(|| Error::Metric("embed_f1 needs an embedding table".into()))?;
            embed_score(pairs, emb)?.per_pair
        }
        other => return Err(Error::Metric(format!("unknown metric `{other}`"))),
    })
}
