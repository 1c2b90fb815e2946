use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{
    bleu, cider, embed_score, ensure_nonempty, meteor_lite, rouge_l, EvalPair, MetricOptions, PairedTest, METRICS,
};
use crate::data::manifest::Modality;
use crate::error::{Error, Result};
use crate::stats::Aggregate;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricScores {
    pub bleu: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub meteor: f64,
    /// Absent without an embedding table.
    pub embed_f1: Option<f64>,
}

impl MetricScores {
    /// Corpus scores plus any metric warnings.
    pub fn compute(pairs: &[EvalPair], opts: &MetricOptions) -> Result<(Self, Vec<String>)> {
        ensure_nonempty(pairs, "evaluation")?;
        let c = cider(pairs)?;
        let mut warnings = c.warnings;
        let embed_f1 = match opts.embeddings {
            Some(e) => {
                let r = embed_score(pairs, e)?;
                warnings.extend(r.warnings);
                if !r.oov.is_empty() {
                    warnings.push(format!("{} token types missing from the embedding table", r.oov.len()));
                }
                Some(r.f1)
            }
            None => None,
        };
        Ok((
            Self {
                bleu: bleu(pairs, 4)?.score,
                rouge_l: rouge_l(pairs)?,
                cider: c.score,
                meteor: meteor_lite(pairs, opts.synonyms)?,
                embed_f1,
            },
            warnings,
        ))
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        match metric {
            "bleu" => Some(self.bleu),
            "rouge_l" => Some(self.rouge_l),
            "cider" => Some(self.cider),
            "meteor" => Some(self.meteor),
            "embed_f1" => self.embed_f1,
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub modality: Modality,
    pub count: usize,
    /// `None` for an empty stratum.
    pub scores: Option<MetricScores>,
}

/// All corpus metrics recomputed per modality. Strata are disjoint and
/// together cover `pairs`.
pub fn stratify(pairs: &[EvalPair], opts: &MetricOptions) -> Result<Vec<Stratum>> {
    Modality::ALL
        .iter()
        .map(|&m| {
            let sub: Vec<EvalPair> = pairs.iter().filter(|p| p.modality == m).cloned().collect();
            let scores = if sub.is_empty() {
                None
            } else {
                Some(MetricScores::compute(&sub, opts)?.0)
            };
            Ok(Stratum {
                modality: m,
                count: sub.len(),
                scores,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumReport {
    pub modality: Modality,
    pub count: usize,
    pub metrics: BTreeMap<String, Aggregate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    /// e.g. "reweight vs off"
    pub comparison: String,
    pub metric: String,
    pub test: PairedTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seeds: Vec<u64>,
    pub per_seed: Vec<MetricScores>,
    pub metrics: BTreeMap<String, Aggregate>,
    pub strata: Vec<StratumReport>,
    pub significance: Vec<Significance>,
    pub warnings: Vec<String>,
}

fn aggregate_metrics<'a>(
    scores: impl Iterator<Item = &'a MetricScores> + Clone,
) -> Result<BTreeMap<String, Aggregate>> {
    let mut out = BTreeMap::new();
    for m in METRICS {
        let vals: Vec<f64> = scores.clone().filter_map(|s| s.get(m)).collect();
        if !vals.is_empty() {
            out.insert(m.to_string(), Aggregate::from_values(&vals)?);
        }
    }
    Ok(out)
}

impl EvalReport {
    /// One evaluated corpus per seed.
    pub fn from_runs(runs: &[(u64, Vec<EvalPair>)], opts: &MetricOptions) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Metric("evaluation report over zero runs".into()));
        }
        let mut per_seed = Vec::with_capacity(runs.len());
        let mut strata_runs = Vec::with_capacity(runs.len());
        let mut warnings = Vec::new();
        for (seed, pairs) in runs {
            let (s, w) = MetricScores::compute(pairs, opts)?;
            warnings.extend(w.into_iter().map(|w| format!("seed {seed}: {w}")));
            per_seed.push(s);
            strata_runs.push(stratify(pairs, opts)?);
        }
        let strata = Modality::ALL
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                Ok(StratumReport {
                    modality: m,
                    count: strata_runs[0][i].count,
                    metrics: aggregate_metrics(strata_runs.iter().filter_map(|r| r[i].scores.as_ref()))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            seeds: runs.iter().map(|(s, _)| *s).collect(),
            metrics: aggregate_metrics(per_seed.iter())?,
            per_seed,
            strata,
            significance: Vec::new(),
            warnings,
        })
    }

    /// Aligned plain-text summary.
    pub fn to_table(&self) -> String {
        let fmt_ci = |a: &Aggregate| match (a.ci_low, a.ci_high) {
            (Some(lo), Some(hi)) => format!("[{lo:.4}, {hi:.4}]"),
            _ => "n<2".to_string(),
        };
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>9} {:>9} {:>22}", "metric", "mean", "std", "95% CI");
        for (name, a) in &self.metrics {
            let std = a.std.map_or("-".into(), |v| format!("{v:.4}"));
            let _ = writeln!(s, "{name:<10} {:>9.4} {std:>9} {:>22}", a.mean, fmt_ci(a));
        }
        for st in &self.strata {
            let _ = write!(s, "\n{:<6} n={:<5}", st.modality.as_str(), st.count);
            for (name, a) in &st.metrics {
                let _ = write!(s, " {name}={:.4}", a.mean);
            }
        }
        s.push('\n');
        for sig in &self.significance {
            let _ = writeln!(
                s,
                "{} {}: diff {:+.4}, p = {:.4} ({}, {} iters)",
                sig.comparison, sig.metric, sig.test.observed_diff, sig.test.p_value, sig.test.method, sig.test.iters
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> Vec<EvalPair> {
        vec![
            EvalPair::new("1", "mass in the left lobe", "mass in the left lobe", Modality::Ct),
            EvalPair::new("2", "small cyst", "a small renal cyst", Modality::Ct),
            EvalPair::new("3", "brain lesion", "brain lesion on the right", Modality::Mri),
            EvalPair::new("4", "clear lungs", "the lungs are clear", Modality::Xray),
        ]
    }

    #[test]
    fn strata_partition_corpus() {
        let s = stratify(&corpus(), &MetricOptions::default()).unwrap();
        assert_eq!(s.iter().map(|x| x.count).sum::<usize>(), 4);
        let other = s.iter().find(|x| x.modality == Modality::Other).unwrap();
        assert_eq!((other.count, other.scores.is_none()), (0, true));
    }

    #[test]
    fn all_ct_stratum_equals_global() {
        let mut c = corpus();
        for p in &mut c {
            p.modality = Modality::Ct;
        }
        let opts = MetricOptions::default();
        let (global, _) = MetricScores::compute(&c, &opts).unwrap();
        let s = stratify(&c, &opts).unwrap();
        assert_eq!(s[0].scores.as_ref(), Some(&global));
    }

    #[test]
    fn permutation_invariant_and_pure() {
        let opts = MetricOptions::default();
        let c = corpus();
        let mut r = c.clone();
        r.reverse();
        let (a, _) = MetricScores::compute(&c, &opts).unwrap();
        let (b, _) = MetricScores::compute(&r, &opts).unwrap();
        for m in METRICS {
            if let (Some(x), Some(y)) = (a.get(m), b.get(m)) {
                assert!((x - y).abs() < 1e-12, "{m}");
            }
        }
        let (again, _) = MetricScores::compute(&c, &opts).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
    }

    #[test]
    fn report_over_seeds() {
        let runs = vec![(42, corpus()), (43, corpus()[..3].to_vec())];
        let rep = EvalReport::from_runs(&runs, &MetricOptions::default()).unwrap();
        assert_eq!(rep.metrics["rouge_l"].n, 2);
        assert!(!rep.metrics.contains_key("embed_f1"));
        let table = rep.to_table();
        assert!(table.contains("rouge_l") && table.contains("MRI"));
        let json = serde_json::to_string(&rep).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.seeds, vec![42, 43]);
    }
}
