//! Beam search with length penalty and repeated n-gram blocking, plus a
//! brute-force decoder used as an oracle on tiny instances.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Most sequences `exhaustive_decode` will enumerate.
pub const EXHAUSTIVE_LIMIT: f64 = 1e6;

/// Anything that scores the next token given full prefixes (BOS first).
pub trait StepModel {
    fn vocab_size(&self) -> usize;
    /// One row of `vocab_size` log-probabilities per prefix.
    fn next_token_logprobs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub length_penalty: f64,
    /// 0 disables blocking.
    pub no_repeat_ngram: usize,
    /// Generated tokens, EOS included, BOS excluded.
    pub max_length: usize,
    pub bos: usize,
    pub eos: usize,
    pub pad: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 4,
            length_penalty: 1.1,
            no_repeat_ngram: 3,
            max_length: 128,
            bos: 1,
            eos: 2,
            pad: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("decode.beam_size must be ≥ 1".into()));
        }
        if self.max_length < 2 {
            return Err(Error::Config("decode.max_length must be ≥ 2".into()));
        }
        if !self.length_penalty.is_finite() || self.length_penalty < 0.0 {
            return Err(Error::Config(format!(
                "decode.length_penalty must be finite and ≥ 0, got {}",
                self.length_penalty
            )));
        }
        if self.bos == self.eos || self.bos == self.pad || self.eos == self.pad {
            return Err(Error::Config("bos, eos and pad ids must differ".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated ids; ends with EOS when finished that way.
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens with a trailing EOS removed.
    pub fn content(&self, eos: usize) -> &[usize] {
        match self.tokens.split_last() {
            Some((&last, rest)) if last == eos => rest,
            _ => &self.tokens,
        }
    }
}

/// `logprob / len^lp`.
pub fn final_score(logprob: f64, len: usize, lp: f64) -> f64 {
    debug_assert!(len >= 1);
    logprob / (len as f64).powf(lp)
}

/// Tokens that would complete an `n`-gram already present in `prefix`.
pub fn banned_tokens(prefix: &[usize], n: usize) -> Vec<usize> {
    if n == 0 || prefix.len() + 1 < n {
        return Vec::new();
    }
    let tail = &prefix[prefix.len() + 1 - n..];
    let mut out: Vec<usize> = prefix
        .windows(n)
        .filter(|w| w[..n - 1] == *tail)
        .map(|w| w[n - 1])
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Sets banned continuations to −∞. `n = 0` is a no-op.
pub fn block_repeat_ngrams(prefix: &[usize], n: usize, logprobs: &mut [f64]) {
    for t in banned_tokens(prefix, n) {
        if let Some(v) = logprobs.get_mut(t) {
            *v = f64::NEG_INFINITY;
        }
    }
}

/// True when some `n`-gram occurs twice in `tokens`.
pub fn has_repeated_ngram(tokens: &[usize], n: usize) -> bool {
    if n == 0 || tokens.len() < n {
        return false;
    }
    let mut seen = std::collections::HashSet::new();
    tokens.windows(n).any(|w| !seen.insert(w))
}

fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

fn finalize(mut pool: Vec<Hypothesis>) -> Vec<Hypothesis> {
    pool.sort_by(|a, b| rank((a.score, &a.tokens), (b.score, &b.tokens)));
    pool
}

fn expansions(model: &dyn StepModel, cfg: &DecodeConfig, live: &[(Vec<usize>, f64)]) -> Result<Vec<Vec<f64>>> {
    let prefixes: Vec<Vec<usize>> = live
        .iter()
        .map(|(toks, _)| {
            let mut p = Vec::with_capacity(toks.len() + 1);
            p.push(cfg.bos);
            p.extend_from_slice(toks);
            p
        })
        .collect();
    let mut rows = model.next_token_logprobs(&prefixes)?;
    let v = model.vocab_size();
    if rows.len() != live.len() || rows.iter().any(|r| r.len() != v) {
        return Err(Error::Contract(format!(
            "step model returned {} rows for {} prefixes (vocab {v})",
            rows.len(),
            live.len()
        )));
    }
    for ((toks, _), row) in live.iter().zip(rows.iter_mut()) {
        block_repeat_ngrams(toks, cfg.no_repeat_ngram, row);
        for special in [cfg.bos, cfg.pad] {
            if let Some(x) = row.get_mut(special) {
                *x = f64::NEG_INFINITY;
            }
        }
    }
    Ok(rows)
}

/// Returns finished hypotheses best first (best is `[0]`).
///
/// Each step keeps the `beam_size` best expansions overall, ranked by
/// cumulative log-probability then token ids. Expansions that emit EOS or
/// reach `max_length` move to the finished pool and their slot is not
/// refilled, so `beam_size = 1` is exactly the greedy chain. Search stops
/// once no live hypothesis can beat the best finished score. If nothing
/// finishes (every continuation blocked) the best live prefix is returned
/// with `finished = false`.
pub fn beam_search(model: &dyn StepModel, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let lp = cfg.length_penalty;
    let bound_div = (cfg.max_length as f64).powf(lp);
    let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut pool: Vec<Hypothesis> = Vec::new();
    let mut fallback: Option<(Vec<usize>, f64)> = None;

    while !live.is_empty() {
        let rows = expansions(model, cfg, &live)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            for (tok, &l) in row.iter().enumerate() {
                if l.is_finite() {
                    cands.push((live[i].1 + l, i, tok));
                }
            }
        }
        if cands.is_empty() {
            fallback = live.into_iter().next();
            break;
        }
        let mut cands: Vec<(f64, Vec<usize>)> = cands
            .into_iter()
            .map(|(s, i, tok)| {
                let mut t = live[i].0.clone();
                t.push(tok);
                (s, t)
            })
            .collect();
        cands.sort_by(|a, b| rank((a.0, &a.1), (b.0, &b.1)));
        cands.truncate(cfg.beam_size);

        let mut next = Vec::new();
        for (cum, toks) in cands {
            if toks.last() == Some(&cfg.eos) || toks.len() >= cfg.max_length {
                pool.push(Hypothesis {
                    score: final_score(cum, toks.len(), lp),
                    tokens: toks,
                    logprob: cum,
                    finished: true,
                });
            } else {
                next.push((toks, cum));
            }
        }
        live = next;

        let best = pool.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if live.iter().all(|(_, cum)| cum / bound_div <= best) {
            break;
        }
    }

    if pool.is_empty() {
        let (tokens, logprob) = fallback.unwrap_or_default();
        let score = if tokens.is_empty() {
            f64::NEG_INFINITY
        } else {
            final_score(logprob, tokens.len(), lp)
        };
        return Ok(vec![Hypothesis {
            tokens,
            logprob,
            score,
            finished: false,
        }]);
    }
    Ok(finalize(pool))
}

/// Argmax chain: repeatedly take the best allowed token (lowest id on ties).
pub fn greedy_decode(model: &dyn StepModel, cfg: &DecodeConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    let mut toks: Vec<usize> = Vec::new();
    let mut cum = 0.0;
    loop {
        let rows = expansions(model, cfg, &[(toks.clone(), cum)])?;
        let best = rows[0]
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_finite())
            .max_by(|a, b| a.1.total_cmp(b.1).then_with(|| b.0.cmp(&a.0)));
        let Some((tok, &l)) = best else {
            let score = if toks.is_empty() {
                f64::NEG_INFINITY
            } else {
                final_score(cum, toks.len(), cfg.length_penalty)
            };
            return Ok(Hypothesis {
                tokens: toks,
                logprob: cum,
                score,
                finished: false,
            });
        };
        toks.push(tok);
        cum += l;
        if tok == cfg.eos || toks.len() >= cfg.max_length {
            return Ok(Hypothesis {
                score: final_score(cum, toks.len(), cfg.length_penalty),
                tokens: toks,
                logprob: cum,
                finished: true,
            });
        }
    }
}

/// Number of proposable tokens per step (everything except BOS and PAD).
fn branching(model: &dyn StepModel, cfg: &DecodeConfig) -> usize {
    (0..model.vocab_size())
        .filter(|&t| t != cfg.bos && t != cfg.pad)
        .count()
}

/// Scores every finished sequence and returns the best under the same
/// ordering as `beam_search`.
pub fn exhaustive_decode(model: &dyn StepModel, cfg: &DecodeConfig) -> Result<Hypothesis> {
    cfg.validate()?;
    let b = branching(model, cfg) as f64;
    let space: f64 = (1..=cfg.max_length as i32).map(|t| b.powi(t)).sum();
    if space > EXHAUSTIVE_LIMIT {
        return Err(Error::OracleScope(format!(
            "exhaustive search over ~{space:.3e} sequences exceeds {EXHAUSTIVE_LIMIT:e}"
        )));
    }
    let mut best: Option<Hypothesis> = None;
    let mut stack: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    while let Some((toks, cum)) = stack.pop() {
        let rows = expansions(model, cfg, &[(toks.clone(), cum)])?;
        for (tok, &l) in rows[0].iter().enumerate() {
            if !l.is_finite() {
                continue;
            }
            let mut t = toks.clone();
            t.push(tok);
            let c = cum + l;
            if tok == cfg.eos || t.len() >= cfg.max_length {
                let h = Hypothesis {
                    score: final_score(c, t.len(), cfg.length_penalty),
                    tokens: t,
                    logprob: c,
                    finished: true,
                };
                let better = best
                    .as_ref()
                    .is_none_or(|cur| rank((h.score, &h.tokens), (cur.score, &cur.tokens)) == Ordering::Less);
                if better {
                    best = Some(h);
                }
            } else {
                stack.push((t, c));
            }
        }
    }
    best.ok_or_else(|| Error::OracleScope("no finished sequence reachable".into()))
}

/// Enumerated sequence count, for tests of the guard.
pub fn count_sequences(model: &dyn StepModel, cfg: &DecodeConfig) -> Result<usize> {
    cfg.validate()?;
    let mut n = 0;
    let mut stack: Vec<Vec<usize>> = vec![Vec::new()];
    while let Some(toks) = stack.pop() {
        let rows = expansions(model, cfg, &[(toks.clone(), 0.0)])?;
        for (tok, &l) in rows[0].iter().enumerate() {
            if !l.is_finite() {
                continue;
            }
            let mut t = toks.clone();
            t.push(tok);
            if tok == cfg.eos || t.len() >= cfg.max_length {
                n += 1;
            } else {
                stack.push(t);
            }
        }
    }
    Ok(n)
}

/// A fixed conditional table: `logits[hash(prefix)]`, normalised per row.
/// Deterministic in its seed; used by tests and the acceptance suite.
#[derive(Clone, Debug)]
pub struct TableModel {
    pub vocab: usize,
    pub seed: u64,
    /// Ids that are never proposed (probability 0).
    pub disabled: Vec<usize>,
}

impl TableModel {
    fn row(&self, prefix: &[usize]) -> Vec<f64> {
        use rand::{Rng as _, SeedableRng};
        let mut h: u64 = self.seed ^ 0x9E37_79B9_7F4A_7C15;
        for &t in prefix {
            h = h.wrapping_mul(0x100_0000_01B3).wrapping_add(t as u64 + 1);
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(h);
        let logits: Vec<f64> = (0..self.vocab)
            .map(|i| {
                if self.disabled.contains(&i) {
                    f64::NEG_INFINITY
                } else {
                    rng.random_range(-3.0..3.0)
                }
            })
            .collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln() + m;
        logits.iter().map(|l| l - z).collect()
    }
}

impl StepModel for TableModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_token_logprobs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        Ok(prefixes.iter().map(|p| self.row(p)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const PAD: usize = 0;
    const BOS: usize = 1;
    const EOS: usize = 2;

    fn cfg(beam: usize, max_length: usize, lp: f64, nrn: usize) -> DecodeConfig {
        DecodeConfig {
            beam_size: beam,
            length_penalty: lp,
            no_repeat_ngram: nrn,
            max_length,
            bos: BOS,
            eos: EOS,
            pad: PAD,
        }
    }

    /// Probabilities from an explicit table over tokens {a=3, b=4, EOS=2}.
    struct Explicit;
    impl StepModel for Explicit {
        fn vocab_size(&self) -> usize {
            5
        }
        fn next_token_logprobs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
            Ok(prefixes
                .iter()
                .map(|p| {
                    let (pa, pb, pe): (f64, f64, f64) = match p.len() {
                        1 => (0.5, 0.4, 0.1),
                        2 if p[1] == 3 => (0.2, 0.3, 0.5),
                        2 => (0.6, 0.3, 0.1),
                        _ => (0.3, 0.3, 0.4),
                    };
                    vec![f64::NEG_INFINITY, f64::NEG_INFINITY, pe.ln(), pa.ln(), pb.ln()]
                })
                .collect())
        }
    }

    #[test]
    fn trigram_block_rule_trace() {
        let mut lp = vec![0.0; 5];
        block_repeat_ngrams(&[0, 1, 2, 0, 1], 3, &mut lp);
        assert_eq!(lp[2], f64::NEG_INFINITY);
        assert!(lp.iter().enumerate().all(|(i, v)| i == 2 || *v == 0.0));
    }

    #[test]
    fn short_prefix_never_blocked() {
        assert!(banned_tokens(&[4], 3).is_empty());
        assert!(banned_tokens(&[], 2).is_empty());
        assert!(banned_tokens(&[4, 4], 0).is_empty());
        assert_eq!(banned_tokens(&[4, 5], 1), vec![4, 5]);
    }

    proptest! {
        #[test]
        fn block_matches_substring_scan(prefix in proptest::collection::vec(0usize..4, 0..12), n in 1usize..5) {
            let got = banned_tokens(&prefix, n);
            let oracle: Vec<usize> = (0..4)
                .filter(|&t| {
                    let mut ext = prefix.clone();
                    ext.push(t);
                    let tail = &ext[ext.len().saturating_sub(n)..];
                    tail.len() == n
                        && (0..prefix.len().saturating_sub(n - 1)).any(|s| &prefix[s..s + n] == tail)
                })
                .collect();
            prop_assert_eq!(got, oracle);
        }
    }

    #[test]
    fn final_score_examples() {
        assert!((final_score(-2.0, 4, 1.1) - (-0.435_275_281_648_062)).abs() < 1e-12);
        assert_eq!(final_score(-2.0, 4, 0.0), -2.0);
        assert_eq!(final_score(-2.0, 4, 1.0), -0.5);
    }

    #[test]
    fn explicit_table_matches_hand_enumeration() {
        // Hand enumeration with lp = 0: the best complete sequence is
        // a,EOS (0.5·0.5 = 0.25), ahead of b,a,EOS (0.4·0.6·0.4 = 0.096).
        let c = cfg(9, 3, 0.0, 0);
        let best = &beam_search(&Explicit, &c).unwrap()[0];
        assert_eq!(best.tokens, vec![3, EOS]);
        assert!((best.logprob - 0.25f64.ln()).abs() < 1e-12);
        assert_eq!(exhaustive_decode(&Explicit, &c).unwrap().tokens, vec![3, EOS]);
        // 1 + 2 + 4 one- to three-token EOS endings plus 8 length-3 non-EOS.
        assert_eq!(count_sequences(&Explicit, &c).unwrap(), 15);
    }

    #[test]
    fn explicit_table_with_penalty_matches_exhaustive() {
        for lp in [0.5, 1.0, 1.1, 2.0] {
            let c = cfg(9, 3, lp, 0);
            let beam = &beam_search(&Explicit, &c).unwrap()[0];
            let ex = exhaustive_decode(&Explicit, &c).unwrap();
            assert_eq!(beam.tokens, ex.tokens, "lp {lp}");
            assert!((beam.score - ex.score).abs() < 1e-12);
        }
    }

    #[test]
    fn two_token_space_count() {
        // V=2 proposable (a, b) and no EOS reachable: T=2 → 4 sequences.
        let m = TableModel {
            vocab: 5,
            seed: 1,
            disabled: vec![EOS],
        };
        assert_eq!(count_sequences(&m, &cfg(1, 2, 0.0, 0)).unwrap(), 4);
    }

    #[test]
    fn guard_refuses_large_space() {
        let m = TableModel {
            vocab: 102,
            seed: 1,
            disabled: vec![],
        };
        assert!(matches!(
            exhaustive_decode(&m, &cfg(1, 10, 1.0, 0)),
            Err(Error::OracleScope(_))
        ));
    }

    #[test]
    fn deterministic() {
        let m = TableModel {
            vocab: 8,
            seed: 5,
            disabled: vec![],
        };
        let c = cfg(4, 6, 1.1, 2);
        assert_eq!(beam_search(&m, &c).unwrap(), beam_search(&m, &c).unwrap());
    }

    #[test]
    fn fully_blocked_returns_unfinished() {
        // Only token 3 is allowed; bigram blocking forbids 3,3 → stuck.
        let m = TableModel {
            vocab: 4,
            seed: 2,
            disabled: vec![EOS],
        };
        let c = cfg(2, 5, 1.0, 1);
        let out = beam_search(&m, &c).unwrap();
        assert_eq!(out.len(), 1);
        assert!(!out[0].finished);
        assert_eq!(out[0].tokens, vec![3]);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(0, 5, 1.0, 0).validate().is_err());
        assert!(cfg(1, 1, 1.0, 0).validate().is_err());
        assert!(cfg(1, 2, -1.0, 0).validate().is_err());
        let d = DecodeConfig::default();
        assert_eq!(
            (d.beam_size, d.length_penalty, d.no_repeat_ngram, d.max_length),
            (4, 1.1, 3, 128)
        );
    }

    fn toy_model() -> impl Strategy<Value = (TableModel, usize, f64, usize)> {
        (
            3usize..=4,
            2usize..=4,
            any::<u64>(),
            prop_oneof![Just(0.0), Just(1.0), Just(1.1)],
            0usize..=3,
        )
            .prop_map(|(proposable, t, seed, lp, nrn)| {
                // Vocab = PAD, BOS, EOS plus `proposable - 1` content tokens.
                (
                    TableModel {
                        vocab: proposable + 2,
                        seed,
                        disabled: vec![],
                    },
                    t,
                    lp,
                    nrn,
                )
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn covering_beam_equals_exhaustive((m, t, lp, nrn) in toy_model()) {
            let b = branching(&m, &cfg(1, t, lp, nrn));
            let covering = b.pow(t as u32);
            let c = cfg(covering, t, lp, nrn);
            let beam = beam_search(&m, &c).unwrap();
            let ex = exhaustive_decode(&m, &c).unwrap();
            prop_assert_eq!(&beam[0].tokens, &ex.tokens);
            prop_assert!((beam[0].score - ex.score).abs() < 1e-12);
        }

        #[test]
        fn beam_one_is_greedy((m, t, lp, nrn) in toy_model()) {
            let c = cfg(1, t, lp, nrn);
            let beam = beam_search(&m, &c).unwrap();
            let g = greedy_decode(&m, &c).unwrap();
            prop_assert_eq!(&beam[0].tokens, &g.tokens);
        }

        #[test]
        fn outputs_respect_constraints((m, t, lp, _nrn) in toy_model(), beam in 1usize..6) {
            let c = cfg(beam, t + 2, lp, 2);
            for h in beam_search(&m, &c).unwrap() {
                prop_assert!(h.tokens.len() <= c.max_length);
                prop_assert!(!has_repeated_ngram(&h.tokens, 2));
                if h.finished {
                    prop_assert!(h.tokens.last() == Some(&EOS) || h.tokens.len() == c.max_length);
                }
                prop_assert!(!h.tokens.contains(&BOS) && !h.tokens.contains(&PAD));
            }
        }

        #[test]
        fn covering_beam_not_worse_than_greedy_without_penalty((m, t, _lp, nrn) in toy_model()) {
            let b = branching(&m, &cfg(1, t, 0.0, nrn));
            let c = cfg(b.pow(t as u32), t, 0.0, nrn);
            let g = greedy_decode(&m, &cfg(1, t, 0.0, nrn)).unwrap();
            let b = &beam_search(&m, &c).unwrap()[0];
            if g.finished {
                prop_assert!(b.score >= g.score - 1e-12);
            }
        }
    }
}
