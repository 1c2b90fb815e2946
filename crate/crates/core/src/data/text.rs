//! Caption cleaning, WordPiece-style tokenisation and length statistics.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const UNK: &str = "[UNK]";
pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const MAX_LEN: usize = 128;

/// Patterns removed from captions, in order. Bumped whenever the list changes.
pub const CLEANING_RULES_VERSION: u32 = 1;

static CLEANING_RULES: LazyLock<Vec<Regex>> = LazyLock::new(|| {
    [
        // bracketed citation markers and figure callouts: [12], [fig 2]
        r"\[[^\]]*\]",
        // parenthetical figure/table references: (figure 3b), (see table 1)
        r"(?i)\(\s*(?:see\s+)?(?:fig(?:ure)?s?|tables?)\.?[^)]*\)",
        // bare references: fig. 2, figure 3a, table 4
        r"(?i)\b(?:fig(?:ure)?s?|tables?)\.?\s*\d+[a-z]?\b",
        // links
        r"(?i)\bhttps?://\S+|\bwww\.\S+",
    ]
    .iter()
    .map(|p| Regex::new(p).expect("static pattern"))
    .collect()
});

static WHITESPACE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\s+").expect("static pattern"));

/// Strips markup, lowercases and collapses whitespace. `None` when nothing
/// informative is left.
pub fn clean_caption(text: &str) -> Option<String> {
    let mut s = text.to_string();
    for re in CLEANING_RULES.iter() {
        s = re.replace_all(&s, " ").into_owned();
    }
    let s = WHITESPACE.replace_all(s.trim(), " ").to_lowercase();
    let s = s.trim().to_string();
    s.chars().any(char::is_alphanumeric).then_some(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    /// Ids of domain specials (whole-word tokens such as `[CT]`).
    domain: Vec<usize>,
}

impl Vocab {
    /// `tokens` must begin with `[PAD] [BOS] [EOS] [UNK]`; further entries of
    /// the form `[...]` are domain specials.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in [PAD, BOS, EOS, UNK].iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Load(format!(
                    "vocab must start with {PAD} {BOS} {EOS} {UNK}; position {i} is {:?}",
                    tokens.get(i)
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Load(format!("vocab entry {i} is empty or contains whitespace")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Load(format!("duplicate vocab entry `{t}`")));
            }
        }
        let domain = tokens
            .iter()
            .enumerate()
            .skip(4)
            .filter(|(_, t)| t.starts_with('[') && t.ends_with(']'))
            .map(|(i, _)| i)
            .collect();
        Ok(Self { tokens, index, domain })
    }

    /// Whole-word vocabulary from cleaned captions, most frequent first.
    pub fn from_corpus<'a>(captions: impl IntoIterator<Item = &'a str>, domain_specials: &[&str]) -> Result<Self> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for c in captions {
            for w in pre_tokenize(c) {
                *counts.entry(w.to_string()).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = [PAD, BOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
        tokens.extend(domain_specials.iter().map(|s| s.to_string()));
        tokens.extend(
            words
                .into_iter()
                .map(|(w, _)| w)
                .filter(|w| !domain_specials.contains(&w.as_str())),
        );
        Self::new(tokens)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(
            text.lines()
                .map(|l| l.trim_end_matches('\r').to_string())
                .filter(|l| !l.is_empty())
                .collect(),
        )
        .map_err(|e| match e {
            Error::Load(m) => Error::Load(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn domain_specials(&self) -> &[usize] {
        &self.domain
    }

    pub fn is_special(&self, id: usize) -> bool {
        id <= UNK_ID || self.domain.contains(&id)
    }
}

/// Whitespace split, then punctuation peeled off as separate pieces.
/// Bracketed words like `[CT]` are kept whole.
pub fn pre_tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        if word.len() > 2 && word.starts_with('[') && word.ends_with(']') {
            out.push(word);
            continue;
        }
        let mut start = 0;
        for (i, ch) in word.char_indices() {
            if ch.is_ascii_punctuation() {
                if start < i {
                    out.push(&word[start..i]);
                }
                out.push(&word[i..i + ch.len_utf8()]);
                start = i + ch.len_utf8();
            }
        }
        if start < word.len() {
            out.push(&word[start..]);
        }
    }
    out
}

/// Greedy longest-match pieces for one word; `[UNK]` if any span fails.
pub fn wordpiece(word: &str, vocab: &Vocab) -> Vec<usize> {
    if let Some(id) = vocab.id(word) {
        return vec![id];
    }
    let chars: Vec<(usize, char)> = word.char_indices().collect();
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let from = chars[start].0;
        let mut found = None;
        for end in (start + 1..=chars.len()).rev() {
            let to = chars.get(end).map_or(word.len(), |c| c.0);
            let piece = if start == 0 {
                word[from..to].to_string()
            } else {
                format!("##{}", &word[from..to])
            };
            if let Some(id) = vocab.id(&piece) {
                found = Some((id, end));
                break;
            }
        }
        match found {
            Some((id, end)) => {
                pieces.push(id);
                start = end;
            }
            None => return vec![UNK_ID],
        }
    }
    pieces
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encoded {
    /// Exactly `max_len` ids: BOS, content, EOS, PAD…
    pub ids: Vec<usize>,
    /// Non-pad prefix length (BOS and EOS included).
    pub length: usize,
}

pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Result<Encoded> {
    if max_len < 2 {
        return Err(Error::Config(format!("max_len must be ≥ 2, got {max_len}")));
    }
    let mut ids = vec![BOS_ID];
    for w in pre_tokenize(text) {
        ids.extend(wordpiece(w, vocab));
    }
    ids.truncate(max_len - 1);
    ids.push(EOS_ID);
    let length = ids.len();
    ids.resize(max_len, PAD_ID);
    Ok(Encoded { ids, length })
}

/// Joins pieces, gluing `##` continuations; BOS/EOS/PAD are dropped and
/// decoding stops at the first EOS.
pub fn detokenize(ids: &[usize], vocab: &Vocab) -> String {
    let mut out = String::new();
    for &id in ids {
        if id == EOS_ID {
            break;
        }
        if id == PAD_ID || id == BOS_ID {
            continue;
        }
        let tok = vocab.token(id).unwrap_or(UNK);
        if let Some(rest) = tok.strip_prefix("##") {
            out.push_str(rest);
        } else {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(tok);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

/// Linear-interpolation quantile of sorted data: position `(n − 1)·p`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (h - lo as f64)
}

pub fn length_stats(lengths: &[usize]) -> Result<CaptionStats> {
    if lengths.is_empty() {
        return Err(Error::Data("caption statistics need at least one caption".into()));
    }
    let mut v: Vec<f64> = lengths.iter().map(|&l| l as f64).collect();
    v.sort_by(f64::total_cmp);
    Ok(CaptionStats {
        count: v.len(),
        mean: v.iter().sum::<f64>() / v.len() as f64,
        median: quantile_sorted(&v, 0.5),
        q1: quantile_sorted(&v, 0.25),
        q3: quantile_sorted(&v, 0.75),
    })
}

/// Word-count statistics over captions.
pub fn caption_stats<'a>(captions: impl IntoIterator<Item = &'a str>) -> Result<CaptionStats> {
    let lengths: Vec<usize> = captions.into_iter().map(|c| c.split_whitespace().count()).collect();
    length_stats(&lengths)
}
