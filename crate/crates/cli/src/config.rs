//! Flat `key=value` run configuration with dotted namespaces.
//!
//! A preset supplies every value; assignments from a config file, then
//! `--set`, then typed flags are applied on top. The resolved configuration
//! is written back in the same format, so feeding it to `--config`
//! reproduces the run.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use regcap_core::beam::DecodeConfig;
use regcap_core::data::manifest::Split;
use regcap_core::data::synth::SynthConfig;
use regcap_core::data::text::Vocab;
use regcap_core::data::DataConfig;
use regcap_core::metrics::TestMethod;
use regcap_core::model::ModelConfig;
use regcap_core::trainer::TrainConfig;
use regcap_core::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 32px, two-stage encoder, 32-d decoder: trains in seconds on a CPU.
    Toy,
    /// 224px Swin-B geometry, K=29, 768-d BART-base-sized decoder.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub split: Split,
    pub test: TestMethod,
    pub iters: usize,
    /// `word v1 .. vd` text file for embed_f1; the model's token embeddings
    /// are used when unset.
    pub word_vectors: Option<PathBuf>,
    pub synonyms: Option<PathBuf>,
    /// Validation images whose alpha is saved after every epoch.
    pub alpha_snapshots: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            test: TestMethod::Randomization,
            iters: 10_000,
            word_vectors: None,
            synonyms: None,
            alpha_snapshots: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub out: PathBuf,
    /// Pretrained `[V, D]` token embedding tensor file; seeded random rows when unset.
    pub embeddings: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let (model, train) = match p {
            Preset::Toy => (ModelConfig::toy(0), TrainConfig::toy()),
            Preset::Full => (ModelConfig::full(0), TrainConfig::full()),
        };
        let data = DataConfig {
            image_size: model.encoder.image_size,
            augment: train.augment.clone(),
            ..DataConfig::default()
        };
        Self {
            preset: p,
            out: PathBuf::from("runs/default"),
            embeddings: None,
            data,
            model,
            train,
            decode: DecodeConfig::default(),
            eval: EvalConfig::default(),
            synth: SynthConfig::default(),
        }
    }

    /// Applies `assignments` in order. Keys are checked against the preset's
    /// structure, values against the field types.
    pub fn resolve(assignments: &[(String, String)]) -> Result<Resolved> {
        let preset = match assignments.iter().rev().find(|(k, _)| k == "preset") {
            Some((_, v)) => serde_json::from_value(Value::String(v.trim().to_string()))
                .map_err(|_| Error::Config(format!("preset must be toy or full, got `{v}`")))?,
            None => Preset::Toy,
        };
        let mut root = serde_json::to_value(Self::preset(preset))?;
        let mut set = BTreeSet::new();
        for (key, raw) in assignments {
            if key == "preset" {
                continue;
            }
            if key.starts_with("data.augment") {
                return Err(Error::Config(format!(
                    "`{key}`: augmentation is configured under train.augment"
                )));
            }
            assign(&mut root, key, raw)?;
            set.insert(key.clone());
        }
        let mut cfg: RunConfig =
            serde_json::from_value(root).map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        cfg.derive(&set)?;
        Ok(Resolved {
            config: cfg,
            explicit: set,
        })
    }

    /// Fills fields that follow from others unless they were set explicitly,
    /// and rejects explicit conflicts.
    fn derive(&mut self, set: &BTreeSet<String>) -> Result<()> {
        let conflict = |a: &str, av: usize, b: &str, bv: usize| {
            Err(Error::Config(format!("conflicting settings: {a}={av} but {b}={bv}")))
        };
        let enc_size = self.model.encoder.image_size;
        if set.contains("data.image_size")
            && set.contains("model.encoder.image_size")
            && self.data.image_size != enc_size
        {
            return conflict(
                "data.image_size",
                self.data.image_size,
                "model.encoder.image_size",
                enc_size,
            );
        }
        if set.contains("data.image_size") && !set.contains("model.encoder.image_size") {
            self.model.encoder.image_size = self.data.image_size;
        } else {
            self.data.image_size = self.model.encoder.image_size;
        }
        let channels = self.model.encoder.output_channels();
        if !set.contains("model.regional.in_dim") {
            self.model.regional.in_dim = channels;
        }
        if !set.contains("model.regional.out_dim") {
            self.model.regional.out_dim = self.model.decoder.model_dim;
        }
        self.data.augment = self.train.augment.clone();
        self.train.validate()?;
        self.decode.validate()?;
        self.data.ratios.validate()?;
        if self.eval.iters == 0 {
            return Err(Error::Config("eval.iters must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Flattened `key=value` lines, sorted, preset first.
    pub fn to_assignments(&self) -> Result<String> {
        let mut lines = Vec::new();
        flatten("", &serde_json::to_value(self)?, &mut lines);
        lines.sort();
        let mut out = format!(
            "preset={}\n",
            serde_json::to_value(self.preset)?.as_str().unwrap_or("toy")
        );
        // data.augment mirrors train.augment and is not assignable.
        for l in lines
            .into_iter()
            .filter(|l| !l.starts_with("preset=") && !l.starts_with("data.augment."))
        {
            out.push_str(&l);
            out.push('\n');
        }
        Ok(out)
    }

    /// Writes `config.resolved` and `config.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let p = dir.join("config.resolved");
        fs::write(&p, self.to_assignments()?).map_err(|e| io_err(&p, e))?;
        let p = dir.join("config.json");
        fs::write(&p, serde_json::to_string_pretty(self)?).map_err(|e| io_err(&p, e))
    }
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug)]
pub struct Resolved {
    pub config: RunConfig,
    /// Keys assigned explicitly.
    pub explicit: BTreeSet<String>,
}

impl Resolved {
    /// Loads the vocabulary and fixes the decoder's vocabulary size from it.
    pub fn bind_vocab(&mut self) -> Result<Vocab> {
        let vocab = Vocab::load(&self.config.data.vocab)?;
        let dec = &mut self.config.model.decoder;
        if self.explicit.contains("model.decoder.vocab_size") && dec.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "model.decoder.vocab_size={} but {} holds {} tokens",
                dec.vocab_size,
                self.config.data.vocab.display(),
                vocab.len()
            )));
        }
        dec.vocab_size = vocab.len();
        self.config.model.validate()?;
        Ok(vocab)
    }
}

fn assign(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let unknown = || Error::Config(format!("unknown configuration key `{key}`"));
    let raw = raw.trim();
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        cur = cur.get_mut(*p).filter(|v| v.is_object()).ok_or_else(unknown)?;
    }
    let slot = cur
        .as_object_mut()
        .and_then(|o| o.get_mut(parts[parts.len() - 1]))
        .ok_or_else(unknown)?;
    *slot = match slot {
        Value::String(_) => Value::String(raw.to_string()),
        Value::Null => serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string())),
        Value::Object(_) => return Err(Error::Config(format!("`{key}` is a section, not a value"))),
        _ => serde_json::from_str(raw).map_err(|_| Error::Config(format!("`{key}`: cannot parse `{raw}`")))?,
    };
    Ok(())
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        Value::String(s) => out.push(format!("{prefix}={s}")),
        other => out.push(format!("{prefix}={other}")),
    }
}

/// Parses `key=value` lines; `#` starts a comment.
pub fn parse_assignments(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        out.push(parse_assignment(line).map_err(|e| Error::Config(format!("{origin}:{}: {e}", i + 1)))?);
    }
    Ok(out)
}

pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::Config(format!("expected key=value, got `{s}`"))),
    }
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
    parse_assignments(&text, &path.display().to_string())
}
