//! Train, evaluate, caption, heatmap and ablation runs. Every run writes its
//! resolved configuration into its output directory before any compute.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use regcap_core::beam::DecodeConfig;
use regcap_core::data::image::{preprocess_image, read_pnm, stack_images, write_pnm};
use regcap_core::data::manifest::{Modality, Split};
use regcap_core::data::text::{detokenize, Vocab};
use regcap_core::data::{load_dataset, make_batch, Dataset, Sample};
use regcap_core::decoder::{load_embedding_table, EmbeddingTable, EMBEDDING};
use regcap_core::heatmap::{heatmap, overlay, AlphaExport};
use regcap_core::metrics::report::Significance;
use regcap_core::metrics::{
    load_eval_jsonl, paired_test, per_item, EvalPair, EvalRecord, EvalReport, MetricOptions, Synonyms, WordEmbeddings,
    METRICS,
};
use regcap_core::model::CaptionModel;
use regcap_core::regional::RegionalMode;
use regcap_core::trainer::{run_seeds, train_loop, JsonlLog, LogRecord, RunRecord, SeedRuns, TrainObserver};
use regcap_core::{Error, Result, Rng, Tensor};

use crate::config::{io_err, Resolved, RunConfig};

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Binds the vocabulary, loads the dataset and reports dropped items.
pub fn load_data(res: &mut Resolved) -> Result<(Vocab, Dataset)> {
    let vocab = res.bind_vocab()?;
    let ds = load_dataset(&res.config.data)?;
    Ok((vocab, ds))
}

/// Fresh model for `seed`; pretrained embeddings when configured.
pub fn init_model(cfg: &RunConfig, seed: u64) -> Result<CaptionModel> {
    let (v, d) = (cfg.model.decoder.vocab_size, cfg.model.decoder.model_dim);
    let table = match &cfg.embeddings {
        Some(p) => load_embedding_table(p, v, d)?,
        None => EmbeddingTable::random(v, d, seed),
    };
    CaptionModel::init(cfg.model.clone(), &table, seed)
}

/// Per-epoch JSONL log plus alpha snapshots on a fixed set of validation images.
struct RunObserver {
    dir: PathBuf,
    log: Option<JsonlLog<File>>,
    probe: Option<Tensor>,
}

impl RunObserver {
    fn new(dir: PathBuf, probe: Option<Tensor>) -> Self {
        Self { dir, log: None, probe }
    }
}

impl TrainObserver for RunObserver {
    fn log(&mut self, record: &LogRecord) -> Result<()> {
        if self.log.is_none() {
            fs::create_dir_all(&self.dir).map_err(|e| io_err(&self.dir, e))?;
            let p = self.dir.join("log.jsonl");
            self.log = Some(JsonlLog(File::create(&p).map_err(|e| io_err(&p, e))?));
        }
        self.log.as_mut().expect("opened").log(record)
    }

    fn epoch_end(&mut self, epoch: usize, model: &CaptionModel, _improved: bool) -> Result<()> {
        let Some(images) = &self.probe else { return Ok(()) };
        let enc = model.encode(images)?;
        let n = enc.grid_height * enc.grid_width;
        let export = AlphaExport {
            alpha: enc.alpha.data().chunks(n).map(<[f64]>::to_vec).collect(),
            grid_height: enc.grid_height,
            grid_width: enc.grid_width,
        };
        write_json(&self.dir.join(format!("alpha/epoch{epoch:03}.json")), &export)
    }
}

fn probe_images(cfg: &RunConfig, ds: &Dataset) -> Result<Option<Tensor>> {
    let val = ds.split(Split::Val);
    let n = cfg.eval.alpha_snapshots.min(val.len());
    if n == 0 {
        return Ok(None);
    }
    Ok(Some(make_batch(&val[..n], cfg.data.image_size, None)?.images))
}

fn checkpoint_extra(r: &RunRecord) -> serde_json::Value {
    serde_json::json!({
        "seed": r.seed,
        "best_epoch": r.best_epoch,
        "best_val_loss": r.best_val_loss,
        "stream_hash": r.stream_hash,
    })
}

/// Trains every configured seed; writes `seed<N>/{best.ckpt,record.json,log.jsonl,alpha/}`
/// and `aggregate.json` under `out`.
pub fn run_train(res: &mut Resolved) -> Result<SeedRuns> {
    let (_, ds) = load_data(res)?;
    let cfg = &res.config;
    cfg.write_to(&cfg.out)?;
    if !ds.warnings.is_empty() {
        write_text(&cfg.out.join("data_warnings.txt"), &(ds.warnings.join("\n") + "\n"))?;
    }
    write_json(&cfg.out.join("split_audit.json"), &ds.audit)?;
    let probe = probe_images(cfg, &ds)?;
    let (runs, models) = run_seeds(&mut |seed| init_model(cfg, seed), &ds, &cfg.train, &mut |seed| {
        Box::new(RunObserver::new(cfg.out.join(format!("seed{seed}")), probe.clone()))
    })?;
    for (record, model) in runs.records.iter().zip(&models) {
        let dir = cfg.out.join(format!("seed{}", record.seed));
        model.save(&dir.join("best.ckpt"), checkpoint_extra(record))?;
        write_json(&dir.join("record.json"), record)?;
    }
    write_json(&cfg.out.join("aggregate.json"), &runs)?;
    Ok(runs)
}

/// `seed<N>/best.ckpt` files under `dir`, ordered by seed.
pub fn find_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(seed) = name.strip_prefix("seed").and_then(|s| s.parse::<u64>().ok()) {
            let ckpt = entry.path().join("best.ckpt");
            if ckpt.exists() {
                found.push((seed, ckpt));
            }
        }
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub id: String,
    pub hypothesis: String,
    pub reference: String,
    pub modality: Modality,
    pub tokens: Vec<usize>,
    pub score: f64,
    pub finished: bool,
}

impl Decoded {
    pub fn pair(&self) -> EvalPair {
        EvalPair::new(self.id.clone(), &self.hypothesis, &self.reference, self.modality)
    }

    fn record(&self) -> EvalRecord {
        EvalRecord {
            id: self.id.clone(),
            hypothesis: self.hypothesis.clone(),
            reference: self.reference.clone(),
            modality: self.modality.to_string(),
        }
    }
}

/// Beam-decodes each sample on its own.
pub fn decode_samples(
    model: &CaptionModel,
    samples: &[&Sample],
    vocab: &Vocab,
    decode: &DecodeConfig,
) -> Result<Vec<Decoded>> {
    let size = model.config.encoder.image_size;
    samples
        .iter()
        .map(|s| {
            let image = make_batch(&[*s], size, None)?.images;
            let g = model.generate(&image, decode)?;
            let best = &g.hypotheses[0];
            let content = best.content(decode.eos).to_vec();
            Ok(Decoded {
                id: format!("{:05}", s.index),
                hypothesis: detokenize(&content, vocab),
                reference: s.caption.clone(),
                modality: s.modality,
                tokens: content,
                score: best.score,
                finished: best.finished,
            })
        })
        .collect()
}

fn write_hypotheses(path: &Path, decoded: &[Decoded]) -> Result<()> {
    let mut text = String::new();
    for d in decoded {
        text.push_str(&serde_json::to_string(&d.record())?);
        text.push('\n');
    }
    write_text(path, &text)
}

/// Whole-word rows of the model's token embedding table.
pub fn model_word_vectors(model: &CaptionModel, vocab: &Vocab) -> Result<WordEmbeddings> {
    let table = model.params.get(EMBEDDING)?;
    let d = table.shape()[1];
    let mut out = WordEmbeddings::new(d);
    for (id, row) in table.data().chunks(d).enumerate() {
        match vocab.token(id) {
            Some(t) if !vocab.is_special(id) && !t.starts_with("##") => out.insert(t, row.to_vec())?,
            _ => {}
        }
    }
    Ok(out)
}

struct MetricInputs {
    embeddings: Option<WordEmbeddings>,
    synonyms: Option<Synonyms>,
}

impl MetricInputs {
    fn load(cfg: &RunConfig, fallback: Option<(&CaptionModel, &Vocab)>) -> Result<Self> {
        let embeddings = match (&cfg.eval.word_vectors, fallback) {
            (Some(p), _) => Some(WordEmbeddings::load(p)?),
            (None, Some((m, v))) => Some(model_word_vectors(m, v)?),
            (None, None) => None,
        };
        let synonyms = cfg.eval.synonyms.as_deref().map(Synonyms::load).transpose()?;
        Ok(Self { embeddings, synonyms })
    }

    fn options(&self) -> MetricOptions<'_> {
        MetricOptions {
            embeddings: self.embeddings.as_ref(),
            synonyms: self.synonyms.as_ref(),
        }
    }
}

fn eval_split<'a>(cfg: &RunConfig, ds: &'a Dataset) -> Result<Vec<&'a Sample>> {
    let samples = ds.split(cfg.eval.split);
    if samples.is_empty() {
        return Err(Error::Data(format!("the {} split is empty", cfg.eval.split)));
    }
    Ok(samples)
}

fn finish_report(dir: &Path, report: &EvalReport) -> Result<()> {
    write_json(&dir.join("report.json"), report)?;
    write_text(&dir.join("report.txt"), &report.to_table())
}

/// Decodes the evaluation split with every checkpoint (one per seed) and
/// writes `eval/{report.json,report.txt,hypotheses_seed<N>.jsonl}`.
/// Checkpoints default to those found under `out`.
pub fn run_eval(res: &mut Resolved, checkpoints: &[PathBuf]) -> Result<EvalReport> {
    let (vocab, ds) = load_data(res)?;
    let cfg = &res.config;
    let samples = eval_split(cfg, &ds)?;
    let checkpoints = if checkpoints.is_empty() {
        find_checkpoints(&cfg.out)?
    } else {
        checkpoints.to_vec()
    };
    if checkpoints.is_empty() {
        return Err(Error::Data(format!("no seed*/best.ckpt under {}", cfg.out.display())));
    }
    let dir = cfg.out.join("eval");
    cfg.write_to(&dir)?;
    let mut runs = Vec::new();
    let mut inputs = None;
    for (i, path) in checkpoints.iter().enumerate() {
        let (model, extra) = CaptionModel::load_for(path, &cfg.model)?;
        let seed = extra["seed"].as_u64().unwrap_or(i as u64);
        let decoded = decode_samples(&model, &samples, &vocab, &cfg.decode)?;
        write_hypotheses(&dir.join(format!("hypotheses_seed{seed}.jsonl")), &decoded)?;
        if inputs.is_none() {
            inputs = Some(MetricInputs::load(cfg, Some((&model, &vocab)))?);
        }
        runs.push((seed, decoded.iter().map(Decoded::pair).collect::<Vec<_>>()));
    }
    let inputs = inputs.expect("at least one checkpoint");
    let report = EvalReport::from_runs(&runs, &inputs.options())?;
    finish_report(&dir, &report)?;
    Ok(report)
}

/// Scores an existing `{id, hypothesis, reference, modality}` JSONL file.
pub fn score_file(res: &Resolved, path: &Path) -> Result<EvalReport> {
    let cfg = &res.config;
    let (pairs, warnings) = load_eval_jsonl(path)?;
    let inputs = MetricInputs::load(cfg, None)?;
    let mut report = EvalReport::from_runs(&[(0, pairs)], &inputs.options())?;
    report.warnings.extend(warnings);
    let dir = cfg.out.join("eval");
    cfg.write_to(&dir)?;
    finish_report(&dir, &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionOutput {
    pub image: PathBuf,
    pub caption: String,
    pub tokens: Vec<usize>,
    pub score: f64,
    pub finished: bool,
    pub alpha: AlphaExport,
}

/// Captions one PGM/PPM image; writes `caption.json` and `alpha.json` under `out`.
pub fn run_caption(res: &mut Resolved, checkpoint: &Path, image_path: &Path) -> Result<CaptionOutput> {
    let vocab = res.bind_vocab()?;
    let cfg = &res.config;
    let (model, _) = CaptionModel::load_for(checkpoint, &cfg.model)?;
    let img = read_pnm(image_path)?;
    let image = stack_images(&[preprocess_image(&img, cfg.model.encoder.image_size)?])?;
    let g = model.generate(&image, &cfg.decode)?;
    let best = &g.hypotheses[0];
    let tokens = best.content(cfg.decode.eos).to_vec();
    let out = CaptionOutput {
        image: image_path.to_path_buf(),
        caption: detokenize(&tokens, &vocab),
        tokens,
        score: best.score,
        finished: best.finished,
        alpha: AlphaExport {
            alpha: vec![g.alpha],
            grid_height: g.grid_height,
            grid_width: g.grid_width,
        },
    };
    cfg.write_to(&cfg.out)?;
    write_json(&cfg.out.join("caption.json"), &out)?;
    write_json(&cfg.out.join("alpha.json"), &out.alpha)?;
    Ok(out)
}

/// Renders row `index` of an alpha export as a PGM the size of `image_path`,
/// plus an optional PPM overlay.
pub fn export_heatmap(
    alpha_json: &Path,
    image_path: &Path,
    out_path: &Path,
    overlay_path: Option<&Path>,
    index: usize,
) -> Result<()> {
    let text = fs::read_to_string(alpha_json).map_err(|e| io_err(alpha_json, e))?;
    let export: AlphaExport = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: not an alpha export: {e}", alpha_json.display())))?;
    export.validate()?;
    let row = export.alpha.get(index).ok_or_else(|| {
        Error::Contract(format!(
            "alpha row {index} requested, export holds {}",
            export.alpha.len()
        ))
    })?;
    let img = read_pnm(image_path)?;
    let heat = heatmap(row, export.grid_height, export.grid_width, img.width, img.height)?;
    write_pnm(out_path, &heat)?;
    if let Some(p) = overlay_path {
        write_pnm(p, &overlay(&img, &heat)?)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Arm {
    pub mode: RegionalMode,
    pub tokens: usize,
}

impl Arm {
    /// `mode[:K]`, K defaulting to `default_tokens`.
    pub fn parse(s: &str, default_tokens: usize) -> Result<Self> {
        let (mode, k) = match s.split_once(':') {
            Some((m, k)) => (
                m,
                k.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("arm `{s}`: bad token count")))?,
            ),
            None => (s, default_tokens),
        };
        Ok(Self {
            mode: mode.parse()?,
            tokens: k,
        })
    }

    pub fn label(&self) -> String {
        format!("{}-k{}", self.mode, self.tokens)
    }
}

/// Drops repeated arms (with a warning) and requires at least two.
pub fn dedupe_arms(arms: &[Arm]) -> Result<(Vec<Arm>, Vec<String>)> {
    let mut out: Vec<Arm> = Vec::new();
    let mut warnings = Vec::new();
    for a in arms {
        if out.contains(a) {
            warnings.push(format!("duplicate arm {} dropped", a.label()));
        } else {
            out.push(*a);
        }
    }
    if out.len() < 2 {
        return Err(Error::Config(format!(
            "an ablation needs ≥ 2 distinct arms, got {}",
            out.len()
        )));
    }
    Ok((out, warnings))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub label: String,
    pub records: Vec<RunRecord>,
    pub report: EvalReport,
    /// Per seed, in split order.
    #[serde(skip)]
    pub decoded: Vec<(u64, Vec<Decoded>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub mode: RegionalMode,
    pub tokens: usize,
    /// Mean over seeds.
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub split: Split,
    pub arms: Vec<ArmResult>,
    /// Paired tests between every arm pair on seed-averaged per-item scores.
    pub significance: Vec<Significance>,
    pub sweep: Vec<SweepRow>,
    /// Batch-stream hash per seed, shared by every arm.
    pub stream_hashes: BTreeMap<u64, String>,
    pub warnings: Vec<String>,
}

impl AblationReport {
    pub fn arm(&self, mode: RegionalMode) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm.mode == mode)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let names: Vec<&str> = METRICS
            .iter()
            .copied()
            .filter(|m| self.sweep.iter().all(|r| r.metrics.contains_key(*m)))
            .collect();
        let _ = write!(s, "{:<16}", "arm");
        for m in &names {
            let _ = write!(s, " {m:>9}");
        }
        s.push('\n');
        for r in &self.sweep {
            let _ = write!(s, "{:<16}", r.label);
            for m in &names {
                let _ = write!(s, " {:>9.4}", r.metrics[*m]);
            }
            s.push('\n');
        }
        for sig in &self.significance {
            let _ = writeln!(
                s,
                "{} {}: diff {:+.4}, p = {:.4}",
                sig.comparison, sig.metric, sig.test.observed_diff, sig.test.p_value
            );
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }
}

fn seed_mean_scores(metric: &str, arm: &ArmResult, opts: &MetricOptions) -> Result<Vec<f64>> {
    let mut acc: Vec<f64> = Vec::new();
    for (_, decoded) in &arm.decoded {
        let pairs: Vec<EvalPair> = decoded.iter().map(Decoded::pair).collect();
        let scores = per_item(metric, &pairs, opts)?;
        if acc.is_empty() {
            acc = scores;
        } else {
            acc.iter_mut().zip(scores).for_each(|(a, s)| *a += s);
        }
    }
    let n = arm.decoded.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Trains and evaluates each arm on the same data and seeds.
pub fn run_ablation(res: &mut Resolved, arms: &[Arm]) -> Result<AblationReport> {
    let (arms, mut warnings) = dedupe_arms(arms)?;
    let (vocab, ds) = load_data(res)?;
    let cfg = &res.config;
    let arm_cfgs: Vec<RunConfig> = arms
        .iter()
        .map(|a| {
            let mut c = cfg.clone();
            c.model.regional.mode = a.mode;
            c.model.regional.tokens = a.tokens;
            c.model.validate().map(|_| c)
        })
        .collect::<Result<_>>()?;
    let samples = eval_split(cfg, &ds)?;
    cfg.write_to(&cfg.out)?;

    let mut results = Vec::new();
    let mut stream_hashes: BTreeMap<u64, String> = BTreeMap::new();
    let mut inputs = None;
    for (arm, acfg) in arms.iter().zip(&arm_cfgs) {
        let dir = cfg.out.join(arm.label());
        let mut records = Vec::new();
        let mut decoded_runs = Vec::new();
        for &seed in &cfg.train.seeds {
            let seed_dir = dir.join(format!("seed{seed}"));
            let mut model = init_model(acfg, seed)?;
            let mut obs = RunObserver::new(seed_dir.clone(), None);
            let record = train_loop(&mut model, &ds, &acfg.train, seed, &mut obs)?;
            match stream_hashes.get(&seed) {
                Some(h) if *h != record.stream_hash => {
                    return Err(Error::Contract(format!(
                        "arm {} saw a different batch stream for seed {seed}",
                        arm.label()
                    )))
                }
                Some(_) => {}
                None => {
                    stream_hashes.insert(seed, record.stream_hash.clone());
                }
            }
            model.save(&seed_dir.join("best.ckpt"), checkpoint_extra(&record))?;
            let decoded = decode_samples(&model, &samples, &vocab, &acfg.decode)?;
            write_hypotheses(&seed_dir.join("hypotheses.jsonl"), &decoded)?;
            if inputs.is_none() {
                inputs = Some(MetricInputs::load(cfg, Some((&model, &vocab)))?);
            }
            records.push(record);
            decoded_runs.push((seed, decoded));
        }
        let runs: Vec<(u64, Vec<EvalPair>)> = decoded_runs
            .iter()
            .map(|(s, d)| (*s, d.iter().map(Decoded::pair).collect()))
            .collect();
        let inputs = inputs.as_ref().expect("set after the first seed");
        let report = EvalReport::from_runs(&runs, &inputs.options())?;
        finish_report(&dir, &report)?;
        results.push(ArmResult {
            arm: *arm,
            label: arm.label(),
            records,
            report,
            decoded: decoded_runs,
        });
    }

    let inputs = inputs.expect("at least one arm");
    let opts = inputs.options();
    let metrics: Vec<&str> = METRICS
        .iter()
        .copied()
        .filter(|m| *m != "embed_f1" || opts.embeddings.is_some())
        .collect();
    let mut significance = Vec::new();
    if samples.len() < 2 {
        warnings.push("fewer than two evaluation items: no paired tests".into());
    } else {
        for i in 0..results.len() {
            for j in i + 1..results.len() {
                for m in &metrics {
                    let a = seed_mean_scores(m, &results[i], &opts)?;
                    let b = seed_mean_scores(m, &results[j], &opts)?;
                    let mut rng = Rng::new(cfg.train.seeds[0]);
                    significance.push(Significance {
                        comparison: format!("{} vs {}", results[i].label, results[j].label),
                        metric: m.to_string(),
                        test: paired_test(&a, &b, cfg.eval.test, cfg.eval.iters, &mut rng)?,
                    });
                }
            }
        }
    }
    let sweep = results
        .iter()
        .map(|r| SweepRow {
            label: r.label.clone(),
            mode: r.arm.mode,
            tokens: r.arm.tokens,
            metrics: r.report.metrics.iter().map(|(k, a)| (k.clone(), a.mean)).collect(),
        })
        .collect();
    let report = AblationReport {
        seeds: cfg.train.seeds.clone(),
        split: cfg.eval.split,
        arms: results,
        significance,
        sweep,
        stream_hashes,
        warnings,
    };
    write_json(&cfg.out.join("ablation.json"), &report)?;
    write_text(&cfg.out.join("ablation.txt"), &report.to_table())?;
    Ok(report)
}
