//! Teacher-forced training with AdamW, gradient clipping, early stopping and
//! the multi-seed protocol.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::image::AugmentConfig;
use crate::data::manifest::Split;
use crate::data::{make_batch, Batch, Dataset, Sample};
use crate::decoder::EMBEDDING;
use crate::error::{Error, Result};
use crate::model::{caption_loss, CaptionModel};
use crate::nn::{ParamStore, Session};
use crate::stats::Aggregate;
use crate::tensor::{Rng, Tensor};

/// Stream for dropout masks; the data stream is `Rng::new(seed)`.
pub const DROPOUT_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub patience: usize,
    pub seeds: Vec<u64>,
    /// Global-norm clip; `None` disables.
    pub grad_clip: Option<f64>,
    pub augment: AugmentConfig,
}

impl TrainConfig {
    pub fn full() -> Self {
        Self {
            epochs: 5,
            batch_size: 8,
            lr: 1e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            patience: 3,
            seeds: vec![42, 43, 44],
            grad_clip: Some(1.0),
            augment: AugmentConfig::default(),
        }
    }

    /// Random-init models need larger steps than fine-tuning.
    pub fn toy() -> Self {
        Self {
            lr: 1e-3,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("train.epochs and train.batch_size must be ≥ 1".into());
        }
        if self.patience == 0 || self.patience > self.epochs {
            return bad(format!(
                "train.patience must be in 1..=epochs ({}), got {}",
                self.epochs, self.patience
            ));
        }
        if self.seeds.is_empty() {
            return bad("train.seeds must not be empty".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 || self.eps <= 0.0 {
            return bad("train.lr must be > 0, weight_decay ≥ 0, eps > 0".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("train.beta1 and train.beta2 must be in [0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamW {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lr: c.lr,
            weight_decay: c.weight_decay,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One decoupled-decay update of every parameter that has a gradient.
/// Nothing is modified if any gradient is non-finite.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    opt: &AdamW,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::Training {
                param: name.clone(),
                reason: format!("non-finite gradient {} at flat index {i}", g.data()[i]),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * gi;
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *w -= opt.lr * mhat / (vhat.sqrt() + opt.eps) + opt.lr * opt.weight_decay * *w;
        }
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Forward, backward, clip and update on one batch. Returns the batch loss.
pub fn train_step(
    model: &mut CaptionModel,
    batch: &Batch,
    state: &mut AdamState,
    cfg: &TrainConfig,
    dropout_rng: &mut Rng,
    pad_id: usize,
) -> Result<f64> {
    let (loss, mut grads) = {
        let mut sess = Session::train(&model.params, dropout_rng);
        let loss = caption_loss(&mut sess, &model.config, &batch.images, &batch.tokens, pad_id)?;
        sess.backward(loss)?
    };
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("training loss became {loss}")));
    }
    if let Some(c) = cfg.grad_clip {
        clip_grad_norm(&mut grads, c);
    }
    adamw_step(&mut model.params, &grads, state, &AdamW::from(cfg))?;
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

/// Stops after `patience` consecutive epochs without a strict improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub best: f64,
    /// 1-based epoch of the best value; 0 before any observation.
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> StopDecision {
        if value < self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            StopDecision {
                improved: true,
                stop: false,
            }
        } else {
            self.bad_epochs += 1;
            StopDecision {
                improved: false,
                stop: self.bad_epochs >= self.patience,
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    /// Validation loss before the first update.
    pub initial_val_loss: f64,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub best_checkpoint: String,
    pub stopped_early: bool,
    /// SHA-256 over every delivered batch (pixels and token ids).
    pub stream_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub seed: u64,
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
}

/// Hooks for the caller; every method defaults to doing nothing.
pub trait TrainObserver {
    fn log(&mut self, _record: &LogRecord) -> Result<()> {
        Ok(())
    }

    /// Called after validation with the current (not necessarily best) model.
    fn epoch_end(&mut self, _epoch: usize, _model: &CaptionModel, _improved: bool) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;
impl TrainObserver for NoObserver {}

/// Writes each log record as one JSON line.
pub struct JsonlLog<W: Write>(pub W);

impl<W: Write> TrainObserver for JsonlLog<W> {
    fn log(&mut self, record: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(record)?;
        writeln!(self.0, "{line}").map_err(|e| Error::Io {
            path: "<training log>".into(),
            source: e,
        })
    }
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn hash_batch(h: &mut Sha256, batch: &Batch) {
    for b in batch.images.to_bits() {
        h.update(b.to_le_bytes());
    }
    for row in &batch.tokens {
        for &t in row {
            h.update((t as u64).to_le_bytes());
        }
        h.update(u64::MAX.to_le_bytes());
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Token-weighted mean loss over `samples` in eval mode.
pub fn evaluate_loss(
    model: &CaptionModel,
    samples: &[&Sample],
    batch_size: usize,
    image_size: usize,
    pad_id: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate loss on an empty split".into()));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in samples.chunks(batch_size) {
        let batch = make_batch(chunk, image_size, None)?;
        let n: usize = batch
            .tokens
            .iter()
            .map(|r| r[1..].iter().filter(|&&t| t != pad_id).count())
            .sum();
        total += model.eval_loss(&batch.images, &batch.tokens, pad_id)? * n as f64;
        count += n;
    }
    Ok(total / count.max(1) as f64)
}

/// Trains `model` for one seed. On return `model` holds the parameters of
/// the best validation epoch.
pub fn train_loop(
    model: &mut CaptionModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    observer: &mut dyn TrainObserver,
) -> Result<RunRecord> {
    cfg.validate()?;
    let train = dataset.split(Split::Train);
    let val = dataset.split(Split::Val);
    if train.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Data("val split is empty".into()));
    }
    let pad = crate::data::text::PAD_ID;
    let size = model.config.encoder.image_size;
    let mut data_rng = Rng::new(seed);
    let mut dropout_rng = Rng::with_stream(seed, DROPOUT_STREAM);
    let mut state = AdamState::default();
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut hasher = Sha256::new();
    let initial_val_loss = evaluate_loss(model, &val, cfg.batch_size, size, pad)?;
    let mut best_params = model.params.clone();
    let (mut train_losses, mut val_losses) = (Vec::new(), Vec::new());
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let frozen = model.config.decoder.embeddings_frozen_at(epoch - 1);
        model.params.set_frozen(EMBEDDING, frozen);
        let mut order: Vec<usize> = (0..train.len()).collect();
        data_rng.shuffle(&mut order);
        let (mut sum, mut batches) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let items: Vec<&Sample> = idx.iter().map(|&i| train[i]).collect();
            let batch = make_batch(&items, size, Some((&cfg.augment, &mut data_rng)))?;
            hash_batch(&mut hasher, &batch);
            sum += train_step(model, &batch, &mut state, cfg, &mut dropout_rng, pad)?;
            batches += 1;
        }
        let train_loss = sum / batches as f64;
        let val_loss = evaluate_loss(model, &val, cfg.batch_size, size, pad)?;
        train_losses.push(train_loss);
        val_losses.push(val_loss);
        for (split, loss) in [("train", train_loss), ("val", val_loss)] {
            observer.log(&LogRecord {
                epoch,
                split: split.into(),
                loss,
                seed,
                timestamp: now(),
            })?;
        }
        let d = stopper.observe(epoch, val_loss);
        if d.improved {
            best_params = model.params.clone();
        }
        observer.epoch_end(epoch, model, d.improved)?;
        if d.stop && epoch < cfg.epochs {
            stopped_early = true;
            break;
        }
    }
    model.params = best_params;
    Ok(RunRecord {
        seed,
        initial_val_loss,
        train_loss: train_losses,
        val_loss: val_losses,
        best_epoch: stopper.best_epoch,
        best_val_loss: stopper.best,
        best_checkpoint: format!("seed{seed}-epoch{}", stopper.best_epoch),
        stopped_early,
        stream_hash: hex(&hasher.finalize()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRuns {
    pub records: Vec<RunRecord>,
    /// Aggregate of best validation loss over seeds.
    pub best_val_loss: Aggregate,
}

/// Runs `train_loop` once per configured seed with a fresh model each time.
pub fn run_seeds(
    init: &mut dyn FnMut(u64) -> Result<CaptionModel>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(u64) -> Box<dyn TrainObserver>,
) -> Result<(SeedRuns, Vec<CaptionModel>)> {
    cfg.validate()?;
    let mut records = Vec::new();
    let mut models = Vec::new();
    for &seed in &cfg.seeds {
        let mut model = init(seed)?;
        let mut obs = observer(seed);
        records.push(train_loop(&mut model, dataset, cfg, seed, obs.as_mut())?);
        models.push(model);
    }
    let best: Vec<f64> = records.iter().map(|r| r.best_val_loss).collect();
    Ok((
        SeedRuns {
            best_val_loss: Aggregate::from_values(&best)?,
            records,
        },
        models,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::EmbeddingTable;
    use crate::model::ModelConfig;

    fn one(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    fn opt(lr: f64, wd: f64) -> AdamW {
        AdamW {
            lr,
            weight_decay: wd,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    #[test]
    fn first_step_by_hand() {
        let mut p = ParamStore::new();
        p.insert("w", one(1.0));
        let g = BTreeMap::from([("w".to_string(), one(1.0))]);
        adamw_step(&mut p, &g, &mut AdamState::default(), &opt(0.1, 0.01)).unwrap();
        // 1 − 0.1·1/(1 + 1e-8) − 0.1·0.01·1
        let want = 1.0 - 0.1 / (1.0 + 1e-8) - 0.001;
        assert!((p.get("w").unwrap().data()[0] - want).abs() < 1e-15);
        assert!((want - 0.899).abs() < 1e-8);
    }

    #[test]
    fn zero_grad_no_decay_is_fixed_point() {
        let mut p = ParamStore::new();
        p.insert("w", one(0.7));
        let g = BTreeMap::from([("w".to_string(), one(0.0))]);
        let mut s = AdamState::default();
        for _ in 0..5 {
            adamw_step(&mut p, &g, &mut s, &opt(0.1, 0.0)).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data()[0], 0.7);
    }

    #[test]
    fn no_decay_matches_plain_adam_oracle() {
        let mut rng = Rng::new(8);
        let mut p = ParamStore::new();
        let init: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        p.insert("w", Tensor::new(vec![2, 3], init.clone()).unwrap());
        let mut s = AdamState::default();
        let (mut theta, mut m, mut v) = (init, vec![0.0; 6], vec![0.0; 6]);
        let o = opt(0.01, 0.0);
        for t in 1..=10 {
            let g: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let grads = BTreeMap::from([("w".to_string(), Tensor::new(vec![2, 3], g.clone()).unwrap())]);
            adamw_step(&mut p, &grads, &mut s, &o).unwrap();
            for i in 0..6 {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                theta[i] -= 0.01 * mh / (vh.sqrt() + 1e-8);
            }
        }
        let got = p.get("w").unwrap().data();
        for i in 0..6 {
            assert!((got[i] - theta[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = ParamStore::new();
        p.insert("a", one(1.0));
        p.insert("enc.bad", one(1.0));
        let g = BTreeMap::from([("a".to_string(), one(1.0)), ("enc.bad".to_string(), one(f64::NAN))]);
        match adamw_step(&mut p, &g, &mut AdamState::default(), &opt(0.1, 0.0)) {
            Err(Error::Training { param, .. }) => assert_eq!(param, "enc.bad"),
            other => panic!("{other:?}"),
        }
        assert_eq!(p.get("a").unwrap().data()[0], 1.0);
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        let mut g = BTreeMap::from([
            ("a".to_string(), Tensor::new(vec![2], vec![3.0, 0.0]).unwrap()),
            ("b".to_string(), one(4.0)),
        ]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-15);
        assert!((g["b"].data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(clip_grad_norm(&mut g, 10.0), 1.0);
    }

    #[test]
    fn early_stopping_rule_trace() {
        let mut s = EarlyStopper::new(3);
        let trace = [3.0, 2.0, 2.1, 2.2, 2.3];
        let stops: Vec<bool> = trace
            .iter()
            .enumerate()
            .map(|(i, &v)| s.observe(i + 1, v).stop)
            .collect();
        assert_eq!(stops, vec![false, false, false, false, true]);
        assert_eq!((s.best_epoch, s.best), (2, 2.0));

        let mut s = EarlyStopper::new(3);
        assert!((1..=5).all(|e| !s.observe(e, 10.0 - e as f64).stop));
        assert_eq!(s.best_epoch, 5);
    }

    #[test]
    fn config_invariants() {
        TrainConfig::full().validate().unwrap();
        assert_eq!(TrainConfig::toy().lr, 1e-3);
        let mut c = TrainConfig::full();
        c.patience = 6;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::full();
        c.seeds.clear();
        assert!(c.validate().is_err());
    }

    fn tiny_model(seed: u64) -> CaptionModel {
        let mut c = ModelConfig::toy(9);
        c.encoder.image_size = 16;
        c.encoder.stage_dims = vec![8, 16];
        c.encoder.heads_per_stage = vec![2, 2];
        c.encoder.stage_depths = vec![1, 1];
        c.encoder.window_size = 2;
        c.regional.in_dim = 16;
        c.regional.out_dim = 8;
        c.regional.tokens = 3;
        c.decoder.model_dim = 8;
        c.decoder.heads = 2;
        c.decoder.ffn_dim = 16;
        c.decoder.layers = 1;
        c.decoder.max_positions = 16;
        let table = EmbeddingTable::random(9, 8, seed);
        CaptionModel::init(c, &table, seed).unwrap()
    }

    fn batch(n: usize) -> Batch {
        let mut rng = Rng::new(1);
        let one = Tensor::from_fn(&[1, 3, 16, 16], |_| rng.normal());
        let images = Tensor::from_fn(&[n, 3, 16, 16], |i| one.data()[i % one.numel()]);
        Batch {
            images,
            tokens: vec![vec![1, 4, 5, 6, 2, 0]; n],
        }
    }

    #[test]
    fn identical_samples_same_loss_as_one() {
        let m = tiny_model(3);
        let a = m.eval_loss(&batch(1).images, &batch(1).tokens, 0).unwrap();
        let b = m.eval_loss(&batch(4).images, &batch(4).tokens, 0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn single_batch_overfits() {
        let mut m = tiny_model(4);
        let mut cfg = TrainConfig::toy();
        cfg.lr = 3e-3;
        let mut s = AdamState::default();
        let mut rng = Rng::new(0);
        let b = batch(2);
        let losses: Vec<f64> = (0..30)
            .map(|_| train_step(&mut m, &b, &mut s, &cfg, &mut rng, 0).unwrap())
            .collect();
        let ups = losses.windows(2).filter(|w| w[1] >= w[0]).count();
        assert!(ups <= 2, "{losses:?}");
        assert!(losses[29] < losses[0] * 0.5, "{losses:?}");
    }

    #[test]
    fn frozen_embedding_unchanged_by_training() {
        let mut m = tiny_model(5);
        assert!(m.params.is_frozen(EMBEDDING));
        let before = m.params.get(EMBEDDING).unwrap().clone();
        let mut s = AdamState::default();
        train_step(&mut m, &batch(2), &mut s, &TrainConfig::toy(), &mut Rng::new(0), 0).unwrap();
        assert_eq!(m.params.get(EMBEDDING).unwrap(), &before);
        assert!(!s.m.contains_key(EMBEDDING));
    }
}
