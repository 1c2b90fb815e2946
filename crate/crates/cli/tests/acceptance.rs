//! End-to-end acceptance suite. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use regcap_cli::config::{Resolved, RunConfig};
use regcap_cli::pipeline::{self, Arm, Decoded};
use regcap_core::beam::{beam_search, exhaustive_decode, greedy_decode, has_repeated_ngram, DecodeConfig, TableModel};
use regcap_core::data::manifest::{parse_manifest, ManifestEntry, Modality, Split};
use regcap_core::data::split::{assign_splits, audit_splits, SplitRatios};
use regcap_core::data::synth::{shape_in_caption, write_corpus, SynthConfig};
use regcap_core::data::{load_dataset, make_batch, DataConfig};
use regcap_core::decoder::EmbeddingTable;
use regcap_core::encoder::FeatureGrid;
use regcap_core::metrics::{
    bleu, embed_score, lcs_len, normalize, paired_test, rouge_l, rouge_l_pair, EvalPair, TestMethod, WordEmbeddings,
};
use regcap_core::model::{caption_loss, forward_memory, CaptionModel, ModelConfig};
use regcap_core::nn::{ParamStore, Session};
use regcap_core::regional::{self, attend, pool_bins, pool_matrix, region_scores, RegionalConfig, RegionalMode};
use regcap_core::stats::Aggregate;
use regcap_core::trainer::{train_step, AdamState, EarlyStopper, TrainConfig};
use regcap_core::{Error, Rng, Tape, Tensor};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        // `!(x < tol)` is deliberate: a NaN must fail the check.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        let failed = !$cond;
        if failed {
            return Err(format!($($msg)+));
        }
    };
}

fn run(id: usize, title: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let elapsed = t0.elapsed();
    let outcome = match (outcome, budget) {
        (Ok(_), Some(b)) if elapsed > b => Err(format!("took {elapsed:.1?}, budget {b:?}")),
        (o, _) => o,
    };
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    // Straight to the handle: libtest captures print! but these lines belong in every run's output.
    let _ = writeln!(
        std::io::stderr().lock(),
        "criterion {id:>2} {tag}: {title} [{elapsed:.1?}] {detail}"
    );
    outcome.is_ok()
}

fn resolved(pairs: &[(&str, String)]) -> Resolved {
    let a: Vec<(String, String)> = pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    RunConfig::resolve(&a).expect("valid config")
}

fn corpus(dir: &Path, train: usize, val: usize, test: usize) -> (PathBuf, PathBuf) {
    let sc = SynthConfig {
        train,
        val,
        test,
        ..Default::default()
    };
    let p = write_corpus(dir, &sc).expect("synthetic corpus");
    (p.manifest, p.vocab)
}

fn data_keys(manifest: &Path, vocab: &Path, out: &Path) -> Vec<(&'static str, String)> {
    vec![
        ("data.manifest", manifest.display().to_string()),
        ("data.vocab", vocab.display().to_string()),
        ("out", out.display().to_string()),
    ]
}

fn gradient_check() -> Outcome {
    let vocab = 12;
    let mut cfg = ModelConfig::toy(vocab);
    cfg.regional.dropout = 0.0;
    let table = EmbeddingTable::random(vocab, cfg.decoder.model_dim, 7);
    let model = CaptionModel::init(cfg.clone(), &table, 7).map_err(|e| e.to_string())?;
    let mut rng = Rng::new(11);
    let images = Tensor::from_fn(&[2, 3, 32, 32], |_| rng.normal());
    let tokens = vec![vec![1, 4, 5, 6, 7, 2], vec![1, 8, 9, 10, 2, 0]];
    let loss = |p: &ParamStore| -> f64 {
        let mut s = Session::eval(p);
        let l = caption_loss(&mut s, &cfg, &images, &tokens, 0).unwrap();
        s.tape.value(l).item().unwrap()
    };
    let grads = {
        let mut s = Session::eval(&model.params);
        let l = caption_loss(&mut s, &cfg, &images, &tokens, 0).unwrap();
        s.backward(l).unwrap().1
    };
    let stages: BTreeSet<&str> = grads.keys().map(|k| k.split('.').next().unwrap_or("")).collect();
    ensure!(
        stages.is_superset(&["enc", "reg", "dec"].into()),
        "gradients missing a stage: {stages:?}"
    );

    // Random (tensor, index) draws, keeping entries whose gradient is large
    // enough for a relative comparison to be meaningful.
    let names: Vec<&String> = grads.keys().collect();
    let mut picked = Vec::new();
    let mut draws = 0;
    while picked.len() < 24 && draws < 10_000 {
        draws += 1;
        let name = names[rng.below(names.len())];
        let g = &grads[name];
        let i = rng.below(g.numel());
        if g.data()[i].abs() > 1e-5 && !picked.contains(&(name, i)) {
            picked.push((name, i));
        }
    }
    ensure!(picked.len() >= 20, "only {} usable parameters", picked.len());
    let h = 1e-5;
    let mut worst = 0.0f64;
    for &(name, i) in &picked {
        let mut p = model.params.clone();
        p.get_mut(name).unwrap().data_mut()[i] += h;
        let up = loss(&p);
        p.get_mut(name).unwrap().data_mut()[i] -= 2.0 * h;
        let down = loss(&p);
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[name].data()[i];
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs());
        ensure!(
            rel < 1e-4,
            "{name}[{i}]: analytic {analytic:e}, numeric {numeric:e}, rel {rel:e}"
        );
        worst = worst.max(rel);
    }
    let touched: BTreeSet<&str> = picked.iter().map(|(n, _)| n.split('.').next().unwrap_or("")).collect();
    Ok(format!(
        "{} params over {:?}, worst rel err {worst:.1e}",
        picked.len(),
        touched
    ))
}

fn full_scale_shapes() -> Outcome {
    let cfg = ModelConfig::full(16);
    let table = EmbeddingTable::random(16, cfg.decoder.model_dim, 1);
    let model = CaptionModel::init(cfg.clone(), &table, 1).map_err(|e| e.to_string())?;
    let mut rng = Rng::new(3);
    let b = 1;
    let images = Tensor::from_fn(&[b, 3, 224, 224], |_| rng.normal());
    let mut s = Session::eval(&model.params);
    let x = s.tape.constant(images);
    let out = forward_memory(&mut s, &cfg, x).map_err(|e| e.to_string())?;
    let shapes = [
        s.tape.shape(out.grid.values).to_vec(),
        s.tape.shape(out.regional.alpha).to_vec(),
        s.tape.shape(out.regional.pooled).to_vec(),
    ];
    ensure!(shapes[0] == [b, 49, 1024], "F_flat {:?}", shapes[0]);
    ensure!(shapes[1] == [b, 49], "alpha {:?}", shapes[1]);
    ensure!(shapes[2] == [b, 29, 768], "F_enc {:?}", shapes[2]);
    Ok(format!(
        "{b}x3x224x224 -> {:?} -> {:?} -> {:?}",
        shapes[0], shapes[1], shapes[2]
    ))
}

fn regional_invariants() -> Outcome {
    let mut rng = Rng::new(5);
    let mut worst_sum = 0.0f64;
    let mut worst_collapse = 0.0f64;
    for case in 0..1000 {
        let (h, w, c) = (1 + rng.below(7), 1 + rng.below(7), 1 + rng.below(6));
        let n = h * w;
        let mut store = ParamStore::new();
        let rc = RegionalConfig {
            in_dim: c,
            out_dim: 2,
            tokens: 1,
            ..RegionalConfig::toy()
        };
        regional::init_params(&rc, &mut rng, &mut store);
        let spread = 10f64.powi(rng.below(4) as i32 - 1);
        let f = Tensor::from_fn(&[1, n, c], |_| rng.normal() * spread);
        let mut s = Session::eval(&store);
        let v = s.tape.constant(f.clone());
        let grid = FeatureGrid::new(&s.tape, v, h, w).map_err(|e| e.to_string())?;
        let alpha = region_scores(&mut s, &grid).map_err(|e| e.to_string())?;
        let a = s.tape.value(alpha).data().to_vec();
        let total: f64 = a.iter().sum();
        worst_sum = worst_sum.max((total - 1.0).abs());
        ensure!((total - 1.0).abs() <= 1e-12, "case {case}: sum alpha = {total}");

        let uniform = s.tape.constant(Tensor::full(&[1, n], 1.0 / n as f64));
        let same = attend(&mut s.tape, &grid, uniform, RegionalMode::Reweight).map_err(|e| e.to_string())?;
        ensure!(
            s.tape.value(same).to_bits() == f.to_bits(),
            "case {case}: uniform reweight is not the identity (N={n})"
        );

        let collapsed = attend(&mut s.tape, &grid, alpha, RegionalMode::Collapse).map_err(|e| e.to_string())?;
        let out = s.tape.value(collapsed);
        for ch in 0..c {
            let brute: f64 = (0..n).map(|i| a[i] * f.at(&[0, i, ch])).sum();
            for pos in 0..n {
                let d = (out.at(&[0, pos, ch]) - brute).abs();
                worst_collapse = worst_collapse.max(d);
                ensure!(d <= 1e-12 * brute.abs().max(1.0), "case {case}: collapse off by {d:e}");
            }
        }
    }
    Ok(format!(
        "1000 inputs, max |sum-1| {worst_sum:.1e}, max collapse err {worst_collapse:.1e}"
    ))
}

fn adaptive_pooling() -> Outcome {
    let (n, k) = (49, 29);
    let bins = pool_bins(n, k).map_err(|e| e.to_string())?;
    let oracle: Vec<(usize, usize)> = (0..k)
        .map(|i| {
            let lo = ((i * n) as f64 / k as f64).floor() as usize;
            let hi = (((i + 1) * n) as f64 / k as f64).ceil() as usize;
            (lo, hi)
        })
        .collect();
    let got: Vec<(usize, usize)> = bins.iter().map(|r| (r.start, r.end)).collect();
    ensure!(got == oracle, "bins {got:?} != {oracle:?}");
    ensure!(bins.iter().all(|r| !r.is_empty()), "empty bin");

    let mut rng = Rng::new(9);
    let x = Tensor::from_fn(&[2, n, 5], |_| rng.normal());
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let same = regional::adaptive_pool(&mut tape, xv, n).map_err(|e| e.to_string())?;
    ensure!(tape.value(same).to_bits() == x.to_bits(), "K=N is not the identity");

    // Each output is exactly the mean of its bin, so bin-size-weighted sums
    // of the outputs conserve the per-bin input totals.
    let pooled = regional::adaptive_pool(&mut tape, xv, k).map_err(|e| e.to_string())?;
    let y = tape.value(pooled);
    for b in 0..2 {
        for (i, r) in bins.iter().enumerate() {
            for d in 0..5 {
                let mean: f64 = r.clone().map(|j| x.at(&[b, j, d])).sum::<f64>() / r.len() as f64;
                ensure!((y.at(&[b, i, d]) - mean).abs() <= 1e-12, "bin {i} mean mismatch");
            }
        }
    }
    let m = pool_matrix(n, k).map_err(|e| e.to_string())?;
    for (i, r) in bins.iter().enumerate() {
        let row = &m.data()[i * n..(i + 1) * n];
        let weight: f64 = row.iter().sum();
        ensure!((weight - 1.0).abs() <= 1e-15, "row {i} weights sum to {weight}");
        ensure!(
            row.iter().enumerate().all(|(j, &v)| (v != 0.0) == r.contains(&j)),
            "row {i} support"
        );
    }
    Ok(format!("{k} bins match the floor/ceil oracle, K=N bit-identical"))
}

fn beam_oracle() -> Outcome {
    let mut rng = Rng::new(21);
    let mut models = 0;
    for case in 0..120u64 {
        let proposable = 2 + rng.below(3);
        let t = 1 + rng.below(4);
        let lp = [0.0, 1.0, 1.1][rng.below(3)];
        let nrn = rng.below(4);
        let m = TableModel {
            vocab: proposable + 2,
            seed: case * 7919 + 3,
            disabled: vec![],
        };
        let cfg = |beam| DecodeConfig {
            beam_size: beam,
            length_penalty: lp,
            no_repeat_ngram: nrn,
            max_length: t.max(2),
            ..DecodeConfig::default()
        };
        let covering = proposable.pow(t.max(2) as u32);
        let beam = beam_search(&m, &cfg(covering)).map_err(|e| e.to_string())?;
        let ex = exhaustive_decode(&m, &cfg(covering)).map_err(|e| e.to_string())?;
        ensure!(
            beam[0].tokens == ex.tokens,
            "case {case}: beam {:?} vs exhaustive {:?}",
            beam[0].tokens,
            ex.tokens
        );
        ensure!((beam[0].score - ex.score).abs() < 1e-12, "case {case}: score mismatch");
        if nrn > 0 {
            ensure!(
                beam.iter().all(|h| !has_repeated_ngram(&h.tokens, nrn)),
                "case {case}: repeated {nrn}-gram"
            );
        }
        // Longer outputs under the default trigram block must pass the scan.
        let long = DecodeConfig {
            no_repeat_ngram: 3,
            max_length: t + 4,
            ..cfg(3)
        };
        for h in beam_search(&m, &long).map_err(|e| e.to_string())? {
            ensure!(
                !has_repeated_ngram(&h.tokens, 3),
                "case {case}: repeated trigram in {:?}",
                h.tokens
            );
        }
        let one = beam_search(&m, &cfg(1)).map_err(|e| e.to_string())?;
        let greedy = greedy_decode(&m, &cfg(1)).map_err(|e| e.to_string())?;
        ensure!(
            one[0].tokens == greedy.tokens,
            "case {case}: beam=1 {:?} vs greedy {:?}",
            one[0].tokens,
            greedy.tokens
        );
        models += 1;
    }
    Ok(format!("{models} random table models"))
}

fn training_protocol(root: &Path) -> Outcome {
    let bin = env!("CARGO_BIN_EXE_regcap");
    let data = root.join("data");
    let (manifest, vocab) = corpus(&data, 40, 10, 10);
    let train = |out: &Path| -> Result<(), String> {
        let status = Command::new(bin)
            .args(["train", "--seed", "42", "--out"])
            .arg(out)
            .arg("--set")
            .arg(format!("data.manifest={}", manifest.display()))
            .arg("--set")
            .arg(format!("data.vocab={}", vocab.display()))
            .args(["--set", "train.epochs=2", "--set", "train.patience=2"])
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(String::from_utf8_lossy(&status.stderr).into_owned());
        }
        Ok(())
    };
    let (a, b) = (root.join("run_a"), root.join("run_b"));
    train(&a)?;
    train(&b)?;
    for file in ["seed42/best.ckpt", "aggregate.json"] {
        let x = fs::read(a.join(file)).map_err(|e| e.to_string())?;
        let y = fs::read(b.join(file)).map_err(|e| e.to_string())?;
        ensure!(x == y, "{file} differs between processes");
    }

    let ds = load_dataset(&DataConfig {
        manifest: manifest.clone(),
        vocab: vocab.clone(),
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let mut cfg = ModelConfig::toy(ds.vocab.len());
    cfg.regional.dropout = 0.0;
    let table = EmbeddingTable::random(ds.vocab.len(), cfg.decoder.model_dim, 42);
    let mut model = CaptionModel::init(cfg, &table, 42).map_err(|e| e.to_string())?;
    let train_split = ds.split(Split::Train);
    let batch = make_batch(&train_split[..4], 32, None).map_err(|e| e.to_string())?;
    let tc = TrainConfig::toy();
    let mut state = AdamState::default();
    let mut rng = Rng::new(0);
    let losses: Vec<f64> = (0..50)
        .map(|_| train_step(&mut model, &batch, &mut state, &tc, &mut rng, 0))
        .collect::<Result<_, Error>>()
        .map_err(|e| e.to_string())?;
    let upticks = losses.windows(2).filter(|w| w[1] >= w[0]).count();
    ensure!(upticks <= 2, "{upticks} non-decreasing steps: {losses:?}");
    ensure!(
        losses[49] < losses[0] * 0.5,
        "loss only {:.3} -> {:.3}",
        losses[0],
        losses[49]
    );

    let trace = [2.0, 1.6, 1.4, 1.45, 1.3, 1.35, 1.5, 1.6, 1.2];
    let mut stopper = EarlyStopper::new(3);
    let stopped_at = trace
        .iter()
        .enumerate()
        .find_map(|(i, &v)| stopper.observe(i + 1, v).stop.then_some(i + 1));
    ensure!(stopped_at == Some(8), "stopped at {stopped_at:?}");
    ensure!(
        stopper.best_epoch == 5 && stopper.best == 1.3,
        "selected epoch {} ({})",
        stopper.best_epoch,
        stopper.best
    );

    let agg = Aggregate::from_values(&[1.0, 2.0, 3.0]).map_err(|e| e.to_string())?;
    let half = agg.ci_half_width.unwrap_or(f64::NAN);
    ensure!((half - 2.484).abs() < 1e-3, "CI half-width {half}");
    Ok(format!(
        "two processes byte-identical; overfit {:.3} -> {:.3} with {upticks} upticks; stop epoch 8 keeps epoch 5; CI ±{half:.4}",
        losses[0], losses[49]
    ))
}

fn metric_fixtures() -> Outcome {
    let texts = [
        "a mass in the left lobe",
        "no acute findings",
        "small cyst near the kidney",
    ];
    let same: Vec<EvalPair> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| EvalPair::new(i.to_string(), t, t, Modality::Ct))
        .collect();
    let mut emb = WordEmbeddings::new(4);
    let mut rng = Rng::new(2);
    for t in &texts {
        for w in normalize(t) {
            if emb.get(&w).is_none() {
                emb.insert(w, (0..4).map(|_| rng.normal()).collect())
                    .map_err(|e| e.to_string())?;
            }
        }
    }
    let b = bleu(&same, 4).map_err(|e| e.to_string())?.score;
    let r = rouge_l(&same).map_err(|e| e.to_string())?;
    let e = embed_score(&same, &emb).map_err(|e| e.to_string())?.f1;
    ensure!(
        b == 1.0 && r == 1.0 && (e - 1.0).abs() < 1e-12,
        "identity scores bleu {b} rouge {r} embed {e}"
    );

    let f = rouge_l_pair(&normalize("a b c d"), &normalize("a c b d"));
    ensure!((f - 0.75).abs() < 1e-9, "ROUGE-L fixture {f}");
    let d = bleu(
        &[EvalPair::new("x", "the cat sat", "the cat sat down", Modality::Ct)],
        4,
    )
    .map_err(|e| e.to_string())?;
    let bp = (1.0f64 - 4.0 / 3.0).exp();
    ensure!(
        (d.brevity_penalty - bp).abs() < 1e-9 && (d.score - bp).abs() < 1e-9,
        "BLEU fixture {} vs {bp}",
        d.score
    );

    let dp = |a: &[String], b: &[String]| {
        let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                t[i][j] = if a[i - 1] == b[j - 1] {
                    t[i - 1][j - 1] + 1
                } else {
                    t[i - 1][j].max(t[i][j - 1])
                };
            }
        }
        t[a.len()][b.len()]
    };
    let words = |rng: &mut Rng| -> Vec<String> {
        (0..rng.below(9))
            .map(|_| ["a", "b", "c", "d"][rng.below(4)].to_string())
            .collect()
    };
    for case in 0..1000 {
        let (x, y) = (words(&mut rng), words(&mut rng));
        let l = dp(&x, &y);
        ensure!(lcs_len(&x, &y) == l, "case {case}: lcs of {x:?} / {y:?}");
        let expect = if l == 0 {
            0.0
        } else {
            let (p, r) = (l as f64 / x.len() as f64, l as f64 / y.len() as f64);
            2.0 * p * r / (p + r)
        };
        let got = rouge_l_pair(&x, &y);
        ensure!(
            (got - expect).abs() < 1e-12,
            "case {case}: rouge {got} vs oracle {expect} for {x:?} / {y:?}"
        );
    }

    let a: Vec<f64> = (0..40).map(|_| rng.uniform()).collect();
    let identical = paired_test(&a, &a, TestMethod::Randomization, 10_000, &mut rng).map_err(|e| e.to_string())?;
    let shifted: Vec<f64> = a.iter().map(|x| x + 0.3 + 0.05 * rng.normal()).collect();
    let apart = paired_test(&shifted, &a, TestMethod::Randomization, 10_000, &mut rng).map_err(|e| e.to_string())?;
    ensure!(identical.p_value == 1.0, "identical arms p = {}", identical.p_value);
    ensure!(apart.p_value < 0.001, "shifted arms p = {}", apart.p_value);
    Ok(format!(
        "1000 LCS cases; p = {} (identical), {} (shifted)",
        identical.p_value, apart.p_value
    ))
}

fn leakage_audit() -> Outcome {
    let mut rng = Rng::new(8);
    let mut entries = Vec::new();
    for a in 0..1000 {
        for i in 0..1 + rng.below(3) {
            entries.push(ManifestEntry {
                image_path: format!("img/{a}_{i}.pgm").into(),
                caption: "finding".into(),
                article_id: format!("PMC{a:05}"),
                modality: Modality::ALL[rng.below(3)],
                split: None,
            });
        }
    }
    let audit = assign_splits(&mut entries, &SplitRatios::default(), 42).map_err(|e| e.to_string())?;
    let mut seen: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
    for e in &entries {
        seen.entry(&e.article_id)
            .or_default()
            .insert(e.split.expect("assigned"));
    }
    ensure!(seen.len() == 1000, "{} articles", seen.len());
    ensure!(seen.values().all(|s| s.len() == 1), "an article spans splits");
    ensure!(audit.violations.is_empty(), "violations {:?}", audit.violations);

    // Move one image of a multi-image article into another split.
    let victim = entries
        .windows(2)
        .position(|w| w[0].article_id == w[1].article_id)
        .ok_or("no multi-image article")?;
    let name = entries[victim].article_id.clone();
    let other = if entries[victim].split == Some(Split::Test) {
        Split::Train
    } else {
        Split::Test
    };
    entries[victim + 1].split = Some(other);
    let err = audit_splits(&entries).err().ok_or("leaky manifest passed the audit")?;
    ensure!(
        matches!(err, Error::Leakage { ref article, .. } if *article == name),
        "wrong error: {err}"
    );
    ensure!(err.to_string().contains(&name), "message does not name {name}: {err}");

    let text: String = entries
        .iter()
        .map(|e| serde_json::to_string(e).unwrap() + "\n")
        .collect();
    let (mut parsed, rejected) = parse_manifest(&text);
    ensure!(rejected.is_empty(), "{} lines rejected", rejected.len());
    let again = assign_splits(&mut parsed, &SplitRatios::default(), 42)
        .err()
        .ok_or("pre-assigned leak accepted")?;
    ensure!(
        again.to_string().contains(&name),
        "assignment error does not name {name}: {again}"
    );
    Ok(format!(
        "{} images, {:?} articles per split; leak reported as `{err}`",
        entries.len(),
        audit.articles.values().collect::<Vec<_>>()
    ))
}

fn shape_accuracy(decoded: &[Decoded]) -> (usize, usize) {
    let hits = decoded
        .iter()
        .filter(|d| {
            shape_in_caption(&d.hypothesis).is_some()
                && shape_in_caption(&d.hypothesis) == shape_in_caption(&d.reference)
        })
        .count();
    (hits, decoded.len())
}

fn end_to_end(root: &Path) -> Outcome {
    let (manifest, vocab) = corpus(&root.join("data"), 200, 50, 50);
    let mut keys: Vec<(String, String)> = data_keys(&manifest, &vocab, &root.join("ablate"))
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    keys.extend(
        [
            ("train.seeds", "[42]"),
            ("train.epochs", "20"),
            ("train.patience", "20"),
            ("eval.iters", "2000"),
        ]
        .map(|(k, v)| (k.to_string(), v.to_string())),
    );
    for key in ["p_flip", "p_rotate", "p_brightness", "p_contrast", "p_noise"] {
        keys.push((format!("train.augment.{key}"), "0".to_string()));
    }
    let mut res = RunConfig::resolve(&keys).map_err(|e| e.to_string())?;
    let arms = [
        Arm::parse("reweight:8", 8).map_err(|e| e.to_string())?,
        Arm::parse("off:8", 8).map_err(|e| e.to_string())?,
    ];
    let report = pipeline::run_ablation(&mut res, &arms).map_err(|e| e.to_string())?;
    let reweight = report.arm(RegionalMode::Reweight).ok_or("missing reweight arm")?;
    let off = report.arm(RegionalMode::Off).ok_or("missing off arm")?;
    let (hits, n) = shape_accuracy(&reweight.decoded[0].1);
    let (off_hits, _) = shape_accuracy(&off.decoded[0].1);
    let (r_rw, r_off) = (
        reweight.report.metrics["rouge_l"].mean,
        off.report.metrics["rouge_l"].mean,
    );
    ensure!(n == 50, "{n} test items");
    ensure!(hits * 10 >= n * 9, "shape accuracy {hits}/{n}");
    ensure!(r_rw > r_off, "ROUGE-L reweight {r_rw:.5} <= off {r_off:.5}");
    Ok(format!(
        "shape acc {hits}/{n} (off arm {off_hits}/{n}); ROUGE-L reweight {r_rw:.5} > off {r_off:.5}"
    ))
}

fn decoding_defaults(root: &Path) -> Outcome {
    let d = DecodeConfig::default();
    ensure!(
        (d.beam_size, d.length_penalty, d.no_repeat_ngram, d.max_length) == (4, 1.1, 3, 128),
        "library defaults {d:?}"
    );
    let manifest = root.join("data/manifest.jsonl");
    let vocab = root.join("data/vocab.txt");
    let run = root.join("run_a");
    let mut res = resolved(&data_keys(&manifest, &vocab, &run));
    ensure!(res.config.decode == d, "resolved decode {:?}", res.config.decode);
    let report = pipeline::run_eval(&mut res, &[]).map_err(|e| e.to_string())?;
    ensure!(report.seeds == [42], "evaluated seeds {:?}", report.seeds);

    let written = fs::read_to_string(run.join("eval/config.resolved")).map_err(|e| e.to_string())?;
    for line in [
        "decode.beam_size=4",
        "decode.length_penalty=1.1",
        "decode.no_repeat_ngram=3",
        "decode.max_length=128",
    ] {
        ensure!(written.lines().any(|l| l == line), "config.resolved lacks `{line}`");
    }

    // The hypotheses on disk are what an explicit default decode produces.
    let (model, _) = CaptionModel::load(&run.join("seed42/best.ckpt")).map_err(|e| e.to_string())?;
    let ds = load_dataset(&res.config.data).map_err(|e| e.to_string())?;
    let test = ds.split(Split::Test);
    let expect = pipeline::decode_samples(&model, &test, &ds.vocab, &d).map_err(|e| e.to_string())?;
    let on_disk = fs::read_to_string(run.join("eval/hypotheses_seed42.jsonl")).map_err(|e| e.to_string())?;
    let got: Vec<String> = on_disk
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["hypothesis"]
                .as_str()
                .unwrap_or("")
                .to_string()
        })
        .collect();
    let want: Vec<String> = expect.iter().map(|x| x.hypothesis.clone()).collect();
    ensure!(got == want, "run_eval hypotheses differ from a default beam decode");
    Ok(format!(
        "beam 4, lp 1.1, no-repeat 3, max 128 used and recorded ({} items)",
        got.len()
    ))
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let root = tmp.path();
    let secs = Duration::from_secs;
    let results = [
        run(
            1,
            "gradient check on the full toy model",
            Some(secs(60)),
            gradient_check,
        ),
        run(2, "full-scale shapes", Some(secs(30)), full_scale_shapes),
        run(3, "regional attention invariants", None, regional_invariants),
        run(4, "adaptive pooling oracle", None, adaptive_pooling),
        run(5, "beam search oracle equivalence", None, beam_oracle),
        run(6, "training protocol", None, || training_protocol(root)),
        run(7, "metric fixtures", None, metric_fixtures),
        run(8, "article-level leakage audit", None, leakage_audit),
        run(9, "end-to-end synthetic task and ablation", Some(secs(600)), || {
            end_to_end(&root.join("e2e"))
        }),
        run(10, "decoding config conformance", None, || decoding_defaults(root)),
    ];
    let failed: Vec<usize> = results
        .iter()
        .enumerate()
        .filter(|(_, ok)| !**ok)
        .map(|(i, _)| i + 1)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
