//! Regional attention: a learned score per encoder region, softmax over
//! regions, region weighting, projection to the decoder width and adaptive
//! average pooling to a fixed number of tokens.
//!
//! `α = softmax(F·W_aᵀ + b_a)` over the N regions of each image. Two ways of
//! applying α are provided:
//!
//! * [`RegionalMode::Reweight`] scales region i by `N·α_i`, keeping the
//!   sequence. Uniform α is exactly the identity.
//! * [`RegionalMode::Collapse`] forms the single vector `Σ_i α_i F_i` and
//!   broadcasts it to all N positions.
//!
//! [`RegionalMode::Off`] bypasses scoring entirely (ablation arm).

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::FeatureGrid;
use crate::error::{Error, Result};
use crate::nn::{linear_init_std, ParamStore, Session};
use crate::tensor::{Rng, Tape, Tensor, Var};

pub const ALPHA_SUM_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionalMode {
    Reweight,
    Collapse,
    Off,
}

impl fmt::Display for RegionalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegionalMode::Reweight => "reweight",
            RegionalMode::Collapse => "collapse",
            RegionalMode::Off => "off",
        })
    }
}

impl FromStr for RegionalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "reweight" | "on" => Ok(RegionalMode::Reweight),
            "collapse" => Ok(RegionalMode::Collapse),
            "off" | "bypass" => Ok(RegionalMode::Off),
            other => Err(Error::Config(format!(
                "unknown regional mode `{other}` (expected reweight|collapse|off)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionalConfig {
    pub mode: RegionalMode,
    /// Pooled token count K.
    pub tokens: usize,
    pub dropout: f64,
    /// Encoder channels C.
    pub in_dim: usize,
    /// Decoder width D.
    pub out_dim: usize,
}

impl RegionalConfig {
    pub fn toy() -> Self {
        Self {
            mode: RegionalMode::Reweight,
            tokens: 8,
            dropout: 0.1,
            in_dim: 64,
            out_dim: 32,
        }
    }

    /// C=1024, D=768, K=29.
    pub fn full() -> Self {
        Self {
            mode: RegionalMode::Reweight,
            tokens: 29,
            dropout: 0.1,
            in_dim: 1024,
            out_dim: 768,
        }
    }

    pub fn validate(&self, regions: usize) -> Result<()> {
        if self.tokens == 0 || self.tokens > regions {
            return Err(Error::Config(format!(
                "pooled token count {} must be in 1..={regions}",
                self.tokens
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "projection dropout {} not in [0,1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

pub fn init_params(cfg: &RegionalConfig, rng: &mut Rng, store: &mut ParamStore) {
    let c = cfg.in_dim;
    store.insert(
        "reg.score.w",
        Tensor::from_fn(&[1, c], |_| rng.truncated_normal(linear_init_std(c))),
    );
    store.insert("reg.score.b", Tensor::zeros(&[1]));
    store.insert(
        "reg.proj.w",
        Tensor::from_fn(&[cfg.out_dim, c], |_| rng.truncated_normal(linear_init_std(c))),
    );
}

/// `[B, N]` region weights, each row a softmax over regions.
pub fn region_scores(sess: &mut Session, grid: &FeatureGrid) -> Result<Var> {
    let w = sess.param("reg.score.w")?;
    let b = sess.param("reg.score.b")?;
    let c = sess.tape.shape(w)[1];
    if grid.channels != c {
        return Err(Error::Shape(format!(
            "region scorer expects {c} channels, grid has {}",
            grid.channels
        )));
    }
    let t = &mut sess.tape;
    let wt = t.transpose(w)?;
    let logits = t.matmul(grid.values, wt)?;
    let logits = t.add(logits, b)?;
    let logits = t.reshape(logits, &[grid.batch, grid.num_regions()])?;
    t.softmax(logits, 1)
}

/// Applies region weights `alpha: [B, N]` to the grid.
pub fn attend(tape: &mut Tape, grid: &FeatureGrid, alpha: Var, mode: RegionalMode) -> Result<Var> {
    let (b, n) = (grid.batch, grid.num_regions());
    if tape.shape(alpha) != [b, n] {
        return Err(Error::Shape(format!(
            "alpha {:?} does not match grid [{b}, {n}]",
            tape.shape(alpha)
        )));
    }
    for (row, chunk) in tape.value(alpha).data().chunks(n).enumerate() {
        let s: f64 = chunk.iter().sum();
        if (s - 1.0).abs() > ALPHA_SUM_TOLERANCE || chunk.iter().any(|&a| a < 0.0) {
            return Err(Error::Contract(format!(
                "alpha row {row} is not a distribution (sum {s})"
            )));
        }
    }
    match mode {
        RegionalMode::Off => Ok(grid.values),
        RegionalMode::Reweight => {
            let a = tape.reshape(alpha, &[b, n, 1])?;
            // Dividing by the uniform weight keeps uniform α an exact identity
            // for every N; multiplying by N does not (fl(1/49)·49 < 1).
            let a = tape.div_scalar(a, 1.0 / n as f64);
            tape.mul(grid.values, a)
        }
        RegionalMode::Collapse => {
            let a = tape.reshape(alpha, &[b, 1, n])?;
            let summary = tape.matmul(a, grid.values)?;
            let ones = tape.constant(Tensor::ones(&[n, 1]));
            tape.mul(summary, ones)
        }
    }
}

/// `F·W_pᵀ` with `W_p: [D, C]`, then projection dropout (training only).
pub fn project(sess: &mut Session, attended: Var, dropout: f64) -> Result<Var> {
    let wp = sess.param("reg.proj.w")?;
    let (c_in, c_w) = (*sess.tape.shape(attended).last().unwrap_or(&0), sess.tape.shape(wp)[1]);
    if c_in != c_w {
        return Err(Error::Shape(format!("projection expects {c_w} channels, got {c_in}")));
    }
    let wt = sess.tape.transpose(wp)?;
    let y = sess.tape.matmul(attended, wt)?;
    sess.dropout(y, dropout)
}

/// Input index range averaged into each of the `k` output tokens:
/// `[floor(i·n/k), ceil((i+1)·n/k))`.
pub fn pool_bins(n: usize, k: usize) -> Result<Vec<Range<usize>>> {
    if k == 0 || k > n {
        return Err(Error::Config(format!("cannot pool {n} tokens into {k}")));
    }
    Ok((0..k).map(|i| (i * n) / k..((i + 1) * n).div_ceil(k)).collect())
}

/// `[K, N]` averaging matrix for [`adaptive_pool`].
pub fn pool_matrix(n: usize, k: usize) -> Result<Tensor> {
    let bins = pool_bins(n, k)?;
    let mut m = Tensor::zeros(&[k, n]);
    for (row, bin) in bins.iter().enumerate() {
        let w = 1.0 / bin.len() as f64;
        for i in bin.clone() {
            m.data_mut()[row * n + i] = w;
        }
    }
    Ok(m)
}

/// Adaptive average pooling over the sequence axis: `[B, N, D]` to `[B, K, D]`.
pub fn adaptive_pool(tape: &mut Tape, seq: Var, k: usize) -> Result<Var> {
    let shape = tape.shape(seq).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("pooling expects [B, N, D], got {:?}", shape)));
    }
    let p = tape.constant(pool_matrix(shape[1], k)?);
    tape.matmul(p, seq)
}

#[derive(Clone, Copy, Debug)]
pub struct RegionalAttentionOutput {
    /// `[B, N]`
    pub alpha: Var,
    /// `[B, N, C]`
    pub attended: Var,
    /// `[B, N, D]`
    pub projected: Var,
    /// `[B, K, D]`, the decoder memory.
    pub pooled: Var,
}

pub fn regional_forward(
    sess: &mut Session,
    grid: &FeatureGrid,
    cfg: &RegionalConfig,
) -> Result<RegionalAttentionOutput> {
    let n = grid.num_regions();
    cfg.validate(n)?;
    let alpha = match cfg.mode {
        RegionalMode::Off => sess.tape.constant(Tensor::full(&[grid.batch, n], 1.0 / n as f64)),
        _ => region_scores(sess, grid)?,
    };
    let attended = attend(&mut sess.tape, grid, alpha, cfg.mode)?;
    let projected = project(sess, attended, cfg.dropout)?;
    let pooled = adaptive_pool(&mut sess.tape, projected, cfg.tokens)?;
    Ok(RegionalAttentionOutput {
        alpha,
        attended,
        projected,
        pooled,
    })
}
