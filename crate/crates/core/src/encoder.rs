//! Hierarchical shifted-window vision encoder.
//!
//! Patch embedding, then per stage: pairs of (windowed MHSA, shifted windowed
//! MHSA) blocks with pre-norm residual MLPs, and a 2×2 patch merge between
//! stages. Relative position bias is not used.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Session, INIT_STD};
use crate::tensor::{Rng, Tape, Tensor, Var};

pub const PREFIX: &str = "enc.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub stage_depths: Vec<usize>,
    pub stage_dims: Vec<usize>,
    pub heads_per_stage: Vec<usize>,
    pub window_size: usize,
    pub mlp_ratio: usize,
    /// Learned absolute position embedding added after the patch embedding.
    /// Without it (and without a relative position bias) the encoder cannot
    /// tell where in the image a feature sits.
    #[serde(default)]
    pub absolute_position: bool,
    /// Exclude every encoder parameter from optimization.
    pub freeze: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl EncoderConfig {
    /// 32px input, 2 stages, 4×4 output grid with 64 channels.
    pub fn toy() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            in_channels: 3,
            stage_depths: vec![2, 2],
            stage_dims: vec![32, 64],
            heads_per_stage: vec![2, 4],
            window_size: 4,
            mlp_ratio: 4,
            absolute_position: true,
            freeze: false,
        }
    }

    /// Swin-Base geometry: 224px, patch 4, window 7, dims 128..1024.
    pub fn swin_base() -> Self {
        Self {
            image_size: 224,
            patch_size: 4,
            in_channels: 3,
            stage_depths: vec![2, 2, 18, 2],
            stage_dims: vec![128, 256, 512, 1024],
            heads_per_stage: vec![4, 8, 16, 32],
            window_size: 7,
            mlp_ratio: 4,
            absolute_position: true,
            freeze: false,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_dims.len()
    }

    /// Side length of the token grid entering stage `s`.
    pub fn stage_grid(&self, s: usize) -> usize {
        (self.image_size / self.patch_size) >> s
    }

    /// Window side used in stage `s` (never larger than the grid).
    pub fn stage_window(&self, s: usize) -> usize {
        self.window_size.min(self.stage_grid(s))
    }

    pub fn output_grid(&self) -> usize {
        self.stage_grid(self.num_stages() - 1)
    }

    pub fn output_channels(&self) -> usize {
        *self.stage_dims.last().expect("validated: at least one stage")
    }

    /// N = H'·W' regions in the emitted grid.
    pub fn num_regions(&self) -> usize {
        self.output_grid() * self.output_grid()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let s = self.num_stages();
        if s == 0 {
            return bad("encoder needs at least one stage".into());
        }
        if self.stage_depths.len() != s || self.heads_per_stage.len() != s {
            return bad(format!(
                "stage_depths ({}), stage_dims ({}) and heads_per_stage ({}) must have equal length",
                self.stage_depths.len(),
                s,
                self.heads_per_stage.len()
            ));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.window_size == 0 {
            return bad("window_size must be positive".into());
        }
        let mut grid = self.image_size / self.patch_size;
        for st in 0..s {
            if st > 0 {
                if !grid.is_multiple_of(2) {
                    return bad(format!("stage {st}: grid {grid} cannot be merged 2×2"));
                }
                grid /= 2;
            }
            let w = self.window_size.min(grid);
            if !grid.is_multiple_of(w) {
                return bad(format!("stage {st}: grid {grid} not divisible by window {w}"));
            }
            let (dim, heads) = (self.stage_dims[st], self.heads_per_stage[st]);
            if heads == 0 || dim % heads != 0 {
                return bad(format!("stage {st}: {heads} heads do not divide dim {dim}"));
            }
        }
        Ok(())
    }
}

/// Encoder output, flattened row-major over (height, width):
/// `values: [batch, height·width, channels]`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureGrid {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Var,
}

impl FeatureGrid {
    pub fn new(tape: &Tape, values: Var, height: usize, width: usize) -> Result<Self> {
        let shape = tape.shape(values);
        if shape.len() != 3 || shape[1] != height * width {
            return Err(Error::Shape(format!(
                "feature grid {height}×{width} does not match values {:?}",
                shape
            )));
        }
        Ok(Self {
            batch: shape[0],
            height,
            width,
            channels: shape[2],
            values,
        })
    }

    pub fn num_regions(&self) -> usize {
        self.height * self.width
    }
}

pub fn init_params(cfg: &EncoderConfig, rng: &mut Rng, store: &mut ParamStore) -> Result<()> {
    cfg.validate()?;
    let p = cfg.patch_size;
    let e0 = cfg.stage_dims[0];
    store.init_linear(rng, "enc.patch", cfg.in_channels * p * p, e0, true);
    store.init_layer_norm("enc.patch_norm", e0);
    if cfg.absolute_position {
        let n = cfg.stage_grid(0).pow(2);
        store.insert("enc.pos", Tensor::from_fn(&[n, e0], |_| rng.truncated_normal(INIT_STD)));
    }
    for (s, (&depth, &dim)) in cfg.stage_depths.iter().zip(&cfg.stage_dims).enumerate() {
        if s > 0 {
            let prev = cfg.stage_dims[s - 1];
            store.init_layer_norm(&format!("enc.merge{s}.norm"), 4 * prev);
            store.init_linear(rng, &format!("enc.merge{s}.reduce"), 4 * prev, dim, false);
        }
        for b in 0..depth {
            let n = format!("enc.s{s}.b{b}");
            store.init_layer_norm(&format!("{n}.norm1"), dim);
            store.init_linear(rng, &format!("{n}.qkv"), dim, 3 * dim, true);
            store.init_linear(rng, &format!("{n}.proj"), dim, dim, true);
            store.init_layer_norm(&format!("{n}.norm2"), dim);
            store.init_linear(rng, &format!("{n}.fc1"), dim, cfg.mlp_ratio * dim, true);
            store.init_linear(rng, &format!("{n}.fc2"), cfg.mlp_ratio * dim, dim, true);
        }
    }
    store.init_layer_norm("enc.norm", cfg.output_channels());
    if cfg.freeze {
        store.set_frozen_prefix(PREFIX, true);
    }
    Ok(())
}

/// `[B, 3, S, S]` image to `[B, (S/p)², E]` patch embeddings.
pub fn patchify(sess: &mut Session, image: Var, cfg: &EncoderConfig) -> Result<Var> {
    let shape = sess.tape.shape(image).to_vec();
    let (s, c, p) = (cfg.image_size, cfg.in_channels, cfg.patch_size);
    if shape.len() != 4 || shape[1] != c || shape[2] != s || shape[3] != s {
        return Err(Error::Shape(format!(
            "expected image [B, {c}, {s}, {s}], got {:?}",
            shape
        )));
    }
    let (b, g) = (shape[0], s / p);
    let t = &mut sess.tape;
    let x = t.reshape(image, &[b, c, g, p, g, p])?;
    let x = t.permute(x, &[0, 2, 4, 1, 3, 5])?;
    let x = t.reshape(x, &[b, g * g, c * p * p])?;
    let x = sess.linear(x, "enc.patch")?;
    let x = sess.layer_norm(x, "enc.patch_norm")?;
    if cfg.absolute_position {
        let pos = sess.param("enc.pos")?;
        sess.tape.add(x, pos)
    } else {
        Ok(x)
    }
}

/// `[B, H·W, C]` to `[B·nW, w², C]`, windows in row-major order per image.
pub fn window_partition(tape: &mut Tape, grid: &FeatureGrid, w: usize) -> Result<Var> {
    let (b, h, wd, c) = (grid.batch, grid.height, grid.width, grid.channels);
    if w == 0 || h % w != 0 || wd % w != 0 {
        return Err(Error::Config(format!("grid {h}×{wd} not divisible by window {w}")));
    }
    let x = tape.reshape(grid.values, &[b, h / w, w, wd / w, w, c])?;
    let x = tape.permute(x, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(x, &[b * (h / w) * (wd / w), w * w, c])
}

/// Inverse of [`window_partition`].
pub fn window_merge(
    tape: &mut Tape,
    windows: Var,
    batch: usize,
    height: usize,
    width: usize,
    w: usize,
) -> Result<FeatureGrid> {
    let c = *tape.shape(windows).last().unwrap_or(&0);
    if w == 0 || !height.is_multiple_of(w) || !width.is_multiple_of(w) {
        return Err(Error::Config(format!(
            "grid {height}×{width} not divisible by window {w}"
        )));
    }
    let x = tape.reshape(windows, &[batch, height / w, width / w, w, w, c])?;
    let x = tape.permute(x, &[0, 1, 3, 2, 4, 5])?;
    let x = tape.reshape(x, &[batch, height * width, c])?;
    FeatureGrid::new(tape, x, height, width)
}

/// Toroidal roll: the token at `(y, x)` moves to `((y+dy) mod H, (x+dx) mod W)`.
pub fn cyclic_shift(tape: &mut Tape, grid: &FeatureGrid, dy: isize, dx: isize) -> Result<FeatureGrid> {
    let (h, w) = (grid.height as isize, grid.width as isize);
    if (h > 0 && dy.abs() >= h) || (w > 0 && dx.abs() >= w) {
        return Err(Error::Config(format!("shift ({dy},{dx}) too large for grid {h}×{w}")));
    }
    if dy == 0 && dx == 0 {
        return Ok(*grid);
    }
    let mut src = Vec::with_capacity((h * w) as usize);
    for y in 0..h {
        for x in 0..w {
            let sy = (y - dy).rem_euclid(h);
            let sx = (x - dx).rem_euclid(w);
            src.push((sy * w + sx) as usize);
        }
    }
    let values = tape.index_select(grid.values, 1, &src)?;
    Ok(FeatureGrid { values, ..*grid })
}

/// Additive attention mask `[nW, w², w²]` (0 or −∞) for a grid that was rolled
/// by `−shift`: tokens that came from different regions of the unrolled grid
/// may not attend to each other.
pub fn shifted_window_mask(height: usize, width: usize, w: usize, shift: usize) -> Tensor {
    let label_of = |pos: usize, extent: usize| -> usize {
        if pos < extent - w {
            0
        } else if pos < extent - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (height / w, width / w);
    let t = w * w;
    let mut data = vec![0.0; nh * nw * t * t];
    for wy in 0..nh {
        for wx in 0..nw {
            let labels: Vec<usize> = (0..t)
                .map(|i| {
                    let (y, x) = (wy * w + i / w, wx * w + i % w);
                    label_of(y, height) * 3 + label_of(x, width)
                })
                .collect();
            let base = (wy * nw + wx) * t * t;
            for i in 0..t {
                for j in 0..t {
                    if labels[i] != labels[j] {
                        data[base + i * t + j] = f64::NEG_INFINITY;
                    }
                }
            }
        }
    }
    Tensor::new(vec![nh * nw, t, t], data).expect("mask shape")
}

/// Multi-head self-attention inside each window.
///
/// `windows: [B·nW, T, C]`; `mask`, if given, is `[nW, T, T]` and is shared by
/// every image in the batch. Returns the projected output and the attention
/// weights `[B·nW, heads, T, T]`.
pub fn window_attention(
    sess: &mut Session,
    windows: Var,
    heads: usize,
    mask: Option<&Tensor>,
    prefix: &str,
) -> Result<(Var, Var)> {
    let shape = sess.tape.shape(windows).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("windows must be rank 3, got {:?}", shape)));
    }
    let (bw, t, c) = (shape[0], shape[1], shape[2]);
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide {c} channels")));
    }
    let dh = c / heads;
    let qkv = sess.linear(windows, &format!("{prefix}.qkv"))?;
    let tape = &mut sess.tape;
    let qkv = tape.reshape(qkv, &[bw, t, 3, heads, dh])?;
    let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
    let mut pick = |i: usize| -> Result<Var> {
        let x = tape.index_select(qkv, 0, &[i])?;
        tape.reshape(x, &[bw, heads, t, dh])
    };
    let (q, k, v) = (pick(0)?, pick(1)?, pick(2)?);
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    if let Some(mask) = mask {
        let nw = mask.shape()[0];
        if bw % nw != 0 || mask.shape()[1..] != [t, t] {
            return Err(Error::Shape(format!(
                "mask {:?} incompatible with {bw} windows of {t} tokens",
                mask.shape()
            )));
        }
        let m = tape.constant(mask.reshape(&[nw, 1, t, t])?);
        let s = tape.reshape(scores, &[bw / nw, nw, heads, t, t])?;
        let s = tape.add(s, m)?;
        scores = tape.reshape(s, &[bw, heads, t, t])?;
    }
    let attn = tape.softmax(scores, 3)?;
    let out = tape.matmul(attn, v)?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    let out = tape.reshape(out, &[bw, t, c])?;
    let out = sess.linear(out, &format!("{prefix}.proj"))?;
    Ok((out, attn))
}

pub fn swin_block(
    sess: &mut Session,
    grid: &FeatureGrid,
    cfg: &EncoderConfig,
    stage: usize,
    block: usize,
) -> Result<FeatureGrid> {
    let name = format!("enc.s{stage}.b{block}");
    let w = cfg.stage_window(stage);
    let shift = if block % 2 == 1 && grid.height > w { w / 2 } else { 0 };
    let normed = sess.layer_norm(grid.values, &format!("{name}.norm1"))?;
    let g = FeatureGrid {
        values: normed,
        ..*grid
    };
    let s = shift as isize;
    let g = cyclic_shift(&mut sess.tape, &g, -s, -s)?;
    let windows = window_partition(&mut sess.tape, &g, w)?;
    let mask = (shift > 0).then(|| shifted_window_mask(grid.height, grid.width, w, shift));
    let (attended, _) = window_attention(sess, windows, cfg.heads_per_stage[stage], mask.as_ref(), &name)?;
    let g = window_merge(&mut sess.tape, attended, grid.batch, grid.height, grid.width, w)?;
    let g = cyclic_shift(&mut sess.tape, &g, s, s)?;
    let x = sess.tape.add(grid.values, g.values)?;

    let h = sess.layer_norm(x, &format!("{name}.norm2"))?;
    let h = sess.linear(h, &format!("{name}.fc1"))?;
    let h = sess.tape.gelu(h);
    let h = sess.linear(h, &format!("{name}.fc2"))?;
    let x = sess.tape.add(x, h)?;
    Ok(FeatureGrid { values: x, ..*grid })
}

/// Concatenates each 2×2 neighbourhood (4C) and reduces it linearly.
pub fn patch_merge(sess: &mut Session, grid: &FeatureGrid, name: &str) -> Result<FeatureGrid> {
    let (b, h, w, c) = (grid.batch, grid.height, grid.width, grid.channels);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Config(format!("cannot merge odd grid {h}×{w}")));
    }
    let t = &mut sess.tape;
    let x = t.reshape(grid.values, &[b, h / 2, 2, w / 2, 2, c])?;
    let x = t.permute(x, &[0, 1, 3, 4, 2, 5])?;
    let x = t.reshape(x, &[b, (h / 2) * (w / 2), 4 * c])?;
    let x = sess.layer_norm(x, &format!("{name}.norm"))?;
    let x = sess.linear(x, &format!("{name}.reduce"))?;
    FeatureGrid::new(&sess.tape, x, h / 2, w / 2)
}

/// Full encoder: `[B, 3, S, S]` to a `H'×W'×C` feature grid.
pub fn encode_image(sess: &mut Session, image: Var, cfg: &EncoderConfig) -> Result<FeatureGrid> {
    cfg.validate()?;
    let x = patchify(sess, image, cfg)?;
    let g0 = cfg.stage_grid(0);
    let mut grid = FeatureGrid::new(&sess.tape, x, g0, g0)?;
    for stage in 0..cfg.num_stages() {
        if stage > 0 {
            grid = patch_merge(sess, &grid, &format!("enc.merge{stage}"))?;
        }
        for block in 0..cfg.stage_depths[stage] {
            grid = swin_block(sess, &grid, cfg, stage, block)?;
        }
    }
    let values = sess.layer_norm(grid.values, "enc.norm")?;
    Ok(FeatureGrid { values, ..grid })
}
