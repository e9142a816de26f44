//! Self-attention fusion of a static and a temporal soft mask.
//!
//! Each mask is cut into non-overlapping patches; each modality has its own
//! bias-free kernel-size-1 projection of flattened patches to `token_dim`,
//! plus a learned modality embedding. Both token sequences are concatenated,
//! given fixed sinusoidal (row, col, modality) encodings and passed through
//! pre-norm transformer blocks. A linear head reads each static token
//! together with its temporal counterpart and emits that patch's logits,
//! to which the input log-odds are added under two learned gains (static
//! starts at 1, temporal at 0).

use crate::error::{Error, Result};
use crate::image::{BinaryMask, SoftMask};
use crate::metrics;
use crate::parallel::{self, Execution};
use crate::tensor::{Checkpoint, Optimizer, ParamId, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const CHECKPOINT_KIND: &str = "fusion";
const LN_EPS: f64 = 1e-5;
/// Probability clamp before taking input log-odds (about +-9.2).
const SKIP_EPS: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub token_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Tokens per side of the square token grid.
    pub patch_tokens: usize,
    /// Side of the square input masks.
    pub mask_size: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            token_dim: 32,
            n_heads: 2,
            n_layers: 2,
            patch_tokens: 16,
            mask_size: 256,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.token_dim.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "token_dim {} is not divisible by n_heads {}",
                self.token_dim, self.n_heads
            )));
        }
        if self.token_dim < 6 || !self.token_dim.is_multiple_of(2) {
            return Err(Error::config("token_dim must be even and at least 6"));
        }
        if self.patch_tokens == 0 || !self.mask_size.is_multiple_of(self.patch_tokens) {
            return Err(Error::config(format!(
                "mask size {} is not divisible by the {}-token grid",
                self.mask_size, self.patch_tokens
            )));
        }
        Ok(())
    }

    pub fn patch(&self) -> usize {
        self.mask_size / self.patch_tokens
    }

    /// Tokens per modality.
    pub fn tokens(&self) -> usize {
        self.patch_tokens * self.patch_tokens
    }

    pub fn head_dim(&self) -> usize {
        self.token_dim / self.n_heads
    }
}

/// Aligned static and temporal predictions, optionally with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionPair {
    pub static_pred: SoftMask,
    pub temporal_pred: SoftMask,
    pub gt: Option<BinaryMask>,
}

impl PredictionPair {
    pub fn new(static_pred: SoftMask, temporal_pred: SoftMask, gt: Option<BinaryMask>) -> Result<Self> {
        let (w, h) = (static_pred.width(), static_pred.height());
        let aligned = temporal_pred.width() == w
            && temporal_pred.height() == h
            && gt.as_ref().is_none_or(|g| g.width() == w && g.height() == h);
        if !aligned {
            return Err(Error::shape("prediction pair is not spatially aligned"));
        }
        Ok(Self {
            static_pred,
            temporal_pred,
            gt,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, din: usize, dout: usize) -> Self {
        let std = (1.0 / din as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::randn(&[din, dout], std, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dout])),
        }
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, LN_EPS)?;
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        let y = tape.mul(n, g)?;
        tape.add(y, b)
    }
}

/// Parameters of one transformer block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Block {
    norm1: Norm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    norm2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub config: FusionConfig,
    pub seed: u64,
    pub params: ParamStore,
    proj_static: ParamId,
    proj_temporal: ParamId,
    embed_static: ParamId,
    embed_temporal: ParamId,
    blocks: Vec<Block>,
    final_norm: Norm,
    head: Linear,
    skip_static: ParamId,
    skip_temporal: ParamId,
}

pub fn build_fusion(config: &FusionConfig, seed: u64) -> Result<FusionModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let (d, pp) = (config.token_dim, config.patch() * config.patch());
    let proj_std = (1.0 / pp as f64).sqrt();
    let proj_static = params.add("tok.static.proj", Tensor::randn(&[d, pp, 1], proj_std, &mut rng));
    let proj_temporal = params.add("tok.temporal.proj", Tensor::randn(&[d, pp, 1], proj_std, &mut rng));
    let embed_static = params.add("tok.static.embed", Tensor::randn(&[d, 1], 0.1, &mut rng));
    let embed_temporal = params.add("tok.temporal.embed", Tensor::randn(&[d, 1], 0.1, &mut rng));
    let blocks = (0..config.n_layers)
        .map(|l| {
            let n = |s: &str| format!("block{l}.{s}");
            Block {
                norm1: Norm::new(&mut params, &n("norm1"), d),
                query: Linear::new(&mut params, &mut rng, &n("query"), d, d),
                key: Linear::new(&mut params, &mut rng, &n("key"), d, d),
                value: Linear::new(&mut params, &mut rng, &n("value"), d, d),
                out: Linear::new(&mut params, &mut rng, &n("out"), d, d),
                norm2: Norm::new(&mut params, &n("norm2"), d),
                ff1: Linear::new(&mut params, &mut rng, &n("ff1"), d, 2 * d),
                ff2: Linear::new(&mut params, &mut rng, &n("ff2"), 2 * d, d),
            }
        })
        .collect();
    let final_norm = Norm::new(&mut params, "final_norm", d);
    let head = Linear::new(&mut params, &mut rng, "head", 2 * d, pp);
    let skip_static = params.add("skip.static", Tensor::full(&[1], 1.0));
    let skip_temporal = params.add("skip.temporal", Tensor::zeros(&[1]));
    Ok(FusionModel {
        config: config.clone(),
        seed,
        params,
        proj_static,
        proj_temporal,
        embed_static,
        embed_temporal,
        blocks,
        final_norm,
        head,
        skip_static,
        skip_temporal,
    })
}

/// Clamped log-odds of a soft mask, `[H, W]`.
fn logit_map(mask: &SoftMask) -> Tensor {
    let v = mask
        .values()
        .iter()
        .map(|&p| {
            let p = p.clamp(SKIP_EPS, 1.0 - SKIP_EPS);
            (p / (1.0 - p)).ln()
        })
        .collect();
    Tensor::new(vec![mask.height(), mask.width()], v).expect("consistent extents")
}

/// `[patch^2, tokens]`: column `t` holds the flattened patch of token `t`
/// (row-major over the token grid).
fn patches(mask: &SoftMask, cfg: &FusionConfig) -> Tensor {
    let (g, p, w) = (cfg.patch_tokens, cfg.patch(), cfg.mask_size);
    let t = cfg.tokens();
    let v = mask.values();
    let mut out = vec![0.0; p * p * t];
    for ty in 0..g {
        for tx in 0..g {
            let tok = ty * g + tx;
            for dy in 0..p {
                for dx in 0..p {
                    out[(dy * p + dx) * t + tok] = v[(ty * p + dy) * w + tx * p + dx];
                }
            }
        }
    }
    Tensor::new(vec![p * p, t], out).expect("consistent extents")
}

/// Index map taking `[tokens, patch^2]` logits back to `[H, W]`.
fn unpatchify_index(cfg: &FusionConfig) -> Vec<usize> {
    let (g, p, w) = (cfg.patch_tokens, cfg.patch(), cfg.mask_size);
    let mut index = Vec::with_capacity(w * w);
    for y in 0..w {
        for x in 0..w {
            let tok = (y / p) * g + x / p;
            index.push(tok * p * p + (y % p) * p + x % p);
        }
    }
    index
}

/// Fixed encodings `[2 * tokens, token_dim]`. The feature dimension is split
/// into three even bands for row, column and modality; within a band, pair
/// `i` holds `sin(pos / 10000^(2i/band))` and `cos(...)`.
pub fn positional_encoding(cfg: &FusionConfig) -> Tensor {
    let d = cfg.token_dim;
    let band = (d / 3) & !1;
    let bands = [(0, band), (band, band), (2 * band, d - 2 * band)];
    let (g, t) = (cfg.patch_tokens, cfg.tokens());
    let mut out = vec![0.0; 2 * t * d];
    for m in 0..2 {
        for tok in 0..t {
            let pos = [tok / g, tok % g, m];
            let row = &mut out[(m * t + tok) * d..(m * t + tok + 1) * d];
            for (b, &(start, len)) in bands.iter().enumerate() {
                for i in 0..len / 2 {
                    let freq = 10000f64.powf(-2.0 * i as f64 / len as f64);
                    let a = pos[b] as f64 * freq;
                    row[start + 2 * i] = a.sin();
                    row[start + 2 * i + 1] = a.cos();
                }
            }
        }
    }
    Tensor::new(vec![2 * t, d], out).expect("consistent extents")
}

impl FusionModel {
    fn check_pair(&self, pair: &PredictionPair) -> Result<()> {
        let s = self.config.mask_size;
        if pair.static_pred.width() != s || pair.static_pred.height() != s {
            return Err(Error::config(format!(
                "fusion expects {s}x{s} masks (divisible into a {}-token grid), got {}x{}",
                self.config.patch_tokens,
                pair.static_pred.width(),
                pair.static_pred.height()
            )));
        }
        if pair.temporal_pred.width() != s || pair.temporal_pred.height() != s {
            return Err(Error::shape("temporal prediction does not match the static one"));
        }
        Ok(())
    }

    /// Token sequence `[2 * tokens, token_dim]`, static tokens first, without
    /// positional encoding.
    pub fn tokenize_var(&self, tape: &mut Tape, store: &ParamStore, pair: &PredictionPair) -> Result<Var> {
        self.check_pair(pair)?;
        let mut parts = Vec::with_capacity(2);
        for (mask, proj, embed) in [
            (&pair.static_pred, self.proj_static, self.embed_static),
            (&pair.temporal_pred, self.proj_temporal, self.embed_temporal),
        ] {
            let x = tape.constant(patches(mask, &self.config));
            let k = tape.param(store, proj);
            let y = tape.conv1d(x, k, 1, 0)?;
            let e = tape.param(store, embed);
            parts.push(tape.add(y, e)?);
        }
        let seq = tape.concat(&parts, 1)?;
        tape.transpose(seq)
    }

    /// One pre-norm block over `[N, token_dim]`; also returns each head's
    /// `[N, N]` attention weights.
    pub fn block_var(&self, tape: &mut Tape, store: &ParamStore, layer: usize, x: Var) -> Result<(Var, Vec<Var>)> {
        let blk = self
            .blocks
            .get(layer)
            .ok_or_else(|| Error::shape(format!("layer {layer} out of range for {} blocks", self.blocks.len())))?;
        let d = self.config.token_dim;
        if tape.shape(x).len() != 2 || tape.shape(x)[1] != d {
            return Err(Error::shape(format!(
                "attention block expects [N, {d}] tokens, got {:?}",
                tape.shape(x)
            )));
        }
        let dh = self.config.head_dim();
        let h = blk.norm1.apply(tape, store, x)?;
        let q = blk.query.apply(tape, store, h)?;
        let k = blk.key.apply(tape, store, h)?;
        let v = blk.value.apply(tape, store, h)?;
        let mut heads = Vec::with_capacity(self.config.n_heads);
        let mut weights = Vec::with_capacity(self.config.n_heads);
        for i in 0..self.config.n_heads {
            let qh = tape.narrow(q, 1, i * dh, dh)?;
            let kh = tape.narrow(k, 1, i * dh, dh)?;
            let vh = tape.narrow(v, 1, i * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let a = tape.softmax(scores, 1, (dh as f64).sqrt())?;
            heads.push(tape.matmul(a, vh)?);
            weights.push(a);
        }
        let cat = tape.concat(&heads, 1)?;
        let attn = blk.out.apply(tape, store, cat)?;
        let x = tape.add(x, attn)?;
        let h = blk.norm2.apply(tape, store, x)?;
        let f = blk.ff1.apply(tape, store, h)?;
        let f = tape.relu(f);
        let f = blk.ff2.apply(tape, store, f)?;
        Ok((tape.add(x, f)?, weights))
    }

    /// Full network: `[H, W]` fused logits.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, pair: &PredictionPair) -> Result<Var> {
        let t = self.config.tokens();
        let tokens = self.tokenize_var(tape, store, pair)?;
        let pe = tape.constant(positional_encoding(&self.config));
        let mut x = tape.add(tokens, pe)?;
        for layer in 0..self.blocks.len() {
            x = self.block_var(tape, store, layer, x)?.0;
        }
        let x = self.final_norm.apply(tape, store, x)?;
        let s = tape.narrow(x, 0, 0, t)?;
        let tm = tape.narrow(x, 0, t, t)?;
        let joint = tape.concat(&[s, tm], 1)?;
        let logits = self.head.apply(tape, store, joint)?;
        let m = self.config.mask_size;
        let mut y = tape.gather(logits, unpatchify_index(&self.config), &[m, m])?;
        for (mask, gain) in [
            (&pair.static_pred, self.skip_static),
            (&pair.temporal_pred, self.skip_temporal),
        ] {
            let l = tape.constant(logit_map(mask));
            let g = tape.param(store, gain);
            let term = tape.mul(l, g)?;
            y = tape.add(y, term)?;
        }
        Ok(y)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let topology = serde_json::to_value(&self.config).expect("config serializes");
        Checkpoint::new(CHECKPOINT_KIND, self.seed, topology, &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!(
                "expected a {CHECKPOINT_KIND} checkpoint, found '{}'",
                ck.header.kind
            )));
        }
        let config: FusionConfig = serde_json::from_value(ck.header.topology.clone())
            .map_err(|e| Error::Format(format!("fusion topology: {e}")))?;
        let mut model = build_fusion(&config, ck.header.seed)?;
        model.params.load_values_from(&ck.params)?;
        Ok(model)
    }
}

/// Token sequence `[2 * tokens, token_dim]` (static first) before positional
/// encoding.
pub fn tokenize(model: &FusionModel, pair: &PredictionPair) -> Result<Tensor> {
    let mut tape = Tape::new();
    let t = model.tokenize_var(&mut tape, &model.params, pair)?;
    Ok(tape.value(t).clone())
}

pub fn positional_encode(config: &FusionConfig, tokens: &Tensor) -> Result<Tensor> {
    let pe = positional_encoding(config);
    if tokens.shape() != pe.shape() {
        return Err(Error::shape(format!(
            "expected tokens {:?}, got {:?}",
            pe.shape(),
            tokens.shape()
        )));
    }
    let data = tokens.data().iter().zip(pe.data()).map(|(a, b)| a + b).collect();
    Tensor::new(tokens.shape().to_vec(), data)
}

/// Applies block `layer` of `model` to `[N, token_dim]` tokens; returns the
/// new tokens and per-head attention weights.
pub fn self_attention_block(model: &FusionModel, layer: usize, tokens: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let x = tape.constant(tokens.clone());
    let (y, w) = model.block_var(&mut tape, &model.params, layer, x)?;
    Ok((
        tape.value(y).clone(),
        w.iter().map(|&a| tape.value(a).clone()).collect(),
    ))
}

/// `[H, W]` fused logits.
pub fn fuse(model: &FusionModel, pair: &PredictionPair) -> Result<Tensor> {
    let mut tape = Tape::new();
    let y = model.forward(&mut tape, &model.params, pair)?;
    Ok(tape.value(y).clone())
}

/// Foreground where the fused logit is `>= 0` (probability `>= 0.5`).
pub fn fuse_mask(model: &FusionModel, pair: &PredictionPair) -> Result<BinaryMask> {
    let logits = fuse(model, pair)?;
    let m = model.config.mask_size;
    BinaryMask::new(m, m, logits.data().iter().map(|&v| (v >= 0.0) as u8).collect())
}

/// `alpha * static + (1 - alpha) * temporal`, foreground at `>= 0.5`.
pub fn weighted_mean_baseline(pair: &PredictionPair, alpha: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("alpha {alpha} outside [0, 1]")));
    }
    let (s, t) = (&pair.static_pred, &pair.temporal_pred);
    if s.width() != t.width() || s.height() != t.height() {
        return Err(Error::shape("prediction pair is not spatially aligned"));
    }
    let values = s
        .values()
        .iter()
        .zip(t.values())
        .map(|(&a, &b)| (alpha * a + (1.0 - alpha) * b).clamp(0.0, 1.0))
        .collect();
    Ok(SoftMask::new(s.width(), s.height(), values)?.threshold(0.5))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FusionTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 4,
            lr: 0.003,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionEpoch {
    pub epoch: usize,
    pub loss: f64,
    /// Mean IoU on the selection pairs after this epoch, when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FusionHistory {
    pub epochs: Vec<FusionEpoch>,
    /// Mean IoU on the selection pairs before training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_val_iou: Option<f64>,
    /// Epoch whose weights the model holds (0 = initial weights); set only
    /// when trained with selection pairs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
}

/// Mean per-pair IoU of thresholded fused masks against ground truth.
pub fn mean_iou(model: &FusionModel, pairs: &[PredictionPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::config("no pairs to score"));
    }
    let scores = parallel::map(Execution::Parallel, pairs, |p| -> Result<f64> {
        let gt =
            p.gt.as_ref()
                .ok_or_else(|| Error::config("selection pair has no ground truth"))?;
        metrics::iou(&fuse_mask(model, p)?, gt)
    });
    Ok(scores.into_iter().sum::<Result<f64>>()? / pairs.len() as f64)
}

fn targets_of(model: &FusionModel, pairs: &[PredictionPair], what: &str) -> Result<Vec<Tensor>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            model.check_pair(p)?;
            p.gt.as_ref()
                .map(|g| g.to_tensor())
                .ok_or_else(|| Error::config(format!("fusion {what} pair {i} has no ground truth")))
        })
        .collect()
}

/// Adam on per-pixel BCE between fused logits and ground truth.
pub fn train_fusion(
    model: &mut FusionModel,
    pairs: &[PredictionPair],
    cfg: &FusionTrainConfig,
) -> Result<FusionHistory> {
    fit(model, pairs, &[], cfg)
}

/// As [`train_fusion`], then keeps the weights of the epoch with the highest
/// mean IoU on `select` (earliest on ties), counting the initial weights as
/// epoch 0.
pub fn train_fusion_selected(
    model: &mut FusionModel,
    pairs: &[PredictionPair],
    select: &[PredictionPair],
    cfg: &FusionTrainConfig,
) -> Result<FusionHistory> {
    if select.is_empty() {
        return Err(Error::config("fusion selection set is empty"));
    }
    fit(model, pairs, select, cfg)
}

fn fit(
    model: &mut FusionModel,
    pairs: &[PredictionPair],
    select: &[PredictionPair],
    cfg: &FusionTrainConfig,
) -> Result<FusionHistory> {
    if pairs.is_empty() {
        return Err(Error::config("fusion training set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let targets = targets_of(model, pairs, "training")?;
    targets_of(model, select, "selection")?;
    let selecting = !select.is_empty();
    let mut history = FusionHistory::default();
    let mut best = None;
    if selecting {
        let iou = mean_iou(model, select)?;
        history.initial_val_iou = Some(iou);
        history.best_epoch = Some(0);
        best = Some((iou, model.params.clone()));
    }
    if cfg.epochs == 0 {
        return Ok(history);
    }
    let mut opt = Optimizer::adam(cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    model.params.zero_grad();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            for &i in batch {
                let mut tape = Tape::new();
                let logits = model.forward(&mut tape, &model.params, &pairs[i])?;
                let bce = tape.bce_with_logits(logits, &targets[i])?;
                total += tape.value(bce).item();
                let loss = tape.scale(bce, 1.0 / batch.len() as f64);
                tape.backward(loss, &mut model.params)?;
            }
            opt.step(&mut model.params)?;
        }
        let val_iou = if selecting {
            Some(mean_iou(model, select)?)
        } else {
            None
        };
        if let (Some(iou), Some((best_iou, params))) = (val_iou, best.as_mut()) {
            if iou > *best_iou {
                *best_iou = iou;
                *params = model.params.clone();
                history.best_epoch = Some(epoch);
            }
        }
        history.epochs.push(FusionEpoch {
            epoch,
            loss: total / pairs.len() as f64,
            val_iou,
        });
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    model.params.zero_grad();
    Ok(history)
}
