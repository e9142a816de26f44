//! Cycle-consistency tracker and first-frame label propagation.
//!
//! A shared fully convolutional encoder maps frames to feature grids. To
//! track, the grid cells under a patch are compared to every cell of the
//! target grid (row-softmax of cosine similarities), and a localizer
//! convolution over that affinity volume scores every placement of the patch
//! and regresses a per-placement translation refinement. Training tracks a
//! patch backward through a window and forward again, penalising the gap
//! between where it started and where it returned.

use crate::error::{Error, Result};
use crate::image::{BinaryMask, RgbFrame, SoftMask};
use crate::synthdata::VideoClip;
use crate::tensor::{Checkpoint, Optimizer, ParamId, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const CHECKPOINT_KIND: &str = "cycle";
const NORM_EPS: f64 = 1e-12;
/// Initial score of a placement whose every patch cell puts all of its
/// affinity on the matching target cell.
const LOCALIZER_GAIN: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CycleConfig {
    pub image_size: usize,
    pub feature_channels: usize,
    /// Number of stride-2 encoder stages; the grid stride is `2^encoder_depth`.
    pub encoder_depth: usize,
    pub patch_size: usize,
    pub temperature: f64,
    pub cycle_len: usize,
    pub top_k: usize,
}

impl Default for CycleConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            feature_channels: 16,
            encoder_depth: 3,
            patch_size: 80,
            temperature: 0.07,
            cycle_len: 4,
            top_k: 5,
        }
    }
}

impl CycleConfig {
    pub fn stride(&self) -> usize {
        1 << self.encoder_depth
    }

    pub fn grid_size(&self) -> usize {
        self.image_size / self.stride()
    }

    pub fn patch_cells(&self) -> usize {
        self.patch_size / self.stride()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_depth > 8 {
            return Err(Error::config("encoder_depth must be at most 8"));
        }
        let s = self.stride();
        if self.feature_channels == 0 || self.image_size == 0 || self.patch_size == 0 {
            return Err(Error::config(
                "cycle image_size, patch_size and feature_channels must be positive",
            ));
        }
        if !self.image_size.is_multiple_of(s) || !self.patch_size.is_multiple_of(s) {
            return Err(Error::config(format!(
                "image_size {} and patch_size {} must be multiples of the encoder stride {s}",
                self.image_size, self.patch_size
            )));
        }
        if self.patch_size > self.image_size {
            return Err(Error::config("patch_size exceeds image_size"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        if self.top_k == 0 {
            return Err(Error::config("top_k must be positive"));
        }
        Ok(())
    }
}

/// Encoder output: `values` is `[channels, grid_h, grid_w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Pixels per grid cell.
    pub stride: usize,
    pub values: Tensor,
}

/// Row-stochastic `[rows, cols]` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub weights: Tensor,
}

impl AffinityMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights.data()[i * self.cols..(i + 1) * self.cols]
    }
}

/// A square patch of `patch_size` pixels centred at `center` in `frame`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchTrack {
    pub frame: usize,
    pub center: (f64, f64),
    pub patch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackResult {
    pub center: (f64, f64),
    /// The raw estimate left the valid region and was clamped.
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleModel {
    pub config: CycleConfig,
    pub seed: u64,
    pub params: ParamStore,
    encoder: Vec<(ParamId, ParamId, usize)>,
    loc_weight: ParamId,
    loc_bias: ParamId,
}

pub fn build_cycle(config: &CycleConfig, seed: u64) -> Result<CycleModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let c = config.feature_channels;
    let mut encoder = Vec::new();
    let mut conv = |params: &mut ParamStore, name: &str, cin: usize, stride: usize| {
        let std = (2.0 / (cin * 9) as f64).sqrt();
        let w = params.add(format!("{name}.weight"), Tensor::randn(&[c, cin, 3, 3], std, &mut rng));
        let b = params.add(format!("{name}.bias"), Tensor::zeros(&[c, 1, 1]));
        (w, b, stride)
    };
    encoder.push(conv(&mut params, "enc.stem", 3, 1));
    for l in 1..=config.encoder_depth {
        encoder.push(conv(&mut params, &format!("enc.down{l}"), c, 2));
    }
    // Channel 0 starts as scaled template matching; channels 1-2 (offsets) at zero.
    let p = config.patch_cells();
    let mut w = Tensor::zeros(&[3, p * p, p, p]);
    for i in 0..p * p {
        w.data_mut()[i * p * p + i] = LOCALIZER_GAIN / (p * p) as f64;
    }
    let loc_weight = params.add("loc.weight", w);
    let loc_bias = params.add("loc.bias", Tensor::zeros(&[3, 1, 1]));
    Ok(CycleModel {
        config: config.clone(),
        seed,
        params,
        encoder,
        loc_weight,
        loc_bias,
    })
}

impl CycleModel {
    /// `[3, H, W]` image to `[C, H/stride, W/stride]` features.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, input: Var) -> Result<Var> {
        let s = tape.shape(input).to_vec();
        let st = self.config.stride();
        if s.len() != 3 || s[0] != 3 || !s[1].is_multiple_of(st) || !s[2].is_multiple_of(st) {
            return Err(Error::shape(format!(
                "encoder expects [3, H, W] with H and W multiples of {st}, got {s:?}"
            )));
        }
        let mut x = input;
        let last = self.encoder.len() - 1;
        for (i, &(w, b, stride)) in self.encoder.iter().enumerate() {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            let y = tape.conv2d(x, wv, stride, 1)?;
            let y = tape.add(y, bv)?;
            x = if i < last { tape.relu(y) } else { y };
        }
        Ok(x)
    }

    /// Cosine-similarity softmax between `[C, Nq]`-flattened query cells and
    /// reference cells; returns `[Nq, Nr]`.
    pub fn affinity_var(&self, tape: &mut Tape, query: Var, reference: Var) -> Result<Var> {
        affinity_var(tape, query, reference, self.config.temperature)
    }

    /// One tracking step. `source` and `target` are `[C, G, G]` frame grids;
    /// `center` is a `[2]` (x, y) pixel position in the source frame.
    /// Returns the new `[2]` center in the target frame.
    pub fn track_var(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        source: Var,
        target: Var,
        center: Var,
    ) -> Result<(Var, bool)> {
        let cfg = &self.config;
        let (st, p) = (cfg.stride(), cfg.patch_cells());
        let half = cfg.patch_size as f64 / 2.0;
        let ts = tape.shape(target).to_vec();
        let (gh, gw) = (ts[1], ts[2]);
        let (cx, cy) = {
            let c = tape.value(center).data();
            (c[0], c[1])
        };
        let cell = |c: f64, g: usize| (((c - half) / st as f64).round().max(0.0) as usize).min(g - p);
        let (ux, uy) = (cell(cx, gw), cell(cy, gh));
        let crop_center = [(ux * st) as f64 + half, (uy * st) as f64 + half];

        let patch = slice_patch(tape, source, ux, uy, p)?;
        let est = self.localize(tape, store, patch, target)?;
        let moved = tape.add(center, est)?;
        let crop = tape.constant(Tensor::from_vec(crop_center.to_vec()));
        let next = tape.sub(moved, crop)?;

        let v = tape.value(next).data().to_vec();
        let (w, h) = ((gw * st) as f64, (gh * st) as f64);
        let clamped = [v[0].clamp(half, w - half), v[1].clamp(half, h - half)];
        if clamped[0] != v[0] || clamped[1] != v[1] {
            return Ok((tape.constant(Tensor::from_vec(clamped.to_vec())), true));
        }
        Ok((next, false))
    }

    /// Expected patch center over every placement in `target`, as `[2]`.
    fn localize(&self, tape: &mut Tape, store: &ParamStore, patch: Var, target: Var) -> Result<Var> {
        let (st, p) = (self.config.stride(), self.config.patch_cells());
        let half = self.config.patch_size as f64 / 2.0;
        let ts = tape.shape(target).to_vec();
        let (gh, gw) = (ts[1], ts[2]);
        let aff = self.affinity_var(tape, patch, target)?;
        let volume = tape.reshape(aff, &[p * p, gh, gw])?;
        let w = tape.param(store, self.loc_weight);
        let b = tape.param(store, self.loc_bias);
        let out = tape.conv2d(volume, w, 1, 0)?;
        let out = tape.add(out, b)?;
        let (oh, ow) = (gh - p + 1, gw - p + 1);
        let k = oh * ow;
        let score = tape.narrow(out, 0, 0, 1)?;
        let score = tape.reshape(score, &[1, k])?;
        let weights = tape.softmax(score, 1, 1.0)?;
        let mut coords = Vec::with_capacity(2);
        for axis in 0..2 {
            let base: Vec<f64> = (0..k)
                .map(|u| {
                    let cell = if axis == 0 { u % ow } else { u / ow };
                    (cell * st) as f64 + half
                })
                .collect();
            let off = tape.narrow(out, 0, axis + 1, 1)?;
            let off = tape.reshape(off, &[1, k])?;
            let off = tape.scale(off, st as f64);
            let base = tape.constant(Tensor::new(vec![1, k], base)?);
            let pos = tape.add(base, off)?;
            let weighted = tape.mul(weights, pos)?;
            coords.push(tape.sum(weighted));
        }
        tape.concat(&coords, 0)
    }

    /// Backward-then-forward cycle over `frames[0..=cycle_len]`, starting
    /// from a patch at `center` in the last frame of the window.
    pub fn cycle_loss_var(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frames: &[Tensor],
        cycle_len: usize,
        center: (f64, f64),
    ) -> Result<Var> {
        match self.cycle_terms(tape, store, frames, cycle_len, center)? {
            Some((pos, dissim)) => tape.add(pos, dissim),
            None => Ok(tape.constant(Tensor::scalar(0.0))),
        }
    }

    /// The two loss terms: normalised squared return error and feature
    /// dissimilarity. `None` for an empty cycle.
    pub fn cycle_terms(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frames: &[Tensor],
        cycle_len: usize,
        center: (f64, f64),
    ) -> Result<Option<(Var, Var)>> {
        if frames.len() < cycle_len + 1 {
            return Err(Error::config(format!(
                "cycle of length {cycle_len} needs {} frames, window has {}",
                cycle_len + 1,
                frames.len()
            )));
        }
        if cycle_len == 0 {
            return Ok(None);
        }
        let (st, p) = (self.config.stride(), self.config.patch_cells());
        let half = self.config.patch_size as f64 / 2.0;
        let grids = frames[..=cycle_len]
            .iter()
            .map(|f| {
                let x = tape.constant(f.clone());
                self.encode(tape, store, x)
            })
            .collect::<Result<Vec<_>>>()?;
        let gs = tape.shape(grids[0]).to_vec();
        let cell = |c: f64, g: usize| (((c - half) / st as f64).round().max(0.0) as usize).min(g - p);

        let start = tape.constant(Tensor::from_vec(vec![center.0, center.1]));
        let path: Vec<usize> = (0..cycle_len).rev().chain(1..=cycle_len).collect();
        let mut c = start;
        let mut prev = cycle_len;
        for &next in &path {
            c = self.track_var(tape, store, grids[prev], grids[next], c)?.0;
            prev = next;
        }

        let diff = tape.sub(c, start)?;
        let sq = tape.mul(diff, diff)?;
        let dist = tape.sum(sq);
        let pos = tape.scale(dist, 1.0 / (self.config.patch_size * self.config.patch_size) as f64);

        let end = tape.value(c).data().to_vec();
        let f_start = slice_patch(tape, grids[cycle_len], cell(center.0, gs[2]), cell(center.1, gs[1]), p)?;
        let f_end = slice_patch(tape, grids[cycle_len], cell(end[0], gs[2]), cell(end[1], gs[1]), p)?;
        let n = tape.value(f_start).numel();
        let a = tape.reshape(f_start, &[1, n])?;
        let b = tape.reshape(f_end, &[1, n])?;
        let a = tape.l2_normalize(a, 1, NORM_EPS)?;
        let b = tape.l2_normalize(b, 1, NORM_EPS)?;
        let ab = tape.mul(a, b)?;
        let cos = tape.sum(ab);
        let neg = tape.scale(cos, -1.0);
        let dissim = tape.offset(neg, 1.0);
        let dissim = tape.relu(dissim);
        Ok(Some((pos, dissim)))
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
        let config: CycleConfig = serde_json::from_value(ck.header.topology.clone())
            .map_err(|e| Error::Format(format!("cycle topology: {e}")))?;
        let mut model = build_cycle(&config, ck.header.seed)?;
        model.params.load_values_from(&ck.params)?;
        Ok(model)
    }
}

fn slice_patch(tape: &mut Tape, grid: Var, ux: usize, uy: usize, p: usize) -> Result<Var> {
    let rows = tape.narrow(grid, 1, uy, p)?;
    tape.narrow(rows, 2, ux, p)
}

fn affinity_var(tape: &mut Tape, query: Var, reference: Var, temperature: f64) -> Result<Var> {
    let (qs, rs) = (tape.shape(query).to_vec(), tape.shape(reference).to_vec());
    if qs[0] != rs[0] {
        return Err(Error::shape(format!(
            "affinity channel mismatch: query {qs:?}, reference {rs:?}"
        )));
    }
    let c = qs[0];
    let q = tape.reshape(query, &[c, qs[1..].iter().product()])?;
    let r = tape.reshape(reference, &[c, rs[1..].iter().product()])?;
    let q = tape.transpose(q)?;
    let q = tape.l2_normalize(q, 1, NORM_EPS)?;
    let r = tape.l2_normalize(r, 0, NORM_EPS)?;
    let sim = tape.matmul(q, r)?;
    tape.softmax(sim, 1, temperature)
}

fn grid_of(model: &CycleModel, values: Tensor) -> FeatureGrid {
    let s = values.shape().to_vec();
    FeatureGrid {
        channels: s[0],
        grid_h: s[1],
        grid_w: s[2],
        stride: model.config.stride(),
        values,
    }
}

pub fn encode_features(model: &CycleModel, image: &RgbFrame) -> Result<FeatureGrid> {
    let mut tape = Tape::new();
    let x = tape.constant(image.to_tensor());
    let y = model.encode(&mut tape, &model.params, x)?;
    Ok(grid_of(model, tape.value(y).clone()))
}

pub fn affinity(query: &FeatureGrid, reference: &FeatureGrid, temperature: f64) -> Result<AffinityMatrix> {
    if !(temperature > 0.0) {
        return Err(Error::Domain(format!("temperature {temperature} must be positive")));
    }
    let mut tape = Tape::new();
    let q = tape.constant(query.values.clone());
    let r = tape.constant(reference.values.clone());
    let a = affinity_var(&mut tape, q, r, temperature)?;
    let weights = tape.value(a).clone();
    Ok(AffinityMatrix {
        rows: weights.shape()[0],
        cols: weights.shape()[1],
        weights,
    })
}

/// Moves `patch` (located in the frame encoded as `source`) into the frame
/// encoded as `target`.
pub fn track_step(
    model: &CycleModel,
    source: &FeatureGrid,
    patch: &PatchTrack,
    target: &FeatureGrid,
) -> Result<TrackResult> {
    if patch.patch_size != model.config.patch_size {
        return Err(Error::shape(format!(
            "patch size {} differs from the model's {}",
            patch.patch_size, model.config.patch_size
        )));
    }
    if source.values.shape() != target.values.shape() {
        return Err(Error::shape("source and target grids differ in shape"));
    }
    let mut tape = Tape::new();
    let s = tape.constant(source.values.clone());
    let t = tape.constant(target.values.clone());
    let c = tape.constant(Tensor::from_vec(vec![patch.center.0, patch.center.1]));
    let (next, clamped) = model.track_var(&mut tape, &model.params, s, t, c)?;
    let v = tape.value(next).data();
    Ok(TrackResult {
        center: (v[0], v[1]),
        clamped,
    })
}

fn check_window(model: &CycleModel, frames: &[RgbFrame]) -> Result<()> {
    let s = model.config.image_size;
    if let Some(f) = frames.iter().find(|f| f.width() != s || f.height() != s) {
        return Err(Error::shape(format!(
            "cycle model expects {s}x{s} frames, got {}x{}",
            f.width(),
            f.height()
        )));
    }
    Ok(())
}

/// Scalar cycle loss for a patch centred at `center` in the last frame of
/// `window`.
pub fn cycle_loss(model: &CycleModel, window: &[RgbFrame], cycle_len: usize, center: (f64, f64)) -> Result<Tensor> {
    check_window(model, window)?;
    let frames: Vec<Tensor> = window.iter().map(|f| f.to_tensor()).collect();
    let mut tape = Tape::new();
    let loss = model.cycle_loss_var(&mut tape, &model.params, &frames, cycle_len, center)?;
    Ok(tape.value(loss).clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CycleTrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Windows averaged per SGD step.
    pub batch_size: usize,
    /// Number of (clip, window, patch) samples drawn once up front; training
    /// cycles through them in reshuffled passes.
    pub pool_size: usize,
    pub seed: u64,
}

impl Default for CycleTrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 2e-4,
            batch_size: 1,
            pool_size: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CycleHistory {
    /// Mean loss of each step's batch.
    pub loss: Vec<f64>,
    /// Trailing mean of `loss` over one pass through the sample pool.
    pub smoothed: Vec<f64>,
    pub steps_per_pass: usize,
}

impl CycleHistory {
    /// Smoothed loss after the first full pass.
    pub fn initial_smoothed(&self) -> Option<f64> {
        let i = self.steps_per_pass.clamp(1, self.smoothed.len().max(1)) - 1;
        self.smoothed.get(i).copied()
    }

    pub fn final_smoothed(&self) -> Option<f64> {
        self.smoothed.last().copied()
    }
}

#[derive(Debug, Clone, Copy)]
struct CycleSample {
    clip: usize,
    start: usize,
    center: (f64, f64),
}

/// SGD on the cycle loss over a seeded pool of windows and patch positions.
pub fn train_cycle(model: &mut CycleModel, clips: &[VideoClip], cfg: &CycleTrainConfig) -> Result<CycleHistory> {
    if clips.is_empty() {
        return Err(Error::config("cycle training needs at least one clip"));
    }
    if cfg.batch_size == 0 || cfg.pool_size == 0 {
        return Err(Error::config("batch_size and pool_size must be positive"));
    }
    let cl = model.config.cycle_len;
    for clip in clips {
        check_window(model, &clip.frames)?;
        if clip.len() < cl + 1 {
            return Err(Error::config(format!(
                "clip '{}' has {} frames, cycle needs {}",
                clip.id,
                clip.len(),
                cl + 1
            )));
        }
    }
    let steps_per_pass = cfg.pool_size.div_ceil(cfg.batch_size);
    let mut history = CycleHistory {
        steps_per_pass,
        ..CycleHistory::default()
    };
    if cfg.steps == 0 {
        return Ok(history);
    }
    let tensors: Vec<Vec<Tensor>> = clips
        .iter()
        .map(|c| c.frames.iter().map(|f| f.to_tensor()).collect())
        .collect();
    let mut opt = Optimizer::sgd(cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let half = model.config.patch_size as f64 / 2.0;
    let hi = model.config.image_size as f64 - half;
    let pool: Vec<CycleSample> = (0..cfg.pool_size)
        .map(|_| {
            let clip = rng.random_range(0..clips.len());
            CycleSample {
                clip,
                start: rng.random_range(0..=tensors[clip].len() - cl - 1),
                center: (rng.random_range(half..=hi), rng.random_range(half..=hi)),
            }
        })
        .collect();
    let mut order: Vec<usize> = Vec::new();
    model.params.zero_grad();
    for _ in 0..cfg.steps {
        if order.is_empty() {
            order = (0..pool.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let batch: Vec<usize> = (0..cfg.batch_size.min(order.len()))
            .filter_map(|_| order.pop())
            .collect();
        let mut total = 0.0;
        for &i in &batch {
            let s = pool[i];
            let mut tape = Tape::new();
            let window = &tensors[s.clip][s.start..=s.start + cl];
            let loss = model.cycle_loss_var(&mut tape, &model.params, window, cl, s.center)?;
            total += tape.value(loss).item();
            let scaled = tape.scale(loss, 1.0 / batch.len() as f64);
            tape.backward(scaled, &mut model.params)?;
        }
        fill_missing_grads(&mut model.params);
        opt.step(&mut model.params)?;
        history.loss.push(total / batch.len() as f64);
        let n = history.loss.len();
        let recent = &history.loss[n.saturating_sub(steps_per_pass)..];
        history.smoothed.push(recent.iter().sum::<f64>() / recent.len() as f64);
    }
    model.params.zero_grad();
    Ok(history)
}

/// A clamped step cuts the graph, so some parameters may see no gradient;
/// they are treated as having zero gradient.
fn fill_missing_grads(store: &mut ParamStore) {
    for p in store.iter_mut() {
        if p.grad.is_none() {
            p.grad = Some(vec![0.0; p.value.numel()]);
        }
    }
}

/// Mean of each `stride`x`stride` cell.
fn area_downsample(mask: &SoftMask, stride: usize) -> Vec<f64> {
    let (gw, gh) = (mask.width() / stride, mask.height() / stride);
    let mut out = vec![0.0; gw * gh];
    let v = mask.values();
    for gy in 0..gh {
        for gx in 0..gw {
            let mut s = 0.0;
            for y in gy * stride..(gy + 1) * stride {
                for x in gx * stride..(gx + 1) * stride {
                    s += v[y * mask.width() + x];
                }
            }
            out[gy * gw + gx] = s / (stride * stride) as f64;
        }
    }
    out
}

/// Bilinear interpolation of cell-centred grid values to pixel resolution.
fn bilinear_upsample(grid: &[f64], gw: usize, gh: usize, stride: usize) -> Vec<f64> {
    let (w, h) = (gw * stride, gh * stride);
    let coord = |p: usize, g: usize| -> (usize, usize, f64) {
        let c = ((p as f64 + 0.5) / stride as f64 - 0.5).clamp(0.0, (g - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(g - 1);
        (i0, i1, c - i0 as f64)
    };
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let (y0, y1, ty) = coord(y, gh);
        for x in 0..w {
            let (x0, x1, tx) = coord(x, gw);
            let top = grid[y0 * gw + x0] * (1.0 - tx) + grid[y0 * gw + x1] * tx;
            let bot = grid[y1 * gw + x0] * (1.0 - tx) + grid[y1 * gw + x1] * tx;
            out.push((top * (1.0 - ty) + bot * ty).clamp(0.0, 1.0));
        }
    }
    out
}

/// Keeps the `k` largest weights of each row and renormalises; ties go to
/// the lower column index. With `k >= cols` the matrix is returned as is.
fn top_k_rows(weights: &mut [f64], cols: usize, k: usize) {
    if k >= cols {
        return;
    }
    let mut idx: Vec<usize> = Vec::with_capacity(cols);
    for row in weights.chunks_exact_mut(cols) {
        idx.clear();
        idx.extend(0..cols);
        idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let mut keep = vec![false; cols];
        for &j in &idx[..k] {
            keep[j] = true;
        }
        let mut total = 0.0;
        for (j, w) in row.iter_mut().enumerate() {
            if keep[j] {
                total += *w;
            } else {
                *w = 0.0;
            }
        }
        if total > 0.0 {
            row.iter_mut().for_each(|w| *w /= total);
        }
    }
}

/// Propagates a first-frame mask through `clip`. Frame 0 of the result is
/// `first_mask` itself; every later frame averages the labels of the first
/// and previous frames under its (top-k restricted) affinity.
pub fn propagate_labels(
    model: &CycleModel,
    first_mask: &SoftMask,
    clip: &VideoClip,
    top_k: usize,
) -> Result<Vec<SoftMask>> {
    if clip.is_empty() {
        return Ok(Vec::new());
    }
    check_window(model, &clip.frames)?;
    let s = model.config.image_size;
    if first_mask.width() != s || first_mask.height() != s {
        return Err(Error::shape(format!(
            "first mask is {}x{}, frames are {s}x{s}",
            first_mask.width(),
            first_mask.height()
        )));
    }
    if top_k == 0 {
        return Err(Error::config("top_k must be positive"));
    }
    let st = model.config.stride();
    let g = model.config.grid_size();
    let m = g * g;
    let grids = clip
        .frames
        .iter()
        .map(|f| encode_features(model, f))
        .collect::<Result<Vec<_>>>()?;
    let first_labels = area_downsample(first_mask, st);
    let mut prev_labels = first_labels.clone();
    let mut out = Vec::with_capacity(clip.len());
    out.push(first_mask.clone());
    for t in 1..clip.len() {
        let refs = Tensor::new(
            vec![grids[0].channels, 2 * m],
            interleave_refs(&grids[0].values, &grids[t - 1].values, grids[0].channels, m),
        )?;
        let query = &grids[t].values;
        let mut tape = Tape::new();
        let q = tape.constant(query.clone());
        let r = tape.constant(refs);
        let a = affinity_var(&mut tape, q, r, model.config.temperature)?;
        let mut weights = tape.value(a).data().to_vec();
        top_k_rows(&mut weights, 2 * m, top_k);
        let labels: Vec<f64> = weights
            .chunks_exact(2 * m)
            .map(|row| {
                let (a0, a1) = row.split_at(m);
                let v: f64 = a0.iter().zip(&first_labels).map(|(w, l)| w * l).sum::<f64>()
                    + a1.iter().zip(&prev_labels).map(|(w, l)| w * l).sum::<f64>();
                v.clamp(0.0, 1.0)
            })
            .collect();
        out.push(SoftMask::new(s, s, bilinear_upsample(&labels, g, g, st))?);
        prev_labels = labels;
    }
    Ok(out)
}

/// `[C, M]` and `[C, M]` side by side as `[C, 2M]`.
fn interleave_refs(a: &Tensor, b: &Tensor, c: usize, m: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(c * 2 * m);
    for ch in 0..c {
        out.extend_from_slice(&a.data()[ch * m..(ch + 1) * m]);
        out.extend_from_slice(&b.data()[ch * m..(ch + 1) * m]);
    }
    out
}

/// Binary masks per frame, thresholding propagated labels at 0.5.
pub fn propagate_masks(
    model: &CycleModel,
    first_mask: &BinaryMask,
    clip: &VideoClip,
    top_k: usize,
) -> Result<Vec<BinaryMask>> {
    let soft = propagate_labels(model, &first_mask.to_soft(), clip, top_k)?;
    let mut out: Vec<BinaryMask> = soft.iter().map(|m| m.threshold(0.5)).collect();
    if let Some(first) = out.first_mut() {
        *first = first_mask.clone();
    }
    Ok(out)
}
