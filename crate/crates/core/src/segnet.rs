//! Single-frame encoder-decoder producing one foreground logit per pixel.
//!
//! Encoder: a 3x3 stem, then `depth` stride-2 3x3 convolutions doubling the
//! channel count each level. Decoder: per level, nearest-neighbour upsample,
//! optional concatenation of the matching encoder features, 3x3 conv + ReLU.
//! A 1x1 head maps to logits.

use crate::error::{Error, Result};
use crate::image::{BinaryMask, RgbFrame, SoftMask};
use crate::metrics;
use crate::parallel::{self, Execution};
use crate::tensor::{Checkpoint, Optimizer, ParamId, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const CHECKPOINT_KIND: &str = "segnet";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegNetConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub skip_connections: bool,
    pub input_size: usize,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            depth: 3,
            skip_connections: true,
            input_size: 256,
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.input_size == 0 {
            return Err(Error::config("segnet base_channels and input_size must be positive"));
        }
        if self.depth > 16 || !self.input_size.is_multiple_of(1 << self.depth) {
            return Err(Error::config(format!(
                "segnet input_size {} is not divisible by 2^{}",
                self.input_size, self.depth
            )));
        }
        Ok(())
    }

    /// Channels at encoder level `l` (0 = stem).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn bottleneck_size(&self) -> usize {
        self.input_size >> self.depth
    }

    /// Input channels of each decoder conv, deepest level first.
    pub fn decoder_input_channels(&self) -> Vec<usize> {
        (1..=self.depth)
            .rev()
            .map(|l| self.channels(l) + if self.skip_connections { self.channels(l - 1) } else { 0 })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    padding: usize,
}

impl ConvLayer {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::randn(&[cout, cin, k, k], std, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout, 1, 1])),
            stride,
            padding: k / 2,
        }
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.conv2d(x, w, self.stride, self.padding)?;
        tape.add(y, b)
    }
}

/// A built segmentation network: configuration, layer wiring and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    pub config: SegNetConfig,
    pub seed: u64,
    pub params: ParamStore,
    stem: ConvLayer,
    down: Vec<ConvLayer>,
    up: Vec<ConvLayer>,
    head: ConvLayer,
}

pub fn build_segnet(config: &SegNetConfig, seed: u64) -> Result<SegModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let stem = ConvLayer::new(&mut params, &mut rng, "stem", 3, config.channels(0), 3, 1);
    let down = (1..=config.depth)
        .map(|l| {
            ConvLayer::new(
                &mut params,
                &mut rng,
                &format!("down{l}"),
                config.channels(l - 1),
                config.channels(l),
                3,
                2,
            )
        })
        .collect();
    let up = (1..=config.depth)
        .rev()
        .zip(config.decoder_input_channels())
        .map(|(l, cin)| {
            ConvLayer::new(
                &mut params,
                &mut rng,
                &format!("up{l}"),
                cin,
                config.channels(l - 1),
                3,
                1,
            )
        })
        .collect();
    let head = ConvLayer::new(&mut params, &mut rng, "head", config.channels(0), 1, 1, 1);
    Ok(SegModel {
        config: config.clone(),
        seed,
        params,
        stem,
        down,
        up,
        head,
    })
}

impl SegModel {
    /// Records the network on `tape` for a `[3, S, S]` input, reading weights
    /// from `store`; returns `[S, S]` logits.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, input: Var) -> Result<Var> {
        let s = self.config.input_size;
        if tape.shape(input) != [3, s, s] {
            return Err(Error::shape(format!(
                "segnet expects a [3, {s}, {s}] input, got {:?}",
                tape.shape(input)
            )));
        }
        let x = self.stem.apply(tape, store, input)?;
        let mut x = tape.relu(x);
        let mut skips = Vec::with_capacity(self.down.len());
        for layer in &self.down {
            skips.push(x);
            let y = layer.apply(tape, store, x)?;
            x = tape.relu(y);
        }
        for layer in &self.up {
            let skip = skips.pop().expect("one skip per level");
            let mut y = tape.upsample_nearest(x, 2)?;
            if self.config.skip_connections {
                y = tape.concat(&[y, skip], 0)?;
            }
            let y = layer.apply(tape, store, y)?;
            x = tape.relu(y);
        }
        let logits = self.head.apply(tape, store, x)?;
        tape.reshape(logits, &[s, s])
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
        let config: SegNetConfig = serde_json::from_value(ck.header.topology.clone())
            .map_err(|e| Error::Format(format!("segnet topology: {e}")))?;
        let mut model = build_segnet(&config, ck.header.seed)?;
        model.params.load_values_from(&ck.params)?;
        Ok(model)
    }
}

fn check_frame(model: &SegModel, frame: &RgbFrame) -> Result<()> {
    let s = model.config.input_size;
    if frame.width() != s || frame.height() != s {
        return Err(Error::shape(format!(
            "segnet expects {s}x{s} frames, got {}x{}",
            frame.width(),
            frame.height()
        )));
    }
    Ok(())
}

/// `[H, W]` logits for one frame.
pub fn forward_segment(model: &SegModel, frame: &RgbFrame) -> Result<Tensor> {
    check_frame(model, frame)?;
    let mut tape = Tape::new();
    let x = tape.constant(frame.to_tensor());
    let y = model.forward(&mut tape, &model.params, x)?;
    Ok(tape.value(y).clone())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn predict_soft(model: &SegModel, frame: &RgbFrame) -> Result<SoftMask> {
    let logits = forward_segment(model, frame)?;
    let s = model.config.input_size;
    SoftMask::new(s, s, logits.data().iter().map(|&v| sigmoid(v)).collect())
}

/// Foreground wherever `sigmoid(logit) >= threshold`.
pub fn predict_mask(model: &SegModel, frame: &RgbFrame, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Domain(format!("threshold {threshold} outside (0, 1)")));
    }
    Ok(predict_soft(model, frame)?.threshold(threshold))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SegHistory {
    pub epochs: Vec<SegEpoch>,
    /// 1-based epoch whose weights the model holds after training.
    pub best_epoch: Option<usize>,
}

/// Mean per-image IoU of thresholded predictions.
pub fn mean_iou(model: &SegModel, data: &[(&RgbFrame, &BinaryMask)], exec: Execution) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::config("cannot score an empty image set"));
    }
    let scores = parallel::map(exec, data, |(f, m)| metrics::iou(&predict_mask(model, f, 0.5)?, m));
    let mut sum = 0.0;
    for s in scores {
        sum += s?;
    }
    Ok(sum / data.len() as f64)
}

/// Adam on mean per-pixel BCE. After training the model holds the weights of
/// the epoch with the highest validation IoU (earliest on ties).
pub fn train_segnet(
    model: &mut SegModel,
    train: &[(&RgbFrame, &BinaryMask)],
    val: &[(&RgbFrame, &BinaryMask)],
    cfg: &SegTrainConfig,
) -> Result<SegHistory> {
    if train.is_empty() {
        return Err(Error::config("segnet training set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    for (f, m) in train.iter().chain(val) {
        check_frame(model, f)?;
        if m.width() != f.width() || m.height() != f.height() {
            return Err(Error::shape("mask and frame sizes differ"));
        }
    }
    let mut history = SegHistory::default();
    if cfg.epochs == 0 {
        return Ok(history);
    }
    let mut opt = Optimizer::adam(cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let inputs: Vec<Tensor> = train.iter().map(|(f, _)| f.to_tensor()).collect();
    let targets: Vec<Tensor> = train.iter().map(|(_, m)| m.to_tensor()).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, ParamStore)> = None;
    model.params.zero_grad();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            for &i in batch {
                let mut tape = Tape::new();
                let x = tape.constant(inputs[i].clone());
                let logits = model.forward(&mut tape, &model.params, x)?;
                let bce = tape.bce_with_logits(logits, &targets[i])?;
                total += tape.value(bce).item();
                let loss = tape.scale(bce, 1.0 / batch.len() as f64);
                tape.backward(loss, &mut model.params)?;
            }
            opt.step(&mut model.params)?;
        }
        let val_iou = if val.is_empty() {
            mean_iou(model, train, Execution::Parallel)?
        } else {
            mean_iou(model, val, Execution::Parallel)?
        };
        history.epochs.push(SegEpoch {
            epoch,
            train_loss: total / train.len() as f64,
            val_iou,
        });
        if best.as_ref().is_none_or(|(b, _)| val_iou > *b) {
            best = Some((val_iou, model.params.clone()));
            history.best_epoch = Some(epoch);
        }
    }
    if let Some((_, params)) = best {
        model.params.load_values_from(&params)?;
    }
    model.params.zero_grad();
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradient_check;

    fn tiny(skip: bool) -> SegNetConfig {
        SegNetConfig {
            base_channels: 2,
            depth: 2,
            skip_connections: skip,
            input_size: 8,
        }
    }

    fn frame(s: usize, seed: u8) -> RgbFrame {
        let data = (0..s * s * 3)
            .map(|i| ((i * 37 + seed as usize * 11) % 256) as u8)
            .collect();
        RgbFrame::new(s, s, data).unwrap()
    }

    #[test]
    fn bottleneck_and_channels() {
        let cfg = SegNetConfig::default();
        assert_eq!(cfg.bottleneck_size(), 32);
        let plain = SegNetConfig {
            skip_connections: false,
            ..cfg.clone()
        };
        let with: usize = cfg.decoder_input_channels().iter().sum();
        let without: usize = plain.decoder_input_channels().iter().sum();
        assert!(without < with);
        assert!(cfg
            .decoder_input_channels()
            .iter()
            .zip(plain.decoder_input_channels())
            .all(|(a, b)| b < *a));
    }

    #[test]
    fn rejects_indivisible_size() {
        let cfg = SegNetConfig {
            input_size: 100,
            ..SegNetConfig::default()
        };
        assert!(matches!(build_segnet(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_segnet(&tiny(true), 5).unwrap();
        let b = build_segnet(&tiny(true), 5).unwrap();
        assert_eq!(a.params, b.params);
        let c = build_segnet(&tiny(true), 6).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn output_shape_and_zero_params() {
        for skip in [true, false] {
            let mut m = build_segnet(&tiny(skip), 1).unwrap();
            let y = forward_segment(&m, &frame(8, 1)).unwrap();
            assert_eq!(y.shape(), &[8, 8]);
            m.params.fill_zero();
            let y = forward_segment(&m, &frame(8, 1)).unwrap();
            assert!(y.data().iter().all(|&v| v == 0.0));
            let soft = predict_soft(&m, &frame(8, 1)).unwrap();
            assert!(soft.values().iter().all(|&v| v == 0.5));
            assert_eq!(predict_mask(&m, &frame(8, 1), 0.5).unwrap().count(), 64);
        }
        let m = build_segnet(&tiny(true), 1).unwrap();
        assert!(matches!(forward_segment(&m, &frame(16, 1)), Err(Error::Shape(_))));
    }

    #[test]
    fn saturated_logits_and_threshold_domain() {
        let mut m = build_segnet(&tiny(true), 1).unwrap();
        m.params.fill_zero();
        let head_bias = m.params.find("head.bias").unwrap();
        m.params.get_mut(head_bias).value.data_mut()[0] = 10.0;
        assert_eq!(predict_mask(&m, &frame(8, 2), 0.5).unwrap().count(), 64);
        assert!(matches!(predict_mask(&m, &frame(8, 2), 1.0), Err(Error::Domain(_))));
        assert!(matches!(predict_mask(&m, &frame(8, 2), 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn mask_count_matches_pixel_scan() {
        let m = build_segnet(&tiny(true), 3).unwrap();
        let f = frame(8, 9);
        let logits = forward_segment(&m, &f).unwrap();
        for t in [0.3, 0.5, 0.7] {
            let expected = logits.data().iter().filter(|&&l| 1.0 / (1.0 + (-l).exp()) >= t).count();
            assert_eq!(predict_mask(&m, &f, t).unwrap().count(), expected);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for skip in [true, false] {
            let cfg = SegNetConfig {
                base_channels: 2,
                depth: 2,
                skip_connections: skip,
                input_size: 16,
            };
            let mut m = build_segnet(&cfg, 4).unwrap();
            let x = frame(16, 4).to_tensor();
            let gt = BinaryMask::from_fn(16, 16, |x, y| x + y < 14).to_tensor();
            let model = m.clone();
            let report = gradient_check(&mut m.params, 1e-5, |tape, store| {
                let input = tape.constant(x.clone());
                let logits = model.forward(tape, store, input)?;
                tape.bce_with_logits(logits, &gt)
            })
            .unwrap();
            assert!(report.max_relative_error < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn zero_epochs_is_noop() {
        let mut m = build_segnet(&tiny(true), 1).unwrap();
        let before = m.params.clone();
        let f = frame(8, 1);
        let mask = BinaryMask::full(8, 8);
        let data = vec![(&f, &mask)];
        let cfg = SegTrainConfig {
            epochs: 0,
            ..SegTrainConfig::default()
        };
        let h = train_segnet(&mut m, &data, &data, &cfg).unwrap();
        assert!(h.epochs.is_empty());
        assert_eq!(m.params, before);
        assert!(matches!(train_segnet(&mut m, &[], &data, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn learns_uniform_orange_frame() {
        let mut m = build_segnet(&tiny(true), 2).unwrap();
        let f = RgbFrame::filled(8, 8, [235, 140, 30]);
        let mask = BinaryMask::full(8, 8);
        let data = vec![(&f, &mask); 4];
        let cfg = SegTrainConfig {
            epochs: 10,
            batch_size: 2,
            lr: 1e-2,
            seed: 0,
        };
        let h = train_segnet(&mut m, &data, &data, &cfg).unwrap();
        assert_eq!(h.epochs.len(), 10);
        assert!(h.epochs.iter().any(|e| e.val_iou > 0.99), "{h:?}");
        assert!(mean_iou(&m, &data, Execution::Sequential).unwrap() > 0.99);
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_roundtrip() {
        let f1 = frame(8, 1);
        let f2 = frame(8, 2);
        let m1 = BinaryMask::from_fn(8, 8, |x, _| x < 4);
        let m2 = BinaryMask::from_fn(8, 8, |_, y| y < 3);
        let data = vec![(&f1, &m1), (&f2, &m2)];
        let cfg = SegTrainConfig {
            epochs: 3,
            batch_size: 2,
            lr: 1e-2,
            seed: 9,
        };
        let run = || {
            let mut m = build_segnet(&tiny(true), 7).unwrap();
            let h = train_segnet(&mut m, &data, &data, &cfg).unwrap();
            (m, h)
        };
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(ha, hb);
        assert_eq!(a.to_checkpoint().to_bytes(), b.to_checkpoint().to_bytes());
        let back = SegModel::from_checkpoint(&Checkpoint::from_bytes(&a.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.params, a.params);
    }
}
