//! Deterministic synthetic orchard videos.
//!
//! Each clip shows orange fruit disks with a radial shading gradient on a
//! textured green canopy, drifting and swaying under slowly varying light,
//! with dark leaves drawn over them. Some fruit is unripe and close in colour
//! to sunlit canopy, and every frame carries fresh sensor noise. Ground
//! truth marks the visible fruit pixels only. Everything is a pure function
//! of the configuration and seed.

use crate::error::{Error, Result};
use crate::image::{BinaryMask, RgbFrame};
use crate::parallel::{self, Execution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const FRAME_RATE: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// `[width, height]` in pixels.
    pub image_size: [usize; 2],
    /// Inclusive range of fruit count per clip, within `[1, 6]`.
    pub n_fruits: [usize; 2],
    /// Inclusive range of fruit radius in pixels.
    pub fruit_radius: [f64; 2],
    /// Approximate fraction of the frame covered by leaves.
    pub occluder_density: f64,
    /// Upper bound on per-frame displacement of any fruit or leaf, pixels.
    pub motion_amplitude: f64,
    /// Brightness varies within `1 ± lighting_drift`.
    pub lighting_drift: f64,
    /// Fraction of yellow-green light patches on the canopy (0 disables).
    pub background_clutter: f64,
    /// Probability that a fruit is unripe, i.e. yellow-green like the lit canopy.
    pub unripe_fraction: f64,
    /// Standard deviation of per-frame Gaussian pixel noise, intensity units.
    pub sensor_noise: f64,
    pub clip_length: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: [256, 256],
            n_fruits: [1, 4],
            fruit_radius: [18.0, 34.0],
            occluder_density: 0.08,
            motion_amplitude: 2.0,
            lighting_drift: 0.15,
            background_clutter: 0.5,
            unripe_fraction: 0.3,
            sensor_noise: 6.0,
            clip_length: 30,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn width(&self) -> usize {
        self.image_size[0]
    }

    pub fn height(&self) -> usize {
        self.image_size[1]
    }

    pub fn validate(&self) -> Result<()> {
        let [w, h] = self.image_size;
        if w == 0 || h == 0 {
            return Err(Error::config("image_size must be positive"));
        }
        let [lo, hi] = self.n_fruits;
        if lo < 1 || hi > 6 || lo > hi {
            return Err(Error::config(format!(
                "n_fruits range [{lo}, {hi}] must lie within [1, 6]"
            )));
        }
        let [rlo, rhi] = self.fruit_radius;
        if !(rlo > 0.0) || rlo > rhi {
            return Err(Error::config(format!("fruit_radius range [{rlo}, {rhi}] is empty")));
        }
        if 2.0 * rhi > w.min(h) as f64 {
            return Err(Error::config(format!(
                "fruit of radius {rhi} cannot fit inside a {w}x{h} frame"
            )));
        }
        if !(0.0..=1.0).contains(&self.occluder_density) {
            return Err(Error::config("occluder_density must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.background_clutter) {
            return Err(Error::config("background_clutter must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.unripe_fraction) {
            return Err(Error::config("unripe_fraction must be in [0, 1]"));
        }
        if !(self.sensor_noise >= 0.0 && self.sensor_noise.is_finite()) {
            return Err(Error::config("sensor_noise must be a finite value >= 0"));
        }
        if !(self.motion_amplitude >= 0.0) {
            return Err(Error::config("motion_amplitude must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.lighting_drift) {
            return Err(Error::config("lighting_drift must be in [0, 1)"));
        }
        if self.clip_length < 2 {
            return Err(Error::config("clip_length must be at least 2"));
        }
        Ok(())
    }
}

/// Position and size of one fruit in one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FruitState {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub id: String,
    pub frames: Vec<RgbFrame>,
    pub gt_masks: Option<Vec<BinaryMask>>,
    pub frame_rate: f64,
    /// `tracks[t][i]` is fruit `i` in frame `t`; empty for clips read from disk.
    pub tracks: Vec<Vec<FruitState>>,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, |f| f.width())
    }

    pub fn height(&self) -> usize {
        self.frames.first().map_or(0, |f| f.height())
    }

    pub fn masks(&self) -> Result<&[BinaryMask]> {
        self.gt_masks
            .as_deref()
            .ok_or_else(|| Error::config(format!("clip '{}' has no ground-truth masks", self.id)))
    }

    /// Keeps frames `0, stride, 2*stride, ...`.
    pub fn subsample(&self, stride: usize) -> Self {
        let pick = |i: &usize| i.is_multiple_of(stride.max(1));
        Self {
            id: self.id.clone(),
            frames: (0..self.len()).filter(pick).map(|i| self.frames[i].clone()).collect(),
            gt_masks: self
                .gt_masks
                .as_ref()
                .map(|m| (0..m.len()).filter(pick).map(|i| m[i].clone()).collect()),
            frame_rate: self.frame_rate / stride.max(1) as f64,
            tracks: (0..self.tracks.len())
                .filter(pick)
                .map(|i| self.tracks[i].clone())
                .collect(),
        }
    }

    pub fn truncate(&mut self, n: usize) {
        self.frames.truncate(n);
        if let Some(m) = &mut self.gt_masks {
            m.truncate(n);
        }
        self.tracks.truncate(n);
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (t, f) in self.frames.iter().enumerate() {
            f.save_png(&dir.join(frame_file(t)))?;
        }
        if let Some(masks) = &self.gt_masks {
            for (t, m) in masks.iter().enumerate() {
                m.save_png(&dir.join(mask_file(t)))?;
            }
        }
        Ok(())
    }

    /// Reads `frame_%05d.png` (and `mask_%05d.png` when present) from `dir`.
    pub fn read_from(dir: &Path, id: &str) -> Result<Self> {
        let mut frames = Vec::new();
        while dir.join(frame_file(frames.len())).exists() {
            frames.push(RgbFrame::load_png(&dir.join(frame_file(frames.len())))?);
        }
        if frames.is_empty() {
            return Err(Error::io(
                dir.join(frame_file(0)),
                std::io::Error::new(std::io::ErrorKind::NotFound, "no frames in clip directory"),
            ));
        }
        let gt_masks = if dir.join(mask_file(0)).exists() {
            Some(
                (0..frames.len())
                    .map(|t| BinaryMask::load_png(&dir.join(mask_file(t))))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(Self {
            id: id.to_string(),
            frames,
            gt_masks,
            frame_rate: FRAME_RATE,
            tracks: Vec::new(),
        })
    }
}

pub fn frame_file(t: usize) -> String {
    format!("frame_{t:05}.png")
}

pub fn mask_file(t: usize) -> String {
    format!("mask_{t:05}.png")
}

struct Fruit {
    start: [f64; 2],
    drift: [f64; 2],
    sway: [f64; 2],
    omega: f64,
    phase: f64,
    radius: f64,
    color: [f64; 3],
}

impl Fruit {
    fn at(&self, t: f64, w: f64, h: f64) -> FruitState {
        let s = (self.omega * t + self.phase).sin() - self.phase.sin();
        let cx = self.start[0] + self.drift[0] * t + self.sway[0] * s;
        let cy = self.start[1] + self.drift[1] * t + self.sway[1] * s;
        FruitState {
            cx: cx.clamp(self.radius, w - self.radius),
            cy: cy.clamp(self.radius, h - self.radius),
            radius: self.radius,
        }
    }
}

struct Leaf {
    center: [f64; 2],
    sway: [f64; 2],
    omega: f64,
    phase: f64,
    axes: [f64; 2],
    angle: f64,
    color: [f64; 3],
}

impl Leaf {
    fn covers(&self, x: f64, y: f64, t: f64) -> bool {
        let s = (self.omega * t + self.phase).sin() - self.phase.sin();
        let dx = x - (self.center[0] + self.sway[0] * s);
        let dy = y - (self.center[1] + self.sway[1] * s);
        let (sn, cs) = self.angle.sin_cos();
        let u = dx * cs + dy * sn;
        let v = -dx * sn + dy * cs;
        (u / self.axes[0]).powi(2) + (v / self.axes[1]).powi(2) <= 1.0
    }
}

/// Random vector of length `<= max_len`.
fn random_vec(rng: &mut ChaCha8Rng, max_len: f64) -> [f64; 2] {
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    let r = rng.random_range(0.0..=1.0) * max_len;
    [r * a.cos(), r * a.sin()]
}

/// Smooth value noise in [0, 1]: random lattice values, bilinear interpolation.
fn value_noise(rng: &mut ChaCha8Rng, w: usize, h: usize, cell: usize) -> Vec<f64> {
    let gw = w / cell + 2;
    let gh = h / cell + 2;
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let fy = y as f64 / cell as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let v = |xx: usize, yy: usize| lattice[yy * gw + xx];
            let top = v(x0, y0) * (1.0 - tx) + v(x0 + 1, y0) * tx;
            let bot = v(x0, y0 + 1) * (1.0 - tx) + v(x0 + 1, y0 + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Renders one clip. Identical configs yield bit-identical clips.
pub fn generate_clip(config: &SceneConfig) -> Result<VideoClip> {
    config.validate()?;
    generate_clip_unchecked(config, &format!("clip_{:016x}", config.seed))
}

fn generate_clip_unchecked(config: &SceneConfig, id: &str) -> Result<VideoClip> {
    let (w, h) = (config.width(), config.height());
    let (wf, hf) = (w as f64, h as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let m = config.motion_amplitude;

    // Canopy texture, fixed for the clip.
    let cell = (w.min(h) / 12).max(3);
    let coarse = value_noise(&mut rng, w, h, cell);
    let fine = value_noise(&mut rng, w, h, (cell / 4).max(1));
    let clutter_noise = value_noise(&mut rng, w, h, (cell * 2).max(4));
    let base_green = [
        rng.random_range(35.0..60.0),
        rng.random_range(95.0..125.0),
        rng.random_range(30.0..55.0),
    ];
    let clutter_cut = 1.0 - 0.35 * config.background_clutter;
    let background: Vec<[f64; 3]> = (0..w * h)
        .map(|i| {
            let shade = 0.65 + 0.45 * coarse[i] + 0.2 * (fine[i] - 0.5);
            let mut c = base_green.map(|v| v * shade);
            if config.background_clutter > 0.0 && clutter_noise[i] > clutter_cut {
                // sunlit leaf patch, yellow-green
                let k = ((clutter_noise[i] - clutter_cut) / (1.0 - clutter_cut)).min(1.0);
                let lit = [170.0, 185.0, 70.0];
                for ch in 0..3 {
                    c[ch] = c[ch] * (1.0 - 0.8 * k) + lit[ch] * 0.8 * k;
                }
            }
            c
        })
        .collect();

    let n_fruits = rng.random_range(config.n_fruits[0]..=config.n_fruits[1]);
    let fruits: Vec<Fruit> = (0..n_fruits)
        .map(|_| {
            let radius = rng.random_range(config.fruit_radius[0]..=config.fruit_radius[1]);
            let omega = rng.random_range(0.1..0.4);
            let sway_len = rng.random_range(0.0..=1.0) * 0.5 * m / omega;
            Fruit {
                start: [
                    rng.random_range(radius..=wf - radius),
                    rng.random_range(radius..=hf - radius),
                ],
                drift: random_vec(&mut rng, 0.5 * m),
                sway: random_vec(&mut rng, sway_len),
                omega,
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                radius,
                color: if rng.random_bool(config.unripe_fraction) {
                    [
                        rng.random_range(140.0..185.0),
                        rng.random_range(165.0..200.0),
                        rng.random_range(35.0..75.0),
                    ]
                } else {
                    [
                        rng.random_range(215.0..250.0),
                        rng.random_range(115.0..175.0),
                        rng.random_range(15.0..50.0),
                    ]
                },
            }
        })
        .collect();

    let leaf_a = 0.8 * config.fruit_radius[1];
    let leaf_b = 0.35 * config.fruit_radius[1];
    let leaf_area = std::f64::consts::PI * leaf_a * leaf_b;
    let n_leaves = (config.occluder_density * wf * hf / leaf_area).round() as usize;
    let leaves: Vec<Leaf> = (0..n_leaves)
        .map(|_| {
            let omega = rng.random_range(0.1..0.5);
            Leaf {
                center: [rng.random_range(0.0..wf), rng.random_range(0.0..hf)],
                sway: random_vec(&mut rng, m / omega),
                omega,
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                axes: [
                    leaf_a * rng.random_range(0.6..=1.0),
                    leaf_b * rng.random_range(0.6..=1.0),
                ],
                angle: rng.random_range(0.0..std::f64::consts::PI),
                color: [
                    rng.random_range(15.0..35.0),
                    rng.random_range(55.0..85.0),
                    rng.random_range(15.0..35.0),
                ],
            }
        })
        .collect();

    let light_omega = rng.random_range(0.05..0.2);
    let light_phase = rng.random_range(0.0..std::f64::consts::TAU);

    let noise = Normal::new(0.0, config.sensor_noise).map_err(|e| Error::config(format!("sensor_noise: {e}")))?;
    let mut frames = Vec::with_capacity(config.clip_length);
    let mut masks = Vec::with_capacity(config.clip_length);
    let mut tracks = Vec::with_capacity(config.clip_length);
    for t in 0..config.clip_length {
        let tf = t as f64;
        let states: Vec<FruitState> = fruits.iter().map(|f| f.at(tf, wf, hf)).collect();
        let brightness = 1.0 + config.lighting_drift * ((light_omega * tf + light_phase).sin() - light_phase.sin());
        let mut data = Vec::with_capacity(w * h * 3);
        let mut mask = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut color = background[y * w + x];
                let mut is_fruit = false;
                for (f, s) in fruits.iter().zip(&states) {
                    let d2 = (px - s.cx).powi(2) + (py - s.cy).powi(2);
                    if d2 <= s.radius * s.radius {
                        let shade = 1.0 - 0.35 * d2 / (s.radius * s.radius);
                        color = f.color.map(|c| c * shade);
                        is_fruit = true;
                    }
                }
                if let Some(leaf) = leaves.iter().rev().find(|l| l.covers(px, py, tf)) {
                    color = leaf.color;
                    is_fruit = false;
                }
                for c in color {
                    let n = if config.sensor_noise > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    data.push((c * brightness + n).round().clamp(0.0, 255.0) as u8);
                }
                mask.push(is_fruit as u8);
            }
        }
        frames.push(RgbFrame::new(w, h, data)?);
        masks.push(BinaryMask::new(w, h, mask)?);
        tracks.push(states);
    }
    Ok(VideoClip {
        id: id.to_string(),
        frames,
        gt_masks: Some(masks),
        frame_rate: FRAME_RATE,
        tracks,
    })
}

/// Split sizes, scaled from full-size counts by an integer divisor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub n_train_images: usize,
    pub n_val_images: usize,
    pub n_unlabelled_clips: usize,
    pub n_test_clips: usize,
    pub divisor: usize,
    pub frame_stride: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            n_train_images: 1200,
            n_val_images: 313,
            n_unlabelled_clips: 240,
            n_test_clips: 20,
            divisor: 10,
            frame_stride: 5,
        }
    }
}

impl SplitSizes {
    /// `(train images, val images, unlabelled clips, test clips)` after
    /// dividing, never below one.
    pub fn scaled(&self) -> Result<(usize, usize, usize, usize)> {
        if self.divisor == 0 {
            return Err(Error::config("split divisor must be positive"));
        }
        let d = |n: usize| (n / self.divisor).max(1);
        Ok((
            d(self.n_train_images),
            d(self.n_val_images),
            d(self.n_unlabelled_clips),
            d(self.n_test_clips),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Unlabelled,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 4] = [SplitName::Train, SplitName::Val, SplitName::Unlabelled, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Unlabelled => "unlabelled",
            SplitName::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

/// All clips are stored at the full frame rate. Train and val clips supply
/// labelled images every `frame_stride` frames; test clips are labelled on
/// every frame; unlabelled clips carry no masks.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: Vec<VideoClip>,
    pub val: Vec<VideoClip>,
    pub unlabelled: Vec<VideoClip>,
    pub test: Vec<VideoClip>,
    pub frame_stride: usize,
}

impl DatasetSplits {
    pub fn split(&self, name: SplitName) -> &[VideoClip] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Unlabelled => &self.unlabelled,
            SplitName::Test => &self.test,
        }
    }

    /// Labelled images of a split: every `frame_stride`-th frame of train
    /// and val clips, every frame of test clips.
    pub fn images(&self, name: SplitName) -> Result<Vec<(&RgbFrame, &BinaryMask)>> {
        let stride = if name == SplitName::Test { 1 } else { self.frame_stride };
        sampled_images(self.split(name), stride)
    }

    pub fn n_images(&self, name: SplitName) -> usize {
        self.images(name).map_or(0, |v| v.len())
    }
}

/// Frame/mask pairs at frames `0, stride, 2*stride, ...` of each clip.
pub fn sampled_images(clips: &[VideoClip], stride: usize) -> Result<Vec<(&RgbFrame, &BinaryMask)>> {
    let mut out = Vec::new();
    for clip in clips {
        let masks = clip.masks()?;
        out.extend(clip.frames.iter().zip(masks).step_by(stride.max(1)));
    }
    Ok(out)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of clip `index` in `split`, derived from the master seed.
pub fn clip_seed(master: u64, split: SplitName, index: usize) -> u64 {
    splitmix64(splitmix64(master ^ split.tag().wrapping_mul(0xA24B_AED4_963E_E407)) ^ index as u64)
}

pub fn clip_id(split: SplitName, index: usize) -> String {
    format!("{}_{index:04}", split.as_str())
}

#[derive(Debug, Clone, PartialEq)]
struct ClipPlan {
    split: SplitName,
    index: usize,
    seed: u64,
    keep: usize,
}

/// Builds all four splits. Train and val hold just enough clips to supply
/// the requested number of images at one per `frame_stride` frames; no clip
/// contributes to more than one split.
pub fn generate_dataset(scene: &SceneConfig, sizes: &SplitSizes) -> Result<DatasetSplits> {
    generate_dataset_with(scene, sizes, Execution::Parallel)
}

pub fn generate_dataset_with(scene: &SceneConfig, sizes: &SplitSizes, exec: Execution) -> Result<DatasetSplits> {
    scene.validate()?;
    let plans = plan_dataset(scene, sizes)?;
    let clips = parallel::map(exec, &plans, |p| {
        let cfg = SceneConfig {
            seed: p.seed,
            ..scene.clone()
        };
        let mut clip = generate_clip_unchecked(&cfg, &clip_id(p.split, p.index))?;
        if p.split == SplitName::Unlabelled {
            clip.gt_masks = None;
        }
        clip.truncate(p.keep);
        Ok((p.split, clip))
    });
    let mut out = DatasetSplits {
        train: Vec::new(),
        val: Vec::new(),
        unlabelled: Vec::new(),
        test: Vec::new(),
        frame_stride: sizes.frame_stride,
    };
    for r in clips {
        let (split, clip) = r?;
        match split {
            SplitName::Train => out.train.push(clip),
            SplitName::Val => out.val.push(clip),
            SplitName::Unlabelled => out.unlabelled.push(clip),
            SplitName::Test => out.test.push(clip),
        }
    }
    Ok(out)
}

fn plan_dataset(scene: &SceneConfig, sizes: &SplitSizes) -> Result<Vec<ClipPlan>> {
    if sizes.frame_stride == 0 {
        return Err(Error::config("frame_stride must be positive"));
    }
    let (n_train, n_val, n_unlab, n_test) = sizes.scaled()?;
    let per_clip = scene.clip_length.div_ceil(sizes.frame_stride);
    if per_clip < 2 {
        return Err(Error::config(format!(
            "clip_length {} with frame_stride {} yields {per_clip} labelled frame(s) per clip; at least 2 are needed",
            scene.clip_length, sizes.frame_stride
        )));
    }
    let mut plans = Vec::new();
    let mut labelled = |split: SplitName, n_images: usize| {
        let n_clips = n_images.div_ceil(per_clip);
        for i in 0..n_clips {
            let images = (n_images - i * per_clip).min(per_clip);
            let keep = (images - 1) * sizes.frame_stride + 1;
            plans.push(ClipPlan {
                split,
                index: i,
                seed: clip_seed(scene.seed, split, i),
                keep,
            });
        }
    };
    labelled(SplitName::Train, n_train);
    labelled(SplitName::Val, n_val);
    for i in 0..n_unlab {
        plans.push(ClipPlan {
            split: SplitName::Unlabelled,
            index: i,
            seed: clip_seed(scene.seed, SplitName::Unlabelled, i),
            keep: scene.clip_length,
        });
    }
    for i in 0..n_test {
        plans.push(ClipPlan {
            split: SplitName::Test,
            index: i,
            seed: clip_seed(scene.seed, SplitName::Test, i),
            keep: scene.clip_length,
        });
    }
    Ok(plans)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestClip {
    pub id: String,
    pub seed: u64,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSplit {
    pub name: SplitName,
    pub labelled: bool,
    pub clips: Vec<ManifestClip>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub scene: SceneConfig,
    pub sizes: SplitSizes,
    pub splits: Vec<ManifestSplit>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn describe(scene: &SceneConfig, sizes: &SplitSizes, data: &DatasetSplits) -> Self {
        let splits = SplitName::ALL
            .iter()
            .map(|&name| ManifestSplit {
                name,
                labelled: name != SplitName::Unlabelled,
                clips: data
                    .split(name)
                    .iter()
                    .enumerate()
                    .map(|(i, c)| ManifestClip {
                        id: c.id.clone(),
                        seed: clip_seed(scene.seed, name, i),
                        frames: c.len(),
                    })
                    .collect(),
            })
            .collect();
        Self {
            seed: scene.seed,
            scene: scene.clone(),
            sizes: sizes.clone(),
            splits,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn clip_dir(root: &Path, split: SplitName, id: &str) -> PathBuf {
        root.join(split.as_str()).join(id)
    }
}

/// Writes every split in the on-disk layout plus `manifest.json`.
pub fn write_dataset(root: &Path, scene: &SceneConfig, sizes: &SplitSizes, data: &DatasetSplits) -> Result<Manifest> {
    for name in SplitName::ALL {
        for clip in data.split(name) {
            clip.write_to(&Manifest::clip_dir(root, name, &clip.id))?;
        }
    }
    let manifest = Manifest::describe(scene, sizes, data);
    let path = root.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads one split back from disk.
pub fn read_split(root: &Path, manifest: &Manifest, name: SplitName) -> Result<Vec<VideoClip>> {
    let split = manifest
        .splits
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::Format(format!("manifest has no '{}' split", name.as_str())))?;
    let ids: Vec<&ManifestClip> = split.clips.iter().collect();
    parallel::map(Execution::Parallel, &ids, |c| {
        VideoClip::read_from(&Manifest::clip_dir(root, name, &c.id), &c.id)
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> SceneConfig {
        SceneConfig {
            image_size: [48, 40],
            n_fruits: [1, 3],
            fruit_radius: [5.0, 9.0],
            clip_length: 12,
            seed: 11,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn static_scene_has_identical_frames() {
        let cfg = SceneConfig {
            motion_amplitude: 0.0,
            lighting_drift: 0.0,
            sensor_noise: 0.0,
            ..small()
        };
        let clip = generate_clip(&cfg).unwrap();
        let masks = clip.gt_masks.as_ref().unwrap();
        assert!(clip.frames.iter().all(|f| f == &clip.frames[0]));
        assert!(masks.iter().all(|m| m == &masks[0]));
    }

    #[test]
    fn rejects_zero_fruits_and_oversized_radius() {
        let cfg = SceneConfig {
            n_fruits: [0, 2],
            ..small()
        };
        assert!(matches!(generate_clip(&cfg), Err(Error::Config(_))));
        let cfg = SceneConfig {
            fruit_radius: [5.0, 30.0],
            ..small()
        };
        let err = generate_clip(&cfg).unwrap_err().to_string();
        assert!(err.contains("cannot fit"), "{err}");
        let cfg = SceneConfig {
            clip_length: 1,
            ..small()
        };
        assert!(generate_clip(&cfg).is_err());
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_clip(&small()).unwrap();
        let b = generate_clip(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_clip(&SceneConfig { seed: 12, ..small() }).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn default_split_counts() {
        let (a, b, c, d) = SplitSizes::default().scaled().unwrap();
        assert_eq!((a, b, c, d), (120, 31, 24, 2));
    }

    #[test]
    fn stride_five_on_thirty_frames_gives_six() {
        let clip = generate_clip(&SceneConfig {
            clip_length: 30,
            ..small()
        })
        .unwrap();
        assert_eq!(clip.subsample(5).len(), 6);
    }

    #[test]
    fn dataset_counts_and_short_clip_error() {
        let scene = small();
        let sizes = SplitSizes {
            n_train_images: 7,
            n_val_images: 3,
            n_unlabelled_clips: 2,
            n_test_clips: 1,
            divisor: 1,
            frame_stride: 4,
        };
        let data = generate_dataset(&scene, &sizes).unwrap();
        assert_eq!(data.n_images(SplitName::Train), 7);
        assert_eq!(data.n_images(SplitName::Val), 3);
        assert_eq!(data.train.len(), 3);
        assert_eq!(data.train[2].len(), 1);
        assert_eq!(data.val[0].len(), 9);
        assert_eq!(data.unlabelled.len(), 2);
        assert!(data.unlabelled.iter().all(|c| c.gt_masks.is_none() && c.len() == 12));
        assert_eq!(data.test[0].len(), 12);
        assert_eq!(data.n_images(SplitName::Test), 12);

        let short = SplitSizes {
            frame_stride: 12,
            ..sizes
        };
        assert!(matches!(generate_dataset(&scene, &short), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_disk_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let scene = small();
        let sizes = SplitSizes {
            n_train_images: 3,
            n_val_images: 3,
            n_unlabelled_clips: 1,
            n_test_clips: 1,
            divisor: 1,
            frame_stride: 4,
        };
        let data = generate_dataset(&scene, &sizes).unwrap();
        let manifest = write_dataset(dir.path(), &scene, &sizes, &data).unwrap();
        assert_eq!(Manifest::load(dir.path()).unwrap(), manifest);
        let test = read_split(dir.path(), &manifest, SplitName::Test).unwrap();
        assert_eq!(test[0].frames, data.test[0].frames);
        assert_eq!(test[0].gt_masks, data.test[0].gt_masks);
        let unl = read_split(dir.path(), &manifest, SplitName::Unlabelled).unwrap();
        assert!(unl[0].gt_masks.is_none());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn splits_are_disjoint_by_clip(seed: u64) {
            let scene = SceneConfig { seed, clip_length: 8, image_size: [24, 24], fruit_radius: [3.0, 5.0], ..SceneConfig::default() };
            let sizes = SplitSizes { n_train_images: 9, n_val_images: 5, n_unlabelled_clips: 3, n_test_clips: 2, divisor: 1, frame_stride: 2 };
            let plans = plan_dataset(&scene, &sizes).unwrap();
            let mut seeds: Vec<u64> = plans.iter().map(|p| p.seed).collect();
            let mut ids: Vec<String> = plans.iter().map(|p| clip_id(p.split, p.index)).collect();
            seeds.sort_unstable();
            seeds.dedup();
            ids.sort();
            ids.dedup();
            prop_assert_eq!(seeds.len(), plans.len());
            prop_assert_eq!(ids.len(), plans.len());
        }

        #[test]
        fn masks_lie_inside_fruit_disks_and_motion_is_bounded(seed: u64, amp in 0.0f64..4.0) {
            let cfg = SceneConfig { seed, motion_amplitude: amp, ..small() };
            let clip = generate_clip(&cfg).unwrap();
            for (mask, states) in clip.gt_masks.as_ref().unwrap().iter().zip(&clip.tracks) {
                for y in 0..mask.height() {
                    for x in 0..mask.width() {
                        if mask.get(x, y) {
                            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                            prop_assert!(states.iter().any(|s| (px - s.cx).powi(2) + (py - s.cy).powi(2) <= s.radius * s.radius));
                        }
                    }
                }
            }
            for pair in clip.tracks.windows(2) {
                for (a, b) in pair[0].iter().zip(&pair[1]) {
                    let d = ((a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2)).sqrt();
                    prop_assert!(d <= amp + 1.0, "displacement {} > {}", d, amp + 1.0);
                }
            }
        }
    }
}
