//! Pipeline stages over an on-disk run directory.
//!
//! ```text
//! <output_dir>/config.json          resolved configuration
//! <output_dir>/data/                dataset layout + manifest.json
//! <output_dir>/models/<stage>.ckpt  checkpoints and <stage>_history.json
//! <output_dir>/predictions/<model>/<clip>/mask_%05d.png
//! <output_dir>/reports/             per-model JSON and comparison CSVs
//! ```

use crate::config::{ExperimentConfig, Stage};
use segfuse::cycletrack::{build_cycle, propagate_labels, train_cycle, CycleHistory, CycleModel};
use segfuse::fusion::{
    build_fusion, fuse_mask, train_fusion, train_fusion_selected, weighted_mean_baseline, FusionHistory, FusionModel,
    PredictionPair,
};
use segfuse::image::{BinaryMask, SoftMask};
use segfuse::metrics::{
    build_report, default_boundary_tolerance, jf_table, precision_iou_table, ClipEvaluation, MetricsReport,
};
use segfuse::parallel::{self, thread_limit_from_env, with_thread_limit, Execution};
use segfuse::segnet::{build_segnet, predict_soft, train_segnet, SegHistory, SegModel};
use segfuse::synthdata::{
    generate_dataset, mask_file, read_split, sampled_images, write_dataset, Manifest, SplitName, VideoClip,
    MANIFEST_FILE,
};
use segfuse::tensor::Checkpoint;
use segfuse::{Error, Result};
use serde::Serialize;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Binarisation threshold for soft predictions.
const THRESHOLD: f64 = 0.5;
/// Every this-many-th val clip is held out for fusion epoch selection.
const SELECTION_EVERY: usize = 5;

pub const COMPARISON_CSV: &str = "comparison.csv";
pub const ABLATION_CSV: &str = "fusion_ablation.csv";
pub const PROPAGATION_JF_CSV: &str = "propagation_jf.csv";

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStage {
    Seg,
    Cycle,
    Fusion,
}

impl TrainStage {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainStage::Seg => "segnet",
            TrainStage::Cycle => "cycle",
            TrainStage::Fusion => "fusion",
        }
    }

    fn command(self) -> &'static str {
        match self {
            TrainStage::Seg => "segfuse train seg",
            TrainStage::Cycle => "segfuse train cycle",
            TrainStage::Fusion => "segfuse train fusion",
        }
    }
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions")
    }

    pub fn checkpoint(&self, stage: TrainStage) -> PathBuf {
        self.models().join(format!("{}.ckpt", stage.as_str()))
    }

    pub fn history(&self, stage: TrainStage) -> PathBuf {
        self.models().join(format!("{}_history.json", stage.as_str()))
    }

    /// Entries `generate --force` removes before writing.
    fn owned_entries(&self) -> [PathBuf; 5] {
        [
            self.config(),
            self.data(),
            self.models(),
            self.reports(),
            self.predictions(),
        ]
    }
}

/// Models scored by `evaluate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EvalModel {
    Segnet,
    Unsupervised,
    WeightedMean,
    Fusion,
}

impl EvalModel {
    pub const ALL: [EvalModel; 4] = [
        EvalModel::Segnet,
        EvalModel::Unsupervised,
        EvalModel::WeightedMean,
        EvalModel::Fusion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalModel::Segnet => "segnet",
            EvalModel::Unsupervised => "unsupervised",
            EvalModel::WeightedMean => "weighted_mean",
            EvalModel::Fusion => "fusion",
        }
    }
}

impl fmt::Display for EvalModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EvalModel::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown model '{s}'; expected one of segnet, unsupervised, weighted_mean, fusion"
            ))
        })
    }
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        io(parent, std::fs::create_dir_all(parent))?;
    }
    io(path, std::fs::write(path, contents))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    write_file(path, text)
}

fn is_non_empty_dir(path: &Path) -> Result<bool> {
    match std::fs::read_dir(path) {
        Ok(mut entries) => Ok(entries.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Writes the dataset and the resolved config. Refuses a non-empty output
/// directory unless `force` is set, in which case earlier run artifacts are
/// removed first.
pub fn generate(cfg: &ExperimentConfig) -> Result<Manifest> {
    let layout = RunLayout::new(&cfg.output_dir);
    if is_non_empty_dir(&layout.root)? {
        if !cfg.force {
            return Err(Error::Config(format!(
                "output directory {} is not empty; pass --force to overwrite it",
                layout.root.display()
            )));
        }
        for entry in layout.owned_entries() {
            if entry.is_dir() {
                io(&entry, std::fs::remove_dir_all(&entry))?;
            } else if entry.exists() {
                io(&entry, std::fs::remove_file(&entry))?;
            }
        }
    }
    write_file(&layout.config(), cfg.to_json())?;
    let data = generate_dataset(&cfg.dataset.scene, &cfg.dataset.splits)?;
    let root = layout.data();
    io(&root, std::fs::create_dir_all(&root))?;
    write_dataset(&root, &cfg.dataset.scene, &cfg.dataset.splits, &data)
}

fn load_manifest(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<Manifest> {
    let path = layout.data().join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::MissingArtifact(format!(
            "missing dataset manifest {}; run `segfuse generate` first",
            path.display()
        )));
    }
    let manifest = Manifest::load(&layout.data())?;
    if manifest.scene != cfg.dataset.scene || manifest.sizes != cfg.dataset.splits {
        return Err(Error::Config(format!(
            "dataset at {} was generated from a different dataset config or seed; rerun `segfuse generate --force`",
            layout.data().display()
        )));
    }
    Ok(manifest)
}

fn load_clips(cfg: &ExperimentConfig, layout: &RunLayout, split: SplitName) -> Result<Vec<VideoClip>> {
    let manifest = load_manifest(cfg, layout)?;
    read_split(&layout.data(), &manifest, split)
}

fn load_checkpoint(layout: &RunLayout, stage: TrainStage) -> Result<Checkpoint> {
    let path = layout.checkpoint(stage);
    if !path.exists() {
        return Err(Error::MissingArtifact(format!(
            "missing {} checkpoint {}; run `{}` first",
            stage.as_str(),
            path.display(),
            stage.command()
        )));
    }
    Checkpoint::load(&path)
}

fn stale(layout: &RunLayout, stage: TrainStage, key: &str) -> Error {
    Error::Config(format!(
        "{} checkpoint {} was trained with a different {key}; rerun `{}`",
        stage.as_str(),
        layout.checkpoint(stage).display(),
        stage.command()
    ))
}

pub fn load_segnet(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<SegModel> {
    let model = SegModel::from_checkpoint(&load_checkpoint(layout, TrainStage::Seg)?)?;
    if model.config != cfg.segnet.model {
        return Err(stale(layout, TrainStage::Seg, "segnet.model"));
    }
    Ok(model)
}

pub fn load_cycle(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<CycleModel> {
    let model = CycleModel::from_checkpoint(&load_checkpoint(layout, TrainStage::Cycle)?)?;
    if model.config != cfg.cycle.model {
        return Err(stale(layout, TrainStage::Cycle, "cycle.model"));
    }
    Ok(model)
}

pub fn load_fusion(cfg: &ExperimentConfig, layout: &RunLayout) -> Result<FusionModel> {
    let model = FusionModel::from_checkpoint(&load_checkpoint(layout, TrainStage::Fusion)?)?;
    if model.config != cfg.fusion.model {
        return Err(stale(layout, TrainStage::Fusion, "fusion.model"));
    }
    Ok(model)
}

/// Trains segnet on sampled train images, selecting epochs on val images.
pub fn train_seg(cfg: &ExperimentConfig) -> Result<SegHistory> {
    let layout = RunLayout::new(&cfg.output_dir);
    let stride = cfg.dataset.splits.frame_stride;
    let train = load_clips(cfg, &layout, SplitName::Train)?;
    let val = load_clips(cfg, &layout, SplitName::Val)?;
    let mut model = build_segnet(&cfg.segnet.model, cfg.stage_seed(Stage::SegnetInit))?;
    let history = train_segnet(
        &mut model,
        &sampled_images(&train, stride)?,
        &sampled_images(&val, stride)?,
        &cfg.segnet.train,
    )?;
    model.to_checkpoint().save(&layout.checkpoint(TrainStage::Seg))?;
    write_json(&layout.history(TrainStage::Seg), &history)?;
    Ok(history)
}

/// Trains the tracker on the unlabelled clips.
pub fn train_cycle_stage(cfg: &ExperimentConfig) -> Result<CycleHistory> {
    let layout = RunLayout::new(&cfg.output_dir);
    let clips = load_clips(cfg, &layout, SplitName::Unlabelled)?;
    let mut model = build_cycle(&cfg.cycle.model, cfg.stage_seed(Stage::CycleInit))?;
    let history = train_cycle(&mut model, &clips, &cfg.cycle.train)?;
    model.to_checkpoint().save(&layout.checkpoint(TrainStage::Cycle))?;
    write_json(&layout.history(TrainStage::Cycle), &history)?;
    Ok(history)
}

/// Soft static and temporal predictions for every frame of a clip.
#[derive(Debug, Clone)]
pub struct ClipStreams {
    pub static_soft: Vec<SoftMask>,
    pub temporal_soft: Vec<SoftMask>,
    /// Mask that seeded propagation.
    pub first_mask: BinaryMask,
}

/// Runs segnet on every frame and propagates the first-frame mask, taken
/// from ground truth when `oracle_first_frame` is set and from the segnet
/// prediction otherwise.
pub fn clip_streams(
    seg: Option<&SegModel>,
    cycle: Option<&CycleModel>,
    clip: &VideoClip,
    oracle_first_frame: bool,
) -> Result<ClipStreams> {
    let static_soft = match seg {
        Some(m) => clip
            .frames
            .iter()
            .map(|f| predict_soft(m, f))
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    let first_mask = if oracle_first_frame {
        clip.masks()?[0].clone()
    } else {
        static_soft
            .first()
            .ok_or_else(|| Error::Contract("segnet predictions are needed to seed propagation".into()))?
            .threshold(THRESHOLD)
    };
    let temporal_soft = match cycle {
        Some(m) => propagate_labels(m, &first_mask.to_soft(), clip, m.config.top_k)?,
        None => Vec::new(),
    };
    Ok(ClipStreams {
        static_soft,
        temporal_soft,
        first_mask,
    })
}

/// Fusion inputs for frames `stride, 2 * stride, ...` of each clip, labelled
/// with ground truth. Both streams run over every frame.
pub fn fusion_pairs(
    seg: &SegModel,
    cycle: &CycleModel,
    clips: &[VideoClip],
    stride: usize,
    oracle_first_frame: bool,
) -> Result<Vec<PredictionPair>> {
    let stride = stride.max(1);
    let per_clip = parallel::map(Execution::Parallel, clips, |clip| -> Result<Vec<PredictionPair>> {
        let streams = clip_streams(Some(seg), Some(cycle), clip, oracle_first_frame)?;
        let gt = clip.masks()?;
        (stride..clip.len())
            .step_by(stride)
            .map(|t| {
                PredictionPair::new(
                    streams.static_soft[t].clone(),
                    streams.temporal_soft[t].clone(),
                    Some(gt[t].clone()),
                )
            })
            .collect()
    });
    let mut pairs = Vec::new();
    for p in per_clip {
        pairs.extend(p?);
    }
    Ok(pairs)
}

/// Trains fusion on prediction pairs at the labelled frames of the val
/// clips, holding out every `SELECTION_EVERY`-th clip (all frames) to pick
/// the epoch. Needs the segnet and cycle checkpoints.
pub fn train_fusion_stage(cfg: &ExperimentConfig) -> Result<FusionHistory> {
    let layout = RunLayout::new(&cfg.output_dir);
    let seg = load_segnet(cfg, &layout)?;
    let cycle = load_cycle(cfg, &layout)?;
    let val = load_clips(cfg, &layout, SplitName::Val)?;
    let (select, fit): (Vec<_>, Vec<_>) = val
        .into_iter()
        .enumerate()
        .partition(|(i, _)| i % SELECTION_EVERY == SELECTION_EVERY - 1);
    let strip = |v: Vec<(usize, VideoClip)>| v.into_iter().map(|(_, c)| c).collect::<Vec<_>>();
    let (select, fit) = (strip(select), strip(fit));
    let oracle = cfg.evaluation.oracle_first_frame;
    let pairs = fusion_pairs(&seg, &cycle, &fit, cfg.dataset.splits.frame_stride, oracle)?;
    let mut model = build_fusion(&cfg.fusion.model, cfg.stage_seed(Stage::FusionInit))?;
    let history = if select.is_empty() {
        train_fusion(&mut model, &pairs, &cfg.fusion.train)?
    } else {
        let select = fusion_pairs(&seg, &cycle, &select, 1, oracle)?;
        train_fusion_selected(&mut model, &pairs, &select, &cfg.fusion.train)?
    };
    model.to_checkpoint().save(&layout.checkpoint(TrainStage::Fusion))?;
    write_json(&layout.history(TrainStage::Fusion), &history)?;
    Ok(history)
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainOutcome {
    Seg(SegHistory),
    Cycle(CycleHistory),
    Fusion(FusionHistory),
}

pub fn train(cfg: &ExperimentConfig, stage: TrainStage) -> Result<TrainOutcome> {
    Ok(match stage {
        TrainStage::Seg => TrainOutcome::Seg(train_seg(cfg)?),
        TrainStage::Cycle => TrainOutcome::Cycle(train_cycle_stage(cfg)?),
        TrainStage::Fusion => TrainOutcome::Fusion(train_fusion_stage(cfg)?),
    })
}

/// Reports of one `evaluate` call, in canonical model order.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub reports: Vec<MetricsReport>,
}

impl Evaluation {
    pub fn report(&self, model: EvalModel) -> Option<&MetricsReport> {
        self.reports.iter().find(|r| r.model_name == model.as_str())
    }

    pub fn iou(&self, model: EvalModel) -> Option<f64> {
        self.report(model).map(|r| r.iou)
    }
}

struct Models {
    seg: Option<SegModel>,
    cycle: Option<CycleModel>,
    fusion: Option<FusionModel>,
}

fn predict_clip(
    cfg: &ExperimentConfig,
    models: &Models,
    wanted: &[EvalModel],
    clip: &VideoClip,
) -> Result<Vec<Vec<BinaryMask>>> {
    let oracle = cfg.evaluation.oracle_first_frame;
    let streams = clip_streams(models.seg.as_ref(), models.cycle.as_ref(), clip, oracle)?;
    let pairs = || -> Result<Vec<PredictionPair>> {
        streams
            .static_soft
            .iter()
            .zip(&streams.temporal_soft)
            .map(|(s, t)| PredictionPair::new(s.clone(), t.clone(), None))
            .collect()
    };
    wanted
        .iter()
        .map(|m| match m {
            EvalModel::Segnet => Ok(streams.static_soft.iter().map(|s| s.threshold(THRESHOLD)).collect()),
            EvalModel::Unsupervised => {
                let mut masks: Vec<BinaryMask> = streams.temporal_soft.iter().map(|s| s.threshold(THRESHOLD)).collect();
                masks[0] = streams.first_mask.clone();
                Ok(masks)
            }
            EvalModel::WeightedMean => pairs()?
                .iter()
                .map(|p| weighted_mean_baseline(p, cfg.fusion.alpha))
                .collect(),
            EvalModel::Fusion => {
                let fusion = models.fusion.as_ref().expect("fusion loaded when requested");
                pairs()?.iter().map(|p| fuse_mask(fusion, p)).collect()
            }
        })
        .collect()
}

/// Scores the requested models on the test clips, writes their masks under
/// `predictions/`, per-model JSON reports and the comparison CSVs under
/// `reports/`. Clips are evaluated in parallel, capped by `SEGFUSE_THREADS`.
pub fn evaluate(cfg: &ExperimentConfig, models: &[EvalModel]) -> Result<Evaluation> {
    let mut wanted = models.to_vec();
    wanted.sort();
    wanted.dedup();
    if wanted.is_empty() {
        return Err(Error::Config("no models selected for evaluation".into()));
    }
    let layout = RunLayout::new(&cfg.output_dir);
    let oracle = cfg.evaluation.oracle_first_frame;
    let needs = |m: EvalModel| wanted.contains(&m);
    let needs_seg = needs(EvalModel::Segnet)
        || needs(EvalModel::WeightedMean)
        || needs(EvalModel::Fusion)
        || (needs(EvalModel::Unsupervised) && !oracle);
    let needs_cycle = needs(EvalModel::Unsupervised) || needs(EvalModel::WeightedMean) || needs(EvalModel::Fusion);
    let loaded = Models {
        seg: needs_seg.then(|| load_segnet(cfg, &layout)).transpose()?,
        cycle: needs_cycle.then(|| load_cycle(cfg, &layout)).transpose()?,
        fusion: needs(EvalModel::Fusion)
            .then(|| load_fusion(cfg, &layout))
            .transpose()?,
    };
    let clips = load_clips(cfg, &layout, SplitName::Test)?;
    let [w, h] = cfg.dataset.scene.image_size;
    let tolerance = cfg
        .evaluation
        .boundary_tolerance
        .unwrap_or_else(|| default_boundary_tolerance(w, h));

    let per_clip = with_thread_limit(thread_limit_from_env(), || {
        parallel::map(Execution::Parallel, &clips, |clip| -> Result<Vec<ClipEvaluation>> {
            let predictions = predict_clip(cfg, &loaded, &wanted, clip)?;
            let gt = clip.masks()?;
            wanted
                .iter()
                .zip(&predictions)
                .map(|(m, masks)| {
                    let dir = layout.predictions().join(m.as_str()).join(&clip.id);
                    io(&dir, std::fs::create_dir_all(&dir))?;
                    for (t, mask) in masks.iter().enumerate() {
                        mask.save_png(&dir.join(mask_file(t)))?;
                    }
                    ClipEvaluation::compute(&clip.id, masks, gt, tolerance)
                })
                .collect()
        })
    });
    let mut by_model: Vec<Vec<ClipEvaluation>> = vec![Vec::new(); wanted.len()];
    for clip_evals in per_clip {
        for (slot, e) in by_model.iter_mut().zip(clip_evals?) {
            slot.push(e);
        }
    }
    let reports = wanted
        .iter()
        .zip(by_model)
        .map(|(m, evals)| build_report(m.as_str(), SplitName::Test.as_str(), evals))
        .collect::<Result<Vec<_>>>()?;

    let dir = layout.reports();
    for r in &reports {
        write_file(&dir.join(format!("{}.json", r.model_name)), r.to_json())?;
    }
    write_file(&dir.join(COMPARISON_CSV), precision_iou_table(&reports))?;
    let ablation: Vec<MetricsReport> = reports
        .iter()
        .filter(|r| r.model_name == EvalModel::WeightedMean.as_str() || r.model_name == EvalModel::Fusion.as_str())
        .cloned()
        .collect();
    if !ablation.is_empty() {
        write_file(&dir.join(ABLATION_CSV), precision_iou_table(&ablation))?;
    }
    let evaluation = Evaluation { reports };
    if let Some(r) = evaluation.report(EvalModel::Unsupervised) {
        write_file(&dir.join(PROPAGATION_JF_CSV), jf_table(r))?;
    }
    Ok(evaluation)
}

/// Generate, train all three stages and evaluate every model.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Evaluation> {
    generate(cfg)?;
    train_seg(cfg)?;
    train_cycle_stage(cfg)?;
    train_fusion_stage(cfg)?;
    evaluate(cfg, &EvalModel::ALL)
}

/// Propagates `first_mask` through the clip in `clip_dir` with the tracker in
/// `checkpoint`, writing `soft_%05d.png` and `mask_%05d.png` per frame into
/// `out_dir`. Frame 0's mask is a byte copy of `first_mask`. Returns the
/// number of frames written.
pub fn propagate(checkpoint: &Path, clip_dir: &Path, first_mask: &Path, out_dir: &Path) -> Result<usize> {
    if !checkpoint.exists() {
        return Err(Error::MissingArtifact(format!(
            "missing cycle checkpoint {}",
            checkpoint.display()
        )));
    }
    let model = CycleModel::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let id = clip_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "clip".into());
    let clip = VideoClip::read_from(clip_dir, &id)?;
    let mask = BinaryMask::load_png(first_mask)?;
    if mask.width() != clip.width() || mask.height() != clip.height() {
        return Err(Error::Shape(format!(
            "first mask {} is {}x{} but frames in {} are {}x{}",
            first_mask.display(),
            mask.width(),
            mask.height(),
            clip_dir.display(),
            clip.width(),
            clip.height()
        )));
    }
    let soft = with_thread_limit(thread_limit_from_env(), || {
        propagate_labels(&model, &mask.to_soft(), &clip, model.config.top_k)
    })?;
    io(out_dir, std::fs::create_dir_all(out_dir))?;
    for (t, s) in soft.iter().enumerate() {
        s.save_png(&out_dir.join(format!("soft_{t:05}.png")))?;
        let target = out_dir.join(mask_file(t));
        if t == 0 {
            io(&target, std::fs::copy(first_mask, &target))?;
        } else {
            s.threshold(THRESHOLD).save_png(&target)?;
        }
    }
    Ok(soft.len())
}
