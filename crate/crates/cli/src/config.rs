//! Experiment configuration: one JSON document covering every stage.

use segfuse::cycletrack::{CycleConfig, CycleTrainConfig};
use segfuse::fusion::{FusionConfig, FusionTrainConfig};
use segfuse::segnet::{SegNetConfig, SegTrainConfig};
use segfuse::synthdata::{SceneConfig, SplitSizes};
use segfuse::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub scene: SceneConfig,
    pub splits: SplitSizes,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegnetSection {
    pub model: SegNetConfig,
    pub train: SegTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CycleSection {
    pub model: CycleConfig,
    pub train: CycleTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub model: FusionConfig,
    pub train: FusionTrainConfig,
    /// Static-stream weight of the weighted-mean baseline.
    pub alpha: f64,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self {
            model: FusionConfig::default(),
            train: FusionTrainConfig::default(),
            alpha: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    /// Seed propagation with the ground-truth first frame instead of the
    /// segnet prediction.
    pub oracle_first_frame: bool,
    /// Boundary tolerance for F in pixels; defaults to 0.8% of the diagonal.
    pub boundary_tolerance: Option<usize>,
}

/// Everything a run needs. The top-level `seed` overrides every seed field
/// nested in the sections; per-stage seeds are derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Allow `generate` to replace an existing run directory.
    pub force: bool,
    pub dataset: DatasetSection,
    pub segnet: SegnetSection,
    pub cycle: CycleSection,
    pub fusion: FusionSection,
    pub evaluation: EvaluationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            force: false,
            dataset: DatasetSection::default(),
            segnet: SegnetSection::default(),
            cycle: CycleSection::default(),
            fusion: FusionSection::default(),
            evaluation: EvaluationSection::default(),
        }
    }
}

/// Command-line values that replace config keys when present.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub force: bool,
    pub oracle_first_frame: bool,
}

/// Per-stage seeds derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    SegnetInit = 1,
    SegnetTrain,
    CycleInit,
    CycleTrain,
    FusionInit,
    FusionTrain,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl ExperimentConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies overrides, propagates the run seed and validates every section.
    pub fn resolve(mut self, overrides: &Overrides) -> Result<Self> {
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        if let Some(dir) = &overrides.output_dir {
            self.output_dir = dir.clone();
        }
        self.force |= overrides.force;
        self.evaluation.oracle_first_frame |= overrides.oracle_first_frame;
        self.dataset.scene.seed = self.seed;
        self.segnet.train.seed = self.stage_seed(Stage::SegnetTrain);
        self.cycle.train.seed = self.stage_seed(Stage::CycleTrain);
        self.fusion.train.seed = self.stage_seed(Stage::FusionTrain);
        self.validate()?;
        Ok(self)
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        splitmix(self.seed ^ splitmix(stage as u64))
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = |section: &str, e: Error| match e {
            Error::Config(m) | Error::Domain(m) | Error::Shape(m) => Error::Config(format!("{section}: {m}")),
            other => other,
        };
        self.dataset.scene.validate().map_err(|e| ctx("dataset.scene", e))?;
        self.dataset.splits.scaled().map_err(|e| ctx("dataset.splits", e))?;
        let splits = &self.dataset.splits;
        if splits.frame_stride == 0 {
            return Err(Error::Config("dataset.splits.frame_stride must be positive".into()));
        }
        if self.dataset.scene.clip_length / splits.frame_stride < 2 {
            return Err(Error::Config(format!(
                "dataset: clip_length {} yields fewer than 2 labelled images at frame_stride {}",
                self.dataset.scene.clip_length, splits.frame_stride
            )));
        }
        self.segnet.model.validate().map_err(|e| ctx("segnet.model", e))?;
        self.cycle.model.validate().map_err(|e| ctx("cycle.model", e))?;
        self.fusion.model.validate().map_err(|e| ctx("fusion.model", e))?;
        let [w, h] = self.dataset.scene.image_size;
        if w != h {
            return Err(Error::Config(format!(
                "dataset.scene.image_size must be square, got {w}x{h}"
            )));
        }
        for (key, size) in [
            ("segnet.model.input_size", self.segnet.model.input_size),
            ("cycle.model.image_size", self.cycle.model.image_size),
            ("fusion.model.mask_size", self.fusion.model.mask_size),
        ] {
            if size != w {
                return Err(Error::Config(format!(
                    "{key} is {size} but dataset.scene.image_size is {w}"
                )));
            }
        }
        let positive_lr = |key: &str, lr: f64| {
            if lr > 0.0 && lr.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{key} must be a positive finite number")))
            }
        };
        positive_lr("segnet.train.lr", self.segnet.train.lr)?;
        positive_lr("cycle.train.lr", self.cycle.train.lr)?;
        positive_lr("fusion.train.lr", self.fusion.train.lr)?;
        for (key, v) in [
            ("segnet.train.batch_size", self.segnet.train.batch_size),
            ("cycle.train.batch_size", self.cycle.train.batch_size),
            ("cycle.train.pool_size", self.cycle.train.pool_size),
            ("fusion.train.batch_size", self.fusion.train.batch_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.fusion.alpha) {
            return Err(Error::Config(format!(
                "fusion.alpha {} must be in [0, 1]",
                self.fusion.alpha
            )));
        }
        if self.evaluation.boundary_tolerance == Some(0) {
            return Err(Error::Config("evaluation.boundary_tolerance must be positive".into()));
        }
        Ok(())
    }
}
