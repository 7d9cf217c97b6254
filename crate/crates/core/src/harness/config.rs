use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adversarial::{AlignmentSchedule, DiscriminatorConfig, GammaMode};
use crate::attention::AttentionConfig;
use crate::dataset::DataConfig;
use crate::detector::{AnchorGrid, DecodeParams, DetectorConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub groups: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub detach_objectness: bool,
    pub objectness_reuse: bool,
    pub disc_width: usize,
    pub disc_groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 32,
            groups: 4,
            num_heads: 4,
            ffn_hidden: 64,
            dropout: 0.1,
            detach_objectness: false,
            objectness_reuse: false,
            disc_width: 16,
            disc_groups: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub max_iteration: usize,
    pub t_grl: usize,
    pub delta: f64,
    pub gamma_mode: GammaMode,
    pub grl_lambda: f64,
    /// Stop after this many iterations even if `max_iteration` is larger.
    pub early_stop: Option<usize>,
    /// Seed of parameter initialization, batch sampling and dropout.
    pub seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            max_iteration: 2000,
            t_grl: 500,
            delta: 5.0,
            gamma_mode: GammaMode::Sigmoid,
            grl_lambda: 1.0,
            early_stop: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr_detector: f64,
    pub lr_discriminator: f64,
    pub lr_decay_step: Option<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_detector: 0.004,
            lr_discriminator: 0.004,
            lr_decay_step: Some(1500),
            lr_decay_factor: 0.1,
            momentum: 0.9,
            batch_size: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    /// Evaluate target mAP every this many iterations (0 disables).
    pub eval_every: usize,
    /// Images of the target eval split used for periodic evaluation (0: all).
    pub eval_images: usize,
    /// Iterations (counted in completed steps) at which attention maps are exported.
    pub export_iterations: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.5,
            score_threshold: 0.05,
            nms_iou: 0.45,
            max_detections: 100,
            eval_every: 0,
            eval_images: 0,
            export_iterations: Vec::new(),
        }
    }
}

impl EvalConfig {
    pub fn decode_params(&self) -> DecodeParams {
        DecodeParams {
            score_threshold: self.score_threshold,
            nms_iou: self.nms_iou,
            max_detections: self.max_detections,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data_dir: PathBuf::from("data"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            optim: OptimConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn probability(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must lie in (0, 1), got {v}")))
    }
}

impl ExperimentConfig {
    pub fn alignment_schedule(&self, mode: GammaMode) -> AlignmentSchedule {
        AlignmentSchedule {
            delta: self.schedule.delta,
            t_grl: self.schedule.t_grl,
            max_iteration: self.schedule.max_iteration,
            mode,
        }
    }

    /// Iterations actually run.
    pub fn iterations(&self) -> usize {
        self.schedule
            .early_stop
            .map_or(self.schedule.max_iteration, |e| e.min(self.schedule.max_iteration))
    }

    pub fn detector_config(&self, use_attention: bool) -> DetectorConfig {
        let m = &self.model;
        DetectorConfig {
            image_side: self.data.image_side,
            channels: m.channels,
            num_classes: crate::dataset::NUM_CLASSES,
            groups: m.groups,
            use_attention,
            attention: AttentionConfig {
                embed_dim: m.channels,
                num_heads: m.num_heads,
                value_dim: m.channels,
                ffn_hidden: m.ffn_hidden,
                dropout_p: m.dropout,
                detach_objectness: m.detach_objectness,
            },
            objectness_reuse: m.objectness_reuse,
            anchors: scaled_anchors(self.data.image_side),
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            width: self.model.disc_width,
            groups: self.model.disc_groups,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.detector_config(true).validate()?;
        self.alignment_schedule(self.schedule.gamma_mode).validate()?;
        let d = self.discriminator_config();
        if d.width == 0 || d.groups == 0 || !d.width.is_multiple_of(d.groups) {
            return Err(Error::config(format!(
                "disc_groups {} must divide disc_width {}",
                d.groups, d.width
            )));
        }
        if !(self.schedule.grl_lambda >= 0.0 && self.schedule.grl_lambda.is_finite()) {
            return Err(Error::config("grl_lambda must be a finite value >= 0"));
        }
        if self.schedule.early_stop == Some(0) {
            return Err(Error::config("early_stop must be positive"));
        }
        let o = &self.optim;
        for (name, v) in [("lr_detector", o.lr_detector), ("lr_discriminator", o.lr_discriminator)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(o.lr_decay_factor > 0.0 && o.lr_decay_factor <= 1.0) {
            return Err(Error::config("lr_decay_factor must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if o.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        probability("iou_threshold", self.eval.iou_threshold)?;
        probability("score_threshold", self.eval.score_threshold)?;
        probability("nms_iou", self.eval.nms_iou)?;
        if self.eval.max_detections == 0 {
            return Err(Error::config("max_detections must be positive"));
        }
        Ok(())
    }
}

/// Toy anchors, sized relative to the image for any power-of-two side.
pub fn scaled_anchors(image_side: usize) -> AnchorGrid {
    let mut grid = AnchorGrid::toy();
    for (s, side) in grid.scales.iter_mut().zip([4, 8, 16]) {
        s.side = image_side / side;
    }
    grid
}

/// Experimental arms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Detector with attention, trained on source only.
    NoDa,
    /// No attention module; discriminators see raw backbone features.
    NoAttnDa,
    /// Attention-modulated alignment with the configured gamma schedule.
    Ours,
    Gamma0,
    Gamma1,
    GlobalLocal,
    Linear,
    Cubic,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::NoDa,
        Variant::NoAttnDa,
        Variant::Ours,
        Variant::Gamma0,
        Variant::Gamma1,
        Variant::GlobalLocal,
        Variant::Linear,
        Variant::Cubic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NoDa => "no-da",
            Variant::NoAttnDa => "no-attn-da",
            Variant::Ours => "ours",
            Variant::Gamma0 => "gamma0",
            Variant::Gamma1 => "gamma1",
            Variant::GlobalLocal => "global-local",
            Variant::Linear => "linear",
            Variant::Cubic => "cubic",
        }
    }

    pub fn uses_attention(self) -> bool {
        self != Variant::NoAttnDa
    }

    pub fn uses_discriminators(self) -> bool {
        self != Variant::NoDa
    }

    pub fn gamma_mode(self, configured: GammaMode) -> GammaMode {
        match self {
            Variant::Gamma0 => GammaMode::Constant0,
            Variant::Gamma1 => GammaMode::Constant1,
            Variant::GlobalLocal => GammaMode::GlobalPlusLocal,
            Variant::Linear => GammaMode::Linear,
            Variant::Cubic => GammaMode::Cubic,
            Variant::NoDa | Variant::NoAttnDa | Variant::Ours => configured,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::Usage(format!("unknown variant '{s}'; valid variants: {}", names.join(", ")))
        })
    }
}
