//! Flat JSON training configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coarse::{AttentionMode, DEFAULT_TAU};
use crate::error::{Error, Result};
use crate::fine::FaMode;
use crate::objectives::LossWeights;
use crate::visual::VisualConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub emb_dim: usize,
    /// LSTM hidden size d per direction.
    pub hidden: usize,
    /// Shared feature width b.
    pub feature_dim: usize,
    pub height: usize,
    pub width: usize,
    pub backbone_channels: Vec<usize>,
    pub backbone_strides: Vec<usize>,
    pub pose_channels: Vec<usize>,
    pub pose_strides: Vec<usize>,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub margin: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub tau: f64,
    pub attention: AttentionMode,
    pub fa_mode: FaMode,
    pub fa_identity: bool,
    pub con_pose: bool,
    pub ca: bool,
    pub fa: bool,
    /// Other images of the batch's identities are never negatives.
    pub exclude_same_identity: bool,
    pub warmup_epochs: usize,
    /// Keep the ranking losses on during warm-up.
    pub warmup_ranking: bool,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub early_stop_window: usize,
    /// Relative moving-average improvement below which stage 2 stops.
    pub early_stop_min_improvement: f64,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Queries or images per evaluation chunk.
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let v = VisualConfig::default();
        let w = LossWeights::default();
        Self {
            seed: 0,
            emb_dim: 32,
            hidden: 64,
            feature_dim: v.feature_dim,
            height: v.height,
            width: v.width,
            backbone_channels: v.backbone_channels,
            backbone_strides: v.backbone_strides,
            pose_channels: v.pose_channels,
            pose_strides: v.pose_strides,
            lr_stage1: 3e-3,
            lr_stage2: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            margin: w.margin,
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            lambda4: w.lambda4,
            tau: DEFAULT_TAU,
            attention: AttentionMode::Hard,
            fa_mode: FaMode::Full,
            fa_identity: w.fa_identity,
            con_pose: true,
            ca: true,
            fa: true,
            exclude_same_identity: true,
            warmup_epochs: 8,
            warmup_ranking: false,
            stage1_epochs: 2,
            stage2_epochs: 10,
            early_stop_window: 5,
            early_stop_min_improvement: 0.01,
            checkpoint_every: 0,
            eval_chunk: 16,
        }
    }
}

/// The four rows of the component ablation, from baseline to the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Baseline,
    ConPose,
    ConPoseCa,
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Self::Baseline, Self::ConPose, Self::ConPoseCa, Self::Full];

    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let (con_pose, ca, fa) = match self {
            Self::Baseline => (false, false, false),
            Self::ConPose => (true, false, false),
            Self::ConPoseCa => (true, true, false),
            Self::Full => (true, true, true),
        };
        TrainConfig { con_pose, ca, fa, ..cfg.clone() }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::ConPose => "+con-pose",
            Self::ConPoseCa => "+ca",
            Self::Full => "+ca+fa",
        }
    }
}

impl TrainConfig {
    /// Batch size, margin and learning rates of the original large-scale setup.
    pub fn paper() -> Self {
        let v = VisualConfig::paper();
        Self {
            emb_dim: 512,
            hidden: 512,
            feature_dim: v.feature_dim,
            height: v.height,
            width: v.width,
            backbone_channels: v.backbone_channels,
            backbone_strides: v.backbone_strides,
            pose_channels: v.pose_channels,
            pose_strides: v.pose_strides,
            batch_size: 128,
            margin: 0.2,
            lr_stage1: 1e-3,
            lr_stage2: 2e-4,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn visual(&self) -> VisualConfig {
        VisualConfig {
            height: self.height,
            width: self.width,
            con_pose: self.con_pose,
            backbone_channels: self.backbone_channels.clone(),
            backbone_strides: self.backbone_strides.clone(),
            pose_channels: self.pose_channels.clone(),
            pose_strides: self.pose_strides.clone(),
            feature_dim: self.feature_dim,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            lambda4: self.lambda4,
            margin: self.margin,
            tau: self.tau,
            fa_identity: self.fa_identity,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.warmup_epochs + self.stage1_epochs + self.stage2_epochs
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.emb_dim == 0 || self.hidden == 0 {
            return bad("emb_dim and hidden must be positive");
        }
        self.visual().validate()?;
        self.loss_weights().validate()?;
        for lr in [self.lr_stage1, self.lr_stage2] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad("learning rates must be positive");
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.total_epochs() == 0 {
            return bad("at least one training epoch is required");
        }
        if self.early_stop_window == 0 || self.early_stop_min_improvement < 0.0 {
            return bad("early_stop_window must be positive and early_stop_min_improvement nonnegative");
        }
        if self.eval_chunk == 0 {
            return bad("eval_chunk must be positive");
        }
        Ok(())
    }
}
