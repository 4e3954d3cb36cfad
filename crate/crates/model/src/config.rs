use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::tape::FuseOp;

/// Whether the base model learns one latent space per view or a single
/// joint space over the mean-fused transformer output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    PerView,
    Single,
}

/// Architecture of the base model. Defaults are the full-size setting:
/// four 64x64 views of 62 frames, width 256, 4 heads, 12 bag classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_views: usize,
    pub num_frames: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Feature width `d`.
    pub d_model: usize,
    pub num_heads: usize,
    /// SL vector width `N`.
    pub sl_cells: usize,
    pub bag_classes: usize,
    pub conv_filters: Vec<usize>,
    pub conv_kernel: usize,
    /// Position-wise feed-forward widths; the last must equal `d_model`.
    pub ff_widths: Vec<usize>,
    /// Bag head widths; the last must equal `bag_classes`.
    pub bag_widths: Vec<usize>,
    pub ptb_op: FuseOp,
    pub use_sl: bool,
    pub use_pd: bool,
    pub latent_mode: LatentMode,
    /// Layer normalization after each residual add.
    pub layer_norm: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_views: 4,
            num_frames: 62,
            image_height: 64,
            image_width: 64,
            d_model: 256,
            num_heads: 4,
            sl_cells: 16,
            bag_classes: 12,
            conv_filters: vec![32, 64, 64],
            conv_kernel: 3,
            ff_widths: vec![400, 256],
            bag_widths: vec![512, 12],
            ptb_op: FuseOp::Max,
            use_sl: true,
            use_pd: true,
            latent_mode: LatentMode::PerView,
            layer_norm: false,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.num_views == 0 || self.num_frames == 0 {
            return bad("num_views and num_frames must be >= 1".into());
        }
        if self.d_model == 0 || self.num_heads == 0 {
            return bad("d_model and num_heads must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return bad(format!(
                "num_heads {} does not divide d_model {}",
                self.num_heads, self.d_model
            ));
        }
        let pools = 1usize << self.conv_filters.len();
        if !self.image_height.is_multiple_of(pools) || !self.image_width.is_multiple_of(pools) || self.image_height == 0 {
            return bad(format!(
                "image {}x{} is not divisible by 2^{}",
                self.image_height,
                self.image_width,
                self.conv_filters.len()
            ));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad("conv_kernel must be odd".into());
        }
        if self.conv_filters.iter().chain(&self.ff_widths).chain(&self.bag_widths).any(|&w| w == 0) {
            return bad("layer widths must be positive".into());
        }
        if self.ff_widths.last() != Some(&self.d_model) {
            return bad(format!(
                "ff_widths {:?} must end with d_model {}",
                self.ff_widths, self.d_model
            ));
        }
        if self.bag_widths.last() != Some(&self.bag_classes) {
            return bad(format!(
                "bag_widths {:?} must end with bag_classes {}",
                self.bag_widths, self.bag_classes
            ));
        }
        if self.use_sl && self.sl_cells == 0 {
            return bad("sl_cells must be positive when use_sl is set".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn num_latent_heads(&self) -> usize {
        match self.latent_mode {
            LatentMode::PerView => self.num_views,
            LatentMode::Single => 1,
        }
    }

    /// Flattened width entering the encoder's dense layer.
    pub fn flat_width(&self) -> usize {
        let p = 1usize << self.conv_filters.len();
        (self.image_height / p) * (self.image_width / p) * self.conv_filters.last().copied().unwrap_or(3)
    }

    /// Small configuration used by the shape suites: S=2, T=8, d=16, N=4,
    /// three bag classes, 16x16 frames.
    pub fn scaled() -> Self {
        Self {
            num_views: 2,
            num_frames: 8,
            image_height: 16,
            image_width: 16,
            d_model: 16,
            num_heads: 4,
            sl_cells: 4,
            bag_classes: 3,
            conv_filters: vec![4, 8, 8],
            conv_kernel: 3,
            ff_widths: vec![24, 16],
            bag_widths: vec![32, 3],
            ..Self::default()
        }
    }
}

/// Downstream frame-level model: the base trunk plus the latent embedding
/// module and a frame-level head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamConfig {
    pub model: ModelConfig,
    /// Head widths; the last must equal `task_classes`.
    pub head_widths: Vec<usize>,
    pub task_classes: usize,
    pub use_latents: bool,
    /// Initialize the trunk from a trained base checkpoint.
    pub init_from_base: bool,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            head_widths: vec![512, 256, 1],
            task_classes: 1,
            use_latents: true,
            init_from_base: false,
        }
    }
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.task_classes == 0 {
            return Err(ModelError::Config("task_classes must be >= 1".into()));
        }
        if self.head_widths.contains(&0) {
            return Err(ModelError::Config("head widths must be positive".into()));
        }
        if self.head_widths.last() != Some(&self.task_classes) {
            return Err(ModelError::Config(format!(
                "head_widths {:?} must end with task_classes {}",
                self.head_widths, self.task_classes
            )));
        }
        Ok(())
    }

    /// Copy of `self` predicting `classes` outputs per frame.
    pub fn with_task_classes(&self, classes: usize) -> Self {
        let mut c = self.clone();
        c.task_classes = classes;
        if let Some(last) = c.head_widths.last_mut() {
            *last = classes;
        }
        c
    }

    pub fn scaled(task_classes: usize) -> Self {
        Self {
            model: ModelConfig::scaled(),
            head_widths: vec![32, 16, task_classes],
            task_classes,
            use_latents: true,
            init_from_base: false,
        }
    }
}
