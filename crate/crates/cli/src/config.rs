//! Run configuration: one TOML file with a section per component. Every
//! key is optional; missing keys take the defaults below, unknown keys are
//! rejected.

use std::fs;
use std::path::{Path, PathBuf};

use mvweak_core::synth::ScenarioConfig;
use mvweak_model::{DownstreamConfig, FuseOp, LatentMode, ModelConfig};
use mvweak_train::pipeline::PipelineConfig;
use mvweak_train::{Task, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "MVWEAK_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Corpus root holding `index.json`.
    pub data: PathBuf,
    /// Output root for checkpoints, embeddings and metrics.
    pub run: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data".into(),
            run: "run".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_sequences: usize,
    /// Fraction of sequences assigned to the train split.
    pub train_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_sequences: 80,
            train_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub rows: usize,
    pub cols: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { rows: 4, cols: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamSection {
    /// Hidden widths of the frame head; the output width comes from the task.
    pub hidden: Vec<usize>,
    pub use_latents: bool,
    pub init_from_base: bool,
}

impl Default for DownstreamSection {
    fn default() -> Self {
        Self {
            hidden: vec![64, 32],
            use_latents: true,
            init_from_base: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub seeds: Vec<u64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for corpus generation, the split and both training stages. The
    /// `seed` keys inside the train sections are replaced by it.
    pub seed: u64,
    pub paths: Paths,
    pub corpus: CorpusConfig,
    pub scenario: ScenarioConfig,
    pub grid: GridConfig,
    pub model: ModelConfig,
    pub downstream: DownstreamSection,
    pub train: TrainConfig,
    pub downstream_train: TrainConfig,
    pub ablation: AblationSection,
}

/// Model sized for the default scenario: two 16x16 views of 16 frames and
/// three classes.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        num_views: 2,
        num_frames: 16,
        image_height: 16,
        image_width: 16,
        d_model: 32,
        num_heads: 4,
        sl_cells: 16,
        bag_classes: 3,
        conv_filters: vec![8, 16, 16],
        conv_kernel: 3,
        ff_widths: vec![64, 32],
        bag_widths: vec![64, 3],
        ptb_op: FuseOp::Max,
        use_sl: true,
        use_pd: true,
        latent_mode: LatentMode::PerView,
        layer_norm: false,
        init_seed: 0,
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig {
            epochs: 30,
            ..TrainConfig::default()
        };
        Self {
            seed: 0,
            paths: Paths::default(),
            corpus: CorpusConfig::default(),
            scenario: ScenarioConfig::default(),
            grid: GridConfig::default(),
            model: desk_model(),
            downstream: DownstreamSection::default(),
            train: train.clone(),
            downstream_train: train,
            ablation: AblationSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))
    }

    /// Reads `path`, or the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text, &p.display().to_string())
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies the seed precedence: flag, then `MVWEAK_SEED`, then the file.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<()> {
        if let Some(s) = flag {
            self.seed = s;
        } else if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        self.train.seed = self.seed;
        self.downstream_train.seed = self.seed;
        Ok(())
    }

    /// Checks every section and the keys that must agree across sections.
    pub fn validate(&self) -> Result<()> {
        let key = |path: &str, e: &dyn std::fmt::Display| CliError::Config(format!("{path}: {e}"));
        self.scenario.validate().map_err(|e| key("scenario", &e))?;
        self.model.validate().map_err(|e| key("model", &e))?;
        self.train.validate().map_err(|e| key("train", &e))?;
        self.downstream_train.validate().map_err(|e| key("downstream_train", &e))?;
        if !(self.corpus.train_fraction > 0.0 && self.corpus.train_fraction < 1.0) {
            return Err(key("corpus.train_fraction", &"must lie in (0, 1)"));
        }
        if self.grid.rows == 0 || self.grid.cols == 0 {
            return Err(key("grid", &"rows and cols must be >= 1"));
        }
        let pairs = [
            ("model.num_views", self.model.num_views, "scenario.num_views", self.scenario.num_views),
            ("model.num_frames", self.model.num_frames, "scenario.num_frames", self.scenario.num_frames),
            ("model.image_height", self.model.image_height, "scenario.image_height", self.scenario.image_height),
            ("model.image_width", self.model.image_width, "scenario.image_width", self.scenario.image_width),
            ("model.bag_classes", self.model.bag_classes, "scenario.num_classes", self.scenario.num_classes),
            ("model.sl_cells", self.model.sl_cells, "grid.rows * grid.cols", self.grid.rows * self.grid.cols),
        ];
        for (a, x, b, y) in pairs {
            if x != y {
                return Err(CliError::Config(format!("{a} = {x} does not match {b} = {y}")));
            }
        }
        Ok(())
    }

    pub fn downstream_config(&self, task: Task) -> DownstreamConfig {
        mvweak_train::train::downstream_config(
            &self.model,
            &self.downstream.hidden,
            task,
            self.downstream.use_latents,
            self.downstream.init_from_base,
        )
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            model: self.model.clone(),
            downstream_hidden: self.downstream.hidden.clone(),
            base_train: self.train.clone(),
            downstream_train: self.downstream_train.clone(),
            tasks: vec![Task::Detection, Task::Recognition],
            use_latents: self.downstream.use_latents,
            init_from_base: self.downstream.init_from_base,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_consistent_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml(), "x").unwrap(), c);
        assert_eq!(RunConfig::from_toml("", "x").unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let err = RunConfig::from_toml("[model]\nd_modle = 8\n", "run.toml").unwrap_err().to_string();
        assert!(err.contains("d_modle"), "{err}");
        assert!(RunConfig::from_toml("bogus = 1\n", "run.toml").is_err());
    }

    #[test]
    fn cross_section_mismatch_names_both_keys() {
        let c = RunConfig::from_toml("[grid]\nrows = 2\ncols = 2\n", "x").unwrap();
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("model.sl_cells") && err.contains("grid.rows * grid.cols"), "{err}");
    }

    #[test]
    fn seed_flag_wins_and_reaches_both_stages() {
        let mut c = RunConfig::default();
        c.resolve_seed(Some(9)).unwrap();
        assert_eq!((c.seed, c.train.seed, c.downstream_train.seed), (9, 9, 9));
    }
}
