//! Two-stage run: base model on bags, frozen latents, downstream model per task.

use std::fs;
use std::path::Path;

use mvweak_core::{CoreError, Tensor};
use mvweak_model::{checkpoint, BaseModel, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::config::{Task, TrainConfig};
use crate::dataset::Sample;
use crate::error::Result;
use crate::metrics::{evaluate_frames, evaluate_matrix, MetricsReport};
use crate::train::{
    compute_latents, downstream_config, predict_base, predict_downstream, train_base, train_downstream, write_history, EpochRecord,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    /// Downstream hidden widths; the output width comes from the task.
    pub downstream_hidden: Vec<usize>,
    pub base_train: TrainConfig,
    pub downstream_train: TrainConfig,
    pub tasks: Vec<Task>,
    pub use_latents: bool,
    pub init_from_base: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            downstream_hidden: vec![512, 256],
            base_train: TrainConfig::default(),
            downstream_train: TrainConfig::default(),
            tasks: vec![Task::Detection, Task::Recognition],
            use_latents: true,
            init_from_base: false,
        }
    }
}

impl PipelineConfig {
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.base_train.seed = seed;
        c.downstream_train.seed = seed;
        c
    }
}

#[derive(Clone, Debug)]
pub struct TaskResult {
    pub task: Task,
    pub history: Vec<EpochRecord>,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub base: BaseModel<f32>,
    pub base_history: Vec<EpochRecord>,
    /// Sequence-level bag prediction quality on the test split.
    pub bag_metrics: MetricsReport,
    pub tasks: Vec<TaskResult>,
}

impl PipelineResult {
    pub fn task(&self, task: Task) -> Option<&TaskResult> {
        self.tasks.iter().find(|t| t.task == task)
    }

    /// Writes checkpoints, histories and metrics under `out`.
    pub fn write(&self, out: &Path, cfg: &PipelineConfig) -> Result<()> {
        fs::create_dir_all(out).map_err(|e| CoreError::io(out, e))?;
        checkpoint::save(&out.join("base"), "base", &self.base.cfg, &self.base.params)?;
        write_history(&out.join("base_history.jsonl"), &self.base_history)?;
        self.bag_metrics.write(&out.join("bag_metrics.json"))?;
        for t in &self.tasks {
            let dir = out.join(t.task.name());
            fs::create_dir_all(&dir).map_err(|e| CoreError::io(&dir, e))?;
            write_history(&dir.join("history.jsonl"), &t.history)?;
            t.metrics.write(&dir.join("metrics.json"))?;
        }
        let path = out.join("pipeline.json");
        let text = serde_json::to_string_pretty(cfg).map_err(|e| CoreError::json(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| CoreError::io(&path, e))?;
        Ok(())
    }
}

/// Bag metrics of `model` over `samples`.
pub fn evaluate_bags(model: &BaseModel<f32>, samples: &[Sample]) -> Result<MetricsReport> {
    let out = predict_base(model, samples)?;
    let scores: Vec<f64> = out.iter().flat_map(|o| o.bag_pred.data().iter().map(|&v| v as f64)).collect();
    let labels: Vec<u8> = samples.iter().flat_map(|s| s.bag.as_slice().iter().copied()).collect();
    evaluate_matrix("bag", &scores, &labels, model.cfg.bag_classes)
}

pub fn run_pipeline(train: &[Sample], test: &[Sample], cfg: &PipelineConfig) -> Result<PipelineResult> {
    let (base, base_history) = train_base(train, &cfg.model, &cfg.base_train)?;
    let bag_metrics = evaluate_bags(&base, test)?;
    let (lat_train, lat_test): (Option<Vec<Tensor<f32>>>, Option<Vec<Tensor<f32>>>) = if cfg.use_latents {
        (Some(compute_latents(&base, train)?), Some(compute_latents(&base, test)?))
    } else {
        (None, None)
    };
    let mut tasks = Vec::new();
    for &task in &cfg.tasks {
        let dcfg = downstream_config(&cfg.model, &cfg.downstream_hidden, task, cfg.use_latents, cfg.init_from_base);
        let (model, history) = train_downstream(train, lat_train.as_deref(), &dcfg, task, &cfg.downstream_train, Some(&base.params))?;
        let scores = predict_downstream(&model, test, lat_test.as_deref())?;
        let targets: Vec<Tensor<f32>> = test.iter().map(|s| Ok(task.targets(s.labels()?))).collect::<Result<_>>()?;
        tasks.push(TaskResult {
            task,
            history,
            metrics: evaluate_frames(task.name(), &scores, &targets)?,
        });
    }
    Ok(PipelineResult {
        base,
        base_history,
        bag_metrics,
        tasks,
    })
}
