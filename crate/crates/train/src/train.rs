//! Base and downstream training loops.

use std::fs;
use std::path::Path;

use mvweak_core::synth::mix_seed;
use mvweak_core::{CoreError, Tensor};
use mvweak_model::base::BaseOutput;
use mvweak_model::{BaseModel, BatchBags, DownstreamConfig, DownstreamModel, ModelConfig, ParamSet, SequenceInput, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Task, TrainConfig};
use crate::dataset::Sample;
use crate::error::{Result, TrainError};
use crate::loss::{base_loss_on, frame_loss_on};
use crate::optim::Adam;

/// Evaluation batch size; affects speed only.
const EVAL_BATCH: usize = 8;

/// Per-epoch means of the loss terms over the epoch's steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub bce: f64,
    pub latent_per_view: Vec<f64>,
}

pub fn history_jsonl(history: &[EpochRecord]) -> String {
    history
        .iter()
        .map(|r| serde_json::to_string(r).expect("history record serializes") + "\n")
        .collect()
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    fs::write(path, history_jsonl(history)).map_err(|e| CoreError::io(path, e))?;
    Ok(())
}

/// Sample order for one epoch, cut into batches of `k`. The order depends
/// only on `(seed, epoch)`. A trailing batch smaller than `min_batch` is
/// dropped.
pub fn epoch_batches(n: usize, k: usize, seed: u64, epoch: usize, min_batch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64)));
    order
        .chunks(k)
        .filter(|c| c.len() >= min_batch)
        .map(<[usize]>::to_vec)
        .collect()
}

fn inputs_of(samples: &[Sample], idx: &[usize]) -> Vec<SequenceInput<f32>> {
    idx.iter().map(|&i| samples[i].input.clone()).collect()
}

fn grads_for<'a>(vars: &[mvweak_model::Var], g: &'a mvweak_model::tape::Gradients<f32>) -> Vec<Option<&'a Tensor<f32>>> {
    vars.iter().map(|&v| g.get(v)).collect()
}

/// Model configuration with the initialization seed derived from the run
/// seed, so `(config, seed)` fixes the whole run.
pub fn seeded(cfg: &ModelConfig, seed: u64, stream: u64) -> ModelConfig {
    ModelConfig {
        init_seed: mix_seed(seed, stream),
        ..cfg.clone()
    }
}

/// Trains the base model on sequence bags. Returns the model and one history
/// record per epoch.
pub fn train_base(samples: &[Sample], cfg: &ModelConfig, tc: &TrainConfig) -> Result<(BaseModel<f32>, Vec<EpochRecord>)> {
    tc.validate_base()?;
    if samples.len() < 2 {
        return Err(TrainError::Data(format!("base training needs >= 2 sequences, got {}", samples.len())));
    }
    let mut model = BaseModel::<f32>::new(&seeded(cfg, tc.seed, 0xba5e))?;
    let mut opt = Adam::new(&model.params, tc);
    let mut history = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let batches = epoch_batches(samples.len(), tc.batch_size, tc.seed, epoch, 2);
        let mut sum = (0.0, 0.0, vec![0.0; cfg.num_latent_heads()]);
        for (step, idx) in batches.iter().enumerate() {
            let inputs = inputs_of(samples, idx);
            let bags = BatchBags::from_bags(&idx.iter().map(|&i| samples[i].bag.clone()).collect::<Vec<_>>())?;
            let mut tape = Tape::new();
            let pv = model.params.bind(&mut tape);
            let vars = model.forward_on(&mut tape, &pv, &inputs)?;
            let (root, parts) = base_loss_on(&mut tape, &vars, &bags, tc.lambda_latent, &tc.triplet)?;
            for (what, value) in [("total", parts.total), ("bce", parts.bce)] {
                if !value.is_finite() {
                    return Err(TrainError::NonFinite { phase: "base", what, epoch, step, value });
                }
            }
            let grads = tape.backward(root);
            opt.step(&mut model.params, &grads_for(pv.vars(), &grads));
            sum.0 += parts.total;
            sum.1 += parts.bce;
            for (a, b) in sum.2.iter_mut().zip(&parts.latent_per_view) {
                *a += b;
            }
        }
        let n = batches.len() as f64;
        history.push(EpochRecord {
            epoch,
            total: sum.0 / n,
            bce: sum.1 / n,
            latent_per_view: sum.2.iter().map(|v| v / n).collect(),
        });
    }
    Ok((model, history))
}

/// Base model outputs for every sample, in order.
pub fn predict_base(model: &BaseModel<f32>, samples: &[Sample]) -> Result<Vec<BaseOutput<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let inputs: Vec<SequenceInput<f32>> = chunk.iter().map(|s| s.input.clone()).collect();
        out.extend(model.forward_batch(&inputs)?);
    }
    Ok(out)
}

/// Latent embeddings (`heads x T x d`) for every sample, in order.
pub fn compute_latents(model: &BaseModel<f32>, samples: &[Sample]) -> Result<Vec<Tensor<f32>>> {
    Ok(predict_base(model, samples)?.into_iter().map(|o| o.rho).collect())
}

/// Downstream configuration for `task` on top of the trunk `model`.
pub fn downstream_config(model: &ModelConfig, hidden: &[usize], task: Task, use_latents: bool, init_from_base: bool) -> DownstreamConfig {
    let c = task.num_outputs(model.bag_classes);
    let mut head_widths = hidden.to_vec();
    head_widths.push(c);
    DownstreamConfig {
        model: model.clone(),
        head_widths,
        task_classes: c,
        use_latents,
        init_from_base,
    }
}

/// Trains the downstream model on frame labels. `latents[i]` belongs to
/// `samples[i]` and is required when the configuration uses latents.
/// `base_params` seeds the trunk when `init_from_base` is set.
pub fn train_downstream(
    samples: &[Sample],
    latents: Option<&[Tensor<f32>]>,
    cfg: &DownstreamConfig,
    task: Task,
    tc: &TrainConfig,
    base_params: Option<&ParamSet<f32>>,
) -> Result<(DownstreamModel<f32>, Vec<EpochRecord>)> {
    tc.validate()?;
    if cfg.task_classes != task.num_outputs(cfg.model.bag_classes) {
        return Err(TrainError::Config(format!(
            "{} task needs {} outputs per frame, configuration has {}",
            task.name(),
            task.num_outputs(cfg.model.bag_classes),
            cfg.task_classes
        )));
    }
    let latents = match (cfg.use_latents, latents) {
        (true, None) => return Err(TrainError::Data("latent embeddings are required when use_latents is set".into())),
        (true, Some(l)) if l.len() != samples.len() => {
            return Err(TrainError::Data(format!("{} latent tensors for {} sequences", l.len(), samples.len())))
        }
        (true, l) => l,
        (false, _) => None,
    };
    if samples.is_empty() {
        return Err(TrainError::Data("no training sequences".into()));
    }
    let targets: Vec<Tensor<f32>> = samples.iter().map(|s| Ok(task.targets(s.labels()?))).collect::<Result<_>>()?;
    let mut dc = cfg.clone();
    dc.model = seeded(&cfg.model, tc.seed, 0xd0e5);
    let mut model = DownstreamModel::<f32>::new(&dc)?;
    if cfg.init_from_base {
        let base = base_params.ok_or_else(|| TrainError::Config("init_from_base is set but no base parameters were given".into()))?;
        model.transfer_trunk(base)?;
    }
    let mut opt = Adam::new(&model.params, tc);
    let mut history = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let batches = epoch_batches(samples.len(), tc.batch_size, tc.seed, epoch, 1);
        let mut sum = 0.0;
        for (step, idx) in batches.iter().enumerate() {
            let inputs = inputs_of(samples, idx);
            let lat: Option<Vec<Tensor<f32>>> = latents.map(|l| idx.iter().map(|&i| l[i].clone()).collect());
            let tgt: Vec<Tensor<f32>> = idx.iter().map(|&i| targets[i].clone()).collect();
            let mut tape = Tape::new();
            let pv = model.params.bind(&mut tape);
            let scores = model.forward_on(&mut tape, &pv, &inputs, lat.as_deref())?;
            let (root, value) = frame_loss_on(&mut tape, &scores, &tgt)?;
            if !value.is_finite() {
                return Err(TrainError::NonFinite { phase: "downstream", what: "bce", epoch, step, value });
            }
            let grads = tape.backward(root);
            opt.step(&mut model.params, &grads_for(pv.vars(), &grads));
            sum += value;
        }
        let mean = sum / batches.len() as f64;
        history.push(EpochRecord {
            epoch,
            total: mean,
            bce: mean,
            latent_per_view: Vec::new(),
        });
    }
    Ok((model, history))
}

/// Frame scores (`T x C_task`) for every sample, in order.
pub fn predict_downstream(model: &DownstreamModel<f32>, samples: &[Sample], latents: Option<&[Tensor<f32>]>) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for (c, chunk) in samples.chunks(EVAL_BATCH).enumerate() {
        let inputs: Vec<SequenceInput<f32>> = chunk.iter().map(|s| s.input.clone()).collect();
        let lat = latents.map(|l| &l[c * EVAL_BATCH..c * EVAL_BATCH + chunk.len()]);
        out.extend(model.forward_batch(&inputs, if model.cfg.use_latents { lat } else { None })?);
    }
    Ok(out)
}
