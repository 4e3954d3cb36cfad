//! Loading featurized sequences into model inputs.

use std::path::Path;

use mvweak_core::data::{read_sequence, ActionBag, DatasetIndex, FrameLabelMatrix, MultiViewSequence, Split};
use mvweak_core::detect::{PD_FILE, SL_FILE};
use mvweak_core::{mvt, Tensor};
use mvweak_model::{ModelConfig, SequenceInput};
use rayon::prelude::*;

use crate::error::{Result, TrainError};

/// One sequence ready for training or evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub input: SequenceInput<f32>,
    pub bag: ActionBag,
    pub labels: Option<FrameLabelMatrix>,
}

impl Sample {
    /// Stacks the views into `S x T x H x W x 3`.
    pub fn from_parts(
        seq: &MultiViewSequence,
        pd: Tensor<f32>,
        sl: Tensor<f32>,
        bag: ActionBag,
        labels: Option<FrameLabelMatrix>,
    ) -> Result<Self> {
        Ok(Self {
            id: seq.sequence_id.clone(),
            input: SequenceInput {
                frames: Tensor::stack(&seq.views)?,
                pd,
                sl,
            },
            bag,
            labels,
        })
    }

    pub fn labels(&self) -> Result<&FrameLabelMatrix> {
        self.labels
            .as_ref()
            .ok_or_else(|| TrainError::Data(format!("sequence {} has no frame labels", self.id)))
    }
}

/// Reads one sequence directory. PD/SL files are required when the model
/// uses them and replaced by zeros otherwise.
pub fn load_sample(dir: &Path, cfg: &ModelConfig) -> Result<Sample> {
    let (seq, meta) = read_sequence(dir)?;
    let (s, t) = (seq.num_views(), seq.num_frames());
    let read = |file: &str, used: bool, zeros: &[usize]| -> Result<Tensor<f32>> {
        let path = dir.join(file);
        if path.is_file() {
            Ok(mvt::read_tensor(&path)?)
        } else if used {
            Err(TrainError::Data(format!("{} is missing; run featurize first", path.display())))
        } else {
            Ok(Tensor::zeros(zeros))
        }
    };
    let pd = read(PD_FILE, cfg.use_pd, &[s, t])?;
    let sl = read(SL_FILE, cfg.use_sl, &[s, t, cfg.sl_cells])?;
    let sample = Sample::from_parts(&seq, pd, sl, meta.action_bag()?, meta.frame_labels()?)?;
    sample.input.check(cfg)?;
    if sample.bag.len() != cfg.bag_classes {
        return Err(TrainError::Data(format!(
            "{}: bag has {} classes, model expects {}",
            dir.display(),
            sample.bag.len(),
            cfg.bag_classes
        )));
    }
    Ok(sample)
}

/// Loads every sequence of `split` in index order.
pub fn load_split(root: &Path, index: &DatasetIndex, split: Split, cfg: &ModelConfig) -> Result<Vec<Sample>> {
    let entries = index.in_split(split);
    if entries.is_empty() {
        return Err(TrainError::Data(format!(
            "{}: no sequences in the {split:?} split (run gen-data with a split fraction)",
            root.display()
        )));
    }
    entries.par_iter().map(|e| load_sample(&root.join(&e.path), cfg)).collect()
}
