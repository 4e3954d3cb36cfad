//! Sequences, frame labels, action bags and the on-disk corpus layout.
//!
//! A corpus is a directory holding `index.json` plus one directory per
//! sequence. Each sequence directory contains `view_{s}.mvt` tensors of shape
//! `T x H x W x 3` and a `meta.json` with labels and bookkeeping.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::mvt;
use crate::tensor::Tensor;

pub const META_FILE: &str = "meta.json";
pub const INDEX_FILE: &str = "index.json";

/// Synchronized multi-view clip; every view is `T x H x W x 3` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewSequence {
    pub sequence_id: String,
    pub fps: f64,
    pub class_names: Vec<String>,
    pub views: Vec<Tensor<f32>>,
}

impl MultiViewSequence {
    pub fn new(
        sequence_id: impl Into<String>,
        fps: f64,
        class_names: Vec<String>,
        views: Vec<Tensor<f32>>,
    ) -> Result<Self> {
        let seq = Self {
            sequence_id: sequence_id.into(),
            fps,
            class_names,
            views,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .views
            .first()
            .ok_or_else(|| CoreError::Invalid("sequence has no views".into()))?;
        let shape = first.shape();
        if shape.len() != 4 || shape[3] != 3 || shape[0] == 0 {
            return Err(CoreError::Shape(format!(
                "view 0 has shape {shape:?}, expected T x H x W x 3 with T >= 1"
            )));
        }
        for (s, v) in self.views.iter().enumerate() {
            if v.shape() != shape {
                return Err(CoreError::Shape(format!(
                    "view {s} has shape {:?}, view 0 has {:?}",
                    v.shape(),
                    shape
                )));
            }
            if let Some(x) = v.data().iter().find(|x| !(0.0..=1.0).contains(*x)) {
                return Err(CoreError::Invalid(format!(
                    "view {s} has pixel value {x} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn num_frames(&self) -> usize {
        self.views[0].shape()[0]
    }

    /// `(height, width)` of every frame.
    pub fn image_size(&self) -> (usize, usize) {
        let s = self.views[0].shape();
        (s[1], s[2])
    }
}

/// Per-frame multi-hot labels, `T x C`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameLabelMatrix {
    num_frames: usize,
    num_classes: usize,
    labels: Vec<u8>,
}

impl FrameLabelMatrix {
    pub fn zeros(num_frames: usize, num_classes: usize) -> Self {
        Self {
            num_frames,
            num_classes,
            labels: vec![0; num_frames * num_classes],
        }
    }

    /// Builds from integer rows, rejecting anything other than 0 or 1.
    pub fn from_rows<R: AsRef<[i64]>>(rows: &[R]) -> Result<Self> {
        let num_classes = rows.first().map_or(0, |r| r.as_ref().len());
        let mut labels = Vec::with_capacity(rows.len() * num_classes);
        for (t, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != num_classes {
                return Err(CoreError::Shape(format!(
                    "label row {t} has {} entries, expected {num_classes}",
                    row.len()
                )));
            }
            for (c, &v) in row.iter().enumerate() {
                match v {
                    0 | 1 => labels.push(v as u8),
                    _ => return Err(CoreError::NonBinaryLabel { t, c, value: v }),
                }
            }
        }
        Ok(Self {
            num_frames: rows.len(),
            num_classes,
            labels,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, t: usize, c: usize) -> u8 {
        self.labels[t * self.num_classes + c]
    }

    pub fn set(&mut self, t: usize, c: usize, on: bool) {
        self.labels[t * self.num_classes + c] = on as u8;
    }

    pub fn row(&self, t: usize) -> &[u8] {
        &self.labels[t * self.num_classes..(t + 1) * self.num_classes]
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        (0..self.num_frames).map(|t| self.row(t).to_vec()).collect()
    }

    /// Per-frame "any action" targets, `T x 1`.
    pub fn any_action(&self) -> FrameLabelMatrix {
        let labels = (0..self.num_frames)
            .map(|t| self.row(t).contains(&1) as u8)
            .collect();
        FrameLabelMatrix {
            num_frames: self.num_frames,
            num_classes: 1,
            labels,
        }
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.labels.iter().map(|&v| v as f32).collect();
        Tensor::from_vec(&[self.num_frames, self.num_classes], data).unwrap()
    }
}

/// Sequence-level multi-hot vector over the C classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionBag(Vec<u8>);

impl ActionBag {
    pub fn from_slice(bag: &[i64]) -> Result<Self> {
        bag.iter()
            .enumerate()
            .map(|(c, &v)| match v {
                0 | 1 => Ok(v as u8),
                _ => Err(CoreError::Invalid(format!(
                    "action bag entry {c} is {v}, expected 0 or 1"
                ))),
            })
            .collect::<Result<Vec<_>>>()
            .map(ActionBag)
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Class `c` is in the bag iff it is active in at least one frame.
pub fn derive_action_bag(labels: &FrameLabelMatrix) -> ActionBag {
    let bag = (0..labels.num_classes())
        .map(|c| (0..labels.num_frames()).any(|t| labels.get(t, c) == 1) as u8)
        .collect();
    ActionBag(bag)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceMeta {
    pub sequence_id: String,
    pub fps: f64,
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_labels: Option<Vec<Vec<u8>>>,
    pub action_bag: Vec<u8>,
    pub num_views: usize,
    pub num_frames: usize,
}

impl SequenceMeta {
    pub fn frame_labels(&self) -> Result<Option<FrameLabelMatrix>> {
        let Some(rows) = &self.frame_labels else {
            return Ok(None);
        };
        let rows: Vec<Vec<i64>> = rows
            .iter()
            .map(|r| r.iter().map(|&v| v as i64).collect())
            .collect();
        let m = FrameLabelMatrix::from_rows(&rows)?;
        if m.num_frames() != self.num_frames || m.num_classes() != self.class_names.len() {
            return Err(CoreError::Shape(format!(
                "frame_labels is {}x{}, meta declares {}x{}",
                m.num_frames(),
                m.num_classes(),
                self.num_frames,
                self.class_names.len()
            )));
        }
        Ok(Some(m))
    }

    pub fn action_bag(&self) -> Result<ActionBag> {
        let raw: Vec<i64> = self.action_bag.iter().map(|&v| v as i64).collect();
        let bag = ActionBag::from_slice(&raw)?;
        if bag.len() != self.class_names.len() {
            return Err(CoreError::Shape(format!(
                "action_bag has {} entries for {} classes",
                bag.len(),
                self.class_names.len()
            )));
        }
        Ok(bag)
    }
}

pub fn view_file(s: usize) -> String {
    format!("view_{s}.mvt")
}

pub fn read_meta(dir: &Path) -> Result<SequenceMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CoreError::json(&path, e))
}

/// Writes the views and `meta.json`; the bag is derived when frame labels
/// are given and must be supplied otherwise.
pub fn write_sequence(
    dir: &Path,
    seq: &MultiViewSequence,
    frame_labels: Option<&FrameLabelMatrix>,
    bag: Option<&ActionBag>,
) -> Result<SequenceMeta> {
    seq.validate()?;
    let bag = match (frame_labels, bag) {
        (Some(l), _) => derive_action_bag(l),
        (None, Some(b)) => b.clone(),
        (None, None) => {
            return Err(CoreError::Invalid(
                "a sequence needs frame labels or an action bag".into(),
            ))
        }
    };
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    for (s, v) in seq.views.iter().enumerate() {
        mvt::write_tensor(dir.join(view_file(s)), v)?;
    }
    let meta = SequenceMeta {
        sequence_id: seq.sequence_id.clone(),
        fps: seq.fps,
        class_names: seq.class_names.clone(),
        frame_labels: frame_labels.map(|l| l.rows()),
        action_bag: bag.as_slice().to_vec(),
        num_views: seq.num_views(),
        num_frames: seq.num_frames(),
    };
    let path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(&meta).map_err(|e| CoreError::json(&path, e))?;
    fs::write(&path, text).map_err(|e| CoreError::io(&path, e))?;
    Ok(meta)
}

pub fn read_sequence(dir: &Path) -> Result<(MultiViewSequence, SequenceMeta)> {
    let meta = read_meta(dir)?;
    let views = (0..meta.num_views)
        .map(|s| mvt::read_tensor(dir.join(view_file(s))))
        .collect::<Result<Vec<_>>>()?;
    let seq = MultiViewSequence::new(
        meta.sequence_id.clone(),
        meta.fps,
        meta.class_names.clone(),
        views,
    )?;
    if seq.num_frames() != meta.num_frames {
        return Err(CoreError::Shape(format!(
            "{}: meta declares {} frames, views hold {}",
            dir.display(),
            meta.num_frames,
            seq.num_frames()
        )));
    }
    Ok((seq, meta))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub sequence_id: String,
    pub path: PathBuf,
    pub has_frame_labels: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub entries: Vec<IndexEntry>,
    #[serde(default)]
    pub splits: BTreeMap<String, Split>,
}

impl DatasetIndex {
    pub fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.sequence_id.as_str()) {
                return Err(CoreError::Invalid(format!(
                    "duplicate sequence_id {}",
                    e.sequence_id
                )));
            }
        }
        Ok(())
    }

    /// Reads `index.json` under `root` and checks every entry resolves.
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(INDEX_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
        let index: DatasetIndex =
            serde_json::from_str(&text).map_err(|e| CoreError::json(&path, e))?;
        index.check_unique()?;
        for e in &index.entries {
            let dir = root.join(&e.path);
            if !dir.join(META_FILE).is_file() {
                return Err(CoreError::Invalid(format!(
                    "index entry {} does not resolve to a sequence directory at {}",
                    e.sequence_id,
                    dir.display()
                )));
            }
        }
        Ok(index)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        self.check_unique()?;
        let path = root.join(INDEX_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| CoreError::json(&path, e))?;
        fs::write(&path, text).map_err(|e| CoreError::io(&path, e))
    }

    /// Entries assigned to `split`, in index order.
    pub fn in_split(&self, split: Split) -> Vec<&IndexEntry> {
        self.entries
            .iter()
            .filter(|e| self.splits.get(&e.sequence_id) == Some(&split))
            .collect()
    }
}

/// Assigns whole sequences to train/test. The train count is
/// `round(n * train_fraction)` clamped so both sides are non-empty.
pub fn split_dataset(index: &DatasetIndex, train_fraction: f64, seed: u64) -> Result<DatasetIndex> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(CoreError::Invalid(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    index.check_unique()?;
    let n = index.entries.len();
    if n < 2 {
        return Err(CoreError::Invalid(format!(
            "splitting needs at least 2 sequences, got {n}"
        )));
    }
    let mut ids: Vec<&str> = index.entries.iter().map(|e| e.sequence_id.as_str()).collect();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let splits = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let split = if i < n_train { Split::Train } else { Split::Test };
            (id.to_string(), split)
        })
        .collect();
    Ok(DatasetIndex {
        entries: index.entries.clone(),
        splits,
    })
}
