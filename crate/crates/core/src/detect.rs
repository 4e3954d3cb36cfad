//! Person detections and the per-view PD / SL input vectors derived from them.
//!
//! The PD vector marks frames with at least one detected person. The SL vector
//! is, per frame, one-hot over a fixed grid of image cells: the hot cell is the
//! one whose IOU with the selected person box is largest.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::MultiViewSequence;
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const PD_FILE: &str = "pd.mvt";
pub const SL_FILE: &str = "sl.mvt";

/// Axis-aligned pixel box with a detector confidence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub confidence: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, confidence: f64) -> Self {
        Self {
            x1,
            y1,
            x2,
            y2,
            confidence,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    fn is_valid(&self) -> bool {
        self.x1 < self.x2
            && self.y1 < self.y2
            && [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && (0.0..=1.0).contains(&self.confidence)
    }
}

/// Boxes for every `(view, frame)`, indexed `boxes[s][t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionSet {
    boxes: Vec<Vec<Vec<BoundingBox>>>,
}

impl DetectionSet {
    pub fn empty(num_views: usize, num_frames: usize) -> Self {
        Self {
            boxes: vec![vec![Vec::new(); num_frames]; num_views],
        }
    }

    pub fn new(boxes: Vec<Vec<Vec<BoundingBox>>>) -> Result<Self> {
        let t = boxes.first().map_or(0, Vec::len);
        for (s, frames) in boxes.iter().enumerate() {
            if frames.len() != t {
                return Err(CoreError::Shape(format!(
                    "view {s} has {} frames, view 0 has {t}",
                    frames.len()
                )));
            }
            for (f, list) in frames.iter().enumerate() {
                if let Some(b) = list.iter().find(|b| !b.is_valid()) {
                    return Err(CoreError::Invalid(format!(
                        "invalid box {b:?} at view {s}, frame {f}"
                    )));
                }
            }
        }
        Ok(Self { boxes })
    }

    pub fn num_views(&self) -> usize {
        self.boxes.len()
    }

    pub fn num_frames(&self) -> usize {
        self.boxes.first().map_or(0, Vec::len)
    }

    pub fn get(&self, view: usize, frame: usize) -> &[BoundingBox] {
        &self.boxes[view][frame]
    }

    pub fn push(&mut self, view: usize, frame: usize, b: BoundingBox) -> Result<()> {
        if !b.is_valid() {
            return Err(CoreError::Invalid(format!("invalid box {b:?}")));
        }
        self.boxes[view][frame].push(b);
        Ok(())
    }

    /// Clamps every box to the image and drops boxes left without area.
    pub fn clamped(&self, width: f64, height: f64) -> DetectionSet {
        let boxes = self
            .boxes
            .iter()
            .map(|frames| {
                frames
                    .iter()
                    .map(|list| {
                        list.iter()
                            .map(|b| BoundingBox {
                                x1: b.x1.clamp(0.0, width),
                                y1: b.y1.clamp(0.0, height),
                                x2: b.x2.clamp(0.0, width),
                                y2: b.y2.clamp(0.0, height),
                                confidence: b.confidence,
                            })
                            .filter(|b| b.x1 < b.x2 && b.y1 < b.y2)
                            .collect()
                    })
                    .collect()
            })
            .collect();
        DetectionSet { boxes }
    }
}

/// Anything that finds people in a single `H x W x 3` frame.
pub trait Detector {
    fn detect(
        &self,
        view: usize,
        frame: usize,
        image: &Tensor<f32>,
    ) -> std::result::Result<Vec<BoundingBox>, String>;
}

/// Never finds anyone.
pub struct NullDetector;

impl Detector for NullDetector {
    fn detect(&self, _: usize, _: usize, _: &Tensor<f32>) -> std::result::Result<Vec<BoundingBox>, String> {
        Ok(Vec::new())
    }
}

/// Replays known boxes, e.g. a scene generator's ground truth.
pub struct OracleDetector {
    truth: DetectionSet,
}

impl OracleDetector {
    pub fn new(truth: DetectionSet) -> Self {
        Self { truth }
    }
}

impl Detector for OracleDetector {
    fn detect(&self, view: usize, frame: usize, _: &Tensor<f32>) -> std::result::Result<Vec<BoundingBox>, String> {
        if view >= self.truth.num_views() || frame >= self.truth.num_frames() {
            return Err(format!("no ground truth for view {view}, frame {frame}"));
        }
        Ok(self.truth.get(view, frame).to_vec())
    }
}

/// Runs `detector` on every frame of every view independently.
pub fn detect_persons(seq: &MultiViewSequence, detector: &dyn Detector) -> Result<DetectionSet> {
    let (h, w) = seq.image_size();
    let mut out = DetectionSet::empty(seq.num_views(), seq.num_frames());
    for (s, view) in seq.views.iter().enumerate() {
        for t in 0..seq.num_frames() {
            let frame = view.index_axis0(t);
            let boxes = detector
                .detect(s, t, &frame)
                .map_err(|reason| CoreError::Detector {
                    view: s,
                    frame: t,
                    reason,
                })?;
            for b in boxes {
                out.push(s, t, b).map_err(|e| CoreError::Detector {
                    view: s,
                    frame: t,
                    reason: e.to_string(),
                })?;
            }
        }
    }
    Ok(out.clamped(w as f64, h as f64))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionLine {
    view: usize,
    frame: usize,
    boxes: Vec<[f64; 5]>,
}

/// Writes one JSON line per `(view, frame)`, views outermost.
pub fn write_detections(path: &Path, dets: &DetectionSet) -> Result<()> {
    let mut buf = Vec::new();
    for s in 0..dets.num_views() {
        for t in 0..dets.num_frames() {
            let line = DetectionLine {
                view: s,
                frame: t,
                boxes: dets
                    .get(s, t)
                    .iter()
                    .map(|b| [b.x1, b.y1, b.x2, b.y2, b.confidence])
                    .collect(),
            };
            serde_json::to_writer(&mut buf, &line).map_err(|e| CoreError::json(path, e))?;
            buf.push(b'\n');
        }
    }
    let mut f = fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    f.write_all(&buf).map_err(|e| CoreError::io(path, e))
}

/// Parses `detections.jsonl`. Missing `(view, frame)` lines mean no boxes;
/// repeated lines, out-of-range indices and malformed boxes are errors that
/// name the 1-based line number.
pub fn read_detections(path: &Path, num_views: usize, num_frames: usize) -> Result<DetectionSet> {
    let f = fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut dets = DetectionSet::empty(num_views, num_frames);
    let mut seen = vec![vec![false; num_frames]; num_views];
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| CoreError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| CoreError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            reason,
        };
        let rec: DetectionLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if rec.view >= num_views || rec.frame >= num_frames {
            return Err(err(format!(
                "(view {}, frame {}) outside {num_views} views x {num_frames} frames",
                rec.view, rec.frame
            )));
        }
        if std::mem::replace(&mut seen[rec.view][rec.frame], true) {
            return Err(err(format!(
                "duplicate entry for view {}, frame {}",
                rec.view, rec.frame
            )));
        }
        for [x1, y1, x2, y2, conf] in rec.boxes {
            dets.push(rec.view, rec.frame, BoundingBox::new(x1, y1, x2, y2, conf))
                .map_err(|e| err(e.to_string()))?;
        }
    }
    Ok(dets)
}

/// Uniform `rows x cols` tiling of a `width x height` image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub rows: usize,
    pub cols: usize,
    pub width: usize,
    pub height: usize,
}

impl GridSpec {
    pub fn new(rows: usize, cols: usize, width: usize, height: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || width == 0 || height == 0 {
            return Err(CoreError::Invalid(format!(
                "grid {rows}x{cols} over {width}x{height} must be non-empty"
            )));
        }
        Ok(Self {
            rows,
            cols,
            width,
            height,
        })
    }

    pub fn num_cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Cell `n` in row-major order, as a zero-confidence box.
    pub fn cell(&self, n: usize) -> BoundingBox {
        let (r, c) = (n / self.cols, n % self.cols);
        let cw = self.width as f64 / self.cols as f64;
        let ch = self.height as f64 / self.rows as f64;
        BoundingBox::new(
            c as f64 * cw,
            r as f64 * ch,
            (c + 1) as f64 * cw,
            (r + 1) as f64 * ch,
            0.0,
        )
    }
}

/// Intersection-over-union of a person box against a grid cell.
pub fn grid_iou(b: &BoundingBox, cell: &BoundingBox) -> Result<f64> {
    if b.area() <= 0.0 {
        return Err(CoreError::Invalid(format!("degenerate box {b:?}")));
    }
    if cell.area() <= 0.0 {
        return Err(CoreError::Invalid(format!("degenerate cell {cell:?}")));
    }
    let iw = (b.x2.min(cell.x2) - b.x1.max(cell.x1)).max(0.0);
    let ih = (b.y2.min(cell.y2) - b.y1.max(cell.y1)).max(0.0);
    let inter = iw * ih;
    Ok(inter / (b.area() + cell.area() - inter))
}

/// Per-view binary person-presence vectors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PdVector {
    pub values: Vec<Vec<u8>>,
}

impl PdVector {
    /// `S x T` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let s = self.values.len();
        let t = self.values.first().map_or(0, Vec::len);
        let data = self.values.iter().flatten().map(|&v| v as f32).collect();
        Tensor::from_vec(&[s, t], data).unwrap()
    }
}

/// Per-view, per-frame one-hot (or all-zero) grid-cell rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlVector {
    pub num_cells: usize,
    /// `hot[s][t]` is the selected cell, if any person was detected.
    pub hot: Vec<Vec<Option<usize>>>,
}

impl SlVector {
    pub fn row(&self, s: usize, t: usize) -> Vec<u8> {
        let mut r = vec![0; self.num_cells];
        if let Some(n) = self.hot[s][t] {
            r[n] = 1;
        }
        r
    }

    /// `S x T x N` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let s = self.hot.len();
        let t = self.hot.first().map_or(0, Vec::len);
        let mut out = Tensor::zeros(&[s, t, self.num_cells]);
        for (si, frames) in self.hot.iter().enumerate() {
            for (ti, h) in frames.iter().enumerate() {
                if let Some(n) = h {
                    out.set(&[si, ti, *n], 1.0);
                }
            }
        }
        out
    }
}

pub fn compute_pd_vector(dets: &DetectionSet) -> PdVector {
    let values = (0..dets.num_views())
        .map(|s| {
            (0..dets.num_frames())
                .map(|t| !dets.get(s, t).is_empty() as u8)
                .collect()
        })
        .collect();
    PdVector { values }
}

/// Highest confidence wins; ties go to the larger box, then the earlier one.
fn select_person(boxes: &[BoundingBox]) -> Option<&BoundingBox> {
    let mut best: Option<&BoundingBox> = None;
    for b in boxes {
        best = match best {
            None => Some(b),
            Some(cur) => {
                if b.confidence > cur.confidence
                    || (b.confidence == cur.confidence && b.area() > cur.area())
                {
                    Some(b)
                } else {
                    Some(cur)
                }
            }
        };
    }
    best
}

/// Cell with the largest IOU; equal IOUs resolve to the lowest index.
pub fn best_cell(b: &BoundingBox, grid: &GridSpec) -> Result<usize> {
    let mut best = (0, f64::NEG_INFINITY);
    for n in 0..grid.num_cells() {
        let iou = grid_iou(b, &grid.cell(n))?;
        if iou > best.1 {
            best = (n, iou);
        }
    }
    Ok(best.0)
}

/// `grids` holds one grid per view; every grid must have `expected_cells`
/// cells (the SL width the model was built for).
pub fn compute_sl_vector(
    dets: &DetectionSet,
    grids: &[GridSpec],
    expected_cells: usize,
) -> Result<SlVector> {
    if grids.len() != dets.num_views() {
        return Err(CoreError::Shape(format!(
            "{} grids for {} views",
            grids.len(),
            dets.num_views()
        )));
    }
    if let Some(g) = grids.iter().find(|g| g.num_cells() != expected_cells) {
        return Err(CoreError::Shape(format!(
            "grid {}x{} has {} cells, model expects N = {expected_cells}",
            g.rows,
            g.cols,
            g.num_cells()
        )));
    }
    let hot = grids
        .iter()
        .enumerate()
        .map(|(s, grid)| {
            (0..dets.num_frames())
                .map(|t| {
                    select_person(dets.get(s, t))
                        .map(|b| best_cell(b, grid))
                        .transpose()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SlVector {
        num_cells: expected_cells,
        hot,
    })
}

/// Parses `"RxC"` grid notation.
pub fn parse_grid(spec: &str) -> Result<(usize, usize)> {
    let bad = || CoreError::Invalid(format!("grid must look like 4x4, got {spec:?}"));
    let (r, c) = spec.split_once(['x', 'X']).ok_or_else(bad)?;
    let r: usize = r.trim().parse().map_err(|_| bad())?;
    let c: usize = c.trim().parse().map_err(|_| bad())?;
    if r == 0 || c == 0 {
        return Err(bad());
    }
    Ok((r, c))
}

/// Reads a sequence directory and its detections file, computes PD and SL
/// vectors on a `rows x cols` grid, and writes `pd.mvt` and `sl.mvt` next to
/// the views.
pub fn featurize_sequence(dir: &Path, detections: &Path, rows: usize, cols: usize) -> Result<(PdVector, SlVector)> {
    let meta = crate::data::read_meta(dir)?;
    let first = crate::mvt::read_tensor(dir.join(crate::data::view_file(0)))?;
    let [_, h, w, 3] = *first.shape() else {
        return Err(CoreError::Shape(format!(
            "{}: view 0 has shape {:?}, expected T x H x W x 3",
            dir.display(),
            first.shape()
        )));
    };
    let dets = read_detections(detections, meta.num_views, meta.num_frames)?.clamped(w as f64, h as f64);
    let grid = GridSpec::new(rows, cols, w, h)?;
    let pd = compute_pd_vector(&dets);
    let sl = compute_sl_vector(&dets, &vec![grid; meta.num_views], grid.num_cells())?;
    crate::mvt::write_tensor(dir.join(PD_FILE), &pd.to_tensor())?;
    crate::mvt::write_tensor(dir.join(SL_FILE), &sl.to_tensor())?;
    Ok((pd, sl))
}
