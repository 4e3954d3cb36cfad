//! Synthetic multi-camera "office" scenes with exact ground truth.
//!
//! Each action class is a colored square moving in a shared 2-D room. Every
//! camera sees the room through its own fixed affine placement, so the views
//! are correlated the way fixed office cameras are. Frame labels, action bags
//! and per-view person boxes come straight from the scene description.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{derive_action_bag, write_sequence, ActionBag, DatasetIndex, FrameLabelMatrix, IndexEntry, MultiViewSequence};
use crate::detect::{detect_persons, write_detections, BoundingBox, DetectionSet, OracleDetector, DETECTIONS_FILE};
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Maps room coordinates `[0,1]^2` to normalized image coordinates:
/// `img = 0.5 + scale * R(angle) * (room - 0.5) + offset`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewPlacement {
    pub angle_deg: f64,
    pub scale: f64,
    pub offset: [f64; 2],
    #[serde(default)]
    pub mirror: bool,
}

impl ViewPlacement {
    pub fn project(&self, room: [f64; 2]) -> [f64; 2] {
        let (sin, cos) = (self.angle_deg * PI / 180.0).sin_cos();
        let mut dx = room[0] - 0.5;
        let dy = room[1] - 0.5;
        if self.mirror {
            dx = -dx;
        }
        [
            0.5 + self.scale * (cos * dx - sin * dy) + self.offset[0],
            0.5 + self.scale * (sin * dx + cos * dy) + self.offset[1],
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub num_views: usize,
    pub num_frames: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub num_classes: usize,
    /// Side of each actor square, in pixels.
    pub block_size: usize,
    /// One RGB template per class; generated from evenly spaced hues if empty.
    pub class_colors: Vec<[f32; 3]>,
    /// One placement per view; generated by rotating the room if empty.
    pub views: Vec<ViewPlacement>,
    pub events_min: usize,
    pub events_max: usize,
    pub event_length_min: usize,
    pub event_length_max: usize,
    /// Room units travelled per frame.
    pub speed: f64,
    pub background: f32,
    pub noise_std: f64,
    pub fps: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            num_views: 2,
            num_frames: 16,
            image_height: 16,
            image_width: 16,
            num_classes: 3,
            block_size: 4,
            class_colors: Vec::new(),
            views: Vec::new(),
            events_min: 1,
            events_max: 3,
            event_length_min: 3,
            event_length_max: 8,
            speed: 0.02,
            background: 0.2,
            noise_std: 0.03,
            fps: 2.5,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Invalid(m));
        if self.num_views == 0 || self.num_frames == 0 || self.num_classes == 0 {
            return bad("num_views, num_frames and num_classes must be >= 1".into());
        }
        if self.block_size == 0
            || self.block_size > self.image_height
            || self.block_size > self.image_width
        {
            return bad(format!(
                "block of {} px does not fit a {}x{} image",
                self.block_size, self.image_height, self.image_width
            ));
        }
        if self.events_min > self.events_max {
            return bad("events_min exceeds events_max".into());
        }
        if self.event_length_min == 0 || self.event_length_min > self.event_length_max {
            return bad("event lengths must satisfy 1 <= min <= max".into());
        }
        if !self.class_colors.is_empty() && self.class_colors.len() != self.num_classes {
            return bad(format!(
                "{} class colors for {} classes",
                self.class_colors.len(),
                self.num_classes
            ));
        }
        if !self.views.is_empty() && self.views.len() != self.num_views {
            return bad(format!(
                "{} view placements for {} views",
                self.views.len(),
                self.num_views
            ));
        }
        if !(self.noise_std >= 0.0) || !(0.0..=1.0).contains(&self.background) {
            return bad("noise_std must be >= 0 and background in [0, 1]".into());
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes).map(|c| format!("action_{c}")).collect()
    }

    pub fn colors(&self) -> Vec<[f32; 3]> {
        if !self.class_colors.is_empty() {
            return self.class_colors.clone();
        }
        (0..self.num_classes)
            .map(|c| hsv_to_rgb(c as f64 / self.num_classes as f64, 0.9, 0.95))
            .collect()
    }

    pub fn placements(&self) -> Vec<ViewPlacement> {
        if !self.views.is_empty() {
            return self.views.clone();
        }
        (0..self.num_views)
            .map(|s| ViewPlacement {
                angle_deg: 90.0 * s as f64 + 10.0 * (s / 4) as f64,
                scale: 0.9,
                offset: [0.0, 0.0],
                mirror: s % 2 == 1,
            })
            .collect()
    }

    /// Resting position of class `c` in room coordinates.
    pub fn home(&self, c: usize) -> [f64; 2] {
        let a = 2.0 * PI * c as f64 / self.num_classes as f64 + PI / 4.0;
        [0.5 + 0.28 * a.cos(), 0.5 + 0.28 * a.sin()]
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let (r, g, b) = match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

/// One class acting over frames `[start, end)`, moving linearly in the room.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionEvent {
    pub class: usize,
    pub start: usize,
    pub end: usize,
    pub origin: [f64; 2],
    pub velocity: [f64; 2],
}

impl ActionEvent {
    pub fn position(&self, t: usize) -> [f64; 2] {
        let dt = t.saturating_sub(self.start) as f64;
        [
            (self.origin[0] + self.velocity[0] * dt).clamp(0.05, 0.95),
            (self.origin[1] + self.velocity[1] * dt).clamp(0.05, 0.95),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneGroundTruth {
    pub frame_labels: FrameLabelMatrix,
    pub boxes: DetectionSet,
    pub bag: ActionBag,
    pub events: Vec<ActionEvent>,
}

/// Draws events: a random count in `[events_min, events_max]` (capped at C),
/// each on a distinct class.
pub fn sample_events(cfg: &ScenarioConfig, rng: &mut impl Rng) -> Vec<ActionEvent> {
    let count = rng
        .random_range(cfg.events_min..=cfg.events_max)
        .min(cfg.num_classes);
    let mut classes: Vec<usize> = (0..cfg.num_classes).collect();
    let mut events = Vec::with_capacity(count);
    for _ in 0..count {
        let class = classes.swap_remove(rng.random_range(0..classes.len()));
        let len = rng
            .random_range(cfg.event_length_min..=cfg.event_length_max)
            .min(cfg.num_frames);
        let start = rng.random_range(0..=cfg.num_frames - len);
        let home = cfg.home(class);
        let origin = [
            home[0] + rng.random_range(-0.08..0.08),
            home[1] + rng.random_range(-0.08..0.08),
        ];
        let heading = rng.random_range(0.0..2.0 * PI);
        events.push(ActionEvent {
            class,
            start,
            end: start + len,
            origin,
            velocity: [cfg.speed * heading.cos(), cfg.speed * heading.sin()],
        });
    }
    events.sort_by_key(|e| (e.start, e.class));
    events
}

/// Renders explicit events; `seed` drives only the pixel noise.
pub fn render_events(
    cfg: &ScenarioConfig,
    events: &[ActionEvent],
    sequence_id: &str,
    seed: u64,
) -> Result<(MultiViewSequence, SceneGroundTruth)> {
    cfg.validate()?;
    let (h, w, t_len) = (cfg.image_height, cfg.image_width, cfg.num_frames);
    let mut labels = FrameLabelMatrix::zeros(t_len, cfg.num_classes);
    for e in events {
        if e.class >= cfg.num_classes || e.start >= e.end || e.end > t_len {
            return Err(CoreError::Invalid(format!(
                "event {e:?} lies outside {} classes x [0, {t_len})",
                cfg.num_classes
            )));
        }
        for t in e.start..e.end {
            labels.set(t, e.class, true);
        }
    }
    let colors = cfg.colors();
    let placements = cfg.placements();
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0))
        .map_err(|e| CoreError::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bs = cfg.block_size;
    let mut boxes = DetectionSet::empty(cfg.num_views, t_len);
    let mut views = Vec::with_capacity(cfg.num_views);
    for (s, place) in placements.iter().enumerate() {
        let mut pixels = vec![cfg.background; t_len * h * w * 3];
        for t in 0..t_len {
            let frame = &mut pixels[t * h * w * 3..(t + 1) * h * w * 3];
            for e in events.iter().filter(|e| (e.start..e.end).contains(&t)) {
                let [u, v] = place.project(e.position(t));
                let x1 = ((u * w as f64 - bs as f64 / 2.0).round().max(0.0) as usize).min(w - bs);
                let y1 = ((v * h as f64 - bs as f64 / 2.0).round().max(0.0) as usize).min(h - bs);
                for y in y1..y1 + bs {
                    for x in x1..x1 + bs {
                        frame[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&colors[e.class]);
                    }
                }
                boxes.push(
                    s,
                    t,
                    BoundingBox::new(x1 as f64, y1 as f64, (x1 + bs) as f64, (y1 + bs) as f64, 1.0),
                )?;
            }
        }
        if cfg.noise_std > 0.0 {
            for p in pixels.iter_mut() {
                *p = (*p + noise.sample(&mut rng) as f32).clamp(0.0, 1.0);
            }
        }
        views.push(Tensor::from_vec(&[t_len, h, w, 3], pixels)?);
    }
    let seq = MultiViewSequence::new(sequence_id, cfg.fps, cfg.class_names(), views)?;
    let bag = derive_action_bag(&labels);
    Ok((
        seq,
        SceneGroundTruth {
            frame_labels: labels,
            boxes,
            bag,
            events: events.to_vec(),
        },
    ))
}

pub fn generate_scene(cfg: &ScenarioConfig, seed: u64) -> Result<(MultiViewSequence, SceneGroundTruth)> {
    generate_named_scene(cfg, "scene", seed)
}

fn generate_named_scene(
    cfg: &ScenarioConfig,
    sequence_id: &str,
    seed: u64,
) -> Result<(MultiViewSequence, SceneGroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let events = sample_events(cfg, &mut rng);
    let noise_seed = rng.random();
    render_events(cfg, &events, sequence_id, noise_seed)
}

/// SplitMix64 finalizer; decorrelates per-sequence seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sequence_id(i: usize) -> String {
    format!("seq_{i:05}")
}

/// Writes `n_sequences` sequence directories plus oracle `detections.jsonl`
/// files under `out_dir`, and an `index.json` without split assignments.
pub fn build_corpus(cfg: &ScenarioConfig, n_sequences: usize, seed: u64, out_dir: &Path) -> Result<DatasetIndex> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;
    let entries = (0..n_sequences)
        .into_par_iter()
        .map(|i| {
            let id = sequence_id(i);
            let (seq, truth) = generate_named_scene(cfg, &id, mix_seed(seed, i as u64))?;
            let dir = out_dir.join(&id);
            write_sequence(&dir, &seq, Some(&truth.frame_labels), None)?;
            let dets = detect_persons(&seq, &OracleDetector::new(truth.boxes))?;
            write_detections(&dir.join(DETECTIONS_FILE), &dets)?;
            Ok(IndexEntry {
                sequence_id: id.clone(),
                path: id.into(),
                has_frame_labels: true,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let index = DatasetIndex {
        entries,
        splits: Default::default(),
    };
    index.save(out_dir)?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            num_frames: 8,
            ..Default::default()
        }
    }

    #[test]
    fn zero_events_is_all_background() {
        let cfg = ScenarioConfig {
            events_min: 0,
            events_max: 0,
            ..small()
        };
        let (seq, gt) = generate_scene(&cfg, 3).unwrap();
        assert_eq!(gt.frame_labels, FrameLabelMatrix::zeros(8, 3));
        assert_eq!(gt.bag.as_slice(), &[0, 0, 0]);
        assert_eq!(seq.num_views(), 2);
        for s in 0..2 {
            for t in 0..8 {
                assert!(gt.boxes.get(s, t).is_empty());
            }
        }
    }

    #[test]
    fn explicit_interval_sets_exact_rows() {
        let cfg = small();
        let ev = ActionEvent {
            class: 1,
            start: 2,
            end: 5,
            origin: cfg.home(1),
            velocity: [0.0, 0.0],
        };
        let (_, gt) = render_events(&cfg, &[ev], "x", 0).unwrap();
        for t in 0..8 {
            let want = if (2..5).contains(&t) { vec![0, 1, 0] } else { vec![0, 0, 0] };
            assert_eq!(gt.frame_labels.row(t), want.as_slice());
        }
        assert_eq!(gt.bag.as_slice(), &[0, 1, 0]);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = small();
        let (a, ga) = generate_scene(&cfg, 42).unwrap();
        let (b, gb) = generate_scene(&cfg, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
        let (c, _) = generate_scene(&cfg, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn oversized_block_is_rejected() {
        let cfg = ScenarioConfig {
            block_size: 20,
            ..small()
        };
        assert!(generate_scene(&cfg, 0).is_err());
    }

    #[test]
    fn boxes_match_rendered_extent() {
        let cfg = ScenarioConfig {
            noise_std: 0.0,
            ..small()
        };
        let ev = ActionEvent {
            class: 2,
            start: 0,
            end: 8,
            origin: cfg.home(2),
            velocity: [0.03, -0.02],
        };
        let (seq, gt) = render_events(&cfg, &[ev], "x", 0).unwrap();
        let color = cfg.colors()[2];
        for s in 0..cfg.num_views {
            for t in 0..8 {
                let b = gt.boxes.get(s, t)[0];
                let frame = seq.views[s].index_axis0(t);
                for y in 0..cfg.image_height {
                    for x in 0..cfg.image_width {
                        let px = [frame.at(&[y, x, 0]), frame.at(&[y, x, 1]), frame.at(&[y, x, 2])];
                        let inside = (b.x1..b.x2).contains(&(x as f64)) && (b.y1..b.y2).contains(&(y as f64));
                        assert_eq!(px == color, inside, "view {s} frame {t} pixel ({x},{y})");
                    }
                }
            }
        }
    }

    #[test]
    fn bags_follow_frame_labels() {
        let cfg = small();
        for seed in 0..20 {
            let (_, gt) = generate_scene(&cfg, seed).unwrap();
            assert_eq!(derive_action_bag(&gt.frame_labels), gt.bag);
        }
    }
}
