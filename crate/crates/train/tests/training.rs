use std::path::Path;

use mvweak_core::data::DatasetIndex;
use mvweak_core::detect::{featurize_sequence, DETECTIONS_FILE};
use mvweak_core::synth::{build_corpus, ScenarioConfig};
use mvweak_core::Tensor;
use mvweak_model::base::BaseOutput;
use mvweak_model::latent_loss::weak_label_latent_loss;
use mvweak_model::{BaseModel, BatchBags, EmbeddedBatch, ModelConfig};
use mvweak_train::embeddings::{extract_embeddings, load_embeddings};
use mvweak_train::loss::{base_total_loss, bce};
use mvweak_train::train::{downstream_config, history_jsonl, predict_base, seeded, train_downstream};
use mvweak_train::{load_sample, train_base, Sample, Task, TrainConfig, TrainError};

fn corpus(dir: &Path, n: usize) -> DatasetIndex {
    let sc = ScenarioConfig {
        num_frames: 8,
        ..ScenarioConfig::default()
    };
    let index = build_corpus(&sc, n, 3, dir).unwrap();
    for e in &index.entries {
        let d = dir.join(&e.path);
        featurize_sequence(&d, &d.join(DETECTIONS_FILE), 2, 2).unwrap();
    }
    index
}

fn samples(n: usize) -> (tempfile::TempDir, Vec<Sample>) {
    let dir = tempfile::tempdir().unwrap();
    let index = corpus(dir.path(), n);
    let s = index
        .entries
        .iter()
        .map(|e| load_sample(&dir.path().join(&e.path), &ModelConfig::scaled()).unwrap())
        .collect();
    (dir, s)
}

fn bags(s: &[Sample]) -> BatchBags {
    BatchBags::from_bags(&s.iter().map(|x| x.bag.clone()).collect::<Vec<_>>()).unwrap()
}

fn outputs(s: &[Sample]) -> Vec<BaseOutput<f32>> {
    predict_base(&BaseModel::new(&ModelConfig::scaled()).unwrap(), s).unwrap()
}

#[test]
fn loss_scales_linearly_in_lambda() {
    let (_d, s) = samples(8);
    let out = outputs(&s);
    let b = bags(&s);
    let trip = Default::default();
    let l = |lam| base_total_loss(&out, &b, lam, &trip).unwrap().total;
    let (l0, l1) = (l(0.0), l(1.0));
    for lam in [0.25, 2.0, 7.5] {
        assert!((l(lam) - l0 - lam * (l1 - l0)).abs() < 1e-9);
    }
}

#[test]
fn loss_is_the_sum_of_its_terms() {
    let (_d, s) = samples(6);
    let out = outputs(&s);
    let b = bags(&s);
    let parts = base_total_loss(&out, &b, 0.7, &Default::default()).unwrap();
    let pred: Vec<f32> = out.iter().flat_map(|o| o.bag_pred.data().to_vec()).collect();
    let want_bce = bce(&pred, b.to_tensor::<f32>().data()).0 as f64;
    let mut latent = 0.0;
    for h in 0..2 {
        let views: Vec<Tensor<f32>> = out.iter().map(|o| o.rho.index_axis0(h)).collect();
        let batch = EmbeddedBatch::new(Tensor::stack(&views).unwrap()).unwrap();
        latent += weak_label_latent_loss(&batch, &b, &Default::default()).unwrap() as f64;
    }
    assert!((parts.bce - want_bce).abs() < 1e-12);
    assert!((parts.total - (want_bce + 0.7 * latent)).abs() < 1e-9);
}

#[test]
fn base_training_reduces_loss_and_is_deterministic() {
    let (_d, s) = samples(40);
    let tc = TrainConfig {
        epochs: 30,
        seed: 4,
        ..TrainConfig::default()
    };
    let (m, h) = train_base(&s, &ModelConfig::scaled(), &tc).unwrap();
    assert_eq!(h.len(), 30);
    assert!(h[29].total < h[0].total, "{} -> {}", h[0].total, h[29].total);
    let (m2, h2) = train_base(&s, &ModelConfig::scaled(), &tc).unwrap();
    assert_eq!(history_jsonl(&h), history_jsonl(&h2));
    assert_eq!(m.params, m2.params);
    let line = history_jsonl(&h[..1]);
    assert!(line.starts_with("{\"epoch\":0,\"total\":"), "{line}");
    assert!(line.contains("\"bce\":") && line.contains("\"latent_per_view\":["));
}

#[test]
fn zero_lambda_leaves_total_equal_to_bce() {
    let (_d, s) = samples(8);
    let tc = TrainConfig {
        epochs: 2,
        lambda_latent: 0.0,
        ..TrainConfig::default()
    };
    let (_, h) = train_base(&s, &ModelConfig::scaled(), &tc).unwrap();
    for r in &h {
        assert_eq!(r.total, r.bce);
    }
}

#[test]
fn one_step_moves_camera_rows() {
    let (_d, s) = samples(8);
    let cfg = ModelConfig::scaled();
    let tc = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let (m, _) = train_base(&s, &cfg, &tc).unwrap();
    let cam = m.params.by_name("embed.camera").unwrap();
    let fresh = BaseModel::<f32>::new(&seeded(&cfg, 0, 0xba5e)).unwrap();
    let before = fresh.params.by_name("embed.camera").unwrap();
    for v in 0..2 {
        assert_ne!(cam.index_axis0(v), before.index_axis0(v), "camera row {v} did not move");
    }
}

#[test]
fn embeddings_are_unit_norm_and_reproducible() {
    let (_d, s) = samples(5);
    let m = BaseModel::<f32>::new(&ModelConfig::scaled()).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let man = extract_embeddings(&m, &s, a.path()).unwrap();
    extract_embeddings(&m, &s, b.path()).unwrap();
    assert_eq!((man.views, man.frames, man.d, man.entries.len()), (2, 8, 16, 5));
    for e in &man.entries {
        assert_eq!(std::fs::read(a.path().join(&e.file)).unwrap(), std::fs::read(b.path().join(&e.file)).unwrap());
    }
    let ids: Vec<&str> = s.iter().map(|x| x.id.as_str()).collect();
    for t in load_embeddings(a.path(), &ids).unwrap() {
        for row in t.data().chunks(16) {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5, "{n}");
        }
    }
    assert!(load_embeddings(a.path(), &["nope"]).is_err());
}

#[test]
fn downstream_needs_embeddings_when_configured() {
    let (_d, s) = samples(4);
    let cfg = downstream_config(&ModelConfig::scaled(), &[8], Task::Detection, true, false);
    let tc = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let err = train_downstream(&s, None, &cfg, Task::Detection, &tc, None).unwrap_err();
    assert!(matches!(err, TrainError::Data(_)), "{err}");
    let wrong = downstream_config(&ModelConfig::scaled(), &[8], Task::Recognition, false, false);
    assert!(matches!(
        train_downstream(&s, None, &wrong, Task::Detection, &tc, None).unwrap_err(),
        TrainError::Config(_)
    ));
}

#[test]
fn downstream_loss_decreases() {
    let (_d, s) = samples(40);
    let tc = TrainConfig {
        epochs: 30,
        ..TrainConfig::default()
    };
    let cfg = downstream_config(&ModelConfig::scaled(), &[16, 8], Task::Recognition, false, false);
    let (_, h) = train_downstream(&s, None, &cfg, Task::Recognition, &tc, None).unwrap();
    assert!(h[29].total < h[0].total, "{} -> {}", h[0].total, h[29].total);
}

#[test]
fn task_targets() {
    let (_d, s) = samples(3);
    let labels = s[0].labels().unwrap();
    let det = Task::Detection.targets(labels);
    let rec = Task::Recognition.targets(labels);
    assert_eq!(det.shape(), &[8, 1]);
    assert_eq!(rec.shape(), &[8, 3]);
    for t in 0..8 {
        let any = (0..3).any(|c| rec.at(&[t, c]) == 1.0);
        assert_eq!(det.at(&[t, 0]) == 1.0, any);
    }
}
