//! Oracle equivalences and gradient checks run by `oracle-check`.

use mvweak_core::Tensor;
use mvweak_model::gradcheck::{bag_probe_check, bag_probe_check_sampled, downstream_probe_check, latent_loss_check, probe_config};
use mvweak_model::latent_loss::{oracle, weak_label_latent_loss};
use mvweak_model::{BatchBags, DownstreamConfig, EmbeddedBatch, ModelConfig, TripletParams};
use mvweak_train::metrics::{evaluate_matrix, reference};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

pub const LOSS_TOL: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-3;
pub const AP_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub cases: usize,
    /// Largest deviation seen over all cases.
    pub worst: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {} cases, worst {:.3e} (tolerance {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.worst,
            self.tolerance
        )
    }
}

/// Random latent-loss instances with `K <= 8, T <= 4, C <= 3, d <= 8`
/// against exhaustive triplet enumeration.
pub fn latent_loss_oracle(cases: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = TripletParams::default();
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let k = rng.random_range(2..=8);
        let t = rng.random_range(1..=4);
        let c = rng.random_range(1..=3);
        let d = rng.random_range(1..=8);
        let emb: Vec<Vec<Vec<f64>>> = (0..k)
            .map(|_| (0..t).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
            .collect();
        let rows: Vec<Vec<u8>> = (0..k).map(|_| (0..c).map(|_| rng.random_range(0..2u8)).collect()).collect();
        let flat: Vec<f64> = emb.iter().flatten().flatten().copied().collect();
        let batch = EmbeddedBatch::new(Tensor::from_vec(&[k, t, d], flat)?)?;
        let got = weak_label_latent_loss(&batch, &BatchBags::from_rows(&rows)?, &params)?;
        let want = oracle::latent_loss(&emb, &rows, params.margin, params.distance);
        worst = worst.max((got - want).abs());
    }
    Ok(Check {
        name: "latent loss vs triplet enumeration",
        cases,
        worst,
        tolerance: LOSS_TOL,
    })
}

/// Random 20x3 score/label matrices: mAP against the quadratic reference.
/// Half the cases use coarse scores so ties are common.
pub fn ap_oracle(cases: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, classes) = (20, 3);
    let mut worst = 0.0f64;
    for i in 0..cases {
        let scores: Vec<f64> = (0..rows * classes)
            .map(|_| {
                if i % 2 == 0 {
                    rng.random_range(0..=10) as f64 / 10.0
                } else {
                    rng.random_range(0.0..1.0)
                }
            })
            .collect();
        let labels: Vec<u8> = (0..rows * classes).map(|_| rng.random_bool(0.3) as u8).collect();
        let got = evaluate_matrix("recognition", &scores, &labels, classes)?.map;
        let aps: Vec<f64> = (0..classes)
            .filter_map(|c| {
                let s: Vec<f64> = (0..rows).map(|r| scores[r * classes + c]).collect();
                let l: Vec<bool> = (0..rows).map(|r| labels[r * classes + c] == 1).collect();
                reference::average_precision(&s, &l)
            })
            .collect();
        let want = (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64);
        worst = worst.max(match (got, want) {
            (Some(a), Some(b)) => (a - b).abs(),
            (None, None) => 0.0,
            _ => f64::INFINITY,
        });
    }
    Ok(Check {
        name: "mAP vs quadratic PR reference",
        cases,
        worst,
        tolerance: AP_TOL,
    })
}

pub fn latent_gradient(points: usize, seed: u64) -> Result<Check> {
    let mut worst = 0.0f64;
    for p in 0..points {
        worst = worst.max(latent_loss_check(seed.wrapping_add(p as u64))?);
    }
    Ok(Check {
        name: "latent loss gradient vs central differences",
        cases: points,
        worst,
        tolerance: GRAD_TOL,
    })
}

/// Bag-prediction probe through the scaled base model, three coordinates
/// of every parameter tensor per point.
pub fn base_gradient(points: usize, seed: u64) -> Result<Check> {
    let cfg = ModelConfig::scaled();
    let mut worst = 0.0f64;
    for p in 0..points {
        worst = worst.max(bag_probe_check_sampled(&cfg, seed.wrapping_add(p as u64), 3)?);
    }
    Ok(Check {
        name: "base bag probe gradient (scaled model, sampled coordinates)",
        cases: points,
        worst,
        tolerance: GRAD_TOL,
    })
}

/// Every coordinate of a small base and downstream model.
pub fn full_gradient(points: usize, seed: u64) -> Result<Check> {
    let cfg = probe_config();
    let dcfg = DownstreamConfig {
        model: cfg.clone(),
        head_widths: vec![8, 3],
        task_classes: 3,
        use_latents: true,
        init_from_base: false,
    };
    let mut worst = 0.0f64;
    for p in 0..points {
        let s = seed.wrapping_add(p as u64);
        worst = worst.max(bag_probe_check(&cfg, s)?).max(downstream_probe_check(&dcfg, s)?);
    }
    Ok(Check {
        name: "base and downstream gradients (probe model, every coordinate)",
        cases: points,
        worst,
        tolerance: GRAD_TOL,
    })
}

pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    Ok(vec![
        latent_loss_oracle(200, seed)?,
        ap_oracle(100, seed)?,
        latent_gradient(20, seed)?,
        base_gradient(20, seed)?,
        full_gradient(3, seed)?,
    ])
}
