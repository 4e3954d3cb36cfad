//! Ablation matrix: the proposed model and four variants, each run over
//! several seeds and reported by per-variant medians.

use mvweak_model::{FuseOp, LatentMode, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::config::Task;
use crate::dataset::Sample;
use crate::error::{Result, TrainError};
use crate::pipeline::{run_pipeline, PipelineConfig};

pub const CSV_HEADER: &str = "Algo.,SL,PD,PTB opera.,Latent Space,Action Det.,Action Recog.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Proposed,
    /// No SL or PD embeddings.
    AblationA,
    /// Sum fusion after the transformer branches.
    AblationB,
    /// Mean fusion after the transformer branches.
    AblationC,
    /// One joint latent space with mean fusion.
    AblationD,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Proposed,
        Variant::AblationA,
        Variant::AblationB,
        Variant::AblationC,
        Variant::AblationD,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Proposed => "Proposed",
            Variant::AblationA => "Ablation-A",
            Variant::AblationB => "Ablation-B",
            Variant::AblationC => "Ablation-C",
            Variant::AblationD => "Ablation-D",
        }
    }

    /// Model configuration for this variant, starting from the proposed one.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        match self {
            Variant::Proposed => {}
            Variant::AblationA => {
                c.use_sl = false;
                c.use_pd = false;
            }
            Variant::AblationB => c.ptb_op = FuseOp::Sum,
            Variant::AblationC => c.ptb_op = FuseOp::Mean,
            Variant::AblationD => {
                c.latent_mode = LatentMode::Single;
                c.ptb_op = FuseOp::Mean;
            }
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub sl: bool,
    pub pd: bool,
    pub ptb: FuseOp,
    pub latent: LatentMode,
    /// Median test frame accuracy over seeds.
    pub detection: f64,
    pub recognition: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Runs every variant for every seed. The proposed configuration is taken
/// from `cfg.model`, which must itself be the proposed setting.
pub fn run_ablation_matrix(train: &[Sample], test: &[Sample], cfg: &PipelineConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    if seeds.len() < 3 {
        return Err(TrainError::Config(format!("the ablation needs >= 3 seeds, got {}", seeds.len())));
    }
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let model = v.apply(&cfg.model);
        let mut det = Vec::new();
        let mut rec = Vec::new();
        for &seed in seeds {
            let mut run = cfg.with_seed(seed);
            run.model = model.clone();
            run.tasks = vec![Task::Detection, Task::Recognition];
            let r = run_pipeline(train, test, &run)?;
            det.push(r.task(Task::Detection).expect("detection ran").metrics.accuracy);
            rec.push(r.task(Task::Recognition).expect("recognition ran").metrics.accuracy);
        }
        rows.push(AblationRow {
            variant: v,
            sl: model.use_sl,
            pd: model.use_pd,
            ptb: model.ptb_op,
            latent: model.latent_mode,
            detection: median(&det),
            recognition: median(&rec),
        });
    }
    Ok(rows)
}

pub fn to_csv(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "yes" } else { "no" };
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let ptb = match r.ptb {
            FuseOp::Max => "max",
            FuseOp::Sum => "sum",
            FuseOp::Mean => "mean",
        };
        let latent = match r.latent {
            LatentMode::PerView => "view-specific",
            LatentMode::Single => "single",
        };
        s += &format!(
            "{},{},{},{},{},{:.4},{:.4}\n",
            r.variant.label(),
            mark(r.sl),
            mark(r.pd),
            ptb,
            latent,
            r.detection,
            r.recognition
        );
    }
    s
}
