//! Subcommands. Paths left unset on the command line come from the
//! `[paths]` section of the run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand};
use mvweak_core::data::{split_dataset, DatasetIndex, Split};
use mvweak_core::detect::{featurize_sequence, parse_grid, DETECTIONS_FILE};
use mvweak_core::synth::build_corpus;
use mvweak_core::{CoreError, Tensor};
use mvweak_model::{checkpoint, BaseModel, DownstreamConfig, DownstreamModel, ModelConfig};
use mvweak_train::ablation::{run_ablation_matrix, to_csv};
use mvweak_train::embeddings::{extract_embeddings, load_embeddings};
use mvweak_train::metrics::pr_curve;
use mvweak_train::train::{predict_downstream, write_history};
use mvweak_train::{evaluate_frames, load_sample, load_split, train_base, train_downstream, Sample, Task};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::oracle;
use crate::plot::pr_curve_png;

pub const BASE_KIND: &str = "base";
pub const DOWNSTREAM_KIND: &str = "downstream";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, Parser)]
#[command(name = "mvweak", version, about = "Weakly supervised multi-view frame-level action perception")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML). Built-in defaults are used without it.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Seeded {
    #[command(flatten)]
    pub common: Common,
    /// Overrides MVWEAK_SEED and the `seed` key of the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-view corpus with a train/test split.
    GenData {
        #[command(flatten)]
        seeded: Seeded,
        /// Output corpus root [default: paths.data]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of sequences [default: corpus.n_sequences]
        #[arg(long)]
        n: Option<usize>,
        /// Train share of the split [default: corpus.train_fraction]
        #[arg(long)]
        train_fraction: Option<f64>,
    },
    /// Write pd.mvt and sl.mvt for every sequence from person detections.
    #[command(group(ArgGroup::new("source").required(true).args(["detections", "oracle"])))]
    Featurize {
        #[command(flatten)]
        common: Common,
        /// Corpus root [default: paths.data]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Detection file name inside each sequence directory
        #[arg(long)]
        detections: Option<String>,
        /// Use the ground-truth boxes stored with each synthetic sequence
        #[arg(long)]
        oracle: bool,
        /// Grid as RxC [default: grid.rows x grid.cols]
        #[arg(long)]
        grid: Option<String>,
    },
    /// Train the base model on sequence-level action bags.
    TrainBase {
        #[command(flatten)]
        seeded: Seeded,
        /// Corpus root [default: paths.data]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint directory [default: paths.run/base]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Epochs [default: train.epochs]
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Write per-sequence latent embeddings from a base checkpoint.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        /// Base checkpoint [default: paths.run/base]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Corpus root [default: paths.data]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Embedding store [default: paths.run/embeddings]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the frame-level downstream model for one task.
    TrainDownstream {
        #[command(flatten)]
        seeded: Seeded,
        #[arg(long, value_parser = parse_task)]
        task: Task,
        /// Corpus root [default: paths.data]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Embedding store [default: paths.run/embeddings]
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Base checkpoint for downstream.init_from_base [default: paths.run/base]
        #[arg(long)]
        base: Option<PathBuf>,
        /// Checkpoint directory [default: paths.run/<task>]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Epochs [default: downstream_train.epochs]
        #[arg(long)]
        epochs: Option<usize>,
        /// Train without latent embeddings
        #[arg(long)]
        no_latents: bool,
    },
    /// Score a downstream checkpoint and write metrics.json.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_task)]
        task: Task,
        /// Downstream checkpoint [default: paths.run/<task>]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Corpus root [default: paths.data]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Embedding store [default: paths.run/embeddings]
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Split to score (train or test)
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Metrics file [default: <checkpoint>/metrics.json]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for one precision-recall PNG per class
        #[arg(long)]
        plot_dir: Option<PathBuf>,
    },
    /// Run the proposed model and its four ablations over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Corpus root [default: paths.data]
        #[arg(long)]
        data: Option<PathBuf>,
        /// CSV output [default: paths.run/ablation.csv]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds [default: ablation.seeds]
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Epochs for both stages [default: train.epochs, downstream_train.epochs]
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run the loss and AP oracles and the gradient checks.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    s.parse().map_err(|e: mvweak_train::TrainError| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?} (train or test)")),
    }
}

fn load_config(common: &Common, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.resolve_seed(seed)?;
    cfg.validate()?;
    Ok(cfg)
}

fn log(msg: impl AsRef<str>) {
    eprintln!("mvweak: {}", msg.as_ref());
}

fn all_samples(root: &Path, index: &DatasetIndex, cfg: &ModelConfig) -> Result<Vec<Sample>> {
    index
        .entries
        .iter()
        .map(|e| Ok(load_sample(&root.join(&e.path), cfg)?))
        .collect()
}

fn latents_for(samples: &[Sample], store: &Path) -> Result<Vec<Tensor<f32>>> {
    let ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    Ok(load_embeddings(store, &ids)?)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            seeded,
            out,
            n,
            train_fraction,
        } => {
            let cfg = load_config(&seeded.common, seeded.seed)?;
            let out = out.unwrap_or(cfg.paths.data.clone());
            let n = n.unwrap_or(cfg.corpus.n_sequences);
            let frac = train_fraction.unwrap_or(cfg.corpus.train_fraction);
            let index = build_corpus(&cfg.scenario, n, cfg.seed, &out)?;
            if n >= 2 {
                let index = split_dataset(&index, frac, cfg.seed)?;
                index.save(&out)?;
                log(format!(
                    "wrote {n} sequences to {} ({} train, {} test)",
                    out.display(),
                    index.in_split(Split::Train).len(),
                    index.in_split(Split::Test).len()
                ));
            } else {
                log(format!("wrote {n} sequence(s) to {} (too few to split)", out.display()));
            }
        }
        Command::Featurize {
            common,
            data,
            detections,
            oracle,
            grid,
        } => {
            let cfg = load_config(&common, None)?;
            let data = data.unwrap_or(cfg.paths.data.clone());
            let (rows, cols) = match grid {
                Some(g) => parse_grid(&g).map_err(|e| CliError::Config(format!("--grid: {e}")))?,
                None => (cfg.grid.rows, cfg.grid.cols),
            };
            let file = if oracle {
                DETECTIONS_FILE.to_string()
            } else {
                detections.expect("clap enforces a detection source")
            };
            let index = DatasetIndex::load(&data)?;
            for e in &index.entries {
                let dir = data.join(&e.path);
                let dets = dir.join(&file);
                if !dets.is_file() {
                    return Err(CliError::Data(format!("{} does not exist", dets.display())));
                }
                featurize_sequence(&dir, &dets, rows, cols)?;
            }
            log(format!("featurized {} sequences with a {rows}x{cols} grid", index.entries.len()));
        }
        Command::TrainBase { seeded, data, out, epochs } => {
            let mut cfg = load_config(&seeded.common, seeded.seed)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let data = data.unwrap_or(cfg.paths.data.clone());
            let out = out.unwrap_or(cfg.paths.run.join(BASE_KIND));
            let index = DatasetIndex::load(&data)?;
            let train = load_split(&data, &index, Split::Train, &cfg.model)?;
            log(format!("training base model on {} sequences for {} epochs", train.len(), cfg.train.epochs));
            let (model, history) = train_base(&train, &cfg.model, &cfg.train)?;
            checkpoint::save(&out, BASE_KIND, &model.cfg, &model.params)?;
            write_history(&out.join(HISTORY_FILE), &history)?;
            if let (Some(first), Some(last)) = (history.first(), history.last()) {
                log(format!("loss {:.4} -> {:.4}; checkpoint in {}", first.total, last.total, out.display()));
            }
        }
        Command::ExportEmbeddings {
            common,
            checkpoint: ckpt,
            data,
            out,
        } => {
            let cfg = load_config(&common, None)?;
            let ckpt = ckpt.unwrap_or(cfg.paths.run.join(BASE_KIND));
            let data = data.unwrap_or(cfg.paths.data.clone());
            let out = out.unwrap_or(cfg.paths.run.join("embeddings"));
            let (manifest, params) = checkpoint::load(&ckpt, BASE_KIND)?;
            let mcfg: ModelConfig = checkpoint::config(&manifest)?;
            let model = BaseModel::from_params(&mcfg, params)?;
            let index = DatasetIndex::load(&data)?;
            let samples = all_samples(&data, &index, &mcfg)?;
            let m = extract_embeddings(&model, &samples, &out)?;
            log(format!("wrote {} embedding tensors ({}x{}x{}) to {}", m.entries.len(), m.views, m.frames, m.d, out.display()));
        }
        Command::TrainDownstream {
            seeded,
            task,
            data,
            embeddings,
            base,
            out,
            epochs,
            no_latents,
        } => {
            let mut cfg = load_config(&seeded.common, seeded.seed)?;
            if let Some(e) = epochs {
                cfg.downstream_train.epochs = e;
            }
            if no_latents {
                cfg.downstream.use_latents = false;
            }
            let dcfg = cfg.downstream_config(task);
            let data = data.unwrap_or(cfg.paths.data.clone());
            let store = embeddings.unwrap_or(cfg.paths.run.join("embeddings"));
            let out = out.unwrap_or(cfg.paths.run.join(task.name()));
            let index = DatasetIndex::load(&data)?;
            let train = load_split(&data, &index, Split::Train, &cfg.model)?;
            let latents = if dcfg.use_latents { Some(latents_for(&train, &store)?) } else { None };
            let base_params = if dcfg.init_from_base {
                let dir = base.unwrap_or(cfg.paths.run.join(BASE_KIND));
                Some(checkpoint::load(&dir, BASE_KIND)?.1)
            } else {
                None
            };
            log(format!(
                "training {} model on {} sequences for {} epochs ({} latents)",
                task.name(),
                train.len(),
                cfg.downstream_train.epochs,
                if dcfg.use_latents { "with" } else { "without" }
            ));
            let (model, history) = train_downstream(&train, latents.as_deref(), &dcfg, task, &cfg.downstream_train, base_params.as_ref())?;
            checkpoint::save(&out, DOWNSTREAM_KIND, &model.cfg, &model.params)?;
            write_history(&out.join(HISTORY_FILE), &history)?;
            log(format!("checkpoint in {}", out.display()));
        }
        Command::Evaluate {
            common,
            task,
            checkpoint: ckpt,
            data,
            embeddings,
            split,
            out,
            plot_dir,
        } => {
            let cfg = load_config(&common, None)?;
            let ckpt = ckpt.unwrap_or(cfg.paths.run.join(task.name()));
            let data = data.unwrap_or(cfg.paths.data.clone());
            let store = embeddings.unwrap_or(cfg.paths.run.join("embeddings"));
            let (manifest, params) = checkpoint::load(&ckpt, DOWNSTREAM_KIND)?;
            let dcfg: DownstreamConfig = checkpoint::config(&manifest)?;
            let want = task.num_outputs(dcfg.model.bag_classes);
            if dcfg.task_classes != want {
                return Err(CliError::Config(format!(
                    "--task {} needs task_classes = {want}, checkpoint {} has task_classes = {}",
                    task.name(),
                    ckpt.display(),
                    dcfg.task_classes
                )));
            }
            let model = DownstreamModel::from_params(&dcfg, params)?;
            let index = DatasetIndex::load(&data)?;
            let samples = load_split(&data, &index, split, &dcfg.model)?;
            let latents = if dcfg.use_latents { Some(latents_for(&samples, &store)?) } else { None };
            let scores = predict_downstream(&model, &samples, latents.as_deref())?;
            let targets: Vec<Tensor<f32>> = samples
                .iter()
                .map(|s| Ok(task.targets(s.labels()?)))
                .collect::<Result<_, mvweak_train::TrainError>>()?;
            let report = evaluate_frames(task.name(), &scores, &targets)?;
            let out = out.unwrap_or(ckpt.join(METRICS_FILE));
            report.write(&out)?;
            print!("{}", report.summary());
            if let Some(dir) = plot_dir {
                fs::create_dir_all(&dir).map_err(|e| CoreError::io(&dir, e))?;
                for c in 0..want {
                    let col: Vec<f64> = scores.iter().flat_map(|s| s.data().iter().skip(c).step_by(want).map(|&v| v as f64)).collect();
                    let lab: Vec<bool> = targets.iter().flat_map(|t| t.data().iter().skip(c).step_by(want).map(|&v| v >= 0.5)).collect();
                    pr_curve_png(&pr_curve(&col, &lab), &dir.join(format!("pr_{}_class{c}.png", task.name())))?;
                }
            }
            log(format!("metrics in {}", out.display()));
        }
        Command::Ablate {
            common,
            data,
            out,
            seeds,
            epochs,
        } => {
            let mut cfg = load_config(&common, None)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
                cfg.downstream_train.epochs = e;
            }
            let data = data.unwrap_or(cfg.paths.data.clone());
            let out = out.unwrap_or(cfg.paths.run.join("ablation.csv"));
            let seeds = seeds.unwrap_or(cfg.ablation.seeds.clone());
            let index = DatasetIndex::load(&data)?;
            let train = load_split(&data, &index, Split::Train, &cfg.model)?;
            let test = load_split(&data, &index, Split::Test, &cfg.model)?;
            log(format!("running 5 variants x {} seeds", seeds.len()));
            let rows = run_ablation_matrix(&train, &test, &cfg.pipeline(), &seeds)?;
            let csv = to_csv(&rows);
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
            }
            fs::write(&out, &csv).map_err(|e| CoreError::io(&out, e))?;
            print!("{csv}");
        }
        Command::OracleCheck { seed } => {
            let checks = oracle::run_all(seed)?;
            for c in &checks {
                println!("{}", c.line());
            }
            let failed = checks.iter().filter(|c| !c.passed()).count();
            if failed > 0 {
                return Err(CliError::Numeric(format!("{failed} oracle check(s) failed")));
            }
        }
    }
    Ok(())
}
