//! Command-line surface: generate / train / eval / ablate / attn, driven by
//! a JSON config with flag overrides.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::dataset::{generate_synthetic, load_manifest, split_dataset, write_manifest, DatasetManifest};
use crate::evaluation::{self, RunMeta};
use crate::losses::LossWeights;
use crate::model::{EmotionModel, FeatureSet};
use crate::training;

#[derive(Parser, Debug)]
#[command(name = "emofuse", about = "Multi-modal emotion recognition pipeline")]
pub struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (falls back to $EMOFUSE_OUT, then config, then ./out).
    #[arg(long, global = true, env = "EMOFUSE_OUT")]
    pub out: Option<PathBuf>,
    /// Root seed override for training/init randomness.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic train/val/test manifests (70/15/15 split).
    Generate {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        scene_signal: Option<f32>,
    },
    /// Train a model; checkpoints and the loss log land in the output dir.
    Train,
    /// Evaluate a checkpoint on one split (default: test).
    Eval {
        /// Checkpoint directory (containing params.f32s) or the file itself.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train and evaluate the four ablation feature sets.
    Ablate,
    /// Export per-layer/head attention maps for one sample.
    Attn {
        #[arg(long)]
        ckpt: PathBuf,
        /// Sample id; defaults to the first test sample.
        #[arg(long)]
        sample: Option<String>,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, String> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.training.seed = seed;
    }
    Ok(cfg)
}

fn resolve_out(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn load_splits(
    cfg: &RunConfig,
) -> Result<(DatasetManifest, DatasetManifest, DatasetManifest), String> {
    match &cfg.dataset.dir {
        Some(dir) => {
            let load = |name: &str| {
                load_manifest(&dir.join(name))
                    .map_err(|e| format!("{}/{name}: {e}", dir.display()))
            };
            Ok((load("train.jsonl")?, load("val.jsonl")?, load("test.jsonl")?))
        }
        None => {
            let data = generate_synthetic(cfg.dataset.n, cfg.dataset.seed, cfg.dataset.scene_signal);
            Ok(split_dataset(&data))
        }
    }
}

fn weights_for(cfg: &RunConfig, train: &DatasetManifest) -> LossWeights {
    let mut w = cfg.losses.clone();
    w.priors = train.category_priors.clone();
    w
}

fn ckpt_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("params.f32s")
    } else {
        path.to_path_buf()
    }
}

fn run_meta(cfg: &RunConfig) -> Result<RunMeta, String> {
    Ok(RunMeta {
        seed: cfg.training.seed,
        feature_set: cfg.training.feature_set.clone(),
        config: serde_json::to_value(cfg).map_err(|e| e.to_string())?,
    })
}

pub fn run(cli: Cli) -> Result<(), String> {
    let cfg = resolve_config(&cli)?;
    let out = resolve_out(&cli, &cfg);

    match &cli.cmd {
        Command::Generate { n, scene_signal } => {
            let mut dcfg = cfg.dataset.clone();
            if let Some(n) = n {
                dcfg.n = *n;
            }
            if let Some(s) = scene_signal {
                dcfg.scene_signal = *s;
            }
            if dcfg.n == 0 {
                return Err("dataset.n: must be >= 1".into());
            }
            if !(0.0..=1.0).contains(&dcfg.scene_signal) {
                return Err("dataset.scene_signal: must lie in [0, 1]".into());
            }
            let seed = cli.seed.unwrap_or(dcfg.seed);
            let data = generate_synthetic(dcfg.n, seed, dcfg.scene_signal);
            let (train, val, test) = split_dataset(&data);
            if val.samples.is_empty() || test.samples.is_empty() {
                eprintln!(
                    "warning: n = {} leaves an empty val/test split ({} train / {} val / {} test)",
                    dcfg.n,
                    train.samples.len(),
                    val.samples.len(),
                    test.samples.len()
                );
            }
            let dir = out.join("data");
            let write = |m: &DatasetManifest, name: &str| {
                write_manifest(m, &dir.join(name)).map_err(|e| format!("{name}: {e}"))
            };
            write(&train, "train.jsonl")?;
            write(&val, "val.jsonl")?;
            write(&test, "test.jsonl")?;
            println!(
                "wrote {} train / {} val / {} test samples to {}",
                train.samples.len(),
                val.samples.len(),
                test.samples.len(),
                dir.display()
            );
            Ok(())
        }

        Command::Train => {
            let (train, val, _) = load_splits(&cfg)?;
            let weights = weights_for(&cfg, &train);
            let mut model = EmotionModel::new(cfg.model.clone(), cfg.training.seed)
                .map_err(|e| e.to_string())?;
            let report = training::train(
                &mut model,
                &train.samples,
                &cfg.training,
                &weights,
                Some(&out),
            )
            .map_err(|e| e.to_string())?;
            println!(
                "trained {} steps, final loss {:.6}, checkpoints in {}",
                report.log.len(),
                report.final_loss,
                out.join("ckpt").display()
            );
            if !val.samples.is_empty() {
                let fs = FeatureSet::from_ids(&cfg.training.feature_set)?;
                let eval =
                    evaluation::evaluate(&model, &val.samples, fs, run_meta(&cfg)?)
                        .map_err(|e| e.to_string())?;
                evaluation::write_report(&out.join("val"), &eval).map_err(|e| e.to_string())?;
                println!("val mAP {:.4} ({})", eval.map, out.join("val").display());
            }
            Ok(())
        }

        Command::Eval { ckpt, split } => {
            let (train, val, test) = load_splits(&cfg)?;
            let samples = match split.as_str() {
                "train" => &train.samples,
                "val" => &val.samples,
                "test" => &test.samples,
                other => return Err(format!("unknown split `{other}` (train|val|test)")),
            };
            let mut model = EmotionModel::new(cfg.model.clone(), cfg.training.seed)
                .map_err(|e| e.to_string())?;
            model
                .store
                .load(&ckpt_file(ckpt))
                .map_err(|e| format!("{}: {e}", ckpt.display()))?;
            let fs = FeatureSet::from_ids(&cfg.training.feature_set)?;
            let report = evaluation::evaluate(&model, samples, fs, run_meta(&cfg)?)
                .map_err(|e| e.to_string())?;
            evaluation::write_report(&out, &report).map_err(|e| e.to_string())?;
            println!("{split} mAP {:.4} ({})", report.map, out.display());
            Ok(())
        }

        Command::Ablate => {
            let (train, _, test) = load_splits(&cfg)?;
            let weights = weights_for(&cfg, &train);
            let outcomes = evaluation::run_ablation(
                &train.samples,
                &test.samples,
                &cfg.model,
                &cfg.training,
                &weights,
                Some(&out),
            )
            .map_err(|e| e.to_string())?;
            for o in &outcomes {
                match &o.result {
                    Ok(r) => println!("feature set {:?}: mAP {:.4}", o.feature_set, r.map),
                    Err(e) => println!("feature set {:?}: failed: {e}", o.feature_set),
                }
            }
            if outcomes.iter().all(|o| o.result.is_err()) {
                return Err("all ablation runs failed".into());
            }
            println!("summary: {}", out.join("ablation_summary.txt").display());
            Ok(())
        }

        Command::Attn {
            ckpt,
            sample,
            split,
        } => {
            let (train, val, test) = load_splits(&cfg)?;
            let samples = match split.as_str() {
                "train" => &train.samples,
                "val" => &val.samples,
                "test" => &test.samples,
                other => return Err(format!("unknown split `{other}` (train|val|test)")),
            };
            let target = match sample {
                Some(id) => samples
                    .iter()
                    .find(|s| &s.id == id)
                    .ok_or_else(|| format!("sample `{id}` not found in {split} split"))?,
                None => samples
                    .first()
                    .ok_or_else(|| format!("{split} split is empty"))?,
            };
            let mut model = EmotionModel::new(cfg.model.clone(), cfg.training.seed)
                .map_err(|e| e.to_string())?;
            model
                .store
                .load(&ckpt_file(ckpt))
                .map_err(|e| format!("{}: {e}", ckpt.display()))?;
            let files = evaluation::export_attention_maps(&model, target, &out)
                .map_err(|e| e.to_string())?;
            println!(
                "wrote {} attention files under {}",
                files.len(),
                out.join("attn").join(&target.id).display()
            );
            Ok(())
        }
    }
}
