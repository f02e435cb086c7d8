//! Metrics (per-category AP, mAP, confusion matrices), the ablation harness,
//! attention-map export, and JSON/text report emission.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{resize_bilinear, ImageArray, Sample, CATEGORIES, N_CATEGORIES};
use crate::fusion::FusionMode;
use crate::losses::LossWeights;
use crate::model::{EmotionModel, FeatureSet, ModelConfig};
use crate::rngstream::substream;
use crate::training::{self, TrainConfig, TrainError};

/// Single-label confusion subset: Anger, Disconnection, Happiness, Sadness.
pub const CONFUSION_SUBSET: [usize; 4] = [1, 7, 16, 20];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("tensor error: {0}")]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("training error: {0}")]
    Train(#[from] TrainError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("class id {id} out of range for {n} classes")]
    ClassOutOfRange { id: usize, n: usize },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("no category has a defined AP (no positive labels anywhere)")]
    NoDefinedAp,
    #[error("sample {0}: semantic modality absent (no image)")]
    SemanticAbsent(String),
    #[error("{0}")]
    Config(String),
}

/// Non-interpolated AP: sort by score descending (stable, so ties keep their
/// original order) and average precision@k over the positive positions.
/// Returns None when there are no positives (the category is excluded from
/// mAP with a warning).
pub fn average_precision(scores: &[f32], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores/labels length mismatch");
    let positives = labels.iter().filter(|&&l| l != 0).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut hits = 0u64;
    let mut sum = 0.0f64;
    for (k, &i) in order.iter().enumerate() {
        if labels[i] != 0 {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

/// Arithmetic mean over the categories whose AP is defined.
pub fn mean_ap(per_category: &[Option<f64>]) -> Result<f64, EvalError> {
    let defined: Vec<f64> = per_category.iter().filter_map(|v| *v).collect();
    if defined.is_empty() {
        return Err(EvalError::NoDefinedAp);
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Entry (i, j) counts samples with true class i predicted as j.
pub fn confusion_matrix(
    pred: &[usize],
    truth: &[usize],
    n: usize,
) -> Result<Vec<Vec<u64>>, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch(format!(
            "pred {} vs truth {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut m = vec![vec![0u64; n]; n];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= n {
            return Err(EvalError::ClassOutOfRange { id: p, n });
        }
        if t >= n {
            return Err(EvalError::ClassOutOfRange { id: t, n });
        }
        m[t][p] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: u64,
    pub feature_set: Vec<u8>,
    /// Snapshot of the config the run was produced from.
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_category_ap: Vec<Option<f64>>,
    pub map: f64,
    /// 4-class single-label confusion over CONFUSION_SUBSET, when any sample
    /// qualifies (exactly one subset category positive).
    pub confusion: Option<Vec<Vec<u64>>>,
    pub confusion_classes: Vec<String>,
    /// Mean absolute error per continuous dimension.
    pub cont_mae: [f64; 3],
    pub run_meta: RunMeta,
}

/// Scores every sample with the deterministic eval path and computes
/// per-category AP, mAP, the subset confusion matrix, and continuous MAE.
pub fn evaluate(
    model: &EmotionModel,
    samples: &[Sample],
    feature_set: FeatureSet,
    run_meta: RunMeta,
) -> Result<EvalReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Config("no samples to evaluate".into()));
    }
    let mut disc_scores = Vec::with_capacity(samples.len());
    let mut mae = [0.0f64; 3];
    for s in samples {
        let (disc, cont) = model.predict(s, feature_set)?;
        for k in 0..3 {
            mae[k] += (cont[k] as f64 - s.annotation.cont[k] as f64).abs();
        }
        disc_scores.push(disc);
    }
    for v in &mut mae {
        *v /= samples.len() as f64;
    }

    let mut per_category_ap = Vec::with_capacity(N_CATEGORIES);
    for cat in 0..N_CATEGORIES {
        let scores: Vec<f32> = disc_scores.iter().map(|d| d[cat]).collect();
        let labels: Vec<u8> = samples.iter().map(|s| s.annotation.disc[cat]).collect();
        let ap = average_precision(&scores, &labels);
        if ap.is_none() {
            eprintln!(
                "warning: category {} has no positive samples; excluded from mAP",
                CATEGORIES[cat]
            );
        }
        per_category_ap.push(ap);
    }
    let map = mean_ap(&per_category_ap)?;

    // Single-label subset: keep samples with exactly one positive among the
    // four classes; predict by argmax over the subset scores (monotone in the
    // softmax head's logits).
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for (s, d) in samples.iter().zip(&disc_scores) {
        let pos: Vec<usize> = (0..CONFUSION_SUBSET.len())
            .filter(|&k| s.annotation.disc[CONFUSION_SUBSET[k]] != 0)
            .collect();
        if pos.len() != 1 {
            continue;
        }
        truth.push(pos[0]);
        let p = (0..CONFUSION_SUBSET.len())
            .max_by(|&a, &b| {
                d[CONFUSION_SUBSET[a]]
                    .partial_cmp(&d[CONFUSION_SUBSET[b]])
                    .unwrap()
            })
            .unwrap();
        pred.push(p);
    }
    let confusion = if truth.is_empty() {
        None
    } else {
        Some(confusion_matrix(&pred, &truth, CONFUSION_SUBSET.len())?)
    };

    Ok(EvalReport {
        per_category_ap,
        map,
        confusion,
        confusion_classes: CONFUSION_SUBSET
            .iter()
            .map(|&i| CATEGORIES[i].to_string())
            .collect(),
        cont_mae: mae,
        run_meta,
    })
}

fn format_report_txt(report: &EvalReport) -> String {
    let mut out = String::new();
    let width = CATEGORIES.iter().map(|c| c.len()).max().unwrap();
    out.push_str(&format!("{:<width$}  AP\n", "Category", width = width));
    for (cat, ap) in CATEGORIES.iter().zip(&report.per_category_ap) {
        match ap {
            Some(v) => out.push_str(&format!("{cat:<width$}  {:.4}\n", v, width = width)),
            None => out.push_str(&format!("{cat:<width$}  (undefined)\n", width = width)),
        }
    }
    out.push_str(&format!("{:<width$}  {:.4}\n", "mAP", report.map, width = width));
    out.push_str(&format!(
        "\ncontinuous MAE (V, A, D): {:.4} {:.4} {:.4}\n",
        report.cont_mae[0], report.cont_mae[1], report.cont_mae[2]
    ));
    if let Some(m) = &report.confusion {
        out.push_str("\nconfusion (rows = true, cols = predicted):\n");
        let cw = report
            .confusion_classes
            .iter()
            .map(|c| c.len())
            .max()
            .unwrap()
            .max(6);
        out.push_str(&format!("{:<cw$}", "", cw = cw));
        for c in &report.confusion_classes {
            out.push_str(&format!("  {c:>cw$}", cw = cw));
        }
        out.push('\n');
        for (c, row) in report.confusion_classes.iter().zip(m) {
            out.push_str(&format!("{c:<cw$}", cw = cw));
            for v in row {
                out.push_str(&format!("  {v:>cw$}", cw = cw));
            }
            out.push('\n');
        }
    }
    out
}

/// Writes `report.json` and `report.txt` into `dir`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<(), EvalError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_vec_pretty(report)?)?;
    fs::write(dir.join("report.txt"), format_report_txt(report))?;
    Ok(())
}

pub const ABLATION_SETS: [&[u8]; 4] = [&[1], &[1, 2], &[1, 3], &[1, 2, 3]];

pub struct AblationOutcome {
    pub feature_set: Vec<u8>,
    pub result: Result<EvalReport, EvalError>,
}

/// Trains and evaluates the four feature sets with identical initialization
/// seeds. A failed run is reported and the remaining runs still execute.
pub fn run_ablation(
    train_samples: &[Sample],
    eval_samples: &[Sample],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    weights: &LossWeights,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationOutcome>, EvalError> {
    let mut outcomes = Vec::with_capacity(ABLATION_SETS.len());
    for set in ABLATION_SETS {
        let result = (|| -> Result<EvalReport, EvalError> {
            let mut cfg = train_cfg.clone();
            cfg.feature_set = set.to_vec();
            let mut model = EmotionModel::new(model_cfg.clone(), cfg.seed)?;
            let run_dir = out_dir.map(|d| {
                d.join(format!(
                    "ablation_{}",
                    set.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("")
                ))
            });
            training::train(&mut model, train_samples, &cfg, weights, run_dir.as_deref())?;
            let fs_mask = FeatureSet::from_ids(set).map_err(EvalError::Config)?;
            let meta = RunMeta {
                seed: cfg.seed,
                feature_set: set.to_vec(),
                config: serde_json::to_value(&cfg)?,
            };
            let report = evaluate(&model, eval_samples, fs_mask, meta)?;
            if let Some(dir) = &run_dir {
                write_report(dir, &report)?;
            }
            Ok(report)
        })();
        if let Err(e) = &result {
            eprintln!("warning: ablation run {set:?} failed: {e}");
        }
        outcomes.push(AblationOutcome {
            feature_set: set.to_vec(),
            result,
        });
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let mut f = fs::File::create(dir.join("ablation_summary.txt"))?;
        f.write_all(format_ablation_summary(&outcomes).as_bytes())?;
    }
    Ok(outcomes)
}

/// Comparison table: one category per row, one feature set per column.
pub fn format_ablation_summary(outcomes: &[AblationOutcome]) -> String {
    let width = CATEGORIES.iter().map(|c| c.len()).max().unwrap();
    let mut out = String::new();
    out.push_str(&format!("{:<width$}", "Labels", width = width));
    for o in outcomes {
        let label = format!(
            "{{{}}}",
            o.feature_set
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        );
        out.push_str(&format!("  {label:>9}"));
    }
    out.push('\n');
    for (cat, name) in CATEGORIES.iter().enumerate() {
        out.push_str(&format!("{name:<width$}", width = width));
        for o in outcomes {
            match &o.result {
                Ok(r) => match r.per_category_ap[cat] {
                    Some(v) => out.push_str(&format!("  {:>9.4}", v)),
                    None => out.push_str(&format!("  {:>9}", "--")),
                },
                Err(_) => out.push_str(&format!("  {:>9}", "failed")),
            }
        }
        out.push('\n');
    }
    out.push_str(&format!("{:<width$}", "mAP", width = width));
    for o in outcomes {
        match &o.result {
            Ok(r) => out.push_str(&format!("  {:>9.4}", r.map)),
            Err(_) => out.push_str(&format!("  {:>9}", "failed")),
        }
    }
    out.push('\n');
    out
}

/// Renders the class-token attention row of every layer/head as a grayscale
/// heatmap upsampled to the model's input resolution, next to the raw matrix.
/// Files land in `out_dir/attn/<sample_id>/layer_{l}_head_{h}.{png,json}`.
pub fn export_attention_maps(
    model: &EmotionModel,
    sample: &Sample,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, EvalError> {
    if sample.image.is_none() {
        return Err(EvalError::SemanticAbsent(sample.id.clone()));
    }
    let mut tape = crate::tensor::Tape::new();
    let bind = model.store.bind(&mut tape);
    let mut rng = substream(0, "attn-unused");
    let out = model.forward_sample(
        &mut tape,
        &bind,
        sample,
        FeatureSet::all(),
        FusionMode::Eval,
        &mut rng,
        None,
        true,
    )?;
    let attention = out
        .attention
        .ok_or_else(|| EvalError::SemanticAbsent(sample.id.clone()))?;

    let dir = out_dir.join("attn").join(&sample.id);
    fs::create_dir_all(&dir)?;
    let res = model.cfg.vit.image_size;
    let mut written = Vec::new();
    for (l, heads) in attention.maps.iter().enumerate() {
        for (h, map) in heads.iter().enumerate() {
            let tokens = map.shape()[0];
            let n = tokens - 1;
            let grid = (n as f64).sqrt().round() as usize;
            assert_eq!(grid * grid, n, "patch count must form a square grid");

            // class-token row over the patch tokens
            let row = &map.data()[1..tokens];
            let mut small = ImageArray::new(grid, grid, 1);
            for (i, &v) in row.iter().enumerate() {
                small.set(i / grid, i % grid, 0, v);
            }
            let up = resize_bilinear(&small, res, res);
            let (lo, hi) = up
                .data
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
            let span = if hi > lo { hi - lo } else { 1.0 };
            let mut png = image::GrayImage::new(res as u32, res as u32);
            for y in 0..res {
                for x in 0..res {
                    let v = (up.get(y, x, 0) - lo) / span;
                    png.put_pixel(x as u32, y as u32, image::Luma([(v * 255.0) as u8]));
                }
            }
            let png_path = dir.join(format!("layer_{l}_head_{h}.png"));
            png.save(&png_path)?;

            let rows: Vec<Vec<f32>> = (0..tokens)
                .map(|r| map.data()[r * tokens..(r + 1) * tokens].to_vec())
                .collect();
            let json_path = dir.join(format!("layer_{l}_head_{h}.json"));
            fs::write(&json_path, serde_json::to_vec_pretty(&rows)?)?;
            written.push(png_path);
            written.push(json_path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_synthetic;

    #[test]
    fn ap_hand_example() {
        // precision at the two positives: 1/1 and 2/3
        let ap = average_precision(&[0.9, 0.8, 0.1], &[1, 0, 1]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ap_perfect_ranking_is_one() {
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.2, 0.1], &[1, 1, 1, 0, 0]).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn ap_no_positives_is_none() {
        assert!(average_precision(&[0.5, 0.4], &[0, 0]).is_none());
    }

    #[test]
    fn ap_rank_invariance_under_monotone_transform() {
        let scores = [0.1, 0.7, 0.3, 0.9, 0.5];
        let labels = [0, 1, 1, 0, 1];
        let a = average_precision(&scores, &labels).unwrap();
        let squashed: Vec<f32> = scores.iter().map(|s| 1.0 / (1.0 + (-5.0 * s).exp())).collect();
        let b = average_precision(&squashed, &labels).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ap_stable_tie_order() {
        // equal scores keep original order: positive first → precision@1 = 1
        let a = average_precision(&[0.5, 0.5], &[1, 0]).unwrap();
        assert_eq!(a, 1.0);
        let b = average_precision(&[0.5, 0.5], &[0, 1]).unwrap();
        assert_eq!(b, 0.5);
    }

    #[test]
    fn mean_ap_arithmetic() {
        assert_eq!(mean_ap(&[Some(1.0), Some(0.0)]).unwrap(), 0.5);
        let all = vec![Some(0.4039); 26];
        assert!((mean_ap(&all).unwrap() - 0.4039).abs() < 1e-12);
        assert!(mean_ap(&[None, None]).is_err());
        assert_eq!(mean_ap(&[Some(0.8), None]).unwrap(), 0.8);
    }

    #[test]
    fn confusion_basics() {
        let m = confusion_matrix(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(m[0][0] + m[1][1] + m[2][2], 3);
        let m = confusion_matrix(&[1], &[0], 2).unwrap();
        assert_eq!(m[0][1], 1);
        assert!(confusion_matrix(&[5], &[0], 2).is_err());
    }

    #[test]
    fn confusion_row_sums_are_class_counts() {
        let truth = [0, 0, 1, 2, 2, 2];
        let pred = [1, 0, 1, 0, 2, 2];
        let m = confusion_matrix(&pred, &truth, 3).unwrap();
        for c in 0..3 {
            let count = truth.iter().filter(|&&t| t == c).count() as u64;
            assert_eq!(m[c].iter().sum::<u64>(), count);
        }
    }

    #[test]
    fn evaluate_produces_full_report() {
        let model = EmotionModel::new(ModelConfig::default(), 3).unwrap();
        let data = generate_synthetic(30, 4, 0.5);
        let meta = RunMeta {
            seed: 3,
            feature_set: vec![1, 2, 3],
            config: serde_json::Value::Null,
        };
        let rep = evaluate(&model, &data.manifest.samples, FeatureSet::all(), meta).unwrap();
        assert_eq!(rep.per_category_ap.len(), 26);
        let defined: Vec<f64> = rep.per_category_ap.iter().filter_map(|v| *v).collect();
        let mean = defined.iter().sum::<f64>() / defined.len() as f64;
        assert!((rep.map - mean).abs() < 1e-12);
    }

    #[test]
    fn attention_export_writes_expected_files() {
        let model = EmotionModel::new(ModelConfig::default(), 3).unwrap();
        let data = generate_synthetic(2, 4, 0.5);
        let dir = tempfile::tempdir().unwrap();
        let files =
            export_attention_maps(&model, &data.manifest.samples[0], dir.path()).unwrap();
        // 2 layers x 4 heads x (png + json)
        assert_eq!(files.len(), 16);
        let sample_id = &data.manifest.samples[0].id;
        let json_path = dir
            .path()
            .join("attn")
            .join(sample_id)
            .join("layer_0_head_0.json");
        let rows: Vec<Vec<f32>> =
            serde_json::from_slice(&std::fs::read(json_path).unwrap()).unwrap();
        assert_eq!(rows.len(), 17);
        for r in &rows {
            let s: f32 = r.iter().sum();
            assert!((s - 1.0).abs() < 1e-5, "attention row sums to {s}");
        }
    }

    #[test]
    fn attention_export_requires_image() {
        let model = EmotionModel::new(ModelConfig::default(), 3).unwrap();
        let data = generate_synthetic(1, 4, 0.5);
        let mut s = data.manifest.samples[0].clone();
        s.image = None;
        let dir = tempfile::tempdir().unwrap();
        let err = export_attention_maps(&model, &s, dir.path()).unwrap_err();
        assert!(err.to_string().contains(&s.id));
    }
}
