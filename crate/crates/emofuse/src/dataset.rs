//! EMOTIC-style annotation manifests, precomputed-feature ingestion, and a
//! synthetic desk-scale generator whose labels depend controllably on
//! specific modality channels.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::iofmt;
use crate::rngstream::substream;

/// The 26 discrete emotion categories in fixed row order.
pub const CATEGORIES: [&str; 26] = [
    "Affection",
    "Anger",
    "Annoyance",
    "Anticipation",
    "Aversion",
    "Confidence",
    "Disapproval",
    "Disconnection",
    "Disquietment",
    "Doubt/Confusion",
    "Embarrassment",
    "Engagement",
    "Esteem",
    "Excitement",
    "Fatigue",
    "Fear",
    "Happiness",
    "Pain",
    "Peace",
    "Pleasure",
    "Sadness",
    "Sensitivity",
    "Suffering",
    "Surprise",
    "Sympathy",
    "Yearning",
];

pub const N_CATEGORIES: usize = 26;
pub const DISCONNECTION: usize = 7;
pub const HAPPINESS: usize = 16;

/// Joints in the fixed 18-keypoint skeleton. Coordinate (-1,-1) is the
/// missing-joint sentinel.
pub const N_JOINTS: usize = 18;
pub const POSE_SENTINEL: f32 = -1.0;

/// Names of the precomputed-feature channels a sample must carry when it has
/// no image.
pub const PRECOMPUTED_CHANNELS: [&str; 3] = ["face", "body", "scene"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed record: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("sample {id:?}: {msg}")]
    Validation { id: String, msg: String },
    #[error("feature file: {0}")]
    Feature(#[from] iofmt::FormatError),
    #[error("image file {path}: {msg}")]
    Image { path: String, msg: String },
    #[error("{0}")]
    Other(String),
}

/// HWC float image with values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageArray {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl ImageArray {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        ImageArray {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn get(&self, y: usize, x: usize, ch: usize) -> f32 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f32) {
        self.data[(y * self.w + x) * self.c + ch] = v;
    }
}

/// Bilinear resize (align-corners-false convention).
pub fn resize_bilinear(img: &ImageArray, oh: usize, ow: usize) -> ImageArray {
    let mut out = ImageArray::new(oh, ow, img.c);
    let sy = img.h as f32 / oh as f32;
    let sx = img.w as f32 / ow as f32;
    for y in 0..oh {
        let fy = ((y as f32 + 0.5) * sy - 0.5).max(0.0).min(img.h as f32 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.h - 1);
        let wy = fy - y0 as f32;
        for x in 0..ow {
            let fx = ((x as f32 + 0.5) * sx - 0.5).max(0.0).min(img.w as f32 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.w - 1);
            let wx = fx - x0 as f32;
            for ch in 0..img.c {
                let v = img.get(y0, x0, ch) * (1.0 - wy) * (1.0 - wx)
                    + img.get(y0, x1, ch) * (1.0 - wy) * wx
                    + img.get(y1, x0, ch) * wy * (1.0 - wx)
                    + img.get(y1, x1, ch) * wy * wx;
                out.set(y, x, ch, v);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// 26-dim binary discrete vector plus 3-dim continuous VAD in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct EmotionAnnotation {
    pub disc: Vec<u8>,
    pub cont: [f32; 3],
}

impl EmotionAnnotation {
    pub fn validate(&self) -> Result<(), String> {
        if self.disc.len() != N_CATEGORIES {
            return Err(format!("disc has length {}, expected 26", self.disc.len()));
        }
        if self.disc.iter().any(|&v| v > 1) {
            return Err("disc entries must be 0 or 1".into());
        }
        if !self.disc.iter().any(|&v| v == 1) {
            return Err("at least one discrete category must be set".into());
        }
        if self.cont.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(format!("cont {:?} outside [0,1]", self.cont));
        }
        Ok(())
    }
}

/// One annotated person. Missing modalities are represented by absence,
/// never by zero-filled values.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Option<ImageArray>,
    pub depth: Option<ImageArray>,
    pub face_bbox: Option<Rect>,
    pub body_bbox: Option<Rect>,
    pub pose: Option<Vec<[f32; 2]>>,
    pub annotation: EmotionAnnotation,
    pub precomputed: BTreeMap<String, Vec<f32>>,
}

impl Sample {
    pub fn validate(&self) -> Result<(), String> {
        self.annotation.validate()?;
        if let Some(img) = &self.image {
            for (name, bbox) in [("face_bbox", &self.face_bbox), ("body_bbox", &self.body_bbox)] {
                if let Some(r) = bbox {
                    if r.w == 0 || r.h == 0 || r.x + r.w > img.w || r.y + r.h > img.h {
                        return Err(format!(
                            "{name} {r:?} outside image bounds {}x{}",
                            img.w, img.h
                        ));
                    }
                }
            }
            if img.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err("image values outside [0,1]".into());
            }
        } else {
            let complete = PRECOMPUTED_CHANNELS
                .iter()
                .all(|c| self.precomputed.contains_key(*c));
            if !complete {
                return Err(format!(
                    "sample has no image and incomplete precomputed map (needs {:?})",
                    PRECOMPUTED_CHANNELS
                ));
            }
        }
        if let Some(depth) = &self.depth {
            if depth.c != 1 {
                return Err("depth map must have a single channel".into());
            }
            if depth.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err("depth values outside [0,1]".into());
            }
        }
        if let Some(pose) = &self.pose {
            if pose.len() != N_JOINTS {
                return Err(format!("pose has {} joints, expected {N_JOINTS}", pose.len()));
            }
            for kp in pose {
                let missing = kp[0] == POSE_SENTINEL && kp[1] == POSE_SENTINEL;
                let in_bounds = kp.iter().all(|v| (0.0..=1.0).contains(v));
                if !missing && !in_bounds {
                    return Err(format!("pose keypoint {kp:?} outside [0,1]"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub samples: Vec<Sample>,
    pub split: Split,
    /// Empirical per-category frequency in this split, floored away from zero.
    pub category_priors: Vec<f32>,
}

impl DatasetManifest {
    pub fn from_samples(samples: Vec<Sample>, split: Split) -> Self {
        let priors = compute_priors(&samples);
        DatasetManifest {
            samples,
            split,
            category_priors: priors,
        }
    }
}

/// count/total per category. Zero-count categories are floored to
/// 1/(2*max(total,1)) so priors stay in (0,1] and loss weights stay finite.
pub fn compute_priors(samples: &[Sample]) -> Vec<f32> {
    let total = samples.len().max(1) as f32;
    let floor = 1.0 / (2.0 * total);
    (0..N_CATEGORIES)
        .map(|i| {
            let count = samples
                .iter()
                .filter(|s| s.annotation.disc[i] == 1)
                .count() as f32;
            (count / total).max(floor)
        })
        .collect()
}

// ---- manifest records on disk ----

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    face_bbox: Option<[usize; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    body_bbox: Option<[usize; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pose: Option<Vec<[f32; 2]>>,
    disc: Vec<u8>,
    cont: [f32; 3],
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    precomputed: BTreeMap<String, String>,
}

fn load_png(path: &Path) -> Result<ImageArray, DatasetError> {
    let img = image::open(path)
        .map_err(|e| DatasetError::Image {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ImageArray::new(h, w, 3);
    for (x, y, px) in img.enumerate_pixels() {
        for ch in 0..3 {
            out.set(y as usize, x as usize, ch, px.0[ch] as f32 / 255.0);
        }
    }
    Ok(out)
}

fn save_png(img: &ImageArray, path: &Path) -> Result<(), DatasetError> {
    assert_eq!(img.c, 3);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut buf = image::RgbImage::new(img.w as u32, img.h as u32);
    for y in 0..img.h {
        for x in 0..img.w {
            let px = [
                (img.get(y, x, 0).clamp(0.0, 1.0) * 255.0).round() as u8,
                (img.get(y, x, 1).clamp(0.0, 1.0) * 255.0).round() as u8,
                (img.get(y, x, 2).clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| DatasetError::Image {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

fn load_depth(path: &Path) -> Result<ImageArray, DatasetError> {
    let entry = iofmt::read_single(path)?;
    let (h, w) = match entry.shape.as_slice() {
        [h, w] => (*h, *w),
        [h, w, 1] => (*h, *w),
        other => {
            return Err(DatasetError::Other(format!(
                "depth file {} has shape {:?}, expected [H,W] or [H,W,1]",
                path.display(),
                other
            )))
        }
    };
    Ok(ImageArray {
        h,
        w,
        c: 1,
        data: entry.data,
    })
}

fn split_from_path(path: &Path) -> Split {
    match path.file_stem().and_then(|s| s.to_str()) {
        Some("val") => Split::Val,
        Some("test") => Split::Test,
        _ => Split::Train,
    }
}

/// Loads a JSON-lines manifest, resolving asset paths relative to the
/// manifest file. Sample invariants are validated; category priors are
/// recomputed from the annotations, never trusted from the file.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let file = std::fs::File::open(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut samples = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| DatasetError::Malformed {
                line: idx + 1,
                msg: e.to_string(),
            })?;
        let image = record
            .image
            .as_ref()
            .map(|p| load_png(&base.join(p)))
            .transpose()?;
        let depth = record
            .depth
            .as_ref()
            .map(|p| load_depth(&base.join(p)))
            .transpose()?;
        let mut precomputed = BTreeMap::new();
        for (name, rel) in &record.precomputed {
            let entry = iofmt::read_single(&base.join(rel))?;
            precomputed.insert(name.clone(), entry.data);
        }
        let sample = Sample {
            id: record.id.clone(),
            image,
            depth,
            face_bbox: record.face_bbox.map(|[x, y, w, h]| Rect { x, y, w, h }),
            body_bbox: record.body_bbox.map(|[x, y, w, h]| Rect { x, y, w, h }),
            pose: record.pose,
            annotation: EmotionAnnotation {
                disc: record.disc,
                cont: record.cont,
            },
            precomputed,
        };
        sample.validate().map_err(|msg| DatasetError::Validation {
            id: sample.id.clone(),
            msg,
        })?;
        samples.push(sample);
    }
    Ok(DatasetManifest::from_samples(samples, split_from_path(path)))
}

/// Writes a manifest plus asset files (images, depth maps, precomputed
/// features) under the manifest's directory.
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DatasetError> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(base)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for sample in &manifest.samples {
        let image = match &sample.image {
            Some(img) => {
                let rel = format!("images/{}.png", sample.id);
                save_png(img, &base.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        let depth = match &sample.depth {
            Some(d) => {
                let rel = format!("depth/{}.f32", sample.id);
                iofmt::write_single(&base.join(&rel), &[d.h, d.w], &d.data)?;
                Some(rel)
            }
            None => None,
        };
        let mut precomputed = BTreeMap::new();
        for (name, vec) in &sample.precomputed {
            let rel = format!("features/{}_{}.f32", sample.id, name.replace('/', "_"));
            iofmt::write_single(&base.join(&rel), &[vec.len()], vec)?;
            precomputed.insert(name.clone(), rel);
        }
        let record = ManifestRecord {
            id: sample.id.clone(),
            image,
            depth,
            face_bbox: sample.face_bbox.map(|r| [r.x, r.y, r.w, r.h]),
            body_bbox: sample.body_bbox.map(|r| [r.x, r.y, r.w, r.h]),
            pose: sample.pose.clone(),
            disc: sample.annotation.disc.clone(),
            cont: sample.annotation.cont,
            precomputed,
        };
        serde_json::to_writer(&mut out, &record).map_err(|e| DatasetError::Other(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

// ---- region cropping ----

pub const FACE_SIZE: usize = 128;
pub const BODY_SIZE: usize = 224;

/// Crops and resizes the face (128x128) and body (224x224) regions.
/// A missing bbox yields `None` for that region, feeding the
/// missing-modality path; this never raises.
pub fn crop_regions(sample: &Sample) -> (Option<ImageArray>, Option<ImageArray>) {
    let Some(img) = &sample.image else {
        return (None, None);
    };
    let crop = |r: &Rect| {
        let mut out = ImageArray::new(r.h, r.w, img.c);
        for y in 0..r.h {
            for x in 0..r.w {
                for ch in 0..img.c {
                    out.set(y, x, ch, img.get(r.y + y, r.x + x, ch));
                }
            }
        }
        out
    };
    let face = sample
        .face_bbox
        .as_ref()
        .map(|r| resize_bilinear(&crop(r), FACE_SIZE, FACE_SIZE));
    let body = sample
        .body_bbox
        .as_ref()
        .map(|r| resize_bilinear(&crop(r), BODY_SIZE, BODY_SIZE));
    (face, body)
}

// ---- synthetic generation ----

pub const SYNTH_PRECOMPUTED_DIM: usize = 8;
pub const SYNTH_IMAGE_SIZE: usize = 32;
pub const SYNTH_DEPTH_SIZE: usize = 32;
const LATENT_DIM: usize = 4;
const TARGET_PRIOR: f32 = 0.30;

/// Per-sample planted factors, exposed so tests can probe them.
#[derive(Debug, Clone)]
pub struct PlantedFactors {
    pub local: [f32; LATENT_DIM],
    pub scene: [f32; LATENT_DIM],
    /// Normalized inter-person distance in [0,1].
    pub distance: f32,
}

pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub factors: Vec<PlantedFactors>,
}

fn randn(rng: &mut impl Rng) -> f32 {
    StandardNormal.sample(rng)
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Canonical 18-joint layout in normalized image coordinates.
fn base_skeleton() -> [[f32; 2]; N_JOINTS] {
    [
        [0.50, 0.10], // nose
        [0.50, 0.20], // neck
        [0.40, 0.20], // r shoulder
        [0.35, 0.35], // r elbow
        [0.33, 0.50], // r wrist
        [0.60, 0.20], // l shoulder
        [0.65, 0.35], // l elbow
        [0.67, 0.50], // l wrist
        [0.44, 0.52], // r hip
        [0.43, 0.72], // r knee
        [0.43, 0.90], // r ankle
        [0.56, 0.52], // l hip
        [0.57, 0.72], // l knee
        [0.57, 0.90], // l ankle
        [0.47, 0.08], // r eye
        [0.53, 0.08], // l eye
        [0.44, 0.10], // r ear
        [0.56, 0.10], // l ear
    ]
}

/// Deterministic desk-scale dataset. `scene_signal` in [0,1] controls the
/// fraction of label information carried only by scene/semantic channels;
/// the remainder is carried by face/body/pose channels. The depth channel
/// encodes a planted inter-person distance that drives the
/// "Disconnection"-analog label.
pub fn generate_synthetic(n: usize, seed: u64, scene_signal: f32) -> SyntheticDataset {
    assert!(n >= 1, "n must be >= 1");
    assert!((0.0..=1.0).contains(&scene_signal));
    let s = scene_signal;

    // Fixed per-dataset mixing matrices and category rules.
    let mut rule_rng = substream(seed, "synthetic-rules");
    let mix_face: Vec<f32> = (0..SYNTH_PRECOMPUTED_DIM * LATENT_DIM)
        .map(|_| randn(&mut rule_rng))
        .collect();
    let mix_body: Vec<f32> = (0..SYNTH_PRECOMPUTED_DIM * LATENT_DIM)
        .map(|_| randn(&mut rule_rng))
        .collect();
    let mix_scene: Vec<f32> = (0..SYNTH_PRECOMPUTED_DIM * LATENT_DIM)
        .map(|_| randn(&mut rule_rng))
        .collect();
    let mix_pose: Vec<f32> = (0..2 * N_JOINTS * LATENT_DIM)
        .map(|_| randn(&mut rule_rng))
        .collect();
    let unit = |rng: &mut rand_chacha::ChaCha8Rng| -> [f32; LATENT_DIM] {
        let mut v = [0.0f32; LATENT_DIM];
        for x in &mut v {
            *x = randn(rng);
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
        v.map(|x| x / norm)
    };
    let rules_local: Vec<[f32; LATENT_DIM]> =
        (0..N_CATEGORIES).map(|_| unit(&mut rule_rng)).collect();
    let rules_scene: Vec<[f32; LATENT_DIM]> =
        (0..N_CATEGORIES).map(|_| unit(&mut rule_rng)).collect();
    let rules_cont: Vec<[f32; 2 * LATENT_DIM]> = (0..3)
        .map(|_| {
            let mut v = [0.0f32; 2 * LATENT_DIM];
            for x in &mut v {
                *x = randn(&mut rule_rng);
            }
            v
        })
        .collect();

    let mut rng = substream(seed, "synthetic-samples");
    let mut factors = Vec::with_capacity(n);
    for _ in 0..n {
        let mut local = [0.0f32; LATENT_DIM];
        let mut scene = [0.0f32; LATENT_DIM];
        for x in &mut local {
            *x = randn(&mut rng);
        }
        for x in &mut scene {
            *x = randn(&mut rng);
        }
        factors.push(PlantedFactors {
            local,
            scene,
            distance: rng.gen_range(0.0..1.0),
        });
    }

    // Category scores; thresholds are empirical quantiles so priors land
    // near TARGET_PRIOR regardless of scene_signal.
    let dot = |a: &[f32; LATENT_DIM], b: &[f32; LATENT_DIM]| -> f32 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    };
    let mut scores = vec![vec![0.0f32; n]; N_CATEGORIES];
    for (si, f) in factors.iter().enumerate() {
        for cat in 0..N_CATEGORIES {
            let z = if cat == DISCONNECTION {
                0.25 * (1.0 - s) * dot(&rules_local[cat], &f.local)
                    + 0.75 * (2.0 * f.distance - 1.0)
            } else {
                (1.0 - s) * dot(&rules_local[cat], &f.local)
                    + s * dot(&rules_scene[cat], &f.scene)
            };
            scores[cat][si] = z;
        }
    }
    let thresholds: Vec<f32> = scores
        .iter()
        .map(|col| {
            let mut sorted = col.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let k = ((1.0 - TARGET_PRIOR) * (n as f32 - 1.0)).round() as usize;
            sorted[k.min(n - 1)]
        })
        .collect();

    let mut noise_rng = substream(seed, "synthetic-noise");
    let mut samples = Vec::with_capacity(n);
    for (si, f) in factors.iter().enumerate() {
        let mut disc = vec![0u8; N_CATEGORIES];
        for cat in 0..N_CATEGORIES {
            if scores[cat][si] > thresholds[cat] {
                disc[cat] = 1;
            }
        }
        if !disc.iter().any(|&d| d == 1) {
            let best = (0..N_CATEGORIES)
                .max_by(|&a, &b| {
                    (scores[a][si] - thresholds[a])
                        .partial_cmp(&(scores[b][si] - thresholds[b]))
                        .unwrap()
                })
                .unwrap();
            disc[best] = 1;
        }
        let both: Vec<f32> = f
            .local
            .iter()
            .map(|v| v * (1.0 - s))
            .chain(f.scene.iter().map(|v| v * s))
            .collect();
        let mut cont = [0.0f32; 3];
        for k in 0..3 {
            cont[k] = sigmoid(
                both.iter()
                    .zip(&rules_cont[k])
                    .map(|(x, w)| x * w)
                    .sum::<f32>(),
            );
        }

        let mixed = |mix: &[f32], latent: &[f32; LATENT_DIM], rng: &mut rand_chacha::ChaCha8Rng| {
            (0..SYNTH_PRECOMPUTED_DIM)
                .map(|i| {
                    let base: f32 = (0..LATENT_DIM)
                        .map(|j| mix[i * LATENT_DIM + j] * latent[j])
                        .sum();
                    base + 0.05 * randn(rng)
                })
                .collect::<Vec<f32>>()
        };
        let mut precomputed = BTreeMap::new();
        precomputed.insert("face".to_string(), mixed(&mix_face, &f.local, &mut noise_rng));
        precomputed.insert("body".to_string(), mixed(&mix_body, &f.local, &mut noise_rng));
        precomputed.insert("scene".to_string(), mixed(&mix_scene, &f.scene, &mut noise_rng));

        // Pose: canonical skeleton perturbed by the local factor.
        let base = base_skeleton();
        let mut pose = Vec::with_capacity(N_JOINTS);
        for j in 0..N_JOINTS {
            let mut kp = [0.0f32; 2];
            for d in 0..2 {
                let offset: f32 = (0..LATENT_DIM)
                    .map(|k| mix_pose[(j * 2 + d) * LATENT_DIM + k] * f.local[k])
                    .sum();
                kp[d] = (base[j][d] + 0.04 * offset + 0.002 * randn(&mut noise_rng))
                    .clamp(0.0, 1.0);
            }
            pose.push(kp);
        }

        // Image: quadrants colored by the scene factor; feeds the semantic
        // transformer stream.
        let sz = SYNTH_IMAGE_SIZE;
        let mut image = ImageArray::new(sz, sz, 3);
        for y in 0..sz {
            for x in 0..sz {
                let q = (y / (sz / 2)) * 2 + x / (sz / 2);
                let v = sigmoid(f.scene[q]);
                image.set(y, x, 0, v);
                image.set(y, x, 1, 1.0 - v);
                image.set(y, x, 2, 0.5);
            }
        }

        // Depth: two person blobs whose separation and level encode the
        // planted distance.
        let dz = SYNTH_DEPTH_SIZE;
        let mut depth = ImageArray::new(dz, dz, 1);
        let level = 0.15 + 0.6 * f.distance;
        let sep = 4.0 + f.distance * (dz as f32 - 12.0);
        let cy = dz / 2;
        let centers = [
            (dz as f32 / 2.0 - sep / 2.0).round() as isize,
            (dz as f32 / 2.0 + sep / 2.0).round() as isize,
        ];
        for y in 0..dz {
            for x in 0..dz {
                depth.set(y, x, 0, 0.95);
            }
        }
        for &cx in &centers {
            for dy in -3isize..=3 {
                for dx in -2isize..=2 {
                    let (yy, xx) = (cy as isize + dy, cx + dx);
                    if yy >= 0 && yy < dz as isize && xx >= 0 && xx < dz as isize {
                        depth.set(yy as usize, xx as usize, 0, level);
                    }
                }
            }
        }

        samples.push(Sample {
            id: format!("synth_{si:05}"),
            image: Some(image),
            depth: Some(depth),
            face_bbox: None,
            body_bbox: None,
            pose: Some(pose),
            annotation: EmotionAnnotation { disc, cont },
            precomputed,
        });
    }

    SyntheticDataset {
        manifest: DatasetManifest::from_samples(samples, Split::Train),
        factors,
    }
}

/// 70/15/15 split of a synthetic dataset, preserving generation order.
pub fn split_dataset(dataset: &SyntheticDataset) -> (DatasetManifest, DatasetManifest, DatasetManifest) {
    let n = dataset.manifest.samples.len();
    let n_train = (n as f32 * 0.70).round() as usize;
    let n_val = (n as f32 * 0.15).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);
    let samples = &dataset.manifest.samples;
    let train = DatasetManifest::from_samples(samples[..n_train].to_vec(), Split::Train);
    let val = DatasetManifest::from_samples(
        samples[n_train..n_train + n_val].to_vec(),
        Split::Val,
    );
    let test = DatasetManifest::from_samples(samples[n_train + n_val..].to_vec(), Split::Test);
    (train, val, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_sample(id: &str) -> Sample {
        let mut disc = vec![0u8; N_CATEGORIES];
        disc[HAPPINESS] = 1;
        let mut precomputed = BTreeMap::new();
        for ch in PRECOMPUTED_CHANNELS {
            precomputed.insert(ch.to_string(), vec![0.1, 0.2]);
        }
        Sample {
            id: id.to_string(),
            image: None,
            depth: None,
            face_bbox: None,
            body_bbox: None,
            pose: None,
            annotation: EmotionAnnotation {
                disc,
                cont: [0.5, 0.5, 0.5],
            },
            precomputed,
        }
    }

    #[test]
    fn manifest_round_trip_two_samples() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = DatasetManifest::from_samples(
            vec![minimal_sample("a"), minimal_sample("b")],
            Split::Train,
        );
        let path = dir.path().join("train.jsonl");
        write_manifest(&manifest, &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.samples.len(), 2);
        assert_eq!(loaded.samples, manifest.samples);
        assert_eq!(loaded.split, Split::Train);
    }

    #[test]
    fn all_zero_disc_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut sample = minimal_sample("bad");
        sample.annotation.disc = vec![0u8; N_CATEGORIES];
        let path = dir.path().join("train.jsonl");
        // Bypass write-side validation by writing the record manually.
        let record = serde_json::json!({
            "id": "bad",
            "disc": sample.annotation.disc,
            "cont": [0.5, 0.5, 0.5],
            "precomputed": {},
        });
        std::fs::write(&path, format!("{record}\n")).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(matches!(err, DatasetError::Validation { .. }), "{err}");
    }

    #[test]
    fn malformed_record_names_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        std::fs::write(&path, "{\"id\": \"ok\"\nnot json\n").unwrap();
        let err = load_manifest(&path).unwrap_err();
        match err {
            DatasetError::Malformed { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn priors_count_over_total() {
        let mut samples: Vec<Sample> = (0..10).map(|i| minimal_sample(&format!("s{i}"))).collect();
        // 4 of 10 labeled Happiness; others get Anger instead.
        for s in samples.iter_mut().skip(4) {
            s.annotation.disc[HAPPINESS] = 0;
            s.annotation.disc[1] = 1;
        }
        let manifest = DatasetManifest::from_samples(samples, Split::Train);
        assert!((manifest.category_priors[HAPPINESS] - 0.4).abs() < 1e-6);
        assert!((manifest.category_priors[1] - 0.6).abs() < 1e-6);
    }

    #[test]
    fn priors_multi_label_can_exceed_one_in_total() {
        let dataset = generate_synthetic(100, 3, 0.5);
        let total: f32 = dataset.manifest.category_priors.iter().sum();
        assert!(total >= 1.0, "multi-label priors sum {total}");
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(60, 7, 0.5);
        let b = generate_synthetic(60, 7, 0.5);
        assert_eq!(a.manifest, b.manifest);
        let c = generate_synthetic(60, 8, 0.5);
        assert_ne!(a.manifest, c.manifest);
    }

    #[test]
    fn synthetic_samples_validate() {
        let dataset = generate_synthetic(40, 11, 0.3);
        for s in &dataset.manifest.samples {
            s.validate().unwrap();
        }
    }

    #[test]
    fn bbox_out_of_bounds_rejected() {
        let mut sample = minimal_sample("x");
        sample.image = Some(ImageArray::new(16, 16, 3));
        sample.face_bbox = Some(Rect {
            x: 10,
            y: 10,
            w: 10,
            h: 4,
        });
        assert!(sample.validate().is_err());
    }

    #[test]
    fn crop_full_image_is_resize_of_whole_image() {
        let mut img = ImageArray::new(16, 16, 3);
        for y in 0..16 {
            for x in 0..16 {
                for c in 0..3 {
                    img.set(y, x, c, ((x + y + c) % 7) as f32 / 7.0);
                }
            }
        }
        let mut sample = minimal_sample("full");
        sample.image = Some(img.clone());
        sample.face_bbox = Some(Rect {
            x: 0,
            y: 0,
            w: 16,
            h: 16,
        });
        let (face, body) = crop_regions(&sample);
        let face = face.unwrap();
        assert!(body.is_none());
        assert_eq!((face.h, face.w), (FACE_SIZE, FACE_SIZE));
        let direct = resize_bilinear(&img, FACE_SIZE, FACE_SIZE);
        assert_eq!(face, direct);
    }

    #[test]
    fn crop_constant_color_stays_constant_and_in_range() {
        let mut img = ImageArray::new(64, 64, 3);
        img.data.fill(0.37);
        let mut sample = minimal_sample("const");
        sample.image = Some(img);
        sample.face_bbox = Some(Rect {
            x: 8,
            y: 8,
            w: 48,
            h: 48,
        });
        let (face, _) = crop_regions(&sample);
        for &v in &face.unwrap().data {
            assert!((v - 0.37).abs() < 1e-6);
        }
    }

    #[test]
    fn missing_bbox_yields_absent_region() {
        let mut sample = minimal_sample("nobbox");
        sample.image = Some(ImageArray::new(8, 8, 3));
        let (face, body) = crop_regions(&sample);
        assert!(face.is_none() && body.is_none());
    }

    #[test]
    fn split_arithmetic_70_15_15() {
        let dataset = generate_synthetic(200, 7, 0.5);
        let (train, val, test) = split_dataset(&dataset);
        assert_eq!(train.samples.len(), 140);
        assert_eq!(val.samples.len(), 30);
        assert_eq!(test.samples.len(), 30);
    }

    #[test]
    fn split_of_one_sample_puts_it_in_train() {
        let dataset = generate_synthetic(1, 7, 0.5);
        let (train, val, test) = split_dataset(&dataset);
        assert_eq!(train.samples.len(), 1);
        assert!(val.samples.is_empty() && test.samples.is_empty());
    }
}
