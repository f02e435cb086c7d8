//! Assembles the five streams, the embrace fusion, and the prediction heads
//! into one trainable model over `Sample` inputs.

use std::cell::Cell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{crop_regions, resize_bilinear, Sample};
use crate::encoders::{
    ConvEncoder, DepthConfig, DepthEncoder, ModalityFeature, PoseEncoder, PrecomputedAdapter,
    StreamKind, VitConfig, VitEncoder, VitOutput, STREAM_DIM,
};
use crate::fusion::{EmbraceFusion, FusionConfig, FusionHead, FusionMode};
use crate::params::{Binding, ParamStore};
use crate::rngstream::substream;
use crate::tensor::{Result, Tape, TensorError, VarId};

/// Where a conv-backbone stream takes its input from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StreamSource {
    /// Toy conv stack over the cropped/full image.
    Conv,
    /// Linear adapter over precomputed backbone features.
    Precomputed { dim: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub stream_dim: usize,
    pub face: StreamSource,
    pub body: StreamSource,
    pub scene: StreamSource,
    pub vit: VitConfig,
    pub depth: DepthConfig,
    pub fusion: FusionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let pre = StreamSource::Precomputed {
            dim: crate::dataset::SYNTH_PRECOMPUTED_DIM,
        };
        ModelConfig {
            stream_dim: STREAM_DIM,
            face: pre.clone(),
            body: pre.clone(),
            scene: pre,
            vit: VitConfig::default(),
            depth: DepthConfig::default(),
            fusion: FusionConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.fusion.validate()?;
        if self.vit.embed_dim != self.stream_dim {
            return Err(TensorError::InvalidConfig(format!(
                "vit embed_dim {} must equal stream_dim {}",
                self.vit.embed_dim, self.stream_dim
            )));
        }
        Ok(())
    }
}

/// The ablation feature sets: 1 = face/body/pose, 2 = scene+semantic,
/// 3 = depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub local: bool,
    pub global: bool,
    pub depth: bool,
}

impl FeatureSet {
    pub const fn all() -> Self {
        FeatureSet {
            local: true,
            global: true,
            depth: true,
        }
    }

    pub fn from_ids(ids: &[u8]) -> std::result::Result<Self, String> {
        let mut fs = FeatureSet {
            local: false,
            global: false,
            depth: false,
        };
        for &id in ids {
            match id {
                1 => fs.local = true,
                2 => fs.global = true,
                3 => fs.depth = true,
                other => return Err(format!("unknown feature id {other} (expected 1, 2 or 3)")),
            }
        }
        if !(fs.local || fs.global || fs.depth) {
            return Err("feature_set must be nonempty".into());
        }
        Ok(fs)
    }

    pub fn label(&self) -> String {
        let mut ids = Vec::new();
        if self.local {
            ids.push("1");
        }
        if self.global {
            ids.push("2");
        }
        if self.depth {
            ids.push("3");
        }
        format!("{{{}}}", ids.join(","))
    }
}

/// Counts how many times each input channel was read from a sample;
/// lets tests verify that masked modalities are never touched.
#[derive(Debug, Default)]
pub struct AccessCounters {
    pub face: Cell<u64>,
    pub body: Cell<u64>,
    pub pose: Cell<u64>,
    pub scene: Cell<u64>,
    pub semantic: Cell<u64>,
    pub depth: Cell<u64>,
}

enum StreamEncoder {
    Conv(ConvEncoder),
    Pre(PrecomputedAdapter),
}

pub struct EmotionModel {
    pub store: ParamStore,
    face: StreamEncoder,
    body: StreamEncoder,
    scene: StreamEncoder,
    pub pose: PoseEncoder,
    pub vit: VitEncoder,
    pub depth: DepthEncoder,
    pub embrace: EmbraceFusion,
    pub head: FusionHead,
    pub cfg: ModelConfig,
}

pub struct SampleForward {
    pub disc: VarId,
    pub cont: VarId,
    pub attention: Option<crate::encoders::AttentionMaps>,
}

impl EmotionModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = substream(seed, "init");
        let mut store = ParamStore::new();
        let d = cfg.stream_dim;
        let mk_stream = |store: &mut ParamStore, name: &str, src: &StreamSource, rng: &mut rand_chacha::ChaCha8Rng| {
            match src {
                StreamSource::Conv => StreamEncoder::Conv(ConvEncoder::new(store, name, d, rng)),
                StreamSource::Precomputed { dim } => {
                    StreamEncoder::Pre(PrecomputedAdapter::new(store, name, *dim, d, rng))
                }
            }
        };
        let face = mk_stream(&mut store, "face", &cfg.face, &mut rng);
        let body = mk_stream(&mut store, "body", &cfg.body, &mut rng);
        let scene = mk_stream(&mut store, "scene", &cfg.scene, &mut rng);
        let pose = PoseEncoder::new(&mut store, "pose", d, &mut rng);
        let vit = VitEncoder::new(&mut store, "semantic", cfg.vit.clone(), &mut rng)?;
        let depth = DepthEncoder::new(&mut store, "depth", cfg.depth.clone(), &mut rng)?;
        let embrace = EmbraceFusion::new(&mut store, "embrace", d, cfg.fusion.clone(), &mut rng)?;
        let head = FusionHead::new(
            &mut store,
            "fusion",
            vec![
                (StreamKind::Face, d),
                (StreamKind::BodyPose, cfg.fusion.embrace_dim),
                (StreamKind::Scene, d),
                (StreamKind::Semantic, d),
                (StreamKind::Depth, cfg.depth.out_dim),
            ],
            cfg.fusion.fused_dim,
            &mut rng,
        );
        Ok(EmotionModel {
            store,
            face,
            body,
            scene,
            pose,
            vit,
            depth,
            embrace,
            head,
            cfg,
        })
    }

    fn conv_stream(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        enc: &StreamEncoder,
        name: &str,
        sample: &Sample,
        counter: Option<&Cell<u64>>,
        cropped: Option<&crate::dataset::ImageArray>,
    ) -> Result<Option<VarId>> {
        match enc {
            StreamEncoder::Pre(adapter) => match sample.precomputed.get(name) {
                Some(feat) => {
                    if let Some(c) = counter {
                        c.set(c.get() + 1);
                    }
                    Ok(Some(adapter.forward(tape, bind, feat)?))
                }
                None => Ok(None),
            },
            StreamEncoder::Conv(conv) => match cropped {
                Some(img) => {
                    if let Some(c) = counter {
                        c.set(c.get() + 1);
                    }
                    Ok(Some(conv.forward(tape, bind, img)?))
                }
                None => Ok(None),
            },
        }
    }

    /// Runs all five streams, the embrace fusion over (body, pose), the
    /// early-fusion concatenation, and the prediction heads. Modalities
    /// masked by the feature set are never read from the sample.
    pub fn forward_sample(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        sample: &Sample,
        feature_set: FeatureSet,
        mode: FusionMode,
        rng: &mut impl Rng,
        counters: Option<&AccessCounters>,
        want_attention: bool,
    ) -> Result<SampleForward> {
        let needs_crop = matches!(self.face, StreamEncoder::Conv(_))
            || matches!(self.body, StreamEncoder::Conv(_));
        let (face_img, body_img) = if feature_set.local && needs_crop {
            crop_regions(sample)
        } else {
            (None, None)
        };

        // Feature 1: local personal features (face, body, pose)
        let (face_var, body_var, pose_var) = if feature_set.local {
            let face = self.conv_stream(
                tape,
                bind,
                &self.face,
                "face",
                sample,
                counters.map(|c| &c.face),
                face_img.as_ref(),
            )?;
            let body = self.conv_stream(
                tape,
                bind,
                &self.body,
                "body",
                sample,
                counters.map(|c| &c.body),
                body_img.as_ref(),
            )?;
            let pose = match &sample.pose {
                Some(p) => {
                    if let Some(c) = counters.map(|c| &c.pose) {
                        c.set(c.get() + 1);
                    }
                    self.pose.forward(tape, bind, p)?
                }
                None => None,
            };
            (face, body, pose)
        } else {
            (None, None, None)
        };

        // Feature 2: global scene + semantic features
        let (scene_var, semantic) = if feature_set.global {
            let scene = self.conv_stream(
                tape,
                bind,
                &self.scene,
                "scene",
                sample,
                counters.map(|c| &c.scene),
                sample.image.as_ref(),
            )?;
            let semantic = match &sample.image {
                Some(img) => {
                    if let Some(c) = counters.map(|c| &c.semantic) {
                        c.set(c.get() + 1);
                    }
                    let img = if img.h != self.cfg.vit.image_size || img.w != self.cfg.vit.image_size
                    {
                        resize_bilinear(img, self.cfg.vit.image_size, self.cfg.vit.image_size)
                    } else {
                        img.clone()
                    };
                    Some(self.vit.forward(tape, bind, &img)?)
                }
                None => None,
            };
            (scene, semantic)
        } else {
            (None, None)
        };

        // Feature 3: depth / proximity
        let depth_var = if feature_set.depth {
            match &sample.depth {
                Some(dm) => {
                    if let Some(c) = counters.map(|c| &c.depth) {
                        c.set(c.get() + 1);
                    }
                    let dm = if dm.h != self.cfg.depth.input_size || dm.w != self.cfg.depth.input_size
                    {
                        resize_bilinear(dm, self.cfg.depth.input_size, self.cfg.depth.input_size)
                    } else {
                        dm.clone()
                    };
                    Some(self.depth.forward(tape, bind, &dm)?)
                }
                None => None,
            }
        } else {
            None
        };

        let embraced = self
            .embrace
            .embrace(tape, bind, body_var, pose_var, mode, rng)?;

        let (semantic_var, attention) = match semantic {
            Some(VitOutput {
                feature, attention, ..
            }) => (Some(feature), want_attention.then_some(attention)),
            None => (None, None),
        };

        let bundle = [
            match face_var {
                Some(v) => ModalityFeature::present(StreamKind::Face, v),
                None => ModalityFeature::absent(StreamKind::Face),
            },
            embraced.feature,
            match scene_var {
                Some(v) => ModalityFeature::present(StreamKind::Scene, v),
                None => ModalityFeature::absent(StreamKind::Scene),
            },
            match semantic_var {
                Some(v) => ModalityFeature::present(StreamKind::Semantic, v),
                None => ModalityFeature::absent(StreamKind::Semantic),
            },
            match depth_var {
                Some(v) => ModalityFeature::present(StreamKind::Depth, v),
                None => ModalityFeature::absent(StreamKind::Depth),
            },
        ];
        let fused = self.head.fuse_concat(tape, bind, &bundle)?;
        let (disc, cont) = self.head.predict_heads(tape, bind, fused)?;
        Ok(SampleForward {
            disc,
            cont,
            attention,
        })
    }

    /// Eval-mode prediction with deterministic fusion.
    pub fn predict(
        &self,
        sample: &Sample,
        feature_set: FeatureSet,
    ) -> Result<(Vec<f32>, [f32; 3])> {
        let mut tape = Tape::new();
        let bind = self.store.bind(&mut tape);
        let mut rng = substream(0, "predict-unused");
        let out = self.forward_sample(
            &mut tape,
            &bind,
            sample,
            feature_set,
            FusionMode::Eval,
            &mut rng,
            None,
            false,
        )?;
        let disc = tape.value(out.disc).data().to_vec();
        let cont_data = tape.value(out.cont).data();
        Ok((disc, [cont_data[0], cont_data[1], cont_data[2]]))
    }
}
