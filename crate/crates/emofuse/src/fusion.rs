//! EmbraceNet-style fusion of body and pose into a combined stream, early
//! fusion of all five streams, and the discrete/continuous prediction heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{ModalityFeature, StreamKind};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{Result, Tape, TensorError, VarId};

pub const FUSED_DIM: usize = 256;
pub const N_DISCRETE: usize = 26;
pub const N_CONTINUOUS: usize = 3;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FusionConfig {
    pub embrace_dim: usize,
    /// Selection probabilities over (body, pose).
    pub modality_probs: [f32; 2],
    pub fused_dim: usize,
    /// Eval mode replaces stochastic selection with its expectation.
    pub deterministic_eval: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            embrace_dim: 64,
            modality_probs: [0.5, 0.5],
            fused_dim: FUSED_DIM,
            deterministic_eval: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embrace_dim == 0 {
            return Err(TensorError::InvalidConfig("embrace_dim must be >= 1".into()));
        }
        if self.modality_probs.iter().any(|&p| p < 0.0)
            || (self.modality_probs.iter().sum::<f32>() - 1.0).abs() > 1e-5
        {
            return Err(TensorError::InvalidConfig(format!(
                "modality_probs {:?} must be nonnegative and sum to 1",
                self.modality_probs
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Per-coordinate stochastic selection of one modality.
    Training,
    /// Probability-weighted expectation over the docked modalities.
    Eval,
}

/// Docking and embracement over the body/pose pair.
pub struct EmbraceFusion {
    dock_body_w: ParamId,
    dock_body_b: ParamId,
    dock_pose_w: ParamId,
    dock_pose_b: ParamId,
    pub cfg: FusionConfig,
}

/// Outcome of one embracement, including the selection mask when sampling.
pub struct EmbraceOutcome {
    pub feature: ModalityFeature,
    /// mask[j] = index of the modality whose docked value was used at j
    /// (training mode only).
    pub selection_mask: Option<Vec<usize>>,
}

impl EmbraceFusion {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        cfg: FusionConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embrace_dim;
        Ok(EmbraceFusion {
            dock_body_w: store.add_kaiming(&format!("{prefix}.dock.body.w"), &[d, in_dim], in_dim, rng),
            dock_body_b: store.add_zeros(&format!("{prefix}.dock.body.b"), &[d]),
            dock_pose_w: store.add_kaiming(&format!("{prefix}.dock.pose.w"), &[d, in_dim], in_dim, rng),
            dock_pose_b: store.add_zeros(&format!("{prefix}.dock.pose.b"), &[d]),
            cfg,
        })
    }

    fn dock(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        feat: VarId,
        w: ParamId,
        b: ParamId,
    ) -> Result<VarId> {
        let lin = tape.linear_vec(feat, bind.var(w), bind.var(b))?;
        tape.relu(lin)
    }

    /// Docks each present modality to the embrace dimension and combines
    /// them: stochastic per-coordinate selection in training mode, the
    /// probability-weighted expectation in eval mode. Both absent yields an
    /// absent combined stream.
    pub fn embrace(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        body: Option<VarId>,
        pose: Option<VarId>,
        mode: FusionMode,
        rng: &mut impl Rng,
    ) -> Result<EmbraceOutcome> {
        let mut docked: Vec<(usize, VarId)> = Vec::with_capacity(2);
        if let Some(f) = body {
            docked.push((0, self.dock(tape, bind, f, self.dock_body_w, self.dock_body_b)?));
        }
        if let Some(f) = pose {
            docked.push((1, self.dock(tape, bind, f, self.dock_pose_w, self.dock_pose_b)?));
        }

        if docked.is_empty() {
            return Ok(EmbraceOutcome {
                feature: ModalityFeature::absent(StreamKind::BodyPose),
                selection_mask: None,
            });
        }

        // Renormalize probabilities over the present modalities.
        let total: f32 = docked.iter().map(|(i, _)| self.cfg.modality_probs[*i]).sum();
        if total <= 0.0 {
            return Err(TensorError::InvalidConfig(
                "no positive probability mass on present modalities".into(),
            ));
        }
        let probs: Vec<f32> = docked
            .iter()
            .map(|(i, _)| self.cfg.modality_probs[*i] / total)
            .collect();

        if matches!(mode, FusionMode::Eval) && self.cfg.deterministic_eval {
            let mut acc: Option<VarId> = None;
            for ((_, d), p) in docked.iter().zip(&probs) {
                let scaled = tape.scale(*d, *p)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, scaled)?,
                    None => scaled,
                });
            }
            return Ok(EmbraceOutcome {
                feature: ModalityFeature::present(StreamKind::BodyPose, acc.unwrap()),
                selection_mask: None,
            });
        }

        let mask: Vec<usize> = (0..self.cfg.embrace_dim)
            .map(|_| {
                let r: f32 = rng.gen();
                let mut cum = 0.0;
                for (slot, p) in probs.iter().enumerate() {
                    cum += p;
                    if r < cum {
                        return slot;
                    }
                }
                probs.len() - 1
            })
            .collect();
        let inputs: Vec<VarId> = docked.iter().map(|(_, d)| *d).collect();
        let sel = tape.select_by_mask(&inputs, mask.clone())?;
        // Map slot indices back to global modality indices.
        let global_mask = mask.iter().map(|&slot| docked[slot].0).collect();
        Ok(EmbraceOutcome {
            feature: ModalityFeature::present(StreamKind::BodyPose, sel),
            selection_mask: Some(global_mask),
        })
    }
}

/// Early fusion: concatenation of the five streams (absent streams
/// contribute a learned absent embedding) projected to the fused dimension,
/// followed by the two prediction heads.
pub struct FusionHead {
    absent: Vec<(StreamKind, ParamId)>,
    proj_w: ParamId,
    proj_b: ParamId,
    disc_w: ParamId,
    disc_b: ParamId,
    cont_w: ParamId,
    cont_b: ParamId,
    pub stream_dims: Vec<(StreamKind, usize)>,
    pub fused_dim: usize,
}

impl FusionHead {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        stream_dims: Vec<(StreamKind, usize)>,
        fused_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let concat_dim: usize = stream_dims.iter().map(|(_, d)| d).sum();
        let absent = stream_dims
            .iter()
            .map(|(kind, d)| {
                (
                    *kind,
                    store.add_normal_002(&format!("{prefix}.absent.{}", kind.as_str()), &[*d], rng),
                )
            })
            .collect();
        FusionHead {
            absent,
            proj_w: store.add_kaiming(&format!("{prefix}.proj.w"), &[fused_dim, concat_dim], concat_dim, rng),
            proj_b: store.add_zeros(&format!("{prefix}.proj.b"), &[fused_dim]),
            disc_w: store.add_kaiming(&format!("{prefix}.disc.w"), &[N_DISCRETE, fused_dim], fused_dim, rng),
            disc_b: store.add_zeros(&format!("{prefix}.disc.b"), &[N_DISCRETE]),
            cont_w: store.add_kaiming(&format!("{prefix}.cont.w"), &[N_CONTINUOUS, fused_dim], fused_dim, rng),
            cont_b: store.add_zeros(&format!("{prefix}.cont.b"), &[N_CONTINUOUS]),
            stream_dims,
            fused_dim,
        }
    }

    /// Concatenates the five streams in the fixed (f1, f7, f4, f5, f6)
    /// order and projects to the fused dimension. Errors when every
    /// modality is absent.
    pub fn fuse_concat(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        bundle: &[ModalityFeature],
    ) -> Result<VarId> {
        if bundle.len() != self.stream_dims.len() {
            return Err(TensorError::ShapeMismatch {
                op: "fuse_concat",
                details: format!(
                    "bundle has {} streams, expected {}",
                    bundle.len(),
                    self.stream_dims.len()
                ),
            });
        }
        if bundle.iter().all(|m| !m.is_present()) {
            return Err(TensorError::InvalidConfig("no modality available".into()));
        }
        let mut parts = Vec::with_capacity(bundle.len());
        for (feat, (kind, _)) in bundle.iter().zip(&self.stream_dims) {
            assert_eq!(feat.kind, *kind, "bundle order must match configuration");
            let var = match feat.var {
                Some(v) => v,
                None => {
                    let absent = self
                        .absent
                        .iter()
                        .find(|(k, _)| k == kind)
                        .expect("absent embedding exists for every stream");
                    bind.var(absent.1)
                }
            };
            parts.push(var);
        }
        let concat = tape.concat(&parts)?;
        tape.linear_vec(concat, bind.var(self.proj_w), bind.var(self.proj_b))
    }

    /// Discrete head: linear then element-wise sigmoid (independent
    /// per-category probabilities). Continuous head: linear then sigmoid
    /// into the normalized VAD range.
    pub fn predict_heads(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        fused: VarId,
    ) -> Result<(VarId, VarId)> {
        if tape.value(fused).shape() != [self.fused_dim] {
            return Err(TensorError::ShapeMismatch {
                op: "predict_heads",
                details: format!(
                    "fused {:?}, expected [{}]",
                    tape.value(fused).shape(),
                    self.fused_dim
                ),
            });
        }
        let disc = tape.linear_vec(fused, bind.var(self.disc_w), bind.var(self.disc_b))?;
        let disc = tape.sigmoid(disc)?;
        let cont = tape.linear_vec(fused, bind.var(self.cont_w), bind.var(self.cont_b))?;
        let cont = tape.sigmoid(cont)?;
        Ok((disc, cont))
    }

    /// Softmax over the discrete logits, the optional mode for the 4-class
    /// confusion-matrix experiment.
    pub fn predict_softmax(&self, tape: &mut Tape, bind: &Binding, fused: VarId) -> Result<VarId> {
        let logits = tape.linear_vec(fused, bind.var(self.disc_w), bind.var(self.disc_b))?;
        tape.softmax_rows(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngstream::substream;
    use crate::tensor::Tensor;

    fn setup(probs: [f32; 2]) -> (ParamStore, EmbraceFusion) {
        let mut rng = substream(21, "fusion-test");
        let mut store = ParamStore::new();
        let cfg = FusionConfig {
            modality_probs: probs,
            ..FusionConfig::default()
        };
        let emb = EmbraceFusion::new(&mut store, "embrace", 16, cfg, &mut rng).unwrap();
        (store, emb)
    }

    fn feat(tape: &mut Tape, seed: f32) -> VarId {
        tape.leaf(Tensor::from_vec(
            (0..16).map(|i| seed + 0.1 * i as f32).collect(),
        ))
    }

    #[test]
    fn invalid_probs_rejected() {
        let cfg = FusionConfig {
            modality_probs: [0.7, 0.7],
            ..FusionConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn single_modality_equals_its_docking_bit_exactly() {
        let (store, emb) = setup([0.3, 0.7]);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let body = feat(&mut tape, 0.5);
        let mut rng = substream(1, "embrace");
        let out = emb
            .embrace(&mut tape, &bind, Some(body), None, FusionMode::Eval, &mut rng)
            .unwrap();
        let docked = emb
            .dock(&mut tape, &bind, body, emb.dock_body_w, emb.dock_body_b)
            .unwrap();
        // prob renormalizes to 1, expectation = docking exactly
        assert_eq!(tape.value(out.feature.var.unwrap()), tape.value(docked));
    }

    #[test]
    fn both_present_uniform_eval_is_half_half() {
        let (store, emb) = setup([0.5, 0.5]);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let body = feat(&mut tape, 0.5);
        let pose = feat(&mut tape, -0.3);
        let mut rng = substream(2, "embrace");
        let out = emb
            .embrace(&mut tape, &bind, Some(body), Some(pose), FusionMode::Eval, &mut rng)
            .unwrap();
        let db = emb
            .dock(&mut tape, &bind, body, emb.dock_body_w, emb.dock_body_b)
            .unwrap();
        let dp = emb
            .dock(&mut tape, &bind, pose, emb.dock_pose_w, emb.dock_pose_b)
            .unwrap();
        let e = tape.value(out.feature.var.unwrap()).clone();
        for ((v, b), p) in e
            .data()
            .iter()
            .zip(tape.value(db).data())
            .zip(tape.value(dp).data())
        {
            assert!((v - (0.5 * b + 0.5 * p)).abs() < 1e-6);
        }
    }

    #[test]
    fn both_absent_is_absent() {
        let (store, emb) = setup([0.5, 0.5]);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let mut rng = substream(3, "embrace");
        let out = emb
            .embrace(&mut tape, &bind, None, None, FusionMode::Training, &mut rng)
            .unwrap();
        assert!(!out.feature.is_present());
    }

    #[test]
    fn training_selection_mask_is_one_hot_per_coordinate() {
        let (store, emb) = setup([0.5, 0.5]);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let body = feat(&mut tape, 0.2);
        let pose = feat(&mut tape, 0.9);
        let mut rng = substream(4, "embrace");
        let out = emb
            .embrace(
                &mut tape,
                &bind,
                Some(body),
                Some(pose),
                FusionMode::Training,
                &mut rng,
            )
            .unwrap();
        let mask = out.selection_mask.unwrap();
        assert_eq!(mask.len(), emb.cfg.embrace_dim);
        assert!(mask.iter().all(|&m| m < 2));
        // Every coordinate equals exactly the selected modality's docked value.
        let db = emb
            .dock(&mut tape, &bind, body, emb.dock_body_w, emb.dock_body_b)
            .unwrap();
        let dp = emb
            .dock(&mut tape, &bind, pose, emb.dock_pose_w, emb.dock_pose_b)
            .unwrap();
        let e = tape.value(out.feature.var.unwrap()).clone();
        for (j, &m) in mask.iter().enumerate() {
            let expected = if m == 0 {
                tape.value(db).data()[j]
            } else {
                tape.value(dp).data()[j]
            };
            assert_eq!(e.data()[j], expected);
        }
    }

    #[test]
    fn absent_modality_gets_zero_gradient() {
        let (store, emb) = setup([0.5, 0.5]);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let body = feat(&mut tape, 0.4);
        let mut rng = substream(5, "embrace");
        let out = emb
            .embrace(&mut tape, &bind, Some(body), None, FusionMode::Training, &mut rng)
            .unwrap();
        let loss = tape.sum(out.feature.var.unwrap()).unwrap();
        let grads = tape.backward(loss);
        assert!(grads[bind.var(emb.dock_pose_w)].is_none());
        assert!(grads[bind.var(emb.dock_body_w)].is_some());
    }

    #[test]
    fn fuse_concat_shapes_and_missing_modality() {
        let mut rng = substream(22, "fusion-test");
        let mut store = ParamStore::new();
        let dims = vec![
            (StreamKind::Face, 64),
            (StreamKind::BodyPose, 64),
            (StreamKind::Scene, 64),
            (StreamKind::Semantic, 64),
            (StreamKind::Depth, 64),
        ];
        let head = FusionHead::new(&mut store, "fusion", dims, FUSED_DIM, &mut rng);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let mk = |tape: &mut Tape, kind, seed: f32| {
            let v = tape.leaf(Tensor::from_vec((0..64).map(|i| seed + i as f32 * 0.01).collect()));
            ModalityFeature::present(kind, v)
        };
        // all 5 present: concat 320 -> 256
        let bundle = vec![
            mk(&mut tape, StreamKind::Face, 0.1),
            mk(&mut tape, StreamKind::BodyPose, 0.2),
            mk(&mut tape, StreamKind::Scene, 0.3),
            mk(&mut tape, StreamKind::Semantic, 0.4),
            mk(&mut tape, StreamKind::Depth, 0.5),
        ];
        let fused = head.fuse_concat(&mut tape, &bind, &bundle).unwrap();
        assert_eq!(tape.value(fused).shape(), &[256]);

        // only scene present: graceful degradation
        let partial = vec![
            ModalityFeature::absent(StreamKind::Face),
            ModalityFeature::absent(StreamKind::BodyPose),
            mk(&mut tape, StreamKind::Scene, 0.3),
            ModalityFeature::absent(StreamKind::Semantic),
            ModalityFeature::absent(StreamKind::Depth),
        ];
        let fused2 = head.fuse_concat(&mut tape, &bind, &partial).unwrap();
        assert_eq!(tape.value(fused2).shape(), &[256]);
        assert!(tape.value(fused2).is_finite());

        // all absent: error
        let empty: Vec<ModalityFeature> = vec![
            ModalityFeature::absent(StreamKind::Face),
            ModalityFeature::absent(StreamKind::BodyPose),
            ModalityFeature::absent(StreamKind::Scene),
            ModalityFeature::absent(StreamKind::Semantic),
            ModalityFeature::absent(StreamKind::Depth),
        ];
        let err = head.fuse_concat(&mut tape, &bind, &empty).unwrap_err();
        assert!(err.to_string().contains("no modality available"));

        // determinism: same bundle twice
        let fused3 = head.fuse_concat(&mut tape, &bind, &bundle).unwrap();
        assert_eq!(tape.value(fused), tape.value(fused3));
    }

    #[test]
    fn zero_input_zero_bias_heads_output_half() {
        let mut rng = substream(23, "fusion-test");
        let mut store = ParamStore::new();
        let head = FusionHead::new(
            &mut store,
            "fusion",
            vec![(StreamKind::Face, 8)],
            16,
            &mut rng,
        );
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let zero = tape.leaf(Tensor::zeros(&[16]));
        let (disc, cont) = head.predict_heads(&mut tape, &bind, zero).unwrap();
        for &v in tape.value(disc).data() {
            assert_eq!(v, 0.5);
        }
        assert_eq!(tape.value(disc).shape(), &[26]);
        assert_eq!(tape.value(cont).shape(), &[3]);
    }

    #[test]
    fn head_scores_stay_in_open_unit_interval() {
        let mut rng = substream(24, "fusion-test");
        let mut store = ParamStore::new();
        let head = FusionHead::new(
            &mut store,
            "fusion",
            vec![(StreamKind::Face, 8)],
            16,
            &mut rng,
        );
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let x = tape.leaf(Tensor::from_vec((0..16).map(|i| i as f32 - 8.0).collect()));
        let (disc, cont) = head.predict_heads(&mut tape, &bind, x).unwrap();
        for &v in tape.value(disc).data().iter().chain(tape.value(cont).data()) {
            assert!(v > 0.0 && v < 1.0);
        }
    }
}
