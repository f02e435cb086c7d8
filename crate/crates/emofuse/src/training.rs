//! Mini-batch training loop: staircase lr schedule, Adam / SGD-momentum,
//! per-epoch checkpoints, and a CSV loss log.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Sample;
use crate::fusion::FusionMode;
use crate::losses::{self, LossWeights};
use crate::model::{EmotionModel, FeatureSet};
use crate::params::ParamStore;
use crate::rngstream::substream;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("tensor error: {0}")]
    Tensor(#[from] TensorError),
    #[error("loss config: {0}")]
    Loss(#[from] crate::losses::LossError),
    #[error("checkpoint io: {0}")]
    Format(#[from] crate::iofmt::FormatError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("training diverged at step {step}: {what} is not finite")]
    Diverged { step: u64, what: &'static str },
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f32,
    /// Staircase decay: lr is multiplied by `lr_decay` every `lr_every` epochs.
    pub lr_decay: f32,
    pub lr_every: usize,
    pub optimizer: OptimizerKind,
    pub momentum: f32,
    pub seed: u64,
    pub feature_set: Vec<u8>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 52,
            epochs: 45,
            lr: 0.001,
            lr_decay: 0.1,
            lr_every: 15,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            seed: 0,
            feature_set: vec![1, 2, 3],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if self.lr_every == 0 {
            return Err(TrainError::Config("lr_every must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(TrainError::Config("lr must be finite and >= 0".into()));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return Err(TrainError::Config("lr_decay must be positive".into()));
        }
        FeatureSet::from_ids(&self.feature_set).map_err(TrainError::Config)?;
        Ok(())
    }

    /// lr * decay^floor(epoch / every), epochs counted from 0.
    pub fn lr_at(&self, epoch: usize) -> f32 {
        self.lr * self.lr_decay.powi((epoch / self.lr_every) as i32)
    }
}

/// First-moment / second-moment state sized to the parameter list.
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

const ADAM_BETA1: f32 = 0.9;
const ADAM_BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f32, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        Optimizer {
            kind,
            momentum,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f32) {
        assert_eq!(grads.len(), self.m.len(), "grad list does not match params");
        self.t += 1;
        match self.kind {
            OptimizerKind::Adam => {
                let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                for (i, g) in grads.iter().enumerate() {
                    let m = self.m[i].data_mut();
                    for (mj, gj) in m.iter_mut().zip(g.data()) {
                        *mj = ADAM_BETA1 * *mj + (1.0 - ADAM_BETA1) * gj;
                    }
                    let v = self.v[i].data_mut();
                    for (vj, gj) in v.iter_mut().zip(g.data()) {
                        *vj = ADAM_BETA2 * *vj + (1.0 - ADAM_BETA2) * gj * gj;
                    }
                    let p = store.get_mut(crate::params::ParamId::from_index(i));
                    let pd = p.data_mut();
                    for j in 0..pd.len() {
                        let mh = self.m[i].data()[j] / bc1;
                        let vh = self.v[i].data()[j] / bc2;
                        pd[j] -= lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
            }
            OptimizerKind::SgdMomentum => {
                for (i, g) in grads.iter().enumerate() {
                    let m = self.m[i].data_mut();
                    for (mj, gj) in m.iter_mut().zip(g.data()) {
                        *mj = self.momentum * *mj + gj;
                    }
                    let p = store.get_mut(crate::params::ParamId::from_index(i));
                    let pd = p.data_mut();
                    for (pj, mj) in pd.iter_mut().zip(self.m[i].data()) {
                        *pj -= lr * mj;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub lr: f32,
    pub loss_disc: f32,
    pub loss_cont: f32,
    pub loss_comb: f32,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Number of completed epochs (matches the 1-based directory name).
    pub epoch: usize,
    pub step: u64,
    pub lr: f32,
    pub seed: u64,
    pub feature_set: Vec<u8>,
}

pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub final_loss: f32,
    pub checkpoints: Vec<PathBuf>,
}

fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<(), std::io::Error> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "step,epoch,lr,loss_disc,loss_cont,loss_comb")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.step, r.epoch, r.lr, r.loss_disc, r.loss_cont, r.loss_comb
        )?;
    }
    Ok(())
}

/// One mini-batch: mean combined loss over the batch, backward, returns
/// (grads, disc, cont, comb) means.
fn batch_step(
    model: &EmotionModel,
    batch: &[&Sample],
    feature_set: FeatureSet,
    weights: &LossWeights,
    cat_w: &[f32],
    rng: &mut impl rand::Rng,
) -> Result<(Vec<Tensor>, f32, f32, f32), TrainError> {
    let mut tape = Tape::new();
    let bind = model.store.bind(&mut tape);
    let mut disc_terms = Vec::with_capacity(batch.len());
    let mut cont_terms = Vec::with_capacity(batch.len());
    for sample in batch {
        let out = model.forward_sample(
            &mut tape,
            &bind,
            sample,
            feature_set,
            FusionMode::Training,
            rng,
            None,
            false,
        )?;
        let y: Vec<f32> = sample.annotation.disc.iter().map(|&b| b as f32).collect();
        disc_terms.push(losses::loss_disc(&mut tape, out.disc, &y, cat_w)?);
        cont_terms.push(losses::loss_cont(
            &mut tape,
            out.cont,
            &sample.annotation.cont,
            &weights.v,
            weights.huber_delta,
        )?);
    }
    let inv_n = 1.0 / batch.len() as f32;
    let mut disc_sum = disc_terms[0];
    let mut cont_sum = cont_terms[0];
    for &t in &disc_terms[1..] {
        disc_sum = tape.add(disc_sum, t)?;
    }
    for &t in &cont_terms[1..] {
        cont_sum = tape.add(cont_sum, t)?;
    }
    let disc_mean = tape.scale(disc_sum, inv_n)?;
    let cont_mean = tape.scale(cont_sum, inv_n)?;
    let comb = losses::loss_comb(
        &mut tape,
        disc_mean,
        cont_mean,
        weights.lambda_disc,
        weights.lambda_cont,
    )?;
    let d = tape.value(disc_mean).item();
    let c = tape.value(cont_mean).item();
    let l = tape.value(comb).item();
    let grads = tape.backward(comb);
    Ok((model.store.collect_grads(&bind, &grads), d, c, l))
}

/// Trains in place. `out_dir`, when given, receives `train_log.csv` and
/// `ckpt/epoch_{n}/{params.f32s,meta.json}` after every epoch (1-based).
pub fn train(
    model: &mut EmotionModel,
    samples: &[Sample],
    cfg: &TrainConfig,
    weights: &LossWeights,
    out_dir: Option<&Path>,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    weights.validate()?;
    if samples.is_empty() {
        return Err(TrainError::Config("no training samples".into()));
    }
    let feature_set = FeatureSet::from_ids(&cfg.feature_set).map_err(TrainError::Config)?;
    let cat_w = losses::category_weights(weights)?;
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.momentum, &model.store);
    let mut fusion_rng = substream(cfg.seed, "embrace-routing");

    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut step: u64 = 0;
    let mut last_loss = f32::NAN;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut shuffle_rng = substream(cfg.seed, &format!("shuffle-epoch-{epoch}"));
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);

        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (grads, d, c, l) =
                batch_step(model, &batch, feature_set, weights, &cat_w, &mut fusion_rng)?;
            if !(d.is_finite() && c.is_finite() && l.is_finite()) {
                return Err(TrainError::Diverged {
                    step,
                    what: "batch loss",
                });
            }
            optimizer.step(&mut model.store, &grads, lr);
            step += 1;
            last_loss = l;
            log.push(LogRow {
                step,
                epoch,
                lr,
                loss_disc: d,
                loss_cont: c,
                loss_comb: l,
            });
        }

        if let Some(dir) = out_dir {
            let ck = dir.join("ckpt").join(format!("epoch_{}", epoch + 1));
            fs::create_dir_all(&ck)?;
            model.store.save(&ck.join("params.f32s"))?;
            let meta = CheckpointMeta {
                epoch: epoch + 1,
                step,
                lr,
                seed: cfg.seed,
                feature_set: cfg.feature_set.clone(),
            };
            fs::write(ck.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
            checkpoints.push(ck);
        }
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        write_log_csv(&dir.join("train_log.csv"), &log)?;
    }
    Ok(TrainReport {
        log,
        final_loss: last_loss,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_synthetic;
    use crate::model::ModelConfig;

    #[test]
    fn lr_schedule_staircase() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.001);
        assert_eq!(cfg.lr_at(14), 0.001);
        assert!((cfg.lr_at(15) - 0.0001).abs() < 1e-9);
        assert!((cfg.lr_at(29) - 0.0001).abs() < 1e-9);
        assert!((cfg.lr_at(30) - 0.00001).abs() < 1e-10);
        assert!((cfg.lr_at(44) - 0.00001).abs() < 1e-10);
    }

    fn tiny_setup() -> (EmotionModel, Vec<crate::dataset::Sample>, TrainConfig) {
        let model = EmotionModel::new(ModelConfig::default(), 3).unwrap();
        let data = generate_synthetic(8, 11, 0.5);
        let cfg = TrainConfig {
            batch_size: 4,
            epochs: 1,
            ..TrainConfig::default()
        };
        (model, data.manifest.samples, cfg)
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let (mut model, samples, mut cfg) = tiny_setup();
        cfg.lr = 0.0;
        let before: Vec<Vec<f32>> = model.store.iter().map(|p| p.value.data().to_vec()).collect();
        train(&mut model, &samples, &cfg, &LossWeights::default(), None).unwrap();
        let after: Vec<Vec<f32>> = model.store.iter().map(|p| p.value.data().to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn loss_decreases_over_short_run() {
        let (mut model, samples, mut cfg) = tiny_setup();
        cfg.epochs = 8;
        cfg.lr = 0.01;
        let rep = train(&mut model, &samples, &cfg, &LossWeights::default(), None).unwrap();
        let first = rep.log.first().unwrap().loss_comb;
        let last = rep.log.last().unwrap().loss_comb;
        assert!(
            last < first,
            "loss did not decrease: first {first}, last {last}"
        );
    }

    #[test]
    fn checkpoints_and_log_are_written() {
        let (mut model, samples, mut cfg) = tiny_setup();
        cfg.epochs = 2;
        let dir = tempfile::tempdir().unwrap();
        let rep = train(
            &mut model,
            &samples,
            &cfg,
            &LossWeights::default(),
            Some(dir.path()),
        )
        .unwrap();
        assert_eq!(rep.checkpoints.len(), 2);
        assert!(dir.path().join("ckpt/epoch_2/params.f32s").exists());
        let meta: CheckpointMeta = serde_json::from_slice(
            &std::fs::read(dir.path().join("ckpt/epoch_2/meta.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(meta.epoch, 2);
        let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        assert!(log.starts_with("step,epoch,lr,loss_disc,loss_cont,loss_comb"));
        assert_eq!(log.lines().count(), 1 + rep.log.len());
    }

    #[test]
    fn checkpoint_restores_exact_params() {
        let (mut model, samples, cfg) = tiny_setup();
        let dir = tempfile::tempdir().unwrap();
        train(
            &mut model,
            &samples,
            &cfg,
            &LossWeights::default(),
            Some(dir.path()),
        )
        .unwrap();
        let trained: Vec<Vec<f32>> = model.store.iter().map(|p| p.value.data().to_vec()).collect();
        let mut fresh = EmotionModel::new(ModelConfig::default(), 99).unwrap();
        fresh
            .store
            .load(&dir.path().join("ckpt/epoch_1/params.f32s"))
            .unwrap();
        let loaded: Vec<Vec<f32>> = fresh.store.iter().map(|p| p.value.data().to_vec()).collect();
        assert_eq!(trained, loaded);
    }

    #[test]
    fn identical_seeds_give_identical_logs() {
        let (_, samples, mut cfg) = tiny_setup();
        cfg.epochs = 2;
        let run = |seed: u64| {
            let mut m = EmotionModel::new(ModelConfig::default(), 3).unwrap();
            let mut c = cfg.clone();
            c.seed = seed;
            train(&mut m, &samples, &c, &LossWeights::default(), None)
                .unwrap()
                .log
        };
        let a = run(5);
        let b = run(5);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.loss_comb.to_bits(), y.loss_comb.to_bits());
        }
        let c = run(6);
        assert!(a.iter().zip(&c).any(|(x, y)| x.loss_comb != y.loss_comb));
    }
}
