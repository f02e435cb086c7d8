//! The five modality streams: face/body/scene conv encoders (or precomputed
//! feature adapters), a skeleton graph encoder for pose, a patch transformer
//! for semantic features, and a stride-2 conv stack for depth/proximity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ImageArray, N_JOINTS, POSE_SENTINEL};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::{Result, Tape, Tensor, TensorError, VarId};

/// Default per-stream feature length.
pub const STREAM_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Face,
    BodyPose,
    Scene,
    Semantic,
    Depth,
}

impl StreamKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StreamKind::Face => "face",
            StreamKind::BodyPose => "body_pose",
            StreamKind::Scene => "scene",
            StreamKind::Semantic => "semantic",
            StreamKind::Depth => "depth",
        }
    }
}

/// A stream output on the tape; `None` means the modality is absent.
/// Absence is a value, not an error: this is the missing-modality contract.
#[derive(Debug, Clone, Copy)]
pub struct ModalityFeature {
    pub kind: StreamKind,
    pub var: Option<VarId>,
}

impl ModalityFeature {
    pub fn present(kind: StreamKind, var: VarId) -> Self {
        ModalityFeature {
            kind,
            var: Some(var),
        }
    }

    pub fn absent(kind: StreamKind) -> Self {
        ModalityFeature { kind, var: None }
    }

    pub fn is_present(&self) -> bool {
        self.var.is_some()
    }
}

pub fn image_to_chw(img: &ImageArray) -> Tensor {
    let mut data = vec![0.0; img.c * img.h * img.w];
    for ch in 0..img.c {
        for y in 0..img.h {
            for x in 0..img.w {
                data[(ch * img.h + y) * img.w + x] = img.get(y, x, ch);
            }
        }
    }
    Tensor::new(vec![img.c, img.h, img.w], data)
}

pub fn image_to_hwc(img: &ImageArray) -> Tensor {
    Tensor::new(vec![img.h, img.w, img.c], img.data.clone())
}

// ---- toy residual conv encoder (face / body / scene stand-in) ----

pub struct ConvEncoder {
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    conv3_w: ParamId,
    conv3_b: ParamId,
    fc_w: ParamId,
    fc_b: ParamId,
    pub out_dim: usize,
}

impl ConvEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, out_dim: usize, rng: &mut impl Rng) -> Self {
        ConvEncoder {
            conv1_w: store.add_kaiming(&format!("{prefix}.conv1.w"), &[8, 3, 3, 3], 27, rng),
            conv1_b: store.add_zeros(&format!("{prefix}.conv1.b"), &[8]),
            conv2_w: store.add_kaiming(&format!("{prefix}.conv2.w"), &[8, 8, 3, 3], 72, rng),
            conv2_b: store.add_zeros(&format!("{prefix}.conv2.b"), &[8]),
            conv3_w: store.add_kaiming(&format!("{prefix}.conv3.w"), &[16, 8, 3, 3], 72, rng),
            conv3_b: store.add_zeros(&format!("{prefix}.conv3.b"), &[16]),
            fc_w: store.add_kaiming(&format!("{prefix}.fc.w"), &[out_dim, 16], 16, rng),
            fc_b: store.add_zeros(&format!("{prefix}.fc.b"), &[out_dim]),
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, img: &ImageArray) -> Result<VarId> {
        let x = tape.leaf(image_to_chw(img));
        self.forward_var(tape, bind, x)
    }

    pub fn forward_var(&self, tape: &mut Tape, bind: &Binding, x: VarId) -> Result<VarId> {
        let h1 = tape.conv2d(x, bind.var(self.conv1_w), bind.var(self.conv1_b), 2, 1)?;
        let h1 = tape.relu(h1)?;
        let h2 = tape.conv2d(h1, bind.var(self.conv2_w), bind.var(self.conv2_b), 1, 1)?;
        let h2 = tape.relu(h2)?;
        let h2 = tape.add(h2, h1)?; // residual
        let h3 = tape.conv2d(h2, bind.var(self.conv3_w), bind.var(self.conv3_b), 2, 1)?;
        let h3 = tape.relu(h3)?;
        // global average pool: [16,H,W] -> [16]
        let shape = tape.value(h3).shape().to_vec();
        let flat = tape.reshape(h3, vec![shape[0], shape[1] * shape[2]])?;
        let pooled = tape.mean_rows(flat)?;
        tape.linear_vec(pooled, bind.var(self.fc_w), bind.var(self.fc_b))
    }
}

/// Linear adapter for precomputed backbone features.
pub struct PrecomputedAdapter {
    w: ParamId,
    b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl PrecomputedAdapter {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        PrecomputedAdapter {
            w: store.add_kaiming(&format!("{prefix}.w"), &[out_dim, in_dim], in_dim, rng),
            b: store.add_zeros(&format!("{prefix}.b"), &[out_dim]),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, feat: &[f32]) -> Result<VarId> {
        if feat.len() != self.in_dim {
            return Err(TensorError::ShapeMismatch {
                op: "precomputed_adapter",
                details: format!("feature length {} vs configured {}", feat.len(), self.in_dim),
            });
        }
        let x = tape.leaf(Tensor::from_vec(feat.to_vec()));
        self.forward_var(tape, bind, x)
    }

    pub fn forward_var(&self, tape: &mut Tape, bind: &Binding, x: VarId) -> Result<VarId> {
        tape.linear_vec(x, bind.var(self.w), bind.var(self.b))
    }
}

// ---- pose graph encoder ----

/// Skeleton edges of the fixed 18-joint layout.
const SKELETON_EDGES: [(usize, usize); 17] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 4),
    (1, 5),
    (5, 6),
    (6, 7),
    (1, 8),
    (8, 9),
    (9, 10),
    (1, 11),
    (11, 12),
    (12, 13),
    (0, 14),
    (14, 16),
    (0, 15),
    (15, 17),
];

const NECK: usize = 1;
const R_HIP: usize = 8;
const L_HIP: usize = 11;

/// Symmetrically normalized adjacency with self-loops.
fn normalized_adjacency() -> Tensor {
    let n = N_JOINTS;
    let mut a = vec![0.0f32; n * n];
    for i in 0..n {
        a[i * n + i] = 1.0;
    }
    for &(i, j) in &SKELETON_EDGES {
        a[i * n + j] = 1.0;
        a[j * n + i] = 1.0;
    }
    let deg: Vec<f32> = (0..n)
        .map(|i| (0..n).map(|j| a[i * n + j]).sum::<f32>())
        .collect();
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] /= (deg[i] * deg[j]).sqrt();
        }
    }
    Tensor::new(vec![n, n], a)
}

/// Root-relative, torso-scaled joint coordinates plus a presence mask.
/// Returns None when every joint carries the sentinel.
pub fn normalize_pose(pose: &[[f32; 2]]) -> Option<Tensor> {
    assert_eq!(pose.len(), N_JOINTS);
    let missing =
        |kp: &[f32; 2]| kp[0] == POSE_SENTINEL && kp[1] == POSE_SENTINEL;
    if pose.iter().all(missing) {
        return None;
    }
    let root = if !missing(&pose[NECK]) {
        pose[NECK]
    } else {
        let present: Vec<&[f32; 2]> = pose.iter().filter(|kp| !missing(kp)).collect();
        let n = present.len() as f32;
        [
            present.iter().map(|kp| kp[0]).sum::<f32>() / n,
            present.iter().map(|kp| kp[1]).sum::<f32>() / n,
        ]
    };
    let scale = if !missing(&pose[NECK]) && !missing(&pose[R_HIP]) && !missing(&pose[L_HIP]) {
        let mid = [
            (pose[R_HIP][0] + pose[L_HIP][0]) / 2.0,
            (pose[R_HIP][1] + pose[L_HIP][1]) / 2.0,
        ];
        let d = ((pose[NECK][0] - mid[0]).powi(2) + (pose[NECK][1] - mid[1]).powi(2)).sqrt();
        if d > 1e-4 {
            d
        } else {
            1.0
        }
    } else {
        1.0
    };
    let mut data = vec![0.0f32; N_JOINTS * 3];
    for (j, kp) in pose.iter().enumerate() {
        if missing(kp) {
            continue; // coords stay 0, mask stays 0
        }
        data[j * 3] = (kp[0] - root[0]) / scale;
        data[j * 3 + 1] = (kp[1] - root[1]) / scale;
        data[j * 3 + 2] = 1.0;
    }
    Some(Tensor::new(vec![N_JOINTS, 3], data))
}

pub struct PoseEncoder {
    w1: ParamId,
    w2: ParamId,
    fc_w: ParamId,
    fc_b: ParamId,
    pub out_dim: usize,
    hidden: usize,
}

impl PoseEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self::with_hidden(store, prefix, out_dim, 32, rng)
    }

    pub fn with_hidden(
        store: &mut ParamStore,
        prefix: &str,
        out_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        PoseEncoder {
            w1: store.add_kaiming(&format!("{prefix}.gcn1.w"), &[3, hidden], 3, rng),
            w2: store.add_kaiming(&format!("{prefix}.gcn2.w"), &[hidden, hidden], hidden, rng),
            fc_w: store.add_kaiming(&format!("{prefix}.fc.w"), &[out_dim, hidden], hidden, rng),
            fc_b: store.add_zeros(&format!("{prefix}.fc.b"), &[out_dim]),
            out_dim,
            hidden,
        }
    }

    /// Graph convolution over the skeleton adjacency; returns None for a
    /// fully missing pose.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        pose: &[[f32; 2]],
    ) -> Result<Option<VarId>> {
        let Some(x) = normalize_pose(pose) else {
            return Ok(None);
        };
        let xv = tape.leaf(x);
        Ok(Some(self.forward_var(tape, bind, xv)?))
    }

    pub fn forward_var(&self, tape: &mut Tape, bind: &Binding, x: VarId) -> Result<VarId> {
        let adj = tape.leaf(normalized_adjacency());
        let h = tape.matmul(adj, x)?;
        let h = tape.matmul(h, bind.var(self.w1))?;
        let h = tape.relu(h)?;
        let adj2 = tape.leaf(normalized_adjacency());
        let h = tape.matmul(adj2, h)?;
        let h = tape.matmul(h, bind.var(self.w2))?;
        let h = tape.relu(h)?;
        let pooled = tape.mean_cols(h)?; // [hidden]
        debug_assert_eq!(tape.value(pooled).shape(), &[self.hidden]);
        tape.linear_vec(pooled, bind.var(self.fc_w), bind.var(self.fc_b))
    }
}

// ---- patch transformer (semantic stream) ----

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            mlp_hidden: 128,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size % self.patch_size != 0 {
            return Err(TensorError::InvalidConfig(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(TensorError::InvalidConfig(format!(
                "embed dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    /// Patch count N = H*W/P^2.
    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size) * (self.image_size / self.patch_size)
    }
}

/// Per-layer, per-head attention matrices of shape (N+1) x (N+1); every row
/// is a softmax distribution.
#[derive(Debug, Clone)]
pub struct AttentionMaps {
    pub maps: Vec<Vec<Tensor>>,
}

struct VitBlock {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    mlp_w1: ParamId,
    mlp_b1: ParamId,
    mlp_w2: ParamId,
    mlp_b2: ParamId,
}

pub struct VitEncoder {
    pub cfg: VitConfig,
    embed: ParamId,
    class_token: ParamId,
    pos: ParamId,
    blocks: Vec<VitBlock>,
    ln_f_g: ParamId,
    ln_f_b: ParamId,
}

pub struct VitOutput {
    /// Class-token feature after the final layernorm.
    pub feature: VarId,
    /// Final-layer token matrix, before the class-token readout.
    pub tokens: VarId,
    pub attention: AttentionMaps,
}

impl VitEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: VitConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let plen = cfg.patch_size * cfg.patch_size * cfg.channels;
        let n = cfg.num_patches();
        let embed = store.add_kaiming(&format!("{prefix}.embed"), &[plen, d], plen, rng);
        let class_token = store.add_normal_002(&format!("{prefix}.class_token"), &[d], rng);
        let pos = store.add_normal_002(&format!("{prefix}.pos"), &[n + 1, d], rng);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let p = format!("{prefix}.block{l}");
            blocks.push(VitBlock {
                ln1_g: store.add_ones(&format!("{p}.ln1.g"), &[d]),
                ln1_b: store.add_zeros(&format!("{p}.ln1.b"), &[d]),
                wq: store.add_kaiming(&format!("{p}.attn.wq"), &[d, d], d, rng),
                bq: store.add_zeros(&format!("{p}.attn.bq"), &[d]),
                wk: store.add_kaiming(&format!("{p}.attn.wk"), &[d, d], d, rng),
                bk: store.add_zeros(&format!("{p}.attn.bk"), &[d]),
                wv: store.add_kaiming(&format!("{p}.attn.wv"), &[d, d], d, rng),
                bv: store.add_zeros(&format!("{p}.attn.bv"), &[d]),
                wo: store.add_kaiming(&format!("{p}.attn.wo"), &[d, d], d, rng),
                bo: store.add_zeros(&format!("{p}.attn.bo"), &[d]),
                ln2_g: store.add_ones(&format!("{p}.ln2.g"), &[d]),
                ln2_b: store.add_zeros(&format!("{p}.ln2.b"), &[d]),
                mlp_w1: store.add_kaiming(&format!("{p}.mlp.w1"), &[d, cfg.mlp_hidden], d, rng),
                mlp_b1: store.add_zeros(&format!("{p}.mlp.b1"), &[cfg.mlp_hidden]),
                mlp_w2: store.add_kaiming(
                    &format!("{p}.mlp.w2"),
                    &[cfg.mlp_hidden, d],
                    cfg.mlp_hidden,
                    rng,
                ),
                mlp_b2: store.add_zeros(&format!("{p}.mlp.b2"), &[d]),
            });
        }
        Ok(VitEncoder {
            cfg,
            embed,
            class_token,
            pos,
            blocks,
            ln_f_g: store.add_ones(&format!("{prefix}.ln_f.g"), &[d]),
            ln_f_b: store.add_zeros(&format!("{prefix}.ln_f.b"), &[d]),
        })
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, img: &ImageArray) -> Result<VitOutput> {
        if img.h != self.cfg.image_size || img.w != self.cfg.image_size || img.c != self.cfg.channels
        {
            return Err(TensorError::ShapeMismatch {
                op: "vit_encode",
                details: format!(
                    "image {}x{}x{} vs config {}x{}x{}",
                    img.h, img.w, img.c, self.cfg.image_size, self.cfg.image_size, self.cfg.channels
                ),
            });
        }
        let x = tape.leaf(image_to_hwc(img));
        self.forward_var(tape, bind, x)
    }

    pub fn forward_var(&self, tape: &mut Tape, bind: &Binding, img: VarId) -> Result<VitOutput> {
        let d = self.cfg.embed_dim;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();

        // z0 = [class; patches * E] + pos
        let patches = tape.patchify(img, self.cfg.patch_size)?;
        let embedded = tape.matmul(patches, bind.var(self.embed))?;
        let z0 = tape.prepend_row(bind.var(self.class_token), embedded)?;
        let mut z = tape.add(z0, bind.var(self.pos))?;

        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            // z' = MSA(LN(z)) + z
            let ln = tape.layernorm(z, bind.var(block.ln1_g), bind.var(block.ln1_b))?;
            let q = tape.matmul(ln, bind.var(block.wq))?;
            let q = tape.add_row_broadcast(q, bind.var(block.bq))?;
            let k = tape.matmul(ln, bind.var(block.wk))?;
            let k = tape.add_row_broadcast(k, bind.var(block.bk))?;
            let v = tape.matmul(ln, bind.var(block.wv))?;
            let v = tape.add_row_broadcast(v, bind.var(block.bv))?;
            let mut head_outs = Vec::with_capacity(heads);
            let mut head_maps = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = tape.slice_cols(q, h * dh, dh)?;
                let kh = tape.slice_cols(k, h * dh, dh)?;
                let vh = tape.slice_cols(v, h * dh, dh)?;
                let logits = tape.matmul_nt(qh, kh)?;
                let logits = tape.scale(logits, scale)?;
                let attn = tape.softmax_rows(logits)?;
                head_maps.push(tape.value(attn).clone());
                head_outs.push(tape.matmul(attn, vh)?);
            }
            attention.push(head_maps);
            let concat = tape.concat_cols(&head_outs)?;
            let proj = tape.matmul(concat, bind.var(block.wo))?;
            let proj = tape.add_row_broadcast(proj, bind.var(block.bo))?;
            let z1 = tape.add(proj, z)?;

            // z = MLP(LN(z')) + z' with a 2-layer GELU MLP
            let ln2 = tape.layernorm(z1, bind.var(block.ln2_g), bind.var(block.ln2_b))?;
            let h1 = tape.matmul(ln2, bind.var(block.mlp_w1))?;
            let h1 = tape.add_row_broadcast(h1, bind.var(block.mlp_b1))?;
            let h1 = tape.gelu(h1)?;
            let h2 = tape.matmul(h1, bind.var(block.mlp_w2))?;
            let h2 = tape.add_row_broadcast(h2, bind.var(block.mlp_b2))?;
            z = tape.add(h2, z1)?;
        }

        let feature = self.readout(tape, bind, z)?;
        Ok(VitOutput {
            feature,
            tokens: z,
            attention: AttentionMaps { maps: attention },
        })
    }

    /// y = LN(z_L at the class-token position).
    pub fn readout(&self, tape: &mut Tape, bind: &Binding, tokens: VarId) -> Result<VarId> {
        let class_row = tape.row(tokens, 0)?;
        tape.layernorm(class_row, bind.var(self.ln_f_g), bind.var(self.ln_f_b))
    }
}

// ---- depth / proximity encoder ----

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct DepthConfig {
    pub input_size: usize,
    pub out_dim: usize,
}

impl Default for DepthConfig {
    fn default() -> Self {
        DepthConfig {
            input_size: 32,
            out_dim: STREAM_DIM,
        }
    }
}

const DEPTH_CHANNELS: [usize; 6] = [1, 4, 8, 8, 8, 8];

/// Spatial sizes after each of the five stride-2 layers.
pub fn depth_spatial_sizes(input: usize) -> [usize; 5] {
    let mut sizes = [0; 5];
    let mut s = input;
    for slot in &mut sizes {
        s = (s + 2 - 3) / 2 + 1; // k=3, stride=2, pad=1
        *slot = s;
    }
    sizes
}

pub struct DepthEncoder {
    convs: Vec<(ParamId, ParamId)>,
    fc_w: ParamId,
    fc_b: ParamId,
    pub cfg: DepthConfig,
}

impl DepthEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: DepthConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let final_size = *depth_spatial_sizes(cfg.input_size).last().unwrap();
        if final_size == 0 {
            return Err(TensorError::InvalidConfig(format!(
                "depth input size {} collapses below 1x1 after five stride-2 layers",
                cfg.input_size
            )));
        }
        let mut convs = Vec::with_capacity(5);
        for l in 0..5 {
            let (cin, cout) = (DEPTH_CHANNELS[l], DEPTH_CHANNELS[l + 1]);
            convs.push((
                store.add_kaiming(
                    &format!("{prefix}.conv{l}.w"),
                    &[cout, cin, 3, 3],
                    cin * 9,
                    rng,
                ),
                store.add_zeros(&format!("{prefix}.conv{l}.b"), &[cout]),
            ));
        }
        let flat = DEPTH_CHANNELS[5] * final_size * final_size;
        Ok(DepthEncoder {
            convs,
            fc_w: store.add_kaiming(&format!("{prefix}.fc.w"), &[cfg.out_dim, flat], flat, rng),
            fc_b: store.add_zeros(&format!("{prefix}.fc.b"), &[cfg.out_dim]),
            cfg,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, depth: &ImageArray) -> Result<VarId> {
        if depth.h != self.cfg.input_size || depth.w != self.cfg.input_size || depth.c != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "depth_features",
                details: format!(
                    "depth map {}x{}x{} vs config {}x{}x1",
                    depth.h, depth.w, depth.c, self.cfg.input_size, self.cfg.input_size
                ),
            });
        }
        let x = tape.leaf(Tensor::new(
            vec![1, depth.h, depth.w],
            depth.data.clone(),
        ));
        self.forward_var(tape, bind, x)
    }

    pub fn forward_var(&self, tape: &mut Tape, bind: &Binding, x: VarId) -> Result<VarId> {
        let mut h = x;
        for &(w, b) in &self.convs {
            h = tape.conv2d(h, bind.var(w), bind.var(b), 2, 1)?;
            h = tape.relu(h)?;
        }
        let n = tape.value(h).numel();
        let flat = tape.reshape(h, vec![n])?;
        tape.linear_vec(flat, bind.var(self.fc_w), bind.var(self.fc_b))
    }

    /// Spatial sizes the forward pass produces, for conformance checks.
    pub fn spatial_sizes(&self) -> [usize; 5] {
        depth_spatial_sizes(self.cfg.input_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rngstream::substream;
    use crate::tensor::finite_diff_check;

    fn test_image(sz: usize, f: impl Fn(usize, usize, usize) -> f32) -> ImageArray {
        let mut img = ImageArray::new(sz, sz, 3);
        for y in 0..sz {
            for x in 0..sz {
                for c in 0..3 {
                    img.set(y, x, c, f(y, x, c));
                }
            }
        }
        img
    }

    #[test]
    fn conv_encoder_zero_image_finite_and_deterministic() {
        let mut rng = substream(1, "test");
        let mut store = ParamStore::new();
        let enc = ConvEncoder::new(&mut store, "face", STREAM_DIM, &mut rng);
        let img = test_image(16, |_, _, _| 0.0);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let a = enc.forward(&mut tape, &bind, &img).unwrap();
        let b = enc.forward(&mut tape, &bind, &img).unwrap();
        let va = tape.value(a);
        assert_eq!(va.shape(), &[STREAM_DIM]);
        assert!(va.is_finite());
        assert_eq!(va, tape.value(b));
    }

    #[test]
    fn conv_encoder_grad_check() {
        let mut rng = substream(2, "test");
        let mut store = ParamStore::new();
        let enc = ConvEncoder::new(&mut store, "scene", 8, &mut rng);
        let img = test_image(8, |y, x, c| ((y * 3 + x + c) % 5) as f32 / 5.0);
        let x0 = image_to_chw(&img);
        let err = finite_diff_check(
            |tape, x| {
                let bind = store.bind(tape);
                let f = enc.forward_var(tape, &bind, x)?;
                let sq = tape.mul(f, f)?;
                tape.sum(sq)
            },
            &x0,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn pose_all_sentinel_is_absent() {
        let mut rng = substream(3, "test");
        let mut store = ParamStore::new();
        let enc = PoseEncoder::new(&mut store, "pose", STREAM_DIM, &mut rng);
        let pose = vec![[POSE_SENTINEL, POSE_SENTINEL]; N_JOINTS];
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        assert!(enc.forward(&mut tape, &bind, &pose).unwrap().is_none());
    }

    #[test]
    fn pose_translation_invariance_after_normalization() {
        let mut rng = substream(4, "test");
        let mut store = ParamStore::new();
        let enc = PoseEncoder::new(&mut store, "pose", STREAM_DIM, &mut rng);
        let base: Vec<[f32; 2]> = (0..N_JOINTS)
            .map(|j| [0.3 + 0.02 * j as f32, 0.2 + 0.03 * j as f32])
            .collect();
        let shifted: Vec<[f32; 2]> = base.iter().map(|kp| [kp[0] + 0.05, kp[1] + 0.04]).collect();
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let a = enc.forward(&mut tape, &bind, &base).unwrap().unwrap();
        let b = enc.forward(&mut tape, &bind, &shifted).unwrap().unwrap();
        let (va, vb) = (tape.value(a).clone(), tape.value(b).clone());
        for (x, y) in va.data().iter().zip(vb.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn pose_grad_check() {
        let mut rng = substream(5, "test");
        let mut store = ParamStore::new();
        let enc = PoseEncoder::new(&mut store, "pose", 16, &mut rng);
        let pose: Vec<[f32; 2]> = (0..N_JOINTS)
            .map(|j| [0.3 + 0.02 * j as f32, 0.2 + 0.03 * j as f32])
            .collect();
        let x0 = normalize_pose(&pose).unwrap();
        let err = finite_diff_check(
            |tape, x| {
                let bind = store.bind(tape);
                let f = enc.forward_var(tape, &bind, x)?;
                let sq = tape.mul(f, f)?;
                tape.sum(sq)
            },
            &x0,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn vit_token_count_and_attention_rows() {
        let mut rng = substream(6, "test");
        let mut store = ParamStore::new();
        let cfg = VitConfig::default(); // 32x32, P=8 -> N=16
        assert_eq!(cfg.num_patches(), 16);
        let enc = VitEncoder::new(&mut store, "vit", cfg, &mut rng).unwrap();
        let img = test_image(32, |y, x, c| ((y + 2 * x + c) % 9) as f32 / 9.0);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let out = enc.forward(&mut tape, &bind, &img).unwrap();
        assert_eq!(tape.value(out.tokens).shape(), &[17, 64]);
        assert_eq!(out.attention.maps.len(), 2);
        for layer in &out.attention.maps {
            assert_eq!(layer.len(), 4);
            for map in layer {
                assert_eq!(map.shape(), &[17, 17]);
                for r in 0..17 {
                    let row_sum: f32 = map.data()[r * 17..(r + 1) * 17].iter().sum();
                    assert!((row_sum - 1.0).abs() < 1e-5, "row sum {row_sum}");
                }
            }
        }
    }

    #[test]
    fn vit_indivisible_patch_is_config_error() {
        let cfg = VitConfig {
            image_size: 30,
            ..VitConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn vit_output_reads_only_the_class_token() {
        let mut rng = substream(7, "test");
        let mut store = ParamStore::new();
        let cfg = VitConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 16,
            depth: 1,
            heads: 2,
            mlp_hidden: 32,
            channels: 3,
        };
        let enc = VitEncoder::new(&mut store, "vit", cfg, &mut rng).unwrap();
        let img = test_image(16, |y, x, _| ((y ^ x) % 4) as f32 / 4.0);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let out = enc.forward(&mut tape, &bind, &img).unwrap();
        let y = tape.value(out.feature).clone();

        // Perturb non-class final tokens post-hoc; readout must not change.
        let mut tokens = tape.value(out.tokens).clone();
        let d = 16;
        for v in tokens.data_mut()[d..].iter_mut() {
            *v += 3.0;
        }
        let mut tape2 = Tape::new();
        let bind2 = store.bind(&mut tape2);
        let tv = tape2.leaf(tokens);
        let y2 = enc.readout(&mut tape2, &bind2, tv).unwrap();
        for (a, b) in y.data().iter().zip(tape2.value(y2).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn vit_grad_check_small() {
        let mut rng = substream(8, "test");
        let mut store = ParamStore::new();
        let cfg = VitConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_hidden: 16,
            channels: 3,
        };
        let enc = VitEncoder::new(&mut store, "vit", cfg, &mut rng).unwrap();
        let img = test_image(8, |y, x, c| ((y * 5 + x * 3 + c) % 11) as f32 / 11.0);
        let x0 = image_to_hwc(&img);
        // Weight the feature before reducing: the normalized readout sums to a
        // constant on its own, which would make the objective degenerate.
        let probe: Vec<f32> = (0..8).map(|i| ((i * 7 + 3) % 5) as f32 - 2.0).collect();
        let err = finite_diff_check(
            |tape, x| {
                let bind = store.bind(tape);
                let out = enc.forward_var(tape, &bind, x)?;
                let w = tape.leaf(Tensor::new(vec![8], probe.clone()));
                let weighted = tape.mul(out.feature, w)?;
                tape.sum(weighted)
            },
            &x0,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-2, "rel err {err}");
    }

    #[test]
    fn depth_spatial_sizes_halve_from_224() {
        assert_eq!(depth_spatial_sizes(224), [112, 56, 28, 14, 7]);
        assert_eq!(depth_spatial_sizes(32), [16, 8, 4, 2, 1]);
    }

    #[test]
    fn depth_uniform_maps_distinct_constants_distinct_features() {
        let mut rng = substream(9, "test");
        let mut store = ParamStore::new();
        let enc = DepthEncoder::new(&mut store, "depth", DepthConfig::default(), &mut rng).unwrap();
        let mut a = ImageArray::new(32, 32, 1);
        a.data.fill(0.2);
        let mut b = ImageArray::new(32, 32, 1);
        b.data.fill(0.8);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let fa = enc.forward(&mut tape, &bind, &a).unwrap();
        let fb = enc.forward(&mut tape, &bind, &b).unwrap();
        let fa2 = enc.forward(&mut tape, &bind, &a).unwrap();
        assert!(tape.value(fa).is_finite());
        assert_ne!(tape.value(fa), tape.value(fb));
        assert_eq!(tape.value(fa), tape.value(fa2));
    }

    #[test]
    fn depth_grad_check() {
        let mut rng = substream(10, "test");
        let mut store = ParamStore::new();
        let enc = DepthEncoder::new(
            &mut store,
            "depth",
            DepthConfig {
                input_size: 8,
                out_dim: 8,
            },
            &mut rng,
        )
        .unwrap();
        // Small input keeps per-pixel gradients large enough that f32 storage
        // rounding between ops stays below the check tolerance.
        let x0 = Tensor::new(
            vec![1, 8, 8],
            (0..8 * 8).map(|i| (i % 17) as f32 / 17.0).collect(),
        );
        let err = finite_diff_check(
            |tape, x| {
                let bind = store.bind(tape);
                let f = enc.forward_var(tape, &bind, x)?;
                let sq = tape.mul(f, f)?;
                tape.sum(sq)
            },
            &x0,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }
}
