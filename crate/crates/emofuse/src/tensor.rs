//! Differentiable computation substrate: a flat `Tensor`, a reverse-mode
//! `Tape`, the operator set the encoders and losses need, and a
//! finite-difference gradient checker.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense float32 tensor with a dynamic shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_vec(v: Vec<f32>) -> Self {
        Tensor {
            shape: vec![v.len()],
            data: v,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

pub type VarId = usize;

type BackFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<VarId>,
    // None for leaves.
    backward: Option<BackFn>,
}

/// Records a forward computation so gradients can be propagated back to the
/// leaves. One tape per forward pass; a single backward pass is single-writer.
pub struct Tape {
    nodes: Vec<Node>,
    checked: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            checked: false,
        }
    }

    /// Checked mode rejects NaN/Inf at every op boundary.
    pub fn new_checked() -> Self {
        Tape {
            nodes: Vec::new(),
            checked: true,
        }
    }

    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
        });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(
        &mut self,
        op: &'static str,
        value: Tensor,
        parents: Vec<VarId>,
        backward: BackFn,
    ) -> Result<VarId> {
        if self.checked && !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        self.nodes.push(Node {
            value,
            parents,
            backward: Some(backward),
        });
        Ok(self.nodes.len() - 1)
    }

    fn shape_err(op: &'static str, details: String) -> TensorError {
        TensorError::ShapeMismatch { op, details }
    }

    /// Backpropagates from a scalar output. Returns per-variable gradients
    /// (None where the output does not depend on the variable).
    pub fn backward(&self, output: VarId) -> Vec<Option<Tensor>> {
        assert_eq!(
            self.nodes[output].value.numel(),
            1,
            "backward requires a scalar output"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output] = Some(Tensor::new(
            self.nodes[output].value.shape.clone(),
            vec![1.0],
        ));
        for id in (0..=output).rev() {
            let node = &self.nodes[id];
            let Some(back) = &node.backward else { continue };
            let Some(g) = grads[id].clone() else { continue };
            let parent_vals: Vec<&Tensor> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let parent_grads = back(&node.value, &parent_vals, &g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        grads
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape != vb.shape {
            return Err(Self::shape_err(
                "add",
                format!("{:?} vs {:?}", va.shape, vb.shape),
            ));
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape.clone(), data);
        self.push(
            "add",
            out,
            vec![a, b],
            Box::new(|_, _, g| vec![g.clone(), g.clone()]),
        )
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape != vb.shape {
            return Err(Self::shape_err(
                "sub",
                format!("{:?} vs {:?}", va.shape, vb.shape),
            ));
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x - y).collect();
        let out = Tensor::new(va.shape.clone(), data);
        self.push(
            "sub",
            out,
            vec![a, b],
            Box::new(|_, _, g| {
                let neg = Tensor::new(g.shape.clone(), g.data.iter().map(|v| -v).collect());
                vec![g.clone(), neg]
            }),
        )
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape != vb.shape {
            return Err(Self::shape_err(
                "mul",
                format!("{:?} vs {:?}", va.shape, vb.shape),
            ));
        }
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape.clone(), data);
        self.push(
            "mul",
            out,
            vec![a, b],
            Box::new(|_, inputs, g| {
                let (a, b) = (inputs[0], inputs[1]);
                let ga = Tensor::new(
                    g.shape.clone(),
                    g.data.iter().zip(&b.data).map(|(g, b)| g * b).collect(),
                );
                let gb = Tensor::new(
                    g.shape.clone(),
                    g.data.iter().zip(&a.data).map(|(g, a)| g * a).collect(),
                );
                vec![ga, gb]
            }),
        )
    }

    pub fn scale(&mut self, a: VarId, c: f32) -> Result<VarId> {
        let va = &self.nodes[a].value;
        let out = Tensor::new(va.shape.clone(), va.data.iter().map(|v| v * c).collect());
        self.push(
            "scale",
            out,
            vec![a],
            Box::new(move |_, _, g| {
                vec![Tensor::new(
                    g.shape.clone(),
                    g.data.iter().map(|v| v * c).collect(),
                )]
            }),
        )
    }

    pub fn relu(&mut self, a: VarId) -> Result<VarId> {
        let va = &self.nodes[a].value;
        let out = Tensor::new(va.shape.clone(), va.data.iter().map(|v| v.max(0.0)).collect());
        self.push(
            "relu",
            out,
            vec![a],
            Box::new(|_, inputs, g| {
                let x = inputs[0];
                vec![Tensor::new(
                    g.shape.clone(),
                    g.data
                        .iter()
                        .zip(&x.data)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                )]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: VarId) -> Result<VarId> {
        let va = &self.nodes[a].value;
        let out = Tensor::new(
            va.shape.clone(),
            va.data.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
        );
        self.push(
            "sigmoid",
            out,
            vec![a],
            Box::new(|out, _, g| {
                vec![Tensor::new(
                    g.shape.clone(),
                    g.data
                        .iter()
                        .zip(&out.data)
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect(),
                )]
            }),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: VarId) -> Result<VarId> {
        const C: f32 = 0.797_884_56; // sqrt(2/pi)
        const A: f32 = 0.044_715;
        let va = &self.nodes[a].value;
        let out = Tensor::new(
            va.shape.clone(),
            va.data
                .iter()
                .map(|&x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()))
                .collect(),
        );
        self.push(
            "gelu",
            out,
            vec![a],
            Box::new(|_, inputs, g| {
                let x = inputs[0];
                vec![Tensor::new(
                    g.shape.clone(),
                    g.data
                        .iter()
                        .zip(&x.data)
                        .map(|(g, &x)| {
                            let u = C * (x + A * x * x * x);
                            let t = u.tanh();
                            let du = C * (1.0 + 3.0 * A * x * x);
                            g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                        })
                        .collect(),
                )]
            }),
        )
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: VarId) -> Result<VarId> {
        let va = &self.nodes[a].value;
        let out = Tensor::scalar(va.data.iter().map(|v| *v as f64).sum::<f64>() as f32);
        self.push(
            "sum",
            out,
            vec![a],
            Box::new(|_, inputs, g| {
                let x = inputs[0];
                vec![Tensor::new(x.shape.clone(), vec![g.item(); x.numel()])]
            }),
        )
    }

    pub fn mean(&mut self, a: VarId) -> Result<VarId> {
        let va = &self.nodes[a].value;
        let n = va.numel() as f32;
        let out = Tensor::scalar((va.data.iter().map(|v| *v as f64).sum::<f64>() / n as f64) as f32);
        self.push(
            "mean",
            out,
            vec![a],
            Box::new(move |_, inputs, g| {
                let x = inputs[0];
                vec![Tensor::new(
                    x.shape.clone(),
                    vec![g.item() / n; x.numel()],
                )]
            }),
        )
    }

    /// Mean over each row of a [rows, cols] matrix, yielding [rows].
    pub fn mean_rows(&mut self, a: VarId) -> Result<VarId> {
        let va = &self.nodes[a].value;
        if va.shape.len() != 2 {
            return Err(Self::shape_err("mean_rows", format!("{:?}", va.shape)));
        }
        let (rows, cols) = (va.shape[0], va.shape[1]);
        let data = (0..rows)
            .map(|r| {
                (va.data[r * cols..(r + 1) * cols]
                    .iter()
                    .map(|v| *v as f64)
                    .sum::<f64>()
                    / cols as f64) as f32
            })
            .collect();
        let out = Tensor::new(vec![rows], data);
        self.push(
            "mean_rows",
            out,
            vec![a],
            Box::new(move |_, _, g| {
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let gv = g.data[r] / cols as f32;
                    for c in 0..cols {
                        gx[r * cols + c] = gv;
                    }
                }
                vec![Tensor::new(vec![rows, cols], gx)]
            }),
        )
    }

    /// Mean over each column of a [rows, cols] matrix, yielding [cols].
    pub fn mean_cols(&mut self, a: VarId) -> Result<VarId> {
        let va = &self.nodes[a].value;
        if va.shape.len() != 2 {
            return Err(Self::shape_err("mean_cols", format!("{:?}", va.shape)));
        }
        let (rows, cols) = (va.shape[0], va.shape[1]);
        let mut acc = vec![0.0f64; cols];
        for r in 0..rows {
            for c in 0..cols {
                acc[c] += f64::from(va.data[r * cols + c]);
            }
        }
        let data: Vec<f32> = acc.iter().map(|&v| (v / rows as f64) as f32).collect();
        let out = Tensor::new(vec![cols], data);
        self.push(
            "mean_cols",
            out,
            vec![a],
            Box::new(move |_, _, g| {
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        gx[r * cols + c] = g.data[c] / rows as f32;
                    }
                }
                vec![Tensor::new(vec![rows, cols], gx)]
            }),
        )
    }

    // ---- linear algebra ----

    /// [m,k] x [k,n] -> [m,n]
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape.len() != 2 || vb.shape.len() != 2 || va.shape[1] != vb.shape[0] {
            return Err(Self::shape_err(
                "matmul",
                format!("{:?} x {:?}", va.shape, vb.shape),
            ));
        }
        let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
        let out = Tensor::new(vec![m, n], mat_mul(&va.data, &vb.data, m, k, n));
        self.push(
            "matmul",
            out,
            vec![a, b],
            Box::new(move |_, inputs, g| {
                let (a, b) = (inputs[0], inputs[1]);
                // dA = G * B^T ; dB = A^T * G
                let ga = mat_mul_nt(&g.data, &b.data, m, n, k);
                let gb = mat_mul_tn(&a.data, &g.data, k, m, n);
                vec![Tensor::new(vec![m, k], ga), Tensor::new(vec![k, n], gb)]
            }),
        )
    }

    /// [m,k] x [n,k]^T -> [m,n]
    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape.len() != 2 || vb.shape.len() != 2 || va.shape[1] != vb.shape[1] {
            return Err(Self::shape_err(
                "matmul_nt",
                format!("{:?} x {:?}^T", va.shape, vb.shape),
            ));
        }
        let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[0]);
        let out = Tensor::new(vec![m, n], mat_mul_nt(&va.data, &vb.data, m, k, n));
        self.push(
            "matmul_nt",
            out,
            vec![a, b],
            Box::new(move |_, inputs, g| {
                let (a, b) = (inputs[0], inputs[1]);
                // C = A B^T : dA = G * B ; dB = G^T * A
                let ga = mat_mul(&g.data, &b.data, m, n, k);
                let gb = mat_mul_tn(&g.data, &a.data, n, m, k);
                vec![Tensor::new(vec![m, k], ga), Tensor::new(vec![n, k], gb)]
            }),
        )
    }

    /// y = W x + b for a vector x: W [out,in], x [in], b [out] -> [out]
    pub fn linear_vec(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let (vx, vw, vb) = (
            &self.nodes[x].value,
            &self.nodes[w].value,
            &self.nodes[b].value,
        );
        if vx.shape.len() != 1
            || vw.shape.len() != 2
            || vw.shape[1] != vx.shape[0]
            || vb.shape != vec![vw.shape[0]]
        {
            return Err(Self::shape_err(
                "linear_vec",
                format!("x {:?}, w {:?}, b {:?}", vx.shape, vw.shape, vb.shape),
            ));
        }
        let (out_dim, in_dim) = (vw.shape[0], vw.shape[1]);
        let mut data = vb.data.clone();
        for o in 0..out_dim {
            let row = &vw.data[o * in_dim..(o + 1) * in_dim];
            let dot: f64 = row
                .iter()
                .zip(&vx.data)
                .map(|(&w, &x)| f64::from(w) * f64::from(x))
                .sum();
            data[o] = (f64::from(data[o]) + dot) as f32;
        }
        let out = Tensor::new(vec![out_dim], data);
        self.push(
            "linear_vec",
            out,
            vec![x, w, b],
            Box::new(move |_, inputs, g| {
                let (x, w) = (inputs[0], inputs[1]);
                let mut gx = vec![0.0; in_dim];
                let mut gw = vec![0.0; out_dim * in_dim];
                for o in 0..out_dim {
                    let go = g.data[o];
                    for i in 0..in_dim {
                        gx[i] += go * w.data[o * in_dim + i];
                        gw[o * in_dim + i] = go * x.data[i];
                    }
                }
                vec![
                    Tensor::new(vec![in_dim], gx),
                    Tensor::new(vec![out_dim, in_dim], gw),
                    g.clone(),
                ]
            }),
        )
    }

    /// Adds a [cols] bias to every row of a [rows, cols] matrix.
    pub fn add_row_broadcast(&mut self, a: VarId, bias: VarId) -> Result<VarId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[bias].value);
        if va.shape.len() != 2 || vb.shape != vec![va.shape[1]] {
            return Err(Self::shape_err(
                "add_row_broadcast",
                format!("{:?} + {:?}", va.shape, vb.shape),
            ));
        }
        let (rows, cols) = (va.shape[0], va.shape[1]);
        let mut data = va.data.clone();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += vb.data[c];
            }
        }
        let out = Tensor::new(va.shape.clone(), data);
        self.push(
            "add_row_broadcast",
            out,
            vec![a, bias],
            Box::new(move |_, _, g| {
                let mut gb = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        gb[c] += g.data[r * cols + c];
                    }
                }
                vec![g.clone(), Tensor::new(vec![cols], gb)]
            }),
        )
    }

    // ---- normalization / attention ----

    /// Layer normalization over the last dimension with affine parameters.
    /// Accepts [d] or [rows, d]; gamma/beta are [d]. eps = 1e-5.
    pub fn layernorm(&mut self, x: VarId, gamma: VarId, beta: VarId) -> Result<VarId> {
        const EPS: f32 = 1e-5;
        let (vx, vg, vb) = (
            &self.nodes[x].value,
            &self.nodes[gamma].value,
            &self.nodes[beta].value,
        );
        let d = *vx.shape.last().ok_or_else(|| {
            Self::shape_err("layernorm", "empty shape".into())
        })?;
        if vg.shape != vec![d] || vb.shape != vec![d] {
            return Err(Self::shape_err(
                "layernorm",
                format!("x {:?}, gamma {:?}, beta {:?}", vx.shape, vg.shape, vb.shape),
            ));
        }
        let rows = vx.numel() / d;
        let mut data = vec![0.0; vx.numel()];
        for r in 0..rows {
            let xr = &vx.data[r * d..(r + 1) * d];
            let mu = xr.iter().sum::<f32>() / d as f32;
            let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f32>() / d as f32;
            let inv = 1.0 / (var + EPS).sqrt();
            for c in 0..d {
                data[r * d + c] = vg.data[c] * (xr[c] - mu) * inv + vb.data[c];
            }
        }
        let out = Tensor::new(vx.shape.clone(), data);
        self.push(
            "layernorm",
            out,
            vec![x, gamma, beta],
            Box::new(move |_, inputs, g| {
                let (x, gamma) = (inputs[0], inputs[1]);
                let mut gx = vec![0.0; x.numel()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for r in 0..rows {
                    let xr = &x.data[r * d..(r + 1) * d];
                    let gr = &g.data[r * d..(r + 1) * d];
                    let mu = xr.iter().sum::<f32>() / d as f32;
                    let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f32>() / d as f32;
                    let inv = 1.0 / (var + EPS).sqrt();
                    let xhat: Vec<f32> = xr.iter().map(|v| (v - mu) * inv).collect();
                    let dxhat: Vec<f32> = gr
                        .iter()
                        .zip(&gamma.data)
                        .map(|(g, gm)| g * gm)
                        .collect();
                    let m1 = dxhat.iter().sum::<f32>() / d as f32;
                    let m2 = dxhat
                        .iter()
                        .zip(&xhat)
                        .map(|(a, b)| a * b)
                        .sum::<f32>()
                        / d as f32;
                    for c in 0..d {
                        gx[r * d + c] = inv * (dxhat[c] - m1 - xhat[c] * m2);
                        gg[c] += gr[c] * xhat[c];
                        gb[c] += gr[c];
                    }
                }
                vec![
                    Tensor::new(x.shape.clone(), gx),
                    Tensor::new(vec![d], gg),
                    Tensor::new(vec![d], gb),
                ]
            }),
        )
    }

    /// Row-wise softmax over the last dimension, with max-subtraction.
    pub fn softmax_rows(&mut self, x: VarId) -> Result<VarId> {
        let vx = &self.nodes[x].value;
        let d = *vx
            .shape
            .last()
            .ok_or_else(|| Self::shape_err("softmax_rows", "empty shape".into()))?;
        let rows = vx.numel() / d;
        let mut data = vec![0.0; vx.numel()];
        for r in 0..rows {
            let xr = &vx.data[r * d..(r + 1) * d];
            let mx = xr.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for c in 0..d {
                let e = (xr[c] - mx).exp();
                data[r * d + c] = e;
                sum += e;
            }
            for c in 0..d {
                data[r * d + c] /= sum;
            }
        }
        let out = Tensor::new(vx.shape.clone(), data);
        self.push(
            "softmax_rows",
            out,
            vec![x],
            Box::new(move |out, _, g| {
                let mut gx = vec![0.0; out.numel()];
                for r in 0..rows {
                    let sr = &out.data[r * d..(r + 1) * d];
                    let gr = &g.data[r * d..(r + 1) * d];
                    let dot = sr.iter().zip(gr).map(|(s, g)| s * g).sum::<f32>();
                    for c in 0..d {
                        gx[r * d + c] = sr[c] * (gr[c] - dot);
                    }
                }
                vec![Tensor::new(out.shape.clone(), gx)]
            }),
        )
    }

    // ---- shape manipulation ----

    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> Result<VarId> {
        let va = &self.nodes[a].value;
        if shape.iter().product::<usize>() != va.numel() {
            return Err(Self::shape_err(
                "reshape",
                format!("{:?} -> {:?}", va.shape, shape),
            ));
        }
        let out = Tensor::new(shape, va.data.clone());
        self.push(
            "reshape",
            out,
            vec![a],
            Box::new(|_, inputs, g| {
                vec![Tensor::new(inputs[0].shape.clone(), g.data.clone())]
            }),
        )
    }

    /// Concatenates 1-D vectors.
    pub fn concat(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Self::shape_err("concat", "no inputs".into()));
        }
        let mut lens = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let v = &self.nodes[p].value;
            if v.shape.len() != 1 {
                return Err(Self::shape_err("concat", format!("{:?}", v.shape)));
            }
            lens.push(v.numel());
            data.extend_from_slice(&v.data);
        }
        let out = Tensor::from_vec(data);
        self.push(
            "concat",
            out,
            parts.to_vec(),
            Box::new(move |_, _, g| {
                let mut grads = Vec::with_capacity(lens.len());
                let mut off = 0;
                for &l in &lens {
                    grads.push(Tensor::from_vec(g.data[off..off + l].to_vec()));
                    off += l;
                }
                grads
            }),
        )
    }

    /// Extracts a contiguous 1-D slice of a vector.
    pub fn slice(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId> {
        let va = &self.nodes[a].value;
        if va.shape.len() != 1 || start + len > va.numel() {
            return Err(Self::shape_err(
                "slice",
                format!("{:?} [{start}..{}]", va.shape, start + len),
            ));
        }
        let out = Tensor::from_vec(va.data[start..start + len].to_vec());
        self.push(
            "slice",
            out,
            vec![a],
            Box::new(move |_, inputs, g| {
                let mut gx = vec![0.0; inputs[0].numel()];
                gx[start..start + len].copy_from_slice(&g.data);
                vec![Tensor::from_vec(gx)]
            }),
        )
    }

    /// Extracts row r of a [rows, cols] matrix as [cols].
    pub fn row(&mut self, a: VarId, r: usize) -> Result<VarId> {
        let va = &self.nodes[a].value;
        if va.shape.len() != 2 || r >= va.shape[0] {
            return Err(Self::shape_err("row", format!("{:?} row {r}", va.shape)));
        }
        let cols = va.shape[1];
        let out = Tensor::from_vec(va.data[r * cols..(r + 1) * cols].to_vec());
        self.push(
            "row",
            out,
            vec![a],
            Box::new(move |_, inputs, g| {
                let mut gx = vec![0.0; inputs[0].numel()];
                gx[r * cols..(r + 1) * cols].copy_from_slice(&g.data);
                vec![Tensor::new(inputs[0].shape.clone(), gx)]
            }),
        )
    }

    /// Extracts columns [start, start+len) of a [rows, cols] matrix.
    pub fn slice_cols(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId> {
        let va = &self.nodes[a].value;
        if va.shape.len() != 2 || start + len > va.shape[1] {
            return Err(Self::shape_err(
                "slice_cols",
                format!("{:?} cols [{start}..{}]", va.shape, start + len),
            ));
        }
        let (rows, cols) = (va.shape[0], va.shape[1]);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&va.data[r * cols + start..r * cols + start + len]);
        }
        let out = Tensor::new(vec![rows, len], data);
        self.push(
            "slice_cols",
            out,
            vec![a],
            Box::new(move |_, _, g| {
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    gx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g.data[r * len..(r + 1) * len]);
                }
                vec![Tensor::new(vec![rows, cols], gx)]
            }),
        )
    }

    /// Concatenates [rows, d_i] matrices along columns.
    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Self::shape_err("concat_cols", "no inputs".into()));
        }
        let rows = self.nodes[parts[0]].value.shape[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = &self.nodes[p].value;
            if v.shape.len() != 2 || v.shape[0] != rows {
                return Err(Self::shape_err("concat_cols", format!("{:?}", v.shape)));
            }
            widths.push(v.shape[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let v = &self.nodes[p].value;
                data.extend_from_slice(&v.data[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(vec![rows, total], data);
        self.push(
            "concat_cols",
            out,
            parts.to_vec(),
            Box::new(move |_, _, g| {
                let mut grads: Vec<Tensor> = widths
                    .iter()
                    .map(|&w| Tensor::zeros(&[rows, w]))
                    .collect();
                for r in 0..rows {
                    let mut off = 0;
                    for (gi, &w) in widths.iter().enumerate() {
                        grads[gi].data[r * w..(r + 1) * w]
                            .copy_from_slice(&g.data[r * total + off..r * total + off + w]);
                        off += w;
                    }
                }
                grads
            }),
        )
    }

    /// Prepends a [d] vector as row 0 of a [rows, d] matrix.
    pub fn prepend_row(&mut self, head: VarId, body: VarId) -> Result<VarId> {
        let (vh, vb) = (&self.nodes[head].value, &self.nodes[body].value);
        if vh.shape.len() != 1 || vb.shape.len() != 2 || vb.shape[1] != vh.shape[0] {
            return Err(Self::shape_err(
                "prepend_row",
                format!("{:?} ++ {:?}", vh.shape, vb.shape),
            ));
        }
        let (rows, d) = (vb.shape[0], vb.shape[1]);
        let mut data = Vec::with_capacity((rows + 1) * d);
        data.extend_from_slice(&vh.data);
        data.extend_from_slice(&vb.data);
        let out = Tensor::new(vec![rows + 1, d], data);
        self.push(
            "prepend_row",
            out,
            vec![head, body],
            Box::new(move |_, _, g| {
                vec![
                    Tensor::from_vec(g.data[..d].to_vec()),
                    Tensor::new(vec![rows, d], g.data[d..].to_vec()),
                ]
            }),
        )
    }

    // ---- image ops ----

    /// 2D convolution: x [C,H,W], w [O,C,kh,kw], b [O] -> [O,H',W'].
    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: VarId,
        stride: usize,
        pad: usize,
    ) -> Result<VarId> {
        let (vx, vw, vb) = (
            &self.nodes[x].value,
            &self.nodes[w].value,
            &self.nodes[b].value,
        );
        if vx.shape.len() != 3 || vw.shape.len() != 4 || vx.shape[0] != vw.shape[1] {
            return Err(Self::shape_err(
                "conv2d",
                format!("x {:?}, w {:?}", vx.shape, vw.shape),
            ));
        }
        let (c_in, h, wdt) = (vx.shape[0], vx.shape[1], vx.shape[2]);
        let (c_out, kh, kw) = (vw.shape[0], vw.shape[2], vw.shape[3]);
        if vb.shape != vec![c_out] {
            return Err(Self::shape_err("conv2d", format!("b {:?}", vb.shape)));
        }
        if h + 2 * pad < kh || wdt + 2 * pad < kw {
            return Err(Self::shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{wdt}"),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wdt + 2 * pad - kw) / stride + 1;
        let mut data = vec![0.0; c_out * oh * ow];
        for o in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = vb.data[o] as f64;
                    for c in 0..c_in {
                        for u in 0..kh {
                            let iy = oy * stride + u;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let iy = iy - pad;
                            for v in 0..kw {
                                let ix = ox * stride + v;
                                if ix < pad || ix - pad >= wdt {
                                    continue;
                                }
                                let ix = ix - pad;
                                acc += vx.data[(c * h + iy) * wdt + ix] as f64
                                    * vw.data[((o * c_in + c) * kh + u) * kw + v] as f64;
                            }
                        }
                    }
                    data[(o * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
        let out = Tensor::new(vec![c_out, oh, ow], data);
        self.push(
            "conv2d",
            out,
            vec![x, w, b],
            Box::new(move |_, inputs, g| {
                let (x, w) = (inputs[0], inputs[1]);
                let mut gx = vec![0.0; x.numel()];
                let mut gw = vec![0.0; w.numel()];
                let mut gb = vec![0.0; c_out];
                for o in 0..c_out {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = g.data[(o * oh + oy) * ow + ox];
                            gb[o] += go;
                            for c in 0..c_in {
                                for u in 0..kh {
                                    let iy = oy * stride + u;
                                    if iy < pad || iy - pad >= h {
                                        continue;
                                    }
                                    let iy = iy - pad;
                                    for v in 0..kw {
                                        let ix = ox * stride + v;
                                        if ix < pad || ix - pad >= wdt {
                                            continue;
                                        }
                                        let ix = ix - pad;
                                        gx[(c * h + iy) * wdt + ix] +=
                                            go * w.data[((o * c_in + c) * kh + u) * kw + v];
                                        gw[((o * c_in + c) * kh + u) * kw + v] +=
                                            go * x.data[(c * h + iy) * wdt + ix];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    Tensor::new(x.shape.clone(), gx),
                    Tensor::new(w.shape.clone(), gw),
                    Tensor::new(vec![c_out], gb),
                ]
            }),
        )
    }

    /// Splits an [H,W,C] image into N = (H/P)*(W/P) flattened patches,
    /// each of length P*P*C, in row-major patch order.
    pub fn patchify(&mut self, img: VarId, p: usize) -> Result<VarId> {
        let v = &self.nodes[img].value;
        if v.shape.len() != 3 || v.shape[0] % p != 0 || v.shape[1] % p != 0 {
            return Err(Self::shape_err(
                "patchify",
                format!("image {:?} not divisible by patch {p}", v.shape),
            ));
        }
        let (h, w, c) = (v.shape[0], v.shape[1], v.shape[2]);
        let (gy, gx) = (h / p, w / p);
        let n = gy * gx;
        let plen = p * p * c;
        let mut data = vec![0.0; n * plen];
        for py in 0..gy {
            for px in 0..gx {
                let patch = py * gx + px;
                for u in 0..p {
                    for vv in 0..p {
                        for ch in 0..c {
                            data[patch * plen + (u * p + vv) * c + ch] =
                                v.data[((py * p + u) * w + px * p + vv) * c + ch];
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, plen], data);
        self.push(
            "patchify",
            out,
            vec![img],
            Box::new(move |_, inputs, g| {
                let mut gi = vec![0.0; inputs[0].numel()];
                for py in 0..gy {
                    for px in 0..gx {
                        let patch = py * gx + px;
                        for u in 0..p {
                            for vv in 0..p {
                                for ch in 0..c {
                                    gi[((py * p + u) * w + px * p + vv) * c + ch] =
                                        g.data[patch * plen + (u * p + vv) * c + ch];
                                }
                            }
                        }
                    }
                }
                vec![Tensor::new(inputs[0].shape.clone(), gi)]
            }),
        )
    }

    // ---- selection (stochastic fusion support) ----

    /// Coordinate-wise selection: out[j] = inputs[mask[j]][j]. All inputs are
    /// vectors of equal length; the mask is sampled by the caller.
    pub fn select_by_mask(&mut self, inputs: &[VarId], mask: Vec<usize>) -> Result<VarId> {
        if inputs.is_empty() {
            return Err(Self::shape_err("select_by_mask", "no inputs".into()));
        }
        let len = self.nodes[inputs[0]].value.numel();
        for &i in inputs {
            let v = &self.nodes[i].value;
            if v.shape != vec![len] {
                return Err(Self::shape_err(
                    "select_by_mask",
                    format!("{:?} expected [{len}]", v.shape),
                ));
            }
        }
        if mask.len() != len || mask.iter().any(|&m| m >= inputs.len()) {
            return Err(Self::shape_err(
                "select_by_mask",
                format!("mask len {} / max {:?}", mask.len(), mask.iter().max()),
            ));
        }
        let data = mask
            .iter()
            .enumerate()
            .map(|(j, &m)| self.nodes[inputs[m]].value.data[j])
            .collect();
        let out = Tensor::from_vec(data);
        let n_in = inputs.len();
        self.push(
            "select_by_mask",
            out,
            inputs.to_vec(),
            Box::new(move |_, _, g| {
                let mut grads = vec![Tensor::zeros(&[len]); n_in];
                for (j, &m) in mask.iter().enumerate() {
                    grads[m].data[j] = g.data[j];
                }
                grads
            }),
        )
    }

    // ---- loss primitives ----

    /// sum_i w_i * (target_i - pred_i)^2, with constant target and weights.
    pub fn weighted_sq_sum(&mut self, pred: VarId, target: &[f32], w: &[f32]) -> Result<VarId> {
        let vp = &self.nodes[pred].value;
        if vp.shape != vec![target.len()] || target.len() != w.len() {
            return Err(Self::shape_err(
                "weighted_sq_sum",
                format!(
                    "pred {:?} vs target {} / w {}",
                    vp.shape,
                    target.len(),
                    w.len()
                ),
            ));
        }
        let val = vp
            .data
            .iter()
            .zip(target)
            .zip(w)
            .map(|((p, t), w)| w * (t - p) * (t - p))
            .sum();
        let target = target.to_vec();
        let w = w.to_vec();
        self.push(
            "weighted_sq_sum",
            Tensor::scalar(val),
            vec![pred],
            Box::new(move |_, inputs, g| {
                let p = inputs[0];
                let gv = g.item();
                vec![Tensor::from_vec(
                    p.data
                        .iter()
                        .zip(&target)
                        .zip(&w)
                        .map(|((p, t), w)| gv * 2.0 * w * (p - t))
                        .collect(),
                )]
            }),
        )
    }

    /// sum_k v_k * h(target_k - pred_k) where h is the smooth-L1 kernel with
    /// threshold `delta`: 0.5 x^2 for |x| < delta, else delta*(|x| - 0.5*delta).
    pub fn weighted_huber_sum(
        &mut self,
        pred: VarId,
        target: &[f32],
        v: &[f32],
        delta: f32,
    ) -> Result<VarId> {
        let vp = &self.nodes[pred].value;
        if vp.shape != vec![target.len()] || target.len() != v.len() {
            return Err(Self::shape_err(
                "weighted_huber_sum",
                format!(
                    "pred {:?} vs target {} / v {}",
                    vp.shape,
                    target.len(),
                    v.len()
                ),
            ));
        }
        if delta <= 0.0 {
            return Err(TensorError::InvalidConfig(
                "huber delta must be positive".into(),
            ));
        }
        let val = vp
            .data
            .iter()
            .zip(target)
            .zip(v)
            .map(|((p, t), v)| v * huber(t - p, delta))
            .sum();
        let target = target.to_vec();
        let v = v.to_vec();
        self.push(
            "weighted_huber_sum",
            Tensor::scalar(val),
            vec![pred],
            Box::new(move |_, inputs, g| {
                let p = inputs[0];
                let gv = g.item();
                vec![Tensor::from_vec(
                    p.data
                        .iter()
                        .zip(&target)
                        .zip(&v)
                        .map(|((p, t), v)| {
                            let x = t - p;
                            let dh = if x.abs() < delta {
                                x
                            } else {
                                delta * x.signum()
                            };
                            // d/dpred = -dh/dx
                            -gv * v * dh
                        })
                        .collect(),
                )]
            }),
        )
    }
}

/// Smooth-L1 kernel, quadratic inside |x| < delta and linear outside. The two
/// branches and their derivatives agree at the seam for every delta.
pub fn huber(x: f32, delta: f32) -> f32 {
    if x.abs() < delta {
        0.5 * x * x
    } else {
        delta * (x.abs() - 0.5 * delta)
    }
}

// Accumulation runs in f64: f32 partial sums put enough round-off in the
// outputs to dominate central-difference gradient checks on deeper stacks.
fn mat_mul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p] as f64;
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut acc[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j] as f64;
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

// A [m,k] * B[n,k]^T -> [m,n]
fn mat_mul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow
                .iter()
                .zip(brow)
                .map(|(x, y)| *x as f64 * *y as f64)
                .sum::<f64>() as f32;
        }
    }
    out
}

fn mat_mul_tn(a: &[f32], b: &[f32], m: usize, p: usize, n: usize) -> Vec<f32> {
    // a: [p, m] row-major, b: [p, n] row-major, out = a^T b : [m, n]
    let mut acc = vec![0.0f64; m * n];
    for r in 0..p {
        let arow = &a[r * m..(r + 1) * m];
        let brow = &b[r * n..(r + 1) * n];
        for i in 0..m {
            let av = arow[i] as f64;
            if av == 0.0 {
                continue;
            }
            let orow = &mut acc[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j] as f64;
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Central-difference gradient check. `build` must construct a deterministic
/// scalar-valued graph from the single leaf it is given. Returns the relative
/// error ||analytic - numeric|| / (||analytic|| + ||numeric|| + 1e-12) over
/// the whole gradient vector; the norm form keeps f32 round-off on near-zero
/// components from dominating while still exposing systematic backward bugs.
pub fn finite_diff_check<F>(build: F, x: &Tensor, eps: f32) -> Result<f32>
where
    F: Fn(&mut Tape, VarId) -> Result<VarId>,
{
    assert!(eps > 0.0, "eps must be positive");
    let eval = |t: &Tensor| -> Result<f32> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(t.clone());
        let out = build(&mut tape, leaf)?;
        let v = tape.value(out);
        assert_eq!(v.numel(), 1, "finite_diff_check requires a scalar output");
        let val = v.item();
        if !val.is_finite() {
            return Err(TensorError::NonFinite {
                op: "finite_diff_check",
            });
        }
        Ok(val)
    };

    // Analytic gradient.
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = build(&mut tape, leaf)?;
    if !tape.value(out).is_finite() {
        return Err(TensorError::NonFinite {
            op: "finite_diff_check",
        });
    }
    let grads = tape.backward(out);
    let analytic = grads[leaf]
        .clone()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut diff_sq = 0.0f64;
    let mut a_sq = 0.0f64;
    let mut n_sq = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let fp = eval(&probe)?;
        probe.data[i] = orig - eps;
        let fm = eval(&probe)?;
        probe.data[i] = orig;
        let numeric = ((fp as f64) - (fm as f64)) / (2.0 * eps as f64);
        let a = analytic.data[i] as f64;
        diff_sq += (a - numeric) * (a - numeric);
        a_sq += a * a;
        n_sq += numeric * numeric;
    }
    Ok((diff_sq.sqrt() / (a_sq.sqrt() + n_sq.sqrt() + 1e-12)) as f32)
}
