//! Reverse-mode automatic differentiation on a define-by-run tape.
//!
//! A [`Tape`] records every primitive applied during a forward pass together
//! with the values needed by its adjoint. [`Tape::backward`] replays the
//! recording in reverse, accumulating gradients per node. Tapes are rebuilt
//! for every forward pass and confined to one thread; tensors without a node
//! handle are plain immutable values.

use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// The primitive operations the engine knows. Each one has a forward rule
/// here and an adjoint rule in [`Tape::backward`].
#[derive(Clone, Debug)]
pub enum OpKind {
    /// 2-D cross-correlation, zero padding of kernel_size/2, stride 1 or 2.
    /// Inputs: image [C,H,W], kernel [O,C,K,K].
    Conv2d { stride: usize },
    Relu,
    Sigmoid,
    /// Element-wise sum of two same-shape tensors.
    Add,
    /// Multiply by a compile-time constant scalar.
    ScalarMul { factor: f64 },
    /// Element-wise product of two same-shape tensors.
    ElementwiseMul,
    /// Mean over the true pixels of a fixed boolean mask; output is scalar.
    MaskedMean { mask: Mask },
    /// Nearest-neighbour upsampling [C,H,W] -> [C,2H,2W].
    UpsampleNearest2x,
    /// Add a per-channel bias [C] to an image [C,H,W].
    BiasAdd,
    /// Natural logarithm; input must be strictly positive.
    Ln,
    /// Clamp values into [lo, hi]; gradient passes only strictly inside.
    Clamp { lo: f64, hi: f64 },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Add => "add",
            OpKind::ScalarMul { .. } => "scalar_mul",
            OpKind::ElementwiseMul => "elementwise_mul",
            OpKind::MaskedMean { .. } => "masked_mean",
            OpKind::UpsampleNearest2x => "upsample_nearest_2x",
            OpKind::BiasAdd => "bias_add",
            OpKind::Ln => "ln",
            OpKind::Clamp { .. } => "clamp",
        }
    }
}

struct Node {
    /// None for leaves.
    op: Option<(OpKind, Vec<NodeId>)>,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradient buffers produced by a backward pass. Nodes the loss
/// does not depend on have no buffer at all.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a node, materializing zeros when the loss is independent
    /// of it.
    pub fn wrt(&self, id: NodeId, len: usize) -> Vec<f64> {
        match self.get(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; len],
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf (input, parameter or constant).
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(None, t.shape().to_vec(), t.values().to_vec())
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, values: Vec<f64>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.push(None, shape, values)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    /// Materialize a node as a tensor carrying its tape handle.
    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].values.clone())
            .expect("node shape is consistent")
            .with_node(id)
    }

    fn push(&mut self, op: Option<(OpKind, Vec<NodeId>)>, shape: Vec<usize>, values: Vec<f64>) -> NodeId {
        self.nodes.push(Node { op, shape, values });
        NodeId(self.nodes.len() - 1)
    }

    // ---- forward ----

    /// Apply a primitive to the given input nodes and record the result.
    pub fn forward(&mut self, op: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        let arity = match op {
            OpKind::Conv2d { .. }
            | OpKind::Add
            | OpKind::ElementwiseMul
            | OpKind::BiasAdd => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::ShapeMismatch {
                op: op.name(),
                details: format!("expected {} inputs, got {}", arity, inputs.len()),
            });
        }
        for &i in inputs {
            if i.0 >= self.nodes.len() {
                return Err(Error::ShapeMismatch {
                    op: op.name(),
                    details: format!("input node {} is not on this tape", i.0),
                });
            }
        }
        let (shape, values) = self.eval(&op, inputs)?;
        Ok(self.push(Some((op, inputs.to_vec())), shape, values))
    }

    fn eval(&self, op: &OpKind, inputs: &[NodeId]) -> Result<(Vec<usize>, Vec<f64>)> {
        match op {
            OpKind::Conv2d { stride } => {
                let (img, ker) = (&self.nodes[inputs[0].0], &self.nodes[inputs[1].0]);
                conv2d_forward(&img.shape, &img.values, &ker.shape, &ker.values, *stride)
            }
            OpKind::Relu => {
                let x = &self.nodes[inputs[0].0];
                let v = x.values.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
                Ok((x.shape.clone(), v))
            }
            OpKind::Sigmoid => {
                let x = &self.nodes[inputs[0].0];
                let v = x.values.iter().map(|&v| stable_sigmoid(v)).collect();
                Ok((x.shape.clone(), v))
            }
            OpKind::Add => {
                let (a, b) = (&self.nodes[inputs[0].0], &self.nodes[inputs[1].0]);
                if a.shape != b.shape {
                    return Err(Error::ShapeMismatch {
                        op: "add",
                        details: format!("{:?} vs {:?}", a.shape, b.shape),
                    });
                }
                let v = a.values.iter().zip(&b.values).map(|(&x, &y)| x + y).collect();
                Ok((a.shape.clone(), v))
            }
            OpKind::ScalarMul { factor } => {
                let x = &self.nodes[inputs[0].0];
                let v = x.values.iter().map(|&v| v * factor).collect();
                Ok((x.shape.clone(), v))
            }
            OpKind::ElementwiseMul => {
                let (a, b) = (&self.nodes[inputs[0].0], &self.nodes[inputs[1].0]);
                if a.shape != b.shape {
                    return Err(Error::ShapeMismatch {
                        op: "elementwise_mul",
                        details: format!("{:?} vs {:?}", a.shape, b.shape),
                    });
                }
                let v = a.values.iter().zip(&b.values).map(|(&x, &y)| x * y).collect();
                Ok((a.shape.clone(), v))
            }
            OpKind::MaskedMean { mask } => {
                let x = &self.nodes[inputs[0].0];
                let numel = mask.height() * mask.width();
                if x.values.len() != numel {
                    return Err(Error::ShapeMismatch {
                        op: "masked_mean",
                        details: format!(
                            "input {:?} has {} values, mask is {}x{}",
                            x.shape,
                            x.values.len(),
                            mask.height(),
                            mask.width()
                        ),
                    });
                }
                let cnt = mask.count();
                if cnt == 0 {
                    return Err(Error::Domain {
                        op: "masked_mean",
                        details: "mask has no true pixels".into(),
                    });
                }
                let sum: f64 = x
                    .values
                    .iter()
                    .zip(mask.values())
                    .filter(|(_, &m)| m)
                    .map(|(&v, _)| v)
                    .sum();
                Ok((vec![1], vec![sum / cnt as f64]))
            }
            OpKind::UpsampleNearest2x => {
                let x = &self.nodes[inputs[0].0];
                let [c, h, w] = three_d("upsample_nearest_2x", &x.shape)?;
                let mut out = vec![0.0; c * 4 * h * w];
                let (oh, ow) = (2 * h, 2 * w);
                for ci in 0..c {
                    for y in 0..oh {
                        let src = &x.values[ci * h * w + (y / 2) * w..][..w];
                        let dst = &mut out[ci * oh * ow + y * ow..][..ow];
                        for (xo, d) in dst.iter_mut().enumerate() {
                            *d = src[xo / 2];
                        }
                    }
                }
                Ok((vec![c, oh, ow], out))
            }
            OpKind::BiasAdd => {
                let (x, b) = (&self.nodes[inputs[0].0], &self.nodes[inputs[1].0]);
                let [c, h, w] = three_d("bias_add", &x.shape)?;
                if b.shape != [c] {
                    return Err(Error::ShapeMismatch {
                        op: "bias_add",
                        details: format!("image {:?} needs bias [{}], got {:?}", x.shape, c, b.shape),
                    });
                }
                let mut out = x.values.clone();
                for ci in 0..c {
                    let bias = b.values[ci];
                    for v in &mut out[ci * h * w..(ci + 1) * h * w] {
                        *v += bias;
                    }
                }
                Ok((x.shape.clone(), out))
            }
            OpKind::Ln => {
                let x = &self.nodes[inputs[0].0];
                if let Some(&bad) = x.values.iter().find(|&&v| v <= 0.0) {
                    return Err(Error::Domain {
                        op: "ln",
                        details: format!("non-positive input {bad}"),
                    });
                }
                let v = x.values.iter().map(|&v| v.ln()).collect();
                Ok((x.shape.clone(), v))
            }
            OpKind::Clamp { lo, hi } => {
                if !(lo < hi) {
                    return Err(Error::Domain {
                        op: "clamp",
                        details: format!("lo {lo} must be below hi {hi}"),
                    });
                }
                let x = &self.nodes[inputs[0].0];
                let v = x.values.iter().map(|&v| v.max(*lo).min(*hi)).collect();
                Ok((x.shape.clone(), v))
            }
        }
    }

    // ---- convenience wrappers ----

    pub fn conv2d(&mut self, image: NodeId, kernel: NodeId, stride: usize) -> Result<NodeId> {
        self.forward(OpKind::Conv2d { stride }, &[image, kernel])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.forward(OpKind::Relu, &[x]).expect("relu is shape-preserving")
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.forward(OpKind::Sigmoid, &[x]).expect("sigmoid is shape-preserving")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(OpKind::Add, &[a, b])
    }

    pub fn scalar_mul(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.forward(OpKind::ScalarMul { factor }, &[x])
            .expect("scalar_mul is shape-preserving")
    }

    pub fn elementwise_mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(OpKind::ElementwiseMul, &[a, b])
    }

    pub fn masked_mean(&mut self, x: NodeId, mask: &Mask) -> Result<NodeId> {
        self.forward(OpKind::MaskedMean { mask: mask.clone() }, &[x])
    }

    pub fn upsample_nearest_2x(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward(OpKind::UpsampleNearest2x, &[x])
    }

    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.forward(OpKind::BiasAdd, &[x, bias])
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward(OpKind::Ln, &[x])
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.forward(OpKind::Clamp { lo, hi }, &[x])
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss node. Gradient buffers are created
    /// only for nodes the loss actually depends on.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let node = self
            .nodes
            .get(loss.0)
            .ok_or(Error::NonScalarLoss(vec![]))?;
        if node.values.len() != 1 {
            return Err(Error::NonScalarLoss(node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = std::mem::take(&mut grads[id]) else {
                continue;
            };
            if let Some((op, inputs)) = &self.nodes[id].op {
                self.adjoint(id, op, inputs, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn adjoint(
        &self,
        out_id: usize,
        op: &OpKind,
        inputs: &[NodeId],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        match op {
            OpKind::Conv2d { stride } => {
                let (img, ker) = (&self.nodes[inputs[0].0], &self.nodes[inputs[1].0]);
                {
                    let d_img = buf(grads, inputs[0], img.values.len());
                    conv2d_backward_input(&img.shape, &ker.shape, &ker.values, g, *stride, d_img);
                }
                let d_ker = buf(grads, inputs[1], ker.values.len());
                conv2d_backward_kernel(&img.shape, &img.values, &ker.shape, g, *stride, d_ker);
            }
            OpKind::Relu => {
                let x = &self.nodes[inputs[0].0];
                let d = buf(grads, inputs[0], x.values.len());
                for i in 0..d.len() {
                    if x.values[i] > 0.0 {
                        d[i] += g[i];
                    }
                }
            }
            OpKind::Sigmoid => {
                // uses the saved output y: d/dx = y (1 - y)
                let y = &self.nodes[out_id].values;
                let d = buf(grads, inputs[0], y.len());
                for i in 0..d.len() {
                    d[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            OpKind::Add => {
                for &input in inputs {
                    let d = buf(grads, input, g.len());
                    for i in 0..g.len() {
                        d[i] += g[i];
                    }
                }
            }
            OpKind::ScalarMul { factor } => {
                let d = buf(grads, inputs[0], g.len());
                for i in 0..g.len() {
                    d[i] += g[i] * factor;
                }
            }
            OpKind::ElementwiseMul => {
                let a_vals = &self.nodes[inputs[0].0].values;
                let b_vals = &self.nodes[inputs[1].0].values;
                {
                    let d_a = buf(grads, inputs[0], g.len());
                    for i in 0..g.len() {
                        d_a[i] += g[i] * b_vals[i];
                    }
                }
                let d_b = buf(grads, inputs[1], g.len());
                for i in 0..g.len() {
                    d_b[i] += g[i] * a_vals[i];
                }
            }
            OpKind::MaskedMean { mask } => {
                let g0 = g[0] / mask.count() as f64;
                let d = buf(grads, inputs[0], mask.height() * mask.width());
                for (dv, &m) in d.iter_mut().zip(mask.values()) {
                    if m {
                        *dv += g0;
                    }
                }
            }
            OpKind::UpsampleNearest2x => {
                let x = &self.nodes[inputs[0].0];
                let [c, h, w] = three_d("upsample", &x.shape).expect("checked in forward");
                let (oh, ow) = (2 * h, 2 * w);
                let d = buf(grads, inputs[0], x.values.len());
                for ci in 0..c {
                    for y in 0..oh {
                        let grow = &g[ci * oh * ow + y * ow..][..ow];
                        let drow = &mut d[ci * h * w + (y / 2) * w..][..w];
                        for (xo, &gv) in grow.iter().enumerate() {
                            drow[xo / 2] += gv;
                        }
                    }
                }
            }
            OpKind::BiasAdd => {
                let x = &self.nodes[inputs[0].0];
                let [c, h, w] = three_d("bias_add", &x.shape).expect("checked in forward");
                {
                    let d_x = buf(grads, inputs[0], x.values.len());
                    for i in 0..g.len() {
                        d_x[i] += g[i];
                    }
                }
                let d_b = buf(grads, inputs[1], c);
                for ci in 0..c {
                    d_b[ci] += g[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>();
                }
            }
            OpKind::Ln => {
                let x = &self.nodes[inputs[0].0];
                let d = buf(grads, inputs[0], x.values.len());
                for i in 0..g.len() {
                    d[i] += g[i] / x.values[i];
                }
            }
            OpKind::Clamp { lo, hi } => {
                let x = &self.nodes[inputs[0].0];
                let d = buf(grads, inputs[0], x.values.len());
                for i in 0..g.len() {
                    if x.values[i] > *lo && x.values[i] < *hi {
                        d[i] += g[i];
                    }
                }
            }
        }
    }

}

fn buf<'a>(grads: &'a mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &'a mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn three_d(op: &'static str, shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        [c, h, w] => Ok([*c, *h, *w]),
        other => Err(Error::ShapeMismatch {
            op,
            details: format!("expected [C,H,W], got {:?}", other),
        }),
    }
}

// ---- conv2d kernels ----

fn conv_out_len(n: usize, k: usize, pad: usize, stride: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

fn conv2d_forward(
    img_shape: &[usize],
    img: &[f64],
    ker_shape: &[usize],
    ker: &[f64],
    stride: usize,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if stride != 1 && stride != 2 {
        return Err(Error::Domain {
            op: "conv2d",
            details: format!("stride must be 1 or 2, got {stride}"),
        });
    }
    let [c, h, w] = three_d("conv2d", img_shape)?;
    let (o, kc, kh, kw) = match ker_shape {
        [o, kc, kh, kw] => (*o, *kc, *kh, *kw),
        other => {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                details: format!("kernel must be [O,C,K,K], got {:?}", other),
            })
        }
    };
    if kc != c || kh != kw || kh % 2 == 0 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            details: format!("image {:?} incompatible with kernel {:?}", img_shape, ker_shape),
        });
    }
    if h < kh || w < kw {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            details: format!("image {:?} smaller than kernel {:?}", img_shape, ker_shape),
        });
    }
    let pad = kh / 2;
    let (oh, ow) = (conv_out_len(h, kh, pad, stride), conv_out_len(w, kw, pad, stride));
    let mut out = vec![0.0; o * oh * ow];

    // loop order keeps each output row hot across its whole accumulation
    for co in 0..o {
        for oy in 0..oh {
            let orow = &mut out[(co * oh + oy) * ow..][..ow];
            for ci in 0..c {
                let kbase = (co * c + ci) * kh * kw;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    let irow = &img[(ci * h + iy as usize) * w..][..w];
                    for kx in 0..kw {
                        let wgt = ker[kbase + ky * kw + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        // valid output xs: 0 <= ox*stride + kx - pad < w
                        let ox0 = ox_lower(kx, pad, stride);
                        let ox1 = ox_upper(kx, pad, stride, w, ow);
                        if ox1 <= ox0 {
                            continue;
                        }
                        if stride == 1 {
                            let i0 = (ox0 as i64 + kx as i64 - pad as i64) as usize;
                            axpy(wgt, &irow[i0..][..ox1 - ox0], &mut orow[ox0..ox1]);
                        } else {
                            for ox in ox0..ox1 {
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                orow[ox] += wgt * irow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((vec![o, oh, ow], out))
}

/// dst += a * src over equal-length slices; the compiler vectorizes this.
#[inline]
fn axpy(a: f64, src: &[f64], dst: &mut [f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Dot product with four independent accumulators so the reduction
/// pipelines; the summation order is fixed and deterministic.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let chunks = n / 4;
    for i in 0..chunks {
        let j = 4 * i;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    let mut rest = 0.0;
    for j in 4 * chunks..n {
        rest += a[j] * b[j];
    }
    (s0 + s1) + (s2 + s3) + rest
}

fn ox_lower(kx: usize, pad: usize, stride: usize) -> usize {
    // smallest ox with ox*stride + kx >= pad
    if kx >= pad {
        0
    } else {
        (pad - kx).div_ceil(stride)
    }
}

fn ox_upper(kx: usize, pad: usize, stride: usize, w: usize, ow: usize) -> usize {
    // smallest bound with ox*stride + kx - pad < w
    let limit = w + pad;
    if kx >= limit {
        return 0;
    }
    (((limit - kx - 1) / stride) + 1).min(ow)
}

fn conv2d_backward_input(
    img_shape: &[usize],
    ker_shape: &[usize],
    ker: &[f64],
    g: &[f64],
    stride: usize,
    d_img: &mut [f64],
) {
    let [c, h, w] = three_d("conv2d", img_shape).expect("validated in forward");
    let (o, kh, kw) = (ker_shape[0], ker_shape[2], ker_shape[3]);
    let pad = kh / 2;
    let (oh, ow) = (conv_out_len(h, kh, pad, stride), conv_out_len(w, kw, pad, stride));

    // destination-row-major order: each input-gradient row accumulates all
    // its contributions while resident in L1
    for ci in 0..c {
        for iy in 0..h {
            let drow = &mut d_img[(ci * h + iy) * w..][..w];
            for co in 0..o {
                let kbase = (co * c + ci) * kh * kw;
                for ky in 0..kh {
                    // oy * stride + ky - pad == iy
                    let num = iy as i64 + pad as i64 - ky as i64;
                    if num < 0 || num % stride as i64 != 0 {
                        continue;
                    }
                    let oy = (num / stride as i64) as usize;
                    if oy >= oh {
                        continue;
                    }
                    let grow = &g[(co * oh + oy) * ow..][..ow];
                    for kx in 0..kw {
                        let wgt = ker[kbase + ky * kw + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        let ox0 = ox_lower(kx, pad, stride);
                        let ox1 = ox_upper(kx, pad, stride, w, ow);
                        if ox1 <= ox0 {
                            continue;
                        }
                        if stride == 1 {
                            let i0 = (ox0 as i64 + kx as i64 - pad as i64) as usize;
                            axpy(wgt, &grow[ox0..ox1], &mut drow[i0..][..ox1 - ox0]);
                        } else {
                            for ox in ox0..ox1 {
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                drow[ix as usize] += wgt * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_kernel(
    img_shape: &[usize],
    img: &[f64],
    ker_shape: &[usize],
    g: &[f64],
    stride: usize,
    d_ker: &mut [f64],
) {
    let [c, h, w] = three_d("conv2d", img_shape).expect("validated in forward");
    let (o, kh, kw) = (ker_shape[0], ker_shape[2], ker_shape[3]);
    let pad = kh / 2;
    let (oh, ow) = (conv_out_len(h, kh, pad, stride), conv_out_len(w, kw, pad, stride));

    // per-output-channel accumulator stays in L1 while the gradient rows
    // stream through once
    let mut acc = vec![0.0f64; c * kh * kw];
    for co in 0..o {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for oy in 0..oh {
            let grow = &g[(co * oh + oy) * ow..][..ow];
            for ci in 0..c {
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    let irow = &img[(ci * h + iy as usize) * w..][..w];
                    let abase = (ci * kh + ky) * kw;
                    for kx in 0..kw {
                        let ox0 = ox_lower(kx, pad, stride);
                        let ox1 = ox_upper(kx, pad, stride, w, ow);
                        if ox1 <= ox0 {
                            continue;
                        }
                        if stride == 1 {
                            let i0 = (ox0 as i64 + kx as i64 - pad as i64) as usize;
                            acc[abase + kx] += dot(&grow[ox0..ox1], &irow[i0..][..ox1 - ox0]);
                        } else {
                            let mut s = 0.0;
                            for ox in ox0..ox1 {
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                s += grow[ox] * irow[ix as usize];
                            }
                            acc[abase + kx] += s;
                        }
                    }
                }
            }
        }
        let kbase = co * c * kh * kw;
        for (i, &a) in acc.iter().enumerate() {
            d_ker[kbase + i] += a;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y), &[0.5]);
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 2.0]);
    }

    #[test]
    fn conv_identity_kernel_preserves_image() {
        let mut tape = Tape::new();
        let img = Tensor::new(vec![1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let x = tape.leaf(&img);
        let k = tape.leaf(&Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let y = tape.conv2d(x, k, 1).unwrap();
        assert_eq!(tape.value(y), img.values());
        assert_eq!(tape.shape(y), &[1, 3, 3]);
    }

    #[test]
    fn conv_shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![3, 5, 5]));
        let k = tape.leaf(&Tensor::zeros(vec![4, 2, 3, 3]));
        let err = tape.conv2d(x, k, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("conv2d"), "{msg}");
        assert!(msg.contains("[3, 5, 5]") && msg.contains("[4, 2, 3, 3]"), "{msg}");
    }

    #[test]
    fn stride2_halves_even_sizes() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![1, 8, 6]));
        let k = tape.leaf(&Tensor::zeros(vec![2, 1, 3, 3]));
        let y = tape.conv2d(x, k, 2).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 3]);
    }

    #[test]
    fn masked_mean_matches_sum_over_count() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let mask = Mask::from_vec(2, 2, vec![true, false, true, false]).unwrap();
        let y = tape.masked_mean(x, &mask).unwrap();
        assert!((tape.value(y)[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn full_mask_mean_gradient_is_one_over_n() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let loss = tape.masked_mean(x, &Mask::full(1, 4)).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_quarter() {
        let mut tape = Tape::new();
        let w = tape.leaf(&Tensor::scalar(0.0));
        let y = tape.sigmoid(w);
        let loss = tape.masked_mean(y, &Mask::full(1, 1)).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[0.25]);
    }

    #[test]
    fn unreached_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0));
        let unused = tape.leaf(&Tensor::scalar(5.0));
        let y = tape.sigmoid(x);
        let loss = tape.masked_mean(y, &Mask::full(1, 1)).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt(unused, 1), vec![0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn elementwise_square_gradient_doubles() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![2], vec![3.0, -2.0]).unwrap());
        let sq = tape.elementwise_mul(x, x).unwrap();
        let loss = tape.masked_mean(sq, &Mask::full(1, 2)).unwrap();
        let grads = tape.backward(loss).unwrap();
        // d mean(x^2) / dx = 2x / n
        assert_eq!(grads.get(x).unwrap(), &[3.0, -2.0]);
    }

    #[test]
    fn upsample_doubles_and_adjoint_pools() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap());
        let y = tape.upsample_nearest_2x(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 4]);
        assert_eq!(tape.value(y), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let loss = tape.masked_mean(y, &Mask::full(2, 4)).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(&Tensor::new(vec![1, 4, 4], (0..16).map(|i| i as f64 * 0.37).collect()).unwrap());
            let k = tape.leaf(&Tensor::new(vec![2, 1, 3, 3], (0..18).map(|i| (i as f64).sin()).collect()).unwrap());
            let c = tape.conv2d(x, k, 2).unwrap();
            let s = tape.sigmoid(c);
            tape.value(s).to_vec()
        };
        assert_eq!(run(), run());
    }
}
