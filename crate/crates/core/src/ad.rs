//! Reverse-mode automatic differentiation on a recorded tape.
//!
//! The primitive vocabulary is a closed, enumerated set sized for the
//! forecaster: dense affine maps, pointwise activations, layer
//! normalization, dropout, concatenation/slicing, and the reductions used
//! by the sample-based scoring rule. Every differentiable primitive is
//! checked against central finite differences in the test suite.
//!
//! One tape per training thread; tensors are immutable once recorded.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value rejected by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("unknown node id {0}")]
    BadNode(NodeId),
    #[error("{op} expects {expected} inputs, got {got}")]
    Arity { op: &'static str, expected: usize, got: usize },
    #[error("invalid tensor: {0}")]
    BadTensor(String),
}

pub type AdResult<T> = Result<T, AdError>;

/// Dense row-major tensor of rank 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> AdResult<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > 2 {
            return Err(AdError::BadTensor(format!("rank {} unsupported", shape.len())));
        }
        if n != data.len() {
            return Err(AdError::BadTensor(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> AdResult<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn rows(&self) -> usize {
        self.shape[0]
    }

    fn cols(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[1]
        } else {
            1
        }
    }
}

/// Primitive operations recorded on the tape.
#[derive(Debug, Clone)]
pub enum Prim {
    /// Leaf tensor; `param` leaves receive gradients.
    Leaf { param: bool },
    /// `[m,k]·[k,n] -> [m,n]` or `[m,k]·[k] -> [m]`.
    MatMul,
    /// 2-D transpose.
    Transpose,
    /// Elementwise, equal shapes.
    Add,
    Sub,
    Mul,
    /// Multiply by a fixed scalar.
    Scale(f64),
    /// `[m,n] + [n]`, broadcast over rows.
    AddRowVec,
    /// `[m,n] + [m]`, broadcast over columns.
    AddColVec,
    Relu,
    /// x * sigmoid(x).
    Swish,
    /// log(1 + exp(x)).
    Softplus,
    /// |x|; subgradient 0 at the kink.
    Abs,
    /// Normalize the last axis; inputs (x, scale, shift).
    LayerNorm { eps: f64 },
    /// Inverted dropout: train scales kept values by 1/(1-rate); eval is identity.
    Dropout { rate: f64, seed: u64, train: bool },
    /// Concatenate rank-1 inputs.
    Concat,
    /// Softmax along the last axis.
    SoftmaxRows,
    Sum,
    Mean,
    /// `[m,n] -> [m]`, mean over the last axis.
    MeanRows,
    /// `(1/S^2) sum_ij |v_i - v_j|` for a rank-1 input.
    PairwiseAbsMean,
    /// Rows `[start, start+len)` of a 2-D tensor.
    SliceRows { start: usize, len: usize },
    /// Elements `[start, start+len)` of a rank-1 tensor.
    Slice { start: usize, len: usize },
    Reshape { shape: Vec<usize> },
}

struct Node {
    prim: Prim,
    inputs: Vec<NodeId>,
    value: Tensor,
    /// Forward intermediates needed by backward (dropout keep-mask).
    saved: Vec<f64>,
}

/// Gradients for every leaf of a tape; absent leaves read as exact zeros.
pub struct GradientMap {
    grads: Vec<Option<Tensor>>,
}

impl GradientMap {
    /// Gradient of `leaf`; a leaf unused by the output is exactly zero.
    pub fn get(&self, leaf: NodeId, shape: &[usize]) -> Tensor {
        match self.grads.get(leaf).and_then(|g| g.as_ref()) {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, leaf: NodeId) -> Option<Tensor> {
        self.grads.get_mut(leaf).and_then(|g| g.take())
    }

    /// Accumulate `other` into self with weight `w`.
    pub fn add_scaled(&mut self, other: &GradientMap, w: f64) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize_with(other.grads.len(), || None);
        }
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                match &mut self.grads[i] {
                    Some(acc) => {
                        for (a, b) in acc.data.iter_mut().zip(g.data.iter()) {
                            *a += w * b;
                        }
                    }
                    slot @ None => {
                        let mut t = g.clone();
                        for v in t.data.iter_mut() {
                            *v *= w;
                        }
                        *slot = Some(t);
                    }
                }
            }
        }
    }
}

/// Recorded forward pass. Nodes are in topological order by construction.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Constant leaf; never receives a gradient entry.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Prim::Leaf { param: false }, vec![], value, vec![])
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Prim::Leaf { param: true }, vec![], value, vec![])
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, prim: Prim, inputs: Vec<NodeId>, value: Tensor, saved: Vec<f64>) -> NodeId {
        self.nodes.push(Node { prim, inputs, value, saved });
        self.nodes.len() - 1
    }

    /// Record one primitive application. Inputs must be finite and
    /// shape-conformant; the output is checked finite as well.
    pub fn apply(&mut self, prim: Prim, inputs: &[NodeId]) -> AdResult<NodeId> {
        for &id in inputs {
            if id >= self.nodes.len() {
                return Err(AdError::BadNode(id));
            }
            if !self.nodes[id].value.is_finite() {
                return Err(AdError::NonFinite { op: prim_name(&prim) });
            }
        }
        let (value, saved) = self.forward(&prim, inputs)?;
        if !value.is_finite() {
            return Err(AdError::NonFinite { op: prim_name(&prim) });
        }
        Ok(self.push(prim, inputs.to_vec(), value, saved))
    }

    fn forward(&self, prim: &Prim, inputs: &[NodeId]) -> AdResult<(Tensor, Vec<f64>)> {
        let arity = |expected: usize| -> AdResult<()> {
            if inputs.len() != expected {
                Err(AdError::Arity { op: prim_name(prim), expected, got: inputs.len() })
            } else {
                Ok(())
            }
        };
        let v = |i: usize| &self.nodes[inputs[i]].value;
        match prim {
            Prim::Leaf { .. } => Err(AdError::Arity { op: "leaf", expected: 0, got: inputs.len() }),
            Prim::MatMul => {
                arity(2)?;
                let (a, b) = (v(0), v(1));
                if a.shape.len() != 2 || a.shape[1] != b.shape[0] {
                    return Err(AdError::ShapeMismatch {
                        op: "matmul",
                        detail: format!("{:?} x {:?}", a.shape, b.shape),
                    });
                }
                let (m, k) = (a.shape[0], a.shape[1]);
                let n = b.cols();
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = a.data[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let brow = &b.data[p * n..(p + 1) * n];
                        let orow = &mut out[i * n..(i + 1) * n];
                        for j in 0..n {
                            orow[j] += aip * brow[j];
                        }
                    }
                }
                let shape = if b.shape.len() == 2 { vec![m, n] } else { vec![m] };
                Ok((Tensor { shape, data: out }, vec![]))
            }
            Prim::Transpose => {
                arity(1)?;
                let a = v(0);
                if a.shape.len() != 2 {
                    return Err(AdError::ShapeMismatch {
                        op: "transpose",
                        detail: format!("{:?}", a.shape),
                    });
                }
                let (m, n) = (a.shape[0], a.shape[1]);
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[j * m + i] = a.data[i * n + j];
                    }
                }
                Ok((Tensor { shape: vec![n, m], data: out }, vec![]))
            }
            Prim::Add | Prim::Sub | Prim::Mul => {
                arity(2)?;
                let (a, b) = (v(0), v(1));
                if a.shape != b.shape {
                    return Err(AdError::ShapeMismatch {
                        op: prim_name(prim),
                        detail: format!("{:?} vs {:?}", a.shape, b.shape),
                    });
                }
                let data = a
                    .data
                    .iter()
                    .zip(&b.data)
                    .map(|(x, y)| match prim {
                        Prim::Add => x + y,
                        Prim::Sub => x - y,
                        _ => x * y,
                    })
                    .collect();
                Ok((Tensor { shape: a.shape.clone(), data }, vec![]))
            }
            Prim::Scale(s) => {
                arity(1)?;
                let a = v(0);
                Ok((
                    Tensor { shape: a.shape.clone(), data: a.data.iter().map(|x| s * x).collect() },
                    vec![],
                ))
            }
            Prim::AddRowVec => {
                arity(2)?;
                let (a, b) = (v(0), v(1));
                if a.shape.len() != 2 || b.shape.len() != 1 || a.shape[1] != b.shape[0] {
                    return Err(AdError::ShapeMismatch {
                        op: "add_row_vec",
                        detail: format!("{:?} + {:?}", a.shape, b.shape),
                    });
                }
                let n = a.shape[1];
                let data = a.data.iter().enumerate().map(|(i, x)| x + b.data[i % n]).collect();
                Ok((Tensor { shape: a.shape.clone(), data }, vec![]))
            }
            Prim::AddColVec => {
                arity(2)?;
                let (a, b) = (v(0), v(1));
                if a.shape.len() != 2 || b.shape.len() != 1 || a.shape[0] != b.shape[0] {
                    return Err(AdError::ShapeMismatch {
                        op: "add_col_vec",
                        detail: format!("{:?} + {:?}", a.shape, b.shape),
                    });
                }
                let n = a.shape[1];
                let data = a.data.iter().enumerate().map(|(i, x)| x + b.data[i / n]).collect();
                Ok((Tensor { shape: a.shape.clone(), data }, vec![]))
            }
            Prim::Relu => {
                arity(1)?;
                let a = v(0);
                let data = a.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
                Ok((Tensor { shape: a.shape.clone(), data }, vec![]))
            }
            Prim::Swish => {
                arity(1)?;
                let a = v(0);
                let data = a.data.iter().map(|&x| x * sigmoid(x)).collect();
                Ok((Tensor { shape: a.shape.clone(), data }, vec![]))
            }
            Prim::Softplus => {
                arity(1)?;
                let a = v(0);
                let data = a.data.iter().map(|&x| softplus(x)).collect();
                Ok((Tensor { shape: a.shape.clone(), data }, vec![]))
            }
            Prim::Abs => {
                arity(1)?;
                let a = v(0);
                let data = a.data.iter().map(|x| x.abs()).collect();
                Ok((Tensor { shape: a.shape.clone(), data }, vec![]))
            }
            Prim::LayerNorm { eps } => {
                arity(3)?;
                let (x, scale, shift) = (v(0), v(1), v(2));
                let n = x.cols();
                let rows = if x.shape.len() == 2 { x.rows() } else { 1 };
                let width = if x.shape.len() == 2 { n } else { x.len() };
                if scale.shape != vec![width] || shift.shape != vec![width] {
                    return Err(AdError::ShapeMismatch {
                        op: "layer_norm",
                        detail: format!("x {:?}, scale {:?}, shift {:?}", x.shape, scale.shape, shift.shape),
                    });
                }
                let mut out = vec![0.0; x.len()];
                for r in 0..rows {
                    let xr = &x.data[r * width..(r + 1) * width];
                    let mean = xr.iter().sum::<f64>() / width as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    for i in 0..width {
                        out[r * width + i] = (xr[i] - mean) * inv * scale.data[i] + shift.data[i];
                    }
                }
                Ok((Tensor { shape: x.shape.clone(), data: out }, vec![]))
            }
            Prim::Dropout { rate, seed, train } => {
                arity(1)?;
                let a = v(0);
                if !(0.0..1.0).contains(rate) {
                    return Err(AdError::BadTensor(format!("dropout rate {rate} outside [0,1)")));
                }
                if !train || *rate == 0.0 {
                    return Ok((a.clone(), vec![1.0; a.len()]));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let keep = 1.0 - rate;
                let mask: Vec<f64> = (0..a.len())
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let data = a.data.iter().zip(&mask).map(|(x, m)| x * m).collect();
                Ok((Tensor { shape: a.shape.clone(), data }, mask))
            }
            Prim::Concat => {
                if inputs.is_empty() {
                    return Err(AdError::Arity { op: "concat", expected: 1, got: 0 });
                }
                let mut data = Vec::new();
                for &id in inputs {
                    let t = &self.nodes[id].value;
                    if t.shape.len() != 1 {
                        return Err(AdError::ShapeMismatch {
                            op: "concat",
                            detail: format!("rank-1 required, got {:?}", t.shape),
                        });
                    }
                    data.extend_from_slice(&t.data);
                }
                Ok((Tensor::vector(data), vec![]))
            }
            Prim::SoftmaxRows => {
                arity(1)?;
                let a = v(0);
                let width = a.cols().max(if a.shape.len() == 1 { a.len() } else { 0 });
                let width = if a.shape.len() == 1 { a.len() } else { width };
                let rows = a.len() / width;
                let mut out = vec![0.0; a.len()];
                for r in 0..rows {
                    let xr = &a.data[r * width..(r + 1) * width];
                    let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut denom = 0.0;
                    for i in 0..width {
                        let e = (xr[i] - m).exp();
                        out[r * width + i] = e;
                        denom += e;
                    }
                    for i in 0..width {
                        out[r * width + i] /= denom;
                    }
                }
                Ok((Tensor { shape: a.shape.clone(), data: out }, vec![]))
            }
            Prim::Sum => {
                arity(1)?;
                Ok((Tensor::scalar(v(0).data.iter().sum()), vec![]))
            }
            Prim::Mean => {
                arity(1)?;
                let a = v(0);
                if a.is_empty() {
                    return Err(AdError::BadTensor("mean of empty tensor".into()));
                }
                Ok((Tensor::scalar(a.data.iter().sum::<f64>() / a.len() as f64), vec![]))
            }
            Prim::MeanRows => {
                arity(1)?;
                let a = v(0);
                if a.shape.len() != 2 {
                    return Err(AdError::ShapeMismatch {
                        op: "mean_rows",
                        detail: format!("{:?}", a.shape),
                    });
                }
                let (m, n) = (a.shape[0], a.shape[1]);
                let data = (0..m)
                    .map(|i| a.data[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)
                    .collect();
                Ok((Tensor { shape: vec![m], data }, vec![]))
            }
            Prim::PairwiseAbsMean => {
                arity(1)?;
                let a = v(0);
                if a.shape.len() != 1 || a.is_empty() {
                    return Err(AdError::ShapeMismatch {
                        op: "pairwise_abs_mean",
                        detail: format!("{:?}", a.shape),
                    });
                }
                let s = a.len();
                let mut acc = 0.0;
                for i in 0..s {
                    for j in 0..s {
                        acc += (a.data[i] - a.data[j]).abs();
                    }
                }
                Ok((Tensor::scalar(acc / (s * s) as f64), vec![]))
            }
            Prim::SliceRows { start, len } => {
                arity(1)?;
                let a = v(0);
                if a.shape.len() != 2 || start + len > a.shape[0] {
                    return Err(AdError::ShapeMismatch {
                        op: "slice_rows",
                        detail: format!("rows {}..{} of {:?}", start, start + len, a.shape),
                    });
                }
                let n = a.shape[1];
                let data = a.data[start * n..(start + len) * n].to_vec();
                Ok((Tensor { shape: vec![*len, n], data }, vec![]))
            }
            Prim::Slice { start, len } => {
                arity(1)?;
                let a = v(0);
                if a.shape.len() != 1 || start + len > a.len() {
                    return Err(AdError::ShapeMismatch {
                        op: "slice",
                        detail: format!("{}..{} of {:?}", start, start + len, a.shape),
                    });
                }
                Ok((Tensor::vector(a.data[*start..start + len].to_vec()), vec![]))
            }
            Prim::Reshape { shape } => {
                arity(1)?;
                let a = v(0);
                let n: usize = shape.iter().product();
                if n != a.len() || shape.is_empty() || shape.len() > 2 {
                    return Err(AdError::ShapeMismatch {
                        op: "reshape",
                        detail: format!("{:?} -> {:?}", a.shape, shape),
                    });
                }
                Ok((Tensor { shape: shape.clone(), data: a.data.clone() }, vec![]))
            }
        }
    }

    /// Gradients of a scalar `output` with respect to every param leaf.
    pub fn backward(&self, output: NodeId) -> AdResult<GradientMap> {
        let out = self.nodes.get(output).ok_or(AdError::BadNode(output))?;
        if !out.value.is_scalar() {
            return Err(AdError::NonScalarOutput(out.value.shape.clone()));
        }
        self.backward_seeded(output, &Tensor::scalar(1.0))
    }

    /// Backward pass from `node` with a supplied upstream gradient of the
    /// same shape. Used to chain externally computed gradients (e.g. a
    /// regret gradient with respect to the forecast) into the parameters.
    pub fn backward_seeded(&self, node: NodeId, seed: &Tensor) -> AdResult<GradientMap> {
        let nref = self.nodes.get(node).ok_or(AdError::BadNode(node))?;
        if nref.value.shape != *seed.shape() {
            return Err(AdError::ShapeMismatch {
                op: "backward_seeded",
                detail: format!("node {:?} vs seed {:?}", nref.value.shape, seed.shape()),
            });
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[node] = Some(seed.clone());
        for id in (0..=node).rev() {
            let g = match adj[id].take() {
                Some(g) => g,
                None => continue,
            };
            let n = &self.nodes[id];
            if matches!(n.prim, Prim::Leaf { param: true }) {
                adj[id] = Some(g);
                continue;
            }
            if matches!(n.prim, Prim::Leaf { .. }) {
                continue;
            }
            let contribs = self.vjp(n, &g);
            for (input, grad) in n.inputs.iter().zip(contribs) {
                match &mut adj[*input] {
                    Some(acc) => {
                        for (a, b) in acc.data.iter_mut().zip(grad.data.iter()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(GradientMap { grads: adj })
    }

    /// Vector-Jacobian products for each input of `n` given upstream `g`.
    fn vjp(&self, n: &Node, g: &Tensor) -> Vec<Tensor> {
        let v = |i: usize| &self.nodes[n.inputs[i]].value;
        match &n.prim {
            Prim::Leaf { .. } => vec![],
            Prim::MatMul => {
                let (a, b) = (v(0), v(1));
                let (m, k) = (a.shape[0], a.shape[1]);
                let ncols = b.cols();
                // dA = g * B^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..ncols {
                            acc += g.data[i * ncols + j] * b.data[p * ncols + j];
                        }
                        da[i * k + p] = acc;
                    }
                }
                // dB = A^T * g
                let mut db = vec![0.0; k * ncols];
                for p in 0..k {
                    for i in 0..m {
                        let aip = a.data[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for j in 0..ncols {
                            db[p * ncols + j] += aip * g.data[i * ncols + j];
                        }
                    }
                }
                vec![
                    Tensor { shape: a.shape.clone(), data: da },
                    Tensor { shape: b.shape.clone(), data: db },
                ]
            }
            Prim::Transpose => {
                let a = v(0);
                let (m, nc) = (a.shape[0], a.shape[1]);
                let mut da = vec![0.0; m * nc];
                for i in 0..m {
                    for j in 0..nc {
                        da[i * nc + j] = g.data[j * m + i];
                    }
                }
                vec![Tensor { shape: a.shape.clone(), data: da }]
            }
            Prim::Add => vec![g.clone(), g.clone()],
            Prim::Sub => {
                let mut neg = g.clone();
                for x in neg.data.iter_mut() {
                    *x = -*x;
                }
                vec![g.clone(), neg]
            }
            Prim::Mul => {
                let (a, b) = (v(0), v(1));
                let da = g.data.iter().zip(&b.data).map(|(g, y)| g * y).collect();
                let db = g.data.iter().zip(&a.data).map(|(g, x)| g * x).collect();
                vec![
                    Tensor { shape: a.shape.clone(), data: da },
                    Tensor { shape: b.shape.clone(), data: db },
                ]
            }
            Prim::Scale(s) => {
                let mut da = g.clone();
                for x in da.data.iter_mut() {
                    *x *= s;
                }
                vec![da]
            }
            Prim::AddRowVec => {
                let (a, b) = (v(0), v(1));
                let nc = a.shape[1];
                let mut db = vec![0.0; nc];
                for (i, x) in g.data.iter().enumerate() {
                    db[i % nc] += x;
                }
                vec![g.clone(), Tensor { shape: b.shape.clone(), data: db }]
            }
            Prim::AddColVec => {
                let (a, b) = (v(0), v(1));
                let nc = a.shape[1];
                let mut db = vec![0.0; a.shape[0]];
                for (i, x) in g.data.iter().enumerate() {
                    db[i / nc] += x;
                }
                vec![g.clone(), Tensor { shape: b.shape.clone(), data: db }]
            }
            Prim::Relu => {
                let a = v(0);
                let da = g
                    .data
                    .iter()
                    .zip(&a.data)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                vec![Tensor { shape: a.shape.clone(), data: da }]
            }
            Prim::Swish => {
                let a = v(0);
                let da = g
                    .data
                    .iter()
                    .zip(&a.data)
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    })
                    .collect();
                vec![Tensor { shape: a.shape.clone(), data: da }]
            }
            Prim::Softplus => {
                let a = v(0);
                let da = g.data.iter().zip(&a.data).map(|(g, &x)| g * sigmoid(x)).collect();
                vec![Tensor { shape: a.shape.clone(), data: da }]
            }
            Prim::Abs => {
                let a = v(0);
                let da = g
                    .data
                    .iter()
                    .zip(&a.data)
                    .map(|(g, &x)| g * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
                    .collect();
                vec![Tensor { shape: a.shape.clone(), data: da }]
            }
            Prim::LayerNorm { eps } => {
                let (x, scale, _) = (v(0), v(1), v(2));
                let width = if x.shape.len() == 2 { x.shape[1] } else { x.len() };
                let rows = x.len() / width;
                let mut dx = vec![0.0; x.len()];
                let mut dscale = vec![0.0; width];
                let mut dshift = vec![0.0; width];
                for r in 0..rows {
                    let xr = &x.data[r * width..(r + 1) * width];
                    let gr = &g.data[r * width..(r + 1) * width];
                    let mean = xr.iter().sum::<f64>() / width as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * inv).collect();
                    let gy: Vec<f64> = gr.iter().zip(scale.data.iter()).map(|(g, s)| g * s).collect();
                    let mean_gy = gy.iter().sum::<f64>() / width as f64;
                    let mean_gy_xhat =
                        gy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / width as f64;
                    for i in 0..width {
                        dx[r * width + i] = inv * (gy[i] - mean_gy - xhat[i] * mean_gy_xhat);
                        dscale[i] += gr[i] * xhat[i];
                        dshift[i] += gr[i];
                    }
                }
                vec![
                    Tensor { shape: x.shape.clone(), data: dx },
                    Tensor { shape: vec![width], data: dscale },
                    Tensor { shape: vec![width], data: dshift },
                ]
            }
            Prim::Dropout { .. } => {
                let a = v(0);
                let da = g.data.iter().zip(&n.saved).map(|(g, m)| g * m).collect();
                vec![Tensor { shape: a.shape.clone(), data: da }]
            }
            Prim::Concat => {
                let mut out = Vec::with_capacity(n.inputs.len());
                let mut off = 0;
                for &id in &n.inputs {
                    let len = self.nodes[id].value.len();
                    out.push(Tensor::vector(g.data[off..off + len].to_vec()));
                    off += len;
                }
                out
            }
            Prim::SoftmaxRows => {
                let y = &n.value;
                let width = if y.shape.len() == 2 { y.shape[1] } else { y.len() };
                let rows = y.len() / width;
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let yr = &y.data[r * width..(r + 1) * width];
                    let gr = &g.data[r * width..(r + 1) * width];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..width {
                        dx[r * width + i] = yr[i] * (gr[i] - dot);
                    }
                }
                vec![Tensor { shape: y.shape.clone(), data: dx }]
            }
            Prim::Sum => {
                let a = v(0);
                vec![Tensor { shape: a.shape.clone(), data: vec![g.item(); a.len()] }]
            }
            Prim::Mean => {
                let a = v(0);
                let s = g.item() / a.len() as f64;
                vec![Tensor { shape: a.shape.clone(), data: vec![s; a.len()] }]
            }
            Prim::MeanRows => {
                let a = v(0);
                let (m, nc) = (a.shape[0], a.shape[1]);
                let mut da = vec![0.0; m * nc];
                for i in 0..m {
                    let s = g.data[i] / nc as f64;
                    for j in 0..nc {
                        da[i * nc + j] = s;
                    }
                }
                vec![Tensor { shape: a.shape.clone(), data: da }]
            }
            Prim::PairwiseAbsMean => {
                let a = v(0);
                let s = a.len();
                let scale = g.item() / (s * s) as f64;
                let mut da = vec![0.0; s];
                for i in 0..s {
                    let mut acc = 0.0;
                    for j in 0..s {
                        let d = a.data[i] - a.data[j];
                        acc += if d > 0.0 { 2.0 } else if d < 0.0 { -2.0 } else { 0.0 };
                    }
                    da[i] = scale * acc;
                }
                vec![Tensor { shape: a.shape.clone(), data: da }]
            }
            Prim::SliceRows { start, len } => {
                let a = v(0);
                let nc = a.shape[1];
                let mut da = vec![0.0; a.len()];
                da[start * nc..(start + len) * nc].copy_from_slice(&g.data);
                vec![Tensor { shape: a.shape.clone(), data: da }]
            }
            Prim::Slice { start, len } => {
                let a = v(0);
                let mut da = vec![0.0; a.len()];
                da[*start..start + len].copy_from_slice(&g.data);
                vec![Tensor { shape: a.shape.clone(), data: da }]
            }
            Prim::Reshape { .. } => {
                let a = v(0);
                vec![Tensor { shape: a.shape.clone(), data: g.data.clone() }]
            }
        }
    }

    // Convenience wrappers used throughout the forecaster.

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        self.apply(Prim::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        self.apply(Prim::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        self.apply(Prim::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        self.apply(Prim::Mul, &[a, b])
    }
    pub fn relu(&mut self, a: NodeId) -> AdResult<NodeId> {
        self.apply(Prim::Relu, &[a])
    }
    pub fn swish(&mut self, a: NodeId) -> AdResult<NodeId> {
        self.apply(Prim::Swish, &[a])
    }
    pub fn softplus(&mut self, a: NodeId) -> AdResult<NodeId> {
        self.apply(Prim::Softplus, &[a])
    }
    pub fn abs(&mut self, a: NodeId) -> AdResult<NodeId> {
        self.apply(Prim::Abs, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> AdResult<NodeId> {
        self.apply(Prim::Sum, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> AdResult<NodeId> {
        self.apply(Prim::Mean, &[a])
    }
    pub fn concat(&mut self, parts: &[NodeId]) -> AdResult<NodeId> {
        self.apply(Prim::Concat, parts)
    }
}

fn prim_name(p: &Prim) -> &'static str {
    match p {
        Prim::Leaf { .. } => "leaf",
        Prim::MatMul => "matmul",
        Prim::Transpose => "transpose",
        Prim::Add => "add",
        Prim::Sub => "sub",
        Prim::Mul => "mul",
        Prim::Scale(_) => "scale",
        Prim::AddRowVec => "add_row_vec",
        Prim::AddColVec => "add_col_vec",
        Prim::Relu => "relu",
        Prim::Swish => "swish",
        Prim::Softplus => "softplus",
        Prim::Abs => "abs",
        Prim::LayerNorm { .. } => "layer_norm",
        Prim::Dropout { .. } => "dropout",
        Prim::Concat => "concat",
        Prim::SoftmaxRows => "softmax_rows",
        Prim::Sum => "sum",
        Prim::Mean => "mean",
        Prim::MeanRows => "mean_rows",
        Prim::PairwiseAbsMean => "pairwise_abs_mean",
        Prim::SliceRows { .. } => "slice_rows",
        Prim::Slice { .. } => "slice",
        Prim::Reshape { .. } => "reshape",
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable log(1 + exp(x)).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Worst relative disagreement between the tape gradient of `f` and a
/// central finite difference with step 1e-5, over all coordinates of
/// `point`. `f` builds a scalar output from the given leaf.
pub fn grad_check<F>(f: F, point: &Tensor) -> AdResult<f64>
where
    F: Fn(&mut Tape, NodeId) -> AdResult<NodeId>,
{
    let eval = |t: &Tensor| -> AdResult<f64> {
        let mut tape = Tape::new();
        let x = tape.param(t.clone());
        let out = f(&mut tape, x)?;
        if !tape.value(out).is_scalar() {
            return Err(AdError::NonScalarOutput(tape.value(out).shape().to_vec()));
        }
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let out = f(&mut tape, x)?;
    let grads = tape.backward(out)?;
    let g = grads.get(x, point.shape());

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        let err = (g.data()[i] - fd).abs() / (fd.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn relu_matches_definition() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.3, -0.7, 1.1]));
        let y = tape
            .apply(Prim::Dropout { rate: 0.1, seed: 7, train: false }, &[x])
            .unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn dropout_same_seed_is_bit_reproducible() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::vector((0..64).map(|i| i as f64 * 0.1).collect()));
            let y = tape
                .apply(Prim::Dropout { rate: 0.3, seed: 42, train: true }, &[x])
                .unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn softplus_at_zero_is_log_two() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.softplus(x).unwrap();
        assert_abs_diff_eq!(tape.value(y).item(), 0.693147, epsilon = 1e-6);
    }

    #[test]
    fn backward_of_sum_relu() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![-1.0, 2.0]));
        let y = tape.relu(x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x, &[2]).data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_of_linear_map() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::matrix(3, 2, vec![0.5; 6]).unwrap());
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.matmul(w, x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        let gw = g.get(w, &[3, 2]);
        for r in 0..3 {
            assert_eq!(&gw.data()[r * 2..r * 2 + 2], &[1.0, 2.0]);
        }
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.0, -2.0, 3.0]));
        let y = tape.abs(x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x, &[3]).data(), &[0.0, -1.0, 1.0]);
    }

    #[test]
    fn unused_leaf_gets_exact_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let unused = tape.param(Tensor::vector(vec![5.0]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused, &[1]).data(), &[0.0]);
    }

    #[test]
    fn chain_rule_composition_agrees() {
        // g(f(x)) on one tape equals seeding g's input gradient through f.
        let x0 = Tensor::vector(vec![0.4, -1.2, 0.9]);
        let mut one = Tape::new();
        let x = one.param(x0.clone());
        let fx = one.swish(x).unwrap();
        let gx = one.softplus(fx).unwrap();
        let s = one.sum(gx).unwrap();
        let g_full = one.backward(s).unwrap().get(x, &[3]);

        let mut f_tape = Tape::new();
        let xf = f_tape.param(x0.clone());
        let f_out = f_tape.swish(xf).unwrap();
        let f_val = f_tape.value(f_out).clone();

        let mut g_tape = Tape::new();
        let xg = g_tape.param(f_val);
        let g_out = g_tape.softplus(xg).unwrap();
        let sg = g_tape.sum(g_out).unwrap();
        let dg = g_tape.backward(sg).unwrap().get(xg, &[3]);

        let df = f_tape.backward_seeded(f_out, &dg).unwrap().get(xf, &[3]);
        for i in 0..3 {
            assert_abs_diff_eq!(g_full.data()[i], df.data()[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected_with_dimensions() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}");
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![f64::NAN]));
        assert!(matches!(tape.relu(a), Err(AdError::NonFinite { .. })));
    }

    #[test]
    fn grad_check_sum_of_squares() {
        let err = grad_check(
            |tape, x| {
                let y = tape.mul(x, x)?;
                tape.sum(y)
            },
            &Tensor::vector(vec![1.0, 2.0, 3.0]),
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn grad_check_constant_is_zero() {
        let err = grad_check(
            |tape, x| {
                let zero = tape.apply(Prim::Scale(0.0), &[x])?;
                let s = tape.sum(zero)?;
                let c = tape.leaf(Tensor::scalar(3.5));
                tape.add(s, c)
            },
            &Tensor::vector(vec![0.2, -0.4]),
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_swish_composition() {
        let err = grad_check(
            |tape, x| {
                let a = tape.swish(x)?;
                let b = tape.swish(a)?;
                tape.mean(b)
            },
            &Tensor::vector(vec![0.31, -0.77, 1.93, 0.05]),
        )
        .unwrap();
        assert!(err < 1e-5, "max rel err {err}");
    }
}
