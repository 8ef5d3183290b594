use std::collections::HashMap;

use crate::diffcore::tensor::{ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<ParamId> },
    Matmul(ValueId, ValueId),
    Transpose(ValueId),
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Scale(ValueId, f64),
    AddBias(ValueId, ValueId),
    LeakyRelu(ValueId, f64),
    Abs(ValueId),
    ClampMin(ValueId, f64),
    Ln(ValueId),
    Sqrt(ValueId),
    SumAll(ValueId),
    SumRows(ValueId),
    SoftmaxRows { x: ValueId, mask: Option<Vec<bool>> },
    LayerNorm { x: ValueId, scale: ValueId, shift: ValueId, eps: f64 },
    PairwiseSqDist(ValueId, ValueId),
    GatherRows { x: ValueId, idx: Vec<usize> },
    ConcatRows(ValueId, ValueId),
    ConcatCols(ValueId, ValueId),
    SliceCols { x: ValueId, start: usize },
    Reshape(ValueId),
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    op: Op,
}

/// Derivative guard for `sqrt` at zero.
const SQRT_GRAD_FLOOR: f64 = 1e-12;

/// Record of an eagerly evaluated computation. Values are computed at op
/// time; `backward` replays the arena in reverse index order, which is a
/// valid topological order because ops only reference earlier ids.
///
/// Every value is a dense row-major matrix; rank-1 tensors enter as a
/// single row and scalars as 1x1.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_cache: HashMap<usize, ValueId>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct BackwardPass {
    grads: Vec<Option<Vec<f64>>>,
}

impl BackwardPass {
    /// Gradient of the loss with respect to node `v`, or `None` if the loss
    /// does not depend on it.
    pub fn grad(&self, v: ValueId) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

/// Fetch the gradient buffer for `v`, materializing zeros on first touch.
fn slot(grads: &mut [Option<Vec<f64>>], v: ValueId, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: ValueId) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn dims(&self, v: ValueId) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Copy a recorded value out as a tensor (always rank 2).
    pub fn tensor(&self, v: ValueId) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_values(&[n.rows, n.cols], n.values.clone()).expect("node layout is consistent")
    }

    fn push(&mut self, rows: usize, cols: usize, values: Vec<f64>, op: Op) -> ValueId {
        debug_assert_eq!(rows * cols, values.len());
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { rows, cols, values, op });
        id
    }

    /// Record a constant. Gradients with respect to it are still available
    /// from the backward pass if the caller keeps the id.
    pub fn constant(&mut self, t: &Tensor) -> ValueId {
        let (rows, cols) = match t.shape.len() {
            2 => (t.shape[0], t.shape[1]),
            1 => (1, t.shape[0]),
            _ => (1, t.len()),
        };
        self.push(rows, cols, t.values.clone(), Op::Leaf { param: None })
    }

    pub fn constant_from(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<ValueId> {
        if rows * cols != values.len() {
            return Err(Error::Shape {
                op: "constant_from",
                detail: format!("{}x{} wants {} values, got {}", rows, cols, rows * cols, values.len()),
            });
        }
        Ok(self.push(rows, cols, values, Op::Leaf { param: None }))
    }

    pub fn scalar_const(&mut self, v: f64) -> ValueId {
        self.push(1, 1, vec![v], Op::Leaf { param: None })
    }

    /// Load a parameter onto the tape. Repeated loads of the same parameter
    /// return the same node, so each parameter has exactly one leaf.
    pub fn param(&mut self, set: &ParamSet, id: ParamId) -> ValueId {
        if let Some(&v) = self.param_cache.get(&id.0) {
            return v;
        }
        let t = &set.get(id).tensor;
        let (rows, cols) = match t.shape.len() {
            2 => (t.shape[0], t.shape[1]),
            1 => (1, t.shape[0]),
            _ => (1, t.len()),
        };
        let v = self.push(rows, cols, t.values.clone(), Op::Leaf { param: Some(id) });
        self.param_cache.insert(id.0, v);
        v
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("{}x{} . {}x{}", m, k, k2, n),
            });
        }
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += x * brow[j];
                }
            }
        }
        Ok(self.push(m, n, out, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: ValueId) -> ValueId {
        let (m, n) = self.dims(a);
        let av = &self.nodes[a.0].values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        self.push(n, m, out, Op::Transpose(a))
    }

    fn binary_same_shape(&self, name: &'static str, a: ValueId, b: ValueId) -> Result<(usize, usize)> {
        let da = self.dims(a);
        let db = self.dims(b);
        if da != db {
            return Err(Error::Shape {
                op: name,
                detail: format!("{}x{} vs {}x{}", da.0, da.1, db.0, db.1),
            });
        }
        Ok(da)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, n) = self.binary_same_shape("add", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(m, n, out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, n) = self.binary_same_shape("sub", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(m, n, out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, n) = self.binary_same_shape("mul", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(m, n, out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> ValueId {
        let (m, n) = self.dims(a);
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x * c).collect();
        self.push(m, n, out, Op::Scale(a, c))
    }

    /// Add a row vector to every row of a matrix.
    pub fn add_bias(&mut self, a: ValueId, bias: ValueId) -> Result<ValueId> {
        let (m, n) = self.dims(a);
        let (br, bc) = self.dims(bias);
        if br != 1 || bc != n {
            return Err(Error::Shape {
                op: "add_bias",
                detail: format!("matrix {}x{}, bias {}x{}", m, n, br, bc),
            });
        }
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[bias.0].values;
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(av[i * n + j] + bv[j]);
            }
        }
        Ok(self.push(m, n, out, Op::AddBias(a, bias)))
    }

    pub fn leaky_relu(&mut self, a: ValueId, slope: f64) -> ValueId {
        let (m, n) = self.dims(a);
        let out: Vec<f64> = self.nodes[a.0]
            .values
            .iter()
            .map(|&x| if x >= 0.0 { x } else { slope * x })
            .collect();
        self.push(m, n, out, Op::LeakyRelu(a, slope))
    }

    pub fn abs(&mut self, a: ValueId) -> ValueId {
        let (m, n) = self.dims(a);
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x.abs()).collect();
        self.push(m, n, out, Op::Abs(a))
    }

    pub fn clamp_min(&mut self, a: ValueId, floor: f64) -> ValueId {
        let (m, n) = self.dims(a);
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x.max(floor)).collect();
        self.push(m, n, out, Op::ClampMin(a, floor))
    }

    pub fn ln(&mut self, a: ValueId) -> ValueId {
        let (m, n) = self.dims(a);
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x.ln()).collect();
        self.push(m, n, out, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: ValueId) -> ValueId {
        let (m, n) = self.dims(a);
        let out: Vec<f64> = self.nodes[a.0].values.iter().map(|x| x.sqrt()).collect();
        self.push(m, n, out, Op::Sqrt(a))
    }

    pub fn sum_all(&mut self, a: ValueId) -> ValueId {
        let s: f64 = self.nodes[a.0].values.iter().sum();
        self.push(1, 1, vec![s], Op::SumAll(a))
    }

    /// Row sums: [m, n] -> [m, 1].
    pub fn sum_rows(&mut self, a: ValueId) -> ValueId {
        let (m, n) = self.dims(a);
        let av = &self.nodes[a.0].values;
        let out: Vec<f64> = (0..m).map(|i| av[i * n..(i + 1) * n].iter().sum()).collect();
        self.push(m, 1, out, Op::SumRows(a))
    }

    /// Row-wise softmax. With a mask, only `true` entries participate; the
    /// rest come out as exact 0.0. A row whose mask admits no entry is an
    /// error.
    pub fn softmax_rows(&mut self, x: ValueId, mask: Option<&[bool]>) -> Result<ValueId> {
        let (m, n) = self.dims(x);
        if let Some(mk) = mask {
            if mk.len() != m * n {
                return Err(Error::Shape {
                    op: "softmax_rows",
                    detail: format!("mask len {} for {}x{}", mk.len(), m, n),
                });
            }
        }
        let xv = &self.nodes[x.0].values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let allow = |j: usize| mask.map_or(true, |mk| mk[i * n + j]);
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                if allow(j) && row[j] > max {
                    max = row[j];
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow {
                    op: "softmax_rows",
                    row: i,
                    detail: "no admissible entries".into(),
                });
            }
            let mut sum = 0.0;
            for j in 0..n {
                if allow(j) {
                    let e = (row[j] - max).exp();
                    out[i * n + j] = e;
                    sum += e;
                }
            }
            for j in 0..n {
                if allow(j) {
                    out[i * n + j] /= sum;
                }
            }
        }
        Ok(self.push(m, n, out, Op::SoftmaxRows { x, mask: mask.map(|m| m.to_vec()) }))
    }

    /// Row-wise layer normalization with learned affine, population variance.
    pub fn layer_norm(&mut self, x: ValueId, scale: ValueId, shift: ValueId, eps: f64) -> Result<ValueId> {
        let (m, n) = self.dims(x);
        for (name, v) in [("scale", scale), ("shift", shift)] {
            let (r, c) = self.dims(v);
            if r != 1 || c != n {
                return Err(Error::Shape {
                    op: "layer_norm",
                    detail: format!("{} is {}x{}, expected 1x{}", name, r, c, n),
                });
            }
        }
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm: eps must be positive, got {}", eps)));
        }
        let xv = &self.nodes[x.0].values;
        let sv = &self.nodes[scale.0].values;
        let bv = &self.nodes[shift.0].values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv * sv[j] + bv[j];
            }
        }
        Ok(self.push(m, n, out, Op::LayerNorm { x, scale, shift, eps }))
    }

    /// Pairwise squared Euclidean distances: x [m, d], y [p, d] -> [m, p].
    pub fn pairwise_sq_dist(&mut self, x: ValueId, y: ValueId) -> Result<ValueId> {
        let (m, d) = self.dims(x);
        let (p, d2) = self.dims(y);
        if d != d2 {
            return Err(Error::Shape {
                op: "pairwise_sq_dist",
                detail: format!("{}x{} vs {}x{}", m, d, p, d2),
            });
        }
        let xv = &self.nodes[x.0].values;
        let yv = &self.nodes[y.0].values;
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            for j in 0..p {
                let mut s = 0.0;
                for k in 0..d {
                    let diff = xv[i * d + k] - yv[j * d + k];
                    s += diff * diff;
                }
                out[i * p + j] = s;
            }
        }
        Ok(self.push(m, p, out, Op::PairwiseSqDist(x, y)))
    }

    pub fn gather_rows(&mut self, x: ValueId, idx: &[usize]) -> Result<ValueId> {
        let (m, n) = self.dims(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Contract(format!("gather_rows: index {} out of {} rows", bad, m)));
        }
        let xv = &self.nodes[x.0].values;
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&xv[i * n..(i + 1) * n]);
        }
        Ok(self.push(idx.len(), n, out, Op::GatherRows { x, idx: idx.to_vec() }))
    }

    pub fn concat_rows(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, n) = self.dims(a);
        let (p, n2) = self.dims(b);
        if n != n2 {
            return Err(Error::Shape {
                op: "concat_rows",
                detail: format!("{}x{} over {}x{}", m, n, p, n2),
            });
        }
        let mut out = self.nodes[a.0].values.clone();
        out.extend_from_slice(&self.nodes[b.0].values);
        Ok(self.push(m + p, n, out, Op::ConcatRows(a, b)))
    }

    pub fn concat_cols(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, n) = self.dims(a);
        let (m2, p) = self.dims(b);
        if m != m2 {
            return Err(Error::Shape {
                op: "concat_cols",
                detail: format!("{}x{} beside {}x{}", m, n, m2, p),
            });
        }
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = Vec::with_capacity(m * (n + p));
        for i in 0..m {
            out.extend_from_slice(&av[i * n..(i + 1) * n]);
            out.extend_from_slice(&bv[i * p..(i + 1) * p]);
        }
        Ok(self.push(m, n + p, out, Op::ConcatCols(a, b)))
    }

    pub fn slice_cols(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let (m, n) = self.dims(x);
        if start + len > n || len == 0 {
            return Err(Error::Contract(format!(
                "slice_cols: [{}, {}) out of {} columns",
                start,
                start + len,
                n
            )));
        }
        let xv = &self.nodes[x.0].values;
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        Ok(self.push(m, len, out, Op::SliceCols { x, start }))
    }

    pub fn reshape(&mut self, a: ValueId, rows: usize, cols: usize) -> Result<ValueId> {
        let (m, n) = self.dims(a);
        if m * n != rows * cols {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{}x{} -> {}x{}", m, n, rows, cols),
            });
        }
        let values = self.nodes[a.0].values.clone();
        Ok(self.push(rows, cols, values, Op::Reshape(a)))
    }

    /// Reverse sweep from `loss`, which must be a scalar. Returns per-node
    /// gradients; parameters are folded in via [`Tape::accumulate_param_grads`].
    pub fn backward(&self, loss: ValueId) -> Result<BackwardPass> {
        let (lm, ln) = self.dims(loss);
        if lm * ln != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got {}x{}",
                lm, ln
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let g = match grads[i].clone() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf { .. } => {}
                Op::Matmul(a, b) => {
                    let (ma, ka) = self.dims(*a);
                    let (_, nb) = self.dims(*b);
                    let av = &self.nodes[a.0].values;
                    let bv = &self.nodes[b.0].values;
                    {
                        // dA += G . B^T
                        let da = slot(&mut grads, *a, ma * ka);
                        for r in 0..ma {
                            for c in 0..ka {
                                let mut s = 0.0;
                                for j in 0..nb {
                                    s += g[r * nb + j] * bv[c * nb + j];
                                }
                                da[r * ka + c] += s;
                            }
                        }
                    }
                    {
                        // dB += A^T . G
                        let db = slot(&mut grads, *b, ka * nb);
                        for r in 0..ka {
                            for c in 0..nb {
                                let mut s = 0.0;
                                for p in 0..ma {
                                    s += av[p * ka + r] * g[p * nb + c];
                                }
                                db[r * nb + c] += s;
                            }
                        }
                    }
                }
                Op::Transpose(a) => {
                    let (ma, na) = self.dims(*a);
                    let da = slot(&mut grads, *a, ma * na);
                    for r in 0..ma {
                        for c in 0..na {
                            da[r * na + c] += g[c * ma + r];
                        }
                    }
                }
                Op::Add(a, b) => {
                    {
                        let da = slot(&mut grads, *a, g.len());
                        for (d, gv) in da.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    }
                    let db = slot(&mut grads, *b, g.len());
                    for (d, gv) in db.iter_mut().zip(&g) {
                        *d += gv;
                    }
                }
                Op::Sub(a, b) => {
                    {
                        let da = slot(&mut grads, *a, g.len());
                        for (d, gv) in da.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    }
                    let db = slot(&mut grads, *b, g.len());
                    for (d, gv) in db.iter_mut().zip(&g) {
                        *d -= gv;
                    }
                }
                Op::Mul(a, b) => {
                    {
                        let bv = &self.nodes[b.0].values;
                        let da = slot(&mut grads, *a, g.len());
                        for k in 0..g.len() {
                            da[k] += g[k] * bv[k];
                        }
                    }
                    let av = &self.nodes[a.0].values;
                    let db = slot(&mut grads, *b, g.len());
                    for k in 0..g.len() {
                        db[k] += g[k] * av[k];
                    }
                }
                Op::Scale(a, c) => {
                    let da = slot(&mut grads, *a, g.len());
                    for (d, gv) in da.iter_mut().zip(&g) {
                        *d += c * gv;
                    }
                }
                Op::AddBias(a, bias) => {
                    let (m, n) = self.dims(*a);
                    {
                        let da = slot(&mut grads, *a, m * n);
                        for (d, gv) in da.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    }
                    let db = slot(&mut grads, *bias, n);
                    for r in 0..m {
                        for c in 0..n {
                            db[c] += g[r * n + c];
                        }
                    }
                }
                Op::LeakyRelu(a, s) => {
                    let xv = &self.nodes[a.0].values;
                    let da = slot(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        da[k] += g[k] * if xv[k] >= 0.0 { 1.0 } else { *s };
                    }
                }
                Op::Abs(a) => {
                    let xv = &self.nodes[a.0].values;
                    let da = slot(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        let s = if xv[k] > 0.0 {
                            1.0
                        } else if xv[k] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        da[k] += g[k] * s;
                    }
                }
                Op::ClampMin(a, floor) => {
                    let xv = &self.nodes[a.0].values;
                    let da = slot(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        if xv[k] >= *floor {
                            da[k] += g[k];
                        }
                    }
                }
                Op::Ln(a) => {
                    let xv = &self.nodes[a.0].values;
                    let da = slot(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        da[k] += g[k] / xv[k];
                    }
                }
                Op::Sqrt(a) => {
                    let yv = &node.values;
                    let da = slot(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        da[k] += g[k] / (2.0 * yv[k].max(SQRT_GRAD_FLOOR));
                    }
                }
                Op::SumAll(a) => {
                    let len = self.nodes[a.0].values.len();
                    let gv = g[0];
                    let da = slot(&mut grads, *a, len);
                    for d in da.iter_mut() {
                        *d += gv;
                    }
                }
                Op::SumRows(a) => {
                    let (m, n) = self.dims(*a);
                    let da = slot(&mut grads, *a, m * n);
                    for r in 0..m {
                        for c in 0..n {
                            da[r * n + c] += g[r];
                        }
                    }
                }
                Op::SoftmaxRows { x, mask } => {
                    let (m, n) = self.dims(*x);
                    let s = &node.values;
                    let dx = slot(&mut grads, *x, m * n);
                    for r in 0..m {
                        let allow = |j: usize| mask.as_ref().map_or(true, |mk| mk[r * n + j]);
                        let mut dot = 0.0;
                        for j in 0..n {
                            if allow(j) {
                                dot += g[r * n + j] * s[r * n + j];
                            }
                        }
                        for j in 0..n {
                            if allow(j) {
                                dx[r * n + j] += s[r * n + j] * (g[r * n + j] - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm { x, scale, shift, eps } => {
                    let (m, n) = self.dims(*x);
                    let xv = &self.nodes[x.0].values;
                    let sv = self.nodes[scale.0].values.clone();
                    let nf = n as f64;
                    let mut xhat = vec![0.0; m * n];
                    let mut inv_std = vec![0.0; m];
                    for r in 0..m {
                        let row = &xv[r * n..(r + 1) * n];
                        let mean = row.iter().sum::<f64>() / nf;
                        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / nf;
                        let inv = 1.0 / (var + eps).sqrt();
                        inv_std[r] = inv;
                        for c in 0..n {
                            xhat[r * n + c] = (row[c] - mean) * inv;
                        }
                    }
                    {
                        let dx = slot(&mut grads, *x, m * n);
                        for r in 0..m {
                            let mut gh_mean = 0.0;
                            let mut ghx_mean = 0.0;
                            for c in 0..n {
                                let gh = g[r * n + c] * sv[c];
                                gh_mean += gh;
                                ghx_mean += gh * xhat[r * n + c];
                            }
                            gh_mean /= nf;
                            ghx_mean /= nf;
                            for c in 0..n {
                                let gh = g[r * n + c] * sv[c];
                                dx[r * n + c] += (gh - gh_mean - xhat[r * n + c] * ghx_mean) * inv_std[r];
                            }
                        }
                    }
                    {
                        let ds = slot(&mut grads, *scale, n);
                        for r in 0..m {
                            for c in 0..n {
                                ds[c] += g[r * n + c] * xhat[r * n + c];
                            }
                        }
                    }
                    let db = slot(&mut grads, *shift, n);
                    for r in 0..m {
                        for c in 0..n {
                            db[c] += g[r * n + c];
                        }
                    }
                }
                Op::PairwiseSqDist(x, y) => {
                    let (m, d) = self.dims(*x);
                    let (p, _) = self.dims(*y);
                    let xv = &self.nodes[x.0].values;
                    let yv = &self.nodes[y.0].values;
                    {
                        let dx = slot(&mut grads, *x, m * d);
                        for i in 0..m {
                            for j in 0..p {
                                let gv = 2.0 * g[i * p + j];
                                for k in 0..d {
                                    dx[i * d + k] += gv * (xv[i * d + k] - yv[j * d + k]);
                                }
                            }
                        }
                    }
                    let dy = slot(&mut grads, *y, p * d);
                    for i in 0..m {
                        for j in 0..p {
                            let gv = 2.0 * g[i * p + j];
                            for k in 0..d {
                                dy[j * d + k] -= gv * (xv[i * d + k] - yv[j * d + k]);
                            }
                        }
                    }
                }
                Op::GatherRows { x, idx } => {
                    let (m, n) = self.dims(*x);
                    let dx = slot(&mut grads, *x, m * n);
                    for (t, &src) in idx.iter().enumerate() {
                        for c in 0..n {
                            dx[src * n + c] += g[t * n + c];
                        }
                    }
                }
                Op::ConcatRows(a, b) => {
                    let (ma, na) = self.dims(*a);
                    let (mb, _) = self.dims(*b);
                    {
                        let da = slot(&mut grads, *a, ma * na);
                        for k in 0..ma * na {
                            da[k] += g[k];
                        }
                    }
                    let db = slot(&mut grads, *b, mb * na);
                    for k in 0..mb * na {
                        db[k] += g[ma * na + k];
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (m, na) = self.dims(*a);
                    let (_, nb) = self.dims(*b);
                    {
                        let da = slot(&mut grads, *a, m * na);
                        for r in 0..m {
                            for c in 0..na {
                                da[r * na + c] += g[r * (na + nb) + c];
                            }
                        }
                    }
                    let db = slot(&mut grads, *b, m * nb);
                    for r in 0..m {
                        for c in 0..nb {
                            db[r * nb + c] += g[r * (na + nb) + na + c];
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    let (m, n) = self.dims(*x);
                    let len = node.cols;
                    let dx = slot(&mut grads, *x, m * n);
                    for r in 0..m {
                        for c in 0..len {
                            dx[r * n + start + c] += g[r * len + c];
                        }
                    }
                }
                Op::Reshape(a) => {
                    let da = slot(&mut grads, *a, g.len());
                    for (d, gv) in da.iter_mut().zip(&g) {
                        *d += gv;
                    }
                }
            }
        }
        Ok(BackwardPass { grads })
    }

    /// Fold leaf gradients into the parameter set. Every parameter in `set`
    /// ends up with `Some` gradient; those the loss never touched only get
    /// zeros added.
    pub fn accumulate_param_grads(&self, bp: &BackwardPass, set: &mut ParamSet) {
        for id in set.ids().collect::<Vec<_>>() {
            let len = set.get(id).tensor.len();
            set.get_mut(id)
                .tensor
                .grad
                .get_or_insert_with(|| vec![0.0; len]);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(pid) } = node.op {
                if let Some(g) = bp.grad(ValueId(i)) {
                    let grad = set
                        .get_mut(pid)
                        .tensor
                        .grad
                        .as_mut()
                        .expect("materialized above");
                    for (d, gv) in grad.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
        }
    }

    /// Backward pass plus parameter gradient accumulation.
    pub fn backward_params(&self, loss: ValueId, set: &mut ParamSet) -> Result<()> {
        let bp = self.backward(loss)?;
        self.accumulate_param_grads(&bp, set);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::tensor::ParamGroup;
    use approx::assert_relative_eq;

    const EPS: f64 = 1e-5;

    /// Max relative error between analytic and central-difference gradients
    /// of a scalar loss, over every coordinate of every input.
    fn fd_check<F>(inputs: &[(usize, usize, Vec<f64>)], build: F) -> f64
    where
        F: Fn(&mut Tape, &[ValueId]) -> ValueId,
    {
        let eval = |vals: &[(usize, usize, Vec<f64>)]| -> f64 {
            let mut tape = Tape::new();
            let ids: Vec<ValueId> = vals
                .iter()
                .map(|(r, c, v)| tape.constant_from(*r, *c, v.clone()).unwrap())
                .collect();
            let loss = build(&mut tape, &ids);
            assert_eq!(tape.dims(loss), (1, 1), "loss must be scalar");
            tape.value(loss)[0]
        };

        let mut tape = Tape::new();
        let ids: Vec<ValueId> = inputs
            .iter()
            .map(|(r, c, v)| tape.constant_from(*r, *c, v.clone()).unwrap())
            .collect();
        let loss = build(&mut tape, &ids);
        let bp = tape.backward(loss).unwrap();

        let mut max_rel: f64 = 0.0;
        for (i, (_, _, v)) in inputs.iter().enumerate() {
            let ga: Vec<f64> = bp
                .grad(ids[i])
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; v.len()]);
            for k in 0..v.len() {
                let mut plus = inputs.to_vec();
                plus[i].2[k] += EPS;
                let mut minus = inputs.to_vec();
                minus[i].2[k] -= EPS;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * EPS);
                let rel = (fd - ga[k]).abs() / 1e-3_f64.max(fd.abs()).max(ga[k].abs());
                max_rel = max_rel.max(rel);
            }
        }
        max_rel
    }

    #[test]
    fn matmul_identity_and_hand_example() {
        let mut t = Tape::new();
        let a = t.constant_from(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let eye = t.constant_from(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let ai = t.matmul(a, eye).unwrap();
        assert_eq!(t.value(ai), &[1.0, 2.0, 3.0, 4.0]);

        let b = t.constant_from(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let ab = t.matmul(a, b).unwrap();
        assert_eq!(t.value(ab), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.constant_from(2, 3, vec![0.0; 6]).unwrap();
        let b = t.constant_from(2, 2, vec![0.0; 4]).unwrap();
        assert!(t.matmul(a, b).is_err());
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let a = (2, 3, vec![0.3, -1.1, 0.7, 2.0, -0.4, 0.9]);
        let b = (3, 2, vec![1.5, -0.2, 0.8, 0.6, -1.3, 0.4]);
        let w = (2, 2, vec![0.9, -0.5, 0.3, 1.7]);
        let rel = fd_check(&[a, b, w], |t, ids| {
            let ab = t.matmul(ids[0], ids[1]).unwrap();
            let weighted = t.mul(ab, ids[2]).unwrap();
            t.sum_all(weighted)
        });
        assert!(rel < 1e-6, "rel err {}", rel);
    }

    #[test]
    fn elementwise_and_structural_op_gradients() {
        let x = (2, 3, vec![0.4, -1.2, 2.1, 0.9, -0.3, 1.6]);
        let y = (2, 3, vec![-0.7, 0.5, 1.1, -2.0, 0.8, 0.2]);
        let w = (2, 3, vec![1.3, -0.6, 0.2, 0.9, 1.8, -1.1]);

        let rel = fd_check(&[x.clone(), y.clone(), w.clone()], |t, ids| {
            let s = t.add(ids[0], ids[1]).unwrap();
            let d = t.sub(s, ids[2]).unwrap();
            let m = t.mul(d, ids[1]).unwrap();
            let sc = t.scale(m, -0.37);
            t.sum_all(sc)
        });
        assert!(rel < 1e-6, "add/sub/mul/scale rel err {}", rel);

        let rel = fd_check(&[x.clone()], |t, ids| {
            let tr = t.transpose(ids[0]);
            let back = t.transpose(tr);
            let m = t.mul(back, ids[0]).unwrap();
            t.sum_all(m)
        });
        assert!(rel < 1e-6, "transpose rel err {}", rel);

        let rel = fd_check(&[x.clone()], |t, ids| {
            let r = t.reshape(ids[0], 3, 2).unwrap();
            let m = t.mul(r, r).unwrap();
            t.sum_all(m)
        });
        assert!(rel < 1e-6, "reshape rel err {}", rel);

        let bias = (1, 3, vec![0.5, -1.0, 0.25]);
        let rel = fd_check(&[x.clone(), bias], |t, ids| {
            let b = t.add_bias(ids[0], ids[1]).unwrap();
            let m = t.mul(b, b).unwrap();
            t.sum_all(m)
        });
        assert!(rel < 1e-6, "add_bias rel err {}", rel);
    }

    #[test]
    fn nonlinearity_gradients() {
        // Values kept away from the kinks at 0 so the derivative is clean.
        let x = (2, 3, vec![0.4, -1.2, 2.1, 0.9, -0.3, 1.6]);
        let rel = fd_check(&[x.clone()], |t, ids| {
            let l = t.leaky_relu(ids[0], 0.1);
            let m = t.mul(l, l).unwrap();
            t.sum_all(m)
        });
        assert!(rel < 1e-6, "leaky_relu rel err {}", rel);

        let rel = fd_check(&[x.clone()], |t, ids| {
            let a = t.abs(ids[0]);
            let m = t.mul(a, ids[0]).unwrap();
            t.sum_all(m)
        });
        assert!(rel < 1e-6, "abs rel err {}", rel);

        let rel = fd_check(&[x.clone()], |t, ids| {
            let c = t.clamp_min(ids[0], 0.05);
            let m = t.mul(c, c).unwrap();
            t.sum_all(m)
        });
        assert!(rel < 1e-6, "clamp_min rel err {}", rel);

        let pos = (1, 4, vec![0.3, 1.7, 2.4, 0.09]);
        let rel = fd_check(&[pos.clone()], |t, ids| {
            let l = t.ln(ids[0]);
            t.sum_all(l)
        });
        assert!(rel < 1e-6, "ln rel err {}", rel);

        let rel = fd_check(&[pos], |t, ids| {
            let s = t.sqrt(ids[0]);
            let m = t.mul(s, ids[0]).unwrap();
            t.sum_all(m)
        });
        assert!(rel < 1e-6, "sqrt rel err {}", rel);
    }

    #[test]
    fn leaky_relu_values() {
        let mut t = Tape::new();
        let x = t.constant_from(1, 3, vec![2.0, -3.0, 0.0]).unwrap();
        let a = t.leaky_relu(x, 0.5);
        assert_eq!(t.value(a), &[2.0, -1.5, 0.0]);
        let b = t.leaky_relu(x, 1.0);
        assert_eq!(t.value(b), &[2.0, -3.0, 0.0]);
        let c = t.leaky_relu(x, 0.0);
        assert_eq!(t.value(c), &[2.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_rows_values() {
        let mut t = Tape::new();
        let x = t.constant_from(1, 3, vec![1.0, 0.0, 1.0]).unwrap();
        let s = t.softmax_rows(x, None).unwrap();
        let v = t.value(s);
        assert_relative_eq!(v[0], 0.42232, max_relative = 1e-4);
        assert_relative_eq!(v[1], 0.15536, max_relative = 1e-4);
        assert_relative_eq!(v[2], 0.42232, max_relative = 1e-4);
        assert_relative_eq!(v[0] + v[1] + v[2], 1.0, epsilon = 1e-15);

        // Constant row: exactly uniform.
        let u = t.constant_from(1, 4, vec![7.5; 4]).unwrap();
        let su = t.softmax_rows(u, None).unwrap();
        assert_eq!(t.value(su), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut t = Tape::new();
        let x = t.constant_from(1, 3, vec![0.2, -1.4, 0.9]).unwrap();
        let shifted = t.constant_from(1, 3, vec![100.2, 98.6, 100.9]).unwrap();
        let a = t.softmax_rows(x, None).unwrap();
        let b = t.softmax_rows(shifted, None).unwrap();
        for (p, q) in t.value(a).to_vec().iter().zip(t.value(b)) {
            assert_relative_eq!(p, q, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_mask_zeroes_excluded_entries() {
        let mut t = Tape::new();
        // The huge masked entry must not leak into max or sum.
        let x = t.constant_from(1, 3, vec![5.0, 1000.0, 5.0]).unwrap();
        let s = t.softmax_rows(x, Some(&[true, false, true])).unwrap();
        assert_eq!(t.value(s), &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn softmax_degenerate_row_is_an_error() {
        let mut t = Tape::new();
        let x = t.constant_from(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let err = t.softmax_rows(x, Some(&[true, true, false, false]));
        match err {
            Err(Error::DegenerateRow { row, .. }) => assert_eq!(row, 1),
            other => panic!("expected degenerate row error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn softmax_gradients_masked_and_unmasked() {
        let x = (2, 4, vec![0.3, -0.8, 1.4, 0.1, 2.2, -1.5, 0.6, -0.2]);
        let w = (2, 4, vec![1.0, -2.0, 0.5, 3.0, -1.0, 0.7, 2.5, -0.3]);
        let rel = fd_check(&[x.clone(), w.clone()], |t, ids| {
            let s = t.softmax_rows(ids[0], None).unwrap();
            let m = t.mul(s, ids[1]).unwrap();
            t.sum_all(m)
        });
        assert!(rel < 1e-6, "softmax rel err {}", rel);

        let mask = [true, false, true, true, true, true, false, true];
        let rel = fd_check(&[x, w], |t, ids| {
            let s = t.softmax_rows(ids[0], Some(&mask)).unwrap();
            let m = t.mul(s, ids[1]).unwrap();
            t.sum_all(m)
        });
        assert!(rel < 1e-6, "masked softmax rel err {}", rel);
    }

    #[test]
    fn layer_norm_values() {
        let mut t = Tape::new();
        let x = t.constant_from(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let one = t.constant_from(1, 3, vec![1.0; 3]).unwrap();
        let zero = t.constant_from(1, 3, vec![0.0; 3]).unwrap();
        let y = t.layer_norm(x, one, zero, 1e-12).unwrap();
        let v = t.value(y);
        // Population variance of [1,2,3] is 2/3, so the ends sit at
        // +-1/sqrt(2/3) = +-1.2247448...
        assert_relative_eq!(v[0], -1.224744871, max_relative = 1e-6);
        assert_relative_eq!(v[1], 0.0, epsilon = 1e-9);
        assert_relative_eq!(v[2], 1.224744871, max_relative = 1e-6);

        // Zero-variance row collapses onto the shift.
        let c = t.constant_from(1, 3, vec![4.2; 3]).unwrap();
        let shift = t.constant_from(1, 3, vec![0.5, -0.25, 2.0]).unwrap();
        let yc = t.layer_norm(c, one, shift, 1e-12).unwrap();
        assert_eq!(t.value(yc), &[0.5, -0.25, 2.0]);
    }

    #[test]
    fn layer_norm_standardizes_before_affine() {
        let mut t = Tape::new();
        let x = t
            .constant_from(1, 8, vec![3.1, -0.4, 2.2, 7.9, -5.0, 1.3, 0.0, 4.4])
            .unwrap();
        let one = t.constant_from(1, 8, vec![1.0; 8]).unwrap();
        let zero = t.constant_from(1, 8, vec![0.0; 8]).unwrap();
        let y = t.layer_norm(x, one, zero, 1e-12).unwrap();
        let v = t.value(y);
        let mean: f64 = v.iter().sum::<f64>() / 8.0;
        let var: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-9);
        assert_relative_eq!(var, 1.0, max_relative = 1e-9);
    }

    #[test]
    fn layer_norm_gradients() {
        let x = (2, 4, vec![0.3, -0.8, 1.4, 0.1, 2.2, -1.5, 0.6, -0.2]);
        let scale = (1, 4, vec![1.2, 0.7, -0.5, 1.0]);
        let shift = (1, 4, vec![0.1, -0.3, 0.9, 0.0]);
        let w = (2, 4, vec![1.0, -2.0, 0.5, 3.0, -1.0, 0.7, 2.5, -0.3]);
        let rel = fd_check(&[x, scale, shift, w], |t, ids| {
            let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
            let m = t.mul(y, ids[3]).unwrap();
            t.sum_all(m)
        });
        assert!(rel < 1e-6, "layer_norm rel err {}", rel);
    }

    #[test]
    fn pairwise_sq_dist_values() {
        let mut t = Tape::new();
        let x = t.constant_from(2, 2, vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        let y = t.constant_from(1, 2, vec![0.0, 0.0]).unwrap();
        let d = t.pairwise_sq_dist(x, y).unwrap();
        assert_eq!(t.value(d), &[0.0, 25.0]);

        // Distance of a point set to itself has a zero diagonal.
        let dd = t.pairwise_sq_dist(x, x).unwrap();
        let v = t.value(dd);
        assert_eq!(v[0], 0.0);
        assert_eq!(v[3], 0.0);
        assert_eq!(v[1], 25.0);
        assert_eq!(v[2], 25.0);
    }

    #[test]
    fn pairwise_sq_dist_matches_loop_oracle() {
        let xv = vec![0.3, -1.1, 0.7, 2.0, -0.4, 0.9];
        let yv = vec![1.5, -0.2, 0.8, 0.6, -1.3, 0.4, 0.0, 2.2];
        let mut t = Tape::new();
        let x = t.constant_from(3, 2, xv.clone()).unwrap();
        let y = t.constant_from(4, 2, yv.clone()).unwrap();
        let d = t.pairwise_sq_dist(x, y).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let mut s = 0.0;
                for k in 0..2 {
                    let diff = xv[i * 2 + k] - yv[j * 2 + k];
                    s += diff * diff;
                }
                assert_eq!(t.value(d)[i * 4 + j], s);
            }
        }
    }

    #[test]
    fn pairwise_sq_dist_gradients() {
        let x = (3, 2, vec![0.3, -1.1, 0.7, 2.0, -0.4, 0.9]);
        let y = (2, 2, vec![1.5, -0.2, 0.8, 0.6]);
        let w = (3, 2, vec![1.0, -2.0, 0.5, 3.0, -1.0, 0.7]);
        let rel = fd_check(&[x, y, w], |t, ids| {
            let d = t.pairwise_sq_dist(ids[0], ids[1]).unwrap();
            let m = t.mul(d, ids[2]).unwrap();
            t.sum_all(m)
        });
        assert!(rel < 1e-6, "pairwise rel err {}", rel);
    }

    #[test]
    fn gather_concat_slice_gradients() {
        let x = (3, 2, vec![0.3, -1.1, 0.7, 2.0, -0.4, 0.9]);
        let y = (2, 2, vec![1.5, -0.2, 0.8, 0.6]);

        // Repeated gather index exercises scatter-add accumulation.
        let rel = fd_check(&[x.clone()], |t, ids| {
            let g = t.gather_rows(ids[0], &[0, 2, 0]).unwrap();
            let m = t.mul(g, g).unwrap();
            t.sum_all(m)
        });
        assert!(rel < 1e-6, "gather_rows rel err {}", rel);

        let rel = fd_check(&[x.clone(), y.clone()], |t, ids| {
            let c = t.concat_rows(ids[0], ids[1]).unwrap();
            let m = t.mul(c, c).unwrap();
            t.sum_all(m)
        });
        assert!(rel < 1e-6, "concat_rows rel err {}", rel);

        let z = (3, 1, vec![0.5, -0.7, 1.2]);
        let rel = fd_check(&[x.clone(), z], |t, ids| {
            let c = t.concat_cols(ids[0], ids[1]).unwrap();
            let m = t.mul(c, c).unwrap();
            t.sum_all(m)
        });
        assert!(rel < 1e-6, "concat_cols rel err {}", rel);

        let rel = fd_check(&[x.clone()], |t, ids| {
            let s = t.slice_cols(ids[0], 1, 1).unwrap();
            let m = t.mul(s, s).unwrap();
            t.sum_all(m)
        });
        assert!(rel < 1e-6, "slice_cols rel err {}", rel);

        let rel = fd_check(&[x], |t, ids| {
            let s = t.sum_rows(ids[0]);
            let m = t.mul(s, s).unwrap();
            t.sum_all(m)
        });
        assert!(rel < 1e-6, "sum_rows rel err {}", rel);
    }

    #[test]
    fn gather_rows_values_and_bounds() {
        let mut t = Tape::new();
        let x = t.constant_from(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let g = t.gather_rows(x, &[2, 0]).unwrap();
        assert_eq!(t.value(g), &[5.0, 6.0, 1.0, 2.0]);
        assert!(t.gather_rows(x, &[3]).is_err());
    }

    #[test]
    fn slice_and_concat_values() {
        let mut t = Tape::new();
        let a = t.constant_from(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = t.constant_from(2, 1, vec![9.0, 8.0]).unwrap();
        let c = t.concat_cols(a, b).unwrap();
        assert_eq!(t.value(c), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let s = t.slice_cols(c, 2, 1).unwrap();
        assert_eq!(t.value(s), &[9.0, 8.0]);
        let r = t.concat_rows(a, a).unwrap();
        assert_eq!(t.dims(r), (4, 2));
    }

    #[test]
    fn backward_square_and_reuse() {
        // loss = w*w at w=3: grad 6.
        let mut set = ParamSet::new();
        let w = set.add("w", ParamGroup::Gnn, Tensor::scalar(3.0));
        let mut t = Tape::new();
        let wv = t.param(&set, w);
        let loss = t.mul(wv, wv).unwrap();
        t.backward_params(loss, &mut set).unwrap();
        assert_eq!(set.get(w).tensor.grad.as_deref(), Some(&[6.0][..]));

        // loss = w*w + w: grad 2w + 1 = 7.
        let mut set = ParamSet::new();
        let w = set.add("w", ParamGroup::Gnn, Tensor::scalar(3.0));
        let mut t = Tape::new();
        let wv = t.param(&set, w);
        let sq = t.mul(wv, wv).unwrap();
        let loss = t.add(sq, wv).unwrap();
        t.backward_params(loss, &mut set).unwrap();
        assert_eq!(set.get(w).tensor.grad.as_deref(), Some(&[7.0][..]));
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut set = ParamSet::new();
        let w = set.add("w", ParamGroup::Gnn, Tensor::scalar(3.0));
        let mut t = Tape::new();
        let wv = t.param(&set, w);
        let loss = t.mul(wv, wv).unwrap();
        t.backward_params(loss, &mut set).unwrap();
        t.backward_params(loss, &mut set).unwrap();
        assert_eq!(set.get(w).tensor.grad.as_deref(), Some(&[12.0][..]));
    }

    #[test]
    fn unreachable_param_gets_zero_grad() {
        let mut set = ParamSet::new();
        let w = set.add("w", ParamGroup::Gnn, Tensor::scalar(3.0));
        let unused = set.add("unused", ParamGroup::Gnn, Tensor::zeros(&[2, 2]));
        let mut t = Tape::new();
        let wv = t.param(&set, w);
        let loss = t.mul(wv, wv).unwrap();
        t.backward_params(loss, &mut set).unwrap();
        assert_eq!(set.get(unused).tensor.grad.as_deref(), Some(&[0.0; 4][..]));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.constant_from(2, 2, vec![1.0; 4]).unwrap();
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn param_leaves_are_cached() {
        let mut set = ParamSet::new();
        let w = set.add("w", ParamGroup::Gnn, Tensor::scalar(1.0));
        let mut t = Tape::new();
        let a = t.param(&set, w);
        let b = t.param(&set, w);
        assert_eq!(a, b);
    }
}
