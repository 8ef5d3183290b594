//! Graph building blocks shared by the prototype network, the instance
//! network and the label-propagation baseline: learned adjacency over node
//! features, masked row-softmax normalization, graph convolution and the
//! residual update that wraps both.
//!
//! Edges are directional. `mask[i][j]` means node i may receive from node
//! j, so a row of the adjacency matrix holds the attention of one receiver
//! over its senders.

use crate::diffcore::tape::{Tape, ValueId};
use crate::diffcore::tensor::{ParamId, ParamSet};
use crate::error::{Error, Result};

/// Weight + bias of one affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
}

/// How the edge score of a node pair is computed from the two transformed
/// features. The MLP forms score pair (receiver, sender) through a small
/// two-layer net; inner product is parameter-free.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjacencyOperator {
    InnerProduct,
    ConcatMlp { hidden: LinearParams, out: LinearParams },
    SubtractMlp { hidden: LinearParams, out: LinearParams },
}

/// Operator selector without the parameter handles, for configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    InnerProduct,
    ConcatMlp,
    SubtractMlp,
}

impl AdjacencyOperator {
    pub fn kind(&self) -> OperatorKind {
        match self {
            AdjacencyOperator::InnerProduct => OperatorKind::InnerProduct,
            AdjacencyOperator::ConcatMlp { .. } => OperatorKind::ConcatMlp,
            AdjacencyOperator::SubtractMlp { .. } => OperatorKind::SubtractMlp,
        }
    }
}

impl OperatorKind {
    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::InnerProduct => "inner_product",
            OperatorKind::ConcatMlp => "concat_mlp",
            OperatorKind::SubtractMlp => "subtract_mlp",
        }
    }

    pub fn parse(s: &str) -> Option<OperatorKind> {
        match s {
            "inner_product" => Some(OperatorKind::InnerProduct),
            "concat_mlp" => Some(OperatorKind::ConcatMlp),
            "subtract_mlp" => Some(OperatorKind::SubtractMlp),
            _ => None,
        }
    }
}

/// Parameters of one graph layer.
#[derive(Debug, Clone)]
pub struct GraphLayerParams {
    /// Feature transform applied before both scoring and aggregation.
    pub phi: LinearParams,
    /// Projection of the aggregated message before the residual addition.
    pub out_proj: LinearParams,
    pub ln_scale: ParamId,
    pub ln_shift: ParamId,
    pub adjacency: AdjacencyOperator,
    /// Negative slope of the leaky ReLU used for activation.
    pub slope: f64,
    pub ln_eps: f64,
}

/// Message-passing direction for query nodes in the instance graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphMode {
    /// One query per graph; the query receives from supports and itself but
    /// sends nothing back.
    Inductive,
    /// All queries share one graph and also exchange messages among each
    /// other; supports still never receive from queries.
    Transductive,
}

impl GraphMode {
    pub fn name(self) -> &'static str {
        match self {
            GraphMode::Inductive => "inductive",
            GraphMode::Transductive => "transductive",
        }
    }

    pub fn parse(s: &str) -> Option<GraphMode> {
        match s {
            "inductive" => Some(GraphMode::Inductive),
            "transductive" => Some(GraphMode::Transductive),
            _ => None,
        }
    }
}

/// Receive-convention edge mask over a fixed node set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMask {
    n_nodes: usize,
    allow: Vec<bool>,
}

impl EdgeMask {
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// May `receiver` aggregate from `sender`?
    pub fn allows(&self, receiver: usize, sender: usize) -> bool {
        self.allow[receiver * self.n_nodes + sender]
    }

    /// Row-major receiver x sender grid, for masked softmax.
    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }
}

/// Every node receives from every node (self included).
pub fn build_full_mask(n_nodes: usize) -> Result<EdgeMask> {
    if n_nodes == 0 {
        return Err(Error::Contract("build_full_mask: need at least one node".into()));
    }
    Ok(EdgeMask {
        n_nodes,
        allow: vec![true; n_nodes * n_nodes],
    })
}

/// Mask for the instance graph: nodes 0..n*k are supports, the remaining
/// `n_queries` are queries. Supports receive only from supports. Queries
/// receive from supports and themselves; under `Transductive` they also
/// receive from the other queries. `Inductive` requires exactly one query.
pub fn build_ignn_mask(n_way: usize, k_shot: usize, n_queries: usize, mode: GraphMode) -> Result<EdgeMask> {
    if n_way == 0 || k_shot == 0 || n_queries == 0 {
        return Err(Error::Contract(format!(
            "build_ignn_mask: degenerate sizes n={} k={} q={}",
            n_way, k_shot, n_queries
        )));
    }
    if mode == GraphMode::Inductive && n_queries != 1 {
        return Err(Error::Contract(format!(
            "build_ignn_mask: inductive graphs hold one query, got {}",
            n_queries
        )));
    }
    let nk = n_way * k_shot;
    let m = nk + n_queries;
    let mut allow = vec![false; m * m];
    for i in 0..m {
        for j in 0..m {
            let ok = if i < nk {
                j < nk
            } else {
                match mode {
                    GraphMode::Inductive => j < nk || j == i,
                    GraphMode::Transductive => true,
                }
            };
            allow[i * m + j] = ok;
        }
    }
    Ok(EdgeMask { n_nodes: m, allow })
}

/// x . w + b.
pub fn linear(tape: &mut Tape, set: &ParamSet, x: ValueId, p: &LinearParams) -> Result<ValueId> {
    let w = tape.param(set, p.w);
    let b = tape.param(set, p.b);
    let xw = tape.matmul(x, w)?;
    tape.add_bias(xw, b)
}

pub(crate) fn mlp_scalar(
    tape: &mut Tape,
    set: &ParamSet,
    x: ValueId,
    hidden: &LinearParams,
    out: &LinearParams,
    slope: f64,
) -> Result<ValueId> {
    let h = linear(tape, set, x, hidden)?;
    let a = tape.leaky_relu(h, slope);
    linear(tape, set, a, out)
}

/// Raw edge scores for every (receiver, sender) pair between two node
/// blocks that have already been through the layer's feature transform.
/// Entry (i, j) scores left node i receiving from right node j.
pub(crate) fn pair_scores(
    tape: &mut Tape,
    set: &ParamSet,
    h_left: ValueId,
    h_right: ValueId,
    adjacency: &AdjacencyOperator,
    slope: f64,
) -> Result<ValueId> {
    let (m, _) = tape.dims(h_left);
    let (p, _) = tape.dims(h_right);
    match adjacency {
        AdjacencyOperator::InnerProduct => {
            let rt = tape.transpose(h_right);
            tape.matmul(h_left, rt)
        }
        AdjacencyOperator::ConcatMlp { hidden, out } => {
            let (li, ri) = pair_indices(m, p);
            let l = tape.gather_rows(h_left, &li)?;
            let r = tape.gather_rows(h_right, &ri)?;
            let cat = tape.concat_cols(l, r)?;
            let s = mlp_scalar(tape, set, cat, hidden, out, slope)?;
            tape.reshape(s, m, p)
        }
        AdjacencyOperator::SubtractMlp { hidden, out } => {
            let (li, ri) = pair_indices(m, p);
            let l = tape.gather_rows(h_left, &li)?;
            let r = tape.gather_rows(h_right, &ri)?;
            let d = tape.sub(l, r)?;
            let s = mlp_scalar(tape, set, d, hidden, out, slope)?;
            tape.reshape(s, m, p)
        }
    }
}

fn pair_indices(m: usize, p: usize) -> (Vec<usize>, Vec<usize>) {
    let mut left = Vec::with_capacity(m * p);
    let mut right = Vec::with_capacity(m * p);
    for i in 0..m {
        for j in 0..p {
            left.push(i);
            right.push(j);
        }
    }
    (left, right)
}

/// Row-normalized adjacency over the node features `f` [M, d]. Scores come
/// from the layer's operator on transformed features; the mask (if any)
/// restricts which senders each receiver sees, and each row is a softmax
/// over its admissible senders.
pub fn compute_adjacency(
    tape: &mut Tape,
    set: &ParamSet,
    f: ValueId,
    layer: &GraphLayerParams,
    mask: Option<&EdgeMask>,
) -> Result<ValueId> {
    let (m, _) = tape.dims(f);
    if let Some(mk) = mask {
        if mk.n_nodes() != m {
            return Err(Error::Contract(format!(
                "compute_adjacency: mask covers {} nodes, features have {}",
                mk.n_nodes(),
                m
            )));
        }
    }
    let h = linear(tape, set, f, &layer.phi)?;
    let scores = pair_scores(tape, set, h, h, &layer.adjacency, layer.slope)?;
    tape.softmax_rows(scores, mask.map(|mk| mk.as_slice()))
}

/// One aggregation: rho(A . phi(F)).
pub fn graph_conv(
    tape: &mut Tape,
    set: &ParamSet,
    f: ValueId,
    a: ValueId,
    layer: &GraphLayerParams,
) -> Result<ValueId> {
    let (m, _) = tape.dims(f);
    let (ar, ac) = tape.dims(a);
    if ar != m || ac != m {
        return Err(Error::Contract(format!(
            "graph_conv: adjacency {}x{} does not cover {} nodes",
            ar, ac, m
        )));
    }
    let h = linear(tape, set, f, &layer.phi)?;
    let agg = tape.matmul(a, h)?;
    Ok(tape.leaky_relu(agg, layer.slope))
}

/// Full layer: LayerNorm(F + proj(rho(A . phi(F)))) with A built from F.
pub fn residual_update(
    tape: &mut Tape,
    set: &ParamSet,
    f: ValueId,
    layer: &GraphLayerParams,
    mask: Option<&EdgeMask>,
) -> Result<ValueId> {
    let a = compute_adjacency(tape, set, f, layer, mask)?;
    let conv = graph_conv(tape, set, f, a, layer)?;
    let proj = linear(tape, set, conv, &layer.out_proj)?;
    let sum = tape.add(f, proj)?;
    let scale = tape.param(set, layer.ln_scale);
    let shift = tape.param(set, layer.ln_shift);
    tape.layer_norm(sum, scale, shift, layer.ln_eps)
}
