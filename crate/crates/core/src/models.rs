//! Model assembly: the embedding adapter, prototype computation, the two
//! graph heads and their probability outputs, the loss stack, the
//! label-propagation baseline, and binary checkpointing.
//!
//! The prototype head refines class prototypes on a fully-connected
//! N-node graph and classifies raw query embeddings against them. The
//! instance head refines supports and queries together; inductively each
//! query conceptually gets its own (N*K+1)-node graph, implemented here as
//! one batched pass that shares the support block and reproduces the
//! per-query graphs bit for bit. The combined prediction is the mean of
//! the two heads' probability vectors.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{ParamGroup, ParamId, ParamSet, Tape, Tensor, ValueId};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::graph::{
    build_full_mask, build_ignn_mask, linear, mlp_scalar, pair_scores, residual_update,
    AdjacencyOperator, GraphLayerParams, GraphMode, LinearParams, OperatorKind,
};

pub const PROB_CLAMP: f64 = 1e-12;

/// Which heads the model trains and predicts with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Raw prototypes, no graph refinement.
    ProtoNet,
    /// Prototype graph head only.
    PgnnOnly,
    /// Instance graph head only.
    IgnnOnly,
    /// Both heads plus the consistency term.
    Hgnn,
    /// Label-propagation graph baseline.
    LabelProp,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::ProtoNet => "protonet",
            Variant::PgnnOnly => "pgnn",
            Variant::IgnnOnly => "ignn",
            Variant::Hgnn => "hgnn",
            Variant::LabelProp => "labelprop",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "protonet" => Some(Variant::ProtoNet),
            "pgnn" => Some(Variant::PgnnOnly),
            "ignn" => Some(Variant::IgnnOnly),
            "hgnn" => Some(Variant::Hgnn),
            "labelprop" => Some(Variant::LabelProp),
            _ => None,
        }
    }
}

/// Form of the agreement penalty between the two probability heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Consistency {
    None,
    /// Sum of absolute differences.
    L1Dist,
    /// Sum of squared differences.
    Mse,
    /// Symmetric Kullback-Leibler divergence.
    Kl,
}

impl Consistency {
    pub fn name(self) -> &'static str {
        match self {
            Consistency::None => "none",
            Consistency::L1Dist => "l1",
            Consistency::Mse => "mse",
            Consistency::Kl => "kl",
        }
    }

    pub fn parse(s: &str) -> Option<Consistency> {
        match s {
            "none" => Some(Consistency::None),
            "l1" => Some(Consistency::L1Dist),
            "mse" => Some(Consistency::Mse),
            "kl" => Some(Consistency::Kl),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DistanceKind {
    /// Squared Euclidean distance (the usual prototype convention).
    Squared,
    /// Unsquared Euclidean distance.
    Euclidean,
}

impl DistanceKind {
    pub fn name(self) -> &'static str {
        match self {
            DistanceKind::Squared => "squared",
            DistanceKind::Euclidean => "euclidean",
        }
    }

    pub fn parse(s: &str) -> Option<DistanceKind> {
        match s {
            "squared" => Some(DistanceKind::Squared),
            "euclidean" => Some(DistanceKind::Euclidean),
            _ => None,
        }
    }
}

/// Everything that defines a model's structure.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_in: usize,
    /// Graph feature width; must equal `d_in` when the adapter is off.
    pub d: usize,
    pub variant: Variant,
    /// Train a 1-hidden-layer MLP on top of the input features; off means
    /// the embedding is the identity.
    pub adapter: bool,
    pub operator: OperatorKind,
    /// Graph layers per head.
    pub depth: usize,
    /// Leaky ReLU negative slope.
    pub slope: f64,
    pub ln_eps: f64,
    pub distance: DistanceKind,
    pub consistency: Consistency,
    pub baseline_layers: usize,
    /// N the baseline classifier is built for (label embedding width).
    pub baseline_n_way: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_in: 16,
            d: 16,
            variant: Variant::Hgnn,
            adapter: false,
            operator: OperatorKind::InnerProduct,
            depth: 1,
            slope: 0.2,
            ln_eps: 1e-5,
            distance: DistanceKind::Squared,
            consistency: Consistency::Kl,
            baseline_layers: 1,
            baseline_n_way: 5,
        }
    }
}

/// The embedding adapter: hidden affine, leaky ReLU, output affine.
#[derive(Debug, Clone, Copy)]
pub struct AdapterParams {
    pub hidden: LinearParams,
    pub out: LinearParams,
}

/// One layer of the label-propagation baseline (plain graph conv, no
/// residual or normalization).
#[derive(Debug, Clone)]
pub struct BaselineLayerParams {
    pub phi: LinearParams,
    pub adjacency: AdjacencyOperator,
}

#[derive(Debug, Clone)]
pub struct BaselineParams {
    pub layers: Vec<BaselineLayerParams>,
    /// Linear classifier over the query node's final representation.
    pub w: ParamId,
    pub n_way: usize,
}

/// Parameter handles plus configuration; the tensors live in the
/// [`ParamSet`] of [`ModelParams`]. Kept separate so the forward pass can
/// borrow the set immutably while callers (optimizer, gradient checks)
/// hold it mutably elsewhere.
#[derive(Debug, Clone)]
pub struct ModelArch {
    pub cfg: ModelConfig,
    pub adapter: Option<AdapterParams>,
    pub pgnn: Vec<GraphLayerParams>,
    pub ignn: Vec<GraphLayerParams>,
    pub baseline: Option<BaselineParams>,
}

/// A complete model: tensors plus the handle structure over them.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub set: ParamSet,
    pub arch: ModelArch,
}

fn xavier_mat<R: Rng + ?Sized>(
    set: &mut ParamSet,
    rng: &mut R,
    name: String,
    group: ParamGroup,
    rows: usize,
    cols: usize,
) -> ParamId {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let vals: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-limit..=limit)).collect();
    set.add(name, group, Tensor::from_values(&[rows, cols], vals).expect("sized above"))
}

fn const_vec(set: &mut ParamSet, name: String, group: ParamGroup, n: usize, fill: f64) -> ParamId {
    set.add(name, group, Tensor::from_values(&[n], vec![fill; n]).expect("sized above"))
}

fn linear_block<R: Rng + ?Sized>(
    set: &mut ParamSet,
    rng: &mut R,
    prefix: &str,
    group: ParamGroup,
    fan_in: usize,
    fan_out: usize,
) -> LinearParams {
    let w = xavier_mat(set, rng, format!("{prefix}.w"), group, fan_in, fan_out);
    let b = const_vec(set, format!("{prefix}.b"), group, fan_out, 0.0);
    LinearParams { w, b }
}

fn operator_block<R: Rng + ?Sized>(
    set: &mut ParamSet,
    rng: &mut R,
    prefix: &str,
    kind: OperatorKind,
    d: usize,
) -> AdjacencyOperator {
    match kind {
        OperatorKind::InnerProduct => AdjacencyOperator::InnerProduct,
        OperatorKind::ConcatMlp => AdjacencyOperator::ConcatMlp {
            hidden: linear_block(set, rng, &format!("{prefix}.psi.hidden"), ParamGroup::Gnn, 2 * d, d),
            out: linear_block(set, rng, &format!("{prefix}.psi.out"), ParamGroup::Gnn, d, 1),
        },
        OperatorKind::SubtractMlp => AdjacencyOperator::SubtractMlp {
            hidden: linear_block(set, rng, &format!("{prefix}.psi.hidden"), ParamGroup::Gnn, d, d),
            out: linear_block(set, rng, &format!("{prefix}.psi.out"), ParamGroup::Gnn, d, 1),
        },
    }
}

fn graph_layer<R: Rng + ?Sized>(
    set: &mut ParamSet,
    rng: &mut R,
    prefix: &str,
    cfg: &ModelConfig,
) -> GraphLayerParams {
    let d = cfg.d;
    let phi = linear_block(set, rng, &format!("{prefix}.phi"), ParamGroup::Gnn, d, d);
    let adjacency = operator_block(set, rng, prefix, cfg.operator, d);
    let out_proj = linear_block(set, rng, &format!("{prefix}.out"), ParamGroup::Gnn, d, d);
    let ln_scale = const_vec(set, format!("{prefix}.ln.scale"), ParamGroup::Gnn, d, 1.0);
    let ln_shift = const_vec(set, format!("{prefix}.ln.shift"), ParamGroup::Gnn, d, 0.0);
    GraphLayerParams {
        phi,
        out_proj,
        ln_scale,
        ln_shift,
        adjacency,
        slope: cfg.slope,
        ln_eps: cfg.ln_eps,
    }
}

impl ModelParams {
    /// Build a model with Xavier-uniform weights, zero biases, and unit
    /// layer-norm scales. Parameter creation order is fixed (adapter,
    /// prototype layers, instance layers, baseline), and only weight
    /// matrices consume random draws, so one seed always produces the
    /// same model.
    pub fn init<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<ModelParams> {
        if cfg.d_in == 0 || cfg.d == 0 {
            return Err(Error::InvalidConfig("feature widths must be positive".into()));
        }
        if !cfg.adapter && cfg.d_in != cfg.d {
            return Err(Error::InvalidConfig(format!(
                "without an adapter the graph width must equal the input width ({} vs {})",
                cfg.d, cfg.d_in
            )));
        }
        if !(0.0..1.0).contains(&cfg.slope) {
            return Err(Error::InvalidConfig(format!("slope must be in [0, 1), got {}", cfg.slope)));
        }
        if cfg.ln_eps <= 0.0 {
            return Err(Error::InvalidConfig("ln_eps must be positive".into()));
        }
        let uses_graphs = matches!(cfg.variant, Variant::PgnnOnly | Variant::IgnnOnly | Variant::Hgnn);
        if uses_graphs && cfg.depth == 0 {
            return Err(Error::InvalidConfig("graph variants need depth >= 1".into()));
        }
        if cfg.variant == Variant::LabelProp && (cfg.baseline_layers == 0 || cfg.baseline_n_way < 2) {
            return Err(Error::InvalidConfig(
                "the baseline needs at least one layer and a 2-way classifier".into(),
            ));
        }

        let mut set = ParamSet::new();
        let adapter = if cfg.adapter {
            Some(AdapterParams {
                hidden: linear_block(&mut set, rng, "embed.hidden", ParamGroup::Embedding, cfg.d_in, cfg.d),
                out: linear_block(&mut set, rng, "embed.out", ParamGroup::Embedding, cfg.d, cfg.d),
            })
        } else {
            None
        };
        let mut pgnn = Vec::new();
        let mut ignn = Vec::new();
        if matches!(cfg.variant, Variant::PgnnOnly | Variant::Hgnn) {
            for l in 0..cfg.depth {
                pgnn.push(graph_layer(&mut set, rng, &format!("pgnn.{l}"), &cfg));
            }
        }
        if matches!(cfg.variant, Variant::IgnnOnly | Variant::Hgnn) {
            for l in 0..cfg.depth {
                ignn.push(graph_layer(&mut set, rng, &format!("ignn.{l}"), &cfg));
            }
        }
        let baseline = if cfg.variant == Variant::LabelProp {
            let width = cfg.d + cfg.baseline_n_way;
            let mut layers = Vec::new();
            for l in 0..cfg.baseline_layers {
                let prefix = format!("baseline.{l}");
                let phi = linear_block(&mut set, rng, &format!("{prefix}.phi"), ParamGroup::Gnn, width, width);
                let adjacency = operator_block(&mut set, rng, &prefix, cfg.operator, width);
                layers.push(BaselineLayerParams { phi, adjacency });
            }
            let w = xavier_mat(&mut set, rng, "baseline.w".into(), ParamGroup::Gnn, width, cfg.baseline_n_way);
            Some(BaselineParams {
                layers,
                w,
                n_way: cfg.baseline_n_way,
            })
        } else {
            None
        };
        Ok(ModelParams {
            set,
            arch: ModelArch {
                cfg,
                adapter,
                pgnn,
                ignn,
                baseline,
            },
        })
    }

    pub fn forward(&self, tape: &mut Tape, ep: &Episode, mode: GraphMode) -> Result<EpisodeForward> {
        forward_episode(tape, &self.set, &self.arch, ep, mode)
    }
}

/// Map input features through the adapter; identity when there is none.
pub fn embed(
    tape: &mut Tape,
    set: &ParamSet,
    x: ValueId,
    adapter: Option<&AdapterParams>,
    slope: f64,
) -> Result<ValueId> {
    match adapter {
        None => Ok(x),
        Some(a) => {
            let h = linear(tape, set, x, &a.hidden)?;
            let act = tape.leaky_relu(h, slope);
            linear(tape, set, act, &a.out)
        }
    }
}

/// Class means over support features: row c is the mean of the rows whose
/// label is c. Every class must appear exactly `k` times.
pub fn compute_prototypes(
    tape: &mut Tape,
    feats: ValueId,
    labels: &[usize],
    n_way: usize,
    k_shot: usize,
) -> Result<ValueId> {
    let (rows, _) = tape.dims(feats);
    if rows != labels.len() || rows != n_way * k_shot {
        return Err(Error::Contract(format!(
            "compute_prototypes: {} feature rows, {} labels, expected {}",
            rows,
            labels.len(),
            n_way * k_shot
        )));
    }
    let mut counts = vec![0usize; n_way];
    for &l in labels {
        if l >= n_way {
            return Err(Error::Contract(format!(
                "compute_prototypes: label {} out of range for {} classes",
                l, n_way
            )));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&c| c != k_shot) {
        return Err(Error::Contract(format!(
            "compute_prototypes: class {} has {} members, expected {}",
            c, counts[c], k_shot
        )));
    }
    let mut avg = vec![0.0; n_way * rows];
    for (p, &l) in labels.iter().enumerate() {
        avg[l * rows + p] = 1.0 / k_shot as f64;
    }
    let avg = tape.constant_from(n_way, rows, avg)?;
    tape.matmul(avg, feats)
}

/// Row-wise softmax over negated query-to-prototype distances.
pub fn classify_by_prototypes(
    tape: &mut Tape,
    queries: ValueId,
    protos: ValueId,
    distance: DistanceKind,
) -> Result<ValueId> {
    let d2 = tape.pairwise_sq_dist(queries, protos)?;
    let d = match distance {
        DistanceKind::Squared => d2,
        DistanceKind::Euclidean => tape.sqrt(d2),
    };
    let neg = tape.scale(d, -1.0);
    tape.softmax_rows(neg, None)
}

/// Prototype head: raw prototypes, then the refinement layers on the
/// fully-connected N-node prototype graph. Returns (raw, refined).
pub fn pgnn_forward(
    tape: &mut Tape,
    set: &ParamSet,
    support_embed: ValueId,
    labels: &[usize],
    n_way: usize,
    k_shot: usize,
    layers: &[GraphLayerParams],
) -> Result<(ValueId, ValueId)> {
    let raw = compute_prototypes(tape, support_embed, labels, n_way, k_shot)?;
    let mask = build_full_mask(n_way)?;
    let mut f = raw;
    for layer in layers {
        f = residual_update(tape, set, f, layer, Some(&mask))?;
    }
    Ok((raw, f))
}

fn self_scores(
    tape: &mut Tape,
    set: &ParamSet,
    h_q: ValueId,
    adjacency: &AdjacencyOperator,
    slope: f64,
) -> Result<ValueId> {
    match adjacency {
        AdjacencyOperator::InnerProduct => {
            let sq = tape.mul(h_q, h_q)?;
            Ok(tape.sum_rows(sq))
        }
        AdjacencyOperator::ConcatMlp { hidden, out } => {
            let cat = tape.concat_cols(h_q, h_q)?;
            mlp_scalar(tape, set, cat, hidden, out, slope)
        }
        AdjacencyOperator::SubtractMlp { hidden, out } => {
            let z = tape.sub(h_q, h_q)?;
            mlp_scalar(tape, set, z, hidden, out, slope)
        }
    }
}

/// One instance-graph layer in the batched inductive form. The support
/// block aggregates over itself once; each query row aggregates over the
/// supports plus itself, exactly as in its own (N*K+1)-node graph. Every
/// sum is accumulated in the same order as the per-query graphs, so the
/// outputs are bit-identical to the reference loop.
fn ignn_inductive_layer(
    tape: &mut Tape,
    set: &ParamSet,
    f_s: ValueId,
    f_q: ValueId,
    layer: &GraphLayerParams,
) -> Result<(ValueId, ValueId)> {
    let (nk, d) = tape.dims(f_s);
    let h_s = linear(tape, set, f_s, &layer.phi)?;
    let h_q = linear(tape, set, f_q, &layer.phi)?;

    let ss = pair_scores(tape, set, h_s, h_s, &layer.adjacency, layer.slope)?;
    let a_ss = tape.softmax_rows(ss, None)?;
    let agg_s = tape.matmul(a_ss, h_s)?;
    let conv_s = tape.leaky_relu(agg_s, layer.slope);
    let proj_s = linear(tape, set, conv_s, &layer.out_proj)?;
    let sum_s = tape.add(f_s, proj_s)?;
    let scale = tape.param(set, layer.ln_scale);
    let shift = tape.param(set, layer.ln_shift);
    let out_s = tape.layer_norm(sum_s, scale, shift, layer.ln_eps)?;

    let sq = pair_scores(tape, set, h_q, h_s, &layer.adjacency, layer.slope)?;
    let sf = self_scores(tape, set, h_q, &layer.adjacency, layer.slope)?;
    let cat = tape.concat_cols(sq, sf)?;
    let a_q = tape.softmax_rows(cat, None)?;
    let a_qs = tape.slice_cols(a_q, 0, nk)?;
    let a_self = tape.slice_cols(a_q, nk, 1)?;
    let part = tape.matmul(a_qs, h_s)?;
    let ones = tape.constant_from(1, d, vec![1.0; d])?;
    let self_b = tape.matmul(a_self, ones)?;
    let self_m = tape.mul(self_b, h_q)?;
    let agg_q = tape.add(part, self_m)?;
    let conv_q = tape.leaky_relu(agg_q, layer.slope);
    let proj_q = linear(tape, set, conv_q, &layer.out_proj)?;
    let sum_q = tape.add(f_q, proj_q)?;
    let out_q = tape.layer_norm(sum_q, scale, shift, layer.ln_eps)?;
    Ok((out_s, out_q))
}

/// Instance head: refine supports and queries together. Inductive mode
/// runs the batched shared-support pass; transductive mode runs one graph
/// holding all queries, masked so supports never receive from queries.
/// Returns (updated supports, updated queries).
pub fn ignn_forward(
    tape: &mut Tape,
    set: &ParamSet,
    support_embed: ValueId,
    query_embed: ValueId,
    layers: &[GraphLayerParams],
    mode: GraphMode,
    n_way: usize,
    k_shot: usize,
) -> Result<(ValueId, ValueId)> {
    let (nk, _) = tape.dims(support_embed);
    let (qn, _) = tape.dims(query_embed);
    if nk != n_way * k_shot {
        return Err(Error::Contract(format!(
            "ignn_forward: {} support rows for {}-way {}-shot",
            nk, n_way, k_shot
        )));
    }
    if qn == 0 {
        return Err(Error::Contract("ignn_forward: no queries".into()));
    }
    match mode {
        GraphMode::Inductive => {
            let mut f_s = support_embed;
            let mut f_q = query_embed;
            for layer in layers {
                let (s, q) = ignn_inductive_layer(tape, set, f_s, f_q, layer)?;
                f_s = s;
                f_q = q;
            }
            Ok((f_s, f_q))
        }
        GraphMode::Transductive => {
            let mask = build_ignn_mask(n_way, k_shot, qn, GraphMode::Transductive)?;
            let mut f = tape.concat_rows(support_embed, query_embed)?;
            for layer in layers {
                f = residual_update(tape, set, f, layer, Some(&mask))?;
            }
            let s_idx: Vec<usize> = (0..nk).collect();
            let q_idx: Vec<usize> = (nk..nk + qn).collect();
            let s = tape.gather_rows(f, &s_idx)?;
            let q = tape.gather_rows(f, &q_idx)?;
            Ok((s, q))
        }
    }
}

/// Reference instance head: the literal per-query graphs, one
/// `residual_update` chain per query over N*K+1 nodes. Slow; used to
/// cross-check the batched pass and in benchmarks.
pub fn ignn_forward_per_query(
    tape: &mut Tape,
    set: &ParamSet,
    support_embed: ValueId,
    query_embed: ValueId,
    layers: &[GraphLayerParams],
    n_way: usize,
    k_shot: usize,
) -> Result<(ValueId, ValueId)> {
    let (nk, _) = tape.dims(support_embed);
    let (qn, _) = tape.dims(query_embed);
    if nk != n_way * k_shot {
        return Err(Error::Contract(format!(
            "ignn_forward_per_query: {} support rows for {}-way {}-shot",
            nk, n_way, k_shot
        )));
    }
    let mask = build_ignn_mask(n_way, k_shot, 1, GraphMode::Inductive)?;
    let s_idx: Vec<usize> = (0..nk).collect();
    let mut s_out = None;
    let mut q_rows = Vec::with_capacity(qn);
    for qi in 0..qn {
        let q_row = tape.gather_rows(query_embed, &[qi])?;
        let mut f = tape.concat_rows(support_embed, q_row)?;
        for layer in layers {
            f = residual_update(tape, set, f, layer, Some(&mask))?;
        }
        if s_out.is_none() {
            s_out = Some(tape.gather_rows(f, &s_idx)?);
        }
        q_rows.push(tape.gather_rows(f, &[nk])?);
    }
    let mut q_out = q_rows[0];
    for &r in &q_rows[1..] {
        q_out = tape.concat_rows(q_out, r)?;
    }
    Ok((s_out.expect("qn >= 1 checked by mask build"), q_out))
}

/// Class means over updated support features.
pub fn ignn_prototypes(
    tape: &mut Tape,
    support_updated: ValueId,
    labels: &[usize],
    n_way: usize,
    k_shot: usize,
) -> Result<ValueId> {
    compute_prototypes(tape, support_updated, labels, n_way, k_shot)
}

/// Label-propagation baseline for a single query: supports and the query
/// carry concat(feature, label embedding) through plain graph-conv layers
/// on the fully-connected (N*K+1)-node graph; the query's final
/// representation goes through the linear classifier. Supports get one-hot
/// label embeddings, the query a uniform one.
pub fn labelprop_forward(
    tape: &mut Tape,
    set: &ParamSet,
    baseline: &BaselineParams,
    support_embed: ValueId,
    support_labels: &[usize],
    query_row: ValueId,
    slope: f64,
) -> Result<ValueId> {
    let n = baseline.n_way;
    let (nk, _) = tape.dims(support_embed);
    if support_labels.len() != nk {
        return Err(Error::Contract(format!(
            "labelprop_forward: {} labels for {} supports",
            support_labels.len(),
            nk
        )));
    }
    let (qr, _) = tape.dims(query_row);
    if qr != 1 {
        return Err(Error::Contract("labelprop_forward: exactly one query row".into()));
    }
    let mut label_block = vec![0.0; (nk + 1) * n];
    for (i, &l) in support_labels.iter().enumerate() {
        if l >= n {
            return Err(Error::Contract(format!(
                "labelprop_forward: label {} out of range for the {}-way classifier",
                l, n
            )));
        }
        label_block[i * n + l] = 1.0;
    }
    for j in 0..n {
        label_block[nk * n + j] = 1.0 / n as f64;
    }
    let labels_const = tape.constant_from(nk + 1, n, label_block)?;
    let feats = tape.concat_rows(support_embed, query_row)?;
    let mut f = tape.concat_cols(feats, labels_const)?;
    for layer in &baseline.layers {
        let h = linear(tape, set, f, &layer.phi)?;
        let scores = pair_scores(tape, set, h, h, &layer.adjacency, slope)?;
        let a = tape.softmax_rows(scores, None)?;
        let agg = tape.matmul(a, h)?;
        f = tape.leaky_relu(agg, slope);
    }
    let q_final = tape.gather_rows(f, &[nk])?;
    let w = tape.param(set, baseline.w);
    let logits = tape.matmul(q_final, w)?;
    tape.softmax_rows(logits, None)
}

/// Tape handles of one episode's forward pass. Probability matrices are
/// [n_query, n_way]; loss handles are scalars. Single-head variants alias
/// all three probability handles to the one head.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeForward {
    pub l1: ValueId,
    pub l2: ValueId,
    pub l3: ValueId,
    pub total: ValueId,
    pub p_pgnn: ValueId,
    pub p_ignn: ValueId,
    pub p_combined: ValueId,
}

fn cross_entropy(tape: &mut Tape, p: ValueId, labels: &[usize]) -> Result<ValueId> {
    let (q, n) = tape.dims(p);
    if labels.len() != q {
        return Err(Error::Contract(format!("cross_entropy: {} labels for {} rows", labels.len(), q)));
    }
    let mut onehot = vec![0.0; q * n];
    for (i, &l) in labels.iter().enumerate() {
        if l >= n {
            return Err(Error::Contract(format!("cross_entropy: label {} out of range", l)));
        }
        onehot[i * n + l] = 1.0;
    }
    let oh = tape.constant_from(q, n, onehot)?;
    let clamped = tape.clamp_min(p, PROB_CLAMP);
    let lp = tape.ln(clamped);
    let picked = tape.mul(oh, lp)?;
    let s = tape.sum_all(picked);
    Ok(tape.scale(s, -1.0))
}

fn consistency_loss(tape: &mut Tape, p_pgnn: ValueId, p_ignn: ValueId, kind: Consistency) -> Result<ValueId> {
    match kind {
        Consistency::None => Ok(tape.scalar_const(0.0)),
        Consistency::L1Dist => {
            let diff = tape.sub(p_ignn, p_pgnn)?;
            let a = tape.abs(diff);
            Ok(tape.sum_all(a))
        }
        Consistency::Mse => {
            let diff = tape.sub(p_ignn, p_pgnn)?;
            let sq = tape.mul(diff, diff)?;
            Ok(tape.sum_all(sq))
        }
        Consistency::Kl => {
            let cp = tape.clamp_min(p_pgnn, PROB_CLAMP);
            let ci = tape.clamp_min(p_ignn, PROB_CLAMP);
            let ln_p = tape.ln(cp);
            let ln_i = tape.ln(ci);
            let d_ip = tape.sub(ln_i, ln_p)?;
            let w_ip = tape.mul(p_ignn, d_ip)?;
            let t1 = tape.sum_all(w_ip);
            let d_pi = tape.sub(ln_p, ln_i)?;
            let w_pi = tape.mul(p_pgnn, d_pi)?;
            let t2 = tape.sum_all(w_pi);
            tape.add(t1, t2)
        }
    }
}

/// Run one episode through the model and assemble its training loss.
/// The loss stack depends on the variant: the hybrid gets both
/// cross-entropies plus the configured consistency term; single-head
/// variants get their one cross-entropy; the rest of the breakdown is
/// zero. `total` always equals l1 + l2 + l3.
pub fn forward_episode(
    tape: &mut Tape,
    set: &ParamSet,
    arch: &ModelArch,
    ep: &Episode,
    mode: GraphMode,
) -> Result<EpisodeForward> {
    let cfg = &arch.cfg;
    if ep.dim != cfg.d_in {
        return Err(Error::Shape {
            op: "forward_episode",
            detail: format!("episode dim {} vs model input {}", ep.dim, cfg.d_in),
        });
    }
    let n = ep.n_way;
    let k = ep.k_shot;
    let nk = ep.n_support();
    let qn = ep.n_query();
    let s_in = tape.constant_from(nk, cfg.d_in, ep.support.clone())?;
    let q_in = tape.constant_from(qn, cfg.d_in, ep.queries.clone())?;
    let s_e = embed(tape, set, s_in, arch.adapter.as_ref(), cfg.slope)?;
    let q_e = embed(tape, set, q_in, arch.adapter.as_ref(), cfg.slope)?;

    let zero = tape.scalar_const(0.0);
    let (l1, l2, l3, p_pgnn, p_ignn, p_combined) = match cfg.variant {
        Variant::ProtoNet => {
            let protos = compute_prototypes(tape, s_e, &ep.support_labels, n, k)?;
            let p = classify_by_prototypes(tape, q_e, protos, cfg.distance)?;
            let ce = cross_entropy(tape, p, &ep.query_labels)?;
            (ce, zero, zero, p, p, p)
        }
        Variant::PgnnOnly => {
            let (_, refined) = pgnn_forward(tape, set, s_e, &ep.support_labels, n, k, &arch.pgnn)?;
            let p = classify_by_prototypes(tape, q_e, refined, cfg.distance)?;
            let ce = cross_entropy(tape, p, &ep.query_labels)?;
            (ce, zero, zero, p, p, p)
        }
        Variant::IgnnOnly => {
            let (s_out, q_out) = ignn_forward(tape, set, s_e, q_e, &arch.ignn, mode, n, k)?;
            let protos = ignn_prototypes(tape, s_out, &ep.support_labels, n, k)?;
            let p = classify_by_prototypes(tape, q_out, protos, cfg.distance)?;
            let ce = cross_entropy(tape, p, &ep.query_labels)?;
            (zero, ce, zero, p, p, p)
        }
        Variant::Hgnn => {
            let (_, refined) = pgnn_forward(tape, set, s_e, &ep.support_labels, n, k, &arch.pgnn)?;
            let p_p = classify_by_prototypes(tape, q_e, refined, cfg.distance)?;
            let (s_out, q_out) = ignn_forward(tape, set, s_e, q_e, &arch.ignn, mode, n, k)?;
            let protos_i = ignn_prototypes(tape, s_out, &ep.support_labels, n, k)?;
            let p_i = classify_by_prototypes(tape, q_out, protos_i, cfg.distance)?;
            let l1 = cross_entropy(tape, p_p, &ep.query_labels)?;
            let l2 = cross_entropy(tape, p_i, &ep.query_labels)?;
            let l3 = consistency_loss(tape, p_p, p_i, cfg.consistency)?;
            let sum = tape.add(p_p, p_i)?;
            let combined = tape.scale(sum, 0.5);
            (l1, l2, l3, p_p, p_i, combined)
        }
        Variant::LabelProp => {
            let baseline = arch
                .baseline
                .as_ref()
                .ok_or_else(|| Error::Contract("label-propagation variant without baseline params".into()))?;
            if baseline.n_way != n {
                return Err(Error::Contract(format!(
                    "baseline classifier is {}-way, episode is {}-way",
                    baseline.n_way, n
                )));
            }
            let mut p_rows = Vec::with_capacity(qn);
            for qi in 0..qn {
                let q_row = tape.gather_rows(q_e, &[qi])?;
                p_rows.push(labelprop_forward(
                    tape,
                    set,
                    baseline,
                    s_e,
                    &ep.support_labels,
                    q_row,
                    cfg.slope,
                )?);
            }
            let mut p = p_rows[0];
            for &r in &p_rows[1..] {
                p = tape.concat_rows(p, r)?;
            }
            let ce = cross_entropy(tape, p, &ep.query_labels)?;
            (ce, zero, zero, p, p, p)
        }
    };
    let l12 = tape.add(l1, l2)?;
    let total = tape.add(l12, l3)?;
    Ok(EpisodeForward {
        l1,
        l2,
        l3,
        total,
        p_pgnn,
        p_ignn,
        p_combined,
    })
}

/// Per-query probability vectors of both heads and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionPair {
    pub p_pgnn: Vec<f64>,
    pub p_ignn: Vec<f64>,
    pub p_combined: Vec<f64>,
}

/// Training-loss values of one episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
}

pub fn extract_pairs(tape: &Tape, fwd: &EpisodeForward) -> Vec<PredictionPair> {
    let (qn, n) = tape.dims(fwd.p_combined);
    let pp = tape.value(fwd.p_pgnn);
    let pi = tape.value(fwd.p_ignn);
    let pc = tape.value(fwd.p_combined);
    (0..qn)
        .map(|i| PredictionPair {
            p_pgnn: pp[i * n..(i + 1) * n].to_vec(),
            p_ignn: pi[i * n..(i + 1) * n].to_vec(),
            p_combined: pc[i * n..(i + 1) * n].to_vec(),
        })
        .collect()
}

pub fn extract_losses(tape: &Tape, fwd: &EpisodeForward) -> LossBreakdown {
    LossBreakdown {
        l1: tape.value(fwd.l1)[0],
        l2: tape.value(fwd.l2)[0],
        l3: tape.value(fwd.l3)[0],
        total: tape.value(fwd.total)[0],
    }
}

/// Run an episode on a fresh tape and return per-query predictions.
/// Works for every variant; single-head variants report that head in all
/// three fields.
pub fn hgnn_predict(model: &ModelParams, ep: &Episode, mode: GraphMode) -> Result<Vec<PredictionPair>> {
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, ep, mode)?;
    Ok(extract_pairs(&tape, &fwd))
}

/// Fraction of queries whose combined-probability argmax hits the label.
/// Ties resolve to the lowest class index.
pub fn accuracy(pairs: &[PredictionPair], labels: &[usize]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let hits = pairs
        .iter()
        .zip(labels)
        .filter(|(p, &l)| {
            let mut best = 0;
            for (j, v) in p.p_combined.iter().enumerate() {
                if *v > p.p_combined[best] {
                    best = j;
                }
            }
            best == l
        })
        .count();
    hits as f64 / pairs.len() as f64
}

/// The full loss stack recomputed from extracted probability vectors, in
/// plain arithmetic. For the hybrid variant this matches the tape-built
/// loss bit for bit, which makes it an independent check on the
/// differentiable path; single-head variants zero the terms they do not
/// train instead.
pub fn loss_total(pairs: &[PredictionPair], labels: &[usize], consistency: Consistency) -> Result<LossBreakdown> {
    if pairs.len() != labels.len() {
        return Err(Error::Contract(format!(
            "loss_total: {} predictions, {} labels",
            pairs.len(),
            labels.len()
        )));
    }
    let mut sum_lp = 0.0;
    let mut sum_li = 0.0;
    for (pair, &l) in pairs.iter().zip(labels) {
        if l >= pair.p_combined.len() {
            return Err(Error::Contract(format!("loss_total: label {} out of range", l)));
        }
        sum_lp += pair.p_pgnn[l].max(PROB_CLAMP).ln();
        sum_li += pair.p_ignn[l].max(PROB_CLAMP).ln();
    }
    let l1 = -sum_lp;
    let l2 = -sum_li;
    let l3 = match consistency {
        Consistency::None => 0.0,
        Consistency::L1Dist => {
            let mut s = 0.0;
            for pair in pairs {
                for (pi, pp) in pair.p_ignn.iter().zip(&pair.p_pgnn) {
                    s += (pi - pp).abs();
                }
            }
            s
        }
        Consistency::Mse => {
            let mut s = 0.0;
            for pair in pairs {
                for (pi, pp) in pair.p_ignn.iter().zip(&pair.p_pgnn) {
                    let d = pi - pp;
                    s += d * d;
                }
            }
            s
        }
        Consistency::Kl => {
            let mut t1 = 0.0;
            for pair in pairs {
                for (pi, pp) in pair.p_ignn.iter().zip(&pair.p_pgnn) {
                    t1 += pi * (pi.max(PROB_CLAMP).ln() - pp.max(PROB_CLAMP).ln());
                }
            }
            let mut t2 = 0.0;
            for pair in pairs {
                for (pi, pp) in pair.p_ignn.iter().zip(&pair.p_pgnn) {
                    t2 += pp * (pp.max(PROB_CLAMP).ln() - pi.max(PROB_CLAMP).ln());
                }
            }
            t1 + t2
        }
    };
    Ok(LossBreakdown {
        l1,
        l2,
        l3,
        total: (l1 + l2) + l3,
    })
}

const CKPT_MAGIC: &[u8; 8] = b"HGNNCKPT";
const CKPT_VERSION: u32 = 1;

fn variant_code(v: Variant) -> u8 {
    match v {
        Variant::ProtoNet => 0,
        Variant::PgnnOnly => 1,
        Variant::IgnnOnly => 2,
        Variant::Hgnn => 3,
        Variant::LabelProp => 4,
    }
}

fn code_variant(c: u8) -> Result<Variant> {
    Ok(match c {
        0 => Variant::ProtoNet,
        1 => Variant::PgnnOnly,
        2 => Variant::IgnnOnly,
        3 => Variant::Hgnn,
        4 => Variant::LabelProp,
        _ => return Err(Error::Checkpoint(format!("unknown variant code {}", c))),
    })
}

fn operator_code(o: OperatorKind) -> u8 {
    match o {
        OperatorKind::InnerProduct => 0,
        OperatorKind::ConcatMlp => 1,
        OperatorKind::SubtractMlp => 2,
    }
}

fn code_operator(c: u8) -> Result<OperatorKind> {
    Ok(match c {
        0 => OperatorKind::InnerProduct,
        1 => OperatorKind::ConcatMlp,
        2 => OperatorKind::SubtractMlp,
        _ => return Err(Error::Checkpoint(format!("unknown operator code {}", c))),
    })
}

fn distance_code(d: DistanceKind) -> u8 {
    match d {
        DistanceKind::Squared => 0,
        DistanceKind::Euclidean => 1,
    }
}

fn code_distance(c: u8) -> Result<DistanceKind> {
    Ok(match c {
        0 => DistanceKind::Squared,
        1 => DistanceKind::Euclidean,
        _ => return Err(Error::Checkpoint(format!("unknown distance code {}", c))),
    })
}

fn consistency_code(c: Consistency) -> u8 {
    match c {
        Consistency::None => 0,
        Consistency::L1Dist => 1,
        Consistency::Mse => 2,
        Consistency::Kl => 3,
    }
}

fn code_consistency(c: u8) -> Result<Consistency> {
    Ok(match c {
        0 => Consistency::None,
        1 => Consistency::L1Dist,
        2 => Consistency::Mse,
        3 => Consistency::Kl,
        _ => return Err(Error::Checkpoint(format!("unknown consistency code {}", c))),
    })
}

fn group_code(g: ParamGroup) -> u8 {
    match g {
        ParamGroup::Embedding => 0,
        ParamGroup::Gnn => 1,
    }
}

fn code_group(c: u8) -> Result<ParamGroup> {
    Ok(match c {
        0 => ParamGroup::Embedding,
        1 => ParamGroup::Gnn,
        _ => return Err(Error::Checkpoint(format!("unknown group code {}", c))),
    })
}

/// Serialize a model: magic, format version, the full configuration, then
/// every parameter as name + group + shape + little-endian f64 values.
/// Loading the result restores the model bit for bit.
pub fn save_checkpoint_bytes(model: &ModelParams) -> Vec<u8> {
    let cfg = &model.arch.cfg;
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.d_in as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.d as u32).to_le_bytes());
    out.push(variant_code(cfg.variant));
    out.push(cfg.adapter as u8);
    out.push(operator_code(cfg.operator));
    out.extend_from_slice(&(cfg.depth as u32).to_le_bytes());
    out.extend_from_slice(&cfg.slope.to_le_bytes());
    out.extend_from_slice(&cfg.ln_eps.to_le_bytes());
    out.push(distance_code(cfg.distance));
    out.push(consistency_code(cfg.consistency));
    out.extend_from_slice(&(cfg.baseline_layers as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.baseline_n_way as u32).to_le_bytes());
    out.extend_from_slice(&(model.set.len() as u32).to_le_bytes());
    for (_, param) in model.set.iter() {
        let name = param.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(group_code(param.group));
        out.push(param.tensor.shape.len() as u8);
        for &dim in &param.tensor.shape {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in &param.tensor.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(model: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, save_checkpoint_bytes(model))?;
    Ok(())
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {} bytes at offset {}, file has {}",
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("sized take")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("sized take")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("sized take")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Rebuild a model from checkpoint bytes. The configuration in the header
/// reconstructs the parameter structure; stored values then overwrite the
/// fresh initialization by name. Every parameter must appear exactly once
/// with its declared shape, and no bytes may remain.
pub fn load_checkpoint_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = ByteReader { bytes, pos: 0 };
    if r.take(8)? != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic; not a model checkpoint".into()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} unsupported (expected {})",
            version, CKPT_VERSION
        )));
    }
    let d_in = r.u32()? as usize;
    let d = r.u32()? as usize;
    let variant = code_variant(r.u8()?)?;
    let adapter = match r.u8()? {
        0 => false,
        1 => true,
        c => return Err(Error::Checkpoint(format!("bad adapter flag {}", c))),
    };
    let operator = code_operator(r.u8()?)?;
    let depth = r.u32()? as usize;
    let slope = r.f64()?;
    let ln_eps = r.f64()?;
    let distance = code_distance(r.u8()?)?;
    let consistency = code_consistency(r.u8()?)?;
    let baseline_layers = r.u32()? as usize;
    let baseline_n_way = r.u32()? as usize;
    let cfg = ModelConfig {
        d_in,
        d,
        variant,
        adapter,
        operator,
        depth,
        slope,
        ln_eps,
        distance,
        consistency,
        baseline_layers,
        baseline_n_way,
    };
    let mut model = ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;

    let n_params = r.u32()? as usize;
    if n_params != model.set.len() {
        return Err(Error::Checkpoint(format!(
            "{} stored parameters, structure has {}",
            n_params,
            model.set.len()
        )));
    }
    let mut seen: HashSet<String> = HashSet::new();
    for _ in 0..n_params {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?
            .to_string();
        let group = code_group(r.u8()?)?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            values.push(r.f64()?);
        }
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("parameter '{}' stored twice", name)));
        }
        let id = model
            .set
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{}'", name)))?;
        let param = model.set.get_mut(id);
        if param.tensor.shape != shape {
            return Err(Error::Checkpoint(format!(
                "parameter '{}' stored as {:?}, structure has {:?}",
                name, shape, param.tensor.shape
            )));
        }
        if param.group != group {
            return Err(Error::Checkpoint(format!("parameter '{}' group mismatch", name)));
        }
        param.tensor.values = values;
        param.tensor.grad = None;
    }
    if r.remaining() != 0 {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path)?;
    load_checkpoint_bytes(&bytes)
}
