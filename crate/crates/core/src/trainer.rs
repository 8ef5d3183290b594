//! Episodic training, evaluation, the ablation runner, and mechanistic
//! diagnostics on trained models.
//!
//! All randomness hangs off one seed through ChaCha streams: stream 0
//! initializes parameters, stream 1 drives training episodes, evaluation
//! task i uses stream 2^32 + i, validation tasks sit above 2^33, and
//! diagnostics episodes above 3 * 2^32. Each consumer owns its stream, so
//! a result never depends on scheduling or on how many draws something
//! else made; in particular, parallel and sequential evaluation see the
//! exact same episodes.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::diffcore::{OptimKind, OptimizerState, Tape};
use crate::episodes::{FeatureStore, Split};
use crate::error::{Error, Result};
use crate::graph::{GraphMode, OperatorKind};
use crate::models::{
    accuracy, extract_losses, extract_pairs, hgnn_predict, Consistency, LossBreakdown, ModelConfig,
    ModelParams, Variant,
};

pub const INIT_STREAM: u64 = 0;
pub const TRAIN_STREAM: u64 = 1;
pub const EVAL_STREAM_BASE: u64 = 1 << 32;
pub const VAL_STREAM_BASE: u64 = 2 << 32;
pub const DIAG_STREAM_BASE: u64 = 3 << 32;

/// Build a fresh model on the init stream of `seed`.
pub fn init_model(cfg: ModelConfig, seed: u64) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    ModelParams::init(cfg, &mut rng)
}

/// Learning-rate defaults per optimizer: (embedding, graph).
pub fn default_lrs(kind: OptimKind) -> (f64, f64) {
    match kind {
        OptimKind::Adam => (1e-4, 1e-3),
        OptimKind::Sgd => (2e-4, 2e-3),
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    pub optimizer: OptimKind,
    pub lr_embedding: f64,
    pub lr_gnn: f64,
    /// Both rates are halved every this many epochs; 0 disables the decay.
    pub lr_halve_every: usize,
    pub seed: u64,
    pub mode: GraphMode,
    /// Validation tasks scored after each epoch; 0 skips validation.
    pub val_tasks_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let (lr_embedding, lr_gnn) = default_lrs(OptimKind::Adam);
        TrainConfig {
            epochs: 200,
            episodes_per_epoch: 100,
            n_way: 5,
            k_shot: 5,
            q_queries: 15,
            optimizer: OptimKind::Adam,
            lr_embedding,
            lr_gnn,
            lr_halve_every: 40,
            seed: 42,
            mode: GraphMode::Inductive,
            val_tasks_per_epoch: 0,
        }
    }
}

/// Per-epoch training statistics. `epoch` is 1-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_l1: f64,
    pub mean_l2: f64,
    pub mean_l3: f64,
    pub train_acc: f64,
    pub lr_embedding: f64,
    pub lr_gnn: f64,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub logs: Vec<EpochLog>,
}

/// Episodic training: every episode runs forward, backward, and one
/// optimizer step over all trainable parameters. The learning rates decay
/// as lr * 2^-floor(epoch / lr_halve_every). A non-finite loss aborts with
/// the epoch, episode, and seed that produced it.
pub fn train(model: &mut ModelParams, store: &FeatureStore, cfg: &TrainConfig) -> Result<TrainResult> {
    if cfg.episodes_per_epoch == 0 {
        return Err(Error::InvalidConfig("episodes_per_epoch must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TRAIN_STREAM);
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.lr_embedding, cfg.lr_gnn);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let factor = if cfg.lr_halve_every == 0 {
            1.0
        } else {
            0.5f64.powi((epoch / cfg.lr_halve_every) as i32)
        };
        let lr_embedding = cfg.lr_embedding * factor;
        let lr_gnn = cfg.lr_gnn * factor;
        opt.set_learning_rates(lr_embedding, lr_gnn);

        let mut sum = LossBreakdown {
            l1: 0.0,
            l2: 0.0,
            l3: 0.0,
            total: 0.0,
        };
        let mut acc_sum = 0.0;
        for episode in 0..cfg.episodes_per_epoch {
            let ep = store.sample_episode(cfg.n_way, cfg.k_shot, cfg.q_queries, Split::Train, &mut rng)?;
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &ep, cfg.mode)?;
            let losses = extract_losses(&tape, &fwd);
            if !losses.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    episode,
                    seed: cfg.seed,
                });
            }
            let pairs = extract_pairs(&tape, &fwd);
            acc_sum += accuracy(&pairs, &ep.query_labels);
            tape.backward_params(fwd.total, &mut model.set)?;
            opt.step(&mut model.set)?;
            sum.l1 += losses.l1;
            sum.l2 += losses.l2;
            sum.l3 += losses.l3;
            sum.total += losses.total;
        }
        let m = cfg.episodes_per_epoch as f64;
        let val_acc = if cfg.val_tasks_per_epoch > 0 {
            Some(validate(model, store, cfg)?)
        } else {
            None
        };
        logs.push(EpochLog {
            epoch: epoch + 1,
            mean_loss: sum.total / m,
            mean_l1: sum.l1 / m,
            mean_l2: sum.l2 / m,
            mean_l3: sum.l3 / m,
            train_acc: acc_sum / m,
            lr_embedding,
            lr_gnn,
            val_acc,
        });
    }
    Ok(TrainResult { logs })
}

/// Accuracy over a fixed set of validation tasks (the same tasks every
/// epoch, so the curve is comparable across epochs).
fn validate(model: &ModelParams, store: &FeatureStore, cfg: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    for t in 0..cfg.val_tasks_per_epoch {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(VAL_STREAM_BASE + t as u64);
        let ep = store.sample_episode(cfg.n_way, cfg.k_shot, cfg.q_queries, Split::Val, &mut rng)?;
        let pairs = hgnn_predict(model, &ep, cfg.mode)?;
        total += accuracy(&pairs, &ep.query_labels);
    }
    Ok(total / cfg.val_tasks_per_epoch as f64)
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub n_tasks: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    pub seed: u64,
    pub mode: GraphMode,
    pub split: Split,
    /// Fan tasks out across threads when the `parallel` feature is on.
    /// The report is bit-identical either way.
    pub parallel: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_tasks: 10_000,
            n_way: 5,
            k_shot: 5,
            q_queries: 15,
            seed: 42,
            mode: GraphMode::Inductive,
            split: Split::Test,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub n_tasks: usize,
    pub mean_accuracy: f64,
    /// 1.96 * sample std / sqrt(n_tasks).
    pub ci95: f64,
    pub per_task_accuracy: Vec<f64>,
    pub mean_l1: f64,
    pub mean_l2: f64,
    pub mean_l3: f64,
    pub mean_loss: f64,
    /// Measured separately; never part of serialized reports.
    pub wall_clock_secs: f64,
}

fn eval_one_task(model: &ModelParams, store: &FeatureStore, cfg: &EvalConfig, task: usize) -> Result<(f64, LossBreakdown)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(EVAL_STREAM_BASE + task as u64);
    let ep = store.sample_episode(cfg.n_way, cfg.k_shot, cfg.q_queries, cfg.split, &mut rng)?;
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &ep, cfg.mode)?;
    let pairs = extract_pairs(&tape, &fwd);
    Ok((accuracy(&pairs, &ep.query_labels), extract_losses(&tape, &fwd)))
}

fn run_eval_tasks(model: &ModelParams, store: &FeatureStore, cfg: &EvalConfig) -> Result<Vec<(f64, LossBreakdown)>> {
    #[cfg(feature = "parallel")]
    {
        if cfg.parallel {
            return (0..cfg.n_tasks)
                .into_par_iter()
                .map(|i| eval_one_task(model, store, cfg, i))
                .collect();
        }
    }
    (0..cfg.n_tasks).map(|i| eval_one_task(model, store, cfg, i)).collect()
}

/// Frozen-parameter evaluation over independently seeded tasks. Task i
/// always draws from stream 2^32 + i, and the reduction runs over the
/// ordered task list, so the report does not depend on thread count or
/// the `parallel` flag.
pub fn evaluate(model: &ModelParams, store: &FeatureStore, cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.n_tasks == 0 {
        return Err(Error::InvalidConfig("evaluation needs at least one task".into()));
    }
    let start = Instant::now();
    let results = run_eval_tasks(model, store, cfg)?;
    let wall_clock_secs = start.elapsed().as_secs_f64();
    let t = cfg.n_tasks as f64;
    let per_task_accuracy: Vec<f64> = results.iter().map(|r| r.0).collect();
    let mean_accuracy = per_task_accuracy.iter().sum::<f64>() / t;
    let ci95 = if cfg.n_tasks > 1 {
        let var = per_task_accuracy
            .iter()
            .map(|a| (a - mean_accuracy) * (a - mean_accuracy))
            .sum::<f64>()
            / (t - 1.0);
        1.96 * var.sqrt() / t.sqrt()
    } else {
        0.0
    };
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    let mut l3 = 0.0;
    let mut loss = 0.0;
    for (_, lb) in &results {
        l1 += lb.l1;
        l2 += lb.l2;
        l3 += lb.l3;
        loss += lb.total;
    }
    Ok(EvalReport {
        n_tasks: cfg.n_tasks,
        mean_accuracy,
        ci95,
        per_task_accuracy,
        mean_l1: l1 / t,
        mean_l2: l2 / t,
        mean_l3: l3 / t,
        mean_loss: loss / t,
        wall_clock_secs,
    })
}

/// One configuration in an ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellSpec {
    pub variant: Variant,
    pub consistency: Consistency,
    pub operator: OperatorKind,
    pub depth: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationGrid {
    /// ProtoNet, each head alone, and the hybrid.
    Variants,
    /// The hybrid under each consistency term.
    ConsistencyLosses,
    /// The hybrid at depths 1 through 3.
    Depths,
}

/// Expand grids into cells, canonicalize fields a variant does not use
/// (consistency exists only for the hybrid; graph geometry is meaningless
/// for the prototype baseline), and drop duplicates.
pub fn ablation_cells(grids: &[AblationGrid], base: &ModelConfig) -> Vec<CellSpec> {
    let mut specs = Vec::new();
    for grid in grids {
        match grid {
            AblationGrid::Variants => {
                for variant in [Variant::ProtoNet, Variant::PgnnOnly, Variant::IgnnOnly, Variant::Hgnn] {
                    specs.push(CellSpec {
                        variant,
                        consistency: base.consistency,
                        operator: base.operator,
                        depth: base.depth,
                    });
                }
            }
            AblationGrid::ConsistencyLosses => {
                for consistency in [Consistency::None, Consistency::L1Dist, Consistency::Mse, Consistency::Kl] {
                    specs.push(CellSpec {
                        variant: Variant::Hgnn,
                        consistency,
                        operator: base.operator,
                        depth: base.depth,
                    });
                }
            }
            AblationGrid::Depths => {
                for depth in [1, 2, 3] {
                    specs.push(CellSpec {
                        variant: Variant::Hgnn,
                        consistency: base.consistency,
                        operator: base.operator,
                        depth,
                    });
                }
            }
        }
    }
    let mut out: Vec<CellSpec> = Vec::new();
    for mut spec in specs {
        if spec.variant != Variant::Hgnn {
            spec.consistency = Consistency::None;
        }
        if spec.variant == Variant::ProtoNet {
            spec.operator = OperatorKind::InnerProduct;
            spec.depth = 1;
        }
        if !out.contains(&spec) {
            out.push(spec);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct AblationCell {
    pub spec: CellSpec,
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub mean_loss: f64,
    pub train_secs: f64,
    pub eval_secs: f64,
}

/// Train and evaluate every cell of the requested grids under one seed
/// schedule. Each cell gets a fresh model; everything else (pool, episode
/// streams, optimizer settings) is shared.
pub fn ablate(
    store: &FeatureStore,
    grids: &[AblationGrid],
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
) -> Result<Vec<AblationCell>> {
    let mut cells = Vec::new();
    for spec in ablation_cells(grids, base) {
        let cfg = ModelConfig {
            variant: spec.variant,
            consistency: spec.consistency,
            operator: spec.operator,
            depth: spec.depth,
            ..base.clone()
        };
        let mut model = init_model(cfg, train_cfg.seed)?;
        let t0 = Instant::now();
        train(&mut model, store, train_cfg)?;
        let train_secs = t0.elapsed().as_secs_f64();
        let report = evaluate(&model, store, eval_cfg)?;
        cells.push(AblationCell {
            spec,
            mean_accuracy: report.mean_accuracy,
            ci95: report.ci95,
            mean_loss: report.mean_loss,
            train_secs,
            eval_secs: report.wall_clock_secs,
        });
    }
    Ok(cells)
}

#[derive(Debug, Clone)]
pub struct Fig4Config {
    pub n_episodes: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    pub seed: u64,
    pub split: Split,
    pub mode: GraphMode,
}

impl Default for Fig4Config {
    fn default() -> Self {
        Fig4Config {
            n_episodes: 200,
            n_way: 5,
            k_shot: 5,
            q_queries: 15,
            seed: 42,
            split: Split::Test,
            mode: GraphMode::Inductive,
        }
    }
}

/// Raw distances of one diagnostics episode. Prototype spreads are mean
/// pairwise distances between class prototypes; outlier distances are mean
/// distances from flagged outlier supports to their own class prototype.
/// Each is measured in its head's pre- or post-update space after the
/// same normalization (center columns, scale to unit RMS).
#[derive(Debug, Clone, Copy, Default)]
pub struct Fig4Episode {
    pub proto_spread_before: Option<f64>,
    pub proto_spread_after: Option<f64>,
    pub outlier_dist_before: Option<f64>,
    pub outlier_dist_after: Option<f64>,
    pub n_outlier_supports: usize,
}

#[derive(Debug, Clone)]
pub struct Fig4Report {
    pub episodes: Vec<Fig4Episode>,
    /// Fraction of episodes where the prototype update increased spread.
    pub proto_win_rate: Option<f64>,
    pub mean_proto_before: Option<f64>,
    pub mean_proto_after: Option<f64>,
    /// Fraction of flagged episodes where the instance update pulled
    /// outliers closer to their prototype.
    pub outlier_win_rate: Option<f64>,
    pub mean_outlier_before: Option<f64>,
    pub mean_outlier_after: Option<f64>,
    pub episodes_with_outliers: usize,
}

/// Center each column, then scale all entries to unit root-mean-square.
/// Distances measured afterwards are comparable across spaces that differ
/// by translation and global scale (the layer-norm output vs its input).
fn normalize_space(x: &mut [f64], rows: usize, cols: usize) {
    for j in 0..cols {
        let mut mean = 0.0;
        for i in 0..rows {
            mean += x[i * cols + j];
        }
        mean /= rows as f64;
        for i in 0..rows {
            x[i * cols + j] -= mean;
        }
    }
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let rms = ms.sqrt().max(1e-12);
    for v in x.iter_mut() {
        *v /= rms;
    }
}

fn row_dist(x: &[f64], a: usize, b: usize, d: usize) -> f64 {
    let mut s = 0.0;
    for k in 0..d {
        let diff = x[a * d + k] - x[b * d + k];
        s += diff * diff;
    }
    s.sqrt()
}

fn mean_pairwise_dist(x: &[f64], rows: usize, d: usize) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for a in 0..rows {
        for b in a + 1..rows {
            sum += row_dist(x, a, b, d);
            count += 1;
        }
    }
    sum / count as f64
}

fn class_means(x: &[f64], labels: &[usize], n_way: usize, d: usize) -> Vec<f64> {
    let mut means = vec![0.0; n_way * d];
    let mut counts = vec![0usize; n_way];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for k in 0..d {
            means[l * d + k] += x[i * d + k];
        }
    }
    for (c, &count) in counts.iter().enumerate() {
        for k in 0..d {
            means[c * d + k] /= count as f64;
        }
    }
    means
}

fn mean_outlier_dist(x: &[f64], labels: &[usize], flags: &[bool], n_way: usize, d: usize) -> Option<f64> {
    let means = class_means(x, labels, n_way, d);
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (&l, &flag)) in labels.iter().zip(flags).enumerate() {
        if !flag {
            continue;
        }
        let mut s = 0.0;
        for k in 0..d {
            let diff = x[i * d + k] - means[l * d + k];
            s += diff * diff;
        }
        sum += s.sqrt();
        count += 1;
    }
    if count == 0 {
        None
    } else {
        Some(sum / count as f64)
    }
}

/// Measure what each head does geometrically: whether the prototype
/// update spreads prototypes apart, and whether the instance update pulls
/// flagged outlier supports toward their class prototype. Episodes keep
/// their raw per-episode distances so the win rates can be recomputed
/// independently. Pools without outlier flags skip the outlier half.
pub fn diagnostics_fig4(model: &ModelParams, store: &FeatureStore, cfg: &Fig4Config) -> Result<Fig4Report> {
    let arch = &model.arch;
    let d = arch.cfg.d;
    let has_pgnn = !arch.pgnn.is_empty();
    let has_ignn = !arch.ignn.is_empty();
    let flags_available = store.has_outlier_flags();
    let mut episodes = Vec::with_capacity(cfg.n_episodes);
    for e in 0..cfg.n_episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(DIAG_STREAM_BASE + e as u64);
        let ep = store.sample_episode(cfg.n_way, cfg.k_shot, cfg.q_queries, cfg.split, &mut rng)?;
        let mut tape = Tape::new();
        let s_in = tape.constant_from(ep.n_support(), ep.dim, ep.support.clone())?;
        let q_in = tape.constant_from(ep.n_query(), ep.dim, ep.queries.clone())?;
        let s_e = crate::models::embed(&mut tape, &model.set, s_in, arch.adapter.as_ref(), arch.cfg.slope)?;
        let q_e = crate::models::embed(&mut tape, &model.set, q_in, arch.adapter.as_ref(), arch.cfg.slope)?;

        let mut rec = Fig4Episode::default();
        if has_pgnn {
            let (raw, refined) = crate::models::pgnn_forward(
                &mut tape,
                &model.set,
                s_e,
                &ep.support_labels,
                ep.n_way,
                ep.k_shot,
                &arch.pgnn,
            )?;
            let mut before = tape.value(raw).to_vec();
            let mut after = tape.value(refined).to_vec();
            normalize_space(&mut before, ep.n_way, d);
            normalize_space(&mut after, ep.n_way, d);
            rec.proto_spread_before = Some(mean_pairwise_dist(&before, ep.n_way, d));
            rec.proto_spread_after = Some(mean_pairwise_dist(&after, ep.n_way, d));
        }
        if has_ignn && flags_available {
            let flags = &ep.provenance.support_outlier;
            rec.n_outlier_supports = flags.iter().filter(|f| **f).count();
            if rec.n_outlier_supports > 0 {
                let (s_out, _) = crate::models::ignn_forward(
                    &mut tape,
                    &model.set,
                    s_e,
                    q_e,
                    &arch.ignn,
                    cfg.mode,
                    ep.n_way,
                    ep.k_shot,
                )?;
                let mut before = tape.value(s_e).to_vec();
                let mut after = tape.value(s_out).to_vec();
                normalize_space(&mut before, ep.n_support(), d);
                normalize_space(&mut after, ep.n_support(), d);
                rec.outlier_dist_before = mean_outlier_dist(&before, &ep.support_labels, flags, ep.n_way, d);
                rec.outlier_dist_after = mean_outlier_dist(&after, &ep.support_labels, flags, ep.n_way, d);
            }
        }
        episodes.push(rec);
    }

    let proto_pairs: Vec<(f64, f64)> = episodes
        .iter()
        .filter_map(|e| e.proto_spread_before.zip(e.proto_spread_after))
        .collect();
    let (proto_win_rate, mean_proto_before, mean_proto_after) = if proto_pairs.is_empty() {
        (None, None, None)
    } else {
        let n = proto_pairs.len() as f64;
        let wins = proto_pairs.iter().filter(|(b, a)| a > b).count() as f64;
        (
            Some(wins / n),
            Some(proto_pairs.iter().map(|(b, _)| b).sum::<f64>() / n),
            Some(proto_pairs.iter().map(|(_, a)| a).sum::<f64>() / n),
        )
    };
    let outlier_pairs: Vec<(f64, f64)> = episodes
        .iter()
        .filter_map(|e| e.outlier_dist_before.zip(e.outlier_dist_after))
        .collect();
    let episodes_with_outliers = outlier_pairs.len();
    let (outlier_win_rate, mean_outlier_before, mean_outlier_after) = if outlier_pairs.is_empty() {
        (None, None, None)
    } else {
        let n = outlier_pairs.len() as f64;
        let wins = outlier_pairs.iter().filter(|(b, a)| a < b).count() as f64;
        (
            Some(wins / n),
            Some(outlier_pairs.iter().map(|(b, _)| b).sum::<f64>() / n),
            Some(outlier_pairs.iter().map(|(_, a)| a).sum::<f64>() / n),
        )
    };
    Ok(Fig4Report {
        episodes,
        proto_win_rate,
        mean_proto_before,
        mean_proto_after,
        outlier_win_rate,
        mean_outlier_before,
        mean_outlier_after,
        episodes_with_outliers,
    })
}
