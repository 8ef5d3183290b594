//! One function per subcommand. Each takes the resolved configuration and
//! the output directory, writes its artifacts there, and prints a short
//! summary to stdout.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hgnn_core::diffcore::finite_diff_check;
use hgnn_core::episodes::{generate_synthetic_pool, save_feature_file, Episode, FeatureStore, Split};
use hgnn_core::models::{
    compute_prototypes, embed, forward_episode, ignn_forward, load_checkpoint, pgnn_forward,
    save_checkpoint, ModelParams,
};
use hgnn_core::diffcore::Tape;
use hgnn_core::trainer::{self, ablate, evaluate, init_model, EvalReport};

use crate::config::RunConfig;
use crate::errors::{from_core, CliError};
use crate::pca;

/// Episode stream for `export-proj`; the library reserves 0 through 3<<32
/// for init, training, evaluation, validation, and diagnostics.
const EXPORT_STREAM: u64 = 4 << 32;

/// Either load the feature file named by `paths.data` or generate the pool
/// from the `data.*` keys. Generating keeps the outlier flags that the file
/// format does not carry.
fn load_store(cfg: &RunConfig) -> Result<FeatureStore, CliError> {
    let raw = cfg.get("paths.data");
    if raw.is_empty() {
        return generate_synthetic_pool(&cfg.synthetic()?).map_err(from_core);
    }
    let path = Path::new(raw);
    if !path.exists() {
        return Err(CliError::Config(format!(
            "key paths.data: file {} does not exist",
            path.display()
        )));
    }
    hgnn_core::episodes::load_feature_file(path).map_err(from_core)
}

fn checkpoint_path(cfg: &RunConfig, out: &Path) -> PathBuf {
    let raw = cfg.get("paths.checkpoint");
    if raw.is_empty() {
        out.join("model.ckpt")
    } else {
        PathBuf::from(raw)
    }
}

fn load_model(cfg: &RunConfig, out: &Path) -> Result<ModelParams, CliError> {
    let path = checkpoint_path(cfg, out);
    if !path.exists() {
        return Err(CliError::Config(format!(
            "key paths.checkpoint: checkpoint {} does not exist; train first or point the key at one",
            path.display()
        )));
    }
    load_checkpoint(&path).map_err(from_core)
}

fn check_dim(store: &FeatureStore, d_in: usize) -> Result<(), CliError> {
    if store.dim() != d_in {
        return Err(CliError::Config(format!(
            "key model.d_in: the data is {}-dimensional but model.d_in is {}",
            store.dim(),
            d_in
        )));
    }
    Ok(())
}

fn write_artifact(path: &Path, content: &str) -> Result<(), CliError> {
    std::fs::write(path, content)
        .map_err(|e| CliError::Artifact(format!("cannot write {}: {e}", path.display())))
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let store = generate_synthetic_pool(&cfg.synthetic()?).map_err(from_core)?;
    let path = out.join("features.csv");
    save_feature_file(&store, &path).map_err(from_core)?;
    let flagged = store.records().iter().filter(|r| r.outlier).count();
    let splits: Vec<usize> = [Split::Train, Split::Val, Split::Test]
        .iter()
        .map(|&s| store.classes_in(s).len())
        .collect();
    println!(
        "wrote {} records ({} flagged outliers) across {} classes (train/val/test {}/{}/{}) to {}",
        store.n_records(),
        flagged,
        splits.iter().sum::<usize>(),
        splits[0],
        splits[1],
        splits[2],
        path.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let store = load_store(cfg)?;
    let mcfg = cfg.model()?;
    check_dim(&store, mcfg.d_in)?;
    let tcfg = cfg.train()?;
    if tcfg.epochs == 0 {
        return Err(CliError::Config("key train.epochs: must be at least 1".into()));
    }
    let mut model = init_model(mcfg, tcfg.seed).map_err(from_core)?;
    let result = trainer::train(&mut model, &store, &tcfg).map_err(from_core)?;

    let ckpt = checkpoint_path(cfg, out);
    save_checkpoint(&model, &ckpt).map_err(from_core)?;

    let with_val = tcfg.val_tasks_per_epoch > 0;
    let mut log = String::from("epoch,mean_loss,l1,l2,l3,train_acc,lr_embed,lr_gnn");
    if with_val {
        log.push_str(",val_acc");
    }
    log.push('\n');
    for e in &result.logs {
        let _ = write!(
            log,
            "{},{},{},{},{},{},{},{}",
            e.epoch, e.mean_loss, e.mean_l1, e.mean_l2, e.mean_l3, e.train_acc, e.lr_embedding, e.lr_gnn
        );
        if with_val {
            let _ = write!(log, ",{}", e.val_acc.unwrap_or(f64::NAN));
        }
        log.push('\n');
    }
    let log_path = out.join("train_log.csv");
    write_artifact(&log_path, &log)?;

    let last = result.logs.last().expect("epochs >= 1 ran");
    let mut summary = format!(
        "trained {} for {} epochs ({} episodes each): loss {:.4}, train accuracy {:.4}",
        model.arch.cfg.variant.name(),
        tcfg.epochs,
        tcfg.episodes_per_epoch,
        last.mean_loss,
        last.train_acc
    );
    if let Some(v) = last.val_acc {
        let _ = write!(summary, ", val accuracy {:.4}", v);
    }
    println!("{summary}");
    println!("wrote {} and {}", ckpt.display(), log_path.display());
    Ok(())
}

fn eval_report_text(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "accuracy_pct = {:.2} ± {:.2}",
        100.0 * report.mean_accuracy,
        100.0 * report.ci95
    );
    let _ = writeln!(s, "mean_accuracy = {}", report.mean_accuracy);
    let _ = writeln!(s, "ci95 = {}", report.ci95);
    let _ = writeln!(s, "n_tasks = {}", report.n_tasks);
    let _ = writeln!(s, "mean_loss = {}", report.mean_loss);
    let _ = writeln!(s, "mean_l1 = {}", report.mean_l1);
    let _ = writeln!(s, "mean_l2 = {}", report.mean_l2);
    let _ = writeln!(s, "mean_l3 = {}", report.mean_l3);
    s
}

pub fn eval(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let store = load_store(cfg)?;
    let model = load_model(cfg, out)?;
    check_dim(&store, model.arch.cfg.d_in)?;
    let ecfg = cfg.eval()?;
    let report = evaluate(&model, &store, &ecfg).map_err(from_core)?;
    println!("{:.2} ± {:.2}", 100.0 * report.mean_accuracy, 100.0 * report.ci95);
    let path = out.join("eval_report.txt");
    write_artifact(&path, &eval_report_text(&report))?;
    println!(
        "evaluated {} on {} {} tasks; wrote {}",
        model.arch.cfg.variant.name(),
        report.n_tasks,
        ecfg.split,
        path.display()
    );
    Ok(())
}

pub fn ablate_cmd(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let store = load_store(cfg)?;
    let base = cfg.model()?;
    check_dim(&store, base.d_in)?;
    let grids = cfg.grids()?;
    let tcfg = cfg.train()?;
    let ecfg = cfg.eval()?;
    let cells = ablate(&store, &grids, &base, &tcfg, &ecfg).map_err(from_core)?;

    let mut csv = String::new();
    let _ = writeln!(
        csv,
        "# train: seed {} epochs {} episodes_per_epoch {} n_way {} k_shot {} q_queries {} optimizer {}",
        tcfg.seed, tcfg.epochs, tcfg.episodes_per_epoch, tcfg.n_way, tcfg.k_shot, tcfg.q_queries,
        tcfg.optimizer.name()
    );
    let _ = writeln!(
        csv,
        "# eval: seed {} n_tasks {} split {} mode {}",
        ecfg.seed, ecfg.n_tasks, ecfg.split, ecfg.mode.name()
    );
    let _ = writeln!(csv, "variant,consistency,operator,depth,accuracy,ci95,mean_loss");
    println!(
        "{:<10} {:<12} {:<14} {:<6} {:<10} {:<8} {}",
        "variant", "consistency", "operator", "depth", "accuracy", "ci95", "mean_loss"
    );
    for cell in &cells {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            cell.spec.variant.name(),
            cell.spec.consistency.name(),
            cell.spec.operator.name(),
            cell.spec.depth,
            cell.mean_accuracy,
            cell.ci95,
            cell.mean_loss
        );
        println!(
            "{:<10} {:<12} {:<14} {:<6} {:<10.4} {:<8.4} {:.4}",
            cell.spec.variant.name(),
            cell.spec.consistency.name(),
            cell.spec.operator.name(),
            cell.spec.depth,
            cell.mean_accuracy,
            cell.ci95,
            cell.mean_loss
        );
    }
    let path = out.join("ablation.csv");
    write_artifact(&path, &csv)?;
    println!("wrote {} ({} cells)", path.display(), cells.len());
    Ok(())
}

pub fn export_proj(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let store = load_store(cfg)?;
    let model = load_model(cfg, out)?;
    check_dim(&store, model.arch.cfg.d_in)?;
    let ecfg = cfg.eval()?;
    let split = cfg.proj_split()?;
    let seed = cfg.u64_key("proj.seed")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EXPORT_STREAM);
    let ep = store
        .sample_episode(ecfg.n_way, ecfg.k_shot, ecfg.q_queries, split, &mut rng)
        .map_err(from_core)?;

    let set = &model.set;
    let arch = &model.arch;
    let mut tape = Tape::new();
    let x_s = tape.constant_from(ep.n_support(), ep.dim, ep.support.clone()).map_err(from_core)?;
    let x_q = tape.constant_from(ep.n_query(), ep.dim, ep.queries.clone()).map_err(from_core)?;
    let e_s = embed(&mut tape, set, x_s, arch.adapter.as_ref(), arch.cfg.slope).map_err(from_core)?;
    let e_q = embed(&mut tape, set, x_q, arch.adapter.as_ref(), arch.cfg.slope).map_err(from_core)?;

    // (kind, node matrix, row -> (class id, outlier flag))
    let mut blocks: Vec<(&str, Vec<f64>, Vec<(usize, bool)>)> = Vec::new();
    let inst_meta: Vec<(usize, bool)> = ep
        .support_labels
        .iter()
        .zip(&ep.provenance.support_outlier)
        .map(|(&l, &o)| (ep.provenance.class_ids[l], o))
        .collect();
    let proto_meta: Vec<(usize, bool)> = ep.provenance.class_ids.iter().map(|&c| (c, false)).collect();

    blocks.push(("inst_raw", tape.value(e_s).to_vec(), inst_meta.clone()));
    if !arch.ignn.is_empty() {
        let (s_out, _) = ignn_forward(
            &mut tape, set, e_s, e_q, &arch.ignn, ecfg.mode, ep.n_way, ep.k_shot,
        )
        .map_err(from_core)?;
        blocks.push(("inst_ignn", tape.value(s_out).to_vec(), inst_meta));
    }
    let raw = compute_prototypes(&mut tape, e_s, &ep.support_labels, ep.n_way, ep.k_shot).map_err(from_core)?;
    blocks.push(("proto_raw", tape.value(raw).to_vec(), proto_meta.clone()));
    if !arch.pgnn.is_empty() {
        let (_, refined) = pgnn_forward(
            &mut tape, set, e_s, &ep.support_labels, ep.n_way, ep.k_shot, &arch.pgnn,
        )
        .map_err(from_core)?;
        blocks.push(("proto_pgnn", tape.value(refined).to_vec(), proto_meta));
    }

    let d = arch.cfg.d;
    let mut union = Vec::new();
    for (_, values, _) in &blocks {
        union.extend_from_slice(values);
    }
    let n_rows = union.len() / d;
    let proj = pca::project_2d(&union, n_rows, d);

    let mut csv = String::from("kind,class,is_outlier,x,y\n");
    let mut row = 0;
    for (kind, _, meta) in &blocks {
        for &(class, outlier) in meta {
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                kind,
                class,
                outlier as u8,
                proj[row * 2],
                proj[row * 2 + 1]
            );
            row += 1;
        }
    }
    let path = out.join("projection.csv");
    write_artifact(&path, &csv)?;

    let mut orig_d = Vec::new();
    let mut proj_d = Vec::new();
    for i in 0..n_rows {
        for j in i + 1..n_rows {
            let od: f64 = (0..d).map(|k| (union[i * d + k] - union[j * d + k]).powi(2)).sum();
            let pd: f64 = (0..2).map(|k| (proj[i * 2 + k] - proj[j * 2 + k]).powi(2)).sum();
            orig_d.push(od.sqrt());
            proj_d.push(pd.sqrt());
        }
    }
    let rho = pca::spearman(&orig_d, &proj_d);
    println!("wrote {} ({} rows)", path.display(), n_rows);
    println!("distance rank correlation: {:.4}", rho);
    Ok(())
}

fn random_episode(n: usize, k: usize, q: usize, d: usize, seed: u64) -> Episode {
    let mut rng = StdRng::seed_from_u64(seed);
    let support: Vec<f64> = (0..n * k * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let queries: Vec<f64> = (0..n * q * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let support_labels = (0..n * k).map(|i| i / k).collect();
    let query_labels = (0..n * q).map(|i| i / q).collect();
    Episode::from_parts(n, k, q, d, support, support_labels, queries, query_labels)
        .expect("sizes built to match")
}

pub fn gradcheck(cfg: &RunConfig, _out: &Path) -> Result<(), CliError> {
    let mcfg = cfg.model()?;
    if mcfg.d_in > 16 || mcfg.d > 16 {
        return Err(CliError::Config(format!(
            "key model.d: the check is quadratic in parameter count; keep model.d_in and model.d at 16 or below (got {} and {})",
            mcfg.d_in, mcfg.d
        )));
    }
    let n = cfg.usize_key("gradcheck.n_way")?;
    let k = cfg.usize_key("gradcheck.k_shot")?;
    let q = cfg.usize_key("gradcheck.q_queries")?;
    if n < 2 || k == 0 || q == 0 {
        return Err(CliError::Config(format!(
            "key gradcheck.n_way: the episode needs n >= 2, k >= 1, q >= 1; got n={n} k={k} q={q}"
        )));
    }
    let seed = cfg.u64_key("gradcheck.seed")?;
    let eps = cfg.f64_key("gradcheck.eps")?;
    let corrupt = cfg.bool_key("gradcheck.corrupt")?;
    let mode = cfg.train()?.mode;

    let mut model = init_model(mcfg, seed).map_err(from_core)?;
    // Zero-initialized biases park pre-activations exactly on the leaky
    // ReLU kink, where central differences straddle the slope change; a
    // small jitter moves every coordinate off it.
    let mut jrng = StdRng::seed_from_u64(seed ^ 0x5eed);
    let ids: Vec<_> = model.set.ids().collect();
    for id in ids {
        for v in &mut model.set.get_mut(id).tensor.values {
            *v += jrng.random_range(-0.05..0.05);
        }
    }
    let ep = random_episode(n, k, q, model.arch.cfg.d_in, seed);

    let arch = &model.arch;
    let set = &mut model.set;
    let report = finite_diff_check(set, eps, |tape, pset| {
        let fwd = forward_episode(tape, pset, arch, &ep, mode)?;
        if corrupt {
            // Smuggle a parameter-dependent value past the tape: the sum is
            // computed outside any recorded op, so the analytic gradient
            // cannot see it while the finite difference does.
            let first = pset.ids().next().expect("model has parameters");
            let s: f64 = pset.get(first).tensor.values.iter().sum();
            let c = tape.scalar_const(0.01 * s);
            return tape.add(fwd.total, c);
        }
        Ok(fwd.total)
    })
    .map_err(from_core)?;

    print!("{}", report.summary());
    let scalars = model.set.scalar_count();
    if report.max_rel_err <= 1e-4 {
        println!("gradient check passed: {} scalar parameters within 1e-4", scalars);
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed: max rel err {:.3e} exceeds 1e-4",
            report.max_rel_err
        )))
    }
}
