//! Flat key-value run configuration. One registry drives the config file
//! parser, `--set` overrides, the help text, and the resolved echo, so a key
//! cannot exist in one place and be missing from another.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use hgnn_core::diffcore::OptimKind;
use hgnn_core::episodes::{Split, SyntheticConfig};
use hgnn_core::graph::{GraphMode, OperatorKind};
use hgnn_core::models::{Consistency, DistanceKind, ModelConfig, Variant};
use hgnn_core::trainer::{default_lrs, AblationGrid, EvalConfig, TrainConfig};

use crate::errors::CliError;

pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

macro_rules! keys {
    ($($key:literal = $default:literal : $help:literal),* $(,)?) => {
        &[$(KeySpec { key: $key, default: $default, help: $help }),*]
    };
}

pub const KEYS: &[KeySpec] = keys![
    "data.seed" = "42" : "synthetic pool seed",
    "data.dim" = "16" : "feature dimensionality",
    "data.train_classes" = "64" : "classes in the train split",
    "data.val_classes" = "16" : "classes in the val split",
    "data.test_classes" = "20" : "classes in the test split",
    "data.records_per_class" = "60" : "records generated per class",
    "data.intra_std" = "1.2" : "within-class standard deviation",
    "data.inter_scale" = "3.5" : "class-mean spread",
    "data.outlier_rate" = "0.15" : "fraction of records displaced as outliers",
    "data.outlier_scale" = "5.0" : "displacement scale for outliers",
    "data.overlap_pairs" = "1" : "class pairs moved near-coincident per split",
    "data.overlap_dist" = "1.0" : "distance between overlapped class means",
    "model.d_in" = "16" : "input feature width; must match the data dimension",
    "model.d" = "16" : "graph feature width; equals d_in unless the adapter is on",
    "model.variant" = "hgnn" : "protonet | pgnn | ignn | hgnn | labelprop",
    "model.adapter" = "false" : "train an embedding MLP on top of the input features",
    "model.operator" = "inner_product" : "adjacency scorer: inner_product | concat_mlp | subtract_mlp",
    "model.depth" = "1" : "graph layers per head",
    "model.slope" = "0.2" : "leaky ReLU negative slope",
    "model.ln_eps" = "1e-5" : "layer-norm epsilon",
    "model.distance" = "squared" : "classifier distance: squared | euclidean",
    "model.consistency" = "kl" : "head-agreement loss: none | l1 | mse | kl",
    "model.baseline_layers" = "1" : "graph layers in the label-propagation baseline",
    "model.baseline_n_way" = "5" : "way the baseline classifier is built for",
    "train.epochs" = "30" : "training epochs",
    "train.episodes_per_epoch" = "100" : "episodes per epoch",
    "train.n_way" = "5" : "classes per training episode",
    "train.k_shot" = "5" : "supports per class",
    "train.q_queries" = "15" : "queries per class",
    "train.optimizer" = "adam" : "adam | sgd",
    "train.lr_embedding" = "auto" : "embedding learning rate; auto picks the optimizer default",
    "train.lr_gnn" = "auto" : "graph learning rate; auto picks the optimizer default",
    "train.lr_halve_every" = "40" : "halve both rates every this many epochs; 0 disables",
    "train.seed" = "42" : "training stream seed",
    "train.mode" = "inductive" : "query handling: inductive | transductive",
    "train.val_tasks" = "0" : "validation tasks scored after each epoch; 0 skips",
    "eval.n_tasks" = "1000" : "evaluation tasks",
    "eval.n_way" = "5" : "classes per evaluation task",
    "eval.k_shot" = "5" : "supports per class",
    "eval.q_queries" = "15" : "queries per class",
    "eval.seed" = "42" : "evaluation stream seed",
    "eval.mode" = "inductive" : "query handling: inductive | transductive",
    "eval.split" = "test" : "class split evaluated: train | val | test",
    "eval.parallel" = "true" : "fan tasks out across threads when compiled in",
    "ablate.grids" = "variants,consistency,depths" : "comma list of grids to sweep",
    "proj.seed" = "42" : "episode seed for the projection export",
    "proj.split" = "test" : "split the exported episode is drawn from",
    "gradcheck.n_way" = "3" : "classes in the checked episode",
    "gradcheck.k_shot" = "2" : "supports per class in the checked episode",
    "gradcheck.q_queries" = "3" : "queries per class in the checked episode",
    "gradcheck.seed" = "7" : "seed for the checked model and episode",
    "gradcheck.eps" = "1e-5" : "finite-difference step",
    "gradcheck.corrupt" = "false" : "test hook: smuggle a value past the tape so the check must fail",
    "paths.data" = "" : "feature file to load; empty generates the synthetic pool in-process",
    "paths.checkpoint" = "" : "checkpoint to save and load; empty uses <out>/model.ckpt",
];

/// Key listing appended to `--help`.
pub fn key_help() -> String {
    let mut s = String::from("Configuration keys (a --config file line or --set key=value):\n");
    for spec in KEYS {
        let shown = if spec.default.is_empty() { "\"\"" } else { spec.default };
        let _ = writeln!(s, "  {:<26} {:<14} {}", spec.key, shown, spec.help);
    }
    s
}

pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl RunConfig {
    pub fn defaults() -> RunConfig {
        RunConfig {
            values: KEYS.iter().map(|s| (s.key, s.default.to_string())).collect(),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let spec = KEYS
            .iter()
            .find(|s| s.key == key)
            .ok_or_else(|| CliError::Config(format!("unknown configuration key '{key}'")))?;
        self.values.insert(spec.key, value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &'static str) -> &str {
        self.values.get(key).expect("key comes from the registry")
    }

    /// Apply `key = value` lines; '#' starts a comment, blanks are skipped.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!(
                    "config file {} line {}: expected 'key = value', got '{line}'",
                    path.display(),
                    idx + 1
                ))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// The global `--seed` retargets every stream seed at once.
    pub fn apply_seed(&mut self, seed: u64) {
        for key in ["data.seed", "train.seed", "eval.seed", "proj.seed", "gradcheck.seed"] {
            self.set(key, &seed.to_string()).expect("registry keys");
        }
    }

    pub fn apply_sets(&mut self, sets: &[String]) -> Result<(), CliError> {
        for s in sets {
            let (key, value) = s
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got '{s}'")))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Validate every key and replace the `auto` learning rates with the
    /// optimizer's defaults, so the echo below is fully concrete.
    pub fn resolve(&mut self) -> Result<(), CliError> {
        let optim = self.optimizer()?;
        let (lr_e, lr_g) = default_lrs(optim);
        if self.get("train.lr_embedding") == "auto" {
            self.values.insert("train.lr_embedding", lr_e.to_string());
        }
        if self.get("train.lr_gnn") == "auto" {
            self.values.insert("train.lr_gnn", lr_g.to_string());
        }
        self.synthetic()?;
        self.model()?;
        self.train()?;
        self.eval()?;
        self.grids()?;
        self.split("proj.split")?;
        self.u64_key("proj.seed")?;
        self.usize_key("gradcheck.n_way")?;
        self.usize_key("gradcheck.k_shot")?;
        self.usize_key("gradcheck.q_queries")?;
        self.u64_key("gradcheck.seed")?;
        self.f64_key("gradcheck.eps")?;
        self.bool_key("gradcheck.corrupt")?;
        Ok(())
    }

    /// Sorted `key = value` lines; written next to every command's outputs.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn parse_as<T>(&self, key: &'static str, what: &str, f: impl Fn(&str) -> Option<T>) -> Result<T, CliError> {
        let raw = self.get(key);
        f(raw).ok_or_else(|| CliError::Config(format!("key {key}: expected {what}, got '{raw}'")))
    }

    pub fn usize_key(&self, key: &'static str) -> Result<usize, CliError> {
        self.parse_as(key, "a nonnegative integer", |s| s.parse().ok())
    }

    pub fn u64_key(&self, key: &'static str) -> Result<u64, CliError> {
        self.parse_as(key, "a nonnegative integer", |s| s.parse().ok())
    }

    pub fn f64_key(&self, key: &'static str) -> Result<f64, CliError> {
        self.parse_as(key, "a number", |s| s.parse().ok())
    }

    pub fn bool_key(&self, key: &'static str) -> Result<bool, CliError> {
        self.parse_as(key, "true or false", |s| match s {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        })
    }

    fn split(&self, key: &'static str) -> Result<Split, CliError> {
        self.parse_as(key, "train, val, or test", Split::parse)
    }

    fn mode(&self, key: &'static str) -> Result<GraphMode, CliError> {
        self.parse_as(key, "inductive or transductive", GraphMode::parse)
    }

    fn optimizer(&self) -> Result<OptimKind, CliError> {
        self.parse_as("train.optimizer", "adam or sgd", OptimKind::parse)
    }

    pub fn synthetic(&self) -> Result<SyntheticConfig, CliError> {
        Ok(SyntheticConfig {
            seed: self.u64_key("data.seed")?,
            dim: self.usize_key("data.dim")?,
            train_classes: self.usize_key("data.train_classes")?,
            val_classes: self.usize_key("data.val_classes")?,
            test_classes: self.usize_key("data.test_classes")?,
            records_per_class: self.usize_key("data.records_per_class")?,
            intra_std: self.f64_key("data.intra_std")?,
            inter_scale: self.f64_key("data.inter_scale")?,
            outlier_rate: self.f64_key("data.outlier_rate")?,
            outlier_scale: self.f64_key("data.outlier_scale")?,
            overlap_pairs: self.usize_key("data.overlap_pairs")?,
            overlap_dist: self.f64_key("data.overlap_dist")?,
        })
    }

    pub fn model(&self) -> Result<ModelConfig, CliError> {
        Ok(ModelConfig {
            d_in: self.usize_key("model.d_in")?,
            d: self.usize_key("model.d")?,
            variant: self.parse_as("model.variant", "protonet, pgnn, ignn, hgnn, or labelprop", Variant::parse)?,
            adapter: self.bool_key("model.adapter")?,
            operator: self.parse_as(
                "model.operator",
                "inner_product, concat_mlp, or subtract_mlp",
                OperatorKind::parse,
            )?,
            depth: self.usize_key("model.depth")?,
            slope: self.f64_key("model.slope")?,
            ln_eps: self.f64_key("model.ln_eps")?,
            distance: self.parse_as("model.distance", "squared or euclidean", DistanceKind::parse)?,
            consistency: self.parse_as("model.consistency", "none, l1, mse, or kl", Consistency::parse)?,
            baseline_layers: self.usize_key("model.baseline_layers")?,
            baseline_n_way: self.usize_key("model.baseline_n_way")?,
        })
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        Ok(TrainConfig {
            epochs: self.usize_key("train.epochs")?,
            episodes_per_epoch: self.usize_key("train.episodes_per_epoch")?,
            n_way: self.usize_key("train.n_way")?,
            k_shot: self.usize_key("train.k_shot")?,
            q_queries: self.usize_key("train.q_queries")?,
            optimizer: self.optimizer()?,
            lr_embedding: self.f64_key("train.lr_embedding")?,
            lr_gnn: self.f64_key("train.lr_gnn")?,
            lr_halve_every: self.usize_key("train.lr_halve_every")?,
            seed: self.u64_key("train.seed")?,
            mode: self.mode("train.mode")?,
            val_tasks_per_epoch: self.usize_key("train.val_tasks")?,
        })
    }

    pub fn eval(&self) -> Result<EvalConfig, CliError> {
        Ok(EvalConfig {
            n_tasks: self.usize_key("eval.n_tasks")?,
            n_way: self.usize_key("eval.n_way")?,
            k_shot: self.usize_key("eval.k_shot")?,
            q_queries: self.usize_key("eval.q_queries")?,
            seed: self.u64_key("eval.seed")?,
            mode: self.mode("eval.mode")?,
            split: self.split("eval.split")?,
            parallel: self.bool_key("eval.parallel")?,
        })
    }

    pub fn proj_split(&self) -> Result<Split, CliError> {
        self.split("proj.split")
    }

    pub fn grids(&self) -> Result<Vec<AblationGrid>, CliError> {
        let raw = self.get("ablate.grids");
        let mut grids = Vec::new();
        for token in raw.split(',') {
            let token = token.trim();
            grids.push(match token {
                "variants" => AblationGrid::Variants,
                "consistency" => AblationGrid::ConsistencyLosses,
                "depths" => AblationGrid::Depths,
                _ => {
                    return Err(CliError::Config(format!(
                        "key ablate.grids: expected variants, consistency, or depths, got '{token}'"
                    )))
                }
            });
        }
        Ok(grids)
    }
}
