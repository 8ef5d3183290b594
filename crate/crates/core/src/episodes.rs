//! Feature pools and episodic sampling. A pool holds precomputed embedding
//! vectors grouped into classes; episodes draw N classes, K supports and Q
//! queries per class. The synthetic generator plants Gaussian clusters with
//! controlled outliers and a configurable pair of overlapping classes per
//! split, so the failure modes the graph heads target are present by
//! construction and labeled in the episode provenance.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone)]
pub struct FeatureRecord {
    pub class_id: usize,
    pub feature: Vec<f64>,
    /// True when the generator displaced this record; loaded files carry no
    /// flags, so there it is always false.
    pub outlier: bool,
}

/// A pool of feature vectors with class-to-split assignments.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    dim: usize,
    records: Vec<FeatureRecord>,
    split_of: HashMap<usize, Split>,
    by_class: HashMap<usize, Vec<usize>>,
}

impl FeatureStore {
    pub fn from_records(
        dim: usize,
        records: Vec<FeatureRecord>,
        split_of: HashMap<usize, Split>,
    ) -> Result<FeatureStore> {
        let mut by_class: HashMap<usize, Vec<usize>> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.feature.len() != dim {
                return Err(Error::Contract(format!(
                    "record {} has dim {}, store wants {}",
                    i,
                    r.feature.len(),
                    dim
                )));
            }
            if !split_of.contains_key(&r.class_id) {
                return Err(Error::Contract(format!(
                    "record {} has class {} with no split assignment",
                    i, r.class_id
                )));
            }
            by_class.entry(r.class_id).or_default().push(i);
        }
        Ok(FeatureStore {
            dim,
            records,
            split_of,
            by_class,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn n_records(&self) -> usize {
        self.records.len()
    }

    /// Class ids of a split, ascending.
    pub fn classes_in(&self, split: Split) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .split_of
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(c, _)| *c)
            .collect();
        v.sort_unstable();
        v
    }

    pub fn split_of_class(&self, class_id: usize) -> Option<Split> {
        self.split_of.get(&class_id).copied()
    }

    /// Record indices of one class, in insertion order.
    pub fn records_of_class(&self, class_id: usize) -> &[usize] {
        self.by_class.get(&class_id).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn has_outlier_flags(&self) -> bool {
        self.records.iter().any(|r| r.outlier)
    }

    /// Reassign class splits. Every listed class must exist and appear only
    /// once. An empty test split is allowed but reported as a warning.
    pub fn split_meta(&self, assignment: &[(usize, Split)]) -> Result<(FeatureStore, Vec<String>)> {
        let mut seen = HashMap::new();
        for (class, split) in assignment {
            if seen.insert(*class, *split).is_some() {
                return Err(Error::Contract(format!(
                    "split_meta: class {} assigned more than once",
                    class
                )));
            }
            if !self.split_of.contains_key(class) {
                return Err(Error::Contract(format!(
                    "split_meta: class {} is not in the store",
                    class
                )));
            }
        }
        let mut split_of = self.split_of.clone();
        for (class, split) in assignment {
            split_of.insert(*class, *split);
        }
        let store = FeatureStore {
            dim: self.dim,
            records: self.records.clone(),
            split_of,
            by_class: self.by_class.clone(),
        };
        let mut warnings = Vec::new();
        if store.classes_in(Split::Test).is_empty() {
            warnings.push("test split is empty; evaluation will fail until classes are assigned".to_string());
        }
        Ok((store, warnings))
    }

    /// Draw one N-way K-shot episode with Q queries per class from `split`.
    /// Class order and record choice come from `rng`; supports and queries
    /// are laid out class-major.
    pub fn sample_episode<R: Rng>(
        &self,
        n_way: usize,
        k_shot: usize,
        q_queries: usize,
        split: Split,
        rng: &mut R,
    ) -> Result<Episode> {
        if n_way < 2 || k_shot == 0 || q_queries == 0 {
            return Err(Error::Sampling(format!(
                "episode needs n >= 2, k >= 1, q >= 1; got n={} k={} q={}",
                n_way, k_shot, q_queries
            )));
        }
        let classes = self.classes_in(split);
        if classes.len() < n_way {
            return Err(Error::Sampling(format!(
                "{} split has {} classes, episode wants {}",
                split,
                classes.len(),
                n_way
            )));
        }
        let picked = rand::seq::index::sample(rng, classes.len(), n_way);
        let mut class_ids = Vec::with_capacity(n_way);
        let mut support = Vec::with_capacity(n_way * k_shot * self.dim);
        let mut support_labels = Vec::with_capacity(n_way * k_shot);
        let mut queries = Vec::with_capacity(n_way * q_queries * self.dim);
        let mut query_labels = Vec::with_capacity(n_way * q_queries);
        let mut support_records = Vec::new();
        let mut query_records = Vec::new();
        let mut support_outlier = Vec::new();
        let mut query_outlier = Vec::new();

        for (label, ci) in picked.iter().enumerate() {
            let class_id = classes[ci];
            class_ids.push(class_id);
            let recs = self.records_of_class(class_id);
            if recs.len() < k_shot + q_queries {
                return Err(Error::Sampling(format!(
                    "class {} has {} records, episode wants {}",
                    class_id,
                    recs.len(),
                    k_shot + q_queries
                )));
            }
            let chosen = rand::seq::index::sample(rng, recs.len(), k_shot + q_queries);
            for (slot, ri) in chosen.iter().enumerate() {
                let rec_idx = recs[ri];
                let rec = &self.records[rec_idx];
                if slot < k_shot {
                    support.extend_from_slice(&rec.feature);
                    support_labels.push(label);
                    support_records.push(rec_idx);
                    support_outlier.push(rec.outlier);
                } else {
                    queries.extend_from_slice(&rec.feature);
                    query_labels.push(label);
                    query_records.push(rec_idx);
                    query_outlier.push(rec.outlier);
                }
            }
        }

        Ok(Episode {
            n_way,
            k_shot,
            q_queries,
            dim: self.dim,
            support,
            support_labels,
            queries,
            query_labels,
            provenance: EpisodeProvenance {
                class_ids,
                support_records,
                query_records,
                support_outlier,
                query_outlier,
            },
        })
    }
}

/// Where each episode element came from, for diagnostics.
#[derive(Debug, Clone, Default)]
pub struct EpisodeProvenance {
    /// Episode label -> original class id.
    pub class_ids: Vec<usize>,
    pub support_records: Vec<usize>,
    pub query_records: Vec<usize>,
    pub support_outlier: Vec<bool>,
    pub query_outlier: Vec<bool>,
}

/// One N-way K-shot task. Features are row-major and class-major: the
/// supports of episode class 0 come first, then class 1, and so on;
/// likewise for queries.
#[derive(Debug, Clone)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    pub dim: usize,
    /// [n_way * k_shot, dim]
    pub support: Vec<f64>,
    pub support_labels: Vec<usize>,
    /// [n_way * q_queries, dim]
    pub queries: Vec<f64>,
    pub query_labels: Vec<usize>,
    pub provenance: EpisodeProvenance,
}

impl Episode {
    /// Hand-built episode, mainly for tests and oracles.
    pub fn from_parts(
        n_way: usize,
        k_shot: usize,
        q_queries: usize,
        dim: usize,
        support: Vec<f64>,
        support_labels: Vec<usize>,
        queries: Vec<f64>,
        query_labels: Vec<usize>,
    ) -> Result<Episode> {
        if support.len() != n_way * k_shot * dim
            || queries.len() != n_way * q_queries * dim
            || support_labels.len() != n_way * k_shot
            || query_labels.len() != n_way * q_queries
        {
            return Err(Error::Contract("from_parts: inconsistent sizes".into()));
        }
        let n_s = support_labels.len();
        let n_q = query_labels.len();
        Ok(Episode {
            n_way,
            k_shot,
            q_queries,
            dim,
            support,
            support_labels,
            queries,
            query_labels,
            provenance: EpisodeProvenance {
                class_ids: (0..n_way).collect(),
                support_records: vec![0; n_s],
                query_records: vec![0; n_q],
                support_outlier: vec![false; n_s],
                query_outlier: vec![false; n_q],
            },
        })
    }

    pub fn n_support(&self) -> usize {
        self.n_way * self.k_shot
    }

    pub fn n_query(&self) -> usize {
        self.n_way * self.q_queries
    }
}

/// Geometry of the synthetic pool.
#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub dim: usize,
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    pub records_per_class: usize,
    /// Within-class standard deviation per dimension.
    pub intra_std: f64,
    /// Side length of the centered hypercube the class means are drawn from.
    pub inter_scale: f64,
    /// Probability that a record is displaced into an outlier.
    pub outlier_rate: f64,
    /// Displacement multiplier for outliers.
    pub outlier_scale: f64,
    /// Pairs of classes per split whose means are pulled together.
    pub overlap_pairs: usize,
    /// Final distance between the means of an overlapping pair.
    pub overlap_dist: f64,
}

/// Defaults tuned so raw prototypes are mediocre on the test split: dense
/// class packing plus one near-coincident pair keeps classes confusable,
/// and far-flung outliers corrupt a noticeable share of supports. That
/// leaves the graph heads measurable headroom.
impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 42,
            dim: 16,
            train_classes: 64,
            val_classes: 16,
            test_classes: 20,
            records_per_class: 60,
            intra_std: 1.2,
            inter_scale: 3.5,
            outlier_rate: 0.15,
            outlier_scale: 5.0,
            overlap_pairs: 1,
            overlap_dist: 1.0,
        }
    }
}

/// Build a pool of Gaussian class clusters.
///
/// Per split, class means are drawn uniformly from the centered hypercube;
/// then each overlap pair (consecutive classes from the front of the split)
/// has both means pulled symmetrically toward their midpoint until they are
/// `overlap_dist` apart. Records add N(0, intra_std^2) noise per dimension;
/// with probability `outlier_rate` the noise vector is stretched by
/// `outlier_scale` and the record is flagged. The draw order is fixed
/// (splits in train/val/test order; all means, then all records), so one
/// seed always yields bit-identical pools.
pub fn generate_synthetic_pool(cfg: &SyntheticConfig) -> Result<FeatureStore> {
    if cfg.dim == 0 || cfg.records_per_class == 0 {
        return Err(Error::InvalidConfig("synthetic pool needs dim >= 1 and records_per_class >= 1".into()));
    }
    if cfg.train_classes + cfg.val_classes + cfg.test_classes == 0 {
        return Err(Error::InvalidConfig("synthetic pool has no classes".into()));
    }
    if !(0.0..=1.0).contains(&cfg.outlier_rate) {
        return Err(Error::InvalidConfig(format!(
            "outlier_rate must be in [0, 1], got {}",
            cfg.outlier_rate
        )));
    }
    if cfg.intra_std < 0.0 || cfg.inter_scale < 0.0 || cfg.outlier_scale < 0.0 || cfg.overlap_dist < 0.0 {
        return Err(Error::InvalidConfig("negative scale in synthetic config".into()));
    }
    let split_sizes = [
        (Split::Train, cfg.train_classes),
        (Split::Val, cfg.val_classes),
        (Split::Test, cfg.test_classes),
    ];
    for (split, size) in split_sizes {
        if size > 0 && 2 * cfg.overlap_pairs > size {
            return Err(Error::InvalidConfig(format!(
                "{} split has {} classes, too few for {} overlap pairs",
                split, size, cfg.overlap_pairs
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::new();
    let mut split_of = HashMap::new();
    let mut next_class = 0usize;
    let half = cfg.inter_scale / 2.0;

    for (split, size) in split_sizes {
        let mut means = Vec::with_capacity(size);
        for _ in 0..size {
            let mean: Vec<f64> = (0..cfg.dim).map(|_| rng.random_range(-half..=half)).collect();
            means.push(mean);
        }
        for p in 0..cfg.overlap_pairs {
            if 2 * p + 1 >= size {
                break;
            }
            let (a, b) = (2 * p, 2 * p + 1);
            let mid: Vec<f64> = (0..cfg.dim).map(|j| (means[a][j] + means[b][j]) / 2.0).collect();
            let diff: Vec<f64> = (0..cfg.dim).map(|j| means[b][j] - means[a][j]).collect();
            let norm = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dir: Vec<f64> = if norm > 1e-12 {
                diff.iter().map(|x| x / norm).collect()
            } else {
                let mut e = vec![0.0; cfg.dim];
                e[0] = 1.0;
                e
            };
            for j in 0..cfg.dim {
                means[a][j] = mid[j] - dir[j] * cfg.overlap_dist / 2.0;
                means[b][j] = mid[j] + dir[j] * cfg.overlap_dist / 2.0;
            }
        }
        for mean in &means {
            let class_id = next_class;
            next_class += 1;
            split_of.insert(class_id, split);
            for _ in 0..cfg.records_per_class {
                let mut dev: Vec<f64> = (0..cfg.dim)
                    .map(|_| {
                        let z: f64 = rng.sample(StandardNormal);
                        z * cfg.intra_std
                    })
                    .collect();
                let outlier = rng.random::<f64>() < cfg.outlier_rate;
                if outlier {
                    for d in dev.iter_mut() {
                        *d *= cfg.outlier_scale;
                    }
                }
                let feature: Vec<f64> = mean.iter().zip(&dev).map(|(m, d)| m + d).collect();
                records.push(FeatureRecord {
                    class_id,
                    feature,
                    outlier,
                });
            }
        }
    }
    FeatureStore::from_records(cfg.dim, records, split_of)
}

/// Serialize a store in the line format `load_feature_file` reads. Floats
/// print in shortest round-trip form, so write-read-write is stable.
pub fn feature_file_string(store: &FeatureStore) -> String {
    let mut out = String::new();
    out.push_str(&format!("#dim={}\n", store.dim()));
    for rec in store.records() {
        let split = store
            .split_of_class(rec.class_id)
            .expect("store invariant: every record's class has a split");
        out.push_str(&format!("{},{}", split, rec.class_id));
        for v in &rec.feature {
            out.push_str(&format!(",{}", v));
        }
        out.push('\n');
    }
    out
}

pub fn save_feature_file(store: &FeatureStore, path: &Path) -> Result<()> {
    std::fs::write(path, feature_file_string(store))?;
    Ok(())
}

/// Parse the pinned feature format: line 1 `#dim=<d>`, then one record per
/// line as `<split>,<class_id>,<v_0>,...,<v_{d-1}>`. Later lines starting
/// with `#` are comments. Outlier flags are not part of the format.
pub fn parse_feature_file(text: &str) -> Result<FeatureStore> {
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        detail: "empty file".into(),
    })?;
    let dim: usize = first
        .strip_prefix("#dim=")
        .and_then(|d| d.trim().parse().ok())
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::Parse {
            line: 1,
            detail: format!("expected '#dim=<d>', got '{}'", first),
        })?;

    let mut records = Vec::new();
    let mut split_of: HashMap<usize, Split> = HashMap::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split(',');
        let split_str = parts.next().unwrap_or("");
        let split = Split::parse(split_str).ok_or_else(|| Error::Parse {
            line: line_no,
            detail: format!("unknown split '{}'", split_str),
        })?;
        let class_id: usize = parts
            .next()
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| Error::Parse {
                line: line_no,
                detail: "missing or invalid class id".into(),
            })?;
        let mut feature = Vec::with_capacity(dim);
        for p in parts {
            let v: f64 = p.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                detail: format!("invalid float '{}'", p),
            })?;
            feature.push(v);
        }
        if feature.len() != dim {
            return Err(Error::Parse {
                line: line_no,
                detail: format!("expected {} values, got {}", dim, feature.len()),
            });
        }
        match split_of.get(&class_id) {
            Some(s) if *s != split => {
                return Err(Error::Parse {
                    line: line_no,
                    detail: format!("class {} appears in both {} and {}", class_id, s, split),
                });
            }
            _ => {
                split_of.insert(class_id, split);
            }
        }
        records.push(FeatureRecord {
            class_id,
            feature,
            outlier: false,
        });
    }
    FeatureStore::from_records(dim, records, split_of)
}

pub fn load_feature_file(path: &Path) -> Result<FeatureStore> {
    let text = std::fs::read_to_string(path)?;
    parse_feature_file(&text)
}
