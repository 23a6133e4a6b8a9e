//! Unsupervised training loop: random pair sampling, Adam with decoupled
//! weight decay and a step learning-rate schedule, per-step CSV logging,
//! and checkpointing that restores the full optimization state.
//!
//! The trainer sees point coordinates only. Ground-truth correspondence
//! never enters this code path.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::affinity::SimilarityMode;
use crate::feature_net::{
    commit_bn_stats, forward_batch, init_params, GraphMode, Mode, NetError, NetworkConfig,
    NetworkGrads, NetworkParams,
};
use crate::geometry::{load_auto, normalize, sample_points, GeometryError, PointCloud};
use crate::losses::{build_pair_losses, LossBreakdown, LossError, LossWeights};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const NORMALIZATION_CONVENTION: &str = "centroid-unit-radius-v1";
const CHECKPOINT_MAGIC: &[u8; 8] = b"PCCKPT01";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairingMode {
    AnyPair,
    WithinCategory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub epochs: usize,
    pub seed: u64,
    pub n_points: usize,
    pub checkpoint_every: usize,
    pub loss: LossWeights,
    pub network: NetworkConfig,
    pub similarity: SimilarityMode,
    pub k_cc_full: bool,
    pub pairing: PairingMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            learning_rate: 0.0003,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0005,
            lr_drop_epochs: vec![6, 9],
            lr_drop_factor: 0.1,
            epochs: 300,
            seed: 0,
            n_points: 1024,
            checkpoint_every: 0,
            loss: LossWeights::default(),
            network: NetworkConfig::default(),
            similarity: SimilarityMode::Cosine,
            k_cc_full: false,
            pairing: PairingMode::AnyPair,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate <= 0.0 {
            return Err(TrainError::Config("learning_rate must be > 0".into()));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return Err(TrainError::Config(
                "lr_drop_factor must be in (0, 1]".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        self.network
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        self.loss
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }

    /// Effective learning rate at a 1-based epoch: the base rate times the
    /// drop factor once per schedule entry already passed.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&d| epoch >= d).count();
        self.learning_rate * self.lr_drop_factor.powi(drops as i32)
    }

    /// Loss weights with the k_cc = n ablation applied.
    pub fn effective_loss_weights(&self, n: usize) -> LossWeights {
        let mut w = self.loss.clone();
        if self.k_cc_full {
            w.k_cc = n;
        }
        w
    }

    // -- plain-text key=value form --------------------------------------

    pub fn valid_keys() -> &'static [&'static str] {
        &[
            "batch_size",
            "learning_rate",
            "beta1",
            "beta2",
            "adam_eps",
            "weight_decay",
            "lr_drop_epochs",
            "lr_drop_factor",
            "epochs",
            "seed",
            "n_points",
            "checkpoint_every",
            "lambda_cc",
            "lambda_sc",
            "lambda_m",
            "alpha",
            "k_cc",
            "k_sc",
            "k_m",
            "k_cc_full",
            "similarity",
            "graph_mode",
            "pairing",
            "edge_widths",
            "head_widths",
            "knn_k",
            "leaky_slope",
            "out_dim",
        ]
    }

    pub fn to_key_values(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "batch_size={}\nlearning_rate={}\nbeta1={}\nbeta2={}\nadam_eps={}\nweight_decay={}\nlr_drop_epochs={}\nlr_drop_factor={}\nepochs={}\nseed={}\nn_points={}\ncheckpoint_every={}\nlambda_cc={}\nlambda_sc={}\nlambda_m={}\nalpha={}\nk_cc={}\nk_sc={}\nk_m={}\nk_cc_full={}\nsimilarity={}\ngraph_mode={}\npairing={}\nedge_widths={}\nhead_widths={}\nknn_k={}\nleaky_slope={}\nout_dim={}\n",
            self.batch_size,
            self.learning_rate,
            self.beta1,
            self.beta2,
            self.adam_eps,
            self.weight_decay,
            list(&self.lr_drop_epochs),
            self.lr_drop_factor,
            self.epochs,
            self.seed,
            self.n_points,
            self.checkpoint_every,
            self.loss.lambda_cc,
            self.loss.lambda_sc,
            self.loss.lambda_m,
            self.loss.alpha,
            self.loss.k_cc,
            self.loss.k_sc,
            self.loss.k_m,
            self.k_cc_full,
            match self.similarity {
                SimilarityMode::Cosine => "cosine",
                SimilarityMode::Dot => "dot",
            },
            match self.network.graph_mode {
                GraphMode::StaticEuclidean => "static",
                GraphMode::DynamicLatent => "dynamic",
            },
            match self.pairing {
                PairingMode::AnyPair => "any",
                PairingMode::WithinCategory => "within-category",
            },
            list(&self.network.edge_widths),
            list(&self.network.head_widths),
            self.network.knn_k,
            self.network.leaky_slope,
            self.network.out_dim,
        )
    }

    pub fn apply_key_value(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
            value
                .parse()
                .map_err(|_| TrainError::Config(format!("cannot parse '{value}' for key '{key}'")))
        }
        fn num_list(key: &str, value: &str) -> Result<Vec<usize>, TrainError> {
            if value.trim().is_empty() {
                return Ok(vec![]);
            }
            value
                .split(',')
                .map(|t| {
                    t.trim().parse().map_err(|_| {
                        TrainError::Config(format!("cannot parse '{t}' in list for '{key}'"))
                    })
                })
                .collect()
        }
        match key {
            "batch_size" => self.batch_size = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "lr_drop_epochs" => self.lr_drop_epochs = num_list(key, value)?,
            "lr_drop_factor" => self.lr_drop_factor = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "n_points" => self.n_points = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "lambda_cc" => self.loss.lambda_cc = num(key, value)?,
            "lambda_sc" => self.loss.lambda_sc = num(key, value)?,
            "lambda_m" => self.loss.lambda_m = num(key, value)?,
            "alpha" => self.loss.alpha = num(key, value)?,
            "k_cc" => self.loss.k_cc = num(key, value)?,
            "k_sc" => self.loss.k_sc = num(key, value)?,
            "k_m" => self.loss.k_m = num(key, value)?,
            "k_cc_full" => self.k_cc_full = num(key, value)?,
            "similarity" => {
                self.similarity = match value {
                    "cosine" => SimilarityMode::Cosine,
                    "dot" => SimilarityMode::Dot,
                    other => {
                        return Err(TrainError::Config(format!(
                            "similarity must be 'cosine' or 'dot', got '{other}'"
                        )))
                    }
                }
            }
            "graph_mode" => {
                self.network.graph_mode = match value {
                    "static" => GraphMode::StaticEuclidean,
                    "dynamic" => GraphMode::DynamicLatent,
                    other => {
                        return Err(TrainError::Config(format!(
                            "graph_mode must be 'static' or 'dynamic', got '{other}'"
                        )))
                    }
                }
            }
            "pairing" => {
                self.pairing = match value {
                    "any" => PairingMode::AnyPair,
                    "within-category" => PairingMode::WithinCategory,
                    other => {
                        return Err(TrainError::Config(format!(
                            "pairing must be 'any' or 'within-category', got '{other}'"
                        )))
                    }
                }
            }
            "edge_widths" => self.network.edge_widths = num_list(key, value)?,
            "head_widths" => {
                self.network.head_widths = num_list(key, value)?;
                if let Some(&last) = self.network.head_widths.last() {
                    self.network.out_dim = last;
                }
            }
            "knn_k" => self.network.knn_k = num(key, value)?,
            "leaky_slope" => self.network.leaky_slope = num(key, value)?,
            "out_dim" => self.network.out_dim = num(key, value)?,
            other => {
                return Err(TrainError::UnknownKey {
                    key: other.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Parses "key=value" lines ('#' comments and blank lines ignored)
    /// over the defaults.
    pub fn from_key_values(text: &str) -> Result<TrainConfig, TrainError> {
        let mut cfg = TrainConfig::default();
        for raw in text.lines() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("expected key=value, got '{line}'")))?;
            cfg.apply_key_value(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Debug)]
pub enum TrainError {
    Config(String),
    UnknownKey { key: String },
    Data(String),
    Geometry(GeometryError),
    Net(NetError),
    Loss(LossError),
    NonFiniteLoss { pairs: Vec<String> },
    Io(String, std::io::Error),
    Corrupt(String),
    VersionMismatch { found: u32 },
    ShapeMismatch(String),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Config(m) => write!(f, "invalid configuration: {m}"),
            TrainError::UnknownKey { key } => write!(
                f,
                "unknown configuration key '{key}'; valid keys: {}",
                TrainConfig::valid_keys().join(", ")
            ),
            TrainError::Data(m) => write!(f, "data error: {m}"),
            TrainError::Geometry(e) => write!(f, "{e}"),
            TrainError::Net(e) => write!(f, "{e}"),
            TrainError::Loss(e) => write!(f, "{e}"),
            TrainError::NonFiniteLoss { pairs } => {
                write!(f, "non-finite loss on pairs: {}", pairs.join(", "))
            }
            TrainError::Io(path, e) => write!(f, "{path}: {e}"),
            TrainError::Corrupt(m) => write!(f, "corrupt checkpoint: {m}"),
            TrainError::VersionMismatch { found } => {
                write!(f, "checkpoint version {found} is not supported")
            }
            TrainError::ShapeMismatch(m) => write!(f, "checkpoint shape mismatch: {m}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<GeometryError> for TrainError {
    fn from(e: GeometryError) -> Self {
        TrainError::Geometry(e)
    }
}

impl From<NetError> for TrainError {
    fn from(e: NetError) -> Self {
        TrainError::Net(e)
    }
}

impl From<LossError> for TrainError {
    fn from(e: LossError) -> Self {
        TrainError::Loss(e)
    }
}

// ---------------------------------------------------------------------------
// dataset

/// Training clouds with optional category labels. Pairing never crosses
/// category labels in within-category mode.
#[derive(Clone, Debug)]
pub struct PairDataset {
    pub clouds: Vec<PointCloud>,
    pub categories: Option<Vec<String>>,
    pub pairing: PairingMode,
}

impl PairDataset {
    pub fn new(
        clouds: Vec<PointCloud>,
        categories: Option<Vec<String>>,
        pairing: PairingMode,
    ) -> Result<Self, TrainError> {
        if let Some(cats) = &categories {
            if cats.len() != clouds.len() {
                return Err(TrainError::Data(format!(
                    "{} category labels for {} clouds",
                    cats.len(),
                    clouds.len()
                )));
            }
        }
        if pairing == PairingMode::WithinCategory && categories.is_none() {
            return Err(TrainError::Data(
                "within-category pairing requires category labels".into(),
            ));
        }
        Ok(PairDataset {
            clouds,
            categories,
            pairing,
        })
    }

    /// Loads every point-cloud file under `dir` (sorted for determinism).
    /// Files inside an immediate subdirectory take the subdirectory name
    /// as their category.
    pub fn from_dir(dir: &Path, pairing: PairingMode) -> Result<Self, TrainError> {
        let mut files: Vec<(Option<String>, PathBuf)> = Vec::new();
        let rd = fs::read_dir(dir).map_err(|e| TrainError::Io(dir.display().to_string(), e))?;
        let mut entries: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).collect();
        entries.sort();
        for entry in entries {
            if entry.is_dir() {
                let cat = entry
                    .file_name()
                    .and_then(|s| s.to_str())
                    .unwrap_or("unknown")
                    .to_string();
                let mut subs: Vec<PathBuf> = fs::read_dir(&entry)
                    .map_err(|e| TrainError::Io(entry.display().to_string(), e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .collect();
                subs.sort();
                for sub in subs {
                    if crate::geometry::FileFormat::from_path(&sub).is_some() {
                        files.push((Some(cat.clone()), sub));
                    }
                }
            } else if crate::geometry::FileFormat::from_path(&entry).is_some() {
                // ground-truth index files and manifests share the .txt
                // suffix; skip them
                let stem = entry.file_stem().and_then(|s| s.to_str()).unwrap_or("");
                if stem.ends_with("_gt") || stem == "manifest" {
                    continue;
                }
                files.push((None, entry));
            }
        }
        if files.is_empty() {
            return Err(TrainError::Data(format!(
                "no point-cloud files found under {}",
                dir.display()
            )));
        }
        let mut clouds = Vec::with_capacity(files.len());
        let mut cats = Vec::with_capacity(files.len());
        let mut any_cat = false;
        for (cat, path) in files {
            clouds.push(load_auto(&path)?);
            any_cat |= cat.is_some();
            cats.push(cat.unwrap_or_default());
        }
        PairDataset::new(clouds, any_cat.then_some(cats), pairing)
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }
}

/// Uniformly random (source, target) index pairs with source != target,
/// honoring the pairing mode. Deterministic given the generator state.
pub fn next_batch(
    ds: &PairDataset,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<(usize, usize)>, TrainError> {
    if ds.len() < 2 {
        return Err(TrainError::Data(
            "pair sampling needs at least 2 clouds".into(),
        ));
    }
    let mut pairs = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let source = rng.below(ds.len());
        let target = match ds.pairing {
            PairingMode::AnyPair => loop {
                let t = rng.below(ds.len());
                if t != source {
                    break t;
                }
            },
            PairingMode::WithinCategory => {
                let cats = ds.categories.as_ref().expect("validated in new()");
                let candidates: Vec<usize> = (0..ds.len())
                    .filter(|&j| j != source && cats[j] == cats[source])
                    .collect();
                if candidates.is_empty() {
                    return Err(TrainError::Data(format!(
                        "category '{}' has no partner cloud",
                        cats[source]
                    )));
                }
                candidates[rng.below(candidates.len())]
            }
        };
        pairs.push((source, target));
    }
    Ok(pairs)
}

// ---------------------------------------------------------------------------
// optimizer

/// Adam moment estimates aligned with the trainable-tensor visit order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<(String, Tensor)>,
    pub v: Vec<(String, Tensor)>,
}

impl AdamState {
    pub fn new(params: &NetworkParams) -> Self {
        let mut m = Vec::new();
        params.for_each_trainable(|name, t| {
            m.push((name.to_string(), Tensor::zeros(t.rows, t.cols)));
        });
        AdamState {
            t: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One Adam update with decoupled weight decay (applied directly to the
/// parameters, not through the gradient).
pub fn adam_step(
    params: &mut NetworkParams,
    state: &mut AdamState,
    grads: &NetworkGrads,
    lr: f64,
    cfg: &TrainConfig,
) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let mut slot = 0;
    params.for_each_trainable_mut(|name, w| {
        let (gname, g) = &grads.entries[slot];
        debug_assert_eq!(gname, name);
        let (mname, m) = &mut state.m[slot];
        debug_assert_eq!(mname, name);
        let (_, v) = &mut state.v[slot];
        for i in 0..w.len() {
            let gi = g.data[i];
            m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi;
            v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m.data[i] / bc1;
            let vhat = v.data[i] / bc2;
            w.data[i] -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
            w.data[i] -= lr * cfg.weight_decay * w.data[i];
        }
        slot += 1;
    });
}

// ---------------------------------------------------------------------------
// training

/// Forward both clouds of every pair (batch norm spans the whole stack),
/// average the pair objectives, and apply one Adam update. Returns the
/// mean loss breakdown of the batch.
pub fn train_step(
    params: &mut NetworkParams,
    opt: &mut AdamState,
    pairs: &[(&PointCloud, &PointCloud)],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<LossBreakdown, TrainError> {
    assert!(!pairs.is_empty());
    let mut clouds: Vec<&PointCloud> = Vec::with_capacity(pairs.len() * 2);
    for (x, y) in pairs {
        clouds.push(x);
        clouds.push(y);
    }
    let mut pass = forward_batch(params, &clouds, Mode::Train)?;

    let mut totals = Vec::with_capacity(pairs.len());
    let mut mean = LossBreakdown::default();
    let mut bad_pairs = Vec::new();
    for (p, (x, y)) in pairs.iter().enumerate() {
        let w = cfg.effective_loss_weights(x.len().min(y.len()));
        let fx = pass.cloud_feature_node(2 * p);
        let fy = pass.cloud_feature_node(2 * p + 1);
        let nodes = build_pair_losses(&mut pass.tape, fx, fy, x, y, &w, cfg.similarity)?;
        let b = nodes.breakdown(&pass.tape);
        if !b.is_finite() {
            bad_pairs.push(format!("({}, {})", x.id, y.id));
        }
        mean.cc_target += b.cc_target;
        mean.cc_source += b.cc_source;
        mean.sc_source += b.sc_source;
        mean.sc_target += b.sc_target;
        mean.map_source += b.map_source;
        mean.map_target += b.map_target;
        mean.total += b.total;
        totals.push(nodes.total);
    }
    if !bad_pairs.is_empty() {
        return Err(TrainError::NonFiniteLoss { pairs: bad_pairs });
    }
    let inv_b = 1.0 / pairs.len() as f64;
    mean.cc_target *= inv_b;
    mean.cc_source *= inv_b;
    mean.sc_source *= inv_b;
    mean.sc_target *= inv_b;
    mean.map_source *= inv_b;
    mean.map_target *= inv_b;
    mean.total *= inv_b;

    let weighted: Vec<(crate::autodiff::VarId, f64)> =
        totals.iter().map(|&id| (id, inv_b)).collect();
    let batch_total = pass.tape.weighted_sum(&weighted);
    let mut grads = pass.tape.backward(batch_total);
    let net_grads = pass.parameter_grads(&mut grads);

    adam_step(params, opt, &net_grads, lr, cfg);
    commit_bn_stats(params, pass.bn_stats());
    Ok(mean)
}

pub fn loss_csv_header() -> &'static str {
    "step,cc_target,cc_source,sc_source,sc_target,map_source,map_target,total,lr"
}

pub fn loss_csv_row(step: u64, b: &LossBreakdown, lr: f64) -> String {
    format!(
        "{step},{},{},{},{},{},{},{},{lr}",
        b.cc_target, b.cc_source, b.sc_source, b.sc_target, b.map_source, b.map_target, b.total
    )
}

/// Everything needed to resume training exactly where it stopped.
pub struct Checkpoint {
    pub params: NetworkParams,
    pub opt: Option<AdamState>,
    pub rng_state: Option<[u64; 4]>,
    pub next_epoch: usize,
    pub global_step: u64,
    pub config: TrainConfig,
}

/// Normalizes every cloud, samples it down to `n_points`, and errors on
/// clouds that are too small.
pub fn prepare_clouds(ds: &PairDataset, cfg: &TrainConfig) -> Result<Vec<PointCloud>, TrainError> {
    let mut out = Vec::with_capacity(ds.len());
    for (i, pc) in ds.clouds.iter().enumerate() {
        if pc.len() < cfg.n_points {
            return Err(TrainError::Data(format!(
                "cloud '{}' has {} points, n_points = {}",
                pc.id,
                pc.len(),
                cfg.n_points
            )));
        }
        let sampled = if pc.len() > cfg.n_points {
            sample_points(pc, cfg.n_points, cfg.seed ^ (i as u64).wrapping_mul(0x9E37))?
        } else {
            pc.clone()
        };
        out.push(normalize(&sampled));
    }
    Ok(out)
}

/// Runs the full schedule and returns the final checkpoint path. Writes
/// `loss_log.csv` plus periodic and final checkpoints under `out_dir`.
pub fn fit(ds: &PairDataset, cfg: &TrainConfig, out_dir: &Path) -> Result<PathBuf, TrainError> {
    fit_inner(ds, cfg, out_dir, None)
}

/// Continues a run from a checkpoint written by `fit` with the same
/// config and dataset.
pub fn fit_resume(
    ds: &PairDataset,
    cfg: &TrainConfig,
    out_dir: &Path,
    checkpoint: &Path,
) -> Result<PathBuf, TrainError> {
    let ckpt = load_checkpoint(checkpoint)?;
    fit_inner(ds, cfg, out_dir, Some(ckpt))
}

fn fit_inner(
    ds: &PairDataset,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<Checkpoint>,
) -> Result<PathBuf, TrainError> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| TrainError::Io(out_dir.display().to_string(), e))?;
    let clouds = prepare_clouds(ds, cfg)?;
    let prepared = PairDataset {
        clouds,
        categories: ds.categories.clone(),
        pairing: ds.pairing,
    };

    let steps_per_epoch = prepared.len().div_ceil(cfg.batch_size);
    let (mut params, mut opt, mut rng, start_epoch, mut global_step) = match resume {
        Some(ckpt) => {
            let rng = Rng::from_state(
                ckpt.rng_state
                    .ok_or_else(|| TrainError::Corrupt("checkpoint lacks rng state".into()))?,
            );
            let opt = ckpt
                .opt
                .ok_or_else(|| TrainError::Corrupt("checkpoint lacks optimizer state".into()))?;
            (ckpt.params, opt, rng, ckpt.next_epoch, ckpt.global_step)
        }
        None => {
            let params = init_params(&cfg.network, cfg.seed)?;
            let opt = AdamState::new(&params);
            let rng = Rng::from_seed(cfg.seed).derive(0xBA7C);
            (params, opt, rng, 1, 0)
        }
    };

    let log_path = out_dir.join("loss_log.csv");
    let mut log = if start_epoch == 1 {
        let mut f = fs::File::create(&log_path)
            .map_err(|e| TrainError::Io(log_path.display().to_string(), e))?;
        writeln!(f, "{}", loss_csv_header())
            .map_err(|e| TrainError::Io(log_path.display().to_string(), e))?;
        f
    } else {
        fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(&log_path)
            .map_err(|e| TrainError::Io(log_path.display().to_string(), e))?
    };

    for epoch in start_epoch..=cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        for _ in 0..steps_per_epoch {
            let batch = next_batch(&prepared, cfg.batch_size, &mut rng)?;
            let pairs: Vec<(&PointCloud, &PointCloud)> = batch
                .iter()
                .map(|&(s, t)| (&prepared.clouds[s], &prepared.clouds[t]))
                .collect();
            let mean = train_step(&mut params, &mut opt, &pairs, lr, cfg)?;
            global_step += 1;
            writeln!(log, "{}", loss_csv_row(global_step, &mean, lr))
                .map_err(|e| TrainError::Io(log_path.display().to_string(), e))?;
        }
        let epoch_done = Checkpoint {
            params: params.clone(),
            opt: Some(opt.clone()),
            rng_state: Some(rng.state()),
            next_epoch: epoch + 1,
            global_step,
            config: cfg.clone(),
        };
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch < cfg.epochs {
            save_checkpoint(
                &epoch_done,
                &out_dir.join(format!("checkpoint_epoch{epoch}.ckpt")),
            )?;
        }
        if epoch == cfg.epochs {
            let final_path = out_dir.join("checkpoint_final.ckpt");
            save_checkpoint(&epoch_done, &final_path)?;
            return Ok(final_path);
        }
    }
    unreachable!("epochs >= 1 guarantees the final checkpoint returns");
}

// ---------------------------------------------------------------------------
// checkpoint serialization

fn write_tensor_section(out: &mut Vec<u8>, tensors: &[(String, Tensor)]) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(bytes);
        out.extend_from_slice(&(t.rows as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols as u32).to_le_bytes());
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.pos + n > self.data.len() {
            return Err(TrainError::Corrupt("unexpected end of file".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, TrainError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, TrainError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> Result<String, TrainError> {
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| TrainError::Corrupt("invalid utf-8 in checkpoint".into()))
    }

    fn tensor_section(&mut self) -> Result<Vec<(String, Tensor)>, TrainError> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = self.u16()? as usize;
            let name = self.string(name_len)?;
            let rows = self.u32()? as usize;
            let cols = self.u32()? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(self.f64()?);
            }
            out.push((name, Tensor::from_vec(rows, cols, data)));
        }
        Ok(out)
    }
}

/// Atomic write (temp file + rename) of the versioned checkpoint.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let conv = NORMALIZATION_CONVENTION.as_bytes();
    out.extend_from_slice(&(conv.len() as u16).to_le_bytes());
    out.extend_from_slice(conv);
    let config_text = ckpt.config.to_key_values();
    out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out.extend_from_slice(&ckpt.params.seed.to_le_bytes());

    let mut tensors = Vec::new();
    ckpt.params
        .for_each_tensor(|name, t| tensors.push((name.to_string(), t.clone())));
    write_tensor_section(&mut out, &tensors);

    match &ckpt.opt {
        Some(opt) => {
            out.push(1);
            out.extend_from_slice(&opt.t.to_le_bytes());
            write_tensor_section(&mut out, &opt.m);
            write_tensor_section(&mut out, &opt.v);
        }
        None => out.push(0),
    }
    match &ckpt.rng_state {
        Some(state) => {
            out.push(1);
            for s in state {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
        None => out.push(0),
    }
    out.extend_from_slice(&(ckpt.next_epoch as u64).to_le_bytes());
    out.extend_from_slice(&ckpt.global_step.to_le_bytes());

    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &out).map_err(|e| TrainError::Io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| TrainError::Io(path.display().to_string(), e))?;
    Ok(())
}

/// Loads and validates a checkpoint: magic, version, and the shape of
/// every tensor against the embedded network config.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let mut data = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| TrainError::Io(path.display().to_string(), e))?;
    let mut r = Reader {
        data: &data,
        pos: 0,
    };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(TrainError::Corrupt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::VersionMismatch { found: version });
    }
    let conv_len = r.u16()? as usize;
    let convention = r.string(conv_len)?;
    if convention != NORMALIZATION_CONVENTION {
        return Err(TrainError::Corrupt(format!(
            "unknown normalization convention '{convention}'"
        )));
    }
    let cfg_len = r.u32()? as usize;
    let config_text = r.string(cfg_len)?;
    let config = TrainConfig::from_key_values(&config_text)?;
    let params_seed = r.u64()?;

    let tensors = r.tensor_section()?;
    let mut params = init_params(&config.network, params_seed)?;
    let mut missing = Vec::new();
    params.for_each_tensor_mut(|name, slot| match tensors.iter().find(|(n, _)| n == name) {
        Some((_, t)) => {
            if t.rows == slot.rows && t.cols == slot.cols {
                *slot = t.clone();
            } else {
                missing.push(format!(
                    "{name}: stored {}x{}, config wants {}x{}",
                    t.rows, t.cols, slot.rows, slot.cols
                ));
            }
        }
        None => missing.push(format!("{name}: absent from checkpoint")),
    });
    if !missing.is_empty() {
        return Err(TrainError::ShapeMismatch(missing.join("; ")));
    }

    let opt = if r.take(1)?[0] == 1 {
        let t = r.u64()?;
        let m = r.tensor_section()?;
        let v = r.tensor_section()?;
        let reference = AdamState::new(&params);
        for ((name, got), (want_name, want)) in m.iter().zip(reference.m.iter()) {
            if name != want_name || !got.same_shape(want) {
                return Err(TrainError::ShapeMismatch(format!(
                    "optimizer tensor {name} does not match {want_name}"
                )));
            }
        }
        Some(AdamState { t, m, v })
    } else {
        None
    };
    let rng_state = if r.take(1)?[0] == 1 {
        Some([r.u64()?, r.u64()?, r.u64()?, r.u64()?])
    } else {
        None
    };
    let next_epoch = r.u64()? as usize;
    let global_step = r.u64()?;

    Ok(Checkpoint {
        params,
        opt,
        rng_state,
        next_epoch,
        global_step,
        config,
    })
}
