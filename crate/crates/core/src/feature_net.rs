//! Per-point feature embedding: four edge-convolution stages over a static
//! Euclidean neighbor graph, stage outputs concatenated and mapped through
//! two per-point layers.
//!
//! Each stage builds edge features [f_i, f_j - f_i] for the k neighbors j
//! of every point i, applies a shared linear map + batch norm + leaky ReLU,
//! and max-pools over the neighbors. The forward pass records a tape, so
//! exact reverse-mode gradients of any scalar built on the output features
//! are available.

use std::fmt;
use std::rc::Rc;

use crate::autodiff::{BatchStats, Gradients, Tape, VarId};
use crate::geometry::{knn_euclidean, GeometryError, PointCloud};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphMode {
    /// Neighborhoods fixed from input coordinates (the default).
    StaticEuclidean,
    /// Neighborhoods recomputed per stage from current features.
    DynamicLatent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub edge_widths: Vec<usize>,
    pub knn_k: usize,
    pub leaky_slope: f64,
    pub head_widths: Vec<usize>,
    pub out_dim: usize,
    pub graph_mode: GraphMode,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            edge_widths: vec![96, 192, 384, 768],
            knn_k: 27,
            leaky_slope: 0.2,
            head_widths: vec![1044, 512],
            out_dim: 512,
            graph_mode: GraphMode::StaticEuclidean,
        }
    }
}

impl NetworkConfig {
    pub fn concat_width(&self) -> usize {
        self.edge_widths.iter().sum()
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.edge_widths.is_empty() || self.head_widths.len() != 2 {
            return Err(NetError::InvalidConfig(
                "expected edge stage widths and exactly 2 head widths".into(),
            ));
        }
        if self.edge_widths.iter().any(|&w| w == 0) || self.head_widths.iter().any(|&w| w == 0) {
            return Err(NetError::InvalidConfig("zero layer width".into()));
        }
        if self.out_dim != self.head_widths[1] {
            return Err(NetError::InvalidConfig(format!(
                "out_dim {} must equal the last head width {}",
                self.out_dim, self.head_widths[1]
            )));
        }
        if self.knn_k == 0 {
            return Err(NetError::InvalidConfig("knn_k must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(NetError::InvalidConfig("leaky slope out of range".into()));
        }
        Ok(())
    }

    /// Shrunken configuration for gradient checks and fast tests.
    pub fn tiny() -> Self {
        NetworkConfig {
            edge_widths: vec![4, 4, 4, 4],
            knn_k: 3,
            leaky_slope: 0.2,
            head_widths: vec![8, 4],
            out_dim: 4,
            graph_mode: GraphMode::StaticEuclidean,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        BatchNorm {
            scale: Tensor::from_vec(1, width, vec![1.0; width]),
            shift: Tensor::zeros(1, width),
            running_mean: Tensor::zeros(1, width),
            running_var: Tensor::from_vec(1, width, vec![1.0; width]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub bn: BatchNorm,
}

/// All trainable tensors plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub config: NetworkConfig,
    pub seed: u64,
    pub edge_layers: Vec<Layer>,
    pub head_layers: Vec<Layer>,
}

#[derive(Debug)]
pub enum NetError {
    InvalidConfig(String),
    CloudTooSmall { n: usize, need: usize },
    NonFinite(String),
    Geometry(GeometryError),
}

impl fmt::Display for NetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NetError::InvalidConfig(m) => write!(f, "invalid network config: {m}"),
            NetError::CloudTooSmall { n, need } => {
                write!(f, "cloud has {n} points, the graph needs at least {need}")
            }
            NetError::NonFinite(m) => write!(f, "non-finite values in {m}"),
            NetError::Geometry(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for NetError {}

impl From<GeometryError> for NetError {
    fn from(e: GeometryError) -> Self {
        NetError::Geometry(e)
    }
}

/// n x c feature rows aligned with the cloud's point order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureField {
    pub features: Tensor,
}

impl FeatureField {
    pub fn n(&self) -> usize {
        self.features.rows
    }

    pub fn dim(&self) -> usize {
        self.features.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }
}

fn layer_dims(config: &NetworkConfig) -> Vec<(String, usize, usize)> {
    let mut dims = Vec::new();
    let mut in_width = 3;
    for (s, &w) in config.edge_widths.iter().enumerate() {
        dims.push((format!("edge{s}"), 2 * in_width, w));
        in_width = w;
    }
    dims.push(("head0".into(), config.concat_width(), config.head_widths[0]));
    dims.push(("head1".into(), config.head_widths[0], config.head_widths[1]));
    dims
}

/// Deterministic initialization: fan-in-scaled uniform weights, zero
/// biases, identity batch norm.
pub fn init_params(config: &NetworkConfig, seed: u64) -> Result<NetworkParams, NetError> {
    config.validate()?;
    let mut rng = Rng::from_seed(seed);
    let slope = config.leaky_slope;
    let mut make_layer = |fan_in: usize, fan_out: usize| {
        let bound = (6.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
        let weight = Tensor::from_vec(
            fan_in,
            fan_out,
            (0..fan_in * fan_out)
                .map(|_| rng.uniform(-bound, bound))
                .collect(),
        );
        Layer {
            weight,
            bias: Tensor::zeros(1, fan_out),
            bn: BatchNorm::new(fan_out),
        }
    };
    let mut edge_layers = Vec::new();
    let mut head_layers = Vec::new();
    for (name, fan_in, fan_out) in layer_dims(config) {
        let layer = make_layer(fan_in, fan_out);
        if name.starts_with("edge") {
            edge_layers.push(layer);
        } else {
            head_layers.push(layer);
        }
    }
    Ok(NetworkParams {
        config: config.clone(),
        seed,
        edge_layers,
        head_layers,
    })
}

impl NetworkParams {
    fn layers(&self) -> impl Iterator<Item = (String, &Layer)> {
        self.edge_layers
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("edge{i}"), l))
            .chain(
                self.head_layers
                    .iter()
                    .enumerate()
                    .map(|(i, l)| (format!("head{i}"), l)),
            )
    }

    /// Visits trainable tensors in a fixed order shared by the optimizer,
    /// checkpoints, and gradient containers.
    pub fn for_each_trainable(&self, mut f: impl FnMut(&str, &Tensor)) {
        for (name, layer) in self.layers() {
            f(&format!("{name}.weight"), &layer.weight);
            f(&format!("{name}.bias"), &layer.bias);
            f(&format!("{name}.bn.scale"), &layer.bn.scale);
            f(&format!("{name}.bn.shift"), &layer.bn.shift);
        }
    }

    pub fn for_each_trainable_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        let mut visit = |name: String, layer: &mut Layer| {
            f(&format!("{name}.weight"), &mut layer.weight);
            f(&format!("{name}.bias"), &mut layer.bias);
            f(&format!("{name}.bn.scale"), &mut layer.bn.scale);
            f(&format!("{name}.bn.shift"), &mut layer.bn.shift);
        };
        for (i, layer) in self.edge_layers.iter_mut().enumerate() {
            visit(format!("edge{i}"), layer);
        }
        for (i, layer) in self.head_layers.iter_mut().enumerate() {
            visit(format!("head{i}"), layer);
        }
    }

    /// All tensors including running statistics (checkpoint payload).
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &Tensor)) {
        for (name, layer) in self.layers() {
            f(&format!("{name}.weight"), &layer.weight);
            f(&format!("{name}.bias"), &layer.bias);
            f(&format!("{name}.bn.scale"), &layer.bn.scale);
            f(&format!("{name}.bn.shift"), &layer.bn.shift);
            f(&format!("{name}.bn.running_mean"), &layer.bn.running_mean);
            f(&format!("{name}.bn.running_var"), &layer.bn.running_var);
        }
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        let mut visit = |name: String, layer: &mut Layer| {
            f(&format!("{name}.weight"), &mut layer.weight);
            f(&format!("{name}.bias"), &mut layer.bias);
            f(&format!("{name}.bn.scale"), &mut layer.bn.scale);
            f(&format!("{name}.bn.shift"), &mut layer.bn.shift);
            f(
                &format!("{name}.bn.running_mean"),
                &mut layer.bn.running_mean,
            );
            f(&format!("{name}.bn.running_var"), &mut layer.bn.running_var);
        };
        for (i, layer) in self.edge_layers.iter_mut().enumerate() {
            visit(format!("edge{i}"), layer);
        }
        for (i, layer) in self.head_layers.iter_mut().enumerate() {
            visit(format!("head{i}"), layer);
        }
    }

    pub fn trainable_count(&self) -> usize {
        let mut count = 0;
        self.for_each_trainable(|_, t| count += t.len());
        count
    }
}

/// Gradients for every trainable tensor, in visit order.
#[derive(Clone, Debug)]
pub struct NetworkGrads {
    pub entries: Vec<(String, Tensor)>,
}

impl NetworkGrads {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// A recorded forward pass over one or more clouds stacked row-wise.
/// Batch norm in train mode spans all points of all clouds in the stack.
pub struct ForwardPass {
    pub tape: Tape,
    stacked_features: VarId,
    cloud_features: Vec<VarId>,
    param_nodes: Vec<(String, VarId)>,
    bn_stats: Vec<(String, BatchStats)>,
    sizes: Vec<usize>,
}

impl ForwardPass {
    pub fn cloud_feature_node(&self, cloud: usize) -> VarId {
        self.cloud_features[cloud]
    }

    pub fn features(&self, cloud: usize) -> &Tensor {
        self.tape.value(self.cloud_features[cloud])
    }

    pub fn num_clouds(&self) -> usize {
        self.cloud_features.len()
    }

    /// Batch statistics recorded by train-mode batch norm, keyed by layer.
    pub fn bn_stats(&self) -> &[(String, BatchStats)] {
        &self.bn_stats
    }

    /// Collects gradients of every trainable parameter from a finished
    /// backward pass (zeros where the loss did not reach a parameter).
    pub fn parameter_grads(&self, grads: &mut Gradients) -> NetworkGrads {
        let entries = self
            .param_nodes
            .iter()
            .map(|(name, id)| {
                let v = self.tape.value(*id);
                let g = grads
                    .take(*id)
                    .unwrap_or_else(|| Tensor::zeros(v.rows, v.cols));
                (name.clone(), g)
            })
            .collect();
        NetworkGrads { entries }
    }

    /// Reverse pass seeded with upstream gradients over each cloud's
    /// feature field. Neighbor-index selection is a constant of the pass.
    pub fn backward_features(&mut self, upstreams: &[Tensor]) -> Result<NetworkGrads, NetError> {
        assert_eq!(upstreams.len(), self.cloud_features.len());
        let stacked = self.tape.value(self.stacked_features);
        let cols = stacked.cols;
        let mut seed = Tensor::zeros(stacked.rows, cols);
        let mut row = 0;
        for (up, &n) in upstreams.iter().zip(self.sizes.iter()) {
            if up.rows != n || up.cols != cols {
                return Err(NetError::InvalidConfig(format!(
                    "upstream gradient shape {}x{} does not match features {}x{}",
                    up.rows, up.cols, n, cols
                )));
            }
            for i in 0..n {
                seed.row_mut(row + i).copy_from_slice(up.row(i));
            }
            row += n;
        }
        let mut grads = self.tape.backward_seeded(self.stacked_features, seed);
        Ok(self.parameter_grads(&mut grads))
    }
}

/// Brute-force kNN over feature rows (dynamic-latent graphs). Ties break
/// toward the lower index; self is excluded.
fn knn_rows(features: &Tensor, start: usize, n: usize, k: usize) -> Vec<u32> {
    let mut out = vec![0u32; n * k];
    for i in 0..n {
        let fi = features.row(start + i);
        let mut cands: Vec<(f64, u32)> = Vec::with_capacity(n - 1);
        for j in 0..n {
            if j == i {
                continue;
            }
            let fj = features.row(start + j);
            let mut d2 = 0.0;
            for c in 0..fi.len() {
                let d = fi[c] - fj[c];
                d2 += d * d;
            }
            cands.push((d2, (start + j) as u32));
        }
        cands.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (slot, cand) in out[i * k..(i + 1) * k].iter_mut().zip(cands.iter()) {
            *slot = cand.1;
        }
    }
    out
}

/// Records the full embedding computation for a stack of clouds.
pub fn forward_batch(
    params: &NetworkParams,
    clouds: &[&PointCloud],
    mode: Mode,
) -> Result<ForwardPass, NetError> {
    let config = &params.config;
    config.validate()?;
    assert!(!clouds.is_empty());
    let k = config.knn_k;
    for pc in clouds {
        if pc.len() < k + 1 {
            return Err(NetError::CloudTooSmall {
                n: pc.len(),
                need: k + 1,
            });
        }
    }

    let sizes: Vec<usize> = clouds.iter().map(|pc| pc.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut offsets = Vec::with_capacity(clouds.len());
    let mut acc = 0;
    for &n in &sizes {
        offsets.push(acc);
        acc += n;
    }

    // static Euclidean graph, indices offset into the stacked rows
    let mut static_idx = Vec::with_capacity(total * k);
    for (pc, &off) in clouds.iter().zip(offsets.iter()) {
        let graph = knn_euclidean(pc, k, true)?;
        static_idx.extend(graph.flat().iter().map(|&j| j + off as u32));
    }
    let static_idx = Rc::new(static_idx);

    let mut coords = Tensor::zeros(total, 3);
    {
        let mut row = 0;
        for pc in clouds {
            for p in &pc.points {
                coords.row_mut(row).copy_from_slice(p);
                row += 1;
            }
        }
    }

    let mut tape = Tape::new();
    let mut param_nodes = Vec::new();
    let mut bn_stats: Vec<(String, BatchStats)> = Vec::new();

    struct LayerVars {
        weight: VarId,
        bias: VarId,
        scale: VarId,
        shift: VarId,
    }
    let register = |tape: &mut Tape, nodes: &mut Vec<(String, VarId)>, name: &str, l: &Layer| {
        let weight = tape.leaf(l.weight.clone());
        let bias = tape.leaf(l.bias.clone());
        let scale = tape.leaf(l.bn.scale.clone());
        let shift = tape.leaf(l.bn.shift.clone());
        nodes.push((format!("{name}.weight"), weight));
        nodes.push((format!("{name}.bias"), bias));
        nodes.push((format!("{name}.bn.scale"), scale));
        nodes.push((format!("{name}.bn.shift"), shift));
        LayerVars {
            weight,
            bias,
            scale,
            shift,
        }
    };

    let edge_vars: Vec<LayerVars> = params
        .edge_layers
        .iter()
        .enumerate()
        .map(|(i, l)| register(&mut tape, &mut param_nodes, &format!("edge{i}"), l))
        .collect();
    let head_vars: Vec<LayerVars> = params
        .head_layers
        .iter()
        .enumerate()
        .map(|(i, l)| register(&mut tape, &mut param_nodes, &format!("head{i}"), l))
        .collect();

    let coords_node = tape.leaf(coords);

    let apply_norm_act = |tape: &mut Tape,
                          bn_stats: &mut Vec<(String, BatchStats)>,
                          name: &str,
                          x: VarId,
                          vars: &LayerVars,
                          layer: &Layer|
     -> VarId {
        let normed = match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(x, vars.scale, vars.shift, BN_EPS);
                bn_stats.push((name.to_string(), stats));
                y
            }
            Mode::Eval => tape.batch_norm_eval(
                x,
                vars.scale,
                vars.shift,
                &layer.bn.running_mean,
                &layer.bn.running_var,
                BN_EPS,
            ),
        };
        tape.leaky_relu(normed, config.leaky_slope)
    };

    let mut current = coords_node;
    let mut stage_outputs = Vec::with_capacity(config.edge_widths.len());
    for (s, (vars, layer)) in edge_vars.iter().zip(params.edge_layers.iter()).enumerate() {
        let idx = match config.graph_mode {
            GraphMode::StaticEuclidean => static_idx.clone(),
            GraphMode::DynamicLatent => {
                if s == 0 {
                    static_idx.clone()
                } else {
                    let feats = tape.value(current);
                    let mut idx = Vec::with_capacity(total * k);
                    for (&off, &n) in offsets.iter().zip(sizes.iter()) {
                        idx.extend(knn_rows(feats, off, n, k));
                    }
                    Rc::new(idx)
                }
            }
        };
        let lin = tape.edge_conv_linear(current, vars.weight, vars.bias, idx, k);
        let act = apply_norm_act(
            &mut tape,
            &mut bn_stats,
            &format!("edge{s}"),
            lin,
            vars,
            layer,
        );
        let pooled = tape.max_pool_neighbors(act, k);
        stage_outputs.push(pooled);
        current = pooled;
    }

    let concat = tape.concat_cols(&stage_outputs);
    let mut head = concat;
    for (i, (vars, layer)) in head_vars.iter().zip(params.head_layers.iter()).enumerate() {
        let lin = tape.matmul_bias(head, vars.weight, vars.bias);
        head = apply_norm_act(
            &mut tape,
            &mut bn_stats,
            &format!("head{i}"),
            lin,
            vars,
            layer,
        );
    }

    if !tape.value(head).all_finite() {
        return Err(NetError::NonFinite("embedding output".into()));
    }

    let cloud_features = offsets
        .iter()
        .zip(sizes.iter())
        .map(|(&off, &n)| tape.slice_rows(head, off, n))
        .collect();

    Ok(ForwardPass {
        tape,
        stacked_features: head,
        cloud_features,
        param_nodes,
        bn_stats,
        sizes,
    })
}

/// Embeds a single cloud and returns the plain feature field. Does not
/// mutate running statistics; the trainer commits them explicitly.
pub fn embed(
    params: &NetworkParams,
    pc: &PointCloud,
    mode: Mode,
) -> Result<FeatureField, NetError> {
    let pass = forward_batch(params, &[pc], mode)?;
    let features = pass.features(0).clone();
    if mode == Mode::Train {
        for i in 0..features.rows {
            let norm = crate::tensor::dot(features.row(i), features.row(i)).sqrt();
            if norm <= 1e-12 {
                return Err(NetError::NonFinite(format!(
                    "feature row {i} has zero norm"
                )));
            }
        }
    }
    Ok(FeatureField { features })
}

/// Updates running batch-norm statistics from recorded batch statistics.
pub fn commit_bn_stats(params: &mut NetworkParams, stats: &[(String, BatchStats)]) {
    for (name, s) in stats {
        let layer = if let Some(rest) = name.strip_prefix("edge") {
            let i: usize = rest.parse().expect("layer index");
            &mut params.edge_layers[i]
        } else if let Some(rest) = name.strip_prefix("head") {
            let i: usize = rest.parse().expect("layer index");
            &mut params.head_layers[i]
        } else {
            panic!("unknown bn layer {name}");
        };
        let m = s.rows as f64;
        let unbias = if s.rows > 1 { m / (m - 1.0) } else { 1.0 };
        for c in 0..layer.bn.running_mean.cols {
            let rm = &mut layer.bn.running_mean.data[c];
            *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * s.mean.data[c];
            let rv = &mut layer.bn.running_var.data[c];
            *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * s.var_biased.data[c] * unbias;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_cloud(rng: &mut Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| [rng.normal(), rng.normal(), rng.normal()])
                .collect(),
            "t",
        )
    }

    #[test]
    fn init_is_deterministic_and_shaped_per_config() {
        let config = NetworkConfig::default();
        let a = init_params(&config, 3).unwrap();
        let b = init_params(&config, 3).unwrap();
        assert_eq!(a, b);
        // first edge layer maps 2*3-dim edge features to 96 channels
        assert_eq!(a.edge_layers[0].weight.rows, 6);
        assert_eq!(a.edge_layers[0].weight.cols, 96);
        // head input width is the concatenation 96+192+384+768
        assert_eq!(a.head_layers[0].weight.rows, 1440);
        assert_eq!(config.concat_width(), 1440);
        assert_eq!(a.head_layers[1].weight.cols, 512);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut config = NetworkConfig::default();
        config.out_dim = 100;
        assert!(matches!(
            init_params(&config, 0),
            Err(NetError::InvalidConfig(_))
        ));
    }

    #[test]
    fn embed_full_default_config_shape() {
        // 1024 x 3 in, 1024 x 512 out with the default architecture
        let params = init_params(&NetworkConfig::default(), 0).unwrap();
        let mut rng = Rng::from_seed(39);
        let pc = random_cloud(&mut rng, 1024);
        let f = embed(&params, &pc, Mode::Eval).unwrap();
        assert_eq!(f.n(), 1024);
        assert_eq!(f.dim(), 512);
    }

    #[test]
    fn embed_output_shape_tiny() {
        let config = NetworkConfig::tiny();
        let params = init_params(&config, 1).unwrap();
        let mut rng = Rng::from_seed(40);
        let pc = random_cloud(&mut rng, 16);
        let f = embed(&params, &pc, Mode::Eval).unwrap();
        assert_eq!(f.n(), 16);
        assert_eq!(f.dim(), 4);
    }

    #[test]
    fn cloud_too_small_for_graph() {
        let config = NetworkConfig::tiny();
        let params = init_params(&config, 1).unwrap();
        let mut rng = Rng::from_seed(41);
        let pc = random_cloud(&mut rng, 3);
        assert!(matches!(
            embed(&params, &pc, Mode::Eval),
            Err(NetError::CloudTooSmall { .. })
        ));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let config = NetworkConfig::tiny();
        let params = init_params(&config, 2).unwrap();
        let mut rng = Rng::from_seed(42);
        let pc = random_cloud(&mut rng, 20);
        let a = embed(&params, &pc, Mode::Eval).unwrap();
        let b = embed(&params, &pc, Mode::Eval).unwrap();
        assert_eq!(a.features.data, b.features.data);
    }

    #[test]
    fn permutation_equivariance_exact() {
        let config = NetworkConfig::tiny();
        let params = init_params(&config, 5).unwrap();
        let mut rng = Rng::from_seed(43);
        let pc = random_cloud(&mut rng, 24);
        let perm = rng.permutation(24);
        let permuted = PointCloud::new(perm.iter().map(|&i| pc.points[i]).collect(), "perm");
        let f = embed(&params, &pc, Mode::Eval).unwrap();
        let fp = embed(&params, &permuted, Mode::Eval).unwrap();
        for (out_row, &src) in perm.iter().enumerate() {
            assert_eq!(
                fp.features.row(out_row),
                f.features.row(src),
                "row {out_row} differs"
            );
        }
    }

    #[test]
    fn eval_independent_of_batch_composition() {
        let config = NetworkConfig::tiny();
        let params = init_params(&config, 6).unwrap();
        let mut rng = Rng::from_seed(44);
        let a = random_cloud(&mut rng, 16);
        let b = random_cloud(&mut rng, 16);
        let solo = forward_batch(&params, &[&a], Mode::Eval).unwrap();
        let pair = forward_batch(&params, &[&a, &b], Mode::Eval).unwrap();
        assert_eq!(solo.features(0).data, pair.features(0).data);
    }

    #[test]
    fn train_mode_depends_on_batch_composition() {
        let config = NetworkConfig::tiny();
        let params = init_params(&config, 6).unwrap();
        let mut rng = Rng::from_seed(45);
        let a = random_cloud(&mut rng, 16);
        let b = random_cloud(&mut rng, 16);
        let solo = forward_batch(&params, &[&a], Mode::Train).unwrap();
        let pair = forward_batch(&params, &[&a, &b], Mode::Train).unwrap();
        assert_ne!(solo.features(0).data, pair.features(0).data);
    }

    #[test]
    fn zero_upstream_zero_param_grads() {
        let config = NetworkConfig::tiny();
        let params = init_params(&config, 7).unwrap();
        let mut rng = Rng::from_seed(46);
        let pc = random_cloud(&mut rng, 16);
        let mut pass = forward_batch(&params, &[&pc], Mode::Train).unwrap();
        let zero = Tensor::zeros(16, 4);
        let grads = pass.backward_features(&[zero]).unwrap();
        for (name, g) in &grads.entries {
            assert!(g.data.iter().all(|&v| v == 0.0), "{name} nonzero");
        }
    }

    #[test]
    fn param_gradients_match_finite_differences() {
        // d/dparam of sum(F .* W) for a fixed random W, train mode
        let config = NetworkConfig::tiny();
        let params = init_params(&config, 8).unwrap();
        let mut rng = Rng::from_seed(47);
        let pc = random_cloud(&mut rng, 12);
        let w: Vec<f64> = (0..12 * 4).map(|_| rng.uniform(-1.0, 1.0)).collect();

        let loss_of = |p: &NetworkParams| -> f64 {
            let pass = forward_batch(p, &[&pc], Mode::Train).unwrap();
            crate::tensor::dot(&pass.features(0).data, &w)
        };

        let mut pass = forward_batch(&params, &[&pc], Mode::Train).unwrap();
        let upstream = Tensor::from_vec(12, 4, w.clone());
        let grads = pass.backward_features(&[upstream]).unwrap();

        // spot-check a couple of entries in every parameter tensor
        let mut checked = 0;
        let mut names = Vec::new();
        params.for_each_trainable(|name, _| names.push(name.to_string()));
        for name in names {
            let analytic = grads.get(&name).unwrap().clone();
            for &i in &[0usize, analytic.len() / 2] {
                let step = 1e-5;
                let mut plus = params.clone();
                plus.for_each_trainable_mut(|n, t| {
                    if n == name {
                        t.data[i] += step;
                    }
                });
                let mut minus = params.clone();
                minus.for_each_trainable_mut(|n, t| {
                    if n == name {
                        t.data[i] -= step;
                    }
                });
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * step);
                let a = analytic.data[i];
                let denom = a.abs().max(fd.abs()).max(1.0);
                assert!(
                    (a - fd).abs() / denom < 1e-4,
                    "{name}[{i}]: analytic {a}, fd {fd}"
                );
                checked += 1;
            }
        }
        assert!(checked >= 24);
    }

    #[test]
    fn dynamic_latent_mode_runs_and_differs() {
        let static_cfg = NetworkConfig::tiny();
        let mut dyn_cfg = NetworkConfig::tiny();
        dyn_cfg.graph_mode = GraphMode::DynamicLatent;
        let p_static = init_params(&static_cfg, 9).unwrap();
        let mut p_dyn = p_static.clone();
        p_dyn.config = dyn_cfg;
        let mut rng = Rng::from_seed(48);
        let pc = random_cloud(&mut rng, 20);
        let a = embed(&p_static, &pc, Mode::Eval).unwrap();
        let b = embed(&p_dyn, &pc, Mode::Eval).unwrap();
        assert_ne!(a.features.data, b.features.data);
    }

    #[test]
    fn commit_bn_stats_moves_running_averages() {
        let config = NetworkConfig::tiny();
        let mut params = init_params(&config, 10).unwrap();
        let mut rng = Rng::from_seed(49);
        let pc = random_cloud(&mut rng, 16);
        let pass = forward_batch(&params, &[&pc], Mode::Train).unwrap();
        let before = params.edge_layers[0].bn.running_mean.clone();
        commit_bn_stats(&mut params, pass.bn_stats());
        assert_ne!(params.edge_layers[0].bn.running_mean.data, before.data);
    }
}
