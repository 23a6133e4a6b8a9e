//! Cross-construction, self-construction, Chamfer distance, the mapping
//! loss, and their weighted combination into the training objective.
//!
//! Every loss exists twice over the same kernels: as a plain function for
//! inference, tests, and oracles, and as a tape program for training. The
//! two produce bit-identical values. Nearest-neighbor and top-k selections
//! are decided at forward time and carry no gradient; `FrozenSelections`
//! lets finite-difference checks re-evaluate the losses with those
//! selections pinned.

use std::fmt;
use std::rc::Rc;

use crate::affinity::{
    normalized_rows, softmax_weights, topk_rows, AffinityError, AffinityMatrix, LatentNeighborhood,
    SimilarityMode,
};
use crate::autodiff::{combine_rows, mapping_value, nearest_rows, Tape, VarId};
use crate::feature_net::FeatureField;
use crate::geometry::{knn_euclidean, squared_distance, GeometryError, PointCloud};
use crate::tensor::{matmul_nt, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_cc: f64,
    pub lambda_sc: f64,
    pub lambda_m: f64,
    pub alpha: f64,
    pub k_cc: usize,
    pub k_sc: usize,
    pub k_m: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cc: 1.0,
            lambda_sc: 10.0,
            lambda_m: 1.0,
            alpha: 8.0,
            k_cc: 10,
            k_sc: 10,
            k_m: 10,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.lambda_cc < 0.0 || self.lambda_sc < 0.0 || self.lambda_m < 0.0 {
            return Err(LossError::InvalidWeights("negative lambda".into()));
        }
        if self.alpha <= 0.0 {
            return Err(LossError::InvalidWeights("alpha must be positive".into()));
        }
        if self.k_cc == 0 || self.k_sc == 0 || self.k_m == 0 {
            return Err(LossError::InvalidWeights(
                "neighborhood sizes must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// The six loss terms of one pair plus their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cc_target: f64,
    pub cc_source: f64,
    pub sc_source: f64,
    pub sc_target: f64,
    pub map_source: f64,
    pub map_target: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [f64; 6] {
        [
            self.cc_target,
            self.cc_source,
            self.sc_source,
            self.sc_target,
            self.map_source,
            self.map_target,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.terms().iter().all(|t| t.is_finite()) && self.total.is_finite()
    }
}

/// Soft-constructed coordinates plus the neighborhood that produced them.
#[derive(Clone, Debug)]
pub struct ConstructionResult {
    pub constructed: Tensor,
    pub neighborhood: LatentNeighborhood,
}

#[derive(Debug)]
pub enum LossError {
    EmptyCloud,
    SizeMismatch(String),
    KTooLarge { k: usize, limit: usize },
    IndexOutOfRange { index: usize, len: usize },
    InvalidWeights(String),
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::EmptyCloud => write!(f, "empty point cloud"),
            LossError::SizeMismatch(m) => write!(f, "size mismatch: {m}"),
            LossError::KTooLarge { k, limit } => {
                write!(f, "k = {k} exceeds the {limit} available neighbors")
            }
            LossError::IndexOutOfRange { index, len } => {
                write!(f, "index {index} out of range for {len} points")
            }
            LossError::InvalidWeights(m) => write!(f, "invalid loss weights: {m}"),
        }
    }
}

impl std::error::Error for LossError {}

impl From<AffinityError> for LossError {
    fn from(e: AffinityError) -> Self {
        match e {
            AffinityError::DimensionMismatch { a, b } => {
                LossError::SizeMismatch(format!("feature dims {a} vs {b}"))
            }
            AffinityError::KTooLarge { k, limit } => LossError::KTooLarge { k, limit },
        }
    }
}

impl From<GeometryError> for LossError {
    fn from(e: GeometryError) -> Self {
        match e {
            GeometryError::KTooLarge { k, limit } => LossError::KTooLarge { k, limit },
            other => LossError::SizeMismatch(other.to_string()),
        }
    }
}

pub fn points_tensor(pc: &PointCloud) -> Tensor {
    let mut t = Tensor::zeros(pc.len(), 3);
    for (i, p) in pc.points.iter().enumerate() {
        t.row_mut(i).copy_from_slice(p);
    }
    t
}

// ---------------------------------------------------------------------------
// plain operations

/// Constructed coordinates: each row a softmax-weighted combination of the
/// target's own points over the latent neighborhood.
pub fn cross_construct(
    nbhd: &LatentNeighborhood,
    target: &PointCloud,
) -> Result<ConstructionResult, LossError> {
    for &j in &nbhd.indices {
        if j as usize >= target.len() {
            return Err(LossError::IndexOutOfRange {
                index: j as usize,
                len: target.len(),
            });
        }
    }
    let constructed = combine_rows(&nbhd.weights, nbhd.n, nbhd.k, &target.points, &nbhd.indices);
    Ok(ConstructionResult {
        constructed,
        neighborhood: nbhd.clone(),
    })
}

/// Each point rebuilt from its k_sc latent neighbors within the same cloud
/// (the diagonal is excluded from the neighborhood).
pub fn self_construct(
    f: &FeatureField,
    x: &PointCloud,
    k_sc: usize,
) -> Result<ConstructionResult, LossError> {
    self_construct_with(SimilarityMode::Cosine, f, x, k_sc)
}

pub fn self_construct_with(
    sim: SimilarityMode,
    f: &FeatureField,
    x: &PointCloud,
    k_sc: usize,
) -> Result<ConstructionResult, LossError> {
    if x.is_empty() {
        return Err(LossError::EmptyCloud);
    }
    if f.n() != x.len() {
        return Err(LossError::SizeMismatch(format!(
            "{} feature rows for {} points",
            f.n(),
            x.len()
        )));
    }
    if k_sc > x.len() - 1 {
        return Err(LossError::KTooLarge {
            k: k_sc,
            limit: x.len() - 1,
        });
    }
    let s = self_affinity(sim, f);
    let idx = topk_rows(&s.s, k_sc, true);
    let nbhd = softmax_weights(&s, &idx, k_sc);
    cross_construct(&nbhd, x)
}

fn self_affinity(sim: SimilarityMode, f: &FeatureField) -> AffinityMatrix {
    let s = match sim {
        SimilarityMode::Cosine => {
            let fh = normalized_rows(&f.features);
            matmul_nt(&fh, &fh)
        }
        SimilarityMode::Dot => matmul_nt(&f.features, &f.features),
    };
    AffinityMatrix {
        s,
        row_source: String::new(),
        col_source: String::new(),
    }
}

/// Symmetric Chamfer distance: mean squared nearest-neighbor distance in
/// both directions.
pub fn chamfer_distance(p: &PointCloud, q: &PointCloud) -> Result<f64, LossError> {
    if p.is_empty() || q.is_empty() {
        return Err(LossError::EmptyCloud);
    }
    let pt = points_tensor(p);
    let qt = points_tensor(q);
    Ok(chamfer_tensors(&pt, &qt).0)
}

fn chamfer_tensors(p: &Tensor, q: &Tensor) -> (f64, Vec<u32>, Vec<u32>) {
    let (nn_pq, sum_pq) = nearest_rows(p, q);
    let (nn_qp, sum_qp) = nearest_rows(q, p);
    (
        sum_pq / p.rows as f64 + sum_qp / q.rows as f64,
        nn_pq,
        nn_qp,
    )
}

/// Chamfer distance between a real cloud and its construction.
pub fn cross_loss(real: &PointCloud, constructed: &ConstructionResult) -> Result<f64, LossError> {
    if real.is_empty() || constructed.constructed.rows == 0 {
        return Err(LossError::EmptyCloud);
    }
    let rt = points_tensor(real);
    Ok(chamfer_tensors(&rt, &constructed.constructed).0)
}

/// Gaussian-weighted squared differences of constructed points over each
/// source point's Euclidean k_m-neighborhood (self excluded).
pub fn mapping_loss(
    x: &PointCloud,
    constructed: &Tensor,
    k_m: usize,
    alpha: f64,
) -> Result<f64, LossError> {
    if x.len() != constructed.rows {
        return Err(LossError::SizeMismatch(format!(
            "{} source points for {} constructed rows",
            x.len(),
            constructed.rows
        )));
    }
    let (idx, v) = mapping_neighborhood(x, k_m, alpha)?;
    Ok(mapping_value(constructed, &idx, &v, k_m))
}

/// Euclidean k_m-neighbor table of the cloud and the proximity weights
/// v_il = exp(-||x_i - x_l||^2 / alpha).
pub fn mapping_neighborhood(
    x: &PointCloud,
    k_m: usize,
    alpha: f64,
) -> Result<(Vec<u32>, Vec<f64>), LossError> {
    let graph = knn_euclidean(x, k_m, true)?;
    let idx = graph.flat().to_vec();
    let mut v = Vec::with_capacity(idx.len());
    for i in 0..x.len() {
        for j in 0..k_m {
            let l = idx[i * k_m + j] as usize;
            v.push((-squared_distance(&x.points[i], &x.points[l]) / alpha).exp());
        }
    }
    Ok((idx, v))
}

/// Intermediate products of one pair's loss evaluation.
pub struct PairLosses {
    pub breakdown: LossBreakdown,
    pub cross_target: ConstructionResult,
    pub cross_source: ConstructionResult,
    pub self_source: ConstructionResult,
    pub self_target: ConstructionResult,
}

/// The full objective for one (source, target) pair from plain feature
/// fields. Cosine similarity unless a mode is given.
pub fn total_loss(
    x: &PointCloud,
    y: &PointCloud,
    fx: &FeatureField,
    fy: &FeatureField,
    w: &LossWeights,
) -> Result<LossBreakdown, LossError> {
    total_loss_with(SimilarityMode::Cosine, x, y, fx, fy, w).map(|p| p.breakdown)
}

pub fn total_loss_with(
    sim: SimilarityMode,
    x: &PointCloud,
    y: &PointCloud,
    fx: &FeatureField,
    fy: &FeatureField,
    w: &LossWeights,
) -> Result<PairLosses, LossError> {
    w.validate()?;
    check_pair(x, y, fx, fy, w)?;

    let (fxh, fyh) = match sim {
        SimilarityMode::Cosine => (normalized_rows(&fx.features), normalized_rows(&fy.features)),
        SimilarityMode::Dot => (fx.features.clone(), fy.features.clone()),
    };
    let s_xy = matmul_nt(&fxh, &fyh);
    let s_yx = matmul_nt(&fyh, &fxh);

    let wrap = |s: Tensor| AffinityMatrix {
        s,
        row_source: String::new(),
        col_source: String::new(),
    };

    let idx_xy = topk_rows(&s_xy, w.k_cc, false);
    let nb_xy = softmax_weights(&wrap(s_xy), &idx_xy, w.k_cc);
    let cross_target = cross_construct(&nb_xy, y)?;

    let idx_yx = topk_rows(&s_yx, w.k_cc, false);
    let nb_yx = softmax_weights(&wrap(s_yx), &idx_yx, w.k_cc);
    let cross_source = cross_construct(&nb_yx, x)?;

    let self_source = self_construct_with(sim, fx, x, w.k_sc)?;
    let self_target = self_construct_with(sim, fy, y, w.k_sc)?;

    let xt = points_tensor(x);
    let yt = points_tensor(y);
    let cc_target = chamfer_tensors(&yt, &cross_target.constructed).0;
    let cc_source = chamfer_tensors(&xt, &cross_source.constructed).0;
    let sc_source = chamfer_tensors(&xt, &self_source.constructed).0;
    let sc_target = chamfer_tensors(&yt, &self_target.constructed).0;

    let (map_idx_x, map_v_x) = mapping_neighborhood(x, w.k_m, w.alpha)?;
    let (map_idx_y, map_v_y) = mapping_neighborhood(y, w.k_m, w.alpha)?;
    let map_source = mapping_value(&cross_target.constructed, &map_idx_x, &map_v_x, w.k_m);
    let map_target = mapping_value(&cross_source.constructed, &map_idx_y, &map_v_y, w.k_m);

    let breakdown = assemble(
        w, cc_target, cc_source, sc_source, sc_target, map_source, map_target,
    );
    Ok(PairLosses {
        breakdown,
        cross_target,
        cross_source,
        self_source,
        self_target,
    })
}

fn check_pair(
    x: &PointCloud,
    y: &PointCloud,
    fx: &FeatureField,
    fy: &FeatureField,
    w: &LossWeights,
) -> Result<(), LossError> {
    if x.is_empty() || y.is_empty() {
        return Err(LossError::EmptyCloud);
    }
    if fx.n() != x.len() || fy.n() != y.len() {
        return Err(LossError::SizeMismatch(format!(
            "features {}x{} vs clouds {} and {}",
            fx.n(),
            fy.n(),
            x.len(),
            y.len()
        )));
    }
    if fx.dim() != fy.dim() {
        return Err(LossError::SizeMismatch(format!(
            "feature dims {} vs {}",
            fx.dim(),
            fy.dim()
        )));
    }
    if w.k_cc > y.len() || w.k_cc > x.len() {
        return Err(LossError::KTooLarge {
            k: w.k_cc,
            limit: y.len().min(x.len()),
        });
    }
    if w.k_sc > x.len() - 1 || w.k_sc > y.len() - 1 {
        return Err(LossError::KTooLarge {
            k: w.k_sc,
            limit: x.len().min(y.len()) - 1,
        });
    }
    if w.k_m > x.len() - 1 || w.k_m > y.len() - 1 {
        return Err(LossError::KTooLarge {
            k: w.k_m,
            limit: x.len().min(y.len()) - 1,
        });
    }
    Ok(())
}

/// Terms of each group are added first, so exchanging source and target
/// (which swaps within the groups) leaves the total bit-identical. The
/// tape path sums in the same order.
fn assemble(
    w: &LossWeights,
    cc_target: f64,
    cc_source: f64,
    sc_source: f64,
    sc_target: f64,
    map_source: f64,
    map_target: f64,
) -> LossBreakdown {
    let total = w.lambda_cc * (cc_target + cc_source)
        + w.lambda_sc * (sc_source + sc_target)
        + w.lambda_m * (map_source + map_target);
    LossBreakdown {
        cc_target,
        cc_source,
        sc_source,
        sc_target,
        map_source,
        map_target,
        total,
    }
}

// ---------------------------------------------------------------------------
// tape construction

/// Tape nodes of the six loss terms and their weighted total.
pub struct PairLossNodes {
    pub cc_target: VarId,
    pub cc_source: VarId,
    pub sc_source: VarId,
    pub sc_target: VarId,
    pub map_source: VarId,
    pub map_target: VarId,
    pub total: VarId,
}

impl PairLossNodes {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            cc_target: tape.value(self.cc_target).item(),
            cc_source: tape.value(self.cc_source).item(),
            sc_source: tape.value(self.sc_source).item(),
            sc_target: tape.value(self.sc_target).item(),
            map_source: tape.value(self.map_source).item(),
            map_target: tape.value(self.map_target).item(),
            total: tape.value(self.total).item(),
        }
    }
}

/// Records the pair objective on the tape, downstream of the two feature
/// nodes. Top-k and nearest-neighbor selections are made from current
/// values and enter the tape as constants.
pub fn build_pair_losses(
    tape: &mut Tape,
    fx_node: VarId,
    fy_node: VarId,
    x: &PointCloud,
    y: &PointCloud,
    w: &LossWeights,
    sim: SimilarityMode,
) -> Result<PairLossNodes, LossError> {
    w.validate()?;
    {
        let fx = FeatureField {
            features: tape.value(fx_node).clone(),
        };
        let fy = FeatureField {
            features: tape.value(fy_node).clone(),
        };
        check_pair(x, y, &fx, &fy, w)?;
    }

    let x_pts = Rc::new(x.points.clone());
    let y_pts = Rc::new(y.points.clone());

    let (fxh, fyh) = match sim {
        SimilarityMode::Cosine => (
            tape.normalize_rows(fx_node, crate::affinity::NORM_EPS),
            tape.normalize_rows(fy_node, crate::affinity::NORM_EPS),
        ),
        SimilarityMode::Dot => (fx_node, fy_node),
    };

    let s_xy = tape.matmul_nt(fxh, fyh);
    let s_yx = tape.matmul_nt(fyh, fxh);
    let s_xx = tape.matmul_nt(fxh, fxh);
    let s_yy = tape.matmul_nt(fyh, fyh);

    let idx_xy = Rc::new(topk_rows(tape.value(s_xy), w.k_cc, false));
    let w_xy = tape.gather_softmax(s_xy, idx_xy.clone(), w.k_cc);
    let yhat_x = tape.combine(w_xy, y_pts.clone(), idx_xy);

    let idx_yx = Rc::new(topk_rows(tape.value(s_yx), w.k_cc, false));
    let w_yx = tape.gather_softmax(s_yx, idx_yx.clone(), w.k_cc);
    let xhat_y = tape.combine(w_yx, x_pts.clone(), idx_yx);

    let idx_xx = Rc::new(topk_rows(tape.value(s_xx), w.k_sc, true));
    let w_xx = tape.gather_softmax(s_xx, idx_xx.clone(), w.k_sc);
    let xhat_x = tape.combine(w_xx, x_pts, idx_xx);

    let idx_yy = Rc::new(topk_rows(tape.value(s_yy), w.k_sc, true));
    let w_yy = tape.gather_softmax(s_yy, idx_yy.clone(), w.k_sc);
    let yhat_y = tape.combine(w_yy, y_pts, idx_yy);

    let x_leaf = tape.leaf(points_tensor(x));
    let y_leaf = tape.leaf(points_tensor(y));

    let cc_target = tape.chamfer(y_leaf, yhat_x);
    let cc_source = tape.chamfer(x_leaf, xhat_y);
    let sc_source = tape.chamfer(x_leaf, xhat_x);
    let sc_target = tape.chamfer(y_leaf, yhat_y);

    let (map_idx_x, map_v_x) = mapping_neighborhood(x, w.k_m, w.alpha)?;
    let (map_idx_y, map_v_y) = mapping_neighborhood(y, w.k_m, w.alpha)?;
    let map_source = tape.mapping_loss(yhat_x, Rc::new(map_idx_x), Rc::new(map_v_x), w.k_m);
    let map_target = tape.mapping_loss(xhat_y, Rc::new(map_idx_y), Rc::new(map_v_y), w.k_m);

    let cc_sum = tape.weighted_sum(&[(cc_target, 1.0), (cc_source, 1.0)]);
    let sc_sum = tape.weighted_sum(&[(sc_source, 1.0), (sc_target, 1.0)]);
    let map_sum = tape.weighted_sum(&[(map_source, 1.0), (map_target, 1.0)]);
    let total = tape.weighted_sum(&[
        (cc_sum, w.lambda_cc),
        (sc_sum, w.lambda_sc),
        (map_sum, w.lambda_m),
    ]);

    Ok(PairLossNodes {
        cc_target,
        cc_source,
        sc_source,
        sc_target,
        map_source,
        map_target,
        total,
    })
}

// ---------------------------------------------------------------------------
// frozen-selection evaluation (finite-difference oracle support)

/// Every discrete selection made during one pair-loss evaluation.
/// Re-evaluating with these pinned makes the objective smooth in the
/// features, which is what the analytic gradients differentiate.
pub struct FrozenSelections {
    pub idx_xy: Vec<u32>,
    pub idx_yx: Vec<u32>,
    pub idx_xx: Vec<u32>,
    pub idx_yy: Vec<u32>,
    pub map_idx_x: Vec<u32>,
    pub map_v_x: Vec<f64>,
    pub map_idx_y: Vec<u32>,
    pub map_v_y: Vec<f64>,
    pub cham_cc_t: (Vec<u32>, Vec<u32>),
    pub cham_cc_s: (Vec<u32>, Vec<u32>),
    pub cham_sc_s: (Vec<u32>, Vec<u32>),
    pub cham_sc_t: (Vec<u32>, Vec<u32>),
}

/// Runs the plain pipeline once and captures all selections.
pub fn capture_selections(
    sim: SimilarityMode,
    x: &PointCloud,
    y: &PointCloud,
    fx: &FeatureField,
    fy: &FeatureField,
    w: &LossWeights,
) -> Result<FrozenSelections, LossError> {
    w.validate()?;
    check_pair(x, y, fx, fy, w)?;
    let (fxh, fyh) = match sim {
        SimilarityMode::Cosine => (normalized_rows(&fx.features), normalized_rows(&fy.features)),
        SimilarityMode::Dot => (fx.features.clone(), fy.features.clone()),
    };
    let s_xy = matmul_nt(&fxh, &fyh);
    let s_yx = matmul_nt(&fyh, &fxh);
    let s_xx = matmul_nt(&fxh, &fxh);
    let s_yy = matmul_nt(&fyh, &fyh);

    let idx_xy = topk_rows(&s_xy, w.k_cc, false);
    let idx_yx = topk_rows(&s_yx, w.k_cc, false);
    let idx_xx = topk_rows(&s_xx, w.k_sc, true);
    let idx_yy = topk_rows(&s_yy, w.k_sc, true);

    let gather = |s: &Tensor, idx: &[u32], k: usize, pts: &[[f64; 3]]| {
        let n = s.rows;
        let mut weights = vec![0.0; n * k];
        for i in 0..n {
            crate::autodiff::softmax_into(
                s.row(i),
                &idx[i * k..(i + 1) * k],
                &mut weights[i * k..(i + 1) * k],
            );
        }
        combine_rows(&weights, n, k, pts, idx)
    };
    let yhat_x = gather(&s_xy, &idx_xy, w.k_cc, &y.points);
    let xhat_y = gather(&s_yx, &idx_yx, w.k_cc, &x.points);
    let xhat_x = gather(&s_xx, &idx_xx, w.k_sc, &x.points);
    let yhat_y = gather(&s_yy, &idx_yy, w.k_sc, &y.points);

    let xt = points_tensor(x);
    let yt = points_tensor(y);
    let cham = |a: &Tensor, b: &Tensor| {
        let (_, nn_ab, nn_ba) = chamfer_tensors(a, b);
        (nn_ab, nn_ba)
    };

    let (map_idx_x, map_v_x) = mapping_neighborhood(x, w.k_m, w.alpha)?;
    let (map_idx_y, map_v_y) = mapping_neighborhood(y, w.k_m, w.alpha)?;

    Ok(FrozenSelections {
        cham_cc_t: cham(&yt, &yhat_x),
        cham_cc_s: cham(&xt, &xhat_y),
        cham_sc_s: cham(&xt, &xhat_x),
        cham_sc_t: cham(&yt, &yhat_y),
        idx_xy,
        idx_yx,
        idx_xx,
        idx_yy,
        map_idx_x,
        map_v_x,
        map_idx_y,
        map_v_y,
    })
}

fn chamfer_frozen(p: &Tensor, q: &Tensor, nn: &(Vec<u32>, Vec<u32>)) -> f64 {
    let mut sum_pq = 0.0;
    for i in 0..p.rows {
        let qr = q.row(nn.0[i] as usize);
        let pr = p.row(i);
        for c in 0..3 {
            let d = pr[c] - qr[c];
            sum_pq += d * d;
        }
    }
    let mut sum_qp = 0.0;
    for j in 0..q.rows {
        let pr = p.row(nn.1[j] as usize);
        let qr = q.row(j);
        for c in 0..3 {
            let d = qr[c] - pr[c];
            sum_qp += d * d;
        }
    }
    sum_pq / p.rows as f64 + sum_qp / q.rows as f64
}

/// The objective with every selection pinned to a previous capture.
pub fn total_loss_frozen(
    sim: SimilarityMode,
    x: &PointCloud,
    y: &PointCloud,
    fx: &FeatureField,
    fy: &FeatureField,
    w: &LossWeights,
    sel: &FrozenSelections,
) -> LossBreakdown {
    let (fxh, fyh) = match sim {
        SimilarityMode::Cosine => (normalized_rows(&fx.features), normalized_rows(&fy.features)),
        SimilarityMode::Dot => (fx.features.clone(), fy.features.clone()),
    };
    let s_xy = matmul_nt(&fxh, &fyh);
    let s_yx = matmul_nt(&fyh, &fxh);
    let s_xx = matmul_nt(&fxh, &fxh);
    let s_yy = matmul_nt(&fyh, &fyh);

    let gather = |s: &Tensor, idx: &[u32], k: usize, pts: &[[f64; 3]]| {
        let n = s.rows;
        let mut weights = vec![0.0; n * k];
        for i in 0..n {
            crate::autodiff::softmax_into(
                s.row(i),
                &idx[i * k..(i + 1) * k],
                &mut weights[i * k..(i + 1) * k],
            );
        }
        combine_rows(&weights, n, k, pts, idx)
    };
    let yhat_x = gather(&s_xy, &sel.idx_xy, w.k_cc, &y.points);
    let xhat_y = gather(&s_yx, &sel.idx_yx, w.k_cc, &x.points);
    let xhat_x = gather(&s_xx, &sel.idx_xx, w.k_sc, &x.points);
    let yhat_y = gather(&s_yy, &sel.idx_yy, w.k_sc, &y.points);

    let xt = points_tensor(x);
    let yt = points_tensor(y);
    let cc_target = chamfer_frozen(&yt, &yhat_x, &sel.cham_cc_t);
    let cc_source = chamfer_frozen(&xt, &xhat_y, &sel.cham_cc_s);
    let sc_source = chamfer_frozen(&xt, &xhat_x, &sel.cham_sc_s);
    let sc_target = chamfer_frozen(&yt, &yhat_y, &sel.cham_sc_t);
    let map_source = mapping_value(&yhat_x, &sel.map_idx_x, &sel.map_v_x, w.k_m);
    let map_target = mapping_value(&xhat_y, &sel.map_idx_y, &sel.map_v_y, w.k_m);

    assemble(
        w, cc_target, cc_source, sc_source, sc_target, map_source, map_target,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn cloud(points: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(points.to_vec(), "t")
    }

    fn random_cloud(rng: &mut Rng, n: usize) -> PointCloud {
        cloud(
            &(0..n)
                .map(|_| [rng.normal(), rng.normal(), rng.normal()])
                .collect::<Vec<_>>(),
        )
    }

    fn random_field(rng: &mut Rng, n: usize, c: usize) -> FeatureField {
        FeatureField {
            features: Tensor::from_vec(n, c, (0..n * c).map(|_| rng.normal()).collect()),
        }
    }

    #[test]
    fn cross_construct_hand_cases() {
        let target = cloud(&[[0.0; 3], [3.0, 0.0, 0.0]]);
        // weight 1 on a single neighbor reproduces that point
        let nb = LatentNeighborhood {
            indices: vec![1],
            weights: vec![1.0],
            n: 1,
            k: 1,
        };
        let r = cross_construct(&nb, &target).unwrap();
        assert_eq!(r.constructed.row(0), &[3.0, 0.0, 0.0]);
        // uniform weights give the centroid
        let nb = LatentNeighborhood {
            indices: vec![0, 1],
            weights: vec![0.5, 0.5],
            n: 1,
            k: 2,
        };
        let r = cross_construct(&nb, &target).unwrap();
        assert_eq!(r.constructed.row(0), &[1.5, 0.0, 0.0]);
        // weights (1/3, 2/3) over (0,0,0) and (3,0,0) -> (2,0,0)
        let nb = LatentNeighborhood {
            indices: vec![0, 1],
            weights: vec![1.0 / 3.0, 2.0 / 3.0],
            n: 1,
            k: 2,
        };
        let r = cross_construct(&nb, &target).unwrap();
        assert!((r.constructed.get(0, 0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn cross_construct_index_out_of_range() {
        let target = cloud(&[[0.0; 3]]);
        let nb = LatentNeighborhood {
            indices: vec![3],
            weights: vec![1.0],
            n: 1,
            k: 1,
        };
        assert!(matches!(
            cross_construct(&nb, &target),
            Err(LossError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn self_construct_mutual_nearest_for_duplicate_features() {
        let x = cloud(&[[0.0; 3], [5.0, 0.0, 0.0], [0.0, 7.0, 0.0]]);
        // rows 0 and 1 identical, row 2 orthogonal
        let f = FeatureField {
            features: Tensor::from_vec(3, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]),
        };
        let r = self_construct(&f, &x, 1).unwrap();
        assert_eq!(r.constructed.row(0), &[5.0, 0.0, 0.0]);
        assert_eq!(r.constructed.row(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn self_construct_identical_features_gives_other_centroid() {
        let x = cloud(&[[0.0; 3], [3.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 3.0]]);
        let f = FeatureField {
            features: Tensor::from_vec(4, 2, vec![1.0; 8]),
        };
        let r = self_construct(&f, &x, 3).unwrap();
        // each row is the centroid of the other three points
        for i in 0..4 {
            let mut expect = [0.0; 3];
            for j in 0..4 {
                if j != i {
                    for c in 0..3 {
                        expect[c] += x.points[j][c] / 3.0;
                    }
                }
            }
            for c in 0..3 {
                assert!((r.constructed.get(i, c) - expect[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn self_construct_colinear_matches_brute_force() {
        // independent evaluation of the softmax + combination
        let x = cloud(&[[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let f = FeatureField {
            features: Tensor::from_vec(3, 2, vec![1.0, 0.0, 0.8, 0.6, 0.0, 1.0]),
        };
        let r = self_construct(&f, &x, 2).unwrap();

        let norm = |v: &[f64]| {
            let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
            [v[0] / n, v[1] / n]
        };
        let rows: Vec<[f64; 2]> = (0..3).map(|i| norm(f.features.row(i))).collect();
        for i in 0..3 {
            let mut sims: Vec<(usize, f64)> = (0..3)
                .filter(|&j| j != i)
                .map(|j| (j, rows[i][0] * rows[j][0] + rows[i][1] * rows[j][1]))
                .collect();
            sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let exp: Vec<f64> = sims.iter().map(|&(_, s)| s.exp()).collect();
            let z: f64 = exp.iter().sum();
            let mut expect = [0.0; 3];
            for ((j, _), e) in sims.iter().zip(exp.iter()) {
                for c in 0..3 {
                    expect[c] += (e / z) * x.points[*j][c];
                }
            }
            for c in 0..3 {
                assert!(
                    (r.constructed.get(i, c) - expect[c]).abs() < 1e-12,
                    "row {i} col {c}"
                );
            }
        }
    }

    #[test]
    fn chamfer_hand_values() {
        let p = cloud(&[[0.0; 3]]);
        let q = cloud(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer_distance(&p, &p).unwrap(), 0.0);
        assert_eq!(chamfer_distance(&p, &q).unwrap(), 2.0);
        let p2 = cloud(&[[0.0; 3], [2.0, 0.0, 0.0]]);
        assert_eq!(chamfer_distance(&p2, &p).unwrap(), 2.0);
    }

    #[test]
    fn chamfer_symmetric_exactly() {
        let mut rng = Rng::from_seed(70);
        for _ in 0..20 {
            let np = 1 + rng.below(20);
            let nq = 1 + rng.below(20);
            let p = random_cloud(&mut rng, np);
            let q = random_cloud(&mut rng, nq);
            assert_eq!(
                chamfer_distance(&p, &q).unwrap(),
                chamfer_distance(&q, &p).unwrap()
            );
        }
    }

    #[test]
    fn chamfer_empty_cloud_is_error() {
        let p = cloud(&[[0.0; 3]]);
        let empty = PointCloud::new(vec![], "e");
        assert!(matches!(
            chamfer_distance(&p, &empty),
            Err(LossError::EmptyCloud)
        ));
    }

    #[test]
    fn cross_loss_translation_monotone() {
        let mut rng = Rng::from_seed(71);
        let y = random_cloud(&mut rng, 12);
        let dir = [0.6, -0.64, 0.48];
        let mut prev = -1.0;
        for step in 0..5 {
            let t = step as f64 * 0.05;
            let shifted = Tensor::from_vec(
                12,
                3,
                y.points
                    .iter()
                    .flat_map(|p| [p[0] + t * dir[0], p[1] + t * dir[1], p[2] + t * dir[2]])
                    .collect(),
            );
            let r = ConstructionResult {
                constructed: shifted,
                neighborhood: LatentNeighborhood {
                    indices: vec![],
                    weights: vec![],
                    n: 12,
                    k: 0,
                },
            };
            let loss = cross_loss(&y, &r).unwrap();
            assert!(loss > prev, "loss not increasing at ||t|| = {t}");
            prev = loss;
        }
    }

    #[test]
    fn mapping_loss_hand_values() {
        // all constructed points identical -> 0
        let x = cloud(&[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let same = Tensor::from_vec(3, 3, vec![0.5; 9]);
        assert_eq!(mapping_loss(&x, &same, 2, 8.0).unwrap(), 0.0);

        // n=2, k_m=1, unit x-gap and unit yhat-gap, alpha 8 -> e^{-1/8}
        let x2 = cloud(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        let yhat = Tensor::from_vec(2, 3, vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let loss = mapping_loss(&x2, &yhat, 1, 8.0).unwrap();
        let expect = (-1.0_f64 / 8.0).exp();
        assert!((loss - expect).abs() < 1e-12);
        // the derived value rounds to 0.88250
        assert_eq!((loss * 1e5).round() / 1e5, 0.88250);
    }

    #[test]
    fn mapping_loss_alpha_limit_is_unweighted_mean() {
        let mut rng = Rng::from_seed(72);
        let x = random_cloud(&mut rng, 10);
        let yhat = Tensor::from_vec(10, 3, (0..30).map(|_| rng.normal()).collect());
        let weighted = mapping_loss(&x, &yhat, 3, 1e9).unwrap();
        // oracle with v_il = 1
        let graph = knn_euclidean(&x, 3, true).unwrap();
        let mut total = 0.0;
        for i in 0..10 {
            for &l in graph.row(i) {
                let a = yhat.row(i);
                let b = yhat.row(l as usize);
                total += (0..3).map(|c| (a[c] - b[c]) * (a[c] - b[c])).sum::<f64>();
            }
        }
        let oracle = total / 30.0;
        assert!((weighted - oracle).abs() / oracle.max(1e-12) < 1e-6);
    }

    #[test]
    fn total_loss_zero_lambdas() {
        let mut rng = Rng::from_seed(73);
        let x = random_cloud(&mut rng, 12);
        let y = random_cloud(&mut rng, 12);
        let fx = random_field(&mut rng, 12, 4);
        let fy = random_field(&mut rng, 12, 4);
        let w = LossWeights {
            lambda_cc: 0.0,
            lambda_sc: 0.0,
            lambda_m: 0.0,
            k_cc: 4,
            k_sc: 4,
            k_m: 4,
            ..LossWeights::default()
        };
        let b = total_loss(&x, &y, &fx, &fy, &w).unwrap();
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn total_loss_identity_affinity_zero_cc() {
        // X = Y, identical one-hot features, k_cc = 1: exact self-match
        let mut rng = Rng::from_seed(74);
        let x = random_cloud(&mut rng, 6);
        let mut f = Tensor::zeros(6, 6);
        for i in 0..6 {
            f.set(i, i, 1.0);
        }
        let field = FeatureField { features: f };
        let w = LossWeights {
            k_cc: 1,
            k_sc: 2,
            k_m: 2,
            ..LossWeights::default()
        };
        let b = total_loss(&x, &x, &field, &field, &w).unwrap();
        assert_eq!(b.cc_target, 0.0);
        assert_eq!(b.cc_source, 0.0);
    }

    #[test]
    fn total_loss_matches_independent_oracle() {
        // fully independent reimplementation of the objective on a tiny
        // instance: naive loops, no shared kernels
        let mut rng = Rng::from_seed(75);
        let n = 8;
        let x = random_cloud(&mut rng, n);
        let y = random_cloud(&mut rng, n);
        let fx = random_field(&mut rng, n, 4);
        let fy = random_field(&mut rng, n, 4);
        let w = LossWeights {
            k_cc: 3,
            k_sc: 3,
            k_m: 3,
            ..LossWeights::default()
        };
        let got = total_loss(&x, &y, &fx, &fy, &w).unwrap();

        let cos = |a: &[f64], b: &[f64]| {
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>() / (na * nb)
        };
        let topk = |s: &Vec<Vec<f64>>, k: usize, skip_diag: bool| -> Vec<Vec<usize>> {
            s.iter()
                .enumerate()
                .map(|(i, row)| {
                    let mut order: Vec<usize> =
                        (0..row.len()).filter(|&j| !(skip_diag && j == i)).collect();
                    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                    order.truncate(k);
                    order
                })
                .collect()
        };
        let construct = |s: &Vec<Vec<f64>>, sel: &Vec<Vec<usize>>, pts: &PointCloud| {
            sel.iter()
                .enumerate()
                .map(|(i, row)| {
                    let z: f64 = row.iter().map(|&j| s[i][j].exp()).sum();
                    let mut out = [0.0; 3];
                    for &j in row {
                        let wij = s[i][j].exp() / z;
                        for c in 0..3 {
                            out[c] += wij * pts.points[j][c];
                        }
                    }
                    out
                })
                .collect::<Vec<_>>()
        };
        let chamfer = |p: &Vec<[f64; 3]>, q: &Vec<[f64; 3]>| {
            let min_d2 = |a: &[f64; 3], bs: &Vec<[f64; 3]>| {
                bs.iter()
                    .map(|b| (0..3).map(|c| (a[c] - b[c]) * (a[c] - b[c])).sum::<f64>())
                    .fold(f64::INFINITY, f64::min)
            };
            p.iter().map(|a| min_d2(a, q)).sum::<f64>() / p.len() as f64
                + q.iter().map(|b| min_d2(b, p)).sum::<f64>() / q.len() as f64
        };
        let mapping = |xc: &PointCloud, yh: &Vec<[f64; 3]>, k: usize, alpha: f64| {
            let mut total = 0.0;
            for i in 0..n {
                let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                order.sort_by(|&a, &b| {
                    let da = squared_distance(&xc.points[i], &xc.points[a]);
                    let db = squared_distance(&xc.points[i], &xc.points[b]);
                    da.total_cmp(&db).then(a.cmp(&b))
                });
                for &l in order.iter().take(k) {
                    let v = (-squared_distance(&xc.points[i], &xc.points[l]) / alpha).exp();
                    let d2: f64 = (0..3)
                        .map(|c| (yh[i][c] - yh[l][c]) * (yh[i][c] - yh[l][c]))
                        .sum();
                    total += v * d2;
                }
            }
            total / (n as f64 * k as f64)
        };

        let s_xy: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| cos(fx.row(i), fy.row(j))).collect())
            .collect();
        let s_yx: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| cos(fy.row(i), fx.row(j))).collect())
            .collect();
        let s_xx: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| cos(fx.row(i), fx.row(j))).collect())
            .collect();
        let s_yy: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| cos(fy.row(i), fy.row(j))).collect())
            .collect();

        let yhat_x = construct(&s_xy, &topk(&s_xy, 3, false), &y);
        let xhat_y = construct(&s_yx, &topk(&s_yx, 3, false), &x);
        let xhat_x = construct(&s_xx, &topk(&s_xx, 3, true), &x);
        let yhat_y = construct(&s_yy, &topk(&s_yy, 3, true), &y);

        let cc_t = chamfer(&y.points.clone(), &yhat_x);
        let cc_s = chamfer(&x.points.clone(), &xhat_y);
        let sc_s = chamfer(&x.points.clone(), &xhat_x);
        let sc_t = chamfer(&y.points.clone(), &yhat_y);
        let m_s = mapping(&x, &yhat_x, 3, w.alpha);
        let m_t = mapping(&y, &xhat_y, 3, w.alpha);
        let total =
            w.lambda_cc * (cc_t + cc_s) + w.lambda_sc * (sc_s + sc_t) + w.lambda_m * (m_s + m_t);

        assert!((got.cc_target - cc_t).abs() < 1e-9);
        assert!((got.cc_source - cc_s).abs() < 1e-9);
        assert!((got.sc_source - sc_s).abs() < 1e-9);
        assert!((got.sc_target - sc_t).abs() < 1e-9);
        assert!((got.map_source - m_s).abs() < 1e-9);
        assert!((got.map_target - m_t).abs() < 1e-9);
        assert!((got.total - total).abs() < 1e-9);
    }

    #[test]
    fn breakdown_total_is_weighted_sum() {
        let mut rng = Rng::from_seed(76);
        let x = random_cloud(&mut rng, 10);
        let y = random_cloud(&mut rng, 10);
        let fx = random_field(&mut rng, 10, 4);
        let fy = random_field(&mut rng, 10, 4);
        let w = LossWeights {
            k_cc: 4,
            k_sc: 4,
            k_m: 4,
            ..LossWeights::default()
        };
        let b = total_loss(&x, &y, &fx, &fy, &w).unwrap();
        let grouped = w.lambda_cc * (b.cc_target + b.cc_source)
            + w.lambda_sc * (b.sc_source + b.sc_target)
            + w.lambda_m * (b.map_source + b.map_target);
        assert!((b.total - grouped).abs() < 1e-9);
        assert!(b.terms().iter().all(|&t| t >= 0.0));
    }

    #[test]
    fn source_target_swap_symmetry_exact() {
        let mut rng = Rng::from_seed(77);
        let x = random_cloud(&mut rng, 9);
        let y = random_cloud(&mut rng, 11);
        let fx = random_field(&mut rng, 9, 5);
        let fy = random_field(&mut rng, 11, 5);
        let w = LossWeights {
            k_cc: 3,
            k_sc: 3,
            k_m: 3,
            ..LossWeights::default()
        };
        let ab = total_loss(&x, &y, &fx, &fy, &w).unwrap();
        let ba = total_loss(&y, &x, &fy, &fx, &w).unwrap();
        assert_eq!(ab.cc_target, ba.cc_source);
        assert_eq!(ab.cc_source, ba.cc_target);
        assert_eq!(ab.sc_source, ba.sc_target);
        assert_eq!(ab.sc_target, ba.sc_source);
        assert_eq!(ab.map_source, ba.map_target);
        assert_eq!(ab.map_target, ba.map_source);
        assert_eq!(ab.total, ba.total);
    }

    #[test]
    fn constructed_points_inside_bounding_box() {
        let mut rng = Rng::from_seed(78);
        for _ in 0..10 {
            let x = random_cloud(&mut rng, 14);
            let y = random_cloud(&mut rng, 14);
            let fx = random_field(&mut rng, 14, 4);
            let fy = random_field(&mut rng, 14, 4);
            let w = LossWeights {
                k_cc: 5,
                k_sc: 5,
                k_m: 5,
                ..LossWeights::default()
            };
            let pair = total_loss_with(SimilarityMode::Cosine, &x, &y, &fx, &fy, &w).unwrap();
            let (lo, hi) = y.bounding_box();
            for i in 0..14 {
                for c in 0..3 {
                    let v = pair.cross_target.constructed.get(i, c);
                    assert!(v >= lo[c] - 1e-12 && v <= hi[c] + 1e-12);
                }
            }
            let (lo, hi) = x.bounding_box();
            for i in 0..14 {
                for c in 0..3 {
                    let v = pair.self_source.constructed.get(i, c);
                    assert!(v >= lo[c] - 1e-12 && v <= hi[c] + 1e-12);
                }
            }
        }
    }

    #[test]
    fn tape_losses_match_plain_exactly() {
        let mut rng = Rng::from_seed(79);
        let x = random_cloud(&mut rng, 10);
        let y = random_cloud(&mut rng, 12);
        let fx = random_field(&mut rng, 10, 6);
        let fy = random_field(&mut rng, 12, 6);
        let w = LossWeights {
            k_cc: 4,
            k_sc: 3,
            k_m: 3,
            ..LossWeights::default()
        };
        let plain = total_loss(&x, &y, &fx, &fy, &w).unwrap();

        let mut tape = Tape::new();
        let fxn = tape.leaf(fx.features.clone());
        let fyn = tape.leaf(fy.features.clone());
        let nodes =
            build_pair_losses(&mut tape, fxn, fyn, &x, &y, &w, SimilarityMode::Cosine).unwrap();
        let taped = nodes.breakdown(&tape);
        assert_eq!(plain, taped);
    }

    #[test]
    fn tape_feature_gradients_match_frozen_finite_differences() {
        let mut rng = Rng::from_seed(80);
        let x = random_cloud(&mut rng, 8);
        let y = random_cloud(&mut rng, 8);
        let fx = random_field(&mut rng, 8, 4);
        let fy = random_field(&mut rng, 8, 4);
        let w = LossWeights {
            k_cc: 3,
            k_sc: 3,
            k_m: 3,
            ..LossWeights::default()
        };

        let mut tape = Tape::new();
        let fxn = tape.leaf(fx.features.clone());
        let fyn = tape.leaf(fy.features.clone());
        let nodes =
            build_pair_losses(&mut tape, fxn, fyn, &x, &y, &w, SimilarityMode::Cosine).unwrap();
        let mut grads = tape.backward(nodes.total);
        let dfx = grads.take(fxn).unwrap();

        let sel = capture_selections(SimilarityMode::Cosine, &x, &y, &fx, &fy, &w).unwrap();
        let step = 1e-4;
        for i in 0..fx.features.len() {
            let mut plus = fx.clone();
            plus.features.data[i] += step;
            let mut minus = fx.clone();
            minus.features.data[i] -= step;
            let lp = total_loss_frozen(SimilarityMode::Cosine, &x, &y, &plus, &fy, &w, &sel).total;
            let lm = total_loss_frozen(SimilarityMode::Cosine, &x, &y, &minus, &fy, &w, &sel).total;
            let fd = (lp - lm) / (2.0 * step);
            let a = dfx.data[i];
            let denom = a.abs().max(fd.abs()).max(1.0);
            assert!(
                (a - fd).abs() / denom < 1e-4,
                "fx[{i}]: analytic {a}, fd {fd}"
            );
        }
    }

    #[test]
    fn dot_similarity_mode_changes_losses() {
        let mut rng = Rng::from_seed(81);
        let x = random_cloud(&mut rng, 10);
        let y = random_cloud(&mut rng, 10);
        let fx = random_field(&mut rng, 10, 4);
        let fy = random_field(&mut rng, 10, 4);
        let w = LossWeights {
            k_cc: 3,
            k_sc: 3,
            k_m: 3,
            ..LossWeights::default()
        };
        let cosine = total_loss_with(SimilarityMode::Cosine, &x, &y, &fx, &fy, &w).unwrap();
        let dotp = total_loss_with(SimilarityMode::Dot, &x, &y, &fx, &fy, &w).unwrap();
        assert_ne!(cosine.breakdown.total, dotp.breakdown.total);
    }

    #[test]
    fn k_too_large_rejected() {
        let mut rng = Rng::from_seed(82);
        let x = random_cloud(&mut rng, 5);
        let y = random_cloud(&mut rng, 5);
        let fx = random_field(&mut rng, 5, 3);
        let fy = random_field(&mut rng, 5, 3);
        let w = LossWeights {
            k_cc: 6,
            ..LossWeights::default()
        };
        assert!(matches!(
            total_loss(&x, &y, &fx, &fy, &w),
            Err(LossError::KTooLarge { .. })
        ));
    }
}
