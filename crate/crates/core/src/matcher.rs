//! Hard correspondence extraction and the evaluation metrics.
//!
//! A source point's match is the target point with the highest softmax
//! weight in its latent cross-neighborhood, which coincides with the
//! row-global argmax of the affinity matrix because the neighborhood is
//! exactly the top-k set. Metrics are computed in the coordinate frame of
//! whatever target cloud is supplied, so callers pass the original
//! (un-normalized) geometry for unit-faithful numbers.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::affinity::{similarity, softmax_weights, topk_rows, AffinityError, SimilarityMode};
use crate::feature_net::{embed, FeatureField, Mode, NetError, NetworkParams};
use crate::geometry::{max_pairwise_distance, write_ply_colored, GeometryError, PointCloud};

#[derive(Debug)]
pub enum MatchError {
    Net(NetError),
    Affinity(AffinityError),
    Geometry(GeometryError),
    LengthMismatch { a: usize, b: usize },
    BadIndex { index: usize, len: usize },
    InvalidTolerance(f64),
    Io(String, std::io::Error),
    Parse { line: usize, message: String },
}

impl fmt::Display for MatchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatchError::Net(e) => write!(f, "{e}"),
            MatchError::Affinity(e) => write!(f, "{e}"),
            MatchError::Geometry(e) => write!(f, "{e}"),
            MatchError::LengthMismatch { a, b } => write!(f, "length mismatch: {a} vs {b}"),
            MatchError::BadIndex { index, len } => {
                write!(f, "index {index} out of range for {len} points")
            }
            MatchError::InvalidTolerance(e) => write!(f, "tolerance {e} outside [0, 1]"),
            MatchError::Io(path, e) => write!(f, "{path}: {e}"),
            MatchError::Parse { line, message } => write!(f, "line {line}: {message}"),
        }
    }
}

impl std::error::Error for MatchError {}

impl From<NetError> for MatchError {
    fn from(e: NetError) -> Self {
        MatchError::Net(e)
    }
}

impl From<AffinityError> for MatchError {
    fn from(e: AffinityError) -> Self {
        MatchError::Affinity(e)
    }
}

impl From<GeometryError> for MatchError {
    fn from(e: GeometryError) -> Self {
        MatchError::Geometry(e)
    }
}

/// Total mapping: target index j* per source point, plus the winning
/// softmax weight.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceMap {
    pub target_index: Vec<u32>,
    pub peak_weight: Vec<f64>,
    pub source_id: String,
    pub target_id: String,
}

impl CorrespondenceMap {
    pub fn len(&self) -> usize {
        self.target_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_index.is_empty()
    }
}

/// Correspondence error, accuracy over a tolerance grid, and the target
/// diameter the tolerances are relative to.
#[derive(Clone, Debug)]
pub struct EvalResult {
    pub err: f64,
    pub acc_at: Vec<(f64, f64)>,
    pub d: f64,
}

/// Matches by the highest softmax weight within each row's latent top-k
/// cross-neighborhood (equivalently, the row-global argmax; ties to the
/// lower index).
pub fn match_fields(
    fx: &FeatureField,
    fy: &FeatureField,
    sim: SimilarityMode,
    k_cc: usize,
) -> Result<CorrespondenceMap, MatchError> {
    let s = similarity(sim, fx, fy)?;
    let k = k_cc.min(fy.n()).max(1);
    let idx = topk_rows(&s.s, k, false);
    let nb = softmax_weights(&s, &idx, k);
    // the top-k rows are ordered by descending similarity with ties to the
    // lower index, so entry 0 carries the highest weight
    let target_index: Vec<u32> = (0..fx.n()).map(|i| nb.index_row(i)[0]).collect();
    let peak_weight: Vec<f64> = (0..fx.n()).map(|i| nb.weight_row(i)[0]).collect();
    Ok(CorrespondenceMap {
        target_index,
        peak_weight,
        source_id: String::new(),
        target_id: String::new(),
    })
}

/// Embeds both clouds in eval mode and extracts the hard correspondence.
/// The clouds must already be normalized with the checkpoint's convention.
pub fn match_clouds(
    params: &NetworkParams,
    x: &PointCloud,
    y: &PointCloud,
    sim: SimilarityMode,
    k_cc: usize,
) -> Result<CorrespondenceMap, MatchError> {
    let fx = embed(params, x, Mode::Eval)?;
    let fy = embed(params, y, Mode::Eval)?;
    let mut map = match_fields(&fx, &fy, sim, k_cc)?;
    map.source_id = x.id.clone();
    map.target_id = y.id.clone();
    Ok(map)
}

fn check_map(map: &CorrespondenceMap, y: &PointCloud, gt: &[u32]) -> Result<(), MatchError> {
    if map.len() != gt.len() {
        return Err(MatchError::LengthMismatch {
            a: map.len(),
            b: gt.len(),
        });
    }
    for &j in map.target_index.iter().chain(gt.iter()) {
        if j as usize >= y.len() {
            return Err(MatchError::BadIndex {
                index: j as usize,
                len: y.len(),
            });
        }
    }
    Ok(())
}

fn point_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    crate::geometry::squared_distance(a, b).sqrt()
}

/// Mean Euclidean distance between predicted and ground-truth target
/// points, in the frame of the supplied target cloud.
pub fn corr_error(map: &CorrespondenceMap, y: &PointCloud, gt: &[u32]) -> Result<f64, MatchError> {
    check_map(map, y, gt)?;
    let n = map.len() as f64;
    let sum: f64 = map
        .target_index
        .iter()
        .zip(gt.iter())
        .map(|(&p, &g)| point_distance(&y.points[p as usize], &y.points[g as usize]))
        .sum();
    Ok(sum / n)
}

/// Fraction of points whose predicted match lies strictly within eps * d
/// of the ground truth, d being the target's maximal pairwise distance.
pub fn corr_accuracy(
    map: &CorrespondenceMap,
    y: &PointCloud,
    gt: &[u32],
    eps: f64,
) -> Result<f64, MatchError> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(MatchError::InvalidTolerance(eps));
    }
    check_map(map, y, gt)?;
    let d = max_pairwise_distance(y)?;
    Ok(accuracy_with_diameter(map, y, gt, eps, d))
}

fn accuracy_with_diameter(
    map: &CorrespondenceMap,
    y: &PointCloud,
    gt: &[u32],
    eps: f64,
    d: f64,
) -> f64 {
    let hits = map
        .target_index
        .iter()
        .zip(gt.iter())
        .filter(|&(&p, &g)| point_distance(&y.points[p as usize], &y.points[g as usize]) < eps * d)
        .count();
    hits as f64 / map.len() as f64
}

/// The default tolerance axis: 1% to 20% of the target diameter.
pub fn default_tolerance_grid() -> Vec<f64> {
    (1..=20).map(|i| i as f64 / 100.0).collect()
}

/// Accuracy over a tolerance grid bundled with err and d.
pub fn accuracy_curve(
    map: &CorrespondenceMap,
    y: &PointCloud,
    gt: &[u32],
    grid: &[f64],
) -> Result<EvalResult, MatchError> {
    for &eps in grid {
        if !(0.0..=1.0).contains(&eps) {
            return Err(MatchError::InvalidTolerance(eps));
        }
    }
    check_map(map, y, gt)?;
    let d = max_pairwise_distance(y)?;
    let err = corr_error(map, y, gt)?;
    let acc_at = grid
        .iter()
        .map(|&eps| (eps, accuracy_with_diameter(map, y, gt, eps, d)))
        .collect();
    Ok(EvalResult { err, acc_at, d })
}

// ---------------------------------------------------------------------------
// file formats

/// One header line "n source_id target_id", then n lines of 0-based
/// predicted target indices.
pub fn write_correspondence(path: &Path, map: &CorrespondenceMap) -> Result<(), MatchError> {
    let io_err = |e| MatchError::Io(path.display().to_string(), e);
    let mut out = String::new();
    out.push_str(&format!(
        "{} {} {}\n",
        map.len(),
        if map.source_id.is_empty() {
            "source"
        } else {
            &map.source_id
        },
        if map.target_id.is_empty() {
            "target"
        } else {
            &map.target_id
        },
    ));
    for &j in &map.target_index {
        out.push_str(&format!("{j}\n"));
    }
    fs::write(path, out).map_err(io_err)
}

pub fn read_correspondence(path: &Path) -> Result<CorrespondenceMap, MatchError> {
    let text =
        fs::read_to_string(path).map_err(|e| MatchError::Io(path.display().to_string(), e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(MatchError::Parse {
        line: 1,
        message: "empty correspondence file".into(),
    })?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 3 {
        return Err(MatchError::Parse {
            line: 1,
            message: "expected header 'n source_id target_id'".into(),
        });
    }
    let n: usize = toks[0].parse().map_err(|_| MatchError::Parse {
        line: 1,
        message: format!("bad count '{}'", toks[0]),
    })?;
    let mut target_index = Vec::with_capacity(n);
    for (idx, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let j: u32 = line.parse().map_err(|_| MatchError::Parse {
            line: idx + 1,
            message: format!("bad index '{line}'"),
        })?;
        target_index.push(j);
    }
    if target_index.len() != n {
        return Err(MatchError::Parse {
            line: 1,
            message: format!("header says {n} entries, found {}", target_index.len()),
        });
    }
    Ok(CorrespondenceMap {
        peak_weight: vec![1.0; target_index.len()],
        target_index,
        source_id: toks[1].to_string(),
        target_id: toks[2].to_string(),
    })
}

/// n lines of 0-based ground-truth target indices.
pub fn read_index_file(path: &Path) -> Result<Vec<u32>, MatchError> {
    let text =
        fs::read_to_string(path).map_err(|e| MatchError::Io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let j: u32 = line.parse().map_err(|_| MatchError::Parse {
            line: idx + 1,
            message: format!("bad index '{line}'"),
        })?;
        out.push(j);
    }
    Ok(out)
}

/// epsilon,accuracy rows followed by err and d.
pub fn write_eval_csv(path: &Path, result: &EvalResult) -> Result<(), MatchError> {
    let io_err = |e| MatchError::Io(path.display().to_string(), e);
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "epsilon,accuracy").map_err(io_err)?;
    for &(eps, acc) in &result.acc_at {
        writeln!(w, "{eps},{acc}").map_err(io_err)?;
    }
    writeln!(w, "err,{}", result.err).map_err(io_err)?;
    writeln!(w, "d,{}", result.d).map_err(io_err)?;
    Ok(())
}

/// RGB from the position of `p` inside the target bounding box.
pub fn position_color(p: &[f64; 3], lo: &[f64; 3], hi: &[f64; 3]) -> [u8; 3] {
    let mut c = [0u8; 3];
    for a in 0..3 {
        let range = hi[a] - lo[a];
        let t = if range > 0.0 {
            ((p[a] - lo[a]) / range).clamp(0.0, 1.0)
        } else {
            0.5
        };
        c[a] = (t * 255.0).round() as u8;
    }
    c
}

/// Color-transfer visualization: the target is colored by its own point
/// positions, the source by the positions of its matched target points.
pub fn export_colored_pair(
    source_path: &Path,
    target_path: &Path,
    x: &PointCloud,
    y: &PointCloud,
    map: &CorrespondenceMap,
) -> Result<(), MatchError> {
    if map.len() != x.len() {
        return Err(MatchError::LengthMismatch {
            a: map.len(),
            b: x.len(),
        });
    }
    for &j in &map.target_index {
        if j as usize >= y.len() {
            return Err(MatchError::BadIndex {
                index: j as usize,
                len: y.len(),
            });
        }
    }
    let (lo, hi) = y.bounding_box();
    let target_colors: Vec<[u8; 3]> = y
        .points
        .iter()
        .map(|p| position_color(p, &lo, &hi))
        .collect();
    let source_colors: Vec<[u8; 3]> = map
        .target_index
        .iter()
        .map(|&j| position_color(&y.points[j as usize], &lo, &hi))
        .collect();
    write_ply_colored(target_path, y, &target_colors)?;
    write_ply_colored(source_path, x, &source_colors)?;
    Ok(())
}
