//! Point-cloud container, file I/O, sampling, normalization, and exact
//! brute-force nearest-neighbor queries.
//!
//! The O(n^2) kNN here serves double duty: it builds the static graph for
//! the feature extractor and it is the oracle every approximate claim in
//! the test suite is checked against.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::rng::Rng;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// n x 3 coordinates plus an opaque label. Point order is significant:
/// index i identifies the same point throughout the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub id: String,
}

/// Row i holds the neighbor indices of point i, sorted by ascending
/// Euclidean distance with ties broken toward the lower index.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborGraph {
    indices: Vec<u32>,
    n: usize,
    k: usize,
    excludes_self: bool,
}

impl NeighborGraph {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn excludes_self(&self) -> bool {
        self.excludes_self
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn flat(&self) -> &[u32] {
        &self.indices
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FileFormat {
    PlyAscii,
    Off,
    Xyz,
}

impl FileFormat {
    pub fn from_path(path: &Path) -> Option<FileFormat> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("ply") => Some(FileFormat::PlyAscii),
            Some("off") => Some(FileFormat::Off),
            Some("xyz") | Some("txt") => Some(FileFormat::Xyz),
            _ => None,
        }
    }
}

#[derive(Debug)]
pub enum GeometryError {
    Io(String, std::io::Error),
    MalformedHeader { line: usize, message: String },
    BadCoordinate { line: usize, message: String },
    EmptyVertexList,
    UnknownFormat(String),
    SampleTooLarge { requested: usize, available: usize },
    KTooLarge { k: usize, limit: usize },
    TooFewPoints { needed: usize, available: usize },
}

impl fmt::Display for GeometryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeometryError::Io(path, e) => write!(f, "{path}: {e}"),
            GeometryError::MalformedHeader { line, message } => {
                write!(f, "malformed header at line {line}: {message}")
            }
            GeometryError::BadCoordinate { line, message } => {
                write!(f, "bad coordinate at line {line}: {message}")
            }
            GeometryError::EmptyVertexList => write!(f, "empty vertex list"),
            GeometryError::UnknownFormat(p) => write!(f, "cannot infer file format of {p}"),
            GeometryError::SampleTooLarge {
                requested,
                available,
            } => write!(f, "cannot sample {requested} points from {available}"),
            GeometryError::KTooLarge { k, limit } => {
                write!(f, "k = {k} exceeds the {limit} available neighbors")
            }
            GeometryError::TooFewPoints { needed, available } => {
                write!(f, "operation needs {needed} points, cloud has {available}")
            }
        }
    }
}

impl std::error::Error for GeometryError {}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>, id: impl Into<String>) -> Self {
        PointCloud {
            points,
            id: id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.points {
            c[0] += p[0];
            c[1] += p[1];
            c[2] += p[2];
        }
        let n = self.points.len() as f64;
        [c[0] / n, c[1] / n, c[2] / n]
    }

    pub fn bounding_box(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Squared Euclidean distance between two points.
pub fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    dist2(a, b)
}

// ---------------------------------------------------------------------------
// parsing

fn parse_coord(tok: &str, line: usize) -> Result<f64, GeometryError> {
    let v: f64 = tok.parse().map_err(|_| GeometryError::BadCoordinate {
        line,
        message: format!("'{tok}' is not a number"),
    })?;
    if !v.is_finite() {
        return Err(GeometryError::BadCoordinate {
            line,
            message: format!("'{tok}' is not finite"),
        });
    }
    Ok(v)
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(pos) => &line[..pos],
        None => line,
    }
}

fn parse_xyz(text: &str, id: &str) -> Result<PointCloud, GeometryError> {
    let mut points = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(GeometryError::BadCoordinate {
                line: line_no,
                message: format!("expected 3 fields, found {}", toks.len()),
            });
        }
        points.push([
            parse_coord(toks[0], line_no)?,
            parse_coord(toks[1], line_no)?,
            parse_coord(toks[2], line_no)?,
        ]);
    }
    if points.is_empty() {
        return Err(GeometryError::EmptyVertexList);
    }
    Ok(PointCloud::new(points, id))
}

fn parse_off(text: &str, id: &str) -> Result<PointCloud, GeometryError> {
    // iterate non-comment, non-empty lines with their 1-based numbers
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, strip_comment(l).trim()))
        .filter(|(_, l)| !l.is_empty());

    let (hline, header) = lines.next().ok_or(GeometryError::MalformedHeader {
        line: 1,
        message: "empty file".into(),
    })?;
    let mut toks: Vec<&str> = header.split_whitespace().collect();
    if toks[0] != "OFF" {
        return Err(GeometryError::MalformedHeader {
            line: hline,
            message: format!("expected 'OFF', found '{}'", toks[0]),
        });
    }
    toks.remove(0);
    let counts: Vec<&str> = if toks.is_empty() {
        let (cline, counts_line) = lines.next().ok_or(GeometryError::MalformedHeader {
            line: hline,
            message: "missing vertex/face counts".into(),
        })?;
        let c: Vec<&str> = counts_line.split_whitespace().collect();
        if c.len() < 2 {
            return Err(GeometryError::MalformedHeader {
                line: cline,
                message: "expected 'nv nf [ne]' counts".into(),
            });
        }
        c
    } else {
        toks
    };
    let nv: usize = counts[0]
        .parse()
        .map_err(|_| GeometryError::MalformedHeader {
            line: hline,
            message: format!("bad vertex count '{}'", counts[0]),
        })?;
    if nv == 0 {
        return Err(GeometryError::EmptyVertexList);
    }

    let mut points = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (line_no, line) = lines.next().ok_or(GeometryError::BadCoordinate {
            line: 0,
            message: format!("file ends before {nv} vertices were read"),
        })?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(GeometryError::BadCoordinate {
                line: line_no,
                message: format!("expected 3 coordinates, found {}", toks.len()),
            });
        }
        points.push([
            parse_coord(toks[0], line_no)?,
            parse_coord(toks[1], line_no)?,
            parse_coord(toks[2], line_no)?,
        ]);
    }
    // face/edge records are connectivity information and are discarded
    Ok(PointCloud::new(points, id))
}

fn parse_ply(text: &str, id: &str) -> Result<PointCloud, GeometryError> {
    struct Element {
        name: String,
        count: usize,
    }

    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));

    match lines.next() {
        Some((_, "ply")) => {}
        Some((line, other)) => {
            return Err(GeometryError::MalformedHeader {
                line,
                message: format!("expected 'ply' magic, found '{other}'"),
            })
        }
        None => {
            return Err(GeometryError::MalformedHeader {
                line: 1,
                message: "empty file".into(),
            })
        }
    }

    let mut elements: Vec<Element> = Vec::new();
    let mut vertex_props: Vec<String> = Vec::new();
    let mut saw_format = false;
    let mut header_end = 0;
    for (line_no, line) in lines.by_ref() {
        if line.is_empty() || line.starts_with("comment") || line.starts_with("obj_info") {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks[0] {
            "format" => {
                if toks.get(1) != Some(&"ascii") {
                    return Err(GeometryError::MalformedHeader {
                        line: line_no,
                        message: "only 'format ascii 1.0' is supported".into(),
                    });
                }
                saw_format = true;
            }
            "element" => {
                if toks.len() != 3 {
                    return Err(GeometryError::MalformedHeader {
                        line: line_no,
                        message: "expected 'element <name> <count>'".into(),
                    });
                }
                let count = toks[2]
                    .parse()
                    .map_err(|_| GeometryError::MalformedHeader {
                        line: line_no,
                        message: format!("bad element count '{}'", toks[2]),
                    })?;
                elements.push(Element {
                    name: toks[1].to_string(),
                    count,
                });
            }
            "property" => {
                if let Some(el) = elements.last() {
                    if el.name == "vertex" && toks[1] != "list" {
                        vertex_props.push(toks[toks.len() - 1].to_string());
                    }
                }
            }
            "end_header" => {
                header_end = line_no;
                break;
            }
            other => {
                return Err(GeometryError::MalformedHeader {
                    line: line_no,
                    message: format!("unexpected header keyword '{other}'"),
                })
            }
        }
    }
    if header_end == 0 {
        return Err(GeometryError::MalformedHeader {
            line: 1,
            message: "missing end_header".into(),
        });
    }
    if !saw_format {
        return Err(GeometryError::MalformedHeader {
            line: header_end,
            message: "missing format declaration".into(),
        });
    }
    let vertex_count = match elements.iter().find(|e| e.name == "vertex") {
        Some(e) => e.count,
        None => {
            return Err(GeometryError::MalformedHeader {
                line: header_end,
                message: "no 'element vertex' declared".into(),
            })
        }
    };
    if vertex_count == 0 {
        return Err(GeometryError::EmptyVertexList);
    }
    let coord_cols: Vec<usize> = ["x", "y", "z"]
        .iter()
        .map(|name| {
            vertex_props
                .iter()
                .position(|p| p == name)
                .ok_or(GeometryError::MalformedHeader {
                    line: header_end,
                    message: format!("vertex element lacks property '{name}'"),
                })
        })
        .collect::<Result<_, _>>()?;

    let mut points = Vec::with_capacity(vertex_count);
    let mut data_lines = lines.filter(|(_, l)| !l.is_empty());
    for el in &elements {
        for _ in 0..el.count {
            let (line_no, line) = data_lines.next().ok_or(GeometryError::BadCoordinate {
                line: 0,
                message: format!("file ends inside element '{}'", el.name),
            })?;
            if el.name != "vertex" {
                continue; // connectivity and other payloads are discarded
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() < vertex_props.len() {
                return Err(GeometryError::BadCoordinate {
                    line: line_no,
                    message: format!(
                        "expected {} vertex properties, found {}",
                        vertex_props.len(),
                        toks.len()
                    ),
                });
            }
            points.push([
                parse_coord(toks[coord_cols[0]], line_no)?,
                parse_coord(toks[coord_cols[1]], line_no)?,
                parse_coord(toks[coord_cols[2]], line_no)?,
            ]);
        }
    }
    Ok(PointCloud::new(points, id))
}

/// Reads vertex coordinates from a PLY (ascii), OFF, or XYZ file.
/// Connectivity data, when present, is ignored.
pub fn load_point_cloud(path: &Path, format: FileFormat) -> Result<PointCloud, GeometryError> {
    let text =
        fs::read_to_string(path).map_err(|e| GeometryError::Io(path.display().to_string(), e))?;
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("cloud")
        .to_string();
    match format {
        FileFormat::Xyz => parse_xyz(&text, &id),
        FileFormat::Off => parse_off(&text, &id),
        FileFormat::PlyAscii => parse_ply(&text, &id),
    }
}

/// Loads a cloud, inferring the format from the file extension.
pub fn load_auto(path: &Path) -> Result<PointCloud, GeometryError> {
    let format = FileFormat::from_path(path)
        .ok_or_else(|| GeometryError::UnknownFormat(path.display().to_string()))?;
    load_point_cloud(path, format)
}

pub fn write_xyz(path: &Path, pc: &PointCloud) -> Result<(), GeometryError> {
    let mut out = String::new();
    for p in &pc.points {
        out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    fs::write(path, out).map_err(|e| GeometryError::Io(path.display().to_string(), e))
}

/// Writes an ascii PLY with per-vertex uchar colors.
pub fn write_ply_colored(
    path: &Path,
    pc: &PointCloud,
    colors: &[[u8; 3]],
) -> Result<(), GeometryError> {
    assert_eq!(pc.len(), colors.len());
    let file =
        fs::File::create(path).map_err(|e| GeometryError::Io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e| GeometryError::Io(path.display().to_string(), e);
    writeln!(
        w,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header",
        pc.len()
    )
    .map_err(io_err)?;
    for (p, c) in pc.points.iter().zip(colors.iter()) {
        writeln!(w, "{} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2]).map_err(io_err)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// operations

/// Uniform subset without replacement; output order is draw order.
pub fn sample_points(
    pc: &PointCloud,
    n_out: usize,
    seed: u64,
) -> Result<PointCloud, GeometryError> {
    if n_out > pc.len() {
        return Err(GeometryError::SampleTooLarge {
            requested: n_out,
            available: pc.len(),
        });
    }
    let mut rng = Rng::from_seed(seed);
    let idx = rng.sample_indices(pc.len(), n_out);
    Ok(PointCloud::new(
        idx.iter().map(|&i| pc.points[i]).collect(),
        pc.id.clone(),
    ))
}

/// Centers the cloud on its centroid and scales the maximal radius to 1.
/// A degenerate all-equal cloud maps to all-zeros.
pub fn normalize(pc: &PointCloud) -> PointCloud {
    let c = pc.centroid();
    let mut points: Vec<[f64; 3]> = pc
        .points
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let r = points
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0_f64, f64::max);
    if r > 0.0 {
        for p in &mut points {
            p[0] /= r;
            p[1] /= r;
            p[2] /= r;
        }
    }
    PointCloud::new(points, pc.id.clone())
}

fn knn_row(points: &[[f64; 3]], i: usize, k: usize, excludes_self: bool, out: &mut [u32]) {
    let mut cands: Vec<(f64, u32)> = Vec::with_capacity(points.len());
    for (j, q) in points.iter().enumerate() {
        if excludes_self && j == i {
            continue;
        }
        cands.push((dist2(&points[i], q), j as u32));
    }
    cands.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for (slot, cand) in out.iter_mut().zip(cands.iter().take(k)) {
        *slot = cand.1;
    }
}

/// Exact kNN by exhaustive O(n^2) search. Rows are sorted by ascending
/// distance; ties break toward the lower index.
pub fn knn_euclidean(
    pc: &PointCloud,
    k: usize,
    excludes_self: bool,
) -> Result<NeighborGraph, GeometryError> {
    let n = pc.len();
    let limit = if excludes_self {
        n.saturating_sub(1)
    } else {
        n
    };
    if k > limit {
        return Err(GeometryError::KTooLarge { k, limit });
    }
    let mut indices = vec![0u32; n * k];
    let points = &pc.points;
    let chunks: Vec<(usize, &mut [u32])> = indices.chunks_mut(k).enumerate().collect();
    #[cfg(feature = "parallel")]
    chunks
        .into_par_iter()
        .for_each(|(i, row)| knn_row(points, i, k, excludes_self, row));
    #[cfg(not(feature = "parallel"))]
    for (i, row) in chunks {
        knn_row(points, i, k, excludes_self, row);
    }
    Ok(NeighborGraph {
        indices,
        n,
        k,
        excludes_self,
    })
}

/// Exact maximum over all point pairs.
pub fn max_pairwise_distance(pc: &PointCloud) -> Result<f64, GeometryError> {
    if pc.len() < 2 {
        return Err(GeometryError::TooFewPoints {
            needed: 2,
            available: pc.len(),
        });
    }
    let mut best = 0.0_f64;
    for i in 0..pc.len() {
        for j in (i + 1)..pc.len() {
            best = best.max(dist2(&pc.points[i], &pc.points[j]));
        }
    }
    Ok(best.sqrt())
}
