//! Latent affinity between feature fields: cosine (or raw dot) similarity,
//! top-k neighborhoods, and softmax weights over the selected neighbors.
//!
//! The same kernels back both the plain functions here and the recorded
//! tape ops, so the differentiable path and the inference path produce
//! identical values.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::softmax_into;
use crate::feature_net::FeatureField;
use crate::tensor::{dot, matmul_nt, Tensor};

/// Norm floor for cosine similarity; (near-)zero rows divide by this
/// instead of by zero.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimilarityMode {
    Cosine,
    Dot,
}

#[derive(Debug)]
pub enum AffinityError {
    DimensionMismatch { a: usize, b: usize },
    KTooLarge { k: usize, limit: usize },
}

impl fmt::Display for AffinityError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AffinityError::DimensionMismatch { a, b } => {
                write!(f, "feature dimensions differ: {a} vs {b}")
            }
            AffinityError::KTooLarge { k, limit } => {
                write!(f, "k = {k} exceeds the {limit} selectable columns")
            }
        }
    }
}

impl std::error::Error for AffinityError {}

/// Dense n x m similarity matrix; entry (i, j) relates row i of the row
/// source to row j of the column source.
#[derive(Clone, Debug)]
pub struct AffinityMatrix {
    pub s: Tensor,
    pub row_source: String,
    pub col_source: String,
}

/// Per-row top-k index table plus the softmax weights over the selection.
#[derive(Clone, Debug)]
pub struct LatentNeighborhood {
    pub indices: Vec<u32>,
    pub weights: Vec<f64>,
    pub n: usize,
    pub k: usize,
}

impl LatentNeighborhood {
    pub fn index_row(&self, i: usize) -> &[u32] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn weight_row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.k..(i + 1) * self.k]
    }
}

/// Rows scaled to unit norm, with the norm floored at `NORM_EPS`.
pub(crate) fn normalized_rows(f: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(f.rows, f.cols);
    for i in 0..f.rows {
        let row = f.row(i);
        let denom = dot(row, row).sqrt().max(NORM_EPS);
        for (o, &v) in out.row_mut(i).iter_mut().zip(row.iter()) {
            *o = v / denom;
        }
    }
    out
}

/// Per-row indices of the k largest entries, ties toward the lower column
/// index. With `exclude_diagonal`, column i is barred from row i.
pub(crate) fn topk_rows(s: &Tensor, k: usize, exclude_diagonal: bool) -> Vec<u32> {
    let mut out = vec![0u32; s.rows * k];
    for i in 0..s.rows {
        let row = s.row(i);
        let mut cands: Vec<(f64, u32)> = (0..s.cols)
            .filter(|&j| !(exclude_diagonal && j == i))
            .map(|j| (row[j], j as u32))
            .collect();
        cands.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (slot, cand) in out[i * k..(i + 1) * k].iter_mut().zip(cands.iter()) {
            *slot = cand.1;
        }
    }
    out
}

fn check_dims(fx: &FeatureField, fy: &FeatureField) -> Result<(), AffinityError> {
    if fx.dim() != fy.dim() {
        return Err(AffinityError::DimensionMismatch {
            a: fx.dim(),
            b: fy.dim(),
        });
    }
    Ok(())
}

/// Cosine of the angle between every feature row pair.
pub fn cosine_similarity(
    fx: &FeatureField,
    fy: &FeatureField,
) -> Result<AffinityMatrix, AffinityError> {
    check_dims(fx, fy)?;
    let s = matmul_nt(
        &normalized_rows(&fx.features),
        &normalized_rows(&fy.features),
    );
    Ok(AffinityMatrix {
        s,
        row_source: String::new(),
        col_source: String::new(),
    })
}

/// Unnormalized dot-product similarity (ablation variant).
pub fn dot_similarity(
    fx: &FeatureField,
    fy: &FeatureField,
) -> Result<AffinityMatrix, AffinityError> {
    check_dims(fx, fy)?;
    let s = matmul_nt(&fx.features, &fy.features);
    Ok(AffinityMatrix {
        s,
        row_source: String::new(),
        col_source: String::new(),
    })
}

pub fn similarity(
    mode: SimilarityMode,
    fx: &FeatureField,
    fy: &FeatureField,
) -> Result<AffinityMatrix, AffinityError> {
    match mode {
        SimilarityMode::Cosine => cosine_similarity(fx, fy),
        SimilarityMode::Dot => dot_similarity(fx, fy),
    }
}

/// Per-row top-k column table over the affinity matrix.
pub fn top_k_neighborhood(
    s: &AffinityMatrix,
    k: usize,
    exclude_diagonal: bool,
) -> Result<Vec<u32>, AffinityError> {
    let limit = if exclude_diagonal {
        s.s.cols.saturating_sub(1)
    } else {
        s.s.cols
    };
    if k > limit || k == 0 {
        return Err(AffinityError::KTooLarge { k, limit });
    }
    Ok(topk_rows(&s.s, k, exclude_diagonal))
}

/// Softmax weights over each row's selected columns (max-subtracted for
/// stability).
pub fn softmax_weights(s: &AffinityMatrix, indices: &[u32], k: usize) -> LatentNeighborhood {
    let n = s.s.rows;
    assert_eq!(indices.len(), n * k);
    let mut weights = vec![0.0; n * k];
    for i in 0..n {
        softmax_into(
            s.s.row(i),
            &indices[i * k..(i + 1) * k],
            &mut weights[i * k..(i + 1) * k],
        );
    }
    LatentNeighborhood {
        indices: indices.to_vec(),
        weights,
        n,
        k,
    }
}

/// Dumps S as little-endian binary: "AFFN", u64 rows, u64 cols, f64 data.
pub fn dump_affinity(path: &Path, s: &AffinityMatrix) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    w.write_all(b"AFFN")?;
    w.write_all(&(s.s.rows as u64).to_le_bytes())?;
    w.write_all(&(s.s.cols as u64).to_le_bytes())?;
    for v in &s.s.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_affinity(path: &Path) -> std::io::Result<Tensor> {
    let mut r = std::io::BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != b"AFFN" {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "bad affinity dump magic",
        ));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let rows = u64::from_le_bytes(buf8) as usize;
    r.read_exact(&mut buf8)?;
    let cols = u64::from_le_bytes(buf8) as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        r.read_exact(&mut buf8)?;
        data.push(f64::from_le_bytes(buf8));
    }
    Ok(Tensor::from_vec(rows, cols, data))
}
