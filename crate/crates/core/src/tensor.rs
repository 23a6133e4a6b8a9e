//! Dense row-major f64 matrices and the handful of kernels the pipeline
//! spends its time in.
//!
//! All reductions run in a fixed order (ascending index, fixed unroll), so
//! results are bit-reproducible regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length mismatch");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(1, 1, vec![v])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise map, row-parallel when enabled.
    pub fn map_parallel(&self, f: impl Fn(f64) -> f64 + Sync + Send) -> Tensor {
        let mut out = Tensor::zeros(self.rows, self.cols);
        for_each_row(&mut out, |i, row| {
            for (o, &v) in row.iter_mut().zip(self.row(i).iter()) {
                *o = f(v);
            }
        });
        out
    }

    /// self += alpha * other
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }
}

/// Runs `f(i, row_i)` for every row of `out`, in parallel when enabled.
/// Each row is produced by exactly one call, so the result does not depend
/// on the thread count.
pub fn for_each_row(out: &mut Tensor, f: impl Fn(usize, &mut [f64]) + Sync + Send) {
    let cols = out.cols;
    #[cfg(feature = "parallel")]
    {
        out.data
            .par_chunks_mut(cols)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, row) in out.data.chunks_mut(cols).enumerate() {
            f(i, row);
        }
    }
}

/// Accumulates `crow += sum_k arow[k] * b_row_k` with a 4-wide unroll over
/// k, so each pass over the output row carries four updates. The grouping
/// (two pair-sums, then their sum) is fixed, making results independent of
/// the thread count.
#[inline]
fn axpy_rows(crow: &mut [f64], arow: &[f64], b: &[f64], bc: usize) {
    let k = arow.len();
    let quads = k / 4;
    for q in 0..quads {
        let kk = q * 4;
        let (a0, a1, a2, a3) = (arow[kk], arow[kk + 1], arow[kk + 2], arow[kk + 3]);
        let b0 = &b[kk * bc..kk * bc + bc];
        let b1 = &b[(kk + 1) * bc..(kk + 1) * bc + bc];
        let b2 = &b[(kk + 2) * bc..(kk + 2) * bc + bc];
        let b3 = &b[(kk + 3) * bc..(kk + 3) * bc + bc];
        for j in 0..bc {
            crow[j] += (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
        }
    }
    for kk in quads * 4..k {
        let av = arow[kk];
        if av != 0.0 {
            let brow = &b[kk * bc..(kk + 1) * bc];
            for (c, &bv) in crow.iter_mut().zip(brow.iter()) {
                *c += av * bv;
            }
        }
    }
}

/// C = A * B. Row-parallel over C; k summed in fixed ascending order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul shape mismatch");
    let mut out = Tensor::zeros(a.rows, b.cols);
    let bc = b.cols;
    for_each_row(&mut out, |i, crow| {
        axpy_rows(crow, a.row(i), &b.data, bc);
    });
    out
}

/// C = A * B + bias (bias broadcast over rows). Same kernel as `matmul`
/// with the output rows seeded by the bias.
pub fn matmul_bias(a: &Tensor, b: &Tensor, bias: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul_bias shape mismatch");
    assert_eq!(bias.rows, 1);
    assert_eq!(bias.cols, b.cols);
    let mut out = Tensor::zeros(a.rows, b.cols);
    let bc = b.cols;
    for_each_row(&mut out, |i, crow| {
        crow.copy_from_slice(&bias.data);
        axpy_rows(crow, a.row(i), &b.data, bc);
    });
    out
}

/// Dot product with a fixed 4-way unroll (deterministic reassociation).
#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let n = x.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let i = c * 4;
        s0 += x[i] * y[i];
        s1 += x[i + 1] * y[i + 1];
        s2 += x[i + 2] * y[i + 2];
        s3 += x[i + 3] * y[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..n {
        tail += x[i] * y[i];
    }
    (s0 + s1) + (s2 + s3) + tail
}

/// C = A * B^T. B is transposed up front so the inner loop runs the same
/// vectorizable axpy kernel as `matmul`; the k-ascending summation order
/// is unchanged.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_nt shape mismatch");
    let bt = b.transpose();
    let mut out = Tensor::zeros(a.rows, b.rows);
    let bc = bt.cols;
    for_each_row(&mut out, |i, crow| {
        axpy_rows(crow, a.row(i), &bt.data, bc);
    });
    out
}

/// C = A^T * B via rank-1 updates accumulated per fixed row chunk. The
/// chunk partials are summed in ascending chunk order, so the result does
/// not depend on the thread count.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows, "matmul_tn shape mismatch");
    let (ac, bc) = (a.cols, b.cols);
    const CHUNK: usize = 2048;

    let partial = |range: std::ops::Range<usize>| -> Tensor {
        let mut acc = Tensor::zeros(ac, bc);
        let quads_end = range.start + (range.len() / 4) * 4;
        let mut i = range.start;
        while i < quads_end {
            let a0 = &a.data[i * ac..(i + 1) * ac];
            let a1 = &a.data[(i + 1) * ac..(i + 2) * ac];
            let a2 = &a.data[(i + 2) * ac..(i + 3) * ac];
            let a3 = &a.data[(i + 3) * ac..(i + 4) * ac];
            let b0 = &b.data[i * bc..(i + 1) * bc];
            let b1 = &b.data[(i + 1) * bc..(i + 2) * bc];
            let b2 = &b.data[(i + 2) * bc..(i + 3) * bc];
            let b3 = &b.data[(i + 3) * bc..(i + 4) * bc];
            for p in 0..ac {
                let crow = &mut acc.data[p * bc..(p + 1) * bc];
                let (v0, v1, v2, v3) = (a0[p], a1[p], a2[p], a3[p]);
                for j in 0..bc {
                    crow[j] += (v0 * b0[j] + v1 * b1[j]) + (v2 * b2[j] + v3 * b3[j]);
                }
            }
            i += 4;
        }
        for i in quads_end..range.end {
            let arow = &a.data[i * ac..(i + 1) * ac];
            let brow = &b.data[i * bc..(i + 1) * bc];
            for (p, &av) in arow.iter().enumerate() {
                if av != 0.0 {
                    let crow = &mut acc.data[p * bc..(p + 1) * bc];
                    for (c, &bv) in crow.iter_mut().zip(brow.iter()) {
                        *c += av * bv;
                    }
                }
            }
        }
        acc
    };

    let ranges: Vec<std::ops::Range<usize>> = (0..a.rows.div_ceil(CHUNK))
        .map(|c| c * CHUNK..((c + 1) * CHUNK).min(a.rows))
        .collect();
    #[cfg(feature = "parallel")]
    let partials: Vec<Tensor> = {
        use rayon::prelude::*;
        ranges.into_par_iter().map(partial).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let partials: Vec<Tensor> = ranges.into_iter().map(partial).collect();

    let mut out = Tensor::zeros(ac, bc);
    for p in partials {
        out.axpy(1.0, &p);
    }
    out
}

/// Column sums as a 1 x cols tensor.
pub fn column_sums(a: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, a.cols);
    for i in 0..a.rows {
        for (s, &v) in out.data.iter_mut().zip(a.row(i).iter()) {
            *s += v;
        }
    }
    out
}
