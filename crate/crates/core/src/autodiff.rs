//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! The op set is exactly what the correspondence pipeline needs: shared
//! linear maps, batch norm, leaky ReLU, neighborhood edge features and
//! max-pooling, row normalization, gathered softmax, convex point
//! combination, Chamfer distance, and the mapping loss. Discrete index
//! selections (kNN graphs, top-k neighborhoods, Chamfer argmins) are made
//! at forward time and treated as constants: no gradient flows through
//! them.

use std::rc::Rc;

use crate::tensor::{column_sums, dot, matmul, matmul_nt, matmul_tn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

enum Op {
    Leaf,
    MatMul {
        a: VarId,
        b: VarId,
    },
    /// C = A * B^T
    MatMulNT {
        a: VarId,
        b: VarId,
    },
    /// C = A * B + bias (row broadcast)
    MatMulBias {
        a: VarId,
        b: VarId,
        bias: VarId,
    },
    LeakyRelu {
        x: VarId,
        slope: f64,
    },
    BatchNormTrain {
        x: VarId,
        scale: VarId,
        shift: VarId,
        mean: Tensor,
        inv_std: Tensor,
    },
    BatchNormEval {
        x: VarId,
        scale: VarId,
        shift: VarId,
        mean: Tensor,
        inv_std: Tensor,
    },
    /// Shared linear map over edge features [f_i, f_j - f_i] for the k
    /// neighbors j of each point i, plus a bias row. Computed as
    /// per-point products with the two halves of the weight matrix:
    /// out_(i,j) = bias + top(f_i) + bot(f_j) - bot(f_i).
    EdgeConvLinear {
        f: VarId,
        weight: VarId,
        bias: VarId,
        idx: Rc<Vec<u32>>,
        k: usize,
    },
    /// Max over each point's k neighbor rows; argrow[i * cols + c] is the
    /// winning absolute input row.
    MaxPool {
        e: VarId,
        argrow: Vec<u32>,
    },
    ConcatCols {
        parts: Vec<VarId>,
    },
    /// y_i = x_i / max(||x_i||, eps)
    NormalizeRows {
        x: VarId,
        raw_norms: Vec<f64>,
        eps: f64,
    },
    /// Per-row softmax over the k gathered columns idx[i*k..].
    GatherSoftmax {
        s: VarId,
        idx: Rc<Vec<u32>>,
        k: usize,
    },
    /// out_i = sum_j w_ij * points[idx_ij]; the points are constants.
    Combine {
        w: VarId,
        points: Rc<Vec<[f64; 3]>>,
        idx: Rc<Vec<u32>>,
        k: usize,
    },
    Chamfer {
        p: VarId,
        q: VarId,
        nn_pq: Vec<u32>,
        nn_qp: Vec<u32>,
    },
    /// (1/(n k)) sum_i sum_l v_il ||y_i - y_l||^2 over fixed neighbor rows.
    MappingLoss {
        yhat: VarId,
        idx: Rc<Vec<u32>>,
        v: Rc<Vec<f64>>,
        k: usize,
    },
    SliceRows {
        x: VarId,
        start: usize,
    },
    /// Scalar: sum of coeff * scalar-term.
    WeightedSum {
        terms: Vec<(VarId, f64)>,
    },
    /// Scalar: sum_i x.data[i] * w[i].
    WeightedFlatSum {
        x: VarId,
        w: Rc<Vec<f64>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by tape variable. Only variables the backward pass
/// reached carry a tensor.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: VarId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

/// Batch statistics captured by a train-mode batch-norm node, for running
/// statistic updates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Tensor,
    pub var_biased: Tensor,
    pub rows: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> VarId {
        self.nodes.push(Node { value, op });
        VarId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let value = matmul(self.value(a), self.value(b));
        self.push(value, Op::MatMul { a, b })
    }

    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> VarId {
        let value = matmul_nt(self.value(a), self.value(b));
        self.push(value, Op::MatMulNT { a, b })
    }

    pub fn matmul_bias(&mut self, a: VarId, b: VarId, bias: VarId) -> VarId {
        let value = crate::tensor::matmul_bias(self.value(a), self.value(b), self.value(bias));
        self.push(value, Op::MatMulBias { a, b, bias })
    }

    pub fn leaky_relu(&mut self, x: VarId, slope: f64) -> VarId {
        let value = self
            .value(x)
            .map_parallel(|v| if v > 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu { x, slope })
    }

    /// Train-mode batch norm over all rows. Returns the node and the batch
    /// statistics (for running-average updates by the caller).
    pub fn batch_norm_train(
        &mut self,
        x: VarId,
        scale: VarId,
        shift: VarId,
        eps: f64,
    ) -> (VarId, BatchStats) {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows, xv.cols);
        let mut mean = Tensor::zeros(1, cols);
        for i in 0..rows {
            for (m, &v) in mean.data.iter_mut().zip(xv.row(i).iter()) {
                *m += v;
            }
        }
        mean.scale(1.0 / rows as f64);
        let mut var = Tensor::zeros(1, cols);
        for i in 0..rows {
            for c in 0..cols {
                let d = xv.get(i, c) - mean.data[c];
                var.data[c] += d * d;
            }
        }
        var.scale(1.0 / rows as f64);
        let inv_std = var.map(|v| 1.0 / (v + eps).sqrt());

        let xv = self.value(x);
        let sv = self.value(scale);
        let tv = self.value(shift);
        let mut value = Tensor::zeros(rows, cols);
        crate::tensor::for_each_row(&mut value, |i, out| {
            let xrow = xv.row(i);
            for c in 0..cols {
                let xhat = (xrow[c] - mean.data[c]) * inv_std.data[c];
                out[c] = sv.data[c] * xhat + tv.data[c];
            }
        });
        let stats = BatchStats {
            mean: mean.clone(),
            var_biased: var,
            rows,
        };
        let id = self.push(
            value,
            Op::BatchNormTrain {
                x,
                scale,
                shift,
                mean,
                inv_std,
            },
        );
        (id, stats)
    }

    /// Eval-mode batch norm: fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: VarId,
        scale: VarId,
        shift: VarId,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> VarId {
        let inv_std = running_var.map(|v| 1.0 / (v + eps).sqrt());
        let xv = self.value(x);
        let sv = self.value(scale);
        let tv = self.value(shift);
        let (rows, cols) = (xv.rows, xv.cols);
        let mut value = Tensor::zeros(rows, cols);
        for i in 0..rows {
            for c in 0..cols {
                let xhat = (xv.get(i, c) - running_mean.data[c]) * inv_std.data[c];
                value.set(i, c, sv.data[c] * xhat + tv.data[c]);
            }
        }
        self.push(
            value,
            Op::BatchNormEval {
                x,
                scale,
                shift,
                mean: running_mean.clone(),
                inv_std,
            },
        )
    }

    /// The weight has 2c rows: the top half acts on the point feature,
    /// the bottom half on the neighbor difference.
    pub fn edge_conv_linear(
        &mut self,
        f: VarId,
        weight: VarId,
        bias: VarId,
        idx: Rc<Vec<u32>>,
        k: usize,
    ) -> VarId {
        let fv = self.value(f);
        let wv = self.value(weight);
        let bv = self.value(bias);
        let (n, c) = (fv.rows, fv.cols);
        assert_eq!(wv.rows, 2 * c, "edge weight must have 2c rows");
        assert_eq!(idx.len(), n * k);
        let c_out = wv.cols;
        let (w_top, w_bot) = split_rows(wv, c);
        let p_top = matmul(fv, &w_top);
        let p_bot = matmul(fv, &w_bot);
        let mut value = Tensor::zeros(n * k, c_out);
        {
            let idx: &[u32] = &idx;
            let p_top = &p_top;
            let p_bot = &p_bot;
            crate::tensor::for_each_row(&mut value, |r, row| {
                let i = r / k;
                let top = p_top.row(i);
                let own = p_bot.row(i);
                let nb = p_bot.row(idx[r] as usize);
                for col in 0..c_out {
                    row[col] = bv.data[col] + top[col] + (nb[col] - own[col]);
                }
            });
        }
        self.push(
            value,
            Op::EdgeConvLinear {
                f,
                weight,
                bias,
                idx,
                k,
            },
        )
    }

    pub fn max_pool_neighbors(&mut self, e: VarId, k: usize) -> VarId {
        let ev = self.value(e);
        assert_eq!(ev.rows % k, 0);
        let n = ev.rows / k;
        let cols = ev.cols;
        let mut value = Tensor::zeros(n, cols);
        let mut argrow = vec![0u32; n * cols];

        let fill = |i: usize, out: &mut [f64], args: &mut [u32]| {
            let base = i * k;
            out.copy_from_slice(ev.row(base));
            for slot in args.iter_mut() {
                *slot = base as u32;
            }
            for j in 1..k {
                let row = ev.row(base + j);
                for c in 0..cols {
                    if row[c] > out[c] {
                        out[c] = row[c];
                        args[c] = (base + j) as u32;
                    }
                }
            }
        };
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            value
                .data
                .par_chunks_mut(cols)
                .zip(argrow.par_chunks_mut(cols))
                .enumerate()
                .for_each(|(i, (out, args))| fill(i, out, args));
        }
        #[cfg(not(feature = "parallel"))]
        {
            for (i, (out, args)) in value
                .data
                .chunks_mut(cols)
                .zip(argrow.chunks_mut(cols))
                .enumerate()
            {
                fill(i, out, args);
            }
        }
        self.push(value, Op::MaxPool { e, argrow })
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> VarId {
        let rows = self.value(parts[0]).rows;
        let total: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut value = Tensor::zeros(rows, total);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let pv = self.value(p);
                value.row_mut(i)[off..off + pv.cols].copy_from_slice(pv.row(i));
                off += pv.cols;
            }
        }
        self.push(
            value,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn normalize_rows(&mut self, x: VarId, eps: f64) -> VarId {
        let xv = self.value(x);
        let mut raw_norms = Vec::with_capacity(xv.rows);
        let mut value = Tensor::zeros(xv.rows, xv.cols);
        for i in 0..xv.rows {
            let norm = dot(xv.row(i), xv.row(i)).sqrt();
            raw_norms.push(norm);
            let denom = norm.max(eps);
            for (o, &v) in value.row_mut(i).iter_mut().zip(xv.row(i).iter()) {
                *o = v / denom;
            }
        }
        self.push(value, Op::NormalizeRows { x, raw_norms, eps })
    }

    pub fn gather_softmax(&mut self, s: VarId, idx: Rc<Vec<u32>>, k: usize) -> VarId {
        let sv = self.value(s);
        let n = sv.rows;
        assert_eq!(idx.len(), n * k);
        let mut value = Tensor::zeros(n, k);
        for i in 0..n {
            let srow = sv.row(i);
            let sel = &idx[i * k..(i + 1) * k];
            softmax_into(srow, sel, value.row_mut(i));
        }
        self.push(value, Op::GatherSoftmax { s, idx, k })
    }

    pub fn combine(&mut self, w: VarId, points: Rc<Vec<[f64; 3]>>, idx: Rc<Vec<u32>>) -> VarId {
        let wv = self.value(w);
        let (n, k) = (wv.rows, wv.cols);
        assert_eq!(idx.len(), n * k);
        let value = combine_rows(&wv.data, n, k, &points, &idx);
        self.push(value, Op::Combine { w, points, idx, k })
    }

    pub fn chamfer(&mut self, p: VarId, q: VarId) -> VarId {
        let pv = self.value(p);
        let qv = self.value(q);
        assert_eq!(pv.cols, 3);
        assert_eq!(qv.cols, 3);
        let (nn_pq, sum_pq) = nearest_rows(pv, qv);
        let (nn_qp, sum_qp) = nearest_rows(qv, pv);
        let value = sum_pq / pv.rows as f64 + sum_qp / qv.rows as f64;
        self.push(Tensor::scalar(value), Op::Chamfer { p, q, nn_pq, nn_qp })
    }

    pub fn mapping_loss(
        &mut self,
        yhat: VarId,
        idx: Rc<Vec<u32>>,
        v: Rc<Vec<f64>>,
        k: usize,
    ) -> VarId {
        let yv = self.value(yhat);
        assert_eq!(idx.len(), yv.rows * k);
        assert_eq!(v.len(), yv.rows * k);
        let value = mapping_value(yv, &idx, &v, k);
        self.push(Tensor::scalar(value), Op::MappingLoss { yhat, idx, v, k })
    }

    pub fn slice_rows(&mut self, x: VarId, start: usize, len: usize) -> VarId {
        let xv = self.value(x);
        let cols = xv.cols;
        let value = Tensor::from_vec(
            len,
            cols,
            xv.data[start * cols..(start + len) * cols].to_vec(),
        );
        self.push(value, Op::SliceRows { x, start })
    }

    pub fn weighted_sum(&mut self, terms: &[(VarId, f64)]) -> VarId {
        let value = terms.iter().map(|&(id, c)| c * self.value(id).item()).sum();
        self.push(
            Tensor::scalar(value),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
        )
    }

    pub fn weighted_flat_sum(&mut self, x: VarId, w: Rc<Vec<f64>>) -> VarId {
        let xv = self.value(x);
        assert_eq!(xv.len(), w.len());
        let value = dot(&xv.data, &w);
        self.push(Tensor::scalar(value), Op::WeightedFlatSum { x, w })
    }

    /// Backward pass from a scalar root, seeded with d(root)/d(root) = 1.
    pub fn backward(&mut self, root: VarId) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        self.backward_seeded(root, Tensor::scalar(1.0))
    }

    /// Backward pass from any node with an explicit upstream gradient.
    pub fn backward_seeded(&mut self, root: VarId, seed: Tensor) -> Gradients {
        assert!(seed.same_shape(self.value(root)), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);

        for id in (0..=root.0).rev() {
            if grads[id].is_none() {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let g = grads[id].take().expect("grad present");
            self.propagate(id, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let da = matmul_nt(g, self.value(*b));
                let db = matmul_tn(self.value(*a), g);
                accum(grads, *a, da);
                accum(grads, *b, db);
            }
            Op::MatMulNT { a, b } => {
                let da = matmul(g, self.value(*b));
                let db = matmul_tn(g, self.value(*a));
                accum(grads, *a, da);
                accum(grads, *b, db);
            }
            Op::MatMulBias { a, b, bias } => {
                let da = matmul_nt(g, self.value(*b));
                let db = matmul_tn(self.value(*a), g);
                accum(grads, *a, da);
                accum(grads, *b, db);
                accum(grads, *bias, column_sums(g));
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                crate::tensor::for_each_row(&mut dx, |i, out| {
                    for ((o, &gv), &v) in out.iter_mut().zip(g.row(i).iter()).zip(xv.row(i).iter())
                    {
                        *o = if v > 0.0 { gv } else { slope * gv };
                    }
                });
                accum(grads, *x, dx);
            }
            Op::BatchNormTrain {
                x,
                scale,
                shift,
                mean,
                inv_std,
            } => {
                let xv = self.value(*x);
                let sv = self.value(*scale);
                let (rows, cols) = (xv.rows, xv.cols);
                let m = rows as f64;

                let mut dscale = Tensor::zeros(1, cols);
                let mut dshift = Tensor::zeros(1, cols);
                let mut sum_dxhat = vec![0.0; cols];
                let mut sum_dxhat_xhat = vec![0.0; cols];
                for i in 0..rows {
                    for c in 0..cols {
                        let xhat = (xv.get(i, c) - mean.data[c]) * inv_std.data[c];
                        let gv = g.get(i, c);
                        dscale.data[c] += gv * xhat;
                        dshift.data[c] += gv;
                        let dxhat = gv * sv.data[c];
                        sum_dxhat[c] += dxhat;
                        sum_dxhat_xhat[c] += dxhat * xhat;
                    }
                }
                let mut dx = Tensor::zeros(rows, cols);
                crate::tensor::for_each_row(&mut dx, |i, out| {
                    let xrow = xv.row(i);
                    let grow = g.row(i);
                    for c in 0..cols {
                        let xhat = (xrow[c] - mean.data[c]) * inv_std.data[c];
                        let dxhat = grow[c] * sv.data[c];
                        out[c] = inv_std.data[c] / m
                            * (m * dxhat - sum_dxhat[c] - xhat * sum_dxhat_xhat[c]);
                    }
                });
                accum(grads, *x, dx);
                accum(grads, *scale, dscale);
                accum(grads, *shift, dshift);
            }
            Op::BatchNormEval {
                x,
                scale,
                shift,
                mean,
                inv_std,
            } => {
                let xv = self.value(*x);
                let sv = self.value(*scale);
                let (rows, cols) = (xv.rows, xv.cols);
                let mut dx = Tensor::zeros(rows, cols);
                let mut dscale = Tensor::zeros(1, cols);
                let mut dshift = Tensor::zeros(1, cols);
                for i in 0..rows {
                    for c in 0..cols {
                        let gv = g.get(i, c);
                        dx.set(i, c, gv * sv.data[c] * inv_std.data[c]);
                        let xhat = (xv.get(i, c) - mean.data[c]) * inv_std.data[c];
                        dscale.data[c] += gv * xhat;
                        dshift.data[c] += gv;
                    }
                }
                accum(grads, *x, dx);
                accum(grads, *scale, dscale);
                accum(grads, *shift, dshift);
            }
            Op::EdgeConvLinear {
                f,
                weight,
                bias,
                idx,
                k,
            } => {
                let fv = self.value(*f);
                let wv = self.value(*weight);
                let (n, c) = (fv.rows, fv.cols);
                let c_out = wv.cols;

                // g summed over each point's own edges
                let mut g_own = Tensor::zeros(n, c_out);
                crate::tensor::for_each_row(&mut g_own, |i, out| {
                    for j in 0..*k {
                        for (o, &gv) in out.iter_mut().zip(g.row(i * k + j).iter()) {
                            *o += gv;
                        }
                    }
                });
                // neighbor-scatter minus own: gradient into the bottom product
                let mut g_bot = Tensor::zeros(n, c_out);
                for (r, &nb) in idx.iter().enumerate() {
                    let grow = g.row(r);
                    let base = nb as usize * c_out;
                    for col in 0..c_out {
                        g_bot.data[base + col] += grow[col];
                    }
                }
                g_bot.axpy(-1.0, &g_own);

                let (w_top, w_bot) = split_rows(wv, c);
                let mut df = matmul_nt(&g_own, &w_top);
                df.axpy(1.0, &matmul_nt(&g_bot, &w_bot));

                let dw_top = matmul_tn(fv, &g_own);
                let dw_bot = matmul_tn(fv, &g_bot);
                let mut dw = Tensor::zeros(2 * c, c_out);
                dw.data[..c * c_out].copy_from_slice(&dw_top.data);
                dw.data[c * c_out..].copy_from_slice(&dw_bot.data);

                accum(grads, *f, df);
                accum(grads, *weight, dw);
                accum(grads, *bias, column_sums(g));
            }
            Op::MaxPool { e, argrow } => {
                let ev = self.value(*e);
                let mut de = Tensor::zeros(ev.rows, ev.cols);
                let cols = g.cols;
                for i in 0..g.rows {
                    for c in 0..cols {
                        let src = argrow[i * cols + c] as usize;
                        de.data[src * cols + c] += g.get(i, c);
                    }
                }
                accum(grads, *e, de);
            }
            Op::ConcatCols { parts } => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols;
                    let mut dp = Tensor::zeros(g.rows, pc);
                    for i in 0..g.rows {
                        dp.row_mut(i).copy_from_slice(&g.row(i)[off..off + pc]);
                    }
                    accum(grads, p, dp);
                    off += pc;
                }
            }
            Op::NormalizeRows { x, raw_norms, eps } => {
                let xv = self.value(*x);
                let yv = &node.value;
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                for i in 0..xv.rows {
                    let norm = raw_norms[i];
                    let grow = g.row(i);
                    let drow = dx.row_mut(i);
                    if norm > *eps {
                        let yrow = yv.row(i);
                        let gy = dot(grow, yrow);
                        for c in 0..grow.len() {
                            drow[c] = (grow[c] - yrow[c] * gy) / norm;
                        }
                    } else {
                        for c in 0..grow.len() {
                            drow[c] = grow[c] / eps;
                        }
                    }
                }
                accum(grads, *x, dx);
            }
            Op::GatherSoftmax { s, idx, k } => {
                let sv = self.value(*s);
                let wv = &node.value;
                let mut ds = Tensor::zeros(sv.rows, sv.cols);
                for i in 0..wv.rows {
                    let wrow = wv.row(i);
                    let grow = g.row(i);
                    let common = dot(grow, wrow);
                    for j in 0..*k {
                        let col = idx[i * k + j] as usize;
                        ds.data[i * sv.cols + col] += wrow[j] * (grow[j] - common);
                    }
                }
                accum(grads, *s, ds);
            }
            Op::Combine { w, points, idx, k } => {
                let wv = self.value(*w);
                let mut dw = Tensor::zeros(wv.rows, wv.cols);
                for i in 0..wv.rows {
                    let grow = g.row(i);
                    for j in 0..*k {
                        let p = &points[idx[i * k + j] as usize];
                        dw.set(i, j, grow[0] * p[0] + grow[1] * p[1] + grow[2] * p[2]);
                    }
                }
                accum(grads, *w, dw);
            }
            Op::Chamfer { p, q, nn_pq, nn_qp } => {
                let gs = g.item();
                let pv = self.value(*p);
                let qv = self.value(*q);
                let mut dp = Tensor::zeros(pv.rows, 3);
                let mut dq = Tensor::zeros(qv.rows, 3);
                let cp = 2.0 * gs / pv.rows as f64;
                for i in 0..pv.rows {
                    let j = nn_pq[i] as usize;
                    for c in 0..3 {
                        let d = pv.get(i, c) - qv.get(j, c);
                        dp.data[i * 3 + c] += cp * d;
                        dq.data[j * 3 + c] -= cp * d;
                    }
                }
                let cq = 2.0 * gs / qv.rows as f64;
                for j in 0..qv.rows {
                    let i = nn_qp[j] as usize;
                    for c in 0..3 {
                        let d = qv.get(j, c) - pv.get(i, c);
                        dq.data[j * 3 + c] += cq * d;
                        dp.data[i * 3 + c] -= cq * d;
                    }
                }
                accum(grads, *p, dp);
                accum(grads, *q, dq);
            }
            Op::MappingLoss { yhat, idx, v, k } => {
                let gs = g.item();
                let yv = self.value(*yhat);
                let n = yv.rows;
                let mut dy = Tensor::zeros(n, 3);
                let norm = 2.0 * gs / (n as f64 * *k as f64);
                for i in 0..n {
                    for j in 0..*k {
                        let l = idx[i * k + j] as usize;
                        let coeff = norm * v[i * k + j];
                        for c in 0..3 {
                            let d = yv.get(i, c) - yv.get(l, c);
                            dy.data[i * 3 + c] += coeff * d;
                            dy.data[l * 3 + c] -= coeff * d;
                        }
                    }
                }
                accum(grads, *yhat, dy);
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                for i in 0..g.rows {
                    dx.row_mut(start + i).copy_from_slice(g.row(i));
                }
                accum(grads, *x, dx);
            }
            Op::WeightedSum { terms } => {
                let gs = g.item();
                for &(t, c) in terms {
                    accum(grads, t, Tensor::scalar(c * gs));
                }
            }
            Op::WeightedFlatSum { x, w } => {
                let xv = self.value(*x);
                let gs = g.item();
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                for (d, &wv) in dx.data.iter_mut().zip(w.iter()) {
                    *d = gs * wv;
                }
                accum(grads, *x, dx);
            }
        }
    }
}

/// Splits a (2c x m) matrix into its top and bottom c-row halves.
fn split_rows(w: &Tensor, c: usize) -> (Tensor, Tensor) {
    let m = w.cols;
    (
        Tensor::from_vec(c, m, w.data[..c * m].to_vec()),
        Tensor::from_vec(c, m, w.data[c * m..].to_vec()),
    )
}

fn accum(grads: &mut [Option<Tensor>], id: VarId, delta: Tensor) {
    match &mut grads[id.0] {
        Some(t) => t.axpy(1.0, &delta),
        slot @ None => *slot = Some(delta),
    }
}

/// Stable softmax of srow at the selected columns, written into out.
pub(crate) fn softmax_into(srow: &[f64], sel: &[u32], out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &j in sel {
        max = max.max(srow[j as usize]);
    }
    let mut sum = 0.0;
    for (o, &j) in out.iter_mut().zip(sel.iter()) {
        let e = (srow[j as usize] - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// out_i = sum_j weights[i*k+j] * points[idx[i*k+j]]
pub(crate) fn combine_rows(
    weights: &[f64],
    n: usize,
    k: usize,
    points: &[[f64; 3]],
    idx: &[u32],
) -> Tensor {
    let mut value = Tensor::zeros(n, 3);
    for i in 0..n {
        let mut acc = [0.0; 3];
        for j in 0..k {
            let p = &points[idx[i * k + j] as usize];
            let w_ij = weights[i * k + j];
            acc[0] += w_ij * p[0];
            acc[1] += w_ij * p[1];
            acc[2] += w_ij * p[2];
        }
        value.row_mut(i).copy_from_slice(&acc);
    }
    value
}

/// (1/(n k)) sum_i sum_l v_il ||y_i - y_l||^2 over the fixed neighbor rows.
pub(crate) fn mapping_value(yv: &Tensor, idx: &[u32], v: &[f64], k: usize) -> f64 {
    let n = yv.rows;
    let mut total = 0.0;
    for i in 0..n {
        let yi = yv.row(i);
        for j in 0..k {
            let yl = yv.row(idx[i * k + j] as usize);
            let mut d2 = 0.0;
            for c in 0..3 {
                let d = yi[c] - yl[c];
                d2 += d * d;
            }
            total += v[i * k + j] * d2;
        }
    }
    total / (n as f64 * k as f64)
}

/// For each row of `from`, the index of the nearest row of `to` (ties to
/// the lower index) and the sum of squared nearest distances.
pub(crate) fn nearest_rows(from: &Tensor, to: &Tensor) -> (Vec<u32>, f64) {
    let mut nn = Vec::with_capacity(from.rows);
    let mut total = 0.0;
    for i in 0..from.rows {
        let fr = from.row(i);
        let mut best = f64::INFINITY;
        let mut best_j = 0u32;
        for j in 0..to.rows {
            let tr = to.row(j);
            let mut d2 = 0.0;
            for c in 0..3 {
                let d = fr[c] - tr[c];
                d2 += d * d;
            }
            if d2 < best {
                best = d2;
                best_j = j as u32;
            }
        }
        nn.push(best_j);
        total += best;
    }
    (nn, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
    }

    /// Central finite-difference check of d(scalar)/d(input) for a tape
    /// program rebuilt from scratch at each evaluation.
    fn fd_check(build: impl Fn(&mut Tape, VarId) -> VarId, x0: &Tensor, step: f64, tol: f64) {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = build(&mut tape, x);
        let mut grads = tape.backward(y);
        let analytic = grads.take(x).unwrap_or(Tensor::zeros(x0.rows, x0.cols));

        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data[i] += delta;
                let mut t = Tape::new();
                let xid = t.leaf(xp);
                let yid = build(&mut t, xid);
                t.value(yid).item()
            };
            let fd = (eval(step) - eval(-step)) / (2.0 * step);
            let a = analytic.data[i];
            let denom = a.abs().max(fd.abs()).max(1.0);
            assert!(
                (a - fd).abs() / denom < tol,
                "entry {i}: analytic {a}, fd {fd}"
            );
        }
    }

    #[test]
    fn matmul_grad() {
        let mut rng = Rng::from_seed(20);
        let b0 = random(&mut rng, 4, 3);
        let w = Rc::new((0..12).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<_>>());
        let x0 = random(&mut rng, 4, 4);
        fd_check(
            move |t, x| {
                let b = t.leaf(b0.clone());
                let y = t.matmul(x, b);
                t.weighted_flat_sum(y, w.clone())
            },
            &x0,
            1e-5,
            1e-7,
        );
    }

    #[test]
    fn matmul_nt_grad_both_sides() {
        let mut rng = Rng::from_seed(21);
        let a0 = random(&mut rng, 3, 5);
        let b0 = random(&mut rng, 4, 5);
        let w = Rc::new((0..12).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<_>>());
        {
            let b = b0.clone();
            let wc = w.clone();
            fd_check(
                move |t, x| {
                    let bid = t.leaf(b.clone());
                    let y = t.matmul_nt(x, bid);
                    t.weighted_flat_sum(y, wc.clone())
                },
                &a0,
                1e-5,
                1e-7,
            );
        }
        {
            let a = a0.clone();
            fd_check(
                move |t, x| {
                    let aid = t.leaf(a.clone());
                    let y = t.matmul_nt(aid, x);
                    t.weighted_flat_sum(y, w.clone())
                },
                &b0,
                1e-5,
                1e-7,
            );
        }
    }

    #[test]
    fn matmul_bias_and_leaky_grads() {
        let mut rng = Rng::from_seed(22);
        let b0 = random(&mut rng, 4, 6);
        let bias0 = random(&mut rng, 1, 6);
        let w = Rc::new((0..30).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<_>>());
        let x0 = random(&mut rng, 5, 4);
        // wrt x
        {
            let (b0, bias0, w) = (b0.clone(), bias0.clone(), w.clone());
            fd_check(
                move |t, x| {
                    let b = t.leaf(b0.clone());
                    let bias = t.leaf(bias0.clone());
                    let y = t.matmul_bias(x, b, bias);
                    let z = t.leaky_relu(y, 0.2);
                    t.weighted_flat_sum(z, w.clone())
                },
                &x0,
                1e-5,
                1e-6,
            );
        }
        // wrt bias
        fd_check(
            move |t, bias| {
                let x = t.leaf(x0.clone());
                let b = t.leaf(b0.clone());
                let y = t.matmul_bias(x, b, bias);
                let z = t.leaky_relu(y, 0.2);
                t.weighted_flat_sum(z, w.clone())
            },
            &bias0,
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn batch_norm_train_grad_all_inputs() {
        let mut rng = Rng::from_seed(23);
        let x0 = random(&mut rng, 7, 4);
        let s0 = random(&mut rng, 1, 4).map(|v| 1.0 + 0.3 * v);
        let h0 = random(&mut rng, 1, 4);
        let w = Rc::new((0..28).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<_>>());

        // wrt x
        {
            let (s, h, w) = (s0.clone(), h0.clone(), w.clone());
            fd_check(
                move |t, x| {
                    let sid = t.leaf(s.clone());
                    let hid = t.leaf(h.clone());
                    let (y, _) = t.batch_norm_train(x, sid, hid, 1e-5);
                    t.weighted_flat_sum(y, w.clone())
                },
                &x0,
                1e-5,
                1e-6,
            );
        }
        // wrt scale
        {
            let (x, h, w) = (x0.clone(), h0.clone(), w.clone());
            fd_check(
                move |t, s| {
                    let xid = t.leaf(x.clone());
                    let hid = t.leaf(h.clone());
                    let (y, _) = t.batch_norm_train(xid, s, hid, 1e-5);
                    t.weighted_flat_sum(y, w.clone())
                },
                &s0,
                1e-5,
                1e-6,
            );
        }
        // wrt shift
        fd_check(
            move |t, h| {
                let xid = t.leaf(x0.clone());
                let sid = t.leaf(s0.clone());
                let (y, _) = t.batch_norm_train(xid, sid, h, 1e-5);
                t.weighted_flat_sum(y, w.clone())
            },
            &h0,
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn edge_conv_linear_and_max_pool_grads() {
        let mut rng = Rng::from_seed(24);
        let n = 6;
        let k = 3;
        let c_out = 5;
        let idx: Rc<Vec<u32>> = Rc::new(
            (0..n * k)
                .map(|r| {
                    let i = r / k;
                    loop {
                        let j = rng.below(n) as u32;
                        if j != i as u32 {
                            break j;
                        }
                    }
                })
                .collect(),
        );
        let w0 = random(&mut rng, 8, c_out);
        let bias0 = random(&mut rng, 1, c_out);
        let red = Rc::new(
            (0..n * c_out)
                .map(|_| rng.uniform(-1.0, 1.0))
                .collect::<Vec<_>>(),
        );
        let x0 = random(&mut rng, n, 4);
        // wrt point features
        {
            let (w0, bias0, red, idx) = (w0.clone(), bias0.clone(), red.clone(), idx.clone());
            fd_check(
                move |t, x| {
                    let w = t.leaf(w0.clone());
                    let b = t.leaf(bias0.clone());
                    let e = t.edge_conv_linear(x, w, b, idx.clone(), k);
                    let p = t.max_pool_neighbors(e, k);
                    t.weighted_flat_sum(p, red.clone())
                },
                &x0,
                1e-6,
                1e-5,
            );
        }
        // wrt the shared weight
        {
            let (x0, bias0, red, idx) = (x0.clone(), bias0, red, idx);
            fd_check(
                move |t, w| {
                    let x = t.leaf(x0.clone());
                    let b = t.leaf(bias0.clone());
                    let e = t.edge_conv_linear(x, w, b, idx.clone(), k);
                    let p = t.max_pool_neighbors(e, k);
                    t.weighted_flat_sum(p, red.clone())
                },
                &w0,
                1e-6,
                1e-5,
            );
        }
    }

    #[test]
    fn edge_conv_linear_matches_explicit_edge_features() {
        // oracle: build [f_i, f_j - f_i] rows and multiply by the weight
        let mut rng = Rng::from_seed(31);
        let (n, k, c, c_out) = (5, 2, 3, 4);
        let idx: Rc<Vec<u32>> = Rc::new(
            (0..n * k)
                .map(|r| {
                    let i = r / k;
                    loop {
                        let j = rng.below(n) as u32;
                        if j != i as u32 {
                            break j;
                        }
                    }
                })
                .collect(),
        );
        let f0 = random(&mut rng, n, c);
        let w0 = random(&mut rng, 2 * c, c_out);
        let bias0 = random(&mut rng, 1, c_out);

        let mut tape = Tape::new();
        let f = tape.leaf(f0.clone());
        let w = tape.leaf(w0.clone());
        let b = tape.leaf(bias0.clone());
        let out = tape.edge_conv_linear(f, w, b, idx.clone(), k);

        let mut edges = Tensor::zeros(n * k, 2 * c);
        for r in 0..n * k {
            let i = r / k;
            for col in 0..c {
                edges.set(r, col, f0.get(i, col));
                edges.set(r, c + col, f0.get(idx[r] as usize, col) - f0.get(i, col));
            }
        }
        let expect = matmul(&edges, &w0);
        for r in 0..n * k {
            for col in 0..c_out {
                let want = expect.get(r, col) + bias0.data[col];
                assert!(
                    (tape.value(out).get(r, col) - want).abs() < 1e-12,
                    "row {r} col {col}"
                );
            }
        }
    }

    #[test]
    fn max_pool_routes_to_argmax_only() {
        let mut tape = Tape::new();
        let e = tape.leaf(Tensor::from_vec(4, 1, vec![1.0, 5.0, 2.0, 3.0]));
        let p = tape.max_pool_neighbors(e, 2);
        assert_eq!(tape.value(p).data, vec![5.0, 3.0]);
        let mut grads = tape.backward_seeded(p, Tensor::from_vec(2, 1, vec![1.0, 1.0]));
        let de = grads.take(e).unwrap();
        assert_eq!(de.data, vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn normalize_rows_grad_and_degenerate_row() {
        let mut rng = Rng::from_seed(25);
        let w = Rc::new((0..12).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<_>>());
        let x0 = random(&mut rng, 4, 3);
        fd_check(
            move |t, x| {
                let y = t.normalize_rows(x, 1e-12);
                t.weighted_flat_sum(y, w.clone())
            },
            &x0,
            1e-6,
            1e-5,
        );
        // zero row divides by the floor instead of by zero
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(1, 3));
        let y = tape.normalize_rows(x, 1e-12);
        assert!(tape.value(y).data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gather_softmax_and_combine_grads() {
        let mut rng = Rng::from_seed(26);
        let n = 5;
        let k = 3;
        let m = 7;
        let idx: Rc<Vec<u32>> = Rc::new((0..n * k).map(|_| rng.below(m) as u32).collect());
        let points: Rc<Vec<[f64; 3]>> = Rc::new(
            (0..m)
                .map(|_| [rng.normal(), rng.normal(), rng.normal()])
                .collect(),
        );
        let w = Rc::new(
            (0..n * 3)
                .map(|_| rng.uniform(-1.0, 1.0))
                .collect::<Vec<_>>(),
        );
        let x0 = random(&mut rng, n, m);
        fd_check(
            move |t, s| {
                let wts = t.gather_softmax(s, idx.clone(), k);
                let y = t.combine(wts, points.clone(), idx.clone());
                t.weighted_flat_sum(y, w.clone())
            },
            &x0,
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn chamfer_grad_and_value() {
        let mut rng = Rng::from_seed(27);
        let q0 = random(&mut rng, 6, 3);
        let x0 = random(&mut rng, 5, 3);
        fd_check(
            move |t, p| {
                let q = t.leaf(q0.clone());
                t.chamfer(p, q)
            },
            &x0,
            1e-6,
            1e-5,
        );

        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::from_vec(1, 3, vec![0.0, 0.0, 0.0]));
        let q = tape.leaf(Tensor::from_vec(1, 3, vec![1.0, 0.0, 0.0]));
        let cd = tape.chamfer(p, q);
        assert_eq!(tape.value(cd).item(), 2.0);
    }

    #[test]
    fn mapping_loss_grad() {
        let mut rng = Rng::from_seed(28);
        let n = 6;
        let k = 2;
        let idx: Rc<Vec<u32>> = Rc::new(
            (0..n * k)
                .map(|r| {
                    let i = r / k;
                    loop {
                        let j = rng.below(n) as u32;
                        if j != i as u32 {
                            break j;
                        }
                    }
                })
                .collect(),
        );
        let v: Rc<Vec<f64>> = Rc::new((0..n * k).map(|_| rng.uniform(0.1, 1.0)).collect());
        let x0 = random(&mut rng, n, 3);
        fd_check(
            move |t, y| t.mapping_loss(y, idx.clone(), v.clone(), k),
            &x0,
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn slice_and_concat_grads() {
        let mut rng = Rng::from_seed(29);
        let w = Rc::new((0..8).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<_>>());
        let x0 = random(&mut rng, 6, 2);
        fd_check(
            move |t, x| {
                let a = t.slice_rows(x, 0, 2);
                let b = t.slice_rows(x, 4, 2);
                let y = t.concat_cols(&[a, b]);
                t.weighted_flat_sum(y, w.clone())
            },
            &x0,
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = Rng::from_seed(30);
        let x0 = random(&mut rng, 3, 3);
        let mut tape = Tape::new();
        let x = tape.leaf(x0);
        let y = tape.leaky_relu(x, 0.2);
        let mut grads = tape.backward_seeded(y, Tensor::zeros(3, 3));
        let dx = grads.take(x).unwrap();
        assert!(dx.data.iter().all(|&v| v == 0.0));
    }
}
