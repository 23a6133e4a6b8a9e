//! Self-contained oracle suites: brute-force cross-checks of the kNN
//! graph, Chamfer distance, argmax matching, and the full
//! analytic-versus-finite-difference gradient comparison. Used by the
//! `selfcheck` subcommand and the acceptance tests.

use crate::affinity::SimilarityMode;
use crate::feature_net::{forward_batch, FeatureField, Mode, NetworkParams};
use crate::geometry::{knn_euclidean, squared_distance, PointCloud};
use crate::losses::{
    build_pair_losses, capture_selections, chamfer_distance, total_loss_frozen, LossWeights,
};
use crate::matcher::match_fields;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub fn random_cloud(rng: &mut Rng, n: usize) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| [rng.normal(), rng.normal(), rng.normal()])
            .collect(),
        "random",
    )
}

pub fn random_field(rng: &mut Rng, n: usize, c: usize) -> FeatureField {
    FeatureField {
        features: Tensor::from_vec(n, c, (0..n * c).map(|_| rng.normal()).collect()),
    }
}

/// Exhaustive Chamfer reimplementation (independent of the kernels the
/// pipeline uses).
pub fn chamfer_brute_force(p: &PointCloud, q: &PointCloud) -> f64 {
    let directed = |a: &PointCloud, b: &PointCloud| {
        a.points
            .iter()
            .map(|pa| {
                b.points
                    .iter()
                    .map(|pb| squared_distance(pa, pb))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / a.len() as f64
    };
    directed(p, q) + directed(q, p)
}

/// Chamfer oracle equivalence over random cloud pairs. Returns the
/// maximum relative deviation.
pub fn check_chamfer_oracle(trials: usize, max_n: usize, seed: u64) -> f64 {
    let mut rng = Rng::from_seed(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let np = 1 + rng.below(max_n);
        let nq = 1 + rng.below(max_n);
        let p = random_cloud(&mut rng, np);
        let q = random_cloud(&mut rng, nq);
        let fast = chamfer_distance(&p, &q).expect("non-empty clouds");
        let brute = chamfer_brute_force(&p, &q);
        let rel = (fast - brute).abs() / brute.abs().max(1e-300);
        worst = worst.max(rel);
    }
    worst
}

/// kNN graphs against an independent exhaustive sort. Returns the number
/// of mismatching rows (0 = bitwise identical tables).
pub fn check_knn_oracle(trials: usize, k: usize, seed: u64) -> usize {
    let mut rng = Rng::from_seed(seed);
    let mut mismatches = 0;
    for _ in 0..trials {
        let n = (k + 2) + rng.below(64_usize.saturating_sub(k + 2).max(1));
        let pc = random_cloud(&mut rng, n);
        let graph = knn_euclidean(&pc, k, true).expect("k fits");
        for i in 0..n {
            let mut all: Vec<(f64, u32)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (squared_distance(&pc.points[i], &pc.points[j]), j as u32))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let expect: Vec<u32> = all.iter().take(k).map(|x| x.1).collect();
            if graph.row(i) != expect.as_slice() {
                mismatches += 1;
            }
        }
    }
    mismatches
}

/// match() row argmax against brute-force enumeration, and the identity
/// "argmax over top-k softmax weights = global argmax" on every row.
/// Returns the number of disagreeing rows.
pub fn check_argmax_oracle(trials: usize, k: usize, seed: u64) -> usize {
    let mut rng = Rng::from_seed(seed);
    let mut mismatches = 0;
    for _ in 0..trials {
        let n = 8 + rng.below(48);
        let fx = random_field(&mut rng, n, 6);
        let fy = random_field(&mut rng, n, 6);
        let map = match_fields(&fx, &fy, SimilarityMode::Cosine, k).expect("valid fields");
        for i in 0..n {
            let mut best = f64::NEG_INFINITY;
            let mut best_j = 0u32;
            for j in 0..n {
                let a = fx.row(i);
                let b = fy.row(j);
                let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                let s = a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>() / (na * nb);
                if s > best {
                    best = s;
                    best_j = j as u32;
                }
            }
            if map.target_index[i] != best_j {
                mismatches += 1;
            }
        }
    }
    mismatches
}

/// Report of the analytic-vs-finite-difference comparison.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub entries_checked: usize,
}

/// Checks d(total objective)/d(parameter) for every trainable entry of
/// the network against central finite differences with all discrete
/// selections frozen at the base point. `stride` > 1 checks every
/// stride-th entry of each tensor (entry 0 always included).
pub fn gradient_check(
    params: &NetworkParams,
    x: &PointCloud,
    y: &PointCloud,
    w: &LossWeights,
    sim: SimilarityMode,
    fd_step: f64,
    stride: usize,
) -> GradCheckReport {
    let mut pass = forward_batch(params, &[x, y], Mode::Train).expect("forward");
    let fx = FeatureField {
        features: pass.features(0).clone(),
    };
    let fy = FeatureField {
        features: pass.features(1).clone(),
    };
    let sel = capture_selections(sim, x, y, &fx, &fy, w).expect("selections");

    let fx_node = pass.cloud_feature_node(0);
    let fy_node = pass.cloud_feature_node(1);
    let nodes = build_pair_losses(&mut pass.tape, fx_node, fy_node, x, y, w, sim).expect("losses");
    let mut grads = pass.tape.backward(nodes.total);
    let net_grads = pass.parameter_grads(&mut grads);

    let loss_of = |p: &NetworkParams| -> f64 {
        let pass = forward_batch(p, &[x, y], Mode::Train).expect("forward");
        let fx = FeatureField {
            features: pass.features(0).clone(),
        };
        let fy = FeatureField {
            features: pass.features(1).clone(),
        };
        total_loss_frozen(sim, x, y, &fx, &fy, w, &sel).total
    };

    let mut names = Vec::new();
    params.for_each_trainable(|name, t| names.push((name.to_string(), t.len())));

    let mut max_rel_err: f64 = 0.0;
    let mut entries_checked = 0;
    for (name, len) in names {
        let analytic = net_grads.get(&name).expect("grad present").clone();
        let mut i = 0;
        while i < len {
            let mut plus = params.clone();
            plus.for_each_trainable_mut(|n, t| {
                if n == name {
                    t.data[i] += fd_step;
                }
            });
            let mut minus = params.clone();
            minus.for_each_trainable_mut(|n, t| {
                if n == name {
                    t.data[i] -= fd_step;
                }
            });
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * fd_step);
            let a = analytic.data[i];
            let denom = a.abs().max(fd.abs()).max(1.0);
            max_rel_err = max_rel_err.max((a - fd).abs() / denom);
            entries_checked += 1;
            i += stride.max(1);
        }
    }
    GradCheckReport {
        max_rel_err,
        entries_checked,
    }
}
