//! Deterministic synthetic graphs and features for tests and benchmarks.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::Result;
use crate::features::FeatureMatrix;
use crate::graph::{Graph, LabelSet, NodeId, Split};
use crate::rng::stream;

/// Undirected G(n, p) via geometric skipping over the pairs above the
/// diagonal; O(edges) for sparse p.
pub fn erdos_renyi(n: usize, p: f64, seed: u64) -> Result<Graph> {
    assert!((0.0..1.0).contains(&p));
    let mut rng = stream(seed, "erdos-renyi");
    let mut edges: Vec<(NodeId, NodeId)> = Vec::new();
    if p > 0.0 {
        let log1mp = (1.0 - p).ln();
        let mut u = 0usize;
        let mut v = 0usize; // offset within row u, counts j = u + 1 + v
        loop {
            let r: f64 = rng.random();
            let skip = ((1.0 - r).ln() / log1mp).floor() as usize;
            v += skip;
            while u < n && v >= n - u - 1 {
                v -= n - u - 1;
                u += 1;
            }
            if u >= n.saturating_sub(1) {
                break;
            }
            edges.push((u as NodeId, (u + 1 + v) as NodeId));
            v += 1;
            while u < n && v >= n - u - 1 {
                v -= n - u - 1;
                u += 1;
            }
            if u >= n.saturating_sub(1) {
                break;
            }
        }
    }
    Graph::from_edges(n, &edges, true)
}

/// Two-block stochastic block model; the first half of the nodes is block 0.
pub fn sbm_two_block(n: usize, p_in: f64, p_out: f64, seed: u64) -> Result<(Graph, Vec<usize>)> {
    let mut rng = stream(seed, "sbm");
    let half = n / 2;
    let blocks: Vec<usize> = (0..n).map(|v| usize::from(v >= half)).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if blocks[i] == blocks[j] { p_in } else { p_out };
            if rng.random::<f64>() < p {
                edges.push((i as NodeId, j as NodeId));
            }
        }
    }
    let graph = Graph::from_edges(n, &edges, true)?;
    Ok((graph, blocks))
}

/// Per-block Gaussian mean plus unit Gaussian noise per node.
pub fn block_features(blocks: &[usize], dim: usize, seed: u64) -> Result<FeatureMatrix> {
    let mut rng = stream(seed, "features");
    let num_blocks = blocks.iter().copied().max().unwrap_or(0) + 1;
    let mut gauss = move || -> f64 {
        loop {
            let u1: f64 = rng.random();
            if u1 <= f64::MIN_POSITIVE {
                continue;
            }
            let u2: f64 = rng.random();
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    };
    let means: Vec<Vec<f64>> = (0..num_blocks)
        .map(|_| (0..dim).map(|_| gauss()).collect())
        .collect();
    let mut data = Vec::with_capacity(blocks.len() * dim);
    for &b in blocks {
        for &m in &means[b] {
            data.push((m + gauss()) as f32);
        }
    }
    FeatureMatrix::new(blocks.len(), dim, data)
}

/// Per-node class labels from block ids, shuffled into splits by fraction.
pub fn block_labels(
    blocks: &[usize],
    train_frac: f64,
    valid_frac: f64,
    seed: u64,
) -> LabelSet {
    let mut rng = stream(seed, "splits");
    let mut order: Vec<usize> = (0..blocks.len()).collect();
    order.shuffle(&mut rng);
    let n_train = (blocks.len() as f64 * train_frac).round() as usize;
    let n_valid = (blocks.len() as f64 * valid_frac).round() as usize;
    let entries = order
        .iter()
        .enumerate()
        .map(|(rank, &v)| {
            let split = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_valid {
                Split::Valid
            } else {
                Split::Test
            };
            (v as NodeId, blocks[v], split)
        })
        .collect();
    LabelSet {
        entries,
        num_classes: blocks.iter().copied().max().unwrap_or(0) + 1,
    }
}
