//! Positional encodings from first-order LINE embeddings.
//!
//! Each node gets a trainable vector; SGD over edges pushes connected pairs
//! together (`log sigma(u_i . u_j)`) and sampled non-neighbors apart.
//! Negatives are drawn proportional to degree^0.75. The resulting table is
//! added to projected node features at the encoder and decoder inputs, so
//! its dimension must equal the model hidden size.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::graph::{Graph, NodeId};
use crate::rng::stream;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LineConfig {
    pub dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub negatives_per_edge: usize,
    pub rng_seed: u64,
}

impl Default for LineConfig {
    fn default() -> Self {
        LineConfig {
            dim: 64,
            epochs: 5,
            learning_rate: 0.025,
            negatives_per_edge: 5,
            rng_seed: 0,
        }
    }
}

impl LineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidParameter("LINE dim must be >= 1".into()));
        }
        if self.negatives_per_edge == 0 {
            return Err(Error::InvalidParameter(
                "negatives_per_edge must be >= 1".into(),
            ));
        }
        if self.learning_rate.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::InvalidParameter(
                "learning_rate must be > 0".into(),
            ));
        }
        Ok(())
    }
}

struct NegativeTable {
    cumulative: Vec<f64>,
}

impl NegativeTable {
    fn new(g: &Graph) -> Self {
        let mut cumulative = Vec::with_capacity(g.node_count());
        let mut acc = 0.0;
        for v in 0..g.node_count() {
            acc += (g.out_degree(v as NodeId) as f64).powf(0.75);
            cumulative.push(acc);
        }
        NegativeTable { cumulative }
    }

    fn sample(&self, rng: &mut impl Rng) -> NodeId {
        let total = *self.cumulative.last().unwrap();
        let x: f64 = rng.random::<f64>() * total;
        self.cumulative.partition_point(|&c| c <= x) as NodeId
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `log sigma(x)` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn init_table(n: usize, cfg: &LineConfig) -> Vec<f64> {
    let mut rng = stream(cfg.rng_seed, "line");
    let half = 0.5 / cfg.dim as f64;
    (0..n * cfg.dim)
        .map(|_| rng.random::<f64>() * 2.0 * half - half)
        .collect()
}

/// Train first-order LINE embeddings; deterministic given the seed.
pub fn train_line(g: &Graph, cfg: &LineConfig) -> Result<FeatureMatrix> {
    cfg.validate()?;
    if g.node_count() == 0 {
        return Err(Error::Invalid("LINE on an empty graph".into()));
    }
    if g.edge_count() == 0 {
        return Err(Error::Invalid("LINE needs at least one edge".into()));
    }
    let n = g.node_count();
    let dim = cfg.dim;
    let mut emb = init_table(n, cfg);
    let negatives = NegativeTable::new(g);
    let mut rng = stream(cfg.rng_seed, "line-sgd");

    let mut edges: Vec<(NodeId, NodeId)> = g.edges().collect();
    let mut center_delta = vec![0.0f64; dim];
    for _ in 0..cfg.epochs {
        edges.shuffle(&mut rng);
        for &(u, v) in &edges {
            if u == v {
                continue;
            }
            let lr = cfg.learning_rate;
            center_delta.fill(0.0);
            // positive target, then sampled negatives
            for neg in 0..=cfg.negatives_per_edge {
                let (target, label) = if neg == 0 {
                    (v, 1.0)
                } else {
                    // reject the endpoints themselves; give up after a few tries
                    let mut w = negatives.sample(&mut rng);
                    let mut tries = 0;
                    while (w == u || w == v) && tries < 8 {
                        w = negatives.sample(&mut rng);
                        tries += 1;
                    }
                    if w == u || w == v {
                        continue;
                    }
                    (w, 0.0)
                };
                let (urow, trow) = two_rows(&mut emb, u as usize, target as usize, dim);
                let dot: f64 = urow.iter().zip(trow.iter()).map(|(a, b)| a * b).sum();
                let gscale = (label - sigmoid(dot)) * lr;
                for i in 0..dim {
                    center_delta[i] += gscale * trow[i];
                    trow[i] += gscale * urow[i];
                }
            }
            let urow = &mut emb[u as usize * dim..(u as usize + 1) * dim];
            for i in 0..dim {
                urow[i] += center_delta[i];
            }
        }
    }
    FeatureMatrix::new(n, dim, emb.iter().map(|&v| v as f32).collect())
}

/// Disjoint mutable views of rows `a` and `b` (a != b).
fn two_rows(data: &mut [f64], a: usize, b: usize, dim: usize) -> (&mut [f64], &mut [f64]) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = data.split_at_mut(b * dim);
        (&mut lo[a * dim..(a + 1) * dim], &mut hi[..dim])
    } else {
        let (lo, hi) = data.split_at_mut(a * dim);
        let (bu, au) = (&mut lo[b * dim..(b + 1) * dim], &mut hi[..dim]);
        (au, bu)
    }
}

/// Negative-sampling objective estimate with a fixed evaluation draw of
/// negatives; comparable across tables of the same graph and seed.
pub fn line_loss_estimate(g: &Graph, table: &FeatureMatrix, cfg: &LineConfig) -> f64 {
    let mut rng = stream(cfg.rng_seed, "line-eval");
    let negatives = NegativeTable::new(g);
    let dot = |a: NodeId, b: NodeId| -> f64 {
        table
            .row(a as usize)
            .iter()
            .zip(table.row(b as usize))
            .map(|(&x, &y)| x as f64 * y as f64)
            .sum()
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for (u, v) in g.edges() {
        if u == v {
            continue;
        }
        let mut loss = -log_sigmoid(dot(u, v));
        for _ in 0..cfg.negatives_per_edge {
            let w = negatives.sample(&mut rng);
            if w == u || w == v {
                continue;
            }
            loss -= log_sigmoid(-dot(u, w));
        }
        total += loss;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// All-zero table: disables positional information (ablation control).
pub fn zero_encoding(n: usize, dim: usize) -> Result<FeatureMatrix> {
    if n == 0 || dim == 0 {
        return Err(Error::InvalidParameter(
            "zero_encoding wants n >= 1 and dim >= 1".into(),
        ));
    }
    Ok(FeatureMatrix::zeros(n, dim))
}
