//! Inference-efficiency comparison: PPR-sampled sequences against a naive
//! full-neighborhood stand-in.
//!
//! Both modes produce a seed embedding through the same encoder. The PPR
//! mode pushes locally and gathers features for the top-k context only; the
//! full-neighborhood mode expands the whole L-hop neighborhood, mean-
//! aggregates its feature rows into the seed row, and encodes a
//! length-capped sequence. The interesting quantity is how many feature
//! rows each mode has to touch per seed.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::downstream::probe::{linear_probe, LabeledRows, ProbeConfig};
use crate::downstream::EvalReport;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::graph::{Graph, LabelSet, NodeId};
use crate::model::Model;
use crate::nn::{Mode, Tape, Tensor};
use crate::ppr::{top_k_sequence, PprConfig, PushWorkspace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InferenceMode {
    PprSequence,
    FullNeighborhood,
}

impl InferenceMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            InferenceMode::PprSequence => "ppr_sequence",
            InferenceMode::FullNeighborhood => "full_neighborhood",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ppr_sequence" => Some(InferenceMode::PprSequence),
            "full_neighborhood" => Some(InferenceMode::FullNeighborhood),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BenchConfig {
    pub alpha: f64,
    /// Push threshold for the PPR mode; the bench default is looser than
    /// the sampling default since inference needs only a coarse top-k.
    pub epsilon: f64,
    pub top_k: usize,
    /// Neighborhood radius of the full mode (the encoder's receptive hops).
    pub hops: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            alpha: 0.85,
            epsilon: 1e-4,
            top_k: 32,
            hops: 2,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchRow {
    pub mode: String,
    pub seed: NodeId,
    pub nodes_touched: usize,
    pub micros: u64,
}

struct NeighborhoodScratch {
    visited: Vec<bool>,
    frontier: Vec<NodeId>,
    next: Vec<NodeId>,
    members: Vec<NodeId>,
}

impl NeighborhoodScratch {
    fn new(n: usize) -> Self {
        NeighborhoodScratch {
            visited: vec![false; n],
            frontier: Vec::new(),
            next: Vec::new(),
            members: Vec::new(),
        }
    }

    /// Nodes within `hops` of the seed, including the seed, in BFS order.
    fn expand(&mut self, g: &Graph, seed: NodeId, hops: usize) -> &[NodeId] {
        for &v in &self.members {
            self.visited[v as usize] = false;
        }
        self.members.clear();
        self.frontier.clear();
        self.visited[seed as usize] = true;
        self.members.push(seed);
        self.frontier.push(seed);
        for _ in 0..hops {
            self.next.clear();
            for &u in &self.frontier {
                for &v in g.out_neighbors(u) {
                    if !self.visited[v as usize] {
                        self.visited[v as usize] = true;
                        self.members.push(v);
                        self.next.push(v);
                    }
                }
            }
            std::mem::swap(&mut self.frontier, &mut self.next);
        }
        &self.members
    }
}

fn encode_rows(
    model: &Model<f32>,
    rows: Tensor<f32>,
    pe_rows: Tensor<f32>,
) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let x = tape.leaf(rows);
    let p = tape.leaf(pe_rows);
    let h0 = model.project_input(&mut tape, x, p);
    let h = model.encode(&mut tape, h0, None, &mut Mode::Eval)?;
    Ok(tape.value(h).row(0).to_vec())
}

fn gather(
    nodes: &[NodeId],
    features: &FeatureMatrix,
    pe: &FeatureMatrix,
) -> (Tensor<f32>, Tensor<f32>) {
    let mut x = Tensor::zeros(nodes.len(), features.dim());
    let mut p = Tensor::zeros(nodes.len(), pe.dim());
    for (row, &v) in nodes.iter().enumerate() {
        x.row_mut(row).copy_from_slice(features.row(v as usize));
        p.row_mut(row).copy_from_slice(pe.row(v as usize));
    }
    (x, p)
}

/// Time both inference paths per seed. Returns one row per (mode, seed) and
/// a summary report; when labels are supplied a linear probe on each mode's
/// embeddings adds a downstream accuracy per mode.
#[allow(clippy::too_many_arguments)]
pub fn benchmark_inference(
    graph: &Graph,
    features: &FeatureMatrix,
    pe: &FeatureMatrix,
    model: &Model<f32>,
    seeds: &[NodeId],
    modes: &[InferenceMode],
    cfg: &BenchConfig,
    labels: Option<&LabelSet>,
) -> Result<(Vec<BenchRow>, EvalReport)> {
    features.check_matches(graph)?;
    pe.check_matches(graph)?;
    if modes.is_empty() {
        return Err(Error::InvalidParameter("no benchmark modes given".into()));
    }
    for &s in seeds {
        graph.check_node(s)?;
    }
    let ppr_cfg = PprConfig {
        alpha: cfg.alpha,
        epsilon: cfg.epsilon,
        max_iters: 1000,
        top_k: cfg.top_k,
    };

    let mut rows = Vec::with_capacity(modes.len() * seeds.len());
    let mut embeddings: BTreeMap<&'static str, Vec<Vec<f32>>> = BTreeMap::new();
    let mut push_ws = PushWorkspace::new(graph.node_count());
    let mut hood = NeighborhoodScratch::new(graph.node_count());

    for &mode in modes {
        let mut mode_embs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let start = Instant::now();
            let (emb, touched) = match mode {
                InferenceMode::PprSequence => {
                    let scores = push_ws.push(graph, seed, &ppr_cfg)?;
                    let seq = top_k_sequence(&scores, &ppr_cfg);
                    let nodes = seq.nodes();
                    let (x, p) = gather(&nodes, features, pe);
                    (encode_rows(model, x, p)?, nodes.len())
                }
                InferenceMode::FullNeighborhood => {
                    let members = hood.expand(graph, seed, cfg.hops);
                    let touched = members.len();
                    // cap the encoded sequence, aggregate over everything
                    let take = members.len().min(cfg.top_k + 1);
                    let (mut x, p) = gather(&members[..take], features, pe);
                    let d = features.dim();
                    let mut mean = vec![0.0f32; d];
                    for &v in members.iter() {
                        for (m, &f) in mean.iter_mut().zip(features.row(v as usize)) {
                            *m += f;
                        }
                    }
                    let inv = 1.0 / touched as f32;
                    for (j, m) in mean.iter().enumerate() {
                        x.set(0, j, m * inv);
                    }
                    (encode_rows(model, x, p)?, touched)
                }
            };
            let micros = start.elapsed().as_micros() as u64;
            rows.push(BenchRow {
                mode: mode.as_str().to_string(),
                seed,
                nodes_touched: touched,
                micros,
            });
            mode_embs.push(emb);
        }
        embeddings.insert(mode.as_str(), mode_embs);
    }

    let mut timing = BTreeMap::new();
    let mut metrics = BTreeMap::new();
    for &mode in modes {
        let name = mode.as_str();
        let mode_rows: Vec<&BenchRow> = rows.iter().filter(|r| r.mode == name).collect();
        let n = mode_rows.len().max(1) as f64;
        let mean_micros = mode_rows.iter().map(|r| r.micros as f64).sum::<f64>() / n;
        let mean_touched = mode_rows.iter().map(|r| r.nodes_touched as f64).sum::<f64>() / n;
        timing.insert(format!("{name}_mean_micros"), mean_micros);
        timing.insert(format!("{name}_mean_nodes_touched"), mean_touched);
    }
    if let (Some(&ppr), Some(&full)) = (
        timing.get("ppr_sequence_mean_micros"),
        timing.get("full_neighborhood_mean_micros"),
    ) {
        if ppr > 0.0 {
            timing.insert("speedup".to_string(), full / ppr);
        }
    }

    if let Some(labels) = labels {
        let row_of: BTreeMap<NodeId, usize> =
            seeds.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        for &mode in modes {
            let embs = &embeddings[mode.as_str()];
            let hidden = model.dims.hidden;
            let mut data = Vec::with_capacity(embs.len() * hidden);
            for e in embs {
                data.extend_from_slice(e);
            }
            let table = FeatureMatrix::new(embs.len(), hidden, data)?;
            let labeled: LabeledRows = labels
                .entries
                .iter()
                .filter_map(|&(node, class, split)| {
                    row_of.get(&node).map(|&r| (r, class, split))
                })
                .collect();
            if labeled.iter().any(|&(_, _, s)| s == crate::graph::Split::Train) {
                let (_, report) =
                    linear_probe(&table, &labeled, labels.num_classes, &ProbeConfig::default())?;
                if let Some(&acc) = report.metrics.get("accuracy") {
                    metrics.insert(format!("accuracy_{}", mode.as_str()), acc);
                }
            }
        }
    }

    let report = EvalReport::new(
        "benchmark_inference",
        metrics,
        timing,
        serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null),
    );
    Ok((rows, report))
}

/// `mode,seed,nodes_touched,micros` rows.
pub fn write_bench_csv(path: &std::path::Path, rows: &[BenchRow]) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "mode,seed,nodes_touched,micros").map_err(|e| Error::io(path, e))?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.mode, r.seed, r.nodes_touched, r.micros)
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
