//! Shared setup for the criterion benchmarks: a mid-sized random graph with
//! features, sequences, and a desk-scale model.

use mgt_core::features::FeatureMatrix;
use mgt_core::graph::{Graph, NodeId};
use mgt_core::model::{Model, ModelDims};
use mgt_core::ppr::{sample_sequences, NodeSequence, PprConfig};
use mgt_core::synth::erdos_renyi;

pub struct BenchWorld {
    pub graph: Graph,
    pub features: FeatureMatrix,
    pub pe: FeatureMatrix,
    pub sequences: Vec<NodeSequence>,
    pub model: Model<f32>,
    pub ppr: PprConfig,
}

pub fn bench_world(n: usize, avg_degree: f64, feat_dim: usize, hidden: usize) -> BenchWorld {
    let graph = erdos_renyi(n, avg_degree / (n as f64 - 1.0), 99).expect("graph");
    let features = FeatureMatrix::new(
        n,
        feat_dim,
        (0..n * feat_dim)
            .map(|i| ((i as f32) * 0.37).sin() * 0.5)
            .collect(),
    )
    .expect("features");
    let pe = FeatureMatrix::new(
        n,
        hidden,
        (0..n * hidden)
            .map(|i| ((i as f32) * 0.11).cos() * 0.1)
            .collect(),
    )
    .expect("pe");
    let ppr = PprConfig {
        alpha: 0.85,
        epsilon: 1e-5,
        max_iters: 1000,
        top_k: 32,
    };
    let seeds: Vec<NodeId> = (0..64).map(|i| (i * (n / 64)) as NodeId).collect();
    let sequences = sample_sequences(&graph, &seeds, &ppr).expect("sequences");
    let model = Model::init(
        ModelDims {
            feat_dim,
            hidden,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: (hidden / 64).max(1),
        },
        99,
    );
    BenchWorld {
        graph,
        features,
        pe,
        sequences,
        model,
        ppr,
    }
}
