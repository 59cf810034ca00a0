//! Generate a small two-block synthetic dataset so the full pipeline can be
//! driven end to end:
//!
//! ```text
//! cargo run -p mgt-cli --example make_toy -- toy/
//! ```
//!
//! Writes graph.txt, features.mgtf, labels.csv, edge_labels.csv.

use std::path::PathBuf;

use mgt_core::features::write_features;
use mgt_core::graph::{write_edge_labels, write_labels, EdgeLabelSet, Split};
use mgt_core::synth::{block_features, block_labels, sbm_two_block};

fn main() -> anyhow::Result<()> {
    let dir: PathBuf = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "toy".to_string())
        .into();
    std::fs::create_dir_all(&dir)?;

    let n = 400;
    let (graph, blocks) = sbm_two_block(n, 0.1, 0.01, 42)?;
    let mut text = String::from("# two-block synthetic graph\n");
    for (u, v) in graph.edges() {
        if u < v {
            text.push_str(&format!("{u} {v}\n"));
        }
    }
    std::fs::write(dir.join("graph.txt"), text)?;

    write_features(&dir.join("features.mgtf"), &block_features(&blocks, 32, 42)?)?;
    write_labels(&dir.join("labels.csv"), &block_labels(&blocks, 0.5, 0.2, 42))?;

    let mut entries = Vec::new();
    for (i, (u, v)) in graph.edges().filter(|&(u, v)| u < v).enumerate() {
        if blocks[u as usize] != blocks[v as usize] {
            continue;
        }
        let split = match i % 10 {
            0 => Split::Test,
            1 => Split::Valid,
            _ => Split::Train,
        };
        entries.push((u, v, true, split));
        if entries.len() >= 300 {
            break;
        }
    }
    write_edge_labels(&dir.join("edge_labels.csv"), &EdgeLabelSet { entries })?;

    println!(
        "wrote graph.txt ({} nodes, {} edges), features.mgtf, labels.csv, edge_labels.csv under {}",
        graph.node_count(),
        graph.edge_count(),
        dir.display()
    );
    Ok(())
}
