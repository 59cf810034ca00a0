//! Subcommand implementations. Every command loads its inputs, computes,
//! writes artifacts under the out directory, and records a manifest.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::seq::SliceRandom;

use mgt_core::downstream::{
    benchmark_inference, build_augmented_features, embed, finetune_link, finetune_node,
    linear_probe, write_bench_csv, InferenceMode, LabeledRows,
};
use mgt_core::features::{
    load_features, read_matrix, write_matrix, FeatureMatrix, MAGIC_EMBEDDING, MAGIC_POSENC,
};
use mgt_core::graph::{
    load_edge_labels, load_edge_list, load_labels, Graph, NodeId, NodeIdMap,
};
use mgt_core::model::{CheckpointMeta, Model};
use mgt_core::posenc::train_line;
use mgt_core::ppr::{read_sequences, sample_sequences, write_sequences, NodeSequence};
use mgt_core::pretrain::{train, write_log_csv};
use mgt_core::rng::stream;

use crate::config::{RunConfig, SeedSpec};
use crate::manifest::ManifestBuilder;

fn ensure_out(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating out dir {}", cfg.out_dir.display()))
}

fn manifest_for(command: &str, cfg: &RunConfig) -> Result<ManifestBuilder> {
    // out_dir and thread count are execution details, not run identity
    let mut identity = cfg.clone();
    identity.out_dir = PathBuf::new();
    identity.threads = 0;
    let json = serde_json::to_string_pretty(&identity)?;
    Ok(ManifestBuilder::new(command, cfg.rng_seed, &json))
}

fn load_graph(cfg: &RunConfig, builder: &mut ManifestBuilder) -> Result<(Graph, NodeIdMap)> {
    let path = cfg.require("graph", &cfg.paths.graph)?;
    builder.input(&path)?;
    let (graph, map) = load_edge_list(&path, cfg.undirected)?;
    Ok((graph, map))
}

fn resolve_seeds(spec: &SeedSpec, n: usize, rng_seed: u64) -> Result<Vec<NodeId>> {
    match spec {
        SeedSpec::All => Ok((0..n as NodeId).collect()),
        SeedSpec::Fraction(f) => {
            let mut order: Vec<NodeId> = (0..n as NodeId).collect();
            order.shuffle(&mut stream(rng_seed, "seed-select"));
            let take = ((n as f64) * f).ceil() as usize;
            let mut picked: Vec<NodeId> = order.into_iter().take(take.min(n)).collect();
            picked.sort_unstable();
            Ok(picked)
        }
        SeedSpec::File(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading seed file {}", path.display()))?;
            let mut seeds = Vec::new();
            for (idx, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let v: NodeId = line.parse().with_context(|| {
                    format!("{}:{}: bad node id {line:?}", path.display(), idx + 1)
                })?;
                seeds.push(v);
            }
            Ok(seeds)
        }
    }
}

pub fn cmd_sample(cfg: &RunConfig, seed_spec: &SeedSpec) -> Result<()> {
    ensure_out(cfg)?;
    let mut manifest = manifest_for("sample", cfg)?;
    let (graph, map) = load_graph(cfg, &mut manifest)?;
    if let SeedSpec::File(path) = seed_spec {
        manifest.input(path)?;
    }
    let seeds = resolve_seeds(seed_spec, graph.node_count(), cfg.rng_seed)?;
    let sequences = sample_sequences(&graph, &seeds, &cfg.ppr)?;

    let seq_path = cfg.out_dir.join("sequences.mgts");
    write_sequences(&seq_path, &sequences)?;
    manifest.artifact(&seq_path)?;
    let map_path = cfg.out_dir.join("nodemap.csv");
    map.write_csv(&map_path)?;
    manifest.artifact(&map_path)?;
    let manifest_path = manifest.write(&cfg.out_dir)?;

    let mean_len: f64 =
        sequences.iter().map(|s| s.len() as f64).sum::<f64>() / sequences.len().max(1) as f64;
    println!(
        "sampled {} sequences (mean length {:.1}) -> {}",
        sequences.len(),
        mean_len,
        seq_path.display()
    );
    println!("manifest: {}", manifest_path.display());
    Ok(())
}

pub fn cmd_encode_pos(cfg: &RunConfig) -> Result<()> {
    ensure_out(cfg)?;
    let mut manifest = manifest_for("encode-pos", cfg)?;
    let (graph, _) = load_graph(cfg, &mut manifest)?;
    let mut line_cfg = cfg.line.clone();
    line_cfg.rng_seed = cfg.rng_seed;
    let table = train_line(&graph, &line_cfg)?;
    let pe_path = cfg.out_dir.join("pe.mgtp");
    write_matrix(&pe_path, MAGIC_POSENC, &table)?;
    manifest.artifact(&pe_path)?;
    let manifest_path = manifest.write(&cfg.out_dir)?;
    println!(
        "trained {}x{} positional table -> {}",
        table.n(),
        table.dim(),
        pe_path.display()
    );
    println!("manifest: {}", manifest_path.display());
    Ok(())
}

fn load_pe(path: &Path) -> Result<FeatureMatrix> {
    Ok(read_matrix(path, MAGIC_POSENC)?)
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<()> {
    ensure_out(cfg)?;
    let mut manifest = manifest_for("pretrain", cfg)?;
    let seq_path = cfg.require("sequences", &cfg.paths.sequences)?;
    let feat_path = cfg.require("features", &cfg.paths.features)?;
    let pe_path = cfg.require("pe", &cfg.paths.pe)?;
    manifest.input(&seq_path)?;
    manifest.input(&feat_path)?;
    manifest.input(&pe_path)?;

    let sequences = read_sequences(&seq_path)?;
    let features = load_features(&feat_path, None)?;
    let pe = load_pe(&pe_path)?;

    let outcome = train(&features, &pe, &sequences, &cfg.pretrain)?;
    if outcome.skipped_short > 0 {
        eprintln!(
            "warning: skipped {} sequences shorter than 2 nodes",
            outcome.skipped_short
        );
    }
    if outcome.struct_skipped > 0 {
        eprintln!(
            "warning: structure loss skipped on {} batches (not enough unmasked pairs)",
            outcome.struct_skipped
        );
    }
    for (epoch, mean) in outcome.epoch_mean_losses() {
        println!("epoch {epoch}: mean loss {mean:.6}");
    }

    let ck_path = cfg.out_dir.join("model.mgtc");
    outcome.model.save(&ck_path, &outcome.meta)?;
    manifest.artifact(&ck_path)?;
    let log_path = cfg.out_dir.join("train_log.csv");
    write_log_csv(&log_path, &outcome.log)?;
    manifest.artifact(&log_path)?;
    let manifest_path = manifest.write(&cfg.out_dir)?;
    println!("checkpoint -> {}", ck_path.display());
    println!("manifest: {}", manifest_path.display());
    Ok(())
}

fn load_checkpoint(cfg: &RunConfig, manifest: &mut ManifestBuilder) -> Result<(Model<f32>, CheckpointMeta)> {
    let path = cfg.require("checkpoint", &cfg.paths.checkpoint)?;
    manifest.input(&path)?;
    Ok(Model::load(&path)?)
}

struct InferenceInputs {
    sequences: Vec<NodeSequence>,
    features: FeatureMatrix,
    pe: FeatureMatrix,
}

fn load_inference_inputs(cfg: &RunConfig, manifest: &mut ManifestBuilder) -> Result<InferenceInputs> {
    let seq_path = cfg.require("sequences", &cfg.paths.sequences)?;
    let feat_path = cfg.require("features", &cfg.paths.features)?;
    let pe_path = cfg.require("pe", &cfg.paths.pe)?;
    manifest.input(&seq_path)?;
    manifest.input(&feat_path)?;
    manifest.input(&pe_path)?;
    Ok(InferenceInputs {
        sequences: read_sequences(&seq_path)?,
        features: load_features(&feat_path, None)?,
        pe: load_pe(&pe_path)?,
    })
}

pub fn cmd_embed(cfg: &RunConfig, no_augment: bool) -> Result<()> {
    ensure_out(cfg)?;
    let mut manifest = manifest_for("embed", cfg)?;
    let (model, _) = load_checkpoint(cfg, &mut manifest)?;
    let inputs = load_inference_inputs(cfg, &mut manifest)?;
    let source = cfg
        .paths
        .checkpoint
        .as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default();
    let table = embed(
        &model,
        &inputs.sequences,
        &inputs.features,
        &inputs.pe,
        !no_augment,
        &source,
    )?;
    let emb_path = cfg.out_dir.join("embeddings.mgte");
    write_matrix(&emb_path, MAGIC_EMBEDDING, &table.matrix)?;
    manifest.artifact(&emb_path)?;
    let manifest_path = manifest.write(&cfg.out_dir)?;
    println!(
        "embedded {} nodes ({}-dim, augmentation {}) -> {}",
        table.matrix.n(),
        table.matrix.dim(),
        if no_augment { "off" } else { "on" },
        emb_path.display()
    );
    println!("manifest: {}", manifest_path.display());
    Ok(())
}

pub fn cmd_probe(cfg: &RunConfig, embeddings: &Path) -> Result<()> {
    ensure_out(cfg)?;
    let mut manifest = manifest_for("probe", cfg)?;
    manifest.input(embeddings)?;
    let seq_path = cfg.require("sequences", &cfg.paths.sequences)?;
    let labels_path = cfg.require("labels", &cfg.paths.labels)?;
    manifest.input(&seq_path)?;
    manifest.input(&labels_path)?;

    let table = read_matrix(embeddings, MAGIC_EMBEDDING)?;
    let sequences = read_sequences(&seq_path)?;
    let labels = load_labels(&labels_path)?;
    if table.n() != sequences.len() {
        anyhow::bail!(
            "embedding rows ({}) do not match sequence count ({})",
            table.n(),
            sequences.len()
        );
    }
    let mut row_of = std::collections::HashMap::new();
    for (i, s) in sequences.iter().enumerate() {
        row_of.entry(s.seed).or_insert(i);
    }
    let labeled: LabeledRows = labels
        .entries
        .iter()
        .map(|&(node, class, split)| {
            row_of
                .get(&node)
                .map(|&r| (r, class, split))
                .ok_or_else(|| anyhow::anyhow!("labeled node {node} has no embedding"))
        })
        .collect::<Result<_>>()?;
    let (probe, report) = linear_probe(&table, &labeled, labels.num_classes, &cfg.probe)?;
    let report_path = cfg.out_dir.join("probe_report.json");
    report.write_json(&report_path)?;
    manifest.artifact(&report_path)?;
    let manifest_path = manifest.write(&cfg.out_dir)?;
    println!(
        "probe trained for {} epochs; test metrics: {}",
        probe.epochs_run,
        serde_json::to_string(&report.metrics)?
    );
    println!("report -> {}", report_path.display());
    println!("manifest: {}", manifest_path.display());
    Ok(())
}

pub fn cmd_finetune(cfg: &RunConfig, head: &str, no_augment: bool) -> Result<()> {
    ensure_out(cfg)?;
    let mut manifest = manifest_for("finetune", cfg)?;
    let (model, meta) = load_checkpoint(cfg, &mut manifest)?;
    let inputs = load_inference_inputs(cfg, &mut manifest)?;

    // decoder reuse happens before fine-tuning; afterwards only the encoder
    // (plus head) survives in the saved checkpoint
    let effective = if no_augment {
        inputs.features.clone()
    } else {
        build_augmented_features(&model, &inputs.sequences, &inputs.features, &inputs.pe)?.matrix
    };

    let (tuned, head_meta, report) = match head {
        "node_classification" => {
            let labels_path = cfg.require("labels", &cfg.paths.labels)?;
            manifest.input(&labels_path)?;
            let labels = load_labels(&labels_path)?;
            finetune_node(
                &model,
                &inputs.sequences,
                &effective,
                &inputs.pe,
                &labels,
                &cfg.finetune,
            )?
        }
        "link_prediction" => {
            let edges_path = cfg.require("edge-labels", &cfg.paths.edge_labels)?;
            manifest.input(&edges_path)?;
            let edge_labels = load_edge_labels(&edges_path)?;
            let (graph, _) = load_graph(cfg, &mut manifest)?;
            finetune_link(
                &model,
                &inputs.sequences,
                &effective,
                &inputs.pe,
                &edge_labels,
                &graph,
                &cfg.finetune,
            )?
        }
        other => anyhow::bail!(
            "unknown head {other:?}: expected node_classification or link_prediction"
        ),
    };

    let tuned_meta = CheckpointMeta {
        head: Some(head_meta),
        ..meta
    };
    let ck_path = cfg.out_dir.join("finetuned.mgtc");
    tuned.save(&ck_path, &tuned_meta)?;
    manifest.artifact(&ck_path)?;
    let report_path = cfg.out_dir.join("finetune_report.json");
    report.write_json(&report_path)?;
    manifest.artifact(&report_path)?;
    let manifest_path = manifest.write(&cfg.out_dir)?;
    println!(
        "fine-tuned ({head}); test metrics: {}",
        serde_json::to_string(&report.metrics)?
    );
    println!("checkpoint -> {}", ck_path.display());
    println!("manifest: {}", manifest_path.display());
    Ok(())
}

pub fn cmd_bench(cfg: &RunConfig, modes: &[InferenceMode], seed_spec: &SeedSpec) -> Result<()> {
    ensure_out(cfg)?;
    let mut manifest = manifest_for("bench", cfg)?;
    let (model, _) = load_checkpoint(cfg, &mut manifest)?;
    let (graph, _) = load_graph(cfg, &mut manifest)?;
    let feat_path = cfg.require("features", &cfg.paths.features)?;
    let pe_path = cfg.require("pe", &cfg.paths.pe)?;
    manifest.input(&feat_path)?;
    manifest.input(&pe_path)?;
    let features = load_features(&feat_path, Some(&graph))?;
    let pe = load_pe(&pe_path)?;
    if let SeedSpec::File(path) = seed_spec {
        manifest.input(path)?;
    }
    let seeds = resolve_seeds(seed_spec, graph.node_count(), cfg.rng_seed)?;

    let labels = match &cfg.paths.labels {
        Some(path) => {
            manifest.input(path)?;
            Some(load_labels(path)?)
        }
        None => None,
    };

    let (rows, report) = benchmark_inference(
        &graph,
        &features,
        &pe,
        &model,
        &seeds,
        modes,
        &cfg.bench,
        labels.as_ref(),
    )?;
    let csv_path = cfg.out_dir.join("bench.csv");
    write_bench_csv(&csv_path, &rows)?;
    manifest.artifact(&csv_path)?;
    let report_path = cfg.out_dir.join("bench_report.json");
    report.write_json(&report_path)?;
    manifest.artifact(&report_path)?;
    let manifest_path = manifest.write(&cfg.out_dir)?;
    for (key, value) in &report.timing {
        println!("{key}: {value:.1}");
    }
    println!("rows -> {}", csv_path.display());
    println!("manifest: {}", manifest_path.display());
    Ok(())
}
