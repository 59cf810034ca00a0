//! `mgt` — masked graph-transformer pipeline: ingest an edge list, sample
//! PPR sequences, train positional encodings, pre-train, embed, probe,
//! fine-tune, and benchmark inference.
//!
//! Exit codes: 0 success, 2 usage or input error, 1 internal failure.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::{RunConfig, SeedSpec};
use mgt_core::downstream::InferenceMode;

#[derive(Parser)]
#[command(name = "mgt", version, about = "Graph pre-training toolkit")]
struct Cli {
    /// JSON run config; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for all randomness
    #[arg(long, global = true)]
    rng_seed: Option<u64>,
    /// Worker threads for sampling/embedding (0 = all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory for artifacts and manifests
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample top-k PPR contextual sequences for seed nodes
    Sample(SampleArgs),
    /// Train LINE embeddings to use as positional encodings
    EncodePos(EncodePosArgs),
    /// Pre-train the masked graph transformer on sampled sequences
    Pretrain(PretrainArgs),
    /// Export node embeddings from a checkpoint
    Embed(EmbedArgs),
    /// Train a linear probe on frozen embeddings
    Probe(ProbeArgs),
    /// Fine-tune the encoder with a task head
    Finetune(FinetuneArgs),
    /// Compare PPR-sequence and full-neighborhood inference
    Bench(BenchArgs),
}

#[derive(Args)]
struct SampleArgs {
    /// Edge list: one "src dst" pair per line, '#' comments
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Treat edges as directed (default symmetrizes)
    #[arg(long)]
    directed: bool,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    topk: Option<usize>,
    /// all | fraction:F | file:PATH
    #[arg(long, default_value = "all")]
    seeds: String,
}

#[derive(Args)]
struct EncodePosArgs {
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    directed: bool,
    /// Encoding dimension; must match the model hidden size
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    negatives: Option<usize>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    sequences: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    pe: Option<PathBuf>,
    #[arg(long)]
    mask_rate: Option<f64>,
    #[arg(long)]
    hidden_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    num_epochs: Option<usize>,
    #[arg(long)]
    num_layers: Option<usize>,
    #[arg(long)]
    ppr_topk: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    pair_budget: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    decoder_layers: Option<usize>,
    #[arg(long)]
    num_heads: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Never mask the seed position
    #[arg(long)]
    exempt_seed: bool,
    /// Per-anchor contrastive denominator (ablation)
    #[arg(long)]
    per_anchor: bool,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    sequences: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    pe: Option<PathBuf>,
    /// Skip decoder-reuse feature augmentation
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct ProbeArgs {
    /// Embedding table produced by `mgt embed`
    #[arg(long)]
    embeddings: PathBuf,
    /// Sequence file that defined the embedding row order
    #[arg(long)]
    sequences: Option<PathBuf>,
    /// node_id,class,split CSV
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    sequences: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    pe: Option<PathBuf>,
    /// node_classification | link_prediction
    #[arg(long)]
    head: String,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    edge_labels: Option<PathBuf>,
    /// Graph file (link head: negative sampling checks adjacency)
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    directed: bool,
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    neg_per_pos: Option<usize>,
    #[arg(long)]
    eval_negatives: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    directed: bool,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    pe: Option<PathBuf>,
    /// Optional labels: adds a probe accuracy per mode
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Comma-separated: ppr_sequence,full_neighborhood
    #[arg(long, default_value = "ppr_sequence,full_neighborhood")]
    modes: String,
    #[arg(long, default_value = "all")]
    seeds: String,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    hops: Option<usize>,
}

macro_rules! merge {
    ($($field:expr => $arg:expr),+ $(,)?) => {
        $(if let Some(v) = $arg.clone() { $field = v; })+
    };
}

/// Like `merge!` for destination fields that are themselves `Option`s.
macro_rules! merge_opt {
    ($($field:expr => $arg:expr),+ $(,)?) => {
        $(if $arg.is_some() { $field = $arg.clone(); })+
    };
}

fn run() -> Result<()> {
    let cli = Cli::parse();

    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    merge!(
        cfg.rng_seed => cli.rng_seed,
        cfg.threads => cli.threads,
        cfg.out_dir => cli.out,
    );

    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .ok(); // second init in one process keeps the first pool
    }

    match &cli.command {
        Command::Sample(args) => {
            merge_opt!(cfg.paths.graph => args.graph);
            merge!(
                cfg.ppr.alpha => args.alpha,
                cfg.ppr.epsilon => args.epsilon,
                cfg.ppr.max_iters => args.max_iters,
                cfg.ppr.top_k => args.topk,
            );
            if args.directed {
                cfg.undirected = false;
            }
            cfg.propagate_seed();
            commands::cmd_sample(&cfg, &SeedSpec::parse(&args.seeds)?)
        }
        Command::EncodePos(args) => {
            merge_opt!(cfg.paths.graph => args.graph);
            merge!(
                cfg.line.dim => args.dim,
                cfg.line.epochs => args.epochs,
                cfg.line.learning_rate => args.learning_rate,
                cfg.line.negatives_per_edge => args.negatives,
            );
            if args.directed {
                cfg.undirected = false;
            }
            cfg.propagate_seed();
            commands::cmd_encode_pos(&cfg)
        }
        Command::Pretrain(args) => {
            merge_opt!(
                cfg.paths.sequences => args.sequences,
                cfg.paths.features => args.features,
                cfg.paths.pe => args.pe,
            );
            merge!(
                cfg.pretrain.mask_rate => args.mask_rate,
                cfg.pretrain.hidden_size => args.hidden_size,
                cfg.pretrain.lr => args.lr,
                cfg.pretrain.weight_decay => args.weight_decay,
                cfg.pretrain.dropout => args.dropout,
                cfg.pretrain.optimizer => args.optimizer,
                cfg.pretrain.num_epochs => args.num_epochs,
                cfg.pretrain.num_layers => args.num_layers,
                cfg.pretrain.ppr_topk => args.ppr_topk,
                cfg.pretrain.lambda => args.lambda,
                cfg.pretrain.gamma => args.gamma,
                cfg.pretrain.pair_budget => args.pair_budget,
                cfg.pretrain.batch_size => args.batch_size,
                cfg.pretrain.decoder_layers => args.decoder_layers,
                cfg.pretrain.temperature => args.temperature,
            );
            if args.num_heads.is_some() {
                cfg.pretrain.num_heads = args.num_heads;
            }
            if args.exempt_seed {
                cfg.pretrain.exempt_seed = true;
            }
            if args.per_anchor {
                cfg.pretrain.per_anchor = true;
            }
            cfg.propagate_seed();
            commands::cmd_pretrain(&cfg)
        }
        Command::Embed(args) => {
            merge_opt!(
                cfg.paths.checkpoint => args.checkpoint,
                cfg.paths.sequences => args.sequences,
                cfg.paths.features => args.features,
                cfg.paths.pe => args.pe,
            );
            cfg.propagate_seed();
            commands::cmd_embed(&cfg, args.no_augment)
        }
        Command::Probe(args) => {
            merge_opt!(
                cfg.paths.sequences => args.sequences,
                cfg.paths.labels => args.labels,
            );
            merge!(
                cfg.probe.lr => args.lr,
                cfg.probe.max_epochs => args.max_epochs,
                cfg.probe.patience => args.patience,
            );
            cfg.propagate_seed();
            commands::cmd_probe(&cfg, &args.embeddings)
        }
        Command::Finetune(args) => {
            merge_opt!(
                cfg.paths.checkpoint => args.checkpoint,
                cfg.paths.sequences => args.sequences,
                cfg.paths.features => args.features,
                cfg.paths.pe => args.pe,
                cfg.paths.labels => args.labels,
                cfg.paths.edge_labels => args.edge_labels,
                cfg.paths.graph => args.graph,
            );
            merge!(
                cfg.finetune.lr => args.lr,
                cfg.finetune.weight_decay => args.weight_decay,
                cfg.finetune.epochs => args.epochs,
                cfg.finetune.batch_size => args.batch_size,
                cfg.finetune.dropout => args.dropout,
                cfg.finetune.neg_per_pos => args.neg_per_pos,
                cfg.finetune.eval_negatives => args.eval_negatives,
            );
            if args.directed {
                cfg.undirected = false;
            }
            cfg.propagate_seed();
            commands::cmd_finetune(&cfg, &args.head, args.no_augment)
        }
        Command::Bench(args) => {
            merge_opt!(
                cfg.paths.checkpoint => args.checkpoint,
                cfg.paths.graph => args.graph,
                cfg.paths.features => args.features,
                cfg.paths.pe => args.pe,
                cfg.paths.labels => args.labels,
            );
            merge!(
                cfg.bench.alpha => args.alpha,
                cfg.bench.epsilon => args.epsilon,
                cfg.bench.top_k => args.topk,
                cfg.bench.hops => args.hops,
            );
            if args.directed {
                cfg.undirected = false;
            }
            cfg.propagate_seed();
            let modes: Vec<InferenceMode> = args
                .modes
                .split(',')
                .map(|m| {
                    InferenceMode::parse(m.trim())
                        .ok_or_else(|| anyhow::anyhow!("unknown mode {m:?}"))
                })
                .collect::<Result<_>>()?;
            commands::cmd_bench(&cfg, &modes, &SeedSpec::parse(&args.seeds)?)
        }
    }
}

/// Input and configuration problems exit 2; numeric/internal failures 1.
fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(core) = cause.downcast_ref::<mgt_core::Error>() {
            return match core {
                mgt_core::Error::NoConvergence { .. } | mgt_core::Error::NonFinite(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() {
    // die quietly on closed pipes (e.g. `mgt ... | head`) like other
    // unix tools instead of panicking mid-print
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let outcome = std::panic::catch_unwind(run);
    let code = match outcome {
        Ok(Ok(())) => 0,
        Ok(Err(err)) => {
            eprintln!("error: {err:#}");
            exit_code(&err)
        }
        Err(_) => {
            eprintln!("internal error: panic (see trace above)");
            1
        }
    };
    std::process::exit(code);
}
