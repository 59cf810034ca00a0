use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use mgt_bench::bench_world;
use mgt_core::downstream::{benchmark_inference, embed, BenchConfig, InferenceMode};
use mgt_core::graph::NodeId;
use mgt_core::nn::Mode;
use mgt_core::posenc::{train_line, LineConfig};
use mgt_core::ppr::{ppr_power_iteration, top_k_sequence, PushWorkspace};
use mgt_core::pretrain::{apply_mask, forward_batch, BatchItem, PretrainConfig, train};
use mgt_core::rng::stream;

fn ppr_benches(c: &mut Criterion) {
    let world = bench_world(20_000, 20.0, 64, 64);
    let mut group = c.benchmark_group("ppr");

    group.bench_function("forward_push_20k", |b| {
        let mut ws = PushWorkspace::new(world.graph.node_count());
        let mut seed = 0u32;
        b.iter(|| {
            seed = (seed + 37) % world.graph.node_count() as NodeId;
            let r = ws.push(&world.graph, seed, &world.ppr).unwrap();
            black_box(top_k_sequence(&r, &world.ppr))
        });
    });

    group.bench_function("power_iteration_20k", |b| {
        b.iter(|| black_box(ppr_power_iteration(&world.graph, 7, &world.ppr).unwrap()));
    });

    group.finish();
}

fn model_benches(c: &mut Criterion) {
    let world = bench_world(4_000, 16.0, 64, 64);
    let mut group = c.benchmark_group("model");
    group.sample_size(20);

    group.bench_function("embed_64_sequences", |b| {
        b.iter(|| {
            black_box(
                embed(
                    &world.model,
                    &world.sequences,
                    &world.features,
                    &world.pe,
                    false,
                    "bench",
                )
                .unwrap(),
            )
        });
    });

    let cfg = PretrainConfig {
        mask_rate: 0.85,
        hidden_size: 64,
        num_layers: 2,
        decoder_layers: 2,
        pair_budget: 64,
        batch_size: 32,
        dropout: 0.2,
        ..PretrainConfig::default()
    };
    group.bench_function("pretrain_step_batch32", |b| {
        let mut mask_rng = stream(1, "mask");
        let items: Vec<BatchItem> = world.sequences[..32]
            .iter()
            .map(|s| BatchItem {
                nodes: s.nodes(),
                plan: apply_mask(s.len(), cfg.mask_rate, false, &mut mask_rng).unwrap(),
            })
            .collect();
        let mut pairs_rng = stream(1, "pairs");
        let mut dropout_rng = stream(1, "dropout");
        let mut model = world.model.cast::<f32>();
        b.iter(|| {
            model.params.zero_grads();
            let mut tape = mgt_core::nn::Tape::new();
            let out = forward_batch(
                &mut tape,
                &model,
                &items,
                &world.features,
                &world.pe,
                &cfg,
                &mut pairs_rng,
                &mut Mode::Train {
                    dropout: cfg.dropout,
                    rng: &mut dropout_rng,
                },
            )
            .unwrap();
            tape.backward(out.loss_total, &mut model.params).unwrap();
            black_box(tape.value(out.loss_total).item())
        });
    });

    group.bench_function("line_epoch_4k", |b| {
        let cfg = LineConfig {
            dim: 64,
            epochs: 1,
            ..LineConfig::default()
        };
        b.iter(|| black_box(train_line(&world.graph, &cfg).unwrap()));
    });

    group.finish();
}

fn inference_mode_benches(c: &mut Criterion) {
    let world = bench_world(20_000, 50.0, 146, 16);
    let seeds: Vec<NodeId> = (0..16).map(|i| (i * 1111) as NodeId).collect();
    let cfg = BenchConfig {
        alpha: 0.85,
        epsilon: 1e-4,
        top_k: 32,
        hops: 2,
    };
    let mut group = c.benchmark_group("inference");
    group.sample_size(20);
    for mode in [InferenceMode::PprSequence, InferenceMode::FullNeighborhood] {
        group.bench_function(mode.as_str(), |b| {
            b.iter(|| {
                black_box(
                    benchmark_inference(
                        &world.graph,
                        &world.features,
                        &world.pe,
                        &world.model,
                        &seeds,
                        &[mode],
                        &cfg,
                        None,
                    )
                    .unwrap(),
                )
            });
        });
    }
    group.finish();
}

fn end_to_end_bench(c: &mut Criterion) {
    let world = bench_world(800, 12.0, 32, 32);
    let seeds: Vec<NodeId> = (0..800).collect();
    let sequences =
        mgt_core::ppr::sample_sequences(&world.graph, &seeds, &world.ppr).unwrap();
    let cfg = PretrainConfig {
        mask_rate: 0.85,
        hidden_size: 32,
        num_layers: 1,
        decoder_layers: 1,
        num_epochs: 1,
        batch_size: 64,
        pair_budget: 32,
        ..PretrainConfig::default()
    };
    let mut group = c.benchmark_group("end_to_end");
    group.sample_size(10);
    group.bench_function("pretrain_epoch_800_nodes", |b| {
        b.iter(|| black_box(train(&world.features, &world.pe, &sequences, &cfg).unwrap()));
    });
    group.finish();
}

criterion_group!(
    benches,
    ppr_benches,
    model_benches,
    inference_mode_benches,
    end_to_end_bench
);
criterion_main!(benches);
