//! Masked graph modeling: mask sequences, encode the unmasked nodes, decode
//! features under a shared mask token, contrast intra- vs cross-sequence
//! pairs, and fuse the two losses for training.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::model::{CheckpointMeta, Model, ModelDims};
use crate::nn::{AdamW, AdamWConfig, Mode, Scalar, Tape, Tensor, Var};
use crate::ppr::NodeSequence;
use crate::rng::stream;

/// Pre-training run configuration. Field names are the on-disk JSON keys.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub mask_rate: f64,
    pub hidden_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub optimizer: String,
    pub num_epochs: usize,
    pub num_layers: usize,
    pub ppr_topk: usize,
    pub lambda: f64,
    /// Exponent of the scaled cosine error.
    pub gamma: f64,
    /// Pairs sampled per batch for the structure loss (T).
    pub pair_budget: usize,
    pub batch_size: usize,
    pub decoder_layers: usize,
    /// Defaults to one head per 64 hidden units.
    pub num_heads: Option<usize>,
    /// Temperature dividing cosine similarities in the structure loss.
    pub temperature: f64,
    /// Keep the seed node out of the masked set.
    pub exempt_seed: bool,
    /// Per-anchor InfoNCE denominator instead of the shared one.
    pub per_anchor: bool,
    pub rng_seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            mask_rate: 0.85,
            hidden_size: 1024,
            lr: 3e-4,
            weight_decay: 0.01,
            dropout: 0.2,
            optimizer: "adamw".into(),
            num_epochs: 10,
            num_layers: 8,
            ppr_topk: 128,
            lambda: 0.1,
            gamma: 2.0,
            pair_budget: 128,
            batch_size: 512,
            decoder_layers: 2,
            num_heads: None,
            temperature: 0.5,
            exempt_seed: false,
            per_anchor: false,
            rng_seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "mask_rate must be in (0,1), got {}",
                self.mask_rate
            )));
        }
        if self.gamma < 1.0 {
            return Err(Error::InvalidParameter(format!(
                "gamma must be >= 1, got {}",
                self.gamma
            )));
        }
        if self.lambda < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.pair_budget == 0 {
            return Err(Error::InvalidParameter("pair_budget must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be >= 1".into()));
        }
        if self.optimizer != "adamw" {
            return Err(Error::InvalidParameter(format!(
                "unsupported optimizer {:?} (only adamw)",
                self.optimizer
            )));
        }
        if self.temperature.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::InvalidParameter("temperature must be > 0".into()));
        }
        Ok(())
    }
}

/// Masked/unmasked position partition of one sequence. Positions index the
/// seed-first node order; both lists are sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub masked: Vec<usize>,
    pub unmasked: Vec<usize>,
}

impl MaskPlan {
    pub fn len(&self) -> usize {
        self.masked.len() + self.unmasked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Plan with nothing masked (mask-free inference).
    pub fn unmasked_full(len: usize) -> Self {
        MaskPlan {
            masked: Vec::new(),
            unmasked: (0..len).collect(),
        }
    }
}

/// Draw `clamp(floor(rate * len), 1, len - 1)` masked positions uniformly
/// without replacement. With `exempt_seed`, position 0 stays unmasked.
pub fn apply_mask(
    seq_len: usize,
    mask_rate: f64,
    exempt_seed: bool,
    rng: &mut ChaCha8Rng,
) -> Result<MaskPlan> {
    if seq_len < 2 {
        return Err(Error::Invalid(format!(
            "cannot mask a sequence of length {seq_len} (need >= 2)"
        )));
    }
    let l = ((mask_rate * seq_len as f64).floor() as usize).clamp(1, seq_len - 1);
    let (pool_base, pool_len) = if exempt_seed { (1, seq_len - 1) } else { (0, seq_len) };
    let l = l.min(pool_len);
    let mut masked: Vec<usize> = rand::seq::index::sample(rng, pool_len, l)
        .into_iter()
        .map(|i| i + pool_base)
        .collect();
    masked.sort_unstable();
    let unmasked: Vec<usize> = (0..seq_len).filter(|p| masked.binary_search(p).is_err()).collect();
    debug_assert!(!unmasked.is_empty());
    Ok(MaskPlan { masked, unmasked })
}

/// Gather the unmasked rows of a (padded) per-sequence feature tensor, embed
/// them (`Linear(x) + p`), and run the encoder over them.
pub fn encode_unmasked<F: Scalar>(
    tape: &mut Tape<F>,
    model: &Model<F>,
    full_x: Var,
    full_pe: Var,
    plan: &MaskPlan,
    mode: &mut Mode,
) -> Result<Var> {
    if tape.value(full_pe).cols() != model.dims.hidden {
        return Err(Error::ShapeMismatch(format!(
            "positional encoding dim {} vs hidden {}",
            tape.value(full_pe).cols(),
            model.dims.hidden
        )));
    }
    let idx = Rc::new(plan.unmasked.clone());
    let x = tape.gather_rows(full_x, idx.clone());
    let pe = tape.gather_rows(full_pe, idx);
    let h0 = model.project_input(tape, x, pe);
    model.encode(tape, h0, None, mode)
}

/// Rebuild the full-length decoder input: mask token at masked positions,
/// encoder outputs elsewhere, plus the positional encodings once more.
pub fn assemble_decoder_input<F: Scalar>(
    tape: &mut Tape<F>,
    model: &Model<F>,
    h_unmasked: Var,
    plan: &MaskPlan,
    full_pe: Var,
) -> Result<Var> {
    if tape.value(h_unmasked).rows() != plan.unmasked.len() {
        return Err(Error::ShapeMismatch(format!(
            "encoder output rows {} vs {} unmasked positions",
            tape.value(h_unmasked).rows(),
            plan.unmasked.len()
        )));
    }
    let token = tape.param(&model.params, model.mask_token);
    let mask_rows = tape.repeat_row(token, plan.masked.len());
    let base = tape.riffle_rows(
        mask_rows,
        Rc::new(plan.masked.clone()),
        h_unmasked,
        Rc::new(plan.unmasked.clone()),
    );
    let pe = tape.gather_rows(full_pe, Rc::new((0..plan.len()).collect()));
    Ok(tape.add(base, pe))
}

/// Scaled cosine error over the masked positions:
/// `mean (1 - cos(x_i, z_i))^gamma`.
pub fn feature_recon_loss<F: Scalar>(
    tape: &mut Tape<F>,
    reconstructed: Var,
    targets: Var,
    plan: &MaskPlan,
    gamma: f64,
) -> Result<Var> {
    if plan.masked.is_empty() {
        return Err(Error::Invalid("no masked positions to reconstruct".into()));
    }
    let idx = Rc::new(plan.masked.clone());
    let z = tape.gather_rows(reconstructed, idx.clone());
    let x = tape.gather_rows(targets, idx);
    for (row, &pos) in plan.masked.iter().enumerate() {
        let norm = |t: &Tensor<F>| t.row(row).iter().map(|&v| v * v).sum::<F>();
        if norm(tape.value(x)) == F::zero() || norm(tape.value(z)) == F::zero() {
            return Err(Error::ZeroNorm { index: pos });
        }
    }
    let cos = tape.row_cosine(x, z);
    let err = tape.const_sub(F::one(), cos);
    let powed = tape.pow_const(err, F::from_f64(gamma));
    Ok(tape.mean_all(powed))
}

/// One endpoint of a sampled pair: a sequence and a slot into its unmasked
/// embedding rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairIndex {
    pub seq: usize,
    pub slot: usize,
}

#[derive(Debug, Clone)]
pub struct PairSample {
    pub positives: Vec<(PairIndex, PairIndex)>,
    pub negatives: Vec<(PairIndex, PairIndex)>,
}

/// Sample T same-sequence ordered pairs and T cross-sequence pairs,
/// uniformly with replacement over the eligible sets.
pub fn sample_pairs(
    unmasked_counts: &[usize],
    budget: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PairSample> {
    let n_nonempty = unmasked_counts.iter().filter(|&&c| c > 0).count();
    if unmasked_counts.len() < 2 || n_nonempty < 2 {
        return Err(Error::Invalid(
            "structure loss needs at least two sequences with unmasked nodes".into(),
        ));
    }
    // positives: uniform over ordered same-sequence pairs (j != k)
    let pos_counts: Vec<u64> = unmasked_counts
        .iter()
        .map(|&c| if c >= 2 { (c * (c - 1)) as u64 } else { 0 })
        .collect();
    let pos_total: u64 = pos_counts.iter().sum();
    if pos_total == 0 {
        return Err(Error::Invalid(
            "no sequence has two unmasked nodes; cannot sample positive pairs".into(),
        ));
    }
    let mut positives = Vec::with_capacity(budget);
    for _ in 0..budget {
        let mut draw = rng.random_range(0..pos_total);
        let mut seq = 0usize;
        while draw >= pos_counts[seq] {
            draw -= pos_counts[seq];
            seq += 1;
        }
        let c = unmasked_counts[seq];
        let j = (draw / (c as u64 - 1)) as usize;
        let mut k = (draw % (c as u64 - 1)) as usize;
        if k >= j {
            k += 1;
        }
        positives.push((PairIndex { seq, slot: j }, PairIndex { seq, slot: k }));
    }
    // negatives: uniform over cross-sequence pairs via rejection on the
    // flat position space
    let flat_total: u64 = unmasked_counts.iter().map(|&c| c as u64).sum();
    let flat_to_index = |mut f: u64| -> PairIndex {
        let mut seq = 0usize;
        while f >= unmasked_counts[seq] as u64 {
            f -= unmasked_counts[seq] as u64;
            seq += 1;
        }
        PairIndex {
            seq,
            slot: f as usize,
        }
    };
    let mut negatives = Vec::with_capacity(budget);
    while negatives.len() < budget {
        let a = flat_to_index(rng.random_range(0..flat_total));
        let b = flat_to_index(rng.random_range(0..flat_total));
        if a.seq != b.seq {
            negatives.push((a, b));
        }
    }
    Ok(PairSample {
        positives,
        negatives,
    })
}

/// InfoNCE over a 2T x 1 score column (positives first). The default
/// denominator is shared across every sampled pair; the per-anchor variant
/// pits each positive against all sampled negatives.
pub fn structure_loss_from_scores<F: Scalar>(
    tape: &mut Tape<F>,
    scores: Var,
    budget: usize,
    per_anchor: bool,
) -> Result<Var> {
    let rows = tape.value(scores).rows();
    if budget == 0 || rows != 2 * budget {
        return Err(Error::ShapeMismatch(format!(
            "expected {} scores (2T), got {rows}",
            2 * budget
        )));
    }
    let pos = tape.gather_rows(scores, Rc::new((0..budget).collect()));
    if per_anchor {
        let negs = tape.gather_rows(scores, Rc::new((budget..2 * budget).collect()));
        let mut terms = Vec::with_capacity(budget);
        for i in 0..budget {
            let pos_i = tape.gather_rows(pos, Rc::new(vec![i]));
            let joined = tape.concat_rows(&[pos_i, negs]);
            let lse = tape.logsumexp_all(joined);
            terms.push(tape.sub(lse, pos_i));
        }
        let stack = tape.concat_rows(&terms);
        Ok(tape.mean_all(stack))
    } else {
        let lse = tape.logsumexp_all(scores);
        let mean_pos = tape.mean_all(pos);
        Ok(tape.sub(lse, mean_pos))
    }
}

/// Full structure loss: transform sampled embeddings with the MLP decoder,
/// score pairs by cosine / temperature, then InfoNCE.
pub fn structure_loss<F: Scalar>(
    tape: &mut Tape<F>,
    model: &Model<F>,
    embeddings: Var,
    offsets: &[usize],
    pairs: &PairSample,
    temperature: f64,
    per_anchor: bool,
) -> Result<Var> {
    if pairs.positives.is_empty() || pairs.negatives.is_empty() {
        return Err(Error::Invalid("empty pair sets".into()));
    }
    if pairs.positives.len() != pairs.negatives.len() {
        return Err(Error::Invalid("positive/negative budgets differ".into()));
    }
    let flat = |p: &PairIndex| offsets[p.seq] + p.slot;
    let mut left = Vec::with_capacity(2 * pairs.positives.len());
    let mut right = Vec::with_capacity(2 * pairs.positives.len());
    for (a, b) in pairs.positives.iter().chain(pairs.negatives.iter()) {
        left.push(flat(a));
        right.push(flat(b));
    }
    let rows_a = tape.gather_rows(embeddings, Rc::new(left));
    let rows_b = tape.gather_rows(embeddings, Rc::new(right));
    let fa = model.structure_transform(tape, rows_a)?;
    let fb = model.structure_transform(tape, rows_b)?;
    for row in 0..tape.value(fa).rows() {
        let norm = |t: &Tensor<F>| t.row(row).iter().map(|&v| v * v).sum::<F>();
        if norm(tape.value(fa)) == F::zero() || norm(tape.value(fb)) == F::zero() {
            return Err(Error::ZeroNorm { index: row });
        }
    }
    let cos = tape.row_cosine(fa, fb);
    let scores = tape.scale(cos, F::from_f64(1.0 / temperature));
    structure_loss_from_scores(tape, scores, pairs.positives.len(), per_anchor)
}

/// `L = L1 + lambda * L2`, or just `L1` when the structure loss was skipped.
pub fn total_loss<F: Scalar>(
    tape: &mut Tape<F>,
    feat: Var,
    structure: Option<Var>,
    lambda: f64,
) -> Var {
    match structure {
        Some(s) => {
            let scaled = tape.scale(s, F::from_f64(lambda));
            tape.add(feat, scaled)
        }
        None => feat,
    }
}

/// One sequence prepared for a training step.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub nodes: Vec<crate::graph::NodeId>,
    pub plan: MaskPlan,
}

/// Handles exposed by a forward pass for tests to probe gradients.
pub struct StepForward {
    pub loss_total: Var,
    pub loss_feat: Var,
    pub loss_struct: Option<Var>,
    /// Per-sequence padded feature leaves on the encoder path.
    pub encoder_inputs: Vec<Var>,
    /// Per-sequence padded feature leaves used as reconstruction targets.
    pub target_inputs: Vec<Var>,
    /// Per-sequence encoder outputs (unmasked rows only).
    pub encoder_outputs: Vec<Var>,
}

/// Build the fused loss for one batch on the given tape.
///
/// Features for each sequence are materialized as tensors padded to the
/// longest sequence in the batch; positions past a sequence's length never
/// enter any op, so their gradients are identically zero. The encoder path
/// and the reconstruction targets read from separate leaves so gradient
/// flow through each can be inspected independently.
#[allow(clippy::too_many_arguments)]
pub fn forward_batch<F: Scalar>(
    tape: &mut Tape<F>,
    model: &Model<F>,
    items: &[BatchItem],
    features: &FeatureMatrix,
    pe: &FeatureMatrix,
    cfg: &PretrainConfig,
    pairs_rng: &mut ChaCha8Rng,
    mode: &mut Mode,
) -> Result<StepForward> {
    if items.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let pad_to = items.iter().map(|it| it.nodes.len()).max().unwrap();
    let d = features.dim();
    let dpe = pe.dim();

    let mut encoder_inputs = Vec::with_capacity(items.len());
    let mut target_inputs = Vec::with_capacity(items.len());
    let mut encoder_outputs = Vec::with_capacity(items.len());
    let mut seq_losses = Vec::with_capacity(items.len());

    for item in items {
        let len = item.nodes.len();
        let mut x = Tensor::<F>::zeros(pad_to, d);
        let mut p = Tensor::<F>::zeros(pad_to, dpe);
        for (row, &node) in item.nodes.iter().enumerate() {
            for (j, &v) in features.row(node as usize).iter().enumerate() {
                x.set(row, j, F::from_f64(v as f64));
            }
            for (j, &v) in pe.row(node as usize).iter().enumerate() {
                p.set(row, j, F::from_f64(v as f64));
            }
        }
        let full_x = tape.leaf(x.clone());
        let full_t = tape.leaf(x);
        let full_pe = tape.leaf(p);

        let h_u = encode_unmasked(tape, model, full_x, full_pe, &item.plan, &mut mode.reborrow())?;
        let dec_in = assemble_decoder_input(tape, model, h_u, &item.plan, full_pe)?;
        let z = model.decode_features(tape, dec_in, None, &mut mode.reborrow())?;
        // targets gathered over 0..len so padding rows stay untouched
        let trimmed = tape.gather_rows(full_t, Rc::new((0..len).collect()));
        let l1 = feature_recon_loss(tape, z, trimmed, &item.plan, cfg.gamma)?;

        encoder_inputs.push(full_x);
        target_inputs.push(full_t);
        encoder_outputs.push(h_u);
        seq_losses.push(l1);
    }

    let stacked = tape.concat_rows(&seq_losses);
    let loss_feat = tape.mean_all(stacked);

    let counts: Vec<usize> = items.iter().map(|it| it.plan.unmasked.len()).collect();
    let mut offsets = vec![0usize; counts.len()];
    for i in 1..counts.len() {
        offsets[i] = offsets[i - 1] + counts[i - 1];
    }
    let loss_struct = match sample_pairs(&counts, cfg.pair_budget, pairs_rng) {
        Ok(pairs) => {
            let all = tape.concat_rows(&encoder_outputs);
            Some(structure_loss(
                tape,
                model,
                all,
                &offsets,
                &pairs,
                cfg.temperature,
                cfg.per_anchor,
            )?)
        }
        Err(_) => None,
    };

    let loss_total = total_loss(tape, loss_feat, loss_struct, cfg.lambda);
    Ok(StepForward {
        loss_total,
        loss_feat,
        loss_struct,
        encoder_inputs,
        target_inputs,
        encoder_outputs,
    })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss_total: f64,
    pub loss_feat: f64,
    pub loss_struct: Option<f64>,
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub meta: CheckpointMeta,
    pub log: Vec<LogRow>,
    /// Sequences dropped because they were too short to mask.
    pub skipped_short: usize,
    /// Batches where the structure loss had to be skipped.
    pub struct_skipped: usize,
}

impl TrainOutcome {
    pub fn epoch_mean_losses(&self) -> Vec<(usize, f64)> {
        let mut sums: Vec<(f64, usize)> = Vec::new();
        for row in &self.log {
            if sums.len() <= row.epoch {
                sums.resize(row.epoch + 1, (0.0, 0));
            }
            sums[row.epoch].0 += row.loss_total;
            sums[row.epoch].1 += 1;
        }
        sums.iter()
            .enumerate()
            .map(|(e, &(s, c))| (e, if c == 0 { f64::NAN } else { s / c as f64 }))
            .collect()
    }
}

/// Run the pre-training loop: shuffle sequences each epoch, and per batch
/// mask, encode, decode through both heads, fuse, backprop, and step AdamW.
pub fn train(
    features: &FeatureMatrix,
    pe: &FeatureMatrix,
    sequences: &[NodeSequence],
    cfg: &PretrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pe.dim() != cfg.hidden_size {
        return Err(Error::ShapeMismatch(format!(
            "positional encoding dim {} must equal hidden size {}",
            pe.dim(),
            cfg.hidden_size
        )));
    }
    let usable: Vec<&NodeSequence> = sequences.iter().filter(|s| s.len() >= 2).collect();
    let skipped_short = sequences.len() - usable.len();
    if usable.is_empty() {
        return Err(Error::Invalid(
            "no sequences of length >= 2 to pre-train on".into(),
        ));
    }
    for seq in &usable {
        for node in seq.nodes() {
            if node as usize >= features.n() || node as usize >= pe.n() {
                return Err(Error::NodeOutOfRange {
                    node: node as u64,
                    n: features.n().min(pe.n()),
                });
            }
        }
    }

    let dims = ModelDims::from_config(cfg, features.dim())?;
    let heads = dims.heads;
    let mut model = Model::<f32>::init(dims, cfg.rng_seed);
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &model.params,
    );

    let mut mask_rng = stream(cfg.rng_seed, "mask");
    let mut pairs_rng = stream(cfg.rng_seed, "pairs");
    let mut shuffle_rng = stream(cfg.rng_seed, "shuffle");
    let mut dropout_rng = stream(cfg.rng_seed, "dropout");

    let mut log = Vec::new();
    let mut struct_skipped = 0usize;
    let mut order: Vec<usize> = (0..usable.len()).collect();

    for epoch in 0..cfg.num_epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut items = Vec::with_capacity(chunk.len());
            for &si in chunk {
                let seq = usable[si];
                let plan = apply_mask(seq.len(), cfg.mask_rate, cfg.exempt_seed, &mut mask_rng)?;
                items.push(BatchItem {
                    nodes: seq.nodes(),
                    plan,
                });
            }
            model.params.zero_grads();
            let mut tape = Tape::new();
            let mut mode = Mode::Train {
                dropout: cfg.dropout,
                rng: &mut dropout_rng,
            };
            let out = forward_batch(
                &mut tape, &model, &items, features, pe, cfg, &mut pairs_rng, &mut mode,
            )?;
            let total = tape.value(out.loss_total).item() as f64;
            let feat = tape.value(out.loss_feat).item() as f64;
            let structure = out.loss_struct.map(|v| tape.value(v).item() as f64);
            if structure.is_none() {
                struct_skipped += 1;
            }
            if !total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at epoch {epoch} step {step}: total {total}, feat {feat}, struct {structure:?}"
                )));
            }
            tape.backward(out.loss_total, &mut model.params)?;
            opt.step(&mut model.params);
            log.push(LogRow {
                epoch,
                step,
                loss_total: total,
                loss_feat: feat,
                loss_struct: structure,
            });
        }
    }

    let meta = CheckpointMeta {
        config: cfg.clone(),
        feat_dim: features.dim(),
        heads,
        head: None,
    };
    Ok(TrainOutcome {
        model,
        meta,
        log,
        skipped_short,
        struct_skipped,
    })
}

/// Write the training log as `epoch,step,loss_total,loss_feat,loss_struct`.
pub fn write_log_csv(path: &std::path::Path, log: &[LogRow]) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "epoch,step,loss_total,loss_feat,loss_struct").map_err(|e| Error::io(path, e))?;
    for row in log {
        let s = row
            .loss_struct
            .map(|v| format!("{v}"))
            .unwrap_or_default();
        writeln!(
            f,
            "{},{},{},{},{}",
            row.epoch, row.step, row.loss_total, row.loss_feat, s
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
