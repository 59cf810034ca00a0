//! Mask-free inference: decoder-reuse feature augmentation and node
//! embeddings.
//!
//! Augmentation runs the pre-trained encoder and feature decoder over an
//! unmasked sequence, reconstructing every row, and averages the seed's
//! reconstructed row with its original features. Embeddings are the
//! seed-position row of the encoder's last layer.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::model::Model;
use crate::nn::{Mode, Tape, Tensor};
use crate::ppr::NodeSequence;

fn sequence_tensors(
    seq: &NodeSequence,
    features: &FeatureMatrix,
    pe: &FeatureMatrix,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let nodes = seq.nodes();
    let d = features.dim();
    let dpe = pe.dim();
    let mut x = Tensor::zeros(nodes.len(), d);
    let mut p = Tensor::zeros(nodes.len(), dpe);
    for (row, &node) in nodes.iter().enumerate() {
        let node = node as usize;
        if node >= features.n() || node >= pe.n() {
            return Err(Error::NodeOutOfRange {
                node: node as u64,
                n: features.n().min(pe.n()),
            });
        }
        x.row_mut(row).copy_from_slice(features.row(node));
        p.row_mut(row).copy_from_slice(pe.row(node));
    }
    Ok((x, p))
}

/// Reconstruct every feature row of one sequence without masking:
/// encoder over `Linear(X) + P`, then the feature decoder over `H + P`.
pub fn augment_features(
    model: &Model<f32>,
    seq: &NodeSequence,
    features: &FeatureMatrix,
    pe: &FeatureMatrix,
) -> Result<Tensor<f32>> {
    if model.feat_decoder.is_none() {
        return Err(Error::Invalid(
            "feature augmentation needs the pre-trained feature decoder; \
             this checkpoint has none"
                .into(),
        ));
    }
    let (x, p) = sequence_tensors(seq, features, pe)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let pv = tape.leaf(p);
    let h0 = model.project_input(&mut tape, xv, pv);
    let h = model.encode(&mut tape, h0, None, &mut Mode::Eval)?;
    let dec_in = tape.add(h, pv);
    let z = model.decode_features(&mut tape, dec_in, None, &mut Mode::Eval)?;
    Ok(tape.value(z).clone())
}

/// Feature matrix with reconstructed-and-averaged rows for every node that
/// seeds one of the given sequences; all other rows pass through unchanged.
#[derive(Debug, Clone)]
pub struct AugmentedFeatures {
    pub matrix: FeatureMatrix,
    /// Per-node flag: averaged with a reconstruction vs passthrough.
    pub augmented: Vec<bool>,
}

pub fn build_augmented_features(
    model: &Model<f32>,
    seqs: &[NodeSequence],
    features: &FeatureMatrix,
    pe: &FeatureMatrix,
) -> Result<AugmentedFeatures> {
    let seed_rows: Vec<Result<(u32, Vec<f32>)>> = seqs
        .par_iter()
        .map(|seq| {
            let recon = augment_features(model, seq, features, pe)?;
            Ok((seq.seed, recon.row(0).to_vec()))
        })
        .collect();
    let mut matrix = features.clone();
    let mut augmented = vec![false; features.n()];
    for item in seed_rows {
        let (seed, recon_row) = item?;
        let row = matrix.row_mut(seed as usize);
        for (dst, &r) in row.iter_mut().zip(recon_row.iter()) {
            *dst = 0.5 * (*dst + r);
        }
        augmented[seed as usize] = true;
    }
    if let Some(bad) = matrix.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "augmented feature at flat index {bad}"
        )));
    }
    Ok(AugmentedFeatures { matrix, augmented })
}

/// One embedding row per input sequence, in input order.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub matrix: FeatureMatrix,
    pub seeds: Vec<u32>,
    pub source: String,
}

impl EmbeddingTable {
    /// Row index of a node's embedding, if that node seeded a sequence.
    pub fn row_of(&self, node: u32) -> Option<usize> {
        self.seeds.iter().position(|&s| s == node)
    }
}

/// Mask-free, dropout-free encoder pass per sequence; the seed-position row
/// of the last layer is the node embedding. With `use_augmentation`, feature
/// rows are first averaged with their decoder reconstructions.
pub fn embed(
    model: &Model<f32>,
    seqs: &[NodeSequence],
    features: &FeatureMatrix,
    pe: &FeatureMatrix,
    use_augmentation: bool,
    source: &str,
) -> Result<EmbeddingTable> {
    let augmented;
    let effective: &FeatureMatrix = if use_augmentation {
        augmented = build_augmented_features(model, seqs, features, pe)?;
        &augmented.matrix
    } else {
        features
    };

    let rows: Vec<Result<Vec<f32>>> = seqs
        .par_iter()
        .map(|seq| {
            let (x, p) = sequence_tensors(seq, effective, pe)?;
            let mut tape = Tape::new();
            let xv = tape.leaf(x);
            let pv = tape.leaf(p);
            let h0 = model.project_input(&mut tape, xv, pv);
            let h = model.encode(&mut tape, h0, None, &mut Mode::Eval)?;
            Ok(tape.value(h).row(0).to_vec())
        })
        .collect();

    let hidden = model.dims.hidden;
    let mut data = Vec::with_capacity(seqs.len() * hidden);
    for row in rows {
        data.extend_from_slice(&row?);
    }
    Ok(EmbeddingTable {
        matrix: FeatureMatrix::new(seqs.len(), hidden, data)?,
        seeds: seqs.iter().map(|s| s.seed).collect(),
        source: source.to_string(),
    })
}
