//! Transformer building blocks on the gradient tape.
//!
//! Layers are pre-norm: `h + Attn(LN(h))` then `x + FFN(LN(x))`. Dropout hits
//! attention probabilities and the FFN output, and only in training mode.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamSet};
use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Default head count: one head per 64 hidden units, at least one.
pub fn default_heads(hidden: usize) -> usize {
    (hidden / 64).max(1)
}

/// Dropout state threaded through a forward pass.
pub enum Mode<'a> {
    Eval,
    Train {
        dropout: f64,
        rng: &'a mut ChaCha8Rng,
    },
}

impl Mode<'_> {
    pub fn reborrow(&mut self) -> Mode<'_> {
        match self {
            Mode::Eval => Mode::Eval,
            Mode::Train { dropout, rng } => Mode::Train {
                dropout: *dropout,
                rng,
            },
        }
    }
}

/// Inverted-dropout mask: zero with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask<F: Scalar>(
    rows: usize,
    cols: usize,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor<F> {
    let keep = F::from_f64(1.0 / (1.0 - rate));
    let data: Vec<F> = (0..rows * cols)
        .map(|_| {
            if rng.random::<f64>() < rate {
                F::zero()
            } else {
                keep
            }
        })
        .collect();
    Tensor::new(rows, cols, data)
}

fn maybe_dropout<F: Scalar>(tape: &mut Tape<F>, x: Var, mode: &mut Mode) -> Var {
    match mode {
        Mode::Eval => x,
        Mode::Train { dropout, rng } => {
            if *dropout <= 0.0 {
                return x;
            }
            let (m, n) = tape.value(x).shape();
            let mask = dropout_mask(m, n, *dropout, rng);
            tape.mul_mask(x, Rc::new(mask))
        }
    }
}

pub struct LayerNormParams {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl LayerNormParams {
    pub fn init<F: Scalar>(ps: &mut ParamSet<F>, prefix: &str, hidden: usize) -> Self {
        LayerNormParams {
            scale: ps.add_ones(format!("{prefix}.scale"), 1, hidden),
            shift: ps.add_zeros(format!("{prefix}.shift"), 1, hidden),
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, ps: &ParamSet<F>, x: Var) -> Var {
        let g = tape.param(ps, self.scale);
        let b = tape.param(ps, self.shift);
        tape.layer_norm(x, g, b, F::from_f64(LAYER_NORM_EPS))
    }
}

pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl AttentionParams {
    pub fn init<F: Scalar>(
        ps: &mut ParamSet<F>,
        prefix: &str,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        AttentionParams {
            wq: ps.add_normal(format!("{prefix}.wq"), hidden, hidden, INIT_STD, rng),
            wk: ps.add_normal(format!("{prefix}.wk"), hidden, hidden, INIT_STD, rng),
            wv: ps.add_normal(format!("{prefix}.wv"), hidden, hidden, INIT_STD, rng),
            wo: ps.add_normal(format!("{prefix}.wo"), hidden, hidden, INIT_STD, rng),
        }
    }
}

pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnParams {
    pub fn init<F: Scalar>(
        ps: &mut ParamSet<F>,
        prefix: &str,
        hidden: usize,
        inner: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        FfnParams {
            w1: ps.add_normal(format!("{prefix}.w1"), hidden, inner, INIT_STD, rng),
            b1: ps.add_zeros(format!("{prefix}.b1"), 1, inner),
            w2: ps.add_normal(format!("{prefix}.w2"), inner, hidden, INIT_STD, rng),
            b2: ps.add_zeros(format!("{prefix}.b2"), 1, hidden),
        }
    }
}

pub struct TransformerLayerParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub ffn: FfnParams,
}

impl TransformerLayerParams {
    /// FFN inner width is 4x hidden.
    pub fn init<F: Scalar>(
        ps: &mut ParamSet<F>,
        prefix: &str,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        TransformerLayerParams {
            ln1: LayerNormParams::init(ps, &format!("{prefix}.ln1"), hidden),
            attn: AttentionParams::init(ps, &format!("{prefix}.attn"), hidden, rng),
            ln2: LayerNormParams::init(ps, &format!("{prefix}.ln2"), hidden),
            ffn: FfnParams::init(ps, &format!("{prefix}.ffn"), hidden, hidden * 4, rng),
        }
    }

    pub fn init_stack<F: Scalar>(
        ps: &mut ParamSet<F>,
        prefix: &str,
        layers: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Vec<Self> {
        (0..layers)
            .map(|i| Self::init(ps, &format!("{prefix}.layer{i}"), hidden, rng))
            .collect()
    }
}

/// Scaled dot-product attention: `softmax(Q K^T / sqrt(d_h)) V`, with masked
/// key positions receiving zero weight.
pub fn attention<F: Scalar>(
    tape: &mut Tape<F>,
    q: Var,
    k: Var,
    v: Var,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    attention_impl(tape, q, k, v, key_mask, &mut Mode::Eval)
}

fn attention_impl<F: Scalar>(
    tape: &mut Tape<F>,
    q: Var,
    k: Var,
    v: Var,
    key_mask: Option<&[bool]>,
    mode: &mut Mode,
) -> Result<Var> {
    let (tq, dh) = tape.value(q).shape();
    let (tk, dk) = tape.value(k).shape();
    let (tv, _) = tape.value(v).shape();
    if dh != dk || tk != tv {
        return Err(Error::ShapeMismatch(format!(
            "attention: Q {tq}x{dh}, K {tk}x{dk}, V rows {tv}"
        )));
    }
    let keep: Vec<bool> = match key_mask {
        Some(m) => {
            if m.len() != tk {
                return Err(Error::ShapeMismatch(format!(
                    "attention: mask length {} vs {} keys",
                    m.len(),
                    tk
                )));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::Invalid("attention: every key masked".into()));
            }
            m.to_vec()
        }
        None => vec![true; tk],
    };
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt);
    let scaled = tape.scale(scores, F::from_f64(1.0 / (dh as f64).sqrt()));
    let probs = tape.masked_softmax_rows(scaled, Rc::new(keep));
    let probs = maybe_dropout(tape, probs, mode);
    Ok(tape.matmul(probs, v))
}

/// Multi-head self-attention over `h` (T x hidden): project, attend per
/// head, concatenate, project out.
pub fn multi_head_attention<F: Scalar>(
    tape: &mut Tape<F>,
    ps: &ParamSet<F>,
    params: &AttentionParams,
    h: Var,
    key_mask: Option<&[bool]>,
    heads: usize,
    mode: &mut Mode,
) -> Result<Var> {
    let (_, hidden) = tape.value(h).shape();
    if heads == 0 || hidden % heads != 0 {
        return Err(Error::InvalidParameter(format!(
            "head count {heads} must divide hidden size {hidden}"
        )));
    }
    let dh = hidden / heads;
    let wq = tape.param(ps, params.wq);
    let wk = tape.param(ps, params.wk);
    let wv = tape.param(ps, params.wv);
    let q = tape.matmul(h, wq);
    let k = tape.matmul(h, wk);
    let v = tape.matmul(h, wv);
    let mut head_outs = Vec::with_capacity(heads);
    for i in 0..heads {
        let qh = tape.slice_cols(q, i * dh, dh);
        let kh = tape.slice_cols(k, i * dh, dh);
        let vh = tape.slice_cols(v, i * dh, dh);
        head_outs.push(attention_impl(tape, qh, kh, vh, key_mask, &mut mode.reborrow())?);
    }
    let joined = if heads == 1 {
        head_outs[0]
    } else {
        tape.concat_cols(&head_outs)
    };
    let wo = tape.param(ps, params.wo);
    Ok(tape.matmul(joined, wo))
}

/// `ReLU(H W1 + b1) W2 + b2`.
pub fn ffn<F: Scalar>(
    tape: &mut Tape<F>,
    ps: &ParamSet<F>,
    params: &FfnParams,
    h: Var,
) -> Result<Var> {
    let (_, hidden) = tape.value(h).shape();
    let w1 = tape.param(ps, params.w1);
    if tape.value(w1).rows() != hidden {
        return Err(Error::ShapeMismatch(format!(
            "ffn: input width {hidden} vs W1 rows {}",
            tape.value(w1).rows()
        )));
    }
    let b1 = tape.param(ps, params.b1);
    let w2 = tape.param(ps, params.w2);
    let b2 = tape.param(ps, params.b2);
    let x = tape.matmul(h, w1);
    let x = tape.add_row(x, b1);
    let x = tape.relu(x);
    let x = tape.matmul(x, w2);
    Ok(tape.add_row(x, b2))
}

/// One pre-norm transformer layer.
pub fn transformer_layer<F: Scalar>(
    tape: &mut Tape<F>,
    ps: &ParamSet<F>,
    layer: &TransformerLayerParams,
    h: Var,
    key_mask: Option<&[bool]>,
    heads: usize,
    mode: &mut Mode,
) -> Result<Var> {
    let normed = layer.ln1.forward(tape, ps, h);
    let attn_out = multi_head_attention(tape, ps, &layer.attn, normed, key_mask, heads, mode)?;
    let x = tape.add(h, attn_out);
    let normed = layer.ln2.forward(tape, ps, x);
    let f = ffn(tape, ps, &layer.ffn, normed)?;
    let f = maybe_dropout(tape, f, mode);
    Ok(tape.add(x, f))
}

/// Sequential application of a layer stack; an empty stack is the identity.
pub fn encoder_forward<F: Scalar>(
    tape: &mut Tape<F>,
    ps: &ParamSet<F>,
    layers: &[TransformerLayerParams],
    h: Var,
    key_mask: Option<&[bool]>,
    heads: usize,
    mode: &mut Mode,
) -> Result<Var> {
    let mut cur = h;
    for layer in layers {
        cur = transformer_layer(tape, ps, layer, cur, key_mask, heads, &mut mode.reborrow())?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn toy(rows: usize, cols: usize, salt: f64) -> Tensor<f64> {
        Tensor::new(
            rows,
            cols,
            (0..rows * cols)
                .map(|i| ((i as f64 + salt) * 0.917).sin() * 0.8)
                .collect(),
        )
    }

    #[test]
    fn attention_single_position_returns_v() {
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(toy(1, 4, 1.0));
        let k = tape.leaf(toy(1, 4, 2.0));
        let v = tape.leaf(toy(1, 4, 3.0));
        let out = attention(&mut tape, q, k, v, None).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(v).data());
    }

    #[test]
    fn attention_identical_keys_average_v() {
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(toy(2, 3, 1.0));
        let krow = toy(1, 3, 2.0);
        let mut kdata = Vec::new();
        for _ in 0..4 {
            kdata.extend_from_slice(krow.data());
        }
        let k = tape.leaf(Tensor::new(4, 3, kdata));
        let v = tape.leaf(toy(4, 3, 3.0));
        let out = attention(&mut tape, q, k, v, None).unwrap();
        for r in 0..2 {
            for j in 0..3 {
                let mean: f64 = (0..4).map(|i| tape.value(v).get(i, j)).sum::<f64>() / 4.0;
                assert!((tape.value(out).get(r, j) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_dense_reference() {
        // Straight re-evaluation of softmax(QK^T/sqrt(d)) V with plain loops.
        let q = toy(3, 4, 1.0);
        let k = toy(3, 4, 2.0);
        let v = toy(3, 4, 3.0);
        let mut reference = Tensor::<f64>::zeros(3, 4);
        for i in 0..3 {
            let mut logits = [0.0f64; 3];
            for (j, l) in logits.iter_mut().enumerate() {
                let mut dot = 0.0;
                for d in 0..4 {
                    dot += q.get(i, d) * k.get(j, d);
                }
                *l = dot / (4.0f64).sqrt();
            }
            let maxv = logits.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - maxv).exp()).collect();
            let z: f64 = exps.iter().sum();
            for d in 0..4 {
                let mut acc = 0.0;
                for (j, &e) in exps.iter().enumerate() {
                    acc += e / z * v.get(j, d);
                }
                reference.set(i, d, acc);
            }
        }

        let mut tape = Tape::<f64>::new();
        let qv = tape.leaf(q);
        let kv = tape.leaf(k);
        let vv = tape.leaf(v);
        let out = attention(&mut tape, qv, kv, vv, None).unwrap();
        assert!(tape.value(out).max_abs_diff(&reference) < 1e-6);
    }

    #[test]
    fn attention_shape_mismatch_is_error() {
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(toy(2, 4, 1.0));
        let k = tape.leaf(toy(3, 5, 2.0));
        let v = tape.leaf(toy(3, 4, 3.0));
        assert!(attention(&mut tape, q, k, v, None).is_err());
        let k2 = tape.leaf(toy(3, 4, 2.0));
        assert!(attention(&mut tape, q, k2, v, Some(&[true, false])).is_err());
        assert!(attention(&mut tape, q, k2, v, Some(&[false, false, false])).is_err());
    }

    #[test]
    fn ffn_zero_weights_give_constant() {
        let mut ps = ParamSet::<f64>::new();
        let params = FfnParams {
            w1: ps.add_zeros("w1", 3, 6),
            b1: ps.add_zeros("b1", 1, 6),
            w2: ps.add_zeros("w2", 6, 3),
            b2: ps.add("b2", Tensor::new(1, 3, vec![0.5, -1.0, 2.0])),
        };
        let mut tape = Tape::new();
        let h = tape.leaf(toy(4, 3, 1.0));
        let out = ffn(&mut tape, &ps, &params, h).unwrap();
        for r in 0..4 {
            assert_eq!(tape.value(out).row(r), &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn ffn_identity_passthrough_for_positive_input() {
        let mut ps = ParamSet::<f64>::new();
        let params = FfnParams {
            w1: ps.add("w1", Tensor::new(1, 1, vec![1.0])),
            b1: ps.add_zeros("b1", 1, 1),
            w2: ps.add("w2", Tensor::new(1, 1, vec![1.0])),
            b2: ps.add_zeros("b2", 1, 1),
        };
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::new(1, 1, vec![0.73]));
        let out = ffn(&mut tape, &ps, &params, h).unwrap();
        assert_eq!(tape.value(out).item(), 0.73);
    }

    #[test]
    fn ffn_reference_evaluation() {
        let mut ps = ParamSet::<f64>::new();
        let w1 = toy(3, 12, 4.0);
        let b1 = toy(1, 12, 5.0);
        let w2 = toy(12, 3, 6.0);
        let b2 = toy(1, 3, 7.0);
        let params = FfnParams {
            w1: ps.add("w1", w1.clone()),
            b1: ps.add("b1", b1.clone()),
            w2: ps.add("w2", w2.clone()),
            b2: ps.add("b2", b2.clone()),
        };
        let h = toy(2, 3, 1.0);
        let mut reference = Tensor::<f64>::zeros(2, 3);
        for i in 0..2 {
            let mut inner = [0.0f64; 12];
            for (j, cell) in inner.iter_mut().enumerate() {
                let mut acc = b1.get(0, j);
                for d in 0..3 {
                    acc += h.get(i, d) * w1.get(d, j);
                }
                *cell = acc.max(0.0);
            }
            for d in 0..3 {
                let mut acc = b2.get(0, d);
                for (j, &x) in inner.iter().enumerate() {
                    acc += x * w2.get(j, d);
                }
                reference.set(i, d, acc);
            }
        }
        let mut tape = Tape::new();
        let hv = tape.leaf(h);
        let out = ffn(&mut tape, &ps, &params, hv).unwrap();
        assert!(tape.value(out).max_abs_diff(&reference) < 1e-6);
    }

    #[test]
    fn zero_layer_adds_only_ffn_bias() {
        // All weights zero, LN affine identity: attention contributes zero,
        // the FFN path contributes b2, so out = in + b2 per row.
        let hidden = 3;
        let mut ps = ParamSet::<f64>::new();
        let layer = TransformerLayerParams {
            ln1: LayerNormParams::init(&mut ps, "ln1", hidden),
            attn: AttentionParams {
                wq: ps.add_zeros("wq", hidden, hidden),
                wk: ps.add_zeros("wk", hidden, hidden),
                wv: ps.add_zeros("wv", hidden, hidden),
                wo: ps.add_zeros("wo", hidden, hidden),
            },
            ln2: LayerNormParams::init(&mut ps, "ln2", hidden),
            ffn: FfnParams {
                w1: ps.add_zeros("w1", hidden, 12),
                b1: ps.add_zeros("b1", 1, 12),
                w2: ps.add_zeros("w2", 12, hidden),
                b2: ps.add("b2", Tensor::new(1, 3, vec![0.25, 0.5, -0.75])),
            },
        };
        let input = toy(4, 3, 1.0);
        let mut tape = Tape::new();
        let h = tape.leaf(input.clone());
        let out = transformer_layer(&mut tape, &ps, &layer, h, None, 1, &mut Mode::Eval).unwrap();
        for r in 0..4 {
            for j in 0..3 {
                let want = input.get(r, j) + [0.25, 0.5, -0.75][j];
                assert!((tape.value(out).get(r, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let mut ps = ParamSet::<f64>::new();
        let layers =
            TransformerLayerParams::init_stack(&mut ps, "enc", 2, 8, &mut stream(3, "init"));
        let run = || {
            let mut tape = Tape::new();
            let h = tape.leaf(toy(5, 8, 2.0));
            let out = encoder_forward(&mut tape, &ps, &layers, h, None, 2, &mut Mode::Eval).unwrap();
            tape.value(out).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn encoder_zero_layers_is_identity() {
        let ps = ParamSet::<f64>::new();
        let mut tape = Tape::new();
        let h = tape.leaf(toy(3, 4, 1.0));
        let out = encoder_forward(&mut tape, &ps, &[], h, None, 1, &mut Mode::Eval).unwrap();
        assert_eq!(tape.value(out), tape.value(h));
    }

    #[test]
    fn encoder_composes_layers() {
        let mut ps = ParamSet::<f64>::new();
        let layers =
            TransformerLayerParams::init_stack(&mut ps, "enc", 2, 8, &mut stream(9, "init"));
        let input = toy(4, 8, 3.0);

        let mut tape = Tape::new();
        let h = tape.leaf(input.clone());
        let stacked =
            encoder_forward(&mut tape, &ps, &layers, h, None, 2, &mut Mode::Eval).unwrap();

        let mut tape2 = Tape::new();
        let h2 = tape2.leaf(input);
        let mid =
            transformer_layer(&mut tape2, &ps, &layers[0], h2, None, 2, &mut Mode::Eval).unwrap();
        let manual =
            transformer_layer(&mut tape2, &ps, &layers[1], mid, None, 2, &mut Mode::Eval).unwrap();

        assert_eq!(tape.value(stacked).data(), tape2.value(manual).data());
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let hidden = 6;
        let mut ps = ParamSet::<f64>::new();
        let layer = TransformerLayerParams::init(&mut ps, "l", hidden, &mut stream(11, "init"));
        let input = toy(4, hidden, 5.0);
        let mask = vec![true, true, true, false];

        let loss_of = |ps: &ParamSet<f64>| -> f64 {
            let mut tape = Tape::new();
            let h = tape.leaf(input.clone());
            let out =
                transformer_layer(&mut tape, ps, &layer, h, Some(&mask), 2, &mut Mode::Eval)
                    .unwrap();
            // Only unmasked rows feed the loss, like the pipeline does.
            let picked = tape.gather_rows(out, Rc::new(vec![0, 1, 2]));
            let sq = tape.mul(picked, picked);
            let loss = tape.mean_all(sq);
            tape.value(loss).item()
        };

        ps.zero_grads();
        {
            let mut tape = Tape::new();
            let h = tape.leaf(input.clone());
            let out =
                transformer_layer(&mut tape, &ps, &layer, h, Some(&mask), 2, &mut Mode::Eval)
                    .unwrap();
            let picked = tape.gather_rows(out, Rc::new(vec![0, 1, 2]));
            let sq = tape.mul(picked, picked);
            let loss = tape.mean_all(sq);
            tape.backward(loss, &mut ps).unwrap();
        }

        let h = 1e-5;
        let mut checked = 0;
        for id in ps.ids() {
            let count = ps.get(id).value.len();
            for k in (0..count).step_by(count.div_ceil(3)) {
                let orig = ps.get(id).value.data()[k];
                let analytic = ps.get(id).grad.data()[k];
                ps.get_mut(id).value.data_mut()[k] = orig + h;
                let up = loss_of(&ps);
                ps.get_mut(id).value.data_mut()[k] = orig - h;
                let down = loss_of(&ps);
                ps.get_mut(id).value.data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * h);
                let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-4,
                    "param {} [{k}]: analytic {analytic} vs numeric {numeric}",
                    ps.get(id).name
                );
                checked += 1;
            }
        }
        assert!(checked >= 20, "only {checked} entries checked");
    }
}
