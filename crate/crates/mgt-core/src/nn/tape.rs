//! Append-only gradient tape.
//!
//! Every forward op records a node; parents always precede children, so one
//! reverse sweep visits nodes in valid topological order. Parameter leaves
//! accumulate their gradients into the owning [`ParamSet`] so that repeated
//! backward calls add up until the caller zeroes them.

use std::rc::Rc;

use super::params::{ParamId, ParamSet};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F: Scalar> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// a: m x n, bias: 1 x n added to each row.
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Relu(Var),
    /// Row-wise softmax over the columns where keep[j] is true; masked
    /// columns get probability zero.
    MaskedSoftmaxRows(Var, Rc<Vec<bool>>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: F,
    },
    /// Elementwise product with a constant tensor (dropout masks).
    MulMask(Var, Rc<Tensor<F>>),
    GatherRows(Var, Rc<Vec<usize>>),
    /// Interleave rows of two inputs into one output by position.
    RiffleRows {
        a: Var,
        pos_a: Rc<Vec<usize>>,
        b: Var,
        pos_b: Rc<Vec<usize>>,
    },
    RepeatRow(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    /// Per-row cosine similarity of two m x n inputs, giving m x 1.
    RowCosine(Var, Var),
    PowConst(Var, F),
    /// c - x.
    ConstSub(F, Var),
    MeanAll(Var),
    SumAll(Var),
    LogSumExpAll(Var),
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Per-var gradients from one backward sweep; lets tests probe gradients of
/// non-parameter leaves (e.g. input features).
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Constant or input leaf; receives a gradient but owns no parameter.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf bound to a parameter; backward accumulates into its grad buffer.
    pub fn param(&mut self, ps: &ParamSet<F>, id: ParamId) -> Var {
        self.push(ps.get(id).value.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (m, n) = self.value(a).shape();
        assert_eq!(self.value(bias).shape(), (1, n), "add_row bias shape");
        let mut out = self.value(a).clone();
        for i in 0..m {
            for j in 0..n {
                let b = self.value(bias).get(0, j);
                out.set(i, j, out.get(i, j) + b);
            }
        }
        self.push(out, Op::AddRow(a, bias))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > F::zero() { x } else { F::zero() });
        self.push(out, Op::Relu(a))
    }

    pub fn masked_softmax_rows(&mut self, a: Var, keep: Rc<Vec<bool>>) -> Var {
        let (m, n) = self.value(a).shape();
        assert_eq!(keep.len(), n, "softmax mask length");
        assert!(keep.iter().any(|&k| k), "softmax with every column masked");
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let row = self.value(a).row(i);
            let mut maxv = F::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if keep[j] && v > maxv {
                    maxv = v;
                }
            }
            let mut sum = F::zero();
            let mut exps = vec![F::zero(); n];
            for (j, &v) in row.iter().enumerate() {
                if keep[j] {
                    let e = (v - maxv).exp();
                    exps[j] = e;
                    sum += e;
                }
            }
            for (j, e) in exps.into_iter().enumerate() {
                out.set(i, j, e / sum);
            }
        }
        self.push(out, Op::MaskedSoftmaxRows(a, keep))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let n = self.value(a).cols();
        self.masked_softmax_rows(a, Rc::new(vec![true; n]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Var {
        let (m, n) = self.value(x).shape();
        assert_eq!(self.value(gamma).shape(), (1, n), "layer_norm gamma shape");
        assert_eq!(self.value(beta).shape(), (1, n), "layer_norm beta shape");
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let (mean, inv) = row_norm_stats(self.value(x).row(i), eps);
            for j in 0..n {
                let xh = (self.value(x).get(i, j) - mean) * inv;
                out.set(i, j, self.value(gamma).get(0, j) * xh + self.value(beta).get(0, j));
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, eps })
    }

    pub fn mul_mask(&mut self, a: Var, mask: Rc<Tensor<F>>) -> Var {
        let out = self.value(a).zip_map(&mask, |x, m| x * m);
        self.push(out, Op::MulMask(a, mask))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let (m, n) = self.value(a).shape();
        let mut out = Tensor::zeros(idx.len(), n);
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < m, "gather_rows index {i} out of range (rows={m})");
            out.row_mut(r).copy_from_slice(self.value(a).row(i));
        }
        self.push(out, Op::GatherRows(a, idx))
    }

    pub fn riffle_rows(
        &mut self,
        a: Var,
        pos_a: Rc<Vec<usize>>,
        b: Var,
        pos_b: Rc<Vec<usize>>,
    ) -> Var {
        let n = self.value(a).cols();
        assert_eq!(self.value(b).cols(), n, "riffle_rows width mismatch");
        assert_eq!(self.value(a).rows(), pos_a.len());
        assert_eq!(self.value(b).rows(), pos_b.len());
        let total = pos_a.len() + pos_b.len();
        let mut seen = vec![false; total];
        let mut out = Tensor::zeros(total, n);
        for (r, &p) in pos_a.iter().enumerate() {
            assert!(!seen[p], "riffle_rows: duplicate position {p}");
            seen[p] = true;
            out.row_mut(p).copy_from_slice(self.value(a).row(r));
        }
        for (r, &p) in pos_b.iter().enumerate() {
            assert!(!seen[p], "riffle_rows: duplicate position {p}");
            seen[p] = true;
            out.row_mut(p).copy_from_slice(self.value(b).row(r));
        }
        self.push(out, Op::RiffleRows { a, pos_a, b, pos_b })
    }

    pub fn repeat_row(&mut self, a: Var, times: usize) -> Var {
        assert_eq!(self.value(a).rows(), 1, "repeat_row wants 1 x n input");
        let n = self.value(a).cols();
        let mut out = Tensor::zeros(times, n);
        for r in 0..times {
            out.row_mut(r).copy_from_slice(self.value(a).row(0));
        }
        self.push(out, Op::RepeatRow(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|&v| self.value(v).rows()).sum();
        let mut out = Tensor::zeros(total, n);
        let mut at = 0;
        for &v in parts {
            for r in 0..self.value(v).rows() {
                out.row_mut(at).copy_from_slice(self.value(v).row(r));
                at += 1;
            }
        }
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&v| self.value(v).cols()).sum();
        let mut out = Tensor::zeros(m, total);
        let mut at = 0;
        for &v in parts {
            let w = self.value(v).cols();
            assert_eq!(self.value(v).rows(), m, "concat_cols row mismatch");
            for i in 0..m {
                out.row_mut(i)[at..at + w].copy_from_slice(self.value(v).row(i));
            }
            at += w;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.value(x).shape();
        assert!(start + len <= n, "slice_cols out of range");
        let mut out = Tensor::zeros(m, len);
        for i in 0..m {
            out.row_mut(i).copy_from_slice(&self.value(x).row(i)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start, len })
    }

    /// Per-row cosine similarity; callers must rule out zero-norm rows.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = self.value(a).shape();
        assert_eq!(self.value(b).shape(), (m, n), "row_cosine shape mismatch");
        let mut out = Tensor::zeros(m, 1);
        for i in 0..m {
            let (na, nb, dot) = row_cosine_stats(self.value(a).row(i), self.value(b).row(i));
            assert!(
                na > F::zero() && nb > F::zero(),
                "row_cosine: zero-norm row {i}"
            );
            out.set(i, 0, dot / (na * nb));
        }
        self.push(out, Op::RowCosine(a, b))
    }

    /// Elementwise x^p for non-negative inputs.
    pub fn pow_const(&mut self, a: Var, p: F) -> Var {
        let out = self.value(a).map(|x| x.powf(p));
        self.push(out, Op::PowConst(a, p))
    }

    pub fn const_sub(&mut self, c: F, a: Var) -> Var {
        let out = self.value(a).map(|x| c - x);
        self.push(out, Op::ConstSub(c, a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let len = self.value(a).len();
        assert!(len > 0, "mean over empty tensor");
        let sum: F = self.value(a).data().iter().copied().sum();
        let out = Tensor::scalar(sum / F::from_f64(len as f64));
        self.push(out, Op::MeanAll(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let sum: F = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(sum), Op::SumAll(a))
    }

    pub fn logsumexp_all(&mut self, a: Var) -> Var {
        let data = self.value(a).data();
        assert!(!data.is_empty());
        let maxv = data.iter().copied().fold(F::neg_infinity(), F::max);
        let sum: F = data.iter().map(|&v| (v - maxv).exp()).sum();
        self.push(Tensor::scalar(maxv + sum.ln()), Op::LogSumExpAll(a))
    }

    /// Reverse sweep from a scalar loss. Parameter gradients accumulate into
    /// `ps`; the returned [`Gradients`] exposes per-var gradients for probes.
    pub fn backward(&self, loss: Var, ps: &mut ParamSet<F>) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward wants a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(F::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(pid) = node.op {
                if let Some(g) = &grads[i] {
                    ps.accumulate_grad(pid, g);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let acc = |grads: &mut [Option<Tensor<F>>], v: Var, add: Tensor<F>| match &mut grads[v.0] {
            Some(t) => t.add_assign(&add),
            slot @ None => *slot = Some(add),
        };
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let bt = self.value(*b).transpose();
                acc(grads, *a, g.matmul(&bt));
                let at = self.value(*a).transpose();
                acc(grads, *b, at.matmul(g));
            }
            Op::Transpose(a) => acc(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|x| -x));
            }
            Op::AddRow(a, bias) => {
                acc(grads, *a, g.clone());
                let (m, n) = g.shape();
                let mut gb = Tensor::zeros(1, n);
                for r in 0..m {
                    for j in 0..n {
                        gb.set(0, j, gb.get(0, j) + g.get(r, j));
                    }
                }
                acc(grads, *bias, gb);
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
            }
            Op::Scale(a, c) => acc(grads, *a, g.map(|x| x * *c)),
            Op::Relu(a) => acc(
                grads,
                *a,
                g.zip_map(self.value(*a), |gv, x| if x > F::zero() { gv } else { F::zero() }),
            ),
            Op::MaskedSoftmaxRows(a, keep) => {
                let y = &node.value;
                let (m, n) = y.shape();
                let mut gx = Tensor::zeros(m, n);
                for r in 0..m {
                    let mut dot = F::zero();
                    for j in 0..n {
                        dot += g.get(r, j) * y.get(r, j);
                    }
                    for j in 0..n {
                        if keep[j] {
                            gx.set(r, j, y.get(r, j) * (g.get(r, j) - dot));
                        }
                    }
                }
                acc(grads, *a, gx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.value(*x);
                let gm = self.value(*gamma);
                let (m, n) = xv.shape();
                let nf = F::from_f64(n as f64);
                let mut gx = Tensor::zeros(m, n);
                let mut gg = Tensor::zeros(1, n);
                let mut gb = Tensor::zeros(1, n);
                for r in 0..m {
                    let (mean, inv) = row_norm_stats(xv.row(r), *eps);
                    let mut mean_gh = F::zero();
                    let mut mean_ghx = F::zero();
                    let mut xhat = vec![F::zero(); n];
                    let mut gh = vec![F::zero(); n];
                    for j in 0..n {
                        xhat[j] = (xv.get(r, j) - mean) * inv;
                        gh[j] = g.get(r, j) * gm.get(0, j);
                        mean_gh += gh[j];
                        mean_ghx += gh[j] * xhat[j];
                        gg.set(0, j, gg.get(0, j) + g.get(r, j) * xhat[j]);
                        gb.set(0, j, gb.get(0, j) + g.get(r, j));
                    }
                    mean_gh = mean_gh / nf;
                    mean_ghx = mean_ghx / nf;
                    for j in 0..n {
                        gx.set(r, j, inv * (gh[j] - mean_gh - xhat[j] * mean_ghx));
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *gamma, gg);
                acc(grads, *beta, gb);
            }
            Op::MulMask(a, mask) => acc(grads, *a, g.zip_map(mask, |x, m| x * m)),
            Op::GatherRows(a, idx) => {
                let (m, n) = self.value(*a).shape();
                let mut ga = Tensor::zeros(m, n);
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..n {
                        ga.set(src, j, ga.get(src, j) + g.get(r, j));
                    }
                }
                acc(grads, *a, ga);
            }
            Op::RiffleRows { a, pos_a, b, pos_b } => {
                let n = g.cols();
                let mut ga = Tensor::zeros(pos_a.len(), n);
                for (r, &p) in pos_a.iter().enumerate() {
                    ga.row_mut(r).copy_from_slice(g.row(p));
                }
                acc(grads, *a, ga);
                let mut gb = Tensor::zeros(pos_b.len(), n);
                for (r, &p) in pos_b.iter().enumerate() {
                    gb.row_mut(r).copy_from_slice(g.row(p));
                }
                acc(grads, *b, gb);
            }
            Op::RepeatRow(a) => {
                let (m, n) = g.shape();
                let mut ga = Tensor::zeros(1, n);
                for r in 0..m {
                    for j in 0..n {
                        ga.set(0, j, ga.get(0, j) + g.get(r, j));
                    }
                }
                acc(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let mut gp = Tensor::zeros(rows, g.cols());
                    for r in 0..rows {
                        gp.row_mut(r).copy_from_slice(g.row(at + r));
                    }
                    at += rows;
                    acc(grads, p, gp);
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                let m = g.rows();
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut gp = Tensor::zeros(m, w);
                    for r in 0..m {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[at..at + w]);
                    }
                    at += w;
                    acc(grads, p, gp);
                }
            }
            Op::SliceCols { x, start, len } => {
                let (m, n) = self.value(*x).shape();
                let mut gx = Tensor::zeros(m, n);
                for r in 0..m {
                    gx.row_mut(r)[*start..*start + *len].copy_from_slice(g.row(r));
                }
                acc(grads, *x, gx);
            }
            Op::RowCosine(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, n) = av.shape();
                let mut ga = Tensor::zeros(m, n);
                let mut gb = Tensor::zeros(m, n);
                for r in 0..m {
                    let (na, nb, dot) = row_cosine_stats(av.row(r), bv.row(r));
                    let c = dot / (na * nb);
                    let gr = g.get(r, 0);
                    for j in 0..n {
                        let x = av.get(r, j);
                        let y = bv.get(r, j);
                        ga.set(r, j, gr * (y / (na * nb) - c * x / (na * na)));
                        gb.set(r, j, gr * (x / (na * nb) - c * y / (nb * nb)));
                    }
                }
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::PowConst(a, p) => {
                let pm1 = *p - F::one();
                acc(
                    grads,
                    *a,
                    g.zip_map(self.value(*a), |gv, x| gv * *p * x.powf(pm1)),
                );
            }
            Op::ConstSub(_, a) => acc(grads, *a, g.map(|x| -x)),
            Op::MeanAll(a) => {
                let (m, n) = self.value(*a).shape();
                let share = g.item() / F::from_f64((m * n) as f64);
                acc(grads, *a, Tensor::filled(m, n, share));
            }
            Op::SumAll(a) => {
                let (m, n) = self.value(*a).shape();
                acc(grads, *a, Tensor::filled(m, n, g.item()));
            }
            Op::LogSumExpAll(a) => {
                let av = self.value(*a);
                let maxv = av.data().iter().copied().fold(F::neg_infinity(), F::max);
                let sum: F = av.data().iter().map(|&v| (v - maxv).exp()).sum();
                let gi = g.item();
                acc(grads, *a, av.map(|v| gi * (v - maxv).exp() / sum));
            }
        }
    }
}

fn row_norm_stats<F: Scalar>(row: &[F], eps: F) -> (F, F) {
    let nf = F::from_f64(row.len() as f64);
    let mean = row.iter().copied().sum::<F>() / nf;
    let var = row
        .iter()
        .map(|&v| (v - mean) * (v - mean))
        .sum::<F>()
        / nf;
    (mean, F::one() / (var + eps).sqrt())
}

fn row_cosine_stats<F: Scalar>(a: &[F], b: &[F]) -> (F, F, F) {
    let mut na = F::zero();
    let mut nb = F::zero();
    let mut dot = F::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        na += x * x;
        nb += y * y;
        dot += x * y;
    }
    (na.sqrt(), nb.sqrt(), dot)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences on a leaf input, for spot checks. The
    /// full-model gradient check lives with the pretraining loss tests.
    fn numeric_grad(
        input: &Tensor<f64>,
        f: &dyn Fn(&mut Tape<f64>, Var) -> Var,
    ) -> Tensor<f64> {
        let h = 1e-6;
        let mut grad = Tensor::zeros(input.rows(), input.cols());
        for i in 0..input.len() {
            let mut plus = input.clone();
            plus.data_mut()[i] += h;
            let mut minus = input.clone();
            minus.data_mut()[i] -= h;
            let eval = |t: Tensor<f64>| {
                let mut tape = Tape::new();
                let v = tape.leaf(t);
                let loss = f(&mut tape, v);
                tape.value(loss).item()
            };
            grad.data_mut()[i] = (eval(plus) - eval(minus)) / (2.0 * h);
        }
        grad
    }

    fn analytic_grad(
        input: &Tensor<f64>,
        f: &dyn Fn(&mut Tape<f64>, Var) -> Var,
    ) -> Tensor<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(input.clone());
        let loss = f(&mut tape, v);
        let mut ps = ParamSet::new();
        let grads = tape.backward(loss, &mut ps).unwrap();
        grads.get(v).unwrap().clone()
    }

    fn check(input: &Tensor<f64>, f: &dyn Fn(&mut Tape<f64>, Var) -> Var) {
        let num = numeric_grad(input, f);
        let ana = analytic_grad(input, f);
        for i in 0..input.len() {
            let (a, b) = (ana.data()[i], num.data()[i]);
            let denom = a.abs().max(b.abs()).max(1e-8);
            assert!(
                (a - b).abs() / denom < 1e-5,
                "grad mismatch at {i}: analytic {a} vs numeric {b}"
            );
        }
    }

    fn test_input(rows: usize, cols: usize) -> Tensor<f64> {
        let vals: Vec<f64> = (0..rows * cols)
            .map(|i| ((i as f64 * 0.7311).sin() * 0.9) + 0.05)
            .collect();
        Tensor::new(rows, cols, vals)
    }

    #[test]
    fn grad_matmul() {
        let w = Tensor::new(4, 3, (0..12).map(|i| 0.1 * i as f64 - 0.5).collect());
        check(&test_input(2, 4), &move |t, x| {
            let wv = t.leaf(w.clone());
            let y = t.matmul(x, wv);
            t.sum_all(y)
        });
    }

    #[test]
    fn grad_softmax_masked() {
        let keep = Rc::new(vec![true, false, true, true]);
        check(&test_input(3, 4), &move |t, x| {
            let y = t.masked_softmax_rows(x, keep.clone());
            let sq = t.mul(y, y);
            t.sum_all(sq)
        });
    }

    #[test]
    fn grad_layer_norm() {
        let gamma = Tensor::new(1, 5, vec![1.1, 0.9, 1.3, 0.7, 1.0]);
        let beta = Tensor::new(1, 5, vec![0.1, -0.2, 0.0, 0.3, -0.1]);
        check(&test_input(2, 5), &move |t, x| {
            let g = t.leaf(gamma.clone());
            let b = t.leaf(beta.clone());
            let y = t.layer_norm(x, g, b, 1e-5);
            let sq = t.mul(y, y);
            t.sum_all(sq)
        });
    }

    #[test]
    fn grad_row_cosine() {
        let target = test_input(3, 4);
        check(&test_input(3, 4), &move |t, x| {
            let tv = t.leaf(target.clone());
            let c = t.row_cosine(x, tv);
            let one_minus = t.const_sub(1.0, c);
            let sq = t.pow_const(one_minus, 2.0);
            t.mean_all(sq)
        });
    }

    #[test]
    fn grad_logsumexp_gather_concat() {
        check(&test_input(5, 1), &move |t, x| {
            let picked = t.gather_rows(x, Rc::new(vec![0, 2, 4]));
            let lse = t.logsumexp_all(picked);
            let all = t.logsumexp_all(x);
            t.sub(all, lse)
        });
    }

    #[test]
    fn grad_relu_ffn_path() {
        let w1 = test_input(4, 6);
        let w2 = test_input(6, 4);
        check(&test_input(2, 4), &move |t, x| {
            let w1v = t.leaf(w1.clone());
            let w2v = t.leaf(w2.clone());
            let h = t.matmul(x, w1v);
            let a = t.relu(h);
            let y = t.matmul(a, w2v);
            t.mean_all(y)
        });
    }

    #[test]
    fn grad_riffle_repeat() {
        check(&test_input(1, 3), &move |t, x| {
            let rows = t.repeat_row(x, 2);
            let other = t.leaf(test_input(2, 3));
            let full = t.riffle_rows(rows, Rc::new(vec![0, 2]), other, Rc::new(vec![1, 3]));
            let sq = t.mul(full, full);
            t.sum_all(sq)
        });
    }

    #[test]
    fn grad_slice_concat_cols() {
        check(&test_input(2, 6), &move |t, x| {
            let a = t.slice_cols(x, 0, 3);
            let b = t.slice_cols(x, 3, 3);
            let prod = t.mul(a, b);
            let joined = t.concat_cols(&[prod, a]);
            t.sum_all(joined)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(test_input(4, 6));
        let keep = Rc::new(vec![true, true, false, true, false, true]);
        let y = tape.masked_softmax_rows(x, keep.clone());
        for r in 0..4 {
            let sum: f64 = tape.value(y).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert_eq!(tape.value(y).get(r, 2), 0.0);
            assert_eq!(tape.value(y).get(r, 4), 0.0);
        }
    }

    #[test]
    fn backward_wants_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(test_input(2, 2));
        let mut ps = ParamSet::new();
        assert!(tape.backward(x, &mut ps).is_err());
    }

    #[test]
    fn param_grads_accumulate_twice() {
        let mut ps = ParamSet::<f64>::new();
        let w = ps.add(
            "w",
            Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]),
        );
        let x = Tensor::new(1, 2, vec![0.5, -1.0]);

        let mut tape = Tape::new();
        let wv = tape.param(&ps, w);
        let xv = tape.leaf(x);
        let y = tape.matmul(xv, wv);
        let loss = tape.sum_all(y);
        tape.backward(loss, &mut ps).unwrap();
        let g1 = ps.get(w).grad.clone();
        tape.backward(loss, &mut ps).unwrap();
        let g2 = ps.get(w).grad.clone();
        for i in 0..g1.len() {
            assert_eq!(g2.data()[i], 2.0 * g1.data()[i]);
        }
        // loss = sum((x W)) so dW[i][j] = x[i]
        assert_eq!(g1.get(0, 0), 0.5);
        assert_eq!(g1.get(1, 1), -1.0);
    }

    #[test]
    fn gather_rows_duplicate_indices_accumulate() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(2, 1, vec![3.0, 4.0]));
        let picked = tape.gather_rows(x, Rc::new(vec![0, 0, 1]));
        let loss = tape.sum_all(picked);
        let mut ps = ParamSet::new();
        let grads = tape.backward(loss, &mut ps).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 1.0]);
    }
}
