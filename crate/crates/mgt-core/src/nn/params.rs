//! Named model parameters with accumulated gradients.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter<F: Scalar> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

/// All learnable state of a model. Gradients accumulate across backward
/// calls until explicitly zeroed.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<F: Scalar> {
    params: Vec<Parameter<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name:?}"
        );
        let grad = Tensor::zeros(value.rows(), value.cols());
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        ParamId(id)
    }

    /// Weight initialized from N(0, std^2). Draws happen in f64, so f32 and
    /// f64 models built from the same stream hold the same values.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let data: Vec<F> = (0..rows * cols)
            .map(|_| F::from_f64(gauss(rng) * std))
            .collect();
        self.add(name, Tensor::new(rows, cols, data))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::zeros(rows, cols))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::filled(rows, cols, F::one()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        (0..self.params.len()).map(ParamId).collect()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.rows(), p.value.cols());
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<F>) {
        self.params[id.0].grad.add_assign(grad);
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Copy values (by name) from another set. Missing names are an error;
    /// extra parameters in `other` are ignored.
    pub fn load_values_from(&mut self, other: &ParamSet<F>) -> crate::error::Result<()> {
        for p in &mut self.params {
            let Some(&src) = other.by_name.get(&p.name) else {
                return Err(crate::error::Error::Invalid(format!(
                    "checkpoint is missing parameter {:?}",
                    p.name
                )));
            };
            let src = &other.params[src];
            if src.value.shape() != p.value.shape() {
                return Err(crate::error::Error::ShapeMismatch(format!(
                    "parameter {:?}: checkpoint {:?} vs model {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}

/// Standard normal deviate via Box-Muller on f64 draws.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.random();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.random();
        return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn names_resolve() {
        let mut ps = ParamSet::<f32>::new();
        let id = ps.add_zeros("w", 2, 3);
        assert_eq!(ps.id_by_name("w"), Some(id));
        assert_eq!(ps.get(id).value.shape(), (2, 3));
        assert!(ps.id_by_name("nope").is_none());
    }

    #[test]
    fn init_deterministic_across_precisions() {
        let mut a = ParamSet::<f32>::new();
        a.add_normal("w", 4, 4, 0.02, &mut stream(1, "init"));
        let mut b = ParamSet::<f64>::new();
        b.add_normal("w", 4, 4, 0.02, &mut stream(1, "init"));
        let a0 = a.get(ParamId(0)).value.data()[0];
        let b0 = b.get(ParamId(0)).value.data()[0];
        assert_eq!(a0, b0 as f32);
    }

    #[test]
    fn grad_accumulates_until_zeroed() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.add_zeros("w", 1, 2);
        let g = Tensor::new(1, 2, vec![1.0, 2.0]);
        ps.accumulate_grad(id, &g);
        ps.accumulate_grad(id, &g);
        assert_eq!(ps.get(id).grad.data(), &[2.0, 4.0]);
        ps.zero_grads();
        assert_eq!(ps.get(id).grad.data(), &[0.0, 0.0]);
    }
}
