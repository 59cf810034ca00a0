//! Linear probing: multinomial logistic regression on frozen embeddings,
//! trained full-batch with Adam and early stopping on validation accuracy.

use std::collections::BTreeMap;

use crate::downstream::metrics::roc_auc;
use crate::downstream::EvalReport;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::graph::Split;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ProbeConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: 0.01,
            max_epochs: 5000,
            patience: 100,
        }
    }
}

/// Trained probe head: `logits = x W + b` in f64.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    pub num_classes: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub epochs_run: usize,
}

impl LinearProbe {
    pub fn logits(&self, x: &[f32]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (j, &xv) in x.iter().enumerate() {
            let w = &self.weights[j * self.num_classes..(j + 1) * self.num_classes];
            for (o, &wv) in out.iter_mut().zip(w.iter()) {
                *o += xv as f64 * wv;
            }
        }
        out
    }

    pub fn probabilities(&self, x: &[f32]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    pub fn predict(&self, x: &[f32]) -> usize {
        argmax(&self.logits(x))
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let maxv = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - maxv).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Labeled rows of an embedding matrix, with split assignment.
pub type LabeledRows = Vec<(usize, usize, Split)>;

struct SplitView<'a> {
    emb: &'a FeatureMatrix,
    rows: Vec<usize>,
    labels: Vec<usize>,
}

impl SplitView<'_> {
    fn accuracy(&self, probe: &LinearProbe) -> f64 {
        if self.rows.is_empty() {
            return f64::NAN;
        }
        let correct = self
            .rows
            .iter()
            .zip(self.labels.iter())
            .filter(|&(&r, &y)| probe.predict(self.emb.row(r)) == y)
            .count();
        correct as f64 / self.rows.len() as f64
    }
}

/// Macro one-vs-rest ROC-AUC over classes with both outcomes present;
/// plain binary AUC when there are two classes.
fn probe_auc(probe: &LinearProbe, view: &SplitView) -> Option<f64> {
    if view.rows.is_empty() {
        return None;
    }
    let probs: Vec<Vec<f64>> = view
        .rows
        .iter()
        .map(|&r| probe.probabilities(view.emb.row(r)))
        .collect();
    if probe.num_classes == 2 {
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let labels: Vec<bool> = view.labels.iter().map(|&y| y == 1).collect();
        return roc_auc(&scores, &labels).ok();
    }
    let mut aucs = Vec::new();
    for class in 0..probe.num_classes {
        let scores: Vec<f64> = probs.iter().map(|p| p[class]).collect();
        let labels: Vec<bool> = view.labels.iter().map(|&y| y == class).collect();
        if let Ok(a) = roc_auc(&scores, &labels) {
            aucs.push(a);
        }
    }
    if aucs.is_empty() {
        None
    } else {
        Some(aucs.iter().sum::<f64>() / aucs.len() as f64)
    }
}

/// Train a probe on the train split, early-stop on validation accuracy
/// (when a validation split exists), report test accuracy and ROC-AUC.
pub fn linear_probe(
    embeddings: &FeatureMatrix,
    labeled: &LabeledRows,
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<(LinearProbe, EvalReport)> {
    if num_classes < 2 {
        return Err(Error::InvalidParameter(
            "probe needs at least two classes".into(),
        ));
    }
    let view = |split: Split| -> SplitView {
        let picked: Vec<(usize, usize)> = labeled
            .iter()
            .filter(|&&(_, _, s)| s == split)
            .map(|&(r, y, _)| (r, y))
            .collect();
        SplitView {
            emb: embeddings,
            rows: picked.iter().map(|&(r, _)| r).collect(),
            labels: picked.iter().map(|&(_, y)| y).collect(),
        }
    };
    let train = view(Split::Train);
    let valid = view(Split::Valid);
    let test = view(Split::Test);
    if train.rows.is_empty() {
        return Err(Error::Invalid("probe train split is empty".into()));
    }
    for (&r, &y) in train.rows.iter().zip(train.labels.iter()) {
        if r >= embeddings.n() || y >= num_classes {
            return Err(Error::Invalid(format!(
                "bad labeled row ({r}, class {y})"
            )));
        }
    }
    {
        let first = train.labels[0];
        if train.labels.iter().all(|&y| y == first) {
            return Err(Error::Invalid(
                "probe train split contains a single class".into(),
            ));
        }
    }

    let dim = embeddings.dim();
    let mut probe = LinearProbe {
        num_classes,
        dim,
        weights: vec![0.0; dim * num_classes],
        bias: vec![0.0; num_classes],
        epochs_run: 0,
    };

    // Adam state
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut mw = vec![0.0; probe.weights.len()];
    let mut vw = vec![0.0; probe.weights.len()];
    let mut mb = vec![0.0; probe.bias.len()];
    let mut vb = vec![0.0; probe.bias.len()];

    let n_train = train.rows.len() as f64;
    let mut best = (f64::NEG_INFINITY, probe.weights.clone(), probe.bias.clone());
    let mut since_best = 0usize;

    for epoch in 0..cfg.max_epochs {
        let mut gw = vec![0.0; probe.weights.len()];
        let mut gb = vec![0.0; probe.bias.len()];
        for (&r, &y) in train.rows.iter().zip(train.labels.iter()) {
            let x = embeddings.row(r);
            let mut p = probe.probabilities(x);
            p[y] -= 1.0;
            for (j, &xv) in x.iter().enumerate() {
                let grow = &mut gw[j * num_classes..(j + 1) * num_classes];
                for (g, &pv) in grow.iter_mut().zip(p.iter()) {
                    *g += xv as f64 * pv;
                }
            }
            for (g, &pv) in gb.iter_mut().zip(p.iter()) {
                *g += pv;
            }
        }
        let t = (epoch + 1) as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let adam = |w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..w.len() {
                let gi = g[i] / n_train;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                w[i] -= cfg.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            }
        };
        adam(&mut probe.weights, &gw, &mut mw, &mut vw);
        adam(&mut probe.bias, &gb, &mut mb, &mut vb);
        probe.epochs_run = epoch + 1;

        if !valid.rows.is_empty() {
            let acc = valid.accuracy(&probe);
            if acc > best.0 {
                best = (acc, probe.weights.clone(), probe.bias.clone());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
    }
    if !valid.rows.is_empty() && best.0.is_finite() {
        probe.weights = best.1;
        probe.bias = best.2;
    }

    let mut metrics = BTreeMap::new();
    let test_acc = test.accuracy(&probe);
    if test_acc.is_finite() {
        metrics.insert("accuracy".to_string(), test_acc);
    }
    if let Some(auc) = probe_auc(&probe, &test) {
        metrics.insert("roc_auc".to_string(), auc);
    }
    metrics.insert("train_accuracy".to_string(), train.accuracy(&probe));

    let report = EvalReport::new(
        "linear_probe",
        metrics,
        BTreeMap::new(),
        serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null),
    );
    Ok((probe, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_cfg() -> ProbeConfig {
        ProbeConfig {
            lr: 0.05,
            max_epochs: 400,
            patience: 50,
        }
    }

    fn make_rows(
        n: usize,
        mut f: impl FnMut(usize) -> (Vec<f32>, usize, Split),
    ) -> (FeatureMatrix, LabeledRows) {
        let mut data = Vec::new();
        let mut labeled = Vec::new();
        let mut dim = 0;
        for i in 0..n {
            let (x, y, s) = f(i);
            dim = x.len();
            data.extend_from_slice(&x);
            labeled.push((i, y, s));
        }
        (FeatureMatrix::new(n, dim, data).unwrap(), labeled)
    }

    #[test]
    fn separable_classes_reach_full_accuracy() {
        let (emb, labeled) = make_rows(60, |i| {
            let class = i % 2;
            let base = if class == 0 { -1.0 } else { 1.0 };
            let x = vec![base + 0.01 * (i as f32 % 7.0), base * 0.5];
            let split = match i % 3 {
                0 => Split::Train,
                1 => Split::Valid,
                _ => Split::Test,
            };
            (x, class, split)
        });
        let (probe, report) = linear_probe(&emb, &labeled, 2, &quick_cfg()).unwrap();
        assert_eq!(report.metrics["accuracy"], 1.0);
        assert_eq!(report.metrics["roc_auc"], 1.0);
        assert!(probe.epochs_run <= 400);
    }

    #[test]
    fn permuted_labels_sit_near_chance() {
        // labels drawn independently of the inputs: accuracy ~ 1/C
        use rand::Rng;
        let mut xrng = crate::rng::stream(1, "probe-x");
        let mut yrng = crate::rng::stream(2, "probe-y");
        let (emb, labeled) = make_rows(600, |i| {
            let x = vec![xrng.random::<f32>(), xrng.random::<f32>()];
            let y = yrng.random_range(0..3usize);
            let split = if i % 3 == 2 { Split::Test } else { Split::Train };
            (x, y, split)
        });
        let (_, report) = linear_probe(&emb, &labeled, 3, &quick_cfg()).unwrap();
        let acc = report.metrics["accuracy"];
        assert!(
            (acc - 1.0 / 3.0).abs() < 0.15,
            "expected near-chance accuracy, got {acc}"
        );
    }

    #[test]
    fn duplicate_features_balanced_labels_give_half() {
        // identical inputs for both classes: the constant prediction gets
        // exactly half of a balanced test split
        let (emb, labeled) = make_rows(80, |i| {
            let split = if i % 4 >= 2 { Split::Test } else { Split::Train };
            (vec![1.0, 1.0], i % 2, split)
        });
        let (_, report) = linear_probe(&emb, &labeled, 2, &quick_cfg()).unwrap();
        let acc = report.metrics["accuracy"];
        assert!((acc - 0.5).abs() < 1e-9, "got {acc}");
    }

    #[test]
    fn single_class_train_rejected() {
        let (emb, labeled) = make_rows(10, |i| (vec![i as f32], 0, Split::Train));
        assert!(linear_probe(&emb, &labeled, 2, &quick_cfg()).is_err());
    }

    #[test]
    fn early_stopping_kicks_in() {
        let (emb, labeled) = make_rows(40, |i| {
            let class = (i / 2) % 2;
            let x = vec![if class == 0 { -2.0 } else { 2.0 }];
            let split = if i % 2 == 0 { Split::Train } else { Split::Valid };
            (x, class, split)
        });
        let cfg = ProbeConfig {
            lr: 0.1,
            max_epochs: 5000,
            patience: 20,
        };
        let (probe, _) = linear_probe(&emb, &labeled, 2, &cfg).unwrap();
        assert!(probe.epochs_run < 5000, "ran all {} epochs", probe.epochs_run);
    }
}
