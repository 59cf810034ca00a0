//! Downstream use of a pre-trained checkpoint: feature augmentation via
//! decoder reuse, embedding export, linear probing, fine-tuning, ranking
//! metrics, and the inference-efficiency benchmark.

pub mod bench;
pub mod finetune;
pub mod infer;
pub mod metrics;
pub mod probe;

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub use bench::{benchmark_inference, write_bench_csv, BenchConfig, BenchRow, InferenceMode};
pub use finetune::{finetune_link, finetune_node, FinetuneConfig};
pub use infer::{augment_features, build_augmented_features, embed, AugmentedFeatures, EmbeddingTable};
pub use metrics::{mean_rank_metrics, rank_metrics, roc_auc, RankMetrics, HITS_KS};
pub use probe::{linear_probe, LabeledRows, LinearProbe, ProbeConfig};

/// Metric bundle emitted by evaluation commands. `metrics` values are all
/// in [0, 1]; timings and other unbounded quantities live in `timing`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    pub timing: BTreeMap<String, f64>,
    pub config: serde_json::Value,
    #[serde(default)]
    pub config_hash: String,
}

impl EvalReport {
    pub fn new(
        task: &str,
        metrics: BTreeMap<String, f64>,
        timing: BTreeMap<String, f64>,
        config: serde_json::Value,
    ) -> Self {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(config.to_string().as_bytes());
        let config_hash: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        EvalReport {
            task: task.to_string(),
            metrics,
            timing,
            config,
            config_hash,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, &v) in &self.metrics {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Invalid(format!(
                    "metric {k} = {v} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Invalid(format!("report serialization: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
