//! Run configuration: JSON file merged with command-line overrides
//! (flags win over the file, the file wins over defaults).

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mgt_core::downstream::{BenchConfig, FinetuneConfig, ProbeConfig};
use mgt_core::posenc::LineConfig;
use mgt_core::ppr::PprConfig;
use mgt_core::pretrain::PretrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub graph: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub edge_labels: Option<PathBuf>,
    pub pe: Option<PathBuf>,
    pub sequences: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub rng_seed: u64,
    pub threads: usize,
    pub out_dir: PathBuf,
    pub undirected: bool,
    pub paths: Paths,
    pub ppr: PprConfig,
    pub line: LineConfig,
    pub pretrain: PretrainConfig,
    pub probe: ProbeConfig,
    pub finetune: FinetuneConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            rng_seed: 0,
            threads: 0,
            out_dir: PathBuf::from("out"),
            undirected: true,
            paths: Paths::default(),
            ppr: PprConfig::default(),
            line: LineConfig::default(),
            pretrain: PretrainConfig::default(),
            probe: ProbeConfig::default(),
            finetune: FinetuneConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    /// Seeds flow into every sub-config that carries its own copy.
    pub fn propagate_seed(&mut self) {
        self.line.rng_seed = self.rng_seed;
        self.pretrain.rng_seed = self.rng_seed;
        self.finetune.rng_seed = self.rng_seed;
    }

    pub fn require(&self, what: &str, path: &Option<PathBuf>) -> Result<PathBuf> {
        path.clone().ok_or_else(|| {
            anyhow::anyhow!("missing required input: pass --{what} or set paths.{what} in the config")
        })
    }
}

/// Which seeds to sample sequences for.
#[derive(Debug, Clone, PartialEq)]
pub enum SeedSpec {
    All,
    Fraction(f64),
    File(PathBuf),
}

impl SeedSpec {
    pub fn parse(s: &str) -> Result<SeedSpec> {
        if s == "all" {
            return Ok(SeedSpec::All);
        }
        if let Some(frac) = s.strip_prefix("fraction:") {
            let f: f64 = frac
                .parse()
                .with_context(|| format!("bad fraction in --seeds {s:?}"))?;
            if !(0.0..=1.0).contains(&f) {
                anyhow::bail!("--seeds fraction must be in [0,1], got {f}");
            }
            return Ok(SeedSpec::Fraction(f));
        }
        if let Some(path) = s.strip_prefix("file:") {
            return Ok(SeedSpec::File(PathBuf::from(path)));
        }
        anyhow::bail!("--seeds must be all, fraction:F, or file:PATH (got {s:?})")
    }
}
