//! Benchmark configuration: JSON file plus CLI flag overrides.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sparse_decode::{Budget, SelectorSpec, WorkloadGeometry};

use crate::error::BenchError;

/// KV storage width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F16,
    F32,
}

impl Dtype {
    pub fn element_width(self) -> usize {
        match self {
            Dtype::F16 => 2,
            Dtype::F32 => 4,
        }
    }
}

/// Output rendering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Markdown,
    Json,
}

fn default_batches() -> Vec<usize> {
    vec![1, 4, 8]
}

fn default_context() -> usize {
    32768
}

fn default_q_heads() -> usize {
    32
}

fn default_kv_heads() -> usize {
    8
}

fn default_head_dim() -> usize {
    128
}

fn default_page_size() -> usize {
    16
}

fn default_dtype() -> Dtype {
    Dtype::F16
}

fn default_sparsity() -> Vec<f64> {
    vec![2.0, 4.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0]
}

fn default_selector() -> SelectorSpec {
    SelectorSpec::OracleTopk {
        budget: Budget::Sparsity(1.0),
    }
}

fn default_repeats() -> usize {
    20
}

fn default_warmup() -> usize {
    3
}

fn default_format() -> Format {
    Format::Markdown
}

fn default_memory_cap() -> u64 {
    4 << 30
}

/// Full sweep configuration. The selector's budget field is a placeholder;
/// each sweep point rebudgets it at that point's sparsity factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_batches")]
    pub batches: Vec<usize>,
    #[serde(default = "default_context")]
    pub context: usize,
    #[serde(default = "default_q_heads")]
    pub q_heads: usize,
    #[serde(default = "default_kv_heads")]
    pub kv_heads: usize,
    #[serde(default = "default_head_dim")]
    pub head_dim: usize,
    #[serde(default = "default_page_size")]
    pub page_size: usize,
    #[serde(default = "default_dtype")]
    pub dtype: Dtype,
    #[serde(default = "default_sparsity")]
    pub sparsity_levels: Vec<f64>,
    #[serde(default = "default_selector")]
    pub selector: SelectorSpec,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default = "default_format")]
    pub format: Format,
    #[serde(default = "default_memory_cap")]
    pub memory_cap_bytes: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.batches.is_empty() {
            return Err(BenchError::Usage("at least one batch size required".into()));
        }
        if self.batches.windows(2).any(|w| w[1] <= w[0]) {
            return Err(BenchError::Usage(
                "batch sizes must be strictly increasing".into(),
            ));
        }
        if self.repeats < 1 {
            return Err(BenchError::Usage("repeats must be >= 1".into()));
        }
        if self.sparsity_levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(BenchError::Usage(
                "sparsity levels must be sorted ascending".into(),
            ));
        }
        if self.sparsity_levels.iter().any(|&s| s < 1.0) {
            return Err(BenchError::Usage("sparsity factors must be >= 1".into()));
        }
        if self.context == 0 {
            return Err(BenchError::Usage("context must be >= 1".into()));
        }
        self.geometry(self.batches[0])
            .validate()
            .map_err(|e| BenchError::Usage(e.to_string()))?;
        Ok(())
    }

    pub fn geometry(&self, batch: usize) -> WorkloadGeometry {
        WorkloadGeometry {
            batch,
            context: self.context,
            num_q_heads: self.q_heads,
            num_kv_heads: self.kv_heads,
            head_dim: self.head_dim,
            element_width: self.dtype.element_width(),
            page_size: self.page_size,
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
