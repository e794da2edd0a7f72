//! Harness errors mapped to process exit codes.

use thiserror::Error;

/// Exit codes: 0 success, 2 usage error, 3 correctness-assertion failure,
/// 4 resource cap exceeded.
#[derive(Debug, Error)]
pub enum BenchError {
    #[error("usage error: {0}")]
    Usage(String),

    #[error(
        "correctness assertion failed at B={batch_size}, S={sparsity}, batch element {batch_elem}, head {head}: rel error {rel_error:.3e} > {tol:.1e}"
    )]
    Correctness {
        batch_size: usize,
        sparsity: f64,
        batch_elem: usize,
        head: usize,
        rel_error: f64,
        tol: f64,
    },

    #[error("byte accounting mismatch in {context}: model {expected} bytes, counter moved {actual}")]
    ByteAccounting {
        context: String,
        expected: u64,
        actual: u64,
    },

    #[error("verification failed: {0}")]
    VerifyFailed(String),

    #[error("workload needs {needed} bytes of KV cache, over the configured cap of {cap} bytes")]
    ResourceCap { needed: u64, cap: u64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("config parse error: {0}")]
    ConfigParse(#[from] serde_json::Error),

    #[error(transparent)]
    Kv(#[from] sparse_decode::KvError),

    #[error(transparent)]
    Attn(#[from] sparse_decode::AttnError),

    #[error(transparent)]
    Select(#[from] sparse_decode::SelectError),

    #[error(transparent)]
    Traffic(#[from] sparse_decode::TrafficError),

    #[error(transparent)]
    Collapse(#[from] sparse_decode::collapse::CollapseError),
}

impl BenchError {
    pub fn exit_code(&self) -> u8 {
        match self {
            BenchError::Correctness { .. }
            | BenchError::ByteAccounting { .. }
            | BenchError::VerifyFailed(_) => 3,
            BenchError::ResourceCap { .. } => 4,
            _ => 2,
        }
    }
}
