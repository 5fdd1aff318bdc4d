//! Crate-wide error type and the process exit codes it maps to.

use thiserror::Error;

/// Errors surfaced by any pipeline stage.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or inconsistent option combination.
    #[error("configuration: {0}")]
    Config(String),

    /// Malformed input file, with the offending line when known.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Input data violates a stage precondition.
    #[error("{0}")]
    Data(String),

    /// Geometry too degenerate to solve (collinear targets, empty cluster, ...).
    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    /// Translation consensus has tied largest clusters; a smaller epsilon is needed.
    #[error(
        "ambiguous translation consensus between {scan_a} and {scan_b}: \
         {count} clusters tie at size {size}; rerun with a smaller epsilon"
    )]
    AmbiguousConsensus {
        scan_a: String,
        scan_b: String,
        count: usize,
        size: usize,
    },

    /// Pose refinement hit the iteration cap before meeting either stop rule.
    #[error(
        "pose refinement did not converge after {iters} iterations \
         (final gradient norm {grad_norm:.3e})"
    )]
    NonConvergence { iters: usize, grad_norm: f64 },

    /// Overlap graph split into disjoint components; lists scan ids per component.
    #[error("overlap graph is disconnected; components: {}", format_components(.0))]
    Disconnected(Vec<Vec<String>>),

    /// External reconstruction tool failed or produced no usable output.
    #[error("external tool: {0}")]
    Tool(String),

    /// A pipeline stage failed; wraps the cause so the exit code is kept.
    #[error("stage {stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn format_components(components: &[Vec<String>]) -> String {
    components
        .iter()
        .map(|c| format!("[{}]", c.join(", ")))
        .collect::<Vec<_>>()
        .join(" ")
}

impl Error {
    /// Process exit code contract: 0 success, 2 config, 3 data, 4 convergence,
    /// 5 external tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Parse { .. }
            | Error::Data(_)
            | Error::Degenerate(_)
            | Error::AmbiguousConsensus { .. }
            | Error::Disconnected(_)
            | Error::Io(_)
            | Error::Json(_) => 3,
            Error::NonConvergence { .. } => 4,
            Error::Tool(_) => 5,
            Error::Stage { source, .. } => source.exit_code(),
        }
    }

    /// Wraps an error with the stage it occurred in, once.
    pub fn in_stage(self, stage: &str) -> Error {
        match self {
            Error::Stage { .. } => self,
            other => Error::Stage {
                stage: stage.to_string(),
                source: Box::new(other),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
