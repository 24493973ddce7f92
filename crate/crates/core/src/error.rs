use std::fmt;

use crate::vci::VciId;

/// Errors reported by the runtime.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    /// The caller violated an API contract (bad rank, double release, stale handle, ...).
    #[error("usage fault: {0}")]
    Usage(String),

    /// A message was addressed to a node that does not exist.
    #[error("routing error: no node {node}")]
    Routing { node: usize },

    /// A fixed-size resource ran out.
    #[error("resource exhausted: {0}")]
    Exhausted(&'static str),

    /// The matched message was longer than the receive buffer.
    #[error("message truncated: {len} bytes into a {capacity}-byte buffer")]
    Truncated { len: usize, capacity: usize },

    /// An RMA access fell outside the target's exposed region.
    #[error("rma access [{offset}, {offset}+{len}) outside extent {extent}")]
    OutOfRange { offset: usize, len: usize, extent: usize },

    /// The target reported a fault for an RMA operation (e.g. unknown window).
    #[error("rma fault at target: {0}")]
    RmaFault(FaultReason),

    /// The watchdog gave up on a blocking call.
    #[error("{0}")]
    Stuck(StuckReport),

    /// Finalize found requests that were never waited on.
    #[error("{count} request(s) still outstanding at finalize: {detail}")]
    Outstanding { count: usize, detail: String },

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultReason {
    UnknownWindow(u32),
    OutOfRange,
}

impl fmt::Display for FaultReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultReason::UnknownWindow(w) => write!(f, "unknown window {w}"),
            FaultReason::OutOfRange => f.write_str("out of range"),
        }
    }
}

/// Diagnostic produced when a watchdog fires: which operation was waiting,
/// on which node, and which VCIs still had pending work.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StuckReport {
    pub what: &'static str,
    pub node: usize,
    pub primary: VciId,
    pub pending_vcis: Vec<VciId>,
}

impl fmt::Display for StuckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "watchdog: {} on node {} stuck (primary vci {}, vcis with pending work: {:?})",
            self.what, self.node, self.primary, self.pending_vcis
        )
    }
}

pub(crate) fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}
