//! A miniature multi-threaded message-passing runtime built around virtual
//! communication interfaces (VCIs) on a simulated multi-context NIC.
//!
//! A [`World`] holds a set of in-process nodes (ranks). Threads of a rank
//! share a [`Rank`] handle and call into the library concurrently. Every
//! communicator and window is mapped to a VCI; a VCI is bound to one hardware
//! context of the simulated fabric and owns its own lock, matching queues,
//! request cache and lightweight request.

pub mod config;
pub mod error;
pub mod matching;
mod p2p;
mod progress;
mod requests;
mod rma;
mod runtime;
pub mod stats;
pub mod transport;
pub mod vci;

pub use config::{Config, CsMode, Hints, InjectionModel, RmaMode};
pub use error::{Error, FaultReason, Result, StuckReport};
pub use matching::{Envelope, ANY_SOURCE, ANY_TAG};
pub use p2p::{Completion, Request};
pub use requests::{RequestCounts, RequestKind, Status};
pub use rma::{AccOrdering, FetchHandle, GetHandle, WinOptions, Window};
pub use runtime::{Comm, NodeReport, Rank, Report, World};
pub use stats::LockStats;
pub use transport::{FabricCounts, Region};
pub use vci::{PoolStats, VciId, FALLBACK_VCI};
