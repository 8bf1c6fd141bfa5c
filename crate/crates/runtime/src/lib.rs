//! Live simulation service for the liquid-level rig.
//!
//! A [`SessionHandle`] owns one stepping loop on its own thread. Commands are
//! queued and applied between steps, snapshots fan out to any number of
//! subscribers, and every row goes to a CSV log with a replayable sidecar.
//! [`Server`] exposes a session over TCP as NDJSON or WebSocket.

pub mod log;
pub mod protocol;
pub mod server;
pub mod session;

pub use log::{replay, LoopRecord, ScheduledCommand, Sidecar};
pub use protocol::{Command, Hello, ServerMessage, Snapshot, Speed, TuneParams};
pub use server::Server;
pub use session::{CommandError, SessionConfig, SessionError, SessionHandle, SessionSummary, Subscription};
