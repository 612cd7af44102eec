//! Wire protocol, role services, routing and flow orchestration.

pub mod bus;
pub mod deployment;
pub mod isolation;
pub mod message;
pub mod service;
pub mod tcp;

pub use bus::{Bus, Endpoints, InProc, LoggedFrame, Snapshot};
pub use deployment::{DeleteTrace, Deployment, InsertTrace, SelectTrace};
pub use isolation::{IsolationMonitor, IsolationReport, Violation, ViolationKind};
pub use message::{Envelope, Message, SessionId, ShuffleTarget};
pub use service::{IwsService, RssService, Service, SssService};
pub use tcp::{serve, TcpEndpoints};
