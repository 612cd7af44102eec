pub mod admin;
pub mod auditor;
pub mod client;
pub(crate) mod codec;
pub mod crypto;
pub mod error;
pub mod fixtures;
pub mod iws;
pub mod model;
pub mod rss;
pub mod sss;
pub mod store;
pub mod transport;
