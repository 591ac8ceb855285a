//! Interactive segmentation sessions: image and prompt state, command
//! execution, cached-embedding inference, undo and an event log that replays
//! to the current state, served as a JSON HTTP API.

pub mod api;
pub mod error;
pub mod evaluation;
pub mod images;
pub mod rle;
pub mod service;
pub mod session;

pub use error::ServiceError;
pub use rle::Rle;
pub use service::Service;
pub use session::{Event, EventKind, LatencyRecord, Phase, ServiceConfig, Session};
