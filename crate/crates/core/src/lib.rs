//! Checkpointing-as-a-service orchestrator over simulated IaaS backends.

pub mod appmgr;
pub mod ckptstore;
pub mod cloudsim;
pub mod gateway;
pub mod harness;
pub mod lifecycle;
pub mod monitor;
pub mod provision;
pub mod service;
pub mod workerrt;

pub use gateway::{ApiRequest, ApiResponse, Endpoint, Method};
pub use lifecycle::{AppId, AppState};
pub use service::{Service, ServiceConfig};
