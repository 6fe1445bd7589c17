//! REST resource layer over the coordinators database.
//!
//! | method | path                                  | action                     |
//! |--------|---------------------------------------|----------------------------|
//! | GET    | /coordinators                         | list applications          |
//! | POST   | /coordinators                         | submit an application      |
//! | GET    | /coordinators/:id                     | show one application       |
//! | DELETE | /coordinators/:id                     | terminate                  |
//! | GET    | /coordinators/:id/checkpoints         | list checkpoints           |
//! | POST   | /coordinators/:id/checkpoints         | trigger (no body) / upload |
//! | GET    | /coordinators/:id/checkpoints/:cid    | checkpoint with images     |
//! | POST   | /coordinators/:id/checkpoints/:cid    | restart from it            |
//! | DELETE | /coordinators/:id/checkpoints/:cid    | delete it                  |
//!
//! Reads answer 200 from the current state. Mutations validate, queue work
//! on the worker pool and answer 202.

mod db;
pub mod http;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub use db::CoordinatorsDb;

use crate::appmgr::AppError;
use crate::ckptstore::{CheckpointSet, StoreError};
use crate::lifecycle::{AppId, ApplicationRecord, AsrDocument};
use crate::service::Service;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Get,
    Post,
    Delete,
}

impl std::str::FromStr for Method {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s.to_ascii_uppercase().as_str() {
            "GET" => Ok(Method::Get),
            "POST" => Ok(Method::Post),
            "DELETE" => Ok(Method::Delete),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiRequest {
    pub method: Method,
    pub path: String,
    pub body: Option<Value>,
}

impl ApiRequest {
    pub fn get(path: impl Into<String>) -> Self {
        ApiRequest { method: Method::Get, path: path.into(), body: None }
    }

    pub fn post(path: impl Into<String>, body: Option<Value>) -> Self {
        ApiRequest { method: Method::Post, path: path.into(), body }
    }

    pub fn delete(path: impl Into<String>) -> Self {
        ApiRequest { method: Method::Delete, path: path.into(), body: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiResponse {
    pub status: u16,
    pub body: Value,
}

impl ApiResponse {
    pub fn new(status: u16, body: Value) -> Self {
        ApiResponse { status, body }
    }

    pub fn error(status: u16, msg: impl std::fmt::Display) -> Self {
        ApiResponse { status, body: json!({ "error": msg.to_string() }) }
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EndpointError {
    #[error("transport: {0}")]
    Transport(String),
}

/// Anything that answers API requests: a local service or a remote client.
pub trait Endpoint {
    fn call(&mut self, req: ApiRequest) -> Result<ApiResponse, EndpointError>;
}

impl Endpoint for Service {
    fn call(&mut self, req: ApiRequest) -> Result<ApiResponse, EndpointError> {
        Ok(self.handle(req))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resource {
    Coordinators,
    Coordinator,
    Checkpoints,
    Checkpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    List,
    Create,
    Show,
    Delete,
    TriggerOrUpload,
    Restart,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Route {
    pub resource: Resource,
    pub action: Action,
    pub coord: Option<AppId>,
    pub checkpoint: Option<u64>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown route {method:?} {path}")]
pub struct UnknownRoute {
    pub method: Method,
    pub path: String,
}

/// Maps a method and path onto the route table.
pub fn route(method: Method, path: &str) -> Result<Route, UnknownRoute> {
    let unknown = || UnknownRoute { method, path: path.to_string() };
    let path = path.split('?').next().unwrap_or("");
    let segs: Vec<&str> = path.trim_matches('/').split('/').collect();
    let id = |s: &str| s.parse::<u64>().ok();
    use Method::*;
    let (resource, action, coord, checkpoint) = match segs.as_slice() {
        ["coordinators"] => match method {
            Get => (Resource::Coordinators, Action::List, None, None),
            Post => (Resource::Coordinators, Action::Create, None, None),
            Delete => return Err(unknown()),
        },
        ["coordinators", c] => {
            let c = id(c).ok_or_else(unknown)?;
            match method {
                Get => (Resource::Coordinator, Action::Show, Some(c), None),
                Delete => (Resource::Coordinator, Action::Delete, Some(c), None),
                Post => return Err(unknown()),
            }
        }
        ["coordinators", c, "checkpoints"] => {
            let c = id(c).ok_or_else(unknown)?;
            match method {
                Get => (Resource::Checkpoints, Action::List, Some(c), None),
                Post => (Resource::Checkpoints, Action::TriggerOrUpload, Some(c), None),
                Delete => return Err(unknown()),
            }
        }
        ["coordinators", c, "checkpoints", k] => {
            let c = id(c).ok_or_else(unknown)?;
            let k = id(k).ok_or_else(unknown)?;
            let action = match method {
                Get => Action::Show,
                Post => Action::Restart,
                Delete => Action::Delete,
            };
            (Resource::Checkpoint, action, Some(c), Some(k))
        }
        _ => return Err(unknown()),
    };
    Ok(Route { resource, action, coord: coord.map(AppId), checkpoint })
}

fn app_error(e: AppError) -> ApiResponse {
    let status = match &e {
        AppError::NotFound(_) => 404,
        AppError::Conflict(_) => 409,
        AppError::InvalidAsr(_) | AppError::BadRequest(_) => 400,
        AppError::Store(s) => match s {
            StoreError::UnknownApp(_) | StoreError::UnknownCheckpoint { .. } => 404,
            StoreError::NoCheckpoint(_) | StoreError::Incomplete { .. } | StoreError::StorageFull { .. } => 409,
            _ => 500,
        },
    };
    ApiResponse::error(status, e)
}

/// JSON view of one application record.
pub fn record_json(svc: &Service, rec: &ApplicationRecord) -> Value {
    let vms = rec.cluster.as_ref().map(|c| svc.cloud.describe(c)).unwrap_or_default();
    let doc = rec.asr.to_document();
    json!({
        "id": rec.app_id,
        "state": rec.state,
        "backend_id": rec.asr.backend_id,
        "event_seq": rec.event_seq,
        "created_at": rec.created_at.as_secs_f64(),
        "coordinator": rec.coordinator,
        "error": rec.error,
        "output": rec.output,
        "vms": vms,
        "vm_templates": doc.vm_templates,
        "checkpoint_policy": doc.checkpoint_policy,
        "app_spec": doc.app_spec,
        "health_hook": doc.health_hook,
        "restore_only": rec.asr.restore_only,
    })
}

fn set_summary(s: &CheckpointSet) -> Value {
    json!({
        "id": s.generation,
        "created_at": s.created_at.as_secs_f64(),
        "size_bytes": s.size_bytes(),
        "replicated": s.replicated,
        "complete": s.is_complete(),
        "images": s.images.len(),
        "expected_images": s.expected_images,
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct UploadBody {
    images: Vec<UploadImage>,
    count: Option<usize>,
    checkpoint: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct UploadImage {
    vm_index: u32,
    data: String,
}

impl Service {
    /// Answers one API request.
    pub fn handle(&mut self, req: ApiRequest) -> ApiResponse {
        let r = match route(req.method, &req.path) {
            Ok(r) => r,
            Err(e) => return ApiResponse::error(404, e),
        };
        let resp = self.dispatch_route(r, req.body);
        self.persist();
        resp
    }

    fn dispatch_route(&mut self, r: Route, body: Option<Value>) -> ApiResponse {
        let app = r.coord;
        match (r.resource, r.action) {
            (Resource::Coordinators, Action::List) => {
                let list: Vec<Value> = self.db.iter().map(|rec| record_json(self, rec)).collect();
                ApiResponse::new(200, json!({ "coordinators": list }))
            }
            (Resource::Coordinators, Action::Create) => {
                let Some(body) = body else { return ApiResponse::error(400, "missing request body") };
                let doc: AsrDocument = match serde_json::from_value(body) {
                    Ok(d) => d,
                    Err(e) => return ApiResponse::error(400, format!("invalid ASR: {e}")),
                };
                match self.submit(doc) {
                    Ok(id) => {
                        let state = self.db.get(id).map(|r| r.state);
                        ApiResponse::new(202, json!({ "id": id, "state": state }))
                    }
                    Err(e) => app_error(e),
                }
            }
            (Resource::Coordinator, Action::Show) => {
                let app = app.expect("routed");
                match self.db.get(app) {
                    Some(rec) => ApiResponse::new(200, record_json(self, rec)),
                    None => app_error(AppError::NotFound(app)),
                }
            }
            (Resource::Coordinator, Action::Delete) => {
                let app = app.expect("routed");
                match self.terminate(app) {
                    Ok(()) => ApiResponse::new(202, json!({ "id": app, "state": "TERMINATING" })),
                    Err(e) => app_error(e),
                }
            }
            (Resource::Checkpoints, Action::List) => {
                let app = app.expect("routed");
                if self.db.get(app).is_none() {
                    return app_error(AppError::NotFound(app));
                }
                match self.store.list(app) {
                    Ok(sets) => ApiResponse::new(200, json!({ "checkpoints": sets.iter().map(set_summary).collect::<Vec<_>>() })),
                    Err(e) => app_error(e.into()),
                }
            }
            (Resource::Checkpoints, Action::TriggerOrUpload) => {
                let app = app.expect("routed");
                let is_trigger = match &body {
                    None | Some(Value::Null) => true,
                    Some(Value::Object(m)) => m.is_empty(),
                    _ => false,
                };
                if is_trigger {
                    return match self.trigger_checkpoint(app) {
                        Ok(g) => ApiResponse::new(202, json!({ "id": g, "app_id": app })),
                        Err(e) => app_error(e),
                    };
                }
                self.handle_upload(app, body.expect("non-trigger has a body"))
            }
            (Resource::Checkpoint, Action::Show) => {
                let (app, g) = (app.expect("routed"), r.checkpoint.expect("routed"));
                if self.db.get(app).is_none() {
                    return app_error(AppError::NotFound(app));
                }
                let set = match self.store.list(app).map(|v| v.into_iter().find(|s| s.generation == g)) {
                    Ok(Some(s)) => s,
                    Ok(None) => return app_error(StoreError::UnknownCheckpoint { app, generation: g }.into()),
                    Err(e) => return app_error(e.into()),
                };
                let b64 = base64::engine::general_purpose::STANDARD;
                let mut images = Vec::new();
                for img in &set.images {
                    match self.store.fetch_image(img) {
                        Ok(data) => images.push(json!({
                            "vm_index": img.vm_index,
                            "size_bytes": img.size_bytes,
                            "crc32": img.crc32,
                            "data": b64.encode(&data),
                        })),
                        Err(e) => return app_error(e.into()),
                    }
                }
                let mut body = set_summary(&set);
                body["app_id"] = json!(app);
                body["images"] = json!(images);
                ApiResponse::new(200, body)
            }
            (Resource::Checkpoint, Action::Restart) => {
                let (app, g) = (app.expect("routed"), r.checkpoint.expect("routed"));
                match self.restart(app, Some(g)) {
                    Ok(g) => ApiResponse::new(202, json!({ "id": app, "checkpoint": g })),
                    Err(e) => app_error(e),
                }
            }
            (Resource::Checkpoint, Action::Delete) => {
                let (app, g) = (app.expect("routed"), r.checkpoint.expect("routed"));
                if self.db.get(app).is_none() {
                    return app_error(AppError::NotFound(app));
                }
                match self.store.delete_set(app, g) {
                    Ok(()) => {
                        self.log(Some(app), "checkpoint_deleted", json!({ "generation": g }));
                        ApiResponse::new(204, Value::Null)
                    }
                    Err(e) => app_error(e.into()),
                }
            }
            _ => ApiResponse::error(404, "unknown route"),
        }
    }

    fn handle_upload(&mut self, app: AppId, body: Value) -> ApiResponse {
        let up: UploadBody = match serde_json::from_value(body) {
            Ok(u) => u,
            Err(e) => return ApiResponse::error(400, format!("invalid upload: {e}")),
        };
        if up.images.is_empty() {
            return ApiResponse::error(400, "upload without images");
        }
        let count = up.count.unwrap_or(up.images.len());
        let b64 = base64::engine::general_purpose::STANDARD;
        let mut images = Vec::with_capacity(up.images.len());
        for img in up.images {
            if img.vm_index as usize >= count {
                return ApiResponse::error(400, format!("vm_index {} outside count {count}", img.vm_index));
            }
            match b64.decode(img.data.as_bytes()) {
                Ok(d) => images.push((img.vm_index, d)),
                Err(e) => return ApiResponse::error(400, format!("image {}: {e}", img.vm_index)),
            }
        }
        match self.upload_images(app, up.checkpoint, count, images) {
            Ok(set) => ApiResponse::new(
                202,
                json!({ "id": set.generation, "app_id": app, "complete": set.is_complete(), "received": set.images.len() }),
            ),
            Err(e) => app_error(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn route_table() {
        let r = route(Method::Get, "/coordinators").unwrap();
        assert_eq!((r.resource, r.action, r.coord), (Resource::Coordinators, Action::List, None));
        let r = route(Method::Post, "/coordinators/7/checkpoints").unwrap();
        assert_eq!((r.resource, r.action, r.coord), (Resource::Checkpoints, Action::TriggerOrUpload, Some(AppId(7))));
        let r = route(Method::Delete, "/coordinators/7/checkpoints/3").unwrap();
        assert_eq!((r.action, r.checkpoint), (Action::Delete, Some(3)));
        let r = route(Method::Post, "/coordinators/7/checkpoints/3/").unwrap();
        assert_eq!(r.action, Action::Restart);
        assert!(route(Method::Get, "/frobnicate").is_err());
        assert!(route(Method::Get, "/coordinators/abc").is_err());
        assert!(route(Method::Delete, "/coordinators").is_err());
        assert!(route(Method::Post, "/coordinators/1").is_err());
    }
}
