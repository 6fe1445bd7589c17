//! Client side of the service API: an HTTP [`Endpoint`] and text rendering
//! for the command-line tool.

use std::time::Duration;

use cloudckpt::gateway::{EndpointError, Method};
use cloudckpt::{ApiRequest, ApiResponse, Endpoint};
use serde_json::Value;

/// Talks to a service over HTTP.
pub struct HttpEndpoint {
    base: String,
    agent: ureq::Agent,
}

impl HttpEndpoint {
    pub fn new(base: &str) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(30)).build();
        HttpEndpoint { base: base.trim_end_matches('/').to_string(), agent }
    }

    pub fn base(&self) -> &str {
        &self.base
    }
}

impl Endpoint for HttpEndpoint {
    fn call(&mut self, req: ApiRequest) -> Result<ApiResponse, EndpointError> {
        let verb = match req.method {
            Method::Get => "GET",
            Method::Post => "POST",
            Method::Delete => "DELETE",
        };
        let r = self.agent.request(verb, &format!("{}{}", self.base, req.path));
        let sent = match &req.body {
            Some(b) => r.set("Content-Type", "application/json").send_string(&b.to_string()),
            None => r.call(),
        };
        let resp = match sent {
            Ok(resp) => resp,
            Err(ureq::Error::Status(_, resp)) => resp,
            Err(e) => return Err(EndpointError::Transport(e.to_string())),
        };
        let status = resp.status();
        let text = resp.into_string().map_err(|e| EndpointError::Transport(e.to_string()))?;
        let body = if text.trim().is_empty() {
            Value::Null
        } else {
            serde_json::from_str(&text).map_err(|e| EndpointError::Transport(format!("bad response body: {e}")))?
        };
        Ok(ApiResponse { status, body })
    }
}

/// Renders rows as left-aligned columns separated by two spaces.
pub fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    for row in rows {
        out += &line(row.iter().map(String::as_str).collect());
    }
    out
}

/// One `ls` row per application record.
pub fn coordinator_rows(list: &Value) -> Vec<Vec<String>> {
    let text = |v: &Value| match v {
        Value::String(s) => s.clone(),
        Value::Null => "-".into(),
        other => other.to_string(),
    };
    list["coordinators"]
        .as_array()
        .into_iter()
        .flatten()
        .map(|c| {
            vec![
                text(&c["id"]),
                text(&c["state"]),
                text(&c["backend_id"]),
                c["vm_templates"].as_array().map_or(0, Vec::len).to_string(),
                text(&c["coordinator"]),
                format!("{:.1}", c["created_at"].as_f64().unwrap_or(0.0)),
            ]
        })
        .collect()
}

pub const LS_HEADER: [&str; 6] = ["ID", "STATE", "BACKEND", "VMS", "COORD", "CREATED_S"];

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn columns_line_up() {
        let t = table(&["ID", "STATE"], &[vec!["1".into(), "RUNNING".into()], vec!["12".into(), "ERROR".into()]]);
        assert_eq!(t, "ID  STATE\n1   RUNNING\n12  ERROR\n");
    }

    #[test]
    fn rows_from_listing() {
        let v = json!({"coordinators": [{"id": 3, "state": "CREATING", "backend_id": "snooze-sim",
            "vm_templates": [{}, {}], "coordinator": null, "created_at": 1.5}]});
        assert_eq!(coordinator_rows(&v), vec![vec!["3", "CREATING", "snooze-sim", "2", "-", "1.5"]]);
    }
}
