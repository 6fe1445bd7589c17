//! `cactl`: command-line client for the checkpointing service, plus the
//! experiment driver and a foreground service daemon.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::{Arc, Mutex};

use anyhow::{anyhow, bail, Context, Result};
use cactl::{coordinator_rows, table, HttpEndpoint, LS_HEADER};
use clap::{Parser, Subcommand};
use cloudckpt::appmgr::{clone_app, migrate_app};
use cloudckpt::gateway::http::HttpServer;
use cloudckpt::harness::{run_experiment, ExperimentParams, SCENARIOS};
use cloudckpt::{ApiRequest, AppId, Endpoint, Service, ServiceConfig};
use serde_json::Value;

#[derive(Parser)]
#[command(name = "cactl", version, about = "Checkpointing service client")]
struct Cli {
    /// Service base URL.
    #[arg(long, global = true, env = "CACTL_URL", default_value = "http://127.0.0.1:8080")]
    url: String,
    /// Seed for experiments.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Service configuration file (TOML) for `experiment` and `serve`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print raw JSON instead of tables.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Submit an application from a JSON ASR file.
    Submit { asr_file: PathBuf },
    /// List applications.
    Ls,
    /// Show one application.
    Show { id: u64 },
    /// Trigger a checkpoint.
    Ckpt { id: u64 },
    /// List the checkpoints of an application.
    Ckpts { id: u64 },
    /// Restart from the latest or the given checkpoint.
    Restart {
        id: u64,
        #[arg(long)]
        ckpt: Option<u64>,
    },
    /// Copy an application to another service from its latest checkpoint.
    Clone {
        id: u64,
        #[arg(long)]
        to: String,
    },
    /// Clone, then terminate the original.
    Migrate {
        id: u64,
        #[arg(long)]
        to: String,
    },
    /// Terminate an application.
    Rm { id: u64 },
    /// Run a built-in scenario in virtual time.
    Experiment {
        name: String,
        /// CSV destination; the summary goes next to it with a .json extension.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a service in the foreground.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: String,
        /// Virtual seconds per wall second.
        #[arg(long, default_value_t = 1.0)]
        time_scale: f64,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<ServiceConfig> {
    match path {
        Some(p) => ServiceConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(ServiceConfig::default()),
    }
}

/// Sends a request and turns non-2xx answers into errors carrying the
/// service's message.
fn call(ep: &mut HttpEndpoint, req: ApiRequest) -> Result<Value> {
    let resp = ep.call(req).map_err(|e| anyhow!("{} unreachable: {e}", ep.base()))?;
    if resp.is_success() {
        return Ok(resp.body);
    }
    let msg = resp.body.get("error").and_then(Value::as_str).map(str::to_string).unwrap_or_else(|| resp.body.to_string());
    bail!("{} {msg}", resp.status)
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json prints"));
}

fn run(cli: Cli) -> Result<()> {
    let mut ep = HttpEndpoint::new(&cli.url);
    match cli.cmd {
        Cmd::Submit { asr_file } => {
            let text = std::fs::read_to_string(&asr_file).with_context(|| format!("reading {}", asr_file.display()))?;
            let doc: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", asr_file.display()))?;
            print_json(&call(&mut ep, ApiRequest::post("/coordinators", Some(doc)))?);
        }
        Cmd::Ls => {
            let list = call(&mut ep, ApiRequest::get("/coordinators"))?;
            if cli.json {
                print_json(&list);
            } else {
                print!("{}", table(&LS_HEADER, &coordinator_rows(&list)));
            }
        }
        Cmd::Show { id } => print_json(&call(&mut ep, ApiRequest::get(format!("/coordinators/{id}")))?),
        Cmd::Ckpt { id } => print_json(&call(&mut ep, ApiRequest::post(format!("/coordinators/{id}/checkpoints"), None))?),
        Cmd::Ckpts { id } => {
            let list = call(&mut ep, ApiRequest::get(format!("/coordinators/{id}/checkpoints")))?;
            if cli.json {
                print_json(&list);
            } else {
                let rows: Vec<Vec<String>> = list["checkpoints"]
                    .as_array()
                    .into_iter()
                    .flatten()
                    .map(|c| {
                        ["id", "size_bytes", "images", "complete", "replicated"].iter().map(|k| c[*k].to_string()).collect()
                    })
                    .collect();
                print!("{}", table(&["ID", "BYTES", "IMAGES", "COMPLETE", "REPLICATED"], &rows));
            }
        }
        Cmd::Restart { id, ckpt } => {
            let gen = match ckpt {
                Some(g) => g,
                None => {
                    let list = call(&mut ep, ApiRequest::get(format!("/coordinators/{id}/checkpoints")))?;
                    list["checkpoints"]
                        .as_array()
                        .into_iter()
                        .flatten()
                        .filter(|c| c["complete"].as_bool() == Some(true))
                        .filter_map(|c| c["id"].as_u64())
                        .max()
                        .ok_or_else(|| anyhow!("no checkpoint for application {id}"))?
                }
            };
            print_json(&call(&mut ep, ApiRequest::post(format!("/coordinators/{id}/checkpoints/{gen}"), None))?);
        }
        Cmd::Clone { id, to } => {
            let mut dst = HttpEndpoint::new(&to);
            let new_id = clone_app(&mut ep, AppId(id), Some(&mut dst))?;
            print_json(&serde_json::json!({ "source": id, "id": new_id, "target": to }));
        }
        Cmd::Migrate { id, to } => {
            let mut dst = HttpEndpoint::new(&to);
            let new_id = migrate_app(&mut ep, AppId(id), &mut dst)?;
            print_json(&serde_json::json!({ "source": id, "id": new_id, "target": to }));
        }
        Cmd::Rm { id } => print_json(&call(&mut ep, ApiRequest::delete(format!("/coordinators/{id}")))?),
        Cmd::Experiment { name, out } => {
            if !SCENARIOS.contains(&name.as_str()) {
                bail!("unknown scenario {name}; choose one of {}", SCENARIOS.join(", "));
            }
            let params = ExperimentParams { seed: cli.seed, config: load_config(&cli.config)? };
            let report = run_experiment(&name, &params)?;
            match out {
                Some(path) => {
                    std::fs::write(&path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
                    let summary = path.with_extension("json");
                    let text = serde_json::to_string_pretty(&report.summary_json())?;
                    std::fs::write(&summary, text).with_context(|| format!("writing {}", summary.display()))?;
                    eprintln!("wrote {} and {}", path.display(), summary.display());
                }
                None => print_json(&report.summary_json()),
            }
        }
        Cmd::Serve { listen, time_scale } => {
            let svc = Service::new(load_config(&cli.config)?).context("starting service")?;
            let server = HttpServer::start(Arc::new(Mutex::new(svc)), &listen, Some(time_scale))?;
            eprintln!("serving on {}", server.url());
            loop {
                std::thread::park();
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
