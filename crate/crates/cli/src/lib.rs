//! Command-line driver for the run store and the HTTP wrapper around
//! [`nowcast_xai::service::Api`].

use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::State;
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode, Uri};
use axum::response::Response;
use axum::Router;
use clap::{Args, Parser, Subcommand, ValueEnum};
use nowcast_xai::service::{run_stage, Api, RunConfig, RunRecord, RunStatus, Stage, Store};
use nowcast_xai::Error;

/// Exit code for invalid configuration, usage or precondition errors.
pub const EXIT_VALIDATION: u8 = 2;
/// Exit code for a stage that failed while executing.
pub const EXIT_FAILURE: u8 = 1;

#[derive(Debug, Parser)]
#[command(name = "nowcast-xai", version, about = "Nowcast explanation pipeline: data, training, calibration, attribution and reports")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run configuration JSON; defaults apply to omitted fields.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Store root; falls back to $NOWCAST_XAI_HOME, then ./nowcast-xai-store.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunSelect {
    /// Existing run to continue; its stored configuration is used.
    #[arg(long, value_name = "ID")]
    pub run_id: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and its split.
    GenData(RunSelect),
    /// Train the segmentation network and the rain-type classifier.
    Train(RunSelect),
    /// Fit calibrators and score them.
    Calibrate(RunSelect),
    /// Run the deletion benchmark and the receptive-field estimate.
    Explain(RunSelect),
    /// Write the stratified report and case bundles, then print the report.
    Report {
        #[command(flatten)]
        select: RunSelect,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Serve a Done run over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Run to serve; defaults to the most recently updated Done run.
        #[arg(long, value_name = "ID")]
        run_id: Option<String>,
    },
}

/// A command error with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn validation(message: impl Into<String>) -> Failure {
        Failure {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        let code = if e.is_validation() { EXIT_VALIDATION } else { EXIT_FAILURE };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn store(global: &GlobalArgs) -> Result<Store, Failure> {
    Ok(Store::open(Store::resolve_root(global.out.as_deref()))?)
}

fn resolve_config(global: &GlobalArgs, store: &Store, run_id: Option<&str>) -> Result<RunConfig, Failure> {
    if let Some(id) = run_id {
        if global.config.is_some() || global.seed.is_some() {
            return Err(Failure::validation("--run-id cannot be combined with --config or --seed"));
        }
        return Ok(store.load(id)?.config);
    }
    let mut cfg = match &global.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn summary(rec: &RunRecord) -> String {
    let stages: Vec<&str> = rec.completed_stages.iter().map(|s| s.name()).collect();
    format!("{} {:?} [{}]", rec.run_id, rec.status, stages.join(","))
}

/// Runs one stage (and its missing prerequisites) for the selected run.
pub fn stage(global: &GlobalArgs, select: &RunSelect, stage: Stage) -> Result<RunRecord, Failure> {
    let store = store(global)?;
    let cfg = resolve_config(global, &store, select.run_id.as_deref())?;
    log::info!("run {} stage {stage}", cfg.run_id());
    Ok(run_stage(&store, &cfg, stage)?)
}

/// Completes the report stage and returns the exported report bytes.
pub fn report(global: &GlobalArgs, select: &RunSelect, format: Format) -> Result<Vec<u8>, Failure> {
    let rec = stage(global, select, Stage::Report)?;
    let name = match format {
        Format::Csv => "stratified.csv",
        Format::Json => "stratified.json",
    };
    let api = Api::new(store(global)?, &rec.run_id)?;
    let r = api.handle("GET", &format!("/v1/export/{name}"), "");
    if r.status != 200 {
        return Err(Failure {
            code: EXIT_FAILURE,
            message: String::from_utf8_lossy(&r.body).into_owned(),
        });
    }
    Ok(r.body)
}

/// Picks the run to serve. Only Done runs are served; an empty store is
/// served without a run so that listings come back empty.
pub fn select_served(store: &Store, run_id: Option<&str>) -> Result<Option<String>, Failure> {
    let rec = match run_id {
        Some(id) => store.load(id)?,
        None => {
            let runs = store.list()?;
            if runs.is_empty() {
                return Ok(None);
            }
            match runs.iter().filter(|r| r.is_done()).max_by_key(|r| r.updated_at) {
                Some(r) => r.clone(),
                None => {
                    let ids: Vec<String> = runs
                        .iter()
                        .map(|r| format!("{}; finish with `nowcast-xai report --run-id {}`", summary(r), r.run_id))
                        .collect();
                    return Err(Failure::validation(format!(
                        "no Done run to serve; runs in the store:\n  {}",
                        ids.join("\n  ")
                    )));
                }
            }
        }
    };
    if rec.status != RunStatus::Done {
        let next = match &rec.error {
            Some(e) => format!("it failed at {}: {}; fix the configuration and start a new run", e.stage, e.cause),
            None => format!("finish it with `nowcast-xai report --run-id {}`", rec.run_id),
        };
        return Err(Failure::validation(format!(
            "run {} is {:?}, only Done runs can be served; {next}",
            rec.run_id, rec.status
        )));
    }
    Ok(Some(rec.run_id))
}

/// Shared state of the HTTP server.
#[derive(Clone)]
pub struct AppState {
    api: Option<Arc<Api>>,
}

impl AppState {
    pub fn new(store: Store, run_id: Option<&str>) -> Result<AppState, Failure> {
        let api = match run_id {
            Some(id) => Some(Arc::new(Api::new(store, id)?)),
            None => None,
        };
        Ok(AppState { api })
    }

    pub fn api(&self) -> Option<&Arc<Api>> {
        self.api.as_ref()
    }
}

/// Router forwarding every request to the API, with ETag revalidation.
pub fn app(state: AppState) -> Router {
    Router::new().fallback(dispatch).with_state(state)
}

async fn dispatch(State(state): State<AppState>, method: Method, uri: Uri, headers: HeaderMap) -> Response {
    let path = uri.path().to_string();
    let query = uri.query().unwrap_or("").to_string();
    let r = match state.api {
        Some(api) => {
            let m = method.as_str().to_string();
            match tokio::task::spawn_blocking(move || api.handle(&m, &path, &query)).await {
                Ok(r) => r,
                Err(e) => return plain(StatusCode::INTERNAL_SERVER_ERROR, &e.to_string()),
            }
        }
        None if method == Method::GET && path == "/v1/cases" => {
            return json_response(StatusCode::OK, b"[]".to_vec(), None);
        }
        None => return plain(StatusCode::NOT_FOUND, "no run is being served"),
    };
    let status = StatusCode::from_u16(r.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    if let (Some(tag), Some(inm)) = (&r.etag, headers.get(header::IF_NONE_MATCH)) {
        let hit = inm
            .to_str()
            .map(|v| v.split(',').any(|t| t.trim() == tag || t.trim() == "*"))
            .unwrap_or(false);
        if hit {
            return Response::builder()
                .status(StatusCode::NOT_MODIFIED)
                .header(header::ETAG, tag.as_str())
                .body(Body::empty())
                .expect("valid response");
        }
    }
    let mut resp = Response::builder()
        .status(status)
        .header(header::CONTENT_TYPE, r.content_type)
        .header(header::ACCESS_CONTROL_ALLOW_ORIGIN, "*");
    if let Some(tag) = &r.etag {
        resp = resp.header(header::ETAG, tag.as_str());
    }
    let body = if method == Method::HEAD { Body::empty() } else { Body::from(r.body) };
    resp.body(body).expect("valid response")
}

fn json_response(status: StatusCode, body: Vec<u8>, etag: Option<&str>) -> Response {
    let mut resp = Response::builder()
        .status(status)
        .header(header::CONTENT_TYPE, HeaderValue::from_static("application/json"));
    if let Some(t) = etag {
        resp = resp.header(header::ETAG, t);
    }
    resp.body(Body::from(body)).expect("valid response")
}

fn plain(status: StatusCode, message: &str) -> Response {
    let body = format!("{{\"status\":{},\"error\":{:?}}}", status.as_u16(), message);
    json_response(status, body.into_bytes(), None)
}

fn serve(global: &GlobalArgs, addr: SocketAddr, run_id: Option<&str>) -> Result<(), Failure> {
    let store = store(global)?;
    let selected = select_served(&store, run_id)?;
    let state = AppState::new(store, selected.as_deref())?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure {
        code: EXIT_FAILURE,
        message: e.to_string(),
    })?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        match &selected {
            Some(id) => log::info!("serving run {id} on http://{addr}/v1"),
            None => log::info!("serving an empty store on http://{addr}/v1"),
        }
        axum::serve(listener, app(state)).await
    })
    .map_err(|e| Failure {
        code: EXIT_FAILURE,
        message: format!("server: {e}"),
    })
}

/// Executes a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> u8 {
    let g = &cli.global;
    let result = match &cli.command {
        Command::GenData(s) => stage(g, s, Stage::GenData).map(|r| println!("{}", summary(&r))),
        Command::Train(s) => stage(g, s, Stage::Train).map(|r| println!("{}", summary(&r))),
        Command::Calibrate(s) => stage(g, s, Stage::Calibrate).map(|r| println!("{}", summary(&r))),
        Command::Explain(s) => stage(g, s, Stage::Explain).map(|r| println!("{}", summary(&r))),
        Command::Report { select, format } => report(g, select, *format).and_then(|b| {
            std::io::stdout().write_all(&b).map_err(|e| Failure {
                code: EXIT_FAILURE,
                message: e.to_string(),
            })
        }),
        Command::Serve { addr, run_id } => serve(g, *addr, run_id.as_deref()),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
