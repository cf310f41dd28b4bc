use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::pipeline::{load_network, CaseBundle, CaseSummary, DiagramData};
use super::store::{RunRecord, Store};
use crate::attribution::{attribute, AttributionMap, AttributionTarget, Method};
use crate::calibration::{CalibrationMethod, EceTable};
use crate::datagen::{read_json, RainType};
use crate::error::{Error, Result};
use crate::grdf::Grdf;
use crate::grid::{FusedInput, ValidityMask, LEAD_TIMES, NUM_CLASSES};
use crate::net::NetworkParams;
use crate::verify::ReportRow;

pub const JSON: &str = "application/json";
pub const GRDF: &str = "application/octet-stream";
pub const CSV: &str = "text/csv";

/// Report files served verbatim under `/v1/export/`.
pub const EXPORTS: [(&str, &str); 4] = [
    ("stratified.csv", "report/stratified.csv"),
    ("stratified.json", "report/stratified.json"),
    ("ece.csv", "calibration/ece.csv"),
    ("ece.json", "calibration/ece.json"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Response {
    pub status: u16,
    pub content_type: &'static str,
    pub body: Vec<u8>,
    /// Quoted SHA-256 of the body for successful responses.
    pub etag: Option<String>,
}

impl Response {
    fn ok(content_type: &'static str, body: Vec<u8>) -> Response {
        let etag = format!("\"{}\"", hex::encode(Sha256::digest(&body)));
        Response {
            status: 200,
            content_type,
            body,
            etag: Some(etag),
        }
    }

    fn json<T: Serialize>(value: &T) -> Response {
        match serde_json::to_vec(value) {
            Ok(b) => Response::ok(JSON, b),
            Err(e) => Response::error(500, &e.to_string()),
        }
    }

    fn error(status: u16, message: &str) -> Response {
        Response {
            status,
            content_type: JSON,
            body: serde_json::to_vec(&json!({ "status": status, "error": message }))
                .expect("error body serializes"),
            etag: None,
        }
    }

    fn from_error(e: &Error) -> Response {
        let status = match e {
            Error::NotFound(_) => 404,
            Error::Conflict(_) => 409,
            e if e.is_validation() => 400,
            _ => 500,
        };
        Response::error(status, &e.to_string())
    }

    pub fn json_body(&self) -> serde_json::Value {
        serde_json::from_slice(&self.body).unwrap_or(serde_json::Value::Null)
    }
}

type ExplainKey = (String, u8, usize, Method);
type ExplainCell = Arc<OnceLock<std::result::Result<Arc<AttributionMap>, String>>>;

/// Read-only view of one Done run.
struct Loaded {
    net: NetworkParams,
    cases: Vec<CaseSummary>,
}

/// Routes requests against one run of a store.
pub struct Api {
    store: Store,
    run_id: String,
    loaded: OnceLock<std::result::Result<Loaded, String>>,
    explain_cache: Mutex<HashMap<ExplainKey, ExplainCell>>,
    computations: AtomicUsize,
}

/// Query-string pairs; later duplicates win.
fn parse_query(q: &str) -> BTreeMap<String, String> {
    q.split('&')
        .filter(|p| !p.is_empty())
        .map(|p| match p.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => (p.to_string(), String::new()),
        })
        .collect()
}

fn safe_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

fn parse_lead(v: Option<&String>, required: bool) -> Result<Option<u8>> {
    match v {
        None if required => Err(Error::Validation("missing `lead`; allowed values: 1, 2, 3, 4, 5, 6".into())),
        None => Ok(None),
        Some(s) => match s.parse::<u8>() {
            Ok(l) if (1..=LEAD_TIMES as u8).contains(&l) => Ok(Some(l)),
            _ => Err(Error::Validation(format!(
                "invalid lead `{s}`; allowed values: 1, 2, 3, 4, 5, 6"
            ))),
        },
    }
}

fn parse_type(v: Option<&String>) -> Result<Option<RainType>> {
    match v {
        None => Ok(None),
        Some(s) => RainType::parse(s).map(Some).ok_or_else(|| {
            let allowed: Vec<&str> = RainType::ALL.iter().map(|t| t.name()).collect();
            Error::Validation(format!("invalid rain type `{s}`; allowed values: {}", allowed.join(", ")))
        }),
    }
}

fn calibration_names() -> String {
    CalibrationMethod::ALL.iter().map(|m| m.name()).collect::<Vec<_>>().join(", ")
}

impl Api {
    /// Fails with `NotFound` when the run does not exist.
    pub fn new(store: Store, run_id: &str) -> Result<Api> {
        store.load(run_id)?;
        Ok(Api {
            store,
            run_id: run_id.to_string(),
            loaded: OnceLock::new(),
            explain_cache: Mutex::new(HashMap::new()),
            computations: AtomicUsize::new(0),
        })
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    /// Number of attribution maps computed so far (cache misses).
    pub fn computations(&self) -> usize {
        self.computations.load(Ordering::SeqCst)
    }

    fn dir(&self) -> PathBuf {
        self.store.run_dir(&self.run_id)
    }

    fn record(&self) -> Result<RunRecord> {
        self.store.load(&self.run_id)
    }

    fn require_done(&self) -> Result<&Loaded> {
        let rec = self.record()?;
        if !rec.is_done() {
            return Err(Error::Conflict(format!(
                "run {} is {:?}; run the pipeline to completion first",
                rec.run_id, rec.status
            )));
        }
        self.loaded
            .get_or_init(|| {
                let load = || -> Result<Loaded> {
                    Ok(Loaded {
                        net: load_network(&self.dir())?,
                        cases: read_json(&self.dir().join("cases/index.json"))?,
                    })
                };
                load().map_err(|e| e.to_string())
            })
            .as_ref()
            .map_err(|e| Error::Format(e.clone()))
    }

    /// Dispatches `method path?query`. Paths are rooted at `/v1`.
    pub fn handle(&self, method: &str, path: &str, query: &str) -> Response {
        if method != "GET" && method != "HEAD" {
            return Response::error(405, "only GET is supported");
        }
        let q = parse_query(query);
        let parts: Vec<&str> = path.trim_matches('/').split('/').collect();
        let result = match parts.as_slice() {
            ["v1", "run"] => self.record().map(|r| Response::json(&r)),
            ["v1", "cases"] => self.cases(&q),
            ["v1", "cases", id] => self.case(id),
            ["v1", "grids", id, name] => self.grid(id, name),
            ["v1", "explain", id] => self.explain(id, &q),
            ["v1", "confidence", id] => self.confidence(id, &q),
            ["v1", "performance"] => self.performance(&q),
            ["v1", "reliability"] => self.reliability(&q),
            ["v1", "supplementary", id] => self.supplementary(id),
            ["v1", "export", name] => self.export(name),
            _ => Err(Error::NotFound(format!("route {path}"))),
        };
        result.unwrap_or_else(|e| Response::from_error(&e))
    }

    fn export(&self, name: &str) -> Result<Response> {
        let (_, rel) = EXPORTS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::NotFound(format!("export `{name}`")))?;
        self.require_done()?;
        let bytes = std::fs::read(self.dir().join(rel)).map_err(|e| Error::io(self.dir().join(rel), e))?;
        let ct = if name.ends_with(".csv") { CSV } else { JSON };
        Ok(Response::ok(ct, bytes))
    }

    fn cases(&self, q: &BTreeMap<String, String>) -> Result<Response> {
        let rain_type = parse_type(q.get("rain_type"))?;
        let lead = parse_lead(q.get("lead_time"), false)?;
        // an empty store or an unfinished run lists nothing
        let Ok(loaded) = self.require_done() else {
            return Ok(Response::json(&Vec::<CaseSummary>::new()));
        };
        let out: Vec<&CaseSummary> = loaded
            .cases
            .iter()
            .filter(|c| rain_type.is_none_or(|t| c.rain_type == t))
            .filter(|c| lead.is_none_or(|l| c.rain_leads.contains(&l)))
            .collect();
        Ok(Response::json(&out))
    }

    fn bundle(&self, id: &str) -> Result<CaseBundle> {
        let loaded = self.require_done()?;
        if !loaded.cases.iter().any(|c| c.id == id) {
            return Err(Error::NotFound(format!("case `{id}`")));
        }
        read_json(&self.dir().join("cases").join(id).join("bundle.json"))
    }

    fn grid_url(&self, id: &str, name: &str) -> String {
        format!("/v1/grids/{id}/{name}")
    }

    fn case(&self, id: &str) -> Result<Response> {
        let b = self.bundle(id)?;
        let url = |n: &str| self.grid_url(id, n);
        let leads: Vec<serde_json::Value> = b
            .leads
            .iter()
            .map(|l| {
                let map = |m: &BTreeMap<String, String>| -> BTreeMap<String, String> {
                    m.iter().map(|(k, v)| (k.clone(), url(v))).collect()
                };
                let explain: BTreeMap<String, String> = (0..NUM_CLASSES)
                    .map(|c| {
                        (
                            c.to_string(),
                            format!("/v1/explain/{id}?lead={}&class={c}&method=ig", l.lead_time),
                        )
                    })
                    .collect();
                json!({
                    "lead_time": l.lead_time,
                    "prediction": url(&l.prediction),
                    "truth": url(&l.truth),
                    "confidence": map(&l.confidence),
                    "classes": map(&l.classes),
                    "attribution": explain,
                    "metrics": l.metrics,
                })
            })
            .collect();
        let supplementary: Vec<serde_json::Value> = b
            .supplementary
            .iter()
            .map(|s| {
                json!({
                    "name": s.name,
                    "description": s.description,
                    "grid": url(&s.grid),
                    "model_input": s.model_input,
                })
            })
            .collect();
        Ok(Response::json(&json!({
            "id": b.id,
            "rain_type": b.rain_type,
            "classifier": b.classifier,
            "height": b.height,
            "width": b.width,
            "issue_time": b.issue_time,
            "input": url(&b.input),
            "mask": url(&b.mask),
            "rain_leads": b.rain_leads,
            "leads": leads,
            "supplementary": supplementary,
        })))
    }

    fn grid(&self, id: &str, name: &str) -> Result<Response> {
        self.bundle(id)?;
        if !safe_name(name) {
            return Err(Error::NotFound(format!("grid `{name}`")));
        }
        let p = self.dir().join("cases").join(id).join(format!("{name}.grdf"));
        let bytes = std::fs::read(&p).map_err(|_| Error::NotFound(format!("grid `{name}` of case `{id}`")))?;
        Ok(Response::ok(GRDF, bytes))
    }

    fn case_input(&self, id: &str) -> Result<(FusedInput, ValidityMask)> {
        let dir = self.dir().join("cases").join(id);
        let x = FusedInput::new(Grdf::read(&dir.join("input.grdf"))?.to_tensor()?)?;
        let m = Grdf::read(&dir.join("mask.grdf"))?;
        let mask = ValidityMask::new(x.height(), x.width(), m.values.iter().map(|v| *v != 0.0).collect())?;
        Ok((x, mask))
    }

    /// Attribution map for one key, computed at most once.
    pub fn attribution(&self, id: &str, lead: u8, class: usize, method: Method) -> Result<Arc<AttributionMap>> {
        self.bundle(id)?;
        let key = (id.to_string(), lead, class, method);
        let cell = {
            let mut cache = self.explain_cache.lock().expect("explain cache lock");
            cache.entry(key).or_default().clone()
        };
        cell.get_or_init(|| {
            self.computations.fetch_add(1, Ordering::SeqCst);
            let compute = || -> Result<AttributionMap> {
                let loaded = self.require_done()?;
                let cfg = self.record()?.config.explain.attribution;
                let (x, mask) = self.case_input(id)?;
                let target = AttributionTarget::valid_region(lead, class, &mask)?;
                attribute(&loaded.net, &x, method, &target, &cfg)
            };
            compute().map(Arc::new).map_err(|e| e.to_string())
        })
        .clone()
        .map_err(Error::Format)
    }

    fn explain(&self, id: &str, q: &BTreeMap<String, String>) -> Result<Response> {
        let lead = parse_lead(q.get("lead"), true)?.expect("required");
        let class = match q.get("class").map(|s| s.parse::<usize>()) {
            Some(Ok(c)) if c < NUM_CLASSES => c,
            Some(_) | None => {
                return Err(Error::Validation(format!(
                    "invalid class `{}`; allowed values: 0, 1, 2",
                    q.get("class").map(String::as_str).unwrap_or("")
                )))
            }
        };
        let method = match q.get("method") {
            None => Method::IntegratedGradients,
            Some(s) => match Method::parse(s) {
                Some(m) if m != Method::Random => m,
                _ => {
                    return Err(Error::Validation(format!(
                        "invalid method `{s}`; allowed values: ig, saliency, smoothig"
                    )))
                }
            },
        };
        let a = self.attribution(id, lead, class, method)?;
        if q.get("format").map(String::as_str) == Some("grdf") {
            return Ok(Response::ok(GRDF, Grdf::from_tensor("attribution", &a.a).encode()));
        }
        let limit = a.color_limit();
        let channel_totals: Vec<f64> = (0..a.a.channels()).map(|c| a.a.channel(c).iter().sum()).collect();
        Ok(Response::json(&json!({
            "case_id": id,
            "lead_time": lead,
            "target_class": class,
            "method": a.method,
            "steps": a.steps,
            "n_samples": a.n_samples,
            "noise_sigma": a.noise_sigma,
            "seed": a.seed,
            "channels": a.a.channels(),
            "height": a.a.height(),
            "width": a.a.width(),
            "color_scale": { "min": -limit, "max": limit },
            "channel_totals": channel_totals,
            "grid": format!(
                "/v1/explain/{id}?lead={lead}&class={class}&method={}&format=grdf",
                a.method.name()
            ),
        })))
    }

    fn confidence(&self, id: &str, q: &BTreeMap<String, String>) -> Result<Response> {
        let lead = parse_lead(q.get("lead"), true)?.expect("required");
        let calibrated = match q.get("calibrated").map(String::as_str) {
            None | Some("false") => false,
            Some("true") => true,
            Some(s) => {
                return Err(Error::Validation(format!(
                    "invalid calibrated `{s}`; allowed values: true, false"
                )))
            }
        };
        let method = if calibrated {
            match q.get("method") {
                None => CalibrationMethod::Temperature,
                Some(s) => CalibrationMethod::parse(s).ok_or_else(|| {
                    Error::Validation(format!("invalid method `{s}`; allowed values: {}", calibration_names()))
                })?,
            }
        } else {
            CalibrationMethod::Uncalibrated
        };
        let b = self.bundle(id)?;
        let l = &b.leads[lead as usize - 1];
        let (conf, classes) = match (l.confidence.get(method.name()), l.classes.get(method.name())) {
            (Some(c), Some(k)) => (c, k),
            _ => {
                return Err(Error::NotFound(format!(
                    "method {} was not fitted for this run",
                    method.name()
                )))
            }
        };
        Ok(Response::json(&json!({
            "case_id": id,
            "lead_time": lead,
            "calibrated": calibrated,
            "method": method,
            "classes": self.grid_url(id, classes),
            "confidence": self.grid_url(id, conf),
            "color_domain": [1.0 / 3.0, 1.0],
        })))
    }

    fn performance(&self, q: &BTreeMap<String, String>) -> Result<Response> {
        let rain_type = parse_type(q.get("type"))?;
        let lead = parse_lead(q.get("lead"), false)?;
        self.require_done()?;
        let rows: Vec<ReportRow> = read_json(&self.dir().join("report/stratified.json"))?;
        let diagram: DiagramData = read_json(&self.dir().join("report/diagram.json"))?;
        let cells: Vec<serde_json::Value> = rows
            .iter()
            .zip(&diagram.points)
            .filter(|(r, _)| rain_type.is_none_or(|t| r.rain_type == t))
            .filter(|(r, _)| lead.is_none_or(|l| r.lead_time == l))
            .map(|(r, p)| json!({ "row": r, "point": p }))
            .collect();
        Ok(Response::json(&json!({
            "cells": cells,
            "geometry": diagram.geometry,
            "description": "Each point plots success ratio (x) against probability of detection (y), \
                averaged over the 1 mm/hr and 10 mm/hr thresholds. Curves are lines of equal critical \
                success index; dashed rays are lines of equal frequency bias. Points toward the upper \
                right are better; points above the bias-1 ray over-forecast rain.",
        })))
    }

    fn reliability(&self, q: &BTreeMap<String, String>) -> Result<Response> {
        let lead = parse_lead(q.get("lead"), false)?;
        let method = match q.get("method") {
            None => None,
            Some(s) => Some(CalibrationMethod::parse(s).ok_or_else(|| {
                Error::Validation(format!("invalid method `{s}`; allowed values: {}", calibration_names()))
            })?),
        };
        self.require_done()?;
        let table: EceTable = read_json(&self.dir().join("calibration/ece.json"))?;
        let rows: Vec<serde_json::Value> = table
            .rows
            .iter()
            .filter(|r| lead.is_none_or(|l| r.lead_time == l))
            .map(|r| {
                let scores: Vec<_> = r
                    .scores
                    .iter()
                    .filter(|s| method.is_none_or(|m| s.method == m))
                    .collect();
                json!({ "lead_time": r.lead_time, "scores": scores })
            })
            .collect();
        Ok(Response::json(&json!({
            "bins": table.bins,
            "sampling": table.sampling,
            "rows": rows,
        })))
    }

    fn supplementary(&self, id: &str) -> Result<Response> {
        let b = self.bundle(id)?;
        let layers: Vec<serde_json::Value> = b
            .supplementary
            .iter()
            .map(|s| {
                json!({
                    "name": s.name,
                    "description": s.description,
                    "grid": self.grid_url(id, &s.grid),
                    "model_input": s.model_input,
                })
            })
            .collect();
        Ok(Response::json(&layers))
    }

    /// Configuration snapshot of the served run.
    pub fn config(&self) -> Result<RunConfig> {
        Ok(self.record()?.config)
    }
}
