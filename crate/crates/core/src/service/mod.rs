//! Run store, pipeline orchestration and the HTTP-agnostic dashboard API.

mod api;
mod config;
mod pipeline;
mod store;

pub use api::{Api, Response, CSV, EXPORTS, GRDF, JSON};
pub use config::{CalibrationConfig, DataConfig, ExplainConfig, RunConfig};
pub use pipeline::{
    deletion_suite, eval_cases, load_classifier, run_pipeline, run_stage, terrain_proxy,
    CaseBundle, CaseSummary, ClassifierEval, DiagramData, LeadGrids, SplitIds,
    SupplementaryLayer, TypePrediction, RF_CLASS,
};
pub use store::{RunLock, RunRecord, RunStatus, Stage, StageError, Store, HOME_VAR};
