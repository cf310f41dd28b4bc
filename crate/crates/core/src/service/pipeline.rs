use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::store::{now, RunRecord, RunStatus, Stage, StageError, Store};
use crate::attribution::{compare_methods, effective_receptive_field, DeletionCase};
use crate::calibration::{
    evaluate_calibration, fit_calibrators, CalibrationMethod, Calibrators, EvalCase,
};
use crate::datagen::{
    load_dataset, make_dataset, read_json, save_dataset, split_dataset, RainType, Scenario,
};
use crate::error::{Error, Result};
use crate::grdf::{Grdf, Header};
use crate::grid::{argmax_logits, rain_to_classes, ClassGrid, ConfidenceGrid, FusedInput, LEAD_TIMES};
use crate::model::{
    classify_type, confusion_matrix, load_params, predict, save_params, train_classifier,
    train_segmentation, ClassifierParams, ConfusionMatrix, NUM_TYPES,
};
use crate::net::NetworkParams;
use crate::verify::{diagram_geometry, stratified_report, DiagramGeometry, DiagramPoint, ReportRow};

pub(crate) const SEGMENTATION: &str = "segmentation";

/// Scenario ids of each split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEval {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypePrediction {
    pub id: String,
    pub rain_type: RainType,
    pub predicted: RainType,
    pub probabilities: [f64; NUM_TYPES],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagramData {
    pub geometry: DiagramGeometry,
    /// Type-major 6×6 points; `None` where the cell is undefined.
    pub points: Vec<Option<DiagramPoint>>,
}

/// Grid file names below a case directory, relative and without extension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeadGrids {
    pub lead_time: u8,
    pub prediction: String,
    pub truth: String,
    /// Calibration method name to confidence grid.
    pub confidence: BTreeMap<String, String>,
    /// Calibration method name to class grid under that method.
    pub classes: BTreeMap<String, String>,
    /// Stratified report row of the case's classified type at this lead.
    pub metrics: ReportRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupplementaryLayer {
    pub name: String,
    pub description: String,
    pub grid: String,
    /// Always false: supplementary layers are for display only.
    pub model_input: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseBundle {
    pub id: String,
    pub rain_type: RainType,
    pub classifier: TypePrediction,
    pub height: usize,
    pub width: usize,
    /// Minutes since the Unix epoch.
    pub issue_time: i64,
    pub input: String,
    pub mask: String,
    pub leads: Vec<LeadGrids>,
    pub supplementary: Vec<SupplementaryLayer>,
    /// Lead times whose observed field holds rain of at least 1 mm/hr.
    pub rain_leads: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub id: String,
    pub rain_type: RainType,
    pub predicted_type: RainType,
    pub rain_leads: Vec<u8>,
}

/// Runs `stage` and any missing prerequisites. A Done run is returned
/// unchanged.
pub fn run_stage(store: &Store, config: &RunConfig, stage: Stage) -> Result<RunRecord> {
    let mut rec = store.create_or_load(config)?;
    if rec.is_done() {
        return Ok(rec);
    }
    let _lock = store.lock(&rec.run_id)?;
    let cfg = rec.config.clone();
    let dir = store.run_dir(&rec.run_id);
    let todo: Vec<Stage> = stage
        .prerequisites()
        .iter()
        .copied()
        .chain([stage])
        .filter(|s| !rec.has_stage(*s))
        .collect();
    for s in todo {
        rec.status = RunStatus::Running;
        rec.error = None;
        rec.updated_at = now();
        store.save(&rec)?;
        log::info!("run {}: stage {s}", rec.run_id);
        match execute(s, &cfg, &dir) {
            Ok(artifacts) => {
                rec.artifacts.extend(artifacts);
                rec.completed_stages.push(s);
            }
            Err(e) => {
                let validation = e.is_validation();
                let cause = e.to_string();
                rec.status = RunStatus::Failed;
                rec.error = Some(StageError {
                    stage: s,
                    cause: cause.clone(),
                    validation,
                });
                rec.updated_at = now();
                store.save(&rec)?;
                return Err(Error::Stage {
                    stage: s.name().into(),
                    cause,
                    validation,
                });
            }
        }
    }
    rec.status = if Stage::ALL.iter().all(|s| rec.has_stage(*s)) {
        RunStatus::Done
    } else {
        RunStatus::Pending
    };
    rec.updated_at = now();
    store.save(&rec)?;
    Ok(rec)
}

/// Every stage through the report; idempotent per run id.
pub fn run_pipeline(store: &Store, config: &RunConfig) -> Result<RunRecord> {
    run_stage(store, config, Stage::Report)
}

type Artifacts = Vec<(String, String)>;

fn execute(stage: Stage, cfg: &RunConfig, dir: &Path) -> Result<Artifacts> {
    match stage {
        Stage::GenData => gen_data(cfg, dir),
        Stage::Train => train(cfg, dir),
        Stage::Calibrate => calibrate(cfg, dir),
        Stage::Explain => explain(cfg, dir),
        Stage::Report => report(cfg, dir),
    }
}

fn art(name: &str, path: &str) -> (String, String) {
    (name.to_string(), path.to_string())
}

fn write_json<T: Serialize>(dir: &Path, rel: &str, value: &T) -> Result<()> {
    crate::datagen::write_json(&dir.join(rel), value)
}

fn write_text(dir: &Path, rel: &str, s: &str) -> Result<()> {
    let p = dir.join(rel);
    if let Some(d) = p.parent() {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    fs::write(&p, s).map_err(|e| Error::io(&p, e))
}

fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<Artifacts> {
    cfg.validate()?;
    let data = make_dataset(&cfg.data.counts, cfg.seed, cfg.data.grid)?;
    save_dataset(&dir.join("data"), &data, cfg.seed)?;
    let split = split_dataset(&data, |s| s.label, cfg.data.split, cfg.seed)?;
    let ids = |v: &[Scenario]| v.iter().map(|s| s.id.clone()).collect();
    let split = SplitIds {
        train: ids(&split.train),
        val: ids(&split.val),
        test: ids(&split.test),
        warnings: split.warnings,
    };
    write_json(dir, "data/split.json", &split)?;
    Ok(vec![
        art("dataset_manifest", "data/manifest.json"),
        art("split", "data/split.json"),
    ])
}

pub(crate) struct Splits {
    pub train: Vec<Scenario>,
    pub val: Vec<Scenario>,
    pub test: Vec<Scenario>,
}

pub(crate) fn load_splits(dir: &Path) -> Result<Splits> {
    let (_, data) = load_dataset(&dir.join("data"))?;
    let ids: SplitIds = read_json(&dir.join("data/split.json"))?;
    let by_id: BTreeMap<&str, &Scenario> = data.iter().map(|s| (s.id.as_str(), s)).collect();
    let pick = |v: &[String]| -> Result<Vec<Scenario>> {
        v.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|s| (*s).clone())
                    .ok_or_else(|| Error::NotFound(format!("scenario {id} in split but not in dataset")))
            })
            .collect()
    };
    Ok(Splits {
        train: pick(&ids.train)?,
        val: pick(&ids.val)?,
        test: pick(&ids.test)?,
    })
}

fn require(data: &[Scenario], what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Validation(format!(
            "the {what} split is empty; raise the dataset counts or its split fraction"
        )));
    }
    Ok(())
}

fn train(cfg: &RunConfig, dir: &Path) -> Result<Artifacts> {
    cfg.train.validate()?;
    cfg.classifier.validate()?;
    let s = load_splits(dir)?;
    require(&s.train, "train")?;
    require(&s.test, "test")?;
    let model = dir.join("model");
    let (net, log) = train_segmentation(&s.train, &cfg.train)?;
    save_params(&model, SEGMENTATION, &net)?;
    write_json(dir, "model/segmentation_log.json", &log)?;
    let (clf, clog) = train_classifier(&s.train, &net, &cfg.classifier)?;
    clf.save(&model)?;
    write_json(dir, "model/classifier_log.json", &clog)?;
    let m = confusion_matrix(&clf, &s.test)?;
    write_json(
        dir,
        "model/classifier_eval.json",
        &ClassifierEval {
            accuracy: m.accuracy(),
            confusion: m,
        },
    )?;
    let types = s
        .test
        .iter()
        .map(|sc| {
            let (predicted, probabilities) = classify_type(&clf, &sc.inputs)?;
            Ok(TypePrediction {
                id: sc.id.clone(),
                rain_type: sc.label,
                predicted,
                probabilities,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(dir, "model/test_types.json", &types)?;
    Ok(vec![
        art("segmentation_weights", "model/segmentation.grdf"),
        art("segmentation_arch", "model/segmentation.arch.json"),
        art("segmentation_log", "model/segmentation_log.json"),
        art("classifier_encoder", "model/classifier_encoder.grdf"),
        art("classifier_head", "model/classifier_head.grdf"),
        art("classifier_log", "model/classifier_log.json"),
        art("classifier_eval", "model/classifier_eval.json"),
        art("test_types", "model/test_types.json"),
    ])
}

pub(crate) fn load_network(dir: &Path) -> Result<NetworkParams> {
    load_params(&dir.join("model"), SEGMENTATION)
}

/// Calibration view of scenarios under `net`.
pub fn eval_cases(net: &NetworkParams, data: &[Scenario]) -> Result<Vec<EvalCase>> {
    data.iter()
        .map(|s| {
            Ok(EvalCase {
                x: s.inputs.tensor().clone(),
                logits: predict(net, &s.inputs)?,
                truths: s.truth.iter().map(rain_to_classes).collect::<Result<Vec<_>>>()?,
                mask: s.mask.clone(),
            })
        })
        .collect()
}

pub(crate) fn calibration_methods(cfg: &RunConfig) -> Vec<CalibrationMethod> {
    CalibrationMethod::ALL
        .into_iter()
        .filter(|m| *m != CalibrationMethod::LocalTemperature || cfg.calibration.lts.is_some())
        .collect()
}

fn calibrate(cfg: &RunConfig, dir: &Path) -> Result<Artifacts> {
    cfg.validate_calibration()?;
    let s = load_splits(dir)?;
    require(&s.val, "validation")?;
    require(&s.test, "test")?;
    let net = load_network(dir)?;
    let val = eval_cases(&net, &s.val)?;
    let test = eval_cases(&net, &s.test)?;
    let c = &cfg.calibration;
    let (cal, logs) = fit_calibrators(&val, c.lts.as_ref(), c.bins)?;
    cal.save(&dir.join("calibration"))?;
    write_json(dir, "calibration/fit_log.json", &logs)?;
    let table = evaluate_calibration(&cal, &test, &calibration_methods(cfg), c.bins, &c.sampling)?;
    write_text(dir, "calibration/ece.json", &table.to_json()?)?;
    write_text(dir, "calibration/ece.csv", &table.to_csv()?)?;
    let mut out = vec![
        art("calibration_fit_log", "calibration/fit_log.json"),
        art("ece_json", "calibration/ece.json"),
        art("ece_csv", "calibration/ece.csv"),
    ];
    for k in 1..=LEAD_TIMES {
        out.push((format!("ts_lead{k}"), format!("calibration/ts_lead{k}.json")));
        out.push((format!("platt_lead{k}"), format!("calibration/platt_lead{k}.json")));
        out.push((format!("binning_lead{k}"), format!("calibration/binning_lead{k}.json")));
        if c.lts.is_some() {
            out.push((format!("lts_lead{k}"), format!("calibration/lts_lead{k}.grdf")));
        }
    }
    Ok(out)
}

/// Test scenarios with observed rain at `lead_time`, in split order.
pub fn deletion_suite(test: &[Scenario], lead_time: u8, n: usize) -> Result<Vec<DeletionCase>> {
    let mut out = Vec::new();
    for s in test {
        if out.len() == n {
            break;
        }
        let truth = rain_to_classes(&s.truth[lead_time as usize - 1])?;
        if s.mask.indices().all(|i| truth.labels()[i] == 0) {
            continue;
        }
        out.push(DeletionCase {
            x: s.inputs.clone(),
            truth,
            mask: s.mask.clone(),
            lead_time,
        });
    }
    Ok(out)
}

/// Target class of the receptive-field measurement (light rain).
pub const RF_CLASS: usize = 1;

fn explain(cfg: &RunConfig, dir: &Path) -> Result<Artifacts> {
    cfg.validate_explain()?;
    let e = &cfg.explain;
    let s = load_splits(dir)?;
    require(&s.test, "test")?;
    let net = load_network(dir)?;
    let suite = deletion_suite(&s.test, e.lead_time, e.suite_cases)?;
    if suite.is_empty() {
        return Err(Error::Validation(format!(
            "no test case has rain at lead {}; the deletion benchmark needs at least one",
            e.lead_time
        )));
    }
    if suite.len() < e.suite_cases {
        log::warn!("deletion suite has {} of {} requested cases", suite.len(), e.suite_cases);
    }
    let cmp = compare_methods(&net, &suite, &e.methods, &e.attribution, &e.ks)?;
    write_json(dir, "explain/deletion.json", &cmp)?;
    let inputs: Vec<FusedInput> = s.test.iter().take(e.rf_samples).map(|c| c.inputs.clone()).collect();
    let rf = effective_receptive_field(&net, &inputs, &s.test[0].mask, e.lead_time, RF_CLASS, &e.attribution)?;
    write_json(dir, "explain/receptive_field.json", &rf)?;
    Ok(vec![
        art("deletion", "explain/deletion.json"),
        art("receptive_field", "explain/receptive_field.json"),
    ])
}

fn report(cfg: &RunConfig, dir: &Path) -> Result<Artifacts> {
    let s = load_splits(dir)?;
    require(&s.test, "test")?;
    let net = load_network(dir)?;
    let types: Vec<TypePrediction> = read_json(&dir.join("model/test_types.json"))?;
    let labels: Vec<RainType> = types.iter().map(|t| t.predicted).collect();
    let logits = s
        .test
        .iter()
        .map(|sc| predict(&net, &sc.inputs))
        .collect::<Result<Vec<_>>>()?;
    let preds: Vec<Vec<ClassGrid>> = logits.iter().map(|l| l.iter().map(argmax_logits).collect()).collect();
    let rep = stratified_report(&preds, &s.test, &labels)?;
    rep.write(&dir.join("report"), "stratified")?;
    let diagram = DiagramData {
        geometry: diagram_geometry(),
        points: rep.cells.iter().map(|c| c.point()).collect(),
    };
    write_json(dir, "report/diagram.json", &diagram)?;
    let cal = Calibrators::load(&dir.join("calibration"))?;
    let methods = calibration_methods(cfg);
    let mut index = Vec::with_capacity(s.test.len());
    for (((sc, tp), z), p) in s.test.iter().zip(&types).zip(&logits).zip(&preds) {
        let bundle = write_case(dir, sc, tp, z, p, &cal, &methods, |lead| {
            rep.cell(tp.predicted, lead).row()
        })?;
        index.push(CaseSummary {
            id: bundle.id.clone(),
            rain_type: bundle.rain_type,
            predicted_type: tp.predicted,
            rain_leads: bundle.rain_leads.clone(),
        });
    }
    write_json(dir, "cases/index.json", &index)?;
    Ok(vec![
        art("report_csv", "report/stratified.csv"),
        art("report_json", "report/stratified.json"),
        art("diagram", "report/diagram.json"),
        art("cases", "cases/index.json"),
    ])
}

fn write_grid(dir: &Path, name: &str, h: usize, w: usize, lead: Option<u8>, values: Vec<f64>) -> Result<()> {
    let mut header = Header::new(name, vec![h, w]);
    if let Some(l) = lead {
        header = header.with_lead_time(l);
    }
    Grdf::new(header, values)?.write(&dir.join(format!("{name}.grdf")))
}

fn class_values(c: &ClassGrid) -> Vec<f64> {
    c.labels().iter().map(|v| *v as f64).collect()
}

fn conf_values(c: &ConfidenceGrid) -> Vec<f64> {
    c.values.clone()
}

/// Smooth synthetic elevation in metres over normalized coordinates.
pub fn terrain_proxy(h: usize, w: usize) -> Vec<f64> {
    (0..h * w)
        .map(|i| {
            let x = (i % w) as f64 / (w.max(2) - 1) as f64;
            let y = (i / w) as f64 / (h.max(2) - 1) as f64;
            let ridge = (-((x - 0.3) * (x - 0.3) + (y - 0.4) * (y - 0.4)) / 0.05).exp();
            let slope = 0.5 * (1.0 - x);
            (1200.0 * ridge + 300.0 * slope).round()
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn write_case(
    run_dir: &Path,
    sc: &Scenario,
    tp: &TypePrediction,
    logits: &[crate::grid::LogitGrid],
    preds: &[ClassGrid],
    cal: &Calibrators,
    methods: &[CalibrationMethod],
    metrics: impl Fn(u8) -> ReportRow,
) -> Result<CaseBundle> {
    let dir = run_dir.join("cases").join(&sc.id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (h, w) = sc.dims();
    Grdf::from_tensor("input", sc.inputs.tensor()).write(&dir.join("input.grdf"))?;
    write_grid(&dir, "mask", h, w, None, sc.mask.valid().iter().map(|v| *v as u8 as f64).collect())?;
    let mut leads = Vec::with_capacity(LEAD_TIMES);
    let mut rain_leads = Vec::new();
    for k in 0..LEAD_TIMES {
        let lead = k as u8 + 1;
        let truth = rain_to_classes(&sc.truth[k])?;
        if sc.mask.indices().any(|i| truth.labels()[i] > 0) {
            rain_leads.push(lead);
        }
        let prediction = format!("prediction_lead{lead}");
        let truth_name = format!("truth_lead{lead}");
        write_grid(&dir, &prediction, h, w, Some(lead), class_values(&preds[k]))?;
        write_grid(&dir, &truth_name, h, w, Some(lead), class_values(&truth))?;
        let lc = cal.lead(lead)?;
        let mut confidence = BTreeMap::new();
        let mut classes = BTreeMap::new();
        for &m in methods {
            let out = lc.calibrate(m, sc.inputs.tensor(), &logits[k])?;
            let cname = format!("confidence_{}_lead{lead}", m.name());
            write_grid(&dir, &cname, h, w, Some(lead), conf_values(&out.confidence))?;
            confidence.insert(m.name().to_string(), cname);
            // class grids are shared with the prediction when they agree
            let kname = if out.classes == preds[k] {
                prediction.clone()
            } else {
                let n = format!("classes_{}_lead{lead}", m.name());
                write_grid(&dir, &n, h, w, Some(lead), class_values(&out.classes))?;
                n
            };
            classes.insert(m.name().to_string(), kname);
        }
        leads.push(LeadGrids {
            lead_time: lead,
            prediction,
            truth: truth_name,
            confidence,
            classes,
            metrics: metrics(lead),
        });
    }
    let latest = crate::grid::RainField::new(
        h,
        w,
        sc.inputs.tensor().channel(crate::grid::RADAR_CHANNELS - 1).to_vec(),
        sc.spec.issue_time,
    )?;
    write_grid(&dir, "terrain", h, w, None, terrain_proxy(h, w))?;
    write_grid(&dir, "coverage", h, w, None, sc.mask.valid().iter().map(|v| *v as u8 as f64).collect())?;
    write_grid(&dir, "reflectivity", h, w, None, latest.to_dbz())?;
    let supplementary = vec![
        SupplementaryLayer {
            name: "terrain".into(),
            description: "Synthetic terrain elevation proxy, metres".into(),
            grid: "terrain".into(),
            model_input: false,
        },
        SupplementaryLayer {
            name: "coverage".into(),
            description: "Radar coverage: 1 inside the observed disk, 0 outside".into(),
            grid: "coverage".into(),
            model_input: false,
        },
        SupplementaryLayer {
            name: "reflectivity".into(),
            description: "Latest radar frame as reflectivity, dBZ".into(),
            grid: "reflectivity".into(),
            model_input: false,
        },
    ];
    let bundle = CaseBundle {
        id: sc.id.clone(),
        rain_type: sc.label,
        classifier: tp.clone(),
        height: h,
        width: w,
        issue_time: sc.spec.issue_time,
        input: "input".into(),
        mask: "mask".into(),
        leads,
        supplementary,
        rain_leads,
    };
    write_json(&dir, "bundle.json", &bundle)?;
    Ok(bundle)
}

/// Loads the classifier stored with a run.
pub fn load_classifier(store: &Store, run_id: &str) -> Result<ClassifierParams> {
    ClassifierParams::load(&store.run_dir(run_id).join("model"))
}
