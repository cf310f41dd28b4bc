//! Post-hoc confidence calibration per lead time: temperature scaling,
//! local (per-pixel) temperature scaling, Platt scaling and histogram
//! binning, evaluated with the expected calibration error.

mod binning;
mod ece;
mod lts;
mod platt;
mod temperature;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use binning::{fit_histogram_binning, BinningTable};
pub use ece::{
    bin_index, ece, ece_sampled, pixel_samples, reliability_diagram, Bin, EceSampling,
    ReliabilityBins, SampledEce, DEFAULT_BINS,
};
pub use lts::{
    field_nll, fit_local_temperature, lts_architecture, temperature_of, LtsConfig, LtsLog,
    LtsSample, TemperatureField, T_FLOOR,
};
pub use platt::{fit_binary, fit_platt, PlattParams};
pub use temperature::{
    apply_temperature, fit_temperature, golden_section, temperature_nll, TemperatureScalar,
    T_MAX, T_MIN,
};

use crate::datagen::read_json;
use crate::error::{Error, Result};
use crate::grid::{
    argmax_class, argmax_logits, ClassGrid, ConfidenceGrid, LogitGrid, Tensor, ValidityMask,
    LEAD_TIMES, NUM_CLASSES,
};
use crate::verify::{confusions, modified_f1, Threshold, ThresholdConfusion};

/// Flattened valid pixels of one lead time: logits and true class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PixelSet {
    pub logits: Vec<[f64; NUM_CLASSES]>,
    pub labels: Vec<u8>,
}

impl PixelSet {
    pub fn from_grids<'a>(
        items: impl IntoIterator<Item = (&'a LogitGrid, &'a ClassGrid, &'a ValidityMask)>,
    ) -> Result<Self> {
        let mut set = PixelSet::default();
        for (z, t, m) in items {
            if z.dims() != t.dims() || t.dims() != (m.height(), m.width()) {
                return Err(Error::InvalidInput("logit, truth and mask shapes differ".into()));
            }
            for i in m.indices() {
                set.logits.push(z.pixel(i));
                set.labels.push(t.labels()[i]);
            }
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// One message per class absent from the labels.
    pub fn degeneracy_warnings(&self) -> Vec<String> {
        let mut seen = [false; NUM_CLASSES];
        for l in &self.labels {
            seen[*l as usize] = true;
        }
        (0..NUM_CLASSES)
            .filter(|k| !seen[*k])
            .map(|k| format!("class {k} absent from the calibration pixels"))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMethod {
    Uncalibrated,
    Temperature,
    LocalTemperature,
    Platt,
    HistogramBinning,
}

impl CalibrationMethod {
    pub const ALL: [CalibrationMethod; 5] = [
        CalibrationMethod::Uncalibrated,
        CalibrationMethod::Temperature,
        CalibrationMethod::LocalTemperature,
        CalibrationMethod::Platt,
        CalibrationMethod::HistogramBinning,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CalibrationMethod::Uncalibrated => "uncalibrated",
            CalibrationMethod::Temperature => "temperature",
            CalibrationMethod::LocalTemperature => "local_temperature",
            CalibrationMethod::Platt => "platt",
            CalibrationMethod::HistogramBinning => "histogram_binning",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "uncalibrated" => Some(CalibrationMethod::Uncalibrated),
            "ts" | "temperature" => Some(CalibrationMethod::Temperature),
            "lts" | "local_temperature" => Some(CalibrationMethod::LocalTemperature),
            "platt" => Some(CalibrationMethod::Platt),
            "binning" | "histogram_binning" => Some(CalibrationMethod::HistogramBinning),
            _ => None,
        }
    }
}

/// Calibrated confidence and the class forecast it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibratedOutput {
    pub classes: ClassGrid,
    pub confidence: ConfidenceGrid,
}

/// Every fitted calibrator of one lead time.
#[derive(Clone, Debug, PartialEq)]
pub struct LeadCalibrators {
    pub lead_time: u8,
    pub temperature: TemperatureScalar,
    pub local_temperature: Option<TemperatureField>,
    pub platt: PlattParams,
    pub binning: BinningTable,
}

impl LeadCalibrators {
    pub fn calibrate(&self, method: CalibrationMethod, x: &Tensor, z: &LogitGrid) -> Result<CalibratedOutput> {
        if z.lead_time != self.lead_time {
            return Err(Error::InvalidInput(format!(
                "calibrators for lead {} applied to lead {}",
                self.lead_time, z.lead_time
            )));
        }
        match method {
            CalibrationMethod::Uncalibrated => Ok(CalibratedOutput {
                classes: argmax_logits(z),
                confidence: z.softmax().confidence(),
            }),
            CalibrationMethod::Temperature => {
                let (p, c) = apply_temperature(z, &self.temperature)?;
                Ok(CalibratedOutput {
                    classes: argmax_class(&p),
                    confidence: c,
                })
            }
            CalibrationMethod::LocalTemperature => {
                let f = self
                    .local_temperature
                    .as_ref()
                    .ok_or_else(|| Error::NotFound(format!("no LTS calibrator for lead {}", self.lead_time)))?;
                let (p, c) = f.apply(x, z)?;
                Ok(CalibratedOutput {
                    classes: argmax_class(&p),
                    confidence: c,
                })
            }
            CalibrationMethod::Platt => {
                let p = self.platt.apply(z);
                Ok(CalibratedOutput {
                    classes: argmax_class(&p),
                    confidence: p.confidence(),
                })
            }
            CalibrationMethod::HistogramBinning => Ok(CalibratedOutput {
                classes: argmax_logits(z),
                confidence: self.binning.apply_grid(&z.softmax().confidence()),
            }),
        }
    }
}

/// One scenario as seen by calibration: input, logits and truth per lead.
#[derive(Clone, Debug)]
pub struct EvalCase {
    pub x: Tensor,
    pub logits: Vec<LogitGrid>,
    pub truths: Vec<ClassGrid>,
    pub mask: ValidityMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitLog {
    pub lead_time: u8,
    pub temperature: f64,
    pub lts: Option<LtsLog>,
    pub warnings: Vec<String>,
}

/// Fits every calibrator on `val` independently per lead time. LTS is
/// skipped when `lts` is `None`.
pub fn fit_calibrators(
    val: &[EvalCase],
    lts: Option<&LtsConfig>,
    bins: usize,
) -> Result<(Calibrators, Vec<FitLog>)> {
    if val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut leads = Vec::with_capacity(LEAD_TIMES);
    let mut logs = Vec::with_capacity(LEAD_TIMES);
    for k in 0..LEAD_TIMES {
        let lead = k as u8 + 1;
        let set = PixelSet::from_grids(val.iter().map(|c| (&c.logits[k], &c.truths[k], &c.mask)))?;
        let temperature = fit_temperature(&set, lead)?;
        let platt = fit_platt(&set, lead)?;
        let (conf, correct) = uncalibrated_samples(val, k)?;
        let binning = fit_histogram_binning(&conf, &correct, bins)?;
        let (local_temperature, lts_log) = match lts {
            Some(cfg) => {
                let samples: Vec<LtsSample> = val
                    .iter()
                    .map(|c| LtsSample {
                        x: c.x.clone(),
                        z: c.logits[k].clone(),
                        truth: c.truths[k].clone(),
                        mask: c.mask.clone(),
                    })
                    .collect();
                let (f, l) = fit_local_temperature(&samples, &samples, lead, cfg)?;
                (Some(f), Some(l))
            }
            None => (None, None),
        };
        log::info!("lead {lead}: T = {:.4}", temperature.t);
        logs.push(FitLog {
            lead_time: lead,
            temperature: temperature.t,
            lts: lts_log,
            warnings: set.degeneracy_warnings(),
        });
        leads.push(LeadCalibrators {
            lead_time: lead,
            temperature,
            local_temperature,
            platt,
            binning,
        });
    }
    Ok((Calibrators { leads }, logs))
}

fn uncalibrated_samples(cases: &[EvalCase], k: usize) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut conf = Vec::new();
    let mut correct = Vec::new();
    for c in cases {
        let (a, b) = pixel_samples(&c.logits[k].softmax(), &c.truths[k], &c.mask)?;
        conf.extend(a);
        correct.extend(b);
    }
    Ok((conf, correct))
}

/// Calibrators for all six lead times.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibrators {
    pub leads: Vec<LeadCalibrators>,
}

impl Calibrators {
    pub fn lead(&self, lead_time: u8) -> Result<&LeadCalibrators> {
        self.leads
            .iter()
            .find(|l| l.lead_time == lead_time)
            .ok_or_else(|| Error::NotFound(format!("no calibrators for lead {lead_time}")))
    }

    /// `<dir>/{ts,platt,binning}_lead<k>.json` and `lts_lead<k>.{grdf,arch.json}`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for l in &self.leads {
            let k = l.lead_time;
            crate::datagen::write_json(&dir.join(format!("ts_lead{k}.json")), &l.temperature)?;
            crate::datagen::write_json(&dir.join(format!("platt_lead{k}.json")), &l.platt)?;
            crate::datagen::write_json(&dir.join(format!("binning_lead{k}.json")), &l.binning)?;
            if let Some(f) = &l.local_temperature {
                f.save(dir, &format!("lts_lead{k}"))?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut leads = Vec::with_capacity(LEAD_TIMES);
        for k in 1..=LEAD_TIMES as u8 {
            let lts_name = format!("lts_lead{k}");
            let local_temperature = if dir.join(format!("{lts_name}.grdf")).exists() {
                Some(TemperatureField::load(dir, &lts_name, k)?)
            } else {
                None
            };
            leads.push(LeadCalibrators {
                lead_time: k,
                temperature: read_json(&dir.join(format!("ts_lead{k}.json")))?,
                local_temperature,
                platt: read_json(&dir.join(format!("platt_lead{k}.json")))?,
                binning: read_json(&dir.join(format!("binning_lead{k}.json")))?,
            });
        }
        Ok(Calibrators { leads })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: CalibrationMethod,
    /// Full-population ECE over all valid pixels.
    pub ece: f64,
    pub ece_sampled: SampledEce,
    pub modified_f1: Option<f64>,
    pub reliability: ReliabilityBins,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EceRow {
    pub lead_time: u8,
    pub scores: Vec<MethodScore>,
}

impl EceRow {
    pub fn score(&self, m: CalibrationMethod) -> Option<&MethodScore> {
        self.scores.iter().find(|s| s.method == m)
    }
}

/// Before/after calibration scores per lead time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EceTable {
    pub bins: usize,
    pub sampling: EceSampling,
    pub rows: Vec<EceRow>,
}

impl EceTable {
    pub fn row(&self, lead_time: u8) -> Option<&EceRow> {
        self.rows.iter().find(|r| r.lead_time == lead_time)
    }

    /// One row per lead time; per method the full ECE, the sampled mean
    /// and the modified F1.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let methods: Vec<CalibrationMethod> = self
            .rows
            .first()
            .map(|r| r.scores.iter().map(|s| s.method).collect())
            .unwrap_or_default();
        let mut header = vec!["lead_time".to_string()];
        for m in &methods {
            header.push(format!("ece_{}", m.name()));
            header.push(format!("ece_sampled_{}", m.name()));
            header.push(format!("f1_{}", m.name()));
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.lead_time.to_string()];
            for m in &methods {
                let s = r.score(*m).ok_or_else(|| Error::Format("ragged ECE table".into()))?;
                rec.push(s.ece.to_string());
                rec.push(s.ece_sampled.mean.to_string());
                rec.push(s.modified_f1.map(|v| v.to_string()).unwrap_or_default());
            }
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Scores each method on `cases`, pooling valid pixels per lead time.
pub fn evaluate_calibration(
    cal: &Calibrators,
    cases: &[EvalCase],
    methods: &[CalibrationMethod],
    bins: usize,
    sampling: &EceSampling,
) -> Result<EceTable> {
    if cases.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rows = Vec::with_capacity(LEAD_TIMES);
    for k in 0..LEAD_TIMES {
        let lead = k as u8 + 1;
        let lc = cal.lead(lead)?;
        let mut scores = Vec::with_capacity(methods.len());
        for &method in methods {
            let mut conf = Vec::new();
            let mut correct = Vec::new();
            let mut c1 = ThresholdConfusion::empty(Threshold::Over1mm);
            let mut c10 = ThresholdConfusion::empty(Threshold::Over10mm);
            for c in cases {
                let out = lc.calibrate(method, &c.x, &c.logits[k])?;
                let t = c.truths[k].labels();
                for i in c.mask.indices() {
                    conf.push(out.confidence.values[i]);
                    correct.push(out.classes.labels()[i] == t[i]);
                }
                let (a, b) = confusions(&out.classes, &c.truths[k], &c.mask)?;
                c1.add(&a);
                c10.add(&b);
            }
            let reliability = reliability_diagram(&conf, &correct, bins)?;
            let sampling = EceSampling {
                length: sampling.length.min(conf.len()),
                ..*sampling
            };
            scores.push(MethodScore {
                method,
                ece: reliability.ece(),
                ece_sampled: ece_sampled(&conf, &correct, bins, &sampling)?,
                modified_f1: modified_f1(&c1, &c10).value(),
                reliability,
            });
        }
        rows.push(EceRow {
            lead_time: lead,
            scores,
        });
    }
    Ok(EceTable {
        bins,
        sampling: *sampling,
        rows,
    })
}
