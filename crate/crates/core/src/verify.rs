//! Dual-threshold forecast verification: modified POD/FAR/F1, success
//! ratio, CSI and frequency bias, plus performance-diagram data.
//!
//! Every metric is computed in exact rational arithmetic from integer
//! counts and only converted to `f64` at the edge.

use std::path::Path;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::datagen::{RainType, Scenario};
use crate::error::{Error, Result};
use crate::grid::{rain_to_classes, ClassGrid, ValidityMask, LEAD_TIMES};

/// Exact metric value.
pub type Q = Ratio<i128>;

pub fn q_to_f64(q: &Q) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Threshold {
    /// Classes light and heavy count as positive.
    Over1mm,
    /// Only heavy counts as positive.
    Over10mm,
}

impl Threshold {
    pub fn min_class(self) -> u8 {
        match self {
            Threshold::Over1mm => 1,
            Threshold::Over10mm => 2,
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            Threshold::Over1mm => "1mm",
            Threshold::Over10mm => "10mm",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdConfusion {
    pub threshold: Threshold,
    pub hit: u64,
    pub miss: u64,
    pub false_alarm: u64,
    pub correct_negative: u64,
}

fn ratio(num: u64, den: u64) -> Option<Q> {
    (den > 0).then(|| Q::new(num as i128, den as i128))
}

impl ThresholdConfusion {
    pub fn empty(threshold: Threshold) -> Self {
        ThresholdConfusion {
            threshold,
            hit: 0,
            miss: 0,
            false_alarm: 0,
            correct_negative: 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.hit + self.miss + self.false_alarm + self.correct_negative
    }

    pub fn add(&mut self, other: &ThresholdConfusion) {
        debug_assert_eq!(self.threshold, other.threshold);
        self.hit += other.hit;
        self.miss += other.miss;
        self.false_alarm += other.false_alarm;
        self.correct_negative += other.correct_negative;
    }

    pub fn pod(&self) -> Option<Q> {
        ratio(self.hit, self.hit + self.miss)
    }

    pub fn far(&self) -> Option<Q> {
        ratio(self.false_alarm, self.false_alarm + self.hit)
    }

    pub fn success_ratio(&self) -> Option<Q> {
        self.far().map(|f| Q::from_integer(1) - f)
    }

    pub fn f1(&self) -> Option<Q> {
        ratio(2 * self.hit, 2 * self.hit + self.miss + self.false_alarm)
    }

    /// Success ratio, POD, CSI and bias at this threshold; `None` unless
    /// both POD and FAR are defined.
    pub fn point(&self) -> Option<ExactPoint> {
        let pod = self.pod()?;
        let sr = self.success_ratio()?;
        let zero = Q::from_integer(0);
        let one = Q::from_integer(1);
        let csi = if pod == zero || sr == zero {
            zero
        } else {
            one / (one / sr + one / pod - one)
        };
        // When SR is zero there are no hits, so POD/SR is 0/0 and the bias
        // falls back to its count form.
        let bias = if sr == zero {
            Q::new(
                (self.hit + self.false_alarm) as i128,
                (self.hit + self.miss) as i128,
            )
        } else {
            pod / sr
        };
        Some(ExactPoint {
            success_ratio: sr,
            pod,
            csi,
            bias,
        })
    }
}

/// Counts at 1 and 10 mm/hr over the valid pixels of one grid pair.
pub fn confusions(
    pred: &ClassGrid,
    truth: &ClassGrid,
    mask: &ValidityMask,
) -> Result<(ThresholdConfusion, ThresholdConfusion)> {
    if pred.dims() != truth.dims() || pred.dims() != (mask.height(), mask.width()) {
        return Err(Error::InvalidInput(format!(
            "confusion shapes differ: pred {:?}, truth {:?}, mask {:?}",
            pred.dims(),
            truth.dims(),
            (mask.height(), mask.width())
        )));
    }
    let mut out = [Threshold::Over1mm, Threshold::Over10mm].map(ThresholdConfusion::empty);
    let (p, t) = (pred.labels(), truth.labels());
    for i in mask.indices() {
        for c in &mut out {
            let k = c.threshold.min_class();
            match (p[i] >= k, t[i] >= k) {
                (true, true) => c.hit += 1,
                (false, true) => c.miss += 1,
                (true, false) => c.false_alarm += 1,
                (false, false) => c.correct_negative += 1,
            }
        }
    }
    let [c1, c10] = out;
    Ok((c1, c10))
}

/// Threshold-averaged metric. A threshold whose term is undefined drops out
/// and the result is flagged partial.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Defined(Q),
    Partial { value: Q, dropped: Threshold },
    Undefined,
}

impl Metric {
    fn combine(t1: Option<Q>, t10: Option<Q>) -> Metric {
        match (t1, t10) {
            (Some(a), Some(b)) => Metric::Defined((a + b) / Q::from_integer(2)),
            (Some(a), None) => Metric::Partial {
                value: a,
                dropped: Threshold::Over10mm,
            },
            (None, Some(b)) => Metric::Partial {
                value: b,
                dropped: Threshold::Over1mm,
            },
            (None, None) => Metric::Undefined,
        }
    }

    pub fn ratio(&self) -> Option<Q> {
        match self {
            Metric::Defined(v) | Metric::Partial { value: v, .. } => Some(*v),
            Metric::Undefined => None,
        }
    }

    pub fn value(&self) -> Option<f64> {
        self.ratio().map(|q| q_to_f64(&q))
    }

    pub fn is_partial(&self) -> bool {
        matches!(self, Metric::Partial { .. })
    }
}

pub fn modified_pod(c1: &ThresholdConfusion, c10: &ThresholdConfusion) -> Metric {
    Metric::combine(c1.pod(), c10.pod())
}

pub fn modified_far(c1: &ThresholdConfusion, c10: &ThresholdConfusion) -> Metric {
    Metric::combine(c1.far(), c10.far())
}

pub fn modified_f1(c1: &ThresholdConfusion, c10: &ThresholdConfusion) -> Metric {
    Metric::combine(c1.f1(), c10.f1())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExactPoint {
    pub success_ratio: Q,
    pub pod: Q,
    pub csi: Q,
    pub bias: Q,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Group {
    pub rain_type: RainType,
    pub lead_time: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagramPoint {
    pub success_ratio: f64,
    pub pod: f64,
    pub csi: f64,
    pub bias: f64,
    pub group: Group,
    /// Only one threshold contributed.
    pub partial: bool,
}

/// Threshold-averaged diagram coordinates over the thresholds whose own
/// point is defined; `None` if neither is.
pub fn exact_diagram_point(
    c1: &ThresholdConfusion,
    c10: &ThresholdConfusion,
) -> Option<(ExactPoint, bool)> {
    let pts: Vec<ExactPoint> = [c1.point(), c10.point()].into_iter().flatten().collect();
    if pts.is_empty() {
        return None;
    }
    let n = Q::from_integer(pts.len() as i128);
    let mean = |f: fn(&ExactPoint) -> Q| pts.iter().map(f).sum::<Q>() / n;
    Some((
        ExactPoint {
            success_ratio: mean(|p| p.success_ratio),
            pod: mean(|p| p.pod),
            csi: mean(|p| p.csi),
            bias: mean(|p| p.bias),
        },
        pts.len() == 1,
    ))
}

pub fn diagram_point(
    c1: &ThresholdConfusion,
    c10: &ThresholdConfusion,
    group: Group,
) -> Option<DiagramPoint> {
    let (p, partial) = exact_diagram_point(c1, c10)?;
    Some(DiagramPoint {
        success_ratio: q_to_f64(&p.success_ratio),
        pod: q_to_f64(&p.pod),
        csi: q_to_f64(&p.csi),
        bias: q_to_f64(&p.bias),
        group,
        partial,
    })
}

/// Pooled confusions and metrics for one (rain type, lead time) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportCell {
    pub group: Group,
    pub samples: usize,
    pub c1: ThresholdConfusion,
    pub c10: ThresholdConfusion,
}

impl ReportCell {
    pub fn pod(&self) -> Metric {
        modified_pod(&self.c1, &self.c10)
    }

    pub fn far(&self) -> Metric {
        modified_far(&self.c1, &self.c10)
    }

    pub fn f1(&self) -> Metric {
        modified_f1(&self.c1, &self.c10)
    }

    pub fn point(&self) -> Option<DiagramPoint> {
        if self.samples == 0 {
            return None;
        }
        diagram_point(&self.c1, &self.c10, self.group)
    }

    pub fn row(&self) -> ReportRow {
        let empty = self.samples == 0;
        let m = |m: Metric| if empty { None } else { m.value() };
        let pt = self.point();
        let mut flags = Vec::new();
        if empty {
            flags.push("empty".to_string());
        }
        for (name, metric) in [("pod", self.pod()), ("far", self.far()), ("f1", self.f1())] {
            if let Metric::Partial { dropped, .. } = metric {
                flags.push(format!("{name}_{}_undefined", dropped.suffix()));
            }
        }
        if pt.is_some_and(|p| p.partial) {
            flags.push("diagram_partial".into());
        }
        ReportRow {
            rain_type: self.group.rain_type,
            lead_time: self.group.lead_time,
            samples: self.samples,
            hit_1mm: self.c1.hit,
            miss_1mm: self.c1.miss,
            false_alarm_1mm: self.c1.false_alarm,
            correct_negative_1mm: self.c1.correct_negative,
            hit_10mm: self.c10.hit,
            miss_10mm: self.c10.miss,
            false_alarm_10mm: self.c10.false_alarm,
            correct_negative_10mm: self.c10.correct_negative,
            pod: m(self.pod()),
            far: m(self.far()),
            f1: m(self.f1()),
            success_ratio: pt.map(|p| p.success_ratio),
            csi: pt.map(|p| p.csi),
            bias: pt.map(|p| p.bias),
            flags: flags.join(";"),
        }
    }
}

/// Flat export row; undefined values are empty in CSV and `null` in JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub rain_type: RainType,
    pub lead_time: u8,
    pub samples: usize,
    pub hit_1mm: u64,
    pub miss_1mm: u64,
    pub false_alarm_1mm: u64,
    pub correct_negative_1mm: u64,
    pub hit_10mm: u64,
    pub miss_10mm: u64,
    pub false_alarm_10mm: u64,
    pub correct_negative_10mm: u64,
    pub pod: Option<f64>,
    pub far: Option<f64>,
    pub f1: Option<f64>,
    pub success_ratio: Option<f64>,
    pub csi: Option<f64>,
    pub bias: Option<f64>,
    pub flags: String,
}

/// 6 rain types × 6 lead times, type-major.
#[derive(Clone, Debug, PartialEq)]
pub struct StratifiedReport {
    pub cells: Vec<ReportCell>,
}

impl StratifiedReport {
    pub fn cell(&self, rain_type: RainType, lead_time: u8) -> &ReportCell {
        &self.cells[rain_type.index() * LEAD_TIMES + lead_time as usize - 1]
    }

    pub fn rows(&self) -> Vec<ReportRow> {
        self.cells.iter().map(ReportCell::row).collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in self.rows() {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.rows())?)
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join(format!("{stem}.json"));
        std::fs::write(&json_path, self.to_json()?).map_err(|e| Error::io(&json_path, e))
    }
}

/// Pools confusions per (type, lead time) before computing any metric.
/// `preds[s][k]` is the class forecast of sample `s` at lead `k + 1`, and
/// `labels[s]` the type the sample is reported under.
pub fn stratified_report(
    preds: &[Vec<ClassGrid>],
    test: &[Scenario],
    labels: &[RainType],
) -> Result<StratifiedReport> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if preds.len() != test.len() || labels.len() != test.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions and {} labels for {} scenarios",
            preds.len(),
            labels.len(),
            test.len()
        )));
    }
    let mut cells = Vec::with_capacity(RainType::ALL.len() * LEAD_TIMES);
    for rain_type in RainType::ALL {
        for k in 0..LEAD_TIMES {
            cells.push(ReportCell {
                group: Group {
                    rain_type,
                    lead_time: k as u8 + 1,
                },
                samples: 0,
                c1: ThresholdConfusion::empty(Threshold::Over1mm),
                c10: ThresholdConfusion::empty(Threshold::Over10mm),
            });
        }
    }
    for ((p, s), t) in preds.iter().zip(test).zip(labels) {
        let by_lead = lead_confusions(p, s)?;
        for (k, (c1, c10)) in by_lead.iter().enumerate() {
            let cell = &mut cells[t.index() * LEAD_TIMES + k];
            cell.samples += 1;
            cell.c1.add(c1);
            cell.c10.add(c10);
        }
    }
    Ok(StratifiedReport { cells })
}

/// Confusions of one sample at every lead time.
pub fn lead_confusions(
    preds: &[ClassGrid],
    s: &Scenario,
) -> Result<Vec<(ThresholdConfusion, ThresholdConfusion)>> {
    if preds.len() != LEAD_TIMES || s.truth.len() != LEAD_TIMES {
        return Err(Error::InvalidInput(format!(
            "expected {LEAD_TIMES} lead times, got {} forecasts and {} truths",
            preds.len(),
            s.truth.len()
        )));
    }
    preds
        .iter()
        .zip(&s.truth)
        .map(|(p, t)| confusions(p, &rain_to_classes(t)?, &s.mask))
        .collect()
}

/// Pooled modified F1 per lead time over all samples.
pub fn f1_by_lead(preds: &[Vec<ClassGrid>], test: &[Scenario]) -> Result<Vec<Metric>> {
    let mut pooled = vec![
        (
            ThresholdConfusion::empty(Threshold::Over1mm),
            ThresholdConfusion::empty(Threshold::Over10mm)
        );
        LEAD_TIMES
    ];
    for (p, s) in preds.iter().zip(test) {
        for (acc, (c1, c10)) in pooled.iter_mut().zip(lead_confusions(p, s)?) {
            acc.0.add(&c1);
            acc.1.add(&c10);
        }
    }
    Ok(pooled.iter().map(|(a, b)| modified_f1(a, b)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub value: f64,
    /// `[success_ratio, pod]` pairs.
    pub points: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagramGeometry {
    pub csi_contours: Vec<Polyline>,
    pub bias_rays: Vec<Polyline>,
}

pub const BIAS_RAYS: [f64; 10] = [0.3, 0.5, 0.8, 1.0, 1.3, 1.5, 2.0, 3.0, 5.0, 10.0];
const CONTOUR_POINTS: usize = 50;

/// CSI iso-lines at 0.1 steps and the standard bias rays, in the unit
/// square of (success ratio, POD).
pub fn diagram_geometry() -> DiagramGeometry {
    let csi_contours = (1..10)
        .map(|i| {
            let csi = i as f64 / 10.0;
            let points = (0..=CONTOUR_POINTS)
                .map(|j| {
                    let sr = csi + (1.0 - csi) * j as f64 / CONTOUR_POINTS as f64;
                    let pod = 1.0 / (1.0 / csi + 1.0 - 1.0 / sr);
                    [sr, pod.min(1.0)]
                })
                .collect();
            Polyline { value: csi, points }
        })
        .collect();
    let bias_rays = BIAS_RAYS
        .iter()
        .map(|&b| Polyline {
            value: b,
            points: vec![[0.0, 0.0], [(1.0 / b).min(1.0), b.min(1.0)]],
        })
        .collect();
    DiagramGeometry {
        csi_contours,
        bias_rays,
    }
}
