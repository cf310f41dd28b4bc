//! Dense grid containers and the per-pixel class/probability types built on them.
//!
//! All grids are row-major. Multi-channel grids are laid out channel-major
//! (`c * H * W + y * W + x`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of precipitation classes (no rain, light, heavy).
pub const NUM_CLASSES: usize = 3;
/// Channels in the fused model input.
pub const INPUT_CHANNELS: usize = 12;
/// Radar frames in the fused model input (channels `0..7`).
pub const RADAR_CHANNELS: usize = 7;
/// Forecast lead times, in hours (`1..=6`).
pub const LEAD_TIMES: usize = 6;
/// Smallest supported grid side.
pub const MIN_SIDE: usize = 8;

/// Lower bound of light rain, mm/hr.
pub const LIGHT_RAIN_MM_HR: f64 = 1.0;
/// Lower bound of heavy rain, mm/hr.
pub const HEAVY_RAIN_MM_HR: f64 = 10.0;

/// A `C×H×W` block of `f64` values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: [usize; 3],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            shape: [c, h, w],
            data: vec![0.0; c * h * w],
        }
    }

    pub fn filled(c: usize, h: usize, w: usize, value: f64) -> Self {
        Tensor {
            shape: [c, h, w],
            data: vec![value; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::ShapeMismatch {
                expected: vec![c, h, w],
                got: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: [c, h, w],
            data,
        })
    }

    #[inline]
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.shape[1] * self.shape[2]
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = (c * self.shape[1] + y) * self.shape[2] + x;
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Stacks the given tensors along the channel axis.
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("concat of zero tensors".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.data.len()).sum());
        let mut c = 0;
        for t in parts {
            if t.height() != h || t.width() != w {
                return Err(Error::ShapeMismatch {
                    expected: vec![t.channels(), h, w],
                    got: t.shape.to_vec(),
                });
            }
            data.extend_from_slice(&t.data);
            c += t.channels();
        }
        Ok(Tensor {
            shape: [c, h, w],
            data,
        })
    }

    /// Rounds every value to the nearest `f32`, so the tensor survives a
    /// round trip through the on-disk format unchanged.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

/// Rain rate on a grid, mm/hr.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RainField {
    height: usize,
    width: usize,
    values: Vec<f64>,
    /// Minutes since the Unix epoch.
    pub timestamp: i64,
}

impl RainField {
    pub fn new(height: usize, width: usize, values: Vec<f64>, timestamp: i64) -> Result<Self> {
        check_side(height, width)?;
        if values.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: vec![height, width],
                got: vec![values.len()],
            });
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite rain rate {v}")));
        }
        if let Some(v) = values.iter().find(|v| **v < 0.0) {
            return Err(Error::InvalidInput(format!("negative rain rate {v}")));
        }
        Ok(RainField {
            height,
            width,
            values,
            timestamp,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Radar reflectivity in dBZ via the Marshall–Palmer relation `Z = 200 R^1.6`.
    /// Display only; the model consumes rain rates directly.
    pub fn to_dbz(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|&r| {
                if r <= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    10.0 * (200.0 * r.powf(1.6)).log10()
                }
            })
            .collect()
    }
}

/// Precipitation class of a single pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum RainClass {
    NoRain = 0,
    Light = 1,
    Heavy = 2,
}

impl RainClass {
    pub const ALL: [RainClass; NUM_CLASSES] = [RainClass::NoRain, RainClass::Light, RainClass::Heavy];

    pub fn from_rate(rate: f64) -> RainClass {
        if rate >= HEAVY_RAIN_MM_HR {
            RainClass::Heavy
        } else if rate >= LIGHT_RAIN_MM_HR {
            RainClass::Light
        } else {
            RainClass::NoRain
        }
    }

    pub fn from_index(i: usize) -> Option<RainClass> {
        Self::ALL.get(i).copied()
    }

    /// A rate inside the class interval (midpoint; 20 mm/hr for the open heavy class).
    pub fn representative_rate(self) -> f64 {
        match self {
            RainClass::NoRain => 0.5,
            RainClass::Light => 5.5,
            RainClass::Heavy => 20.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            RainClass::NoRain => "no rain",
            RainClass::Light => "light rain",
            RainClass::Heavy => "heavy rain",
        }
    }
}

/// Per-pixel class labels in `{0, 1, 2}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassGrid {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl ClassGrid {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: vec![height, width],
                got: vec![labels.len()],
            });
        }
        if let Some(l) = labels.iter().find(|l| **l as usize >= NUM_CLASSES) {
            return Err(Error::InvalidInput(format!("class label {l} outside 0..3")));
        }
        Ok(ClassGrid {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, class: RainClass) -> Self {
        ClassGrid {
            height,
            width,
            labels: vec![class as u8; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// True where the radar has effective coverage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityMask {
    height: usize,
    width: usize,
    valid: Vec<bool>,
}

impl ValidityMask {
    pub fn new(height: usize, width: usize, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: vec![height, width],
                got: vec![valid.len()],
            });
        }
        if !valid.iter().any(|v| *v) {
            return Err(Error::InvalidInput("mask has no valid cell".into()));
        }
        Ok(ValidityMask {
            height,
            width,
            valid,
        })
    }

    pub fn all_valid(height: usize, width: usize) -> Self {
        ValidityMask {
            height,
            width,
            valid: vec![true; height * width],
        }
    }

    /// Disk of radius `0.95 * min(H, W) / 2` around the grid centre.
    pub fn radar_disk(height: usize, width: usize) -> Self {
        let radius = 0.95 * height.min(width) as f64 / 2.0;
        let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
        let valid = (0..height * width)
            .map(|i| {
                let (y, x) = ((i / width) as f64, (i % width) as f64);
                (y - cy).hypot(x - cx) <= radius
            })
            .collect();
        ValidityMask {
            height,
            width,
            valid,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    pub fn count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.valid
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.then_some(i))
    }
}

/// The 12-channel early-fusion input: 7 radar frames (oldest first), then
/// longitude, latitude, year, month and day-of-year encodings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedInput(Tensor);

impl FusedInput {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.channels() != INPUT_CHANNELS {
            return Err(Error::ShapeMismatch {
                expected: vec![INPUT_CHANNELS, t.height(), t.width()],
                got: t.shape().to_vec(),
            });
        }
        check_side(t.height(), t.width())?;
        if !t.is_finite() {
            return Err(Error::InvalidInput("non-finite input value".into()));
        }
        let n = t.plane_len();
        if t.data()[..RADAR_CHANNELS * n].iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidInput("negative radar value".into()));
        }
        if t.data()[RADAR_CHANNELS * n..]
            .iter()
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::InvalidInput(
                "spatial/temporal channel outside [0, 1]".into(),
            ));
        }
        Ok(FusedInput(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.0.height(), self.0.width())
    }

    /// Same input with every radar channel zeroed: the "no echo" reference.
    pub fn zero_radar(&self) -> FusedInput {
        let mut t = self.0.clone();
        let n = t.plane_len();
        t.data_mut()[..RADAR_CHANNELS * n].fill(0.0);
        FusedInput(t)
    }
}

/// Class logits at one lead time, `3×H×W`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitGrid {
    pub z: Tensor,
    pub lead_time: u8,
}

impl LogitGrid {
    pub fn new(z: Tensor, lead_time: u8) -> Result<Self> {
        if z.channels() != NUM_CLASSES {
            return Err(Error::ShapeMismatch {
                expected: vec![NUM_CLASSES, z.height(), z.width()],
                got: z.shape().to_vec(),
            });
        }
        check_lead(lead_time)?;
        if !z.is_finite() {
            return Err(Error::InvalidInput("non-finite logit".into()));
        }
        Ok(LogitGrid { z, lead_time })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.z.height(), self.z.width())
    }

    /// Logit vector of pixel `i`.
    #[inline]
    pub fn pixel(&self, i: usize) -> [f64; NUM_CLASSES] {
        let n = self.z.plane_len();
        let d = self.z.data();
        [d[i], d[n + i], d[2 * n + i]]
    }

    pub fn softmax(&self) -> ProbGrid {
        self.softmax_scaled(|_| 1.0)
    }

    /// Softmax of `z_i / t(i)` at every pixel `i`. `t` must be positive.
    pub fn softmax_scaled(&self, t: impl Fn(usize) -> f64) -> ProbGrid {
        let (h, w) = self.dims();
        let n = h * w;
        let mut p = Tensor::zeros(NUM_CLASSES, h, w);
        let out = p.data_mut();
        for i in 0..n {
            let ti = t(i);
            let z = self.pixel(i);
            let s = softmax3([z[0] / ti, z[1] / ti, z[2] / ti]);
            for k in 0..NUM_CLASSES {
                out[k * n + i] = s[k];
            }
        }
        ProbGrid {
            p,
            lead_time: self.lead_time,
        }
    }
}

/// Class probabilities at one lead time, `3×H×W`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbGrid {
    pub p: Tensor,
    pub lead_time: u8,
}

impl ProbGrid {
    #[inline]
    pub fn pixel(&self, i: usize) -> [f64; NUM_CLASSES] {
        let n = self.p.plane_len();
        let d = self.p.data();
        [d[i], d[n + i], d[2 * n + i]]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.p.height(), self.p.width())
    }

    /// Per-pixel maximum probability.
    pub fn confidence(&self) -> ConfidenceGrid {
        let (h, w) = self.dims();
        let values = (0..h * w)
            .map(|i| {
                let p = self.pixel(i);
                p[0].max(p[1]).max(p[2])
            })
            .collect();
        ConfidenceGrid {
            height: h,
            width: w,
            values,
            lead_time: self.lead_time,
        }
    }
}

/// Per-pixel confidence of the predicted class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceGrid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub lead_time: u8,
}

/// Numerically stable softmax of one logit vector.
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::InvalidInput("softmax of empty vector".into()));
    }
    if let Some(v) = z.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite logit {v}")));
    }
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

#[inline]
pub(crate) fn softmax3(z: [f64; 3]) -> [f64; 3] {
    let m = z[0].max(z[1]).max(z[2]);
    let e = [(z[0] - m).exp(), (z[1] - m).exp(), (z[2] - m).exp()];
    let s = e[0] + e[1] + e[2];
    [e[0] / s, e[1] / s, e[2] / s]
}

/// Index of the largest entry; ties go to the lowest index.
#[inline]
pub fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn rain_to_classes(field: &RainField) -> Result<ClassGrid> {
    if let Some(v) = field.values.iter().find(|v| **v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidInput(format!("invalid rain rate {v}")));
    }
    let labels = field
        .values
        .iter()
        .map(|r| RainClass::from_rate(*r) as u8)
        .collect();
    ClassGrid::new(field.height, field.width, labels)
}

pub fn argmax_class(p: &ProbGrid) -> ClassGrid {
    let (h, w) = p.dims();
    let labels = (0..h * w).map(|i| argmax_lowest(&p.pixel(i)) as u8).collect();
    ClassGrid {
        height: h,
        width: w,
        labels,
    }
}

/// Argmax over raw logits; identical to `argmax_class(softmax(z))` since
/// softmax is monotone, but avoids the exponentials.
pub fn argmax_logits(z: &LogitGrid) -> ClassGrid {
    let (h, w) = z.dims();
    let labels = (0..h * w).map(|i| argmax_lowest(&z.pixel(i)) as u8).collect();
    ClassGrid {
        height: h,
        width: w,
        labels,
    }
}

pub(crate) fn check_side(h: usize, w: usize) -> Result<()> {
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::InvalidInput(format!(
            "grid {h}x{w} smaller than {MIN_SIDE}x{MIN_SIDE}"
        )));
    }
    Ok(())
}

pub(crate) fn check_lead(lead_time: u8) -> Result<()> {
    if !(1..=LEAD_TIMES as u8).contains(&lead_time) {
        return Err(Error::InvalidInput(format!(
            "lead time {lead_time} outside 1..=6"
        )));
    }
    Ok(())
}
