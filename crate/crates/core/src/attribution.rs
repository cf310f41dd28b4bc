//! Gradient-based output attribution, the incremental-deletion fidelity
//! benchmark and effective receptive-field estimation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grdf::Grdf;
use crate::grid::{
    argmax_logits, ClassGrid, FusedInput, LogitGrid, Tensor, ValidityMask, LEAD_TIMES,
    NUM_CLASSES, RADAR_CHANNELS,
};
use crate::net::{forward_with_gradient, ChannelSum, NetworkParams, RfBox};
use crate::verify::{confusions, modified_f1};

/// Sum of one class's logits over a set of output pixels at one lead time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributionTarget {
    pub lead_time: u8,
    pub target_class: usize,
    /// Flat pixel indices.
    pub region: Vec<usize>,
}

impl AttributionTarget {
    /// All valid pixels.
    pub fn valid_region(lead_time: u8, target_class: usize, mask: &ValidityMask) -> Result<Self> {
        let t = AttributionTarget {
            lead_time,
            target_class,
            region: mask.indices().collect(),
        };
        t.validate(mask)?;
        Ok(t)
    }

    pub fn pixel(lead_time: u8, target_class: usize, y: usize, x: usize, mask: &ValidityMask) -> Result<Self> {
        if y >= mask.height() || x >= mask.width() {
            return Err(Error::InvalidInput(format!("pixel ({y}, {x}) outside the grid")));
        }
        let t = AttributionTarget {
            lead_time,
            target_class,
            region: vec![y * mask.width() + x],
        };
        t.validate(mask)?;
        Ok(t)
    }

    pub fn validate(&self, mask: &ValidityMask) -> Result<()> {
        if !(1..=LEAD_TIMES as u8).contains(&self.lead_time) {
            return Err(Error::InvalidInput(format!("lead time {} outside 1..=6", self.lead_time)));
        }
        if self.target_class >= NUM_CLASSES {
            return Err(Error::InvalidInput(format!("target class {} outside 0..3", self.target_class)));
        }
        if self.region.is_empty() {
            return Err(Error::InvalidInput("empty attribution region".into()));
        }
        let n = mask.height() * mask.width();
        if let Some(i) = self.region.iter().find(|&&i| i >= n || !mask.is_valid(i)) {
            return Err(Error::InvalidInput(format!("region pixel {i} is outside the valid mask")));
        }
        Ok(())
    }

    fn functional(&self) -> ChannelSum {
        ChannelSum {
            output: self.lead_time as usize - 1,
            channel: self.target_class,
            pixels: self.region.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Saliency,
    IntegratedGradients,
    SmoothIntegratedGradients,
    Random,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Saliency,
        Method::IntegratedGradients,
        Method::SmoothIntegratedGradients,
        Method::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Saliency => "saliency",
            Method::IntegratedGradients => "integrated_gradients",
            Method::SmoothIntegratedGradients => "smooth_integrated_gradients",
            Method::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        match s.to_ascii_lowercase().as_str() {
            "saliency" => Some(Method::Saliency),
            "ig" | "integrated_gradients" => Some(Method::IntegratedGradients),
            "smoothig" | "smooth_ig" | "smooth_integrated_gradients" => {
                Some(Method::SmoothIntegratedGradients)
            }
            "random" => Some(Method::Random),
            _ => None,
        }
    }
}

/// Method hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributionConfig {
    pub steps: usize,
    pub n_samples: usize,
    /// SmoothIG noise standard deviation as a fraction of the radar
    /// channels' dynamic range.
    pub noise_fraction: f64,
    pub seed: u64,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            steps: 64,
            n_samples: 16,
            noise_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    /// `12×H×W`, same layout as the input.
    #[serde(skip)]
    pub a: Tensor,
    pub method: Method,
    pub target: AttributionTarget,
    pub steps: Option<usize>,
    pub n_samples: Option<usize>,
    pub noise_sigma: Option<f64>,
    pub seed: Option<u64>,
}

impl AttributionMap {
    fn new(a: Tensor, method: Method, target: &AttributionTarget) -> Self {
        AttributionMap {
            a,
            method,
            target: target.clone(),
            steps: None,
            n_samples: None,
            noise_sigma: None,
            seed: None,
        }
    }

    /// Symmetric color-scale limit for a diverging rendering.
    pub fn color_limit(&self) -> f64 {
        self.a.max_abs()
    }

    /// Writes `<stem>.grdf` (values) and `<stem>.json` (metadata).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let mut g = Grdf::from_tensor("attribution", &self.a);
        g.header.lead_time = Some(self.target.lead_time);
        g.write(&dir.join(format!("{stem}.grdf")))?;
        crate::datagen::write_json(&dir.join(format!("{stem}.json")), self)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let p = dir.join(format!("{stem}.json"));
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let mut m: AttributionMap = serde_json::from_str(&text)?;
        m.a = Grdf::read(&dir.join(format!("{stem}.grdf")))?.to_tensor()?;
        Ok(m)
    }
}

/// Zero radar with the true spatial and temporal channels.
pub fn baseline(x: &FusedInput) -> FusedInput {
    x.zero_radar()
}

fn check(net: &NetworkParams, x: &FusedInput, target: &AttributionTarget) -> Result<()> {
    crate::model::check_segmentation(net)?;
    let (h, w) = x.dims();
    if target.region.iter().any(|&i| i >= h * w) {
        return Err(Error::InvalidInput("attribution region outside the grid".into()));
    }
    if !(1..=LEAD_TIMES as u8).contains(&target.lead_time) || target.target_class >= NUM_CLASSES {
        return Err(Error::InvalidInput("invalid attribution target".into()));
    }
    Ok(())
}

pub fn target_value(net: &NetworkParams, x: &Tensor, target: &AttributionTarget) -> Result<f64> {
    crate::net::evaluate_target(net, x, &target.functional())
}

/// Elementwise absolute gradient.
pub fn saliency(net: &NetworkParams, x: &FusedInput, target: &AttributionTarget) -> Result<AttributionMap> {
    check(net, x, target)?;
    let (_, mut g) = forward_with_gradient(net, x.tensor(), &target.functional())?;
    g.data_mut().iter_mut().for_each(|v| *v = v.abs());
    Ok(AttributionMap::new(g, Method::Saliency, target))
}

fn ig_tensor(
    net: &NetworkParams,
    x: &Tensor,
    x0: &Tensor,
    steps: usize,
    f: &ChannelSum,
) -> Result<Tensor> {
    let [c, h, w] = x.shape();
    let diff: Vec<f64> = x.data().iter().zip(x0.data()).map(|(a, b)| a - b).collect();
    // weighted running mean keeps identical gradients (linear nets) exact
    let mut mean = vec![0.0; diff.len()];
    let mut xs = Tensor::zeros(c, h, w);
    let mut total = 0.0;
    for s in 0..=steps {
        let alpha = s as f64 / steps as f64;
        for ((v, b), d) in xs.data_mut().iter_mut().zip(x0.data()).zip(&diff) {
            *v = b + alpha * d;
        }
        let (_, g) = forward_with_gradient(net, &xs, f)?;
        let weight = if s == 0 || s == steps { 0.5 } else { 1.0 };
        total += weight;
        let r = weight / total;
        for (m, gi) in mean.iter_mut().zip(g.data()) {
            *m += r * (gi - *m);
        }
    }
    let a: Vec<f64> = diff.iter().zip(&mean).map(|(d, m)| d * m).collect();
    Tensor::from_vec(c, h, w, a)
}

/// Integrated gradients from `base` to `x`, trapezoidal rule over `steps`
/// equal intervals (`steps + 1` gradient evaluations).
pub fn integrated_gradients(
    net: &NetworkParams,
    x: &FusedInput,
    base: &FusedInput,
    steps: usize,
    target: &AttributionTarget,
) -> Result<AttributionMap> {
    check(net, x, target)?;
    if steps == 0 {
        return Err(Error::InvalidInput("integrated gradients needs at least one step".into()));
    }
    if x.dims() != base.dims() {
        return Err(Error::ShapeMismatch {
            expected: x.tensor().shape().to_vec(),
            got: base.tensor().shape().to_vec(),
        });
    }
    let a = ig_tensor(net, x.tensor(), base.tensor(), steps, &target.functional())?;
    let mut m = AttributionMap::new(a, Method::IntegratedGradients, target);
    m.steps = Some(steps);
    Ok(m)
}

/// Absolute noise level for SmoothIG: `fraction` of the radar range of `x`.
pub fn noise_sigma(x: &FusedInput, fraction: f64) -> f64 {
    let n = x.tensor().plane_len();
    let radar = &x.tensor().data()[..RADAR_CHANNELS * n];
    let (lo, hi) = radar
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    fraction * (hi - lo)
}

/// Mean of IG maps over inputs with Gaussian noise on the radar channels.
#[allow(clippy::too_many_arguments)]
pub fn smooth_integrated_gradients(
    net: &NetworkParams,
    x: &FusedInput,
    base: &FusedInput,
    steps: usize,
    n_samples: usize,
    sigma: f64,
    seed: u64,
    target: &AttributionTarget,
) -> Result<AttributionMap> {
    if n_samples == 0 {
        return Err(Error::InvalidInput("smooth integrated gradients needs at least one sample".into()));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidInput(format!("noise sigma {sigma} must be finite and non-negative")));
    }
    let mut m = if sigma == 0.0 {
        integrated_gradients(net, x, base, steps, target)?
    } else {
        check(net, x, target)?;
        if steps == 0 {
            return Err(Error::InvalidInput("integrated gradients needs at least one step".into()));
        }
        let f = target.functional();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let n = x.tensor().plane_len();
        let [c, h, w] = x.tensor().shape();
        let mut acc = Tensor::zeros(c, h, w);
        for _ in 0..n_samples {
            let mut xn = x.tensor().clone();
            for v in &mut xn.data_mut()[..RADAR_CHANNELS * n] {
                *v += noise.sample(&mut rng);
            }
            let a = ig_tensor(net, &xn, base.tensor(), steps, &f)?;
            for (s, v) in acc.data_mut().iter_mut().zip(a.data()) {
                *s += v;
            }
        }
        acc.data_mut().iter_mut().for_each(|v| *v /= n_samples as f64);
        AttributionMap::new(acc, Method::SmoothIntegratedGradients, target)
    };
    m.method = Method::SmoothIntegratedGradients;
    m.steps = Some(steps);
    m.n_samples = Some(n_samples);
    m.noise_sigma = Some(sigma);
    m.seed = Some(seed);
    Ok(m)
}

/// Uniform noise in `[0, 1)`; the chance-level reference for deletion.
pub fn random_attribution(x: &FusedInput, seed: u64, target: &AttributionTarget) -> AttributionMap {
    let [c, h, w] = x.tensor().shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random::<f64>()).collect())
        .expect("shape matches");
    let mut m = AttributionMap::new(a, Method::Random, target);
    m.seed = Some(seed);
    m
}

/// Dispatches on `method` with the baseline and noise policy above.
pub fn attribute(
    net: &NetworkParams,
    x: &FusedInput,
    method: Method,
    target: &AttributionTarget,
    cfg: &AttributionConfig,
) -> Result<AttributionMap> {
    let base = baseline(x);
    match method {
        Method::Saliency => saliency(net, x, target),
        Method::IntegratedGradients => integrated_gradients(net, x, &base, cfg.steps, target),
        Method::SmoothIntegratedGradients => smooth_integrated_gradients(
            net,
            x,
            &base,
            cfg.steps,
            cfg.n_samples,
            noise_sigma(x, cfg.noise_fraction),
            cfg.seed,
            target,
        ),
        Method::Random => {
            check(net, x, target)?;
            Ok(random_attribution(x, cfg.seed, target))
        }
    }
}

pub const DEFAULT_KS: [f64; 10] = [0.0, 1.0, 2.0, 5.0, 10.0, 20.0, 30.0, 50.0, 75.0, 100.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeletionCurve {
    /// Deletion percentages.
    pub ks: Vec<f64>,
    /// Modified F1 after each deletion.
    pub scores: Vec<f64>,
    /// Trapezoidal area over the deleted fraction `k / 100`.
    pub auc: f64,
}

pub fn trapezoid_auc(ks: &[f64], scores: &[f64]) -> f64 {
    ks.windows(2)
        .zip(scores.windows(2))
        .map(|(k, s)| (k[1] - k[0]) / 100.0 * (s[0] + s[1]) / 2.0)
        .sum()
}

fn check_ks(ks: &[f64]) -> Result<()> {
    if ks.first() != Some(&0.0) {
        return Err(Error::InvalidInput("deletion percentages must start at 0".into()));
    }
    if ks.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("deletion percentages must increase strictly".into()));
    }
    if ks.iter().any(|k| !(*k <= 100.0)) {
        return Err(Error::InvalidInput("deletion percentage above 100".into()));
    }
    Ok(())
}

/// Deletion order of each radar channel's cells: the pooled positive
/// attribution of `maps`, highest first, ties by cell index.
pub fn deletion_order(maps: &[&AttributionMap]) -> Result<Vec<Vec<usize>>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidInput("deletion needs at least one attribution map".into()))?;
    let shape = first.a.shape();
    if maps.iter().any(|m| m.a.shape() != shape) {
        return Err(Error::InvalidInput("attribution maps differ in shape".into()));
    }
    let n = first.a.plane_len();
    Ok((0..RADAR_CHANNELS)
        .map(|c| {
            let score: Vec<f64> = (0..n)
                .map(|i| maps.iter().map(|m| m.a.channel(c)[i].max(0.0)).sum())
                .collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
            order
        })
        .collect())
}

/// Forecast classes at one lead time.
pub fn forecast(net: &NetworkParams, x: &Tensor, lead_time: u8) -> Result<ClassGrid> {
    let z = net.run(x)?.swap_remove(lead_time as usize - 1);
    Ok(argmax_logits(&LogitGrid::new(z, lead_time)?))
}

/// Modified F1 of the forecast at `lead_time`; the truth must contain rain
/// so that the 1 mm/hr term is always defined.
pub fn forecast_f1(
    net: &NetworkParams,
    x: &Tensor,
    truth: &ClassGrid,
    mask: &ValidityMask,
    lead_time: u8,
) -> Result<f64> {
    let pred = forecast(net, x, lead_time)?;
    let (c1, c10) = confusions(&pred, truth, mask)?;
    modified_f1(&c1, &c10)
        .value()
        .ok_or_else(|| Error::InvalidInput("modified F1 undefined for this case".into()))
}

/// Replaces the top-K% cells of every radar channel with the baseline value
/// and records the modified F1 after each step.
#[allow(clippy::too_many_arguments)]
pub fn deletion_curve(
    net: &NetworkParams,
    x: &FusedInput,
    base: &FusedInput,
    truth: &ClassGrid,
    mask: &ValidityMask,
    lead_time: u8,
    maps: &[&AttributionMap],
    ks: &[f64],
) -> Result<DeletionCurve> {
    check_ks(ks)?;
    if !truth.labels().iter().enumerate().any(|(i, l)| *l >= 1 && mask.is_valid(i)) {
        return Err(Error::InvalidInput("deletion case has no rain in the truth".into()));
    }
    let order = deletion_order(maps)?;
    let n = x.tensor().plane_len();
    let mut xd = x.tensor().clone();
    let mut deleted = 0usize;
    let mut scores = Vec::with_capacity(ks.len());
    for &k in ks {
        let count = ((k / 100.0) * n as f64).round() as usize;
        for (c, ord) in order.iter().enumerate() {
            let src = base.tensor().channel(c);
            let dst = xd.channel_mut(c);
            for &i in &ord[deleted..count] {
                dst[i] = src[i];
            }
        }
        deleted = count;
        scores.push(forecast_f1(net, &xd, truth, mask, lead_time)?);
    }
    let auc = trapezoid_auc(ks, &scores);
    Ok(DeletionCurve {
        ks: ks.to_vec(),
        scores,
        auc,
    })
}

/// One deletion-benchmark case.
#[derive(Clone, Debug)]
pub struct DeletionCase {
    pub x: FusedInput,
    pub truth: ClassGrid,
    pub mask: ValidityMask,
    pub lead_time: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub mean_auc: f64,
    pub curves: Vec<DeletionCurve>,
}

/// Mean deletion AUC per method, best (lowest) first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodComparison {
    pub ranking: Vec<MethodResult>,
}

impl MethodComparison {
    pub fn result(&self, m: Method) -> Option<&MethodResult> {
        self.ranking.iter().find(|r| r.method == m)
    }
}

/// Rain classes whose attributions are pooled for deletion ranking.
pub const DELETION_CLASSES: [usize; 2] = [1, 2];

/// Per-case deletion curve for one method, ranking cells by the pooled
/// light and heavy attributions over all valid pixels.
pub fn case_curve(
    net: &NetworkParams,
    case: &DeletionCase,
    method: Method,
    cfg: &AttributionConfig,
    ks: &[f64],
) -> Result<DeletionCurve> {
    let maps = DELETION_CLASSES
        .iter()
        .map(|&c| {
            let t = AttributionTarget::valid_region(case.lead_time, c, &case.mask)?;
            attribute(net, &case.x, method, &t, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&AttributionMap> = maps.iter().collect();
    deletion_curve(
        net,
        &case.x,
        &baseline(&case.x),
        &case.truth,
        &case.mask,
        case.lead_time,
        &refs,
        ks,
    )
}

pub fn compare_methods(
    net: &NetworkParams,
    cases: &[DeletionCase],
    methods: &[Method],
    cfg: &AttributionConfig,
    ks: &[f64],
) -> Result<MethodComparison> {
    if cases.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if methods.is_empty() {
        return Err(Error::InvalidInput("no attribution methods to compare".into()));
    }
    let mut ranking = Vec::with_capacity(methods.len());
    for &method in methods {
        let curves = cases
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let cfg = AttributionConfig { seed: cfg.seed.wrapping_add(i as u64), ..*cfg };
                case_curve(net, c, method, &cfg, ks)
            })
            .collect::<Result<Vec<_>>>()?;
        let mean_auc = curves.iter().map(|c| c.auc).sum::<f64>() / curves.len() as f64;
        ranking.push(MethodResult {
            method,
            mean_auc,
            curves,
        });
    }
    ranking.sort_by(|a, b| a.mean_auc.total_cmp(&b.mean_auc));
    Ok(MethodComparison { ranking })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub height: usize,
    pub width: usize,
    /// Mean over cases of the channel-summed absolute attribution.
    pub mean_abs: Vec<f64>,
    pub center: (usize, usize),
    /// Smallest Chebyshev radius holding 95% of the attribution mass.
    pub effective_radius: usize,
    pub theoretical: RfBox,
    pub theoretical_radius: usize,
}

impl ReceptiveField {
    /// Largest absolute attribution found outside the theoretical box.
    pub fn max_outside(&self) -> f64 {
        (0..self.height * self.width)
            .filter(|i| !self.theoretical.contains(i / self.width, i % self.width))
            .map(|i| self.mean_abs[i])
            .fold(0.0, f64::max)
    }
}

pub const RF_MASS: f64 = 0.95;

/// Smallest Chebyshev radius around `center` holding `frac` of the mass.
pub fn mass_radius(map: &[f64], width: usize, center: (usize, usize), frac: f64) -> usize {
    let height = map.len() / width;
    let total: f64 = map.iter().sum();
    if total <= 0.0 {
        return 0;
    }
    let max_r = [center.0, height - 1 - center.0, center.1, width - 1 - center.1]
        .into_iter()
        .max()
        .unwrap();
    let mut by_r = vec![0.0; max_r + 1];
    for (i, v) in map.iter().enumerate() {
        let r = (i / width).abs_diff(center.0).max((i % width).abs_diff(center.1));
        by_r[r] += v;
    }
    let mut acc = 0.0;
    for (r, m) in by_r.iter().enumerate() {
        acc += m;
        if acc >= frac * total {
            return r;
        }
    }
    max_r
}

/// Mean absolute SmoothIG map for one center-pixel target over `cases`,
/// with its 95%-mass radius and the architecture's theoretical bound.
pub fn effective_receptive_field(
    net: &NetworkParams,
    cases: &[FusedInput],
    mask: &ValidityMask,
    lead_time: u8,
    target_class: usize,
    cfg: &AttributionConfig,
) -> Result<ReceptiveField> {
    let first = cases.first().ok_or(Error::EmptyDataset)?;
    let (h, w) = first.dims();
    let center = (h / 2, w / 2);
    if !mask.is_valid(center.0 * w + center.1) {
        return Err(Error::InvalidInput("receptive-field center pixel is masked out".into()));
    }
    let target = AttributionTarget::pixel(lead_time, target_class, center.0, center.1, mask)?;
    let mut mean_abs = vec![0.0; h * w];
    for (i, x) in cases.iter().enumerate() {
        if x.dims() != (h, w) {
            return Err(Error::InvalidInput("receptive-field cases differ in size".into()));
        }
        let m = smooth_integrated_gradients(
            net,
            x,
            &baseline(x),
            cfg.steps,
            cfg.n_samples,
            noise_sigma(x, cfg.noise_fraction),
            cfg.seed.wrapping_add(i as u64),
            &target,
        )?;
        for c in 0..m.a.channels() {
            for (acc, v) in mean_abs.iter_mut().zip(m.a.channel(c)) {
                *acc += v.abs();
            }
        }
    }
    mean_abs.iter_mut().for_each(|v| *v /= cases.len() as f64);
    let theoretical = net
        .arch
        .receptive_field(lead_time as usize - 1, h, w, center.0, center.1)?;
    Ok(ReceptiveField {
        height: h,
        width: w,
        effective_radius: mass_radius(&mean_abs, w, center, RF_MASS),
        theoretical_radius: theoretical.radius_from(center.0, center.1),
        mean_abs,
        center,
        theoretical,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Architecture, Op};
    use crate::grid::INPUT_CHANNELS;

    /// Per-pixel linear map 12 → 3 with distinct weights.
    fn linear_net() -> NetworkParams {
        let ops = (0..LEAD_TIMES)
            .map(|k| Op::Linear { src: 0, dst: k + 1, cin: INPUT_CHANNELS, cout: NUM_CLASSES })
            .collect();
        let arch = Architecture::new(INPUT_CHANNELS, ops, (1..=LEAD_TIMES).collect()).unwrap();
        let n = arch.param_count();
        let w = (0..n).map(|i| ((i * 37 % 23) as f64 - 11.0) / 8.0).collect();
        NetworkParams::from_weights(arch, w).unwrap()
    }

    fn input(seed: u64) -> FusedInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::zeros(12, 8, 8);
        for c in 0..12 {
            for v in t.channel_mut(c) {
                *v = if c < RADAR_CHANNELS { rng.random::<f64>() * 20.0 } else { rng.random() };
            }
        }
        FusedInput::new(t).unwrap()
    }

    fn target(mask: &ValidityMask) -> AttributionTarget {
        AttributionTarget::valid_region(2, 1, mask).unwrap()
    }

    #[test]
    fn ig_is_exact_on_linear_net() {
        let net = linear_net();
        let x = input(1);
        let m = ValidityMask::all_valid(8, 8);
        let t = target(&m);
        let base = baseline(&x);
        for steps in [1, 3, 7] {
            let ig = integrated_gradients(&net, &x, &base, steps, &t).unwrap();
            let (_, g) = forward_with_gradient(&net, x.tensor(), &t.functional()).unwrap();
            for i in 0..ig.a.data().len() {
                let d = x.tensor().data()[i] - base.tensor().data()[i];
                assert_eq!(ig.a.data()[i], d * g.data()[i]);
            }
        }
    }

    #[test]
    fn ig_vanishes_at_baseline() {
        let net = linear_net();
        let x = input(2);
        let t = target(&ValidityMask::all_valid(8, 8));
        let ig = integrated_gradients(&net, &x, &x, 5, &t).unwrap();
        assert!(ig.a.data().iter().all(|v| *v == 0.0));
        assert!(integrated_gradients(&net, &x, &x, 0, &t).is_err());
    }

    #[test]
    fn saliency_of_linear_net_is_weight_pattern() {
        let net = linear_net();
        let t = target(&ValidityMask::all_valid(8, 8));
        let a = saliency(&net, &input(3), &t).unwrap();
        let b = saliency(&net, &input(4), &t).unwrap();
        assert_eq!(a.a, b.a);
        assert!(a.a.data().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn smooth_ig_degenerate_and_deterministic() {
        let net = linear_net();
        let x = input(5);
        let t = target(&ValidityMask::all_valid(8, 8));
        let base = baseline(&x);
        let ig = integrated_gradients(&net, &x, &base, 4, &t).unwrap();
        let s0 = smooth_integrated_gradients(&net, &x, &base, 4, 3, 0.0, 9, &t).unwrap();
        assert_eq!(s0.a, ig.a);
        let s1 = smooth_integrated_gradients(&net, &x, &base, 4, 2, 0.5, 9, &t).unwrap();
        let s2 = smooth_integrated_gradients(&net, &x, &base, 4, 2, 0.5, 9, &t).unwrap();
        assert_eq!(s1.a, s2.a);
        // context channels carry no noise
        let n = x.tensor().plane_len();
        assert_eq!(&s1.a.data()[RADAR_CHANNELS * n..], &ig.a.data()[RADAR_CHANNELS * n..]);
    }

    #[test]
    fn deletion_order_is_per_channel_and_stable() {
        let x = input(6);
        let t = target(&ValidityMask::all_valid(8, 8));
        let mut a = Tensor::zeros(12, 8, 8);
        a.set(0, 0, 3, 2.0);
        a.set(0, 1, 1, -5.0);
        a.set(1, 7, 7, 1.0);
        let m = AttributionMap::new(a, Method::Saliency, &t);
        let order = deletion_order(&[&m]).unwrap();
        assert_eq!(order.len(), RADAR_CHANNELS);
        assert_eq!(order[0][0], 3);
        assert_eq!(order[0][1], 0);
        assert_eq!(order[1][0], 63);
        let _ = x;
    }

    #[test]
    fn deletion_anchors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let arch = crate::model::segmentation_architecture(crate::model::SegmentationShape { c1: 4, c2: 4, c3: 4 });
        let net = NetworkParams::init(arch, &mut rng);
        let x = input(7);
        let mask = ValidityMask::all_valid(8, 8);
        let truth = ClassGrid::new(8, 8, (0..64).map(|i| (i % 3) as u8).collect()).unwrap();
        let t = target(&mask);
        let m = random_attribution(&x, 1, &t);
        let base = baseline(&x);
        let curve = deletion_curve(&net, &x, &base, &truth, &mask, 2, &[&m], &DEFAULT_KS).unwrap();
        assert_eq!(curve.scores[0], forecast_f1(&net, x.tensor(), &truth, &mask, 2).unwrap());
        assert_eq!(
            *curve.scores.last().unwrap(),
            forecast_f1(&net, base.tensor(), &truth, &mask, 2).unwrap()
        );
        assert!(deletion_curve(&net, &x, &base, &truth, &mask, 2, &[&m], &[0.0, 101.0]).is_err());
        assert!(deletion_curve(&net, &x, &base, &truth, &mask, 2, &[&m], &[5.0, 10.0]).is_err());
    }

    #[test]
    fn auc_of_constant_curve() {
        assert_eq!(trapezoid_auc(&[0.0, 50.0, 100.0], &[0.5, 0.5, 0.5]), 0.5);
        assert_eq!(trapezoid_auc(&[0.0, 100.0], &[1.0, 0.0]), 0.5);
    }

    #[test]
    fn mass_radius_of_point_and_ring() {
        let mut m = vec![0.0; 25];
        m[12] = 1.0;
        assert_eq!(mass_radius(&m, 5, (2, 2), 0.95), 0);
        m[0] = 1.0;
        assert_eq!(mass_radius(&m, 5, (2, 2), 0.95), 2);
        assert_eq!(mass_radius(&m, 5, (2, 2), 0.5), 0);
    }

    #[test]
    fn invalid_targets() {
        let mut v = vec![true; 64];
        v[0] = false;
        let mask = ValidityMask::new(8, 8, v).unwrap();
        assert!(AttributionTarget::pixel(1, 0, 0, 0, &mask).is_err());
        assert!(AttributionTarget::pixel(7, 0, 1, 1, &mask).is_err());
        assert!(AttributionTarget::pixel(1, 3, 1, 1, &mask).is_err());
        assert!(AttributionTarget::pixel(1, 2, 1, 1, &mask).is_ok());
    }

    #[test]
    fn map_persists() {
        let net = linear_net();
        let t = target(&ValidityMask::all_valid(8, 8));
        let mut m = integrated_gradients(&net, &input(8), &baseline(&input(8)), 3, &t).unwrap();
        m.a.round_to_f32();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path(), "ig").unwrap();
        assert_eq!(AttributionMap::load(dir.path(), "ig").unwrap(), m);
    }
}
