//! Synthetic radar scenarios.
//!
//! Rain is a sum of Gaussian cells. Each cell is advected by a uniform wind,
//! optionally rotated about a moving vortex centre, and scaled by
//! `exp(growth * t)`. Positions are kilometres east and north of the
//! south-west grid corner; row 0 of every grid is the northern edge.
//!
//! The six rain types are geometric archetypes (east–west bands, compact
//! convective cells, comma-shaped rotating bands). They are stand-ins chosen to
//! be visually and statistically distinct, not reproductions of any
//! operational rainfall classification.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Datelike, Timelike};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grdf::{Grdf, Header};
use crate::grid::{
    FusedInput, RainField, Tensor, ValidityMask, INPUT_CHANNELS, LEAD_TIMES, RADAR_CHANNELS,
};

/// Nominal pixel size, km.
pub const PIXEL_KM: f64 = 2.0;
/// Spacing of the input radar frames, minutes.
pub const FRAME_SPACING_MIN: i64 = 10;
/// Per-type sample counts of the default dataset profile, in [`RainType::ALL`] order.
pub const DEFAULT_COUNTS: [usize; 6] = [29, 280, 53, 43, 24, 218];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RainType {
    MonsoonSouth,
    MonsoonCentral,
    IsolatedThunderstorm,
    CycloneEastCoast,
    CycloneInland,
    NoRain,
}

impl RainType {
    pub const ALL: [RainType; 6] = [
        RainType::MonsoonSouth,
        RainType::MonsoonCentral,
        RainType::IsolatedThunderstorm,
        RainType::CycloneEastCoast,
        RainType::CycloneInland,
        RainType::NoRain,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<RainType> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            RainType::MonsoonSouth => "MonsoonSouth",
            RainType::MonsoonCentral => "MonsoonCentral",
            RainType::IsolatedThunderstorm => "IsolatedThunderstorm",
            RainType::CycloneEastCoast => "CycloneEastCoast",
            RainType::CycloneInland => "CycloneInland",
            RainType::NoRain => "NoRain",
        }
    }

    pub fn parse(s: &str) -> Option<RainType> {
        Self::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .or_else(|| s.parse::<usize>().ok().and_then(Self::from_index))
    }
}

impl std::fmt::Display for RainType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub east_km: f64,
    pub north_km: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    pub center: Point,
    /// Peak rain rate at `t = 0`, mm/hr.
    pub peak: f64,
    pub radius_km: f64,
    /// Exponential growth rate, 1/hr (negative for decay).
    pub growth_per_hr: f64,
}

/// Solid-body rotation of all cells about a vortex centre that moves with
/// the advection wind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    pub center: Point,
    /// Counter-clockwise angular speed, rad/hr.
    pub rad_per_hr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub rain_type: RainType,
    pub seed: u64,
    /// `(H, W)` in pixels.
    pub grid: (usize, usize),
    /// `(u, v)`: eastward and northward wind, km/hr.
    pub advection: (f64, f64),
    pub cells: Vec<CellParams>,
    #[serde(default)]
    pub rotation: Option<Rotation>,
    /// Issue time `t0`, minutes since the Unix epoch.
    pub issue_time: i64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.grid;
        if h == 0 || w == 0 {
            return Err(Error::InvalidSpec(format!("zero-area grid {h}x{w}")));
        }
        if h < crate::grid::MIN_SIDE || w < crate::grid::MIN_SIDE {
            return Err(Error::InvalidSpec(format!("grid {h}x{w} below 8x8")));
        }
        for c in &self.cells {
            if !(c.peak >= 0.0) || !c.peak.is_finite() {
                return Err(Error::InvalidSpec(format!("cell peak {}", c.peak)));
            }
            if !(c.radius_km > 0.0) || !c.radius_km.is_finite() {
                return Err(Error::InvalidSpec(format!("cell radius {}", c.radius_km)));
            }
        }
        Ok(())
    }

    /// Random archetype of the given type, fully determined by `seed`.
    pub fn archetype(rain_type: RainType, seed: u64, grid: (usize, usize)) -> ScenarioSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = grid;
        let (dx, dy) = (w as f64 * PIXEL_KM, h as f64 * PIXEL_KM);
        // 2020-06-01T00:00Z plus a random 10-minute slot within June–September.
        let jun1_2020 = 1_590_969_600 / 60;
        let issue_time = jun1_2020 + FRAME_SPACING_MIN * rng.random_range(0..122 * 144);
        let mut cells = Vec::new();
        let mut rotation = None;
        let advection;
        match rain_type {
            RainType::MonsoonSouth | RainType::MonsoonCentral => {
                let (lat_frac, u, v) = if rain_type == RainType::MonsoonSouth {
                    (
                        rng.random_range(0.12..0.26),
                        rng.random_range(15.0..30.0),
                        rng.random_range(-3.0..3.0),
                    )
                } else {
                    (
                        rng.random_range(0.44..0.58),
                        rng.random_range(10.0..25.0),
                        rng.random_range(0.0..5.0),
                    )
                };
                advection = (u, v);
                let slope = rng.random_range(-0.12..0.12);
                let radius = rng.random_range(5.0..8.0);
                let mut east = -dx;
                while east < 2.0 * dx {
                    cells.push(CellParams {
                        center: Point {
                            east_km: east,
                            north_km: lat_frac * dy
                                + slope * (east - 0.5 * dx)
                                + rng.random_range(-1.5..1.5),
                        },
                        peak: rng.random_range(2.0..16.0),
                        radius_km: radius * rng.random_range(0.8..1.2),
                        growth_per_hr: rng.random_range(-0.1..0.1),
                    });
                    east += 0.7 * radius;
                }
            }
            RainType::IsolatedThunderstorm => {
                advection = (rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0));
                let n = rng.random_range(1..=3);
                for _ in 0..n {
                    cells.push(CellParams {
                        center: Point {
                            east_km: rng.random_range(0.25..0.75) * dx,
                            north_km: rng.random_range(0.25..0.75) * dy,
                        },
                        peak: rng.random_range(15.0..40.0),
                        radius_km: rng.random_range(3.0..5.0),
                        growth_per_hr: rng.random_range(-0.4..0.3),
                    });
                }
            }
            RainType::CycloneEastCoast | RainType::CycloneInland => {
                let (east_frac, u, v) = if rain_type == RainType::CycloneEastCoast {
                    (
                        rng.random_range(0.66..0.80),
                        rng.random_range(5.0..15.0),
                        rng.random_range(5.0..12.0),
                    )
                } else {
                    (
                        rng.random_range(0.28..0.42),
                        rng.random_range(10.0..20.0),
                        rng.random_range(0.0..8.0),
                    )
                };
                advection = (u, v);
                let center = Point {
                    east_km: east_frac * dx,
                    north_km: rng.random_range(0.4..0.6) * dy,
                };
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let rho0 = 0.06 * dx.min(dy);
                let pitch = 0.05 * dx.min(dy);
                let mut theta: f64 = 0.0;
                while theta < 1.5 * std::f64::consts::PI {
                    let rho = rho0 + pitch * theta;
                    let a = phase + theta;
                    cells.push(CellParams {
                        center: Point {
                            east_km: center.east_km + rho * a.cos(),
                            north_km: center.north_km + rho * a.sin(),
                        },
                        peak: rng.random_range(4.0..16.0) * (1.0 - 0.15 * theta),
                        radius_km: rng.random_range(4.5..6.5),
                        growth_per_hr: rng.random_range(-0.1..0.05),
                    });
                    theta += 0.35;
                }
                rotation = Some(Rotation {
                    center,
                    rad_per_hr: rng.random_range(0.3..0.6),
                });
            }
            RainType::NoRain => advection = (0.0, 0.0),
        }
        ScenarioSpec {
            rain_type,
            seed,
            grid,
            advection,
            cells,
            rotation,
            issue_time,
        }
    }

    /// Rain rate field `t_hr` hours after issue time.
    pub fn rain_at(&self, t_hr: f64) -> Vec<f64> {
        let (h, w) = self.grid;
        let (u, v) = self.advection;
        let mut field = vec![0.0; h * w];
        for cell in &self.cells {
            let mut c = cell.center;
            if let Some(rot) = &self.rotation {
                let (s, co) = (rot.rad_per_hr * t_hr).sin_cos();
                let (ox, oy) = (c.east_km - rot.center.east_km, c.north_km - rot.center.north_km);
                c = Point {
                    east_km: rot.center.east_km + co * ox - s * oy,
                    north_km: rot.center.north_km + s * ox + co * oy,
                };
            }
            c.east_km += u * t_hr;
            c.north_km += v * t_hr;
            let amp = cell.peak * (cell.growth_per_hr * t_hr).exp();
            let inv = 1.0 / (2.0 * cell.radius_km * cell.radius_km);
            let reach = 4.0 * cell.radius_km;
            for row in 0..h {
                let north = (h - 1 - row) as f64 * PIXEL_KM;
                let dn = north - c.north_km;
                if dn.abs() > reach {
                    continue;
                }
                for col in 0..w {
                    let de = col as f64 * PIXEL_KM - c.east_km;
                    if de.abs() > reach {
                        continue;
                    }
                    field[row * w + col] += amp * (-(de * de + dn * dn) * inv).exp();
                }
            }
        }
        for v in &mut field {
            // f32 precision so the in-memory scenario equals its persisted form
            *v = (v.max(0.0)) as f32 as f64;
        }
        field
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub id: String,
    pub spec: ScenarioSpec,
    pub inputs: FusedInput,
    /// Rain at `t0 + 1h ..= t0 + 6h`.
    pub truth: Vec<RainField>,
    pub label: RainType,
    pub mask: ValidityMask,
}

impl Scenario {
    pub fn dims(&self) -> (usize, usize) {
        self.spec.grid
    }
}

/// Static channels 7–11: normalized longitude, latitude, year, month and
/// day-of-year.
fn context_channels(h: usize, w: usize, issue_time: i64) -> [Vec<f64>; 5] {
    let dt = DateTime::from_timestamp(issue_time * 60, 0).expect("timestamp in range");
    let year = ((dt.year() as f64 - 2000.0) / 50.0).clamp(0.0, 1.0);
    let month = (dt.month0() as f64) / 11.0;
    let doy = (dt.ordinal0() as f64) / 365.0;
    debug_assert_eq!(dt.second(), 0);
    let lon = (0..h * w)
        .map(|i| (i % w) as f64 / (w - 1) as f64)
        .collect();
    let lat = (0..h * w)
        .map(|i| 1.0 - (i / w) as f64 / (h - 1) as f64)
        .collect();
    let f = |v: f64| vec![v as f32 as f64; h * w];
    [lon, lat, f(year), f(month), f(doy)]
}

pub fn generate(spec: &ScenarioSpec) -> Result<Scenario> {
    generate_with_id(spec, format!("scn-{:016x}", spec.seed))
}

fn generate_with_id(spec: &ScenarioSpec, id: String) -> Result<Scenario> {
    spec.validate()?;
    let (h, w) = spec.grid;
    let mask = ValidityMask::radar_disk(h, w);
    let n = h * w;
    let mut data = Vec::with_capacity(INPUT_CHANNELS * n);
    for k in 0..RADAR_CHANNELS {
        let minutes = -FRAME_SPACING_MIN * (RADAR_CHANNELS - 1 - k) as i64;
        let mut frame = spec.rain_at(minutes as f64 / 60.0);
        for (i, v) in frame.iter_mut().enumerate() {
            if !mask.is_valid(i) {
                *v = 0.0;
            }
        }
        data.extend(frame);
    }
    for ch in context_channels(h, w, spec.issue_time) {
        data.extend(ch.into_iter().map(|v| v as f32 as f64));
    }
    let inputs = FusedInput::new(Tensor::from_vec(INPUT_CHANNELS, h, w, data)?)?;
    let truth = (1..=LEAD_TIMES)
        .map(|lead| {
            RainField::new(
                h,
                w,
                spec.rain_at(lead as f64),
                spec.issue_time + 60 * lead as i64,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scenario {
        id,
        spec: spec.clone(),
        inputs,
        truth,
        label: spec.rain_type,
        mask,
    })
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 step
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `counts[i]` scenarios of type `RainType::ALL[i]`, grouped by type.
pub fn make_dataset(counts: &[usize; 6], seed: u64, grid: (usize, usize)) -> Result<Vec<Scenario>> {
    if counts.iter().all(|c| *c == 0) {
        return Err(Error::EmptyDataset);
    }
    let mut out = Vec::with_capacity(counts.iter().sum());
    let mut index = 0u64;
    for (ty, &count) in RainType::ALL.iter().zip(counts) {
        for _ in 0..count {
            let spec = ScenarioSpec::archetype(*ty, mix_seed(seed, index), grid);
            out.push(generate_with_id(&spec, format!("scn-{index:05}"))?);
            index += 1;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
    /// Non-fatal stratification problems (a populated type missing from a
    /// split that should receive samples).
    pub warnings: Vec<String>,
}

/// Largest-remainder apportionment of `n` by `ratios`; ties go to the
/// earlier bucket.
pub fn apportion(n: usize, ratios: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let mut left = n.saturating_sub(sizes.iter().sum());
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            sizes[i] += 1;
            left -= 1;
        }
    }
    sizes
}

/// Stratified three-way split of `data` by rain type.
///
/// Split sizes follow the largest-remainder rule on the whole dataset; each
/// type contributes `floor` or `floor + 1` of its share to each split.
pub fn split_dataset<T: Clone>(
    data: &[T],
    label: impl Fn(&T) -> RainType,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<Split<T>> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|v| *v < 0.0 || !v.is_finite()) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "split ratios {r:?} must be non-negative and sum to 1"
        )));
    }
    let mut by_type: BTreeMap<RainType, Vec<usize>> = BTreeMap::new();
    for (i, d) in data.iter().enumerate() {
        by_type.entry(label(d)).or_default().push(i);
    }
    let totals = apportion(data.len(), &r);
    let classes: Vec<RainType> = by_type.keys().copied().collect();
    let mut alloc: Vec<[usize; 3]> = Vec::new();
    let mut rem: Vec<(f64, usize, usize)> = Vec::new();
    let mut leftover = Vec::new();
    for (ci, ty) in classes.iter().enumerate() {
        let n = by_type[ty].len();
        let mut a = [0usize; 3];
        for s in 0..3 {
            let q = r[s] * n as f64;
            a[s] = (q + 1e-9).floor() as usize;
            if r[s] > 0.0 {
                rem.push((q - a[s] as f64, ci, s));
            }
        }
        leftover.push(n - a.iter().sum::<usize>());
        alloc.push(a);
    }
    let mut deficit: Vec<isize> = (0..3)
        .map(|s| totals[s] as isize - alloc.iter().map(|a| a[s]).sum::<usize>() as isize)
        .collect();
    rem.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
    for &(_, ci, s) in &rem {
        if leftover[ci] > 0 && deficit[s] > 0 {
            alloc[ci][s] += 1;
            leftover[ci] -= 1;
            deficit[s] -= 1;
        }
    }
    for ci in 0..classes.len() {
        while leftover[ci] > 0 {
            let s = (0..3)
                .find(|s| deficit[*s] > 0)
                .unwrap_or_else(|| (0..3).find(|s| r[*s] > 0.0).unwrap());
            alloc[ci][s] += 1;
            leftover[ci] -= 1;
            deficit[s] -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    let mut warnings = Vec::new();
    const NAMES: [&str; 3] = ["train", "val", "test"];
    for (ci, ty) in classes.iter().enumerate() {
        let mut idx = by_type[ty].clone();
        idx.shuffle(&mut rng);
        let mut start = 0;
        for s in 0..3 {
            let k = alloc[ci][s];
            if k == 0 && r[s] > 0.0 {
                warnings.push(format!("{ty} has no samples in the {} split", NAMES[s]));
            }
            parts[s].extend_from_slice(&idx[start..start + k]);
            start += k;
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let pick = |ix: &[usize]| ix.iter().map(|i| data[*i].clone()).collect::<Vec<T>>();
    Ok(Split {
        train: pick(&parts[0]),
        val: pick(&parts[1]),
        test: pick(&parts[2]),
        warnings,
    })
}

// ---------------------------------------------------------------------------
// persistence

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub rain_type: RainType,
    pub seed: u64,
    pub input: PathBuf,
    pub truth: Vec<PathBuf>,
    pub mask: PathBuf,
    pub spec: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub grid: (usize, usize),
    pub seed: u64,
    pub counts: [usize; 6],
    pub scenarios: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Manifest> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Writes every scenario as a GRDF bundle under `dir` plus `manifest.json`.
pub fn save_dataset(dir: &Path, scenarios: &[Scenario], seed: u64) -> Result<Manifest> {
    let grid = scenarios.first().map(|s| s.dims()).ok_or(Error::EmptyDataset)?;
    let mut counts = [0usize; 6];
    let mut entries = Vec::with_capacity(scenarios.len());
    for s in scenarios {
        counts[s.label.index()] += 1;
        let rel = PathBuf::from(&s.id);
        let (h, w) = s.dims();
        let input = rel.join("input.grdf");
        Grdf {
            header: Header::new("fused_input", vec![INPUT_CHANNELS, h, w])
                .with_timestamp(s.spec.issue_time),
            values: s.inputs.tensor().data().to_vec(),
        }
        .write(&dir.join(&input))?;
        let mut truth = Vec::new();
        for (k, f) in s.truth.iter().enumerate() {
            let p = rel.join(format!("truth_{}h.grdf", k + 1));
            Grdf {
                header: Header::new("rain_field", vec![h, w])
                    .with_lead_time(k as u8 + 1)
                    .with_timestamp(f.timestamp),
                values: f.values().to_vec(),
            }
            .write(&dir.join(&p))?;
            truth.push(p);
        }
        let mask = rel.join("mask.grdf");
        Grdf {
            header: Header::new("validity_mask", vec![h, w]),
            values: s.mask.valid().iter().map(|v| *v as u8 as f64).collect(),
        }
        .write(&dir.join(&mask))?;
        let spec = rel.join("spec.json");
        write_json(&dir.join(&spec), &s.spec)?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            rain_type: s.label,
            seed: s.spec.seed,
            input,
            truth,
            mask,
            spec,
        });
    }
    let manifest = Manifest {
        grid,
        seed,
        counts,
        scenarios: entries,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn load_scenario(dir: &Path, e: &ManifestEntry) -> Result<Scenario> {
    let spec: ScenarioSpec = {
        let p = dir.join(&e.spec);
        serde_json::from_str(&fs::read_to_string(&p).map_err(|err| Error::io(&p, err))?)?
    };
    let (h, w) = spec.grid;
    let inputs = FusedInput::new(Grdf::read(&dir.join(&e.input))?.to_tensor()?)?;
    let truth = e
        .truth
        .iter()
        .map(|p| {
            let g = Grdf::read(&dir.join(p))?;
            RainField::new(h, w, g.values, g.header.timestamp.unwrap_or(0))
        })
        .collect::<Result<Vec<_>>>()?;
    let m = Grdf::read(&dir.join(&e.mask))?;
    let mask = ValidityMask::new(h, w, m.values.iter().map(|v| *v != 0.0).collect())?;
    Ok(Scenario {
        id: e.id.clone(),
        spec,
        inputs,
        truth,
        label: e.rain_type,
        mask,
    })
}

pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<Scenario>)> {
    let manifest = Manifest::read(&dir.join("manifest.json"))?;
    let scenarios = manifest
        .scenarios
        .iter()
        .map(|e| load_scenario(dir, e))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, scenarios))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let s = serde_json::to_string_pretty(value)?;
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_cell(u: f64, growth: f64) -> ScenarioSpec {
        ScenarioSpec {
            rain_type: RainType::IsolatedThunderstorm,
            seed: 1,
            grid: (64, 64),
            advection: (u, 0.0),
            cells: vec![CellParams {
                center: Point {
                    east_km: 40.0,
                    north_km: 64.0,
                },
                peak: 20.0,
                radius_km: 6.0,
                growth_per_hr: growth,
            }],
            rotation: None,
            issue_time: 26_516_160,
        }
    }

    fn argmax(v: &[f64]) -> usize {
        crate::grid::argmax_lowest(v)
    }

    #[test]
    fn deterministic() {
        let spec = ScenarioSpec::archetype(RainType::CycloneInland, 99, (32, 32));
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    }

    #[test]
    fn no_rain_is_dry() {
        let s = generate(&ScenarioSpec::archetype(RainType::NoRain, 5, (32, 32))).unwrap();
        let n = 32 * 32;
        assert!(s.inputs.tensor().data()[..7 * n].iter().all(|v| *v == 0.0));
        for f in &s.truth {
            assert!(f.values().iter().all(|v| *v < 1.0));
        }
    }

    #[test]
    fn advection_moves_peak_ten_pixels_east() {
        // 20 km/hr for one hour at 2 km/pixel.
        let s = generate(&single_cell(20.0, 0.0)).unwrap();
        let now = s.inputs.tensor().channel(6);
        let p0 = argmax(now);
        let p1 = argmax(s.truth[0].values());
        assert_eq!(p1 / 64, p0 / 64);
        assert_eq!(p1 % 64, p0 % 64 + 10);
    }

    #[test]
    fn advection_conserves_interior_mass() {
        let spec = single_cell(8.0, 0.0);
        let m0: f64 = spec.rain_at(0.0).iter().sum();
        for t in [1.0, 2.0, 3.0] {
            let m: f64 = spec.rain_at(t).iter().sum();
            assert!((m - m0).abs() / m0 < 0.02, "t={t}: {m} vs {m0}");
        }
    }

    #[test]
    fn rotation_conserves_mass() {
        let mut spec = single_cell(0.0, 0.0);
        spec.rotation = Some(Rotation {
            center: Point {
                east_km: 64.0,
                north_km: 64.0,
            },
            rad_per_hr: 0.5,
        });
        let m0: f64 = spec.rain_at(0.0).iter().sum();
        let m: f64 = spec.rain_at(2.0).iter().sum();
        assert!((m - m0).abs() / m0 < 0.02);
    }

    #[test]
    fn invalid_specs() {
        let mut spec = single_cell(0.0, 0.0);
        spec.grid = (0, 64);
        assert!(matches!(generate(&spec), Err(Error::InvalidSpec(_))));
        let mut spec = single_cell(0.0, 0.0);
        spec.cells[0].radius_km = 0.0;
        assert!(generate(&spec).is_err());
        let mut spec = single_cell(0.0, 0.0);
        spec.cells[0].peak = -1.0;
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn archetypes_are_plausible() {
        for ty in RainType::ALL {
            for seed in 0..5 {
                let s = generate(&ScenarioSpec::archetype(ty, seed, (64, 64))).unwrap();
                let radar = &s.inputs.tensor().data()[..7 * 64 * 64];
                assert!(radar.iter().all(|v| *v >= 0.0));
                if ty != RainType::NoRain {
                    let last = s.inputs.tensor().channel(6);
                    assert!(last.iter().any(|v| *v >= 1.0), "{ty} seed {seed} dry");
                }
            }
        }
    }

    #[test]
    fn monsoon_band_latitudes_differ() {
        let centroid_row = |ty| {
            let mut acc = 0.0;
            for seed in 0..8 {
                let s = generate(&ScenarioSpec::archetype(ty, seed, (64, 64))).unwrap();
                let f = s.inputs.tensor().channel(6);
                let m: f64 = f.iter().sum();
                let r: f64 = f.iter().enumerate().map(|(i, v)| (i / 64) as f64 * v).sum();
                acc += r / m;
            }
            acc / 8.0
        };
        let south = centroid_row(RainType::MonsoonSouth);
        let central = centroid_row(RainType::MonsoonCentral);
        assert!(south > 64.0 * 2.0 / 3.0 - 4.0, "south band centroid row {south}");
        assert!(south > central + 8.0);
    }

    #[test]
    fn dataset_counts() {
        let d = make_dataset(&[1, 0, 0, 0, 0, 0], 3, (16, 16)).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].label, RainType::MonsoonSouth);
        assert!(matches!(
            make_dataset(&[0; 6], 3, (16, 16)),
            Err(Error::EmptyDataset)
        ));
        let counts = [2, 3, 1, 0, 2, 4];
        let d = make_dataset(&counts, 3, (16, 16)).unwrap();
        for (i, c) in counts.iter().enumerate() {
            assert_eq!(d.iter().filter(|s| s.label.index() == i).count(), *c);
        }
        assert_eq!(d, make_dataset(&counts, 3, (16, 16)).unwrap());
    }

    #[test]
    fn default_profile_split_sizes() {
        // labels only: the split never looks at grids
        let labels: Vec<RainType> = RainType::ALL
            .iter()
            .zip(DEFAULT_COUNTS)
            .flat_map(|(t, c)| std::iter::repeat_n(*t, c))
            .collect();
        assert_eq!(labels.len(), 647);
        let s = split_dataset(&labels, |t| *t, (0.6, 0.2, 0.2), 1).unwrap();
        assert_eq!(s.train.len(), 388);
        assert!((s.val.len() as i64 - 129).abs() <= 1);
        assert!((s.test.len() as i64 - 130).abs() <= 1);
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 647);
        for (ty, n) in RainType::ALL.iter().zip(DEFAULT_COUNTS) {
            for (part, r) in [(&s.train, 0.6), (&s.val, 0.2), (&s.test, 0.2)] {
                let k = part.iter().filter(|t| *t == ty).count() as f64;
                assert!((k - r * n as f64).abs() <= 1.0, "{ty}: {k}");
            }
        }
        let nr = s.test.iter().filter(|t| **t == RainType::NoRain).count();
        assert!((43..=44).contains(&nr));
        assert!(s.warnings.is_empty());
    }

    #[test]
    fn split_is_disjoint_cover_and_deterministic() {
        let items: Vec<(usize, RainType)> = (0..50)
            .map(|i| (i, RainType::ALL[i % 6]))
            .collect();
        let a = split_dataset(&items, |x| x.1, (0.6, 0.2, 0.2), 9).unwrap();
        let b = split_dataset(&items, |x| x.1, (0.6, 0.2, 0.2), 9).unwrap();
        assert_eq!(a.train, b.train);
        let mut all: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).map(|x| x.0).collect();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());

        let everything = split_dataset(&items, |x| x.1, (1.0, 0.0, 0.0), 9).unwrap();
        assert_eq!(everything.train.len(), 50);
        assert!(everything.val.is_empty() && everything.test.is_empty());
        assert!(everything.warnings.is_empty());
    }

    #[test]
    fn split_warns_on_starved_class() {
        let items = vec![RainType::NoRain, RainType::NoRain, RainType::MonsoonSouth];
        let s = split_dataset(&items, |t| *t, (0.6, 0.2, 0.2), 0).unwrap();
        assert!(!s.warnings.is_empty());
        assert!(split_dataset(&items, |t| *t, (0.5, 0.2, 0.2), 0).is_err());
    }

    #[test]
    fn dataset_persists_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let d = make_dataset(&[1, 0, 1, 0, 0, 1], 11, (16, 16)).unwrap();
        let m = save_dataset(dir.path(), &d, 11).unwrap();
        assert_eq!(m.counts, [1, 0, 1, 0, 0, 1]);
        let (m2, back) = load_dataset(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(back, d);
    }
}
