use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{AttributionConfig, Method, DEFAULT_KS};
use crate::calibration::{EceSampling, LtsConfig, DEFAULT_BINS};
use crate::datagen::DEFAULT_COUNTS;
use crate::error::{Error, Result};
use crate::grid::{check_lead, MIN_SIDE};
use crate::model::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Scenarios per rain type, in `RainType::ALL` order.
    pub counts: [usize; 6],
    /// `(H, W)` in pixels.
    pub grid: (usize, usize),
    /// Train, validation and test fractions.
    pub split: (f64, f64, f64),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            counts: DEFAULT_COUNTS,
            grid: (32, 32),
            split: (0.6, 0.2, 0.2),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub bins: usize,
    pub sampling: EceSampling,
    /// Local temperature scaling is skipped when absent.
    pub lts: Option<LtsConfig>,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            bins: DEFAULT_BINS,
            sampling: EceSampling::default(),
            lts: Some(LtsConfig::default()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub attribution: AttributionConfig,
    /// Test cases with rain in the deletion benchmark.
    pub suite_cases: usize,
    /// Lead time scored by the deletion benchmark.
    pub lead_time: u8,
    /// Deletion percentages, from 0 to 100.
    pub ks: Vec<f64>,
    pub methods: Vec<Method>,
    /// Inputs averaged for the effective receptive field.
    pub rf_samples: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            attribution: AttributionConfig::default(),
            suite_cases: 30,
            lead_time: 1,
            ks: DEFAULT_KS.to_vec(),
            methods: vec![
                Method::IntegratedGradients,
                Method::Saliency,
                Method::SmoothIntegratedGradients,
                Method::Random,
            ],
            rf_samples: 16,
        }
    }
}

/// Everything that determines the artifacts of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "default_train")]
    pub train: TrainConfig,
    #[serde(default = "default_classifier")]
    pub classifier: TrainConfig,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub explain: ExplainConfig,
}

fn default_train() -> TrainConfig {
    TrainConfig::default()
}

fn default_classifier() -> TrainConfig {
    TrainConfig {
        epochs: 15,
        ..TrainConfig::default()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig::default(),
            train: default_train(),
            classifier: default_classifier(),
            calibration: CalibrationConfig::default(),
            explain: ExplainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Seconds-scale profile: 16×16 grids, a few scenarios per type and
    /// token epochs. Useful for demos and tests, not for measurements.
    pub fn smoke() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig {
                counts: [3, 4, 3, 3, 3, 4],
                grid: (16, 16),
                split: (0.5, 0.25, 0.25),
            },
            train: TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
            classifier: TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
            calibration: CalibrationConfig {
                lts: Some(LtsConfig {
                    channels: 4,
                    epochs: 2,
                    ..LtsConfig::default()
                }),
                ..CalibrationConfig::default()
            },
            explain: ExplainConfig {
                attribution: AttributionConfig {
                    steps: 8,
                    n_samples: 2,
                    ..AttributionConfig::default()
                },
                suite_cases: 2,
                methods: vec![Method::IntegratedGradients, Method::Random],
                rf_samples: 2,
                ..ExplainConfig::default()
            },
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Validation(format!("config: {e}")))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Copy whose per-stage seeds are derived from the top-level seed.
    pub fn normalized(&self) -> RunConfig {
        let mut c = self.clone();
        let s = c.seed;
        c.train.seed = s;
        c.classifier.seed = s.wrapping_add(1);
        if let Some(l) = &mut c.calibration.lts {
            l.seed = s.wrapping_add(2);
        }
        c.explain.attribution.seed = s.wrapping_add(3);
        c.calibration.sampling.seed = s.wrapping_add(4);
        c
    }

    /// Content hash of the normalized configuration.
    pub fn run_id(&self) -> String {
        let json = serde_json::to_vec(&self.normalized()).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    /// Checks the settings the data stage depends on. Training and
    /// calibration settings are checked by their own stages.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.data.grid;
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::Validation(format!(
                "grid {h}x{w} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Validation(format!(
                "grid {h}x{w} must be divisible by 4 for the network's two downsampling levels"
            )));
        }
        if self.data.counts.iter().all(|c| *c == 0) {
            return Err(Error::Validation("dataset counts are all zero".into()));
        }
        Ok(())
    }

    pub(crate) fn validate_explain(&self) -> Result<()> {
        let e = &self.explain;
        check_lead(e.lead_time).map_err(|_| {
            Error::Validation(format!("explain lead_time {} must be in 1..=6", e.lead_time))
        })?;
        if e.suite_cases == 0 || e.rf_samples == 0 {
            return Err(Error::Validation("suite_cases and rf_samples must be at least 1".into()));
        }
        if e.methods.is_empty() {
            return Err(Error::Validation("explain needs at least one method".into()));
        }
        if e.attribution.steps == 0 || e.attribution.n_samples == 0 {
            return Err(Error::Validation("attribution steps and n_samples must be at least 1".into()));
        }
        Ok(())
    }

    pub(crate) fn validate_calibration(&self) -> Result<()> {
        let c = &self.calibration;
        if c.bins == 0 {
            return Err(Error::Validation("calibration bins must be at least 1".into()));
        }
        if c.sampling.length == 0 || c.sampling.repeats == 0 {
            return Err(Error::Validation("ECE sampling length and repeats must be at least 1".into()));
        }
        if let Some(l) = &c.lts {
            if l.epochs == 0 || l.batch_size == 0 || l.channels == 0 {
                return Err(Error::Validation(
                    "LTS epochs, batch size and channels must be at least 1".into(),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_id_survives_reserialization() {
        let c = RunConfig::default();
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.run_id(), c.run_id());
        assert_eq!(c.run_id().len(), 16);
    }

    #[test]
    fn run_id_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 7, ..a.clone() };
        assert_ne!(a.run_id(), b.run_id());
        // sub-stage seeds are overwritten by the top-level seed
        let mut c = a.clone();
        c.train.seed = 99;
        assert_eq!(a.run_id(), c.run_id());
    }

    #[test]
    fn partial_json_takes_defaults() {
        let c = RunConfig::from_json(r#"{"seed": 3, "data": {"counts": [1,1,1,1,1,1], "grid": [16,16], "split": [0.5,0.25,0.25]}}"#).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train, TrainConfig::default());
        assert!(c.validate().is_ok());
    }

    #[test]
    fn nested_fields_take_defaults() {
        let c = RunConfig::from_json(r#"{"seed": 0, "train": {"epochs": 3}, "calibration": {"lts": {"epochs": 1}}}"#).unwrap();
        assert_eq!(c.train, TrainConfig { epochs: 3, ..TrainConfig::default() });
        assert_eq!(c.calibration.lts, Some(LtsConfig { epochs: 1, ..LtsConfig::default() }));
        assert!(RunConfig::from_json(r#"{"seed": 0, "train": {"epoch": 3}}"#).is_err());
    }

    #[test]
    fn bad_configs_are_validation_errors() {
        assert!(matches!(RunConfig::from_json(r#"{"seed": 1, "bogus": 2}"#), Err(Error::Validation(_))));
        let mut c = RunConfig::default();
        c.data.grid = (18, 20);
        assert!(c.validate().is_err());
        c.data.grid = (4, 4);
        assert!(c.validate().is_err());
    }
}
