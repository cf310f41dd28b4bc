use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    check_lead, ClassGrid, ConfidenceGrid, LogitGrid, ProbGrid, Tensor, ValidityMask,
    INPUT_CHANNELS, NUM_CLASSES,
};
use crate::model::{load_params, save_params, Adam, EpochStat};
use crate::net::{Architecture, NetworkParams, Op};

/// Floor of the emitted temperature.
pub const T_FLOOR: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LtsConfig {
    pub channels: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LtsConfig {
    fn default() -> Self {
        LtsConfig {
            channels: 16,
            epochs: 15,
            learning_rate: 1e-3,
            batch_size: 4,
            seed: 0,
        }
    }
}

/// Three 3×3 conv layers from `concat(z, x)` (15 channels) to one channel.
pub fn lts_architecture(channels: usize) -> Architecture {
    let cin = NUM_CLASSES + INPUT_CHANNELS;
    let c = channels;
    let ops = vec![
        Op::Conv3x3 { src: 0, dst: 1, cin, cout: c },
        Op::BiasAdd { src: 1, dst: 2, channels: c },
        Op::Relu { src: 2, dst: 3 },
        Op::Conv3x3 { src: 3, dst: 4, cin: c, cout: c },
        Op::BiasAdd { src: 4, dst: 5, channels: c },
        Op::Relu { src: 5, dst: 6 },
        Op::Conv3x3 { src: 6, dst: 7, cin: c, cout: 1 },
        Op::BiasAdd { src: 7, dst: 8, channels: 1 },
    ];
    Architecture::new(cin, ops, vec![8]).expect("LTS architecture is valid")
}

fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

fn sigmoid(s: f64) -> f64 {
    1.0 / (1.0 + (-s).exp())
}

/// `1 + (1 − ε)(softplus(o) / softplus(0) − 1)`: exactly 1 at `o = 0`,
/// bounded below by ε.
pub fn temperature_of(o: f64) -> f64 {
    1.0 + (1.0 - T_FLOOR) * (softplus(o) / softplus(0.0) - 1.0)
}

fn dtemperature(o: f64) -> f64 {
    (1.0 - T_FLOOR) * sigmoid(o) / softplus(0.0)
}

/// Per-pixel, input-dependent temperature for one lead time.
#[derive(Clone, Debug, PartialEq)]
pub struct TemperatureField {
    pub net: NetworkParams,
    pub lead_time: u8,
}

impl TemperatureField {
    /// Seeded hidden layers with a zero output layer, so `T ≡ 1`.
    pub fn identity(lead_time: u8, channels: usize, seed: u64) -> Result<Self> {
        check_lead(lead_time)?;
        let arch = lts_architecture(channels);
        let offsets = arch.param_offsets();
        let mut net = NetworkParams::init(arch, &mut ChaCha8Rng::seed_from_u64(seed));
        net.weights[offsets[6]..].fill(0.0);
        net.round_to_f32();
        Ok(TemperatureField { net, lead_time })
    }

    fn check(&self, x: &Tensor, z: &LogitGrid) -> Result<()> {
        if z.lead_time != self.lead_time {
            return Err(Error::InvalidInput(format!(
                "temperature field for lead {} applied to lead {}",
                self.lead_time, z.lead_time
            )));
        }
        if x.channels() != INPUT_CHANNELS || (x.height(), x.width()) != z.dims() {
            return Err(Error::ShapeMismatch {
                expected: vec![INPUT_CHANNELS, z.dims().0, z.dims().1],
                got: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn raw(&self, x: &Tensor, z: &LogitGrid) -> Result<Tensor> {
        self.check(x, z)?;
        Ok(self.net.run(&Tensor::concat(&[&z.z, x])?)?.swap_remove(0))
    }

    pub fn temperatures(&self, x: &Tensor, z: &LogitGrid) -> Result<Vec<f64>> {
        Ok(self.raw(x, z)?.data().iter().map(|o| temperature_of(*o)).collect())
    }

    pub fn apply(&self, x: &Tensor, z: &LogitGrid) -> Result<(ProbGrid, ConfidenceGrid)> {
        let t = self.temperatures(x, z)?;
        let p = z.softmax_scaled(|i| t[i]);
        let c = p.confidence();
        Ok((p, c))
    }

    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        save_params(dir, name, &self.net)
    }

    pub fn load(dir: &Path, name: &str, lead_time: u8) -> Result<Self> {
        check_lead(lead_time)?;
        let net = load_params(dir, name)?;
        if net.arch.input_channels != NUM_CLASSES + INPUT_CHANNELS || net.arch.output_channels() != vec![1] {
            return Err(Error::Format(format!("{name} is not a temperature-field network")));
        }
        Ok(TemperatureField { net, lead_time })
    }
}

/// One scenario's input, logits at the field's lead time and truth.
#[derive(Clone, Debug)]
pub struct LtsSample {
    pub x: Tensor,
    pub z: LogitGrid,
    pub truth: ClassGrid,
    pub mask: ValidityMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LtsLog {
    pub initial_nll: f64,
    pub best_nll: f64,
    /// 0 when the identity initialization was never beaten.
    pub best_epoch: usize,
    pub epochs: Vec<EpochStat>,
    pub val_nll: Vec<f64>,
}

/// Summed masked NLL of one sample and optionally its gradient with respect
/// to the raw network output.
fn sample_nll(o: &Tensor, s: &LtsSample, scale: f64, want_grad: bool) -> (f64, Option<Tensor>) {
    let mut g = want_grad.then(|| Tensor::zeros(1, o.height(), o.width()));
    let od = o.data();
    let mut total = 0.0;
    for i in s.mask.indices() {
        let t = temperature_of(od[i]);
        let z = s.z.pixel(i);
        let y = s.truth.labels()[i] as usize;
        let u = [z[0] / t, z[1] / t, z[2] / t];
        let m = u[0].max(u[1]).max(u[2]);
        let e = [(u[0] - m).exp(), (u[1] - m).exp(), (u[2] - m).exp()];
        let se = e[0] + e[1] + e[2];
        total += m + se.ln() - u[y];
        if let Some(g) = g.as_mut() {
            let mut dl_dt = 0.0;
            for k in 0..NUM_CLASSES {
                let d = e[k] / se - if k == y { 1.0 } else { 0.0 };
                dl_dt -= d * z[k] / (t * t);
            }
            g.data_mut()[i] = scale * dl_dt * dtemperature(od[i]);
        }
    }
    (total, g)
}

/// Mean masked-pixel NLL of the field over `samples`.
pub fn field_nll(field: &TemperatureField, samples: &[LtsSample]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for s in samples {
        let o = field.raw(&s.x, &s.z)?;
        total += sample_nll(&o, s, 1.0, false).0;
        n += s.mask.count();
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(total / n as f64)
}

/// Adam on the masked NLL from the `T ≡ 1` initialization, returning the
/// parameters with the lowest NLL on `val` (the initialization included).
pub fn fit_local_temperature(
    train: &[LtsSample],
    val: &[LtsSample],
    lead_time: u8,
    cfg: &LtsConfig,
) -> Result<(TemperatureField, LtsLog)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.channels == 0 {
        return Err(Error::Validation("LTS epochs, batch size and channels must be positive".into()));
    }
    if !(cfg.learning_rate >= 0.0) || !cfg.learning_rate.is_finite() {
        return Err(Error::Validation(format!("LTS learning rate {} is invalid", cfg.learning_rate)));
    }
    let mut field = TemperatureField::identity(lead_time, cfg.channels, cfg.seed)?;
    let initial_nll = field_nll(&field, val)?;
    let mut best = (initial_nll, 0usize, field.net.weights.clone());
    let mut opt = Adam::new(field.net.weights.len(), cfg.learning_rate, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x175);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = LtsLog {
        initial_nll,
        best_nll: initial_nll,
        best_epoch: 0,
        epochs: Vec::with_capacity(cfg.epochs),
        val_nll: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_pixels = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let pixels: usize = batch.iter().map(|&i| train[i].mask.count()).sum();
            let scale = 1.0 / pixels.max(1) as f64;
            let mut grad = vec![0.0; field.net.weights.len()];
            for &i in batch {
                let s = &train[i];
                field.check(&s.x, &s.z)?;
                let tape = field.net.forward(&Tensor::concat(&[&s.z.z, &s.x])?)?;
                let (loss, g) = sample_nll(tape.output(0), s, scale, true);
                let pg = field.net.backward(&tape, vec![g], true, false)?;
                for (a, b) in grad.iter_mut().zip(pg.params.expect("requested")) {
                    *a += b;
                }
                epoch_loss += loss;
            }
            epoch_pixels += pixels;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingFailure {
                    epoch,
                    reason: "non-finite LTS gradient".into(),
                });
            }
            opt.step(&mut field.net.weights, &grad);
        }
        let loss = epoch_loss / epoch_pixels.max(1) as f64;
        let v = field_nll(&field, val)?;
        if !loss.is_finite() || !v.is_finite() {
            return Err(Error::TrainingFailure {
                epoch,
                reason: format!("LTS loss is {loss}, validation NLL {v}"),
            });
        }
        log::debug!("LTS lead {lead_time} epoch {epoch}: train {loss:.5}, val {v:.5}");
        log.epochs.push(EpochStat { epoch, loss });
        log.val_nll.push(v);
        if v < best.0 {
            best = (v, epoch, field.net.weights.clone());
        }
    }
    field.net.weights = best.2;
    field.net.round_to_f32();
    log.best_nll = field_nll(&field, val)?;
    log.best_epoch = best.1;
    if log.best_nll > initial_nll {
        // f32 rounding pushed the chosen weights above the identity
        field = TemperatureField::identity(lead_time, cfg.channels, cfg.seed)?;
        log.best_nll = initial_nll;
        log.best_epoch = 0;
    }
    Ok((field, log))
}
