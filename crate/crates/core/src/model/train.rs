use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::Adam;
use super::{segmentation_architecture, SegmentationShape};
use crate::datagen::Scenario;
use crate::error::{Error, Result};
use crate::grid::{rain_to_classes, softmax3, ClassGrid, Tensor, ValidityMask, NUM_CLASSES};
use crate::net::NetworkParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Per-class loss weights; `None` means uniform.
    #[serde(default)]
    pub class_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub network: SegmentationShape,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            epochs: 30,
            batch_size: 8,
            seed: 0,
            class_weights: None,
            network: SegmentationShape::default(),
        }
    }
}

impl TrainConfig {
    /// Optimizer settings used for fine-tuning a large pre-trained network;
    /// far too small a step for training the surrogate from scratch.
    pub fn large_model_finetune() -> Self {
        TrainConfig {
            learning_rate: 1e-6,
            weight_decay: 1e-8,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Validation(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Validation("weight decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub config_hash: String,
    pub epochs: Vec<EpochStat>,
}

impl TrainLog {
    pub fn first_loss(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

pub(crate) fn class_targets(s: &Scenario) -> Result<Vec<ClassGrid>> {
    s.truth.iter().map(rain_to_classes).collect()
}

/// Masked, class-weighted mean cross-entropy over all heads, and its
/// gradient with respect to each head's logits.
fn heads_loss(
    outputs: &[&Tensor],
    targets: &[ClassGrid],
    mask: &ValidityMask,
    weights: &[f64; NUM_CLASSES],
    want_grad: bool,
) -> (f64, Vec<Option<Tensor>>) {
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(outputs.len());
    let mut norm = 0.0;
    for t in targets {
        for i in mask.indices() {
            norm += weights[t.labels()[i] as usize];
        }
    }
    for (z, t) in outputs.iter().zip(targets) {
        let n = z.plane_len();
        let d = z.data();
        let mut g = want_grad.then(|| {
            let [c, h, w] = z.shape();
            Tensor::zeros(c, h, w)
        });
        for i in mask.indices() {
            let y = t.labels()[i] as usize;
            let p = softmax3([d[i], d[n + i], d[2 * n + i]]);
            let w = weights[y] / norm;
            loss -= w * p[y].max(1e-300).ln();
            if let Some(g) = g.as_mut() {
                let gd = g.data_mut();
                for k in 0..NUM_CLASSES {
                    gd[k * n + i] = w * (p[k] - if k == y { 1.0 } else { 0.0 });
                }
            }
        }
        grads.push(g);
    }
    (loss, grads)
}

fn class_weight_array(cfg: &TrainConfig) -> Result<[f64; NUM_CLASSES]> {
    match &cfg.class_weights {
        None => Ok([1.0; NUM_CLASSES]),
        Some(w) if w.len() == NUM_CLASSES && w.iter().all(|v| *v > 0.0 && v.is_finite()) => {
            Ok([w[0], w[1], w[2]])
        }
        Some(w) => Err(Error::Validation(format!(
            "segmentation class weights {w:?} must be 3 positive values"
        ))),
    }
}

/// Mean masked cross-entropy of `net` over `data` (all six heads).
pub fn segmentation_loss(net: &NetworkParams, data: &[Scenario]) -> Result<f64> {
    let mut total = 0.0;
    for s in data {
        let targets = class_targets(s)?;
        let outs = net.run(s.inputs.tensor())?;
        let refs: Vec<&Tensor> = outs.iter().collect();
        total += heads_loss(&refs, &targets, &s.mask, &[1.0; NUM_CLASSES], false).0;
    }
    Ok(total / data.len().max(1) as f64)
}

/// Trains the surrogate from a seeded initialization with minibatch Adam.
/// Returned weights are rounded to `f32` so they survive persistence
/// unchanged.
pub fn train_segmentation(data: &[Scenario], cfg: &TrainConfig) -> Result<(NetworkParams, TrainLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let weights = class_weight_array(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = NetworkParams::init(segmentation_architecture(cfg.network), &mut rng);
    net.round_to_f32();
    let targets = data.iter().map(class_targets).collect::<Result<Vec<_>>>()?;
    let mut opt = Adam::new(net.weights.len(), cfg.learning_rate, cfg.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        epochs: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; net.weights.len()];
            for &i in batch {
                let s = &data[i];
                let tape = net.forward(s.inputs.tensor())?;
                let (loss, og) = heads_loss(&tape.outputs(), &targets[i], &s.mask, &weights, true);
                let g = net.backward(&tape, og, true, false)?;
                for (a, b) in grad.iter_mut().zip(g.params.expect("requested")) {
                    *a += b / batch.len() as f64;
                }
                epoch_loss += loss;
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingFailure {
                    epoch,
                    reason: "non-finite gradient".into(),
                });
            }
            opt.step(&mut net.weights, &grad);
        }
        let loss = epoch_loss / data.len() as f64;
        if !loss.is_finite() {
            return Err(Error::TrainingFailure {
                epoch,
                reason: format!("loss is {loss}"),
            });
        }
        log::debug!("segmentation epoch {epoch}: loss {loss:.5}");
        log.epochs.push(EpochStat { epoch, loss });
    }
    net.round_to_f32();
    Ok((net, log))
}
