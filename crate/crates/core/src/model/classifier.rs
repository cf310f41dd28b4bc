use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::optim::Adam;
use super::sampler::make_sampler;
use super::train::{EpochStat, TrainConfig, TrainLog};
use super::{load_params, save_params, ENCODER_OPS, ENCODER_OUTPUT};
use crate::datagen::{RainType, Scenario};
use crate::error::{Error, Result};
use crate::grdf::{Grdf, Header};
use crate::grid::{argmax_lowest, softmax, FusedInput, Tensor};
use crate::net::NetworkParams;

/// Rain types recognised by the classifier (five rain types plus no rain).
pub const NUM_TYPES: usize = 6;

/// Segmentation encoder, global average pool and a linear layer to six
/// type logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub encoder: NetworkParams,
    /// `NUM_TYPES × C` weights followed by `NUM_TYPES` biases.
    pub head: Vec<f64>,
}

impl ClassifierParams {
    /// Copies the encoder of a segmentation network and draws a fresh head.
    pub fn from_segmentation(seg: &NetworkParams, seed: u64) -> Result<Self> {
        let arch = seg.arch.prefix(ENCODER_OPS, ENCODER_OUTPUT)?;
        let n = arch.param_count();
        let encoder = NetworkParams::from_weights(arch, seg.weights[..n].to_vec())?;
        let c = encoder.arch.output_channels()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, (1.0 / c as f64).sqrt()).unwrap();
        let mut head: Vec<f64> = (0..NUM_TYPES * c).map(|_| d.sample(&mut rng)).collect();
        head.extend([0.0; NUM_TYPES]);
        for w in &mut head {
            *w = *w as f32 as f64;
        }
        Ok(ClassifierParams { encoder, head })
    }

    fn channels(&self) -> usize {
        self.encoder.arch.output_channels()[0]
    }

    fn logits_from_pooled(&self, pooled: &[f64]) -> [f64; NUM_TYPES] {
        let c = pooled.len();
        let mut z = [0.0; NUM_TYPES];
        for (t, zt) in z.iter_mut().enumerate() {
            *zt = self.head[NUM_TYPES * c + t]
                + pooled
                    .iter()
                    .enumerate()
                    .map(|(j, p)| self.head[t * c + j] * p)
                    .sum::<f64>();
        }
        z
    }

    pub fn logits(&self, x: &FusedInput) -> Result<[f64; NUM_TYPES]> {
        let feats = self.encoder.run(x.tensor())?.remove(0);
        Ok(self.logits_from_pooled(&pool(&feats)))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_params(dir, "classifier_encoder", &self.encoder)?;
        Grdf::new(Header::new("weights", vec![self.head.len()]), self.head.clone())?
            .write(&dir.join("classifier_head.grdf"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let encoder = load_params(dir, "classifier_encoder")?;
        let head = Grdf::read(&dir.join("classifier_head.grdf"))?.values;
        let c = encoder.arch.output_channels()[0];
        if head.len() != NUM_TYPES * c + NUM_TYPES {
            return Err(Error::Format(format!(
                "classifier head has {} weights, expected {}",
                head.len(),
                NUM_TYPES * c + NUM_TYPES
            )));
        }
        Ok(ClassifierParams { encoder, head })
    }
}

fn pool(feats: &Tensor) -> Vec<f64> {
    let n = feats.plane_len() as f64;
    (0..feats.channels())
        .map(|c| feats.channel(c).iter().sum::<f64>() / n)
        .collect()
}

/// Predicted type (lowest index on ties) and the six type probabilities.
pub fn classify_type(clf: &ClassifierParams, x: &FusedInput) -> Result<(RainType, [f64; NUM_TYPES])> {
    let z = clf.logits(x)?;
    let p = softmax(&z)?;
    let mut probs = [0.0; NUM_TYPES];
    probs.copy_from_slice(&p);
    let label = RainType::from_index(argmax_lowest(&probs)).expect("six types");
    Ok((label, probs))
}

/// Fine-tunes the segmentation encoder plus a new head with class-weighted
/// cross-entropy on minibatches drawn by the inverse-count sampler.
///
/// Without explicit weights the loss is unweighted: the sampler already
/// favours rare types, and inverse-count weights on top of it starve the
/// common types.
pub fn train_classifier(
    data: &[Scenario],
    seg: &NetworkParams,
    cfg: &TrainConfig,
) -> Result<(ClassifierParams, TrainLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels: Vec<usize> = data.iter().map(|s| s.label.index()).collect();
    let mut counts = [0usize; NUM_TYPES];
    for &l in &labels {
        counts[l] += 1;
    }
    let class_weights: Vec<f64> = match &cfg.class_weights {
        Some(w) if w.len() == NUM_TYPES && w.iter().all(|v| *v > 0.0) => w.clone(),
        Some(w) => {
            return Err(Error::Validation(format!(
                "classifier class weights {w:?} must be 6 positive values"
            )))
        }
        None => vec![1.0; NUM_TYPES],
    };
    let sampler = make_sampler(&counts, &labels)?;
    let mut clf = ClassifierParams::from_segmentation(seg, cfg.seed)?;
    let c = clf.channels();
    let n_enc = clf.encoder.weights.len();
    let mut params: Vec<f64> = clf.encoder.weights.iter().chain(&clf.head).copied().collect();
    let mut opt = Adam::new(params.len(), cfg.learning_rate, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_C1A5);
    let mut log = TrainLog {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        epochs: Vec::new(),
    };
    let draws = data.len();
    for epoch in 1..=cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_weight = 0.0;
        let mut done = 0;
        while done < draws {
            let b = cfg.batch_size.min(draws - done);
            done += b;
            let batch: Vec<usize> = (0..b).map(|_| sampler.draw(&mut rng)).collect();
            let wsum: f64 = batch.iter().map(|&i| class_weights[labels[i]]).sum();
            let mut grad = vec![0.0; params.len()];
            for &i in &batch {
                let y = labels[i];
                let w = class_weights[y] / wsum;
                let tape = clf.encoder.forward(data[i].inputs.tensor())?;
                let feats = tape.output(0);
                let pooled = pool(feats);
                let z = clf.logits_from_pooled(&pooled);
                let p = softmax(&z)?;
                epoch_loss += class_weights[y] * -p[y].max(1e-300).ln();
                epoch_weight += class_weights[y];
                let dz: Vec<f64> = (0..NUM_TYPES)
                    .map(|t| w * (p[t] - if t == y { 1.0 } else { 0.0 }))
                    .collect();
                let hg = &mut grad[n_enc..];
                let mut dpool = vec![0.0; c];
                for t in 0..NUM_TYPES {
                    for j in 0..c {
                        hg[t * c + j] += dz[t] * pooled[j];
                        dpool[j] += dz[t] * clf.head[t * c + j];
                    }
                    hg[NUM_TYPES * c + t] += dz[t];
                }
                let [fc, fh, fw] = feats.shape();
                let n = (fh * fw) as f64;
                let mut df = Tensor::zeros(fc, fh, fw);
                for (j, dp) in dpool.iter().enumerate() {
                    df.channel_mut(j).fill(dp / n);
                }
                let g = clf.encoder.backward(&tape, vec![Some(df)], true, false)?;
                for (a, b) in grad[..n_enc].iter_mut().zip(g.params.expect("requested")) {
                    *a += b;
                }
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingFailure {
                    epoch,
                    reason: "non-finite gradient".into(),
                });
            }
            opt.step(&mut params, &grad);
            clf.encoder.weights.copy_from_slice(&params[..n_enc]);
            clf.head.copy_from_slice(&params[n_enc..]);
        }
        let loss = epoch_loss / epoch_weight;
        if !loss.is_finite() {
            return Err(Error::TrainingFailure {
                epoch,
                reason: format!("loss is {loss}"),
            });
        }
        log::debug!("classifier epoch {epoch}: weighted loss {loss:.5}");
        log.epochs.push(EpochStat { epoch, loss });
    }
    clf.encoder.round_to_f32();
    for w in &mut clf.head {
        *w = *w as f32 as f64;
    }
    Ok((clf, log))
}

/// Rows are true types, columns predicted types.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[usize; NUM_TYPES]; NUM_TYPES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..NUM_TYPES).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        self.trace() as f64 / self.total() as f64
    }

    pub fn row_sums(&self) -> [usize; NUM_TYPES] {
        let mut r = [0; NUM_TYPES];
        for (i, row) in self.counts.iter().enumerate() {
            r[i] = row.iter().sum();
        }
        r
    }
}

pub fn confusion_matrix(clf: &ClassifierParams, test: &[Scenario]) -> Result<ConfusionMatrix> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut m = ConfusionMatrix::default();
    for s in test {
        let (pred, _) = classify_type(clf, &s.inputs)?;
        m.counts[s.label.index()][pred.index()] += 1;
    }
    Ok(m)
}

/// Fraction of scenarios whose predicted type matches the label, computed
/// directly rather than through the confusion matrix.
pub fn accuracy(clf: &ClassifierParams, test: &[Scenario]) -> Result<f64> {
    let mut correct = 0usize;
    for s in test {
        if classify_type(clf, &s.inputs)?.0 == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}
