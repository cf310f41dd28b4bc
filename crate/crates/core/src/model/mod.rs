//! Surrogate nowcasting network and rainfall-type classifier.
//!
//! The segmentation network is a two-level encoder–decoder with skip
//! connections and six independent per-lead-time heads emitting three class
//! logits each. It is a desk-scale stand-in and makes no claim of
//! architectural fidelity to any operational model.

mod classifier;
mod optim;
mod sampler;
mod train;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use classifier::{
    accuracy, classify_type, confusion_matrix, train_classifier, ClassifierParams,
    ConfusionMatrix, NUM_TYPES,
};
pub use optim::Adam;
pub use sampler::{make_sampler, Sampler};
pub use train::{
    segmentation_loss, train_segmentation, EpochStat, TrainConfig, TrainLog,
};

use crate::error::{Error, Result};
use crate::grdf::{Grdf, Header};
use crate::grid::{FusedInput, LogitGrid, INPUT_CHANNELS, LEAD_TIMES, NUM_CLASSES};
use crate::net::{Architecture, NetworkParams, Op};

/// Channel widths of the surrogate network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationShape {
    /// Full-resolution features.
    pub c1: usize,
    /// Half-resolution features.
    pub c2: usize,
    /// Quarter-resolution (bottleneck) features.
    pub c3: usize,
}

impl Default for SegmentationShape {
    fn default() -> Self {
        SegmentationShape {
            c1: 8,
            c2: 16,
            c3: 16,
        }
    }
}

/// Number of leading ops forming the encoder, and the encoder output buffer.
pub const ENCODER_OPS: usize = 11;
pub const ENCODER_OUTPUT: usize = 11;

pub fn segmentation_architecture(s: SegmentationShape) -> Architecture {
    let SegmentationShape { c1, c2, c3 } = s;
    let mut ops = vec![
        // encoder
        Op::Conv3x3 { src: 0, dst: 1, cin: INPUT_CHANNELS, cout: c1 },
        Op::BiasAdd { src: 1, dst: 2, channels: c1 },
        Op::Relu { src: 2, dst: 3 },
        Op::Down2 { src: 3, dst: 4 },
        Op::Conv3x3 { src: 4, dst: 5, cin: c1, cout: c2 },
        Op::BiasAdd { src: 5, dst: 6, channels: c2 },
        Op::Relu { src: 6, dst: 7 },
        Op::Down2 { src: 7, dst: 8 },
        Op::Conv3x3 { src: 8, dst: 9, cin: c2, cout: c3 },
        Op::BiasAdd { src: 9, dst: 10, channels: c3 },
        Op::Relu { src: 10, dst: 11 },
        // decoder
        Op::Up2 { src: 11, dst: 12 },
        Op::Concat { srcs: vec![12, 7], dst: 13 },
        Op::Conv3x3 { src: 13, dst: 14, cin: c3 + c2, cout: c2 },
        Op::BiasAdd { src: 14, dst: 15, channels: c2 },
        Op::Relu { src: 15, dst: 16 },
        Op::Up2 { src: 16, dst: 17 },
        Op::Concat { srcs: vec![17, 3], dst: 18 },
        Op::Conv3x3 { src: 18, dst: 19, cin: c2 + c1, cout: c1 },
        Op::BiasAdd { src: 19, dst: 20, channels: c1 },
        Op::Relu { src: 20, dst: 21 },
    ];
    let mut outputs = Vec::new();
    for k in 0..LEAD_TIMES {
        ops.push(Op::Linear { src: 21, dst: 22 + k, cin: c1, cout: NUM_CLASSES });
        outputs.push(22 + k);
    }
    Architecture::new(INPUT_CHANNELS, ops, outputs).expect("segmentation architecture is valid")
}

/// Checks that `net` has the six-head segmentation output contract.
pub fn check_segmentation(net: &NetworkParams) -> Result<()> {
    let outs = net.arch.output_channels();
    if outs.len() != LEAD_TIMES || outs.iter().any(|c| *c != NUM_CLASSES) {
        return Err(Error::InvalidInput(format!(
            "segmentation network must have {LEAD_TIMES} heads of {NUM_CLASSES} logits, has {outs:?}"
        )));
    }
    if net.arch.input_channels != INPUT_CHANNELS {
        return Err(Error::InvalidInput("segmentation network must read 12 channels".into()));
    }
    Ok(())
}

/// Logits for lead times 1..=6.
pub fn predict(net: &NetworkParams, x: &FusedInput) -> Result<Vec<LogitGrid>> {
    check_segmentation(net)?;
    net.run(x.tensor())?
        .into_iter()
        .enumerate()
        .map(|(k, z)| LogitGrid::new(z, k as u8 + 1))
        .collect()
}

/// Writes `<dir>/<name>.grdf` (flat weights) and `<dir>/<name>.arch.json`.
pub fn save_params(dir: &Path, name: &str, net: &NetworkParams) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Grdf::new(
        Header::new("weights", vec![net.weights.len()]),
        net.weights.clone(),
    )?
    .write(&dir.join(format!("{name}.grdf")))?;
    let p = dir.join(format!("{name}.arch.json"));
    fs::write(&p, net.arch.to_json()).map_err(|e| Error::io(&p, e))
}

pub fn load_params(dir: &Path, name: &str) -> Result<NetworkParams> {
    let p = dir.join(format!("{name}.arch.json"));
    let arch = Architecture::from_json(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?;
    let g = Grdf::read(&dir.join(format!("{name}.grdf")))?;
    NetworkParams::from_weights(arch, g.values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{argmax_class, Tensor};
    use rand::SeedableRng;

    #[test]
    fn zero_net_predicts_uniform() {
        let net = NetworkParams::zeros(segmentation_architecture(SegmentationShape::default()));
        let x = FusedInput::new(Tensor::zeros(12, 16, 16)).unwrap();
        let out = predict(&net, &x).unwrap();
        assert_eq!(out.len(), 6);
        for (k, lg) in out.iter().enumerate() {
            assert_eq!(lg.lead_time as usize, k + 1);
            assert_eq!(lg.z.shape(), [3, 16, 16]);
            assert!(lg.z.data().iter().all(|v| *v == 0.0));
            let p = lg.softmax();
            assert!(p.p.data().iter().all(|v| *v == 1.0 / 3.0));
            assert!(argmax_class(&p).labels().iter().all(|l| *l == 0));
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let net = NetworkParams::zeros(segmentation_architecture(SegmentationShape::default()));
        let x = FusedInput::new(Tensor::zeros(12, 18, 16)).unwrap();
        assert!(predict(&net, &x).is_err());
    }

    #[test]
    fn params_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut net = NetworkParams::init(segmentation_architecture(SegmentationShape::default()), &mut rng);
        net.round_to_f32();
        save_params(dir.path(), "seg", &net).unwrap();
        assert_eq!(load_params(dir.path(), "seg").unwrap(), net);
    }

    #[test]
    fn encoder_prefix_shares_weights() {
        let arch = segmentation_architecture(SegmentationShape::default());
        let enc = arch.prefix(ENCODER_OPS, ENCODER_OUTPUT).unwrap();
        assert_eq!(enc.output_channels(), vec![16]);
        assert_eq!(&arch.ops[..ENCODER_OPS], &enc.ops[..]);
    }
}
