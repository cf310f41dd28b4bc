use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{argmax_lowest, ClassGrid, ProbGrid, ValidityMask};

pub const DEFAULT_BINS: usize = 10;

/// Bin of confidence `c` among `b` equal-width bins `(i/b, (i+1)/b]`;
/// zero falls in the first bin.
pub fn bin_index(c: f64, b: usize) -> usize {
    let i = (c * b as f64).ceil() as usize;
    i.clamp(1, b) - 1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub correct: usize,
    pub conf_sum: f64,
}

impl Bin {
    pub fn accuracy(&self) -> Option<f64> {
        (self.n > 0).then(|| self.correct as f64 / self.n as f64)
    }

    pub fn confidence(&self) -> Option<f64> {
        (self.n > 0).then(|| self.conf_sum / self.n as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub bins: Vec<Bin>,
    pub total: usize,
}

impl ReliabilityBins {
    /// `Σ (n_b / N) |acc_b − conf_b|`, evaluated as `Σ |correct_b − Σconf_b| / N`;
    /// empty bins contribute nothing.
    pub fn ece(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        self.bins
            .iter()
            .map(|b| (b.correct as f64 - b.conf_sum).abs())
            .sum::<f64>()
            / self.total as f64
    }
}

fn check(conf: &[f64], correct: &[bool], b: usize) -> Result<()> {
    if b == 0 {
        return Err(Error::InvalidParameter("bin count must be at least 1".into()));
    }
    if conf.len() != correct.len() {
        return Err(Error::InvalidInput(format!(
            "{} confidences for {} correctness flags",
            conf.len(),
            correct.len()
        )));
    }
    if let Some(c) = conf.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::InvalidInput(format!("confidence {c} outside [0, 1]")));
    }
    Ok(())
}

pub fn reliability_diagram(conf: &[f64], correct: &[bool], b: usize) -> Result<ReliabilityBins> {
    check(conf, correct, b)?;
    Ok(bins_of(conf.iter().copied().zip(correct.iter().copied()), b))
}

fn bins_of(samples: impl Iterator<Item = (f64, bool)>, b: usize) -> ReliabilityBins {
    let mut bins: Vec<Bin> = (0..b)
        .map(|i| Bin {
            lo: i as f64 / b as f64,
            hi: (i + 1) as f64 / b as f64,
            n: 0,
            correct: 0,
            conf_sum: 0.0,
        })
        .collect();
    // Neumaier compensation so bin sums are correctly rounded in practice
    let mut comp = vec![0.0; b];
    let mut total = 0;
    for (c, ok) in samples {
        let i = bin_index(c, b);
        let bin = &mut bins[i];
        bin.n += 1;
        bin.correct += ok as usize;
        let s = bin.conf_sum + c;
        comp[i] += if bin.conf_sum.abs() >= c.abs() {
            (bin.conf_sum - s) + c
        } else {
            (c - s) + bin.conf_sum
        };
        bin.conf_sum = s;
        total += 1;
    }
    for (bin, c) in bins.iter_mut().zip(comp) {
        bin.conf_sum += c;
    }
    ReliabilityBins { bins, total }
}

/// Full-population ECE.
pub fn ece(conf: &[f64], correct: &[bool], b: usize) -> Result<f64> {
    Ok(reliability_diagram(conf, correct, b)?.ece())
}

/// Repeated subsampling without replacement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EceSampling {
    pub length: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for EceSampling {
    fn default() -> Self {
        EceSampling {
            length: 250,
            repeats: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledEce {
    pub mean: f64,
    pub draws: Vec<f64>,
}

pub fn ece_sampled(
    conf: &[f64],
    correct: &[bool],
    b: usize,
    sampling: &EceSampling,
) -> Result<SampledEce> {
    check(conf, correct, b)?;
    if sampling.length == 0 || sampling.repeats == 0 {
        return Err(Error::InvalidParameter("ECE sampling needs positive length and repeats".into()));
    }
    if sampling.length > conf.len() {
        return Err(Error::InvalidParameter(format!(
            "ECE sample length {} exceeds {} available pixels",
            sampling.length,
            conf.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let draws: Vec<f64> = (0..sampling.repeats)
        .map(|_| {
            let idx = sample(&mut rng, conf.len(), sampling.length);
            bins_of(idx.iter().map(|i| (conf[i], correct[i])), b).ece()
        })
        .collect();
    Ok(SampledEce {
        mean: draws.iter().sum::<f64>() / draws.len() as f64,
        draws,
    })
}

/// Confidence and correctness of every valid pixel, predicted class being
/// the argmax of `p`.
pub fn pixel_samples(
    p: &ProbGrid,
    truth: &ClassGrid,
    mask: &ValidityMask,
) -> Result<(Vec<f64>, Vec<bool>)> {
    if p.dims() != truth.dims() || truth.dims() != (mask.height(), mask.width()) {
        return Err(Error::InvalidInput("probability, truth and mask shapes differ".into()));
    }
    let mut conf = Vec::with_capacity(mask.count());
    let mut correct = Vec::with_capacity(mask.count());
    for i in mask.indices() {
        let q = p.pixel(i);
        let k = argmax_lowest(&q);
        conf.push(q[k]);
        correct.push(k == truth.labels()[i] as usize);
    }
    Ok((conf, correct))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_case() {
        let mut conf = vec![0.9; 5];
        conf.extend([0.6; 5]);
        let correct = [true, true, true, false, false, true, true, true, false, false];
        assert_eq!(ece(&conf, &correct, 2).unwrap(), 0.15);
        let rb = reliability_diagram(&conf, &correct, 2).unwrap();
        assert_eq!(rb.bins[0].n, 0);
        assert_eq!(rb.bins[1].n, 10);
    }

    #[test]
    fn perfectly_calibrated_is_zero() {
        let conf = [0.75, 0.75, 0.75, 0.75, 0.25, 0.25, 0.25, 0.25];
        let correct = [true, true, true, false, true, false, false, false];
        assert_eq!(ece(&conf, &correct, 2).unwrap(), 0.0);
    }

    #[test]
    fn bin_edges_are_left_open() {
        assert_eq!(bin_index(0.5, 2), 0);
        assert_eq!(bin_index(0.5000001, 2), 1);
        assert_eq!(bin_index(1.0, 10), 9);
        assert_eq!(bin_index(0.0, 10), 0);
        assert_eq!(bin_index(0.1, 10), 0);
    }

    #[test]
    fn single_bin_is_global() {
        let conf = [0.2, 0.4, 0.9];
        let correct = [true, false, true];
        let rb = reliability_diagram(&conf, &correct, 1).unwrap();
        assert_eq!(rb.bins[0].n, 3);
        assert_eq!(rb.bins[0].accuracy(), Some(2.0 / 3.0));
        assert!((rb.bins[0].confidence().unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(ece(&[0.5], &[true], 0).is_err());
        assert!(ece(&[0.5], &[], 2).is_err());
        let s = EceSampling { length: 3, repeats: 1, seed: 0 };
        assert!(ece_sampled(&[0.5, 0.6], &[true, true], 2, &s).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_converges_at_full_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        use rand::Rng;
        let conf: Vec<f64> = (0..500).map(|_| rng.random_range(0.34..1.0)).collect();
        let correct: Vec<bool> = conf.iter().map(|c| rng.random::<f64>() < *c * 0.9).collect();
        let s = EceSampling { length: 250, repeats: 10, seed: 7 };
        let a = ece_sampled(&conf, &correct, 10, &s).unwrap();
        assert_eq!(a, ece_sampled(&conf, &correct, 10, &s).unwrap());
        assert_eq!(a.draws.len(), 10);
        let full = EceSampling { length: 500, ..s };
        let f = ece_sampled(&conf, &correct, 10, &full).unwrap();
        let exact = ece(&conf, &correct, 10).unwrap();
        assert!((f.mean - exact).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn bins_partition_and_ece_in_unit(
            data in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..200),
            b in 1usize..20,
        ) {
            let (conf, correct): (Vec<f64>, Vec<bool>) = data.into_iter().unzip();
            let rb = reliability_diagram(&conf, &correct, b).unwrap();
            prop_assert_eq!(rb.bins.iter().map(|b| b.n).sum::<usize>(), conf.len());
            let e = rb.ece();
            prop_assert!((0.0..=1.0).contains(&e));
            prop_assert_eq!(e, ece(&conf, &correct, b).unwrap());
        }
    }
}
