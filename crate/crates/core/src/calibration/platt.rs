use serde::{Deserialize, Serialize};

use super::PixelSet;
use crate::error::{Error, Result};
use crate::grid::{check_lead, LogitGrid, ProbGrid, Tensor, NUM_CLASSES};

/// One-vs-rest Platt scaling `σ(a_k z_k + b_k)` per class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlattParams {
    pub a: [f64; NUM_CLASSES],
    pub b: [f64; NUM_CLASSES],
    pub lead_time: u8,
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^s)` without overflow.
fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

impl PlattParams {
    pub fn identity(lead_time: u8) -> Self {
        PlattParams {
            a: [1.0; NUM_CLASSES],
            b: [0.0; NUM_CLASSES],
            lead_time,
        }
    }

    /// Per-class calibrated scores before renormalization.
    pub fn scores(&self, z: [f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
        std::array::from_fn(|k| sigmoid(self.a[k] * z[k] + self.b[k]))
    }

    /// Scores renormalized to sum to one.
    pub fn probabilities(&self, z: [f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
        let q = self.scores(z);
        let s = q[0] + q[1] + q[2];
        if s > 0.0 {
            q.map(|v| v / s)
        } else {
            [1.0 / 3.0; NUM_CLASSES]
        }
    }

    pub fn apply(&self, z: &LogitGrid) -> ProbGrid {
        let (h, w) = z.dims();
        let n = h * w;
        let mut p = Tensor::zeros(NUM_CLASSES, h, w);
        let out = p.data_mut();
        for i in 0..n {
            let q = self.probabilities(z.pixel(i));
            for k in 0..NUM_CLASSES {
                out[k * n + i] = q[k];
            }
        }
        ProbGrid {
            p,
            lead_time: z.lead_time,
        }
    }
}

/// Binary Platt fit with Platt's smoothed targets, by damped Newton with a
/// backtracking line search. Returns `(a, b)` of `σ(a s + b)`.
pub fn fit_binary(scores: &[f64], positive: &[bool]) -> Result<(f64, f64)> {
    if scores.is_empty() || scores.len() != positive.len() {
        return Err(Error::InvalidInput("Platt fit needs matching, nonempty inputs".into()));
    }
    let n_pos = positive.iter().filter(|p| **p).count() as f64;
    let n_neg = positive.len() as f64 - n_pos;
    let hi = (n_pos + 1.0) / (n_pos + 2.0);
    let lo = 1.0 / (n_neg + 2.0);
    let t: Vec<f64> = positive.iter().map(|p| if *p { hi } else { lo }).collect();
    let nll = |a: f64, b: f64| -> f64 {
        scores
            .iter()
            .zip(&t)
            .map(|(z, t)| {
                let s = a * z + b;
                softplus(s) - t * s
            })
            .sum()
    };
    let mut a = 0.0;
    let mut b = ((n_pos + 1.0) / (n_neg + 1.0)).ln();
    let mut f = nll(a, b);
    for _ in 0..100 {
        let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 1e-12, 0.0, 1e-12);
        for (z, t) in scores.iter().zip(&t) {
            let p = sigmoid(a * z + b);
            let d = p - t;
            ga += d * z;
            gb += d;
            let w = p * (1.0 - p);
            haa += w * z * z;
            hab += w * z;
            hbb += w;
        }
        if ga.abs() < 1e-5 && gb.abs() < 1e-5 {
            break;
        }
        let det = haa * hbb - hab * hab;
        let da = -(hbb * ga - hab * gb) / det;
        let db = -(-hab * ga + haa * gb) / det;
        let slope = ga * da + gb * db;
        let mut step = 1.0;
        loop {
            let (na, nb) = (a + step * da, b + step * db);
            let nf = nll(na, nb);
            if nf < f + 1e-4 * step * slope {
                a = na;
                b = nb;
                f = nf;
                break;
            }
            step /= 2.0;
            if step < 1e-10 {
                log::debug!("Platt line search stalled");
                return Ok((a, b));
            }
        }
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::TrainingFailure {
            epoch: 0,
            reason: "Platt parameters diverged".into(),
        });
    }
    Ok((a, b))
}

pub fn fit_platt(set: &PixelSet, lead_time: u8) -> Result<PlattParams> {
    check_lead(lead_time)?;
    if set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for w in set.degeneracy_warnings() {
        log::warn!("Platt fit at lead {lead_time}: {w}");
    }
    let mut out = PlattParams::identity(lead_time);
    for k in 0..NUM_CLASSES {
        let s: Vec<f64> = set.logits.iter().map(|z| z[k]).collect();
        let y: Vec<bool> = set.labels.iter().map(|l| *l as usize == k).collect();
        let (a, b) = fit_binary(&s, &y)?;
        out.a[k] = a;
        out.b[k] = b;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn recovers_generating_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = Normal::new(0.0, 2.0).unwrap();
        let (a0, b0) = (1.5, -1.0);
        let s: Vec<f64> = (0..10_000).map(|_| d.sample(&mut rng)).collect();
        let y: Vec<bool> = s.iter().map(|z| rng.random::<f64>() < sigmoid(a0 * z + b0)).collect();
        let (a, b) = fit_binary(&s, &y).unwrap();
        assert!((a / a0 - 1.0).abs() < 0.05, "a = {a}");
        assert!((b / b0 - 1.0).abs() < 0.05, "b = {b}");
    }

    #[test]
    fn all_positive_tends_to_one() {
        let s: Vec<f64> = (0..1000).map(|i| (i as f64 / 100.0) - 5.0).collect();
        let (a, b) = fit_binary(&s, &vec![true; 1000]).unwrap();
        for z in [-5.0, 0.0, 5.0] {
            assert!(sigmoid(a * z + b) > 0.99);
        }
    }

    #[test]
    fn identity_gives_raw_sigmoid() {
        let p = PlattParams::identity(1);
        let z = [0.3, -1.2, 2.0];
        assert_eq!(p.scores(z), [sigmoid(0.3), sigmoid(-1.2), sigmoid(2.0)]);
        let q = p.probabilities(z);
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
