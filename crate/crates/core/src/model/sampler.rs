use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};

/// Multinomial sampler over training indices whose class probabilities are
/// proportional to the inverse class counts; uniform within a class.
#[derive(Clone, Debug)]
pub struct Sampler {
    class_probs: Vec<f64>,
    members: Vec<Vec<usize>>,
    class_dist: WeightedIndex<f64>,
}

impl Sampler {
    pub fn class_probabilities(&self) -> &[f64] {
        &self.class_probs
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let c = self.class_dist.sample(rng);
        let m = &self.members[c];
        m[rng.random_range(0..m.len())]
    }
}

/// Builds the sampler from declared per-class counts and the class label of
/// each training index. A label whose declared count is zero is an error.
pub fn make_sampler(class_counts: &[usize], labels: &[usize]) -> Result<Sampler> {
    let k = class_counts.len();
    let mut members = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::InvalidInput(format!("label {l} outside {k} classes")));
        }
        if class_counts[l] == 0 {
            return Err(Error::InvalidInput(format!(
                "class {l} present in data but declared with zero count"
            )));
        }
        members[l].push(i);
    }
    let inv: Vec<f64> = class_counts
        .iter()
        .zip(&members)
        .map(|(&c, m)| if c > 0 && !m.is_empty() { 1.0 / c as f64 } else { 0.0 })
        .collect();
    let total: f64 = inv.iter().sum();
    if total == 0.0 {
        return Err(Error::EmptyDataset);
    }
    let class_probs: Vec<f64> = inv.iter().map(|v| v / total).collect();
    let class_dist = WeightedIndex::new(&class_probs)
        .map_err(|e| Error::InvalidInput(format!("sampler weights: {e}")))?;
    Ok(Sampler {
        class_probs,
        members,
        class_dist,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::DEFAULT_COUNTS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn labels_for(counts: &[usize]) -> Vec<usize> {
        counts
            .iter()
            .enumerate()
            .flat_map(|(c, n)| std::iter::repeat_n(c, *n))
            .collect()
    }

    #[test]
    fn inverse_count_ratio() {
        let s = make_sampler(&DEFAULT_COUNTS, &labels_for(&DEFAULT_COUNTS)).unwrap();
        let p = s.class_probabilities();
        assert!((p[0] / p[1] - 280.0 / 29.0).abs() < 1e-12);
        assert!((p[0] / p[1] - 9.655).abs() < 1e-3);
    }

    #[test]
    fn equal_counts_uniform() {
        let s = make_sampler(&[5; 6], &labels_for(&[5; 6])).unwrap();
        for p in s.class_probabilities() {
            assert!((p - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_declared_count_rejected() {
        assert!(make_sampler(&[0, 3], &[0, 1, 1, 1]).is_err());
    }

    #[test]
    fn empirical_frequencies_follow_law() {
        let labels = labels_for(&DEFAULT_COUNTS);
        let s = make_sampler(&DEFAULT_COUNTS, &labels).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut hist = [0usize; 6];
        for _ in 0..n {
            hist[labels[s.draw(&mut rng)]] += 1;
        }
        let p = s.class_probabilities();
        let mut chi2 = 0.0;
        for c in 0..6 {
            let freq = hist[c] as f64 / n as f64;
            assert!((freq - p[c]).abs() / p[c] < 0.02, "class {c}: {freq} vs {}", p[c]);
            let e = p[c] * n as f64;
            chi2 += (hist[c] as f64 - e).powi(2) / e;
        }
        let pval = 1.0 - ChiSquared::new(5.0).unwrap().cdf(chi2);
        assert!(pval > 0.01, "chi2 = {chi2}, p = {pval}");
    }
}
