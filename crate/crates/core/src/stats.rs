//! Sample statistics with a fixed reduction order.

use serde::{Deserialize, Serialize};

/// Mean of a sample together with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Estimate {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self { mean: f64::NAN, stderr: f64::NAN, n };
        }
        let mean = pairwise_sum(xs) / n as f64;
        let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
        let var = if n > 1 { pairwise_sum(&dev) / (n - 1) as f64 } else { 0.0 };
        Self { mean, stderr: (var / n as f64).sqrt(), n }
    }

    /// |mean − target| / stderr, or 0 when both vanish.
    pub fn z_score(&self, target: f64) -> f64 {
        let d = (self.mean - target).abs();
        if d == 0.0 {
            0.0
        } else {
            d / self.stderr
        }
    }
}

/// Pairwise summation; the result depends only on the order of `xs`.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        xs.iter().sum()
    } else {
        let m = xs.len() / 2;
        pairwise_sum(&xs[..m]) + pairwise_sum(&xs[m..])
    }
}

/// Samples per counter-based chunk in [`mc_estimate`].
pub const MC_CHUNK: usize = 4096;

/// Monte-Carlo mean of `f` over `samples` draws. Chunk `k` draws from the
/// stream `(seed, ids.., k)` and chunk sums are combined in index order, so
/// the result does not depend on the number of worker threads.
pub fn mc_estimate<F>(samples: usize, seed: u64, ids: &[u64], f: F) -> crate::Result<Estimate>
where
    F: Fn(&mut rand_chacha::ChaCha8Rng) -> f64 + Sync,
{
    use rayon::prelude::*;
    let chunks = samples.div_ceil(MC_CHUNK);
    let parts: Vec<(f64, f64, bool)> = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let mut key = ids.to_vec();
            key.push(k as u64);
            let mut rng = crate::rng::stream(seed, &key);
            let n = MC_CHUNK.min(samples - k * MC_CHUNK);
            let xs: Vec<f64> = (0..n).map(|_| f(&mut rng)).collect();
            let finite = xs.iter().all(|x| x.is_finite());
            let s = pairwise_sum(&xs);
            let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
            (s, pairwise_sum(&sq), finite)
        })
        .collect();
    if parts.iter().any(|p| !p.2) {
        return Err(crate::KinError::NonFiniteSample);
    }
    let n = samples as f64;
    let sums: Vec<f64> = parts.iter().map(|p| p.0).collect();
    let sqs: Vec<f64> = parts.iter().map(|p| p.1).collect();
    let mean = pairwise_sum(&sums) / n;
    let var = ((pairwise_sum(&sqs) - n * mean * mean) / (n - 1.0).max(1.0)).max(0.0);
    Ok(Estimate { mean, stderr: (var / n).sqrt(), n: samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_stderr() {
        let e = Estimate::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.mean, 2.5);
        assert!((e.stderr - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(Estimate::of(&[0.0, 0.0]).z_score(0.0), 0.0);
    }

    #[test]
    fn pairwise_matches_naive_on_integers() {
        let xs: Vec<f64> = (0..1000).map(f64::from).collect();
        assert_eq!(pairwise_sum(&xs), 499_500.0);
    }
}
