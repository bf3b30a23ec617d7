//! Running means and variances with a reduction order that does not depend
//! on how many threads produced the draws.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Draws are grouped into chunks of this size; chunks are merged in index
/// order, so results are identical for any thread count.
const CHUNK: u64 = 16;

/// Per-entry mean and sum of squared deviations (Welford / Chan et al.).
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    pub fn new(len: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.mean.len());
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let d = other.mean[i] - self.mean[i];
            self.mean[i] += d * nb / n;
            self.m2[i] += other.m2[i] + d * d * na * nb / n;
        }
        self.count += other.count;
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Unbiased variance, `k − 1` in the denominator; zero for fewer than two draws.
    pub fn variance(&self) -> Vec<f64> {
        if self.count < 2 {
            return vec![0.0; self.mean.len()];
        }
        let d = (self.count - 1) as f64;
        self.m2.iter().map(|s| s / d).collect()
    }

    pub fn into_parts(self) -> (Vec<f64>, Vec<f64>, usize) {
        let var = self.variance();
        (self.mean, var, self.count)
    }
}

/// Moments of `draw(0), …, draw(samples − 1)`, evaluated in parallel.
pub fn parallel_moments<F>(len: usize, samples: usize, draw: F) -> Result<Moments>
where
    F: Fn(u64) -> Result<Vec<f64>> + Sync,
{
    let samples = samples as u64;
    let chunks: Vec<Moments> = (0..samples.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut m = Moments::new(len);
            for k in c * CHUNK..((c + 1) * CHUNK).min(samples) {
                let x = draw(k)?;
                if x.len() != len {
                    return Err(Error::Contract(format!("draw {k} has length {}, expected {len}", x.len())));
                }
                m.push(&x);
            }
            Ok(m)
        })
        .collect::<Result<_>>()?;
    let mut total = Moments::new(len);
    for c in &chunks {
        total.merge(c);
    }
    Ok(total)
}
