//! Probe distributions and per-draw random streams.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Distributions with `E[v vᵀ] = I`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoiseDist {
    Gaussian,
    /// Independent ±1 entries.
    Rademacher,
}

impl NoiseDist {
    pub fn sample(self, rng: &mut impl Rng) -> f64 {
        match self {
            NoiseDist::Gaussian => rng.sample(StandardNormal),
            NoiseDist::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }

    pub fn fill(self, rng: &mut impl Rng, out: &mut [f64]) {
        for v in out {
            *v = self.sample(rng);
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NoiseDist::Gaussian => "gaussian",
            NoiseDist::Rademacher => "binary",
        }
    }
}

impl fmt::Display for NoiseDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseDist {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" | "normal" | "g" => Ok(NoiseDist::Gaussian),
            "rademacher" | "binary" | "bernoulli" | "b" | "k" => Ok(NoiseDist::Rademacher),
            other => Err(format!("unknown noise distribution '{other}'")),
        }
    }
}

/// Random stream for draw `index` under `seed`. Streams are independent of
/// each other, so draws can be generated in any order or in parallel.
pub fn draw_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
