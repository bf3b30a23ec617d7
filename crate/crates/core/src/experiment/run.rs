use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::config::{DiagMethod, ExactMethod, ExperimentConfig, Metric, Series};
use crate::error::{Error, Result};
use crate::exact::hessian_diagonal;
use crate::mlp::{
    becker_lecun_from_tape, exact_diagonal_by_basis, load_checkpoint, mlp_as_graph, mlp_diagonal_draw,
    mlp_objective_and_gradient, train_sgd, write_checkpoint, BatchTape, Mlp, SweepKind,
};
use crate::noise::draw_rng;

// Stream ids for the setup randomness; estimator draws use per-series seeds.
const STREAM_INIT: u64 = u64::MAX;
const STREAM_DATA: u64 = u64::MAX - 1;
const STREAM_TRAIN: u64 = u64::MAX - 2;

/// Draws evaluated together before being folded into the running sum.
const BLOCK: u64 = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub series: Series,
    pub samples: usize,
    /// The configured metric.
    pub metric: f64,
    /// Every metric, in [`Metric::ALL`] order.
    pub all_metrics: [f64; 3],
    /// Seconds as written to results.csv: zero unless timing is enabled.
    pub seconds: f64,
    /// Measured wall-clock seconds to reach this sample count.
    pub wall_seconds: f64,
    pub seed: u64,
}

impl ResultRow {
    pub fn value(&self, metric: Metric) -> f64 {
        let i = Metric::ALL.iter().position(|&m| m == metric).expect("metric listed");
        self.all_metrics[i]
    }
}

/// Everything an experiment run produces.
#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub rows: Vec<ResultRow>,
    pub exact: Vec<f64>,
    /// Loss after each training epoch; empty for an untrained net.
    pub train_losses: Vec<f64>,
    /// `(stage, seconds)` for the setup stages.
    pub stages: Vec<(String, f64)>,
    pub param_count: usize,
}

/// Synthetic batch: `N(0, 1)` inputs and one-hot targets with a uniformly
/// random class per case.
pub fn synthetic_data(sizes: &[usize], cases: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut rng = draw_rng(seed, STREAM_DATA);
    let n0 = sizes[0];
    let nl = *sizes.last().expect("at least two layers");
    let mut inputs = DMatrix::zeros(n0, cases);
    crate::noise::NoiseDist::Gaussian.fill(&mut rng, inputs.as_mut_slice());
    let mut targets = DMatrix::zeros(nl, cases);
    for b in 0..cases {
        targets[(rng.random_range(0..nl), b)] = 1.0;
    }
    (inputs, targets)
}

/// The network, batch and training losses described by the config.
pub fn prepare_network(config: &ExperimentConfig) -> Result<(Mlp, DMatrix<f64>, DMatrix<f64>, Vec<f64>)> {
    let mut mlp = match &config.checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => Mlp::random(
            &config.sizes,
            config.activation,
            config.init_variance,
            &mut draw_rng(config.seed, STREAM_INIT),
        )?,
    };
    let (inputs, targets) = synthetic_data(mlp.sizes(), config.cases, config.seed);
    let losses = if config.train_epochs > 0 {
        train_sgd(
            &mut mlp,
            &inputs,
            &targets,
            config.train_epochs,
            config.learning_rate,
            config.train_batch,
            &mut draw_rng(config.seed, STREAM_TRAIN),
        )?
    } else {
        Vec::new()
    };
    Ok((mlp, inputs, targets, losses))
}

/// Seed of one series, mixed from the run seed and the series label so that
/// series are independent and adding a series does not change the others.
pub fn series_seed(seed: u64, series: &Series) -> u64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(series.label().as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn cache_key(mlp: &Mlp, inputs: &DMatrix<f64>, targets: &DMatrix<f64>, method: ExactMethod) -> Result<String> {
    let mut net = Vec::new();
    write_checkpoint(mlp, &mut net)?;
    let mut h = Sha256::new();
    h.update(format!("exact-diagonal {method:?}\n").as_bytes());
    h.update(&net);
    for m in [inputs, targets] {
        h.update((m.nrows() as u64).to_le_bytes());
        h.update((m.ncols() as u64).to_le_bytes());
        for v in m.iter() {
            h.update(v.to_le_bytes());
        }
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn read_cache(path: &Path, len: usize) -> Option<Vec<f64>> {
    let bytes = std::fs::read(path).ok()?;
    if bytes.len() != len * 8 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    )
}

fn write_cache(path: &Path, diag: &[f64]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let bytes: Vec<u8> = diag.iter().flat_map(|v| v.to_le_bytes()).collect();
    // Write then rename so a crash never leaves a truncated cache entry.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

/// Exact `diag(H)` of the batch objective, read from or written to the cache
/// when a cache directory is given.
pub fn exact_diagonal(
    mlp: &Mlp,
    inputs: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    tape: &BatchTape,
    method: ExactMethod,
    cache_dir: Option<&Path>,
) -> Result<Vec<f64>> {
    let path: Option<PathBuf> = match cache_dir {
        Some(dir) => Some(dir.join(format!("exact-{}.bin", cache_key(mlp, inputs, targets, method)?))),
        None => None,
    };
    if let Some(hit) = path.as_deref().and_then(|p| read_cache(p, mlp.param_count())) {
        return Ok(hit);
    }
    let diag = match method {
        ExactMethod::Hvp => {
            let g = mlp_as_graph(mlp, inputs, targets)?;
            hessian_diagonal(&g.graph, &g.params)?
        }
        ExactMethod::Basis => exact_diagonal_by_basis(mlp, tape)?,
    };
    if let Some(p) = path {
        write_cache(&p, &diag)?;
    }
    Ok(diag)
}

/// Running means of `draw(0), draw(1), …` reported at each checkpoint count.
/// Draws are computed in parallel blocks and summed in index order, so the
/// result does not depend on the number of threads.
pub fn cumulative_means<F>(len: usize, checkpoints: &[usize], draw: F, mut at: impl FnMut(usize, &[f64])) -> Result<()>
where
    F: Fn(u64) -> Result<Vec<f64>> + Sync,
{
    let total = checkpoints.iter().copied().max().unwrap_or(0) as u64;
    let mut sum = vec![0.0; len];
    let mut mean = vec![0.0; len];
    let mut start = 0;
    while start < total {
        let end = (start + BLOCK).min(total);
        let draws: Vec<Vec<f64>> = (start..end).into_par_iter().map(&draw).collect::<Result<_>>()?;
        for (k, d) in (start..end).zip(draws) {
            if d.len() != len {
                return Err(Error::Contract(format!("draw {k} has length {}, expected {len}", d.len())));
            }
            sum.iter_mut().zip(&d).for_each(|(s, v)| *s += v);
            let count = k as usize + 1;
            if checkpoints.contains(&count) {
                mean.iter_mut().zip(&sum).for_each(|(m, s)| *m = s / count as f64);
                at(count, &mean);
            }
        }
        start = end;
    }
    Ok(())
}

fn row(config: &ExperimentConfig, series: Series, samples: usize, est: &[f64], exact: &[f64], wall: f64) -> ResultRow {
    let all_metrics = Metric::ALL.map(|m| m.eval(est, exact));
    ResultRow {
        series,
        samples,
        metric: config.metric.eval(est, exact),
        all_metrics,
        seconds: if config.timing { wall } else { 0.0 },
        wall_seconds: wall,
        seed: config.seed,
    }
}

/// Runs every configured series against the exact diagonal. Rows come out in
/// series order, then by sample count. Deterministic series report a single
/// row at the smallest sample count.
pub fn run_accuracy_experiment(config: &ExperimentConfig) -> Result<ExperimentRun> {
    config
        .validate()
        .map_err(|msg| Error::Contract(format!("invalid experiment config: {msg}")))?;
    let mut stages = Vec::new();

    let clock = Instant::now();
    let (mlp, inputs, targets, train_losses) = prepare_network(config)?;
    let (_, _, tape) = mlp_objective_and_gradient(&mlp, &inputs, &targets)?;
    stages.push(("setup".to_string(), clock.elapsed().as_secs_f64()));

    let clock = Instant::now();
    let exact = exact_diagonal(&mlp, &inputs, &targets, &tape, config.exact, config.cache_dir.as_deref())?;
    stages.push(("exact".to_string(), clock.elapsed().as_secs_f64()));

    let mut rows = Vec::new();
    for &series in &config.series {
        let clock = Instant::now();
        let Some(dist) = series.noise else {
            let bl = becker_lecun_from_tape(&mlp, &tape);
            let wall = clock.elapsed().as_secs_f64();
            rows.push(row(config, series, config.samples[0], &bl.diag, &exact, wall));
            continue;
        };
        let sweep = match series.method {
            DiagMethod::S => SweepKind::S,
            // T/U and its symmetrized form share the diagonal estimate.
            DiagMethod::TU | DiagMethod::TUSymmetrized => SweepKind::TU,
            DiagMethod::Simple => SweepKind::Simple,
            DiagMethod::BeckerLeCun => unreachable!("deterministic series has no noise"),
        };
        let seed = series_seed(config.seed, &series);
        cumulative_means(
            mlp.param_count(),
            &config.samples,
            |k| mlp_diagonal_draw(&mlp, &tape, sweep, dist, seed, k),
            |count, mean| {
                let wall = clock.elapsed().as_secs_f64();
                rows.push(row(config, series, count, mean, &exact, wall));
            },
        )?;
    }
    Ok(ExperimentRun {
        rows,
        exact,
        train_losses,
        stages,
        param_count: mlp.param_count(),
    })
}
