//! Feed-forward networks with batched curvature estimators.
//!
//! A network has unit layers `z_0 .. z_{L-1}` with `u_{i+1} = W_i [z_i; 1]`,
//! `z_{i+1} = g(u_{i+1})` for hidden layers and an identity output layer. The
//! objective is the squared loss averaged over the `B` columns of a batch.
//! Biases are the last column of each `W_i`, so layer `i` holds
//! `n_{i+1} (n_i + 1)` parameters, flattened row by row, layer by layer.
//!
//! Curvature estimators here apply the reverse curvature sweep to each loss
//! term `L_b` separately, giving a rank-`B` estimate per sweep. The local
//! curvatures of the weight-multiplication nodes are dropped; this changes
//! only off-diagonal Hessian entries, so diagonal estimates stay unbiased.

mod bridge;
mod case;
mod checkpoint;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::noise::{draw_rng, NoiseDist};
use crate::nodes::Nonlinearity;
use crate::stats::parallel_moments;

pub use bridge::{mlp_as_graph, mlp_case_graphs, MlpGraph};
pub use case::{case_hvp, simple_diagonal_draw};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    hidden: Nonlinearity,
}

impl Mlp {
    pub fn zeros(sizes: &[usize], hidden: Nonlinearity) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Contract(format!("invalid layer sizes {sizes:?}")));
        }
        let weights = sizes.windows(2).map(|w| DMatrix::zeros(w[1], w[0] + 1)).collect();
        Ok(Self {
            sizes: sizes.to_vec(),
            weights,
            hidden,
        })
    }

    /// Every weight and bias drawn from `N(0, variance)`.
    pub fn random(sizes: &[usize], hidden: Nonlinearity, variance: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut mlp = Self::zeros(sizes, hidden)?;
        let normal = Normal::new(0.0, variance.sqrt())
            .map_err(|e| Error::Contract(format!("invalid weight variance {variance}: {e}")))?;
        let params: Vec<f64> = (0..mlp.param_count()).map(|_| normal.sample(rng)).collect();
        mlp.set_params(&params)?;
        Ok(mlp)
    }

    pub fn from_params(sizes: &[usize], hidden: Nonlinearity, params: &[f64]) -> Result<Self> {
        let mut mlp = Self::zeros(sizes, hidden)?;
        mlp.set_params(params)?;
        Ok(mlp)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn hidden(&self) -> Nonlinearity {
        self.hidden
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len()
    }

    /// `Σ n_{i+1} (n_i + 1)`.
    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    /// Offset of each layer's block in the flat parameter vector.
    pub fn layer_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.weights
            .iter()
            .map(|w| {
                let o = off;
                off += w.len();
                o
            })
            .collect()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for w in &self.weights {
            for r in 0..w.nrows() {
                out.extend(w.row(r).iter());
            }
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Contract(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut off = 0;
        for w in &mut self.weights {
            let (rows, cols) = w.shape();
            *w = DMatrix::from_row_slice(rows, cols, &params[off..off + rows * cols]);
            off += rows * cols;
        }
        Ok(())
    }

    fn check_batch(&self, inputs: &DMatrix<f64>, targets: Option<&DMatrix<f64>>) -> Result<()> {
        let n0 = self.sizes[0];
        let nl = *self.sizes.last().expect("at least two layers");
        if inputs.nrows() != n0 {
            return Err(Error::Contract(format!("inputs have {} rows, expected {n0}", inputs.nrows())));
        }
        if inputs.ncols() == 0 {
            return Err(Error::Contract("batch is empty".into()));
        }
        if let Some(t) = targets {
            if t.nrows() != nl || t.ncols() != inputs.ncols() {
                return Err(Error::Contract(format!(
                    "targets are {}x{}, expected {nl}x{}",
                    t.nrows(),
                    t.ncols(),
                    inputs.ncols()
                )));
            }
        }
        Ok(())
    }

    /// `(z, u)` for every layer; `u[0]` is empty.
    fn forward(&self, inputs: &DMatrix<f64>) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let last = self.num_layers() - 1;
        let mut z = vec![inputs.clone()];
        let mut u = vec![DMatrix::zeros(0, inputs.ncols())];
        for (i, w) in self.weights.iter().enumerate() {
            let ui = affine(w, &z[i]);
            let zi = if i + 1 < last {
                ui.map(|v| self.hidden.value(v))
            } else {
                ui.clone()
            };
            u.push(ui);
            z.push(zi);
        }
        (z, u)
    }

    /// Network outputs, one column per case.
    pub fn outputs(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_batch(inputs, None)?;
        let (mut z, _) = self.forward(inputs);
        Ok(z.pop().expect("output layer"))
    }

    /// Dense Jacobian of all outputs with respect to the parameters by forward
    /// mode, one tangent per parameter. Row `b · n_out + o` holds output `o`
    /// of case `b`. Intended as an oracle for small networks.
    pub fn output_jacobian(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_batch(inputs, None)?;
        let (z, u) = self.forward(inputs);
        let batch = inputs.ncols();
        let last = self.num_layers() - 1;
        let nl = self.sizes[last];
        let mut jac = DMatrix::zeros(batch * nl, self.param_count());
        let mut p = 0;
        for (i, w) in self.weights.iter().enumerate() {
            let (rows, cols) = w.shape();
            for r in 0..rows {
                for c in 0..cols {
                    // u̇_{i+1} has one nonzero row: W_i[r, c] times input c.
                    let mut ud = DMatrix::zeros(rows, batch);
                    for b in 0..batch {
                        ud[(r, b)] = if c + 1 == cols { 1.0 } else { z[i][(c, b)] };
                    }
                    for j in (i + 1)..last {
                        let zd = ud.zip_map(&u[j], |t, uv| t * self.hidden.d1(uv));
                        let wj = &self.weights[j];
                        ud = wj.columns(0, wj.ncols() - 1) * zd;
                    }
                    for b in 0..batch {
                        for o in 0..nl {
                            jac[(b * nl + o, p)] = ud[(o, b)];
                        }
                    }
                    p += 1;
                }
            }
        }
        Ok(jac)
    }
}

/// `W [z; 1]` for every column of `z`.
fn affine(w: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
    let n = z.nrows();
    let mut out = w.columns(0, n) * z;
    let bias = w.column(n);
    for mut col in out.column_iter_mut() {
        col += &bias;
    }
    out
}

/// Per-parameter diagonal contribution of one layer: `P (z^{⊙2})ᵀ / B`,
/// with the bias column receiving `Σ_b P / B`. `plane` is `n_{i+1} × B`.
fn layer_diagonal(plane: &DMatrix<f64>, z: &DMatrix<f64>, batch: f64, out: &mut [f64]) {
    let z2 = z.map(|v| v * v);
    let wdiag = plane * z2.transpose();
    let cols = z.nrows() + 1;
    for r in 0..plane.nrows() {
        let row = &mut out[r * cols..(r + 1) * cols];
        for c in 0..cols - 1 {
            row[c] = wdiag[(r, c)] / batch;
        }
        row[cols - 1] = plane.row(r).sum() / batch;
    }
}

/// Forward and backward quantities of one batch evaluation.
#[derive(Debug, Clone)]
pub struct BatchTape {
    /// Unit outputs `z_i`, one column per case; `z[0]` is the input.
    pub z: Vec<DMatrix<f64>>,
    /// Unit inputs `u_i`; `u[0]` is empty.
    pub u: Vec<DMatrix<f64>>,
    /// `∂L_b/∂z_i` per case, without the `1/B` factor.
    pub dz: Vec<DMatrix<f64>>,
    /// `∂L_b/∂u_i` per case, without the `1/B` factor.
    pub du: Vec<DMatrix<f64>>,
    pub loss: f64,
}

impl BatchTape {
    pub fn batch_size(&self) -> usize {
        self.z[0].ncols()
    }
}

/// `f = Σ_b ½‖z_{L-1,b} − t_b‖² / B` and its gradient.
pub fn mlp_objective_and_gradient(
    mlp: &Mlp,
    inputs: &DMatrix<f64>,
    targets: &DMatrix<f64>,
) -> Result<(f64, Vec<f64>, BatchTape)> {
    mlp.check_batch(inputs, Some(targets))?;
    let batch = inputs.ncols() as f64;
    let (z, u) = mlp.forward(inputs);
    let last = mlp.num_layers() - 1;
    let resid = &z[last] - targets;
    let loss = 0.5 * resid.norm_squared() / batch;

    let mut dz = vec![DMatrix::zeros(0, 0); last + 1];
    let mut du = vec![DMatrix::zeros(0, 0); last + 1];
    dz[last] = resid.clone();
    du[last] = resid;
    let mut grad = vec![0.0; mlp.param_count()];
    let offsets = mlp.layer_offsets();
    for i in (0..last).rev() {
        let w = &mlp.weights[i];
        let n = w.ncols() - 1;
        let gw = &du[i + 1] * z[i].transpose();
        let dst = &mut grad[offsets[i]..offsets[i] + w.len()];
        for r in 0..w.nrows() {
            for c in 0..n {
                dst[r * (n + 1) + c] = gw[(r, c)] / batch;
            }
            dst[r * (n + 1) + n] = du[i + 1].row(r).sum() / batch;
        }
        if i >= 1 {
            dz[i] = w.columns(0, n).transpose() * &du[i + 1];
            du[i] = dz[i].zip_map(&u[i], |d, uv| d * mlp.hidden.d1(uv));
        }
    }
    Ok((loss, grad, BatchTape { z, u, dz, du, loss }))
}

/// Per-layer probe matrices: `layers[j]` is `n_j × B` for every non-input
/// layer `j ≥ 1` (hidden units and outputs); `layers[0]` is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNoise {
    pub layers: Vec<DMatrix<f64>>,
}

impl MlpNoise {
    pub fn sample(sizes: &[usize], batch: usize, dist: NoiseDist, rng: &mut impl Rng) -> Self {
        let mut layers = vec![DMatrix::zeros(0, batch)];
        for &n in &sizes[1..] {
            let mut m = DMatrix::zeros(n, batch);
            dist.fill(rng, m.as_mut_slice());
            layers.push(m);
        }
        Self { layers }
    }

    fn check(&self, mlp: &Mlp, batch: usize) -> Result<()> {
        let ok = self.layers.len() == mlp.num_layers()
            && self
                .layers
                .iter()
                .zip(mlp.sizes())
                .enumerate()
                .all(|(j, (m, &n))| j == 0 || (m.nrows() == n && m.ncols() == batch));
        if ok {
            Ok(())
        } else {
            Err(Error::Contract("noise matrices do not match the network and batch".into()))
        }
    }
}

/// A diagonal Hessian estimate with per-entry sample variance.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagEstimate {
    pub diag: Vec<f64>,
    pub variance: Vec<f64>,
    pub samples: usize,
}

/// Which reverse sweep a batched estimate uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SweepKind {
    S,
    TU,
    /// Not a sweep: one per-case Hessian-vector product per case.
    Simple,
}

/// One rank-`B` sample of `diag(H)` from the complex sweep. Complex values
/// are kept as real and imaginary planes; the estimate is the real part of
/// the elementwise square, `re² − im²`. Only the current layer's sweep
/// values are alive at any time.
pub fn cp_diagonal_sample(mlp: &Mlp, tape: &BatchTape, noise: &MlpNoise) -> Result<Vec<f64>> {
    let batch = tape.batch_size();
    noise.check(mlp, batch)?;
    let last = mlp.num_layers() - 1;
    let b = batch as f64;
    let offsets = mlp.layer_offsets();
    let mut out = vec![0.0; mlp.param_count()];

    let mut s_re = noise.layers[last].clone();
    let mut s_im = DMatrix::zeros(s_re.nrows(), batch);
    for i in (0..last).rev() {
        let w = &mlp.weights[i];
        let plane = s_re.zip_map(&s_im, |r, m| r * r - m * m);
        layer_diagonal(&plane, &tape.z[i], b, &mut out[offsets[i]..offsets[i] + w.len()]);
        if i == 0 {
            break;
        }
        let wt = w.columns(0, w.ncols() - 1).transpose();
        let z_re = &wt * &s_re;
        let z_im = &wt * &s_im;
        let (rows, cols) = z_re.shape();
        let v = &noise.layers[i];
        s_re = DMatrix::zeros(rows, cols);
        s_im = DMatrix::zeros(rows, cols);
        for k in 0..rows * cols {
            let uv = tape.u[i][k];
            let g1 = mlp.hidden.d1(uv);
            let curv = mlp.hidden.d2(uv) * tape.dz[i][k];
            s_re[k] = z_re[k] * g1;
            s_im[k] = z_im[k] * g1;
            if curv >= 0.0 {
                s_re[k] += v[k] * curv.sqrt();
            } else {
                s_im[k] += v[k] * (-curv).sqrt();
            }
        }
    }
    Ok(out)
}

/// One rank-`B` sample of `diag(H)` from the paired real sweeps `T` and `U`.
/// The symmetrized variant has the same diagonal.
pub fn tu_diagonal_sample(mlp: &Mlp, tape: &BatchTape, noise: &MlpNoise) -> Result<Vec<f64>> {
    let batch = tape.batch_size();
    noise.check(mlp, batch)?;
    let last = mlp.num_layers() - 1;
    let b = batch as f64;
    let offsets = mlp.layer_offsets();
    let mut out = vec![0.0; mlp.param_count()];

    // Linear hidden units carry no curvature and receive no noise, matching
    // the generic sweep.
    let inject = !mlp.hidden.is_linear();
    let mut t = noise.layers[last].clone();
    let mut u = t.clone();
    for i in (0..last).rev() {
        let w = &mlp.weights[i];
        let plane = t.component_mul(&u);
        layer_diagonal(&plane, &tape.z[i], b, &mut out[offsets[i]..offsets[i] + w.len()]);
        if i == 0 {
            break;
        }
        let wt = w.columns(0, w.ncols() - 1).transpose();
        let mut t_z = &wt * &t;
        let mut u_z = &wt * &u;
        let v = &noise.layers[i];
        for k in 0..t_z.len() {
            let uv = tape.u[i][k];
            let g1 = mlp.hidden.d1(uv);
            let curv = mlp.hidden.d2(uv) * tape.dz[i][k];
            t_z[k] = t_z[k] * g1 + curv * v[k];
            u_z[k] *= g1;
            if inject {
                u_z[k] += v[k];
            }
        }
        t = t_z;
        u = u_z;
    }
    Ok(out)
}

/// Single-draw batched estimate of `diag(H)` for given probes.
pub fn mlp_cp_diagonal(
    mlp: &Mlp,
    inputs: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    noise: &MlpNoise,
) -> Result<DiagEstimate> {
    let (_, _, tape) = mlp_objective_and_gradient(mlp, inputs, targets)?;
    let diag = cp_diagonal_sample(mlp, &tape, noise)?;
    let variance = vec![0.0; diag.len()];
    Ok(DiagEstimate {
        diag,
        variance,
        samples: 1,
    })
}

/// Averages `samples` independent batched draws. Draw `k` uses the random
/// stream `(seed, k)`.
pub fn mlp_diagonal_estimate(
    mlp: &Mlp,
    tape: &BatchTape,
    sweep: SweepKind,
    dist: NoiseDist,
    samples: usize,
    seed: u64,
) -> Result<DiagEstimate> {
    let m = parallel_moments(mlp.param_count(), samples, |k| mlp_diagonal_draw(mlp, tape, sweep, dist, seed, k))?;
    let (diag, variance, samples) = m.into_parts();
    Ok(DiagEstimate {
        diag,
        variance,
        samples,
    })
}

/// Draw `index` of a batched estimate.
pub fn mlp_diagonal_draw(
    mlp: &Mlp,
    tape: &BatchTape,
    sweep: SweepKind,
    dist: NoiseDist,
    seed: u64,
    index: u64,
) -> Result<Vec<f64>> {
    if sweep == SweepKind::Simple {
        return simple_diagonal_draw(mlp, tape, dist, seed, index);
    }
    let mut rng = draw_rng(seed, index);
    let noise = MlpNoise::sample(mlp.sizes(), tape.batch_size(), dist, &mut rng);
    match sweep {
        SweepKind::S => cp_diagonal_sample(mlp, tape, &noise),
        _ => tu_diagonal_sample(mlp, tape, &noise),
    }
}

/// Exact `diag(H)` from the same sweep run once per unit basis probe. Each
/// probe sets one unit of one curvature-carrying layer to 1 in every case, so
/// the sum over probes is `Σ_b Re(diag(S̃_b S̃_bᵀ))`. Dropping the
/// weight-activation cross curvature does not change the diagonal, so the
/// result is exact. Costs one batched sweep per unit.
pub fn exact_diagonal_by_basis(mlp: &Mlp, tape: &BatchTape) -> Result<Vec<f64>> {
    let batch = tape.batch_size();
    let last = mlp.num_layers() - 1;
    let mut out = vec![0.0; mlp.param_count()];
    let mut noise = MlpNoise {
        layers: mlp.sizes().iter().map(|&n| DMatrix::zeros(n, batch)).collect(),
    };
    noise.layers[0] = DMatrix::zeros(0, batch);
    let first = if mlp.hidden().is_linear() { last } else { 1 };
    for j in first..=last {
        for k in 0..mlp.sizes()[j] {
            noise.layers[j].row_mut(k).fill(1.0);
            let d = cp_diagonal_sample(mlp, tape, &noise)?;
            out.iter_mut().zip(&d).for_each(|(o, v)| *o += v);
            noise.layers[j].row_mut(k).fill(0.0);
        }
    }
    Ok(out)
}

/// Deterministic diagonal approximation that keeps only the diagonals of the
/// intermediate Hessians:
///
/// ```text
/// h_{u_i}     = g'(u_i)² ⊙ h_{z_i} + g''(u_i) ⊙ d_{z_i}
/// h_{z_{i-1}} = (W_{i-1}^{⊙2})ᵀ h_{u_i}
/// ```
///
/// Exact when every intermediate Hessian really is diagonal.
pub fn becker_lecun_diagonal(mlp: &Mlp, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<DiagEstimate> {
    let (_, _, tape) = mlp_objective_and_gradient(mlp, inputs, targets)?;
    Ok(becker_lecun_from_tape(mlp, &tape))
}

pub fn becker_lecun_from_tape(mlp: &Mlp, tape: &BatchTape) -> DiagEstimate {
    let batch = tape.batch_size();
    let last = mlp.num_layers() - 1;
    let b = batch as f64;
    let offsets = mlp.layer_offsets();
    let mut out = vec![0.0; mlp.param_count()];
    let mut h_u = DMatrix::from_element(mlp.sizes[last], batch, 1.0);
    for i in (0..last).rev() {
        let w = &mlp.weights[i];
        layer_diagonal(&h_u, &tape.z[i], b, &mut out[offsets[i]..offsets[i] + w.len()]);
        if i == 0 {
            break;
        }
        let w2 = w.columns(0, w.ncols() - 1).map(|v| v * v);
        let h_z = w2.transpose() * &h_u;
        let mut next = h_z;
        for k in 0..next.len() {
            let uv = tape.u[i][k];
            let g1 = mlp.hidden.d1(uv);
            next[k] = g1 * g1 * next[k] + mlp.hidden.d2(uv) * tape.dz[i][k];
        }
        h_u = next;
    }
    DiagEstimate {
        variance: vec![0.0; out.len()],
        diag: out,
        samples: 1,
    }
}

/// Plain minibatch SGD on the squared loss.
pub fn train_sgd(
    mlp: &mut Mlp,
    inputs: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    mlp.check_batch(inputs, Some(targets))?;
    let n = inputs.ncols();
    let batch_size = batch_size.clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(epochs);
    let mut params = mlp.params();
    for _ in 0..epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(batch_size) {
            let x = inputs.select_columns(chunk);
            let t = targets.select_columns(chunk);
            let (_, g, _) = mlp_objective_and_gradient(mlp, &x, &t)?;
            params.iter_mut().zip(&g).for_each(|(p, gi)| *p -= learning_rate * gi);
            mlp.set_params(&params)?;
        }
        losses.push(mlp_objective_and_gradient(mlp, inputs, targets)?.0);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests;
