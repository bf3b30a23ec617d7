//! Per-case Hessian-vector products and the simple estimator built on them.

use nalgebra::{DMatrix, DVector};

use super::{BatchTape, Mlp};
use crate::error::{Error, Result};
use crate::noise::{draw_rng, NoiseDist};

/// `H_b w` for the single loss term `½‖z_b − t_b‖² / B` of case `b`, by a
/// forward tangent pass followed by the differentiated backward pass.
pub fn case_hvp(mlp: &Mlp, tape: &BatchTape, b: usize, w: &[f64]) -> Result<Vec<f64>> {
    let batch = tape.batch_size();
    if b >= batch {
        return Err(Error::Contract(format!("case {b} out of range for batch of {batch}")));
    }
    if w.len() != mlp.param_count() {
        return Err(Error::Contract(format!(
            "direction has length {}, expected {}",
            w.len(),
            mlp.param_count()
        )));
    }
    let last = mlp.num_layers() - 1;
    let g = mlp.hidden;
    let offsets = mlp.layer_offsets();
    let dirs: Vec<DMatrix<f64>> = mlp
        .weights
        .iter()
        .zip(&offsets)
        .map(|(wm, &off)| DMatrix::from_row_slice(wm.nrows(), wm.ncols(), &w[off..off + wm.len()]))
        .collect();
    let col = |m: &DMatrix<f64>| -> DVector<f64> { m.column(b).into_owned() };

    // Forward tangents of u_i and z_i.
    let mut rz = vec![DVector::zeros(mlp.sizes[0])];
    let mut ru = vec![DVector::zeros(0)];
    for (i, (wm, v)) in mlp.weights.iter().zip(&dirs).enumerate() {
        let n = wm.ncols() - 1;
        let z = col(&tape.z[i]);
        let mut r = wm.columns(0, n) * &rz[i] + v.columns(0, n) * &z + v.column(n);
        let zi = if i + 1 < last {
            let u = col(&tape.u[i + 1]);
            r.zip_map(&u, |t, uv| t * g.d1(uv))
        } else {
            r.clone()
        };
        ru.push(std::mem::take(&mut r));
        rz.push(zi);
    }

    let scale = 1.0 / batch as f64;
    let mut out = vec![0.0; w.len()];
    let mut du = col(&tape.du[last]);
    let mut rdu = rz[last].clone();
    for i in (0..last).rev() {
        let wm = &mlp.weights[i];
        let n = wm.ncols() - 1;
        let z = col(&tape.z[i]);
        let dst = &mut out[offsets[i]..offsets[i] + wm.len()];
        for r in 0..wm.nrows() {
            let row = &mut dst[r * (n + 1)..(r + 1) * (n + 1)];
            for c in 0..n {
                row[c] = (rdu[r] * z[c] + du[r] * rz[i][c]) * scale;
            }
            row[n] = rdu[r] * scale;
        }
        if i == 0 {
            break;
        }
        let dz = wm.columns(0, n).tr_mul(&du);
        let rdz = dirs[i].columns(0, n).tr_mul(&du) + wm.columns(0, n).tr_mul(&rdu);
        let u = col(&tape.u[i]);
        rdu = DVector::from_fn(n, |k, _| g.d2(u[k]) * ru[i][k] * dz[k] + g.d1(u[k]) * rdz[k]);
        du = col(&tape.du[i]);
    }
    Ok(out)
}

/// One sample of the simple estimator with one probe per case:
/// `Σ_b (H_b w_b) ⊙ w_b`, where `w_b` uses the random stream
/// `(seed, index · B + b)`.
pub fn simple_diagonal_draw(mlp: &Mlp, tape: &BatchTape, dist: NoiseDist, seed: u64, index: u64) -> Result<Vec<f64>> {
    let batch = tape.batch_size();
    let mut out = vec![0.0; mlp.param_count()];
    let mut w = vec![0.0; out.len()];
    for b in 0..batch {
        let mut rng = draw_rng(seed, index * batch as u64 + b as u64);
        dist.fill(&mut rng, &mut w);
        let hw = case_hvp(mlp, tape, b, &w)?;
        for ((o, h), x) in out.iter_mut().zip(&hw).zip(&w) {
            *o += h * x;
        }
    }
    Ok(out)
}
