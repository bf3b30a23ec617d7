//! Node kinds: forward maps, vector-Jacobian and Jacobian-vector products,
//! the gradient-weighted local curvature `M_i`, and its complex factorization
//! `F_iᵀ F_i = M_i`.
//!
//! Every node sees its input `x_i` as the slot-concatenation of its parents'
//! outputs. Given the adjoint `ybar_i = ∂f/∂y_i`, the local curvature is
//!
//! ```text
//! M_i = Σ_q ybar_{i,q} · ∂²y_{i,q}/∂x_i∂x_i
//! ```
//!
//! which is symmetric but possibly indefinite. Factors are taken with a plain
//! (non-conjugating) transpose, so negative eigenvalues produce imaginary rows.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Coordinate-wise nonlinearities available to elementwise nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Nonlinearity {
    Tanh,
    Logistic,
    Softplus,
    Square,
    Identity,
}

impl Nonlinearity {
    pub const ALL: [Nonlinearity; 5] = [
        Nonlinearity::Tanh,
        Nonlinearity::Logistic,
        Nonlinearity::Softplus,
        Nonlinearity::Square,
        Nonlinearity::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Nonlinearity::Tanh => "tanh",
            Nonlinearity::Logistic => "logistic",
            Nonlinearity::Softplus => "softplus",
            Nonlinearity::Square => "square",
            Nonlinearity::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == s.trim())
    }

    #[inline]
    pub fn value(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => x.tanh(),
            Nonlinearity::Logistic => logistic(x),
            Nonlinearity::Softplus => softplus(x),
            Nonlinearity::Square => x * x,
            Nonlinearity::Identity => x,
        }
    }

    #[inline]
    pub fn d1(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Nonlinearity::Logistic => {
                let s = logistic(x);
                s * (1.0 - s)
            }
            Nonlinearity::Softplus => logistic(x),
            Nonlinearity::Square => 2.0 * x,
            Nonlinearity::Identity => 1.0,
        }
    }

    /// Second derivative. Tanh and logistic are written in terms of their
    /// forward values so no cancellation occurs in the tails.
    #[inline]
    pub fn d2(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Nonlinearity::Logistic => {
                let s = logistic(x);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
            Nonlinearity::Softplus => {
                let s = logistic(x);
                s * (1.0 - s)
            }
            Nonlinearity::Square => 2.0,
            Nonlinearity::Identity => 0.0,
        }
    }

    /// Whether `g''` vanishes identically.
    pub fn is_linear(self) -> bool {
        self == Nonlinearity::Identity
    }
}

#[inline]
fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow for large `x`.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// What a node computes from its input vector.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    /// The graph source `y_1`: the variable we differentiate with respect to.
    Input { dim: usize },
    /// `y = W x + b` with constant weights.
    Affine {
        weight: DMatrix<f64>,
        bias: Option<Vec<f64>>,
    },
    /// `y = W z` where the weights arrive through the input.
    ///
    /// The input is `[vec(W); z]` with `W` of shape `rows × cols` flattened row
    /// by row. With `augment`, `z` is extended by a trailing constant 1 so the
    /// last column of `W` acts as a bias. With `data`, `z` is a baked-in
    /// constant and the input is just `vec(W)`.
    ParamAffine {
        rows: usize,
        cols: usize,
        augment: bool,
        data: Option<Vec<f64>>,
    },
    Elementwise(Nonlinearity),
    /// `y = scale · ½‖x − t‖²`.
    SquaredLoss { target: Vec<f64>, scale: f64 },
    /// `y = ½ xᵀ Wᵀ Z W x` with symmetric `Z`.
    QuadraticForm { w: DMatrix<f64>, z: DMatrix<f64> },
    /// `y = x[offset .. offset + len]`.
    Slice { offset: usize, len: usize },
    /// Adds equally sized blocks of the input: `y = Σ_k x[k·dim .. (k+1)·dim]`.
    Sum { dim: usize },
}

impl NodeKind {
    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Input { .. } => "input",
            NodeKind::Affine { .. } => "affine",
            NodeKind::ParamAffine { .. } => "param_affine",
            NodeKind::Elementwise(_) => "elementwise",
            NodeKind::SquaredLoss { .. } => "squared_loss",
            NodeKind::QuadraticForm { .. } => "quadratic_form",
            NodeKind::Slice { .. } => "slice",
            NodeKind::Sum { .. } => "sum",
        }
    }

    /// Loss-type nodes keep their curvature under the Gauss-Newton mask.
    pub fn is_loss(&self) -> bool {
        matches!(self, NodeKind::SquaredLoss { .. } | NodeKind::QuadraticForm { .. })
    }

    /// Whether `M_i` can be nonzero for some input and adjoint. Decided from
    /// the kind alone so that noise shapes do not depend on the evaluation point.
    pub fn has_curvature(&self) -> bool {
        match self {
            NodeKind::Input { .. }
            | NodeKind::Affine { .. }
            | NodeKind::Slice { .. }
            | NodeKind::Sum { .. } => false,
            NodeKind::ParamAffine { data, .. } => data.is_none(),
            NodeKind::Elementwise(g) => !g.is_linear(),
            NodeKind::SquaredLoss { .. } | NodeKind::QuadraticForm { .. } => true,
        }
    }

    /// Whether this is the bilinear weight-times-activation node.
    pub fn is_bilinear(&self) -> bool {
        matches!(self, NodeKind::ParamAffine { data: None, .. })
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidNode(msg));
        match self {
            NodeKind::Affine { weight, bias } => {
                if let Some(b) = bias {
                    if b.len() != weight.nrows() {
                        return bad(format!(
                            "affine bias has {} entries for {} rows",
                            b.len(),
                            weight.nrows()
                        ));
                    }
                }
            }
            NodeKind::ParamAffine {
                cols,
                augment,
                data,
                ..
            } => {
                if *augment && *cols == 0 {
                    return bad("augmented param_affine needs at least one column".into());
                }
                if let Some(d) = data {
                    if d.len() != cols - usize::from(*augment) {
                        return bad(format!(
                            "param_affine data has {} entries, expected {}",
                            d.len(),
                            cols - usize::from(*augment)
                        ));
                    }
                }
            }
            NodeKind::QuadraticForm { w, z } => {
                if !z.is_square() || z.nrows() != w.nrows() {
                    return bad(format!(
                        "quadratic_form Z is {}x{} but W has {} rows",
                        z.nrows(),
                        z.ncols(),
                        w.nrows()
                    ));
                }
                if !is_symmetric(z, 1e-12) {
                    return Err(Error::NotSymmetric);
                }
            }
            NodeKind::Sum { dim } if *dim == 0 => return bad("sum block size must be positive".into()),
            _ => {}
        }
        Ok(())
    }

    /// Output dimension for a given input dimension, or an error if the kind
    /// cannot accept that input size.
    fn output_dim(&self, m: usize) -> std::result::Result<usize, String> {
        let expect = |want: usize| {
            if m == want {
                Ok(())
            } else {
                Err(format!("expects input dimension {want}, got {m}"))
            }
        };
        match self {
            NodeKind::Input { dim } => {
                expect(0)?;
                Ok(*dim)
            }
            NodeKind::Affine { weight, .. } => {
                expect(weight.ncols())?;
                Ok(weight.nrows())
            }
            NodeKind::ParamAffine {
                rows,
                cols,
                augment,
                data,
            } => {
                let z = if data.is_some() { 0 } else { cols - usize::from(*augment) };
                expect(rows * cols + z)?;
                Ok(*rows)
            }
            NodeKind::Elementwise(_) => Ok(m),
            NodeKind::SquaredLoss { target, .. } => {
                expect(target.len())?;
                Ok(1)
            }
            NodeKind::QuadraticForm { w, .. } => {
                expect(w.ncols())?;
                Ok(1)
            }
            NodeKind::Slice { offset, len } => {
                if offset + len > m {
                    return Err(format!("slice {offset}..{} exceeds input dimension {m}", offset + len));
                }
                Ok(*len)
            }
            NodeKind::Sum { dim } => {
                if m == 0 || !m.is_multiple_of(*dim) {
                    return Err(format!("input dimension {m} is not a positive multiple of {dim}"));
                }
                Ok(*dim)
            }
        }
    }
}

/// A node kind together with its input and output dimensions `m_i`, `n_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    kind: NodeKind,
    in_dim: usize,
    out_dim: usize,
}

impl NodeSpec {
    pub fn new(kind: NodeKind, in_dim: usize) -> Result<Self> {
        kind.validate()?;
        let out_dim = kind
            .output_dim(in_dim)
            .map_err(|msg| Error::InvalidNode(format!("{}: {msg}", kind.name())))?;
        Ok(Self {
            kind,
            in_dim,
            out_dim,
        })
    }

    pub fn kind(&self) -> &NodeKind {
        &self.kind
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    fn check(&self, what: &'static str, got: usize, want: usize) -> Result<()> {
        if got == want {
            Ok(())
        } else {
            Err(Error::NodeDimension {
                kind: self.kind.name(),
                what,
                expected: want,
                got,
            })
        }
    }

    /// `y_i = f_i(x_i)`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check("input", x.len(), self.in_dim)?;
        Ok(self.forward_unchecked(x))
    }

    /// `J_{x_i}^{y_i ᵀ} w`.
    pub fn vjp(&self, x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        self.check("input", x.len(), self.in_dim)?;
        self.check("cotangent", w.len(), self.out_dim)?;
        let mut out = vec![0.0; self.in_dim];
        self.vjp_into(x, w, &mut out);
        Ok(out)
    }

    /// `J_{x_i}^{y_i} dx`.
    pub fn jvp(&self, x: &[f64], dx: &[f64]) -> Result<Vec<f64>> {
        self.check("input", x.len(), self.in_dim)?;
        self.check("tangent", dx.len(), self.in_dim)?;
        Ok(self.jvp_unchecked(x, dx))
    }

    /// The gradient-weighted local curvature `M_i` at `(x, ybar)`.
    pub fn local_curvature(&self, x: &[f64], ybar: &[f64]) -> Result<LocalCurvature> {
        self.check("input", x.len(), self.in_dim)?;
        self.check("adjoint", ybar.len(), self.out_dim)?;
        Ok(self.local_curvature_unchecked(x, ybar))
    }

    /// `M_i v` without materializing `M_i`.
    pub fn curvature_apply(&self, x: &[f64], ybar: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.check("input", x.len(), self.in_dim)?;
        self.check("adjoint", ybar.len(), self.out_dim)?;
        self.check("vector", v.len(), self.in_dim)?;
        let mut out = vec![0.0; self.in_dim];
        self.curvature_apply_into(x, ybar, v, &mut out);
        Ok(out)
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> Vec<f64> {
        match &self.kind {
            NodeKind::Input { .. } => unreachable!("the source node has no forward map"),
            NodeKind::Affine { weight, bias } => {
                let mut y = matvec(weight, x);
                if let Some(b) = bias {
                    y.iter_mut().zip(b).for_each(|(yi, bi)| *yi += bi);
                }
                y
            }
            NodeKind::ParamAffine {
                rows,
                cols,
                augment,
                data,
            } => {
                let (w, z) = split_param_affine(x, *rows, *cols, data.as_deref());
                (0..*rows)
                    .map(|r| {
                        let row = &w[r * cols..(r + 1) * cols];
                        let mut acc: f64 = row.iter().zip(z).map(|(a, b)| a * b).sum();
                        if *augment {
                            acc += row[cols - 1];
                        }
                        acc
                    })
                    .collect()
            }
            NodeKind::Elementwise(g) => x.iter().map(|&v| g.value(v)).collect(),
            NodeKind::SquaredLoss { target, scale } => {
                let s: f64 = x.iter().zip(target).map(|(a, t)| (a - t) * (a - t)).sum();
                vec![0.5 * scale * s]
            }
            NodeKind::QuadraticForm { w, z } => {
                let q = matvec(w, x);
                let zq = matvec(z, &q);
                vec![0.5 * dot(&q, &zq)]
            }
            NodeKind::Slice { offset, len } => x[*offset..offset + len].to_vec(),
            NodeKind::Sum { dim } => {
                let mut y = vec![0.0; *dim];
                for block in x.chunks_exact(*dim) {
                    y.iter_mut().zip(block).for_each(|(a, b)| *a += b);
                }
                y
            }
        }
    }

    /// Adds `J^ᵀ w` into `out` (length `m_i`).
    pub(crate) fn vjp_into(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        match &self.kind {
            NodeKind::Input { .. } => {}
            NodeKind::Affine { weight, .. } => {
                for c in 0..weight.ncols() {
                    let col = weight.column(c);
                    out[c] += col.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            NodeKind::ParamAffine {
                rows,
                cols,
                augment,
                data,
            } => {
                let (wm, z) = split_param_affine(x, *rows, *cols, data.as_deref());
                let nz = z.len();
                for r in 0..*rows {
                    let wr = w[r];
                    let dst = &mut out[r * cols..(r + 1) * cols];
                    for (d, zc) in dst.iter_mut().zip(z) {
                        *d += wr * zc;
                    }
                    if *augment {
                        dst[cols - 1] += wr;
                    }
                }
                if data.is_none() {
                    let zbar = &mut out[rows * cols..];
                    for r in 0..*rows {
                        let wr = w[r];
                        let row = &wm[r * cols..r * cols + nz];
                        for (d, a) in zbar.iter_mut().zip(row) {
                            *d += wr * a;
                        }
                    }
                }
            }
            NodeKind::Elementwise(g) => {
                for ((o, &xi), &wi) in out.iter_mut().zip(x).zip(w) {
                    *o += wi * g.d1(xi);
                }
            }
            NodeKind::SquaredLoss { target, scale } => {
                let s = w[0] * scale;
                for ((o, &xi), &ti) in out.iter_mut().zip(x).zip(target) {
                    *o += s * (xi - ti);
                }
            }
            NodeKind::QuadraticForm { w: wm, z } => {
                let g = quad_gradient(wm, z, x);
                for (o, gi) in out.iter_mut().zip(g) {
                    *o += w[0] * gi;
                }
            }
            NodeKind::Slice { offset, len } => {
                for (o, wi) in out[*offset..offset + len].iter_mut().zip(w) {
                    *o += wi;
                }
            }
            NodeKind::Sum { dim } => {
                for block in out.chunks_exact_mut(*dim) {
                    block.iter_mut().zip(w).for_each(|(o, wi)| *o += wi);
                }
            }
        }
    }

    pub(crate) fn jvp_unchecked(&self, x: &[f64], dx: &[f64]) -> Vec<f64> {
        match &self.kind {
            NodeKind::Input { .. } => dx.to_vec(),
            NodeKind::Affine { weight, .. } => matvec(weight, dx),
            NodeKind::ParamAffine {
                rows,
                cols,
                augment,
                data,
            } => {
                let (wm, z) = split_param_affine(x, *rows, *cols, data.as_deref());
                let (dw, dz) = split_param_affine(dx, *rows, *cols, data.as_deref());
                let nz = z.len();
                (0..*rows)
                    .map(|r| {
                        let dwr = &dw[r * cols..(r + 1) * cols];
                        let mut acc: f64 = dwr.iter().zip(z).map(|(a, b)| a * b).sum();
                        if *augment {
                            acc += dwr[cols - 1];
                        }
                        if data.is_none() {
                            let wr = &wm[r * cols..r * cols + nz];
                            acc += wr.iter().zip(dz).map(|(a, b)| a * b).sum::<f64>();
                        }
                        acc
                    })
                    .collect()
            }
            NodeKind::Elementwise(g) => x.iter().zip(dx).map(|(&xi, &di)| g.d1(xi) * di).collect(),
            NodeKind::SquaredLoss { target, scale } => {
                let s: f64 = x
                    .iter()
                    .zip(target)
                    .zip(dx)
                    .map(|((xi, ti), di)| (xi - ti) * di)
                    .sum();
                vec![scale * s]
            }
            NodeKind::QuadraticForm { w, z } => vec![dot(&quad_gradient(w, z, x), dx)],
            NodeKind::Slice { offset, len } => dx[*offset..offset + len].to_vec(),
            NodeKind::Sum { .. } => self.forward_unchecked(dx),
        }
    }

    pub(crate) fn local_curvature_unchecked(&self, x: &[f64], ybar: &[f64]) -> LocalCurvature {
        match &self.kind {
            NodeKind::Elementwise(g) if !g.is_linear() => LocalCurvature::DiagonalReal(
                x.iter().zip(ybar).map(|(&xi, &yb)| g.d2(xi) * yb).collect(),
            ),
            NodeKind::SquaredLoss { scale, .. } => {
                LocalCurvature::DiagonalReal(vec![scale * ybar[0]; self.in_dim])
            }
            NodeKind::QuadraticForm { w, z } => {
                let mut m = w.transpose() * z * w;
                m *= ybar[0];
                LocalCurvature::DenseReal(m)
            }
            NodeKind::ParamAffine {
                rows,
                cols,
                augment,
                data: None,
            } => {
                // Only the cross blocks ∂²/∂W_rc ∂z_c = ybar_r are nonzero.
                let nz = cols - usize::from(*augment);
                let nw = rows * cols;
                let mut m = DMatrix::zeros(self.in_dim, self.in_dim);
                for r in 0..*rows {
                    for c in 0..nz {
                        m[(r * cols + c, nw + c)] = ybar[r];
                        m[(nw + c, r * cols + c)] = ybar[r];
                    }
                }
                LocalCurvature::DenseReal(m)
            }
            _ => LocalCurvature::Zero,
        }
    }

    /// Adds `M_i v` into `out`.
    pub(crate) fn curvature_apply_into(&self, x: &[f64], ybar: &[f64], v: &[f64], out: &mut [f64]) {
        match &self.kind {
            NodeKind::Elementwise(g) if !g.is_linear() => {
                for (((o, &xi), &yb), &vi) in out.iter_mut().zip(x).zip(ybar).zip(v) {
                    *o += g.d2(xi) * yb * vi;
                }
            }
            NodeKind::SquaredLoss { scale, .. } => {
                let s = scale * ybar[0];
                out.iter_mut().zip(v).for_each(|(o, vi)| *o += s * vi);
            }
            NodeKind::QuadraticForm { w, z } => {
                let wv = matvec(w, v);
                let zwv = matvec(z, &wv);
                for c in 0..w.ncols() {
                    out[c] += ybar[0] * w.column(c).iter().zip(&zwv).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            NodeKind::ParamAffine {
                rows,
                cols,
                augment,
                data: None,
            } => {
                let nz = cols - usize::from(*augment);
                let nw = rows * cols;
                let (vw, vz) = v.split_at(nw);
                let (ow, oz) = out.split_at_mut(nw);
                for r in 0..*rows {
                    let yb = ybar[r];
                    let row_o = &mut ow[r * cols..r * cols + nz];
                    for (o, vzc) in row_o.iter_mut().zip(vz) {
                        *o += yb * vzc;
                    }
                    let row_v = &vw[r * cols..r * cols + nz];
                    for (o, vwc) in oz.iter_mut().zip(row_v) {
                        *o += yb * vwc;
                    }
                }
            }
            _ => {}
        }
    }
}

fn split_param_affine<'a>(
    x: &'a [f64],
    rows: usize,
    cols: usize,
    data: Option<&'a [f64]>,
) -> (&'a [f64], &'a [f64]) {
    let (w, rest) = x.split_at(rows * cols);
    (w, data.unwrap_or(rest))
}

/// Gradient of `½ xᵀ Wᵀ Z W x`, namely `Wᵀ Z W x`.
fn quad_gradient(w: &DMatrix<f64>, z: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    let q = matvec(w, x);
    let zq = matvec(z, &q);
    (0..w.ncols())
        .map(|c| w.column(c).iter().zip(&zq).map(|(a, b)| a * b).sum())
        .collect()
}

pub(crate) fn matvec(m: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; m.nrows()];
    for (c, &xc) in x.iter().enumerate() {
        if xc != 0.0 {
            for (yr, a) in y.iter_mut().zip(m.column(c).iter()) {
                *yr += a * xc;
            }
        }
    }
    y
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(1.0);
    let n = m.nrows();
    (0..n).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= rel_tol * scale))
}

/// Representation of `M_i`.
#[derive(Debug, Clone, PartialEq)]
pub enum LocalCurvature {
    Zero,
    DiagonalReal(Vec<f64>),
    DenseReal(DMatrix<f64>),
}

impl LocalCurvature {
    pub fn to_dense(&self, m: usize) -> DMatrix<f64> {
        match self {
            LocalCurvature::Zero => DMatrix::zeros(m, m),
            LocalCurvature::DiagonalReal(d) => DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(d)),
            LocalCurvature::DenseReal(a) => a.clone(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            LocalCurvature::Zero => true,
            LocalCurvature::DiagonalReal(d) => d.iter().all(|&v| v == 0.0),
            LocalCurvature::DenseReal(a) => a.iter().all(|&v| v == 0.0),
        }
    }

    /// Adds `M v` into `out`.
    pub fn apply_into(&self, v: &[f64], out: &mut [f64]) {
        match self {
            LocalCurvature::Zero => {}
            LocalCurvature::DiagonalReal(d) => {
                for ((o, di), vi) in out.iter_mut().zip(d).zip(v) {
                    *o += di * vi;
                }
            }
            LocalCurvature::DenseReal(a) => {
                for (o, y) in out.iter_mut().zip(matvec(a, v)) {
                    *o += y;
                }
            }
        }
    }
}

/// Representation of a factor `F_i` with `F_iᵀ F_i = M_i` (plain transpose).
/// Factors are always square, `ℓ_i = m_i`.
#[derive(Debug, Clone, PartialEq)]
pub enum CurvatureFactor {
    Zero,
    DiagonalComplex(Vec<Complex64>),
    DenseComplex(DMatrix<Complex64>),
}

impl CurvatureFactor {
    /// Adds `Re(Fᵀ v)` and `Im(Fᵀ v)` into the two output planes.
    pub fn transpose_apply_into(&self, v: &[f64], re: &mut [f64], im: &mut [f64]) {
        match self {
            CurvatureFactor::Zero => {}
            CurvatureFactor::DiagonalComplex(c) => {
                for (k, (ck, vk)) in c.iter().zip(v).enumerate() {
                    re[k] += ck.re * vk;
                    im[k] += ck.im * vk;
                }
            }
            CurvatureFactor::DenseComplex(f) => {
                for col in 0..f.ncols() {
                    let (mut sr, mut si) = (0.0, 0.0);
                    for (fr, vr) in f.column(col).iter().zip(v) {
                        sr += fr.re * vr;
                        si += fr.im * vr;
                    }
                    re[col] += sr;
                    im[col] += si;
                }
            }
        }
    }

    /// `FᵀF` with a plain transpose; the imaginary part should vanish.
    pub fn gram(&self, m: usize) -> DMatrix<Complex64> {
        match self {
            CurvatureFactor::Zero => DMatrix::zeros(m, m),
            CurvatureFactor::DiagonalComplex(c) => {
                DMatrix::from_fn(m, m, |i, j| if i == j { c[i] * c[i] } else { Complex64::new(0.0, 0.0) })
            }
            CurvatureFactor::DenseComplex(f) => f.transpose() * f,
        }
    }
}

/// Complex square root of a real number: `√d` or `i√|d|`.
#[inline]
pub(crate) fn real_sqrt(d: f64) -> Complex64 {
    if d >= 0.0 {
        Complex64::new(d.sqrt(), 0.0)
    } else {
        Complex64::new(0.0, (-d).sqrt())
    }
}

/// Factor `M = Fᵀ F`. Diagonal curvature factors elementwise; dense curvature
/// goes through the symmetric eigendecomposition `M = Q Λ Qᵀ`, `F = Λ^{1/2} Qᵀ`.
pub fn factor_curvature(m: &LocalCurvature) -> Result<CurvatureFactor> {
    match m {
        LocalCurvature::Zero => Ok(CurvatureFactor::Zero),
        LocalCurvature::DiagonalReal(d) => Ok(CurvatureFactor::DiagonalComplex(
            d.iter().map(|&v| real_sqrt(v)).collect(),
        )),
        LocalCurvature::DenseReal(a) => {
            if !is_symmetric(a, 1e-10) {
                return Err(Error::NotSymmetric);
            }
            if a.iter().all(|&v| v == 0.0) {
                return Ok(CurvatureFactor::Zero);
            }
            let sym = (a + a.transpose()) * 0.5;
            let eig = SymmetricEigen::new(sym);
            let n = a.nrows();
            let f = DMatrix::from_fn(n, n, |k, j| real_sqrt(eig.eigenvalues[k]) * eig.eigenvectors[(j, k)]);
            Ok(CurvatureFactor::DenseComplex(f))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(kind: NodeKind, m: usize) -> NodeSpec {
        NodeSpec::new(kind, m).unwrap()
    }

    fn quad_z() -> NodeKind {
        NodeKind::QuadraticForm {
            w: DMatrix::identity(2, 2),
            z: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
        }
    }

    #[test]
    fn forward_examples() {
        let sq = spec(NodeKind::Elementwise(Nonlinearity::Square), 2);
        assert_eq!(sq.forward(&[2.0, -3.0]).unwrap(), vec![4.0, 9.0]);

        let sp = spec(NodeKind::Elementwise(Nonlinearity::Softplus), 1);
        assert!((sp.forward(&[0.0]).unwrap()[0] - 2f64.ln()).abs() < 1e-15);

        let aff = spec(
            NodeKind::Affine {
                weight: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
                bias: None,
            },
            2,
        );
        assert_eq!(aff.forward(&[1.0, 1.0]).unwrap(), vec![3.0, 7.0]);
    }

    #[test]
    fn softplus_does_not_overflow() {
        let g = Nonlinearity::Softplus;
        assert_eq!(g.value(1000.0), 1000.0);
        assert!(g.value(-1000.0) >= 0.0 && g.value(-1000.0) < 1e-300);
        assert!((g.d1(800.0) - 1.0).abs() < 1e-15);
        assert!(Nonlinearity::Logistic.d2(-800.0).is_finite());
    }

    #[test]
    fn vjp_examples() {
        let t = spec(NodeKind::Elementwise(Nonlinearity::Tanh), 1);
        assert_eq!(t.vjp(&[0.0], &[5.0]).unwrap(), vec![5.0]);

        let q = spec(quad_z(), 2);
        assert_eq!(q.vjp(&[1.0, 2.0], &[1.0]).unwrap(), vec![2.0, 1.0]);
    }

    #[test]
    fn dimension_errors() {
        let t = spec(NodeKind::Elementwise(Nonlinearity::Tanh), 2);
        assert!(matches!(t.forward(&[1.0]), Err(Error::NodeDimension { .. })));
        assert!(matches!(t.vjp(&[1.0, 2.0], &[1.0]), Err(Error::NodeDimension { .. })));
        assert!(NodeSpec::new(NodeKind::SquaredLoss { target: vec![0.0; 3], scale: 1.0 }, 2).is_err());
        assert!(NodeSpec::new(NodeKind::Slice { offset: 2, len: 3 }, 4).is_err());
        assert!(NodeSpec::new(NodeKind::Sum { dim: 2 }, 3).is_err());
    }

    #[test]
    fn quadratic_form_requires_symmetric_z() {
        let kind = NodeKind::QuadraticForm {
            w: DMatrix::identity(2, 2),
            z: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 0.0]),
        };
        assert!(matches!(NodeSpec::new(kind, 2), Err(Error::NotSymmetric)));
    }

    #[test]
    fn local_curvature_examples() {
        let sq = spec(NodeKind::Elementwise(Nonlinearity::Square), 2);
        assert_eq!(
            sq.local_curvature(&[1.0, -1.0], &[3.0, -1.0]).unwrap(),
            LocalCurvature::DiagonalReal(vec![6.0, -2.0])
        );
        let id = spec(NodeKind::Elementwise(Nonlinearity::Identity), 2);
        assert_eq!(id.local_curvature(&[0.3, 0.4], &[1.0, 2.0]).unwrap(), LocalCurvature::Zero);

        let q = spec(quad_z(), 2);
        match q.local_curvature(&[1.0, 2.0], &[1.0]).unwrap() {
            LocalCurvature::DenseReal(m) => {
                assert_eq!(m, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn factor_examples() {
        let f = factor_curvature(&LocalCurvature::DiagonalReal(vec![4.0, -9.0])).unwrap();
        assert_eq!(
            f,
            CurvatureFactor::DiagonalComplex(vec![Complex64::new(2.0, 0.0), Complex64::new(0.0, 3.0)])
        );
        assert_eq!(factor_curvature(&LocalCurvature::Zero).unwrap(), CurvatureFactor::Zero);

        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let f = factor_curvature(&LocalCurvature::DenseReal(m.clone())).unwrap();
        let g = f.gram(2);
        for i in 0..2 {
            for j in 0..2 {
                assert!((g[(i, j)].re - m[(i, j)]).abs() < 1e-12);
                assert!(g[(i, j)].im.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn factor_rejects_asymmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(
            factor_curvature(&LocalCurvature::DenseReal(m)),
            Err(Error::NotSymmetric)
        ));
    }

    fn all_kinds() -> Vec<(NodeKind, usize)> {
        let mut kinds: Vec<(NodeKind, usize)> = Nonlinearity::ALL
            .into_iter()
            .map(|g| (NodeKind::Elementwise(g), 3))
            .collect();
        kinds.push((
            NodeKind::Affine {
                weight: DMatrix::from_row_slice(2, 3, &[0.3, -0.2, 0.5, 1.1, 0.4, -0.7]),
                bias: Some(vec![0.1, -0.3]),
            },
            3,
        ));
        kinds.push((
            NodeKind::ParamAffine {
                rows: 2,
                cols: 3,
                augment: true,
                data: None,
            },
            8,
        ));
        kinds.push((
            NodeKind::ParamAffine {
                rows: 2,
                cols: 2,
                augment: false,
                data: Some(vec![0.7, -1.2]),
            },
            4,
        ));
        kinds.push((
            NodeKind::SquaredLoss {
                target: vec![0.2, -0.4, 1.0],
                scale: 0.5,
            },
            3,
        ));
        kinds.push((
            NodeKind::QuadraticForm {
                w: DMatrix::from_row_slice(2, 3, &[1.0, 0.5, -0.3, 0.2, -1.0, 0.8]),
                z: DMatrix::from_row_slice(2, 2, &[1.5, -0.4, -0.4, -0.9]),
            },
            3,
        ));
        kinds.push((NodeKind::Slice { offset: 1, len: 2 }, 4));
        kinds.push((NodeKind::Sum { dim: 2 }, 6));
        kinds
    }

    fn fd_hessian_of_weighted(node: &NodeSpec, x: &[f64], ybar: &[f64]) -> DMatrix<f64> {
        // Central differences of the vjp, which is the gradient of ybarᵀ f(x).
        let m = x.len();
        let eps = 1e-5;
        let mut h = DMatrix::zeros(m, m);
        for j in 0..m {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += eps;
            xm[j] -= eps;
            let gp = node.vjp(&xp, ybar).unwrap();
            let gm = node.vjp(&xm, ybar).unwrap();
            for i in 0..m {
                h[(i, j)] = (gp[i] - gm[i]) / (2.0 * eps);
            }
        }
        h
    }

    proptest! {
        #[test]
        fn vjp_matches_finite_differences(seed in proptest::collection::vec(-1.5f64..1.5, 16)) {
            for (kind, m) in all_kinds() {
                let node = spec(kind, m);
                let x: Vec<f64> = seed.iter().cycle().take(m).copied().collect();
                let w: Vec<f64> = seed.iter().rev().cycle().take(node.out_dim()).copied().collect();
                let g = node.vjp(&x, &w).unwrap();
                let eps = 1e-5;
                for j in 0..m {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[j] += eps;
                    xm[j] -= eps;
                    let fp = dot(&w, &node.forward(&xp).unwrap());
                    let fm = dot(&w, &node.forward(&xm).unwrap());
                    let fd = (fp - fm) / (2.0 * eps);
                    prop_assert!((fd - g[j]).abs() <= 1e-5 * g[j].abs().max(1.0), "{}: {} vs {}", node.kind().name(), fd, g[j]);
                }
                // jvp is the transpose of vjp
                let dx: Vec<f64> = seed.iter().skip(3).cycle().take(m).copied().collect();
                let lhs = dot(&w, &node.jvp(&x, &dx).unwrap());
                let rhs = dot(&g, &dx);
                prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
            }
        }

        #[test]
        fn curvature_matches_fd_hessian(seed in proptest::collection::vec(-1.5f64..1.5, 16)) {
            for (kind, m) in all_kinds() {
                let node = spec(kind, m);
                let x: Vec<f64> = seed.iter().cycle().take(m).copied().collect();
                let ybar: Vec<f64> = seed.iter().rev().cycle().take(node.out_dim()).copied().collect();
                let mm = node.local_curvature(&x, &ybar).unwrap().to_dense(m);
                let fd = fd_hessian_of_weighted(&node, &x, &ybar);
                let scale = fd.amax().max(1.0);
                prop_assert!((&mm - &fd).amax() <= 1e-4 * scale, "{}", node.kind().name());
                if !node.kind().has_curvature() {
                    prop_assert!(mm.amax() == 0.0);
                }
                // matrix-free product agrees with the dense representation
                let v: Vec<f64> = seed.iter().skip(5).cycle().take(m).copied().collect();
                let mv = node.curvature_apply(&x, &ybar, &v).unwrap();
                let dense_mv = matvec(&mm, &v);
                for (a, b) in mv.iter().zip(&dense_mv) {
                    prop_assert!((a - b).abs() <= 1e-12 * scale);
                }
            }
        }

        #[test]
        fn factor_round_trip(n in 1usize..7, entries in proptest::collection::vec(-3.0f64..3.0, 49), diag in proptest::collection::vec(-3.0f64..3.0, 7)) {
            let a = DMatrix::from_fn(n, n, |i, j| entries[i * 7 + j]);
            let m = (&a + a.transpose()) * 0.5;
            let f = factor_curvature(&LocalCurvature::DenseReal(m.clone())).unwrap();
            let g = f.gram(n);
            let scale = m.amax().max(1e-300);
            for i in 0..n {
                for j in 0..n {
                    prop_assert!((g[(i, j)].re - m[(i, j)]).abs() <= 1e-10 * scale);
                    prop_assert!(g[(i, j)].im.abs() <= 1e-10 * scale);
                }
            }
            let d = LocalCurvature::DiagonalReal(diag[..n].to_vec());
            let g = factor_curvature(&d).unwrap().gram(n);
            for i in 0..n {
                prop_assert!((g[(i, i)].re - diag[i]).abs() <= 1e-12 * diag[i].abs().max(1.0));
                prop_assert!(g[(i, i)].im.abs() <= 1e-12);
            }
        }
    }
}
