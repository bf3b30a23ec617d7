//! Small graphs and comparison helpers shared by unit tests, integration
//! tests and benchmarks.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::graph::{Graph, GraphBuilder};
use crate::mlp::{mlp_as_graph, Mlp};
use crate::nodes::{NodeKind, Nonlinearity};

/// Central differences with step `step · max(1, |x_j|)`.
pub fn central_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|j| {
            let eps = step * x[j].abs().max(1.0);
            y[j] = x[j] + eps;
            let fp = f(&y);
            y[j] = x[j] - eps;
            let fm = f(&y);
            y[j] = x[j];
            (fp - fm) / (2.0 * eps)
        })
        .collect()
}

/// `‖a − b‖_F / ‖b‖_F` (absolute when `b` is zero).
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let d = (a - b).norm();
    let s = b.norm();
    if s > 0.0 {
        d / s
    } else {
        d
    }
}

/// `‖a − b‖₂ / ‖b‖₂` (absolute when `b` is zero).
pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let s: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if s > 0.0 {
        d / s
    } else {
        d
    }
}

/// `f(y) = ½ yᵀ Wᵀ Z W y` as a single node.
pub fn quadratic_form_graph(w: DMatrix<f64>, z: DMatrix<f64>) -> Graph {
    let mut b = GraphBuilder::new();
    let src = b.input(w.ncols());
    b.add(NodeKind::QuadraticForm { w, z }, &[src]);
    b.build().expect("valid quadratic form graph")
}

/// `f(y) = (wᵀ y)²` as affine, square and sum nodes.
pub fn squared_dot_graph(w: &[f64]) -> Graph {
    let mut b = GraphBuilder::new();
    let src = b.input(w.len());
    let a = b.add(
        NodeKind::Affine {
            weight: DMatrix::from_row_slice(1, w.len(), w),
            bias: None,
        },
        &[src],
    );
    let s = b.add(NodeKind::Elementwise(Nonlinearity::Square), &[a]);
    b.add(NodeKind::Sum { dim: 1 }, &[s]);
    b.build().expect("valid squared dot graph")
}

/// `f(y) = ½‖y‖²`.
pub fn half_norm_graph(n: usize) -> Graph {
    let mut b = GraphBuilder::new();
    let src = b.input(n);
    b.add(
        NodeKind::SquaredLoss {
            target: vec![0.0; n],
            scale: 1.0,
        },
        &[src],
    );
    b.build().expect("valid half norm graph")
}

/// Random inputs and one-hot-free Gaussian targets for a batch.
pub fn random_batch(sizes: &[usize], batch: usize, rng: &mut impl Rng) -> (DMatrix<f64>, DMatrix<f64>) {
    let n0 = sizes[0];
    let nl = *sizes.last().expect("at least two layers");
    let x = DMatrix::from_fn(n0, batch, |_, _| rng.sample::<f64, _>(StandardNormal));
    let t = DMatrix::from_fn(nl, batch, |_, _| rng.sample::<f64, _>(StandardNormal));
    (x, t)
}

/// A random network with weights of variance 0.5 and a random batch.
pub fn random_mlp(
    sizes: &[usize],
    hidden: Nonlinearity,
    batch: usize,
    rng: &mut impl Rng,
) -> (Mlp, DMatrix<f64>, DMatrix<f64>) {
    let mlp = Mlp::random(sizes, hidden, 0.5, rng).expect("valid sizes");
    let (x, t) = random_batch(sizes, batch, rng);
    (mlp, x, t)
}

/// The parameter-Hessian graph of a random network and batch, with the
/// point to evaluate it at.
pub fn random_mlp_graph(sizes: &[usize], hidden: Nonlinearity, batch: usize, rng: &mut impl Rng) -> (Graph, Vec<f64>) {
    let (mlp, x, t) = random_mlp(sizes, hidden, batch, rng);
    let g = mlp_as_graph(&mlp, &x, &t).expect("valid network graph");
    (g.graph, g.params)
}

/// A random vector of standard normals.
pub fn normal_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
