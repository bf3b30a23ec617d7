//! Exact second-order oracles: the dense Hessian by backward recursion over
//! the graph, Hessian-vector products, and a finite-difference Hessian.
//!
//! The dense recursion propagates `H^f_{x_i,y_1}` backwards:
//!
//! ```text
//! H^f_{y_i,y_1} = Σ_{k ∈ C_i} R_{k,i}ᵀ-slot of H^f_{x_k,y_1}
//! H^f_{x_i,y_1} = J^{y_i ᵀ}_{x_i} H^f_{y_i,y_1} + M_i J^{x_i}_{y_1}
//! ```
//!
//! where the Jacobians `J^{x_i}_{y_1}` come from a reverse sweep seeded with
//! the identity at `x_i`. Each column of the Hessian is one lane of a
//! multi-lane reverse sweep.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::graph::{evaluate, forward_tangent, gradient, reverse_sweep, GradState, Graph, NodeId, Tape};
use crate::nodes::LocalCurvature;

/// Default bound on `Σ m_i` (and on `n`) for dense oracles.
pub const DEFAULT_DENSE_CAP: usize = 4096;

/// Symmetric `n × n` Hessian of `f` with respect to `y_1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseHessian(pub DMatrix<f64>);

impl DenseHessian {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.0.diagonal().iter().copied().collect()
    }

    fn symmetrized(m: DMatrix<f64>) -> Self {
        let t = m.transpose();
        DenseHessian((m + t) * 0.5)
    }
}

pub fn exact_hessian(graph: &Graph, input: &[f64]) -> Result<DenseHessian> {
    exact_hessian_with_cap(graph, input, DEFAULT_DENSE_CAP)
}

pub fn exact_hessian_with_cap(graph: &Graph, input: &[f64], cap: usize) -> Result<DenseHessian> {
    let size = graph.total_input_dim().max(graph.input_dim());
    if size > cap {
        return Err(Error::TooLarge { size, cap });
    }
    let tape = evaluate(graph, input)?;
    let grad = gradient(graph, &tape)?;
    let n = graph.input_dim();

    // M_i J^{x_i}_{y_1} for every node with nonzero local curvature.
    let mut injections: Vec<Option<DMatrix<f64>>> = vec![None; graph.len()];
    for id in graph.node_ids() {
        let spec = graph.spec(id);
        if !spec.kind().has_curvature() {
            continue;
        }
        let m = spec.local_curvature_unchecked(tape.x(id), grad.ybar(id));
        if m.is_zero() {
            continue;
        }
        let jac = input_jacobian(graph, &tape, id);
        let m_dense = m.to_dense(spec.in_dim());
        injections[id.0] = Some(m_dense * jac);
    }

    let cols = reverse_sweep(graph, &tape, n, |id, xbars| {
        if let Some(mj) = &injections[id.0] {
            for (c, xb) in xbars.iter_mut().enumerate() {
                for (r, v) in xb.iter_mut().enumerate() {
                    *v += mj[(r, c)];
                }
            }
        }
    });
    let h = DMatrix::from_fn(n, n, |r, c| cols[c][r]);
    Ok(DenseHessian::symmetrized(h))
}

/// `J^{x_i}_{y_1}` (`m_i × n`): a reverse sweep seeded with `J^{x_i}_{x_i} = I`.
/// Nodes that are not ancestors of `i` carry zero cotangents, which is the
/// `J^{x_i}_{x_j} = 0` convention for descendants.
fn input_jacobian(graph: &Graph, tape: &Tape, node: NodeId) -> DMatrix<f64> {
    let m = graph.spec(node).in_dim();
    let rows = reverse_sweep(graph, tape, m, |id, xbars| {
        if id == node {
            for (r, xb) in xbars.iter_mut().enumerate() {
                xb[r] += 1.0;
            }
        }
    });
    let n = graph.input_dim();
    DMatrix::from_fn(m, n, |r, c| rows[r][c])
}

/// Evaluation state reused across many Hessian-vector products at one point.
#[derive(Debug, Clone)]
pub struct HvpContext<'g> {
    graph: &'g Graph,
    tape: Tape,
    grad: GradState,
}

impl<'g> HvpContext<'g> {
    pub fn new(graph: &'g Graph, input: &[f64]) -> Result<Self> {
        let tape = evaluate(graph, input)?;
        let grad = gradient(graph, &tape)?;
        Ok(Self { graph, tape, grad })
    }

    pub fn from_parts(graph: &'g Graph, tape: Tape, grad: GradState) -> Self {
        Self { graph, tape, grad }
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn grad(&self) -> &GradState {
        &self.grad
    }

    /// `H w`: a forward tangent sweep gives `ẋ_i = J^{x_i}_{y_1} w`, then a
    /// reverse sweep injects `M_i ẋ_i` at each node.
    pub fn hvp(&self, w: &[f64]) -> Result<Vec<f64>> {
        let graph = self.graph;
        if w.len() != graph.input_dim() {
            return Err(Error::SlotDimension {
                node: graph.source().0,
                slot: 0,
                expected: graph.input_dim(),
                got: w.len(),
            });
        }
        Ok(hvp_unchecked(graph, &self.tape, &self.grad, w))
    }
}

/// `H w` without dimension checks; the tape and adjoints must belong to `graph`.
pub(crate) fn hvp_unchecked(graph: &Graph, tape: &Tape, grad: &GradState, w: &[f64]) -> Vec<f64> {
    let xdot = forward_tangent(graph, tape, w);
    let mut out = reverse_sweep(graph, tape, 1, |id, xbars| {
        let spec = graph.spec(id);
        if spec.kind().has_curvature() {
            spec.curvature_apply_into(tape.x(id), grad.ybar(id), &xdot[id.0], &mut xbars[0]);
        }
    });
    out.pop().expect("one lane")
}

pub fn hessian_vector_product(graph: &Graph, input: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    HvpContext::new(graph, input)?.hvp(w)
}

/// `diag(H)` from one Hessian-vector product per basis vector, run in parallel.
pub fn hessian_diagonal(graph: &Graph, input: &[f64]) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    let ctx = HvpContext::new(graph, input)?;
    let n = graph.input_dim();
    Ok((0..n)
        .into_par_iter()
        .map_init(
            || vec![0.0; n],
            |e, j| {
                e[j] = 1.0;
                let h = hvp_unchecked(graph, &ctx.tape, &ctx.grad, e);
                e[j] = 0.0;
                h[j]
            },
        )
        .collect())
}

/// Column `j` is `(∇f(y + ε_j e_j) − ∇f(y − ε_j e_j)) / (2 ε_j)` with
/// `ε_j = step · max(1, |y_j|)`; the result is symmetrized.
pub fn finite_difference_hessian(graph: &Graph, input: &[f64], step: f64) -> Result<DenseHessian> {
    if !(step > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {step}")));
    }
    let n = graph.input_dim();
    let grad_at = |y: &[f64]| -> Result<Vec<f64>> {
        let t = evaluate(graph, y)?;
        Ok(gradient(graph, &t)?.gradient().to_vec())
    };
    let mut h = DMatrix::zeros(n, n);
    let mut y = input.to_vec();
    for j in 0..n {
        let eps = step * input[j].abs().max(1.0);
        y[j] = input[j] + eps;
        let gp = grad_at(&y)?;
        y[j] = input[j] - eps;
        let gm = grad_at(&y)?;
        y[j] = input[j];
        for i in 0..n {
            h[(i, j)] = (gp[i] - gm[i]) / (2.0 * eps);
        }
    }
    Ok(DenseHessian::symmetrized(h))
}

/// Dense local curvature of every node at `input`; handy for inspection.
pub fn local_curvatures(graph: &Graph, tape: &Tape, grad: &GradState) -> Vec<LocalCurvature> {
    graph
        .node_ids()
        .map(|id| graph.spec(id).local_curvature_unchecked(tape.x(id), grad.ybar(id)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;
    use crate::nodes::{NodeKind, Nonlinearity};
    use crate::testing::{quadratic_form_graph, random_mlp_graph, rel_frobenius, squared_dot_graph};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn half_norm_graph(n: usize) -> Graph {
        let mut b = GraphBuilder::new();
        let x = b.input(n);
        b.add(NodeKind::SquaredLoss { target: vec![0.0; n], scale: 1.0 }, &[x]);
        b.build().unwrap()
    }

    #[test]
    fn identity_hessian() {
        let g = half_norm_graph(3);
        let h = exact_hessian(&g, &[0.3, -1.0, 2.0]).unwrap();
        assert_eq!(h.0, DMatrix::identity(3, 3));
        assert_eq!(hessian_vector_product(&g, &[0.0; 3], &[1.0, 2.0, 0.0]).unwrap(), vec![1.0, 2.0, 0.0]);
        let fd = finite_difference_hessian(&g, &[0.3, -1.0, 2.0], 1e-5).unwrap();
        assert!((fd.0 - DMatrix::<f64>::identity(3, 3)).amax() < 1e-8);
    }

    #[test]
    fn squared_dot_hessian() {
        let g = squared_dot_graph(&[1.0, 2.0]);
        let h = exact_hessian(&g, &[0.5, -0.25]).unwrap();
        assert_eq!(h.0, DMatrix::from_row_slice(2, 2, &[2.0, 4.0, 4.0, 8.0]));
        assert_eq!(hessian_vector_product(&g, &[0.5, -0.25], &[1.0, 0.0]).unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn quadratic_form_hessian_is_z() {
        let z = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let g = quadratic_form_graph(DMatrix::identity(2, 2), z.clone());
        let h = exact_hessian(&g, &[1.0, 2.0]).unwrap();
        assert_eq!(h.0, z);
        let fd = finite_difference_hessian(&g, &[1.0, 2.0], 1e-5).unwrap();
        assert!((fd.0 - &z).amax() < 1e-9);
    }

    #[test]
    fn cap_is_enforced() {
        let g = half_norm_graph(10);
        assert!(matches!(
            exact_hessian_with_cap(&g, &[0.0; 10], 5),
            Err(Error::TooLarge { size: 10, cap: 5 })
        ));
    }

    #[test]
    fn mlp_exact_matches_fd_and_hvp() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for g_fn in Nonlinearity::ALL {
            let (g, theta) = random_mlp_graph(&[4, 3, 2], g_fn, 2, &mut rng);
            let h = exact_hessian(&g, &theta).unwrap();
            let fd = finite_difference_hessian(&g, &theta, 1e-5).unwrap();
            assert!(rel_frobenius(&h.0, &fd.0) <= 1e-4, "{g_fn:?}: {}", rel_frobenius(&h.0, &fd.0));
            let ctx = HvpContext::new(&g, &theta).unwrap();
            for _ in 0..3 {
                let w: Vec<f64> = (0..theta.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let hw = ctx.hvp(&w).unwrap();
                let dense = &h.0 * nalgebra::DVector::from_column_slice(&w);
                for (a, b) in hw.iter().zip(dense.iter()) {
                    assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn quadratic_graph_hessian_is_input_independent() {
        let z = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, -0.2, 0.5, -2.0, 0.3, -0.2, 0.3, 0.7]);
        let w = DMatrix::from_row_slice(3, 2, &[1.0, -1.0, 0.5, 2.0, 0.0, 1.0]);
        let g = quadratic_form_graph(w, z);
        let a = exact_hessian(&g, &[0.1, 5.0]).unwrap();
        let b = exact_hessian(&g, &[-3.0, 0.7]).unwrap();
        assert!((a.0 - b.0).amax() <= 1e-12);
    }

    proptest! {
        #[test]
        fn hvp_is_linear(seed in 0u64..1000, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (g, theta) = random_mlp_graph(&[3, 2, 2], Nonlinearity::Tanh, 1, &mut rng);
            let n = theta.len();
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ctx = HvpContext::new(&g, &theta).unwrap();
            let combo: Vec<f64> = w.iter().zip(&u).map(|(a, b)| alpha * a + beta * b).collect();
            let lhs = ctx.hvp(&combo).unwrap();
            let hw = ctx.hvp(&w).unwrap();
            let hu = ctx.hvp(&u).unwrap();
            for i in 0..n {
                let rhs = alpha * hw[i] + beta * hu[i];
                prop_assert!((lhs[i] - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
            }
        }
    }
}
