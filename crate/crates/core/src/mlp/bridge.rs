//! The same network written as a generic graph over its parameter vector.

use nalgebra::DMatrix;

use super::{Mlp, MlpNoise};
use crate::cp::{CurvatureMask, NoiseDraw};
use crate::error::{Error, Result};
use crate::graph::{Graph, GraphBuilder, NodeId};
use crate::nodes::{NodeKind, Nonlinearity};

/// A network and batch expressed as a graph whose source is the flattened
/// parameter vector, plus the node ids needed to line up per-unit noise.
#[derive(Debug, Clone)]
pub struct MlpGraph {
    pub graph: Graph,
    /// The parameter vector the graph should be evaluated at.
    pub params: Vec<f64>,
    /// `hidden[b][j − 1]`: the elementwise node producing `z_j` for case `b`.
    pub hidden: Vec<Vec<NodeId>>,
    /// `losses[b]`: the squared-loss node of case `b`.
    pub losses: Vec<NodeId>,
    /// Batch column of each case in the graph.
    pub cases: Vec<usize>,
}

impl MlpGraph {
    /// Lays out batched network noise as a graph noise draw for
    /// [`CurvatureMask::SkipBilinear`]: column `b` of layer `j` goes to case
    /// `b`'s elementwise node (or loss node for the output layer). With that
    /// mask, the sweeps of the per-case graphs from [`mlp_case_graphs`],
    /// summed over cases, reproduce the batched rank-`B` estimates exactly.
    /// On a whole-batch graph a single sweep is a rank-1 estimate instead.
    pub fn noise_draw(&self, noise: &MlpNoise, hidden: Nonlinearity) -> Result<NoiseDraw> {
        let mut parts = Vec::new();
        let last = noise.layers.len() - 1;
        for (c, (&b, loss)) in self.cases.iter().zip(&self.losses).enumerate() {
            if noise.layers[last].ncols() <= b {
                return Err(Error::Contract("noise has fewer columns than the batch".into()));
            }
            if !hidden.is_linear() {
                for (j, &id) in self.hidden[c].iter().enumerate() {
                    parts.push((id, noise.layers[j + 1].column(b).iter().copied().collect()));
                }
            }
            parts.push((*loss, noise.layers[last].column(b).iter().copied().collect()));
        }
        NoiseDraw::from_vectors(&self.graph, CurvatureMask::SkipBilinear, parts)
    }
}

fn case_nodes(
    builder: &mut GraphBuilder,
    mlp: &Mlp,
    slices: &[NodeId],
    x: &[f64],
    t: &[f64],
    scale: f64,
) -> (Vec<NodeId>, NodeId) {
    let last = mlp.num_layers() - 1;
    let mut hidden = Vec::new();
    let mut z = None;
    for (i, w) in mlp.weights().iter().enumerate() {
        let (rows, cols) = w.shape();
        let u = match z {
            None => builder.add(
                NodeKind::ParamAffine {
                    rows,
                    cols,
                    augment: true,
                    data: Some(x.to_vec()),
                },
                &[slices[i]],
            ),
            Some(z) => builder.add(
                NodeKind::ParamAffine {
                    rows,
                    cols,
                    augment: true,
                    data: None,
                },
                &[slices[i], z],
            ),
        };
        if i + 1 < last {
            let h = builder.add(NodeKind::Elementwise(mlp.hidden()), &[u]);
            hidden.push(h);
            z = Some(h);
        } else {
            z = Some(u);
        }
    }
    let loss = builder.add(
        NodeKind::SquaredLoss {
            target: t.to_vec(),
            scale,
        },
        &[z.expect("at least one layer")],
    );
    (hidden, loss)
}

fn build(mlp: &Mlp, inputs: &DMatrix<f64>, targets: &DMatrix<f64>, cases: &[usize], scale: f64) -> Result<MlpGraph> {
    mlp.check_batch(inputs, Some(targets))?;
    let mut builder = GraphBuilder::new();
    let src = builder.input(mlp.param_count());
    let mut slices = Vec::new();
    for (off, w) in mlp.layer_offsets().into_iter().zip(mlp.weights()) {
        slices.push(builder.add(NodeKind::Slice { offset: off, len: w.len() }, &[src]));
    }
    let mut hidden = Vec::new();
    let mut losses = Vec::new();
    for &b in cases {
        let x: Vec<f64> = inputs.column(b).iter().copied().collect();
        let t: Vec<f64> = targets.column(b).iter().copied().collect();
        let (h, l) = case_nodes(&mut builder, mlp, &slices, &x, &t, scale);
        hidden.push(h);
        losses.push(l);
    }
    builder.add(NodeKind::Sum { dim: 1 }, &losses);
    Ok(MlpGraph {
        graph: builder.build()?,
        params: mlp.params(),
        hidden,
        losses,
        cases: cases.to_vec(),
    })
}

/// The whole batch objective `Σ_b ½‖z_b − t_b‖² / B` as one graph.
pub fn mlp_as_graph(mlp: &Mlp, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<MlpGraph> {
    let cases: Vec<usize> = (0..inputs.ncols()).collect();
    build(mlp, inputs, targets, &cases, 1.0 / inputs.ncols() as f64)
}

/// One graph per case, each computing `½‖z_b − t_b‖² / B`, so that the batch
/// Hessian is the sum of the per-case Hessians.
pub fn mlp_case_graphs(mlp: &Mlp, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<Vec<MlpGraph>> {
    let scale = 1.0 / inputs.ncols() as f64;
    (0..inputs.ncols()).map(|b| build(mlp, inputs, targets, &[b], scale)).collect()
}
