//! Vector-valued computational graphs, forward evaluation, and the reverse
//! gradient sweep.
//!
//! Each node `i` receives `x_i`, the concatenation of its parents' outputs in
//! slot order, and produces `y_i = f_i(x_i)`. The projection from a parent
//! output into a child input is never materialized; it is a fixed slot offset.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;

use crate::error::{Error, Result};
use crate::nodes::{NodeKind, NodeSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// An immutable DAG with a single source and a single scalar sink.
#[derive(Debug, Clone)]
pub struct Graph {
    specs: Vec<NodeSpec>,
    parents: Vec<Vec<NodeId>>,
    offsets: Vec<Vec<usize>>,
    children: Vec<Vec<NodeId>>,
    order: Vec<NodeId>,
    source: NodeId,
    sink: NodeId,
}

/// Deterministic topological order of a parent list: Kahn's algorithm with
/// ties broken by ascending node id.
pub fn topological_order(parents: &[Vec<NodeId>]) -> Result<Vec<NodeId>> {
    let n = parents.len();
    let mut indegree = vec![0usize; n];
    let mut children = vec![Vec::new(); n];
    for (child, ps) in parents.iter().enumerate() {
        for p in ps {
            if p.0 >= n {
                return Err(Error::Structure(format!("node {child} references missing parent {p}")));
            }
            children[p.0].push(child);
            indegree[child] += 1;
        }
    }
    let mut ready: BinaryHeap<Reverse<usize>> =
        (0..n).filter(|&i| indegree[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(i)) = ready.pop() {
        order.push(NodeId(i));
        for &c in &children[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push(Reverse(c));
            }
        }
    }
    if order.len() < n {
        // Walk parents among the unresolved nodes until one repeats; that
        // node lies on a cycle.
        let start = (0..n).find(|&i| indegree[i] > 0).expect("unresolved node");
        let mut seen = vec![false; n];
        let mut cur = start;
        while !seen[cur] {
            seen[cur] = true;
            cur = parents[cur]
                .iter()
                .map(|p| p.0)
                .find(|&p| indegree[p] > 0)
                .expect("an unresolved node has an unresolved parent");
        }
        return Err(Error::Cycle { node: cur });
    }
    Ok(order)
}

impl Graph {
    /// Builds a graph from `(kind, parents)` pairs indexed by node id. Parents
    /// may reference any node; cycles and dimension errors are reported here.
    pub fn new(nodes: Vec<(NodeKind, Vec<NodeId>)>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Structure("graph has no nodes".into()));
        }
        let (kinds, parents): (Vec<_>, Vec<_>) = nodes.into_iter().unzip();
        let order = topological_order(&parents)?;
        let n = kinds.len();

        let mut children = vec![Vec::new(); n];
        for (c, ps) in parents.iter().enumerate() {
            for p in ps {
                if !children[p.0].contains(&NodeId(c)) {
                    children[p.0].push(NodeId(c));
                }
            }
        }

        let sources: Vec<usize> = (0..n).filter(|&i| parents[i].is_empty()).collect();
        if sources.len() != 1 {
            return Err(Error::Structure(format!(
                "expected exactly one source, found {} ({:?})",
                sources.len(),
                sources
            )));
        }
        let source = sources[0];
        for (i, k) in kinds.iter().enumerate() {
            let is_input = matches!(k, NodeKind::Input { .. });
            if is_input != (i == source) {
                return Err(Error::Structure(format!(
                    "node {i}: input nodes must be the unique parentless node"
                )));
            }
        }
        let sinks: Vec<usize> = (0..n).filter(|&i| children[i].is_empty()).collect();
        if sinks.len() != 1 {
            return Err(Error::Structure(format!(
                "expected exactly one sink, found {} ({:?})",
                sinks.len(),
                sinks
            )));
        }
        let sink = sinks[0];

        let mut specs: Vec<Option<NodeSpec>> = vec![None; n];
        let mut offsets = vec![Vec::new(); n];
        for &id in &order {
            let i = id.0;
            let mut off = 0;
            for p in &parents[i] {
                offsets[i].push(off);
                off += specs[p.0].as_ref().expect("parents precede children").out_dim();
            }
            let spec = NodeSpec::new(kinds[i].clone(), off)
                .map_err(|e| Error::Structure(format!("node {i}: {e}")))?;
            specs[i] = Some(spec);
        }
        let specs: Vec<NodeSpec> = specs.into_iter().map(|s| s.expect("all nodes ordered")).collect();
        if specs[sink].out_dim() != 1 {
            return Err(Error::Structure(format!(
                "sink node {sink} has output dimension {}, expected 1",
                specs[sink].out_dim()
            )));
        }
        Ok(Self {
            specs,
            parents,
            offsets,
            children,
            order,
            source: NodeId(source),
            sink: NodeId(sink),
        })
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn source(&self) -> NodeId {
        self.source
    }

    pub fn sink(&self) -> NodeId {
        self.sink
    }

    /// Dimension `n` of the differentiation variable `y_1`.
    pub fn input_dim(&self) -> usize {
        self.specs[self.source.0].out_dim()
    }

    pub fn spec(&self, id: NodeId) -> &NodeSpec {
        &self.specs[id.0]
    }

    pub fn parents(&self, id: NodeId) -> &[NodeId] {
        &self.parents[id.0]
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.children[id.0]
    }

    /// Parents-before-children order with ties broken by id.
    pub fn order(&self) -> &[NodeId] {
        &self.order
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.specs.len()).map(NodeId)
    }

    /// Sum of all node input dimensions.
    pub fn total_input_dim(&self) -> usize {
        self.specs.iter().map(NodeSpec::in_dim).sum()
    }

    fn gather(&self, id: NodeId, values: &[Vec<f64>]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.specs[id.0].in_dim());
        for p in &self.parents[id.0] {
            x.extend_from_slice(&values[p.0]);
        }
        x
    }

    /// Adds the slot blocks of `xbar` into the parents' accumulators.
    fn scatter(&self, id: NodeId, xbar: &[f64], acc: &mut [Vec<f64>]) {
        for (p, &off) in self.parents[id.0].iter().zip(&self.offsets[id.0]) {
            let dst = &mut acc[p.0];
            let len = dst.len();
            for (d, s) in dst.iter_mut().zip(&xbar[off..off + len]) {
                *d += s;
            }
        }
    }
}

/// Incremental construction with sequential ids.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<(NodeKind, Vec<NodeId>)>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, dim: usize) -> NodeId {
        self.add(NodeKind::Input { dim }, &[])
    }

    pub fn add(&mut self, kind: NodeKind, parents: &[NodeId]) -> NodeId {
        self.nodes.push((kind, parents.to_vec()));
        NodeId(self.nodes.len() - 1)
    }

    pub fn build(self) -> Result<Graph> {
        Graph::new(self.nodes)
    }
}

/// Forward values `x_i`, `y_i` of one evaluation.
#[derive(Debug, Clone)]
pub struct Tape {
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    value: f64,
}

impl Tape {
    pub fn x(&self, id: NodeId) -> &[f64] {
        &self.x[id.0]
    }

    pub fn y(&self, id: NodeId) -> &[f64] {
        &self.y[id.0]
    }

    /// `f = y_L`.
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Adjoints `ybar_i = ∂f/∂y_i` and `xbar_i = ∂f/∂x_i` from one reverse sweep.
#[derive(Debug, Clone)]
pub struct GradState {
    ybar: Vec<Vec<f64>>,
    xbar: Vec<Vec<f64>>,
    source: NodeId,
}

impl GradState {
    pub fn ybar(&self, id: NodeId) -> &[f64] {
        &self.ybar[id.0]
    }

    pub fn xbar(&self, id: NodeId) -> &[f64] {
        &self.xbar[id.0]
    }

    /// `∇f = ybar_1`.
    pub fn gradient(&self) -> &[f64] {
        &self.ybar[self.source.0]
    }

    pub fn len(&self) -> usize {
        self.ybar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ybar.is_empty()
    }
}

/// Runs the graph forward from `input` (the value of `y_1`).
pub fn evaluate(graph: &Graph, input: &[f64]) -> Result<Tape> {
    let n = graph.len();
    if input.len() != graph.input_dim() {
        return Err(Error::SlotDimension {
            node: graph.source.0,
            slot: 0,
            expected: graph.input_dim(),
            got: input.len(),
        });
    }
    let mut x = vec![Vec::new(); n];
    let mut y = vec![Vec::new(); n];
    for &id in &graph.order {
        if id == graph.source {
            y[id.0] = input.to_vec();
            continue;
        }
        let xi = graph.gather(id, &y);
        y[id.0] = graph.specs[id.0].forward_unchecked(&xi);
        x[id.0] = xi;
    }
    let value = y[graph.sink.0][0];
    Ok(Tape { x, y, value })
}

fn check_tape(graph: &Graph, tape: &Tape) -> Result<()> {
    let ok = tape.x.len() == graph.len()
        && graph
            .node_ids()
            .all(|id| tape.y[id.0].len() == graph.spec(id).out_dim() && tape.x[id.0].len() == graph.spec(id).in_dim());
    if ok {
        Ok(())
    } else {
        Err(Error::Contract("tape was not produced by evaluating this graph".into()))
    }
}

/// Reverse-mode sweep: `ybar_L = 1`, `ybar_i = Σ_children (slot of xbar_k)`,
/// `xbar_i = J_{x_i}^{y_i ᵀ} ybar_i`.
pub fn gradient(graph: &Graph, tape: &Tape) -> Result<GradState> {
    check_tape(graph, tape)?;
    let n = graph.len();
    let mut ybar: Vec<Vec<f64>> = graph.specs.iter().map(|s| vec![0.0; s.out_dim()]).collect();
    let mut xbar = vec![Vec::new(); n];
    ybar[graph.sink.0][0] = 1.0;
    for &id in graph.order.iter().rev() {
        if id == graph.source {
            continue;
        }
        let spec = &graph.specs[id.0];
        let mut xb = vec![0.0; spec.in_dim()];
        spec.vjp_into(&tape.x[id.0], &ybar[id.0], &mut xb);
        graph.scatter(id, &xb, &mut ybar);
        xbar[id.0] = xb;
    }
    Ok(GradState {
        ybar,
        xbar,
        source: graph.source,
    })
}

/// A reverse sweep carrying `lanes` independent cotangent vectors that start
/// at zero at the sink. After the vjp at each node, `inject(node, xbar)` may add
/// extra terms to each lane's `xbar`. Returns each lane's adjoint at the source.
pub(crate) fn reverse_sweep<F>(graph: &Graph, tape: &Tape, lanes: usize, mut inject: F) -> Vec<Vec<f64>>
where
    F: FnMut(NodeId, &mut [Vec<f64>]),
{
    let mut acc: Vec<Vec<Vec<f64>>> = (0..lanes)
        .map(|_| graph.specs.iter().map(|s| vec![0.0; s.out_dim()]).collect())
        .collect();
    let mut xbars: Vec<Vec<f64>> = vec![Vec::new(); lanes];
    for &id in graph.order.iter().rev() {
        if id == graph.source {
            continue;
        }
        let spec = &graph.specs[id.0];
        for (lane, xb) in xbars.iter_mut().enumerate() {
            xb.clear();
            xb.resize(spec.in_dim(), 0.0);
            let yb = &acc[lane][id.0];
            if yb.iter().any(|&v| v != 0.0) {
                spec.vjp_into(&tape.x[id.0], yb, xb);
            }
        }
        inject(id, &mut xbars);
        for (lane, xb) in xbars.iter().enumerate() {
            graph.scatter(id, xb, &mut acc[lane]);
        }
    }
    acc.into_iter().map(|mut a| std::mem::take(&mut a[graph.source.0])).collect()
}

/// Forward tangent sweep with `ẏ_1 = w`; returns `ẋ_i = J^{x_i}_{y_1} w` for
/// every node.
pub(crate) fn forward_tangent(graph: &Graph, tape: &Tape, w: &[f64]) -> Vec<Vec<f64>> {
    let n = graph.len();
    let mut ydot = vec![Vec::new(); n];
    let mut xdot = vec![Vec::new(); n];
    for &id in &graph.order {
        if id == graph.source {
            ydot[id.0] = w.to_vec();
            continue;
        }
        let xd = graph.gather(id, &ydot);
        ydot[id.0] = graph.specs[id.0].jvp_unchecked(&tape.x[id.0], &xd);
        xdot[id.0] = xd;
    }
    xdot
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nodes::Nonlinearity;
    use crate::testing::{central_gradient, quadratic_form_graph, random_mlp_graph};
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ids(v: &[usize]) -> Vec<NodeId> {
        v.iter().map(|&i| NodeId(i)).collect()
    }

    #[test]
    fn order_examples() {
        assert_eq!(topological_order(&[vec![]]).unwrap(), ids(&[0]));
        let chain = vec![vec![], ids(&[0]), ids(&[1])];
        assert_eq!(topological_order(&chain).unwrap(), ids(&[0, 1, 2]));
        let diamond = vec![vec![], ids(&[0]), ids(&[0]), ids(&[1, 2])];
        assert_eq!(topological_order(&diamond).unwrap(), ids(&[0, 1, 2, 3]));
        // ties broken by id, not by insertion order of edges
        let shuffled = vec![ids(&[3]), ids(&[3]), ids(&[0, 1]), vec![]];
        assert_eq!(topological_order(&shuffled).unwrap(), ids(&[3, 0, 1, 2]));
    }

    #[test]
    fn cycle_is_reported() {
        let cyc = vec![vec![], ids(&[0, 3]), ids(&[1]), ids(&[2])];
        match topological_order(&cyc) {
            Err(Error::Cycle { node }) => assert!([1, 2, 3].contains(&node)),
            other => panic!("expected cycle, got {other:?}"),
        }
    }

    #[test]
    fn single_node_graph() {
        let g = Graph::new(vec![(NodeKind::Input { dim: 1 }, vec![])]).unwrap();
        assert_eq!(g.order(), &[NodeId(0)]);
        let t = evaluate(&g, &[3.5]).unwrap();
        assert_eq!(t.value(), 3.5);
        assert_eq!(gradient(&g, &t).unwrap().gradient(), &[1.0]);
    }

    #[test]
    fn structural_errors() {
        // two sources
        let r = Graph::new(vec![
            (NodeKind::Input { dim: 1 }, vec![]),
            (NodeKind::Input { dim: 1 }, vec![]),
            (NodeKind::Sum { dim: 1 }, ids(&[0, 1])),
        ]);
        assert!(matches!(r, Err(Error::Structure(_))));
        // vector-valued sink
        let r = Graph::new(vec![
            (NodeKind::Input { dim: 2 }, vec![]),
            (NodeKind::Elementwise(Nonlinearity::Tanh), ids(&[0])),
        ]);
        assert!(matches!(r, Err(Error::Structure(_))));
        // slot dimension mismatch
        let r = Graph::new(vec![
            (NodeKind::Input { dim: 3 }, vec![]),
            (NodeKind::SquaredLoss { target: vec![0.0; 2], scale: 1.0 }, ids(&[0])),
        ]);
        assert!(matches!(r, Err(Error::Structure(_))));
    }

    #[test]
    fn evaluate_rejects_wrong_input() {
        let mut b = GraphBuilder::new();
        let x = b.input(2);
        b.add(NodeKind::SquaredLoss { target: vec![0.0; 2], scale: 1.0 }, &[x]);
        let g = b.build().unwrap();
        assert!(matches!(
            evaluate(&g, &[1.0]),
            Err(Error::SlotDimension { node: 0, slot: 0, .. })
        ));
    }

    #[test]
    fn half_squared_norm() {
        let mut b = GraphBuilder::new();
        let x = b.input(2);
        b.add(NodeKind::SquaredLoss { target: vec![0.0; 2], scale: 1.0 }, &[x]);
        let g = b.build().unwrap();
        let t = evaluate(&g, &[3.0, 4.0]).unwrap();
        assert_eq!(t.value(), 12.5);

        let mut b = GraphBuilder::new();
        let x = b.input(2);
        b.add(NodeKind::SquaredLoss { target: vec![1.0, 1.0], scale: 1.0 }, &[x]);
        let g = b.build().unwrap();
        let t = evaluate(&g, &[3.0, 4.0]).unwrap();
        assert_eq!(gradient(&g, &t).unwrap().gradient(), &[2.0, 3.0]);
    }

    #[test]
    fn quadratic_form_value_and_gradient() {
        let g = quadratic_form_graph(DMatrix::identity(2, 2), DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        let t = evaluate(&g, &[1.0, 2.0]).unwrap();
        assert_eq!(t.value(), 2.0);
        assert_eq!(gradient(&g, &t).unwrap().gradient(), &[2.0, 1.0]);
    }

    #[test]
    fn shared_parent_and_repeated_slots() {
        // f = ½‖[y; y]‖² fed through a sum of two copies of y: f = ½‖2y‖² = 2‖y‖²
        let mut b = GraphBuilder::new();
        let x = b.input(2);
        let s = b.add(NodeKind::Sum { dim: 2 }, &[x, x]);
        b.add(NodeKind::SquaredLoss { target: vec![0.0; 2], scale: 1.0 }, &[s]);
        let g = b.build().unwrap();
        let t = evaluate(&g, &[1.0, -2.0]).unwrap();
        assert_eq!(t.value(), 10.0);
        assert_eq!(gradient(&g, &t).unwrap().gradient(), &[4.0, -8.0]);
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (gfun, sizes) in [
            (Nonlinearity::Tanh, vec![4, 3, 2]),
            (Nonlinearity::Logistic, vec![4, 3, 2]),
            (Nonlinearity::Softplus, vec![3, 4, 2]),
            (Nonlinearity::Square, vec![2, 3, 2]),
        ] {
            let (g, theta) = random_mlp_graph(&sizes, gfun, 2, &mut rng);
            let t = evaluate(&g, &theta).unwrap();
            let grad = gradient(&g, &t).unwrap();
            let fd = central_gradient(|p| evaluate(&g, p).unwrap().value(), &theta, 1e-5);
            for (a, b) in grad.gradient().iter().zip(&fd) {
                assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{gfun:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn graph_is_shareable_across_threads() {
        fn assert_sync<T: Send + Sync>() {}
        assert_sync::<Graph>();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (g, theta) = random_mlp_graph(&[3, 2, 1], Nonlinearity::Tanh, 2, &mut rng);
        let base = evaluate(&g, &theta).unwrap().value();
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..4).map(|_| s.spawn(|| evaluate(&g, &theta).unwrap().value())).collect();
            for h in handles {
                assert_eq!(h.join().unwrap(), base);
            }
        });
    }

    #[test]
    fn order_is_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (g, _) = random_mlp_graph(&[3, 2, 2], Nonlinearity::Tanh, 3, &mut rng);
        let parents: Vec<Vec<NodeId>> = g.node_ids().map(|i| g.parents(i).to_vec()).collect();
        assert_eq!(topological_order(&parents).unwrap(), g.order());
        assert_eq!(topological_order(&parents).unwrap(), topological_order(&parents).unwrap());
    }
}
