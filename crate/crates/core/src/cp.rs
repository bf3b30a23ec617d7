//! Curvature propagation: stochastic Hessian estimates from one reverse sweep.
//!
//! The S sweep injects `F_iᵀ v_i` at every node with local curvature and
//! propagates the sum backwards through the transposed Jacobians:
//!
//! ```text
//! S_{x_i} = F_iᵀ v_i + J^{y_i ᵀ}_{x_i} S_{y_i}
//! ```
//!
//! so that `E[Re(S Sᵀ)] = H`. The T/U pair uses `M_i v_i` and `v_i` as the
//! two injections and gives `E[T Uᵀ] = H` without factoring anything. Both
//! sweeps are linear in the stacked noise vector; running them on every basis
//! vector yields factor matrices with `Re(S̃ S̃ᵀ) = T̃ Ũᵀ = H` exactly.

use std::sync::OnceLock;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::exact::{hvp_unchecked, DEFAULT_DENSE_CAP};
use crate::graph::{evaluate, gradient, reverse_sweep, GradState, Graph, NodeId, Tape};
use crate::noise::{draw_rng, NoiseDist};
use crate::nodes::{factor_curvature, CurvatureFactor, LocalCurvature, NodeKind};
use crate::stats::parallel_moments;

/// Which local curvatures take part in a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum CurvatureMask {
    /// Every node's `M_i`: estimates the Hessian.
    #[default]
    Full,
    /// Only the loss nodes' `M_i`: estimates the Gauss-Newton matrix.
    GaussNewton,
    /// Drops the cross terms of weight-times-activation nodes. The Hessian
    /// diagonal is still estimated without bias; off-diagonal entries are not.
    SkipBilinear,
}

impl CurvatureMask {
    pub fn keeps(self, kind: &NodeKind) -> bool {
        kind.has_curvature()
            && match self {
                CurvatureMask::Full => true,
                CurvatureMask::GaussNewton => kind.is_loss(),
                CurvatureMask::SkipBilinear => !kind.is_bilinear(),
            }
    }
}

/// Nodes that receive noise under `mask`, in ascending id order.
pub fn active_nodes(graph: &Graph, mask: CurvatureMask) -> Vec<NodeId> {
    graph.node_ids().filter(|&id| mask.keeps(graph.spec(id).kind())).collect()
}

/// One noise vector `v_i` of length `m_i` per active node.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    vectors: Vec<Option<Vec<f64>>>,
    dist: Option<NoiseDist>,
}

impl NoiseDraw {
    pub fn sample(graph: &Graph, mask: CurvatureMask, dist: NoiseDist, rng: &mut impl Rng) -> Self {
        let mut vectors = vec![None; graph.len()];
        for id in active_nodes(graph, mask) {
            let mut v = vec![0.0; graph.spec(id).in_dim()];
            dist.fill(rng, &mut v);
            vectors[id.0] = Some(v);
        }
        Self {
            vectors,
            dist: Some(dist),
        }
    }

    /// Splits a stacked vector (active nodes in id order) into per-node pieces.
    pub fn from_stacked(graph: &Graph, mask: CurvatureMask, stacked: &[f64]) -> Result<Self> {
        let active = active_nodes(graph, mask);
        let total: usize = active.iter().map(|&id| graph.spec(id).in_dim()).sum();
        if stacked.len() != total {
            return Err(Error::Contract(format!(
                "stacked noise has length {}, expected {total}",
                stacked.len()
            )));
        }
        let mut vectors = vec![None; graph.len()];
        let mut off = 0;
        for id in active {
            let m = graph.spec(id).in_dim();
            vectors[id.0] = Some(stacked[off..off + m].to_vec());
            off += m;
        }
        Ok(Self { vectors, dist: None })
    }

    /// Builds a draw from explicit per-node vectors; every active node must be
    /// given exactly once.
    pub fn from_vectors(graph: &Graph, mask: CurvatureMask, parts: Vec<(NodeId, Vec<f64>)>) -> Result<Self> {
        let mut vectors = vec![None; graph.len()];
        for (id, v) in parts {
            if id.0 >= graph.len() || !mask.keeps(graph.spec(id).kind()) {
                return Err(Error::Contract(format!("node {id} does not take noise")));
            }
            if v.len() != graph.spec(id).in_dim() {
                return Err(Error::Contract(format!(
                    "noise for node {id} has length {}, expected {}",
                    v.len(),
                    graph.spec(id).in_dim()
                )));
            }
            if vectors[id.0].replace(v).is_some() {
                return Err(Error::Contract(format!("noise for node {id} given twice")));
            }
        }
        if let Some(id) = active_nodes(graph, mask).into_iter().find(|id| vectors[id.0].is_none()) {
            return Err(Error::Contract(format!("no noise given for node {id}")));
        }
        Ok(Self { vectors, dist: None })
    }

    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.vectors.get(id.0).and_then(|v| v.as_deref())
    }

    pub fn dist(&self) -> Option<NoiseDist> {
        self.dist
    }

    /// `Σ m_i` over active nodes.
    pub fn len(&self) -> usize {
        self.vectors.iter().flatten().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All vectors concatenated in node id order.
    pub fn stacked(&self) -> Vec<f64> {
        self.vectors.iter().flatten().flatten().copied().collect()
    }

    /// `α self + β other`; both draws must have the same layout.
    pub fn combine(&self, alpha: f64, other: &NoiseDraw, beta: f64) -> Result<Self> {
        let same = self.vectors.len() == other.vectors.len()
            && self
                .vectors
                .iter()
                .zip(&other.vectors)
                .all(|(a, b)| a.as_ref().map(Vec::len) == b.as_ref().map(Vec::len));
        if !same {
            return Err(Error::Contract("noise draws have different layouts".into()));
        }
        let vectors = self
            .vectors
            .iter()
            .zip(&other.vectors)
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => Some(a.iter().zip(b).map(|(x, y)| alpha * x + beta * y).collect()),
                _ => None,
            })
            .collect();
        Ok(Self { vectors, dist: None })
    }
}

/// Output of one sweep, each vector of length `n`.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepResult {
    /// Complex `S(V)` as real and imaginary parts.
    S { re: Vec<f64>, im: Vec<f64> },
    TU { t: Vec<f64>, u: Vec<f64> },
}

impl SweepResult {
    pub fn len(&self) -> usize {
        match self {
            SweepResult::S { re, .. } => re.len(),
            SweepResult::TU { t, .. } => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn complex(&self) -> Option<Vec<Complex64>> {
        match self {
            SweepResult::S { re, im } => Some(re.iter().zip(im).map(|(&a, &b)| Complex64::new(a, b)).collect()),
            SweepResult::TU { .. } => None,
        }
    }

    /// Entry `(i, j)` of the rank-1 estimate: `Re(s_i s_j)`, `t_i u_j`, or the
    /// symmetrized `½(t_i u_j + u_i t_j)`.
    pub fn entry(&self, i: usize, j: usize, symmetrize: bool) -> f64 {
        match self {
            SweepResult::S { re, im } => re[i] * re[j] - im[i] * im[j],
            SweepResult::TU { t, u } if symmetrize => 0.5 * (t[i] * u[j] + u[i] * t[j]),
            SweepResult::TU { t, u } => t[i] * u[j],
        }
    }

    /// Diagonal of the rank-1 estimate without forming the outer product.
    pub fn diagonal(&self) -> Vec<f64> {
        match self {
            SweepResult::S { re, im } => re.iter().zip(im).map(|(a, b)| a * a - b * b).collect(),
            SweepResult::TU { t, u } => t.iter().zip(u).map(|(a, b)| a * b).collect(),
        }
    }

    pub fn outer(&self, symmetrize: bool) -> DMatrix<f64> {
        let n = self.len();
        DMatrix::from_fn(n, n, |i, j| self.entry(i, j, symmetrize))
    }
}

/// Evaluation, adjoints and local curvatures at one input, shared by any
/// number of sweeps.
#[derive(Debug)]
pub struct Curvature<'g> {
    graph: &'g Graph,
    tape: Tape,
    grad: GradState,
    mask: CurvatureMask,
    local: OnceLock<Vec<LocalCurvature>>,
    factors: OnceLock<Vec<CurvatureFactor>>,
}

impl<'g> Curvature<'g> {
    pub fn new(graph: &'g Graph, input: &[f64], mask: CurvatureMask) -> Result<Self> {
        let tape = evaluate(graph, input)?;
        let grad = gradient(graph, &tape)?;
        Ok(Self::from_parts(graph, tape, grad, mask))
    }

    pub fn from_parts(graph: &'g Graph, tape: Tape, grad: GradState, mask: CurvatureMask) -> Self {
        Self {
            graph,
            tape,
            grad,
            mask,
            local: OnceLock::new(),
            factors: OnceLock::new(),
        }
    }

    fn locals(&self) -> &[LocalCurvature] {
        self.local.get_or_init(|| {
            self.graph
                .node_ids()
                .map(|id| {
                    let spec = self.graph.spec(id);
                    if self.mask.keeps(spec.kind()) {
                        spec.local_curvature_unchecked(self.tape.x(id), self.grad.ybar(id))
                    } else {
                        LocalCurvature::Zero
                    }
                })
                .collect()
        })
    }

    pub fn graph(&self) -> &Graph {
        self.graph
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn grad(&self) -> &GradState {
        &self.grad
    }

    pub fn mask(&self) -> CurvatureMask {
        self.mask
    }

    /// `M_i` (zero for nodes excluded by the mask), built on first use.
    pub fn local(&self, id: NodeId) -> &LocalCurvature {
        &self.locals()[id.0]
    }

    /// Factors `F_i`, computed on first use.
    pub fn factors(&self) -> &[CurvatureFactor] {
        self.factors.get_or_init(|| {
            self.locals()
                .iter()
                .map(|m| factor_curvature(m).expect("local curvature is symmetric by construction"))
                .collect()
        })
    }

    pub fn sample_noise(&self, dist: NoiseDist, rng: &mut impl Rng) -> NoiseDraw {
        NoiseDraw::sample(self.graph, self.mask, dist, rng)
    }

    fn check_noise(&self, noise: &NoiseDraw) -> Result<()> {
        let ok = noise.vectors.len() == self.graph.len()
            && self.graph.node_ids().all(|id| {
                let want = self.mask.keeps(self.graph.spec(id).kind());
                match noise.get(id) {
                    Some(v) => want && v.len() == self.graph.spec(id).in_dim(),
                    None => !want,
                }
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Contract("noise draw does not match the graph and curvature mask".into()))
        }
    }

    pub fn sweep_s(&self, noise: &NoiseDraw) -> Result<SweepResult> {
        self.check_noise(noise)?;
        let factors = self.factors();
        let mut lanes = reverse_sweep(self.graph, &self.tape, 2, |id, xbars| {
            if let Some(v) = noise.get(id) {
                let (re, im) = xbars.split_at_mut(1);
                factors[id.0].transpose_apply_into(v, &mut re[0], &mut im[0]);
            }
        });
        let im = lanes.pop().expect("two lanes");
        let re = lanes.pop().expect("two lanes");
        Ok(SweepResult::S { re, im })
    }

    pub fn sweep_tu(&self, noise: &NoiseDraw) -> Result<SweepResult> {
        self.check_noise(noise)?;
        let mut lanes = reverse_sweep(self.graph, &self.tape, 2, |id, xbars| {
            if let Some(v) = noise.get(id) {
                let (t, u) = xbars.split_at_mut(1);
                // Only kept nodes carry noise, so the structured product
                // equals M_i v without forming M_i.
                let spec = self.graph.spec(id);
                spec.curvature_apply_into(self.tape.x(id), self.grad.ybar(id), v, &mut t[0]);
                u[0].iter_mut().zip(v).for_each(|(a, b)| *a += b);
            }
        });
        let u = lanes.pop().expect("two lanes");
        let t = lanes.pop().expect("two lanes");
        Ok(SweepResult::TU { t, u })
    }

    /// `(H w, w)` for a fresh probe `w`; the mask does not apply.
    pub fn simple_sample(&self, dist: NoiseDist, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
        let mut w = vec![0.0; self.graph.input_dim()];
        dist.fill(rng, &mut w);
        (hvp_unchecked(self.graph, &self.tape, &self.grad, &w), w)
    }

    /// Sweeps every basis vector of the stacked noise space at once.
    pub fn factor_matrix(&self, variant: FactorVariant, cap: usize) -> Result<FactorMatrix> {
        let active = active_nodes(self.graph, self.mask);
        let offsets: Vec<usize> = active
            .iter()
            .scan(0, |off, &id| {
                let o = *off;
                *off += self.graph.spec(id).in_dim();
                Some(o)
            })
            .collect();
        let m: usize = active.iter().map(|&id| self.graph.spec(id).in_dim()).sum();
        if m > cap {
            return Err(Error::TooLarge { size: m, cap });
        }
        let n = self.graph.input_dim();
        let slot_of = |id: NodeId| active.iter().position(|&a| a == id).map(|p| offsets[p]);
        match variant {
            FactorVariant::S => {
                let factors = self.factors();
                // Lanes 0..m hold real parts, m..2m imaginary parts.
                let lanes = reverse_sweep(self.graph, &self.tape, 2 * m, |id, xbars| {
                    let Some(off) = slot_of(id) else { return };
                    let mi = self.graph.spec(id).in_dim();
                    let mut e = vec![0.0; mi];
                    for k in 0..mi {
                        e[k] = 1.0;
                        let (re, im) = xbars.split_at_mut(m);
                        factors[id.0].transpose_apply_into(&e, &mut re[off + k], &mut im[off + k]);
                        e[k] = 0.0;
                    }
                });
                let s = DMatrix::from_fn(n, m, |r, c| Complex64::new(lanes[c][r], lanes[m + c][r]));
                Ok(FactorMatrix::S(s))
            }
            FactorVariant::TU => {
                let locals = self.locals();
                let lanes = reverse_sweep(self.graph, &self.tape, 2 * m, |id, xbars| {
                    let Some(off) = slot_of(id) else { return };
                    let mi = self.graph.spec(id).in_dim();
                    let mut e = vec![0.0; mi];
                    for k in 0..mi {
                        e[k] = 1.0;
                        locals[id.0].apply_into(&e, &mut xbars[off + k]);
                        xbars[m + off + k][k] += 1.0;
                        e[k] = 0.0;
                    }
                });
                let t = DMatrix::from_fn(n, m, |r, c| lanes[c][r]);
                let u = DMatrix::from_fn(n, m, |r, c| lanes[m + c][r]);
                Ok(FactorMatrix::TU { t, u })
            }
        }
    }

    /// One draw's contribution to `target`.
    fn draw_values(&self, config: &EstimatorConfig, index: u64) -> Result<Vec<f64>> {
        let mut rng = draw_rng(config.seed, index);
        let n = self.graph.input_dim();
        let (res, symmetrize) = match config.estimator {
            Estimator::Simple => {
                let (hw, w) = self.simple_sample(config.noise, &mut rng);
                return Ok(match &config.target {
                    Target::Diagonal => hw.iter().zip(&w).map(|(a, b)| a * b).collect(),
                    Target::Full => {
                        let mut out = Vec::with_capacity(n * n);
                        for i in 0..n {
                            out.extend(w.iter().map(|wj| hw[i] * wj));
                        }
                        out
                    }
                    Target::Entries(e) => e.iter().map(|&(i, j)| hw[i] * w[j]).collect(),
                });
            }
            Estimator::S | Estimator::GaussNewtonS => (self.sweep_s(&self.sample_noise(config.noise, &mut rng))?, false),
            Estimator::TU => (self.sweep_tu(&self.sample_noise(config.noise, &mut rng))?, false),
            Estimator::TUSymmetrized => (self.sweep_tu(&self.sample_noise(config.noise, &mut rng))?, true),
        };
        Ok(match &config.target {
            Target::Diagonal => res.diagonal(),
            Target::Full => {
                let mut out = Vec::with_capacity(n * n);
                for i in 0..n {
                    out.extend((0..n).map(|j| res.entry(i, j, symmetrize)));
                }
                out
            }
            Target::Entries(e) => e.iter().map(|&(i, j)| res.entry(i, j, symmetrize)).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FactorVariant {
    S,
    TU,
}

/// The sweep as a linear map of the stacked noise vector, `n × m`.
#[derive(Debug, Clone, PartialEq)]
pub enum FactorMatrix {
    S(DMatrix<Complex64>),
    TU { t: DMatrix<f64>, u: DMatrix<f64> },
}

impl FactorMatrix {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            FactorMatrix::S(s) => s.shape(),
            FactorMatrix::TU { t, .. } => t.shape(),
        }
    }

    /// `Re(S̃ S̃ᵀ)` or `T̃ Ũᵀ`.
    pub fn product(&self) -> DMatrix<f64> {
        match self {
            FactorMatrix::S(s) => (s * s.transpose()).map(|z| z.re),
            FactorMatrix::TU { t, u } => t * u.transpose(),
        }
    }
}

pub fn factor_matrix(graph: &Graph, input: &[f64], variant: FactorVariant, mask: CurvatureMask) -> Result<FactorMatrix> {
    Curvature::new(graph, input, mask)?.factor_matrix(variant, DEFAULT_DENSE_CAP)
}

/// `(H w, w)` for a probe `w` drawn from `dist`.
pub fn simple_sample(graph: &Graph, input: &[f64], dist: NoiseDist, rng: &mut impl Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok(Curvature::new(graph, input, CurvatureMask::Full)?.simple_sample(dist, rng))
}

pub fn sweep_s(graph: &Graph, tape: &Tape, grad: &GradState, noise: &NoiseDraw, mask: CurvatureMask) -> Result<SweepResult> {
    Curvature::from_parts(graph, tape.clone(), grad.clone(), mask).sweep_s(noise)
}

pub fn sweep_tu(graph: &Graph, tape: &Tape, grad: &GradState, noise: &NoiseDraw, mask: CurvatureMask) -> Result<SweepResult> {
    Curvature::from_parts(graph, tape.clone(), grad.clone(), mask).sweep_tu(noise)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Estimator {
    S,
    TU,
    TUSymmetrized,
    Simple,
    GaussNewtonS,
}

impl Estimator {
    pub const ALL: [Estimator; 5] = [
        Estimator::S,
        Estimator::TU,
        Estimator::TUSymmetrized,
        Estimator::Simple,
        Estimator::GaussNewtonS,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::S => "S",
            Estimator::TU => "TU",
            Estimator::TUSymmetrized => "TU-sym",
            Estimator::Simple => "Simple",
            Estimator::GaussNewtonS => "GN-S",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "s" | "cp" => Some(Estimator::S),
            "tu" => Some(Estimator::TU),
            "tu-sym" | "tu-symmetrized" | "tusym" => Some(Estimator::TUSymmetrized),
            "simple" => Some(Estimator::Simple),
            "gn-s" | "gn" | "gauss-newton" | "gaussnewton-s" => Some(Estimator::GaussNewtonS),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Target {
    Diagonal,
    /// Row-major `n × n`.
    Full,
    Entries(Vec<(usize, usize)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    pub estimator: Estimator,
    pub noise: NoiseDist,
    pub samples: usize,
    pub target: Target,
    pub seed: u64,
    /// Applies to S and TU; Gauss-Newton-S always uses
    /// [`CurvatureMask::GaussNewton`] and Simple ignores it.
    pub mask: CurvatureMask,
    pub cap: usize,
}

impl EstimatorConfig {
    pub fn new(estimator: Estimator, noise: NoiseDist) -> Self {
        Self {
            estimator,
            noise,
            samples: 1,
            target: Target::Diagonal,
            seed: 0,
            mask: CurvatureMask::Full,
            cap: DEFAULT_DENSE_CAP,
        }
    }

    pub fn samples(mut self, k: usize) -> Self {
        self.samples = k;
        self
    }

    pub fn target(mut self, target: Target) -> Self {
        self.target = target;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn mask(mut self, mask: CurvatureMask) -> Self {
        self.mask = mask;
        self
    }

    fn effective_mask(&self) -> CurvatureMask {
        match self.estimator {
            Estimator::GaussNewtonS => CurvatureMask::GaussNewton,
            Estimator::Simple => CurvatureMask::Full,
            _ => self.mask,
        }
    }
}

/// Mean of `samples` single-draw estimates and the per-entry unbiased
/// sample variance of those draws.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub target: Target,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub samples: usize,
}

impl Estimate {
    /// The mean as an `n × n` matrix when the target is full.
    pub fn matrix(&self) -> Option<DMatrix<f64>> {
        match self.target {
            Target::Full => {
                let n = (self.mean.len() as f64).sqrt().round() as usize;
                Some(DMatrix::from_row_slice(n, n, &self.mean))
            }
            _ => None,
        }
    }
}

/// Draw `k` uses the random stream `(seed, k)`; draws run in parallel and are
/// reduced in a fixed order.
pub fn estimate(graph: &Graph, input: &[f64], config: &EstimatorConfig) -> Result<Estimate> {
    if config.samples == 0 {
        return Err(Error::Contract("at least one sample is required".into()));
    }
    let n = graph.input_dim();
    let len = match &config.target {
        Target::Diagonal => n,
        Target::Full => {
            if n > config.cap {
                return Err(Error::TooLarge { size: n, cap: config.cap });
            }
            n * n
        }
        Target::Entries(e) => {
            if let Some(&(i, j)) = e.iter().find(|&&(i, j)| i >= n || j >= n) {
                return Err(Error::Contract(format!("entry ({i}, {j}) is out of range for n = {n}")));
            }
            e.len()
        }
    };
    let curv = Curvature::new(graph, input, config.effective_mask())?;
    if matches!(config.estimator, Estimator::S | Estimator::GaussNewtonS) {
        curv.factors();
    }
    let m = parallel_moments(len, config.samples, |k| curv.draw_values(config, k))?;
    let (mean, variance, samples) = m.into_parts();
    Ok(Estimate {
        target: config.target.clone(),
        mean,
        variance,
        samples,
    })
}
