//! Global Sim(3) pose-graph optimization.
//!
//! Nodes are chunk-to-world transforms. An edge `(i, j, M)` states that
//! `node_j = node_i ∘ M`, so `M` maps chunk-`j` coordinates into chunk-`i`
//! coordinates. Node 0 is held fixed.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SMatrix, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::evaluation::TrajectoryEstimate;
use crate::geometry::{backproject_where, normalize_depth, ChunkArtifact, Intrinsics};
use crate::sim3::{Sim3, Sim3Error, Sim3Tangent, Vector7};

type Matrix7 = SMatrix<f64, 7, 7>;

/// Central-difference step for Jacobians.
const FD_STEP: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseGraphError {
    #[error("edge {edge} ({i} -> {j}): rotation angle {angle} too close to pi")]
    AngleAtPi {
        edge: usize,
        i: usize,
        j: usize,
        angle: f64,
    },
    #[error("no sequential edge between chunks {0} and {1}")]
    NotConnected(usize, usize),
    #[error("invalid edge {edge}: {reason}")]
    InvalidEdge { edge: usize, reason: String },
    #[error("invalid solver settings: {0}")]
    InvalidSettings(String),
    #[error("linear solve failed at iteration {0}")]
    SolveFailed(usize),
    #[error("{nodes} nodes for {chunks} chunks")]
    NodeCountMismatch { nodes: usize, chunks: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Sequential,
    Loop,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub kind: EdgeKind,
    pub i: usize,
    pub j: usize,
    pub measurement: Sim3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseGraph {
    pub nodes: Vec<Sim3>,
    pub edges: Vec<Edge>,
}

impl PoseGraph {
    pub fn new(nodes: Vec<Sim3>, edges: Vec<Edge>) -> Result<Self, PoseGraphError> {
        let g = Self { nodes, edges };
        g.validate()?;
        Ok(g)
    }

    /// Chain graph from measurements `M_t` between chunks `t` and `t+1`,
    /// with nodes initialized by forward composition from the identity.
    pub fn from_chain(measurements: &[Sim3]) -> Self {
        let mut nodes = vec![Sim3::identity()];
        let mut edges = Vec::new();
        for (t, m) in measurements.iter().enumerate() {
            nodes.push(nodes[t].compose(m));
            edges.push(Edge {
                kind: EdgeKind::Sequential,
                i: t,
                j: t + 1,
                measurement: *m,
            });
        }
        Self { nodes, edges }
    }

    pub fn add_loop(&mut self, i: usize, j: usize, measurement: Sim3) {
        self.edges.push(Edge {
            kind: EdgeKind::Loop,
            i,
            j,
            measurement,
        });
    }

    pub fn validate(&self) -> Result<(), PoseGraphError> {
        let n = self.nodes.len();
        for (k, e) in self.edges.iter().enumerate() {
            let reason = if e.i >= n || e.j >= n {
                Some(format!("node index out of range for {n} nodes"))
            } else if e.i == e.j {
                Some("self loop".to_string())
            } else if e.kind == EdgeKind::Sequential && e.i.abs_diff(e.j) != 1 {
                Some("sequential edge between non-consecutive chunks".to_string())
            } else {
                None
            };
            if let Some(reason) = reason {
                return Err(PoseGraphError::InvalidEdge { edge: k, reason });
            }
        }
        for t in 0..n.saturating_sub(1) {
            let linked = self.edges.iter().any(|e| {
                e.kind == EdgeKind::Sequential && e.i.min(e.j) == t && e.i.max(e.j) == t + 1
            });
            if !linked {
                return Err(PoseGraphError::NotConnected(t, t + 1));
            }
        }
        Ok(())
    }
}

/// `log(M⁻¹ ∘ S_i⁻¹ ∘ S_j)`.
pub fn edge_residual(measurement: &Sim3, s_i: &Sim3, s_j: &Sim3) -> Result<Sim3Tangent, Sim3Error> {
    measurement
        .inverse()
        .compose(&s_i.inverse().compose(s_j))
        .log()
}

fn residual_of(g_edges: &[Edge], nodes: &[Sim3], k: usize) -> Result<Vector7, PoseGraphError> {
    let e = &g_edges[k];
    edge_residual(&e.measurement, &nodes[e.i], &nodes[e.j])
        .map(|t| t.to_vector())
        .map_err(|err| match err {
            Sim3Error::AngleAtPi { angle } => PoseGraphError::AngleAtPi {
                edge: k,
                i: e.i,
                j: e.j,
                angle,
            },
            other => PoseGraphError::InvalidEdge {
                edge: k,
                reason: other.to_string(),
            },
        })
}

fn cost_of(edges: &[Edge], nodes: &[Sim3]) -> Result<f64, PoseGraphError> {
    let parts = (0..edges.len())
        .into_par_iter()
        .map(|k| residual_of(edges, nodes, k).map(|r| r.norm_squared()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(parts.iter().sum())
}

/// Sum of squared residual norms over all edges, equally weighted.
pub fn total_cost(g: &PoseGraph) -> Result<f64, PoseGraphError> {
    cost_of(&g.edges, &g.nodes)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveSettings {
    pub max_iters: usize,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    pub cost_tolerance: f64,
    pub step_tolerance: f64,
    /// Largest node count solved with a dense factorization.
    pub dense_limit: usize,
}

impl Default for SolveSettings {
    fn default() -> Self {
        Self {
            max_iters: 100,
            initial_damping: 1e-4,
            damping_up: 10.0,
            damping_down: 0.1,
            cost_tolerance: 1e-10,
            step_tolerance: 1e-10,
            dense_limit: 500,
        }
    }
}

impl SolveSettings {
    fn validate(&self) -> Result<(), PoseGraphError> {
        let positive = [
            self.initial_damping,
            self.damping_up,
            self.damping_down,
            self.cost_tolerance,
            self.step_tolerance,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.damping_up <= 1.0 || self.damping_down >= 1.0 {
            return Err(PoseGraphError::InvalidSettings(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Model-predicted versus realized cost decrease for one accepted step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub damping: f64,
    pub predicted_decrease: f64,
    pub actual_decrease: f64,
}

impl StepRecord {
    pub fn gain_ratio(&self) -> f64 {
        self.actual_decrease / self.predicted_decrease
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub iters: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeResult {
    pub nodes: Vec<Sim3>,
    pub report: SolveReport,
}

/// Jacobian blocks of one edge residual with respect to right perturbations
/// of its endpoints.
struct EdgeLinearization {
    residual: Vector7,
    d_i: Option<Matrix7>,
    d_j: Option<Matrix7>,
}

fn perturbed(node: &Sim3, k: usize, h: f64) -> Sim3 {
    let mut v = Vector7::zeros();
    v[k] = h;
    node.compose(&Sim3::exp(&Sim3Tangent::from_vector(&v)))
}

fn linearize(edges: &[Edge], nodes: &[Sim3], k: usize) -> Result<EdgeLinearization, PoseGraphError> {
    let e = &edges[k];
    let residual = residual_of(edges, nodes, k)?;
    let block = |which: usize| -> Result<Matrix7, PoseGraphError> {
        let mut jac = Matrix7::zeros();
        let mut local = [nodes[e.i], nodes[e.j]];
        let base = local[which];
        for c in 0..7 {
            local[which] = perturbed(&base, c, FD_STEP);
            let plus = edge_residual(&e.measurement, &local[0], &local[1]);
            local[which] = perturbed(&base, c, -FD_STEP);
            let minus = edge_residual(&e.measurement, &local[0], &local[1]);
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p.to_vector(), m.to_vector()),
                _ => {
                    return Err(PoseGraphError::AngleAtPi {
                        edge: k,
                        i: e.i,
                        j: e.j,
                        angle: std::f64::consts::PI,
                    })
                }
            };
            jac.set_column(c, &((plus - minus) / (2.0 * FD_STEP)));
        }
        Ok(jac)
    };
    Ok(EdgeLinearization {
        residual,
        d_i: if e.i == 0 { None } else { Some(block(0)?) },
        d_j: if e.j == 0 { None } else { Some(block(1)?) },
    })
}

/// Normal equations `H δ = −g` over free nodes 1..n in 7×7 blocks.
struct NormalEquations {
    n_free: usize,
    blocks: BTreeMap<(usize, usize), Matrix7>,
    gradient: DVector<f64>,
}

impl NormalEquations {
    fn assemble(edges: &[Edge], lin: &[EdgeLinearization], n_nodes: usize) -> Self {
        let n_free = n_nodes - 1;
        let mut blocks: BTreeMap<(usize, usize), Matrix7> = BTreeMap::new();
        let mut gradient = DVector::zeros(7 * n_free);
        for (e, l) in edges.iter().zip(lin) {
            let parts = [(e.i, l.d_i.as_ref()), (e.j, l.d_j.as_ref())];
            for (a, ja) in parts.iter() {
                let Some(ja) = ja else { continue };
                let ia = a - 1;
                let mut g = gradient.rows_mut(7 * ia, 7);
                g += ja.transpose() * l.residual;
                for (b, jb) in parts.iter() {
                    let Some(jb) = jb else { continue };
                    *blocks.entry((ia, b - 1)).or_insert_with(Matrix7::zeros) += ja.transpose() * *jb;
                }
            }
        }
        Self {
            n_free,
            blocks,
            gradient,
        }
    }

    fn quadratic(&self, delta: &DVector<f64>) -> f64 {
        delta.dot(&self.multiply(delta, 0.0))
    }

    fn multiply(&self, x: &DVector<f64>, damping: f64) -> DVector<f64> {
        let mut y = x * damping;
        for ((a, b), m) in &self.blocks {
            let mut out = y.rows_mut(7 * a, 7);
            out += m * x.rows(7 * b, 7);
        }
        y
    }

    fn solve_dense(&self, damping: f64) -> Option<DVector<f64>> {
        let dim = 7 * self.n_free;
        let mut h = DMatrix::<f64>::identity(dim, dim) * damping;
        for ((a, b), m) in &self.blocks {
            let mut view = h.view_mut((7 * a, 7 * b), (7, 7));
            view += m;
        }
        let chol = h.cholesky()?;
        Some(chol.solve(&(-&self.gradient)))
    }

    /// Preconditioned conjugate gradients with block-Jacobi preconditioning.
    fn solve_sparse(&self, damping: f64) -> Option<DVector<f64>> {
        let dim = 7 * self.n_free;
        let mut precond = Vec::with_capacity(self.n_free);
        for a in 0..self.n_free {
            let diag = self.blocks.get(&(a, a)).copied().unwrap_or_else(Matrix7::zeros)
                + Matrix7::identity() * damping;
            precond.push(diag.try_inverse()?);
        }
        let apply_precond = |r: &DVector<f64>| {
            let mut z = DVector::zeros(dim);
            for (a, p) in precond.iter().enumerate() {
                z.rows_mut(7 * a, 7).copy_from(&(p * r.rows(7 * a, 7)));
            }
            z
        };
        let b = -&self.gradient;
        let b_norm = b.norm();
        let mut x = DVector::zeros(dim);
        if b_norm == 0.0 {
            return Some(x);
        }
        let mut r = b.clone();
        let mut z = apply_precond(&r);
        let mut p = z.clone();
        let mut rz = r.dot(&z);
        for _ in 0..10 * dim.max(10) {
            let ap = self.multiply(&p, damping);
            let denom = p.dot(&ap);
            if denom <= 0.0 || !denom.is_finite() {
                return None;
            }
            let alpha = rz / denom;
            x += alpha * &p;
            r -= alpha * &ap;
            if r.norm() <= 1e-14 * b_norm {
                break;
            }
            z = apply_precond(&r);
            let rz_next = r.dot(&z);
            p = &z + (rz_next / rz) * &p;
            rz = rz_next;
        }
        Some(x)
    }
}

fn retract(nodes: &[Sim3], delta: &DVector<f64>) -> Vec<Sim3> {
    let mut out = nodes.to_vec();
    for (a, node) in out.iter_mut().enumerate().skip(1) {
        let d = Vector7::from_iterator(delta.rows(7 * (a - 1), 7).iter().copied());
        *node = node.compose(&Sim3::exp(&Sim3Tangent::from_vector(&d)));
    }
    out
}

/// Levenberg–Marquardt over the free nodes with right-perturbation updates.
pub fn optimize(g: &PoseGraph, settings: &SolveSettings) -> Result<OptimizeResult, PoseGraphError> {
    g.validate()?;
    settings.validate()?;
    let initial_cost = total_cost(g)?;
    let mut nodes = g.nodes.clone();
    let mut cost = initial_cost;
    let mut report = SolveReport {
        iters: 0,
        initial_cost,
        final_cost: initial_cost,
        converged: false,
        steps: Vec::new(),
    };
    if nodes.len() < 2 || cost == 0.0 {
        report.converged = true;
        return Ok(OptimizeResult { nodes, report });
    }
    let mut damping = settings.initial_damping;
    'outer: while report.iters < settings.max_iters {
        report.iters += 1;
        let lin = (0..g.edges.len())
            .into_par_iter()
            .map(|k| linearize(&g.edges, &nodes, k))
            .collect::<Result<Vec<_>, _>>()?;
        let normal = NormalEquations::assemble(&g.edges, &lin, nodes.len());
        loop {
            let delta = if nodes.len() <= settings.dense_limit {
                normal.solve_dense(damping)
            } else {
                normal.solve_sparse(damping)
            };
            let Some(delta) = delta else {
                damping *= settings.damping_up;
                if damping > 1e20 {
                    return Err(PoseGraphError::SolveFailed(report.iters));
                }
                continue;
            };
            if delta.norm() < settings.step_tolerance {
                report.converged = true;
                break 'outer;
            }
            let predicted = -(2.0 * normal.gradient.dot(&delta) + normal.quadratic(&delta));
            let candidate = retract(&nodes, &delta);
            // A step that pushes an edge to the half-turn is treated like a
            // cost increase.
            let new_cost = cost_of(&g.edges, &candidate).unwrap_or(f64::INFINITY);
            if new_cost < cost {
                report.steps.push(StepRecord {
                    damping,
                    predicted_decrease: predicted,
                    actual_decrease: cost - new_cost,
                });
                let relative = (cost - new_cost) / cost;
                nodes = candidate;
                cost = new_cost;
                damping = (damping * settings.damping_down).max(1e-15);
                if relative < settings.cost_tolerance || cost == 0.0 {
                    report.converged = true;
                    break 'outer;
                }
                break;
            }
            damping *= settings.damping_up;
            if damping > 1e20 {
                // No descent direction left at machine precision.
                report.converged = true;
                break 'outer;
            }
        }
    }
    report.final_cost = cost;
    Ok(OptimizeResult { nodes, report })
}

/// Options for mapping chunk content into the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagateOptions {
    /// Pixels with normalized depth above this are not exported.
    pub depth_ceiling: Option<f64>,
    /// Keep every `pixel_stride`-th pixel along each image axis.
    pub pixel_stride: usize,
}

impl Default for PropagateOptions {
    fn default() -> Self {
        Self {
            depth_ceiling: None,
            pixel_stride: 1,
        }
    }
}

/// World poses of every frame and the merged world point cloud. A frame seen
/// by several chunks is taken from the earliest one.
pub fn propagate_to_frames(
    nodes: &[Sim3],
    chunks: &[ChunkArtifact],
    reference: &Intrinsics,
    options: &PropagateOptions,
) -> Result<(TrajectoryEstimate, Vec<Vector3<f64>>), PoseGraphError> {
    if nodes.len() != chunks.len() {
        return Err(PoseGraphError::NodeCountMismatch {
            nodes: nodes.len(),
            chunks: chunks.len(),
        });
    }
    let mut owner: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (c, chunk) in chunks.iter().enumerate() {
        for (k, f) in chunk.frame_ids.iter().enumerate() {
            owner.entry(*f).or_insert((c, k));
        }
    }
    let entries: Vec<(usize, (usize, usize))> = owner.into_iter().collect();
    let stride = options.pixel_stride.max(1);
    let per_frame: Vec<(Sim3, Vec<Vector3<f64>>)> = entries
        .par_iter()
        .map(|(_, (c, k))| {
            let chunk = &chunks[*c];
            let world = nodes[*c].compose(&chunk.poses[*k]);
            let depth = normalize_depth(&chunk.depths[*k], &chunk.intrinsics[*k], reference);
            let intr = chunk.intrinsics[*k].with_focal_of(reference);
            let w = depth.width();
            let points = backproject_where(&depth, &intr, &world, |idx| {
                let (u, v) = (idx % w, idx / w);
                u % stride == 0
                    && v % stride == 0
                    && options.depth_ceiling.is_none_or(|c| depth.depth()[idx] <= c)
            });
            (world, points)
        })
        .collect();
    let ids = entries.iter().map(|(f, _)| *f).collect();
    let poses: Vec<Sim3> = per_frame.iter().map(|(p, _)| *p).collect();
    let trajectory = TrajectoryEstimate::from_poses(ids, &poses)
        .map_err(|e| PoseGraphError::InvalidSettings(e.to_string()))?;
    let cloud = per_frame.into_iter().flat_map(|(_, p)| p).collect();
    Ok((trajectory, cloud))
}
