//! Levenberg-Marquardt over the pose-velocity graph.
//!
//! Each iteration solves `(JᵀJ + λ·diag(JᵀJ)) δ = −Jᵀr`, retracts poses with
//! the right-multiplied SE(3) exponential and adds velocity increments.
//! Small systems use a dense Cholesky; larger ones are reordered with reverse
//! Cuthill-McKee and factored in envelope (skyline) form.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{assemble_jacobian_with, GraphNodes, PoseVelocityGraph, SparseJacobian, VariableLayout, weighted_residual_with};
use crate::par::{self, Execution};

/// Systems with more variables than this use the sparse path.
pub const DENSE_LIMIT: usize = 300;
/// Lower bound on Marquardt scaling entries, so variables that no residual
/// touches still receive damping.
pub const DIAGONAL_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Relative objective change below which the solve stops.
    pub residual_tolerance: f64,
    pub step_tolerance: f64,
    /// Required `‖Jᵀr‖∞` before a stop is reported as converged.
    pub gradient_tolerance: f64,
    pub initial_damping: f64,
    pub damping_bounds: [f64; 2],
    /// `[shrink below, expand above]` on the gain ratio.
    pub gain_thresholds: [f64; 2],
    pub damping_decrease: f64,
    pub damping_increase: f64,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iterations: 50,
            residual_tolerance: 1e-10,
            step_tolerance: 1e-10,
            gradient_tolerance: 1e-6,
            initial_damping: 1e-4,
            damping_bounds: [1e-12, 1e10],
            gain_thresholds: [0.25, 0.75],
            damping_decrease: 0.5,
            damping_increase: 4.0,
            execution: Execution::default(),
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.damping_bounds;
        let [shrink, expand] = self.gain_thresholds;
        let ok = self.residual_tolerance > 0.0
            && self.step_tolerance > 0.0
            && self.gradient_tolerance > 0.0
            && lo > 0.0
            && lo < hi
            && (lo..=hi).contains(&self.initial_damping)
            && 0.0 <= shrink
            && shrink < expand
            && self.damping_decrease > 0.0
            && self.damping_decrease < 1.0
            && self.damping_increase > 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid solver options: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// The starting point already met the gradient tolerance.
    Stationary,
    ObjectiveChange,
    StepNorm,
    ZeroResidual,
    /// The predicted decrease fell below the resolution of the objective.
    Precision,
    MaxIterations,
    DampingSaturated,
}

/// One LM iteration as it happened.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub damping: f64,
    pub accepted: bool,
    pub objective: f64,
    pub gain_ratio: f64,
    pub step_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations_used: usize,
    pub accepted_steps: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub converged: bool,
    pub termination: Termination,
    pub gradient_norm: f64,
    /// Objective after every accepted step, starting with the initial value.
    pub objective_trace: Vec<f64>,
    pub iterations: Vec<IterationRecord>,
}

impl SolveReport {
    /// Damping values of the accepted steps, in order.
    pub fn accepted_damping(&self) -> Vec<f64> {
        self.iterations.iter().filter(|r| r.accepted).map(|r| r.damping).collect()
    }
}

/// `JᵀJ` stored as lower-triangular node blocks, keyed `(row node, col node)`
/// with `row >= col`, plus `Jᵀr`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalEquations {
    pub layout: VariableLayout,
    pub blocks: BTreeMap<(usize, usize), DMatrix<f64>>,
    pub gradient: DVector<f64>,
}

impl NormalEquations {
    pub fn from_jacobian(mode: Execution, jac: &SparseJacobian, layout: &VariableLayout) -> Self {
        let local = par::map(mode, &jac.blocks, |b| {
            let mut out = Vec::with_capacity(b.blocks.len() * (b.blocks.len() + 1) / 2);
            for x in &b.blocks {
                for y in &b.blocks {
                    if x.node >= y.node {
                        out.push(((x.node, x.column), (y.node, y.column), x.matrix.tr_mul(&y.matrix)));
                    }
                }
            }
            out
        });
        let mut blocks: BTreeMap<(usize, usize), DMatrix<f64>> = BTreeMap::new();
        for ((rn, rcol), (cn, ccol), m) in local.into_iter().flatten() {
            let entry = blocks
                .entry((rn, cn))
                .or_insert_with(|| DMatrix::zeros(layout.node_width(rn), layout.node_width(cn)));
            let ro = rcol - layout.node_offset[rn];
            let co = ccol - layout.node_offset[cn];
            let mut view = entry.view_mut((ro, co), m.shape());
            view += &m;
        }
        NormalEquations {
            layout: layout.clone(),
            blocks,
            gradient: jac.gradient(),
        }
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.dim(), self.dim());
        for (&(r, c), m) in &self.blocks {
            let (ro, co) = (self.layout.node_offset[r], self.layout.node_offset[c]);
            h.view_mut((ro, co), m.shape()).copy_from(m);
            if r != c {
                h.view_mut((co, ro), (m.ncols(), m.nrows())).copy_from(&m.transpose());
            }
        }
        // diagonal blocks may only hold the accumulated lower part once
        for k in 0..self.layout.node_count() {
            let o = self.layout.node_offset[k];
            let w = self.layout.node_width(k);
            for a in 0..w {
                for b in 0..a {
                    h[(o + b, o + a)] = h[(o + a, o + b)];
                }
            }
        }
        h
    }
}

fn damped_diagonal(d: f64, lambda: f64) -> f64 {
    d + lambda * d.max(DIAGONAL_FLOOR)
}

/// Solves `(JᵀJ + λ·diag(JᵀJ)) δ = −Jᵀr` with a dense Cholesky factorization.
pub fn solve_normal_equations(jtj: &DMatrix<f64>, jtr: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    if jtj.nrows() != jtj.ncols() || jtj.nrows() != jtr.len() || !(lambda >= 0.0) {
        return Err(Error::InvalidArgument("normal equations shape or damping invalid".into()));
    }
    let mut a = jtj.clone();
    for i in 0..a.nrows() {
        a[(i, i)] = damped_diagonal(jtj[(i, i)], lambda);
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::IndefiniteSystem(format!("dense Cholesky failed at damping {lambda:e}")))?;
    Ok(-chol.solve(jtr))
}

/// Dispatches between the dense and the sparse path by system size.
pub fn solve_system(ne: &NormalEquations, lambda: f64) -> Result<DVector<f64>> {
    if ne.dim() <= DENSE_LIMIT {
        solve_normal_equations(&ne.to_dense(), &ne.gradient, lambda)
    } else {
        solve_sparse(ne, lambda)
    }
}

/// Reverse Cuthill-McKee ordering of the node adjacency graph. Returns the
/// node visited at each new position.
pub fn reverse_cuthill_mckee(node_count: usize, edges: impl Iterator<Item = (usize, usize)>) -> Vec<usize> {
    let mut adj = vec![Vec::new(); node_count];
    for (a, b) in edges {
        if a != b {
            adj[a].push(b);
            adj[b].push(a);
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; node_count];
    let mut order = Vec::with_capacity(node_count);
    while order.len() < node_count {
        let start = (0..node_count)
            .filter(|&k| !visited[k])
            .min_by_key(|&k| (degree[k], k))
            .expect("unvisited node");
        visited[start] = true;
        let mut head = order.len();
        order.push(start);
        while head < order.len() {
            let k = order[head];
            head += 1;
            let mut next: Vec<usize> = adj[k].iter().copied().filter(|&m| !visited[m]).collect();
            next.sort_by_key(|&m| (degree[m], m));
            for m in next {
                visited[m] = true;
                order.push(m);
            }
        }
    }
    order.reverse();
    order
}

/// Envelope Cholesky on the RCM-reordered system.
pub fn solve_sparse(ne: &NormalEquations, lambda: f64) -> Result<DVector<f64>> {
    let layout = &ne.layout;
    let nodes = layout.node_count();
    let order = reverse_cuthill_mckee(nodes, ne.blocks.keys().copied());
    let mut position = vec![0; nodes];
    let mut offset = vec![0; nodes];
    let mut acc = 0;
    for (p, &k) in order.iter().enumerate() {
        position[k] = p;
        offset[k] = acc;
        acc += layout.node_width(k);
    }
    let n = acc;

    // first column of each node row in the new order
    let mut first_node_col: Vec<usize> = (0..nodes).map(|k| offset[k]).collect();
    for &(r, c) in ne.blocks.keys() {
        let (hi, lo) = if position[r] >= position[c] { (r, c) } else { (c, r) };
        first_node_col[hi] = first_node_col[hi].min(offset[lo]);
    }
    let mut first = vec![0; n];
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); n];
    for k in 0..nodes {
        for a in 0..layout.node_width(k) {
            let i = offset[k] + a;
            first[i] = first_node_col[k];
            rows[i] = vec![0.0; i - first[i] + 1];
        }
    }
    let set = |i: usize, j: usize, v: f64, rows: &mut [Vec<f64>]| {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        rows[i][j - first[i]] = v;
    };
    for (&(r, c), m) in &ne.blocks {
        for a in 0..m.nrows() {
            for b in 0..m.ncols() {
                if r == c && b > a {
                    continue;
                }
                set(offset[r] + a, offset[c] + b, m[(a, b)], &mut rows);
            }
        }
    }
    for (i, row) in rows.iter_mut().enumerate() {
        let d = row.last_mut().expect("diagonal");
        *d = damped_diagonal(*d, lambda);
        if !d.is_finite() {
            return Err(Error::IndefiniteSystem(format!("non-finite diagonal at row {i}")));
        }
    }

    for i in 0..n {
        let fi = first[i];
        for j in fi..i {
            let fj = first[j];
            let start = fi.max(fj);
            let mut s = rows[i][j - fi];
            for k in start..j {
                s -= rows[i][k - fi] * rows[j][k - fj];
            }
            rows[i][j - fi] = s / rows[j][j - fj];
        }
        let mut d = rows[i][i - fi];
        for k in fi..i {
            d -= rows[i][k - fi] * rows[i][k - fi];
        }
        if !(d > 0.0) {
            return Err(Error::IndefiniteSystem(format!(
                "sparse Cholesky pivot {d:e} at row {i}, damping {lambda:e}"
            )));
        }
        rows[i][i - fi] = d.sqrt();
    }

    // permute the right-hand side, then forward and back substitution
    let mut y = vec![0.0; n];
    for k in 0..nodes {
        let o = layout.node_offset[k];
        for a in 0..layout.node_width(k) {
            y[offset[k] + a] = -ne.gradient[o + a];
        }
    }
    for i in 0..n {
        let fi = first[i];
        let mut s = y[i];
        for k in fi..i {
            s -= rows[i][k - fi] * y[k];
        }
        y[i] = s / rows[i][i - fi];
    }
    for i in (0..n).rev() {
        y[i] /= rows[i][i - first[i]];
        let yi = y[i];
        for k in first[i]..i {
            y[k] -= rows[i][k - first[i]] * yi;
        }
    }
    let mut out = DVector::zeros(n);
    for k in 0..nodes {
        let o = layout.node_offset[k];
        for a in 0..layout.node_width(k) {
            out[o + a] = y[offset[k] + a];
        }
    }
    Ok(out)
}

/// Linearization of a graph at its current nodes.
pub struct Linearization {
    pub jacobian: SparseJacobian,
    pub normal: NormalEquations,
    pub objective: f64,
}

pub fn linearize(graph: &PoseVelocityGraph, mode: Execution) -> Result<Linearization> {
    let jacobian = assemble_jacobian_with(mode, graph)?;
    let normal = NormalEquations::from_jacobian(mode, &jacobian, &graph.layout());
    let objective = jacobian.objective();
    Ok(Linearization {
        jacobian,
        normal,
        objective,
    })
}

/// Predicted decrease of the objective under the linear model.
fn predicted_decrease(lin: &Linearization, step: &DVector<f64>) -> f64 {
    let js = lin.jacobian.apply(step);
    -2.0 * lin.normal.gradient.dot(step) - js.norm_squared()
}

/// One damped Gauss-Newton step with a given damping, always applied.
pub fn damped_step(graph: &PoseVelocityGraph, lambda: f64, mode: Execution) -> Result<GraphNodes> {
    let lin = linearize(graph, mode)?;
    let step = solve_system(&lin.normal, lambda)?;
    graph.layout().retract(&graph.nodes, &step)
}

/// Multiple of `eps * objective` below which a decrease cannot be verified.
const RESOLUTION: f64 = 100.0;

/// `|a|^2 - |b|^2` summed as `(a - b)(a + b)` to avoid cancellation near a minimum.
fn decrease(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    if a.len() != b.len() {
        return a.norm_squared() - b.norm_squared();
    }
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x + y)).sum()
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

pub fn lm_optimize(graph: &PoseVelocityGraph, options: &SolverOptions) -> Result<(GraphNodes, SolveReport)> {
    graph.validate()?;
    options.validate()?;
    if graph.fixed_poses.is_empty() {
        return Err(Error::InvalidArgument("at least one pose must be fixed".into()));
    }
    let mode = options.execution;
    let [lo, hi] = options.damping_bounds;
    let [shrink, expand] = options.gain_thresholds;
    let layout = graph.layout();

    let mut current = graph.clone();
    let mut lin = linearize(&current, mode)?;
    let initial_objective = lin.objective;
    let mut lambda = options.initial_damping;
    let mut trace = vec![initial_objective];
    let mut records = Vec::new();
    let mut termination = Termination::MaxIterations;
    let mut tolerance_met = false;
    let budget = if inf_norm(&lin.normal.gradient) < options.gradient_tolerance && lin.objective > f64::MIN_POSITIVE {
        termination = Termination::Stationary;
        tolerance_met = true;
        0
    } else {
        options.max_iterations
    };

    for _ in 0..budget {
        if lin.objective <= f64::MIN_POSITIVE {
            termination = Termination::ZeroResidual;
            tolerance_met = true;
            break;
        }
        let step = match solve_system(&lin.normal, lambda) {
            Ok(s) => s,
            Err(e) if lambda >= hi => return Err(e),
            Err(_) => {
                lambda = (lambda * options.damping_increase).min(hi);
                continue;
            }
        };
        let step_norm = step.norm();
        let predicted = predicted_decrease(&lin, &step);
        let candidate_nodes = layout.retract(&current.nodes, &step)?;
        let mut candidate = current.clone();
        candidate.nodes = candidate_nodes;
        let candidate_residual = weighted_residual_with(mode, &candidate);
        let candidate_objective = candidate_residual.norm_squared();
        let actual = decrease(&lin.jacobian.residual(), &candidate_residual);
        let rho = if predicted > 0.0 { actual / predicted } else { -1.0 };
        let accepted = rho > 0.0 && actual > 0.0 && candidate_objective.is_finite();
        records.push(IterationRecord {
            damping: lambda,
            accepted,
            objective: if accepted { candidate_objective } else { lin.objective },
            gain_ratio: rho,
            step_norm,
        });

        if accepted {
            let previous = lin.objective;
            current = candidate;
            lin = linearize(&current, mode)?;
            trace.push(lin.objective);
            if rho > expand {
                lambda = (lambda * options.damping_decrease).max(lo);
            } else if rho < shrink {
                lambda = (lambda * options.damping_increase).min(hi);
            }
            let small_change = actual <= options.residual_tolerance * previous;
            let small_step = step_norm <= options.step_tolerance;
            if (small_change || small_step) && inf_norm(&lin.normal.gradient) < options.gradient_tolerance {
                termination = if small_change {
                    Termination::ObjectiveChange
                } else {
                    Termination::StepNorm
                };
                tolerance_met = true;
                break;
            }
        } else {
            if step_norm <= options.step_tolerance && inf_norm(&lin.normal.gradient) < options.gradient_tolerance {
                termination = Termination::StepNorm;
                tolerance_met = true;
                break;
            }
            if predicted <= RESOLUTION * f64::EPSILON * lin.objective {
                termination = Termination::Precision;
                tolerance_met = true;
                break;
            }
            if lambda >= hi {
                termination = Termination::DampingSaturated;
                break;
            }
            lambda = (lambda * options.damping_increase).min(hi);
        }
    }

    let gradient_norm = inf_norm(&lin.normal.gradient);
    let report = SolveReport {
        iterations_used: records.len(),
        accepted_steps: trace.len() - 1,
        initial_objective,
        final_objective: lin.objective,
        converged: tolerance_met
            && (gradient_norm < options.gradient_tolerance || termination == Termination::Precision),
        termination,
        gradient_norm,
        objective_trace: trace,
        iterations: records,
    };
    Ok((current.nodes, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::{consistent_graph, random_graph};
    use crate::graph::{ConstraintWeights, EdgeSet, ImuEdge};
    use crate::imu::ImuPreintegration;
    use crate::manifold::{so3_exp, Pose};
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn perturb(nodes: &GraphNodes, seed: u64, st: f64, sr: f64, sv: f64, skip_first: bool) -> GraphNodes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n01 = Normal::new(0.0, 1.0).unwrap();
        let mut g = |s: f64| Vector3::from_fn(|_, _| n01.sample(&mut rng) * s);
        let mut out = nodes.clone();
        for k in 0..out.len() {
            let (dt, dr, dv) = (g(st), g(sr), g(sv));
            if !(skip_first && k == 0) {
                out.poses[k] = Pose::new(
                    out.poses[k].rotation.compose(&so3_exp(&dr).unwrap()),
                    out.poses[k].translation + dt,
                );
            }
            out.velocities[k] += dv;
        }
        out
    }

    #[test]
    fn fixed_point_is_left_alone() {
        let g = consistent_graph(1, 5);
        let (nodes, report) = lm_optimize(&g, &SolverOptions::default()).unwrap();
        assert_eq!(report.accepted_steps, 0);
        assert!(report.converged);
        for (a, b) in nodes.poses.iter().zip(&g.nodes.poses) {
            assert!(a.between(b).log().norm() < 1e-12);
        }
    }

    #[test]
    fn fixed_velocity_is_held() {
        let truth = consistent_graph(4, 6);
        let mut g = truth.clone();
        g.nodes = perturb(&truth.nodes, 9, 0.05, 0.02, 0.1, true);
        g.nodes.velocities[0] = truth.nodes.velocities[0];
        g.fixed_velocities = vec![0];
        let layout = g.layout();
        assert_eq!(layout.dim, 9 * 6 - 6 - 3);
        assert_eq!(layout.velocity_column(0), None);
        assert_eq!(layout.velocity_column(1), Some(6));
        let (nodes, report) = lm_optimize(&g, &SolverOptions::default()).unwrap();
        assert!(report.converged);
        assert_eq!(nodes.velocities[0], truth.nodes.velocities[0]);
        assert!(report.final_objective < 1e-12);
        for (a, b) in nodes.velocities.iter().zip(&truth.nodes.velocities) {
            assert!((a - b).norm() < 1e-5);
        }
    }

    fn straight_line(n: usize) -> PoseVelocityGraph {
        let v = Vector3::new(0.0, 0.0, 1.5);
        let dt = 0.1;
        let times: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
        let poses = times.iter().map(|&t| Pose::from_translation(v * t)).collect();
        let nodes = GraphNodes::new(poses, vec![v; n], times).unwrap();
        let mut edges = EdgeSet::default();
        for k in 0..n - 1 {
            edges.vo_edges.push(crate::graph::VoEdge {
                i: k,
                j: k + 1,
                measurement: nodes.poses[k].between(&nodes.poses[k + 1]),
            });
            edges.imu_edges.push(ImuEdge {
                k,
                preintegration: ImuPreintegration {
                    duration: dt,
                    ..ImuPreintegration::identity()
                },
            });
        }
        PoseVelocityGraph::new(nodes, edges, ConstraintWeights::default()).unwrap()
    }

    #[test]
    fn recovers_perturbed_straight_line() {
        let truth = straight_line(5);
        let mut g = truth.clone();
        g.nodes = perturb(&truth.nodes, 7, 0.1, 0.05, 0.1, true);
        assert!(g.objective() > 1e-3);
        let (nodes, report) = lm_optimize(&g, &SolverOptions::default()).unwrap();
        assert!(report.final_objective < 1e-12, "{report:?}");
        assert!(report.converged);
        for k in 0..5 {
            assert!(nodes.poses[k].between(&truth.nodes.poses[k]).log().norm() < 1e-5);
            assert!((nodes.velocities[k] - truth.nodes.velocities[k]).norm() < 1e-5);
        }
    }

    #[test]
    fn objective_trace_decreases_strictly() {
        for seed in 0..5 {
            let g = random_graph(50 + seed, 7);
            let (_, report) = lm_optimize(&g, &SolverOptions::default()).unwrap();
            assert!(report.objective_trace.windows(2).all(|w| w[1] < w[0]));
            if report.converged {
                assert!(report.gradient_norm < 1e-6);
            }
        }
    }

    #[test]
    fn velocities_only_linear_instance() {
        let mut g = random_graph(21, 6);
        for p in &mut g.nodes.poses {
            p.rotation = crate::manifold::Rotation::identity();
        }
        g.weights = ConstraintWeights::new(0.0, 1.0, 0.0, 1.0);
        g.fixed_poses = (0..6).collect();
        let lin = linearize(&g, Execution::Sequential).unwrap();
        let h = lin.normal.to_dense();
        let oracle = -h.clone().lu().solve(&lin.normal.gradient).unwrap();
        let expected = g.layout().retract(&g.nodes, &oracle).unwrap();
        let mut minimum = g.clone();
        minimum.nodes = expected.clone();
        let two = SolverOptions {
            max_iterations: 2,
            ..SolverOptions::default()
        };
        let (_, early) = lm_optimize(&g, &two).unwrap();
        assert_eq!(early.accepted_steps, 2);
        assert!((early.final_objective - minimum.objective()).abs() < 1e-9 * minimum.objective());
        let (nodes, _) = lm_optimize(&g, &SolverOptions::default()).unwrap();
        for (a, b) in nodes.velocities.iter().zip(&expected.velocities) {
            assert!((a - b).norm() < 1e-8);
        }
    }

    #[test]
    fn identity_system() {
        let b = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        let d = solve_normal_equations(&DMatrix::identity(3, 3), &b, 0.0).unwrap();
        assert_eq!(d, -b);
    }

    #[test]
    fn random_spd_matches_lu() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n01 = Normal::new(0.0, 1.0).unwrap();
        let a = DMatrix::from_fn(40, 30, |_, _| n01.sample(&mut rng));
        let h = a.tr_mul(&a);
        let g = DVector::from_fn(30, |_, _| n01.sample(&mut rng));
        let x = solve_normal_equations(&h, &g, 0.0).unwrap();
        let oracle = -h.clone().lu().solve(&g).unwrap();
        assert!((&x - &oracle).norm() <= 1e-10 * oracle.norm());
    }

    #[test]
    fn damping_shrinks_step_monotonically() {
        let g = random_graph(4, 6);
        let lin = linearize(&g, Execution::Sequential).unwrap();
        let h = lin.normal.to_dense();
        let norms: Vec<f64> = [1.0, 1e2, 1e4]
            .iter()
            .map(|&l| solve_normal_equations(&h, &lin.normal.gradient, l).unwrap().norm())
            .collect();
        assert!(norms[0] > norms[1] && norms[1] > norms[2]);
    }

    #[test]
    fn indefinite_system_is_reported() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let e = solve_normal_equations(&h, &DVector::zeros(2), 0.0).unwrap_err();
        assert_eq!(e.code(), "indefinite_system");
    }

    #[test]
    fn sparse_path_matches_dense() {
        for seed in 0..4 {
            let g = random_graph(70 + seed, 40);
            let lin = linearize(&g, Execution::Sequential).unwrap();
            assert!(lin.normal.dim() > DENSE_LIMIT);
            for lambda in [0.0, 1e-3, 1.0] {
                let dense = solve_normal_equations(&lin.normal.to_dense(), &lin.normal.gradient, lambda).unwrap();
                let sparse = solve_sparse(&lin.normal, lambda).unwrap();
                assert!((&dense - &sparse).norm() <= 1e-9 * dense.norm().max(1.0));
            }
        }
    }

    #[test]
    fn normal_equations_match_dense_product() {
        let g = random_graph(5, 6);
        let lin = linearize(&g, Execution::Parallel).unwrap();
        let j = lin.jacobian.to_dense();
        let h = j.tr_mul(&j);
        assert!((lin.normal.to_dense() - &h).norm() < 1e-10 * h.norm());
        let r = lin.jacobian.residual();
        assert!((j.tr_mul(&r) - &lin.normal.gradient).norm() < 1e-10);
    }

    #[test]
    fn rcm_is_a_permutation_and_narrows_a_ring() {
        let n = 30;
        let edges = (0..n).map(|k| (k, (k + 1) % n));
        let order = reverse_cuthill_mckee(n, edges);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        let mut pos = vec![0; n];
        for (p, &k) in order.iter().enumerate() {
            pos[k] = p;
        }
        let band = (0..n).map(|k| pos[k].abs_diff(pos[(k + 1) % n])).max().unwrap();
        assert!(band <= 2);
    }

    #[test]
    fn doubling_weights_keeps_the_argmin() {
        let g = random_graph(31, 6);
        let mut g2 = g.clone();
        g2.weights = g.weights.scaled(2.0);
        let (a, _) = lm_optimize(&g, &SolverOptions::default()).unwrap();
        let (b, _) = lm_optimize(&g2, &SolverOptions::default()).unwrap();
        for k in 0..6 {
            assert!(a.poses[k].between(&b.poses[k]).log().norm() < 1e-8);
            assert!((a.velocities[k] - b.velocities[k]).norm() < 1e-8);
        }
    }

    #[test]
    fn rigid_transform_of_the_guess_does_not_matter() {
        let truth = straight_line(6);
        let mut g = truth.clone();
        g.nodes = perturb(&truth.nodes, 9, 0.05, 0.02, 0.05, true);
        let t = Pose::new(so3_exp(&Vector3::new(0.3, -0.2, 0.5)).unwrap(), Vector3::new(2.0, 1.0, -1.0));
        let mut moved = g.clone();
        for (p, v) in moved.nodes.poses.iter_mut().zip(moved.nodes.velocities.iter_mut()) {
            *p = t.compose(p);
            *v = t.rotation.rotate(v);
        }
        let (a, _) = lm_optimize(&g, &SolverOptions::default()).unwrap();
        let (b, _) = lm_optimize(&moved, &SolverOptions::default()).unwrap();
        for k in 0..6 {
            let back = t.inverse().compose(&b.poses[k]);
            assert!(a.poses[k].between(&back).log().norm() < 1e-6);
        }
    }

    #[test]
    fn deterministic_and_mode_independent() {
        let g = random_graph(40, 10);
        let seq = SolverOptions {
            execution: Execution::Sequential,
            ..SolverOptions::default()
        };
        let (a, ra) = lm_optimize(&g, &SolverOptions::default()).unwrap();
        let (b, rb) = lm_optimize(&g, &seq).unwrap();
        let (c, rc) = lm_optimize(&g, &SolverOptions::default()).unwrap();
        assert_eq!(ra, rc);
        assert_eq!(a, c);
        assert_eq!(ra, rb);
        assert_eq!(a, b);
    }

    #[test]
    fn report_serializes() {
        let g = random_graph(41, 4);
        let (_, r) = lm_optimize(&g, &SolverOptions::default()).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        let back: SolveReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn bad_options_rejected() {
        let o = SolverOptions {
            damping_bounds: [1.0, 0.1],
            ..SolverOptions::default()
        };
        assert!(o.validate().is_err());
    }
}
