//! Pose-velocity graph: nodes, the four constraint families, the weighted
//! objective and its block-sparse linearization.
//!
//! Residual families, for an IMU edge `k -> k+1` and a VO edge `i -> j`:
//!
//! ```text
//! imu rotation          Log(dR^-1 R_k^-1 R_k+1)
//! vo                    Log(Z^-1 P_i^-1 P_j)
//! translation-velocity  (t_k+1 - t_k) - (v_k dt + R_k dp)
//! delta velocity        R_k dv - (v_k+1 - v_k)
//! ```
//!
//! Preintegrated deltas are expressed in the frame of node `k`, so they are
//! rotated into the world frame by the node rotation `R_k`.
//! The objective is `sum_f w_f sum_e |r_e|^2`.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imu::ImuPreintegration;
use crate::manifold::{se3_right_jacobian_inv, skew, so3_right_jacobian_inv, Pose, Tangent3, Tangent6};
use crate::par::{self, Execution};

pub type Vector9 = SMatrix<f64, 9, 1>;

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNodes {
    pub poses: Vec<Pose>,
    /// World-frame velocities.
    pub velocities: Vec<Vector3<f64>>,
    pub frame_times: Vec<f64>,
}

impl GraphNodes {
    pub fn new(poses: Vec<Pose>, velocities: Vec<Vector3<f64>>, frame_times: Vec<f64>) -> Result<Self> {
        let nodes = GraphNodes {
            poses,
            velocities,
            frame_times,
        };
        nodes.validate()?;
        Ok(nodes)
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.poses.len();
        if n < 2 || self.velocities.len() != n || self.frame_times.len() != n {
            return Err(Error::InvalidArgument(format!(
                "graph needs N >= 2 with matching counts (poses {n}, velocities {}, times {})",
                self.velocities.len(),
                self.frame_times.len()
            )));
        }
        if self.frame_times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("frame times must be strictly increasing".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoEdge {
    pub i: usize,
    pub j: usize,
    /// Relative pose `P_i^-1 P_j` as measured.
    pub measurement: Pose,
}

impl VoEdge {
    pub fn is_loop(&self) -> bool {
        self.j > self.i + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuEdge {
    /// Connects node `k` to node `k + 1`.
    pub k: usize,
    pub preintegration: ImuPreintegration,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EdgeSet {
    pub vo_edges: Vec<VoEdge>,
    pub imu_edges: Vec<ImuEdge>,
}

impl EdgeSet {
    pub fn validate(&self, node_count: usize) -> Result<()> {
        for e in &self.vo_edges {
            if e.i >= e.j || e.j >= node_count {
                return Err(Error::InvalidArgument(format!(
                    "VO edge ({}, {}) out of range for {node_count} nodes",
                    e.i, e.j
                )));
            }
        }
        let mut seen = vec![false; node_count.saturating_sub(1)];
        for e in &self.imu_edges {
            if e.k + 1 >= node_count {
                return Err(Error::InvalidArgument(format!("IMU edge {} out of range", e.k)));
            }
            seen[e.k] = true;
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!(
                "missing IMU edge between frames {k} and {}",
                k + 1
            )));
        }
        Ok(())
    }
}

/// Scalar weights of the four constraint families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintWeights {
    /// `w1`, shared by adjacent and loop VO edges.
    pub vo: f64,
    /// `w2`
    pub delta_velocity: f64,
    /// `w3`
    pub imu_rotation: f64,
    /// `w4`
    pub translation_velocity: f64,
}

impl Default for ConstraintWeights {
    fn default() -> Self {
        ConstraintWeights {
            vo: 1.0,
            delta_velocity: 1.0,
            imu_rotation: 1.0,
            translation_velocity: 1.0,
        }
    }
}

impl ConstraintWeights {
    pub fn new(vo: f64, delta_velocity: f64, imu_rotation: f64, translation_velocity: f64) -> Self {
        ConstraintWeights {
            vo,
            delta_velocity,
            imu_rotation,
            translation_velocity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.vo, self.delta_velocity, self.imu_rotation, self.translation_velocity];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || w.iter().all(|x| *x == 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weights must be finite, nonnegative and not all zero: {w:?}"
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        ConstraintWeights::new(
            self.vo * factor,
            self.delta_velocity * factor,
            self.imu_rotation * factor,
            self.translation_velocity * factor,
        )
    }
}

/// How a graph is built from front-end edges.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub weights: ConstraintWeights,
    /// Hold the first velocity at its initial value as well as the first pose.
    pub anchor_initial_velocity: bool,
}

impl GraphConfig {
    pub fn new(weights: ConstraintWeights) -> Self {
        GraphConfig {
            weights,
            anchor_initial_velocity: false,
        }
    }

    pub fn build(&self, nodes: GraphNodes, edges: EdgeSet) -> Result<PoseVelocityGraph> {
        let mut g = PoseVelocityGraph::new(nodes, edges, self.weights)?;
        if self.anchor_initial_velocity {
            g.fixed_velocities = vec![0];
        }
        Ok(g)
    }
}

/// Everything the solver needs: nodes, edges, weights and the gauge.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseVelocityGraph {
    pub nodes: GraphNodes,
    pub edges: EdgeSet,
    pub weights: ConstraintWeights,
    /// Poses held constant. Defaults to the first pose only.
    pub fixed_poses: Vec<usize>,
    /// Velocities held constant, e.g. a known initial velocity. Empty by default.
    pub fixed_velocities: Vec<usize>,
}

impl PoseVelocityGraph {
    pub fn new(nodes: GraphNodes, edges: EdgeSet, weights: ConstraintWeights) -> Result<Self> {
        let g = PoseVelocityGraph {
            nodes,
            edges,
            weights,
            fixed_poses: vec![0],
            fixed_velocities: Vec::new(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        self.nodes.validate()?;
        self.edges.validate(self.nodes.len())?;
        self.weights.validate()?;
        if self.fixed_poses.iter().chain(&self.fixed_velocities).any(|&k| k >= self.nodes.len()) {
            return Err(Error::InvalidArgument("fixed node index out of range".into()));
        }
        Ok(())
    }

    pub fn objective(&self) -> f64 {
        objective(&self.nodes, &self.edges, &self.weights)
    }

    pub fn layout(&self) -> VariableLayout {
        VariableLayout::with_fixed_velocities(self.nodes.len(), &self.fixed_poses, &self.fixed_velocities)
    }
}

/// Append-only record of optimized poses, one per frame index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizedPoseStore {
    entries: Vec<(usize, Pose)>,
}

impl OptimizedPoseStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, frame: usize, pose: Pose) -> Result<()> {
        if let Some(&(last, _)) = self.entries.last() {
            if frame <= last {
                return Err(Error::InvalidArgument(format!(
                    "frame {frame} appended after frame {last}"
                )));
            }
        }
        self.entries.push((frame, pose));
        Ok(())
    }

    pub fn get(&self, frame: usize) -> Option<&Pose> {
        self.entries
            .binary_search_by_key(&frame, |(k, _)| *k)
            .ok()
            .map(|i| &self.entries[i].1)
    }

    pub fn entries(&self) -> &[(usize, Pose)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn residual_imu_rotation(nodes: &GraphNodes, edge: &ImuEdge) -> Tangent3 {
    let (a, b) = (&nodes.poses[edge.k], &nodes.poses[edge.k + 1]);
    edge.preintegration
        .delta_rotation
        .inverse()
        .compose(&a.rotation.inverse())
        .compose(&b.rotation)
        .log()
}

pub fn residual_vo(nodes: &GraphNodes, edge: &VoEdge) -> Tangent6 {
    edge.measurement
        .inverse()
        .compose(&nodes.poses[edge.i].between(&nodes.poses[edge.j]))
        .log()
}

pub fn residual_translation_velocity(nodes: &GraphNodes, edge: &ImuEdge) -> Vector3<f64> {
    let k = edge.k;
    let p = &edge.preintegration;
    let pose = &nodes.poses[k];
    (nodes.poses[k + 1].translation - pose.translation)
        - (nodes.velocities[k] * p.duration + pose.rotation.rotate(&p.delta_position))
}

pub fn residual_delta_velocity(nodes: &GraphNodes, edge: &ImuEdge) -> Vector3<f64> {
    let k = edge.k;
    nodes.poses[k].rotation.rotate(&edge.preintegration.delta_velocity)
        - (nodes.velocities[k + 1] - nodes.velocities[k])
}

/// Per-family sums of squared residual norms, before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct FamilyCosts {
    pub vo: f64,
    pub delta_velocity: f64,
    pub imu_rotation: f64,
    pub translation_velocity: f64,
}

impl FamilyCosts {
    pub fn weighted(&self, w: &ConstraintWeights) -> f64 {
        w.vo * self.vo
            + w.delta_velocity * self.delta_velocity
            + w.imu_rotation * self.imu_rotation
            + w.translation_velocity * self.translation_velocity
    }
}

pub fn family_costs(nodes: &GraphNodes, edges: &EdgeSet) -> FamilyCosts {
    let mut c = FamilyCosts::default();
    for e in &edges.vo_edges {
        c.vo += residual_vo(nodes, e).norm_squared();
    }
    for e in &edges.imu_edges {
        c.delta_velocity += residual_delta_velocity(nodes, e).norm_squared();
        c.imu_rotation += residual_imu_rotation(nodes, e).norm_squared();
        c.translation_velocity += residual_translation_velocity(nodes, e).norm_squared();
    }
    c
}

pub fn objective(nodes: &GraphNodes, edges: &EdgeSet, weights: &ConstraintWeights) -> f64 {
    family_costs(nodes, edges).weighted(weights)
}

/// Column placement of every node variable. Each node owns one contiguous
/// range: a 6-dim right-tangent pose increment followed by a 3-dim velocity
/// increment, either omitted when held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableLayout {
    pub node_offset: Vec<usize>,
    pub pose_free: Vec<bool>,
    pub velocity_free: Vec<bool>,
    pub dim: usize,
}

impl VariableLayout {
    pub fn new(node_count: usize, fixed_poses: &[usize]) -> Self {
        Self::with_fixed_velocities(node_count, fixed_poses, &[])
    }

    pub fn with_fixed_velocities(node_count: usize, fixed_poses: &[usize], fixed_velocities: &[usize]) -> Self {
        let mut pose_free = vec![true; node_count];
        for &k in fixed_poses {
            pose_free[k] = false;
        }
        let mut velocity_free = vec![true; node_count];
        for &k in fixed_velocities {
            velocity_free[k] = false;
        }
        let mut node_offset = Vec::with_capacity(node_count);
        let mut dim = 0;
        for k in 0..node_count {
            node_offset.push(dim);
            dim += 6 * pose_free[k] as usize + 3 * velocity_free[k] as usize;
        }
        VariableLayout {
            node_offset,
            pose_free,
            velocity_free,
            dim,
        }
    }

    pub fn node_width(&self, k: usize) -> usize {
        6 * self.pose_free[k] as usize + 3 * self.velocity_free[k] as usize
    }

    pub fn pose_column(&self, k: usize) -> Option<usize> {
        self.pose_free[k].then(|| self.node_offset[k])
    }

    pub fn velocity_column(&self, k: usize) -> Option<usize> {
        self.velocity_free[k].then(|| self.node_offset[k] + 6 * self.pose_free[k] as usize)
    }

    pub fn node_count(&self) -> usize {
        self.node_offset.len()
    }

    /// Applies an increment: poses are retracted by right-multiplying the SE(3)
    /// exponential, velocities are added.
    pub fn retract(&self, nodes: &GraphNodes, delta: &DVector<f64>) -> Result<GraphNodes> {
        let mut out = nodes.clone();
        for k in 0..self.node_count() {
            if let Some(c) = self.pose_column(k) {
                let xi = Vector6::from_iterator(delta.rows(c, 6).iter().copied());
                out.poses[k] = nodes.poses[k].compose(&Pose::exp(&xi)?);
            }
            if let Some(c) = self.velocity_column(k) {
                out.velocities[k] += Vector3::new(delta[c], delta[c + 1], delta[c + 2]);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualKind {
    Vo,
    DeltaVelocity,
    ImuRotation,
    TranslationVelocity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeVariable {
    Pose,
    Velocity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JacobianBlock {
    pub node: usize,
    pub variable: NodeVariable,
    pub column: usize,
    pub matrix: DMatrix<f64>,
}

/// One edge's weighted residual and its nonzero Jacobian blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub kind: ResidualKind,
    pub edge: usize,
    pub row: usize,
    pub residual: DVector<f64>,
    pub blocks: Vec<JacobianBlock>,
}

/// Block-sparse Jacobian of the stacked weighted residual vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseJacobian {
    pub rows: usize,
    pub cols: usize,
    pub blocks: Vec<ResidualBlock>,
}

impl SparseJacobian {
    pub fn residual(&self) -> DVector<f64> {
        let mut r = DVector::zeros(self.rows);
        for b in &self.blocks {
            r.rows_mut(b.row, b.residual.len()).copy_from(&b.residual);
        }
        r
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.rows, self.cols);
        for b in &self.blocks {
            for jb in &b.blocks {
                let mut view = j.view_mut((b.row, jb.column), jb.matrix.shape());
                view += &jb.matrix;
            }
        }
        j
    }

    pub fn objective(&self) -> f64 {
        self.blocks.iter().map(|b| b.residual.norm_squared()).sum()
    }

    /// `J^T r`
    pub fn gradient(&self) -> DVector<f64> {
        let mut g = DVector::zeros(self.cols);
        for b in &self.blocks {
            for jb in &b.blocks {
                let mut seg = g.rows_mut(jb.column, jb.matrix.ncols());
                seg += jb.matrix.tr_mul(&b.residual);
            }
        }
        g
    }

    /// `J d`
    pub fn apply(&self, d: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.rows);
        for b in &self.blocks {
            let mut seg = out.rows_mut(b.row, b.residual.len());
            for jb in &b.blocks {
                seg += &jb.matrix * d.rows(jb.column, jb.matrix.ncols());
            }
        }
        out
    }
}

fn mat<const R: usize, const C: usize>(m: SMatrix<f64, R, C>, s: f64) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, (m * s).as_slice())
}

fn pose_block(layout: &VariableLayout, node: usize, m: DMatrix<f64>) -> Option<JacobianBlock> {
    layout.pose_column(node).map(|column| JacobianBlock {
        node,
        variable: NodeVariable::Pose,
        column,
        matrix: m,
    })
}

fn velocity_block(layout: &VariableLayout, node: usize, m: DMatrix<f64>) -> Option<JacobianBlock> {
    layout.velocity_column(node).map(|column| JacobianBlock {
        node,
        variable: NodeVariable::Velocity,
        column,
        matrix: m,
    })
}

/// Stacks a rotation-part block into the `[rho; phi]` columns of a pose block.
fn pose_cols(rows: usize, rho: Option<&Matrix3<f64>>, phi: Option<&Matrix3<f64>>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, 6);
    if let Some(a) = rho {
        m.view_mut((0, 0), (3, 3)).copy_from(a);
    }
    if let Some(b) = phi {
        m.view_mut((0, 3), (3, 3)).copy_from(b);
    }
    m
}

fn linearize_vo(nodes: &GraphNodes, e: &VoEdge, layout: &VariableLayout, sw: f64) -> (DVector<f64>, Vec<JacobianBlock>) {
    let r = residual_vo(nodes, e);
    let jinv = se3_right_jacobian_inv(&r);
    let back = nodes.poses[e.j].between(&nodes.poses[e.i]);
    let d_i = -jinv * back.adjoint();
    let mut blocks = Vec::with_capacity(2);
    blocks.extend(pose_block(layout, e.i, mat(d_i, sw)));
    blocks.extend(pose_block(layout, e.j, mat(jinv, sw)));
    (DVector::from_column_slice((r * sw).as_slice()), blocks)
}

fn linearize_imu_rotation(nodes: &GraphNodes, e: &ImuEdge, layout: &VariableLayout, sw: f64) -> (DVector<f64>, Vec<JacobianBlock>) {
    let r = residual_imu_rotation(nodes, e);
    let jinv = so3_right_jacobian_inv(&r);
    let (a, b) = (&nodes.poses[e.k], &nodes.poses[e.k + 1]);
    let rel = b.rotation.inverse().compose(&a.rotation).matrix();
    let mut blocks = Vec::with_capacity(2);
    blocks.extend(pose_block(layout, e.k, pose_cols(3, None, Some(&(-jinv * rel))) * sw));
    blocks.extend(pose_block(layout, e.k + 1, pose_cols(3, None, Some(&jinv)) * sw));
    (DVector::from_column_slice((r * sw).as_slice()), blocks)
}

fn linearize_translation_velocity(nodes: &GraphNodes, e: &ImuEdge, layout: &VariableLayout, sw: f64) -> (DVector<f64>, Vec<JacobianBlock>) {
    let r = residual_translation_velocity(nodes, e);
    let rk = nodes.poses[e.k].rotation.matrix();
    let rk1 = nodes.poses[e.k + 1].rotation.matrix();
    let dp = e.preintegration.delta_position;
    let mut blocks = Vec::with_capacity(3);
    blocks.extend(pose_block(layout, e.k, pose_cols(3, Some(&-rk), Some(&(rk * skew(&dp)))) * sw));
    blocks.extend(velocity_block(layout, e.k, mat(Matrix3::identity() * -e.preintegration.duration, sw)));
    blocks.extend(pose_block(layout, e.k + 1, pose_cols(3, Some(&rk1), None) * sw));
    (DVector::from_column_slice((r * sw).as_slice()), blocks)
}

fn linearize_delta_velocity(nodes: &GraphNodes, e: &ImuEdge, layout: &VariableLayout, sw: f64) -> (DVector<f64>, Vec<JacobianBlock>) {
    let r = residual_delta_velocity(nodes, e);
    let rk = nodes.poses[e.k].rotation.matrix();
    let dv = e.preintegration.delta_velocity;
    let mut blocks = Vec::with_capacity(3);
    blocks.extend(pose_block(layout, e.k, pose_cols(3, None, Some(&(-rk * skew(&dv)))) * sw));
    blocks.extend(velocity_block(layout, e.k, mat(Matrix3::identity(), sw)));
    blocks.extend(velocity_block(layout, e.k + 1, mat(-Matrix3::identity(), sw)));
    (DVector::from_column_slice((r * sw).as_slice()), blocks)
}

#[derive(Clone, Copy)]
struct Task {
    kind: ResidualKind,
    edge: usize,
}

fn task_list(edges: &EdgeSet, weights: &ConstraintWeights) -> Vec<Task> {
    let mut tasks = Vec::new();
    let mut push = |kind, n: usize, w: f64| {
        if w > 0.0 {
            tasks.extend((0..n).map(|edge| Task { kind, edge }));
        }
    };
    push(ResidualKind::Vo, edges.vo_edges.len(), weights.vo);
    push(ResidualKind::DeltaVelocity, edges.imu_edges.len(), weights.delta_velocity);
    push(ResidualKind::ImuRotation, edges.imu_edges.len(), weights.imu_rotation);
    push(ResidualKind::TranslationVelocity, edges.imu_edges.len(), weights.translation_velocity);
    tasks
}

pub fn assemble_jacobian(graph: &PoseVelocityGraph) -> Result<SparseJacobian> {
    assemble_jacobian_with(Execution::default(), graph)
}

/// Linearizes every weighted residual. Families with zero weight contribute
/// no rows. Row order is: VO edges, then delta-velocity, IMU-rotation and
/// translation-velocity residuals, each in edge order.
pub fn assemble_jacobian_with(mode: Execution, graph: &PoseVelocityGraph) -> Result<SparseJacobian> {
    let layout = graph.layout();
    let (nodes, edges, w) = (&graph.nodes, &graph.edges, &graph.weights);
    let tasks = task_list(edges, w);
    let linearized = par::map(mode, &tasks, |t| match t.kind {
        ResidualKind::Vo => linearize_vo(nodes, &edges.vo_edges[t.edge], &layout, w.vo.sqrt()),
        ResidualKind::DeltaVelocity => {
            linearize_delta_velocity(nodes, &edges.imu_edges[t.edge], &layout, w.delta_velocity.sqrt())
        }
        ResidualKind::ImuRotation => {
            linearize_imu_rotation(nodes, &edges.imu_edges[t.edge], &layout, w.imu_rotation.sqrt())
        }
        ResidualKind::TranslationVelocity => linearize_translation_velocity(
            nodes,
            &edges.imu_edges[t.edge],
            &layout,
            w.translation_velocity.sqrt(),
        ),
    });

    let mut row = 0;
    let mut blocks = Vec::with_capacity(tasks.len());
    for (t, (residual, jac)) in tasks.iter().zip(linearized) {
        if residual.iter().any(|x| !x.is_finite()) {
            let name = match t.kind {
                ResidualKind::Vo => {
                    let e = &edges.vo_edges[t.edge];
                    format!("vo edge ({}, {})", e.i, e.j)
                }
                kind => format!("{kind:?} residual of imu edge {}", edges.imu_edges[t.edge].k),
            };
            return Err(Error::Numeric { edge: name });
        }
        let len = residual.len();
        blocks.push(ResidualBlock {
            kind: t.kind,
            edge: t.edge,
            row,
            residual,
            blocks: jac,
        });
        row += len;
    }
    Ok(SparseJacobian {
        rows: row,
        cols: layout.dim,
        blocks,
    })
}

/// Stacked weighted residual in the same row order as the Jacobian.
pub fn weighted_residual_with(mode: Execution, graph: &PoseVelocityGraph) -> DVector<f64> {
    let (nodes, edges, w) = (&graph.nodes, &graph.edges, &graph.weights);
    let tasks = task_list(edges, w);
    let parts = par::map(mode, &tasks, |t| {
        let (r, w): (Vec<f64>, f64) = match t.kind {
            ResidualKind::Vo => (residual_vo(nodes, &edges.vo_edges[t.edge]).as_slice().to_vec(), w.vo),
            ResidualKind::DeltaVelocity => (
                residual_delta_velocity(nodes, &edges.imu_edges[t.edge]).as_slice().to_vec(),
                w.delta_velocity,
            ),
            ResidualKind::ImuRotation => (
                residual_imu_rotation(nodes, &edges.imu_edges[t.edge]).as_slice().to_vec(),
                w.imu_rotation,
            ),
            ResidualKind::TranslationVelocity => (
                residual_translation_velocity(nodes, &edges.imu_edges[t.edge]).as_slice().to_vec(),
                w.translation_velocity,
            ),
        };
        let sw = w.sqrt();
        r.into_iter().map(|x| x * sw).collect::<Vec<_>>()
    });
    DVector::from_iterator(parts.iter().map(Vec::len).sum(), parts.into_iter().flatten())
}

/// Gradients of the weighted objective with respect to the edge measurements,
/// holding the nodes fixed.
///
/// VO measurements are perturbed as `t + dt`, `R Exp(dphi)` and reported as
/// `[dt; dphi]`; IMU measurements as `[dphi; dv; dp]` with `dR Exp(dphi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementGradients {
    pub vo: Vec<Vector6<f64>>,
    pub imu: Vec<Vector9>,
}

pub fn measurement_gradients(nodes: &GraphNodes, edges: &EdgeSet, w: &ConstraintWeights) -> MeasurementGradients {
    let vo = edges
        .vo_edges
        .iter()
        .map(|e| {
            let r = residual_vo(nodes, e);
            let err = Pose::exp(&r).unwrap_or_else(|_| Pose::identity());
            let full = -se3_right_jacobian_inv(&r) * err.inverse().adjoint();
            let mut d = full;
            let rt = e.measurement.rotation.matrix().transpose();
            d.fixed_view_mut::<6, 3>(0, 0)
                .copy_from(&(full.fixed_view::<6, 3>(0, 0) * rt));
            d.transpose() * r * (2.0 * w.vo)
        })
        .collect();
    let imu = edges
        .imu_edges
        .iter()
        .map(|e| {
            let rk = nodes.poses[e.k].rotation.matrix();
            let r_rot = residual_imu_rotation(nodes, e);
            let err_t = crate::manifold::so3_exp(&r_rot)
                .map(|r| r.matrix().transpose())
                .unwrap_or_else(|_| Matrix3::identity());
            let d_rot = -so3_right_jacobian_inv(&r_rot) * err_t;
            let r_dv = residual_delta_velocity(nodes, e);
            let r_tv = residual_translation_velocity(nodes, e);
            let mut g = Vector9::zeros();
            g.fixed_rows_mut::<3>(0)
                .copy_from(&(d_rot.transpose() * r_rot * (2.0 * w.imu_rotation)));
            g.fixed_rows_mut::<3>(3)
                .copy_from(&(rk.transpose() * r_dv * (2.0 * w.delta_velocity)));
            g.fixed_rows_mut::<3>(6)
                .copy_from(&(-rk.transpose() * r_tv * (2.0 * w.translation_velocity)));
            g
        })
        .collect();
    MeasurementGradients { vo, imu }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::manifold::{so3_exp, Rotation};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
        Vector3::from_fn(|_, _| rng.random_range(-s..s))
    }

    fn rand_pose(rng: &mut ChaCha8Rng, rs: f64, ts: f64) -> Pose {
        Pose::new(so3_exp(&rand_vec(rng, rs)).unwrap(), rand_vec(rng, ts))
    }

    fn rand_preint(rng: &mut ChaCha8Rng) -> ImuPreintegration {
        ImuPreintegration {
            delta_rotation: so3_exp(&rand_vec(rng, 0.3)).unwrap(),
            delta_velocity: rand_vec(rng, 1.0),
            delta_position: rand_vec(rng, 0.5),
            duration: rng.random_range(0.05..0.5),
            ..ImuPreintegration::identity()
        }
    }

    /// A random, generally inconsistent graph with one loop edge.
    pub(crate) fn random_graph(seed: u64, n: usize) -> PoseVelocityGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let poses: Vec<_> = (0..n).map(|_| rand_pose(&mut rng, 1.5, 3.0)).collect();
        let velocities = (0..n).map(|_| rand_vec(&mut rng, 2.0)).collect();
        let times = (0..n).map(|k| k as f64 * 0.1).collect();
        let nodes = GraphNodes::new(poses, velocities, times).unwrap();
        let mut edges = EdgeSet::default();
        for k in 0..n - 1 {
            edges.vo_edges.push(VoEdge { i: k, j: k + 1, measurement: rand_pose(&mut rng, 1.0, 2.0) });
            edges.imu_edges.push(ImuEdge { k, preintegration: rand_preint(&mut rng) });
        }
        if n > 2 {
            edges.vo_edges.push(VoEdge { i: 0, j: n - 1, measurement: rand_pose(&mut rng, 1.0, 2.0) });
        }
        let w = ConstraintWeights::new(
            rng.random_range(0.5..2.0),
            rng.random_range(0.5..2.0),
            rng.random_range(0.5..2.0),
            rng.random_range(0.5..2.0),
        );
        PoseVelocityGraph::new(nodes, edges, w).unwrap()
    }

    /// Edges generated from the nodes themselves, so every residual is zero.
    pub(crate) fn consistent_graph(seed: u64, n: usize) -> PoseVelocityGraph {
        let mut g = random_graph(seed, n);
        let nodes = g.nodes.clone();
        for e in &mut g.edges.vo_edges {
            e.measurement = nodes.poses[e.i].between(&nodes.poses[e.j]);
        }
        for e in &mut g.edges.imu_edges {
            let (a, b) = (&nodes.poses[e.k], &nodes.poses[e.k + 1]);
            let dt = e.preintegration.duration;
            let rinv = a.rotation.inverse();
            e.preintegration.delta_rotation = rinv.compose(&b.rotation);
            e.preintegration.delta_velocity = rinv.rotate(&(nodes.velocities[e.k + 1] - nodes.velocities[e.k]));
            e.preintegration.delta_position =
                rinv.rotate(&(b.translation - a.translation - nodes.velocities[e.k] * dt));
        }
        g
    }

    #[test]
    fn consistent_graph_has_zero_residuals() {
        let g = consistent_graph(1, 6);
        assert!(g.objective() < 1e-24);
        for e in &g.edges.vo_edges {
            assert!(residual_vo(&g.nodes, e).norm() < 1e-12);
        }
        let jac = assemble_jacobian(&g).unwrap();
        assert!(jac.residual().norm() < 1e-12);
        // full column rank once the gauge pose is removed
        let dense = jac.to_dense();
        let svd = dense.clone().svd(false, false);
        assert!(svd.singular_values.min() > 1e-6);
        assert_eq!(dense.ncols(), 3 + 9 * 5);
    }

    #[test]
    fn imu_rotation_right_perturbation() {
        let mut g = consistent_graph(2, 3);
        let d = Vector3::new(0.01, 0.0, 0.0);
        g.nodes.poses[2].rotation = g.nodes.poses[2].rotation.compose(&so3_exp(&d).unwrap());
        let r = residual_imu_rotation(&g.nodes, &g.edges.imu_edges[1]);
        assert_relative_eq!(r, d, epsilon = 1e-6);
    }

    #[test]
    fn imu_rotation_matches_matrix_form() {
        let g = random_graph(3, 5);
        for e in &g.edges.imu_edges {
            let m = e.preintegration.delta_rotation.matrix().transpose()
                * g.nodes.poses[e.k].rotation.matrix().transpose()
                * g.nodes.poses[e.k + 1].rotation.matrix();
            let cos = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
            let th = cos.acos();
            let w = crate::manifold::vee(&(m - m.transpose())) * (th / (2.0 * th.sin()));
            assert_relative_eq!(residual_imu_rotation(&g.nodes, e), w, epsilon = 1e-10);
        }
    }

    #[test]
    fn vo_pure_translation_mismatch() {
        let nodes = GraphNodes::new(
            vec![Pose::identity(), Pose::from_translation(Vector3::new(1.1, 0.0, 0.0))],
            vec![Vector3::zeros(); 2],
            vec![0.0, 1.0],
        )
        .unwrap();
        let e = VoEdge { i: 0, j: 1, measurement: Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)) };
        let r = residual_vo(&nodes, &e);
        assert_relative_eq!(r, Vector6::new(0.1, 0.0, 0.0, 0.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn loop_edge_on_consistent_circle() {
        let n = 8;
        let poses: Vec<_> = (0..n)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                Pose::new(
                    Rotation::exp(&Vector3::new(0.0, 0.0, a + 0.5 * std::f64::consts::PI)).unwrap(),
                    Vector3::new(3.0 * a.cos(), 3.0 * a.sin(), 0.0),
                )
            })
            .collect();
        let nodes = GraphNodes::new(poses.clone(), vec![Vector3::zeros(); n], (0..n).map(|k| k as f64).collect()).unwrap();
        let e = VoEdge { i: 0, j: 7, measurement: poses[0].between(&poses[7]) };
        assert!(e.is_loop());
        assert!(residual_vo(&nodes, &e).norm() < 1e-12);
    }

    #[test]
    fn translation_velocity_cases() {
        let p = |x: f64| Pose::from_translation(Vector3::new(x, 0.0, 0.0));
        let nodes = GraphNodes::new(vec![p(0.0), p(0.5)], vec![Vector3::new(1.0, 0.0, 0.0); 2], vec![0.0, 0.5]).unwrap();
        let e = ImuEdge { k: 0, preintegration: ImuPreintegration { duration: 0.5, ..ImuPreintegration::identity() } };
        assert!(residual_translation_velocity(&nodes, &e).norm() < 1e-9);
        assert!(residual_delta_velocity(&nodes, &e).norm() < 1e-12);
        let mut moved = nodes.clone();
        moved.poses[1].translation.y += 0.2;
        assert_relative_eq!(residual_translation_velocity(&moved, &e), Vector3::new(0.0, 0.2, 0.0), epsilon = 1e-12);
        let mut faster = nodes.clone();
        faster.velocities[1].x += 0.1;
        assert_relative_eq!(residual_delta_velocity(&faster, &e), Vector3::new(-0.1, 0.0, 0.0), epsilon = 1e-12);
        let stationary = GraphNodes::new(vec![p(1.0), p(1.0)], vec![Vector3::zeros(); 2], vec![0.0, 0.5]).unwrap();
        assert_eq!(residual_translation_velocity(&stationary, &e), Vector3::zeros());
    }

    #[test]
    fn constant_acceleration_sequence_is_consistent() {
        let acc = Vector3::new(0.3, -0.1, 0.2);
        let v0 = Vector3::new(1.0, 0.5, 0.0);
        let dt = 0.25;
        let n = 5;
        let times: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
        let poses = times.iter().map(|&t| Pose::from_translation(v0 * t + acc * (0.5 * t * t))).collect();
        let vels = times.iter().map(|&t| v0 + acc * t).collect();
        let nodes = GraphNodes::new(poses, vels, times).unwrap();
        for k in 0..n - 1 {
            let e = ImuEdge {
                k,
                preintegration: ImuPreintegration {
                    delta_velocity: acc * dt,
                    delta_position: acc * (0.5 * dt * dt),
                    duration: dt,
                    ..ImuPreintegration::identity()
                },
            };
            assert!(residual_delta_velocity(&nodes, &e).norm() < 1e-8);
            assert!(residual_translation_velocity(&nodes, &e).norm() < 1e-8);
        }
    }

    #[test]
    fn single_vo_term_objective() {
        let mut g = consistent_graph(5, 4);
        g.edges.vo_edges[1].measurement = g.edges.vo_edges[1]
            .measurement
            .compose(&Pose::exp(&Vector6::new(0.1, -0.2, 0.05, 0.02, 0.0, 0.01)).unwrap());
        let r = residual_vo(&g.nodes, &g.edges.vo_edges[1]).norm();
        let w = ConstraintWeights::new(1.0, 0.0, 0.0, 0.0);
        assert_relative_eq!(objective(&g.nodes, &g.edges, &w), r * r, max_relative = 1e-12);
    }

    #[test]
    fn objective_matches_brute_force_sum() {
        let g = random_graph(6, 6);
        let w = g.weights;
        let mut total = 0.0;
        for e in &g.edges.vo_edges {
            let r = residual_vo(&g.nodes, e);
            total += w.vo * r.dot(&r);
        }
        for e in &g.edges.imu_edges {
            total += w.delta_velocity * residual_delta_velocity(&g.nodes, e).norm_squared();
            total += w.imu_rotation * residual_imu_rotation(&g.nodes, e).norm_squared();
            total += w.translation_velocity * residual_translation_velocity(&g.nodes, e).norm_squared();
        }
        assert_relative_eq!(g.objective(), total, max_relative = 1e-12);
        assert_relative_eq!(assemble_jacobian(&g).unwrap().objective(), total, max_relative = 1e-12);
    }

    #[test]
    fn residual_stack_matches_jacobian_rows() {
        let mut g = random_graph(4, 6);
        g.weights.imu_rotation = 0.0;
        let stacked = weighted_residual_with(Execution::Sequential, &g);
        assert_eq!(stacked, assemble_jacobian(&g).unwrap().residual());
    }

    /// Central finite differences of the stacked weighted residual.
    pub(crate) fn fd_jacobian(g: &PoseVelocityGraph, h: f64) -> DMatrix<f64> {
        let layout = g.layout();
        let base = assemble_jacobian(g).unwrap();
        let mut out = DMatrix::zeros(base.rows, base.cols);
        for c in 0..layout.dim {
            let mut d = DVector::zeros(layout.dim);
            d[c] = h;
            let mut gp = g.clone();
            gp.nodes = layout.retract(&g.nodes, &d).unwrap();
            let mut gm = g.clone();
            gm.nodes = layout.retract(&g.nodes, &-d).unwrap();
            let rp = assemble_jacobian(&gp).unwrap().residual();
            let rm = assemble_jacobian(&gm).unwrap().residual();
            out.set_column(c, &((rp - rm) / (2.0 * h)));
        }
        out
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        for seed in 0..5 {
            let g = random_graph(100 + seed, 3 + seed as usize);
            let analytic = assemble_jacobian(&g).unwrap().to_dense();
            let fd = fd_jacobian(&g, 1e-6);
            let fd_norm = fd.norm();
            let jac = assemble_jacobian(&g).unwrap();
            for b in &jac.blocks {
                for jb in &b.blocks {
                    let (r, c) = jb.matrix.shape();
                    let a = analytic.view((b.row, jb.column), (r, c));
                    let f = fd.view((b.row, jb.column), (r, c));
                    assert!((a - f).norm() <= 1e-5 * a.norm().max(1e-2), "{:?} edge {}", b.kind, b.edge);
                }
            }
            // nothing outside the declared blocks
            assert!((analytic - fd).norm() < 1e-5 * fd_norm);
        }
    }

    #[test]
    fn vo_edge_touches_only_its_nodes() {
        let g = random_graph(8, 6);
        let jac = assemble_jacobian(&g).unwrap();
        for b in jac.blocks.iter().filter(|b| b.kind == ResidualKind::Vo) {
            let e = g.edges.vo_edges[b.edge];
            for jb in &b.blocks {
                assert!(jb.node == e.i || jb.node == e.j);
                assert_eq!(jb.variable, NodeVariable::Pose);
            }
        }
    }

    #[test]
    fn measurement_gradients_match_finite_differences() {
        let g = random_graph(9, 4);
        let grads = measurement_gradients(&g.nodes, &g.edges, &g.weights);
        let h = 1e-6;
        for (idx, e) in g.edges.vo_edges.iter().enumerate() {
            for c in 0..6 {
                let perturb = |s: f64| {
                    let mut edges = g.edges.clone();
                    let m = &mut edges.vo_edges[idx].measurement;
                    if c < 3 {
                        m.translation[c] += s;
                    } else {
                        let mut d = Vector3::zeros();
                        d[c - 3] = s;
                        m.rotation = m.rotation.compose(&so3_exp(&d).unwrap());
                    }
                    objective(&g.nodes, &edges, &g.weights)
                };
                let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
                assert!((fd - grads.vo[idx][c]).abs() < 1e-5 * fd.abs().max(1.0), "vo {idx} {c} {e:?}");
            }
        }
        for idx in 0..g.edges.imu_edges.len() {
            for c in 0..9 {
                let perturb = |s: f64| {
                    let mut edges = g.edges.clone();
                    let p = &mut edges.imu_edges[idx].preintegration;
                    match c {
                        0..=2 => {
                            let mut d = Vector3::zeros();
                            d[c] = s;
                            p.delta_rotation = p.delta_rotation.compose(&so3_exp(&d).unwrap());
                        }
                        3..=5 => p.delta_velocity[c - 3] += s,
                        _ => p.delta_position[c - 6] += s,
                    }
                    objective(&g.nodes, &edges, &g.weights)
                };
                let fd = (perturb(h) - perturb(-h)) / (2.0 * h);
                assert!((fd - grads.imu[idx][c]).abs() < 1e-5 * fd.abs().max(1.0), "imu {idx} {c}");
            }
        }
    }

    #[test]
    fn gauge_invariance() {
        let g = random_graph(10, 5);
        let t = Pose::new(so3_exp(&Vector3::new(0.4, -1.0, 0.3)).unwrap(), Vector3::new(5.0, -3.0, 2.0));
        let mut moved = g.nodes.clone();
        for (p, v) in moved.poses.iter_mut().zip(moved.velocities.iter_mut()) {
            *p = t.compose(p);
            *v = t.rotation.rotate(v);
        }
        for e in &g.edges.imu_edges {
            assert!((residual_imu_rotation(&g.nodes, e) - residual_imu_rotation(&moved, e)).norm() < 1e-10);
            let dv = residual_delta_velocity(&g.nodes, e);
            assert!((t.rotation.rotate(&dv) - residual_delta_velocity(&moved, e)).norm() < 1e-10);
            let a = residual_translation_velocity(&g.nodes, e);
            let b = residual_translation_velocity(&moved, e);
            // world-frame residuals rotate with the common transform
            assert!((t.rotation.rotate(&a) - b).norm() < 1e-10);
        }
        for e in &g.edges.vo_edges {
            assert!((residual_vo(&g.nodes, e) - residual_vo(&moved, e)).norm() < 1e-10);
        }
    }

    #[test]
    fn doubling_weights_doubles_objective() {
        let g = random_graph(11, 5);
        let w2 = g.weights.scaled(2.0);
        assert_relative_eq!(objective(&g.nodes, &g.edges, &w2), 2.0 * g.objective(), max_relative = 1e-14);
    }

    #[test]
    fn validation_errors() {
        let g = random_graph(12, 4);
        let mut bad = g.edges.clone();
        bad.imu_edges.remove(1);
        assert!(bad.validate(4).is_err());
        let mut bad = g.edges.clone();
        bad.vo_edges[0].j = 9;
        assert!(bad.validate(4).is_err());
        assert!(ConstraintWeights::new(0.0, 0.0, 0.0, 0.0).validate().is_err());
        assert!(ConstraintWeights::new(-1.0, 1.0, 0.0, 0.0).validate().is_err());
        assert!(GraphNodes::new(vec![Pose::identity()], vec![Vector3::zeros()], vec![0.0]).is_err());
        assert!(GraphNodes::new(vec![Pose::identity(); 2], vec![Vector3::zeros(); 2], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn pose_store_is_append_only() {
        let mut m = OptimizedPoseStore::new();
        m.append(0, Pose::identity()).unwrap();
        m.append(3, Pose::identity()).unwrap();
        assert!(m.append(3, Pose::identity()).is_err());
        assert!(m.append(1, Pose::identity()).is_err());
        assert!(m.get(3).is_some() && m.get(1).is_none());
        assert_eq!(m.len(), 2);
    }

    #[test]
    fn sequential_and_parallel_assembly_agree() {
        let g = random_graph(13, 12);
        let a = assemble_jacobian_with(Execution::Sequential, &g).unwrap();
        let b = assemble_jacobian_with(Execution::Parallel, &g).unwrap();
        assert_eq!(a, b);
    }
}
