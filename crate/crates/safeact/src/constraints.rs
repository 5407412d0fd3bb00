//! Differentiable inequality constraints g(q) <= 0 with analytic Jacobians.
//!
//! Four families are provided: joint limits, an axis-aligned workspace box
//! over a sphere cover, oriented-bounding-box obstacle avoidance over a
//! sphere cover, and the air-hockey table/link constraints. Blocks stack
//! into a [`ConstraintSet`] whose row ordering is stable across evaluations.

use crate::kinematics::{Attachment, SerialChain, SphereCover};
use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Vector3};
use rayon::prelude::*;
use std::ops::Range;
use std::sync::Arc;
use thiserror::Error;

/// Sphere centers closer than this to the box center are degenerate.
pub const EPS_CENTER: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ConstraintError {
    #[error("invalid oriented bounding box: {0}")]
    InvalidBox(String),
    #[error("sphere center within {EPS_CENTER} m of the box center, or radius swallows the center (alpha = {alpha})")]
    DegenerateCenter { alpha: f64 },
    #[error("blocks disagree on joint dimension: {0} vs {1}")]
    JointDimMismatch(usize, usize),
    #[error("kinematics failure inside constraint evaluation: {0}")]
    Kinematics(#[from] crate::kinematics::KinematicsError),
}

/// Box with arbitrary orientation: center and rotation in the base frame,
/// extents are full side lengths in the box frame.
#[derive(Debug, Clone)]
pub struct OrientedBBox {
    pub center: Vector3<f64>,
    pub rotation: Rotation3<f64>,
    pub extents: Vector3<f64>,
}

impl OrientedBBox {
    pub fn new(
        center: Vector3<f64>,
        rotation: Matrix3<f64>,
        extents: Vector3<f64>,
    ) -> Result<Self, ConstraintError> {
        if !extents.iter().all(|e| *e > 0.0 && e.is_finite()) {
            return Err(ConstraintError::InvalidBox(format!(
                "extents must be positive, got {:?}",
                extents
            )));
        }
        let gram = rotation.transpose() * rotation;
        if (gram - Matrix3::identity()).norm() > 1e-9 {
            return Err(ConstraintError::InvalidBox(
                "rotation is not orthonormal".into(),
            ));
        }
        if (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(ConstraintError::InvalidBox(
                "rotation determinant is not +1".into(),
            ));
        }
        Ok(Self {
            center,
            rotation: Rotation3::from_matrix_unchecked(rotation),
            extents,
        })
    }

    pub fn from_rotation(
        center: Vector3<f64>,
        rotation: Rotation3<f64>,
        extents: Vector3<f64>,
    ) -> Result<Self, ConstraintError> {
        Self::new(center, *rotation.matrix(), extents)
    }

    pub fn volume(&self) -> f64 {
        self.extents.x * self.extents.y * self.extents.z
    }

    /// Whether a point (base frame) lies inside or on the box.
    pub fn contains(&self, p: &Vector3<f64>, margin: f64) -> bool {
        let local = self.rotation.inverse() * (p - self.center);
        (0..3).all(|i| local[i].abs() <= self.extents[i] / 2.0 + margin)
    }
}

/// Result of the sphere-vs-box proximity query.
#[derive(Debug, Clone)]
pub struct ObbDistance {
    /// Distance from the radius-shrunk sphere center to the box hull, >= 0.
    pub d: f64,
    /// Closest point on (or in) the box, expressed in the box frame.
    pub closest: Vector3<f64>,
    /// Gradient of `d` with respect to the sphere center in the base frame.
    /// Zero when the shrunk center lies on or inside the box.
    pub grad: Vector3<f64>,
}

/// Proximity between a sphere (center in the base frame, radius r) and an
/// oriented box.
///
/// The sphere center is mapped into the box frame, pulled toward the box
/// center by the radius fraction `alpha = 1 - r/|x_bb|`, and clipped onto
/// the box. The distance from the shrunk point to its clip is the
/// constraint margin. Clip ties resolve to the clipped branch, so the
/// gradient is a one-sided limit at box edges and corners.
pub fn obb_distance(
    x_base: &Vector3<f64>,
    r: f64,
    obb: &OrientedBBox,
) -> Result<ObbDistance, ConstraintError> {
    let y = obb.rotation.inverse() * (x_base - obb.center);
    let ny = y.norm();
    if ny < EPS_CENTER {
        return Err(ConstraintError::DegenerateCenter { alpha: f64::NEG_INFINITY });
    }
    let alpha = 1.0 - r / ny;
    if alpha <= 0.0 {
        return Err(ConstraintError::DegenerateCenter { alpha });
    }
    let z = y * alpha;
    let mut p = z;
    for i in 0..3 {
        let h = obb.extents[i] / 2.0;
        p[i] = z[i].clamp(-h, h);
    }
    let w = z - p;
    let d = w.norm();
    if d == 0.0 {
        // Shrunk center on or inside the hull: saturated, no direction.
        return Ok(ObbDistance {
            d: 0.0,
            closest: p,
            grad: Vector3::zeros(),
        });
    }
    let w_hat = w / d;
    let y_hat = y / ny;
    // d(z)/dy = alpha*I + (r/|y|) y_hat y_hat^T, applied to w_hat.
    let grad_local = w_hat * alpha + y_hat * ((r / ny) * y_hat.dot(&w_hat));
    Ok(ObbDistance {
        d,
        closest: p,
        grad: obb.rotation * grad_local,
    })
}

/// A stacked sub-block of constraints: g(q) <= 0 with Jacobian dg/dq.
#[derive(Debug, Clone)]
pub struct BlockEval {
    pub g: DVector<f64>,
    pub jac: DMatrix<f64>,
}

/// One named family of constraints over a fixed chain.
pub trait ConstraintBlock: Send + Sync {
    /// Short machine-readable family name.
    fn kind(&self) -> &'static str;
    /// Instance label used in logs and metrics.
    fn label(&self) -> &str;
    fn rows(&self) -> usize;
    fn joint_dim(&self) -> usize;
    fn eval(&self, q: &DVector<f64>) -> BlockEval;
    /// The obstacle box behind this block, for blocks that have one.
    fn obstacle(&self) -> Option<&OrientedBBox> {
        None
    }
}

/// Keeps every joint inside its limits:
/// g_i = ((q_i - mid_i)/half_i)^2 - 1.
pub struct JointLimitBlock {
    label: String,
    mid: DVector<f64>,
    half: DVector<f64>,
}

impl JointLimitBlock {
    pub fn new(q_min: &DVector<f64>, q_max: &DVector<f64>) -> Self {
        Self {
            label: "joint_limits".to_string(),
            mid: (q_max + q_min) / 2.0,
            half: (q_max - q_min) / 2.0,
        }
    }

    pub fn from_chain(chain: &SerialChain) -> Self {
        Self::new(chain.q_min(), chain.q_max())
    }
}

impl ConstraintBlock for JointLimitBlock {
    fn kind(&self) -> &'static str {
        "joint_limits"
    }

    fn label(&self) -> &str {
        &self.label
    }

    fn rows(&self) -> usize {
        self.mid.len()
    }

    fn joint_dim(&self) -> usize {
        self.mid.len()
    }

    fn eval(&self, q: &DVector<f64>) -> BlockEval {
        let n = self.mid.len();
        let mut g = DVector::zeros(n);
        let mut jac = DMatrix::zeros(n, n);
        for i in 0..n {
            let dev = q[i] - self.mid[i];
            let h2 = self.half[i] * self.half[i];
            g[i] = dev * dev / h2 - 1.0;
            jac[(i, i)] = 2.0 * dev / h2;
        }
        BlockEval { g, jac }
    }
}

/// Keeps every cover sphere, with its full radius, inside an axis-aligned
/// box: per sphere six rows, the three lower faces then the three upper.
pub struct WorkspaceBlock {
    label: String,
    chain: Arc<SerialChain>,
    cover: Arc<SphereCover>,
    x_min: Vector3<f64>,
    x_max: Vector3<f64>,
}

impl WorkspaceBlock {
    pub fn new(
        chain: Arc<SerialChain>,
        cover: Arc<SphereCover>,
        x_min: Vector3<f64>,
        x_max: Vector3<f64>,
    ) -> Result<Self, ConstraintError> {
        if !(0..3).all(|i| x_min[i] < x_max[i]) {
            return Err(ConstraintError::InvalidBox(format!(
                "workspace bounds must satisfy min < max, got {:?} / {:?}",
                x_min, x_max
            )));
        }
        Ok(Self {
            label: "workspace".to_string(),
            chain,
            cover,
            x_min,
            x_max,
        })
    }
}

impl ConstraintBlock for WorkspaceBlock {
    fn kind(&self) -> &'static str {
        "workspace"
    }

    fn label(&self) -> &str {
        &self.label
    }

    fn rows(&self) -> usize {
        6 * self.cover.len()
    }

    fn joint_dim(&self) -> usize {
        self.chain.n_joints()
    }

    fn eval(&self, q: &DVector<f64>) -> BlockEval {
        let n = self.chain.n_joints();
        let k = self.rows();
        let mut g = DVector::zeros(k);
        let mut jac = DMatrix::zeros(k, n);
        for (s, sphere) in self.cover.spheres.iter().enumerate() {
            let x = self
                .chain
                .forward_point(q, &sphere.attachment)
                .expect("cover attachment validated at build time");
            let jp = self
                .chain
                .point_jacobian(q, &sphere.attachment)
                .expect("cover attachment validated at build time");
            let r = sphere.radius;
            for axis in 0..3 {
                let lo = 6 * s + axis;
                let hi = 6 * s + 3 + axis;
                g[lo] = self.x_min[axis] - x[axis] + r;
                g[hi] = x[axis] - self.x_max[axis] + r;
                for c in 0..n {
                    jac[(lo, c)] = -jp[(axis, c)];
                    jac[(hi, c)] = jp[(axis, c)];
                }
            }
        }
        BlockEval { g, jac }
    }
}

/// Obstacle avoidance against one oriented box: one row per cover sphere,
/// g = -d_bb. Degenerate centers saturate at g = 0 with a zero row.
pub struct ObbBlock {
    label: String,
    chain: Arc<SerialChain>,
    cover: Arc<SphereCover>,
    obb: OrientedBBox,
}

impl ObbBlock {
    pub fn new(chain: Arc<SerialChain>, cover: Arc<SphereCover>, obb: OrientedBBox) -> Self {
        Self {
            label: "obb".to_string(),
            chain,
            cover,
            obb,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn obb(&self) -> &OrientedBBox {
        &self.obb
    }
}

impl ConstraintBlock for ObbBlock {
    fn kind(&self) -> &'static str {
        "obb"
    }

    fn label(&self) -> &str {
        &self.label
    }

    fn rows(&self) -> usize {
        self.cover.len()
    }

    fn joint_dim(&self) -> usize {
        self.chain.n_joints()
    }

    fn obstacle(&self) -> Option<&OrientedBBox> {
        Some(&self.obb)
    }

    fn eval(&self, q: &DVector<f64>) -> BlockEval {
        let n = self.chain.n_joints();
        let k = self.rows();
        let mut g = DVector::zeros(k);
        let mut jac = DMatrix::zeros(k, n);
        for (s, sphere) in self.cover.spheres.iter().enumerate() {
            let x = self
                .chain
                .forward_point(q, &sphere.attachment)
                .expect("cover attachment validated at build time");
            match obb_distance(&x, sphere.radius, &self.obb) {
                Ok(dist) => {
                    g[s] = -dist.d;
                    if dist.d > 0.0 {
                        let jp = self
                            .chain
                            .point_jacobian(q, &sphere.attachment)
                            .expect("cover attachment validated at build time");
                        let row = -(dist.grad.transpose() * jp);
                        jac.row_mut(s).copy_from(&row);
                    }
                }
                Err(ConstraintError::DegenerateCenter { alpha }) => {
                    log::warn!(
                        "sphere {s} of block '{}' is degenerate against the box (alpha = {alpha}); \
                         saturating at g = 0 with a zero gradient row",
                        self.label
                    );
                    g[s] = 0.0;
                }
                Err(e) => unreachable!("obb_distance only fails on degenerate centers: {e}"),
            }
        }
        BlockEval { g, jac }
    }
}

/// Table-surface / link-height parameters of the air-hockey setup.
#[derive(Debug, Clone)]
pub struct AirHockeyParams {
    pub z_low: f64,
    pub z_high: f64,
    pub x_low: f64,
    pub y_low: f64,
    pub y_high: f64,
    pub z_wrist_low: f64,
    pub z_elbow_low: f64,
}

/// Seven rows keeping the mallet in the table height band and inside the
/// table edges and the wrist/elbow above their height floors.
pub struct AirHockeyBlock {
    label: String,
    chain: Arc<SerialChain>,
    ee: Attachment,
    wrist: Attachment,
    elbow: Attachment,
    params: AirHockeyParams,
}

impl AirHockeyBlock {
    pub fn new(
        chain: Arc<SerialChain>,
        ee: Attachment,
        wrist: Attachment,
        elbow: Attachment,
        params: AirHockeyParams,
    ) -> Result<Self, ConstraintError> {
        let vals = [
            params.z_low,
            params.z_high,
            params.x_low,
            params.y_low,
            params.y_high,
            params.z_wrist_low,
            params.z_elbow_low,
        ];
        if !vals.iter().all(|v| v.is_finite()) {
            return Err(ConstraintError::InvalidBox(
                "air-hockey table parameters must be finite".into(),
            ));
        }
        if params.z_low >= params.z_high {
            return Err(ConstraintError::InvalidBox(format!(
                "z_low {} must be below z_high {}",
                params.z_low, params.z_high
            )));
        }
        Ok(Self {
            label: "air_hockey".to_string(),
            chain,
            ee,
            wrist,
            elbow,
            params,
        })
    }
}

impl ConstraintBlock for AirHockeyBlock {
    fn kind(&self) -> &'static str {
        "air_hockey"
    }

    fn label(&self) -> &str {
        &self.label
    }

    fn rows(&self) -> usize {
        7
    }

    fn joint_dim(&self) -> usize {
        self.chain.n_joints()
    }

    fn eval(&self, q: &DVector<f64>) -> BlockEval {
        let n = self.chain.n_joints();
        let ee = self.chain.forward_point(q, &self.ee).expect("validated");
        let j_ee = self.chain.point_jacobian(q, &self.ee).expect("validated");
        let wrist = self.chain.forward_point(q, &self.wrist).expect("validated");
        let j_wrist = self.chain.point_jacobian(q, &self.wrist).expect("validated");
        let elbow = self.chain.forward_point(q, &self.elbow).expect("validated");
        let j_elbow = self.chain.point_jacobian(q, &self.elbow).expect("validated");

        let p = &self.params;
        let mut g = DVector::zeros(7);
        let mut jac = DMatrix::zeros(7, n);
        // (row, value, source jacobian row, sign)
        let rows: [(usize, f64, (&DMatrix<f64>, usize), f64); 7] = [
            (0, -ee.z + p.z_low, (&j_ee, 2), -1.0),
            (1, ee.z - p.z_high, (&j_ee, 2), 1.0),
            (2, -ee.x + p.x_low, (&j_ee, 0), -1.0),
            (3, -ee.y + p.y_low, (&j_ee, 1), -1.0),
            (4, ee.y - p.y_high, (&j_ee, 1), 1.0),
            (5, -wrist.z + p.z_wrist_low, (&j_wrist, 2), -1.0),
            (6, -elbow.z + p.z_elbow_low, (&j_elbow, 2), -1.0),
        ];
        for (idx, value, (jmat, jrow), sign) in rows {
            g[idx] = value;
            for c in 0..n {
                jac[(idx, c)] = sign * jmat[(jrow, c)];
            }
        }
        BlockEval { g, jac }
    }
}

/// Adds a constant bias to another block's constraint values, leaving the
/// Jacobian untouched. Positive offsets tighten the constraint; they are
/// also how evaluation disturbances are injected in recovery tests.
pub struct OffsetBlock {
    inner: Arc<dyn ConstraintBlock>,
    offset: DVector<f64>,
    label: String,
}

impl OffsetBlock {
    pub fn new(inner: Arc<dyn ConstraintBlock>, offset: DVector<f64>) -> Self {
        assert_eq!(offset.len(), inner.rows(), "offset length must match rows");
        let label = format!("{}+bias", inner.label());
        Self { inner, offset, label }
    }
}

impl ConstraintBlock for OffsetBlock {
    fn kind(&self) -> &'static str {
        "offset"
    }

    fn label(&self) -> &str {
        &self.label
    }

    fn rows(&self) -> usize {
        self.inner.rows()
    }

    fn joint_dim(&self) -> usize {
        self.inner.joint_dim()
    }

    fn eval(&self, q: &DVector<f64>) -> BlockEval {
        let mut ev = self.inner.eval(q);
        ev.g += &self.offset;
        ev
    }
}

/// Row range of one block inside a stacked evaluation.
#[derive(Debug, Clone)]
pub struct BlockSpan {
    pub label: String,
    pub kind: &'static str,
    pub range: Range<usize>,
}

/// Stacked evaluation of a whole constraint set.
#[derive(Debug, Clone)]
pub struct SetEval {
    pub g: DVector<f64>,
    pub jac: DMatrix<f64>,
}

/// Ordered list of constraint blocks sharing one joint dimension.
#[derive(Clone)]
pub struct ConstraintSet {
    blocks: Vec<Arc<dyn ConstraintBlock>>,
    joint_dim: usize,
    total_rows: usize,
}

impl ConstraintSet {
    /// Stacks blocks in declaration order. Empty sets are allowed (the
    /// filter degrades to a pass-through).
    pub fn stack(blocks: Vec<Arc<dyn ConstraintBlock>>, joint_dim: usize) -> Result<Self, ConstraintError> {
        let mut total = 0;
        for b in &blocks {
            if b.joint_dim() != joint_dim {
                return Err(ConstraintError::JointDimMismatch(joint_dim, b.joint_dim()));
            }
            total += b.rows();
        }
        Ok(Self {
            blocks,
            joint_dim,
            total_rows: total,
        })
    }

    pub fn blocks(&self) -> &[Arc<dyn ConstraintBlock>] {
        &self.blocks
    }

    pub fn joint_dim(&self) -> usize {
        self.joint_dim
    }

    pub fn total_rows(&self) -> usize {
        self.total_rows
    }

    pub fn spans(&self) -> Vec<BlockSpan> {
        let mut spans = Vec::with_capacity(self.blocks.len());
        let mut start = 0;
        for b in &self.blocks {
            spans.push(BlockSpan {
                label: b.label().to_string(),
                kind: b.kind(),
                range: start..start + b.rows(),
            });
            start += b.rows();
        }
        spans
    }

    fn assemble(&self, evals: Vec<BlockEval>) -> SetEval {
        let mut g = DVector::zeros(self.total_rows);
        let mut jac = DMatrix::zeros(self.total_rows, self.joint_dim);
        let mut row = 0;
        for ev in evals {
            let k = ev.g.len();
            g.rows_mut(row, k).copy_from(&ev.g);
            jac.rows_mut(row, k).copy_from(&ev.jac);
            row += k;
        }
        SetEval { g, jac }
    }

    /// Sequential evaluation in declaration order.
    pub fn evaluate(&self, q: &DVector<f64>) -> SetEval {
        self.assemble(self.blocks.iter().map(|b| b.eval(q)).collect())
    }

    /// Same result as [`evaluate`](Self::evaluate), with blocks evaluated
    /// in parallel. Assembly order is still declaration order, so the
    /// output is bitwise identical to the sequential path.
    pub fn evaluate_parallel(&self, q: &DVector<f64>) -> SetEval {
        self.assemble(self.blocks.par_iter().map(|b| b.eval(q)).collect())
    }
}

/// Central finite-difference check of every block's Jacobian at `q`.
/// Returns the per-block error norm relative to the Jacobian norm
/// (floored at one so near-zero rows are compared absolutely).
pub fn finite_difference_check(
    set: &ConstraintSet,
    q: &DVector<f64>,
    h: f64,
) -> Vec<(String, f64)> {
    let n = set.joint_dim();
    let ev = set.evaluate(q);
    let mut fd = DMatrix::zeros(set.total_rows(), n);
    for j in 0..n {
        let mut qp = q.clone();
        let mut qm = q.clone();
        qp[j] += h;
        qm[j] -= h;
        let gp = set.evaluate(&qp).g;
        let gm = set.evaluate(&qm).g;
        fd.set_column(j, &((gp - gm) / (2.0 * h)));
    }
    set.spans()
        .into_iter()
        .map(|span| {
            let k = span.range.len();
            let jac = ev.jac.rows(span.range.start, k);
            let diff = jac - fd.rows(span.range.start, k);
            (span.label, diff.norm() / jac.norm().max(1.0))
        })
        .collect()
}

/// The air-hockey constraint family: the seven table/link rows stacked with
/// the chain's joint limits (7 + n rows total).
pub fn airhockey_blocks(
    chain: Arc<SerialChain>,
    ee: Attachment,
    wrist: Attachment,
    elbow: Attachment,
    params: AirHockeyParams,
) -> Result<ConstraintSet, ConstraintError> {
    let n = chain.n_joints();
    let table = AirHockeyBlock::new(chain.clone(), ee, wrist, elbow, params)?;
    let limits = JointLimitBlock::from_chain(&chain);
    ConstraintSet::stack(vec![Arc::new(table), Arc::new(limits)], n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{JointDescriptor, Sphere};
    use approx::assert_relative_eq;
    use nalgebra::Isometry3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn planar3() -> Arc<SerialChain> {
        let mk = |x: f64| {
            JointDescriptor::new(Vector3::z(), Isometry3::translation(x, 0.0, 0.0)).unwrap()
        };
        Arc::new(
            SerialChain::new(
                vec![mk(0.0), mk(0.5), mk(0.4)],
                Isometry3::identity(),
                DVector::from_element(3, -2.9),
                DVector::from_element(3, 2.9),
            )
            .unwrap(),
        )
    }

    fn cover3() -> Arc<SphereCover> {
        Arc::new(
            SphereCover::new(vec![
                Sphere {
                    attachment: Attachment::new(1, Vector3::new(0.5, 0.0, 0.0)),
                    radius: 0.1,
                },
                Sphere {
                    attachment: Attachment::new(2, Vector3::new(0.4, 0.0, 0.0)),
                    radius: 0.1,
                },
                Sphere {
                    attachment: Attachment::new(3, Vector3::new(0.3, 0.0, 0.0)),
                    radius: 0.08,
                },
            ])
            .unwrap(),
        )
    }

    #[test]
    fn joint_limits_center_and_boundary() {
        let q_min = DVector::from_vec(vec![-1.0, -2.0]);
        let q_max = DVector::from_vec(vec![1.0, 4.0]);
        let block = JointLimitBlock::new(&q_min, &q_max);
        let center = block.eval(&DVector::from_vec(vec![0.0, 1.0]));
        assert_relative_eq!(center.g[0], -1.0);
        assert_relative_eq!(center.g[1], -1.0);
        let boundary = block.eval(&q_max.clone());
        assert_relative_eq!(boundary.g[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(boundary.g[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn joint_limits_hand_evaluated() {
        let block = JointLimitBlock::new(
            &DVector::from_vec(vec![-1.0]),
            &DVector::from_vec(vec![1.0]),
        );
        let ev = block.eval(&DVector::from_vec(vec![0.5]));
        assert_relative_eq!(ev.g[0], -0.75, epsilon = 1e-15);
        assert_relative_eq!(ev.jac[(0, 0)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn workspace_interior_and_boundary() {
        let chain = planar3();
        let cover = cover3();
        let block = WorkspaceBlock::new(
            chain.clone(),
            cover,
            Vector3::new(-2.0, -2.0, -2.0),
            Vector3::new(2.0, 2.0, 2.0),
        )
        .unwrap();
        let q = DVector::from_vec(vec![0.3, -0.5, 0.2]);
        let ev = block.eval(&q);
        assert!(ev.g.iter().all(|&v| v < 0.0), "interior spheres must satisfy g < 0");

        // Shrink the box until the farthest sphere touches x_max exactly.
        let positions = chain.sphere_positions(&q, &cover3()).unwrap();
        let (x, r) = positions
            .iter()
            .map(|(p, r)| (p.x, *r))
            .fold((f64::NEG_INFINITY, 0.0), |acc, v| if v.0 + v.1 > acc.0 + acc.1 { v } else { acc });
        let tight = WorkspaceBlock::new(
            chain,
            cover3(),
            Vector3::new(-2.0, -2.0, -2.0),
            Vector3::new(x + r, 2.0, 2.0),
        )
        .unwrap();
        let ev = tight.eval(&q);
        let max_g = ev.g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_relative_eq!(max_g, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn workspace_sign_matches_shrunk_box_oracle() {
        let chain = planar3();
        let cover = cover3();
        let x_min = Vector3::new(-0.8, -0.8, -0.5);
        let x_max = Vector3::new(0.8, 0.8, 0.5);
        let block = WorkspaceBlock::new(chain.clone(), cover.clone(), x_min, x_max).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let q = DVector::from_fn(3, |_, _| rng.gen_range(-2.5..2.5));
            let ev = block.eval(&q);
            let all_ok = ev.g.iter().all(|&v| v <= 0.0);
            // Oracle: every sphere center inside the box shrunk by r.
            let oracle = chain
                .sphere_positions(&q, &cover)
                .unwrap()
                .iter()
                .all(|(p, r)| {
                    (0..3).all(|i| p[i] >= x_min[i] + r && p[i] <= x_max[i] - r)
                });
            assert_eq!(all_ok, oracle);
        }
    }

    #[test]
    fn obb_distance_axis_aligned_point() {
        let obb = OrientedBBox::new(
            Vector3::zeros(),
            Matrix3::identity(),
            Vector3::new(2.0, 2.0, 2.0),
        )
        .unwrap();
        let out = obb_distance(&Vector3::new(2.0, 0.0, 0.0), 0.0, &obb).unwrap();
        assert_relative_eq!(out.d, 1.0, epsilon = 1e-12);
        assert_relative_eq!(out.closest, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn obb_distance_hand_evaluated_with_radius() {
        let obb = OrientedBBox::new(
            Vector3::zeros(),
            Matrix3::identity(),
            Vector3::new(2.0, 2.0, 2.0),
        )
        .unwrap();
        let out = obb_distance(&Vector3::new(2.0, 0.0, 0.0), 0.5, &obb).unwrap();
        // alpha = 0.75, shrunk point (1.5, 0, 0), clip (1, 0, 0).
        assert_relative_eq!(out.d, 0.5, epsilon = 1e-12);
        assert_relative_eq!(out.closest, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(out.grad, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn obb_distance_zero_inside() {
        let obb = OrientedBBox::new(
            Vector3::zeros(),
            Matrix3::identity(),
            Vector3::new(2.0, 2.0, 2.0),
        )
        .unwrap();
        // Shrunk point strictly inside: d must be exactly zero.
        let out = obb_distance(&Vector3::new(0.8, 0.1, -0.2), 0.0, &obb).unwrap();
        assert_eq!(out.d, 0.0);
        assert_eq!(out.grad, Vector3::zeros());
    }

    #[test]
    fn obb_distance_degenerate_center() {
        let obb = OrientedBBox::new(
            Vector3::zeros(),
            Matrix3::identity(),
            Vector3::new(2.0, 2.0, 2.0),
        )
        .unwrap();
        assert!(matches!(
            obb_distance(&Vector3::new(1e-9, 0.0, 0.0), 0.1, &obb),
            Err(ConstraintError::DegenerateCenter { .. })
        ));
        // Radius swallowing the center: alpha <= 0.
        assert!(matches!(
            obb_distance(&Vector3::new(0.05, 0.0, 0.0), 0.2, &obb),
            Err(ConstraintError::DegenerateCenter { .. })
        ));
    }

    #[test]
    fn obb_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 100 {
            let rot = Rotation3::from_euler_angles(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-3.0..3.0),
            );
            let obb = OrientedBBox::from_rotation(
                Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 0.0),
                rot,
                Vector3::new(
                    rng.gen_range(0.2..1.0),
                    rng.gen_range(0.2..1.0),
                    rng.gen_range(0.2..1.0),
                ),
            )
            .unwrap();
            let x = Vector3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let r = rng.gen_range(0.0..0.2);
            let out = match obb_distance(&x, r, &obb) {
                Ok(o) if o.d > 1e-3 => o,
                _ => continue,
            };
            let mut fd = Vector3::zeros();
            let mut ok = true;
            for i in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[i] += h;
                xm[i] -= h;
                match (obb_distance(&xp, r, &obb), obb_distance(&xm, r, &obb)) {
                    (Ok(a), Ok(b)) => fd[i] = (a.d - b.d) / (2.0 * h),
                    _ => {
                        ok = false;
                        break;
                    }
                }
            }
            if !ok {
                continue;
            }
            let rel = (out.grad - fd).norm() / out.grad.norm().max(1e-9);
            assert!(rel <= 1e-4, "obb gradient fd rel err {rel}");
            checked += 1;
        }
    }

    #[test]
    fn obb_block_saturates_degenerate_sphere() {
        let chain = planar3();
        let cover = Arc::new(
            SphereCover::new(vec![Sphere {
                attachment: Attachment::new(3, Vector3::new(0.3, 0.0, 0.0)),
                radius: 0.3,
            }])
            .unwrap(),
        );
        // Box centered exactly at the stretched end effector position.
        let obb = OrientedBBox::new(
            Vector3::new(1.2, 0.0, 0.0),
            Matrix3::identity(),
            Vector3::new(0.2, 0.2, 0.2),
        )
        .unwrap();
        let block = ObbBlock::new(chain, cover, obb);
        let ev = block.eval(&DVector::zeros(3));
        assert_eq!(ev.g[0], 0.0);
        assert_eq!(ev.jac.row(0).amax(), 0.0);
    }

    #[test]
    fn airhockey_rows_symmetric_and_boundary() {
        // One vertical-axis joint then a pitch joint: the ee height moves.
        let joints = vec![
            JointDescriptor::new(Vector3::z(), Isometry3::translation(0.0, 0.0, 0.3)).unwrap(),
            JointDescriptor::new(Vector3::y(), Isometry3::translation(0.2, 0.0, 0.0)).unwrap(),
        ];
        let chain = Arc::new(
            SerialChain::new(
                joints,
                Isometry3::identity(),
                DVector::from_element(2, -2.9),
                DVector::from_element(2, 2.9),
            )
            .unwrap(),
        );
        let ee = Attachment::new(2, Vector3::new(0.4, 0.0, 0.0));
        let wrist = Attachment::new(2, Vector3::new(0.2, 0.0, 0.0));
        let elbow = Attachment::new(1, Vector3::new(0.2, 0.0, 0.0));

        // At q = 0 the ee sits at z = 0.3; choose a band symmetric about it.
        let params = AirHockeyParams {
            z_low: 0.2,
            z_high: 0.4,
            x_low: 0.1,
            y_low: -1.0,
            y_high: 1.0,
            z_wrist_low: 0.0,
            z_elbow_low: 0.0,
        };
        let set = airhockey_blocks(chain.clone(), ee.clone(), wrist, elbow, params).unwrap();
        assert_eq!(set.total_rows(), 7 + 2);
        let ev = set.evaluate(&DVector::zeros(2));
        assert_relative_eq!(ev.g[0], -0.1, epsilon = 1e-12);
        assert_relative_eq!(ev.g[1], -0.1, epsilon = 1e-12);

        // Pitch the arm until the ee touches z_high: g2 = 0.
        // z_ee = 0.3 + 0.4*sin(-q2) so q2 = -asin(0.25) puts it at 0.4.
        let q = DVector::from_vec(vec![0.0, -(0.25_f64.asin())]);
        let ev = set.evaluate(&q);
        assert_relative_eq!(ev.g[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn airhockey_jacobian_matches_finite_differences() {
        let joints = vec![
            JointDescriptor::new(Vector3::z(), Isometry3::translation(0.0, 0.0, 0.3)).unwrap(),
            JointDescriptor::new(Vector3::y(), Isometry3::translation(0.2, 0.0, 0.0)).unwrap(),
            JointDescriptor::new(Vector3::y(), Isometry3::translation(0.3, 0.0, 0.0)).unwrap(),
        ];
        let chain = Arc::new(
            SerialChain::new(
                joints,
                Isometry3::identity(),
                DVector::from_element(3, -2.9),
                DVector::from_element(3, 2.9),
            )
            .unwrap(),
        );
        let set = airhockey_blocks(
            chain,
            Attachment::new(3, Vector3::new(0.3, 0.0, 0.0)),
            Attachment::new(2, Vector3::new(0.3, 0.0, 0.0)),
            Attachment::new(1, Vector3::new(0.2, 0.0, 0.0)),
            AirHockeyParams {
                z_low: -0.1,
                z_high: 0.5,
                x_low: 0.0,
                y_low: -0.6,
                y_high: 0.6,
                z_wrist_low: 0.0,
                z_elbow_low: 0.1,
            },
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let h = 1e-6;
        for _ in 0..100 {
            let q = DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0));
            let ev = set.evaluate(&q);
            let mut fd = DMatrix::zeros(set.total_rows(), 3);
            for j in 0..3 {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[j] += h;
                qm[j] -= h;
                let gp = set.evaluate(&qp).g;
                let gm = set.evaluate(&qm).g;
                fd.set_column(j, &((gp - gm) / (2.0 * h)));
            }
            let rel = (&ev.jac - &fd).norm() / ev.jac.norm().max(1.0);
            assert!(rel <= 1e-4, "air hockey fd rel err {rel}");
        }
    }

    #[test]
    fn stack_of_one_block_is_that_block() {
        let chain = planar3();
        let block: Arc<dyn ConstraintBlock> = Arc::new(JointLimitBlock::from_chain(&chain));
        let set = ConstraintSet::stack(vec![block.clone()], 3).unwrap();
        let q = DVector::from_vec(vec![0.1, -0.4, 1.2]);
        let single = block.eval(&q);
        let stacked = set.evaluate(&q);
        assert_eq!(single.g, stacked.g);
        assert_eq!(single.jac, stacked.jac);
    }

    #[test]
    fn stack_concatenates_in_declaration_order() {
        let chain = planar3();
        let a: Arc<dyn ConstraintBlock> = Arc::new(JointLimitBlock::from_chain(&chain));
        let b: Arc<dyn ConstraintBlock> = Arc::new(
            WorkspaceBlock::new(
                chain.clone(),
                cover3(),
                Vector3::new(-2.0, -2.0, -2.0),
                Vector3::new(2.0, 2.0, 2.0),
            )
            .unwrap(),
        );
        let set = ConstraintSet::stack(vec![a.clone(), b.clone()], 3).unwrap();
        let q = DVector::from_vec(vec![0.5, 0.1, -0.2]);
        let ev = set.evaluate(&q);
        let ea = a.eval(&q);
        let eb = b.eval(&q);
        assert_eq!(ev.g.rows(0, 3), ea.g.rows(0, 3));
        assert_eq!(ev.g.rows(3, eb.g.len()).clone_owned(), eb.g);
        let spans = set.spans();
        assert_eq!(spans[0].range, 0..3);
        assert_eq!(spans[1].range, 3..3 + eb.g.len());
    }

    #[test]
    fn parallel_evaluation_is_bitwise_identical() {
        let chain = planar3();
        let set = ConstraintSet::stack(
            vec![
                Arc::new(JointLimitBlock::from_chain(&chain)),
                Arc::new(
                    WorkspaceBlock::new(
                        chain.clone(),
                        cover3(),
                        Vector3::new(-2.0, -2.0, -2.0),
                        Vector3::new(2.0, 2.0, 2.0),
                    )
                    .unwrap(),
                ),
                Arc::new(ObbBlock::new(
                    chain.clone(),
                    cover3(),
                    OrientedBBox::new(
                        Vector3::new(0.9, 0.9, 0.0),
                        Matrix3::identity(),
                        Vector3::new(0.3, 0.3, 0.3),
                    )
                    .unwrap(),
                )),
            ],
            3,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let q = DVector::from_fn(3, |_, _| rng.gen_range(-2.5..2.5));
            let seq = set.evaluate(&q);
            let par = set.evaluate_parallel(&q);
            assert_eq!(seq.g, par.g);
            assert_eq!(seq.jac, par.jac);
        }
    }

    #[test]
    fn stack_rejects_dimension_mismatch() {
        let chain = planar3();
        let block: Arc<dyn ConstraintBlock> = Arc::new(JointLimitBlock::from_chain(&chain));
        assert!(matches!(
            ConstraintSet::stack(vec![block], 5),
            Err(ConstraintError::JointDimMismatch(5, 3))
        ));
    }

    #[test]
    fn offset_block_biases_g_only() {
        let chain = planar3();
        let inner: Arc<dyn ConstraintBlock> = Arc::new(JointLimitBlock::from_chain(&chain));
        let mut offset = DVector::zeros(3);
        offset[1] = 0.25;
        let biased = OffsetBlock::new(inner.clone(), offset);
        let q = DVector::from_vec(vec![0.2, 0.2, 0.2]);
        let base = inner.eval(&q);
        let ev = biased.eval(&q);
        assert_relative_eq!(ev.g[1], base.g[1] + 0.25, epsilon = 1e-15);
        assert_eq!(ev.g[0], base.g[0]);
        assert_eq!(ev.jac, base.jac);
    }
}
