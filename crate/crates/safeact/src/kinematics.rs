//! Serial-chain forward kinematics, point Jacobians, sphere covers,
//! damped-least-squares inverse kinematics and explicit-Euler integration.
//!
//! The plant modeled here is a velocity-controlled kinematic arm: the
//! commanded joint velocity is the action, there is no drift term and the
//! input matrix is the identity. Everything in this module is a pure
//! function of its inputs.

use nalgebra::{DMatrix, DVector, Isometry3, Point3, Unit, Vector3};
use thiserror::Error;

/// Unit-norm tolerance for joint axes.
const AXIS_NORM_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("invalid chain: {0}")]
    InvalidChain(String),
    #[error("attachment link {link} out of range for a {joints}-joint chain")]
    InvalidAttachment { link: usize, joints: usize },
    #[error("joint vector has length {got}, chain has {expected} joints")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("task velocity must have dimension 2 or 3, got {0}")]
    BadTaskDimension(usize),
    #[error("J*J^T is rank deficient with zero damping; retry with a positive damping factor")]
    RankDeficient,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// One revolute joint: a rotation axis expressed in the joint frame and the
/// fixed rigid transform from the parent link frame to the joint frame.
#[derive(Debug, Clone)]
pub struct JointDescriptor {
    pub axis: Unit<Vector3<f64>>,
    pub origin: Isometry3<f64>,
}

impl JointDescriptor {
    /// Builds a joint from a raw axis vector. The axis must already have
    /// unit norm; it is checked, not normalized.
    pub fn new(axis: Vector3<f64>, origin: Isometry3<f64>) -> Result<Self, KinematicsError> {
        if !axis.iter().all(|v| v.is_finite()) {
            return Err(KinematicsError::NonFinite("joint axis"));
        }
        if (axis.norm() - 1.0).abs() > AXIS_NORM_TOL {
            return Err(KinematicsError::InvalidChain(format!(
                "joint axis {:?} does not have unit norm",
                axis
            )));
        }
        Ok(Self {
            axis: Unit::new_unchecked(axis),
            origin,
        })
    }
}

/// Kinematic description of an n-joint revolute serial chain with per-joint
/// angle limits.
#[derive(Debug, Clone)]
pub struct SerialChain {
    joints: Vec<JointDescriptor>,
    base_pose: Isometry3<f64>,
    q_min: DVector<f64>,
    q_max: DVector<f64>,
}

impl SerialChain {
    pub fn new(
        joints: Vec<JointDescriptor>,
        base_pose: Isometry3<f64>,
        q_min: DVector<f64>,
        q_max: DVector<f64>,
    ) -> Result<Self, KinematicsError> {
        let n = joints.len();
        if n == 0 {
            return Err(KinematicsError::InvalidChain("chain has no joints".into()));
        }
        if q_min.len() != n || q_max.len() != n {
            return Err(KinematicsError::InvalidChain(format!(
                "limit vectors have lengths {}/{}, chain has {} joints",
                q_min.len(),
                q_max.len(),
                n
            )));
        }
        for i in 0..n {
            if !q_min[i].is_finite() || !q_max[i].is_finite() {
                return Err(KinematicsError::NonFinite("joint limits"));
            }
            if q_min[i] >= q_max[i] {
                return Err(KinematicsError::InvalidChain(format!(
                    "joint {} has q_min {} >= q_max {}",
                    i, q_min[i], q_max[i]
                )));
            }
        }
        Ok(Self {
            joints,
            base_pose,
            q_min,
            q_max,
        })
    }

    pub fn n_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn q_min(&self) -> &DVector<f64> {
        &self.q_min
    }

    pub fn q_max(&self) -> &DVector<f64> {
        &self.q_max
    }

    pub fn base_pose(&self) -> &Isometry3<f64> {
        &self.base_pose
    }

    /// World pose of every link frame: index 0 is the base link, index i is
    /// the frame after joint i has rotated. Returns n+1 poses.
    pub fn link_frames(&self, q: &DVector<f64>) -> Result<Vec<Isometry3<f64>>, KinematicsError> {
        self.check_q(q)?;
        let mut frames = Vec::with_capacity(self.joints.len() + 1);
        frames.push(self.base_pose);
        let mut current = self.base_pose;
        for (i, joint) in self.joints.iter().enumerate() {
            let spin = Isometry3::rotation(joint.axis.into_inner() * q[i]);
            current = current * joint.origin * spin;
            frames.push(current);
        }
        Ok(frames)
    }

    /// Position of an attached point in the base frame.
    pub fn forward_point(
        &self,
        q: &DVector<f64>,
        attachment: &Attachment,
    ) -> Result<Vector3<f64>, KinematicsError> {
        self.check_attachment(attachment)?;
        let frames = self.link_frames(q)?;
        Ok((frames[attachment.link_index] * Point3::from(attachment.local_offset)).coords)
    }

    /// 3 x n Jacobian of `forward_point` with respect to the joint angles.
    /// Columns for joints distal to the attachment are zero.
    pub fn point_jacobian(
        &self,
        q: &DVector<f64>,
        attachment: &Attachment,
    ) -> Result<DMatrix<f64>, KinematicsError> {
        self.check_attachment(attachment)?;
        let frames = self.link_frames(q)?;
        let p = (frames[attachment.link_index] * Point3::from(attachment.local_offset)).coords;
        let n = self.n_joints();
        let mut jac = DMatrix::<f64>::zeros(3, n);
        for j in 0..attachment.link_index {
            // Frame j+1 shares its origin with joint j+1's rotation center
            // and carries the joint axis.
            let frame = &frames[j + 1];
            let axis_w = frame.rotation * self.joints[j].axis.into_inner();
            let origin_w = frame.translation.vector;
            let col = axis_w.cross(&(p - origin_w));
            jac.set_column(j, &col);
        }
        Ok(jac)
    }

    /// Maps every sphere of a cover through the forward kinematics,
    /// preserving order.
    pub fn sphere_positions(
        &self,
        q: &DVector<f64>,
        cover: &SphereCover,
    ) -> Result<Vec<(Vector3<f64>, f64)>, KinematicsError> {
        let frames = self.link_frames(q)?;
        cover
            .spheres
            .iter()
            .map(|s| {
                self.check_attachment(&s.attachment)?;
                Ok((
                    (frames[s.attachment.link_index] * Point3::from(s.attachment.local_offset)).coords,
                    s.radius,
                ))
            })
            .collect()
    }

    fn check_q(&self, q: &DVector<f64>) -> Result<(), KinematicsError> {
        if q.len() != self.n_joints() {
            return Err(KinematicsError::DimensionMismatch {
                got: q.len(),
                expected: self.n_joints(),
            });
        }
        if !q.iter().all(|v| v.is_finite()) {
            return Err(KinematicsError::NonFinite("joint angles"));
        }
        Ok(())
    }

    fn check_attachment(&self, a: &Attachment) -> Result<(), KinematicsError> {
        if a.link_index > self.n_joints() {
            return Err(KinematicsError::InvalidAttachment {
                link: a.link_index,
                joints: self.n_joints(),
            });
        }
        Ok(())
    }
}

/// A point rigidly attached to a link. Link 0 is the base.
#[derive(Debug, Clone, PartialEq)]
pub struct Attachment {
    pub link_index: usize,
    pub local_offset: Vector3<f64>,
}

impl Attachment {
    pub fn new(link_index: usize, local_offset: Vector3<f64>) -> Self {
        Self {
            link_index,
            local_offset,
        }
    }
}

/// A sphere used to approximate the robot hull.
#[derive(Debug, Clone)]
pub struct Sphere {
    pub attachment: Attachment,
    pub radius: f64,
}

/// Set of spheres covering the safety-critical parts of the arm.
#[derive(Debug, Clone, Default)]
pub struct SphereCover {
    pub spheres: Vec<Sphere>,
}

impl SphereCover {
    pub fn new(spheres: Vec<Sphere>) -> Result<Self, KinematicsError> {
        for s in &spheres {
            if !(s.radius > 0.0) {
                return Err(KinematicsError::InvalidChain(format!(
                    "sphere on link {} has non-positive radius {}",
                    s.attachment.link_index, s.radius
                )));
            }
        }
        Ok(Self { spheres })
    }

    pub fn len(&self) -> usize {
        self.spheres.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spheres.is_empty()
    }
}

/// Joint-space state of the plant at a given time.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
    pub t: f64,
}

impl JointState {
    pub fn new(q: DVector<f64>, qdot: DVector<f64>, t: f64) -> Result<Self, KinematicsError> {
        if q.len() != qdot.len() {
            return Err(KinematicsError::DimensionMismatch {
                got: qdot.len(),
                expected: q.len(),
            });
        }
        let st = Self { q, qdot, t };
        if !st.is_finite() {
            return Err(KinematicsError::NonFinite("joint state"));
        }
        Ok(st)
    }

    pub fn at_rest(q: DVector<f64>) -> Result<Self, KinematicsError> {
        let n = q.len();
        Self::new(q, DVector::zeros(n), 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite()
            && self.q.iter().all(|v| v.is_finite())
            && self.qdot.iter().all(|v| v.is_finite())
    }
}

/// Explicit-Euler step of the velocity-controlled plant. Joint limits are
/// deliberately not clamped here; keeping the state feasible is the safety
/// filter's job.
pub fn integrate(state: &JointState, qdot_cmd: &DVector<f64>, dt: f64) -> JointState {
    debug_assert!(dt > 0.0, "integration step must be positive");
    JointState {
        q: &state.q + qdot_cmd * dt,
        qdot: qdot_cmd.clone(),
        t: state.t + dt,
    }
}

/// Damped least-squares solve `qdot = J^T (J J^T + lambda^2 I)^-1 v`.
///
/// Exposed separately from [`damped_pinv_ik`] so the linear-algebra core can
/// be tested against permuted Jacobians directly.
pub fn damped_pinv_solve(
    j_task: &DMatrix<f64>,
    v_task: &DVector<f64>,
    lambda: f64,
) -> Result<DVector<f64>, KinematicsError> {
    let m = j_task.nrows();
    if v_task.len() != m {
        return Err(KinematicsError::DimensionMismatch {
            got: v_task.len(),
            expected: m,
        });
    }
    let svd = j_task.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd requested u");
    let v_t = svd.v_t.as_ref().expect("svd requested v_t");
    let sigma = &svd.singular_values;
    let sig_max = sigma.iter().cloned().fold(0.0_f64, f64::max);
    if lambda == 0.0 && sigma.iter().any(|&s| s <= 1e-12 * sig_max.max(1.0)) {
        return Err(KinematicsError::RankDeficient);
    }
    // q = V diag(s / (s^2 + lambda^2)) U^T v
    let mut coeff = u.transpose() * v_task;
    for i in 0..coeff.len() {
        let s = sigma[i];
        coeff[i] *= s / (s * s + lambda * lambda);
    }
    Ok(v_t.transpose() * coeff)
}

/// Differential inverse kinematics for an attached point.
///
/// A 2-dimensional `v_task` selects the x-y rows of the point Jacobian
/// (planar task); a 3-dimensional one uses all rows.
pub fn damped_pinv_ik(
    chain: &SerialChain,
    q: &DVector<f64>,
    v_task: &DVector<f64>,
    attachment: &Attachment,
    lambda: f64,
) -> Result<DVector<f64>, KinematicsError> {
    let dim = v_task.len();
    if dim != 2 && dim != 3 {
        return Err(KinematicsError::BadTaskDimension(dim));
    }
    let jac = chain.point_jacobian(q, attachment)?;
    let j_task = jac.rows(0, dim).into_owned();
    damped_pinv_solve(&j_task, v_task, lambda)
}
