//! The safety layer: slack-augmented constraint manifold, tangent-space
//! basis, drift compensation, error correction, and the composition
//! `a_safe = a_drift + a_err + B * a_rfm`.
//!
//! Inequality constraints g(q) <= 0 are turned into the equality manifold
//! c(q, mu) = g(q) + sigma(mu) = 0 with the exponential slack
//! sigma(mu) = exp(beta * mu). Slack values are recomputed from the current
//! constraint values on every substep, never integrated, so the filter is a
//! pure function of (q, a_rfm) and cannot drift away from the true
//! constraint state. Moving along the null space of the augmented Jacobian
//! [J | diag(sigma')] keeps c = 0 to first order, which keeps g <= 0 up to
//! integration error.

use crate::constraints::ConstraintSet;
use crate::kinematics::{integrate, JointState};
use nalgebra::{DMatrix, DVector, Dyn, SVD};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("invalid filter config: {0}")]
    InvalidConfig(String),
    #[error("augmented Jacobian numerically rank deficient: sigma_min = {sigma_min:e}, sigma_max = {sigma_max:e}")]
    RankDeficient { sigma_min: f64, sigma_max: f64 },
    #[error("null space has dimension {got}, expected {expected}")]
    BadNullDimension { got: usize, expected: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("substeps_per_action must be >= 1")]
    BadSubstepCount,
    #[error(transparent)]
    Constraint(#[from] crate::constraints::ConstraintError),
}

/// Gains, rates and slack parameters of the safety layer.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FilterConfig {
    /// Slack sharpness beta of sigma(mu) = exp(beta * mu).
    pub slack_beta: f64,
    /// Floor tau on -g when recomputing slack; constraints with
    /// g > -tau are treated as active.
    pub slack_tolerance: f64,
    /// Error-correction gain (1/s).
    pub error_gain: f64,
    /// Euclidean norm clip on the drift term (rad/s), if enabled.
    pub drift_clip: Option<f64>,
    /// Filter substep length (s).
    pub substep_dt: f64,
    /// Relative singular-value threshold for rank decisions.
    pub null_rank_tol: f64,
}

impl FilterConfig {
    /// Manipulation defaults: beta 10, tolerance 1e-3, 60 Hz.
    pub fn manipulation() -> Self {
        Self {
            slack_beta: 10.0,
            slack_tolerance: 1e-3,
            error_gain: 10.0,
            drift_clip: Some(2.0),
            substep_dt: 1.0 / 60.0,
            null_rank_tol: 1e-10,
        }
    }

    /// Air-hockey defaults: beta 2, tolerance 1e-6, 50 Hz.
    pub fn air_hockey() -> Self {
        Self {
            slack_beta: 2.0,
            slack_tolerance: 1e-6,
            error_gain: 40.0,
            drift_clip: Some(2.0),
            substep_dt: 1.0 / 50.0,
            null_rank_tol: 1e-10,
        }
    }

    pub fn validate(&self) -> Result<(), FilterError> {
        let checks = [
            (self.slack_beta > 0.0, "slack_beta must be > 0"),
            (self.slack_tolerance > 0.0, "slack_tolerance must be > 0"),
            (self.error_gain > 0.0, "error_gain must be > 0"),
            (self.substep_dt > 0.0, "substep_dt must be > 0"),
            (self.null_rank_tol > 0.0, "null_rank_tol must be > 0"),
            (
                self.drift_clip.map_or(true, |c| c > 0.0),
                "drift_clip must be > 0 when enabled",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(FilterError::InvalidConfig(msg.into()));
            }
        }
        Ok(())
    }
}

/// Slack function sigma(mu) = exp(beta * mu).
pub fn sigma(mu: f64, cfg: &FilterConfig) -> f64 {
    (cfg.slack_beta * mu).exp()
}

/// sigma'(mu) = beta * exp(beta * mu), strictly positive.
pub fn sigma_prime(mu: f64, cfg: &FilterConfig) -> f64 {
    cfg.slack_beta * (cfg.slack_beta * mu).exp()
}

/// Stateless slack recomputation: mu_i = ln(max(-g_i, tau)) / beta.
///
/// With this choice the augmented constraint c_i = g_i + sigma(mu_i)
/// is exactly zero whenever g_i <= -tau and g_i + tau under violation.
pub fn slack_from_constraint(g: &DVector<f64>, cfg: &FilterConfig) -> DVector<f64> {
    g.map(|gi| (-gi).max(cfg.slack_tolerance).ln() / cfg.slack_beta)
}

/// Augmented constraint value c = g + max(-g, tau).
///
/// Algebraically identical to g + sigma(slack_from_constraint(g)) but
/// computed directly so the interior case is exactly zero.
pub fn augmented_value(g: &DVector<f64>, cfg: &FilterConfig) -> DVector<f64> {
    g.map(|gi| gi + (-gi).max(cfg.slack_tolerance))
}

/// J_c = [J | diag(sigma'(mu))], shape K x (n + K). Full row rank is
/// guaranteed because the slack block is a positive diagonal.
pub fn augmented_jacobian(
    jac: &DMatrix<f64>,
    mu: &DVector<f64>,
    cfg: &FilterConfig,
) -> DMatrix<f64> {
    let k = jac.nrows();
    let n = jac.ncols();
    assert_eq!(mu.len(), k, "slack vector must have one entry per row");
    let mut j_c = DMatrix::zeros(k, n + k);
    j_c.view_mut((0, 0), (k, n)).copy_from(jac);
    for i in 0..k {
        j_c[(i, n + i)] = sigma_prime(mu[i], cfg);
    }
    j_c
}

/// Orthonormal basis of the tangent space (null space of J_c), with the
/// gauge fixed so the joint-row block aligns with the identity.
#[derive(Debug, Clone)]
pub struct TangentBasis {
    /// (n + K) x n matrix with orthonormal columns, J_c * full = 0.
    pub full: DMatrix<f64>,
    /// Joint-row block (n x n) applied to the upstream action.
    pub joint: DMatrix<f64>,
    /// Frobenius norm of J_c * full.
    pub null_residual: f64,
    /// Frobenius norm of full^T full - I.
    pub ortho_residual: f64,
}

/// Row-scaled SVD factorization of the augmented Jacobian, shared by the
/// tangent basis and the minimum-norm solves.
struct AugmentedSystem {
    k: usize,
    n: usize,
    row_scale: DVector<f64>,
    svd: SVD<f64, Dyn, Dyn>,
}

impl AugmentedSystem {
    fn new(j_c: &DMatrix<f64>, cfg: &FilterConfig) -> Result<Self, FilterError> {
        let k = j_c.nrows();
        let n = j_c.ncols() - k;
        let mut scaled = j_c.clone();
        let mut row_scale = DVector::zeros(k);
        for i in 0..k {
            let norm = j_c.row(i).norm();
            if norm == 0.0 || !norm.is_finite() {
                return Err(FilterError::NonFinite("augmented Jacobian row"));
            }
            row_scale[i] = norm;
            scaled.row_mut(i).scale_mut(1.0 / norm);
        }
        let svd = scaled.svd(true, true);
        let sigma_max = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
        let sigma_min = svd
            .singular_values
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if !(sigma_min > cfg.null_rank_tol * sigma_max) {
            return Err(FilterError::RankDeficient { sigma_min, sigma_max });
        }
        Ok(Self {
            k,
            n,
            row_scale,
            svd,
        })
    }

    /// Orthonormal null-space basis of the (unscaled) augmented Jacobian,
    /// gauge not yet fixed.
    fn raw_null_basis(&self) -> Result<DMatrix<f64>, FilterError> {
        let dim = self.n + self.k;
        let v_t = self.svd.v_t.as_ref().expect("svd computed with v_t");
        // Projector onto the orthogonal complement of the row space.
        let projector = DMatrix::identity(dim, dim) - v_t.transpose() * v_t;
        let eig = nalgebra::SymmetricEigen::new(projector);
        let selected: Vec<usize> = (0..dim).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
        if selected.len() != self.n {
            return Err(FilterError::BadNullDimension {
                got: selected.len(),
                expected: self.n,
            });
        }
        let mut basis = DMatrix::zeros(dim, self.n);
        for (c, &i) in selected.iter().enumerate() {
            basis.set_column(c, &eig.eigenvectors.column(i));
        }
        Ok(basis)
    }

    /// Minimum-norm solution u of J_c u = rhs.
    fn min_norm_solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let u = self.svd.u.as_ref().expect("svd computed with u");
        let v_t = self.svd.v_t.as_ref().expect("svd computed with v_t");
        let scaled_rhs = rhs.component_div(&self.row_scale);
        let mut coeff = u.transpose() * scaled_rhs;
        for i in 0..coeff.len() {
            coeff[i] /= self.svd.singular_values[i];
        }
        v_t.transpose() * coeff
    }
}

/// Rotates an orthonormal basis so its first n rows align with the identity
/// as closely as possible (orthogonal Procrustes on the joint block).
fn procrustes_align(basis: DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let joint = basis.rows(0, n).into_owned();
    let svd = joint.transpose().svd(true, true);
    let u = svd.u.as_ref().expect("svd with u");
    let v_t = svd.v_t.as_ref().expect("svd with v_t");
    let omega = u * v_t;
    basis * omega
}

/// Computes the gauge-fixed tangent basis of J_c.
pub fn tangent_basis(j_c: &DMatrix<f64>, cfg: &FilterConfig) -> Result<TangentBasis, FilterError> {
    let k = j_c.nrows();
    let n = j_c.ncols() - k;
    let full = if k == 0 {
        DMatrix::identity(n, n)
    } else {
        let sys = AugmentedSystem::new(j_c, cfg)?;
        procrustes_align(sys.raw_null_basis()?, n)
    };
    let joint = full.rows(0, n).into_owned();
    let null_residual = (j_c * &full).norm();
    let ortho_residual = (full.transpose() * &full - DMatrix::identity(n, n)).norm();
    Ok(TangentBasis {
        full,
        joint,
        null_residual,
        ortho_residual,
    })
}

/// Compensation for constraint motion caused by the plant drift f(s):
/// the joint rows of -pinv(J_c) * (J * f), norm-clipped if configured.
///
/// For the velocity-controlled kinematic plant f = 0 and the drift term is
/// exactly zero; a nonzero f is accepted for plants with an affine term.
pub fn drift_term(
    f: &DVector<f64>,
    g: &DVector<f64>,
    jac: &DMatrix<f64>,
    cfg: &FilterConfig,
) -> Result<DVector<f64>, FilterError> {
    let n = jac.ncols();
    if f.amax() == 0.0 {
        return Ok(DVector::zeros(n));
    }
    let mu = slack_from_constraint(g, cfg);
    let j_c = augmented_jacobian(jac, &mu, cfg);
    let sys = AugmentedSystem::new(&j_c, cfg)?;
    let full = sys.min_norm_solve(&(-(jac * f)));
    let mut joint = full.rows(0, n).into_owned();
    if let Some(clip) = cfg.drift_clip {
        let norm = joint.norm();
        if norm > clip {
            joint.scale_mut(clip / norm);
        }
    }
    Ok(joint)
}

/// Feedback toward the safe set, active only under violation:
/// the joint rows of -pinv(J_c) * (K * max(c, 0)).
pub fn error_correction(
    c: &DVector<f64>,
    j_c: &DMatrix<f64>,
    cfg: &FilterConfig,
) -> Result<DVector<f64>, FilterError> {
    let k = j_c.nrows();
    let n = j_c.ncols() - k;
    let c_pos = c.map(|v| v.max(0.0));
    if c_pos.amax() == 0.0 {
        return Ok(DVector::zeros(n));
    }
    let sys = AugmentedSystem::new(j_c, cfg)?;
    let full = sys.min_norm_solve(&(-(c_pos * cfg.error_gain)));
    Ok(full.rows(0, n).into_owned())
}

/// The three components of one filtered action and their sum.
#[derive(Debug, Clone)]
pub struct SafeActionBreakdown {
    pub a_drift: DVector<f64>,
    pub a_err: DVector<f64>,
    pub a_tangent: DVector<f64>,
    pub a_safe: DVector<f64>,
    /// Joint-row block of the tangent basis applied to the upstream action.
    pub basis: DMatrix<f64>,
}

/// Everything one filter evaluation produces, kept for logging.
#[derive(Debug, Clone)]
pub struct FilterStep {
    pub breakdown: SafeActionBreakdown,
    pub g: DVector<f64>,
    pub mu: DVector<f64>,
    pub c: DVector<f64>,
    pub null_residual: f64,
    pub ortho_residual: f64,
}

/// Runs one filter evaluation at configuration q: evaluates the constraint
/// set, recomputes slack statelessly and composes the safe action.
pub fn filter_action(
    q: &DVector<f64>,
    a_rfm: &DVector<f64>,
    constraints: &ConstraintSet,
    cfg: &FilterConfig,
) -> Result<FilterStep, FilterError> {
    if !q.iter().all(|v| v.is_finite()) {
        return Err(FilterError::NonFinite("q"));
    }
    if !a_rfm.iter().all(|v| v.is_finite()) {
        return Err(FilterError::NonFinite("a_rfm"));
    }
    let n = constraints.joint_dim();
    let ev = constraints.evaluate(q);
    let mu = slack_from_constraint(&ev.g, cfg);
    let c = augmented_value(&ev.g, cfg);

    let (basis, a_err, null_residual, ortho_residual) = if constraints.total_rows() == 0 {
        (DMatrix::identity(n, n), DVector::zeros(n), 0.0, 0.0)
    } else {
        let j_c = augmented_jacobian(&ev.jac, &mu, cfg);
        let sys = AugmentedSystem::new(&j_c, cfg)?;
        let full = procrustes_align(sys.raw_null_basis()?, n);
        let null_res = (&j_c * &full).norm();
        let ortho_res = (full.transpose() * &full - DMatrix::identity(n, n)).norm();
        let c_pos = c.map(|v| v.max(0.0));
        let a_err = if c_pos.amax() == 0.0 {
            DVector::zeros(n)
        } else {
            sys.min_norm_solve(&(-(c_pos * cfg.error_gain)))
                .rows(0, n)
                .into_owned()
        };
        (full, a_err, null_res, ortho_res)
    };

    let basis_joint = basis.rows(0, n).into_owned();
    // Kinematic plant: f = 0, so the drift term is identically zero.
    let a_drift = DVector::zeros(n);
    let a_tangent = &basis_joint * a_rfm;
    let a_safe = &a_drift + &a_err + &a_tangent;

    Ok(FilterStep {
        breakdown: SafeActionBreakdown {
            a_drift,
            a_err,
            a_tangent,
            a_safe,
            basis: basis_joint,
        },
        g: ev.g,
        mu,
        c,
        null_residual,
        ortho_residual,
    })
}

/// One logged substep of a multi-rate execution. `t` and `q` are the state
/// at the start of the substep; `g` is evaluated there.
#[derive(Debug, Clone)]
pub struct SubstepRecord {
    pub t: f64,
    pub q: DVector<f64>,
    pub g: DVector<f64>,
    pub drift_norm: f64,
    pub err_norm: f64,
    pub tangent_norm: f64,
    pub safe_norm: f64,
    /// Frobenius norm of J_c * B_full on this substep; absent when the
    /// filter was bypassed.
    pub null_residual: Option<f64>,
    pub ortho_residual: Option<f64>,
}

/// Result of executing a batch of held actions through the filter.
#[derive(Debug, Clone)]
pub struct MultirateLog {
    pub records: Vec<SubstepRecord>,
    pub final_state: JointState,
}

/// Executes a chunk of upstream joint-velocity actions: each action is held
/// for `substeps_per_action` filter substeps of length `cfg.substep_dt`,
/// with all filter terms recomputed on every substep.
pub fn multirate_execute(
    initial: &JointState,
    actions: &[DVector<f64>],
    constraints: &ConstraintSet,
    cfg: &FilterConfig,
    substeps_per_action: usize,
) -> Result<MultirateLog, FilterError> {
    if substeps_per_action == 0 {
        return Err(FilterError::BadSubstepCount);
    }
    cfg.validate()?;
    let mut state = initial.clone();
    let mut records = Vec::with_capacity(actions.len() * substeps_per_action);
    for a_rfm in actions {
        for _ in 0..substeps_per_action {
            let step = filter_action(&state.q, a_rfm, constraints, cfg)?;
            records.push(SubstepRecord {
                t: state.t,
                q: state.q.clone(),
                g: step.g.clone(),
                drift_norm: step.breakdown.a_drift.norm(),
                err_norm: step.breakdown.a_err.norm(),
                tangent_norm: step.breakdown.a_tangent.norm(),
                safe_norm: step.breakdown.a_safe.norm(),
                null_residual: Some(step.null_residual),
                ortho_residual: Some(step.ortho_residual),
            });
            state = integrate(&state, &step.breakdown.a_safe, cfg.substep_dt);
            if !state.is_finite() {
                return Err(FilterError::NonFinite("integrated state"));
            }
        }
    }
    Ok(MultirateLog {
        records,
        final_state: state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{ConstraintBlock, BlockEval, JointLimitBlock};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    /// Affine test constraint g = A q + b with constant Jacobian.
    struct LinearBlock {
        a: DMatrix<f64>,
        b: DVector<f64>,
    }

    impl ConstraintBlock for LinearBlock {
        fn kind(&self) -> &'static str {
            "linear"
        }
        fn label(&self) -> &str {
            "linear"
        }
        fn rows(&self) -> usize {
            self.a.nrows()
        }
        fn joint_dim(&self) -> usize {
            self.a.ncols()
        }
        fn eval(&self, q: &DVector<f64>) -> BlockEval {
            BlockEval {
                g: &self.a * q + &self.b,
                jac: self.a.clone(),
            }
        }
    }

    fn linear_set(a: DMatrix<f64>, b: DVector<f64>) -> ConstraintSet {
        let n = a.ncols();
        ConstraintSet::stack(vec![Arc::new(LinearBlock { a, b })], n).unwrap()
    }

    fn cfg() -> FilterConfig {
        FilterConfig::manipulation()
    }

    #[test]
    fn slack_interior_is_zero_log() {
        let c = cfg();
        let g = DVector::from_vec(vec![-1.0]);
        let mu = slack_from_constraint(&g, &c);
        assert_relative_eq!(mu[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(sigma(mu[0], &c), 1.0, epsilon = 1e-15);
        assert_eq!(augmented_value(&g, &c)[0], 0.0);
    }

    #[test]
    fn slack_at_tolerance_boundary() {
        let c = cfg();
        let g = DVector::from_vec(vec![-c.slack_tolerance]);
        let mu = slack_from_constraint(&g, &c);
        assert_relative_eq!(mu[0], c.slack_tolerance.ln() / c.slack_beta, epsilon = 1e-15);
        assert_eq!(augmented_value(&g, &c)[0], 0.0);
    }

    #[test]
    fn slack_under_violation() {
        let c = cfg();
        let g = DVector::from_vec(vec![0.05]);
        assert_relative_eq!(augmented_value(&g, &c)[0], 0.051, epsilon = 1e-15);
        // Relation c = g + sigma(mu) holds through the log/exp path too.
        let mu = slack_from_constraint(&g, &c);
        assert_relative_eq!(g[0] + sigma(mu[0], &c), 0.051, epsilon = 1e-12);
    }

    #[test]
    fn augmented_jacobian_example() {
        let c = cfg();
        let jac = DMatrix::from_row_slice(1, 1, &[2.0]);
        let mu = DVector::from_vec(vec![0.0]);
        let j_c = augmented_jacobian(&jac, &mu, &c);
        assert_eq!(j_c.nrows(), 1);
        assert_eq!(j_c.ncols(), 2);
        assert_relative_eq!(j_c[(0, 0)], 2.0);
        assert_relative_eq!(j_c[(0, 1)], 10.0, epsilon = 1e-12);
    }

    #[test]
    fn sigma_prime_always_positive() {
        let c = cfg();
        for mu in [-50.0, -1.0, 0.0, 1.0, 10.0] {
            assert!(sigma_prime(mu, &c) > 0.0);
        }
    }

    #[test]
    fn augmented_jacobian_full_rank_random() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let k = rng.gen_range(1..6);
            let n = rng.gen_range(1..6);
            let jac = DMatrix::from_fn(k, n, |_, _| rng.gen_range(-2.0..2.0));
            let mu = DVector::from_fn(k, |_, _| rng.gen_range(-1.0..0.5));
            let j_c = augmented_jacobian(&jac, &mu, &c);
            let rank = j_c.svd(false, false).rank(1e-10);
            assert_eq!(rank, k);
        }
    }

    #[test]
    fn tangent_basis_empty_set_is_identity() {
        let c = cfg();
        let j_c = DMatrix::<f64>::zeros(0, 4);
        let basis = tangent_basis(&j_c, &c).unwrap();
        assert_eq!(basis.joint, DMatrix::identity(4, 4));
        assert_eq!(basis.null_residual, 0.0);
    }

    #[test]
    fn tangent_basis_passes_unconstrained_direction() {
        let c = cfg();
        // J = [1, 0] with large slack: joint 2 is unconstrained.
        let jac = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let mu = slack_from_constraint(&DVector::from_vec(vec![-1.0]), &c);
        let j_c = augmented_jacobian(&jac, &mu, &c);
        let basis = tangent_basis(&j_c, &c).unwrap();
        let request = DVector::from_vec(vec![0.0, 1.0]);
        let out = &basis.joint * &request;
        let cosine = out.dot(&request) / (out.norm() * request.norm());
        assert!(cosine >= 0.99, "cosine {cosine}");
    }

    #[test]
    fn tangent_basis_null_and_orthonormal_random() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..50 {
            let k = rng.gen_range(1..8);
            let n = rng.gen_range(1..8);
            let jac = DMatrix::from_fn(k, n, |_, _| rng.gen_range(-3.0..3.0));
            let mu = DVector::from_fn(k, |_, _| rng.gen_range(-1.5..0.3));
            let j_c = augmented_jacobian(&jac, &mu, &c);
            let basis = tangent_basis(&j_c, &c).unwrap();
            assert!(basis.null_residual <= 1e-8, "null residual {}", basis.null_residual);
            assert!(basis.ortho_residual <= 1e-8, "ortho residual {}", basis.ortho_residual);
            assert_eq!(basis.full.ncols(), n);
        }
    }

    #[test]
    fn drift_zero_plant_gives_exact_zero() {
        let c = cfg();
        let jac = DMatrix::from_row_slice(1, 2, &[1.0, -0.5]);
        let g = DVector::from_vec(vec![-0.4]);
        let f = DVector::zeros(2);
        let a = drift_term(&f, &g, &jac, &c).unwrap();
        assert_eq!(a, DVector::zeros(2));
    }

    #[test]
    fn drift_cancels_affine_constraint_motion() {
        let c = cfg();
        let jac = DMatrix::from_row_slice(1, 2, &[0.8, -1.3]);
        let g = DVector::from_vec(vec![-0.2]);
        let f = DVector::from_vec(vec![0.7, 0.4]);
        let mu = slack_from_constraint(&g, &c);
        let j_c = augmented_jacobian(&jac, &mu, &c);
        let sys = AugmentedSystem::new(&j_c, &c).unwrap();
        let u = sys.min_norm_solve(&(-(&jac * &f)));
        // cdot = J f + J_c u must vanish.
        let cdot = &jac * &f + &j_c * &u;
        assert!(cdot.amax() <= 1e-9, "residual {}", cdot.amax());
    }

    #[test]
    fn drift_clip_saturates() {
        let mut c = cfg();
        c.drift_clip = Some(0.1);
        let jac = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let g = DVector::from_vec(vec![-0.2]);
        let f = DVector::from_vec(vec![1e3, -2e3]);
        let a = drift_term(&f, &g, &jac, &c).unwrap();
        assert_relative_eq!(a.norm(), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn error_correction_inactive_in_interior() {
        let c = cfg();
        let jac = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let g = DVector::from_vec(vec![-0.5, -0.2]);
        let mu = slack_from_constraint(&g, &c);
        let j_c = augmented_jacobian(&jac, &mu, &c);
        let cval = augmented_value(&g, &c);
        let a = error_correction(&cval, &j_c, &c).unwrap();
        assert_eq!(a, DVector::zeros(2));
    }

    #[test]
    fn error_correction_decreases_violation_in_one_substep() {
        let c = cfg();
        // Scalar system: g(q) = q - 0.95 with q = 1, so g = +0.05.
        let set = linear_set(
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DVector::from_vec(vec![-0.95]),
        );
        let q = DVector::from_vec(vec![1.0]);
        let step = filter_action(&q, &DVector::zeros(1), &set, &c).unwrap();
        let expected = -cfg().error_gain
            * step.c[0].max(0.0)
            * (1.0 / (1.0 + sigma_prime(step.mu[0], &c).powi(2)));
        assert_relative_eq!(step.breakdown.a_err[0], expected, epsilon = 1e-9);
        let q_next = &q + &step.breakdown.a_safe * c.substep_dt;
        let c_next = augmented_value(&set.evaluate(&q_next).g, &c);
        assert!(c_next[0] < step.c[0], "{} !< {}", c_next[0], step.c[0]);
    }

    #[test]
    fn error_correction_is_linear_in_gain() {
        let c1 = cfg();
        let mut c2 = cfg();
        c2.error_gain *= 2.0;
        let jac = DMatrix::from_row_slice(1, 3, &[0.3, -0.4, 1.1]);
        let g = DVector::from_vec(vec![0.07]);
        let mu = slack_from_constraint(&g, &c1);
        let j_c = augmented_jacobian(&jac, &mu, &c1);
        let cval = augmented_value(&g, &c1);
        let a1 = error_correction(&cval, &j_c, &c1).unwrap();
        let a2 = error_correction(&cval, &j_c, &c2).unwrap();
        assert!((a2 - &a1 * 2.0).amax() <= 1e-12);
    }

    #[test]
    fn filter_action_interior_zero_action_is_zero() {
        let c = cfg();
        let set = linear_set(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]),
            DVector::from_vec(vec![-0.6, -0.8]),
        );
        let step = filter_action(&DVector::zeros(2), &DVector::zeros(2), &set, &c).unwrap();
        assert_eq!(step.breakdown.a_safe, DVector::zeros(2));
    }

    #[test]
    fn filter_action_boundary_blocks_outward_push() {
        let c = cfg();
        // g(q) = q1 exactly on the boundary; push outward along q1. The
        // correction dominates the slack-floor leak for pushes below
        // error_gain / slack_beta, so a 0.5 rad/s push must not move out.
        let set = linear_set(
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DVector::zeros(1),
        );
        let q = DVector::zeros(2);
        let a_rfm = DVector::from_vec(vec![0.5, 0.0]);
        let step = filter_action(&q, &a_rfm, &set, &c).unwrap();
        let outward = set.evaluate(&q).jac.row(0).transpose().dot(&step.breakdown.a_safe);
        assert!(outward <= 1e-9, "outward velocity {outward}");
    }

    #[test]
    fn breakdown_identity_is_exact() {
        let c = cfg();
        let set = linear_set(
            DMatrix::from_row_slice(2, 3, &[1.0, 0.2, -0.3, 0.0, 1.0, 0.5]),
            DVector::from_vec(vec![-0.4, 0.02]),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let q = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let a = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let step = filter_action(&q, &a, &set, &c).unwrap();
            let b = &step.breakdown;
            let recomposed = &b.a_drift + &b.a_err + &b.a_tangent;
            assert_eq!(b.a_safe, recomposed);
        }
    }

    #[test]
    fn filter_action_rejects_nan() {
        let c = cfg();
        let set = linear_set(DMatrix::from_row_slice(1, 1, &[1.0]), DVector::zeros(1));
        let res = filter_action(
            &DVector::from_vec(vec![f64::NAN]),
            &DVector::zeros(1),
            &set,
            &c,
        );
        assert!(matches!(res, Err(FilterError::NonFinite("q"))));
    }

    #[test]
    fn multirate_single_substep_matches_manual_step() {
        let c = cfg();
        let set = linear_set(
            DMatrix::from_row_slice(1, 2, &[1.0, -0.2]),
            DVector::from_vec(vec![-0.5]),
        );
        let init = JointState::at_rest(DVector::from_vec(vec![0.1, 0.0])).unwrap();
        let a = DVector::from_vec(vec![0.3, 0.4]);
        let log = multirate_execute(&init, &[a.clone()], &set, &c, 1).unwrap();
        assert_eq!(log.records.len(), 1);
        let step = filter_action(&init.q, &a, &set, &c).unwrap();
        let manual = integrate(&init, &step.breakdown.a_safe, c.substep_dt);
        assert_eq!(log.final_state.q, manual.q);
    }

    #[test]
    fn multirate_log_length_is_substeps_times_chunk() {
        let c = cfg();
        let set = linear_set(
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DVector::from_vec(vec![-2.0]),
        );
        let init = JointState::at_rest(DVector::zeros(2)).unwrap();
        let actions: Vec<DVector<f64>> =
            (0..32).map(|i| DVector::from_vec(vec![0.01 * i as f64, -0.005])).collect();
        let log = multirate_execute(&init, &actions, &set, &c, 4).unwrap();
        assert_eq!(log.records.len(), 128);
    }

    #[test]
    fn multirate_is_deterministic() {
        let c = cfg();
        let chain_limits = JointLimitBlock::new(
            &DVector::from_vec(vec![-1.0, -1.0]),
            &DVector::from_vec(vec![1.0, 1.0]),
        );
        let set = ConstraintSet::stack(vec![Arc::new(chain_limits)], 2).unwrap();
        let init = JointState::at_rest(DVector::from_vec(vec![0.2, -0.3])).unwrap();
        let actions: Vec<DVector<f64>> =
            (0..8).map(|i| DVector::from_vec(vec![(i as f64) * 0.1 - 0.4, 0.25])).collect();
        let a = multirate_execute(&init, &actions, &set, &c, 4).unwrap();
        let b = multirate_execute(&init, &actions, &set, &c, 4).unwrap();
        assert_eq!(a.final_state.q, b.final_state.q);
        for (ra, rb) in a.records.iter().zip(b.records.iter()) {
            assert_eq!(ra.q, rb.q);
            assert_eq!(ra.g, rb.g);
            assert_eq!(ra.safe_norm, rb.safe_norm);
        }
    }

    #[test]
    fn multirate_rejects_zero_substeps() {
        let c = cfg();
        let set = linear_set(DMatrix::from_row_slice(1, 1, &[1.0]), DVector::zeros(1));
        let init = JointState::at_rest(DVector::zeros(1)).unwrap();
        assert!(matches!(
            multirate_execute(&init, &[DVector::zeros(1)], &set, &c, 0),
            Err(FilterError::BadSubstepCount)
        ));
    }
}
