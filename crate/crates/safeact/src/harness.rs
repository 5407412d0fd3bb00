//! Deterministic scenario runner: seeded episodes stepping the kinematic
//! plant at the filter rate, with the safety layer either engaged or
//! bypassed, plus the scripted stand-in policies that drive the two
//! reference scenarios.

use crate::constraints::ConstraintSet;
use crate::filter::{filter_action, FilterConfig, FilterError, SubstepRecord};
use crate::kinematics::{damped_pinv_ik, integrate, Attachment, JointState, SerialChain, SphereCover};
use nalgebra::{DVector, Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("policy setup failed: {0}")]
    PolicySetup(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Kinematics(#[from] crate::kinematics::KinematicsError),
}

fn io_err(path: &Path, source: std::io::Error) -> HarnessError {
    HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Space the policy emits actions in. Task-space actions are converted to
/// joint velocities with damped differential IK at the current state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSpace {
    Joint,
    TaskXy,
    TaskXyz,
}

impl ActionSpace {
    pub fn tag(&self) -> &'static str {
        match self {
            ActionSpace::Joint => "joint",
            ActionSpace::TaskXy => "task_xy",
            ActionSpace::TaskXyz => "task_xyz",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "joint" => Some(ActionSpace::Joint),
            "task_xy" => Some(ActionSpace::TaskXy),
            "task_xyz" => Some(ActionSpace::TaskXyz),
            _ => None,
        }
    }

    fn dim(&self, n_joints: usize) -> usize {
        match self {
            ActionSpace::Joint => n_joints,
            ActionSpace::TaskXy => 2,
            ActionSpace::TaskXyz => 3,
        }
    }
}

/// Declarative policy description; the seeded runtime policy is built per
/// episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    /// Emits zeros.
    Zero { space: ActionSpace },
    /// Holds one action for the whole episode.
    Constant { space: ActionSpace, action: Vec<f64> },
    /// I.i.d. uniform actions in [-bounds_i, bounds_i].
    Random { space: ActionSpace, bounds: Vec<f64> },
    /// Replays a recorded action stream.
    Replay { path: PathBuf },
    /// Open-loop air-hockey hit: drive to a strike point behind the puck,
    /// then punch through it toward the goal.
    ScriptedHit {
        puck_min_m: [f64; 2],
        puck_max_m: [f64; 2],
        goal_m: [f64; 2],
        strike_offset_m: f64,
        hit_speed_mps: f64,
        approach_speed_mps: f64,
        follow_through_s: f64,
        /// Uniform per-component action noise, as a fraction of hit speed.
        noise_frac: f64,
        /// Rectangle the strike point must fall into; outside it the policy
        /// falls back to a straight drive at the puck.
        reach_min_m: [f64; 2],
        reach_max_m: [f64; 2],
    },
    /// Closed-loop planar reach: proportional pull toward a sampled target,
    /// re-evaluated once per action chunk.
    Reach {
        target_min_m: [f64; 2],
        target_max_m: [f64; 2],
        gain_hz: f64,
        max_speed_mps: f64,
        /// Sampled targets keep at least this margin from every obstacle box.
        clearance_m: f64,
        /// Reject targets farther than this from the base.
        max_radius_m: f64,
    },
}

/// Per-episode resolved randomization (puck position, reach target, ...).
#[derive(Debug, Clone, Default)]
pub struct EpisodeSetup {
    pub puck_xy: Option<Vector2<f64>>,
    pub strike_xy: Option<Vector2<f64>>,
    pub goal_dir_xy: Option<Vector2<f64>>,
    pub target_xy: Option<Vector2<f64>>,
}

/// What the policy sees at a chunk boundary.
#[derive(Debug, Clone)]
pub struct Observation {
    pub t: f64,
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
    pub ee: Vector3<f64>,
}

trait Policy {
    fn space(&self) -> ActionSpace;
    /// Next `n` actions spaced `dt` apart, starting at the observation time.
    /// Returning fewer than `n` ends the episode.
    fn chunk(&mut self, obs: &Observation, n: usize, dt: f64) -> Vec<DVector<f64>>;
}

struct ZeroPolicy {
    space: ActionSpace,
    dim: usize,
}

impl Policy for ZeroPolicy {
    fn space(&self) -> ActionSpace {
        self.space
    }
    fn chunk(&mut self, _obs: &Observation, n: usize, _dt: f64) -> Vec<DVector<f64>> {
        vec![DVector::zeros(self.dim); n]
    }
}

struct ConstantPolicy {
    space: ActionSpace,
    action: DVector<f64>,
}

impl Policy for ConstantPolicy {
    fn space(&self) -> ActionSpace {
        self.space
    }
    fn chunk(&mut self, _obs: &Observation, n: usize, _dt: f64) -> Vec<DVector<f64>> {
        vec![self.action.clone(); n]
    }
}

struct RandomPolicy {
    space: ActionSpace,
    bounds: DVector<f64>,
    rng: ChaCha8Rng,
}

impl Policy for RandomPolicy {
    fn space(&self) -> ActionSpace {
        self.space
    }
    fn chunk(&mut self, _obs: &Observation, n: usize, _dt: f64) -> Vec<DVector<f64>> {
        (0..n)
            .map(|_| {
                DVector::from_fn(self.bounds.len(), |i, _| {
                    let b = self.bounds[i];
                    if b == 0.0 {
                        0.0
                    } else {
                        self.rng.gen_range(-b..=b)
                    }
                })
            })
            .collect()
    }
}

struct ReplayPolicy {
    space: ActionSpace,
    actions: std::vec::IntoIter<DVector<f64>>,
}

impl Policy for ReplayPolicy {
    fn space(&self) -> ActionSpace {
        self.space
    }
    fn chunk(&mut self, _obs: &Observation, n: usize, _dt: f64) -> Vec<DVector<f64>> {
        self.actions.by_ref().take(n).collect()
    }
}

/// Open-loop trapezoidal plan: ramp toward the strike point, cruise, then
/// punch through along the puck-to-goal line at hit speed.
struct ScriptedHitPolicy {
    approach_dir: Vector2<f64>,
    approach_speed: f64,
    ramp_s: f64,
    approach_end_s: f64,
    hit_dir: Vector2<f64>,
    hit_speed: f64,
    hit_end_s: f64,
    noise_amp: f64,
    rng: ChaCha8Rng,
}

impl ScriptedHitPolicy {
    const RAMP_S: f64 = 0.3;

    fn plan(
        p0: Vector2<f64>,
        puck: Vector2<f64>,
        goal: Vector2<f64>,
        strike_offset: f64,
        hit_speed: f64,
        approach_speed: f64,
        follow_through: f64,
        noise_amp: f64,
        reach_min: Vector2<f64>,
        reach_max: Vector2<f64>,
        rng: ChaCha8Rng,
    ) -> (Self, Vector2<f64>, Vector2<f64>) {
        let goal_dir = {
            let d = goal - puck;
            if d.norm() < 1e-9 {
                Vector2::new(1.0, 0.0)
            } else {
                d / d.norm()
            }
        };
        let mut strike = puck - goal_dir * strike_offset;
        let reachable = strike.x >= reach_min.x
            && strike.x <= reach_max.x
            && strike.y >= reach_min.y
            && strike.y <= reach_max.y;
        let hit_dir;
        if reachable {
            hit_dir = goal_dir;
        } else {
            log::warn!("strike point {strike:?} outside the reachable rectangle; falling back to a straight drive");
            strike = puck;
            let d = puck - p0;
            hit_dir = if d.norm() < 1e-9 { Vector2::new(1.0, 0.0) } else { d / d.norm() };
        }

        let to_strike = strike - p0;
        let dist = to_strike.norm();
        let approach_dir = if dist < 1e-9 { hit_dir } else { to_strike / dist };
        // Time to cover `dist` with a linear ramp to approach_speed.
        let ramp_dist = approach_speed * Self::RAMP_S / 2.0;
        let approach_end_s = if dist <= ramp_dist {
            (2.0 * dist * Self::RAMP_S / approach_speed).sqrt()
        } else {
            Self::RAMP_S + (dist - ramp_dist) / approach_speed
        };
        let policy = Self {
            approach_dir,
            approach_speed,
            ramp_s: Self::RAMP_S,
            approach_end_s,
            hit_dir,
            hit_speed,
            hit_end_s: approach_end_s + follow_through,
            noise_amp,
            rng,
        };
        (policy, strike, goal_dir)
    }

    fn nominal_velocity(&self, t: f64) -> Vector2<f64> {
        if t < self.approach_end_s {
            let ramp = (t / self.ramp_s).min(1.0);
            self.approach_dir * (self.approach_speed * ramp)
        } else if t < self.hit_end_s {
            self.hit_dir * self.hit_speed
        } else {
            Vector2::zeros()
        }
    }
}

impl Policy for ScriptedHitPolicy {
    fn space(&self) -> ActionSpace {
        ActionSpace::TaskXy
    }
    fn chunk(&mut self, obs: &Observation, n: usize, dt: f64) -> Vec<DVector<f64>> {
        (0..n)
            .map(|j| {
                let v = self.nominal_velocity(obs.t + j as f64 * dt);
                let nx = if self.noise_amp > 0.0 {
                    self.rng.gen_range(-1.0..=1.0) * self.noise_amp
                } else {
                    0.0
                };
                let ny = if self.noise_amp > 0.0 {
                    self.rng.gen_range(-1.0..=1.0) * self.noise_amp
                } else {
                    0.0
                };
                DVector::from_vec(vec![v.x + nx, v.y + ny])
            })
            .collect()
    }
}

struct ReachPolicy {
    target: Vector2<f64>,
    gain: f64,
    max_speed: f64,
}

impl Policy for ReachPolicy {
    fn space(&self) -> ActionSpace {
        ActionSpace::TaskXy
    }
    fn chunk(&mut self, obs: &Observation, n: usize, _dt: f64) -> Vec<DVector<f64>> {
        let err = self.target - Vector2::new(obs.ee.x, obs.ee.y);
        let mut v = err * self.gain;
        let norm = v.norm();
        if norm > self.max_speed {
            v *= self.max_speed / norm;
        }
        vec![DVector::from_vec(vec![v.x, v.y]); n]
    }
}

/// Success criterion of a scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SuccessSpec {
    /// Never succeeds; safety metrics only.
    None,
    /// End effector passes within `tolerance_m` of the episode target while
    /// every constraint stays within the slack tolerance throughout.
    Reach { tolerance_m: f64 },
    /// End effector crosses within `radius_m` of the strike point moving
    /// toward the goal at `min_speed_mps` or faster.
    Strike { radius_m: f64, min_speed_mps: f64 },
}

/// IK used to convert task-space policy actions into joint velocities.
#[derive(Debug, Clone)]
pub struct IkParams {
    pub attachment: Attachment,
    pub damping: f64,
    /// Lift planar (x, y) tasks to (x, y, 0): command zero vertical
    /// velocity instead of leaving the height unconstrained.
    pub vertical_hold: bool,
}

/// A runnable experiment: plant, constraints, policy, rates and success
/// criterion.
#[derive(Clone)]
pub struct Scenario {
    pub name: String,
    pub chain: Arc<SerialChain>,
    pub cover: Arc<SphereCover>,
    pub constraints: ConstraintSet,
    pub initial: JointState,
    pub policy: PolicySpec,
    pub policy_rate_hz: f64,
    pub filter_rate_hz: f64,
    pub chunk_size: usize,
    pub duration_s: f64,
    pub success: SuccessSpec,
    pub filter: FilterConfig,
    pub ik: IkParams,
    /// Norm clip applied to upstream joint velocities in both modes,
    /// mimicking the velocity limit of the downstream joint controller.
    pub action_clip_rad_s: Option<f64>,
}

impl Scenario {
    /// Filter substeps per policy action; errors unless the filter rate is
    /// an integer multiple of the policy rate.
    pub fn substeps_per_action(&self) -> Result<usize, HarnessError> {
        if !(self.policy_rate_hz > 0.0) || !(self.filter_rate_hz > 0.0) {
            return Err(HarnessError::InvalidScenario("rates must be positive".into()));
        }
        let ratio = self.filter_rate_hz / self.policy_rate_hz;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return Err(HarnessError::InvalidScenario(format!(
                "filter rate {} is not an integer multiple of policy rate {}",
                self.filter_rate_hz, self.policy_rate_hz
            )));
        }
        Ok(ratio.round() as usize)
    }

    fn observation(&self, state: &JointState) -> Result<Observation, HarnessError> {
        Ok(Observation {
            t: state.t,
            q: state.q.clone(),
            qdot: state.qdot.clone(),
            ee: self.chain.forward_point(&state.q, &self.ik.attachment)?,
        })
    }

    fn build_policy(
        &self,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Box<dyn Policy>, EpisodeSetup), HarnessError> {
        let n = self.chain.n_joints();
        let mut setup = EpisodeSetup::default();
        let policy: Box<dyn Policy> = match &self.policy {
            PolicySpec::Zero { space } => Box::new(ZeroPolicy {
                space: *space,
                dim: space.dim(n),
            }),
            PolicySpec::Constant { space, action } => {
                if action.len() != space.dim(n) {
                    return Err(HarnessError::PolicySetup(format!(
                        "constant action has dimension {}, space needs {}",
                        action.len(),
                        space.dim(n)
                    )));
                }
                Box::new(ConstantPolicy {
                    space: *space,
                    action: DVector::from_vec(action.clone()),
                })
            }
            PolicySpec::Random { space, bounds } => {
                if bounds.len() != space.dim(n) {
                    return Err(HarnessError::PolicySetup(format!(
                        "random bounds have dimension {}, space needs {}",
                        bounds.len(),
                        space.dim(n)
                    )));
                }
                Box::new(RandomPolicy {
                    space: *space,
                    bounds: DVector::from_vec(bounds.clone()),
                    rng: ChaCha8Rng::seed_from_u64(rng.gen()),
                })
            }
            PolicySpec::Replay { path } => {
                let (space, records) = read_action_stream(path)?;
                Box::new(ReplayPolicy {
                    space,
                    actions: records
                        .into_iter()
                        .map(|(_, a)| a)
                        .collect::<Vec<_>>()
                        .into_iter(),
                })
            }
            PolicySpec::ScriptedHit {
                puck_min_m,
                puck_max_m,
                goal_m,
                strike_offset_m,
                hit_speed_mps,
                approach_speed_mps,
                follow_through_s,
                noise_frac,
                reach_min_m,
                reach_max_m,
            } => {
                let puck = Vector2::new(
                    rng.gen_range(puck_min_m[0]..=puck_max_m[0]),
                    rng.gen_range(puck_min_m[1]..=puck_max_m[1]),
                );
                let ee0 = self
                    .chain
                    .forward_point(&self.initial.q, &self.ik.attachment)?;
                let policy_rng = ChaCha8Rng::seed_from_u64(rng.gen());
                let (policy, strike, goal_dir) = ScriptedHitPolicy::plan(
                    Vector2::new(ee0.x, ee0.y),
                    puck,
                    Vector2::new(goal_m[0], goal_m[1]),
                    *strike_offset_m,
                    *hit_speed_mps,
                    *approach_speed_mps,
                    *follow_through_s,
                    noise_frac * hit_speed_mps,
                    Vector2::new(reach_min_m[0], reach_min_m[1]),
                    Vector2::new(reach_max_m[0], reach_max_m[1]),
                    policy_rng,
                );
                setup.puck_xy = Some(puck);
                setup.strike_xy = Some(strike);
                setup.goal_dir_xy = Some(goal_dir);
                Box::new(policy)
            }
            PolicySpec::Reach {
                target_min_m,
                target_max_m,
                gain_hz,
                max_speed_mps,
                clearance_m,
                max_radius_m,
            } => {
                let target = sample_reach_target(
                    self,
                    rng,
                    *target_min_m,
                    *target_max_m,
                    *clearance_m,
                    *max_radius_m,
                )?;
                setup.target_xy = Some(target);
                Box::new(ReachPolicy {
                    target,
                    gain: *gain_hz,
                    max_speed: *max_speed_mps,
                })
            }
        };
        Ok((policy, setup))
    }
}

/// Rejection-samples a reach target clear of every obstacle box.
fn sample_reach_target(
    sc: &Scenario,
    rng: &mut ChaCha8Rng,
    target_min: [f64; 2],
    target_max: [f64; 2],
    clearance: f64,
    max_radius: f64,
) -> Result<Vector2<f64>, HarnessError> {
    let boxes: Vec<&crate::constraints::OrientedBBox> = sc
        .constraints
        .blocks()
        .iter()
        .filter_map(|b| b.obstacle())
        .collect();
    for _ in 0..100_000 {
        let t = Vector2::new(
            rng.gen_range(target_min[0]..=target_max[0]),
            rng.gen_range(target_min[1]..=target_max[1]),
        );
        if t.norm() > max_radius {
            continue;
        }
        let p3 = Vector3::new(t.x, t.y, 0.0);
        if boxes.iter().any(|obb| obb.contains(&p3, clearance)) {
            continue;
        }
        return Ok(t);
    }
    Err(HarnessError::PolicySetup(
        "could not sample a reach target after 100000 tries".into(),
    ))
}

/// Violation and success statistics of one episode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub seed: u64,
    pub filtered: bool,
    /// False when the episode aborted on a non-finite state.
    pub completed: bool,
    pub success: bool,
    /// No constraint exceeded the slack tolerance at any logged substep.
    pub safe: bool,
    pub violation_steps: usize,
    /// Max over blocks of the per-block max constraint value.
    pub max_violation: f64,
    /// Per-block max constraint value, in declaration order.
    pub block_max: Vec<(String, f64)>,
    pub duration_to_success: Option<f64>,
}

/// Full per-substep trace of one episode.
#[derive(Debug, Clone)]
pub struct EpisodeLog {
    pub records: Vec<SubstepRecord>,
    /// Actions as emitted by the policy, one per policy tick.
    pub actions: Vec<(f64, DVector<f64>)>,
    pub action_space: ActionSpace,
    pub setup: EpisodeSetup,
}

/// Runs one seeded episode. With the filter engaged every upstream action
/// is morphed on the constraint manifold; without it the raw joint
/// velocities drive the plant directly. Constraint values are logged every
/// substep in both modes, and identical seeds give identical episodes.
pub fn run_episode(
    sc: &Scenario,
    with_filter: bool,
    seed: u64,
) -> Result<(EpisodeMetrics, EpisodeLog), HarnessError> {
    let substeps = sc.substeps_per_action()?;
    let dt_sub = sc.filter.substep_dt;
    if (dt_sub * sc.filter_rate_hz - 1.0).abs() > 1e-9 {
        return Err(HarnessError::InvalidScenario(format!(
            "substep_dt {} does not match filter rate {}",
            dt_sub, sc.filter_rate_hz
        )));
    }
    let dt_action = 1.0 / sc.policy_rate_hz;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut policy, setup) = sc.build_policy(&mut rng)?;
    let space = policy.space();
    let total_actions = (sc.duration_s * sc.policy_rate_hz).round().max(1.0) as usize;

    let mut state = sc.initial.clone();
    let mut records: Vec<SubstepRecord> = Vec::with_capacity(total_actions * substeps + 1);
    let mut actions_log: Vec<(f64, DVector<f64>)> = Vec::with_capacity(total_actions);
    let mut aborted = false;
    let mut executed = 0;

    'episode: while executed < total_actions {
        let want = sc.chunk_size.min(total_actions - executed);
        let obs = sc.observation(&state)?;
        let chunk = policy.chunk(&obs, want, dt_action);
        let got = chunk.len();
        for action in chunk {
            actions_log.push((state.t, action.clone()));
            let mut a_joint = match space {
                ActionSpace::Joint => action,
                ActionSpace::TaskXy if sc.ik.vertical_hold => {
                    let lifted = DVector::from_vec(vec![action[0], action[1], 0.0]);
                    damped_pinv_ik(&sc.chain, &state.q, &lifted, &sc.ik.attachment, sc.ik.damping)?
                }
                ActionSpace::TaskXy | ActionSpace::TaskXyz => {
                    damped_pinv_ik(&sc.chain, &state.q, &action, &sc.ik.attachment, sc.ik.damping)?
                }
            };
            if let Some(clip) = sc.action_clip_rad_s {
                let norm = a_joint.norm();
                if norm > clip {
                    a_joint.scale_mut(clip / norm);
                }
            }
            for _ in 0..substeps {
                if with_filter {
                    let step = filter_action(&state.q, &a_joint, &sc.constraints, &sc.filter)?;
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
                    state = integrate(&state, &step.breakdown.a_safe, dt_sub);
                } else {
                    let g = sc.constraints.evaluate(&state.q).g;
                    let norm = a_joint.norm();
                    records.push(SubstepRecord {
                        t: state.t,
                        q: state.q.clone(),
                        g,
                        drift_norm: 0.0,
                        err_norm: 0.0,
                        tangent_norm: norm,
                        safe_norm: norm,
                        null_residual: None,
                        ortho_residual: None,
                    });
                    state = integrate(&state, &a_joint, dt_sub);
                }
                if !state.is_finite() {
                    aborted = true;
                    break 'episode;
                }
            }
        }
        executed += got;
        if got < want {
            break; // action stream exhausted
        }
    }

    if !aborted {
        // Terminal sample so the final state is part of the metrics.
        let g = sc.constraints.evaluate(&state.q).g;
        records.push(SubstepRecord {
            t: state.t,
            q: state.q.clone(),
            g,
            drift_norm: 0.0,
            err_norm: 0.0,
            tangent_norm: 0.0,
            safe_norm: 0.0,
            null_residual: None,
            ortho_residual: None,
        });
    }

    let log = EpisodeLog {
        records,
        actions: actions_log,
        action_space: space,
        setup,
    };
    let metrics = compute_metrics(sc, &log, with_filter, seed, aborted)?;
    Ok((metrics, log))
}

fn compute_metrics(
    sc: &Scenario,
    log: &EpisodeLog,
    filtered: bool,
    seed: u64,
    aborted: bool,
) -> Result<EpisodeMetrics, HarnessError> {
    let tau = sc.filter.slack_tolerance;
    let spans = sc.constraints.spans();
    let mut block_max: Vec<(String, f64)> = spans
        .iter()
        .map(|s| (s.label.clone(), f64::NEG_INFINITY))
        .collect();
    let mut violation_steps = 0;
    for rec in &log.records {
        let mut any = false;
        for (i, span) in spans.iter().enumerate() {
            for r in span.range.clone() {
                let v = rec.g[r];
                if v > block_max[i].1 {
                    block_max[i].1 = v;
                }
                if v > tau {
                    any = true;
                }
            }
        }
        if any {
            violation_steps += 1;
        }
    }
    let max_violation = block_max
        .iter()
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let safe = violation_steps == 0;
    let (reached, duration_to_success) = evaluate_success(sc, log)?;
    let success = !aborted && reached;
    Ok(EpisodeMetrics {
        seed,
        filtered,
        completed: !aborted,
        success,
        safe,
        violation_steps,
        max_violation,
        block_max,
        duration_to_success: if success { duration_to_success } else { None },
    })
}

fn evaluate_success(sc: &Scenario, log: &EpisodeLog) -> Result<(bool, Option<f64>), HarnessError> {
    match &sc.success {
        SuccessSpec::None => Ok((false, None)),
        SuccessSpec::Reach { tolerance_m } => {
            let Some(target) = log.setup.target_xy else {
                return Ok((false, None));
            };
            let tau = sc.filter.slack_tolerance;
            let mut safe_so_far = true;
            for rec in &log.records {
                if rec.g.iter().any(|&v| v > tau) {
                    safe_so_far = false;
                }
                let ee = sc.chain.forward_point(&rec.q, &sc.ik.attachment)?;
                let dist = (Vector2::new(ee.x, ee.y) - target).norm();
                if dist <= *tolerance_m && safe_so_far {
                    // Reached while clean; the overall criterion still
                    // demands a clean log to the end.
                    let all_safe = log.records.iter().all(|r| r.g.iter().all(|&v| v <= tau));
                    return Ok((all_safe, Some(rec.t)));
                }
            }
            Ok((false, None))
        }
        SuccessSpec::Strike { radius_m, min_speed_mps } => {
            let (Some(strike), Some(goal_dir)) = (log.setup.strike_xy, log.setup.goal_dir_xy)
            else {
                return Ok((false, None));
            };
            let dt = sc.filter.substep_dt;
            let mut prev: Option<(f64, Vector2<f64>)> = None;
            for rec in &log.records {
                let ee = sc.chain.forward_point(&rec.q, &sc.ik.attachment)?;
                let p = Vector2::new(ee.x, ee.y);
                if let Some((t_prev, p_prev)) = prev {
                    let v = (p - p_prev) / (rec.t - t_prev).max(dt * 1e-3);
                    if (p - strike).norm() <= *radius_m && v.dot(&goal_dir) >= *min_speed_mps {
                        return Ok((true, Some(rec.t)));
                    }
                }
                prev = Some((rec.t, p));
            }
            Ok((false, None))
        }
    }
}

const ACTION_STREAM_HEADER: &str = "actionstream v1";

/// Writes an action stream: header, space tag, then one `t a0 a1 ...`
/// record per line.
pub fn write_action_stream(
    path: &Path,
    space: ActionSpace,
    records: &[(f64, DVector<f64>)],
) -> Result<(), HarnessError> {
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let emit = |w: &mut dyn Write| -> std::io::Result<()> {
        writeln!(w, "{ACTION_STREAM_HEADER}")?;
        writeln!(w, "space {}", space.tag())?;
        for (t, a) in records {
            let fields: Vec<String> = std::iter::once(t.to_string())
                .chain(a.iter().map(|v| v.to_string()))
                .collect();
            writeln!(w, "{}", fields.join(" "))?;
        }
        Ok(())
    };
    emit(&mut w).map_err(|e| io_err(path, e))
}

/// Reads a stream written by [`write_action_stream`]; malformed input
/// reports the offending line number.
pub fn read_action_stream(path: &Path) -> Result<(ActionSpace, Vec<(f64, DVector<f64>)>), HarnessError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let parse_err = |line: usize, msg: String| HarnessError::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut space: Option<ActionSpace> = None;
    let mut saw_header = false;
    let mut records = Vec::new();
    let mut dim: Option<usize> = None;
    for (no, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let no = no + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        if !saw_header {
            if t != ACTION_STREAM_HEADER {
                return Err(parse_err(no, format!("expected header '{ACTION_STREAM_HEADER}'")));
            }
            saw_header = true;
            continue;
        }
        if space.is_none() {
            let mut it = t.split_whitespace();
            if it.next() != Some("space") {
                return Err(parse_err(no, "expected 'space <tag>'".into()));
            }
            let tag = it.next().ok_or_else(|| parse_err(no, "missing space tag".into()))?;
            space = Some(
                ActionSpace::from_tag(tag)
                    .ok_or_else(|| parse_err(no, format!("unknown action space '{tag}'")))?,
            );
            continue;
        }
        let vals: Result<Vec<f64>, _> = t.split_whitespace().map(str::parse).collect();
        let vals = vals.map_err(|e| parse_err(no, format!("bad float: {e}")))?;
        if vals.len() < 2 {
            return Err(parse_err(no, "record needs a time and at least one component".into()));
        }
        let d = vals.len() - 1;
        if *dim.get_or_insert(d) != d {
            return Err(parse_err(no, format!("inconsistent action dimension {d}")));
        }
        records.push((vals[0], DVector::from_vec(vals[1..].to_vec())));
    }
    if !saw_header {
        return Err(parse_err(0, format!("missing '{ACTION_STREAM_HEADER}' header")));
    }
    let space = space.ok_or_else(|| parse_err(0, "missing 'space' line".into()))?;
    Ok((space, records))
}

/// One serialized substep of the trajectory log.
#[derive(Debug, Serialize, Deserialize)]
pub struct TrajRecordLine {
    pub t: f64,
    pub q: Vec<f64>,
    pub g: Vec<f64>,
    pub drift: f64,
    pub err: f64,
    pub tangent: f64,
    pub safe: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub null_res: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ortho_res: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrajHeader {
    pub format: String,
    pub version: u32,
    pub scenario: String,
    pub mode: String,
    pub seed: u64,
}

/// Writes a line-delimited trajectory log: a JSON header line followed by
/// one JSON record per substep.
pub fn write_trajectory_log(
    path: &Path,
    scenario: &str,
    mode: &str,
    seed: u64,
    records: &[SubstepRecord],
) -> Result<(), HarnessError> {
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let header = TrajHeader {
        format: "safeact-trajlog".into(),
        version: 1,
        scenario: scenario.into(),
        mode: mode.into(),
        seed,
    };
    let emit = |w: &mut dyn Write| -> std::io::Result<()> {
        writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        for rec in records {
            let line = TrajRecordLine {
                t: rec.t,
                q: rec.q.iter().cloned().collect(),
                g: rec.g.iter().cloned().collect(),
                drift: rec.drift_norm,
                err: rec.err_norm,
                tangent: rec.tangent_norm,
                safe: rec.safe_norm,
                null_res: rec.null_residual,
                ortho_res: rec.ortho_residual,
            };
            writeln!(w, "{}", serde_json::to_string(&line).expect("record serializes"))?;
        }
        Ok(())
    };
    emit(&mut w).map_err(|e| io_err(path, e))
}

/// Reads a log written by [`write_trajectory_log`].
pub fn read_trajectory_log(path: &Path) -> Result<(TrajHeader, Vec<TrajRecordLine>), HarnessError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let parse_err = |line: usize, msg: String| HarnessError::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut lines = reader.lines().enumerate();
    let (_, first) = lines
        .next()
        .ok_or_else(|| parse_err(0, "empty log".into()))?;
    let first = first.map_err(|e| io_err(path, e))?;
    let header: TrajHeader =
        serde_json::from_str(&first).map_err(|e| parse_err(1, format!("bad header: {e}")))?;
    let mut records = Vec::new();
    for (no, line) in lines {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajRecordLine = serde_json::from_str(&line)
            .map_err(|e| parse_err(no + 1, format!("bad record: {e}")))?;
        records.push(rec);
    }
    Ok((header, records))
}
