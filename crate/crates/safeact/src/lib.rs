//! Safety layer for velocity-controlled robot arms.
//!
//! `safeact` wraps any upstream velocity policy and keeps a set of
//! differentiable inequality constraints satisfied by acting on the tangent
//! space of the slack-augmented constraint manifold. The crate also ships
//! the surrounding tooling: serial-chain kinematics, the constraint
//! families used by the two reference scenarios, visual constraint
//! generation from masked depth images, and a deterministic episode
//! harness for filtered-vs-unfiltered comparisons.

pub mod config;
pub mod constraints;
pub mod filter;
pub mod geometry;
pub mod harness;
pub mod kinematics;

pub use config::{load_scenario, parse_scenario, validate_scenario, Check, ConfigError, ScenarioFile};
pub use constraints::{
    airhockey_blocks, obb_distance, AirHockeyBlock, AirHockeyParams, ConstraintBlock,
    ConstraintError, ConstraintSet, JointLimitBlock, ObbBlock, OrientedBBox, WorkspaceBlock,
};
pub use filter::{
    filter_action, multirate_execute, FilterConfig, FilterError, FilterStep, MultirateLog,
    SafeActionBreakdown, SubstepRecord, TangentBasis,
};
pub use geometry::{
    export_obbs, fit_obb, lift_mask, load_obbs, merge_views, project_point, CameraModel,
    GeometryError, MaskedDepth,
};
pub use harness::{
    run_episode, ActionSpace, EpisodeLog, EpisodeMetrics, HarnessError, IkParams, PolicySpec,
    Scenario, SuccessSpec,
};
pub use kinematics::{
    damped_pinv_ik, damped_pinv_solve, integrate, Attachment, JointDescriptor, JointState,
    KinematicsError, SerialChain, Sphere, SphereCover,
};
