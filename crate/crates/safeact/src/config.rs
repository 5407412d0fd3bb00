//! Scenario config files: one human-readable TOML file per scenario, with
//! units spelled out in key names (`*_m`, `*_rad`, `*_hz`), plus the
//! validation checks behind the `validate` CLI command.

use crate::constraints::{
    finite_difference_check, AirHockeyBlock, AirHockeyParams, ConstraintBlock, ConstraintSet,
    JointLimitBlock, ObbBlock, OrientedBBox, WorkspaceBlock,
};
use crate::filter::FilterConfig;
use crate::geometry::load_obbs;
use crate::harness::{IkParams, PolicySpec, Scenario, SuccessSpec};
use crate::kinematics::{Attachment, JointDescriptor, JointState, SerialChain, Sphere, SphereCover};
use nalgebra::{DVector, Isometry3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Toml {
        path: String,
        #[source]
        source: Box<toml::de::Error>,
    },
    #[error("invalid scenario config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Kinematics(#[from] crate::kinematics::KinematicsError),
    #[error(transparent)]
    Constraint(#[from] crate::constraints::ConstraintError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Filter(#[from] crate::filter::FilterError),
    #[error(transparent)]
    Harness(#[from] crate::harness::HarnessError),
}

fn default_rpy() -> [f64; 3] {
    [0.0; 3]
}

fn default_null_rank_tol() -> f64 {
    1e-10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointEntry {
    pub axis: [f64; 3],
    pub offset_xyz_m: [f64; 3],
    #[serde(default = "default_rpy")]
    pub offset_rpy_rad: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainSection {
    #[serde(default = "default_rpy")]
    pub base_xyz_m: [f64; 3],
    #[serde(default = "default_rpy")]
    pub base_rpy_rad: [f64; 3],
    pub q_min_rad: Vec<f64>,
    pub q_max_rad: Vec<f64>,
    pub joints: Vec<JointEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SphereEntry {
    pub link: usize,
    pub offset_xyz_m: [f64; 3],
    pub radius_m: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct CoverSection {
    #[serde(default)]
    pub spheres: Vec<SphereEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterSection {
    pub slack_beta: f64,
    pub slack_tolerance: f64,
    pub error_gain_hz: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift_clip_rad_s: Option<f64>,
    #[serde(default = "default_null_rank_tol")]
    pub null_rank_tol: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IkSection {
    pub attachment_link: usize,
    pub attachment_offset_xyz_m: [f64; 3],
    pub damping: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action_clip_rad_s: Option<f64>,
    #[serde(default)]
    pub vertical_hold: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitialSection {
    pub q_rad: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintEntry {
    JointLimits,
    Workspace {
        x_min_m: [f64; 3],
        x_max_m: [f64; 3],
    },
    Obb {
        center_m: [f64; 3],
        #[serde(default = "default_rpy")]
        rotation_rpy_rad: [f64; 3],
        extents_m: [f64; 3],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
    },
    /// Boxes from a file in the geometry module's export format.
    ObbFile { path: PathBuf },
    AirHockey {
        ee_link: usize,
        ee_offset_xyz_m: [f64; 3],
        wrist_link: usize,
        wrist_offset_xyz_m: [f64; 3],
        elbow_link: usize,
        elbow_offset_xyz_m: [f64; 3],
        z_low_m: f64,
        z_high_m: f64,
        x_low_m: f64,
        y_low_m: f64,
        y_high_m: f64,
        z_wrist_low_m: f64,
        z_elbow_low_m: f64,
    },
}

/// On-disk scenario description. `Scenario` is built from this.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub name: String,
    pub duration_s: f64,
    pub policy_rate_hz: f64,
    pub filter_rate_hz: f64,
    pub chunk_size: usize,
    pub chain: ChainSection,
    #[serde(default)]
    pub cover: CoverSection,
    pub filter: FilterSection,
    pub ik: IkSection,
    pub initial: InitialSection,
    #[serde(default)]
    pub constraints: Vec<ConstraintEntry>,
    pub policy: PolicySpec,
    pub success: SuccessSpec,
}

fn rpy_to_iso(xyz: [f64; 3], rpy: [f64; 3]) -> Isometry3<f64> {
    Isometry3::from_parts(
        nalgebra::Translation3::new(xyz[0], xyz[1], xyz[2]),
        UnitQuaternion::from_euler_angles(rpy[0], rpy[1], rpy[2]),
    )
}

/// Parses a scenario from TOML text. Relative file references (box files,
/// replay streams) resolve against `base_dir`. Returns the built scenario
/// together with the normalized file form used for effective-config dumps.
pub fn parse_scenario(
    text: &str,
    base_dir: &Path,
    origin: &str,
) -> Result<(Scenario, ScenarioFile), ConfigError> {
    let mut file: ScenarioFile = toml::from_str(text).map_err(|e| ConfigError::Toml {
        path: origin.to_string(),
        source: Box::new(e),
    })?;

    // Normalize relative paths right away so dumps are location-free.
    for entry in &mut file.constraints {
        if let ConstraintEntry::ObbFile { path } = entry {
            if path.is_relative() {
                *path = base_dir.join(&path);
            }
        }
    }
    if let PolicySpec::Replay { path } = &mut file.policy {
        if path.is_relative() {
            *path = base_dir.join(&path);
        }
    }

    let scenario = build_scenario(&file)?;
    Ok((scenario, file))
}

/// Loads and builds a scenario from a TOML file.
pub fn load_scenario(path: &Path) -> Result<(Scenario, ScenarioFile), ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_scenario(&text, base, &path.display().to_string())
}

/// Serializes the effective (normalized) config.
pub fn to_toml_string(file: &ScenarioFile) -> String {
    toml::to_string_pretty(file).expect("scenario file serializes")
}

fn build_scenario(file: &ScenarioFile) -> Result<Scenario, ConfigError> {
    let n = file.chain.joints.len();
    if file.chain.q_min_rad.len() != n || file.chain.q_max_rad.len() != n {
        return Err(ConfigError::Invalid(format!(
            "chain has {n} joints but limits of length {}/{}",
            file.chain.q_min_rad.len(),
            file.chain.q_max_rad.len()
        )));
    }
    let joints = file
        .chain
        .joints
        .iter()
        .map(|j| {
            JointDescriptor::new(
                Vector3::new(j.axis[0], j.axis[1], j.axis[2]),
                rpy_to_iso(j.offset_xyz_m, j.offset_rpy_rad),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let chain = Arc::new(SerialChain::new(
        joints,
        rpy_to_iso(file.chain.base_xyz_m, file.chain.base_rpy_rad),
        DVector::from_vec(file.chain.q_min_rad.clone()),
        DVector::from_vec(file.chain.q_max_rad.clone()),
    )?);

    let cover = Arc::new(SphereCover::new(
        file.cover
            .spheres
            .iter()
            .map(|s| Sphere {
                attachment: Attachment::new(
                    s.link,
                    Vector3::new(s.offset_xyz_m[0], s.offset_xyz_m[1], s.offset_xyz_m[2]),
                ),
                radius: s.radius_m,
            })
            .collect(),
    )?);

    let mut blocks: Vec<Arc<dyn ConstraintBlock>> = Vec::new();
    for entry in &file.constraints {
        match entry {
            ConstraintEntry::JointLimits => {
                blocks.push(Arc::new(JointLimitBlock::from_chain(&chain)));
            }
            ConstraintEntry::Workspace { x_min_m, x_max_m } => {
                blocks.push(Arc::new(WorkspaceBlock::new(
                    chain.clone(),
                    cover.clone(),
                    Vector3::new(x_min_m[0], x_min_m[1], x_min_m[2]),
                    Vector3::new(x_max_m[0], x_max_m[1], x_max_m[2]),
                )?));
            }
            ConstraintEntry::Obb {
                center_m,
                rotation_rpy_rad,
                extents_m,
                label,
            } => {
                let rot = UnitQuaternion::from_euler_angles(
                    rotation_rpy_rad[0],
                    rotation_rpy_rad[1],
                    rotation_rpy_rad[2],
                )
                .to_rotation_matrix();
                let obb = OrientedBBox::from_rotation(
                    Vector3::new(center_m[0], center_m[1], center_m[2]),
                    rot,
                    Vector3::new(extents_m[0], extents_m[1], extents_m[2]),
                )?;
                let mut block = ObbBlock::new(chain.clone(), cover.clone(), obb);
                if let Some(label) = label {
                    block = block.with_label(label.clone());
                }
                blocks.push(Arc::new(block));
            }
            ConstraintEntry::ObbFile { path } => {
                for (i, obb) in load_obbs(path)?.into_iter().enumerate() {
                    blocks.push(Arc::new(
                        ObbBlock::new(chain.clone(), cover.clone(), obb)
                            .with_label(format!("obb_file[{i}]")),
                    ));
                }
            }
            ConstraintEntry::AirHockey {
                ee_link,
                ee_offset_xyz_m,
                wrist_link,
                wrist_offset_xyz_m,
                elbow_link,
                elbow_offset_xyz_m,
                z_low_m,
                z_high_m,
                x_low_m,
                y_low_m,
                y_high_m,
                z_wrist_low_m,
                z_elbow_low_m,
            } => {
                let mk = |link: usize, o: &[f64; 3]| {
                    Attachment::new(link, Vector3::new(o[0], o[1], o[2]))
                };
                blocks.push(Arc::new(AirHockeyBlock::new(
                    chain.clone(),
                    mk(*ee_link, ee_offset_xyz_m),
                    mk(*wrist_link, wrist_offset_xyz_m),
                    mk(*elbow_link, elbow_offset_xyz_m),
                    AirHockeyParams {
                        z_low: *z_low_m,
                        z_high: *z_high_m,
                        x_low: *x_low_m,
                        y_low: *y_low_m,
                        y_high: *y_high_m,
                        z_wrist_low: *z_wrist_low_m,
                        z_elbow_low: *z_elbow_low_m,
                    },
                )?));
                blocks.push(Arc::new(JointLimitBlock::from_chain(&chain)));
            }
        }
    }
    let constraints = ConstraintSet::stack(blocks, n)?;

    if !(file.filter_rate_hz > 0.0) {
        return Err(ConfigError::Invalid("filter_rate_hz must be positive".into()));
    }
    let filter = FilterConfig {
        slack_beta: file.filter.slack_beta,
        slack_tolerance: file.filter.slack_tolerance,
        error_gain: file.filter.error_gain_hz,
        drift_clip: file.filter.drift_clip_rad_s,
        substep_dt: 1.0 / file.filter_rate_hz,
        null_rank_tol: file.filter.null_rank_tol,
    };
    filter.validate()?;

    if file.initial.q_rad.len() != n {
        return Err(ConfigError::Invalid(format!(
            "initial q has length {}, chain has {n} joints",
            file.initial.q_rad.len()
        )));
    }
    let initial = JointState::at_rest(DVector::from_vec(file.initial.q_rad.clone()))?;

    let scenario = Scenario {
        name: file.name.clone(),
        chain: chain.clone(),
        cover,
        constraints,
        initial,
        policy: file.policy.clone(),
        policy_rate_hz: file.policy_rate_hz,
        filter_rate_hz: file.filter_rate_hz,
        chunk_size: file.chunk_size,
        duration_s: file.duration_s,
        success: file.success.clone(),
        filter,
        ik: IkParams {
            attachment: Attachment::new(
                file.ik.attachment_link,
                Vector3::new(
                    file.ik.attachment_offset_xyz_m[0],
                    file.ik.attachment_offset_xyz_m[1],
                    file.ik.attachment_offset_xyz_m[2],
                ),
            ),
            damping: file.ik.damping,
            vertical_hold: file.ik.vertical_hold,
        },
        action_clip_rad_s: file.ik.action_clip_rad_s,
    };
    scenario.substeps_per_action()?;
    Ok(scenario)
}

/// One named diagnostic of `validate_scenario`.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            pass,
            detail: detail.into(),
        }
    }
}

/// Scenario sanity checks: rate divisibility, chain and config validity,
/// an interior initial state, and a finite-difference spot check of every
/// constraint block at the initial configuration.
pub fn validate_scenario(sc: &Scenario) -> Vec<Check> {
    let mut checks = Vec::new();

    match sc.substeps_per_action() {
        Ok(s) => checks.push(Check::new(
            "rate_divisibility",
            true,
            format!("{} filter substeps per policy action", s),
        )),
        Err(e) => checks.push(Check::new("rate_divisibility", false, e.to_string())),
    }

    match sc.filter.validate() {
        Ok(()) => {
            let consistent = (sc.filter.substep_dt * sc.filter_rate_hz - 1.0).abs() <= 1e-9;
            checks.push(Check::new(
                "filter_config",
                consistent,
                if consistent {
                    format!(
                        "beta={} tau={} gain={}/s dt={:.6}s",
                        sc.filter.slack_beta,
                        sc.filter.slack_tolerance,
                        sc.filter.error_gain,
                        sc.filter.substep_dt
                    )
                } else {
                    format!(
                        "substep_dt {} inconsistent with filter rate {}",
                        sc.filter.substep_dt, sc.filter_rate_hz
                    )
                },
            ));
        }
        Err(e) => checks.push(Check::new("filter_config", false, e.to_string())),
    }

    let n = sc.chain.n_joints();
    let dims_ok = sc.initial.q.len() == n && sc.initial.is_finite();
    let within = dims_ok
        && (0..n).all(|i| {
            sc.initial.q[i] >= sc.chain.q_min()[i] && sc.initial.q[i] <= sc.chain.q_max()[i]
        });
    checks.push(Check::new(
        "initial_state",
        within,
        if within {
            "finite and within joint limits".to_string()
        } else {
            "initial q outside joint limits or malformed".to_string()
        },
    ));

    if dims_ok {
        let g = sc.constraints.evaluate(&sc.initial.q).g;
        let worst = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let interior = worst <= -sc.filter.slack_tolerance;
        checks.push(Check::new(
            "interior_start",
            interior,
            format!("max g at initial state = {worst:.6}"),
        ));

        let fd = finite_difference_check(&sc.constraints, &sc.initial.q, 1e-6);
        for (label, rel) in fd {
            checks.push(Check::new(
                &format!("jacobian[{label}]"),
                rel <= 1e-4,
                format!("finite-difference rel err {rel:.3e}"),
            ));
        }
    }

    checks.push(Check::new(
        "episode_shape",
        sc.chunk_size >= 1 && sc.duration_s > 0.0,
        format!("chunk={} duration={}s", sc.chunk_size, sc.duration_s),
    ));

    checks
}
