//! Implementation of the `safeact` CLI commands: seeded episode sweeps
//! with metrics tables, box fitting from masked depth views, and scenario
//! validation. The binary in `main.rs` is a thin argument parser over
//! these functions.

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use safeact::config::{load_scenario, to_toml_string, validate_scenario, Check};
use safeact::geometry::{export_obbs, fit_obb, lift_mask, merge_views, read_maskdepth, CameraModel};
use safeact::harness::{run_episode, EpisodeMetrics, Scenario};
use serde::Deserialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Which execution modes a sweep covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Filtered,
    Unfiltered,
    Both,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "filtered" => Ok(Mode::Filtered),
            "unfiltered" => Ok(Mode::Unfiltered),
            "both" => Ok(Mode::Both),
            other => bail!("unknown mode '{other}' (expected filtered|unfiltered|both)"),
        }
    }

    fn passes(&self) -> Vec<bool> {
        match self {
            Mode::Filtered => vec![true],
            Mode::Unfiltered => vec![false],
            Mode::Both => vec![true, false],
        }
    }
}

/// Parameters of one `run` invocation.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub scenario: PathBuf,
    pub episodes: usize,
    pub seed: u64,
    pub mode: Mode,
    pub out: PathBuf,
    /// Write per-episode trajectory logs next to the metrics table.
    pub episode_logs: bool,
}

/// Aggregates of one mode of a sweep.
#[derive(Debug, Clone)]
pub struct ModeSummary {
    pub filtered: bool,
    pub episodes: usize,
    pub completed: usize,
    pub success_rate: f64,
    pub safe_success_rate: f64,
    pub episodes_with_violation: usize,
    pub mean_max_violation: f64,
    pub metrics: Vec<EpisodeMetrics>,
}

/// Everything a `run` produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub scenario_name: String,
    pub metrics_path: PathBuf,
    pub config_path: PathBuf,
    pub log_paths: Vec<PathBuf>,
    pub summaries: Vec<ModeSummary>,
}

impl RunOutput {
    pub fn all_completed(&self) -> bool {
        self.summaries
            .iter()
            .all(|s| s.completed == s.episodes)
    }

    pub fn summary(&self, filtered: bool) -> Option<&ModeSummary> {
        self.summaries.iter().find(|s| s.filtered == filtered)
    }
}

/// Applies the `SAFEACT_SCENARIO` override to a scenario path.
pub fn resolve_scenario_path(requested: &Path) -> PathBuf {
    match std::env::var_os("SAFEACT_SCENARIO") {
        Some(p) if !p.is_empty() => PathBuf::from(p),
        _ => requested.to_path_buf(),
    }
}

fn print_effective_config(sc: &Scenario) {
    println!(
        "scenario '{}': policy {} Hz, filter {} Hz, chunk {}, duration {} s",
        sc.name, sc.policy_rate_hz, sc.filter_rate_hz, sc.chunk_size, sc.duration_s
    );
    println!(
        "filter: slack beta {}, slack tolerance {}, error gain {} /s, drift clip {:?}, substep {} s",
        sc.filter.slack_beta,
        sc.filter.slack_tolerance,
        sc.filter.error_gain,
        sc.filter.drift_clip,
        sc.filter.substep_dt
    );
    println!(
        "constraints: {} blocks, {} rows over {} joints",
        sc.constraints.blocks().len(),
        sc.constraints.total_rows(),
        sc.constraints.joint_dim()
    );
}

/// Runs a seeded sweep and writes the metrics table, the effective config,
/// and (optionally) per-episode trajectory logs.
pub fn cmd_run(spec: &RunSpec) -> Result<RunOutput> {
    let path = resolve_scenario_path(&spec.scenario);
    let (scenario, file) =
        load_scenario(&path).with_context(|| format!("loading scenario {}", path.display()))?;
    if spec.episodes == 0 {
        bail!("episodes must be >= 1");
    }
    print_effective_config(&scenario);
    std::fs::create_dir_all(&spec.out)
        .with_context(|| format!("creating output directory {}", spec.out.display()))?;

    let config_path = spec.out.join("effective_config.toml");
    std::fs::write(&config_path, to_toml_string(&file))
        .with_context(|| format!("writing {}", config_path.display()))?;

    // Episodes are independent; fan them out and write in episode order.
    let jobs: Vec<(bool, usize)> = spec
        .mode
        .passes()
        .into_iter()
        .flat_map(|f| (0..spec.episodes).map(move |i| (f, i)))
        .collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|&(filtered, idx)| {
            let seed = spec.seed + idx as u64;
            run_episode(&scenario, filtered, seed).map(|(m, l)| (filtered, idx, m, l))
        })
        .collect::<std::result::Result<_, _>>()?;

    let metrics_path = spec.out.join("metrics.csv");
    let block_labels: Vec<String> = scenario
        .constraints
        .spans()
        .iter()
        .map(|s| s.label.clone())
        .collect();
    let mut writer = csv::Writer::from_path(&metrics_path)
        .with_context(|| format!("writing {}", metrics_path.display()))?;
    let mut header = vec![
        "mode".to_string(),
        "episode".to_string(),
        "seed".to_string(),
        "completed".to_string(),
        "success".to_string(),
        "safe".to_string(),
        "violation_steps".to_string(),
        "max_violation".to_string(),
        "duration_to_success_s".to_string(),
    ];
    header.extend(block_labels.iter().map(|l| format!("max[{l}]")));
    writer.write_record(&header)?;

    let mut log_paths = Vec::new();
    let mut summaries = Vec::new();
    for filtered in spec.mode.passes() {
        let mode_name = if filtered { "filtered" } else { "unfiltered" };
        let mut mode_metrics: Vec<EpisodeMetrics> = Vec::with_capacity(spec.episodes);
        for &(f, idx, ref metrics, ref log) in &results {
            if f != filtered {
                continue;
            }
            let mut row = vec![
                mode_name.to_string(),
                idx.to_string(),
                metrics.seed.to_string(),
                metrics.completed.to_string(),
                metrics.success.to_string(),
                metrics.safe.to_string(),
                metrics.violation_steps.to_string(),
                metrics.max_violation.to_string(),
                metrics
                    .duration_to_success
                    .map(|d| d.to_string())
                    .unwrap_or_default(),
            ];
            row.extend(metrics.block_max.iter().map(|(_, v)| v.to_string()));
            writer.write_record(&row)?;
            if spec.episode_logs {
                let log_path = spec.out.join(format!("ep{idx:04}_{mode_name}.jsonl"));
                safeact::harness::write_trajectory_log(
                    &log_path,
                    &scenario.name,
                    mode_name,
                    metrics.seed,
                    &log.records,
                )?;
                log_paths.push(log_path);
            }
            mode_metrics.push(metrics.clone());
        }

        let n = mode_metrics.len();
        let completed = mode_metrics.iter().filter(|m| m.completed).count();
        let successes = mode_metrics.iter().filter(|m| m.success).count();
        let safe_successes = mode_metrics.iter().filter(|m| m.success && m.safe).count();
        let with_violation = mode_metrics.iter().filter(|m| !m.safe).count();
        let mean_max = if n > 0 {
            mode_metrics.iter().map(|m| m.max_violation).sum::<f64>() / n as f64
        } else {
            f64::NAN
        };
        let success_rate = successes as f64 / n.max(1) as f64;
        let safe_success_rate = safe_successes as f64 / n.max(1) as f64;

        let mut per_block_max = vec![f64::NEG_INFINITY; block_labels.len()];
        for m in &mode_metrics {
            for (i, (_, v)) in m.block_max.iter().enumerate() {
                per_block_max[i] = per_block_max[i].max(*v);
            }
        }
        let mut row = vec![
            mode_name.to_string(),
            "summary".to_string(),
            String::new(),
            completed.to_string(),
            success_rate.to_string(),
            safe_success_rate.to_string(),
            with_violation.to_string(),
            mean_max.to_string(),
            String::new(),
        ];
        row.extend(per_block_max.iter().map(|v| v.to_string()));
        writer.write_record(&row)?;

        println!(
            "{mode_name}: {n} episodes, success rate {success_rate:.3}, safe-success rate {safe_success_rate:.3}, \
             episodes with violation {with_violation}, mean max violation {mean_max:.6}"
        );
        summaries.push(ModeSummary {
            filtered,
            episodes: n,
            completed,
            success_rate,
            safe_success_rate,
            episodes_with_violation: with_violation,
            mean_max_violation: mean_max,
            metrics: mode_metrics,
        });
    }
    writer.flush()?;

    Ok(RunOutput {
        scenario_name: scenario.name.clone(),
        metrics_path,
        config_path,
        log_paths,
        summaries,
    })
}

#[derive(Debug, Deserialize)]
struct ViewCamera {
    fx_px: f64,
    fy_px: f64,
    cx_px: f64,
    cy_px: f64,
    position_m: [f64; 3],
    rotation_rpy_rad: [f64; 3],
}

#[derive(Debug, Deserialize)]
struct ViewInstance {
    label: String,
    maskdepth: PathBuf,
}

/// One camera view file: intrinsics, pose, and per-instance rasters.
#[derive(Debug, Deserialize)]
struct ViewFile {
    camera: ViewCamera,
    #[serde(default)]
    instances: Vec<ViewInstance>,
}

/// Result of `fitbox`: one box per instance label.
#[derive(Debug)]
pub struct FitReport {
    pub boxes: Vec<(String, safeact::OrientedBBox)>,
    pub out_path: PathBuf,
}

/// Lifts every instance mask of every view, merges per label across views
/// and fits one oriented box per label. Labels sort alphabetically in the
/// output file.
pub fn cmd_fitbox(cams: &[PathBuf], out: &Path, voxel_m: Option<f64>) -> Result<FitReport> {
    if cams.is_empty() {
        bail!("at least one camera view file is required");
    }
    let mut per_label: BTreeMap<String, Vec<Vec<nalgebra::Vector3<f64>>>> = BTreeMap::new();
    for cam_path in cams {
        let text = std::fs::read_to_string(cam_path)
            .with_context(|| format!("reading {}", cam_path.display()))?;
        let view: ViewFile = toml::from_str(&text)
            .with_context(|| format!("parsing {}", cam_path.display()))?;
        let pose = nalgebra::Isometry3::from_parts(
            nalgebra::Translation3::new(
                view.camera.position_m[0],
                view.camera.position_m[1],
                view.camera.position_m[2],
            ),
            nalgebra::UnitQuaternion::from_euler_angles(
                view.camera.rotation_rpy_rad[0],
                view.camera.rotation_rpy_rad[1],
                view.camera.rotation_rpy_rad[2],
            ),
        );
        let camera = CameraModel::new(
            view.camera.fx_px,
            view.camera.fy_px,
            view.camera.cx_px,
            view.camera.cy_px,
            pose,
        )?;
        let base = cam_path.parent().unwrap_or_else(|| Path::new("."));
        for inst in &view.instances {
            let raster_path = if inst.maskdepth.is_relative() {
                base.join(&inst.maskdepth)
            } else {
                inst.maskdepth.clone()
            };
            let md = read_maskdepth(&raster_path)?;
            per_label
                .entry(inst.label.clone())
                .or_default()
                .push(lift_mask(&camera, &md));
        }
    }

    let mut boxes = Vec::new();
    for (label, sets) in per_label {
        let merged = merge_views(&sets, voxel_m);
        if merged.is_empty() {
            println!("instance '{label}': no valid masked pixels, skipping");
            continue;
        }
        let obb = fit_obb(&merged)?;
        println!(
            "instance '{label}': {} points, extents [{:.4}, {:.4}, {:.4}] m, volume {:.6} m^3",
            merged.len(),
            obb.extents.x,
            obb.extents.y,
            obb.extents.z,
            obb.volume()
        );
        boxes.push((label, obb));
    }
    if boxes.is_empty() {
        println!("no instances produced any points; writing an empty box file");
    }
    let plain: Vec<safeact::OrientedBBox> = boxes.iter().map(|(_, b)| b.clone()).collect();
    export_obbs(out, &plain)?;
    Ok(FitReport {
        boxes,
        out_path: out.to_path_buf(),
    })
}

/// Loads a scenario and reports its validation checks.
pub fn cmd_validate(scenario: &Path) -> Result<Vec<Check>> {
    let path = resolve_scenario_path(scenario);
    let (sc, _) =
        load_scenario(&path).with_context(|| format!("loading scenario {}", path.display()))?;
    let checks = validate_scenario(&sc);
    for c in &checks {
        println!(
            "{} {:<28} {}",
            if c.pass { "ok  " } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    Ok(checks)
}
