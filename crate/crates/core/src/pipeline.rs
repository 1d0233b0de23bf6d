//! End-to-end processing: landmark SLAM, plane extraction, global
//! registration and NID refinement, with a per-stage timing report.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::io::{frame_file_name, read_pgm, FrameRecord, PointCloudMap, ResultFile, Session, TagModel, TagRecord};
use crate::nid::{refine, NidConfig, RefineReport, RefineStatus};
use crate::planes::{extract_planes, PlaneConfig, PlaneSegment};
use crate::pose_graph::{build_graph, optimize, FactorGraph, GraphConfig, OptimizeReport};
use crate::registration::{register, Registration, RegistrationConfig};
use crate::sim::{SimConfig, SuccessThresholds};

/// Every tunable of every stage in one document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub planes: PlaneConfig,
    pub registration: RegistrationConfig,
    pub graph: GraphConfig,
    pub nid: NidConfig,
    pub simulation: SimConfig,
    pub evaluation: SuccessThresholds,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let config: Self = crate::io::read_json(path)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.nid.validate()?;
        self.simulation.validate()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PipelineOptions {
    pub skip_refinement: bool,
    /// Emit the registered result when refinement fails instead of failing.
    pub allow_partial: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub step: String,
    pub process: String,
    pub ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineStatus {
    Refined,
    /// Refinement ran but no alignment survived; poses are the registered ones.
    NoInliers,
    /// Refinement was not requested.
    Registered,
    /// Refinement failed and `allow_partial` kept the registered poses.
    Partial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub status: PipelineStatus,
    pub timings: Vec<StageTiming>,
    pub slam: OptimizeReport,
    pub planes: usize,
    pub registration: Registration,
    pub refinement: Option<RefineReport>,
    pub refinement_error: Option<String>,
}

impl PipelineReport {
    pub fn total_ms(&self) -> f64 {
        self.timings.iter().map(|t| t.ms).sum()
    }
}

impl fmt::Display for PipelineReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24}{:<30}{:>12}", "Step", "Process", "Time [s]")?;
        let mut last = "";
        for t in &self.timings {
            let step = if t.step == last { "" } else { t.step.as_str() };
            writeln!(f, "{:<24}{:<30}{:>12.3}", step, t.process, t.ms / 1e3)?;
            last = &t.step;
        }
        write!(f, "{:<24}{:<30}{:>12.3}", "", "Total", self.total_ms() / 1e3)
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub result: ResultFile,
    pub graph: FactorGraph,
    pub planes: Vec<PlaneSegment>,
    pub report: PipelineReport,
}

pub const STEP_SLAM: &str = "Tag pose estimation";
pub const STEP_REGISTRATION: &str = "Global registration";
pub const STEP_REFINEMENT: &str = "Estimation refinement";

/// Loads the frame of every trajectory time that has a PGM in `dir`.
pub fn load_frames(dir: &Path, times: impl IntoIterator<Item = f64>) -> Result<Vec<(f64, GrayImage)>> {
    if !dir.is_dir() {
        return Err(Error::InvalidInput(format!("images directory {} does not exist", dir.display())));
    }
    let mut frames = Vec::new();
    for t in times {
        let path = dir.join(frame_file_name(t));
        if path.is_file() {
            frames.push((t, read_pgm(&path)?));
        }
    }
    frames.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(frames)
}

/// Tag models from the optimized graph, in the graph's frame.
pub fn graph_tags(graph: &FactorGraph, edge_length: f64) -> Result<Vec<TagModel>> {
    graph
        .tag_ids
        .iter()
        .zip(&graph.tags)
        .map(|(&id, &pose)| TagModel::new(id, edge_length, pose))
        .collect()
}

pub fn result_from_graph(graph: &FactorGraph) -> ResultFile {
    ResultFile {
        tags: graph
            .tag_ids
            .iter()
            .zip(&graph.tags)
            .map(|(&id, &pose_in_map)| TagRecord { id, pose_in_map })
            .collect(),
        frames: graph
            .camera_times
            .iter()
            .zip(&graph.cameras)
            .map(|(&t, &pose_in_map)| FrameRecord { t, pose_in_map })
            .collect(),
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        error: Box::new(e),
    })
}

fn check_frames(session: &Session, frames: Option<&[(f64, GrayImage)]>) -> Result<()> {
    let Some(frames) = frames else {
        return Err(Error::InvalidInput("refinement requested but no camera images were given".into()));
    };
    let Some(k) = &session.intrinsics else {
        return Err(Error::InvalidInput("refinement requires camera intrinsics in the session".into()));
    };
    if let Some((t, img)) = frames.iter().find(|(_, img)| img.width() != k.width || img.height() != k.height) {
        return Err(Error::InvalidInput(format!(
            "frame at t={t} is {}x{}, intrinsics say {}x{}",
            img.width(),
            img.height(),
            k.width,
            k.height
        )));
    }
    Ok(())
}

/// Runs every stage in order. `frames` must be sorted by time; it may be
/// `None` only when refinement is skipped.
pub fn run_pipeline(
    map: &PointCloudMap,
    session: &Session,
    frames: Option<&[(f64, GrayImage)]>,
    config: &PipelineConfig,
    options: PipelineOptions,
) -> Result<PipelineOutput> {
    config.validate()?;
    map.validate()?;
    if !options.skip_refinement {
        check_frames(session, frames)?;
    }
    let mut timings = Vec::new();
    let mut time = |step: &str, process: &str, ms: f64| {
        timings.push(StageTiming {
            step: step.into(),
            process: process.into(),
            ms,
        })
    };

    let t0 = Instant::now();
    let mut graph = stage("pose graph", build_graph(&session.trajectory, &session.detections))?;
    let slam = stage("pose graph", optimize(&mut graph, &config.graph))?;
    time(STEP_SLAM, "Pose graph optimization", ms(t0));

    let t1 = Instant::now();
    let planes = stage("plane extraction", extract_planes(map, &config.planes))?;
    time(STEP_REGISTRATION, "Plane extraction", ms(t1));

    let tags = graph_tags(&graph, session.tag_size())?;
    let registration = stage("registration", register(&tags, &planes, &config.registration))?;
    let d = &registration.diagnostics;
    time(STEP_REGISTRATION, "Consistency graph creation", d.graph_ms);
    time(STEP_REGISTRATION, "Maximum clique finding", d.clique_ms);
    time(STEP_REGISTRATION, "Transformation optimization", d.transform_ms);
    graph.transform(&registration.map_from_tag);

    let mut status = PipelineStatus::Registered;
    let mut refinement = None;
    let mut refinement_error = None;
    if !options.skip_refinement {
        let (Some(frames), Some(k)) = (frames, &session.intrinsics) else {
            return Err(Error::InvalidInput("refinement needs frames and intrinsics".into()));
        };
        match refine(&mut graph, map, frames, k, &config.nid, &config.graph) {
            Ok(r) => {
                time(STEP_REFINEMENT, "NID camera alignment", r.alignment_ms);
                time(STEP_REFINEMENT, "Outlier filtering", r.filter_ms);
                if r.status == RefineStatus::Refined {
                    time(STEP_REFINEMENT, "Pose graph optimization", r.optimize_ms);
                    status = PipelineStatus::Refined;
                } else {
                    status = PipelineStatus::NoInliers;
                }
                refinement = Some(r);
            }
            Err(e) if options.allow_partial => {
                log::warn!("refinement failed, keeping registered poses: {e}");
                status = PipelineStatus::Partial;
                refinement_error = Some(e.to_string());
            }
            Err(e) => return Err(Error::Stage {
                stage: "refinement",
                error: Box::new(e),
            }),
        }
    }

    Ok(PipelineOutput {
        result: result_from_graph(&graph),
        graph,
        report: PipelineReport {
            status,
            timings,
            slam,
            planes: planes.len(),
            registration,
            refinement,
            refinement_error,
        },
        planes,
    })
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::pose_error;
    use crate::sim::{generate_scene, synthesize_measurements, NoiseConfig};

    #[test]
    fn config_defaults_and_unknown_keys() {
        let c: PipelineConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, PipelineConfig::default());
        assert_eq!(c.graph.max_iterations, 100);
        assert_eq!(c.nid.bins, 16);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"nid": {"binz": 3}}"#).is_err());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"extra": 1}"#).is_err());
        let c: PipelineConfig = serde_json::from_str(r#"{"registration": {"th_trans": 0.3}}"#).unwrap();
        assert_eq!(c.registration.th_trans, 0.3);
        assert_eq!(c.registration.th_rot_deg, RegistrationConfig::default().th_rot_deg);
    }

    #[test]
    fn missing_frames_fail_before_optimization() {
        let scene = generate_scene(&SimConfig::default(), 1).unwrap();
        let m = synthesize_measurements(&scene, &NoiseConfig::zero()).unwrap();
        let err = run_pipeline(&scene.map, &m.session, None, &PipelineConfig::default(), PipelineOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)), "{err}");
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_frames(&dir.path().join("nope"), [0.0]), Err(Error::InvalidInput(_))));
    }

    fn max_tag_error(result: &ResultFile, truth: &crate::sim::Truth) -> f64 {
        result
            .tags
            .iter()
            .map(|r| {
                let t = truth.tags.iter().find(|t| t.id == r.id).unwrap();
                pose_error(&r.pose_in_map, &t.pose_in_map).translation
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_noise_end_to_end() {
        let config = PipelineConfig {
            nid: NidConfig {
                max_frames: 20,
                ..Default::default()
            },
            ..Default::default()
        };
        let scene = generate_scene(&config.simulation, 1).unwrap();
        let m = synthesize_measurements(&scene, &NoiseConfig::zero()).unwrap();
        let truth = scene.truth();

        let registered = PipelineOptions {
            skip_refinement: true,
            ..Default::default()
        };
        let out = run_pipeline(&scene.map, &m.session, None, &config, registered).unwrap();
        assert!(max_tag_error(&out.result, &truth) < 1e-3);

        let out = run_pipeline(&scene.map, &m.session, Some(&m.frames), &config, PipelineOptions::default()).unwrap();
        assert_eq!(out.report.status, PipelineStatus::Refined);
        // histogram NID has a bias of a few millimeters at 16 bins
        assert!(max_tag_error(&out.result, &truth) < 5e-3);
        let rows: Vec<_> = out.report.timings.iter().map(|t| (&t.step, &t.process)).collect();
        let mut unique = rows.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), rows.len());
        assert_eq!(rows.len(), 8);
    }

    #[test]
    fn skip_refinement_keeps_registered_poses() {
        let config = PipelineConfig::default();
        let scene = generate_scene(&config.simulation, 3).unwrap();
        let m = synthesize_measurements(&scene, &NoiseConfig::low()).unwrap();
        let options = PipelineOptions {
            skip_refinement: true,
            ..Default::default()
        };
        let out = run_pipeline(&scene.map, &m.session, None, &config, options).unwrap();
        assert_eq!(out.report.status, PipelineStatus::Registered);
        assert!(out.report.refinement.is_none());
        assert!(out.report.timings.iter().all(|t| t.step != STEP_REFINEMENT));

        let mut graph = build_graph(&m.session.trajectory, &m.session.detections).unwrap();
        optimize(&mut graph, &config.graph).unwrap();
        graph.transform(&out.report.registration.map_from_tag);
        assert_eq!(out.result, result_from_graph(&graph));
    }
}
