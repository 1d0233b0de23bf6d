use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{pose_array, OdometryTrajectory, TagObservation};
use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::Pose;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryRecord {
    t: f64,
    #[serde(with = "pose_array")]
    pose: Pose,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionRecord {
    t: f64,
    id: u32,
    #[serde(with = "pose_array")]
    pose_in_camera: Pose,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionFile {
    trajectory: Vec<TrajectoryRecord>,
    detections: Vec<DetectionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    intrinsics: Option<CameraIntrinsics>,
    /// Tag edge length in meters, shared by every tag of the session.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tag_size: Option<f64>,
}

/// A recorded session: odometry, tag detections and optional camera metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub trajectory: OdometryTrajectory,
    pub detections: Vec<TagObservation>,
    pub intrinsics: Option<CameraIntrinsics>,
    pub tag_size: Option<f64>,
}

/// Default tag edge length when the session does not state one.
pub const DEFAULT_TAG_SIZE: f64 = 0.16;

impl Session {
    pub fn tag_size(&self) -> f64 {
        self.tag_size.unwrap_or(DEFAULT_TAG_SIZE)
    }
}

pub fn load_session(path: &Path) -> Result<Session> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_session(&text)
}

pub fn parse_session(text: &str) -> Result<Session> {
    let file: SessionFile = serde_json::from_str(text)?;
    let trajectory =
        OdometryTrajectory::new(file.trajectory.into_iter().map(|r| (r.t, r.pose)).collect())?;
    let mut offenders = Vec::new();
    let mut detections = Vec::with_capacity(file.detections.len());
    for d in file.detections {
        match trajectory.index_of(d.t) {
            Some(i) => detections.push(TagObservation {
                frame_time: trajectory.samples()[i].0,
                tag_id: d.id,
                pose_in_camera: d.pose_in_camera,
            }),
            None => offenders.push(format!("tag {} at t={}", d.id, d.t)),
        }
    }
    if !offenders.is_empty() {
        return Err(Error::Validation(format!(
            "detections reference unknown timestamps: {}",
            offenders.join(", ")
        )));
    }
    if let Some(k) = &file.intrinsics {
        k.validate()?;
    }
    if let Some(s) = file.tag_size {
        if !(s > 0.0) {
            return Err(Error::Validation("tag_size must be positive".into()));
        }
    }
    Ok(Session {
        trajectory,
        detections,
        intrinsics: file.intrinsics,
        tag_size: file.tag_size,
    })
}

pub fn save_session(path: &Path, session: &Session) -> Result<()> {
    let file = SessionFile {
        trajectory: session
            .trajectory
            .samples()
            .iter()
            .map(|&(t, pose)| TrajectoryRecord { t, pose })
            .collect(),
        detections: session
            .detections
            .iter()
            .map(|d| DetectionRecord {
                t: d.frame_time,
                id: d.tag_id,
                pose_in_camera: d.pose_in_camera,
            })
            .collect(),
        intrinsics: session.intrinsics,
        tag_size: session.tag_size,
    };
    super::write_json(path, &file)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TagRecord {
    pub id: u32,
    #[serde(with = "pose_array")]
    pub pose_in_map: Pose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub t: f64,
    #[serde(with = "pose_array")]
    pub pose_in_map: Pose,
}

/// Pipeline output: tag and camera poses in the map frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultFile {
    pub tags: Vec<TagRecord>,
    pub frames: Vec<FrameRecord>,
}
