//! Data model and file interchange: point-cloud maps (PLY), sessions and
//! results (JSON), camera frames (PGM).
//!
//! All frames follow the gravity convention: +z is up.

mod pgm;
mod ply;
mod session;

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::Pose;

pub use pgm::{frame_file_name, read_pgm, write_pgm};
pub use ply::{load_map, parse_ply, save_map, write_ply, PlyFormat};
pub use session::{
    load_session, parse_session, save_session, FrameRecord, ResultFile, Session, TagRecord,
};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloudMap {
    pub points: Vec<Vector3<f64>>,
    /// Grayscale in `[0, 1]`.
    pub intensities: Option<Vec<f64>>,
    /// Unit normals.
    pub normals: Option<Vec<Vector3<f64>>>,
}

impl PointCloudMap {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        Self {
            points,
            intensities: None,
            normals: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn intensity(&self, i: usize) -> f64 {
        self.intensities.as_ref().map_or(0.5, |v| v[i])
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidInput(format!("point {i} is not finite")));
        }
        if let Some(v) = &self.intensities {
            if v.len() != self.points.len() {
                return Err(Error::InvalidInput("intensity count mismatch".into()));
            }
        }
        if let Some(n) = &self.normals {
            if n.len() != self.points.len() {
                return Err(Error::InvalidInput("normal count mismatch".into()));
            }
            if let Some(i) = n.iter().position(|n| (n.norm() - 1.0).abs() > 1e-6) {
                return Err(Error::InvalidInput(format!("normal {i} is not unit length")));
            }
        }
        Ok(())
    }
}

/// A single tag detection: tag frame relative to the camera frame at `frame_time`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TagObservation {
    pub frame_time: f64,
    pub tag_id: u32,
    pub pose_in_camera: Pose,
}

/// Camera poses in the odometry world frame, strictly increasing in time.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OdometryTrajectory {
    samples: Vec<(f64, Pose)>,
}

/// Tolerance when matching detection timestamps to trajectory samples.
pub const TIME_EPS: f64 = 1e-9;

impl OdometryTrajectory {
    pub fn new(samples: Vec<(f64, Pose)>) -> Result<Self> {
        for (i, w) in samples.windows(2).enumerate() {
            if !(w[1].0 > w[0].0) {
                return Err(Error::Validation(format!(
                    "trajectory timestamps not strictly increasing at index {} ({} -> {})",
                    i + 1,
                    w[0].0,
                    w[1].0
                )));
            }
        }
        if let Some((t, _)) = samples.iter().find(|(t, _)| !t.is_finite()) {
            return Err(Error::Validation(format!("non-finite timestamp {t}")));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[(f64, Pose)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(|s| s.0)
    }

    pub fn poses(&self) -> impl Iterator<Item = &Pose> + '_ {
        self.samples.iter().map(|s| &s.1)
    }

    /// Index of the sample whose timestamp matches `t` within [`TIME_EPS`].
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let i = self.samples.partition_point(|s| s.0 < t - TIME_EPS);
        (i < self.samples.len() && (self.samples[i].0 - t).abs() <= TIME_EPS).then_some(i)
    }
}

/// A square fiducial tag. The tag frame has its origin at the tag center,
/// the tag lies in its z = 0 plane and +z is the tag normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TagModel {
    pub tag_id: u32,
    pub edge_length: f64,
    pub pose: Pose,
}

impl TagModel {
    pub fn new(tag_id: u32, edge_length: f64, pose: Pose) -> Result<Self> {
        if !(edge_length > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tag {tag_id}: edge length must be positive"
            )));
        }
        Ok(Self {
            tag_id,
            edge_length,
            pose,
        })
    }

    /// Corners counter-clockwise starting at the (+x, +y) corner, then the
    /// center, all in the tag frame.
    pub fn local_sample_points(&self) -> [Vector3<f64>; 5] {
        let h = self.edge_length / 2.0;
        [
            Vector3::new(h, h, 0.0),
            Vector3::new(-h, h, 0.0),
            Vector3::new(-h, -h, 0.0),
            Vector3::new(h, -h, 0.0),
            Vector3::zeros(),
        ]
    }

    /// Sample points expressed in the tag's reference frame.
    pub fn sample_points(&self) -> [Vector3<f64>; 5] {
        self.local_sample_points().map(|p| self.pose.transform_point(&p))
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.pose.transform_vector(&Vector3::z())
    }

    pub fn position(&self) -> Vector3<f64> {
        *self.pose.translation()
    }

    pub fn diagonal(&self) -> f64 {
        self.edge_length * std::f64::consts::SQRT_2
    }
}

/// Serde adapter for poses stored as `[qw, qx, qy, qz, tx, ty, tz]`.
pub mod pose_array {
    use super::*;

    pub fn serialize<S: Serializer>(p: &Pose, s: S) -> std::result::Result<S::Ok, S::Error> {
        p.to_array().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Pose, D::Error> {
        let a = <[f64; 7]>::deserialize(d)?;
        Pose::from_array(&a).map_err(serde::de::Error::custom)
    }
}

/// Serde adapter for `nalgebra::Vector3<f64>` as a plain `[x, y, z]` array.
pub mod vec3_array {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Vector3<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        [v.x, v.y, v.z].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Vector3<f64>, D::Error> {
        let a = <[f64; 3]>::deserialize(d)?;
        Ok(Vector3::new(a[0], a[1], a[2]))
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tag_sample_points_lie_in_tag_plane() {
        let pose = Pose::exp(&crate::Twist::new(
            Vector3::new(1.0, 2.0, 0.5),
            Vector3::new(0.3, -0.2, 1.0),
        ));
        let tag = TagModel::new(4, 0.2, pose).unwrap();
        let n = tag.normal();
        for p in tag.sample_points() {
            assert!((p - tag.position()).dot(&n).abs() < 1e-12);
        }
        let local = tag.local_sample_points();
        assert_eq!(local[0], Vector3::new(0.1, 0.1, 0.0));
        assert_eq!(local[1], Vector3::new(-0.1, 0.1, 0.0));
        assert!(TagModel::new(1, 0.0, Pose::identity()).is_err());
    }

    #[test]
    fn trajectory_index_lookup() {
        let traj = OdometryTrajectory::new(vec![
            (0.0, Pose::identity()),
            (0.1, Pose::identity()),
            (0.2, Pose::identity()),
        ])
        .unwrap();
        assert_eq!(traj.index_of(0.1), Some(1));
        assert_eq!(traj.index_of(0.2 + 1e-12), Some(2));
        assert_eq!(traj.index_of(0.15), None);
        assert!(OdometryTrajectory::new(vec![(0.2, Pose::identity()), (0.1, Pose::identity())]).is_err());
    }
}
