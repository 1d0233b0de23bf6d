pub mod camera;
pub mod error;
pub mod image;
pub mod io;
pub mod nid;
pub mod pipeline;
pub mod planes;
pub mod pose_graph;
pub mod registration;
pub mod scalar;
pub mod se3;
pub mod sim;
pub mod spatial;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Pose = se3::Pose<f64>;
pub type Twist = se3::Twist<f64>;
pub type PoseF32 = se3::Pose<f32>;
pub type TwistF32 = se3::Twist<f32>;
