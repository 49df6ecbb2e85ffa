//! Lifting 2D body joints to 3D poses with a shape decomposition model.
//!
//! A 3D pose is written as a sparse combination of global-structure atoms
//! plus a dense combination of deformation atoms, observed through an
//! isotropic weak-perspective camera.

pub mod camera;
pub mod dictlearn;
pub mod error;
pub mod io;
pub mod metrics;
pub mod pose;
pub mod solver;
pub mod synth;

pub use error::{Error, Result};
pub use pose::{
    center_pose, center_pose2d, combine, project_dictionary, CameraMatrix, Codes, DictKind,
    Pose2D, Pose3D, PoseDictionary,
};
