//! Procedural skeleton families, the orbiting orthographic camera and 2D
//! noise injection.
//!
//! All archetypes share one 16-joint skeleton, in millimeters, with the
//! y axis vertical and z pointing toward a frontal camera:
//!
//! | idx | joint      | idx | joint      |
//! |-----|------------|-----|------------|
//! | 0   | pelvis     | 8   | neck       |
//! | 1   | r_hip      | 9   | head       |
//! | 2   | r_knee     | 10  | l_shoulder |
//! | 3   | r_ankle    | 11  | l_elbow    |
//! | 4   | l_hip      | 12  | l_wrist    |
//! | 5   | l_knee     | 13  | r_shoulder |
//! | 6   | l_ankle    | 14  | r_elbow    |
//! | 7   | spine      | 15  | r_wrist    |

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix2x3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::camera::project;
use crate::error::{Error, Result};
use crate::pose::{center_pose, center_pose2d, CameraMatrix, Pose2D, Pose3D};

pub const NUM_JOINTS: usize = 16;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
    "spine",
    "neck",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
];

#[allow(dead_code)]
mod joint {
    pub const R_HIP: usize = 1;
    pub const R_KNEE: usize = 2;
    pub const R_ANKLE: usize = 3;
    pub const L_HIP: usize = 4;
    pub const L_KNEE: usize = 5;
    pub const L_ANKLE: usize = 6;
    pub const SPINE: usize = 7;
    pub const NECK: usize = 8;
    pub const HEAD: usize = 9;
    pub const L_SHOULDER: usize = 10;
    pub const L_ELBOW: usize = 11;
    pub const L_WRIST: usize = 12;
    pub const R_SHOULDER: usize = 13;
    pub const R_ELBOW: usize = 14;
    pub const R_WRIST: usize = 15;
}

const STAND: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 1000.0, 0.0],
    [-100.0, 990.0, 0.0],
    [-105.0, 550.0, 10.0],
    [-110.0, 90.0, -20.0],
    [100.0, 990.0, 0.0],
    [105.0, 550.0, 10.0],
    [110.0, 90.0, -20.0],
    [0.0, 1250.0, -10.0],
    [0.0, 1500.0, 0.0],
    [0.0, 1680.0, 20.0],
    [180.0, 1450.0, -10.0],
    [220.0, 1170.0, -20.0],
    [230.0, 920.0, 10.0],
    [-180.0, 1450.0, -10.0],
    [-220.0, 1170.0, -20.0],
    [-230.0, 920.0, 10.0],
];

const STRIDE: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 980.0, 0.0],
    [-100.0, 970.0, 10.0],
    [-100.0, 560.0, 190.0],
    [-100.0, 140.0, 320.0],
    [100.0, 970.0, -10.0],
    [100.0, 550.0, -120.0],
    [100.0, 170.0, -370.0],
    [0.0, 1230.0, 20.0],
    [0.0, 1480.0, 50.0],
    [0.0, 1660.0, 80.0],
    [180.0, 1430.0, 40.0],
    [205.0, 1170.0, 150.0],
    [215.0, 940.0, 280.0],
    [-180.0, 1430.0, 40.0],
    [-205.0, 1170.0, -110.0],
    [-215.0, 950.0, -230.0],
];

const SEATED: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 500.0, 0.0],
    [-110.0, 500.0, 10.0],
    [-120.0, 530.0, 450.0],
    [-120.0, 90.0, 490.0],
    [110.0, 500.0, 10.0],
    [120.0, 530.0, 450.0],
    [120.0, 90.0, 490.0],
    [0.0, 750.0, -30.0],
    [0.0, 1000.0, -20.0],
    [0.0, 1180.0, 10.0],
    [180.0, 950.0, -20.0],
    [210.0, 700.0, 30.0],
    [170.0, 560.0, 270.0],
    [-180.0, 950.0, -20.0],
    [-210.0, 700.0, 30.0],
    [-170.0, 560.0, 270.0],
];

/// The built-in pose archetypes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Archetype {
    Stand,
    Stride,
    Seated,
}

impl Archetype {
    pub const ALL: [Archetype; 3] = [Archetype::Stand, Archetype::Stride, Archetype::Seated];

    pub fn name(self) -> &'static str {
        match self {
            Archetype::Stand => "stand",
            Archetype::Stride => "stride",
            Archetype::Seated => "seated",
        }
    }

    pub fn base(self) -> Pose3D {
        let points = match self {
            Archetype::Stand => &STAND,
            Archetype::Stride => &STRIDE,
            Archetype::Seated => &SEATED,
        };
        Pose3D::from_points(points).expect("archetype coordinates are finite")
    }

    /// Local bends shared by every family (elbows, knees, torso, head),
    /// plus family-specific limb swings.
    pub fn deform_axes(self) -> Vec<DeformAxis> {
        use joint::*;
        let axis = |joints: &[usize], dir: [f64; 3], max: f64| DeformAxis::new(joints.to_vec(), Vector3::from(dir), (0.0, max));
        let mut axes = vec![
            axis(&[L_ELBOW, L_WRIST], [0.0, 0.0, 1.0], 120.0),
            axis(&[R_ELBOW, R_WRIST], [0.0, 0.0, 1.0], 120.0),
            axis(&[L_WRIST], [0.0, 1.0, 1.0], 160.0),
            axis(&[R_WRIST], [0.0, 1.0, 1.0], 160.0),
            axis(&[L_WRIST], [1.0, 0.0, 0.0], 80.0),
            axis(&[R_WRIST], [-1.0, 0.0, 0.0], 80.0),
            axis(&[NECK, HEAD, L_SHOULDER, R_SHOULDER, L_ELBOW, R_ELBOW, L_WRIST, R_WRIST], [0.0, 0.0, 1.0], 80.0),
            axis(&[NECK, HEAD, L_SHOULDER, R_SHOULDER, L_ELBOW, R_ELBOW, L_WRIST, R_WRIST], [1.0, 0.0, 0.0], 60.0),
            axis(&[HEAD], [0.0, -0.3, 1.0], 60.0),
            axis(&[SPINE], [0.0, 0.0, 1.0], 40.0),
            axis(&[L_KNEE], [0.0, 0.3, 1.0], 90.0),
            axis(&[R_KNEE], [0.0, 0.3, 1.0], 90.0),
            axis(&[L_ANKLE], [0.0, 0.3, -1.0], 110.0),
            axis(&[R_ANKLE], [0.0, 0.3, -1.0], 110.0),
        ];
        match self {
            Archetype::Stand => {
                axes.push(axis(&[L_ELBOW, L_WRIST], [1.0, 0.3, 0.0], 150.0));
                axes.push(axis(&[R_ELBOW, R_WRIST], [-1.0, 0.3, 0.0], 150.0));
                axes.push(axis(&[L_KNEE, L_ANKLE], [1.0, 0.0, 0.0], 60.0));
                axes.push(axis(&[R_KNEE, R_ANKLE], [-1.0, 0.0, 0.0], 60.0));
            }
            Archetype::Stride => {
                axes.push(axis(&[R_KNEE, R_ANKLE], [0.0, 0.2, 1.0], 140.0));
                axes.push(axis(&[L_KNEE, L_ANKLE], [0.0, 0.2, 1.0], 140.0));
                axes.push(axis(&[L_ELBOW, L_WRIST], [0.0, 0.0, -1.0], 160.0));
                axes.push(axis(&[R_ELBOW, R_WRIST], [0.0, 0.0, 1.0], 160.0));
            }
            Archetype::Seated => {
                axes.push(axis(&[L_KNEE, L_ANKLE], [1.0, 0.0, 0.0], 90.0));
                axes.push(axis(&[R_KNEE, R_ANKLE], [-1.0, 0.0, 0.0], 90.0));
                axes.push(axis(&[L_ANKLE, R_ANKLE], [0.0, 0.0, -1.0], 150.0));
                axes.push(axis(&[L_WRIST, R_WRIST], [0.0, 0.5, 1.0], 150.0));
            }
        }
        axes
    }

    pub fn family(self, count: usize, seed: u64) -> FamilySpec {
        FamilySpec {
            name: self.name().to_string(),
            base: self.base(),
            deform_axes: self.deform_axes(),
            count,
            seed,
        }
    }
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Archetype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Archetype::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown pose family '{s}' (expected stand, stride or seated)")))
    }
}

/// A displacement of a joint subset along a unit direction, with an
/// amplitude drawn uniformly from `amplitude` (millimeters).
#[derive(Clone, Debug, PartialEq)]
pub struct DeformAxis {
    pub joints: Vec<usize>,
    pub direction: Vector3<f64>,
    pub amplitude: (f64, f64),
}

impl DeformAxis {
    /// Normalizes `direction`; a zero direction yields a no-op axis.
    pub fn new(joints: Vec<usize>, direction: Vector3<f64>, amplitude: (f64, f64)) -> Self {
        let norm = direction.norm();
        let direction = if norm > 0.0 { direction / norm } else { direction };
        Self { joints, direction, amplitude }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FamilySpec {
    pub name: String,
    pub base: Pose3D,
    pub deform_axes: Vec<DeformAxis>,
    pub count: usize,
    pub seed: u64,
}

impl FamilySpec {
    pub fn validate(&self) -> Result<()> {
        let p = self.base.num_joints();
        for (i, axis) in self.deform_axes.iter().enumerate() {
            let (lo, hi) = axis.amplitude;
            if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
                return Err(Error::Config(format!(
                    "family '{}': axis {i} amplitude range ({lo}, {hi}) must satisfy 0 <= lo <= hi",
                    self.name
                )));
            }
            if let Some(&j) = axis.joints.iter().find(|&&j| j >= p) {
                return Err(Error::Config(format!(
                    "family '{}': axis {i} references joint {j} of a {p}-joint skeleton",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// SplitMix64 finalizer, used to derive independent per-item seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` centered poses: the base plus random-amplitude deformations.
pub fn generate_family(spec: &FamilySpec) -> Result<Vec<Pose3D>> {
    spec.validate()?;
    (0..spec.count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, i as u64));
            let mut joints = spec.base.joints().clone();
            for axis in &spec.deform_axes {
                let (lo, hi) = axis.amplitude;
                let a = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                for &j in &axis.joints {
                    let mut col = joints.column_mut(j);
                    col += axis.direction * a;
                }
            }
            Ok(center_pose(&Pose3D::new(joints)?).0)
        })
        .collect()
}

/// Camera for an orthographic view at `azimuth` radians about the vertical axis.
pub fn orbit_camera(azimuth: f64) -> CameraMatrix {
    let (s, c) = azimuth.sin_cos();
    CameraMatrix::new(Matrix2x3::new(c, 0.0, s, 0.0, 1.0, 0.0)).expect("finite camera")
}

/// Views at azimuths `2πj / n_views`, orthographic with unit scale, centered.
pub fn orbit_project(y: &Pose3D, n_views: usize) -> Vec<Pose2D> {
    (0..n_views)
        .map(|j| {
            let azimuth = 2.0 * std::f64::consts::PI * j as f64 / n_views as f64;
            let x = project(y, &orbit_camera(azimuth), &Vector2::zeros());
            center_pose2d(&x).0
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

/// Adds independent `N(0, σ²)` noise to every 2D coordinate.
pub fn add_noise(x: &Pose2D, spec: &NoiseSpec) -> Result<Pose2D> {
    if !(spec.sigma >= 0.0 && spec.sigma.is_finite()) {
        return Err(Error::Config(format!("noise sigma {} must be finite and >= 0", spec.sigma)));
    }
    if spec.sigma == 0.0 {
        return Ok(x.clone());
    }
    let normal = Normal::new(0.0, spec.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let joints = x.joints().map(|v| v + normal.sample(&mut rng));
    Pose2D::new(joints)
}
