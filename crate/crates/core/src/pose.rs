//! Pose, dictionary, code and camera value types.
//!
//! Poses are stored joint-major: column `i` of a `3 × P` matrix is joint `i`,
//! so the flat column-major slice reads `x0 y0 z0 x1 y1 z1 ...`.

use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix2xX, Matrix3, Matrix3xX, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on row means for a pose to count as centered.
pub const CENTER_TOL: f64 = 1e-9;

/// Tolerance used when validating dictionaries read from outside the crate.
pub const DICT_VALIDATION_TOL: f64 = 1e-6;

/// A 3D skeleton: 3 rows by `P` joint columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose3D {
    joints: Matrix3xX<f64>,
}

/// A 2D skeleton: 2 rows by `P` joint columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose2D {
    joints: Matrix2xX<f64>,
}

fn check_joints(count: usize, mut values: impl Iterator<Item = f64>) -> Result<()> {
    if count < 2 {
        return Err(Error::InvalidPose(format!(
            "a skeleton needs at least 2 joints, got {count}"
        )));
    }
    if values.any(|v| !v.is_finite()) {
        return Err(Error::InvalidPose("non-finite coordinate".into()));
    }
    Ok(())
}

impl Pose3D {
    pub fn new(joints: Matrix3xX<f64>) -> Result<Self> {
        check_joints(joints.ncols(), joints.iter().copied())?;
        Ok(Self { joints })
    }

    /// Builds a pose from joint-major flat coordinates (`x0 y0 z0 x1 ...`).
    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() % 3 != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} values is not a multiple of 3",
                values.len()
            )));
        }
        Self::new(Matrix3xX::from_column_slice(values))
    }

    pub fn from_points(points: &[[f64; 3]]) -> Result<Self> {
        let flat: Vec<f64> = points.iter().flatten().copied().collect();
        Self::from_flat(&flat)
    }

    pub fn zeros(num_joints: usize) -> Self {
        Self {
            joints: Matrix3xX::zeros(num_joints),
        }
    }

    pub fn joints(&self) -> &Matrix3xX<f64> {
        &self.joints
    }

    pub fn into_joints(self) -> Matrix3xX<f64> {
        self.joints
    }

    pub fn num_joints(&self) -> usize {
        self.joints.ncols()
    }

    pub fn joint(&self, i: usize) -> Vector3<f64> {
        self.joints.column(i).into_owned()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.joints.as_slice()
    }

    pub fn norm(&self) -> f64 {
        self.joints.norm()
    }

    pub fn row_means(&self) -> Vector3<f64> {
        self.joints.column_sum() / self.num_joints() as f64
    }

    pub fn is_centered(&self, tol: f64) -> bool {
        self.row_means().amax() <= tol
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(&self.joints * factor)
    }

    /// Applies `rotation * joint + translation` to every joint.
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Result<Self> {
        let mut joints = rotation * &self.joints;
        for mut col in joints.column_iter_mut() {
            col += translation;
        }
        Self::new(joints)
    }
}

impl Pose2D {
    pub fn new(joints: Matrix2xX<f64>) -> Result<Self> {
        check_joints(joints.ncols(), joints.iter().copied())?;
        Ok(Self { joints })
    }

    /// Builds a pose from joint-major flat coordinates (`x0 y0 x1 y1 ...`).
    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() % 2 != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} values is not a multiple of 2",
                values.len()
            )));
        }
        Self::new(Matrix2xX::from_column_slice(values))
    }

    pub fn from_points(points: &[[f64; 2]]) -> Result<Self> {
        let flat: Vec<f64> = points.iter().flatten().copied().collect();
        Self::from_flat(&flat)
    }

    pub fn joints(&self) -> &Matrix2xX<f64> {
        &self.joints
    }

    pub fn num_joints(&self) -> usize {
        self.joints.ncols()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.joints.as_slice()
    }

    pub fn norm(&self) -> f64 {
        self.joints.norm()
    }

    pub fn row_means(&self) -> Vector2<f64> {
        self.joints.column_sum() / self.num_joints() as f64
    }

    pub fn is_centered(&self, tol: f64) -> bool {
        self.row_means().amax() <= tol
    }
}

/// Removes the per-row mean. Returns the centered pose and the removed offset.
pub fn center_pose(p: &Pose3D) -> (Pose3D, Vector3<f64>) {
    let offset = p.row_means();
    let mut joints = p.joints.clone();
    for mut col in joints.column_iter_mut() {
        col -= offset;
    }
    (Pose3D { joints }, offset)
}

pub fn center_pose2d(p: &Pose2D) -> (Pose2D, Vector2<f64>) {
    let offset = p.row_means();
    let mut joints = p.joints.clone();
    for mut col in joints.column_iter_mut() {
        col -= offset;
    }
    (Pose2D { joints }, offset)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DictKind {
    GlobalStructure,
    Deformation,
}

impl fmt::Display for DictKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DictKind::GlobalStructure => "global_structure",
            DictKind::Deformation => "deformation",
        })
    }
}

/// An ordered set of basis poses. Every atom is centered with Frobenius
/// norm at most one.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseDictionary {
    atoms: Vec<Pose3D>,
    kind: DictKind,
}

impl PoseDictionary {
    /// Validates atoms against [`DICT_VALIDATION_TOL`].
    pub fn new(atoms: Vec<Pose3D>, kind: DictKind) -> Result<Self> {
        Self::with_tolerance(atoms, kind, DICT_VALIDATION_TOL)
    }

    pub fn with_tolerance(atoms: Vec<Pose3D>, kind: DictKind, tol: f64) -> Result<Self> {
        let Some(first) = atoms.first() else {
            return Err(Error::InvalidDictionary("dictionary has no atoms".into()));
        };
        let p = first.num_joints();
        for (j, atom) in atoms.iter().enumerate() {
            if atom.num_joints() != p {
                return Err(Error::InvalidDictionary(format!(
                    "atom {j} has {} joints, expected {p}",
                    atom.num_joints()
                )));
            }
            let mean = atom.row_means().amax();
            if mean > tol {
                return Err(Error::InvalidDictionary(format!(
                    "atom {j} is not centered (row mean {mean:e})"
                )));
            }
            let norm = atom.norm();
            if norm > 1.0 + tol {
                return Err(Error::InvalidDictionary(format!(
                    "atom {j} has norm {norm} > 1"
                )));
            }
        }
        Ok(Self { atoms, kind })
    }

    /// Builds a dictionary from the columns of a `3P × k` basis matrix,
    /// projecting every atom onto the feasible set first.
    pub fn from_basis_projected(basis: &DMatrix<f64>, kind: DictKind) -> Result<Self> {
        let atoms = basis
            .column_iter()
            .map(|col| Pose3D::from_flat(col.as_slice()))
            .collect::<Result<Vec<_>>>()?;
        Ok(project_atoms(atoms, kind))
    }

    pub fn atoms(&self) -> &[Pose3D] {
        &self.atoms
    }

    pub fn atom(&self, j: usize) -> &Pose3D {
        &self.atoms[j]
    }

    pub fn kind(&self) -> DictKind {
        self.kind
    }

    pub fn size(&self) -> usize {
        self.atoms.len()
    }

    pub fn num_joints(&self) -> usize {
        self.atoms[0].num_joints()
    }

    /// The `3P × k` matrix whose columns are the flattened atoms.
    pub fn basis(&self) -> DMatrix<f64> {
        let rows = 3 * self.num_joints();
        DMatrix::from_fn(rows, self.size(), |r, c| self.atoms[c].as_slice()[r])
    }

    /// `Σ_j coeffs[j] · atom_j`.
    pub fn weighted_sum(&self, coeffs: &DVector<f64>) -> Result<Pose3D> {
        if coeffs.len() != self.size() {
            return Err(Error::DimensionMismatch(format!(
                "{} coefficients for a dictionary of {} atoms",
                coeffs.len(),
                self.size()
            )));
        }
        let mut joints: Matrix3xX<f64> = Matrix3xX::zeros(self.num_joints());
        for (atom, &c) in self.atoms.iter().zip(coeffs.iter()) {
            if c != 0.0 {
                joints += atom.joints() * c;
            }
        }
        Pose3D::new(joints)
    }
}

/// Centers each atom, then shrinks it onto the unit Frobenius ball.
///
/// Centering is an orthogonal projection and the ball is centered at the
/// origin of that subspace, so the composition is the Euclidean projection
/// onto their intersection.
pub fn project_dictionary(d: &PoseDictionary) -> PoseDictionary {
    project_atoms(d.atoms.clone(), d.kind)
}

pub(crate) fn project_atoms(atoms: Vec<Pose3D>, kind: DictKind) -> PoseDictionary {
    let atoms = atoms.iter().map(project_atom).collect();
    PoseDictionary { atoms, kind }
}

fn project_atom(atom: &Pose3D) -> Pose3D {
    // Skipping re-centering of already-centered atoms keeps projection
    // idempotent bit-for-bit.
    let mut centered = if atom.row_means().amax() <= 1e-12 {
        atom.clone()
    } else {
        center_pose(atom).0
    };
    let norm = centered.norm();
    if norm > 1.0 {
        centered.joints /= norm;
        // Division can round the norm a hair above one.
        while centered.norm() > 1.0 {
            centered.joints *= 1.0 - f64::EPSILON;
        }
    }
    centered
}

/// Paired coefficient vectors: sparse `c_u` and dense `c_v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codes {
    pub c_u: DVector<f64>,
    pub c_v: DVector<f64>,
}

impl Codes {
    pub fn zeros(k_u: usize, k_v: usize) -> Self {
        Self {
            c_u: DVector::zeros(k_u),
            c_v: DVector::zeros(k_v),
        }
    }

    pub fn new(c_u: DVector<f64>, c_v: DVector<f64>) -> Result<Self> {
        if c_u.iter().chain(c_v.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidPose("non-finite code entry".into()));
        }
        Ok(Self { c_u, c_v })
    }
}

/// `Y = B_u c_u + B_v c_v`.
pub fn combine(dict_u: &PoseDictionary, dict_v: &PoseDictionary, codes: &Codes) -> Result<Pose3D> {
    if dict_u.num_joints() != dict_v.num_joints() {
        return Err(Error::DimensionMismatch(format!(
            "dictionaries have {} and {} joints",
            dict_u.num_joints(),
            dict_v.num_joints()
        )));
    }
    let u = dict_u.weighted_sum(&codes.c_u)?;
    let v = dict_v.weighted_sum(&codes.c_v)?;
    Pose3D::new(u.joints + v.joints)
}

/// The 2 × 3 weak-perspective camera `R* = S·R`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraMatrix {
    m: Matrix2x3<f64>,
}

impl CameraMatrix {
    pub fn new(m: Matrix2x3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPose("non-finite camera entry".into()));
        }
        Ok(Self { m })
    }

    /// The axis-drop camera `[[1,0,0],[0,1,0]]`.
    pub fn identity() -> Self {
        Self {
            m: Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0),
        }
    }

    /// Isotropic weak perspective: the first two rows of `scale · rotation`.
    pub fn from_scale_rotation(scale: f64, rotation: &Matrix3<f64>) -> Result<Self> {
        Self::new(rotation.fixed_rows::<2>(0) * scale)
    }

    pub fn matrix(&self) -> &Matrix2x3<f64> {
        &self.m
    }

    /// Mean row norm; equals `s` for a camera built from `(s, R)`.
    pub fn scale(&self) -> f64 {
        0.5 * (self.m.row(0).norm() + self.m.row(1).norm())
    }

    /// The camera with unit row norms (undefined for a zero camera).
    pub fn rotation_part(&self) -> Matrix2x3<f64> {
        self.m / self.scale()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, p: usize) -> Pose3D {
        Pose3D::new(Matrix3xX::from_fn(p, |_, _| rng.random_range(-500.0..500.0))).unwrap()
    }

    #[test]
    fn rejects_non_finite_and_tiny_skeletons() {
        let mut m = Matrix3xX::zeros(4);
        m[(1, 2)] = f64::NAN;
        assert!(matches!(Pose3D::new(m), Err(Error::InvalidPose(_))));
        assert!(matches!(
            Pose3D::new(Matrix3xX::zeros(1)),
            Err(Error::InvalidPose(_))
        ));
        assert!(Pose2D::from_flat(&[1.0, 2.0, f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn center_constant_pose() {
        let p = Pose3D::from_points(&[[1.0, 2.0, 3.0]; 5]).unwrap();
        let (c, offset) = center_pose(&p);
        assert_eq!(c, Pose3D::zeros(5));
        assert_eq!(offset, Vector3::new(1.0, 2.0, 3.0));

        let q = Pose2D::from_points(&[[5.0, 5.0]; 4]).unwrap();
        let (c, offset) = center_pose2d(&q);
        assert!(c.joints().iter().all(|&v| v == 0.0));
        assert_eq!(offset, Vector2::new(5.0, 5.0));
    }

    #[test]
    fn center_already_centered() {
        let p = Pose3D::from_points(&[[1.0, -2.0, 0.5], [-1.0, 2.0, -0.5]]).unwrap();
        let (c, offset) = center_pose(&p);
        assert_eq!(c, p);
        assert_eq!(offset, Vector3::zeros());

        let q = Pose2D::from_points(&[[3.0, 1.0], [-3.0, -1.0]]).unwrap();
        let (c, offset) = center_pose2d(&q);
        assert_eq!(c, q);
        assert_eq!(offset, Vector2::zeros());
    }

    #[test]
    fn center_random_pose_row_sums_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = random_pose(&mut rng, 16);
        let (c, offset) = center_pose(&p);
        for r in 0..3 {
            let sum: f64 = c.joints().row(r).iter().sum();
            assert!(sum.abs() < 1e-9, "row {r} sums to {sum}");
        }
        for (a, b) in c.as_slice().chunks(3).zip(p.as_slice().chunks(3)) {
            for d in 0..3 {
                assert!((a[d] + offset[d] - b[d]).abs() < 1e-12);
            }
        }

        let q = Pose2D::new(Matrix2xX::from_fn(16, |_, _| rng.random_range(-9.0..9.0))).unwrap();
        let (c, _) = center_pose2d(&q);
        for r in 0..2 {
            let sum: f64 = c.joints().row(r).iter().sum();
            assert!(sum.abs() < 1e-9);
        }
    }

    fn random_dict(rng: &mut ChaCha8Rng, k: usize, p: usize, kind: DictKind) -> PoseDictionary {
        let atoms = (0..k).map(|_| random_pose(rng, p)).collect();
        project_atoms(atoms, kind)
    }

    #[test]
    fn combine_selects_and_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let du = random_dict(&mut rng, 4, 6, DictKind::GlobalStructure);
        let dv = random_dict(&mut rng, 4, 6, DictKind::Deformation);

        let mut codes = Codes::zeros(4, 4);
        codes.c_u[0] = 1.0;
        assert_eq!(combine(&du, &dv, &codes).unwrap(), *du.atom(0));

        let zero = combine(&du, &dv, &Codes::zeros(4, 4)).unwrap();
        assert_eq!(zero, Pose3D::zeros(6));

        let codes = Codes::new(
            DVector::from_fn(4, |_, _| rng.random_range(-3.0..3.0)),
            DVector::from_fn(4, |_, _| rng.random_range(-3.0..3.0)),
        )
        .unwrap();
        let got = combine(&du, &dv, &codes).unwrap();
        // naive double loop over atoms and joints
        for i in 0..6 {
            for d in 0..3 {
                let mut want = 0.0;
                for j in 0..4 {
                    want += codes.c_u[j] * du.atom(j).joints()[(d, i)];
                    want += codes.c_v[j] * dv.atom(j).joints()[(d, i)];
                }
                assert!((got.joints()[(d, i)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn combine_rejects_bad_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let du = random_dict(&mut rng, 3, 5, DictKind::GlobalStructure);
        let dv = random_dict(&mut rng, 2, 5, DictKind::Deformation);
        assert!(matches!(
            combine(&du, &dv, &Codes::zeros(3, 3)),
            Err(Error::DimensionMismatch(_))
        ));
        let dv6 = random_dict(&mut rng, 2, 6, DictKind::Deformation);
        assert!(matches!(
            combine(&du, &dv6, &Codes::zeros(3, 2)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn dictionary_validation() {
        let good = Pose3D::from_points(&[[0.1, 0.0, 0.0], [-0.1, 0.0, 0.0]]).unwrap();
        assert!(PoseDictionary::new(vec![good.clone()], DictKind::Deformation).is_ok());

        let off_center = Pose3D::from_points(&[[0.1, 2e-6, 0.0], [-0.1, 2e-6, 0.0]]).unwrap();
        assert!(PoseDictionary::new(vec![off_center], DictKind::Deformation).is_err());

        let long = Pose3D::from_points(&[[0.7072, 0.0, 0.0], [-0.7072, 0.0, 0.0]]).unwrap();
        assert!(PoseDictionary::new(vec![long], DictKind::Deformation).is_err());

        let p3 = Pose3D::zeros(3);
        assert!(PoseDictionary::new(vec![good, p3], DictKind::Deformation).is_err());
        assert!(PoseDictionary::new(vec![], DictKind::Deformation).is_err());
    }

    #[test]
    fn projection_examples() {
        let atom = Pose3D::from_points(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, -1.0], [0.0, -1.0, 1.0]])
            .unwrap()
            .scaled(1.0 / 6f64.sqrt())
            .unwrap();
        // norm 2 → same direction, norm 1
        let doubled = atom.scaled(2.0).unwrap();
        let d = PoseDictionary::with_tolerance(vec![doubled.clone()], DictKind::GlobalStructure, 10.0)
            .unwrap();
        let proj = project_dictionary(&d);
        assert!((proj.atom(0).norm() - 1.0).abs() < 1e-12);
        let cos = proj.atom(0).joints().dot(doubled.joints()) / doubled.norm();
        assert!((cos - 1.0).abs() < 1e-12);

        let half = Pose3D::from_points(&[[0.25, 0.0, 0.0], [-0.25, 0.0, 0.0], [0.0, 0.25, 0.0], [0.0, -0.25, 0.0]])
            .unwrap();
        let d = PoseDictionary::new(vec![half.clone()], DictKind::Deformation).unwrap();
        assert_eq!(project_dictionary(&d).atom(0), &half);
    }

    #[test]
    fn camera_from_scale_rotation() {
        let r = nalgebra::Rotation3::from_euler_angles(0.3, -1.1, 0.7);
        let cam = CameraMatrix::from_scale_rotation(0.5, r.matrix()).unwrap();
        let m = cam.matrix();
        assert!(m.row(0).dot(&m.row(1)).abs() < 1e-12);
        assert!((m.row(0).norm() - 0.5).abs() < 1e-12);
        assert!((m.row(1).norm() - 0.5).abs() < 1e-12);
        assert!((cam.scale() - 0.5).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, Strategy};

        fn pose_strategy(p: usize) -> impl Strategy<Value = Pose3D> {
            proptest::collection::vec(-1e3..1e3f64, 3 * p)
                .prop_map(|v| Pose3D::from_flat(&v).unwrap())
        }

        proptest! {
            #[test]
            fn centering_is_idempotent_and_invertible(p in pose_strategy(7)) {
                let (c, offset) = center_pose(&p);
                let (cc, _) = center_pose(&c);
                for (a, b) in c.as_slice().iter().zip(cc.as_slice()) {
                    prop_assert!((a - b).abs() <= 1e-9);
                }
                for (i, col) in c.joints().column_iter().enumerate() {
                    let back = col + offset;
                    prop_assert!((back - p.joint(i)).amax() <= 1e-12 * (1.0 + p.joint(i).amax()));
                }
            }

            #[test]
            fn combine_is_linear(
                seed in any::<u64>(),
                a in -5.0..5.0f64,
                b in -5.0..5.0f64,
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let du = random_dict(&mut rng, 3, 5, DictKind::GlobalStructure);
                let dv = random_dict(&mut rng, 4, 5, DictKind::Deformation);
                let mut rv = |n| DVector::from_fn(n, |_, _| rng.random_range(-10.0..10.0));
                let x = Codes::new(rv(3), rv(4)).unwrap();
                let y = Codes::new(rv(3), rv(4)).unwrap();
                let mix = Codes::new(&x.c_u * a + &y.c_u * b, &x.c_v * a + &y.c_v * b).unwrap();
                let lhs = combine(&du, &dv, &mix).unwrap();
                let rhs = combine(&du, &dv, &x).unwrap().joints() * a
                    + combine(&du, &dv, &y).unwrap().joints() * b;
                let scale = 1.0 + rhs.amax();
                prop_assert!((lhs.joints() - rhs).amax() <= 1e-9 * scale);
            }

            #[test]
            fn projection_is_idempotent_and_feasible(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let d = random_dict(&mut rng, 4, 5, DictKind::GlobalStructure);
                let atoms: Vec<_> = d.atoms().iter().map(|a| a.scaled(rng.random_range(0.1..5.0)).unwrap()).collect();
                let raw = PoseDictionary { atoms, kind: DictKind::GlobalStructure };
                let once = project_dictionary(&raw);
                let twice = project_dictionary(&once);
                prop_assert_eq!(&once, &twice);
                prop_assert!(PoseDictionary::with_tolerance(once.atoms.clone(), once.kind, 1e-9).is_ok());
            }
        }
    }
}
