//! Pose error measures.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::pose::Pose3D;

/// Relative cutoff under which the second singular value of the
/// cross-covariance counts as zero.
const RANK_TOL: f64 = 1e-12;

fn check_joints(est: &Pose3D, gt: &Pose3D) -> Result<()> {
    if est.num_joints() != gt.num_joints() {
        return Err(Error::DimensionMismatch(format!(
            "estimate has {} joints, ground truth {}",
            est.num_joints(),
            gt.num_joints()
        )));
    }
    Ok(())
}

/// Euclidean distance of each joint.
fn joint_distances<'a>(est: &'a Pose3D, gt: &'a Pose3D) -> impl Iterator<Item = f64> + 'a {
    est.joints()
        .column_iter()
        .zip(gt.joints().column_iter())
        .map(|(a, b)| (a - b).norm())
}

/// Mean Euclidean joint distance, in the units of the poses.
pub fn per_joint_error(est: &Pose3D, gt: &Pose3D) -> Result<f64> {
    check_joints(est, gt)?;
    Ok(joint_distances(est, gt).sum::<f64>() / est.num_joints() as f64)
}

#[derive(Clone, Debug)]
pub struct Alignment {
    pub aligned: Pose3D,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Least-squares rotation and translation taking `est` onto `gt`. No scale.
pub fn rigid_align(est: &Pose3D, gt: &Pose3D) -> Result<Alignment> {
    check_joints(est, gt)?;
    let mean_est = est.row_means();
    let mean_gt = gt.row_means();
    let a = est.joints().map_with_location(|r, _, v| v - mean_est[r]);
    let b = gt.joints().map_with_location(|r, _, v| v - mean_gt[r]);

    // Cross-covariance from gt onto est: rotation = V Uᵀ for H = a bᵀ = U Σ Vᵀ.
    let h: Matrix3<f64> = &a * b.transpose();
    let svd = h.svd(true, true);
    let sigma = svd.singular_values;
    let (order, s_max) = {
        let mut idx = [0usize, 1, 2];
        idx.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]));
        (idx, sigma[idx[0]])
    };
    if !(s_max > 0.0) || sigma[order[1]] <= RANK_TOL * s_max {
        return Err(Error::DegenerateGeometry(
            "cross-covariance has rank below 2; rotation is not unique".into(),
        ));
    }
    let u = svd.u.expect("requested");
    let v_t = svd.v_t.expect("requested");
    let v = v_t.transpose();
    let mut correction = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        // Flip the direction of the smallest singular value.
        correction[(order[2], order[2])] = -1.0;
    }
    let rotation = v * correction * u.transpose();
    let translation = mean_gt - rotation * mean_est;
    let aligned = est.transformed(&rotation, &translation)?;
    Ok(Alignment {
        aligned,
        rotation,
        translation,
    })
}

/// Per-joint error after rigid alignment of `est` onto `gt`.
pub fn estimation_error(est: &Pose3D, gt: &Pose3D) -> Result<f64> {
    let alignment = rigid_align(est, gt)?;
    per_joint_error(&alignment.aligned, gt)
}

/// Mean aligned distance of each joint across a batch of (estimate, truth) pairs.
pub fn joint_breakdown(pairs: &[(Pose3D, Pose3D)]) -> Result<Vec<f64>> {
    let Some((first, _)) = pairs.first() else {
        return Err(Error::EmptyBatch);
    };
    let p = first.num_joints();
    let mut totals = vec![0.0; p];
    for (est, gt) in pairs {
        if est.num_joints() != p {
            return Err(Error::DimensionMismatch(format!(
                "batch mixes {p}-joint and {}-joint poses",
                est.num_joints()
            )));
        }
        let aligned = rigid_align(est, gt)?.aligned;
        for (total, d) in totals.iter_mut().zip(joint_distances(&aligned, gt)) {
            *total += d;
        }
    }
    let n = pairs.len() as f64;
    Ok(totals.into_iter().map(|t| t / n).collect())
}
