//! Pose-trajectory accuracy: least-squares alignment, absolute trajectory
//! error and relative pose error.
//!
//! Poses here are camera-to-world, so the camera center of a pose is its
//! translation.

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;

use crate::error::{ensure_arg, Error, Result};
use crate::geom::Extrinsics;

/// Ordered camera-to-world poses.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseTrajectory {
    poses: Vec<Extrinsics>,
}

impl PoseTrajectory {
    pub fn new(poses: Vec<Extrinsics>) -> Self {
        Self { poses }
    }

    pub fn poses(&self) -> &[Extrinsics] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn centers(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| *p.translation()).collect()
    }

    /// Applies `g` on the world side of every pose.
    pub fn transformed(&self, g: &Extrinsics) -> Self {
        Self::new(self.poses.iter().map(|p| g.compose(p)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    /// Maps estimated centers onto ground truth: `gt ≈ s·R·est + t`.
    pub transform: Extrinsics,
    pub scale: f64,
}

impl Alignment {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.transform.rotation() * p * self.scale + self.transform.translation()
    }
}

/// Relative variance below which a point set counts as a single point.
const DEGENERATE_VARIANCE: f64 = 1e-24;

/// Least-squares rigid (or similarity) alignment of estimated camera
/// centers onto ground truth.
pub fn rigid_align(
    est: &PoseTrajectory,
    gt: &PoseTrajectory,
    with_scale: bool,
) -> Result<Alignment> {
    ensure_arg!(
        est.len() == gt.len(),
        "trajectory lengths differ: {} vs {}",
        est.len(),
        gt.len()
    );
    ensure_arg!(!est.is_empty(), "trajectories are empty");
    let src = est.centers();
    let dst = gt.centers();
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;

    let var_s = src.iter().map(|p| (p - mu_s).norm_squared()).sum::<f64>() / n;
    let spread = src.iter().map(|p| p.norm_squared()).fold(1.0, f64::max);
    if var_s <= DEGENERATE_VARIANCE * spread {
        return Err(Error::Degenerate(
            "all estimated camera centers coincide".into(),
        ));
    }

    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(&dst) {
        cov += (d - mu_d) * (s - mu_s).transpose();
    }
    cov /= n;

    let svd = cov.svd(true, true);
    let u = svd
        .u
        .ok_or_else(|| Error::Internal("SVD failed to produce U".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Internal("SVD failed to produce Vᵀ".into()))?;
    let mut signs = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        signs[(2, 2)] = -1.0;
    }
    let rotation = u * signs * v_t;
    let scale = if with_scale {
        (Matrix3::from_diagonal(&svd.singular_values) * signs).trace() / var_s
    } else {
        1.0
    };
    let translation = mu_d - rotation * mu_s * scale;
    Ok(Alignment {
        transform: Extrinsics::from_parts_unchecked(rotation, translation),
        scale,
    })
}

fn rmse(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

/// Absolute trajectory error in meters: RMSE of camera-center residuals
/// after rigid alignment without scale.
///
/// When every estimated center coincides the rotation is unobservable and
/// only the translation is aligned.
pub fn ate(est: &PoseTrajectory, gt: &PoseTrajectory) -> Result<f64> {
    ensure_arg!(
        est.len() == gt.len(),
        "trajectory lengths differ: {} vs {}",
        est.len(),
        gt.len()
    );
    ensure_arg!(!est.is_empty(), "trajectories are empty");
    if est.centers() == gt.centers() {
        return Ok(0.0);
    }
    let align = match rigid_align(est, gt, false) {
        Ok(a) => a,
        Err(Error::Degenerate(_)) => {
            let n = est.len() as f64;
            let offset = (gt.centers().iter().sum::<Vector3<f64>>()
                - est.centers().iter().sum::<Vector3<f64>>())
                / n;
            Alignment {
                transform: Extrinsics::from_translation(offset),
                scale: 1.0,
            }
        }
        Err(e) => return Err(e),
    };
    Ok(rmse(
        est.centers()
            .iter()
            .zip(gt.centers())
            .map(|(e, g)| (align.apply(e) - g).norm()),
    ))
}

/// Rotation angle of `r` in radians.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RelativePoseError {
    pub trans_m: f64,
    pub rot_deg: f64,
}

/// Relative pose error over steps of `delta` frames.
pub fn rpe(est: &PoseTrajectory, gt: &PoseTrajectory, delta: usize) -> Result<RelativePoseError> {
    ensure_arg!(
        est.len() == gt.len(),
        "trajectory lengths differ: {} vs {}",
        est.len(),
        gt.len()
    );
    ensure_arg!(delta >= 1, "RPE step must be at least 1");
    ensure_arg!(
        est.len() > delta,
        "trajectory of length {} is too short for step {delta}",
        est.len()
    );
    let errors: Vec<Extrinsics> = (0..est.len() - delta)
        .map(|i| {
            let d_est = est.poses[i].inverse().compose(&est.poses[i + delta]);
            let d_gt = gt.poses[i].inverse().compose(&gt.poses[i + delta]);
            if d_est == d_gt {
                Extrinsics::identity()
            } else {
                d_gt.inverse().compose(&d_est)
            }
        })
        .collect();
    Ok(RelativePoseError {
        trans_m: rmse(errors.iter().map(|e| e.translation().norm())),
        rot_deg: rmse(
            errors
                .iter()
                .map(|e| rotation_angle(e.rotation()).to_degrees()),
        ),
    })
}

/// Constant-drift fixture: ground truth turning about `z` with a curved
/// path, and an estimate carrying an extra `deg_per_step` rotation about
/// `z` per frame.
pub fn drift_fixture(frames: usize, deg_per_step: f64) -> (PoseTrajectory, PoseTrajectory) {
    let z = Vector3::z();
    let gt: Vec<Extrinsics> = (0..frames)
        .map(|i| {
            let i = i as f64;
            Extrinsics::from_axis_angle(
                z,
                (5.0 * i).to_radians(),
                Vector3::new(0.1 * i, 0.02 * i * i, 0.05 * i),
            )
            .expect("non-zero axis")
        })
        .collect();
    let est = gt
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let extra = Extrinsics::from_axis_angle(
                z,
                (deg_per_step * i as f64).to_radians(),
                Vector3::zeros(),
            )
            .expect("non-zero axis");
            g.compose(&extra)
        })
        .collect();
    (PoseTrajectory::new(est), PoseTrajectory::new(gt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, spread: f64) -> Extrinsics {
        Extrinsics::from_axis_angle(
            Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.1..1.0),
            ),
            rng.gen_range(-3.0..3.0),
            Vector3::new(
                rng.gen_range(-spread..spread),
                rng.gen_range(-spread..spread),
                rng.gen_range(-spread..spread),
            ),
        )
        .unwrap()
    }

    fn random_path(rng: &mut ChaCha8Rng, n: usize) -> PoseTrajectory {
        PoseTrajectory::new((0..n).map(|_| random_pose(rng, 3.0)).collect())
    }

    #[test]
    fn align_identical_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_path(&mut rng, 8);
        let a = rigid_align(&p, &p, false).unwrap();
        assert!((a.transform.rotation() - Matrix3::identity()).amax() < 1e-9);
        assert!(a.transform.translation().amax() < 1e-9);
        assert_eq!(a.scale, 1.0);
    }

    #[test]
    fn align_recovers_known_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = random_path(&mut rng, 10);
        let g = random_pose(&mut rng, 5.0);
        let est = gt.transformed(&g);
        let a = rigid_align(&est, &gt, false).unwrap();
        let inv = g.inverse();
        assert!((a.transform.rotation() - inv.rotation()).amax() < 1e-9);
        for (e, t) in est.centers().iter().zip(gt.centers()) {
            assert!((a.apply(e) - t).norm() <= 1e-9);
        }
    }

    #[test]
    fn align_recovers_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = random_path(&mut rng, 6);
        let est = PoseTrajectory::new(
            gt.poses()
                .iter()
                .map(|p| Extrinsics::from_parts_unchecked(*p.rotation(), p.translation() * 2.0))
                .collect(),
        );
        let a = rigid_align(&est, &gt, true).unwrap();
        assert!((a.scale - 0.5).abs() < 1e-12);
    }

    #[test]
    fn align_rejects_coincident_centers() {
        let p = PoseTrajectory::new(vec![Extrinsics::identity(); 4]);
        assert!(matches!(
            rigid_align(&p, &p, false),
            Err(Error::Degenerate(_))
        ));
        assert_eq!(ate(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn ate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = random_path(&mut rng, 10);
        assert!(ate(&gt, &gt).unwrap() < 1e-12);
        let shifted = gt.transformed(&Extrinsics::from_translation(Vector3::new(1.0, -2.0, 0.5)));
        assert!(ate(&shifted, &gt).unwrap() < 1e-9);
        assert!(ate(&gt, &PoseTrajectory::new(gt.poses()[..9].to_vec())).is_err());
    }

    #[test]
    fn ate_single_perturbation_matches_residual_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = random_path(&mut rng, 10);
        let mut poses = gt.poses().to_vec();
        poses[4] = Extrinsics::from_parts_unchecked(
            *poses[4].rotation(),
            poses[4].translation() + Vector3::new(0.3, 0.0, 0.0),
        );
        let est = PoseTrajectory::new(poses);
        let a = rigid_align(&est, &gt, false).unwrap();
        let mut sq = 0.0;
        for i in 0..10 {
            let e = est.poses()[i].translation();
            let r = a.transform.rotation() * e + a.transform.translation()
                - gt.poses()[i].translation();
            sq += r.x * r.x + r.y * r.y + r.z * r.z;
        }
        let expect = (sq / 10.0).sqrt();
        assert!((ate(&est, &gt).unwrap() - expect).abs() < 1e-12);
        assert!(expect > 0.0 && expect < 0.3);
    }

    #[test]
    fn rpe_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = random_path(&mut rng, 7);
        let r = rpe(&gt, &gt, 1).unwrap();
        assert!(r.trans_m < 1e-12 && r.rot_deg < 1e-6);
        let g = random_pose(&mut rng, 4.0);
        let r = rpe(&gt.transformed(&g), &gt, 1).unwrap();
        assert!(r.trans_m < 1e-9 && r.rot_deg < 1e-5);
        assert!(rpe(&gt, &gt, 7).is_err());
    }

    #[test]
    fn one_degree_drift() {
        let (est, gt) = drift_fixture(10, 1.0);
        let r = rpe(&est, &gt, 1).unwrap();
        assert!((r.rot_deg - 1.0).abs() <= 1e-6, "{}", r.rot_deg);
    }

    #[test]
    fn rotation_error_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_path(&mut rng, 6);
        let b = random_path(&mut rng, 6);
        let ab = rpe(&a, &b, 2).unwrap();
        let ba = rpe(&b, &a, 2).unwrap();
        assert!((ab.rot_deg - ba.rot_deg).abs() < 1e-9);
        assert!(ab.trans_m.is_finite() && ab.trans_m >= 0.0);
    }
}
