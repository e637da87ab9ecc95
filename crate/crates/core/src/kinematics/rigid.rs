use nalgebra::{Isometry3, Matrix6x1, SMatrix, Translation3, UnitQuaternion, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::reach::ReachMap;
use super::KinematicsError;

pub const RIGID_DOF: usize = 7;

/// One revolute joint in modified Denavit-Hartenberg form: the joint frame is
/// reached from the previous one by `Rx(alpha)·Tx(a)·Rz(q)·Tz(d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigidJoint {
    pub a: f64,
    pub d: f64,
    pub alpha: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigidArm {
    pub joints: Vec<RigidJoint>,
    /// Offset of the tool point along the last joint axis, meters.
    pub tool_offset: f64,
}

impl Default for RigidArm {
    /// A seven-joint collaborative arm with a 0.21 m flange-to-tool offset.
    fn default() -> Self {
        use std::f64::consts::FRAC_PI_2 as H;
        let j = |a, d, alpha, lower, upper| RigidJoint { a, d, alpha, lower, upper };
        Self {
            joints: vec![
                j(0.0, 0.333, 0.0, -2.8973, 2.8973),
                j(0.0, 0.0, -H, -1.7628, 1.7628),
                j(0.0, 0.316, H, -2.8973, 2.8973),
                j(0.0825, 0.0, H, -3.0718, -0.0698),
                j(-0.0825, 0.384, -H, -2.8973, 2.8973),
                j(0.0, 0.0, H, -0.0175, 3.7525),
                j(0.088, 0.0, H, -2.8973, 2.8973),
            ],
            tool_offset: 0.21,
        }
    }
}

pub type JointVector = SMatrix<f64, RIGID_DOF, 1>;

impl RigidArm {
    pub fn validate(&self) -> Result<(), KinematicsError> {
        if self.joints.len() != RIGID_DOF {
            return Err(KinematicsError::Config(format!(
                "rigid arm needs {RIGID_DOF} joints, got {}",
                self.joints.len()
            )));
        }
        for (i, j) in self.joints.iter().enumerate() {
            if !(j.lower < j.upper) || ![j.a, j.d, j.alpha, j.lower, j.upper].iter().all(|v| v.is_finite()) {
                return Err(KinematicsError::Config(format!("joint {} has invalid parameters", i + 1)));
            }
        }
        Ok(())
    }

    /// Midpoint of every joint range.
    pub fn home(&self) -> JointVector {
        JointVector::from_fn(|i, _| 0.5 * (self.joints[i].lower + self.joints[i].upper))
    }

    pub fn clamp(&self, q: &JointVector) -> JointVector {
        JointVector::from_fn(|i, _| q[i].clamp(self.joints[i].lower, self.joints[i].upper))
    }

    pub fn within_limits(&self, q: &JointVector) -> bool {
        q.iter().zip(&self.joints).all(|(v, j)| *v >= j.lower && *v <= j.upper)
    }

    /// Frame of every joint after its rotation, followed by the tool frame.
    pub fn frames(&self, q: &JointVector) -> Vec<Isometry3<f64>> {
        let mut t = Isometry3::identity();
        let mut out = Vec::with_capacity(RIGID_DOF + 1);
        for (i, j) in self.joints.iter().enumerate() {
            t = t
                * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), j.alpha)
                * Translation3::new(j.a, 0.0, 0.0)
                * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), q[i])
                * Translation3::new(0.0, 0.0, j.d);
            out.push(t);
        }
        out.push(t * Translation3::new(0.0, 0.0, self.tool_offset));
        out
    }

    pub fn fk(&self, q: &JointVector) -> Isometry3<f64> {
        *self.frames(q).last().expect("tool frame")
    }

    /// Geometric Jacobian of the tool point, linear rows first.
    pub fn jacobian(&self, q: &JointVector) -> SMatrix<f64, 6, RIGID_DOF> {
        let frames = self.frames(q);
        let tip = frames[RIGID_DOF].translation.vector;
        let mut jac = SMatrix::<f64, 6, RIGID_DOF>::zeros();
        for i in 0..RIGID_DOF {
            let z = frames[i].rotation * Vector3::z();
            let o = frames[i].translation.vector;
            let lin = z.cross(&(tip - o));
            jac.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
            jac.fixed_view_mut::<3, 1>(3, i).copy_from(&z);
        }
        jac
    }
}

fn pose_error(current: &Isometry3<f64>, target: &Isometry3<f64>) -> Vector6<f64> {
    let dp = target.translation.vector - current.translation.vector;
    let dr = (target.rotation * current.rotation.inverse()).scaled_axis();
    Vector6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigidIkConfig {
    pub damping: f64,
    pub max_iters: usize,
    pub pos_tol: f64,
    pub rot_tol: f64,
}

impl Default for RigidIkConfig {
    fn default() -> Self {
        Self { damping: 0.05, max_iters: 200, pos_tol: 1e-4, rot_tol: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigidIkResult {
    pub q: JointVector,
    pub converged: bool,
    pub iterations: usize,
    pub position_error: f64,
    pub rotation_error: f64,
}

/// Damped-least-squares IK from `q_init`, clamping to the joint limits after
/// every iterate. The best iterate is returned when the tolerances are not met.
pub fn rigid_ik(arm: &RigidArm, target: &Isometry3<f64>, q_init: &JointVector, cfg: &RigidIkConfig) -> RigidIkResult {
    let lambda2 = cfg.damping * cfg.damping;
    let mut q = arm.clamp(q_init);
    let measure = |q: &JointVector| {
        let e = pose_error(&arm.fk(q), target);
        (e, e.fixed_rows::<3>(0).norm(), e.fixed_rows::<3>(3).norm())
    };
    let (mut e, mut pe, mut re) = measure(&q);
    let mut best = RigidIkResult { q, converged: false, iterations: 0, position_error: pe, rotation_error: re };
    let score = |p: f64, r: f64| p + 0.1 * r;
    for it in 0..=cfg.max_iters {
        if pe < cfg.pos_tol && re < cfg.rot_tol {
            return RigidIkResult { q, converged: true, iterations: it, position_error: pe, rotation_error: re };
        }
        if score(pe, re) < score(best.position_error, best.rotation_error) {
            best = RigidIkResult { q, converged: false, iterations: it, position_error: pe, rotation_error: re };
        }
        if it == cfg.max_iters || !pe.is_finite() {
            break;
        }
        let j = arm.jacobian(&q);
        let jjt = j * j.transpose() + SMatrix::<f64, 6, 6>::identity() * lambda2;
        let Some(step) = jjt.cholesky().map(|c| j.transpose() * c.solve(&Matrix6x1::from(e))) else {
            break;
        };
        q = arm.clamp(&(q + step));
        (e, pe, re) = measure(&q);
    }
    best.iterations = cfg.max_iters;
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigidReachConfig {
    /// Random draws of joints 2 to 7.
    pub draws: usize,
    /// Evenly spaced first-joint angles per draw.
    pub yaw_steps: usize,
    /// Half-angle of the downward cone, degrees.
    pub cone_deg: f64,
    pub voxel_size: f64,
    pub seed: u64,
    pub dilate: bool,
    /// Also solve straight-down IK on a radius-height grid in one vertical
    /// plane and sweep the solutions over the first-joint range.
    pub ik_grid: bool,
}

impl Default for RigidReachConfig {
    fn default() -> Self {
        Self { draws: 100_000, yaw_steps: 90, cone_deg: 10.0, voxel_size: 0.02, seed: 0, dilate: true, ik_grid: true }
    }
}

/// True when the tool z-axis is within `cone_deg` of world down.
pub fn points_down(pose: &Isometry3<f64>, cone_deg: f64) -> bool {
    let z = pose.rotation * Vector3::z();
    -z.z >= cone_deg.to_radians().cos()
}

/// Tool positions reachable with the tool pointing down.
///
/// Joints 2 to 7 are drawn uniformly inside their limits; the downward test
/// does not depend on joint 1, so every kept draw is swept over `yaw_steps`
/// evenly spaced first-joint angles.
pub fn rigid_reach_points(arm: &RigidArm, cfg: &RigidReachConfig) -> Result<Vec<Isometry3<f64>>, KinematicsError> {
    arm.validate()?;
    if cfg.draws == 0 || cfg.yaw_steps == 0 {
        return Err(KinematicsError::Config("draws and yaw_steps must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let j1 = arm.joints[0];
    let span = j1.upper - j1.lower;
    let full_turn = span >= std::f64::consts::TAU - 1e-12;
    let steps = cfg.yaw_steps;
    let mut out = Vec::new();
    for _ in 0..cfg.draws {
        let mut q = JointVector::zeros();
        for i in 1..RIGID_DOF {
            q[i] = rng.gen_range(arm.joints[i].lower..=arm.joints[i].upper);
        }
        let base = arm.fk(&q);
        if !points_down(&base, cfg.cone_deg) {
            continue;
        }
        for k in 0..steps {
            let yaw = if full_turn || steps == 1 {
                j1.lower + span * k as f64 / steps as f64
            } else {
                j1.lower + span * k as f64 / (steps - 1) as f64
            };
            out.push(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw) * base);
        }
    }
    Ok(out)
}

/// Tool positions with a straight-down IK solution.
///
/// Heights and radii are stepped at half a voxel in the x-z half plane; each
/// row warm-starts from its previous solution. Every solution is then swept
/// about the base axis over the angles its first joint allows.
pub fn rigid_ik_grid_points(arm: &RigidArm, voxel_size: f64) -> Result<Vec<Vector3<f64>>, KinematicsError> {
    arm.validate()?;
    if !(voxel_size > 0.0) {
        return Err(KinematicsError::Config("voxel_size must be positive".into()));
    }
    let reach: f64 = arm.joints.iter().map(|j| j.a.abs() + j.d.abs()).sum::<f64>() + arm.tool_offset.abs();
    let step = 0.5 * voxel_size;
    let n = (reach / step).ceil() as usize;
    let cfg = RigidIkConfig { max_iters: 100, ..RigidIkConfig::default() };
    let j1 = arm.joints[0];
    let solutions: Vec<(f64, f64, f64)> = (0..=2 * n)
        .into_par_iter()
        .flat_map_iter(|iz| {
            let z = -reach + iz as f64 * step;
            let mut warm: Option<JointVector> = None;
            let mut row = Vec::new();
            for ir in 0..=n {
                let r = ir as f64 * step;
                let target = downward_pose(Vector3::new(r, 0.0, z), 0.0);
                let seeds = warm.into_iter().chain(std::iter::once(arm.home()));
                warm = seeds.map(|s| rigid_ik(arm, &target, &s, &cfg)).find(|res| res.converged).map(|res| res.q);
                if let Some(q) = warm {
                    row.push((r, z, q[0]));
                }
            }
            row
        })
        .collect();
    let mut out = Vec::new();
    for (r, z, q1) in solutions {
        let (lo, hi) = (j1.lower - q1, j1.upper - q1);
        let count = if r > 0.0 { ((hi - lo) * r / step).ceil() as usize } else { 0 };
        for k in 0..=count {
            let phi = if count == 0 { 0.0 } else { lo + (hi - lo) * k as f64 / count as f64 };
            out.push(Vector3::new(r * phi.cos(), r * phi.sin(), z));
        }
    }
    Ok(out)
}

/// Voxel map of [`rigid_reach_points`], joined with
/// [`rigid_ik_grid_points`] when `ik_grid` is set.
pub fn rigid_reach_map(arm: &RigidArm, cfg: &RigidReachConfig) -> Result<ReachMap, KinematicsError> {
    let poses = rigid_reach_points(arm, cfg)?;
    let mut points: Vec<Vector3<f64>> = poses.iter().map(|p| p.translation.vector).collect();
    if cfg.ik_grid {
        points.extend(rigid_ik_grid_points(arm, cfg.voxel_size)?);
    }
    let mut map = ReachMap::enclosing(&points, cfg.voxel_size, 0.0)?;
    for p in &points {
        map.mark(p);
    }
    map.sample_count = cfg.draws * cfg.yaw_steps;
    if cfg.dilate {
        map.dilate();
    }
    Ok(map)
}

/// Tool pose at `position` pointing straight down with the tool x-axis at
/// `yaw` radians about world z.
pub fn downward_pose(position: Vector3<f64>, yaw: f64) -> Isometry3<f64> {
    let flip = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI);
    let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw) * flip;
    Isometry3::from_parts(Translation3::from(position), rot)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_q(arm: &RigidArm, rng: &mut ChaCha8Rng) -> JointVector {
        JointVector::from_fn(|i, _| {
            let j = arm.joints[i];
            let margin = 0.1 * (j.upper - j.lower);
            rng.gen_range(j.lower + margin..=j.upper - margin)
        })
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let arm = RigidArm::default();
        let q = arm.home();
        let jac = arm.jacobian(&q);
        let h = 1e-6;
        for i in 0..RIGID_DOF {
            let mut qp = q;
            qp[i] += h;
            let mut qm = q;
            qm[i] -= h;
            let (a, b) = (arm.fk(&qp), arm.fk(&qm));
            let dp = (a.translation.vector - b.translation.vector) / (2.0 * h);
            let dr = (a.rotation * b.rotation.inverse()).scaled_axis() / (2.0 * h);
            for k in 0..3 {
                assert!((jac[(k, i)] - dp[k]).abs() < 1e-6);
                assert!((jac[(k + 3, i)] - dr[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn target_at_the_start_needs_no_iterations() {
        let arm = RigidArm::default();
        let q = arm.home();
        let r = rigid_ik(&arm, &arm.fk(&q), &q, &RigidIkConfig::default());
        assert!(r.converged);
        assert_eq!(r.iterations, 0);
        assert_eq!(r.q, q);
    }

    #[test]
    fn reaches_poses_from_random_configurations() {
        let arm = RigidArm::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = RigidIkConfig::default();
        for _ in 0..10 {
            let goal = random_q(&arm, &mut rng);
            let start = arm.clamp(&(goal + JointVector::from_fn(|_, _| rng.gen_range(-0.3..0.3))));
            let r = rigid_ik(&arm, &arm.fk(&goal), &start, &cfg);
            assert!(r.converged, "{r:?}");
            assert!(r.position_error < 1e-4);
            assert!(arm.within_limits(&r.q));
        }
    }

    #[test]
    fn out_of_reach_target_is_flagged() {
        let arm = RigidArm::default();
        let target = downward_pose(Vector3::new(3.0, 0.0, 0.5), 0.0);
        let r = rigid_ik(&arm, &target, &arm.home(), &RigidIkConfig::default());
        assert!(!r.converged);
        assert!(r.position_error > 1.0);
        assert!(arm.within_limits(&r.q));
    }

    #[test]
    fn downward_map_keeps_only_downward_poses() {
        let arm = RigidArm::default();
        let cfg = RigidReachConfig { draws: 20_000, yaw_steps: 12, ik_grid: false, ..RigidReachConfig::default() };
        let poses = rigid_reach_points(&arm, &cfg).unwrap();
        assert!(!poses.is_empty());
        assert!(poses.iter().all(|p| points_down(p, 10.0 + 1e-9)));
        let map = rigid_reach_map(&arm, &cfg).unwrap();
        for p in poses.iter().step_by(97) {
            assert!(map.contains(&p.translation.vector));
        }
        assert!(!map.contains(&Vector3::zeros()));
        assert!(!map.contains(&Vector3::new(2.0, 0.0, 0.3)));
    }

    #[test]
    fn yaw_symmetric_arm_gives_a_yaw_symmetric_map() {
        let mut arm = RigidArm::default();
        arm.joints[0].lower = -std::f64::consts::PI;
        arm.joints[0].upper = std::f64::consts::PI;
        let cfg = RigidReachConfig { draws: 20_000, yaw_steps: 36, dilate: false, ..RigidReachConfig::default() };
        let poses = rigid_reach_points(&arm, &cfg).unwrap();
        // A quarter turn maps the sample set onto itself, so occupancy of a
        // grid centred on the base axis must match its own rotated copy.
        let v = cfg.voxel_size;
        let cell = |p: &Vector3<f64>| ((p.x / v).floor() as i64, (p.y / v).floor() as i64, (p.z / v).floor() as i64);
        let occupied: std::collections::HashSet<_> = poses.iter().map(|p| cell(&p.translation.vector)).collect();
        let mismatched = occupied.iter().filter(|&&(x, y, z)| !occupied.contains(&(-y - 1, x, z))).count();
        assert!(mismatched as f64 <= 0.01 * occupied.len() as f64, "{mismatched} of {}", occupied.len());
    }

    #[test]
    fn ik_grid_points_are_reachable_pointing_down() {
        let arm = RigidArm::default();
        let pts = rigid_ik_grid_points(&arm, 0.04).unwrap();
        assert!(pts.len() > 1000);
        let cfg = RigidIkConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let seeds: Vec<JointVector> =
            std::iter::once(arm.home()).chain((0..40).map(|_| random_q(&arm, &mut rng))).collect();
        for p in pts.iter().step_by(pts.len() / 15) {
            let yaw = p.y.atan2(p.x);
            let solved = [yaw, yaw + std::f64::consts::PI]
                .iter()
                .any(|&y| seeds.iter().any(|s| rigid_ik(&arm, &downward_pose(*p, y), s, &cfg).converged));
            assert!(solved, "{p:?}");
        }
    }

    #[test]
    fn ik_grid_fills_the_map_around_a_ready_pose() {
        let arm = RigidArm::default();
        let cfg = RigidReachConfig { draws: 1, ..RigidReachConfig::default() };
        let map = rigid_reach_map(&arm, &cfg).unwrap();
        for p in [[0.45, 0.0, 0.6], [0.5, 0.0, 0.5], [0.0, 0.5, 0.4], [-0.4, 0.3, 0.3]] {
            assert!(map.contains(&Vector3::from(p)), "{p:?}");
        }
        assert!(!map.contains(&Vector3::new(2.0, 0.0, 0.3)));
    }

    #[test]
    fn rejects_malformed_arms() {
        let mut arm = RigidArm::default();
        arm.joints.pop();
        assert!(arm.validate().is_err());
        let mut arm = RigidArm::default();
        arm.joints[2].lower = 5.0;
        assert!(rigid_reach_map(&arm, &RigidReachConfig::default()).is_err());
    }
}
