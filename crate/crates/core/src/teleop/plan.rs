//! Target resolution and motion simulation for one teleoperation command.
//!
//! World frame: z up, rigid arm base at the origin. The soft arm hangs from
//! the rigid tool point with its base frame equal to the tool frame, so a
//! downward tool puts the soft arm along world -z with gravity along its axis.

use nalgebra::{Isometry3, UnitQuaternion, Vector3};
use std::f64::consts::PI;

use super::session::TeleopConfig;
use super::wire::{ErrorCode, WireError};
use crate::arm::{ArmModel, ArmState};
use crate::dynamics::{segment_poses, tendon_length, SimError, Simulator, TendonCommand};
use crate::kinematics::{downward_pose, query_reach, rigid_ik, soft_fk, JointVector, MlpIkModel, ReachMap, RigidArm};
use crate::trajectory::{Frame, Pose, Trajectory};

/// Everything a session needs besides its configuration.
#[derive(Debug, Clone)]
pub struct TeleopAssets {
    pub rigid_arm: RigidArm,
    /// Downward-tool reachability of the rigid arm, world frame.
    pub rigid_map: ReachMap,
    /// Soft-arm reachability maps, base frame, one per gravity angle.
    pub soft_maps: Vec<ReachMap>,
    pub ik: MlpIkModel,
    /// Identified model used for planning and preview.
    pub preview_model: ArmModel,
    /// Model stepped as the physical arm.
    pub physical_model: ArmModel,
    /// Joint configuration at session start.
    pub initial_joints: JointVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionPlan {
    pub q_start: JointVector,
    pub q_goal: JointVector,
    /// Tool pose at `q_goal`.
    pub mount: Isometry3<f64>,
    /// Tool x-axis heading about world z, radians.
    pub yaw: f64,
    pub yaw_change: f64,
    /// Angle between the soft-arm base axis and gravity, radians.
    pub gravity_angle: f64,
    pub soft_target_base: Vector3<f64>,
    pub command: TendonCommand,
    /// Settled tip under `command`, world frame.
    pub predicted_tip: Vector3<f64>,
    pub predicted_error: f64,
}

/// Heading of the tool x-axis about world z.
pub fn tool_yaw(pose: &Isometry3<f64>) -> f64 {
    let x = pose.rotation * Vector3::x();
    x.y.atan2(x.x)
}

/// Angle wrapped into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Angle between the tool z-axis and world down.
pub fn mount_gravity_angle(mount: &Isometry3<f64>) -> f64 {
    let z = mount.rotation * Vector3::z();
    (-z.z).clamp(-1.0, 1.0).acos()
}

/// Maps the two hand targets to a rigid joint goal and a soft command.
///
/// The tool is yawed so that the horizontal offset from `rigid_target` to
/// `soft_target` lies in the soft arm's base x-z plane; when the soft target
/// is directly below, the current heading is kept. Both headings along the
/// plane are tried, nearest first.
pub fn resolve_targets(
    assets: &TeleopAssets,
    cfg: &TeleopConfig,
    q_current: &JointVector,
    rigid_target: &Vector3<f64>,
    soft_target: &Vector3<f64>,
) -> Result<MotionPlan, WireError> {
    if !assets.rigid_map.contains(rigid_target) {
        return Err(WireError::new(ErrorCode::UnreachableRigid, "rigid target is outside the rigid reachability map"));
    }
    let arm = &assets.rigid_arm;
    let current_yaw = tool_yaw(&arm.fk(q_current));
    let offset = soft_target - rigid_target;
    let heading = if offset.xy().norm() < cfg.yaw_deadband { current_yaw } else { offset.y.atan2(offset.x) };
    let mut headings = [heading, wrap_angle(heading + PI)];
    headings.sort_by(|a, b| wrap_angle(a - current_yaw).abs().total_cmp(&wrap_angle(b - current_yaw).abs()));

    let seeds = [*q_current, arm.home()];
    let (yaw, q_goal) = headings
        .iter()
        .flat_map(|&yaw| seeds.iter().map(move |seed| (yaw, seed)))
        .find_map(|(yaw, seed)| {
            let r = rigid_ik(arm, &downward_pose(*rigid_target, yaw), seed, &cfg.rigid_ik);
            r.converged.then_some((yaw, r.q))
        })
        .ok_or_else(|| {
            WireError::new(ErrorCode::UnreachableRigid, "no downward joint solution for the rigid target")
        })?;

    let mount = arm.fk(&q_goal);
    let gravity_angle = mount_gravity_angle(&mount);
    let base = mount.inverse_transform_point(&(*soft_target).into()).coords;
    let inside = query_reach(&assets.soft_maps, gravity_angle, &base)
        .map_err(|e| WireError::new(ErrorCode::UnreachableSoft, e.to_string()))?;
    if !inside {
        return Err(WireError::new(ErrorCode::UnreachableSoft, "soft target is outside the soft reachability map"));
    }

    let model = &assets.preview_model;
    let mut orientation = UnitQuaternion::identity();
    let mut best: Option<(TendonCommand, Vector3<f64>, f64)> = None;
    for _ in 0..cfg.ik_refinements.max(1) {
        let cmd = TendonCommand::new(assets.ik.infer(gravity_angle, &Pose::new(base, orientation)));
        let fk = soft_fk(model, &cmd, gravity_angle, &cfg.fk_sim)
            .map_err(|e| WireError::new(ErrorCode::SimulationFailed, e.to_string()))?;
        let err = (fk.tip.position - base).norm();
        if best.as_ref().map_or(true, |b| err < b.2) {
            best = Some((cmd, fk.tip.position, err));
        }
        orientation = fk.tip.orientation;
    }
    let (command, tip, predicted_error) = best.expect("at least one refinement");
    Ok(MotionPlan {
        q_start: *q_current,
        q_goal,
        mount,
        yaw,
        yaw_change: wrap_angle(yaw - current_yaw),
        gravity_angle,
        soft_target_base: base,
        command,
        predicted_tip: mount.transform_point(&tip.into()).coords,
        predicted_error,
    })
}

/// Rigid joints and soft-arm state of the combined system.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotState {
    pub q: JointVector,
    pub soft: ArmState,
    /// Measured cable lengths.
    pub tendon_lengths: [f64; 3],
}

impl RobotState {
    pub fn rest(model: &ArmModel, q: JointVector) -> Self {
        let soft = ArmState::rest(model);
        Self { q, tendon_lengths: model.straight_tendon_lengths(), soft }
    }

    /// Soft segment centroid poses in the world frame.
    pub fn soft_world(&self, arm: &RigidArm, model: &ArmModel) -> Vec<Pose> {
        let mount = arm.fk(&self.q);
        segment_poses(model, &self.soft.theta)
            .into_iter()
            .map(|p| Pose::new(mount.transform_point(&p.position.into()).coords, mount.rotation * p.orientation))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionFrame {
    /// Seconds since the motion start.
    pub t: f64,
    pub state: RobotState,
}

/// A simulated motion sampled at a fixed rate; the first frame is the start.
#[derive(Debug, Clone, PartialEq)]
pub struct Motion {
    pub rate_hz: f64,
    pub frames: Vec<MotionFrame>,
}

impl Motion {
    pub fn end(&self) -> &RobotState {
        &self.frames.last().expect("motion has a start frame").state
    }

    /// Soft-arm centroid poses in the arm base frame.
    pub fn soft_trajectory(&self, model: &ArmModel) -> Trajectory {
        let mut traj = Trajectory::new(self.rate_hz);
        traj.frames =
            self.frames.iter().map(|f| Frame { t: f.t, poses: segment_poses(model, &f.state.soft.theta) }).collect();
        traj
    }

    pub fn duration(&self) -> f64 {
        self.frames.last().map_or(0.0, |f| f.t)
    }
}

/// Moves the rigid joints to the goal at bounded speed with the soft arm
/// held, then drives the soft arm to the commanded lengths for `curl_s`.
///
/// Each joint moves linearly; the slowest joint runs at `joint_speed`. The
/// soft arm is simulated with `model` at the plan's gravity angle.
pub fn simulate_motion(
    model: &ArmModel,
    start: &RobotState,
    plan: &MotionPlan,
    cfg: &TeleopConfig,
) -> Result<Motion, SimError> {
    let rate = cfg.stream_hz;
    let period = 1.0 / rate;
    let mut frames = vec![MotionFrame { t: 0.0, state: start.clone() }];
    let dq = plan.q_goal - start.q;
    let rigid_s = dq.amax() / cfg.joint_speed;
    let held = tendon_length(model, &start.soft.theta);
    let rigid_frames = (rigid_s * rate).ceil() as usize;
    for k in 1..=rigid_frames {
        let s = (k as f64 * period / rigid_s).min(1.0);
        let state = RobotState { q: start.q + dq * s, soft: start.soft.clone(), tendon_lengths: held };
        frames.push(MotionFrame { t: k as f64 * period, state });
    }
    let t0 = rigid_frames as f64 * period;

    let mut sim = Simulator::new(model, cfg.sim.with_tilt(plan.gravity_angle))?;
    let mut soft = start.soft.clone();
    let dt = cfg.sim.dt;
    let curl_frames = (cfg.curl_s * rate).round() as usize;
    let mut steps = 0usize;
    for k in 1..=curl_frames {
        let due = (k as f64 * period / dt).round() as usize;
        while steps < due {
            sim.advance(&mut soft, Some(&plan.command))?;
            steps += 1;
        }
        let state = RobotState { q: plan.q_goal, soft: soft.clone(), tendon_lengths: sim.last_report().tendon_lengths };
        frames.push(MotionFrame { t: t0 + k as f64 * period, state });
    }
    Ok(Motion { rate_hz: rate, frames })
}
