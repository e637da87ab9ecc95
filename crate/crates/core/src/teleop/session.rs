//! The operator session state machine.
//!
//! ```text
//! Idle -> TargetSet -> Previewing -> PreviewReady -> Executing -> Done -> Idle
//!                         ^               |
//!                         +-- TargetSet <-+  (target edit)
//! any -> Error -> Idle (reset)
//! ```
//!
//! The session is synchronous: every client message returns the server
//! messages it produces. Execution is streamed frame by frame through
//! [`TeleopSession::stream_next`] so a server can pace it in real time.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::grasp::{grasp_check, GraspConfig, GraspVerdict};
use super::plan::{resolve_targets, simulate_motion, Motion, MotionPlan, RobotState, TeleopAssets};
use super::wire::{ClientMessage, ErrorCode, SegmentPose, ServerMessage, StateMessage, TrajectoryFrame, WireError};
use crate::dynamics::SimConfig;
use crate::kinematics::{fk_sim_config, RigidIkConfig, RIGID_DOF};
use crate::metrics::internal_error;
use crate::trajectory::Pose;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    TargetSet,
    Previewing,
    PreviewReady,
    Executing,
    Done,
    Error,
}

/// The left hand places the rigid arm, the right hand the soft-arm tip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hand {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum SceneObject {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    /// `size` holds the full edge lengths.
    Box {
        center: [f64; 3],
        size: [f64; 3],
    },
}

impl SceneObject {
    pub fn center(&self) -> Vector3<f64> {
        match self {
            SceneObject::Sphere { center, .. } | SceneObject::Box { center, .. } => Vector3::from(*center),
        }
    }

    /// Radius used by the grasp check; half the longest edge for boxes.
    pub fn radius(&self) -> f64 {
        match self {
            SceneObject::Sphere { radius, .. } => *radius,
            SceneObject::Box { size, .. } => 0.5 * size.iter().fold(0.0f64, |m, s| m.max(*s)),
        }
    }

    pub fn validate(&self) -> Result<(), WireError> {
        let ok = match self {
            SceneObject::Sphere { center, radius } => {
                center.iter().all(|c| c.is_finite()) && *radius > 0.0 && radius.is_finite()
            }
            SceneObject::Box { center, size } => {
                center.iter().all(|c| c.is_finite()) && size.iter().all(|s| *s > 0.0 && s.is_finite())
            }
        };
        if ok {
            Ok(())
        } else {
            Err(WireError::new(ErrorCode::InvalidObject, "object needs a finite center and positive dimensions"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeleopConfig {
    /// Lag between the preview and the physical arm, seconds.
    pub delay_s: f64,
    /// State update rate during execution, Hz.
    pub stream_hz: f64,
    /// Speed of the fastest-moving rigid joint, rad/s.
    pub joint_speed: f64,
    /// Time the soft arm is driven after the rigid motion, seconds.
    pub curl_s: f64,
    pub ray_length_min: f64,
    pub ray_length_max: f64,
    /// Horizontal offset below which the soft target counts as straight below, meters.
    pub yaw_deadband: f64,
    /// Orientation refinements of the learned inverse kinematics.
    pub ik_refinements: usize,
    pub grasp: GraspConfig,
    pub rigid_ik: RigidIkConfig,
    pub sim: SimConfig,
    pub fk_sim: SimConfig,
}

impl Default for TeleopConfig {
    fn default() -> Self {
        Self {
            delay_s: 0.5,
            stream_hz: 60.0,
            joint_speed: 0.8,
            curl_s: 2.5,
            ray_length_min: 0.05,
            ray_length_max: 3.0,
            yaw_deadband: 1e-3,
            ik_refinements: 3,
            grasp: GraspConfig::default(),
            rigid_ik: RigidIkConfig::default(),
            sim: SimConfig::default(),
            fk_sim: fk_sim_config(),
        }
    }
}

impl TeleopConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("stream_hz", self.stream_hz),
            ("joint_speed", self.joint_speed),
            ("curl_s", self.curl_s),
            ("ray_length_min", self.ray_length_min),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive"));
            }
        }
        if !(self.delay_s >= 0.0 && self.delay_s.is_finite()) {
            return Err("delay_s must be non-negative".into());
        }
        if !(self.ray_length_max >= self.ray_length_min) {
            return Err("ray_length_max must be at least ray_length_min".into());
        }
        if !(self.yaw_deadband >= 0.0) || self.grasp.margin < 0.0 {
            return Err("yaw_deadband and grasp.margin must be non-negative".into());
        }
        self.sim.validate().map_err(|e| format!("sim: {e}"))?;
        self.fk_sim.validate().map_err(|e| format!("fk_sim: {e}"))?;
        Ok(())
    }
}

/// Robot state at one instant, world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub sim_time: f64,
    pub rigid_joints: [f64; RIGID_DOF],
    pub soft_segments: Vec<Pose>,
    pub tendon_lengths: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preview {
    pub plan: MotionPlan,
    pub motion: Motion,
    pub verdict: GraspVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    /// Internal error between the previewed and executed soft-arm motion, meters.
    pub e_internal_m: f64,
    /// Executed motion frames compared.
    pub frames: usize,
    pub aborted: bool,
}

#[derive(Debug, Clone)]
struct Execution {
    preview: Motion,
    motion: Motion,
    /// Frames of hold before the motion starts.
    delay_frames: usize,
    /// Next stream index; hold frames come first, then motion frames after the start frame.
    cursor: usize,
    start_clock: f64,
}

impl Execution {
    fn total(&self) -> usize {
        self.delay_frames + self.motion.frames.len() - 1
    }

    /// Clock time and state of stream index `i`.
    fn frame(&self, i: usize) -> (f64, &RobotState) {
        let period = 1.0 / self.motion.rate_hz;
        if i < self.delay_frames {
            (self.start_clock + (i + 1) as f64 * period, &self.motion.frames[0].state)
        } else {
            let f = &self.motion.frames[i - self.delay_frames + 1];
            (self.start_clock + self.delay_frames as f64 * period + f.t, &f.state)
        }
    }
}

pub struct TeleopSession {
    assets: TeleopAssets,
    cfg: TeleopConfig,
    phase: Phase,
    rigid_target: Option<Vector3<f64>>,
    soft_target: Option<Vector3<f64>>,
    objects: Vec<SceneObject>,
    robot: RobotState,
    clock: f64,
    preview: Option<Preview>,
    execution: Option<Execution>,
    last_report: Option<ExecutionReport>,
}

fn invalid_phase(what: &str, phase: Phase) -> WireError {
    WireError::new(ErrorCode::InvalidPhase, format!("{what} is not allowed in phase {}", phase_name(phase)))
}

fn phase_name(phase: Phase) -> String {
    serde_json::to_value(phase).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

fn segment_poses_wire(poses: &[Pose]) -> Vec<SegmentPose> {
    poses.iter().map(|p| SegmentPose { p: p.position.into(), q: p.quat_wxyz() }).collect()
}

impl TeleopSession {
    pub fn new(assets: TeleopAssets, cfg: TeleopConfig) -> Result<Self, String> {
        cfg.validate()?;
        assets.rigid_arm.validate().map_err(|e| e.to_string())?;
        assets.ik.validate().map_err(|e| e.to_string())?;
        if assets.soft_maps.is_empty() {
            return Err("at least one soft reachability map is required".into());
        }
        if assets.preview_model.n_joints() != assets.physical_model.n_joints() {
            return Err("preview and physical models must have the same segment count".into());
        }
        let robot = RobotState::rest(&assets.physical_model, assets.initial_joints);
        Ok(Self {
            assets,
            cfg,
            phase: Phase::Idle,
            rigid_target: None,
            soft_target: None,
            objects: Vec::new(),
            robot,
            clock: 0.0,
            preview: None,
            execution: None,
            last_report: None,
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn config(&self) -> &TeleopConfig {
        &self.cfg
    }

    pub fn assets(&self) -> &TeleopAssets {
        &self.assets
    }

    pub fn targets(&self) -> (Option<Vector3<f64>>, Option<Vector3<f64>>) {
        (self.rigid_target, self.soft_target)
    }

    pub fn objects(&self) -> &[SceneObject] {
        &self.objects
    }

    pub fn preview(&self) -> Option<&Preview> {
        self.preview.as_ref()
    }

    pub fn last_report(&self) -> Option<&ExecutionReport> {
        self.last_report.as_ref()
    }

    pub fn robot(&self) -> &RobotState {
        &self.robot
    }

    pub fn snapshot(&self) -> Snapshot {
        self.snapshot_of(self.clock, &self.robot)
    }

    fn snapshot_of(&self, sim_time: f64, state: &RobotState) -> Snapshot {
        Snapshot {
            sim_time,
            rigid_joints: state.q.into(),
            soft_segments: state.soft_world(&self.assets.rigid_arm, &self.assets.physical_model),
            tendon_lengths: state.tendon_lengths,
        }
    }

    pub fn state_message(&self) -> ServerMessage {
        ServerMessage::State(StateMessage::new(self.phase, &self.snapshot()))
    }

    /// Soft maps in the base frame followed by the rigid map in the world frame.
    pub fn reach_map_messages(&self) -> Vec<ServerMessage> {
        let mut out: Vec<ServerMessage> =
            self.assets.soft_maps.iter().map(|m| ServerMessage::reach_map("soft", m)).collect();
        out.push(ServerMessage::reach_map("rigid", &self.assets.rigid_map));
        out
    }

    pub fn is_streaming(&self) -> bool {
        self.phase == Phase::Executing && self.execution.is_some()
    }

    /// Parses and handles one text frame.
    pub fn handle_text(&mut self, text: &str) -> Vec<ServerMessage> {
        match ClientMessage::parse(text) {
            Ok(msg) => self.handle(msg),
            Err(e) => vec![ServerMessage::error(&e)],
        }
    }

    pub fn handle(&mut self, msg: ClientMessage) -> Vec<ServerMessage> {
        let result = match msg {
            ClientMessage::SetRay { hand, origin, direction, length } => self.set_ray(hand, origin, direction, length),
            ClientMessage::Preview => self.run_preview(),
            ClientMessage::Confirm => self.confirm(),
            ClientMessage::Abort => self.abort(),
            ClientMessage::Reset => Ok(self.reset()),
            ClientMessage::AddObject(obj) => self.add_object(obj),
        };
        result.unwrap_or_else(|e| vec![ServerMessage::error(&e)])
    }

    fn set_ray(
        &mut self,
        hand: Hand,
        origin: [f64; 3],
        direction: [f64; 3],
        length: f64,
    ) -> Result<Vec<ServerMessage>, WireError> {
        if !matches!(self.phase, Phase::Idle | Phase::TargetSet | Phase::PreviewReady | Phase::Done) {
            return Err(invalid_phase("set_ray", self.phase));
        }
        let o = Vector3::from(origin);
        let d = Vector3::from(direction);
        if !(o.iter().all(|v| v.is_finite()) && d.iter().all(|v| v.is_finite()) && d.norm() > 1e-9) {
            return Err(WireError::new(
                ErrorCode::InvalidRay,
                "ray origin and direction must be finite and the direction nonzero",
            ));
        }
        let (lo, hi) = (self.cfg.ray_length_min, self.cfg.ray_length_max);
        if !(length >= lo && length <= hi) {
            return Err(WireError::new(ErrorCode::InvalidRay, format!("ray length {length} is outside [{lo}, {hi}]")));
        }
        let target = o + d.normalize() * length;
        if self.phase == Phase::Done {
            self.to_idle();
        }
        match hand {
            Hand::Left => self.rigid_target = Some(target),
            Hand::Right => self.soft_target = Some(target),
        }
        self.preview = None;
        self.phase =
            if self.rigid_target.is_some() && self.soft_target.is_some() { Phase::TargetSet } else { Phase::Idle };
        Ok(vec![self.state_message()])
    }

    fn add_object(&mut self, obj: SceneObject) -> Result<Vec<ServerMessage>, WireError> {
        match self.phase {
            Phase::Previewing | Phase::Executing | Phase::Error => return Err(invalid_phase("add_object", self.phase)),
            Phase::PreviewReady => {
                self.preview = None;
                self.phase = Phase::TargetSet;
            }
            _ => {}
        }
        obj.validate()?;
        self.objects.push(obj);
        Ok(vec![self.state_message()])
    }

    fn run_preview(&mut self) -> Result<Vec<ServerMessage>, WireError> {
        if self.phase != Phase::TargetSet {
            return Err(invalid_phase("preview", self.phase));
        }
        let (rigid, soft) = (self.rigid_target.expect("target set"), self.soft_target.expect("target set"));
        let plan = resolve_targets(&self.assets, &self.cfg, &self.robot.q, &rigid, &soft)?;
        self.phase = Phase::Previewing;
        let mut out = vec![self.state_message()];
        let motion = match simulate_motion(&self.assets.preview_model, &self.robot, &plan, &self.cfg) {
            Ok(m) => m,
            Err(e) => return Ok(self.fail(out, WireError::new(ErrorCode::SimulationFailed, e.to_string()))),
        };
        let end = motion.end().soft_world(&self.assets.rigid_arm, &self.assets.preview_model);
        let centroids: Vec<Vector3<f64>> = end.iter().map(|p| p.position).collect();
        let verdict = grasp_check(&centroids, &self.objects, &soft, &self.cfg.grasp);
        out.push(ServerMessage::Plan {
            yaw: plan.yaw,
            yaw_change: plan.yaw_change,
            gravity_angle: plan.gravity_angle,
            tendon_lengths: plan.command.target_lengths,
            predicted_tip: plan.predicted_tip.into(),
            predicted_error_m: plan.predicted_error,
        });
        out.push(self.trajectory_message(&motion));
        out.push(ServerMessage::Verdict {
            grasped: verdict.grasped,
            reason: verdict.reason.as_str().into(),
            object: verdict.object,
            segments_near: verdict.segments_near,
            wrap_deg: verdict.wrap_deg,
        });
        self.preview = Some(Preview { plan, motion, verdict });
        self.phase = Phase::PreviewReady;
        out.push(self.state_message());
        Ok(out)
    }

    fn trajectory_message(&self, motion: &Motion) -> ServerMessage {
        let frames = motion
            .frames
            .iter()
            .map(|f| TrajectoryFrame {
                t: f.t,
                rigid_joints: f.state.q.iter().copied().collect(),
                soft_segments: segment_poses_wire(
                    &f.state.soft_world(&self.assets.rigid_arm, &self.assets.preview_model),
                ),
                tendon_lengths: f.state.tendon_lengths,
            })
            .collect();
        ServerMessage::PreviewTrajectory { rate_hz: motion.rate_hz, frames }
    }

    fn confirm(&mut self) -> Result<Vec<ServerMessage>, WireError> {
        if self.phase != Phase::PreviewReady {
            return Err(invalid_phase("confirm", self.phase));
        }
        let preview = self.preview.as_ref().expect("preview ready");
        let motion = match simulate_motion(&self.assets.physical_model, &self.robot, &preview.plan, &self.cfg) {
            Ok(m) => m,
            Err(e) => return Ok(self.fail(Vec::new(), WireError::new(ErrorCode::ChannelUnavailable, e.to_string()))),
        };
        self.execution = Some(Execution {
            preview: preview.motion.clone(),
            motion,
            delay_frames: (self.cfg.delay_s * self.cfg.stream_hz).round() as usize,
            cursor: 0,
            start_clock: self.clock,
        });
        self.phase = Phase::Executing;
        Ok(vec![self.state_message()])
    }

    /// Emits the next executed frame, or the final messages once all frames
    /// have been sent. Empty when nothing is executing.
    pub fn stream_next(&mut self) -> Vec<ServerMessage> {
        let Some(exec) = self.execution.as_mut() else {
            return Vec::new();
        };
        if exec.cursor < exec.total() {
            let i = exec.cursor;
            exec.cursor += 1;
            let (t, state) = exec.frame(i);
            let (t, state) = (t, state.clone());
            self.clock = t;
            self.robot = state;
            return vec![self.state_message()];
        }
        let report = self.finish_execution(false);
        self.phase = Phase::Done;
        vec![
            self.state_message(),
            ServerMessage::ExecutionReport { e_internal_m: report.e_internal_m, frames: report.frames, aborted: false },
        ]
    }

    /// Streams the whole execution without pacing.
    pub fn run_execution(&mut self) -> Vec<ServerMessage> {
        let mut out = Vec::new();
        while self.is_streaming() {
            out.extend(self.stream_next());
        }
        out
    }

    fn finish_execution(&mut self, aborted: bool) -> ExecutionReport {
        let exec = self.execution.take().expect("execution in progress");
        let executed = exec.cursor.saturating_sub(exec.delay_frames).min(exec.motion.frames.len() - 1);
        let n = (executed + 1).min(exec.preview.frames.len());
        let mut preview = exec.preview.soft_trajectory(&self.assets.preview_model);
        let mut actual = exec.motion.soft_trajectory(&self.assets.physical_model);
        preview.frames.truncate(n);
        actual.frames.truncate(n);
        let e = internal_error(&preview, &actual).unwrap_or(f64::NAN);
        let report = ExecutionReport { e_internal_m: e, frames: executed, aborted };
        self.last_report = Some(report.clone());
        report
    }

    fn abort(&mut self) -> Result<Vec<ServerMessage>, WireError> {
        let mut out = Vec::new();
        match self.phase {
            Phase::Previewing | Phase::PreviewReady => {}
            Phase::Executing => {
                let r = self.finish_execution(true);
                out.push(ServerMessage::ExecutionReport {
                    e_internal_m: r.e_internal_m,
                    frames: r.frames,
                    aborted: true,
                });
            }
            p => return Err(invalid_phase("abort", p)),
        }
        self.preview = None;
        self.phase = Phase::TargetSet;
        out.insert(0, self.state_message());
        Ok(out)
    }

    fn to_idle(&mut self) {
        self.phase = Phase::Idle;
        self.rigid_target = None;
        self.soft_target = None;
        self.preview = None;
        self.execution = None;
    }

    /// Returns to Idle from any phase. Targets, preview and scene objects are
    /// cleared; the robot stays where it is.
    fn reset(&mut self) -> Vec<ServerMessage> {
        self.to_idle();
        self.objects.clear();
        vec![self.state_message()]
    }

    fn fail(&mut self, mut out: Vec<ServerMessage>, e: WireError) -> Vec<ServerMessage> {
        self.preview = None;
        self.execution = None;
        self.phase = Phase::Error;
        out.push(ServerMessage::error(&e));
        out.push(self.state_message());
        out
    }
}
