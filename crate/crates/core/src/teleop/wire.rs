//! JSON messages exchanged with the operator console.
//!
//! Every message is an object with a `type` tag. Unknown fields are ignored;
//! unknown types and malformed payloads are answered with a `bad_message`
//! error.

use serde::{Deserialize, Serialize};

use super::session::{Hand, Phase, SceneObject, Snapshot};
use crate::kinematics::ReachMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    SetRay { hand: Hand, origin: [f64; 3], direction: [f64; 3], length: f64 },
    Preview,
    Confirm,
    Abort,
    Reset,
    AddObject(SceneObject),
}

impl ClientMessage {
    pub fn parse(text: &str) -> Result<Self, WireError> {
        serde_json::from_str(text).map_err(|e| WireError { code: ErrorCode::BadMessage, message: e.to_string() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadMessage,
    InvalidPhase,
    InvalidRay,
    InvalidObject,
    UnreachableRigid,
    UnreachableSoft,
    SimulationFailed,
    ChannelUnavailable,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::BadMessage => "bad_message",
            ErrorCode::InvalidPhase => "invalid_phase",
            ErrorCode::InvalidRay => "invalid_ray",
            ErrorCode::InvalidObject => "invalid_object",
            ErrorCode::UnreachableRigid => "unreachable_rigid",
            ErrorCode::UnreachableSoft => "unreachable_soft",
            ErrorCode::SimulationFailed => "simulation_failed",
            ErrorCode::ChannelUnavailable => "channel_unavailable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{}: {message}", code.as_str())]
pub struct WireError {
    pub code: ErrorCode,
    pub message: String,
}

impl WireError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentPose {
    pub p: [f64; 3],
    /// `[w, x, y, z]`
    pub q: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMessage {
    pub phase: Phase,
    pub sim_time: f64,
    pub rigid_joints: Vec<f64>,
    pub soft_segments: Vec<SegmentPose>,
    pub tendon_lengths: [f64; 3],
}

impl StateMessage {
    pub fn new(phase: Phase, snap: &Snapshot) -> Self {
        Self {
            phase,
            sim_time: snap.sim_time,
            rigid_joints: snap.rigid_joints.to_vec(),
            soft_segments: snap
                .soft_segments
                .iter()
                .map(|pose| SegmentPose { p: pose.position.into(), q: pose.quat_wxyz() })
                .collect(),
            tendon_lengths: snap.tendon_lengths,
        }
    }
}

/// Frames of a simulated motion, times relative to the motion start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFrame {
    pub t: f64,
    pub rigid_joints: Vec<f64>,
    pub soft_segments: Vec<SegmentPose>,
    pub tendon_lengths: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    State(StateMessage),
    ReachMap {
        /// `soft` maps are in the soft-arm base frame, `rigid` maps in the world frame.
        kind: String,
        gravity_angle_deg: f64,
        voxel_size: f64,
        origin: [f64; 3],
        dims: [usize; 3],
        occupancy: String,
    },
    Plan {
        yaw: f64,
        yaw_change: f64,
        gravity_angle: f64,
        tendon_lengths: [f64; 3],
        predicted_tip: [f64; 3],
        predicted_error_m: f64,
    },
    PreviewTrajectory {
        rate_hz: f64,
        frames: Vec<TrajectoryFrame>,
    },
    Verdict {
        grasped: bool,
        /// `grasped`, `not_wrapped` or `no_object`.
        reason: String,
        object: Option<usize>,
        segments_near: usize,
        wrap_deg: f64,
    },
    ExecutionReport {
        e_internal_m: f64,
        frames: usize,
        aborted: bool,
    },
    Error {
        code: ErrorCode,
        message: String,
    },
}

impl ServerMessage {
    pub fn error(e: &WireError) -> Self {
        ServerMessage::Error { code: e.code, message: e.message.clone() }
    }

    pub fn reach_map(kind: &str, map: &ReachMap) -> Self {
        let v: serde_json::Value = serde_json::from_str(&map.to_json()).expect("map JSON");
        let f = |k: &str| v[k].clone();
        ServerMessage::ReachMap {
            kind: kind.into(),
            gravity_angle_deg: map.gravity_angle.to_degrees(),
            voxel_size: map.voxel_size,
            origin: map.origin.into(),
            dims: map.dims,
            occupancy: serde_json::from_value(f("occupancy")).expect("occupancy string"),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server message serializes")
    }
}
