//! Bimanual teleoperation of the rigid arm and the soft arm mounted on it.

mod assets;
mod grasp;
mod plan;
mod session;
mod wire;

pub use assets::{build_assets, default_ready_joints, AssetBuildConfig};
pub use grasp::{grasp_check, wrap_angle_deg, GraspConfig, GraspReason, GraspVerdict};
pub use plan::{
    mount_gravity_angle, resolve_targets, simulate_motion, tool_yaw, wrap_angle, Motion, MotionFrame, MotionPlan,
    RobotState, TeleopAssets,
};
pub use session::{ExecutionReport, Hand, Phase, Preview, SceneObject, Snapshot, TeleopConfig, TeleopSession};
pub use wire::{ClientMessage, ErrorCode, SegmentPose, ServerMessage, StateMessage, TrajectoryFrame, WireError};
