//! Digital twin of a cable-driven spiral soft arm.
//!
//! The arm is modelled as a chain of tapered rigid segments joined by
//! two-axis elastic joints and actuated by three cables. The crate covers
//! simulation, trajectory I/O and filtering, parameter identification,
//! reachability and inverse kinematics, and the teleoperation session logic.

pub mod arm;
pub mod dynamics;
pub mod ident;
pub mod kinematics;
pub mod metrics;
pub mod real;
pub mod teleop;
pub mod trajectory;

pub use arm::{build_arm, ArmGeometry, ArmModel, ArmParameters, ArmState, ParamFile};
pub use dynamics::{settle, step, SimConfig, SimError, Simulator, TendonCommand};
pub use real::Real;
pub use trajectory::{Frame, Pose, Trajectory};

pub type ArmModelF32 = ArmModel<f32>;
pub type ArmModelF64 = ArmModel<f64>;
pub type ArmStateF32 = ArmState<f32>;
pub type ArmStateF64 = ArmState<f64>;
pub type TrajectoryF32 = Trajectory<f32>;
pub type TrajectoryF64 = Trajectory<f64>;
pub type SimConfigF32 = SimConfig<f32>;
pub type SimConfigF64 = SimConfig<f64>;
