//! Forward kinematics, reachability maps and inverse kinematics for the soft
//! arm and the rigid carrier arm.

mod dataset;
mod mlp;
mod reach;
mod rigid;
mod soft;

use thiserror::Error;

use crate::dynamics::SimError;

pub use dataset::{from_csv, gen_ik_dataset, sample_command, to_csv, DatasetConfig, IkDataset, IkSample, CSV_HEADER};
pub use mlp::{
    evaluate_ik, length_mse, train_ik, IkEvaluation, MlpIkModel, TrainConfig, TrainReport, DEFAULT_HIDDEN, INPUT_DIM,
};
pub use reach::{
    build_reach_map, default_map_angles, nearest_map, query_reach, ReachMap, ReachSampling, DEFAULT_VOXEL,
};
pub use rigid::{
    downward_pose, points_down, rigid_ik, rigid_ik_grid_points, rigid_reach_map, rigid_reach_points, JointVector,
    RigidArm, RigidIkConfig, RigidIkResult, RigidJoint, RigidReachConfig, RIGID_DOF,
};
pub use soft::{fk_sim_config, soft_fk, tip_pose, SoftFk, DEFAULT_MAX_CONTRACTION};

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invalid tendon command: {0}")]
    Command(String),
    #[error("nothing to work with: empty input")]
    Empty,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("training diverged at epoch {epoch} (train mse {train_mse}, val mse {val_mse})")]
    Diverged { epoch: usize, train_mse: f64, val_mse: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
