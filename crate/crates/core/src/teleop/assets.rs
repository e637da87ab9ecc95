use serde::{Deserialize, Serialize};

use super::plan::TeleopAssets;
use crate::arm::ArmModel;
use crate::kinematics::{
    build_reach_map, default_map_angles, fk_sim_config, gen_ik_dataset, rigid_reach_map, train_ik, DatasetConfig,
    JointVector, KinematicsError, ReachSampling, RigidArm, RigidReachConfig, TrainConfig,
};

/// Joint configuration of the default rigid arm with the tool pointing down.
pub fn default_ready_joints() -> JointVector {
    use std::f64::consts::PI;
    JointVector::from_column_slice(&[0.0, -PI / 4.0, 0.0, -3.0 * PI / 4.0, 0.0, PI / 2.0, PI / 4.0])
}

/// How to build session assets that were not supplied as files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssetBuildConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub soft_sampling: ReachSampling,
    pub rigid_reach: RigidReachConfig,
}

impl Default for AssetBuildConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            soft_sampling: ReachSampling::default(),
            rigid_reach: RigidReachConfig::default(),
        }
    }
}

/// Builds maps and the learned inverse kinematics from `preview_model`.
pub fn build_assets(
    preview_model: ArmModel,
    physical_model: ArmModel,
    rigid_arm: RigidArm,
    cfg: &AssetBuildConfig,
) -> Result<TeleopAssets, KinematicsError> {
    let rigid_map = rigid_reach_map(&rigid_arm, &cfg.rigid_reach)?;
    let soft_maps = default_map_angles()
        .into_iter()
        .map(|a| build_reach_map(&preview_model, a, &cfg.soft_sampling, &fk_sim_config()))
        .collect::<Result<Vec<_>, _>>()?;
    let data = gen_ik_dataset(&preview_model, &cfg.dataset)?;
    let (mut ik, _) = train_ik(&data.train, &data.val, &cfg.train)?;
    ik.set_actuation_bounds(&preview_model, cfg.dataset.max_contraction_m);
    Ok(TeleopAssets {
        initial_joints: default_ready_joints(),
        rigid_arm,
        rigid_map,
        soft_maps,
        ik,
        preview_model,
        physical_model,
    })
}
