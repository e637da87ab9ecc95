use serde::{Deserialize, Serialize};

use super::KinematicsError;
use crate::arm::{ArmModel, ArmState};
use crate::dynamics::{ChainKinematics, SimConfig, SimError, Simulator, TendonCommand};
use crate::trajectory::Pose;

/// Largest cable contraction sampled by maps and datasets, meters.
pub const DEFAULT_MAX_CONTRACTION: f64 = 0.1;

/// Pose of the distal end of the last segment.
pub fn tip_pose(model: &ArmModel, theta: &[f64]) -> Pose {
    let kin = ChainKinematics::compute(model, theta);
    Pose::new(kin.tip(), kin.orientation(model.n_joints() - 1))
}

/// Settling configuration for quasi-static forward kinematics.
pub fn fk_sim_config() -> SimConfig {
    SimConfig { settle_damping_ratio: Some(0.7), settle_dt: Some(5e-3), ..SimConfig::default() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftFk {
    pub tip: Pose,
    pub theta: Vec<f64>,
    /// False when the settle timed out; `tip` is then the last state reached.
    pub converged: bool,
}

/// Settles the arm from straight under `cmd` with the base axis at
/// `gravity_angle` radians from gravity and returns the tip pose.
pub fn soft_fk(
    model: &ArmModel,
    cmd: &TendonCommand,
    gravity_angle: f64,
    sim: &SimConfig,
) -> Result<SoftFk, KinematicsError> {
    cmd.validate(model).map_err(KinematicsError::Command)?;
    let mut simulator = Simulator::new(model, sim.with_tilt(gravity_angle))?;
    let mut state = ArmState::rest(model);
    let converged = match simulator.settle(&mut state, Some(cmd)) {
        Ok(_) => true,
        Err(SimError::Timeout { state: last, .. }) => {
            state = *last;
            false
        }
        Err(e) => return Err(e.into()),
    };
    Ok(SoftFk { tip: tip_pose(model, &state.theta), theta: state.theta, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arm::{build_arm, tendon_station_dirs, ArmGeometry, ArmParameters};
    use approx::assert_relative_eq;

    fn desk() -> ArmModel {
        let g = ArmGeometry::desk();
        build_arm(g.clone(), ArmParameters::reference(&g)).unwrap()
    }

    #[test]
    fn unactuated_weightless_arm_is_straight() {
        let m = desk();
        let sim = SimConfig { gravity_mag: 0.0, ..fk_sim_config() };
        let fk = soft_fk(&m, &TendonCommand::straight(&m), 0.0, &sim).unwrap();
        assert!(fk.converged);
        assert_relative_eq!(fk.tip.position, nalgebra::Vector3::new(0.0, 0.0, m.total_length()), epsilon = 1e-12);
    }

    #[test]
    fn equal_pull_on_two_cables_bends_between_them() {
        // Cables 2 and 3 sit mirror-symmetric about the x-z plane, which is
        // also a symmetry plane of the two-axis joints.
        let m = desk();
        let mut cmd = TendonCommand::straight(&m);
        cmd.target_lengths[1] -= 0.04;
        cmd.target_lengths[2] -= 0.04;
        let fk = soft_fk(&m, &cmd, 0.0, &fk_sim_config()).unwrap();
        let d = tendon_station_dirs::<f64>();
        let mid = nalgebra::Vector2::new(d[1][0] + d[2][0], d[1][1] + d[2][1]).normalize();
        let p = fk.tip.position;
        let off_plane = p.x * mid.y - p.y * mid.x;
        assert!(off_plane.abs() < 1e-9, "{off_plane}");
        assert!(p.x * mid.x + p.y * mid.y > 0.02);
    }

    #[test]
    fn larger_contraction_moves_the_tip_further() {
        let m = desk();
        let sim = fk_sim_config();
        let straight = soft_fk(&m, &TendonCommand::straight(&m), 0.0, &sim).unwrap().tip.position;
        let shift =
            |c: f64| (soft_fk(&m, &TendonCommand::bend(&m, 0.3, c), 0.0, &sim).unwrap().tip.position - straight).norm();
        let (small, large) = (shift(0.02), shift(0.1));
        assert!(large > small && small > 0.0, "{small} {large}");
    }

    #[test]
    fn rejects_commands_outside_the_actuator_range() {
        let m = desk();
        let cmd = TendonCommand::new([10.0, 0.5, 0.5]);
        assert!(matches!(soft_fk(&m, &cmd, 0.0, &fk_sim_config()), Err(KinematicsError::Command(_))));
    }
}
