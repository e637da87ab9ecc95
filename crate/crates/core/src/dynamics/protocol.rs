//! Canned experiments used for identification and evaluation.

use serde::{Deserialize, Serialize};

use super::{SimConfig, SimError, Simulator, TendonCommand};
use crate::arm::{ArmModel, ArmState};
use crate::real::Real;
use crate::trajectory::Trajectory;

fn default_free_direction() -> f64 {
    180.0
}

fn default_duration() -> f64 {
    3.0
}

fn default_phase() -> f64 {
    1.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExperimentProtocol {
    /// Released arm settled under gravity at each base tilt, then held and
    /// recorded for `hold_s` more seconds.
    StaticTilt {
        angles_deg: Vec<f64>,
        #[serde(default)]
        hold_s: f64,
    },
    /// Arm held bent, then released and recorded while it swings back.
    FreeRelease {
        initial_contraction_mm: f64,
        #[serde(default = "default_free_direction")]
        direction_deg: f64,
        #[serde(default)]
        tilt_deg: f64,
        #[serde(default = "default_duration")]
        duration_s: f64,
    },
    /// Curl to each contraction level and straighten again.
    ActuationCycle {
        levels_mm: Vec<f64>,
        #[serde(default)]
        direction_deg: f64,
        #[serde(default)]
        tilt_deg: f64,
        #[serde(default = "default_phase")]
        curl_s: f64,
        #[serde(default = "default_phase")]
        release_s: f64,
    },
}

impl ExperimentProtocol {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// The protocol split into one protocol per produced trajectory.
    pub fn conditions(&self) -> Vec<ExperimentProtocol> {
        match self {
            Self::StaticTilt { angles_deg, hold_s } => {
                angles_deg.iter().map(|&a| Self::StaticTilt { angles_deg: vec![a], hold_s: *hold_s }).collect()
            }
            Self::FreeRelease { .. } => vec![self.clone()],
            Self::ActuationCycle { levels_mm, direction_deg, tilt_deg, curl_s, release_s } => levels_mm
                .iter()
                .map(|&l| Self::ActuationCycle {
                    levels_mm: vec![l],
                    direction_deg: *direction_deg,
                    tilt_deg: *tilt_deg,
                    curl_s: *curl_s,
                    release_s: *release_s,
                })
                .collect(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::StaticTilt { .. } => "static_tilt",
            Self::FreeRelease { .. } => "free_release",
            Self::ActuationCycle { .. } => "actuation_cycle",
        }
    }

    /// Number of trajectories the protocol produces.
    pub fn trajectory_count(&self) -> usize {
        match self {
            Self::StaticTilt { angles_deg, .. } => angles_deg.len(),
            Self::FreeRelease { .. } => 1,
            Self::ActuationCycle { levels_mm, .. } => levels_mm.len(),
        }
    }
}

/// Trajectories of a protocol run plus an audit of applied tensions.
#[derive(Debug, Clone)]
pub struct ProtocolRun<T: Real> {
    pub trajectories: Vec<Trajectory<T>>,
    /// Final state of each trajectory.
    pub final_states: Vec<ArmState<T>>,
    pub min_tension: T,
    pub max_tension: T,
    pub steps: u64,
}

pub fn run_protocol<T: Real>(
    model: &ArmModel<T>,
    protocol: &ExperimentProtocol,
    config: &SimConfig<T>,
) -> Result<Vec<Trajectory<T>>, SimError<T>> {
    run_protocol_detailed(model, protocol, config).map(|r| r.trajectories)
}

pub fn run_protocol_detailed<T: Real>(
    model: &ArmModel<T>,
    protocol: &ExperimentProtocol,
    config: &SimConfig<T>,
) -> Result<ProtocolRun<T>, SimError<T>> {
    let mut run = ProtocolRun {
        trajectories: Vec::new(),
        final_states: Vec::new(),
        min_tension: T::zero(),
        max_tension: T::zero(),
        steps: 0,
    };
    let audit = |sim: &Simulator<T>, run: &mut ProtocolRun<T>| {
        let (lo, hi) = sim.tension_range();
        run.min_tension = run.min_tension.min(lo);
        run.max_tension = run.max_tension.max(hi);
        run.steps += sim.steps_taken();
    };
    let deg = |d: f64| T::lit(d.to_radians());
    match protocol {
        ExperimentProtocol::StaticTilt { angles_deg, hold_s } => {
            for &a in angles_deg {
                let mut sim = Simulator::new(model, config.with_tilt(deg(a)))?;
                let mut state = ArmState::rest(model);
                let mut traj = sim.settle(&mut state, None)?;
                if *hold_s > 0.0 {
                    let offset = traj.end_time();
                    let hold = sim.record(&mut state, None, T::lit(*hold_s))?;
                    traj.frames.extend(hold.frames.into_iter().skip(1).map(|mut f| {
                        f.t += offset;
                        f
                    }));
                }
                audit(&sim, &mut run);
                run.trajectories.push(traj);
                run.final_states.push(state);
            }
        }
        ExperimentProtocol::FreeRelease { initial_contraction_mm, direction_deg, tilt_deg, duration_s } => {
            let mut sim = Simulator::new(model, config.with_tilt(deg(*tilt_deg)))?;
            let mut state = ArmState::rest(model);
            let bend = TendonCommand::bend(model, deg(*direction_deg), T::lit(initial_contraction_mm * 1e-3));
            sim.settle(&mut state, Some(&bend))?;
            let traj = sim.record(&mut state, None, T::lit(*duration_s))?;
            audit(&sim, &mut run);
            run.trajectories.push(traj);
            run.final_states.push(state);
        }
        ExperimentProtocol::ActuationCycle { levels_mm, direction_deg, tilt_deg, curl_s, release_s } => {
            let straight = TendonCommand::straight(model);
            for &level in levels_mm {
                let mut sim = Simulator::new(model, config.with_tilt(deg(*tilt_deg)))?;
                let mut state = ArmState::rest(model);
                let bend = TendonCommand::bend(model, deg(*direction_deg), T::lit(level * 1e-3));
                let traj = sim.record_phases(
                    &mut state,
                    &[(Some(&bend), T::lit(*curl_s)), (Some(&straight), T::lit(*release_s))],
                )?;
                audit(&sim, &mut run);
                run.trajectories.push(traj);
                run.final_states.push(state);
            }
        }
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arm::{build_arm, ArmGeometry, ArmParameters};
    use crate::dynamics::segment_poses;

    fn desk() -> ArmModel {
        let g = ArmGeometry::desk();
        build_arm(g.clone(), ArmParameters::reference(&g)).unwrap()
    }

    #[test]
    fn parses_run_config_shapes() {
        let p = ExperimentProtocol::from_json(r#"{"protocol":"static_tilt","angles_deg":[0,30,60,90]}"#).unwrap();
        assert_eq!(p, ExperimentProtocol::StaticTilt { angles_deg: vec![0.0, 30.0, 60.0, 90.0], hold_s: 0.0 });
        assert_eq!(p.trajectory_count(), 4);
        assert_eq!(p.conditions()[2], ExperimentProtocol::StaticTilt { angles_deg: vec![60.0], hold_s: 0.0 });
        let p = ExperimentProtocol::from_json(r#"{"protocol":"free_release","initial_contraction_mm":80}"#).unwrap();
        assert!(
            matches!(p, ExperimentProtocol::FreeRelease { direction_deg, duration_s, .. } if direction_deg == 180.0 && duration_s == 3.0)
        );
        let p = ExperimentProtocol::from_json(r#"{"protocol":"actuation_cycle","levels_mm":[20,40]}"#).unwrap();
        assert_eq!(p.trajectory_count(), 2);
        assert!(ExperimentProtocol::from_json(r#"{"protocol":"wiggle"}"#).is_err());
    }

    #[test]
    fn static_hold_extends_the_settled_tail() {
        let m = desk();
        let cfg = SimConfig::default();
        let bare =
            run_protocol(&m, &ExperimentProtocol::StaticTilt { angles_deg: vec![45.0], hold_s: 0.0 }, &cfg).unwrap();
        let held =
            run_protocol(&m, &ExperimentProtocol::StaticTilt { angles_deg: vec![45.0], hold_s: 0.5 }, &cfg).unwrap();
        assert_eq!(held[0].len(), bare[0].len() + 60);
        assert!(held[0].validate().is_ok());
        let (a, b) = (bare[0].last().unwrap(), held[0].last().unwrap());
        for (p, q) in a.poses.iter().zip(&b.poses) {
            let d = (p.position - q.position).norm();
            assert!(d < 5e-4, "{d}");
        }
    }

    #[test]
    fn upright_static_tilt_has_no_lateral_motion() {
        let m = desk();
        let p = ExperimentProtocol::StaticTilt { angles_deg: vec![0.0], hold_s: 0.0 };
        let trajs = run_protocol(&m, &p, &SimConfig::default()).unwrap();
        assert_eq!(trajs.len(), 1);
        for f in &trajs[0].frames {
            for pose in &f.poses {
                assert_eq!(pose.position.x, 0.0);
                assert_eq!(pose.position.y, 0.0);
            }
        }
    }

    #[test]
    fn free_release_starts_from_bent_equilibrium() {
        let m = desk();
        let cfg = SimConfig::default();
        let p = ExperimentProtocol::FreeRelease {
            initial_contraction_mm: 80.0,
            direction_deg: 180.0,
            tilt_deg: 0.0,
            duration_s: 1.0,
        };
        let run = run_protocol_detailed(&m, &p, &cfg).unwrap();
        let traj = &run.trajectories[0];
        assert_eq!(traj.len(), 121);
        let mut state = ArmState::rest(&m);
        let bend = TendonCommand::bend(&m, std::f64::consts::PI, 0.08);
        crate::dynamics::Simulator::new(&m, cfg).unwrap().settle(&mut state, Some(&bend)).unwrap();
        assert_eq!(traj.frames[0].poses, segment_poses(&m, &state.theta));
        // Ventral bend curls toward -x.
        assert!(traj.frames[0].poses[7].position.x < -0.05);
        assert!(run.min_tension >= 0.0 && run.max_tension <= m.params().force_range);
    }

    #[test]
    fn larger_actuation_reaches_further() {
        let m = desk();
        let p = ExperimentProtocol::ActuationCycle {
            levels_mm: vec![20.0, 100.0],
            direction_deg: 0.0,
            tilt_deg: 0.0,
            curl_s: 1.5,
            release_s: 1.5,
        };
        let trajs = run_protocol(&m, &p, &SimConfig::default()).unwrap();
        let peak = |t: &Trajectory| {
            let tip0 = t.frames[0].poses[7].position;
            t.frames.iter().map(|f| (f.poses[7].position - tip0).norm()).fold(0.0, f64::max)
        };
        assert_eq!(trajs[0].len(), 361);
        trajs[0].validate().unwrap();
        assert!(peak(&trajs[0]) < peak(&trajs[1]));
    }
}
