//! Time stepping of the pseudo-rigid-body chain.
//!
//! Forces acting on the generalized coordinates: the viscoelastic joint
//! law `τ = −K(θ − θ0) − D·θ̇` (rest shape θ0 = 0), gravity on the segment
//! centroids, velocity-product terms, and cable tensions mapped through the
//! cable moment arms `∂l/∂θ` with capstan attenuation toward the tip.
//!
//! Integration is a linearly implicit Euler step: the joint springs and
//! dampers and the unsaturated actuator gains enter the step matrix, the
//! remaining forces are explicit, and positions are advanced with the new
//! velocities.

mod chain;
mod protocol;
mod tendon;

pub use chain::{bend_angle, joint_rotation, ChainKinematics};
pub use protocol::{run_protocol, run_protocol_detailed, ExperimentProtocol, ProtocolRun};
pub use tendon::{
    friction_attenuate, relax_actuator, tendon_length, tendon_length_and_jacobian, tendon_tensions, TendonCommand,
    Tension, ACT_MAX_RATIO, ACT_MIN_RATIO, MOMENT_ARM_STEP,
};

use nalgebra::{DMatrix, DVector, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm::{ArmModel, ArmState, TENDON_COUNT};
use crate::real::Real;
use crate::trajectory::{Frame, Pose, Trajectory, DEFAULT_RATE_HZ};

/// Speed above which the integration is declared diverged, rad/s.
pub const DIVERGENCE_SPEED: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig<T = f64> {
    /// Integration step, seconds.
    pub dt: T,
    /// Angle between the arm base axis and gravity, radians.
    pub gravity_tilt: T,
    pub gravity_mag: T,
    pub settle_vel_tol: T,
    pub settle_hold: T,
    pub timeout: T,
    /// Rate at which recorded trajectories are sampled, Hz.
    pub sample_rate_hz: T,
    /// Damping ratio used while settling instead of the model's own. The
    /// equilibrium does not depend on damping, only the time to reach it.
    pub settle_damping_ratio: Option<T>,
    /// Step used while settling instead of `dt`.
    pub settle_dt: Option<T>,
}

impl<T: Real> Default for SimConfig<T> {
    fn default() -> Self {
        Self {
            dt: T::lit(1e-3),
            gravity_tilt: T::zero(),
            gravity_mag: T::lit(9.81),
            settle_vel_tol: T::lit(1e-3),
            settle_hold: T::lit(0.2),
            timeout: T::lit(20.0),
            sample_rate_hz: T::lit(DEFAULT_RATE_HZ),
            settle_damping_ratio: None,
            settle_dt: None,
        }
    }
}

impl<T: Real> SimConfig<T> {
    pub fn validate(&self) -> Result<(), SimError<T>> {
        let mut v = Vec::new();
        for (name, dt) in [("dt", Some(self.dt)), ("settle_dt", self.settle_dt)] {
            if let Some(dt) = dt {
                if !(dt > T::zero() && dt <= T::lit(5e-3)) {
                    v.push(format!("{name} must lie in (0, 5e-3], got {}", dt.as_f64()));
                }
            }
        }
        if matches!(self.settle_damping_ratio, Some(z) if !(z >= T::zero())) {
            v.push("settle_damping_ratio must be non-negative".into());
        }
        for (name, x) in [
            ("settle_vel_tol", self.settle_vel_tol),
            ("settle_hold", self.settle_hold),
            ("timeout", self.timeout),
            ("sample_rate_hz", self.sample_rate_hz),
        ] {
            if !(x > T::zero()) {
                v.push(format!("{name} must be positive, got {}", x.as_f64()));
            }
        }
        if !(self.gravity_mag >= T::zero()) {
            v.push("gravity_mag must be non-negative".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(SimError::Config(v.join("; ")))
        }
    }

    /// Gravity in the arm base frame; the tilt rotates it from the base
    /// axis toward +x.
    pub fn gravity(&self) -> Vector3<T> {
        let (s, c) = self.gravity_tilt.sin_cos();
        Vector3::new(s, T::zero(), c) * self.gravity_mag
    }

    pub fn with_tilt(mut self, tilt: T) -> Self {
        self.gravity_tilt = tilt;
        self
    }
}

#[derive(Debug, Error)]
pub enum SimError<T: Real = f64> {
    #[error("integration diverged at t={time:.4} s (|θ̇| = {speed:.3e} rad/s)")]
    Unstable { time: f64, speed: f64 },
    #[error("did not settle within {timeout} s")]
    Timeout { timeout: f64, state: Box<ArmState<T>>, trajectory: Box<Trajectory<T>> },
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("state does not match the model ({0})")]
    Shape(String),
}

/// Viscoelastic joint torque about one axis.
#[inline]
pub fn passive_torque<T: Real>(stiffness: T, damping: T, theta: T, theta_rest: T, theta_dot: T) -> T {
    -stiffness * (theta - theta_rest) - damping * theta_dot
}

/// Mechanical energy split, joules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Energy<T> {
    pub kinetic: T,
    pub elastic: T,
    pub gravitational: T,
}

impl<T: Real> Energy<T> {
    pub fn total(&self) -> T {
        self.kinetic + self.elastic + self.gravitational
    }
}

/// Kinetic, joint-spring and gravitational energy of a state.
pub fn energy<T: Real>(model: &ArmModel<T>, state: &ArmState<T>, config: &SimConfig<T>) -> Energy<T> {
    let kin = ChainKinematics::compute(model, &state.theta);
    let half = T::lit(0.5);
    let elastic = model
        .segments()
        .iter()
        .enumerate()
        .map(|(j, s)| half * s.stiffness * (state.theta[2 * j].powi(2) + state.theta[2 * j + 1].powi(2)))
        .fold(T::zero(), |a, b| a + b);
    let g = config.gravity();
    let gravitational =
        -model.segments().iter().zip(&kin.centroid).map(|(s, c)| s.mass * g.dot(c)).fold(T::zero(), |a, b| a + b);
    Energy { kinetic: chain::kinetic_energy(model, &kin, &state.theta_dot), elastic, gravitational }
}

/// Centroid pose of every segment for joint coordinates `theta`.
pub fn segment_poses<T: Real>(model: &ArmModel<T>, theta: &[T]) -> Vec<Pose<T>> {
    let kin = ChainKinematics::compute(model, theta);
    poses_from(&kin)
}

fn poses_from<T: Real>(kin: &ChainKinematics<T>) -> Vec<Pose<T>> {
    kin.centroid
        .iter()
        .zip(&kin.rot)
        .map(|(c, r)| {
            let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
            Pose::new(*c, q)
        })
        .collect()
}

/// Quantities of the most recent step, for auditing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport<T> {
    pub tensions: [T; TENDON_COUNT],
    pub tendon_lengths: [T; TENDON_COUNT],
}

/// One simulation instance. Owns its scratch buffers; borrows the model.
pub struct Simulator<'m, T: Real = f64> {
    model: &'m ArmModel<T>,
    config: SimConfig<T>,
    gravity: Vector3<T>,
    dt: T,
    damping: Vec<T>,
    kin: ChainKinematics<T>,
    mass: DMatrix<T>,
    bias: Vec<T>,
    jac: [Vec<T>; TENDON_COUNT],
    report: StepReport<T>,
    min_tension: T,
    max_tension: T,
    steps: u64,
}

impl<'m, T: Real> Simulator<'m, T> {
    pub fn new(model: &'m ArmModel<T>, config: SimConfig<T>) -> Result<Self, SimError<T>> {
        config.validate()?;
        let n = model.n_coords();
        Ok(Self {
            model,
            gravity: config.gravity(),
            dt: config.dt,
            damping: model.damping(),
            config,
            kin: ChainKinematics::new(model.n_joints()),
            mass: DMatrix::zeros(n, n),
            bias: vec![T::zero(); n],
            jac: [vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]],
            report: StepReport { tensions: [T::zero(); TENDON_COUNT], tendon_lengths: model.straight_tendon_lengths() },
            min_tension: T::zero(),
            max_tension: T::zero(),
            steps: 0,
        })
    }

    pub fn model(&self) -> &'m ArmModel<T> {
        self.model
    }

    pub fn config(&self) -> &SimConfig<T> {
        &self.config
    }

    pub fn last_report(&self) -> &StepReport<T> {
        &self.report
    }

    /// Smallest and largest applied tension over all steps so far.
    pub fn tension_range(&self) -> (T, T) {
        (self.min_tension, self.max_tension)
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    fn check_shape(&self, state: &ArmState<T>) -> Result<(), SimError<T>> {
        let n = self.model.n_coords();
        if state.theta.len() != n || state.theta_dot.len() != n {
            return Err(SimError::Shape(format!(
                "expected {n} coordinates, got {}/{}",
                state.theta.len(),
                state.theta_dot.len()
            )));
        }
        Ok(())
    }

    /// Advances `state` by one step. `None` disengages the actuators, which
    /// then apply no tension.
    pub fn advance(&mut self, state: &mut ArmState<T>, cmd: Option<&TendonCommand<T>>) -> Result<(), SimError<T>> {
        self.check_shape(state)?;
        let model = self.model;
        let n = model.n_coords();
        let dt = self.dt;
        let dt2 = dt * dt;
        self.kin.update(model, &state.theta);
        chain::mass_matrix(model, &self.kin, &mut self.mass);
        chain::bias_forces(model, &self.kin, &state.theta_dot, &self.gravity, &mut self.bias);

        let mut system = self.mass.clone();
        let mut force = DVector::<T>::zeros(n);
        for (j, seg) in model.segments().iter().enumerate() {
            let damping = self.damping[j];
            for i in [2 * j, 2 * j + 1] {
                force[i] = passive_torque(seg.stiffness, damping, state.theta[i], T::zero(), state.theta_dot[i])
                    - self.bias[i];
                system[(i, i)] += dt * damping + dt2 * seg.stiffness;
                // Implicit spring: M·Δv = dt·f − dt²·K·v − ...
                force[i] -= dt * seg.stiffness * state.theta_dot[i];
            }
        }

        let mut tensions = [T::zero(); TENDON_COUNT];
        let lengths;
        if let Some(cmd) = cmd {
            lengths = tendon_length_and_jacobian(model, &state.theta, &mut self.jac);
            let params = model.params();
            let act = relax_actuator(state.tendon_act_lengths, cmd, params.tau_m, dt, &model.straight_tendon_lengths());
            state.tendon_act_lengths = act;
            let mut rates = [T::zero(); TENDON_COUNT];
            for (s, r) in rates.iter_mut().enumerate() {
                *r = self.jac[s].iter().zip(&state.theta_dot).fold(T::zero(), |a, (g, v)| a + *g * *v);
            }
            let tension = tendon_tensions(&act, &lengths, &rates, params);
            // Capstan factor seen by each joint: bends of all joints below it.
            let mut factor = vec![T::one(); model.n_joints()];
            let mut wrap = T::zero();
            for (j, f) in factor.iter_mut().enumerate() {
                *f = (-params.tendon_friction * wrap).exp();
                wrap += bend_angle(state.theta[2 * j], state.theta[2 * j + 1]);
            }
            let mut arm = vec![T::zero(); n];
            for s in 0..TENDON_COUNT {
                tensions[s] = tension[s].applied;
                for (i, a) in arm.iter_mut().enumerate() {
                    *a = factor[i / 2] * self.jac[s][i];
                    force[i] -= tension[s].applied * *a;
                }
                if tension[s].linear {
                    let gain = dt * params.kv + dt2 * params.kp;
                    for (r, &ar) in arm.iter().enumerate() {
                        if ar == T::zero() {
                            continue;
                        }
                        for (c, &g) in self.jac[s].iter().enumerate() {
                            system[(r, c)] += gain * ar * g;
                        }
                        force[r] -= dt * params.kp * ar * rates[s];
                    }
                }
            }
        } else {
            lengths = tendon_length(model, &state.theta);
        }

        // (M + dt·D + dt²·K)·Δv = dt·(f − dt·K·v)
        let rhs = force * dt;
        let dv = system
            .lu()
            .solve(&rhs)
            .ok_or_else(|| SimError::Unstable { time: state.sim_time.as_f64(), speed: f64::INFINITY })?;
        let mut speed = T::zero();
        for i in 0..n {
            let v = state.theta_dot[i] + dv[i];
            state.theta_dot[i] = v;
            state.theta[i] += dt * v;
            speed = speed.max(v.abs());
        }
        state.sim_time += dt;
        self.steps += 1;
        self.report = StepReport { tensions, tendon_lengths: lengths };
        for t in tensions {
            self.min_tension = self.min_tension.min(t);
            self.max_tension = self.max_tension.max(t);
        }
        if !speed.finite() || speed > T::lit(DIVERGENCE_SPEED) {
            return Err(SimError::Unstable { time: state.sim_time.as_f64(), speed: speed.as_f64() });
        }
        Ok(())
    }

    /// Functional form of [`Simulator::advance`].
    pub fn step(&mut self, state: &ArmState<T>, cmd: Option<&TendonCommand<T>>) -> Result<ArmState<T>, SimError<T>> {
        let mut next = state.clone();
        self.advance(&mut next, cmd)?;
        Ok(next)
    }

    /// Runs for `duration` seconds, recording centroid poses at the sample
    /// rate. Frame times start at zero at the initial state.
    pub fn record(
        &mut self,
        state: &mut ArmState<T>,
        cmd: Option<&TendonCommand<T>>,
        duration: T,
    ) -> Result<Trajectory<T>, SimError<T>> {
        self.record_phases(state, &[(cmd, duration)])
    }

    /// Like [`Simulator::record`] for a sequence of commands held for the
    /// given durations, recorded as one trajectory.
    pub fn record_phases(
        &mut self,
        state: &mut ArmState<T>,
        phases: &[(Option<&TendonCommand<T>>, T)],
    ) -> Result<Trajectory<T>, SimError<T>> {
        let mut rec = Recorder::new(self.model, self.config.sample_rate_hz, state);
        for &(cmd, duration) in phases {
            let steps = (duration / self.config.dt).round().to_usize().unwrap_or(0);
            for _ in 0..steps {
                let prev = state.theta.clone();
                self.advance(state, cmd)?;
                rec.push(self.model, &prev, state);
            }
        }
        Ok(rec.finish())
    }

    /// Steps until the largest joint speed stays below the tolerance for the
    /// hold time. On timeout the error carries the last state and trajectory.
    pub fn settle(
        &mut self,
        state: &mut ArmState<T>,
        cmd: Option<&TendonCommand<T>>,
    ) -> Result<Trajectory<T>, SimError<T>> {
        if let Some(zeta) = self.config.settle_damping_ratio {
            let params = self.model.params();
            for (j, (d, seg)) in self.damping.iter_mut().zip(self.model.segments()).enumerate() {
                *d = params.damping_multipliers[j] * T::lit(2.0) * zeta * (seg.stiffness * seg.mass).sqrt();
            }
        }
        self.dt = self.config.settle_dt.unwrap_or(self.config.dt);
        let out = self.settle_inner(state, cmd);
        self.dt = self.config.dt;
        self.damping = self.model.damping();
        out
    }

    fn settle_inner(
        &mut self,
        state: &mut ArmState<T>,
        cmd: Option<&TendonCommand<T>>,
    ) -> Result<Trajectory<T>, SimError<T>> {
        let mut rec = Recorder::new(self.model, self.config.sample_rate_hz, state);
        let start = state.sim_time;
        let mut quiet = T::zero();
        let eps = self.dt * T::lit(1e-6);
        loop {
            let prev = state.theta.clone();
            self.advance(state, cmd)?;
            rec.push(self.model, &prev, state);
            if state.max_speed() < self.config.settle_vel_tol {
                quiet += self.dt;
                if quiet + eps >= self.config.settle_hold {
                    return Ok(rec.finish());
                }
            } else {
                quiet = T::zero();
            }
            if state.sim_time - start + eps >= self.config.timeout {
                return Err(SimError::Timeout {
                    timeout: self.config.timeout.as_f64(),
                    state: Box::new(state.clone()),
                    trajectory: Box::new(rec.finish()),
                });
            }
        }
    }
}

/// One step with a fresh simulator.
pub fn step<T: Real>(
    model: &ArmModel<T>,
    state: &ArmState<T>,
    cmd: Option<&TendonCommand<T>>,
    config: &SimConfig<T>,
) -> Result<ArmState<T>, SimError<T>> {
    Simulator::new(model, *config)?.step(state, cmd)
}

/// Settles from `state`; returns the final state and the recorded trajectory.
pub fn settle<T: Real>(
    model: &ArmModel<T>,
    state: &ArmState<T>,
    cmd: Option<&TendonCommand<T>>,
    config: &SimConfig<T>,
) -> Result<(ArmState<T>, Trajectory<T>), SimError<T>> {
    let mut sim = Simulator::new(model, *config)?;
    let mut s = state.clone();
    let traj = sim.settle(&mut s, cmd)?;
    Ok((s, traj))
}

/// Samples poses at exact multiples of the sample period by interpolating
/// joint coordinates between integration steps.
struct Recorder<T: Real> {
    rate: T,
    start: T,
    next: usize,
    traj: Trajectory<T>,
    kin: ChainKinematics<T>,
    scratch: Vec<T>,
    last_time: T,
}

impl<T: Real> Recorder<T> {
    fn new(model: &ArmModel<T>, rate: T, state: &ArmState<T>) -> Self {
        let mut kin = ChainKinematics::new(model.n_joints());
        kin.update(model, &state.theta);
        let mut traj = Trajectory::new(rate);
        traj.frames.push(Frame { t: T::zero(), poses: poses_from(&kin) });
        Self { rate, start: state.sim_time, next: 1, traj, kin, scratch: state.theta.clone(), last_time: T::zero() }
    }

    fn push(&mut self, model: &ArmModel<T>, prev_theta: &[T], state: &ArmState<T>) {
        let t1 = state.sim_time - self.start;
        let t0 = self.last_time;
        let dt = t1 - t0;
        loop {
            let ts = T::count(self.next) / self.rate;
            if ts > t1 + T::lit(1e-12) {
                break;
            }
            let w = if dt > T::zero() { ((ts - t0) / dt).max(T::zero()).min(T::one()) } else { T::one() };
            for (s, (a, b)) in self.scratch.iter_mut().zip(prev_theta.iter().zip(&state.theta)) {
                *s = *a + (*b - *a) * w;
            }
            self.kin.update(model, &self.scratch);
            self.traj.frames.push(Frame { t: ts, poses: poses_from(&self.kin) });
            self.next += 1;
        }
        self.last_time = t1;
    }

    fn finish(self) -> Trajectory<T> {
        self.traj
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arm::{build_arm, ArmGeometry, ArmParameters};
    use approx::assert_relative_eq;

    fn desk_with(f: impl FnOnce(&mut ArmParameters)) -> ArmModel {
        let g = ArmGeometry::desk();
        let mut p = ArmParameters::reference(&g);
        f(&mut p);
        build_arm(g, p).unwrap()
    }

    fn weightless() -> SimConfig {
        SimConfig { gravity_mag: 0.0, ..SimConfig::default() }
    }

    fn bent(model: &ArmModel, angle: f64) -> ArmState {
        let mut s = ArmState::rest(model);
        for j in 0..model.n_joints() {
            s.theta[2 * j + 1] = angle;
        }
        s
    }

    #[test]
    fn passive_torque_examples() {
        assert_eq!(passive_torque(1.0, 1.0, 0.0, 0.0, 0.0), 0.0);
        assert_eq!(passive_torque(2.0, 0.0, 0.5, 0.0, 0.0), -1.0);
        assert_relative_eq!(passive_torque(2.0, 0.1, 0.5, 0.1, -1.0), -0.7, epsilon = 1e-15);
    }

    #[test]
    fn rest_is_a_fixed_point_without_gravity() {
        let m = desk_with(|_| {});
        let s0 = ArmState::rest(&m);
        let s1 = step(&m, &s0, None, &weightless()).unwrap();
        assert_eq!(s1.theta, s0.theta);
        assert_eq!(s1.theta_dot, s0.theta_dot);
        assert_eq!(s1.tendon_act_lengths, s0.tendon_act_lengths);
        assert_eq!(s1.sim_time, 1e-3);
    }

    #[test]
    fn thousand_steps_take_one_second() {
        let m = desk_with(|_| {});
        let mut sim = Simulator::new(&m, SimConfig::default()).unwrap();
        let mut s = ArmState::rest(&m);
        for _ in 0..1000 {
            sim.advance(&mut s, None).unwrap();
        }
        assert!((s.sim_time - 1.0).abs() < 1e-9);
    }

    #[test]
    fn passive_energy_never_increases() {
        let m = desk_with(|_| {});
        for cfg in [weightless(), SimConfig::default().with_tilt(1.0)] {
            let mut sim = Simulator::new(&m, cfg).unwrap();
            let mut s = bent(&m, 0.25);
            s.theta_dot[4] = 2.0;
            let mut e = energy(&m, &s, &cfg).total();
            for _ in 0..5000 {
                sim.advance(&mut s, None).unwrap();
                let next = energy(&m, &s, &cfg).total();
                assert!(next <= e + 1e-6 * e.abs(), "{e} -> {next} at t={}", s.sim_time);
                e = next;
            }
        }
    }

    #[test]
    fn energy_audit_matches_hand_sum() {
        let m = desk_with(|_| {});
        let s = bent(&m, 0.1);
        let e = energy(&m, &s, &weightless());
        let elastic: f64 = m.segments().iter().map(|seg| 0.5 * seg.stiffness * 0.01).sum();
        assert_relative_eq!(e.elastic, elastic, epsilon = 1e-15);
        assert_eq!(e.kinetic, 0.0);
        assert_eq!(e.gravitational, 0.0);
    }

    #[test]
    fn settling_at_rest_takes_the_hold_time() {
        let m = desk_with(|_| {});
        let (s, traj) = settle(&m, &ArmState::rest(&m), None, &weightless()).unwrap();
        assert_relative_eq!(s.sim_time, 0.2, epsilon = 1e-9);
        assert_eq!(traj.len(), 25);
        traj.validate().unwrap();
    }

    #[test]
    fn droop_decreases_with_stiffness() {
        let cfg = SimConfig::default().with_tilt(std::f64::consts::FRAC_PI_2);
        let droop: Vec<f64> = [0.01, 0.1, 1.0]
            .iter()
            .map(|&k0| {
                let m = desk_with(|p| p.base_stiffness = k0);
                let (s, _) = settle(&m, &ArmState::rest(&m), None, &cfg).unwrap();
                segment_poses(&m, &s.theta).last().unwrap().position.x
            })
            .collect();
        assert!(droop[0] > droop[1] && droop[1] > droop[2] && droop[2] > 0.0, "{droop:?}");
    }

    /// Time until the tip stays within 1 mm of straight.
    fn decay_time(zeta: f64) -> f64 {
        let m = desk_with(|p| p.damping_ratio = zeta);
        let mut sim = Simulator::new(&m, weightless()).unwrap();
        let mut s = bent(&m, 0.3);
        let traj = sim.record(&mut s, None, 5.0).unwrap();
        let last_far = traj.frames.iter().rev().find(|f| f.poses.last().unwrap().position.x.abs() > 1e-3).unwrap();
        last_far.t
    }

    #[test]
    fn release_decays_faster_with_more_damping() {
        let (light, heavy) = (decay_time(0.05), decay_time(0.5));
        assert!(heavy < light, "{heavy} vs {light}");
    }

    #[test]
    fn dorsal_bend_stays_planar() {
        let m = desk_with(|_| {});
        let mut sim = Simulator::new(&m, SimConfig::default().with_tilt(0.4)).unwrap();
        let mut s = ArmState::rest(&m);
        let traj = sim.record(&mut s, Some(&TendonCommand::bend(&m, 0.0, 0.08)), 2.0).unwrap();
        for f in &traj.frames {
            for p in &f.poses {
                assert!(p.position.y.abs() < 1e-9);
            }
        }
        let (lo, hi) = sim.tension_range();
        assert!(lo >= 0.0 && hi <= m.params().force_range && hi > 0.0);
    }

    #[test]
    fn reruns_are_bit_identical() {
        let m = desk_with(|_| {});
        let cmd = TendonCommand::bend(&m, 1.0, 0.05);
        let run = || {
            let mut sim = Simulator::new(&m, SimConfig::default().with_tilt(0.7)).unwrap();
            let mut s = ArmState::rest(&m);
            let t = sim.record(&mut s, Some(&cmd), 1.0).unwrap();
            (s, t)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn recorder_samples_exact_clock() {
        let m = desk_with(|_| {});
        let mut sim = Simulator::new(&m, SimConfig::default()).unwrap();
        let mut s = bent(&m, 0.2);
        let first = segment_poses(&m, &s.theta);
        let traj = sim.record(&mut s, None, 0.5).unwrap();
        assert_eq!(traj.len(), 61);
        assert_eq!(traj.frames[0].poses, first);
        for (k, f) in traj.frames.iter().enumerate() {
            assert_eq!(f.t, k as f64 / 120.0);
        }
        let last = segment_poses(&m, &s.theta);
        assert_relative_eq!(traj.frames[60].poses[7].position, last[7].position, epsilon = 1e-12);
    }

    #[test]
    fn settle_overrides_keep_the_equilibrium() {
        let m = desk_with(|_| {});
        let base = SimConfig { settle_vel_tol: 1e-7, timeout: 60.0, ..SimConfig::default().with_tilt(1.2) };
        let fast = SimConfig { settle_damping_ratio: Some(1.0), settle_dt: Some(4e-3), ..base };
        let (a, ta) = settle(&m, &ArmState::rest(&m), None, &base).unwrap();
        let (b, tb) = settle(&m, &ArmState::rest(&m), None, &fast).unwrap();
        assert!(b.sim_time < a.sim_time);
        let (pa, pb) = (&ta.frames.last().unwrap().poses, &tb.frames.last().unwrap().poses);
        for (x, y) in pa.iter().zip(pb.iter()) {
            assert!((x.position - y.position).norm() < 1e-6);
        }
        let mut sim = Simulator::new(&m, fast).unwrap();
        let mut s = ArmState::rest(&m);
        sim.settle(&mut s, None).unwrap();
        assert_eq!(sim.dt, 1e-3);
        assert_eq!(sim.damping, m.damping());
    }

    #[test]
    fn timeout_reports_last_state() {
        let m = desk_with(|_| {});
        let cfg = SimConfig { timeout: 0.05, ..SimConfig::default() };
        match settle(&m, &bent(&m, 0.3), None, &cfg) {
            Err(SimError::Timeout { state, trajectory, .. }) => {
                assert_relative_eq!(state.sim_time, 0.05, epsilon = 1e-9);
                assert_eq!(trajectory.len(), 7);
            }
            other => panic!("expected timeout, got {other:?}"),
        }
    }

    #[test]
    fn config_and_shape_errors() {
        let m = desk_with(|_| {});
        let bad = SimConfig { dt: 0.01, ..SimConfig::default() };
        assert!(matches!(Simulator::new(&m, bad), Err(SimError::Config(_))));
        let mut sim = Simulator::new(&m, SimConfig::default()).unwrap();
        let mut s = ArmState::rest(&m);
        s.theta.pop();
        assert!(matches!(sim.advance(&mut s, None), Err(SimError::Shape(_))));
    }

    #[test]
    fn runs_in_single_precision() {
        let g = ArmGeometry::<f32>::desk();
        let m = build_arm(g.clone(), ArmParameters::reference(&g)).unwrap();
        let cfg = SimConfig::<f32>::default().with_tilt(0.5);
        let (s, traj) = settle(&m, &ArmState::rest(&m), None, &cfg).unwrap();
        assert!(s.theta.iter().all(|v| v.is_finite()));
        assert!(traj.frames.last().unwrap().poses[7].position.x > 0.0);
    }
}
