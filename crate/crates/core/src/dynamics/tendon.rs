//! Cable routing, actuator model and capstan friction.
//!
//! Each cable runs through a pair of eyelets per segment, both at that
//! segment's anchor radius: one fixed to the parent in the joint plane and
//! one on the far end disk of the segment. The piece of cable spanning joint
//! `j` therefore depends on the two angles of joint `j` only, and a straight
//! arm has every cable exactly as long as the backbone.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::chain::joint_rotation;
use crate::arm::{tendon_station_dirs, ArmModel, ArmParameters, TENDON_COUNT};
use crate::real::Real;

/// Central finite-difference step for cable moment arms, radians.
pub const MOMENT_ARM_STEP: f64 = 1e-6;

/// Commanded absolute cable lengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TendonCommand<T = f64> {
    pub target_lengths: [T; TENDON_COUNT],
    #[serde(default)]
    pub timestamp: T,
}

impl<T: Real> TendonCommand<T> {
    pub fn new(target_lengths: [T; TENDON_COUNT]) -> Self {
        Self { target_lengths, timestamp: T::zero() }
    }

    /// All cables at their straight-arm lengths.
    pub fn straight(model: &ArmModel<T>) -> Self {
        Self::new(model.straight_tendon_lengths())
    }

    /// Bend toward `direction` (radians in the base plane, 0 = cable 1) with
    /// `contraction` meters of shortening along that direction.
    ///
    /// Cable `s` receives `-contraction·cos(direction - station_s)`; cables on
    /// the far side pay out by the matching amount so they stay slack.
    pub fn bend(model: &ArmModel<T>, direction: T, contraction: T) -> Self {
        let dirs = tendon_station_dirs::<T>();
        let (s, c) = direction.sin_cos();
        let straight = model.straight_tendon_lengths();
        let mut target = straight;
        for i in 0..TENDON_COUNT {
            let proj = c * dirs[i][0] + s * dirs[i][1];
            target[i] = straight[i] - contraction * proj;
        }
        Self::new(target)
    }

    /// Validates positivity and the actuator saturation envelope.
    pub fn validate(&self, model: &ArmModel<T>) -> Result<(), String> {
        let straight = model.straight_tendon_lengths();
        for (i, (&l, &l0)) in self.target_lengths.iter().zip(&straight).enumerate() {
            if !(l > T::zero()) || !l.finite() {
                return Err(format!("cable {} length must be positive", i + 1));
            }
            if l > l0 * T::lit(ACT_MAX_RATIO) {
                return Err(format!("cable {} length exceeds the actuator range", i + 1));
            }
        }
        Ok(())
    }
}

/// Saturation envelope of the actuator length state relative to straight length.
pub const ACT_MIN_RATIO: f64 = 0.1;
pub const ACT_MAX_RATIO: f64 = 2.0;

#[inline]
fn piece_length<T: Real>(theta_x: T, theta_y: T, parent: &Vector3<T>, child: &Vector3<T>) -> T {
    (joint_rotation(theta_x, theta_y) * child - parent).norm()
}

/// Eyelet pair spanning joint `j` for cable `s`, in the parent joint frame.
fn eyelets<T: Real>(model: &ArmModel<T>, j: usize, s: usize) -> (Vector3<T>, Vector3<T>) {
    let dirs = tendon_station_dirs::<T>();
    let seg = &model.segments()[j];
    let r = seg.anchor_radius;
    let d = dirs[s];
    (Vector3::new(r * d[0], r * d[1], T::zero()), Vector3::new(r * d[0], r * d[1], seg.length))
}

/// Length of the three cables for joint coordinates `theta`.
pub fn tendon_length<T: Real>(model: &ArmModel<T>, theta: &[T]) -> [T; TENDON_COUNT] {
    let mut out = [T::zero(); TENDON_COUNT];
    for j in 0..model.n_joints() {
        for (s, l) in out.iter_mut().enumerate() {
            let (p, c) = eyelets(model, j, s);
            *l += piece_length(theta[2 * j], theta[2 * j + 1], &p, &c);
        }
    }
    out
}

/// Cable lengths plus their gradients `∂l/∂θ`, the latter by central
/// differences with step [`MOMENT_ARM_STEP`].
pub fn tendon_length_and_jacobian<T: Real>(
    model: &ArmModel<T>,
    theta: &[T],
    jac: &mut [Vec<T>; TENDON_COUNT],
) -> [T; TENDON_COUNT] {
    let h = T::lit(MOMENT_ARM_STEP);
    let two_h = h + h;
    let mut out = [T::zero(); TENDON_COUNT];
    for j in 0..model.n_joints() {
        let (tx, ty) = (theta[2 * j], theta[2 * j + 1]);
        for s in 0..TENDON_COUNT {
            let (p, c) = eyelets(model, j, s);
            out[s] += piece_length(tx, ty, &p, &c);
            jac[s][2 * j] = (piece_length(tx + h, ty, &p, &c) - piece_length(tx - h, ty, &p, &c)) / two_h;
            jac[s][2 * j + 1] = (piece_length(tx, ty + h, &p, &c) - piece_length(tx, ty - h, &p, &c)) / two_h;
        }
    }
    out
}

/// Raw and clamped tension of one actuator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tension<T> {
    pub raw: T,
    pub applied: T,
    /// True when the clamp is inactive, so tension responds to length and rate.
    pub linear: bool,
}

/// First-order actuator lag over `dt`, integrated exactly and saturated.
pub fn relax_actuator<T: Real>(
    act: [T; TENDON_COUNT],
    cmd: &TendonCommand<T>,
    tau_m: T,
    dt: T,
    straight: &[T; TENDON_COUNT],
) -> [T; TENDON_COUNT] {
    let decay = (-dt / tau_m).exp();
    let mut out = act;
    for i in 0..TENDON_COUNT {
        let l = cmd.target_lengths[i] + (act[i] - cmd.target_lengths[i]) * decay;
        out[i] = l.max(straight[i] * T::lit(ACT_MIN_RATIO)).min(straight[i] * T::lit(ACT_MAX_RATIO));
    }
    out
}

/// Cable tensions of the PD position actuators.
///
/// `act_lengths` is the (already relaxed) actuator state. The cable is pulled
/// by `kp·(l_meas − l_act)` and damped by `kv·dl_meas/dt`; the result is
/// clamped to `[0, F_range]` since cables cannot push.
pub fn tendon_tensions<T: Real>(
    act_lengths: &[T; TENDON_COUNT],
    measured_lengths: &[T; TENDON_COUNT],
    measured_rates: &[T; TENDON_COUNT],
    params: &ArmParameters<T>,
) -> [Tension<T>; TENDON_COUNT] {
    let mut out = [Tension { raw: T::zero(), applied: T::zero(), linear: false }; TENDON_COUNT];
    for i in 0..TENDON_COUNT {
        let raw = params.kp * (measured_lengths[i] - act_lengths[i]) + params.kv * measured_rates[i];
        out[i] = Tension {
            raw,
            applied: raw.max(T::zero()).min(params.force_range),
            linear: raw > T::zero() && raw < params.force_range,
        };
    }
    out
}

/// Capstan attenuation of tension `force` after wrapping the given bends.
pub fn friction_attenuate<T: Real>(force: T, upstream_bends: &[T], mu_t: T) -> T {
    let wrap = upstream_bends.iter().fold(T::zero(), |a, b| a + b.abs());
    force * (-mu_t * wrap).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arm::{build_arm, ArmGeometry, ArmParameters};
    use approx::assert_relative_eq;

    fn desk() -> ArmModel<f64> {
        let g = ArmGeometry::desk();
        build_arm(g.clone(), ArmParameters::reference(&g)).unwrap()
    }

    #[test]
    fn straight_lengths_equal_backbone() {
        let m = desk();
        let l = tendon_length(&m, &vec![0.0; m.n_coords()]);
        assert_eq!(l[1], l[2]);
        for s in 0..3 {
            assert_relative_eq!(l[s], m.total_length(), max_relative = 1e-14);
        }
        assert_eq!(m.straight_tendon_lengths(), l);
    }

    #[test]
    fn right_angle_bend_matches_vector_geometry() {
        // Two segments, joint 2 bent 90° about its y axis (toward +x).
        let g = ArmGeometry { n_segments: 2, base_length: 0.1, base_radius: 0.02, scale_ratio: 0.5, base_mass: 0.01 };
        let m = build_arm(g, ArmParameters::reference(&ArmGeometry { n_segments: 2, ..ArmGeometry::desk() })).unwrap();
        let theta = [0.0, 0.0, 0.0, std::f64::consts::FRAC_PI_2];
        let l = tendon_length(&m, &theta);
        // Cable 1 sits at +x. Segment 1 is straight: 0.1. Segment 2 eyelets:
        // (0.01,0,0.1) on the parent; the child anchor (0.01,0,0.05) in the
        // joint frame rotated +90° about y maps to (0.05,0,-0.01).
        let a1 = Vector3::new(0.01, 0.0, 0.1);
        let a2 = Vector3::new(0.05, 0.0, 0.1 - 0.01);
        let expected = 0.1 + (a2 - a1).norm();
        assert_relative_eq!(l[0], expected, epsilon = 1e-14);
        // Cable 2 at 120°: anchors use direction (-1/2, √3/2).
        let d = Vector3::new(-0.5, 0.75f64.sqrt(), 0.0);
        let b1 = d * 0.01 + Vector3::new(0.0, 0.0, 0.1);
        let child = d * 0.01 + Vector3::new(0.0, 0.0, 0.05);
        let b2 = Vector3::new(child.z, child.y, -child.x) + Vector3::new(0.0, 0.0, 0.1);
        let expected2 = 0.1 + (b2 - b1).norm();
        assert_relative_eq!(l[1], expected2, epsilon = 1e-14);
    }

    #[test]
    fn jacobian_matches_full_length_differences() {
        let m = desk();
        let theta: Vec<f64> = (0..m.n_coords()).map(|i| 0.1 * (i as f64).sin()).collect();
        let mut jac = [vec![0.0; m.n_coords()], vec![0.0; m.n_coords()], vec![0.0; m.n_coords()]];
        let l = tendon_length_and_jacobian(&m, &theta, &mut jac);
        assert_eq!(l, tendon_length(&m, &theta));
        for i in 0..m.n_coords() {
            let h = 1e-6;
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[i] += h;
            tm[i] -= h;
            let (lp, lm) = (tendon_length(&m, &tp), tendon_length(&m, &tm));
            for s in 0..3 {
                assert_relative_eq!(jac[s][i], (lp[s] - lm[s]) / (2.0 * h), epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn tension_examples() {
        let p = ArmParameters::reference(&ArmGeometry::desk());
        let t = tendon_tensions(&[0.5; 3], &[0.5; 3], &[0.0; 3], &p);
        assert!(t.iter().all(|x| x.applied == 0.0));
        // raw = kp·(-0.01) = -5 N
        let t = tendon_tensions(&[0.51; 3], &[0.5; 3], &[0.0; 3], &p);
        assert_relative_eq!(t[0].raw, -5.0, epsilon = 1e-9);
        assert_eq!(t[0].applied, 0.0);
        // raw = 500·20 = 1e4 N clamps at F_range
        let t = tendon_tensions(&[0.5; 3], &[20.5; 3], &[0.0; 3], &p);
        assert_relative_eq!(t[0].raw, 1e4, epsilon = 1e-9);
        assert_eq!(t[0].applied, 40.0);
    }

    #[test]
    fn actuator_relaxes_toward_command() {
        let straight = [0.5; 3];
        let cmd = TendonCommand::new([0.4; 3]);
        let act = relax_actuator([0.5; 3], &cmd, 0.05, 0.05, &straight);
        assert_relative_eq!(act[0], 0.4 + 0.1 * (-1.0f64).exp(), epsilon = 1e-15);
        let act = relax_actuator([0.5; 3], &TendonCommand::new([0.01; 3]), 0.05, 10.0, &straight);
        assert_relative_eq!(act[0], 0.05, epsilon = 1e-15);
    }

    #[test]
    fn capstan_examples() {
        assert_eq!(friction_attenuate(10.0, &[], 0.5), 10.0);
        assert_eq!(friction_attenuate(10.0, &[0.3, -2.0], 0.0), 10.0);
        let half_pi = std::f64::consts::FRAC_PI_2;
        let got = friction_attenuate(10.0, &[half_pi, half_pi], 0.2);
        assert_relative_eq!(got, 10.0 * (-0.2 * std::f64::consts::PI).exp(), epsilon = 1e-12);
        assert_relative_eq!(got, 5.335, epsilon = 1e-3);
    }

    #[test]
    fn bend_command_directions() {
        let m = desk();
        let l0 = m.straight_tendon_lengths();
        let dorsal = TendonCommand::bend(&m, 0.0, 0.1);
        assert_relative_eq!(dorsal.target_lengths[0], l0[0] - 0.1, epsilon = 1e-12);
        assert_relative_eq!(dorsal.target_lengths[1], l0[1] + 0.05, epsilon = 1e-12);
        assert_eq!(dorsal.target_lengths[1], dorsal.target_lengths[2]);
        let ventral = TendonCommand::bend(&m, std::f64::consts::PI, 0.1);
        assert_relative_eq!(ventral.target_lengths[1], l0[1] - 0.05, epsilon = 1e-12);
        assert!(ventral.validate(&m).is_ok());
        assert!(TendonCommand::new([0.0, 0.3, 0.3]).validate(&m).is_err());
    }
}
