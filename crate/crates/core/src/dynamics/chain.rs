//! Serial-chain kinematics and rigid-body dynamics terms.
//!
//! Joint `j` carries two revolute axes: first about the parent x axis, then
//! about the rotated y axis, so the joint rotation is `Rx(θx)·Ry(θy)`. Mass
//! and inertia are lumped at segment centroids; joints are massless.

use nalgebra::{DMatrix, Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::arm::ArmModel;
use crate::real::Real;

/// Rotation of a single joint.
#[inline]
pub fn joint_rotation<T: Real>(theta_x: T, theta_y: T) -> Matrix3<T> {
    let (sx, cx) = theta_x.sin_cos();
    let (sy, cy) = theta_y.sin_cos();
    // Rx(θx)·Ry(θy)
    Matrix3::new(cy, T::zero(), sy, sx * sy, cx, -sx * cy, -cx * sy, sx, cx * cy)
}

/// Total bend angle of a joint: angle between parent and child axes.
#[inline]
pub fn bend_angle<T: Real>(theta_x: T, theta_y: T) -> T {
    let c = theta_x.cos() * theta_y.cos();
    c.max(-T::one()).min(T::one()).acos()
}

/// World-frame kinematics of every segment for one configuration.
#[derive(Debug, Clone)]
pub struct ChainKinematics<T: Real> {
    /// Segment orientations.
    pub rot: Vec<Matrix3<T>>,
    /// Joint origins; entry `n` is the tip of the last segment.
    pub origin: Vec<Vector3<T>>,
    pub centroid: Vec<Vector3<T>>,
    /// World axis of each generalized coordinate.
    pub axis: Vec<Vector3<T>>,
}

impl<T: Real> ChainKinematics<T> {
    pub fn new(n: usize) -> Self {
        Self {
            rot: vec![Matrix3::identity(); n],
            origin: vec![Vector3::zeros(); n + 1],
            centroid: vec![Vector3::zeros(); n],
            axis: vec![Vector3::zeros(); 2 * n],
        }
    }

    pub fn compute(model: &ArmModel<T>, theta: &[T]) -> Self {
        let mut k = Self::new(model.n_joints());
        k.update(model, theta);
        k
    }

    pub fn update(&mut self, model: &ArmModel<T>, theta: &[T]) {
        let half = T::lit(0.5);
        let mut parent = Matrix3::<T>::identity();
        self.origin[0] = Vector3::zeros();
        for (j, seg) in model.segments().iter().enumerate() {
            let (tx, ty) = (theta[2 * j], theta[2 * j + 1]);
            let rx = {
                let (s, c) = tx.sin_cos();
                Matrix3::new(T::one(), T::zero(), T::zero(), T::zero(), c, -s, T::zero(), s, c)
            };
            self.axis[2 * j] = parent.column(0).into_owned();
            let mid = parent * rx;
            self.axis[2 * j + 1] = mid.column(1).into_owned();
            let rot = parent * joint_rotation(tx, ty);
            let dir: Vector3<T> = rot.column(2).into_owned();
            self.centroid[j] = self.origin[j] + dir * (seg.length * half);
            self.origin[j + 1] = self.origin[j] + dir * seg.length;
            self.rot[j] = rot;
            parent = rot;
        }
    }

    pub fn tip(&self) -> Vector3<T> {
        *self.origin.last().expect("non-empty chain")
    }

    pub fn orientation(&self, j: usize) -> UnitQuaternion<T> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rot[j]))
    }
}

fn world_inertia<T: Real>(rot: &Matrix3<T>, principal: &[T; 3]) -> Matrix3<T> {
    let d = Matrix3::from_diagonal(&Vector3::new(principal[0], principal[1], principal[2]));
    rot * d * rot.transpose()
}

/// Generalized inertia matrix.
pub fn mass_matrix<T: Real>(model: &ArmModel<T>, kin: &ChainKinematics<T>, out: &mut DMatrix<T>) {
    let n = model.n_joints();
    let inertia: Vec<Matrix3<T>> = (0..n).map(|k| world_inertia(&kin.rot[k], &model.segments()[k].inertia)).collect();
    let mut moment = vec![Vector3::<T>::zeros(); n];
    for p in 0..2 * n {
        let jp = p / 2;
        let u = kin.axis[p];
        // Backward pass: net moment about each joint origin of the
        // inertial reactions caused by unit acceleration of coordinate p.
        let mut force = Vector3::<T>::zeros();
        let mut torque = Vector3::<T>::zeros();
        for j in (jp..n).rev() {
            let seg = &model.segments()[j];
            let f = u.cross(&(kin.centroid[j] - kin.origin[jp])) * seg.mass;
            let lever = kin.origin[j + 1] - kin.origin[j];
            torque = torque + lever.cross(&force) + (kin.centroid[j] - kin.origin[j]).cross(&f) + inertia[j] * u;
            force += f;
            moment[j] = torque;
        }
        for j in (0..jp).rev() {
            let lever = kin.origin[j + 1] - kin.origin[j];
            torque += lever.cross(&force);
            moment[j] = torque;
        }
        for r in 0..2 * n {
            out[(r, p)] = kin.axis[r].dot(&moment[r / 2]);
        }
    }
}

/// Velocity-product and gravity terms: `C(q, q̇)·q̇ − G(q)`.
///
/// Returns the generalized force that must be subtracted from the applied
/// forces before solving for accelerations.
pub fn bias_forces<T: Real>(
    model: &ArmModel<T>,
    kin: &ChainKinematics<T>,
    theta_dot: &[T],
    gravity: &Vector3<T>,
    out: &mut [T],
) {
    let n = model.n_joints();
    let mut omega = Vector3::<T>::zeros();
    let mut alpha = Vector3::<T>::zeros();
    let mut acc_origin = Vector3::<T>::zeros();
    let mut body_force = Vec::with_capacity(n);
    let mut body_moment = Vec::with_capacity(n);
    for (j, seg) in model.segments().iter().enumerate() {
        let wa = kin.axis[2 * j] * theta_dot[2 * j];
        let wb = kin.axis[2 * j + 1] * theta_dot[2 * j + 1];
        let mid = omega + wa;
        alpha = alpha + omega.cross(&wa) + mid.cross(&wb);
        omega = mid + wb;
        let rc = kin.centroid[j] - kin.origin[j];
        let acc_c = acc_origin + alpha.cross(&rc) + omega.cross(&omega.cross(&rc));
        let r = kin.origin[j + 1] - kin.origin[j];
        acc_origin = acc_origin + alpha.cross(&r) + omega.cross(&omega.cross(&r));
        let inertia = world_inertia(&kin.rot[j], &seg.inertia);
        body_force.push((acc_c - gravity) * seg.mass);
        body_moment.push(inertia * alpha + omega.cross(&(inertia * omega)));
    }
    let mut force = Vector3::<T>::zeros();
    let mut torque = Vector3::<T>::zeros();
    for j in (0..n).rev() {
        let lever = kin.origin[j + 1] - kin.origin[j];
        torque =
            torque + lever.cross(&force) + (kin.centroid[j] - kin.origin[j]).cross(&body_force[j]) + body_moment[j];
        force += body_force[j];
        out[2 * j] = kin.axis[2 * j].dot(&torque);
        out[2 * j + 1] = kin.axis[2 * j + 1].dot(&torque);
    }
}

/// Kinetic energy `½ q̇ᵀ M q̇` evaluated body by body.
pub fn kinetic_energy<T: Real>(model: &ArmModel<T>, kin: &ChainKinematics<T>, theta_dot: &[T]) -> T {
    let mut omega = Vector3::<T>::zeros();
    let mut v_origin = Vector3::<T>::zeros();
    let mut e = T::zero();
    let half = T::lit(0.5);
    for (j, seg) in model.segments().iter().enumerate() {
        omega = omega + kin.axis[2 * j] * theta_dot[2 * j] + kin.axis[2 * j + 1] * theta_dot[2 * j + 1];
        let v_c = v_origin + omega.cross(&(kin.centroid[j] - kin.origin[j]));
        v_origin += omega.cross(&(kin.origin[j + 1] - kin.origin[j]));
        let inertia = world_inertia(&kin.rot[j], &seg.inertia);
        e += half * (seg.mass * v_c.norm_squared() + omega.dot(&(inertia * omega)));
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arm::{build_arm, ArmGeometry, ArmParameters};
    use approx::assert_relative_eq;

    fn model() -> ArmModel<f64> {
        let g = ArmGeometry::desk();
        build_arm(g.clone(), ArmParameters::reference(&g)).unwrap()
    }

    fn config(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let q = (0..2 * n).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let v = (0..2 * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        (q, v)
    }

    #[test]
    fn straight_chain_positions() {
        let m = model();
        let k = ChainKinematics::compute(&m, &vec![0.0; m.n_coords()]);
        assert_relative_eq!(k.tip().z, m.total_length(), epsilon = 1e-12);
        assert_relative_eq!(k.tip().x, 0.0);
        assert_relative_eq!(k.centroid[0].z, m.segments()[0].length / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn bend_angle_of_single_axis() {
        assert_relative_eq!(bend_angle(0.3, 0.0), 0.3, epsilon = 1e-12);
        assert_relative_eq!(bend_angle(0.0, -0.4), 0.4, epsilon = 1e-12);
        assert_eq!(bend_angle(0.0, 0.0), 0.0);
    }

    #[test]
    fn mass_matrix_matches_kinetic_energy() {
        let m = model();
        let (q, v) = config(m.n_joints(), 3);
        let k = ChainKinematics::compute(&m, &q);
        let mut mm = DMatrix::zeros(q.len(), q.len());
        mass_matrix(&m, &k, &mut mm);
        let vv = nalgebra::DVector::from_vec(v.clone());
        let quad = 0.5 * vv.dot(&(&mm * &vv));
        assert_relative_eq!(quad, kinetic_energy(&m, &k, &v), max_relative = 1e-10);
        assert_relative_eq!(mm.clone(), mm.transpose(), epsilon = 1e-14);
        assert!(mm.clone().cholesky().is_some());
    }

    #[test]
    fn gravity_term_is_potential_gradient() {
        // At rest the bias is -∂V/∂q with V = -Σ m g·c; compare with central differences.
        let m = model();
        let (q, _) = config(m.n_joints(), 5);
        let g = Vector3::new(3.0, -1.0, 9.0);
        let potential = |q: &[f64]| {
            let k = ChainKinematics::compute(&m, q);
            -m.segments().iter().zip(&k.centroid).map(|(s, c)| s.mass * g.dot(c)).sum::<f64>()
        };
        let k = ChainKinematics::compute(&m, &q);
        let mut bias = vec![0.0; q.len()];
        bias_forces(&m, &k, &vec![0.0; q.len()], &g, &mut bias);
        for i in 0..q.len() {
            let h = 1e-6;
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[i] += h;
            qm[i] -= h;
            let grad = (potential(&qp) - potential(&qm)) / (2.0 * h);
            assert_relative_eq!(bias[i], grad, epsilon = 1e-8, max_relative = 1e-6);
        }
    }

    #[test]
    fn velocity_terms_match_lagrangian() {
        // C q̇ = Ṁ q̇ − ½ ∂(q̇ᵀ M q̇)/∂q, evaluated with finite differences.
        let m = model();
        let (q, v) = config(m.n_joints(), 9);
        let nq = q.len();
        let mass = |q: &[f64]| {
            let k = ChainKinematics::compute(&m, q);
            let mut mm = DMatrix::zeros(nq, nq);
            mass_matrix(&m, &k, &mut mm);
            mm
        };
        let h = 1e-6;
        let vv = nalgebra::DVector::from_vec(v.clone());
        let qf: Vec<f64> = q.iter().zip(&v).map(|(a, b)| a + h * b).collect();
        let qb: Vec<f64> = q.iter().zip(&v).map(|(a, b)| a - h * b).collect();
        let mdot = (mass(&qf) - mass(&qb)) / (2.0 * h);
        let mut expected = &mdot * &vv;
        for i in 0..nq {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[i] += h;
            qm[i] -= h;
            let dt = (vv.dot(&(mass(&qp) * &vv)) - vv.dot(&(mass(&qm) * &vv))) / (2.0 * h);
            expected[i] -= 0.5 * dt;
        }
        let k = ChainKinematics::compute(&m, &q);
        let mut bias = vec![0.0; nq];
        bias_forces(&m, &k, &v, &Vector3::zeros(), &mut bias);
        for i in 0..nq {
            assert_relative_eq!(bias[i], expected[i], epsilon = 1e-7, max_relative = 1e-5);
        }
    }
}
