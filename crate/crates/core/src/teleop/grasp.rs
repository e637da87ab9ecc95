use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::session::SceneObject;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraspConfig {
    /// Segments that must lie near the object.
    pub min_segments: usize,
    /// Allowed gap between a segment centroid and the object surface, meters.
    pub margin: f64,
    /// Arc the nearby centroids must span around the object center, degrees.
    pub min_wrap_deg: f64,
}

impl Default for GraspConfig {
    fn default() -> Self {
        Self { min_segments: 3, margin: 0.02, min_wrap_deg: 180.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraspReason {
    Grasped,
    NotWrapped,
    NoObject,
}

impl GraspReason {
    pub fn as_str(self) -> &'static str {
        match self {
            GraspReason::Grasped => "grasped",
            GraspReason::NotWrapped => "not_wrapped",
            GraspReason::NoObject => "no_object",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspVerdict {
    pub grasped: bool,
    pub reason: GraspReason,
    pub object: Option<usize>,
    pub segments_near: usize,
    pub wrap_deg: f64,
}

impl GraspVerdict {
    pub fn no_object() -> Self {
        Self { grasped: false, reason: GraspReason::NoObject, object: None, segments_near: 0, wrap_deg: 0.0 }
    }
}

/// Smallest arc, in degrees, containing every direction from `center` to
/// `points` once projected onto their common plane.
///
/// The plane normal is the summed cross product of consecutive offsets, so
/// it follows the winding of an ordered chain. Fewer than two points span 0.
pub fn wrap_angle_deg(center: &Vector3<f64>, points: &[Vector3<f64>]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let offsets: Vec<Vector3<f64>> = points.iter().map(|p| p - center).collect();
    let mut normal = Vector3::zeros();
    for w in offsets.windows(2) {
        normal += w[0].cross(&w[1]);
    }
    let normal = if normal.norm() > 1e-12 {
        normal.normalize()
    } else {
        let any = offsets.iter().find(|v| v.norm() > 1e-12).copied().unwrap_or_else(Vector3::x);
        let other = if any.normalize().x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        any.cross(&other).normalize()
    };
    let e1 = match offsets.iter().map(|v| v - normal * normal.dot(v)).find(|v| v.norm() > 1e-12) {
        Some(v) => v.normalize(),
        None => return 0.0,
    };
    let e2 = normal.cross(&e1);
    let mut angles: Vec<f64> = offsets.iter().map(|v| v.dot(&e2).atan2(v.dot(&e1))).collect();
    angles.sort_by(f64::total_cmp);
    let mut largest_gap = angles[0] + std::f64::consts::TAU - angles[angles.len() - 1];
    for w in angles.windows(2) {
        largest_gap = largest_gap.max(w[1] - w[0]);
    }
    (std::f64::consts::TAU - largest_gap).to_degrees()
}

/// Checks whether the segment centroids wrap the object nearest to `target`.
pub fn grasp_check(
    centroids: &[Vector3<f64>],
    objects: &[SceneObject],
    target: &Vector3<f64>,
    cfg: &GraspConfig,
) -> GraspVerdict {
    let Some((index, object)) = objects
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1.center() - target).norm().total_cmp(&(b.1.center() - target).norm()))
    else {
        return GraspVerdict::no_object();
    };
    let center = object.center();
    let reach = object.radius() + cfg.margin;
    let near: Vec<Vector3<f64>> = centroids.iter().filter(|c| (*c - center).norm() <= reach).copied().collect();
    let wrap_deg = wrap_angle_deg(&center, &near);
    let grasped = near.len() >= cfg.min_segments && wrap_deg > cfg.min_wrap_deg;
    GraspVerdict {
        grasped,
        reason: if grasped { GraspReason::Grasped } else { GraspReason::NotWrapped },
        object: Some(index),
        segments_near: near.len(),
        wrap_deg,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring(center: Vector3<f64>, r: f64, from_deg: f64, to_deg: f64, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|k| {
                let a = (from_deg + (to_deg - from_deg) * k as f64 / (n - 1) as f64).to_radians();
                center + Vector3::new(r * a.cos(), 0.0, r * a.sin())
            })
            .collect()
    }

    #[test]
    fn wrap_angle_of_known_arcs() {
        let c = Vector3::new(0.1, 0.2, 0.3);
        assert!((wrap_angle_deg(&c, &ring(c, 0.05, 0.0, 90.0, 4)) - 90.0).abs() < 1e-9);
        assert!((wrap_angle_deg(&c, &ring(c, 0.05, -30.0, 240.0, 6)) - 270.0).abs() < 1e-9);
        assert_eq!(wrap_angle_deg(&c, &ring(c, 0.05, 0.0, 0.0, 2)[..1]), 0.0);
    }

    #[test]
    fn sphere_inside_a_curl_is_grasped() {
        let sphere = SceneObject::Sphere { center: [0.0, 0.0, 0.0], radius: 0.03 };
        let cfg = GraspConfig::default();
        let curl = ring(Vector3::zeros(), 0.045, 0.0, 250.0, 5);
        let v = grasp_check(&curl, &[sphere], &Vector3::zeros(), &cfg);
        assert!(v.grasped, "{v:?}");
        assert_eq!(v.segments_near, 5);
        let half = ring(Vector3::zeros(), 0.045, 0.0, 150.0, 5);
        let v = grasp_check(&half, &[sphere], &Vector3::zeros(), &cfg);
        assert_eq!(v.reason, GraspReason::NotWrapped);
        let far = ring(Vector3::zeros(), 0.2, 0.0, 300.0, 5);
        assert_eq!(grasp_check(&far, &[sphere], &Vector3::zeros(), &cfg).segments_near, 0);
    }

    #[test]
    fn two_segments_are_not_enough() {
        let sphere = SceneObject::Sphere { center: [0.0, 0.0, 0.0], radius: 0.03 };
        let pts = vec![Vector3::new(0.04, 0.0, 0.0), Vector3::new(-0.04, 0.0, 0.001)];
        let v = grasp_check(&pts, &[sphere], &Vector3::zeros(), &GraspConfig::default());
        assert!(!v.grasped);
        let loose = GraspConfig { min_segments: 2, min_wrap_deg: 170.0, ..GraspConfig::default() };
        assert!(grasp_check(&pts, &[sphere], &Vector3::zeros(), &loose).grasped);
    }

    #[test]
    fn empty_scene_has_no_object() {
        let v = grasp_check(&[Vector3::zeros()], &[], &Vector3::zeros(), &GraspConfig::default());
        assert_eq!(v, GraspVerdict::no_object());
    }

    #[test]
    fn nearest_object_is_judged() {
        let a = SceneObject::Sphere { center: [1.0, 0.0, 0.0], radius: 0.03 };
        let b = SceneObject::Box { center: [0.0, 0.0, 0.0], size: [0.06, 0.06, 0.06] };
        let v = grasp_check(
            &ring(Vector3::zeros(), 0.04, 0.0, 300.0, 6),
            &[a, b],
            &Vector3::new(0.05, 0.0, 0.0),
            &GraspConfig::default(),
        );
        assert_eq!(v.object, Some(1));
        assert!(v.grasped);
    }
}
