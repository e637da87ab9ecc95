use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::soft::{soft_fk, DEFAULT_MAX_CONTRACTION};
use super::KinematicsError;
use crate::arm::ArmModel;
use crate::dynamics::{SimConfig, TendonCommand};

pub const DEFAULT_VOXEL: f64 = 0.01;

/// Voxel occupancy of reachable positions for one gravity condition.
///
/// Voxel `(i, j, k)` covers `origin + voxel_size·[i, i+1) × [j, j+1) × [k, k+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReachMap {
    /// Angle between the base axis and gravity, radians.
    pub gravity_angle: f64,
    pub voxel_size: f64,
    pub origin: Vector3<f64>,
    pub dims: [usize; 3],
    occupancy: Vec<bool>,
    pub sample_count: usize,
    /// Samples whose settle timed out; they are still marked.
    pub unconverged: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReachMapFile {
    gravity_angle_deg: f64,
    voxel_size: f64,
    origin: [f64; 3],
    dims: [usize; 3],
    /// Bit `i + dims[0]·(j + dims[1]·k)`, least significant bit first.
    occupancy: String,
    sample_count: usize,
    #[serde(default)]
    unconverged: usize,
}

impl ReachMap {
    /// Empty grid enclosing `points` with a two-voxel margin.
    pub fn enclosing(points: &[Vector3<f64>], voxel_size: f64, gravity_angle: f64) -> Result<Self, KinematicsError> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(KinematicsError::Config(format!("voxel size must be positive, got {voxel_size}")));
        }
        let first = points.first().ok_or(KinematicsError::Empty)?;
        let (lo, hi) = points.iter().fold((*first, *first), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
        let margin = 2.0 * voxel_size;
        let origin = (lo - Vector3::repeat(margin)).map(|v| (v / voxel_size).floor() * voxel_size);
        let extent = hi + Vector3::repeat(margin) - origin;
        let dims = [0, 1, 2].map(|a| (extent[a] / voxel_size).ceil() as usize + 1);
        Ok(Self {
            gravity_angle,
            voxel_size,
            origin,
            dims,
            occupancy: vec![false; dims[0] * dims[1] * dims[2]],
            sample_count: 0,
            unconverged: 0,
        })
    }

    pub fn voxel_of(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let v = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            if !(v >= 0.0 && v < self.dims[a] as f64) {
                return None;
            }
            out[a] = v as usize;
        }
        Some(out)
    }

    fn index(&self, v: [usize; 3]) -> usize {
        v[0] + self.dims[0] * (v[1] + self.dims[1] * v[2])
    }

    pub fn voxel_center(&self, v: [usize; 3]) -> Vector3<f64> {
        self.origin + Vector3::new(v[0] as f64 + 0.5, v[1] as f64 + 0.5, v[2] as f64 + 0.5) * self.voxel_size
    }

    /// Marks the voxel holding `p`; returns false when `p` is off the grid.
    pub fn mark(&mut self, p: &Vector3<f64>) -> bool {
        match self.voxel_of(p) {
            Some(v) => {
                let i = self.index(v);
                self.occupancy[i] = true;
                true
            }
            None => false,
        }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        self.voxel_of(p).is_some_and(|v| self.occupancy[self.index(v)])
    }

    pub fn is_occupied(&self, v: [usize; 3]) -> bool {
        self.occupancy[self.index(v)]
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }

    pub fn occupied_voxels(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [nx, ny, _] = self.dims;
        self.occupancy.iter().enumerate().filter(|(_, &o)| o).map(move |(i, _)| [i % nx, (i / nx) % ny, i / (nx * ny)])
    }

    /// Grows the occupied set by one voxel in all 26 directions.
    pub fn dilate(&mut self) {
        let src = self.occupancy.clone();
        let [nx, ny, nz] = self.dims;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if !src[x + nx * (y + ny * z)] {
                        continue;
                    }
                    for dz in z.saturating_sub(1)..=(z + 1).min(nz - 1) {
                        for dy in y.saturating_sub(1)..=(y + 1).min(ny - 1) {
                            for dx in x.saturating_sub(1)..=(x + 1).min(nx - 1) {
                                self.occupancy[dx + nx * (dy + ny * dz)] = true;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn to_json(&self) -> String {
        let mut bits = vec![0u8; self.occupancy.len().div_ceil(8)];
        for (i, _) in self.occupancy.iter().enumerate().filter(|(_, &o)| o) {
            bits[i / 8] |= 1 << (i % 8);
        }
        let file = ReachMapFile {
            gravity_angle_deg: self.gravity_angle.to_degrees(),
            voxel_size: self.voxel_size,
            origin: self.origin.into(),
            dims: self.dims,
            occupancy: STANDARD.encode(bits),
            sample_count: self.sample_count,
            unconverged: self.unconverged,
        };
        serde_json::to_string_pretty(&file).expect("reach map serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, KinematicsError> {
        let f: ReachMapFile = serde_json::from_str(text).map_err(|e| KinematicsError::Format(e.to_string()))?;
        let n = f.dims.iter().product::<usize>();
        let bits = STANDARD.decode(&f.occupancy).map_err(|e| KinematicsError::Format(e.to_string()))?;
        if bits.len() != n.div_ceil(8) {
            return Err(KinematicsError::Format(format!(
                "occupancy has {} bytes, dims need {}",
                bits.len(),
                n.div_ceil(8)
            )));
        }
        if !(f.voxel_size > 0.0) {
            return Err(KinematicsError::Format("voxel_size must be positive".into()));
        }
        Ok(Self {
            gravity_angle: f.gravity_angle_deg.to_radians(),
            voxel_size: f.voxel_size,
            origin: f.origin.into(),
            dims: f.dims,
            occupancy: (0..n).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect(),
            sample_count: f.sample_count,
            unconverged: f.unconverged,
        })
    }

    pub fn load(path: &Path) -> Result<Self, KinematicsError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), KinematicsError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// Command grid over bending directions and contraction levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReachSampling {
    pub directions: usize,
    /// Nonzero contraction levels; the straight arm is always included.
    pub levels: usize,
    pub max_contraction_m: f64,
    pub voxel_size: f64,
}

impl Default for ReachSampling {
    fn default() -> Self {
        Self { directions: 72, levels: 20, max_contraction_m: DEFAULT_MAX_CONTRACTION, voxel_size: DEFAULT_VOXEL }
    }
}

impl ReachSampling {
    /// A grid of about `samples` commands, eight directions per level or
    /// more. One sample means the straight arm only.
    pub fn with_samples(samples: usize) -> Self {
        if samples <= 1 {
            return Self { directions: 0, levels: 0, ..Self::default() };
        }
        let levels = (((samples - 1) as f64 / 4.0).sqrt().floor() as usize).max(1);
        let directions = ((samples - 1) / levels).max(1);
        Self { directions, levels, ..Self::default() }
    }

    pub fn sample_count(&self) -> usize {
        1 + self.directions * self.levels
    }
}

/// Builds the soft-arm reachability map at one gravity angle.
///
/// Tip positions on the (direction, contraction) command grid are settled,
/// every grid cell is filled by bilinear interpolation at half-voxel spacing
/// and the result is dilated by one voxel.
pub fn build_reach_map(
    model: &ArmModel,
    gravity_angle: f64,
    sampling: &ReachSampling,
    sim: &SimConfig,
) -> Result<ReachMap, KinematicsError> {
    let ReachSampling { directions: nd, levels: nl, max_contraction_m, voxel_size } = *sampling;
    if (nd == 0) != (nl == 0) {
        return Err(KinematicsError::Config("directions and levels must both be zero or both positive".into()));
    }
    if nl > 0 && !(max_contraction_m > 0.0) {
        return Err(KinematicsError::Config("max_contraction_m must be positive".into()));
    }
    let straight = soft_fk(model, &TendonCommand::straight(model), gravity_angle, sim)?;
    let cells: Vec<(usize, usize)> = (0..nd).flat_map(|d| (1..=nl).map(move |l| (d, l))).collect();
    let settled = cells
        .par_iter()
        .map(|&(d, l)| {
            let dir = std::f64::consts::TAU * d as f64 / nd as f64;
            let c = max_contraction_m * l as f64 / nl as f64;
            soft_fk(model, &TendonCommand::bend(model, dir, c), gravity_angle, sim)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let unconverged = settled.iter().filter(|f| !f.converged).count() + usize::from(!straight.converged);
    // grid[d][l], level 0 is the straight arm for every direction.
    let at = |d: usize, l: usize| -> Vector3<f64> {
        if l == 0 {
            straight.tip.position
        } else {
            settled[(d % nd) * nl + l - 1].tip.position
        }
    };
    let mut points = vec![straight.tip.position];
    points.extend(settled.iter().map(|f| f.tip.position));
    let mut map = ReachMap::enclosing(&points, voxel_size, gravity_angle)?;
    map.sample_count = points.len();
    map.unconverged = unconverged;
    for p in &points {
        map.mark(p);
    }
    for d in 0..nd {
        for l in 0..nl {
            let quad = [at(d, l), at(d + 1, l), at(d, l + 1), at(d + 1, l + 1)];
            let span =
                [(0, 1), (2, 3), (0, 2), (1, 3)].iter().map(|&(a, b)| (quad[a] - quad[b]).norm()).fold(0.0, f64::max);
            let m = ((2.0 * span / voxel_size).ceil() as usize).max(1);
            for i in 0..=m {
                let u = i as f64 / m as f64;
                let (lo, hi) = (quad[0].lerp(&quad[1], u), quad[2].lerp(&quad[3], u));
                for k in 0..=m {
                    map.mark(&lo.lerp(&hi, k as f64 / m as f64));
                }
            }
        }
    }
    map.dilate();
    Ok(map)
}

/// Default gravity angles of the soft-arm map set.
pub fn default_map_angles() -> Vec<f64> {
    [0.0f64, 60.0, 120.0].iter().map(|d| d.to_radians()).collect()
}

/// Occupancy query against the map with the nearest gravity angle.
///
/// Angles are folded into `[0, π]`: a negative tilt is the mirror image of
/// the positive one across the base y-z plane.
pub fn query_reach(maps: &[ReachMap], gravity_angle: f64, point: &Vector3<f64>) -> Result<bool, KinematicsError> {
    let map = nearest_map(maps, gravity_angle)?;
    let wrapped = (gravity_angle + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI;
    let p = if wrapped < 0.0 { Vector3::new(-point.x, point.y, point.z) } else { *point };
    Ok(map.contains(&p))
}

pub fn nearest_map(maps: &[ReachMap], gravity_angle: f64) -> Result<&ReachMap, KinematicsError> {
    let wrapped = (gravity_angle + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI;
    let folded = wrapped.abs();
    maps.iter()
        .min_by(|a, b| (a.gravity_angle - folded).abs().total_cmp(&(b.gravity_angle - folded).abs()))
        .ok_or(KinematicsError::Empty)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arm::{build_arm, ArmGeometry, ArmParameters};
    use crate::kinematics::soft::fk_sim_config;

    fn desk() -> ArmModel {
        let g = ArmGeometry::desk();
        build_arm(g.clone(), ArmParameters::reference(&g)).unwrap()
    }

    #[test]
    fn single_sample_marks_the_straight_tip_and_its_neighbours() {
        let m = desk();
        let map = build_reach_map(&m, 0.0, &ReachSampling::with_samples(1), &fk_sim_config()).unwrap();
        assert_eq!(map.sample_count, 1);
        assert_eq!(map.occupied_count(), 27);
        let tip = soft_fk(&m, &TendonCommand::straight(&m), 0.0, &fk_sim_config()).unwrap().tip.position;
        assert!(map.contains(&tip));
        assert!(!map.contains(&Vector3::new(0.0, 0.0, 2.0 * m.total_length())));
    }

    #[test]
    fn sample_grid_arithmetic() {
        assert_eq!(ReachSampling::with_samples(1).sample_count(), 1);
        let s = ReachSampling::with_samples(101);
        assert_eq!((s.levels, s.directions), (5, 20));
        assert_eq!(s.sample_count(), 101);
        assert!(ReachSampling::with_samples(500).sample_count() <= 500);
    }

    #[test]
    fn grid_points_and_far_points() {
        let m = desk();
        let sampling = ReachSampling { directions: 24, levels: 6, ..ReachSampling::default() };
        let map = build_reach_map(&m, 60f64.to_radians(), &sampling, &fk_sim_config()).unwrap();
        assert_eq!(map.sample_count, 145);
        assert_eq!(map.unconverged, 0);
        let fk = soft_fk(&m, &TendonCommand::bend(&m, 0.7, 0.045), 60f64.to_radians(), &fk_sim_config()).unwrap();
        assert!(map.contains(&fk.tip.position));
        let l = m.total_length();
        for p in
            [Vector3::new(2.0 * l, 0.0, 0.0), Vector3::new(0.0, 0.0, -2.0 * l), Vector3::new(0.0, 1.6 * l, 1.6 * l)]
        {
            assert!(!map.contains(&p));
        }
    }

    #[test]
    fn json_round_trip() {
        let m = desk();
        let sampling = ReachSampling { directions: 8, levels: 2, ..ReachSampling::default() };
        let map = build_reach_map(&m, 0.3, &sampling, &fk_sim_config()).unwrap();
        let text = map.to_json();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v["occupancy"].is_string());
        assert_eq!(v["dims"].as_array().unwrap().len(), 3);
        let back = ReachMap::from_json(&text).unwrap();
        assert_eq!(back.occupancy, map.occupancy);
        assert_eq!(back.dims, map.dims);
        assert!((back.gravity_angle - 0.3).abs() < 1e-12);
        let bad = text.replace(&v["occupancy"].as_str().unwrap()[..4], "!!!!");
        assert!(ReachMap::from_json(&bad).is_err());
    }

    #[test]
    fn query_uses_the_nearest_angle_and_mirrors_negative_tilt() {
        let p = Vector3::new(0.05, 0.0, 0.0);
        let mut a = ReachMap::enclosing(&[Vector3::repeat(-0.1), Vector3::repeat(0.1)], 0.01, 0.0).unwrap();
        let mut b = a.clone();
        b.gravity_angle = 60f64.to_radians();
        a.mark(&p);
        let maps = [a, b];
        assert!(query_reach(&maps, 29f64.to_radians(), &p).unwrap());
        assert!(!query_reach(&maps, 31f64.to_radians(), &p).unwrap());
        assert!(query_reach(&maps, -10f64.to_radians(), &Vector3::new(-0.05, 0.0, 0.0)).unwrap());
        assert!(!query_reach(&maps, -10f64.to_radians(), &p).unwrap());
        assert!(matches!(query_reach(&[], 0.0, &p), Err(KinematicsError::Empty)));
    }
}
