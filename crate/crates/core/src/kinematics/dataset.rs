use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::reach::default_map_angles;
use super::soft::{fk_sim_config, soft_fk, DEFAULT_MAX_CONTRACTION};
use super::KinematicsError;
use crate::arm::{ArmModel, TENDON_COUNT};
use crate::dynamics::{SimConfig, TendonCommand};
use crate::trajectory::Pose;

pub const CSV_HEADER: &str = "theta_g,x,y,z,qw,qx,qy,qz,l1,l2,l3";

/// One labelled IK example: gravity angle and settled tip pose in, commanded
/// cable lengths out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IkSample {
    pub theta_g: f64,
    pub pose: Pose,
    pub lengths: [f64; TENDON_COUNT],
}

impl IkSample {
    /// Network input `(θ_G, x, y, z, qw, qx, qy, qz)`.
    pub fn input(&self) -> [f64; 8] {
        let p = self.pose.position;
        let [w, x, y, z] = self.pose.quat_wxyz();
        [self.theta_g, p.x, p.y, p.z, w, x, y, z]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub samples: usize,
    /// Gravity angles to draw from, radians.
    pub gravity_angles: Vec<f64>,
    pub max_contraction_m: f64,
    pub seed: u64,
    pub train_fraction: f64,
    pub sim: SimConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            samples: 20_000,
            gravity_angles: default_map_angles(),
            max_contraction_m: DEFAULT_MAX_CONTRACTION,
            seed: 0,
            train_fraction: 0.8,
            sim: fk_sim_config(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IkDataset {
    pub train: Vec<IkSample>,
    pub val: Vec<IkSample>,
    /// Samples dropped because the settle did not converge.
    pub skipped: usize,
}

/// The command for sample `index`: uniform direction, uniform contraction and
/// a uniformly chosen gravity angle from the list.
pub fn sample_command(model: &ArmModel, cfg: &DatasetConfig, index: usize) -> (f64, TendonCommand) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let theta_g = cfg.gravity_angles[rng.gen_range(0..cfg.gravity_angles.len())];
    let direction = rng.gen_range(0.0..std::f64::consts::TAU);
    let contraction = rng.gen_range(0.0..=cfg.max_contraction_m);
    (theta_g, TendonCommand::bend(model, direction, contraction))
}

/// Settles `cfg.samples` random commands and splits the results 80/20 (or
/// per `train_fraction`) after a seeded shuffle.
pub fn gen_ik_dataset(model: &ArmModel, cfg: &DatasetConfig) -> Result<IkDataset, KinematicsError> {
    if cfg.samples == 0 {
        return Err(KinematicsError::Config("samples must be at least 1".into()));
    }
    if cfg.gravity_angles.is_empty() {
        return Err(KinematicsError::Config("gravity_angles must not be empty".into()));
    }
    if !(0.0..=1.0).contains(&cfg.train_fraction) {
        return Err(KinematicsError::Config("train_fraction must lie in [0, 1]".into()));
    }
    let rows: Vec<Option<IkSample>> = (0..cfg.samples)
        .into_par_iter()
        .map(|i| {
            let (theta_g, cmd) = sample_command(model, cfg, i);
            match soft_fk(model, &cmd, theta_g, &cfg.sim) {
                Ok(fk) if fk.converged => Some(IkSample { theta_g, pose: fk.tip, lengths: cmd.target_lengths }),
                Ok(_) => None,
                Err(e) => {
                    log::warn!("sample {i} skipped: {e}");
                    None
                }
            }
        })
        .collect();
    let skipped = rows.iter().filter(|r| r.is_none()).count();
    let mut rows: Vec<IkSample> = rows.into_iter().flatten().collect();
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5851_F42D_4C95_7F2D));
    let n_train = (rows.len() as f64 * cfg.train_fraction).round() as usize;
    let val = rows.split_off(n_train);
    Ok(IkDataset { train: rows, val, skipped })
}

pub fn to_csv(rows: &[IkSample]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let v = r.input();
        let cells: Vec<String> = v.iter().chain(&r.lengths).map(|x| format!("{x}")).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

pub fn from_csv(text: &str) -> Result<Vec<IkSample>, KinematicsError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => return Err(KinematicsError::Format(format!("expected header `{CSV_HEADER}`"))),
    }
    lines
        .map(|(n, line)| {
            let v: Vec<f64> = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| KinematicsError::Format(format!("line {}: {e}", n + 1)))?;
            if v.len() != 11 {
                return Err(KinematicsError::Format(format!("line {}: expected 11 columns, got {}", n + 1, v.len())));
            }
            let q = Quaternion::new(v[4], v[5], v[6], v[7]);
            let orientation = if (q.norm() - 1.0).abs() < 1e-9 {
                UnitQuaternion::new_unchecked(q)
            } else {
                UnitQuaternion::from_quaternion(q)
            };
            Ok(IkSample {
                theta_g: v[0],
                pose: Pose::new(Vector3::new(v[1], v[2], v[3]), orientation),
                lengths: [v[8], v[9], v[10]],
            })
        })
        .collect()
}

impl IkDataset {
    /// Writes `train.csv` and `val.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), KinematicsError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("train.csv"), to_csv(&self.train))?;
        std::fs::write(dir.join("val.csv"), to_csv(&self.val))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, KinematicsError> {
        Ok(Self {
            train: from_csv(&std::fs::read_to_string(dir.join("train.csv"))?)?,
            val: from_csv(&std::fs::read_to_string(dir.join("val.csv"))?)?,
            skipped: 0,
        })
    }
}
