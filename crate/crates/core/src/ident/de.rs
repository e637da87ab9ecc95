//! Differential evolution, DE/rand/1/bin.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DeError {
    #[error("bounds have {bounds} entries but the objective takes {dim}")]
    Dimension { bounds: usize, dim: usize },
    #[error("bound {index} is not a finite interval with lo < hi: [{lo}, {hi}]")]
    Bound { index: usize, lo: f64, hi: f64 },
    #[error("initial member {index} has {len} entries, expected {dim}")]
    Seed { index: usize, len: usize, dim: usize },
    #[error("invalid DE config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeConfig {
    /// Population size; `None` means ten per dimension.
    pub population: Option<usize>,
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "CR")]
    pub cr: f64,
    pub max_gens: usize,
    pub seed: u64,
    /// Worker threads for objective evaluation; 0 uses the global pool.
    pub parallel_evals: usize,
}

impl Default for DeConfig {
    fn default() -> Self {
        Self { population: None, f: 0.6, cr: 0.9, max_gens: 150, seed: 0, parallel_evals: 0 }
    }
}

impl DeConfig {
    pub fn coarse(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn fine(seed: u64) -> Self {
        Self { max_gens: 80, seed, ..Self::default() }
    }

    pub fn population_for(&self, dim: usize) -> usize {
        self.population.unwrap_or((10 * dim).max(4))
    }

    pub fn validate(&self) -> Result<(), DeError> {
        let mut bad = Vec::new();
        if !(self.f > 0.0 && self.f <= 2.0) {
            bad.push(format!("F must lie in (0, 2], got {}", self.f));
        }
        if !(0.0..=1.0).contains(&self.cr) {
            bad.push(format!("CR must lie in [0, 1], got {}", self.cr));
        }
        if matches!(self.population, Some(p) if p < 4) {
            bad.push("population must be at least 4".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(DeError::Config(bad.join("; ")))
        }
    }
}

/// Scalar objective over a fixed-dimension box.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn evaluate(&self, x: &[f64]) -> f64;
}

/// Closure adaptor for [`Objective`].
pub struct FnObjective<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> Objective for FnObjective<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeResult {
    pub best: Vec<f64>,
    pub best_value: f64,
    /// Best value after initialization and after every generation.
    pub trace: Vec<f64>,
    pub evaluations: usize,
}

fn member_rng(seed: u64, gen: usize, idx: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((gen as u64) << 32) | idx as u64);
    rng
}

fn score(objective: &dyn Objective, x: &[f64]) -> f64 {
    let v = objective.evaluate(x);
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

/// Minimizes `objective` over `bounds`.
///
/// `initial` members replace the first random population entries (after
/// clipping), so a known-good point can never be lost to greedy selection.
/// Results depend only on the seed, never on evaluation order.
pub fn de_minimize(
    objective: &dyn Objective,
    bounds: &[(f64, f64)],
    cfg: &DeConfig,
    initial: &[Vec<f64>],
) -> Result<DeResult, DeError> {
    cfg.validate()?;
    let dim = objective.dim();
    if bounds.len() != dim {
        return Err(DeError::Dimension { bounds: bounds.len(), dim });
    }
    for (index, &(lo, hi)) in bounds.iter().enumerate() {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(DeError::Bound { index, lo, hi });
        }
    }
    for (index, x) in initial.iter().enumerate() {
        if x.len() != dim {
            return Err(DeError::Seed { index, len: x.len(), dim });
        }
    }
    let np = cfg.population_for(dim).max(initial.len());
    let clip = |x: &mut [f64]| {
        for (v, &(lo, hi)) in x.iter_mut().zip(bounds) {
            *v = v.clamp(lo, hi);
        }
    };

    let mut pop: Vec<Vec<f64>> = (0..np)
        .map(|i| {
            if let Some(x) = initial.get(i) {
                let mut x = x.clone();
                clip(&mut x);
                x
            } else {
                let mut rng = member_rng(cfg.seed, 0, i);
                bounds.iter().map(|&(lo, hi)| rng.gen_range(lo..=hi)).collect()
            }
        })
        .collect();

    let pool = if cfg.parallel_evals > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cfg.parallel_evals).build().ok()
    } else {
        None
    };
    let eval_all = |xs: &[Vec<f64>]| -> Vec<f64> {
        let run = || xs.par_iter().map(|x| score(objective, x)).collect::<Vec<_>>();
        match &pool {
            Some(p) => p.install(run),
            None => run(),
        }
    };

    let mut fit = eval_all(&pop);
    let mut evaluations = np;
    let best_of = |fit: &[f64]| {
        fit.iter().enumerate().fold((0, f64::INFINITY), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) })
    };
    let mut trace = vec![best_of(&fit).1];

    for gen in 1..=cfg.max_gens {
        let trials: Vec<Vec<f64>> = (0..np)
            .map(|i| {
                let mut rng = member_rng(cfg.seed, gen, i);
                let picks: Vec<usize> =
                    sample(&mut rng, np - 1, 3).into_iter().map(|k| if k >= i { k + 1 } else { k }).collect();
                let (a, b, c) = (&pop[picks[0]], &pop[picks[1]], &pop[picks[2]]);
                let forced = rng.gen_range(0..dim);
                let mut trial = pop[i].clone();
                for j in 0..dim {
                    if j == forced || rng.gen::<f64>() < cfg.cr {
                        trial[j] = a[j] + cfg.f * (b[j] - c[j]);
                    }
                }
                clip(&mut trial);
                trial
            })
            .collect();
        let trial_fit = eval_all(&trials);
        evaluations += np;
        for (i, (x, v)) in trials.into_iter().zip(trial_fit).enumerate() {
            if v <= fit[i] {
                pop[i] = x;
                fit[i] = v;
            }
        }
        trace.push(best_of(&fit).1);
    }

    let (bi, bv) = best_of(&fit);
    Ok(DeResult { best: pop[bi].clone(), best_value: bv, trace, evaluations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sphere(dim: usize) -> FnObjective<impl Fn(&[f64]) -> f64 + Sync> {
        FnObjective { dim, f: |x: &[f64]| x.iter().map(|v| v * v).sum() }
    }

    fn non_increasing(trace: &[f64]) -> bool {
        trace.windows(2).all(|w| w[1] <= w[0])
    }

    #[test]
    fn sphere_converges() {
        let r = de_minimize(&sphere(5), &[(-5.0, 5.0); 5], &DeConfig::coarse(7), &[]).unwrap();
        assert!(r.best_value < 1e-6, "{}", r.best_value);
        assert_eq!(r.trace.len(), 151);
        assert!(non_increasing(&r.trace));
    }

    #[test]
    fn rosenbrock_converges() {
        let f = FnObjective { dim: 2, f: |x: &[f64]| 100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2) };
        let cfg = DeConfig { max_gens: 300, seed: 0, ..DeConfig::default() };
        let r = de_minimize(&f, &[(-2.0, 2.0); 2], &cfg, &[]).unwrap();
        assert!(r.best_value < 1e-3, "{}", r.best_value);
        assert!((r.best[0] - 1.0).abs() < 0.05 && (r.best[1] - 1.0).abs() < 0.1);
    }

    #[test]
    fn same_seed_same_run() {
        let cfg = DeConfig { max_gens: 30, seed: 11, ..DeConfig::default() };
        let a = de_minimize(&sphere(3), &[(-1.0, 1.0); 3], &cfg, &[]).unwrap();
        let b = de_minimize(&sphere(3), &[(-1.0, 1.0); 3], &cfg, &[]).unwrap();
        assert_eq!(a, b);
        let serial = DeConfig { parallel_evals: 1, ..cfg.clone() };
        assert_eq!(de_minimize(&sphere(3), &[(-1.0, 1.0); 3], &serial, &[]).unwrap(), a);
        let other = DeConfig { seed: 12, ..cfg };
        assert_ne!(de_minimize(&sphere(3), &[(-1.0, 1.0); 3], &other, &[]).unwrap().trace, a.trace);
    }

    #[test]
    fn seeded_member_is_never_lost() {
        let cfg = DeConfig { max_gens: 0, seed: 1, ..DeConfig::default() };
        let r = de_minimize(&sphere(2), &[(-1.0, 1.0); 2], &cfg, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(r.best_value, 0.0);
        assert_eq!(r.best, vec![0.0, 0.0]);
    }

    #[test]
    fn non_finite_values_lose() {
        let f = FnObjective { dim: 1, f: |x: &[f64]| if x[0] < 0.0 { f64::NAN } else { x[0] } };
        let cfg = DeConfig { max_gens: 40, seed: 2, ..DeConfig::default() };
        let r = de_minimize(&f, &[(-1.0, 1.0)], &cfg, &[]).unwrap();
        assert!(r.best[0] >= 0.0 && r.best_value < 1e-3);
    }

    #[test]
    fn argument_errors() {
        let cfg = DeConfig::default();
        assert_eq!(
            de_minimize(&sphere(3), &[(-1.0, 1.0); 2], &cfg, &[]),
            Err(DeError::Dimension { bounds: 2, dim: 3 })
        );
        assert!(matches!(de_minimize(&sphere(1), &[(1.0, 1.0)], &cfg, &[]), Err(DeError::Bound { .. })));
        assert!(matches!(de_minimize(&sphere(1), &[(0.0, 1.0)], &cfg, &[vec![]]), Err(DeError::Seed { .. })));
        let bad = DeConfig { cr: 1.5, ..DeConfig::default() };
        assert!(matches!(de_minimize(&sphere(1), &[(0.0, 1.0)], &bad, &[]), Err(DeError::Config(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn trace_monotone_and_result_in_bounds(seed in any::<u64>(), shift in -3.0f64..3.0, dim in 1usize..4) {
            let f = FnObjective { dim, f: move |x: &[f64]| x.iter().map(|v| (v - shift).abs().sqrt()).sum() };
            let bounds = vec![(-1.0, 2.0); dim];
            let cfg = DeConfig { max_gens: 20, seed, ..DeConfig::default() };
            let r = de_minimize(&f, &bounds, &cfg, &[]).unwrap();
            prop_assert!(non_increasing(&r.trace));
            prop_assert_eq!(*r.trace.last().unwrap(), r.best_value);
            for (x, (lo, hi)) in r.best.iter().zip(&bounds) {
                prop_assert!(x >= lo && x <= hi);
            }
        }
    }
}
