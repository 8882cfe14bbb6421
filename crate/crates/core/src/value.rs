//! Monte-Carlo value estimation and cross-entropy policy search.
//!
//! Values follow the reward-maximization convention: larger is better.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::control::ControlPolicy;
use crate::engine::{simulate_particles, simulate_relaxed, ActionRecord, ParticleEnsemble};
use crate::model::{Law, Point, ProblemSpec};
use crate::output::{num, Table};
use crate::timebase::{sample_atom_noise, sample_noise, stream_rng, StreamKind, TimeGrid};
use crate::{Error, Result};

/// Average over particles of the Riemann sum of the running reward plus the
/// terminal reward. Relaxed runs average the running reward over atoms.
pub fn evaluate_cost(ens: &ParticleEnsemble, spec: &ProblemSpec) -> f64 {
    let grid = *ens.grid();
    let (n, m, count) = (ens.x.dim(), grid.steps(), ens.particles());
    let len = m + 1;
    let dt = grid.dt();
    let mut running = vec![0.0; count];
    for k in 0..m {
        let t = grid.t(k);
        let states = ens.x.slice_at(k);
        let actions = ens.actions.strong_slice(k, count, m);
        let j = spec.action_space.dim();
        let mut law = Law::new(ens.x.values(), count, n, len, k, &states);
        if ens.pair_law {
            if let Some(a) = &actions {
                law = law.with_actions(a, j);
            }
        }
        for (i, acc) in running.iter_mut().enumerate() {
            let point = |action: &[f64]| {
                let p = Point { t, step: k, state: ens.x.value(i, k), path: ens.x.path(i).stopped(k), law: &law, action };
                (spec.running)(&p)
            };
            let l = match &ens.actions {
                ActionRecord::Strong { .. } => point(ens.actions.strong_at(i, k, m).expect("strong record")),
                ActionRecord::Relaxed { .. } => {
                    let (atoms, q) = ens.actions.relaxed_at(k).expect("relaxed record");
                    atoms.iter().zip(q).filter(|(_, &w)| w > 0.0).map(|(a, &w)| w * point(a)).sum()
                }
            };
            *acc += l * dt;
        }
    }
    let states = ens.x.slice_at(m);
    let law = Law::new(ens.x.values(), count, n, len, m, &states);
    let mut total = 0.0;
    for (i, r) in running.iter().enumerate() {
        let p = Point { t: grid.horizon(), step: m, state: ens.x.value(i, m), path: ens.x.path(i), law: &law, action: &[] };
        total += r + (spec.terminal)(&p);
    }
    total / count as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub batches: usize,
    pub particles: usize,
    pub seed: u64,
    /// one value per batch, in batch order
    pub batch_values: Vec<f64>,
}

impl ValueEstimate {
    pub fn from_batches(batch_values: Vec<f64>, particles: usize, seed: u64) -> Self {
        let (mean, std_error) = mean_and_se(&batch_values);
        Self { mean, std_error, batches: batch_values.len(), particles, seed, batch_values }
    }
}

/// Sample mean and standard error of the mean (zero for a single sample).
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let b = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / b;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (b - 1.0);
    (mean, (var / b).sqrt())
}

/// Mean and standard error of batch-wise differences `a - b`; both
/// estimates must come from the same seed and batch count.
pub fn paired_difference(a: &ValueEstimate, b: &ValueEstimate) -> Result<(f64, f64)> {
    if a.batches != b.batches || a.seed != b.seed {
        return Err(Error::ShapeMismatch("paired estimates need the same seed and batch count".into()));
    }
    let d: Vec<f64> = a.batch_values.iter().zip(&b.batch_values).map(|(x, y)| x - y).collect();
    Ok(mean_and_se(&d))
}

/// Runs `f(batch)` for every batch in parallel and aggregates.
pub fn monte_carlo(batches: usize, particles: usize, seed: u64, f: impl Fn(u64) -> Result<f64> + Sync) -> Result<ValueEstimate> {
    if batches == 0 || particles == 0 {
        return Err(Error::InvalidSpec("batches and particles must be positive".into()));
    }
    let values = (0..batches as u64).into_par_iter().map(&f).collect::<Result<Vec<f64>>>()?;
    Ok(ValueEstimate::from_batches(values, particles, seed))
}

/// One batch: initial sample, noise and simulation keyed by `(seed, batch)`.
pub fn simulate_batch(spec: &ProblemSpec, policy: &ControlPolicy, particles: usize, grid: &TimeGrid, seed: u64, batch: u64) -> Result<ParticleEnsemble> {
    let x0 = spec.initial.sample(particles, seed, batch);
    match policy {
        ControlPolicy::RelaxedFiniteAtom(relaxed) => {
            let noise = sample_atom_noise(grid, particles, spec.d, spec.ell, relaxed.atoms().len(), seed, batch);
            simulate_relaxed(spec, relaxed, &x0, &noise)
        }
        _ => {
            let noise = sample_noise(grid, particles, spec.d, spec.ell, seed, batch);
            simulate_particles(spec, policy, &x0, &noise)
        }
    }
}

/// Mean and standard error of [`evaluate_cost`] over independent batches.
pub fn estimate_value(spec: &ProblemSpec, policy: &ControlPolicy, particles: usize, batches: usize, grid: &TimeGrid, seed: u64) -> Result<ValueEstimate> {
    monte_carlo(batches, particles, seed, |b| {
        let ens = simulate_batch(spec, policy, particles, grid, seed, b)?;
        Ok(evaluate_cost(&ens, spec))
    })
}

/// Time-discretization error removal: per batch `2 J(2m) − J(m)`, the
/// coarse run driven by the fine noise summed pairwise. Strong policies only.
pub fn estimate_value_richardson(
    spec: &ProblemSpec,
    policy: &ControlPolicy,
    particles: usize,
    batches: usize,
    grid: &TimeGrid,
    seed: u64,
) -> Result<ValueEstimate> {
    if policy.is_relaxed() {
        return Err(Error::UnsupportedMode("extrapolated estimates take strong policies".into()));
    }
    let fine = grid.refine(2)?;
    monte_carlo(batches, particles, seed, |b| {
        let x0 = spec.initial.sample(particles, seed, b);
        let noise = sample_noise(&fine, particles, spec.d, spec.ell, seed, b);
        let jf = evaluate_cost(&simulate_particles(spec, policy, &x0, &noise)?, spec);
        let jc = evaluate_cost(&simulate_particles(spec, policy, &x0, &noise.coarsen(2)?)?, spec);
        Ok(2.0 * jf - jc)
    })
}

/// A finite-dimensional, box-bounded policy family.
pub trait PolicyFamily: Send + Sync {
    fn dim(&self) -> usize;
    fn bounds(&self) -> Vec<(f64, f64)>;
    /// Parameters of the constant-`a0` policy; evaluated first.
    fn anchor(&self) -> Vec<f64>;
    fn build(&self, theta: &[f64]) -> ControlPolicy;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossEntropy {
    pub population: usize,
    pub elite: usize,
    /// weight of the new elite statistics in the smoothed update
    pub smoothing: f64,
    /// initial standard deviation as a fraction of each box width
    pub initial_spread: f64,
    /// stop when every standard deviation falls below this fraction of its width
    pub tolerance: f64,
}

impl Default for CrossEntropy {
    fn default() -> Self {
        Self { population: 32, elite: 8, smoothing: 0.7, initial_spread: 0.25, tolerance: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationRecord {
    pub generation: usize,
    pub best: f64,
    pub mean: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizationResult {
    pub theta: Vec<f64>,
    pub best: ValueEstimate,
    pub trace: Vec<GenerationRecord>,
    pub evaluations: usize,
    pub converged: bool,
}

impl OptimizationResult {
    pub fn trace_table(&self) -> Table {
        let mut t = Table::new(["generation", "best", "mean", "std_error"]);
        for r in &self.trace {
            t.push(vec![r.generation.to_string(), num(r.best), num(r.mean), num(r.std_error)]);
        }
        t
    }
}

pub fn optimize_value(
    spec: &ProblemSpec,
    family: &dyn PolicyFamily,
    budget: usize,
    particles: usize,
    batches: usize,
    grid: &TimeGrid,
    seed: u64,
) -> Result<OptimizationResult> {
    optimize_value_with(spec, family, budget, particles, batches, grid, seed, CrossEntropy::default())
}

/// Cross-entropy search. Every candidate of every generation is evaluated
/// with the same seed, so values are comparable and the best one
/// reproduces exactly. Candidates that blow up score `-inf`.
#[allow(clippy::too_many_arguments)]
pub fn optimize_value_with(
    spec: &ProblemSpec,
    family: &dyn PolicyFamily,
    budget: usize,
    particles: usize,
    batches: usize,
    grid: &TimeGrid,
    seed: u64,
    ce: CrossEntropy,
) -> Result<OptimizationResult> {
    if ce.population == 0 || budget < ce.population {
        return Err(Error::InvalidBudget { budget, population: ce.population });
    }
    if ce.elite == 0 || ce.elite > ce.population {
        return Err(Error::InvalidSpec(format!("elite count {} outside 1..={}", ce.elite, ce.population)));
    }
    let bounds = family.bounds();
    let dim = family.dim();
    if bounds.len() != dim || bounds.iter().any(|(lo, hi)| !(lo <= hi)) {
        return Err(Error::InvalidSpec("family bounds must be one ordered pair per parameter".into()));
    }
    let clamp = |theta: &mut [f64]| {
        for (v, (lo, hi)) in theta.iter_mut().zip(&bounds) {
            *v = v.clamp(*lo, *hi);
        }
    };
    let mut mu = family.anchor();
    clamp(&mut mu);
    let mut sd: Vec<f64> = bounds.iter().map(|(lo, hi)| ce.initial_spread * (hi - lo)).collect();
    let generations = budget / ce.population;
    let mut best: Option<(Vec<f64>, ValueEstimate)> = None;
    let mut trace = Vec::with_capacity(generations);
    let mut evaluations = 0;
    let mut converged = false;

    for g in 0..generations {
        let mut rng = stream_rng(seed, g as u64, StreamKind::Auxiliary, 0);
        let candidates: Vec<Vec<f64>> = (0..ce.population)
            .map(|c| {
                if g == 0 && c == 0 {
                    return mu.clone();
                }
                let mut th: Vec<f64> = mu.iter().zip(&sd).map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal)).collect();
                clamp(&mut th);
                th
            })
            .collect();
        let scored: Vec<Option<ValueEstimate>> = candidates
            .par_iter()
            .map(|th| match estimate_value(spec, &family.build(th), particles, batches, grid, seed) {
                Ok(v) => Ok(Some(v)),
                Err(Error::NumericalBlowup { .. }) => Ok(None),
                Err(e) => Err(e),
            })
            .collect::<Result<_>>()?;
        evaluations += candidates.len();

        let mut order: Vec<usize> = (0..candidates.len()).collect();
        let score = |i: usize| scored[i].as_ref().map_or(f64::NEG_INFINITY, |v| v.mean);
        // stable: ties keep the earlier candidate
        order.sort_by(|&a, &b| score(b).total_cmp(&score(a)));
        let top = order[0];
        if let Some(v) = &scored[top] {
            if best.as_ref().map_or(true, |(_, b)| v.mean > b.mean) {
                best = Some((candidates[top].clone(), v.clone()));
            }
        }
        let finite: Vec<f64> = (0..candidates.len()).map(score).filter(|v| v.is_finite()).collect();
        let gen_mean = if finite.is_empty() { f64::NEG_INFINITY } else { finite.iter().sum::<f64>() / finite.len() as f64 };
        let (best_mean, best_se) = best.as_ref().map_or((f64::NEG_INFINITY, 0.0), |(_, b)| (b.mean, b.std_error));
        trace.push(GenerationRecord { generation: g + 1, best: best_mean, mean: gen_mean, std_error: best_se });

        let elites: Vec<&Vec<f64>> = order.iter().take(ce.elite).filter(|&&i| scored[i].is_some()).map(|&i| &candidates[i]).collect();
        if elites.is_empty() {
            continue;
        }
        let e = elites.len() as f64;
        for j in 0..dim {
            let em = elites.iter().map(|th| th[j]).sum::<f64>() / e;
            let es = (elites.iter().map(|th| (th[j] - em).powi(2)).sum::<f64>() / e).sqrt();
            mu[j] = ce.smoothing * em + (1.0 - ce.smoothing) * mu[j];
            sd[j] = ce.smoothing * es + (1.0 - ce.smoothing) * sd[j];
        }
        if sd.iter().zip(&bounds).all(|(s, (lo, hi))| *s <= ce.tolerance * (hi - lo).max(f64::MIN_POSITIVE)) {
            converged = true;
            break;
        }
    }
    let (theta, best) = best.ok_or(Error::NumericalBlowup { step: 0 })?;
    Ok(OptimizationResult { theta, best, trace, evaluations, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{rho, ActionSpace, InitialLaw};

    fn space() -> ActionSpace {
        ActionSpace::interval(-1.0, 1.0, 0.0).unwrap()
    }

    #[test]
    fn constant_terminal_reward() {
        let spec = ProblemSpec::zero("g1", 1, 1, 1, space(), 1.0).with_sigma(|_, s| s[0] = 1.0).with_terminal(|_| 1.0);
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let v = estimate_value(&spec, &ControlPolicy::constant(vec![0.0]), 16, 4, &grid, 1).unwrap();
        assert_eq!(v.mean, 1.0);
        assert_eq!(v.std_error, 0.0);
    }

    #[test]
    fn unit_running_reward_integrates_to_horizon() {
        let spec = ProblemSpec::zero("l1", 1, 1, 0, space(), 2.0).with_running(|_| 1.0);
        let grid = TimeGrid::new(2.0, 16).unwrap();
        let v = estimate_value(&spec, &ControlPolicy::constant(vec![0.0]), 3, 2, &grid, 1).unwrap();
        assert_eq!(v.mean, 2.0);
    }

    #[test]
    fn deterministic_payoff_from_dirac_start() {
        let c = 1.5;
        let spec = ProblemSpec::zero("sq", 1, 1, 1, space(), 1.0)
            .with_initial(InitialLaw::Dirac { point: vec![c] })
            .with_terminal(|p| p.path.at(0)[0].powi(2));
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let v = estimate_value(&spec, &ControlPolicy::constant(vec![0.0]), 8, 5, &grid, 9).unwrap();
        assert_eq!(v.mean, c * c);
        assert_eq!(v.std_error, 0.0);
    }

    fn noisy() -> ProblemSpec {
        ProblemSpec::zero("noisy", 1, 1, 1, space(), 1.0)
            .with_initial(InitialLaw::Gaussian { mean: vec![0.1], std: vec![0.5] })
            .with_drift(|p, b| b[0] = -p.state[0] + p.action[0])
            .with_sigma(|_, s| s[0] = 0.4)
            .with_sigma0(|_, s| s[0] = 0.3)
            .with_running(|p| -p.state[0].powi(2) - 0.5 * p.action[0].powi(2))
            .with_terminal(|p| -(p.state[0] - p.law.mean()[0]).powi(2))
    }

    #[test]
    fn deterministic_in_seed_and_affine_in_terminal_constant() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let pol = ControlPolicy::constant(vec![0.2]);
        let a = estimate_value(&noisy(), &pol, 16, 6, &grid, 3).unwrap();
        let b = estimate_value(&noisy(), &pol, 16, 6, &grid, 3).unwrap();
        assert_eq!(a, b);
        let base = noisy();
        let g = base.terminal.clone();
        let shifted = base.with_terminal(move |p| g(p) + 2.5);
        let c = estimate_value(&shifted, &pol, 16, 6, &grid, 3).unwrap();
        assert!((c.mean - a.mean - 2.5).abs() < 1e-12);
        assert!((c.std_error - a.std_error).abs() < 1e-12);
    }

    #[test]
    fn permuting_the_initial_sample_keeps_the_estimate() {
        let spec = noisy();
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let pol = ControlPolicy::constant(vec![0.2]);
        let x0 = spec.initial.sample(12, 4, 0);
        let noise = sample_noise(&grid, 12, 1, 1, 4, 0);
        let a = evaluate_cost(&simulate_particles(&spec, &pol, &x0, &noise).unwrap(), &spec);
        let mut rev = x0.clone();
        rev.reverse();
        let mut rnoise = noise.clone();
        for i in 0..12 {
            rnoise.dw[i * 8..(i + 1) * 8].copy_from_slice(&noise.dw[(11 - i) * 8..(12 - i) * 8]);
        }
        let b = evaluate_cost(&simulate_particles(&spec, &pol, &rev, &rnoise).unwrap(), &spec);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn se_halves_when_batches_quadruple() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let pol = ControlPolicy::constant(vec![0.0]);
        let a = estimate_value(&noisy(), &pol, 8, 100, &grid, 7).unwrap();
        let b = estimate_value(&noisy(), &pol, 8, 400, &grid, 7).unwrap();
        let ratio = a.std_error / b.std_error;
        assert!((ratio / 2.0 - 1.0).abs() < 0.3, "{ratio}");
    }

    struct ConstantFamily;

    impl PolicyFamily for ConstantFamily {
        fn dim(&self) -> usize {
            1
        }
        fn bounds(&self) -> Vec<(f64, f64)> {
            vec![(-1.0, 1.0)]
        }
        fn anchor(&self) -> Vec<f64> {
            vec![0.0]
        }
        fn build(&self, theta: &[f64]) -> ControlPolicy {
            ControlPolicy::constant(theta.to_vec())
        }
    }

    fn coercive_only() -> ProblemSpec {
        ProblemSpec::zero("coercive", 1, 1, 1, space(), 1.0)
            .with_sigma(|_, s| s[0] = 1.0)
            .with_running(|p| -rho(&[0.0], p.action).powi(3))
    }

    #[test]
    fn coercivity_keeps_the_optimizer_at_a0() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let r = optimize_value(&coercive_only(), &ConstantFamily, 32 * 6, 4, 2, &grid, 1).unwrap();
        assert_eq!(r.theta, vec![0.0]);
        assert_eq!(r.best.mean, 0.0);
        assert!(r.trace.windows(2).all(|w| w[1].best >= w[0].best));
    }

    #[test]
    fn one_generation_returns_the_best_initial_candidate() {
        let spec = noisy();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let r = optimize_value(&spec, &ConstantFamily, 32, 8, 4, &grid, 2).unwrap();
        assert_eq!(r.evaluations, 32);
        assert_eq!(r.trace.len(), 1);
        let again = estimate_value(&spec, &ConstantFamily.build(&r.theta), 8, 4, &grid, 2).unwrap();
        assert_eq!(again, r.best);
        let anchor = estimate_value(&spec, &ConstantFamily.build(&[0.0]), 8, 4, &grid, 2).unwrap();
        assert!(r.best.mean >= anchor.mean);
    }

    #[test]
    fn budget_below_population_is_rejected() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let err = optimize_value(&noisy(), &ConstantFamily, 31, 8, 4, &grid, 2).unwrap_err();
        assert!(matches!(err, Error::InvalidBudget { budget: 31, population: 32 }));
    }
}
