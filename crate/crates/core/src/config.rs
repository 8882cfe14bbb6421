//! TOML run configuration, serializable policies and the named-problem
//! registry.
//!
//! Every field of a config file is optional; the CLI resolves values with
//! the precedence flags > file > built-in defaults.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bench::{smooth_open_loop, solve_lq_oracle, Estimator, LQSpec, LinearFeedbackFamily, Perturbation};
use crate::control::{ControlPolicy, RelaxedFiniteAtom};
use crate::measure::OccupationMeasure;
use crate::model::{ActionSpace, GrowthConstants, ProblemSpec, ValidationConfig};
use crate::timebase::TimeGrid;
use crate::value::PolicyFamily;
use crate::{Error, Result};

pub const PROBLEMS: [&str; 3] = ["lq1d", "zero", "drift-only"];

/// A policy as data: variant tag plus parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyConfig {
    Constant { action: Vec<f64> },
    /// see [`LinearFeedbackFamily`]
    LinearFeedback { knots: usize, theta: Vec<f64> },
    /// the Riccati-optimal feedback of the LQ instance
    Oracle,
    /// `α(t) = cos(3t) (0.5 + 0.3 tanh X_0)`
    SmoothOpenLoop,
    /// time-constant weights on finitely many atoms
    Relaxed { atoms: Vec<Vec<f64>>, weights: Vec<f64> },
}

impl PolicyConfig {
    pub fn build(&self, problem: &Problem, grid: &TimeGrid) -> Result<ControlPolicy> {
        match self {
            PolicyConfig::Constant { action } => {
                if !problem.spec.action_space.contains(action) {
                    return Err(Error::InvalidSpec(format!("constant action {action:?} outside the action space")));
                }
                Ok(ControlPolicy::constant(action.clone()))
            }
            PolicyConfig::LinearFeedback { knots, theta } => {
                let fam = LinearFeedbackFamily::new(problem.spec.horizon, *knots);
                if theta.len() != fam.dim() {
                    return Err(Error::ShapeMismatch(format!("{} knots need {} parameters, got {}", knots, fam.dim(), theta.len())));
                }
                Ok(fam.build(theta))
            }
            PolicyConfig::Oracle => {
                let lq = problem.lq.as_ref().ok_or_else(|| Error::Config("the oracle policy needs an LQ problem".into()))?;
                let (sol, _) = solve_lq_oracle(lq, lq.mu0, lq.v0, grid)?;
                Ok(Arc::new(sol).feedback_policy())
            }
            PolicyConfig::SmoothOpenLoop => Ok(smooth_open_loop()),
            PolicyConfig::Relaxed { atoms, weights } => {
                let weights = OccupationMeasure::constant(*grid, atoms.clone(), weights)?;
                Ok(ControlPolicy::RelaxedFiniteAtom(RelaxedFiniteAtom { weights }))
            }
        }
    }
}

/// Knobs of the studies and the optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    /// per-command default when absent
    pub estimator: Option<Estimator>,
    /// per-command default when absent
    pub control_variate: Option<bool>,
    /// optimizer evaluation budget
    pub budget: usize,
    /// knots of the linear-feedback family
    pub knots: usize,
    pub perturbation: Perturbation,
    pub epsilons: Vec<f64>,
    /// scalar atoms and weights of the equivalence study
    pub atoms: Vec<f64>,
    pub weights: Vec<f64>,
    /// grid sizes of the equivalence study
    pub grids: Vec<usize>,
    /// coarse block counts of the piecewise study
    pub blocks: Vec<usize>,
    /// reference population of the chaos study
    pub reference: usize,
    /// Wasserstein / moment order
    pub order: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            estimator: None,
            control_variate: None,
            budget: 1024,
            knots: 3,
            perturbation: Perturbation::MeanShift,
            epsilons: vec![0.4, 0.2, 0.1],
            atoms: vec![-1.0, 1.0],
            weights: vec![0.5, 0.5],
            grids: vec![4, 8, 16, 32],
            blocks: vec![2, 4, 8, 16],
            reference: 512,
            order: 2.0,
        }
    }
}

/// Contents of a config file. Absent keys fall back to flags or defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: Option<String>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub particles: Option<Vec<usize>>,
    pub batches: Option<usize>,
    pub threads: Option<usize>,
    /// terminal constant of the `zero` problem
    pub g_const: Option<f64>,
    pub lq: Option<LQSpec>,
    pub policy: Option<PolicyConfig>,
    pub study: Option<StudyConfig>,
    pub validation: Option<ValidationConfig>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// `other` wins wherever it sets a value.
    pub fn overlay(mut self, other: RunConfig) -> Self {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f; } )* };
        }
        take!(problem, seed, steps, particles, batches, threads, g_const, lq, policy, study, validation);
        self
    }
}

/// A built problem together with its LQ parameters when it has them.
#[derive(Clone, Debug)]
pub struct Problem {
    pub spec: ProblemSpec,
    pub lq: Option<LQSpec>,
}

/// `zero`: all coefficients and the running reward vanish, `g ≡ g_const`.
pub fn zero_problem(g_const: f64) -> Result<ProblemSpec> {
    if !g_const.is_finite() {
        return Err(Error::InvalidSpec("terminal constant must be finite".into()));
    }
    let space = ActionSpace::interval(-1.0, 1.0, 0.0)?;
    Ok(ProblemSpec::zero("zero", 1, 1, 0, space, 1.0).with_terminal(move |_| g_const))
}

/// `drift-only`: `dX = α dt` on `[0, 1]`, `α ∈ [−1, 1]`, reward
/// `−α²/2` and terminal `−X_T²/2`.
pub fn drift_only_problem() -> Result<ProblemSpec> {
    let space = ActionSpace::interval(-1.0, 1.0, 0.0)?;
    Ok(ProblemSpec::zero("drift-only", 1, 1, 0, space, 1.0)
        .with_drift(|p, b| b[0] = p.action[0])
        .with_running(|p| -0.5 * p.action[0] * p.action[0])
        .with_terminal(|p| -0.5 * p.state[0] * p.state[0])
        .with_initial(crate::model::InitialLaw::Gaussian { mean: vec![0.5], std: vec![0.5] })
        .with_constants(GrowthConstants { c: 2.0, p: 2.0, p_prime: 3.0, p_hat: 2.0, c_l: 0.5 }))
}

pub fn named_problem(name: &str, lq: Option<LQSpec>, g_const: f64) -> Result<Problem> {
    match name {
        "lq1d" => {
            let lq = lq.unwrap_or_default();
            Ok(Problem { spec: lq.to_problem()?, lq: Some(lq) })
        }
        "zero" => Ok(Problem { spec: zero_problem(g_const)?, lq: None }),
        "drift-only" => Ok(Problem { spec: drift_only_problem()?, lq: None }),
        other => Err(Error::Config(format!("unknown problem '{other}'; expected one of {}", PROBLEMS.join(", ")))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::estimate_value;

    #[test]
    fn policies_round_trip() {
        let all = vec![
            PolicyConfig::Constant { action: vec![0.25] },
            PolicyConfig::LinearFeedback { knots: 2, theta: vec![0.1, 0.2, 0.3, 1.0 / 3.0] },
            PolicyConfig::Oracle,
            PolicyConfig::SmoothOpenLoop,
            PolicyConfig::Relaxed { atoms: vec![vec![-1.0], vec![1.0]], weights: vec![0.5, 0.5] },
        ];
        for p in all {
            let cfg = RunConfig { policy: Some(p.clone()), ..RunConfig::default() };
            let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(back.policy, Some(p));
        }
    }

    #[test]
    fn full_config_round_trips() {
        let cfg = RunConfig {
            problem: Some("lq1d".into()),
            seed: Some(7),
            steps: Some(20),
            particles: Some(vec![64, 128]),
            batches: Some(8),
            threads: Some(2),
            g_const: Some(1.5),
            lq: Some(LQSpec::default()),
            policy: Some(PolicyConfig::Oracle),
            study: Some(StudyConfig::default()),
            validation: Some(ValidationConfig::default()),
        };
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn overlay_prefers_the_top_layer() {
        let file = RunConfig { seed: Some(1), steps: Some(10), ..RunConfig::default() };
        let flags = RunConfig { seed: Some(2), ..RunConfig::default() };
        let merged = file.overlay(flags);
        assert_eq!((merged.seed, merged.steps), (Some(2), Some(10)));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("sed = 3"), Err(Error::Config(_))));
    }

    #[test]
    fn registry() {
        for name in PROBLEMS {
            named_problem(name, None, 0.0).unwrap().spec.check().unwrap();
        }
        assert!(named_problem("nope", None, 0.0).is_err());
    }

    #[test]
    fn zero_problem_pays_its_constant() {
        let spec = zero_problem(1.0).unwrap();
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let est = estimate_value(&spec, &ControlPolicy::constant(vec![0.0]), 8, 4, &grid, 0).unwrap();
        assert_eq!((est.mean, est.std_error), (1.0, 0.0));
    }

    #[test]
    fn serialized_feedback_matches_family() {
        let p = named_problem("lq1d", None, 0.0).unwrap();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let theta = vec![1.0, 0.5, 0.2, 0.3, 0.1, 0.0];
        let a = PolicyConfig::LinearFeedback { knots: 3, theta: theta.clone() }.build(&p, &grid).unwrap();
        let b = LinearFeedbackFamily::new(1.0, 3).build(&theta);
        let ea = estimate_value(&p.spec, &a, 16, 2, &grid, 3).unwrap();
        let eb = estimate_value(&p.spec, &b, 16, 2, &grid, 3).unwrap();
        assert_eq!(ea.batch_values, eb.batch_values);
    }
}
