//! Control problem definition and sampling-based validation of the standing
//! growth, Lipschitz and coercivity conditions.

use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, OnceLock};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::measure::assignment_cost;
use crate::timebase::{norm, stream_rng, PathRef, StreamKind, TimeGrid};
use crate::{Error, Result};

/// Euclidean metric on the action space.
pub fn rho(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActionShape {
    Box { lower: Vec<f64>, upper: Vec<f64> },
    FiniteSet { points: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub shape: ActionShape,
    pub a0: Vec<f64>,
}

impl ActionSpace {
    pub fn new(shape: ActionShape, a0: Vec<f64>) -> Result<Self> {
        let space = Self { shape, a0 };
        space.check()?;
        Ok(space)
    }

    pub fn interval(lower: f64, upper: f64, a0: f64) -> Result<Self> {
        Self::new(ActionShape::Box { lower: vec![lower], upper: vec![upper] }, vec![a0])
    }

    pub fn check(&self) -> Result<()> {
        let j = self.a0.len();
        if j == 0 {
            return Err(Error::InvalidSpec("action dimension must be at least 1".into()));
        }
        match &self.shape {
            ActionShape::Box { lower, upper } => {
                if lower.len() != j || upper.len() != j {
                    return Err(Error::InvalidSpec("box bounds do not match a0 dimension".into()));
                }
                if lower.iter().zip(upper).any(|(l, u)| !(l <= u)) {
                    return Err(Error::InvalidSpec("box requires lower <= upper".into()));
                }
            }
            ActionShape::FiniteSet { points } => {
                if points.is_empty() || points.iter().any(|p| p.len() != j) {
                    return Err(Error::InvalidSpec("finite action set is empty or ragged".into()));
                }
            }
        }
        if !self.contains(&self.a0) {
            return Err(Error::InvalidSpec(format!("a0 = {:?} is not an admissible action", self.a0)));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.a0.len()
    }

    pub fn contains(&self, a: &[f64]) -> bool {
        match &self.shape {
            ActionShape::Box { lower, upper } => {
                a.len() == lower.len() && a.iter().zip(lower.iter().zip(upper)).all(|(x, (l, u))| l <= x && x <= u)
            }
            ActionShape::FiniteSet { points } => points.iter().any(|p| p.as_slice() == a),
        }
    }

    pub fn is_bounded(&self) -> bool {
        match &self.shape {
            ActionShape::Box { lower, upper } => lower.iter().chain(upper).all(|v| v.is_finite()),
            ActionShape::FiniteSet { .. } => true,
        }
    }

    /// Clamps into a box, snaps to the nearest member of a finite set.
    pub fn project(&self, a: &mut [f64]) {
        match &self.shape {
            ActionShape::Box { lower, upper } => {
                for ((x, l), u) in a.iter_mut().zip(lower).zip(upper) {
                    *x = x.clamp(*l, *u);
                }
            }
            ActionShape::FiniteSet { points } => {
                let best = points
                    .iter()
                    .min_by(|p, q| rho(p, a).total_cmp(&rho(q, a)))
                    .expect("non-empty action set");
                a.copy_from_slice(best);
            }
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match &self.shape {
            ActionShape::Box { lower, upper } => lower
                .iter()
                .zip(upper)
                .map(|(l, u)| {
                    // unbounded sides fall back to a Gaussian spread around a0
                    if l.is_finite() && u.is_finite() {
                        if l == u {
                            *l
                        } else {
                            rng.gen_range(*l..=*u)
                        }
                    } else {
                        let z: f64 = StandardNormal.sample(rng);
                        (z * 3.0).clamp(*l, *u)
                    }
                })
                .collect(),
            ActionShape::FiniteSet { points } => points[rng.gen_range(0..points.len())].clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrowthConstants {
    pub c: f64,
    pub p: f64,
    pub p_prime: f64,
    pub p_hat: f64,
    pub c_l: f64,
}

impl Default for GrowthConstants {
    fn default() -> Self {
        Self { c: 1.0, p: 2.0, p_prime: 3.0, p_hat: 2.0, c_l: 1.0 }
    }
}

impl GrowthConstants {
    pub fn check(&self) -> Result<()> {
        let ok = self.p_prime > self.p && self.p >= 2.0 && 2.0 >= self.p_hat && self.p_hat >= 0.0 && self.c > 0.0 && self.c_l > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSpec(format!("constants violate p' > p >= 2 >= p_hat >= 0, C > 0, C_L > 0: {self:?}")))
        }
    }
}

/// Initial law of `X_0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialLaw {
    Dirac { point: Vec<f64> },
    /// Independent Gaussian coordinates.
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
}

impl InitialLaw {
    pub fn dim(&self) -> usize {
        match self {
            InitialLaw::Dirac { point } => point.len(),
            InitialLaw::Gaussian { mean, .. } => mean.len(),
        }
    }

    /// `X_0` of `particles` particles `[particles × n]`; particle `i` draws
    /// from its own stream so prefixes are stable under growing `particles`.
    pub fn sample(&self, particles: usize, seed: u64, batch: u64) -> Vec<f64> {
        let n = self.dim();
        let mut out = vec![0.0; particles * n];
        for (i, row) in out.chunks_mut(n.max(1)).enumerate().take(particles) {
            match self {
                InitialLaw::Dirac { point } => row.copy_from_slice(point),
                InitialLaw::Gaussian { mean, std } => {
                    let mut rng = stream_rng(seed, batch, StreamKind::Initial, i as u64);
                    for c in 0..n {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        row[c] = mean[c] + std[c] * z;
                    }
                }
            }
        }
        out
    }

    pub fn shifted(&self, shift: &[f64]) -> Self {
        match self {
            InitialLaw::Dirac { point } => InitialLaw::Dirac { point: point.iter().zip(shift).map(|(a, b)| a + b).collect() },
            InitialLaw::Gaussian { mean, std } => {
                InitialLaw::Gaussian { mean: mean.iter().zip(shift).map(|(a, b)| a + b).collect(), std: std.clone() }
            }
        }
    }
}

/// Empirical (pair) law of a particle population, stopped at grid index
/// `stop`, together with the current states at the evaluation time.
pub struct Law<'a> {
    paths: &'a [f64],
    count: usize,
    dim: usize,
    len: usize,
    stop: usize,
    states: &'a [f64],
    actions: Option<&'a [f64]>,
    action_dim: usize,
    mean: OnceLock<Vec<f64>>,
}

impl<'a> Law<'a> {
    /// `paths` is `[count × len × dim]`, `states` is `[count × dim]` and
    /// `actions`, when present, `[count × action_dim]`.
    pub fn new(paths: &'a [f64], count: usize, dim: usize, len: usize, stop: usize, states: &'a [f64]) -> Self {
        debug_assert_eq!(paths.len(), count * len * dim);
        debug_assert_eq!(states.len(), count * dim);
        Self { paths, count, dim, len, stop, states, actions: None, action_dim: 0, mean: OnceLock::new() }
    }

    pub fn with_actions(mut self, actions: &'a [f64], action_dim: usize) -> Self {
        debug_assert_eq!(actions.len(), self.count * action_dim);
        self.actions = Some(actions);
        self.action_dim = action_dim;
        self
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn stop(&self) -> usize {
        self.stop
    }

    pub fn path(&self, i: usize) -> PathRef<'a> {
        let s = self.len * self.dim;
        PathRef::new(&self.paths[i * s..(i + 1) * s], self.dim, self.len, self.stop)
    }

    pub fn state(&self, i: usize) -> &'a [f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn action(&self, i: usize) -> Option<&'a [f64]> {
        self.actions.map(|a| &a[i * self.action_dim..(i + 1) * self.action_dim])
    }

    pub fn has_actions(&self) -> bool {
        self.actions.is_some()
    }

    /// Mean of the current states; computed once per law.
    pub fn mean(&self) -> &[f64] {
        self.mean.get_or_init(|| {
            let mut m = vec![0.0; self.dim];
            for i in 0..self.count {
                for (acc, v) in m.iter_mut().zip(self.state(i)) {
                    *acc += v;
                }
            }
            let n = self.count as f64;
            m.iter_mut().for_each(|v| *v /= n);
            m
        })
    }

    /// `∫ (‖x‖^p + ρ(a0, a)^p)`, the action part only for pair laws.
    pub fn moment(&self, p: f64, a0: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..self.count {
            s += self.path(i).sup_norm().powf(p);
            if let Some(a) = self.action(i) {
                s += rho(a0, a).powf(p);
            }
        }
        s / self.count as f64
    }
}

/// Arguments of a coefficient evaluation at time `t` (grid index `step` is
/// the last grid point not after `t`).
pub struct Point<'a> {
    pub t: f64,
    pub step: usize,
    pub state: &'a [f64],
    pub path: PathRef<'a>,
    pub law: &'a Law<'a>,
    pub action: &'a [f64],
}

pub type VectorFn = Arc<dyn Fn(&Point<'_>, &mut [f64]) + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(&Point<'_>) -> f64 + Send + Sync>;

fn zero_vector() -> VectorFn {
    Arc::new(|_, out: &mut [f64]| out.fill(0.0))
}

fn zero_scalar() -> ScalarFn {
    Arc::new(|_| 0.0)
}

/// A controlled McKean-Vlasov problem. Immutable and shareable.
#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    /// state dimension
    pub n: usize,
    /// idiosyncratic noise dimension
    pub d: usize,
    /// common noise dimension, possibly zero
    pub ell: usize,
    pub action_space: ActionSpace,
    pub horizon: f64,
    pub drift: VectorFn,
    /// `n × d`, row-major
    pub sigma: VectorFn,
    /// `n × ell`, row-major; must not read the action in law-only mode
    pub sigma0: VectorFn,
    pub running: ScalarFn,
    /// evaluated at `t = T` with an empty action
    pub terminal: ScalarFn,
    pub constants: GrowthConstants,
    pub initial: InitialLaw,
    /// Coefficients see the state law only, and `sigma0` ignores the action.
    pub law_only: bool,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("d", &self.d)
            .field("ell", &self.ell)
            .field("action_space", &self.action_space)
            .field("horizon", &self.horizon)
            .field("constants", &self.constants)
            .field("initial", &self.initial)
            .field("law_only", &self.law_only)
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    /// A problem with all coefficients and rewards zero.
    pub fn zero(name: &str, n: usize, d: usize, ell: usize, action_space: ActionSpace, horizon: f64) -> Self {
        Self {
            name: name.to_string(),
            n,
            d,
            ell,
            action_space,
            horizon,
            drift: zero_vector(),
            sigma: zero_vector(),
            sigma0: zero_vector(),
            running: zero_scalar(),
            terminal: zero_scalar(),
            constants: GrowthConstants::default(),
            initial: InitialLaw::Dirac { point: vec![0.0; n] },
            law_only: true,
        }
    }

    pub fn with_drift(mut self, f: impl Fn(&Point<'_>, &mut [f64]) + Send + Sync + 'static) -> Self {
        self.drift = Arc::new(f);
        self
    }

    pub fn with_sigma(mut self, f: impl Fn(&Point<'_>, &mut [f64]) + Send + Sync + 'static) -> Self {
        self.sigma = Arc::new(f);
        self
    }

    pub fn with_sigma0(mut self, f: impl Fn(&Point<'_>, &mut [f64]) + Send + Sync + 'static) -> Self {
        self.sigma0 = Arc::new(f);
        self
    }

    pub fn with_running(mut self, f: impl Fn(&Point<'_>) -> f64 + Send + Sync + 'static) -> Self {
        self.running = Arc::new(f);
        self
    }

    pub fn with_terminal(mut self, f: impl Fn(&Point<'_>) -> f64 + Send + Sync + 'static) -> Self {
        self.terminal = Arc::new(f);
        self
    }

    pub fn with_initial(mut self, initial: InitialLaw) -> Self {
        self.initial = initial;
        self
    }

    pub fn with_constants(mut self, constants: GrowthConstants) -> Self {
        self.constants = constants;
        self
    }

    pub fn with_law_only(mut self, law_only: bool) -> Self {
        self.law_only = law_only;
        self
    }

    pub fn check(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidSpec("state dimension must be positive".into()));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::InvalidSpec(format!("horizon must be positive, got {}", self.horizon)));
        }
        if self.initial.dim() != self.n {
            return Err(Error::InvalidSpec("initial law dimension differs from state dimension".into()));
        }
        self.action_space.check()?;
        self.constants.check()
    }
}

/// Knobs of the sampling validator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationConfig {
    pub samples: usize,
    pub perturbation: f64,
    /// atoms per sampled law
    pub atoms: usize,
    /// grid steps of sampled paths
    pub steps: usize,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self { samples: 256, perturbation: 1.0, atoms: 8, steps: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// largest observed ratio (or violation) for this condition
    pub worst: f64,
    pub witness: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub problem: String,
    pub samples: usize,
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

struct Tracker {
    name: &'static str,
    bound: f64,
    worst: f64,
    witness: String,
}

impl Tracker {
    fn new(name: &'static str, bound: f64) -> Self {
        Self { name, bound, worst: 0.0, witness: String::new() }
    }

    fn observe(&mut self, value: f64, witness: impl FnOnce() -> String) {
        if value > self.worst || (self.witness.is_empty() && value >= self.worst) {
            self.worst = value;
            self.witness = witness();
        }
    }

    fn finish(self) -> CheckResult {
        CheckResult { name: self.name.to_string(), passed: self.worst <= self.bound, worst: self.worst, witness: self.witness }
    }
}

struct Sample {
    step: usize,
    path: Vec<f64>,
    law_paths: Vec<f64>,
    law_actions: Vec<f64>,
    action: Vec<f64>,
}

struct Coefs {
    b: Vec<f64>,
    s: Vec<f64>,
    s0: Vec<f64>,
    l: f64,
}

impl Coefs {
    fn joint(&self) -> impl Iterator<Item = &f64> {
        self.b.iter().chain(&self.s).chain(&self.s0)
    }

    fn same(&self, other: &Coefs) -> bool {
        self.joint().zip(other.joint()).all(|(a, b)| a.to_bits() == b.to_bits()) && self.l.to_bits() == other.l.to_bits()
    }
}

struct Evaluator<'s> {
    spec: &'s ProblemSpec,
    grid: TimeGrid,
    atoms: usize,
}

impl Evaluator<'_> {
    fn len(&self) -> usize {
        self.grid.steps() + 1
    }

    fn states_at(&self, law_paths: &[f64], k: usize) -> Vec<f64> {
        let (n, len) = (self.spec.n, self.len());
        (0..self.atoms).flat_map(|i| law_paths[(i * len + k) * n..(i * len + k + 1) * n].to_vec()).collect()
    }

    fn describe(&self, s: &Sample, stop: usize) -> String {
        let len = self.len();
        let path = PathRef::new(&s.path, self.spec.n, len, stop);
        format!("t={} |x|={:.4} a={:?}", self.grid.t(s.step), path.sup_norm(), s.action)
    }

    fn eval(&self, s: &Sample, stop: usize, law_actions: Option<&[f64]>) -> Result<Coefs> {
        let spec = self.spec;
        let (n, len) = (spec.n, self.len());
        let states = self.states_at(&s.law_paths, s.step);
        let mut law = Law::new(&s.law_paths, self.atoms, n, len, stop, &states);
        if let Some(acts) = law_actions {
            law = law.with_actions(acts, spec.action_space.dim());
        }
        let point = Point {
            t: self.grid.t(s.step),
            step: s.step,
            state: &s.path[s.step * n..(s.step + 1) * n],
            path: PathRef::new(&s.path, n, len, stop),
            law: &law,
            action: &s.action,
        };
        let mut c = Coefs { b: vec![0.0; n], s: vec![0.0; n * spec.d], s0: vec![0.0; n * spec.ell], l: 0.0 };
        let run = catch_unwind(AssertUnwindSafe(|| {
            (spec.drift)(&point, &mut c.b);
            (spec.sigma)(&point, &mut c.s);
            (spec.sigma0)(&point, &mut c.s0);
            c.l = (spec.running)(&point);
        }));
        if run.is_err() || !c.joint().all(|v| v.is_finite()) || !c.l.is_finite() {
            return Err(Error::InvalidSpec(format!("coefficient failed or non-finite at {}", self.describe(s, stop))));
        }
        Ok(c)
    }

    fn terminal(&self, s: &Sample) -> Result<f64> {
        let spec = self.spec;
        let (n, len, m) = (spec.n, self.len(), self.grid.steps());
        let states = self.states_at(&s.law_paths, m);
        let law = Law::new(&s.law_paths, self.atoms, n, len, m, &states);
        let point = Point {
            t: self.grid.horizon(),
            step: m,
            state: &s.path[m * n..(m + 1) * n],
            path: PathRef::new(&s.path, n, len, m),
            law: &law,
            action: &[],
        };
        let g = catch_unwind(AssertUnwindSafe(|| (spec.terminal)(&point)))
            .map_err(|_| Error::InvalidSpec(format!("terminal reward panicked at {}", self.describe(s, m))))?;
        if !g.is_finite() {
            return Err(Error::InvalidSpec(format!("terminal reward non-finite at {}", self.describe(s, m))));
        }
        Ok(g)
    }
}

fn random_path(rng: &mut ChaCha8Rng, n: usize, grid: &TimeGrid, scale: f64) -> Vec<f64> {
    let len = grid.steps() + 1;
    let radius = scale * 10f64.powf(rng.gen_range(-1.0..1.0));
    let step = radius * grid.dt().sqrt();
    let mut out = vec![0.0; len * n];
    for c in 0..n {
        let z: f64 = StandardNormal.sample(rng);
        out[c] = radius * z;
    }
    for k in 1..len {
        for c in 0..n {
            let z: f64 = StandardNormal.sample(rng);
            out[k * n + c] = out[(k - 1) * n + c] + step * z;
        }
    }
    out
}

/// Wasserstein-p between two equal-size laws stopped at `stop`, with atom
/// metric `‖x - y‖ + ρ(a, b)`.
fn law_distance(ev: &Evaluator<'_>, x: &Sample, y: &Sample, stop: usize, p: f64) -> f64 {
    let (n, len, j) = (ev.spec.n, ev.len(), ev.spec.action_space.dim());
    let k = ev.atoms;
    let mut cost = vec![0.0; k * k];
    for i in 0..k {
        let pi = PathRef::new(&x.law_paths[i * len * n..(i + 1) * len * n], n, len, stop);
        for l in 0..k {
            let pl = PathRef::new(&y.law_paths[l * len * n..(l + 1) * len * n], n, len, stop);
            let mut d = 0.0f64;
            for idx in 0..=stop {
                d = d.max(rho(pi.at(idx), pl.at(idx)));
            }
            d += rho(&x.law_actions[i * j..(i + 1) * j], &y.law_actions[l * j..(l + 1) * j]);
            cost[i * k + l] = d.powf(p);
        }
    }
    (assignment_cost(&cost, k) / k as f64).powf(1.0 / p)
}

/// Samples the coefficients and reports, per condition, the worst observed
/// ratio against its bound together with the sample that produced it.
pub fn validate_spec(spec: &ProblemSpec, config: &ValidationConfig, seed: u64) -> Result<ValidationReport> {
    spec.check()?;
    let k_const = spec.constants;
    let grid = TimeGrid::new(spec.horizon, config.steps.max(1))?;
    let ev = Evaluator { spec, grid, atoms: config.atoms.max(1) };
    let (n, len, m, j) = (spec.n, grid.steps() + 1, grid.steps(), spec.action_space.dim());
    let a0 = spec.action_space.a0.clone();
    let (p, p_hat, p_prime) = (k_const.p, k_const.p_hat, k_const.p_prime);

    let mut anticip = Tracker::new("non_anticipativity", 0.0);
    let mut lipschitz = Tracker::new("lipschitz", k_const.c);
    let mut drift_growth = Tracker::new("drift_growth", k_const.c);
    let mut diffusion_growth = Tracker::new("diffusion_growth", k_const.c);
    let mut terminal_growth = Tracker::new("terminal_growth", k_const.c);
    let mut coercive_upper = Tracker::new("running_upper_coercive", k_const.c);
    let mut running_lower = Tracker::new("running_lower", k_const.c);
    let mut law_only = Tracker::new("law_only", 0.0);

    let mut rng = stream_rng(seed, 0, StreamKind::Auxiliary, 0);
    let mut first_anticipation: Option<String> = None;

    for _ in 0..config.samples {
        let sample = Sample {
            step: rng.gen_range(0..m),
            path: random_path(&mut rng, n, &grid, config.perturbation),
            law_paths: (0..ev.atoms).flat_map(|_| random_path(&mut rng, n, &grid, config.perturbation)).collect(),
            law_actions: (0..ev.atoms).flat_map(|_| spec.action_space.sample(&mut rng)).collect(),
            action: spec.action_space.sample(&mut rng),
        };
        let pair_actions = if spec.law_only { None } else { Some(sample.law_actions.as_slice()) };
        let k = sample.step;

        // (0) non-anticipativity: full path and law versus stopped at t
        let full = ev.eval(&sample, m, pair_actions)?;
        let stopped = ev.eval(&sample, k, pair_actions)?;
        if !full.same(&stopped) {
            anticip.observe(1.0, || ev.describe(&sample, k));
            first_anticipation.get_or_insert_with(|| ev.describe(&sample, k));
        }

        // (i) Lipschitz in (x, law) at fixed (t, a)
        let scale = config.perturbation * 10f64.powf(rng.gen_range(-2.0..0.0));
        let mut other = Sample {
            step: k,
            path: sample.path.clone(),
            law_paths: sample.law_paths.clone(),
            law_actions: sample.law_actions.clone(),
            action: sample.action.clone(),
        };
        let which = rng.gen_range(0..3);
        if which != 1 {
            for v in other.path.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += scale * z;
            }
        }
        if which != 0 {
            for v in other.law_paths.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += scale * z;
            }
        }
        let moved = ev.eval(&other, k, pair_actions)?;
        let dx = {
            let a = PathRef::new(&sample.path, n, len, k);
            let b = PathRef::new(&other.path, n, len, k);
            (0..=k).map(|i| rho(a.at(i), b.stopped(k).at(i))).fold(0.0, f64::max)
        };
        let dlaw = law_distance(&ev, &sample, &other, k, p);
        let dcoef = stopped.joint().zip(moved.joint()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let denom = dx + dlaw;
        if denom > 0.0 {
            lipschitz.observe(dcoef / denom, || format!("{} dx={dx:.3e} dW={dlaw:.3e}", ev.describe(&sample, k)));
        }

        // (ii) growth
        let states = ev.states_at(&sample.law_paths, k);
        let mut law = Law::new(&sample.law_paths, ev.atoms, n, len, k, &states);
        if !spec.law_only {
            law = law.with_actions(&sample.law_actions, j);
        }
        let mom = law.moment(p, &a0);
        let xnorm = PathRef::new(&sample.path, n, len, k).sup_norm();
        let ra = rho(&a0, &sample.action);
        let bnorm = norm(&stopped.b);
        drift_growth.observe(bnorm / (1.0 + xnorm + mom.powf(1.0 / p) + ra), || ev.describe(&sample, k));
        let snorm2 = stopped.s.iter().chain(&stopped.s0).map(|v| v * v).sum::<f64>();
        let dg = snorm2 / (1.0 + xnorm.powf(p_hat) + mom.powf(p_hat / p) + ra.powf(p_hat));
        diffusion_growth.observe(dg, || ev.describe(&sample, k));

        // (iii) reward bounds with the coercive action penalty
        let base = 1.0 + xnorm.powf(p) + mom;
        let up = (stopped.l + k_const.c_l * ra.powf(p_prime)) / base;
        coercive_upper.observe(up, || ev.describe(&sample, k));
        running_lower.observe(-stopped.l / base, || ev.describe(&sample, k));

        let g = ev.terminal(&sample)?;
        let full_path = PathRef::new(&sample.path, n, len, m);
        let state_law_moment = (0..ev.atoms)
            .map(|i| PathRef::new(&sample.law_paths[i * len * n..(i + 1) * len * n], n, len, m).sup_norm().powf(p))
            .sum::<f64>()
            / ev.atoms as f64;
        let gb = g.abs() / (1.0 + full_path.sup_norm().powf(p) + state_law_moment);
        terminal_growth.observe(gb, || ev.describe(&sample, m));

        // law-only mode: sigma0 ignores the action, nothing reads law actions
        if spec.law_only {
            let acts2: Vec<f64> = (0..ev.atoms).flat_map(|_| spec.action_space.sample(&mut rng)).collect();
            let with_a = ev.eval(&sample, k, Some(&sample.law_actions))?;
            let with_b = ev.eval(&sample, k, Some(&acts2))?;
            if !with_a.same(&stopped) || !with_b.same(&stopped) {
                law_only.observe(1.0, || format!("law actions read at {}", ev.describe(&sample, k)));
            }
            let moved_action = Sample { action: spec.action_space.sample(&mut rng), ..other };
            let moved_action = Sample { path: sample.path.clone(), law_paths: sample.law_paths.clone(), ..moved_action };
            let s0_alt = ev.eval(&moved_action, k, None)?;
            if s0_alt.s0.iter().zip(&stopped.s0).any(|(a, b)| a.to_bits() != b.to_bits()) {
                law_only.observe(1.0, || format!("sigma0 depends on the action at {}", ev.describe(&sample, k)));
            }
        }
    }

    let mut checks = vec![
        anticip.finish(),
        lipschitz.finish(),
        drift_growth.finish(),
        diffusion_growth.finish(),
        terminal_growth.finish(),
        coercive_upper.finish(),
        running_lower.finish(),
    ];
    if let Some(w) = first_anticipation {
        checks[0].witness = w;
    }
    if spec.law_only {
        checks.push(law_only.finish());
    }
    Ok(ValidationReport { problem: spec.name.clone(), samples: config.samples, seed, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn box1() -> ActionSpace {
        ActionSpace::interval(-1.0, 1.0, 0.0).unwrap()
    }

    #[test]
    fn rho_examples() {
        assert_eq!(rho(&[0.3, -2.0], &[0.3, -2.0]), 0.0);
        assert_eq!(rho(&[0.0, 0.0], &[3.0, 4.0]), 5.0);
        let a = [1.5, -0.5];
        for lambda in [0.0, 0.5, 2.0, 7.0] {
            let la: Vec<f64> = a.iter().map(|v| v * lambda).collect();
            assert!((rho(&[0.0, 0.0], &la) - lambda * rho(&[0.0, 0.0], &a)).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_invariants() {
        assert!(GrowthConstants::default().check().is_ok());
        let bad = GrowthConstants { p_prime: 2.0, ..Default::default() };
        assert!(bad.check().is_err());
        let bad = GrowthConstants { p_hat: 2.5, ..Default::default() };
        assert!(bad.check().is_err());
        let bad = GrowthConstants { c_l: 0.0, ..Default::default() };
        assert!(bad.check().is_err());
    }

    #[test]
    fn action_space_checks() {
        assert!(ActionSpace::interval(1.0, 0.0, 0.5).is_err());
        assert!(ActionSpace::interval(0.0, 1.0, 2.0).is_err());
        let fs = ActionSpace::new(ActionShape::FiniteSet { points: vec![vec![0.0], vec![1.0]] }, vec![1.0]).unwrap();
        let mut a = [0.7];
        fs.project(&mut a);
        assert_eq!(a, [1.0]);
        let mut b = [3.0];
        box1().project(&mut b);
        assert_eq!(b, [1.0]);
    }

    #[test]
    fn zero_problem_passes() {
        let spec = ProblemSpec::zero("zero", 1, 1, 1, box1(), 1.0);
        let report = validate_spec(&spec, &ValidationConfig { samples: 64, ..Default::default() }, 3).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn reading_the_future_is_caught() {
        let spec = ProblemSpec::zero("future", 1, 1, 0, box1(), 1.0).with_drift(|pt, out| {
            out[0] = pt.path.at(pt.path.len() - 1)[0];
        });
        let report = validate_spec(&spec, &ValidationConfig { samples: 32, ..Default::default() }, 3).unwrap();
        let c = report.check("non_anticipativity").unwrap();
        assert!(!c.passed);
        assert!(c.witness.starts_with("t="), "{}", c.witness);
    }

    #[test]
    fn nan_coefficient_is_invalid_spec() {
        let spec = ProblemSpec::zero("nan", 1, 1, 0, box1(), 1.0).with_running(|_| f64::NAN);
        let err = validate_spec(&spec, &ValidationConfig { samples: 4, ..Default::default() }, 1).unwrap_err();
        assert!(matches!(err, Error::InvalidSpec(_)));
    }

    #[test]
    fn panicking_coefficient_is_invalid_spec() {
        let spec = ProblemSpec::zero("panic", 1, 1, 0, box1(), 1.0).with_drift(|_, _| panic!("boom"));
        let prev = std::panic::take_hook();
        std::panic::set_hook(Box::new(|_| {}));
        let err = validate_spec(&spec, &ValidationConfig { samples: 4, ..Default::default() }, 1);
        std::panic::set_hook(prev);
        assert!(matches!(err, Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn steep_drift_fails_lipschitz() {
        let spec = ProblemSpec::zero("steep", 1, 1, 0, box1(), 1.0).with_drift(|pt, out| out[0] = 50.0 * pt.state[0]);
        let report = validate_spec(&spec, &ValidationConfig { samples: 64, ..Default::default() }, 5).unwrap();
        assert!(!report.check("lipschitz").unwrap().passed);
    }

    #[test]
    fn action_dependent_sigma0_breaks_law_only_mode() {
        let spec = ProblemSpec::zero("s0a", 1, 1, 1, box1(), 1.0).with_sigma0(|pt, out| out[0] = 0.1 * pt.action[0]);
        let report = validate_spec(&spec, &ValidationConfig { samples: 32, ..Default::default() }, 5).unwrap();
        assert!(!report.check("law_only").unwrap().passed);
    }

    #[test]
    fn gaussian_initial_prefix_stable() {
        let law = InitialLaw::Gaussian { mean: vec![0.2], std: vec![1.0] };
        let a = law.sample(4, 11, 2);
        let b = law.sample(9, 11, 2);
        assert_eq!(a[..], b[..4]);
    }

    #[test]
    fn law_mean_and_moment() {
        let paths = [1.0, 1.0, 3.0, 3.0];
        let states = [1.0, 3.0];
        let law = Law::new(&paths, 2, 1, 2, 1, &states);
        assert_eq!(law.mean(), &[2.0]);
        assert_eq!(law.moment(2.0, &[0.0]), 5.0);
        assert_eq!(law.moment(0.0, &[0.0]), 1.0);
        let acts = [0.0, 0.0];
        let pair = Law::new(&paths, 2, 1, 2, 1, &states).with_actions(&acts, 1);
        assert_eq!(pair.moment(0.0, &[0.0]), 2.0);
    }
}
