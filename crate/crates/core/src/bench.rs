//! Linear-quadratic benchmark: problem instance, Riccati oracle, a
//! linear-feedback policy family, and the convergence studies built on them.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{chattering_schedule, discretize_control, ControlPolicy, RelaxedFiniteAtom};
use crate::engine::{chattered_run, simulate_particles, simulate_relaxed};
use crate::measure::{wasserstein_1d, wasserstein_p_capped, EmpiricalMeasure, OccupationMeasure, ASSIGNMENT_CAP};
use crate::model::{rho, ActionSpace, GrowthConstants, InitialLaw, ProblemSpec};
use crate::output::{num, Table};
use crate::timebase::{sample_atom_noise, sample_noise, TimeGrid};
use crate::engine::ParticleEnsemble;
use crate::timebase::NoiseBundle;
use crate::value::{
    estimate_value, estimate_value_richardson, evaluate_cost, mean_and_se, monte_carlo, paired_difference, simulate_batch, PolicyFamily,
    ValueEstimate,
};
use crate::{Error, Result};

/// Scalar LQ problem
/// `dX = (a X + ā m + b_c α) dt + σ dW + σ0 dB`, `m = E[X | B]`, with reward
/// `L = −(q X² + q̄ (X − m)² + r α²)` and `g = −(q_T X_T² + q̄_T (X_T − m_T)²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LQSpec {
    pub a: f64,
    pub a_bar: f64,
    pub b_c: f64,
    pub sigma: f64,
    pub sigma0: f64,
    pub q: f64,
    pub q_bar: f64,
    pub r: f64,
    pub q_t: f64,
    pub q_bar_t: f64,
    pub horizon: f64,
    pub mu0: f64,
    pub v0: f64,
    /// actions live in `[-action_bound, action_bound]`, `a0 = 0`
    pub action_bound: f64,
    /// weight of an extra `−pad |α|³` running term
    pub coercive_pad: f64,
}

impl Default for LQSpec {
    fn default() -> Self {
        Self {
            a: -1.0,
            a_bar: 0.5,
            b_c: 1.0,
            sigma: 0.4,
            sigma0: 0.3,
            q: 1.0,
            q_bar: 0.5,
            r: 0.5,
            q_t: 1.0,
            q_bar_t: 0.0,
            horizon: 1.0,
            mu0: 0.2,
            v0: 1.0,
            action_bound: 10.0,
            coercive_pad: 0.0,
        }
    }
}

impl LQSpec {
    pub fn check(&self) -> Result<()> {
        let all = [
            self.a,
            self.a_bar,
            self.b_c,
            self.sigma,
            self.sigma0,
            self.q,
            self.q_bar,
            self.r,
            self.q_t,
            self.q_bar_t,
            self.horizon,
            self.mu0,
            self.v0,
            self.action_bound,
            self.coercive_pad,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("LQ coefficients must be finite".into()));
        }
        if !(self.r > 0.0) {
            return Err(Error::InvalidSpec(format!("control cost r must be positive, got {}", self.r)));
        }
        if !(self.horizon > 0.0 && self.v0 >= 0.0 && self.action_bound > 0.0 && self.coercive_pad >= 0.0) {
            return Err(Error::InvalidSpec("need T > 0, v0 >= 0, a positive action bound and a non-negative pad".into()));
        }
        Ok(())
    }

    pub fn initial_law(&self) -> InitialLaw {
        InitialLaw::Gaussian { mean: vec![self.mu0], std: vec![self.v0.sqrt()] }
    }

    /// Growth constants the instance satisfies on its bounded action box:
    /// `r α² ≥ (r / A) |α|³` there, which gives the coercive term.
    pub fn constants(&self) -> GrowthConstants {
        let a = self.action_bound;
        let lip = self.a.abs() + self.a_bar.abs() + self.b_c.abs() + self.sigma.abs() + self.sigma0.abs();
        let running = self.q.abs() + 2.0 * self.q_bar.abs() + self.r * a * a + self.coercive_pad * a.powi(3);
        let terminal = self.q_t.abs() + 2.0 * self.q_bar_t.abs();
        let growth = lip + self.sigma * self.sigma + self.sigma0 * self.sigma0;
        let c = 1.0 + 1.25 * [lip, running, terminal, growth].into_iter().fold(1.0, f64::max);
        GrowthConstants { c, p: 2.0, p_prime: 3.0, p_hat: 2.0, c_l: self.r / a + self.coercive_pad }
    }

    pub fn to_problem(&self) -> Result<ProblemSpec> {
        self.check()?;
        let s = *self;
        let space = ActionSpace::interval(-s.action_bound, s.action_bound, 0.0)?;
        Ok(ProblemSpec::zero("lq1d", 1, 1, 1, space, s.horizon)
            .with_drift(move |p, b| b[0] = s.a * p.state[0] + s.a_bar * p.law.mean()[0] + s.b_c * p.action[0])
            .with_sigma(move |_, v| v[0] = s.sigma)
            .with_sigma0(move |_, v| v[0] = s.sigma0)
            .with_running(move |p| {
                let (x, m, a) = (p.state[0], p.law.mean()[0], p.action[0]);
                -(s.q * x * x + s.q_bar * (x - m) * (x - m) + s.r * a * a) - s.coercive_pad * a.abs().powi(3)
            })
            .with_terminal(move |p| {
                let (x, m) = (p.state[0], p.law.mean()[0]);
                -(s.q_t * x * x + s.q_bar_t * (x - m) * (x - m))
            })
            .with_initial(self.initial_law())
            .with_constants(self.constants())
            .with_law_only(true))
    }
}

/// Backward Riccati solution on a fine grid. `p` drives the deviation
/// `X − m`, `p_bar` the conditional mean; `int_*[i]` is `∫_{t_i}^T` of the
/// corresponding noise intensity times the Riccati function.
#[derive(Clone, Debug, PartialEq)]
pub struct RiccatiSolution {
    pub grid: TimeGrid,
    pub p: Vec<f64>,
    pub p_bar: Vec<f64>,
    pub int_p: Vec<f64>,
    pub int_p_bar: Vec<f64>,
    pub b_c: f64,
    pub r: f64,
}

impl RiccatiSolution {
    fn interp(&self, v: &[f64], t: f64) -> f64 {
        let m = self.grid.steps();
        let x = (t / self.grid.dt()).clamp(0.0, m as f64);
        let i = (x.floor() as usize).min(m - 1);
        let w = x - i as f64;
        v[i] * (1.0 - w) + v[i + 1] * w
    }

    /// `(P(t), P̄(t))`
    pub fn riccati_at(&self, t: f64) -> (f64, f64) {
        (self.interp(&self.p, t), self.interp(&self.p_bar, t))
    }

    /// `(k(t), k̄(t))` of the optimal feedback `α = −k (X − m) − k̄ m`.
    pub fn gains(&self, t: f64) -> (f64, f64) {
        let f = self.b_c / self.r;
        (f * self.interp(&self.p, t), f * self.interp(&self.p_bar, t))
    }

    /// Optimal value for an initial law with mean `mu0` and variance `v0`.
    pub fn value(&self, mu0: f64, v0: f64) -> f64 {
        -(self.p[0] * v0 + self.p_bar[0] * mu0 * mu0 + self.int_p[0] + self.int_p_bar[0])
    }

    /// Exact value change when the initial mean moves from `mu0` to `mu0 + eps`.
    pub fn mean_shift_gap(&self, mu0: f64, eps: f64) -> f64 {
        -self.p_bar[0] * ((mu0 + eps) * (mu0 + eps) - mu0 * mu0)
    }

    /// Exact value change when the initial variance grows by `delta`.
    pub fn variance_shift_gap(&self, delta: f64) -> f64 {
        -self.p[0] * delta
    }

    /// The optimal feedback with the within-batch mean standing in for `m`.
    pub fn feedback_policy(self: &Arc<Self>) -> ControlPolicy {
        let sol = Arc::clone(self);
        ControlPolicy::feedback(Vec::new(), move |_, t, x, m, out| {
            let (k, kb) = sol.gains(t);
            out[0] = -k * (x[0] - m[0]) - kb * m[0];
        })
    }
}

/// Resolution of the oracle integrator: at least ten substeps per
/// simulation step and never fewer than 2000 in total.
pub fn oracle_steps(grid: &TimeGrid) -> usize {
    (10 * grid.steps()).max(2000)
}

/// Solves both Riccati equations backward with classical RK4 and returns
/// the solution with the oracle value at `(mu0, v0)`.
pub fn solve_lq_oracle(lq: &LQSpec, mu0: f64, v0: f64, grid: &TimeGrid) -> Result<(RiccatiSolution, f64)> {
    lq.check()?;
    let fine = TimeGrid::new(lq.horizon, oracle_steps(grid))?;
    let m = fine.steps();
    let h = fine.dt();
    let bb = lq.b_c * lq.b_c / lq.r;
    // y = (P, P̄, ∫σ²P, ∫σ0²P̄) as functions of s = T − t
    let rhs = |y: [f64; 4]| -> [f64; 4] {
        [
            2.0 * lq.a * y[0] - bb * y[0] * y[0] + lq.q + lq.q_bar,
            2.0 * (lq.a + lq.a_bar) * y[1] - bb * y[1] * y[1] + lq.q,
            lq.sigma * lq.sigma * y[0],
            lq.sigma0 * lq.sigma0 * y[1],
        ]
    };
    let axpy = |y: [f64; 4], k: [f64; 4], c: f64| -> [f64; 4] { [y[0] + c * k[0], y[1] + c * k[1], y[2] + c * k[2], y[3] + c * k[3]] };
    let mut out = vec![[0.0; 4]; m + 1];
    out[m] = [lq.q_t + lq.q_bar_t, lq.q_t, 0.0, 0.0];
    for i in (0..m).rev() {
        let y = out[i + 1];
        let k1 = rhs(y);
        let k2 = rhs(axpy(y, k1, h / 2.0));
        let k3 = rhs(axpy(y, k2, h / 2.0));
        let k4 = rhs(axpy(y, k3, h));
        let mut next = [0.0; 4];
        for c in 0..4 {
            next[c] = y[c] + h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
        }
        if next.iter().any(|v| !v.is_finite() || v.abs() > 1e12) {
            return Err(Error::OracleBlowup { t: fine.t(i) });
        }
        out[i] = next;
    }
    let sol = RiccatiSolution {
        grid: fine,
        p: out.iter().map(|y| y[0]).collect(),
        p_bar: out.iter().map(|y| y[1]).collect(),
        int_p: out.iter().map(|y| y[2]).collect(),
        int_p_bar: out.iter().map(|y| y[3]).collect(),
        b_c: lq.b_c,
        r: lq.r,
    };
    let v = sol.value(mu0, v0);
    Ok((sol, v))
}

/// `α = −k(t)(X − m) − k̄(t) m` with `k`, `k̄` piecewise linear in time
/// through `knots` equally spaced knots. Parameters are
/// `[k_0 … k_{K−1}, k̄_0 … k̄_{K−1}]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFeedbackFamily {
    pub horizon: f64,
    pub knots: usize,
    pub lower: f64,
    pub upper: f64,
}

impl LinearFeedbackFamily {
    pub fn new(horizon: f64, knots: usize) -> Self {
        Self { horizon, knots: knots.max(1), lower: -1.0, upper: 4.0 }
    }

    fn interp(knots: &[f64], horizon: f64, t: f64) -> f64 {
        if knots.len() == 1 {
            return knots[0];
        }
        let x = (t / horizon).clamp(0.0, 1.0) * (knots.len() - 1) as f64;
        let i = (x.floor() as usize).min(knots.len() - 2);
        let w = x - i as f64;
        knots[i] * (1.0 - w) + knots[i + 1] * w
    }
}

impl PolicyFamily for LinearFeedbackFamily {
    fn dim(&self) -> usize {
        2 * self.knots
    }

    fn bounds(&self) -> Vec<(f64, f64)> {
        vec![(self.lower, self.upper); self.dim()]
    }

    fn anchor(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    fn build(&self, theta: &[f64]) -> ControlPolicy {
        let (kk, horizon) = (self.knots, self.horizon);
        ControlPolicy::feedback(theta.to_vec(), move |th, t, x, m, out| {
            let k = Self::interp(&th[..kk], horizon, t);
            let kb = Self::interp(&th[kk..], horizon, t);
            out[0] = -k * (x[0] - m[0]) - kb * m[0];
        })
    }
}

/// Least-squares slope of `ln y` against `ln x`; `None` with fewer than two
/// usable points.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = xs.iter().zip(ys).filter(|(x, y)| **x > 0.0 && **y > 0.0).map(|(x, y)| (x.ln(), y.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}

/// Number of strict increases in `v`.
pub fn increases(v: &[f64]) -> usize {
    v.windows(2).filter(|w| w[1] > w[0]).count()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// plain Euler on the given grid
    #[default]
    Euler,
    /// `2 J(2m) − J(m)` with shared noise
    Richardson,
}

pub fn estimate_with(
    estimator: Estimator,
    spec: &ProblemSpec,
    policy: &ControlPolicy,
    particles: usize,
    batches: usize,
    grid: &TimeGrid,
    seed: u64,
) -> Result<ValueEstimate> {
    match estimator {
        Estimator::Euler => estimate_value(spec, policy, particles, batches, grid, seed),
        Estimator::Richardson => estimate_value_richardson(spec, policy, particles, batches, grid, seed),
    }
}

/// Discrete martingale built from the Riccati value function,
/// `Σ_k [2 P̄(t_k) m_k σ0 ΔB_k + (1/N) Σ_i 2 P(t_k) (X^i_k − m_k) σ ΔW^i_k]`
/// with `m_k` the batch mean. Every integrand is known at `t_k`, so the sum
/// has mean zero exactly; under the oracle feedback it tracks the
/// fluctuation of the realized cost, so `J + M` has a much smaller variance.
pub fn oracle_control_variate(ens: &ParticleEnsemble, noise: &NoiseBundle, sol: &RiccatiSolution, lq: &LQSpec) -> f64 {
    let grid = *ens.grid();
    let n = ens.particles();
    let mut acc = 0.0;
    for k in 0..grid.steps() {
        let xs = ens.x.slice_at(k);
        let m = xs.iter().sum::<f64>() / n as f64;
        let (p, p_bar) = sol.riccati_at(grid.t(k));
        let mut idio = 0.0;
        for (i, x) in xs.iter().enumerate() {
            idio += (x - m) * noise.dw_at(i, k)[0];
        }
        acc += 2.0 * p_bar * m * lq.sigma0 * noise.db_at(k)[0] + 2.0 * p * lq.sigma * idio / n as f64;
    }
    acc
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitMode {
    /// evaluate the oracle feedback
    Oracle,
    /// optimize the linear-feedback family at every `N`
    Optimize { budget: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LimitOptions {
    pub batches: usize,
    pub mode: LimitMode,
    pub estimator: Estimator,
    /// add [`oracle_control_variate`] to every batch value (oracle mode only)
    pub control_variate: bool,
}

impl Default for LimitOptions {
    fn default() -> Self {
        Self { batches: 64, mode: LimitMode::Oracle, estimator: Estimator::Euler, control_variate: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LimitRow {
    pub particles: usize,
    pub value: f64,
    pub std_error: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LimitStudy {
    pub oracle: f64,
    pub rows: Vec<LimitRow>,
    pub slope: Option<f64>,
    pub se_slope: Option<f64>,
    /// gap at the largest `N` below the gap at the smallest
    pub decreasing: bool,
}

impl LimitStudy {
    pub fn table(&self) -> Table {
        let mut t = Table::new(["N", "value", "std_error", "oracle", "gap"]);
        for r in &self.rows {
            t.push(vec![r.particles.to_string(), num(r.value), num(r.std_error), num(self.oracle), num(r.gap)]);
        }
        t
    }
}

#[allow(clippy::too_many_arguments)]
fn oracle_batch(spec: &ProblemSpec, lq: &LQSpec, sol: &RiccatiSolution, policy: &ControlPolicy, n: usize, grid: &TimeGrid, seed: u64, b: u64, opts: &LimitOptions) -> Result<f64> {
    let x0 = spec.initial.sample(n, seed, b);
    let run = |noise: &NoiseBundle| -> Result<f64> {
        let ens = simulate_particles(spec, policy, &x0, noise)?;
        let cv = if opts.control_variate { oracle_control_variate(&ens, noise, sol, lq) } else { 0.0 };
        Ok(evaluate_cost(&ens, spec) + cv)
    };
    match opts.estimator {
        Estimator::Euler => run(&sample_noise(grid, n, spec.d, spec.ell, seed, b)),
        Estimator::Richardson => {
            let noise = sample_noise(&grid.refine(2)?, n, spec.d, spec.ell, seed, b);
            Ok(2.0 * run(&noise)? - run(&noise.coarsen(2)?)?)
        }
    }
}

/// `|V̂^N − V_oracle|` for each `N`. All `N` share the seed, so smaller
/// populations are prefixes of larger ones.
pub fn limit_study(lq: &LQSpec, ns: &[usize], grid: &TimeGrid, seed: u64, opts: &LimitOptions) -> Result<LimitStudy> {
    if ns.windows(2).any(|w| w[1] <= w[0]) || ns.is_empty() {
        return Err(Error::Config("N list must be non-empty and increasing".into()));
    }
    let spec = lq.to_problem()?;
    let (sol, oracle) = solve_lq_oracle(lq, lq.mu0, lq.v0, grid)?;
    let sol = Arc::new(sol);
    let policy = sol.feedback_policy();
    let rows = ns
        .iter()
        .map(|&n| {
            let est = match opts.mode {
                LimitMode::Oracle => monte_carlo(opts.batches, n, seed, |b| oracle_batch(&spec, lq, &sol, &policy, n, grid, seed, b, opts))?,
                LimitMode::Optimize { budget } => {
                    let fam = LinearFeedbackFamily::new(lq.horizon, 3);
                    crate::value::optimize_value(&spec, &fam, budget, n, opts.batches, grid, seed)?.best
                }
            };
            Ok(LimitRow { particles: n, value: est.mean, std_error: est.std_error, gap: (est.mean - oracle).abs() })
        })
        .collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = rows.iter().map(|r| r.particles as f64).collect();
    let slope = loglog_slope(&xs, &rows.iter().map(|r| r.gap).collect::<Vec<_>>());
    let se_slope = loglog_slope(&xs, &rows.iter().map(|r| r.std_error).collect::<Vec<_>>());
    let decreasing = rows.len() > 1 && rows[rows.len() - 1].gap < rows[0].gap;
    Ok(LimitStudy { oracle, rows, slope, se_slope, decreasing })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceRow {
    pub steps: usize,
    pub relaxed: f64,
    pub relaxed_se: f64,
    pub chattered: f64,
    pub chattered_se: f64,
    /// batch-paired `chattered − relaxed`
    pub gap: f64,
    pub gap_se: f64,
    /// strong control fixed at the weighted mean of the atoms
    pub strong_mean: f64,
    pub strong_mean_se: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceStudy {
    pub atoms: Vec<f64>,
    pub q: Vec<f64>,
    pub rows: Vec<EquivalenceRow>,
    pub decreasing: bool,
}

impl EquivalenceStudy {
    pub fn table(&self) -> Table {
        let mut t = Table::new(["m", "relaxed", "relaxed_se", "chattered", "chattered_se", "gap", "gap_se", "strong_mean", "strong_mean_se"]);
        for r in &self.rows {
            t.push(vec![
                r.steps.to_string(),
                num(r.relaxed),
                num(r.relaxed_se),
                num(r.chattered),
                num(r.chattered_se),
                num(r.gap),
                num(r.gap_se),
                num(r.strong_mean),
                num(r.strong_mean_se),
            ]);
        }
        t
    }
}

/// Values of a constant relaxed control with scalar `atoms` and weights `q`
/// under the relaxed dynamics, its chattered realization and the strong
/// control at the atoms' weighted mean, for every grid size in `steps`.
/// Noise is drawn on the finest grid and summed down, so all grids share it.
#[allow(clippy::too_many_arguments)]
pub fn equivalence_study(
    lq: &LQSpec,
    atoms: &[f64],
    q: &[f64],
    steps: &[usize],
    particles: usize,
    batches: usize,
    seed: u64,
) -> Result<EquivalenceStudy> {
    let spec = lq.to_problem()?;
    let finest = *steps.iter().max().ok_or_else(|| Error::Config("empty step list".into()))?;
    if steps.iter().any(|&m| m == 0 || finest % m != 0) {
        return Err(Error::Config(format!("every step count must divide {finest}")));
    }
    if atoms.len() != q.len() || atoms.is_empty() {
        return Err(Error::ShapeMismatch("one weight per atom".into()));
    }
    let atom_vecs: Vec<Vec<f64>> = atoms.iter().map(|a| vec![*a]).collect();
    let mean_action: f64 = atoms.iter().zip(q).map(|(a, w)| a * w).sum();
    let fine = TimeGrid::new(lq.horizon, finest)?;
    let coarse = TimeGrid::new(lq.horizon, 1)?;
    let occupation = OccupationMeasure::constant(coarse, atom_vecs.clone(), q)?;
    let cols = steps.len();
    // per batch: [relaxed, chattered, strong] per grid
    let per_batch: Vec<Vec<[f64; 3]>> = (0..batches as u64)
        .into_par_iter()
        .map(|b| {
            let x0 = spec.initial.sample(particles, seed, b);
            let noise = sample_atom_noise(&fine, particles, spec.d, spec.ell, atoms.len(), seed, b);
            steps
                .iter()
                .map(|&m| {
                    let grid = TimeGrid::new(lq.horizon, m)?;
                    let noise = noise.coarsen(finest / m)?;
                    let weights = OccupationMeasure::constant(grid, atom_vecs.clone(), q)?;
                    let relaxed = RelaxedFiniteAtom { weights };
                    let schedule = chattering_schedule(&occupation, m)?;
                    let rel = evaluate_cost(&simulate_relaxed(&spec, &relaxed, &x0, &noise)?, &spec);
                    let chat = evaluate_cost(&chattered_run(&spec, &relaxed, &schedule, &x0, &noise)?, &spec);
                    let strong = evaluate_cost(&simulate_particles(&spec, &ControlPolicy::constant(vec![mean_action]), &x0, &noise.common)?, &spec);
                    Ok([rel, chat, strong])
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let rows: Vec<EquivalenceRow> = (0..cols)
        .map(|c| {
            let col = |i: usize| per_batch.iter().map(|r| r[c][i]).collect::<Vec<f64>>();
            let (rel, chat, strong) = (col(0), col(1), col(2));
            let (relaxed, relaxed_se) = mean_and_se(&rel);
            let (chattered, chattered_se) = mean_and_se(&chat);
            let (strong_mean, strong_mean_se) = mean_and_se(&strong);
            let diff: Vec<f64> = chat.iter().zip(&rel).map(|(a, b)| a - b).collect();
            let (gap, gap_se) = mean_and_se(&diff);
            EquivalenceRow { steps: steps[c], relaxed, relaxed_se, chattered, chattered_se, gap, gap_se, strong_mean, strong_mean_se }
        })
        .collect();
    let gaps: Vec<f64> = rows.iter().map(|r| r.gap.abs()).collect();
    let decreasing = gaps.windows(2).all(|w| w[1] < w[0]);
    Ok(EquivalenceStudy { atoms: atoms.to_vec(), q: q.to_vec(), rows, decreasing })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    /// initial mean moves by `ε`
    MeanShift,
    /// initial variance grows by `ε`
    VarianceShift,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContinuityRow {
    pub epsilon: f64,
    /// `W_2` between the Gaussian initial laws
    pub distance: f64,
    /// batch-paired `V̂(ν_ε) − V̂(ν)`
    pub gap: f64,
    pub gap_se: f64,
    pub oracle_gap: f64,
}

impl ContinuityRow {
    /// `|gap − oracle_gap|` in standard errors.
    pub fn z(&self) -> f64 {
        if self.gap_se > 0.0 {
            (self.gap - self.oracle_gap).abs() / self.gap_se
        } else if self.gap == self.oracle_gap {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContinuityStudy {
    pub kind: Perturbation,
    pub base: ValueEstimate,
    pub rows: Vec<ContinuityRow>,
    pub slope: Option<f64>,
}

impl ContinuityStudy {
    pub fn table(&self) -> Table {
        let mut t = Table::new(["epsilon", "distance", "gap", "gap_se", "oracle_gap", "z"]);
        for r in &self.rows {
            t.push(vec![num(r.epsilon), num(r.distance), num(r.gap), num(r.gap_se), num(r.oracle_gap), num(r.z())]);
        }
        t
    }
}

/// Value gaps between perturbed and base initial laws under the oracle
/// feedback (whose gains do not depend on the initial law). Perturbed
/// samples reuse the base normals, so the gaps are batch-paired.
#[allow(clippy::too_many_arguments)]
pub fn continuity_study(
    lq: &LQSpec,
    kind: Perturbation,
    eps: &[f64],
    particles: usize,
    batches: usize,
    grid: &TimeGrid,
    seed: u64,
    estimator: Estimator,
) -> Result<ContinuityStudy> {
    let spec = lq.to_problem()?;
    let (sol, _) = solve_lq_oracle(lq, lq.mu0, lq.v0, grid)?;
    let policy = Arc::new(sol.clone()).feedback_policy();
    let base = estimate_with(estimator, &spec, &policy, particles, batches, grid, seed)?;
    let rows = eps
        .iter()
        .map(|&e| {
            let (law, distance, oracle_gap) = match kind {
                Perturbation::MeanShift => (lq.initial_law().shifted(&[e]), e.abs(), sol.mean_shift_gap(lq.mu0, e)),
                Perturbation::VarianceShift => {
                    if lq.v0 + e < 0.0 {
                        return Err(Error::OutOfRange { value: e, lo: -lq.v0, hi: f64::INFINITY });
                    }
                    let std = (lq.v0 + e).sqrt();
                    (InitialLaw::Gaussian { mean: vec![lq.mu0], std: vec![std] }, (std - lq.v0.sqrt()).abs(), sol.variance_shift_gap(e))
                }
            };
            let perturbed = estimate_with(estimator, &spec.clone().with_initial(law), &policy, particles, batches, grid, seed)?;
            let (gap, gap_se) = paired_difference(&perturbed, &base)?;
            Ok(ContinuityRow { epsilon: e, distance, gap, gap_se, oracle_gap })
        })
        .collect::<Result<Vec<_>>>()?;
    let slope = loglog_slope(&rows.iter().map(|r| r.distance).collect::<Vec<_>>(), &rows.iter().map(|r| r.gap.abs()).collect::<Vec<_>>());
    Ok(ContinuityStudy { kind, base, rows, slope })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChaosRow {
    pub particles: usize,
    pub distance: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChaosStudy {
    pub reference: usize,
    pub order: f64,
    pub rows: Vec<ChaosRow>,
    pub slope: Option<f64>,
}

impl ChaosStudy {
    pub fn table(&self) -> Table {
        let mut t = Table::new(["N", "distance", "std_error", "reference"]);
        for r in &self.rows {
            t.push(vec![r.particles.to_string(), num(r.distance), num(r.std_error), self.reference.to_string()]);
        }
        t
    }
}

fn marginal_distance(a: &[f64], b: &[f64], dim: usize, p: f64, seed: u64) -> Result<f64> {
    if dim == 1 {
        return wasserstein_1d(a, b, p);
    }
    let mu = EmpiricalMeasure::from_points(a.to_vec(), dim)?;
    let nu = EmpiricalMeasure::from_points(b.to_vec(), dim)?;
    // equal sizes: subsample the larger cloud
    let k = mu.count().min(nu.count()).min(ASSIGNMENT_CAP);
    wasserstein_p_capped(&mu.subsample(k, seed), &nu.subsample(k, seed), p, k, seed)
}

/// `E ∫ W_p(φ^N_t, μ̄_t) dt` per `N`, with `μ̄` the empirical of an
/// `n_ref`-particle run driven by the same common noise. The `N`-particle
/// systems are prefixes of the reference population's noise and initial
/// sample.
#[allow(clippy::too_many_arguments)]
pub fn chaos_decay(
    spec: &ProblemSpec,
    policy: &ControlPolicy,
    ns: &[usize],
    n_ref: usize,
    batches: usize,
    grid: &TimeGrid,
    p: f64,
    seed: u64,
) -> Result<ChaosStudy> {
    if ns.iter().any(|&n| n == 0 || n > n_ref) {
        return Err(Error::Config(format!("every N must lie in 1..={n_ref}")));
    }
    let m = grid.steps();
    let dt = grid.dt();
    let per_batch: Vec<Vec<f64>> = (0..batches as u64)
        .into_par_iter()
        .map(|b| {
            let x0 = spec.initial.sample(n_ref, seed, b);
            let noise = sample_noise(grid, n_ref, spec.d, spec.ell, seed, b);
            let reference = simulate_particles(spec, policy, &x0, &noise)?;
            ns.iter()
                .map(|&n| {
                    let ens = simulate_particles(spec, policy, &x0[..n * spec.n], &noise.truncate_particles(n))?;
                    let mut acc = 0.0;
                    for k in 1..=m {
                        acc += marginal_distance(&ens.x.slice_at(k), &reference.x.slice_at(k), spec.n, p, seed ^ k as u64)? * dt;
                    }
                    Ok(acc)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let rows: Vec<ChaosRow> = ns
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            let (distance, std_error) = mean_and_se(&per_batch.iter().map(|r| r[c]).collect::<Vec<_>>());
            ChaosRow { particles: n, distance, std_error }
        })
        .collect();
    let slope = loglog_slope(&rows.iter().map(|r| r.particles as f64).collect::<Vec<_>>(), &rows.iter().map(|r| r.distance).collect::<Vec<_>>());
    Ok(ChaosStudy { reference: n_ref, order: p, rows, slope })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentRow {
    pub particles: usize,
    /// `(1/N) Σ E sup_t |X^i_t|^p`
    pub sup_moment: f64,
    /// `1 + E|X_0|^p + E ∫ ρ(a0, α)^p dt`
    pub budget: f64,
    pub constant: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentStudy {
    pub order: f64,
    pub rows: Vec<MomentRow>,
    /// largest relative deviation of a fitted constant from their mean
    pub spread: f64,
}

impl MomentStudy {
    pub fn table(&self) -> Table {
        let mut t = Table::new(["N", "sup_moment", "budget", "constant"]);
        for r in &self.rows {
            t.push(vec![r.particles.to_string(), num(r.sup_moment), num(r.budget), num(r.constant)]);
        }
        t
    }
}

/// Fits `Ĉ = E sup|X|^p / (1 + E|X_0|^p + control p-moment)` for each `N`.
pub fn moment_study(spec: &ProblemSpec, policy: &ControlPolicy, ns: &[usize], batches: usize, grid: &TimeGrid, p: f64, seed: u64) -> Result<MomentStudy> {
    let a0 = spec.action_space.a0.clone();
    let rows = ns
        .iter()
        .map(|&n| {
            let per_batch: Vec<(f64, f64)> = (0..batches as u64)
                .into_par_iter()
                .map(|b| {
                    let ens = simulate_batch(spec, policy, n, grid, seed, b)?;
                    let m = grid.steps();
                    let mut sup = 0.0;
                    let mut budget = 0.0;
                    for i in 0..n {
                        sup += ens.x.path(i).sup_norm().powf(p);
                        budget += crate::timebase::norm(ens.x.value(i, 0)).powf(p);
                        for k in 0..m {
                            let a = match ens.actions.strong_at(i, k, m) {
                                Some(a) => rho(&a0, a).powf(p),
                                None => {
                                    let (atoms, q) = ens.actions.relaxed_at(k).expect("relaxed record");
                                    atoms.iter().zip(q).map(|(a, w)| w * rho(&a0, a).powf(p)).sum()
                                }
                            };
                            budget += a * grid.dt();
                        }
                    }
                    Ok((sup / n as f64, budget / n as f64))
                })
                .collect::<Result<_>>()?;
            let sup_moment = per_batch.iter().map(|v| v.0).sum::<f64>() / batches as f64;
            let budget = 1.0 + per_batch.iter().map(|v| v.1).sum::<f64>() / batches as f64;
            Ok(MomentRow { particles: n, sup_moment, budget, constant: sup_moment / budget })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = rows.iter().map(|r| r.constant).sum::<f64>() / rows.len().max(1) as f64;
    let spread = rows.iter().map(|r| (r.constant / mean - 1.0).abs()).fold(0.0, f64::max);
    Ok(MomentStudy { order: p, rows, spread })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseRow {
    pub blocks: usize,
    pub value: f64,
    /// batch-paired `|J(α) − J(α^m)|`
    pub gap: f64,
    pub gap_se: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseStudy {
    pub base: ValueEstimate,
    pub rows: Vec<PiecewiseRow>,
    pub increases: usize,
}

impl PiecewiseStudy {
    pub fn table(&self) -> Table {
        let mut t = Table::new(["blocks", "value", "base", "gap", "gap_se"]);
        for r in &self.rows {
            t.push(vec![r.blocks.to_string(), num(r.value), num(self.base.mean), num(r.gap), num(r.gap_se)]);
        }
        t
    }
}

/// A smooth open-loop control used by the piecewise-constant study:
/// `α(t) = cos(3t) (0.5 + 0.3 tanh X_0)`.
pub fn smooth_open_loop() -> ControlPolicy {
    ControlPolicy::open_loop(|info, out| out[0] = (3.0 * info.t).cos() * (0.5 + 0.3 * info.x0[0].tanh()))
}

/// Cost gaps between an open-loop policy and its piecewise-constant
/// discretizations on `blocks` coarse blocks, all simulated on `grid`.
pub fn piecewise_study(
    spec: &ProblemSpec,
    policy: &ControlPolicy,
    blocks: &[usize],
    particles: usize,
    batches: usize,
    grid: &TimeGrid,
    seed: u64,
) -> Result<PiecewiseStudy> {
    let base = estimate_value(spec, policy, particles, batches, grid, seed)?;
    let rows = blocks
        .iter()
        .map(|&nb| {
            let coarse = TimeGrid::new(spec.horizon, nb)?;
            if !coarse.is_coarsening_of(grid) {
                return Err(Error::Config(format!("{nb} blocks do not align with {} steps", grid.steps())));
            }
            let disc = discretize_control(policy, coarse, spec.action_space.a0.clone())?;
            let est = estimate_value(spec, &disc, particles, batches, grid, seed)?;
            let (gap, gap_se) = paired_difference(&base, &est)?;
            Ok(PiecewiseRow { blocks: nb, value: est.mean, gap: gap.abs(), gap_se })
        })
        .collect::<Result<Vec<_>>>()?;
    let inc = increases(&rows.iter().map(|r| r.gap).collect::<Vec<_>>());
    Ok(PiecewiseStudy { base, rows, increases: inc })
}

/// Oracle feedback policy for `lq` on `grid`.
pub fn oracle_policy(lq: &LQSpec, grid: &TimeGrid) -> Result<(ControlPolicy, f64)> {
    let (sol, v) = solve_lq_oracle(lq, lq.mu0, lq.v0, grid)?;
    Ok((Arc::new(sol).feedback_policy(), v))
}

/// Plain Monte Carlo of a constant-control run; used to cross-check the oracle
/// when the control has no effect.
pub fn uncontrolled_value(lq: &LQSpec, particles: usize, batches: usize, grid: &TimeGrid, seed: u64) -> Result<ValueEstimate> {
    let spec = lq.to_problem()?;
    monte_carlo(batches, particles, seed, |b| {
        let ens = simulate_batch(&spec, &ControlPolicy::constant(vec![0.0]), particles, grid, seed, b)?;
        Ok(evaluate_cost(&ens, &spec))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_spec, ValidationConfig};

    fn grid(m: usize) -> TimeGrid {
        TimeGrid::new(1.0, m).unwrap()
    }

    #[test]
    fn zero_cost_gives_zero_oracle() {
        let lq = LQSpec { q: 0.0, q_bar: 0.0, q_t: 0.0, q_bar_t: 0.0, ..LQSpec::default() };
        let (sol, v) = solve_lq_oracle(&lq, 0.3, 2.0, &grid(10)).unwrap();
        assert_eq!(v, 0.0);
        for t in [0.0, 0.37, 1.0] {
            assert_eq!(sol.gains(t), (0.0, 0.0));
        }
    }

    /// Closed form of `−P' = 2aP − βP² + Q`, `P(T) = G`, via the linearizing
    /// substitution; `s = T − t`.
    fn scalar_riccati(a: f64, beta: f64, q: f64, g: f64, s: f64) -> f64 {
        let d = (a * a + beta * q).sqrt();
        let (l1, l2) = (a + d, a - d);
        // P = (l1 c1 e^{l1 s} + l2 c2 e^{l2 s}) / (β (c1 e^{l1 s} + c2 e^{l2 s}))
        // with c1 + c2 = 1, (l1 c1 + l2 c2) = β g
        let c1 = (beta * g - l2) / (l1 - l2);
        let c2 = 1.0 - c1;
        let (e1, e2) = ((l1 * s).exp(), (l2 * s).exp());
        (l1 * c1 * e1 + l2 * c2 * e2) / (beta * (c1 * e1 + c2 * e2))
    }

    #[test]
    fn classical_regulator_reduction() {
        let lq = LQSpec { sigma0: 0.0, a_bar: 0.0, q_bar: 0.0, q_bar_t: 0.0, ..LQSpec::default() };
        let (sol, v) = solve_lq_oracle(&lq, 0.2, 1.0, &grid(10)).unwrap();
        let beta = lq.b_c * lq.b_c / lq.r;
        for (i, t) in sol.grid.points().into_iter().enumerate().step_by(250) {
            let exact = scalar_riccati(lq.a, beta, lq.q, lq.q_t, 1.0 - t);
            assert!((sol.p[i] - exact).abs() < 1e-10, "{} vs {exact}", sol.p[i]);
            assert!((sol.p_bar[i] - exact).abs() < 1e-10);
        }
        // E X0² = v0 + μ0²
        let p0 = scalar_riccati(lq.a, beta, lq.q, lq.q_t, 1.0);
        let n = 20_000;
        let h = 1.0 / n as f64;
        let int: f64 = (0..n).map(|i| scalar_riccati(lq.a, beta, lq.q, lq.q_t, 1.0 - (i as f64 + 0.5) * h) * h).sum();
        let exact_v = -(p0 * 1.04 + lq.sigma * lq.sigma * int);
        assert!((v - exact_v).abs() < 1e-8, "{v} vs {exact_v}");
    }

    #[test]
    fn blowup_is_reported() {
        // negative state cost with large anti-stabilizing drift explodes
        let lq = LQSpec { q: -50.0, q_t: -50.0, a: 3.0, horizon: 3.0, ..LQSpec::default() };
        assert!(matches!(solve_lq_oracle(&lq, 0.0, 1.0, &TimeGrid::new(3.0, 10).unwrap()), Err(Error::OracleBlowup { .. })));
    }

    #[test]
    fn lq_instance_passes_validation() {
        let spec = LQSpec::default().to_problem().unwrap();
        let report = validate_spec(&spec, &ValidationConfig::default(), 3).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn family_contains_constant_gain_policies() {
        let fam = LinearFeedbackFamily::new(1.0, 3);
        assert_eq!(fam.dim(), 6);
        let pol = fam.build(&[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
        let g = grid(4);
        let info = crate::control::Information {
            t: 0.75,
            step: 3,
            grid: &g,
            x0: &[0.0],
            w: crate::timebase::PathRef::new(&[0.0; 5], 1, 5, 3),
            b: crate::timebase::PathRef::new(&[0.0; 5], 1, 5, 3),
            state: Some(crate::control::StateInfo { state: &[1.0], mean: &[0.0] }),
        };
        let mut out = [0.0];
        pol.act(&info, &ActionSpace::interval(-10.0, 10.0, 0.0).unwrap(), &mut out).unwrap();
        assert!((out[0] + 2.5).abs() < 1e-12);
    }

    #[test]
    fn slope_of_a_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-0.5)).collect();
        assert!((loglog_slope(&xs, &ys).unwrap() + 0.5).abs() < 1e-12);
        assert_eq!(loglog_slope(&[1.0], &[1.0]), None);
    }

    #[test]
    fn single_n_limit_study_has_no_slope() {
        let s = limit_study(&LQSpec::default(), &[16], &grid(8), 1, &LimitOptions { batches: 4, ..LimitOptions::default() }).unwrap();
        assert_eq!(s.rows.len(), 1);
        assert_eq!(s.slope, None);
    }

    #[test]
    fn chaos_self_reference_is_zero() {
        let lq = LQSpec::default();
        let spec = lq.to_problem().unwrap();
        let g = grid(8);
        let (pol, _) = oracle_policy(&lq, &g).unwrap();
        let s = chaos_decay(&spec, &pol, &[8, 32], 32, 2, &g, 2.0, 4).unwrap();
        assert_eq!(s.rows[1].distance, 0.0);
        assert!(s.rows[0].distance > 0.0);
    }

    #[test]
    fn zero_perturbation_has_zero_gap() {
        let lq = LQSpec::default();
        let s = continuity_study(&lq, Perturbation::MeanShift, &[0.0], 8, 4, &grid(8), 2, Estimator::Euler).unwrap();
        assert_eq!(s.rows[0].gap, 0.0);
        assert_eq!(s.rows[0].oracle_gap, 0.0);
    }
}
