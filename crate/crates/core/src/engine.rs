//! Explicit Euler particle simulators.
//!
//! All simulators share one step rule: coefficients are evaluated at the
//! grid point `t_k` on the path stopped at `t_k` and on the measure argument
//! built *before* the step (the within-batch empirical, or a frozen flow).

use crate::control::{compress_brownian, ChatteringSchedule, ControlPolicy, Information, RelaxedFiniteAtom, StateInfo};
use crate::measure::EmpiricalMeasure;
use crate::model::{Law, Point, ProblemSpec};
use crate::timebase::{cumulate, AtomNoise, NoiseBundle, PathRef, PathSet, TimeGrid};
use crate::{Error, Result};

/// Blowup threshold relative to `1 + max |X_0|`.
pub const BLOWUP_FACTOR: f64 = 1e6;

#[derive(Clone, Debug, PartialEq)]
pub enum ActionRecord {
    /// `[N × m × j]`
    Strong { values: Vec<f64>, dim: usize },
    /// Per-step weights `[m × k]` over shared atoms, identical for all particles.
    Relaxed { atoms: Vec<Vec<f64>>, weights: Vec<f64> },
}

impl ActionRecord {
    pub fn strong_at(&self, i: usize, k: usize, steps: usize) -> Option<&[f64]> {
        match self {
            ActionRecord::Strong { values, dim } => {
                let off = (i * steps + k) * dim;
                Some(&values[off..off + dim])
            }
            ActionRecord::Relaxed { .. } => None,
        }
    }

    /// Actions of all particles at step `k`, `[N × j]`.
    pub fn strong_slice(&self, k: usize, particles: usize, steps: usize) -> Option<Vec<f64>> {
        match self {
            ActionRecord::Strong { values, dim } => {
                let mut out = Vec::with_capacity(particles * dim);
                for i in 0..particles {
                    let off = (i * steps + k) * dim;
                    out.extend_from_slice(&values[off..off + dim]);
                }
                Some(out)
            }
            ActionRecord::Relaxed { .. } => None,
        }
    }

    pub fn relaxed_at(&self, k: usize) -> Option<(&[Vec<f64>], &[f64])> {
        match self {
            ActionRecord::Relaxed { atoms, weights } => Some((atoms, &weights[k * atoms.len()..(k + 1) * atoms.len()])),
            ActionRecord::Strong { .. } => None,
        }
    }
}

/// Output of a simulator. `y` is `x` minus the accumulated `σ0 ΔB` terms.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleEnsemble {
    pub x: PathSet,
    pub y: PathSet,
    pub actions: ActionRecord,
    /// whether the measure argument carried actions
    pub pair_law: bool,
    pub seed: u64,
    pub batch: u64,
}

impl ParticleEnsemble {
    pub fn particles(&self) -> usize {
        self.x.count()
    }

    pub fn grid(&self) -> &TimeGrid {
        self.x.grid()
    }

    pub fn terminal_states(&self) -> Vec<f64> {
        self.x.slice_at(self.grid().steps())
    }

    /// Empirical state measure on paths stopped at step `k`.
    pub fn empirical_at(&self, k: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::from_paths(self.x.values().to_vec(), self.x.count(), self.x.dim(), *self.grid(), k)
            .expect("ensemble shapes are consistent")
    }

    /// The per-step measure arguments this run used.
    pub fn flow(&self) -> MeasureFlow {
        let actions = match (&self.actions, self.pair_law) {
            (ActionRecord::Strong { values, dim }, true) => Some((values.clone(), *dim)),
            _ => None,
        };
        MeasureFlow { paths: self.x.clone(), actions }
    }
}

/// Frozen per-step measure arguments: the empirical of `paths` stopped at
/// each step, paired with the step's actions when present.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasureFlow {
    pub paths: PathSet,
    /// `[count × m × j]` and `j`
    pub actions: Option<(Vec<f64>, usize)>,
}

impl MeasureFlow {
    pub fn grid(&self) -> &TimeGrid {
        self.paths.grid()
    }

    pub fn states_at(&self, k: usize) -> Vec<f64> {
        self.paths.slice_at(k)
    }

    fn actions_at(&self, k: usize) -> Option<(Vec<f64>, usize)> {
        let steps = self.grid().steps();
        self.actions.as_ref().map(|(v, j)| {
            let mut out = Vec::with_capacity(self.paths.count() * j);
            for i in 0..self.paths.count() {
                let off = (i * steps + k) * j;
                out.extend_from_slice(&v[off..off + j]);
            }
            (out, *j)
        })
    }
}

fn check_shapes(spec: &ProblemSpec, x0: &[f64], particles: usize, d: usize, ell: usize) -> Result<()> {
    spec.check()?;
    if x0.len() != particles * spec.n {
        return Err(Error::ShapeMismatch(format!("{} initial values for {particles} particles of dimension {}", x0.len(), spec.n)));
    }
    if d != spec.d || ell != spec.ell {
        return Err(Error::ShapeMismatch(format!("noise dims ({d}, {ell}) but problem expects ({}, {})", spec.d, spec.ell)));
    }
    if particles == 0 {
        return Err(Error::ShapeMismatch("no particles".into()));
    }
    Ok(())
}

fn check_grid(spec: &ProblemSpec, grid: &TimeGrid) -> Result<()> {
    if (grid.horizon() - spec.horizon).abs() > 1e-12 * spec.horizon {
        return Err(Error::ShapeMismatch(format!("grid horizon {} differs from problem horizon {}", grid.horizon(), spec.horizon)));
    }
    Ok(())
}

struct Buffers {
    b: Vec<f64>,
    s: Vec<f64>,
    s0: Vec<f64>,
}

impl Buffers {
    fn new(spec: &ProblemSpec) -> Self {
        Self { b: vec![0.0; spec.n], s: vec![0.0; spec.n * spec.d], s0: vec![0.0; spec.n * spec.ell] }
    }
}

/// `incr_c += b_c * weight_dt + Σ_r s[c, r] * (scale * dw_r)`.
#[inline]
fn accumulate(incr: &mut [f64], b: &[f64], s: &[f64], dw: &[f64], weight_dt: f64, scale: f64) {
    let d = dw.len();
    for (c, acc) in incr.iter_mut().enumerate() {
        let mut v = b[c] * weight_dt;
        for r in 0..d {
            v += s[c * d + r] * (scale * dw[r]);
        }
        *acc += v;
    }
}

#[inline]
fn common_term(s0: &[f64], db: &[f64], out: &mut [f64]) {
    let ell = db.len();
    for (c, o) in out.iter_mut().enumerate() {
        let mut v = 0.0;
        for r in 0..ell {
            v += s0[c * ell + r] * db[r];
        }
        *o = v;
    }
}

fn blowup_limit(x0: &[f64]) -> f64 {
    BLOWUP_FACTOR * (1.0 + x0.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

enum LawSource<'f> {
    Own,
    Flow(&'f MeasureFlow),
}

fn initial_paths(spec: &ProblemSpec, x0: &[f64], grid: TimeGrid) -> (PathSet, PathSet) {
    let particles = x0.len() / spec.n;
    let mut x = PathSet::zeros(particles, spec.n, grid);
    for i in 0..particles {
        x.value_mut(i, 0).copy_from_slice(&x0[i * spec.n..(i + 1) * spec.n]);
    }
    (x.clone(), x)
}

fn run_strong(spec: &ProblemSpec, policy: &ControlPolicy, x0: &[f64], noise: &NoiseBundle, source: LawSource<'_>) -> Result<ParticleEnsemble> {
    let particles = noise.particles;
    check_shapes(spec, x0, particles, noise.d, noise.ell)?;
    check_grid(spec, &noise.grid)?;
    if policy.is_relaxed() {
        return Err(Error::UnsupportedMode("relaxed policies run through simulate_relaxed".into()));
    }
    let grid = noise.grid;
    if let LawSource::Flow(flow) = &source {
        if flow.grid() != &grid {
            return Err(Error::ShapeMismatch("measure flow lives on a different grid".into()));
        }
    }
    let (n, d, j, m) = (spec.n, spec.d, spec.action_space.dim(), grid.steps());
    let len = m + 1;
    let limit = blowup_limit(x0);
    let (mut x, mut y) = initial_paths(spec, x0, grid);
    let wpaths: Vec<Vec<f64>> = (0..particles).map(|i| noise.brownian_path(i)).collect();
    let bpath = noise.common_path();
    let mut actions = vec![0.0; particles * m * j];
    let mut step_actions = vec![0.0; particles * j];
    let mut next_x = vec![0.0; particles * n];
    let mut next_y = vec![0.0; particles * n];
    let mut buf = Buffers::new(spec);
    let mut common = vec![0.0; n];
    let mut incr = vec![0.0; n];
    let pair = !spec.law_only;

    for k in 0..m {
        let t = grid.t(k);
        let own_states;
        let flow_states;
        let (law_paths, law_count, states): (&[f64], usize, &[f64]) = match &source {
            LawSource::Own => {
                own_states = x.slice_at(k);
                (x.values(), particles, &own_states)
            }
            LawSource::Flow(flow) => {
                flow_states = flow.states_at(k);
                (flow.paths.values(), flow.paths.count(), &flow_states)
            }
        };
        let state_law = Law::new(law_paths, law_count, n, len, k, states);
        let mean = state_law.mean().to_vec();

        for i in 0..particles {
            let info = Information {
                t,
                step: k,
                grid: &grid,
                x0: &x0[i * n..(i + 1) * n],
                w: PathRef::new(&wpaths[i], d, len, k),
                b: PathRef::new(&bpath, noise.ell, len, k),
                state: Some(StateInfo { state: x.value(i, k), mean: &mean }),
            };
            policy.act(&info, &spec.action_space, &mut step_actions[i * j..(i + 1) * j])?;
            actions[(i * m + k) * j..(i * m + k + 1) * j].copy_from_slice(&step_actions[i * j..(i + 1) * j]);
        }

        let flow_actions = match &source {
            LawSource::Flow(flow) if pair => flow.actions_at(k),
            _ => None,
        };
        let law = match (&source, pair) {
            (_, false) => state_law,
            (LawSource::Own, true) => Law::new(law_paths, law_count, n, len, k, states).with_actions(&step_actions, j),
            (LawSource::Flow(_), true) => match &flow_actions {
                Some((a, fj)) => Law::new(law_paths, law_count, n, len, k, states).with_actions(a, *fj),
                None => {
                    return Err(Error::UnsupportedMode("pair-law problem needs a flow with actions".into()));
                }
            },
        };

        for i in 0..particles {
            let xi = x.value(i, k);
            let point = Point {
                t,
                step: k,
                state: xi,
                path: x.path(i).stopped(k),
                law: &law,
                action: &step_actions[i * j..(i + 1) * j],
            };
            (spec.drift)(&point, &mut buf.b);
            (spec.sigma)(&point, &mut buf.s);
            (spec.sigma0)(&point, &mut buf.s0);
            incr.fill(0.0);
            accumulate(&mut incr, &buf.b, &buf.s, noise.dw_at(i, k), grid.dt(), 1.0);
            common_term(&buf.s0, noise.db_at(k), &mut common);
            let yi = y.value(i, k);
            for c in 0..n {
                let v = xi[c] + (incr[c] + common[c]);
                if !v.is_finite() || v.abs() > limit {
                    return Err(Error::NumericalBlowup { step: k + 1 });
                }
                next_x[i * n + c] = v;
                next_y[i * n + c] = yi[c] + incr[c];
            }
        }
        for i in 0..particles {
            x.value_mut(i, k + 1).copy_from_slice(&next_x[i * n..(i + 1) * n]);
            y.value_mut(i, k + 1).copy_from_slice(&next_y[i * n..(i + 1) * n]);
        }
    }
    Ok(ParticleEnsemble {
        x,
        y,
        actions: ActionRecord::Strong { values: actions, dim: j },
        pair_law: pair,
        seed: noise.seed,
        batch: noise.batch,
    })
}

/// The N-particle system: the measure argument at step `k` is the
/// within-batch empirical (pair) measure, and every particle sees the same
/// common increment.
pub fn simulate_particles(spec: &ProblemSpec, policy: &ControlPolicy, x0: &[f64], noise: &NoiseBundle) -> Result<ParticleEnsemble> {
    run_strong(spec, policy, x0, noise, LawSource::Own)
}

/// Same stepping with the measure argument taken from a frozen flow.
pub fn simulate_decoupled(spec: &ProblemSpec, policy: &ControlPolicy, flow: &MeasureFlow, x0: &[f64], noise: &NoiseBundle) -> Result<ParticleEnsemble> {
    run_strong(spec, policy, x0, noise, LawSource::Flow(flow))
}

fn check_relaxed(spec: &ProblemSpec, relaxed: &RelaxedFiniteAtom) -> Result<()> {
    if !spec.law_only {
        return Err(Error::UnsupportedMode("relaxed dynamics need the law-only mode (state law, uncontrolled sigma0)".into()));
    }
    if let Some(a) = relaxed.atoms().iter().find(|a| !spec.action_space.contains(a)) {
        return Err(Error::InvalidSpec(format!("relaxed atom {a:?} outside the action space")));
    }
    Ok(())
}

/// Finite-atom relaxed system: atom `i` contributes `b(a_i) q_i Δt` and
/// `σ(a_i) √q_i ΔZ^i` with its own Brownian stream.
pub fn simulate_relaxed(spec: &ProblemSpec, relaxed: &RelaxedFiniteAtom, x0: &[f64], noise: &AtomNoise) -> Result<ParticleEnsemble> {
    check_relaxed(spec, relaxed)?;
    let common_noise = &noise.common;
    let particles = common_noise.particles;
    check_shapes(spec, x0, particles, common_noise.d, common_noise.ell)?;
    let grid = common_noise.grid;
    check_grid(spec, &grid)?;
    let atoms = relaxed.atoms();
    let k_atoms = atoms.len();
    if noise.atoms() < k_atoms {
        return Err(Error::InsufficientNoise { needed: k_atoms, available: noise.atoms() });
    }
    let (n, m) = (spec.n, grid.steps());
    let len = m + 1;
    let limit = blowup_limit(x0);
    let (mut x, mut y) = initial_paths(spec, x0, grid);
    let mut weights = Vec::with_capacity(m * k_atoms);
    let mut next_x = vec![0.0; particles * n];
    let mut next_y = vec![0.0; particles * n];
    let mut buf = Buffers::new(spec);
    let mut common = vec![0.0; n];
    let mut incr = vec![0.0; n];

    for k in 0..m {
        let t = grid.t(k);
        let q = relaxed.weights.weights_at_time(t)?.to_vec();
        weights.extend_from_slice(&q);
        let states = x.slice_at(k);
        let law = Law::new(x.values(), particles, n, len, k, &states);
        for i in 0..particles {
            let xi = x.value(i, k);
            incr.fill(0.0);
            for (a, atom) in atoms.iter().enumerate() {
                if q[a] <= 0.0 {
                    continue;
                }
                let point = Point { t, step: k, state: xi, path: x.path(i).stopped(k), law: &law, action: atom };
                (spec.drift)(&point, &mut buf.b);
                (spec.sigma)(&point, &mut buf.s);
                accumulate(&mut incr, &buf.b, &buf.s, noise.dz_at(a, i, k), q[a] * grid.dt(), q[a].sqrt());
            }
            // sigma0 ignores the action in this mode
            let point = Point { t, step: k, state: xi, path: x.path(i).stopped(k), law: &law, action: &spec.action_space.a0 };
            (spec.sigma0)(&point, &mut buf.s0);
            common_term(&buf.s0, common_noise.db_at(k), &mut common);
            let yi = y.value(i, k);
            for c in 0..n {
                let v = xi[c] + (incr[c] + common[c]);
                if !v.is_finite() || v.abs() > limit {
                    return Err(Error::NumericalBlowup { step: k + 1 });
                }
                next_x[i * n + c] = v;
                next_y[i * n + c] = yi[c] + incr[c];
            }
        }
        for i in 0..particles {
            x.value_mut(i, k + 1).copy_from_slice(&next_x[i * n..(i + 1) * n]);
            y.value_mut(i, k + 1).copy_from_slice(&next_y[i * n..(i + 1) * n]);
        }
    }
    Ok(ParticleEnsemble {
        x,
        y,
        actions: ActionRecord::Relaxed { atoms: atoms.to_vec(), weights },
        pair_law: false,
        seed: common_noise.seed,
        batch: common_noise.batch,
    })
}

/// Ordinary control switching between atoms along `schedule`, driven by the
/// compressed Brownian motions. The first fine step is a lag window: only the
/// common noise acts and the recorded action is `a0`. On fine step `k >= 1`
/// the segments and compressed increments of step `k - 1` are replayed, so
/// the driver is adapted.
pub fn chattered_run(
    spec: &ProblemSpec,
    relaxed: &RelaxedFiniteAtom,
    schedule: &ChatteringSchedule,
    x0: &[f64],
    noise: &AtomNoise,
) -> Result<ParticleEnsemble> {
    check_relaxed(spec, relaxed)?;
    let common_noise = &noise.common;
    let particles = common_noise.particles;
    check_shapes(spec, x0, particles, common_noise.d, common_noise.ell)?;
    let grid = *schedule.fine_grid();
    check_grid(spec, &grid)?;
    if common_noise.grid != grid {
        return Err(Error::ShapeMismatch("noise must live on the schedule's fine grid".into()));
    }
    if schedule.atom_count() != relaxed.atoms().len() {
        return Err(Error::ShapeMismatch("schedule and relaxed control disagree on the atom count".into()));
    }
    let drivers = compress_brownian(&noise.dz, particles, spec.d, schedule)?;

    let mut atoms = relaxed.atoms().to_vec();
    let a0 = spec.action_space.a0.clone();
    let a0_index = match atoms.iter().position(|a| *a == a0) {
        Some(i) => i,
        None => {
            atoms.push(a0.clone());
            atoms.len() - 1
        }
    };
    let k_rec = atoms.len();
    let (n, m) = (spec.n, grid.steps());
    let len = m + 1;
    let limit = blowup_limit(x0);
    let (mut x, mut y) = initial_paths(spec, x0, grid);
    let mut weights = vec![0.0; m * k_rec];
    let mut buf = Buffers::new(spec);
    let mut cur = vec![0.0; particles * n];
    let mut next = vec![0.0; particles * n];
    let mut commons = vec![0.0; particles * n];
    let mut y_incr = vec![0.0; particles * n];

    for k in 0..m {
        let t = grid.t(k);
        let states = x.slice_at(k);
        cur.copy_from_slice(&states);
        y_incr.fill(0.0);
        // sigma0 at the start of the fine step, applied once
        {
            let law = Law::new(x.values(), particles, n, len, k, &states);
            for i in 0..particles {
                let point = Point { t, step: k, state: x.value(i, k), path: x.path(i).stopped(k), law: &law, action: &a0 };
                (spec.sigma0)(&point, &mut buf.s0);
                common_term(&buf.s0, common_noise.db_at(k), &mut commons[i * n..(i + 1) * n]);
            }
        }
        if k == 0 {
            weights[a0_index] = 1.0;
        } else {
            let src = k - 1;
            let shift = t - grid.t(src);
            let w = schedule.weights_at(src);
            weights[k * k_rec..k * k_rec + w.len()].copy_from_slice(w);
            for seg in schedule.step_segments(src) {
                let t_sub = seg.start + shift;
                let law = Law::new(x.values(), particles, n, len, k, &cur);
                let atom = &atoms[seg.atom];
                for i in 0..particles {
                    let point = Point { t: t_sub, step: k, state: &cur[i * n..(i + 1) * n], path: x.path(i).stopped(k), law: &law, action: atom };
                    (spec.drift)(&point, &mut buf.b);
                    (spec.sigma)(&point, &mut buf.s);
                    let mut inc = vec![0.0; n];
                    accumulate(&mut inc, &buf.b, &buf.s, drivers.at(seg.atom, i, src), seg.len(), 1.0);
                    for c in 0..n {
                        next[i * n + c] = cur[i * n + c] + inc[c];
                        y_incr[i * n + c] += inc[c];
                    }
                }
                std::mem::swap(&mut cur, &mut next);
            }
        }
        for i in 0..particles {
            let yi = y.value(i, k).to_vec();
            for c in 0..n {
                let v = cur[i * n + c] + commons[i * n + c];
                if !v.is_finite() || v.abs() > limit {
                    return Err(Error::NumericalBlowup { step: k + 1 });
                }
                next[i * n + c] = v;
            }
            x.value_mut(i, k + 1).copy_from_slice(&next[i * n..(i + 1) * n]);
            let ynext: Vec<f64> = (0..n).map(|c| yi[c] + y_incr[i * n + c]).collect();
            y.value_mut(i, k + 1).copy_from_slice(&ynext);
        }
    }
    Ok(ParticleEnsemble {
        x,
        y,
        actions: ActionRecord::Relaxed { atoms, weights },
        pair_law: false,
        seed: common_noise.seed,
        batch: common_noise.batch,
    })
}

/// Path of the accumulated common-noise term `Σ σ0 ΔB` for each particle,
/// reconstructed as `x - y`.
pub fn common_component(ens: &ParticleEnsemble) -> Vec<f64> {
    ens.x.values().iter().zip(ens.y.values()).map(|(a, b)| a - b).collect()
}

/// Cumulative path from increments; re-exported for studies and tests.
pub fn cumulative(incr: &[f64], dim: usize) -> Vec<f64> {
    cumulate(incr, dim)
}
