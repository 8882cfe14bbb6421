//! Control policies and the constructive transformations between them:
//! piecewise-constant discretization of open-loop controls, action-space
//! truncation and partition, chattering schedules and Brownian compression.

use std::fmt;
use std::sync::Arc;

use crate::measure::OccupationMeasure;
use crate::model::{rho, ActionShape, ActionSpace};
use crate::output::num;
use crate::timebase::{HorizonRule, PathRef, TimeGrid};
use crate::{Error, Result};

/// Current state and the within-batch conditional-mean estimate.
#[derive(Clone, Copy, Debug)]
pub struct StateInfo<'a> {
    pub state: &'a [f64],
    pub mean: &'a [f64],
}

/// Information available to a policy at time `t` (grid index `step` of the
/// simulation grid). `w` and `b` are the idiosyncratic and common Brownian
/// paths on that grid and must be stopped at or before `step`.
#[derive(Clone, Copy, Debug)]
pub struct Information<'a> {
    pub t: f64,
    pub step: usize,
    pub grid: &'a TimeGrid,
    pub x0: &'a [f64],
    pub w: PathRef<'a>,
    pub b: PathRef<'a>,
    pub state: Option<StateInfo<'a>>,
}

pub type OpenLoopFn = Arc<dyn Fn(&Information<'_>, &mut [f64]) + Send + Sync>;
/// `(block, information at the block's left endpoint, out)`
pub type SelectorFn = Arc<dyn Fn(usize, &Information<'_>, &mut [f64]) + Send + Sync>;
/// `(theta, t, state, conditional mean, out)`
pub type FeedbackFn = Arc<dyn Fn(&[f64], f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub struct PiecewiseConstant {
    pub grid: TimeGrid,
    pub a0: Vec<f64>,
    pub selector: SelectorFn,
}

impl PiecewiseConstant {
    /// Length of the initial block on which `a0` is emitted.
    pub fn delay(&self) -> f64 {
        self.grid.dt()
    }
}

#[derive(Clone)]
pub struct Feedback {
    pub theta: Vec<f64>,
    pub basis: FeedbackFn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedFiniteAtom {
    pub weights: OccupationMeasure,
}

impl RelaxedFiniteAtom {
    pub fn atoms(&self) -> &[Vec<f64>] {
        self.weights.atoms()
    }
}

#[derive(Clone)]
pub enum ControlPolicy {
    OpenLoop(OpenLoopFn),
    PiecewiseConstant(PiecewiseConstant),
    Feedback(Feedback),
    RelaxedFiniteAtom(RelaxedFiniteAtom),
}

impl fmt::Debug for ControlPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlPolicy::OpenLoop(_) => f.write_str("OpenLoop"),
            ControlPolicy::PiecewiseConstant(p) => write!(f, "PiecewiseConstant({} blocks)", p.grid.steps()),
            ControlPolicy::Feedback(fb) => write!(f, "Feedback({:?})", fb.theta),
            ControlPolicy::RelaxedFiniteAtom(r) => write!(f, "RelaxedFiniteAtom({} atoms)", r.atoms().len()),
        }
    }
}

impl ControlPolicy {
    pub fn constant(a: Vec<f64>) -> Self {
        ControlPolicy::OpenLoop(Arc::new(move |_, out: &mut [f64]| out.copy_from_slice(&a)))
    }

    pub fn open_loop(f: impl Fn(&Information<'_>, &mut [f64]) + Send + Sync + 'static) -> Self {
        ControlPolicy::OpenLoop(Arc::new(f))
    }

    pub fn feedback(theta: Vec<f64>, basis: impl Fn(&[f64], f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        ControlPolicy::Feedback(Feedback { theta, basis: Arc::new(basis) })
    }

    pub fn is_relaxed(&self) -> bool {
        matches!(self, ControlPolicy::RelaxedFiniteAtom(_))
    }

    /// Whether evaluation reads the current state (so the engine must supply it).
    pub fn needs_state(&self) -> bool {
        matches!(self, ControlPolicy::Feedback(_))
    }

    /// Strong action at `info`, projected into `space`. Relaxed policies are
    /// rejected here; use [`evaluate_policy`].
    pub fn act(&self, info: &Information<'_>, space: &ActionSpace, out: &mut [f64]) -> Result<()> {
        check_information(info)?;
        match self {
            ControlPolicy::OpenLoop(phi) => phi(info, out),
            ControlPolicy::PiecewiseConstant(pc) => {
                let block = pc.grid.floor_index(info.t, HorizonRule::ControlIndex)?;
                if block == 0 {
                    out.copy_from_slice(&pc.a0);
                } else {
                    let tb = pc.grid.t(block);
                    let kb = info.grid.floor_index(tb, HorizonRule::Inclusive)?.min(info.step);
                    let at_block = Information { t: tb, step: kb, w: info.w.stopped(kb), b: info.b.stopped(kb), state: None, ..*info };
                    (pc.selector)(block, &at_block, out);
                }
            }
            ControlPolicy::Feedback(fb) => {
                let s = info.state.ok_or_else(|| Error::UnsupportedMode("feedback policy evaluated without state".into()))?;
                (fb.basis)(&fb.theta, info.t, s.state, s.mean, out);
            }
            ControlPolicy::RelaxedFiniteAtom(_) => {
                return Err(Error::UnsupportedMode("relaxed policy has no strong action".into()));
            }
        }
        space.project(out);
        Ok(())
    }
}

fn check_information(info: &Information<'_>) -> Result<()> {
    for prefix in [info.w.stop(), info.b.stop()] {
        if prefix > info.step {
            return Err(Error::Anticipation { prefix, step: info.step });
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub enum PolicyOutput {
    Action(Vec<f64>),
    /// probability vector over the relaxed policy's atoms
    Weights(Vec<f64>),
}

pub fn evaluate_policy(policy: &ControlPolicy, info: &Information<'_>, space: &ActionSpace) -> Result<PolicyOutput> {
    match policy {
        ControlPolicy::RelaxedFiniteAtom(r) => {
            check_information(info)?;
            Ok(PolicyOutput::Weights(r.weights.weights_at_time(info.t)?.to_vec()))
        }
        _ => {
            let mut out = vec![0.0; space.dim()];
            policy.act(info, space, &mut out)?;
            Ok(PolicyOutput::Action(out))
        }
    }
}

/// Samples an open-loop policy at the left endpoints of `coarse`, with the
/// information stopped there; the first block emits `a0`.
pub fn discretize_control(policy: &ControlPolicy, coarse: TimeGrid, a0: Vec<f64>) -> Result<ControlPolicy> {
    let phi = match policy {
        ControlPolicy::OpenLoop(phi) => phi.clone(),
        other => return Err(Error::UnsupportedMode(format!("only open-loop policies are discretized, got {other:?}"))),
    };
    Ok(ControlPolicy::PiecewiseConstant(PiecewiseConstant {
        grid: coarse,
        a0,
        selector: Arc::new(move |_, info, out| phi(info, out)),
    }))
}

/// Projection onto a truncated action space.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionProjection {
    pub target: ActionSpace,
}

impl ActionProjection {
    pub fn apply(&self, a: &[f64]) -> Vec<f64> {
        let mut out = a.to_vec();
        self.target.project(&mut out);
        out
    }
}

/// `A_e = A ∩ [-e, e]^j` and the projection onto it (clamp for boxes,
/// nearest point for finite sets). `a0` is projected when it falls outside.
pub fn truncate_actions(space: &ActionSpace, e: f64) -> Result<(ActionSpace, ActionProjection)> {
    if !(e > 0.0) {
        return Err(Error::OutOfRange { value: e, lo: 0.0, hi: f64::INFINITY });
    }
    let shape = match &space.shape {
        ActionShape::Box { lower, upper } => {
            let lower: Vec<f64> = lower.iter().map(|l| l.max(-e)).collect();
            let upper: Vec<f64> = upper.iter().map(|u| u.min(e)).collect();
            if lower.iter().zip(&upper).any(|(l, u)| l > u) {
                return Err(Error::EmptyTruncation(e));
            }
            ActionShape::Box { lower, upper }
        }
        ActionShape::FiniteSet { points } => {
            let kept: Vec<Vec<f64>> = points.iter().filter(|p| p.iter().all(|v| v.abs() <= e)).cloned().collect();
            if kept.is_empty() {
                return Err(Error::EmptyTruncation(e));
            }
            ActionShape::FiniteSet { points: kept }
        }
    };
    let mut truncated = ActionSpace { shape, a0: space.a0.clone() };
    let mut a0 = space.a0.clone();
    truncated.project(&mut a0);
    truncated.a0 = a0;
    truncated.check()?;
    Ok((truncated.clone(), ActionProjection { target: truncated }))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    /// half-open box `[lower, upper)`, closed on the space's upper faces
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Points(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionPartition {
    pub cells: Vec<Cell>,
    pub representatives: Vec<Vec<f64>>,
    /// every action lies within `delta` of its cell's representative
    pub delta: f64,
}

impl ActionPartition {
    pub fn cell_of(&self, a: &[f64]) -> Option<usize> {
        self.cells.iter().position(|c| match c {
            Cell::Points(ps) => ps.iter().any(|p| p.as_slice() == a),
            Cell::Box { .. } => false,
        })
        .or_else(|| {
            // boxes: nearest representative is the containing cell for a uniform split
            if matches!(self.cells.first(), Some(Cell::Box { .. })) {
                self.representatives
                    .iter()
                    .enumerate()
                    .min_by(|(_, p), (_, q)| rho(p, a).total_cmp(&rho(q, a)))
                    .map(|(i, _)| i)
            } else {
                None
            }
        })
    }
}

/// Splits a bounded action space into at most `e` cells with a
/// representative per cell. Boxes are split uniformly (`c^j <= e` cells,
/// representatives at centres, `delta` = cell diameter); finite sets are
/// clustered around farthest-point centres (`delta` = largest distance to a
/// representative).
pub fn partition_actions(space: &ActionSpace, e: usize) -> Result<ActionPartition> {
    if !space.is_bounded() {
        return Err(Error::InvalidSpec("partition needs a bounded action space".into()));
    }
    let e = e.max(1);
    match &space.shape {
        ActionShape::Box { lower, upper } => {
            let j = lower.len();
            let mut c = 1usize;
            while (c + 1).checked_pow(j as u32).is_some_and(|v| v <= e) {
                c += 1;
            }
            let widths: Vec<f64> = lower.iter().zip(upper).map(|(l, u)| (u - l) / c as f64).collect();
            let mut cells = Vec::new();
            let mut reps = Vec::new();
            let total = c.pow(j as u32);
            for idx in 0..total {
                let mut rem = idx;
                let mut lo = vec![0.0; j];
                let mut hi = vec![0.0; j];
                for dim in 0..j {
                    let k = rem % c;
                    rem /= c;
                    lo[dim] = lower[dim] + widths[dim] * k as f64;
                    hi[dim] = if k + 1 == c { upper[dim] } else { lower[dim] + widths[dim] * (k + 1) as f64 };
                }
                reps.push(lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect());
                cells.push(Cell::Box { lower: lo, upper: hi });
            }
            let delta = widths.iter().map(|w| w * w).sum::<f64>().sqrt();
            Ok(ActionPartition { cells, representatives: reps, delta })
        }
        ActionShape::FiniteSet { points } => {
            let mut centres = vec![0usize];
            let mut dist: Vec<f64> = points.iter().map(|p| rho(p, &points[0])).collect();
            while centres.len() < e.min(points.len()) {
                let (far, &d) = dist.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).expect("non-empty");
                if d == 0.0 {
                    break;
                }
                centres.push(far);
                for (i, p) in points.iter().enumerate() {
                    dist[i] = dist[i].min(rho(p, &points[far]));
                }
            }
            let mut members: Vec<Vec<Vec<f64>>> = vec![Vec::new(); centres.len()];
            let mut delta = 0.0f64;
            for p in points {
                let (c, d) = centres
                    .iter()
                    .enumerate()
                    .map(|(c, &i)| (c, rho(p, &points[i])))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .expect("non-empty");
                delta = delta.max(d);
                members[c].push(p.clone());
            }
            Ok(ActionPartition {
                cells: members.into_iter().map(Cell::Points).collect(),
                representatives: centres.iter().map(|&i| points[i].clone()).collect(),
                delta,
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub atom: usize,
}

impl Segment {
    pub fn len(&self) -> f64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Ordinary control switching between the atoms of a relaxed control: every
/// fine step `[t_i, t_{i+1}]` is cut into consecutive pieces of length
/// `q_1 Δt, …, q_k Δt` assigned to atoms `1..k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChatteringSchedule {
    fine: TimeGrid,
    per_block: usize,
    atoms: usize,
    /// `[fine steps × atoms]`
    weights: Vec<f64>,
    /// segments of fine step `i` are `segments[offsets[i]..offsets[i+1]]`
    segments: Vec<Segment>,
    offsets: Vec<usize>,
}

impl ChatteringSchedule {
    pub fn fine_grid(&self) -> &TimeGrid {
        &self.fine
    }

    pub fn blocks(&self) -> usize {
        self.fine.steps() / self.per_block
    }

    pub fn per_block(&self) -> usize {
        self.per_block
    }

    pub fn atom_count(&self) -> usize {
        self.atoms
    }

    pub fn weights_at(&self, step: usize) -> &[f64] {
        &self.weights[step * self.atoms..(step + 1) * self.atoms]
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn step_segments(&self, step: usize) -> &[Segment] {
        &self.segments[self.offsets[step]..self.offsets[step + 1]]
    }

    /// Lebesgue measure of `I_atom` inside coarse block `block`.
    pub fn occupation(&self, atom: usize, block: usize) -> f64 {
        let from = block * self.per_block;
        (from..from + self.per_block)
            .flat_map(|s| self.step_segments(s))
            .filter(|seg| seg.atom == atom)
            .map(Segment::len)
            .sum()
    }

    /// `I_atom` as a union of half-open intervals, adjacent pieces merged.
    pub fn intervals(&self, atom: usize) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = Vec::new();
        for seg in self.segments.iter().filter(|s| s.atom == atom) {
            match out.last_mut() {
                Some(last) if last.1 == seg.start => last.1 = seg.end,
                _ => out.push((seg.start, seg.end)),
            }
        }
        out
    }

    /// Atom active at time `t`.
    pub fn atom_at(&self, t: f64) -> Result<usize> {
        let step = self.fine.floor_index(t, HorizonRule::ControlIndex)?;
        let segs = self.step_segments(step);
        Ok(segs.iter().find(|s| t < s.end).or(segs.last()).map(|s| s.atom).expect("every step has a segment"))
    }

    /// `start,end,atom` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("start,end,atom\n");
        for seg in &self.segments {
            s.push_str(&format!("{},{},{}\n", num(seg.start), num(seg.end), seg.atom));
        }
        s
    }
}

/// Builds the schedule for weights `q` that are constant on each step of
/// `q`'s grid (the coarse blocks), with `per_block` fine steps per block.
pub fn chattering_schedule(q: &OccupationMeasure, per_block: usize) -> Result<ChatteringSchedule> {
    if per_block == 0 {
        return Err(Error::Config("at least one fine step per block".into()));
    }
    let fine = q.grid().refine(per_block)?;
    let k = q.atom_count();
    let dt = fine.dt();
    let mut weights = Vec::with_capacity(fine.steps() * k);
    let mut segments = Vec::new();
    let mut offsets = vec![0];
    for step in 0..fine.steps() {
        let w = q.weights_at(step / per_block);
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || w.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidWeights(format!("block {}: {w:?}", step / per_block)));
        }
        weights.extend_from_slice(w);
        let (t0, t1) = (fine.t(step), fine.t(step + 1));
        let mut cum = 0.0;
        let mut start = t0;
        let last_active = w.iter().rposition(|v| *v > 0.0).expect("weights sum to one");
        for (atom, &wa) in w.iter().enumerate() {
            if wa <= 0.0 {
                continue;
            }
            cum += wa;
            let end = if atom == last_active { t1 } else { (t0 + cum * dt).min(t1) };
            if end > start {
                segments.push(Segment { start, end, atom });
            }
            start = end;
        }
        offsets.push(segments.len());
    }
    Ok(ChatteringSchedule { fine, per_block, atoms: k, weights, segments, offsets })
}

/// Per-atom drivers that advance only while their atom is scheduled.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedDrivers {
    /// `increments[atom]` is `[particles × fine steps × d]`; the increment of
    /// fine step `k` is spent during the atom's segment of that step.
    pub increments: Vec<Vec<f64>>,
    pub particles: usize,
    pub steps: usize,
    pub d: usize,
}

impl CompressedDrivers {
    pub fn at(&self, atom: usize, i: usize, k: usize) -> &[f64] {
        let off = (i * self.steps + k) * self.d;
        &self.increments[atom][off..off + self.d]
    }

    /// Increments of the summed driver `Σ_atoms`, `[particles × steps × d]`.
    pub fn summed(&self) -> Vec<f64> {
        let mut out = self.increments[0].clone();
        for inc in &self.increments[1..] {
            for (o, v) in out.iter_mut().zip(inc) {
                *o += v;
            }
        }
        out
    }

    /// Sum of squared increments of `atom` for particle `i` and coordinate `c`.
    pub fn quadratic_variation(&self, atom: usize, i: usize, c: usize) -> f64 {
        (0..self.steps).map(|k| self.at(atom, i, k)[c].powi(2)).sum()
    }
}

/// Replays the source increment of each fine step at rate `1/q_i` over atom
/// `i`'s segment: the compressed increment is `√q_i ΔZ^i`, so its quadratic
/// variation over the step equals the segment length in expectation.
pub fn compress_brownian(dz: &[Vec<f64>], particles: usize, d: usize, schedule: &ChatteringSchedule) -> Result<CompressedDrivers> {
    let steps = schedule.fine.steps();
    let needed = particles * steps * d;
    if dz.len() < schedule.atoms {
        return Err(Error::InsufficientNoise { needed: schedule.atoms, available: dz.len() });
    }
    if let Some(short) = dz.iter().take(schedule.atoms).find(|z| z.len() < needed) {
        return Err(Error::InsufficientNoise { needed, available: short.len() });
    }
    let mut increments = vec![vec![0.0; needed]; schedule.atoms];
    for (atom, out) in increments.iter_mut().enumerate() {
        for i in 0..particles {
            for k in 0..steps {
                let q = schedule.weights_at(k)[atom];
                if q <= 0.0 {
                    continue;
                }
                let scale = q.sqrt();
                let off = (i * steps + k) * d;
                for c in 0..d {
                    out[off + c] = scale * dz[atom][off + c];
                }
            }
        }
    }
    Ok(CompressedDrivers { increments, particles, steps, d })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timebase::sample_atom_noise;

    fn info<'a>(grid: &'a TimeGrid, step: usize, w: &'a [f64], b: &'a [f64], x0: &'a [f64]) -> Information<'a> {
        let len = grid.steps() + 1;
        Information {
            t: grid.t(step),
            step,
            grid,
            x0,
            w: PathRef::new(w, 1, len, step),
            b: PathRef::new(b, 1, len, step),
            state: None,
        }
    }

    fn unit() -> ActionSpace {
        ActionSpace::interval(-10.0, 10.0, 0.0).unwrap()
    }

    #[test]
    fn constant_policy() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let z = vec![0.0; 5];
        let p = ControlPolicy::constant(vec![0.0]);
        for k in 0..4 {
            assert_eq!(evaluate_policy(&p, &info(&g, k, &z, &z, &[0.0]), &unit()).unwrap(), PolicyOutput::Action(vec![0.0]));
        }
    }

    #[test]
    fn anticipating_prefix_rejected() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let z = vec![0.0; 5];
        let mut i = info(&g, 1, &z, &z, &[0.0]);
        i.w = PathRef::new(&z, 1, 5, 3);
        let err = evaluate_policy(&ControlPolicy::constant(vec![0.0]), &i, &unit()).unwrap_err();
        assert!(matches!(err, Error::Anticipation { prefix: 3, step: 1 }));
    }

    #[test]
    fn left_endpoint_sampling() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let z = vec![0.0; 5];
        let phi = ControlPolicy::open_loop(|i, out| out[0] = i.t);
        let coarse = TimeGrid::new(1.0, 2).unwrap();
        let pc = discretize_control(&phi, coarse, vec![0.0]).unwrap();
        let got: Vec<f64> = (0..4)
            .map(|k| match evaluate_policy(&pc, &info(&g, k, &z, &z, &[0.0]), &unit()).unwrap() {
                PolicyOutput::Action(a) => a[0],
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(got, vec![0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn frozen_initial_block_emits_a0() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let z = vec![0.0; 9];
        let pc = discretize_control(&ControlPolicy::constant(vec![3.0]), TimeGrid::new(1.0, 4).unwrap(), vec![-1.0]).unwrap();
        let acts: Vec<PolicyOutput> = (0..8).map(|k| evaluate_policy(&pc, &info(&g, k, &z, &z, &[0.0]), &unit()).unwrap()).collect();
        assert_eq!(acts[0], PolicyOutput::Action(vec![-1.0]));
        assert_eq!(acts[1], PolicyOutput::Action(vec![-1.0]));
        assert!(acts[2..].iter().all(|a| *a == PolicyOutput::Action(vec![3.0])));
    }

    #[test]
    fn piecewise_constant_is_predictable() {
        // surgery on the noise after a block's left endpoint
        let g = TimeGrid::new(1.0, 8).unwrap();
        let phi = ControlPolicy::open_loop(|i, out| out[0] = i.w.at(i.step)[0] + 0.1 * i.b.at(i.step)[0] + i.x0[0]);
        let pc = discretize_control(&phi, TimeGrid::new(1.0, 4).unwrap(), vec![0.0]).unwrap();
        let w: Vec<f64> = (0..9).map(|k| (k as f64).sin()).collect();
        let b: Vec<f64> = (0..9).map(|k| (k as f64).cos()).collect();
        for k in 0..8 {
            let block_start = 2 * (k / 2);
            let mut w2 = w.clone();
            let mut b2 = b.clone();
            for v in w2[block_start + 1..].iter_mut().chain(b2[block_start + 1..].iter_mut()) {
                *v += 7.0;
            }
            let a = evaluate_policy(&pc, &info(&g, k, &w, &b, &[0.5]), &unit()).unwrap();
            let a2 = evaluate_policy(&pc, &info(&g, k, &w2, &b2, &[0.5]), &unit()).unwrap();
            assert_eq!(a, a2, "step {k}");
        }
    }

    #[test]
    fn relaxed_degenerate_weights() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let z = vec![0.0; 5];
        let occ = OccupationMeasure::constant(g, vec![vec![1.0], vec![2.0]], &[1.0, 0.0]).unwrap();
        let p = ControlPolicy::RelaxedFiniteAtom(RelaxedFiniteAtom { weights: occ });
        assert_eq!(evaluate_policy(&p, &info(&g, 2, &z, &z, &[0.0]), &unit()).unwrap(), PolicyOutput::Weights(vec![1.0, 0.0]));
    }

    #[test]
    fn box_policies_clamp_and_sets_snap() {
        let g = TimeGrid::new(1.0, 2).unwrap();
        let z = vec![0.0; 3];
        let p = ControlPolicy::constant(vec![50.0]);
        assert_eq!(evaluate_policy(&p, &info(&g, 0, &z, &z, &[0.0]), &unit()).unwrap(), PolicyOutput::Action(vec![10.0]));
        let set = ActionSpace::new(ActionShape::FiniteSet { points: vec![vec![0.0], vec![1.0]] }, vec![0.0]).unwrap();
        let p = ControlPolicy::constant(vec![0.8]);
        assert_eq!(evaluate_policy(&p, &info(&g, 0, &z, &z, &[0.0]), &set).unwrap(), PolicyOutput::Action(vec![1.0]));
    }

    #[test]
    fn truncation_examples() {
        let a = ActionSpace::interval(-10.0, 10.0, 0.0).unwrap();
        let (ae, proj) = truncate_actions(&a, 1.0).unwrap();
        assert_eq!(proj.apply(&[5.0]), vec![1.0]);
        assert_eq!(proj.apply(&[0.3]), vec![0.3]);
        assert!(ae.contains(&[-1.0]));
        let far = ActionSpace::interval(5.0, 6.0, 5.0).unwrap();
        assert!(matches!(truncate_actions(&far, 1.0), Err(Error::EmptyTruncation(_))));
        let set = ActionSpace::new(ActionShape::FiniteSet { points: vec![vec![3.0], vec![4.0]] }, vec![3.0]).unwrap();
        assert!(matches!(truncate_actions(&set, 2.0), Err(Error::EmptyTruncation(_))));
    }

    #[test]
    fn partition_examples() {
        let set = ActionSpace::new(ActionShape::FiniteSet { points: vec![vec![0.0], vec![1.0], vec![3.0]] }, vec![0.0]).unwrap();
        let part = partition_actions(&set, 5).unwrap();
        assert_eq!(part.cells.len(), 3);
        assert_eq!(part.delta, 0.0);

        let unit_box = ActionSpace::interval(0.0, 1.0, 0.0).unwrap();
        let part = partition_actions(&unit_box, 4).unwrap();
        assert_eq!(part.cells.len(), 4);
        assert_eq!(part.delta, 0.25);
        assert_eq!(part.cells[3], Cell::Box { lower: vec![0.75], upper: vec![1.0] });
        for a in [0.0, 0.1, 0.5, 0.99, 1.0] {
            let c = part.cell_of(&[a]).unwrap();
            assert!(rho(&part.representatives[c], &[a]) < part.delta);
        }
    }

    #[test]
    fn partition_refines() {
        let sq = ActionSpace::new(ActionShape::Box { lower: vec![-1.0, 0.0], upper: vec![1.0, 2.0] }, vec![0.0, 0.0]).unwrap();
        let pts: Vec<Vec<f64>> = (0..40).map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()]).collect();
        let set = ActionSpace::new(ActionShape::FiniteSet { points: pts.clone() }, pts[0].clone()).unwrap();
        for space in [sq, set] {
            let mut prev = f64::INFINITY;
            for e in [1, 2, 4, 8, 16, 32, 64] {
                let d = partition_actions(&space, e).unwrap().delta;
                assert!(d <= prev, "e = {e}");
                prev = d;
            }
        }
    }

    #[test]
    fn projection_is_one_lipschitz() {
        let a = ActionSpace::new(ActionShape::Box { lower: vec![-5.0, -5.0], upper: vec![5.0, 5.0] }, vec![0.0, 0.0]).unwrap();
        let (_, proj) = truncate_actions(&a, 1.5).unwrap();
        for i in 0..200 {
            let x = [(i as f64 * 0.7).sin() * 4.0, (i as f64 * 1.3).cos() * 4.0];
            let y = [(i as f64 * 0.3).cos() * 4.0, (i as f64 * 2.1).sin() * 4.0];
            assert!(rho(&proj.apply(&x), &proj.apply(&y)) <= rho(&x, &y) + 1e-15);
        }
    }

    #[test]
    fn schedule_single_atom() {
        let q = OccupationMeasure::constant(TimeGrid::new(2.0, 2).unwrap(), vec![vec![0.0]], &[1.0]).unwrap();
        let s = chattering_schedule(&q, 3).unwrap();
        assert_eq!(s.intervals(0), vec![(0.0, 2.0)]);
    }

    #[test]
    fn schedule_two_atoms_half_half() {
        let q = OccupationMeasure::constant(TimeGrid::new(1.0, 1).unwrap(), vec![vec![-1.0], vec![1.0]], &[0.5, 0.5]).unwrap();
        let s = chattering_schedule(&q, 2).unwrap();
        assert_eq!(s.intervals(0), vec![(0.0, 0.25), (0.5, 0.75)]);
        assert_eq!(s.intervals(1), vec![(0.25, 0.5), (0.75, 1.0)]);
        assert_eq!(s.atom_at(0.3).unwrap(), 1);
        assert_eq!(s.atom_at(0.6).unwrap(), 0);
        assert!(s.to_csv().starts_with("start,end,atom\n"));
    }

    #[test]
    fn schedule_rejects_bad_weights() {
        let occ = OccupationMeasure::constant(TimeGrid::new(1.0, 1).unwrap(), vec![vec![0.0], vec![1.0]], &[0.5, 0.6]);
        assert!(matches!(occ, Err(Error::InvalidWeights(_))));
    }

    #[test]
    fn single_atom_compression_is_identity() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let q = OccupationMeasure::constant(TimeGrid::new(1.0, 2).unwrap(), vec![vec![0.0]], &[1.0]).unwrap();
        let s = chattering_schedule(&q, 4).unwrap();
        let noise = sample_atom_noise(&g, 3, 2, 0, 1, 4, 0);
        let c = compress_brownian(&noise.dz, 3, 2, &s).unwrap();
        assert_eq!(c.increments[0], noise.dz[0]);
        assert!(matches!(compress_brownian(&[vec![0.0; 5]], 3, 2, &s), Err(Error::InsufficientNoise { .. })));
    }

    #[test]
    fn compressed_quadratic_variation() {
        let g = TimeGrid::new(1.0, 400).unwrap();
        let q = OccupationMeasure::constant(TimeGrid::new(1.0, 2).unwrap(), vec![vec![0.0], vec![1.0]], &[0.5, 0.5]).unwrap();
        let s = chattering_schedule(&q, 200).unwrap();
        let particles = 50;
        let noise = sample_atom_noise(&g, particles, 1, 0, 2, 17, 0);
        let c = compress_brownian(&noise.dz, particles, 1, &s).unwrap();
        // QV of atom 1 is 0.5 * sum of squares of N(0, dt) over 400 steps:
        // mean 0.5, sd 0.5 * sqrt(2 / 400) per particle
        let qv: Vec<f64> = (0..particles).map(|i| c.quadratic_variation(0, i, 0)).collect();
        let mean = qv.iter().sum::<f64>() / particles as f64;
        let se = 0.5 * (2.0f64 / 400.0).sqrt() / (particles as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * se, "mean = {mean}");
        let total: Vec<f64> = c.summed();
        let tq = (0..particles).map(|i| (0..400).map(|k| total[i * 400 + k].powi(2)).sum::<f64>()).sum::<f64>() / particles as f64;
        let se_total = (2.0f64 / 400.0).sqrt() / (particles as f64).sqrt();
        assert!((tq - 1.0).abs() < 3.0 * se_total, "total = {tq}");
    }

    proptest::proptest! {
        #[test]
        fn schedule_partitions_horizon(w1 in 0.0f64..1.0, w2 in 0.0f64..1.0, blocks in 1usize..4, per_block in 1usize..9) {
            let (lo, hi) = if w1 < w2 { (w1, w2) } else { (w2, w1) };
            let q = [lo, hi - lo, 1.0 - hi];
            let occ = OccupationMeasure::constant(TimeGrid::new(1.5, blocks).unwrap(), vec![vec![0.0], vec![1.0], vec![2.0]], &q).unwrap();
            let s = chattering_schedule(&occ, per_block).unwrap();
            let total: f64 = s.segments().iter().map(Segment::len).sum();
            proptest::prop_assert!((total - 1.5).abs() < 1e-12);
            for pair in s.segments().windows(2) {
                proptest::prop_assert!(pair[0].end <= pair[1].start);
            }
            let dt = s.fine_grid().dt();
            let block_len = 1.5 / blocks as f64;
            for b in 0..blocks {
                for (atom, qa) in q.iter().enumerate() {
                    proptest::prop_assert!((s.occupation(atom, b) - qa * block_len).abs() <= dt);
                }
            }
        }
    }
}
