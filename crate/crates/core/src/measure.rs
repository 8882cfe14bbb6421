//! Empirical measures on stopped paths (and path/action pairs), occupation
//! measures, and exact Wasserstein distances between equal-size empiricals.

use std::io::Write;

use rand::seq::index::sample as sample_indices;

use crate::model::rho;
use crate::output::num;
use crate::timebase::{stream_rng, HorizonRule, PathRef, StreamKind, TimeGrid};
use crate::{Error, Result};

/// Largest atom count handed to the `O(N^3)` assignment solver.
pub const ASSIGNMENT_CAP: usize = 2048;

/// Solves the square linear assignment problem by shortest augmenting paths.
/// `cost` is row-major `n × n`; returns the column assigned to each row.
pub fn solve_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "assignment needs a square cost matrix");
    const NONE: usize = usize::MAX;
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut shortest = vec![0.0; n];
    let mut path = vec![NONE; n];
    let mut col4row = vec![NONE; n];
    let mut row4col = vec![NONE; n];
    let mut remaining = vec![0usize; n];
    let mut sr = vec![false; n];
    let mut sc = vec![false; n];

    for cur_row in 0..n {
        let mut min_val = 0.0;
        let mut i = cur_row;
        let mut num_remaining = n;
        for (it, r) in remaining.iter_mut().enumerate() {
            *r = n - it - 1;
        }
        sr.fill(false);
        sc.fill(false);
        shortest.fill(f64::INFINITY);
        let mut sink = NONE;

        while sink == NONE {
            sr[i] = true;
            let mut index = NONE;
            let mut lowest = f64::INFINITY;
            for it in 0..num_remaining {
                let j = remaining[it];
                let r = min_val + cost[i * n + j] - u[i] - v[j];
                if r < shortest[j] {
                    path[j] = i;
                    shortest[j] = r;
                }
                if shortest[j] < lowest || (shortest[j] == lowest && row4col[j] == NONE) {
                    lowest = shortest[j];
                    index = it;
                }
            }
            min_val = lowest;
            assert!(index != NONE && min_val.is_finite(), "assignment cost matrix must be finite");
            let j = remaining[index];
            if row4col[j] == NONE {
                sink = j;
            } else {
                i = row4col[j];
            }
            sc[j] = true;
            num_remaining -= 1;
            remaining[index] = remaining[num_remaining];
        }

        u[cur_row] += min_val;
        for r in 0..n {
            if sr[r] && r != cur_row {
                u[r] += min_val - shortest[col4row[r]];
            }
        }
        for c in 0..n {
            if sc[c] {
                v[c] -= min_val - shortest[c];
            }
        }

        let mut j = sink;
        loop {
            let i = path[j];
            row4col[j] = i;
            std::mem::swap(&mut col4row[i], &mut j);
            if i == cur_row {
                break;
            }
        }
    }
    col4row
}

/// Minimal total cost of a square assignment problem.
pub fn assignment_cost(cost: &[f64], n: usize) -> f64 {
    solve_assignment(cost, n).iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum()
}

/// Uniform empirical measure on paths stopped at grid index `stop`. Point
/// atoms are paths of length one.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalMeasure {
    atoms: Vec<f64>,
    count: usize,
    dim: usize,
    len: usize,
    stop: usize,
    grid: Option<TimeGrid>,
}

impl EmpiricalMeasure {
    /// `atoms` is `[count × len × dim]`; values after `stop` are frozen to the
    /// value at `stop`.
    pub fn from_paths(mut atoms: Vec<f64>, count: usize, dim: usize, grid: TimeGrid, stop: usize) -> Result<Self> {
        let len = grid.steps() + 1;
        if atoms.len() != count * len * dim || stop >= len || count == 0 {
            return Err(Error::ShapeMismatch(format!("{} values for {count} paths of {len} points × {dim}", atoms.len())));
        }
        freeze_after(&mut atoms, count, dim, len, stop);
        Ok(Self { atoms, count, dim, len, stop, grid: Some(grid) })
    }

    /// Point atoms in `R^dim`, `points` is `[count × dim]`.
    pub fn from_points(points: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(Error::ShapeMismatch(format!("{} values in dimension {dim}", points.len())));
        }
        let count = points.len() / dim;
        Ok(Self { atoms: points, count, dim, len: 1, stop: 0, grid: None })
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

    pub fn grid(&self) -> Option<&TimeGrid> {
        self.grid.as_ref()
    }

    /// Truncation time.
    pub fn time(&self) -> f64 {
        self.grid.map_or(0.0, |g| g.t(self.stop))
    }

    pub fn atom(&self, i: usize) -> PathRef<'_> {
        let s = self.len * self.dim;
        PathRef::new(&self.atoms[i * s..(i + 1) * s], self.dim, self.len, self.stop)
    }

    /// Atoms replaced by their prefixes stopped at `t`.
    pub fn truncate(&self, t: f64) -> Result<Self> {
        let grid = self.grid.ok_or_else(|| Error::ShapeMismatch("point atoms cannot be truncated".into()))?;
        if t > self.time() {
            return Err(Error::OutOfRange { value: t, lo: 0.0, hi: self.time() });
        }
        let stop = grid.floor_index(t, HorizonRule::Inclusive)?;
        let mut atoms = self.atoms.clone();
        freeze_after(&mut atoms, self.count, self.dim, self.len, stop);
        Ok(Self { atoms, stop, ..self.clone() })
    }

    /// `(1/N) Σ ‖x_i‖^p` with the discrete sup-norm.
    pub fn moment(&self, p: f64) -> f64 {
        (0..self.count).map(|i| self.atom(i).sup_norm().powf(p)).sum::<f64>() / self.count as f64
    }

    fn atom_distance(&self, i: usize, other: &Self, l: usize) -> f64 {
        let (a, b) = (self.atom(i), other.atom(l));
        (0..=self.stop).map(|k| rho(a.at(k), b.at(k))).fold(0.0, f64::max)
    }

    fn compatible(&self, other: &Self) -> Result<()> {
        if self.count != other.count || self.dim != other.dim || self.len != other.len || self.stop != other.stop {
            return Err(Error::ShapeMismatch(format!(
                "measures differ: {} vs {} atoms, dim {} vs {}, stop {} vs {}",
                self.count, other.count, self.dim, other.dim, self.stop, other.stop
            )));
        }
        if self.grid != other.grid {
            return Err(Error::ShapeMismatch("measures live on different grids".into()));
        }
        Ok(())
    }

    /// Keeps `k` atoms chosen without replacement by the auxiliary stream of
    /// `seed`; used to cap assignment sizes.
    pub fn subsample(&self, k: usize, seed: u64) -> Self {
        if k >= self.count {
            return self.clone();
        }
        let mut rng = stream_rng(seed, 0, StreamKind::Auxiliary, 1);
        let mut idx = sample_indices(&mut rng, self.count, k).into_vec();
        idx.sort_unstable();
        let s = self.len * self.dim;
        let atoms = idx.iter().flat_map(|&i| self.atoms[i * s..(i + 1) * s].iter().copied()).collect();
        Self { atoms, count: k, ..self.clone() }
    }

    /// One atom per row, columns are the grid values (frozen after the
    /// truncation time).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write_atoms_csv(&mut w, self, None)
    }
}

fn freeze_after(atoms: &mut [f64], count: usize, dim: usize, len: usize, stop: usize) {
    for i in 0..count {
        let base = i * len * dim;
        for k in stop + 1..len {
            for c in 0..dim {
                atoms[base + k * dim + c] = atoms[base + stop * dim + c];
            }
        }
    }
}

fn write_atoms_csv<W: Write>(w: &mut W, m: &EmpiricalMeasure, actions: Option<(&[f64], usize)>) -> Result<()> {
    let mut header: Vec<String> = Vec::new();
    for k in 0..m.len {
        for c in 0..m.dim {
            header.push(format!("x{k}_{c}"));
        }
    }
    if let Some((_, j)) = actions {
        header.extend((0..j).map(|c| format!("a_{c}")));
    }
    writeln!(w, "{}", header.join(","))?;
    for i in 0..m.count {
        let atom = m.atom(i);
        let mut row: Vec<String> = (0..m.len).flat_map(|k| atom.at(k).iter().map(|v| num(*v)).collect::<Vec<_>>()).collect();
        if let Some((acts, j)) = actions {
            row.extend(acts[i * j..(i + 1) * j].iter().map(|v| num(*v)));
        }
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Uniform empirical measure on (stopped path, action) pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalPairMeasure {
    paths: EmpiricalMeasure,
    actions: Vec<f64>,
    action_dim: usize,
}

impl EmpiricalPairMeasure {
    pub fn new(paths: EmpiricalMeasure, actions: Vec<f64>, action_dim: usize) -> Result<Self> {
        if actions.len() != paths.count * action_dim {
            return Err(Error::ShapeMismatch(format!("{} action values for {} atoms", actions.len(), paths.count)));
        }
        Ok(Self { paths, actions, action_dim })
    }

    pub fn paths(&self) -> &EmpiricalMeasure {
        &self.paths
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn truncate(&self, t: f64) -> Result<Self> {
        Ok(Self { paths: self.paths.truncate(t)?, ..self.clone() })
    }

    /// `(1/N) Σ (‖x_i‖^p + ρ(a0, a_i)^p)`.
    pub fn moment(&self, p: f64, a0: &[f64]) -> f64 {
        let acts = (0..self.paths.count).map(|i| rho(a0, self.action(i)).powf(p)).sum::<f64>() / self.paths.count as f64;
        self.paths.moment(p) + acts
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write_atoms_csv(&mut w, &self.paths, Some((&self.actions, self.action_dim)))
    }
}

/// `W_p` between equal-size empirical measures, atoms compared in the
/// discrete sup-norm (Euclidean for point atoms).
pub fn wasserstein_p(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: f64) -> Result<f64> {
    mu.compatible(nu)?;
    check_order(p)?;
    Ok(wasserstein_with(mu.count, p, |i, l| mu.atom_distance(i, nu, l)))
}

/// `W_p` on pair measures with atom metric `‖x - y‖ + ρ(a, b)`.
pub fn wasserstein_pair(mu: &EmpiricalPairMeasure, nu: &EmpiricalPairMeasure, p: f64) -> Result<f64> {
    mu.paths.compatible(&nu.paths)?;
    check_order(p)?;
    if mu.action_dim != nu.action_dim {
        return Err(Error::ShapeMismatch("action dimensions differ".into()));
    }
    Ok(wasserstein_with(mu.paths.count, p, |i, l| mu.paths.atom_distance(i, &nu.paths, l) + rho(mu.action(i), nu.action(l))))
}

/// `W_p` with both measures subsampled to at most `cap` atoms (same seed for
/// both); exact when no subsampling is needed.
pub fn wasserstein_p_capped(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: f64, cap: usize, seed: u64) -> Result<f64> {
    if mu.count <= cap {
        return wasserstein_p(mu, nu, p);
    }
    wasserstein_p(&mu.subsample(cap, seed), &nu.subsample(cap, seed.wrapping_add(1)), p)
}

fn check_order(p: f64) -> Result<()> {
    if p.is_finite() && p >= 1.0 {
        Ok(())
    } else {
        Err(Error::OutOfRange { value: p, lo: 1.0, hi: f64::INFINITY })
    }
}

fn wasserstein_with(n: usize, p: f64, dist: impl Fn(usize, usize) -> f64) -> f64 {
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for l in 0..n {
            cost[i * n + l] = dist(i, l).powf(p);
        }
    }
    let total = assignment_cost(&cost, n).max(0.0);
    (total / n as f64).powf(1.0 / p)
}

/// `W_p` between uniform empiricals on the real line with possibly different
/// sizes, via the quantile coupling.
pub fn wasserstein_1d(xs: &[f64], ys: &[f64], p: f64) -> Result<f64> {
    check_order(p)?;
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::ShapeMismatch("empty sample".into()));
    }
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    // walk the merged breakpoints i/n and j/m in integer arithmetic
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = 0u128;
    let total = (n as u128) * (m as u128);
    let mut acc = 0.0;
    while i < n && j < m {
        let next_a = (i as u128 + 1) * m as u128;
        let next_b = (j as u128 + 1) * n as u128;
        let next = next_a.min(next_b);
        acc += (next - prev) as f64 / total as f64 * (a[i] - b[j]).abs().powf(p);
        prev = next;
        if next_a == next {
            i += 1;
        }
        if next_b == next {
            j += 1;
        }
    }
    Ok(acc.powf(1.0 / p))
}

/// Relaxed control on a grid: per step a probability vector over a shared
/// list of action atoms.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupationMeasure {
    grid: TimeGrid,
    atoms: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

const WEIGHT_TOL: f64 = 1e-9;

impl OccupationMeasure {
    /// `weights` is `[steps × atoms]`.
    pub fn new(grid: TimeGrid, atoms: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let k = atoms.len();
        if k == 0 || weights.len() != grid.steps() * k {
            return Err(Error::ShapeMismatch(format!("{} weights for {} steps × {k} atoms", weights.len(), grid.steps())));
        }
        for (s, row) in weights.chunks(k).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > WEIGHT_TOL {
                return Err(Error::InvalidWeights(format!("step {s}: {row:?}")));
            }
        }
        Ok(Self { grid, atoms, weights })
    }

    /// The same weights on every step.
    pub fn constant(grid: TimeGrid, atoms: Vec<Vec<f64>>, q: &[f64]) -> Result<Self> {
        let weights = (0..grid.steps()).flat_map(|_| q.iter().copied()).collect();
        Self::new(grid, atoms, weights)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn weights_at(&self, step: usize) -> &[f64] {
        let k = self.atoms.len();
        &self.weights[step * k..(step + 1) * k]
    }

    /// Weights at the step containing `t` of another (finer) grid.
    pub fn weights_at_time(&self, t: f64) -> Result<&[f64]> {
        Ok(self.weights_at(self.grid.floor_index(t, HorizonRule::ControlIndex)?))
    }

    /// Total time-mass of atom `i` divided by the horizon.
    pub fn mass(&self, atom: usize) -> f64 {
        let k = self.atoms.len();
        (0..self.grid.steps()).map(|s| self.weights[s * k + atom]).sum::<f64>() / self.grid.steps() as f64
    }

    pub fn atom_index(&self, a: &[f64]) -> Option<usize> {
        self.atoms.iter().position(|x| x.as_slice() == a)
    }

    /// Keeps steps before `t`; from `t` on, the point mass at `a0`.
    pub fn stop_occupation(&self, t: f64, a0: &[f64]) -> Result<Self> {
        let s = self.grid.floor_index(t, HorizonRule::Inclusive)?;
        if self.grid.t(s) != t {
            return Err(Error::OutOfRange { value: t, lo: self.grid.t(s), hi: self.grid.t(s) });
        }
        let mut atoms = self.atoms.clone();
        let mut k = atoms.len();
        let mut weights = self.weights.clone();
        let e0 = match self.atom_index(a0) {
            Some(e) => e,
            None => {
                atoms.push(a0.to_vec());
                weights = weights.chunks(k).flat_map(|row| row.iter().copied().chain(std::iter::once(0.0))).collect();
                k += 1;
                k - 1
            }
        };
        for step in s..self.grid.steps() {
            let row = &mut weights[step * k..(step + 1) * k];
            row.fill(0.0);
            row[e0] = 1.0;
        }
        Ok(Self { grid: self.grid, atoms, weights })
    }
}
