//! Uniform time grids, stopped path views and reproducible Gaussian drivers.
//!
//! Every random stream is keyed by `(seed, batch, kind, index)` and drawn from
//! its own ChaCha stream, so growing the particle count never reshuffles the
//! streams of particles that already existed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

/// What `floor_index` returns at the horizon itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum HorizonRule {
    /// `T` maps to the last grid point `t_m = T`.
    #[default]
    Inclusive,
    /// `T` maps to `t_{m-1}`, the left endpoint of the last step. Used when the
    /// result indexes a per-step quantity such as a control.
    ControlIndex,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::Config("grid needs at least one step".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn t(&self, k: usize) -> f64 {
        debug_assert!(k <= self.steps);
        if k == self.steps {
            self.horizon
        } else {
            self.horizon * k as f64 / self.steps as f64
        }
    }

    pub fn points(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.t(k)).collect()
    }

    /// Index of the largest grid point `<= t`.
    pub fn floor_index(&self, t: f64, rule: HorizonRule) -> Result<usize> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::OutOfRange { value: t, lo: 0.0, hi: self.horizon });
        }
        let m = self.steps;
        let mut k = ((t * m as f64 / self.horizon).floor() as usize).min(m);
        // repair rounding in t * m / T on either side
        while k > 0 && self.t(k) > t {
            k -= 1;
        }
        while k < m && self.t(k + 1) <= t {
            k += 1;
        }
        if k == m && rule == HorizonRule::ControlIndex {
            k = m - 1;
        }
        Ok(k)
    }

    /// The delayed-grid operator `[t]`: largest grid point not after `t`.
    pub fn floor_grid(&self, t: f64) -> Result<f64> {
        Ok(self.t(self.floor_index(t, HorizonRule::Inclusive)?))
    }

    /// A grid with `factor` times as many steps on the same horizon.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        Self::new(self.horizon, self.steps * factor)
    }

    /// Whether every point of `self` is a point of `fine`.
    pub fn is_coarsening_of(&self, fine: &TimeGrid) -> bool {
        self.horizon == fine.horizon && fine.steps % self.steps == 0
    }
}

/// Shorthand for `TimeGrid::floor_grid`.
pub fn floor_grid(t: f64, grid: &TimeGrid) -> Result<f64> {
    grid.floor_grid(t)
}

/// A borrowed path on a grid, stopped at index `stop`: reads past `stop`
/// return the value at `stop`, which is exactly `x(t ∧ ·)`.
#[derive(Clone, Copy, Debug)]
pub struct PathRef<'a> {
    data: &'a [f64],
    dim: usize,
    len: usize,
    stop: usize,
}

impl<'a> PathRef<'a> {
    /// `data` holds at least `stop + 1` rows of width `dim`; `len` is the
    /// number of grid points of the full path.
    pub fn new(data: &'a [f64], dim: usize, len: usize, stop: usize) -> Self {
        debug_assert!(stop < len);
        debug_assert!(data.len() >= (stop + 1) * dim);
        Self { data, dim, len, stop }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn stop(&self) -> usize {
        self.stop
    }

    pub fn at(&self, i: usize) -> &'a [f64] {
        let i = i.min(self.stop);
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn stopped(&self, stop: usize) -> PathRef<'a> {
        PathRef { stop: stop.min(self.stop), ..*self }
    }

    /// Discrete sup-norm over the observed grid values.
    pub fn sup_norm(&self) -> f64 {
        (0..=self.stop).map(|i| norm(self.at(i))).fold(0.0, f64::max)
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Paths of `count` particles on a grid, `[count × (steps+1) × dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSet {
    values: Vec<f64>,
    count: usize,
    dim: usize,
    grid: TimeGrid,
}

impl PathSet {
    pub fn zeros(count: usize, dim: usize, grid: TimeGrid) -> Self {
        Self { values: vec![0.0; count * (grid.steps() + 1) * dim], count, dim, grid }
    }

    pub fn from_values(values: Vec<f64>, count: usize, dim: usize, grid: TimeGrid) -> Result<Self> {
        if values.len() != count * (grid.steps() + 1) * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {count} paths of {} points in dimension {dim}",
                values.len(),
                grid.steps() + 1
            )));
        }
        Ok(Self { values, count, dim, grid })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn stride(&self) -> usize {
        (self.grid.steps() + 1) * self.dim
    }

    pub fn path(&self, i: usize) -> PathRef<'_> {
        let s = self.stride();
        PathRef::new(&self.values[i * s..(i + 1) * s], self.dim, self.grid.steps() + 1, self.grid.steps())
    }

    pub fn value(&self, i: usize, k: usize) -> &[f64] {
        let off = i * self.stride() + k * self.dim;
        &self.values[off..off + self.dim]
    }

    pub(crate) fn value_mut(&mut self, i: usize, k: usize) -> &mut [f64] {
        let off = i * self.stride() + k * self.dim;
        &mut self.values[off..off + self.dim]
    }

    /// States of all particles at step `k`, `[count × dim]`.
    pub fn slice_at(&self, k: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.count * self.dim);
        for i in 0..self.count {
            out.extend_from_slice(self.value(i, k));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Reorders particles: row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let s = self.stride();
        let mut values = Vec::with_capacity(self.values.len());
        for &p in perm {
            values.extend_from_slice(&self.values[p * s..(p + 1) * s]);
        }
        Self { values, ..self.clone() }
    }
}

/// Kinds of random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamKind {
    Initial,
    Common,
    /// Idiosyncratic Brownian driver; atom 0 is the ordinary `W`.
    Brownian(u32),
    Auxiliary,
}

impl StreamKind {
    fn code(self) -> u64 {
        match self {
            StreamKind::Initial => 1,
            StreamKind::Common => 2,
            StreamKind::Auxiliary => 3,
            StreamKind::Brownian(atom) => 16 + atom as u64,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for stream `(seed, batch, kind, index)`.
pub fn stream_rng(seed: u64, batch: u64, kind: StreamKind, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = splitmix64(seed) ^ splitmix64(batch.wrapping_add(0x5151_5151));
    for chunk in key.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream((kind.code() << 48) ^ index);
    rng
}

pub fn standard_normals(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for v in out {
        *v = StandardNormal.sample(rng);
    }
}

/// Gaussian increments for one Monte-Carlo batch: per-particle `dW` and a
/// single common `dB` shared by every particle of the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBundle {
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
    pub particles: usize,
    pub d: usize,
    pub ell: usize,
    pub grid: TimeGrid,
    pub seed: u64,
    pub batch: u64,
}

impl NoiseBundle {
    pub fn dw_at(&self, i: usize, k: usize) -> &[f64] {
        let off = (i * self.grid.steps() + k) * self.d;
        &self.dw[off..off + self.d]
    }

    pub fn db_at(&self, k: usize) -> &[f64] {
        &self.db[k * self.ell..(k + 1) * self.ell]
    }

    /// Sums `factor` consecutive increments; the coarse Brownian paths are
    /// the fine ones observed on the coarse grid.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let m = self.grid.steps();
        if factor == 0 || m % factor != 0 {
            return Err(Error::ShapeMismatch(format!("cannot coarsen {m} steps by {factor}")));
        }
        let grid = TimeGrid::new(self.grid.horizon(), m / factor)?;
        Ok(Self {
            dw: coarsen_rows(&self.dw, self.particles, m, self.d, factor),
            db: coarsen_rows(&self.db, 1, m, self.ell, factor),
            grid,
            ..self.clone()
        })
    }

    /// Keeps only the first `n` particles; the streams of those are unchanged.
    pub fn truncate_particles(&self, n: usize) -> Self {
        let n = n.min(self.particles);
        Self {
            dw: self.dw[..n * self.grid.steps() * self.d].to_vec(),
            particles: n,
            ..self.clone()
        }
    }

    /// Cumulative idiosyncratic path of particle `i`, `[(m+1) × d]`.
    pub fn brownian_path(&self, i: usize) -> Vec<f64> {
        cumulate(&self.dw[i * self.grid.steps() * self.d..(i + 1) * self.grid.steps() * self.d], self.d)
    }

    /// Cumulative common path, `[(m+1) × ell]`.
    pub fn common_path(&self) -> Vec<f64> {
        cumulate(&self.db, self.ell)
    }
}

pub(crate) fn cumulate(incr: &[f64], dim: usize) -> Vec<f64> {
    let steps = if dim == 0 { 0 } else { incr.len() / dim };
    let mut out = vec![0.0; (steps + 1) * dim];
    for k in 0..steps {
        for c in 0..dim {
            out[(k + 1) * dim + c] = out[k * dim + c] + incr[k * dim + c];
        }
    }
    out
}

pub(crate) fn coarsen_rows(incr: &[f64], rows: usize, steps: usize, dim: usize, factor: usize) -> Vec<f64> {
    let coarse = steps / factor;
    let mut out = vec![0.0; rows * coarse * dim];
    for r in 0..rows {
        for kc in 0..coarse {
            for c in 0..dim {
                let mut s = 0.0;
                for f in 0..factor {
                    s += incr[(r * steps + kc * factor + f) * dim + c];
                }
                out[(r * coarse + kc) * dim + c] = s;
            }
        }
    }
    out
}

/// Per-particle increments `[particles × m × d]` of stream `kind`.
pub fn sample_increments(grid: &TimeGrid, particles: usize, d: usize, kind: StreamKind, seed: u64, batch: u64) -> Vec<f64> {
    let m = grid.steps();
    let scale = grid.dt().sqrt();
    let mut out = vec![0.0; particles * m * d];
    if d == 0 || m == 0 {
        return out;
    }
    out.par_chunks_mut(m * d).enumerate().for_each(|(i, row)| {
        let mut rng = stream_rng(seed, batch, kind, i as u64);
        standard_normals(&mut rng, row);
        for v in row.iter_mut() {
            *v *= scale;
        }
    });
    out
}

/// Draws the idiosyncratic and common increments of one batch.
pub fn sample_noise(grid: &TimeGrid, particles: usize, d: usize, ell: usize, seed: u64, batch: u64) -> NoiseBundle {
    let dw = sample_increments(grid, particles, d, StreamKind::Brownian(0), seed, batch);
    let m = grid.steps();
    let mut db = vec![0.0; m * ell];
    if ell > 0 {
        let mut rng = stream_rng(seed, batch, StreamKind::Common, 0);
        standard_normals(&mut rng, &mut db);
        let scale = grid.dt().sqrt();
        for v in &mut db {
            *v *= scale;
        }
    }
    NoiseBundle { dw, db, particles, d, ell, grid: *grid, seed, batch }
}

/// One independent `d`-dimensional stream per relaxed-control atom, plus the
/// common noise. Atom 0 reuses the ordinary `W` stream.
#[derive(Clone, Debug, PartialEq)]
pub struct AtomNoise {
    pub dz: Vec<Vec<f64>>,
    pub common: NoiseBundle,
}

impl AtomNoise {
    pub fn atoms(&self) -> usize {
        self.dz.len()
    }

    pub fn dz_at(&self, atom: usize, i: usize, k: usize) -> &[f64] {
        let d = self.common.d;
        let off = (i * self.common.grid.steps() + k) * d;
        &self.dz[atom][off..off + d]
    }

    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let common = self.common.coarsen(factor)?;
        let m = self.common.grid.steps();
        let dz = self
            .dz
            .iter()
            .map(|z| coarsen_rows(z, self.common.particles, m, self.common.d, factor))
            .collect();
        Ok(Self { dz, common })
    }
}

pub fn sample_atom_noise(grid: &TimeGrid, particles: usize, d: usize, ell: usize, atoms: usize, seed: u64, batch: u64) -> AtomNoise {
    let common = sample_noise(grid, particles, d, ell, seed, batch);
    let mut dz = vec![common.dw.clone()];
    for a in 1..atoms {
        dz.push(sample_increments(grid, particles, d, StreamKind::Brownian(a as u32), seed, batch));
    }
    AtomNoise { dz, common }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_grid_examples() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        assert_eq!(g.floor_grid(0.0).unwrap(), 0.0);
        assert_eq!(g.floor_grid(0.3).unwrap(), 0.25);
        assert_eq!(g.floor_grid(0.25).unwrap(), 0.25);
        assert_eq!(g.floor_grid(1.0).unwrap(), 1.0);
        assert_eq!(g.floor_index(1.0, HorizonRule::ControlIndex).unwrap(), 3);
        assert!(matches!(g.floor_grid(1.5), Err(Error::OutOfRange { .. })));
        assert!(matches!(g.floor_grid(-0.1), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn grid_points_hit_themselves() {
        for m in [3, 7, 10, 49, 100] {
            let g = TimeGrid::new(0.7, m).unwrap();
            for k in 0..=m {
                assert_eq!(g.floor_index(g.t(k), HorizonRule::Inclusive).unwrap(), k);
            }
            assert_eq!(g.t(m), 0.7);
        }
    }

    #[test]
    fn same_seed_same_noise() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let a = sample_noise(&g, 5, 2, 1, 42, 3);
        let b = sample_noise(&g, 5, 2, 1, 42, 3);
        assert_eq!(a, b);
        let c = sample_noise(&g, 5, 2, 1, 43, 3);
        assert_ne!(a.dw, c.dw);
    }

    #[test]
    fn zero_width_common_noise() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let n = sample_noise(&g, 3, 1, 0, 1, 0);
        assert!(n.db.is_empty());
        assert_eq!(n.db_at(4).len(), 0);
    }

    #[test]
    fn particle_streams_do_not_depend_on_count() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let small = sample_noise(&g, 4, 1, 1, 9, 0);
        let big = sample_noise(&g, 16, 1, 1, 9, 0);
        assert_eq!(small.dw[..], big.dw[..small.dw.len()]);
        assert_eq!(small.db, big.db);
        assert_eq!(big.truncate_particles(4), small);
    }

    #[test]
    fn increment_variance_matches_dt() {
        // 10^5 increments with dt = 0.01
        let g = TimeGrid::new(1.0, 100).unwrap();
        let n = sample_noise(&g, 1000, 1, 0, 2024, 0);
        let k = n.dw.len() as f64;
        let mean = n.dw.iter().sum::<f64>() / k;
        let var = n.dw.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
        assert!((var - 0.01).abs() < 0.05 * 0.01, "var = {var}");
        assert!(mean.abs() < 4.0 * (0.01f64 / k).sqrt());
    }

    #[test]
    fn coarsened_noise_is_the_same_path() {
        let g = TimeGrid::new(2.0, 12).unwrap();
        let n = sample_noise(&g, 3, 2, 1, 5, 1);
        let c = n.coarsen(4).unwrap();
        assert_eq!(c.grid.steps(), 3);
        let fine = n.brownian_path(2);
        let coarse = c.brownian_path(2);
        for kc in 0..=3 {
            for dim in 0..2 {
                assert!((fine[kc * 4 * 2 + dim] - coarse[kc * 2 + dim]).abs() < 1e-12);
            }
        }
        assert!(n.coarsen(5).is_err());
    }

    #[test]
    fn path_ref_stops() {
        let data = [1.0, 2.0, 3.0, 4.0];
        let p = PathRef::new(&data, 1, 4, 3);
        let s = p.stopped(1);
        assert_eq!(s.at(3), &[2.0]);
        assert_eq!(s.at(0), &[1.0]);
        assert_eq!(p.sup_norm(), 4.0);
        assert_eq!(s.sup_norm(), 2.0);
    }

    proptest::proptest! {
        #[test]
        fn floor_grid_idempotent(t in 0.0f64..=3.0, m in 1usize..64) {
            let g = TimeGrid::new(3.0, m).unwrap();
            let f = g.floor_grid(t).unwrap();
            proptest::prop_assert!(f <= t);
            proptest::prop_assert_eq!(g.floor_grid(f).unwrap(), f);
        }
    }
}
