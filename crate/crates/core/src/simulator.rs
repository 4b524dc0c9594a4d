//! Exact event-driven simulation of the BDLP process on a periodic box.
//!
//! Each particle dies at rate `m + w_i` with `w_i = κ⁻ Σ_{j≠i} a⁻_L(x_i − x_j)`
//! and gives birth at rate `κ⁺`, the offspring displaced by a draw from `a⁺`
//! and wrapped onto the torus. Competition sums are found through a cell
//! list with cell side at least `r_cut(a⁻)`; death selection uses a Fenwick
//! tree over `m + w_i`.

use rand::Rng;
use rand_distr::{Distribution, Exp1, Poisson};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::kernels::{ModelParams, SpaceSpec};
use crate::rng::{replicate_seed, stream};

/// Default bound on events per run.
pub const DEFAULT_EVENT_CAP: u64 = 100_000_000;

/// Events between from-scratch recomputations of the rate caches.
pub const RECOMPUTE_INTERVAL: u64 = 100_000;

/// Largest tolerated relative drift of the cached total competition rate.
pub const CACHE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("configuration is empty (absorbing state): no event can occur")]
    Absorbing,
    #[error("event cap of {cap} exceeded at t = {time} with {count} particles; the population is exploding")]
    EventCap { cap: u64, time: f64, count: usize },
    #[error("cached competition total drifted by {relative:e} relative to recomputation")]
    CacheDrift { relative: f64 },
    #[error("intensity must be finite and nonnegative, got {0}")]
    BadIntensity(f64),
    #[error("record times must be increasing and lie in [0, {t_end}]")]
    BadRecordTimes { t_end: f64 },
    #[error("position has {got} coordinates, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Prefix-sum tree over nonnegative weights with O(log n) sampling.
#[derive(Debug, Clone)]
struct RateTree {
    values: Vec<f64>,
    tree: Vec<f64>,
}

impl RateTree {
    fn build(values: &[f64]) -> Self {
        let cap = values.len().next_power_of_two().max(16);
        let mut tree = vec![0.0; cap + 1];
        for (i, &v) in values.iter().enumerate() {
            tree[i + 1] = v;
        }
        for i in 1..=cap {
            let parent = i + (i & i.wrapping_neg());
            if parent <= cap {
                tree[parent] += tree[i];
            }
        }
        Self {
            values: values.to_vec(),
            tree,
        }
    }

    fn capacity(&self) -> usize {
        self.tree.len() - 1
    }

    fn len(&self) -> usize {
        self.values.len()
    }

    fn add(&mut self, i: usize, delta: f64) {
        let mut k = i + 1;
        while k < self.tree.len() {
            self.tree[k] += delta;
            k += k & k.wrapping_neg();
        }
    }

    fn set(&mut self, i: usize, value: f64) {
        let delta = value - self.values[i];
        self.values[i] = value;
        self.add(i, delta);
    }

    fn push(&mut self, value: f64) {
        if self.len() == self.capacity() {
            let mut values = std::mem::take(&mut self.values);
            values.push(value);
            *self = Self::build(&values);
            return;
        }
        self.values.push(0.0);
        self.set(self.len() - 1, value);
    }

    fn pop(&mut self) {
        let last = self.len() - 1;
        self.set(last, 0.0);
        self.values.pop();
        if self.capacity() > 16 && self.len() < self.capacity() / 4 {
            *self = Self::build(&self.values.clone());
        }
    }

    fn total(&self) -> f64 {
        let mut k = self.len();
        let mut sum = 0.0;
        while k > 0 {
            sum += self.tree[k];
            k -= k & k.wrapping_neg();
        }
        sum
    }

    /// Smallest index whose inclusive prefix sum exceeds `u`.
    fn find(&self, mut u: f64) -> usize {
        let cap = self.capacity();
        let mut pos = 0;
        let mut step = cap;
        while step > 0 {
            let next = pos + step;
            if next <= cap && self.tree[next] <= u {
                pos = next;
                u -= self.tree[next];
            }
            step >>= 1;
        }
        pos
    }
}

/// Particle configuration with cell list and cached death rates.
#[derive(Debug, Clone)]
pub struct Configuration {
    space: SpaceSpec,
    m: f64,
    kappa_minus: f64,
    a_minus: crate::kernels::Kernel,
    positions: Vec<f64>,
    cells_per_axis: usize,
    cell_side: f64,
    cells: Vec<Vec<usize>>,
    cell_of: Vec<usize>,
    slot_of: Vec<usize>,
    w: Vec<f64>,
    total_w: f64,
    tree: RateTree,
}

impl Configuration {
    /// Builds caches for the given flat positions (wrapped onto the torus).
    pub fn new(params: &ModelParams, mut positions: Vec<f64>) -> Result<Self, SimError> {
        let d = params.space.dim();
        if !positions.len().is_multiple_of(d) {
            return Err(SimError::DimensionMismatch {
                expected: d,
                got: positions.len() % d,
            });
        }
        for chunk in positions.chunks_exact_mut(d) {
            params.space.wrap(chunk);
        }
        let l = params.space.length();
        let r_cut = params.a_minus.r_cut();
        let cells_per_axis = ((l / r_cut).floor() as usize).max(1);
        let n_cells = cells_per_axis.pow(d as u32);
        let mut cfg = Self {
            space: params.space,
            m: params.m,
            kappa_minus: params.kappa_minus,
            a_minus: params.a_minus.clone(),
            positions: Vec::with_capacity(positions.len()),
            cells_per_axis,
            cell_side: l / cells_per_axis as f64,
            cells: vec![Vec::new(); n_cells],
            cell_of: Vec::new(),
            slot_of: Vec::new(),
            w: Vec::new(),
            total_w: 0.0,
            tree: RateTree::build(&[]),
        };
        for x in positions.chunks_exact(d) {
            cfg.insert_unrated(x);
        }
        cfg.recompute();
        Ok(cfg)
    }

    pub fn empty(params: &ModelParams) -> Self {
        Self::new(params, Vec::new()).expect("empty position list is valid")
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn space(&self) -> &SpaceSpec {
        &self.space
    }

    /// Flat positions, `dim` coordinates per particle, in `[0, L)^d`.
    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn position(&self, i: usize) -> &[f64] {
        let d = self.space.dim();
        &self.positions[i * d..(i + 1) * d]
    }

    /// Cached competition rates `w_i`.
    pub fn competition_rates(&self) -> &[f64] {
        &self.w
    }

    /// Cached `W = Σ w_i`.
    pub fn total_competition(&self) -> f64 {
        self.total_w
    }

    /// Indices of the cells adjacent (periodically) to `cell`, including itself.
    fn neighbor_cells(&self, cell: usize, out: &mut Vec<usize>) {
        out.clear();
        let d = self.space.dim();
        let nc = self.cells_per_axis;
        if nc < 3 {
            out.extend(0..self.cells.len());
            return;
        }
        let mut idx = [0usize; 3];
        let mut rem = cell;
        for c in idx.iter_mut().take(d) {
            *c = rem % nc;
            rem /= nc;
        }
        for offset in 0..3usize.pow(d as u32) {
            let mut o = offset;
            let mut flat = 0;
            let mut stride = 1;
            for &c in idx.iter().take(d) {
                let shift = (o % 3) as isize - 1;
                o /= 3;
                let v = (c as isize + shift).rem_euclid(nc as isize) as usize;
                flat += v * stride;
                stride *= nc;
            }
            out.push(flat);
        }
    }

    fn cell_index(&self, x: &[f64]) -> usize {
        let nc = self.cells_per_axis;
        let mut flat = 0;
        let mut stride = 1;
        for &c in x {
            let k = ((c / self.cell_side) as usize).min(nc - 1);
            flat += k * stride;
            stride *= nc;
        }
        flat
    }

    /// `a⁻_L` between a point and particle `j`.
    #[inline]
    fn pair_kernel(&self, x: &[f64], j: usize) -> f64 {
        let l = self.space.length();
        let mut u = [0.0; 3];
        let d = self.space.dim();
        for (k, (a, b)) in x.iter().zip(self.position(j)).enumerate() {
            let mut diff = a - b;
            diff -= l * (diff / l).round();
            u[k] = diff;
        }
        self.a_minus.periodic_density(&u[..d], l)
    }

    /// Sum of `a⁻_L(x − x_j)` over particles `j ≠ skip` found through the cell
    /// list, calling `visit(j, a)` for each nonzero contribution.
    fn scan_neighbors(&self, x: &[f64], skip: Option<usize>, mut visit: impl FnMut(usize, f64)) {
        let mut cells = Vec::with_capacity(27);
        self.neighbor_cells(self.cell_index(x), &mut cells);
        for &c in &cells {
            for &j in &self.cells[c] {
                if Some(j) == skip {
                    continue;
                }
                let a = self.pair_kernel(x, j);
                if a != 0.0 {
                    visit(j, a);
                }
            }
        }
    }

    fn insert_unrated(&mut self, x: &[f64]) {
        let i = self.w.len();
        let cell = self.cell_index(x);
        self.positions.extend_from_slice(x);
        self.cell_of.push(cell);
        self.slot_of.push(self.cells[cell].len());
        self.cells[cell].push(i);
        self.w.push(0.0);
    }

    /// Recomputes every `w_i`, `W` and the rate tree from scratch and returns
    /// the relative discrepancy of the previously cached `W`.
    pub fn recompute(&mut self) -> f64 {
        let previous = self.total_w;
        let mut w = vec![0.0; self.len()];
        if self.kappa_minus != 0.0 {
            for (i, wi) in w.iter_mut().enumerate() {
                let x: Vec<f64> = self.position(i).to_vec();
                let mut sum = 0.0;
                self.scan_neighbors(&x, Some(i), |_, a| sum += a);
                *wi = self.kappa_minus * sum;
            }
        }
        self.total_w = w.iter().sum();
        let weights: Vec<f64> = w.iter().map(|wi| self.m + wi).collect();
        self.tree = RateTree::build(&weights);
        self.w = w;
        (previous - self.total_w).abs() / self.total_w.max(1.0)
    }

    /// `w_i` by an all-pairs sum (no cell list), for cross-checking.
    pub fn brute_force_rates(&self) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let x = self.position(i);
                let s: f64 = (0..n).filter(|&j| j != i).map(|j| self.pair_kernel(x, j)).sum();
                self.kappa_minus * s
            })
            .collect()
    }

    fn add_particle(&mut self, x: &[f64]) {
        let mut w_new = 0.0;
        if self.kappa_minus != 0.0 {
            let mut updates = Vec::new();
            self.scan_neighbors(x, None, |j, a| updates.push((j, a)));
            for (j, a) in updates {
                let delta = self.kappa_minus * a;
                self.w[j] += delta;
                self.tree.set(j, self.m + self.w[j]);
                w_new += delta;
            }
        }
        self.insert_unrated(x);
        let i = self.len() - 1;
        self.w[i] = w_new;
        self.tree.push(self.m + w_new);
        self.total_w += 2.0 * w_new;
    }

    fn remove_particle(&mut self, i: usize) {
        let d = self.space.dim();
        if self.kappa_minus != 0.0 {
            let x: Vec<f64> = self.position(i).to_vec();
            let mut updates = Vec::new();
            self.scan_neighbors(&x, Some(i), |j, a| updates.push((j, a)));
            for (j, a) in updates {
                self.w[j] = (self.w[j] - self.kappa_minus * a).max(0.0);
                self.tree.set(j, self.m + self.w[j]);
            }
            self.total_w = (self.total_w - 2.0 * self.w[i]).max(0.0);
        }
        // detach i from its cell
        let cell = self.cell_of[i];
        let slot = self.slot_of[i];
        self.cells[cell].swap_remove(slot);
        if let Some(&moved) = self.cells[cell].get(slot) {
            self.slot_of[moved] = slot;
        }
        // move the last particle into slot i
        let last = self.len() - 1;
        if i != last {
            let (lc, ls) = (self.cell_of[last], self.slot_of[last]);
            self.cells[lc][ls] = i;
            self.cell_of[i] = lc;
            self.slot_of[i] = ls;
            self.positions.copy_within(last * d..(last + 1) * d, i * d);
            self.w[i] = self.w[last];
            self.tree.set(i, self.m + self.w[i]);
        }
        self.positions.truncate(last * d);
        self.cell_of.pop();
        self.slot_of.pop();
        self.w.pop();
        self.tree.pop();
        if self.is_empty() {
            self.total_w = 0.0;
        }
    }

    fn pick_death<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = self.tree.total();
        loop {
            let u = rng.random::<f64>() * total;
            let i = self.tree.find(u);
            if i < self.len() && self.tree.values[i] > 0.0 {
                return i;
            }
        }
    }
}

/// Poisson(zL^d) many i.i.d. uniform positions on the torus.
pub fn sample_poisson_positions<R: Rng + ?Sized>(z: f64, space: &SpaceSpec, rng: &mut R) -> Result<Vec<f64>, SimError> {
    if !(z.is_finite() && z >= 0.0) {
        return Err(SimError::BadIntensity(z));
    }
    let mean = z * space.volume();
    let count = if mean > 0.0 {
        Poisson::new(mean).map_err(|_| SimError::BadIntensity(z))?.sample(rng) as usize
    } else {
        0
    };
    let l = space.length();
    Ok((0..count * space.dim()).map(|_| rng.random_range(0.0..l)).collect())
}

/// Poisson point field of intensity `z` with caches built for `params`.
pub fn sample_poisson_initial<R: Rng + ?Sized>(
    z: f64,
    params: &ModelParams,
    rng: &mut R,
) -> Result<Configuration, SimError> {
    let positions = sample_poisson_positions(z, &params.space, rng)?;
    Configuration::new(params, positions)
}

/// `(κ⁺N, mN + W)`.
pub fn total_rate(params: &ModelParams, config: &Configuration) -> (f64, f64) {
    let n = config.len() as f64;
    (params.kappa_plus * n, params.m * n + config.total_competition())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Birth,
    Death,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Event {
    pub kind: EventKind,
    pub dt: f64,
    /// Index of the dying particle, or of the newborn after insertion.
    pub subject: usize,
    /// Parent index for births.
    pub parent: Option<usize>,
    /// Offspring position for births.
    pub position: Option<Vec<f64>>,
}

/// Draws and applies one event.
pub fn step<R: Rng + ?Sized>(params: &ModelParams, config: &mut Configuration, rng: &mut R) -> Result<Event, SimError> {
    let (birth, death) = total_rate(params, config);
    let total = birth + death;
    if config.is_empty() || total <= 0.0 {
        return Err(SimError::Absorbing);
    }
    let e: f64 = Exp1.sample(rng);
    Ok(apply_event(params, config, birth, total, e / total, rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SnapshotMode {
    Positions,
    Count,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Snapshot {
    Positions(Vec<f64>),
    Count(usize),
}

impl Snapshot {
    pub fn count(&self, dim: usize) -> usize {
        match self {
            Snapshot::Positions(p) => p.len() / dim,
            Snapshot::Count(n) => *n,
        }
    }

    pub fn positions(&self) -> Option<&[f64]> {
        match self {
            Snapshot::Positions(p) => Some(p),
            Snapshot::Count(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub event_cap: u64,
    pub snapshots: SnapshotMode,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            event_cap: DEFAULT_EVENT_CAP,
            snapshots: SnapshotMode::Positions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub record_times: Vec<f64>,
    /// State at the last event time not after each record time.
    pub snapshots: Vec<Snapshot>,
    pub seed: Option<u64>,
    pub events: u64,
    /// Time of the last applied event.
    pub last_event_time: f64,
    /// Largest relative cache drift seen at periodic recomputations.
    pub max_cache_drift: f64,
}

fn snapshot(config: &Configuration, mode: SnapshotMode) -> Snapshot {
    match mode {
        SnapshotMode::Positions => Snapshot::Positions(config.positions().to_vec()),
        SnapshotMode::Count => Snapshot::Count(config.len()),
    }
}

/// Runs until `t_end` or extinction, recording càdlàg snapshots.
pub fn run<R: Rng + ?Sized>(
    params: &ModelParams,
    mut config: Configuration,
    t_end: f64,
    record_times: &[f64],
    options: RunOptions,
    rng: &mut R,
) -> Result<Trajectory, SimError> {
    let valid =
        record_times.windows(2).all(|w| w[0] < w[1]) && record_times.iter().all(|&t| (0.0..=t_end).contains(&t));
    if !valid {
        return Err(SimError::BadRecordTimes { t_end });
    }
    let mut snapshots = Vec::with_capacity(record_times.len());
    let mut t = 0.0;
    let mut events = 0u64;
    let mut max_drift: f64 = 0.0;
    loop {
        let (birth, death) = total_rate(params, &config);
        let total = birth + death;
        if config.is_empty() || total <= 0.0 {
            break;
        }
        let e: f64 = Exp1.sample(rng);
        let t_next = t + e / total;
        while snapshots.len() < record_times.len() && record_times[snapshots.len()] < t_next {
            snapshots.push(snapshot(&config, options.snapshots));
        }
        if t_next > t_end {
            break;
        }
        if events >= options.event_cap {
            return Err(SimError::EventCap {
                cap: options.event_cap,
                time: t,
                count: config.len(),
            });
        }
        apply_event(params, &mut config, birth, total, t_next - t, rng);
        t = t_next;
        events += 1;
        if events.is_multiple_of(RECOMPUTE_INTERVAL) {
            let drift = config.recompute();
            max_drift = max_drift.max(drift);
            if drift > CACHE_TOLERANCE {
                return Err(SimError::CacheDrift { relative: drift });
            }
        }
    }
    while snapshots.len() < record_times.len() {
        snapshots.push(snapshot(&config, options.snapshots));
    }
    Ok(Trajectory {
        record_times: record_times.to_vec(),
        snapshots,
        seed: None,
        events,
        last_event_time: t,
        max_cache_drift: max_drift,
    })
}

/// The event half of [`step`], with the waiting time already drawn.
fn apply_event<R: Rng + ?Sized>(
    params: &ModelParams,
    config: &mut Configuration,
    birth: f64,
    total: f64,
    dt: f64,
    rng: &mut R,
) -> Event {
    if rng.random::<f64>() * total < birth {
        let parent = rng.random_range(0..config.len());
        let d = params.space.dim();
        let mut x = [0.0; 3];
        params.a_plus.sample_into(rng, &mut x[..d]);
        for (c, p) in x.iter_mut().zip(config.position(parent)) {
            *c += p;
        }
        params.space.wrap(&mut x[..d]);
        config.add_particle(&x[..d]);
        Event {
            kind: EventKind::Birth,
            dt,
            subject: config.len() - 1,
            parent: Some(parent),
            position: Some(x[..d].to_vec()),
        }
    } else {
        let i = config.pick_death(rng);
        config.remove_particle(i);
        Event {
            kind: EventKind::Death,
            dt,
            subject: i,
            parent: None,
            position: None,
        }
    }
}

/// One replicate: Poisson(z) start and run, all from the stream `seed`.
pub fn run_replicate(
    params: &ModelParams,
    z: f64,
    t_end: f64,
    record_times: &[f64],
    options: RunOptions,
    seed: u64,
) -> Result<Trajectory, SimError> {
    let mut rng = stream(seed);
    let init = sample_poisson_initial(z, params, &mut rng)?;
    let mut traj = run(params, init, t_end, record_times, options, &mut rng)?;
    traj.seed = Some(seed);
    Ok(traj)
}

/// Replicates `0..replicates` in parallel, returned in index order; replicate
/// `i` uses seed `master ^ splitmix64(i)`.
pub fn run_replicates(
    params: &ModelParams,
    z: f64,
    t_end: f64,
    record_times: &[f64],
    options: RunOptions,
    master_seed: u64,
    replicates: usize,
) -> Result<Vec<Trajectory>, SimError> {
    (0..replicates)
        .into_par_iter()
        .map(|i| {
            run_replicate(
                params,
                z,
                t_end,
                record_times,
                options,
                replicate_seed(master_seed, i as u64),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Kernel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(m: f64, kp: f64, km: f64, l: f64, dim: usize) -> ModelParams {
        let g = Kernel::gaussian(1.0, dim).unwrap();
        ModelParams::new(m, kp, km, g.clone(), g, SpaceSpec::new(dim, l).unwrap()).unwrap()
    }

    #[test]
    fn fenwick_tree_sampling_matches_weights() {
        let weights = [0.5, 0.0, 2.0, 1.5, 0.0, 3.0];
        let mut tree = RateTree::build(&weights);
        assert!((tree.total() - 7.0).abs() < 1e-15);
        assert_eq!(tree.find(0.0), 0);
        assert_eq!(tree.find(0.49), 0);
        assert_eq!(tree.find(0.5), 2);
        assert_eq!(tree.find(2.6), 3);
        assert_eq!(tree.find(4.0), 5);
        tree.set(1, 1.0);
        assert_eq!(tree.find(0.7), 1);
        for _ in 0..40 {
            tree.push(0.25);
        }
        assert!((tree.total() - 18.0).abs() < 1e-12);
        for _ in 0..40 {
            tree.pop();
        }
        assert!((tree.total() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn poisson_mean_count() {
        let space = SpaceSpec::new(1, 100.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let counts: Vec<f64> = (0..1000)
            .map(|_| sample_poisson_positions(0.5, &space, &mut rng).unwrap().len() as f64)
            .collect();
        let mean = counts.iter().sum::<f64>() / 1000.0;
        // Poisson variance equals the mean
        assert!((mean - 50.0).abs() < 4.0 * (50.0f64 / 1000.0).sqrt(), "{mean}");
        let tiny = SpaceSpec::new(1, 1.0).unwrap();
        assert!(sample_poisson_positions(1e-9, &tiny, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn rates_for_small_configurations() {
        let p = params(0.7, 1.3, 1.0, 20.0, 1);
        let empty = Configuration::empty(&p);
        assert_eq!(total_rate(&p, &empty), (0.0, 0.0));
        let one = Configuration::new(&p, vec![3.0]).unwrap();
        assert_eq!(total_rate(&p, &one), (1.3, 0.7));
        let r: f64 = 1.7;
        let two = Configuration::new(&p, vec![19.5, (19.5 + r) % 20.0]).unwrap();
        let a = p.a_minus.density_at(r);
        let (b, d) = total_rate(&p, &two);
        assert_eq!(b, 2.6);
        assert!((d - (1.4 + 2.0 * a)).abs() < 1e-15);
    }

    #[test]
    fn cell_list_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for dim in 1..=3 {
            let l = [100.0, 30.0, 12.0][dim - 1];
            let p = params(1.0, 1.0, 2.0, l, dim);
            let n = 1000;
            let pos: Vec<f64> = (0..n * dim).map(|_| rng.random_range(0.0..l)).collect();
            let cfg = Configuration::new(&p, pos).unwrap();
            let brute = cfg.brute_force_rates();
            for (a, b) in cfg.competition_rates().iter().zip(&brute) {
                assert!((a - b).abs() <= 1e-10 * b.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn incremental_caches_track_recomputation() {
        let p = params(1.0, 1.0, 0.5, 40.0, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cfg = sample_poisson_initial(0.5, &p, &mut rng).unwrap();
        for _ in 0..5000 {
            if cfg.is_empty() {
                break;
            }
            step(&p, &mut cfg, &mut rng).unwrap();
            assert!(cfg.competition_rates().iter().all(|&w| w >= 0.0));
        }
        let brute = cfg.brute_force_rates();
        for (a, b) in cfg.competition_rates().iter().zip(&brute) {
            assert!((a - b).abs() <= 1e-9 * b.max(1.0));
        }
        let drift = cfg.recompute();
        assert!(drift <= CACHE_TOLERANCE, "{drift}");
        // every particle is reachable through its bucket
        for i in 0..cfg.len() {
            assert_eq!(cfg.cells[cfg.cell_of[i]][cfg.slot_of[i]], i);
            assert_eq!(cfg.cell_of[i], cfg.cell_index(cfg.position(i)));
        }
    }

    #[test]
    fn empty_configuration_is_absorbing() {
        let p = params(1.0, 1.0, 1.0, 20.0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cfg = Configuration::empty(&p);
        assert_eq!(step(&p, &mut cfg, &mut rng), Err(SimError::Absorbing));
        let traj = run(&p, cfg, 5.0, &[0.0, 1.0, 5.0], RunOptions::default(), &mut rng).unwrap();
        assert_eq!(traj.events, 0);
        assert!(traj.snapshots.iter().all(|s| s.count(1) == 0));
    }

    #[test]
    fn same_seed_same_trajectory() {
        let p = params(1.0, 0.9, 0.3, 50.0, 1);
        let times = [0.0, 0.5, 1.0, 2.0];
        let a = run_replicate(&p, 0.5, 2.0, &times, RunOptions::default(), 99).unwrap();
        let b = run_replicate(&p, 0.5, 2.0, &times, RunOptions::default(), 99).unwrap();
        assert_eq!(a, b);
        assert!(a.events > 0);
    }

    #[test]
    fn pure_death_survival() {
        let p = params(0.7, 0.0, 0.0, 50.0, 1);
        let t = 1.0;
        let survivors: Vec<f64> = (0..500u64)
            .map(|i| {
                let mut rng = stream(replicate_seed(5, i));
                let pos: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..50.0)).collect();
                let cfg = Configuration::new(&p, pos).unwrap();
                let traj = run(&p, cfg, t, &[t], RunOptions::default(), &mut rng).unwrap();
                traj.snapshots[0].count(1) as f64
            })
            .collect();
        let mean = survivors.iter().sum::<f64>() / 500.0;
        let var = survivors.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / 499.0;
        let expected = 100.0 * (-0.7f64 * t).exp();
        assert!(
            (mean - expected).abs() < 4.0 * (var / 500.0).sqrt(),
            "{mean} vs {expected}"
        );
    }

    #[test]
    fn crowded_particle_dies_more_often() {
        // two overlapping particles and one isolated one, strong competition
        let p = params(0.1, 0.0, 50.0, 60.0, 1);
        let base = Configuration::new(&p, vec![10.0, 10.2, 40.0]).unwrap();
        let weights: Vec<f64> = base.competition_rates().iter().map(|w| 0.1 + w).collect();
        let total: f64 = weights.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let trials = 20_000;
        let mut counts = [0usize; 3];
        for _ in 0..trials {
            let mut cfg = base.clone();
            let ev = step(&p, &mut cfg, &mut rng).unwrap();
            counts[ev.subject] += 1;
        }
        for i in 0..3 {
            let prob = weights[i] / total;
            let expected = trials as f64 * prob;
            let se = (trials as f64 * prob * (1.0 - prob)).sqrt().max(1.0);
            assert!((counts[i] as f64 - expected).abs() < 4.0 * se, "{i}: {counts:?}");
        }
        assert!(counts[0] > 10 * counts[2]);
    }

    #[test]
    fn event_cap_reports_explosion() {
        let p = params(0.0, 2.0, 0.0, 50.0, 1);
        let opts = RunOptions {
            event_cap: 1000,
            snapshots: SnapshotMode::Count,
        };
        let err = run_replicate(&p, 1.0, 100.0, &[100.0], opts, 7).unwrap_err();
        assert!(matches!(err, SimError::EventCap { cap: 1000, .. }));
    }

    #[test]
    fn record_times_are_validated() {
        let p = params(1.0, 1.0, 0.0, 50.0, 1);
        let opts = RunOptions::default();
        assert!(run_replicate(&p, 0.5, 1.0, &[0.5, 0.2], opts, 1).is_err());
        assert!(run_replicate(&p, 0.5, 1.0, &[2.0], opts, 1).is_err());
    }
}
