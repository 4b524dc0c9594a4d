//! Replicate-based estimates of the first and second correlation functions.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::kernels::SpaceSpec;
use crate::simulator::Trajectory;
use crate::special::unit_ball_volume;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("no replicates supplied")]
    NoReplicates,
    #[error("replicates do not share record times")]
    MismatchedTimes,
    #[error("largest bin edge {r_max} exceeds half the box side {half}")]
    BinsBeyondHalfBox { r_max: f64, half: f64 },
    #[error("bin edges must be increasing and start at a nonnegative radius")]
    BadBins,
    #[error("snapshots must carry positions for pair statistics")]
    MissingPositions,
    #[error("need at least two record times inside the fit window")]
    TooFewFitPoints,
    #[error("mean density vanishes inside the fit window")]
    ExtinctInWindow,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityEstimate {
    pub times: Vec<f64>,
    /// Mean of `N/L^d` across replicates (1/volume).
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub replicates: usize,
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn check_shared_times(trajectories: &[Trajectory]) -> Result<&[f64], EstimatorError> {
    let first = trajectories.first().ok_or(EstimatorError::NoReplicates)?;
    if trajectories
        .iter()
        .any(|t| t.record_times != first.record_times || t.snapshots.len() != first.record_times.len())
    {
        return Err(EstimatorError::MismatchedTimes);
    }
    Ok(&first.record_times)
}

/// Per record time, mean and standard error of the density across replicates.
pub fn density_estimate(trajectories: &[Trajectory], space: &SpaceSpec) -> Result<DensityEstimate, EstimatorError> {
    let times = check_shared_times(trajectories)?;
    let vol = space.volume();
    let d = space.dim();
    let mut mean = Vec::with_capacity(times.len());
    let mut stderr = Vec::with_capacity(times.len());
    for k in 0..times.len() {
        let values: Vec<f64> = trajectories
            .iter()
            .map(|t| t.snapshots[k].count(d) as f64 / vol)
            .collect();
        let (m, s) = mean_and_stderr(&values);
        mean.push(m);
        stderr.push(s);
    }
    Ok(DensityEstimate {
        times: times.to_vec(),
        mean,
        stderr,
        replicates: trajectories.len(),
    })
}

/// Least-squares slope of `ln(mean density)` against time over record times
/// in `[t_lo, t_hi]`, with a leave-one-replicate-out jackknife standard error.
pub fn log_density_slope(
    trajectories: &[Trajectory],
    space: &SpaceSpec,
    t_lo: f64,
    t_hi: f64,
) -> Result<(f64, f64), EstimatorError> {
    let times = check_shared_times(trajectories)?;
    let idx: Vec<usize> = (0..times.len())
        .filter(|&k| times[k] >= t_lo && times[k] <= t_hi)
        .collect();
    if idx.len() < 2 {
        return Err(EstimatorError::TooFewFitPoints);
    }
    let d = space.dim();
    let r = trajectories.len();
    // counts[k][i]: particle count of replicate i at fit time k
    let counts: Vec<Vec<f64>> = idx
        .iter()
        .map(|&k| trajectories.iter().map(|t| t.snapshots[k].count(d) as f64).collect())
        .collect();
    let ts: Vec<f64> = idx.iter().map(|&k| times[k]).collect();
    let totals: Vec<f64> = counts.iter().map(|c| c.iter().sum()).collect();
    let fit = |sums: &[f64], reps: f64| -> Result<f64, EstimatorError> {
        let ys: Vec<f64> = sums
            .iter()
            .map(|s| {
                if *s > 0.0 {
                    Ok((s / reps).ln())
                } else {
                    Err(EstimatorError::ExtinctInWindow)
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(ols_slope(&ts, &ys))
    };
    let slope = fit(&totals, r as f64)?;
    if r < 2 {
        return Ok((slope, 0.0));
    }
    let mut loo = Vec::with_capacity(r);
    for i in 0..r {
        let sums: Vec<f64> = totals.iter().zip(&counts).map(|(t, c)| t - c[i]).collect();
        loo.push(fit(&sums, (r - 1) as f64)?);
    }
    let loo_mean = loo.iter().sum::<f64>() / r as f64;
    let var = (r as f64 - 1.0) / r as f64 * loo.iter().map(|s| (s - loo_mean).powi(2)).sum::<f64>();
    Ok((slope, var.sqrt()))
}

fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Radial bins `[r_k, r_{k+1})` with exact d-dimensional shell volumes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadialBins {
    edges: Vec<f64>,
    dim: usize,
}

impl RadialBins {
    pub fn new(edges: Vec<f64>, space: &SpaceSpec) -> Result<Self, EstimatorError> {
        if edges.len() < 2 || edges[0] < 0.0 || edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(EstimatorError::BadBins);
        }
        let half = space.length() / 2.0;
        let r_max = *edges.last().unwrap();
        if r_max > half {
            return Err(EstimatorError::BinsBeyondHalfBox { r_max, half });
        }
        Ok(Self {
            edges,
            dim: space.dim(),
        })
    }

    /// `count` equal bins on `(0, r_max]`.
    pub fn uniform(count: usize, r_max: f64, space: &SpaceSpec) -> Result<Self, EstimatorError> {
        if count == 0 {
            return Err(EstimatorError::BadBins);
        }
        let edges = (0..=count).map(|k| r_max * k as f64 / count as f64).collect();
        Self::new(edges, space)
    }

    /// The default: 50 bins on `(0, min(L/2, 6σ⁺)]`.
    pub fn default_for(space: &SpaceSpec, sigma_plus: f64) -> Result<Self, EstimatorError> {
        Self::uniform(50, (space.length() / 2.0).min(6.0 * sigma_plus), space)
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Volume of `{u : r_lo ≤ |u| < r_hi}` in R^d (in d = 1 both signs).
    pub fn shell_volume(&self, k: usize) -> f64 {
        let (lo, hi) = (self.edges[k], self.edges[k + 1]);
        let d = self.dim as i32;
        unit_ball_volume(self.dim) * (hi.powi(d) - lo.powi(d))
    }

    fn locate(&self, r: f64) -> Option<usize> {
        if r < self.edges[0] || r >= *self.edges.last().unwrap() {
            return None;
        }
        // partition_point gives the first edge above r
        Some(self.edges.partition_point(|&e| e <= r) - 1)
    }
}

/// Ordered-pair counts per bin for one snapshot, plus ordered pairs whose
/// torus distance falls outside the binned range.
pub fn pair_counts(positions: &[f64], space: &SpaceSpec, bins: &RadialBins) -> (Vec<u64>, u64) {
    let d = space.dim();
    let n = positions.len() / d;
    let mut counts = vec![0u64; bins.len()];
    let mut outside = 0u64;
    for i in 0..n {
        let xi = &positions[i * d..(i + 1) * d];
        for j in (i + 1)..n {
            let r = space.distance_sq(xi, &positions[j * d..(j + 1) * d]).sqrt();
            match bins.locate(r) {
                Some(k) => counts[k] += 2,
                None => outside += 2,
            }
        }
    }
    (counts, outside)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairCorrelationEstimate {
    pub edges: Vec<f64>,
    /// Estimate of `k^{(2)}` per bin (1/volume²).
    pub q_mean: Vec<f64>,
    pub q_stderr: Vec<f64>,
    pub replicates: usize,
    /// Mean number of ordered pairs per snapshot beyond the binned range.
    pub mean_pairs_outside: f64,
}

/// `q̂(bin) = (ordered pairs in bin) / (L^d · shell volume)` per snapshot,
/// averaged over snapshots with standard error across them.
pub fn pair_correlation_estimate(
    snapshots: &[&[f64]],
    space: &SpaceSpec,
    bins: &RadialBins,
) -> Result<PairCorrelationEstimate, EstimatorError> {
    if snapshots.is_empty() {
        return Err(EstimatorError::NoReplicates);
    }
    let vol = space.volume();
    let per_snapshot: Vec<(Vec<u64>, u64)> = snapshots.par_iter().map(|p| pair_counts(p, space, bins)).collect();
    let mut q_mean = Vec::with_capacity(bins.len());
    let mut q_stderr = Vec::with_capacity(bins.len());
    for k in 0..bins.len() {
        let norm = vol * bins.shell_volume(k);
        let values: Vec<f64> = per_snapshot.iter().map(|(c, _)| c[k] as f64 / norm).collect();
        let (m, s) = mean_and_stderr(&values);
        q_mean.push(m);
        q_stderr.push(s);
    }
    let outside = per_snapshot.iter().map(|(_, o)| *o as f64).sum::<f64>() / snapshots.len() as f64;
    Ok(PairCorrelationEstimate {
        edges: bins.edges().to_vec(),
        q_mean,
        q_stderr,
        replicates: snapshots.len(),
        mean_pairs_outside: outside,
    })
}

/// Pair-correlation estimate at record index `k` across trajectories.
pub fn pair_correlation_at(
    trajectories: &[Trajectory],
    k: usize,
    space: &SpaceSpec,
    bins: &RadialBins,
) -> Result<PairCorrelationEstimate, EstimatorError> {
    check_shared_times(trajectories)?;
    let snaps: Vec<&[f64]> = trajectories
        .iter()
        .map(|t| t.snapshots[k].positions().ok_or(EstimatorError::MissingPositions))
        .collect::<Result<_, _>>()?;
    pair_correlation_estimate(&snaps, space, bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{sample_poisson_positions, Snapshot};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn traj(times: &[f64], counts: &[usize]) -> Trajectory {
        Trajectory {
            record_times: times.to_vec(),
            snapshots: counts.iter().map(|&c| Snapshot::Count(c)).collect(),
            seed: None,
            events: 0,
            last_event_time: 0.0,
            max_cache_drift: 0.0,
        }
    }

    #[test]
    fn empty_trajectories_have_zero_density() {
        let space = SpaceSpec::new(1, 10.0).unwrap();
        let trajs = vec![traj(&[0.0, 1.0], &[0, 0]); 5];
        let est = density_estimate(&trajs, &space).unwrap();
        assert_eq!(est.mean, vec![0.0, 0.0]);
        assert_eq!(est.stderr, vec![0.0, 0.0]);
        assert_eq!(density_estimate(&[], &space), Err(EstimatorError::NoReplicates));
    }

    #[test]
    fn poisson_snapshot_density() {
        let space = SpaceSpec::new(2, 20.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let trajs: Vec<Trajectory> = (0..200)
            .map(|_| {
                let n = sample_poisson_positions(0.3, &space, &mut rng).unwrap().len() / 2;
                traj(&[0.0], &[n])
            })
            .collect();
        let est = density_estimate(&trajs, &space).unwrap();
        assert!((est.mean[0] - 0.3).abs() <= 3.0 * est.stderr[0]);
    }

    #[test]
    fn exponential_counts_give_exact_slope() {
        let space = SpaceSpec::new(1, 10.0).unwrap();
        let times = [0.0, 1.0, 2.0, 3.0];
        let trajs: Vec<Trajectory> = (0..4).map(|_| traj(&times, &[100, 200, 400, 800])).collect();
        let (slope, se) = log_density_slope(&trajs, &space, 0.0, 3.0).unwrap();
        assert!((slope - 2f64.ln()).abs() < 1e-12);
        assert!(se < 1e-12);
    }

    #[test]
    fn two_particles_fill_one_bin() {
        let space = SpaceSpec::new(1, 10.0).unwrap();
        let bins = RadialBins::uniform(10, 5.0, &space).unwrap();
        // torus distance 0.3 + 0.45 = 0.75 across the seam
        let p = [9.7, 0.45];
        let est = pair_correlation_estimate(&[&p], &space, &bins).unwrap();
        let k = 1; // [0.5, 1.0)
        for (i, q) in est.q_mean.iter().enumerate() {
            if i == k {
                assert!((q - 2.0 / (10.0 * bins.shell_volume(k))).abs() < 1e-15);
            } else {
                assert_eq!(*q, 0.0);
            }
        }
        let empty: [f64; 0] = [];
        let est = pair_correlation_estimate(&[&empty], &space, &bins).unwrap();
        assert!(est.q_mean.iter().all(|&q| q == 0.0));
    }

    #[test]
    fn bins_past_half_box_are_rejected() {
        let space = SpaceSpec::new(1, 10.0).unwrap();
        assert!(matches!(
            RadialBins::uniform(10, 5.5, &space),
            Err(EstimatorError::BinsBeyondHalfBox { .. })
        ));
    }

    #[test]
    fn shell_volumes() {
        for (dim, expected) in [(1, 2.0 * 0.5), (2, std::f64::consts::PI * (1.0 - 0.25))] {
            let space = SpaceSpec::new(dim, 10.0).unwrap();
            let bins = RadialBins::new(vec![0.5, 1.0], &space).unwrap();
            assert!((bins.shell_volume(0) - expected).abs() < 1e-15);
        }
        let space = SpaceSpec::new(3, 10.0).unwrap();
        let bins = RadialBins::new(vec![1.0, 2.0], &space).unwrap();
        assert!((bins.shell_volume(0) - 4.0 / 3.0 * std::f64::consts::PI * 7.0).abs() < 1e-12);
    }

    #[test]
    fn pair_counts_are_conserved_and_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for dim in 1..=3 {
            let space = SpaceSpec::new(dim, 8.0).unwrap();
            let bins = RadialBins::uniform(17, 4.0, &space).unwrap();
            let pos = sample_poisson_positions(0.5, &space, &mut rng).unwrap();
            let n = (pos.len() / dim) as u64;
            let (counts, outside) = pair_counts(&pos, &space, &bins);
            assert_eq!(counts.iter().sum::<u64>() + outside, n * (n - 1));
            let shift: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..8.0)).collect();
            let moved: Vec<f64> = pos
                .chunks_exact(dim)
                .flat_map(|x| {
                    let mut y: Vec<f64> = x.iter().zip(&shift).map(|(a, b)| a + b).collect();
                    space.wrap(&mut y);
                    y
                })
                .collect();
            let (counts2, outside2) = pair_counts(&moved, &space, &bins);
            // shifted coordinates are rounded, so compare bin totals with a
            // tolerance of pairs sitting on an edge
            let diff: u64 = counts.iter().zip(&counts2).map(|(a, b)| a.abs_diff(*b)).sum();
            assert!(diff <= 4, "{diff}");
            assert_eq!(
                outside + counts.iter().sum::<u64>(),
                outside2 + counts2.iter().sum::<u64>()
            );
        }
    }

    #[test]
    fn poisson_pair_correlation_is_flat() {
        let space = SpaceSpec::new(1, 100.0).unwrap();
        let bins = RadialBins::default_for(&space, 1.0).unwrap();
        let z = 0.5;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut outliers = 0;
        let repetitions = 20;
        for _ in 0..repetitions {
            let snaps: Vec<Vec<f64>> = (0..400)
                .map(|_| sample_poisson_positions(z, &space, &mut rng).unwrap())
                .collect();
            let refs: Vec<&[f64]> = snaps.iter().map(|s| s.as_slice()).collect();
            let est = pair_correlation_estimate(&refs, &space, &bins).unwrap();
            outliers += est
                .q_mean
                .iter()
                .zip(&est.q_stderr)
                .filter(|(q, s)| (*q - z * z).abs() > 3.0 * *s)
                .count();
        }
        let fraction = outliers as f64 / (50 * repetitions) as f64;
        assert!(fraction <= 0.02, "{fraction}");
    }
}
