//! Deterministic evolution of the first two correlation functions in the
//! translation-invariant case, and the analytic bounds they are checked against.
//!
//! A pair function `q(u)` lives on a periodic grid over the simulation box.
//! Convolutions with `a±` multiply by the analytic transform `â±(p_k)`, which
//! equals the Fourier coefficient of the periodized kernel exactly. The
//! pointwise source `a⁺(u)` is represented by the same coefficients, so every
//! solver sees one consistent band-limited kernel.

use std::f64::consts::PI;
use std::fmt;
use std::io::{self, Write};
use std::num::NonZeroUsize;
use std::sync::Arc;

use gauss_quad::GaussLegendre;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{Kernel, KernelFamily, ModelParams};
use crate::special::{factorial, unit_sphere_area};

/// Largest admissible gap between the discrete and analytic kernel transforms.
pub const ALIASING_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_K1_FLOOR: f64 = 1e-8;
pub const DEFAULT_DT: f64 = 1e-3;
pub const DEFAULT_GRID_POINTS: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MomentError {
    #[error("grid needs dimension 1 or 2, a power-of-two side N ≥ 4 and L > 0 (got d={dim}, N={n}, L={length})")]
    BadGrid { dim: usize, n: usize, length: f64 },
    #[error("grid (d={grid_dim}, L={grid_length}) does not match the model box (d={model_dim}, L={model_length})")]
    GridMismatch {
        grid_dim: usize,
        grid_length: f64,
        model_dim: usize,
        model_length: f64,
    },
    #[error("contact-model routine called with kappa_minus = {0}")]
    Competition(f64),
    #[error("grid too coarse: discrete transform of the kernel deviates from the analytic one by {error:.3e} > {tolerance:.0e}")]
    CoarseGrid { error: f64, tolerance: f64 },
    #[error("initial pair function has {got} values, grid has {expected}")]
    BadInitial { expected: usize, got: usize },
    #[error("initial pair function is not even (asymmetry {0:.3e})")]
    NotEven(f64),
    #[error("initial density must be finite and nonnegative, got {0}")]
    BadDensity(f64),
    #[error("time stepping needs t_end ≥ 0, dt > 0 dividing t_end and record_every ≥ 1 (t_end={t_end}, dt={dt})")]
    BadStepping { t_end: f64, dt: f64 },
    #[error("closure floor must be positive, got {0}")]
    BadFloor(f64),
    #[error("solution left the admissible set at t={}: k1={}, min q={}", .0.t, .0.k1, min_or_nan(&.0.q))]
    Blowup(Box<MomentState>),
    #[error("D-integral did not converge: successive refinements differ by {relative_change:.3e} (relative)")]
    DNotConverged { relative_change: f64 },
    #[error("radial bin averages are only implemented for d = 1")]
    BinsNeedOneDimension,
}

fn min_or_nan(q: &[f64]) -> f64 {
    q.iter()
        .fold(f64::INFINITY, |a, &b| if b.is_nan() { f64::NAN } else { a.min(b) })
}

/// Uniform grid on the torus `[0, L)^d`, `d ∈ {1, 2}`, row-major storage.
///
/// Forward transform `F_k = Σ_j f_j e^{-i p_k·x_j}`; the inverse carries the
/// `1/N^d` factor.
#[derive(Clone)]
pub struct PeriodicGrid {
    dim: usize,
    n: usize,
    length: f64,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for PeriodicGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PeriodicGrid")
            .field("dim", &self.dim)
            .field("n", &self.n)
            .field("length", &self.length)
            .finish()
    }
}

impl PeriodicGrid {
    pub fn new(dim: usize, n: usize, length: f64) -> Result<Self, MomentError> {
        if !(dim == 1 || dim == 2) || n < 4 || !n.is_power_of_two() || !(length.is_finite() && length > 0.0) {
            return Err(MomentError::BadGrid { dim, n, length });
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            dim,
            n,
            length,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        })
    }

    /// Grid over the model's box.
    pub fn for_model(params: &ModelParams, n: usize) -> Result<Self, MomentError> {
        Self::new(params.space.dim(), n, params.space.length())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Points per axis.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn spacing(&self) -> f64 {
        self.length / self.n as f64
    }

    /// Total number of grid points, `N^d`.
    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    fn signed(&self, k: usize) -> f64 {
        if k <= self.n / 2 {
            k as f64
        } else {
            k as f64 - self.n as f64
        }
    }

    fn axes(&self, idx: usize) -> [usize; 2] {
        if self.dim == 1 {
            [idx, 0]
        } else {
            [idx / self.n, idx % self.n]
        }
    }

    /// Minimal-image coordinates of grid point `idx` (first `d` entries).
    pub fn point(&self, idx: usize) -> [f64; 2] {
        let h = self.spacing();
        let a = self.axes(idx);
        let mut out = [0.0; 2];
        for (o, &k) in out.iter_mut().zip(&a).take(self.dim) {
            *o = self.signed(k) * h;
        }
        out
    }

    /// Angular frequency `p_k` of mode `idx` (first `d` entries).
    pub fn frequency(&self, idx: usize) -> [f64; 2] {
        let scale = 2.0 * PI / self.length;
        let a = self.axes(idx);
        let mut out = [0.0; 2];
        for (o, &k) in out.iter_mut().zip(&a).take(self.dim) {
            *o = self.signed(k) * scale;
        }
        out
    }

    /// Index of the grid point at `−u`.
    pub fn negated(&self, idx: usize) -> usize {
        let n = self.n;
        let a = self.axes(idx);
        if self.dim == 1 {
            (n - a[0]) % n
        } else {
            ((n - a[0]) % n) * n + (n - a[1]) % n
        }
    }

    fn transform(&self, data: &mut [Complex64], fft: &Arc<dyn Fft<f64>>) {
        let n = self.n;
        for row in data.chunks_exact_mut(n) {
            fft.process(row);
        }
        if self.dim == 2 {
            let mut column = vec![Complex64::new(0.0, 0.0); n];
            for c in 0..n {
                for (r, v) in column.iter_mut().enumerate() {
                    *v = data[r * n + c];
                }
                fft.process(&mut column);
                for (r, v) in column.iter().enumerate() {
                    data[r * n + c] = *v;
                }
            }
        }
    }

    pub fn forward(&self, f: &[f64]) -> Vec<Complex64> {
        assert_eq!(f.len(), self.len());
        let mut data: Vec<Complex64> = f.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.transform(&mut data, &self.forward);
        data
    }

    /// Inverse transform, keeping the real part.
    pub fn inverse(&self, spectrum: &[Complex64]) -> Vec<f64> {
        assert_eq!(spectrum.len(), self.len());
        let mut data = spectrum.to_vec();
        self.transform(&mut data, &self.inverse);
        let scale = 1.0 / self.len() as f64;
        data.iter().map(|c| c.re * scale).collect()
    }

    /// Periodized kernel density at every grid point.
    pub fn kernel_samples(&self, kernel: &Kernel) -> Vec<f64> {
        (0..self.len())
            .map(|i| kernel.periodic_density(&self.point(i)[..self.dim], self.length))
            .collect()
    }

    /// Analytic transform `â(p_k)` at every mode.
    pub fn kernel_symbol(&self, kernel: &Kernel) -> Vec<f64> {
        (0..self.len())
            .map(|i| kernel.fourier(&self.frequency(i)[..self.dim]))
            .collect()
    }

    /// Band-limited kernel whose discrete transform is `â(p_k)/h^d`.
    pub fn band_limited(&self, kernel: &Kernel) -> Vec<f64> {
        let inv_cell = 1.0 / self.cell_volume();
        let spectrum: Vec<Complex64> = self
            .kernel_symbol(kernel)
            .into_iter()
            .map(|a| Complex64::new(a * inv_cell, 0.0))
            .collect();
        self.inverse(&spectrum)
    }

    /// `max_k |h^d·DFT(samples)_k − â(p_k)|`.
    pub fn aliasing_error(&self, kernel: &Kernel) -> f64 {
        let cell = self.cell_volume();
        self.forward(&self.kernel_samples(kernel))
            .iter()
            .zip(self.kernel_symbol(kernel))
            .map(|(f, a)| (f * cell - a).norm())
            .fold(0.0, f64::max)
    }

    /// `∫ f` by the rectangle rule (exact for trigonometric polynomials).
    pub fn integrate(&self, f: &[f64]) -> f64 {
        self.cell_volume() * f.iter().sum::<f64>()
    }

    /// Convolution of a kernel with transform `symbol` and grid function `f`.
    pub fn convolve_symbol(&self, symbol: &[f64], f: &[f64]) -> Vec<f64> {
        let spectrum: Vec<Complex64> = self.forward(f).into_iter().zip(symbol).map(|(c, &s)| c * s).collect();
        self.inverse(&spectrum)
    }

    /// `(f ∗ g)(u) = ∫ f(u − v) g(v) dv` for two grid functions.
    pub fn convolve(&self, f: &[f64], g: &[f64]) -> Vec<f64> {
        let cell = self.cell_volume();
        let spectrum: Vec<Complex64> = self
            .forward(f)
            .into_iter()
            .zip(self.forward(g))
            .map(|(a, b)| a * b * cell)
            .collect();
        self.inverse(&spectrum)
    }

    /// `max_u |f(u) − f(−u)|`.
    pub fn asymmetry(&self, f: &[f64]) -> f64 {
        (0..self.len())
            .map(|i| (f[i] - f[self.negated(i)]).abs())
            .fold(0.0, f64::max)
    }

    /// `(r, f)` along the first stored axis for `r = 0, h, …, L/2`.
    pub fn axis_profile(&self, f: &[f64]) -> Vec<(f64, f64)> {
        let h = self.spacing();
        (0..=self.n / 2).map(|i| (i as f64 * h, f[i])).collect()
    }

    /// Averages of the trigonometric interpolant of an even `f` over the
    /// shells `[r_k, r_{k+1})` (d = 1 only), matching the binned estimator.
    pub fn radial_bin_averages(&self, f: &[f64], edges: &[f64]) -> Result<Vec<f64>, MomentError> {
        if self.dim != 1 {
            return Err(MomentError::BinsNeedOneDimension);
        }
        let spectrum = self.forward(f);
        let inv_n = 1.0 / self.n as f64;
        Ok(edges
            .windows(2)
            .map(|w| {
                let (lo, hi) = (w[0], w[1]);
                spectrum
                    .iter()
                    .enumerate()
                    .map(|(k, c)| {
                        let p = self.frequency(k)[0];
                        let mean_cos = if p == 0.0 {
                            1.0
                        } else {
                            ((p * hi).sin() - (p * lo).sin()) / (p * (hi - lo))
                        };
                        c.re * mean_cos
                    })
                    .sum::<f64>()
                    * inv_n
            })
            .collect())
    }
}

/// Fixed-step time grid: `t_end/dt` steps, states kept every `record_every` steps
/// and at the final time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stepping {
    pub t_end: f64,
    pub dt: f64,
    pub record_every: usize,
}

impl Stepping {
    pub fn new(t_end: f64, dt: f64, record_every: usize) -> Result<Self, MomentError> {
        let bad = MomentError::BadStepping { t_end, dt };
        if !(t_end.is_finite() && t_end >= 0.0 && dt.is_finite() && dt > 0.0) || record_every == 0 {
            return Err(bad);
        }
        let steps = (t_end / dt).round();
        if (steps * dt - t_end).abs() > 1e-9 * t_end.max(1.0) {
            return Err(bad);
        }
        Ok(Self {
            t_end,
            dt,
            record_every,
        })
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    fn records(&self, step: usize) -> bool {
        step.is_multiple_of(self.record_every) || step == self.steps()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentState {
    pub t: f64,
    /// Density (1/volume).
    pub k1: f64,
    /// Pair function on the grid (1/volume²).
    pub q: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentTrajectory {
    pub states: Vec<MomentState>,
    pub dt: f64,
    /// `k1` after every step, starting at `t = 0`.
    pub k1_steps: Vec<f64>,
}

impl MomentTrajectory {
    pub fn last(&self) -> &MomentState {
        self.states.last().expect("trajectories hold the initial state")
    }

    pub fn k1_monotone_nonincreasing(&self) -> bool {
        self.k1_steps.windows(2).all(|w| w[1] <= w[0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClosureKind {
    Power1,
    Kirkwood,
}

/// Third-order closure. Below `k1_floor` the Kirkwood term is set to zero:
/// the population is treated as extinct instead of dividing by a vanishing density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClosureScheme {
    pub kind: ClosureKind,
    pub k1_floor: f64,
}

impl ClosureScheme {
    pub fn new(kind: ClosureKind, k1_floor: f64) -> Result<Self, MomentError> {
        if !(k1_floor.is_finite() && k1_floor > 0.0) {
            return Err(MomentError::BadFloor(k1_floor));
        }
        Ok(Self { kind, k1_floor })
    }

    pub fn power1() -> Self {
        Self {
            kind: ClosureKind::Power1,
            k1_floor: DEFAULT_K1_FLOOR,
        }
    }

    pub fn kirkwood() -> Self {
        Self {
            kind: ClosureKind::Kirkwood,
            k1_floor: DEFAULT_K1_FLOOR,
        }
    }
}

/// `k1(t) = k1(0)·e^{(κ⁺−m)t}` for the contact model.
pub fn contact_density(t: f64, k1_0: f64, params: &ModelParams) -> Result<f64, MomentError> {
    if params.kappa_minus != 0.0 {
        return Err(MomentError::Competition(params.kappa_minus));
    }
    Ok(k1_0 * ((params.kappa_plus - params.m) * t).exp())
}

fn check_inputs(params: &ModelParams, grid: &PeriodicGrid, k1_0: f64, q0: &[f64]) -> Result<(), MomentError> {
    let space = &params.space;
    if space.dim() != grid.dim() || (space.length() - grid.length()).abs() > 1e-12 * space.length() {
        return Err(MomentError::GridMismatch {
            grid_dim: grid.dim(),
            grid_length: grid.length(),
            model_dim: space.dim(),
            model_length: space.length(),
        });
    }
    if !(k1_0.is_finite() && k1_0 >= 0.0) {
        return Err(MomentError::BadDensity(k1_0));
    }
    if q0.len() != grid.len() {
        return Err(MomentError::BadInitial {
            expected: grid.len(),
            got: q0.len(),
        });
    }
    let scale = q0.iter().fold(1.0f64, |a, b| a.max(b.abs()));
    let asym = grid.asymmetry(q0);
    if asym > 1e-12 * scale {
        return Err(MomentError::NotEven(asym));
    }
    Ok(())
}

/// Aliasing of `kernel` on `grid`. Only smooth (gaussian) kernels are
/// required to pass; for the others the number is a diagnostic.
pub fn check_aliasing(grid: &PeriodicGrid, kernel: &Kernel) -> Result<f64, MomentError> {
    let error = grid.aliasing_error(kernel);
    if kernel.family() == KernelFamily::Gaussian && error > ALIASING_TOLERANCE {
        return Err(MomentError::CoarseGrid {
            error,
            tolerance: ALIASING_TOLERANCE,
        });
    }
    Ok(error)
}

/// `expm1(z)/z`, continuous at 0.
fn phi1(z: f64) -> f64 {
    if z.abs() < 1e-8 {
        1.0 + 0.5 * z
    } else {
        z.exp_m1() / z
    }
}

/// Per-mode data of the linear contact pair equation
/// `dQ/dt = μ Q + s·k1(0)·e^{λt}`.
struct ContactModes {
    mu: Vec<f64>,
    source: Vec<f64>,
    q0_hat: Vec<Complex64>,
    lambda: f64,
    k1_0: f64,
}

impl ContactModes {
    fn new(params: &ModelParams, grid: &PeriodicGrid, k1_0: f64, q0: &[f64]) -> Self {
        let symbol = grid.kernel_symbol(&params.a_plus);
        let kp = params.kappa_plus;
        let inv_cell = 1.0 / grid.cell_volume();
        Self {
            mu: symbol.iter().map(|a| -2.0 * params.m + 2.0 * kp * a).collect(),
            source: symbol.iter().map(|a| 2.0 * kp * a * inv_cell).collect(),
            q0_hat: grid.forward(q0),
            lambda: kp - params.m,
            k1_0,
        }
    }

    fn exact(&self, t: f64) -> Vec<Complex64> {
        self.q0_hat
            .iter()
            .zip(self.mu.iter().zip(&self.source))
            .map(|(q0, (&mu, &s))| {
                let decay = (mu * t).exp();
                q0 * decay + s * self.k1_0 * decay * t * phi1((self.lambda - mu) * t)
            })
            .collect()
    }

    fn rk4_step(&self, q: &mut [Complex64], t: f64, dt: f64) {
        let k1 = |s: f64| self.k1_0 * (self.lambda * s).exp();
        let (g0, gh, g1) = (k1(t), k1(t + 0.5 * dt), k1(t + dt));
        for ((q, &mu), &s) in q.iter_mut().zip(&self.mu).zip(&self.source) {
            let f = |t_k1: f64, y: Complex64| y * mu + s * t_k1;
            let a = f(g0, *q);
            let b = f(gh, *q + a * (0.5 * dt));
            let c = f(gh, *q + b * (0.5 * dt));
            let d = f(g1, *q + c * dt);
            *q += (a + b * 2.0 + c * 2.0 + d) * (dt / 6.0);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContactPairSolution {
    /// Exact per-mode solution at the recorded times.
    pub trajectory: MomentTrajectory,
    /// Largest `max_u |q_rk4 − q_exact| / max_u |q_exact|` over recorded times.
    pub rk4_max_rel_deviation: f64,
    pub aliasing_error: f64,
}

/// Pair function of the contact model, solved mode by mode in closed form and
/// cross-checked against RK4.
pub fn contact_pair_spectral(
    params: &ModelParams,
    grid: &PeriodicGrid,
    k1_0: f64,
    q0: &[f64],
    stepping: &Stepping,
) -> Result<ContactPairSolution, MomentError> {
    if params.kappa_minus != 0.0 {
        return Err(MomentError::Competition(params.kappa_minus));
    }
    check_inputs(params, grid, k1_0, q0)?;
    let aliasing_error = check_aliasing(grid, &params.a_plus)?;
    let modes = ContactModes::new(params, grid, k1_0, q0);
    let steps = stepping.steps();
    let dt = stepping.dt;
    let mut rk = modes.q0_hat.clone();
    let mut states = Vec::new();
    let mut k1_steps = Vec::with_capacity(steps + 1);
    let mut worst = 0.0f64;
    for s in 0..=steps {
        let t = s as f64 * dt;
        let k1 = k1_0 * (modes.lambda * t).exp();
        k1_steps.push(k1);
        if stepping.records(s) {
            let q = grid.inverse(&modes.exact(t));
            let q_rk = grid.inverse(&rk);
            let scale = q.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            let diff = q.iter().zip(&q_rk).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
            worst = worst.max(if scale > 0.0 { diff / scale } else { diff });
            states.push(MomentState { t, k1, q });
        }
        if s < steps {
            modes.rk4_step(&mut rk, t, dt);
        }
    }
    Ok(ContactPairSolution {
        trajectory: MomentTrajectory { states, dt, k1_steps },
        rk4_max_rel_deviation: worst,
        aliasing_error,
    })
}

struct Hierarchy<'a> {
    params: &'a ModelParams,
    grid: &'a PeriodicGrid,
    closure: ClosureScheme,
    symbol_plus: Vec<f64>,
    symbol_minus: Vec<f64>,
    a_plus: Vec<f64>,
    a_minus: Vec<f64>,
}

impl<'a> Hierarchy<'a> {
    fn new(params: &'a ModelParams, grid: &'a PeriodicGrid, closure: ClosureScheme) -> Self {
        Self {
            params,
            grid,
            closure,
            symbol_plus: grid.kernel_symbol(&params.a_plus),
            symbol_minus: grid.kernel_symbol(&params.a_minus),
            a_plus: grid.band_limited(&params.a_plus),
            a_minus: grid.kernel_samples(&params.a_minus),
        }
    }

    /// Right-hand sides `(dk1/dt, dq/dt)`.
    fn rhs(&self, k1: f64, q: &[f64]) -> (f64, Vec<f64>) {
        let p = self.params;
        let (kp, km, m) = (p.kappa_plus, p.kappa_minus, p.m);
        let q_hat = self.grid.forward(q);
        let conv = |symbol: &[f64]| {
            let s: Vec<Complex64> = q_hat.iter().zip(symbol).map(|(c, &a)| c * a).collect();
            self.grid.inverse(&s)
        };
        let conv_plus = conv(&self.symbol_plus);
        if km == 0.0 {
            let dq = (0..q.len())
                .map(|i| -2.0 * m * q[i] + 2.0 * kp * (self.a_plus[i] * k1 + conv_plus[i]))
                .collect();
            return ((kp - m) * k1, dq);
        }
        let conv_minus = conv(&self.symbol_minus);
        // ∫ a⁻ q = (a⁻ ∗ q)(0) by evenness
        let integral = conv_minus[0];
        let dk1 = (kp - m) * k1 - km * integral;
        let t3: Vec<f64> = match self.closure.kind {
            ClosureKind::Power1 => (0..q.len())
                .map(|i| 2.0 * k1 * (q[i] + integral + conv_minus[i]) - 4.0 * k1.powi(3))
                .collect(),
            ClosureKind::Kirkwood => {
                if k1 < self.closure.k1_floor {
                    vec![0.0; q.len()]
                } else {
                    let aq: Vec<f64> = self.a_minus.iter().zip(q).map(|(a, b)| a * b).collect();
                    let inner = self.grid.convolve(&aq, q);
                    let inv = 1.0 / k1.powi(3);
                    (0..q.len()).map(|i| 2.0 * q[i] * inner[i] * inv).collect()
                }
            }
        };
        let dq = (0..q.len())
            .map(|i| {
                -2.0 * (m + km * self.a_minus[i]) * q[i] + 2.0 * kp * (self.a_plus[i] * k1 + conv_plus[i]) - km * t3[i]
            })
            .collect();
        (dk1, dq)
    }

    fn rk4_step(&self, k1: &mut f64, q: &mut [f64], dt: f64) {
        let shifted =
            |base: &[f64], dir: &[f64], h: f64| -> Vec<f64> { base.iter().zip(dir).map(|(b, d)| b + h * d).collect() };
        let (a1, aq) = self.rhs(*k1, q);
        let (b1, bq) = self.rhs(*k1 + 0.5 * dt * a1, &shifted(q, &aq, 0.5 * dt));
        let (c1, cq) = self.rhs(*k1 + 0.5 * dt * b1, &shifted(q, &bq, 0.5 * dt));
        let (d1, dq) = self.rhs(*k1 + dt * c1, &shifted(q, &cq, dt));
        *k1 += dt / 6.0 * (a1 + 2.0 * b1 + 2.0 * c1 + d1);
        for i in 0..q.len() {
            q[i] += dt / 6.0 * (aq[i] + 2.0 * bq[i] + 2.0 * cq[i] + dq[i]);
        }
    }
}

/// Right side of the first-moment equation, `(κ⁺−m)k1 − κ⁻∫a⁻q`.
pub fn first_moment_rhs(params: &ModelParams, grid: &PeriodicGrid, k1: f64, q: &[f64]) -> f64 {
    let integral = if params.kappa_minus == 0.0 {
        0.0
    } else {
        grid.convolve_symbol(&grid.kernel_symbol(&params.a_minus), q)[0]
    };
    (params.kappa_plus - params.m) * k1 - params.kappa_minus * integral
}

/// RK4 integration of the hierarchy truncated at the pair level.
pub fn bdlp_hierarchy_solve(
    params: &ModelParams,
    closure: ClosureScheme,
    grid: &PeriodicGrid,
    k1_0: f64,
    q0: &[f64],
    stepping: &Stepping,
) -> Result<MomentTrajectory, MomentError> {
    check_inputs(params, grid, k1_0, q0)?;
    check_aliasing(grid, &params.a_plus)?;
    if params.kappa_minus > 0.0 {
        check_aliasing(grid, &params.a_minus)?;
    }
    let system = Hierarchy::new(params, grid, closure);
    let steps = stepping.steps();
    let dt = stepping.dt;
    let mut k1 = k1_0;
    let mut q = q0.to_vec();
    let mut states = vec![MomentState {
        t: 0.0,
        k1,
        q: q.clone(),
    }];
    let mut k1_steps = Vec::with_capacity(steps + 1);
    k1_steps.push(k1);
    for s in 1..=steps {
        system.rk4_step(&mut k1, &mut q, dt);
        let t = s as f64 * dt;
        if !k1.is_finite() || k1 < 0.0 || q.iter().any(|v| !v.is_finite()) {
            return Err(MomentError::Blowup(Box::new(MomentState { t, k1, q })));
        }
        k1_steps.push(k1);
        if stepping.records(s) {
            states.push(MomentState { t, k1, q: q.clone() });
        }
    }
    Ok(MomentTrajectory { states, dt, k1_steps })
}

/// Growth of `k1/C` and `sup q/C²` relative to their initial values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KcReport {
    pub c: f64,
    pub max_k1_ratio: f64,
    pub max_q_ratio: f64,
    /// Both ratios stay within 1.01.
    pub within: bool,
}

pub fn kc_monitor(trajectory: &MomentTrajectory, c: f64) -> KcReport {
    let ratio = |now: f64, start: f64| {
        if start > 0.0 {
            now / start
        } else if now > 0.0 {
            f64::INFINITY
        } else {
            1.0
        }
    };
    let sup = |q: &[f64]| q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let k1_start = trajectory.k1_steps[0] / c;
    let max_k1_ratio = trajectory
        .k1_steps
        .iter()
        .map(|k| ratio(k / c, k1_start))
        .fold(f64::NEG_INFINITY, f64::max);
    let q_start = sup(&trajectory.states[0].q) / (c * c);
    let max_q_ratio = trajectory
        .states
        .iter()
        .map(|s| ratio(sup(&s.q) / (c * c), q_start))
        .fold(f64::NEG_INFINITY, f64::max);
    KcReport {
        c,
        max_k1_ratio,
        max_q_ratio,
        within: max_k1_ratio <= 1.01 && max_q_ratio <= 1.01,
    }
}

/// Inputs to the analytic bounds that do not come from the model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundInputs {
    /// Initial bound `k0^{(n)} ≤ n!·Cⁿ`.
    pub c: f64,
    /// `‖a⁺‖_∞`.
    pub a0: f64,
    /// Infimum of `a⁺(x − y)` over the probe region.
    pub alpha: f64,
    /// Value of the D-integral when finite.
    pub d_integral: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundsRecord {
    pub t: f64,
    pub n: usize,
    pub factorial: f64,
    /// `βⁿ e^{n(κ⁺−m)t} n!`; `None` when `α ≤ 0`.
    pub cluster: Option<f64>,
    /// `2β² t e^{2(κ⁺−m)t}`, only for `n = 2`.
    pub cluster_two_point: Option<f64>,
    pub n_factorial_squared: f64,
    /// `C ≥ D/(2π)^d` with a finite D.
    pub n_factorial_squared_applies: bool,
}

/// `inf_{x,y ∈ [−w,w]^d} a(x − y)`, attained at the diagonal for radially
/// nonincreasing kernels.
pub fn probe_alpha(kernel: &Kernel, half_width: f64) -> f64 {
    kernel.density_at(2.0 * half_width * (kernel.dim() as f64).sqrt())
}

pub fn analytic_bounds(params: &ModelParams, inputs: &BoundInputs, t: f64, n: usize) -> BoundsRecord {
    let kp = params.kappa_plus;
    let growth = kp - params.m;
    let nf = n as f64;
    let kp_t = 1f64.max(kp).max(kp * (-growth * t).exp());
    let factorial_bound =
        (kp_t * (1.0 + inputs.a0) * (inputs.c + t)).powi(n as i32) * (nf * growth * t).exp() * factorial(n);
    let beta = (inputs.alpha * kp).min(inputs.c);
    let (cluster, cluster_two_point) = if inputs.alpha > 0.0 {
        let general = beta.powi(n as i32) * (nf * growth * t).exp() * factorial(n);
        let two = (n == 2).then(|| 2.0 * beta * beta * t * (2.0 * growth * t).exp());
        (Some(general), two)
    } else {
        (None, None)
    };
    let d = params.space.dim() as i32;
    BoundsRecord {
        t,
        n,
        factorial: factorial_bound,
        cluster,
        cluster_two_point,
        n_factorial_squared: inputs.c.powi(n as i32) * factorial(n).powi(2),
        n_factorial_squared_applies: inputs.d_integral.is_some_and(|dv| inputs.c >= dv / (2.0 * PI).powi(d)),
    }
}

/// Quadrature settings for the D-integral. Radii are in units of `1/σ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DQuadrature {
    pub split: f64,
    pub nodes: usize,
    pub refinements: usize,
    pub tolerance: f64,
    pub max_outer_panels: usize,
}

impl Default for DQuadrature {
    fn default() -> Self {
        Self {
            split: 0.1,
            nodes: 64,
            refinements: 12,
            tolerance: 1e-4,
            max_outer_panels: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DIntegral {
    pub dim: usize,
    /// `∫ |â⁺(p)|/(1 − â⁺(p)) dp` over R^d.
    pub value: f64,
    /// `D/(2(2π)^d)`.
    pub g_sup: f64,
    pub refinements_used: usize,
}

/// Radial quadrature of the D-integral. The small-`p` piece below the split
/// radius `ε` uses `1 − â ≈ c p²` (finite only for `d ≥ 3`), and `ε` is shrunk
/// by 4 per refinement until successive values agree.
pub fn compute_d(a_plus: &Kernel, quad: &DQuadrature) -> Result<DIntegral, MomentError> {
    let dim = a_plus.dim();
    let sigma = a_plus.sigma();
    let area = unit_sphere_area(dim);
    let dm1 = dim as i32 - 1;
    let integrand = |p: f64| area * p.powi(dm1) * a_plus.fourier_radial(p).abs() / a_plus.one_minus_fourier_radial(p);
    let rule = GaussLegendre::new(NonZeroUsize::new(quad.nodes).expect("positive node count"));
    let split = quad.split / sigma;

    // [split, ∞): doubling panels, each cut into pieces of width ≲ 1/σ
    let mut outer = 0.0;
    let mut lo = split;
    let mut converged = false;
    let mut last_change = f64::INFINITY;
    for _ in 0..quad.max_outer_panels {
        let hi = 2.0 * lo;
        let pieces = ((hi - lo) * sigma).ceil().clamp(1.0, 256.0) as usize;
        let width = (hi - lo) / pieces as f64;
        let panel: f64 = (0..pieces)
            .map(|j| {
                let a = lo + j as f64 * width;
                rule.integrate(a, a + width, integrand)
            })
            .sum();
        outer += panel;
        lo = hi;
        last_change = (panel / outer).abs();
        if last_change < 1e-12 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(MomentError::DNotConverged {
            relative_change: last_change,
        });
    }

    let c2 = a_plus.second_moment() / (2.0 * dim as f64);
    let small_piece = |eps: f64| {
        if dim >= 3 {
            area * eps.powi(dim as i32 - 2) / ((dim as f64 - 2.0) * c2)
        } else {
            0.0
        }
    };
    // ∫_ε^{split} in the variable s = ln p
    let middle = |eps: f64| {
        rule.integrate(eps.ln(), split.ln(), |s: f64| {
            let p = s.exp();
            integrand(p) * p
        })
    };
    let mut previous = outer + small_piece(split);
    let mut change = f64::INFINITY;
    for j in 1..=quad.refinements {
        let eps = split * 4f64.powi(-(j as i32));
        let value = outer + middle(eps) + small_piece(eps);
        change = ((value - previous) / value).abs();
        if change <= quad.tolerance {
            return Ok(DIntegral {
                dim,
                value,
                g_sup: value / (2.0 * (2.0 * PI).powi(dim as i32)),
                refinements_used: j,
            });
        }
        previous = value;
    }
    Err(MomentError::DNotConverged {
        relative_change: change,
    })
}

pub fn write_k1_csv<W: Write>(mut out: W, trajectory: &MomentTrajectory) -> io::Result<()> {
    writeln!(out, "# t [time], k1 [1/volume]")?;
    writeln!(out, "t,k1")?;
    for s in &trajectory.states {
        writeln!(out, "{},{}", s.t, s.k1)?;
    }
    Ok(())
}

/// Long format along the first stored axis, `r ∈ [0, L/2]`.
pub fn write_q_csv<W: Write>(mut out: W, grid: &PeriodicGrid, trajectory: &MomentTrajectory) -> io::Result<()> {
    writeln!(out, "# t [time], r [length], q [1/volume^2]")?;
    writeln!(out, "t,r,q")?;
    for s in &trajectory.states {
        for (r, q) in grid.axis_profile(&s.q) {
            writeln!(out, "{},{},{}", s.t, r, q)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundRow {
    pub name: String,
    pub t: f64,
    pub n: usize,
    pub value: f64,
}

impl BoundsRecord {
    /// Flattens into named rows, skipping bounds that are not available.
    pub fn rows(&self) -> Vec<BoundRow> {
        let mut rows = vec![BoundRow {
            name: "factorial".into(),
            t: self.t,
            n: self.n,
            value: self.factorial,
        }];
        if let Some(v) = self.cluster {
            rows.push(BoundRow {
                name: "cluster".into(),
                t: self.t,
                n: self.n,
                value: v,
            });
        }
        if let Some(v) = self.cluster_two_point {
            rows.push(BoundRow {
                name: "cluster_two_point".into(),
                t: self.t,
                n: self.n,
                value: v,
            });
        }
        if self.n_factorial_squared_applies {
            rows.push(BoundRow {
                name: "n_factorial_squared".into(),
                t: self.t,
                n: self.n,
                value: self.n_factorial_squared,
            });
        }
        rows
    }
}

pub fn write_bounds_csv<W: Write>(mut out: W, rows: &[BoundRow]) -> io::Result<()> {
    writeln!(out, "# value [1/volume^n]")?;
    writeln!(out, "name,t,n,value")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.name, r.t, r.n, r.value)?;
    }
    Ok(())
}
