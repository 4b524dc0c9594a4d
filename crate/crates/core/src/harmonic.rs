//! Harmonic analysis on finite configurations.
//!
//! Quasi-observables `G` and correlation vectors `k` are [`FiniteFunction`]s
//! on finite point sets in free space R^d. Integrals against the
//! Lebesgue–Poisson measure are Monte-Carlo estimates over a bounded box;
//! birth and competition integrals are importance-sampled from the kernels,
//! which are probability densities.
//!
//! Every stochastic operator application is a mean over `mc` independent
//! per-sample values. The `*_with` variants take the displacement draws
//! explicitly so that two sides of an identity can share them.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::kernels::{Kernel, ModelParams};

/// Largest configuration handled by the brute-force routines (2^8 subsets).
pub const N_MAX: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarmonicError {
    #[error("configuration has {len} points, above the cap of {cap}")]
    CardinalityCap { len: usize, cap: usize },
    #[error("at least two Monte-Carlo samples are needed for an error estimate, got {0}")]
    TooFewSamples(usize),
    #[error("the stationary operator is undefined for m = 0 (its denominator can vanish)")]
    ZeroMortality,
    #[error("point has {got} coordinates, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("configuration contains the same point twice")]
    RepeatedPoint,
    #[error("activity must be finite and positive, got {0}")]
    BadActivity(f64),
    #[error("box bounds must satisfy lo < hi in every coordinate")]
    BadRegion,
}

/// A finite point set in R^d, stored as a flat coordinate list.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteConfiguration {
    dim: usize,
    coords: Vec<f64>,
}

impl FiniteConfiguration {
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            coords: Vec::new(),
        }
    }

    pub fn new(dim: usize, points: &[Vec<f64>]) -> Result<Self, HarmonicError> {
        let mut coords = Vec::with_capacity(points.len() * dim);
        for p in points {
            if p.len() != dim {
                return Err(HarmonicError::DimensionMismatch {
                    expected: dim,
                    got: p.len(),
                });
            }
            coords.extend_from_slice(p);
        }
        Self::from_flat(dim, coords)
    }

    pub fn from_flat(dim: usize, coords: Vec<f64>) -> Result<Self, HarmonicError> {
        if dim == 0 || !coords.len().is_multiple_of(dim) {
            return Err(HarmonicError::DimensionMismatch {
                expected: dim,
                got: coords.len(),
            });
        }
        let cfg = Self { dim, coords };
        if cfg.len() > N_MAX {
            return Err(HarmonicError::CardinalityCap {
                len: cfg.len(),
                cap: N_MAX,
            });
        }
        for i in 0..cfg.len() {
            for j in 0..i {
                if cfg.point(i) == cfg.point(j) {
                    return Err(HarmonicError::RepeatedPoint);
                }
            }
        }
        Ok(cfg)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim)
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Sub-configuration of the points whose index bit is set in `mask`.
    pub fn subset(&self, mask: u32) -> Self {
        let mut coords = Vec::with_capacity(self.coords.len());
        for (i, p) in self.points().enumerate() {
            if mask & (1 << i) != 0 {
                coords.extend_from_slice(p);
            }
        }
        Self { dim: self.dim, coords }
    }

    /// `η ∖ x_i`.
    pub fn without(&self, i: usize) -> Self {
        let mut coords = self.coords.clone();
        coords.drain(i * self.dim..(i + 1) * self.dim);
        Self { dim: self.dim, coords }
    }

    /// `η ∪ x`.
    pub fn with_point(&self, x: &[f64]) -> Self {
        let mut coords = Vec::with_capacity(self.coords.len() + self.dim);
        coords.extend_from_slice(&self.coords);
        coords.extend_from_slice(x);
        Self { dim: self.dim, coords }
    }

    /// `(η ∖ x_i) ∪ x`.
    pub fn replaced(&self, i: usize, x: &[f64]) -> Self {
        let mut out = self.clone();
        out.coords[i * self.dim..(i + 1) * self.dim].copy_from_slice(x);
        out
    }

    fn check_cap(&self, extra: usize) -> Result<(), HarmonicError> {
        if self.len() + extra > N_MAX {
            return Err(HarmonicError::CardinalityCap {
                len: self.len() + extra,
                cap: N_MAX,
            });
        }
        Ok(())
    }
}

/// Axis-aligned box `[lo, hi)` in R^d.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Region {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Region {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, HarmonicError> {
        if lo.len() != hi.len() || lo.is_empty() || lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
            return Err(HarmonicError::BadRegion);
        }
        Ok(Self { lo, hi })
    }

    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self, HarmonicError> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(c, (a, b))| *c >= *a && *c < *b)
    }

    /// The box grown by `r` on every side.
    pub fn expanded(&self, r: f64) -> Self {
        Self {
            lo: self.lo.iter().map(|a| a - r).collect(),
            hi: self.hi.iter().map(|b| b + r).collect(),
        }
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        for (c, (a, b)) in out.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *c = rng.random_range(*a..*b);
        }
    }
}

type Evaluator = dyn Fn(&FiniteConfiguration) -> f64 + Send + Sync;

/// Real function on finite configurations with declared support.
///
/// Evaluation returns 0 for configurations above `support_card` points or
/// with a point outside `support_region`; the wrapped closure only sees
/// configurations inside the support.
#[derive(Clone)]
pub struct FiniteFunction {
    f: Arc<Evaluator>,
    support_card: usize,
    support_region: Option<Region>,
}

impl fmt::Debug for FiniteFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FiniteFunction")
            .field("support_card", &self.support_card)
            .field("support_region", &self.support_region)
            .finish_non_exhaustive()
    }
}

impl FiniteFunction {
    pub fn new(
        support_card: usize,
        support_region: Option<Region>,
        f: impl Fn(&FiniteConfiguration) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            f: Arc::new(f),
            support_card,
            support_region,
        }
    }

    /// Function of the cardinality alone, `η ↦ g(|η|)` for `|η| ≤ support_card`.
    pub fn of_cardinality(
        support_card: usize,
        support_region: Option<Region>,
        g: impl Fn(usize) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self::new(support_card, support_region, move |eta| g(eta.len()))
    }

    /// Indicator of `{|η| = n}`.
    pub fn indicator_of_cardinality(n: usize, support_region: Option<Region>) -> Self {
        Self::of_cardinality(n, support_region, move |c| if c == n { 1.0 } else { 0.0 })
    }

    pub fn zero() -> Self {
        Self::new(0, None, |_| 0.0)
    }

    pub fn support_card(&self) -> usize {
        self.support_card
    }

    pub fn support_region(&self) -> Option<&Region> {
        self.support_region.as_ref()
    }

    #[inline]
    pub fn eval(&self, eta: &FiniteConfiguration) -> f64 {
        if eta.len() > self.support_card {
            return 0.0;
        }
        if let Some(region) = &self.support_region {
            if !eta.points().all(|p| region.contains(p)) {
                return 0.0;
            }
        }
        (self.f)(eta)
    }

    /// `KG` as a function in its own right (no support restriction).
    pub fn k_transformed(&self) -> FiniteFunction {
        let g = self.clone();
        FiniteFunction::new(usize::MAX, None, move |gamma| subset_sum(&g, gamma, false))
    }

    /// `K⁻¹F` as a function in its own right.
    pub fn k_inverted(&self) -> FiniteFunction {
        let f = self.clone();
        FiniteFunction::new(usize::MAX, None, move |eta| subset_sum(&f, eta, true))
    }
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, stderr: 0.0 }
    }

    /// Sample mean and `s/√n` of per-sample values.
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        // shifted by the first sample so that constant input is reproduced exactly
        let shift = samples.first().copied().unwrap_or(0.0);
        let mean = shift + samples.iter().map(|x| x - shift).sum::<f64>() / n;
        if samples.len() < 2 {
            return Self::exact(mean);
        }
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self {
            value: mean,
            stderr: (var / n).sqrt(),
        }
    }

    /// Is `|self − other| ≤ k·√(se₁² + se₂²)`? A relative slack of 1e−12
    /// absorbs rounding when both errors vanish.
    pub fn agrees_with(&self, other: &Estimate, k: f64) -> bool {
        let se = self.stderr.hypot(other.stderr);
        let scale = self.value.abs().max(other.value.abs()).max(1e-300);
        (self.value - other.value).abs() <= k * se + 1e-12 * scale
    }
}

/// Pairing `⟨⟨G, k⟩⟩ = ∫ G·k dλ` with an error estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DualityPairing {
    pub value: f64,
    pub estimated_error: f64,
}

impl From<Estimate> for DualityPairing {
    fn from(e: Estimate) -> Self {
        Self {
            value: e.value,
            estimated_error: e.stderr,
        }
    }
}

fn subset_sum(f: &FiniteFunction, gamma: &FiniteConfiguration, alternating: bool) -> f64 {
    let n = gamma.len();
    let mut total = 0.0;
    for mask in 0u32..(1u32 << n) {
        let value = f.eval(&gamma.subset(mask));
        let missing = n as u32 - mask.count_ones();
        if alternating && missing % 2 == 1 {
            total -= value;
        } else {
            total += value;
        }
    }
    total
}

/// `(KG)(γ) = Σ_{η ⊆ γ} G(η)`.
pub fn k_transform(g: &FiniteFunction, gamma: &FiniteConfiguration) -> Result<f64, HarmonicError> {
    gamma.check_cap(0)?;
    Ok(subset_sum(g, gamma, false))
}

/// `(K⁻¹F)(η) = Σ_{ξ ⊆ η} (−1)^{|η∖ξ|} F(ξ)`.
pub fn k_inverse(f: &FiniteFunction, eta: &FiniteConfiguration) -> Result<f64, HarmonicError> {
    eta.check_cap(0)?;
    Ok(subset_sum(f, eta, true))
}

/// `E^a(η) = Σ_{x∈η} Σ_{y∈η∖x} a(x − y)` in free space.
pub fn interaction_energy(a: &Kernel, eta: &FiniteConfiguration) -> f64 {
    let n = eta.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += 2.0 * a.density_at(distance(eta.point(i), eta.point(j)));
        }
    }
    total
}

fn distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Kernel displacements for `mc` samples × `points` parents, row-major.
#[derive(Debug, Clone)]
pub struct Displacements {
    dim: usize,
    points: usize,
    data: Vec<f64>,
}

impl Displacements {
    pub fn draw<R: Rng + ?Sized>(kernel: &Kernel, points: usize, mc: usize, rng: &mut R) -> Self {
        let dim = kernel.dim();
        let mut data = vec![0.0; mc * points * dim];
        for chunk in data.chunks_exact_mut(dim) {
            kernel.sample_into(rng, chunk);
        }
        Self { dim, points, data }
    }

    pub fn samples(&self) -> usize {
        if self.points == 0 {
            // no parents: a single empty row per sample is implied
            usize::MAX
        } else {
            self.data.len() / (self.points * self.dim)
        }
    }

    /// Displacements of sample `s`, one d-vector per parent.
    pub fn row(&self, s: usize) -> &[f64] {
        let w = self.points * self.dim;
        &self.data[s * w..(s + 1) * w]
    }
}

fn shifted(x: &[f64], xi: &[f64]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (o, (a, b)) in out.iter_mut().zip(x.iter().zip(xi)) {
        *o = a + b;
    }
    out
}

fn check_mc(mc: usize) -> Result<(), HarmonicError> {
    if mc < 2 {
        return Err(HarmonicError::TooFewSamples(mc));
    }
    Ok(())
}

fn competition_rate(p: &ModelParams, eta: &FiniteConfiguration, i: usize) -> f64 {
    let x = eta.point(i);
    let mut w = 0.0;
    for (j, y) in eta.points().enumerate() {
        if j != i {
            w += p.a_minus.density_at(distance(x, y));
        }
    }
    p.kappa_minus * w
}

fn generator_death(p: &ModelParams, f: &FiniteFunction, gamma: &FiniteConfiguration) -> f64 {
    let f_gamma = f.eval(gamma);
    (0..gamma.len())
        .map(|i| (p.m + competition_rate(p, gamma, i)) * (f.eval(&gamma.without(i)) - f_gamma))
        .sum()
}

fn generator_birth(p: &ModelParams, f: &FiniteFunction, gamma: &FiniteConfiguration, disp: &[f64]) -> f64 {
    if p.kappa_plus == 0.0 {
        return 0.0;
    }
    let d = gamma.dim();
    let f_gamma = f.eval(gamma);
    let mut total = 0.0;
    for (i, y) in gamma.points().enumerate() {
        let child = shifted(y, &disp[i * d..(i + 1) * d]);
        total += f.eval(&gamma.with_point(&child[..d])) - f_gamma;
    }
    p.kappa_plus * total
}

/// `(LF)(γ)` with the dispersal integral sampled from `a⁺`.
pub fn apply_generator<R: Rng + ?Sized>(
    params: &ModelParams,
    f: &FiniteFunction,
    gamma: &FiniteConfiguration,
    mc: usize,
    rng: &mut R,
) -> Result<Estimate, HarmonicError> {
    check_mc(mc)?;
    gamma.check_cap(1)?;
    let disp = Displacements::draw(&params.a_plus, gamma.len(), mc, rng);
    let death = generator_death(params, f, gamma);
    let samples: Vec<f64> = (0..mc)
        .map(|s| death + generator_birth(params, f, gamma, row_or_empty(&disp, s)))
        .collect();
    Ok(Estimate::from_samples(&samples))
}

fn row_or_empty(disp: &Displacements, s: usize) -> &[f64] {
    if disp.points == 0 {
        &[]
    } else {
        disp.row(s)
    }
}

/// The four parts of the symbol, `L̂ = L₀ − L₁ + L₂ + L₃`, for one sample.
///
/// `L₀G = −(m|η| + κ⁻E^{a⁻}(η))G(η)`, `L₁G = κ⁻ΣΣ a⁻(x−y)G(η∖y)`,
/// `L₂G = κ⁺Σ_y G((η∖y)∪x)` and `L₃G = κ⁺Σ_y G(η∪x)` with `x − y ~ a⁺`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SymbolParts {
    pub l0: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

impl SymbolParts {
    pub fn total(&self) -> f64 {
        self.l0 - self.l1 + self.l2 + self.l3
    }
}

fn symbol_exact(p: &ModelParams, g: &FiniteFunction, eta: &FiniteConfiguration) -> (f64, f64) {
    let n = eta.len();
    let energy = interaction_energy(&p.a_minus, eta);
    let l0 = -(p.m * n as f64 + p.kappa_minus * energy) * g.eval(eta);
    let mut l1 = 0.0;
    if p.kappa_minus != 0.0 {
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let a = p.a_minus.density_at(distance(eta.point(i), eta.point(j)));
                    if a != 0.0 {
                        l1 += a * g.eval(&eta.without(j));
                    }
                }
            }
        }
    }
    (l0, p.kappa_minus * l1)
}

fn symbol_sampled(p: &ModelParams, g: &FiniteFunction, eta: &FiniteConfiguration, disp: &[f64]) -> (f64, f64) {
    if p.kappa_plus == 0.0 {
        return (0.0, 0.0);
    }
    let d = eta.dim();
    let (mut l2, mut l3) = (0.0, 0.0);
    for (i, y) in eta.points().enumerate() {
        let x = shifted(y, &disp[i * d..(i + 1) * d]);
        l2 += g.eval(&eta.replaced(i, &x[..d]));
        l3 += g.eval(&eta.with_point(&x[..d]));
    }
    (p.kappa_plus * l2, p.kappa_plus * l3)
}

/// Symbol parts for one set of parent displacements (`disp` holds one
/// d-vector per point of `eta`).
pub fn symbol_parts(params: &ModelParams, g: &FiniteFunction, eta: &FiniteConfiguration, disp: &[f64]) -> SymbolParts {
    let (l0, l1) = symbol_exact(params, g, eta);
    let (l2, l3) = symbol_sampled(params, g, eta, disp);
    SymbolParts { l0, l1, l2, l3 }
}

/// `(L̂G)(η)` with the two dispersal integrals sampled from `a⁺`.
pub fn apply_symbol<R: Rng + ?Sized>(
    params: &ModelParams,
    g: &FiniteFunction,
    eta: &FiniteConfiguration,
    mc: usize,
    rng: &mut R,
) -> Result<Estimate, HarmonicError> {
    check_mc(mc)?;
    eta.check_cap(1)?;
    let disp = Displacements::draw(&params.a_plus, eta.len(), mc, rng);
    Ok(apply_symbol_with(params, g, eta, &disp, mc))
}

pub fn apply_symbol_with(
    params: &ModelParams,
    g: &FiniteFunction,
    eta: &FiniteConfiguration,
    disp: &Displacements,
    mc: usize,
) -> Estimate {
    Estimate::from_samples(&symbol_samples(params, g, eta, disp, mc))
}

fn symbol_samples(
    params: &ModelParams,
    g: &FiniteFunction,
    eta: &FiniteConfiguration,
    disp: &Displacements,
    mc: usize,
) -> Vec<f64> {
    let (l0, l1) = symbol_exact(params, g, eta);
    (0..mc)
        .map(|s| {
            let (l2, l3) = symbol_sampled(params, g, eta, row_or_empty(disp, s));
            l0 - l1 + l2 + l3
        })
        .collect()
}

/// `K⁻¹(L(KG))(η)` by brute-force subset enumeration, sharing the parent
/// displacements in `disp` (indexed by the points of `eta`) across subsets.
pub fn symbol_oracle_with(
    params: &ModelParams,
    g: &FiniteFunction,
    eta: &FiniteConfiguration,
    disp: &Displacements,
    mc: usize,
) -> Estimate {
    Estimate::from_samples(&oracle_samples(params, g, eta, disp, mc))
}

fn oracle_samples(
    params: &ModelParams,
    g: &FiniteFunction,
    eta: &FiniteConfiguration,
    disp: &Displacements,
    mc: usize,
) -> Vec<f64> {
    let kg = g.k_transformed();
    let n = eta.len();
    let d = eta.dim();
    let subsets: Vec<(u32, FiniteConfiguration, f64, f64)> = (0u32..(1 << n))
        .map(|mask| {
            let sub = eta.subset(mask);
            let sign = if (n as u32 - mask.count_ones()) % 2 == 1 {
                -1.0
            } else {
                1.0
            };
            let death = generator_death(params, &kg, &sub);
            (mask, sub, sign, death)
        })
        .collect();
    let mut gathered = Vec::with_capacity(n * d);
    (0..mc)
        .map(|s| {
            let row = row_or_empty(disp, s);
            let mut total = 0.0;
            for (mask, sub, sign, death) in &subsets {
                gathered.clear();
                for i in 0..n {
                    if mask & (1 << i) != 0 {
                        gathered.extend_from_slice(&row[i * d..(i + 1) * d]);
                    }
                }
                total += sign * (death + generator_birth(params, &kg, sub, &gathered));
            }
            total
        })
        .collect()
}

/// Symbol and its `K⁻¹LK` oracle on common random numbers, plus the
/// per-sample difference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SymbolComparison {
    pub symbol: Estimate,
    pub oracle: Estimate,
    pub difference: Estimate,
}

impl SymbolComparison {
    /// Difference within `k` combined standard errors of zero.
    pub fn agrees(&self, k: f64) -> bool {
        let se = self.symbol.stderr.hypot(self.oracle.stderr).max(self.difference.stderr);
        let scale = self.symbol.value.abs().max(self.oracle.value.abs()).max(1.0);
        self.difference.value.abs() <= k * se + 1e-10 * scale
    }
}

pub fn compare_symbol_with_oracle<R: Rng + ?Sized>(
    params: &ModelParams,
    g: &FiniteFunction,
    eta: &FiniteConfiguration,
    mc: usize,
    rng: &mut R,
) -> Result<SymbolComparison, HarmonicError> {
    check_mc(mc)?;
    eta.check_cap(1)?;
    let disp = Displacements::draw(&params.a_plus, eta.len(), mc, rng);
    let symbol = symbol_samples(params, g, eta, &disp, mc);
    let oracle = oracle_samples(params, g, eta, &disp, mc);
    let diffs: Vec<f64> = symbol.iter().zip(&oracle).map(|(a, b)| a - b).collect();
    Ok(SymbolComparison {
        symbol: Estimate::from_samples(&symbol),
        oracle: Estimate::from_samples(&oracle),
        difference: Estimate::from_samples(&diffs),
    })
}

fn adjoint_exact(p: &ModelParams, k: &FiniteFunction, eta: &FiniteConfiguration) -> f64 {
    let n = eta.len();
    let energy = interaction_energy(&p.a_minus, eta);
    let mut total = -(p.m * n as f64 + p.kappa_minus * energy) * k.eval(eta);
    total += pair_birth_term(p, k, eta);
    total
}

/// `κ⁺ Σ_{x∈η} Σ_{y∈η∖x} a⁺(x−y) k(η∖x)`.
fn pair_birth_term(p: &ModelParams, k: &FiniteFunction, eta: &FiniteConfiguration) -> f64 {
    if p.kappa_plus == 0.0 {
        return 0.0;
    }
    let n = eta.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut a_sum = 0.0;
        for j in 0..n {
            if i != j {
                a_sum += p.a_plus.density_at(distance(eta.point(i), eta.point(j)));
            }
        }
        if a_sum != 0.0 {
            total += a_sum * k.eval(&eta.without(i));
        }
    }
    p.kappa_plus * total
}

/// Sampled part of the adjoint: `κ⁺Σ_y k((η∖y)∪x)` with `x−y ~ a⁺` and
/// `−κ⁻Σ_y k(η∪x)` with `x−y ~ a⁻`. Returns the two terms separately.
fn adjoint_sampled(
    p: &ModelParams,
    k: &FiniteFunction,
    eta: &FiniteConfiguration,
    disp_plus: &[f64],
    disp_minus: &[f64],
) -> (f64, f64) {
    let d = eta.dim();
    let (mut replace, mut add) = (0.0, 0.0);
    for (i, y) in eta.points().enumerate() {
        if p.kappa_plus != 0.0 {
            let x = shifted(y, &disp_plus[i * d..(i + 1) * d]);
            replace += k.eval(&eta.replaced(i, &x[..d]));
        }
        if p.kappa_minus != 0.0 {
            let x = shifted(y, &disp_minus[i * d..(i + 1) * d]);
            add += k.eval(&eta.with_point(&x[..d]));
        }
    }
    (p.kappa_plus * replace, -p.kappa_minus * add)
}

/// `(L̂*k)(η)`; the `κ⁺` replacement integral is sampled from `a⁺` and the
/// `κ⁻` integral from `a⁻`.
pub fn apply_symbol_adjoint<R: Rng + ?Sized>(
    params: &ModelParams,
    k: &FiniteFunction,
    eta: &FiniteConfiguration,
    mc: usize,
    rng: &mut R,
) -> Result<Estimate, HarmonicError> {
    check_mc(mc)?;
    eta.check_cap(1)?;
    let plus = Displacements::draw(&params.a_plus, eta.len(), mc, rng);
    let minus = Displacements::draw(&params.a_minus, eta.len(), mc, rng);
    let exact = adjoint_exact(params, k, eta);
    let samples: Vec<f64> = (0..mc)
        .map(|s| {
            let (r, a) = adjoint_sampled(params, k, eta, row_or_empty(&plus, s), row_or_empty(&minus, s));
            exact + r + a
        })
        .collect();
    Ok(Estimate::from_samples(&samples))
}

/// `(Sk)(η)`: the off-diagonal part of `L̂*k` divided by `m|η| + κ⁻E^{a⁻}(η)`,
/// with `(Sk)(∅) = 0`.
pub fn stationary_s_apply<R: Rng + ?Sized>(
    params: &ModelParams,
    k: &FiniteFunction,
    eta: &FiniteConfiguration,
    mc: usize,
    rng: &mut R,
) -> Result<Estimate, HarmonicError> {
    check_mc(mc)?;
    if params.m == 0.0 {
        return Err(HarmonicError::ZeroMortality);
    }
    if eta.is_empty() {
        return Ok(Estimate::exact(0.0));
    }
    eta.check_cap(1)?;
    let denom = params.m * eta.len() as f64 + params.kappa_minus * interaction_energy(&params.a_minus, eta);
    let plus = Displacements::draw(&params.a_plus, eta.len(), mc, rng);
    let minus = Displacements::draw(&params.a_minus, eta.len(), mc, rng);
    let pair = pair_birth_term(params, k, eta);
    let samples: Vec<f64> = (0..mc)
        .map(|s| {
            let (r, a) = adjoint_sampled(params, k, eta, plus.row(s), minus.row(s));
            (pair + r + a) / denom
        })
        .collect();
    Ok(Estimate::from_samples(&samples))
}

/// `∫ H dλ_z` over configurations in `region` with at most `n_cap` points,
/// where `integrand` may itself be a one-sample unbiased estimate drawn from
/// the supplied random source.
///
/// Sector `n` contributes `zⁿ|Λ|ⁿ/n!` times the mean of the integrand over
/// `mc` uniform draws from `Λⁿ`.
pub fn lp_integral_with<R, F>(
    z: f64,
    region: &Region,
    n_cap: usize,
    mc: usize,
    rng: &mut R,
    mut integrand: F,
) -> Result<Estimate, HarmonicError>
where
    R: Rng + ?Sized,
    F: FnMut(&FiniteConfiguration, &mut R) -> f64,
{
    let mut out = lp_integral_many(z, region, n_cap, mc, 1, rng, |eta, rng, v| {
        v[0] = integrand(eta, rng);
    })?;
    Ok(out.pop().expect("one component"))
}

/// Several Lebesgue–Poisson integrals over the same configuration draws;
/// `integrand` fills one value per component.
pub fn lp_integral_many<R, F>(
    z: f64,
    region: &Region,
    n_cap: usize,
    mc: usize,
    width: usize,
    rng: &mut R,
    mut integrand: F,
) -> Result<Vec<Estimate>, HarmonicError>
where
    R: Rng + ?Sized,
    F: FnMut(&FiniteConfiguration, &mut R, &mut [f64]),
{
    check_mc(mc)?;
    if !(z.is_finite() && z > 0.0) {
        return Err(HarmonicError::BadActivity(z));
    }
    if n_cap > N_MAX {
        return Err(HarmonicError::CardinalityCap { len: n_cap, cap: N_MAX });
    }
    let d = region.dim();
    let zv = z * region.volume();
    let mut value = vec![0.0; width];
    let mut var = vec![0.0; width];
    let mut coef = 1.0;
    let mut samples = vec![vec![0.0; mc]; width];
    let mut row = vec![0.0; width];
    for n in 0..=n_cap {
        if n > 0 {
            coef *= zv / n as f64;
        }
        let mut coords = vec![0.0; n * d];
        for s in 0..mc {
            for chunk in coords.chunks_exact_mut(d) {
                region.sample_into(rng, chunk);
            }
            let eta = FiniteConfiguration {
                dim: d,
                coords: coords.clone(),
            };
            row.iter_mut().for_each(|v| *v = 0.0);
            integrand(&eta, rng, &mut row);
            for (c, v) in row.iter().enumerate() {
                samples[c][s] = *v;
            }
        }
        for c in 0..width {
            let e = Estimate::from_samples(&samples[c]);
            value[c] += coef * e.value;
            var[c] += (coef * e.stderr).powi(2);
        }
    }
    Ok(value
        .into_iter()
        .zip(var)
        .map(|(value, v)| Estimate {
            value,
            stderr: v.sqrt(),
        })
        .collect())
}

/// `Σ_{n ≤ n_cap} zⁿ/n! ∫_{Λⁿ} G` by Monte Carlo; sectors above the
/// support cardinality of `g` are skipped (they vanish).
pub fn lp_integral<R: Rng + ?Sized>(
    g: &FiniteFunction,
    z: f64,
    region: &Region,
    n_cap: usize,
    mc: usize,
    rng: &mut R,
) -> Result<Estimate, HarmonicError> {
    lp_integral_with(z, region, n_cap.min(g.support_card()), mc, rng, |eta, _| g.eval(eta))
}

/// `‖G‖_C = ∫ |G(η)| C^{|η|} λ(dη)`, i.e. the Lebesgue–Poisson integral of
/// `|G|` at activity `C`.
pub fn weighted_l1_norm<R: Rng + ?Sized>(
    g: &FiniteFunction,
    c: f64,
    region: &Region,
    n_cap: usize,
    mc: usize,
    rng: &mut R,
) -> Result<Estimate, HarmonicError> {
    lp_integral_with(c, region, n_cap.min(g.support_card()), mc, rng, |eta, _| {
        g.eval(eta).abs()
    })
}

/// Both sides of the two-part Minlos identity for cardinality functions:
///
/// `Σ_{n₁,n₂≤N} (zV)^{n₁+n₂}/(n₁!n₂!) G(n₁+n₂) H(n₁,n₂)` and
/// `Σ_{n≤2N} (zV)ⁿ/n! G(n) Σ_k C(n,k) H(k,n−k)`,
///
/// where the inner sum on the right runs over `max(0,n−N) ≤ k ≤ min(n,N)` so
/// that both sides see exactly the same truncated set of partitions.
pub fn minlos_check(g: impl Fn(usize) -> f64, h: impl Fn(usize, usize) -> f64, zv: f64, n_cap: usize) -> (f64, f64) {
    let ln_fact: Vec<f64> = (0..=2 * n_cap + 1)
        .scan(0.0, |acc, k| {
            if k > 0 {
                *acc += (k as f64).ln();
            }
            Some(*acc)
        })
        .collect();
    // zv^n / (a! b!) without overflow for large caps
    let weight = |a: usize, b: usize| -> f64 {
        let n = a + b;
        let log_pow = if n == 0 { 0.0 } else { n as f64 * zv.abs().ln() };
        let sign = if zv < 0.0 && n % 2 == 1 { -1.0 } else { 1.0 };
        if zv == 0.0 {
            return if n == 0 { 1.0 } else { 0.0 };
        }
        sign * (log_pow - ln_fact[a] - ln_fact[b]).exp()
    };
    let mut lhs = 0.0;
    for n1 in 0..=n_cap {
        for n2 in 0..=n_cap {
            lhs += weight(n1, n2) * g(n1 + n2) * h(n1, n2);
        }
    }
    let mut rhs = 0.0;
    for n in 0..=2 * n_cap {
        let lo = n.saturating_sub(n_cap);
        let hi = n.min(n_cap);
        let inner: f64 = (lo..=hi).map(|k| weight(k, n - k) * h(k, n - k)).sum();
        rhs += g(n) * inner;
    }
    (lhs, rhs)
}

/// `⟨⟨L̂G, k⟩⟩` and `⟨⟨G, L̂*k⟩⟩` at unit activity. Each side integrates over
/// the support box of the function whose support confines its integrand.
pub fn adjointness_check<R: Rng + ?Sized>(
    params: &ModelParams,
    g: &FiniteFunction,
    k: &FiniteFunction,
    mc: usize,
    rng: &mut R,
) -> Result<(DualityPairing, DualityPairing), HarmonicError> {
    let (Some(region_g), Some(region_k)) = (g.support_region(), k.support_region()) else {
        return Err(HarmonicError::BadRegion);
    };
    let n_g = g.support_card().min(N_MAX - 1);
    let n_k = k.support_card().min(N_MAX - 1);
    let lhs = lp_integral_with(1.0, region_k, n_k, mc, rng, |eta, rng| {
        let kv = k.eval(eta);
        if kv == 0.0 {
            return 0.0;
        }
        let disp = Displacements::draw(&params.a_plus, eta.len(), 1, rng);
        symbol_parts(params, g, eta, row_or_empty(&disp, 0)).total() * kv
    })?;
    let rhs = lp_integral_with(1.0, region_g, n_g, mc, rng, |eta, rng| {
        let gv = g.eval(eta);
        if gv == 0.0 {
            return 0.0;
        }
        let plus = Displacements::draw(&params.a_plus, eta.len(), 1, rng);
        let minus = Displacements::draw(&params.a_minus, eta.len(), 1, rng);
        let (r, a) = adjoint_sampled(params, k, eta, row_or_empty(&plus, 0), row_or_empty(&minus, 0));
        gv * (adjoint_exact(params, k, eta) + r + a)
    })?;
    Ok((lhs.into(), rhs.into()))
}

/// Outcome of a pointwise check of `|Sk(η)|/C^{|η|} ≤ ρ‖k‖` on probe
/// configurations, `‖k‖ = sup |k(η)|/C^{|η|}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContractionReport {
    /// `Cκ⁻/m + κ⁺/m + 1/C`.
    pub rho: f64,
    /// Largest measured `|Sk(η)|/C^{|η|}` divided by `‖k‖`.
    pub ratio: f64,
    /// Largest `|Sk(η)|/C^{|η|} − ρ‖k‖ − 3·stderr` over the probes.
    pub worst_excess: f64,
    pub within_bound: bool,
    pub probes: usize,
}

pub fn s_contraction_check<R: Rng + ?Sized>(
    params: &ModelParams,
    c: f64,
    k: &FiniteFunction,
    k_norm: f64,
    probes: &[FiniteConfiguration],
    mc: usize,
    rng: &mut R,
) -> Result<ContractionReport, HarmonicError> {
    if params.m == 0.0 {
        return Err(HarmonicError::ZeroMortality);
    }
    let rho = c * params.kappa_minus / params.m + params.kappa_plus / params.m + 1.0 / c;
    let mut ratio: f64 = 0.0;
    let mut worst = f64::NEG_INFINITY;
    for eta in probes {
        let est = stationary_s_apply(params, k, eta, mc, rng)?;
        let scale = c.powi(eta.len() as i32);
        let measured = est.value.abs() / scale;
        ratio = ratio.max(measured / k_norm);
        worst = worst.max(measured - rho * k_norm - 3.0 * est.stderr / scale);
    }
    Ok(ContractionReport {
        rho,
        ratio,
        worst_excess: worst,
        within_bound: worst <= 0.0,
        probes: probes.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{KernelFamily, SpaceSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(points: &[f64]) -> FiniteConfiguration {
        FiniteConfiguration::from_flat(1, points.to_vec()).unwrap()
    }

    fn params(m: f64, kp: f64, km: f64) -> ModelParams {
        let g = Kernel::gaussian(1.0, 1).unwrap();
        ModelParams::new(m, kp, km, g.clone(), g, SpaceSpec::new(1, 100.0).unwrap()).unwrap()
    }

    fn binom(n: usize, k: usize) -> f64 {
        (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
    }

    #[test]
    fn k_transform_of_cardinality_indicators() {
        let gamma = cfg(&[0.1, 0.7, 1.3, 2.0, -4.0]);
        for n in 0..=3 {
            let g = FiniteFunction::indicator_of_cardinality(n, None);
            // brute force: subsets of size n
            assert_eq!(k_transform(&g, &gamma).unwrap(), binom(5, n));
        }
    }

    #[test]
    fn k_inverse_examples() {
        let one = FiniteFunction::of_cardinality(N_MAX, None, |_| 1.0);
        assert_eq!(k_inverse(&one, &FiniteConfiguration::empty(1)).unwrap(), 1.0);
        for n in 1..=5 {
            let eta = cfg(&(0..n).map(|i| i as f64).collect::<Vec<_>>());
            assert_eq!(k_inverse(&one, &eta).unwrap(), 0.0);
        }
        let count = FiniteFunction::of_cardinality(N_MAX, None, |n| n as f64);
        for n in 0..=5 {
            let eta = cfg(&(0..n).map(|i| i as f64).collect::<Vec<_>>());
            let expected = if n == 1 { 1.0 } else { 0.0 };
            assert_eq!(k_inverse(&count, &eta).unwrap(), expected);
        }
    }

    #[test]
    fn cardinality_cap_is_enforced() {
        let coords: Vec<f64> = (0..9).map(|i| i as f64).collect();
        assert!(matches!(
            FiniteConfiguration::from_flat(1, coords),
            Err(HarmonicError::CardinalityCap { len: 9, cap: 8 })
        ));
        assert_eq!(
            FiniteConfiguration::from_flat(1, vec![1.0, 1.0]),
            Err(HarmonicError::RepeatedPoint)
        );
    }

    #[test]
    fn interaction_energy_examples() {
        let a = Kernel::gaussian(1.0, 1).unwrap();
        assert_eq!(interaction_energy(&a, &cfg(&[])), 0.0);
        assert_eq!(interaction_energy(&a, &cfg(&[3.0])), 0.0);
        let two = interaction_energy(&a, &cfg(&[0.0, 1.5]));
        assert!((two - 2.0 * a.density_at(1.5)).abs() < 1e-15);
        let three = interaction_energy(&a, &cfg(&[0.0, 1.0, 2.0]));
        let a1 = (-0.5f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let a2 = (-2.0f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert!((three - (4.0 * a1 + 2.0 * a2)).abs() < 1e-15);
    }

    #[test]
    fn generator_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = params(1.3, 0.7, 0.0);
        let f = FiniteFunction::indicator_of_cardinality(0, None);
        let empty = FiniteConfiguration::empty(1);
        assert_eq!(apply_generator(&p, &f, &empty, 10, &mut rng).unwrap().value, 0.0);
        let one = apply_generator(&p, &f, &cfg(&[0.4]), 10, &mut rng).unwrap();
        assert_eq!(one.value, 1.3);
        assert_eq!(one.stderr, 0.0);
        let count = FiniteFunction::of_cardinality(N_MAX, None, |n| n as f64);
        let gamma = cfg(&[0.0, 2.0, 5.0]);
        let e = apply_generator(&p, &count, &gamma, 100, &mut rng).unwrap();
        assert!((e.value - (0.7 - 1.3) * 3.0).abs() <= 3.0 * e.stderr + 1e-12);
        assert_eq!(
            apply_generator(&p, &count, &gamma, 1, &mut rng),
            Err(HarmonicError::TooFewSamples(1))
        );
    }

    #[test]
    fn symbol_on_singletons_reduces_to_replacement() {
        let p = params(1.1, 0.9, 0.5);
        let g = FiniteFunction::new(1, None, |eta| {
            if eta.len() == 1 {
                (-eta.point(0)[0].powi(2)).exp()
            } else {
                0.0
            }
        });
        let x = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = apply_symbol(&p, &g, &cfg(&[x]), 200_000, &mut rng).unwrap();
        // E exp(-(x+ξ)²), ξ ~ N(0,1): exp(-x²/3)/√3
        let expected = -1.1 * (-x * x).exp() + 0.9 * (-x * x / 3.0).exp() / 3f64.sqrt();
        assert!((e.value - expected).abs() <= 3.0 * e.stderr, "{e:?} vs {expected}");
        let empty = apply_symbol(&p, &g, &FiniteConfiguration::empty(1), 10, &mut rng).unwrap();
        assert_eq!(empty.value, 0.0);
    }

    #[test]
    fn symbol_matches_conjugated_generator() {
        let p = params(0.8, 1.2, 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = FiniteFunction::new(3, Some(Region::cube(1, -1.0, 2.0).unwrap()), |eta| {
            let s: f64 = eta.points().map(|x| x[0]).sum();
            (1.0 + eta.len() as f64) * (0.5 * s).cos()
        });
        for eta in [cfg(&[0.2]), cfg(&[0.0, 0.9]), cfg(&[-0.5, 0.4, 1.1])] {
            let cmp = compare_symbol_with_oracle(&p, &g, &eta, 2000, &mut rng).unwrap();
            assert!(cmp.agrees(3.0), "{cmp:?}");
            assert!(cmp.difference.value.abs() < 1e-10, "{cmp:?}");
        }
    }

    #[test]
    fn adjoint_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k1 = 0.6;
        let q = |u: f64| 0.36 * (1.0 - 0.5 * (-u * u).exp());
        let k = FiniteFunction::new(2, None, move |eta| match eta.len() {
            0 => 1.0,
            1 => k1,
            _ => q(eta.point(1)[0] - eta.point(0)[0]),
        });
        let p = params(1.5, 0.8, 0.7);
        let x = 0.25;
        let e = apply_symbol_adjoint(&p, &k, &cfg(&[x]), 200_000, &mut rng).unwrap();
        // E q(ξ), ξ ~ N(0,1): 0.36 (1 − 0.5/√3)
        let expected = (0.8 - 1.5) * k1 - 0.7 * 0.36 * (1.0 - 0.5 / 3f64.sqrt());
        assert!((e.value - expected).abs() <= 3.0 * e.stderr, "{e:?} vs {expected}");
        let e0 = apply_symbol_adjoint(&p, &k, &FiniteConfiguration::empty(1), 10, &mut rng).unwrap();
        assert_eq!(e0.value, 0.0);
        let pure_death = params(1.5, 0.0, 0.0);
        let eta = cfg(&[0.0, 1.0]);
        let e = apply_symbol_adjoint(&pure_death, &k, &eta, 10, &mut rng).unwrap();
        assert_eq!(e.value, -1.5 * 2.0 * k.eval(&eta));
    }

    #[test]
    fn lp_integral_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let region = Region::cube(1, 0.0, 1.5).unwrap();
        let empty = FiniteFunction::indicator_of_cardinality(0, None);
        assert_eq!(lp_integral(&empty, 0.7, &region, 4, 10, &mut rng).unwrap().value, 1.0);
        let all = FiniteFunction::of_cardinality(5, None, |_| 1.0);
        let e = lp_integral(&all, 0.7, &region, 5, 10, &mut rng).unwrap();
        let zv: f64 = 0.7 * 1.5;
        let series: f64 = (0..=5).map(|n| zv.powi(n) / (1..=n).product::<i32>() as f64).sum();
        assert!((e.value - series).abs() < 1e-12);
        let inner = Region::cube(1, 0.0, 0.5).unwrap();
        let singles = FiniteFunction::indicator_of_cardinality(1, Some(inner));
        let e = lp_integral(&singles, 0.7, &region, 3, 20_000, &mut rng).unwrap();
        assert!((e.value - 0.35).abs() <= 3.0 * e.stderr, "{e:?}");
    }

    #[test]
    fn minlos_examples() {
        let (l, r) = minlos_check(|_| 1.0, |_, _| 1.0, 1.0, 30);
        let e2 = std::f64::consts::E.powi(2);
        assert!((l - e2).abs() / e2 < 1e-10 && (r - l).abs() / l < 1e-10);
        let (l, r) = minlos_check(|_| 1.0, |_, n2| if n2 == 0 { 1.0 } else { 0.0 }, 1.0, 30);
        assert!((l - std::f64::consts::E).abs() < 1e-12 && (r - l).abs() < 1e-12);
        let (l, r) = minlos_check(|n| if n == 2 { 1.0 } else { 0.0 }, |_, _| 1.0, 1.0, 30);
        assert!((l - 2.0).abs() < 1e-14 && (r - 2.0).abs() < 1e-14);
    }

    #[test]
    fn stationary_operator_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = params(20.0, 1.0, 1.0);
        let k = FiniteFunction::of_cardinality(3, None, |n| 4f64.powi(n as i32));
        let e = stationary_s_apply(&p, &k, &FiniteConfiguration::empty(1), 10, &mut rng).unwrap();
        assert_eq!(e.value, 0.0);
        let zero = FiniteFunction::zero();
        let e = stationary_s_apply(&p, &zero, &cfg(&[0.0, 1.0]), 10, &mut rng).unwrap();
        assert_eq!(e.value, 0.0);
        let dead = params(0.0, 1.0, 1.0);
        assert_eq!(
            stationary_s_apply(&dead, &k, &cfg(&[0.0]), 10, &mut rng),
            Err(HarmonicError::ZeroMortality)
        );
    }

    #[test]
    fn tophat_symbol_identity_in_two_dimensions() {
        let t = Kernel::new(KernelFamily::Tophat, 0.8, 2).unwrap();
        let p = ModelParams::new(1.0, 0.6, 0.4, t.clone(), t, SpaceSpec::new(2, 10.0).unwrap()).unwrap();
        let g = FiniteFunction::new(2, None, |eta| {
            eta.points().map(|x| 1.0 / (1.0 + x[0] * x[0] + x[1] * x[1])).product()
        });
        let eta = FiniteConfiguration::new(2, &[vec![0.0, 0.1], vec![0.5, -0.2]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cmp = compare_symbol_with_oracle(&p, &g, &eta, 500, &mut rng).unwrap();
        assert!(cmp.difference.value.abs() < 1e-12, "{cmp:?}");
    }
}
