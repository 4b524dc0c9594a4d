//! Dispersal (`a⁺`) and competition (`a⁻`) kernels.
//!
//! All shipped families are isotropic, radially nonincreasing probability
//! densities on R^d with closed-form normalization, exact samplers and
//! analytic Fourier transforms:
//!
//! | family    | density ∝                | transform `â(p)`, `x = σ|p|`          |
//! |-----------|--------------------------|----------------------------------------|
//! | gaussian  | `exp(-r²/2σ²)`           | `exp(-x²/2)`                           |
//! | tophat    | `1{r ≤ σ}`               | `sinc x`, `2J₁(x)/x`, `3(sin x − x cos x)/x³` |
//! | laplace   | `exp(-r/σ)`              | `(1 + x²)^{-(d+1)/2}`                  |
//!
//! On the torus the periodized kernel `a_L(u) = Σ_n a(u + nL)` keeps every
//! image closer than the truncation radius `r_cut`, outside of which the
//! free-space tail carries less than [`TAIL_MASS`].

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;
use thiserror::Error;

use crate::special::{bessel_j1, even_series, factorial, unit_ball_volume, unit_sphere_area};

/// Probability mass allowed outside the truncation radius.
pub const TAIL_MASS: f64 = 1e-6;

/// Tail mass actually targeted by `r_cut`, leaving headroom under [`TAIL_MASS`]
/// for quadrature checks of the truncated periodized kernel.
const CUT_TARGET: f64 = 0.1 * TAIL_MASS;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("dimension must be 1, 2 or 3, got {0}")]
    BadDimension(usize),
    #[error("kernel scale must be finite and positive, got {0}")]
    BadScale(f64),
    #[error("torus side length must be finite and positive, got {0}")]
    BadLength(f64),
    #[error("vector has {got} components but the kernel lives in dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{name} must be finite and nonnegative, got {value}")]
    BadRate { name: &'static str, value: f64 },
    #[error("torus side {length} is shorter than six kernel scales ({min})")]
    TorusTooSmall { length: f64, min: f64 },
}

/// Periodic habitat `[0, L)^d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceSpec {
    dim: usize,
    length: f64,
}

impl SpaceSpec {
    pub fn new(dim: usize, length: f64) -> Result<Self, KernelError> {
        if !(1..=3).contains(&dim) {
            return Err(KernelError::BadDimension(dim));
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(KernelError::BadLength(length));
        }
        Ok(Self { dim, length })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn volume(&self) -> f64 {
        self.length.powi(self.dim as i32)
    }

    /// Replaces each component by its minimal-image representative in `[-L/2, L/2)`.
    pub fn min_image(&self, u: &mut [f64]) {
        let l = self.length;
        for c in u.iter_mut() {
            *c -= l * (*c / l).round();
        }
    }

    /// Wraps a position into the fundamental cell `[0, L)^d`.
    pub fn wrap(&self, x: &mut [f64]) {
        let l = self.length;
        for c in x.iter_mut() {
            *c = c.rem_euclid(l);
            // rem_euclid can round up to exactly L for tiny negative inputs
            if *c >= l {
                *c = 0.0;
            }
        }
    }

    /// Squared minimal-image distance between two positions.
    pub fn distance_sq(&self, x: &[f64], y: &[f64]) -> f64 {
        let l = self.length;
        x.iter()
            .zip(y)
            .map(|(a, b)| {
                let mut d = a - b;
                d -= l * (d / l).round();
                d * d
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Gaussian,
    Tophat,
    Laplace,
}

/// Configuration-file form of a kernel: `{"family": "gaussian", "sigma": 1.0}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub sigma: f64,
}

/// Log-density of a radial kernel beyond the origin:
/// `ln a(r) = log_peak − linear·r − quadratic·r²` for `r ≤ support`, and
/// `a(r) = 0` past `support`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailShape {
    pub log_peak: f64,
    pub linear: f64,
    pub quadratic: f64,
    pub support: Option<f64>,
}

/// An even probability density on R^d.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    family: KernelFamily,
    sigma: f64,
    dim: usize,
    r_cut: f64,
    norm_const: f64,
}

impl Kernel {
    pub fn new(family: KernelFamily, sigma: f64, dim: usize) -> Result<Self, KernelError> {
        if !(1..=3).contains(&dim) {
            return Err(KernelError::BadDimension(dim));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(KernelError::BadScale(sigma));
        }
        let d = dim as f64;
        let norm_const = match family {
            KernelFamily::Gaussian => (2.0 * PI * sigma * sigma).powf(d / 2.0),
            KernelFamily::Tophat => unit_ball_volume(dim) * sigma.powi(dim as i32),
            KernelFamily::Laplace => unit_sphere_area(dim) * sigma.powi(dim as i32) * factorial(dim - 1),
        };
        let mut kernel = Self {
            family,
            sigma,
            dim,
            r_cut: sigma,
            norm_const,
        };
        kernel.r_cut = kernel.truncation_radius();
        Ok(kernel)
    }

    pub fn gaussian(sigma: f64, dim: usize) -> Result<Self, KernelError> {
        Self::new(KernelFamily::Gaussian, sigma, dim)
    }

    pub fn tophat(radius: f64, dim: usize) -> Result<Self, KernelError> {
        Self::new(KernelFamily::Tophat, radius, dim)
    }

    pub fn laplace(sigma: f64, dim: usize) -> Result<Self, KernelError> {
        Self::new(KernelFamily::Laplace, sigma, dim)
    }

    pub fn from_spec(spec: KernelSpec, dim: usize) -> Result<Self, KernelError> {
        Self::new(spec.family, spec.sigma, dim)
    }

    pub fn spec(&self) -> KernelSpec {
        KernelSpec {
            family: self.family,
            sigma: self.sigma,
        }
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Radius beyond which the free-space mass is below [`TAIL_MASS`].
    pub fn r_cut(&self) -> f64 {
        self.r_cut
    }

    pub fn norm_const(&self) -> f64 {
        self.norm_const
    }

    /// Probability mass of the free-space density outside the ball of radius `r`.
    pub fn tail_mass(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return 1.0;
        }
        let d = self.dim as f64;
        match self.family {
            KernelFamily::Gaussian => gamma_ur(d / 2.0, r * r / (2.0 * self.sigma * self.sigma)),
            KernelFamily::Laplace => gamma_ur(d, r / self.sigma),
            KernelFamily::Tophat => {
                if r >= self.sigma {
                    0.0
                } else {
                    1.0 - (r / self.sigma).powi(self.dim as i32)
                }
            }
        }
    }

    fn truncation_radius(&self) -> f64 {
        if self.family == KernelFamily::Tophat {
            return self.sigma;
        }
        let (mut lo, mut hi) = (0.0, self.sigma);
        while self.tail_mass(hi) > CUT_TARGET {
            lo = hi;
            hi *= 2.0;
        }
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if self.tail_mass(mid) > CUT_TARGET {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    }

    /// Free-space density at distance `r ≥ 0` from the origin.
    #[inline]
    pub fn density_at(&self, r: f64) -> f64 {
        let s = self.sigma;
        match self.family {
            KernelFamily::Gaussian => (-0.5 * r * r / (s * s)).exp() / self.norm_const,
            KernelFamily::Tophat => {
                if r <= s {
                    1.0 / self.norm_const
                } else {
                    0.0
                }
            }
            KernelFamily::Laplace => (-r / s).exp() / self.norm_const,
        }
    }

    /// `‖a‖_∞`, attained at the origin for every shipped family.
    pub fn sup_norm(&self) -> f64 {
        self.density_at(0.0)
    }

    fn check_dim(&self, len: usize) -> Result<(), KernelError> {
        if len != self.dim {
            return Err(KernelError::DimensionMismatch {
                expected: self.dim,
                got: len,
            });
        }
        Ok(())
    }

    /// Free-space density `a(u)`.
    pub fn eval(&self, u: &[f64]) -> Result<f64, KernelError> {
        self.check_dim(u.len())?;
        Ok(self.density_at(norm(u)))
    }

    /// Periodized density `a_L(u)` on the torus described by `space`.
    pub fn eval_periodic(&self, u: &[f64], space: &SpaceSpec) -> Result<f64, KernelError> {
        self.check_dim(u.len())?;
        if space.dim() != self.dim {
            return Err(KernelError::DimensionMismatch {
                expected: self.dim,
                got: space.dim(),
            });
        }
        let mut v = [0.0; 3];
        v[..self.dim].copy_from_slice(u);
        space.min_image(&mut v[..self.dim]);
        Ok(self.periodic_density(&v[..self.dim], space.length()))
    }

    /// Periodized density for a displacement already reduced to its minimal image.
    #[inline]
    pub fn periodic_density(&self, u: &[f64], length: f64) -> f64 {
        let r_cut = self.r_cut;
        if 2.0 * r_cut < length {
            let r2: f64 = u.iter().map(|c| c * c).sum();
            return if r2 <= r_cut * r_cut {
                self.density_at(r2.sqrt())
            } else {
                0.0
            };
        }
        let reach = (r_cut / length).ceil() as i64 + 1;
        let span = (2 * reach + 1) as usize;
        let mut total = 0.0;
        for flat in 0..span.pow(self.dim as u32) {
            let mut rem = flat;
            let mut r2 = 0.0;
            for c in u.iter() {
                let n = (rem % span) as i64 - reach;
                rem /= span;
                let shifted = c + n as f64 * length;
                r2 += shifted * shifted;
            }
            if r2 <= r_cut * r_cut {
                total += self.density_at(r2.sqrt());
            }
        }
        total
    }

    /// Draws one displacement from the free-space density into `out`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim);
        let s = self.sigma;
        match self.family {
            KernelFamily::Gaussian => {
                for c in out.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *c = s * z;
                }
            }
            KernelFamily::Tophat => {
                if self.dim == 1 {
                    out[0] = rng.random_range(-s..=s);
                } else {
                    let r = s * rng.random::<f64>().powf(1.0 / self.dim as f64);
                    random_direction(rng, out);
                    out.iter_mut().for_each(|c| *c *= r);
                }
            }
            KernelFamily::Laplace => {
                let r = Gamma::new(self.dim as f64, s)
                    .expect("shape and scale are positive")
                    .sample(rng);
                random_direction(rng, out);
                out.iter_mut().for_each(|c| *c *= r);
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.sample_into(rng, &mut out);
        out
    }

    /// `â(p) = ∫ e^{-i p·x} a(x) dx`; real because `a` is even.
    pub fn fourier(&self, p: &[f64]) -> f64 {
        self.fourier_radial(norm(p))
    }

    /// Fourier transform as a function of `|p|`.
    pub fn fourier_radial(&self, p: f64) -> f64 {
        let x = p.abs() * self.sigma;
        match self.family {
            KernelFamily::Gaussian => (-0.5 * x * x).exp(),
            KernelFamily::Laplace => (1.0 + x * x).powf(-(self.dim as f64 + 1.0) / 2.0),
            KernelFamily::Tophat => {
                if x < 0.5 {
                    1.0 - self.one_minus_fourier_radial(p)
                } else {
                    match self.dim {
                        1 => x.sin() / x,
                        2 => 2.0 * bessel_j1(x) / x,
                        _ => 3.0 * (x.sin() - x * x.cos()) / (x * x * x),
                    }
                }
            }
        }
    }

    /// `1 − â(|p|)`, accurate for small `|p|` where the difference cancels.
    pub fn one_minus_fourier_radial(&self, p: f64) -> f64 {
        let x = p.abs() * self.sigma;
        match self.family {
            KernelFamily::Gaussian => -(-0.5 * x * x).exp_m1(),
            KernelFamily::Laplace => -(-(self.dim as f64 + 1.0) / 2.0 * (x * x).ln_1p()).exp_m1(),
            KernelFamily::Tophat => {
                if x >= 0.5 {
                    return 1.0 - self.fourier_radial(p);
                }
                // Taylor coefficients of 1 − â, starting at x²
                let sign = |k: usize| if k % 2 == 1 { 1.0 } else { -1.0 };
                match self.dim {
                    1 => even_series(x, 1, |k| sign(k) / factorial(2 * k + 1)),
                    2 => even_series(x, 1, |k| {
                        sign(k) / (factorial(k) * factorial(k + 1) * 4f64.powi(k as i32))
                    }),
                    _ => even_series(x, 1, |k| sign(k) * 3.0 / ((2 * k + 3) as f64 * factorial(2 * k + 1))),
                }
            }
        }
    }

    /// `E|X|²` under the density.
    pub fn second_moment(&self) -> f64 {
        let d = self.dim as f64;
        let s2 = self.sigma * self.sigma;
        match self.family {
            KernelFamily::Gaussian => d * s2,
            KernelFamily::Tophat => d / (d + 2.0) * s2,
            KernelFamily::Laplace => d * (d + 1.0) * s2,
        }
    }

    /// Closed-form log-density used to compare kernel tails analytically.
    pub fn tail_shape(&self) -> TailShape {
        let log_peak = -self.norm_const.ln();
        let s = self.sigma;
        match self.family {
            KernelFamily::Gaussian => TailShape {
                log_peak,
                linear: 0.0,
                quadratic: 0.5 / (s * s),
                support: None,
            },
            KernelFamily::Laplace => TailShape {
                log_peak,
                linear: 1.0 / s,
                quadratic: 0.0,
                support: None,
            },
            KernelFamily::Tophat => TailShape {
                log_peak,
                linear: 0.0,
                quadratic: 0.0,
                support: Some(s),
            },
        }
    }

    /// Cumulative distribution of one coordinate in d = 1 (used by goodness-of-fit checks).
    pub fn cdf_1d(&self, x: f64) -> f64 {
        let s = self.sigma;
        match self.family {
            KernelFamily::Gaussian => 0.5 * statrs::function::erf::erfc(-x / (s * 2f64.sqrt())),
            KernelFamily::Tophat => ((x + s) / (2.0 * s)).clamp(0.0, 1.0),
            KernelFamily::Laplace => {
                if x < 0.0 {
                    0.5 * (x / s).exp()
                } else {
                    1.0 - 0.5 * (-x / s).exp()
                }
            }
        }
    }
}

fn norm(u: &[f64]) -> f64 {
    u.iter().map(|c| c * c).sum::<f64>().sqrt()
}

fn random_direction<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    if out.len() == 1 {
        out[0] = if rng.random::<bool>() { 1.0 } else { -1.0 };
        return;
    }
    loop {
        let mut n2 = 0.0;
        for c in out.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *c = z;
            n2 += z * z;
        }
        if n2 > 1e-300 {
            let inv = 1.0 / n2.sqrt();
            out.iter_mut().for_each(|c| *c *= inv);
            return;
        }
    }
}

/// Full parameter set of the birth-and-death model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Intrinsic mortality (1/time).
    pub m: f64,
    /// Fecundity (1/time).
    pub kappa_plus: f64,
    /// Competition strength (volume/time).
    pub kappa_minus: f64,
    pub a_plus: Kernel,
    pub a_minus: Kernel,
    pub space: SpaceSpec,
}

impl ModelParams {
    pub fn new(
        m: f64,
        kappa_plus: f64,
        kappa_minus: f64,
        a_plus: Kernel,
        a_minus: Kernel,
        space: SpaceSpec,
    ) -> Result<Self, KernelError> {
        for (name, value) in [("m", m), ("kappa_plus", kappa_plus), ("kappa_minus", kappa_minus)] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(KernelError::BadRate { name, value });
            }
        }
        for k in [&a_plus, &a_minus] {
            if k.dim() != space.dim() {
                return Err(KernelError::DimensionMismatch {
                    expected: space.dim(),
                    got: k.dim(),
                });
            }
        }
        let min = 6.0 * a_plus.sigma().max(a_minus.sigma());
        if space.length() < min {
            return Err(KernelError::TorusTooSmall {
                length: space.length(),
                min,
            });
        }
        Ok(Self {
            m,
            kappa_plus,
            kappa_minus,
            a_plus,
            a_minus,
            space,
        })
    }
}
