//! Verdicts for the parameter conditions and operator inequalities of the model.

use std::io::{self, Write};
use std::num::NonZeroUsize;

use gauss_quad::GaussLegendre;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::harmonic::{
    lp_integral_many, symbol_parts, Displacements, Estimate, FiniteFunction, HarmonicError, Region, N_MAX,
};
use crate::kernels::{Kernel, KernelSpec, ModelParams, SpaceSpec, TailShape};

/// Radial grid points used for pointwise kernel comparisons.
pub const POINTWISE_GRID: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("constant C must be positive and finite, got {0}")]
    BadC(f64),
    #[error("no z > 0 with a+ ≥ z·a- everywhere (inf a+/a- = {0})")]
    NoValidZ(f64),
    #[error("scan needs kappa_minus > 0 to choose t")]
    NoCompetition,
    #[error("box sides must be positive and increasing")]
    BadBoxes,
    #[error("parameter t must be positive, got {0}")]
    BadT(f64),
    #[error("function must have a bounded support region and at most {max} points")]
    BadSupport { max: usize },
    #[error(transparent)]
    Harmonic(#[from] HarmonicError),
}

fn check_c(c: f64) -> Result<(), AnalysisError> {
    if c.is_finite() && c > 0.0 {
        Ok(())
    } else {
        Err(AnalysisError::BadC(c))
    }
}

/// One verdict. Composite conditions list their parts in `components`; the
/// top-level `margin` is the smallest component margin.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub name: String,
    pub pass: bool,
    pub margin: f64,
    /// Point where a pointwise condition fails.
    pub witness: Option<Vec<f64>>,
    /// Quantity the condition compares against its threshold (ρ for the
    /// stationary contraction).
    pub value: Option<f64>,
    pub components: Vec<ConditionReport>,
}

impl ConditionReport {
    fn leaf(name: &str, pass: bool, margin: f64) -> Self {
        Self {
            name: name.into(),
            pass,
            margin,
            witness: None,
            value: None,
            components: Vec::new(),
        }
    }

    fn composite(name: &str, components: Vec<ConditionReport>) -> Self {
        Self {
            name: name.into(),
            pass: components.iter().all(|c| c.pass),
            margin: components.iter().map(|c| c.margin).fold(f64::INFINITY, f64::min),
            witness: components.iter().find_map(|c| c.witness.clone()),
            value: None,
            components,
        }
    }

    pub fn component(&self, name: &str) -> Option<&ConditionReport> {
        self.components.iter().find(|c| c.name == name)
    }

    /// The report followed by its components, depth first.
    pub fn flatten(&self) -> Vec<&ConditionReport> {
        let mut out = vec![self];
        for c in &self.components {
            out.extend(c.flatten());
        }
        out
    }
}

/// `ln(coef·a(r)) − ln(coef'·a'(r))` on the common support, as `A + B r + Q r²`.
struct LogGap {
    a: f64,
    b: f64,
    q: f64,
}

impl LogGap {
    fn new(coef_l: f64, l: &TailShape, coef_r: f64, r: &TailShape) -> Self {
        Self {
            a: coef_l.ln() + l.log_peak - coef_r.ln() - r.log_peak,
            b: r.linear - l.linear,
            q: r.quadratic - l.quadratic,
        }
    }

    fn at(&self, r: f64) -> f64 {
        self.a + self.b * r + self.q * r * r
    }

    /// A radius in `[lo, hi]` where the gap is negative, if any.
    fn negative_point(&self, lo: f64, hi: f64) -> Option<f64> {
        const SLACK: f64 = -1e-12;
        let mut candidates = vec![lo];
        if hi.is_finite() {
            candidates.push(hi);
        }
        if self.q > 0.0 {
            let vertex = -self.b / (2.0 * self.q);
            if vertex > lo && vertex < hi {
                candidates.push(vertex);
            }
        }
        if let Some(r) = candidates.into_iter().find(|&r| self.at(r) < SLACK) {
            return Some(r);
        }
        if hi.is_infinite() && (self.q < 0.0 || (self.q == 0.0 && self.b < 0.0)) {
            // the gap eventually goes negative; step out until it does
            let mut r = lo.max(1.0);
            while self.at(r) >= SLACK {
                r *= 2.0;
            }
            return Some(r);
        }
        None
    }
}

/// Checks `coef_l·a_l(u) ≥ coef_r·a_r(u)` for all `u`: a radial grid on
/// `[0, √d·R]` with `R` the larger truncation radius, then the closed-form
/// log-densities beyond it. Returns the grid margin and a failing radius.
fn pointwise_domination(coef_l: f64, l: &Kernel, coef_r: f64, r: &Kernel) -> (f64, Option<f64>) {
    let dim = l.dim();
    let reach = l.r_cut().max(r.r_cut()) * (dim as f64).sqrt();
    let mut margin = f64::INFINITY;
    let mut witness = None;
    for i in 0..POINTWISE_GRID {
        let rad = reach * i as f64 / (POINTWISE_GRID - 1) as f64;
        let gap = coef_l * l.density_at(rad) - coef_r * r.density_at(rad);
        if gap < margin {
            margin = gap;
        }
        if gap < 0.0 && witness.is_none() {
            witness = Some(rad);
        }
    }
    if witness.is_some() || coef_r == 0.0 {
        return (margin, witness);
    }
    let (sl, sr) = (l.tail_shape(), r.tail_shape());
    let end_l = sl.support.unwrap_or(f64::INFINITY);
    let end_r = sr.support.unwrap_or(f64::INFINITY);
    if end_r <= reach {
        return (margin, None);
    }
    if coef_l == 0.0 || end_l < end_r && end_l <= reach {
        return (margin, Some(reach));
    }
    let common = end_l.min(end_r);
    let gap = LogGap::new(coef_l, &sl, coef_r, &sr);
    if let Some(rad) = gap.negative_point(reach, common) {
        let value = coef_l * l.density_at(rad) - coef_r * r.density_at(rad);
        return (margin.min(value), Some(rad));
    }
    if end_l < end_r {
        // a_l has ended while a_r is still positive
        let rad = end_l + 1e-9 * (1.0 + end_l);
        return (margin.min(-coef_r * r.density_at(rad)), Some(rad));
    }
    (margin, None)
}

fn radial_point(dim: usize, r: f64) -> Vec<f64> {
    let mut p = vec![0.0; dim];
    p[0] = r;
    p
}

fn domination_report(name: &str, coef_l: f64, l: &Kernel, coef_r: f64, r: &Kernel) -> ConditionReport {
    let (margin, witness) = pointwise_domination(coef_l, l, coef_r, r);
    ConditionReport {
        witness: witness.map(|w| radial_point(l.dim(), w)),
        ..ConditionReport::leaf(name, witness.is_none(), margin)
    }
}

/// `Cκ⁻a⁻ ≥ 2κ⁺a⁺` pointwise and `m > 2(κ⁻C + κ⁺)`.
pub fn check_semigroup_conditions(params: &ModelParams, c: f64) -> Result<ConditionReport, AnalysisError> {
    check_c(c)?;
    let kernels = domination_report(
        "semigroup_kernel_domination",
        c * params.kappa_minus,
        &params.a_minus,
        2.0 * params.kappa_plus,
        &params.a_plus,
    );
    let threshold = 2.0 * (params.kappa_minus * c + params.kappa_plus);
    let margin = params.m - threshold;
    let mortality = ConditionReport {
        value: Some(threshold),
        ..ConditionReport::leaf("semigroup_mortality", margin > 0.0, margin)
    };
    Ok(ConditionReport::composite("semigroup", vec![kernels, mortality]))
}

/// `ρ = Cκ⁻/m + κ⁺/m + 1/C`.
pub fn stationary_rho(params: &ModelParams, c: f64) -> f64 {
    if params.m == 0.0 {
        return f64::INFINITY;
    }
    (c * params.kappa_minus + params.kappa_plus) / params.m + 1.0 / c
}

/// `ρ < 1` and `κ⁻a⁻ ≥ κ⁺a⁺` pointwise.
pub fn check_stationary_conditions(params: &ModelParams, c: f64) -> Result<ConditionReport, AnalysisError> {
    check_c(c)?;
    let rho = stationary_rho(params, c);
    let contraction = ConditionReport {
        value: Some(rho),
        ..ConditionReport::leaf("stationary_contraction", rho < 1.0, 1.0 - rho)
    };
    let kernels = domination_report(
        "stationary_kernel_domination",
        params.kappa_minus,
        &params.a_minus,
        params.kappa_plus,
        &params.a_plus,
    );
    let mut report = ConditionReport::composite("stationary", vec![contraction, kernels]);
    report.value = Some(rho);
    Ok(report)
}

/// `(inf, sup)` of `num(r)/den(r)` over all radii where `den > 0`, from the
/// radial grid and the closed-form tails.
pub fn kernel_ratio_bounds(num: &Kernel, den: &Kernel) -> (f64, f64) {
    let reach = num.r_cut().max(den.r_cut()) * (num.dim() as f64).sqrt();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for i in 0..POINTWISE_GRID {
        let r = reach * i as f64 / (POINTWISE_GRID - 1) as f64;
        let d = den.density_at(r);
        if d > 0.0 {
            let ratio = num.density_at(r) / d;
            lo = lo.min(ratio);
            hi = hi.max(ratio);
        }
    }
    let (sn, sd) = (num.tail_shape(), den.tail_shape());
    let end_n = sn.support.unwrap_or(f64::INFINITY);
    let end_d = sd.support.unwrap_or(f64::INFINITY);
    if end_d > reach {
        if end_n < end_d {
            lo = 0.0;
        }
        let gap = LogGap::new(1.0, &sn, 1.0, &sd);
        let end = end_n.min(end_d);
        if end.is_infinite() {
            // the sign of the leading coefficient decides the limit
            let lead = if gap.q != 0.0 { gap.q } else { gap.b };
            if lead > 0.0 {
                hi = f64::INFINITY;
            } else if lead < 0.0 {
                lo = 0.0;
            }
        }
        for r in [reach, end] {
            if r.is_finite() && r <= end {
                let ratio = gap.at(r).exp();
                lo = lo.min(ratio);
                hi = hi.max(ratio);
            }
        }
        if gap.q < 0.0 {
            let vertex = -gap.b / (2.0 * gap.q);
            if vertex > reach && vertex < end {
                hi = hi.max(gap.at(vertex).exp());
            }
        }
    }
    (lo, hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

/// `lhs ≤ rhs` estimated on shared configuration draws.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InequalityCheck {
    pub name: String,
    pub coefficient: f64,
    pub lhs: Estimate,
    pub rhs: Estimate,
    /// `rhs − lhs`, with the standard error of the paired difference.
    pub difference: Estimate,
    pub verdict: Verdict,
    /// Sample count per sector expected to make an inconclusive check decisive.
    pub suggested_mc: Option<usize>,
}

fn decide(
    name: &str,
    coefficient: f64,
    lhs: Estimate,
    rhs: Estimate,
    difference: Estimate,
    mc: usize,
) -> InequalityCheck {
    let band = 3.0 * difference.stderr;
    let (verdict, suggested_mc) = if coefficient.is_infinite() {
        (Verdict::Pass, None)
    } else if difference.value < -band {
        (Verdict::Fail, None)
    } else if band <= 0.1 * rhs.value.abs() || band == 0.0 {
        (Verdict::Pass, None)
    } else {
        let target = 0.1 * rhs.value.abs();
        let factor = if target > 0.0 { (band / target).powi(2) } else { 100.0 };
        (Verdict::Inconclusive, Some((mc as f64 * factor).ceil() as usize))
    };
    InequalityCheck {
        name: name.into(),
        coefficient,
        lhs,
        rhs,
        difference,
        verdict,
        suggested_mc,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RelativeBoundReport {
    pub c: f64,
    pub mc: usize,
    pub norm_l0: Estimate,
    pub norm_n: Estimate,
    pub checks: Vec<InequalityCheck>,
}

impl RelativeBoundReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.verdict == Verdict::Pass)
    }

    pub fn any_fail(&self) -> bool {
        self.checks.iter().any(|c| c.verdict == Verdict::Fail)
    }
}

/// Smallest `δ` with `κ⁺E^{a⁺}(η) ≤ δ·C(m|η| + κ⁻E^{a⁻}(η))` on configurations
/// of at most `card` points, from `E⁺ ≤ ‖a⁺‖∞(card−1)|η|` and `E⁺ ≤ sup(a⁺/a⁻)·E⁻`.
pub fn l3_coefficient(params: &ModelParams, c: f64, card: usize) -> f64 {
    let kp = params.kappa_plus;
    if kp == 0.0 || card <= 1 {
        return 0.0;
    }
    let by_mortality = if params.m > 0.0 {
        params.a_plus.sup_norm() * (card - 1) as f64 / params.m
    } else {
        f64::INFINITY
    };
    let by_competition = if params.kappa_minus > 0.0 {
        kernel_ratio_bounds(&params.a_plus, &params.a_minus).1 / params.kappa_minus
    } else {
        f64::INFINITY
    };
    kp / c * by_mortality.min(by_competition)
}

/// Monte-Carlo check of the relative bounds of `L₁, L₂, L₃` against `L₀`
/// and of `L₁, L₂` against the number operator, all in `‖·‖_C`.
///
/// `L₂G` and `L₃G` are one-sample estimates inside the norm, which keeps the
/// norm estimate unbiased only for `G ≥ 0`; for signed `G` the left sides are
/// overestimated.
pub fn relative_bound_check<R: Rng + ?Sized>(
    params: &ModelParams,
    c: f64,
    g: &FiniteFunction,
    mc: usize,
    rng: &mut R,
) -> Result<RelativeBoundReport, AnalysisError> {
    check_c(c)?;
    let card = g.support_card();
    let region = match g.support_region() {
        Some(r) if card + 2 <= N_MAX => r,
        _ => return Err(AnalysisError::BadSupport { max: N_MAX - 2 }),
    };
    let reach = params.a_plus.r_cut().max(params.a_minus.r_cut());
    let domain = region.expanded(reach);
    let coef = [
        ("L1_vs_L0", c * params.kappa_minus / params.m),
        ("L2_vs_L0", params.kappa_plus / params.m),
        ("L3_vs_L0", l3_coefficient(params, c, card)),
        ("L1_vs_N", params.kappa_minus * c),
        ("L2_vs_N", params.kappa_plus),
    ];
    let finite = |x: f64| if x.is_finite() { x } else { 0.0 };
    let est = lp_integral_many(c, &domain, card + 1, mc, 10, rng, |eta, rng, out| {
        let disp = Displacements::draw(&params.a_plus, eta.len(), 1, rng);
        let row = if eta.is_empty() { &[][..] } else { disp.row(0) };
        let parts = symbol_parts(params, g, eta, row);
        let n_g = eta.len() as f64 * g.eval(eta).abs();
        let (l0, l1, l2, l3) = (parts.l0.abs(), parts.l1.abs(), parts.l2.abs(), parts.l3.abs());
        out[..5].copy_from_slice(&[l0, l1, l2, l3, n_g]);
        let pairs = [(l1, l0), (l2, l0), (l3, l0), (l1, n_g), (l2, n_g)];
        for (k, ((lhs, base), (_, a))) in pairs.iter().zip(&coef).enumerate() {
            out[5 + k] = finite(*a) * base - lhs;
        }
    })?;
    let (norm_l0, norm_n) = (est[0], est[4]);
    let lhs_index = [1, 2, 3, 1, 2];
    let base = [norm_l0, norm_l0, norm_l0, norm_n, norm_n];
    let checks = coef
        .iter()
        .enumerate()
        .map(|(k, (name, a))| {
            let rhs = Estimate {
                value: finite(*a) * base[k].value,
                stderr: finite(*a) * base[k].stderr,
            };
            decide(name, *a, est[lhs_index[k]], rhs, est[5 + k], mc)
        })
        .collect();
    Ok(RelativeBoundReport {
        c,
        mc,
        norm_l0,
        norm_n,
        checks,
    })
}

/// One case of the default relative-bound suite.
#[derive(Debug, Clone)]
pub struct RelativeBoundInstance {
    pub name: &'static str,
    pub params: ModelParams,
    pub c: f64,
    pub g: FiniteFunction,
}

fn model(m: f64, kp: f64, km: f64, plus: KernelSpec, minus: KernelSpec, dim: usize) -> ModelParams {
    ModelParams::new(
        m,
        kp,
        km,
        Kernel::from_spec(plus, dim).expect("valid kernel"),
        Kernel::from_spec(minus, dim).expect("valid kernel"),
        SpaceSpec::new(dim, 100.0).expect("valid space"),
    )
    .expect("valid parameters")
}

/// Five nonnegative test functions with parameters covering both branches
/// of the `L₃` constant.
pub fn default_relative_suite() -> Vec<RelativeBoundInstance> {
    use crate::kernels::KernelFamily::{Gaussian, Tophat};
    let spec = |family, sigma| KernelSpec { family, sigma };
    let cube = |dim, lo, hi| Region::cube(dim, lo, hi).expect("valid box");
    vec![
        RelativeBoundInstance {
            name: "close_pairs",
            params: model(2.0, 1.0, 1.0, spec(Gaussian, 1.0), spec(Gaussian, 1.0), 1),
            c: 1.0,
            g: FiniteFunction::new(2, Some(cube(1, 0.0, 2.0)), |eta| {
                if eta.len() == 2 && (eta.point(0)[0] - eta.point(1)[0]).abs() < 1.0 {
                    1.0
                } else {
                    0.0
                }
            }),
        },
        RelativeBoundInstance {
            name: "empty_configuration",
            params: model(2.0, 1.0, 1.0, spec(Gaussian, 1.0), spec(Gaussian, 1.0), 1),
            c: 1.0,
            g: FiniteFunction::indicator_of_cardinality(0, Some(cube(1, 0.0, 1.0))),
        },
        RelativeBoundInstance {
            name: "gaussian_bump",
            params: model(3.0, 0.5, 1.0, spec(Gaussian, 1.0), spec(Gaussian, 1.5), 1),
            c: 2.0,
            g: FiniteFunction::new(3, Some(cube(1, -1.0, 1.0)), |eta| {
                (-eta.coords().iter().map(|x| x * x).sum::<f64>()).exp()
            }),
        },
        RelativeBoundInstance {
            name: "tophat_counts",
            params: model(1.0, 1.0, 0.5, spec(Tophat, 1.0), spec(Tophat, 2.0), 1),
            c: 1.5,
            g: FiniteFunction::of_cardinality(3, Some(cube(1, 0.0, 3.0)), |n| if n >= 1 { 1.0 } else { 0.0 }),
        },
        RelativeBoundInstance {
            name: "planar_pairs",
            params: model(2.0, 1.0, 2.0, spec(Gaussian, 0.5), spec(Gaussian, 0.5), 2),
            c: 1.0,
            g: FiniteFunction::indicator_of_cardinality(2, Some(cube(2, 0.0, 1.0))),
        },
    ]
}

/// One box of the accretivity scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AccretivityRow {
    pub side: f64,
    pub volume: f64,
    /// `∬_Λ a⁺(x − y) dx dy`.
    pub plus_integral: f64,
    pub minus_integral: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccretivityScan {
    pub c: f64,
    pub b_const: f64,
    pub t: f64,
    pub rows: Vec<AccretivityRow>,
    /// `ΔB/Δ|Λ|` between the two largest boxes.
    pub slope: f64,
    /// Large-box limit `κ⁺ − κ⁻Ct − m` per unit volume.
    pub expected_slope: f64,
}

/// `z = inf a⁺/a⁻` and the scan parameter `t = ε z κ⁺/(κ⁻ C)`.
pub fn accretivity_t(params: &ModelParams, c: f64, eps: f64) -> Result<f64, AnalysisError> {
    check_c(c)?;
    if params.kappa_minus <= 0.0 {
        return Err(AnalysisError::NoCompetition);
    }
    let z = kernel_ratio_bounds(&params.a_plus, &params.a_minus).0;
    if !(z > 0.0) {
        return Err(AnalysisError::NoValidZ(z));
    }
    Ok(eps * z * params.kappa_plus / (params.kappa_minus * c))
}

/// Default box sides `{2, 4, 8, 16, 32}·σ⁺`.
pub fn default_box_sides(params: &ModelParams) -> Vec<f64> {
    [2.0, 4.0, 8.0, 16.0, 32.0]
        .iter()
        .map(|k| k * params.a_plus.sigma())
        .collect()
}

/// `∬_{[0,s]^d × [0,s]^d} a(x − y) dx dy = ∫_{[−s,s]^d} a(u) Π(s − |u_i|) du`,
/// by tensor Gauss–Legendre on the positive orthant with panels of width σ/2.
pub fn box_pair_integral(kernel: &Kernel, side: f64) -> f64 {
    let dim = kernel.dim();
    let reach = side.min(kernel.r_cut());
    let panels = ((reach / (0.5 * kernel.sigma())).ceil() as usize).max(1);
    let rule = GaussLegendre::new(NonZeroUsize::new(8).expect("nonzero"));
    let width = reach / panels as f64;
    let mut nodes = Vec::new();
    for p in 0..panels {
        let (a, b) = (p as f64 * width, (p + 1) as f64 * width);
        for (x, w) in rule.nodes().zip(rule.weights()) {
            nodes.push((0.5 * (b - a) * x + 0.5 * (a + b), 0.5 * (b - a) * w));
        }
    }
    let k = nodes.len();
    let mut total = 0.0;
    let mut u = [0.0; 3];
    for flat in 0..k.pow(dim as u32) {
        let mut rem = flat;
        let mut weight = 1.0;
        for ui in u.iter_mut().take(dim) {
            let (x, w) = nodes[rem % k];
            rem /= k;
            *ui = x;
            weight *= w * (side - x);
        }
        let r = u[..dim].iter().map(|c| c * c).sum::<f64>().sqrt();
        total += weight * kernel.density_at(r);
    }
    total * 2f64.powi(dim as i32)
}

/// `B(Λ) = κ⁺∬a⁺ − κ⁻Ct∬a⁻ − m|Λ| − b(1 − e^{−Ct|Λ|})/(Ct)` on cubes of the given sides.
pub fn accretivity_scan(
    params: &ModelParams,
    c: f64,
    b_const: f64,
    t: f64,
    box_sides: &[f64],
) -> Result<AccretivityScan, AnalysisError> {
    check_c(c)?;
    if !(t.is_finite() && t > 0.0) {
        return Err(AnalysisError::BadT(t));
    }
    if box_sides.is_empty() || box_sides[0] <= 0.0 || box_sides.windows(2).any(|w| w[1] <= w[0]) {
        return Err(AnalysisError::BadBoxes);
    }
    let dim = params.space.dim();
    let ct = c * t;
    let rows: Vec<AccretivityRow> = box_sides
        .iter()
        .map(|&side| {
            let volume = side.powi(dim as i32);
            let plus_integral = box_pair_integral(&params.a_plus, side);
            let minus_integral = if params.a_minus == params.a_plus {
                plus_integral
            } else {
                box_pair_integral(&params.a_minus, side)
            };
            let b = params.kappa_plus * plus_integral - params.kappa_minus * ct * minus_integral - params.m * volume
                + b_const * (-ct * volume).exp_m1() / ct;
            AccretivityRow {
                side,
                volume,
                plus_integral,
                minus_integral,
                b,
            }
        })
        .collect();
    let slope = match rows.len() {
        1 => f64::NAN,
        n => (rows[n - 1].b - rows[n - 2].b) / (rows[n - 1].volume - rows[n - 2].volume),
    };
    Ok(AccretivityScan {
        c,
        b_const,
        t,
        rows,
        slope,
        expected_slope: params.kappa_plus - params.kappa_minus * ct - params.m,
    })
}

/// `condition,pass,margin,witness`, one row per report and component.
pub fn write_conditions_csv<W: Write>(mut out: W, reports: &[ConditionReport]) -> io::Result<()> {
    writeln!(
        out,
        "# margin in the units of the compared quantity; witness = point (length)"
    )?;
    writeln!(out, "condition,pass,margin,witness")?;
    for report in reports {
        for r in report.flatten() {
            let witness = r
                .witness
                .as_ref()
                .map(|w| w.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" "))
                .unwrap_or_default();
            writeln!(out, "{},{},{},{}", r.name, r.pass, r.margin, witness)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harmonic::{s_contraction_check, FiniteConfiguration};
    use crate::moments::{bdlp_hierarchy_solve, kc_monitor, ClosureScheme, PeriodicGrid, Stepping};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn matched(m: f64, kp: f64, km: f64) -> ModelParams {
        let k = Kernel::gaussian(1.0, 1).unwrap();
        ModelParams::new(m, kp, km, k.clone(), k, SpaceSpec::new(1, 100.0).unwrap()).unwrap()
    }

    #[test]
    fn semigroup_examples() {
        let r = check_semigroup_conditions(&matched(11.0, 1.0, 1.0), 4.0).unwrap();
        assert!(r.pass, "{r:?}");
        let r = check_semigroup_conditions(&matched(10.0, 1.0, 1.0), 4.0).unwrap();
        assert!(!r.pass);
        let mort = r.component("semigroup_mortality").unwrap();
        assert!(!mort.pass && mort.margin == 0.0);
        assert!(r.component("semigroup_kernel_domination").unwrap().pass);
    }

    #[test]
    fn narrow_competition_kernel_fails_in_the_tail() {
        let narrow = Kernel::gaussian(0.5, 1).unwrap();
        let wide = Kernel::gaussian(1.0, 1).unwrap();
        let p = ModelParams::new(
            100.0,
            1.0,
            1.0,
            wide.clone(),
            narrow.clone(),
            SpaceSpec::new(1, 100.0).unwrap(),
        )
        .unwrap();
        for c in [1.0, 1e6, 1e200] {
            let r = check_semigroup_conditions(&p, c).unwrap();
            let k = r.component("semigroup_kernel_domination").unwrap();
            assert!(!k.pass);
            let w = k.witness.as_ref().unwrap()[0];
            // oracle: the witness really violates the inequality
            assert!(c * narrow.density_at(w) < 2.0 * wide.density_at(w), "C={c} r={w}");
        }
        // the crossing radius for C = 1e6 lies on the grid: brute-force scan finds it too
        let crossing = (0..100_000)
            .map(|i| i as f64 * 1e-4)
            .find(|&r| 1e6 * narrow.density_at(r) < 2.0 * wide.density_at(r))
            .unwrap();
        let r = check_semigroup_conditions(&p, 1e6).unwrap();
        let w = r
            .component("semigroup_kernel_domination")
            .unwrap()
            .witness
            .as_ref()
            .unwrap()[0];
        assert!((w - crossing).abs() < 2e-3, "{w} vs {crossing}");
    }

    #[test]
    fn tophat_support_is_compared_exactly() {
        let short = Kernel::tophat(1.0, 2).unwrap();
        let long = Kernel::tophat(2.0, 2).unwrap();
        let space = SpaceSpec::new(2, 100.0).unwrap();
        let p = ModelParams::new(50.0, 1.0, 1.0, long.clone(), short.clone(), space).unwrap();
        let r = check_semigroup_conditions(&p, 100.0).unwrap();
        assert!(!r.component("semigroup_kernel_domination").unwrap().pass);
        let p = ModelParams::new(500.0, 1.0, 1.0, short, long, space).unwrap();
        assert!(check_semigroup_conditions(&p, 100.0).unwrap().pass);
    }

    #[test]
    fn stationary_examples() {
        let r = check_stationary_conditions(&matched(20.0, 1.0, 1.0), 4.0).unwrap();
        assert!(r.pass);
        assert!((r.value.unwrap() - 0.5).abs() < 1e-15);
        let r = check_stationary_conditions(&matched(4.0, 1.0, 1.0), 2.0).unwrap();
        assert!(!r.pass);
        assert!((r.value.unwrap() - 1.25).abs() < 1e-15);
        for c in [0.3, 1.0] {
            for m in [1.0, 1e3, 1e9] {
                assert!(!check_stationary_conditions(&matched(m, 0.0, 0.0), c).unwrap().pass);
            }
        }
    }

    #[test]
    fn rho_depends_only_on_ratios() {
        for lambda in [0.1, 3.0, 1e4] {
            let base = check_stationary_conditions(&matched(7.0, 0.5, 1.5), 3.0).unwrap();
            let scaled = check_stationary_conditions(&matched(7.0 * lambda, 0.5 * lambda, 1.5 * lambda), 3.0).unwrap();
            assert!((base.value.unwrap() - scaled.value.unwrap()).abs() < 1e-12);
            let margin = |r: &ConditionReport| r.component("stationary_contraction").unwrap().margin;
            assert!((margin(&base) - margin(&scaled)).abs() < 1e-12);
        }
    }

    #[test]
    fn margins_grow_with_mortality() {
        let mut prev_semi = f64::NEG_INFINITY;
        let mut prev_stat = f64::NEG_INFINITY;
        let mut prev_b: Option<Vec<f64>> = None;
        for m in [0.1, 0.5, 1.0, 2.0, 5.0] {
            let p = matched(m, 1.0, 1.0);
            let semi = check_semigroup_conditions(&p, 2.0).unwrap();
            let semi = semi.component("semigroup_mortality").unwrap().margin;
            let stat = check_stationary_conditions(&p, 2.0).unwrap();
            let stat = stat.component("stationary_contraction").unwrap().margin;
            assert!(semi > prev_semi && stat > prev_stat);
            prev_semi = semi;
            prev_stat = stat;
            let scan = accretivity_scan(&p, 1.0, 1.0, 0.5, &default_box_sides(&p)).unwrap();
            let bs: Vec<f64> = scan.rows.iter().map(|r| r.b).collect();
            if let Some(prev) = &prev_b {
                assert!(bs.iter().zip(prev).all(|(now, before)| now < before));
            }
            prev_b = Some(bs);
        }
    }

    #[test]
    fn ratio_bounds() {
        let g1 = Kernel::gaussian(1.0, 1).unwrap();
        let g2 = Kernel::gaussian(2.0, 1).unwrap();
        assert_eq!(kernel_ratio_bounds(&g1, &g1), (1.0, 1.0));
        let (lo, hi) = kernel_ratio_bounds(&g2, &g1);
        assert!((lo - 0.5).abs() < 1e-12 && hi.is_infinite());
        let (lo, hi) = kernel_ratio_bounds(&g1, &g2);
        assert!(lo == 0.0 && (hi - 2.0).abs() < 1e-12);
        let t1 = Kernel::tophat(1.0, 1).unwrap();
        let t2 = Kernel::tophat(2.0, 1).unwrap();
        assert_eq!(kernel_ratio_bounds(&t2, &t1), (0.5, 0.5));
        assert_eq!(kernel_ratio_bounds(&t1, &t2).0, 0.0);
    }

    #[test]
    fn box_integral_matches_closed_form() {
        let a = Kernel::gaussian(1.0, 1).unwrap();
        for side in [0.5, 2.0, 8.0, 32.0] {
            // ∫_{-s}^{s} φ(u)(s − |u|) du
            let phi0 = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
            let exact = 2.0 * (side * (a.cdf_1d(side) - 0.5) - phi0 * (1.0 - (-side * side / 2.0).exp()));
            // the kernel is cut where its tail mass is 1e-7
            assert!((box_pair_integral(&a, side) - exact).abs() < 1e-6 * side, "side {side}");
        }
        let a2 = Kernel::gaussian(1.0, 2).unwrap();
        let one_d = box_pair_integral(&a, 4.0);
        assert!((box_pair_integral(&a2, 4.0) - one_d * one_d).abs() < 1e-8);
    }

    #[test]
    fn accretivity_examples() {
        let p = matched(0.1, 1.0, 1.0);
        let t = accretivity_t(&p, 1.0, 0.5).unwrap();
        assert!((t - 0.5).abs() < 1e-12);
        let scan = accretivity_scan(&p, 1.0, 1.0, t, &default_box_sides(&p)).unwrap();
        let n = scan.rows.len();
        assert!(scan.rows[n - 1].b > 0.0 && scan.rows[n - 2].b > 0.0, "{scan:?}");
        assert!((scan.slope - 0.4).abs() < 0.01, "{}", scan.slope);
        assert!((scan.expected_slope - 0.4).abs() < 1e-12);
        let p = matched(2.0, 1.0, 1.0);
        let scan = accretivity_scan(&p, 1.0, 1.0, t, &default_box_sides(&p)).unwrap();
        assert!(scan.rows.iter().all(|r| r.b < 0.0));
        let tiny = accretivity_scan(&matched(0.0, 1.0, 1.0), 1.0, 1.0, t, &[1e-6]).unwrap();
        assert!(tiny.rows[0].b <= 0.0 && tiny.rows[0].b.abs() < 1e-5);
    }

    #[test]
    fn accretivity_needs_a_positive_z() {
        let narrow = Kernel::gaussian(0.5, 1).unwrap();
        let wide = Kernel::gaussian(1.0, 1).unwrap();
        let p = ModelParams::new(1.0, 1.0, 1.0, narrow, wide, SpaceSpec::new(1, 100.0).unwrap()).unwrap();
        assert!(matches!(accretivity_t(&p, 1.0, 0.5), Err(AnalysisError::NoValidZ(_))));
    }

    #[test]
    fn relative_bounds_on_close_pairs() {
        let suite = default_relative_suite();
        let inst = &suite[0];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let report = relative_bound_check(&inst.params, inst.c, &inst.g, 200_000, &mut rng).unwrap();
        let l1 = &report.checks[0];
        assert_eq!(l1.coefficient, 0.5);
        assert_eq!(l1.verdict, Verdict::Pass, "{l1:?}");
        assert!(!report.any_fail(), "{report:?}");
    }

    #[test]
    fn empty_support_gives_vanishing_l1() {
        let suite = default_relative_suite();
        let inst = &suite[1];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let report = relative_bound_check(&inst.params, inst.c, &inst.g, 2_000, &mut rng).unwrap();
        assert_eq!(report.checks[0].lhs.value, 0.0);
        assert_eq!(report.checks[0].verdict, Verdict::Pass);
    }

    #[test]
    fn l2_against_number_operator_on_random_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = matched(1.0, 1.5, 0.5);
        for _ in 0..5 {
            let w: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..2.0)).collect();
            let g = FiniteFunction::of_cardinality(3, Some(Region::cube(1, 0.0, 2.0).unwrap()), move |n| w[n]);
            let report = relative_bound_check(&p, 1.0, &g, 5_000, &mut rng).unwrap();
            let check = report.checks.iter().find(|c| c.name == "L2_vs_N").unwrap();
            assert_ne!(check.verdict, Verdict::Fail, "{check:?}");
        }
    }

    #[test]
    fn semigroup_pass_implies_kc_monitor_pass() {
        let p = matched(11.0, 1.0, 1.0);
        assert!(check_semigroup_conditions(&p, 4.0).unwrap().pass);
        let grid = PeriodicGrid::new(1, 512, 100.0).unwrap();
        let q0 = vec![0.25; grid.len()];
        for closure in [ClosureScheme::power1(), ClosureScheme::kirkwood()] {
            let traj =
                bdlp_hierarchy_solve(&p, closure, &grid, 0.5, &q0, &Stepping::new(10.0, 1e-3, 200).unwrap()).unwrap();
            assert!(kc_monitor(&traj, 4.0).within);
        }
    }

    #[test]
    fn stationary_pass_implies_contraction() {
        let p = matched(20.0, 1.0, 1.0);
        let c = 4.0;
        assert!(check_stationary_conditions(&p, c).unwrap().pass);
        let k = FiniteFunction::new(N_MAX - 1, None, move |eta| {
            c.powi(eta.len() as i32) * (-0.1 * eta.coords().iter().map(|x| x * x).sum::<f64>()).exp()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let probes: Vec<FiniteConfiguration> = (1..=4)
            .map(|n| {
                let pts: Vec<f64> = (0..n).map(|i| 0.4 * i as f64).collect();
                FiniteConfiguration::from_flat(1, pts).unwrap()
            })
            .collect();
        let report = s_contraction_check(&p, c, &k, 1.0, &probes, 2_000, &mut rng).unwrap();
        assert!(report.within_bound, "{report:?}");
    }

    #[test]
    fn conditions_csv_rows() {
        let r = check_stationary_conditions(&matched(20.0, 1.0, 1.0), 4.0).unwrap();
        let mut buf = Vec::new();
        write_conditions_csv(&mut buf, &[r]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().nth(1), Some("condition,pass,margin,witness"));
        assert_eq!(text.lines().count(), 2 + 3);
    }
}
