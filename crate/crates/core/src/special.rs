//! Small special-function helpers shared by the kernel and moment code.

use std::f64::consts::PI;

/// Surface area of the unit sphere S^{d-1} (d = 1 counts the two points ±1).
pub fn unit_sphere_area(dim: usize) -> f64 {
    match dim {
        1 => 2.0,
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        _ => panic!("unsupported dimension {dim}"),
    }
}

/// Volume of the unit ball in R^d.
pub fn unit_ball_volume(dim: usize) -> f64 {
    match dim {
        1 => 2.0,
        2 => PI,
        3 => 4.0 * PI / 3.0,
        _ => panic!("unsupported dimension {dim}"),
    }
}

/// Bessel function of the first kind, order one.
///
/// Uses the periodic integral `J1(x) = (1/2π) ∫_0^{2π} cos(τ - x sin τ) dτ`,
/// for which the trapezoid rule converges geometrically once the number of
/// nodes exceeds |x| by a margin.
pub fn bessel_j1(x: f64) -> f64 {
    let nodes = 2 * (x.abs().ceil() as usize) + 64;
    let step = 2.0 * PI / nodes as f64;
    let sum: f64 = (0..nodes)
        .map(|k| {
            let tau = k as f64 * step;
            (tau - x * tau.sin()).cos()
        })
        .sum();
    sum / nodes as f64
}

/// Evaluates a power series `Σ_k c_k x^{2k}` whose coefficients are produced
/// by `coef(k)`, stopping once terms fall below machine precision.
pub(crate) fn even_series(x: f64, first: usize, mut coef: impl FnMut(usize) -> f64) -> f64 {
    let x2 = x * x;
    let mut power = x2.powi(first as i32);
    let mut sum = 0.0;
    for k in first..first + 40 {
        let term = coef(k) * power;
        sum += term;
        if term.abs() <= 1e-18 * sum.abs() {
            break;
        }
        power *= x2;
    }
    sum
}

pub(crate) fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, k| acc * k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn j1_matches_reference_values() {
        // Abramowitz & Stegun table 9.1
        assert!((bessel_j1(1.0) - 0.440_050_585_744_933_5).abs() < 1e-14);
        assert!((bessel_j1(5.0) - (-0.327_579_137_591_465_2)).abs() < 1e-14);
        assert!((bessel_j1(20.0) - 0.066_833_124_175_850_04).abs() < 1e-13);
        assert!(bessel_j1(0.0).abs() < 1e-16);
    }

    #[test]
    fn j1_small_argument_series() {
        for &x in &[1e-3, 0.1, 0.5] {
            let series = even_series(x, 0, |k| {
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                sign / (factorial(k) * factorial(k + 1) * 4f64.powi(k as i32))
            }) * x
                / 2.0;
            assert!((series - bessel_j1(x)).abs() < 1e-15);
        }
    }
}
