//! Henyey-Greenstein phase function.
//!
//! `cos_theta` is measured between the propagation direction before and after
//! scattering, so `g > 0` is forward scattering.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{param, Result};
use crate::Vec3;

fn check_g(g: f64) -> Result<()> {
    if g.abs() < 1.0 {
        Ok(())
    } else {
        Err(param(format!("Henyey-Greenstein g must satisfy |g| < 1, got {g}")))
    }
}

/// Phase function density per steradian.
pub fn hg_pdf(g: f64, cos_theta: f64) -> Result<f64> {
    check_g(g)?;
    if !(-1.0..=1.0).contains(&cos_theta) {
        return Err(param(format!("cos_theta {cos_theta} outside [-1, 1]")));
    }
    Ok(hg_eval(g, cos_theta))
}

#[inline]
pub(crate) fn hg_eval(g: f64, cos_theta: f64) -> f64 {
    let denom = 1.0 + g * g - 2.0 * g * cos_theta;
    (1.0 - g * g) / (4.0 * PI * denom * denom.sqrt())
}

/// Inverse CDF of the scattering cosine for a uniform variate `u` in `[0, 1)`.
#[inline]
pub(crate) fn hg_sample_cos(g: f64, u: f64) -> f64 {
    if g.abs() < 1e-6 {
        return 1.0 - 2.0 * u;
    }
    let s = (1.0 - g * g) / (1.0 - g + 2.0 * g * u);
    ((1.0 + g * g - s * s) / (2.0 * g)).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseSample {
    pub direction: Vec3,
    pub cos_theta: f64,
    pub pdf: f64,
}

/// Samples a new propagation direction around `incoming` (unit) with the
/// Henyey-Greenstein distribution.
pub fn hg_sample(g: f64, incoming: &Vec3, rng: &mut impl Rng) -> Result<PhaseSample> {
    check_g(g)?;
    Ok(hg_sample_unchecked(g, incoming, rng))
}

pub(crate) fn hg_sample_unchecked(g: f64, incoming: &Vec3, rng: &mut impl Rng) -> PhaseSample {
    let cos_theta = hg_sample_cos(g, rng.random::<f64>());
    let phi = 2.0 * PI * rng.random::<f64>();
    let direction = around(incoming, cos_theta, phi);
    PhaseSample { direction, cos_theta, pdf: hg_eval(g, cos_theta) }
}

/// Orthonormal basis `(u, v)` perpendicular to the unit vector `n`.
pub(crate) fn basis(n: &Vec3) -> (Vec3, Vec3) {
    // Duff et al. branchless construction.
    let sign = 1f64.copysign(n.z);
    let a = -1.0 / (sign + n.z);
    let b = n.x * n.y * a;
    (
        Vec3::new(1.0 + sign * n.x * n.x * a, sign * b, -sign * n.x),
        Vec3::new(b, sign + n.y * n.y * a, -n.y),
    )
}

pub(crate) fn around(axis: &Vec3, cos_theta: f64, phi: f64) -> Vec3 {
    let sin_theta = (1.0 - cos_theta * cos_theta).max(0.0).sqrt();
    let (u, v) = basis(axis);
    (u * (sin_theta * phi.cos()) + v * (sin_theta * phi.sin()) + axis * cos_theta).normalize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    /// Midpoint quadrature of 2*pi * p(mu) over mu in [-1, 1].
    fn sphere_integral(g: f64, nodes: usize) -> f64 {
        let h = 2.0 / nodes as f64;
        (0..nodes)
            .map(|i| 2.0 * PI * hg_pdf(g, -1.0 + (i as f64 + 0.5) * h).unwrap() * h)
            .sum()
    }

    #[test]
    fn closed_form_values() {
        for c in [-1.0, -0.3, 0.0, 0.8, 1.0] {
            assert!((hg_pdf(0.0, c).unwrap() - 1.0 / (4.0 * PI)).abs() < 1e-15);
        }
        assert!((hg_pdf(0.0, 0.2).unwrap() - 0.0795775).abs() < 1e-7);
        let expected = 0.75 / (4.0 * PI * 0.125);
        assert!((hg_pdf(0.5, 1.0).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.47746).abs() < 1e-5);
    }

    #[test]
    fn normalizes_over_the_sphere() {
        for g in [-0.5, 0.0, 0.8] {
            let total = sphere_integral(g, 10_000);
            assert!((total - 1.0).abs() < 0.005, "g={g}: {total}");
        }
    }

    #[test]
    fn invalid_anisotropy_is_rejected() {
        assert!(hg_pdf(1.0, 0.0).is_err());
        assert!(hg_pdf(-1.2, 0.0).is_err());
        let mut rng = rng_for(&[1]);
        assert!(hg_sample(1.0, &Vec3::z(), &mut rng).is_err());
    }

    #[test]
    fn isotropic_samples_pass_chi_square() {
        let mut rng = rng_for(&[42, 1]);
        let bins = 20;
        let n = 100_000;
        let mut counts = vec![0usize; bins];
        for _ in 0..n {
            let s = hg_sample(0.0, &Vec3::z(), &mut rng).unwrap();
            let b = (((s.cos_theta + 1.0) / 2.0 * bins as f64) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let expected = n as f64 / bins as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 = {chi2}, p = {p}");
    }

    #[test]
    fn mean_cosine_equals_g() {
        let mut rng = rng_for(&[42, 2]);
        let incoming = Vec3::new(0.3, -0.5, 0.8).normalize();
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| {
                let s = hg_sample(0.8, &incoming, &mut rng).unwrap();
                assert!((s.direction.dot(&incoming) - s.cos_theta).abs() < 1e-9);
                s.cos_theta
            })
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.8).abs() < 0.01, "{mean}");
    }

    #[test]
    fn seeded_sampling_is_repeatable() {
        let draw = || {
            let mut rng = rng_for(&[9]);
            (0..16).map(|_| hg_sample(0.3, &Vec3::x(), &mut rng).unwrap().direction).collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn sample_pdf_matches_density() {
        let mut rng = rng_for(&[3]);
        let s = hg_sample(-0.4, &Vec3::y(), &mut rng).unwrap();
        assert_eq!(s.pdf, hg_pdf(-0.4, s.cos_theta).unwrap());
        assert!((s.direction.norm() - 1.0).abs() < 1e-12);
    }
}
