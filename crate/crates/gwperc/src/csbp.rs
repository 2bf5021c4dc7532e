//! Sampling utilities for the limiting branching process in the
//! finite-variance regime: one transition is a compound Poisson sum of
//! exponential jumps, which is exact (no time discretization error).
//! The stable regime has no path sampler; its transition claims are
//! verified in transform space through `limit_laws`.

use rand::distributions::Distribution;
use thiserror::Error;

use crate::offspring::ModelConstants;
use crate::rng::{Stream, StreamRng};

#[derive(Debug, Error, PartialEq)]
pub enum CsbpError {
    #[error("path sampling is only supported in the finite-variance regime (alpha = 2)")]
    UnsupportedRegime,
    #[error("domain error: {0}")]
    Domain(String),
}

fn require_finite_variance(constants: &ModelConstants) -> Result<(), CsbpError> {
    if constants.is_finite_variance() {
        Ok(())
    } else {
        Err(CsbpError::UnsupportedRegime)
    }
}

/// One exact transition of duration `dt` from mass `a`: N ~ Poisson(a C / dt)
/// jumps, each Exp(C / dt); their sum is drawn as Gamma(N, dt / C).
pub fn step_alpha2(
    constants: &ModelConstants,
    a: f64,
    dt: f64,
    rng: &mut Stream,
) -> Result<f64, CsbpError> {
    require_finite_variance(constants)?;
    if !(a >= 0.0) {
        return Err(CsbpError::Domain(format!("mass must be nonnegative, got {a}")));
    }
    if !(dt > 0.0) {
        return Err(CsbpError::Domain(format!("dt must be positive, got {dt}")));
    }
    if a == 0.0 {
        return Ok(0.0);
    }
    let rate = constants.c_alpha / dt;
    let poisson = rand_distr::Poisson::new(a * rate).expect("positive mean");
    let n = poisson.sample(&mut StreamRng(rng));
    if n < 0.5 {
        return Ok(0.0);
    }
    let gamma = rand_distr::Gamma::new(n.round(), 1.0 / rate).expect("valid gamma");
    Ok(gamma.sample(&mut StreamRng(rng)))
}

/// Markov chain of `step_alpha2` transitions along a strictly increasing
/// time grid; `masses[0]` is the state at `times[0]`.
pub fn path_alpha2(
    constants: &ModelConstants,
    a0: f64,
    times: &[f64],
    rng: &mut Stream,
) -> Result<Vec<f64>, CsbpError> {
    require_finite_variance(constants)?;
    if times.is_empty() {
        return Err(CsbpError::Domain("empty time grid".into()));
    }
    for w in times.windows(2) {
        if !(w[1] > w[0]) {
            return Err(CsbpError::Domain(format!(
                "time grid must be strictly increasing, got {} then {}",
                w[0], w[1]
            )));
        }
    }
    let mut masses = Vec::with_capacity(times.len());
    let mut a = a0;
    masses.push(a);
    for w in times.windows(2) {
        a = step_alpha2(constants, a, w[1] - w[0], rng)?;
        masses.push(a);
    }
    Ok(masses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::limit_laws::LimitLaw;
    use crate::offspring::{Model, OffspringConfig};
    use crate::rng::DOMAIN_CSBP;

    fn c4() -> ModelConstants {
        Model::from_config(&OffspringConfig::explicit(&[(2, 1.0)])).unwrap().constants
    }

    #[test]
    fn zero_mass_is_absorbing() {
        let c = c4();
        let mut s = Stream::new(DOMAIN_CSBP, 1);
        assert_eq!(step_alpha2(&c, 0.0, 1.0, &mut s).unwrap(), 0.0);
        let path = path_alpha2(&c, 0.0, &[0.0, 0.5, 1.0, 2.0], &mut s).unwrap();
        assert!(path.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn stable_regime_rejected() {
        let m = Model::from_config(&OffspringConfig::ZetaTail { alpha: 1.5 }).unwrap();
        let mut s = Stream::new(DOMAIN_CSBP, 2);
        assert_eq!(
            step_alpha2(&m.constants, 1.0, 1.0, &mut s),
            Err(CsbpError::UnsupportedRegime)
        );
    }

    #[test]
    fn grid_must_increase() {
        let c = c4();
        let mut s = Stream::new(DOMAIN_CSBP, 3);
        assert!(path_alpha2(&c, 1.0, &[0.0, 0.0], &mut s).is_err());
        assert!(path_alpha2(&c, 1.0, &[], &mut s).is_err());
    }

    #[test]
    fn mean_is_conserved() {
        // critical branching: E[step] = a.
        let c = c4();
        let mut s = Stream::new(DOMAIN_CSBP, 4);
        let n = 1_000_000;
        let a = 1.0;
        let sum: f64 = (0..n).map(|_| step_alpha2(&c, a, 1.0, &mut s).unwrap()).sum();
        let mean = sum / n as f64;
        // Var = 2 a dt / C = 0.5
        let se = (0.5f64 / n as f64).sqrt();
        assert!((mean - a).abs() < 4.0 * se, "mean = {mean}");
    }

    #[test]
    fn empirical_transform_matches_transition_lt() {
        let c = c4();
        let law = LimitLaw::new(c);
        let mut s = Stream::new(DOMAIN_CSBP, 5);
        let n = 200_000;
        let (a, dt) = (1.0, 1.0);
        let draws: Vec<f64> =
            (0..n).map(|_| step_alpha2(&c, a, dt, &mut s).unwrap()).collect();
        for theta in [0.5, 1.0, 2.0] {
            let vals: Vec<f64> = draws.iter().map(|&x| (-theta * x).exp()).collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let target = law.csbp_transition_lt(a, dt, theta).unwrap();
            let se = (var / n as f64).sqrt();
            assert!(
                (mean - target).abs() < 4.0 * se,
                "theta={theta}: {mean} vs {target}"
            );
        }
    }

    #[test]
    fn extinction_probability_is_exact_poisson_mass() {
        // P(dead by t from a) = exp(-a C / t): holds exactly for the
        // sampler because extinction is the Poisson(0) atom.
        let c = c4();
        let mut s = Stream::new(DOMAIN_CSBP, 6);
        let (a, t) = (0.7, 2.0);
        let n = 400_000;
        let dead = (0..n)
            .filter(|_| step_alpha2(&c, a, t, &mut s).unwrap() == 0.0)
            .count() as f64;
        let p = (-a * c.c_alpha / t).exp();
        let se = (p * (1.0 - p) * n as f64).sqrt();
        assert!((dead - p * n as f64).abs() < 4.0 * se);
    }

    #[test]
    fn two_step_matches_one_step_in_transform() {
        let c = c4();
        let law = LimitLaw::new(c);
        let mut s = Stream::new(DOMAIN_CSBP, 7);
        let n = 400_000;
        let a = 1.0;
        for theta in [0.5, 1.0, 2.0] {
            let mut two = Vec::with_capacity(n);
            for _ in 0..n {
                let mid = step_alpha2(&c, a, 1.0, &mut s).unwrap();
                two.push((-theta * step_alpha2(&c, mid, 1.0, &mut s).unwrap()).exp());
            }
            let mean2 = two.iter().sum::<f64>() / n as f64;
            let var2 = two.iter().map(|v| (v - mean2) * (v - mean2)).sum::<f64>() / n as f64;
            let target = law.csbp_transition_lt(a, 2.0, theta).unwrap();
            let se = (var2 / n as f64).sqrt();
            assert!(
                (mean2 - target).abs() < 4.0 * se,
                "theta={theta}: two-step {mean2} vs one-step law {target}"
            );
        }
    }

    #[test]
    fn branching_property_in_transform() {
        // Paths from a and b, summed, match the one-path law from a+b.
        let c = c4();
        let law = LimitLaw::new(c);
        let mut s = Stream::new(DOMAIN_CSBP, 8);
        let n = 300_000;
        let (a, b) = (0.6, 0.9);
        for theta in [0.5, 1.5] {
            let vals: Vec<f64> = (0..n)
                .map(|_| {
                    let xa = step_alpha2(&c, a, 1.0, &mut s).unwrap();
                    let xb = step_alpha2(&c, b, 1.0, &mut s).unwrap();
                    (-theta * (xa + xb)).exp()
                })
                .collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let target = law.csbp_transition_lt(a + b, 1.0, theta).unwrap();
            let se = (var / n as f64).sqrt();
            assert!((mean - target).abs() < 4.0 * se, "theta={theta}");
        }
    }
}
