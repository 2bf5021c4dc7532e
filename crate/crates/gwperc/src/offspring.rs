//! Offspring laws on {1, 2, ...} (no leaves) and the scalar model
//! constants every other module consumes.
//!
//! Two families are supported: an explicit finite pmf, and the zeta-tail
//! law P(X >= k) = k^-alpha for alpha in (1, 2), which has stable tails
//! with c1 = 1 and closed-form inverse CDF.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics;
use crate::rng::{u64_to_open01, Stream};

/// Inverse-CDF table size for the zeta-tail sampler; draws beyond the
/// table (probability 2^(-16 alpha)) invert the tail formula directly.
pub const K_TABLE: u64 = 1 << 16;

/// Distribution description as it appears in experiment configs.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OffspringConfig {
    Explicit { pmf: BTreeMap<String, f64> },
    ZetaTail { alpha: f64 },
}

impl OffspringConfig {
    /// Convenience constructor for explicit laws given (k, p) pairs.
    pub fn explicit(pairs: &[(u64, f64)]) -> Self {
        OffspringConfig::Explicit {
            pmf: pairs.iter().map(|&(k, p)| (k.to_string(), p)).collect(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum OffspringError {
    #[error("offspring law must not place mass on 0 (no leaves)")]
    RejectLeaves,
    #[error("offspring mean must exceed 1, got {mu}")]
    RejectSubcritical { mu: f64 },
    #[error("malformed pmf: {reason}")]
    MalformedPmf { reason: String },
    #[error("zeta-tail alpha must lie strictly in (1, 2), got {alpha}")]
    InvalidAlpha { alpha: f64 },
}

/// Tail-behaviour regime of Assumption-style laws.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    FiniteVariance,
    StableTail,
}

/// Validated offspring law plus the precomputed sampling structures.
#[derive(Clone, Debug)]
pub struct OffspringSpec {
    variant: Variant,
    sampler: Sampler,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Variant {
    /// Sorted (k, p(k)) with k >= 1 and p(k) > 0.
    Explicit(Vec<(u64, f64)>),
    /// P(X >= k) = k^-alpha.
    ZetaTail { alpha: f64 },
}

#[derive(Clone, Debug)]
enum Sampler {
    Explicit {
        /// Cumulative thresholds in u64 space; entry i covers values[i].
        thresholds: Vec<u64>,
        values: Vec<u64>,
    },
    Zeta {
        alpha: f64,
        neg_inv_alpha: f64,
        /// tail[k-1] = k^-alpha for k = 1 ..= K_TABLE + 1.
        tail: Vec<f64>,
    },
}

/// Scalar constants shared by every module, all derived from the law.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConstants {
    pub mu: f64,
    pub p_c: f64,
    pub regime: Regime,
    pub alpha: f64,
    pub beta: f64,
    /// Tail constant; 1 for the zeta family, absent in the finite
    /// variance regime.
    pub c1: Option<f64>,
    /// Offspring variance, finite regime only.
    pub sigma2: Option<f64>,
    pub c_alpha: f64,
}

impl ModelConstants {
    pub fn is_finite_variance(&self) -> bool {
        self.regime == Regime::FiniteVariance
    }
}

/// Validate a distribution description.
pub fn make_spec(config: &OffspringConfig) -> Result<OffspringSpec, OffspringError> {
    match config {
        OffspringConfig::Explicit { pmf } => {
            let mut pairs = Vec::with_capacity(pmf.len());
            for (ks, &p) in pmf {
                let k: u64 = ks.parse().map_err(|_| OffspringError::MalformedPmf {
                    reason: format!("key {ks:?} is not a nonnegative integer"),
                })?;
                if !p.is_finite() || p < 0.0 {
                    return Err(OffspringError::MalformedPmf {
                        reason: format!("p({k}) = {p} is not a probability"),
                    });
                }
                if p == 0.0 {
                    continue;
                }
                if k == 0 {
                    return Err(OffspringError::RejectLeaves);
                }
                pairs.push((k, p));
            }
            if pairs.is_empty() {
                return Err(OffspringError::MalformedPmf { reason: "empty pmf".into() });
            }
            pairs.sort_unstable_by_key(|&(k, _)| k);
            let total: f64 = pairs.iter().map(|&(_, p)| p).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(OffspringError::MalformedPmf {
                    reason: format!("pmf sums to {total}, not 1"),
                });
            }
            let mu: f64 = pairs.iter().map(|&(k, p)| k as f64 * p).sum::<f64>() / total;
            if mu <= 1.0 {
                return Err(OffspringError::RejectSubcritical { mu });
            }
            // Renormalize exactly so downstream constants see sum 1.
            for (_, p) in pairs.iter_mut() {
                *p /= total;
            }
            let sampler = build_explicit_sampler(&pairs);
            Ok(OffspringSpec { variant: Variant::Explicit(pairs), sampler })
        }
        OffspringConfig::ZetaTail { alpha } => {
            let alpha = *alpha;
            if !(alpha > 1.0 && alpha < 2.0) || !alpha.is_finite() {
                return Err(OffspringError::InvalidAlpha { alpha });
            }
            let tail: Vec<f64> =
                (1..=K_TABLE + 1).map(|k| (k as f64).powf(-alpha)).collect();
            Ok(OffspringSpec {
                variant: Variant::ZetaTail { alpha },
                sampler: Sampler::Zeta { alpha, neg_inv_alpha: -1.0 / alpha, tail },
            })
        }
    }
}

fn build_explicit_sampler(pairs: &[(u64, f64)]) -> Sampler {
    let total: f64 = pairs.iter().map(|&(_, p)| p).sum();
    let mut thresholds = Vec::with_capacity(pairs.len());
    let mut values = Vec::with_capacity(pairs.len());
    let mut acc = 0.0;
    for &(k, p) in pairs {
        acc += p;
        let t = (acc / total) * 2f64.powi(64);
        thresholds.push(if t >= u64::MAX as f64 { u64::MAX } else { t as u64 });
        values.push(k);
    }
    *thresholds.last_mut().expect("nonempty") = u64::MAX;
    Sampler::Explicit { thresholds, values }
}

impl OffspringSpec {
    pub fn variant(&self) -> &Variant {
        &self.variant
    }

    pub fn is_stable(&self) -> bool {
        matches!(self.variant, Variant::ZetaTail { .. })
    }

    /// Exact tail P(X >= k) as the sampler realizes it.
    pub fn tail_probability(&self, k: u64) -> f64 {
        match &self.variant {
            Variant::Explicit(pairs) => {
                pairs.iter().filter(|&&(j, _)| j >= k).map(|&(_, p)| p).sum()
            }
            Variant::ZetaTail { alpha } => {
                if k == 0 {
                    1.0
                } else {
                    (k as f64).powf(-alpha)
                }
            }
        }
    }

    /// pmf value p(k).
    pub fn pmf(&self, k: u64) -> f64 {
        match &self.variant {
            Variant::Explicit(pairs) => pairs
                .iter()
                .find(|&&(j, _)| j == k)
                .map(|&(_, p)| p)
                .unwrap_or(0.0),
            Variant::ZetaTail { .. } => {
                self.tail_probability(k) - self.tail_probability(k + 1)
            }
        }
    }

    /// Deterministic draw from one uniform word. This is the primitive
    /// the quenched tree is built on.
    #[inline]
    pub fn sample_from_u64(&self, r: u64) -> u64 {
        match &self.sampler {
            Sampler::Explicit { thresholds, values } => {
                let i = thresholds.partition_point(|&t| t <= r);
                values[i.min(values.len() - 1)]
            }
            Sampler::Zeta { alpha, neg_inv_alpha, tail } => {
                let u = u64_to_open01(r);
                // P(X >= k) = k^-alpha, so X = max{k : k^-alpha >= u}.
                if u > tail[K_TABLE as usize] {
                    // In-table: analytic guess, then fix rounding against
                    // the stored boundaries.
                    let mut k = u.powf(*neg_inv_alpha) as u64;
                    k = k.clamp(1, K_TABLE);
                    while k > 1 && tail[(k - 1) as usize] < u {
                        k -= 1;
                    }
                    while k < K_TABLE && tail[k as usize] >= u {
                        k += 1;
                    }
                    k
                } else {
                    let mut k = u.powf(*neg_inv_alpha) as u64;
                    k = k.max(K_TABLE);
                    while (k as f64).powf(-alpha) < u {
                        k -= 1;
                    }
                    while ((k + 1) as f64).powf(-alpha) >= u {
                        k += 1;
                    }
                    k
                }
            }
        }
    }
}

/// Draw one offspring count from a caller-owned stream.
pub fn sample_offspring(spec: &OffspringSpec, rng: &mut Stream) -> u64 {
    spec.sample_from_u64(rng.next_u64())
}

/// Derive the model constants. Pure and deterministic: equal specs give
/// bitwise-equal constants.
pub fn constants(spec: &OffspringSpec) -> ModelConstants {
    match spec.variant() {
        Variant::Explicit(pairs) => {
            let mu: f64 = pairs.iter().map(|&(k, p)| k as f64 * p).sum();
            let ex2: f64 = pairs.iter().map(|&(k, p)| (k * k) as f64 * p).sum();
            let factorial2: f64 =
                pairs.iter().map(|&(k, p)| (k * (k - 1)) as f64 * p).sum();
            let sigma2 = ex2 - mu * mu;
            // Finite-variance constant 2 E[X]^2 / E[X(X-1)]. The mean
            // exceeds 1, so some mass sits above 1 and the denominator
            // is strictly positive.
            let c_alpha = 2.0 * mu * mu / factorial2;
            ModelConstants {
                mu,
                p_c: 1.0 / mu,
                regime: Regime::FiniteVariance,
                alpha: 2.0,
                beta: 1.0,
                c1: None,
                sigma2: Some(sigma2),
                c_alpha,
            }
        }
        Variant::ZetaTail { alpha } => {
            let alpha = *alpha;
            let mu = numerics::zeta(alpha);
            let beta = 1.0 / (alpha - 1.0);
            let c1 = 1.0;
            let c_alpha = stable_c_alpha(c1, mu, alpha, numerics::abs_gamma_one_minus(alpha));
            ModelConstants {
                mu,
                p_c: 1.0 / mu,
                regime: Regime::StableTail,
                alpha,
                beta,
                c1: Some(c1),
                sigma2: None,
                c_alpha,
            }
        }
    }
}

fn stable_c_alpha(c1: f64, mu: f64, alpha: f64, gamma_factor: f64) -> f64 {
    let beta = 1.0 / (alpha - 1.0);
    c1.powf(-beta) * mu.powf(alpha * beta) * gamma_factor.powf(-beta) * beta.powf(beta)
}

/// Both candidate values of the stable constant: the one using
/// |Gamma(1-alpha)| (validated by the annealed Monte Carlo), and the
/// literal signed evaluation, which is NaN unless beta is an integer.
pub fn stable_c_alpha_candidates(constants: &ModelConstants) -> Option<(f64, f64)> {
    if constants.regime != Regime::StableTail {
        return None;
    }
    let (alpha, mu) = (constants.alpha, constants.mu);
    let c1 = constants.c1.unwrap_or(1.0);
    let g_abs = numerics::abs_gamma_one_minus(alpha);
    let abs_candidate = stable_c_alpha(c1, mu, alpha, g_abs);
    let literal = stable_c_alpha(c1, mu, alpha, -g_abs);
    Some((abs_candidate, literal))
}

/// Law and constants bundled, the way most call sites want them.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: OffspringSpec,
    pub constants: ModelConstants,
}

impl Model {
    pub fn from_config(config: &OffspringConfig) -> Result<Model, OffspringError> {
        let spec = make_spec(config)?;
        let constants = constants(&spec);
        Ok(Model { spec, constants })
    }
}
