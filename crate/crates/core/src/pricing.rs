//! Variance-based hourly pricing.
//!
//! A deployment pays `κ₁·C + κ₂·Var` per hour. Submitting a mixture of
//! workloads under one label raises the variance by the spread of the
//! type means, so labelling each type separately never costs more.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::moments::{LookaheadGrid, MomentProfile};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PricingConfig {
    /// Price per core-hour.
    pub kappa1: f64,
    /// Price per unit of size variance per hour.
    pub kappa2: f64,
    /// Look-ahead horizon whose peak variance is charged.
    #[serde(default)]
    pub variance_horizon: usize,
}

impl PricingConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.kappa1 >= 0.0 && self.kappa2 >= 0.0, || {
            format!("prices must be non-negative, got κ₁={} κ₂={}", self.kappa1, self.kappa2)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledType {
    pub label: String,
    pub mean_size: f64,
    pub variance: f64,
    pub mix_weight: f64,
}

pub fn validate_mixture(types: &[LabeledType]) -> Result<()> {
    ensure(!types.is_empty(), || "a mixture needs at least one type".into())?;
    for t in types {
        ensure(t.variance >= 0.0 && t.mean_size >= 0.0, || format!("type {} has a negative mean or variance", t.label))?;
        ensure(t.mix_weight >= 0.0, || format!("type {} has a negative weight", t.label))?;
    }
    let total: f64 = types.iter().map(|t| t.mix_weight).sum();
    ensure((total - 1.0).abs() <= 1e-9, || format!("mixture weights sum to {total}, not 1"))
}

pub fn hourly_price(active_cores: f64, variance: f64, cfg: &PricingConfig) -> f64 {
    cfg.kappa1 * active_cores + cfg.kappa2 * variance
}

pub fn mixture_mean(types: &[LabeledType]) -> f64 {
    types.iter().map(|t| t.mix_weight * t.mean_size).sum()
}

/// `Σ wᵢ (meanᵢ − mean)²`, the variance of the type means.
fn between_type_variance(types: &[LabeledType]) -> f64 {
    let mean = mixture_mean(types);
    types.iter().map(|t| t.mix_weight * (t.mean_size - mean).powi(2)).sum()
}

/// Law of total variance: `Σ wᵢ Varᵢ + Σ wᵢ (meanᵢ − mean)²`.
pub fn mixture_variance(types: &[LabeledType]) -> Result<f64> {
    validate_mixture(types)?;
    let within: f64 = types.iter().map(|t| t.mix_weight * t.variance).sum();
    Ok(within + between_type_variance(types))
}

/// Expected hourly saving from labelling each type separately.
pub fn labeling_savings(types: &[LabeledType], cfg: &PricingConfig) -> Result<f64> {
    validate_mixture(types)?;
    cfg.validate()?;
    Ok(cfg.kappa2 * between_type_variance(types))
}

/// Variance charged for a deployment: the peak of `v_L` over the configured
/// look-ahead horizon of its profile.
pub fn variance_estimate(profile: &MomentProfile, grid: &LookaheadGrid, cfg: &PricingConfig) -> Result<f64> {
    ensure(cfg.variance_horizon < grid.horizons.len(), || {
        format!("variance_horizon {} out of range", cfg.variance_horizon)
    })?;
    let start = cfg.variance_horizon * grid.block_len();
    Ok(profile.v_l[start..start + grid.block_len()].iter().copied().fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceRow {
    pub label: String,
    pub mean_size: f64,
    pub variance: f64,
    pub hourly_price: f64,
}

/// Prices of every labelled type followed by the pooled mixture row.
pub fn price_table(types: &[LabeledType], cfg: &PricingConfig) -> Result<Vec<PriceRow>> {
    let pooled_variance = mixture_variance(types)?;
    cfg.validate()?;
    let mut rows: Vec<PriceRow> = types
        .iter()
        .map(|t| PriceRow {
            label: t.label.clone(),
            mean_size: t.mean_size,
            variance: t.variance,
            hourly_price: hourly_price(t.mean_size, t.variance, cfg),
        })
        .collect();
    let mean = mixture_mean(types);
    rows.push(PriceRow {
        label: "mixture".into(),
        mean_size: mean,
        variance: pooled_variance,
        hourly_price: hourly_price(mean, pooled_variance, cfg),
    });
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ty(mean: f64, var: f64, w: f64) -> LabeledType {
        LabeledType { label: format!("m{mean}"), mean_size: mean, variance: var, mix_weight: w }
    }

    const CFG: PricingConfig = PricingConfig { kappa1: 1.0, kappa2: 1.0, variance_horizon: 0 };

    #[test]
    fn hourly_price_examples() {
        let cfg = PricingConfig { kappa1: 1.0, kappa2: 0.5, variance_horizon: 0 };
        assert_eq!(hourly_price(4.0, 2.0, &cfg), 5.0);
        assert_eq!(hourly_price(0.0, 0.0, &cfg), 0.0);
        assert_eq!(hourly_price(3.0, 9.0, &PricingConfig { kappa2: 0.0, ..cfg }), 3.0);
    }

    #[test]
    fn bernoulli_mixture() {
        let types = [ty(0.0, 0.0, 0.5), ty(1.0, 0.0, 0.5)];
        assert_eq!(mixture_variance(&types).unwrap(), 0.25);
        assert_eq!(labeling_savings(&types, &CFG).unwrap(), 0.25);
        assert_eq!(mixture_variance(&[ty(3.0, 1.7, 1.0)]).unwrap(), 1.7);
    }

    #[test]
    fn identical_types_save_nothing() {
        let types = [ty(2.0, 1.0, 0.3), ty(2.0, 1.0, 0.7)];
        assert_eq!(labeling_savings(&types, &CFG).unwrap(), 0.0);
    }

    #[test]
    fn invalid_mixtures_are_rejected() {
        assert!(mixture_variance(&[]).is_err());
        assert!(mixture_variance(&[ty(1.0, 1.0, 0.4)]).is_err());
        assert!(mixture_variance(&[ty(1.0, -1.0, 1.0)]).is_err());
        assert!(labeling_savings(&[ty(1.0, 1.0, 1.0)], &PricingConfig { kappa2: -1.0, ..CFG }).is_err());
    }

    #[test]
    fn price_table_ends_with_pooled_row() {
        let rows = price_table(&[ty(0.0, 0.0, 0.5), ty(2.0, 0.0, 0.5)], &CFG).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2].label, "mixture");
        assert_eq!(rows[2].hourly_price, 1.0 + 1.0);
    }

    #[test]
    fn variance_estimate_reads_requested_horizon() {
        let grid = LookaheadGrid::new(vec![24.0, 48.0], 2, 1e-5).unwrap();
        let profile = MomentProfile { e_l: vec![0.0; 6], v_l: vec![0.0, 3.0, 1.0, 0.0, 7.0, 2.0], truncated_at: vec![None, None] };
        assert_eq!(variance_estimate(&profile, &grid, &CFG).unwrap(), 3.0);
        let second = PricingConfig { variance_horizon: 1, ..CFG };
        assert_eq!(variance_estimate(&profile, &grid, &second).unwrap(), 7.0);
        assert!(variance_estimate(&profile, &grid, &PricingConfig { variance_horizon: 2, ..CFG }).is_err());
    }

    fn mixture() -> impl Strategy<Value = Vec<LabeledType>> {
        prop::collection::vec((0.0f64..1e4, 0.0f64..1e6, 0.001f64..1.0), 1..8).prop_map(|raw| {
            let total: f64 = raw.iter().map(|r| r.2).sum();
            raw.into_iter().map(|(m, v, w)| ty(m, v, w / total)).collect()
        })
    }

    proptest! {
        #[test]
        fn savings_are_never_negative(types in mixture(), kappa2 in 0.0f64..100.0) {
            let cfg = PricingConfig { kappa1: 0.0, kappa2, variance_horizon: 0 };
            prop_assert!(labeling_savings(&types, &cfg).unwrap() >= 0.0);
            let within: f64 = types.iter().map(|t| t.mix_weight * t.variance).sum();
            prop_assert!(mixture_variance(&types).unwrap() >= within);
        }

        #[test]
        fn savings_scale_linearly_in_kappa2(types in mixture(), k in 0.1f64..10.0) {
            let one = labeling_savings(&types, &PricingConfig { kappa2: 1.0, ..CFG }).unwrap();
            let scaled = labeling_savings(&types, &PricingConfig { kappa2: k, ..CFG }).unwrap();
            prop_assert!((scaled - k * one).abs() <= 1e-12 * scaled.abs().max(1.0));
        }

        #[test]
        fn price_is_monotone(c in 0.0f64..1e4, v in 0.0f64..1e6, dc in 0.0f64..10.0, dv in 0.0f64..10.0, k1 in 0.0f64..5.0, k2 in 0.0f64..5.0) {
            let cfg = PricingConfig { kappa1: k1, kappa2: k2, variance_horizon: 0 };
            prop_assert!(hourly_price(c + dc, v, &cfg) >= hourly_price(c, v, &cfg));
            prop_assert!(hourly_price(c, v + dv, &cfg) >= hourly_price(c, v, &cfg));
        }
    }
}
