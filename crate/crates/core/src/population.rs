//! Generative model for deployments.
//!
//! A deployment is driven by a hidden triple `(Λ, Σ, M)` drawn once from
//! independent population-wide Gamma priors:
//!
//! - scale-outs arrive as a Poisson process with rate `Λ·M^ν` per hour,
//! - each scale-out asks for `1 + Poisson(Σ)` cores,
//! - every core lives an `Exponential(M)` time,
//! - the whole deployment is shut down after an `Exponential(Δ·M)` time.
//!
//! Time is measured in hours and Gamma distributions use the shape–rate
//! parameterisation throughout.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Gamma distribution in shape–rate form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGamma")]
pub struct GammaParams {
    pub shape: f64,
    pub rate: f64,
}

#[derive(Deserialize)]
struct RawGamma {
    shape: f64,
    rate: f64,
}

impl TryFrom<RawGamma> for GammaParams {
    type Error = Error;

    fn try_from(raw: RawGamma) -> Result<Self> {
        GammaParams::new(raw.shape, raw.rate)
    }
}

impl GammaParams {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        ensure(shape.is_finite() && shape > 0.0, || {
            format!("gamma shape must be positive and finite, got {shape}")
        })?;
        ensure(rate.is_finite() && rate > 0.0, || {
            format!("gamma rate must be positive and finite, got {rate}")
        })?;
        Ok(Self { shape, rate })
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    pub fn variance(&self) -> f64 {
        self.shape / (self.rate * self.rate)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        // Valid parameters always construct.
        Gamma::new(self.shape, 1.0 / self.rate)
            .expect("validated gamma parameters")
            .sample(rng)
    }
}

/// How the size of a freshly arriving deployment is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialSize {
    /// Arrival behaves like a first scale-out: `1 + Poisson(Σ)` cores.
    #[default]
    ScaleOut,
    /// Every deployment starts with exactly one core.
    Single,
}

/// Population-wide priors plus the shutdown factor `Δ` and power-law exponent `ν`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationModel {
    /// Normalised scale-out rate `Λ`.
    pub lambda_prior: GammaParams,
    /// Mean extra scale-out size `Σ` (cores).
    pub sigma_prior: GammaParams,
    /// Core lifetime rate `M` (1/hour).
    pub mu_prior: GammaParams,
    /// Deployment shutdown rate per core-lifetime rate.
    pub delta: f64,
    /// Exponent coupling scale-out rate to core lifetime rate.
    pub nu: f64,
    #[serde(default)]
    pub initial_size: InitialSize,
}

impl Default for PopulationModel {
    fn default() -> Self {
        Self::azure_fit()
    }
}

impl PopulationModel {
    /// Priors fitted to one month of Azure internal deployments.
    pub fn azure_fit() -> Self {
        Self {
            lambda_prior: GammaParams { shape: 0.4907, rate: 0.4496 },
            sigma_prior: GammaParams { shape: 0.2616, rate: 0.0552 },
            mu_prior: GammaParams { shape: 0.3107, rate: 0.5778 },
            delta: 0.119,
            nu: 0.673,
            initial_size: InitialSize::ScaleOut,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for g in [&self.lambda_prior, &self.sigma_prior, &self.mu_prior] {
            GammaParams::new(g.shape, g.rate)?;
        }
        ensure(self.delta.is_finite() && self.delta > 0.0, || {
            format!("delta must be positive, got {}", self.delta)
        })?;
        ensure(self.nu.is_finite(), || format!("nu must be finite, got {}", self.nu))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let model: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Event rate (1/hour) of one of a deployment's processes.
    pub fn rate(&self, params: &DeploymentParams, kind: ProcessKind) -> f64 {
        match kind {
            ProcessKind::ScaleOut => params.scaleout_rate(self.nu),
            ProcessKind::CoreDeath => params.mu,
            ProcessKind::Shutdown => self.delta * params.mu,
        }
    }
}

/// A deployment's hidden process parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeploymentParams {
    /// `Λ`, scale-out rate per unit of `M^ν`.
    pub lambda_norm: f64,
    /// `Σ`, mean number of extra cores per scale-out.
    pub sigma: f64,
    /// `M`, core death rate (1/hour).
    pub mu: f64,
}

impl DeploymentParams {
    pub fn new(lambda_norm: f64, sigma: f64, mu: f64) -> Result<Self> {
        ensure(lambda_norm > 0.0 && lambda_norm.is_finite(), || {
            format!("lambda_norm must be positive, got {lambda_norm}")
        })?;
        ensure(sigma >= 0.0 && sigma.is_finite(), || {
            format!("sigma must be non-negative, got {sigma}")
        })?;
        ensure(mu > 0.0 && mu.is_finite(), || format!("mu must be positive, got {mu}"))?;
        Ok(Self { lambda_norm, sigma, mu })
    }

    /// Effective scale-out rate `Λ·M^ν` (1/hour).
    pub fn scaleout_rate(&self, nu: f64) -> f64 {
        self.lambda_norm * self.mu.powf(nu)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProcessKind {
    ScaleOut,
    CoreDeath,
    Shutdown,
}

/// Draw a deployment's hidden parameters from the population priors.
pub fn sample_deployment_params<R: Rng + ?Sized>(
    model: &PopulationModel,
    rng: &mut R,
) -> DeploymentParams {
    // Gamma samples can underflow to exactly zero for tiny shapes; keep the
    // strictly-positive invariants on rates.
    let lambda_norm = model.lambda_prior.sample(rng).max(f64::MIN_POSITIVE);
    let sigma = model.sigma_prior.sample(rng);
    let mu = model.mu_prior.sample(rng).max(f64::MIN_POSITIVE);
    DeploymentParams { lambda_norm, sigma, mu }
}

/// Exponential waiting time with the given rate. A zero rate never fires.
pub fn sample_exponential<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> f64 {
    if rate <= 0.0 {
        return f64::INFINITY;
    }
    if rate.is_infinite() {
        return 0.0;
    }
    Exp::new(rate).expect("positive rate").sample(rng)
}

/// Waiting time until the next event of the given process.
pub fn sample_event_time<R: Rng + ?Sized>(
    model: &PopulationModel,
    params: &DeploymentParams,
    kind: ProcessKind,
    rng: &mut R,
) -> f64 {
    sample_exponential(model.rate(params, kind), rng)
}

/// Draw from `Poisson(mean)`, treating a zero mean as a point mass at zero.
pub fn sample_poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as u64
}

/// Number of cores requested by one scale-out: `1 + Poisson(Σ)`.
pub fn sample_scaleout_size<R: Rng + ?Sized>(params: &DeploymentParams, rng: &mut R) -> u64 {
    1 + sample_poisson(params.sigma, rng)
}

/// Cores a deployment holds when it arrives.
pub fn sample_initial_size<R: Rng + ?Sized>(
    model: &PopulationModel,
    params: &DeploymentParams,
    rng: &mut R,
) -> u64 {
    match model.initial_size {
        InitialSize::ScaleOut => sample_scaleout_size(params, rng),
        InitialSize::Single => 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn mean_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    #[test]
    fn concentrated_priors_approach_point_mass() {
        let m = 2.5;
        let g = GammaParams::new(1e8, 1e8 / m).unwrap();
        let model = PopulationModel {
            lambda_prior: g,
            sigma_prior: g,
            mu_prior: g,
            ..PopulationModel::default()
        };
        let p = sample_deployment_params(&model, &mut rng::stream(1, 0));
        for v in [p.lambda_norm, p.sigma, p.mu] {
            assert!((v - m).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn lambda_prior_mean_matches_shape_over_rate() {
        let model = PopulationModel::default();
        let mut r = rng::stream(11, 0);
        let xs: Vec<f64> = (0..1_000_000)
            .map(|_| sample_deployment_params(&model, &mut r).lambda_norm)
            .collect();
        let (m, _) = mean_var(&xs);
        let expected = 0.4907 / 0.4496;
        assert!((m / expected - 1.0).abs() < 0.01, "mean {m} vs {expected}");
    }

    #[test]
    fn identical_seeds_give_identical_params() {
        let model = PopulationModel::default();
        let a = sample_deployment_params(&model, &mut rng::stream(5, 9));
        let b = sample_deployment_params(&model, &mut rng::stream(5, 9));
        assert_eq!(a.lambda_norm.to_bits(), b.lambda_norm.to_bits());
        assert_eq!(a.sigma.to_bits(), b.sigma.to_bits());
        assert_eq!(a.mu.to_bits(), b.mu.to_bits());
    }

    #[test]
    fn scaleout_waits_have_unit_mean() {
        let model = PopulationModel { nu: 0.0, ..PopulationModel::default() };
        let params = DeploymentParams::new(1.0, 0.0, 1.0).unwrap();
        let mut r = rng::stream(3, 0);
        let xs: Vec<f64> = (0..1_000_000)
            .map(|_| sample_event_time(&model, &params, ProcessKind::ScaleOut, &mut r))
            .collect();
        let (m, v) = mean_var(&xs);
        assert!((m - 1.0).abs() < 0.01, "{m}");
        assert!((v - 1.0).abs() < 0.02, "{v}");
    }

    #[test]
    fn shutdown_wait_mean_is_inverse_delta() {
        let model = PopulationModel::default();
        let params = DeploymentParams::new(1.0, 0.0, 1.0).unwrap();
        let mut r = rng::stream(4, 0);
        let xs: Vec<f64> = (0..1_000_000)
            .map(|_| sample_event_time(&model, &params, ProcessKind::Shutdown, &mut r))
            .collect();
        let (m, v) = mean_var(&xs);
        let expected = 1.0 / 0.119;
        let se = (v / xs.len() as f64).sqrt();
        assert!((m - expected).abs() < 3.0 * se + 1e-9, "{m} vs {expected}");
    }

    #[test]
    fn core_death_wait_vanishes_for_huge_rates() {
        let model = PopulationModel::default();
        let params = DeploymentParams { lambda_norm: 1.0, sigma: 0.0, mu: f64::INFINITY };
        let t = sample_event_time(&model, &params, ProcessKind::CoreDeath, &mut rng::stream(1, 1));
        assert_eq!(t, 0.0);
        let params = DeploymentParams::new(1.0, 0.0, 1e12).unwrap();
        let t = sample_event_time(&model, &params, ProcessKind::CoreDeath, &mut rng::stream(1, 1));
        assert!(t < 1e-9);
    }

    #[test]
    fn zero_sigma_always_requests_one_core() {
        let params = DeploymentParams::new(1.0, 0.0, 1.0).unwrap();
        let mut r = rng::stream(8, 0);
        assert!((0..10_000).all(|_| sample_scaleout_size(&params, &mut r) == 1));
    }

    #[test]
    fn scaleout_size_mean_and_floor() {
        let params = DeploymentParams::new(1.0, 3.0, 1.0).unwrap();
        let mut r = rng::stream(9, 0);
        let draws: Vec<u64> = (0..1_000_000).map(|_| sample_scaleout_size(&params, &mut r)).collect();
        assert!(draws.iter().all(|&s| s >= 1));
        let xs: Vec<f64> = draws.iter().map(|&s| s as f64).collect();
        let (m, v) = mean_var(&xs);
        assert!((m / 4.0 - 1.0).abs() < 0.01, "{m}");
        assert!((v / 3.0 - 1.0).abs() < 0.02, "{v}");
    }

    #[test]
    fn core_lifetimes_are_memoryless() {
        // S(t + s) / S(t) should match S(s).
        let model = PopulationModel::default();
        let params = DeploymentParams::new(1.0, 0.0, 0.5).unwrap();
        let mut r = rng::stream(21, 0);
        let xs: Vec<f64> = (0..1_000_000)
            .map(|_| sample_event_time(&model, &params, ProcessKind::CoreDeath, &mut r))
            .collect();
        let surv = |t: f64| xs.iter().filter(|&&x| x > t).count() as f64;
        let (t, s) = (1.0, 2.0);
        let conditional = surv(t + s) / surv(t);
        let direct = surv(s) / xs.len() as f64;
        let p = (-0.5f64 * s).exp();
        let se = (p * (1.0 - p) / surv(t)).sqrt() + (p * (1.0 - p) / xs.len() as f64).sqrt();
        assert!((conditional - direct).abs() < 3.0 * se, "{conditional} vs {direct}");
    }

    #[test]
    fn rejects_invalid_gamma() {
        assert!(GammaParams::new(0.0, 1.0).is_err());
        assert!(GammaParams::new(1.0, -1.0).is_err());
        assert!(toml::from_str::<GammaParams>("shape = -1.0\nrate = 1.0").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let model = PopulationModel::default();
        let text = model.to_toml_string().unwrap();
        let back = PopulationModel::from_toml_str(&text).unwrap();
        assert_eq!(model, back);
    }
}
