//! Per-deployment belief over `(Λ, Σ, M)` kept as conjugate Gamma posteriors.
//!
//! Core lifetimes are exponential with rate `M`, so a Gamma prior on `M`
//! updates by adding deaths to the shape and core exposure (dead and still
//! alive cores alike) to the rate. Scale-out sizes minus one are Poisson
//! with mean `Σ`. The scale-out rate is `Λ·M^ν`; with `M` unknown the waiting
//! time is normalised by the plug-in `E[M]^ν` before it enters the `Λ` rate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::population::{
    sample_exponential, sample_scaleout_size, DeploymentParams, GammaParams, PopulationModel,
};

/// Amount of prior information handed over with an arriving deployment,
/// expressed as a number of pseudo-observations of each true process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InfoLevel {
    pub pseudo_observations: u32,
}

impl InfoLevel {
    pub const NONE: InfoLevel = InfoLevel { pseudo_observations: 0 };

    pub fn new(pseudo_observations: u32) -> Self {
        Self { pseudo_observations }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeliefState {
    pub lambda_post: GammaParams,
    pub sigma_post: GammaParams,
    pub mu_post: GammaParams,
    pub n_scaleouts: u64,
    /// Sum over observed scale-outs of `size - 1`.
    pub extra_cores_observed: u64,
    pub n_core_deaths: u64,
    /// Core-hours lived, including cores that are still running.
    pub total_core_exposure: f64,
    pub deployment_age: f64,
}

impl BeliefState {
    /// Belief with no observations: the population priors.
    pub fn from_prior(model: &PopulationModel) -> Self {
        Self {
            lambda_post: model.lambda_prior,
            sigma_post: model.sigma_prior,
            mu_post: model.mu_prior,
            n_scaleouts: 0,
            extra_cores_observed: 0,
            n_core_deaths: 0,
            total_core_exposure: 0.0,
            deployment_age: 0.0,
        }
    }

    /// Plug-in normaliser `E[M]^ν` applied to scale-out waiting time.
    pub fn rate_normaliser(&self, nu: f64) -> f64 {
        self.mu_post.mean().powf(nu)
    }

    /// A core died after `lifetime` hours that were not yet counted as exposure.
    pub fn update_on_core_death(&self, lifetime: f64) -> Result<Self> {
        if !(lifetime >= 0.0) {
            return Err(Error::NegativeDuration(lifetime));
        }
        let mut next = *self;
        next.mu_post.shape += 1.0;
        next.mu_post.rate += lifetime;
        next.n_core_deaths += 1;
        next.total_core_exposure += lifetime;
        Ok(next)
    }

    /// `live_cores` cores survived another `elapsed` hours (censored exposure).
    pub fn update_on_exposure(&self, elapsed: f64, live_cores: u64) -> Result<Self> {
        if !(elapsed >= 0.0) {
            return Err(Error::NegativeDuration(elapsed));
        }
        let mut next = *self;
        let exposure = elapsed * live_cores as f64;
        next.mu_post.rate += exposure;
        next.total_core_exposure += exposure;
        next.deployment_age += elapsed;
        Ok(next)
    }

    /// `elapsed` hours passed without a scale-out (censored waiting time).
    pub fn update_on_scaleout_wait(&self, elapsed: f64, nu: f64) -> Result<Self> {
        if !(elapsed >= 0.0) {
            return Err(Error::NegativeDuration(elapsed));
        }
        let mut next = *self;
        next.lambda_post.rate += elapsed * self.rate_normaliser(nu);
        Ok(next)
    }

    /// A scale-out of `size` cores was requested `elapsed_since_last` hours
    /// after the previous one (or after the last accounted waiting time).
    pub fn update_on_scaleout(&self, size: u64, elapsed_since_last: f64, nu: f64) -> Result<Self> {
        if size < 1 {
            return Err(Error::EmptyScaleOut(size));
        }
        let mut next = self.update_on_scaleout_wait(elapsed_since_last, nu)?;
        next.lambda_post.shape += 1.0;
        next.sigma_post.shape += (size - 1) as f64;
        next.sigma_post.rate += 1.0;
        next.n_scaleouts += 1;
        next.extra_cores_observed += size - 1;
        Ok(next)
    }
}

/// Belief for an arriving deployment after `info` pseudo-observations of each
/// of its true processes.
pub fn init_belief<R: Rng + ?Sized>(
    model: &PopulationModel,
    info: InfoLevel,
    true_params: &DeploymentParams,
    rng: &mut R,
) -> BeliefState {
    let mut belief = BeliefState::from_prior(model);
    let k = info.pseudo_observations;
    if k == 0 {
        return belief;
    }
    // Lifetimes first so the scale-out normaliser already uses the sharper M posterior.
    for _ in 0..k {
        let lifetime = sample_exponential(true_params.mu, rng);
        belief = belief.update_on_core_death(lifetime).expect("non-negative lifetime");
    }
    let rate = true_params.scaleout_rate(model.nu);
    for _ in 0..k {
        let wait = sample_exponential(rate, rng);
        let size = sample_scaleout_size(true_params, rng);
        belief = belief
            .update_on_scaleout(size, wait, model.nu)
            .expect("valid pseudo scale-out");
    }
    belief
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn unit_belief() -> BeliefState {
        let g = GammaParams::new(1.0, 1.0).unwrap();
        let model = PopulationModel {
            lambda_prior: g,
            sigma_prior: g,
            mu_prior: g,
            ..PopulationModel::default()
        };
        BeliefState::from_prior(&model)
    }

    #[test]
    fn no_information_keeps_priors() {
        let model = PopulationModel::default();
        let params = DeploymentParams::new(1.0, 1.0, 1.0).unwrap();
        let b = init_belief(&model, InfoLevel::NONE, &params, &mut rng::stream(1, 1));
        assert_eq!(b, BeliefState::from_prior(&model));
    }

    #[test]
    fn fifty_pseudo_observations_concentrate_on_true_mu() {
        let model = PopulationModel::default();
        let params = DeploymentParams::new(1.0, 2.0, 2.0).unwrap();
        let mut r = rng::stream(2, 0);
        let mean: f64 = (0..1000)
            .map(|_| init_belief(&model, InfoLevel::new(50), &params, &mut r).mu_post.mean())
            .sum::<f64>()
            / 1000.0;
        assert!((mean / 2.0 - 1.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn one_pseudo_observation_shrinks_mu_variance_on_average() {
        let model = PopulationModel::default();
        let prior_var = model.mu_prior.variance();
        let mut r = rng::stream(3, 0);
        let n = 5000;
        let mut avg = 0.0;
        for _ in 0..n {
            let params = crate::population::sample_deployment_params(&model, &mut r);
            avg += init_belief(&model, InfoLevel::new(1), &params, &mut r).mu_post.variance();
        }
        avg /= n as f64;
        assert!(avg < prior_var, "{avg} vs {prior_var}");
    }

    #[test]
    fn core_death_is_conjugate() {
        let b = unit_belief().update_on_core_death(1.0).unwrap();
        assert_eq!(b.mu_post, GammaParams { shape: 2.0, rate: 2.0 });
        assert_eq!(b.mu_post.mean(), 1.0);
        assert_eq!(b.n_core_deaths, 1);

        let z = unit_belief().update_on_core_death(0.0).unwrap();
        assert_eq!(z.mu_post, GammaParams { shape: 2.0, rate: 1.0 });

        let prior = BeliefState::from_prior(&PopulationModel::default());
        let two = prior.update_on_core_death(1.0).unwrap().update_on_core_death(3.0).unwrap();
        assert!((two.mu_post.shape - (prior.mu_post.shape + 2.0)).abs() < 1e-12);
        assert!((two.mu_post.rate - (prior.mu_post.rate + 4.0)).abs() < 1e-12);

        assert!(matches!(unit_belief().update_on_core_death(-1.0), Err(Error::NegativeDuration(_))));
    }

    #[test]
    fn exposure_updates_rate_only() {
        let b = unit_belief();
        assert_eq!(b.update_on_exposure(0.0, 5).unwrap(), b);
        let e = b.update_on_exposure(0.5, 2).unwrap();
        assert_eq!(e.mu_post, GammaParams { shape: 1.0, rate: 2.0 });
        assert!(e.mu_post.mean() < b.mu_post.mean());
        assert_eq!(e.total_core_exposure, 1.0);
        assert_eq!(e.deployment_age, 0.5);
    }

    #[test]
    fn scaleout_updates() {
        let b = unit_belief();
        let one = b.update_on_scaleout(1, 0.0, 0.0).unwrap();
        assert_eq!(one.sigma_post, GammaParams { shape: 1.0, rate: 2.0 });

        let prior = BeliefState::from_prior(&PopulationModel::default());
        let five = prior.update_on_scaleout(5, 0.0, 0.673).unwrap();
        assert!((five.sigma_post.shape - (prior.sigma_post.shape + 4.0)).abs() < 1e-12);
        assert!((five.sigma_post.rate - (prior.sigma_post.rate + 1.0)).abs() < 1e-12);

        let lam = prior.update_on_scaleout(1, 2.0, 0.0).unwrap();
        assert!((lam.lambda_post.shape - (prior.lambda_post.shape + 1.0)).abs() < 1e-12);
        assert!((lam.lambda_post.rate - (prior.lambda_post.rate + 2.0)).abs() < 1e-12);

        assert!(matches!(b.update_on_scaleout(0, 1.0, 0.0), Err(Error::EmptyScaleOut(0))));
    }

    #[test]
    fn posterior_consistency_with_many_observations() {
        let model = PopulationModel::default();
        let truth = DeploymentParams::new(0.8, 3.0, 0.7).unwrap();
        let mut r = rng::stream(17, 0);
        let mut b = BeliefState::from_prior(&model);
        for _ in 0..1000 {
            let lifetime = sample_exponential(truth.mu, &mut r);
            b = b.update_on_core_death(lifetime).unwrap();
            let size = sample_scaleout_size(&truth, &mut r);
            b = b.update_on_scaleout(size, 0.0, model.nu).unwrap();
        }
        assert!((b.mu_post.mean() / truth.mu - 1.0).abs() < 0.05);
        assert!((b.sigma_post.mean() / truth.sigma - 1.0).abs() < 0.05);
    }

    #[derive(Debug, Clone)]
    enum Obs {
        Death(f64),
        Exposure(f64, u64),
        ScaleOut(u64, f64),
    }

    fn obs() -> impl Strategy<Value = Obs> {
        prop_oneof![
            (0.0..10.0f64).prop_map(Obs::Death),
            (0.0..10.0f64, 0u64..20).prop_map(|(e, k)| Obs::Exposure(e, k)),
            (1u64..30, 0.0..10.0f64).prop_map(|(s, e)| Obs::ScaleOut(s, e)),
        ]
    }

    fn apply(b: BeliefState, o: &Obs) -> BeliefState {
        match *o {
            Obs::Death(t) => b.update_on_core_death(t).unwrap(),
            Obs::Exposure(e, k) => b.update_on_exposure(e, k).unwrap(),
            Obs::ScaleOut(s, e) => b.update_on_scaleout(s, e, 0.0).unwrap(),
        }
    }

    proptest! {
        #[test]
        fn order_invariant_without_coupling(mut xs in prop::collection::vec(obs(), 0..30), seed in any::<u64>()) {
            let prior = BeliefState::from_prior(&PopulationModel::default());
            let forward = xs.iter().fold(prior, apply);
            // Deterministic shuffle.
            let mut s = seed;
            for i in (1..xs.len()).rev() {
                s = crate::rng::mix(s, i as u64);
                xs.swap(i, (s % (i as u64 + 1)) as usize);
            }
            let shuffled = xs.iter().fold(prior, apply);
            for (a, b) in [
                (forward.lambda_post, shuffled.lambda_post),
                (forward.sigma_post, shuffled.sigma_post),
                (forward.mu_post, shuffled.mu_post),
            ] {
                prop_assert!((a.shape - b.shape).abs() <= 1e-9 * a.shape.max(1.0));
                prop_assert!((a.rate - b.rate).abs() <= 1e-9 * a.rate.max(1.0));
            }
        }

        #[test]
        fn posteriors_never_drop_below_prior(xs in prop::collection::vec(obs(), 0..30)) {
            let prior = BeliefState::from_prior(&PopulationModel::default());
            let post = xs.iter().fold(prior, apply);
            prop_assert!(post.lambda_post.shape >= prior.lambda_post.shape);
            prop_assert!(post.lambda_post.rate >= prior.lambda_post.rate);
            prop_assert!(post.sigma_post.shape >= prior.sigma_post.shape);
            prop_assert!(post.sigma_post.rate >= prior.sigma_post.rate);
            prop_assert!(post.mu_post.shape >= prior.mu_post.shape);
            prop_assert!(post.mu_post.rate >= prior.mu_post.rate);
        }
    }
}
