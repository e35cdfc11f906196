//! Fixtures shared by the benchmarks.

use admission_core::belief::init_belief;
use admission_core::population::{sample_deployment_params, sample_initial_size};
use admission_core::rng::stream;
use admission_core::{BeliefState, InfoLevel, PopulationModel};

/// A cluster of `n` deployments with varied posteriors.
pub struct Fixture {
    pub model: PopulationModel,
    pub beliefs: Vec<BeliefState>,
    pub cores: Vec<u64>,
}

impl Fixture {
    pub fn new(n: usize, seed: u64) -> Self {
        let model = PopulationModel::default();
        let mut beliefs = Vec::with_capacity(n);
        let mut cores = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = stream(seed, i as u64);
            let params = sample_deployment_params(&model, &mut rng);
            cores.push(sample_initial_size(&model, &params, &mut rng));
            beliefs.push(init_belief(&model, InfoLevel::new((i % 4) as u32), &params, &mut rng));
        }
        Self { model, beliefs, cores }
    }

    pub fn total_cores(&self) -> u64 {
        self.cores.iter().sum()
    }
}
