#![allow(dead_code)]

use std::collections::BTreeMap;

use fedsim::data::{generate_federation, ClientDataset, DomainShift, Range, SynthConfig};
use fedsim::federation::{FederationConfig, StrategyConfig};
use fedsim::model::{ModelSpec, OptimizerConfig};
use rand::Rng;

pub fn synth(seed: u64, n_centers: usize, input_dim: usize) -> SynthConfig {
    SynthConfig {
        n_centers,
        input_dim,
        patients_per_center: Range::new(4, 8),
        tiles_per_patient: Range::new(3, 6),
        class_pos_fraction: Range::new(0.3, 0.7),
        class_separation: 2.0,
        domain_shift: DomainShift {
            rotation_scale: 0.3,
            bias_scale: 0.3,
            noise_sigma: 0.3,
        },
        seed,
    }
}

pub fn small_federation(
    seed: u64,
    n_centers: usize,
    input_dim: usize,
) -> BTreeMap<String, ClientDataset> {
    generate_federation(&synth(seed, n_centers, input_dim)).unwrap()
}

pub fn random_spec<R: Rng>(rng: &mut R, input_dim: usize) -> ModelSpec {
    if rng.random_bool(0.5) {
        ModelSpec::logistic(input_dim)
    } else {
        let depth = rng.random_range(1..=2);
        ModelSpec::mlp(
            input_dim,
            (0..depth).map(|_| rng.random_range(2..=6)).collect(),
        )
    }
}

pub fn fed_config(
    datasets: &BTreeMap<String, ClientDataset>,
    model: ModelSpec,
    strategy: StrategyConfig,
    rounds: u32,
    seed: u64,
) -> FederationConfig {
    FederationConfig {
        rounds,
        local_epochs_per_round: 1,
        batch_size: 8,
        clients: datasets.keys().cloned().collect(),
        seed,
        strategy,
        model,
        optimizer: OptimizerConfig::default(),
    }
}

/// Acceptance-style random instance: a few clients, a random model and seed.
pub struct Instance {
    pub datasets: BTreeMap<String, ClientDataset>,
    pub model: ModelSpec,
    pub seed: u64,
}

pub fn random_instance<R: Rng>(rng: &mut R) -> Instance {
    let seed = rng.random();
    let dim = rng.random_range(2..=5);
    let n_centers = rng.random_range(2..=5);
    Instance {
        datasets: small_federation(seed, n_centers, dim),
        model: random_spec(rng, dim),
        seed,
    }
}
