use fedsim::data::Sample;
use fedsim::model::{
    eval_loss, forward, init_params, local_train_epoch, loss_and_grad, ClassWeights, LossConfig,
    ModelSpec, OptimizerConfig, OptimizerState,
};
use fedsim::{ParameterSet, Purpose, RngStream};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sample(features: Vec<f64>, label: u8) -> Sample {
    Sample {
        features,
        label,
        patient_id: "p".into(),
        center_id: "c".into(),
    }
}

fn random_batch(rng: &mut ChaCha8Rng, dim: usize, n: usize) -> Vec<Sample> {
    (0..n)
        .map(|_| {
            sample(
                (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
                rng.random_range(0..=1),
            )
        })
        .collect()
}

fn perturbed(p: &ParameterSet, rng: &mut ChaCha8Rng, scale: f64) -> ParameterSet {
    let flat: Vec<f64> = p
        .flatten()
        .iter()
        .map(|v| v + scale * rng.random_range(-1.0..1.0))
        .collect();
    p.unflatten(&flat).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn proximal_term_adds_exactly_its_own_loss_and_gradient(seed in any::<u64>(), mu in 0.001f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = ModelSpec::mlp(3, vec![4]);
        let params = init_params(&spec, RngStream::new(seed, 0, 0, Purpose::Init)).unwrap();
        let anchor = perturbed(&params, &mut rng, 0.5);
        let batch = random_batch(&mut rng, 3, 5);
        let refs: Vec<&Sample> = batch.iter().collect();
        let plain = LossConfig::weighted(ClassWeights { neg: 0.8, pos: 1.2 });
        let prox = LossConfig { prox_mu: mu, ..plain };

        let (l0, g0) = loss_and_grad(&params, &refs, &plain, None).unwrap();
        let (l1, g1) = loss_and_grad(&params, &refs, &prox, Some(&anchor)).unwrap();
        let d = params.l2_distance(&anchor).unwrap();
        prop_assert!((l1 - l0 - 0.5 * mu * d * d).abs() <= 1e-12 * l1.abs().max(1.0));

        let expected: Vec<f64> = g0
            .flatten()
            .iter()
            .zip(params.flatten().iter().zip(anchor.flatten()))
            .map(|(g, (p, a))| g + mu * (p - a))
            .collect();
        for (got, want) in g1.flatten().iter().zip(&expected) {
            prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn swapping_labels_and_weights_mirrors_the_loss(seed in any::<u64>()) {
        // Negating the logistic model flips p to 1 − p, so relabeling every
        // sample and exchanging the class weights must give the same loss.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = ModelSpec::logistic(4);
        let params = perturbed(
            &init_params(&spec, RngStream::new(seed, 0, 0, Purpose::Init)).unwrap(),
            &mut rng,
            1.0,
        );
        let negated = params.scaled(-1.0).unwrap();
        let batch = random_batch(&mut rng, 4, 7);
        let flipped: Vec<Sample> = batch
            .iter()
            .map(|s| sample(s.features.clone(), 1 - s.label))
            .collect();
        let w = ClassWeights { neg: rng.random_range(0.1..3.0), pos: rng.random_range(0.1..3.0) };
        let swapped = ClassWeights { neg: w.pos, pos: w.neg };
        let a = eval_loss(&params, &batch.iter().collect::<Vec<_>>(), &LossConfig::weighted(w)).unwrap();
        let b = eval_loss(&negated, &flipped.iter().collect::<Vec<_>>(), &LossConfig::weighted(swapped)).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}

#[test]
fn inverse_frequency_weights_balance_class_mass() {
    let batch: Vec<Sample> = (0..10)
        .map(|i| sample(vec![0.0], u8::from(i < 2)))
        .collect();
    let w = ClassWeights::inverse_frequency(&batch);
    // 2 positives, 8 negatives: pos = 2·8/10, neg = 2·2/10
    assert!((w.pos - 1.6).abs() < 1e-15);
    assert!((w.neg - 0.4).abs() < 1e-15);
    assert!((2.0 * w.pos - 8.0 * w.neg).abs() < 1e-12);
}

#[test]
fn separable_data_is_learned() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let data: Vec<Sample> = (0..400)
        .map(|_| {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let label = u8::from(x[0] + 0.5 * x[1] > 0.1);
            sample(x, label)
        })
        .filter(|s| (s.features[0] + 0.5 * s.features[1] - 0.1).abs() > 0.05)
        .collect();
    let refs: Vec<&Sample> = data.iter().collect();
    for spec in [ModelSpec::logistic(2), ModelSpec::mlp(2, vec![8])] {
        let mut params = init_params(&spec, RngStream::new(3, 0, 0, Purpose::Init)).unwrap();
        let cfg = LossConfig::weighted(ClassWeights::default());
        let opt_cfg = OptimizerConfig {
            halve_every: 20,
            ..OptimizerConfig::default()
        };
        let mut opt = OptimizerState::new(opt_cfg, &params);
        let before = eval_loss(&params, &refs, &cfg).unwrap();
        for epoch in 0..60 {
            let stream = RngStream::new(3, epoch, 0, Purpose::Shuffle);
            (params, _) = local_train_epoch(
                &params,
                &refs,
                &cfg,
                None,
                &mut opt,
                epoch as u32,
                16,
                stream,
            )
            .unwrap();
        }
        let after = eval_loss(&params, &refs, &cfg).unwrap();
        let correct = data
            .iter()
            .filter(|s| u8::from(forward(&params, &s.features).unwrap() >= 0.5) == s.label)
            .count();
        let accuracy = correct as f64 / data.len() as f64;
        assert!(after < before, "{spec:?}: loss {before} -> {after}");
        assert!(accuracy >= 0.99, "{spec:?}: accuracy {accuracy}");
    }
}

#[test]
fn local_epoch_is_deterministic_per_stream() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = random_batch(&mut rng, 3, 50);
    let refs: Vec<&Sample> = batch.iter().collect();
    let spec = ModelSpec::mlp(3, vec![5]);
    let params = init_params(&spec, RngStream::new(5, 0, 0, Purpose::Init)).unwrap();
    let cfg = LossConfig::weighted(ClassWeights::default());
    let run = |stream: RngStream| {
        let mut opt = OptimizerState::new(OptimizerConfig::default(), &params);
        local_train_epoch(&params, &refs, &cfg, None, &mut opt, 0, 8, stream).unwrap()
    };
    let a = run(RngStream::new(5, 0, 1, Purpose::Shuffle));
    let b = run(RngStream::new(5, 0, 1, Purpose::Shuffle));
    let c = run(RngStream::new(5, 0, 2, Purpose::Shuffle));
    assert_eq!(a.0.checksum(), b.0.checksum());
    assert_eq!(a.1.to_bits(), b.1.to_bits());
    assert_ne!(a.0.checksum(), c.0.checksum());
}
