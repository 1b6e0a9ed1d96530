mod common;

use fedsim::data::Split;
use fedsim::federation::{
    aggregate_fedavg, aggregate_feddropoutavg, run_centralized, run_federation,
    run_local_baselines, selection_count, Federation, StrategyConfig,
};
use fedsim::model::{eval_loss, init_params, ClassWeights, LossConfig, ModelSpec};
use fedsim::{ParameterSet, Purpose, RngStream};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn dropout_aggregate_is_unbiased_for_equal_sizes() {
    // With equal client sizes and the fedavg result as the fallback value,
    // the expected masked aggregate equals the plain fedavg aggregate.
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let spec = ModelSpec::mlp(3, vec![4]);
    let template = init_params(&spec, RngStream::new(1, 0, 0, Purpose::Init)).unwrap();
    let models: Vec<(ParameterSet, u64)> = (0..4)
        .map(|_| {
            let flat: Vec<f64> = (0..template.len())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            (template.unflatten(&flat).unwrap(), 100)
        })
        .collect();
    let target = aggregate_fedavg(&models).unwrap().flatten();
    let prev = template.unflatten(&target).unwrap();
    let clients = [0, 1, 2, 3];
    let draws = 4000;
    let mut mean = vec![0.0; target.len()];
    for round in 0..draws {
        let (agg, _) = aggregate_feddropoutavg(&models, &clients, 0.4, &prev, 77, round).unwrap();
        for (m, v) in mean.iter_mut().zip(agg.flatten()) {
            *m += v / f64::from(draws);
        }
    }
    for (m, t) in mean.iter().zip(&target) {
        // per-draw spread is below 1, so 4000 draws give a standard error < 0.016
        assert!((m - t).abs() < 0.05, "{m} vs {t}");
    }
}

#[test]
fn rounds_select_the_configured_number_of_clients() {
    let datasets = common::small_federation(4, 6, 3);
    let cfg = common::fed_config(
        &datasets,
        ModelSpec::logistic(3),
        StrategyConfig::feddropoutavg(0.5, 0.4),
        6,
        4,
    );
    let mut fed = Federation::new(cfg, &datasets).unwrap();
    let mut seen = std::collections::BTreeSet::new();
    for t in 0..6 {
        let record = fed.run_round(t).unwrap();
        assert_eq!(record.round, t);
        assert_eq!(record.selected_client_ids.len(), selection_count(6, 0.4));
        assert_eq!(record.clients.len(), record.selected_client_ids.len());
        assert_eq!(record.checksum, fed.global().checksum());
        seen.extend(record.selected_client_ids);
    }
    assert!(
        seen.len() > selection_count(6, 0.4),
        "selection never changes"
    );
}

#[test]
fn best_round_is_the_validation_minimum() {
    let datasets = common::small_federation(8, 4, 3);
    let cfg = common::fed_config(
        &datasets,
        ModelSpec::mlp(3, vec![4]),
        StrategyConfig::fedavg(),
        8,
        8,
    );
    let result = run_federation(&cfg, &datasets).unwrap();
    assert_eq!(result.history.len(), 8);
    let best = &result.history[result.best_round as usize];
    assert!(result
        .history
        .iter()
        .all(|r| r.total_val_loss >= best.total_val_loss));
    assert_eq!(best.checksum, result.best_model.checksum());

    let recomputed: f64 = datasets
        .values()
        .map(|ds| {
            let weights = ClassWeights::inverse_frequency(ds.split(Split::Train));
            eval_loss(
                &result.best_model,
                &ds.split(Split::Val),
                &LossConfig::weighted(weights),
            )
            .unwrap()
        })
        .sum();
    assert!((recomputed - best.total_val_loss).abs() <= 1e-12 * recomputed);
}

#[test]
fn federation_is_deterministic() {
    let datasets = common::small_federation(5, 4, 3);
    let cfg = common::fed_config(
        &datasets,
        ModelSpec::mlp(3, vec![3]),
        StrategyConfig::feddropoutavg(0.3, 0.2),
        5,
        5,
    );
    let a = run_federation(&cfg, &datasets).unwrap();
    let b = run_federation(&cfg, &datasets).unwrap();
    let sums = |r: &fedsim::federation::FederationResult| {
        r.history.iter().map(|h| h.checksum).collect::<Vec<_>>()
    };
    assert_eq!(sums(&a), sums(&b));
}

#[test]
fn all_methods_share_the_initial_model() {
    let datasets = common::small_federation(6, 3, 3);
    let spec = ModelSpec::mlp(3, vec![4]);
    let fedavg = common::fed_config(&datasets, spec.clone(), StrategyConfig::fedavg(), 2, 6);
    let prox = common::fed_config(&datasets, spec, StrategyConfig::fedprox(0.1), 2, 6);
    let init = fedavg.initial_model().unwrap().checksum();
    assert_eq!(
        run_federation(&fedavg, &datasets).unwrap().init_checksum,
        init
    );
    assert_eq!(
        run_federation(&prox, &datasets).unwrap().init_checksum,
        init
    );
    assert_eq!(
        run_centralized(&fedavg, &datasets).unwrap().init_checksum,
        init
    );
    for r in run_local_baselines(&fedavg, &datasets).unwrap().values() {
        assert_eq!(r.init_checksum, init);
    }
}

#[test]
fn centralized_on_one_client_matches_its_local_baseline() {
    let datasets = common::small_federation(2, 3, 3);
    let mut cfg = common::fed_config(
        &datasets,
        ModelSpec::logistic(3),
        StrategyConfig::fedavg(),
        4,
        2,
    );
    cfg.clients.truncate(1);
    let central = run_centralized(&cfg, &datasets).unwrap();
    let local = run_local_baselines(&cfg, &datasets).unwrap();
    let only = local.values().next().unwrap();
    assert_eq!(central.best_model, only.best_model);
    assert_eq!(central.history, only.history);
}

#[test]
fn unknown_client_is_rejected() {
    let datasets = common::small_federation(2, 2, 3);
    let mut cfg = common::fed_config(
        &datasets,
        ModelSpec::logistic(3),
        StrategyConfig::fedavg(),
        1,
        2,
    );
    cfg.clients.push("nowhere".into());
    assert!(run_federation(&cfg, &datasets).is_err());
}
