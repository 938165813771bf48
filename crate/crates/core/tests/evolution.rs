use std::collections::BTreeSet;
use std::path::PathBuf;

use saea_core::dataset::{self, Schema, SplitSpec};
use saea_core::evolution::{run, Evolution, EvolutionConfig, EvolutionError};
use saea_core::{Archive, Dataset, SurrogateKind};

fn iris_train() -> Dataset {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/raw");
    dataset::prepare(&dir, &Schema::builtin("iris").unwrap(), &SplitSpec::default())
        .unwrap()
        .train
}

fn quick() -> EvolutionConfig {
    EvolutionConfig {
        mu: 3,
        lambda: 8,
        k: 3,
        s: 25,
        generations: 3,
        init_size: 12,
        e_cheap: 2,
        e_full: 8,
        record_timings: false,
        ..EvolutionConfig::default()
    }
}

#[test]
fn initial_archive_has_iris_length_vectors() {
    let train = iris_train();
    let evo = Evolution::new(quick(), &train).unwrap();
    assert_eq!(evo.archive().len(), 12);
    assert_eq!(evo.archive().dim(), Some(336));
    assert_eq!(evo.parents().len(), 3);
    assert!(evo.parents().iter().all(|p| p.evaluated && p.true_fitness.is_some()));
}

#[test]
fn two_networks_are_enough_for_a_surrogate() {
    let train = iris_train();
    for kind in [SurrogateKind::Kpls, SurrogateKind::Kriging] {
        let cfg = EvolutionConfig {
            init_size: 2,
            generations: 0,
            surrogate: kind,
            ..quick()
        };
        let mut evo = Evolution::new(cfg, &train).unwrap();
        match evo.fit_initial() {
            Ok(()) => assert_eq!(evo.model().unwrap().n_samples(), 2),
            // PLS needs some covariance between phenotype and fitness.
            Err(e) => panic!("{kind}: {e}"),
        }
    }
}

#[test]
fn zero_generations_log_only_initialization() {
    let train = iris_train();
    let out = run(&EvolutionConfig { generations: 0, ..quick() }, &train);
    assert!(out.error.is_none());
    assert_eq!(out.log.generations.len(), 1);
    assert_eq!(out.log.generations[0].generation, 0);
    assert_eq!(out.log.to_csv().lines().count(), 2);
}

#[test]
fn archive_holds_only_truly_evaluated_individuals() {
    let train = iris_train();
    let cfg = quick();
    let mut evo = Evolution::new(cfg.clone(), &train).unwrap();
    evo.fit_initial().unwrap();
    let mut evaluated: BTreeSet<u64> = (0..cfg.init_size as u64).collect();
    let mut surrogate_only = BTreeSet::new();
    for g in 1..=cfg.generations {
        let offspring = evo.step().unwrap();
        assert_eq!(offspring.len(), cfg.lambda);
        for ind in &offspring {
            assert!(ind.surrogate_mean.is_some() && ind.phenotype.is_some());
            if ind.evaluated {
                assert!(ind.true_fitness.is_some());
                evaluated.insert(ind.id);
            } else {
                assert!(ind.true_fitness.is_none());
                surrogate_only.insert(ind.id);
            }
        }
        assert_eq!(evo.archive().len(), cfg.init_size + g * cfg.k);
        assert!(evo.parents().iter().all(|p| evaluated.contains(&p.id)));
    }
    let in_archive: BTreeSet<u64> = evo.archive().entries().iter().map(|e| e.id).collect();
    assert_eq!(in_archive, evaluated);
    assert!(in_archive.is_disjoint(&surrogate_only));
}

#[test]
fn promoted_offspring_have_the_best_predictions() {
    let train = iris_train();
    let mut evo = Evolution::new(quick(), &train).unwrap();
    evo.fit_initial().unwrap();
    let offspring = evo.step().unwrap();
    let worst_promoted = offspring
        .iter()
        .filter(|i| i.evaluated)
        .map(|i| i.surrogate_mean.unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    let best_skipped = offspring
        .iter()
        .filter(|i| !i.evaluated)
        .map(|i| i.surrogate_mean.unwrap())
        .fold(f64::INFINITY, f64::min);
    assert!(worst_promoted <= best_skipped);
}

#[test]
fn run_is_reproducible_and_elitist() {
    let train = iris_train();
    let a = run(&quick(), &train);
    let b = run(&quick(), &train);
    assert!(a.error.is_none());
    assert_eq!(a.log.to_json(), b.log.to_json());
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    assert_eq!(a.archive.to_text(), b.archive.to_text());
    assert_eq!(Archive::from_text(&a.archive.to_text()).unwrap(), a.archive);
    let best: Vec<f64> = a.log.generations.iter().map(|g| g.best_fitness).collect();
    assert!(best.windows(2).all(|w| w[1] <= w[0]), "{best:?}");
}

#[test]
fn zero_budget_aborts_with_the_archive_kept() {
    let train = iris_train();
    let cfg = EvolutionConfig {
        surrogate: SurrogateKind::Kriging,
        fit_budget_secs: Some(0.0),
        ..quick()
    };
    let out = run(&cfg, &train);
    assert!(matches!(out.error, Some(EvolutionError::Surrogate(_))));
    assert!(out.log.aborted.as_deref().unwrap().contains("budget"));
    assert_eq!(out.archive.len(), cfg.init_size);
    assert_eq!(out.log.generations.len(), 1);
}
