//! Results must not depend on whether the data-parallel path is active.
//! Kept in its own test binary because the toggle is process-wide.

use std::collections::BTreeMap;

use claimgraph::baselines::{BaselineModel, EnsembleKind, TreeEnsembleConfig};
use claimgraph::cohort::{build_cohort, ScenarioConfig};
use claimgraph::datagen::{generate, GeneratorConfig};
use claimgraph::domain::{ingest, CaseDefinition};
use claimgraph::exec;
use claimgraph::explain::{explain_cohort, ExplainConfig};
use claimgraph::gnn::{self, TrainConfig, Vocabulary};

fn run() -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let gen = GeneratorConfig {
        n_patients: 400,
        ..Default::default()
    };
    let (raw, _) = generate(&gen).unwrap();
    let (timelines, _) = ingest(raw, &gen.code_map());
    let cohort = build_cohort(&timelines, &CaseDefinition::bundled_default(), &ScenarioConfig::new(1, 2));
    let vocab = Vocabulary::from_samples(&cohort.samples, &BTreeMap::new());
    let cfg = TrainConfig {
        epochs: 2,
        learning_rate: 0.01,
        batch_size: 16,
        ..Default::default()
    };
    let (model, _) = gnn::train(&cohort.samples, &vocab, &cfg).unwrap();
    let trees = TreeEnsembleConfig {
        n_trees: 10,
        ..Default::default()
    };
    let forest = BaselineModel::fit(EnsembleKind::Forest, &cohort.samples, &vocab, &trees).unwrap();
    let boosted = BaselineModel::fit(EnsembleKind::Boosted, &cohort.samples, &vocab, &trees).unwrap();
    let report = explain_cohort(&model.params, &cohort.samples, &vocab, &ExplainConfig::default()).unwrap();
    let mut trees_out = forest.predict(&cohort.samples);
    trees_out.extend(boosted.predict(&cohort.samples));
    (model.predict(&cohort.samples).unwrap(), trees_out, report.weights.values.iter().copied().collect())
}

#[test]
fn parallel_and_sequential_paths_agree_bitwise() {
    exec::set_parallel(true);
    let par = run();
    exec::set_parallel(false);
    let seq = run();
    exec::set_parallel(true);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&par.0), bits(&seq.0));
    assert_eq!(bits(&par.1), bits(&seq.1));
    assert_eq!(bits(&par.2), bits(&seq.2));
}
