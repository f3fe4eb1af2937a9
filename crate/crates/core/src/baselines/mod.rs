//! Flat-feature tree ensembles: a bagged Gini forest and gradient-boosted
//! trees on the logistic loss.
//!
//! Features are per-group counts over the feature window, then standardized
//! age at index, then the gender indicator. Training rows are put in a
//! canonical order first, so a fitted model does not depend on the order in
//! which samples were supplied.

pub mod tree;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cohort::CohortSample;
use crate::gnn::Vocabulary;
use crate::matching::sigmoid;
use crate::{exec, seed, Error, Result};
use tree::{grow, Columns, Criterion, GrowParams, Stats, Tree};

const MODEL_FORMAT: &str = "claimgraph-trees/1";

/// Maps samples to `V + 2` real features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpace {
    pub vocab: Vocabulary,
    pub age_mean: f64,
    pub age_sd: f64,
}

impl FeatureSpace {
    /// Age standardization uses the population SD of `samples` (1 if zero).
    pub fn fit(samples: &[CohortSample], vocab: &Vocabulary) -> Self {
        let n = samples.len().max(1) as f64;
        let mean = samples.iter().map(|s| s.age_at_index as f64).sum::<f64>() / n;
        let var = samples.iter().map(|s| (s.age_at_index as f64 - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        FeatureSpace {
            vocab: vocab.clone(),
            age_mean: mean,
            age_sd: sd,
        }
    }

    pub fn n_features(&self) -> usize {
        self.vocab.len() + 2
    }

    pub fn vectorize(&self, sample: &CohortSample) -> Vec<f64> {
        let v = self.vocab.len();
        let mut x = vec![0.0; v + 2];
        for (g, &c) in &sample.grouped_codes {
            if let Some(i) = self.vocab.index_of(g) {
                x[i] = c as f64;
            }
        }
        x[v] = (sample.age_at_index as f64 - self.age_mean) / self.age_sd;
        x[v + 1] = sample.gender.indicator();
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleKind {
    Forest,
    Boosted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeEnsembleConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Features considered per split; defaults to `floor(sqrt(F))` for the
    /// forest and all features for boosting.
    pub features_per_split: Option<usize>,
    /// Shrinkage per boosting round.
    pub learning_rate: f64,
    /// L2 penalty on boosted leaf values.
    pub lambda: f64,
    /// Bootstrap rows per forest tree.
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for TreeEnsembleConfig {
    fn default() -> Self {
        TreeEnsembleConfig {
            n_trees: 200,
            max_depth: 6,
            min_samples_leaf: 1,
            features_per_split: None,
            learning_rate: 0.1,
            lambda: 1.0,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl TreeEnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.min_samples_leaf == 0 {
            problems.push("min_samples_leaf must be positive");
        }
        if self.features_per_split == Some(0) {
            problems.push("features_per_split must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            problems.push("learning_rate must lie in (0, 1]");
        }
        if !(self.lambda >= 0.0) {
            problems.push("lambda must be non-negative");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub kind: EnsembleKind,
    pub n_features: usize,
    /// Forest: base rate. Boosted: prior log-odds.
    pub prior: f64,
    pub learning_rate: f64,
    /// Set when training saw a single class; overrides the trees.
    pub constant: Option<f64>,
    pub trees: Vec<Tree>,
}

impl TreeEnsemble {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        if let Some(c) = self.constant {
            return c;
        }
        match self.kind {
            EnsembleKind::Forest => {
                if self.trees.is_empty() {
                    self.prior
                } else {
                    self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
                }
            }
            EnsembleKind::Boosted => sigmoid(self.raw_score(x)),
        }
    }

    /// Boosted margin `prior + lr * sum(tree outputs)`.
    pub fn raw_score(&self, x: &[f64]) -> f64 {
        self.prior + self.learning_rate * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }
}

/// Sorts rows lexicographically by features then label.
fn canonical_order(rows: &[Vec<f64>], labels: &[u8]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&p, &q| {
        rows[p]
            .iter()
            .zip(&rows[q])
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(labels[p].cmp(&labels[q]))
    });
    order
}

fn prepare(rows: &[Vec<f64>], labels: &[u8]) -> Result<(Vec<Vec<f64>>, Vec<u8>, usize)> {
    if rows.len() != labels.len() {
        return Err(Error::InvalidData(format!("{} rows but {} labels", rows.len(), labels.len())));
    }
    if rows.is_empty() {
        return Err(Error::DegenerateCohort("no training rows".into()));
    }
    let f = rows[0].len();
    if rows.iter().any(|r| r.len() != f || r.iter().any(|x| !x.is_finite())) {
        return Err(Error::InvalidData("feature rows must be finite and of equal length".into()));
    }
    let order = canonical_order(rows, labels);
    Ok((
        order.iter().map(|&i| rows[i].clone()).collect(),
        order.iter().map(|&i| labels[i]).collect(),
        f,
    ))
}

fn single_class(kind: EnsembleKind, labels: &[u8], f: usize, cfg: &TreeEnsembleConfig) -> Option<TreeEnsemble> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if pos != 0 && pos != labels.len() {
        return None;
    }
    let c = if pos == 0 { 0.0 } else { 1.0 };
    log::warn!("training rows contain a single class; fitting the constant predictor {c}");
    Some(TreeEnsemble {
        kind,
        n_features: f,
        prior: c,
        learning_rate: cfg.learning_rate,
        constant: Some(c),
        trees: Vec::new(),
    })
}

/// Bagged CART trees with Gini splits; probability is the mean leaf class
/// frequency. Tree `t` draws its bootstrap and feature subsets from the
/// stream keyed `tree/{t}`, and trees are grown in parallel.
pub fn train_forest(rows: &[Vec<f64>], labels: &[u8], cfg: &TreeEnsembleConfig) -> Result<TreeEnsemble> {
    cfg.validate()?;
    let (rows, labels, f) = prepare(rows, labels)?;
    if let Some(m) = single_class(EnsembleKind::Forest, &labels, f, cfg) {
        return Ok(m);
    }
    let n = rows.len();
    let base_rate = labels.iter().filter(|&&y| y == 1).count() as f64 / n as f64;
    let cols = Columns::new(&rows, f);
    let params = GrowParams {
        criterion: Criterion::Gini,
        max_depth: cfg.max_depth,
        min_samples_leaf: cfg.min_samples_leaf,
        features_per_split: Some(cfg.features_per_split.unwrap_or(((f as f64).sqrt().floor() as usize).max(1))),
        parallel_features: false,
    };
    let trees = exec::map_range(cfg.n_trees, |t| {
        let mut rng = seed::rng_for(cfg.seed, &format!("tree/{t}"));
        let mut weight = vec![if cfg.bootstrap { 0.0 } else { 1.0 }; n];
        if cfg.bootstrap {
            use rand::Rng;
            for _ in 0..n {
                weight[rng.random_range(0..n)] += 1.0;
            }
        }
        let stats: Vec<Stats> = weight
            .iter()
            .zip(&labels)
            .map(|(&w, &y)| Stats {
                count: w,
                a: w,
                b: w * y as f64,
            })
            .collect();
        grow(&cols, &stats, &params, &mut rng)
    });
    Ok(TreeEnsemble {
        kind: EnsembleKind::Forest,
        n_features: f,
        prior: base_rate,
        learning_rate: cfg.learning_rate,
        constant: None,
        trees,
    })
}

/// Stagewise regression trees on logistic-loss gradients with second-order
/// leaf values `-G / (H + lambda)`. Rounds are sequential; split search
/// within a round is parallel across features.
pub fn train_boosted(rows: &[Vec<f64>], labels: &[u8], cfg: &TreeEnsembleConfig) -> Result<TreeEnsemble> {
    cfg.validate()?;
    let (rows, labels, f) = prepare(rows, labels)?;
    if let Some(m) = single_class(EnsembleKind::Boosted, &labels, f, cfg) {
        return Ok(m);
    }
    let n = rows.len();
    let base_rate = labels.iter().filter(|&&y| y == 1).count() as f64 / n as f64;
    let prior = (base_rate / (1.0 - base_rate)).ln();
    let cols = Columns::new(&rows, f);
    let params = GrowParams {
        criterion: Criterion::SecondOrder { lambda: cfg.lambda },
        max_depth: cfg.max_depth,
        min_samples_leaf: cfg.min_samples_leaf,
        features_per_split: cfg.features_per_split,
        parallel_features: true,
    };
    let mut margin = vec![prior; n];
    let mut trees = Vec::with_capacity(cfg.n_trees);
    for t in 0..cfg.n_trees {
        let stats: Vec<Stats> = margin
            .iter()
            .zip(&labels)
            .map(|(&m, &y)| {
                let p = sigmoid(m);
                Stats {
                    count: 1.0,
                    a: p * (1.0 - p),
                    b: p - y as f64,
                }
            })
            .collect();
        let mut rng = seed::rng_for(cfg.seed, &format!("round/{t}"));
        let tree = grow(&cols, &stats, &params, &mut rng);
        for (m, r) in margin.iter_mut().zip(&rows) {
            *m += cfg.learning_rate * tree.predict(r);
        }
        trees.push(tree);
    }
    Ok(TreeEnsemble {
        kind: EnsembleKind::Boosted,
        n_features: f,
        prior,
        learning_rate: cfg.learning_rate,
        constant: None,
        trees,
    })
}

/// A fitted ensemble with the feature space it expects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub format: String,
    pub features: FeatureSpace,
    pub config: TreeEnsembleConfig,
    pub ensemble: TreeEnsemble,
}

impl BaselineModel {
    pub fn fit(kind: EnsembleKind, samples: &[CohortSample], vocab: &Vocabulary, cfg: &TreeEnsembleConfig) -> Result<Self> {
        let features = FeatureSpace::fit(samples, vocab);
        let rows: Vec<Vec<f64>> = exec::map(samples, |s| features.vectorize(s));
        let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
        let ensemble = match kind {
            EnsembleKind::Forest => train_forest(&rows, &labels, cfg)?,
            EnsembleKind::Boosted => train_boosted(&rows, &labels, cfg)?,
        };
        Ok(BaselineModel {
            format: MODEL_FORMAT.into(),
            features,
            config: cfg.clone(),
            ensemble,
        })
    }

    pub fn predict(&self, samples: &[CohortSample]) -> Vec<f64> {
        exec::map(samples, |s| self.ensemble.predict_row(&self.features.vectorize(s)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: BaselineModel = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.format != MODEL_FORMAT {
            return Err(Error::InvalidData(format!("unsupported model format '{}'", m.format)));
        }
        if m.ensemble.n_features != m.features.n_features() {
            return Err(Error::ShapeMismatch {
                name: "features".into(),
                expected: vec![m.features.n_features()],
                found: vec![m.ensemble.n_features],
            });
        }
        Ok(m)
    }
}
