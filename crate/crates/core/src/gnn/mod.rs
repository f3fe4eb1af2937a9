//! Variationally regularized encoder-decoder graph attention model.
//!
//! Every patient becomes a complete graph (with self-loops) over the unique
//! code groups in its feature window. The stack is:
//!
//! 1. node states start as rows of a learned embedding table;
//! 2. `L` single-head attention layers: `e_ij = LeakyReLU_0.2(a . [W h_i || W h_j])`,
//!    `alpha = softmax_j(e)`, `h'_i = ELU(sum_j alpha_ij W h_j)`, with dropout on `h'` in training;
//! 3. a variational layer `mu = W_mu h`, `logvar = W_logvar h`, `z = mu + exp(logvar / 2) * eps`
//!    (`z = mu` at inference) with KL to the standard normal averaged over nodes;
//! 4. a decoder attention layer over `z` whose attention matrix is the exported adjacency;
//! 5. mean pooling, then `sigmoid(w_out . u_bar + b)`.
//!
//! Gradients are hand-derived reverse mode (see [`backward`]) and checked
//! against central finite differences in tests.

pub mod backward;
pub mod forward;
pub mod params;
pub mod train;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::cohort::CohortSample;
use crate::{Error, Result};

pub use backward::{batch_gradients, sample_gradient};
pub use forward::{forward, forward_nodes, ForwardOutput, Mode, Noise};
pub use params::ModelParams;
pub use train::{extract_adjacency, train, AdjacencySource, EpochRecord, Vgnn};

/// Ordered code-group vocabulary shared by the model, baselines and explanations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabularyFile", into = "VocabularyFile")]
pub struct Vocabulary {
    groups: Vec<String>,
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    groups: Vec<String>,
    labels: Vec<String>,
}

impl From<VocabularyFile> for Vocabulary {
    fn from(f: VocabularyFile) -> Self {
        Vocabulary::with_labels(f.groups, f.labels)
    }
}

impl From<Vocabulary> for VocabularyFile {
    fn from(v: Vocabulary) -> Self {
        VocabularyFile {
            groups: v.groups,
            labels: v.labels,
        }
    }
}

impl Vocabulary {
    fn with_labels(groups: Vec<String>, labels: Vec<String>) -> Self {
        let index = groups.iter().enumerate().map(|(i, g)| (g.clone(), i)).collect();
        Vocabulary { groups, labels, index }
    }

    /// Sorted, de-duplicated groups; labels looked up in `labels`, defaulting to the group id.
    pub fn new<I, S>(groups: I, labels: &std::collections::BTreeMap<String, String>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut g: Vec<String> = groups.into_iter().map(Into::into).collect();
        g.sort();
        g.dedup();
        let l = g.iter().map(|x| labels.get(x).cloned().unwrap_or_else(|| x.clone())).collect();
        Vocabulary::with_labels(g, l)
    }

    /// Every group that occurs in at least one sample.
    pub fn from_samples(samples: &[CohortSample], labels: &std::collections::BTreeMap<String, String>) -> Self {
        Vocabulary::new(samples.iter().flat_map(|s| s.grouped_codes.keys().cloned()), labels)
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn index_of(&self, group: &str) -> Option<usize> {
        self.index.get(group).copied()
    }

    pub fn group(&self, i: usize) -> &str {
        &self.groups[i]
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }
}

/// Node set of one patient: sorted unique vocabulary indices with counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientGraph {
    pub node_code_indices: Vec<usize>,
    /// Occurrence counts parallel to `node_code_indices`; stored, not used as features.
    pub counts: Vec<u32>,
    /// Codes whose group is outside the vocabulary.
    pub out_of_vocab: u32,
}

impl PatientGraph {
    pub fn len(&self) -> usize {
        self.node_code_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_code_indices.is_empty()
    }
}

pub fn build_graph(sample: &CohortSample, vocab: &Vocabulary) -> Result<PatientGraph> {
    let mut nodes: Vec<(usize, u32)> = Vec::with_capacity(sample.grouped_codes.len());
    let mut out_of_vocab = 0;
    for (g, &c) in &sample.grouped_codes {
        match vocab.index_of(g) {
            Some(i) => nodes.push((i, c)),
            None => out_of_vocab += c,
        }
    }
    if nodes.is_empty() {
        return Err(Error::EmptyGraph(sample.patient_id.clone()));
    }
    if out_of_vocab > 0 {
        log::debug!("{}: {out_of_vocab} codes outside the vocabulary", sample.patient_id);
    }
    nodes.sort_unstable();
    Ok(PatientGraph {
        node_code_indices: nodes.iter().map(|n| n.0).collect(),
        counts: nodes.iter().map(|n| n.1).collect(),
        out_of_vocab,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub layers: usize,
    pub heads: usize,
    /// Weight of the KL term in the loss.
    pub beta: f64,
    pub embed_dim: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Share of training samples held out for the per-epoch validation AUROC.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 128,
            dropout: 0.1,
            epochs: 200,
            layers: 2,
            heads: 1,
            beta: 0.002,
            embed_dim: 16,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.learning_rate > 0.0) {
            problems.push("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push("dropout must lie in [0, 1)");
        }
        if self.layers == 0 {
            problems.push("at least one encoder layer is required");
        }
        if self.heads != 1 {
            problems.push("only single-head attention is supported");
        }
        if !(self.beta >= 0.0) {
            problems.push("beta must be non-negative");
        }
        if !(0.0..0.5).contains(&self.validation_fraction) {
            problems.push("validation_fraction must lie in [0, 0.5)");
        }
        if !(self.adam_beta1 >= 0.0 && self.adam_beta1 < 1.0 && self.adam_beta2 >= 0.0 && self.adam_beta2 < 1.0) {
            problems.push("Adam decay rates must lie in [0, 1)");
        }
        if self.embed_dim < 2 {
            problems.push("embed_dim must be at least 2");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Gender;
    use chrono::NaiveDate;
    use std::collections::BTreeMap;

    fn sample(codes: &[(&str, u32)]) -> CohortSample {
        CohortSample {
            patient_id: "p".into(),
            index_date: NaiveDate::from_ymd_opt(2015, 1, 1).unwrap(),
            label: 0,
            age_at_index: 70,
            gender: Gender::F,
            grouped_codes: codes.iter().map(|(g, c)| (g.to_string(), *c)).collect(),
            qualifying_month_count: 2,
        }
    }

    #[test]
    fn graph_examples() {
        let vocab = Vocabulary::new(["C2", "C1", "C3"], &BTreeMap::new());
        assert_eq!(vocab.groups(), &["C1", "C2", "C3"]);
        let g = build_graph(&sample(&[("C1", 2), ("C2", 1)]), &vocab).unwrap();
        assert_eq!(g.node_code_indices, vec![0, 1]);
        assert_eq!(g.counts, vec![2, 1]);
        let single = build_graph(&sample(&[("C3", 4)]), &vocab).unwrap();
        assert_eq!(single.len(), 1);
        let partial = build_graph(&sample(&[("C3", 1), ("ZZ", 5)]), &vocab).unwrap();
        assert_eq!(partial.out_of_vocab, 5);
        assert!(matches!(build_graph(&sample(&[("ZZ", 1)]), &vocab), Err(Error::EmptyGraph(_))));
    }

    #[test]
    fn vocabulary_serde_keeps_order_and_index() {
        let labels: BTreeMap<_, _> = [("B".to_string(), "Bee".to_string())].into_iter().collect();
        let v = Vocabulary::new(["B", "A"], &labels);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.index_of("B"), Some(1));
        assert_eq!(back.label(1), "Bee");
        assert_eq!(back.label(0), "A");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            dropout: 1.0,
            heads: 2,
            ..Default::default()
        };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("dropout") && msg.contains("single-head"));
    }
}
