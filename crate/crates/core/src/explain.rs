//! Relation importance from decoder attention.
//!
//! Per-patient attention matrices are symmetrized, averaged within each
//! outcome class over a shared vocabulary index space (absent entries count
//! as zero), and differenced: `W = mean(cases) - mean(controls)`. Positive
//! entries of `W` mark code pairs whose attention is stronger among cases.

use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cohort::CohortSample;
use crate::gnn::train::{extract_adjacency_nodes, AdjacencySource};
use crate::gnn::{build_graph, ModelParams, Vocabulary};
use crate::{exec, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationKind {
    PerPatient,
    Symmetrized,
    GroupMeanPositive,
    GroupMeanNegative,
    WeightDifference,
}

/// Square matrix indexed by vocabulary position.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationMatrix {
    pub values: Array2<f64>,
    pub kind: RelationKind,
}

impl RelationMatrix {
    pub fn new(values: Array2<f64>, kind: RelationKind) -> Self {
        assert!(values.is_square(), "relation matrices are square");
        RelationMatrix { values, kind }
    }

    pub fn size(&self) -> usize {
        self.values.nrows()
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        if self.size() == vocab.len() {
            Ok(())
        } else {
            Err(Error::VocabularyMismatch(format!(
                "matrix is {0}x{0} but the vocabulary has {1} groups",
                self.size(),
                vocab.len()
            )))
        }
    }
}

fn symmetrize_in_place(m: &mut Array2<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[[i, j]] + m[[j, i]]);
            m[[i, j]] = v;
            m[[j, i]] = v;
        }
    }
}

/// `(A + A^T) / 2`. The sum is commutative, so the result is exactly
/// symmetric and a symmetric input comes back unchanged.
pub fn symmetrize(a: &RelationMatrix) -> RelationMatrix {
    let mut values = a.values.clone();
    symmetrize_in_place(&mut values);
    RelationMatrix::new(values, RelationKind::Symmetrized)
}

/// How a group sum is turned into a mean.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanNormalization {
    /// Divide by the number of matrices in the group.
    #[default]
    GroupSize,
    /// Divide each entry by the number of matrices with a non-zero value there.
    Support,
}

/// Elementwise mean, summed in list order.
pub fn group_mean(matrices: &[RelationMatrix], kind: RelationKind, norm: MeanNormalization) -> Result<RelationMatrix> {
    let first = matrices.first().ok_or(Error::EmptyGroup)?;
    let n = first.size();
    let mut sum = Array2::<f64>::zeros((n, n));
    let mut support = Array2::<f64>::zeros((n, n));
    for m in matrices {
        if m.size() != n {
            return Err(Error::VocabularyMismatch(format!("group mixes {n}x{n} and {0}x{0} matrices", m.size())));
        }
        sum += &m.values;
        if norm == MeanNormalization::Support {
            support.zip_mut_with(&m.values, |s, &x| *s += (x != 0.0) as u8 as f64);
        }
    }
    finish_mean(sum, &support, matrices.len(), kind, norm)
}

fn finish_mean(mut sum: Array2<f64>, support: &Array2<f64>, count: usize, kind: RelationKind, norm: MeanNormalization) -> Result<RelationMatrix> {
    match norm {
        MeanNormalization::GroupSize => sum.mapv_inplace(|x| x / count as f64),
        MeanNormalization::Support => sum.zip_mut_with(support, |x, &s| {
            if s > 0.0 {
                *x /= s
            }
        }),
    }
    Ok(RelationMatrix::new(sum, kind))
}

/// `positive - negative`.
pub fn weight_difference(positive: &RelationMatrix, negative: &RelationMatrix) -> Result<RelationMatrix> {
    if positive.size() != negative.size() {
        return Err(Error::VocabularyMismatch(format!(
            "cannot subtract a {0}x{0} matrix from a {1}x{1} matrix",
            negative.size(),
            positive.size()
        )));
    }
    Ok(RelationMatrix::new(&positive.values - &negative.values, RelationKind::WeightDifference))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    pub fn as_str(self) -> &'static str {
        match self {
            Sign::Positive => "positive",
            Sign::Negative => "negative",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRelation {
    pub sign: Sign,
    pub rank: usize,
    pub group_a: String,
    pub group_b: String,
    pub group_a_label: String,
    pub group_b_label: String,
    pub weight: f64,
}

/// The `k` strongest pairs of one sign from the upper triangle (`i < j`,
/// or `i <= j` with `include_diagonal`). Zero entries never rank. Ties on
/// weight fall back to the lexicographic order of `(label_a, label_b)`,
/// where `label_a <= label_b`.
pub fn top_relations(w: &RelationMatrix, vocab: &Vocabulary, k: usize, sign: Sign, include_diagonal: bool) -> Result<Vec<RankedRelation>> {
    w.check_vocab(vocab)?;
    let n = w.size();
    let mut cands = Vec::new();
    for i in 0..n {
        let start = if include_diagonal { i } else { i + 1 };
        for j in start..n {
            let x = w.values[[i, j]];
            let keep = match sign {
                Sign::Positive => x > 0.0,
                Sign::Negative => x < 0.0,
            };
            if keep {
                let (a, b) = if vocab.label(i) <= vocab.label(j) { (i, j) } else { (j, i) };
                cands.push((x, a, b));
            }
        }
    }
    cands.sort_by(|p, q| {
        let by_weight = match sign {
            Sign::Positive => q.0.total_cmp(&p.0),
            Sign::Negative => p.0.total_cmp(&q.0),
        };
        by_weight.then_with(|| (vocab.label(p.1), vocab.label(p.2)).cmp(&(vocab.label(q.1), vocab.label(q.2))))
    });
    if cands.len() < k {
        log::warn!("requested {k} {} relations but only {} are non-zero", sign.as_str(), cands.len());
    }
    Ok(cands
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(r, (x, a, b))| RankedRelation {
            sign,
            rank: r + 1,
            group_a: vocab.group(a).to_string(),
            group_b: vocab.group(b).to_string(),
            group_a_label: vocab.label(a).to_string(),
            group_b_label: vocab.label(b).to_string(),
            weight: x,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub top_k: usize,
    pub source: AdjacencySource,
    pub normalization: MeanNormalization,
    pub include_diagonal: bool,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            top_k: 5,
            source: AdjacencySource::Decoder,
            normalization: MeanNormalization::GroupSize,
            include_diagonal: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationReport {
    pub mean_positive: RelationMatrix,
    pub mean_negative: RelationMatrix,
    pub weights: RelationMatrix,
    pub top_positive: Vec<RankedRelation>,
    pub top_negative: Vec<RankedRelation>,
    pub n_cases: usize,
    pub n_controls: usize,
}

impl ExplanationReport {
    pub fn rows(&self) -> impl Iterator<Item = &RankedRelation> {
        self.top_positive.iter().chain(&self.top_negative)
    }
}

/// Symmetrized patient adjacency in compact form: node indices plus the
/// local `n x n` block.
fn patient_block(params: &ModelParams, sample: &CohortSample, vocab: &Vocabulary, source: AdjacencySource) -> Result<Option<(Vec<usize>, Array2<f64>)>> {
    let graph = match build_graph(sample, vocab) {
        Ok(g) => g,
        Err(Error::EmptyGraph(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let full = extract_adjacency_nodes(params, &graph.node_code_indices, source)?;
    let idx = &graph.node_code_indices;
    let mut block = Array2::from_shape_fn((idx.len(), idx.len()), |(a, b)| full.values[[idx[a], idx[b]]]);
    symmetrize_in_place(&mut block);
    Ok(Some((graph.node_code_indices, block)))
}

/// Runs extraction, symmetrization, class means, difference and ranking
/// over `samples`. Extraction runs per patient in parallel; accumulation is
/// in sample order, which equals the dense [`group_mean`] over the same
/// matrices.
pub fn explain_cohort(params: &ModelParams, samples: &[CohortSample], vocab: &Vocabulary, cfg: &ExplainConfig) -> Result<ExplanationReport> {
    if params.vocab_size() != vocab.len() {
        return Err(Error::VocabularyMismatch(format!(
            "model has {} embedding rows but the vocabulary has {} groups",
            params.vocab_size(),
            vocab.len()
        )));
    }
    let blocks = exec::map(samples, |s| patient_block(params, s, vocab, cfg.source));
    let v = vocab.len();
    let mut sums = [Array2::<f64>::zeros((v, v)), Array2::zeros((v, v))];
    let mut support = [Array2::<f64>::zeros((v, v)), Array2::zeros((v, v))];
    let mut counts = [0usize; 2];
    for (s, block) in samples.iter().zip(blocks) {
        let Some((idx, local)) = block? else {
            log::warn!("{} has no in-vocabulary codes; left out of the relation means", s.patient_id);
            continue;
        };
        let c = s.label as usize;
        counts[c] += 1;
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                sums[c][[i, j]] += local[[a, b]];
                if local[[a, b]] != 0.0 {
                    support[c][[i, j]] += 1.0;
                }
            }
        }
    }
    if counts[0] == 0 || counts[1] == 0 {
        return Err(Error::EmptyGroup);
    }
    let [sum_neg, sum_pos] = sums;
    let mean_positive = finish_mean(sum_pos, &support[1], counts[1], RelationKind::GroupMeanPositive, cfg.normalization)?;
    let mean_negative = finish_mean(sum_neg, &support[0], counts[0], RelationKind::GroupMeanNegative, cfg.normalization)?;
    let weights = weight_difference(&mean_positive, &mean_negative)?;
    let top_positive = top_relations(&weights, vocab, cfg.top_k, Sign::Positive, cfg.include_diagonal)?;
    let top_negative = top_relations(&weights, vocab, cfg.top_k, Sign::Negative, cfg.include_diagonal)?;
    Ok(ExplanationReport {
        mean_positive,
        mean_negative,
        weights,
        top_positive,
        top_negative,
        n_cases: counts[1],
        n_controls: counts[0],
    })
}

pub const RELATIONS_HEADER: [&str; 5] = ["sign", "rank", "group_a_label", "group_b_label", "weight"];

pub fn write_relations<W: Write>(dst: W, rows: impl IntoIterator<Item = impl std::borrow::Borrow<RankedRelation>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(dst);
    w.write_record(RELATIONS_HEADER)?;
    for r in rows {
        let r = r.borrow();
        w.write_record([
            r.sign.as_str().to_string(),
            r.rank.to_string(),
            r.group_a_label.clone(),
            r.group_b_label.clone(),
            format!("{:.9}", r.weight),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `(sign, rank, label_a, label_b, weight)` rows of a relations file.
pub fn read_relations<R: std::io::Read>(src: R) -> Result<Vec<(String, usize, String, String, f64)>> {
    let mut rdr = csv::Reader::from_reader(src);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let bad = |e: &dyn std::fmt::Display| Error::InvalidData(format!("relations file: {e}"));
        out.push((
            rec[0].to_string(),
            rec[1].parse().map_err(|e| bad(&e))?,
            rec[2].to_string(),
            rec[3].to_string(),
            rec[4].parse().map_err(|e| bad(&e))?,
        ));
    }
    Ok(out)
}

pub const TRIPLETS_HEADER: [&str; 3] = ["i", "j", "weight"];

/// Non-zero entries as `i,j,weight` triplets in row-major order.
pub fn write_triplets<W: Write>(dst: W, m: &RelationMatrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(dst);
    w.write_record(TRIPLETS_HEADER)?;
    for ((i, j), &x) in m.values.indexed_iter() {
        if x != 0.0 {
            w.write_record([i.to_string(), j.to_string(), format!("{x:e}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_triplets<R: std::io::Read>(src: R, size: usize, kind: RelationKind) -> Result<RelationMatrix> {
    let mut rdr = csv::Reader::from_reader(src);
    let mut values = Array2::zeros((size, size));
    for rec in rdr.records() {
        let rec = rec?;
        let bad = |e: &dyn std::fmt::Display| Error::InvalidData(format!("triplet file: {e}"));
        let i: usize = rec[0].parse().map_err(|e| bad(&e))?;
        let j: usize = rec[1].parse().map_err(|e| bad(&e))?;
        if i >= size || j >= size {
            return Err(Error::VocabularyMismatch(format!("index ({i},{j}) outside a {size}x{size} matrix")));
        }
        values[[i, j]] = rec[2].parse().map_err(|e| bad(&e))?;
    }
    Ok(RelationMatrix::new(values, kind))
}

pub const VOCAB_SIDECAR_HEADER: [&str; 3] = ["index", "group", "label"];

pub fn write_vocab_sidecar<W: Write>(dst: W, vocab: &Vocabulary) -> Result<()> {
    let mut w = csv::Writer::from_writer(dst);
    w.write_record(VOCAB_SIDECAR_HEADER)?;
    for i in 0..vocab.len() {
        w.write_record([i.to_string(), vocab.group(i).to_string(), vocab.label(i).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn rm(a: Array2<f64>) -> RelationMatrix {
        RelationMatrix::new(a, RelationKind::PerPatient)
    }

    fn vocab(n: usize) -> Vocabulary {
        Vocabulary::new((0..n).map(|i| format!("C{i}")), &BTreeMap::new())
    }

    #[test]
    fn symmetrize_examples() {
        let s = symmetrize(&rm(arr2(&[[0.0, 1.0], [0.0, 0.0]])));
        assert_eq!(s.values, arr2(&[[0.0, 0.5], [0.5, 0.0]]));
        let m = arr2(&[[0.3, 0.1], [0.1, 0.7]]);
        assert_eq!(symmetrize(&rm(m.clone())).values, m);
    }

    #[test]
    fn mean_and_difference_examples() {
        let a = rm(arr2(&[[0.0, 1.0], [1.0, 0.0]]));
        let z = rm(Array2::zeros((2, 2)));
        let m = group_mean(&[a.clone(), z], RelationKind::GroupMeanPositive, MeanNormalization::GroupSize).unwrap();
        assert_eq!(m.values, arr2(&[[0.0, 0.5], [0.5, 0.0]]));
        let same = group_mean(&[a.clone(), a.clone(), a.clone()], RelationKind::GroupMeanPositive, MeanNormalization::GroupSize).unwrap();
        assert_eq!(same.values, a.values);
        assert!(matches!(
            group_mean(&[], RelationKind::GroupMeanPositive, MeanNormalization::GroupSize),
            Err(Error::EmptyGroup)
        ));
        let support = group_mean(&[a.clone(), rm(Array2::zeros((2, 2)))], RelationKind::GroupMeanPositive, MeanNormalization::Support).unwrap();
        assert_eq!(support.values, a.values);

        let p = rm(arr2(&[[0.0, 0.4], [0.4, 0.0]]));
        let n = rm(arr2(&[[0.0, 0.1], [0.1, 0.0]]));
        let w = weight_difference(&p, &n).unwrap();
        assert!((w.values[[0, 1]] - 0.3).abs() < 1e-15 && w.values[[0, 0]] == 0.0);
        assert_eq!(weight_difference(&n, &p).unwrap().values, -&w.values);
        assert!(weight_difference(&p, &p).unwrap().values.iter().all(|&x| x == 0.0));
        assert!(weight_difference(&p, &rm(Array2::zeros((3, 3)))).is_err());
    }

    #[test]
    fn ranking_examples() {
        let v = vocab(3);
        let mut w = Array2::zeros((3, 3));
        w[[1, 2]] = 0.2;
        w[[2, 1]] = 0.2;
        let w = RelationMatrix::new(w, RelationKind::WeightDifference);
        let top = top_relations(&w, &v, 5, Sign::Positive, false).unwrap();
        assert_eq!(top.len(), 1);
        assert_eq!((top[0].group_a.as_str(), top[0].group_b.as_str(), top[0].rank), ("C1", "C2", 1));
        assert!(top_relations(&w, &v, 5, Sign::Negative, false).unwrap().is_empty());

        let zero = RelationMatrix::new(Array2::zeros((3, 3)), RelationKind::WeightDifference);
        assert!(top_relations(&zero, &v, 5, Sign::Positive, false).unwrap().is_empty());
    }

    #[test]
    fn ranking_order_and_ties() {
        let v = vocab(4);
        let mut w = Array2::zeros((4, 4));
        for &(i, j, x) in &[(0, 1, 0.3), (0, 2, 0.3), (1, 3, 0.5), (2, 3, -0.4), (0, 3, -0.1)] {
            w[[i, j]] = x;
            w[[j, i]] = x;
        }
        w[[2, 2]] = 0.9;
        let w = RelationMatrix::new(w, RelationKind::WeightDifference);
        let pos = top_relations(&w, &v, 5, Sign::Positive, false).unwrap();
        let pairs: Vec<_> = pos.iter().map(|r| (r.group_a.as_str(), r.group_b.as_str())).collect();
        assert_eq!(pairs, [("C1", "C3"), ("C0", "C1"), ("C0", "C2")]);
        let neg = top_relations(&w, &v, 1, Sign::Negative, false).unwrap();
        assert_eq!((neg[0].group_a.as_str(), neg[0].weight), ("C2", -0.4));
        let diag = top_relations(&w, &v, 1, Sign::Positive, true).unwrap();
        assert_eq!((diag[0].group_a.as_str(), diag[0].group_b.as_str()), ("C2", "C2"));
    }

    #[test]
    fn triplet_round_trip() {
        let mut m = Array2::zeros((3, 3));
        m[[0, 2]] = -0.123456789;
        m[[1, 1]] = 0.5;
        let m = RelationMatrix::new(m, RelationKind::WeightDifference);
        let mut buf = Vec::new();
        write_triplets(&mut buf, &m).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap().lines().count(), 3);
        let back = read_triplets(&buf[..], 3, RelationKind::WeightDifference).unwrap();
        assert_eq!(back, m);
    }

    fn square(n: usize) -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| Array2::from_shape_vec((n, n), v).unwrap())
    }

    proptest! {
        #[test]
        fn symmetrize_is_idempotent_and_matches_elementwise(a in square(5)) {
            let s = symmetrize(&rm(a.clone()));
            prop_assert_eq!(&symmetrize(&s).values, &s.values);
            for i in 0..5 {
                for j in 0..5 {
                    prop_assert_eq!(s.values[[i, j]], 0.5 * (a[[i, j]] + a[[j, i]]));
                }
            }
        }

        #[test]
        fn group_mean_is_linear(mats in proptest::collection::vec(square(4), 1..8), c in -3.0f64..3.0) {
            let base: Vec<_> = mats.iter().cloned().map(rm).collect();
            let scaled: Vec<_> = mats.iter().map(|m| rm(m * c)).collect();
            let a = group_mean(&base, RelationKind::GroupMeanPositive, MeanNormalization::GroupSize).unwrap();
            let b = group_mean(&scaled, RelationKind::GroupMeanPositive, MeanNormalization::GroupSize).unwrap();
            for (x, y) in a.values.iter().zip(b.values.iter()) {
                prop_assert!((c * x - y).abs() <= 1e-12);
            }
        }
    }
}
