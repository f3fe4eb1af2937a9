use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::backward::batch_gradients;
use super::forward::{encoder_attention, forward_nodes, sigmoid, Noise};
use super::params::ModelParams;
use super::{build_graph, PatientGraph, TrainConfig, Vocabulary};
use crate::cohort::CohortSample;
use crate::explain::{RelationKind, RelationMatrix};
use crate::{eval, exec, seed, Error, Result};

const MODEL_FORMAT: &str = "claimgraph-vgnn/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_auroc: Option<f64>,
    pub seconds: f64,
}

pub const TRAINING_LOG_HEADER: [&str; 4] = ["epoch", "mean_loss", "val_auroc", "seconds"];

pub fn write_training_log<W: Write>(dst: W, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(dst);
    w.write_record(TRAINING_LOG_HEADER)?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            format!("{:.8}", r.mean_loss),
            r.val_auroc.map(|a| format!("{a:.6}")).unwrap_or_else(|| "absent".into()),
            format!("{:.3}", r.seconds),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Which attention matrix is exported as the patient's relation matrix.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencySource {
    #[default]
    Decoder,
    /// Last encoder layer.
    Encoder,
}

/// A trained model together with the configuration and vocabulary it was
/// trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Vgnn {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    config: TrainConfig,
    vocab: Vocabulary,
    tensors: Vec<TensorRecord>,
}

impl Vgnn {
    /// Probability per sample in infer mode. Samples without in-vocabulary
    /// codes get `sigmoid(b)`.
    pub fn predict(&self, samples: &[CohortSample]) -> Result<Vec<f64>> {
        exec::map(samples, |s| match build_graph(s, &self.vocab) {
            Ok(g) => forward_nodes(&self.params, &g.node_code_indices, None).map(|o| o.probability),
            Err(Error::EmptyGraph(_)) => Ok(sigmoid(self.params.bias)),
            Err(e) => Err(e),
        })
        .into_iter()
        .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let layers = self.params.encoder.len();
        let tensors = ModelParams::tensor_names(layers)
            .into_iter()
            .zip(self.params.shapes())
            .zip(self.params.tensors())
            .map(|((name, shape), data)| TensorRecord {
                name,
                shape,
                data: data.to_vec(),
            })
            .collect();
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            tensors,
        };
        Ok(serde_json::to_string(&file)?)
    }

    /// Parses a model file; any tensor whose shape disagrees with the
    /// configuration and vocabulary is rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format != MODEL_FORMAT {
            return Err(Error::InvalidData(format!("unsupported model format '{}'", file.format)));
        }
        let (v, d, layers) = (file.vocab.len(), file.config.embed_dim, file.config.layers);
        let names = ModelParams::tensor_names(layers);
        let shapes = ModelParams::expected_shapes(v, d, layers);
        if file.tensors.len() != names.len() {
            return Err(Error::InvalidData(format!(
                "model holds {} tensors, expected {}",
                file.tensors.len(),
                names.len()
            )));
        }
        let mut params = ModelParams::init(v, d, layers, &mut seed::rng_for(0, "load"));
        for (i, rec) in file.tensors.iter().enumerate() {
            if rec.name != names[i] {
                return Err(Error::InvalidData(format!("tensor {i} is '{}', expected '{}'", rec.name, names[i])));
            }
            let expected_len: usize = shapes[i].iter().product();
            if rec.shape != shapes[i] || rec.data.len() != expected_len {
                return Err(Error::ShapeMismatch {
                    name: rec.name.clone(),
                    expected: shapes[i].clone(),
                    found: if rec.shape != shapes[i] { rec.shape.clone() } else { vec![rec.data.len()] },
                });
            }
        }
        for (dst, rec) in params.tensors_mut().into_iter().zip(&file.tensors) {
            dst.copy_from_slice(&rec.data);
        }
        Ok(Vgnn {
            config: file.config,
            vocab: file.vocab,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Patient relation matrix in vocabulary coordinates (infer mode). Node
/// order in `nodes` does not matter: entry `(nodes[i], nodes[j])` receives
/// the attention of node `i` on node `j`.
pub fn extract_adjacency_nodes(params: &ModelParams, nodes: &[usize], source: AdjacencySource) -> Result<RelationMatrix> {
    if nodes.is_empty() {
        return Err(Error::EmptyGraph("adjacency requested for an empty graph".into()));
    }
    let local = match source {
        AdjacencySource::Decoder => forward_nodes(params, nodes, None)?.adjacency,
        AdjacencySource::Encoder => encoder_attention(params, nodes)?,
    };
    let v = params.vocab_size();
    let mut values = Array2::zeros((v, v));
    for (a, &i) in nodes.iter().enumerate() {
        for (b, &j) in nodes.iter().enumerate() {
            values[[i, j]] = local[[a, b]];
        }
    }
    Ok(RelationMatrix::new(values, RelationKind::PerPatient))
}

pub fn extract_adjacency(params: &ModelParams, graph: &PatientGraph, source: AdjacencySource) -> Result<RelationMatrix> {
    extract_adjacency_nodes(params, &graph.node_code_indices, source)
}

/// Deterministic stratified hold-out of `fraction` of each class.
fn validation_split(labels: &[u8], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut fit = Vec::new();
    let mut val = Vec::new();
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut seed::rng_for(seed, &format!("validation/{class}")));
        let n_val = (fraction * idx.len() as f64).round() as usize;
        val.extend_from_slice(&idx[..n_val]);
        fit.extend_from_slice(&idx[n_val..]);
    }
    fit.sort_unstable();
    val.sort_unstable();
    (fit, val)
}

struct Adam {
    m: ModelParams,
    v: ModelParams,
    step: i32,
}

impl Adam {
    fn new(params: &ModelParams) -> Self {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut ModelParams, grad: &ModelParams, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let tensors = params.tensors_mut().into_iter().zip(self.m.tensors_mut()).zip(self.v.tensors_mut()).zip(grad.tensors());
        for (((p, m), v), g) in tensors {
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
            }
        }
    }
}

/// Mini-batch Adam on the mean batch loss.
///
/// Randomness is keyed off `cfg.seed`: initialization (`init`), the epoch
/// shuffle (`epoch/{e}`), and per-sample noise (`noise/{e}/{i}` with `i` the
/// sample's position in `samples`). Results therefore do not depend on the
/// execution mode or thread count.
pub fn train(samples: &[CohortSample], vocab: &Vocabulary, cfg: &TrainConfig) -> Result<(Vgnn, Vec<EpochRecord>)> {
    cfg.validate()?;
    if samples.len() < 2 {
        return Err(Error::DegenerateCohort(format!("{} training samples, need at least 2", samples.len())));
    }
    if !(samples.iter().any(|s| s.label == 1) && samples.iter().any(|s| s.label == 0)) {
        return Err(Error::DegenerateCohort("training samples contain a single class".into()));
    }
    if vocab.is_empty() {
        return Err(Error::VocabularyMismatch("empty vocabulary".into()));
    }
    let graphs: Vec<Option<PatientGraph>> = samples
        .iter()
        .map(|s| match build_graph(s, vocab) {
            Ok(g) => Ok(Some(g)),
            Err(Error::EmptyGraph(id)) => {
                log::warn!("training sample {id} has no in-vocabulary codes; skipped");
                Ok(None)
            }
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let (fit_idx, val_idx) = validation_split(&labels, cfg.validation_fraction, cfg.seed);
    let fit_idx: Vec<usize> = fit_idx.into_iter().filter(|&i| graphs[i].is_some()).collect();
    let val_idx: Vec<usize> = val_idx.into_iter().filter(|&i| graphs[i].is_some()).collect();
    if fit_idx.is_empty() {
        return Err(Error::DegenerateCohort("no trainable samples".into()));
    }

    let d = cfg.embed_dim;
    let mut params = ModelParams::init(vocab.len(), d, cfg.layers, &mut seed::rng_for(cfg.seed, "init"));
    let mut adam = Adam::new(&params);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut order = fit_idx.clone();
        order.shuffle(&mut seed::rng_for(cfg.seed, &format!("epoch/{epoch}")));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&PatientGraph, u8)> = chunk
                .iter()
                .map(|&i| (graphs[i].as_ref().expect("filtered"), labels[i]))
                .collect();
            let noises: Vec<Option<Noise>> = exec::map(chunk, |&i| {
                let n = graphs[i].as_ref().expect("filtered").len();
                let mut rng = seed::rng_for(cfg.seed, &format!("noise/{epoch}/{i}"));
                Some(Noise::sample(n, d, cfg.layers, cfg.dropout, &mut rng))
            });
            let (loss, grad) = match batch_gradients(&params, &batch, cfg.beta, &noises) {
                Ok(r) => r,
                Err(Error::NumericalOverflow { layer }) => {
                    log::error!("overflow in {layer} during epoch {epoch}");
                    return Err(Error::Divergence { epoch });
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || !grad.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            loss_sum += loss * chunk.len() as f64;
            adam.update(&mut params, &grad, cfg);
        }
        if !params.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        let val_auroc = validation_auroc(&params, &graphs, &labels, &val_idx)?;
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / fit_idx.len() as f64,
            val_auroc,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} val_auroc {}",
            record.mean_loss,
            val_auroc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "absent".into())
        );
        history.push(record);
    }

    let model = Vgnn {
        config: cfg.clone(),
        vocab: vocab.clone(),
        params,
    };
    Ok((model, history))
}

fn validation_auroc(params: &ModelParams, graphs: &[Option<PatientGraph>], labels: &[u8], val_idx: &[usize]) -> Result<Option<f64>> {
    if val_idx.is_empty() {
        return Ok(None);
    }
    let scores = exec::map(val_idx, |&i| {
        forward_nodes(params, &graphs[i].as_ref().expect("filtered").node_code_indices, None).map(|o| o.probability)
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    let y: Vec<u8> = val_idx.iter().map(|&i| labels[i]).collect();
    match eval::auroc(&scores, &y) {
        Ok(a) => Ok(Some(a)),
        Err(Error::UndefinedAuroc) => Ok(None),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Gender;
    use chrono::NaiveDate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn sample(id: usize, label: u8, groups: &[&str]) -> CohortSample {
        CohortSample {
            patient_id: format!("P{id:04}"),
            index_date: NaiveDate::from_ymd_opt(2015, 1, 1).unwrap(),
            label,
            age_at_index: 70,
            gender: Gender::F,
            grouped_codes: groups.iter().map(|g| (g.to_string(), 1)).collect(),
            qualifying_month_count: 2,
        }
    }

    /// Cases carry G0 and G1 together; everyone gets two random background groups.
    fn planted(n: usize, seed: u64) -> Vec<CohortSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = (0..12).map(|k| format!("G{k}")).collect();
        (0..n)
            .map(|i| {
                let label = (i % 2) as u8;
                let mut groups: Vec<&str> = (0..2).map(|_| names[rng.random_range(2..12)].as_str()).collect();
                if label == 1 {
                    groups.extend(["G0", "G1"]);
                }
                sample(i, label, &groups)
            })
            .collect()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 16,
            epochs: 3,
            embed_dim: 4,
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_return_initialization() {
        let data = planted(20, 1);
        let vocab = Vocabulary::from_samples(&data, &BTreeMap::new());
        let cfg = TrainConfig {
            epochs: 0,
            ..small_config()
        };
        let (model, history) = train(&data, &vocab, &cfg).unwrap();
        assert!(history.is_empty());
        let init = ModelParams::init(vocab.len(), 4, 2, &mut seed::rng_for(9, "init"));
        assert_eq!(model.params, init);
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let data = planted(120, 2);
        let vocab = Vocabulary::from_samples(&data, &BTreeMap::new());
        let cfg = TrainConfig {
            epochs: 15,
            ..small_config()
        };
        let (a, ha) = train(&data, &vocab, &cfg).unwrap();
        exec::set_parallel(false);
        let (b, hb) = train(&data, &vocab, &cfg).unwrap();
        exec::set_parallel(true);
        assert_eq!(a.params, b.params);
        assert_eq!(ha.last().unwrap().mean_loss, hb.last().unwrap().mean_loss);
        assert!(ha.last().unwrap().mean_loss < ha[0].mean_loss);
        let scores = a.predict(&data).unwrap();
        let labels: Vec<u8> = data.iter().map(|s| s.label).collect();
        assert!(eval::auroc(&scores, &labels).unwrap() > 0.9);
    }

    #[test]
    fn single_class_is_rejected() {
        let data: Vec<_> = (0..5).map(|i| sample(i, 0, &["A"])).collect();
        let vocab = Vocabulary::from_samples(&data, &BTreeMap::new());
        assert!(matches!(train(&data, &vocab, &small_config()), Err(Error::DegenerateCohort(_))));
    }

    #[test]
    fn huge_learning_rate_reports_divergence_or_trains() {
        let data = planted(40, 3);
        let vocab = Vocabulary::from_samples(&data, &BTreeMap::new());
        let cfg = TrainConfig {
            learning_rate: 1e200,
            ..small_config()
        };
        match train(&data, &vocab, &cfg) {
            Err(Error::Divergence { epoch }) => assert!(epoch < cfg.epochs),
            Err(e) => panic!("unexpected error {e}"),
            Ok((m, _)) => assert!(m.params.is_finite()),
        }
    }

    #[test]
    fn model_file_round_trip_and_shape_check() {
        let data = planted(20, 4);
        let vocab = Vocabulary::from_samples(&data, &BTreeMap::new());
        let (model, _) = train(&data, &vocab, &TrainConfig { epochs: 1, ..small_config() }).unwrap();
        let json = model.to_json().unwrap();
        let back = Vgnn::from_json(&json).unwrap();
        assert_eq!(back, model);

        let mut doc: serde_json::Value = serde_json::from_str(&json).unwrap();
        doc["tensors"][1]["shape"] = serde_json::json!([5, 4]);
        let err = Vgnn::from_json(&doc.to_string()).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { ref name, .. } if name == "encoder.0.weight"), "{err}");
    }

    #[test]
    fn adjacency_examples() {
        let p = ModelParams::init(6, 4, 2, &mut ChaCha8Rng::seed_from_u64(5));
        let one = extract_adjacency_nodes(&p, &[3], AdjacencySource::Decoder).unwrap();
        assert_eq!(one.values[[3, 3]], 1.0);
        assert_eq!(one.values.sum(), 1.0);

        let two = extract_adjacency_nodes(&p, &[1, 4], AdjacencySource::Decoder).unwrap();
        for i in [1, 4] {
            assert!((two.values[[i, 1]] + two.values[[i, 4]] - 1.0).abs() < 1e-12);
        }
        assert_eq!(two.values.iter().filter(|&&x| x != 0.0).count(), 4);

        let a = extract_adjacency_nodes(&p, &[0, 2, 5], AdjacencySource::Encoder).unwrap();
        let b = extract_adjacency_nodes(&p, &[5, 0, 2], AdjacencySource::Encoder).unwrap();
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(extract_adjacency_nodes(&p, &[], AdjacencySource::Decoder).is_err());
    }

    #[test]
    fn permutation_equivariance_and_determinism() {
        let p = ModelParams::init(8, 5, 2, &mut ChaCha8Rng::seed_from_u64(6));
        let nodes = [1, 3, 4, 7];
        let perm = [2, 0, 3, 1];
        let permuted: Vec<usize> = perm.iter().map(|&k| nodes[k]).collect();
        let a = forward_nodes(&p, &nodes, None).unwrap();
        let b = forward_nodes(&p, &permuted, None).unwrap();
        assert!((a.probability - b.probability).abs() < 1e-9);
        for (row, &k) in perm.iter().enumerate() {
            for c in 0..5 {
                assert!((b.node_states[[row, c]] - a.node_states[[k, c]]).abs() < 1e-9);
            }
        }
        let again = forward_nodes(&p, &nodes, None).unwrap();
        assert_eq!(a.probability.to_bits(), again.probability.to_bits());
        assert_eq!(a.adjacency, again.adjacency);
    }

    #[test]
    fn training_log_format() {
        let mut buf = Vec::new();
        let h = [EpochRecord {
            epoch: 0,
            mean_loss: 0.5,
            val_auroc: None,
            seconds: 0.25,
        }];
        write_training_log(&mut buf, &h).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,mean_loss,val_auroc,seconds\n0,0.50000000,absent,0.250\n");
    }
}
