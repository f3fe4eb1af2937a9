use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use super::params::{AttentionLayer, ModelParams};
use super::PatientGraph;
use crate::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Train { dropout: f64 },
    Infer,
}

/// Randomness of one training forward pass, drawn up front so the pass is a
/// deterministic function of parameters once noise is fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    /// Inverted-dropout masks (entries 0 or `1 / (1 - p)`), one per encoder layer.
    pub dropout_masks: Vec<Array2<f64>>,
    /// Standard normal draws for the reparameterization, n x d.
    pub eps: Array2<f64>,
}

impl Noise {
    pub fn sample<R: Rng>(n: usize, d: usize, layers: usize, dropout: f64, rng: &mut R) -> Self {
        let keep = 1.0 - dropout;
        let dropout_masks = (0..layers)
            .map(|_| {
                Array2::from_shape_simple_fn((n, d), || {
                    if dropout == 0.0 || rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
            })
            .collect();
        let eps = Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal));
        Noise { dropout_masks, eps }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub probability: f64,
    pub logit: f64,
    pub kl: f64,
    /// Decoder attention, n x n, row-stochastic.
    pub adjacency: Array2<f64>,
    /// Decoder node outputs, n x d.
    pub node_states: Array2<f64>,
}

/// Intermediates of one attention layer, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct AttentionCache {
    pub input: Array2<f64>,
    pub projected: Array2<f64>,
    pub pre: Array2<f64>,
    pub alpha: Array2<f64>,
    pub agg: Array2<f64>,
    pub out: Array2<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Trace {
    pub nodes: Vec<usize>,
    pub encoder: Vec<AttentionCache>,
    /// Input to the variational layer (last encoder output after dropout).
    pub hidden: Array2<f64>,
    pub mu: Array2<f64>,
    pub logvar: Array2<f64>,
    pub decoder: AttentionCache,
    pub pooled: Array1<f64>,
}

pub(crate) fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

pub(crate) fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    crate::matching::sigmoid(x)
}

fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    out
}

fn ensure_finite(a: &Array2<f64>, layer: &str) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalOverflow { layer: layer.to_string() })
    }
}

pub(crate) fn attention_forward(layer: &AttentionLayer, input: Array2<f64>, tag: &str) -> Result<AttentionCache> {
    let d = layer.weight.nrows();
    let projected = input.dot(&layer.weight.t());
    let left: ArrayView1<f64> = layer.attn.slice(s![..d]);
    let right: ArrayView1<f64> = layer.attn.slice(s![d..]);
    let s_recv = projected.dot(&left);
    let s_send = projected.dot(&right);
    let n = input.nrows();
    let pre = Array2::from_shape_fn((n, n), |(i, j)| s_recv[i] + s_send[j]);
    let alpha = softmax_rows(&pre.mapv(leaky));
    let agg = alpha.dot(&projected);
    let out = agg.mapv(elu);
    ensure_finite(&out, tag)?;
    ensure_finite(&alpha, tag)?;
    Ok(AttentionCache {
        input,
        projected,
        pre,
        alpha,
        agg,
        out,
    })
}

/// KL of `N(mu, exp(logvar))` to the standard normal, averaged over nodes.
pub fn kl_divergence(mu: &Array2<f64>, logvar: &Array2<f64>) -> f64 {
    let n = mu.nrows() as f64;
    let total: f64 = mu
        .iter()
        .zip(logvar.iter())
        .map(|(&m, &lv)| 0.5 * (lv.exp() + m * m - 1.0 - lv))
        .sum();
    total / n
}

/// Binary cross-entropy on the clamped probability plus `beta * kl`.
pub fn loss(probability: f64, kl: f64, label: u8, beta: f64) -> f64 {
    let p = probability.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let y = label as f64;
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()) + beta * kl
}

pub(crate) fn forward_traced(params: &ModelParams, nodes: &[usize], noise: Option<&Noise>) -> Result<(ForwardOutput, Trace)> {
    assert!(!nodes.is_empty(), "forward needs at least one node");
    let d = params.dim();
    let mut h = params.embedding.select(Axis(0), nodes);
    let mut encoder = Vec::with_capacity(params.encoder.len());
    for (l, layer) in params.encoder.iter().enumerate() {
        let cache = attention_forward(layer, h, &format!("encoder[{l}]"))?;
        h = match noise {
            Some(nz) => &cache.out * &nz.dropout_masks[l],
            None => cache.out.clone(),
        };
        encoder.push(cache);
    }

    let mu = h.dot(&params.w_mu.t());
    let logvar = h.dot(&params.w_logvar.t());
    ensure_finite(&mu, "variational")?;
    ensure_finite(&logvar, "variational")?;
    let kl = kl_divergence(&mu, &logvar);
    if !kl.is_finite() {
        return Err(Error::NumericalOverflow { layer: "variational".into() });
    }
    let z = match noise {
        Some(nz) => {
            let sigma = logvar.mapv(|lv| (0.5 * lv).exp());
            &mu + &(&sigma * &nz.eps)
        }
        None => mu.clone(),
    };
    debug_assert_eq!(z.ncols(), d);

    let decoder = attention_forward(&params.decoder, z, "decoder")?;
    let pooled = decoder.out.mean_axis(Axis(0)).expect("non-empty graph");
    let logit = params.w_out.dot(&pooled) + params.bias;
    if !logit.is_finite() {
        return Err(Error::NumericalOverflow { layer: "output".into() });
    }
    let output = ForwardOutput {
        probability: sigmoid(logit),
        logit,
        kl,
        adjacency: decoder.alpha.clone(),
        node_states: decoder.out.clone(),
    };
    let trace = Trace {
        nodes: nodes.to_vec(),
        encoder,
        hidden: h,
        mu,
        logvar,
        decoder,
        pooled,
    };
    Ok((output, trace))
}

/// Forward pass over an arbitrary node order. `noise = None` is inference.
pub fn forward_nodes(params: &ModelParams, nodes: &[usize], noise: Option<&Noise>) -> Result<ForwardOutput> {
    forward_traced(params, nodes, noise).map(|(o, _)| o)
}

pub fn forward<R: Rng>(params: &ModelParams, graph: &PatientGraph, mode: Mode, rng: &mut R) -> Result<ForwardOutput> {
    match mode {
        Mode::Infer => forward_nodes(params, &graph.node_code_indices, None),
        Mode::Train { dropout } => {
            let noise = Noise::sample(graph.len(), params.dim(), params.encoder.len(), dropout, rng);
            forward_nodes(params, &graph.node_code_indices, Some(&noise))
        }
    }
}

/// Encoder attention of the last encoder layer at inference, n x n.
pub fn encoder_attention(params: &ModelParams, nodes: &[usize]) -> Result<Array2<f64>> {
    let (_, trace) = forward_traced(params, nodes, None)?;
    Ok(trace.encoder.last().map(|c| c.alpha.clone()).unwrap_or_else(|| Array2::eye(nodes.len())))
}
