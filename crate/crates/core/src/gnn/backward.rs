//! Reverse-mode gradients of the per-sample loss
//! `BCE(sigmoid(logit), y) + beta * kl`.
//!
//! Noise (dropout masks, reparameterization draws) is treated as a constant
//! of the pass. Where the probability is clamped before the log the loss is
//! flat, so the output gradient is zero there.

use ndarray::{s, Array1, Array2, Axis};

use super::forward::{forward_traced, loss, AttentionCache, Noise, LEAKY_SLOPE, PROB_CLAMP};
use super::params::{AttentionLayer, ModelParams};
use super::PatientGraph;
use crate::{exec, Result};

/// Backpropagates `d_out` (gradient w.r.t. the layer's post-ELU output)
/// through one attention layer, accumulating parameter gradients into
/// `grad` and returning the gradient w.r.t. the layer input.
pub(crate) fn attention_backward(
    layer: &AttentionLayer,
    cache: &AttentionCache,
    d_out: &Array2<f64>,
    grad: &mut AttentionLayer,
) -> Array2<f64> {
    let d = layer.weight.nrows();
    // ELU'(x) = 1 for x > 0, exp(x) otherwise
    let d_agg = ndarray::Zip::from(d_out)
        .and(&cache.agg)
        .map_collect(|&g, &x| if x > 0.0 { g } else { g * x.exp() });

    let d_alpha = d_agg.dot(&cache.projected.t());
    let mut d_proj = cache.alpha.t().dot(&d_agg);

    // softmax: de_ij = alpha_ij (dalpha_ij - sum_k alpha_ik dalpha_ik)
    let row_dots = (&cache.alpha * &d_alpha).sum_axis(Axis(1));
    let mut d_pre = &cache.alpha * &(&d_alpha - &row_dots.insert_axis(Axis(1)));
    ndarray::Zip::from(&mut d_pre)
        .and(&cache.pre)
        .for_each(|g, &x| {
            if x <= 0.0 {
                *g *= LEAKY_SLOPE;
            }
        });

    let d_recv = d_pre.sum_axis(Axis(1));
    let d_send = d_pre.sum_axis(Axis(0));
    let left = layer.attn.slice(s![..d]);
    let right = layer.attn.slice(s![d..]);
    {
        let mut ga = grad.attn.slice_mut(s![..d]);
        ga += &cache.projected.t().dot(&d_recv);
    }
    {
        let mut ga = grad.attn.slice_mut(s![d..]);
        ga += &cache.projected.t().dot(&d_send);
    }
    let outer = |col: &Array1<f64>, row: ndarray::ArrayView1<f64>| {
        col.view().insert_axis(Axis(1)).dot(&row.insert_axis(Axis(0)))
    };
    d_proj += &outer(&d_recv, left);
    d_proj += &outer(&d_send, right);

    grad.weight += &d_proj.t().dot(&cache.input);
    d_proj.dot(&layer.weight)
}

/// Loss and gradient of a single sample. `noise = None` differentiates the
/// inference pass (no dropout, `z = mu`).
pub fn sample_gradient(
    params: &ModelParams,
    nodes: &[usize],
    label: u8,
    beta: f64,
    noise: Option<&Noise>,
) -> Result<(f64, ModelParams)> {
    let (out, trace) = forward_traced(params, nodes, noise)?;
    let value = loss(out.probability, out.kl, label, beta);
    let mut grad = params.zeros_like();
    let n = nodes.len() as f64;

    let p = out.probability;
    let d_logit = if p > PROB_CLAMP && p < 1.0 - PROB_CLAMP {
        p - label as f64
    } else {
        0.0
    };
    grad.bias = d_logit;
    grad.w_out = &trace.pooled * d_logit;
    let d_pooled = &params.w_out * d_logit;
    let d_u = Array2::from_shape_fn(trace.decoder.out.dim(), |(_, k)| d_pooled[k] / n);

    let d_z = attention_backward(&params.decoder, &trace.decoder, &d_u, &mut grad.decoder);

    // variational layer
    let mut d_mu = d_z.clone();
    let mut d_logvar = match noise {
        Some(nz) => ndarray::Zip::from(&d_z)
            .and(&trace.logvar)
            .and(&nz.eps)
            .map_collect(|&g, &lv, &e| g * 0.5 * (0.5 * lv).exp() * e),
        None => Array2::zeros(d_z.dim()),
    };
    let kl_scale = beta / n;
    d_mu.scaled_add(kl_scale, &trace.mu);
    d_logvar.zip_mut_with(&trace.logvar, |g, &lv| *g += kl_scale * 0.5 * lv.exp_m1());

    grad.w_mu += &d_mu.t().dot(&trace.hidden);
    grad.w_logvar += &d_logvar.t().dot(&trace.hidden);
    let mut d_h = d_mu.dot(&params.w_mu) + d_logvar.dot(&params.w_logvar);

    for l in (0..params.encoder.len()).rev() {
        if let Some(nz) = noise {
            d_h *= &nz.dropout_masks[l];
        }
        d_h = attention_backward(&params.encoder[l], &trace.encoder[l], &d_h, &mut grad.encoder[l]);
    }

    for (row, &node) in d_h.rows().into_iter().zip(&trace.nodes) {
        let mut dst = grad.embedding.row_mut(node);
        dst += &row;
    }
    Ok((value, grad))
}

/// Mean loss and mean gradient over a batch. Per-sample work runs through
/// [`exec::map_range`]; the reduction is sequential in batch order so the
/// result does not depend on the execution mode.
pub fn batch_gradients(
    params: &ModelParams,
    batch: &[(&PatientGraph, u8)],
    beta: f64,
    noises: &[Option<Noise>],
) -> Result<(f64, ModelParams)> {
    assert!(!batch.is_empty(), "empty batch");
    assert_eq!(batch.len(), noises.len());
    let parts = exec::map_range(batch.len(), |i| {
        let (g, y) = batch[i];
        sample_gradient(params, &g.node_code_indices, y, beta, noises[i].as_ref())
    });
    let scale = 1.0 / batch.len() as f64;
    let mut total = params.zeros_like();
    let mut mean_loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        mean_loss += l * scale;
        total.add_scaled(&g, scale);
    }
    Ok((mean_loss, total))
}

/// Mean batch loss under fixed noise; the finite-difference counterpart of
/// [`batch_gradients`].
pub fn batch_loss(params: &ModelParams, batch: &[(&PatientGraph, u8)], beta: f64, noises: &[Option<Noise>]) -> Result<f64> {
    let mut total = 0.0;
    for ((g, y), nz) in batch.iter().zip(noises) {
        let out = super::forward::forward_nodes(params, &g.node_code_indices, nz.as_ref())?;
        total += loss(out.probability, out.kl, *y, beta);
    }
    Ok(total / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn graph(nodes: &[usize]) -> PatientGraph {
        PatientGraph {
            node_code_indices: nodes.to_vec(),
            counts: vec![1; nodes.len()],
            out_of_vocab: 0,
        }
    }

    /// Central differences on every coordinate, compared with relative error
    /// `|a - b| / max(|a|, |b|, 1e-6)`.
    fn check(params: &ModelParams, batch: &[(&PatientGraph, u8)], beta: f64, noises: &[Option<Noise>]) -> f64 {
        let (_, analytic) = batch_gradients(params, batch, beta, noises).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut probe = params.clone();
        let n_tensors = params.tensors().len();
        for t in 0..n_tensors {
            let len = params.tensors()[t].len();
            for k in 0..len {
                let orig = params.tensors()[t][k];
                probe.tensors_mut()[t][k] = orig + h;
                let up = batch_loss(&probe, batch, beta, noises).unwrap();
                probe.tensors_mut()[t][k] = orig - h;
                let down = batch_loss(&probe, batch, beta, noises).unwrap();
                probe.tensors_mut()[t][k] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = analytic.tensors()[t][k];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences_infer() {
        let p = ModelParams::init(6, 4, 2, &mut ChaCha8Rng::seed_from_u64(11));
        let (g1, g2) = (graph(&[0, 2, 5]), graph(&[3]));
        let batch = [(&g1, 1u8), (&g2, 0u8)];
        let worst = check(&p, &batch, 0.002, &[None, None]);
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn gradients_match_finite_differences_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ModelParams::init(6, 4, 2, &mut rng);
        let (g1, g2) = (graph(&[1, 2, 4]), graph(&[0, 5]));
        let noises = [
            Some(Noise::sample(3, 4, 2, 0.1, &mut rng)),
            Some(Noise::sample(2, 4, 2, 0.1, &mut rng)),
        ];
        let batch = [(&g1, 0u8), (&g2, 1u8)];
        let worst = check(&p, &batch, 0.5, &noises);
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn kl_weight_does_not_touch_output_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = ModelParams::init(5, 4, 2, &mut rng);
        let g = graph(&[0, 1, 3]);
        let noise = Noise::sample(3, 4, 2, 0.1, &mut rng);
        let (_, a) = sample_gradient(&p, &g.node_code_indices, 1, 0.0, Some(&noise)).unwrap();
        let (_, b) = sample_gradient(&p, &g.node_code_indices, 1, 0.002, Some(&noise)).unwrap();
        assert_eq!(a.w_out, b.w_out);
        assert_eq!(a.bias, b.bias);
        assert_ne!(a.w_mu, b.w_mu);
    }

    #[test]
    fn gradient_vanishes_at_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ModelParams::init(5, 4, 2, &mut rng);
        p.w_mu.fill(0.0);
        p.w_logvar.fill(0.0);
        p.w_out.fill(0.0);
        p.bias = 16.0;
        let g = graph(&[0, 2, 4]);
        let noise = Noise::sample(3, 4, 2, 0.1, &mut rng);
        let (l, grad) = sample_gradient(&p, &g.node_code_indices, 1, 0.002, Some(&noise)).unwrap();
        assert!(l < 1e-6);
        assert!(grad.l2_norm() <= 1e-6, "norm {}", grad.l2_norm());
    }

    #[test]
    fn batch_reduction_is_mode_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = ModelParams::init(12, 4, 2, &mut rng);
        let graphs: Vec<_> = (0..40).map(|i| graph(&[i % 12, (i * 7 + 3) % 12].iter().copied().collect::<std::collections::BTreeSet<_>>().into_iter().collect::<Vec<_>>())).collect();
        let batch: Vec<_> = graphs.iter().enumerate().map(|(i, g)| (g, (i % 2) as u8)).collect();
        let noises: Vec<_> = graphs.iter().map(|g| Some(Noise::sample(g.len(), 4, 2, 0.1, &mut rng))).collect();
        crate::exec::set_parallel(false);
        let seq = batch_gradients(&p, &batch, 0.002, &noises).unwrap();
        crate::exec::set_parallel(true);
        let par = batch_gradients(&p, &batch, 0.002, &noises).unwrap();
        assert_eq!(seq.0, par.0);
        assert_eq!(seq.1, par.1);
    }
}
