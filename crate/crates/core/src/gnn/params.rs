use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Weight `W` (d_out x d_in) and attention vector `a` (2 d_out) of one
/// single-head attention layer. The first half of `a` scores the receiving
/// node, the second half the sending node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayer {
    pub weight: Array2<f64>,
    pub attn: Array1<f64>,
}

impl AttentionLayer {
    fn zeros(d_out: usize, d_in: usize) -> Self {
        AttentionLayer {
            weight: Array2::zeros((d_out, d_in)),
            attn: Array1::zeros(2 * d_out),
        }
    }

    fn random<R: Rng>(d: usize, rng: &mut R) -> Self {
        AttentionLayer {
            weight: uniform2(d, d, d, rng),
            attn: uniform1(2 * d, 2 * d, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub embedding: Array2<f64>,
    pub encoder: Vec<AttentionLayer>,
    pub w_mu: Array2<f64>,
    pub w_logvar: Array2<f64>,
    pub decoder: AttentionLayer,
    pub w_out: Array1<f64>,
    pub bias: f64,
}

fn uniform2<R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Array2<f64> {
    let r = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-r..r))
}

fn uniform1<R: Rng>(len: usize, fan_in: usize, rng: &mut R) -> Array1<f64> {
    let r = 1.0 / (fan_in as f64).sqrt();
    Array1::from_shape_simple_fn(len, || rng.random_range(-r..r))
}

impl ModelParams {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in))` for every tensor, with
    /// `fan_in = d` for embedding rows; bias starts at zero. Tensors are
    /// drawn in declaration order from `rng`.
    pub fn init<R: Rng>(vocab_size: usize, d: usize, layers: usize, rng: &mut R) -> Self {
        let embedding = uniform2(vocab_size, d, d, rng);
        let encoder = (0..layers).map(|_| AttentionLayer::random(d, rng)).collect();
        let w_mu = uniform2(d, d, d, rng);
        let w_logvar = uniform2(d, d, d, rng);
        let decoder = AttentionLayer::random(d, rng);
        let w_out = uniform1(d, d, rng);
        ModelParams {
            embedding,
            encoder,
            w_mu,
            w_logvar,
            decoder,
            w_out,
            bias: 0.0,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let (v, d) = self.embedding.dim();
        ModelParams {
            embedding: Array2::zeros((v, d)),
            encoder: self.encoder.iter().map(|l| AttentionLayer::zeros(l.weight.nrows(), l.weight.ncols())).collect(),
            w_mu: Array2::zeros(self.w_mu.dim()),
            w_logvar: Array2::zeros(self.w_logvar.dim()),
            decoder: AttentionLayer::zeros(self.decoder.weight.nrows(), self.decoder.weight.ncols()),
            w_out: Array1::zeros(self.w_out.len()),
            bias: 0.0,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.nrows()
    }

    pub fn dim(&self) -> usize {
        self.embedding.ncols()
    }

    /// Tensor names in a fixed order, matching [`Self::tensors`].
    pub fn tensor_names(layers: usize) -> Vec<String> {
        let mut names = vec!["embedding".to_string()];
        for l in 0..layers {
            names.push(format!("encoder.{l}.weight"));
            names.push(format!("encoder.{l}.attn"));
        }
        for n in ["w_mu", "w_logvar", "decoder.weight", "decoder.attn", "w_out", "bias"] {
            names.push(n.to_string());
        }
        names
    }

    /// Expected shapes in the order of [`Self::tensor_names`].
    pub fn expected_shapes(vocab_size: usize, d: usize, layers: usize) -> Vec<Vec<usize>> {
        let mut shapes = vec![vec![vocab_size, d]];
        for _ in 0..layers {
            shapes.push(vec![d, d]);
            shapes.push(vec![2 * d]);
        }
        shapes.extend([vec![d, d], vec![d, d], vec![d, d], vec![2 * d], vec![d], vec![]]);
        shapes
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        Self::expected_shapes(self.vocab_size(), self.dim(), self.encoder.len())
    }

    /// Flat row-major views of every tensor.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.embedding.as_slice().expect("standard layout")];
        for l in &self.encoder {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.attn.as_slice().expect("standard layout"));
        }
        out.push(self.w_mu.as_slice().expect("standard layout"));
        out.push(self.w_logvar.as_slice().expect("standard layout"));
        out.push(self.decoder.weight.as_slice().expect("standard layout"));
        out.push(self.decoder.attn.as_slice().expect("standard layout"));
        out.push(self.w_out.as_slice().expect("standard layout"));
        out.push(std::slice::from_ref(&self.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.embedding.as_slice_mut().expect("standard layout")];
        for l in &mut self.encoder {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.attn.as_slice_mut().expect("standard layout"));
        }
        out.push(self.w_mu.as_slice_mut().expect("standard layout"));
        out.push(self.w_logvar.as_slice_mut().expect("standard layout"));
        out.push(self.decoder.weight.as_slice_mut().expect("standard layout"));
        out.push(self.decoder.attn.as_slice_mut().expect("standard layout"));
        out.push(self.w_out.as_slice_mut().expect("standard layout"));
        out.push(std::slice::from_mut(&mut self.bias));
        out
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += scale * b;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_and_views_agree() {
        let p = ModelParams::init(7, 4, 2, &mut ChaCha8Rng::seed_from_u64(1));
        let views = p.tensors();
        let shapes = p.shapes();
        assert_eq!(views.len(), ModelParams::tensor_names(2).len());
        for (v, s) in views.iter().zip(&shapes) {
            assert_eq!(v.len(), s.iter().product::<usize>());
        }
        assert_eq!(p.bias, 0.0);
        assert!(p.embedding.iter().all(|x| x.abs() <= 0.5));
    }

    #[test]
    fn add_scaled_accumulates() {
        let p = ModelParams::init(3, 2, 1, &mut ChaCha8Rng::seed_from_u64(1));
        let mut z = p.zeros_like();
        z.add_scaled(&p, 2.0);
        z.add_scaled(&p, -1.0);
        assert_eq!(z, p);
    }
}
