use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;

/// Fan-in-scaled uniform initialization; biases start at zero.
fn init_weight(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let len: usize = shape.iter().product();
    let values = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, values).unwrap()
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

impl Dense {
    pub fn init(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: init_weight(vec![out_features, in_features], in_features, rng),
            b: Tensor::zeros(vec![out_features]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MaskedDense {
    pub w: Tensor,
    pub b: Tensor,
    pub mask: Arc<Tensor>,
}

impl MaskedDense {
    pub fn init(mask: Arc<Tensor>, rng: &mut ChaCha8Rng) -> Self {
        let out_features = mask.shape()[0];
        let in_features = mask.shape()[1];
        Self {
            w: init_weight(vec![out_features, in_features], in_features, rng),
            b: Tensor::zeros(vec![out_features]),
            mask,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv1dCircular {
    pub w: Tensor,
    pub b: Tensor,
}

impl Conv1dCircular {
    pub fn init(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: init_weight(
                vec![out_channels, in_channels, kernel],
                in_channels * kernel,
                rng,
            ),
            b: Tensor::zeros(vec![out_channels]),
        }
    }
}

/// Strictly-lower-triangular mask: entry (o, i) is 1 iff `i < o`, so output o
/// depends only on inputs before it.
pub fn strict_lower_mask(out_features: usize, in_features: usize) -> Tensor {
    let mut mask = Tensor::zeros(vec![out_features, in_features]);
    for o in 0..out_features {
        for i in 0..in_features.min(o) {
            mask.values_mut()[o * in_features + i] = 1.0;
        }
    }
    mask
}

pub fn all_ones_mask(out_features: usize, in_features: usize) -> Tensor {
    Tensor::new(
        vec![out_features, in_features],
        vec![1.0; out_features * in_features],
    )
    .unwrap()
}

/// Site degree assigned to each hidden unit of the autoregressive decoder.
/// Degrees cycle through 1..=N-1 so every conditional has support.
pub fn hidden_degrees(width: usize, n_sites: usize) -> Vec<usize> {
    assert!(n_sites >= 2, "autoregressive masking needs at least two sites");
    (0..width).map(|u| 1 + u % (n_sites - 1)).collect()
}

/// Mask of the decoder's first layer: input is (z context | x sites). Context
/// columns are always visible; x column j feeds a hidden unit of degree d
/// only when j < d.
pub fn made_input_mask(degrees: &[usize], d_latent: usize, n_sites: usize) -> Tensor {
    let in_features = d_latent + n_sites;
    let mut mask = Tensor::zeros(vec![degrees.len(), in_features]);
    for (u, &deg) in degrees.iter().enumerate() {
        for c in 0..d_latent {
            mask.values_mut()[u * in_features + c] = 1.0;
        }
        for j in 0..n_sites.min(deg) {
            mask.values_mut()[u * in_features + d_latent + j] = 1.0;
        }
    }
    mask
}

/// Mask of a hidden layer whose input is (z context | previous hidden):
/// degree must not decrease along a connection.
pub fn made_hidden_mask(out_degrees: &[usize], in_degrees: &[usize], d_latent: usize) -> Tensor {
    let in_features = d_latent + in_degrees.len();
    let mut mask = Tensor::zeros(vec![out_degrees.len(), in_features]);
    for (u, &deg_out) in out_degrees.iter().enumerate() {
        for c in 0..d_latent {
            mask.values_mut()[u * in_features + c] = 1.0;
        }
        for (v, &deg_in) in in_degrees.iter().enumerate() {
            if deg_in <= deg_out {
                mask.values_mut()[u * in_features + d_latent + v] = 1.0;
            }
        }
    }
    mask
}

/// Output mask: conditional i may only see hidden degrees <= i, so output 0
/// receives context and bias only.
pub fn made_output_mask(n_sites: usize, in_degrees: &[usize], d_latent: usize) -> Tensor {
    let in_features = d_latent + in_degrees.len();
    let mut mask = Tensor::zeros(vec![n_sites, in_features]);
    for i in 0..n_sites {
        for c in 0..d_latent {
            mask.values_mut()[i * in_features + c] = 1.0;
        }
        for (v, &deg_in) in in_degrees.iter().enumerate() {
            if deg_in <= i {
                mask.values_mut()[i * in_features + d_latent + v] = 1.0;
            }
        }
    }
    mask
}
