//! Encoder, reparameterized latent, autoregressive Bernoulli decoder (cpVAE)
//! and the deterministic baseline decoder (dVAE).

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    all_ones_mask, hidden_degrees, kernels, made_hidden_mask, made_input_mask, made_output_mask,
    Conv1dCircular, Dense, MaskedDense, Tape, Tensor, Var,
};
use crate::spinsim::SpinConfiguration;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    CpVae,
    DVae,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::CpVae => write!(f, "cpvae"),
            Variant::DVae => write!(f, "dvae"),
        }
    }
}

/// Network sizes: conv encoder with two circular k=3 convolutions and two
/// dense heads, masked-dense decoder with 3 hidden layers of width 80.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_sites: usize,
    pub d_latent: usize,
    pub conv_channels: usize,
    pub head_hidden: usize,
    pub decoder_hidden_layers: usize,
    pub decoder_hidden_width: usize,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn cpvae(n_sites: usize) -> Self {
        Self {
            n_sites,
            d_latent: 5,
            conv_channels: 32,
            head_hidden: 64,
            decoder_hidden_layers: 3,
            decoder_hidden_width: 80,
            variant: Variant::CpVae,
        }
    }

    /// Baseline with the KL-free objective; latent dimension is fixed to the
    /// number of factors expected for the experiment (1 or 2).
    pub fn dvae(n_sites: usize, d_latent: usize) -> Self {
        Self {
            d_latent,
            variant: Variant::DVae,
            ..Self::cpvae(n_sites)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sites < 2 {
            return Err(Error::invalid("model requires n_sites >= 2"));
        }
        if self.d_latent == 0 {
            return Err(Error::invalid("d_latent must be positive"));
        }
        if self.decoder_hidden_layers == 0 || self.decoder_hidden_width == 0 {
            return Err(Error::invalid("decoder must have hidden layers"));
        }
        Ok(())
    }
}

/// Per-input encoder outputs.
#[derive(Debug, Clone)]
pub struct LatentStats {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl LatentStats {
    pub fn sigma(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| (0.5 * lv).exp()).collect()
    }
}

/// A reparameterized latent draw together with the noise that produced it.
#[derive(Debug, Clone)]
pub struct LatentSample {
    pub z: Vec<f64>,
    pub epsilon: Vec<f64>,
}

impl LatentSample {
    pub fn from_z(z: Vec<f64>) -> Self {
        let epsilon = vec![0.0; z.len()];
        Self { z, epsilon }
    }
}

/// Decoder outputs p_i = p(x_i = +1 | x_<i, z), clamped into (0, 1).
#[derive(Debug, Clone)]
pub struct ConditionalProbabilities {
    pub p: Vec<f64>,
}

/// z_i = mu_i + exp(log_var_i / 2) * eps_i.
pub fn reparameterize(stats: &LatentStats, epsilon: Vec<f64>) -> LatentSample {
    assert_eq!(stats.mu.len(), epsilon.len());
    let z = stats
        .mu
        .iter()
        .zip(&stats.log_var)
        .zip(&epsilon)
        .map(|((mu, lv), eps)| mu + (0.5 * lv).exp() * eps)
        .collect();
    LatentSample { z, epsilon }
}

pub fn reparameterize_with_rng(stats: &LatentStats, rng: &mut ChaCha8Rng) -> LatentSample {
    let epsilon = (0..stats.mu.len()).map(|_| rng.sample(StandardNormal)).collect();
    reparameterize(stats, epsilon)
}

/// Tape handles for every parameter, in the same order as [`VaeModel::params`].
pub struct BoundParams {
    encoder: Vec<Var>,
    decoder: Vec<(Var, Var)>,
}

impl BoundParams {
    pub fn all(&self) -> Vec<Var> {
        let mut vars = self.encoder.clone();
        for (w, b) in &self.decoder {
            vars.push(*w);
            vars.push(*b);
        }
        vars
    }
}

#[derive(Debug, Clone)]
pub struct VaeModel {
    pub config: ModelConfig,
    conv1: Conv1dCircular,
    conv2: Conv1dCircular,
    mu_hidden: Dense,
    mu_out: Dense,
    lv_hidden: Dense,
    lv_out: Dense,
    decoder: Vec<MaskedDense>,
}

impl VaeModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.conv_channels;
        let conv1 = Conv1dCircular::init(1, c, 3, &mut rng);
        let conv2 = Conv1dCircular::init(c, c, 3, &mut rng);
        let mu_hidden = Dense::init(c, config.head_hidden, &mut rng);
        let mu_out = Dense::init(config.head_hidden, config.d_latent, &mut rng);
        let lv_hidden = Dense::init(c, config.head_hidden, &mut rng);
        let lv_out = Dense::init(config.head_hidden, config.d_latent, &mut rng);

        let decoder = build_decoder(&config, &mut rng);
        Ok(Self {
            config,
            conv1,
            conv2,
            mu_hidden,
            mu_out,
            lv_hidden,
            lv_out,
            decoder,
        })
    }

    pub fn n_sites(&self) -> usize {
        self.config.n_sites
    }

    pub fn d_latent(&self) -> usize {
        self.config.d_latent
    }

    /// Named parameters in canonical (stable) order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("encoder.conv1.w".into(), &self.conv1.w),
            ("encoder.conv1.b".into(), &self.conv1.b),
            ("encoder.conv2.w".into(), &self.conv2.w),
            ("encoder.conv2.b".into(), &self.conv2.b),
            ("encoder.mu_hidden.w".into(), &self.mu_hidden.w),
            ("encoder.mu_hidden.b".into(), &self.mu_hidden.b),
            ("encoder.mu_out.w".into(), &self.mu_out.w),
            ("encoder.mu_out.b".into(), &self.mu_out.b),
            ("encoder.lv_hidden.w".into(), &self.lv_hidden.w),
            ("encoder.lv_hidden.b".into(), &self.lv_hidden.b),
            ("encoder.lv_out.w".into(), &self.lv_out.w),
            ("encoder.lv_out.b".into(), &self.lv_out.b),
        ];
        for (i, layer) in self.decoder.iter().enumerate() {
            out.push((format!("decoder.{i}.w"), &layer.w));
            out.push((format!("decoder.{i}.b"), &layer.b));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("encoder.conv1.w".into(), &mut self.conv1.w),
            ("encoder.conv1.b".into(), &mut self.conv1.b),
            ("encoder.conv2.w".into(), &mut self.conv2.w),
            ("encoder.conv2.b".into(), &mut self.conv2.b),
            ("encoder.mu_hidden.w".into(), &mut self.mu_hidden.w),
            ("encoder.mu_hidden.b".into(), &mut self.mu_hidden.b),
            ("encoder.mu_out.w".into(), &mut self.mu_out.w),
            ("encoder.mu_out.b".into(), &mut self.mu_out.b),
            ("encoder.lv_hidden.w".into(), &mut self.lv_hidden.w),
            ("encoder.lv_hidden.b".into(), &mut self.lv_hidden.b),
            ("encoder.lv_out.w".into(), &mut self.lv_out.w),
            ("encoder.lv_out.b".into(), &mut self.lv_out.b),
        ];
        for (i, layer) in self.decoder.iter_mut().enumerate() {
            out.push((format!("decoder.{i}.w"), &mut layer.w));
            out.push((format!("decoder.{i}.b"), &mut layer.b));
        }
        out
    }

    /// Overwrites all parameters, in canonical order.
    pub fn set_params(&mut self, values: &[Tensor]) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                values.len()
            )));
        }
        for ((_, slot), value) in slots.iter_mut().zip(values) {
            if slot.shape() != value.shape() {
                return Err(Error::shape(
                    format!("{:?}", slot.shape()),
                    format!("{:?}", value.shape()),
                ));
            }
            **slot = value.clone();
        }
        Ok(())
    }

    /// Sets the bias of the decoder output layer (handy for forcing
    /// degenerate conditionals in diagnostics).
    pub fn decoder_output_bias_mut(&mut self) -> &mut Tensor {
        &mut self.decoder.last_mut().unwrap().b
    }

    /// Registers every parameter as a tape leaf.
    pub fn bind(&self, tape: &Tape) -> BoundParams {
        let encoder = vec![
            tape.leaf(self.conv1.w.clone()),
            tape.leaf(self.conv1.b.clone()),
            tape.leaf(self.conv2.w.clone()),
            tape.leaf(self.conv2.b.clone()),
            tape.leaf(self.mu_hidden.w.clone()),
            tape.leaf(self.mu_hidden.b.clone()),
            tape.leaf(self.mu_out.w.clone()),
            tape.leaf(self.mu_out.b.clone()),
            tape.leaf(self.lv_hidden.w.clone()),
            tape.leaf(self.lv_hidden.b.clone()),
            tape.leaf(self.lv_out.w.clone()),
            tape.leaf(self.lv_out.b.clone()),
        ];
        let decoder = self
            .decoder
            .iter()
            .map(|l| (tape.leaf(l.w.clone()), tape.leaf(l.b.clone())))
            .collect();
        BoundParams { encoder, decoder }
    }

    /// Encoder forward on a tape; `x` is a (B, N) node of ±1 spins.
    /// Returns (mu, log_var), each (B, d_latent).
    pub fn encode_tape(&self, tape: &Tape, bound: &BoundParams, x: Var) -> Result<(Var, Var)> {
        let batch = tape.shape(x)[0];
        let n = self.config.n_sites;
        let e = &bound.encoder;
        let x3 = tape.reshape(x, vec![batch, 1, n])?;
        let h1 = tape.relu(tape.conv1d_circular(x3, e[0], e[1])?);
        let h2 = tape.relu(tape.conv1d_circular(h1, e[2], e[3])?);
        let pooled = tape.global_avg_pool(h2)?;
        let mu_h = tape.relu(tape.dense(pooled, e[4], e[5])?);
        let mu = tape.dense(mu_h, e[6], e[7])?;
        let lv_h = tape.relu(tape.dense(pooled, e[8], e[9])?);
        let log_var = tape.dense(lv_h, e[10], e[11])?;
        Ok((mu, log_var))
    }

    /// Decoder forward on a tape: z (B, d) context plus teacher-forced spins
    /// x (B, N); returns pre-activation logits (B, N).
    pub fn decode_logits_tape(
        &self,
        tape: &Tape,
        bound: &BoundParams,
        z: Var,
        x: Var,
    ) -> Result<Var> {
        let n_layers = self.decoder.len();
        let mut h = x;
        for (i, (layer, (w, b))) in self.decoder.iter().zip(&bound.decoder).enumerate() {
            let input = tape.concat_cols(z, h)?;
            let out = tape.masked_dense(input, *w, *b, Arc::clone(&layer.mask))?;
            h = if i + 1 < n_layers { tape.selu(out) } else { out };
        }
        Ok(h)
    }

    /// Tape-free batched encoder; input (B, N), outputs (mu, log_var).
    pub fn encode_batch(&self, x: &Tensor) -> (Tensor, Tensor) {
        let batch = x.shape()[0];
        let n = self.config.n_sites;
        let x3 = Tensor::new(vec![batch, 1, n], x.values().to_vec()).unwrap();
        let h1 = kernels::relu(&kernels::conv1d_circular(&x3, &self.conv1.w, &self.conv1.b));
        let h2 = kernels::relu(&kernels::conv1d_circular(&h1, &self.conv2.w, &self.conv2.b));
        let pooled = kernels::global_avg_pool(&h2);
        let mu_h = kernels::relu(&kernels::dense(&pooled, &self.mu_hidden.w, &self.mu_hidden.b));
        let mu = kernels::dense(&mu_h, &self.mu_out.w, &self.mu_out.b);
        let lv_h = kernels::relu(&kernels::dense(&pooled, &self.lv_hidden.w, &self.lv_hidden.b));
        let lv = kernels::dense(&lv_h, &self.lv_out.w, &self.lv_out.b);
        (mu, lv)
    }

    /// Encoder output for a single configuration.
    pub fn encode(&self, x: &SpinConfiguration) -> Result<LatentStats> {
        if x.len() != self.config.n_sites {
            return Err(Error::shape(
                format!("configuration of length {}", self.config.n_sites),
                format!("length {}", x.len()),
            ));
        }
        let xt = batch_to_tensor(std::slice::from_ref(x));
        let (mu, lv) = self.encode_batch(&xt);
        Ok(LatentStats {
            mu: mu.values().to_vec(),
            log_var: lv.values().to_vec(),
        })
    }

    /// Tape-free batched decoder logits; z (B, d), x (B, N).
    pub fn decode_logits_batch(&self, z: &Tensor, x: &Tensor) -> Tensor {
        let n_layers = self.decoder.len();
        let mut h = x.clone();
        for (i, layer) in self.decoder.iter().enumerate() {
            let input = kernels::concat_cols(z, &h);
            let out = kernels::masked_dense(&input, &layer.w, &layer.b, &layer.mask);
            h = if i + 1 < n_layers { kernels::selu(&out) } else { out };
        }
        h
    }

    /// Teacher-forced conditionals p_i = p(x_i = +1 | x_<i, z). cpVAE only.
    pub fn decode_conditionals(
        &self,
        z: &LatentSample,
        x: &SpinConfiguration,
    ) -> Result<ConditionalProbabilities> {
        self.require_variant(Variant::CpVae, "decode_conditionals")?;
        if x.len() != self.config.n_sites {
            return Err(Error::shape(
                format!("configuration of length {}", self.config.n_sites),
                format!("length {}", x.len()),
            ));
        }
        let zt = Tensor::new(vec![1, self.config.d_latent], z.z.clone())?;
        let xt = batch_to_tensor(std::slice::from_ref(x));
        let logits = self.decode_logits_batch(&zt, &xt);
        let p = logits
            .values()
            .iter()
            .map(|&l| kernels::clamp_probability(1.0 / (1.0 + (-l).exp())))
            .collect();
        Ok(ConditionalProbabilities { p })
    }

    /// Exact ancestral sampling from the decoder's joint distribution for a
    /// fixed latent. cpVAE only.
    pub fn autoregressive_sample(
        &self,
        z: &LatentSample,
        count: usize,
        seed: u64,
    ) -> Result<Vec<SpinConfiguration>> {
        self.require_variant(Variant::CpVae, "autoregressive_sample")?;
        if count == 0 {
            return Err(Error::invalid("sample count must be >= 1"));
        }
        let n = self.config.n_sites;
        let d = self.config.d_latent;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut zt = Tensor::zeros(vec![count, d]);
        for bi in 0..count {
            zt.values_mut()[bi * d..(bi + 1) * d].copy_from_slice(&z.z);
        }
        // Sites not yet drawn stay 0; the mask removes them exactly.
        let mut x = Tensor::zeros(vec![count, n]);
        for site in 0..n {
            let logits = self.decode_logits_batch(&zt, &x);
            for bi in 0..count {
                let p = kernels::clamp_probability(
                    1.0 / (1.0 + (-logits.at2(bi, site)).exp()),
                );
                let u: f64 = rng.gen_range(0.0..1.0);
                x.values_mut()[bi * n + site] = if u < p { 1.0 } else { -1.0 };
            }
        }
        (0..count)
            .map(|bi| {
                SpinConfiguration::new(
                    (0..n).map(|j| if x.at2(bi, j) > 0.0 { 1 } else { -1 }).collect(),
                )
            })
            .collect()
    }

    /// Ancestral sampling with an independent latent per output row;
    /// z (B, d) -> B configurations. cpVAE only.
    pub fn autoregressive_sample_batch(
        &self,
        z: &Tensor,
        seed: u64,
    ) -> Result<Vec<SpinConfiguration>> {
        self.require_variant(Variant::CpVae, "autoregressive_sample_batch")?;
        let count = z.shape()[0];
        let n = self.config.n_sites;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Tensor::zeros(vec![count, n]);
        for site in 0..n {
            let logits = self.decode_logits_batch(z, &x);
            for bi in 0..count {
                let p = kernels::clamp_probability(
                    1.0 / (1.0 + (-logits.at2(bi, site)).exp()),
                );
                let u: f64 = rng.gen_range(0.0..1.0);
                x.values_mut()[bi * n + site] = if u < p { 1.0 } else { -1.0 };
            }
        }
        (0..count)
            .map(|bi| {
                SpinConfiguration::new(
                    (0..n).map(|j| if x.at2(bi, j) > 0.0 { 1 } else { -1 }).collect(),
                )
            })
            .collect()
    }

    /// Deterministic reconstruction in [-1, 1] per site. dVAE only.
    pub fn dvae_decode(&self, z: &LatentSample) -> Result<Vec<f64>> {
        self.require_variant(Variant::DVae, "dvae_decode")?;
        let zt = Tensor::new(vec![1, self.config.d_latent], z.z.clone())?;
        let x = Tensor::zeros(vec![1, self.config.n_sites]);
        let logits = self.decode_logits_batch(&zt, &x);
        Ok(logits.values().iter().map(|&l| l.tanh()).collect())
    }

    /// Batched dVAE reconstruction; z (B, d) -> (B, N) in [-1, 1].
    pub fn dvae_decode_batch(&self, z: &Tensor) -> Result<Tensor> {
        self.require_variant(Variant::DVae, "dvae_decode_batch")?;
        let x = Tensor::zeros(vec![z.shape()[0], self.config.n_sites]);
        Ok(kernels::tanh(&self.decode_logits_batch(z, &x)))
    }

    fn require_variant(&self, expected: Variant, op: &str) -> Result<()> {
        if self.config.variant != expected {
            return Err(Error::UnsupportedVariant {
                variant: self.config.variant.to_string(),
                op: op.to_string(),
            });
        }
        Ok(())
    }
}

fn build_decoder(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Vec<MaskedDense> {
    let n = config.n_sites;
    let d = config.d_latent;
    let width = config.decoder_hidden_width;
    let degrees = hidden_degrees(width, n);
    let mut layers = Vec::with_capacity(config.decoder_hidden_layers + 1);
    for i in 0..config.decoder_hidden_layers {
        let mask = match (config.variant, i) {
            (Variant::CpVae, 0) => made_input_mask(&degrees, d, n),
            (Variant::CpVae, _) => made_hidden_mask(&degrees, &degrees, d),
            (Variant::DVae, 0) => all_ones_mask(width, d + n),
            (Variant::DVae, _) => all_ones_mask(width, d + width),
        };
        layers.push(MaskedDense::init(Arc::new(mask), rng));
    }
    let out_mask = match config.variant {
        Variant::CpVae => made_output_mask(n, &degrees, d),
        Variant::DVae => all_ones_mask(n, d + width),
    };
    layers.push(MaskedDense::init(Arc::new(out_mask), rng));
    layers
}

/// Packs configurations into a (B, N) tensor of ±1 values.
pub fn batch_to_tensor(xs: &[SpinConfiguration]) -> Tensor {
    let batch = xs.len();
    let n = if batch > 0 { xs[0].len() } else { 0 };
    let mut values = Vec::with_capacity(batch * n);
    for x in xs {
        values.extend(x.sites().iter().map(|&s| f64::from(s)));
    }
    Tensor::new(vec![batch, n], values).unwrap()
}
