//! AdaBelief optimization loop with gamma scheduling, seeded mini-batching
//! and the active-latent-neuron diagnostic.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::models::{batch_to_tensor, VaeModel, Variant};
use crate::objective::{total_objective_with_grads_and_stats, LossBreakdown, LossWeights};
use crate::spinsim::{GridDataset, SpinConfiguration};
use crate::{Error, Result};

pub const DEFAULT_ACTIVE_SIGMA_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub variant: Variant,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        if self.gamma_min > self.gamma_max {
            return Err(Error::invalid("gamma_min must be <= gamma_max"));
        }
        self.weights.validate()
    }
}

/// Per-step loss record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub breakdown: LossBreakdown,
    pub gamma_now: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingHistory {
    pub steps: Vec<StepRecord>,
    /// Mean encoder sigma per latent dimension, one row per epoch.
    pub sigma_per_epoch: Vec<Vec<f64>>,
}

impl TrainingHistory {
    /// CSV with columns (epoch, step, reconstruction_nll, MI, TC, dimKL,
    /// gamma_now, total).
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("epoch,step,reconstruction_nll,mi,tc,dim_kl,gamma_now,total\n");
        for r in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.step,
                r.breakdown.reconstruction_nll,
                r.breakdown.mutual_information,
                r.breakdown.total_correlation,
                r.breakdown.dimension_wise_kl,
                r.gamma_now,
                r.breakdown.total
            ));
        }
        out
    }
}

/// AdaBelief optimizer state (first moment and belief second moment per
/// parameter tensor).
#[derive(Debug, Clone)]
pub struct AdaBeliefState {
    m: Vec<Tensor>,
    s: Vec<Tensor>,
    step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdaBeliefState {
    pub fn new(shapes: &[Vec<usize>]) -> Self {
        Self {
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            s: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-16,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }
}

/// One AdaBelief update:
/// m <- b1 m + (1-b1) g; s <- b2 s + (1-b2)(g-m)^2 + eps;
/// theta <- theta - lr * m_hat / (sqrt(s_hat) + eps), with bias correction.
pub fn adabelief_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdaBeliefState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid("optimizer state/parameter count mismatch"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for ((param, grad), (m, s)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.s.iter_mut()))
    {
        if param.shape() != grad.shape() {
            return Err(Error::shape(
                format!("{:?}", param.shape()),
                format!("{:?}", grad.shape()),
            ));
        }
        for i in 0..param.len() {
            let g = grad.values()[i];
            let mv = state.beta1 * m.values()[i] + (1.0 - state.beta1) * g;
            let diff = g - mv;
            let sv = state.beta2 * s.values()[i] + (1.0 - state.beta2) * diff * diff
                + state.epsilon;
            m.values_mut()[i] = mv;
            s.values_mut()[i] = sv;
            let m_hat = mv / bc1;
            let s_hat = sv / bc2;
            param.values_mut()[i] -= lr * m_hat / (s_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// Linear schedule from gamma_min at step 0 to gamma_max at total_steps.
pub fn gamma_schedule(step: usize, total_steps: usize, gamma_min: f64, gamma_max: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("total_steps must be positive"));
    }
    if step > total_steps {
        return Err(Error::invalid("step must be <= total_steps"));
    }
    Ok(gamma_min + (gamma_max - gamma_min) * step as f64 / total_steps as f64)
}

/// Trains in place over all configurations of the dataset, shuffled across
/// grid points each epoch. Deterministic given the config seed.
pub fn train(
    model: &mut VaeModel,
    dataset: &GridDataset,
    config: &TrainConfig,
) -> Result<TrainingHistory> {
    config.validate()?;
    if dataset.n_sites() != model.n_sites() {
        return Err(Error::invalid(format!(
            "dataset n_sites {} does not match model {}",
            dataset.n_sites(),
            model.n_sites()
        )));
    }
    if model.config.variant != config.variant {
        return Err(Error::invalid("model and train config variant mismatch"));
    }

    let data: Vec<SpinConfiguration> = dataset
        .records
        .iter()
        .flat_map(|r| r.samples.iter().cloned())
        .collect();
    if data.is_empty() {
        return Err(Error::invalid("dataset holds no configurations"));
    }
    let dataset_size = data.len();
    let steps_per_epoch = dataset_size.div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;

    // dVAE trains with reconstruction only: all KL weights forced to zero.
    let weights = match config.variant {
        Variant::CpVae => config.weights,
        Variant::DVae => LossWeights::zero(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut indices: Vec<usize> = (0..dataset_size).collect();
    let mut history = TrainingHistory::default();
    let mut opt = AdaBeliefState::new(
        &model
            .params()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect::<Vec<_>>(),
    );
    let d_latent = model.d_latent();
    let mut global_step = 0usize;

    for epoch in 0..config.epochs {
        indices.shuffle(&mut rng);
        let mut sigma_sum = vec![0.0; d_latent];
        let mut sigma_count = 0usize;

        for chunk in indices.chunks(config.batch_size) {
            // The TC estimator needs at least two posteriors; fold a trailing
            // singleton into nothing rather than crash.
            if chunk.len() < 2 && config.variant == Variant::CpVae {
                continue;
            }
            let batch: Vec<SpinConfiguration> =
                chunk.iter().map(|&i| data[i].clone()).collect();
            let mut eps = Tensor::zeros(vec![batch.len(), d_latent]);
            for v in eps.values_mut() {
                *v = rng.sample(StandardNormal);
            }
            let gamma_now =
                gamma_schedule(global_step, total_steps, config.gamma_min, config.gamma_max)?;
            let (breakdown, grads, lv) = total_objective_with_grads_and_stats(
                model,
                &batch,
                &eps,
                &weights,
                gamma_now,
                dataset_size,
            )?;
            if !breakdown.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::NonFiniteLoss { step: global_step });
            }

            // Epoch sigma diagnostic from the same encoder pass.
            for bi in 0..batch.len() {
                for j in 0..d_latent {
                    sigma_sum[j] += (0.5 * lv.at2(bi, j)).exp();
                }
            }
            sigma_count += batch.len();

            let mut slots = model.params_mut();
            let mut refs: Vec<&mut Tensor> = slots.iter_mut().map(|(_, t)| &mut **t).collect();
            adabelief_step(&mut refs, &grads, &mut opt, config.learning_rate)?;

            history.steps.push(StepRecord {
                epoch,
                step: global_step,
                breakdown,
                gamma_now,
            });
            global_step += 1;
        }

        let denom = sigma_count.max(1) as f64;
        history
            .sigma_per_epoch
            .push(sigma_sum.iter().map(|s| s / denom).collect());
    }
    Ok(history)
}

/// Mean encoder sigma per latent dimension over every configuration of the
/// dataset.
pub fn mean_sigma_per_dimension(model: &VaeModel, dataset: &GridDataset) -> Vec<f64> {
    let d = model.d_latent();
    let mut sum = vec![0.0; d];
    let mut count = 0usize;
    for record in &dataset.records {
        for chunk in record.samples.chunks(512) {
            let (_, lv) = model.encode_batch(&batch_to_tensor(chunk));
            for bi in 0..chunk.len() {
                for j in 0..d {
                    sum[j] += (0.5 * lv.at2(bi, j)).exp();
                }
            }
            count += chunk.len();
        }
    }
    let denom = count.max(1) as f64;
    sum.iter().map(|s| s / denom).collect()
}

/// Latent dimensions whose mean sigma stays below the threshold (passive
/// dimensions collapse to the prior's sigma = 1).
pub fn active_latent_neurons(model: &VaeModel, dataset: &GridDataset, threshold: f64) -> Vec<usize> {
    mean_sigma_per_dimension(model, dataset)
        .iter()
        .enumerate()
        .filter(|(_, &s)| s < threshold)
        .map(|(i, _)| i)
        .collect()
}
