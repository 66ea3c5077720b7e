//! Surrogate-gradient backpropagation through time and SNN training.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::PruneMask;
use crate::conversion::{SnnParams, THRESHOLD_FLOOR};
use crate::data::{augment_batch, DatasetHandle};
use crate::error::{Error, Result};
use crate::kernels::{
    accuracy, avgpool2x2_backward, conv2d_backward_parts, linear_backward_parts, one_hot, softmax_crossentropy, Adam,
    AdamConfig,
};
use crate::network::LayerSpec;
use crate::schedule::StepSchedule;
use crate::snn::{evaluate_snn, forward_for_bptt, BpttCache, DropoutMasks, SpikeTally};
use crate::tensor::Tensor;

/// Smallest leak kept after an update.
pub const LEAK_FLOOR: f64 = 1e-6;

/// How gradients flow through the soft reset `u - v·o`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetGradient {
    /// The spike in the reset term is treated as a constant.
    #[default]
    Detached,
    /// The surrogate derivative also flows through the reset term.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub gamma: f64,
    pub reset: ResetGradient,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            gamma: 0.3,
            reset: ResetGradient::Detached,
        }
    }
}

/// Triangular pseudo-derivative `γ·max(0, 1 - |u - v| / v)`.
#[inline]
pub fn surrogate_grad(u: f64, v: f64, gamma: f64) -> f64 {
    if !v.is_finite() {
        return 0.0;
    }
    gamma * (1.0 - (u - v).abs() / v).max(0.0)
}

/// Gradients laid out like [`SnnParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct SnnGrads {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub thresholds: Vec<f64>,
    pub leaks: Vec<f64>,
}

fn weighted_backward(
    layer: &LayerSpec,
    idx: usize,
    grad: &Tensor,
    input: &Tensor,
    w: &Tensor,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let r = match layer {
        LayerSpec::Conv2d(c) => {
            conv2d_backward_parts(grad, input, w, c, need_input).map(|g| (g.input, g.weights, g.bias))
        }
        LayerSpec::Linear { .. } => linear_backward_parts(grad, input, w, need_input),
        _ => unreachable!(),
    };
    r.map_err(|e| Error::layer(idx, e.to_string()))
}

/// Backpropagates `grad_logits` (gradient of the loss w.r.t. the final
/// classifier potential) through all timesteps of a cached forward pass.
pub fn bptt_backward(
    params: &SnnParams,
    cache: &BpttCache,
    grad_logits: &Tensor,
    cfg: &SurrogateConfig,
) -> Result<SnnGrads> {
    let spec = &params.spec;
    let weighted = spec.weighted_layers();
    let n_hidden = weighted.len() - 1;
    let mut gw: Vec<Tensor> = params.weights.iter().map(|w| Tensor::zeros(w.shape())).collect();
    let mut gb: Vec<Tensor> = params.biases.iter().map(|b| Tensor::zeros(b.shape())).collect();
    let mut gv = vec![0.0; n_hidden];
    let mut gl = vec![0.0; n_hidden];
    // Gradient w.r.t. the post-reset potential, carried backwards in time.
    let mut carry: Vec<Option<Tensor>> = vec![None; n_hidden];
    let mut first_drive_grad: Option<Tensor> = None;

    for t in (0..cache.timesteps).rev() {
        let mut g = grad_logits.clone();
        for k in (0..weighted.len()).rev() {
            let li = weighted[k];
            let layer = &spec.layers[li];
            if k < n_hidden {
                // `g` is the gradient w.r.t. this layer's spikes at time t.
                let v = params.thresholds[k];
                let lambda = params.leaks[k];
                let pre = &cache.pre_reset[t][k];
                let spikes = &cache.spikes[t][k];
                let g_o = g.reshape(pre.shape())?;
                let mut du = Tensor::zeros(pre.shape());
                let (mut dv, mut dl) = (0.0, 0.0);
                let post = carry[k].as_ref();
                let prev = (t > 0).then(|| (&cache.pre_reset[t - 1][k], &cache.spikes[t - 1][k]));
                for i in 0..du.len() {
                    let u = pre.data()[i];
                    let o = spikes.data()[i];
                    let s = surrogate_grad(u, v, cfg.gamma);
                    let go = g_o.data()[i];
                    let gp = post.map_or(0.0, |p| p.data()[i]);
                    let d = match cfg.reset {
                        ResetGradient::Detached => {
                            dv += go * (-s * u / v) - gp * o;
                            go * s + gp
                        }
                        ResetGradient::Full => {
                            dv += go * (-s * u / v) + gp * (s * u - o);
                            go * s + gp * (1.0 - v * s)
                        }
                    };
                    du.data_mut()[i] = d;
                    if let Some((pp, po)) = prev {
                        dl += d * (pp.data()[i] - v * po.data()[i]);
                    }
                }
                gv[k] += dv;
                gl[k] += dl;
                carry[k] = Some(du.map(|x| lambda * x));
                g = du;
            }
            if k == 0 {
                match first_drive_grad.as_mut() {
                    Some(acc) => acc.add_scaled(&g, 1.0),
                    None => first_drive_grad = Some(g),
                }
                break;
            }
            let input = cache.inputs[t][k]
                .as_ref()
                .expect("cached input of a later weighted layer");
            let (gi, w, b) = weighted_backward(layer, li, &g, input, &params.weights[k], true)?;
            gw[k].add_scaled(&w, 1.0);
            gb[k].add_scaled(&b, 1.0);
            g = gi.expect("input gradient requested");
            for i in (weighted[k - 1] + 1..li).rev() {
                match &spec.layers[i] {
                    LayerSpec::Avgpool2x2 => g = avgpool2x2_backward(&g)?,
                    LayerSpec::Dropout { .. } => {
                        if let Some(m) = cache.masks.get(i) {
                            for (x, m) in g.data_mut().iter_mut().zip(m.data()) {
                                *x *= m;
                            }
                        }
                    }
                    _ => unreachable!(),
                }
            }
        }
    }
    if let Some(g) = first_drive_grad {
        let (_, w, b) = weighted_backward(
            &spec.layers[weighted[0]],
            weighted[0],
            &g,
            &cache.first_input,
            &params.weights[0],
            false,
        )?;
        gw[0] = w;
        gb[0] = b;
    }
    Ok(SnnGrads {
        weights: gw,
        biases: gb,
        thresholds: gv,
        leaks: gl,
    })
}

/// Mean cross-entropy of the final classifier potential and its gradients.
pub fn snn_loss_and_grads(
    params: &SnnParams,
    batch: &Tensor,
    labels: &[usize],
    timesteps: usize,
    masks: &DropoutMasks,
    cfg: &SurrogateConfig,
) -> Result<(f64, Tensor, SnnGrads, SpikeTally)> {
    let (logits, cache, tally) = forward_for_bptt(params, batch, timesteps, masks)?;
    let (loss, grad) = softmax_crossentropy(&logits, &one_hot(labels, params.spec.classes()))?;
    let grads = bptt_backward(params, &cache, &grad, cfg)?;
    Ok((loss, logits, grads, tally))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnnTrainConfig {
    pub epochs: usize,
    pub initial_lr: f64,
    pub lr_drop_fractions: Vec<f64>,
    pub lr_divisor: f64,
    pub dropout_p: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub train_thresholds: bool,
    pub train_leaks: bool,
    pub surrogate_gamma: f64,
    pub reset_gradient: ResetGradient,
    pub augment: bool,
}

impl Default for SnnTrainConfig {
    fn default() -> Self {
        SnnTrainConfig {
            epochs: 300,
            initial_lr: 1e-4,
            lr_drop_fractions: vec![0.6, 0.8, 0.9],
            lr_divisor: 5.0,
            dropout_p: 0.2,
            batch_size: 32,
            seed: 0,
            train_thresholds: true,
            train_leaks: true,
            surrogate_gamma: 0.3,
            reset_gradient: ResetGradient::Detached,
            augment: false,
        }
    }
}

impl SnnTrainConfig {
    pub fn schedule(&self) -> StepSchedule {
        StepSchedule {
            initial_lr: self.initial_lr,
            drop_fractions: self.lr_drop_fractions.clone(),
            divisor: self.lr_divisor,
        }
    }

    pub fn surrogate(&self) -> SurrogateConfig {
        SurrogateConfig {
            gamma: self.surrogate_gamma,
            reset: self.reset_gradient,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("snn epochs and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "snn dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if !(self.surrogate_gamma >= 0.0 && self.surrogate_gamma.is_finite()) {
            return Err(Error::Config(format!(
                "surrogate gamma {} must be finite and >= 0",
                self.surrogate_gamma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnnEpochMetrics {
    pub epoch: usize,
    pub timesteps: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub thresholds: Vec<f64>,
    pub leaks: Vec<f64>,
    /// Spikes per neuron per inference on the training batches.
    pub spike_rates: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SnnTraining {
    /// Parameters at the epoch with the highest validation accuracy.
    pub params: SnnParams,
    pub best_epoch: usize,
    pub metrics: Vec<SnnEpochMetrics>,
}

fn param_groups(p: &mut SnnParams) -> Vec<&mut [f64]> {
    let mut groups: Vec<&mut [f64]> = Vec::new();
    for (w, b) in p.weights.iter_mut().zip(p.biases.iter_mut()) {
        groups.push(w.data_mut());
        groups.push(b.data_mut());
    }
    groups.push(&mut p.thresholds);
    groups.push(&mut p.leaks);
    groups
}

fn grad_groups(g: &SnnGrads) -> Vec<&[f64]> {
    let mut groups: Vec<&[f64]> = Vec::new();
    for (w, b) in g.weights.iter().zip(&g.biases) {
        groups.push(w.data());
        groups.push(b.data());
    }
    groups.push(&g.thresholds);
    groups.push(&g.leaks);
    groups
}

/// Adam training of weights, biases, thresholds and leaks at a fixed
/// number of timesteps. Leaks stay frozen when `timesteps == 1`, where they
/// have no effect. When `prune` is given, pruned weights are held at zero.
pub fn train_snn(
    mut params: SnnParams,
    config: &SnnTrainConfig,
    data: &DatasetHandle,
    timesteps: usize,
    prune: Option<&PruneMask>,
    rng: &mut ChaCha8Rng,
) -> Result<SnnTraining> {
    config.validate()?;
    params.validate()?;
    if timesteps < 1 {
        return Err(Error::Config("timesteps must be at least 1".into()));
    }
    if data.train.is_empty() {
        return Err(Error::EmptyDataset("snn training split"));
    }
    if let Some(mask) = prune {
        mask.apply(&mut params)?;
    }
    let schedule = config.schedule();
    let surrogate = config.surrogate();
    let mut opt = Adam::new(AdamConfig::default());
    let n_weighted = params.weights.len();
    let mut frozen = vec![false; 2 * n_weighted];
    frozen.push(!config.train_thresholds);
    frozen.push(!config.train_leaks || timesteps == 1);

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, SnnParams)> = None;
    for epoch in 0..config.epochs {
        let lr = schedule.lr_at(epoch, config.epochs);
        order.shuffle(rng);
        let (mut loss_sum, mut hits) = (0.0, 0.0);
        let mut tally = SpikeTally::new(&params, timesteps)?;
        for chunk in order.chunks(config.batch_size) {
            let (mut x, labels) = data.train.batch(chunk);
            if config.augment {
                augment_batch(&mut x, rng);
            }
            let masks = DropoutMasks::sample(&params, chunk.len(), config.dropout_p, rng)?;
            let (loss, logits, grads, t) = snn_loss_and_grads(&params, &x, &labels, timesteps, &masks, &surrogate)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            loss_sum += loss * chunk.len() as f64;
            hits += accuracy(&logits, &labels) * chunk.len() as f64;
            tally.merge(&t);
            opt.step(&mut param_groups(&mut params), &grad_groups(&grads), &frozen, lr);
            for v in params.thresholds.iter_mut() {
                *v = v.max(THRESHOLD_FLOOR);
            }
            for l in params.leaks.iter_mut() {
                *l = l.clamp(LEAK_FLOOR, 1.0);
            }
            if let Some(mask) = prune {
                mask.apply(&mut params)?;
            }
        }
        let n = data.train.len() as f64;
        let val_acc = if data.val.is_empty() {
            f64::NAN
        } else {
            evaluate_snn(&params, &data.val, timesteps)?.accuracy
        };
        log::info!(
            "snn T={timesteps} epoch {epoch}: lr={lr:e} loss={:.4} train_acc={:.4} val_acc={val_acc:.4} v={:?} leak={:?}",
            loss_sum / n,
            hits / n,
            params.thresholds,
            params.leaks
        );
        metrics.push(SnnEpochMetrics {
            epoch,
            timesteps,
            lr,
            train_loss: loss_sum / n,
            train_acc: hits / n,
            val_acc,
            thresholds: params.thresholds.clone(),
            leaks: params.leaks.clone(),
            spike_rates: tally.rates(),
        });
        let score = if val_acc.is_nan() { f64::NEG_INFINITY } else { val_acc };
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) || data.val.is_empty() {
            best = Some((score, epoch, params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    Ok(SnnTraining {
        params,
        best_epoch,
        metrics,
    })
}
