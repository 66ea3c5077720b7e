//! The batch-normalized ReLU network trained before conversion.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_batch, Dataset, DatasetHandle};
use crate::error::{Error, Result};
use crate::kernels::{
    accuracy, avgpool2x2_backward, avgpool2x2_forward, conv2d_backward_parts, conv2d_forward, he_init_with,
    linear_backward_parts, linear_forward, one_hot, softmax_crossentropy, SgdMomentum,
};
use crate::network::{LayerSpec, NetworkSpec};
use crate::schedule::StepSchedule;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch-norm parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Weights of every weighted layer (no bias terms) and a batch-norm record
/// for each hidden weighted layer. The classifier has no batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnParams {
    pub spec: NetworkSpec,
    pub weights: Vec<Tensor>,
    pub bn: Vec<Option<BatchNorm>>,
}

impl AnnParams {
    /// He-initialized weights, identity batch norm.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(spec, &mut rng)
    }

    pub fn init_with(spec: &NetworkSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let weighted = spec.weighted_layers();
        let last = weighted.len() - 1;
        let mut weights = Vec::with_capacity(weighted.len());
        let mut bn = Vec::with_capacity(weighted.len());
        for (k, &i) in weighted.iter().enumerate() {
            let layer = &spec.layers[i];
            weights.push(he_init_with(layer, rng)?);
            bn.push((k != last).then(|| BatchNorm::identity(layer.out_channels().unwrap())));
        }
        Ok(AnnParams {
            spec: spec.clone(),
            weights,
            bn,
        })
    }

    fn groups_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for (w, bn) in self.weights.iter_mut().zip(self.bn.iter_mut()) {
            out.push(w.data_mut());
            if let Some(bn) = bn {
                out.push(bn.gamma.data_mut());
                out.push(bn.beta.data_mut());
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, dropout active.
    Train,
    /// Running statistics, no dropout.
    Eval,
}

/// Channel axis is 1; everything after it is spatial.
fn channel_layout(t: &Tensor) -> (usize, usize, usize) {
    let n = t.batch();
    let c = t.shape()[1];
    (n, c, t.per_sample() / c)
}

struct BnForward {
    out: Tensor,
    xhat: Tensor,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

fn bn_forward_batch(x: &Tensor, bn: &BatchNorm) -> BnForward {
    let (n, c, s) = channel_layout(x);
    let count = (n * s) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for sample in x.data().chunks_exact(c * s) {
        for (ch, plane) in sample.chunks_exact(s).enumerate() {
            mean[ch] += plane.iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for sample in x.data().chunks_exact(c * s) {
        for (ch, plane) in sample.chunks_exact(s).enumerate() {
            var[ch] += plane.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
    let mut xhat = x.clone();
    let mut out = x.clone();
    for (xs, ys) in xhat
        .data_mut()
        .chunks_exact_mut(c * s)
        .zip(out.data_mut().chunks_exact_mut(c * s))
    {
        for ch in 0..c {
            let (g, b) = (bn.gamma.data()[ch], bn.beta.data()[ch]);
            for j in ch * s..(ch + 1) * s {
                let h = (xs[j] - mean[ch]) * inv_std[ch];
                xs[j] = h;
                ys[j] = g * h + b;
            }
        }
    }
    BnForward {
        out,
        xhat,
        inv_std,
        mean,
        var,
    }
}

fn bn_forward_eval(x: &Tensor, bn: &BatchNorm) -> Tensor {
    let (_, c, s) = channel_layout(x);
    let mut out = x.clone();
    for ys in out.data_mut().chunks_exact_mut(c * s) {
        for ch in 0..c {
            let scale = bn.gamma.data()[ch] / (bn.running_var.data()[ch] + bn.eps).sqrt();
            let shift = bn.beta.data()[ch] - scale * bn.running_mean.data()[ch];
            for y in &mut ys[ch * s..(ch + 1) * s] {
                *y = scale * *y + shift;
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_gamma, grad_beta)` for training-mode batch norm.
fn bn_backward(grad_out: &Tensor, xhat: &Tensor, inv_std: &[f64], gamma: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (_, c, s) = channel_layout(grad_out);
    let count = (grad_out.batch() * s) as f64;
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for (gs, hs) in grad_out.data().chunks_exact(c * s).zip(xhat.data().chunks_exact(c * s)) {
        for ch in 0..c {
            for j in ch * s..(ch + 1) * s {
                sum_g[ch] += gs[j];
                sum_gx[ch] += gs[j] * hs[j];
            }
        }
    }
    let mut gx = Tensor::zeros(grad_out.shape());
    for ((gs, hs), out) in grad_out
        .data()
        .chunks_exact(c * s)
        .zip(xhat.data().chunks_exact(c * s))
        .zip(gx.data_mut().chunks_exact_mut(c * s))
    {
        for ch in 0..c {
            let k = gamma.data()[ch] * inv_std[ch] / count;
            for j in ch * s..(ch + 1) * s {
                out[j] = k * (count * gs[j] - sum_g[ch] - hs[j] * sum_gx[ch]);
            }
        }
    }
    (
        gx,
        Tensor::new(vec![c], sum_gx).unwrap(),
        Tensor::new(vec![c], sum_g).unwrap(),
    )
}

fn weighted_forward(layer: &LayerSpec, x: &Tensor, w: &Tensor, layer_idx: usize) -> Result<Tensor> {
    let out = match layer {
        LayerSpec::Conv2d(c) => conv2d_forward(x, w, &Tensor::zeros(&[c.out_channels]), c),
        LayerSpec::Linear { n_out, .. } => linear_forward(x, w, &Tensor::zeros(&[*n_out])),
        _ => unreachable!("weighted_forward on unweighted layer"),
    };
    out.map_err(|e| Error::layer(layer_idx, e.to_string()))
}

fn dropout_mask(shape: &[usize], p: f64, rng: &mut impl Rng) -> Tensor {
    let keep = 1.0 / (1.0 - p);
    Tensor::from_fn(shape, |_| if rng.random::<f64>() < p { 0.0 } else { keep })
}

/// Batch statistics kept for the backward pass and running-stat update.
struct BnStats {
    /// Normalized pre-gamma activation.
    xhat: Tensor,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

enum Cached {
    Weighted {
        input: Tensor,
        bn: Option<BnStats>,
        /// Post-activation output, used for the ReLU derivative.
        output: Tensor,
    },
    Pool,
    Dropout(Tensor),
}

/// Intermediate values from a training-mode forward pass.
pub struct AnnForward {
    pub logits: Tensor,
    cache: Vec<Cached>,
}

impl AnnForward {
    /// Batch-normalized, pre-gamma activations of the `k`-th weighted layer.
    pub fn normalized(&self, k: usize) -> Option<&Tensor> {
        self.cache
            .iter()
            .filter_map(|c| match c {
                Cached::Weighted { bn, .. } => Some(bn.as_ref().map(|b| &b.xhat)),
                _ => None,
            })
            .nth(k)
            .flatten()
    }
}

/// Gradients aligned with [`AnnParams`].
#[derive(Clone, Debug)]
pub struct AnnGrads {
    pub weights: Vec<Tensor>,
    pub gamma: Vec<Option<Tensor>>,
    pub beta: Vec<Option<Tensor>>,
}

impl AnnGrads {
    fn groups(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for ((w, g), b) in self.weights.iter().zip(&self.gamma).zip(&self.beta) {
            out.push(w.data());
            if let (Some(g), Some(b)) = (g, b) {
                out.push(g.data());
                out.push(b.data());
            }
        }
        out
    }
}

/// Conv/linear, batch norm, ReLU per hidden block; the classifier is a plain
/// linear map. In `Train` mode batch statistics are used and dropout
/// masks are drawn from `rng` at rate `dropout_p` (the layer's own rate when `None`).
pub fn ann_forward_cached(
    params: &AnnParams,
    batch: &Tensor,
    mode: Mode,
    dropout_p: Option<f64>,
    rng: &mut impl Rng,
) -> Result<AnnForward> {
    let spec = &params.spec;
    let expect: Vec<usize> = std::iter::once(batch.batch()).chain(spec.input).collect();
    batch.check_shape(&expect, "ann input")?;
    let mut x = batch.clone();
    let mut cache = Vec::with_capacity(spec.layers.len());
    let mut k = 0;
    for (i, layer) in spec.layers.iter().enumerate() {
        match layer {
            LayerSpec::Conv2d(_) | LayerSpec::Linear { .. } => {
                let z = weighted_forward(layer, &x, &params.weights[k], i)?;
                let (y, bn_cache) = match (&params.bn[k], mode) {
                    (Some(bn), Mode::Train) => {
                        let BnForward {
                            out,
                            xhat,
                            inv_std,
                            mean,
                            var,
                        } = bn_forward_batch(&z, bn);
                        (
                            out,
                            Some(BnStats {
                                xhat,
                                inv_std,
                                mean,
                                var,
                            }),
                        )
                    }
                    (Some(bn), Mode::Eval) => (bn_forward_eval(&z, bn), None),
                    (None, _) => (z, None),
                };
                let y = if params.bn[k].is_some() {
                    y.map(|v| v.max(0.0))
                } else {
                    y
                };
                let input = std::mem::replace(&mut x, y);
                cache.push(Cached::Weighted {
                    input,
                    bn: bn_cache,
                    output: x.clone(),
                });
                k += 1;
            }
            LayerSpec::Avgpool2x2 => {
                x = avgpool2x2_forward(&x).map_err(|e| Error::layer(i, e.to_string()))?;
                cache.push(Cached::Pool);
            }
            LayerSpec::Dropout { p } => {
                let p = dropout_p.unwrap_or(*p);
                if mode == Mode::Train && p > 0.0 {
                    let mask = dropout_mask(x.shape(), p, rng);
                    for (v, m) in x.data_mut().iter_mut().zip(mask.data()) {
                        *v *= m;
                    }
                    cache.push(Cached::Dropout(mask));
                } else {
                    cache.push(Cached::Dropout(Tensor::full(x.shape(), 1.0)));
                }
            }
        }
    }
    Ok(AnnForward { logits: x, cache })
}

/// Logits of `batch`. Train mode draws no dropout masks here; use
/// [`ann_forward_cached`] for stochastic passes.
pub fn ann_forward(params: &AnnParams, batch: &Tensor, mode: Mode) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = if mode == Mode::Train { Some(0.0) } else { None };
    Ok(ann_forward_cached(params, batch, mode, p, &mut rng)?.logits)
}

/// Backpropagates `grad_logits` through a training-mode forward pass.
pub fn ann_backward(params: &AnnParams, fwd: &AnnForward, grad_logits: &Tensor) -> Result<AnnGrads> {
    let spec = &params.spec;
    let n_weighted = params.weights.len();
    let mut gw: Vec<Option<Tensor>> = vec![None; n_weighted];
    let mut gg: Vec<Option<Tensor>> = vec![None; n_weighted];
    let mut gb: Vec<Option<Tensor>> = vec![None; n_weighted];
    let mut g = grad_logits.clone();
    let mut k = n_weighted;
    for (i, (layer, cached)) in spec.layers.iter().zip(&fwd.cache).enumerate().rev() {
        match (layer, cached) {
            (LayerSpec::Conv2d(_) | LayerSpec::Linear { .. }, Cached::Weighted { input, bn, output }) => {
                k -= 1;
                if let Some(norm) = &params.bn[k] {
                    for (gv, o) in g.data_mut().iter_mut().zip(output.data()) {
                        if *o <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    let BnStats { xhat, inv_std, .. } = bn
                        .as_ref()
                        .ok_or_else(|| Error::Config("ann_backward needs a training-mode forward pass".into()))?;
                    let (gx, dgamma, dbeta) = bn_backward(&g, xhat, inv_std, &norm.gamma);
                    g = gx;
                    gg[k] = Some(dgamma);
                    gb[k] = Some(dbeta);
                }
                let need_input = k > 0;
                let (gi, w) = match layer {
                    LayerSpec::Conv2d(c) => {
                        let r = conv2d_backward_parts(&g, input, &params.weights[k], c, need_input)
                            .map_err(|e| Error::layer(i, e.to_string()))?;
                        (r.input, r.weights)
                    }
                    _ => {
                        let (gi, w, _) = linear_backward_parts(&g, input, &params.weights[k], need_input)
                            .map_err(|e| Error::layer(i, e.to_string()))?;
                        (gi, w)
                    }
                };
                gw[k] = Some(w);
                match gi {
                    Some(gi) => g = gi,
                    None => break,
                }
            }
            (LayerSpec::Avgpool2x2, Cached::Pool) => {
                g = avgpool2x2_backward(&g)?;
            }
            (LayerSpec::Dropout { .. }, Cached::Dropout(mask)) => {
                let mask = mask.clone().reshape(g.shape())?;
                for (v, m) in g.data_mut().iter_mut().zip(mask.data()) {
                    *v *= m;
                }
            }
            _ => unreachable!("cache out of step with layers"),
        }
    }
    Ok(AnnGrads {
        weights: gw
            .into_iter()
            .map(|w| w.expect("every weighted layer visited"))
            .collect(),
        gamma: gg,
        beta: gb,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnTrainConfig {
    pub epochs: usize,
    pub initial_lr: f64,
    pub lr_drop_fractions: Vec<f64>,
    pub lr_divisor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub dropout_p: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Random pad-4 crops and horizontal flips (meant for CIFAR-style images).
    pub augment: bool,
}

impl Default for AnnTrainConfig {
    fn default() -> Self {
        AnnTrainConfig {
            epochs: 500,
            initial_lr: 0.01,
            lr_drop_fractions: vec![0.45, 0.7, 0.9],
            lr_divisor: 5.0,
            momentum: 0.9,
            weight_decay: 0.0005,
            dropout_p: 0.5,
            batch_size: 64,
            seed: 0,
            augment: false,
        }
    }
}

impl AnnTrainConfig {
    pub fn schedule(&self) -> StepSchedule {
        StepSchedule {
            initial_lr: self.initial_lr,
            drop_fractions: self.lr_drop_fractions.clone(),
            divisor: self.lr_divisor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("ann epochs and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "ann dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug)]
pub struct AnnTraining {
    /// Parameters at the epoch with the highest validation accuracy.
    pub params: AnnParams,
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
}

fn update_running_stats(params: &mut AnnParams, fwd: &AnnForward) {
    let stats = fwd.cache.iter().filter_map(|c| match c {
        Cached::Weighted { bn, .. } => Some(bn),
        _ => None,
    });
    for (bn, cached) in params.bn.iter_mut().zip(stats) {
        if let (Some(bn), Some(BnStats { xhat, mean, var, .. })) = (bn, cached) {
            let m = (xhat.batch() * xhat.per_sample() / bn.channels()) as f64;
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for ch in 0..bn.channels() {
                let rm = &mut bn.running_mean.data_mut()[ch];
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[ch];
                let rv = &mut bn.running_var.data_mut()[ch];
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var[ch] * unbias;
            }
        }
    }
}

/// He initialization from `config.seed`, then [`fit_ann`].
pub fn train_ann(spec: &NetworkSpec, config: &AnnTrainConfig, data: &DatasetHandle) -> Result<AnnTraining> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params = AnnParams::init_with(spec, &mut rng)?;
    fit_ann(params, config, data, &mut rng)
}

/// SGD-momentum training with the step schedule; keeps the best-validation
/// parameters (the final ones when the validation split is empty).
pub fn fit_ann(
    mut params: AnnParams,
    config: &AnnTrainConfig,
    data: &DatasetHandle,
    rng: &mut ChaCha8Rng,
) -> Result<AnnTraining> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptyDataset("ann training split"));
    }
    let schedule = config.schedule();
    let mut opt = SgdMomentum::new(config.momentum, config.weight_decay);
    let classes = params.spec.classes();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, AnnParams)> = None;
    for epoch in 0..config.epochs {
        let lr = schedule.lr_at(epoch, config.epochs);
        order.shuffle(rng);
        let (mut loss_sum, mut hits) = (0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let (mut x, labels) = data.train.batch(chunk);
            if config.augment {
                augment_batch(&mut x, rng);
            }
            let fwd = ann_forward_cached(&params, &x, Mode::Train, Some(config.dropout_p), rng)?;
            let (loss, grad) = softmax_crossentropy(&fwd.logits, &one_hot(&labels, classes))?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            loss_sum += loss * chunk.len() as f64;
            hits += accuracy(&fwd.logits, &labels) * chunk.len() as f64;
            let grads = ann_backward(&params, &fwd, &grad)?;
            update_running_stats(&mut params, &fwd);
            opt.step(&mut params.groups_mut(), &grads.groups(), lr);
        }
        let n = data.train.len() as f64;
        let val_acc = if data.val.is_empty() {
            f64::NAN
        } else {
            evaluate_ann(&params, &data.val)?
        };
        metrics.push(EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_acc: hits / n,
            val_acc,
        });
        log::info!(
            "ann epoch {epoch}: lr={lr:e} loss={:.4} train_acc={:.4} val_acc={val_acc:.4}",
            loss_sum / n,
            hits / n
        );
        let score = if val_acc.is_nan() { f64::NEG_INFINITY } else { val_acc };
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) || data.val.is_empty() {
            best = Some((score, epoch, params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    Ok(AnnTraining {
        params,
        best_epoch,
        metrics,
    })
}

pub fn ann_logits(params: &AnnParams, data: &Dataset) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(data.len() * params.spec.classes());
    for (x, _) in data.batches(256) {
        rows.extend(ann_forward(params, &x, Mode::Eval)?.into_data());
    }
    Tensor::new(vec![data.len(), params.spec.classes()], rows)
}

/// Top-1 accuracy in eval mode.
pub fn evaluate_ann(params: &AnnParams, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("evaluation set"));
    }
    Ok(accuracy(&ann_logits(params, data)?, &data.labels))
}
