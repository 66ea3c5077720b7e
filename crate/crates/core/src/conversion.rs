//! ANN to SNN conversion: batch-norm fusion and percentile threshold balancing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ann::AnnParams;
use crate::error::{Error, Result};
use crate::kernels::avgpool2x2_forward;
use crate::network::{LayerSpec, NetworkSpec};
use crate::snn::{lif_update, weighted_apply};
use crate::tensor::Tensor;

/// Thresholds never go below this value.
pub const THRESHOLD_FLOOR: f64 = 1e-3;

/// Parameters of a converted spiking network. `weights`/`biases` are
/// indexed by weighted layer; `thresholds`/`leaks` by hidden (spiking)
/// layer, so the classifier has neither.
#[derive(Clone, Debug, PartialEq)]
pub struct SnnParams {
    pub spec: NetworkSpec,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    pub thresholds: Vec<f64>,
    pub leaks: Vec<f64>,
}

impl SnnParams {
    pub fn hidden_layers(&self) -> usize {
        self.thresholds.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let weighted = self.spec.weighted_layers();
        if self.weights.len() != weighted.len() || self.biases.len() != weighted.len() {
            return Err(Error::Config("weights/biases do not match the weighted layers".into()));
        }
        for (k, &i) in weighted.iter().enumerate() {
            let layer = &self.spec.layers[i];
            self.weights[k].check_shape(&layer.weight_shape().unwrap(), "snn weights")?;
            self.biases[k].check_shape(&[layer.out_channels().unwrap()], "snn bias")?;
        }
        let hidden = weighted.len() - 1;
        if self.thresholds.len() != hidden || self.leaks.len() != hidden {
            return Err(Error::Config(format!("expected {hidden} thresholds and leaks")));
        }
        if let Some(l) = self.thresholds.iter().position(|v| v.is_nan() || *v <= 0.0) {
            return Err(Error::layer(
                weighted[l],
                format!("threshold {} must be positive", self.thresholds[l]),
            ));
        }
        if let Some(l) = self.leaks.iter().position(|v| !(*v > 0.0 && *v <= 1.0)) {
            return Err(Error::layer(
                weighted[l],
                format!("leak {} outside (0, 1]", self.leaks[l]),
            ));
        }
        Ok(())
    }
}

/// A batch-norm-free analog network: ReLU after every hidden weighted layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedNet {
    pub spec: NetworkSpec,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl FusedNet {
    /// Analog eval-mode logits. Also returns each hidden layer's pre-ReLU
    /// values when `keep_preacts` is set.
    pub fn forward_with(&self, batch: &Tensor, keep_preacts: bool) -> Result<(Tensor, Vec<Tensor>)> {
        let n_weighted = self.weights.len();
        let mut x = batch.clone();
        let mut pre = Vec::new();
        let mut k = 0;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv2d(_) | LayerSpec::Linear { .. } => {
                    let z = weighted_apply(layer, &x, &self.weights[k], &self.biases[k], i)?;
                    k += 1;
                    if k == n_weighted {
                        x = z;
                    } else {
                        x = z.map(|v| v.max(0.0));
                        if keep_preacts {
                            pre.push(z);
                        }
                    }
                }
                LayerSpec::Avgpool2x2 => x = avgpool2x2_forward(&x)?,
                LayerSpec::Dropout { .. } => {}
            }
        }
        Ok((x, pre))
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with(batch, false)?.0)
    }
}

/// Folds each hidden layer's batch norm into its weights and a per-channel bias.
pub fn fuse_batchnorm(ann: &AnnParams) -> Result<FusedNet> {
    let weighted = ann.spec.weighted_layers();
    let mut weights = Vec::with_capacity(ann.weights.len());
    let mut biases = Vec::with_capacity(ann.weights.len());
    for (k, (w, bn)) in ann.weights.iter().zip(&ann.bn).enumerate() {
        let out_ch = w.shape()[0];
        let per = w.len() / out_ch;
        match bn {
            None => {
                weights.push(w.clone());
                biases.push(Tensor::zeros(&[out_ch]));
            }
            Some(bn) => {
                let mut fw = w.clone();
                let mut fb = Tensor::zeros(&[out_ch]);
                for ch in 0..out_ch {
                    let gamma = bn.gamma.data()[ch];
                    let var = bn.running_var.data()[ch];
                    if gamma != 0.0 && (var.is_nan() || var <= 0.0) {
                        return Err(Error::Fusion {
                            layer: weighted[k],
                            channel: ch,
                            gamma,
                        });
                    }
                    let scale = gamma / (var + bn.eps).sqrt();
                    fw.data_mut()[ch * per..(ch + 1) * per]
                        .iter_mut()
                        .for_each(|v| *v *= scale);
                    fb.data_mut()[ch] = bn.beta.data()[ch] - scale * bn.running_mean.data()[ch];
                }
                weights.push(fw);
                biases.push(fb);
            }
        }
    }
    Ok(FusedNet {
        spec: ann.spec.clone(),
        weights,
        biases,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    /// Spiking propagation over `timesteps`, thresholds fixed layer by layer.
    Spiking,
    /// One ReLU pass through the fused network.
    Analog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConversionConfig {
    pub percentile: f64,
    pub timesteps: usize,
    pub mode: CalibrationMode,
    /// Samples drawn from the training split for calibration.
    pub calibration_samples: usize,
    /// Per-layer reservoir size limit; unlimited when `None`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reservoir_cap: Option<usize>,
    pub seed: u64,
}

impl Default for ConversionConfig {
    fn default() -> Self {
        ConversionConfig {
            percentile: 90.0,
            timesteps: 5,
            mode: CalibrationMode::Spiking,
            calibration_samples: 256,
            reservoir_cap: None,
            seed: 0,
        }
    }
}

/// Uniform reservoir sample (Algorithm R) of a value stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Reservoir {
    pub values: Vec<f64>,
    pub seen: u64,
    cap: Option<usize>,
}

impl Reservoir {
    pub fn new(cap: Option<usize>) -> Self {
        Reservoir {
            values: Vec::new(),
            seen: 0,
            cap,
        }
    }

    pub fn extend(&mut self, xs: &[f64], rng: &mut impl Rng) {
        match self.cap {
            None => self.values.extend_from_slice(xs),
            Some(cap) => {
                for &x in xs {
                    if self.values.len() < cap {
                        self.values.push(x);
                    } else {
                        let j = rng.random_range(0..=self.seen);
                        if (j as usize) < cap {
                            self.values[j as usize] = x;
                        }
                    }
                    self.seen += 1;
                }
                return;
            }
        }
        self.seen += xs.len() as u64;
    }
}

/// Pre-activation samples per spiking layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PreactivationStats {
    pub layers: Vec<Reservoir>,
}

/// Nearest-rank percentile: the value at 1-based rank `ceil(p/100 * n)` of
/// the ascending order.
pub fn nearest_rank(values: &[f64], percent: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyDataset("percentile of an empty reservoir"));
    }
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(Error::Config(format!("percentile {percent} outside (0, 100]")));
    }
    let n = values.len();
    // Small slack so that e.g. 90% of 100 lands on rank 90 despite rounding.
    let rank = ((percent * n as f64 / 100.0) - 1e-9).ceil().max(1.0) as usize;
    let mut v = values.to_vec();
    let (_, nth, _) = v.select_nth_unstable_by(rank.min(n) - 1, |a, b| a.total_cmp(b));
    Ok(*nth)
}

/// Per-layer threshold, floored at [`THRESHOLD_FLOOR`] with a warning when
/// the selected pre-activation is not positive.
pub fn percentile_threshold(stats: &PreactivationStats, percent: f64) -> Result<Vec<f64>> {
    stats
        .layers
        .iter()
        .enumerate()
        .map(|(l, r)| threshold_from(&r.values, percent, l))
        .collect()
}

fn threshold_from(values: &[f64], percent: f64, layer: usize) -> Result<f64> {
    let v = nearest_rank(values, percent)?;
    if v < THRESHOLD_FLOOR {
        log::warn!("spiking layer {layer}: {percent} percentile pre-activation is {v}; flooring threshold at {THRESHOLD_FLOOR}");
        Ok(THRESHOLD_FLOOR)
    } else {
        Ok(v)
    }
}

const CALIBRATION_CHUNK: usize = 64;

/// Runs the spiking network up to hidden layer `target` and returns the
/// weighted inputs (`W·x + b`) it receives at every timestep.
fn spiking_drives(
    net: &FusedNet,
    thresholds: &[f64],
    batch: &Tensor,
    timesteps: usize,
    target: usize,
) -> Result<Vec<f64>> {
    let spec = &net.spec;
    let weighted = spec.weighted_layers();
    let mut membrane: Vec<Option<Tensor>> = vec![None; target];
    let mut out = Vec::new();
    let first_drive = {
        let mut x = batch.clone();
        for layer in &spec.layers[..weighted[0]] {
            if let LayerSpec::Avgpool2x2 = layer {
                x = avgpool2x2_forward(&x)?;
            }
        }
        weighted_apply(
            &spec.layers[weighted[0]],
            &x,
            &net.weights[0],
            &net.biases[0],
            weighted[0],
        )?
    };
    for _ in 0..timesteps {
        let mut x = Tensor::zeros(&[0]);
        let mut k = 0;
        for (i, layer) in spec.layers.iter().enumerate().skip(weighted[0]) {
            match layer {
                LayerSpec::Conv2d(_) | LayerSpec::Linear { .. } => {
                    let drive = if k == 0 {
                        first_drive.clone()
                    } else {
                        weighted_apply(layer, &x, &net.weights[k], &net.biases[k], i)?
                    };
                    if k == target {
                        out.extend_from_slice(drive.data());
                        break;
                    }
                    let u = membrane[k].get_or_insert_with(|| Tensor::zeros(drive.shape()));
                    let mut spikes = Tensor::zeros(drive.shape());
                    lif_update(u.data_mut(), drive.data(), thresholds[k], 1.0, spikes.data_mut(), None);
                    x = spikes;
                    k += 1;
                }
                LayerSpec::Avgpool2x2 => x = avgpool2x2_forward(&x)?,
                LayerSpec::Dropout { .. } => {}
            }
        }
    }
    Ok(out)
}

fn check_calibration(calibration: &Tensor) -> Result<()> {
    if calibration.is_empty() || calibration.batch() == 0 {
        return Err(Error::EmptyDataset("calibration set"));
    }
    Ok(())
}

/// Collects pre-threshold inputs of every spiking layer over `calibration`.
/// In spiking mode layers are processed input-first; each later layer sees
/// spikes produced with the thresholds already chosen for earlier layers.
pub fn collect_preactivations(
    net: &FusedNet,
    calibration: &Tensor,
    cfg: &ConversionConfig,
) -> Result<PreactivationStats> {
    check_calibration(calibration)?;
    let hidden = net.weights.len() - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let chunks: Vec<Tensor> = chunk_batches(calibration);
    let mut layers: Vec<Reservoir> = (0..hidden).map(|_| Reservoir::new(cfg.reservoir_cap)).collect();
    match cfg.mode {
        CalibrationMode::Analog => {
            for chunk in &chunks {
                let (_, pre) = net.forward_with(chunk, true)?;
                for (r, p) in layers.iter_mut().zip(&pre) {
                    r.extend(p.data(), &mut rng);
                }
            }
        }
        CalibrationMode::Spiking => {
            if cfg.timesteps < 1 {
                return Err(Error::Config("calibration timesteps must be at least 1".into()));
            }
            let mut thresholds = Vec::with_capacity(hidden);
            for (l, reservoir) in layers.iter_mut().enumerate() {
                for chunk in &chunks {
                    let d = spiking_drives(net, &thresholds, chunk, cfg.timesteps, l)?;
                    reservoir.extend(&d, &mut rng);
                }
                thresholds.push(threshold_from(&reservoir.values, cfg.percentile, l)?);
            }
        }
    }
    Ok(PreactivationStats { layers })
}

fn chunk_batches(calibration: &Tensor) -> Vec<Tensor> {
    let n = calibration.batch();
    let per = calibration.per_sample();
    let mut shape = calibration.shape().to_vec();
    (0..n)
        .step_by(CALIBRATION_CHUNK)
        .map(|start| {
            let end = (start + CALIBRATION_CHUNK).min(n);
            shape[0] = end - start;
            Tensor::new(shape.clone(), calibration.data()[start * per..end * per].to_vec()).expect("chunk")
        })
        .collect()
}

/// Fuses batch norm, copies the weights into an SNN of the same topology,
/// sets thresholds by percentile balancing and leaks to 1.
pub fn convert(ann: &AnnParams, calibration: &Tensor, cfg: &ConversionConfig) -> Result<SnnParams> {
    let fused = fuse_batchnorm(ann)?;
    let stats = collect_preactivations(&fused, calibration, cfg)?;
    let thresholds = percentile_threshold(&stats, cfg.percentile)?;
    let hidden = thresholds.len();
    let params = SnnParams {
        spec: fused.spec,
        weights: fused.weights,
        biases: fused.biases,
        thresholds,
        leaks: vec![1.0; hidden],
    };
    params.validate()?;
    Ok(params)
}
