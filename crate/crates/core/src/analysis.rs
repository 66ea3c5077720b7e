//! Spike-rate, operation, energy and memory-traffic reports, plus global
//! magnitude pruning.

use serde::{Deserialize, Serialize};

use crate::conversion::SnnParams;
use crate::error::{Error, Result};
use crate::network::{LayerSpec, NetworkSpec};
use crate::snn::{SpikeTally, SpikeTrace};

/// MAC count of one layer; zero for pooling and dropout.
pub fn ann_ops_count(layer: &LayerSpec, out_hw: (usize, usize)) -> u64 {
    match layer {
        LayerSpec::Conv2d(c) => (c.kernel_w * c.kernel_h * c.in_channels * out_hw.0 * out_hw.1 * c.out_channels) as u64,
        LayerSpec::Linear { n_in, n_out } => (n_in * n_out) as u64,
        LayerSpec::Avgpool2x2 | LayerSpec::Dropout { .. } => 0,
    }
}

/// MAC counts of every weighted layer of `spec`, in order.
pub fn network_ann_ops(spec: &NetworkSpec) -> Result<Vec<u64>> {
    let shapes = spec.shapes()?;
    Ok(spec
        .weighted_layers()
        .into_iter()
        .map(|i| {
            let out = &shapes[i + 1];
            let hw = if out.len() == 3 { (out[1], out[2]) } else { (1, 1) };
            ann_ops_count(&spec.layers[i], hw)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeRateReport {
    /// Spikes per neuron per inference, summed over timesteps.
    pub per_layer: Vec<f64>,
    /// Layer rates averaged with neuron-count weights.
    pub mean: f64,
}

pub fn spike_rates_from_tally(tally: &SpikeTally) -> Result<SpikeRateReport> {
    if tally.samples == 0 || tally.neurons.is_empty() {
        return Err(Error::EmptyDataset("spike trace"));
    }
    let neurons: usize = tally.neurons.iter().sum();
    let spikes: u64 = tally.spikes.iter().sum();
    Ok(SpikeRateReport {
        per_layer: tally.rates(),
        mean: spikes as f64 / (neurons * tally.samples) as f64,
    })
}

pub fn spike_rates(trace: &SpikeTrace) -> Result<SpikeRateReport> {
    spike_rates_from_tally(&SpikeTally::from_trace(trace))
}

/// One row per weighted layer. `spike_rate` is the rate of the spikes that
/// feed the layer; the first layer sees analog input and is costed as MACs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerOps {
    pub layer: usize,
    pub ann_ops: u64,
    pub spike_rate: f64,
    pub snn_ops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpsCount {
    pub layers: Vec<LayerOps>,
}

impl OpsCount {
    /// `input_rates[q]` is the incoming spike rate of weighted layer `q`
    /// (ignored for `q = 0`).
    pub fn new(spec: &NetworkSpec, input_rates: &[f64]) -> Result<Self> {
        let ann = network_ann_ops(spec)?;
        let weighted = spec.weighted_layers();
        if input_rates.len() + 1 < ann.len() {
            return Err(Error::Config(format!(
                "need {} incoming spike rates, got {}",
                ann.len() - 1,
                input_rates.len()
            )));
        }
        let layers = ann
            .iter()
            .enumerate()
            .map(|(q, &ops)| {
                let rate = if q == 0 { 1.0 } else { input_rates[q - 1] };
                LayerOps {
                    layer: weighted[q],
                    ann_ops: ops,
                    spike_rate: rate,
                    snn_ops: if q == 0 { ops as f64 } else { rate * ops as f64 },
                }
            })
            .collect();
        Ok(OpsCount { layers })
    }

    /// Uses the hidden-layer rates of `tally`: layer `q` is fed by hidden layer `q - 1`.
    pub fn from_tally(spec: &NetworkSpec, tally: &SpikeTally) -> Result<Self> {
        OpsCount::new(spec, &spike_rates_from_tally(tally)?.per_layer)
    }

    pub fn total_ann(&self) -> u64 {
        self.layers.iter().map(|l| l.ann_ops).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyModel {
    /// Energy per multiply-accumulate, pJ.
    pub e_mac: f64,
    /// Energy per addition, pJ.
    pub e_add: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        EnergyModel { e_mac: 4.6, e_add: 0.9 }
    }
}

/// ANN compute energy over SNN compute energy.
pub fn energy_ratio_alpha(ops: &OpsCount, model: &EnergyModel) -> Result<f64> {
    if !(model.e_mac > 0.0 && model.e_add > 0.0) {
        return Err(Error::Config("energy costs must be positive".into()));
    }
    let first = ops.layers.first().ok_or(Error::EmptyDataset("ops count"))?;
    let ann: f64 = ops.layers.iter().map(|l| l.ann_ops as f64).sum::<f64>() * model.e_mac;
    let snn = first.snn_ops * model.e_mac + ops.layers[1..].iter().map(|l| l.snn_ops).sum::<f64>() * model.e_add;
    Ok(ann / snn)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryAccess {
    pub timesteps: usize,
    pub weight_reads: u64,
    pub membrane_reads: u64,
    pub membrane_writes: u64,
    /// Weight reads of one ANN inference.
    pub ann_accesses: u64,
}

impl MemoryAccess {
    pub fn snn_total(&self) -> u64 {
        self.weight_reads + self.membrane_reads + self.membrane_writes
    }

    pub fn ratio_to_ann(&self) -> f64 {
        self.snn_total() as f64 / self.ann_accesses as f64
    }
}

/// Every weight is read once per timestep; each hidden membrane potential is
/// read and written once per timestep, except at `T = 1` where it is never
/// stored.
pub fn memory_access_count(spec: &NetworkSpec, timesteps: usize) -> Result<MemoryAccess> {
    if timesteps < 1 {
        return Err(Error::Config("timesteps must be at least 1".into()));
    }
    let shapes = spec.shapes()?;
    let weighted = spec.weighted_layers();
    let weights: u64 = weighted
        .iter()
        .map(|&i| spec.layers[i].weight_shape().unwrap().iter().product::<usize>() as u64)
        .sum();
    let neurons: u64 = weighted[..weighted.len() - 1]
        .iter()
        .map(|&i| shapes[i + 1].iter().product::<usize>() as u64)
        .sum();
    let t = timesteps as u64;
    let membrane = if timesteps == 1 { 0 } else { neurons * t };
    Ok(MemoryAccess {
        timesteps,
        weight_reads: weights * t,
        membrane_reads: membrane,
        membrane_writes: membrane,
        ann_accesses: weights,
    })
}

/// Keep-flags per weighted layer, row-major like the weight tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneMask {
    pub keep: Vec<Vec<bool>>,
}

impl PruneMask {
    pub fn retained(&self) -> usize {
        self.keep.iter().map(|k| k.iter().filter(|&&b| b).count()).sum()
    }

    pub fn total(&self) -> usize {
        self.keep.iter().map(Vec::len).sum()
    }

    pub fn retained_fraction(&self) -> f64 {
        self.retained() as f64 / self.total() as f64
    }

    /// Zeroes every pruned weight.
    pub fn apply(&self, params: &mut SnnParams) -> Result<()> {
        if self.keep.len() != params.weights.len() {
            return Err(Error::shape(format!(
                "prune mask covers {} layers, network has {}",
                self.keep.len(),
                params.weights.len()
            )));
        }
        for (w, keep) in params.weights.iter_mut().zip(&self.keep) {
            if keep.len() != w.len() {
                return Err(Error::shape(format!(
                    "prune mask of {} entries for {} weights",
                    keep.len(),
                    w.len()
                )));
            }
            for (x, &k) in w.data_mut().iter_mut().zip(keep) {
                if !k {
                    *x = 0.0;
                }
            }
        }
        Ok(())
    }
}

/// Keeps the `ceil(keep_fraction * n)` largest-magnitude weights across all
/// weighted layers (ties broken by position) and zeroes the rest.
pub fn magnitude_prune(params: &SnnParams, keep_fraction: f64) -> Result<(PruneMask, SnnParams)> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Config(format!("keep fraction {keep_fraction} outside (0, 1]")));
    }
    let mut all: Vec<(f64, usize, usize)> = params
        .weights
        .iter()
        .enumerate()
        .flat_map(|(k, w)| w.data().iter().enumerate().map(move |(i, x)| (x.abs(), k, i)))
        .collect();
    let n = all.len();
    let keep_n = ((keep_fraction * n as f64) - 1e-9).ceil().max(1.0) as usize;
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let mut keep: Vec<Vec<bool>> = params.weights.iter().map(|w| vec![false; w.len()]).collect();
    for &(_, k, i) in &all[..keep_n.min(n)] {
        keep[k][i] = true;
    }
    let weighted = params.spec.weighted_layers();
    for (k, flags) in keep.iter().enumerate() {
        if !flags.iter().any(|&b| b) {
            log::warn!(
                "pruning removes every weight of layer {} ({})",
                weighted[k],
                params.spec.layers[weighted[k]].name()
            );
        }
    }
    let mask = PruneMask { keep };
    let mut pruned = params.clone();
    mask.apply(&mut pruned)?;
    Ok((mask, pruned))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ConvSpec;
    use crate::tensor::Tensor;

    #[test]
    fn op_counts() {
        let conv = LayerSpec::Conv2d(ConvSpec::same(2, 4, 3));
        assert_eq!(ann_ops_count(&conv, (8, 8)), 4608);
        assert_eq!(ann_ops_count(&LayerSpec::Linear { n_in: 100, n_out: 10 }, (1, 1)), 1000);
        assert_eq!(ann_ops_count(&LayerSpec::Avgpool2x2, (4, 4)), 0);
    }

    #[test]
    fn memory_at_one_timestep_has_no_membrane_traffic() {
        let spec = NetworkSpec::conv_small([1, 8, 8], 4);
        let m = memory_access_count(&spec, 1).unwrap();
        assert_eq!(m.membrane_reads + m.membrane_writes, 0);
        assert_eq!(m.snn_total(), m.ann_accesses);
    }

    #[test]
    fn prune_keeps_largest() {
        let spec = NetworkSpec::deep_mlp([1, 1, 2], 2, 0, 2);
        let params = SnnParams {
            weights: vec![Tensor::new(vec![2, 2], vec![-0.5, 0.1, -0.05, 0.3]).unwrap()],
            biases: vec![Tensor::zeros(&[2])],
            thresholds: vec![],
            leaks: vec![],
            spec,
        };
        let (mask, pruned) = magnitude_prune(&params, 0.5).unwrap();
        assert_eq!(pruned.weights[0].data(), &[-0.5, 0.0, 0.0, 0.3]);
        assert_eq!(mask.retained(), 2);
        let (_, same) = magnitude_prune(&params, 1.0).unwrap();
        assert_eq!(same, params);
    }
}
