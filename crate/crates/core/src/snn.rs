//! Discrete leaky integrate-and-fire dynamics with direct input encoding.
//!
//! Hidden weighted layers integrate `u = λ·u + W·x + b`, fire where the
//! integrated potential exceeds the threshold (strictly) and subtract the
//! threshold from the neurons that fired within the same timestep. The
//! classifier accumulates `W·x + b` over all timesteps without leak or
//! threshold; its final potential is the logit vector.

use rand::Rng;

use crate::conversion::SnnParams;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{accuracy, avgpool2x2_forward, conv2d_forward, linear_forward};
use crate::network::LayerSpec;
use crate::tensor::Tensor;

/// One LIF update over a layer. Returns `(u_next, spikes)`.
pub fn lif_step(u_prev: &Tensor, weighted_input: &Tensor, threshold: f64, leak: f64) -> Result<(Tensor, Tensor)> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::Config(format!("threshold must be positive, got {threshold}")));
    }
    if u_prev.shape() != weighted_input.shape() {
        return Err(Error::shape(format!(
            "membrane {:?} vs input {:?}",
            u_prev.shape(),
            weighted_input.shape()
        )));
    }
    let mut u = u_prev.clone();
    let mut spikes = Tensor::zeros(u.shape());
    lif_update(
        u.data_mut(),
        weighted_input.data(),
        threshold,
        leak,
        spikes.data_mut(),
        None,
    );
    Ok((u, spikes))
}

/// In-place LIF update; optionally stores the pre-reset potential.
#[inline]
pub(crate) fn lif_update(
    u: &mut [f64],
    input: &[f64],
    threshold: f64,
    leak: f64,
    spikes: &mut [f64],
    pre_reset: Option<&mut [f64]>,
) -> u64 {
    if let Some(pr) = pre_reset {
        for ((p, &uu), &x) in pr.iter_mut().zip(u.iter()).zip(input) {
            *p = leak * uu + x;
        }
    }
    // Selects rather than branches; spike patterns are close to random.
    let mut fired = 0;
    for ((uu, &x), s) in u.iter_mut().zip(input).zip(spikes.iter_mut()) {
        let integrated = leak * *uu + x;
        let spike = integrated > threshold;
        fired += spike as u64;
        *s = spike as u8 as f64;
        *uu = if spike { integrated - threshold } else { integrated };
    }
    fired
}

/// Membrane potentials: one tensor per hidden layer plus the classifier accumulator.
#[derive(Clone, Debug)]
pub struct MembraneState {
    pub hidden: Vec<Tensor>,
    pub output: Tensor,
}

/// Per-sample dropout masks (values `0` or `1/(1-p)`), indexed by network
/// layer; held fixed across all timesteps of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct DropoutMasks {
    masks: Vec<Option<Tensor>>,
}

impl DropoutMasks {
    pub fn none() -> Self {
        DropoutMasks { masks: Vec::new() }
    }

    /// Draws one mask per sample for every dropout layer of `params`.
    pub fn sample(params: &SnnParams, batch: usize, p: f64, rng: &mut impl Rng) -> Result<Self> {
        let shapes = params.spec.shapes()?;
        let keep = 1.0 / (1.0 - p);
        let masks = params
            .spec
            .layers
            .iter()
            .zip(&shapes)
            .map(|(layer, shape)| match layer {
                LayerSpec::Dropout { .. } if p > 0.0 => {
                    let full: Vec<usize> = std::iter::once(batch).chain(shape.iter().copied()).collect();
                    Some(Tensor::from_fn(
                        &full,
                        |_| if rng.random::<f64>() < p { 0.0 } else { keep },
                    ))
                }
                _ => None,
            })
            .collect();
        Ok(DropoutMasks { masks })
    }

    pub fn get(&self, layer: usize) -> Option<&Tensor> {
        self.masks.get(layer).and_then(|m| m.as_ref())
    }
}

/// Spikes of every hidden layer at every timestep: `spikes[layer][t]`.
#[derive(Clone, Debug)]
pub struct SpikeTrace {
    pub timesteps: usize,
    pub spikes: Vec<Vec<Tensor>>,
}

/// Running spike counts per hidden layer over evaluated samples.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeTally {
    pub timesteps: usize,
    /// Neurons per sample in each hidden layer.
    pub neurons: Vec<usize>,
    /// Spikes summed over samples and timesteps.
    pub spikes: Vec<u64>,
    pub samples: usize,
}

impl SpikeTally {
    pub fn new(params: &SnnParams, timesteps: usize) -> Result<Self> {
        let shapes = params.spec.shapes()?;
        let weighted = params.spec.weighted_layers();
        let neurons = weighted[..weighted.len() - 1]
            .iter()
            .map(|&i| shapes[i + 1].iter().product())
            .collect::<Vec<usize>>();
        Ok(SpikeTally {
            timesteps,
            spikes: vec![0; neurons.len()],
            neurons,
            samples: 0,
        })
    }

    pub fn from_trace(trace: &SpikeTrace) -> Self {
        let neurons = trace
            .spikes
            .iter()
            .map(|steps| steps.first().map_or(0, |t| t.per_sample()))
            .collect();
        let spikes = trace
            .spikes
            .iter()
            .map(|steps| {
                steps
                    .iter()
                    .map(|t| t.data().iter().filter(|&&s| s != 0.0).count() as u64)
                    .sum()
            })
            .collect();
        let samples = trace.spikes.first().and_then(|s| s.first()).map_or(0, |t| t.batch());
        SpikeTally {
            timesteps: trace.timesteps,
            neurons,
            spikes,
            samples,
        }
    }

    pub fn merge(&mut self, other: &SpikeTally) {
        assert_eq!(self.neurons, other.neurons, "merging tallies of different networks");
        for (a, b) in self.spikes.iter_mut().zip(&other.spikes) {
            *a += b;
        }
        self.samples += other.samples;
    }

    /// Average spikes per neuron per inference (summed over timesteps).
    pub fn rates(&self) -> Vec<f64> {
        self.spikes
            .iter()
            .zip(&self.neurons)
            .map(|(&s, &n)| {
                if self.samples == 0 || n == 0 {
                    0.0
                } else {
                    s as f64 / (n * self.samples) as f64
                }
            })
            .collect()
    }
}

/// Everything backpropagation through time needs from the forward pass.
#[derive(Clone, Debug)]
pub struct BpttCache {
    pub timesteps: usize,
    /// Time-invariant input of the first weighted layer.
    pub first_input: Tensor,
    /// `inputs[t][k]`: input of weighted layer `k` at timestep `t` (`None` for `k = 0`).
    pub inputs: Vec<Vec<Option<Tensor>>>,
    /// `pre_reset[t][l]`: integrated potential of hidden layer `l` before reset.
    pub pre_reset: Vec<Vec<Tensor>>,
    /// `spikes[t][l]`.
    pub spikes: Vec<Vec<Tensor>>,
    pub masks: DropoutMasks,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Recording {
    Nothing,
    Spikes,
    Bptt,
}

struct Run {
    logits: Tensor,
    tally: SpikeTally,
    trace: Option<SpikeTrace>,
    cache: Option<BpttCache>,
}

pub(crate) fn weighted_apply(layer: &LayerSpec, x: &Tensor, w: &Tensor, b: &Tensor, idx: usize) -> Result<Tensor> {
    let r = match layer {
        LayerSpec::Conv2d(c) => conv2d_forward(x, w, b, c),
        LayerSpec::Linear { .. } => linear_forward(x, w, b),
        _ => unreachable!(),
    };
    r.map_err(|e| Error::layer(idx, e.to_string()))
}

fn apply_mask(x: &mut Tensor, mask: &Tensor) {
    for (v, m) in x.data_mut().iter_mut().zip(mask.data()) {
        *v *= m;
    }
}

fn run(params: &SnnParams, batch: &Tensor, timesteps: usize, masks: &DropoutMasks, rec: Recording) -> Result<Run> {
    if timesteps < 1 {
        return Err(Error::Config("timesteps must be at least 1".into()));
    }
    let spec = &params.spec;
    let expect: Vec<usize> = std::iter::once(batch.batch()).chain(spec.input).collect();
    batch.check_shape(&expect, "snn input")?;
    let n = batch.batch();
    let shapes = spec.shapes()?;
    let weighted = spec.weighted_layers();
    let n_hidden = weighted.len() - 1;
    let out_shape = vec![n, spec.classes()];

    let mut tally = SpikeTally::new(params, timesteps)?;
    tally.samples = n;
    let mut membrane: Vec<Tensor> = weighted[..n_hidden]
        .iter()
        .map(|&i| {
            let s: Vec<usize> = std::iter::once(n).chain(shapes[i + 1].iter().copied()).collect();
            Tensor::zeros(&s)
        })
        .collect();
    let mut acc = Tensor::zeros(&out_shape);

    // Layers in front of the first weighted layer are time-invariant, so its
    // weighted input is computed once.
    let first = weighted[0];
    let mut first_input = batch.clone();
    for (i, layer) in spec.layers[..first].iter().enumerate() {
        match layer {
            LayerSpec::Avgpool2x2 => first_input = avgpool2x2_forward(&first_input)?,
            LayerSpec::Dropout { .. } => {
                if let Some(m) = masks.get(i) {
                    apply_mask(&mut first_input, m);
                }
            }
            _ => unreachable!(),
        }
    }
    let first_drive = weighted_apply(
        &spec.layers[first],
        &first_input,
        &params.weights[0],
        &params.biases[0],
        first,
    )?;

    let mut trace_spikes: Vec<Vec<Tensor>> = vec![Vec::new(); n_hidden];
    let mut cache = (rec == Recording::Bptt).then(|| BpttCache {
        timesteps,
        first_input: first_input.clone(),
        inputs: Vec::with_capacity(timesteps),
        pre_reset: Vec::with_capacity(timesteps),
        spikes: Vec::with_capacity(timesteps),
        masks: masks.clone(),
    });

    for _t in 0..timesteps {
        let mut step_inputs: Vec<Option<Tensor>> = Vec::new();
        let mut step_pre: Vec<Tensor> = Vec::new();
        let mut step_spikes: Vec<Tensor> = Vec::new();
        let mut x = Tensor::zeros(&[0]);
        let mut k = 0;
        for (i, layer) in spec.layers.iter().enumerate().skip(first) {
            match layer {
                LayerSpec::Conv2d(_) | LayerSpec::Linear { .. } => {
                    let drive = if k == 0 {
                        first_drive.clone()
                    } else {
                        weighted_apply(layer, &x, &params.weights[k], &params.biases[k], i)?
                    };
                    if cache.is_some() {
                        step_inputs.push((k > 0).then(|| std::mem::replace(&mut x, Tensor::zeros(&[0]))));
                    }
                    if k == n_hidden {
                        acc.add_scaled(&drive.reshape(&out_shape)?, 1.0);
                    } else {
                        let mut spikes = Tensor::zeros(drive.shape());
                        let mut pre = (rec == Recording::Bptt).then(|| Tensor::zeros(drive.shape()));
                        let fired = lif_update(
                            membrane[k].data_mut(),
                            drive.data(),
                            params.thresholds[k],
                            params.leaks[k],
                            spikes.data_mut(),
                            pre.as_mut().map(|p| p.data_mut()),
                        );
                        tally.spikes[k] += fired;
                        match rec {
                            Recording::Nothing => {}
                            Recording::Spikes => trace_spikes[k].push(spikes.clone()),
                            Recording::Bptt => {
                                step_pre.push(pre.expect("allocated for bptt"));
                                step_spikes.push(spikes.clone());
                            }
                        }
                        x = spikes;
                    }
                    k += 1;
                }
                LayerSpec::Avgpool2x2 => x = avgpool2x2_forward(&x).map_err(|e| Error::layer(i, e.to_string()))?,
                LayerSpec::Dropout { .. } => {
                    if let Some(m) = masks.get(i) {
                        apply_mask(&mut x, m);
                    }
                }
            }
        }
        if let Some(c) = cache.as_mut() {
            c.inputs.push(step_inputs);
            c.pre_reset.push(step_pre);
            c.spikes.push(step_spikes);
        }
    }
    let trace = (rec == Recording::Spikes).then_some(SpikeTrace {
        timesteps,
        spikes: trace_spikes,
    });
    Ok(Run {
        logits: acc,
        tally,
        trace,
        cache,
    })
}

/// Output of [`snn_forward`].
#[derive(Clone, Debug)]
pub struct SnnOutput {
    /// Classifier potential after the last timestep.
    pub logits: Tensor,
    pub tally: SpikeTally,
    /// Per-timestep spikes; only when recording was requested.
    pub trace: Option<SpikeTrace>,
}

/// Runs the network for `timesteps` steps from zero membrane state, feeding
/// the analog `batch` to the first layer at every step.
pub fn snn_forward(
    params: &SnnParams,
    batch: &Tensor,
    timesteps: usize,
    masks: &DropoutMasks,
    record: bool,
) -> Result<SnnOutput> {
    let rec = if record { Recording::Spikes } else { Recording::Nothing };
    let r = run(params, batch, timesteps, masks, rec)?;
    Ok(SnnOutput {
        logits: r.logits,
        tally: r.tally,
        trace: r.trace,
    })
}

/// Forward pass that keeps every intermediate needed by the backward pass.
pub fn forward_for_bptt(
    params: &SnnParams,
    batch: &Tensor,
    timesteps: usize,
    masks: &DropoutMasks,
) -> Result<(Tensor, BpttCache, SpikeTally)> {
    let r = run(params, batch, timesteps, masks, Recording::Bptt)?;
    Ok((r.logits, r.cache.expect("bptt recording"), r.tally))
}

/// Predicted class per sample.
pub fn infer(params: &SnnParams, batch: &Tensor, timesteps: usize) -> Result<Vec<usize>> {
    Ok(snn_forward(params, batch, timesteps, &DropoutMasks::none(), false)?
        .logits
        .argmax_rows())
}

#[derive(Clone, Debug)]
pub struct SnnEval {
    pub accuracy: f64,
    pub tally: SpikeTally,
}

/// Accuracy and spike statistics over a dataset, without dropout.
pub fn evaluate_snn(params: &SnnParams, data: &Dataset, timesteps: usize) -> Result<SnnEval> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("evaluation set"));
    }
    let mut tally = SpikeTally::new(params, timesteps)?;
    let mut hits = 0.0;
    for (x, labels) in data.batches(128) {
        let out = snn_forward(params, &x, timesteps, &DropoutMasks::none(), false)?;
        hits += accuracy(&out.logits, &labels) * labels.len() as f64;
        tally.merge(&out.tally);
    }
    Ok(SnnEval {
        accuracy: hits / data.len() as f64,
        tally,
    })
}
