//! Shared test oracles: a scalar reverse-mode tape and an unrolled SNN built on it.
#![allow(dead_code, clippy::needless_range_loop)]

use iirsnn::bptt::{ResetGradient, SnnGrads};
use iirsnn::snn::DropoutMasks;
use iirsnn::{LayerSpec, NetworkSpec, SnnParams, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Var = usize;

/// Scalar computation graph with reverse accumulation.
#[derive(Default)]
pub struct Tape {
    vals: Vec<f64>,
    parents: Vec<Vec<(Var, f64)>>,
}

impl Tape {
    pub fn leaf(&mut self, v: f64) -> Var {
        self.vals.push(v);
        self.parents.push(Vec::new());
        self.vals.len() - 1
    }

    fn node(&mut self, v: f64, parents: Vec<(Var, f64)>) -> Var {
        self.vals.push(v);
        self.parents.push(parents);
        self.vals.len() - 1
    }

    pub fn val(&self, a: Var) -> f64 {
        self.vals[a]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.node(self.vals[a] + self.vals[b], vec![(a, 1.0), (b, 1.0)])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.node(self.vals[a] - self.vals[b], vec![(a, 1.0), (b, -1.0)])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.vals[a], self.vals[b]);
        self.node(x * y, vec![(a, y), (b, x)])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.node(self.vals[a] * c, vec![(a, c)])
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let v = xs.iter().map(|&x| self.vals[x]).sum();
        self.node(v, xs.iter().map(|&x| (x, 1.0)).collect())
    }

    /// Heaviside of `u - v` with the triangular pseudo-derivative taken
    /// through `z = u / v - 1`: `do/dz = v·s`, hence `do/du = s`, `do/dv = -s·u/v`.
    pub fn spike(&mut self, u: Var, v: Var, gamma: f64) -> Var {
        let (uu, vv) = (self.vals[u], self.vals[v]);
        let s = gamma * (1.0 - (uu - vv).abs() / vv).max(0.0);
        let o = if uu > vv { 1.0 } else { 0.0 };
        self.node(o, vec![(u, s), (v, -s * uu / vv)])
    }

    pub fn grad(&self, seeds: &[(Var, f64)]) -> Vec<f64> {
        let mut g = vec![0.0; self.vals.len()];
        for &(v, s) in seeds {
            g[v] += s;
        }
        for i in (0..self.vals.len()).rev() {
            if g[i] == 0.0 {
                continue;
            }
            for &(p, local) in &self.parents[i] {
                g[p] += g[i] * local;
            }
        }
        g
    }
}

struct Act {
    shape: Vec<usize>,   // per sample, without batch
    vars: Vec<Vec<Var>>, // [sample][flat]
}

/// Unrolls the network for `timesteps` on the tape and returns the
/// gradients of `sum(grad_logits * logits)` plus the logits.
pub fn oracle(
    params: &SnnParams,
    x: &Tensor,
    timesteps: usize,
    masks: &DropoutMasks,
    grad_logits: &Tensor,
    reset: ResetGradient,
    gamma: f64,
) -> (SnnGrads, Vec<f64>) {
    let mut tape = Tape::default();
    let w: Vec<Vec<Var>> = params
        .weights
        .iter()
        .map(|t| t.data().iter().map(|&v| tape.leaf(v)).collect())
        .collect();
    let b: Vec<Vec<Var>> = params
        .biases
        .iter()
        .map(|t| t.data().iter().map(|&v| tape.leaf(v)).collect())
        .collect();
    let th: Vec<Var> = params.thresholds.iter().map(|&v| tape.leaf(v)).collect();
    let lk: Vec<Var> = params.leaks.iter().map(|&v| tape.leaf(v)).collect();
    let n = x.batch();
    let input_shape: Vec<usize> = params.spec.input.to_vec();
    let inputs: Vec<Vec<Var>> = (0..n)
        .map(|s| x.sample(s).iter().map(|&v| tape.leaf(v)).collect())
        .collect();
    let n_weighted = params.weights.len();
    let zero = tape.leaf(0.0);
    let mut membranes: Vec<Option<Vec<Vec<Var>>>> = vec![None; n_weighted - 1];
    let mut acc: Option<Vec<Vec<Var>>> = None;

    for _ in 0..timesteps {
        let mut a = Act {
            shape: input_shape.clone(),
            vars: inputs.clone(),
        };
        let mut k = 0;
        for (i, layer) in params.spec.layers.iter().enumerate() {
            match layer {
                LayerSpec::Linear { n_in, n_out } => {
                    let vars = (0..n)
                        .map(|s| {
                            (0..*n_out)
                                .map(|o| {
                                    let terms: Vec<Var> =
                                        (0..*n_in).map(|j| tape.mul(w[k][o * n_in + j], a.vars[s][j])).collect();
                                    let t = tape.sum(&terms);
                                    tape.add(t, b[k][o])
                                })
                                .collect()
                        })
                        .collect();
                    a = Act {
                        shape: vec![*n_out],
                        vars,
                    };
                    a = lif_or_acc(
                        &mut tape,
                        a,
                        k,
                        n_weighted,
                        &mut membranes,
                        &mut acc,
                        &th,
                        &lk,
                        zero,
                        reset,
                        gamma,
                    );
                    k += 1;
                }
                LayerSpec::Conv2d(c) => {
                    let (h, wd) = (a.shape[1], a.shape[2]);
                    let ho = (h + 2 * c.padding - c.kernel_h) / c.stride + 1;
                    let wo = (wd + 2 * c.padding - c.kernel_w) / c.stride + 1;
                    let mut vars = Vec::with_capacity(n);
                    for s in 0..n {
                        let mut out = Vec::with_capacity(c.out_channels * ho * wo);
                        for oc in 0..c.out_channels {
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let mut terms = Vec::new();
                                    for ic in 0..c.in_channels {
                                        for ky in 0..c.kernel_h {
                                            for kx in 0..c.kernel_w {
                                                let iy = (oy * c.stride + ky) as isize - c.padding as isize;
                                                let ix = (ox * c.stride + kx) as isize - c.padding as isize;
                                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                                    continue;
                                                }
                                                let wi =
                                                    ((oc * c.in_channels + ic) * c.kernel_h + ky) * c.kernel_w + kx;
                                                let xi = (ic * h + iy as usize) * wd + ix as usize;
                                                terms.push(tape.mul(w[k][wi], a.vars[s][xi]));
                                            }
                                        }
                                    }
                                    let t = tape.sum(&terms);
                                    out.push(tape.add(t, b[k][oc]));
                                }
                            }
                        }
                        vars.push(out);
                    }
                    a = Act {
                        shape: vec![c.out_channels, ho, wo],
                        vars,
                    };
                    a = lif_or_acc(
                        &mut tape,
                        a,
                        k,
                        n_weighted,
                        &mut membranes,
                        &mut acc,
                        &th,
                        &lk,
                        zero,
                        reset,
                        gamma,
                    );
                    k += 1;
                }
                LayerSpec::Avgpool2x2 => {
                    let (ch, h, wd) = (a.shape[0], a.shape[1], a.shape[2]);
                    let vars = a
                        .vars
                        .iter()
                        .map(|v| {
                            let mut out = Vec::new();
                            for c in 0..ch {
                                for y in 0..h / 2 {
                                    for xx in 0..wd / 2 {
                                        let cells: Vec<Var> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                                            .iter()
                                            .map(|(dy, dx)| v[(c * h + 2 * y + dy) * wd + 2 * xx + dx])
                                            .collect();
                                        let s = tape.sum(&cells);
                                        out.push(tape.scale(s, 0.25));
                                    }
                                }
                            }
                            out
                        })
                        .collect();
                    a = Act {
                        shape: vec![ch, h / 2, wd / 2],
                        vars,
                    };
                }
                LayerSpec::Dropout { .. } => {
                    if let Some(m) = masks.get(i) {
                        for (s, v) in a.vars.iter_mut().enumerate() {
                            for (j, x) in v.iter_mut().enumerate() {
                                *x = tape.scale(*x, m.sample(s)[j]);
                            }
                        }
                    }
                }
            }
        }
    }
    let acc = acc.expect("classifier visited");
    let mut seeds = Vec::new();
    let mut logits = Vec::new();
    for (s, row) in acc.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            seeds.push((v, grad_logits.sample(s)[j]));
            logits.push(tape.val(v));
        }
    }
    let g = tape.grad(&seeds);
    let shaped = |vars: &[Vec<Var>], like: &[Tensor]| -> Vec<Tensor> {
        vars.iter()
            .zip(like)
            .map(|(vs, t)| Tensor::new(t.shape().to_vec(), vs.iter().map(|&v| g[v]).collect()).unwrap())
            .collect()
    };
    let grads = SnnGrads {
        weights: shaped(&w, &params.weights),
        biases: shaped(&b, &params.biases),
        thresholds: th.iter().map(|&v| g[v]).collect(),
        leaks: lk.iter().map(|&v| g[v]).collect(),
    };
    (grads, logits)
}

#[allow(clippy::too_many_arguments)]
fn lif_or_acc(
    tape: &mut Tape,
    drive: Act,
    k: usize,
    n_weighted: usize,
    membranes: &mut [Option<Vec<Vec<Var>>>],
    acc: &mut Option<Vec<Vec<Var>>>,
    th: &[Var],
    lk: &[Var],
    zero: Var,
    reset: ResetGradient,
    gamma: f64,
) -> Act {
    if k == n_weighted - 1 {
        let next = match acc.take() {
            None => drive.vars.clone(),
            Some(prev) => prev
                .iter()
                .zip(&drive.vars)
                .map(|(p, d)| p.iter().zip(d).map(|(&a, &b)| tape.add(a, b)).collect())
                .collect(),
        };
        *acc = Some(next);
        return drive;
    }
    let prev = membranes[k]
        .take()
        .unwrap_or_else(|| drive.vars.iter().map(|v| vec![zero; v.len()]).collect());
    let mut new_mem = Vec::new();
    let mut spikes = Vec::new();
    for (p, d) in prev.iter().zip(&drive.vars) {
        let mut m_row = Vec::new();
        let mut s_row = Vec::new();
        for (&u_prev, &inp) in p.iter().zip(d) {
            let leaked = tape.mul(lk[k], u_prev);
            let u = tape.add(leaked, inp);
            let o = tape.spike(u, th[k], gamma);
            let reset_term = match reset {
                ResetGradient::Detached => {
                    let o_const = tape.leaf(tape.val(o));
                    tape.mul(th[k], o_const)
                }
                ResetGradient::Full => tape.mul(th[k], o),
            };
            m_row.push(tape.sub(u, reset_term));
            s_row.push(o);
        }
        new_mem.push(m_row);
        spikes.push(s_row);
    }
    membranes[k] = Some(new_mem);
    Act {
        shape: drive.shape,
        vars: spikes,
    }
}

/// `max|a - b| / max|b|` over a group of tensors; `0` when both are zero.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn flat(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Worst relative error over the four parameter groups.
pub fn grads_rel_err(ours: &SnnGrads, reference: &SnnGrads) -> f64 {
    [
        rel_err(&flat(&ours.weights), &flat(&reference.weights)),
        rel_err(&flat(&ours.biases), &flat(&reference.biases)),
        rel_err(&ours.thresholds, &reference.thresholds),
        rel_err(&ours.leaks, &reference.leaks),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// A small random spiking MLP (optionally with dropout between layers)
/// together with an input batch drawn so that neurons actually fire.
pub fn random_mlp(rng: &mut ChaCha8Rng, weighted: usize, dropout: bool) -> (SnnParams, Tensor) {
    let n_in = rng.random_range(2..=6);
    let mut layers = Vec::new();
    let mut width = n_in;
    for k in 0..weighted {
        let out = if k + 1 == weighted {
            rng.random_range(2..=5)
        } else {
            rng.random_range(2..=20)
        };
        layers.push(LayerSpec::Linear {
            n_in: width,
            n_out: out,
        });
        if dropout && k + 1 < weighted {
            layers.push(LayerSpec::Dropout { p: 0.3 });
        }
        width = out;
    }
    let spec = NetworkSpec {
        name: "oracle-mlp".into(),
        input: [1, 1, n_in],
        layers,
    };
    let params = random_params(rng, spec);
    let batch = rng.random_range(1..=3);
    let x = Tensor::from_fn(&[batch, 1, 1, n_in], |_| rng.random_range(0.0..1.5));
    (params, x)
}

pub fn random_params(rng: &mut ChaCha8Rng, spec: NetworkSpec) -> SnnParams {
    let weighted = spec.weighted_layers();
    let weights: Vec<Tensor> = weighted
        .iter()
        .map(|&i| {
            let l = &spec.layers[i];
            let fan = l.fan_in().unwrap() as f64;
            Tensor::from_fn(&l.weight_shape().unwrap(), |_| {
                rng.random_range(-1.0..1.5) * 1.5 / fan.sqrt()
            })
        })
        .collect();
    let biases = weighted
        .iter()
        .map(|&i| {
            Tensor::from_fn(&[spec.layers[i].out_channels().unwrap()], |_| {
                rng.random_range(-0.2..0.3)
            })
        })
        .collect();
    let hidden = weighted.len() - 1;
    SnnParams {
        thresholds: (0..hidden).map(|_| rng.random_range(0.3..1.2)).collect(),
        leaks: (0..hidden).map(|_| rng.random_range(0.5..1.0)).collect(),
        weights,
        biases,
        spec,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
