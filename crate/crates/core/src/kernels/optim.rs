//! SGD with momentum and Adam over groups of flat parameter slices.

/// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), velocity.len());
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update; `step` counts from 1.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    cfg: &AdamConfig,
) {
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

fn ensure_state(state: &mut Vec<Vec<f64>>, grads: &[&[f64]]) {
    if state.len() != grads.len() {
        *state = grads.iter().map(|g| vec![0.0; g.len()]).collect();
    }
}

#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        SgdMomentum {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient group count");
        ensure_state(&mut self.velocity, grads);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            sgd_momentum_step(p, g, v, lr, self.momentum, self.weight_decay);
        }
    }
}

/// Adam over parameter groups. A group marked frozen keeps its values and
/// moments untouched.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], frozen: &[bool], lr: f64) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient group count");
        ensure_state(&mut self.m, grads);
        ensure_state(&mut self.v, grads);
        self.step += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if frozen.get(i).copied().unwrap_or(false) {
                continue;
            }
            adam_step(p, g, &mut self.m[i], &mut self.v[i], self.step, lr, &self.config);
        }
    }
}
