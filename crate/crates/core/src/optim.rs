//! First-order optimizers over flat parameter slices.
//!
//! SGD with momentum: `v ← βv + g`, `p ← p − lr·v`.
//!
//! Adam: `m ← β₁m + (1−β₁)g`, `s ← β₂s + (1−β₂)g²`,
//! `p ← p − lr·m̂/(√ŝ + ε)` with bias-corrected `m̂`, `ŝ`.

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd { lr, momentum, velocity: Vec::new() }
    }

    /// Updates parameter group `i` in place.
    pub fn step(&mut self, i: usize, params: &mut [f64], grad: &[f64]) {
        if self.velocity.len() <= i {
            self.velocity.resize(i + 1, Vec::new());
        }
        let v = &mut self.velocity[i];
        if v.len() != params.len() {
            *v = vec![0.0; params.len()];
        }
        for ((p, vi), g) in params.iter_mut().zip(v.iter_mut()).zip(grad) {
            *vi = self.momentum * *vi + g;
            *p -= self.lr * *vi;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments: Vec::new() }
    }

    /// Advances the shared step counter; call once before updating the
    /// groups of one step.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    pub fn step(&mut self, i: usize, params: &mut [f64], grad: &[f64]) {
        assert!(self.t > 0, "Adam::tick must precede step");
        if self.moments.len() <= i {
            self.moments.resize(i + 1, (Vec::new(), Vec::new()));
        }
        let (m, s) = &mut self.moments[i];
        if m.len() != params.len() {
            *m = vec![0.0; params.len()];
            *s = vec![0.0; params.len()];
        }
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (j, p) in params.iter_mut().enumerate() {
            let g = grad[j];
            m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
            s[j] = self.beta2 * s[j] + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (m[j] / c1) / ((s[j] / c2).sqrt() + self.eps);
        }
    }
}
