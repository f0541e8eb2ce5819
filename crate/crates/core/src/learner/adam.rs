//! Adaptive moment estimation.

use super::nn::Mlp;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Optimizer state for one network. Moments share the network's layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub t: u64,
    pub m: Mlp,
    pub v: Mlp,
}

impl Adam {
    pub fn new(params: &Mlp, lr: f64) -> Self {
        Self {
            lr,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One descent step along `scale * grads`.
    pub fn step(&mut self, params: &mut Mlp, grads: &Mlp, scale: f64) {
        self.t += 1;
        let (c1, c2) = bias_corrections(self.t);
        let lr = self.lr;
        let gs = grads.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, (_, _, g)), m), v) in params.tensors_mut().into_iter().zip(gs).zip(ms).zip(vs) {
            for k in 0..p.len() {
                let gk = scale * g[k];
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * gk;
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * gk * gk;
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + EPS);
            }
        }
    }
}

/// Adam for a single scalar parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarAdam {
    pub lr: f64,
    pub t: u64,
    pub m: f64,
    pub v: f64,
}

impl ScalarAdam {
    pub fn new(lr: f64) -> Self {
        Self { lr, t: 0, m: 0.0, v: 0.0 }
    }

    pub fn step(&mut self, param: &mut f64, grad: f64) {
        self.t += 1;
        let (c1, c2) = bias_corrections(self.t);
        self.m = BETA1 * self.m + (1.0 - BETA1) * grad;
        self.v = BETA2 * self.v + (1.0 - BETA2) * grad * grad;
        *param -= self.lr * (self.m / c1) / ((self.v / c2).sqrt() + EPS);
    }
}

fn bias_corrections(t: u64) -> (f64, f64) {
    let t = t.min(i32::MAX as u64) as i32;
    (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first update is lr * sign(g).
        let mut p = 1.0;
        let mut opt = ScalarAdam::new(0.1);
        opt.step(&mut p, 4.0);
        assert!((p - 0.9).abs() < 1e-8);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = 5.0;
        let mut opt = ScalarAdam::new(0.05);
        for _ in 0..2000 {
            let g = 2.0 * (p - 2.0);
            opt.step(&mut p, g);
        }
        assert!((p - 2.0).abs() < 1e-3);
    }
}
