//! Adam with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::params::{Grads, Parameters};
use crate::tensor::Mat;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub t: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(params: &Parameters, lr: f64) -> Self {
        let z = |p: &Parameters| p.tensors().iter().map(|m| Mat::zeros(m.rows, m.cols)).collect();
        Self {
            lr,
            t: 0,
            m: z(params),
            v: z(params),
        }
    }

    /// One bias-corrected update.
    pub fn update(&mut self, params: &mut Parameters, grads: &Grads) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for (id, g) in grads.tensors.iter().enumerate() {
            let p = params.get_mut(id);
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            for k in 0..g.data.len() {
                let gk = g.data[k];
                m.data[k] = BETA1 * m.data[k] + (1.0 - BETA1) * gk;
                v.data[k] = BETA2 * v.data[k] + (1.0 - BETA2) * gk * gk;
                let mh = m.data[k] / c1;
                let vh = v.data[k] / c2;
                p.data[k] -= self.lr * mh / (vh.sqrt() + EPSILON);
            }
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let n = grads.global_norm();
    if n > max_norm && n > 0.0 {
        grads.scale(max_norm / n);
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamBuilder};

    #[test]
    fn first_step_moves_by_lr() {
        let mut b = ParamBuilder::new(0);
        b.add("w", 1, 2, Init::Zeros);
        let mut p = b.finish();
        let mut g = Grads::zeros_like(&p);
        g.tensors[0].data = vec![0.5, -2.0];
        let mut adam = Adam::new(&p, 0.1);
        adam.update(&mut p, &g);
        assert!((p.get(0).data[0] + 0.1).abs() < 1e-6);
        assert!((p.get(0).data[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut b = ParamBuilder::new(0);
        b.add("w", 1, 1, Init::Zeros);
        let mut p = b.finish();
        let mut adam = Adam::new(&p, 0.05);
        for _ in 0..500 {
            let mut g = Grads::zeros_like(&p);
            g.tensors[0].data[0] = 2.0 * (p.get(0).data[0] - 3.0);
            adam.update(&mut p, &g);
        }
        assert!((p.get(0).data[0] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut b = ParamBuilder::new(0);
        b.add("w", 1, 2, Init::Zeros);
        let p = b.finish();
        let mut g = Grads::zeros_like(&p);
        g.tensors[0].data = vec![3.0, 4.0];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
        g.tensors[0].data = vec![0.3, 0.4];
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g.tensors[0].data, vec![0.3, 0.4]);
    }
}
