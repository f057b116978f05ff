//! Adam with bias correction and global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use crate::tensor::{Elem, Tensor};

use super::model::{Model, Params};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
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

#[derive(Clone, Debug)]
pub struct Adam<F> {
    cfg: AdamConfig,
    m: Params<F>,
    v: Params<F>,
    t: u64,
}

impl<F: Elem> Adam<F> {
    pub fn new(like: &Params<F>, cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    /// One Adam update. Moment estimates are kept in the parameter
    /// precision; bias-correction factors are computed in f64.
    pub fn step(&mut self, params: &mut Params<F>, grads: &Params<F>, lr: f64) {
        self.t += 1;
        let b1 = F::from_f64(self.cfg.beta1);
        let b2 = F::from_f64(self.cfg.beta2);
        let one = F::one();
        let bc1 = F::from_f64(1.0 - self.cfg.beta1.powi(self.t as i32));
        let bc2 = F::from_f64(1.0 - self.cfg.beta2.powi(self.t as i32));
        let eps = F::from_f64(self.cfg.eps);
        let lr = F::from_f64(lr);

        let names = params.tensor_names();
        for name in &names {
            let g = grads.tensor(name).expect("gradient tensor present");
            update_tensor(
                params.tensor_mut(name).expect("parameter tensor present"),
                self.m.tensor_mut(name).expect("first moment present"),
                self.v.tensor_mut(name).expect("second moment present"),
                g,
                b1,
                b2,
                one,
                bc1,
                bc2,
                eps,
                lr,
            );
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn update_tensor<F: Elem>(
    p: &mut Tensor<F>,
    m: &mut Tensor<F>,
    v: &mut Tensor<F>,
    g: &Tensor<F>,
    b1: F,
    b2: F,
    one: F,
    bc1: F,
    bc2: F,
    eps: F,
    lr: F,
) {
    let pd = p.data_mut();
    let md = m.data_mut();
    let vd = v.data_mut();
    let gd = g.data();
    for i in 0..pd.len() {
        md[i] = b1 * md[i] + (one - b1) * gd[i];
        vd[i] = b2 * vd[i] + (one - b2) * gd[i] * gd[i];
        let mhat = md[i] / bc1;
        let vhat = vd[i] / bc2;
        pd[i] = pd[i] - lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Scales the gradient in place so its global L2 norm does not exceed
/// `max_norm`. Returns the pre-clip norm. Norm accumulation is in f64.
pub fn clip_global_norm<F: Elem>(grads: &mut Params<F>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Clip, apply Adam, advance the model's step counter.
pub fn optimizer_step<F: Elem>(
    model: &mut Model<F>,
    opt: &mut Adam<F>,
    grads: &mut Params<F>,
    lr: f64,
    max_grad_norm: f64,
) -> f64 {
    let norm = clip_global_norm(grads, max_grad_norm);
    opt.step(model.params_mut(), grads, lr);
    model.bump_step();
    norm
}
