use serde::{Deserialize, Serialize};

use super::{Param, Tensor};

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamSlot {
    pub m: Tensor,
    pub v: Tensor,
}

/// Adam with TensorFlow's default hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Completed update count.
    pub t: u64,
    #[serde(skip)]
    pub slots: Vec<AdamSlot>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            t: 0,
            slots: Vec::new(),
        }
    }
}

impl Adam {
    /// Applies one update to `params` (in a stable order) and clears their gradients.
    pub fn step<'a>(&mut self, lr: f64, params: impl IntoIterator<Item = &'a mut Param>) {
        let mut params = params.into_iter();
        self.step_visit(lr, |f| params.by_ref().for_each(|p| f(p)));
    }

    /// Like [`Adam::step`], for parameters reachable only through a visitor.
    /// `visit` must present the parameters in the same order on every call.
    pub fn step_visit(&mut self, lr: f64, visit: impl FnOnce(&mut dyn FnMut(&mut Param))) {
        self.t += 1;
        let t = self.t as i32;
        let lr_t = (lr * (1.0 - self.beta2.powi(t)).sqrt() / (1.0 - self.beta1.powi(t))) as f32;
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.epsilon as f32);
        let slots = &mut self.slots;
        let mut i = 0;
        visit(&mut |p: &mut Param| {
            if slots.len() <= i {
                slots.push(AdamSlot {
                    m: Tensor::zeros(p.value.raw_dim()),
                    v: Tensor::zeros(p.value.raw_dim()),
                });
            }
            let slot = &mut slots[i];
            assert_eq!(slot.m.shape(), p.value.shape(), "optimizer slot {i} shape changed");
            let values = p.value.as_slice_mut().expect("contiguous param");
            let grads = p.grad.as_slice_mut().expect("contiguous grad");
            let m = slot.m.as_slice_mut().expect("contiguous");
            let v = slot.v.as_slice_mut().expect("contiguous");
            for j in 0..values.len() {
                let g = grads[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                values[j] -= lr_t * m[j] / (v[j].sqrt() + eps);
                grads[j] = 0.0;
            }
            i += 1;
        });
    }

    /// Scalar Adam update sharing this optimizer's step counter (call after [`Adam::step`]).
    pub fn scalar_update(&self, lr: f64, value: &mut f64, m: &mut f64, v: &mut f64, grad: f64) {
        let t = self.t as i32;
        *m = self.beta1 * *m + (1.0 - self.beta1) * grad;
        *v = self.beta2 * *v + (1.0 - self.beta2) * grad * grad;
        let lr_t = lr * (1.0 - self.beta2.powi(t)).sqrt() / (1.0 - self.beta1.powi(t));
        *value -= lr_t * *m / (v.sqrt() + self.epsilon);
    }
}
