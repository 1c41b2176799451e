//! Minimal feed-forward network toolkit with explicit backward passes.
//!
//! Layers are pure on the forward pass (`&self`) and return a [`Cache`] that
//! the backward pass consumes; parameter gradients accumulate into each
//! [`Param`] and are cleared by the optimizer.

mod adam;
mod conv;
mod layers;

pub use adam::{Adam, AdamSlot};
pub use conv::{conv_out_len, convt_out_len, Conv2d, ConvTranspose2d};
pub use layers::{Activation, Cache, Dense, Layer, Residual, Sequential};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

pub type Tensor = ArrayD<f32>;

/// A trainable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    /// Whether optional weight decay applies (resampling layers only).
    pub decay: bool,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.raw_dim());
        Param {
            value,
            grad,
            decay: false,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform with variance `2 / fan_in` (ReLU layers).
    He,
    /// Uniform with variance `1 / fan_in` (linear outputs).
    Lecun,
    /// Uniform with variance `(scale)^2 / fan_in`.
    Scaled(f32),
    Zeros,
}

impl Init {
    pub(crate) fn sample<R: Rng + ?Sized>(self, shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
        let gain = match self {
            Init::He => 2f32.sqrt(),
            Init::Lecun => 1.0,
            Init::Scaled(s) => s,
            Init::Zeros => return Tensor::zeros(IxDyn(shape)),
        };
        // Var(U(-b, b)) = b^2 / 3
        let bound = gain * (3.0 / fan_in.max(1) as f32).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| dist.sample(rng)).collect();
        Tensor::from_shape_vec(IxDyn(shape), data).expect("shape matches length")
    }
}

/// Row-major single-precision GEMM: `c = op(a) · op(b) + beta · c`.
///
/// `a` is `[m × k]` (or `[k × m]` when `trans_a`), `b` is `[k × n]` (or
/// `[n × k]` when `trans_b`), `c` is `[m × n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    n: usize,
    k: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds are asserted above and the strides describe dense row-major
    // storage of exactly those extents.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::exec::Exec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Init::Scaled(1.0).sample(shape, 3, &mut rng)
    }

    /// Checks input and parameter gradients of `seq` against central differences
    /// of the scalar `sum(y * w)` for a fixed random `w`.
    pub fn check_sequential(seq: &mut Sequential, input: Tensor, tol: f32) {
        let exec = Exec::Sequential;
        let (y, cache) = seq.forward(input.clone(), exec);
        let w = random_tensor(y.shape(), 99);
        let loss = |s: &Sequential, x: &Tensor| -> f64 {
            let (y, _) = s.forward(x.clone(), exec);
            y.iter().zip(w.iter()).map(|(&a, &b)| a as f64 * b as f64).sum()
        };
        seq.visit_params_mut("", &mut |_, p| p.zero_grad());
        let gx = seq.backward(cache, w.clone(), exec);
        let eps = 1e-2f32;
        let check = |analytic: f32, numeric: f64, what: &str| {
            let scale = analytic.abs().max(numeric.abs() as f32).max(1e-2);
            let err = (analytic - numeric as f32).abs() / scale;
            assert!(err < tol, "{what}: analytic {analytic} numeric {numeric} rel err {err}");
        };
        for i in (0..input.len()).step_by((input.len() / 17).max(1)) {
            let mut xp = input.clone();
            let mut xm = input.clone();
            xp.as_slice_mut().unwrap()[i] += eps;
            xm.as_slice_mut().unwrap()[i] -= eps;
            let num = (loss(seq, &xp) - loss(seq, &xm)) / (2.0 * eps as f64);
            check(gx.as_slice().unwrap()[i], num, &format!("input[{i}]"));
        }
        let mut grads = Vec::new();
        seq.visit_params("", &mut |name, p| grads.push((name.to_string(), p.grad.clone(), p.len())));
        for (pi, (name, grad, len)) in grads.into_iter().enumerate() {
            for j in (0..len).step_by((len / 7).max(1)) {
                let perturb = |s: &mut Sequential, delta: f32| {
                    let mut idx = 0;
                    s.visit_params_mut("", &mut |_, p| {
                        if idx == pi {
                            p.value.as_slice_mut().unwrap()[j] += delta;
                        }
                        idx += 1;
                    });
                };
                perturb(seq, eps);
                let lp = loss(seq, &input);
                perturb(seq, -2.0 * eps);
                let lm = loss(seq, &input);
                perturb(seq, eps);
                let num = (lp - lm) / (2.0 * eps as f64);
                check(grad.as_slice().unwrap()[j], num, &format!("{name}[{j}]"));
            }
        }
    }
}
