use ndarray::{Axis, IxDyn};
use rand::Rng;

use super::{gemm, Conv2d, ConvTranspose2d, Init, Param, Tensor};
use crate::exec::Exec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f32),
    Sigmoid,
}

impl Activation {
    /// Elementwise application to a tensor.
    pub fn apply_tensor(self, x: &Tensor) -> Tensor {
        x.mapv(|v| self.apply(v))
    }

    fn apply(self, v: f32) -> f32 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::LeakyRelu(a) => {
                if v > 0.0 {
                    v
                } else {
                    a * v
                }
            }
            Activation::Sigmoid => sigmoid(v),
        }
    }

    /// Derivative expressed through the pre-activation input.
    fn derivative(self, v: f32) -> f32 {
        match self {
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(a) => {
                if v > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(v);
                s * (1.0 - s)
            }
        }
    }
}

fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Fully connected layer `y = x Wᵀ + b` on `[batch, in]` inputs.
#[derive(Debug, Clone)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `[out, in]`
    pub weight: Param,
    pub bias: Param,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, init: Init, rng: &mut R) -> Self {
        Dense {
            inputs,
            outputs,
            weight: Param::new(init.sample(&[outputs, inputs], inputs, rng)),
            bias: Param::new(Tensor::zeros(IxDyn(&[outputs]))),
        }
    }

    fn rows(&self, x: &Tensor) -> usize {
        assert!(
            x.ndim() == 2 && x.shape()[1] == self.inputs,
            "dense: expected [batch, {}] input, got {:?}",
            self.inputs,
            x.shape()
        );
        x.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let batch = self.rows(x);
        let x = x.as_standard_layout();
        let bias = self.bias.value.as_slice().expect("contiguous");
        let mut out: Vec<f32> = (0..batch).flat_map(|_| bias.iter().copied()).collect();
        gemm(
            batch,
            self.outputs,
            self.inputs,
            x.as_slice().expect("standard layout"),
            false,
            self.weight.value.as_slice().expect("contiguous"),
            true,
            1.0,
            &mut out,
        );
        Tensor::from_shape_vec(vec![batch, self.outputs], out).expect("dense output")
    }

    pub fn backward(&mut self, x: &Tensor, grad: &Tensor) -> Tensor {
        let batch = self.rows(x);
        let x = x.as_standard_layout();
        let g = grad.as_standard_layout();
        let (xs, gs) = (x.as_slice().expect("standard"), g.as_slice().expect("standard"));
        gemm(
            self.outputs,
            self.inputs,
            batch,
            gs,
            true,
            xs,
            false,
            1.0,
            self.weight.grad.as_slice_mut().expect("contiguous"),
        );
        self.bias.grad += &g.sum_axis(Axis(0));
        let mut dx = vec![0f32; batch * self.inputs];
        gemm(
            batch,
            self.inputs,
            self.outputs,
            gs,
            false,
            self.weight.value.as_slice().expect("contiguous"),
            false,
            0.0,
            &mut dx,
        );
        Tensor::from_shape_vec(vec![batch, self.inputs], dx).expect("dense input grad")
    }
}

/// `y = x + body(x)`
#[derive(Debug, Clone)]
pub struct Residual {
    pub body: Sequential,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Dense(Dense),
    Conv(Conv2d),
    ConvTranspose(ConvTranspose2d),
    Act(Activation),
    Residual(Residual),
    /// Reshape every sample to the given per-sample shape.
    Reshape(Vec<usize>),
}

/// What a layer kept from its forward pass.
#[derive(Debug)]
pub enum Cache {
    Input(Tensor),
    Nested(Vec<Cache>),
    Shape(Vec<usize>),
}

impl Layer {
    pub fn forward(&self, x: Tensor, exec: Exec) -> (Tensor, Cache) {
        match self {
            Layer::Dense(d) => (d.forward(&x), Cache::Input(x)),
            Layer::Conv(c) => (c.forward(&x, exec), Cache::Input(x)),
            Layer::ConvTranspose(c) => (c.forward(&x, exec), Cache::Input(x)),
            Layer::Act(a) => (x.mapv(|v| a.apply(v)), Cache::Input(x)),
            Layer::Residual(r) => {
                let (y, cache) = r.body.forward(x.clone(), exec);
                (y + &x, cache)
            }
            Layer::Reshape(shape) => {
                let old = x.shape().to_vec();
                let mut new = vec![old[0]];
                new.extend_from_slice(shape);
                let y = x
                    .into_shape_clone(IxDyn(&new))
                    .unwrap_or_else(|e| panic!("reshape {old:?} -> {new:?}: {e}"));
                (y, Cache::Shape(old))
            }
        }
    }

    pub fn backward(&mut self, cache: Cache, grad: Tensor, exec: Exec) -> Tensor {
        match (self, cache) {
            (Layer::Dense(d), Cache::Input(x)) => d.backward(&x, &grad),
            (Layer::Conv(c), Cache::Input(x)) => c.backward(&x, &grad, exec),
            (Layer::ConvTranspose(c), Cache::Input(x)) => c.backward(&x, &grad, exec),
            (Layer::Act(a), Cache::Input(x)) => {
                let mut g = grad;
                g.zip_mut_with(&x, |g, &v| *g *= a.derivative(v));
                g
            }
            (Layer::Residual(r), cache @ Cache::Nested(_)) => {
                let inner = r.body.backward(cache, grad.clone(), exec);
                inner + &grad
            }
            (Layer::Reshape(_), Cache::Shape(old)) => grad
                .into_shape_clone(IxDyn(&old))
                .expect("reshape backward"),
            (layer, cache) => panic!("cache {cache:?} does not belong to layer {layer:?}"),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        match self {
            Layer::Dense(d) => {
                f(&format!("{prefix}.weight"), &d.weight);
                f(&format!("{prefix}.bias"), &d.bias);
            }
            Layer::Conv(c) => {
                f(&format!("{prefix}.weight"), &c.weight);
                f(&format!("{prefix}.bias"), &c.bias);
            }
            Layer::ConvTranspose(c) => {
                f(&format!("{prefix}.weight"), &c.weight);
                f(&format!("{prefix}.bias"), &c.bias);
            }
            Layer::Residual(r) => r.body.visit_params(prefix, f),
            Layer::Act(_) | Layer::Reshape(_) => {}
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        match self {
            Layer::Dense(d) => {
                f(&format!("{prefix}.weight"), &mut d.weight);
                f(&format!("{prefix}.bias"), &mut d.bias);
            }
            Layer::Conv(c) => {
                f(&format!("{prefix}.weight"), &mut c.weight);
                f(&format!("{prefix}.bias"), &mut c.bias);
            }
            Layer::ConvTranspose(c) => {
                f(&format!("{prefix}.weight"), &mut c.weight);
                f(&format!("{prefix}.bias"), &mut c.bias);
            }
            Layer::Residual(r) => r.body.visit_params_mut(prefix, f),
            Layer::Act(_) | Layer::Reshape(_) => {}
        }
    }
}

/// Layers applied in order.
#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    pub fn push(&mut self, layer: Layer) {
        self.layers.push(layer);
    }

    pub fn forward(&self, mut x: Tensor, exec: Exec) -> (Tensor, Cache) {
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, c) = layer.forward(x, exec);
            caches.push(c);
            x = y;
        }
        (x, Cache::Nested(caches))
    }

    /// Forward pass that drops intermediate caches.
    pub fn apply(&self, x: Tensor, exec: Exec) -> Tensor {
        self.layers.iter().fold(x, |x, layer| layer.forward(x, exec).0)
    }

    pub fn backward(&mut self, cache: Cache, mut grad: Tensor, exec: Exec) -> Tensor {
        let Cache::Nested(caches) = cache else {
            panic!("sequential backward expects a nested cache");
        };
        assert_eq!(caches.len(), self.layers.len(), "cache/layer count mismatch");
        for (layer, c) in self.layers.iter_mut().zip(caches).rev() {
            grad = layer.backward(c, grad, exec);
        }
        grad
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&join(prefix, i), f);
        }
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, i), f);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }
}

fn join(prefix: &str, i: usize) -> String {
    if prefix.is_empty() {
        i.to_string()
    } else {
        format!("{prefix}.{i}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{check_sequential, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_stack_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seq = Sequential::new(vec![
            Layer::Dense(Dense::new(5, 7, Init::He, &mut rng)),
            Layer::Act(Activation::LeakyRelu(0.1)),
            Layer::Residual(Residual {
                body: Sequential::new(vec![
                    Layer::Act(Activation::LeakyRelu(0.1)),
                    Layer::Dense(Dense::new(7, 7, Init::He, &mut rng)),
                ]),
            }),
            Layer::Dense(Dense::new(7, 3, Init::Lecun, &mut rng)),
            Layer::Act(Activation::Sigmoid),
        ]);
        check_sequential(&mut seq, random_tensor(&[4, 5], 2), 2e-2);
    }

    #[test]
    fn conv_stack_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut seq = Sequential::new(vec![
            Layer::Reshape(vec![2, 4, 4]),
            Layer::Conv(Conv2d::new(2, 3, 3, 1, 1, Init::He, &mut rng)),
            Layer::Act(Activation::LeakyRelu(0.1)),
            Layer::Conv(Conv2d::new(3, 4, 3, 2, 1, Init::He, &mut rng)),
            Layer::ConvTranspose(ConvTranspose2d::new(4, 2, 4, 2, 1, Init::He, &mut rng)),
            Layer::Reshape(vec![32]),
        ]);
        check_sequential(&mut seq, random_tensor(&[5, 32], 6), 2e-2);
    }

    #[test]
    fn apply_matches_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let seq = Sequential::new(vec![
            Layer::Dense(Dense::new(3, 4, Init::He, &mut rng)),
            Layer::Act(Activation::Relu),
        ]);
        let x = random_tensor(&[2, 3], 1);
        assert_eq!(seq.apply(x.clone(), Exec::Sequential), seq.forward(x, Exec::Sequential).0);
    }
}
