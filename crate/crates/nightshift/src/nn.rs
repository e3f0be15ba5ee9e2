//! Small neural-net layer zoo on top of the tensor engine.
//!
//! Every layer owns its parameters as differentiable leaf tensors and exposes
//! them through [`visit_params`](Conv2d::visit_params)-style walkers that
//! yield stable dotted names ("enc.c1.weight", ...). The optimizer and the
//! checkpoint format both key off those names, so they are part of the crate
//! contract and never change across runs.
//!
//! Initialization convention: weights ~ N(0, 0.02^2), biases zero, instance
//! norm affine starts at identity (gamma 1, beta 0).

use rand_chacha::ChaCha8Rng;

use crate::rng::normal_vec;
use crate::tensor::{PadMode, Tensor};

pub const INIT_STD: f64 = 0.02;

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Parameter visitor: receives the dotted name and a mutable slot so the
/// optimizer can swap in updated tensors.
pub type ParamFn<'a> = dyn FnMut(String, &mut Tensor) + 'a;

// ── Conv2d ──

pub struct Conv2d {
    pub weight: Tensor, // [c_out, c_in, k, k]
    pub bias: Tensor,   // [c_out]
    pub stride: usize,
    pub padding: usize,
    pub pad_mode: PadMode,
}

impl Conv2d {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        pad_mode: PadMode,
        rng: &mut ChaCha8Rng,
    ) -> Conv2d {
        let w = normal_vec(rng, c_out * c_in * k * k, INIT_STD);
        Conv2d {
            weight: Tensor::param(w, &[c_out, c_in, k, k]),
            bias: Tensor::param(vec![0.0; c_out], &[c_out]),
            stride,
            padding,
            pad_mode,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let c_out = self.weight.shape()[0];
        x.conv2d(&self.weight, self.stride, self.padding, self.pad_mode)
            .add(&self.bias.reshape(&[1, c_out, 1, 1]))
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

// ── ConvTranspose2d ──

pub struct ConvTranspose2d {
    pub weight: Tensor, // [c_in, c_out, k, k]
    pub bias: Tensor,   // [c_out]
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> ConvTranspose2d {
        let w = normal_vec(rng, c_in * c_out * k * k, INIT_STD);
        ConvTranspose2d {
            weight: Tensor::param(w, &[c_in, c_out, k, k]),
            bias: Tensor::param(vec![0.0; c_out], &[c_out]),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let c_out = self.weight.shape()[1];
        x.conv_transpose2d(&self.weight, self.stride, self.padding)
            .add(&self.bias.reshape(&[1, c_out, 1, 1]))
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

// ── Linear ──

pub struct Linear {
    pub weight: Tensor, // [d_in, d_out]
    pub bias: Tensor,   // [d_out]
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Linear {
        let w = normal_vec(rng, d_in * d_out, INIT_STD);
        Linear {
            weight: Tensor::param(w, &[d_in, d_out]),
            bias: Tensor::param(vec![0.0; d_out], &[d_out]),
        }
    }

    /// All-zero weights and bias; used where the layer must start as the
    /// identity contribution (e.g. style-to-scale maps).
    pub fn zeros(d_in: usize, d_out: usize) -> Linear {
        Linear {
            weight: Tensor::param(vec![0.0; d_in * d_out], &[d_in, d_out]),
            bias: Tensor::param(vec![0.0; d_out], &[d_out]),
        }
    }

    /// `x` is [n, d_in] (or any batch of row vectors).
    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.weight).add(&self.bias)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

// ── InstanceNorm2d ──

pub struct InstanceNorm2d {
    pub gamma: Tensor, // [c]
    pub beta: Tensor,  // [c]
    pub eps: f64,
}

impl InstanceNorm2d {
    pub fn new(c: usize) -> InstanceNorm2d {
        InstanceNorm2d {
            gamma: Tensor::param(vec![1.0; c], &[c]),
            beta: Tensor::param(vec![0.0; c], &[c]),
            eps: 1e-5,
        }
    }

    /// Per-(sample, channel) standardization over the spatial axes, before
    /// the affine part. `x` is [b, c, h, w].
    pub fn normalize(&self, x: &Tensor) -> Tensor {
        let mu = x.mean(&[2, 3], true);
        let v = x.var(&[2, 3], true);
        x.sub(&mu).div(&v.add_scalar(self.eps).sqrt())
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let c = self.gamma.shape()[0];
        let g = self.gamma.reshape(&[1, c, 1, 1]);
        let b = self.beta.reshape(&[1, c, 1, 1]);
        self.normalize(x).mul(&g).add(&b)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::tensor::grad_check;

    #[test]
    fn conv_layer_adds_bias_per_channel() {
        let mut rng = stream_rng(0, 0);
        let mut layer = Conv2d::new(1, 2, 3, 1, 1, PadMode::Zeros, &mut rng);
        layer.weight = Tensor::param(vec![0.0; 2 * 9], &[2, 1, 3, 3]);
        layer.bias = Tensor::param(vec![1.0, -2.0], &[2]);
        let x = Tensor::ones(&[1, 1, 4, 4]);
        let y = layer.forward(&x);
        assert_eq!(y.shape(), &[1, 2, 4, 4]);
        assert_eq!(y.at(&[0, 0, 2, 2]), 1.0);
        assert_eq!(y.at(&[0, 1, 2, 2]), -2.0);
    }

    #[test]
    fn linear_matches_manual_product() {
        let mut l = Linear::zeros(2, 2);
        l.weight = Tensor::param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        l.bias = Tensor::param(vec![10.0, 20.0], &[2]);
        let x = Tensor::from_vec(vec![1.0, 1.0], &[1, 2]);
        let y = l.forward(&x);
        assert_eq!(y.data(), &[14.0, 26.0]);
    }

    #[test]
    fn instance_norm_standardizes_each_channel() {
        let mut rng = stream_rng(3, 1);
        let x = Tensor::from_vec(normal_vec(&mut rng, 2 * 3 * 16 * 16, 1.0), &[2, 3, 16, 16]);
        let norm = InstanceNorm2d::new(3);
        let y = norm.forward(&x);
        for b in 0..2 {
            for c in 0..3 {
                let mut sum = 0.0;
                let mut sq = 0.0;
                for i in 0..16 {
                    for j in 0..16 {
                        let v = y.at(&[b, c, i, j]);
                        sum += v;
                        sq += v * v;
                    }
                }
                let n = 256.0;
                let mean = sum / n;
                let std = (sq / n - mean * mean).sqrt();
                assert!(mean.abs() < 1e-12, "mean {mean}");
                assert!((std - 1.0).abs() < 1e-5, "std {std}");
            }
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Conv2d::new(2, 4, 3, 1, 1, PadMode::Zeros, &mut stream_rng(9, 0));
        let b = Conv2d::new(2, 4, 3, 1, 1, PadMode::Zeros, &mut stream_rng(9, 0));
        assert_eq!(a.weight.data(), b.weight.data());
        assert!(a.weight.data().iter().all(|v| v.abs() < 0.2));
    }

    #[test]
    fn param_names_are_stable() {
        let mut rng = stream_rng(0, 0);
        let mut c = Conv2d::new(1, 1, 3, 1, 1, PadMode::Reflect, &mut rng);
        let mut names = Vec::new();
        c.visit_params("net.c1", &mut |n, _| names.push(n));
        assert_eq!(names, vec!["net.c1.weight", "net.c1.bias"]);
    }

    #[test]
    fn gradients_flow_through_each_layer() {
        let mut rng = stream_rng(11, 0);
        let conv = Conv2d::new(2, 3, 3, 1, 1, PadMode::Reflect, &mut rng);
        let x = Tensor::from_vec(normal_vec(&mut rng, 2 * 4 * 4, 1.0), &[1, 2, 4, 4]);
        let err = grad_check(
            |t| {
                let y = conv.forward(t);
                y.mul(&t.conv2d(&conv.weight, 1, 1, PadMode::Reflect)).mean_all()
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-6, "conv grad err {err}");

        let lin = Linear::new(3, 2, &mut rng);
        let xl = Tensor::from_vec(normal_vec(&mut rng, 6, 1.0), &[2, 3]);
        let err = grad_check(|t| lin.forward(t).tanh().mean_all(), &xl, 1e-5);
        assert!(err < 1e-7, "linear grad err {err}");

        let inorm = InstanceNorm2d::new(2);
        let xn = Tensor::from_vec(normal_vec(&mut rng, 2 * 2 * 3 * 3, 1.0), &[2, 2, 3, 3]);
        let err = grad_check(|t| inorm.forward(t).exp().mean_all(), &xn, 1e-5);
        assert!(err < 1e-6, "inorm grad err {err}");

        let deconv = ConvTranspose2d::new(2, 2, 4, 2, 1, &mut rng);
        let xd = Tensor::from_vec(normal_vec(&mut rng, 2 * 4 * 4, 1.0), &[1, 2, 4, 4]);
        let err = grad_check(|t| deconv.forward(t).relu().mean_all(), &xd, 1e-5);
        assert!(err < 1e-6, "deconv grad err {err}");
    }
}
