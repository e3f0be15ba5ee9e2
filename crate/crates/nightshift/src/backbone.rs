//! Convolutional backbone: content encoder, style encoder, generator, and
//! PatchGAN discriminator, parameterized by a scale config.
//!
//! The same structure runs at two scales: a full-size profile (352 px, 64
//! base channels) whose per-layer output shapes are pinned by
//! [`shape_walk`], and a desk profile (64 px, 16 base channels) that the
//! trainer and tests actually run. Downsampling is a 2x2 average pool and
//! upsampling is nearest-neighbor x2 followed by a conv, a deterministic,
//! alias-safe pair.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Conv2d, InstanceNorm2d, ParamFn};
use crate::rng::normal_vec;
use crate::tensor::{shape, PadMode, Tensor};
use crate::{Error, Result};

// ── config ──

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Square image side in pixels; must be divisible by 4 (two downsamples).
    pub image_size: usize,
    /// Channel width `l` at the first stage.
    pub base_channels: usize,
    /// Content feature channels `l_c` out of the encoder (= 4l here).
    pub content_channels: usize,
    /// Style code length `l_s`.
    pub style_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> BackboneConfig {
        BackboneConfig::desk()
    }
}

impl BackboneConfig {
    /// Desk profile: small enough to train on one CPU core.
    pub fn desk() -> BackboneConfig {
        BackboneConfig {
            image_size: 64,
            base_channels: 16,
            content_channels: 64,
            style_dim: 8,
        }
    }

    /// Full-size profile from the reference architecture table.
    pub fn full_scale() -> BackboneConfig {
        BackboneConfig {
            image_size: 352,
            base_channels: 64,
            content_channels: 256,
            style_dim: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % 4 != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be divisible by 4",
                self.image_size
            )));
        }
        if self.base_channels == 0 || self.content_channels == 0 || self.style_dim == 0 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        if self.content_channels != 4 * self.base_channels {
            return Err(Error::Config(format!(
                "content_channels {} must equal 4 * base_channels {}",
                self.content_channels, self.base_channels
            )));
        }
        Ok(())
    }
}

// ── shared conv block ──

/// Conv + InstanceNorm + ReLU, the repeating unit of both encoders and the
/// generator.
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: InstanceNorm2d,
}

impl ConvBlock {
    fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        pad: usize,
        mode: PadMode,
        rng: &mut ChaCha8Rng,
    ) -> ConvBlock {
        ConvBlock {
            conv: Conv2d::new(c_in, c_out, k, 1, pad, mode, rng),
            norm: InstanceNorm2d::new(c_out),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        self.norm.forward(&self.conv.forward(x)).relu()
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        self.conv.visit_params(&format!("{prefix}.conv"), f);
        self.norm.visit_params(&format!("{prefix}.norm"), f);
    }
}

fn check_image(x: &Tensor, who: &str) {
    assert_eq!(x.rank(), 4, "{who}: expected B x 3 x H x W input");
    assert_eq!(x.shape()[1], 3, "{who}: expected 3 input channels");
    assert!(
        x.shape()[2] % 4 == 0 && x.shape()[3] % 4 == 0,
        "{who}: spatial dims must be divisible by 4"
    );
}

// ── content encoder ──

/// E: image -> content feature map, with intermediate taps retrievable for
/// the contrastive feature heads.
pub struct ContentEncoder {
    pub block1: ConvBlock, // 7x7 reflect, 3 -> l
    pub block2: ConvBlock, // 3x3 zeros,   l -> 2l
    pub block3: ConvBlock, // 3x3 zeros,  2l -> 4l (= l_c)
}

/// Number of feature taps the encoder exposes (block1, block2, final map).
pub const NUM_TAPS: usize = 3;

/// Stable names for the encoder taps, in `encode_with_taps` order.
pub const TAP_NAMES: [&str; NUM_TAPS] = ["conv1", "conv2", "content"];

impl BackboneConfig {
    /// Channel widths of the encoder taps, in `encode_with_taps` order.
    pub fn tap_dims(&self) -> [usize; NUM_TAPS] {
        [self.base_channels, 2 * self.base_channels, self.content_channels]
    }
}

impl ContentEncoder {
    pub fn new(cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> ContentEncoder {
        let l = cfg.base_channels;
        ContentEncoder {
            block1: ConvBlock::new(3, l, 7, 3, PadMode::Reflect, rng),
            block2: ConvBlock::new(l, 2 * l, 3, 1, PadMode::Zeros, rng),
            block3: ConvBlock::new(2 * l, cfg.content_channels, 3, 1, PadMode::Zeros, rng),
        }
    }

    /// Full pipeline returning `(c, taps)`; `taps[NUM_TAPS - 1]` is `c`.
    pub fn encode_with_taps(&self, x: &Tensor) -> (Tensor, Vec<Tensor>) {
        check_image(x, "content_encode");
        let t1 = self.block1.forward(x);
        let t2 = self.block2.forward(&t1);
        let h = t2.avg_pool2x2();
        let h = self.block3.forward(&h);
        let c = h.avg_pool2x2();
        (c.clone(), vec![t1, t2, c])
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.encode_with_taps(x).0
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        self.block1.visit_params(&format!("{prefix}.block1"), f);
        self.block2.visit_params(&format!("{prefix}.block2"), f);
        self.block3.visit_params(&format!("{prefix}.block3"), f);
    }
}

// ── style encoder ──

/// S: image -> style code. Same trunk topology as the content encoder with
/// independent weights, then a global average pool and a 1x1 conv head.
pub struct StyleEncoder {
    pub block1: ConvBlock,
    pub block2: ConvBlock,
    pub block3: ConvBlock,
    pub head: Conv2d, // 1x1, l_c -> l_s
}

impl StyleEncoder {
    pub fn new(cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> StyleEncoder {
        let l = cfg.base_channels;
        StyleEncoder {
            block1: ConvBlock::new(3, l, 7, 3, PadMode::Reflect, rng),
            block2: ConvBlock::new(l, 2 * l, 3, 1, PadMode::Zeros, rng),
            block3: ConvBlock::new(2 * l, cfg.content_channels, 3, 1, PadMode::Zeros, rng),
            head: Conv2d::new(cfg.content_channels, cfg.style_dim, 1, 1, 0, PadMode::Zeros, rng),
        }
    }

    /// Returns `[B, l_s]` style codes.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        check_image(x, "style_encode");
        let h = self.block1.forward(x);
        let h = self.block2.forward(&h).avg_pool2x2();
        let h = self.block3.forward(&h).avg_pool2x2();
        let pooled = h.mean(&[2, 3], true);
        let code = self.head.forward(&pooled);
        let b = x.shape()[0];
        let ls = self.head.weight.shape()[0];
        code.reshape(&[b, ls])
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        self.block1.visit_params(&format!("{prefix}.block1"), f);
        self.block2.visit_params(&format!("{prefix}.block2"), f);
        self.block3.visit_params(&format!("{prefix}.block3"), f);
        self.head.visit_params(&format!("{prefix}.head"), f);
    }
}

/// Draws `[batch, l_s]` style codes from the standard-normal prior.
pub fn sample_style(rng: &mut ChaCha8Rng, batch: usize, style_dim: usize) -> Tensor {
    Tensor::from_vec(normal_vec(rng, batch * style_dim, 1.0), &[batch, style_dim])
}

// ── generator ──

/// G: aggregated feature map -> image in (-1, 1).
pub struct Generator {
    pub block1: ConvBlock, // after x2 upsample: l_c -> 2l
    pub block2: ConvBlock, // after x2 upsample: 2l -> l
    pub out: Conv2d,       // 7x7 reflect, l -> 3
}

impl Generator {
    pub fn new(cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Generator {
        let l = cfg.base_channels;
        Generator {
            block1: ConvBlock::new(cfg.content_channels, 2 * l, 3, 1, PadMode::Zeros, rng),
            block2: ConvBlock::new(2 * l, l, 3, 1, PadMode::Zeros, rng),
            out: Conv2d::new(l, 3, 7, 1, 3, PadMode::Reflect, rng),
        }
    }

    pub fn forward(&self, u: &Tensor) -> Tensor {
        assert_eq!(u.rank(), 4, "generate: expected B x l_c x h x w input");
        let h = self.block1.forward(&u.upsample_nearest2x());
        let h = self.block2.forward(&h.upsample_nearest2x());
        self.out.forward(&h).tanh()
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        self.block1.visit_params(&format!("{prefix}.block1"), f);
        self.block2.visit_params(&format!("{prefix}.block2"), f);
        self.out.visit_params(&format!("{prefix}.out"), f);
    }
}

// ── discriminator ──

/// D: PatchGAN over overlapping receptive fields. Three stride-2 4x4 stages
/// (3 -> l -> 2l -> 4l), a stride-1 stage to 8l, then a stride-1 conv to one
/// logit channel; leaky-ReLU slope 0.2 and InstanceNorm on the middle stages.
pub struct Discriminator {
    pub c1: Conv2d,
    pub c2: Conv2d,
    pub n2: InstanceNorm2d,
    pub c3: Conv2d,
    pub n3: InstanceNorm2d,
    pub c4: Conv2d,
    pub n4: InstanceNorm2d,
    pub c5: Conv2d,
}

const LEAK: f64 = 0.2;

impl Discriminator {
    pub fn new(cfg: &BackboneConfig, rng: &mut ChaCha8Rng) -> Discriminator {
        let l = cfg.base_channels;
        Discriminator {
            c1: Conv2d::new(3, l, 4, 2, 1, PadMode::Zeros, rng),
            c2: Conv2d::new(l, 2 * l, 4, 2, 1, PadMode::Zeros, rng),
            n2: InstanceNorm2d::new(2 * l),
            c3: Conv2d::new(2 * l, 4 * l, 4, 2, 1, PadMode::Zeros, rng),
            n3: InstanceNorm2d::new(4 * l),
            c4: Conv2d::new(4 * l, 8 * l, 4, 1, 1, PadMode::Zeros, rng),
            n4: InstanceNorm2d::new(8 * l),
            c5: Conv2d::new(8 * l, 1, 4, 1, 1, PadMode::Zeros, rng),
        }
    }

    /// Spatial side of the logit map for a square input, or None when the
    /// image is smaller than one output patch's receptive field.
    pub fn logit_side(input_side: usize) -> Option<usize> {
        let mut n = input_side;
        for stride in [2, 2, 2, 1, 1] {
            n = shape::conv_out(n, 4, stride, 1)?;
        }
        Some(n)
    }

    pub fn forward(&self, img: &Tensor) -> Tensor {
        let side = img.shape()[2].min(img.shape()[3]);
        assert!(
            Self::logit_side(side).is_some(),
            "discriminate: {side} px input is smaller than one patch's receptive field"
        );
        let h = self.c1.forward(img).leaky_relu(LEAK);
        let h = self.n2.forward(&self.c2.forward(&h)).leaky_relu(LEAK);
        let h = self.n3.forward(&self.c3.forward(&h)).leaky_relu(LEAK);
        let h = self.n4.forward(&self.c4.forward(&h)).leaky_relu(LEAK);
        self.c5.forward(&h)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        self.c1.visit_params(&format!("{prefix}.c1"), f);
        self.c2.visit_params(&format!("{prefix}.c2"), f);
        self.n2.visit_params(&format!("{prefix}.n2"), f);
        self.c3.visit_params(&format!("{prefix}.c3"), f);
        self.n3.visit_params(&format!("{prefix}.n3"), f);
        self.c4.visit_params(&format!("{prefix}.c4"), f);
        self.n4.visit_params(&format!("{prefix}.n4"), f);
        self.c5.visit_params(&format!("{prefix}.c5"), f);
    }
}

// ── shape walk ──

/// Walks the encoder + style head + generator layer list symbolically and
/// returns `(layer name, [C, H, W])` for each step, using the same output
/// arithmetic the conv kernels use. Pinning this list at full scale is the
/// architecture-conformance test.
pub fn shape_walk(cfg: &BackboneConfig) -> Vec<(String, [usize; 3])> {
    let l = cfg.base_channels;
    let lc = cfg.content_channels;
    let n = cfg.image_size;
    let mut out = Vec::new();
    let mut push = |name: &str, c: usize, h: usize| out.push((name.to_string(), [c, h, h]));

    let conv = |n: usize, k: usize, s: usize, p: usize| shape::conv_out(n, k, s, p).unwrap();

    // encoder
    let mut h = conv(n, 7, 1, 3);
    push("enc.conv1", l, h);
    h = conv(h, 3, 1, 1);
    push("enc.conv2", 2 * l, h);
    h /= 2;
    push("enc.down1", 2 * l, h);
    h = conv(h, 3, 1, 1);
    push("enc.conv3", lc, h);
    h /= 2;
    push("enc.down2", lc, h);

    // style head
    push("sty.pool", lc, 1);
    push("sty.conv4", cfg.style_dim, conv(1, 1, 1, 0));

    // generator
    let mut g = h * 2;
    push("gen.up1", lc, g);
    g = conv(g, 3, 1, 1);
    push("gen.conv1", 2 * l, g);
    g *= 2;
    push("gen.up2", 2 * l, g);
    g = conv(g, 3, 1, 1);
    push("gen.conv2", l, g);
    g = conv(g, 7, 1, 3);
    push("gen.conv3", 3, g);

    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use crate::tensor::grad_check;

    fn desk_nets(seed: u64) -> (ContentEncoder, StyleEncoder, Generator, Discriminator) {
        let cfg = BackboneConfig::desk();
        let mut rng = stream_rng(seed, 0);
        (
            ContentEncoder::new(&cfg, &mut rng),
            StyleEncoder::new(&cfg, &mut rng),
            Generator::new(&cfg, &mut rng),
            Discriminator::new(&cfg, &mut rng),
        )
    }

    fn smooth_image(side: usize) -> Tensor {
        let mut data = Vec::with_capacity(3 * side * side);
        for c in 0..3 {
            for i in 0..side {
                for j in 0..side {
                    let a = 2.0 * std::f64::consts::PI * i as f64 / side as f64;
                    let b = 2.0 * std::f64::consts::PI * j as f64 / side as f64;
                    data.push(0.5 * a.sin() * b.cos() + 0.1 * c as f64);
                }
            }
        }
        Tensor::from_vec(data, &[1, 3, side, side])
    }

    #[test]
    fn full_scale_shape_walk_matches_reference_table() {
        let walk = shape_walk(&BackboneConfig::full_scale());
        let want: Vec<(&str, [usize; 3])> = vec![
            ("enc.conv1", [64, 352, 352]),
            ("enc.conv2", [128, 352, 352]),
            ("enc.down1", [128, 176, 176]),
            ("enc.conv3", [256, 176, 176]),
            ("enc.down2", [256, 88, 88]),
            ("sty.pool", [256, 1, 1]),
            ("sty.conv4", [8, 1, 1]),
            ("gen.up1", [256, 176, 176]),
            ("gen.conv1", [128, 176, 176]),
            ("gen.up2", [128, 352, 352]),
            ("gen.conv2", [64, 352, 352]),
            ("gen.conv3", [3, 352, 352]),
        ];
        assert_eq!(walk.len(), want.len());
        for ((name, shape), (wname, wshape)) in walk.iter().zip(&want) {
            assert_eq!(name, wname);
            assert_eq!(shape, wshape, "{name}");
        }
    }

    #[test]
    fn desk_scale_forward_shapes() {
        let (enc, sty, gen, disc) = desk_nets(1);
        let x = Tensor::from_vec(
            normal_vec(&mut stream_rng(1, 9), 2 * 3 * 64 * 64, 0.3),
            &[2, 3, 64, 64],
        );
        let (c, taps) = enc.encode_with_taps(&x);
        assert_eq!(c.shape(), &[2, 64, 16, 16]);
        assert_eq!(taps.len(), NUM_TAPS);
        assert_eq!(taps[0].shape(), &[2, 16, 64, 64]);
        assert_eq!(taps[1].shape(), &[2, 32, 64, 64]);
        assert_eq!(taps[2].shape(), c.shape());
        assert_eq!(taps[2].data(), c.data());

        let s = sty.forward(&x);
        assert_eq!(s.shape(), &[2, 8]);

        let y = gen.forward(&c);
        assert_eq!(y.shape(), &[2, 3, 64, 64]);

        let d = disc.forward(&y);
        assert_eq!(d.shape(), &[2, 1, 6, 6]);
        assert_eq!(Discriminator::logit_side(64), Some(6));
        assert_eq!(Discriminator::logit_side(16), None);
    }

    #[test]
    fn zero_image_passes_through_norms_as_zeros() {
        let (enc, _, _, _) = desk_nets(2);
        let x = Tensor::zeros(&[1, 3, 64, 64]);
        let c = enc.forward(&x);
        assert!(c.data().iter().all(|v| v.is_finite()));
        assert!(c.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn generator_output_stays_inside_tanh_range() {
        let (_, _, gen, _) = desk_nets(3);
        let u = Tensor::from_vec(
            normal_vec(&mut stream_rng(3, 7), 64 * 16 * 16, 5.0),
            &[1, 64, 16, 16],
        );
        let y = gen.forward(&u);
        assert!(y.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn networks_are_pure_functions() {
        let (enc, sty, _, _) = desk_nets(4);
        let x = smooth_image(64);
        assert_eq!(enc.forward(&x).data(), enc.forward(&x).data());
        assert_eq!(sty.forward(&x).data(), sty.forward(&x).data());
    }

    #[test]
    fn style_prior_statistics() {
        let draws = sample_style(&mut stream_rng(5, 0), 10_000, 8);
        for d in 0..8 {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for b in 0..10_000 {
                let v = draws.at(&[b, d]);
                sum += v;
                sq += v * v;
            }
            let mean = sum / 10_000.0;
            let var = sq / 10_000.0 - mean * mean;
            assert!(mean.abs() < 0.05, "dim {d} mean {mean}");
            assert!((0.94..1.06).contains(&var), "dim {d} var {var}");
        }
        let again = sample_style(&mut stream_rng(5, 0), 10_000, 8);
        assert_eq!(draws.data(), again.data());
        assert_eq!(sample_style(&mut stream_rng(0, 0), 1, 8).shape(), &[1, 8]);
    }

    #[test]
    fn zeroed_discriminator_outputs_its_final_bias() {
        let (_, _, _, mut disc) = desk_nets(6);
        disc.visit_params("disc", &mut |name, t| {
            let v = if name == "disc.c5.bias" { 0.7 } else { 0.0 };
            *t = Tensor::param(vec![v; t.numel()], t.shape());
        });
        let x = smooth_image(64);
        let d = disc.forward(&x);
        assert!(d.data().iter().all(|v| *v == 0.7));
    }

    #[test]
    fn discriminator_mean_logit_grad_check() {
        let cfg = BackboneConfig {
            image_size: 32,
            base_channels: 4,
            content_channels: 16,
            style_dim: 8,
        };
        let disc = Discriminator::new(&cfg, &mut stream_rng(7, 0));
        let x = Tensor::from_vec(
            normal_vec(&mut stream_rng(7, 1), 3 * 32 * 32, 0.3),
            &[1, 3, 32, 32],
        );
        let err = grad_check(|t| disc.forward(t).mean_all(), &x, 1e-5);
        assert!(err < 1e-4, "grad err {err}");
    }

    #[test]
    fn padding_modes_match_manual_pad_then_valid_conv() {
        let (enc, _, _, _) = desk_nets(8);
        let x = smooth_image(8);

        // reflect pad by 3 for the 7x7 front conv
        let side = 8usize;
        let pad = 3usize;
        let padded_side = side + 2 * pad;
        let reflect = |j: isize, n: isize| -> usize {
            let mut j = j;
            if j < 0 {
                j = -j;
            }
            if j >= n {
                j = 2 * n - 2 - j;
            }
            j as usize
        };
        let mut pdata = vec![0.0; 3 * padded_side * padded_side];
        for c in 0..3 {
            for i in 0..padded_side {
                for j in 0..padded_side {
                    let si = reflect(i as isize - pad as isize, side as isize);
                    let sj = reflect(j as isize - pad as isize, side as isize);
                    pdata[(c * padded_side + i) * padded_side + j] = x.at(&[0, c, si, sj]);
                }
            }
        }
        let padded = Tensor::from_vec(pdata, &[1, 3, padded_side, padded_side]);
        let via_layer = x.conv2d(&enc.block1.conv.weight, 1, 3, PadMode::Reflect);
        let via_manual = padded.conv2d(&enc.block1.conv.weight, 1, 0, PadMode::Zeros);
        assert_eq!(via_layer.shape(), via_manual.shape());
        assert_eq!(via_layer.data(), via_manual.data());

        // zero pad by 1 for the 3x3 conv
        let h = Tensor::from_vec(
            normal_vec(&mut stream_rng(8, 2), 16 * 8 * 8, 1.0),
            &[1, 16, 8, 8],
        );
        let mut zdata = vec![0.0; 16 * 10 * 10];
        for c in 0..16 {
            for i in 0..8 {
                for j in 0..8 {
                    zdata[(c * 10 + i + 1) * 10 + j + 1] = h.at(&[0, c, i, j]);
                }
            }
        }
        let zpadded = Tensor::from_vec(zdata, &[1, 16, 10, 10]);
        let via_layer = h.conv2d(&enc.block2.conv.weight, 1, 1, PadMode::Zeros);
        let via_manual = zpadded.conv2d(&enc.block2.conv.weight, 1, 0, PadMode::Zeros);
        assert_eq!(via_layer.data(), via_manual.data());
    }

    #[test]
    fn style_code_is_stable_under_cyclic_shift() {
        let (_, sty, _, _) = desk_nets(9);
        let x = smooth_image(64);
        let mut rolled = vec![0.0; 3 * 64 * 64];
        let (dy, dx) = (8usize, 8usize);
        for c in 0..3 {
            for i in 0..64 {
                for j in 0..64 {
                    rolled[(c * 64 + i) * 64 + j] = x.at(&[0, c, (i + dy) % 64, (j + dx) % 64]);
                }
            }
        }
        let xr = Tensor::from_vec(rolled, &[1, 3, 64, 64]);
        let a = sty.forward(&x);
        let b = sty.forward(&xr);
        let mut sq = 0.0;
        for d in 0..8 {
            let diff = a.at(&[0, d]) - b.at(&[0, d]);
            sq += diff * diff;
        }
        let rms = (sq / 8.0).sqrt();
        assert!(rms < 0.05, "rms {rms}");
    }
}
