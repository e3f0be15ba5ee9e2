//! Gradient verification suites. One check per differentiable primitive
//! plus three composite paths through the real model stack, shared by the
//! unit tests, the `grad-check` subcommand, and the acceptance gate.
//!
//! Every check runs a central-difference comparison against the recorded
//! backward pass and reports the worst relative error; the pass threshold
//! is [`GRAD_TOL`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::aggregator::{Aggregator, AggregatorConfig, BoundingBox};
use crate::backbone::{BackboneConfig, ContentEncoder, Discriminator, Generator, StyleEncoder};
use crate::losses::{
    gan_losses, global_content_loss, instance_content_loss, style_recon_loss, total_loss,
    GanMode, LossWeights, NceConfig, ProjectionHeads, INSTANCE_ROI_GRID,
};
use crate::rng::{normal_vec, stream_rng};
use crate::tensor::{grad_check, PadMode, Tensor};

pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
}

impl CheckOutcome {
    pub fn pass(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < GRAD_TOL
    }
}

pub fn all_pass(results: &[CheckOutcome]) -> bool {
    results.iter().all(|r| r.pass())
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_vec(normal_vec(rng, shape.iter().product(), std), shape)
}

/// Random values bounded away from zero, for kinked or singular ops.
fn rand_away(rng: &mut ChaCha8Rng, shape: &[usize], min_abs: f64) -> Tensor {
    let n = shape.iter().product();
    let v: Vec<f64> = normal_vec(rng, n, 1.0)
        .into_iter()
        .map(|x| x.signum() * (x.abs() + min_abs))
        .collect();
    Tensor::from_vec(v, shape)
}

fn rand_pos(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(v, shape)
}

/// One check per `Op` variant. Binary ops are probed through both operand
/// slots in a single weighted readout; conv ops get separate input and
/// weight entries since those VJPs take different code paths.
pub fn primitive_checks(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = stream_rng(seed, 0x7665_7269);
    let mut out = Vec::new();
    let mut check = |name: &str, err: f64| {
        out.push(CheckOutcome { name: name.to_string(), max_rel_err: err });
    };

    let w = rand_t(&mut rng, &[2, 6], 1.0);
    let c = rand_away(&mut rng, &[2, 6], 0.3);
    let x0 = rand_away(&mut rng, &[2, 6], 0.3);

    check("add", grad_check(|x| x.add(&c).add(&c.add(x)).mul(&w).sum_all(), &x0, 1e-5));
    check("sub", grad_check(|x| x.sub(&c).add(&c.sub(x)).mul(&w).sum_all(), &x0, 1e-5));
    check("mul", grad_check(|x| x.mul(&c).add(&c.mul(x)).mul(&w).sum_all(), &x0, 1e-5));
    check("div", grad_check(|x| x.div(&c).add(&c.div(x)).mul(&w).sum_all(), &x0, 1e-5));

    let ma = rand_t(&mut rng, &[4, 2], 1.0);
    let mb = rand_t(&mut rng, &[5, 3], 1.0);
    let mx = rand_t(&mut rng, &[3, 4], 1.0);
    check(
        "matmul",
        grad_check(
            |x| x.matmul(&ma).sum_all().add(&mb.matmul(x).sum_all()),
            &mx,
            1e-5,
        ),
    );

    let img = rand_t(&mut rng, &[1, 2, 5, 5], 1.0);
    let ker = rand_t(&mut rng, &[3, 2, 3, 3], 0.5);
    check(
        "conv2d.input",
        grad_check(|x| x.conv2d(&ker, 1, 1, PadMode::Zeros).sum_all(), &img, 1e-5),
    );
    check(
        "conv2d.weight",
        grad_check(|k| img.conv2d(k, 1, 1, PadMode::Zeros).sum_all(), &ker, 1e-5),
    );
    check(
        "conv2d.reflect",
        grad_check(|x| x.conv2d(&ker, 1, 1, PadMode::Reflect).sum_all(), &img, 1e-5),
    );
    let tker = rand_t(&mut rng, &[2, 3, 4, 4], 0.5);
    let timg = rand_t(&mut rng, &[1, 2, 3, 3], 1.0);
    check(
        "conv_transpose2d.input",
        grad_check(|x| x.conv_transpose2d(&tker, 2, 1).sum_all(), &timg, 1e-5),
    );
    check(
        "conv_transpose2d.weight",
        grad_check(|k| timg.conv_transpose2d(k, 2, 1).sum_all(), &tker, 1e-5),
    );

    let p4 = rand_t(&mut rng, &[1, 2, 4, 4], 1.0);
    check("avg_pool2x2", grad_check(|x| x.avg_pool2x2().mul(&x.avg_pool2x2()).sum_all(), &p4, 1e-5));
    let p3 = rand_t(&mut rng, &[1, 2, 3, 3], 1.0);
    check(
        "upsample_nearest2x",
        grad_check(|x| x.upsample_nearest2x().mul(&x.upsample_nearest2x()).sum_all(), &p3, 1e-5),
    );

    let xa = rand_away(&mut rng, &[3, 4], 0.05);
    check("relu", grad_check(|x| x.relu().mul(&w.slice(&[0, 0], &[2, 6]).reshape(&[3, 4])).sum_all(), &xa, 1e-6));
    let xs = rand_t(&mut rng, &[3, 4], 1.0);
    check("gelu", grad_check(|x| x.gelu().sum_all(), &xs, 1e-5));
    check("tanh", grad_check(|x| x.tanh().sum_all(), &xs, 1e-5));
    check("exp", grad_check(|x| x.exp().sum_all(), &xs, 1e-5));
    let xp = rand_pos(&mut rng, &[3, 4], 0.2, 2.0);
    check("log", grad_check(|x| x.log().sum_all(), &xp, 1e-6));
    check("sqrt", grad_check(|x| x.sqrt().sum_all(), &xp, 1e-6));

    let sm = rand_t(&mut rng, &[3, 5], 1.0);
    let smw = rand_t(&mut rng, &[3, 5], 1.0);
    check("softmax", grad_check(|x| x.softmax(1).mul(&smw).sum_all(), &sm, 1e-5));

    let cube = rand_t(&mut rng, &[2, 3, 4], 1.0);
    let mw = rand_t(&mut rng, &[3], 1.0);
    check("mean", grad_check(|x| x.mean(&[0, 2], false).mul(&mw).sum_all(), &cube, 1e-5));
    let vx = rand_t(&mut rng, &[3, 6], 1.0);
    check("var", grad_check(|x| x.var(&[1], false).mul(&mw).sum_all(), &vx, 1e-5));

    let cc = rand_t(&mut rng, &[2, 4], 1.0);
    let cw = rand_t(&mut rng, &[2, 7], 1.0);
    let cx = rand_t(&mut rng, &[2, 3], 1.0);
    check(
        "concat",
        grad_check(|x| Tensor::cat(&[x, &cc], 1).mul(&cw).sum_all(), &cx, 1e-5),
    );
    let sx = rand_t(&mut rng, &[3, 6], 1.0);
    let sw = rand_t(&mut rng, &[2, 3], 1.0);
    check(
        "slice",
        grad_check(|x| x.slice(&[1, 2], &[3, 5]).mul(&sw).sum_all(), &sx, 1e-5),
    );
    let rw = rand_t(&mut rng, &[3, 4], 1.0);
    check(
        "reshape",
        grad_check(|x| x.reshape(&[3, 4]).mul(&rw).sum_all(), &cube.reshape(&[2, 12]).slice(&[0, 0], &[1, 12]), 1e-5),
    );
    let pw = rand_t(&mut rng, &[4, 2, 3], 1.0);
    check(
        "permute",
        grad_check(|x| x.permute(&[2, 0, 1]).mul(&pw).sum_all(), &cube, 1e-5),
    );

    let bimg = rand_t(&mut rng, &[2, 5, 5], 1.0);
    let pts: Vec<(f64, f64)> = (0..6)
        .map(|_| {
            (
                rng.gen_range(0..4) as f64 + rng.gen_range(0.2..0.8),
                rng.gen_range(0..4) as f64 + rng.gen_range(0.2..0.8),
            )
        })
        .collect();
    let bw = rand_t(&mut rng, &[6, 2], 1.0);
    check(
        "bilinear_sample",
        grad_check(move |x| x.bilinear_sample(&pts).mul(&bw).sum_all(), &bimg, 1e-5),
    );

    out
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig { image_size: 16, base_channels: 4, content_channels: 16, style_dim: 8 }
}

fn tiny_aggregator() -> AggregatorConfig {
    AggregatorConfig { patch_stride: 2, token_dim: 16, blocks: 1, heads: 2, mlp_dim: 32, freq_bands: 2 }
}

/// Three end-to-end paths: translation output w.r.t. the input image, the
/// full generator-side objective w.r.t. one parameter tensor, and the
/// discriminator logits w.r.t. their input.
pub fn composite_checks(seed: u64) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let bcfg = tiny_backbone();
    let acfg = tiny_aggregator();

    // (1) encoder -> aggregator -> generator, gradient w.r.t. the image
    {
        let mut rng = stream_rng(seed, 0x636f_6d70);
        let enc = ContentEncoder::new(&bcfg, &mut rng);
        let agg = Aggregator::new(&acfg, bcfg.content_channels, bcfg.style_dim, &mut rng);
        let gen = Generator::new(&bcfg, &mut rng);
        let s = rand_t(&mut rng, &[1, bcfg.style_dim], 1.0);
        let boxes = vec![vec![BoundingBox { cx: 8.0, cy: 8.0, w: 8.0, h: 8.0 }]];
        let x = rand_t(&mut rng, &[1, 3, 16, 16], 0.5);
        let err = grad_check(
            |x| {
                let c = enc.forward(x);
                let (u, _) = agg.aggregate(&c, &boxes, &s);
                gen.forward(&u).mean_all()
            },
            &x,
            1e-5,
        );
        out.push(CheckOutcome { name: "translate_path.input".into(), max_rel_err: err });
    }

    // (2) full generator-side objective w.r.t. the qkv bias of block 0
    {
        let mut rng = stream_rng(seed, 0x636f_6d71);
        let enc = ContentEncoder::new(&bcfg, &mut rng);
        let sty = StyleEncoder::new(&bcfg, &mut rng);
        let mut agg = Aggregator::new(&acfg, bcfg.content_channels, bcfg.style_dim, &mut rng);
        let gen = Generator::new(&bcfg, &mut rng);
        let disc = Discriminator::new(&BackboneConfig { image_size: 32, ..bcfg }, &mut rng);
        let ncfg = NceConfig { patches_per_layer: 6, projection_dim: 8, ..NceConfig::default() };
        let heads = ProjectionHeads::new(&bcfg.tap_dims(), &ncfg, &mut rng);
        let weights = LossWeights::default();
        let s = rand_t(&mut rng, &[1, bcfg.style_dim], 1.0);
        let boxes = vec![vec![BoundingBox { cx: 8.0, cy: 8.0, w: 10.0, h: 10.0 }]];
        let x = rand_t(&mut rng, &[1, 3, 16, 16], 0.5);
        let y = rand_t(&mut rng, &[1, 3, 16, 16], 0.5);

        let mut bias0 = Tensor::zeros(&[1]);
        agg.visit_params("aggregator", &mut |name, p| {
            if name == "aggregator.block0.qkv.bias" {
                bias0 = p.detach();
            }
        });
        let err = grad_check(
            |b| {
                agg.visit_params("aggregator", &mut |name, p| {
                    if name == "aggregator.block0.qkv.bias" {
                        *p = b.clone();
                    }
                });
                let mut nce_rng = stream_rng(seed, 0x636f_6d72);
                let (c_x, taps_x) = enc.encode_with_taps(&x);
                let (u, _) = agg.aggregate(&c_x, &boxes, &s);
                let yhat = gen.forward(&u);
                // 16 px inputs are below the discriminator's minimum side,
                // so the adversarial term sees an upsampled view
                let d_fake = disc.forward(&yhat.upsample_nearest2x());
                let (_, gan_g) = gan_losses(&d_fake.detach(), &d_fake, GanMode::Logistic);
                let (c_yhat, taps_yhat) = enc.encode_with_taps(&yhat);
                let glob = global_content_loss(&taps_x, &taps_yhat, &heads, &ncfg, &mut nce_rng);
                let (ins, _) =
                    instance_content_loss(&c_x, &c_yhat, &boxes, &heads, &ncfg, INSTANCE_ROI_GRID);
                let style_rec = style_recon_loss(&yhat, &s, &sty);
                let img_rec = crate::losses::image_recon_loss(&y, &enc, &sty, &agg, &gen);
                total_loss(&gan_g, &glob, &ins, &style_rec, &img_rec, &weights)
            },
            &bias0,
            1e-5,
        );
        out.push(CheckOutcome { name: "total_loss.qkv_bias".into(), max_rel_err: err });
    }

    // (3) discriminator logits w.r.t. the input image
    {
        let mut rng = stream_rng(seed, 0x636f_6d73);
        let bcfg = BackboneConfig { image_size: 32, base_channels: 2, content_channels: 8, style_dim: 8 };
        let disc = Discriminator::new(&bcfg, &mut rng);
        let x = rand_t(&mut rng, &[1, 3, 32, 32], 0.5);
        let err = grad_check(|x| disc.forward(x).mean_all(), &x, 1e-5);
        out.push(CheckOutcome { name: "discriminator.input".into(), max_rel_err: err });
    }

    out
}
