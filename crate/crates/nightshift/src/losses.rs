//! Training objectives: adversarial, global and instance-level contrastive,
//! and the two L1 reconstruction terms, plus their weighted combination.
//!
//! Contrastive terms follow the noise-contrastive (infoNCE) form with
//! internal negatives: for each anchor patch of the translated image, the
//! positive is the same location in the source image and the negatives are
//! the other sampled locations of that same image.

use rand::seq::index::sample as index_sample;
use serde::{Deserialize, Serialize};
use rand_chacha::ChaCha8Rng;

use crate::aggregator::{roi_extract, Aggregator, BoundingBox};
use crate::backbone::{ContentEncoder, Generator, StyleEncoder, NUM_TAPS, TAP_NAMES};
use crate::nn::{Linear, ParamFn};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// RoIAlign grid side for instance-level contrast (M = r^2 cells per box).
pub const INSTANCE_ROI_GRID: usize = 4;

/// Hidden width of the projection-head MLPs.
pub const HEAD_HIDDEN: usize = 256;

// ── configs ──

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NceConfig {
    /// Softmax temperature tau.
    pub temperature: f64,
    /// Encoder tap names used as NCE layers.
    pub layers: Vec<String>,
    /// Spatial locations sampled per layer and image.
    pub patches_per_layer: usize,
    /// Output width of the projection heads.
    pub projection_dim: usize,
}

impl Default for NceConfig {
    fn default() -> NceConfig {
        NceConfig {
            temperature: 0.07,
            layers: TAP_NAMES.iter().map(|s| s.to_string()).collect(),
            patches_per_layer: 64,
            projection_dim: 128,
        }
    }
}

impl NceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature {} must be > 0",
                self.temperature
            )));
        }
        for name in &self.layers {
            if !TAP_NAMES.contains(&name.as_str()) {
                return Err(Error::Config(format!(
                    "unknown NCE layer {name:?}; encoder taps are {TAP_NAMES:?}"
                )));
            }
        }
        if self.patches_per_layer < 2 {
            return Err(Error::Config("patches_per_layer must be >= 2".into()));
        }
        Ok(())
    }

    /// Tap indices for the configured layer names.
    pub fn tap_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|n| TAP_NAMES.iter().position(|t| t == n).expect("validated"))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_glob: f64,
    pub lambda_ins: f64,
    pub lambda_style: f64,
    pub lambda_img: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights {
            lambda_glob: 1.0,
            lambda_ins: 1.0,
            lambda_style: 10.0,
            lambda_img: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_glob, self.lambda_ins, self.lambda_style, self.lambda_img];
        if all.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::Config(format!("loss weights must be >= 0, got {all:?}")));
        }
        Ok(())
    }
}

/// Scalar record of one step's loss terms.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossReport {
    pub gan_d: f64,
    pub gan_g: f64,
    pub nce_global: f64,
    pub nce_instance: f64,
    pub recon_img: f64,
    pub recon_style: f64,
    pub total: f64,
}

// ── adversarial ──

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GanMode {
    /// Logistic (non-saturating generator surrogate). Default.
    Logistic,
    /// Least-squares variant.
    LeastSquares,
}

/// Both adversarial objectives from raw patch logits. The discriminator
/// maximizes E[log D(y)] + E[log(1 - D(y_hat))]; the generator minimizes the
/// non-saturating surrogate -E[log D(y_hat)]. Means over all patch logits.
pub fn gan_losses(d_real: &Tensor, d_fake: &Tensor, mode: GanMode) -> (Tensor, Tensor) {
    match mode {
        GanMode::Logistic => {
            let loss_d = d_real.neg().softplus().mean_all().add(&d_fake.softplus().mean_all());
            let loss_g = d_fake.neg().softplus().mean_all();
            (loss_d, loss_g)
        }
        GanMode::LeastSquares => {
            let loss_d = d_real
                .add_scalar(-1.0)
                .mul(&d_real.add_scalar(-1.0))
                .mean_all()
                .add(&d_fake.mul(d_fake).mean_all());
            let loss_g = d_fake
                .add_scalar(-1.0)
                .mul(&d_fake.add_scalar(-1.0))
                .mean_all();
            (loss_d, loss_g)
        }
    }
}

// ── infoNCE ──

/// Single-anchor infoNCE: -log( e^{a.p/tau} / (e^{a.p/tau} + sum_n e^{a.n/tau}) ),
/// stabilized by max subtraction inside the softmax.
pub fn info_nce(anchor: &Tensor, positive: &Tensor, negatives: &Tensor, tau: f64) -> Tensor {
    assert_eq!(anchor.rank(), 1, "anchor must be a vector");
    assert_eq!(positive.shape(), anchor.shape());
    assert_eq!(negatives.rank(), 2, "negatives must be [n, dim]");
    assert!(negatives.shape()[0] >= 1, "need at least one negative");
    assert_eq!(negatives.shape()[1], anchor.numel());
    let p = anchor.numel();
    let pos_row = positive.reshape(&[1, p]);
    let targets = Tensor::cat(&[&pos_row, negatives], 0); // [1 + n, p]
    let logits = anchor
        .reshape(&[1, p])
        .matmul(&targets.permute(&[1, 0]))
        .scale(1.0 / tau); // [1, 1 + n]
    let probs = logits.softmax(1);
    probs.slice(&[0, 0], &[1, 1]).reshape(&[1]).log().neg()
}

/// Paired-set infoNCE: row i of `anchors` has `targets` row i as positive
/// and the other rows as negatives. Returns the mean loss over rows.
pub fn nce_matrix_loss(anchors: &Tensor, targets: &Tensor, tau: f64) -> Tensor {
    assert_eq!(anchors.rank(), 2);
    assert_eq!(anchors.shape(), targets.shape());
    let s = anchors.shape()[0];
    assert!(s >= 2, "need at least one negative per anchor");
    let logits = anchors.matmul(&targets.permute(&[1, 0])).scale(1.0 / tau); // [s, s]
    let probs = logits.softmax(1);
    let diag = probs.mul(&Tensor::eye(s)).mean(&[1], false).scale(s as f64); // [s]
    diag.log().neg().mean_all()
}

// ── feature gathering ──

/// `s` distinct indices in 0..n, drawn without replacement.
pub fn sample_locations(rng: &mut ChaCha8Rng, n: usize, s: usize) -> Vec<usize> {
    assert!(s <= n, "cannot sample {s} of {n} locations");
    index_sample(rng, n, s).into_vec()
}

/// Rows of a [B, C, H, W] feature map at flat spatial indices, for one
/// sample: returns [S, C]. A one-hot matmul keeps it differentiable.
pub fn gather_rows(feat: &Tensor, b: usize, locs: &[usize]) -> Tensor {
    assert_eq!(feat.rank(), 4);
    let (c, h, w) = (feat.shape()[1], feat.shape()[2], feat.shape()[3]);
    let hw = h * w;
    let rows = feat
        .slice(&[b, 0, 0, 0], &[b + 1, c, h, w])
        .reshape(&[c, hw])
        .permute(&[1, 0]); // [hw, c]
    let mut onehot = vec![0.0; locs.len() * hw];
    for (i, &loc) in locs.iter().enumerate() {
        assert!(loc < hw);
        onehot[i * hw + loc] = 1.0;
    }
    Tensor::from_vec(onehot, &[locs.len(), hw]).matmul(&rows) // [s, c]
}

// ── projection heads ──

/// One two-layer MLP per encoder tap (tap_dim -> 256 -> projection_dim),
/// with L2-normalized outputs. Trained jointly with the rest.
pub struct ProjectionHeads {
    pub mlps: Vec<(Linear, Linear)>,
}

impl ProjectionHeads {
    pub fn new(tap_dims: &[usize; NUM_TAPS], cfg: &NceConfig, rng: &mut ChaCha8Rng) -> ProjectionHeads {
        let mlps = tap_dims
            .iter()
            .map(|&d| (Linear::new(d, HEAD_HIDDEN, rng), Linear::new(HEAD_HIDDEN, cfg.projection_dim, rng)))
            .collect();
        ProjectionHeads { mlps }
    }

    /// Projects [n, tap_dim] feature rows to unit vectors [n, projection_dim].
    pub fn project(&self, tap: usize, rows: &Tensor) -> Tensor {
        let (fc1, fc2) = &self.mlps[tap];
        fc2.forward(&fc1.forward(rows).relu()).l2_normalize_rows()
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        for (i, (fc1, fc2)) in self.mlps.iter_mut().enumerate() {
            fc1.visit_params(&format!("{prefix}.tap{i}.fc1"), f);
            fc2.visit_params(&format!("{prefix}.tap{i}.fc2"), f);
        }
    }
}

// ── global content loss ──

/// Multilayer patchwise contrast between source taps and translated taps.
/// For each configured tap and each image, samples `patches_per_layer`
/// locations (shared between the two feature stacks), projects both, and
/// applies the paired-set infoNCE. Mean over taps and images.
pub fn global_content_loss(
    taps_x: &[Tensor],
    taps_yhat: &[Tensor],
    heads: &ProjectionHeads,
    cfg: &NceConfig,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    assert_eq!(taps_x.len(), NUM_TAPS);
    assert_eq!(taps_yhat.len(), NUM_TAPS);
    let mut terms: Vec<Tensor> = Vec::new();
    for &tap in &cfg.tap_indices() {
        let tx = &taps_x[tap];
        let ty = &taps_yhat[tap];
        assert_eq!(tx.shape(), ty.shape(), "tap {tap} shape mismatch");
        let (b, h, w) = (tx.shape()[0], tx.shape()[2], tx.shape()[3]);
        let s = cfg.patches_per_layer;
        assert!(s <= h * w, "patches_per_layer {s} exceeds {h}x{w} positions");
        for bi in 0..b {
            let locs = sample_locations(rng, h * w, s);
            let px = heads.project(tap, &gather_rows(tx, bi, &locs));
            let py = heads.project(tap, &gather_rows(ty, bi, &locs));
            terms.push(nce_matrix_loss(&py, &px, cfg.temperature));
        }
    }
    mean_of(&terms)
}

// ── instance content loss ──

/// Contrast within each instance box: RoIAlign both final content maps at
/// the box to an r x r grid, project the cells with the final tap's head,
/// and contrast matching cells. Returns the mean over instances plus the
/// count of degenerate boxes that were filtered out.
pub fn instance_content_loss(
    c_x: &Tensor,
    c_yhat: &Tensor,
    boxes: &[Vec<BoundingBox>],
    heads: &ProjectionHeads,
    cfg: &NceConfig,
    r: usize,
) -> (Tensor, usize) {
    assert_eq!(c_x.shape(), c_yhat.shape());
    assert_eq!(c_x.rank(), 4);
    let (b, lc, h, w) = (c_x.shape()[0], c_x.shape()[1], c_x.shape()[2], c_x.shape()[3]);
    assert_eq!(boxes.len(), b);
    let (img_w, img_h) = ((4 * w) as f64, (4 * h) as f64);
    let final_tap = NUM_TAPS - 1;
    let m = r * r;

    let mut terms: Vec<Tensor> = Vec::new();
    let mut filtered = 0usize;
    for bi in 0..b {
        let cx_b = c_x.slice(&[bi, 0, 0, 0], &[bi + 1, lc, h, w]).reshape(&[lc, h, w]);
        let cy_b = c_yhat.slice(&[bi, 0, 0, 0], &[bi + 1, lc, h, w]).reshape(&[lc, h, w]);
        for bx in &boxes[bi] {
            if bx.validate(img_w, img_h).is_err() {
                filtered += 1;
                continue;
            }
            let nb = bx.norm(img_w, img_h);
            let rx = roi_extract(&cx_b, nb, r).reshape(&[lc, m]).permute(&[1, 0]);
            let ry = roi_extract(&cy_b, nb, r).reshape(&[lc, m]).permute(&[1, 0]);
            let px = heads.project(final_tap, &rx);
            let py = heads.project(final_tap, &ry);
            terms.push(nce_matrix_loss(&py, &px, cfg.temperature));
        }
    }
    if terms.is_empty() {
        return (Tensor::zeros(&[1]), filtered);
    }
    (mean_of(&terms), filtered)
}

fn mean_of(terms: &[Tensor]) -> Tensor {
    assert!(!terms.is_empty());
    let mut acc = terms[0].clone();
    for t in &terms[1..] {
        acc = acc.add(t);
    }
    acc.scale(1.0 / terms.len() as f64)
}

// ── reconstruction ──

/// Mean absolute difference over all elements.
pub fn l1_mean(a: &Tensor, b: &Tensor) -> Tensor {
    a.sub(b).abs().mean_all()
}

/// Identity-path reconstruction: || G(T(E(y), S(y))) - y ||_1, no instance
/// tokens.
pub fn image_recon_loss(
    y: &Tensor,
    enc: &ContentEncoder,
    sty: &StyleEncoder,
    agg: &Aggregator,
    gen: &Generator,
) -> Tensor {
    let c = enc.forward(y);
    let s = sty.forward(y);
    let empty: Vec<Vec<BoundingBox>> = vec![Vec::new(); y.shape()[0]];
    let (u, _) = agg.aggregate(&c, &empty, &s);
    l1_mean(&gen.forward(&u), y)
}

/// || S(y_hat) - s ||_1 over style dimensions.
pub fn style_recon_loss(yhat: &Tensor, s: &Tensor, sty: &StyleEncoder) -> Tensor {
    l1_mean(&sty.forward(yhat), s)
}

// ── combination ──

/// gan_g + lambda_glob * nce_global + lambda_ins * nce_instance
///       + lambda_style * recon_style + lambda_img * recon_img.
pub fn total_loss(
    gan_g: &Tensor,
    nce_global: &Tensor,
    nce_instance: &Tensor,
    recon_style: &Tensor,
    recon_img: &Tensor,
    w: &LossWeights,
) -> Tensor {
    w.validate().expect("loss weights validated at config time");
    gan_g
        .add(&nce_global.scale(w.lambda_glob))
        .add(&nce_instance.scale(w.lambda_ins))
        .add(&recon_style.scale(w.lambda_style))
        .add(&recon_img.scale(w.lambda_img))
}
