//! Evaluation metrics: SSIM, instance-level SSIM over box crops, and a
//! palette-statistics distance used as a desk-scale domain-fidelity proxy.
//!
//! These run on plain f64 buffers (no gradients). SSIM uses an 8x8 uniform
//! window at stride 1 (valid positions only) with the standard constants for
//! dynamic range L = 2, since images live in [-1, 1].

use crate::aggregator::BoundingBox;
use crate::data::{domain_palette, Domain};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConfig {
    /// Square window side (uniform weights).
    pub window: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimConfig {
    fn default() -> SsimConfig {
        // L = 2: C1 = (0.01 L)^2, C2 = (0.03 L)^2
        SsimConfig { window: 8, c1: 0.0004, c2: 0.0036 }
    }
}

fn check_image(t: &Tensor, who: &str) -> Result<()> {
    if t.rank() != 3 || t.shape()[0] != 3 {
        return Err(Error::InvalidArg {
            op: "metrics",
            msg: format!("{who}: expected 3 x H x W, got {:?}", t.shape()),
        });
    }
    Ok(())
}

/// Mean SSIM over all valid window positions and the three channels.
pub fn ssim(a: &Tensor, b: &Tensor, cfg: &SsimConfig) -> Result<f64> {
    check_image(a, "ssim")?;
    check_image(b, "ssim")?;
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (h, w) = (a.shape()[1], a.shape()[2]);
    let k = cfg.window;
    if h < k || w < k {
        return Err(Error::InvalidArg {
            op: "ssim",
            msg: format!("{h}x{w} image smaller than {k}x{k} window"),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let n = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        let pa = &ad[ch * h * w..(ch + 1) * h * w];
        let pb = &bd[ch * h * w..(ch + 1) * h * w];
        for i0 in 0..=(h - k) {
            for j0 in 0..=(w - k) {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in i0..i0 + k {
                    for j in j0..j0 + k {
                        let x = pa[i * w + j];
                        let y = pb[i * w + j];
                        sa += x;
                        sb += y;
                        saa += x * x;
                        sbb += y * y;
                        sab += x * y;
                    }
                }
                let ma = sa / n;
                let mb = sb / n;
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                let lum = (2.0 * ma * mb + cfg.c1) / (ma * ma + mb * mb + cfg.c1);
                let cs = (2.0 * cov + cfg.c2) / (va + vb + cfg.c2);
                total += lum * cs;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

fn crop_bounds(bx: &BoundingBox, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let i0 = ((bx.cy - bx.h / 2.0).floor().max(0.0)) as usize;
    let i1 = (((bx.cy + bx.h / 2.0).ceil()) as usize).min(h);
    let j0 = ((bx.cx - bx.w / 2.0).floor().max(0.0)) as usize;
    let j1 = (((bx.cx + bx.w / 2.0).ceil()) as usize).min(w);
    (i0, i1, j0, j1)
}

fn crop(img: &Tensor, i0: usize, i1: usize, j0: usize, j1: usize) -> Tensor {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let (ch, cw) = (i1 - i0, j1 - j0);
    let d = img.data();
    let mut out = Vec::with_capacity(3 * ch * cw);
    for c in 0..3 {
        for i in i0..i1 {
            for j in j0..j1 {
                out.push(d[(c * h + i) * w + j]);
            }
        }
    }
    Tensor::from_vec(out, &[3, ch, cw])
}

/// Mean SSIM over per-box crops of both images. Boxes whose crop is smaller
/// than the window are skipped; it is an error if none remain.
pub fn instance_ssim(a: &Tensor, b: &Tensor, boxes: &[BoundingBox], cfg: &SsimConfig) -> Result<f64> {
    check_image(a, "instance_ssim")?;
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "instance_ssim",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (h, w) = (a.shape()[1], a.shape()[2]);
    let mut total = 0.0;
    let mut used = 0usize;
    for bx in boxes {
        let (i0, i1, j0, j1) = crop_bounds(bx, h, w);
        if i1 - i0 < cfg.window || j1 - j0 < cfg.window {
            continue;
        }
        total += ssim(&crop(a, i0, i1, j0, j1), &crop(b, i0, i1, j0, j1), cfg)?;
        used += 1;
    }
    if used == 0 {
        return Err(Error::InvalidArg {
            op: "instance_ssim",
            msg: "no box crop fits the SSIM window".into(),
        });
    }
    Ok(total / used as f64)
}

/// Per-channel (mean, std) of an image as a 6-vector.
pub fn channel_stats(img: &Tensor) -> [f64; 6] {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let n = (h * w) as f64;
    let d = img.data();
    let mut out = [0.0; 6];
    for ch in 0..3 {
        let p = &d[ch * h * w..(ch + 1) * h * w];
        let mean = p.iter().sum::<f64>() / n;
        let var = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        out[ch] = mean;
        out[3 + ch] = var.sqrt();
    }
    out
}

/// Reference (mean, std) statistics of a domain's background gradient, in
/// [-1, 1] units. The gradient is linear top to bottom, so per channel the
/// pixel distribution is uniform between the two palette endpoints.
pub fn domain_stats(domain: Domain) -> [f64; 6] {
    let (top, bottom) = domain_palette(domain);
    let mut out = [0.0; 6];
    for ch in 0..3 {
        let t = 2.0 * top[ch] - 1.0;
        let b = 2.0 * bottom[ch] - 1.0;
        out[ch] = (t + b) / 2.0;
        out[3 + ch] = (b - t).abs() / 12.0f64.sqrt();
    }
    out
}

/// L2 distance between the image's channel statistics and the domain's
/// background statistics. Lower = closer to that domain's look.
pub fn palette_distance(img: &Tensor, domain: Domain) -> f64 {
    let a = channel_stats(img);
    let b = domain_stats(domain);
    a.iter()
        .zip(&b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
