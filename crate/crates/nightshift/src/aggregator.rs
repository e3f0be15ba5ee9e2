//! Instance-aware transformer aggregator.
//!
//! Sits between the content encoder and the generator: embeds the content
//! map into tokens with a strided conv stack, extracts per-instance tokens by
//! RoIAlign through the same convs, adds sinusoidal box-geometry position
//! embeddings, mixes everything with style-conditioned (AdaIN) transformer
//! blocks, and expands the grid tokens back to a feature map with a
//! transposed-conv stack.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Conv2d, ConvTranspose2d, Linear, ParamFn};
use crate::tensor::{PadMode, Tensor};
use crate::{Error, Result};

// ── config ──

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregatorConfig {
    /// Patch stride `k`; also the RoIAlign output resolution, so instance
    /// tokens can share the patch-embedding convolutions.
    pub patch_stride: usize,
    /// Token width `l'_c`.
    pub token_dim: usize,
    /// Number of transformer blocks.
    pub blocks: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    /// Sinusoidal frequency bands `K`; tied by 8K = token_dim so the
    /// four-part geometry embedding adds directly onto tokens.
    pub freq_bands: usize,
}

impl Default for AggregatorConfig {
    fn default() -> AggregatorConfig {
        AggregatorConfig::desk()
    }
}

impl AggregatorConfig {
    pub fn desk() -> AggregatorConfig {
        AggregatorConfig {
            patch_stride: 2,
            token_dim: 64,
            blocks: 4,
            heads: 4,
            mlp_dim: 256,
            freq_bands: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.patch_stride, 1 | 2 | 4 | 8) {
            return Err(Error::Config(format!(
                "patch_stride {} must be one of 1, 2, 4, 8",
                self.patch_stride
            )));
        }
        if self.token_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "token_dim {} must be divisible by heads {}",
                self.token_dim, self.heads
            )));
        }
        if 8 * self.freq_bands != self.token_dim {
            return Err(Error::Config(format!(
                "8 * freq_bands ({}) must equal token_dim ({})",
                8 * self.freq_bands,
                self.token_dim
            )));
        }
        if self.blocks == 0 || self.mlp_dim == 0 {
            return Err(Error::Config("blocks and mlp_dim must be >= 1".into()));
        }
        Ok(())
    }
}

// ── bounding boxes ──

/// Axis-aligned box in image pixel units, center + size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    /// Normalized geometry (cx/W, cy/H, w/W, h/H), each in [0, 1].
    pub fn norm(&self, img_w: f64, img_h: f64) -> [f64; 4] {
        [self.cx / img_w, self.cy / img_h, self.w / img_w, self.h / img_h]
    }

    pub fn validate(&self, img_w: f64, img_h: f64) -> Result<()> {
        if self.w < 2.0 || self.h < 2.0 {
            return Err(Error::Data(format!("degenerate box {self:?} (side < 2 px)")));
        }
        let inside = self.cx - self.w / 2.0 >= -1e-9
            && self.cy - self.h / 2.0 >= -1e-9
            && self.cx + self.w / 2.0 <= img_w + 1e-9
            && self.cy + self.h / 2.0 <= img_h + 1e-9;
        if !inside {
            return Err(Error::Data(format!(
                "box {self:?} not inside {img_w}x{img_h} image"
            )));
        }
        Ok(())
    }
}

/// Pixel geometry of grid cell (i, j) in a gh x gw partition of the image.
/// Grid position embeddings are built from these boxes through the exact
/// same code path as instance boxes, so a box that coincides with a cell
/// gets a bit-identical embedding.
pub fn grid_cell_box(i: usize, j: usize, gh: usize, gw: usize, img_h: f64, img_w: f64) -> BoundingBox {
    let cw = img_w / gw as f64;
    let ch = img_h / gh as f64;
    BoundingBox {
        cx: (j as f64 + 0.5) * cw,
        cy: (i as f64 + 0.5) * ch,
        w: cw,
        h: ch,
    }
}

// ── position embeddings ──

/// Sinusoidal ladder (sin 2^0 pi a, cos 2^0 pi a, ..., sin 2^{K-1} pi a,
/// cos 2^{K-1} pi a).
pub fn gamma(a: f64, k_bands: usize) -> Vec<f64> {
    debug_assert!(
        (-1e-9..=1.0 + 1e-9).contains(&a),
        "gamma input {a} outside [0, 1]"
    );
    let mut v = Vec::with_capacity(2 * k_bands);
    let mut freq = std::f64::consts::PI;
    for _ in 0..k_bands {
        v.push((freq * a).sin());
        v.push((freq * a).cos());
        freq *= 2.0;
    }
    v
}

/// Geometry embedding of one box: Cat(gamma(cx/W), gamma(cy/H), gamma(w/W),
/// gamma(h/H)), length 8K = token_dim.
pub fn pos_embed_instance(bx: &BoundingBox, img_w: f64, img_h: f64, cfg: &AggregatorConfig) -> Vec<f64> {
    let n = bx.norm(img_w, img_h);
    let mut row = Vec::with_capacity(cfg.token_dim);
    for a in n {
        row.extend(gamma(a, cfg.freq_bands));
    }
    row
}

/// Rows of grid-cell embeddings in raster order, shape [gh*gw, token_dim].
pub fn pos_embed_global(gh: usize, gw: usize, img_w: f64, img_h: f64, cfg: &AggregatorConfig) -> Tensor {
    let mut data = Vec::with_capacity(gh * gw * cfg.token_dim);
    for i in 0..gh {
        for j in 0..gw {
            let cell = grid_cell_box(i, j, gh, gw, img_h, img_w);
            data.extend(pos_embed_instance(&cell, img_w, img_h, cfg));
        }
    }
    Tensor::from_vec(data, &[gh * gw, cfg.token_dim])
}

// ── RoIAlign ──

/// Samples a normalized box from a [C, h, w] feature map at k x k bin
/// centers (RoIAlign, one bilinear tap per bin). Differentiable w.r.t. `c`.
pub fn roi_extract(c: &Tensor, nbox: [f64; 4], k: usize) -> Tensor {
    assert_eq!(c.rank(), 3, "roi_extract expects C x h x w");
    let (ch, h, w) = (c.shape()[0], c.shape()[1], c.shape()[2]);
    let cxf = nbox[0] * w as f64;
    let cyf = nbox[1] * h as f64;
    let wf = nbox[2] * w as f64;
    let hf = nbox[3] * h as f64;
    let x0 = cxf - wf / 2.0;
    let y0 = cyf - hf / 2.0;
    let bw = wf / k as f64;
    let bh = hf / k as f64;
    let mut points = Vec::with_capacity(k * k);
    for bi in 0..k {
        for bj in 0..k {
            points.push((x0 + (bj as f64 + 0.5) * bw, y0 + (bi as f64 + 0.5) * bh));
        }
    }
    c.bilinear_sample(&points).permute(&[1, 0]).reshape(&[ch, k, k])
}

// ── patch embedding ──

/// Strided conv stack: log2(k) overlapped Conv3x3 stride-2 pad-1 blocks with
/// ReLU between (single stride-1 conv when k = 1). The same stack embeds the
/// grid (on the full map) and instances (on k x k ROIs, collapsing to 1x1).
pub struct PatchEmbed {
    pub convs: Vec<Conv2d>,
    pub k: usize,
}

impl PatchEmbed {
    pub fn new(content_channels: usize, cfg: &AggregatorConfig, rng: &mut ChaCha8Rng) -> PatchEmbed {
        let k = cfg.patch_stride;
        let n = if k == 1 { 1 } else { k.trailing_zeros() as usize };
        let mut convs = Vec::with_capacity(n);
        for i in 0..n {
            let c_in = if i == 0 { content_channels } else { cfg.token_dim };
            let stride = if k == 1 { 1 } else { 2 };
            convs.push(Conv2d::new(c_in, cfg.token_dim, 3, stride, 1, PadMode::Zeros, rng));
        }
        PatchEmbed { convs, k }
    }

    /// [B, l_c, h, w] -> [B, token_dim, h/k, w/k].
    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert!(
            x.shape()[2] % self.k == 0 && x.shape()[3] % self.k == 0,
            "patch_embed: spatial dims {:?} not divisible by stride {}",
            &x.shape()[2..],
            self.k
        );
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h);
            if i + 1 < self.convs.len() {
                h = h.relu();
            }
        }
        h
    }

    /// One ROI of shape [l_c, k, k] -> token vector [token_dim]; shares the
    /// grid weights so an aligned ROI reproduces its grid token.
    pub fn embed_instance(&self, roi: &Tensor) -> Tensor {
        assert_eq!(roi.rank(), 3);
        assert_eq!(roi.shape()[1], self.k, "instance ROI must be k x k");
        assert_eq!(roi.shape()[2], self.k, "instance ROI must be k x k");
        let (c, k) = (roi.shape()[0], self.k);
        let td = self.convs.last().unwrap().weight.shape()[0];
        self.forward(&roi.reshape(&[1, c, k, k])).reshape(&[td])
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            conv.visit_params(&format!("{prefix}.c{i}"), f);
        }
    }
}

// ── AdaIN ──

/// Per-site style modulation: effective scale and shift, each [1, token_dim].
pub struct StyleParams {
    pub scale: Tensor,
    pub shift: Tensor,
}

/// Standardizes tokens per channel over the token axis (population variance,
/// epsilon 1e-5 inside the square root).
pub fn adain_normalize(z: &Tensor) -> Tensor {
    assert!(z.shape()[0] >= 2, "adain needs at least 2 tokens");
    let mu = z.mean(&[0], true);
    let v = z.var(&[0], true);
    z.sub(&mu).div(&v.add_scalar(1e-5).sqrt())
}

pub fn adain(z: &Tensor, sp: &StyleParams) -> Tensor {
    adain_normalize(z).mul(&sp.scale).add(&sp.shift)
}

/// Maps a style code row [1, l_s] through one learned affine layer to
/// (scale, shift). A zero-initialized map yields scale 1, shift 0, so AdaIN
/// starts as plain normalization.
pub fn style_to_params(map: &Linear, s_row: &Tensor) -> StyleParams {
    let td = map.weight.shape()[1] / 2;
    let out = map.forward(s_row);
    let scale = out.slice(&[0, 0], &[1, td]).add_scalar(1.0);
    let shift = out.slice(&[0, td], &[1, 2 * td]);
    StyleParams { scale, shift }
}

// ── transformer block ──

/// Pre-norm block with AdaIN in place of LayerNorm:
/// z' = MSA(AdaIN(z, s)) + z; z_next = MLP(AdaIN(z', s)) + z'.
pub struct TransformerBlock {
    pub qkv: Linear,  // token_dim -> 3 * token_dim, fused
    pub proj: Linear, // token_dim -> token_dim
    pub fc1: Linear,  // token_dim -> mlp_dim
    pub fc2: Linear,  // mlp_dim -> token_dim
    pub sm_msa: Linear, // l_s -> 2 * token_dim, zero-init
    pub sm_mlp: Linear, // l_s -> 2 * token_dim, zero-init
    pub heads: usize,
}

impl TransformerBlock {
    pub fn new(cfg: &AggregatorConfig, style_dim: usize, rng: &mut ChaCha8Rng) -> TransformerBlock {
        let d = cfg.token_dim;
        TransformerBlock {
            qkv: Linear::new(d, 3 * d, rng),
            proj: Linear::new(d, d, rng),
            fc1: Linear::new(d, cfg.mlp_dim, rng),
            fc2: Linear::new(cfg.mlp_dim, d, rng),
            sm_msa: Linear::zeros(style_dim, 2 * d),
            sm_mlp: Linear::zeros(style_dim, 2 * d),
            heads: cfg.heads,
        }
    }

    /// Multi-head self-attention; also returns the attention probabilities
    /// [heads, M, M] for inspection.
    pub fn msa(&self, z: &Tensor) -> (Tensor, Tensor) {
        let m = z.shape()[0];
        let d = z.shape()[1];
        let nh = self.heads;
        let dh = d / nh;
        let qkv = self.qkv.forward(z);
        let heads_of = |t: &Tensor| t.reshape(&[m, nh, dh]).permute(&[1, 0, 2]);
        let q = heads_of(&qkv.slice(&[0, 0], &[m, d])).scale(1.0 / (dh as f64).sqrt());
        let k = heads_of(&qkv.slice(&[0, d], &[m, 2 * d]));
        let v = heads_of(&qkv.slice(&[0, 2 * d], &[m, 3 * d]));
        let probs = q.matmul(&k.permute(&[0, 2, 1])).softmax(2);
        let mixed = probs.matmul(&v).permute(&[1, 0, 2]).reshape(&[m, d]);
        (self.proj.forward(&mixed), probs)
    }

    pub fn forward(&self, z: &Tensor, s_row: &Tensor) -> Tensor {
        let sp = style_to_params(&self.sm_msa, s_row);
        let (attn, _) = self.msa(&adain(z, &sp));
        let zp = attn.add(z);
        let sp = style_to_params(&self.sm_mlp, s_row);
        let hidden = self.fc1.forward(&adain(&zp, &sp)).gelu();
        self.fc2.forward(&hidden).add(&zp)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        self.qkv.visit_params(&format!("{prefix}.qkv"), f);
        self.proj.visit_params(&format!("{prefix}.proj"), f);
        self.fc1.visit_params(&format!("{prefix}.fc1"), f);
        self.fc2.visit_params(&format!("{prefix}.fc2"), f);
        self.sm_msa.visit_params(&format!("{prefix}.sm_msa"), f);
        self.sm_mlp.visit_params(&format!("{prefix}.sm_mlp"), f);
    }
}

// ── token assembly ──

/// One sample's token sequence: G raster-ordered grid tokens followed by N
/// instance tokens, position embeddings already added.
pub struct TokenSequence {
    pub tokens: Tensor, // [G + N, token_dim]
    pub grid: (usize, usize),
    pub n_instances: usize,
    /// Normalized (cx, cy, w, h) per token, grid cells first.
    pub geometry: Vec<[f64; 4]>,
}

pub fn token_count(h: usize, w: usize, k: usize, n_instances: usize) -> usize {
    (h / k) * (w / k) + n_instances
}

/// Assembles z_0 for one sample from its embedded grid [token_dim, gh, gw],
/// instance token vectors, and the matching boxes.
pub fn build_tokens(
    p: &Tensor,
    instance_tokens: &[Tensor],
    boxes: &[BoundingBox],
    cfg: &AggregatorConfig,
    img_w: f64,
    img_h: f64,
) -> TokenSequence {
    assert_eq!(p.rank(), 3, "build_tokens expects token_dim x gh x gw");
    assert_eq!(
        instance_tokens.len(),
        boxes.len(),
        "instance token / box count mismatch"
    );
    let (td, gh, gw) = (p.shape()[0], p.shape()[1], p.shape()[2]);
    let g = gh * gw;
    let n = boxes.len();

    let grid_tokens = p.reshape(&[td, g]).permute(&[1, 0]);
    let tokens = if n == 0 {
        grid_tokens
    } else {
        let rows: Vec<Tensor> = instance_tokens.iter().map(|t| t.reshape(&[1, td])).collect();
        let mut parts: Vec<&Tensor> = vec![&grid_tokens];
        parts.extend(rows.iter());
        Tensor::cat(&parts, 0)
    };

    let mut geometry = Vec::with_capacity(g + n);
    let mut embed = Vec::with_capacity((g + n) * td);
    for i in 0..gh {
        for j in 0..gw {
            let cell = grid_cell_box(i, j, gh, gw, img_h, img_w);
            geometry.push(cell.norm(img_w, img_h));
            embed.extend(pos_embed_instance(&cell, img_w, img_h, cfg));
        }
    }
    for bx in boxes {
        geometry.push(bx.norm(img_w, img_h));
        embed.extend(pos_embed_instance(bx, img_w, img_h, cfg));
    }
    let e = Tensor::from_vec(embed, &[g + n, td]);

    TokenSequence {
        tokens: tokens.add(&e),
        grid: (gh, gw),
        n_instances: n,
        geometry,
    }
}

// ── the aggregator ──

pub struct Aggregator {
    pub cfg: AggregatorConfig,
    pub embed: PatchEmbed,
    pub blocks: Vec<TransformerBlock>,
    pub deconvs: Vec<ConvTranspose2d>,
}

impl Aggregator {
    pub fn new(
        cfg: &AggregatorConfig,
        content_channels: usize,
        style_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Aggregator {
        let embed = PatchEmbed::new(content_channels, cfg, rng);
        let blocks = (0..cfg.blocks)
            .map(|_| TransformerBlock::new(cfg, style_dim, rng))
            .collect();
        let k = cfg.patch_stride;
        let n = if k == 1 { 1 } else { k.trailing_zeros() as usize };
        let mut deconvs = Vec::with_capacity(n);
        for i in 0..n {
            let c_out = if i + 1 == n { content_channels } else { cfg.token_dim };
            let dc = if k == 1 {
                ConvTranspose2d::new(cfg.token_dim, c_out, 3, 1, 1, rng)
            } else {
                ConvTranspose2d::new(cfg.token_dim, c_out, 4, 2, 1, rng)
            };
            deconvs.push(dc);
        }
        Aggregator { cfg: *cfg, embed, blocks, deconvs }
    }

    /// Expands grid tokens [B, token_dim, gh, gw] back to [B, l_c, h, w]
    /// with the transposed stack symmetric to the patch embedding.
    pub fn deconv_expand(&self, grid: &Tensor) -> Tensor {
        let mut h = grid.clone();
        for (i, dc) in self.deconvs.iter().enumerate() {
            h = dc.forward(&h);
            if i + 1 < self.deconvs.len() {
                h = h.relu();
            }
        }
        h
    }

    /// Full pass: content map + boxes + style codes -> mixed feature map `u`
    /// plus the post-block instance tokens per sample.
    pub fn aggregate(
        &self,
        c: &Tensor,
        boxes: &[Vec<BoundingBox>],
        s: &Tensor,
    ) -> (Tensor, Vec<Vec<Tensor>>) {
        assert_eq!(c.rank(), 4, "aggregate expects B x l_c x h x w");
        let (b, lc, h, w) = (c.shape()[0], c.shape()[1], c.shape()[2], c.shape()[3]);
        let k = self.cfg.patch_stride;
        assert!(h % k == 0 && w % k == 0, "feature dims must be divisible by k");
        assert_eq!(boxes.len(), b, "one box list per sample");
        assert_eq!(s.shape(), &[b, self.blocks[0].sm_msa.weight.shape()[0]]);
        let td = self.cfg.token_dim;
        let (gh, gw) = (h / k, w / k);
        let g = gh * gw;
        // feature stride 4 from the encoder
        let (img_w, img_h) = ((4 * w) as f64, (4 * h) as f64);

        let p = self.embed.forward(c);
        let ls = s.shape()[1];

        let mut grid_parts = Vec::with_capacity(b);
        let mut all_ins = Vec::with_capacity(b);
        for bi in 0..b {
            let p_b = p
                .slice(&[bi, 0, 0, 0], &[bi + 1, td, gh, gw])
                .reshape(&[td, gh, gw]);
            let c_b = c.slice(&[bi, 0, 0, 0], &[bi + 1, lc, h, w]).reshape(&[lc, h, w]);

            let inst: Vec<Tensor> = boxes[bi]
                .iter()
                .map(|bx| {
                    let roi = roi_extract(&c_b, bx.norm(img_w, img_h), k);
                    self.embed.embed_instance(&roi)
                })
                .collect();

            let seq = build_tokens(&p_b, &inst, &boxes[bi], &self.cfg, img_w, img_h);
            let s_row = s.slice(&[bi, 0], &[bi + 1, ls]);
            let mut z = seq.tokens;
            for blk in &self.blocks {
                z = blk.forward(&z, &s_row);
            }

            let n = boxes[bi].len();
            let z_grid = z.slice(&[0, 0], &[g, td]);
            grid_parts.push(z_grid.permute(&[1, 0]).reshape(&[1, td, gh, gw]));
            let mut ins_out = Vec::with_capacity(n);
            for t in 0..n {
                ins_out.push(z.slice(&[g + t, 0], &[g + t + 1, td]).reshape(&[td]));
            }
            all_ins.push(ins_out);
        }

        let refs: Vec<&Tensor> = grid_parts.iter().collect();
        let grid = if b == 1 { grid_parts[0].clone() } else { Tensor::cat(&refs, 0) };
        (self.deconv_expand(&grid), all_ins)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn) {
        self.embed.visit_params(&format!("{prefix}.embed"), f);
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.visit_params(&format!("{prefix}.block{i}"), f);
        }
        for (i, dc) in self.deconvs.iter_mut().enumerate() {
            dc.visit_params(&format!("{prefix}.deconv{i}"), f);
        }
    }
}
