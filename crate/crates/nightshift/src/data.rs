//! Procedural two-domain dataset with box annotations, plus dataset I/O.
//!
//! Scenes are built so that content (shape geometry) is domain-invariant
//! while style (palette) is domain-specific: domain A is a daylight palette,
//! domain B a night palette, and the same seed yields identical geometry in
//! both domains. Images are stored as binary PPM (P6) with a JSONL
//! annotation file, one object per line.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregator::BoundingBox;
use crate::rng::stream_rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAX_INSTANCES: usize = 6;
const GEOMETRY_STREAM: u64 = 0x67656f6d; // "geom"
const PALETTE_STREAM: u64 = 0x70616c65; // "pale"

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::A => write!(f, "A"),
            Domain::B => write!(f, "B"),
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Domain> {
        match s {
            "A" | "a" => Ok(Domain::A),
            "B" | "b" => Ok(Domain::B),
            other => Err(Error::Data(format!("unknown domain {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SceneSpec {
    pub seed: u64,
    pub image_size: usize,
    /// Requested instance count; the generator may place fewer if it cannot
    /// find non-overlapping positions.
    pub n_instances: usize,
    pub domain: Domain,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_instances > MAX_INSTANCES {
            return Err(Error::Data(format!(
                "n_instances {} exceeds {MAX_INSTANCES}",
                self.n_instances
            )));
        }
        if self.image_size < 16 || self.image_size % 4 != 0 {
            return Err(Error::Data(format!(
                "image_size {} must be >= 16 and divisible by 4",
                self.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    /// 3 x H x W in [-1, 1].
    pub image: Tensor,
    pub boxes: Vec<BoundingBox>,
    pub domain: Domain,
    pub id: String,
}

// ── palettes ──

/// Background gradient (top, bottom) in [0, 1] RGB.
pub fn domain_palette(domain: Domain) -> ([f64; 3], [f64; 3]) {
    match domain {
        // day: sky blue fading to warm gray
        Domain::A => ([0.35, 0.62, 0.92], [0.72, 0.66, 0.58]),
        // night: near black fading to deep blue
        Domain::B => ([0.02, 0.02, 0.06], [0.06, 0.10, 0.25]),
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() + 1.0).fract() * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

// ── scene generation ──

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ShapeKind {
    Rectangle,
    Disc,
}

struct Placed {
    kind: ShapeKind,
    bx: BoundingBox,
}

/// Deterministic scene generation. Geometry draws come from a stream keyed
/// by seed only, palette draws from a stream keyed by (seed, domain), so the
/// two domains share geometry exactly and differ only in color.
pub fn gen_scene(spec: &SceneSpec) -> Result<Sample> {
    spec.validate()?;
    let side = spec.image_size;
    let sf = side as f64;
    let mut geom = stream_rng(spec.seed, GEOMETRY_STREAM);
    let domain_tag = match spec.domain {
        Domain::A => 0u64,
        Domain::B => 1u64,
    };
    let mut pal = stream_rng(spec.seed, PALETTE_STREAM ^ (domain_tag << 32));

    // place shapes without overlap
    let mut placed: Vec<Placed> = Vec::new();
    let mut dropped = 0usize;
    for _ in 0..spec.n_instances {
        let mut ok = false;
        for _ in 0..100 {
            let kind = if geom.gen::<f64>() < 0.5 { ShapeKind::Rectangle } else { ShapeKind::Disc };
            let area_frac: f64 = geom.gen_range(0.04..0.25);
            let aspect: f64 = geom.gen_range(0.6..1.6);
            let area_px = area_frac * sf * sf;
            let w = (area_px * aspect).sqrt().min(sf - 2.0);
            let h = (area_px / w).min(sf - 2.0);
            let cx = geom.gen_range(w / 2.0..sf - w / 2.0);
            let cy = geom.gen_range(h / 2.0..sf - h / 2.0);
            let bx = BoundingBox { cx, cy, w, h };
            let overlaps = placed.iter().any(|p| {
                (p.bx.cx - cx).abs() < (p.bx.w + w) / 2.0 && (p.bx.cy - cy).abs() < (p.bx.h + h) / 2.0
            });
            if !overlaps {
                placed.push(Placed { kind, bx });
                ok = true;
                break;
            }
        }
        if !ok {
            dropped += 1;
        }
    }
    if dropped > 0 {
        eprintln!(
            "warning: seed {} placed {} of {} instances (no room after 100 retries each)",
            spec.seed,
            placed.len(),
            spec.n_instances
        );
    }

    // paint background gradient in [0, 1]
    let (top, bottom) = domain_palette(spec.domain);
    let mut buf = vec![0.0f64; 3 * side * side];
    for i in 0..side {
        let t = if side == 1 { 0.0 } else { i as f64 / (side - 1) as f64 };
        for ch in 0..3 {
            let v = (1.0 - t) * top[ch] + t * bottom[ch];
            for j in 0..side {
                buf[(ch * side + i) * side + j] = v;
            }
        }
    }

    // paint instances
    for p in &placed {
        let hue = pal.gen::<f64>();
        let (fill, rim) = match spec.domain {
            Domain::A => (hsv_to_rgb(hue, 0.85, 0.9), None),
            Domain::B => (hsv_to_rgb(hue, 0.3, 0.22), Some(hsv_to_rgb(hue, 0.2, 0.95))),
        };
        let (a, b) = (p.bx.w / 2.0, p.bx.h / 2.0);
        let i0 = (p.bx.cy - b).floor().max(0.0) as usize;
        let i1 = ((p.bx.cy + b).ceil() as usize).min(side);
        let j0 = (p.bx.cx - a).floor().max(0.0) as usize;
        let j1 = ((p.bx.cx + a).ceil() as usize).min(side);
        for i in i0..i1 {
            for j in j0..j1 {
                let dy = i as f64 + 0.5 - p.bx.cy;
                let dx = j as f64 + 0.5 - p.bx.cx;
                let (inside, interior) = match p.kind {
                    ShapeKind::Rectangle => (
                        dx.abs() <= a && dy.abs() <= b,
                        dx.abs() <= a - 1.0 && dy.abs() <= b - 1.0,
                    ),
                    ShapeKind::Disc => {
                        let e = (dx / a).powi(2) + (dy / b).powi(2);
                        let es = (dx / (a - 1.0)).powi(2) + (dy / (b - 1.0)).powi(2);
                        (e <= 1.0, es <= 1.0)
                    }
                };
                if !inside {
                    continue;
                }
                let color = match (&rim, interior) {
                    (Some(r), false) => r,
                    _ => &fill,
                };
                for ch in 0..3 {
                    buf[(ch * side + i) * side + j] = color[ch];
                }
            }
        }
    }

    // [0, 1] -> [-1, 1]
    let data: Vec<f64> = buf.iter().map(|v| 2.0 * v - 1.0).collect();
    Ok(Sample {
        image: Tensor::from_vec(data, &[3, side, side]),
        boxes: placed.iter().map(|p| p.bx).collect(),
        domain: spec.domain,
        id: format!("{}_{:06}", spec.domain, spec.seed),
    })
}

// ── PPM I/O ──

/// Writes a [3, H, W] image in [-1, 1] as binary PPM (P6), rounding half-up
/// to 8 bits.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    assert_eq!(image.rank(), 3);
    assert_eq!(image.shape()[0], 3);
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut bytes = Vec::with_capacity(3 * h * w + 32);
    bytes.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    let d = image.data();
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                let v = d[(ch * h + i) * w + j];
                let q = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
                bytes.push(q);
            }
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Reads a binary PPM (P6) back to a [3, H, W] tensor in [-1, 1].
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let mut raw = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .read_to_end(&mut raw)?;
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));

    // header: magic, width, height, maxval, single whitespace, then data
    let mut pos = 0usize;
    let mut token = |raw: &[u8]| -> Result<String> {
        while pos < raw.len() && (raw[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos < raw.len() && raw[pos] == b'#' {
            while pos < raw.len() && raw[pos] != b'\n' {
                pos += 1;
            }
            while pos < raw.len() && (raw[pos] as char).is_whitespace() {
                pos += 1;
            }
        }
        let start = pos;
        while pos < raw.len() && !(raw[pos] as char).is_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&raw[start..pos]).into_owned())
    };

    if token(&raw).map_err(|_| bad("truncated header"))? != "P6" {
        return Err(bad("not a P6 PPM"));
    }
    let w: usize = token(&raw)?.parse().map_err(|_| bad("bad width"))?;
    let h: usize = token(&raw)?.parse().map_err(|_| bad("bad height"))?;
    let maxval: usize = token(&raw)?.parse().map_err(|_| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    pos += 1; // single whitespace byte after maxval
    let need = 3 * w * h;
    if raw.len() < pos + need {
        return Err(bad(&format!(
            "pixel count mismatch: need {need} bytes, have {}",
            raw.len().saturating_sub(pos)
        )));
    }
    let pix = &raw[pos..pos + need];
    let mut data = vec![0.0f64; 3 * h * w];
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                let b = pix[(i * w + j) * 3 + ch] as f64;
                data[(ch * h + i) * w + j] = b / 255.0 * 2.0 - 1.0;
            }
        }
    }
    Ok(Tensor::from_vec(data, &[3, h, w]))
}

// ── dataset I/O ──

#[derive(Serialize, Deserialize)]
struct Annotation {
    file: String,
    domain: Domain,
    boxes: Vec<[f64; 4]>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    count: usize,
    image_size: usize,
    domains: Vec<String>,
}

/// Layout: `images/*.ppm`, `annotations.jsonl`, `manifest.json`.
pub fn write_dataset(samples: &[Sample], dir: &Path) -> Result<()> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir)?;
    let mut lines = String::new();
    let mut image_size = 0usize;
    for s in samples {
        let rel = format!("images/{}.ppm", s.id);
        write_ppm(&dir.join(&rel), &s.image)?;
        image_size = s.image.shape()[1];
        let ann = Annotation {
            file: rel,
            domain: s.domain,
            boxes: s.boxes.iter().map(|b| [b.cx, b.cy, b.w, b.h]).collect(),
        };
        lines.push_str(&serde_json::to_string(&ann)?);
        lines.push('\n');
    }
    fs::write(dir.join("annotations.jsonl"), lines)?;
    let manifest = Manifest {
        count: samples.len(),
        image_size,
        domains: vec!["A".into(), "B".into()],
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a dataset directory; a missing annotations file yields an empty
/// list rather than an error.
pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let ann_path = dir.join("annotations.jsonl");
    if !ann_path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&ann_path)?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ann: Annotation = serde_json::from_str(line).map_err(|e| {
            Error::Data(format!("{}:{}: malformed annotation: {e}", ann_path.display(), ln + 1))
        })?;
        let image = read_ppm(&dir.join(&ann.file))?;
        let id = Path::new(&ann.file)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        out.push(Sample {
            image,
            boxes: ann
                .boxes
                .iter()
                .map(|b| BoundingBox { cx: b[0], cy: b[1], w: b[2], h: b[3] })
                .collect(),
            domain: ann.domain,
            id,
        });
    }
    Ok(out)
}

/// Stacks selected samples into a [B, 3, H, W] batch, keeping the ragged
/// per-sample box lists.
pub fn load_batch(samples: &[Sample], indices: &[usize]) -> Result<(Tensor, Vec<Vec<BoundingBox>>)> {
    assert!(!indices.is_empty());
    let first = &samples[indices[0]];
    let shape = first.image.shape().to_vec();
    let mut views = Vec::with_capacity(indices.len());
    let mut boxes = Vec::with_capacity(indices.len());
    for &ix in indices {
        let s = &samples[ix];
        if s.image.shape() != shape.as_slice() {
            return Err(Error::Data(format!(
                "heterogeneous image sizes in batch: {:?} vs {:?}",
                s.image.shape(),
                shape
            )));
        }
        views.push(s.image.reshape(&[1, shape[0], shape[1], shape[2]]));
        boxes.push(s.boxes.clone());
    }
    let refs: Vec<&Tensor> = views.iter().collect();
    let batch = if refs.len() == 1 { views[0].clone() } else { Tensor::cat(&refs, 0) };
    Ok((batch, boxes))
}
