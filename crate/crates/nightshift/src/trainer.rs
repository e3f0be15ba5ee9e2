//! Training: Adam, the learning-rate schedule, the alternating D/G step,
//! the outer loop with CSV logging, and binary checkpoints.
//!
//! Determinism contract: everything random in step `t` comes from a fresh
//! stream keyed by (seed, t) — batch choice, style codes, NCE patch
//! locations. A resumed run therefore replays bit-identically, and batch
//! order is fixed by the seed no matter how data loading is scheduled.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample as index_sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregator::{Aggregator, AggregatorConfig, BoundingBox};
use crate::backbone::{
    sample_style, BackboneConfig, ContentEncoder, Discriminator, Generator, StyleEncoder,
};
use crate::data::{load_batch, Sample};
use crate::losses::{
    gan_losses, global_content_loss, image_recon_loss, instance_content_loss, style_recon_loss,
    total_loss, GanMode, LossReport, LossWeights, NceConfig, ProjectionHeads, INSTANCE_ROI_GRID,
};
use crate::nn::ParamFn;
use crate::rng::stream_rng;
use crate::tensor::{GradMap, Tape, Tensor};
use crate::{Error, Result};

const INIT_STREAM: u64 = 0x696e_6974;
const STEP_STREAM: u64 = 0x7374_6570_0000_0000;
const BATCH_STREAM: u64 = 0x6261_7463_0000_0000;

pub const CSV_HEADER: &str = "step,gan_d,gan_g,nce_global,nce_ins,recon_img,recon_style,total,lr";

// ── config ──

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Constant for the first half of training, then linear decay to zero.
    HalfThenLinear,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    /// Total optimization steps (one D and one G update each).
    pub steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub ckpt_every: u64,
    pub gan_mode: GanMode,
    pub weights: LossWeights,
    pub backbone: BackboneConfig,
    pub aggregator: AggregatorConfig,
    pub nce: NceConfig,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr: 2e-4,
            batch: 2,
            steps: 2000,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            schedule: Schedule::HalfThenLinear,
            seed: 7,
            ckpt_every: 500,
            gan_mode: GanMode::Logistic,
            weights: LossWeights::default(),
            backbone: BackboneConfig::desk(),
            aggregator: AggregatorConfig::desk(),
            nce: NceConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch < 1 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.steps < 1 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.ckpt_every < 1 {
            return Err(Error::Config("ckpt_every must be at least 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        self.weights.validate()?;
        self.backbone.validate()?;
        self.aggregator.validate()?;
        self.nce.validate()?;
        let feat = self.backbone.image_size / 4;
        if feat % self.aggregator.patch_stride != 0 {
            return Err(Error::Config(format!(
                "feature side {feat} not divisible by patch stride {}",
                self.aggregator.patch_stride
            )));
        }
        Ok(())
    }
}

// ── model bundle ──

/// Every trainable module of one run, visited under stable name prefixes.
pub struct Model {
    pub content_encoder: ContentEncoder,
    pub style_encoder: StyleEncoder,
    pub aggregator: Aggregator,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub heads: ProjectionHeads,
}

impl Model {
    pub fn new(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Model {
        let b = &cfg.backbone;
        Model {
            content_encoder: ContentEncoder::new(b, rng),
            style_encoder: StyleEncoder::new(b, rng),
            aggregator: Aggregator::new(&cfg.aggregator, b.content_channels, b.style_dim, rng),
            generator: Generator::new(b, rng),
            discriminator: Discriminator::new(b, rng),
            heads: ProjectionHeads::new(&b.tap_dims(), &cfg.nce, rng),
        }
    }

    pub fn visit_params(&mut self, f: &mut ParamFn) {
        self.content_encoder.visit_params("content_encoder", f);
        self.style_encoder.visit_params("style_encoder", f);
        self.aggregator.visit_params("aggregator", f);
        self.generator.visit_params("generator", f);
        self.discriminator.visit_params("discriminator", f);
        self.heads.visit_params("heads", f);
    }
}

fn is_discriminator(name: &str) -> bool {
    name.starts_with("discriminator.")
}

// ── Adam ──

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One bias-corrected Adam update in place. `t` is the 1-based step count.
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    mom: &mut AdamMoments,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
) -> Result<()> {
    assert!(t >= 1, "adam step count is 1-based");
    if param.len() != grad.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            lhs: vec![param.len()],
            rhs: vec![grad.len()],
        });
    }
    if mom.m.is_empty() {
        mom.m = vec![0.0; param.len()];
        mom.v = vec![0.0; param.len()];
    }
    if mom.m.len() != param.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            lhs: vec![param.len()],
            rhs: vec![mom.m.len()],
        });
    }
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * g;
        mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * g * g;
        let m_hat = mom.m[i] / bc1;
        let v_hat = mom.v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Constant for the first half, then linear to zero at `steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    match cfg.schedule {
        Schedule::Constant => cfg.lr,
        Schedule::HalfThenLinear => {
            let half = cfg.steps / 2;
            if step < half {
                cfg.lr
            } else {
                cfg.lr * (cfg.steps - step) as f64 / (cfg.steps - half) as f64
            }
        }
    }
}

// ── trainer ──

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    /// Completed optimization steps.
    pub step: u64,
    g_moments: BTreeMap<String, AdamMoments>,
    d_moments: BTreeMap<String, AdamMoments>,
}

/// Applies Adam to one side of the parameter partition. Parameters that
/// the backward pass never reached are skipped (no moment decay), matching
/// the per-parameter lazy behavior of common frameworks.
fn apply_adam(
    model: &mut Model,
    grads: &GradMap,
    moments: &mut BTreeMap<String, AdamMoments>,
    d_side: bool,
    lr: f64,
    cfg: &TrainConfig,
    t: u64,
) -> Result<()> {
    let mut failed: Option<Error> = None;
    model.visit_params(&mut |name, p| {
        if failed.is_some() || is_discriminator(&name) != d_side {
            return;
        }
        let Some(g) = grads.get(p) else { return };
        let mut data = p.data().to_vec();
        let mom = moments.entry(name).or_default();
        match adam_step(&mut data, g.data(), mom, lr, cfg.beta1, cfg.beta2, cfg.eps, t) {
            Ok(()) => *p = Tensor::param(data, &p.shape().to_vec()),
            Err(e) => failed = Some(e),
        }
    });
    match failed {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        let mut rng = stream_rng(cfg.seed, INIT_STREAM);
        let model = Model::new(&cfg, &mut rng);
        Ok(Trainer {
            cfg,
            model,
            step: 0,
            g_moments: BTreeMap::new(),
            d_moments: BTreeMap::new(),
        })
    }

    /// One full step: D update on detached output, then G update against
    /// the already-updated discriminator.
    pub fn train_step(
        &mut self,
        x: &Tensor,
        boxes: &[Vec<BoundingBox>],
        y: &Tensor,
    ) -> Result<LossReport> {
        let lr = lr_at(self.step, &self.cfg);
        let t = self.step + 1;
        let mut rng = stream_rng(self.cfg.seed, STEP_STREAM.wrapping_add(self.step));
        let s = sample_style(&mut rng, x.shape()[0], self.cfg.backbone.style_dim);

        let tape = Tape::begin();
        let (c_x, taps_x) = self.model.content_encoder.encode_with_taps(x);
        let (u, _) = self.model.aggregator.aggregate(&c_x, boxes, &s);
        let yhat = self.model.generator.forward(&u);

        let d_real_det = self.d_phase(y, &yhat.detach(), lr, t)?;

        let report = self.g_phase(
            GPhaseInputs { boxes, y, s: &s, c_x: &c_x, taps_x: &taps_x, yhat: &yhat, d_real: &d_real_det },
            tape,
            lr,
            t,
        )?;
        self.step += 1;
        Ok(report)
    }

    /// Discriminator update on its own tape; returns (gan_d, detached real
    /// logits for reporting).
    fn d_phase(&mut self, y: &Tensor, yhat_det: &Tensor, lr: f64, t: u64) -> Result<(f64, Tensor)> {
        let tape = Tape::begin();
        let d_real = self.model.discriminator.forward(y);
        let d_fake = self.model.discriminator.forward(yhat_det);
        let (gan_d, _) = gan_losses(&d_real, &d_fake, self.cfg.gan_mode);
        let val = gan_d.item();
        if !val.is_finite() {
            return Err(Error::NumericalAbort {
                step: self.step,
                dump: format!("gan_d={val}"),
            });
        }
        let grads = tape.backward(&gan_d)?;
        let real_det = d_real.detach();
        apply_adam(&mut self.model, &grads, &mut self.d_moments, true, lr, &self.cfg, t)?;
        Ok((val, real_det))
    }

    fn g_phase(
        &mut self,
        io: GPhaseInputs<'_>,
        tape: Tape,
        lr: f64,
        t: u64,
    ) -> Result<LossReport> {
        let GPhaseInputs { boxes, y, s, c_x, taps_x, yhat, d_real } = io;
        let m = &self.model;
        let (gan_d, d_real) = (d_real.0, &d_real.1);

        let d_fake = m.discriminator.forward(yhat);
        let (_, gan_g) = gan_losses(d_real, &d_fake, self.cfg.gan_mode);
        let (c_yhat, taps_yhat) = m.content_encoder.encode_with_taps(yhat);
        let mut rng = stream_rng(self.cfg.seed, STEP_STREAM.wrapping_add(self.step) ^ 1);
        let glob = global_content_loss(taps_x, &taps_yhat, &m.heads, &self.cfg.nce, &mut rng);
        let (ins, _) =
            instance_content_loss(c_x, &c_yhat, boxes, &m.heads, &self.cfg.nce, INSTANCE_ROI_GRID);
        let style_rec = style_recon_loss(yhat, s, &m.style_encoder);
        let img_rec = image_recon_loss(y, &m.content_encoder, &m.style_encoder, &m.aggregator, &m.generator);
        let total = total_loss(&gan_g, &glob, &ins, &style_rec, &img_rec, &self.cfg.weights);

        let report = LossReport {
            gan_d,
            gan_g: gan_g.item(),
            nce_global: glob.item(),
            nce_instance: ins.item(),
            recon_img: img_rec.item(),
            recon_style: style_rec.item(),
            total: total.item(),
        };
        if !report_is_finite(&report) {
            return Err(Error::NumericalAbort { step: self.step, dump: dump_terms(&report) });
        }
        let grads = tape.backward(&total)?;
        apply_adam(&mut self.model, &grads, &mut self.g_moments, false, lr, &self.cfg, t)?;
        Ok(report)
    }
}

struct GPhaseInputs<'a> {
    boxes: &'a [Vec<BoundingBox>],
    y: &'a Tensor,
    s: &'a Tensor,
    c_x: &'a Tensor,
    taps_x: &'a [Tensor],
    yhat: &'a Tensor,
    d_real: &'a (f64, Tensor),
}

fn report_is_finite(r: &LossReport) -> bool {
    [r.gan_d, r.gan_g, r.nce_global, r.nce_instance, r.recon_img, r.recon_style, r.total]
        .iter()
        .all(|v| v.is_finite())
}

fn dump_terms(r: &LossReport) -> String {
    format!(
        "gan_d={} gan_g={} nce_global={} nce_instance={} recon_img={} recon_style={} total={}",
        r.gan_d, r.gan_g, r.nce_global, r.nce_instance, r.recon_img, r.recon_style, r.total
    )
}

// ── checkpoints ──

pub const CKPT_MAGIC: &[u8; 4] = b"IFCK";
pub const CKPT_VERSION: u32 = 1;
const META_ARCH: &str = "meta.arch";

/// Architecture scalars pinned into every checkpoint; a resume whose config
/// disagrees is rejected before any shapes are compared.
fn arch_fingerprint(cfg: &TrainConfig) -> Vec<f64> {
    let b = &cfg.backbone;
    let a = &cfg.aggregator;
    vec![
        b.image_size as f64,
        b.base_channels as f64,
        b.content_channels as f64,
        b.style_dim as f64,
        a.patch_stride as f64,
        a.token_dim as f64,
        a.blocks as f64,
        a.heads as f64,
        a.mlp_dim as f64,
        a.freq_bands as f64,
        cfg.nce.projection_dim as f64,
    ]
}

fn write_record(w: &mut impl Write, name: &str, dims: &[usize], payload: &[f64]) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    debug_assert_eq!(dims.iter().product::<usize>(), payload.len());
    for &v in payload {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub struct RawCheckpoint {
    pub step: u64,
    pub records: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

pub fn read_checkpoint(path: &Path) -> Result<RawCheckpoint> {
    let mut f = std::io::BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {magic:?}",
            path.display()
        )));
    }
    let mut u32b = [0u8; 4];
    f.read_exact(&mut u32b)?;
    let version = u32::from_le_bytes(u32b);
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format version {version}",
            path.display()
        )));
    }
    let mut u64b = [0u8; 8];
    f.read_exact(&mut u64b)?;
    let step = u64::from_le_bytes(u64b);

    let mut records = BTreeMap::new();
    loop {
        match f.read_exact(&mut u32b) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(u32b) as usize;
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?;
        f.read_exact(&mut u32b)?;
        let rank = u32::from_le_bytes(u32b) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            f.read_exact(&mut u64b)?;
            dims.push(u64::from_le_bytes(u64b) as usize);
        }
        let numel: usize = dims.iter().product();
        let mut payload = Vec::with_capacity(numel);
        for _ in 0..numel {
            f.read_exact(&mut u64b)?;
            payload.push(f64::from_le_bytes(u64b));
        }
        if records.insert(name.clone(), (dims, payload)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate record {name}")));
        }
    }
    Ok(RawCheckpoint { step, records })
}

/// Rebuilds a usable architecture config from a checkpoint's `meta.arch`
/// record. Training hyperparameters come back as defaults; they do not
/// matter for inference-side consumers.
pub fn config_from_checkpoint(raw: &RawCheckpoint) -> Result<TrainConfig> {
    let Some((_, fp)) = raw.records.get(META_ARCH) else {
        return Err(Error::Checkpoint("missing meta.arch record".into()));
    };
    if fp.len() != 11 {
        return Err(Error::Checkpoint(format!(
            "meta.arch has {} entries, expected 11",
            fp.len()
        )));
    }
    let u = |i: usize| fp[i] as usize;
    let cfg = TrainConfig {
        backbone: BackboneConfig {
            image_size: u(0),
            base_channels: u(1),
            content_channels: u(2),
            style_dim: u(3),
        },
        aggregator: AggregatorConfig {
            patch_stride: u(4),
            token_dim: u(5),
            blocks: u(6),
            heads: u(7),
            mlp_dim: u(8),
            freq_bands: u(9),
        },
        nce: NceConfig { projection_dim: u(10), ..NceConfig::default() },
        ..TrainConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

impl Trainer {
    pub fn save(&mut self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        let fp = arch_fingerprint(&self.cfg);
        write_record(&mut w, META_ARCH, &[fp.len()], &fp)?;

        let mut failed: Option<Error> = None;
        self.model.visit_params(&mut |name, p| {
            if failed.is_some() {
                return;
            }
            if let Err(e) = write_record(&mut w, &format!("model.{name}"), p.shape(), p.data()) {
                failed = Some(e);
            }
        });
        if let Some(e) = failed {
            return Err(e);
        }
        for (side, moments) in [("adam_d", &self.d_moments), ("adam_g", &self.g_moments)] {
            for (name, mom) in moments {
                write_record(&mut w, &format!("{side}.m.{name}"), &[mom.m.len()], &mom.m)?;
                write_record(&mut w, &format!("{side}.v.{name}"), &[mom.v.len()], &mom.v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Rebuilds a trainer from `cfg` and overwrites its state from the
    /// checkpoint. Architecture and per-parameter shapes must match.
    pub fn resume(cfg: TrainConfig, path: &Path) -> Result<Trainer> {
        let raw = read_checkpoint(path)?;
        let mut me = Trainer::new(cfg)?;

        let fp = arch_fingerprint(&me.cfg);
        match raw.records.get(META_ARCH) {
            Some((_, got)) if *got == fp => {}
            Some((_, got)) => {
                return Err(Error::Checkpoint(format!(
                    "architecture mismatch: checkpoint {got:?} vs config {fp:?}"
                )))
            }
            None => return Err(Error::Checkpoint("missing meta.arch record".into())),
        }

        let mut missing: Vec<String> = Vec::new();
        let mut used = 1usize;
        let mut failed: Option<Error> = None;
        me.model.visit_params(&mut |name, p| {
            if failed.is_some() {
                return;
            }
            match raw.records.get(&format!("model.{name}")) {
                None => missing.push(name),
                Some((dims, payload)) => {
                    used += 1;
                    if dims != p.shape() {
                        failed = Some(Error::Checkpoint(format!(
                            "param {name}: checkpoint shape {dims:?} vs model {:?}",
                            p.shape()
                        )));
                        return;
                    }
                    *p = Tensor::param(payload.clone(), dims);
                }
            }
        });
        if let Some(e) = failed {
            return Err(e);
        }
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!("missing parameters: {missing:?}")));
        }

        for (name, (_, payload)) in &raw.records {
            let (map, rest) = if let Some(r) = name.strip_prefix("adam_d.") {
                (&mut me.d_moments, r)
            } else if let Some(r) = name.strip_prefix("adam_g.") {
                (&mut me.g_moments, r)
            } else {
                continue;
            };
            used += 1;
            let (kind, pname) = rest.split_at(2);
            let slot = map.entry(pname.to_string()).or_default();
            match kind {
                "m." => slot.m = payload.clone(),
                "v." => slot.v = payload.clone(),
                _ => return Err(Error::Checkpoint(format!("unrecognized record {name}"))),
            }
        }
        if used != raw.records.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} records, used {used} (stray entries)",
                raw.records.len()
            )));
        }
        me.step = raw.step;
        Ok(me)
    }
}

// ── training loop ──

/// Runs (or resumes) a full training loop over two single-domain datasets.
/// Writes `run.json`, appends one CSV row per step to `losses.csv`, and
/// checkpoints every `ckpt_every` steps plus at the end. Returns the
/// per-step reports of this invocation.
pub fn train(
    cfg: &TrainConfig,
    data_a: &[Sample],
    data_b: &[Sample],
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<Vec<LossReport>> {
    cfg.validate()?;
    for (tag, data) in [("A", data_a), ("B", data_b)] {
        if data.len() < cfg.batch {
            return Err(Error::Data(format!(
                "domain {tag}: {} samples but batch size {}",
                data.len(),
                cfg.batch
            )));
        }
        for s in data {
            if s.image.shape()[1] != cfg.backbone.image_size {
                return Err(Error::Data(format!(
                    "sample {}: size {} does not match configured {}",
                    s.id,
                    s.image.shape()[1],
                    cfg.backbone.image_size
                )));
            }
        }
    }
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("run.json"), serde_json::to_string_pretty(cfg)?)?;

    let mut trainer = match resume_from {
        Some(path) => Trainer::resume(cfg.clone(), path)?,
        None => Trainer::new(cfg.clone())?,
    };

    let csv_path = out_dir.join("losses.csv");
    let fresh = trainer.step == 0 || !csv_path.exists();
    let mut csv = BufWriter::new(
        fs::OpenOptions::new()
            .create(true)
            .append(!fresh)
            .write(true)
            .truncate(fresh)
            .open(&csv_path)?,
    );
    if fresh {
        writeln!(csv, "{CSV_HEADER}")?;
    }

    let mut reports = Vec::new();
    while trainer.step < cfg.steps {
        let step = trainer.step;
        let mut brng = stream_rng(cfg.seed, BATCH_STREAM.wrapping_add(step));
        let ia = index_sample(&mut brng, data_a.len(), cfg.batch).into_vec();
        let ib = index_sample(&mut brng, data_b.len(), cfg.batch).into_vec();
        let (x, boxes) = load_batch(data_a, &ia)?;
        let (y, _) = load_batch(data_b, &ib)?;
        let r = trainer.train_step(&x, &boxes, &y)?;
        let lr = lr_at(step, cfg);
        writeln!(
            csv,
            "{step},{},{},{},{},{},{},{},{lr}",
            r.gan_d, r.gan_g, r.nce_global, r.nce_instance, r.recon_img, r.recon_style, r.total
        )?;
        reports.push(r);
        let done = trainer.step;
        if done % cfg.ckpt_every == 0 || done == cfg.steps {
            csv.flush()?;
            trainer.save(&checkpoint_path(out_dir, done))?;
        }
    }
    csv.flush()?;
    Ok(reports)
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("ckpt_{step:06}.bin"))
}
