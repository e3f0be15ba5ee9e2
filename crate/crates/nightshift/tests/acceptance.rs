//! Acceptance suite. Each test covers one release criterion and prints a
//! single `criterion NN (...): PASS|FAIL` line (visible with
//! `cargo test --test acceptance -- --show-output`).
//!
//! Criteria 7-9 share six 500-step desk-scale training runs (three seeds,
//! instance loss on/off). The runs are trained once, serialized behind a
//! mutex so wall-clock measurements stay clean, and cached as checkpoint
//! bytes because tensors are not Sync.

use std::fs;
use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use nightshift::aggregator::{
    adain, adain_normalize, gamma, grid_cell_box, pos_embed_global, pos_embed_instance,
    roi_extract, style_to_params, Aggregator, AggregatorConfig, BoundingBox, TransformerBlock,
};
use nightshift::backbone::{
    sample_style, shape_walk, BackboneConfig, ContentEncoder, Generator, StyleEncoder,
};
use nightshift::data::{gen_scene, Domain, Sample, SceneSpec};
use nightshift::losses::{
    gather_rows, global_content_loss, info_nce, instance_content_loss, sample_locations,
    total_loss, LossReport, LossWeights, NceConfig, ProjectionHeads,
};
use nightshift::metrics::{instance_ssim, palette_distance, SsimConfig};
use nightshift::rng::{normal_vec, stream_rng};
use nightshift::trainer::{self, checkpoint_path, TrainConfig, Trainer};
use nightshift::verify::{composite_checks, primitive_checks, GRAD_TOL};
use nightshift::Tensor;

// ── reporting ──

fn criterion(name: &str, body: impl FnOnce() -> (Vec<String>, String)) {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok((fails, detail)) => {
            let tag = if fails.is_empty() { "PASS" } else { "FAIL" };
            if detail.is_empty() {
                println!("{name}: {tag}");
            } else {
                println!("{name}: {tag}  [{detail}]");
            }
            assert!(fails.is_empty(), "{name} failed:\n  {}", fails.join("\n  "));
        }
        Err(e) => {
            println!("{name}: FAIL");
            resume_unwind(e);
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ── shared desk-scale training runs ──

const HEAVY_STEPS: u64 = 500;
const ABLATION_SEEDS: [u64; 3] = [7, 11, 13];
const EVAL_STYLE_STREAM: u64 = 0x6576_616c;

/// Slot layout: 2 * seed_index + (0 = instance loss on, 1 = off).
/// Slot 0 doubles as the overfit-experiment run.
fn heavy_spec(idx: usize) -> (u64, f64) {
    (ABLATION_SEEDS[idx / 2], if idx % 2 == 0 { 1.0 } else { 0.0 })
}

struct HeavyRun {
    cfg: TrainConfig,
    reports: Vec<LossReport>,
    ckpt: Vec<u8>,
    wall_s: f64,
}

static HEAVY: [OnceLock<HeavyRun>; 6] = [const { OnceLock::new() }; 6];
static BUILD: Mutex<()> = Mutex::new(());

fn heavy_run(idx: usize) -> &'static HeavyRun {
    HEAVY[idx].get_or_init(|| {
        let _serial = BUILD.lock().unwrap();
        let (seed, lambda_ins) = heavy_spec(idx);
        let cfg = TrainConfig {
            steps: HEAVY_STEPS,
            ckpt_every: HEAVY_STEPS,
            seed,
            weights: LossWeights { lambda_ins, ..LossWeights::default() },
            ..TrainConfig::default()
        };
        let (data_a, data_b) = desk_datasets();
        let dir = tempfile::tempdir().unwrap();
        let t0 = Instant::now();
        let reports = trainer::train(&cfg, &data_a, &data_b, dir.path(), None).unwrap();
        let wall_s = t0.elapsed().as_secs_f64();
        let ckpt = fs::read(checkpoint_path(dir.path(), HEAVY_STEPS)).unwrap();
        HeavyRun { cfg, reports, ckpt, wall_s }
    })
}

fn reload(run: &HeavyRun) -> Trainer {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    fs::write(&path, &run.ckpt).unwrap();
    Trainer::resume(run.cfg.clone(), &path).unwrap()
}

/// 8 samples per domain, 64 px, unpaired (disjoint seed ranges).
fn desk_datasets() -> (Vec<Sample>, Vec<Sample>) {
    let gen = |domain: Domain, base: u64| -> Vec<Sample> {
        (0..8u64)
            .map(|i| {
                gen_scene(&SceneSpec {
                    seed: base + i,
                    image_size: 64,
                    n_instances: 1 + (i as usize % 3),
                    domain,
                })
                .unwrap()
            })
            .collect()
    };
    let a = gen(Domain::A, 101);
    let b = gen(Domain::B, 201);
    for s in a.iter().chain(&b) {
        assert!(!s.boxes.is_empty(), "sample {} has no instances", s.id);
    }
    (a, b)
}

fn translate(t: &Trainer, sample: &Sample, s: &Tensor) -> Tensor {
    let (h, w) = (sample.image.shape()[1], sample.image.shape()[2]);
    let x = sample.image.reshape(&[1, 3, h, w]);
    let c = t.model.content_encoder.forward(&x);
    let (u, _) = t.model.aggregator.aggregate(&c, &[sample.boxes.clone()], s);
    t.model.generator.forward(&u).reshape(&[3, h, w])
}

fn eval_style(t: &Trainer, image_index: usize) -> Tensor {
    let mut rng = stream_rng(1000 + image_index as u64, EVAL_STYLE_STREAM);
    sample_style(&mut rng, 1, t.cfg.backbone.style_dim)
}

/// Mean instance SSIM between each domain-A input and its translation,
/// under the fixed per-image evaluation styles.
fn mean_instance_ssim(run: &HeavyRun) -> f64 {
    let t = reload(run);
    let (data_a, _) = desk_datasets();
    let cfg = SsimConfig::default();
    let vals: Vec<f64> = data_a
        .iter()
        .enumerate()
        .map(|(i, sample)| {
            let y = translate(&t, sample, &eval_style(&t, i));
            instance_ssim(&sample.image, &y, &sample.boxes, &cfg).unwrap()
        })
        .collect();
    mean(&vals)
}

// ── 1: gradients ──

#[test]
fn criterion_01_gradient_suite() {
    criterion("criterion 01 (gradient suite)", || {
        let t0 = Instant::now();
        let mut checks = primitive_checks(1234);
        checks.extend(composite_checks(1235));
        let wall = t0.elapsed().as_secs_f64();

        let mut fails = Vec::new();
        let mut worst = 0.0f64;
        for c in &checks {
            worst = worst.max(c.max_rel_err);
            if !c.pass() {
                fails.push(format!("{}: max rel err {:.3e}", c.name, c.max_rel_err));
            }
        }
        if wall >= 120.0 {
            fails.push(format!("runtime {wall:.1}s, limit 120s"));
        }
        (fails, format!("{} checks, worst {:.2e} < {GRAD_TOL:.0e}, {wall:.1}s", checks.len(), worst))
    });
}

// ── 2: shapes ──

#[test]
fn criterion_02_shape_conformance() {
    criterion("criterion 02 (shape conformance)", || {
        let mut fails = Vec::new();
        let walk = shape_walk(&BackboneConfig::full_scale());
        let stage = |n: &str| walk.iter().find(|(s, _)| s == n).map(|(_, sh)| *sh);

        // full-scale architecture table; norm/activation rows keep the
        // shape of the stage they follow
        let table: &[(&str, &str, [usize; 3])] = &[
            ("Conv-1 (reflect)", "enc.conv1", [64, 352, 352]),
            ("InstanceNorm", "enc.conv1", [64, 352, 352]),
            ("ReLU", "enc.conv1", [64, 352, 352]),
            ("Conv-2 (zeros)", "enc.conv2", [128, 352, 352]),
            ("InstanceNorm", "enc.conv2", [128, 352, 352]),
            ("ReLU", "enc.conv2", [128, 352, 352]),
            ("Downsample", "enc.down1", [128, 176, 176]),
            ("Conv-3 (zeros)", "enc.conv3", [256, 176, 176]),
            ("InstanceNorm", "enc.conv3", [256, 176, 176]),
            ("ReLU", "enc.conv3", [256, 176, 176]),
            ("Downsample", "enc.down2", [256, 88, 88]),
            ("AdaptiveAvgPool", "sty.pool", [256, 1, 1]),
            ("Conv-4", "sty.conv4", [8, 1, 1]),
            ("Upsample", "gen.up1", [256, 176, 176]),
            ("Conv-1 (zeros)", "gen.conv1", [128, 176, 176]),
            ("InstanceNorm", "gen.conv1", [128, 176, 176]),
            ("ReLU", "gen.conv1", [128, 176, 176]),
            ("Upsample", "gen.up2", [128, 352, 352]),
            ("Conv-2 (zeros)", "gen.conv2", [64, 352, 352]),
            ("InstanceNorm", "gen.conv2", [64, 352, 352]),
            ("ReLU", "gen.conv2", [64, 352, 352]),
            ("Conv-3 (reflect)", "gen.conv3", [3, 352, 352]),
            ("Tanh", "gen.conv3", [3, 352, 352]),
        ];
        for (layer, st, want) in table {
            match stage(st) {
                Some(got) if got == *want => {}
                Some(got) => fails.push(format!("{layer}: walk gives {got:?}, table says {want:?}")),
                None => fails.push(format!("{layer}: no walk stage named {st}")),
            }
        }
        if walk.len() != 12 {
            fails.push(format!("walk has {} stages, expected 12", walk.len()));
        }

        // convolution parameter columns (out, in, k, k)
        let mut rng = stream_rng(21, 0);
        let full = BackboneConfig::full_scale();
        let enc = ContentEncoder::new(&full, &mut rng);
        let sty = StyleEncoder::new(&full, &mut rng);
        let gen = Generator::new(&full, &mut rng);
        let convs: &[(&str, &[usize], &[usize])] = &[
            ("enc conv1", enc.block1.conv.weight.shape(), &[64, 3, 7, 7]),
            ("enc conv2", enc.block2.conv.weight.shape(), &[128, 64, 3, 3]),
            ("enc conv3", enc.block3.conv.weight.shape(), &[256, 128, 3, 3]),
            ("sty conv4", sty.head.weight.shape(), &[8, 256, 1, 1]),
            ("gen conv1", gen.block1.conv.weight.shape(), &[128, 256, 3, 3]),
            ("gen conv2", gen.block2.conv.weight.shape(), &[64, 128, 3, 3]),
            ("gen conv3", gen.out.weight.shape(), &[3, 64, 7, 7]),
        ];
        for (name, got, want) in convs {
            if got != want {
                fails.push(format!("{name}: weight {got:?}, expected {want:?}"));
            }
        }

        // transformer rows at full scale: 1024-wide tokens, fused qkv to
        // 3072, mlp through 4096
        let t_cfg = AggregatorConfig {
            patch_stride: 2,
            token_dim: 1024,
            blocks: 1,
            heads: 8,
            mlp_dim: 4096,
            freq_bands: 128,
        };
        t_cfg.validate().unwrap();
        let blk = TransformerBlock::new(&t_cfg, full.style_dim, &mut rng);
        let lins: &[(&str, &[usize], &[usize])] = &[
            ("qkv", blk.qkv.weight.shape(), &[1024, 3072]),
            ("attn proj", blk.proj.weight.shape(), &[1024, 1024]),
            ("mlp fc1", blk.fc1.weight.shape(), &[1024, 4096]),
            ("mlp fc2", blk.fc2.weight.shape(), &[4096, 1024]),
        ];
        for (name, got, want) in lins {
            if got != want {
                fails.push(format!("{name}: weight {got:?}, expected {want:?}"));
            }
        }
        let z = Tensor::from_vec(normal_vec(&mut rng, 4 * 1024, 1.0), &[4, 1024]);
        let s = sample_style(&mut rng, 1, full.style_dim);
        if adain_normalize(&z).shape() != [4, 1024] {
            fails.push("normalization changed token shape".into());
        }
        if blk.msa(&z).0.shape() != [4, 1024] {
            fails.push("attention changed token shape".into());
        }
        if blk.fc1.forward(&z).gelu().shape() != [4, 4096] {
            fails.push("mlp hidden width is not 4096".into());
        }
        if blk.forward(&z, &s).shape() != [4, 1024] {
            fails.push("block output width is not 1024".into());
        }

        (fails, format!("{} table rows, 7 conv shapes, 4 token maps", table.len()))
    });
}

// ── 3: oracle equivalence ──

/// Independent bilinear read at a continuous point (pixel centers at
/// integer + 0.5, border clamp).
fn oracle_bilinear(c: &Tensor, ch: usize, x: f64, y: f64) -> f64 {
    let (h, w) = (c.shape()[1], c.shape()[2]);
    let gx = x - 0.5;
    let gy = y - 0.5;
    let (x0, y0) = (gx.floor(), gy.floor());
    let (fx, fy) = (gx - x0, gy - y0);
    let pick = |iy: f64, ix: f64| {
        let i = (iy.max(0.0) as usize).min(h - 1);
        let j = (ix.max(0.0) as usize).min(w - 1);
        c.at(&[ch, i, j])
    };
    (1.0 - fx) * (1.0 - fy) * pick(y0, x0)
        + fx * (1.0 - fy) * pick(y0, x0 + 1.0)
        + (1.0 - fx) * fy * pick(y0 + 1.0, x0)
        + fx * fy * pick(y0 + 1.0, x0 + 1.0)
}

/// Literal softmax cross-entropy loop: row i of `py` against all rows of
/// `px`, diagonal positive.
fn oracle_nce_rows(py: &Tensor, px: &Tensor, tau: f64) -> f64 {
    let (n, d) = (py.shape()[0], py.shape()[1]);
    let mut total = 0.0;
    for i in 0..n {
        let mut logits = Vec::new();
        for j in 0..n {
            let mut dot = 0.0;
            for k in 0..d {
                dot += py.at(&[i, k]) * px.at(&[j, k]);
            }
            logits.push(dot / tau);
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
        total += lse - logits[i];
    }
    total / n as f64
}

#[test]
fn criterion_03_oracle_equivalence() {
    criterion("criterion 03 (oracle equivalence)", || {
        let mut fails = Vec::new();
        let mut worst = 0.0f64;

        // box-pooling vs direct per-bin bilinear reads
        let c = Tensor::from_vec(normal_vec(&mut stream_rng(33, 0), 5 * 9 * 7, 1.0), &[5, 9, 7]);
        let cases: &[([f64; 4], usize)] = &[
            ([0.5, 0.5, 0.6, 0.8], 3),
            ([0.3, 0.7, 0.9, 0.5], 2),
            ([0.55, 0.45, 0.2, 0.3], 4),
            ([0.1, 0.15, 0.4, 0.3], 2),
        ];
        for &(nbox, k) in cases {
            let roi = roi_extract(&c, nbox, k);
            let (w, h) = (7.0, 9.0);
            let x0 = nbox[0] * w - nbox[2] * w / 2.0;
            let y0 = nbox[1] * h - nbox[3] * h / 2.0;
            let (bw, bh) = (nbox[2] * w / k as f64, nbox[3] * h / k as f64);
            for ch in 0..5 {
                for bi in 0..k {
                    for bj in 0..k {
                        let x = x0 + (bj as f64 + 0.5) * bw;
                        let y = y0 + (bi as f64 + 0.5) * bh;
                        let want = oracle_bilinear(&c, ch, x, y);
                        let got = roi.at(&[ch, bi, bj]);
                        worst = worst.max((got - want).abs());
                    }
                }
            }
        }
        if worst >= 1e-10 {
            fails.push(format!("box pooling deviates from bilinear oracle by {worst:.2e}"));
        }

        // global contrast loss vs double-loop oracle, 8 locations per layer
        let desk = BackboneConfig::desk();
        let nce = NceConfig { patches_per_layer: 8, ..NceConfig::default() };
        let heads = ProjectionHeads::new(&desk.tap_dims(), &nce, &mut stream_rng(34, 0));
        let dims = desk.tap_dims();
        let taps = |seed: u64| -> Vec<Tensor> {
            dims.iter()
                .enumerate()
                .map(|(i, &d)| {
                    Tensor::from_vec(
                        normal_vec(&mut stream_rng(seed, i as u64), 2 * d * 36, 1.0),
                        &[2, d, 6, 6],
                    )
                })
                .collect()
        };
        let (tx, ty) = (taps(35), taps(36));
        let got = global_content_loss(&tx, &ty, &heads, &nce, &mut stream_rng(37, 0)).item();
        let mut rng = stream_rng(37, 0);
        let mut terms = Vec::new();
        for &tap in &nce.tap_indices() {
            for b in 0..2 {
                let locs = sample_locations(&mut rng, 36, nce.patches_per_layer);
                let px = heads.project(tap, &gather_rows(&tx[tap], b, &locs));
                let py = heads.project(tap, &gather_rows(&ty[tap], b, &locs));
                terms.push(oracle_nce_rows(&py, &px, nce.temperature));
            }
        }
        let glob_dev = (got - mean(&terms)).abs();
        if glob_dev >= 1e-10 {
            fails.push(format!("global loss deviates from oracle by {glob_dev:.2e}"));
        }

        // instance contrast loss vs double-loop oracle, 2x2 cells
        let mut rng = stream_rng(38, 0);
        let c_x = Tensor::from_vec(normal_vec(&mut rng, 64 * 16, 1.0), &[1, 64, 4, 4]);
        let c_y = Tensor::from_vec(normal_vec(&mut rng, 64 * 16, 1.0), &[1, 64, 4, 4]);
        let boxes = vec![vec![
            BoundingBox { cx: 8.0, cy: 8.0, w: 10.0, h: 10.0 },
            BoundingBox { cx: 5.0, cy: 10.0, w: 6.0, h: 7.0 },
        ]];
        let r = 2;
        let (loss, filtered) = instance_content_loss(&c_x, &c_y, &boxes, &heads, &nce, r);
        assert_eq!(filtered, 0);
        let mut terms = Vec::new();
        for bx in &boxes[0] {
            let nb = bx.norm(16.0, 16.0);
            let m = r * r;
            let rx = roi_extract(&c_x.reshape(&[64, 4, 4]), nb, r).reshape(&[64, m]).permute(&[1, 0]);
            let ry = roi_extract(&c_y.reshape(&[64, 4, 4]), nb, r).reshape(&[64, m]).permute(&[1, 0]);
            let px = heads.project(2, &rx);
            let py = heads.project(2, &ry);
            terms.push(oracle_nce_rows(&py, &px, nce.temperature));
        }
        let ins_dev = (loss.item() - mean(&terms)).abs();
        if ins_dev >= 1e-10 {
            fails.push(format!("instance loss deviates from oracle by {ins_dev:.2e}"));
        }

        (fails, format!("roi {worst:.1e}, global {glob_dev:.1e}, instance {ins_dev:.1e}"))
    });
}

// ── 4: closed-form losses ──

#[test]
fn criterion_04_closed_form_losses() {
    criterion("criterion 04 (closed-form losses)", || {
        let mut fails = Vec::new();

        // symmetric logits: anchor orthogonal to a coinciding positive and
        // negative, any temperature -> ln 2
        let a = Tensor::from_vec(vec![1.0, 0.0], &[2]);
        let pos = Tensor::from_vec(vec![0.0, 1.0], &[2]);
        let neg = Tensor::from_vec(vec![0.0, 1.0], &[1, 2]);
        for tau in [0.07, 0.5, 1.0] {
            let got = info_nce(&a, &pos, &neg, tau).item();
            let dev = (got - std::f64::consts::LN_2).abs();
            if dev >= 1e-12 {
                fails.push(format!("symmetric case at tau {tau}: {got} vs ln 2 (dev {dev:.2e})"));
            }
        }

        // aligned positive, orthogonal negative, tau 1 -> log(1 + e^-1)
        let pos = Tensor::from_vec(vec![1.0, 0.0], &[2]);
        let got = info_nce(&a, &pos, &neg, 1.0).item();
        let want = (1.0 + (-1.0f64).exp()).ln();
        let dev = (got - want).abs();
        if dev >= 1e-12 {
            fails.push(format!("two-vector case: {got} vs {want} (dev {dev:.2e})"));
        }

        // unit terms under the default weights 1/1/10/5 -> exactly 18
        let one = Tensor::from_vec(vec![1.0], &[1]);
        let total = total_loss(&one, &one, &one, &one, &one, &LossWeights::default()).item();
        if total != 18.0 {
            fails.push(format!("unit-term total is {total}, expected exactly 18"));
        }

        (fails, "ln 2, log(1+e^-1), 18".into())
    });
}

// ── 5: normalization invariant ──

#[test]
fn criterion_05_adain_invariant() {
    criterion("criterion 05 (adain invariant)", || {
        let cfg = AggregatorConfig::desk();
        let agg = Aggregator::new(&cfg, 64, 8, &mut stream_rng(55, 0));
        let (mut worst_mean, mut worst_std) = (0.0f64, 0.0f64);
        let mut track = |z: &Tensor| {
            let n = adain_normalize(z);
            let (m, d) = (n.shape()[0], n.shape()[1]);
            for ch in 0..d {
                let (mut sum, mut sq) = (0.0, 0.0);
                for i in 0..m {
                    let v = n.at(&[i, ch]);
                    sum += v;
                    sq += v * v;
                }
                let mu = sum / m as f64;
                let sd = (sq / m as f64 - mu * mu).sqrt();
                worst_mean = worst_mean.max(mu.abs());
                worst_std = worst_std.max((sd - 1.0).abs());
            }
        };
        for t in 0..100u64 {
            let mut z = Tensor::from_vec(normal_vec(&mut stream_rng(56, t), 512 * 64, 1.0), &[512, 64]);
            let s = sample_style(&mut stream_rng(57, t), 1, 8);
            for blk in &agg.blocks {
                track(&z);
                let sp = style_to_params(&blk.sm_msa, &s);
                let (attn, _) = blk.msa(&adain(&z, &sp));
                let zp = attn.add(&z);
                track(&zp);
                let sp = style_to_params(&blk.sm_mlp, &s);
                let hidden = blk.fc1.forward(&adain(&zp, &sp)).gelu();
                z = blk.fc2.forward(&hidden).add(&zp);
            }
        }
        let mut fails = Vec::new();
        if worst_mean >= 1e-6 {
            fails.push(format!("worst |mean| {worst_mean:.2e} >= 1e-6"));
        }
        if worst_std >= 1e-5 {
            fails.push(format!("worst |std - 1| {worst_std:.2e} >= 1e-5"));
        }
        (fails, format!("100 inputs x 4 blocks x 2 sites: |mean| {worst_mean:.1e}, |std-1| {worst_std:.1e}"))
    });
}

// ── 6: position embeddings ──

#[test]
fn criterion_06_position_embedding() {
    criterion("criterion 06 (position embedding)", || {
        let mut fails = Vec::new();
        let cfg = AggregatorConfig::desk();

        // frequency map of 0: alternating (sin 0, cos 0) pairs
        let g0 = gamma(0.0, cfg.freq_bands);
        let want: Vec<f64> = (0..cfg.freq_bands).flat_map(|_| [0.0, 1.0]).collect();
        if g0 != want {
            fails.push(format!("gamma(0) is {g0:?}"));
        }

        // bounded on a dense sweep of normalized inputs
        for k in 1..=8 {
            for step in 0..=200 {
                let a = step as f64 / 200.0;
                if gamma(a, k).iter().any(|v| v.abs() > 1.0) {
                    fails.push(format!("gamma({a}, {k}) leaves [-1, 1]"));
                }
            }
        }

        // 8x8 desk grid: bounded, collision-free rows
        let e = pos_embed_global(8, 8, 64.0, 64.0, &cfg);
        assert_eq!(e.shape(), &[64, cfg.token_dim]);
        if e.data().iter().any(|v| v.abs() > 1.0) {
            fails.push("grid embedding leaves [-1, 1]".into());
        }
        let mut collisions = 0;
        for a in 0..64 {
            for b in (a + 1)..64 {
                if (0..cfg.token_dim).all(|ch| e.at(&[a, ch]) == e.at(&[b, ch])) {
                    collisions += 1;
                }
            }
        }
        if collisions > 0 {
            fails.push(format!("{collisions} colliding grid cell pairs"));
        }

        // a box with a cell's exact geometry reproduces its row bitwise
        for i in 0..8 {
            for j in 0..8 {
                let cell = grid_cell_box(i, j, 8, 8, 64.0, 64.0);
                let row = pos_embed_instance(&cell, 64.0, 64.0, &cfg);
                for (ch, v) in row.iter().enumerate() {
                    if v.to_bits() != e.at(&[i * 8 + j, ch]).to_bits() {
                        fails.push(format!("cell ({i}, {j}) channel {ch} differs bitwise"));
                    }
                }
            }
        }

        (fails, "gamma(0) exact, bounded, 64 distinct rows, bitwise cell match".into())
    });
}

// ── 7: overfit experiment ──

#[test]
fn criterion_07_overfit_experiment() {
    criterion("criterion 07 (overfit experiment)", || {
        let run = heavy_run(0);
        let mut fails = Vec::new();

        let window = |lo: usize, hi: usize, get: fn(&LossReport) -> f64| -> f64 {
            mean(&run.reports[lo..hi].iter().map(get).collect::<Vec<_>>())
        };
        let n = run.reports.len();
        assert_eq!(n, HEAVY_STEPS as usize);
        let terms: [(&str, fn(&LossReport) -> f64); 2] =
            [("recon_img", |r| r.recon_img), ("nce_global", |r| r.nce_global)];
        let mut curve = String::new();
        for (name, get) in terms {
            let early = window(0, 10, get);
            let late = window(n - 10, n, get);
            curve += &format!("{name} {early:.3}->{late:.3} ");
            if !(late <= 0.5 * early) {
                fails.push(format!(
                    "{name}: final 10-step mean {late:.4} above half the step-10 mean {early:.4}"
                ));
            }
        }

        let t = reload(run);
        let (data_a, _) = desk_datasets();
        let cfg = SsimConfig::default();
        let (mut pal_in, mut pal_out, mut ssims) = (Vec::new(), Vec::new(), Vec::new());
        for (i, sample) in data_a.iter().enumerate() {
            let y = translate(&t, sample, &eval_style(&t, i));
            pal_in.push(palette_distance(&sample.image, Domain::B));
            pal_out.push(palette_distance(&y, Domain::B));
            ssims.push(instance_ssim(&sample.image, &y, &sample.boxes, &cfg).unwrap());
        }
        let (pin, pout, ms) = (mean(&pal_in), mean(&pal_out), mean(&ssims));
        if !(pout < pin) {
            fails.push(format!("palette distance to B: translated {pout:.4} !< input {pin:.4}"));
        }
        if !(ms >= 0.3) {
            fails.push(format!("mean instance ssim {ms:.4} < 0.3"));
        }
        if !(run.wall_s < 1200.0) {
            fails.push(format!("run took {:.0}s, limit 1200s", run.wall_s));
        }

        // context for the ssim number: same-seed scenes share geometry
        // across domains, so the domain-B rendering of each eval scene is
        // the best possible translation; its score is the metric's ceiling.
        let ideal: Vec<f64> = data_a
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let b = gen_scene(&SceneSpec {
                    seed: 101 + i as u64,
                    image_size: 64,
                    n_instances: 1 + (i % 3),
                    domain: Domain::B,
                })
                .unwrap();
                instance_ssim(&a.image, &b.image, &a.boxes, &cfg).unwrap()
            })
            .collect();

        let detail = format!(
            "{curve}palette {pin:.3}->{pout:.3}, instance ssim {ms:.3} (geometry-paired ideal {:.3}), {:.0}s",
            mean(&ideal),
            run.wall_s
        );
        (fails, detail)
    });
}

// ── 8: multi-modality ──

#[test]
fn criterion_08_multi_modality() {
    criterion("criterion 08 (multi-modality)", || {
        let run = heavy_run(0);
        let t = reload(run);
        let (data_a, _) = desk_datasets();
        let sd = t.cfg.backbone.style_dim;
        let s1 = sample_style(&mut stream_rng(1, EVAL_STYLE_STREAM), 1, sd);
        let s2 = sample_style(&mut stream_rng(2, EVAL_STYLE_STREAM), 1, sd);

        let (mut diffs, mut nce1, mut nce2) = (Vec::new(), Vec::new(), Vec::new());
        for (i, sample) in data_a.iter().enumerate() {
            let y1 = translate(&t, sample, &s1);
            let y2 = translate(&t, sample, &s2);
            let d: f64 = y1
                .data()
                .iter()
                .zip(y2.data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / y1.numel() as f64;
            diffs.push(d);

            let (h, w) = (sample.image.shape()[1], sample.image.shape()[2]);
            let (_, taps_x) = t.model.content_encoder.encode_with_taps(&sample.image.reshape(&[1, 3, h, w]));
            for (acc, y) in [(&mut nce1, &y1), (&mut nce2, &y2)] {
                let (_, taps_y) = t.model.content_encoder.encode_with_taps(&y.reshape(&[1, 3, h, w]));
                let mut rng = stream_rng(9000 + i as u64, 0);
                acc.push(
                    global_content_loss(&taps_x, &taps_y, &t.model.heads, &t.cfg.nce, &mut rng)
                        .item(),
                );
            }
        }
        let (d, n1, n2) = (mean(&diffs), mean(&nce1), mean(&nce2));

        let mut fails = Vec::new();
        if !(d > 0.01) {
            fails.push(format!("mean abs pixel difference {d:.5} <= 0.01"));
        }
        if !(n1 <= 1.1 * n2 && n2 <= 1.1 * n1) {
            fails.push(format!("content drift: nce_global {n1:.4} vs {n2:.4} beyond 10%"));
        }
        (fails, format!("pixel diff {d:.4}, nce_global {n1:.3} / {n2:.3}"))
    });
}

// ── 9: instance-loss ablation ──

#[test]
fn criterion_09_instance_loss_ablation() {
    criterion("criterion 09 (instance-loss ablation)", || {
        let (mut on, mut off) = (Vec::new(), Vec::new());
        for si in 0..ABLATION_SEEDS.len() {
            on.push(mean_instance_ssim(heavy_run(2 * si)));
            off.push(mean_instance_ssim(heavy_run(2 * si + 1)));
        }
        let (mon, moff) = (mean(&on), mean(&off));
        let mut fails = Vec::new();
        if !(moff <= mon) {
            fails.push(format!(
                "instance ssim without the loss ({moff:.4}) exceeds with it ({mon:.4}); per seed on {on:?} off {off:?}"
            ));
        }
        (fails, format!("with {mon:.3} vs without {moff:.3} over {} seeds", ABLATION_SEEDS.len()))
    });
}

// ── 10: determinism and persistence ──

fn report_bits(r: &LossReport) -> [u64; 7] {
    [
        r.gan_d.to_bits(),
        r.gan_g.to_bits(),
        r.nce_global.to_bits(),
        r.nce_instance.to_bits(),
        r.recon_img.to_bits(),
        r.recon_style.to_bits(),
        r.total.to_bits(),
    ]
}

#[test]
fn criterion_10_determinism_persistence() {
    criterion("criterion 10 (determinism and persistence)", || {
        let cfg = TrainConfig { steps: 10, ckpt_every: 5, ..TrainConfig::default() };
        let (data_a, data_b) = desk_datasets();
        let mut fails = Vec::new();

        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let r1 = trainer::train(&cfg, &data_a, &data_b, d1.path(), None).unwrap();
        let r2 = trainer::train(&cfg, &data_a, &data_b, d2.path(), None).unwrap();
        if r1.len() != 10 || r2.len() != 10 {
            fails.push(format!("expected 10 reports, got {} and {}", r1.len(), r2.len()));
        }
        let twin_steps = r1
            .iter()
            .zip(&r2)
            .filter(|(a, b)| report_bits(a) == report_bits(b))
            .count();
        if twin_steps != r1.len() {
            fails.push(format!("only {twin_steps}/{} steps bit-identical across twin runs", r1.len()));
        }
        for file in ["losses.csv", "ckpt_000010.bin"] {
            let b1 = fs::read(d1.path().join(file)).unwrap();
            let b2 = fs::read(d2.path().join(file)).unwrap();
            if b1 != b2 {
                fails.push(format!("{file} differs across twin runs"));
            }
        }

        // resume from the midpoint checkpoint and replay the back half
        let d3 = tempfile::tempdir().unwrap();
        let r3 = trainer::train(
            &cfg,
            &data_a,
            &data_b,
            d3.path(),
            Some(&checkpoint_path(d1.path(), 5)),
        )
        .unwrap();
        if r3.len() != 5 {
            fails.push(format!("resumed run executed {} steps, expected 5", r3.len()));
        }
        let replayed = r3
            .iter()
            .zip(&r1[5..])
            .filter(|(a, b)| report_bits(a) == report_bits(b))
            .count();
        if replayed != r3.len() {
            fails.push(format!("only {replayed}/{} resumed steps match the straight run", r3.len()));
        }
        let straight = fs::read(d1.path().join("ckpt_000010.bin")).unwrap();
        let resumed = fs::read(d3.path().join("ckpt_000010.bin")).unwrap();
        if straight != resumed {
            fails.push("final checkpoint differs after resume".into());
        }

        (fails, "twin runs and resume replay bit-identical over 10 steps".into())
    });
}
