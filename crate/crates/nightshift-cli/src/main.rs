//! `nightshift` command line: dataset synthesis, training, translation,
//! evaluation, gradient checking, and run reports.
//!
//! Exit codes: 0 success, 2 usage/config/data problems, 3 runtime numerical
//! failures. Every subcommand is deterministic given its flags and seeds.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::Rng;

use nightshift::aggregator::BoundingBox;
use nightshift::backbone::sample_style;
use nightshift::data::{
    gen_scene, read_dataset, read_ppm, write_dataset, write_ppm, Domain, Sample, SceneSpec,
};
use nightshift::metrics::{instance_ssim, palette_distance, ssim, SsimConfig};
use nightshift::rng::stream_rng;
use nightshift::tensor::Tensor;
use nightshift::trainer::{
    config_from_checkpoint, read_checkpoint, train, Model, TrainConfig, Trainer,
};
use nightshift::verify::{composite_checks, primitive_checks, GRAD_TOL};
use nightshift::{Error, Result};

use config::parse_run_config;

const STYLE_STREAM: u64 = 0x7374_796c;
const COUNT_STREAM: u64 = 0x636e_7431;

#[derive(Parser)]
#[command(name = "nightshift", version, about = "Instance-aware image translation, desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BoxMode {
    On,
    Off,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize unpaired two-domain datasets
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Samples per domain
        #[arg(long)]
        n: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Comma-separated domain list
        #[arg(long, default_value = "A,B")]
        domains: String,
    },
    /// Train a translation model
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data_a: Option<PathBuf>,
        #[arg(long)]
        data_b: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from an existing checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Translate a dataset with a trained checkpoint
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, conflicts_with = "style_from")]
        style_seed: Option<u64>,
        /// Take the style code from this image instead of sampling one
        #[arg(long)]
        style_from: Option<PathBuf>,
        /// Consume instance boxes from the input annotations
        #[arg(long, value_enum, default_value_t = BoxMode::Off)]
        boxes: BoxMode,
    },
    /// Translate domain A and score it against both palettes
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data_a: PathBuf,
        #[arg(long)]
        data_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify analytic gradients against central differences
    GradCheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Produce loss-curve CSV and an image-triplet montage from a run
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { out, n, size, seed, domains } => cmd_gen_data(&out, n, size, seed, &domains),
        Cmd::Train { config, data_a, data_b, out, resume } => {
            cmd_train(&config, data_a, data_b, out, resume)
        }
        Cmd::Translate { ckpt, input, out, style_seed, style_from, boxes } => {
            cmd_translate(&ckpt, &input, &out, style_seed, style_from, boxes)
        }
        Cmd::Eval { ckpt, data_a, data_b, out } => cmd_eval(&ckpt, &data_a, &data_b, &out),
        Cmd::GradCheck { seed } => cmd_grad_check(seed),
        Cmd::Report { run, out } => cmd_report(&run, &out),
    }
}

// ── gen-data ──

fn cmd_gen_data(out: &Path, n: u64, size: usize, seed: u64, domains: &str) -> Result<()> {
    if size % 4 != 0 {
        return Err(Error::Config("size must be divisible by 4".into()));
    }
    let mut doms = Vec::new();
    for part in domains.split(',') {
        doms.push(part.trim().parse::<Domain>()?);
    }
    for (di, &domain) in doms.iter().enumerate() {
        let mut samples = Vec::with_capacity(n as usize);
        for i in 0..n {
            // disjoint per-domain seed ranges keep the datasets unpaired
            let sseed = seed + (di as u64) * 1_000_000 + i;
            let n_instances = stream_rng(sseed, COUNT_STREAM).gen_range(1..=4);
            samples.push(gen_scene(&SceneSpec { seed: sseed, image_size: size, n_instances, domain })?);
        }
        let dir = out.join(domain.to_string());
        write_dataset(&samples, &dir)?;
        println!("domain {domain}: {n} samples of {size}x{size} in {}", dir.display());
    }
    Ok(())
}

// ── train ──

fn cmd_train(
    config: &Path,
    data_a: Option<PathBuf>,
    data_b: Option<PathBuf>,
    out: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> Result<()> {
    let text = fs::read_to_string(config)
        .map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
    let mut rc = parse_run_config(&text)?;
    rc.data_a = data_a.or(rc.data_a);
    rc.data_b = data_b.or(rc.data_b);
    rc.out = out.or(rc.out);
    let missing = |flag: &str| Error::Config(format!("{flag} given neither as flag nor in config"));
    let da = rc.data_a.clone().ok_or_else(|| missing("--data-a"))?;
    let db = rc.data_b.clone().ok_or_else(|| missing("--data-b"))?;
    let out_dir = rc.out.clone().ok_or_else(|| missing("--out"))?;

    let samples_a = read_dataset(&da)?;
    let samples_b = read_dataset(&db)?;
    let reports = train(&rc.train, &samples_a, &samples_b, &out_dir, resume.as_deref())?;
    // echo the defaults-filled config, paths included
    fs::write(out_dir.join("run.json"), serde_json::to_string_pretty(&rc)?)?;
    if let Some(last) = reports.last() {
        println!(
            "trained {} steps (total loss {:.4}); artifacts in {}",
            rc.train.steps,
            last.total,
            out_dir.display()
        );
    } else {
        println!("checkpoint already at {} steps; nothing to do", rc.train.steps);
    }
    Ok(())
}

// ── translate ──

fn load_trained(ckpt: &Path) -> Result<(Trainer, TrainConfig)> {
    let raw = read_checkpoint(ckpt)?;
    let cfg = config_from_checkpoint(&raw)?;
    let trainer = Trainer::resume(cfg.clone(), ckpt)?;
    Ok((trainer, cfg))
}

fn translate_image(model: &Model, x: &Tensor, boxes: &[BoundingBox], s: &Tensor) -> Tensor {
    let c = model.content_encoder.forward(x);
    let (u, _) = model.aggregator.aggregate(&c, &[boxes.to_vec()], s);
    model.generator.forward(&u)
}

fn check_size(sample: &Sample, cfg: &TrainConfig) -> Result<()> {
    let got = sample.image.shape()[1];
    if got != cfg.backbone.image_size {
        return Err(Error::Data(format!(
            "sample {} is {got} px but the checkpoint was trained at {} px",
            sample.id, cfg.backbone.image_size
        )));
    }
    Ok(())
}

fn cmd_translate(
    ckpt: &Path,
    input: &Path,
    out: &Path,
    style_seed: Option<u64>,
    style_from: Option<PathBuf>,
    boxes: BoxMode,
) -> Result<()> {
    let (trainer, cfg) = load_trained(ckpt)?;
    let samples = read_dataset(input)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("no samples under {}", input.display())));
    }
    let s = match style_from {
        Some(img) => {
            let t = read_ppm(&img)?;
            let (h, w) = (t.shape()[1], t.shape()[2]);
            trainer.model.style_encoder.forward(&t.reshape(&[1, 3, h, w]))
        }
        None => {
            let mut rng = stream_rng(style_seed.unwrap_or(0), STYLE_STREAM);
            sample_style(&mut rng, 1, cfg.backbone.style_dim)
        }
    };
    fs::create_dir_all(out)?;
    let side = cfg.backbone.image_size;
    for sample in &samples {
        check_size(sample, &cfg)?;
        let x = sample.image.reshape(&[1, 3, side, side]);
        let bx: &[BoundingBox] = match boxes {
            BoxMode::On => &sample.boxes,
            BoxMode::Off => &[],
        };
        let yhat = translate_image(&trainer.model, &x, bx, &s);
        write_ppm(&out.join(format!("{}.ppm", sample.id)), &yhat.reshape(&[3, side, side]))?;
    }
    println!("translated {} images into {}", samples.len(), out.display());
    Ok(())
}

// ── eval ──

fn cmd_eval(ckpt: &Path, data_a: &Path, data_b: &Path, out: &Path) -> Result<()> {
    let (trainer, cfg) = load_trained(ckpt)?;
    let samples_a = read_dataset(data_a)?;
    let samples_b = read_dataset(data_b)?;
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(Error::Data("eval needs non-empty A and B datasets".into()));
    }
    let side = cfg.backbone.image_size;
    let scfg = SsimConfig::default();

    let mut images = Vec::new();
    let mut sums = [0.0f64; 4];
    let mut inst_count = 0usize;
    for (i, sample) in samples_a.iter().enumerate() {
        check_size(sample, &cfg)?;
        // reference-guided: style code comes from a real domain-B sample
        let yref = &samples_b[i % samples_b.len()];
        check_size(yref, &cfg)?;
        let s = trainer.model.style_encoder.forward(&yref.image.reshape(&[1, 3, side, side]));
        let x = sample.image.reshape(&[1, 3, side, side]);
        let yhat = translate_image(&trainer.model, &x, &[], &s).reshape(&[3, side, side]);

        let v_ssim = ssim(&sample.image, &yhat, &scfg)?;
        let v_inst = instance_ssim(&sample.image, &yhat, &sample.boxes, &scfg).ok();
        let v_pa = palette_distance(&yhat, Domain::A);
        let v_pb = palette_distance(&yhat, Domain::B);
        sums[0] += v_ssim;
        if let Some(v) = v_inst {
            sums[1] += v;
            inst_count += 1;
        }
        sums[2] += v_pa;
        sums[3] += v_pb;
        images.push(serde_json::json!({
            "id": sample.id,
            "ssim": v_ssim,
            "instance_ssim": v_inst,
            "palette_A": v_pa,
            "palette_B": v_pb,
        }));
    }
    let n = samples_a.len() as f64;
    let doc = serde_json::json!({
        "images": images,
        "aggregate": {
            "ssim": sums[0] / n,
            "instance_ssim": if inst_count > 0 { Some(sums[1] / inst_count as f64) } else { None },
            "palette_A": sums[2] / n,
            "palette_B": sums[3] / n,
        },
    });
    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&doc)?)?;
    println!("wrote {}", out.join("metrics.json").display());
    Ok(())
}

// ── grad-check ──

fn cmd_grad_check(seed: u64) -> Result<()> {
    let mut results = primitive_checks(seed);
    results.extend(composite_checks(seed));
    println!("{:<28}{:>14}  result", "check", "max rel err");
    for r in &results {
        println!(
            "{:<28}{:>14.3e}  {}",
            r.name,
            r.max_rel_err,
            if r.pass() { "PASS" } else { "FAIL" }
        );
    }
    let failing: Vec<&str> = results.iter().filter(|r| !r.pass()).map(|r| r.name.as_str()).collect();
    if failing.is_empty() {
        println!("all {} checks below {GRAD_TOL:.0e}", results.len());
        Ok(())
    } else {
        Err(Error::GradCheck(failing.join(", ")))
    }
}

// ── report ──

/// Stitches (input | translated | reconstruction) rows with 2 px white
/// separators; width is 3 * size + 2 * 2.
fn montage(rows: &[(Tensor, Tensor, Tensor)], size: usize) -> Tensor {
    const SEP: usize = 2;
    let width = 3 * size + 2 * SEP;
    let height = rows.len() * size + (rows.len() - 1) * SEP;
    let mut data = vec![1.0; 3 * height * width];
    for (ri, (a, b, c)) in rows.iter().enumerate() {
        for (ci, img) in [a, b, c].into_iter().enumerate() {
            let oy = ri * (size + SEP);
            let ox = ci * (size + SEP);
            let d = img.data();
            for ch in 0..3 {
                for i in 0..size {
                    for j in 0..size {
                        data[(ch * height + oy + i) * width + ox + j] =
                            d[(ch * size + i) * size + j];
                    }
                }
            }
        }
    }
    Tensor::from_vec(data, &[3, height, width])
}

fn cmd_report(run: &Path, out: &Path) -> Result<()> {
    let run_json = fs::read_to_string(run.join("run.json"))
        .map_err(|e| Error::Config(format!("{}: {e}", run.join("run.json").display())))?;
    let rc = parse_run_config(&run_json)?;
    fs::create_dir_all(out)?;
    fs::copy(run.join("losses.csv"), out.join("loss_curve.csv"))
        .map_err(|e| Error::Config(format!("{}: {e}", run.join("losses.csv").display())))?;

    let mut ckpts: Vec<PathBuf> = fs::read_dir(run)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ckpt_") && n.ends_with(".bin"))
        })
        .collect();
    ckpts.sort();
    let Some(latest) = ckpts.last() else {
        return Err(Error::Config(format!("no checkpoints under {}", run.display())));
    };
    let trainer = Trainer::resume(rc.train.clone(), latest)?;
    let da = rc
        .data_a
        .ok_or_else(|| Error::Config("run.json carries no data_a path".into()))?;
    let samples = read_dataset(&da)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("no samples under {}", da.display())));
    }

    let side = rc.train.backbone.image_size;
    let mut srng = stream_rng(rc.train.seed, STYLE_STREAM);
    let s = sample_style(&mut srng, 1, rc.train.backbone.style_dim);
    let mut rows = Vec::new();
    for sample in samples.iter().take(4) {
        check_size(sample, &rc.train)?;
        let x = sample.image.reshape(&[1, 3, side, side]);
        let yhat = translate_image(&trainer.model, &x, &sample.boxes, &s);
        let own_style = trainer.model.style_encoder.forward(&x);
        let recon = translate_image(&trainer.model, &x, &[], &own_style);
        rows.push((
            sample.image.clone(),
            yhat.reshape(&[3, side, side]),
            recon.reshape(&[3, side, side]),
        ));
    }
    let grid = montage(&rows, side);
    write_ppm(&out.join("montage.ppm"), &grid)?;
    println!(
        "report in {}: loss_curve.csv + montage.ppm ({} rows from {})",
        out.display(),
        rows.len(),
        latest.display()
    );
    Ok(())
}
