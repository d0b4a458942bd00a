//! `cad`: command-line front end for confidence-aware displacement.
//!
//! Exit codes: 0 on success, 2 for unreadable or invalid input, 3 when
//! shapes or grid geometry do not line up.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use cad_core::harness::{run_demo, TrainConfig};
use cad_core::io::TensorFile;
use cad_core::losses::{ce_loss, cps_loss, dice_loss, mt_loss, OneHotLabels};
use cad_core::metrics::{evaluate, MetricReport};
use cad_core::{
    displace_views, region_pixel_mask, softmax, CadError, GridSpec, LabelMap, PlacementRule, Tensor, ThresholdSchedule,
    Thresholds,
};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

const EXIT_INPUT: u8 = 2;
const EXIT_SHAPE: u8 = 3;

#[derive(Parser)]
#[command(name = "cad", version, about = "Confidence-aware adaptive displacement tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Swap low-confidence regions between a weak and a strong view.
    Displace(DisplaceArgs),
    /// Print the escalating thresholds per iteration as CSV.
    Schedule(ScheduleArgs),
    /// Train on synthetic disks and write the per-iteration log as JSON lines.
    Demo(DemoArgs),
    /// Overlap and boundary metrics between two label maps.
    Metrics(MetricsArgs),
    /// Loss terms for two logit tensors against a label map.
    Losses(LossesArgs),
}

#[derive(Args)]
struct DisplaceArgs {
    /// K x H x W logits of the weak view.
    #[arg(long)]
    weak: PathBuf,
    /// K x H x W logits of the strong view.
    #[arg(long)]
    strong: PathBuf,
    /// Patches per side.
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    grid: u64,
    #[arg(long)]
    c_thr: f64,
    #[arg(long)]
    r_thr: usize,
    /// Choose among the most confident placements by KL divergence.
    #[arg(long)]
    kl: bool,
    #[arg(long, default_value_t = cad_core::llcr::DEFAULT_K_TOP as u64, value_parser = clap::value_parser!(u64).range(1..))]
    k_top: u64,
    /// Image to displace for the weak view; the logits are displaced when omitted.
    #[arg(long, requires = "strong_image")]
    weak_image: Option<PathBuf>,
    #[arg(long, requires = "weak_image")]
    strong_image: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long, default_value_t = cad_core::dte::DEFAULT_C_MIN)]
    c_min: f64,
    #[arg(long, default_value_t = cad_core::dte::DEFAULT_C_MAX)]
    c_max: f64,
    #[arg(long, default_value_t = cad_core::dte::DEFAULT_R_MIN)]
    r_min: usize,
    #[arg(long, default_value_t = cad_core::dte::DEFAULT_R_MAX)]
    r_max: usize,
    #[arg(long)]
    beta: f64,
    #[arg(long)]
    iters: u64,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    iters: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    kl: bool,
}

#[derive(Args)]
struct MetricsArgs {
    /// Predicted i32 label map.
    #[arg(long)]
    pred: PathBuf,
    /// Reference i32 label map.
    #[arg(long)]
    truth: PathBuf,
    /// Evaluate only this class; every foreground class otherwise.
    #[arg(long)]
    class: Option<usize>,
}

#[derive(Args)]
struct LossesArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// i32 label map.
    #[arg(long)]
    target: PathBuf,
}

fn read_file(path: &Path) -> Result<TensorFile> {
    TensorFile::read(path).with_context(|| format!("reading {}", path.display()))
}

fn read_tensor(path: &Path) -> Result<Tensor<f64>> {
    read_file(path)?
        .to_tensor()
        .with_context(|| format!("decoding {}", path.display()))
}

fn read_labels(path: &Path, num_classes: Option<usize>) -> Result<LabelMap> {
    read_file(path)?
        .to_label_map(num_classes)
        .with_context(|| format!("decoding {}", path.display()))
}

fn write_tensor(path: &Path, t: &Tensor<f64>) -> Result<()> {
    TensorFile::from_tensor(t)
        .write(path)
        .with_context(|| format!("writing {}", path.display()))
}

fn displace(args: DisplaceArgs) -> Result<()> {
    let logits_w = read_tensor(&args.weak)?;
    let logits_s = read_tensor(&args.strong)?;
    logits_w.ensure_same_shape(&logits_s)?;
    let (_, h, w) = logits_w.chw()?;
    let spec = GridSpec::square(args.grid as usize, h, w)?;
    let (x_w, x_s) = match (&args.weak_image, &args.strong_image) {
        (Some(a), Some(b)) => (read_tensor(a)?, read_tensor(b)?),
        _ => (logits_w.clone(), logits_s.clone()),
    };
    let rule = if args.kl {
        PlacementRule::KlTop(args.k_top as usize)
    } else {
        PlacementRule::MostConfident
    };
    let thresholds = Thresholds {
        c_threshold: args.c_thr,
        r_threshold: args.r_thr,
    };
    let d = displace_views(&x_w, &x_s, &logits_w, &logits_s, spec, thresholds, rule, 0)?;

    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    write_tensor(&args.out_dir.join("weak_displaced.cadt"), &d.x_prime_w)?;
    write_tensor(&args.out_dir.join("strong_displaced.cadt"), &d.x_prime_s)?;
    cad_core::io::write_mask_pgm(
        args.out_dir.join("mask_weak.pgm"),
        w,
        h,
        &region_pixel_mask(&d.strong_to_weak.region, spec),
    )?;
    cad_core::io::write_mask_pgm(
        args.out_dir.join("mask_strong.pgm"),
        w,
        h,
        &region_pixel_mask(&d.weak_to_strong.region, spec),
    )?;
    let record = serde_json::json!({
        "grid": spec,
        "rule": rule,
        "weak_to_strong": d.weak_to_strong,
        "strong_to_weak": d.strong_to_weak,
    });
    let path = args.out_dir.join("displacement.json");
    fs::write(&path, serde_json::to_string_pretty(&record)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    println!(
        "strong view: {} patches replaced; weak view: {} patches replaced",
        d.weak_to_strong.region.len(),
        d.strong_to_weak.region.len()
    );
    Ok(())
}

fn schedule(args: ScheduleArgs) -> Result<()> {
    let s = ThresholdSchedule::new(args.c_min, args.c_max, args.r_min, args.r_max, args.beta)?;
    println!("t,psi,c_threshold,r_threshold");
    for t in 0..=args.iters {
        let th = s.thresholds_at(t);
        println!("{t},{},{},{}", s.ramp(t), th.c_threshold, th.r_threshold);
    }
    Ok(())
}

fn demo(args: DemoArgs) -> Result<()> {
    let cfg = TrainConfig {
        seed: args.seed,
        iterations: args.iters,
        kl_mode: args.kl,
        ..TrainConfig::default()
    };
    let log = run_demo(&cfg)?;
    fs::write(&args.out, log.to_jsonl()).with_context(|| format!("writing {}", args.out.display()))?;
    let first = &log.iterations[0].heldout_dsc;
    println!(
        "held-out DSC (teacher): {:.4} -> {:.4}; log written to {}",
        first.teacher,
        log.final_dsc.teacher,
        args.out.display()
    );
    Ok(())
}

fn metrics(args: MetricsArgs) -> Result<()> {
    let (pred_file, truth_file) = (read_file(&args.pred)?, read_file(&args.truth)?);
    let decode = |f: &TensorFile, path: &Path, k| {
        f.to_label_map(k)
            .with_context(|| format!("decoding {}", path.display()))
    };
    let k = decode(&pred_file, &args.pred, None)?
        .num_classes()
        .max(decode(&truth_file, &args.truth, None)?.num_classes());
    let pred = decode(&pred_file, &args.pred, Some(k))?;
    let truth = decode(&truth_file, &args.truth, Some(k))?;
    let classes: Vec<usize> = match args.class {
        Some(c) => vec![c],
        None => (1..k).collect(),
    };
    let reports = classes
        .into_iter()
        .map(|c| evaluate(&pred, &truth, c))
        .collect::<Result<Vec<MetricReport>, _>>()?;
    println!("{}", serde_json::to_string_pretty(&reports)?);
    Ok(())
}

#[derive(Serialize)]
struct LossSummary {
    dice_a: f64,
    ce_a: f64,
    mt_a: f64,
    dice_b: f64,
    ce_b: f64,
    mt_b: f64,
    /// Dice of `a` against the argmax of `b`.
    cps_a: f64,
    /// Dice of `b` against the argmax of `a`.
    cps_b: f64,
}

fn losses(args: LossesArgs) -> Result<()> {
    let a = read_tensor(&args.a)?;
    let b = read_tensor(&args.b)?;
    a.ensure_same_shape(&b)?;
    let (k, _, _) = a.chw()?;
    let target = OneHotLabels::from_label_map(&read_labels(&args.target, Some(k))?);
    let (pa, pb) = (softmax(&a)?, softmax(&b)?);
    let summary = LossSummary {
        dice_a: dice_loss(&pa, &target)?,
        ce_a: ce_loss(&pa, &target)?,
        mt_a: mt_loss(&a, &target)?,
        dice_b: dice_loss(&pb, &target)?,
        ce_b: ce_loss(&pb, &target)?,
        mt_b: mt_loss(&b, &target)?,
        cps_a: cps_loss(&a, &b)?,
        cps_b: cps_loss(&b, &a)?,
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let shape = err
        .chain()
        .filter_map(|e| e.downcast_ref::<CadError>())
        .any(CadError::is_shape_error);
    if shape {
        EXIT_SHAPE
    } else {
        EXIT_INPUT
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CAD_LOG_LEVEL", "error")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Displace(a) => displace(a),
        Command::Schedule(a) => schedule(a),
        Command::Demo(a) => demo(a),
        Command::Metrics(a) => metrics(a),
        Command::Losses(a) => losses(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
