use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use margin_calib::bound::{bound_csv_string, evaluate_epsilon, BoundConfig};
use margin_calib::fmt::g12;
use margin_calib::gradcheck::gradcheck;
use margin_calib::losses::LossKind;
use margin_calib::margins::{compute_margins, read_margins_csv, write_margins_csv, DEFAULT_TAU, DEFAULT_UPSILON};
use margin_calib::metrics::{lower_bound_report, metrics_csv_string, BoundScope};
use margin_calib::segdata::{
    accumulate_stats, features_from_intensity, generate_synthetic, read_grey_pgm, read_mask_pgm, read_stats_csv,
    write_grey_pgm, write_mask_pgm, write_stats_csv, Dataset, FeatureBatch, MaskBatch, SynthConfig, FEATURE_DIM,
};
use margin_calib::trainer::{evaluate, train, PixelMLP, TrainConfig, DEFAULT_HIDDEN};
use margin_calib::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "margcal", version, about = "Margin-calibrated segmentation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset as PGM masks and intensity images.
    Gen(GenArgs),
    /// Count pixels per class over PGM masks.
    Stats(StatsArgs),
    /// Compute margin-offsets from a stats CSV.
    Margins(MarginsArgs),
    /// Train the per-pixel network.
    Train(TrainArgs),
    /// Evaluate a saved model.
    Eval(EvalArgs),
    /// Evaluate the IoU generalization gap.
    Bound(BoundArgs),
    /// Finite-difference check of every loss gradient.
    Gradcheck(GradcheckArgs),
    /// Grid search over tau and upsilon with validation mIoU.
    Sweep(SweepArgs),
}

#[derive(Debug, Args, Clone)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 200)]
    n_images: usize,
    /// Comma-separated class fractions, background first.
    #[arg(long, default_value = "0.9,0.07,0.03", value_parser = parse_list)]
    ratios: FloatList,
    #[arg(long, default_value_t = 0.15)]
    noise: f64,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[command(flatten)]
    synth: SynthArgs,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct StatsArgs {
    /// Mask files, or directories holding `mask_*.pgm`.
    #[arg(long, num_args = 1.., required = true)]
    masks: Vec<PathBuf>,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 255)]
    ignore_index: u8,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MarginsArgs {
    #[arg(long)]
    stats: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    #[arg(long, default_value_t = DEFAULT_UPSILON)]
    upsilon: f64,
    #[arg(long)]
    out: PathBuf,
}

/// Training and validation data: synthetic by default, or `gen` output directories.
#[derive(Debug, Args, Clone)]
struct DataArgs {
    /// Seed of the training split; the validation split uses seed + 1.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 200)]
    train_images: usize,
    #[arg(long, default_value_t = 50)]
    val_images: usize,
    #[arg(long, default_value = "0.9,0.07,0.03", value_parser = parse_list)]
    ratios: FloatList,
    #[arg(long, default_value_t = 0.15)]
    noise: f64,
    /// Directory written by `gen`, used instead of synthetic training data.
    #[arg(long)]
    train_dir: Option<PathBuf>,
    /// Directory written by `gen`, used instead of synthetic validation data.
    #[arg(long)]
    val_dir: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
struct OptimArgs {
    #[arg(long, default_value = "margin_calibration")]
    loss: LossKind,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    batch_images: usize,
    #[arg(long, default_value_t = DEFAULT_HIDDEN)]
    hidden: usize,
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    #[arg(long, default_value_t = DEFAULT_UPSILON)]
    upsilon: f64,
    /// Warm start from a saved parameter file.
    #[arg(long)]
    init_from: Option<PathBuf>,
    #[arg(long)]
    out_model: Option<PathBuf>,
    #[arg(long)]
    log_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = Split::Val)]
    split: Split,
    /// Margins CSV; adds the IoU lower bound over the evaluated pixels.
    #[arg(long)]
    margins: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BoundArgs {
    #[arg(long)]
    stats: PathBuf,
    /// Margins CSV; computed from the stats with --tau/--upsilon when absent.
    #[arg(long)]
    margins: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    #[arg(long, default_value_t = DEFAULT_UPSILON)]
    upsilon: f64,
    /// Pixels per image.
    #[arg(long)]
    m_pixels: u64,
    #[arg(long, default_value_t = 0.05)]
    eta: f64,
    #[arg(long)]
    c_theta: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Check only this loss; all losses when omitted.
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    batches: usize,
    #[arg(long, default_value_t = 16)]
    pixels: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Exit with status 1 when any error exceeds this.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, value_parser = parse_list, default_value = "10")]
    taus: FloatList,
    #[arg(long, value_parser = parse_list, default_value = "1")]
    upsilons: FloatList,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Comma-separated floats as one argument.
#[derive(Debug, Clone)]
struct FloatList(Vec<f64>);

fn parse_list(s: &str) -> std::result::Result<FloatList, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<std::result::Result<_, _>>()
        .map(FloatList)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Margins(a) => cmd_margins(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bound(a) => cmd_bound(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::IoPath {
            path: p.to_path_buf(),
            source: e,
        }),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn synth_config(a: &SynthArgs) -> SynthConfig {
    SynthConfig::new(a.seed, a.width, a.height, a.n_images, a.ratios.0.clone(), a.noise)
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let cfg = synth_config(&a.synth);
    let data = generate_synthetic(&cfg)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::IoPath {
        path: a.out_dir.clone(),
        source: e,
    })?;
    let m = cfg.width * cfg.height;
    for i in 0..cfg.n_images {
        let mask = data.masks.select_images(&[i]);
        write_mask_pgm(&mask, a.out_dir.join(format!("mask_{i:05}.pgm")))?;
        let grey: Vec<u8> = (0..m)
            .map(|p| {
                let v = data.features.pixel(i * m + p)[2];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            })
            .collect();
        write_grey_pgm(
            cfg.width,
            cfg.height,
            &grey,
            a.out_dir.join(format!("image_{i:05}.pgm")),
        )?;
    }
    println!("wrote {} images to {}", cfg.n_images, a.out_dir.display());
    Ok(())
}

/// Mask paths: files as given, directories expanded to sorted `mask_*.pgm`.
fn mask_paths(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::IoPath {
                    path: p.clone(),
                    source: e,
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|q| {
                    q.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("mask_") && n.ends_with(".pgm"))
                })
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn cmd_stats(a: StatsArgs) -> Result<()> {
    let masks = mask_paths(&a.masks)?
        .iter()
        .map(|p| read_mask_pgm(p).map(|m| m.with_ignore_index(a.ignore_index)))
        .collect::<Result<Vec<_>>>()?;
    let stats = accumulate_stats(&masks, a.k)?;
    match a.out {
        Some(p) => write_stats_csv(&stats, p),
        None => {
            let mut text = String::from("class_index,n_pixels,p_k\n");
            for (k, (&n, &p)) in stats.n_per_class.iter().zip(&stats.p_per_class).enumerate() {
                text.push_str(&format!("{k},{n},{}\n", g12(p)));
            }
            emit(&text, None)
        }
    }
}

fn cmd_margins(a: MarginsArgs) -> Result<()> {
    let stats = read_stats_csv(&a.stats)?;
    let m = compute_margins(&stats, a.tau, a.upsilon)?;
    write_margins_csv(&m, &stats, &a.out)
}

/// Loads a directory written by `gen`.
fn load_dir(dir: &Path) -> Result<Dataset> {
    let masks = mask_paths(&[dir.to_path_buf()])?;
    if masks.is_empty() {
        return Err(Error::Precondition(format!("no mask_*.pgm files in {}", dir.display())));
    }
    let mut batches = Vec::with_capacity(masks.len());
    let mut features = Vec::new();
    for mp in &masks {
        let mask = read_mask_pgm(mp)?;
        let name = mp.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let ip = mp.with_file_name(name.replacen("mask_", "image_", 1));
        let (w, h, grey) = read_grey_pgm(&ip)?;
        if (w, h) != (mask.width, mask.height) {
            return Err(Error::Shape(format!("{} does not match its mask", ip.display())));
        }
        let intensity: Vec<f64> = grey.iter().map(|&g| g as f64 / 255.0).collect();
        features.extend(features_from_intensity(&intensity, w, h));
        batches.push(mask);
    }
    Dataset::new(FeatureBatch::new(features, FEATURE_DIM)?, MaskBatch::concat(&batches)?)
}

fn load_split(a: &DataArgs, split: Split) -> Result<Dataset> {
    let (dir, seed, n) = match split {
        Split::Train => (&a.train_dir, a.data_seed, a.train_images),
        Split::Val => (&a.val_dir, a.data_seed.wrapping_add(1), a.val_images),
    };
    match dir {
        Some(d) => load_dir(d),
        None => generate_synthetic(&SynthConfig::new(
            seed,
            a.width,
            a.height,
            n,
            a.ratios.0.clone(),
            a.noise,
        )),
    }
}

fn n_classes(a: &DataArgs, data: &Dataset) -> usize {
    if a.train_dir.is_none() {
        return a.ratios.0.len();
    }
    data.masks
        .labels
        .iter()
        .filter(|&&l| l != data.masks.ignore_index)
        .max()
        .map_or(1, |&l| l as usize + 1)
}

fn train_config(o: &OptimArgs, tau: f64, upsilon: f64) -> TrainConfig {
    TrainConfig {
        loss: o.loss,
        epochs: o.epochs,
        batch_images: o.batch_images,
        learning_rate: o.lr,
        momentum: o.momentum,
        seed: o.seed,
        tau,
        upsilon,
        eval_every: o.eval_every,
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let train_set = load_split(&a.data, Split::Train)?;
    let val_set = if a.data.val_images > 0 || a.data.val_dir.is_some() {
        Some(load_split(&a.data, Split::Val)?)
    } else {
        None
    };
    let k = n_classes(&a.data, &train_set);
    let model = match &a.init_from {
        Some(p) => PixelMLP::load(p)?,
        None => PixelMLP::new_seeded(FEATURE_DIM, a.optim.hidden, k, a.optim.seed, 1.0),
    };
    if model.k != k {
        return Err(Error::Shape(format!("model has {} classes, data has {k}", model.k)));
    }
    let cfg = train_config(&a.optim, a.tau, a.upsilon);
    let out = train(model, &train_set, val_set.as_ref(), &cfg)?;
    if let Some(p) = &a.out_model {
        out.model.save(p)?;
    }
    match &a.log_csv {
        Some(p) => out.log.write_csv(p)?,
        None => emit(&out.log.csv_string(), None)?,
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = PixelMLP::load(&a.model)?;
    let data = load_split(&a.data, a.split)?;
    let report = match &a.margins {
        Some(mp) => {
            let margins = read_margins_csv(mp)?;
            let stats = data.stats(model.k)?;
            let scores = model.forward(&data.features)?;
            lower_bound_report(&scores, &data.masks, &margins, &stats, BoundScope::Dataset)?
        }
        None => evaluate(&model, &data)?,
    };
    emit(&metrics_csv_string(&report), a.out.as_deref())
}

fn cmd_bound(a: BoundArgs) -> Result<()> {
    let stats = read_stats_csv(&a.stats)?;
    let margins = match &a.margins {
        Some(p) => read_margins_csv(p)?,
        None => compute_margins(&stats, a.tau, a.upsilon)?,
    };
    let cfg = BoundConfig {
        stats,
        margins,
        m_pixels: a.m_pixels,
        eta: a.eta,
        c_theta: a.c_theta,
    };
    let result = evaluate_epsilon(&cfg)?;
    emit(&bound_csv_string(&result), a.out.as_deref())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let kinds: Vec<LossKind> = match a.loss {
        Some(k) => vec![k],
        None => LossKind::ALL.to_vec(),
    };
    let mut text = String::from("loss_name,max_rel_err,n_probes\n");
    let mut worst = 0.0f64;
    for kind in kinds {
        let r = gradcheck(kind, a.seed, a.batches, a.pixels, a.classes)?;
        worst = worst.max(r.max_rel_err);
        text.push_str(&format!("{},{},{}\n", kind, g12(r.max_rel_err), r.n_probes));
    }
    emit(&text, None)?;
    if worst > a.tolerance {
        return Err(Error::Domain(format!(
            "gradient error {worst:e} exceeds tolerance {:e}",
            a.tolerance
        )));
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let train_set = load_split(&a.data, Split::Train)?;
    let val_set = load_split(&a.data, Split::Val)?;
    let k = n_classes(&a.data, &train_set);
    let mut text = String::from("tau,upsilon,val_miou\n");
    for &tau in &a.taus.0 {
        for &upsilon in &a.upsilons.0 {
            let cfg = TrainConfig {
                loss: LossKind::MarginCalibration,
                eval_every: a.optim.epochs,
                ..train_config(&a.optim, tau, upsilon)
            };
            let model = PixelMLP::new_seeded(FEATURE_DIM, a.optim.hidden, k, a.optim.seed, 1.0);
            let miou = train(model, &train_set, None, &cfg).and_then(|out| evaluate(&out.model, &val_set));
            match miou {
                Ok(r) => text.push_str(&format!("{},{},{}\n", g12(tau), g12(upsilon), g12(r.miou))),
                Err(e) => {
                    eprintln!("cell tau={tau} upsilon={upsilon} failed: {e}");
                    text.push_str(&format!("{},{},NaN\n", g12(tau), g12(upsilon)));
                }
            }
        }
    }
    emit(&text, a.out.as_deref())
}
