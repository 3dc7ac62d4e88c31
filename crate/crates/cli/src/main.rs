use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use diffusion_ad::atomic::write_atomic;
use diffusion_ad::config::RunConfig;
use diffusion_ad::data::{
    load_png, load_timeseries_csv, resize_image_to, save_png, save_png_grid, z_normalize_window, Sample,
};
use diffusion_ad::denoiser::Denoiser;
use diffusion_ad::diffusion::unconditional_sample;
use diffusion_ad::pipeline::{
    build_perception, input_shape, load_dataset, loss_log_csv, prepare_input, scores_csv, Detector,
};
use diffusion_ad::training::{load_checkpoint, save_checkpoint, train, StepRecord};
use diffusion_ad::{Error, Tensor};

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_SINGLE_CLASS: u8 = 5;

const EXIT_CODES: &str = "Exit codes: 0 ok, 1 other failure, 2 configuration error, 3 data or file error, \
                          4 numeric failure (NaN), 5 test set lacks one of the classes.";

#[derive(Parser, Debug)]
#[command(name = "diffusion-ad", version, about = "Anomaly detection with denoising diffusion models")]
struct Cli {
    /// TOML run configuration; every key has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a key, e.g. `--set train.epochs=5` (repeatable, applied after the file).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Evaluation worker threads (eval.threads).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the noise predictor on the normal training split.
    Train,
    /// Score the test split, write the scores CSV and print the AUC.
    Eval(EvalArgs),
    /// Score one input file (PNG image or CSV series).
    Score(ScoreArgs),
    /// Draw unconditional samples through the full reverse chain.
    Sample(SampleArgs),
}

#[derive(Args, Debug)]
struct CheckpointArg {
    /// Defaults to output.dir/output.checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    ckpt: CheckpointArg,
    /// Score weight λ (score.lambda).
    #[arg(long)]
    lambda: Option<f64>,
    /// Scores CSV; defaults to output.dir/output.scores.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[command(flatten)]
    ckpt: CheckpointArg,
    /// Input file: PNG for image data kinds, CSV for time-series kinds.
    input: PathBuf,
    #[arg(long)]
    lambda: Option<f64>,
    /// Write the pixel anomaly map as 8-bit grayscale PNG.
    #[arg(long)]
    map: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[command(flatten)]
    ckpt: CheckpointArg,
    #[arg(long, default_value_t = 16)]
    count: usize,
    /// Defaults to eval.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Grid PNG; defaults to output.dir/output.samples.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Numeric(_) | Error::NonFinite(_) => EXIT_NUMERIC,
        Error::SingleClass(_) => EXIT_SINGLE_CLASS,
        Error::Data(_)
        | Error::File { .. }
        | Error::Io(_)
        | Error::Shape(_)
        | Error::MissingWeight(_)
        | Error::BadMagic
        | Error::VersionMismatch { .. }
        | Error::Truncated(_)
        | Error::CorruptCheckpoint(_) => EXIT_DATA,
        _ => EXIT_OTHER,
    }
}

fn keys_help() -> String {
    let mut s = String::from("Configuration keys (TOML sections; defaults shown):\n");
    for (k, v) in RunConfig::documented_keys() {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s.push('\n');
    s.push_str(EXIT_CODES);
    s
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let help = keys_help();
    let cmd = Cli::command().after_help(help.clone()).mut_subcommands(|s| s.after_help(help.clone()));
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> diffusion_ad::Result<()> {
    let mut overrides = cli.set.clone();
    if let Some(t) = cli.threads {
        overrides.push(format!("eval.threads={t}"));
    }
    let lambda = match &cli.command {
        Command::Eval(a) => a.lambda,
        Command::Score(a) => a.lambda,
        _ => None,
    };
    if let Some(l) = lambda {
        overrides.push(format!("score.lambda={l:?}"));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Train => cmd_train(&cfg),
        Command::Eval(a) => cmd_eval(&cfg, &a),
        Command::Score(a) => cmd_score(&cfg, &a),
        Command::Sample(a) => cmd_sample(&cfg, &a),
    }
}

fn checkpoint_path(cfg: &RunConfig, arg: &CheckpointArg) -> PathBuf {
    arg.checkpoint
        .clone()
        .or_else(|| cfg.train.checkpoint_path.clone())
        .unwrap_or_else(|| cfg.output.path(&cfg.output.checkpoint))
}

fn cmd_train(cfg: &RunConfig) -> diffusion_ad::Result<()> {
    let (train_set, _) = load_dataset(cfg)?;
    let schedule = cfg.diffusion.schedule()?;
    let f = build_perception(&cfg.perception, cfg.perception.seed, cfg.model.input_channels)?;
    let model = Denoiser::new(cfg.model.clone(), cfg.train.seed)?;
    let ckpt = checkpoint_path(cfg, &CheckpointArg { checkpoint: None });
    let log_path = cfg.output.path(&cfg.output.loss_log);
    let mut train_cfg = cfg.train.clone();
    train_cfg.checkpoint_path = Some(ckpt.clone());
    log::info!(
        "training on {} samples of shape {:?}, {} parameters",
        train_set.len(),
        train_set.first().map(|s| s.tensor.shape().to_vec()).unwrap_or_default(),
        model.weights().num_parameters()
    );
    let mut records: Vec<StepRecord> = Vec::new();
    let result = train(model, &train_set, &schedule, &f, &train_cfg, |r| {
        if r.step % 50 == 0 {
            log::info!("step {}: L_MSE {:.5} L_feat {:.5} L {:.5}", r.step, r.losses.l_mse, r.losses.l_feat, r.losses.l);
        }
        records.push(r.clone());
    });
    // the log is kept even when training fails part-way
    write_atomic(&log_path, &loss_log_csv(&records)?)?;
    let checkpoint = result?;
    save_checkpoint(&checkpoint, &ckpt)?;
    println!("checkpoint: {}", ckpt.display());
    println!("loss log: {}", log_path.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, a: &EvalArgs) -> diffusion_ad::Result<()> {
    let (_, test) = load_dataset(cfg)?;
    let positives = test.iter().filter(|s| s.label == 1).count();
    if positives == 0 || positives == test.len() {
        return Err(Error::SingleClass(format!(
            "test split has {positives} anomalous of {} samples",
            test.len()
        )));
    }
    let detector = Detector::from_checkpoint(load_checkpoint(checkpoint_path(cfg, &a.ckpt))?, cfg)?;
    let eval = detector.evaluate(&test, cfg.eval.batch_size, cfg.eval.threads, false)?;
    let auc = eval.auc()?;
    let out = a.out.clone().unwrap_or_else(|| cfg.output.path(&cfg.output.scores));
    write_atomic(&out, &scores_csv(&eval, Some(auc))?)?;
    println!("scores: {}", out.display());
    println!("AUC {auc}");
    Ok(())
}

fn is_ext(p: &Path, ext: &str) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

fn cmd_score(cfg: &RunConfig, a: &ScoreArgs) -> diffusion_ad::Result<()> {
    let timeseries = cfg.data.kind.is_timeseries();
    let (expected, ok) = if timeseries { ("csv", is_ext(&a.input, "csv")) } else { ("png", is_ext(&a.input, "png")) };
    if !ok {
        return Err(Error::Data(format!(
            "modality mismatch: data.kind {:?} expects a .{expected} input, got {}",
            cfg.data.kind,
            a.input.display()
        )));
    }
    let detector = Detector::from_checkpoint(load_checkpoint(checkpoint_path(cfg, &a.ckpt))?, cfg)?;
    let (sample, original_hw) = if timeseries {
        let (values, _) = load_timeseries_csv(&a.input, &cfg.data.value_column, None)?;
        if values.len() < cfg.data.window {
            return Err(Error::Data(format!("{} points, need a window of {}", values.len(), cfg.data.window)));
        }
        if values.len() > cfg.data.window {
            log::warn!("scoring the first {} of {} points", cfg.data.window, values.len());
        }
        let w = Tensor::new([cfg.data.window], z_normalize_window(&values[..cfg.data.window]))?;
        (Sample::window("input", w, 0), None)
    } else {
        let img = load_png(&a.input)?;
        let hw = (img.shape()[1], img.shape()[2]);
        (Sample::image("input", img, 0), Some(hw))
    };
    let x = prepare_input(&sample, &cfg.data, detector.model.config().input_channels)?;
    let report = detector.score_one(&a.input.display().to_string(), &x, a.map.is_some())?;
    println!("e_recon {}", report.e_recon);
    println!("e_feat {}", report.e_feat);
    println!("score {}", report.score);
    if let (Some(path), Some(map)) = (&a.map, &report.pixel_map) {
        let (h, w) = (map.shape()[0], map.shape()[1]);
        let mut m = map.reshape([1, h, w])?;
        if let Some((oh, ow)) = original_hw {
            if (oh, ow) != (h, w) {
                m = resize_image_to(&m, oh, ow)?;
            }
        }
        save_png(&to_grayscale(&m), path)?;
        println!("map: {}", path.display());
    }
    Ok(())
}

/// Maps `[0, max]` onto the PNG range so the brightest pixel is white.
fn to_grayscale(m: &Tensor) -> Tensor {
    let max = m.data().iter().fold(0.0f32, |a, &v| a.max(v));
    let scale = if max > 0.0 { 2.0 / max } else { 0.0 };
    m.map(|v| (v.max(0.0) * scale - 1.0).clamp(-1.0, 1.0))
}

fn cmd_sample(cfg: &RunConfig, a: &SampleArgs) -> diffusion_ad::Result<()> {
    if a.count == 0 {
        return Err(Error::Config("--count must be at least 1".into()));
    }
    let ck = load_checkpoint(checkpoint_path(cfg, &a.ckpt))?;
    let schedule = ck.schedule.build()?;
    let model = Denoiser::from_weights(ck.model, ck.weights)?;
    let [_, h, w] = input_shape(cfg);
    let c = model.config().input_channels;
    let x = unconditional_sample(&model, &schedule, &[a.count, c, h, w], a.seed.unwrap_or(cfg.eval.seed))?;
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("sampling produced non-finite values".into()));
    }
    let tiles: Vec<Tensor> = (0..a.count).map(|i| x.select_outer(i)).collect::<diffusion_ad::Result<_>>()?;
    let out = a.out.clone().unwrap_or_else(|| cfg.output.path(&cfg.output.samples));
    save_png_grid(&tiles, &out)?;
    println!("samples: {}", out.display());
    Ok(())
}
