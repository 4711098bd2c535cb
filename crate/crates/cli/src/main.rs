//! Single-binary command line for the future-frame synthesis model: dataset
//! generation, training, sampling, evaluation, motion analogies, and
//! feature-map dumps.
//!
//! Conventions shared by every subcommand:
//! - all outputs land under the command's `--out` directory, never anywhere
//!   else, and each writing command records exactly one `manifest.json`;
//! - all randomness derives from the global `--seed` through fixed
//!   domain-separation constants, so any stage can be reproduced alone;
//! - `--threads 1` makes `gen-data` and `train` byte-reproducible;
//! - exit codes: 0 ok, 1 usage, 2 I/O or validation failure, 3 numerical
//!   failure.

mod manifest;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use framesynth_core::config::{
    apply_net_overrides, apply_train_overrides, net_config_to_kv, parse_kv, train_config_to_kv,
};
use framesynth_core::error::Error;
use framesynth_core::eval::{
    analogy_predict, dump_features, eval_analogy, eval_kl, generate_analogy_set, latent_stats,
    report_csv, EvalReport, FramePredictor, RunStats, CIRCLE_TRIANGLE_NOTE,
};
use framesynth_core::network::NetConfig;
use framesynth_core::rng::{domains, Rng};
use framesynth_core::shapes::{
    generate_dataset, load_dataset, load_frame, save_frame, Dataset, ImageFormat,
};
use framesynth_core::tensor::Tensor;
use framesynth_core::train::{
    load_model, sample_prior, train, Ablation, PriorMode, TrainConfig,
};
use manifest::RunManifest;

type Result<T> = std::result::Result<T, Error>;

#[derive(Parser)]
#[command(
    name = "framesynth",
    version,
    about = "Probabilistic future-frame synthesis on a 2D shapes world"
)]
struct Cli {
    /// Master random seed; every random draw derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 1 guarantees bit-exact reproducibility.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of consecutive frame pairs
    GenData(GenDataArgs),
    /// Train a model, writing checkpoints and a step log
    Train(TrainArgs),
    /// Sample possible next frames for one input image
    Sample(SampleArgs),
    /// Evaluate a checkpoint (and baselines) against the motion law
    Eval(EvalArgs),
    /// Transfer the motion of pair (A, B) onto image C
    Analogy(AnalogyArgs),
    /// Dump the image encoder's feature maps as grayscale images
    DumpFeatures(DumpFeaturesArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// Number of frame pairs
    #[arg(long, default_value_t = 5000)]
    pairs: usize,
    /// Square frame resolution in pixels
    #[arg(long, default_value_t = 32)]
    resolution: usize,
    /// Frame encoding: png or ppm
    #[arg(long, default_value = "png")]
    format: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (from gen-data)
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the step log
    #[arg(long)]
    out: PathBuf,
    /// Flat key=value config file (network and training keys)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single key=value override; may be repeated, beats --config
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Training objective: full (conditional VAE) or ae (no KL, no noise)
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Continue from an earlier checkpoint (with optimizer state)
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    /// Trained checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Input frame (current time step)
    #[arg(long)]
    image: PathBuf,
    /// Number of futures to sample
    #[arg(long, default_value_t = 5)]
    n: usize,
    /// Latent prior: empirical (training posteriors) or standard (N(0, I))
    #[arg(long, default_value = "empirical")]
    prior: PriorMode,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint to evaluate
    #[arg(long)]
    ckpt: PathBuf,
    /// Test dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated baselines to include: flow, ae
    #[arg(long, value_delimiter = ',')]
    baselines: Vec<String>,
    /// Training dataset directory (required by the flow baseline)
    #[arg(long)]
    train_data: Option<PathBuf>,
    /// Checkpoint of the ae-ablation model (required by the ae baseline)
    #[arg(long)]
    ae_ckpt: Option<PathBuf>,
    /// Futures sampled per test image
    #[arg(long, default_value_t = 8)]
    samples: usize,
    /// Motion-analogy quadruples to score (0 skips the analogy block)
    #[arg(long, default_value_t = 500)]
    analogy_count: usize,
    /// Output directory for report.json / report.csv
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalogyArgs {
    /// Trained checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Reference pair: frame before the motion
    #[arg(long)]
    a: PathBuf,
    /// Reference pair: frame after the motion
    #[arg(long)]
    b: PathBuf,
    /// New frame the motion is applied to
    #[arg(long)]
    c: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DumpFeaturesArgs {
    /// Trained checkpoint
    #[arg(long)]
    ckpt: PathBuf,
    /// Input frame
    #[arg(long)]
    image: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) | Error::NonFinite { .. } | Error::DegenerateBatch { .. } => {
            EXIT_NUMERICAL
        }
        _ => EXIT_IO,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version print to stdout and are not errors.
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(EXIT_USAGE);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(args) => cmd_gen_data(cli, args),
        Command::Train(args) => cmd_train(cli, args),
        Command::Sample(args) => cmd_sample(cli, args),
        Command::Eval(args) => cmd_eval(cli, args),
        Command::Analogy(args) => cmd_analogy(cli, args),
        Command::DumpFeatures(args) => cmd_dump_features(cli, args),
    }
}

fn ensure_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

// ---------------------------------------------------------------------------
// gen-data

fn cmd_gen_data(cli: &Cli, args: &GenDataArgs) -> Result<()> {
    let started = Instant::now();
    let format: ImageFormat = args.format.parse()?;
    ensure_out(&args.out)?;
    generate_dataset(cli.seed, args.pairs, args.resolution, &args.out, cli.threads, format)?;
    let mut m = RunManifest::new("gen-data", cli.seed, cli.threads);
    m.input_dataset("dataset", &args.out)?; // output hash: identity of what was produced
    m.write(&args.out, started)?;
    println!(
        "wrote {} pairs at {}x{} to {}",
        args.pairs,
        args.resolution,
        args.resolution,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

/// Resolves (defaults, --config file, --set overrides, --ablation flag) into
/// the network and training configs, rejecting unknown keys.
fn resolve_configs(args: &TrainArgs, cli: &Cli) -> Result<(NetConfig, TrainConfig)> {
    let mut map = BTreeMap::new();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        map = parse_kv(&text)?;
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    let mut net = NetConfig::default();
    let mut tc = TrainConfig::default();
    apply_net_overrides(&mut net, &mut map)?;
    apply_train_overrides(&mut tc, &mut map)?;
    if let Some(key) = map.keys().next() {
        return Err(Error::Config(format!("unknown config key {key:?}")));
    }
    if let Some(ablation) = args.ablation {
        tc.ablation = ablation;
    }
    tc.seed = cli.seed;
    tc.threads = cli.threads;
    Ok((net, tc))
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let started = Instant::now();
    let (net, tc) = resolve_configs(args, cli)?;
    let dataset = load_dataset(&args.data)?;
    ensure_out(&args.out)?;

    let mut m = RunManifest::new("train", cli.seed, cli.threads);
    m.config(&format!("{}{}", net_config_to_kv(&net), train_config_to_kv(&tc)));
    m.input_dataset("data", &args.data)?;
    if let Some(resume) = &args.resume {
        m.input_file("resume", resume)?;
    }

    let result = train(&dataset, net, &tc, &args.out, args.resume.as_deref())?;
    m.write(&args.out, started)?;
    println!(
        "trained {} steps, final loss {:.4}, checkpoint {}",
        result.steps_run,
        result.final_loss,
        result.checkpoint_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sample

/// Mean over RGB; the shapes world is near-binary per channel, so this is a
/// good "ink" measure against the white background.
fn luminance(frame: &Tensor<f32>, pixel: usize, hw: usize) -> f32 {
    let d = frame.data();
    (d[pixel] + d[hw + pixel] + d[2 * hw + pixel]) / 3.0
}

/// Two consecutive frames as one image: the current frame drawn in green,
/// the synthesized one in magenta, overlaps dark, background white.
fn overlay(current: &Tensor<f32>, synthesized: &Tensor<f32>) -> Result<Tensor<f32>> {
    let r = current.dim(1);
    let hw = r * r;
    let mut out = Tensor::zeros(&[3, r, r]);
    let d = out.data_mut();
    // On the white background a frame's ink shows up in the channels that
    // do NOT carry its luminance, so the current frame feeds red+blue
    // (appearing green) and the synthesized frame feeds green.
    for p in 0..hw {
        let cur = luminance(current, p, hw);
        let syn = luminance(synthesized, p, hw);
        d[p] = cur;
        d[hw + p] = syn;
        d[2 * hw + p] = cur;
    }
    Ok(out)
}

/// [0,1] image of a difference frame via 0.5 + v/2 (gray = no change).
fn diff_image(v: &Tensor<f32>) -> Tensor<f32> {
    let mut out = v.clone();
    out.requires_grad = false;
    for x in out.data_mut() {
        *x = (0.5 + *x / 2.0).clamp(0.0, 1.0);
    }
    out
}

/// One [3,R,R] view of row `k` of an [N,3,R,R] batch.
fn batch_row(batch: &Tensor<f32>, k: usize) -> Result<Tensor<f32>> {
    let (r, hw) = (batch.dim(2), batch.dim(2) * batch.dim(3));
    let row = &batch.data()[k * 3 * hw..(k + 1) * 3 * hw];
    Tensor::new(vec![3, r, r], row.to_vec())
}

fn cmd_sample(cli: &Cli, args: &SampleArgs) -> Result<()> {
    let started = Instant::now();
    let (model, prior) = load_model(&args.ckpt)?;
    let image = load_frame(&args.image)?;
    let res = model.config.input_resolution;
    if image.dim(1) != res {
        return Err(Error::Config(format!(
            "image resolution {} does not match the checkpoint's input_resolution {}",
            image.dim(1),
            res
        )));
    }
    if args.n == 0 {
        return Err(Error::InvalidArgument {
            op: "sample",
            detail: "--n must be at least 1".into(),
        });
    }
    ensure_out(&args.out)?;

    // One forward pass for all n futures: the image replicated n times, one
    // prior draw per row.
    let d = model.latent_dim();
    let mut rng = Rng::new(cli.seed ^ domains::SAMPLE);
    let mut z = Vec::with_capacity(args.n * d);
    for _ in 0..args.n {
        z.extend(sample_prior(prior.as_ref(), d, &mut rng, args.prior)?);
    }
    let z = Tensor::new(vec![args.n, d], z)?;
    let batch = Tensor::new(vec![args.n, 3, res, res], image.data().repeat(args.n))?;
    let v_hat = model.forward_diff(&batch, &z)?;

    for k in 0..args.n {
        let v = batch_row(&v_hat, k)?;
        let mut j_hat = image.clone();
        j_hat.requires_grad = false;
        for (o, &dv) in j_hat.data_mut().iter_mut().zip(v.data()) {
            *o = (*o + dv).clamp(0.0, 1.0);
        }
        save_frame(&j_hat, &args.out.join(format!("J_hat_{k}.png")))?;
        save_frame(&diff_image(&v), &args.out.join(format!("v_hat_{k}.png")))?;
        save_frame(&overlay(&image, &j_hat)?, &args.out.join(format!("overlay_{k}.png")))?;
    }

    let mut m = RunManifest::new("sample", cli.seed, cli.threads);
    m.input_file("ckpt", &args.ckpt)?;
    m.input_file("image", &args.image)?;
    m.write(&args.out, started)?;
    println!("wrote {} samples to {}", args.n, args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

fn load_test_set(path: &Path, res: usize) -> Result<Dataset> {
    let data = load_dataset(path)?;
    if data.resolution != res {
        return Err(Error::Config(format!(
            "dataset resolution {} does not match the checkpoint's input_resolution {}",
            data.resolution, res
        )));
    }
    Ok(data)
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let started = Instant::now();
    let (model, prior) = load_model(&args.ckpt)?;
    let res = model.config.input_resolution;
    let test = load_test_set(&args.data, res)?;
    ensure_out(&args.out)?;

    let mut m = RunManifest::new("eval", cli.seed, cli.threads);
    m.input_file("ckpt", &args.ckpt)?;
    m.input_dataset("data", &args.data)?;

    let mut kl = BTreeMap::new();
    let ours = FramePredictor::Model {
        model: &model,
        prior: prior.as_ref(),
        prior_mode: PriorMode::Empirical,
    };
    kl.insert(
        "ours".to_string(),
        eval_kl(&test, &ours, args.samples, cli.seed, cli.threads)?,
    );

    // Baselines are optional and each needs its own input.
    let mut train_set = None;
    let mut ae = None;
    for name in &args.baselines {
        match name.as_str() {
            "flow" => {
                let dir = args.train_data.as_ref().ok_or_else(|| {
                    Error::Config("the flow baseline needs --train-data".into())
                })?;
                m.input_dataset("train_data", dir)?;
                train_set = Some(load_test_set(dir, res)?);
            }
            "ae" => {
                let path = args.ae_ckpt.as_ref().ok_or_else(|| {
                    Error::Config("the ae baseline needs --ae-ckpt".into())
                })?;
                m.input_file("ae_ckpt", path)?;
                ae = Some(load_model(path)?);
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown baseline {other:?}, expected flow or ae"
                )));
            }
        }
    }
    if let Some(train_set) = &train_set {
        let flow = FramePredictor::FlowTransfer { train: train_set };
        kl.insert(
            "flow".to_string(),
            eval_kl(&test, &flow, args.samples, cli.seed, cli.threads)?,
        );
    }
    if let Some((ae_model, ae_prior)) = &ae {
        // The ae prior collapses to the stored posterior means, making the
        // predictor deterministic per training pair, as the ablation intends.
        let pred = FramePredictor::Model {
            model: ae_model,
            prior: ae_prior.as_ref(),
            prior_mode: PriorMode::Empirical,
        };
        kl.insert(
            "ae".to_string(),
            eval_kl(&test, &pred, args.samples, cli.seed, cli.threads)?,
        );
    }

    let analogy = if args.analogy_count > 0 {
        // Domain-shifted seed so analogy scenes do not share RNG streams
        // with the per-image sampling above.
        let set = generate_analogy_set(
            cli.seed ^ domains::SCENE,
            args.analogy_count,
            res,
            cli.threads,
        )?;
        Some(eval_analogy(&model, &set, cli.threads)?)
    } else {
        None
    };

    let latent = Some(latent_stats(&model, &test, cli.threads)?);

    let report = EvalReport {
        kl,
        circle_triangle_interpretation: CIRCLE_TRIANGLE_NOTE.to_string(),
        analogy,
        latent,
        runtime: RunStats {
            wallclock_ms: started.elapsed().as_millis() as u64,
            test_pairs: test.len(),
            samples_per_image: args.samples,
            seed: cli.seed,
        },
    };

    let json_path = args.out.join("report.json");
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::format(&json_path, format!("report serialization failed: {e}")))?;
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    let csv_path = args.out.join("report.csv");
    fs::write(&csv_path, report_csv(&report)).map_err(|e| Error::io(&csv_path, e))?;
    m.write(&args.out, started)?;

    print!("{}", report_csv(&report));
    if let Some(a) = &report.analogy {
        println!(
            "analogy: model MSE {:.2}, copy baseline {:.2} over {} quadruples",
            a.model_mse, a.copy_mse, a.count
        );
    }
    if let Some(l) = &report.latent {
        println!(
            "latent: {} of {} dims active, {} PCA components for 95% variance",
            l.nonzero_dims, l.latent_dim, l.pca_components_95
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// analogy

fn cmd_analogy(cli: &Cli, args: &AnalogyArgs) -> Result<()> {
    let started = Instant::now();
    let (model, _) = load_model(&args.ckpt)?;
    let res = model.config.input_resolution;
    let mut frames = Vec::new();
    for (name, path) in [("a", &args.a), ("b", &args.b), ("c", &args.c)] {
        let f = load_frame(path)?;
        if f.dim(1) != res {
            return Err(Error::Config(format!(
                "image {name} resolution {} does not match the checkpoint's input_resolution {}",
                f.dim(1),
                res
            )));
        }
        frames.push(f.reshaped(vec![1, 3, res, res])?);
    }
    ensure_out(&args.out)?;
    let d_hat = analogy_predict(&model, &frames[0], &frames[1], &frames[2])?;
    save_frame(&batch_row(&d_hat, 0)?, &args.out.join("D_hat.png"))?;

    let mut m = RunManifest::new("analogy", cli.seed, cli.threads);
    m.input_file("ckpt", &args.ckpt)?;
    m.input_file("a", &args.a)?;
    m.input_file("b", &args.b)?;
    m.input_file("c", &args.c)?;
    m.write(&args.out, started)?;
    println!("wrote {}", args.out.join("D_hat.png").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// dump-features

fn cmd_dump_features(cli: &Cli, args: &DumpFeaturesArgs) -> Result<()> {
    let started = Instant::now();
    let (model, _) = load_model(&args.ckpt)?;
    let image = load_frame(&args.image)?;
    let res = model.config.input_resolution;
    if image.dim(1) != res {
        return Err(Error::Config(format!(
            "image resolution {} does not match the checkpoint's input_resolution {}",
            image.dim(1),
            res
        )));
    }
    ensure_out(&args.out)?;
    let paths = dump_features(&model, &image, &args.out)?;

    let mut m = RunManifest::new("dump-features", cli.seed, cli.threads);
    m.input_file("ckpt", &args.ckpt)?;
    m.input_file("image", &args.image)?;
    m.write(&args.out, started)?;
    println!("wrote {} feature images to {}", paths.len(), args.out.display());
    Ok(())
}
