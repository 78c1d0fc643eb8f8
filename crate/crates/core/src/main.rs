use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gqtok::checkpoint::Checkpoint;
use gqtok::codec;
use gqtok::config::TrainConfig;
use gqtok::data::Dataset;
use gqtok::entropy::oracle::oracle_full_entropy;
use gqtok::entropy::{
    codebook_entropy, entropy_buffer_footprint, soft_assignment, token_entropy, ungrouped_buffer_footprint,
};
use gqtok::error::{Error, Result};
use gqtok::metrics::MetricReport;
use gqtok::pnm::Image;
use gqtok::quantizer::{group_reshape, Latent, QuantConfig};
use gqtok::tensor::Tensor;
use gqtok::trainer::{dataset_usage, evaluate, train, write_loss_csv, Tokenizer};

#[derive(Parser)]
#[command(name = "gqtok", version, about = "Group-wise lookup-free quantization tokenizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train stage 1 or 2 and write a checkpoint plus a loss CSV.
    Train(TrainArgs),
    /// Tokenize a PPM/PGM image into a .wtok bitstream.
    Encode(EncodeArgs),
    /// Render a .wtok bitstream back to an image.
    Decode(DecodeArgs),
    /// Compare two images; optionally report the compression ratio of a .wtok file.
    Stats(StatsArgs),
    /// Grouped vs exhaustive entropies on random latents.
    Oracle(OracleArgs),
    /// Entropy buffer footprints, grouped vs a single 2^(g*d') codebook.
    BenchMemory(BenchArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` config file; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory of PPM/PGM training images; synthetic data otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Use the averaged weights when the checkpoint has them.
    #[arg(long)]
    ema: bool,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Seed of the decoder noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    ema: bool,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    orig: PathBuf,
    #[arg(long)]
    recon: PathBuf,
    #[arg(long)]
    tokens: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    g: usize,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Side of the square latent grid.
    #[arg(long, default_value_t = 4)]
    hw: usize,
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [8usize, 12, 16, 24])]
    d_prime: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4, 8])]
    g: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    h: usize,
    #[arg(long, default_value_t = 16)]
    w: usize,
    /// Images per batch; every position of the batch is scored.
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Bytes per stored probability.
    #[arg(long, default_value_t = 4)]
    elem_size: usize,
    #[arg(long, default_value_t = 16)]
    budget_gib: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Ok(v) = std::env::var("GQTOK_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not size thread pool: {e}");
                }
            }
            _ => log::warn!("ignoring GQTOK_THREADS={v:?}"),
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Oracle(a) => cmd_oracle(a),
        Command::BenchMemory(a) => cmd_bench_memory(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
            eprintln!("error kind={} msg=\"{msg}\"", e.kind());
            ExitCode::FAILURE
        }
    }
}

fn load_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::parse(&std::fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {o:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_image_dir(dir: &Path) -> Result<Dataset> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm")))
        .collect();
    paths.sort();
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    for p in &paths {
        let t = Image::read(p)?.to_tensor();
        match &shape {
            Some(s) if s.as_slice() != t.shape() => {
                return Err(Error::Image(format!("{} has shape {:?}, expected {s:?}", p.display(), t.shape())));
            }
            _ => shape = Some(t.shape().to_vec()),
        }
        data.extend(t.into_data());
    }
    let s = shape.ok_or_else(|| Error::Image(format!("no .ppm/.pgm files in {}", dir.display())))?;
    Dataset::new(Tensor::new(vec![paths.len(), s[1], s[2], s[3]], data)?)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a)?;
    for line in cfg.to_lines() {
        log::info!("config {line}");
    }
    let data = match &a.data {
        Some(dir) => load_image_dir(dir)?,
        None => Dataset::synthetic(cfg.dataset_size, cfg.image_size, cfg.model.arch.image_channels, cfg.seed)?,
    };
    let out = train(&cfg, &data)?;
    out.checkpoint(cfg.stage).save(&cfg.out)?;
    write_loss_csv(&cfg.loss_csv, &out.reports)?;
    let m = evaluate(&out.tokenizer, &data, cfg.seed)?;
    let usage = dataset_usage(&out.tokenizer, &data)?;
    let usage_mean = usage.iter().sum::<f64>() / usage.len() as f64;
    log::info!(
        "wrote {} and {}; train-set {m} usage={usage_mean:.4}",
        cfg.out.display(),
        cfg.loss_csv.display()
    );
    Ok(())
}

fn load_tokenizer(path: &Path, ema: bool) -> Result<Tokenizer> {
    Ok(Tokenizer::from_checkpoint(&Checkpoint::load(path)?, ema)?.0)
}

fn cmd_encode(a: EncodeArgs) -> Result<()> {
    let tok = load_tokenizer(&a.ckpt, a.ema)?;
    let img = Image::read(&a.input)?;
    let grids = tok.tokenize(&img.to_tensor())?;
    let bytes = codec::pack(&grids[0], img.height, img.width)?;
    std::fs::write(&a.output, &bytes)?;
    log::info!("{} -> {} ({} bytes)", a.input.display(), a.output.display(), bytes.len());
    Ok(())
}

fn cmd_decode(a: DecodeArgs) -> Result<()> {
    let tok = load_tokenizer(&a.ckpt, a.ema)?;
    let (header, grid) = codec::unpack(&std::fs::read(&a.input)?)?;
    let grids = [grid];
    let z = tok.noise_for(&grids, a.seed);
    let out = tok.decode_tokens(&grids, z.as_ref())?;
    let img = Image::from_tensor(&out, 0)?;
    if (img.height, img.width) != (header.image_height as usize, header.image_width as usize) {
        log::warn!(
            "decoded {}x{} but the stream records {}x{}",
            img.width,
            img.height,
            header.image_width,
            header.image_height
        );
    }
    img.write(&a.output)?;
    log::info!("{} -> {}", a.input.display(), a.output.display());
    Ok(())
}

fn cmd_stats(a: StatsArgs) -> Result<()> {
    let m = MetricReport::compare(&Image::read(&a.orig)?, &Image::read(&a.recon)?)?;
    let ratio = match &a.tokens {
        Some(p) => format!("{}", codec::read_header(&std::fs::read(p)?)?.compression_ratio()),
        None => "na".to_string(),
    };
    let psnr = if m.psnr.is_infinite() {
        "inf".to_string()
    } else {
        format!("{:.6}", m.psnr)
    };
    println!("psnr,ssim,mse,compression_ratio");
    println!("{psnr},{:.6},{:.6},{ratio}", m.ssim, m.mse);
    Ok(())
}

fn cmd_oracle(a: OracleArgs) -> Result<()> {
    if a.g == 0 || a.d % a.g != 0 {
        return Err(Error::InvalidArgument(format!("g={} must divide d={}", a.g, a.d)));
    }
    let cfg = QuantConfig::new(a.g, a.d / a.g)?;
    println!("seed,d,g,d_prime,tau,token_grouped,token_exact,codebook_grouped,codebook_exact,codebook_gap");
    for seed in 0..a.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::randn(&[a.hw * a.hw * a.d], &mut rng).map(|v| v * a.scale);
        let latent = Latent::new(a.hw, a.hw, a.d, t.into_data())?;
        let exact = oracle_full_entropy(&latent, a.tau)?;
        let dist = soft_assignment(&group_reshape(&latent, &cfg)?, a.tau)?;
        let (tg, cg) = (token_entropy(&dist), codebook_entropy(&dist));
        println!(
            "{seed},{},{},{},{},{tg:.12},{:.12},{cg:.12},{:.12},{:.3e}",
            a.d,
            a.g,
            cfg.group_channels(),
            a.tau,
            exact.token,
            exact.codebook,
            cg - exact.codebook
        );
    }
    Ok(())
}

fn cmd_bench_memory(a: BenchArgs) -> Result<()> {
    let budget = u128::from(a.budget_gib) << 30;
    let status = |bytes: u128| if bytes > budget { "exceeds-budget" } else { "ok" };
    // footprints past u128 saturate
    let show = |bytes: u128| if bytes == u128::MAX { "inf".to_string() } else { bytes.to_string() };
    println!("d_prime,g,h,w,batch,grouped_bytes,grouped_status,ungrouped_bytes,ungrouped_status");
    for &dp in &a.d_prime {
        for &g in &a.g {
            let cfg = QuantConfig::new(g, dp)?;
            let batch = a.batch as u128;
            let grouped = entropy_buffer_footprint(&cfg, a.h, a.w, a.elem_size).saturating_mul(batch);
            let full = ungrouped_buffer_footprint(&cfg, a.h, a.w, a.elem_size).saturating_mul(batch);
            println!(
                "{dp},{g},{},{},{},{},{},{},{}",
                a.h,
                a.w,
                a.batch,
                show(grouped),
                status(grouped),
                show(full),
                status(full)
            );
        }
    }
    Ok(())
}
