use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use clic_core::codec::{self, EncodeOptions, Weights};
use clic_core::selftest::{self, Fault};
use clic_core::stats::{model_stats, REFERENCE_SIZE};
use clic_core::train::{TrainConfig, Trainer};
use clic_core::transform::ArchConfig;
use clic_core::ClicError;

#[derive(Parser)]
#[command(name = "clic", version, about = "Learned image codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress a PPM or PNG image.
    Encode {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(short, long)]
        weights: PathBuf,
        /// Quality preset 1 (smallest) to 6 (best).
        #[arg(short, long, default_value_t = codec::DEFAULT_QUALITY, value_parser = clap::value_parser!(u8).range(1..=6))]
        quality: u8,
        /// Do not signal filter coefficients.
        #[arg(long)]
        no_pqf: bool,
        /// Store unquantized f32 filter coefficients.
        #[arg(long)]
        raw_coeffs: bool,
    },
    /// Reconstruct an image; PNG when the output ends in `.png`, PPM otherwise.
    Decode {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(short, long)]
        weights: PathBuf,
    },
    /// Train the small network on a directory of PPM/PNG images.
    TrainToy {
        dir: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0.0018)]
        lambda: f64,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parameter and multiply-accumulate counts of a weights file.
    Stats {
        #[arg(short, long)]
        weights: PathBuf,
    },
    /// Run the built-in invariant checks.
    Selftest {
        /// Inject a fault: freq-table or ls-solver.
        #[arg(long)]
        fault: Option<String>,
    },
}

fn encode(
    input: &Path,
    output: &Path,
    weights: &Path,
    opts: EncodeOptions,
) -> Result<(), ClicError> {
    let img = codec::read_image(input)?;
    let w = Weights::load(weights)?;
    let enc = codec::encode(&w, &img, &opts)?;
    std::fs::write(output, &enc.bytes)?;
    let r = &enc.report;
    println!("{}×{} -> {} bytes", img.width, img.height, r.bytes);
    println!("bpp            {:.4}", r.bpp);
    println!("estimated bpp  {:.4}", r.estimated_bpp);
    println!(
        "coefficients   {} ({} bits, {} clamped)",
        r.coeff_count, r.coeff_bits, r.coeff_clamped
    );
    println!("saturated      {}", r.saturated);
    println!(
        "latent mse     {:.6} -> {:.6}",
        r.latent_mse, r.filtered_latent_mse
    );
    println!("psnr           {:.2} dB", r.psnr);
    println!("time           {:.3} s", r.seconds);
    Ok(())
}

fn decode(input: &Path, output: &Path, weights: &Path) -> Result<(), ClicError> {
    let bytes = std::fs::read(input)?;
    let w = Weights::load(weights)?;
    let dec = codec::decode(&w, &bytes)?;
    codec::write_image(output, &dec.image)?;
    println!(
        "{}×{} written to {}",
        dec.image.width,
        dec.image.height,
        output.display()
    );
    Ok(())
}

fn read_dir_images(dir: &Path) -> Result<Vec<codec::RgbImage>, ClicError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "ppm" | "png"))
        })
        .collect();
    paths.sort();
    paths.iter().map(|p| codec::read_image(p)).collect()
}

fn train_toy(dir: &Path, output: &Path, cfg: TrainConfig) -> Result<(), ClicError> {
    let images = read_dir_images(dir)?;
    if images.len() < 8 {
        return Err(ClicError::InvalidArgument(format!(
            "need at least 8 images in {}, found {}",
            dir.display(),
            images.len()
        )));
    }
    let mut trainer = Trainer::new(ArchConfig::toy(), &images, cfg)?;
    let result = trainer.run(|r| {
        if r.step % 10 == 0 {
            println!(
                "step {:4}  loss {:.4}  smoothed {:.4}  bpp {:.4}  mse {:.6}",
                r.step, r.loss.total, r.smoothed, r.loss.rate, r.loss.distortion
            );
        }
    });
    // on divergence the trainer holds the last good parameters
    trainer.weights().save(output)?;
    let mut curve = output.as_os_str().to_owned();
    curve.push(".loss.csv");
    std::fs::write(PathBuf::from(curve), trainer.curve_csv())?;
    result?;
    if let (Some(first), Some(last)) = (trainer.history.first(), trainer.history.last()) {
        println!(
            "smoothed loss {:.4} -> {:.4}",
            first.smoothed, last.smoothed
        );
    }
    Ok(())
}

fn stats(weights: &Path) -> Result<(), ClicError> {
    let w = Weights::load(weights)?;
    let (h, wd) = REFERENCE_SIZE;
    let s = model_stats(&w.model.config, &w.model.store, h, wd);
    println!("reference input {}×{}", s.height, s.width);
    println!("{:<16} {:>12} {:>14}", "component", "params", "MACs/pixel");
    for c in &s.components {
        println!(
            "{:<16} {:>12} {:>14.1}",
            c.name,
            c.params,
            c.macs as f64 / (s.height * s.width) as f64
        );
    }
    println!(
        "{:<16} {:>12} {:>14.1}",
        "total",
        s.params(),
        s.macs_per_pixel()
    );
    Ok(())
}

fn run_selftest(fault: Option<String>) -> Result<bool, ClicError> {
    let fault = fault.map(|f| f.parse::<Fault>()).transpose()?;
    let results = selftest::run(fault);
    for r in &results {
        println!(
            "[{}] {:<24} {:>7.2}s  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.seconds,
            r.detail
        );
    }
    Ok(results.iter().all(|r| r.passed))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Encode {
            input,
            output,
            weights,
            quality,
            no_pqf,
            raw_coeffs,
        } => encode(
            &input,
            &output,
            &weights,
            EncodeOptions {
                quality,
                pqf: !no_pqf,
                raw_coeffs,
            },
        ),
        Command::Decode {
            input,
            output,
            weights,
        } => decode(&input, &output, &weights),
        Command::TrainToy {
            dir,
            output,
            lambda,
            steps,
            seed,
        } => train_toy(
            &dir,
            &output,
            TrainConfig {
                lambda,
                steps,
                seed,
                ..TrainConfig::default()
            },
        ),
        Command::Stats { weights } => stats(&weights),
        Command::Selftest { fault } => match run_selftest(fault) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(4),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
