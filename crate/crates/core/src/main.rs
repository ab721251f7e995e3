use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dggxnet::config::RunConfig;
use dggxnet::data::{extract_axial_slices, pnm::quantize, PnmImage, Split, Volume};
use dggxnet::model::Branch;
use dggxnet::pipeline::{eval_run, explain_run, export_synthetic, train_run, ExplainMethod, TrainOutputs};
use dggxnet::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dggxnet",
    version,
    about = "Fused dual-backbone image classifier with Grad-CAM and Integrated Gradients"
)]
struct Cli {
    /// Worker threads for data-parallel kernels (1 = reproducible mode).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic three-class image set (PGM files plus manifest).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Balance, split and train; writes checkpoint, log CSV and run summary.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out>.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a split and write the report, JSON record and ROC curves.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Output directory.
        #[arg(long)]
        report: PathBuf,
    },
    /// Explain one image with Grad-CAM and/or Integrated Gradients.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// `auto` (predicted class) or a class index.
        #[arg(long, default_value = "auto")]
        class: String,
        #[arg(long, value_enum, default_value_t = MethodArg::Both)]
        method: MethodArg,
        /// Branch whose final maps feed Grad-CAM (b is the dense-like one).
        #[arg(long, value_enum, default_value_t = BranchArg::B)]
        branch: BranchArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut evenly spaced axial slices from a VOL1 volume into PGM files.
    Slice {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default configuration file.
    Config,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Gradcam,
    Ig,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum BranchArg {
    A,
    B,
    Both,
}

fn parse_class(s: &str) -> Result<Option<usize>> {
    if s == "auto" {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Config(format!("--class must be `auto` or a class index, got `{s}`")))
}

fn run(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    match cli.command {
        Command::GenData { out, per_class, size, noise, seed } => {
            let n = export_synthetic(&out, per_class, size, noise, seed)?;
            println!("wrote {n} images and manifest.csv to {}", out.display());
        }
        Command::Train { data, config, out, log } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            let outputs = TrainOutputs::beside(&out, log);
            let (summary, _) = train_run(&data, &cfg, &outputs)?;
            println!(
                "trained {} epochs (best {}); test accuracy {:.4}, macro-F1 {:.4}",
                summary.epochs_run,
                summary.best_epoch.map_or("none".to_string(), |e| e.to_string()),
                summary.test_accuracy,
                summary.test_macro_f1
            );
            println!("checkpoint: {}", outputs.checkpoint.display());
            println!("log: {}", outputs.log_csv.display());
            println!("summary: {}", outputs.summary_json.display());
        }
        Command::Eval { checkpoint, data, split, report } => {
            let r = eval_run(&checkpoint, &data, split, &report)?;
            print!("{}", r.to_text());
        }
        Command::Explain { checkpoint, image, class, method, branch, out } => {
            let class = parse_class(&class)?;
            let method = match method {
                MethodArg::Gradcam => ExplainMethod::GradCam,
                MethodArg::Ig => ExplainMethod::IntegratedGradients,
                MethodArg::Both => ExplainMethod::Both,
            };
            let branches: &[Branch] = match branch {
                BranchArg::A => &[Branch::A],
                BranchArg::B => &[Branch::B],
                BranchArg::Both => &[Branch::A, Branch::B],
            };
            let e = explain_run(&checkpoint, &image, class, method, branches, &out)?;
            println!("predicted class: {}", e.predicted);
            let probs: Vec<String> = e.probabilities.iter().map(|p| format!("{p:.6}")).collect();
            println!("probabilities: {}", probs.join(" "));
            println!("explained class: {}", e.target);
            for p in &e.written {
                println!("wrote {}", p.display());
            }
        }
        Command::Slice { volume, count, out } => {
            let v = Volume::read(&volume)?;
            std::fs::create_dir_all(&out)?;
            for (i, img) in extract_axial_slices(&v, count)?.iter().enumerate() {
                let img = img.normalized();
                let bytes = img.pixels().iter().map(|&p| quantize(p)).collect();
                let path = out.join(format!("slice_{i:03}.pgm"));
                PnmImage::gray(img.width(), img.height(), bytes).write(&path)?;
            }
            println!("wrote {count} slices to {}", out.display());
        }
        Command::Config => print!("{}", RunConfig::default().to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
