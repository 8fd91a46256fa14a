//! Command-line surface: pre-training, fine-tuning, sampling, evaluation,
//! the invariant suite, dataset export and the ablation grid.

use clap::{Args, Parser, Subcommand};
use fca::container::Container;
use fca::data::{export_split, gen_sample, tokenize, VideoSample};
use fca::error::{Error, Result};
use fca::eval::{
    evaluate_model, export_video_frames, predict_sample, run_ablation, write_report, EvalParams,
};
use fca::model::params::{FtcVariant, TrainMode};
use fca::model::Model;
use fca::rng::derive_seed;
use fca::runcfg::RunConfig;
use fca::train::Trainer;
use fca::verify::run_all;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "fca",
    about = "Frame-wise conditioning adaptation for text-video prediction on a self-contained diffusion transformer",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct TrainOverrides {
    /// Run configuration file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Fine-tuning strategy.
    #[arg(long, value_parser = ["fca", "lora", "full"])]
    mode: Option<String>,
    /// Frame-wise text conditioning variant.
    #[arg(long, value_parser = ["layerwise", "uniform", "uniform_r", "none"])]
    ftc: Option<String>,
    /// Frame-wise identity attention mask.
    #[arg(long, value_parser = ["on", "off"])]
    mask: Option<String>,
    /// Pre-normalization of the frame-wise text embeddings.
    #[arg(long, value_parser = ["on", "off"])]
    prenorm: Option<String>,
    /// Training seed override.
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainOverrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(mode) = &self.mode {
            cfg.mode = TrainMode::parse(mode)?;
        }
        if let Some(ftc) = &self.ftc {
            cfg.ftc = FtcVariant::parse(ftc)?;
        }
        if let Some(mask) = &self.mask {
            cfg.mask_on = mask == "on";
        }
        if let Some(prenorm) = &self.prenorm {
            cfg.prenorm_on = prenorm == "on";
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Clone)]
struct SamplerArgs {
    /// Guidance scale.
    #[arg(long, default_value_t = 6.0)]
    lambda: f64,
    /// DDIM step count.
    #[arg(long, default_value_t = 20)]
    steps: usize,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Overwrite the first k output frames with ground truth.
    #[arg(long)]
    replace_initial_frames: bool,
}

impl SamplerArgs {
    fn params(&self) -> EvalParams {
        EvalParams {
            lambda: self.lambda,
            steps: self.steps,
            seed: self.seed,
            replace_initial: self.replace_initial_frames,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the frozen-to-be backbone from scratch.
    Pretrain {
        #[command(flatten)]
        overrides: TrainOverrides,
        /// Output directory for checkpoints and the metrics log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune adapters on a pre-trained base checkpoint.
    Train {
        #[command(flatten)]
        overrides: TrainOverrides,
        /// Base (pretrain) checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate predictions for held-out samples and write PPM frames.
    Sample {
        /// Trained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory for the PPM frames.
        #[arg(long, alias = "out")]
        frames: PathBuf,
        /// Number of held-out samples to render.
        #[arg(long, default_value_t = 4)]
        n: u64,
        /// Replace each sample's prompt with this instruction.
        #[arg(long)]
        prompt: Option<String>,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Score held-out predictions: MSE/PSNR, direction accuracy, baseline.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n: u64,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Run the hermetic invariant suite; exits nonzero on any failure.
    Verify,
    /// Write a dataset split (tensor container + manifest).
    ExportData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        n: u64,
        /// Optional config supplying the geometry.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and score the design-choice grid at a reduced budget.
    Ablate {
        /// Base (pretrain) checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fine-tuning steps per grid row.
        #[arg(long, default_value_t = 500)]
        budget: usize,
        /// Held-out samples per row for loss/accuracy.
        #[arg(long, default_value_t = 32)]
        n: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
}

fn load_model(path: &PathBuf) -> Result<(RunConfig, Model<f32>)> {
    let trainer = Trainer::resume(&Container::load(path)?)?;
    Ok((trainer.cfg, trainer.model))
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Pretrain { overrides, out } => {
            let mut cfg = overrides.resolve()?;
            cfg.mode = TrainMode::PretrainBase;
            let mut trainer = Trainer::new_pretrain(cfg)?;
            let logs = trainer.train(&out)?;
            if let Some(last) = logs.last() {
                println!("pretrained {} steps, final loss {:.6}", last.step, last.loss);
            }
            println!("checkpoint: {}", out.join("ckpt_final.ntc").display());
            Ok(0)
        }
        Command::Train {
            overrides,
            checkpoint,
            out,
        } => {
            let cfg = overrides.resolve()?;
            if cfg.mode == TrainMode::PretrainBase {
                return Err(Error::Config(
                    "use the pretrain subcommand for mode pretrain_base".into(),
                ));
            }
            let base = Container::load(&checkpoint)?;
            let mut trainer = Trainer::new_finetune(cfg, &base)?;
            let logs = trainer.train(&out)?;
            if let Some(last) = logs.last() {
                println!(
                    "trained {} steps ({}), final loss {:.6}",
                    last.step,
                    trainer.cfg.mode.name(),
                    last.loss
                );
            }
            println!("checkpoint: {}", out.join("ckpt_final.ntc").display());
            Ok(0)
        }
        Command::Sample {
            checkpoint,
            frames,
            n,
            prompt,
            sampler,
        } => {
            let (cfg, model) = load_model(&checkpoint)?;
            let params = sampler.params();
            let data_cfg = cfg.data_config();
            for j in 0..n {
                let index = cfg.train_samples as u64 + j;
                let mut sample: VideoSample<f32> = gen_sample(cfg.data_seed, index, &data_cfg)?;
                if let Some(text) = &prompt {
                    sample.prompt_ids = tokenize(text, cfg.model.text_len)?;
                    sample.prompt = text.clone();
                }
                let video =
                    predict_sample(&model, &sample, &params, derive_seed(params.seed, index))?;
                export_video_frames(&video, &frames, &format!("s{index:04}"))?;
                println!("s{index:04}: \"{}\"", sample.prompt);
            }
            println!("frames written to {}", frames.display());
            Ok(0)
        }
        Command::Evaluate {
            checkpoint,
            out,
            n,
            sampler,
        } => {
            let (cfg, model) = load_model(&checkpoint)?;
            let params = sampler.params();
            let data_cfg = cfg.data_config();
            let report = evaluate_model(
                &model,
                cfg.data_seed,
                cfg.train_samples as u64,
                n,
                &data_cfg,
                &params,
            )?;
            write_report(&report, &out)?;
            println!(
                "n = {}  mean_mse = {:.6}  baseline_mse = {:.6}  psnr = {:.2}  accuracy = {:.4}  undecided = {}",
                report.rows.len(),
                report.mean_mse,
                report.baseline_mse,
                report.mean_psnr,
                report.accuracy,
                report.undecided
            );
            Ok(0)
        }
        Command::Verify => {
            let mut failures = 0;
            for check in run_all() {
                match &check.outcome {
                    Ok(detail) => println!("PASS {} ({detail})", check.name),
                    Err(err) => {
                        failures += 1;
                        println!("FAIL {}: {err}", check.name);
                    }
                }
            }
            Ok(if failures == 0 { 0 } else { 1 })
        }
        Command::ExportData {
            out,
            seed,
            n,
            config,
        } => {
            let data_cfg = match config {
                Some(path) => RunConfig::load(&path)?.data_config(),
                None => RunConfig::default().data_config(),
            };
            export_split::<f32>(seed, n, &data_cfg, &out)?;
            println!("wrote {n} samples to {}", out.display());
            Ok(0)
        }
        Command::Ablate {
            checkpoint,
            out,
            budget,
            n,
            config,
            sampler,
        } => {
            let template = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::default(),
            };
            let base = Container::load(&checkpoint)?;
            let rows = run_ablation(&base, &template, budget, n, &sampler.params(), &out)?;
            println!("label\ttrain_loss\tval_loss\taccuracy");
            for row in &rows {
                println!(
                    "{}\t{:.6}\t{:.6}\t{:.4}",
                    row.label, row.final_train_loss, row.val_loss, row.accuracy
                );
            }
            println!("table: {}", out.join("ablation.tsv").display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}
