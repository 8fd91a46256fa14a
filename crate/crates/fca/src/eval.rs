//! Evaluation: end-to-end prediction with guidance, pixel metrics, the
//! direction oracle, report writing, frame export and the ablation driver.

use crate::container::Container;
use crate::data::{gen_sample, tokenize, DataConfig, Direction, VideoSample, BACKGROUND};
use crate::diffusion::{add_noise, mse_loss, sample as run_sampler, GuidanceConfig};
use crate::error::{Error, Result};
use crate::model::params::TrainMode;
use crate::model::{Conditioning, Model};
use crate::rng::{derive_seed, Xoshiro256};
use crate::runcfg::RunConfig;
use crate::tensor::{Scalar, Tape, Tensor};
use crate::train::{extraction_seed, Trainer};
use std::path::Path;

/// PSNR stand-in for an exact match.
pub const PSNR_SENTINEL: f64 = 99.0;

/// Oracle result: a direction, or a degraded verdict when the foreground is
/// too small or barely moves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleVerdict {
    Decided(Direction),
    Undecided,
}

impl OracleVerdict {
    pub fn label(self) -> &'static str {
        match self {
            OracleVerdict::Decided(d) => d.label(),
            OracleVerdict::Undecided => "UNDECIDED",
        }
    }
}

/// MSE and PSNR (peak 2.0) over the generated frames k..f-1 only.
pub fn compute_metrics<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    k: usize,
) -> Result<(f64, f64)> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "pred {:?} vs gt {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let per = pred.shape()[1..].iter().product::<usize>();
    let start = k * per;
    if start >= pred.len() {
        return Err(Error::Contract(format!(
            "k {k} leaves no generated frames to score"
        )));
    }
    let mut sq = 0.0f64;
    for (a, b) in pred.data()[start..].iter().zip(&gt.data()[start..]) {
        let d = a.as_f64() - b.as_f64();
        sq += d * d;
    }
    let mse = sq / (pred.len() - start) as f64;
    let psnr = if mse == 0.0 {
        PSNR_SENTINEL
    } else {
        10.0 * (4.0 / mse).log10()
    };
    Ok((mse, psnr))
}

/// Prediction that copies the last conditioning frame forward; the trivial
/// baseline every trained model must beat.
pub fn copy_last_frame_baseline<T: Scalar>(gt: &Tensor<T>, k: usize) -> Tensor<T> {
    let sh = gt.shape().to_vec();
    let per: usize = sh[1..].iter().product();
    let mut data = gt.data().to_vec();
    let last_init = &gt.data()[(k - 1) * per..k * per].to_vec();
    for frame in k..sh[0] {
        data[frame * per..(frame + 1) * per].copy_from_slice(last_init);
    }
    Tensor::new(sh, data).expect("same shape")
}

const FG_THRESHOLD: f64 = 0.2;
const MIN_FOREGROUND_PX: usize = 4;
const MIN_DISPLACEMENT_PX: f64 = 0.5;

fn thresholded_centroid<T: Scalar>(
    video: &Tensor<T>,
    frame: usize,
) -> Option<(f64, f64)> {
    let sh = video.shape();
    let (c, h, w) = (sh[1], sh[2], sh[3]);
    let plane = h * w;
    let base = frame * c * plane;
    let data = video.data();
    let (mut mx, mut my, mut count) = (0.0f64, 0.0f64, 0usize);
    for py in 0..h {
        for px in 0..w {
            let mut fg = false;
            for ch in 0..c {
                if (data[base + ch * plane + py * w + px].as_f64() - BACKGROUND).abs()
                    > FG_THRESHOLD
                {
                    fg = true;
                    break;
                }
            }
            if fg {
                mx += px as f64;
                my += py as f64;
                count += 1;
            }
        }
    }
    if count < MIN_FOREGROUND_PX {
        return None;
    }
    Some((mx / count as f64, my / count as f64))
}

/// Centroid-displacement direction classifier over the generated frames.
/// Thresholds pixels against the known background, tracks the foreground
/// centroid, and compares the mean centroid of the first and second halves
/// of the non-conditioning frames.
pub fn direction_oracle<T: Scalar>(video: &Tensor<T>, k: usize) -> OracleVerdict {
    let frames = video.shape()[0];
    if k >= frames {
        return OracleVerdict::Undecided;
    }
    let considered: Vec<usize> = (k..frames).collect();
    let mut centroids = Vec::with_capacity(considered.len());
    for &f in &considered {
        match thresholded_centroid(video, f) {
            Some(c) => centroids.push(c),
            None => return OracleVerdict::Undecided,
        }
    }
    let half = centroids.len() / 2;
    if half == 0 {
        return OracleVerdict::Undecided;
    }
    let mean = |cs: &[(f64, f64)]| -> (f64, f64) {
        let n = cs.len() as f64;
        (
            cs.iter().map(|c| c.0).sum::<f64>() / n,
            cs.iter().map(|c| c.1).sum::<f64>() / n,
        )
    };
    let (x0, y0) = mean(&centroids[..half]);
    let (x1, y1) = mean(&centroids[centroids.len() - half..]);
    let (dx, dy) = (x1 - x0, y1 - y0);
    if dx.abs().max(dy.abs()) < MIN_DISPLACEMENT_PX {
        return OracleVerdict::Undecided;
    }
    let dir = if dx.abs() >= dy.abs() {
        if dx < 0.0 {
            Direction::Left
        } else {
            Direction::Right
        }
    } else if dy < 0.0 {
        Direction::Up
    } else {
        Direction::Down
    };
    OracleVerdict::Decided(dir)
}

/// Sampler settings for prediction and evaluation.
#[derive(Debug, Clone)]
pub struct EvalParams {
    pub lambda: f64,
    pub steps: usize,
    pub seed: u64,
    /// Overwrite the first k output frames with ground truth (display/eval
    /// convention for prediction tasks).
    pub replace_initial: bool,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            lambda: 6.0,
            steps: 20,
            seed: 0,
            replace_initial: false,
        }
    }
}

/// Runs the sampler for one dataset sample.
pub fn predict_sample(
    model: &Model<f32>,
    sample: &VideoSample<f32>,
    params: &EvalParams,
    sampler_seed: u64,
) -> Result<Tensor<f32>> {
    let gcfg = GuidanceConfig {
        lambda: params.lambda,
        steps: params.steps,
        empty_prompt_ids: tokenize("", model.cfg.text_len)?,
    };
    let mut video = run_sampler(
        model,
        &model.sched,
        &sample.prompt_ids,
        &sample.initial_frames(),
        &gcfg,
        sampler_seed,
    )?;
    if params.replace_initial {
        let per: usize = video.shape()[1..].iter().product();
        let k = sample.init_frames;
        video.data_mut()[..k * per].copy_from_slice(&sample.video.data()[..k * per]);
    }
    Ok(video)
}

/// One evaluated sample.
#[derive(Debug, Clone)]
pub struct SampleReport {
    pub index: u64,
    pub prompt: String,
    pub mse: f64,
    pub psnr: f64,
    pub predicted: OracleVerdict,
    pub actual: Direction,
    pub matched: bool,
}

/// Aggregate evaluation result.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<SampleReport>,
    pub mean_mse: f64,
    pub mean_psnr: f64,
    pub accuracy: f64,
    pub undecided: usize,
    pub baseline_mse: f64,
    pub lambda: f64,
    pub steps: usize,
    pub seed: u64,
}

/// Evaluates an arbitrary predictor over a held-out index range. The
/// predictor receives the sample and a per-sample sampler seed.
pub fn evaluate_with<F>(
    data_seed: u64,
    start: u64,
    n: u64,
    data_cfg: &DataConfig,
    params: &EvalParams,
    mut predict: F,
) -> Result<EvalReport>
where
    F: FnMut(&VideoSample<f32>, u64) -> Result<Tensor<f32>>,
{
    let mut rows = Vec::with_capacity(n as usize);
    let (mut mse_sum, mut psnr_sum, mut baseline_sum) = (0.0f64, 0.0f64, 0.0f64);
    let mut matches = 0usize;
    let mut undecided = 0usize;
    for index in start..start + n {
        let sample: VideoSample<f32> = gen_sample(data_seed, index, data_cfg)?;
        let pred = predict(&sample, derive_seed(params.seed, index))?;
        let (mse, psnr) = compute_metrics(&pred, &sample.video, sample.init_frames)?;
        let baseline = copy_last_frame_baseline(&sample.video, sample.init_frames);
        let (baseline_mse, _) = compute_metrics(&baseline, &sample.video, sample.init_frames)?;
        let predicted = direction_oracle(&pred, sample.init_frames);
        let matched = predicted == OracleVerdict::Decided(sample.label);
        if predicted == OracleVerdict::Undecided {
            undecided += 1;
        }
        if matched {
            matches += 1;
        }
        mse_sum += mse;
        psnr_sum += psnr;
        baseline_sum += baseline_mse;
        rows.push(SampleReport {
            index,
            prompt: sample.prompt.clone(),
            mse,
            psnr,
            predicted,
            actual: sample.label,
            matched,
        });
    }
    let count = rows.len().max(1) as f64;
    Ok(EvalReport {
        mean_mse: mse_sum / count,
        mean_psnr: psnr_sum / count,
        accuracy: matches as f64 / count,
        undecided,
        baseline_mse: baseline_sum / count,
        lambda: params.lambda,
        steps: params.steps,
        seed: params.seed,
        rows,
    })
}

/// Evaluates a trained model with the DDIM/CFG sampler.
pub fn evaluate_model(
    model: &Model<f32>,
    data_seed: u64,
    start: u64,
    n: u64,
    data_cfg: &DataConfig,
    params: &EvalParams,
) -> Result<EvalReport> {
    evaluate_with(data_seed, start, n, data_cfg, params, |sample, seed| {
        predict_sample(model, sample, params, seed)
    })
}

/// Writes the per-sample TSV and a text summary into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut tsv = String::from("index\tprompt\tmse\tpsnr\tpredicted\tactual\tmatch\n");
    for row in &report.rows {
        tsv.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.3}\t{}\t{}\t{}\n",
            row.index,
            row.prompt,
            row.mse,
            row.psnr,
            row.predicted.label(),
            row.actual.label(),
            row.matched as u8
        ));
    }
    std::fs::write(dir.join("per_sample.tsv"), tsv)?;
    let summary = format!(
        "samples = {}\nmean_mse = {:.6}\nmean_psnr = {:.3}\ndirection_accuracy = {:.4}\nundecided = {}\ncopy_baseline_mse = {:.6}\nlambda = {}\nsteps = {}\nseed = {}\n",
        report.rows.len(),
        report.mean_mse,
        report.mean_psnr,
        report.accuracy,
        report.undecided,
        report.baseline_mse,
        report.lambda,
        report.steps,
        report.seed
    );
    std::fs::write(dir.join("summary.txt"), summary)?;
    Ok(())
}

/// Held-out diffusion loss with per-sample deterministic (t, noise) draws;
/// comparable across models of any adapter mode.
pub fn validation_loss(
    model: &Model<f32>,
    data_seed: u64,
    start: u64,
    n: u64,
    data_cfg: &DataConfig,
) -> Result<f64> {
    let mut total = 0.0f64;
    for index in start..start + n {
        let sample: VideoSample<f32> = gen_sample(data_seed, index, data_cfg)?;
        let t = 1 + (derive_seed(data_seed ^ 0x76616c74, index) as usize) % model.cfg.t_max;
        let mut noise_rng =
            Xoshiro256::seed_from_u64(derive_seed(data_seed ^ 0x76616c65, index));
        let eps = Tensor::<f32>::fill_normal(sample.video.shape(), &mut noise_rng);
        let x_t = add_noise(&sample.video, &eps, t, &model.sched)?;
        let cond = match model.arch.mode {
            TrainMode::PretrainBase | TrainMode::Full => Conditioning::None,
            TrainMode::Fca => model.prepare_conditioning(
                &sample.prompt_ids,
                &sample.initial_frames(),
                extraction_seed(data_seed, index),
            )?,
            TrainMode::Lora => Conditioning::LoraAppend(sample.initial_frames()),
        };
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape, false);
        let eps_hat = tape_forward(model, &mut tape, &bound, &x_t, &sample.prompt_ids, t, &cond)?;
        let loss = mse_loss(&mut tape, eps_hat, &eps)?;
        total += tape.value(loss).item() as f64;
    }
    Ok(total / n as f64)
}

fn tape_forward(
    model: &Model<f32>,
    tape: &mut Tape<f32>,
    bound: &crate::model::params::BoundParams,
    x_t: &Tensor<f32>,
    prompt_ids: &[u32],
    t: usize,
    cond: &Conditioning<f32>,
) -> Result<crate::tensor::Var> {
    model.eps_forward(tape, bound, x_t, prompt_ids, t, cond)
}

// ---- frame export ------------------------------------------------------

/// Binary PPM (P6), maxval 255; pixels mapped (x + 1) * 127.5 rounded to
/// nearest after clamping to [-1, 1]. Single-channel frames are replicated
/// to gray RGB.
pub fn write_ppm<T: Scalar>(frame: &Tensor<T>, path: &Path) -> Result<()> {
    let sh = frame.shape();
    if sh.len() != 3 {
        return Err(Error::Shape(format!("frame must be [C, H, W], got {sh:?}")));
    }
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let plane = h * w;
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let data = frame.data();
    for py in 0..h {
        for px in 0..w {
            for ch in 0..3 {
                let src = if c >= 3 { ch } else { 0 };
                let v = data[src * plane + py * w + px].as_f64().clamp(-1.0, 1.0);
                bytes.push(((v + 1.0) * 127.5).round() as u8);
            }
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Writes every frame of a video as `{prefix}_f{frame:02}.ppm` under `dir`.
pub fn export_video_frames<T: Scalar>(video: &Tensor<T>, dir: &Path, prefix: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let sh = video.shape();
    let per: usize = sh[1..].iter().product();
    for frame in 0..sh[0] {
        let tensor = Tensor::new(
            sh[1..].to_vec(),
            video.data()[frame * per..(frame + 1) * per].to_vec(),
        )?;
        write_ppm(&tensor, &dir.join(format!("{prefix}_f{frame:02}.ppm")))?;
    }
    Ok(())
}

// ---- ablation driver -----------------------------------------------------

/// One grid cell of the ablation table.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub config: RunConfig,
    pub final_train_loss: f64,
    pub val_loss: f64,
    pub accuracy: f64,
    pub undecided: usize,
}

/// The fine-tuning-strategy / conditioning-variant / mask / prenorm grid at
/// a reduced step budget. Rows follow the ablation table structure: the
/// adapter baseline, the adapter without frame-wise text conditioning, both
/// uniform variants, layer-wise without and with the mask, and layer-wise
/// without the pre-normalization.
pub fn ablation_grid(template: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut rows = Vec::new();
    let mut push = |label: &str,
                    mode: TrainMode,
                    ftc: Option<crate::model::params::FtcVariant>,
                    mask: bool,
                    prenorm: bool| {
        let cfg = RunConfig {
            mode,
            ftc,
            mask_on: mask,
            prenorm_on: prenorm,
            ..template.clone()
        };
        rows.push((label.to_string(), cfg));
    };
    use crate::model::params::FtcVariant::*;
    push("lora", TrainMode::Lora, None, false, false);
    push("fca", TrainMode::Fca, None, false, false);
    push("fca+uniform", TrainMode::Fca, Some(Uniform), false, true);
    push("fca+uniform_r", TrainMode::Fca, Some(UniformR), false, true);
    push("fca+layerwise", TrainMode::Fca, Some(LayerWise), false, true);
    push("fca+layerwise+mask", TrainMode::Fca, Some(LayerWise), true, true);
    push(
        "fca+layerwise+mask-prenorm",
        TrainMode::Fca,
        Some(LayerWise),
        true,
        false,
    );
    rows
}

/// Trains and scores every grid row at the given budget; writes a TSV table.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    base: &Container,
    template: &RunConfig,
    budget: usize,
    eval_n: u64,
    eval_params: &EvalParams,
    out: &Path,
) -> Result<Vec<AblationRow>> {
    std::fs::create_dir_all(out)?;
    let mut table = String::from(
        "label\tmode\tftc\tmask\tprenorm\ttrain_loss\tval_loss\taccuracy\tundecided\n",
    );
    let mut rows = Vec::new();
    let val_start = template.train_samples as u64;
    for (label, mut cfg) in ablation_grid(template) {
        cfg.steps = budget;
        cfg.checkpoint_every = 0;
        let dir = out.join(&label);
        let mut trainer = Trainer::new_finetune(cfg.clone(), base)?;
        let logs = trainer.train(&dir)?;
        let tail = logs.len().min(50);
        let final_train_loss =
            logs[logs.len() - tail..].iter().map(|l| l.loss).sum::<f64>() / tail as f64;
        let data_cfg = cfg.data_config();
        let val_loss =
            validation_loss(&trainer.model, cfg.data_seed, val_start, eval_n, &data_cfg)?;
        let report = evaluate_model(
            &trainer.model,
            cfg.data_seed,
            val_start,
            eval_n,
            &data_cfg,
            eval_params,
        )?;
        table.push_str(&format!(
            "{label}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.4}\t{}\n",
            cfg.mode.name(),
            cfg.ftc.map_or("none", crate::model::params::FtcVariant::name),
            if cfg.mask_on { "on" } else { "off" },
            if cfg.prenorm_on { "on" } else { "off" },
            final_train_loss,
            val_loss,
            report.accuracy,
            report.undecided
        ));
        rows.push(AblationRow {
            label,
            config: cfg,
            final_train_loss,
            val_loss,
            accuracy: report.accuracy,
            undecided: report.undecided,
        });
    }
    std::fs::write(out.join("ablation.tsv"), table)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_exact_and_offset() {
        let cfg = DataConfig::default();
        let s: VideoSample<f32> = gen_sample(3, 1, &cfg).unwrap();
        let (mse, psnr) = compute_metrics(&s.video, &s.video, cfg.init_frames).unwrap();
        assert_eq!(mse, 0.0);
        assert_eq!(psnr, PSNR_SENTINEL);

        let shifted = s.video.map(|v| v + 0.1);
        let (mse, psnr) = compute_metrics(&shifted, &s.video, cfg.init_frames).unwrap();
        assert!((mse - 0.01).abs() < 1e-5, "mse {mse}");
        assert!((psnr - 26.0206).abs() < 0.01, "psnr {psnr}");
    }

    #[test]
    fn copy_baseline_has_positive_error_on_motion() {
        let cfg = DataConfig::default();
        for index in 0..10 {
            let s: VideoSample<f32> = gen_sample(5, index, &cfg).unwrap();
            let baseline = copy_last_frame_baseline(&s.video, cfg.init_frames);
            let (mse, _) = compute_metrics(&baseline, &s.video, cfg.init_frames).unwrap();
            assert!(mse > 0.0, "sample {index}");
            // conditioning frames themselves are untouched
            let per: usize = s.video.shape()[1..].iter().product();
            assert_eq!(
                &baseline.data()[..cfg.init_frames * per],
                &s.video.data()[..cfg.init_frames * per]
            );
        }
    }

    #[test]
    fn oracle_correct_on_ground_truth() {
        let cfg = DataConfig::default();
        for index in 0..100 {
            let s: VideoSample<f32> = gen_sample(9, index, &cfg).unwrap();
            let verdict = direction_oracle(&s.video, cfg.init_frames);
            assert_eq!(
                verdict,
                OracleVerdict::Decided(s.label),
                "index {index}: {verdict:?} vs {:?}",
                s.label
            );
        }
    }

    #[test]
    fn oracle_undecided_on_static_and_empty() {
        let cfg = DataConfig::default();
        let s: VideoSample<f32> = gen_sample(7, 0, &cfg).unwrap();
        let static_video = copy_last_frame_baseline(&s.video, 1);
        // static after frame 0: displacement below threshold
        let first_frame_repeated = {
            let per: usize = s.video.shape()[1..].iter().product();
            let mut data = Vec::new();
            for _ in 0..cfg.frames {
                data.extend_from_slice(&s.video.data()[..per]);
            }
            Tensor::<f32>::new(s.video.shape().to_vec(), data).unwrap()
        };
        assert_eq!(
            direction_oracle(&first_frame_repeated, cfg.init_frames),
            OracleVerdict::Undecided
        );
        let _ = static_video;
        // all-background video: no foreground at all
        let empty = Tensor::<f32>::zeros(s.video.shape());
        assert_eq!(
            direction_oracle(&empty, cfg.init_frames),
            OracleVerdict::Undecided
        );
    }

    #[test]
    fn evaluate_with_perfect_stub_is_exact() {
        let cfg = DataConfig::default();
        let params = EvalParams::default();
        let report = evaluate_with(11, 100, 20, &cfg, &params, |s, _| Ok(s.video.clone()))
            .unwrap();
        assert_eq!(report.rows.len(), 20);
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.mean_mse, 0.0);
        assert_eq!(report.undecided, 0);
        assert!(report.baseline_mse > 0.0);
    }

    #[test]
    fn report_files_written() {
        let cfg = DataConfig::default();
        let params = EvalParams::default();
        let report =
            evaluate_with(11, 0, 5, &cfg, &params, |s, _| Ok(s.video.clone())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_report(&report, dir.path()).unwrap();
        let tsv = std::fs::read_to_string(dir.path().join("per_sample.tsv")).unwrap();
        assert_eq!(tsv.lines().count(), 6); // header + 5 rows
        let summary = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
        assert!(summary.contains("direction_accuracy = 1.0000"));
    }

    #[test]
    fn ppm_format_and_pixel_mapping() {
        let frame = Tensor::<f32>::from_f64_slice(
            &[3, 1, 2],
            &[-1.0, 1.0, 0.0, 0.0, -1.0, 1.0],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ppm");
        write_ppm(&frame, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P6\n2 1\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        // pixel 0: (-1, 0, -1) -> (0, 128, 0); pixel 1: (1, 0, 1) -> (255, 128, 255)
        assert_eq!(&bytes[header.len()..], &[0, 128, 0, 255, 128, 255]);
    }

    #[test]
    fn export_writes_one_file_per_frame() {
        let video = Tensor::<f32>::zeros(&[4, 3, 2, 2]);
        let dir = tempfile::tempdir().unwrap();
        export_video_frames(&video, dir.path(), "s0000").unwrap();
        for frame in 0..4 {
            assert!(dir.path().join(format!("s0000_f{frame:02}.ppm")).exists());
        }
    }

    #[test]
    fn ablation_grid_covers_design_axes() {
        let rows = ablation_grid(&RunConfig::default());
        assert_eq!(rows.len(), 7);
        assert!(rows.iter().any(|(_, c)| c.mode == TrainMode::Lora));
        assert!(rows
            .iter()
            .any(|(_, c)| c.mode == TrainMode::Fca && c.ftc.is_none()));
        assert!(rows.iter().any(|(_, c)| c.mask_on && c.prenorm_on));
        assert!(rows.iter().any(|(_, c)| c.mask_on && !c.prenorm_on));
    }
}
