//! Optimizer, learning-rate schedule, the training loop and checkpoint
//! persistence. Fully deterministic: (config, seeds) fix every batch, noise
//! draw and update bit-exactly, and checkpoints carry the RNG state so a
//! resumed run continues the exact stream.

use crate::container::{entry_from_tensor, tensor_from_entry, Container};
use crate::data::{gen_sample, tokenize};
use crate::diffusion::{add_noise, mse_loss};
use crate::error::{Error, Result};
use crate::model::params::{Partition, TrainMode};
use crate::model::{Conditioning, Model};
use crate::rng::{derive_seed, Xoshiro256};
use crate::runcfg::{RunConfig, SchedulerKind};
use crate::tensor::{Scalar, Tape, Tensor};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// Stream tags keeping per-purpose seeds disjoint.
const PERM_STREAM: u64 = 0x7065726d; // batch permutations
const EXTRACT_STREAM: u64 = 0x78696e69; // initial-frame extraction noise

/// Extraction-noise seed for one training sample.
pub fn extraction_seed(data_seed: u64, index: u64) -> u64 {
    derive_seed(data_seed ^ EXTRACT_STREAM, index)
}

/// Deterministic per-epoch shuffle of the training indices.
pub fn epoch_permutation(data_seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = Xoshiro256::seed_from_u64(derive_seed(data_seed ^ PERM_STREAM, epoch));
    perm.shuffle(&mut rng);
    perm
}

/// Learning rate at a step: linear warmup from zero, then cosine decay to
/// zero at `steps` (restarted `cycles` times), or flat for the constant kind.
pub fn lr_at(step: usize, cfg: &RunConfig) -> f64 {
    if cfg.warmup > 0 && step < cfg.warmup {
        return cfg.lr * step as f64 / cfg.warmup as f64;
    }
    match cfg.scheduler {
        SchedulerKind::Constant => cfg.lr,
        SchedulerKind::CosineWithRestart => {
            if step >= cfg.steps {
                return 0.0;
            }
            let span = (cfg.steps - cfg.warmup) as f64;
            let x = (step - cfg.warmup) as f64 / span;
            let phase = (x * cfg.cycles as f64) % 1.0;
            cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos())
        }
    }
}

/// First and second moments for every trainable tensor.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Scalar> {
    pub moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn zeros_for(model: &Model<T>) -> Self {
        let mut moments = BTreeMap::new();
        for name in model.store.trainable_names() {
            let shape = model.store.get(&name).expect("trainable").shape().to_vec();
            moments.insert(name, (Tensor::zeros(&shape), Tensor::zeros(&shape)));
        }
        Self { moments }
    }
}

const ADAM_EPS: f64 = 1e-8;

/// Scales all gradients so the global L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_gradients<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.values() {
        for &v in g.data() {
            let v = v.as_f64();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}

/// One decoupled-weight-decay Adam update over the trainable partition.
/// `t` is the 1-based update count for bias correction. Frozen tensors are
/// untouched by construction: only gradient keys are visited, and each must
/// be trainable.
pub fn adamw_step<T: Scalar>(
    model: &mut Model<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    opt: &mut OptimizerState<T>,
    cfg: &RunConfig,
    lr: f64,
    t: usize,
) -> Result<()> {
    let b1 = cfg.beta1;
    let b2 = cfg.beta2;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for (name, grad) in grads {
        if model.store.partition_of(name)? != Partition::Trainable {
            return Err(Error::Contract(format!(
                "gradient for frozen tensor '{name}'"
            )));
        }
        if !grad.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for '{name}' at update {t}"
            )));
        }
        let (m, v) = opt
            .moments
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("no optimizer state for '{name}'")))?;
        let param = model.store.get_mut(name)?;
        let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
        let one = T::one();
        let lr_t = T::from_f64(lr);
        let wd = T::from_f64(cfg.weight_decay);
        let eps = T::from_f64(ADAM_EPS);
        let bc1t = T::from_f64(bc1);
        let bc2t = T::from_f64(bc2);
        for i in 0..param.len() {
            let g = grad.data()[i];
            let mi = b1t * m.data()[i] + (one - b1t) * g;
            let vi = b2t * v.data()[i] + (one - b2t) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1t;
            let v_hat = vi / bc2t;
            let p = param.data()[i];
            param.data_mut()[i] = p - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * p);
        }
    }
    Ok(())
}

/// Per-step record, mirrored into the metrics log.
#[derive(Debug, Clone, Copy)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// A running training job.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model<f32>,
    pub opt: OptimizerState<f32>,
    pub rng: Xoshiro256,
    pub step: usize,
}

impl Trainer {
    /// Fresh base pre-training run (mode must be pretrain_base or full
    /// without a base checkpoint makes no sense).
    pub fn new_pretrain(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.mode != TrainMode::PretrainBase {
            return Err(Error::Config(format!(
                "new_pretrain requires mode pretrain_base, got {}",
                cfg.mode.name()
            )));
        }
        let model = Model::new_base(cfg.model.clone(), cfg.seed)?;
        let opt = OptimizerState::zeros_for(&model);
        let rng = Xoshiro256::seed_from_u64(derive_seed(cfg.seed, 0x747261696e));
        Ok(Self {
            cfg,
            model,
            opt,
            rng,
            step: 0,
        })
    }

    /// Fine-tuning run (fca / lora / full) on top of a pre-trained base
    /// checkpoint. Fresh adapters, fresh optimizer, step 0.
    pub fn new_finetune(cfg: RunConfig, base: &Container) -> Result<Self> {
        cfg.validate()?;
        if cfg.mode == TrainMode::PretrainBase {
            return Err(Error::Config(
                "fine-tuning mode expected, got pretrain_base".into(),
            ));
        }
        let base_cfg = RunConfig::parse(&base.config)?;
        if base_cfg.model != cfg.model {
            return Err(Error::Config(format!(
                "base checkpoint geometry {:?} does not match run config {:?}",
                base_cfg.model, cfg.model
            )));
        }
        let store =
            crate::model::params::ParamStore::from_container(base, &["base.", "ftcenc."])?;
        let model = Model::with_adapters(cfg.model.clone(), store, cfg.architecture(), cfg.seed)?;
        let opt = OptimizerState::zeros_for(&model);
        let rng = Xoshiro256::seed_from_u64(derive_seed(cfg.seed, 0x747261696e));
        Ok(Self {
            cfg,
            model,
            opt,
            rng,
            step: 0,
        })
    }

    /// Restores a run mid-flight; the checkpoint's config snapshot is
    /// authoritative.
    pub fn resume(ckpt: &Container) -> Result<Self> {
        let cfg = RunConfig::parse(&ckpt.config)?;
        let store = crate::model::params::ParamStore::from_container(
            ckpt,
            &["base.", "ftcenc.", "fca.", "ftc.", "lora."],
        )?;
        let model = Model::from_store(cfg.model.clone(), cfg.architecture(), store)?;
        let mut opt = OptimizerState::zeros_for(&model);
        for name in model.store.trainable_names() {
            let m = tensor_from_entry(ckpt.get(&format!("opt.m.{name}"))?)?;
            let v = tensor_from_entry(ckpt.get(&format!("opt.v.{name}"))?)?;
            opt.moments.insert(name, (m, v));
        }
        Ok(Self {
            cfg,
            model,
            opt,
            rng: Xoshiro256::from_state(ckpt.rng_state),
            step: ckpt.step as usize,
        })
    }

    pub fn checkpoint(&self) -> Container {
        let mut c = self.model.store.to_container(
            self.step as u32,
            self.rng.state(),
            self.cfg.to_text(),
        );
        for (name, (m, v)) in &self.opt.moments {
            c.push(format!("opt.m.{name}"), entry_from_tensor(m));
            c.push(format!("opt.v.{name}"), entry_from_tensor(v));
        }
        c
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// One optimizer step over a deterministic batch.
    pub fn step_once(&mut self) -> Result<StepLog> {
        let cfg = self.cfg.clone();
        let data_cfg = cfg.data_config();
        let batches_per_epoch = cfg.train_samples / cfg.batch;
        let epoch = self.step / batches_per_epoch;
        let slot = self.step % batches_per_epoch;
        let perm = epoch_permutation(cfg.data_seed, epoch as u64, cfg.train_samples);
        let indices = &perm[slot * cfg.batch..(slot + 1) * cfg.batch];

        // stochastic draws in a fixed order so resume replays them exactly
        use rand::Rng;
        let mut draws = Vec::with_capacity(indices.len());
        for _ in indices {
            let t = self.rng.random_range(1..=cfg.model.t_max);
            let noise_seed = self.rng.next_u64_raw();
            let dropped = cfg.mode == TrainMode::PretrainBase
                && cfg.pretrain_prompt_dropout > 0.0
                && self.rng.random_range(0.0..1.0) < cfg.pretrain_prompt_dropout;
            draws.push((t, noise_seed, dropped));
        }

        let trainable = self.model.store.trainable_names();
        let mut grad_sum: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        let mut loss_sum = 0.0f64;
        for (&index, &(t, noise_seed, dropped)) in indices.iter().zip(&draws) {
            let sample = gen_sample::<f32>(cfg.data_seed, index as u64, &data_cfg)?;
            let prompt: Vec<u32> = if dropped {
                tokenize("", cfg.model.text_len)?
            } else {
                sample.prompt_ids.clone()
            };
            let mut noise_rng = Xoshiro256::seed_from_u64(noise_seed);
            let eps = Tensor::<f32>::fill_normal(sample.video.shape(), &mut noise_rng);
            let x_t = add_noise(&sample.video, &eps, t, &self.model.sched)?;
            let cond = match cfg.mode {
                TrainMode::PretrainBase | TrainMode::Full => Conditioning::None,
                TrainMode::Fca => self.model.prepare_conditioning(
                    &prompt,
                    &sample.initial_frames(),
                    extraction_seed(cfg.data_seed, index as u64),
                )?,
                TrainMode::Lora => Conditioning::LoraAppend(sample.initial_frames()),
            };
            let mut tape = Tape::new();
            let bound = self.model.store.bind(&mut tape, true);
            let eps_hat = self
                .model
                .eps_forward(&mut tape, &bound, &x_t, &prompt, t, &cond)?;
            let loss = mse_loss(&mut tape, eps_hat, &eps)?;
            let loss_val = tape.value(loss).item() as f64;
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at step {} (sample {index}, t {t})",
                    self.step
                )));
            }
            loss_sum += loss_val;
            tape.backward(loss)?;
            for name in &trainable {
                if let Some(g) = tape.grad_tensor(bound.var(name)) {
                    match grad_sum.get_mut(name) {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                        None => {
                            grad_sum.insert(name.clone(), g);
                        }
                    }
                }
            }
        }
        // batch-mean gradient; parameters the loss never reached get zeros
        let inv_b = 1.0 / cfg.batch as f32;
        for name in &trainable {
            match grad_sum.get_mut(name) {
                Some(g) => {
                    for v in g.data_mut() {
                        *v *= inv_b;
                    }
                }
                None => {
                    let shape = self.model.store.get(name)?.shape().to_vec();
                    grad_sum.insert(name.clone(), Tensor::zeros(&shape));
                }
            }
        }
        clip_gradients(&mut grad_sum, cfg.grad_clip);
        let lr = lr_at(self.step, &cfg);
        adamw_step(
            &mut self.model,
            &grad_sum,
            &mut self.opt,
            &cfg,
            lr,
            self.step + 1,
        )?;
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            loss: loss_sum / cfg.batch as f64,
            lr,
        })
    }

    /// Runs to `cfg.steps`, appending the metrics log and writing periodic
    /// plus final checkpoints under `out_dir`.
    pub fn train(&mut self, out_dir: &Path) -> Result<Vec<StepLog>> {
        std::fs::create_dir_all(out_dir)?;
        let metrics_path = out_dir.join("metrics.tsv");
        let mut metrics = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)?;
        let mut logs = Vec::new();
        while self.step < self.cfg.steps {
            let log = self.step_once()?;
            if log.step % self.cfg.log_every == 0 || log.step == self.cfg.steps {
                writeln!(metrics, "{}\t{:?}\t{:?}", log.step, log.loss, log.lr)?;
            }
            if self.cfg.checkpoint_every > 0
                && log.step % self.cfg.checkpoint_every == 0
                && log.step != self.cfg.steps
            {
                self.save_checkpoint(&out_dir.join(format!("ckpt_{:06}.ntc", log.step)))?;
            }
            logs.push(log);
        }
        metrics.flush()?;
        self.save_checkpoint(&out_dir.join("ckpt_final.ntc"))?;
        Ok(logs)
    }
}
