//! Run configuration: one `key = value` per line, `#` comments, unknown keys
//! rejected. The same text form is embedded in checkpoints as the config
//! snapshot.

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::{FtcVariant, TrainMode};
use crate::model::Architecture;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulerKind {
    /// Linear warmup then cosine decay to zero, restarted `cycles` times.
    CosineWithRestart,
    /// Linear warmup then flat.
    Constant,
}

impl SchedulerKind {
    fn name(self) -> &'static str {
        match self {
            SchedulerKind::CosineWithRestart => "cosine_with_restart",
            SchedulerKind::Constant => "constant",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "cosine_with_restart" => Ok(SchedulerKind::CosineWithRestart),
            "constant" => Ok(SchedulerKind::Constant),
            other => Err(Error::Config(format!("unknown scheduler '{other}'"))),
        }
    }
}

/// Everything a training run needs; desk-scale defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Conditioning frame count k.
    pub init_frames: usize,
    pub data_seed: u64,
    pub train_samples: usize,

    pub mode: TrainMode,
    pub ftc: Option<FtcVariant>,
    pub mask_on: bool,
    pub prenorm_on: bool,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub scale_init: f64,

    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup: usize,
    pub scheduler: SchedulerKind,
    pub cycles: usize,
    pub seed: u64,
    pub log_every: usize,
    pub checkpoint_every: usize,
    /// Fraction of pre-training prompts replaced by the empty string so the
    /// unconditional guidance branch is in-distribution. Fine-tuning modes
    /// never drop conditions.
    pub pretrain_prompt_dropout: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk_default(),
            init_frames: 2,
            data_seed: 7,
            train_samples: 2000,
            mode: TrainMode::Fca,
            ftc: Some(FtcVariant::LayerWise),
            mask_on: true,
            prenorm_on: true,
            lora_rank: 8,
            lora_alpha: 8.0,
            scale_init: 0.1,
            steps: 5000,
            batch: 2,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.0,
            grad_clip: 1.0,
            warmup: 200,
            scheduler: SchedulerKind::CosineWithRestart,
            cycles: 1,
            seed: 1,
            log_every: 1,
            checkpoint_every: 1000,
            pretrain_prompt_dropout: 0.1,
        }
    }
}

impl RunConfig {
    pub fn architecture(&self) -> Architecture {
        Architecture {
            mode: self.mode,
            ftc: self.ftc,
            mask_on: self.mask_on,
            prenorm_on: self.prenorm_on,
            lora_rank: self.lora_rank,
            lora_alpha: self.lora_alpha,
            scale_init: self.scale_init,
        }
    }

    pub fn data_config(&self) -> crate::data::DataConfig {
        self.model.data_config(self.init_frames)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.init_frames == 0 || self.init_frames >= self.model.frames {
            return Err(Error::Config(format!(
                "init_frames {} must be in [1, frames)",
                self.init_frames
            )));
        }
        if self.batch == 0 || self.train_samples < self.batch {
            return Err(Error::Config(format!(
                "batch {} needs at least that many training samples ({})",
                self.batch, self.train_samples
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must be in [0, 1)".into()));
        }
        if self.cycles == 0 {
            return Err(Error::Config("cycles must be >= 1".into()));
        }
        Ok(())
    }

    /// Serializes in a fixed key order; `parse` inverts this exactly.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("depth", m.depth.to_string());
        kv("dim", m.dim.to_string());
        kv("heads", m.heads.to_string());
        kv("patch", m.patch.to_string());
        kv("frames", m.frames.to_string());
        kv("img_h", m.img_h.to_string());
        kv("img_w", m.img_w.to_string());
        kv("channels", m.channels.to_string());
        kv("text_len", m.text_len.to_string());
        kv("vocab", m.vocab.to_string());
        kv("t_max", m.t_max.to_string());
        kv("init_frames", self.init_frames.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("train_samples", self.train_samples.to_string());
        kv("mode", self.mode.name().to_string());
        kv("ftc", self.ftc.map_or("none", FtcVariant::name).to_string());
        kv("mask", if self.mask_on { "on" } else { "off" }.to_string());
        kv(
            "prenorm",
            if self.prenorm_on { "on" } else { "off" }.to_string(),
        );
        kv("lora_rank", self.lora_rank.to_string());
        kv("lora_alpha", format!("{:?}", self.lora_alpha));
        kv("scale_init", format!("{:?}", self.scale_init));
        kv("steps", self.steps.to_string());
        kv("batch", self.batch.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("beta1", format!("{:?}", self.beta1));
        kv("beta2", format!("{:?}", self.beta2));
        kv("weight_decay", format!("{:?}", self.weight_decay));
        kv("grad_clip", format!("{:?}", self.grad_clip));
        kv("warmup", self.warmup.to_string());
        kv("scheduler", self.scheduler.name().to_string());
        kv("cycles", self.cycles.to_string());
        kv("seed", self.seed.to_string());
        kv("log_every", self.log_every.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv(
            "pretrain_prompt_dropout",
            format!("{:?}", self.pretrain_prompt_dropout),
        );
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value '{v}' for key '{key}'")))
        }
        match key {
            "depth" => self.model.depth = num(key, value)?,
            "dim" => self.model.dim = num(key, value)?,
            "heads" => self.model.heads = num(key, value)?,
            "patch" => self.model.patch = num(key, value)?,
            "frames" => self.model.frames = num(key, value)?,
            "img_h" => self.model.img_h = num(key, value)?,
            "img_w" => self.model.img_w = num(key, value)?,
            "channels" => self.model.channels = num(key, value)?,
            "text_len" => self.model.text_len = num(key, value)?,
            "vocab" => self.model.vocab = num(key, value)?,
            "t_max" => self.model.t_max = num(key, value)?,
            "init_frames" => self.init_frames = num(key, value)?,
            "data_seed" => self.data_seed = num(key, value)?,
            "train_samples" => self.train_samples = num(key, value)?,
            "mode" => self.mode = TrainMode::parse(value)?,
            "ftc" => self.ftc = FtcVariant::parse(value)?,
            "mask" => self.mask_on = parse_switch(key, value)?,
            "prenorm" => self.prenorm_on = parse_switch(key, value)?,
            "lora_rank" => self.lora_rank = num(key, value)?,
            "lora_alpha" => self.lora_alpha = num(key, value)?,
            "scale_init" => self.scale_init = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "warmup" => self.warmup = num(key, value)?,
            "scheduler" => self.scheduler = SchedulerKind::parse(value)?,
            "cycles" => self.cycles = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "log_every" => self.log_every = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "pretrain_prompt_dropout" => self.pretrain_prompt_dropout = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }
}

fn parse_switch(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => Err(Error::Config(format!(
            "bad switch '{other}' for key '{key}'"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        let cfg = RunConfig {
            mode: TrainMode::Lora,
            ftc: None,
            lr: 3.5e-4,
            steps: 123,
            ..RunConfig::default()
        };
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let text = "# a comment\n\nsteps = 10\nbatch = 1  # trailing\ntrain_samples = 4\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.steps, 10);
        assert_eq!(cfg.batch, 1);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            RunConfig::parse("bogus_key = 3\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bad_values_rejected() {
        assert!(RunConfig::parse("steps = many\n").is_err());
        assert!(RunConfig::parse("mask = maybe\n").is_err());
        assert!(RunConfig::parse("steps 10\n").is_err());
    }

    #[test]
    fn defaults_mirror_training_recipe() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.beta1, 0.9);
        assert_eq!(cfg.beta2, 0.95);
        assert_eq!(cfg.lr, 1e-3);
        assert_eq!(cfg.warmup, 200);
        assert_eq!(cfg.grad_clip, 1.0);
        assert_eq!(cfg.scheduler, SchedulerKind::CosineWithRestart);
        assert_eq!(cfg.cycles, 1);
        cfg.validate().unwrap();
    }
}
