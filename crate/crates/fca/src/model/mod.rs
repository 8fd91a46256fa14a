//! Model assembly: the frozen-style backbone plus the optional conditioning
//! adapters, wired into a single noise-prediction forward pass.

pub mod adapter;
pub mod backbone;
pub mod config;
pub mod ftc;
pub mod params;

use crate::diffusion::{add_noise, make_schedule, BoundDenoiser, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::Xoshiro256;
use crate::tensor::{BoolMask, Scalar, Tape, Tensor, Var};
use adapter::{fca_cross_attention, fetch_fca_vars};
use backbone::{
    dit_block_forward, embed_text, fetch_block_vars, final_head, linear, patchify,
    timestep_embedding, TokenLayout,
};
use config::ModelConfig;
use ftc::{build_framewise_mask, encode_first_frame, ftc_forward, prenorm};
use params::{
    freeze_partition, init_base, init_fca, init_ftc_encoders, init_lora, BoundParams, FtcVariant,
    ParamStore, TrainMode,
};

/// Which adapter groups exist and how they are wired.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub mode: TrainMode,
    /// Frame-wise text conditioning variant; None disables the modules
    /// entirely (adapter keys/values carry text + initial-frame latents only).
    pub ftc: Option<FtcVariant>,
    /// Frame-wise identity mask on (off uses the fully-allowed variant).
    pub mask_on: bool,
    /// Timestep-conditioned pre-normalization of y_frames.
    pub prenorm_on: bool,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Initial value of the adapter output scales.
    pub scale_init: f64,
}

impl Architecture {
    pub fn base() -> Self {
        Self {
            mode: TrainMode::PretrainBase,
            ftc: None,
            mask_on: true,
            prenorm_on: true,
            lora_rank: 8,
            lora_alpha: 8.0,
            scale_init: params::FCA_SCALE_INIT,
        }
    }

    pub fn fca(ftc: Option<FtcVariant>) -> Self {
        Self {
            mode: TrainMode::Fca,
            ftc,
            ..Self::base()
        }
    }

    pub fn lora(rank: usize) -> Self {
        Self {
            mode: TrainMode::Lora,
            lora_rank: rank,
            lora_alpha: rank as f64,
            ..Self::base()
        }
    }

    pub fn lora_scaling(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    pub fn has_fca(&self) -> bool {
        self.mode == TrainMode::Fca
    }
}

/// Per-sample conditioning inputs for one forward pass.
#[derive(Debug, Clone)]
pub enum Conditioning<T: Scalar> {
    /// Text-only operation (pre-training, Full mode).
    None,
    /// Parallel-adapter conditioning.
    Fca(FcaConditioning<T>),
    /// Baseline wiring: initial frames appended to the token sequence.
    LoraAppend(Tensor<T>),
}

/// Initial-frame latents extracted by the frozen pass, plus the inputs the
/// frame-wise text conditioning modules need.
#[derive(Debug, Clone)]
pub struct FcaConditioning<T: Scalar> {
    /// Per-layer hidden states of the noised initial frames at the input of
    /// each block, restricted to VIDEO rows; [k*p, d] each, constants.
    pub x_init: Vec<Tensor<T>>,
    /// The first conditioning frame, [C, H, W].
    pub first_frame: Tensor<T>,
    /// Prompt fed to the frame-wise text conditioning modules.
    pub prompt_ids: Vec<u32>,
}

pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub arch: Architecture,
    pub store: ParamStore<T>,
    pub sched: NoiseSchedule,
}

impl<T: Scalar> Model<T> {
    /// Fresh backbone (plus the always-frozen conditioning encoders), ready
    /// for base pre-training.
    pub fn new_base(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Xoshiro256::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_base(&cfg, &mut rng, &mut store);
        init_ftc_encoders(&cfg, &mut rng, &mut store);
        let arch = Architecture::base();
        freeze_partition(&mut store, arch.mode)?;
        let sched = make_schedule(cfg.t_max)?;
        Ok(Self {
            cfg,
            arch,
            store,
            sched,
        })
    }

    /// Attaches fresh adapter parameters to an existing (pre-trained) store
    /// and re-partitions for the requested mode.
    pub fn with_adapters(
        cfg: ModelConfig,
        mut store: ParamStore<T>,
        arch: Architecture,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Xoshiro256::seed_from_u64(seed);
        match arch.mode {
            TrainMode::Fca => init_fca(&cfg, &mut rng, &mut store, arch.ftc, arch.scale_init),
            TrainMode::Lora => init_lora(&cfg, &mut rng, &mut store, arch.lora_rank)?,
            TrainMode::PretrainBase | TrainMode::Full => {}
        }
        freeze_partition(&mut store, arch.mode)?;
        let sched = make_schedule(cfg.t_max)?;
        let model = Self {
            cfg,
            arch,
            store,
            sched,
        };
        model.validate_store()?;
        Ok(model)
    }

    /// Rebuilds a model around an already-complete store (checkpoint load).
    pub fn from_store(
        cfg: ModelConfig,
        arch: Architecture,
        mut store: ParamStore<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        freeze_partition(&mut store, arch.mode)?;
        let sched = make_schedule(cfg.t_max)?;
        let model = Self {
            cfg,
            arch,
            store,
            sched,
        };
        model.validate_store()?;
        Ok(model)
    }

    fn validate_store(&self) -> Result<()> {
        let d = self.cfg.dim;
        let emb = self.store.get("base.text.embed")?;
        if emb.shape() != [self.cfg.vocab, d] {
            return Err(Error::Config(format!(
                "checkpoint/model mismatch: text table {:?} vs vocab {} width {}",
                emb.shape(),
                self.cfg.vocab,
                d
            )));
        }
        let pos = self.store.get("base.video.pos")?;
        if pos.shape() != [self.cfg.video_tokens(), d] {
            return Err(Error::Config(format!(
                "checkpoint/model mismatch: video positions {:?} vs {} tokens",
                pos.shape(),
                self.cfg.video_tokens()
            )));
        }
        if self.arch.mode == TrainMode::Fca {
            if self.cfg.depth > 0 {
                self.store.get("fca.block00.scale")?;
            }
            if let Some(variant) = self.arch.ftc {
                for m in 0..variant.module_count(self.cfg.depth) {
                    self.store.get(&format!("ftc.mod{m:02}.queries"))?;
                }
            }
        }
        Ok(())
    }

    /// Builds the per-sample conditioning for this architecture. For the
    /// adapter modes the initial frames must be [k, C, H, W] with k >= 1.
    pub fn prepare_conditioning(
        &self,
        prompt_ids: &[u32],
        init_frames: &Tensor<T>,
        extraction_seed: u64,
    ) -> Result<Conditioning<T>> {
        match self.arch.mode {
            TrainMode::PretrainBase | TrainMode::Full => Ok(Conditioning::None),
            TrainMode::Fca => {
                let x_init =
                    self.extract_init_latents(init_frames, prompt_ids, extraction_seed)?;
                let sh = init_frames.shape().to_vec();
                let per = sh[1] * sh[2] * sh[3];
                let first_frame = Tensor::new(
                    vec![sh[1], sh[2], sh[3]],
                    init_frames.data()[..per].to_vec(),
                )?;
                Ok(Conditioning::Fca(FcaConditioning {
                    x_init,
                    first_frame,
                    prompt_ids: prompt_ids.to_vec(),
                }))
            }
            TrainMode::Lora => {
                self.check_init_shape(init_frames)?;
                Ok(Conditioning::LoraAppend(init_frames.clone()))
            }
        }
    }

    fn check_init_shape(&self, init_frames: &Tensor<T>) -> Result<usize> {
        let sh = init_frames.shape();
        if sh.len() != 4
            || sh[0] == 0
            || sh[0] > self.cfg.frames
            || sh[1] != self.cfg.channels
            || sh[2] != self.cfg.img_h
            || sh[3] != self.cfg.img_w
        {
            return Err(Error::Shape(format!(
                "initial frames {:?} incompatible with video {:?}",
                sh,
                self.cfg.video_shape()
            )));
        }
        Ok(sh[0])
    }

    /// One-step-noises the initial frames, runs the frozen backbone, and
    /// records each block's input hidden state restricted to VIDEO rows.
    /// Entirely gradient-free: the result enters training as constants.
    pub fn extract_init_latents(
        &self,
        init_frames: &Tensor<T>,
        prompt_ids: &[u32],
        noise_seed: u64,
    ) -> Result<Vec<Tensor<T>>> {
        let k = self.check_init_shape(init_frames)?;
        let mut rng = Xoshiro256::seed_from_u64(noise_seed);
        let eps = Tensor::<T>::fill_normal(init_frames.shape(), &mut rng);
        let noised = add_noise(init_frames, &eps, 1, &self.sched)?;

        let p = self.cfg.tokens_per_frame();
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let y = embed_text(&mut tape, &bound, prompt_ids, &self.cfg)?;
        let v = tape.constant(noised);
        let patches = patchify(&mut tape, v, self.cfg.patch)?;
        let projected = linear(
            &mut tape,
            patches,
            bound.var("base.video.proj.w"),
            Some(bound.var("base.video.proj.b")),
        )?;
        let pos = tape.slice(bound.var("base.video.pos"), 0, 0, k * p)?;
        let tokens = tape.add(projected, pos)?;
        let mut z = tape.concat(&[y, tokens], 0)?;
        let layout = TokenLayout {
            text_len: self.cfg.text_len,
            frames: k,
            per_frame: p,
            extra_video: 0,
        };
        let t_emb = timestep_embedding(&mut tape, &bound, 1, &self.cfg)?;
        let mut latents = Vec::with_capacity(self.cfg.depth);
        for layer in 0..self.cfg.depth {
            let video_rows = tape.slice(z, 0, self.cfg.text_len, k * p)?;
            latents.push(tape.value(video_rows).clone());
            let vars = fetch_block_vars(&bound, layer, None);
            z = dit_block_forward(
                &mut tape,
                z,
                t_emb,
                &layout,
                &vars,
                self.cfg.heads,
                None,
                None,
            )?;
        }
        Ok(latents)
    }

    /// Full noise-prediction forward pass on a caller-owned tape.
    /// `bound` must come from `self.store.bind` on the same tape.
    pub fn eps_forward(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        x_t: &Tensor<T>,
        prompt_ids: &[u32],
        t: usize,
        cond: &Conditioning<T>,
    ) -> Result<Var> {
        if x_t.shape() != self.cfg.video_shape().as_slice() {
            return Err(Error::Shape(format!(
                "x_t {:?}, expected {:?}",
                x_t.shape(),
                self.cfg.video_shape()
            )));
        }
        if t > self.cfg.t_max {
            return Err(Error::Contract(format!("t {} > T {}", t, self.cfg.t_max)));
        }
        match (self.arch.mode, cond) {
            (TrainMode::Fca, Conditioning::Fca(_))
            | (TrainMode::Lora, Conditioning::LoraAppend(_))
            | (TrainMode::PretrainBase, Conditioning::None)
            | (TrainMode::Full, Conditioning::None) => {}
            (mode, _) => {
                return Err(Error::Contract(format!(
                    "conditioning does not match mode {mode:?} (adapter inputs missing?)"
                )))
            }
        }

        let cfg = &self.cfg;
        let (lt, f, p, d) = (cfg.text_len, cfg.frames, cfg.tokens_per_frame(), cfg.dim);

        let y = embed_text(tape, bound, prompt_ids, cfg)?;
        let xv = tape.constant(x_t.clone());
        let patches = patchify(tape, xv, cfg.patch)?;
        let projected = linear(
            tape,
            patches,
            bound.var("base.video.proj.w"),
            Some(bound.var("base.video.proj.b")),
        )?;
        let video_tokens = tape.add(projected, bound.var("base.video.pos"))?;

        let mut extra_video = 0usize;
        let mut parts = vec![y, video_tokens];
        if let Conditioning::LoraAppend(init) = cond {
            let k = self.check_init_shape(init)?;
            let iv = tape.constant(init.clone());
            let ipatches = patchify(tape, iv, cfg.patch)?;
            let iproj = linear(
                tape,
                ipatches,
                bound.var("base.video.proj.w"),
                Some(bound.var("base.video.proj.b")),
            )?;
            let ipos = tape.slice(bound.var("base.video.pos"), 0, 0, k * p)?;
            parts.push(tape.add(iproj, ipos)?);
            extra_video = k * p;
        }
        let mut z = tape.concat(&parts, 0)?;
        let layout = TokenLayout {
            text_len: lt,
            frames: f,
            per_frame: p,
            extra_video,
        };
        let t_emb = timestep_embedding(tape, bound, t, cfg)?;

        // adapter-side setup
        let fca_cond = match cond {
            Conditioning::Fca(c) => Some(c),
            _ => None,
        };
        let mut state = FcaForwardState::default();
        if let Some(c) = fca_cond {
            if c.x_init.len() != cfg.depth {
                return Err(Error::Contract(format!(
                    "{} extracted layers for depth {}",
                    c.x_init.len(),
                    cfg.depth
                )));
            }
            let kp = match c.x_init.first() {
                Some(first) => {
                    let sh = first.shape();
                    if sh.len() != 2 || sh[1] != d || sh[0] % p != 0 {
                        return Err(Error::Contract(format!(
                            "initial-frame latents {sh:?} do not tile {p}-token frames of width {d}"
                        )));
                    }
                    sh[0]
                }
                None => 0,
            };
            match self.arch.ftc {
                None => {
                    state.plain_mask = Some(no_ftc_mask(lt, f, p, kp));
                }
                Some(variant) => {
                    let vision = encode_first_frame(tape, bound, &c.first_frame, cfg)?;
                    state.vision = Some(vision);
                    let refine = variant == FtcVariant::UniformR;
                    state.framewise = Some(build_framewise_mask(lt, f, p, kp, refine));
                    if variant != FtcVariant::LayerWise {
                        let shared = ftc_forward(tape, bound, &c.prompt_ids, vision, 0, cfg)?;
                        if variant == FtcVariant::Uniform {
                            state.uniform_y = Some(shared);
                        } else {
                            state.refine_y = Some(shared);
                        }
                    }
                }
            }
        }

        for layer in 0..cfg.depth {
            let mut extra_residual = None;
            if let Some(c) = fca_cond {
                let vars = fetch_fca_vars(bound, layer).ok_or_else(|| {
                    Error::Contract(format!("adapter parameters missing for layer {layer}"))
                })?;
                let x_init_i = tape.constant(c.x_init[layer].clone());
                let mut kv_parts = vec![y, x_init_i];
                let mut q_src = z;
                let mut refine_rows = 0usize;
                if let Some(variant) = self.arch.ftc {
                    let y_frames_3d = match variant {
                        FtcVariant::LayerWise => {
                            let vision = state.vision.expect("vision tokens");
                            ftc_forward(tape, bound, &c.prompt_ids, vision, layer, cfg)?
                        }
                        FtcVariant::Uniform => state.uniform_y.expect("uniform y_frames"),
                        FtcVariant::UniformR => state.refine_y.expect("refined y_frames"),
                    };
                    let module = variant.module_for_layer(layer);
                    let normed = if self.arch.prenorm_on {
                        prenorm(tape, y_frames_3d, t_emb, module, bound, d)?
                    } else {
                        y_frames_3d
                    };
                    kv_parts.push(tape.reshape(normed, &[f * lt, d])?);
                    if variant == FtcVariant::UniformR {
                        let raw_flat = tape.reshape(y_frames_3d, &[f * lt, d])?;
                        q_src = tape.concat(&[z, raw_flat], 0)?;
                        refine_rows = f * lt;
                    }
                }
                let kv = tape.concat(&kv_parts, 0)?;
                let mask_ref = match (&state.plain_mask, &state.framewise) {
                    (Some(m), _) => m,
                    (None, Some(fm)) => fm.select(self.arch.mask_on),
                    _ => unreachable!("one mask source is always set"),
                };
                let delta = fca_cross_attention(tape, q_src, kv, mask_ref, &vars, cfg.heads)?;
                let delta_z = if refine_rows > 0 {
                    tape.slice(delta, 0, 0, layout.total())?
                } else {
                    delta
                };
                extra_residual = Some(tape.mul(delta_z, vars.scale)?);
                if refine_rows > 0 {
                    let delta_y = tape.slice(delta, 0, layout.total(), refine_rows)?;
                    let scaled = tape.mul(delta_y, vars.scale)?;
                    let current = state.refine_y.expect("refined y_frames");
                    let cur_flat = tape.reshape(current, &[f * lt, d])?;
                    let updated = tape.add(cur_flat, scaled)?;
                    state.refine_y = Some(tape.reshape(updated, &[f, lt, d])?);
                }
            }
            let lora = if self.arch.mode == TrainMode::Lora {
                Some(self.arch.lora_scaling())
            } else {
                None
            };
            let vars = fetch_block_vars(bound, layer, lora);
            z = dit_block_forward(
                tape,
                z,
                t_emb,
                &layout,
                &vars,
                cfg.heads,
                extra_residual,
                None,
            )?;
        }
        final_head(tape, z, t_emb, &layout, bound, cfg)
    }

    /// Gradient-free forward: returns the predicted noise as a plain tensor.
    pub fn eps_value(
        &self,
        x_t: &Tensor<T>,
        prompt_ids: &[u32],
        t: usize,
        cond: &Conditioning<T>,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let out = self.eps_forward(&mut tape, &bound, x_t, prompt_ids, t, cond)?;
        Ok(tape.value(out).clone())
    }
}

/// Per-forward adapter state.
#[derive(Default)]
struct FcaForwardState {
    /// Mask when no frame-wise text conditioning exists: everything allowed.
    plain_mask: Option<BoolMask>,
    framewise: Option<ftc::FramewiseMask>,
    vision: Option<Var>,
    uniform_y: Option<Var>,
    refine_y: Option<Var>,
}

fn no_ftc_mask(text_len: usize, frames: usize, per_frame: usize, init_tokens: usize) -> BoolMask {
    BoolMask::all_allowed(&[text_len + frames * per_frame, text_len + init_tokens])
}

impl<T: Scalar> Denoiser<T> for Model<T> {
    fn video_shape(&self) -> Vec<usize> {
        self.cfg.video_shape()
    }

    fn bind<'a>(
        &'a self,
        prompt_ids: &[u32],
        init_frames: &Tensor<T>,
        extraction_seed: u64,
    ) -> Result<Box<dyn BoundDenoiser<T> + 'a>> {
        let cond = self.prepare_conditioning(prompt_ids, init_frames, extraction_seed)?;
        Ok(Box::new(ModelBinding {
            model: self,
            prompt_ids: prompt_ids.to_vec(),
            cond,
        }))
    }
}

struct ModelBinding<'a, T: Scalar> {
    model: &'a Model<T>,
    prompt_ids: Vec<u32>,
    cond: Conditioning<T>,
}

impl<T: Scalar> BoundDenoiser<T> for ModelBinding<'_, T> {
    fn predict(&self, x_t: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self.model.eps_value(x_t, &self.prompt_ids, t, &self.cond)
    }
}
