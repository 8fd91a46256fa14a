//! Noise schedule, forward noising, DDIM sampling and classifier-free
//! guidance. Pure tensor math over an immutable schedule; nothing here owns
//! parameters.

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Xoshiro256};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Per-step (alpha_t, sigma_t) pairs of the variance-preserving forward
/// process, indexed 0..=t_max. alpha_0 = 1, sigma_0 = 0.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_max: usize,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

/// Scaled-linear beta range: linear in sqrt(beta) from 1e-4 to 2e-2.
const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 2e-2;

/// Builds the schedule: beta_t scaled-linear over T steps, alpha_t and
/// sigma_t from the cumulative product of (1 - beta).
pub fn make_schedule(t_max: usize) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    let mut alpha = Vec::with_capacity(t_max + 1);
    let mut sigma = Vec::with_capacity(t_max + 1);
    alpha.push(1.0);
    sigma.push(0.0);
    let (s0, s1) = (BETA_START.sqrt(), BETA_END.sqrt());
    let mut alpha_bar = 1.0f64;
    for t in 1..=t_max {
        let frac = if t_max == 1 { 0.0 } else { (t - 1) as f64 / (t_max - 1) as f64 };
        let beta = (s0 + frac * (s1 - s0)).powi(2);
        alpha_bar *= 1.0 - beta;
        alpha.push(alpha_bar.sqrt());
        sigma.push((1.0 - alpha_bar).sqrt());
    }
    Ok(NoiseSchedule {
        t_max,
        alpha,
        sigma,
    })
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.t_max {
            return Err(Error::Contract(format!(
                "step {t} outside schedule range [0, {}]",
                self.t_max
            )));
        }
        Ok(())
    }
}

/// x_t = alpha_t * x0 + sigma_t * eps.
pub fn add_noise<T: Scalar>(
    x0: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "x0 {:?} vs eps {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    let a = T::from_f64(sched.alpha(t));
    let s = T::from_f64(sched.sigma(t));
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| a * x + s * e)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// One deterministic DDIM step: reconstruct x0-hat from the noise estimate,
/// then re-noise to t_prev. t_prev == t is the identity.
pub fn ddim_step<T: Scalar>(
    x_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    sched.check_t(t)?;
    if t_prev > t {
        return Err(Error::Contract(format!(
            "ddim_step requires t_prev <= t, got {t_prev} > {t}"
        )));
    }
    if x_t.shape() != eps_hat.shape() {
        return Err(Error::Shape(format!(
            "x_t {:?} vs eps_hat {:?}",
            x_t.shape(),
            eps_hat.shape()
        )));
    }
    let a_t = T::from_f64(sched.alpha(t));
    let s_t = T::from_f64(sched.sigma(t));
    let a_p = T::from_f64(sched.alpha(t_prev));
    let s_p = T::from_f64(sched.sigma(t_prev));
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&x, &e)| {
            let x0_hat = (x - s_t * e) / a_t;
            a_p * x0_hat + s_p * e
        })
        .collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

/// Classifier-free guidance: lambda * eps_cond + (1 - lambda) * eps_uncond.
pub fn cfg_combine<T: Scalar>(
    eps_cond: &Tensor<T>,
    eps_uncond: &Tensor<T>,
    lambda: f64,
) -> Result<Tensor<T>> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(Error::Shape(format!(
            "eps_cond {:?} vs eps_uncond {:?}",
            eps_cond.shape(),
            eps_uncond.shape()
        )));
    }
    let l = T::from_f64(lambda);
    let one_minus = T::one() - l;
    let data = eps_cond
        .data()
        .iter()
        .zip(eps_uncond.data())
        .map(|(&c, &u)| l * c + one_minus * u)
        .collect();
    Tensor::new(eps_cond.shape().to_vec(), data)
}

/// Mean squared error between a predicted-noise tape value and the drawn
/// noise, as a differentiable scalar: mean over every element.
pub fn mse_loss<T: Scalar>(tape: &mut Tape<T>, eps_hat: Var, eps: &Tensor<T>) -> Result<Var> {
    if tape.shape(eps_hat) != eps.shape() {
        return Err(Error::Shape(format!(
            "eps_hat {:?} vs eps {:?}",
            tape.shape(eps_hat),
            eps.shape()
        )));
    }
    let target = tape.constant(eps.clone());
    let diff = tape.sub(eps_hat, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Sampler configuration.
#[derive(Debug, Clone)]
pub struct GuidanceConfig {
    /// Guidance scale; 1.0 disables the unconditional branch entirely.
    pub lambda: f64,
    /// Number of DDIM steps.
    pub steps: usize,
    /// Token ids of the empty prompt, used for the unconditional branch.
    pub empty_prompt_ids: Vec<u32>,
}

/// A denoising model bound to fixed conditioning (prompt, initial frames,
/// extraction noise); called once per sampler step.
pub trait BoundDenoiser<T: Scalar> {
    fn predict(&self, x_t: &Tensor<T>, t: usize) -> Result<Tensor<T>>;
}

/// A denoising model that can bind conditioning for a sampling run.
pub trait Denoiser<T: Scalar> {
    /// Shape of the generated video, [frames, channels, height, width].
    fn video_shape(&self) -> Vec<usize>;

    /// Prepares per-prompt conditioning (e.g. initial-frame latents and
    /// frame-wise text embeddings). `extraction_seed` drives the one-step
    /// noising of the initial frames and is shared by both guidance branches.
    fn bind<'a>(
        &'a self,
        prompt_ids: &[u32],
        init_frames: &Tensor<T>,
        extraction_seed: u64,
    ) -> Result<Box<dyn BoundDenoiser<T> + 'a>>;
}

/// Uniformly spaced timesteps from t_max down to 0, endpoints included.
pub fn sampling_timesteps(t_max: usize, steps: usize) -> Vec<usize> {
    (0..=steps)
        .map(|i| ((t_max as f64) * (steps - i) as f64 / steps as f64).round() as usize)
        .collect()
}

/// Runs DDIM with classifier-free guidance. Deterministic in `seed`; the
/// unconditional branch replaces the prompt with the empty prompt but keeps
/// the same initial frames. Output is clamped to [-1, 1].
pub fn sample<T: Scalar, M: Denoiser<T>>(
    model: &M,
    sched: &NoiseSchedule,
    prompt_ids: &[u32],
    init_frames: &Tensor<T>,
    gcfg: &GuidanceConfig,
    seed: u64,
) -> Result<Tensor<T>> {
    if gcfg.steps == 0 || gcfg.steps > sched.t_max() {
        return Err(Error::Config(format!(
            "sampler steps {} outside [1, {}]",
            gcfg.steps,
            sched.t_max()
        )));
    }
    let extraction_seed = derive_seed(seed, 1);
    let cond = model.bind(prompt_ids, init_frames, extraction_seed)?;
    let uncond = if gcfg.lambda == 1.0 {
        None
    } else {
        Some(model.bind(&gcfg.empty_prompt_ids, init_frames, extraction_seed)?)
    };

    let mut rng = Xoshiro256::seed_from_u64(derive_seed(seed, 0));
    let mut x = Tensor::<T>::fill_normal(&model.video_shape(), &mut rng);
    let ts = sampling_timesteps(sched.t_max(), gcfg.steps);
    for w in ts.windows(2) {
        let (t, t_prev) = (w[0], w[1]);
        let eps_c = cond.predict(&x, t)?;
        let eps = match &uncond {
            Some(u) => cfg_combine(&eps_c, &u.predict(&x, t)?, gcfg.lambda)?,
            None => eps_c,
        };
        x = ddim_step(&x, &eps, t, t_prev, sched)?;
    }
    Ok(x.map(|v| v.max(-T::one()).min(T::one())))
}
