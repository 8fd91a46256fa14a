//! Frame-wise text conditioning: per-layer learnable-query modules that
//! infer per-frame text embeddings from the prompt and the first frame, the
//! frame-wise identity attention mask, and the timestep-conditioned
//! pre-normalization applied before the embeddings join the adapter's
//! key/value bundle.

use super::backbone::{linear, ln_affine, modulate, multi_head_attention, patchify, AttnVars};
use super::config::ModelConfig;
use super::params::BoundParams;
use crate::error::{Error, Result};
use crate::tensor::{BoolMask, Scalar, Tape, Tensor, Var};

/// Allow-mask over (adapter query rows) x (key bundle [y; x_init; y_frames]).
///
/// Key columns: text_len of y, then init_tokens of x_init, then
/// frames * text_len of y_frames in frame-major order.
#[derive(Debug, Clone)]
pub struct FramewiseMask {
    /// Frame-wise identity masking on the y_frames columns.
    pub masked: BoolMask,
    /// Fully-allowed variant of identical geometry (mask ablation).
    pub unmasked: BoolMask,
    pub text_len: usize,
    pub frames: usize,
    pub per_frame: usize,
    pub init_tokens: usize,
}

impl FramewiseMask {
    pub fn select(&self, mask_on: bool) -> &BoolMask {
        if mask_on {
            &self.masked
        } else {
            &self.unmasked
        }
    }
}

/// Builds the frame-wise mask.
///
/// Query rows: text_len TEXT rows, frames * per_frame VIDEO rows, and (when
/// `refine_queries` is set) frames * text_len rows for the y_frames tokens
/// riding along in the refined-uniform variant.
///
/// Rules: every query may attend to y and x_init; VIDEO (and refine) rows of
/// frame q may additionally attend to y_frames columns of frame q only; TEXT
/// rows never see y_frames.
pub fn build_framewise_mask(
    text_len: usize,
    frames: usize,
    per_frame: usize,
    init_tokens: usize,
    refine_queries: bool,
) -> FramewiseMask {
    let cols = text_len + init_tokens + frames * text_len;
    let mut rows = text_len + frames * per_frame;
    if refine_queries {
        rows += frames * text_len;
    }
    let mut masked = vec![false; rows * cols];
    let frame_of_row = |row: usize| -> Option<usize> {
        if row < text_len {
            None
        } else if row < text_len + frames * per_frame {
            Some((row - text_len) / per_frame)
        } else {
            Some((row - text_len - frames * per_frame) / text_len)
        }
    };
    for row in 0..rows {
        let base = row * cols;
        for col in 0..text_len + init_tokens {
            masked[base + col] = true;
        }
        if let Some(frame) = frame_of_row(row) {
            let start = text_len + init_tokens + frame * text_len;
            for col in start..start + text_len {
                masked[base + col] = true;
            }
        }
    }
    FramewiseMask {
        masked: BoolMask::new(vec![rows, cols], masked).expect("mask shape"),
        unmasked: BoolMask::all_allowed(&[rows, cols]),
        text_len,
        frames,
        per_frame,
        init_tokens,
    }
}

/// Frozen toy vision encoder: patchify + linear + positional embedding of
/// the first frame, [p, d] tokens.
pub fn encode_first_frame<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    first_frame: &Tensor<T>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let sh = first_frame.shape();
    if sh != [cfg.channels, cfg.img_h, cfg.img_w] {
        return Err(Error::Shape(format!(
            "first frame {:?}, expected [{}, {}, {}]",
            sh, cfg.channels, cfg.img_h, cfg.img_w
        )));
    }
    let reshaped = Tensor::new(
        vec![1, cfg.channels, cfg.img_h, cfg.img_w],
        first_frame.data().to_vec(),
    )?;
    let v = tape.constant(reshaped);
    let patches = patchify(tape, v, cfg.patch)?;
    let projected = linear(
        tape,
        patches,
        bound.var("ftcenc.vision.proj.w"),
        Some(bound.var("ftcenc.vision.proj.b")),
    )?;
    tape.add(projected, bound.var("ftcenc.vision.pos"))
}

fn attn_vars(bound: &BoundParams, prefix: &str) -> AttnVars {
    AttnVars::plain(
        bound.var(&format!("{prefix}.wq")),
        bound.var(&format!("{prefix}.wk")),
        bound.var(&format!("{prefix}.wv")),
        bound.var(&format!("{prefix}.wo")),
    )
}

/// One frame-wise text conditioning module: learnable queries concatenated
/// with projected text tokens, self-attention over the concatenation,
/// cross-attention of the query rows into the first-frame vision tokens, a
/// feed-forward block, then the query rows projected out as [f, l_t, d].
pub fn ftc_forward<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    prompt_ids: &[u32],
    vision_tokens: Var,
    module: usize,
    cfg: &ModelConfig,
) -> Result<Var> {
    let p = format!("ftc.mod{module:02}");
    if bound.try_var(&format!("{p}.queries")).is_none() {
        return Err(Error::Contract(format!(
            "frame-wise text conditioning module {module} does not exist"
        )));
    }
    let nq = cfg.ftc_queries();

    // text path: frozen embedding table + trainable projection
    let ids = super::backbone::pad_ids(prompt_ids, cfg.text_len);
    let text = tape.gather_rows(bound.var("ftcenc.text.embed"), &ids)?;
    let text = linear(
        tape,
        text,
        bound.var(&format!("{p}.txt.w")),
        Some(bound.var(&format!("{p}.txt.b"))),
    )?;

    let queries = bound.var(&format!("{p}.queries"));
    let rows = tape.concat(&[queries, text], 0)?;

    // self-attention over [queries; text]
    let normed = ln_affine(
        tape,
        rows,
        bound.var(&format!("{p}.ln1.g")),
        bound.var(&format!("{p}.ln1.b")),
    )?;
    let sa = multi_head_attention(
        tape,
        normed,
        normed,
        None,
        &attn_vars(bound, &format!("{p}.sa")),
        cfg.heads,
    )?;
    let rows = tape.add(rows, sa)?;

    // cross-attention: only the query rows look at the vision tokens
    let q_rows = tape.slice(rows, 0, 0, nq)?;
    let t_rows = tape.slice(rows, 0, nq, cfg.text_len)?;
    let q_norm = ln_affine(
        tape,
        q_rows,
        bound.var(&format!("{p}.ln2.g")),
        bound.var(&format!("{p}.ln2.b")),
    )?;
    let ca = multi_head_attention(
        tape,
        q_norm,
        vision_tokens,
        None,
        &attn_vars(bound, &format!("{p}.ca")),
        cfg.heads,
    )?;
    let q_rows = tape.add(q_rows, ca)?;
    let rows = tape.concat(&[q_rows, t_rows], 0)?;

    // feed-forward over all rows
    let normed = ln_affine(
        tape,
        rows,
        bound.var(&format!("{p}.ln3.g")),
        bound.var(&format!("{p}.ln3.b")),
    )?;
    let f = linear(
        tape,
        normed,
        bound.var(&format!("{p}.ffn.w1")),
        Some(bound.var(&format!("{p}.ffn.b1"))),
    )?;
    let f = tape.gelu(f);
    let f = linear(
        tape,
        f,
        bound.var(&format!("{p}.ffn.w2")),
        Some(bound.var(&format!("{p}.ffn.b2"))),
    )?;
    let rows = tape.add(rows, f)?;

    // project the query rows out
    let q_rows = tape.slice(rows, 0, 0, nq)?;
    let out = linear(
        tape,
        q_rows,
        bound.var(&format!("{p}.out.w")),
        Some(bound.var(&format!("{p}.out.b"))),
    )?;
    tape.reshape(out, &[cfg.frames, cfg.text_len, cfg.dim])
}

/// Timestep-conditioned pre-normalization of y_frames: layer norm, then a
/// scale/shift predicted from the timestep embedding. Zero-initialized
/// projections make this a plain layer norm at start.
pub fn prenorm<T: Scalar>(
    tape: &mut Tape<T>,
    y_frames: Var,
    t_emb: Var,
    module: usize,
    bound: &BoundParams,
    dim: usize,
) -> Result<Var> {
    let p = format!("ftc.mod{module:02}.prenorm");
    let normed = tape.layer_norm(y_frames, super::backbone::LN_EPS)?;
    let both = linear(tape, t_emb, bound.var(&format!("{p}.w")), Some(bound.var(&format!("{p}.b"))))?;
    let shift = tape.slice(both, 1, 0, dim)?;
    let scale = tape.slice(both, 1, dim, dim)?;
    modulate(tape, normed, shift, scale)
}
