//! The frozen-style DiT backbone: patch tokenizer, toy text encoder,
//! timestep embedding and adaLN-modulated self-attention blocks over the
//! concatenated text+video token sequence.

use super::config::ModelConfig;
use super::params::BoundParams;
use crate::data::PAD_ID;
use crate::error::{Error, Result};
use crate::tensor::{BoolMask, Scalar, Tape, Tensor, Var};

/// Row layout of the working token sequence: text tokens first, then the
/// generated-video tokens in frame-major order, then any appended
/// conditioning tokens (treated as VIDEO for modulation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub text_len: usize,
    pub frames: usize,
    pub per_frame: usize,
    pub extra_video: usize,
}

impl TokenLayout {
    pub fn video_len(&self) -> usize {
        self.frames * self.per_frame
    }

    pub fn total(&self) -> usize {
        self.text_len + self.video_len() + self.extra_video
    }

    /// Frame index of a generated-video token row, or None for TEXT/extra.
    pub fn frame_of(&self, row: usize) -> Option<usize> {
        if row < self.text_len || row >= self.text_len + self.video_len() {
            return None;
        }
        Some((row - self.text_len) / self.per_frame)
    }
}

// ---- linear helpers --------------------------------------------------------

/// x @ w (+ bias).
pub fn linear<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
) -> Result<Var> {
    let h = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add(h, b),
        None => Ok(h),
    }
}

/// Low-rank augmented projection: x @ w (+ bias) + scaling * ((x @ a) @ b).
/// With `b` at zero this is bit-exactly the frozen projection.
pub fn linear_lora<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    bias: Option<Var>,
    lora: Option<(Var, Var, f64)>,
) -> Result<Var> {
    let base = linear(tape, x, w, bias)?;
    match lora {
        Some((a, b, scaling)) => {
            let xa = tape.matmul(x, a)?;
            let xab = tape.matmul(xa, b)?;
            let scaled = tape.scale(xab, scaling);
            tape.add(base, scaled)
        }
        None => Ok(base),
    }
}

/// Layer norm followed by a learned elementwise affine.
pub fn ln_affine<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
) -> Result<Var> {
    let n = tape.layer_norm(x, LN_EPS)?;
    let scaled = tape.mul(n, gamma)?;
    tape.add(scaled, beta)
}

pub const LN_EPS: f64 = 1e-5;

/// adaLN modulation: x * (1 + scale) + shift, with [1, d] scale/shift rows
/// broadcasting over tokens.
pub fn modulate<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    shift: Var,
    scale: Var,
) -> Result<Var> {
    let one = tape.scalar(T::one());
    let gain = tape.add(scale, one)?;
    let scaled = tape.mul(x, gain)?;
    tape.add(scaled, shift)
}

// ---- attention -------------------------------------------------------------

/// Projection handles for one attention operation.
#[derive(Debug, Clone, Copy)]
pub struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bq: Option<Var>,
    pub bk: Option<Var>,
    pub bv: Option<Var>,
    pub bo: Option<Var>,
    pub lora_q: Option<(Var, Var, f64)>,
    pub lora_k: Option<(Var, Var, f64)>,
    pub lora_v: Option<(Var, Var, f64)>,
    pub lora_o: Option<(Var, Var, f64)>,
}

impl AttnVars {
    pub fn plain(wq: Var, wk: Var, wv: Var, wo: Var) -> Self {
        Self {
            wq,
            wk,
            wv,
            wo,
            bq: None,
            bk: None,
            bv: None,
            bo: None,
            lora_q: None,
            lora_k: None,
            lora_v: None,
            lora_o: None,
        }
    }
}

/// Multi-head attention: queries from `q_in` [nq, d], keys/values from
/// `kv_in` [m, d]; `mask` (allow = true) must broadcast to [nq, m].
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q_in: Var,
    kv_in: Var,
    mask: Option<&BoolMask>,
    vars: &AttnVars,
    heads: usize,
) -> Result<Var> {
    let nq = tape.shape(q_in)[0];
    let m = tape.shape(kv_in)[0];
    let d = tape.shape(q_in)[1];
    if d % heads != 0 {
        return Err(Error::Shape(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;

    let q = linear_lora(tape, q_in, vars.wq, vars.bq, vars.lora_q)?;
    let k = linear_lora(tape, kv_in, vars.wk, vars.bk, vars.lora_k)?;
    let v = linear_lora(tape, kv_in, vars.wv, vars.bv, vars.lora_v)?;

    let q = tape.reshape(q, &[nq, heads, dh])?;
    let q = tape.permute(q, &[1, 0, 2])?;
    let k = tape.reshape(k, &[m, heads, dh])?;
    let k = tape.permute(k, &[1, 2, 0])?; // [heads, dh, m]
    let v = tape.reshape(v, &[m, heads, dh])?;
    let v = tape.permute(v, &[1, 0, 2])?;

    let scores = tape.matmul(q, k)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let probs = tape.masked_softmax(scores, mask)?;
    let ctx = tape.matmul(probs, v)?; // [heads, nq, dh]
    let ctx = tape.permute(ctx, &[1, 0, 2])?;
    let ctx = tape.reshape(ctx, &[nq, d])?;
    linear_lora(tape, ctx, vars.wo, vars.bo, vars.lora_o)
}

// ---- embeddings ------------------------------------------------------------

/// Interleaved sinusoidal features of a timestep: [sin(w_0 t), cos(w_0 t),
/// sin(w_1 t), ...] with geometrically decreasing frequencies. t = 0 gives
/// the [0, 1, 0, 1, ...] pattern.
pub fn timestep_sinusoid(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (10_000.0f64).powf(-(i as f64) / half as f64);
        let angle = t as f64 * freq;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    if dim % 2 == 1 {
        out.push(0.0);
    }
    out
}

/// Sinusoidal features passed through a 2-layer MLP; returns a [1, d] row.
pub fn timestep_embedding<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    t: usize,
    cfg: &ModelConfig,
) -> Result<Var> {
    let sin = Tensor::from_f64_slice(&[1, cfg.dim], &timestep_sinusoid(t, cfg.dim))?;
    let sin = tape.constant(sin);
    let h = linear(tape, sin, bound.var("base.time.w1"), Some(bound.var("base.time.b1")))?;
    let h = tape.gelu(h);
    linear(tape, h, bound.var("base.time.w2"), Some(bound.var("base.time.b2")))
}

/// Pads or truncates ids to the configured text length.
pub fn pad_ids(prompt_ids: &[u32], text_len: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = prompt_ids.iter().map(|&id| id as usize).collect();
    ids.truncate(text_len);
    ids.resize(text_len, PAD_ID as usize);
    ids
}

/// Toy text encoder: embedding-table lookup plus learned positions.
pub fn embed_text<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    prompt_ids: &[u32],
    cfg: &ModelConfig,
) -> Result<Var> {
    for &id in prompt_ids {
        if id as usize >= cfg.vocab {
            return Err(Error::Vocab(format!("token id {id} out of vocab {}", cfg.vocab)));
        }
    }
    let ids = pad_ids(prompt_ids, cfg.text_len);
    let emb = tape.gather_rows(bound.var("base.text.embed"), &ids)?;
    tape.add(emb, bound.var("base.text.pos"))
}

// ---- patch tokenizer -------------------------------------------------------

/// [frames, C, H, W] -> [frames * p, C * patch^2], frame-major with row-major
/// patch order inside each frame, channel-major features inside each patch.
pub fn patchify<T: Scalar>(tape: &mut Tape<T>, video: Var, patch: usize) -> Result<Var> {
    let sh = tape.shape(video).to_vec();
    if sh.len() != 4 {
        return Err(Error::Shape(format!("patchify expects rank-4 video, got {sh:?}")));
    }
    let (f, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!("{h}x{w} not divisible by patch {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let x = tape.reshape(video, &[f, c, gh, patch, gw, patch])?;
    let x = tape.permute(x, &[0, 2, 4, 1, 3, 5])?;
    tape.reshape(x, &[f * gh * gw, c * patch * patch])
}

/// Inverse of `patchify`.
pub fn unpatchify<T: Scalar>(
    tape: &mut Tape<T>,
    tokens: Var,
    frames: usize,
    channels: usize,
    img_h: usize,
    img_w: usize,
    patch: usize,
) -> Result<Var> {
    let (gh, gw) = (img_h / patch, img_w / patch);
    let x = tape.reshape(tokens, &[frames, gh, gw, channels, patch, patch])?;
    let x = tape.permute(x, &[0, 3, 1, 4, 2, 5])?;
    tape.reshape(x, &[frames, channels, img_h, img_w])
}

// ---- transformer block -----------------------------------------------------

/// Parameter handles for one block.
pub struct BlockVars {
    pub attn: AttnVars,
    pub adaln_text_w: Var,
    pub adaln_text_b: Var,
    pub adaln_video_w: Var,
    pub adaln_video_b: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
}

/// Fetches block handles; LoRA triples are attached when the store carries
/// them and `lora_scaling` is set.
pub fn fetch_block_vars(
    bound: &BoundParams,
    layer: usize,
    lora_scaling: Option<f64>,
) -> BlockVars {
    let p = format!("base.block{layer:02}");
    let mut attn = AttnVars {
        wq: bound.var(&format!("{p}.attn.wq")),
        wk: bound.var(&format!("{p}.attn.wk")),
        wv: bound.var(&format!("{p}.attn.wv")),
        wo: bound.var(&format!("{p}.attn.wo")),
        bq: Some(bound.var(&format!("{p}.attn.bq"))),
        bk: Some(bound.var(&format!("{p}.attn.bk"))),
        bv: Some(bound.var(&format!("{p}.attn.bv"))),
        bo: Some(bound.var(&format!("{p}.attn.bo"))),
        lora_q: None,
        lora_k: None,
        lora_v: None,
        lora_o: None,
    };
    if let Some(scaling) = lora_scaling {
        let lp = format!("lora.block{layer:02}");
        let triple = |proj: &str| -> Option<(Var, Var, f64)> {
            Some((
                bound.try_var(&format!("{lp}.{proj}.a"))?,
                bound.try_var(&format!("{lp}.{proj}.b"))?,
                scaling,
            ))
        };
        attn.lora_q = triple("q");
        attn.lora_k = triple("k");
        attn.lora_v = triple("v");
        attn.lora_o = triple("o");
    }
    BlockVars {
        attn,
        adaln_text_w: bound.var(&format!("{p}.adaln.text.w")),
        adaln_text_b: bound.var(&format!("{p}.adaln.text.b")),
        adaln_video_w: bound.var(&format!("{p}.adaln.video.w")),
        adaln_video_b: bound.var(&format!("{p}.adaln.video.b")),
        ffn_w1: bound.var(&format!("{p}.ffn.w1")),
        ffn_b1: bound.var(&format!("{p}.ffn.b1")),
        ffn_w2: bound.var(&format!("{p}.ffn.w2")),
        ffn_b2: bound.var(&format!("{p}.ffn.b2")),
    }
}

/// Six [1, d] modulation rows (shift/scale/gate for attention, then for the
/// feed-forward branch) from the timestep embedding.
fn adaln_chunks<T: Scalar>(
    tape: &mut Tape<T>,
    t_emb: Var,
    w: Var,
    b: Var,
    d: usize,
) -> Result<[Var; 6]> {
    let all = linear(tape, t_emb, w, Some(b))?; // [1, 6d]
    let mut out = Vec::with_capacity(6);
    for i in 0..6 {
        out.push(tape.slice(all, 1, i * d, d)?);
    }
    Ok([out[0], out[1], out[2], out[3], out[4], out[5]])
}

/// Applies per-segment modulation (TEXT rows vs VIDEO rows get independent
/// shift/scale) to a normalized sequence, returning the modulated sequence
/// and the two gate rows for later use.
struct SegmentMod {
    modulated: Var,
    gate_text: Var,
    gate_video: Var,
}

fn segment_modulate<T: Scalar>(
    tape: &mut Tape<T>,
    normed: Var,
    layout: &TokenLayout,
    text_chunks: &[Var; 3],
    video_chunks: &[Var; 3],
) -> Result<SegmentMod> {
    let n = layout.total();
    let lt = layout.text_len;
    let text = tape.slice(normed, 0, 0, lt)?;
    let video = tape.slice(normed, 0, lt, n - lt)?;
    let text = modulate(tape, text, text_chunks[0], text_chunks[1])?;
    let video = modulate(tape, video, video_chunks[0], video_chunks[1])?;
    let modulated = tape.concat(&[text, video], 0)?;
    Ok(SegmentMod {
        modulated,
        gate_text: text_chunks[2],
        gate_video: video_chunks[2],
    })
}

/// Gates a residual branch per segment and adds it to the trunk.
fn gated_residual<T: Scalar>(
    tape: &mut Tape<T>,
    trunk: Var,
    branch: Var,
    layout: &TokenLayout,
    gate_text: Var,
    gate_video: Var,
) -> Result<Var> {
    let n = layout.total();
    let lt = layout.text_len;
    let bt = tape.slice(branch, 0, 0, lt)?;
    let bv = tape.slice(branch, 0, lt, n - lt)?;
    let bt = tape.mul(bt, gate_text)?;
    let bv = tape.mul(bv, gate_video)?;
    let gated = tape.concat(&[bt, bv], 0)?;
    tape.add(trunk, gated)
}

/// One DiT block:
///   h = z + gate_a * SelfAttn(modulate(LN(z))) [+ adapter residual]
///   out = h + gate_m * FFN(modulate(LN(h)))
/// Modulation is applied separately to TEXT and VIDEO rows. With zero
/// adaLN projections the block is exactly the identity.
///
/// `attn_extra_residual` joins at the self-attention residual junction; the
/// parallel adapter's scaled delta enters here. `self_attn_mask` exists for
/// structural tests only.
pub fn dit_block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var,
    t_emb: Var,
    layout: &TokenLayout,
    vars: &BlockVars,
    heads: usize,
    attn_extra_residual: Option<Var>,
    self_attn_mask: Option<&BoolMask>,
) -> Result<Var> {
    let d = tape.shape(z)[1];
    let tc = adaln_chunks(tape, t_emb, vars.adaln_text_w, vars.adaln_text_b, d)?;
    let vc = adaln_chunks(tape, t_emb, vars.adaln_video_w, vars.adaln_video_b, d)?;

    // attention branch
    let normed = tape.layer_norm(z, LN_EPS)?;
    let seg = segment_modulate(
        tape,
        normed,
        layout,
        &[tc[0], tc[1], tc[2]],
        &[vc[0], vc[1], vc[2]],
    )?;
    let attn = multi_head_attention(
        tape,
        seg.modulated,
        seg.modulated,
        self_attn_mask,
        &vars.attn,
        heads,
    )?;
    let mut h = gated_residual(tape, z, attn, layout, seg.gate_text, seg.gate_video)?;
    if let Some(extra) = attn_extra_residual {
        h = tape.add(h, extra)?;
    }

    // feed-forward branch
    let normed = tape.layer_norm(h, LN_EPS)?;
    let seg = segment_modulate(
        tape,
        normed,
        layout,
        &[tc[3], tc[4], tc[5]],
        &[vc[3], vc[4], vc[5]],
    )?;
    let f = linear(tape, seg.modulated, vars.ffn_w1, Some(vars.ffn_b1))?;
    let f = tape.gelu(f);
    let f = linear(tape, f, vars.ffn_w2, Some(vars.ffn_b2))?;
    gated_residual(tape, h, f, layout, seg.gate_text, seg.gate_video)
}

/// Final read-out: layer norm + modulation + linear head over the
/// generated-video rows only, then unpatchify back to pixel space.
pub fn final_head<T: Scalar>(
    tape: &mut Tape<T>,
    tokens: Var,
    t_emb: Var,
    layout: &TokenLayout,
    bound: &BoundParams,
    cfg: &ModelConfig,
) -> Result<Var> {
    let video = tape.slice(tokens, 0, layout.text_len, layout.video_len())?;
    let normed = tape.layer_norm(video, LN_EPS)?;
    let both = linear(
        tape,
        t_emb,
        bound.var("base.final.adaln.w"),
        Some(bound.var("base.final.adaln.b")),
    )?;
    let shift = tape.slice(both, 1, 0, cfg.dim)?;
    let scale = tape.slice(both, 1, cfg.dim, cfg.dim)?;
    let modded = modulate(tape, normed, shift, scale)?;
    let patches = linear(
        tape,
        modded,
        bound.var("base.final.head.w"),
        Some(bound.var("base.final.head.b")),
    )?;
    unpatchify(
        tape,
        patches,
        cfg.frames,
        cfg.channels,
        cfg.img_h,
        cfg.img_w,
        cfg.patch,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::{init_base, ParamStore};
    use crate::rng::Xoshiro256;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            depth: 1,
            dim: 8,
            heads: 2,
            patch: 2,
            frames: 2,
            img_h: 4,
            img_w: 4,
            channels: 1,
            text_len: 2,
            vocab: crate::data::Vocabulary::size(),
            t_max: 50,
        }
    }

    fn bound_store<T: Scalar>(
        cfg: &ModelConfig,
        seed: u64,
        tape: &mut Tape<T>,
    ) -> (ParamStore<T>, BoundParams) {
        let mut rng = Xoshiro256::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_base(cfg, &mut rng, &mut store);
        let bound = store.bind(tape, false);
        (store, bound)
    }

    #[test]
    fn patchify_round_trip_exact() {
        let mut rng = Xoshiro256::seed_from_u64(1);
        let video = Tensor::<f64>::fill_normal(&[3, 2, 8, 8], &mut rng);
        let mut tape = Tape::new();
        let v = tape.constant(video.clone());
        let tokens = patchify(&mut tape, v, 4).unwrap();
        assert_eq!(tape.shape(tokens), &[3 * 4, 2 * 16]);
        let back = unpatchify(&mut tape, tokens, 3, 2, 8, 8, 4).unwrap();
        assert_eq!(tape.value(back), &video);
    }

    #[test]
    fn patchify_order_matches_index_oracle() {
        // 2 frames, 1 channel, 4x4, patch 2 -> 8 tokens of 4 features
        let data: Vec<f64> = (0..32).map(|v| v as f64).collect();
        let video = Tensor::<f64>::new(vec![2, 1, 4, 4], data.clone()).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(video);
        let tokens = patchify(&mut tape, v, 2).unwrap();
        assert_eq!(tape.shape(tokens), &[8, 4]);
        // oracle: token (f, gy, gx), feature (c, py, px) indexes
        // video[f, c, gy*2+py, gx*2+px]
        for f in 0..2 {
            for gy in 0..2 {
                for gx in 0..2 {
                    let token = f * 4 + gy * 2 + gx;
                    for py in 0..2 {
                        for px in 0..2 {
                            let feat = py * 2 + px;
                            let want = data[f * 16 + (gy * 2 + py) * 4 + (gx * 2 + px)];
                            assert_eq!(
                                tape.value(tokens).at(&[token, feat]),
                                want,
                                "token {token} feat {feat}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn single_frame_single_patch_is_one_token() {
        let video = Tensor::<f64>::full(&[1, 1, 4, 4], 0.5);
        let mut tape = Tape::new();
        let v = tape.constant(video);
        let tokens = patchify(&mut tape, v, 4).unwrap();
        assert_eq!(tape.shape(tokens), &[1, 16]);
    }

    #[test]
    fn sinusoid_zero_pattern_and_distinctness() {
        let e0 = timestep_sinusoid(0, 64);
        for (i, &v) in e0.iter().enumerate() {
            if i % 2 == 0 {
                assert_eq!(v, 0.0);
            } else {
                assert_eq!(v, 1.0);
            }
        }
        // pairwise distinct over the full step range
        let mut seen: Vec<Vec<u64>> = Vec::with_capacity(1001);
        for t in 0..=1000 {
            let bits: Vec<u64> = timestep_sinusoid(t, 64)
                .iter()
                .map(|v| v.to_bits())
                .collect();
            assert!(!seen.contains(&bits), "duplicate sinusoid at t={t}");
            seen.push(bits);
        }
        assert_eq!(timestep_sinusoid(7, 64), timestep_sinusoid(7, 64));
    }

    #[test]
    fn embed_text_contracts() {
        let cfg = tiny_cfg();
        let mut tape = Tape::<f64>::new();
        let (_, bound) = bound_store(&cfg, 3, &mut tape);
        // empty id list embeds as all-PAD rows
        let empty = embed_text(&mut tape, &bound, &[], &cfg).unwrap();
        let pads = embed_text(&mut tape, &bound, &[PAD_ID, PAD_ID], &cfg).unwrap();
        assert_eq!(tape.value(empty), tape.value(pads));
        // determinism
        let a = embed_text(&mut tape, &bound, &[3, 4], &cfg).unwrap();
        let b = embed_text(&mut tape, &bound, &[3, 4], &cfg).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        // locality: ids differing at one slot differ only in that row
        let c = embed_text(&mut tape, &bound, &[3, 5], &cfg).unwrap();
        let av = tape.value(a).clone();
        let cv = tape.value(c).clone();
        for col in 0..cfg.dim {
            assert_eq!(av.at(&[0, col]), cv.at(&[0, col]));
        }
        let row1_differs = (0..cfg.dim).any(|col| av.at(&[1, col]) != cv.at(&[1, col]));
        assert!(row1_differs);
        // out-of-vocab id rejected
        assert!(embed_text(&mut tape, &bound, &[999], &cfg).is_err());
    }

    #[test]
    fn block_is_identity_at_adaln_zero_init() {
        let cfg = tiny_cfg();
        let mut tape = Tape::<f64>::new();
        let (_, bound) = bound_store(&cfg, 5, &mut tape);
        let layout = TokenLayout {
            text_len: cfg.text_len,
            frames: cfg.frames,
            per_frame: cfg.tokens_per_frame(),
            extra_video: 0,
        };
        let mut rng = Xoshiro256::seed_from_u64(9);
        let z = Tensor::<f64>::fill_normal(&[layout.total(), cfg.dim], &mut rng);
        let zv = tape.constant(z.clone());
        let t_emb = timestep_embedding(&mut tape, &bound, 10, &cfg).unwrap();
        let vars = fetch_block_vars(&bound, 0, None);
        let out = dit_block_forward(&mut tape, zv, t_emb, &layout, &vars, cfg.heads, None, None)
            .unwrap();
        assert_eq!(tape.value(out), &z, "fresh block must be the identity");
    }

    #[test]
    fn single_token_attention_returns_projected_v() {
        // one query token, softmax over a single position is 1, so the
        // context equals that token's value projection
        let mut tape = Tape::<f64>::new();
        let mut rng = Xoshiro256::seed_from_u64(11);
        let x = Tensor::<f64>::fill_normal(&[1, 4], &mut rng);
        let wq = tape.constant(Tensor::fill_normal(&[4, 4], &mut rng));
        let wk = tape.constant(Tensor::fill_normal(&[4, 4], &mut rng));
        let wv = tape.constant(Tensor::fill_normal(&[4, 4], &mut rng));
        // identity output projection isolates the context
        let eye = Tensor::from_f64_slice(
            &[4, 4],
            &[
                1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
            ],
        )
        .unwrap();
        let wo = tape.constant(eye);
        let xv = tape.constant(x.clone());
        let out = multi_head_attention(
            &mut tape,
            xv,
            xv,
            None,
            &AttnVars::plain(wq, wk, wv, wo),
            1,
        )
        .unwrap();
        let v_proj = tape.matmul(xv, wv).unwrap();
        assert!(tape.value(out).max_abs_diff(tape.value(v_proj)) < 1e-12);
    }

    #[test]
    fn block_matches_straight_line_oracle() {
        // independent recomposition in plain f64 loops, tiny geometry
        let cfg = tiny_cfg();
        let layout = TokenLayout {
            text_len: cfg.text_len,
            frames: cfg.frames,
            per_frame: cfg.tokens_per_frame(),
            extra_video: 0,
        };
        let n = layout.total();
        let d = cfg.dim;
        let mut rng = Xoshiro256::seed_from_u64(17);
        let mut store: ParamStore<f64> = ParamStore::new();
        init_base(&cfg, &mut rng, &mut store);
        // randomize the adaLN projections so the block is not the identity
        for seg in ["text", "video"] {
            let name = format!("base.block00.adaln.{seg}.w");
            let t = store.get_mut(&name).unwrap();
            *t = Tensor::fill_normal(&[d, 6 * d], &mut rng).map(|v| v * 0.2);
        }
        let z = Tensor::<f64>::fill_normal(&[n, d], &mut rng);

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let t_emb = timestep_embedding(&mut tape, &bound, 3, &cfg).unwrap();
        let vars = fetch_block_vars(&bound, 0, None);
        let got = dit_block_forward(&mut tape, zv, t_emb, &layout, &vars, cfg.heads, None, None)
            .unwrap();
        let got = tape.value(got).clone();
        let t_emb_val = tape.value(t_emb).clone();

        // ---- oracle ----
        let p = |name: &str| store.get(name).unwrap().data().to_vec();
        let matvec = |x: &[f64], w: &[f64], rows: usize, cols: usize| -> Vec<f64> {
            let mut out = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    out[c] += x[r] * w[r * cols + c];
                }
            }
            out
        };
        let ln = |row: &[f64]| -> Vec<f64> {
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
            row.iter()
                .map(|v| (v - mean) / (var + LN_EPS).sqrt())
                .collect()
        };
        let gelu1 = |x: f64| -> f64 {
            let c = 0.7978845608028654;
            0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
        };
        let mods = |seg: &str| -> Vec<f64> {
            let mut m = matvec(
                t_emb_val.data(),
                &p(&format!("base.block00.adaln.{seg}.w")),
                d,
                6 * d,
            );
            for (mi, bi) in m.iter_mut().zip(p(&format!("base.block00.adaln.{seg}.b"))) {
                *mi += bi;
            }
            m
        };
        let (mt, mv) = (mods("text"), mods("video"));
        let seg_mod = |row: usize, x: &[f64], off: usize| -> Vec<f64> {
            let m = if row < layout.text_len { &mt } else { &mv };
            (0..d)
                .map(|j| x[j] * (1.0 + m[off + d + j]) + m[off + j])
                .collect()
        };
        // attention branch
        let mut modded = vec![vec![0.0; d]; n];
        for (row, slot) in modded.iter_mut().enumerate() {
            let normed = ln(&z.data()[row * d..(row + 1) * d]);
            *slot = seg_mod(row, &normed, 0);
        }
        let heads = cfg.heads;
        let dh = d / heads;
        let proj_all = |rows: &[Vec<f64>], w: &str, b: &str| -> Vec<Vec<f64>> {
            let (w, b) = (p(w), p(b));
            rows.iter()
                .map(|r| {
                    let mut out = matvec(r, &w, d, d);
                    for (o, bv) in out.iter_mut().zip(&b) {
                        *o += bv;
                    }
                    out
                })
                .collect()
        };
        let q = proj_all(&modded, "base.block00.attn.wq", "base.block00.attn.bq");
        let k = proj_all(&modded, "base.block00.attn.wk", "base.block00.attn.bk");
        let v = proj_all(&modded, "base.block00.attn.wv", "base.block00.attn.bv");
        let mut ctx = vec![vec![0.0; d]; n];
        for head in 0..heads {
            let off = head * dh;
            for i in 0..n {
                let mut logits = vec![0.0; n];
                for (j, logit) in logits.iter_mut().enumerate() {
                    let dot: f64 = (0..dh).map(|e| q[i][off + e] * k[j][off + e]).sum();
                    *logit = dot / (dh as f64).sqrt();
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for e in 0..dh {
                    ctx[i][off + e] = (0..n).map(|j| exps[j] / sum * v[j][off + e]).sum();
                }
            }
        }
        let attn_out = proj_all(&ctx, "base.block00.attn.wo", "base.block00.attn.bo");
        let mut h = vec![vec![0.0; d]; n];
        for row in 0..n {
            let m = if row < layout.text_len { &mt } else { &mv };
            for j in 0..d {
                h[row][j] = z.data()[row * d + j] + m[2 * d + j] * attn_out[row][j];
            }
        }
        // feed-forward branch
        let (w1, b1) = (p("base.block00.ffn.w1"), p("base.block00.ffn.b1"));
        let (w2, b2) = (p("base.block00.ffn.w2"), p("base.block00.ffn.b2"));
        let mut expect = vec![vec![0.0; d]; n];
        for row in 0..n {
            let normed = ln(&h[row]);
            let mx = seg_mod(row, &normed, 3 * d);
            let mut f1 = matvec(&mx, &w1, d, 4 * d);
            for (fi, bi) in f1.iter_mut().zip(&b1) {
                *fi = gelu1(*fi + bi);
            }
            let mut f2 = matvec(&f1, &w2, 4 * d, d);
            for (fi, bi) in f2.iter_mut().zip(&b2) {
                *fi += bi;
            }
            let m = if row < layout.text_len { &mt } else { &mv };
            for j in 0..d {
                expect[row][j] = h[row][j] + m[5 * d + j] * f2[j];
            }
        }
        for row in 0..n {
            for j in 0..d {
                let want = expect[row][j];
                let have = got.at(&[row, j]);
                assert!(
                    (want - have).abs() < 1e-9,
                    "row {row} col {j}: oracle {want} vs block {have}"
                );
            }
        }
    }

    #[test]
    fn head_permutation_invariance() {
        // permuting per-head column groups of wq/wk/wv and the matching row
        // groups of wo leaves the attention output unchanged
        let mut rng = Xoshiro256::seed_from_u64(23);
        let (n, d, heads) = (5usize, 8usize, 2usize);
        let dh = d / heads;
        let x = Tensor::<f64>::fill_normal(&[n, d], &mut rng);
        let wq = Tensor::<f64>::fill_normal(&[d, d], &mut rng);
        let wk = Tensor::<f64>::fill_normal(&[d, d], &mut rng);
        let wv = Tensor::<f64>::fill_normal(&[d, d], &mut rng);
        let wo = Tensor::<f64>::fill_normal(&[d, d], &mut rng);

        let run = |wq: &Tensor<f64>, wk: &Tensor<f64>, wv: &Tensor<f64>, wo: &Tensor<f64>| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let vars = AttnVars::plain(
                tape.constant(wq.clone()),
                tape.constant(wk.clone()),
                tape.constant(wv.clone()),
                tape.constant(wo.clone()),
            );
            let out = multi_head_attention(&mut tape, xv, xv, None, &vars, heads).unwrap();
            tape.value(out).clone()
        };
        let base = run(&wq, &wk, &wv, &wo);

        // swap the two head groups
        let permute_cols = |w: &Tensor<f64>| -> Tensor<f64> {
            let mut out = w.clone();
            for r in 0..d {
                for c in 0..dh {
                    out.data_mut()[r * d + c] = w.data()[r * d + dh + c];
                    out.data_mut()[r * d + dh + c] = w.data()[r * d + c];
                }
            }
            out
        };
        let permute_rows = |w: &Tensor<f64>| -> Tensor<f64> {
            let mut out = w.clone();
            for r in 0..dh {
                for c in 0..d {
                    out.data_mut()[r * d + c] = w.data()[(r + dh) * d + c];
                    out.data_mut()[(r + dh) * d + c] = w.data()[r * d + c];
                }
            }
            out
        };
        let permuted = run(
            &permute_cols(&wq),
            &permute_cols(&wk),
            &permute_cols(&wv),
            &permute_rows(&wo),
        );
        assert!(base.max_abs_diff(&permuted) < 1e-12);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let layout = TokenLayout {
            text_len: cfg.text_len,
            frames: cfg.frames,
            per_frame: cfg.tokens_per_frame(),
            extra_video: 0,
        };
        let mut rng = Xoshiro256::seed_from_u64(29);
        let mut store: ParamStore<f64> = ParamStore::new();
        init_base(&cfg, &mut rng, &mut store);
        let z = Tensor::<f64>::fill_normal(&[layout.total(), cfg.dim], &mut rng);
        // probe a representative parameter of each kind through the block
        for target in [
            "base.block00.attn.wq",
            "base.block00.attn.bo",
            "base.block00.adaln.video.w",
            "base.block00.ffn.w1",
        ] {
            let current = store.get(target).unwrap().clone();
            let zero_shape = current.shape().to_vec();
            let report = crate::tensor::grad_check(
                |tape, vars| {
                    let mut patched = store.clone();
                    *patched.get_mut(target).unwrap() = Tensor::zeros(&zero_shape);
                    let bound = patched.bind(tape, false);
                    let zv = tape.constant(z.clone());
                    let t_emb = timestep_embedding(tape, &bound, 5, &cfg)?;
                    let mut bvars = fetch_block_vars(&bound, 0, None);
                    // rebind the probed tensor as the checked leaf
                    let leaf = vars[0];
                    match target {
                        "base.block00.attn.wq" => bvars.attn.wq = leaf,
                        "base.block00.attn.bo" => bvars.attn.bo = Some(leaf),
                        "base.block00.adaln.video.w" => bvars.adaln_video_w = leaf,
                        "base.block00.ffn.w1" => bvars.ffn_w1 = leaf,
                        _ => unreachable!(),
                    }
                    let out = dit_block_forward(
                        tape, zv, t_emb, &layout, &bvars, cfg.heads, None, None,
                    )?;
                    let sq = tape.mul(out, out)?;
                    Ok(tape.mean(sq))
                },
                &[current],
                1e-5,
                24,
            )
            .unwrap();
            assert!(
                report.max_rel_err() < 1e-4,
                "{target}: err {}",
                report.max_rel_err()
            );
        }
    }
}
