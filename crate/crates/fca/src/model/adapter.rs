//! The parallel conditioning adapter: per-layer cross-attention blocks whose
//! keys/values concatenate [text tokens; initial-frame latents; frame-wise
//! text embeddings], scaled by a learnable factor before rejoining the
//! frozen branch, plus the low-rank baseline adapter.

use super::backbone::{ln_affine, multi_head_attention, AttnVars};
use super::params::BoundParams;
use crate::error::{Error, Result};
use crate::tensor::{BoolMask, Scalar, Tape, Var};

/// Handles for one adapter layer.
#[derive(Debug, Clone, Copy)]
pub struct FcaLayerVars {
    pub ln_g: Var,
    pub ln_b: Var,
    pub attn: AttnVars,
    pub scale: Var,
}

pub fn fetch_fca_vars(bound: &BoundParams, layer: usize) -> Option<FcaLayerVars> {
    let p = format!("fca.block{layer:02}");
    Some(FcaLayerVars {
        ln_g: bound.try_var(&format!("{p}.ln.g"))?,
        ln_b: bound.try_var(&format!("{p}.ln.b"))?,
        attn: AttnVars::plain(
            bound.try_var(&format!("{p}.wq"))?,
            bound.try_var(&format!("{p}.wk"))?,
            bound.try_var(&format!("{p}.wv"))?,
            bound.try_var(&format!("{p}.wo"))?,
        ),
        scale: bound.try_var(&format!("{p}.scale"))?,
    })
}

/// Cross-attention of the working sequence into the conditioning bundle.
///
/// Queries come from the layer-normalized query sequence (the block input,
/// optionally with refined y_frames rows appended); keys and values from
/// `kv_bundle` = concat[y; x_init_i; y_frames_i]. The output has the query
/// sequence's shape, so it can be added back at the residual junction.
pub fn fca_cross_attention<T: Scalar>(
    tape: &mut Tape<T>,
    queries: Var,
    kv_bundle: Var,
    mask: &BoolMask,
    vars: &FcaLayerVars,
    heads: usize,
) -> Result<Var> {
    let nq = tape.shape(queries)[0];
    let m = tape.shape(kv_bundle)[0];
    if mask.shape != [nq, m] {
        return Err(Error::Mask(format!(
            "mask {:?} does not match queries {nq} x keys {m}",
            mask.shape
        )));
    }
    let normed = ln_affine(tape, queries, vars.ln_g, vars.ln_b)?;
    multi_head_attention(tape, normed, kv_bundle, Some(mask), &vars.attn, heads)
}

/// Joins the adapter output to the pre-trained branch's attention residual:
/// combined = attn_residual + scale * delta.
pub fn apply_adapter<T: Scalar>(
    tape: &mut Tape<T>,
    attn_residual: Var,
    delta: Var,
    scale: Var,
) -> Result<Var> {
    let scaled = tape.mul(delta, scale)?;
    tape.add(attn_residual, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::backbone::linear_lora;
    use crate::model::config::ModelConfig;
    use crate::model::ftc::build_framewise_mask;
    use crate::model::params::{init_fca, ParamStore};
    use crate::rng::Xoshiro256;
    use crate::tensor::{Tape, Tensor};

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

    fn fca_store(cfg: &ModelConfig, seed: u64) -> ParamStore<f64> {
        let mut rng = Xoshiro256::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_fca(cfg, &mut rng, &mut store, None, 0.1);
        store
    }

    #[test]
    fn mask_isolation_by_perturbation_is_exact() {
        // perturbing y_frames rows of frame q leaves delta rows of other
        // frames and TEXT rows bit-identical
        let cfg = tiny_cfg();
        let store = fca_store(&cfg, 1);
        let (lt, f, p) = (cfg.text_len, cfg.frames, cfg.tokens_per_frame());
        let kp = p; // one initial frame
        let fm = build_framewise_mask(lt, f, p, kp, false);
        let mut rng = Xoshiro256::seed_from_u64(2);
        let z = Tensor::<f64>::fill_normal(&[lt + f * p, cfg.dim], &mut rng);
        let y = Tensor::<f64>::fill_normal(&[lt, cfg.dim], &mut rng);
        let x_init = Tensor::<f64>::fill_normal(&[kp, cfg.dim], &mut rng);
        let y_frames = Tensor::<f64>::fill_normal(&[f * lt, cfg.dim], &mut rng);

        let run = |yf: &Tensor<f64>| -> Tensor<f64> {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, false);
            let vars = fetch_fca_vars(&bound, 0).unwrap();
            let zv = tape.constant(z.clone());
            let kv = {
                let yv = tape.constant(y.clone());
                let xi = tape.constant(x_init.clone());
                let yf = tape.constant(yf.clone());
                tape.concat(&[yv, xi, yf], 0).unwrap()
            };
            let delta =
                fca_cross_attention(&mut tape, zv, kv, &fm.masked, &vars, cfg.heads).unwrap();
            tape.value(delta).clone()
        };
        let base = run(&y_frames);
        // perturb frame 0 rows of y_frames
        let mut perturbed = y_frames.clone();
        for v in &mut perturbed.data_mut()[..lt * cfg.dim] {
            *v += 10.0;
        }
        let after = run(&perturbed);
        for row in 0..lt + f * p {
            let changed = (0..cfg.dim).any(|c| base.at(&[row, c]) != after.at(&[row, c]));
            let is_frame0_video = row >= lt && row < lt + p;
            if is_frame0_video {
                assert!(changed, "frame-0 video row {row} should react");
            } else {
                assert!(!changed, "row {row} must be bit-identical");
            }
        }
    }

    #[test]
    fn singleton_kv_bundle_broadcasts_its_value() {
        // a single key row makes every softmax a one-hot, so every delta
        // row equals that row's value projection
        let cfg = tiny_cfg();
        let store = fca_store(&cfg, 3);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let vars = fetch_fca_vars(&bound, 0).unwrap();
        let mut rng = Xoshiro256::seed_from_u64(4);
        let z = Tensor::<f64>::fill_normal(&[5, cfg.dim], &mut rng);
        let kv = Tensor::<f64>::fill_normal(&[1, cfg.dim], &mut rng);
        let zv = tape.constant(z);
        let kvv = tape.constant(kv);
        let mask = crate::tensor::BoolMask::all_allowed(&[5, 1]);
        let delta = fca_cross_attention(&mut tape, zv, kvv, &mask, &vars, cfg.heads).unwrap();
        let v = tape.matmul(kvv, vars.attn.wv).unwrap();
        let out_row = tape.matmul(v, vars.attn.wo).unwrap();
        let d = tape.value(delta).clone();
        let want = tape.value(out_row).clone();
        for row in 0..5 {
            for c in 0..cfg.dim {
                assert!((d.at(&[row, c]) - want.at(&[0, c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_attention_matches_primitive_recomposition() {
        // independent recomposition from raw tape primitives
        let cfg = tiny_cfg();
        let store = fca_store(&cfg, 5);
        let (lt, f, p) = (cfg.text_len, cfg.frames, cfg.tokens_per_frame());
        let fm = build_framewise_mask(lt, f, p, p, false);
        let mut rng = Xoshiro256::seed_from_u64(6);
        let z = Tensor::<f64>::fill_normal(&[lt + f * p, cfg.dim], &mut rng);
        let kv = Tensor::<f64>::fill_normal(&[lt + p + f * lt, cfg.dim], &mut rng);

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let vars = fetch_fca_vars(&bound, 0).unwrap();
        let zv = tape.constant(z.clone());
        let kvv = tape.constant(kv.clone());
        let got = fca_cross_attention(&mut tape, zv, kvv, &fm.masked, &vars, cfg.heads).unwrap();
        let got = tape.value(got).clone();

        let mut t2 = Tape::<f64>::new();
        let b2 = store.bind(&mut t2, false);
        let v2 = fetch_fca_vars(&b2, 0).unwrap();
        let (n, d, h) = (lt + f * p, cfg.dim, cfg.heads);
        let dh = d / h;
        let m = kv.shape()[0];
        let zv = t2.constant(z.clone());
        let kvv = t2.constant(kv.clone());
        let zn = t2.layer_norm(zv, crate::model::backbone::LN_EPS).unwrap();
        let zn = t2.mul(zn, v2.ln_g).unwrap();
        let zn = t2.add(zn, v2.ln_b).unwrap();
        let q = t2.matmul(zn, v2.attn.wq).unwrap();
        let k = t2.matmul(kvv, v2.attn.wk).unwrap();
        let vv = t2.matmul(kvv, v2.attn.wv).unwrap();
        // per-head loop with explicit slices instead of batched reshapes
        let mut head_outs = Vec::new();
        for head in 0..h {
            let qh = t2.slice(q, 1, head * dh, dh).unwrap();
            let kh = t2.slice(k, 1, head * dh, dh).unwrap();
            let vh = t2.slice(vv, 1, head * dh, dh).unwrap();
            let kt = t2.permute(kh, &[1, 0]).unwrap();
            let scores = t2.matmul(qh, kt).unwrap();
            let scores = t2.scale(scores, 1.0 / (dh as f64).sqrt());
            let probs = t2.masked_softmax(scores, Some(&fm.masked)).unwrap();
            head_outs.push(t2.matmul(probs, vh).unwrap());
        }
        let ctx = t2.concat(&head_outs, 1).unwrap();
        let want = t2.matmul(ctx, v2.attn.wo).unwrap();
        let want = t2.value(want).clone();
        assert_eq!(want.shape(), &[n, d]);
        let _ = m;
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn apply_adapter_scale_semantics() {
        let mut tape = Tape::<f64>::new();
        let residual = tape.constant(Tensor::zeros(&[2, 3]));
        let delta = tape.constant(Tensor::full(&[2, 3], 1.0));
        let zero = tape.constant(Tensor::scalar(0.0));
        let out = apply_adapter(&mut tape, residual, delta, zero).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
        let point_one = tape.constant(Tensor::scalar(0.1));
        let out = apply_adapter(&mut tape, residual, delta, point_one).unwrap();
        for &v in tape.value(out).data() {
            assert!((v - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn scale_gradient_matches_finite_differences() {
        let mut rng = Xoshiro256::seed_from_u64(7);
        let residual = Tensor::<f64>::fill_normal(&[3, 4], &mut rng);
        let delta = Tensor::<f64>::fill_normal(&[3, 4], &mut rng);
        let report = crate::tensor::grad_check(
            |tape, vars| {
                let r = tape.constant(residual.clone());
                let d = tape.constant(delta.clone());
                let combined = apply_adapter(tape, r, d, vars[0])?;
                let sq = tape.mul(combined, combined)?;
                Ok(tape.mean(sq))
            },
            &[Tensor::from_f64_slice(&[1], &[0.1]).unwrap()],
            1e-5,
            4,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-4);
    }

    #[test]
    fn lora_zero_b_is_bit_exact_base() {
        let mut rng = Xoshiro256::seed_from_u64(8);
        let x = Tensor::<f64>::fill_normal(&[5, 8], &mut rng);
        let w = Tensor::<f64>::fill_normal(&[8, 8], &mut rng);
        let a = Tensor::<f64>::fill_normal(&[8, 4], &mut rng);
        let b = Tensor::<f64>::zeros(&[4, 8]);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let wv = tape.constant(w);
        let av = tape.constant(a);
        let bv = tape.constant(b);
        let plain = tape.matmul(xv, wv).unwrap();
        let adapted = linear_lora(&mut tape, xv, wv, None, Some((av, bv, 1.0))).unwrap();
        // bit-exact equality, not approximate
        let p: Vec<u64> = tape.value(plain).data().iter().map(|v| v.to_bits()).collect();
        let q: Vec<u64> = tape.value(adapted).data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(p, q);
    }

    #[test]
    fn lora_full_rank_can_express_dense_update() {
        // with r = dim and A = I, B holds the dense delta exactly
        let d = 6usize;
        let mut rng = Xoshiro256::seed_from_u64(9);
        let x = Tensor::<f64>::fill_normal(&[3, d], &mut rng);
        let w = Tensor::<f64>::fill_normal(&[d, d], &mut rng);
        let delta = Tensor::<f64>::fill_normal(&[d, d], &mut rng);
        let mut eye = Tensor::<f64>::zeros(&[d, d]);
        for i in 0..d {
            eye.data_mut()[i * d + i] = 1.0;
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let wv = tape.constant(w.clone());
        let av = tape.constant(eye);
        let bv = tape.constant(delta.clone());
        let adapted = linear_lora(&mut tape, xv, wv, None, Some((av, bv, 1.0))).unwrap();
        // dense-reconstruction oracle: x @ (w + delta)
        let dense = Tensor::new(
            vec![d, d],
            w.data().iter().zip(delta.data()).map(|(&a, &b)| a + b).collect(),
        )
        .unwrap();
        let dv = tape.constant(dense);
        let want = tape.matmul(xv, dv).unwrap();
        assert!(tape.value(adapted).max_abs_diff(tape.value(want)) < 1e-12);
    }

    #[test]
    fn lora_random_ab_matches_dense_reconstruction() {
        let (din, dout, r) = (7usize, 5usize, 3usize);
        let scaling = 2.0 / r as f64;
        let mut rng = Xoshiro256::seed_from_u64(10);
        let x = Tensor::<f64>::fill_normal(&[4, din], &mut rng);
        let w = Tensor::<f64>::fill_normal(&[din, dout], &mut rng);
        let a = Tensor::<f64>::fill_normal(&[din, r], &mut rng);
        let b = Tensor::<f64>::fill_normal(&[r, dout], &mut rng);
        // dense oracle w + scaling * a.b computed with plain loops
        let mut dense = w.clone();
        for i in 0..din {
            for j in 0..dout {
                let mut acc = 0.0;
                for k in 0..r {
                    acc += a.data()[i * r + k] * b.data()[k * dout + j];
                }
                dense.data_mut()[i * dout + j] += scaling * acc;
            }
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let wv = tape.constant(w);
        let av = tape.constant(a);
        let bv = tape.constant(b);
        let adapted = linear_lora(&mut tape, xv, wv, None, Some((av, bv, scaling))).unwrap();
        let dv = tape.constant(dense);
        let want = tape.matmul(xv, dv).unwrap();
        assert!(tape.value(adapted).max_abs_diff(tape.value(want)) < 1e-12);
    }
}
