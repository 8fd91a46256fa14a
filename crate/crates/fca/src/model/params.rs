//! Named parameter tensors with a frozen/trainable partition, plus the
//! deterministic initializers for every parameter group.

use super::config::ModelConfig;
use crate::container::{entry_from_tensor, tensor_from_entry, Container};
use crate::error::{Error, Result};
use crate::rng::Xoshiro256;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use rand::Rng;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

/// Fine-tuning strategy; decides which parameter groups exist and which are
/// trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Train the bare backbone from scratch; this produces the frozen base.
    PretrainBase,
    /// Frozen base, trainable parallel cross-attention + frame-wise text
    /// conditioning modules.
    Fca,
    /// Frozen base, trainable low-rank updates on the attention projections.
    Lora,
    /// Everything trainable; diagnostic.
    Full,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::PretrainBase => "pretrain_base",
            TrainMode::Fca => "fca",
            TrainMode::Lora => "lora",
            TrainMode::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pretrain_base" => Ok(TrainMode::PretrainBase),
            "fca" => Ok(TrainMode::Fca),
            "lora" => Ok(TrainMode::Lora),
            "full" => Ok(TrainMode::Full),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

/// Frame-wise text conditioning wiring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FtcVariant {
    /// One module per transformer block (the default).
    LayerWise,
    /// A single module feeding every block.
    Uniform,
    /// A single module whose output is refined through the adapter layers.
    UniformR,
}

impl FtcVariant {
    pub fn name(self) -> &'static str {
        match self {
            FtcVariant::LayerWise => "layerwise",
            FtcVariant::Uniform => "uniform",
            FtcVariant::UniformR => "uniform_r",
        }
    }

    pub fn parse(s: &str) -> Result<Option<Self>> {
        match s {
            "layerwise" => Ok(Some(FtcVariant::LayerWise)),
            "uniform" => Ok(Some(FtcVariant::Uniform)),
            "uniform_r" => Ok(Some(FtcVariant::UniformR)),
            "none" => Ok(None),
            other => Err(Error::Config(format!("unknown ftc variant '{other}'"))),
        }
    }

    /// Number of module parameter sets for a depth-D model.
    pub fn module_count(self, depth: usize) -> usize {
        match self {
            FtcVariant::LayerWise => depth,
            FtcVariant::Uniform | FtcVariant::UniformR => 1,
        }
    }

    /// Module index feeding block `layer`.
    pub fn module_for_layer(self, layer: usize) -> usize {
        match self {
            FtcVariant::LayerWise => layer,
            FtcVariant::Uniform | FtcVariant::UniformR => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Frozen,
    Trainable,
}

#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub tensor: Tensor<T>,
    pub partition: Partition,
}

/// Named tensors in deterministic (sorted) order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    params: BTreeMap<String, Param<T>>,
}

/// Tape handles for every parameter of one forward pass.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        debug_assert!(
            !self.params.contains_key(&name),
            "duplicate parameter '{name}'"
        );
        self.params.insert(
            name,
            Param {
                tensor,
                partition: Partition::Frozen,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Contract(format!("unknown tensor name '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::Contract(format!("unknown tensor name '{name}'")))
    }

    pub fn partition_of(&self, name: &str) -> Result<Partition> {
        self.params
            .get(name)
            .map(|p| p.partition)
            .ok_or_else(|| Error::Contract(format!("unknown tensor name '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.partition == Partition::Trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn num_elements_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, p)| p.tensor.len())
            .sum()
    }

    pub fn trainable_elements(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.partition == Partition::Trainable)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Registers every parameter on a tape. Trainable parameters become
    /// gradient leaves when `with_grad` is set; frozen ones are always
    /// constants, so no gradient can ever reach them.
    pub fn bind(&self, tape: &mut Tape<T>, with_grad: bool) -> BoundParams {
        let mut vars = BTreeMap::new();
        for (name, p) in &self.params {
            let rg = with_grad && p.partition == Partition::Trainable;
            vars.insert(name.clone(), tape.leaf(p.tensor.clone(), rg));
        }
        BoundParams { vars }
    }

    /// SHA-256 over the frozen subset (names, shapes, raw bytes); used to
    /// verify bit-stability across training.
    pub fn frozen_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for (name, p) in &self.params {
            if p.partition != Partition::Frozen {
                continue;
            }
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for &dim in p.tensor.shape() {
                hasher.update((dim as u64).to_le_bytes());
            }
            for &v in p.tensor.data() {
                hasher.update(v.to_le_bytes_vec());
            }
        }
        hasher.finalize().into()
    }

    pub fn to_container(&self, step: u32, rng_state: [u64; 4], config: String) -> Container {
        let mut c = Container::new(step, rng_state, config);
        for (name, p) in &self.params {
            c.push(name.clone(), entry_from_tensor(&p.tensor));
        }
        c
    }

    /// Loads tensors whose names carry one of the `prefixes` (all when
    /// empty). Partitions must be re-derived with `freeze_partition`.
    pub fn from_container(container: &Container, prefixes: &[&str]) -> Result<Self> {
        let mut store = Self::new();
        for (name, entry) in &container.entries {
            if !prefixes.is_empty() && !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            store.insert(name.clone(), tensor_from_entry(entry)?);
        }
        Ok(store)
    }
}

/// Applies the frozen/trainable partition for a fine-tuning mode. Every
/// tensor must belong to a known group; the partition always covers 100% of
/// the store.
pub fn freeze_partition<T: Scalar>(store: &mut ParamStore<T>, mode: TrainMode) -> Result<()> {
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        let partition = if name.starts_with("ftcenc.") {
            Partition::Frozen
        } else if name.starts_with("base.") {
            match mode {
                TrainMode::PretrainBase | TrainMode::Full => Partition::Trainable,
                TrainMode::Fca | TrainMode::Lora => Partition::Frozen,
            }
        } else if name.starts_with("fca.") || name.starts_with("ftc.") {
            if mode == TrainMode::Fca {
                Partition::Trainable
            } else {
                Partition::Frozen
            }
        } else if name.starts_with("lora.") {
            if mode == TrainMode::Lora {
                Partition::Trainable
            } else {
                Partition::Frozen
            }
        } else {
            return Err(Error::Contract(format!("unknown tensor name '{name}'")));
        };
        store.params.get_mut(&name).unwrap().partition = partition;
    }
    Ok(())
}

// ---- initializers ----------------------------------------------------------

fn xavier<T: Scalar>(rng: &mut Xoshiro256, rows: usize, cols: usize) -> Tensor<T> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::from_f64(rng.random_range(-a..a)))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("xavier shape")
}

fn normal_02<T: Scalar>(rng: &mut Xoshiro256, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.02))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("normal shape")
}

/// Backbone parameters: toy text encoder, patch projection, positional
/// tables, timestep MLP, D blocks with adaLN-zero, final head.
pub fn init_base<T: Scalar>(cfg: &ModelConfig, rng: &mut Xoshiro256, store: &mut ParamStore<T>) {
    let d = cfg.dim;
    store.insert("base.text.embed", normal_02(rng, &[cfg.vocab, d]));
    store.insert("base.text.pos", normal_02(rng, &[cfg.text_len, d]));
    store.insert("base.video.proj.w", xavier(rng, cfg.patch_dim(), d));
    store.insert("base.video.proj.b", Tensor::zeros(&[d]));
    store.insert("base.video.pos", normal_02(rng, &[cfg.video_tokens(), d]));
    store.insert("base.time.w1", xavier(rng, d, d));
    store.insert("base.time.b1", Tensor::zeros(&[d]));
    store.insert("base.time.w2", xavier(rng, d, d));
    store.insert("base.time.b2", Tensor::zeros(&[d]));
    for i in 0..cfg.depth {
        let p = format!("base.block{i:02}");
        for proj in ["wq", "wk", "wv", "wo"] {
            store.insert(format!("{p}.attn.{proj}"), xavier::<T>(rng, d, d));
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            store.insert(format!("{p}.attn.{bias}"), Tensor::<T>::zeros(&[d]));
        }
        // adaLN-zero: modulation starts at identity, gates closed
        for seg in ["text", "video"] {
            store.insert(format!("{p}.adaln.{seg}.w"), Tensor::<T>::zeros(&[d, 6 * d]));
            store.insert(format!("{p}.adaln.{seg}.b"), Tensor::<T>::zeros(&[6 * d]));
        }
        store.insert(format!("{p}.ffn.w1"), xavier::<T>(rng, d, cfg.ffn_dim()));
        store.insert(format!("{p}.ffn.b1"), Tensor::<T>::zeros(&[cfg.ffn_dim()]));
        store.insert(format!("{p}.ffn.w2"), xavier::<T>(rng, cfg.ffn_dim(), d));
        store.insert(format!("{p}.ffn.b2"), Tensor::<T>::zeros(&[d]));
    }
    store.insert("base.final.adaln.w", Tensor::zeros(&[d, 2 * d]));
    store.insert("base.final.adaln.b", Tensor::zeros(&[2 * d]));
    store.insert("base.final.head.w", xavier(rng, d, cfg.patch_dim()));
    store.insert("base.final.head.b", Tensor::zeros(&[cfg.patch_dim()]));
}

/// Frozen stand-ins for the pre-trained text/vision encoders consumed by the
/// frame-wise text conditioning modules. Never trainable in any mode.
pub fn init_ftc_encoders<T: Scalar>(
    cfg: &ModelConfig,
    rng: &mut Xoshiro256,
    store: &mut ParamStore<T>,
) {
    let d = cfg.dim;
    store.insert("ftcenc.text.embed", normal_02(rng, &[cfg.vocab, d]));
    store.insert("ftcenc.vision.proj.w", xavier(rng, cfg.patch_dim(), d));
    store.insert("ftcenc.vision.proj.b", Tensor::zeros(&[d]));
    store.insert(
        "ftcenc.vision.pos",
        normal_02(rng, &[cfg.tokens_per_frame(), d]),
    );
}

/// Initial value of every adapter output scale.
pub const FCA_SCALE_INIT: f64 = 0.1;

/// Parallel cross-attention adapters, one per block, plus the frame-wise
/// text conditioning modules for the chosen variant.
pub fn init_fca<T: Scalar>(
    cfg: &ModelConfig,
    rng: &mut Xoshiro256,
    store: &mut ParamStore<T>,
    ftc: Option<FtcVariant>,
    scale_init: f64,
) {
    let d = cfg.dim;
    for i in 0..cfg.depth {
        let p = format!("fca.block{i:02}");
        store.insert(format!("{p}.ln.g"), Tensor::<T>::full(&[d], T::one()));
        store.insert(format!("{p}.ln.b"), Tensor::<T>::zeros(&[d]));
        for proj in ["wq", "wk", "wv", "wo"] {
            store.insert(format!("{p}.{proj}"), xavier::<T>(rng, d, d));
        }
        store.insert(
            format!("{p}.scale"),
            Tensor::<T>::full(&[1], T::from_f64(scale_init)),
        );
    }
    let Some(variant) = ftc else { return };
    for m in 0..variant.module_count(cfg.depth) {
        let p = format!("ftc.mod{m:02}");
        store.insert(format!("{p}.queries"), normal_02(rng, &[cfg.ftc_queries(), d]));
        store.insert(format!("{p}.txt.w"), xavier::<T>(rng, d, d));
        store.insert(format!("{p}.txt.b"), Tensor::<T>::zeros(&[d]));
        for ln in ["ln1", "ln2", "ln3"] {
            store.insert(format!("{p}.{ln}.g"), Tensor::<T>::full(&[d], T::one()));
            store.insert(format!("{p}.{ln}.b"), Tensor::<T>::zeros(&[d]));
        }
        for proj in ["wq", "wk", "wv", "wo"] {
            store.insert(format!("{p}.sa.{proj}"), xavier::<T>(rng, d, d));
            store.insert(format!("{p}.ca.{proj}"), xavier::<T>(rng, d, d));
        }
        store.insert(format!("{p}.ffn.w1"), xavier::<T>(rng, d, cfg.ffn_dim()));
        store.insert(format!("{p}.ffn.b1"), Tensor::<T>::zeros(&[cfg.ffn_dim()]));
        store.insert(format!("{p}.ffn.w2"), xavier::<T>(rng, cfg.ffn_dim(), d));
        store.insert(format!("{p}.ffn.b2"), Tensor::<T>::zeros(&[d]));
        store.insert(format!("{p}.out.w"), xavier::<T>(rng, d, d));
        store.insert(format!("{p}.out.b"), Tensor::<T>::zeros(&[d]));
        // timestep-conditioned pre-normalization, starts as plain layer norm
        store.insert(format!("{p}.prenorm.w"), Tensor::<T>::zeros(&[d, 2 * d]));
        store.insert(format!("{p}.prenorm.b"), Tensor::<T>::zeros(&[2 * d]));
    }
}

/// Low-rank updates on every attention projection of every block.
/// B starts at zero so the adapted model equals the base bit-exactly.
pub fn init_lora<T: Scalar>(
    cfg: &ModelConfig,
    rng: &mut Xoshiro256,
    store: &mut ParamStore<T>,
    rank: usize,
) -> Result<()> {
    let d = cfg.dim;
    if rank == 0 || rank > d {
        return Err(Error::Config(format!("lora rank {rank} outside [1, {d}]")));
    }
    for i in 0..cfg.depth {
        for proj in ["q", "k", "v", "o"] {
            let p = format!("lora.block{i:02}.{proj}");
            store.insert(format!("{p}.a"), normal_02::<T>(rng, &[d, rank]));
            store.insert(format!("{p}.b"), Tensor::<T>::zeros(&[rank, d]));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_store() -> ParamStore<f32> {
        let cfg = ModelConfig::desk_default();
        let mut rng = Xoshiro256::seed_from_u64(1);
        let mut store = ParamStore::new();
        init_base(&cfg, &mut rng, &mut store);
        init_ftc_encoders(&cfg, &mut rng, &mut store);
        init_fca(&cfg, &mut rng, &mut store, Some(FtcVariant::LayerWise), FCA_SCALE_INIT);
        init_lora(&cfg, &mut rng, &mut store, 8).unwrap();
        store
    }

    #[test]
    fn partition_covers_every_tensor() {
        let mut store = full_store();
        for mode in [TrainMode::Fca, TrainMode::Lora, TrainMode::Full] {
            freeze_partition(&mut store, mode).unwrap();
            let total = store.len();
            let tagged = store
                .iter()
                .filter(|(_, p)| {
                    matches!(p.partition, Partition::Frozen | Partition::Trainable)
                })
                .count();
            assert_eq!(total, tagged);
        }
    }

    #[test]
    fn fca_mode_trains_adapters_only() {
        let mut store = full_store();
        freeze_partition(&mut store, TrainMode::Fca).unwrap();
        for name in store.trainable_names() {
            assert!(
                name.starts_with("fca.") || name.starts_with("ftc."),
                "unexpected trainable '{name}'"
            );
        }
        assert!(store
            .trainable_names()
            .iter()
            .any(|n| n.ends_with(".scale")));
    }

    #[test]
    fn lora_mode_excludes_fca_params() {
        let mut store = full_store();
        freeze_partition(&mut store, TrainMode::Lora).unwrap();
        let names = store.trainable_names();
        assert!(!names.is_empty());
        for name in &names {
            assert!(name.starts_with("lora."), "unexpected trainable '{name}'");
        }
    }

    #[test]
    fn unknown_name_rejected_by_partition() {
        let mut store: ParamStore<f32> = ParamStore::new();
        store.insert("mystery.w", Tensor::zeros(&[2]));
        assert!(matches!(
            freeze_partition(&mut store, TrainMode::Fca),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn layerwise_counts_scale_with_depth_uniform_does_not() {
        let mut small = ModelConfig::desk_default();
        small.depth = 2;
        let mut big = ModelConfig::desk_default();
        big.depth = 4;
        let count = |cfg: &ModelConfig, variant: FtcVariant| {
            let mut rng = Xoshiro256::seed_from_u64(3);
            let mut store: ParamStore<f32> = ParamStore::new();
            init_fca(cfg, &mut rng, &mut store, Some(variant), FCA_SCALE_INIT);
            store.num_elements_with_prefix("ftc.")
        };
        let lw2 = count(&small, FtcVariant::LayerWise);
        let lw4 = count(&big, FtcVariant::LayerWise);
        assert_eq!(lw4, 2 * lw2);
        let u2 = count(&small, FtcVariant::Uniform);
        let u4 = count(&big, FtcVariant::Uniform);
        assert_eq!(u2, u4);
    }

    #[test]
    fn store_container_round_trip() {
        let store = full_store();
        let container = store.to_container(3, [9, 9, 9, 9], "x = 1\n".into());
        let bytes = container.to_bytes().unwrap();
        let back = crate::container::Container::from_bytes(&bytes).unwrap();
        let restored: ParamStore<f32> = ParamStore::from_container(&back, &[]).unwrap();
        assert_eq!(restored.len(), store.len());
        for (name, p) in store.iter() {
            assert_eq!(restored.get(name).unwrap(), &p.tensor, "{name}");
        }
    }

    #[test]
    fn frozen_hash_tracks_partition_and_content() {
        let mut store = full_store();
        freeze_partition(&mut store, TrainMode::Fca).unwrap();
        let h0 = store.frozen_hash();
        // mutating a trainable tensor leaves the frozen hash unchanged
        let name = store.trainable_names()[0].clone();
        store.get_mut(&name).unwrap().data_mut()[0] += 1.0;
        assert_eq!(h0, store.frozen_hash());
        // mutating a frozen tensor changes it
        store.get_mut("base.text.embed").unwrap().data_mut()[0] += 1.0;
        assert_ne!(h0, store.frozen_hash());
    }
}
