//! Named-tensor binary container, shared by checkpoints and dataset exports.
//!
//! Layout (all integers little-endian):
//!   magic "NTC1"
//!   u32 entry count
//!   per entry: u16 name length, UTF-8 name, u8 dtype (0=f32, 1=f64, 2=u8),
//!              u8 ndim, ndim x u32 dims, raw little-endian payload
//!   u32 step
//!   4 x u64 RNG state words
//!   u32 config-blob length, UTF-8 config snapshot

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Scalar, Tensor};
use std::collections::BTreeSet;
use std::path::Path;

const MAGIC: &[u8; 4] = b"NTC1";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorEntry {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl TensorEntry {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorEntry::F32(_) => Dtype::F32,
            TensorEntry::F64(_) => Dtype::F64,
            TensorEntry::U8 { .. } => Dtype::U8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorEntry::F32(t) => t.shape(),
            TensorEntry::F64(t) => t.shape(),
            TensorEntry::U8 { shape, .. } => shape,
        }
    }

    pub fn as_f32(&self) -> Result<&Tensor<f32>> {
        match self {
            TensorEntry::F32(t) => Ok(t),
            other => Err(Error::Container(format!(
                "expected f32 tensor, found {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn as_f64(&self) -> Result<&Tensor<f64>> {
        match self {
            TensorEntry::F64(t) => Ok(t),
            other => Err(Error::Container(format!(
                "expected f64 tensor, found {:?}",
                other.dtype()
            ))),
        }
    }
}

pub fn entry_from_tensor<T: Scalar>(t: &Tensor<T>) -> TensorEntry {
    match T::DTYPE {
        Dtype::F32 => TensorEntry::F32(
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.as_f64() as f32).collect())
                .expect("same shape"),
        ),
        Dtype::F64 => TensorEntry::F64(
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.as_f64()).collect())
                .expect("same shape"),
        ),
        Dtype::U8 => unreachable!("no u8 scalar tensors"),
    }
}

pub fn tensor_from_entry<T: Scalar>(entry: &TensorEntry) -> Result<Tensor<T>> {
    let data: Vec<T> = match entry {
        TensorEntry::F32(t) => t.data().iter().map(|&v| T::from_f64(v as f64)).collect(),
        TensorEntry::F64(t) => t.data().iter().map(|&v| T::from_f64(v)).collect(),
        TensorEntry::U8 { .. } => {
            return Err(Error::Container("u8 entry is not a float tensor".into()))
        }
    };
    Tensor::new(entry.shape().to_vec(), data)
}

/// In-memory container. Entry order is preserved on disk, so writing the
/// same container twice yields byte-identical files.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub entries: Vec<(String, TensorEntry)>,
    pub step: u32,
    pub rng_state: [u64; 4],
    pub config: String,
}

impl Container {
    pub fn new(step: u32, rng_state: [u64; 4], config: String) -> Self {
        Self {
            entries: Vec::new(),
            step,
            rng_state,
            config,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, entry: TensorEntry) {
        self.entries.push((name.into(), entry));
    }

    pub fn get(&self, name: &str) -> Result<&TensorEntry> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| e)
            .ok_or_else(|| Error::Container(format!("missing tensor entry '{name}'")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = BTreeSet::new();
        for (name, _) in &self.entries {
            if !seen.insert(name.as_str()) {
                return Err(Error::Container(format!("duplicate tensor name '{name}'")));
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            let name_bytes = name.as_bytes();
            if name_bytes.len() > u16::MAX as usize {
                return Err(Error::Container(format!("tensor name too long: '{name}'")));
            }
            out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            out.extend_from_slice(name_bytes);
            out.push(entry.dtype().code());
            let shape = entry.shape();
            if shape.len() > u8::MAX as usize {
                return Err(Error::Container("tensor rank exceeds u8".into()));
            }
            out.push(shape.len() as u8);
            for &dim in shape {
                out.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            match entry {
                TensorEntry::F32(t) => {
                    for &v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                TensorEntry::F64(t) => {
                    for &v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                TensorEntry::U8 { data, .. } => out.extend_from_slice(data),
            }
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        for &w in &self.rng_state {
            out.extend_from_slice(&w.to_le_bytes());
        }
        let cfg = self.config.as_bytes();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Container(format!(
                "bad magic {:?}, expected {:?}",
                &magic[..4.min(magic.len())],
                MAGIC
            )));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        let mut seen = BTreeSet::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Container("tensor name is not UTF-8".into()))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::Container(format!("duplicate tensor name '{name}'")));
            }
            let dtype = Dtype::from_code(r.u8()?)?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let payload = r.take(n * dtype.elem_size())?;
            let entry = match dtype {
                Dtype::F32 => {
                    let data = payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    TensorEntry::F32(Tensor::new(shape, data)?)
                }
                Dtype::F64 => {
                    let data = payload
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    TensorEntry::F64(Tensor::new(shape, data)?)
                }
                Dtype::U8 => TensorEntry::U8 {
                    shape,
                    data: payload.to_vec(),
                },
            };
            entries.push((name, entry));
        }
        let step = r.u32()?;
        let mut rng_state = [0u64; 4];
        for w in &mut rng_state {
            *w = r.u64()?;
        }
        let cfg_len = r.u32()? as usize;
        let config = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|_| Error::Container("config blob is not UTF-8".into()))?
            .to_string();
        if r.pos != bytes.len() {
            return Err(Error::Container(format!(
                "{} trailing bytes after container end",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            entries,
            step,
            rng_state,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Container(format!(
                "truncated container: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Xoshiro256;

    fn sample_container() -> Container {
        let mut rng = Xoshiro256::seed_from_u64(12);
        let mut c = Container::new(17, [1, 2, 3, 4], "lr = 0.001\n".into());
        c.push("a.weight", TensorEntry::F32(Tensor::fill_normal(&[3, 4], &mut rng)));
        c.push("b.bias", TensorEntry::F64(Tensor::fill_normal(&[5], &mut rng)));
        c.push(
            "mask",
            TensorEntry::U8 {
                shape: vec![2, 2],
                data: vec![0, 1, 255, 7],
            },
        );
        c
    }

    #[test]
    fn round_trip_byte_identical() {
        let c = sample_container();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = sample_container().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            Container::from_bytes(&bytes),
            Err(Error::Container(_))
        ));
    }

    #[test]
    fn truncation_rejected_cleanly() {
        let bytes = sample_container().to_bytes().unwrap();
        for cut in [3usize, 9, 20, bytes.len() - 1] {
            let err = Container::from_bytes(&bytes[..cut]);
            assert!(err.is_err(), "cut at {cut} should fail");
        }
    }

    #[test]
    fn corrupted_length_field_is_structured_error() {
        let c = sample_container();
        let mut bytes = c.to_bytes().unwrap();
        // inflate the first name-length field beyond the file size
        bytes[8] = 0xff;
        bytes[9] = 0xff;
        match Container::from_bytes(&bytes) {
            Err(Error::Container(msg)) => assert!(msg.contains("truncated")),
            other => panic!("expected container error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut c = sample_container();
        c.push("a.weight", TensorEntry::U8 { shape: vec![1], data: vec![0] });
        assert!(c.to_bytes().is_err());
    }
}
