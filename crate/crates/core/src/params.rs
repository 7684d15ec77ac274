//! Named parameter tensors and checkpoint serialization.
//!
//! A [`ParameterSet`] maps parameter names to tensors. Encoder-decoder
//! parameters live at the top level (`src_emb`, `enc_fwd.w_z`, ...); the
//! reconstructors own the `enc_rec.` and `dec_rec.` namespaces. There is one
//! physical tensor per name, so the reconstructors sharing `src_emb` with the
//! encoder is a property of the container, not a convention.
//!
//! Checkpoint byte layout (version 1, all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "DPNMTCKP"
//! version u32      1
//! count   u32      number of entries
//! entry   repeated, sorted by name:
//!   name_len u32, name bytes (UTF-8)
//!   ndim u32, dims ndim x u64
//!   data numel x f64 (IEEE-754 bit patterns, little end first)
//! ```
//!
//! Round trips are bit-exact: values are written as raw bit patterns and the
//! sorted entry order makes the encoding canonical.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::rng::Rng;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DPNMTCKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParams(vec![name.to_string()]))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParams(vec![name.to_string()]))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Initialize `shape` uniformly in [-scale, scale]. Draws are made in
    /// call order, so builders must register parameters in a fixed order.
    pub fn init_uniform(&mut self, name: &str, shape: Vec<usize>, scale: f64, rng: &mut Rng) {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.uniform(-scale, scale)).collect();
        self.insert(name, Tensor::new(shape, data).expect("init shape"));
    }

    /// Names under a `prefix.` namespace.
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a String> {
        self.tensors.keys().filter(move |k| k.starts_with(prefix))
    }

    /// Apply a gradient step `param += scale * grad` for every named gradient.
    pub fn add_scaled(&mut self, grads: &Gradients, scale: f64) -> Result<()> {
        for (name, grad) in grads.iter() {
            let tensor = self.get_mut(name)?;
            for (p, g) in tensor.data_mut().iter_mut().zip(grad.data()) {
                *p += scale * g;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut file)
    }

    pub fn write(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.tensors {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
            for &dim in tensor.shape() {
                out.write_all(&(dim as u64).to_le_bytes())?;
            }
            for &v in tensor.data() {
                out.write_all(&v.to_bits().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read(&mut file)
    }

    pub fn read(input: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::data("not a checkpoint file (bad magic)"));
        }
        let version = read_u32(input)?;
        if version != VERSION {
            return Err(Error::data(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(input)? as usize;
        let mut set = ParameterSet::new();
        for _ in 0..count {
            let name_len = read_u32(input)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            input.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::data("checkpoint entry name is not UTF-8"))?;
            let ndim = read_u32(input)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut buf = [0u8; 8];
                input.read_exact(&mut buf)?;
                shape.push(u64::from_le_bytes(buf) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut buf = [0u8; 8];
                input.read_exact(&mut buf)?;
                data.push(f64::from_bits(u64::from_le_bytes(buf)));
            }
            set.insert(name, Tensor::new(shape, data)?);
        }
        Ok(set)
    }
}

fn read_u32(input: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set() -> ParameterSet {
        let mut set = ParameterSet::new();
        set.insert("b", Tensor::vector(vec![1.5, -0.0, f64::MIN_POSITIVE]));
        set.insert("a.w", Tensor::matrix(2, 2, vec![0.1, 1e300, -3.7, 42.0]).unwrap());
        set
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let set = sample_set();
        let mut bytes = Vec::new();
        set.write(&mut bytes).unwrap();
        let loaded = ParameterSet::read(&mut bytes.as_slice()).unwrap();
        for (name, tensor) in set.iter() {
            let other = loaded.get(name).unwrap();
            assert_eq!(tensor.shape(), other.shape());
            for (x, y) in tensor.data().iter().zip(other.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn encoding_is_canonical() {
        let set = sample_set();
        let mut a = Vec::new();
        let mut b = Vec::new();
        set.write(&mut a).unwrap();
        set.write(&mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_magic_rejected() {
        let bytes = b"NOTACKPT\x01\x00\x00\x00\x00\x00\x00\x00".to_vec();
        assert!(ParameterSet::read(&mut bytes.as_slice()).is_err());
    }

    #[test]
    fn missing_param_lists_name() {
        let set = sample_set();
        let err = set.get("nope").unwrap_err();
        assert!(err.to_string().contains("nope"));
    }
}
