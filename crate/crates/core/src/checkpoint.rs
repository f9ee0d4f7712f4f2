//! Binary checkpoints of named, component-tagged `f32` tensors.
//!
//! ```text
//! magic "REINLAB1" | version u32 | tensor_count u32
//! per tensor: name_len u16 | name (UTF-8) | component u8 | ndim u8
//!             | dims u32 × ndim | data f32 × numel
//! ```
//!
//! All integers and floats are little-endian. Training metadata (including
//! the model config needed to rebuild the architecture) lives in a JSON
//! sidecar next to the binary file, `<path>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::SegModel;
use crate::params::Component;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"REINLAB1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub component: Component,
    pub tensor: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub version: u32,
    pub iteration: u64,
    pub seed: u64,
    /// Hex SHA-256 of the canonical JSON of `model`.
    pub config_hash: String,
    pub model: ModelConfig,
}

impl CheckpointMeta {
    pub fn new(model: ModelConfig, iteration: u64, seed: u64) -> Result<Self> {
        Ok(CheckpointMeta {
            version: VERSION,
            iteration,
            seed,
            config_hash: config_hash(&model)?,
            model,
        })
    }
}

pub fn config_hash(model: &ModelConfig) -> Result<String> {
    let json = serde_json::to_vec(model)?;
    Ok(Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    /// Snapshot of every model tensor, in parameter order.
    pub fn from_model(model: &SegModel<f32>, iteration: u64, seed: u64) -> Result<Self> {
        let tensors = model
            .params()
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                component: p.component,
                tensor: Tensor::new(p.tensor.shape().to_vec(), p.tensor.data().to_vec()).expect("valid shape"),
            })
            .collect();
        Ok(Checkpoint {
            meta: CheckpointMeta::new(model.config().clone(), iteration, seed)?,
            tensors,
        })
    }

    /// Rebuilds the model described by the metadata and loads every tensor.
    pub fn to_model(&self) -> Result<SegModel<f32>> {
        let mut model = SegModel::new(self.meta.model.clone(), self.meta.seed)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    /// Copies tensor values into `model`, which must hold exactly the same
    /// names, components and shapes.
    pub fn load_into(&self, model: &mut SegModel<f32>) -> Result<()> {
        let params = model.params_mut();
        if params.len() != self.tensors.len() {
            return Err(Error::Contract(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                params.len()
            )));
        }
        for t in &self.tensors {
            let id = params.id_of(&t.name).ok_or_else(|| Error::Tensor {
                name: t.name.clone(),
                msg: "not present in the model".into(),
            })?;
            if params.get(id).component != t.component {
                return Err(Error::Tensor {
                    name: t.name.clone(),
                    msg: format!("component {} but model expects {}", t.component, params.get(id).component),
                });
            }
            let dst = params.tensor_mut(id);
            if dst.shape() != t.tensor.shape() {
                return Err(Error::Tensor {
                    name: t.name.clone(),
                    msg: format!("shape {:?} but model expects {:?}", t.tensor.shape(), dst.shape()),
                });
            }
            dst.data_mut().copy_from_slice(t.tensor.data());
        }
        if self.meta.model.rein.precompute {
            model.enable_precompute()?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn filter<'a>(&'a self, components: &'a [Component]) -> impl Iterator<Item = &'a NamedTensor> + 'a {
        self.tensors.iter().filter(move |t| components.contains(&t.component))
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_tensors(&self.tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        fs::write(&side, serde_json::to_string_pretty(&self.meta)?).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let tensors = decode_tensors(&bytes, &path.display().to_string())?;
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        if meta.version != VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", meta.version)));
        }
        if meta.config_hash != config_hash(&meta.model)? {
            return Err(Error::Config(format!("{}: config hash does not match its config", side.display())));
        }
        Ok(Checkpoint { meta, tensors })
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Base backbone plus donor adapter and head. Every donor tensor that the
/// base also holds must agree in shape, and the backbones must have the
/// same layout.
pub fn swap_adapter(base: &Checkpoint, donor: &Checkpoint) -> Result<Checkpoint> {
    let backbone = [Component::Backbone];
    let base_bb: Vec<_> = base.filter(&backbone).collect();
    let donor_bb: Vec<_> = donor.filter(&backbone).collect();
    if base_bb.len() != donor_bb.len() {
        return Err(Error::Contract(format!(
            "backbones differ: {} vs {} tensors",
            base_bb.len(),
            donor_bb.len()
        )));
    }
    for (a, b) in base_bb.iter().zip(&donor_bb) {
        if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
            return Err(Error::Tensor {
                name: b.name.clone(),
                msg: format!("backbone layout {:?} vs base `{}` {:?}", b.tensor.shape(), a.name, a.tensor.shape()),
            });
        }
    }
    for t in donor.filter(&[Component::Adapter, Component::Head]) {
        if let Some(b) = base.get(&t.name) {
            if b.tensor.shape() != t.tensor.shape() {
                return Err(Error::Tensor {
                    name: t.name.clone(),
                    msg: format!("donor shape {:?} vs base {:?}", t.tensor.shape(), b.tensor.shape()),
                });
            }
        }
    }
    let mut bb = base_bb.into_iter();
    let tensors = donor
        .tensors
        .iter()
        .map(|t| match t.component {
            Component::Backbone => bb.next().expect("counted above").clone(),
            _ => t.clone(),
        })
        .collect();
    Ok(Checkpoint {
        meta: CheckpointMeta::new(donor.meta.model.clone(), donor.meta.iteration, donor.meta.seed)?,
        tensors,
    })
}

pub fn encode_tensors(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(t.component.tag());
        out.push(t.tensor.shape().len() as u8);
        for &d in t.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            file: self.file.into(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_tensors(bytes: &[u8], file: &str) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { bytes, pos: 0, file };
    if r.take(8, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return Err(r.err(format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let start = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| {
            let mut e = r.err("name is not UTF-8");
            if let Error::Parse { offset, .. } = &mut e {
                *offset = start as u64;
            }
            e
        })?;
        let tag = r.u8("component tag")?;
        let component = Component::from_tag(tag).ok_or_else(|| r.err(format!("unknown component tag {tag}")))?;
        let ndim = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d = r.u32("dimension")? as usize;
            if d == 0 {
                return Err(r.err(format!("tensor `{name}` has a zero dimension")));
            }
            shape.push(d);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| r.err("element count overflows"))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| r.err("size overflows"))?, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(NamedTensor {
            name: name.to_owned(),
            component,
            tensor: Tensor::new(shape, data)?,
        });
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<NamedTensor> {
        vec![
            NamedTensor {
                name: "backbone.w".into(),
                component: Component::Backbone,
                tensor: Tensor::new([2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e30, -7.25]).unwrap(),
            },
            NamedTensor {
                name: "head.b".into(),
                component: Component::Head,
                tensor: Tensor::scalar(0.5),
            },
        ]
    }

    #[test]
    fn layout_is_exact() {
        let bytes = encode_tensors(&sample()[1..]);
        let mut expected = b"REINLAB1".to_vec();
        expected.extend([1, 0, 0, 0, 1, 0, 0, 0, 6, 0]);
        expected.extend(b"head.b");
        expected.extend([2, 0]);
        expected.extend(0.5f32.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let bytes = encode_tensors(&sample());
        let back = decode_tensors(&bytes, "x").unwrap();
        assert_eq!(encode_tensors(&back), bytes);
        assert!(back[0].tensor.bits_eq(&sample()[0].tensor));
    }

    #[test]
    fn every_truncation_is_a_parse_error() {
        let bytes = encode_tensors(&sample());
        for n in 0..bytes.len() {
            assert!(
                matches!(decode_tensors(&bytes[..n], "x"), Err(Error::Parse { .. })),
                "prefix {n}"
            );
        }
    }

    #[test]
    fn trailing_bytes_and_bad_tags_rejected() {
        let mut bytes = encode_tensors(&sample());
        bytes.push(0);
        assert!(matches!(decode_tensors(&bytes, "x"), Err(Error::Parse { .. })));
        let mut bytes = encode_tensors(&sample()[1..]);
        bytes[8 + 4 + 4 + 2 + 6] = 9;
        assert!(matches!(decode_tensors(&bytes, "x"), Err(Error::Parse { offset: 25, .. })));
    }

    #[test]
    fn sidecar_sits_next_to_the_file() {
        assert_eq!(sidecar_path(Path::new("a/b.ckpt")), PathBuf::from("a/b.ckpt.json"));
    }
}
