//! Little-endian checkpoint container.
//!
//! ```text
//! magic "E3DC" | version u32 | arch hash [u8; 8] | descriptor len u32 | descriptor
//! has_adam u8 | [step u64 | lr f64 | beta1 f64 | beta2 f64 | epsilon f64]
//! tensor count u32 | per tensor: name len u32 | name | rank u32 | extents u64.. | f32 payload
//! ```
//!
//! The arch hash is the first 8 bytes of SHA-256 over the model descriptor.
//! Optimizer moments are stored as tensors named `adam.m.<param>` and
//! `adam.v.<param>`.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::{AdamState, Model, ModelConfig};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"E3DC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn arch_hash(descriptor: &str) -> [u8; 8] {
    let digest = Sha256::digest(descriptor.as_bytes());
    digest[..8].try_into().expect("digest is 32 bytes")
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHeader {
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// Parsed checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub arch_hash: [u8; 8],
    pub descriptor: String,
    pub adam: Option<AdamHeader>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn capture(model: &Model<f32>, adam: Option<&AdamState<f32>>) -> Self {
        let descriptor = model.config().descriptor();
        let mut tensors: Vec<NamedTensor> = model
            .params()
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.shape.clone(),
                data: p.value.clone(),
            })
            .collect();
        for (name, values) in model.buffers() {
            tensors.push(NamedTensor {
                name,
                shape: vec![values.len()],
                data: values.to_vec(),
            });
        }
        let adam_header = adam.map(|a| {
            let params = model.params();
            for (i, p) in params.iter().enumerate() {
                for (kind, moments) in [("m", &a.m), ("v", &a.v)] {
                    if let Some(buf) = moments.get(i) {
                        tensors.push(NamedTensor {
                            name: format!("adam.{kind}.{}", p.name),
                            shape: p.shape.clone(),
                            data: buf.clone(),
                        });
                    }
                }
            }
            AdamHeader {
                step: a.step,
                learning_rate: a.learning_rate,
                beta1: a.beta1,
                beta2: a.beta2,
                epsilon: a.epsilon,
            }
        });
        Checkpoint {
            version: CHECKPOINT_VERSION,
            arch_hash: arch_hash(&descriptor),
            descriptor,
            adam: adam_header,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.arch_hash);
        out.extend_from_slice(&(self.descriptor.len() as u32).to_le_bytes());
        out.extend_from_slice(self.descriptor.as_bytes());
        match &self.adam {
            None => out.push(0),
            Some(a) => {
                out.push(1);
                out.extend_from_slice(&a.step.to_le_bytes());
                for v in [a.learning_rate, a.beta1, a.beta2, a.epsilon] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &e in &t.shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint: bad magic".into()));
        }
        let version = c.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Unsupported(format!("checkpoint version {version}")));
        }
        let arch: [u8; 8] = c.take(8)?.try_into().expect("8 bytes");
        let descriptor = c.string()?;
        if arch_hash(&descriptor) != arch {
            return Err(Error::Format(
                "checkpoint arch hash does not match its descriptor".into(),
            ));
        }
        let adam = match c.take(1)?[0] {
            0 => None,
            1 => Some(AdamHeader {
                step: c.u64()?,
                learning_rate: c.f64()?,
                beta1: c.f64()?,
                beta2: c.f64()?,
                epsilon: c.f64()?,
            }),
            flag => return Err(Error::Format(format!("invalid optimizer flag {flag}"))),
        };
        let count = c.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = c.string()?;
            let rank = c.u32()? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("tensor {name} has rank {rank}")));
            }
            let shape = (0..rank)
                .map(|_| c.u64().map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= c.remaining()))
                .ok_or_else(|| {
                    Error::Format(format!("tensor {name} payload {shape:?} exceeds the file"))
                })?;
            let raw = c.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if c.remaining() != 0 {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                c.remaining()
            )));
        }
        Ok(Checkpoint {
            version,
            arch_hash: arch,
            descriptor,
            adam,
            tensors,
        })
    }

    /// Rebuilds a model (and optimizer, if stored) for `config`, which must
    /// describe the same architecture.
    pub fn restore(&self, config: &ModelConfig) -> Result<(Model<f32>, Option<AdamState<f32>>)> {
        if arch_hash(&config.descriptor()) != self.arch_hash {
            return Err(Error::Consistency(format!(
                "checkpoint architecture `{}` does not match configured `{}`",
                self.descriptor,
                config.descriptor()
            )));
        }
        let mut by_name: HashMap<&str, &NamedTensor> =
            self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let t = by_name
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
            if t.shape != shape {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
            Ok(t.data.clone())
        };
        let mut model = Model::<f32>::new(config.clone(), 0)?;
        for p in model.params_mut() {
            p.value = take(&p.name, &p.shape)?;
        }
        for (name, buf) in model.buffers_mut() {
            *buf = take(&name, &[buf.len()])?;
        }
        let adam = match &self.adam {
            None => None,
            Some(h) => {
                let mut state = AdamState::new(h.learning_rate);
                state.beta1 = h.beta1;
                state.beta2 = h.beta2;
                state.epsilon = h.epsilon;
                state.step = h.step;
                if h.step > 0 {
                    for p in model.params() {
                        state.m.push(take(&format!("adam.m.{}", p.name), &p.shape)?);
                        state.v.push(take(&format!("adam.v.{}", p.name), &p.shape)?);
                    }
                }
                Some(state)
            }
        };
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Format(format!(
                "checkpoint has unexpected tensor {extra}"
            )));
        }
        Ok((model, adam))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }
}

pub fn save_checkpoint<W: Write>(
    model: &Model<f32>,
    adam: Option<&AdamState<f32>>,
    mut sink: W,
) -> Result<()> {
    sink.write_all(&Checkpoint::capture(model, adam).to_bytes())
        .map_err(|e| Error::io("writing checkpoint", e))
}

pub fn load_checkpoint<R: Read>(
    mut source: R,
    config: &ModelConfig,
) -> Result<(Model<f32>, Option<AdamState<f32>>)> {
    let mut bytes = Vec::new();
    source
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("reading checkpoint", e))?;
    Checkpoint::from_bytes(&bytes)?.restore(config)
}

pub fn write_checkpoint_file(
    path: &Path,
    model: &Model<f32>,
    adam: Option<&AdamState<f32>>,
) -> Result<()> {
    fs::write(path, Checkpoint::capture(model, adam).to_bytes())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_checkpoint_file(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mode, Padding, Tensor};

    fn config() -> ModelConfig {
        ModelConfig {
            input_dims: [8, 8, 8],
            widths: vec![2, 3],
            dense_units: 4,
            padding: Padding::Same,
            ..ModelConfig::default()
        }
    }

    fn batch(seed: u64) -> Tensor<f32> {
        let mut r = crate::rng::rng(seed);
        use rand::RngExt;
        Tensor::new(
            vec![2, 1, 8, 8, 8],
            (0..1024).map(|_| r.random::<f32>()).collect(),
        )
        .unwrap()
    }

    fn train_step(model: &mut Model<f32>, adam: &mut AdamState<f32>, seed: u64) {
        model
            .forward(&batch(seed), Mode::Train { dropout_seed: seed })
            .unwrap();
        model.backward_bce(&[1.0, 0.0]).unwrap();
        adam.update(&mut model.params_mut()).unwrap();
    }

    #[test]
    fn resume_is_bit_exact() {
        let mut model = Model::<f32>::new(config(), 11).unwrap();
        let mut adam = AdamState::new(1e-3);
        for s in 0..3 {
            train_step(&mut model, &mut adam, s);
        }
        let bytes = Checkpoint::capture(&model, Some(&adam)).to_bytes();
        let (mut restored, restored_adam) = load_checkpoint(&bytes[..], &config()).unwrap();
        let mut restored_adam = restored_adam.unwrap();
        assert_eq!(restored_adam, adam);
        for s in 3..6 {
            train_step(&mut model, &mut adam, s);
            train_step(&mut restored, &mut restored_adam, s);
        }
        for (a, b) in model.params().iter().zip(restored.params()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
        assert_eq!(model.buffers(), restored.buffers());
        assert_eq!(
            model.infer(&batch(99)).unwrap(),
            restored.infer(&batch(99)).unwrap()
        );
    }

    #[test]
    fn header_layout() {
        let model = Model::<f32>::new(config(), 1).unwrap();
        let bytes = Checkpoint::capture(&model, None).to_bytes();
        assert_eq!(&bytes[..4], b"E3DC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes[8..16], arch_hash(&config().descriptor()));
        let parsed = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(parsed.adam.is_none());
        assert_eq!(parsed.tensors.len(), 4 * 2 + 4 + 2 * 2);
    }

    #[test]
    fn rejects_bad_input() {
        let model = Model::<f32>::new(config(), 1).unwrap();
        let bytes = Checkpoint::capture(&model, None).to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Format(_))
        ));
        let other = ModelConfig {
            widths: vec![2, 4],
            ..config()
        };
        let parsed = Checkpoint::from_bytes(&bytes).unwrap();
        assert!(matches!(parsed.restore(&other), Err(Error::Consistency(_))));
    }
}
