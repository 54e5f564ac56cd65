//! Single-file model checkpoints.
//!
//! Layout: an 8-byte magic, a little-endian `u32` header length, a JSON
//! header (model kind, config, vocabulary hash, free-form extras, tensor
//! manifest), then the raw `f32` tensor data in little-endian order. The
//! vocabulary hash binds a checkpoint to the token table it was trained
//! with; loading against a different vocabulary is refused because every
//! embedding row would silently change meaning.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{Error, Result};

/// File magic, also serving as the format version tag.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LAYCKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    /// Offset into the data section, in elements.
    offset: u64,
    /// Number of elements.
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    vocab_hash: String,
    extras: serde_json::Value,
    dtype: String,
    tensors: Vec<TensorMeta>,
}

/// A deserialized checkpoint: identification header plus parameter values.
#[derive(Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub vocab_hash: String,
    pub extras: serde_json::Value,
    pub params: ParamSet<f32>,
}

impl Checkpoint {
    pub fn new(
        kind: impl Into<String>,
        config: serde_json::Value,
        vocab_hash: impl Into<String>,
        extras: serde_json::Value,
        params: ParamSet<f32>,
    ) -> Self {
        Self {
            kind: kind.into(),
            config,
            vocab_hash: vocab_hash.into(),
            extras,
            params,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut offset = 0u64;
        for (name, value) in self.params.iter() {
            let len = value.len() as u64;
            tensors.push(TensorMeta {
                name: name.to_string(),
                shape: value.shape().to_vec(),
                offset,
                len,
            });
            offset += len;
        }
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            vocab_hash: self.vocab_hash.clone(),
            extras: self.extras.clone(),
            dtype: "f32".to_string(),
            tensors,
        };
        let header_bytes = serde_json::to_vec(&header)?;

        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(header_bytes.len() as u32)?;
        w.write_all(&header_bytes)?;
        for (_, value) in self.params.iter() {
            let standard = value.as_standard_layout();
            for &v in standard.iter() {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::data(format!(
                "{} is not a model checkpoint (bad magic)",
                path.display()
            )));
        }
        let header_len = r.read_u32::<LittleEndian>()? as usize;
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)?;
        if header.dtype != "f32" {
            return Err(Error::data(format!(
                "unsupported checkpoint dtype {:?}",
                header.dtype
            )));
        }

        let mut params = ParamSet::new();
        let mut expected_offset = 0u64;
        for meta in &header.tensors {
            if meta.offset != expected_offset {
                return Err(Error::data(format!(
                    "tensor {:?} at offset {} but data cursor is {}",
                    meta.name, meta.offset, expected_offset
                )));
            }
            let numel: usize = meta.shape.iter().product();
            if numel as u64 != meta.len {
                return Err(Error::data(format!(
                    "tensor {:?} length {} disagrees with shape {:?}",
                    meta.name, meta.len, meta.shape
                )));
            }
            let mut data = vec![0f32; numel];
            r.read_f32_into::<LittleEndian>(&mut data)?;
            let array = ArrayD::from_shape_vec(IxDyn(&meta.shape), data)
                .map_err(|e| Error::data(format!("tensor {:?}: {e}", meta.name)))?;
            params.add(&meta.name, array);
            expected_offset += meta.len;
        }

        Ok(Self {
            kind: header.kind,
            config: header.config,
            vocab_hash: header.vocab_hash,
            extras: header.extras,
            params,
        })
    }

    /// Loads and validates kind and vocabulary hash in one step.
    ///
    /// A vocabulary mismatch means the checkpoint's embedding rows refer to
    /// different tokens than the caller's vocabulary, so the load is
    /// refused rather than producing silently scrambled predictions.
    pub fn load_expected(
        path: impl AsRef<Path>,
        kind: &str,
        vocab_hash: &str,
    ) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if ckpt.kind != kind {
            return Err(Error::data(format!(
                "checkpoint kind {:?} where {kind:?} is required",
                ckpt.kind
            )));
        }
        if ckpt.vocab_hash != vocab_hash {
            return Err(Error::Schema(format!(
                "checkpoint was trained with vocabulary {} but the current vocabulary is {}",
                ckpt.vocab_hash, vocab_hash
            )));
        }
        Ok(ckpt)
    }
}

impl<T: super::Scalar> ParamSet<T> {
    /// Overwrites every tensor with the values stored under the same name
    /// in `source`. The two sets must agree exactly on names and shapes,
    /// which holds whenever the model was rebuilt by the same constructor.
    pub fn load_values_from(&mut self, source: &ParamSet<T>) -> Result<()> {
        if self.len() != source.len() {
            return Err(Error::data(format!(
                "parameter count mismatch: model has {}, checkpoint has {}",
                self.len(),
                source.len()
            )));
        }
        let ids: Vec<_> = self.ids().collect();
        for id in ids {
            let name = self.name(id).to_string();
            let src_id = source.id_of(&name).ok_or_else(|| {
                Error::data(format!("checkpoint is missing parameter {name:?}"))
            })?;
            let src = source.get(src_id);
            if src.shape() != self.get(id).shape() {
                return Err(Error::data(format!(
                    "parameter {name:?} has shape {:?} in checkpoint but {:?} in model",
                    src.shape(),
                    self.get(id).shape()
                )));
            }
            self.get_mut(id).assign(src);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal_init;
    use crate::util::rng_from_seed;
    use serde_json::json;

    fn sample_params() -> ParamSet<f32> {
        let mut rng = rng_from_seed(51);
        let mut ps = ParamSet::new();
        ps.add("emb.w", normal_init(&mut rng, &[7, 4], 1.0));
        ps.add("fc.w", normal_init(&mut rng, &[4, 4], 1.0));
        ps.add("fc.b", normal_init(&mut rng, &[4], 1.0));
        ps
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = Checkpoint::new(
            "decoder",
            json!({"layers": 2, "dim": 128}),
            "abc123",
            json!({"element_counts": [0, 3, 5]}),
            sample_params(),
        );
        ckpt.save(&path).unwrap();

        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.kind, "decoder");
        assert_eq!(loaded.config, json!({"layers": 2, "dim": 128}));
        assert_eq!(loaded.vocab_hash, "abc123");
        assert_eq!(loaded.extras, json!({"element_counts": [0, 3, 5]}));
        assert_eq!(loaded.params.len(), 3);
        for (a, b) in ckpt.params.iter().zip(loaded.params.iter()) {
            assert_eq!(a.0, b.0);
            assert_eq!(a.1, b.1, "tensor {} must round-trip bit-exactly", a.0);
        }
    }

    #[test]
    fn load_expected_rejects_wrong_vocabulary() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        Checkpoint::new("decoder", json!({}), "hash-a", json!({}), sample_params())
            .save(&path)
            .unwrap();
        let err = Checkpoint::load_expected(&path, "decoder", "hash-b").unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "got {err:?}");
        // The right hash loads fine.
        Checkpoint::load_expected(&path, "decoder", "hash-a").unwrap();
    }

    #[test]
    fn load_expected_rejects_wrong_kind() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        Checkpoint::new("locator", json!({}), "h", json!({}), sample_params())
            .save(&path)
            .unwrap();
        assert!(Checkpoint::load_expected(&path, "decoder", "h").is_err());
    }

    #[test]
    fn rejects_non_checkpoint_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("not-a-checkpoint");
        std::fs::write(&path, b"just some text that is not a checkpoint").unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "got {err:?}");
    }

    #[test]
    fn load_values_from_matches_by_name() {
        let mut target = sample_params();
        for id in target.ids().collect::<Vec<_>>() {
            target.get_mut(id).mapv_inplace(|_| 0.0);
        }
        let source = sample_params();
        target.load_values_from(&source).unwrap();
        for (a, b) in target.iter().zip(source.iter()) {
            assert_eq!(a.1, b.1);
        }
    }

    #[test]
    fn load_values_from_rejects_shape_mismatch() {
        let mut target = ParamSet::<f32>::new();
        target.add("w", ArrayD::zeros(IxDyn(&[2, 2])));
        let mut source = ParamSet::<f32>::new();
        source.add("w", ArrayD::zeros(IxDyn(&[3, 2])));
        assert!(target.load_values_from(&source).is_err());
    }
}
