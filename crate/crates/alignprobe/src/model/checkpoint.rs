//! Checkpoint file format.
//!
//! Layout: magic `ALNP`, format version (u32 LE), the model config as a list
//! of u32 LE fields, then a count-prefixed list of named tensors
//! (name length + UTF-8 name + rank + dims + row-major f32 LE values).
//! Tensors are written in name order, so identical contents produce
//! identical bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::tensor::TensorF;

use super::{EncoderParams, ModelConfig, ModelError};

const MAGIC: &[u8; 4] = b"ALNP";
const FORMAT_VERSION: u32 = 1;

/// A parsed checkpoint: the embedded config plus all named tensors (encoder
/// tensors and, for fine-tuned models, `head.*` tensors).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, TensorF>,
}

impl Checkpoint {
    /// Errors unless the embedded config equals `expected`.
    pub fn require_config(&self, expected: &ModelConfig) -> Result<(), ModelError> {
        if &self.config != expected {
            return Err(ModelError::Config(format!(
                "checkpoint config {:?} does not match expected {:?}",
                self.config, expected
            )));
        }
        Ok(())
    }

    /// Splits into encoder params and any extra (`head.*`) tensors,
    /// validating every encoder shape against the embedded config.
    pub fn split(self) -> Result<(EncoderParams, BTreeMap<String, TensorF>), ModelError> {
        let (extras, encoder): (BTreeMap<_, _>, BTreeMap<_, _>) = self
            .tensors
            .into_iter()
            .partition(|(name, _)| name.starts_with("head."));
        let params = EncoderParams::from_tensors(self.config, encoder)?;
        Ok((params, extras))
    }

    /// As [`split`], discarding extras.
    pub fn into_encoder(self) -> Result<EncoderParams, ModelError> {
        Ok(self.split()?.0)
    }
}

fn config_fields(config: &ModelConfig) -> [u32; 8] {
    [
        config.n_layers as u32,
        config.d_model as u32,
        config.n_heads as u32,
        config.d_ff as u32,
        config.vocab_size as u32,
        config.max_seq_len as u32,
        config.init_std_bits,
        config.mlm_tied as u32,
    ]
}

/// Writes `tensors` (any named collection; name-ordered) with `config`
/// embedded. Values are stored single precision.
pub fn save_checkpoint<'a>(
    path: &Path,
    config: &ModelConfig,
    tensors: impl IntoIterator<Item = (&'a str, &'a TensorF)>,
) -> Result<(), ModelError> {
    let ordered: BTreeMap<&str, &TensorF> = tensors.into_iter().collect();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for field in config_fields(config) {
        w.write_all(&field.to_le_bytes())?;
    }
    w.write_all(&(ordered.len() as u32).to_le_bytes())?;
    for (name, tensor) in ordered {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
        for &dim in tensor.dims() {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for &v in tensor.values() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, buf: &mut [u8], what: &str) -> Result<(), ModelError> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|_| ModelError::Format {
            offset: at,
            what: format!("truncated while reading {what}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        let mut buf = [0u8; 4];
        self.bytes(&mut buf, what)?;
        Ok(u32::from_le_bytes(buf))
    }

    fn f32(&mut self, what: &str) -> Result<f32, ModelError> {
        let mut buf = [0u8; 4];
        self.bytes(&mut buf, what)?;
        Ok(f32::from_le_bytes(buf))
    }
}

/// Reads a checkpoint. A malformed file yields a format error naming the
/// byte offset; nothing partial escapes.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.bytes(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(ModelError::Format {
            offset: 0,
            what: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(ModelError::Format {
            offset: 4,
            what: format!("unsupported format version {version}"),
        });
    }
    let config = ModelConfig {
        n_layers: r.u32("n_layers")? as usize,
        d_model: r.u32("d_model")? as usize,
        n_heads: r.u32("n_heads")? as usize,
        d_ff: r.u32("d_ff")? as usize,
        vocab_size: r.u32("vocab_size")? as usize,
        max_seq_len: r.u32("max_seq_len")? as usize,
        init_std_bits: r.u32("init_std")?,
        mlm_tied: r.u32("mlm_tied")? != 0,
    };
    config.validate()?;

    let count = r.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        if name_len > 4096 {
            return Err(ModelError::Format {
                offset: r.offset - 4,
                what: format!("implausible tensor name length {name_len}"),
            });
        }
        let mut name_buf = vec![0u8; name_len];
        r.bytes(&mut name_buf, "tensor name")?;
        let name = String::from_utf8(name_buf).map_err(|_| ModelError::Format {
            offset: r.offset - name_len as u64,
            what: "tensor name is not UTF-8".into(),
        })?;
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(ModelError::Format {
                offset: r.offset - 4,
                what: format!("implausible rank {rank} for tensor {name}"),
            });
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dim")? as usize);
        }
        let len: usize = dims.iter().product();
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            values.push(r.f32("tensor values")? as f64);
        }
        let tensor = TensorF::new(dims, values).map_err(|e| ModelError::Format {
            offset: r.offset,
            what: format!("inconsistent tensor {name}: {e}"),
        })?;
        if tensors.insert(name.clone(), tensor).is_some() {
            return Err(ModelError::Format {
                offset: r.offset,
                what: format!("duplicate tensor name {name}"),
            });
        }
    }
    Ok(Checkpoint { config, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn roundtrip_dir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise_at_stored_precision() {
        let config = ModelConfig::tiny(2);
        let params = init_params(&config, 42).unwrap();
        let dir = roundtrip_dir();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &config, params.iter()).unwrap();

        let loaded = load_checkpoint(&path).unwrap().into_encoder().unwrap();
        // f32 -> f64 widening is exact, so a second save must be identical
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&path2, &config, loaded.iter()).unwrap();
        let a = std::fs::read(&path).unwrap();
        let b = std::fs::read(&path2).unwrap();
        assert_eq!(a, b);

        // and all values match at f32 precision
        for (name, t) in params.iter() {
            let l = loaded.tensor(name);
            for (x, y) in t.values().iter().zip(l.values()) {
                assert_eq!((*x as f32).to_bits(), (*y as f32).to_bits());
            }
        }
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let config = ModelConfig::tiny(1);
        let params = init_params(&config, 0).unwrap();
        let dir = roundtrip_dir();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &config, params.iter()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_checkpoint(&cut).unwrap_err();
        assert!(matches!(err, ModelError::Format { .. }), "{err}");
    }

    #[test]
    fn bad_magic_is_a_format_error_at_offset_zero() {
        let dir = roundtrip_dir();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOPE0000").unwrap();
        match load_checkpoint(&path) {
            Err(ModelError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn config_mismatch_is_a_config_error() {
        let config_a = ModelConfig::tiny(2);
        let params = init_params(&config_a, 0).unwrap();
        let dir = roundtrip_dir();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&path, &config_a, params.iter()).unwrap();

        let mut config_b = config_a;
        config_b.d_model = 16;
        let loaded = load_checkpoint(&path).unwrap();
        let err = loaded.require_config(&config_b).unwrap_err();
        assert!(matches!(err, ModelError::Config(_)));
    }

    #[test]
    fn head_tensors_split_off() {
        let config = ModelConfig::tiny(1);
        let params = init_params(&config, 0).unwrap();
        let head = TensorF::zeros(vec![config.d_model, 3]);
        let dir = roundtrip_dir();
        let path = dir.path().join("ft.ckpt");
        let all: Vec<(&str, &TensorF)> = params
            .iter()
            .chain(std::iter::once(("head.tag.w", &head)))
            .collect();
        save_checkpoint(&path, &config, all).unwrap();
        let (encoder, extras) = load_checkpoint(&path).unwrap().split().unwrap();
        assert_eq!(encoder.config(), &config);
        assert_eq!(extras.len(), 1);
        assert!(extras.contains_key("head.tag.w"));
    }
}
