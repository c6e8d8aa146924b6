//! Versioned binary model container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "CPRM" | version u32 | num_layers u64 | num_heads u64 | model_dim u64
//! | head_dim u64 | vocab_size u64 | max_seq_len u64 | construction_seed u64
//! | weight arrays as raw f64 bit patterns
//! ```
//!
//! Weight arrays appear in fixed order: per layer `w_q, w_k, w_v, w_o,
//! w_ff1, w_ff2`, then `token_embed`, `pos_embed`, `unembed`. Lengths are
//! implied by the `ModelSpec` fields. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::model::{LayerWeights, Model};
use super::{EngineError, ModelSpec};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"CPRM";
const VERSION: u32 = 1;

impl<T: Scalar> Model<T> {
    pub fn save(&self, path: &Path) -> Result<(), EngineError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EngineError> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let spec = self.spec();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for field in [
            spec.num_layers as u64,
            spec.num_heads as u64,
            spec.model_dim as u64,
            spec.head_dim as u64,
            spec.vocab_size as u64,
            spec.max_seq_len as u64,
            self.construction_seed(),
        ] {
            out.extend_from_slice(&field.to_le_bytes());
        }
        for arr in self.weight_arrays() {
            for &x in arr {
                out.extend_from_slice(&x.to_f64_value().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EngineError> {
        let mut r = Cursor { bytes, at: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(EngineError::BadContainer(format!(
                "bad magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(EngineError::BadContainer(format!(
                "unsupported container version {version}"
            )));
        }
        let mut field = || -> Result<u64, EngineError> {
            Ok(u64::from_le_bytes(r.take(8)?.try_into().unwrap()))
        };
        let spec = ModelSpec {
            num_layers: field()? as usize,
            num_heads: field()? as usize,
            model_dim: field()? as usize,
            head_dim: field()? as usize,
            vocab_size: field()? as usize,
            max_seq_len: field()? as usize,
        };
        let seed = field()?;
        spec.validate()?;

        let c = spec.model_dim;
        let ff = spec.ff_dim();
        let mut arr = |len: usize| -> Result<Vec<T>, EngineError> {
            let raw = r.take(len * 8)?;
            Ok(raw
                .chunks_exact(8)
                .map(|ch| T::from_f64(f64::from_le_bytes(ch.try_into().unwrap())))
                .collect())
        };
        let layers = (0..spec.num_layers)
            .map(|_| {
                Ok(LayerWeights {
                    w_q: arr(c * c)?,
                    w_k: arr(c * c)?,
                    w_v: arr(c * c)?,
                    w_o: arr(c * c)?,
                    w_ff1: arr(c * ff)?,
                    w_ff2: arr(ff * c)?,
                })
            })
            .collect::<Result<Vec<_>, EngineError>>()?;
        let token_embed = arr(spec.vocab_size * c)?;
        let pos_embed = arr(spec.max_seq_len * c)?;
        let unembed = arr(c * spec.vocab_size)?;
        if r.at != bytes.len() {
            return Err(EngineError::BadContainer(format!(
                "{} trailing bytes",
                bytes.len() - r.at
            )));
        }
        Model::from_parts(spec, seed, layers, token_embed, pos_embed, unembed)
    }

    fn weight_arrays(&self) -> Vec<&[T]> {
        let mut arrays = Vec::new();
        for l in &self.layers {
            arrays.extend([
                l.w_q.as_slice(),
                l.w_k.as_slice(),
                l.w_v.as_slice(),
                l.w_o.as_slice(),
                l.w_ff1.as_slice(),
                l.w_ff2.as_slice(),
            ]);
        }
        arrays.extend([
            self.token_embed.as_slice(),
            self.pos_embed.as_slice(),
            self.unembed.as_slice(),
        ]);
        arrays
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], EngineError> {
        if self.at + len > self.bytes.len() {
            return Err(EngineError::BadContainer("truncated container".into()));
        }
        let out = &self.bytes[self.at..self.at + len];
        self.at += len;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::super::model::{build_model, WeightRecipe};
    use super::*;

    fn toy() -> Model<f64> {
        let spec = ModelSpec {
            num_layers: 2,
            num_heads: 2,
            model_dim: 8,
            head_dim: 4,
            vocab_size: 16,
            max_seq_len: 32,
        };
        build_model(&spec, 42, WeightRecipe::Uniform { scale: 0.5 }).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = toy();
        let bytes = m.to_bytes();
        let back = Model::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(m, back);
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn round_trip_is_bit_exact_for_f32_models() {
        let spec = *toy().spec();
        let m: Model<f32> = build_model(&spec, 7, WeightRecipe::Uniform { scale: 0.5 }).unwrap();
        let back = Model::<f32>::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn bad_magic_and_truncation_are_rejected() {
        let m = toy();
        let mut bytes = m.to_bytes();
        bytes[0] = b'X';
        assert!(Model::<f64>::from_bytes(&bytes).is_err());

        let bytes = m.to_bytes();
        assert!(Model::<f64>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let m = toy();
        m.save(&path).unwrap();
        let back = Model::<f64>::load(&path).unwrap();
        assert_eq!(m, back);
    }
}
