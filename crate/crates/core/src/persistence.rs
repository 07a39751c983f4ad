//! Single-file little-endian model archives.
//!
//! Layout, all integers `u32` LE:
//!
//! ```text
//! "NULG" | version
//! d | heads | ffn_hidden | blocks | frame_length | vocab_size | epochs | batch_size | seed_lo | seed_hi
//! token count, then per token: byte length | UTF-8 bytes
//! tensor count, then per tensor: name length | name | rows | cols | rows*cols f32 LE, row-major
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::numerics::{Matrix, ParameterSet};
use crate::tokenizer::Vocabulary;

pub const MAGIC: &[u8; 4] = b"NULG";
pub const FORMAT_VERSION: u32 = 1;
const CONFIG_FIELDS: usize = 10;

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Validation(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(buf, s.len())?;
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

/// Serializes a model and its vocabulary.
pub fn to_bytes(state: &ModelState, vocab: &Vocabulary) -> Result<Vec<u8>> {
    let c = state.config();
    if vocab.len() != c.vocab_size {
        return Err(Error::Validation(format!(
            "vocabulary has {} tokens, model expects {}",
            vocab.len(),
            c.vocab_size
        )));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [c.d, c.heads, c.ffn_hidden, c.blocks, c.frame_length, c.vocab_size, c.epochs, c.batch_size] {
        put_u32(&mut buf, v)?;
    }
    buf.extend_from_slice(&(c.seed as u32).to_le_bytes());
    buf.extend_from_slice(&((c.seed >> 32) as u32).to_le_bytes());
    put_u32(&mut buf, vocab.len())?;
    for t in vocab.tokens() {
        put_str(&mut buf, t)?;
    }
    put_u32(&mut buf, state.params().len())?;
    for p in state.params().iter() {
        put_str(&mut buf, &p.name)?;
        put_u32(&mut buf, p.value.rows())?;
        put_u32(&mut buf, p.value.cols())?;
        for x in p.value.as_slice() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("archive truncated while reading {what} at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("four bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.len(what)?;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format(format!("{what} is not valid UTF-8")))
    }
}

/// Inverse of [`to_bytes`]; every model invariant is checked again.
pub fn from_bytes(bytes: &[u8]) -> Result<(ModelState, Vocabulary)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a model archive (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let mut f = [0usize; CONFIG_FIELDS];
    for v in &mut f {
        *v = r.len("config")?;
    }
    let config = ModelConfig {
        d: f[0],
        heads: f[1],
        ffn_hidden: f[2],
        blocks: f[3],
        frame_length: f[4],
        vocab_size: f[5],
        epochs: f[6],
        batch_size: f[7],
        seed: f[8] as u64 | ((f[9] as u64) << 32),
    };
    config.validate()?;

    let count = r.len("vocabulary size")?;
    let mut tokens = Vec::with_capacity(count.min(bytes.len()));
    for _ in 0..count {
        tokens.push(r.string("vocabulary token")?);
    }
    let vocab = Vocabulary::from_tokens(tokens)?;
    if vocab.len() != config.vocab_size {
        return Err(Error::Validation(format!(
            "archive stores {} tokens but declares a vocabulary of {}",
            vocab.len(),
            config.vocab_size
        )));
    }

    let n = r.len("tensor count")?;
    let mut params = ParameterSet::new();
    for _ in 0..n {
        let name = r.string("tensor name")?;
        let rows = r.len("tensor rows")?;
        let cols = r.len("tensor cols")?;
        let count = rows
            .checked_mul(cols)
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let data = r
            .take(count, &name)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")))
            .collect();
        params.insert(name, Matrix::new(rows, cols, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last tensor", bytes.len() - r.pos)));
    }
    let state = ModelState::from_parameters(config, params)?;
    Ok((state, vocab))
}

pub fn save_model(state: &ModelState, vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(state, vocab)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads an archive written by [`save_model`].
pub fn load_model(path: impl AsRef<Path>) -> Result<(ModelState, Vocabulary, ModelConfig)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (state, vocab) = from_bytes(&bytes)?;
    let config = *state.config();
    Ok((state, vocab, config))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (ModelState, Vocabulary) {
        let vocab = Vocabulary::build(&[vec!["alpha", "beta", "γ"]]).unwrap();
        let config = ModelConfig {
            ffn_hidden: 16,
            seed: (5u64 << 32) | 9,
            ..ModelConfig::new(vocab.len(), 6).with_width(8, 2)
        };
        (ModelState::init(&config).unwrap(), vocab)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (state, vocab) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nulg");
        save_model(&state, &vocab, &path).unwrap();
        let (loaded, v2, config) = load_model(&path).unwrap();
        assert_eq!(v2, vocab);
        assert_eq!(config, *state.config());
        for (a, b) in state.params().iter().zip(loaded.params().iter()) {
            assert_eq!(a.name, b.name);
            let bits = |m: &Matrix<f32>| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn file_size_matches_layout() {
        let (state, vocab) = fixture();
        let bytes = to_bytes(&state, &vocab).unwrap();
        let header = 4 + 4 + 4 * CONFIG_FIELDS;
        let vocab_bytes: usize = 4 + vocab.tokens().iter().map(|t| 4 + t.len()).sum::<usize>();
        let tensors: usize = 4 + state
            .params()
            .iter()
            .map(|p| 4 + p.name.len() + 8 + 4 * p.value.rows() * p.value.cols())
            .sum::<usize>();
        assert_eq!(bytes.len(), header + vocab_bytes + tensors);
        // d=8, V=7, L=6 hand count of float payload
        let floats = 7 * 8 + 2 * 3 * 8 * 4 + 4 * 8 + 8 * 16 + 16 + 16 * 8 + 8 + 8 * 7 + 7;
        let float_total: usize = state.params().iter().map(|p| p.value.rows() * p.value.cols()).sum();
        assert_eq!(float_total, floats);
    }

    #[test]
    fn bad_magic_and_version() {
        let (state, vocab) = fixture();
        let mut bytes = to_bytes(&state, &vocab).unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(from_bytes(&bad), Err(Error::Format(_))));
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(from_bytes(&bytes), Err(Error::Version { found: 2, supported: 1 })));
    }

    #[test]
    fn truncation_is_rejected() {
        let (state, vocab) = fixture();
        let bytes = to_bytes(&state, &vocab).unwrap();
        for cut in [0, 3, 6, 30, bytes.len() / 2, bytes.len() - 1] {
            assert!(from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn inconsistent_shape_is_a_validation_error() {
        let (state, vocab) = fixture();
        let mut bytes = to_bytes(&state, &vocab).unwrap();
        // ffn_hidden is the third config field
        bytes[16..20].copy_from_slice(&12u32.to_le_bytes());
        assert!(matches!(from_bytes(&bytes), Err(Error::Validation(_))));
    }
}
