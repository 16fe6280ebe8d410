//! Versioned binary weight file.
//!
//! Layout (all little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `KVLW` |
//! | 4     | version (u32) |
//! | 6 × 8 | n_layers, n_heads, d_model, vocab, max_seq, seed (u64) |
//! | …     | f64 tensors: embedding, then per layer wq, wk, wv, wo, w1, b1, w2, b2, ln1_gain, ln1_bias, ln2_gain, ln2_bias |

use super::{LayerWeights, ModelConfig, Weights};
use crate::bytes::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"KVLW";
pub const WEIGHTS_VERSION: u32 = 1;

pub fn write_weights(weights: &Weights) -> Vec<u8> {
    let c = &weights.config;
    let mut w = ByteWriter::default();
    w.bytes(WEIGHTS_MAGIC);
    w.u32(WEIGHTS_VERSION);
    for v in [c.n_layers, c.n_heads, c.d_model, c.vocab, c.max_seq] {
        w.u64(v as u64);
    }
    w.u64(c.seed);
    w.f64s(weights.embedding.data());
    for l in &weights.layers {
        for m in [&l.wq, &l.wk, &l.wv, &l.wo, &l.w1] {
            w.f64s(m.data());
        }
        w.f64s(&l.b1);
        w.f64s(l.w2.data());
        for v in [&l.b2, &l.ln1_gain, &l.ln1_bias, &l.ln2_gain, &l.ln2_bias] {
            w.f64s(v);
        }
    }
    w.into_inner()
}

pub fn read_weights(bytes: &[u8]) -> Result<Weights> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(WEIGHTS_MAGIC)?;
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Parse { offset: 4, message: format!("unsupported version {version}") });
    }
    let header_at = r.offset();
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.usize()?;
    }
    let config = ModelConfig {
        n_layers: dims[0],
        n_heads: dims[1],
        d_model: dims[2],
        vocab: dims[3],
        max_seq: dims[4],
        seed: r.u64()?,
    };
    config
        .validate()
        .map_err(|e| Error::Parse { offset: header_at, message: e.to_string() })?;

    let d = config.d_model;
    let ff = config.d_ff();
    let per_layer = 4 * d * d + ff * d + ff + d * ff + 5 * d;
    let expected = config
        .vocab
        .checked_mul(d)
        .and_then(|e| per_layer.checked_mul(config.n_layers).and_then(|p| p.checked_add(e)))
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Parse { offset: header_at, message: "tensor sizes overflow".into() })?;
    if r.remaining() != expected {
        return Err(Error::Parse {
            offset: r.offset(),
            message: format!("expected {expected} tensor bytes, found {}", r.remaining()),
        });
    }

    let mat = |rows: usize, cols: usize, r: &mut ByteReader<'_>| -> Result<Matrix> {
        Matrix::new(rows, cols, r.f64s(rows * cols)?)
    };
    let embedding = mat(config.vocab, d, &mut r)?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let wq = mat(d, d, &mut r)?;
        let wk = mat(d, d, &mut r)?;
        let wv = mat(d, d, &mut r)?;
        let wo = mat(d, d, &mut r)?;
        let w1 = mat(ff, d, &mut r)?;
        let b1 = r.f64s(ff)?;
        let w2 = mat(d, ff, &mut r)?;
        layers.push(LayerWeights {
            wq,
            wk,
            wv,
            wo,
            w1,
            b1,
            w2,
            b2: r.f64s(d)?,
            ln1_gain: r.f64s(d)?,
            ln1_bias: r.f64s(d)?,
            ln2_gain: r.f64s(d)?,
            ln2_bias: r.f64s(d)?,
        });
    }
    Ok(Weights { config, embedding, layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;

    fn small() -> ModelConfig {
        ModelConfig { n_layers: 2, n_heads: 2, d_model: 4, vocab: 8, max_seq: 6, seed: 11 }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let w = init_weights(&small()).unwrap();
        let bytes = write_weights(&w);
        let back = read_weights(&bytes).unwrap();
        assert_eq!(w, back);
        assert_eq!(write_weights(&back), bytes);
    }

    #[test]
    fn header_layout() {
        let w = init_weights(&small()).unwrap();
        let bytes = write_weights(&w);
        assert_eq!(&bytes[0..4], b"KVLW");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[24..32].try_into().unwrap()), 4);
        // first embedding entry directly after the 56-byte header
        let first = f64::from_le_bytes(bytes[56..64].try_into().unwrap());
        assert_eq!(first, w.embedding.get(0, 0));
    }

    #[test]
    fn rejects_bad_input() {
        let w = init_weights(&small()).unwrap();
        let bytes = write_weights(&w);
        assert!(matches!(read_weights(&bytes[..bytes.len() - 3]), Err(Error::Parse { .. })));
        assert!(matches!(read_weights(b"NOPE"), Err(Error::Parse { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[16..24].copy_from_slice(&3u64.to_le_bytes()); // n_heads=3 does not divide d_model=4
        assert!(matches!(read_weights(&bad), Err(Error::Parse { offset: 8, .. })));
    }
}
