//! Little-endian binary formats for weights and input sequences.
//!
//! Weights (`RNNW`):
//!
//! | offset | size | field                              |
//! |--------|------|------------------------------------|
//! | 0      | 4    | magic `RNNW`                       |
//! | 4      | 4    | format version (u32) = 1           |
//! | 8      | 1    | cell kind: 0 LSTM, 1 SRU, 2 QRNN   |
//! | 9      | 1    | precision: 0 f32, 1 f64            |
//! | 10     | 4    | d_in (u32)                         |
//! | 14     | 4    | d_h (u32)                          |
//! | 18     | 4    | n_layers (u32)                     |
//! | 22     | ...  | parameters, canonical order        |
//!
//! Sequences (`RNNX`): magic, version (u32), L (u32), d (u32), then the rows.
//! The element width is not stored; readers name the precision they expect
//! and the payload length must match it exactly.

use std::fs;
use std::path::Path;

use crate::cells::{CellKind, LayerWeights};
use crate::error::{Error, Result};
use crate::numeric::{Matrix, Precision, Scalar};

use super::{count_params, AnyWeightSet, RnnConfig, WeightSet};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"RNNW";
pub const SEQUENCE_MAGIC: [u8; 4] = *b"RNNX";
pub const FORMAT_VERSION: u32 = 1;
pub const WEIGHTS_HEADER_LEN: usize = 22;
pub const SEQUENCE_HEADER_LEN: usize = 16;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in a u32 header field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn need(bytes: &[u8], needed: usize) -> Result<()> {
    if bytes.len() < needed {
        return Err(Error::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    Ok(())
}

fn check_magic(bytes: &[u8], expected: [u8; 4]) -> Result<()> {
    need(bytes, 4)?;
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

fn check_version(bytes: &[u8]) -> Result<()> {
    need(bytes, 8)?;
    let found = u32_at(bytes, 4);
    if found != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found,
        });
    }
    Ok(())
}

fn check_exact_len(bytes: &[u8], expected: usize) -> Result<()> {
    need(bytes, expected)?;
    if bytes.len() > expected {
        return Err(Error::ShapeInconsistent(format!(
            "{} trailing bytes after {expected}-byte payload",
            bytes.len() - expected
        )));
    }
    Ok(())
}

fn read_elems<S: Scalar>(bytes: &[u8], count: usize) -> Vec<S> {
    let width = S::PRECISION.bytes();
    bytes[..count * width].chunks_exact(width).map(S::read_le).collect()
}

pub fn encode_weights<S: Scalar>(ws: &WeightSet<S>) -> Result<Vec<u8>> {
    let cfg = ws.config();
    let params = count_params(cfg)? as usize;
    let mut out = Vec::with_capacity(WEIGHTS_HEADER_LEN + params * S::PRECISION.bytes());
    out.extend_from_slice(&WEIGHTS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(cfg.kind.code());
    out.push(cfg.precision.code());
    put_u32(&mut out, cfg.d_in)?;
    put_u32(&mut out, cfg.d_h)?;
    put_u32(&mut out, cfg.n_layers)?;
    for layer in ws.layers() {
        for buf in layer.buffers() {
            for &v in buf {
                v.write_le(&mut out);
            }
        }
    }
    Ok(out)
}

/// Parses a weight file. The payload size implied by the header is checked
/// against the input before anything is allocated for it.
pub fn decode_weights(bytes: &[u8]) -> Result<AnyWeightSet> {
    check_magic(bytes, WEIGHTS_MAGIC)?;
    check_version(bytes)?;
    need(bytes, WEIGHTS_HEADER_LEN)?;
    let kind = CellKind::from_code(bytes[8])
        .ok_or_else(|| Error::ShapeInconsistent(format!("unknown cell kind code {}", bytes[8])))?;
    let precision = Precision::from_code(bytes[9])
        .ok_or_else(|| Error::ShapeInconsistent(format!("unknown precision code {}", bytes[9])))?;
    let cfg = RnnConfig {
        kind,
        d_in: u32_at(bytes, 10) as usize,
        d_h: u32_at(bytes, 14) as usize,
        n_layers: u32_at(bytes, 18) as usize,
        precision,
    };
    cfg.validate().map_err(|e| Error::ShapeInconsistent(e.to_string()))?;
    let params = count_params(&cfg)?;
    let expected = params
        .checked_mul(precision.bytes() as u64)
        .and_then(|b| b.checked_add(WEIGHTS_HEADER_LEN as u64))
        .and_then(|b| usize::try_from(b).ok())
        .ok_or_else(|| Error::ShapeInconsistent(format!("header describes an impossible size ({cfg})")))?;
    check_exact_len(bytes, expected)?;
    let payload = &bytes[WEIGHTS_HEADER_LEN..];
    Ok(match precision {
        Precision::F32 => AnyWeightSet::F32(decode_layers(&cfg, payload)?),
        Precision::F64 => AnyWeightSet::F64(decode_layers(&cfg, payload)?),
    })
}

fn decode_layers<S: Scalar>(cfg: &RnnConfig, mut payload: &[u8]) -> Result<WeightSet<S>> {
    let width = S::PRECISION.bytes();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let (d_in, d_h) = cfg.layer_dims(l);
        let mut buffers = Vec::new();
        for (r, c) in LayerWeights::<S>::buffer_shapes(cfg.kind, d_in, d_h) {
            let n = r * c;
            buffers.push(read_elems(payload, n));
            payload = &payload[n * width..];
        }
        layers.push(LayerWeights::from_buffers(cfg.kind, d_in, d_h, buffers)?);
    }
    WeightSet::new(*cfg, layers)
}

pub fn save_weights<S: Scalar>(ws: &WeightSet<S>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_weights(ws)?)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<AnyWeightSet> {
    decode_weights(&fs::read(path)?)
}

/// Loads a weight file that must hold elements of type `S`.
pub fn load_weights_as<S: Scalar>(path: impl AsRef<Path>) -> Result<WeightSet<S>> {
    let any = load_weights(path)?;
    let found = any.config().precision;
    let requested = S::PRECISION;
    let mismatch = Error::PrecisionMismatch {
        found: found.name(),
        requested: requested.name(),
    };
    // Downcast through the concrete enum arm matching S.
    let boxed: Box<dyn std::any::Any> = match any {
        AnyWeightSet::F32(w) => Box::new(w),
        AnyWeightSet::F64(w) => Box::new(w),
    };
    boxed.downcast::<WeightSet<S>>().map(|b| *b).map_err(|_| mismatch)
}

pub fn encode_sequence<S: Scalar>(x: &Matrix<S>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(SEQUENCE_HEADER_LEN + x.data().len() * S::PRECISION.bytes());
    out.extend_from_slice(&SEQUENCE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, x.rows())?;
    put_u32(&mut out, x.cols())?;
    for &v in x.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

pub fn decode_sequence<S: Scalar>(bytes: &[u8]) -> Result<Matrix<S>> {
    check_magic(bytes, SEQUENCE_MAGIC)?;
    check_version(bytes)?;
    need(bytes, SEQUENCE_HEADER_LEN)?;
    let len = u32_at(bytes, 8) as usize;
    let width = u32_at(bytes, 12) as usize;
    if len == 0 || width == 0 {
        return Err(Error::ShapeInconsistent(format!("sequence shape {len}x{width}")));
    }
    let count = len
        .checked_mul(width)
        .ok_or_else(|| Error::ShapeInconsistent(format!("sequence shape {len}x{width} overflows")))?;
    let expected = count
        .checked_mul(S::PRECISION.bytes())
        .and_then(|b| b.checked_add(SEQUENCE_HEADER_LEN))
        .ok_or_else(|| Error::ShapeInconsistent(format!("sequence shape {len}x{width} overflows")))?;
    check_exact_len(bytes, expected)?;
    Matrix::from_vec(len, width, read_elems(&bytes[SEQUENCE_HEADER_LEN..], count))
}

pub fn save_sequence<S: Scalar>(x: &Matrix<S>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_sequence(x)?)?;
    Ok(())
}

pub fn load_sequence<S: Scalar>(path: impl AsRef<Path>) -> Result<Matrix<S>> {
    decode_sequence(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_sequence, generate_weights, ModelPreset};

    fn sru(width: usize) -> WeightSet<f32> {
        generate_weights(&RnnConfig::square(CellKind::Sru, width, Precision::F32), 3).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = encode_weights(&sru(4)).unwrap();
        assert_eq!(&bytes[..4], b"RNNW");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(bytes[8], 1);
        assert_eq!(bytes[9], 0);
        assert_eq!(&bytes[10..22], &[4, 0, 0, 0, 4, 0, 0, 0, 1, 0, 0, 0]);
    }

    #[test]
    fn sru_small_file_size() {
        let cfg = "sru-small".parse::<ModelPreset>().unwrap().config(Precision::F32);
        let ws = generate_weights::<f32>(&cfg, 1).unwrap();
        assert_eq!(encode_weights(&ws).unwrap().len(), 22 + 4 * 787_456);
    }

    #[test]
    fn weight_errors_are_distinct() {
        let good = encode_weights(&sru(3)).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_weights(&bad), Err(Error::BadMagic { .. })));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(
            decode_weights(&bad),
            Err(Error::VersionMismatch { found: 2, .. })
        ));

        assert!(matches!(
            decode_weights(&good[..good.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(decode_weights(&good[..10]), Err(Error::Truncated { .. })));
        assert!(matches!(decode_weights(&good[..2]), Err(Error::Truncated { .. })));

        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(decode_weights(&bad), Err(Error::ShapeInconsistent(_))));

        let mut bad = good.clone();
        bad[10] = 5; // SRU with d_in != d_h
        assert!(matches!(decode_weights(&bad), Err(Error::ShapeInconsistent(_))));
    }

    #[test]
    fn huge_header_does_not_allocate() {
        let mut bytes = encode_weights(&sru(3)).unwrap();
        bytes[10..14].copy_from_slice(&u32::MAX.to_le_bytes());
        bytes[14..18].copy_from_slice(&u32::MAX.to_le_bytes());
        bytes[18..22].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_weights(&bytes).is_err());

        let mut seq = encode_sequence(&generate_sequence::<f32>(2, 2, 1).unwrap()).unwrap();
        seq[8..16].copy_from_slice(&[0xFF; 8]);
        assert!(decode_sequence::<f32>(&seq).is_err());
    }

    #[test]
    fn sequence_precision_is_checked() {
        let x = generate_sequence::<f64>(3, 2, 9).unwrap();
        let bytes = encode_sequence(&x).unwrap();
        assert_eq!(bytes.len(), 16 + 3 * 2 * 8);
        assert_eq!(decode_sequence::<f64>(&bytes).unwrap(), x);
        assert!(decode_sequence::<f32>(&bytes).is_err());
        let mut bad = bytes.clone();
        bad[3] = b'W';
        assert!(matches!(decode_sequence::<f64>(&bad), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn typed_load_checks_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        save_weights(&sru(2), &path).unwrap();
        assert!(load_weights_as::<f32>(&path).is_ok());
        assert!(matches!(
            load_weights_as::<f64>(&path),
            Err(Error::PrecisionMismatch { .. })
        ));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]

        #[test]
        fn weights_round_trip(
            kind in proptest::sample::select(CellKind::ALL.to_vec()),
            d in 1usize..12,
            layers in 1usize..4,
            seed: u64,
        ) {
            let cfg = RnnConfig::square(kind, d, Precision::F64).with_layers(layers);
            let ws = generate_weights::<f64>(&cfg, seed).unwrap();
            let bytes = encode_weights(&ws).unwrap();
            let AnyWeightSet::F64(back) = decode_weights(&bytes).unwrap() else {
                panic!("precision changed");
            };
            proptest::prop_assert_eq!(&back, &ws);
            proptest::prop_assert_eq!(encode_weights(&back).unwrap(), bytes);
        }

        #[test]
        fn sequence_round_trip(len in 1usize..40, d in 1usize..20, seed: u64) {
            let x = generate_sequence::<f32>(len, d, seed).unwrap();
            let bytes = encode_sequence(&x).unwrap();
            let back = decode_sequence::<f32>(&bytes).unwrap();
            proptest::prop_assert_eq!(encode_sequence(&back).unwrap(), bytes);
        }

        #[test]
        fn truncation_is_an_error(cut in 0usize..200) {
            let bytes = encode_weights(&sru(4)).unwrap();
            let cut = cut.min(bytes.len() - 1);
            proptest::prop_assert!(decode_weights(&bytes[..cut]).is_err());
        }
    }
}
