//! Versioned binary checkpoints. Layout: magic, format version, storage
//! precision, model config as JSON, the content hash of the tokenizer the
//! model was trained against, then every tensor in the canonical traversal
//! order as little-endian values. Half precision is converted manually on
//! the way in and out.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::config::ModelConfig;
use super::params::{ModelParams, TensorMut, TensorRef};
use super::Scalar;

const MAGIC: &[u8; 8] = b"OBFCKPT\x01";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Half,
    Single,
    Double,
}

impl Precision {
    fn tag(self) -> u8 {
        match self {
            Precision::Half => 16,
            Precision::Single => 32,
            Precision::Double => 64,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            16 => Some(Precision::Half),
            32 => Some(Precision::Single),
            64 => Some(Precision::Double),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::Half => "bits16",
            Precision::Single => "bits32",
            Precision::Double => "bits64",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "bits16" => Some(Precision::Half),
            "bits32" => Some(Precision::Single),
            "bits64" => Some(Precision::Double),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown precision tag {0}")]
    BadPrecision(u8),
    #[error("invalid embedded config: {0}")]
    BadConfig(#[from] serde_json::Error),
    #[error("tensor {name} has {found} values, expected {expected}")]
    ShapeMismatch {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("trailing bytes after final tensor")]
    TrailingBytes,
}

pub struct Checkpoint<F> {
    pub params: ModelParams<F>,
    pub precision: Precision,
    /// Content hash of the tokenizer the weights were trained with.
    /// Callers compare it against the tokenizer they are about to use.
    pub tokenizer_hash: String,
}

/// Round-to-nearest-even conversion to IEEE 754 binary16.
pub fn f32_to_f16_bits(x: f32) -> u16 {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xff) as i32;
    let mant = bits & 0x007f_ffff;
    if exp == 0xff {
        let payload = if mant != 0 { 0x0200 } else { 0 };
        return sign | 0x7c00 | payload;
    }
    let unbiased = exp - 127;
    if unbiased > 15 {
        return sign | 0x7c00;
    }
    if unbiased >= -14 {
        let half_exp = ((unbiased + 15) as u16) << 10;
        let half_mant = (mant >> 13) as u16;
        let round_bit = (mant >> 12) & 1;
        let sticky = mant & 0x0fff;
        let mut out = sign | half_exp | half_mant;
        if round_bit == 1 && (sticky != 0 || half_mant & 1 == 1) {
            out += 1;
        }
        return out;
    }
    if unbiased < -25 {
        return sign;
    }
    let full_mant = mant | 0x0080_0000;
    let shift = (-14 - unbiased + 13) as u32;
    let half_mant = (full_mant >> shift) as u16;
    let round_bit = (full_mant >> (shift - 1)) & 1;
    let sticky = full_mant & ((1 << (shift - 1)) - 1);
    let mut out = sign | half_mant;
    if round_bit == 1 && (sticky != 0 || half_mant & 1 == 1) {
        out += 1;
    }
    out
}

pub fn f16_bits_to_f32(bits: u16) -> f32 {
    let sign = ((bits & 0x8000) as u32) << 16;
    let exp = ((bits >> 10) & 0x1f) as u32;
    let mant = (bits & 0x03ff) as u32;
    let out = if exp == 0x1f {
        sign | 0x7f80_0000 | (mant << 13)
    } else if exp == 0 {
        if mant == 0 {
            sign
        } else {
            let mut e = -1i32;
            let mut m = mant;
            while m & 0x0400 == 0 {
                m <<= 1;
                e -= 1;
            }
            let m = m & 0x03ff;
            sign | (((127 - 15 + e + 1) as u32) << 23) | (m << 13)
        }
    } else {
        sign | ((exp + 127 - 15) << 23) | (mant << 13)
    };
    f32::from_bits(out)
}

/// Quantizes a value through half-precision storage and back.
pub fn round_through_f16(x: f64) -> f64 {
    f16_bits_to_f32(f32_to_f16_bits(x as f32)) as f64
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    params: &ModelParams<F>,
    precision: Precision,
    tokenizer_hash: &str,
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, FORMAT_VERSION)?;
    w.write_all(&[precision.tag()])?;
    let config_json = serde_json::to_vec(&params.config)?;
    write_u32(&mut w, config_json.len() as u32)?;
    w.write_all(&config_json)?;
    write_u32(&mut w, tokenizer_hash.len() as u32)?;
    w.write_all(tokenizer_hash.as_bytes())?;
    let mut result: std::io::Result<()> = Ok(());
    params.visit(&mut |_, t| {
        if result.is_err() {
            return;
        }
        let values: Vec<f64> = match t {
            TensorRef::One(a) => a.iter().map(|x| x.as_f64()).collect(),
            TensorRef::Two(a) => a.iter().map(|x| x.as_f64()).collect(),
        };
        result = (|| {
            write_u32(&mut w, values.len() as u32)?;
            for v in values {
                match precision {
                    Precision::Half => w.write_all(&f32_to_f16_bits(v as f32).to_le_bytes())?,
                    Precision::Single => w.write_all(&(v as f32).to_le_bytes())?,
                    Precision::Double => w.write_all(&v.to_le_bytes())?,
                }
            }
            Ok(())
        })();
    });
    result?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<Checkpoint<F>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let precision = Precision::from_tag(tag[0]).ok_or(CheckpointError::BadPrecision(tag[0]))?;
    let config_len = read_u32(&mut r)? as usize;
    let mut config_buf = vec![0u8; config_len];
    r.read_exact(&mut config_buf)?;
    let config: ModelConfig = serde_json::from_slice(&config_buf)?;
    let hash_len = read_u32(&mut r)? as usize;
    let mut hash_buf = vec![0u8; hash_len];
    r.read_exact(&mut hash_buf)?;
    let tokenizer_hash = String::from_utf8_lossy(&hash_buf).into_owned();

    let mut params = ModelParams::<F>::zeros(&config);
    let mut result: Result<(), CheckpointError> = Ok(());
    params.visit_mut(&mut |name, t| {
        if result.is_err() {
            return;
        }
        result = (|| {
            let expected = match &t {
                TensorMut::One(a) => a.len(),
                TensorMut::Two(a) => a.len(),
            };
            let found = read_u32(&mut r)? as usize;
            if found != expected {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.to_string(),
                    expected,
                    found,
                });
            }
            let next = |r: &mut BufReader<File>| -> std::io::Result<F> {
                Ok(match precision {
                    Precision::Half => {
                        let mut b = [0u8; 2];
                        r.read_exact(&mut b)?;
                        F::of_f64(f16_bits_to_f32(u16::from_le_bytes(b)) as f64)
                    }
                    Precision::Single => {
                        let mut b = [0u8; 4];
                        r.read_exact(&mut b)?;
                        F::of_f64(f32::from_le_bytes(b) as f64)
                    }
                    Precision::Double => {
                        let mut b = [0u8; 8];
                        r.read_exact(&mut b)?;
                        F::of_f64(f64::from_le_bytes(b))
                    }
                })
            };
            match t {
                TensorMut::One(a) => {
                    for x in a.iter_mut() {
                        *x = next(&mut r)?;
                    }
                }
                TensorMut::Two(a) => {
                    for x in a.iter_mut() {
                        *x = next(&mut r)?;
                    }
                }
            }
            Ok(())
        })();
    });
    result?;
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(CheckpointError::TrailingBytes);
    }
    Ok(Checkpoint {
        params,
        precision,
        tokenizer_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::super::config::{Role, SizePreset};
    use super::super::params::init_params;
    use super::*;

    #[test]
    fn half_conversion_exact_values() {
        for (x, bits) in [
            (0.0f32, 0x0000u16),
            (1.0, 0x3c00),
            (-2.0, 0xc000),
            (0.5, 0x3800),
            (65504.0, 0x7bff),
        ] {
            assert_eq!(f32_to_f16_bits(x), bits, "{x}");
            assert_eq!(f16_bits_to_f32(bits), x);
        }
        assert_eq!(f32_to_f16_bits(1e6), 0x7c00);
        assert!(f16_bits_to_f32(0x7c00).is_infinite());
        assert!(f16_bits_to_f32(0x7e00).is_nan());
    }

    #[test]
    fn half_round_trip_error_is_bounded() {
        let mut x = -8.0f32;
        while x < 8.0 {
            let back = f16_bits_to_f32(f32_to_f16_bits(x));
            let tol = (x.abs() * 1e-3).max(1e-7);
            assert!((back - x).abs() <= tol, "{x} -> {back}");
            x += 0.0037;
        }
    }

    #[test]
    fn save_load_round_trip_single() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let config = ModelConfig::preset(SizePreset::Miniature, Role::Discriminator, 40, 16);
        let params = init_params::<f32>(&config, 3);
        save_checkpoint(&path, &params, Precision::Single, "abc123").unwrap();
        let loaded = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(loaded.precision, Precision::Single);
        assert_eq!(loaded.tokenizer_hash, "abc123");
        assert_eq!(loaded.params, params);
    }

    #[test]
    fn save_load_round_trip_half_is_close() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let config = ModelConfig::preset(SizePreset::Miniature, Role::Generator, 30, 16);
        let params = init_params::<f32>(&config, 4);
        save_checkpoint(&path, &params, Precision::Half, "h").unwrap();
        let loaded = load_checkpoint::<f32>(&path).unwrap();
        let mut max_err = 0.0f32;
        let mut orig = Vec::new();
        params.visit(&mut |_, t| match t {
            super::super::params::TensorRef::One(a) => orig.extend(a.iter().copied()),
            super::super::params::TensorRef::Two(a) => orig.extend(a.iter().copied()),
        });
        let mut idx = 0;
        loaded.params.visit(&mut |_, t| {
            let vals: Vec<f32> = match t {
                super::super::params::TensorRef::One(a) => a.iter().copied().collect(),
                super::super::params::TensorRef::Two(a) => a.iter().copied().collect(),
            };
            for v in vals {
                max_err = max_err.max((v - orig[idx]).abs());
                idx += 1;
            }
        });
        // init values are within [-0.04, 0.04] plus ones; binary16 keeps
        // 10 mantissa bits so worst case error stays tiny.
        assert!(max_err < 5e-4, "max err {max_err}");
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(CheckpointError::BadMagic)
        ));
    }
}
