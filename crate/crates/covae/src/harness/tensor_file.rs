//! Portable binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"CVRT"
//! version u32 (currently 1)
//! dtype   u8  (0 = f32, 1 = f64, 2 = bool, 3 = c64)
//! rank    u8
//! dims    rank x u64
//! payload row-major elements
//! ```
//!
//! `c64` elements are complex numbers stored as two f64 components
//! (re, im), so measurement values round-trip exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"CVRT";
pub const TENSOR_VERSION: u32 = 1;

/// A dynamically-typed, dynamically-ranked tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
    Bool(ArrayD<bool>),
    C64(ArrayD<Complex64>),
}

impl Tensor {
    pub fn dtype_name(&self) -> &'static str {
        match self {
            Tensor::F32(_) => "f32",
            Tensor::F64(_) => "f64",
            Tensor::Bool(_) => "bool",
            Tensor::C64(_) => "c64",
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Tensor::F32(a) => a.shape(),
            Tensor::F64(a) => a.shape(),
            Tensor::Bool(a) => a.shape(),
            Tensor::C64(a) => a.shape(),
        }
    }

    fn dtype_code(&self) -> u8 {
        match self {
            Tensor::F32(_) => 0,
            Tensor::F64(_) => 1,
            Tensor::Bool(_) => 2,
            Tensor::C64(_) => 3,
        }
    }

    /// Interprets the tensor as an f64 array of any rank.
    pub fn as_f64(&self) -> Result<&ArrayD<f64>> {
        match self {
            Tensor::F64(a) => Ok(a),
            other => Err(Error::Corrupt {
                path: String::new(),
                reason: format!("expected f64 tensor, found {}", other.dtype_name()),
            }),
        }
    }

    /// Widens f32 data to f64; accepts either float dtype.
    pub fn as_f64_any(&self) -> Result<ArrayD<f64>> {
        match self {
            Tensor::F64(a) => Ok(a.clone()),
            Tensor::F32(a) => Ok(a.mapv(f64::from)),
            other => Err(Error::Corrupt {
                path: String::new(),
                reason: format!("expected a float tensor, found {}", other.dtype_name()),
            }),
        }
    }

    pub fn as_bool(&self) -> Result<&ArrayD<bool>> {
        match self {
            Tensor::Bool(a) => Ok(a),
            other => Err(Error::Corrupt {
                path: String::new(),
                reason: format!("expected bool tensor, found {}", other.dtype_name()),
            }),
        }
    }

    pub fn as_c64(&self) -> Result<&ArrayD<Complex64>> {
        match self {
            Tensor::C64(a) => Ok(a),
            other => Err(Error::Corrupt {
                path: String::new(),
                reason: format!("expected c64 tensor, found {}", other.dtype_name()),
            }),
        }
    }
}

impl From<ndarray::Array1<f64>> for Tensor {
    fn from(a: ndarray::Array1<f64>) -> Self {
        Tensor::F64(a.into_dyn())
    }
}

impl From<ndarray::Array2<f64>> for Tensor {
    fn from(a: ndarray::Array2<f64>) -> Self {
        Tensor::F64(a.into_dyn())
    }
}

impl From<ndarray::Array3<f64>> for Tensor {
    fn from(a: ndarray::Array3<f64>) -> Self {
        Tensor::F64(a.into_dyn())
    }
}

impl From<ndarray::Array2<bool>> for Tensor {
    fn from(a: ndarray::Array2<bool>) -> Self {
        Tensor::Bool(a.into_dyn())
    }
}

impl From<ndarray::Array1<Complex64>> for Tensor {
    fn from(a: ndarray::Array1<Complex64>) -> Self {
        Tensor::C64(a.into_dyn())
    }
}

fn corrupt(path: &str, reason: impl Into<String>) -> Error {
    Error::Corrupt { path: path.to_string(), reason: reason.into() }
}

pub(crate) fn write_tensor_to(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&[t.dtype_code(), t.shape().len() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match t {
        Tensor::F32(a) => {
            for &v in a.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Tensor::F64(a) => {
            for &v in a.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Tensor::Bool(a) => {
            for &v in a.iter() {
                w.write_all(&[v as u8])?;
            }
        }
        Tensor::C64(a) => {
            for &v in a.iter() {
                w.write_all(&v.re.to_le_bytes())?;
                w.write_all(&v.im.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub(crate) fn read_tensor_from(r: &mut impl Read, path: &str) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| corrupt(path, "file too short for magic bytes"))?;
    if &magic != TENSOR_MAGIC {
        return Err(corrupt(path, format!("bad magic {magic:?}")));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v).map_err(|_| corrupt(path, "truncated version"))?;
    let version = u32::from_le_bytes(v);
    if version != TENSOR_VERSION {
        return Err(Error::Version { expected: TENSOR_VERSION, found: version });
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head).map_err(|_| corrupt(path, "truncated header"))?;
    let (dtype, rank) = (head[0], head[1] as usize);
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 8];
        r.read_exact(&mut d).map_err(|_| corrupt(path, "truncated dims"))?;
        dims.push(u64::from_le_bytes(d) as usize);
    }
    let count: usize = dims.iter().product();
    let shape = IxDyn(&dims);

    let elem_size = match dtype {
        0 => 4,
        1 => 8,
        2 => 1,
        3 => 16,
        other => return Err(corrupt(path, format!("unknown dtype code {other}"))),
    };
    let mut payload = vec![0u8; count * elem_size];
    r.read_exact(&mut payload)
        .map_err(|_| corrupt(path, "truncated payload"))?;

    let tensor = match dtype {
        0 => Tensor::F32(
            ArrayD::from_shape_vec(
                shape,
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
            .map_err(|e| corrupt(path, e.to_string()))?,
        ),
        1 => Tensor::F64(
            ArrayD::from_shape_vec(
                shape,
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
            .map_err(|e| corrupt(path, e.to_string()))?,
        ),
        2 => {
            if let Some(bad) = payload.iter().find(|&&b| b > 1) {
                return Err(corrupt(path, format!("bool payload byte {bad}")));
            }
            Tensor::Bool(
                ArrayD::from_shape_vec(shape, payload.iter().map(|&b| b == 1).collect())
                    .map_err(|e| corrupt(path, e.to_string()))?,
            )
        }
        3 => Tensor::C64(
            ArrayD::from_shape_vec(
                shape,
                payload
                    .chunks_exact(16)
                    .map(|c| {
                        Complex64::new(
                            f64::from_le_bytes(c[..8].try_into().unwrap()),
                            f64::from_le_bytes(c[8..].try_into().unwrap()),
                        )
                    })
                    .collect(),
            )
            .map_err(|e| corrupt(path, e.to_string()))?,
        ),
        _ => unreachable!("dtype validated above"),
    };
    Ok(tensor)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path.display().to_string())
        } else {
            Error::Io(e)
        }
    })?);
    let t = read_tensor_from(&mut r, &path.display().to_string())?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(corrupt(
            &path.display().to_string(),
            "trailing bytes after payload",
        ));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2, Array3};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use tempfile::tempdir;

    #[test]
    fn round_trip_f32() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.cvrt");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a =
            Array3::from_shape_simple_fn((3, 32, 32), || rng.sample::<f64, _>(StandardNormal) as f32);
        write_tensor(&path, &Tensor::F32(a.clone().into_dyn())).unwrap();
        match read_tensor(&path).unwrap() {
            Tensor::F32(b) => assert_eq!(b, a.into_dyn()),
            other => panic!("wrong dtype {}", other.dtype_name()),
        }
    }

    #[test]
    fn round_trip_f64_and_c64_bit_exact() {
        let dir = tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Array2::from_shape_simple_fn((7, 5), || rng.sample::<f64, _>(StandardNormal));
        let pa = dir.path().join("a.cvrt");
        write_tensor(&pa, &a.clone().into()).unwrap();
        assert_eq!(read_tensor(&pa).unwrap(), Tensor::F64(a.into_dyn()));

        let c = Array1::from_shape_simple_fn(11, || {
            Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
        });
        let pc = dir.path().join("c.cvrt");
        write_tensor(&pc, &c.clone().into()).unwrap();
        assert_eq!(read_tensor(&pc).unwrap(), Tensor::C64(c.into_dyn()));
    }

    #[test]
    fn round_trip_bool_mask() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.cvrt");
        let mask = Array2::from_shape_fn((16, 16), |(y, x)| (y * 16 + x) % 3 == 0);
        write_tensor(&path, &mask.clone().into()).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), Tensor::Bool(mask.into_dyn()));
    }

    #[test]
    fn truncated_payload_is_corruption() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.cvrt");
        let a = Array2::<f64>::ones((4, 4));
        write_tensor(&path, &a.into()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        match read_tensor(&path) {
            Err(Error::Corrupt { reason, .. }) => assert!(reason.contains("truncated")),
            other => panic!("expected corruption, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("b.cvrt");
        let a = Array2::<f64>::ones((2, 2));
        write_tensor(&path, &a.into()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Corrupt { .. })));

        let a = Array2::<f64>::ones((2, 2));
        write_tensor(&path, &a.into()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_tensor(&path),
            Err(Error::Version { expected: 1, found: 99 })
        ));
    }
}
