//! Tensor container format: a JSON sidecar describing dtype, shape, memory
//! order, and endianness, next to a raw little-endian binary blob.
//!
//! The blob lives at the sidecar path with its extension replaced by `bin`,
//! and its byte length must equal `product(shape) * size_of(dtype)`.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const ORDER_ROW_MAJOR: &str = "row-major";
pub const ENDIAN_LITTLE: &str = "little";

#[derive(Debug)]
pub enum ContainerError {
    Io(PathBuf, std::io::Error),
    Meta(PathBuf, String),
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        got: usize,
    },
    DtypeMismatch {
        path: PathBuf,
        expected: &'static str,
        got: String,
    },
}

impl fmt::Display for ContainerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContainerError::Io(p, e) => write!(f, "{}: {e}", p.display()),
            ContainerError::Meta(p, m) => write!(f, "{}: {m}", p.display()),
            ContainerError::SizeMismatch {
                path,
                expected,
                got,
            } => write!(
                f,
                "{}: blob holds {got} bytes, sidecar expects {expected}",
                path.display()
            ),
            ContainerError::DtypeMismatch {
                path,
                expected,
                got,
            } => write!(
                f,
                "{}: expected dtype {expected}, found {got}",
                path.display()
            ),
        }
    }
}

impl std::error::Error for ContainerError {}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorMeta {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub order: String,
    pub endianness: String,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::F64(_) => "f64",
            TensorData::I32(_) => "i32",
            TensorData::U8(_) => "u8",
        }
    }

    fn elem_size(dtype: &str) -> Option<usize> {
        match dtype {
            "f32" | "i32" => Some(4),
            "f64" => Some(8),
            "u8" => Some(1),
            _ => None,
        }
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::U8(v) => v.clone(),
        }
    }

    fn from_le_bytes(dtype: &str, bytes: &[u8]) -> Option<TensorData> {
        Some(match dtype {
            "f32" => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            "f64" => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            "i32" => TensorData::I32(
                bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            "u8" => TensorData::U8(bytes.to_vec()),
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorContainer {
    pub meta: TensorMeta,
    pub data: TensorData,
}

impl TensorContainer {
    fn new(name: &str, shape: Vec<usize>, data: TensorData) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor {name}: shape does not match data length"
        );
        TensorContainer {
            meta: TensorMeta {
                dtype: data.dtype().to_string(),
                shape,
                order: ORDER_ROW_MAJOR.to_string(),
                endianness: ENDIAN_LITTLE.to_string(),
                name: name.to_string(),
            },
            data,
        }
    }

    pub fn f32(name: &str, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self::new(name, shape, TensorData::F32(data))
    }

    pub fn f64(name: &str, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self::new(name, shape, TensorData::F64(data))
    }

    pub fn i32(name: &str, shape: Vec<usize>, data: Vec<i32>) -> Self {
        Self::new(name, shape, TensorData::I32(data))
    }

    pub fn u8(name: &str, shape: Vec<usize>, data: Vec<u8>) -> Self {
        Self::new(name, shape, TensorData::U8(data))
    }

    pub fn blob_path(sidecar: &Path) -> PathBuf {
        sidecar.with_extension("bin")
    }

    /// Writes `<path>` (JSON sidecar) and `<path with .bin>` (blob).
    pub fn write(&self, sidecar: &Path) -> Result<(), ContainerError> {
        let io = |e: std::io::Error| ContainerError::Io(sidecar.to_path_buf(), e);
        if let Some(parent) = sidecar.parent() {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let json = serde_json::to_string_pretty(&self.meta)
            .map_err(|e| ContainerError::Meta(sidecar.to_path_buf(), e.to_string()))?;
        let mut f = fs::File::create(sidecar).map_err(io)?;
        f.write_all(json.as_bytes()).map_err(io)?;
        f.write_all(b"\n").map_err(io)?;
        let blob = Self::blob_path(sidecar);
        fs::write(&blob, self.data.to_le_bytes())
            .map_err(|e| ContainerError::Io(blob.clone(), e))?;
        Ok(())
    }

    pub fn read(sidecar: &Path) -> Result<Self, ContainerError> {
        let text = fs::read_to_string(sidecar)
            .map_err(|e| ContainerError::Io(sidecar.to_path_buf(), e))?;
        let meta: TensorMeta = serde_json::from_str(&text)
            .map_err(|e| ContainerError::Meta(sidecar.to_path_buf(), e.to_string()))?;
        if meta.order != ORDER_ROW_MAJOR {
            return Err(ContainerError::Meta(
                sidecar.to_path_buf(),
                format!("unsupported order {:?}", meta.order),
            ));
        }
        if meta.endianness != ENDIAN_LITTLE {
            return Err(ContainerError::Meta(
                sidecar.to_path_buf(),
                format!("unsupported endianness {:?}", meta.endianness),
            ));
        }
        let elem = TensorData::elem_size(&meta.dtype).ok_or_else(|| {
            ContainerError::Meta(sidecar.to_path_buf(), format!("unknown dtype {:?}", meta.dtype))
        })?;
        let blob_path = Self::blob_path(sidecar);
        let bytes =
            fs::read(&blob_path).map_err(|e| ContainerError::Io(blob_path.clone(), e))?;
        let expected = meta.shape.iter().product::<usize>() * elem;
        if bytes.len() != expected {
            return Err(ContainerError::SizeMismatch {
                path: blob_path,
                expected,
                got: bytes.len(),
            });
        }
        let data = TensorData::from_le_bytes(&meta.dtype, &bytes).unwrap();
        Ok(TensorContainer { meta, data })
    }

    pub fn as_f64(&self, sidecar_hint: &Path) -> Result<&[f64], ContainerError> {
        match &self.data {
            TensorData::F64(v) => Ok(v),
            other => Err(ContainerError::DtypeMismatch {
                path: sidecar_hint.to_path_buf(),
                expected: "f64",
                got: other.dtype().to_string(),
            }),
        }
    }

    pub fn as_f32(&self, sidecar_hint: &Path) -> Result<&[f32], ContainerError> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(ContainerError::DtypeMismatch {
                path: sidecar_hint.to_path_buf(),
                expected: "f32",
                got: other.dtype().to_string(),
            }),
        }
    }

    pub fn as_i32(&self, sidecar_hint: &Path) -> Result<&[i32], ContainerError> {
        match &self.data {
            TensorData::I32(v) => Ok(v),
            other => Err(ContainerError::DtypeMismatch {
                path: sidecar_hint.to_path_buf(),
                expected: "i32",
                got: other.dtype().to_string(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("geovoxel-container-{name}-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn roundtrip_all_dtypes_bit_exact() {
        let dir = tmpdir("roundtrip");
        let cases = vec![
            TensorContainer::f32("a", vec![2, 3], vec![1.0, -2.5, 0.0, f32::MIN, f32::MAX, 3.25]),
            TensorContainer::f64("b", vec![4], vec![0.1, -0.2, f64::NAN, 1e300]),
            TensorContainer::i32("c", vec![2, 2], vec![i32::MIN, -1, 0, i32::MAX]),
            TensorContainer::u8("d", vec![5], vec![0, 1, 2, 254, 255]),
        ];
        for c in cases {
            let path = dir.join(format!("{}.json", c.meta.name));
            c.write(&path).unwrap();
            let back = TensorContainer::read(&path).unwrap();
            assert_eq!(back.meta, c.meta);
            // NaN-safe bit comparison
            match (&back.data, &c.data) {
                (TensorData::F64(x), TensorData::F64(y)) => {
                    assert_eq!(x.len(), y.len());
                    for (a, b) in x.iter().zip(y) {
                        assert_eq!(a.to_bits(), b.to_bits());
                    }
                }
                (a, b) => assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn read_rejects_bad_blob_length() {
        let dir = tmpdir("badlen");
        let c = TensorContainer::f64("x", vec![3], vec![1.0, 2.0, 3.0]);
        let path = dir.join("x.json");
        c.write(&path).unwrap();
        fs::write(dir.join("x.bin"), [0u8; 7]).unwrap();
        assert!(matches!(
            TensorContainer::read(&path),
            Err(ContainerError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn read_rejects_unknown_dtype_and_order() {
        let dir = tmpdir("badmeta");
        let path = dir.join("y.json");
        fs::write(
            &path,
            r#"{"dtype":"f16","shape":[1],"order":"row-major","endianness":"little","name":"y"}"#,
        )
        .unwrap();
        fs::write(dir.join("y.bin"), [0u8; 2]).unwrap();
        assert!(matches!(
            TensorContainer::read(&path),
            Err(ContainerError::Meta(..))
        ));

        fs::write(
            &path,
            r#"{"dtype":"f32","shape":[1],"order":"col-major","endianness":"little","name":"y"}"#,
        )
        .unwrap();
        fs::write(dir.join("y.bin"), [0u8; 4]).unwrap();
        assert!(matches!(
            TensorContainer::read(&path),
            Err(ContainerError::Meta(..))
        ));
    }
}
