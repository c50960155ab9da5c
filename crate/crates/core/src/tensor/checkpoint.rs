use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use memmap2::Mmap;

use super::dtype::{decode_f32, encode_f32, DType};
use crate::error::{Error, Result};

pub(crate) const METADATA_KEY: &str = "__metadata__";

#[derive(Clone)]
enum Storage {
    Owned(Vec<u8>),
    Mapped { map: Arc<Mmap>, range: Range<usize> },
}

impl Storage {
    fn bytes(&self) -> &[u8] {
        match self {
            Storage::Owned(v) => v,
            Storage::Mapped { map, range } => &map[range.clone()],
        }
    }
}

/// One named array: dtype, shape and a little-endian, row-major payload.
///
/// The payload is either owned or a window into a memory-mapped archive, so
/// loading a large checkpoint does not copy it into RAM.
#[derive(Clone)]
pub struct Tensor {
    dtype: DType,
    shape: Vec<usize>,
    data: Storage,
}

pub(crate) fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl Tensor {
    pub fn new(dtype: DType, shape: Vec<usize>, bytes: Vec<u8>) -> Result<Self> {
        check_len(dtype, &shape, bytes.len())?;
        Ok(Self {
            dtype,
            shape,
            data: Storage::Owned(bytes),
        })
    }

    pub(crate) fn mapped(
        dtype: DType,
        shape: Vec<usize>,
        map: Arc<Mmap>,
        range: Range<usize>,
    ) -> Result<Self> {
        check_len(dtype, &shape, range.len())?;
        Ok(Self {
            dtype,
            shape,
            data: Storage::Mapped { map, range },
        })
    }

    /// Build a `BF16` or `F32` tensor from f32 values, narrowing once.
    pub fn from_f32(dtype: DType, shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        let bytes = encode_f32(dtype, values)?;
        Self::new(dtype, shape, bytes)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.bytes().len() / self.dtype.size()
    }

    pub fn bytes(&self) -> &[u8] {
        self.data.bytes()
    }

    pub fn is_compute(&self) -> bool {
        self.dtype.is_compute()
    }

    /// Widen to f32. Fails for dtypes outside `BF16`/`F32`.
    pub fn to_f32(&self) -> Result<Vec<f32>> {
        decode_f32(self.dtype, self.bytes())
    }
}

fn check_len(dtype: DType, shape: &[usize], len: usize) -> Result<()> {
    let expected = element_count(shape)
        .and_then(|n| n.checked_mul(dtype.size()))
        .ok_or_else(|| Error::InvalidTensor {
            name: String::new(),
            detail: format!("shape {shape:?} overflows"),
        })?;
    if expected != len {
        return Err(Error::InvalidTensor {
            name: String::new(),
            detail: format!(
                "{dtype} shape {shape:?} needs {expected} bytes, payload has {len}"
            ),
        });
    }
    Ok(())
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.dtype == other.dtype && self.shape == other.shape && self.bytes() == other.bytes()
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("dtype", &self.dtype)
            .field("shape", &self.shape)
            .field("bytes", &self.bytes().len())
            .finish()
    }
}

/// Named tensors in lexicographic name order, plus optional string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
    metadata: Option<BTreeMap<String, String>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a tensor. Names must be unique and `__metadata__` is reserved.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name == METADATA_KEY {
            return Err(Error::InvalidTensor {
                name,
                detail: "reserved name".into(),
            });
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::DuplicateTensor(name));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    /// Insert-or-replace, for building outputs from a template.
    pub(crate) fn put(&mut self, name: String, tensor: Tensor) {
        self.tensors.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Names of the `BF16`/`F32` tensors, in order.
    pub fn compute_names(&self) -> Vec<&str> {
        self.iter()
            .filter(|(_, t)| t.is_compute())
            .map(|(n, _)| n)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn metadata(&self) -> Option<&BTreeMap<String, String>> {
        self.metadata.as_ref()
    }

    pub fn set_metadata(&mut self, metadata: Option<BTreeMap<String, String>>) {
        self.metadata = metadata;
    }

    /// Widen one tensor to f32.
    pub fn f32_values(&self, name: &str) -> Result<Vec<f32>> {
        self.tensor(name)?.to_f32()
    }
}
