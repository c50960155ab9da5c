//! Single-file tensor archive.
//!
//! ```text
//! [0..8)        u64 little-endian N, the header length
//! [8..8+N)      UTF-8 JSON object:
//!                 "<name>": {"dtype": "BF16"|"F32"|..., "shape": [..],
//!                            "data_offsets": [begin, end]}
//!                 "__metadata__": {"<key>": "<string>", ...}   (optional)
//! [8+N..)       payload; offsets are relative to its first byte
//! ```
//!
//! Extents must be ascending once sorted, must not overlap, and must tile the
//! payload exactly. The writer emits `__metadata__` first, tensors in name
//! order, contiguous extents, and pads the header with spaces to a multiple of
//! eight bytes, so equal checkpoints serialize to identical bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use memmap2::Mmap;
use serde::de::{Deserializer, MapAccess, Visitor};
use serde::Deserialize;
use serde_json::Value;

use super::checkpoint::{element_count, Checkpoint, Tensor, METADATA_KEY};
use super::dtype::DType;
use crate::error::{Error, Result};

/// Header entries in file order, with duplicate keys preserved so they can be
/// rejected (a plain JSON map would keep only the last one).
struct RawHeader(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = RawHeader;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RawHeader, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    out.push((k, v));
                }
                Ok(RawHeader(out))
            }
        }
        d.deserialize_map(V)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInfo {
    dtype: String,
    shape: Vec<u64>,
    data_offsets: [u64; 2],
}

struct Entry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    begin: usize,
    end: usize,
}

struct Layout {
    payload_start: usize,
    entries: Vec<Entry>,
    metadata: Option<BTreeMap<String, String>>,
}

fn parse_layout(bytes: &[u8]) -> Result<Layout> {
    if bytes.len() < 8 {
        return Err(Error::Truncated(format!(
            "{} bytes, need at least 8 for the header length",
            bytes.len()
        )));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let avail = (bytes.len() - 8) as u64;
    if n > avail {
        return Err(Error::Truncated(format!(
            "header declares {n} bytes but only {avail} follow"
        )));
    }
    let payload_start = 8 + n as usize;
    let text = std::str::from_utf8(&bytes[8..payload_start])
        .map_err(|e| Error::Header(format!("header is not UTF-8: {e}")))?;
    let raw: RawHeader = serde_json::from_str(text)
        .map_err(|e| Error::Header(format!("header is not a JSON object: {e}")))?;
    let payload = (bytes.len() - payload_start) as u64;

    let mut metadata = None;
    let mut seen = std::collections::HashSet::new();
    let mut entries = Vec::with_capacity(raw.0.len());
    for (name, value) in raw.0 {
        if !seen.insert(name.clone()) {
            return Err(Error::DuplicateTensor(name));
        }
        if name == METADATA_KEY {
            let map: BTreeMap<String, String> = serde_json::from_value(value)
                .map_err(|e| Error::Header(format!("__metadata__ must map strings to strings: {e}")))?;
            metadata = Some(map);
            continue;
        }
        let info: RawInfo = serde_json::from_value(value)
            .map_err(|e| Error::Header(format!("entry `{name}`: {e}")))?;
        let dtype = DType::from_tag(&info.dtype)?;
        let [begin, end] = info.data_offsets;
        if begin > end {
            return Err(Error::ExtentLayout(format!(
                "tensor `{name}` has inverted extent {begin}..{end}"
            )));
        }
        if end > payload {
            return Err(Error::PayloadOverrun {
                name,
                begin,
                end,
                payload,
            });
        }
        let shape = info
            .shape
            .iter()
            .map(|&d| usize::try_from(d))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::InvalidTensor {
                name: name.clone(),
                detail: "dimension does not fit in usize".into(),
            })?;
        let needed = element_count(&shape)
            .and_then(|c| c.checked_mul(dtype.size()))
            .ok_or_else(|| Error::InvalidTensor {
                name: name.clone(),
                detail: format!("shape {shape:?} overflows"),
            })?;
        if needed as u64 != end - begin {
            return Err(Error::InvalidTensor {
                name,
                detail: format!(
                    "{dtype} shape {shape:?} needs {needed} bytes but extent holds {}",
                    end - begin
                ),
            });
        }
        entries.push(Entry {
            name,
            dtype,
            shape,
            begin: begin as usize,
            end: end as usize,
        });
    }

    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by_key(|&i| (entries[i].begin, entries[i].end));
    let mut cursor = 0usize;
    for &i in &order {
        let e = &entries[i];
        if e.begin < cursor {
            return Err(Error::ExtentLayout(format!(
                "tensor `{}` extent {}..{} overlaps the previous one ending at {cursor}",
                e.name, e.begin, e.end
            )));
        }
        if e.begin > cursor {
            return Err(Error::ExtentLayout(format!(
                "gap of {} bytes before tensor `{}`",
                e.begin - cursor,
                e.name
            )));
        }
        cursor = e.end;
    }
    if cursor as u64 != payload {
        return Err(Error::ExtentLayout(format!(
            "extents cover {cursor} bytes but the payload has {payload}"
        )));
    }

    Ok(Layout {
        payload_start,
        entries,
        metadata,
    })
}

fn assemble(layout: Layout, make: impl Fn(&Entry) -> Result<Tensor>) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::new();
    for e in &layout.entries {
        let t = make(e).map_err(|err| match err {
            Error::InvalidTensor { detail, .. } => Error::InvalidTensor {
                name: e.name.clone(),
                detail,
            },
            other => other,
        })?;
        ckpt.insert(e.name.clone(), t)?;
    }
    ckpt.set_metadata(layout.metadata);
    Ok(ckpt)
}

/// Parse an archive held in memory; tensors own copies of their bytes.
pub fn parse_archive(bytes: &[u8]) -> Result<Checkpoint> {
    let layout = parse_layout(bytes)?;
    let base = layout.payload_start;
    assemble(layout, |e| {
        Tensor::new(
            e.dtype,
            e.shape.clone(),
            bytes[base + e.begin..base + e.end].to_vec(),
        )
    })
}

/// Open an archive. The file is memory-mapped and tensors borrow from the map,
/// so only the pages actually touched are read.
pub fn read_archive(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    if len < 8 {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        return parse_archive(&bytes);
    }
    // SAFETY: the map is read-only; modifying the file while a checkpoint is
    // alive is outside the supported contract, as for any mmap-based reader.
    let map = Arc::new(unsafe { Mmap::map(&file) }.map_err(|e| Error::io(path, e))?);
    let layout = parse_layout(&map)?;
    let base = layout.payload_start;
    assemble(layout, |e| {
        Tensor::mapped(
            e.dtype,
            e.shape.clone(),
            Arc::clone(&map),
            base + e.begin..base + e.end,
        )
    })
}

/// Planned tensor for [`ArchiveWriter`].
struct Planned {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    len: usize,
}

fn header_bytes(metadata: Option<&BTreeMap<String, String>>, plan: &[Planned]) -> Vec<u8> {
    let mut h = String::from("{");
    let mut first = true;
    let mut sep = |h: &mut String| {
        if !first {
            h.push(',');
        }
        first = false;
    };
    if let Some(meta) = metadata {
        sep(&mut h);
        h.push_str(&serde_json::to_string(METADATA_KEY).expect("string"));
        h.push(':');
        h.push_str(&serde_json::to_string(meta).expect("string map"));
    }
    let mut offset = 0usize;
    for p in plan {
        sep(&mut h);
        let shape: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
        h.push_str(&format!(
            "{}:{{\"dtype\":\"{}\",\"shape\":[{}],\"data_offsets\":[{},{}]}}",
            serde_json::to_string(&p.name).expect("string"),
            p.dtype.tag(),
            shape.join(","),
            offset,
            offset + p.len
        ));
        offset += p.len;
    }
    h.push('}');
    while (8 + h.len()) % 8 != 0 {
        h.push(' ');
    }
    let mut out = Vec::with_capacity(8 + h.len());
    out.extend_from_slice(&(h.len() as u64).to_le_bytes());
    out.extend_from_slice(h.as_bytes());
    out
}

/// Streaming writer: the header is fixed up front from the tensor plan, then
/// payloads are appended in name order. Output goes to a temporary file in the
/// target directory and is renamed into place by [`ArchiveWriter::finish`], so
/// a failed write never leaves a truncated archive behind.
pub struct ArchiveWriter {
    path: PathBuf,
    file: BufWriter<tempfile::NamedTempFile>,
    plan: Vec<Planned>,
    next: usize,
}

impl ArchiveWriter {
    pub fn create(
        path: impl AsRef<Path>,
        metadata: Option<&BTreeMap<String, String>>,
        tensors: impl IntoIterator<Item = (String, DType, Vec<usize>)>,
    ) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut plan = Vec::new();
        for (name, dtype, shape) in tensors {
            if name == METADATA_KEY {
                return Err(Error::InvalidTensor {
                    name,
                    detail: "reserved name".into(),
                });
            }
            let len = element_count(&shape)
                .and_then(|c| c.checked_mul(dtype.size()))
                .ok_or_else(|| Error::InvalidTensor {
                    name: name.clone(),
                    detail: format!("shape {shape:?} overflows"),
                })?;
            plan.push(Planned {
                name,
                dtype,
                shape,
                len,
            });
        }
        plan.sort_by(|a, b| a.name.cmp(&b.name));
        if let Some(w) = plan.windows(2).find(|w| w[0].name == w[1].name) {
            return Err(Error::DuplicateTensor(w[0].name.clone()));
        }
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut file = BufWriter::new(tmp);
        file.write_all(&header_bytes(metadata, &plan))
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            file,
            plan,
            next: 0,
        })
    }

    /// Name of the tensor expected by the next [`write_tensor`](Self::write_tensor) call.
    pub fn next_name(&self) -> Option<&str> {
        self.plan.get(self.next).map(|p| p.name.as_str())
    }

    pub fn write_tensor(&mut self, name: &str, tensor: &Tensor) -> Result<()> {
        let p = self.plan.get(self.next).ok_or_else(|| Error::InvalidTensor {
            name: name.to_string(),
            detail: "not in the archive plan".into(),
        })?;
        if p.name != name || p.dtype != tensor.dtype() || p.shape != tensor.shape() {
            return Err(Error::InvalidTensor {
                name: name.to_string(),
                detail: format!(
                    "expected `{}` {} {:?}, got {} {:?}",
                    p.name,
                    p.dtype,
                    p.shape,
                    tensor.dtype(),
                    tensor.shape()
                ),
            });
        }
        self.file
            .write_all(tensor.bytes())
            .map_err(|e| Error::io(&self.path, e))?;
        self.next += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        if self.next != self.plan.len() {
            return Err(Error::InvalidTensor {
                name: self.plan[self.next].name.clone(),
                detail: "archive finished before all planned tensors were written".into(),
            });
        }
        let path = self.path;
        let tmp = self
            .file
            .into_inner()
            .map_err(|e| Error::io(&path, e.into_error()))?;
        tmp.as_file().sync_all().map_err(|e| Error::io(&path, e))?;
        tmp.persist(&path).map_err(|e| Error::io(&path, e.error))?;
        Ok(())
    }
}

/// Serialize a checkpoint to archive bytes.
pub fn encode_archive(ckpt: &Checkpoint) -> Vec<u8> {
    let plan: Vec<Planned> = ckpt
        .iter()
        .map(|(n, t)| Planned {
            name: n.to_string(),
            dtype: t.dtype(),
            shape: t.shape().to_vec(),
            len: t.bytes().len(),
        })
        .collect();
    let mut out = header_bytes(ckpt.metadata(), &plan);
    for (_, t) in ckpt.iter() {
        out.extend_from_slice(t.bytes());
    }
    out
}

/// Write a checkpoint atomically.
pub fn write_archive(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let mut w = ArchiveWriter::create(
        path,
        ckpt.metadata(),
        ckpt.iter()
            .map(|(n, t)| (n.to_string(), t.dtype(), t.shape().to_vec())),
    )?;
    for (n, t) in ckpt.iter() {
        w.write_tensor(n, t)?;
    }
    w.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn archive(header: &str, payload: &[u8]) -> Vec<u8> {
        let mut v = (header.len() as u64).to_le_bytes().to_vec();
        v.extend_from_slice(header.as_bytes());
        v.extend_from_slice(payload);
        v
    }

    fn f32_bytes(xs: &[f32]) -> Vec<u8> {
        xs.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    #[test]
    fn empty_archive() {
        let c = parse_archive(&archive("{}", &[])).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn single_f32_tensor() {
        let bytes = archive(
            r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#,
            &f32_bytes(&[1.0, 2.0]),
        );
        let c = parse_archive(&bytes).unwrap();
        assert_eq!(c.f32_values("a").unwrap(), vec![1.0, 2.0]);
        assert_eq!(c.tensor("a").unwrap().shape(), &[2]);
    }

    #[test]
    fn truncated_payload_is_an_overrun() {
        let mut ck = Checkpoint::new();
        ck.insert("w", Tensor::from_f32(DType::F32, vec![4], &[1.0; 4]).unwrap())
            .unwrap();
        let mut bytes = encode_archive(&ck);
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(
            parse_archive(&bytes),
            Err(Error::PayloadOverrun { .. })
        ));
    }

    #[test]
    fn extents_in_any_header_order() {
        let header = r#"{"b":{"dtype":"F32","shape":[1],"data_offsets":[4,8]},"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#;
        let c = parse_archive(&archive(header, &f32_bytes(&[1.0, 2.0]))).unwrap();
        assert_eq!(c.f32_values("a").unwrap(), vec![1.0]);
        assert_eq!(c.f32_values("b").unwrap(), vec![2.0]);
    }

    #[test]
    fn zero_sized_tensors_are_allowed() {
        let header = r#"{"e":{"dtype":"BF16","shape":[0,3],"data_offsets":[0,0]},"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#;
        let c = parse_archive(&archive(header, &f32_bytes(&[3.0]))).unwrap();
        assert_eq!(c.tensor("e").unwrap().numel(), 0);
    }

    #[test]
    fn malformed_headers() {
        let p8 = f32_bytes(&[1.0, 2.0]);
        let cases: Vec<(&str, Vec<u8>, &str)> = vec![
            ("short", vec![1, 2, 3], "truncated"),
            ("long header", {
                let mut v = 1000u64.to_le_bytes().to_vec();
                v.extend_from_slice(b"{}");
                v
            }, "truncated"),
            ("not json", archive("{nope", &[]), "malformed_header"),
            ("array", archive("[]", &[]), "malformed_header"),
            ("bad utf8", {
                let mut v = 2u64.to_le_bytes().to_vec();
                v.extend_from_slice(&[0xFF, 0xFE]);
                v
            }, "malformed_header"),
            ("dtype", archive(r#"{"a":{"dtype":"Q4","shape":[2],"data_offsets":[0,8]}}"#, &p8), "unknown_dtype"),
            ("dup", archive(r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#, &p8), "duplicate_tensor"),
            ("overlap", archive(r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#, &p8), "extent_layout"),
            ("gap", archive(r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#, &p8), "extent_layout"),
            ("trailing", archive(r#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#, &p8), "extent_layout"),
            ("inverted", archive(r#"{"a":{"dtype":"F32","shape":[0],"data_offsets":[8,0]}}"#, &p8), "extent_layout"),
            ("size", archive(r#"{"a":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}}"#, &p8), "invalid_tensor"),
            ("overrun", archive(r#"{"a":{"dtype":"F32","shape":[4],"data_offsets":[0,16]}}"#, &p8), "payload_overrun"),
            ("missing field", archive(r#"{"a":{"dtype":"F32","shape":[2]}}"#, &p8), "malformed_header"),
            ("metadata type", archive(r#"{"__metadata__":{"k":1}}"#, &[]), "malformed_header"),
            ("shape overflow", archive(r#"{"a":{"dtype":"F32","shape":[4294967296,4294967296,4],"data_offsets":[0,8]}}"#, &p8), "invalid_tensor"),
        ];
        for (label, bytes, kind) in cases {
            match parse_archive(&bytes) {
                Err(e) => assert_eq!(e.kind(), kind, "{label}: {e}"),
                Ok(_) => panic!("{label}: accepted"),
            }
        }
    }

    #[test]
    fn writer_pads_and_orders() {
        let mut ck = Checkpoint::new();
        ck.insert("z", Tensor::from_f32(DType::BF16, vec![1], &[1.0]).unwrap())
            .unwrap();
        ck.insert("a", Tensor::from_f32(DType::F32, vec![1], &[2.0]).unwrap())
            .unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("format".to_string(), "pt".to_string());
        ck.set_metadata(Some(meta));
        let bytes = encode_archive(&ck);
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!((8 + n) % 8, 0);
        let header = std::str::from_utf8(&bytes[8..8 + n]).unwrap().trim_end();
        assert_eq!(
            header,
            r#"{"__metadata__":{"format":"pt"},"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"z":{"dtype":"BF16","shape":[1],"data_offsets":[4,6]}}"#
        );
        assert_eq!(parse_archive(&bytes).unwrap(), ck);
    }

    #[test]
    fn writer_rejects_out_of_plan_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.st");
        let t = Tensor::from_f32(DType::F32, vec![1], &[1.0]).unwrap();
        let mut w = ArchiveWriter::create(
            &path,
            None,
            vec![("a".to_string(), DType::F32, vec![1]), ("b".to_string(), DType::F32, vec![1])],
        )
        .unwrap();
        assert!(w.write_tensor("b", &t).is_err());
        w.write_tensor("a", &t).unwrap();
        assert!(w.finish().is_err());
        assert!(!path.exists(), "no partial archive may remain");
    }
}
