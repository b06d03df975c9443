//! On-disk container shared by model, integer-network and checkpoint files.
//!
//! A file is a UTF-8 manifest followed by a binary blob:
//!
//! ```text
//! qnn-container
//! format_version=1
//! kind=float
//! <key>=<value>            (any number, order preserved)
//! tensor=<name> <dtype> <d0,d1,..> <offset> <count>
//! end-manifest
//! <blob: little-endian f64 / i32 payloads at the listed offsets>
//! ```
//!
//! `dtype` is `f64` or `i32`; `offset` is relative to the first blob byte.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const MAGIC: &str = "qnn-container";
pub const FORMAT_VERSION: u32 = 1;
pub const SUPPORTED_VERSIONS: &[u32] = &[FORMAT_VERSION];
const END: &str = "end-manifest";

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64 { shape: Vec<usize>, data: Vec<f64> },
    I32 { shape: Vec<usize>, data: Vec<i32> },
}

impl TensorData {
    fn dtype(&self) -> &'static str {
        match self {
            TensorData::F64 { .. } => "f64",
            TensorData::I32 { .. } => "i32",
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            TensorData::F64 { shape, .. } | TensorData::I32 { shape, .. } => shape,
        }
    }

    fn count(&self) -> usize {
        match self {
            TensorData::F64 { data, .. } => data.len(),
            TensorData::I32 { data, .. } => data.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    kind: String,
    meta: Vec<(String, String)>,
    tensors: Vec<(String, TensorData)>,
    /// Byte offset just past the manifest when parsed (0 for fresh containers).
    manifest_end: u64,
}

impl Container {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            meta: Vec::new(),
            tensors: Vec::new(),
            manifest_end: 0,
        }
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        debug_assert!(!key.contains('=') && !value.contains('\n'));
        self.meta.push((key, value));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// All values stored under `key`, in insertion order.
    pub fn get_all<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.meta
            .iter()
            .filter(move |(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::parse(self.manifest_end, format!("missing manifest key `{key}`")))
    }

    pub fn parse_key<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::parse(self.manifest_end, format!("bad value `{raw}` for `{key}`")))
    }

    pub fn malformed(&self, msg: impl Into<String>) -> Error {
        Error::parse(self.manifest_end, msg)
    }

    pub fn push_f64(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push((
            name.into(),
            TensorData::F64 {
                shape: shape.to_vec(),
                data,
            },
        ));
    }

    pub fn push_i32(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<i32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push((
            name.into(),
            TensorData::I32 {
                shape: shape.to_vec(),
                data,
            },
        ));
    }

    fn tensor(&self, name: &str) -> Result<&TensorData> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| self.malformed(format!("missing tensor `{name}`")))
    }

    pub fn f64(&self, name: &str) -> Result<(&[usize], &[f64])> {
        match self.tensor(name)? {
            TensorData::F64 { shape, data } => Ok((shape, data)),
            _ => Err(self.malformed(format!("tensor `{name}` is not f64"))),
        }
    }

    pub fn i32(&self, name: &str) -> Result<(&[usize], &[i32])> {
        match self.tensor(name)? {
            TensorData::I32 { shape, data } => Ok((shape, data)),
            _ => Err(self.malformed(format!("tensor `{name}` is not i32"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = format!("{MAGIC}\nformat_version={FORMAT_VERSION}\nkind={}\n", self.kind);
        for (k, v) in &self.meta {
            manifest.push_str(&format!("{k}={v}\n"));
        }
        let mut blob = Vec::new();
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            manifest.push_str(&format!(
                "tensor={name} {} {} {} {}\n",
                t.dtype(),
                dims.join(","),
                blob.len(),
                t.count()
            ));
            match t {
                TensorData::F64 { data, .. } => {
                    data.iter().for_each(|v| blob.extend_from_slice(&v.to_le_bytes()))
                }
                TensorData::I32 { data, .. } => {
                    data.iter().for_each(|v| blob.extend_from_slice(&v.to_le_bytes()))
                }
            }
        }
        manifest.push_str(END);
        manifest.push('\n');
        let mut out = manifest.into_bytes();
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let next_line = |pos: &mut usize| -> Result<(u64, String)> {
            let start = *pos;
            let rel = bytes[start..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::parse(bytes.len() as u64, "unexpected end of manifest"))?;
            let line = std::str::from_utf8(&bytes[start..start + rel])
                .map_err(|e| Error::parse((start + e.valid_up_to()) as u64, "manifest is not UTF-8"))?;
            *pos = start + rel + 1;
            Ok((start as u64, line.to_string()))
        };

        let (off, magic) = next_line(&mut pos)?;
        if magic != MAGIC {
            return Err(Error::parse(off, format!("expected `{MAGIC}` header")));
        }
        let (off, version) = next_line(&mut pos)?;
        let found: u32 = version
            .strip_prefix("format_version=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::parse(off, "expected `format_version=<n>`"))?;
        if !SUPPORTED_VERSIONS.contains(&found) {
            return Err(Error::Version {
                found,
                supported: SUPPORTED_VERSIONS.to_vec(),
            });
        }
        let (off, kind) = next_line(&mut pos)?;
        let kind = kind
            .strip_prefix("kind=")
            .ok_or_else(|| Error::parse(off, "expected `kind=<kind>`"))?
            .to_string();

        struct Entry {
            line_offset: u64,
            name: String,
            dtype: String,
            shape: Vec<usize>,
            offset: usize,
            count: usize,
        }
        let mut meta = Vec::new();
        let mut entries = Vec::new();
        loop {
            let (off, line) = next_line(&mut pos)?;
            if line == END {
                break;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(off, format!("malformed manifest line `{line}`")))?;
            if key != "tensor" {
                meta.push((key.to_string(), value.to_string()));
                continue;
            }
            let fields: Vec<&str> = value.split(' ').collect();
            let bad = || Error::parse(off, format!("malformed tensor entry `{value}`"));
            if fields.len() != 5 {
                return Err(bad());
            }
            let shape = fields[2]
                .split(',')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad())?;
            entries.push(Entry {
                line_offset: off,
                name: fields[0].to_string(),
                dtype: fields[1].to_string(),
                shape,
                offset: fields[3].parse().map_err(|_| bad())?,
                count: fields[4].parse().map_err(|_| bad())?,
            });
        }

        let blob_start = pos;
        let blob = &bytes[blob_start..];
        let mut tensors = Vec::new();
        for e in entries {
            if e.shape.iter().product::<usize>() != e.count {
                return Err(Error::parse(e.line_offset, format!("tensor `{}` shape/count mismatch", e.name)));
            }
            let width = match e.dtype.as_str() {
                "f64" => 8,
                "i32" => 4,
                other => return Err(Error::parse(e.line_offset, format!("unknown dtype `{other}`"))),
            };
            let end = e
                .count
                .checked_mul(width)
                .and_then(|n| n.checked_add(e.offset))
                .filter(|&end| end <= blob.len())
                .ok_or_else(|| {
                    Error::parse(
                        bytes.len() as u64,
                        format!(
                            "tensor `{}` needs bytes up to {} but the file ends at {}",
                            e.name,
                            blob_start + e.offset + e.count * width,
                            bytes.len()
                        ),
                    )
                })?;
            let raw = &blob[e.offset..end];
            let data = if width == 8 {
                TensorData::F64 {
                    shape: e.shape,
                    data: raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                }
            } else {
                TensorData::I32 {
                    shape: e.shape,
                    data: raw
                        .chunks_exact(4)
                        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                }
            };
            tensors.push((e.name, data));
        }
        Ok(Self {
            kind,
            meta,
            tensors,
            manifest_end: blob_start as u64,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
    }
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("float");
        c.set("name", "A2W2");
        c.set("layer", "dense 4 3");
        c.set("layer", "dropout 0.2");
        c.push_f64("w", &[2, 2], vec![1.0, -0.5, f64::MIN_POSITIVE, 3.25]);
        c.push_i32("t", &[3], vec![-7, 0, i32::MAX]);
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.kind(), "float");
        assert_eq!(back.get("name"), Some("A2W2"));
        assert_eq!(back.get_all("layer").collect::<Vec<_>>(), ["dense 4 3", "dropout 0.2"]);
        assert_eq!(back.f64("w").unwrap().1, c.f64("w").unwrap().1);
        assert_eq!(back.i32("t").unwrap(), (&[3usize][..], &[-7, 0, i32::MAX][..]));
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn truncation_is_a_parse_error() {
        let bytes = sample().to_bytes();
        for cut in [0, 5, 20, bytes.len() - 1] {
            match Container::from_bytes(&bytes[..cut]) {
                Err(Error::Parse { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn version_guard() {
        let text = String::from_utf8_lossy(&sample().to_bytes()).replace("format_version=1", "format_version=999");
        match Container::from_bytes(text.as_bytes()) {
            Err(Error::Version { found, supported }) => {
                assert_eq!(found, 999);
                assert_eq!(supported, vec![1]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_magic() {
        assert!(matches!(
            Container::from_bytes(b"hello\n"),
            Err(Error::Parse { offset: 0, .. })
        ));
    }

    #[test]
    fn atomic_write_and_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/m.qnn");
        sample().write(&path).unwrap();
        assert_eq!(Container::read(&path).unwrap(), Container::from_bytes(&sample().to_bytes()).unwrap());
    }
}
