//! On-disk formats: the VPT1 single-tensor file and checkpoint directories
//! (one VPT1 file per named tensor plus a plain-text metadata file).
//!
//! VPT1 layout, all integers little-endian:
//!   bytes 0..4   magic "VPT1"
//!   byte  4      dtype, 0 = f32 (only value defined)
//!   byte  5      rank
//!   bytes 6..8   reserved, written as zero, ignored on read
//!   then rank * u32 extents
//!   then row-major f32 payload

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

const MAGIC: [u8; 4] = *b"VPT1";
const DTYPE_F32: u8 = 0;
pub const TENSOR_EXT: &str = "vpt";
pub const META_FILE: &str = "meta.txt";

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + t.shape().len() * 4 + t.numel() * 4);
    buf.extend_from_slice(&MAGIC);
    buf.push(DTYPE_F32);
    buf.push(t.shape().len() as u8);
    buf.extend_from_slice(&[0, 0]);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fail_short = |expected: usize| Error::Truncated {
        path: path.to_path_buf(),
        expected,
        actual: bytes.len(),
    };
    if bytes.len() < 8 {
        return Err(fail_short(8));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    if bytes[4] != DTYPE_F32 {
        return Err(Error::BadDtype {
            path: path.to_path_buf(),
            dtype: bytes[4],
        });
    }
    let rank = bytes[5] as usize;
    let header = 8 + rank * 4;
    if bytes.len() < header {
        return Err(fail_short(header));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for i in 0..rank {
        let off = 8 + i * 4;
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        numel = numel.checked_mul(d).ok_or_else(|| Error::BadField {
            path: path.to_path_buf(),
            field: "extents".into(),
            detail: "element count overflows usize".into(),
        })?;
        shape.push(d);
    }
    let expected = header + numel * 4;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(&shape, data)
}

/// Write `key=value` lines, keys sorted, one per line.
pub fn write_meta(path: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
    let mut out = String::new();
    for (k, v) in meta {
        debug_assert!(!k.contains('=') && !k.contains('\n') && !v.contains('\n'));
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_meta(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)?;
    let mut meta = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::BadField {
            path: path.to_path_buf(),
            field: format!("line {}", lineno + 1),
            detail: "expected key=value".into(),
        })?;
        meta.insert(k.to_string(), v.to_string());
    }
    Ok(meta)
}

/// Fetch a required metadata key and parse it.
pub fn meta_get<T: std::str::FromStr>(
    meta: &BTreeMap<String, String>,
    path: &Path,
    key: &str,
) -> Result<T> {
    let raw = meta.get(key).ok_or_else(|| Error::MissingField {
        path: path.to_path_buf(),
        field: key.to_string(),
    })?;
    raw.parse().map_err(|_| Error::BadField {
        path: path.to_path_buf(),
        field: key.to_string(),
        detail: format!("cannot parse {raw:?}"),
    })
}

/// Save named tensors plus metadata as a checkpoint directory.
/// Overwrites files already present; creates the directory if needed.
pub fn save_checkpoint(
    dir: &Path,
    tensors: &BTreeMap<String, Tensor>,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, t) in tensors {
        write_tensor(&dir.join(format!("{name}.{TENSOR_EXT}")), t)?;
    }
    write_meta(&dir.join(META_FILE), meta)
}

/// Load every `.vpt` file in `dir` (keyed by file stem) and the metadata file.
pub fn load_checkpoint(dir: &Path) -> Result<(BTreeMap<String, Tensor>, BTreeMap<String, String>)> {
    let mut tensors = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path: PathBuf = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(TENSOR_EXT) {
            let name = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::BadField {
                    path: path.clone(),
                    field: "file name".into(),
                    detail: "not valid UTF-8".into(),
                })?
                .to_string();
            tensors.insert(name, read_tensor(&path)?);
        }
    }
    let meta = read_meta(&dir.join(META_FILE))?;
    Ok((tensors, meta))
}
