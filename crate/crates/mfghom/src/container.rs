//! Self-describing binary container used for `.mfgtab` and `.mfgsol` files.
//!
//! Layout: the 8 magic bytes `MFGCONT1`, a little-endian `u64` header length, the UTF-8
//! JSON header, then every array as little-endian `f64` in row-major order. The header
//! lists the arrays (`name`, `shape`) in storage order under the key `arrays`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MFGCONT1";

/// A named row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn new(name: &str, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Array { name: name.to_string(), shape, data }
    }
}

pub fn encode(header: &Value, arrays: &[Array]) -> Result<Vec<u8>> {
    let mut header = header.clone();
    let listing: Vec<Value> = arrays
        .iter()
        .map(|a| json!({"name": a.name, "shape": a.shape}))
        .collect();
    header
        .as_object_mut()
        .ok_or_else(|| Error::Format("header must be a JSON object".into()))?
        .insert("arrays".into(), Value::Array(listing));
    let text = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + text.len() + arrays.iter().map(|a| 8 * a.data.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    for a in arrays {
        if a.shape.iter().product::<usize>() != a.data.len() {
            return Err(Error::Format(format!("array {} does not match its shape", a.name)));
        }
        for v in &a.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Value, Vec<Array>)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: Value = serde_json::from_slice(body).map_err(|e| Error::Format(e.to_string()))?;
    let listing = header
        .get("arrays")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Format("header has no array listing".into()))?;
    let mut offset = 16 + hlen;
    let mut arrays = Vec::new();
    for entry in listing {
        let name = entry.get("name").and_then(Value::as_str).unwrap_or_default().to_string();
        let shape: Vec<usize> = entry
            .get("shape")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Format("array without shape".into()))?
            .iter()
            .map(|v| v.as_u64().map(|x| x as usize).ok_or_else(|| Error::Format("bad shape".into())))
            .collect::<Result<_>>()?;
        let count: usize = shape.iter().product();
        let raw = bytes
            .get(offset..offset + 8 * count)
            .ok_or_else(|| Error::Format(format!("truncated array {name}")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += 8 * count;
        arrays.push(Array { name, shape, data });
    }
    if offset != bytes.len() {
        return Err(Error::Format("trailing bytes".into()));
    }
    Ok((header, arrays))
}

pub fn write(path: &Path, header: &Value, arrays: &[Array]) -> Result<()> {
    let bytes = encode(header, arrays)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    // write-then-rename so readers never see a partial file
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<(Value, Vec<Array>)> {
    decode(&fs::read(path)?)
}

/// Find an array by name.
pub fn take<'a>(arrays: &'a [Array], name: &str) -> Result<&'a Array> {
    arrays
        .iter()
        .find(|a| a.name == name)
        .ok_or_else(|| Error::Format(format!("missing array {name}")))
}
