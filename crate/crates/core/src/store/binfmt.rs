//! Flat little-endian numeric arrays with a JSON header.
//!
//! A `.bin` file is the concatenation of its arrays, each stored as raw
//! little-endian elements. The sibling `.json` header lists every array's
//! name, dtype, shape and byte offset, plus an optional row-id order and a
//! free-form `meta` object.

use serde::{Deserialize, Serialize};

pub const FORMAT: &str = "litatlas-flat-le/1";

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U32(Vec<u32>),
    U64(Vec<u64>),
}

impl ArrayData {
    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F64(_) => "f64",
            ArrayData::U32(_) => "u32",
            ArrayData::U64(_) => "u64",
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::U32(v) => v.len(),
            ArrayData::U64(v) => v.len(),
        }
    }

    fn byte_len(&self) -> usize {
        self.len() * elem_size(self.dtype())
    }
}

fn elem_size(dtype: &str) -> usize {
    match dtype {
        "u32" => 4,
        _ => 8,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub corpus_version: u64,
    pub arrays: Vec<ArraySpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_ids: Option<Vec<String>>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Array being written: name, shape and data. `shape.iter().product()` must
/// equal the element count.
pub struct NamedArray<'a> {
    pub name: &'a str,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

pub fn encode(
    corpus_version: u64,
    arrays: Vec<NamedArray<'_>>,
    doc_ids: Option<Vec<String>>,
    meta: serde_json::Value,
) -> (Header, Vec<u8>) {
    let total: usize = arrays.iter().map(|a| a.data.byte_len()).sum();
    let mut bytes = Vec::with_capacity(total);
    let mut specs = Vec::with_capacity(arrays.len());
    for a in arrays {
        assert_eq!(
            a.shape.iter().product::<usize>(),
            a.data.len(),
            "shape mismatch for array {}",
            a.name
        );
        specs.push(ArraySpec {
            name: a.name.to_string(),
            dtype: a.data.dtype().to_string(),
            shape: a.shape,
            offset: bytes.len(),
        });
        match a.data {
            ArrayData::F64(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U32(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U64(v) => v.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
        }
    }
    let header = Header {
        format: FORMAT.to_string(),
        corpus_version,
        arrays: specs,
        doc_ids,
        meta,
    };
    (header, bytes)
}

/// Decoded view over a `.bin` payload.
pub struct Decoded<'a> {
    pub header: &'a Header,
    bytes: &'a [u8],
}

impl<'a> Decoded<'a> {
    pub fn new(header: &'a Header, bytes: &'a [u8]) -> Result<Self, String> {
        if header.format != FORMAT {
            return Err(format!("unknown array format {:?}", header.format));
        }
        let mut expected_len = 0;
        for spec in &header.arrays {
            let len = spec.shape.iter().product::<usize>() * elem_size(&spec.dtype);
            if !matches!(spec.dtype.as_str(), "f64" | "u32" | "u64") {
                return Err(format!("array {}: unknown dtype {}", spec.name, spec.dtype));
            }
            if spec.offset != expected_len || spec.offset + len > bytes.len() {
                return Err(format!("array {}: bad offset or truncated data", spec.name));
            }
            expected_len += len;
        }
        if expected_len != bytes.len() {
            return Err(format!(
                "payload has {} bytes, header describes {expected_len}",
                bytes.len()
            ));
        }
        Ok(Decoded { header, bytes })
    }

    fn spec(&self, name: &str, dtype: &str) -> Result<&ArraySpec, String> {
        let spec = self
            .header
            .arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| format!("missing array {name}"))?;
        if spec.dtype != dtype {
            return Err(format!("array {name}: expected {dtype}, found {}", spec.dtype));
        }
        Ok(spec)
    }

    fn raw(&self, spec: &ArraySpec) -> &'a [u8] {
        let len = spec.shape.iter().product::<usize>() * elem_size(&spec.dtype);
        &self.bytes[spec.offset..spec.offset + len]
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.header
            .arrays
            .iter()
            .find(|a| a.name == name)
            .map(|a| a.shape.as_slice())
    }

    pub fn f64(&self, name: &str) -> Result<Vec<f64>, String> {
        let spec = self.spec(name, "f64")?;
        Ok(self
            .raw(spec)
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn u32(&self, name: &str) -> Result<Vec<u32>, String> {
        let spec = self.spec(name, "u32")?;
        Ok(self
            .raw(spec)
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn u64(&self, name: &str) -> Result<Vec<u64>, String> {
        let spec = self.spec(name, "u64")?;
        Ok(self
            .raw(spec)
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode() {
        let (header, bytes) = encode(
            7,
            vec![
                NamedArray {
                    name: "m",
                    shape: vec![2, 2],
                    data: ArrayData::F64(vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]),
                },
                NamedArray {
                    name: "idx",
                    shape: vec![3],
                    data: ArrayData::U32(vec![1, 2, u32::MAX]),
                },
            ],
            Some(vec!["a".into(), "b".into()]),
            serde_json::json!({"k": 1}),
        );
        assert_eq!(bytes.len(), 4 * 8 + 3 * 4);
        assert_eq!(&bytes[..8], &1.0f64.to_le_bytes());
        let d = Decoded::new(&header, &bytes).unwrap();
        let m = d.f64("m").unwrap();
        assert_eq!(m[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(d.u32("idx").unwrap(), vec![1, 2, u32::MAX]);
        assert!(d.u64("idx").is_err());
        assert!(Decoded::new(&header, &bytes[..bytes.len() - 1]).is_err());
    }
}
