//! GRDF grid files.
//!
//! Layout: the 8-byte magic `GRDF0001`, a little-endian `u32` byte length,
//! that many bytes of UTF-8 JSON header, then the row-major `f32`
//! little-endian payload. The header records `dims` (payload shape), `kind`
//! and optionally `lead_time` and `timestamp`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Tensor;

pub const MAGIC: &[u8; 8] = b"GRDF0001";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub dims: Vec<usize>,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lead_time: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<i64>,
}

impl Header {
    pub fn new(kind: impl Into<String>, dims: Vec<usize>) -> Self {
        Header {
            dims,
            kind: kind.into(),
            lead_time: None,
            timestamp: None,
        }
    }

    pub fn with_lead_time(mut self, lead_time: u8) -> Self {
        self.lead_time = Some(lead_time);
        self
    }

    pub fn with_timestamp(mut self, timestamp: i64) -> Self {
        self.timestamp = Some(timestamp);
        self
    }

    fn len(&self) -> usize {
        self.dims.iter().product()
    }
}

/// A decoded GRDF file. Values are widened to `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grdf {
    pub header: Header,
    pub values: Vec<f64>,
}

impl Grdf {
    pub fn new(header: Header, values: Vec<f64>) -> Result<Self> {
        if header.len() != values.len() {
            return Err(Error::ShapeMismatch {
                expected: header.dims.clone(),
                got: vec![values.len()],
            });
        }
        Ok(Grdf { header, values })
    }

    pub fn from_tensor(kind: &str, t: &Tensor) -> Self {
        Grdf {
            header: Header::new(kind, t.shape().to_vec()),
            values: t.data().to_vec(),
        }
    }

    /// Interprets the payload as `C×H×W` (a 2-D payload becomes `1×H×W`).
    pub fn to_tensor(&self) -> Result<Tensor> {
        let (c, h, w) = match self.header.dims.as_slice() {
            [c, h, w] => (*c, *h, *w),
            [h, w] => (1, *h, *w),
            other => {
                return Err(Error::Format(format!(
                    "expected 2 or 3 dims, got {other:?}"
                )))
            }
        };
        Tensor::from_vec(c, h, w, self.values.clone())
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::Format("missing GRDF0001 magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)
            .map_err(|e| Error::Format(format!("bad header json: {e}")))?;
        let payload = &bytes[12 + hlen..];
        let n = header.len();
        if payload.len() != 4 * n {
            return Err(Error::Format(format!(
                "payload has {} bytes, dims {:?} need {}",
                payload.len(),
                header.dims,
                4 * n
            )));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Grdf { header, values })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
