//! Versioned parameter container shared by the tokenizer and the language model.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SPCKPT\0\0"
//! version    u32      currently 1
//! config     u64 byte length, then UTF-8 JSON object (has a "kind" field)
//! manifest   u64 byte length, then UTF-8 text, one line per array:
//!            "<name> <dim0>x<dim1>..."
//! data       f64 values of every array, in manifest order, row-major
//! ```

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::Param;

pub const MAGIC: &[u8; 8] = b"SPCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn from_matrix(name: impl Into<String>, m: &Array2<f64>) -> Self {
        NamedArray {
            name: name.into(),
            shape: vec![m.nrows(), m.ncols()],
            data: m.iter().cloned().collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        let (r, c) = match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            _ => return Err(Error::Checkpoint(format!("array {} is not two-dimensional", self.name))),
        };
        Array2::from_shape_vec((r, c), self.data.clone())
            .map_err(|e| Error::Checkpoint(format!("array {}: {e}", self.name)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new(kind: &str, mut config: serde_json::Value) -> Self {
        if let Some(obj) = config.as_object_mut() {
            obj.insert("kind".into(), kind.into());
        }
        Checkpoint {
            config,
            arrays: Vec::new(),
        }
    }

    pub fn kind(&self) -> Option<&str> {
        self.config.get("kind").and_then(|k| k.as_str())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        match self.kind() {
            Some(k) if k == kind => Ok(()),
            other => Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {other:?}"
            ))),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, m: &Array2<f64>) {
        self.arrays.push(NamedArray::from_matrix(name, m));
    }

    pub fn push_params<'a>(&mut self, params: impl IntoIterator<Item = (String, &'a Param)>) {
        for (name, p) in params {
            self.push(name, &p.value);
        }
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        self.get(name)?.to_matrix()
    }

    /// Copies stored values into `params`, checking shapes.
    pub fn load_params<'a>(&self, params: impl IntoIterator<Item = (String, &'a mut Param)>) -> Result<()> {
        for (name, p) in params {
            let m = self.matrix(&name)?;
            if m.dim() != p.value.dim() {
                return Err(Error::Checkpoint(format!(
                    "array {name} has shape {:?}, model expects {:?}",
                    m.dim(),
                    p.value.dim()
                )));
            }
            p.value = m;
            p.zero_grad();
        }
        Ok(())
    }

    pub fn manifest(&self) -> String {
        let mut s = String::new();
        for a in &self.arrays {
            let dims: Vec<String> = a.shape.iter().map(|d| d.to_string()).collect();
            s.push_str(&a.name);
            s.push(' ');
            s.push_str(&dims.join("x"));
            s.push('\n');
        }
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config = serde_json::to_vec(&self.config).expect("JSON values always serialize");
        let manifest = self.manifest();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for a in &self.arrays {
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n = cur.u64()? as usize;
        let config: serde_json::Value = serde_json::from_slice(cur.take(n)?)?;
        let n = cur.u64()? as usize;
        let manifest = std::str::from_utf8(cur.take(n)?).map_err(|_| bad("manifest is not UTF-8"))?;
        let mut arrays = Vec::new();
        for line in manifest.lines() {
            let (name, dims) = line.rsplit_once(' ').ok_or_else(|| bad("malformed manifest line"))?;
            let shape: Vec<usize> = dims
                .split('x')
                .map(|d| d.parse().map_err(|_| bad("malformed dimension")))
                .collect::<Result<_>>()?;
            let count: usize = shape.iter().product();
            let raw = cur.take(count * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push(NamedArray {
                name: name.to_string(),
                shape,
                data,
            });
        }
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes after data"));
        }
        Ok(Checkpoint { config, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
