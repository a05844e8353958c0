//! Binary checkpoint format and uniform weight averaging.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LCOC" | u16 version=1 | u32 len + UTF-8 spec block
//! | u32 tensor count | per tensor: u32 len + name, u32 rows, u32 cols, rows*cols f64
//! ```
//!
//! The spec block is the model's canonical `key=value` text followed by
//! `meta.<key>=<value>` provenance lines in key order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ModelSpec, ToyModel};
use crate::error::{invalid, Error, Result};
use crate::numerics::Matrix;
use crate::provenance::content_hash;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LCOC";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub tensors: Vec<(String, Matrix)>,
    /// Provenance: stage tag, seed, step count, parents, ...
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn from_model(model: &ToyModel, meta: BTreeMap<String, String>) -> Self {
        let tensors = model.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        Self { spec: model.spec().clone(), tensors, meta }
    }

    pub fn to_model(&self) -> Result<ToyModel> {
        ToyModel::from_named_tensors(&self.spec, &self.tensors)
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    /// Content hash of the serialized tensors and spec (metadata excluded).
    pub fn id(&self) -> String {
        let stripped = Checkpoint { meta: BTreeMap::new(), ..self.clone() };
        content_hash(&stripped.to_bytes())[..16].to_string()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut block = self.spec.to_canonical();
        for (k, v) in &self.meta {
            block.push_str(&format!("meta.{k}={v}\n"));
        }
        write_str(&mut out, &block);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            write_str(&mut out, name);
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for v in t.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let block = r.string("spec block")?;
        let mut spec_lines = String::new();
        let mut meta = BTreeMap::new();
        for line in block.lines() {
            match line.strip_prefix("meta.") {
                Some(rest) => {
                    let (k, v) = rest
                        .split_once('=')
                        .ok_or_else(|| Error::Format(format!("bad meta line `{line}`")))?;
                    meta.insert(k.to_string(), v.to_string());
                }
                None => {
                    spec_lines.push_str(line);
                    spec_lines.push('\n');
                }
            }
        }
        let spec = ModelSpec::from_canonical(&spec_lines)?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for i in 0..count {
            let name = r.string(&format!("tensor {i} name"))?;
            let rows = r.u32(&format!("tensor `{name}` rows"))? as usize;
            let cols = r.u32(&format!("tensor `{name}` cols"))? as usize;
            let raw = r.take(rows * cols * 8, &format!("tensor `{name}` data"))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Matrix::from_vec(rows, cols, data).map_err(|e| Error::Format(e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let ckpt = Checkpoint { spec, tensors, meta };
        // validates names and shapes against the spec
        ckpt.to_model()?;
        Ok(ckpt)
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&ckpt.to_bytes())?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

/// Uniform mean of each named tensor.
///
/// Inputs are summed in content-id order so the result does not depend on
/// the argument order.
pub fn soup(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    if checkpoints.len() < 2 {
        return Err(invalid(format!("soup needs at least 2 checkpoints, got {}", checkpoints.len())));
    }
    let first = &checkpoints[0];
    for c in &checkpoints[1..] {
        if c.spec != first.spec {
            return Err(invalid("soup ingredients have different model specs"));
        }
        let names_match = c.tensors.len() == first.tensors.len()
            && c.tensors.iter().zip(&first.tensors).all(|((a, x), (b, y))| a == b && x.shape() == y.shape());
        if !names_match {
            return Err(invalid("soup ingredients have different tensor layouts"));
        }
    }
    let mut keyed: Vec<(String, &Checkpoint)> = checkpoints.iter().map(|c| (c.id(), c)).collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0));

    let tensors = first
        .tensors
        .iter()
        .enumerate()
        .map(|(i, (name, t))| {
            let mut sum = Matrix::zeros(t.rows(), t.cols());
            for (_, c) in &keyed {
                sum.add_scaled(&c.tensors[i].1, 1.0)?;
            }
            let n = checkpoints.len() as f64;
            Ok((name.clone(), sum.map(|v| v / n)))
        })
        .collect::<Result<_>>()?;
    let mut meta = BTreeMap::new();
    meta.insert("stage".to_string(), "soup".to_string());
    meta.insert(
        "parents".to_string(),
        keyed.iter().map(|(id, _)| id.as_str()).collect::<Vec<_>>().join(","),
    );
    Ok(Checkpoint { spec: first.spec.clone(), tensors, meta })
}
