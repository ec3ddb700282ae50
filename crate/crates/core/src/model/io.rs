//! Weight container:
//!
//! ```text
//! u8      version
//! [4]u8   magic "SPAW"
//! u32     n_meta, then n_meta x (str key, str value)
//! u32     n_matrices, then n_matrices x (str name, u64 rows, u64 cols, rows*cols x f64)
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8. All integers and floats
//! are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::lora::{LowRankAdaptation, LowRankFactor};
use super::{BaseModel, Dims, Matrix, ModelKind};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u8 = 1;
const MAGIC: &[u8; 4] = b"SPAW";

struct Container {
    meta: BTreeMap<String, String>,
    matrices: BTreeMap<String, Matrix>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Container {
    fn encode(&self) -> Vec<u8> {
        let mut out = vec![FORMAT_VERSION];
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.matrices.len() as u32).to_le_bytes());
        for (name, m) in &self.matrices {
            put_str(&mut out, name);
            out.extend_from_slice(&(m.rows as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols as u64).to_le_bytes());
            for x in &m.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |message: &str| Error::Version {
            path: path.to_path_buf(),
            message: message.to_string(),
        };
        let mut r = Reader { bytes, pos: 0 };
        let version = r.take(1).ok_or_else(|| bad("empty file"))?[0];
        if version != FORMAT_VERSION {
            return Err(bad(&format!(
                "weight format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        if r.take(4) != Some(MAGIC.as_slice()) {
            return Err(bad("not a weight container"));
        }
        let truncated = || bad("truncated weight container");
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32().ok_or_else(truncated)? {
            let k = r.string().ok_or_else(truncated)?;
            let v = r.string().ok_or_else(truncated)?;
            meta.insert(k, v);
        }
        let mut matrices = BTreeMap::new();
        for _ in 0..r.u32().ok_or_else(truncated)? {
            let name = r.string().ok_or_else(truncated)?;
            let rows = r.u64().ok_or_else(truncated)? as usize;
            let cols = r.u64().ok_or_else(truncated)? as usize;
            let raw = r.take(rows * cols * 8).ok_or_else(truncated)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            matrices.insert(name, Matrix { rows, cols, data });
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after weight container"));
        }
        Ok(Container { meta, matrices })
    }

    fn meta<T: std::str::FromStr>(&self, key: &str, path: &Path) -> Result<T> {
        self.meta
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Version {
                path: path.to_path_buf(),
                message: format!("missing or invalid metadata {key:?}"),
            })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }
    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
    fn string(&mut self) -> Option<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }
}

pub fn base_model_bytes(model: &BaseModel) -> Vec<u8> {
    let d = model.dims();
    let mut meta = BTreeMap::new();
    meta.insert("type".into(), "base".into());
    meta.insert("kind".into(), model.kind().to_string());
    meta.insert("vocab".into(), d.vocab.to_string());
    meta.insert("embed_dim".into(), d.embed_dim.to_string());
    meta.insert("hidden_dim".into(), d.hidden_dim.to_string());
    meta.insert("feature_dim".into(), d.feature_dim.to_string());
    Container {
        meta,
        matrices: model.weights().clone(),
    }
    .encode()
}

pub fn adaptation_bytes(a: &LowRankAdaptation) -> Vec<u8> {
    let mut meta = BTreeMap::new();
    meta.insert("type".into(), "adaptation".into());
    meta.insert("rank".into(), a.rank().to_string());
    meta.insert("alpha".into(), a.alpha().to_string());
    let mut matrices = BTreeMap::new();
    for (name, f) in a.factors() {
        matrices.insert(format!("{name}.A"), f.a.clone());
        matrices.insert(format!("{name}.B"), f.b.clone());
    }
    Container { meta, matrices }.encode()
}

pub fn write_base_model(path: &Path, model: &BaseModel) -> Result<()> {
    fs::write(path, base_model_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn write_adaptation(path: &Path, a: &LowRankAdaptation) -> Result<()> {
    fs::write(path, adaptation_bytes(a)).map_err(|e| Error::io(path, e))
}

fn read_container(path: &Path, expected_type: &str) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let c = Container::decode(&bytes, path)?;
    let ty: String = c.meta("type", path)?;
    if ty != expected_type {
        return Err(Error::Version {
            path: path.to_path_buf(),
            message: format!("holds a {ty}, expected {expected_type}"),
        });
    }
    Ok(c)
}

pub fn read_base_model(path: &Path) -> Result<BaseModel> {
    let c = read_container(path, "base")?;
    let kind: String = c.meta("kind", path)?;
    let kind: ModelKind = kind.parse()?;
    let dims = Dims {
        vocab: c.meta("vocab", path)?,
        embed_dim: c.meta("embed_dim", path)?,
        hidden_dim: c.meta("hidden_dim", path)?,
        feature_dim: c.meta("feature_dim", path)?,
    };
    BaseModel::from_parts(kind, dims, c.matrices)
}

pub fn read_adaptation(path: &Path, base: &BaseModel) -> Result<LowRankAdaptation> {
    let mut c = read_container(path, "adaptation")?;
    let rank: usize = c.meta("rank", path)?;
    let alpha: f64 = c.meta("alpha", path)?;
    let names: Vec<String> = c
        .matrices
        .keys()
        .filter_map(|k| k.strip_suffix(".A").map(str::to_string))
        .collect();
    let mut factors = BTreeMap::new();
    for name in names {
        let a = c.matrices.remove(&format!("{name}.A")).expect("listed");
        let b = c
            .matrices
            .remove(&format!("{name}.B"))
            .ok_or_else(|| Error::Version {
                path: path.to_path_buf(),
                message: format!("factor {name}.B missing"),
            })?;
        factors.insert(name, LowRankFactor { a, b });
    }
    if !c.matrices.is_empty() {
        return Err(Error::Version {
            path: path.to_path_buf(),
            message: "unpaired adaptation factors".into(),
        });
    }
    LowRankAdaptation::from_parts(base, rank, alpha, factors)
}
