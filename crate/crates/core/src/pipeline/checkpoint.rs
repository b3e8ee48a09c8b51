//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "TRCK" | u32 version | str config_hash | u8 stage | str domain | u64 step
//! u8 width | str model_config_json
//! u32 n_metrics { str name, f64 value }
//! u32 n_tensors { str name, u8 width, u8 ndim, u64 dims[ndim] }   -- manifest
//! u8 has_moments [u64 adam_step]
//! payloads: each tensor's values at `width` bytes, in manifest order
//! moments (if present): per tensor, m then v as f64
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, PipelineError};
use crate::params::Precision;

pub const MAGIC: &[u8; 4] = b"TRCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    UserPretrain,
    EndToEnd,
    Adapted,
}

impl Stage {
    fn tag(self) -> u8 {
        match self {
            Stage::UserPretrain => 1,
            Stage::EndToEnd => 2,
            Stage::Adapted => 3,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            1 => Some(Stage::UserPretrain),
            2 => Some(Stage::EndToEnd),
            3 => Some(Stage::Adapted),
            _ => None,
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::UserPretrain => "user_pretrain",
            Stage::EndToEnd => "end_to_end",
            Stage::Adapted => "adapted",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub step: u64,
    /// `(m, v)` per tensor, aligned with `Checkpoint::tensors`.
    pub moments: Vec<(Vec<f64>, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub stage: Stage,
    pub domain: String,
    pub step: u64,
    pub precision: Precision,
    pub model_config: ModelConfig,
    pub metrics: BTreeMap<String, f64>,
    pub tensors: Vec<TensorRecord>,
    pub optimizer: Option<AdamMoments>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// One line per tensor: name, dtype, shape.
    pub fn manifest_text(&self) -> String {
        let dtype = match self.precision {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        };
        let mut s = String::new();
        for t in &self.tensors {
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(s, "{}\t{}\t[{}]", t.name, dtype, dims.join(", "));
        }
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&self.version.to_le_bytes());
        put_str(&mut b, &self.config_hash);
        b.push(self.stage.tag());
        put_str(&mut b, &self.domain);
        b.extend_from_slice(&self.step.to_le_bytes());
        let width = self.precision.width();
        b.push(width);
        put_str(&mut b, &serde_json::to_string(&self.model_config).expect("config serialises"));
        b.extend_from_slice(&(self.metrics.len() as u32).to_le_bytes());
        for (k, v) in &self.metrics {
            put_str(&mut b, k);
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut b, &t.name);
            b.push(width);
            b.push(t.shape.len() as u8);
            for &d in &t.shape {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        match &self.optimizer {
            None => b.push(0),
            Some(o) => {
                b.push(1);
                b.extend_from_slice(&o.step.to_le_bytes());
            }
        }
        for t in &self.tensors {
            for &v in &t.values {
                match self.precision {
                    Precision::F32 => b.extend_from_slice(&(v as f32).to_le_bytes()),
                    Precision::F64 => b.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        if let Some(o) = &self.optimizer {
            for (m, v) in &o.moments {
                for x in m.iter().chain(v) {
                    b.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self, PipelineError> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.fail("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(PipelineError::VersionUnsupported(version));
        }
        let config_hash = r.string()?;
        let stage = Stage::from_tag(r.u8()?).ok_or_else(|| r.fail("unknown stage tag"))?;
        let domain = r.string()?;
        let step = r.u64()?;
        let width = r.u8()?;
        let precision = match width {
            4 => Precision::F32,
            8 => Precision::F64,
            _ => return Err(r.fail("unsupported dtype width")),
        };
        let cfg_json = r.string()?;
        let model_config: ModelConfig =
            serde_json::from_str(&cfg_json).map_err(|e| r.fail(&format!("embedded model config: {e}")))?;
        let mut metrics = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            metrics.insert(k, r.f64()?);
        }
        let n = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.string()?;
            if r.u8()? != width {
                return Err(r.fail(&format!("tensor `{name}` has a different width from the header")));
            }
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            manifest.push((name, shape));
        }
        let adam_step = match r.u8()? {
            0 => None,
            1 => Some(r.u64()?),
            _ => return Err(r.fail("bad optimizer flag")),
        };
        let mut tensors = Vec::with_capacity(manifest.len());
        for (name, shape) in manifest {
            let len: usize = shape.iter().product();
            let mut values = Vec::with_capacity(len);
            for _ in 0..len {
                values.push(match precision {
                    Precision::F32 => r.f32()? as f64,
                    Precision::F64 => r.f64()?,
                });
            }
            tensors.push(TensorRecord { name, shape, values });
        }
        let optimizer = match adam_step {
            None => None,
            Some(step) => {
                let mut moments = Vec::with_capacity(tensors.len());
                for t in &tensors {
                    let n = t.values.len();
                    let m = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
                    let v = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
                    moments.push((m, v));
                }
                Some(AdamMoments { step, moments })
            }
        };
        if r.pos != bytes.len() {
            return Err(r.fail("trailing bytes after payload"));
        }
        Ok(Self { version, config_hash, stage, domain, step, precision, model_config, metrics, tensors, optimizer })
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: &str) -> PipelineError {
        PipelineError::IoFailure { path: self.path.to_string(), offset: Some(self.pos), reason: reason.to_string() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], PipelineError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(&format!("truncated: needed {n} bytes, {} left", self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, PipelineError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, PipelineError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, PipelineError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, PipelineError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, PipelineError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, PipelineError> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.fail("invalid UTF-8"))
    }
}

/// Writes to a sibling temp file and renames it into place.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), PipelineError> {
    let io = |e: std::io::Error| PipelineError::IoFailure { path: path.display().to_string(), offset: None, reason: e.to_string() };
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(&ckpt.to_bytes()).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| PipelineError::IoFailure {
        path: path.display().to_string(),
        offset: None,
        reason: e.to_string(),
    })?;
    Checkpoint::from_bytes(&bytes, &path.display().to_string())
}
