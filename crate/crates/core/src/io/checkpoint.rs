use std::path::{Path, PathBuf};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::config::RunConfig;

/// File magic including the format version.
pub const MAGIC: &[u8; 7] = b"CAILA1\n";

/// Sidecar information stored next to the tensor file.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    /// Names of the tensors that were frozen during adapter training.
    pub frozen: Vec<String>,
    pub frozen_hash: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub store: ParamStore,
    pub meta: CheckpointMeta,
}

/// `<checkpoint>.meta`.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.shape().len()).map_err(|_| Error::Format(format!("rank too large for `{name}`")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension too large for `{name}`")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Corrupt(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        if bytes.starts_with(b"CAILA") {
            return Err(Error::Format("unsupported checkpoint version".into()));
        }
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let mut r = Reader { bytes, pos: MAGIC.len() };
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for k in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::Corrupt(format!("tensor {k} name is not UTF-8")))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        if rank == 0 {
            return Err(Error::Corrupt(format!("tensor `{name}` has rank 0")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Corrupt(format!("tensor `{name}` size overflows")))?;
        let payload = r.take(numel, &format!("payload of `{name}`"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((name.clone(), Tensor::new(shape, data).map_err(|e| Error::Corrupt(format!("`{name}`: {e}")))?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

fn meta_text(meta: &CheckpointMeta) -> String {
    let mut s = meta.config.to_text();
    s.push_str(&format!("frozen_hash = {}\n", meta.frozen_hash));
    s.push_str(&format!("frozen = {}\n", meta.frozen.join(",")));
    s
}

fn parse_meta(text: &str) -> Result<CheckpointMeta> {
    let mut config_lines = String::new();
    let (mut frozen, mut hash) = (None, None);
    for line in text.lines() {
        match line.split_once('=').map(|(k, v)| (k.trim(), v.trim())) {
            Some(("frozen", v)) => frozen = Some(v.split(',').filter(|s| !s.is_empty()).map(String::from).collect()),
            Some(("frozen_hash", v)) => hash = Some(v.to_string()),
            _ => {
                config_lines.push_str(line);
                config_lines.push('\n');
            }
        }
    }
    Ok(CheckpointMeta {
        config: RunConfig::parse(&config_lines)?,
        frozen: frozen.ok_or_else(|| Error::Format("metadata lacks `frozen`".into()))?,
        frozen_hash: hash.ok_or_else(|| Error::Format("metadata lacks `frozen_hash`".into()))?,
    })
}

/// Writes the tensor file and its `.meta` sidecar.
pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    let bytes = encode_tensors(store.iter().map(|(_, n, t)| (n, t)))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let mp = meta_path(path);
    std::fs::write(&mp, meta_text(meta)).map_err(|e| Error::io(&mp, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut store = ParamStore::new();
    for (name, t) in decode_tensors(&bytes)? {
        store.add(name, t)?;
    }
    let mp = meta_path(path);
    let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    Ok(Checkpoint {
        store,
        meta: parse_meta(&text)?,
    })
}
