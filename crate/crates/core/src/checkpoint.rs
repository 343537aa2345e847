//! Binary checkpoints: magic, version, config hash, a tensor manifest and a
//! little-endian `f32` payload holding parameters and Adam moments.

use std::path::Path;

use skillstep_autodiff::{AdamMoments, ParamSet, Tensor};

use crate::config::TrainConfig;
use crate::env::MazeSpec;
use crate::model::{Dims, ModelBundle, ModuleId};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"SKSTEPCK";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub maze: MazeSpec,
    pub bundle: ModelBundle,
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    step: u64,
}

pub fn to_bytes(config: &TrainConfig, maze: &MazeSpec, bundle: &ModelBundle) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for (m, p) in bundle.all_params() {
        for ((name, t), mom) in p.tensor_names().iter().zip(p.tensors()).zip(p.moments()) {
            entries.push(Entry {
                name: format!("{}/{}", m.name(), name),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
                step: mom.step,
            });
            for v in t.data().iter().chain(&mom.m).chain(&mom.v) {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut out = Vec::with_capacity(payload.len() + 4096);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&config.architecture_hash());
    out.extend_from_slice(&bundle.iteration.to_le_bytes());
    for text in [config.to_toml_string(), maze.to_toml_string()] {
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
    }
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in &entries {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.shape.len() as u8);
        for &d in &e.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&e.offset.to_le_bytes());
        out.extend_from_slice(&e.step.to_le_bytes());
    }
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

pub fn save_checkpoint(path: &Path, config: &TrainConfig, maze: &MazeSpec, bundle: &ModelBundle) -> Result<()> {
    std::fs::write(path, to_bytes(config, maze, bundle)).map_err(|e| Error::io(path, e))
}

/// Load a checkpoint; with `expected`, its architecture must match.
pub fn load_checkpoint(path: &Path, expected: Option<&TrainConfig>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, expected).map_err(|e| match e {
        LoadError::Corrupt(reason) => Error::corrupt(path, reason),
        LoadError::Version(reason) => Error::Version(reason),
        LoadError::Other(e) => e,
    })
}

/// Failure modes of [`from_bytes`].
#[derive(Debug)]
pub enum LoadError {
    Corrupt(String),
    Version(String),
    Other(Error),
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], LoadError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| LoadError::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, LoadError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, LoadError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, LoadError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, LoadError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn text(&mut self, n: usize) -> std::result::Result<&'a str, LoadError> {
        std::str::from_utf8(self.take(n)?).map_err(|_| LoadError::Corrupt("text is not utf-8".into()))
    }
}

fn floats(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn from_bytes(bytes: &[u8], expected: Option<&TrainConfig>) -> std::result::Result<Checkpoint, LoadError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(LoadError::Corrupt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(LoadError::Version(format!(
            "format {version}, expected {FORMAT_VERSION}"
        )));
    }
    let hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    if let Some(cfg) = expected {
        if cfg.architecture_hash() != hash {
            return Err(LoadError::Version(
                "config hash differs from the requested configuration".into(),
            ));
        }
    }
    let iteration = r.u32()?;
    let n = r.u32()? as usize;
    let config = TrainConfig::from_toml_str(r.text(n)?).map_err(LoadError::Other)?;
    if config.architecture_hash() != hash {
        return Err(LoadError::Corrupt("embedded config does not match its hash".into()));
    }
    let n = r.u32()? as usize;
    let maze = MazeSpec::from_toml_str(r.text(n)?).map_err(LoadError::Other)?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = r.text(len)?.to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let offset = r.u64()?;
        let step = r.u64()?;
        entries.push(Entry {
            name,
            shape,
            offset,
            step,
        });
    }
    let len = r.u64()? as usize;
    let payload = r.take(len)?;
    if r.pos != bytes.len() {
        return Err(LoadError::Corrupt("trailing bytes after payload".into()));
    }

    let dims = Dims::from_config(&config);
    let mut sets = Vec::with_capacity(ModuleId::ALL.len());
    let mut it = entries.into_iter().peekable();
    for m in ModuleId::ALL {
        let prefix = format!("{}/", m.name());
        let mut tensors = Vec::new();
        let mut moments = Vec::new();
        while let Some(e) = it.next_if(|e| e.name.starts_with(&prefix)) {
            let numel: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 3 * numel * 4;
            if end > payload.len() {
                return Err(LoadError::Corrupt(format!("{} runs past the payload", e.name)));
            }
            let vals = floats(&payload[start..end]);
            let tensor = Tensor::new(e.shape.clone(), vals[..numel].to_vec())
                .map_err(|err| LoadError::Corrupt(err.to_string()))?;
            tensors.push((e.name[prefix.len()..].to_string(), tensor));
            moments.push(AdamMoments {
                m: vals[numel..2 * numel].to_vec(),
                v: vals[2 * numel..].to_vec(),
                step: e.step,
            });
        }
        let mut set = ParamSet::new(m as u32, m.name(), tensors);
        set.moments_mut().clone_from_slice(&moments);
        set.set_frozen(m.is_target());
        sets.push(set);
    }
    if let Some(e) = it.next() {
        return Err(LoadError::Corrupt(format!("unexpected tensor {}", e.name)));
    }
    let bundle = ModelBundle::from_parts(dims, &maze, sets, iteration).map_err(|e| match e {
        Error::Autodiff(a) => LoadError::Version(format!("tensor shapes do not match the config: {a}")),
        other => LoadError::Other(other),
    })?;
    Ok(Checkpoint { config, maze, bundle })
}
