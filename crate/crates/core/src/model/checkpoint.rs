//! Binary checkpoint container: a versioned header followed by named tensors.
//!
//! Layout (all integers and doubles little-endian):
//!
//! ```text
//! "KINEGRAPH-CKPT"  u32 version
//! u32 len, variant tag bytes
//! u32 n_joints   u64 seed   u32 tensor count
//! per tensor: u32 len, name bytes, u32 rank, u64 extent × rank, f64 × numel
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::{Agent, Variant};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8] = b"KINEGRAPH-CKPT";
const VERSION: u32 = 1;
/// Name prefix for agent parameters inside a checkpoint.
pub const PARAM_PREFIX: &str = "param/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub variant: Variant,
    pub n_joints: usize,
    pub seed: u64,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 16 {
        return bad(format!("implausible string length {len}"));
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b).map_err(truncated)?;
    String::from_utf8(b).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
}

fn truncated(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("file is truncated".into())
    } else {
        Error::Io(e)
    }
}

fn write_string(w: &mut impl Write, s: &str) -> io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

impl Checkpoint {
    pub fn new(variant: Variant, n_joints: usize, seed: u64) -> Self {
        Self {
            variant,
            n_joints,
            seed,
            tensors: Vec::new(),
        }
    }

    /// Header plus every agent parameter under [`PARAM_PREFIX`].
    pub fn from_agent(agent: &Agent) -> Self {
        let mut ck = Self::new(agent.variant(), agent.n_joints(), agent.seed());
        for (_, p) in agent.params.iter() {
            ck.push(format!("{PARAM_PREFIX}{}", p.name), p.value.clone());
        }
        ck
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    /// Overwrite the agent's parameters; header and every shape must agree.
    pub fn load_into(&self, agent: &mut Agent) -> Result<()> {
        if self.variant != agent.variant() || self.n_joints != agent.n_joints() {
            return bad(format!(
                "checkpoint is {} with {} joints, agent is {} with {}",
                self.variant,
                self.n_joints,
                agent.variant(),
                agent.n_joints()
            ));
        }
        let ids: Vec<_> = agent.params.ids().collect();
        for id in ids {
            let name = format!("{PARAM_PREFIX}{}", agent.params.get(id).name);
            let t = self.require(&name)?;
            if t.shape() != agent.params.value(id).shape() {
                return bad(format!(
                    "{name}: shape {:?} vs {:?}",
                    t.shape(),
                    agent.params.value(id).shape()
                ));
            }
            agent.params.get_mut(id).value = t.clone();
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_string(w, self.variant.tag())?;
        w.write_all(&(self.n_joints as u32).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_string(w, name)?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &e in t.shape() {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.numel() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; MAGIC.len()];
        r.read_exact(&mut magic).map_err(truncated)?;
        if magic != MAGIC {
            return bad("not a checkpoint file (bad magic)");
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return bad(format!("unsupported version {version}"));
        }
        let variant: Variant = read_string(r)?
            .parse()
            .map_err(|e: Error| Error::Checkpoint(e.to_string()))?;
        let n_joints = read_u32(r)? as usize;
        let seed = read_u64(r)?;
        let count = read_u32(r)?;
        let mut ck = Self::new(variant, n_joints, seed);
        for _ in 0..count {
            let name = read_string(r)?;
            let rank = read_u32(r)? as usize;
            if rank > 8 {
                return bad(format!("{name}: implausible rank {rank}"));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(r)? as usize);
            }
            let numel: usize = shape.iter().product();
            if numel > 1 << 28 {
                return bad(format!("{name}: implausible size {numel}"));
            }
            let mut bytes = vec![0u8; numel * 8];
            r.read_exact(&mut bytes).map_err(truncated)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            ck.push(name, t);
        }
        Ok(ck)
    }

    /// Write via a sibling temp file and rename, so a crash never leaves a
    /// half-written checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = io::BufWriter::new(fs::File::create(&tmp)?);
            self.write_to(&mut f)?;
            f.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = io::BufReader::new(fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}
