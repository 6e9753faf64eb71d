//! Binary checkpoints.
//!
//! Layout: the magic bytes `DMFN`, a little-endian `u32` format version, a
//! `u32` byte length followed by a UTF-8 text manifest, then the raw
//! little-endian `f32` payload of every manifest entry in manifest order.
//!
//! The manifest starts with `epoch <e>` and `step <t>` lines, followed by one
//! `<name> f32 <d0>x<d1>...` line per tensor, sorted by name. Parameters are
//! stored as `param/<name>` and the Adam moments as `adam.m/<name>` and
//! `adam.v/<name>`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::diffarray::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::AdamState;

pub const MAGIC: &[u8; 4] = b"DMFN";
pub const VERSION: u32 = 1;

/// Everything a checkpoint file holds, keyed by entry name.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub step: u64,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn capture(params: &ParamStore, state: &AdamState, epoch: usize) -> Self {
        let mut tensors = BTreeMap::new();
        for (i, (_, p)) in params.iter().enumerate() {
            tensors.insert(format!("param/{}", p.name), p.value.clone());
            tensors.insert(format!("adam.m/{}", p.name), state.m[i].clone());
            tensors.insert(format!("adam.v/{}", p.name), state.v[i].clone());
        }
        Self {
            epoch,
            step: state.t,
            tensors,
        }
    }

    /// Copies every entry into `params` and `state` after checking that the
    /// names and shapes match exactly; nothing is modified on error.
    pub fn restore(&self, params: &mut ParamStore, state: &mut AdamState) -> Result<()> {
        let mut expected: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (_, p) in params.iter() {
            for prefix in ["param", "adam.m", "adam.v"] {
                expected.insert(format!("{prefix}/{}", p.name), p.value.shape().to_vec());
            }
        }
        // walk both sorted name lists together and report the first disagreement
        let mut a = expected.iter().peekable();
        let mut b = self.tensors.iter().peekable();
        loop {
            match (a.peek(), b.peek()) {
                (None, None) => break,
                (Some((na, sa)), Some((nb, tb))) if na == nb => {
                    if sa.as_slice() != tb.shape() {
                        return Err(Error::Checkpoint(format!(
                            "entry {na} has shape {:?} in the file but {sa:?} in the model",
                            tb.shape()
                        )));
                    }
                    a.next();
                    b.next();
                }
                (Some((na, _)), nb) if nb.map_or(true, |(nb, _)| na < nb) => {
                    return Err(Error::Checkpoint(format!("entry {na} missing from the file")));
                }
                (_, Some((nb, _))) => {
                    return Err(Error::Checkpoint(format!("entry {nb} is not a model parameter")));
                }
                (Some(_), None) => unreachable!("handled by the missing-entry arm"),
            }
        }
        for (i, p) in params.iter_mut().enumerate() {
            p.value = self.tensors[&format!("param/{}", p.name)].clone();
            state.m[i] = self.tensors[&format!("adam.m/{}", p.name)].clone();
            state.v[i] = self.tensors[&format!("adam.v/{}", p.name)].clone();
        }
        state.t = self.step;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = format!("epoch {}\nstep {}\n", self.epoch, self.step);
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            manifest.push_str(&format!("{name} f32 {}\n", dims.join("x")));
        }
        let payload: usize = self.tensors.values().map(Tensor::numel).sum();
        let mut out = Vec::with_capacity(12 + manifest.len() + 4 * payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for t in self.tensors.values() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic bytes; not a checkpoint file".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(bad(format!("format version {version}, expected {VERSION}")));
        }
        let len = u32_at(8) as usize;
        let text = bytes
            .get(12..12 + len)
            .and_then(|b| std::str::from_utf8(b).ok())
            .ok_or_else(|| bad("truncated or non-UTF-8 manifest".into()))?;
        let mut lines = text.lines();
        let mut header = |key: &str| -> Result<u64> {
            lines
                .next()
                .and_then(|l| l.strip_prefix(key))
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| bad(format!("manifest lacks `{key}` line")))
        };
        let epoch = header("epoch ")? as usize;
        let step = header("step ")?;

        let mut entries = Vec::new();
        for line in lines {
            let parts: Vec<&str> = line.split(' ').collect();
            let [name, "f32", dims] = parts[..] else {
                return Err(bad(format!("malformed manifest line {line:?}")));
            };
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>().ok().filter(|&d| d > 0))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad(format!("bad shape in manifest line {line:?}")))?;
            entries.push((name.to_string(), shape));
        }
        if !entries.windows(2).all(|w| w[0].0 < w[1].0) {
            return Err(bad("manifest entries are not in sorted order".into()));
        }

        let mut pos = 12 + len;
        let mut tensors = BTreeMap::new();
        for (name, shape) in entries {
            let n: usize = shape.iter().product();
            let raw = bytes
                .get(pos..pos + 4 * n)
                .ok_or_else(|| bad(format!("payload of {name} is truncated")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            tensors.insert(name, Tensor::new(shape, data)?);
            pos += 4 * n;
        }
        if pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes after the payload", bytes.len() - pos)));
        }
        Ok(Self { epoch, step, tensors })
    }
}

/// Writes parameters, Adam moments and the epoch counter. Values are stored
/// as `f32`; callers that resume in-process should quantize first (see
/// [`ParamStore::quantize_f32`]) so both paths continue from identical state.
pub fn save_checkpoint(path: impl AsRef<Path>, params: &ParamStore, state: &AdamState, epoch: usize) -> Result<()> {
    let path = path.as_ref();
    let bytes = Checkpoint::capture(params, state, epoch).to_bytes();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Restores `params` and `state` and returns the stored epoch counter.
pub fn load_checkpoint(path: impl AsRef<Path>, params: &mut ParamStore, state: &mut AdamState) -> Result<usize> {
    let ck = read_checkpoint(path)?;
    ck.restore(params, state)?;
    Ok(ck.epoch)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
