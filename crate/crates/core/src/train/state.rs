use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::model::{ParamStore, U2Model};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"U2TS";

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: U2Model,
    pub adam: Adam,
    /// Completed optimizer steps.
    pub step: usize,
}

impl TrainState {
    pub fn new(model: U2Model, adam: AdamConfig) -> Self {
        Self {
            model,
            adam: Adam::new(adam),
            step: 0,
        }
    }
}

/// Full-precision sidecar stored next to a checkpoint (`step_N.state`).
pub fn state_path_for(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("state")
}

fn put_map<'a>(out: &mut Vec<u8>, items: impl Iterator<Item = (&'a String, &'a Tensor)>) {
    let items: Vec<_> = items.collect();
    out.extend_from_slice(&(items.len() as u32).to_le_bytes());
    for (name, t) in items {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

/// Writes parameters, optimizer moments and step counters in `f64`.
pub fn save_train_state(path: &Path, state: &TrainState) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(state.step as u64).to_le_bytes());
    out.extend_from_slice(&state.adam.t.to_le_bytes());
    put_map(&mut out, state.model.params.iter());
    put_map(&mut out, state.adam.m.iter());
    put_map(&mut out, state.adam.v.iter());
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(Error::format(self.path, "truncated training state"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn map(&mut self) -> Result<BTreeMap<String, Tensor>> {
        let n = self.u32()?;
        let mut out = BTreeMap::new();
        for _ in 0..n {
            let len = self.u32()?;
            let name = String::from_utf8(self.take(len)?.to_vec())
                .map_err(|_| Error::format(self.path, "parameter name is not UTF-8"))?;
            let rank = self.u32()?;
            let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let data = self
                .take(count * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::format(self.path, e.to_string()))?;
            out.insert(name, t);
        }
        Ok(out)
    }
}

/// Restores a state written by [`save_train_state`]; `model` supplies the
/// architecture and must match the stored parameter shapes.
pub fn load_train_state(path: &Path, model: &U2Model, adam: AdamConfig) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &bytes, path };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "not a training state file"));
    }
    let step = r.u64()? as usize;
    let t = r.u64()?;
    let mut params = ParamStore::new();
    for (k, v) in r.map()? {
        params.insert(k, v);
    }
    let m = r.map()?;
    let v = r.map()?;
    if !r.buf.is_empty() {
        return Err(Error::format(path, "trailing bytes after training state"));
    }
    let model = U2Model::from_params(model.config.clone(), params)?;
    Ok(TrainState {
        model,
        adam: Adam { config: adam, t, m, v },
        step,
    })
}
