//! `U2CK` checkpoint files.
//!
//! Layout (little-endian): magic `U2CK`, `u32` version, `u32` length plus
//! UTF-8 `key=value` model config, `u64` step, `f64` validation loss,
//! `u32` parameter count, then per parameter: `u32` name length, name
//! bytes, `u32` rank, `u32` extents, `f32` data.

use std::fs;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use super::{ModelConfig, ParamStore, U2Model};
use crate::config::{from_kv, to_kv};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"U2CK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub step: u64,
    pub validation_loss: f64,
}

impl Checkpoint {
    pub fn from_model(model: &U2Model, step: u64, validation_loss: f64) -> Self {
        Self {
            config: model.config.clone(),
            params: model.params.clone(),
            step,
            validation_loss,
        }
    }

    pub fn into_model(self) -> Result<U2Model> {
        U2Model::from_params(self.config, self.params)
    }

    /// Rounds every parameter to the stored `f32` precision.
    pub fn quantized(mut self) -> Self {
        for (_, t) in self.params.iter_mut() {
            for x in t.data_mut() {
                *x = *x as f32 as f64;
            }
        }
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = to_kv(&self.config);
        buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        buf.extend_from_slice(cfg.as_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&self.validation_loss.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        buf
    }
}

/// Metadata used for top-k selection.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub path: PathBuf,
    pub step: u64,
    pub validation_loss: f64,
}

struct Cursor<'a, R: Read> {
    r: &'a mut R,
    path: &'a Path,
}

impl<R: Read> Cursor<'_, R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut b = vec![0u8; n];
        self.r
            .read_exact(&mut b)
            .map_err(|_| Error::format(self.path, "truncated checkpoint"))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.bytes(n)?).map_err(|_| Error::format(self.path, "invalid UTF-8"))
    }

    fn header(&mut self) -> Result<(ModelConfig, u64, f64)> {
        if self.bytes(4)? != MAGIC {
            return Err(Error::format(self.path, "missing U2CK magic"));
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(Error::format(self.path, format!("unsupported version {version}")));
        }
        let cfg: ModelConfig = from_kv(&self.string()?)?;
        Ok((cfg, self.u64()?, self.f64()?))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut slice = bytes.as_slice();
    let mut c = Cursor { r: &mut slice, path };
    let (config, step, validation_loss) = c.header()?;
    let n = c.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let name = c.string()?;
        let rank = c.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let count: usize = shape.iter().product();
        let data = c
            .bytes(4 * count)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    if !slice.is_empty() {
        return Err(Error::format(path, "trailing bytes after last parameter"));
    }
    Ok(Checkpoint {
        config,
        params,
        step,
        validation_loss,
    })
}

pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut c = Cursor { r: &mut r, path };
    let (_, step, validation_loss) = c.header()?;
    Ok(CheckpointMeta {
        path: path.to_path_buf(),
        step,
        validation_loss,
    })
}
