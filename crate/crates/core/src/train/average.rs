use std::path::PathBuf;

use crate::error::{usage, Error, Result};
use crate::model::{load_checkpoint, Checkpoint, CheckpointMeta, ParamStore};
use crate::numerics::Tensor;

/// The `k` checkpoints with the lowest validation loss; equal losses
/// prefer the later step. Asking for more than exist returns them all.
pub fn select_top_k(metas: &[CheckpointMeta], k: usize) -> Vec<CheckpointMeta> {
    if metas.len() < k {
        log::warn!("asked for the best {k} checkpoints but only {} exist; using all", metas.len());
    }
    let mut sorted = metas.to_vec();
    sorted.sort_by(|a, b| {
        a.validation_loss
            .total_cmp(&b.validation_loss)
            .then(b.step.cmp(&a.step))
    });
    sorted.truncate(k);
    sorted
}

/// Element-wise mean, accumulated in `f64` in the given order.
pub fn average_params(stores: &[&ParamStore]) -> Result<ParamStore> {
    let first = *stores.first().ok_or_else(|| usage("nothing to average"))?;
    for other in &stores[1..] {
        if let Some(name) = other.names().find(|n| first.get(n).is_none()) {
            return Err(Error::Checkpoint(format!("parameter {name} is not present in every checkpoint")));
        }
    }
    let mut out = ParamStore::new();
    for (name, t0) in first.iter() {
        let mut acc = t0.data().to_vec();
        for other in &stores[1..] {
            let t = other
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("parameter {name} is not present in every checkpoint")))?;
            if t.shape() != t0.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    t0.shape(),
                    t.shape()
                )));
            }
            for (a, b) in acc.iter_mut().zip(t.data()) {
                *a += b;
            }
        }
        let n = stores.len() as f64;
        for a in &mut acc {
            *a /= n;
        }
        out.insert(name.clone(), Tensor::new(t0.shape().to_vec(), acc)?);
    }
    Ok(out)
}

/// Averages the parameters of checkpoint files. The result carries the
/// latest step and the mean validation loss of its inputs.
pub fn average_checkpoints(paths: &[PathBuf]) -> Result<Checkpoint> {
    let ckpts = paths.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<_>>>()?;
    let first = ckpts.first().ok_or_else(|| usage("nothing to average"))?;
    if let Some(c) = ckpts.iter().find(|c| c.config != first.config) {
        return Err(Error::Checkpoint(format!(
            "model configurations differ (step {} vs step {})",
            first.step, c.step
        )));
    }
    let stores: Vec<&ParamStore> = ckpts.iter().map(|c| &c.params).collect();
    let params = average_params(&stores)?;
    let n = ckpts.len() as f64;
    Ok(Checkpoint {
        config: first.config.clone(),
        params,
        step: ckpts.iter().map(|c| c.step).max().unwrap_or(0),
        validation_loss: ckpts.iter().map(|c| c.validation_loss).sum::<f64>() / n,
    })
}
