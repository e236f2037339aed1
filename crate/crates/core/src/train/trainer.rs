use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    average_checkpoints, save_train_state, select_top_k, state_path_for, train_step, validation_loss,
    StepRecord, TrainConfig, TrainState,
};
use crate::error::{usage, Error, Result};
use crate::frontend::{augment, Utterance};
use crate::model::{read_checkpoint_meta, save_checkpoint, Checkpoint, CheckpointMeta};

pub const CKPT_DIR: &str = "ckpt";
pub const LOG_NAME: &str = "train.log.jsonl";
pub const FINAL_NAME: &str = "final.u2ck";

const SHUFFLE_SALT: u64 = 0x5f3a_91c7_22d4_e801;

/// Corpus indices of the batch used at `step` (1-based). The corpus is
/// walked in a fresh seeded permutation every epoch.
pub fn batch_indices(seed: u64, step: usize, batch_size: usize, n: usize) -> Vec<usize> {
    let start = (step - 1) * batch_size;
    let mut epoch = usize::MAX;
    let mut order: Vec<usize> = Vec::new();
    (start..start + batch_size)
        .map(|pos| {
            if pos / n != epoch {
                epoch = pos / n;
                order = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT);
                rng.set_stream(epoch as u64);
                order.shuffle(&mut rng);
            }
            order[pos % n]
        })
        .collect()
}

/// Generator for the chunk draw and augmentation of one step. Depends only
/// on (seed, step), so a resumed run sees the same randomness.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Log records produced by this invocation.
    pub records: Vec<StepRecord>,
    /// Every checkpoint in the run directory, in step order.
    pub checkpoints: Vec<CheckpointMeta>,
    pub averaged: Option<PathBuf>,
}

fn checkpoint_name(step: usize) -> String {
    format!("step_{step:07}.u2ck")
}

/// Keeps the first `keep` records of an existing log so a resumed run
/// continues it without duplicates.
fn open_log(path: &Path, keep: usize) -> Result<File> {
    let mut kept = Vec::new();
    if keep > 0 && path.exists() {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let rec: StepRecord =
                serde_json::from_str(&line).map_err(|e| Error::format(path, e.to_string()))?;
            if rec.step <= keep {
                kept.push(line);
            }
        }
    }
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for line in kept {
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(f)
}

fn list_checkpoints(dir: &Path) -> Result<Vec<CheckpointMeta>> {
    let mut metas = Vec::new();
    if !dir.exists() {
        return Ok(metas);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "u2ck") {
            metas.push(read_checkpoint_meta(&path)?);
        }
    }
    metas.sort_by_key(|m| m.step);
    Ok(metas)
}

/// Trains from `state.step + 1` up to `cfg.max_steps`, logging every step,
/// checkpointing at the configured cadence and on the last step, then
/// averages the best checkpoints of the run into `final.u2ck`.
pub fn run_training(
    cfg: &TrainConfig,
    mut state: TrainState,
    train: &[Utterance],
    valid: &[Utterance],
    run_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(usage("training corpus is empty"));
    }
    let ckpt_dir = run_dir.join(CKPT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let log_path = run_dir.join(LOG_NAME);
    let mut log_file = open_log(&log_path, state.step)?;

    let mut records = Vec::new();
    for step in state.step + 1..=cfg.max_steps {
        let mut rng = step_rng(cfg.seed, step);
        let chunk = cfg.chunk_policy.draw(&mut rng);
        let batch = batch_indices(cfg.seed, step, cfg.batch_size, train.len())
            .into_iter()
            .map(|i| {
                let u = &train[i];
                Ok(Utterance {
                    id: u.id.clone(),
                    features: augment(&u.features, cfg.spec_sub.as_ref(), cfg.spec_aug.as_ref(), &mut rng)?,
                    tokens: u.tokens.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let rec = train_step(&mut state, &batch, chunk, cfg)?;
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(log_file, "{line}").map_err(|e| Error::io(&log_path, e))?;
        log::info!(
            "step {} lr {:.3e} ctc {:.4} l2r {:.4} r2l {:.4} total {:.4}",
            rec.step,
            rec.lr,
            rec.l_ctc,
            rec.l_l2r,
            rec.l_r2l,
            rec.l_combined
        );

        if step % cfg.checkpoint_every == 0 || step == cfg.max_steps {
            let vl = validation_loss(&state.model, valid, cfg)?.unwrap_or(rec.l_combined);
            let path = ckpt_dir.join(checkpoint_name(step));
            save_checkpoint(&path, &Checkpoint::from_model(&state.model, step as u64, vl))?;
            save_train_state(&state_path_for(&path), &state)?;
            log::info!("checkpoint {} (validation loss {vl:.4})", path.display());
        }
        records.push(rec);
    }
    log_file.flush().map_err(|e| Error::io(&log_path, e))?;

    let checkpoints = list_checkpoints(&ckpt_dir)?;
    let averaged = if checkpoints.is_empty() {
        None
    } else {
        let best: Vec<PathBuf> = select_top_k(&checkpoints, cfg.average_top_k)
            .into_iter()
            .map(|m| m.path)
            .collect();
        let avg = average_checkpoints(&best)?;
        let path = run_dir.join(FINAL_NAME);
        save_checkpoint(&path, &avg)?;
        Some(path)
    };
    Ok(TrainOutcome {
        state,
        records,
        checkpoints,
        averaged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch_once() {
        let n = 10;
        let mut seen: Vec<usize> = (1..=5).flat_map(|s| batch_indices(7, s, 2, n)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
        assert_eq!(batch_indices(7, 3, 4, n), batch_indices(7, 3, 4, n));
    }
}
