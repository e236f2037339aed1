use rand::Rng;

use crate::error::{usage, Result};
use crate::numerics::Tensor;

/// Frame-span substitution: up to `n_max` times, overwrite a span of
/// `t_min..=t_max` frames with an equally long span starting no later.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecSubConfig {
    pub t_max: usize,
    pub t_min: usize,
    pub n_max: usize,
}

impl Default for SpecSubConfig {
    fn default() -> Self {
        Self {
            t_max: 30,
            t_min: 0,
            n_max: 3,
        }
    }
}

impl SpecSubConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_min > self.t_max {
            return Err(usage(format!(
                "spec_sub t_min {} exceeds t_max {}",
                self.t_min, self.t_max
            )));
        }
        Ok(())
    }
}

/// One applied substitution: frames `target..target+len` received the
/// values of `source..source+len` as they were just before the write.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Substitution {
    pub target: usize,
    pub source: usize,
    pub len: usize,
}

pub fn spec_sub<R: Rng + ?Sized>(features: &Tensor, cfg: &SpecSubConfig, rng: &mut R) -> Result<Tensor> {
    spec_sub_traced(features, cfg, rng).map(|(t, _)| t)
}

/// [`spec_sub`] that also reports every substitution it performed.
/// Draws whose span is longer than the utterance are skipped.
pub fn spec_sub_traced<R: Rng + ?Sized>(
    features: &Tensor,
    cfg: &SpecSubConfig,
    rng: &mut R,
) -> Result<(Tensor, Vec<Substitution>)> {
    cfg.validate()?;
    let (t_len, f) = (features.rows(), features.cols());
    let mut out = features.clone();
    let mut trace = Vec::new();
    let n = rng.gen_range(0..=cfg.n_max);
    for _ in 0..n {
        let len = rng.gen_range(cfg.t_min..=cfg.t_max);
        if len > t_len {
            continue;
        }
        let target = rng.gen_range(0..=t_len - len);
        let source = rng.gen_range(0..=target);
        let snapshot = out.data()[source * f..(source + len) * f].to_vec();
        out.data_mut()[target * f..(target + len) * f].copy_from_slice(&snapshot);
        trace.push(Substitution {
            target,
            source,
            len,
        });
    }
    Ok((out, trace))
}

/// Frequency and time masking.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpecAugConfig {
    pub f_max: usize,
    pub num_f_masks: usize,
    pub t_mask_max: usize,
    pub num_t_masks: usize,
    pub fill: f64,
}

impl Default for SpecAugConfig {
    fn default() -> Self {
        Self {
            f_max: 10,
            num_f_masks: 2,
            t_mask_max: 50,
            num_t_masks: 2,
            fill: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskAxis {
    Frequency,
    Time,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskBand {
    pub axis: MaskAxis,
    pub start: usize,
    pub width: usize,
}

pub fn spec_augment<R: Rng + ?Sized>(features: &Tensor, cfg: &SpecAugConfig, rng: &mut R) -> Result<Tensor> {
    spec_augment_traced(features, cfg, rng).map(|(t, _)| t)
}

/// Frequency bands are drawn first, then time bands. Time mask widths
/// are capped at the utterance length.
pub fn spec_augment_traced<R: Rng + ?Sized>(
    features: &Tensor,
    cfg: &SpecAugConfig,
    rng: &mut R,
) -> Result<(Tensor, Vec<MaskBand>)> {
    let (t_len, f) = (features.rows(), features.cols());
    if cfg.f_max > f {
        return Err(usage(format!(
            "frequency mask width {} exceeds feature dim {f}",
            cfg.f_max
        )));
    }
    let mut out = features.clone();
    let mut bands = Vec::with_capacity(cfg.num_f_masks + cfg.num_t_masks);
    for _ in 0..cfg.num_f_masks {
        let width = rng.gen_range(0..=cfg.f_max);
        let start = rng.gen_range(0..=f - width);
        for t in 0..t_len {
            out.data_mut()[t * f + start..t * f + start + width].fill(cfg.fill);
        }
        bands.push(MaskBand {
            axis: MaskAxis::Frequency,
            start,
            width,
        });
    }
    for _ in 0..cfg.num_t_masks {
        let width = rng.gen_range(0..=cfg.t_mask_max.min(t_len));
        let start = rng.gen_range(0..=t_len - width);
        out.data_mut()[start * f..(start + width) * f].fill(cfg.fill);
        bands.push(MaskBand {
            axis: MaskAxis::Time,
            start,
            width,
        });
    }
    Ok((out, bands))
}

/// Training-time augmentation: substitution first, then masking.
pub fn augment<R: Rng + ?Sized>(
    features: &Tensor,
    sub: Option<&SpecSubConfig>,
    mask: Option<&SpecAugConfig>,
    rng: &mut R,
) -> Result<Tensor> {
    let mut x = match sub {
        Some(cfg) => spec_sub(features, cfg, rng)?,
        None => features.clone(),
    };
    if let Some(cfg) = mask {
        x = spec_augment(&x, cfg, rng)?;
    }
    Ok(x)
}
