use crate::error::{usage, Result};

/// Inverse-square-root warmup:
/// `base_lr · d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn lr_at(step: usize, base_lr: f64, warmup_steps: usize, d_model: usize) -> Result<f64> {
    if step == 0 {
        return Err(usage("learning-rate steps are counted from 1"));
    }
    if warmup_steps == 0 || d_model == 0 {
        return Err(usage("warmup_steps and d_model must be positive"));
    }
    let s = step as f64;
    let w = warmup_steps as f64;
    let decay = 1.0 / s.sqrt();
    let ramp = s / (w * w.sqrt());
    Ok(base_lr / (d_model as f64).sqrt() * decay.min(ramp))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs()
    }

    #[test]
    fn schedule_shape() {
        let (base, w, d) = (2.0, 400, 64);
        let peak = base / 8.0 / 20.0;
        assert!(close(lr_at(w, base, w, d).unwrap(), peak));
        assert!(close(lr_at(w / 4, base, w, d).unwrap(), peak / 4.0));
        assert!(close(lr_at(4 * w, base, w, d).unwrap(), peak / 2.0));
        assert!(lr_at(0, base, w, d).is_err());
    }

    #[test]
    fn rises_then_falls() {
        let lrs: Vec<f64> = (1..=2000).map(|s| lr_at(s, 1.0, 500, 32).unwrap()).collect();
        assert!(lrs[..500].windows(2).all(|p| p[0] <= p[1]));
        assert!(lrs[499..].windows(2).all(|p| p[0] >= p[1]));
    }
}
