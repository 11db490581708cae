use crate::error::{Result, TeraError};

/// Linear warm-up from 0 to `peak` over the first `warmup_fraction` of
/// `total` steps, then linear decay to 0 at `total`.
pub fn lr_at_step(step: f64, total: u64, peak: f64, warmup_fraction: f64) -> Result<f64> {
    let t = total as f64;
    if !(0.0..=t).contains(&step) {
        return Err(TeraError::Contract(format!("step {step} outside [0, {total}]")));
    }
    if total == 0 || !(warmup_fraction > 0.0 && warmup_fraction < 1.0) {
        return Err(TeraError::Contract("schedule needs total ≥ 1 and warmup fraction in (0, 1)".into()));
    }
    let warm = warmup_fraction * t;
    Ok(if step <= warm { peak * (step / warm) } else { peak * ((t - step) / (t - warm)) })
}
