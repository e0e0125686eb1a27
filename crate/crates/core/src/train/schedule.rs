//! One-cycle learning-rate schedule: linear warmup from `peak/25` over the
//! first 30% of steps, then cosine annealing to the floor.

use crate::error::TrainError;

pub const WARMUP_FRACTION: f64 = 0.3;
pub const START_DIV: f64 = 25.0;

/// Learning rate at `step` of a `total_steps`-long run. The peak is attained
/// exactly once, at the end of warmup; the final step lands on `lr_min`.
pub fn onecycle_lr(
    step: usize,
    total_steps: usize,
    lr_peak: f64,
    lr_min: f64,
) -> Result<f64, TrainError> {
    if step >= total_steps {
        return Err(TrainError::ScheduleStep {
            step,
            total: total_steps,
        });
    }
    let warm = (WARMUP_FRACTION * total_steps as f64).floor() as usize;
    if step <= warm {
        let start = lr_peak / START_DIV;
        if warm == 0 {
            return Ok(lr_peak);
        }
        let t = step as f64 / warm as f64;
        return Ok(start + (lr_peak - start) * t);
    }
    let span = (total_steps - 1) - warm;
    let t = (step - warm) as f64 / span as f64;
    Ok(lr_min + (lr_peak - lr_min) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}
