//! Central finite-difference checks of analytic encoder gradients.

use crate::encoder::{Encoder, EncoderGrads};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

/// Largest `|analytic - numeric| / max(1, |numeric|)` over all parameters.
pub fn grad_check<F>(encoder: &Encoder, mut objective: F) -> Result<f64>
where
    F: FnMut(&Encoder) -> Result<(f64, EncoderGrads)>,
{
    let (_, analytic) = objective(encoder)?;
    let analytic = analytic.flatten();
    let mut probe = encoder.clone();
    let mut worst = 0.0f64;
    for (k, &a) in analytic.iter().enumerate() {
        let theta = encoder.param(k);
        probe.set_param(k, theta + FD_STEP);
        let (up, _) = objective(&probe)?;
        probe.set_param(k, theta - FD_STEP);
        let (down, _) = objective(&probe)?;
        probe.set_param(k, theta);
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}
