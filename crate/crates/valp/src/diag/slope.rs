//! Historic sub-loss slope: an OLS fit of loss against batch index over
//! the tail of a training trace, classified against fixed thresholds.

use super::{DiagError, Thresholds};

/// How fast an output's loss is still descending. The derived ordering is
/// by "descendingness": `Steep < Moderate < Stuck`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SlopeClass {
    Steep,
    Moderate,
    Stuck,
}

impl SlopeClass {
    pub fn name(self) -> &'static str {
        match self {
            SlopeClass::Steep => "steep",
            SlopeClass::Moderate => "moderate",
            SlopeClass::Stuck => "stuck",
        }
    }
}

/// Ordinary-least-squares slope of the last `window` trace entries
/// against their batch index.
pub fn loss_slope(trace: &[f64], window: usize) -> Result<f64, DiagError> {
    if window < 2 || trace.len() < window {
        return Err(DiagError::ShortTrace {
            len: trace.len(),
            window,
        });
    }
    let tail = &trace[trace.len() - window..];
    let n = window as f64;
    let x_mean = (window - 1) as f64 / 2.0;
    let y_mean: f64 = tail.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &y) in tail.iter().enumerate() {
        let dx = i as f64 - x_mean;
        num += dx * (y - y_mean);
        den += dx * dx;
    }
    Ok(num / den)
}

/// Thresholded classification: slopes above `stuck` (toward zero or
/// positive) have converged; slopes below `steep` are still in the early
/// phase of improvement; anything in between descends moderately.
pub fn classify_slope(slope: f64, thresholds: &Thresholds) -> SlopeClass {
    if slope > thresholds.stuck {
        SlopeClass::Stuck
    } else if slope < thresholds.steep {
        SlopeClass::Steep
    } else {
        SlopeClass::Moderate
    }
}
