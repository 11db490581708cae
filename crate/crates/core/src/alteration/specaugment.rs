use serde::{Deserialize, Serialize};

use crate::numeric::Tensor;
use crate::rng::TeraRng;

/// Time/frequency masking without time warping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpecAugmentConfig {
    /// Maximum time-mask width `T`.
    pub time_width: usize,
    /// Maximum frequency-mask width `F`.
    pub freq_width: usize,
    pub time_masks: usize,
    pub freq_masks: usize,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        SpecAugmentConfig { time_width: 70, freq_width: 4, time_masks: 2, freq_masks: 2 }
    }
}

/// Zero `time_masks` spans of frames and `freq_masks` spans of channels.
/// Widths are uniform on `{0..=T}` / `{0..=F}` (clamped to the input), starts
/// uniform over the positions where the span fits; spans may overlap.
pub fn specaugment_mask(x: &Tensor<f32>, cfg: &SpecAugmentConfig, rng: &mut TeraRng) -> Tensor<f32> {
    let (l, h) = (x.rows(), x.cols());
    let mut out = x.clone();
    for _ in 0..cfg.time_masks {
        let w = rng.inclusive(0, cfg.time_width).min(l);
        let start = rng.inclusive(0, l - w);
        for t in start..start + w {
            out.row_mut(t).fill(0.0);
        }
    }
    for _ in 0..cfg.freq_masks {
        let w = rng.inclusive(0, cfg.freq_width).min(h);
        let start = rng.inclusive(0, h - w);
        for t in 0..l {
            out.row_mut(t)[start..start + w].fill(0.0);
        }
    }
    out
}
