use super::{AlterationConfig, AlterationRecord, ModeDraw, TimeBlock, TimeMode};
use crate::error::{Result, TeraError};
use crate::numeric::Tensor;
use crate::rng::TeraRng;

/// `round(fraction · frames / width)`, halves rounded away from zero.
///
/// A quotient within a relative 1e-9 of a half is treated as an exact half so
/// that decimal fractions like 0.05 round as their decimal value would.
pub fn num_time_blocks(fraction: f64, frames: usize, width: usize) -> usize {
    let q = fraction * frames as f64 / width as f64;
    let half = q.floor() + 0.5;
    if (q - half).abs() <= 1e-9 * q.max(1.0) {
        half.ceil() as usize
    } else {
        q.round() as usize
    }
}

/// Select block starts without replacement from `[0, L − W]` and alter each
/// block: 80% zeroed, 10% replaced by another segment of the original
/// utterance, 10% left unchanged.
///
/// Draw order: block starts, then (per utterance) one mode draw, then per
/// block a mode draw (per block) and a source start for replacements.
pub fn time_alteration(x: &Tensor<f32>, cfg: &AlterationConfig, rng: &mut TeraRng) -> Result<(Tensor<f32>, AlterationRecord)> {
    let (l, h) = (x.rows(), x.cols());
    let w = cfg.time_width;
    if l < w {
        return Err(TeraError::UtteranceTooShort { frames: l, width: w });
    }
    let positions = l - w + 1;
    let n_blocks = num_time_blocks(cfg.time_fraction, l, w).min(positions);
    let starts = rng.sample_without_replacement(positions, n_blocks);
    let shared = match cfg.time_mode_draw {
        ModeDraw::PerUtterance => Some(TimeMode::from_uniform(rng.uniform())),
        ModeDraw::PerBlock => None,
    };

    let mut out = x.clone();
    let mut record = AlterationRecord::empty(l, h);
    for start in starts {
        let mode = shared.unwrap_or_else(|| TimeMode::from_uniform(rng.uniform()));
        let mut source = None;
        match mode {
            TimeMode::MaskZero => {
                for t in start..start + w {
                    out.row_mut(t).fill(0.0);
                }
            }
            TimeMode::Replace => {
                let src = rng.below(positions);
                for k in 0..w {
                    out.row_mut(start + k).copy_from_slice(x.row(src + k));
                }
                source = Some(src);
            }
            TimeMode::Keep => {}
        }
        record.altered_frames[start..start + w].fill(true);
        record.time_blocks.push(TimeBlock { start, width: w, mode, source });
    }
    Ok((out, record))
}
