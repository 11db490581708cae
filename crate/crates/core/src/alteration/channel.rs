use super::{AlterationConfig, AlterationRecord, ChannelBlock};
use crate::error::{Result, TeraError};
use crate::numeric::Tensor;
use crate::rng::TeraRng;

/// Zero one block of consecutive channels across all frames. The width is
/// uniform on `{0..=W_C}` (0 leaves the input unchanged) and the start uniform
/// on `{0..H−width−1}`.
pub fn channel_alteration(x: &Tensor<f32>, cfg: &AlterationConfig, rng: &mut TeraRng) -> Result<(Tensor<f32>, AlterationRecord)> {
    let (l, h) = (x.rows(), x.cols());
    if h <= cfg.max_channel_width {
        return Err(TeraError::Config(format!(
            "channel alteration needs more than {} channels, input has {h}",
            cfg.max_channel_width
        )));
    }
    let mut record = AlterationRecord::empty(l, h);
    let width = rng.inclusive(0, cfg.max_channel_width);
    if width == 0 {
        return Ok((x.clone(), record));
    }
    let start = rng.below(h - width);
    let mut out = x.clone();
    for t in 0..l {
        out.row_mut(t)[start..start + width].fill(0.0);
    }
    record.altered_channels[start..start + width].fill(true);
    record.channel_block = Some(ChannelBlock { start, width });
    Ok((out, record))
}
