//! Stochastic corruption of feature matrices along the time, channel and
//! magnitude axes, plus SpecAugment-style masking used during fine-tuning.
//!
//! Every function consumes randomness from an explicit [`TeraRng`] in a fixed
//! order, so a seed reproduces both the altered features and the
//! [`AlterationRecord`] describing them.

mod channel;
mod magnitude;
mod specaugment;
mod time;

pub use channel::channel_alteration;
pub use magnitude::magnitude_alteration;
pub use specaugment::{specaugment_mask, SpecAugmentConfig};
pub use time::{num_time_blocks, time_alteration};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TeraError};
use crate::features::FeatureMatrix;
use crate::numeric::Tensor;
use crate::rng::TeraRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeDraw {
    PerBlock,
    PerUtterance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlterationConfig {
    /// Upper bound on the fraction of frames selected for time alteration.
    pub time_fraction: f64,
    /// Frames per time block.
    pub time_width: usize,
    /// Largest channel block width; the drawn width is uniform on `0..=max`.
    pub max_channel_width: usize,
    /// Probability of adding Gaussian noise to an utterance.
    pub noise_probability: f64,
    pub noise_variance: f64,
    pub enable_time: bool,
    pub enable_channel: bool,
    pub enable_magnitude: bool,
    pub time_mode_draw: ModeDraw,
}

impl Default for AlterationConfig {
    fn default() -> Self {
        AlterationConfig {
            time_fraction: 0.15,
            time_width: 7,
            max_channel_width: 8,
            noise_probability: 0.15,
            noise_variance: 0.2,
            enable_time: true,
            enable_channel: true,
            enable_magnitude: true,
            time_mode_draw: ModeDraw::PerBlock,
        }
    }
}

impl AlterationConfig {
    pub fn time_only() -> Self {
        AlterationConfig { enable_channel: false, enable_magnitude: false, ..Default::default() }
    }

    pub fn channel_only() -> Self {
        AlterationConfig { enable_time: false, enable_magnitude: false, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(TeraError::Config(format!("alteration.{m}")));
        if !(0.0..=1.0).contains(&self.time_fraction) {
            return err("time_fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.noise_probability) {
            return err("noise_probability must lie in [0, 1]");
        }
        if self.time_width < 1 {
            return err("time_width must be at least 1");
        }
        if !(self.noise_variance >= 0.0) {
            return err("noise_variance must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeMode {
    MaskZero,
    Replace,
    Keep,
}

impl TimeMode {
    /// 80% mask, 10% replace, 10% keep.
    fn from_uniform(v: f64) -> Self {
        if v < 0.8 {
            TimeMode::MaskZero
        } else if v < 0.9 {
            TimeMode::Replace
        } else {
            TimeMode::Keep
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeBlock {
    pub start: usize,
    pub width: usize,
    pub mode: TimeMode,
    /// Start of the copied segment for `Replace` blocks.
    pub source: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelBlock {
    pub start: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlterationRecord {
    pub time_blocks: Vec<TimeBlock>,
    pub channel_block: Option<ChannelBlock>,
    pub noise_applied: bool,
    pub noise: Option<Tensor<f32>>,
    /// Frames covered by any time block, whatever its mode.
    pub altered_frames: Vec<bool>,
    pub altered_channels: Vec<bool>,
}

impl AlterationRecord {
    pub fn empty(frames: usize, channels: usize) -> Self {
        AlterationRecord {
            time_blocks: Vec::new(),
            channel_block: None,
            noise_applied: false,
            noise: None,
            altered_frames: vec![false; frames],
            altered_channels: vec![false; channels],
        }
    }

    fn merge(&mut self, other: AlterationRecord) {
        self.time_blocks.extend(other.time_blocks);
        if other.channel_block.is_some() {
            self.channel_block = other.channel_block;
        }
        if other.noise_applied {
            self.noise_applied = true;
            self.noise = other.noise;
        }
        self.altered_frames.iter_mut().zip(&other.altered_frames).for_each(|(a, &b)| *a |= b);
        self.altered_channels.iter_mut().zip(&other.altered_channels).for_each(|(a, &b)| *a |= b);
    }

    /// Whether cell `(t, c)` was touched by any objective.
    pub fn is_altered(&self, t: usize, c: usize) -> bool {
        self.noise_applied || self.altered_frames[t] || self.altered_channels[c]
    }

    /// Row-major cell mask of [`is_altered`](Self::is_altered).
    pub fn altered_cells(&self) -> Vec<bool> {
        let h = self.altered_channels.len();
        (0..self.altered_frames.len() * h).map(|i| self.is_altered(i / h, i % h)).collect()
    }
}

/// Apply the enabled objectives in the order time, channel, magnitude, each on
/// the running result. Utterances shorter than one time block skip the time
/// objective.
pub fn alter(x: &FeatureMatrix, cfg: &AlterationConfig, rng: &mut TeraRng) -> Result<(Tensor<f32>, AlterationRecord)> {
    cfg.validate()?;
    if !(cfg.enable_time || cfg.enable_channel || cfg.enable_magnitude) {
        return Err(TeraError::Config("at least one alteration objective must be enabled".into()));
    }
    let (l, h) = (x.num_frames(), x.num_channels());
    let mut record = AlterationRecord::empty(l, h);
    let mut current = x.frames.clone();
    if cfg.enable_time && l >= cfg.time_width {
        let (next, rec) = time_alteration(&current, cfg, rng)?;
        current = next;
        record.merge(rec);
    }
    if cfg.enable_channel {
        let (next, rec) = channel_alteration(&current, cfg, rng)?;
        current = next;
        record.merge(rec);
    }
    if cfg.enable_magnitude {
        let (next, rec) = magnitude_alteration(&current, cfg, rng)?;
        current = next;
        record.merge(rec);
    }
    Ok((current, record))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureKind;

    fn fm(l: usize, h: usize, seed: u64) -> FeatureMatrix {
        let mut rng = TeraRng::seed_from_u64(seed);
        let frames = Tensor::randn(&[l, h], 1.0, &mut rng).map(|v| v + 3.0);
        FeatureMatrix::new("u", "s", frames, FeatureKind::Other, 10.0).unwrap()
    }

    #[test]
    fn all_disabled_is_config_error() {
        let cfg = AlterationConfig { enable_time: false, enable_channel: false, enable_magnitude: false, ..Default::default() };
        let r = alter(&fm(20, 10, 0), &cfg, &mut TeraRng::seed_from_u64(0));
        assert!(matches!(r, Err(TeraError::Config(_))));
    }

    #[test]
    fn time_only_matches_time_alteration() {
        let x = fm(100, 10, 1);
        let cfg = AlterationConfig::time_only();
        let a = alter(&x, &cfg, &mut TeraRng::seed_from_u64(9)).unwrap();
        let b = time_alteration(&x.frames, &cfg, &mut TeraRng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fixed_seed_reproduces() {
        let x = fm(120, 12, 2);
        let cfg = AlterationConfig { noise_probability: 0.5, ..Default::default() };
        for seed in 0..20 {
            let a = alter(&x, &cfg, &mut TeraRng::seed_from_u64(seed)).unwrap();
            let b = alter(&x, &cfg, &mut TeraRng::seed_from_u64(seed)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn noise_lands_on_masked_cells() {
        let x = fm(200, 12, 3);
        let cfg = AlterationConfig { noise_probability: 1.0, ..Default::default() };
        let mut found = false;
        for seed in 0..10 {
            let (xh, rec) = alter(&x, &cfg, &mut TeraRng::seed_from_u64(seed)).unwrap();
            assert!(rec.noise_applied);
            let noise = rec.noise.as_ref().unwrap();
            for b in rec.time_blocks.iter().filter(|b| b.mode == TimeMode::MaskZero) {
                for t in b.start..b.start + b.width {
                    for c in 0..12 {
                        // a masked cell now carries exactly the sampled noise
                        if rec.time_blocks.iter().all(|o| o.mode != TimeMode::Replace) {
                            assert_eq!(xh.at(t, c), noise.at(t, c));
                        }
                        assert_ne!(xh.at(t, c), 0.0);
                        found = true;
                    }
                }
            }
        }
        assert!(found);
    }

    #[test]
    fn unaltered_cells_untouched() {
        let x = fm(150, 16, 4);
        let cfg = AlterationConfig { noise_probability: 0.0, ..Default::default() };
        for seed in 0..50 {
            let (xh, rec) = alter(&x, &cfg, &mut TeraRng::seed_from_u64(seed)).unwrap();
            for t in 0..150 {
                for c in 0..16 {
                    if !rec.is_altered(t, c) {
                        assert_eq!(xh.at(t, c), x.frames.at(t, c));
                    }
                }
            }
        }
    }

    #[test]
    fn short_utterance_skips_time() {
        let x = fm(5, 16, 5);
        let (_, rec) = alter(&x, &AlterationConfig::default(), &mut TeraRng::seed_from_u64(0)).unwrap();
        assert!(rec.time_blocks.is_empty());
    }

    #[test]
    fn record_serializes_to_json() {
        let x = fm(30, 10, 6);
        let (_, rec) = alter(&x, &AlterationConfig::default(), &mut TeraRng::seed_from_u64(1)).unwrap();
        let json = serde_json::to_string(&rec).unwrap();
        let back: AlterationRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rec);
    }
}
