//! Seeded synthetic corpus with known phone and speaker structure.
//!
//! Each utterance is a sequence of "pseudo-phones": fixed spectral templates
//! held for several frames with short linear transitions between them. Every
//! speaker warps the templates with a per-channel gain and adds a per-channel
//! offset, and frames carry small Gaussian noise. Frame labels (phone ids)
//! and speaker labels give probe tasks a ground truth without external data.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TeraError};
use crate::features::{FeatureKind, FeatureMatrix, FRAME_SHIFT_MS};
use crate::numeric::Tensor;
use crate::rng::TeraRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub speakers: usize,
    pub utterances_per_speaker: usize,
    pub channels: usize,
    pub phones: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub min_phone_frames: usize,
    pub max_phone_frames: usize,
    pub transition_frames: usize,
    pub noise_std: f64,
    pub speaker_offset_std: f64,
    pub speaker_gain_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            speakers: 8,
            utterances_per_speaker: 8,
            channels: 16,
            phones: 8,
            min_frames: 32,
            max_frames: 44,
            min_phone_frames: 10,
            max_phone_frames: 20,
            transition_frames: 2,
            noise_std: 0.15,
            speaker_offset_std: 0.5,
            speaker_gain_std: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub features: Vec<FeatureMatrix>,
    /// Phone id of every frame, per utterance.
    pub frame_labels: Vec<Vec<usize>>,
    /// Speaker index per utterance.
    pub speaker_labels: Vec<usize>,
}

/// Smooth spectral shape: a sum of two Gaussian bumps over the channel axis.
fn template(rng: &mut TeraRng, channels: usize) -> Vec<f64> {
    let bumps: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            let centre = rng.uniform() * channels as f64;
            let width = 1.0 + rng.uniform() * channels as f64 / 6.0;
            let height = 1.0 + rng.uniform() * 1.5;
            (centre, width, height)
        })
        .collect();
    (0..channels)
        .map(|c| {
            bumps.iter().map(|&(m, w, h)| h * (-((c as f64 - m) / w).powi(2) / 2.0).exp()).sum::<f64>() - 0.8
        })
        .collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.speakers == 0 || cfg.utterances_per_speaker == 0 || cfg.channels == 0 || cfg.phones < 2 {
        return Err(TeraError::Config("synthetic corpus needs speakers, utterances, channels ≥ 1 and ≥ 2 phones".into()));
    }
    if cfg.min_frames == 0 || cfg.min_frames > cfg.max_frames || cfg.min_phone_frames == 0 || cfg.min_phone_frames > cfg.max_phone_frames {
        return Err(TeraError::Config("synthetic corpus length ranges are empty".into()));
    }
    let mut rng = TeraRng::derive(cfg.seed, &[0]);
    let templates: Vec<Vec<f64>> = (0..cfg.phones).map(|_| template(&mut rng, cfg.channels)).collect();

    let mut out = SynthCorpus { features: Vec::new(), frame_labels: Vec::new(), speaker_labels: Vec::new() };
    for s in 0..cfg.speakers {
        let mut srng = TeraRng::derive(cfg.seed, &[1, s as u64]);
        let offset: Vec<f64> = (0..cfg.channels).map(|_| srng.normal(0.0, cfg.speaker_offset_std)).collect();
        let gain: Vec<f64> = (0..cfg.channels).map(|_| 1.0 + srng.normal(0.0, cfg.speaker_gain_std)).collect();
        for u in 0..cfg.utterances_per_speaker {
            let mut urng = TeraRng::derive(cfg.seed, &[2, s as u64, u as u64]);
            let len = urng.inclusive(cfg.min_frames, cfg.max_frames);
            let mut labels = Vec::with_capacity(len);
            let mut prev = usize::MAX;
            while labels.len() < len {
                let mut phone = urng.below(cfg.phones);
                if phone == prev {
                    phone = (phone + 1 + urng.below(cfg.phones - 1)) % cfg.phones;
                }
                let dur = urng.inclusive(cfg.min_phone_frames, cfg.max_phone_frames);
                labels.extend(std::iter::repeat_n(phone, dur));
                prev = phone;
            }
            labels.truncate(len);

            let mut data = Vec::with_capacity(len * cfg.channels);
            for t in 0..len {
                let cur = &templates[labels[t]];
                // blend towards the previous phone in the first frames of a segment
                let mut back = 0;
                while back < t && labels[t - back - 1] == labels[t] {
                    back += 1;
                }
                let blend = if back < t && back < cfg.transition_frames {
                    let prev = &templates[labels[t - back - 1]];
                    Some((prev, (back + 1) as f64 / (cfg.transition_frames + 1) as f64))
                } else {
                    None
                };
                for c in 0..cfg.channels {
                    let base = match blend {
                        Some((p, a)) => (1.0 - a) * p[c] + a * cur[c],
                        None => cur[c],
                    };
                    let v = gain[c] * base + offset[c] + urng.normal(0.0, cfg.noise_std);
                    data.push(v as f32);
                }
            }
            let frames = Tensor::new(vec![len, cfg.channels], data)?;
            out.features.push(FeatureMatrix::new(
                format!("spk{s:03}-utt{u:03}"),
                format!("spk{s:03}"),
                frames,
                FeatureKind::Other,
                FRAME_SHIFT_MS,
            )?);
            out.frame_labels.push(labels);
            out.speaker_labels.push(s);
        }
    }
    Ok(out)
}

/// Standard-normal features with uniformly random utterance and frame labels;
/// no label is predictable from the features.
pub fn random_corpus(utterances: usize, frames: usize, channels: usize, classes: usize, seed: u64) -> Result<SynthCorpus> {
    if utterances == 0 || frames == 0 || channels == 0 || classes < 2 {
        return Err(TeraError::Config("random corpus needs positive sizes and ≥ 2 classes".into()));
    }
    let mut rng = TeraRng::derive(seed, &[3]);
    let mut out = SynthCorpus { features: Vec::new(), frame_labels: Vec::new(), speaker_labels: Vec::new() };
    for u in 0..utterances {
        let label = rng.below(classes);
        let frames_t = Tensor::randn(&[frames, channels], 1.0, &mut rng);
        out.frame_labels.push((0..frames).map(|_| rng.below(classes)).collect());
        out.speaker_labels.push(label);
        out.features.push(FeatureMatrix::new(
            format!("rand-{u:05}"),
            format!("class{label:03}"),
            frames_t,
            FeatureKind::Other,
            FRAME_SHIFT_MS,
        )?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_labels() {
        let cfg = SynthConfig::default();
        let c = generate(&cfg).unwrap();
        assert_eq!(c.features.len(), 64);
        for ((fm, fl), &s) in c.features.iter().zip(&c.frame_labels).zip(&c.speaker_labels) {
            assert_eq!(fm.num_frames(), fl.len());
            assert!(fm.num_frames() >= 32 && fm.num_frames() <= 44);
            assert_eq!(fm.num_channels(), 16);
            assert!(fl.iter().all(|&p| p < 8));
            assert_eq!(fm.speaker_id, format!("spk{s:03}"));
        }
    }

    #[test]
    fn seeded() {
        let cfg = SynthConfig { seed: 5, ..Default::default() };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        assert_ne!(generate(&cfg).unwrap().features, generate(&SynthConfig::default()).unwrap().features);
    }
}
