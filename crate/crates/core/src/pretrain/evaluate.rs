use serde::{Deserialize, Serialize};

use crate::alteration::{num_time_blocks, AlterationConfig};
use crate::encoder::{Mode, TeraModel};
use crate::error::{Result, TeraError};
use crate::features::FeatureMatrix;
use crate::numeric::Graph;
use crate::rng::TeraRng;

/// Masked-frame reconstruction error of a model against a predictor that
/// outputs each channel's corpus mean, scored on the same cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionEval {
    pub model_l1: f64,
    pub baseline_l1: f64,
    pub cells: usize,
}

impl ReconstructionEval {
    pub fn ratio(&self) -> f64 {
        self.model_l1 / self.baseline_l1
    }
}

/// Per-channel mean over every frame of `features`.
pub fn channel_means(features: &[FeatureMatrix]) -> Result<Vec<f64>> {
    let first = features.first().ok_or_else(|| TeraError::EmptyInput("no utterances to average".into()))?;
    let h = first.num_channels();
    let mut acc = vec![0f64; h];
    let mut n = 0usize;
    for fm in features {
        if fm.num_channels() != h {
            return Err(TeraError::Data(format!("{}: {} channels, expected {h}", fm.utterance_id, fm.num_channels())));
        }
        for t in 0..fm.num_frames() {
            for (a, &v) in acc.iter_mut().zip(fm.frames.row(t)) {
                *a += v as f64;
            }
        }
        n += fm.num_frames();
    }
    Ok(acc.into_iter().map(|a| a / n as f64).collect())
}

/// Zero seeded time blocks (count and width from `alteration`), reconstruct
/// in evaluation mode and score every channel of the zeroed frames.
/// Utterances shorter than one block are skipped.
pub fn masked_reconstruction_eval(
    model: &TeraModel<f32>,
    features: &[FeatureMatrix],
    baseline_means: &[f64],
    alteration: &AlterationConfig,
    seed: u64,
) -> Result<ReconstructionEval> {
    let w = alteration.time_width;
    let (mut model_sum, mut base_sum, mut cells) = (0f64, 0f64, 0usize);
    for (i, fm) in features.iter().enumerate() {
        let l = fm.num_frames();
        if l < w || w == 0 {
            continue;
        }
        if baseline_means.len() != fm.num_channels() {
            return Err(TeraError::Data(format!("baseline has {} channels, {} has {}", baseline_means.len(), fm.utterance_id, fm.num_channels())));
        }
        let positions = l - w + 1;
        let n = num_time_blocks(alteration.time_fraction, l, w).clamp(1, positions);
        let mut rng = TeraRng::derive(seed, &[i as u64]);
        let mut masked = vec![false; l];
        for s in rng.sample_without_replacement(positions, n) {
            masked[s..s + w].fill(true);
        }
        let mut x = fm.frames.clone();
        for t in (0..l).filter(|&t| masked[t]) {
            x.row_mut(t).fill(0.0);
        }
        let mut g = Graph::new();
        let p = model.store.bind(&mut g, |_| false);
        let xn = g.constant(x);
        let hidden = model.encode(&mut g, &p, xn, &vec![true; l], Mode::Eval)?;
        let pred = model.reconstruct(&mut g, &p, *hidden.last().expect("non-empty stack"))?;
        let pred = g.value(pred);
        for t in (0..l).filter(|&t| masked[t]) {
            for (c, &target) in fm.frames.row(t).iter().enumerate() {
                model_sum += (pred.at(t, c) as f64 - target as f64).abs();
                base_sum += (baseline_means[c] - target as f64).abs();
                cells += 1;
            }
        }
    }
    if cells == 0 {
        return Err(TeraError::EmptyInput("no utterance is long enough to mask".into()));
    }
    Ok(ReconstructionEval { model_l1: model_sum / cells as f64, baseline_l1: base_sum / cells as f64, cells })
}
