use std::collections::HashMap;

use super::FeatureMatrix;
use crate::error::{Result, TeraError};

const MIN_VARIANCE: f64 = 1e-8;

/// Normalize every channel to zero mean and unit variance using statistics
/// pooled over all frames of the same speaker. Output order follows input order.
pub fn cmvn_per_speaker(features: &[FeatureMatrix]) -> Result<Vec<FeatureMatrix>> {
    struct Stats {
        n: usize,
        sum: Vec<f64>,
        sq: Vec<f64>,
    }
    let mut stats: HashMap<&str, Stats> = HashMap::new();
    for fm in features {
        if fm.speaker_id.is_empty() {
            return Err(TeraError::Data(format!("{}: missing speaker_id", fm.utterance_id)));
        }
        let h = fm.num_channels();
        let s = stats
            .entry(fm.speaker_id.as_str())
            .or_insert_with(|| Stats { n: 0, sum: vec![0.0; h], sq: vec![0.0; h] });
        if s.sum.len() != h {
            return Err(TeraError::Data(format!(
                "{}: {h} channels, speaker '{}' has {}",
                fm.utterance_id,
                fm.speaker_id,
                s.sum.len()
            )));
        }
        for t in 0..fm.num_frames() {
            for (c, &v) in fm.frames.row(t).iter().enumerate() {
                s.sum[c] += v as f64;
                s.sq[c] += (v as f64) * (v as f64);
            }
        }
        s.n += fm.num_frames();
    }

    let mut norms: HashMap<&str, (Vec<f64>, Vec<f64>)> = HashMap::new();
    for (spk, s) in &stats {
        if s.n < 2 {
            return Err(TeraError::DegenerateSpeaker { speaker: spk.to_string(), frames: s.n });
        }
        let n = s.n as f64;
        let mean: Vec<f64> = s.sum.iter().map(|v| v / n).collect();
        let scale = s
            .sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| {
                let var = (sq / n - m * m).max(0.0);
                if var < MIN_VARIANCE {
                    1.0
                } else {
                    1.0 / var.sqrt()
                }
            })
            .collect();
        norms.insert(spk, (mean, scale));
    }

    Ok(features
        .iter()
        .map(|fm| {
            let (mean, scale) = &norms[fm.speaker_id.as_str()];
            let h = fm.num_channels();
            let mut out = fm.clone();
            for (i, v) in out.frames.data_mut().iter_mut().enumerate() {
                let c = i % h;
                *v = ((*v as f64 - mean[c]) * scale[c]) as f32;
            }
            out
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureKind;
    use crate::numeric::Tensor;
    use crate::rng::TeraRng;

    fn utt(id: &str, spk: &str, frames: Tensor<f32>) -> FeatureMatrix {
        FeatureMatrix::new(id, spk, frames, FeatureKind::Other, 10.0).unwrap()
    }

    /// Independent pooled statistics for checking post-conditions.
    fn pooled(fms: &[&FeatureMatrix]) -> (Vec<f64>, Vec<f64>) {
        let h = fms[0].num_channels();
        let rows: Vec<&[f32]> = fms.iter().flat_map(|f| (0..f.num_frames()).map(move |t| f.frames.row(t))).collect();
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..h).map(|c| rows.iter().map(|r| r[c] as f64).sum::<f64>() / n).collect();
        let var = (0..h).map(|c| rows.iter().map(|r| (r[c] as f64 - mean[c]).powi(2)).sum::<f64>() / n).collect();
        (mean, var)
    }

    #[test]
    fn single_utterance_standardized() {
        let mut rng = TeraRng::seed_from_u64(1);
        let x = Tensor::randn(&[50, 6], 3.0, &mut rng).map(|v| v + 4.0);
        let out = cmvn_per_speaker(&[utt("a", "s", x)]).unwrap();
        let (m, v) = pooled(&[&out[0]]);
        assert!(m.iter().all(|m| m.abs() < 1e-4));
        assert!(v.iter().all(|v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn speakers_normalized_independently() {
        let mut rng = TeraRng::seed_from_u64(2);
        let a1 = Tensor::randn(&[30, 4], 1.0, &mut rng).map(|v| v + 10.0);
        let a2 = Tensor::randn(&[20, 4], 2.0, &mut rng).map(|v| v + 12.0);
        let b1 = Tensor::randn(&[40, 4], 0.5, &mut rng).map(|v| v - 5.0);
        let out = cmvn_per_speaker(&[utt("a1", "A", a1), utt("b1", "B", b1), utt("a2", "A", a2)]).unwrap();
        assert_eq!(out[1].utterance_id, "b1");
        for group in [vec![&out[0], &out[2]], vec![&out[1]]] {
            let (m, v) = pooled(&group);
            assert!(m.iter().all(|m| m.abs() < 1e-4), "{m:?}");
            assert!(v.iter().all(|v| (v - 1.0).abs() < 1e-3), "{v:?}");
        }
        // within speaker A the two utterances keep their relative offset
        let (ma1, _) = pooled(&[&out[0]]);
        let (ma2, _) = pooled(&[&out[2]]);
        assert!(ma2[0] > ma1[0]);
    }

    #[test]
    fn idempotent() {
        let mut rng = TeraRng::seed_from_u64(3);
        let x = Tensor::randn(&[64, 5], 2.0, &mut rng);
        let once = cmvn_per_speaker(&[utt("a", "s", x)]).unwrap();
        let twice = cmvn_per_speaker(&once).unwrap();
        assert!(once[0].frames.max_abs_diff(&twice[0].frames) < 1e-4);
    }

    #[test]
    fn constant_channel_is_only_shifted() {
        let x = Tensor::new(vec![3, 2], vec![5.0, 1.0, 5.0, 2.0, 5.0, 3.0]).unwrap();
        let out = cmvn_per_speaker(&[utt("a", "s", x)]).unwrap();
        assert!((0..3).all(|t| out[0].frames.at(t, 0) == 0.0));
    }

    #[test]
    fn single_frame_speaker_rejected() {
        let x = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            cmvn_per_speaker(&[utt("a", "lonely", x)]),
            Err(TeraError::DegenerateSpeaker { frames: 1, .. })
        ));
    }
}
