use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{FeatureKind, FeatureMatrix, FRAME_SHIFT_MS, SAMPLE_RATE};
use crate::error::{Result, TeraError};
use crate::numeric::Tensor;

/// Natural-log floor applied to filterbank energies.
pub const LOG_FLOOR: f64 = 1e-10;
pub const MFCC_MEL_BINS: usize = 23;
pub const MFCC_CEPSTRA: usize = 13;
const DELTA_WINDOW: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct FrameConfig {
    pub window: usize,
    pub shift: usize,
    pub n_fft: usize,
    pub preemphasis: f64,
    pub low_hz: f64,
    pub high_hz: f64,
}

impl Default for FrameConfig {
    fn default() -> Self {
        // 25 ms windows every 10 ms at 16 kHz
        FrameConfig { window: 400, shift: 160, n_fft: 512, preemphasis: 0.97, low_hz: 20.0, high_hz: 8000.0 }
    }
}

impl FrameConfig {
    pub fn num_frames(&self, samples: usize) -> usize {
        if samples < self.window {
            0
        } else {
            (samples - self.window) / self.shift + 1
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters, equally spaced on the mel scale, over the power-spectrum bins.
fn mel_filters(cfg: &FrameConfig, n_mels: usize) -> Vec<Vec<(usize, f64)>> {
    let n_bins = cfg.n_fft / 2 + 1;
    let lo = hz_to_mel(cfg.low_hz);
    let hi = hz_to_mel(cfg.high_hz);
    let delta = (hi - lo) / (n_mels + 1) as f64;
    (0..n_mels)
        .map(|m| {
            let left = lo + m as f64 * delta;
            let center = left + delta;
            let right = center + delta;
            (0..n_bins)
                .filter_map(|k| {
                    let mel = hz_to_mel(k as f64 * SAMPLE_RATE as f64 / cfg.n_fft as f64);
                    let w = if mel > left && mel <= center {
                        (mel - left) / (center - left)
                    } else if mel > center && mel < right {
                        (right - mel) / (right - center)
                    } else {
                        0.0
                    };
                    (w > 0.0).then_some((k, w))
                })
                .collect()
        })
        .collect()
}

struct Framer {
    cfg: FrameConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Framer {
    fn new(cfg: FrameConfig) -> Self {
        let n = cfg.window;
        // periodic Hamming
        let window = (0..n)
            .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Framer { cfg, window, fft }
    }

    fn power_spectrum(&self, samples: &[i16], start: usize, buf: &mut Vec<Complex<f64>>) -> Vec<f64> {
        let n = self.cfg.window;
        let frame: Vec<f64> = samples[start..start + n].iter().map(|&s| s as f64).collect();
        buf.clear();
        buf.resize(self.cfg.n_fft, Complex::new(0.0, 0.0));
        for i in 0..n {
            let prev = if i == 0 { frame[0] } else { frame[i - 1] };
            let v = frame[i] - self.cfg.preemphasis * prev;
            buf[i] = Complex::new(v * self.window[i], 0.0);
        }
        self.fft.process(buf);
        buf[..self.cfg.n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }

    fn log_mel(&self, samples: &[i16], n_mels: usize) -> Vec<Vec<f64>> {
        let filters = mel_filters(&self.cfg, n_mels);
        let n_frames = self.cfg.num_frames(samples.len());
        let mut buf = Vec::new();
        (0..n_frames)
            .map(|f| {
                let power = self.power_spectrum(samples, f * self.cfg.shift, &mut buf);
                filters
                    .iter()
                    .map(|filt| {
                        let e: f64 = filt.iter().map(|&(k, w)| w * power[k]).sum();
                        e.max(LOG_FLOOR).ln()
                    })
                    .collect()
            })
            .collect()
    }
}

fn check_input(samples: &[i16], sample_rate: u32, cfg: &FrameConfig) -> Result<()> {
    if sample_rate != SAMPLE_RATE {
        return Err(TeraError::UnsupportedRate(sample_rate));
    }
    if samples.len() < cfg.window {
        return Err(TeraError::EmptyInput(format!(
            "waveform has {} samples, need at least {}",
            samples.len(),
            cfg.window
        )));
    }
    Ok(())
}

fn to_tensor(rows: &[Vec<f64>]) -> Tensor<f32> {
    let cols = rows[0].len();
    let data = rows.iter().flatten().map(|&v| v as f32).collect();
    Tensor::new(vec![rows.len(), cols], data).expect("feature shape")
}

/// Log mel-filterbank energies. The result is typed `Fbank` only at the
/// standard 80 bins; other bin counts are returned as `Other`.
pub fn fbank(
    utterance_id: &str,
    speaker_id: &str,
    samples: &[i16],
    sample_rate: u32,
    n_mels: usize,
) -> Result<FeatureMatrix> {
    let cfg = FrameConfig::default();
    check_input(samples, sample_rate, &cfg)?;
    if n_mels == 0 {
        return Err(TeraError::Config("n_mels must be positive".into()));
    }
    let rows = Framer::new(cfg).log_mel(samples, n_mels);
    let kind = if n_mels == 80 { FeatureKind::Fbank } else { FeatureKind::Other };
    FeatureMatrix::new(utterance_id, speaker_id, to_tensor(&rows), kind, FRAME_SHIFT_MS)
}

/// 13 cepstra (orthonormal DCT-II of 23 log-mel energies, C0 included) plus
/// deltas and delta-deltas.
pub fn mfcc(utterance_id: &str, speaker_id: &str, samples: &[i16], sample_rate: u32) -> Result<FeatureMatrix> {
    let cfg = FrameConfig::default();
    check_input(samples, sample_rate, &cfg)?;
    let logmel = Framer::new(cfg).log_mel(samples, MFCC_MEL_BINS);
    let n = MFCC_MEL_BINS as f64;
    let basis: Vec<Vec<f64>> = (0..MFCC_CEPSTRA)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            (0..MFCC_MEL_BINS)
                .map(|j| scale * (std::f64::consts::PI * k as f64 * (j as f64 + 0.5) / n).cos())
                .collect()
        })
        .collect();
    let ceps: Vec<Vec<f64>> = logmel
        .iter()
        .map(|row| basis.iter().map(|b| b.iter().zip(row).map(|(w, v)| w * v).sum()).collect())
        .collect();
    let d1 = delta_rows(&ceps, DELTA_WINDOW);
    let d2 = delta_rows(&d1, DELTA_WINDOW);
    let rows: Vec<Vec<f64>> = ceps
        .iter()
        .zip(&d1)
        .zip(&d2)
        .map(|((c, a), b)| c.iter().chain(a).chain(b).copied().collect())
        .collect();
    FeatureMatrix::new(utterance_id, speaker_id, to_tensor(&rows), FeatureKind::Mfcc, FRAME_SHIFT_MS)
}

/// Regression deltas `Σₙ n·(c[t+n] − c[t−n]) / (2·Σₙ n²)`, edges replicated.
fn delta_rows(rows: &[Vec<f64>], window: usize) -> Vec<Vec<f64>> {
    let len = rows.len() as isize;
    let denom: f64 = 2.0 * (1..=window).map(|n| (n * n) as f64).sum::<f64>();
    let at = |t: isize| &rows[t.clamp(0, len - 1) as usize];
    (0..len)
        .map(|t| {
            let mut out = vec![0.0; rows[0].len()];
            for n in 1..=window as isize {
                for ((o, a), b) in out.iter_mut().zip(at(t + n)).zip(at(t - n)) {
                    *o += n as f64 * (a - b);
                }
            }
            out.iter_mut().for_each(|o| *o /= denom);
            out
        })
        .collect()
}

/// Delta features of a `[L, H]` matrix along the frame axis.
pub fn deltas(x: &Tensor<f32>, window: usize) -> Tensor<f32> {
    let rows: Vec<Vec<f64>> = (0..x.rows()).map(|r| x.row(r).iter().map(|&v| v as f64).collect()).collect();
    to_tensor(&delta_rows(&rows, window))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, n: usize) -> Vec<i16> {
        (0..n)
            .map(|i| (10_000.0 * (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin()) as i16)
            .collect()
    }

    #[test]
    fn one_second_gives_98_frames() {
        let f = fbank("u", "s", &vec![0; 16_000], 16_000, 80).unwrap();
        assert_eq!(f.num_frames(), (16_000 - 400) / 160 + 1);
        assert_eq!(f.num_frames(), 98);
        assert_eq!(f.kind, FeatureKind::Fbank);
    }

    #[test]
    fn silence_hits_log_floor() {
        let f = fbank("u", "s", &vec![0; 1000], 16_000, 80).unwrap();
        let floor = LOG_FLOOR.ln() as f32;
        assert!(f.frames.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn tone_energy_lands_in_bracketing_filters() {
        let f = fbank("u", "s", &sine(1000.0, 16_000), 16_000, 80).unwrap();
        // oracle: filter m is centred at mel_low + (m+1)·Δ
        let lo = 2595.0 * (1.0f64 + 20.0 / 700.0).log10();
        let hi = 2595.0 * (1.0f64 + 8000.0 / 700.0).log10();
        let delta = (hi - lo) / 81.0;
        let centre = |m: usize| 700.0 * (10f64.powf((lo + (m + 1) as f64 * delta) / 2595.0) - 1.0);
        let below = (0..80).filter(|&m| centre(m) <= 1000.0).max().unwrap();
        let allowed = [below, below + 1];
        for t in 0..f.num_frames() {
            let row = f.frames.row(t);
            let argmax = (0..80).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert!(allowed.contains(&argmax), "frame {t}: argmax {argmax}, allowed {allowed:?}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(fbank("u", "s", &[0; 399], 16_000, 80), Err(TeraError::EmptyInput(_))));
        assert!(matches!(fbank("u", "s", &[0; 1000], 8_000, 80), Err(TeraError::UnsupportedRate(8000))));
        assert!(matches!(mfcc("u", "s", &[0; 10], 16_000), Err(TeraError::EmptyInput(_))));
    }

    #[test]
    fn mfcc_shape_and_silence_deltas() {
        let f = mfcc("u", "s", &vec![0; 16_000], 16_000).unwrap();
        assert_eq!(f.frames.shape(), &[98, 39]);
        for t in 0..98 {
            assert!(f.frames.row(t)[13..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn mfcc_is_deterministic() {
        let w = sine(440.0, 8000);
        assert_eq!(mfcc("u", "s", &w, 16_000).unwrap(), mfcc("u", "s", &w, 16_000).unwrap());
    }

    #[test]
    fn ramp_deltas() {
        let slope = 0.75f32;
        let x = Tensor::new(vec![12, 2], (0..12).flat_map(|t| [slope * t as f32, 1.0 - slope * t as f32]).collect())
            .unwrap();
        let d1 = deltas(&x, 2);
        let d2 = deltas(&d1, 2);
        // interior frames only: edge replication bends the ends
        for t in 4..8 {
            assert!((d1.at(t, 0) - slope).abs() < 1e-6);
            assert!((d1.at(t, 1) + slope).abs() < 1e-6);
            assert!(d2.at(t, 0).abs() < 1e-6);
        }
    }
}
