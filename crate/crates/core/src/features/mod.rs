//! Acoustic features: FBANK/MFCC extraction, per-speaker CMVN and the TFEA1 file format.

mod cmvn;
mod dsp;
mod tfea;
mod wav;

pub use cmvn::cmvn_per_speaker;
pub use dsp::{deltas, fbank, hz_to_mel, mel_to_hz, mfcc, FrameConfig, LOG_FLOOR, MFCC_CEPSTRA, MFCC_MEL_BINS};
pub use tfea::{load_features, read_features, save_features, write_features, TFEA_MAGIC};
pub use wav::{read_wav, write_wav};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TeraError};
use crate::numeric::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const FRAME_SHIFT_MS: f32 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Fbank,
    Mfcc,
    Fmllr,
    Other,
}

impl FeatureKind {
    /// Declared channel count, `None` for kinds of free dimension.
    pub fn dim(self) -> Option<usize> {
        match self {
            FeatureKind::Fbank => Some(80),
            FeatureKind::Mfcc => Some(39),
            FeatureKind::Fmllr => Some(40),
            FeatureKind::Other => None,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            FeatureKind::Fbank => 0,
            FeatureKind::Mfcc => 1,
            FeatureKind::Fmllr => 2,
            FeatureKind::Other => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => FeatureKind::Fbank,
            1 => FeatureKind::Mfcc,
            2 => FeatureKind::Fmllr,
            3 => FeatureKind::Other,
            _ => return None,
        })
    }
}

/// One utterance's features: `frames` is `[L_x, H_x]`, frame index by channel index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub utterance_id: String,
    pub speaker_id: String,
    pub frames: Tensor<f32>,
    pub kind: FeatureKind,
    pub frame_shift_ms: f32,
}

impl FeatureMatrix {
    pub fn new(
        utterance_id: impl Into<String>,
        speaker_id: impl Into<String>,
        frames: Tensor<f32>,
        kind: FeatureKind,
        frame_shift_ms: f32,
    ) -> Result<Self> {
        let fm = FeatureMatrix {
            utterance_id: utterance_id.into(),
            speaker_id: speaker_id.into(),
            frames,
            kind,
            frame_shift_ms,
        };
        fm.validate()?;
        Ok(fm)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.frames.shape();
        if shape.len() != 2 {
            return Err(TeraError::Data(format!("{}: frames must be 2-D, got {shape:?}", self.utterance_id)));
        }
        if let Some(dim) = self.kind.dim() {
            if self.num_channels() != dim {
                return Err(TeraError::Data(format!(
                    "{}: {:?} features must have {dim} channels, got {}",
                    self.utterance_id,
                    self.kind,
                    self.num_channels()
                )));
            }
        }
        if !self.frames.is_finite() {
            return Err(TeraError::Data(format!("{}: non-finite feature value", self.utterance_id)));
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn num_channels(&self) -> usize {
        self.frames.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub utterance_id: String,
    pub speaker_id: String,
    pub path: std::path::PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub entries: Vec<CorpusEntry>,
    pub split: Split,
}

impl Corpus {
    pub fn new(entries: Vec<CorpusEntry>, split: Split) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if e.speaker_id.is_empty() {
                return Err(TeraError::Data(format!("{}: empty speaker_id", e.utterance_id)));
            }
            if !seen.insert(e.utterance_id.as_str()) {
                return Err(TeraError::Data(format!("duplicate utterance_id '{}'", e.utterance_id)));
            }
        }
        Ok(Corpus { entries, split })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Load every entry's TFEA1 file, in manifest order.
    pub fn load(&self) -> Result<Vec<FeatureMatrix>> {
        self.entries.iter().map(|e| load_features(&e.path)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_dimension_enforced() {
        let t = Tensor::zeros(&[3, 40]);
        assert!(FeatureMatrix::new("u", "s", t.clone(), FeatureKind::Fmllr, 10.0).is_ok());
        assert!(FeatureMatrix::new("u", "s", t.clone(), FeatureKind::Fbank, 10.0).is_err());
        assert!(FeatureMatrix::new("u", "s", t, FeatureKind::Other, 10.0).is_ok());
    }

    #[test]
    fn corpus_rejects_duplicates() {
        let e = |u: &str| CorpusEntry { utterance_id: u.into(), speaker_id: "s".into(), path: "x".into() };
        assert!(Corpus::new(vec![e("a"), e("b")], Split::Train).is_ok());
        assert!(Corpus::new(vec![e("a"), e("a")], Split::Train).is_err());
    }
}
