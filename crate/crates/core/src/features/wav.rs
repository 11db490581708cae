use std::path::Path;

use crate::error::{Result, TeraError};

/// Read a mono 16-bit PCM WAV file; returns samples and sample rate.
pub fn read_wav(path: impl AsRef<Path>) -> Result<(Vec<i16>, u32)> {
    let path = path.as_ref();
    let bad = |msg: String| TeraError::parse(path.display(), msg);
    let reader = hound::WavReader::open(path).map_err(|e| bad(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(bad(format!("expected mono audio, found {} channels", spec.channels)));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(bad(format!("expected 16-bit PCM, found {}-bit {:?}", spec.bits_per_sample, spec.sample_format)));
    }
    let samples = reader.into_samples::<i16>().collect::<std::result::Result<Vec<_>, _>>().map_err(|e| bad(e.to_string()))?;
    Ok((samples, spec.sample_rate))
}

pub fn write_wav(path: impl AsRef<Path>, samples: &[i16], sample_rate: u32) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec { channels: 1, sample_rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let err = |e: hound::Error| TeraError::parse(path.display(), e.to_string());
    let mut w = hound::WavWriter::create(path, spec).map_err(err)?;
    for &s in samples {
        w.write_sample(s).map_err(err)?;
    }
    w.finalize().map_err(err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let samples: Vec<i16> = (0..500).map(|i| (i * 37 % 2000) as i16 - 1000).collect();
        write_wav(&p, &samples, 16_000).unwrap();
        assert_eq!(read_wav(&p).unwrap(), (samples, 16_000));
    }
}
