//! TFEA1: little-endian feature file.
//!
//! ```text
//! "TFEA1" | u8 kind | u32 L | u32 H | f32 frame_shift_ms
//! | u16 len, utterance_id | u16 len, speaker_id | L·H f32 row-major
//! ```

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{FeatureKind, FeatureMatrix};
use crate::error::{Result, TeraError};
use crate::numeric::Tensor;

pub const TFEA_MAGIC: &[u8; 5] = b"TFEA1";

fn write_str(w: &mut impl Write, s: &str, what: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| TeraError::Data(format!("{what} longer than 65535 bytes")))?;
    w.write_u16::<LittleEndian>(len).map_err(|e| TeraError::io(what, e))?;
    w.write_all(s.as_bytes()).map_err(|e| TeraError::io(what, e))
}

pub fn write_features(w: &mut impl Write, fm: &FeatureMatrix) -> Result<()> {
    let io = |e| TeraError::io(&fm.utterance_id, e);
    w.write_all(TFEA_MAGIC).map_err(io)?;
    w.write_u8(fm.kind.code()).map_err(io)?;
    w.write_u32::<LittleEndian>(fm.num_frames() as u32).map_err(io)?;
    w.write_u32::<LittleEndian>(fm.num_channels() as u32).map_err(io)?;
    w.write_f32::<LittleEndian>(fm.frame_shift_ms).map_err(io)?;
    write_str(w, &fm.utterance_id, "utterance_id")?;
    write_str(w, &fm.speaker_id, "speaker_id")?;
    for &v in fm.frames.data() {
        w.write_f32::<LittleEndian>(v).map_err(io)?;
    }
    Ok(())
}

/// Parse one TFEA1 record; `source` names the input in error messages.
pub fn read_features(r: &mut impl Read, source: &str) -> Result<FeatureMatrix> {
    let bad = |msg: &str| TeraError::parse(source, msg);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != TFEA_MAGIC {
        return Err(bad("bad magic, expected TFEA1"));
    }
    let code = r.read_u8().map_err(|_| bad("truncated header"))?;
    let kind = FeatureKind::from_code(code).ok_or_else(|| bad(&format!("unknown feature kind code {code}")))?;
    let frames = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
    let channels = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
    let shift = r.read_f32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
    let mut read_str = |what: &str| -> Result<String> {
        let len = r.read_u16::<LittleEndian>().map_err(|_| bad(&format!("truncated {what}")))? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(|_| bad(&format!("truncated {what}")))?;
        String::from_utf8(buf).map_err(|_| bad(&format!("{what} is not UTF-8")))
    };
    let utt = read_str("utterance_id")?;
    let spk = read_str("speaker_id")?;
    if frames == 0 || channels == 0 {
        return Err(bad("zero frames or channels"));
    }
    let mut data = vec![0f32; frames * channels];
    r.read_f32_into::<LittleEndian>(&mut data).map_err(|_| bad("truncated frame data"))?;
    let tensor = Tensor::new(vec![frames, channels], data)?;
    FeatureMatrix::new(utt, spk, tensor, kind, shift).map_err(|e| bad(&e.to_string()))
}

/// Atomic write (temp file, then rename).
pub fn save_features(path: impl AsRef<Path>, fm: &FeatureMatrix) -> Result<()> {
    let path = path.as_ref();
    crate::util::write_atomic(path, |w| write_features(w, fm))
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| TeraError::io(path, e))?;
    let mut r = BufReader::new(file);
    let fm = read_features(&mut r, &path.display().to_string())?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| TeraError::io(path, e))? != 0 {
        return Err(TeraError::parse(path.display(), "trailing bytes after frame data"));
    }
    Ok(fm)
}
