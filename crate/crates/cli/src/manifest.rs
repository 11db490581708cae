//! Tab-separated manifests: a header line, then one utterance per row.
//!
//! ```text
//! utterance_id	speaker_id	path	label_path
//! spk000-utt000	spk000	feats/spk000-utt000.tfea	labels/spk000-utt000.txt
//! ```
//!
//! `label_path` is optional. Relative paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use tera_core::features::{Corpus, CorpusEntry, Split};
use tera_core::{Result, TeraError};

const REQUIRED: [&str; 3] = ["utterance_id", "speaker_id", "path"];
const LABELS: &str = "label_path";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub utterance_id: String,
    pub speaker_id: String,
    pub path: PathBuf,
    pub label_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let name = source.display();
        let base = source.parent().unwrap_or(Path::new(""));
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| TeraError::parse(&name, "missing header line"))?;
        let columns: Vec<&str> = header.split('\t').map(str::trim).collect();
        let find = |c: &str| columns.iter().position(|h| *h == c);
        let mut idx = [0usize; 3];
        for (slot, col) in idx.iter_mut().zip(REQUIRED) {
            *slot = find(col).ok_or_else(|| TeraError::parse(&name, format!("header lacks column '{col}'")))?;
        }
        if let Some(unknown) = columns.iter().find(|c| !REQUIRED.contains(c) && **c != LABELS) {
            return Err(TeraError::parse(&name, format!("unknown column '{unknown}'")));
        }
        let label_idx = find(LABELS);

        let mut rows = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in lines {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != columns.len() {
                return Err(TeraError::parse(
                    format!("{name}:{}", n + 1),
                    format!("{} fields, header has {}", fields.len(), columns.len()),
                ));
            }
            let field = |i: usize, col: &str| -> Result<&str> {
                let v = fields[i].trim();
                if v.is_empty() {
                    Err(TeraError::parse(format!("{name}:{}", n + 1), format!("empty {col}")))
                } else {
                    Ok(v)
                }
            };
            let utterance_id = field(idx[0], "utterance_id")?.to_string();
            if !seen.insert(utterance_id.clone()) {
                return Err(TeraError::parse(format!("{name}:{}", n + 1), format!("duplicate utterance_id '{utterance_id}'")));
            }
            let label_path = match label_idx {
                Some(i) if !fields[i].trim().is_empty() => Some(base.join(fields[i].trim())),
                _ => None,
            };
            rows.push(ManifestRow {
                utterance_id,
                speaker_id: field(idx[1], "speaker_id")?.to_string(),
                path: base.join(field(idx[2], "path")?),
                label_path,
            });
        }
        Ok(Manifest { rows })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TeraError::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Fails on the first row whose files are missing.
    pub fn check_paths(&self) -> Result<()> {
        for r in &self.rows {
            for p in std::iter::once(&r.path).chain(&r.label_path) {
                if !p.is_file() {
                    return Err(TeraError::Data(format!("{}: file {} not found", r.utterance_id, p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn corpus(&self, split: Split) -> Result<Corpus> {
        let entries = self
            .rows
            .iter()
            .map(|r| CorpusEntry { utterance_id: r.utterance_id.clone(), speaker_id: r.speaker_id.clone(), path: r.path.clone() })
            .collect();
        Corpus::new(entries, split)
    }

    /// Render with paths relative to `dir` where possible.
    pub fn to_tsv(&self, dir: &Path) -> String {
        let with_labels = self.rows.iter().any(|r| r.label_path.is_some());
        let rel = |p: &Path| p.strip_prefix(dir).unwrap_or(p).display().to_string();
        let mut out = String::from("utterance_id\tspeaker_id\tpath");
        if with_labels {
            out.push_str("\tlabel_path");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{}\t{}\t{}", r.utterance_id, r.speaker_id, rel(&r.path));
            if with_labels {
                let _ = write!(out, "\t{}", r.label_path.as_deref().map(rel).unwrap_or_default());
            }
            out.push('\n');
        }
        out
    }
}

/// Frame labels: one non-negative integer per line.
pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| TeraError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.trim()
                .parse()
                .map_err(|_| TeraError::parse(format!("{}:{}", path.display(), n + 1), format!("bad label '{}'", l.trim())))
        })
        .collect()
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
    tera_core::util::write_text_atomic(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Manifest> {
        Manifest::parse(text, Path::new("data/m.tsv"))
    }

    #[test]
    fn columns_in_any_order() {
        let m = parse("path\tspeaker_id\tutterance_id\na.tfea\ts1\tu1\n\nb.tfea\ts2\tu2\n").unwrap();
        assert_eq!(m.rows.len(), 2);
        assert_eq!(m.rows[1].utterance_id, "u2");
        assert_eq!(m.rows[0].path, Path::new("data/a.tfea"));
        assert!(m.rows[0].label_path.is_none());
    }

    #[test]
    fn optional_labels() {
        let m = parse("utterance_id\tspeaker_id\tpath\tlabel_path\nu1\ts\ta\tl1\nu2\ts\tb\t\n").unwrap();
        assert_eq!(m.rows[0].label_path.as_deref(), Some(Path::new("data/l1")));
        assert_eq!(m.rows[1].label_path, None);
    }

    #[test]
    fn rejects_bad_input() {
        for (text, needle) in [
            ("", "header"),
            ("utterance_id\tpath\n", "speaker_id"),
            ("utterance_id\tspeaker_id\tpath\textra\n", "extra"),
            ("utterance_id\tspeaker_id\tpath\nu\ts\n", "m.tsv:2"),
            ("utterance_id\tspeaker_id\tpath\nu\ts\ta\nu\ts\tb\n", "duplicate"),
            ("utterance_id\tspeaker_id\tpath\nu\t\ta\n", "speaker_id"),
        ] {
            let e = parse(text).unwrap_err().to_string();
            assert!(e.contains(needle), "{text:?}: {e}");
            assert!(e.contains("m.tsv"), "{e}");
        }
    }

    #[test]
    fn tsv_round_trip() {
        let m = parse("utterance_id\tspeaker_id\tpath\tlabel_path\nu1\ts\ta.tfea\tl/u1.txt\n").unwrap();
        let again = parse(&m.to_tsv(Path::new("data"))).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.txt");
        write_labels(&p, &[3, 0, 7]).unwrap();
        assert_eq!(read_labels(&p).unwrap(), vec![3, 0, 7]);
        std::fs::write(&p, "1\nx\n").unwrap();
        assert!(read_labels(&p).unwrap_err().to_string().contains("l.txt:2"));
    }
}
