//! Segment file and manifest I/O.
//!
//! A segment file is exactly 1024 little-endian `f32` samples (4096 bytes),
//! no header. A dataset manifest is a JSON array of records, each pointing
//! at one PPG file and one ABP file by path relative to the manifest's own
//! directory, tagged with a train/val/test split and optional generator
//! ground truth.

use std::fs;
use std::io::Read as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PairTruth, SignalError, SignalKind, SignalSegment, SEGMENT_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    /// Path of the PPG segment file, relative to the manifest's directory.
    pub ppg_path: PathBuf,
    pub abp_path: PathBuf,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PairTruth>,
}

/// One loaded pair of segments.
#[derive(Debug, Clone)]
pub struct DataPair {
    pub id: String,
    pub ppg: SignalSegment,
    pub abp: SignalSegment,
    pub split: Split,
    pub truth: Option<PairTruth>,
}

/// A fully loaded dataset, pairs in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub pairs: Vec<DataPair>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&DataPair> {
        self.pairs.iter().filter(|p| p.split == split).collect()
    }
}

fn io_err(path: &Path, source: std::io::Error) -> SignalError {
    SignalError::Io { path: path.display().to_string(), source }
}

fn json_err(path: &Path, source: serde_json::Error) -> SignalError {
    SignalError::ManifestJson { path: path.display().to_string(), source }
}

/// Writes a segment as 1024 little-endian `f32` samples.
pub fn write_segment(path: &Path, segment: &SignalSegment) -> Result<(), SignalError> {
    let mut bytes = Vec::with_capacity(SEGMENT_LEN * 4);
    for &v in segment.samples() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Reads a segment file written by [`write_segment`]. The file length must
/// be exactly 4096 bytes.
pub fn read_segment(path: &Path, id: String, kind: SignalKind) -> Result<SignalSegment, SignalError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    if bytes.len() != SEGMENT_LEN * 4 {
        return Err(SignalError::SegmentBytes {
            path: path.display().to_string(),
            expected: SEGMENT_LEN * 4,
            actual: bytes.len(),
        });
    }
    let samples = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    SignalSegment::new(id, kind, samples)
}

/// Writes a manifest as pretty-printed JSON. Paths inside the records are
/// interpreted relative to `path`'s directory when read back.
pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<(), SignalError> {
    let json = serde_json::to_string_pretty(records).map_err(|e| json_err(path, e))?;
    fs::write(path, json.as_bytes()).map_err(|e| io_err(path, e))
}

/// Reads and validates a manifest: JSON must parse and every referenced
/// segment file must exist (reported by its resolved path).
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, SignalError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let records: Vec<ManifestRecord> =
        serde_json::from_str(&text).map_err(|e| json_err(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    for record in &records {
        for rel in [&record.ppg_path, &record.abp_path] {
            let resolved = base.join(rel);
            if !resolved.is_file() {
                return Err(SignalError::MissingFile { path: resolved.display().to_string() });
            }
        }
    }
    Ok(records)
}

/// Reads a manifest and loads every referenced segment.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset, SignalError> {
    let records = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new(""));
    let mut pairs = Vec::with_capacity(records.len());
    for record in records {
        let ppg = read_segment(&base.join(&record.ppg_path), record.id.clone(), SignalKind::Ppg)?;
        let abp = read_segment(&base.join(&record.abp_path), record.id.clone(), SignalKind::Abp)?;
        pairs.push(DataPair { id: record.id, ppg, abp, split: record.split, truth: record.truth });
    }
    Ok(Dataset { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{synth_pair, SynthParams};

    fn temp_pair(dir: &Path, id: &str, seed: u64, split: Split) -> ManifestRecord {
        let (ppg, abp, truth) = synth_pair(id, seed, &SynthParams::default()).unwrap();
        let ppg_path = PathBuf::from(format!("{id}_ppg.f32"));
        let abp_path = PathBuf::from(format!("{id}_abp.f32"));
        write_segment(&dir.join(&ppg_path), &ppg).unwrap();
        write_segment(&dir.join(&abp_path), &abp).unwrap();
        ManifestRecord { id: id.to_string(), ppg_path, abp_path, split, truth: Some(truth) }
    }

    #[test]
    fn segment_round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (ppg, ..) = synth_pair("rt", 1, &SynthParams::default()).unwrap();
        let path = dir.path().join("seg.f32");
        write_segment(&path, &ppg).unwrap();
        let back = read_segment(&path, "rt".into(), SignalKind::Ppg).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 4096);
        for (a, b) in ppg.samples().iter().zip(back.samples()) {
            assert_eq!(*a as f32, *b as f32); // storage precision is f32
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn truncated_segment_file_is_rejected_with_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.f32");
        fs::write(&path, vec![0u8; 100]).unwrap();
        match read_segment(&path, "s".into(), SignalKind::Abp) {
            Err(SignalError::SegmentBytes { expected, actual, .. }) => {
                assert_eq!(expected, 4096);
                assert_eq!(actual, 100);
            }
            other => panic!("expected SegmentBytes, got {other:?}"),
        }
    }

    #[test]
    fn manifest_round_trip_and_dataset_load() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![
            temp_pair(dir.path(), "a", 1, Split::Train),
            temp_pair(dir.path(), "b", 2, Split::Val),
            temp_pair(dir.path(), "c", 3, Split::Test),
        ];
        let manifest = dir.path().join("manifest.json");
        write_manifest(&manifest, &records).unwrap();
        assert_eq!(read_manifest(&manifest).unwrap(), records);

        let dataset = load_dataset(&manifest).unwrap();
        assert_eq!(dataset.pairs.len(), 3);
        assert_eq!(dataset.split(Split::Train).len(), 1);
        assert_eq!(dataset.split(Split::Val).len(), 1);
        assert_eq!(dataset.split(Split::Test).len(), 1);
        assert_eq!(dataset.pairs[0].id, "a");
        assert_eq!(dataset.pairs[0].ppg.kind, SignalKind::Ppg);
        assert_eq!(dataset.pairs[1].truth.unwrap(), records[1].truth.unwrap());
    }

    #[test]
    fn missing_segment_file_is_reported_by_path() {
        let dir = tempfile::tempdir().unwrap();
        let mut record = temp_pair(dir.path(), "m", 4, Split::Train);
        record.abp_path = PathBuf::from("gone.f32");
        let manifest = dir.path().join("manifest.json");
        write_manifest(&manifest, &[record]).unwrap();
        match read_manifest(&manifest) {
            Err(SignalError::MissingFile { path }) => {
                assert!(path.ends_with("gone.f32"), "{path:?}");
            }
            other => panic!("expected MissingFile, got {other:?}"),
        }
    }

    #[test]
    fn malformed_manifest_json_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("manifest.json");
        fs::write(&manifest, b"{not json").unwrap();
        assert!(matches!(read_manifest(&manifest), Err(SignalError::ManifestJson { .. })));
        // Unknown fields are also rejected, guarding against typos.
        fs::write(
            &manifest,
            br#"[{"id":"x","ppg_path":"p","abp_path":"a","split":"train","bogus":1}]"#,
        )
        .unwrap();
        assert!(matches!(read_manifest(&manifest), Err(SignalError::ManifestJson { .. })));
    }
}
