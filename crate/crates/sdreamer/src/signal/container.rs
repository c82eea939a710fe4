//! On-disk subject containers.
//!
//! A subject is a directory holding:
//!
//! * `meta` — text header, one `key = value` per line: `subject_id`,
//!   `sample_rate_hz`, and `channels` (comma-separated subset of `eeg,emg`
//!   in that fixed order).
//! * `eeg.f32le` / `emg.f32le` — raw little-endian 32-bit float samples,
//!   one file per channel listed in `channels`.
//! * `labels.txt` — one character per second from `{W, S, R, -}`, no
//!   newlines.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{label_code, label_from_code, SignalError, SignalRecord};

/// Read one subject directory into a [`SignalRecord`].
pub fn load_record(dir: &Path) -> Result<SignalRecord, SignalError> {
    let meta_path = dir.join("meta");
    let meta_text = fs::read_to_string(&meta_path)
        .map_err(|source| SignalError::Io { path: meta_path.clone(), source })?;

    let mut subject_id = None;
    let mut sample_rate_hz = None;
    let mut channels = None;
    let mut offset = 0u64;
    for line in meta_text.lines() {
        let line_offset = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(malformed(&meta_path, line_offset, format!("expected `key = value`, got {:?}", line)));
        };
        let (key, value) = (key.trim(), value.trim());
        match key {
            "subject_id" => subject_id = Some(value.to_string()),
            "sample_rate_hz" => {
                let rate: u32 = value.parse().map_err(|_| {
                    malformed(&meta_path, line_offset, format!("sample_rate_hz {:?} is not a positive integer", value))
                })?;
                if rate == 0 {
                    return Err(malformed(&meta_path, line_offset, "sample_rate_hz must be positive".into()));
                }
                sample_rate_hz = Some(rate);
            }
            "channels" => {
                let list: Vec<&str> = value.split(',').map(str::trim).collect();
                let (eeg, emg) = match list.as_slice() {
                    ["eeg", "emg"] => (true, true),
                    ["eeg"] => (true, false),
                    ["emg"] => (false, true),
                    _ => {
                        return Err(malformed(
                            &meta_path,
                            line_offset,
                            format!("channels must be a subset of `eeg,emg` in order, got {:?}", value),
                        ))
                    }
                };
                channels = Some((eeg, emg));
            }
            other => {
                return Err(malformed(&meta_path, line_offset, format!("unknown meta key {:?}", other)));
            }
        }
    }
    let subject_id = subject_id
        .ok_or_else(|| malformed(&meta_path, 0, "missing subject_id".into()))?;
    let sample_rate_hz = sample_rate_hz
        .ok_or_else(|| malformed(&meta_path, 0, "missing sample_rate_hz".into()))?;
    let (has_eeg, has_emg) =
        channels.ok_or_else(|| malformed(&meta_path, 0, "missing channels".into()))?;

    let eeg = if has_eeg { read_f32le(&dir.join("eeg.f32le"))? } else { Vec::new() };
    let emg = if has_emg { read_f32le(&dir.join("emg.f32le"))? } else { Vec::new() };
    if has_eeg && has_emg && eeg.len() != emg.len() {
        return Err(SignalError::ChannelMismatch {
            path: dir.to_path_buf(),
            eeg: eeg.len(),
            emg: emg.len(),
        });
    }

    let labels_path = dir.join("labels.txt");
    let labels_text = fs::read_to_string(&labels_path)
        .map_err(|source| SignalError::Io { path: labels_path.clone(), source })?;
    let labels_text = labels_text.strip_suffix('\n').unwrap_or(&labels_text);
    let mut labels = Vec::with_capacity(labels_text.len());
    for (i, c) in labels_text.chars().enumerate() {
        let label = label_from_code(c).ok_or_else(|| {
            malformed(&labels_path, i as u64, format!("invalid label character {:?}", c))
        })?;
        labels.push(label);
    }

    let sample_len = if has_eeg { eeg.len() } else { emg.len() };
    let expected = sample_len / sample_rate_hz as usize;
    if labels.len() != expected {
        return Err(SignalError::LabelCount {
            path: labels_path,
            offset: labels.len().min(expected) as u64,
            expected,
            got: labels.len(),
        });
    }

    Ok(SignalRecord { subject_id, sample_rate_hz, eeg, emg, labels })
}

/// Write a record as a subject directory (creating it if needed).
pub fn save_record(dir: &Path, record: &SignalRecord) -> Result<(), SignalError> {
    fs::create_dir_all(dir).map_err(|source| SignalError::Io { path: dir.to_path_buf(), source })?;

    let channels = match (record.eeg.is_empty(), record.emg.is_empty()) {
        (false, false) => "eeg,emg",
        (false, true) => "eeg",
        (true, false) => "emg",
        (true, true) => {
            return Err(SignalError::EmptyRecord { subject: record.subject_id.clone() })
        }
    };
    let meta = format!(
        "subject_id = {}\nsample_rate_hz = {}\nchannels = {}\n",
        record.subject_id, record.sample_rate_hz, channels
    );
    write_file(&dir.join("meta"), meta.as_bytes())?;

    if !record.eeg.is_empty() {
        write_f32le(&dir.join("eeg.f32le"), &record.eeg)?;
    }
    if !record.emg.is_empty() {
        write_f32le(&dir.join("emg.f32le"), &record.emg)?;
    }

    let labels: String = record.labels.iter().map(|&l| label_code(l)).collect();
    write_file(&dir.join("labels.txt"), labels.as_bytes())
}

fn malformed(path: &Path, offset: u64, what: String) -> SignalError {
    SignalError::Malformed { path: path.to_path_buf(), offset, what }
}

fn read_f32le(path: &Path) -> Result<Vec<f64>, SignalError> {
    let bytes = fs::read(path).map_err(|source| SignalError::Io { path: path.to_path_buf(), source })?;
    if bytes.len() % 4 != 0 {
        return Err(malformed(
            path,
            (bytes.len() - bytes.len() % 4) as u64,
            format!("file length {} is not a multiple of 4", bytes.len()),
        ));
    }
    let mut out = Vec::with_capacity(bytes.len() / 4);
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(malformed(path, (i * 4) as u64, format!("non-finite sample {}", v)));
        }
        out.push(v as f64);
    }
    Ok(out)
}

fn write_f32le(path: &Path, samples: &[f64]) -> Result<(), SignalError> {
    let mut bytes = Vec::with_capacity(samples.len() * 4);
    for &v in samples {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_file(path, &bytes)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), SignalError> {
    let mut f = fs::File::create(path)
        .map_err(|source| SignalError::Io { path: path.to_path_buf(), source })?;
    f.write_all(bytes).map_err(|source| SignalError::Io { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::Stage;

    fn sample_record() -> SignalRecord {
        SignalRecord {
            subject_id: "s00".into(),
            sample_rate_hz: 8,
            eeg: (0..32).map(|i| i as f64 * 0.25 - 4.0).collect(),
            emg: (0..32).map(|i| (i as f64 * 0.5).sin()).collect(),
            labels: vec![Some(Stage::Wake), None, Some(Stage::Rem), Some(Stage::Sws)],
        }
    }

    #[test]
    fn roundtrip_preserves_record() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample_record();
        save_record(dir.path(), &r).unwrap();
        let loaded = load_record(dir.path()).unwrap();
        assert_eq!(loaded.subject_id, "s00");
        assert_eq!(loaded.sample_rate_hz, 8);
        assert_eq!(loaded.eeg.len(), 32);
        assert_eq!(loaded.labels, r.labels);
        // f32 storage: values survive within f32 precision.
        for (a, b) in loaded.eeg.iter().zip(&r.eeg) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn four_seconds_at_8hz_gives_32_samples_4_labels() {
        let dir = tempfile::tempdir().unwrap();
        save_record(dir.path(), &sample_record()).unwrap();
        let r = load_record(dir.path()).unwrap();
        assert_eq!(r.eeg.len(), 32);
        assert_eq!(r.labels.len(), 4);
        assert_eq!(r.labels[1], None);
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        save_record(dir.path(), &sample_record()).unwrap();
        // Append one extra sample (4 bytes) to eeg.
        let path = dir.path().join("eeg.f32le");
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let err = load_record(dir.path()).unwrap_err();
        assert!(matches!(err, SignalError::ChannelMismatch { eeg: 33, emg: 32, .. }));
    }

    #[test]
    fn label_count_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        save_record(dir.path(), &sample_record()).unwrap();
        std::fs::write(dir.path().join("labels.txt"), "WSR").unwrap();
        let err = load_record(dir.path()).unwrap_err();
        assert!(matches!(err, SignalError::LabelCount { expected: 4, got: 3, .. }));
    }

    #[test]
    fn bad_label_char_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        save_record(dir.path(), &sample_record()).unwrap();
        std::fs::write(dir.path().join("labels.txt"), "WSXR").unwrap();
        let err = load_record(dir.path()).unwrap_err();
        match err {
            SignalError::Malformed { offset, .. } => assert_eq!(offset, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn truncated_f32_stream_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        save_record(dir.path(), &sample_record()).unwrap();
        let path = dir.path().join("emg.f32le");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        let err = load_record(dir.path()).unwrap_err();
        assert!(matches!(err, SignalError::Malformed { .. }));
    }

    #[test]
    fn mono_channel_container_loads() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = sample_record();
        r.eeg.clear();
        save_record(dir.path(), &r).unwrap();
        let loaded = load_record(dir.path()).unwrap();
        assert!(loaded.eeg.is_empty());
        assert_eq!(loaded.emg.len(), 32);
        assert!(!loaded.modalities().eeg);
        assert!(loaded.modalities().emg);
    }
}
